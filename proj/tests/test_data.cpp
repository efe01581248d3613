#include <doctest.h>

#include <filesystem>
#include <fstream>
#include <set>

#include "dir3d/data.hpp"
#include "dir3d/errors.hpp"
#include "json.hpp"

using namespace dir3d;
namespace fs = std::filesystem;

namespace {

using Windows = std::vector<std::pair<std::size_t, std::size_t>>;

fs::path scratch(const std::string& name) {
  auto dir = fs::temp_directory_path() / ("dir3d_data_" + name);
  fs::remove_all(dir);
  fs::create_directories(dir);
  return dir;
}

SynthOptions small(std::uint64_t seed) {
  SynthOptions o;
  o.videos_per_class = 2;
  o.subjects = 3;
  o.seed = seed;
  return o;
}

void write_lines(const fs::path& path, const std::vector<std::string>& lines) {
  std::ofstream os(path);
  for (const auto& l : lines) os << l << '\n';
}

std::vector<std::string> read_lines(const fs::path& path) {
  std::ifstream is(path);
  std::vector<std::string> out;
  for (std::string l; std::getline(is, l);) out.push_back(l);
  return out;
}

}  // namespace

TEST_SUITE("window_video") {
  TEST_CASE("sliding windows drop the partial tail") {
    CHECK(window_video(25, Windowing::Sliding) == Windows{{0, 10}, {10, 20}});
    CHECK(window_video(30, Windowing::Sliding) == Windows{{0, 10}, {10, 20}, {20, 30}});
  }

  TEST_CASE("last ten") { CHECK(window_video(17, Windowing::LastTen) == Windows{{7, 17}}); }

  TEST_CASE("exactly ten frames give one window under either rule") {
    CHECK(window_video(10, Windowing::Sliding) == Windows{{0, 10}});
    CHECK(window_video(10, Windowing::LastTen) == Windows{{0, 10}});
  }

  TEST_CASE("short videos are data errors naming the video") {
    try {
      window_video(9, Windowing::Sliding, "clip_042");
      FAIL("expected DataError");
    } catch (const DataError& e) {
      CHECK(std::string(e.what()).find("clip_042") != std::string::npos);
    }
  }

  TEST_CASE("sliding windows are disjoint and cover a prefix") {
    for (std::size_t n = 10; n < 200; ++n) {
      const auto w = window_video(n, Windowing::Sliding);
      CHECK(w.size() == n / 10);
      std::size_t next = 0;
      for (const auto& [b, e] : w) {
        CHECK(b == next);
        CHECK(e - b == kSequenceLength);
        next = e;
      }
      CHECK(n - next < 10);
    }
  }

  TEST_CASE("rule names") {
    CHECK(parse_windowing("sliding") == Windowing::Sliding);
    CHECK(parse_windowing(to_string(Windowing::LastTen)) == Windowing::LastTen);
    CHECK_THROWS_AS(parse_windowing("overlap"), DataError);
  }
}

TEST_SUITE("images") {
  TEST_CASE("pgm and ppm round trip") {
    const auto dir = scratch("img");
    Image g{2, 3, 1, {0.0f, 0.2f, 0.4f, 0.6f, 0.8f, 1.0f}};
    write_pgm(dir / "g.pgm", g);
    const auto back = read_pnm(dir / "g.pgm");
    CHECK(back.height == 2);
    CHECK(back.width == 3);
    CHECK(back.channels == 1);
    for (std::size_t i = 0; i < 6; ++i) CHECK(std::abs(back.pixels[i] - g.pixels[i]) <= 0.5f / 255.0f + 1e-6f);

    Image rgb{1, 2, 3, {1.0f, 0.0f, 0.0f, 0.0f, 0.0f, 1.0f}};
    write_pgm(dir / "c.ppm", rgb);
    CHECK(read_pnm(dir / "c.ppm").pixels == rgb.pixels);
  }

  TEST_CASE("ascii and 16-bit variants") {
    const auto dir = scratch("ascii");
    write_lines(dir / "a.pgm", {"P2", "# comment", "2 1", "4", "0 4"});
    CHECK(read_pnm(dir / "a.pgm").pixels == std::vector<float>{0.0f, 1.0f});
    {
      std::ofstream os(dir / "w.pgm", std::ios::binary);
      os << "P5\n1 1\n65535\n";
      os.put(static_cast<char>(0x80));
      os.put(0);
    }
    CHECK(read_pnm(dir / "w.pgm").pixels[0] == doctest::Approx(32768.0 / 65535.0));
  }

  TEST_CASE("bad images are data errors") {
    const auto dir = scratch("badimg");
    write_lines(dir / "x.pgm", {"P9", "1 1", "255"});
    CHECK_THROWS_AS(read_pnm(dir / "x.pgm"), DataError);
    {
      std::ofstream os(dir / "t.pgm", std::ios::binary);
      os << "P5\n4 4\n255\n" << "abc";
    }
    CHECK_THROWS_AS(read_pnm(dir / "t.pgm"), DataError);
    CHECK_THROWS_AS(read_pnm(dir / "missing.pgm"), DataError);
  }

  TEST_CASE("resize is a no-op at the same size") {
    Image g{3, 4, 1, {}};
    for (int i = 0; i < 12; ++i) g.pixels.push_back(static_cast<float>(i) / 11.0f);
    CHECK(resize_bilinear(g, 3, 4).pixels == g.pixels);
  }

  TEST_CASE("resize keeps constant images constant and interpolates") {
    Image c{5, 7, 1, std::vector<float>(35, 0.3f)};
    for (float v : resize_bilinear(c, 11, 3).pixels) CHECK(v == doctest::Approx(0.3f));
    Image ramp{1, 2, 1, {0.0f, 1.0f}};
    const auto up = resize_bilinear(ramp, 1, 4).pixels;
    CHECK(up == std::vector<float>{0.0f, 0.25f, 0.75f, 1.0f});
  }

  TEST_CASE("channel conversion") {
    Image g{1, 1, 1, {0.5f}};
    CHECK(convert_channels(g, 3).pixels == std::vector<float>{0.5f, 0.5f, 0.5f});
    Image rgb{1, 1, 3, {1.0f, 0.0f, 0.0f}};
    CHECK(convert_channels(rgb, 1).pixels[0] == doctest::Approx(0.299f));
  }
}

TEST_SUITE("synthetic data") {
  TEST_CASE("same seed gives identical tensors") {
    const auto a = synth_dataset(small(1));
    const auto b = synth_dataset(small(1));
    const auto c = synth_dataset(small(2));
    REQUIRE(a.size() == b.size());
    bool differs = false;
    for (std::size_t i = 0; i < a.size(); ++i) {
      CHECK(bitwise_equal(a.samples[i].clip, b.samples[i].clip));
      CHECK(a.samples[i].landmarks == b.samples[i].landmarks);
      CHECK(a.samples[i].subject == b.samples[i].subject);
      differs = differs || !bitwise_equal(a.samples[i].clip, c.samples[i].clip);
    }
    CHECK(differs);
  }

  TEST_CASE("sample invariants") {
    auto o = small(3);
    o.frames = 25;
    o.videos_per_class = 3;
    o.distractors = true;
    const auto d = synth_dataset(o);
    CHECK(d.size() == 3 * 3 * 2);
    CHECK(d.class_names.size() == 3);
    std::set<std::string> subjects;
    for (const auto& s : d.samples) {
      CHECK(s.clip.shape() == Shape{10, 64, 64, 1});
      CHECK(s.landmarks.size() == kSequenceLength);
      CHECK(s.label < 3);
      CHECK_FALSE(s.subject.empty());
      CHECK(s.database == "synth");
      subjects.insert(s.subject);
      for (float v : s.clip.data()) CHECK((v >= 0.0f && v <= 1.0f));
      for (const auto& f : s.landmarks)
        for (const auto& p : f.points()) {
          CHECK((p.x >= 0.0 && p.x < 64.0));
          CHECK((p.y >= 0.0 && p.y < 64.0));
        }
    }
    CHECK(subjects.size() == 3);
  }

  TEST_CASE("batch helpers") {
    const auto d = synth_dataset(small(4));
    auto clips = stack_clips<double>(d, {2, 0});
    CHECK(clips.shape() == Shape{2, 10, 64, 64, 1});
    CHECK(clips.data()[0] == static_cast<double>(d.samples[2].clip.data()[0]));
    auto y = one_hot<double>({2, 0}, 3);
    CHECK(std::vector<double>(y.data().begin(), y.data().end()) == std::vector<double>{0, 0, 1, 1, 0, 0});
    CHECK_THROWS_AS(one_hot<double>({3}, 3), ContractError);
    CHECK_THROWS_AS(stack_clips<double>(d, {}), ContractError);
  }

  TEST_CASE("subset keeps the label map") {
    const auto d = synth_dataset(small(5));
    const auto s = d.subset({3, 1});
    CHECK(s.class_names == d.class_names);
    CHECK(s.samples[0].video == d.samples[3].video);
    CHECK(s.samples[1].video == d.samples[1].video);
  }
}

TEST_SUITE("manifest loading") {
  TEST_CASE("written synthetic data loads back in manifest order") {
    const auto dir = scratch("load");
    const auto o = small(6);
    const auto manifest = write_synth_dataset(dir, o);
    const auto loaded = load_dataset(manifest, 64, 64);
    const auto direct = synth_dataset(o);
    REQUIRE(loaded.size() == direct.size());
    CHECK(loaded.class_names == direct.class_names);
    for (std::size_t i = 0; i < loaded.size(); ++i) {
      CHECK(loaded.samples[i].label == direct.samples[i].label);
      CHECK(loaded.samples[i].subject == direct.samples[i].subject);
      double worst = 0.0;
      for (std::size_t j = 0; j < loaded.samples[i].clip.size(); ++j)
        worst = std::max(worst, static_cast<double>(std::abs(loaded.samples[i].clip.data()[j] -
                                                             direct.samples[i].clip.data()[j])));
      CHECK(worst <= 0.5 / 255.0 + 1e-6);
      for (std::size_t t = 0; t < kSequenceLength; ++t)
        for (std::size_t k = 0; k < kLandmarkCount; ++k) {
          CHECK(loaded.samples[i].landmarks[t].points()[k].x ==
                doctest::Approx(direct.samples[i].landmarks[t].points()[k].x).epsilon(1e-9));
        }
    }
  }

  TEST_CASE("one ten-frame video gives one sample, resized and converted") {
    const auto dir = scratch("one");
    auto o = small(7);
    o.classes = 2;
    o.videos_per_class = 1;
    const auto manifest = write_synth_dataset(dir, o);
    auto m = DatasetManifest::load(manifest);
    m.videos.resize(1);
    m.channels = 3;
    const auto d = load_dataset(m, 32, 48);
    REQUIRE(d.size() == 1);
    CHECK(d.samples[0].clip.shape() == Shape{10, 32, 48, 3});
  }

  TEST_CASE("nine landmark rows for ten frames names the video") {
    const auto dir = scratch("nine");
    auto o = small(8);
    o.classes = 2;
    o.videos_per_class = 1;
    const auto manifest = write_synth_dataset(dir, o);
    const auto m = DatasetManifest::load(manifest);
    const auto csv = m.videos[0].landmarks_csv;
    auto lines = read_lines(csv);
    lines.pop_back();
    write_lines(csv, lines);
    try {
      load_dataset(manifest, 64, 64);
      FAIL("expected DataError");
    } catch (const DataError& e) {
      const std::string msg = e.what();
      CHECK(msg.find(m.videos[0].frames_dir.string()) != std::string::npos);
      CHECK(msg.find("9") != std::string::npos);
    }
  }

  TEST_CASE("manifest round trip and relative paths") {
    const auto dir = scratch("manifest");
    const auto manifest = write_synth_dataset(dir, small(9));
    const auto m = DatasetManifest::load(manifest);
    m.save(dir / "copy.json");
    const auto again = DatasetManifest::load(dir / "copy.json");
    REQUIRE(again.videos.size() == m.videos.size());
    for (std::size_t i = 0; i < m.videos.size(); ++i) {
      CHECK(fs::equivalent(again.videos[i].frames_dir, m.videos[i].frames_dir));
      CHECK(again.videos[i].subject == m.videos[i].subject);
    }
    std::ifstream is(dir / "copy.json");
    const auto j = nlohmann::json::parse(is);
    CHECK(fs::path(j["videos"][0]["frames_dir"].get<std::string>()).is_relative());
  }

  TEST_CASE("manifest errors") {
    const auto dir = scratch("badmanifest");
    write_lines(dir / "a.json", {"{not json"});
    CHECK_THROWS_AS(DatasetManifest::load(dir / "a.json"), DataError);
    write_lines(dir / "b.json", {R"({"labels": {"happy": 0}, "videos": [{"frames_dir": "f", "landmarks_csv": "l.csv",
        "label": "sad", "subject": "s1"}]})"});
    CHECK_THROWS_AS(DatasetManifest::load(dir / "b.json"), DataError);
    write_lines(dir / "c.json", {R"({"labels": {"happy": 0}, "videos": [{"frames_dir": "f", "landmarks_csv": "l.csv",
        "label": 0, "subject": ""}]})"});
    CHECK_THROWS_AS(DatasetManifest::load(dir / "c.json"), DataError);
    write_lines(dir / "d.json", {R"({"labels": {"a": 0, "b": 2}, "videos": []})"});
    CHECK_THROWS_AS(DatasetManifest::load(dir / "d.json").class_names(), DataError);
    CHECK_THROWS_AS(DatasetManifest::load(dir / "none.json"), DataError);
    write_lines(dir / "e.json", {R"({"labels": {"a": 0, "b": 1}, "videos": [{"frames_dir": "nowhere",
        "landmarks_csv": "l.csv", "label": "a", "subject": "s"}]})"});
    CHECK_THROWS_AS(load_dataset(dir / "e.json", 8, 8), DataError);
  }
}
