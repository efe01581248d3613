#include <doctest.h>

#include <chrono>
#include <cmath>
#include <filesystem>

#include "dir3d/config.hpp"
#include "dir3d/data.hpp"
#include "dir3d/errors.hpp"
#include "dir3d/model.hpp"
#include "oracles.hpp"

using namespace dir3d;

namespace {

// Frozen from the first build of the reference preset.
constexpr std::size_t kReferenceParameters = 19530511;
constexpr std::size_t kToyParameters = 28403;
constexpr std::size_t kTinyParameters = 788;

struct Batch {
  Tensor<double> clips;
  std::vector<SequenceLandmarks> landmarks;
};

Batch toy_batch(std::size_t n, std::uint64_t seed) {
  SynthOptions o;
  o.videos_per_class = 1;
  o.subjects = 2;
  o.seed = seed;
  const auto data = synth_dataset(o);
  std::vector<std::size_t> idx;
  for (std::size_t i = 0; i < n; ++i) idx.push_back(i % data.size());
  Batch b{stack_clips<double>(data, idx), {}};
  for (auto i : idx) b.landmarks.push_back(data.samples[i].landmarks);
  return b;
}

bool contains(const std::string& text, const std::string& part) { return text.find(part) != std::string::npos; }

std::string config_error(const ModelConfig& c) {
  try {
    trace_shapes(c);
  } catch (const ConfigError& e) {
    return e.what();
  }
  return "";
}

}  // namespace

TEST_SUITE("config") {
  TEST_CASE("presets survive a text round trip") {
    for (const char* name : {"reference", "toy", "tiny"}) {
      const auto c = ModelConfig::preset(name);
      CHECK(ModelConfig::parse(c.to_text()) == c);
      CHECK(ModelConfig::parse(c.to_text()).hash() == c.hash());
    }
    CHECK(ModelConfig::toy().hash() != ModelConfig::tiny().hash());
  }

  TEST_CASE("base preset with overrides") {
    const auto c = ModelConfig::parse("base = toy\nclasses = 5\nlstm.hidden = 12 # narrower\n");
    auto expected = ModelConfig::toy();
    expected.num_classes = 5;
    expected.lstm_hidden = 12;
    CHECK(c == expected);
  }

  TEST_CASE("layer spec text") {
    const auto s = LayerSpec::parse("conv k=1x3x5 s=1x2x2 p=SVV c=7 linear");
    CHECK(s.kind == LayerKind::Conv);
    CHECK(s.window == Extent3{1, 3, 5});
    CHECK(s.stride == Extent3{1, 2, 2});
    CHECK(s.padding == Padding3(Padding::Same, Padding::Valid, Padding::Valid));
    CHECK(s.channels == 7);
    CHECK(s.linear);
    CHECK(LayerSpec::parse(s.to_string()) == s);
    CHECK_THROWS_AS(LayerSpec::parse("conv k=3x3x3"), ConfigError);
    CHECK_THROWS_AS(LayerSpec::parse("maxpool k=3x3x3 c=4"), ConfigError);
    CHECK_THROWS_AS(LayerSpec::parse("deconv k=3x3x3 c=4"), ConfigError);
    CHECK_THROWS_AS(LayerSpec::parse("conv k=3x3 c=4"), ConfigError);
    CHECK_THROWS_AS(LayerSpec::parse("conv k=3x3x3 p=X c=4"), ConfigError);
  }

  TEST_CASE("malformed config text") {
    CHECK_THROWS_AS(ModelConfig::parse("classes = three"), ConfigError);
    CHECK_THROWS_AS(ModelConfig::parse("no_such_key = 1"), ConfigError);
    CHECK_THROWS_AS(ModelConfig::parse("classes = 3\nclasses = 4"), ConfigError);
    CHECK_THROWS_AS(ModelConfig::parse("just words"), ConfigError);
    CHECK_THROWS_AS(ModelConfig::preset("huge"), ConfigError);
    CHECK_THROWS_AS(ModelConfig::load("/nonexistent/dir3d.cfg"), IoError);
  }
}

TEST_SUITE("shape trace") {
  TEST_CASE("reference grid sizes") {
    const auto start = std::chrono::steady_clock::now();
    const auto t = trace_shapes(ModelConfig::reference());
    CHECK(std::chrono::steady_clock::now() - start < std::chrono::seconds(1));
    CHECK(t.stem_output == Shape{10, 38, 38, 256});
    CHECK(t.block_a_output == Shape{10, 38, 38, 256});
    CHECK(t.reduction_a_output[1] == 18);
    CHECK(t.reduction_a_output[2] == 18);
    CHECK(t.reduction_b_output[1] == 8);
    CHECK(t.reduction_b_output[2] == 8);
    CHECK(t.block_c_output == t.reduction_b_output);
    CHECK(t.lstm_steps == 10);
    CHECK(t.parameter_count == kReferenceParameters);
    CHECK(contains(format_trace(t.rows), "reduction_b"));
  }

  TEST_CASE("preset parameter counts match the allocated tensors") {
    CHECK(trace_shapes(ModelConfig::toy()).parameter_count == kToyParameters);
    CHECK(trace_shapes(ModelConfig::tiny()).parameter_count == kTinyParameters);
    CHECK(build<float>(ModelConfig::toy(), 1).parameter_count() == kToyParameters);
    CHECK(build<double>(ModelConfig::tiny(), 1).parameter_count() == kTinyParameters);
  }

  TEST_CASE("executed trace agrees with the symbolic one") {
    const auto cfg = ModelConfig::toy();
    const auto params = build<double>(cfg, 3);
    auto b = toy_batch(1, 3);
    std::vector<TraceRow> rows;
    ForwardOptions o;
    o.trace = &rows;
    forward(params, b.clips, b.landmarks, o);
    const auto symbolic = trace_shapes(cfg);
    auto find = [&](const std::vector<TraceRow>& rs, const std::string& stage) {
      Shape last;
      for (const auto& r : rs)
        if (r.stage == stage) last = r.shape;
      return last;
    };
    for (const char* stage : {"stem", "block_a[0]", "reduction_a", "block_b[0]", "reduction_b", "block_c[0]"}) {
      INFO(stage);
      auto executed = find(rows, stage);
      REQUIRE_FALSE(executed.empty());
      CHECK(executed == find(symbolic.rows, stage));
    }
  }

  TEST_CASE("inconsistent configs name the failing stage") {
    auto c = ModelConfig::toy();
    c.block_a[1].back().kind = LayerKind::Conv;
    c.block_a[1].back().stride = {1, 2, 2};
    CHECK(contains(config_error(c), "block_a"));

    c = ModelConfig::toy();
    c.stem_output_grid = 15;
    CHECK(contains(config_error(c), "stem"));

    c = ModelConfig::toy();
    c.reduction_b_output_grid = 4;
    CHECK(contains(config_error(c), "reduction_b"));

    c = ModelConfig::toy();
    c.reduction_a[0].back().stride = {1, 1, 1};
    CHECK(contains(config_error(c), "reduction_a"));

    c = ModelConfig::toy();
    c.num_classes = 1;
    CHECK(contains(config_error(c), "classes"));

    c = ModelConfig::toy();
    c.height = 8;
    c.width = 8;
    CHECK_FALSE(config_error(c).empty());
    CHECK_THROWS_AS(build<float>(c, 1), ConfigError);
  }
}

TEST_SUITE("build") {
  TEST_CASE("same seed gives bitwise-identical parameters") {
    const auto a = build<double>(ModelConfig::toy(), 5);
    const auto b = build<double>(ModelConfig::toy(), 5);
    const auto c = build<double>(ModelConfig::toy(), 6);
    REQUIRE(a.tensors.size() == b.tensors.size());
    bool any_diff = false;
    for (const auto& [name, t] : a.tensors) {
      CHECK(bitwise_equal(t, b.tensors.at(name)));
      any_diff = any_diff || !bitwise_equal(t, c.tensors.at(name));
    }
    CHECK(any_diff);
  }

  TEST_CASE("key set depends only on the config") {
    const auto a = build<float>(ModelConfig::toy(), 1);
    const auto b = build<double>(ModelConfig::toy(), 2);
    std::vector<std::string> ka, kb;
    for (const auto& kv : a.tensors) ka.push_back(kv.first);
    for (const auto& kv : b.tensors) kb.push_back(kv.first);
    CHECK(ka == kb);
    CHECK(a.tensors.count("lstm.W_f") == 1);
    CHECK(a.tensors.count("fc.weight") == 1);
  }

  TEST_CASE("initialization scheme") {
    const auto cfg = ModelConfig::toy();
    const auto p = build<double>(cfg, 9);
    const double bound = std::sqrt(1.0 / static_cast<double>(cfg.lstm_hidden));
    for (double v : p.lstm.W_i.data()) CHECK(std::abs(v) <= bound);
    for (double v : p.lstm.b_f.data()) CHECK(v == 1.0);
    for (double v : p.lstm.b_i.data()) CHECK(v == 0.0);
    for (double v : p.fc.bias.data()) CHECK(v == 0.0);
    const auto& k = p.stem.front().kernel;
    const double fan_in = static_cast<double>(k.size() / k.shape().back());
    const double std = std::sqrt(2.0 / fan_in);
    double sq = 0.0;
    for (double v : k.data()) {
      CHECK(std::abs(v) <= 2.0 * std + 1e-12);
      sq += v * v;
    }
    CHECK(std::sqrt(sq / static_cast<double>(k.size())) == doctest::Approx(std * 0.88).epsilon(0.25));
  }

  TEST_CASE("clone is independent") {
    auto a = build<double>(ModelConfig::tiny(), 1);
    auto b = a.clone();
    b.tensors.at("fc.bias").mutable_data()[0] = 42.0;
    CHECK(a.fc.bias.data()[0] == 0.0);
    CHECK(b.fc.bias.data()[0] == 42.0);
    a.copy_values_from(b);
    CHECK(a.fc.bias.data()[0] == 42.0);
  }
}

TEST_SUITE("forward") {
  TEST_CASE("toy config forward passes and eval mode is deterministic") {
    const auto params = build<double>(ModelConfig::toy(), 1);
    auto b = toy_batch(2, 1);
    auto y1 = forward(params, b.clips, b.landmarks);
    auto y2 = forward(params, b.clips, b.landmarks);
    CHECK(y1.shape() == Shape{2, 3});
    CHECK(bitwise_equal(y1, y2));
    for (double v : y1.data()) CHECK(std::isfinite(v));
  }

  TEST_CASE("train mode with dropout 0 equals eval mode") {
    auto cfg = ModelConfig::toy();
    cfg.dropout = 0.0;
    const auto params = build<double>(cfg, 2);
    auto b = toy_batch(2, 2);
    Rng rng(1);
    ForwardOptions train;
    train.mode = Mode::Train;
    train.rng = &rng;
    CHECK(bitwise_equal(forward(params, b.clips, b.landmarks, train), forward(params, b.clips, b.landmarks)));
  }

  TEST_CASE("train mode with dropout needs a generator") {
    const auto params = build<double>(ModelConfig::toy(), 2);
    auto b = toy_batch(1, 2);
    ForwardOptions train;
    train.mode = Mode::Train;
    CHECK_THROWS_AS(forward(params, b.clips, b.landmarks, train), ContractError);
  }

  TEST_CASE("all-ones mask equals the unmasked architecture exactly") {
    const auto params = build<double>(ModelConfig::toy(), 4);
    auto b = toy_batch(2, 4);
    ForwardOptions ones, none;
    ones.mask_source = MaskSource::Ones;
    none.mask_source = MaskSource::None;
    CHECK(bitwise_equal(forward(params, b.clips, b.landmarks, ones), forward(params, b.clips, b.landmarks, none)));
  }

  TEST_CASE("landmarks change the output") {
    const auto params = build<double>(ModelConfig::toy(), 4);
    auto b = toy_batch(1, 4);
    ForwardOptions none;
    none.mask_source = MaskSource::None;
    auto masked = forward(params, b.clips, b.landmarks);
    auto plain = forward(params, b.clips, b.landmarks, none);
    CHECK(oracle::rel_error({masked.data().begin(), masked.data().end()}, {plain.data().begin(), plain.data().end()}) > 1e-6);
  }

  TEST_CASE("moving one sample's landmarks changes only its row") {
    const auto params = build<double>(ModelConfig::toy(), 5);
    auto b = toy_batch(3, 5);
    auto before = forward(params, b.clips, b.landmarks);
    for (auto& f : b.landmarks[1]) {
      auto pts = f.points();
      for (auto& p : pts) p.x = std::fmod(p.x + 17.0, 64.0);
      f = LandmarkFrame(pts, f.height(), f.width());
    }
    auto after = forward(params, b.clips, b.landmarks);
    for (std::size_t k = 0; k < 3; ++k) {
      CHECK(after.at({0, k}) == before.at({0, k}));
      CHECK(after.at({2, k}) == before.at({2, k}));
    }
    bool changed = false;
    for (std::size_t k = 0; k < 3; ++k) changed = changed || after.at({1, k}) != before.at({1, k});
    CHECK(changed);
  }

  TEST_CASE("missing landmarks name the sample") {
    const auto params = build<double>(ModelConfig::toy(), 5);
    auto b = toy_batch(2, 5);
    b.landmarks[1].erase(b.landmarks[1].begin() + 4, b.landmarks[1].end());
    try {
      forward(params, b.clips, b.landmarks);
      FAIL("expected DataError");
    } catch (const DataError& e) {
      CHECK(contains(e.what(), "sample 1"));
    }
    b.landmarks.pop_back();
    CHECK_THROWS_AS(forward(params, b.clips, b.landmarks), DataError);
  }

  TEST_CASE("wrong clip shape") {
    const auto params = build<double>(ModelConfig::toy(), 5);
    CHECK_THROWS_AS(forward(params, Tensor<double>({1, 10, 32, 32, 1}), {}), DimensionError);
  }

  TEST_CASE("mask cache gives the same logits") {
    const auto params = build<float>(ModelConfig::toy(), 6);
    auto b = toy_batch(2, 6);
    Tensor<float> clips(b.clips.shape(), std::vector<float>(b.clips.data().begin(), b.clips.data().end()));
    MaskCache cache;
    ForwardOptions cached;
    cached.mask_cache = &cache;
    CHECK(bitwise_equal(forward(params, clips, b.landmarks, cached), forward(params, clips, b.landmarks)));
    CHECK(cache.size() > 0);
  }
}

TEST_SUITE("predict") {
  TEST_CASE("argmax and ties") {
    CHECK(argmax_rows(Tensor<double>({1, 4}, {0, 10, 0, 0})) == std::vector<std::size_t>{1});
    CHECK(argmax_rows(Tensor<double>({2, 3}, {2, 2, 1, 0, 5, 5})) == std::vector<std::size_t>{0, 1});
  }

  TEST_CASE("probabilities sum to one") {
    const auto params = build<double>(ModelConfig::toy(), 7);
    auto b = toy_batch(3, 7);
    const auto p = predict(params, b.clips, b.landmarks);
    REQUIRE(p.classes.size() == 3);
    for (std::size_t r = 0; r < 3; ++r) {
      double s = 0.0, best = -1.0;
      for (std::size_t k = 0; k < 3; ++k) {
        s += p.probabilities.at({r, k});
        best = std::max(best, p.probabilities.at({r, k}));
      }
      CHECK(std::abs(s - 1.0) < 1e-6);
      CHECK(p.probabilities.at({r, p.classes[r]}) == best);
    }
  }
}

TEST_SUITE("model gradients") {
  TEST_CASE("tiny model: every parameter, 64-bit, 20 seeds") {
    for (std::uint64_t seed = 1; seed <= 20; ++seed) {
      const auto results = check_model_gradients(ModelConfig::tiny(), seed);
      REQUIRE(results.size() == build<double>(ModelConfig::tiny(), seed).tensors.size());
      for (const auto& r : results) {
        INFO("seed " << seed << " " << r.name);
        CHECK(r.relative_error < 1e-4);
      }
    }
  }
}

TEST_SUITE("shipped configs") {
  TEST_CASE("config files equal the presets") {
    for (const char* name : {"reference", "toy", "tiny"}) {
      CAPTURE(name);
      CHECK(ModelConfig::load(std::filesystem::path(DIR3D_SOURCE_DIR) / "configs" / (std::string(name) + ".cfg")) ==
            ModelConfig::preset(name));
    }
  }

  TEST_CASE("32 pixel toy variant builds") {
    const auto c = ModelConfig::load(std::filesystem::path(DIR3D_SOURCE_DIR) / "configs" / "toy_32px.cfg");
    const auto t = trace_shapes(c);
    CHECK(t.stem_output[1] == 8);
    CHECK(t.reduction_b_output[1] == 1);
  }
}
