#include <doctest.h>

#include <algorithm>
#include <filesystem>
#include <random>
#include <set>
#include <sstream>

#include "dir3d/errors.hpp"
#include "dir3d/evaluation.hpp"
#include "json.hpp"

using namespace dir3d;

namespace {

std::vector<std::string> subject_labels(std::size_t subjects, std::size_t per_subject, std::mt19937_64& gen) {
  std::vector<std::string> out;
  for (std::size_t s = 0; s < subjects; ++s)
    for (std::size_t i = 0; i < per_subject; ++i) out.push_back("p" + std::to_string(s));
  std::shuffle(out.begin(), out.end(), gen);
  return out;
}

Dataset synth_db(const std::string& name, std::size_t classes, std::uint64_t seed) {
  SynthOptions o;
  o.classes = classes;
  o.videos_per_class = 2;
  o.subjects = 2;
  o.database = name;
  o.seed = seed;
  return synth_dataset(o);
}

ProtocolOptions quick(std::size_t epochs) {
  ProtocolOptions p;
  p.k = 2;
  p.fit.epochs = epochs;
  p.fit.batch_size = 4;
  p.seed = 1;
  return p;
}

}  // namespace

TEST_SUITE("subject folds") {
  TEST_CASE("ten subjects into five folds of two") {
    std::vector<std::string> samples;
    for (int s = 0; s < 10; ++s)
      for (int i = 0; i < 3; ++i) samples.push_back("s" + std::to_string(s));
    const auto plan = make_subject_folds(samples, 5, 3);
    REQUIRE(plan.test_subjects.size() == 5);
    for (const auto& g : plan.test_subjects) CHECK(g.size() == 2);
    for (const auto& g : plan.train_subjects) CHECK(g.size() == 8);
  }

  TEST_CASE("contract errors") {
    CHECK_THROWS_AS(make_subject_folds(std::vector<std::string>{"a", "b", "c"}, 1, 0), ContractError);
    CHECK_THROWS_AS(make_subject_folds(std::vector<std::string>{"a", "b", "a"}, 3, 0), ContractError);
    CHECK_THROWS_AS(make_subject_folds(std::vector<std::string>{"a", ""}, 2, 0), ContractError);
  }

  TEST_CASE("deterministic per seed") {
    std::vector<std::string> s{"a", "b", "c", "d", "e", "f", "g"};
    CHECK(make_subject_folds(s, 3, 4).test_subjects == make_subject_folds(s, 3, 4).test_subjects);
  }

  TEST_CASE("partition properties over 1000 random manifests") {
    std::mt19937_64 gen(77);
    for (int trial = 0; trial < 1000; ++trial) {
      const std::size_t k = std::uniform_int_distribution<std::size_t>(2, 8)(gen);
      const std::size_t subjects = std::uniform_int_distribution<std::size_t>(k, 30)(gen);
      const std::size_t per = std::uniform_int_distribution<std::size_t>(1, 5)(gen);
      const auto samples = subject_labels(subjects, per, gen);
      const auto plan = make_subject_folds(samples, k, gen());
      REQUIRE(plan.k == k);
      std::multiset<std::string> all_test;
      std::size_t lo = subjects, hi = 0;
      for (std::size_t f = 0; f < k; ++f) {
        const auto& test = plan.test_subjects[f];
        const auto& train = plan.train_subjects[f];
        lo = std::min(lo, test.size());
        hi = std::max(hi, test.size());
        all_test.insert(test.begin(), test.end());
        std::vector<std::string> overlap;
        std::set_intersection(test.begin(), test.end(), train.begin(), train.end(), std::back_inserter(overlap));
        CHECK(overlap.empty());
        CHECK(test.size() + train.size() == subjects);
      }
      CHECK(hi - lo <= 1);
      CHECK(all_test.size() == subjects);
      CHECK(std::set<std::string>(all_test.begin(), all_test.end()).size() == subjects);
    }
  }
}

TEST_SUITE("confusion matrix") {
  TEST_CASE("perfect predictions are diagonal") {
    const auto m = confusion_matrix({0, 1, 2, 1}, {0, 1, 2, 1}, 3);
    for (std::size_t i = 0; i < 3; ++i) {
      CHECK(m.percentages[i][i] == 100.0);
      for (std::size_t j = 0; j < 3; ++j)
        if (i != j) CHECK(m.counts[i][j] == 0);
    }
    CHECK(m.total == 4);
  }

  TEST_CASE("single off-diagonal sample and zero-support rows") {
    const auto m = confusion_matrix({2}, {0}, 3);
    CHECK(m.counts[2][0] == 1);
    CHECK(m.zero_support == std::vector<bool>{true, true, false});
    for (double v : m.percentages[0]) CHECK(v == 0.0);
  }

  TEST_CASE("rows sum to 100 and counts to the sample count") {
    std::mt19937_64 gen(5);
    for (int trial = 0; trial < 1000; ++trial) {
      const std::size_t k = std::uniform_int_distribution<std::size_t>(2, 7)(gen);
      const std::size_t n = std::uniform_int_distribution<std::size_t>(1, 60)(gen);
      std::vector<std::size_t> t(n), p(n);
      for (std::size_t i = 0; i < n; ++i) {
        t[i] = gen() % k;
        p[i] = gen() % k;
      }
      const auto m = confusion_matrix(t, p, k);
      std::size_t total = 0;
      for (std::size_t i = 0; i < k; ++i) {
        double row = 0.0;
        for (std::size_t j = 0; j < k; ++j) {
          total += m.counts[i][j];
          row += m.percentages[i][j];
        }
        if (!m.zero_support[i]) CHECK(row == doctest::Approx(100.0).epsilon(1e-9));
      }
      CHECK(total == n);
    }
  }

  TEST_CASE("contract errors") {
    CHECK_THROWS_AS(confusion_matrix({0, 1}, {0}, 2), ContractError);
    CHECK_THROWS_AS(confusion_matrix({0, 3}, {0, 1}, 3), ContractError);
    CHECK_THROWS_AS(confusion_matrix({0}, {5}, 3), ContractError);
  }
}

TEST_SUITE("aggregation") {
  TEST_CASE("population standard deviation") {
    auto [m, s] = mean_and_stddev({0.8, 0.8, 0.8});
    CHECK(m == doctest::Approx(0.8));
    CHECK(s == 0.0);
    std::tie(m, s) = mean_and_stddev({1.0, 0.0});
    CHECK(m == 0.5);
    CHECK(s == 0.5);
  }

  TEST_CASE("mean equals the arithmetic mean to 1e-12") {
    std::mt19937_64 gen(9);
    std::uniform_real_distribution<double> u(0, 1);
    for (int trial = 0; trial < 1000; ++trial) {
      std::vector<double> v(1 + gen() % 10);
      double sum = 0.0;
      for (auto& x : v) sum += (x = u(gen));
      const auto [m, s] = mean_and_stddev(v);
      CHECK(std::abs(m - sum / static_cast<double>(v.size())) < 1e-12);
      CHECK(s >= 0.0);
    }
  }
}

TEST_SUITE("cross-database split") {
  TEST_CASE("purity and exclusion over 1000 random database mixes") {
    std::mt19937_64 gen(13);
    for (int trial = 0; trial < 1000; ++trial) {
      const std::size_t dbs = std::uniform_int_distribution<std::size_t>(2, 4)(gen);
      std::vector<Dataset> sets;
      for (std::size_t d = 0; d < dbs; ++d) {
        Dataset ds;
        const std::size_t classes = 2 + gen() % 4;
        for (std::size_t c = 0; c < classes; ++c) ds.class_names.push_back("c" + std::to_string((c + d) % 6));
        const std::size_t n = 1 + gen() % 8;
        for (std::size_t i = 0; i < n; ++i) {
          SequenceSample s;
          s.clip = Tensor<float>({1}, 0.0f);
          s.label = gen() % classes;
          s.subject = "s" + std::to_string(i % 3);
          s.database = "db" + std::to_string(d);
          ds.samples.push_back(std::move(s));
        }
        sets.push_back(std::move(ds));
      }
      const std::string test_db = "db" + std::to_string(gen() % dbs);
      CrossDatabaseSplit split;
      try {
        split = split_cross_database(sets, test_db);
      } catch (const ContractError&) {
        continue;  // no shared classes
      }
      std::set<std::string> train_names;
      for (const auto& s : split.train.samples) {
        CHECK(s.database != test_db);
        train_names.insert(split.train.class_names[s.label]);
      }
      CHECK(split.test.class_names == split.train.class_names);
      for (const auto& s : split.test.samples) {
        CHECK(s.database == test_db);
        CHECK(train_names.count(split.test.class_names[s.label]) == 1);
        CHECK(std::find(split.test_classes.begin(), split.test_classes.end(), s.label) != split.test_classes.end());
      }
      for (const auto& name : split.excluded_classes) CHECK(train_names.count(name) == 0);
    }
  }

  TEST_CASE("test-only class is excluded and listed") {
    auto a = synth_db("alpha", 3, 1);
    auto b = synth_db("beta", 3, 2);
    // Rename beta's class 2 so that it never occurs in training.
    b.class_names[2] = "surprise";
    const auto split = split_cross_database({a, b}, "beta");
    CHECK(split.excluded_classes == std::vector<std::string>{"surprise"});
    for (const auto& s : split.test.samples) CHECK(split.test.class_names[s.label] != "surprise");
  }

  TEST_CASE("contract errors") {
    auto a = synth_db("alpha", 2, 1);
    CHECK_THROWS_AS(split_cross_database({a}, "alpha"), ContractError);
    auto b = synth_db("beta", 2, 2);
    CHECK_THROWS_AS(split_cross_database({a, b}, "gamma"), ContractError);
    b.class_names = {"x", "y"};
    CHECK_THROWS_AS(split_cross_database({a, b}, "beta"), ContractError);
  }
}

TEST_SUITE("protocol runs") {
  TEST_CASE("subject-independent report structure") {
    const auto data = synth_db("synth", 3, 4);
    std::ostringstream log;
    auto opts = quick(1);
    opts.log = &log;
    const auto report = run_subject_independent<float>(data, ModelConfig::toy(), opts);
    REQUIRE(report.folds.size() == 2);
    std::size_t tested = 0;
    std::vector<double> accs;
    for (const auto& f : report.folds) {
      tested += f.test_samples;
      CHECK(f.train_samples + f.test_samples == data.size());
      accs.push_back(f.accuracy);
    }
    CHECK(report.confusion.total == tested);
    CHECK(report.mean == doctest::Approx(mean_and_stddev(accs).first).epsilon(1e-12));
    CHECK_FALSE(log.str().empty());

    const auto j = nlohmann::json::parse(report.to_json());
    CHECK(j["folds"].size() == 2);
    CHECK(report.to_text().find("fold") != std::string::npos);
    CHECK(report.to_csv().rfind("record,fold,true_class,predicted_class,value", 0) == 0);

    const auto dir = std::filesystem::temp_directory_path() / "dir3d_eval_report";
    std::filesystem::remove_all(dir);
    report.write(dir);
    for (const char* f : {"report.txt", "report.csv", "report.json"}) CHECK(std::filesystem::exists(dir / f));
  }

  TEST_CASE("k = 1 is rejected") {
    auto opts = quick(1);
    opts.k = 1;
    CHECK_THROWS_AS(run_subject_independent<float>(synth_db("synth", 2, 5), ModelConfig::toy(), opts), ContractError);
  }

  TEST_CASE("max_folds limits the run") {
    auto opts = quick(1);
    opts.max_folds = 1;
    const auto report = run_subject_independent<float>(synth_db("synth", 2, 6), ModelConfig::toy(), opts);
    CHECK(report.folds.size() == 1);
    CHECK(report.stddev == 0.0);
  }

  TEST_CASE("cross-database run follows the training label set") {
    auto a = synth_db("alpha", 3, 7);
    auto b = synth_db("beta", 3, 8);
    b.class_names[1] = "surprise";
    const auto report = run_cross_database<float>({a, b}, "beta", ModelConfig::toy(), quick(1));
    CHECK(report.excluded_classes == std::vector<std::string>{"surprise"});
    CHECK(report.folds.size() == 1);
    CHECK(report.confusion.classes == report.class_names.size());
    CHECK(report.folds[0].test_samples == 4);
    CHECK_FALSE(report.notes.empty());
  }
}
