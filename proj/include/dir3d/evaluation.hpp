#pragma once

#include <cstddef>
#include <cstdint>
#include <functional>
#include <optional>
#include <ostream>
#include <string>
#include <vector>

#include "dir3d/data.hpp"
#include "dir3d/training.hpp"

namespace dir3d {

struct FoldPlan {
  std::size_t k = 0;
  std::vector<std::vector<std::string>> test_subjects;   // per fold, sorted
  std::vector<std::vector<std::string>> train_subjects;  // per fold, sorted
};

/// Shuffles the distinct subjects with `seed` and deals them round-robin into
/// k groups. Throws ContractError when k < 2 or there are fewer subjects than k.
FoldPlan make_subject_folds(const std::vector<std::string>& sample_subjects, std::size_t k, std::uint64_t seed);
FoldPlan make_subject_folds(const Dataset& data, std::size_t k, std::uint64_t seed);

struct ConfusionMatrix {
  std::size_t classes = 0;
  std::vector<std::vector<std::size_t>> counts;   // [true][predicted]
  std::vector<std::vector<double>> percentages;   // row-normalized, 0 rows where support is 0
  std::vector<bool> zero_support;
  std::size_t total = 0;
};

/// Throws ContractError on unequal lengths or a label >= classes.
ConfusionMatrix confusion_matrix(const std::vector<std::size_t>& truths, const std::vector<std::size_t>& predictions,
                                 std::size_t classes);

struct FoldResult {
  std::size_t fold = 0;
  std::vector<std::string> test_subjects;
  std::size_t train_samples = 0;
  std::size_t test_samples = 0;
  std::size_t epochs_run = 0;
  double accuracy = 0.0;
};

struct EvalReport {
  std::string protocol;
  std::vector<std::string> class_names;
  std::vector<FoldResult> folds;
  double mean = 0.0;
  double stddev = 0.0;  // population standard deviation over folds
  ConfusionMatrix confusion;
  std::vector<std::string> excluded_classes;
  std::vector<std::string> notes;

  std::string to_text() const;
  std::string to_csv() const;
  std::string to_json() const;
  /// Writes report.txt, report.csv and report.json into `dir`.
  void write(const std::filesystem::path& dir) const;
};

/// Mean and population standard deviation.
std::pair<double, double> mean_and_stddev(const std::vector<double>& values);

struct ProtocolOptions {
  std::size_t k = 5;
  /// Run only the first n folds (0 = all).
  std::size_t max_folds = 0;
  FitOptions fit;
  SgdOptions sgd;
  std::uint64_t seed = 0;
  std::ostream* log = nullptr;
};

/// Fresh model per fold, trained on the other folds' subjects and scored on
/// the held-out subjects; confusion counts are pooled over folds.
template <typename T>
EvalReport run_subject_independent(const Dataset& data, const ModelConfig& config, const ProtocolOptions& options);

/// Trains on every database except `test_database` and tests on it. Class
/// names are reconciled across datasets; test classes unseen in training are
/// dropped and listed. The model's class count follows the training label set.
template <typename T>
EvalReport run_cross_database(const std::vector<Dataset>& databases, const std::string& test_database,
                              const ModelConfig& config, const ProtocolOptions& options);

/// The training/test split run_cross_database uses, exposed for inspection.
struct CrossDatabaseSplit {
  Dataset train, test;
  std::vector<std::string> excluded_classes;
  std::vector<std::size_t> test_classes;  // label ids (in train's label space) present in test
};
CrossDatabaseSplit split_cross_database(const std::vector<Dataset>& databases, const std::string& test_database);

}  // namespace dir3d
