#include "dir3d/evaluation.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <iomanip>
#include <set>
#include <sstream>

#include "json.hpp"

#include "dir3d/errors.hpp"

namespace dir3d {

namespace fs = std::filesystem;

FoldPlan make_subject_folds(const std::vector<std::string>& sample_subjects, std::size_t k, std::uint64_t seed) {
  if (k < 2) throw ContractError("subject folds need k >= 2, got " + std::to_string(k));
  std::set<std::string> distinct(sample_subjects.begin(), sample_subjects.end());
  if (distinct.count("")) throw ContractError("every sample needs a subject id");
  if (distinct.size() < k) {
    throw ContractError(std::to_string(distinct.size()) + " distinct subjects cannot fill " + std::to_string(k) +
                        " folds");
  }
  std::vector<std::string> subjects(distinct.begin(), distinct.end());
  Rng rng(seed);
  rng.shuffle(subjects.begin(), subjects.end());

  FoldPlan plan;
  plan.k = k;
  plan.test_subjects.resize(k);
  plan.train_subjects.resize(k);
  for (std::size_t i = 0; i < subjects.size(); ++i) plan.test_subjects[i % k].push_back(subjects[i]);
  for (std::size_t f = 0; f < k; ++f) {
    std::sort(plan.test_subjects[f].begin(), plan.test_subjects[f].end());
    for (std::size_t g = 0; g < k; ++g) {
      if (g != f) plan.train_subjects[f].insert(plan.train_subjects[f].end(), plan.test_subjects[g].begin(),
                                                plan.test_subjects[g].end());
    }
    std::sort(plan.train_subjects[f].begin(), plan.train_subjects[f].end());
  }
  return plan;
}

FoldPlan make_subject_folds(const Dataset& data, std::size_t k, std::uint64_t seed) {
  std::vector<std::string> subjects;
  subjects.reserve(data.size());
  for (const auto& s : data.samples) subjects.push_back(s.subject);
  return make_subject_folds(subjects, k, seed);
}

ConfusionMatrix confusion_matrix(const std::vector<std::size_t>& truths, const std::vector<std::size_t>& predictions,
                                 std::size_t classes) {
  if (truths.size() != predictions.size()) {
    throw ContractError("confusion_matrix: " + std::to_string(truths.size()) + " truths vs " +
                        std::to_string(predictions.size()) + " predictions");
  }
  ConfusionMatrix cm;
  cm.classes = classes;
  cm.counts.assign(classes, std::vector<std::size_t>(classes, 0));
  cm.percentages.assign(classes, std::vector<double>(classes, 0.0));
  cm.zero_support.assign(classes, false);
  for (std::size_t i = 0; i < truths.size(); ++i) {
    if (truths[i] >= classes || predictions[i] >= classes) {
      throw ContractError("confusion_matrix: label pair (" + std::to_string(truths[i]) + ", " +
                          std::to_string(predictions[i]) + ") out of range for " + std::to_string(classes) +
                          " classes");
    }
    ++cm.counts[truths[i]][predictions[i]];
  }
  cm.total = truths.size();
  for (std::size_t r = 0; r < classes; ++r) {
    std::size_t support = 0;
    for (auto c : cm.counts[r]) support += c;
    cm.zero_support[r] = support == 0;
    if (!support) continue;
    for (std::size_t c = 0; c < classes; ++c) {
      cm.percentages[r][c] = 100.0 * static_cast<double>(cm.counts[r][c]) / static_cast<double>(support);
    }
  }
  return cm;
}

std::pair<double, double> mean_and_stddev(const std::vector<double>& values) {
  if (values.empty()) return {0.0, 0.0};
  double mean = 0.0;
  for (double v : values) mean += v;
  mean /= static_cast<double>(values.size());
  if (std::all_of(values.begin(), values.end(), [&](double v) { return v == values.front(); })) {
    return {values.front(), 0.0};
  }
  double var = 0.0;
  for (double v : values) var += (v - mean) * (v - mean);
  var /= static_cast<double>(values.size());
  return {mean, std::sqrt(var)};
}

namespace {

std::string join(const std::vector<std::string>& items, const std::string& sep) {
  std::string out;
  for (std::size_t i = 0; i < items.size(); ++i) out += (i ? sep : "") + items[i];
  return out;
}

std::string class_name(const std::vector<std::string>& names, std::size_t i) {
  return i < names.size() ? names[i] : std::to_string(i);
}

}  // namespace

std::string EvalReport::to_text() const {
  std::ostringstream os;
  os << "protocol: " << protocol << '\n';
  os << "classes: " << join(class_names, ", ") << '\n';
  os << "excluded classes: " << (excluded_classes.empty() ? "none" : join(excluded_classes, ", ")) << '\n';
  for (const auto& n : notes) os << "note: " << n << '\n';
  os << '\n' << std::left << std::setw(6) << "fold" << std::setw(8) << "train" << std::setw(7) << "test"
     << std::setw(8) << "epochs" << std::setw(10) << "accuracy" << "test subjects\n";
  os << std::fixed;
  for (const auto& f : folds) {
    os << std::setw(6) << f.fold << std::setw(8) << f.train_samples << std::setw(7) << f.test_samples << std::setw(8)
       << f.epochs_run << std::setw(10) << std::setprecision(4) << f.accuracy << join(f.test_subjects, ",") << '\n';
  }
  os << "\naccuracy: " << std::setprecision(2) << 100.0 * mean << " +- " << 100.0 * stddev << " %\n";

  os << "\nconfusion matrix (rows = true class, columns = predicted; count and row %)\n";
  std::size_t w = 8;
  for (const auto& n : class_names) w = std::max(w, n.size() + 2);
  os << std::setw(static_cast<int>(w)) << "";
  for (std::size_t c = 0; c < confusion.classes; ++c) os << std::setw(16) << class_name(class_names, c);
  os << '\n';
  for (std::size_t r = 0; r < confusion.classes; ++r) {
    os << std::setw(static_cast<int>(w)) << class_name(class_names, r);
    for (std::size_t c = 0; c < confusion.classes; ++c) {
      std::ostringstream cell;
      cell << std::fixed << std::setprecision(1) << confusion.counts[r][c] << " (" << confusion.percentages[r][c] << "%)";
      os << std::setw(16) << cell.str();
    }
    if (confusion.zero_support[r]) os << "  [no samples]";
    os << '\n';
  }
  os << "total samples: " << confusion.total << '\n';
  return os.str();
}

std::string EvalReport::to_csv() const {
  std::ostringstream os;
  os.precision(17);
  os << "record,fold,true_class,predicted_class,value\n";
  for (const auto& f : folds) os << "accuracy," << f.fold << ",,," << f.accuracy << '\n';
  os << "mean,,,," << mean << '\n';
  os << "std,,,," << stddev << '\n';
  for (std::size_t r = 0; r < confusion.classes; ++r) {
    for (std::size_t c = 0; c < confusion.classes; ++c) {
      os << "count,," << class_name(class_names, r) << ',' << class_name(class_names, c) << ','
         << confusion.counts[r][c] << '\n';
    }
  }
  for (std::size_t r = 0; r < confusion.classes; ++r) {
    for (std::size_t c = 0; c < confusion.classes; ++c) {
      os << "percent,," << class_name(class_names, r) << ',' << class_name(class_names, c) << ','
         << confusion.percentages[r][c] << '\n';
    }
  }
  return os.str();
}

std::string EvalReport::to_json() const {
  nlohmann::json j;
  j["protocol"] = protocol;
  j["classes"] = class_names;
  j["excluded_classes"] = excluded_classes;
  j["notes"] = notes;
  j["folds"] = nlohmann::json::array();
  for (const auto& f : folds) {
    j["folds"].push_back({{"fold", f.fold},
                          {"test_subjects", f.test_subjects},
                          {"train_samples", f.train_samples},
                          {"test_samples", f.test_samples},
                          {"epochs", f.epochs_run},
                          {"accuracy", f.accuracy}});
  }
  j["mean_accuracy"] = mean;
  j["std_accuracy"] = stddev;
  j["confusion"] = {{"counts", confusion.counts},
                    {"percentages", confusion.percentages},
                    {"zero_support", confusion.zero_support},
                    {"total", confusion.total}};
  return j.dump(2);
}

void EvalReport::write(const fs::path& dir) const {
  fs::create_directories(dir);
  auto put = [&](const char* name, const std::string& text) {
    std::ofstream os(dir / name);
    if (!os) throw IoError("cannot write " + (dir / name).string());
    os << text;
    if (text.empty() || text.back() != '\n') os << '\n';
  };
  put("report.txt", to_text());
  put("report.csv", to_csv());
  put("report.json", to_json());
}

namespace {

void check_labels(const Dataset& data, std::size_t classes) {
  for (const auto& s : data.samples) {
    if (s.label >= classes) {
      throw ContractError("sample from " + s.video + " has label " + std::to_string(s.label) + " but the model has " +
                          std::to_string(classes) + " classes");
    }
  }
}

}  // namespace

template <typename T>
EvalReport run_subject_independent(const Dataset& data, const ModelConfig& config, const ProtocolOptions& options) {
  check_labels(data, config.num_classes);
  const auto plan = make_subject_folds(data, options.k, options.seed);
  const std::size_t folds = options.max_folds ? std::min(options.max_folds, options.k) : options.k;

  EvalReport report;
  report.protocol = "subject-independent, " + std::to_string(options.k) + "-fold" +
                    (folds < options.k ? " (first " + std::to_string(folds) + " folds only)" : "");
  report.class_names = data.class_names;
  if (report.class_names.size() < config.num_classes) {
    for (std::size_t i = report.class_names.size(); i < config.num_classes; ++i) report.class_names.push_back(std::to_string(i));
  }
  MaskCache cache;
  std::vector<std::size_t> truths, preds;
  std::vector<double> accuracies;
  for (std::size_t f = 0; f < folds; ++f) {
    const std::set<std::string> test_set(plan.test_subjects[f].begin(), plan.test_subjects[f].end());
    std::vector<std::size_t> train_idx, test_idx;
    for (std::size_t i = 0; i < data.size(); ++i) {
      (test_set.count(data.samples[i].subject) ? test_idx : train_idx).push_back(i);
    }
    const auto train = data.subset(train_idx);
    const auto test = data.subset(test_idx);

    const std::uint64_t fold_seed = derive_seed(options.seed, 1000 + f);
    auto params = build<T>(config, fold_seed);
    auto state = make_trainer(params, fold_seed, options.sgd);
    auto fit_options = options.fit;
    if (options.log) {
      fit_options.on_epoch = [&, f](const EpochLog& row) {
        *options.log << "fold " << f + 1 << " epoch " << row.epoch << ' ' << row.split << " loss " << row.loss
                     << " accuracy " << row.accuracy << '\n';
        if (options.fit.on_epoch) options.fit.on_epoch(row);
      };
    }
    const auto fr = fit(params, train, nullptr, fit_options, state, &cache);
    ForwardOptions base;
    base.mask_source = options.fit.mask_source;
    const auto ev = evaluate(params, test, options.fit.batch_size, &cache, {}, base);
    truths.insert(truths.end(), ev.truths.begin(), ev.truths.end());
    preds.insert(preds.end(), ev.predictions.begin(), ev.predictions.end());
    accuracies.push_back(ev.accuracy);
    report.folds.push_back({f + 1, plan.test_subjects[f], train.size(), test.size(), fr.epochs_run, ev.accuracy});
    if (options.log) *options.log << "fold " << f + 1 << " test accuracy " << ev.accuracy << '\n';
  }
  std::tie(report.mean, report.stddev) = mean_and_stddev(accuracies);
  report.confusion = confusion_matrix(truths, preds, config.num_classes);
  return report;
}

CrossDatabaseSplit split_cross_database(const std::vector<Dataset>& databases, const std::string& test_database) {
  std::set<std::string> ids;
  for (const auto& d : databases) {
    for (const auto& s : d.samples) ids.insert(s.database);
  }
  if (ids.size() < 2) throw ContractError("cross-database evaluation needs at least 2 databases");
  if (!ids.count(test_database)) throw ContractError("test database '" + test_database + "' not found");

  CrossDatabaseSplit split;
  // Training label space: classes with training samples, in first-seen order.
  std::vector<std::string>& names = split.train.class_names;
  for (const auto& d : databases) {
    std::vector<bool> used(d.class_names.size(), false);
    for (const auto& s : d.samples) {
      if (s.database != test_database && s.label < used.size()) used[s.label] = true;
    }
    for (std::size_t c = 0; c < d.class_names.size(); ++c) {
      if (used[c] && std::find(names.begin(), names.end(), d.class_names[c]) == names.end()) names.push_back(d.class_names[c]);
    }
  }
  split.test.class_names = names;
  auto id_of = [&](const std::string& name) -> std::optional<std::size_t> {
    auto it = std::find(names.begin(), names.end(), name);
    if (it == names.end()) return std::nullopt;
    return static_cast<std::size_t>(it - names.begin());
  };
  std::set<std::size_t> present;
  for (const auto& d : databases) {
    for (const auto& s : d.samples) {
      const std::string& name = d.class_names.at(s.label);
      SequenceSample copy = s;
      if (s.database != test_database) {
        copy.label = *id_of(name);
        split.train.samples.push_back(std::move(copy));
        continue;
      }
      const auto id = id_of(name);
      if (!id) {
        if (std::find(split.excluded_classes.begin(), split.excluded_classes.end(), name) == split.excluded_classes.end()) {
          split.excluded_classes.push_back(name);
        }
        continue;
      }
      copy.label = *id;
      present.insert(*id);
      split.test.samples.push_back(std::move(copy));
    }
  }
  if (present.empty()) {
    throw ContractError("no class of test database '" + test_database + "' occurs in the training databases");
  }
  split.test_classes.assign(present.begin(), present.end());
  return split;
}

template <typename T>
EvalReport run_cross_database(const std::vector<Dataset>& databases, const std::string& test_database,
                              const ModelConfig& config, const ProtocolOptions& options) {
  auto split = split_cross_database(databases, test_database);
  ModelConfig cfg = config;
  cfg.num_classes = split.train.class_names.size();
  if (cfg.num_classes < 2) throw ContractError("training databases cover fewer than 2 classes");

  EvalReport report;
  report.protocol = "cross-database, test database '" + test_database + "'";
  report.class_names = split.train.class_names;
  report.excluded_classes = split.excluded_classes;
  if (cfg.num_classes != config.num_classes) {
    report.notes.push_back("class count set to " + std::to_string(cfg.num_classes) + " from the training label set");
  }
  for (const auto& name : split.excluded_classes) {
    report.notes.push_back("class '" + name + "' has no training samples; excluded from testing");
    if (options.log) *options.log << "excluding test class '" << name << "' (absent from training)\n";
  }
  std::vector<std::string> tested;
  for (auto c : split.test_classes) tested.push_back(split.train.class_names[c]);
  report.notes.push_back("predictions restricted to tested classes: " + join(tested, ", "));

  MaskCache cache;
  const std::uint64_t run_seed = derive_seed(options.seed, 2000);
  auto params = build<T>(cfg, run_seed);
  auto state = make_trainer(params, run_seed, options.sgd);
  auto fit_options = options.fit;
  if (options.log) {
    fit_options.on_epoch = [&](const EpochLog& row) {
      *options.log << "epoch " << row.epoch << ' ' << row.split << " loss " << row.loss << " accuracy "
                   << row.accuracy << '\n';
    };
  }
  const auto fr = fit(params, split.train, nullptr, fit_options, state, &cache);
  ForwardOptions base;
  base.mask_source = options.fit.mask_source;
  const auto ev = evaluate(params, split.test, options.fit.batch_size, &cache, split.test_classes, base);

  std::set<std::string> test_subjects;
  for (const auto& s : split.test.samples) test_subjects.insert(s.subject);
  report.folds.push_back({1, {test_subjects.begin(), test_subjects.end()}, split.train.size(), split.test.size(),
                          fr.epochs_run, ev.accuracy});
  report.mean = ev.accuracy;
  report.stddev = 0.0;
  report.confusion = confusion_matrix(ev.truths, ev.predictions, cfg.num_classes);
  return report;
}

template EvalReport run_subject_independent<float>(const Dataset&, const ModelConfig&, const ProtocolOptions&);
template EvalReport run_subject_independent<double>(const Dataset&, const ModelConfig&, const ProtocolOptions&);
template EvalReport run_cross_database<float>(const std::vector<Dataset>&, const std::string&, const ModelConfig&,
                                              const ProtocolOptions&);
template EvalReport run_cross_database<double>(const std::vector<Dataset>&, const std::string&, const ModelConfig&,
                                               const ProtocolOptions&);

}  // namespace dir3d
