#include <pybind11/numpy.h>
#include <pybind11/pybind11.h>
#include <pybind11/stl.h>
#include <pybind11/stl/filesystem.h>

#include <sstream>

#include "dir3d/config.hpp"
#include "dir3d/data.hpp"
#include "dir3d/errors.hpp"
#include "dir3d/evaluation.hpp"
#include "dir3d/landmarks.hpp"
#include "dir3d/model.hpp"
#include "dir3d/ops.hpp"
#include "dir3d/serialize.hpp"
#include "dir3d/training.hpp"

namespace py = pybind11;
using namespace dir3d;

namespace {

using DoubleArray = py::array_t<double, py::array::c_style | py::array::forcecast>;
using FloatArray = py::array_t<float, py::array::c_style | py::array::forcecast>;

template <typename T, typename A>
Tensor<T> to_tensor(const A& a) {
  Shape shape(a.shape(), a.shape() + a.ndim());
  return Tensor<T>(shape, std::vector<T>(a.data(), a.data() + a.size()));
}

template <typename T>
py::array_t<T> to_array(const Tensor<T>& t) {
  py::array_t<T> out(std::vector<py::ssize_t>(t.shape().begin(), t.shape().end()));
  std::copy(t.data().begin(), t.data().end(), out.mutable_data());
  return out;
}

Padding3 parse_padding(const std::string& text) {
  auto one = [](char c) {
    if (c == 'S' || c == 's') return Padding::Same;
    if (c == 'V' || c == 'v') return Padding::Valid;
    throw ContractError(std::string("padding letter must be S or V, got '") + c + "'");
  };
  if (text == "same") return Padding3(Padding::Same);
  if (text == "valid") return Padding3(Padding::Valid);
  if (text.size() == 3) return Padding3(one(text[0]), one(text[1]), one(text[2]));
  throw ContractError("padding must be 'same', 'valid' or three letters like 'SVV', got '" + text + "'");
}

// landmarks: [batch][T] arrays of shape [66, 2] holding (x, y) pixel coordinates.
std::vector<SequenceLandmarks> to_landmarks(const std::vector<std::vector<DoubleArray>>& batch, std::size_t height,
                                            std::size_t width) {
  std::vector<SequenceLandmarks> out;
  for (const auto& seq : batch) {
    SequenceLandmarks frames;
    for (const auto& a : seq) {
      if (a.ndim() != 2 || a.shape(1) != 2) throw DimensionError("landmark arrays must be [66, 2] (x, y)");
      std::vector<Point2> pts(static_cast<std::size_t>(a.shape(0)));
      for (std::size_t i = 0; i < pts.size(); ++i) pts[i] = {a.at(i, 0), a.at(i, 1)};
      frames.emplace_back(std::move(pts), height, width);
    }
    out.push_back(std::move(frames));
  }
  return out;
}

py::dict trace_dict(const ShapeTrace& t) {
  py::list rows;
  for (const auto& r : t.rows) {
    py::dict d;
    d["stage"] = r.stage;
    d["layer"] = r.layer;
    d["shape"] = r.shape;
    rows.append(d);
  }
  py::dict out;
  out["rows"] = rows;
  out["parameter_count"] = t.parameter_count;
  out["stem_output"] = t.stem_output;
  out["reduction_a_output"] = t.reduction_a_output;
  out["reduction_b_output"] = t.reduction_b_output;
  out["text"] = format_trace(t.rows);
  return out;
}

py::object report_to_python(const EvalReport& r) { return py::module_::import("json").attr("loads")(r.to_json()); }

ProtocolOptions protocol(std::size_t k, std::size_t max_folds, std::size_t epochs, std::size_t batch_size, double lr,
                         bool use_landmarks, std::uint64_t seed) {
  ProtocolOptions p;
  p.k = k;
  p.max_folds = max_folds;
  p.fit.epochs = epochs;
  p.fit.batch_size = batch_size;
  p.sgd.learning_rate = lr;
  if (!use_landmarks) p.fit.mask_source = MaskSource::Ones;
  p.seed = seed;
  return p;
}

class Model {
 public:
  Model(const ModelConfig& config, std::uint64_t seed) : params_(build<float>(config, seed)) {}
  explicit Model(Checkpoint<float> ck) : params_(std::move(ck.params)) {}

  const ModelConfig& config() const { return params_.config; }
  std::size_t parameter_count() const { return params_.parameter_count(); }

  py::array_t<float> predict(const FloatArray& clips, const std::vector<std::vector<DoubleArray>>& landmarks) const {
    const auto& c = params_.config;
    const auto p = dir3d::predict(params_, to_tensor<float>(clips), to_landmarks(landmarks, c.height, c.width));
    return to_array(p.probabilities);
  }

  std::map<std::string, py::array_t<float>> parameters() const {
    std::map<std::string, py::array_t<float>> out;
    for (const auto& [name, t] : params_.tensors) out.emplace(name, to_array(t));
    return out;
  }

  void save(const std::filesystem::path& path, std::uint64_t seed) const {
    save_checkpoint(path, params_, make_trainer(params_, seed));
  }

 private:
  ModelParams<float> params_;
};

}  // namespace

PYBIND11_MODULE(_core, m) {
  m.doc() = "3D Inception-ResNet + LSTM expression recognition with landmark-weighted residual shortcuts.";

  py::register_exception<Error>(m, "Error");
  py::register_exception<DimensionError>(m, "DimensionError", m.attr("Error"));
  py::register_exception<ContractError>(m, "ContractError", m.attr("Error"));
  py::register_exception<DataError>(m, "DataError", m.attr("Error"));
  py::register_exception<ConfigError>(m, "ConfigError", m.attr("Error"));
  py::register_exception<FormatError>(m, "FormatError", m.attr("Error"));
  py::register_exception<IoError>(m, "IoError", m.attr("Error"));
  py::register_exception<CompatibilityError>(m, "CompatibilityError", m.attr("Error"));

  py::class_<ModelConfig>(m, "ModelConfig")
      .def_static("preset", &ModelConfig::preset, py::arg("name"))
      .def_static("parse", &ModelConfig::parse, py::arg("text"))
      .def_static("load", &ModelConfig::load, py::arg("path"))
      .def("to_text", &ModelConfig::to_text)
      .def("hash", &ModelConfig::hash)
      .def_readonly("frames", &ModelConfig::frames)
      .def_readonly("height", &ModelConfig::height)
      .def_readonly("width", &ModelConfig::width)
      .def_readonly("channels", &ModelConfig::channels)
      .def_readonly("num_classes", &ModelConfig::num_classes)
      .def("__eq__", [](const ModelConfig& a, const ModelConfig& b) { return a == b; })
      .def("__repr__", [](const ModelConfig& c) {
        std::ostringstream os;
        os << "<ModelConfig " << c.frames << "x" << c.height << "x" << c.width << "x" << c.channels << ", "
           << c.num_classes << " classes>";
        return os.str();
      });

  m.def("shape_trace", [](const ModelConfig& c) { return trace_dict(trace_shapes(c)); }, py::arg("config"),
        "Layer-by-layer shapes and the parameter count, without allocating the model.");

  m.def(
      "conv3d",
      [](const DoubleArray& x, const DoubleArray& k, std::array<std::size_t, 3> stride, const std::string& padding) {
        NoGradGuard ng;
        return to_array(conv3d(to_tensor<double>(x), to_tensor<double>(k), stride, parse_padding(padding)));
      },
      py::arg("x"), py::arg("kernel"), py::arg("stride") = std::array<std::size_t, 3>{1, 1, 1},
      py::arg("padding") = "valid", "Cross-correlation over [B,]T,H,W,C with a kT,kH,kW,Cin,Cout kernel.");

  m.def(
      "pool3d",
      [](const DoubleArray& x, std::array<std::size_t, 3> window, std::array<std::size_t, 3> stride,
         const std::string& padding, const std::string& mode) {
        if (mode != "max" && mode != "average") throw ContractError("mode must be 'max' or 'average'");
        NoGradGuard ng;
        return to_array(pool3d(to_tensor<double>(x), window, stride, parse_padding(padding),
                               mode == "max" ? PoolMode::Max : PoolMode::Average));
      },
      py::arg("x"), py::arg("window"), py::arg("stride"), py::arg("padding") = "valid", py::arg("mode") = "max");

  m.def(
      "weight_map",
      [](const std::vector<std::pair<std::size_t, std::size_t>>& points, std::size_t height, std::size_t width,
         std::size_t window, double slope, double background) {
        std::vector<GridPoint> pts;
        for (const auto& [r, c] : points) pts.push_back({r, c});
        MaskOptions o;
        o.window = window;
        o.slope = slope;
        o.background = background;
        const auto map = rasterize_weight_map(pts, {height, width}, o);
        py::array_t<double> out({height, width});
        std::copy(map.weights.begin(), map.weights.end(), out.mutable_data());
        return out;
      },
      py::arg("points"), py::arg("height"), py::arg("width"), py::arg("window") = 7, py::arg("slope") = 0.1,
      py::arg("background") = 0.0, "Landmark weight raster from (row, col) grid points.");

  m.def(
      "save_tensor",
      [](const std::filesystem::path& path, const DoubleArray& a) { save_tensor(path, to_tensor<double>(a)); },
      py::arg("path"), py::arg("array"));
  m.def(
      "load_tensor", [](const std::filesystem::path& path) { return to_array(load_tensor<double>(path)); },
      py::arg("path"));

  m.def(
      "make_subject_folds",
      [](const std::vector<std::string>& subjects, std::size_t k, std::uint64_t seed) {
        const auto plan = make_subject_folds(subjects, k, seed);
        return plan.test_subjects;
      },
      py::arg("sample_subjects"), py::arg("k"), py::arg("seed") = 0, "Held-out subject lists, one per fold.");

  m.def(
      "confusion_matrix",
      [](const std::vector<std::size_t>& truths, const std::vector<std::size_t>& predictions, std::size_t classes) {
        return confusion_matrix(truths, predictions, classes).counts;
      },
      py::arg("truths"), py::arg("predictions"), py::arg("classes"));

  m.def(
      "gen_synth",
      [](const std::filesystem::path& dir, std::size_t classes, std::size_t videos_per_class, std::size_t subjects,
         std::size_t height, std::size_t width, bool distractors, const std::string& database, std::uint64_t seed) {
        SynthOptions o;
        o.classes = classes;
        o.videos_per_class = videos_per_class;
        o.subjects = subjects;
        o.height = height;
        o.width = width;
        o.distractors = distractors;
        o.database = database;
        o.seed = seed;
        return write_synth_dataset(dir, o);
      },
      py::arg("dir"), py::arg("classes") = 3, py::arg("videos_per_class") = 30, py::arg("subjects") = 10,
      py::arg("height") = 64, py::arg("width") = 64, py::arg("distractors") = false, py::arg("database") = "synth",
      py::arg("seed") = 0, "Writes a synthetic dataset and returns the manifest path.");

  m.def(
      "eval_subject_independent",
      [](const std::filesystem::path& manifest, const ModelConfig& config, std::size_t k, std::size_t max_folds,
         std::size_t epochs, std::size_t batch_size, double lr, bool use_landmarks, std::uint64_t seed) {
        const auto data = load_dataset(manifest, config.height, config.width);
        EvalReport r;
        {
          py::gil_scoped_release release;
          r = run_subject_independent<float>(data, config,
                                             protocol(k, max_folds, epochs, batch_size, lr, use_landmarks, seed));
        }
        return report_to_python(r);
      },
      py::arg("manifest"), py::arg("config"), py::arg("k") = 5, py::arg("max_folds") = 0, py::arg("epochs") = 30,
      py::arg("batch_size") = 8, py::arg("lr") = 0.01, py::arg("use_landmarks") = true, py::arg("seed") = 0,
      "k-fold subject-independent evaluation; returns the report as a dict.");

  m.def(
      "eval_cross_database",
      [](const std::vector<std::filesystem::path>& manifests, const std::string& test_database,
         const ModelConfig& config, std::size_t epochs, std::size_t batch_size, double lr, std::uint64_t seed) {
        std::vector<Dataset> sets;
        for (const auto& m : manifests) sets.push_back(load_dataset(m, config.height, config.width));
        EvalReport r;
        {
          py::gil_scoped_release release;
          r = run_cross_database<float>(sets, test_database, config, protocol(2, 0, epochs, batch_size, lr, true, seed));
        }
        return report_to_python(r);
      },
      py::arg("manifests"), py::arg("test_database"), py::arg("config"), py::arg("epochs") = 30,
      py::arg("batch_size") = 8, py::arg("lr") = 0.01, py::arg("seed") = 0);

  m.def(
      "grad_check",
      [](const ModelConfig& config, std::uint64_t seed, std::size_t coordinates) {
        GradCheckOptions o;
        o.max_coordinates = coordinates;
        o.seed = seed;
        std::map<std::string, double> out;
        for (const auto& r : check_model_gradients(config, seed, o)) out[r.name] = r.relative_error;
        return out;
      },
      py::arg("config"), py::arg("seed") = 1, py::arg("coordinates") = 0,
      "Relative finite-difference error per parameter tensor (64-bit).");

  py::class_<Model>(m, "Model")
      .def(py::init<const ModelConfig&, std::uint64_t>(), py::arg("config"), py::arg("seed") = 0)
      .def_static(
          "load", [](const std::filesystem::path& path) { return Model(load_checkpoint<float>(path)); }, py::arg("path"))
      .def_property_readonly("config", &Model::config)
      .def_property_readonly("parameter_count", &Model::parameter_count)
      .def("parameters", &Model::parameters)
      .def("predict", &Model::predict, py::arg("clips"), py::arg("landmarks"),
           "clips [B,T,H,W,C] float in [0,1]; landmarks[b][t] a [66,2] array of (x, y). Returns class probabilities.")
      .def("save", &Model::save, py::arg("path"), py::arg("seed") = 0);
}
