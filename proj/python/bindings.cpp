#include <pybind11/numpy.h>
#include <pybind11/pybind11.h>
#include <pybind11/stl.h>
#include <pybind11/stl/filesystem.h>

#include "drl/checkpoint.hpp"
#include "drl/config.hpp"
#include "drl/error.hpp"
#include "drl/experiment.hpp"
#include "drl/supervision.hpp"

namespace py = pybind11;
using namespace drl;

namespace {

using Array = py::array_t<double, py::array::c_style | py::array::forcecast>;

Tensor to_tensor(const Array& a) {
  Shape shape(a.shape(), a.shape() + a.ndim());
  return Tensor(shape, std::vector<double>(a.data(), a.data() + a.size()));
}

Array to_array(const Tensor& t) {
  std::vector<py::ssize_t> shape(t.shape().begin(), t.shape().end());
  Array out(shape);
  std::copy(t.values().begin(), t.values().end(), out.mutable_data());
  return out;
}

std::vector<double> as_vector(const Array& a) { return {a.data(), a.data() + a.size()}; }

DasConfig das_config(double k, std::optional<double> k_plus, std::optional<double> k_minus, double lambda_p,
                     double lambda_n) {
  DasConfig c;
  c.k = k;
  c.k_plus = k_plus;
  c.k_minus = k_minus;
  c.lambda_p = lambda_p;
  c.lambda_n = lambda_n;
  c.validate();
  return c;
}

py::dict metrics_dict(const MetricsTable& m) {
  py::list stages;
  for (const auto& s : m.stages) {
    py::dict d;
    d["stage"] = s.stage;
    d["seen_classes"] = s.seen_classes;
    d["correct"] = s.correct;
    d["total"] = s.total;
    d["accuracy"] = s.accuracy;
    stages.append(d);
  }
  py::dict out;
  out["stages"] = stages;
  out["a_bar"] = m.a_bar();
  out["a_last"] = m.a_last();
  return out;
}

// A loaded checkpoint: forward pass and prototype classification.
class Model {
 public:
  explicit Model(const std::filesystem::path& path) : ck_(load_checkpoint(path)) {
    // stage checkpoints hold measured prototypes only
    bool complete = true;
    for (const auto& [c, p] : ck_.store.classes())
      complete = complete && ck_.store.has_segment(c, static_cast<std::size_t>(ck_.state.stage_index));
    if (!complete) synthesize_old_prototypes(ck_.store, ck_.state, ck_.config.tau);
  }

  Array features(const Array& image) const { return to_array(ck_.state.forward(to_tensor(image)).features); }

  py::tuple predict(const Array& image) const {
    const Classification c = classify(ck_.state.forward(to_tensor(image)).features, ck_.store);
    return py::make_tuple(c.predicted, c.scores);
  }

  int stage() const { return ck_.state.stage_index; }
  std::string config_json() const { return to_json(ck_.config); }
  std::vector<int> classes() const {
    std::vector<int> out;
    for (const auto& [c, p] : ck_.store.classes()) out.push_back(c);
    return out;
  }

 private:
  Checkpoint ck_;
};

}  // namespace

PYBIND11_MODULE(_core, m) {
  m.doc() = "DRL class-incremental lab";

  static py::exception<Error> base(m, "Error");
  static py::exception<DimensionError> dim(m, "DimensionError", base.ptr());
  static py::exception<DegenerateInputError> degen(m, "DegenerateInputError", base.ptr());
  static py::exception<ConfigError> config(m, "ConfigError", base.ptr());
  static py::exception<ProtocolError> protocol(m, "ProtocolError", base.ptr());
  static py::exception<NumericError> numeric(m, "NumericError", base.ptr());
  static py::exception<DeterminismError> determinism(m, "DeterminismError", base.ptr());
  static py::exception<IoError> io(m, "IoError", base.ptr());
  static py::exception<CheckpointError> ckpt(m, "CheckpointError", base.ptr());
  static py::exception<CheckpointMagicError> ck_magic(m, "CheckpointMagicError", ckpt.ptr());
  static py::exception<CheckpointVersionError> ck_version(m, "CheckpointVersionError", ckpt.ptr());
  static py::exception<CheckpointTruncatedError> ck_trunc(m, "CheckpointTruncatedError", ckpt.ptr());
  static py::exception<CheckpointCorruptError> ck_corrupt(m, "CheckpointCorruptError", ckpt.ptr());
  py::register_exception_translator([](std::exception_ptr p) {
    try {
      if (p) std::rethrow_exception(p);
    } catch (const CheckpointMagicError& e) {
      ck_magic(e.what());
    } catch (const CheckpointVersionError& e) {
      ck_version(e.what());
    } catch (const CheckpointTruncatedError& e) {
      ck_trunc(e.what());
    } catch (const CheckpointCorruptError& e) {
      ck_corrupt(e.what());
    } catch (const CheckpointError& e) {
      ckpt(e.what());
    } catch (const DimensionError& e) {
      dim(e.what());
    } catch (const DegenerateInputError& e) {
      degen(e.what());
    } catch (const ConfigError& e) {
      config(e.what());
    } catch (const ProtocolError& e) {
      protocol(e.what());
    } catch (const NumericError& e) {
      numeric(e.what());
    } catch (const DeterminismError& e) {
      determinism(e.what());
    } catch (const IoError& e) {
      io(e.what());
    } catch (const Error& e) {
      base(e.what());
    }
  });

  m.def(
      "das_loss",
      [](const Array& z, std::size_t target, double k, std::optional<double> k_plus, std::optional<double> k_minus) {
        const DasTerms t = das_loss(as_vector(z), target, das_config(k, k_plus, k_minus, 3.0, 1.0));
        return py::make_tuple(t.l_pos, t.l_neg);
      },
      py::arg("z"), py::arg("target"), py::arg("k") = 1.0, py::arg("k_plus") = py::none(),
      py::arg("k_minus") = py::none(), "(l_pos, l_neg) for logits z");
  m.def(
      "das_probabilities",
      [](const Array& z, std::size_t target, double k) {
        return das_probabilities(as_vector(z), target, das_config(k, std::nullopt, std::nullopt, 3.0, 1.0));
      },
      py::arg("z"), py::arg("target"), py::arg("k") = 1.0, "(p_pos, p_neg)");
  m.def(
      "das_gradients",
      [](const Array& z, std::size_t target, double k) {
        const DasGradients g = das_gradients(as_vector(z), target, das_config(k, std::nullopt, std::nullopt, 3.0, 1.0));
        return py::make_tuple(to_array(g.d_pos), to_array(g.d_neg));
      },
      py::arg("z"), py::arg("target"), py::arg("k") = 1.0, "(dl_pos/dz, dl_neg/dz)");
  m.def(
      "baseline_loss",
      [](const std::string& kind, const Array& values, std::size_t target, double scale, double margin) {
        return baseline_loss(kind, as_vector(values), target, scale, margin);
      },
      py::arg("kind"), py::arg("values"), py::arg("target"), py::arg("scale") = 1.0, py::arg("margin") = 0.35);
  m.def(
      "kd_loss", [](const Array& f_new, const Array& f_ptm) { return kd_loss(to_tensor(f_new), to_tensor(f_ptm)); },
      py::arg("f_new"), py::arg("f_ptm"));
  m.def("closed_form_param_count", &closed_form_param_count, py::arg("d"), py::arg("r"), py::arg("blocks"),
        py::arg("head_classes"));

  m.def("default_config", [] { return to_json(RunConfig{}); }, "default run configuration as JSON");
  m.def("preset_names", &preset_names);
  m.def(
      "apply_preset",
      [](const std::string& config_json, const std::string& name) {
        RunConfig c = config_from_json(config_json);
        apply_preset(c, name);
        return to_json(c);
      },
      py::arg("config_json"), py::arg("name"));
  m.def(
      "run_experiment",
      [](const std::string& config_json, bool write_artifacts) {
        const RunConfig c = config_from_json(config_json);
        ExperimentOptions o;
        o.quiet = true;
        o.write_artifacts = write_artifacts;
        ExperimentResult r;
        {
          py::gil_scoped_release release;
          r = run_experiment(c, o);
        }
        py::dict out = metrics_dict(r.metrics);
        out["summary_row"] = summary_row(c, r.metrics);
        std::vector<std::uint64_t> digests = r.checkpoint_digests;
        out["checkpoint_digests"] = digests;
        return out;
      },
      py::arg("config_json"), py::arg("write_artifacts") = false,
      "runs the full protocol; returns per-stage metrics, A_bar and A_T");
  m.def(
      "gradcheck_sweep",
      [](std::uint64_t seed, double h) {
        py::list rows;
        for (const auto& r : gradcheck_sweep(seed, h)) {
          py::dict d;
          d["label"] = r.label;
          d["group"] = r.group;
          d["coordinates"] = r.coordinates;
          d["max_rel_error"] = r.max_rel_error;
          d["worst_param"] = r.worst_param;
          d["default_architecture"] = r.default_architecture;
          rows.append(d);
        }
        return rows;
      },
      py::arg("seed") = 0, py::arg("h") = 1e-5);
  m.def(
      "inspect_checkpoint",
      [](const std::filesystem::path& path) {
        const CheckpointInfo i = inspect_checkpoint(path);
        py::dict d;
        d["version"] = i.version;
        d["config_digest"] = i.config_digest;
        d["file_digest"] = i.file_digest;
        d["bytes"] = i.bytes;
        d["stage_index"] = i.stage_index;
        d["streams"] = i.streams;
        d["params"] = i.params;
        d["prototype_classes"] = i.prototype_classes;
        return d;
      },
      py::arg("path"));

  py::class_<Model>(m, "Model", "stage checkpoint with forward and classify")
      .def(py::init<const std::filesystem::path&>(), py::arg("path"))
      .def("features", &Model::features, py::arg("image"), "concatenated class-token features F_t")
      .def("predict", &Model::predict, py::arg("image"), "(class id, [(class id, cosine), ...])")
      .def_property_readonly("stage", &Model::stage)
      .def_property_readonly("classes", &Model::classes)
      .def_property_readonly("config_json", &Model::config_json);
}
