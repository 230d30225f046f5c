#include <pybind11/numpy.h>
#include <pybind11/pybind11.h>
#include <pybind11/stl.h>

#include <algorithm>

#include "haloroute/diagnostics.hpp"
#include "haloroute/experiment.hpp"
#include "haloroute/routing.hpp"
#include "haloroute/stats.hpp"

namespace py = pybind11;
using namespace haloroute;

namespace {

using Array = py::array_t<double, py::array::c_style | py::array::forcecast>;

// [C, H, W] or [N, C, H, W] array -> Tensor (copy).
Tensor to_tensor(const Array& a) {
  const auto nd = a.ndim();
  if (nd != 3 && nd != 4) throw py::value_error("expected a [C, H, W] or [N, C, H, W] array");
  const int off = nd == 4 ? 1 : 0;
  const int n = nd == 4 ? static_cast<int>(a.shape(0)) : 1;
  Tensor t(n, static_cast<int>(a.shape(off)), static_cast<int>(a.shape(off + 1)),
           static_cast<int>(a.shape(off + 2)));
  std::copy(a.data(), a.data() + a.size(), t.storage().begin());
  return t;
}

Array to_array(const Tensor& t) {
  Array a({t.batch(), t.channels(), t.height(), t.width()});
  std::copy(t.storage().begin(), t.storage().end(), a.mutable_data());
  return a;
}

py::object json_to_py(const nlohmann::json& j) {
  return py::module_::import("json").attr("loads")(j.dump());
}

nlohmann::json py_to_json(const py::object& o) {
  return nlohmann::json::parse(py::module_::import("json").attr("dumps")(o).cast<std::string>());
}

ExperimentConfig config_from(const py::object& o) { return ExperimentConfig::from_json(py_to_json(o)); }

}  // namespace

PYBIND11_MODULE(_core, m) {
  m.doc() = "haloroute native core";

  py::register_exception<GeometryError>(m, "GeometryError", PyExc_ValueError);
  py::register_exception<ConfigError>(m, "ConfigError", PyExc_ValueError);
  py::register_exception<DependencyError>(m, "DependencyError", PyExc_RuntimeError);
  py::register_exception<NumericError>(m, "NumericError", PyExc_ArithmeticError);

  // statistics
  m.def("audit", [](double raw, double glob, double hyb) {
    const auto r = audit(raw, glob, hyb);
    return py::dict(py::arg("A") = r.global_share, py::arg("J_loc") = r.local_gain, py::arg("total") = r.total);
  }, py::arg("l_raw"), py::arg("l_glob"), py::arg("l_hyb"));
  m.def("median", [](std::vector<double> v) { return median(std::move(v)); });
  m.def("median_of_ratios", [](const std::vector<double>& a, const std::vector<double>& b) {
    return median_of_ratios(a, b);
  });
  m.def("bootstrap_median_ci", [](const std::vector<double>& v, int replicates, double alpha, std::uint64_t seed) {
    const auto ci = bootstrap_median_ci(v, replicates, alpha, seed);
    return py::make_tuple(ci.lo, ci.hi);
  }, py::arg("values"), py::arg("replicates") = 10000, py::arg("alpha") = 0.05, py::arg("seed") = 0);
  m.def("sign_test_floor", &sign_test_floor);
  m.def("sign_test_p", &sign_test_p);
  m.def("gini", [](const std::vector<double>& v) { return gini(v); });
  m.def("topq_share", [](const std::vector<double>& v, double q) { return topq_share(v, q); });

  // routing
  m.def("select_topk", [](const std::vector<double>& s, int k) { return select_topk(s, k); });
  m.def("budget_blocks", &budget_blocks);
  m.def("jaccard", [](const std::vector<int>& a, const std::vector<int>& b) { return jaccard(a, b); });
  m.def("policy_names", &policy_names);
  m.def("risk_scores", [](const Array& x_t, const Array& x_g, int block, int halo, double lambda_ke) {
    const Tensor a = to_tensor(x_t), b = to_tensor(x_g);
    RiskConfig rc;
    rc.lambda_ke = lambda_ke;
    return risk_scores(a, b, make_partition(a.height(), a.width(), block, halo), rc);
  }, py::arg("x_t"), py::arg("x_g"), py::arg("block") = 8, py::arg("halo") = 4, py::arg("lambda_ke") = 0.05);
  m.def("hann_profile", [](int b) { return hann_window(b).profile; });

  // diagnostics
  m.def("kinetic_energy", [](const Array& f) { return kinetic_energy(to_tensor(f)); });
  m.def("mean_abs_divergence", [](const Array& f) { return mean_abs_divergence(to_tensor(f)); });
  m.def("enstrophy", [](const Array& f) { return enstrophy(to_tensor(f)); });
  m.def("ke_spectrum", [](const Array& f) { return ke_spectrum(to_tensor(f)); });
  m.def("drift", &drift);

  // data
  m.def("generate_dataset", [](const py::object& solver, int n_traj, int n_frames) {
    const auto data = generate_dataset(solver_from_json(py_to_json(solver)), n_traj, n_frames);
    py::list out;
    for (const auto& t : data) {
      py::list frames;
      for (const auto& f : t.frames) frames.append(to_array(f));
      out.append(frames);
    }
    return out;
  }, py::arg("solver"), py::arg("n_traj"), py::arg("n_frames"));
  m.def("surrogate_forecast", [](const Array& x, const py::object& host, const py::object& solver) {
    return to_array(surrogate_forecast(to_tensor(x), host_from_json(py_to_json(host)),
                                       solver_from_json(py_to_json(solver))));
  });

  // experiment commands take the config as a dict and return the results dict
  m.def("resolve_config", [](const py::object& cfg) { return json_to_py(config_from(cfg).to_json()); });
  m.def("gen_data", [](const py::object& cfg) { return json_to_py(cmd_gen_data(config_from(cfg))); });
  m.def("train", [](const py::object& cfg, const std::string& stage, int stop_after, bool fresh) {
    return json_to_py(cmd_train(config_from(cfg), parse_stage(stage), {stop_after, fresh}));
  }, py::arg("config"), py::arg("stage"), py::arg("stop_after") = -1, py::arg("fresh") = false);
  m.def("evaluate", [](const py::object& cfg) { return json_to_py(cmd_evaluate(config_from(cfg))); });
  m.def("sweep", [](const py::object& cfg, const std::string& axis) {
    return json_to_py(cmd_sweep(config_from(cfg), axis));
  });
  m.def("ablate", [](const py::object& cfg, const std::string& which) {
    return json_to_py(cmd_ablate(config_from(cfg), which));
  });
  m.def("audit_results", [](const py::object& cfg, const std::string& path) {
    return json_to_py(cmd_audit(config_from(cfg), path));
  }, py::arg("config"), py::arg("results") = "");
  m.def("diagnose", [](const py::object& cfg) { return json_to_py(cmd_diagnose(config_from(cfg))); });
}
