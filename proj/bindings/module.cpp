#include <pybind11/pybind11.h>
#include <pybind11/stl.h>

#include "signdyn/harness.hpp"

namespace py = pybind11;
using namespace signdyn;

namespace {

std::vector<std::vector<double>> matrix_rows(const Matrix& m) {
  std::vector<std::vector<double>> rows(m.rows());
  for (int r = 0; r < m.rows(); ++r)
    rows[r].assign(m.row_ptr(r), m.row_ptr(r) + m.cols());
  return rows;
}

py::dict snapshot_dict(const ProbeSnapshot& s) {
  py::dict d;
  d["t"] = s.t;
  d["q_mu"] = s.q_mu;
  d["k_mu"] = s.k_mu;
  d["q_xi"] = matrix_rows(s.q_xi);
  d["k_xi"] = matrix_rows(s.k_xi);
  d["v_mu"] = s.v_mu;
  d["v_xi"] = s.v_xi;
  d["s11"] = s.s11;
  d["s21"] = s.s21;
  d["loss_deriv"] = s.loss_deriv;
  d["a_idx"] = s.a_idx;
  d["train_loss"] = s.train_loss;
  if (s.has_test_loss()) {
    d["test_loss"] = s.test_loss;
    d["test_zero_one"] = s.test_zero_one;
  } else {
    d["test_loss"] = py::none();
    d["test_zero_one"] = py::none();
  }
  return d;
}

}  // namespace

PYBIND11_MODULE(_core, m) {
  m.doc() = "Sign-descent training dynamics laboratory (C++ core)";
  m.attr("__version__") = kToolVersion;

  py::register_exception<config_error>(m, "ConfigError");
  py::register_exception<regime_error>(m, "RegimeError");

  py::class_<DataConfig>(m, "DataConfig")
      .def(py::init<>())
      .def_readwrite("d", &DataConfig::d)
      .def_readwrite("s", &DataConfig::s)
      .def_readwrite("n", &DataConfig::n)
      .def_readwrite("L", &DataConfig::L)
      .def_readwrite("sigma_p", &DataConfig::sigma_p)
      .def_readwrite("orthogonal", &DataConfig::orthogonal)
      .def_readwrite("disjoint_supports", &DataConfig::disjoint_supports)
      .def_readwrite("seed", &DataConfig::seed);

  py::class_<Patch>(m, "Patch")
      .def_readonly("idx", &Patch::idx)
      .def_readonly("val", &Patch::val)
      .def("l1", &Patch::l1)
      .def("l2sq", &Patch::l2sq);

  py::class_<Sample>(m, "Sample")
      .def_readonly("y", &Sample::y)
      .def_readonly("patches", &Sample::patches)
      .def_readonly("signal_positions", &Sample::signal_positions)
      .def("noise_positions", &Sample::noise_positions);

  py::class_<Dataset>(m, "Dataset")
      .def_readonly("config", &Dataset::config)
      .def_readonly("samples", &Dataset::samples);

  m.def("generate_dataset", &generate_dataset, py::arg("config"));
  m.def("supports_disjoint", &supports_disjoint);
  m.def("noise_norm_stats", [](const Dataset& ds) {
    py::list out;
    for (const auto& st : noise_norm_stats(ds)) {
      py::dict d;
      d["sample"] = st.sample;
      d["patch"] = st.patch;
      d["l1"] = st.l1;
      d["l2sq"] = st.l2sq;
      out.append(d);
    }
    return out;
  });
  m.def("save_dataset", &save_dataset);
  m.def("load_dataset", &load_dataset);

  py::class_<ModelConfig>(m, "ModelConfig")
      .def(py::init<>())
      .def_readwrite("d", &ModelConfig::d)
      .def_readwrite("m_k", &ModelConfig::m_k)
      .def_readwrite("m_v", &ModelConfig::m_v)
      .def_readwrite("L", &ModelConfig::L)
      .def_readwrite("sigma_0", &ModelConfig::sigma_0)
      .def_readwrite("init_seed", &ModelConfig::init_seed);

  py::class_<Params>(m, "Params")
      .def("w_q", [](const Params& p) { return matrix_rows(p.w_q); })
      .def("w_k", [](const Params& p) { return matrix_rows(p.w_k); })
      .def("w_v_pos", [](const Params& p) { return matrix_rows(p.w_v_pos); })
      .def("w_v_neg", [](const Params& p) { return matrix_rows(p.w_v_neg); });

  m.def("init_params", &init_params);
  m.def("mean_value", &mean_value);
  m.def("empirical_loss",
        [](const Params& p, const Dataset& ds) { return empirical_loss(p, ds); });
  m.def("forward", [](const Params& p, const Sample& s) {
    const ForwardCache cache = forward(p, s);
    py::dict d;
    d["z"] = matrix_rows(cache.z);
    d["softmax"] = matrix_rows(cache.sm);
    d["f"] = cache.f;
    d["margin"] = cache.margin;
    d["loss"] = cache.loss;
    d["loss_deriv"] = cache.loss_deriv;
    return d;
  });
  m.def(
      "test_loss",
      [](const Params& p, const DataConfig& cfg, int n_test, uint64_t seed) {
        const TestLoss tl = test_loss(p, cfg, n_test, seed);
        return py::make_tuple(tl.logistic, tl.zero_one);
      },
      py::arg("params"), py::arg("config"), py::arg("n_test") = 500, py::arg("seed") = 0);

  m.def(
      "gradients",
      [](const Params& p, const Dataset& ds) {
        const Head head = Head::fixed(p.w_v_pos.rows());
        const auto caches = forward_all(p, head, ds);
        const Grads g = compute_grads(p, head, ds, caches);
        py::dict d;
        d["g_q"] = matrix_rows(g.g_q);
        d["g_k"] = matrix_rows(g.g_k);
        d["g_v_pos"] = matrix_rows(g.g_v_pos);
        d["g_v_neg"] = matrix_rows(g.g_v_neg);
        return d;
      },
      "Analytic gradient of the empirical loss");
  m.def(
      "finite_difference_gradients",
      [](const Params& p, const Dataset& ds, double h) {
        const Head head = Head::fixed(p.w_v_pos.rows());
        const Grads g = finite_difference_oracle(p, head, ds, h);
        py::dict d;
        d["g_q"] = matrix_rows(g.g_q);
        d["g_k"] = matrix_rows(g.g_k);
        d["g_v_pos"] = matrix_rows(g.g_v_pos);
        d["g_v_neg"] = matrix_rows(g.g_v_neg);
        return d;
      },
      py::arg("params"), py::arg("dataset"), py::arg("h") = 1e-6);

  py::enum_<OptimizerKind>(m, "OptimizerKind")
      .value("signgd", OptimizerKind::signgd)
      .value("gd", OptimizerKind::gd)
      .value("gd_momentum", OptimizerKind::gd_momentum)
      .value("adam", OptimizerKind::adam);

  py::class_<OptimizerSpec>(m, "OptimizerSpec")
      .def(py::init<>())
      .def_readwrite("kind", &OptimizerSpec::kind)
      .def_readwrite("eta", &OptimizerSpec::eta)
      .def_readwrite("beta1", &OptimizerSpec::beta1)
      .def_readwrite("beta2", &OptimizerSpec::beta2)
      .def_readwrite("epsilon", &OptimizerSpec::epsilon)
      .def_readwrite("bias_correction", &OptimizerSpec::bias_correction);

  m.def(
      "train",
      [](const Params& init, const Dataset& ds, const OptimizerSpec& spec, long iters,
         const std::string& cadence) {
        TrainOptions options;
        options.spec = spec;
        options.iters = iters;
        options.schedule = parse_cadence(cadence);
        options.schedule.test_loss_every = 0;
        const Trace trace = run_training(init, ds, options);
        py::list snaps;
        for (const ProbeSnapshot& s : trace.snapshots) snaps.append(snapshot_dict(s));
        py::dict out;
        out["snapshots"] = snaps;
        out["final_params"] = trace.final_params;
        return out;
      },
      py::arg("init"), py::arg("dataset"), py::arg("spec"), py::arg("iters"),
      py::arg("cadence") = "1:50,10");

  m.def("parse_config_file", &parse_config_file);
  m.def(
      "run_train",
      [](const std::string& config_path, const std::string& out_dir) {
        const TrainResult r = run_train(parse_config_file(config_path), out_dir);
        py::dict d;
        d["trace"] = r.paths.trace;
        d["final_train_loss"] = r.final_train_loss;
        d["final_test_loss"] = r.final_test_loss;
        return d;
      },
      py::arg("config_path"), py::arg("out_dir"));
  m.def(
      "run_verify",
      [](const std::string& trace_path, double epsilon) {
        const VerifyResult r = run_verify(trace_path, epsilon);
        py::dict d;
        d["exit_code"] = r.exit_code;
        d["text"] = r.text;
        d["json"] = r.json;
        return d;
      },
      py::arg("trace_path"), py::arg("epsilon") = 0.01);
}
