#include "signdyn/harness.hpp"

#include <algorithm>
#include <atomic>
#include <chrono>
#include <cmath>
#include <filesystem>
#include <fstream>
#include <sstream>
#include <thread>

#include "json.hpp"

namespace signdyn {

namespace fs = std::filesystem;
using nlohmann::json;

namespace {

json data_to_json(const DataConfig& c) {
  return json{{"d", c.d},
              {"s", c.s},
              {"n", c.n},
              {"L", c.L},
              {"sigma_p", c.sigma_p},
              {"orthogonal", c.orthogonal},
              {"disjoint_supports", c.disjoint_supports},
              {"seed", c.seed}};
}

DataConfig data_from_json(const json& j) {
  DataConfig c;
  c.d = j.at("d").get<int>();
  c.s = j.at("s").get<int>();
  c.n = j.at("n").get<int>();
  c.L = j.at("L").get<int>();
  c.sigma_p = j.at("sigma_p").get<double>();
  c.orthogonal = j.at("orthogonal").get<bool>();
  c.disjoint_supports = j.value("disjoint_supports", false);
  c.seed = j.at("seed").get<uint64_t>();
  return c;
}

json model_to_json(const ModelConfig& c) {
  return json{{"d", c.d},       {"m_k", c.m_k},        {"m_v", c.m_v},
              {"L", c.L},       {"sigma_0", c.sigma_0}, {"init_seed", c.init_seed}};
}

ModelConfig model_from_json(const json& j) {
  ModelConfig c;
  c.d = j.at("d").get<int>();
  c.m_k = j.at("m_k").get<int>();
  c.m_v = j.at("m_v").get<int>();
  c.L = j.at("L").get<int>();
  c.sigma_0 = j.at("sigma_0").get<double>();
  c.init_seed = j.at("init_seed").get<uint64_t>();
  return c;
}

json optimizer_to_json(const OptimizerSpec& s) {
  return json{{"kind", to_string(s.kind)}, {"eta", s.eta},
              {"beta1", s.beta1},          {"beta2", s.beta2},
              {"epsilon", s.epsilon},      {"bias_correction", s.bias_correction}};
}

OptimizerSpec optimizer_from_json(const json& j) {
  OptimizerSpec s;
  s.kind = optimizer_kind_from_string(j.at("kind").get<std::string>());
  s.eta = j.at("eta").get<double>();
  s.beta1 = j.at("beta1").get<double>();
  s.beta2 = j.at("beta2").get<double>();
  s.epsilon = j.at("epsilon").get<double>();
  s.bias_correction = j.at("bias_correction").get<bool>();
  return s;
}

json manifest_to_json_obj(const RunManifest& m) {
  return json{{"experiment_id", m.experiment_id},
              {"data", data_to_json(m.data)},
              {"model", model_to_json(m.model)},
              {"optimizer", optimizer_to_json(m.optimizer)},
              {"iters", m.iters},
              {"probe_cadence", m.probe_cadence},
              {"test_loss_every", m.test_loss_every},
              {"n_test", m.n_test},
              {"zoom", m.zoom},
              {"zoom_iters", m.zoom_iters},
              {"dataset_file", m.dataset_file},
              {"tool_version", m.tool_version}};
}

RunManifest manifest_from_json_obj(const json& j) {
  RunManifest m;
  m.experiment_id = j.at("experiment_id").get<std::string>();
  m.data = data_from_json(j.at("data"));
  m.model = model_from_json(j.at("model"));
  m.optimizer = optimizer_from_json(j.at("optimizer"));
  m.iters = j.at("iters").get<long>();
  m.probe_cadence = j.at("probe_cadence").get<std::string>();
  m.test_loss_every = j.at("test_loss_every").get<int>();
  m.n_test = j.at("n_test").get<int>();
  m.zoom = j.at("zoom").get<int>();
  m.zoom_iters = j.at("zoom_iters").get<long>();
  m.dataset_file = j.value("dataset_file", "");
  m.tool_version = j.value("tool_version", "");
  return m;
}

json snapshot_to_json(const ProbeSnapshot& s) {
  json j;
  j["t"] = s.t;
  j["q_mu"] = s.q_mu;
  j["k_mu"] = s.k_mu;
  auto matrix_rows = [](const Matrix& m) {
    json rows = json::array();
    for (int r = 0; r < m.rows(); ++r)
      rows.push_back(std::vector<double>(m.row_ptr(r), m.row_ptr(r) + m.cols()));
    return rows;
  };
  j["q_xi"] = matrix_rows(s.q_xi);
  j["k_xi"] = matrix_rows(s.k_xi);
  j["v_mu"] = s.v_mu;
  j["v_xi"] = s.v_xi;
  j["s11"] = s.s11;
  j["s21"] = s.s21;
  j["loss_deriv"] = s.loss_deriv;
  j["a_idx"] = s.a_idx;
  j["train_loss"] = s.train_loss;
  if (s.has_test_loss()) {
    j["test_loss"] = s.test_loss;
    j["test_zero_one"] = s.test_zero_one;
  } else {
    j["test_loss"] = nullptr;
    j["test_zero_one"] = nullptr;
  }
  return j;
}

ProbeSnapshot snapshot_from_json(const json& j) {
  ProbeSnapshot s;
  s.t = j.at("t").get<double>();
  s.q_mu = j.at("q_mu").get<std::vector<double>>();
  s.k_mu = j.at("k_mu").get<std::vector<double>>();
  auto matrix_from = [](const json& rows) {
    const int r = static_cast<int>(rows.size());
    const int c = r ? static_cast<int>(rows[0].size()) : 0;
    Matrix m(r, c);
    for (int i = 0; i < r; ++i)
      for (int k = 0; k < c; ++k) m(i, k) = rows[i][k].get<double>();
    return m;
  };
  s.q_xi = matrix_from(j.at("q_xi"));
  s.k_xi = matrix_from(j.at("k_xi"));
  s.v_mu = j.at("v_mu").get<double>();
  s.v_xi = j.at("v_xi").get<std::vector<double>>();
  s.s11 = j.at("s11").get<std::vector<double>>();
  s.s21 = j.at("s21").get<std::vector<double>>();
  s.loss_deriv = j.at("loss_deriv").get<std::vector<double>>();
  s.a_idx = j.at("a_idx").get<std::vector<int>>();
  s.train_loss = j.at("train_loss").get<double>();
  if (!j.at("test_loss").is_null()) {
    s.test_loss = j.at("test_loss").get<double>();
    s.test_zero_one = j.at("test_zero_one").get<double>();
  }
  return s;
}

// ------------------------------ config files --------------------------------

struct KeyValue {
  std::string value;
  int line = 0;
  bool used = false;
};

std::string trim(const std::string& s) {
  const size_t a = s.find_first_not_of(" \t\r");
  if (a == std::string::npos) return "";
  const size_t b = s.find_last_not_of(" \t\r");
  return s.substr(a, b - a + 1);
}

class FlatConfig {
 public:
  FlatConfig(const std::string& text, std::string origin) : origin_(std::move(origin)) {
    std::stringstream ss(text);
    std::string line;
    int line_no = 0;
    while (std::getline(ss, line)) {
      ++line_no;
      const size_t hash = line.find('#');
      if (hash != std::string::npos) line = line.substr(0, hash);
      line = trim(line);
      if (line.empty()) continue;
      size_t sep = line.find('=');
      if (sep == std::string::npos) sep = line.find(':');
      if (sep == std::string::npos)
        throw config_error(origin_ + ":" + std::to_string(line_no) +
                           ": expected 'key = value', got '" + line + "'");
      const std::string key = trim(line.substr(0, sep));
      const std::string value = trim(line.substr(sep + 1));
      if (key.empty() || value.empty())
        throw config_error(origin_ + ":" + std::to_string(line_no) + ": empty key or value");
      entries_[key] = KeyValue{value, line_no, false};
    }
  }

  bool has(const std::string& key) const { return entries_.count(key) > 0; }

  std::string raw(const std::string& key) {
    auto it = entries_.find(key);
    if (it == entries_.end()) throw config_error(origin_ + ": missing required field '" + key + "'");
    it->second.used = true;
    return it->second.value;
  }

  template <typename T>
  T get(const std::string& key, T fallback) {
    if (!has(key)) return fallback;
    return convert<T>(key, raw(key));
  }

  template <typename T>
  T require(const std::string& key) {
    return convert<T>(key, raw(key));
  }

  void reject_unknown() const {
    for (const auto& [key, kv] : entries_)
      if (!kv.used)
        throw config_error(origin_ + ":" + std::to_string(kv.line) + ": unknown field '" + key +
                           "'");
  }

 private:
  template <typename T>
  T convert(const std::string& key, const std::string& value) {
    try {
      if constexpr (std::is_same_v<T, bool>) {
        if (value == "true" || value == "1" || value == "yes") return true;
        if (value == "false" || value == "0" || value == "no") return false;
        throw std::invalid_argument("not a bool");
      } else if constexpr (std::is_same_v<T, int>) {
        return std::stoi(value);
      } else if constexpr (std::is_same_v<T, long>) {
        return std::stol(value);
      } else if constexpr (std::is_same_v<T, uint64_t>) {
        return std::stoull(value);
      } else if constexpr (std::is_same_v<T, double>) {
        return std::stod(value);
      } else {
        return value;
      }
    } catch (const std::exception&) {
      throw config_error(origin_ + ": field '" + key + "': cannot parse '" + value + "'");
    }
  }

  std::string origin_;
  std::map<std::string, KeyValue> entries_;
};

std::string slurp(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw io_error("cannot open: " + path);
  std::stringstream ss;
  ss << in.rdbuf();
  return ss.str();
}

}  // namespace

std::string manifest_to_json(const RunManifest& manifest) {
  return manifest_to_json_obj(manifest).dump();
}

RunManifest manifest_from_json(const std::string& text) {
  try {
    return manifest_from_json_obj(json::parse(text));
  } catch (const json::exception& e) {
    throw config_error(std::string("bad manifest JSON: ") + e.what());
  }
}

RunManifest parse_config_text(const std::string& text, const std::string& origin) {
  FlatConfig cfg(text, origin);
  RunManifest m;
  m.experiment_id = cfg.get<std::string>("id", "run");
  // Data block: d, n and s are required; the rest defaults to the standard
  // laboratory instance derived from d.
  m.data.d = cfg.require<int>("d");
  m.data.n = cfg.require<int>("n");
  m.data.s = cfg.require<int>("s");
  m.data.L = cfg.get<int>("L", 2);
  m.data.sigma_p = cfg.get<double>("sigma_p", 2.0 / std::sqrt(static_cast<double>(m.data.s)));
  m.data.orthogonal = cfg.get<bool>("orthogonal", true);
  m.data.disjoint_supports = cfg.get<bool>("disjoint", true);
  m.data.seed = cfg.get<uint64_t>("seed", 1);
  m.model.d = m.data.d;
  m.model.L = m.data.L;
  m.model.m_k = cfg.get<int>("m_k", std::max(1, static_cast<int>(std::lround(0.05 * m.data.d))));
  m.model.m_v = cfg.get<int>("m_v", std::max(1, static_cast<int>(std::lround(0.01 * m.data.d))));
  m.model.sigma_0 = cfg.get<double>("sigma_0", 0.1 / std::sqrt(static_cast<double>(m.data.d)));
  m.model.init_seed = cfg.get<uint64_t>("init_seed", m.data.seed + 1000);
  m.optimizer.kind = optimizer_kind_from_string(cfg.get<std::string>("optimizer", "signgd"));
  m.optimizer.eta = cfg.get<double>("eta", 1e-4);
  const bool adam = m.optimizer.kind == OptimizerKind::adam;
  m.optimizer.beta1 = cfg.get<double>("beta1", adam ? 0.9 : 0.0);
  m.optimizer.beta2 = cfg.get<double>("beta2", adam ? 0.999 : 0.0);
  m.optimizer.epsilon = cfg.get<double>("epsilon", adam ? 1e-15 : 0.0);
  m.optimizer.bias_correction = cfg.get<bool>("bias_correction", true);
  m.iters = cfg.get<long>("iters", 2000);
  m.probe_cadence = cfg.get<std::string>("probe_cadence", "1:50,10");
  m.test_loss_every = cfg.get<int>("test_every", 100);
  m.n_test = cfg.get<int>("n_test", 500);
  m.zoom = cfg.get<int>("zoom", 0);
  m.zoom_iters = cfg.get<long>("zoom_iters", 2000);
  m.dataset_file = cfg.get<std::string>("dataset", "");
  cfg.reject_unknown();
  m.data.validate();
  m.model.validate();
  m.optimizer.validate();
  parse_cadence(m.probe_cadence);
  return m;
}

RunManifest parse_config_file(const std::string& path) {
  return parse_config_text(slurp(path), path);
}

void write_text_file(const std::string& path, const std::string& content) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw io_error("cannot open for writing: " + path);
  out << content;
  if (!out) throw io_error("write failed: " + path);
}

GenerateSummary run_generate(const RunManifest& manifest, const std::string& out_path) {
  const Dataset ds = generate_dataset(manifest.data);
  save_dataset(ds, out_path);
  GenerateSummary summary;
  summary.n = manifest.data.n;
  summary.s = manifest.data.s;
  summary.disjoint = supports_disjoint(ds);
  summary.path = out_path;
  return summary;
}

void save_trace(const RunManifest& manifest, const std::vector<ProbeSnapshot>& snapshots,
                const std::string& path) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw io_error("cannot open for writing: " + path);
  out << json{{"manifest", manifest_to_json_obj(manifest)}}.dump() << "\n";
  for (const ProbeSnapshot& s : snapshots) out << snapshot_to_json(s).dump() << "\n";
  out << json{{"end", true}, {"snapshots", snapshots.size()}}.dump() << "\n";
  if (!out) throw io_error("write failed: " + path);
}

std::pair<RunManifest, std::vector<ProbeSnapshot>> load_trace_file(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw io_error("cannot open: " + path);
  std::string line;
  if (!std::getline(in, line)) throw io_error("empty trace file: " + path);
  RunManifest manifest;
  try {
    manifest = manifest_from_json_obj(json::parse(line).at("manifest"));
  } catch (const json::exception& e) {
    throw io_error("trace header is not a manifest: " + std::string(e.what()));
  }
  std::vector<ProbeSnapshot> snapshots;
  bool terminated = false;
  size_t declared = 0;
  while (std::getline(in, line)) {
    if (trim(line).empty()) continue;
    json j;
    try {
      j = json::parse(line);
    } catch (const json::exception& e) {
      // A malformed final line is a truncated write, not a corrupt file.
      if (in.peek() == EOF)
        throw inconclusive_error("trace truncated mid-line in " + path);
      throw io_error("bad trace line: " + std::string(e.what()));
    }
    if (j.contains("end")) {
      terminated = true;
      declared = j.value("snapshots", snapshots.size());
      break;
    }
    snapshots.push_back(snapshot_from_json(j));
  }
  if (!terminated || declared != snapshots.size())
    throw inconclusive_error("trace truncated: end marker " +
                             std::string(terminated ? "count mismatch" : "missing") + " in " +
                             path);
  return {std::move(manifest), std::move(snapshots)};
}

namespace {

Dataset dataset_of(const RunManifest& manifest) {
  if (!manifest.dataset_file.empty()) return load_dataset(manifest.dataset_file);
  return generate_dataset(manifest.data);
}

std::string zoom_path_of(const std::string& trace_path) {
  fs::path p(trace_path);
  return (p.parent_path() / ("zoom_" + p.filename().string())).string();
}

}  // namespace

TrainResult run_train(const RunManifest& manifest, const std::string& out_dir) {
  const auto t_begin = std::chrono::steady_clock::now();
  manifest.data.validate();
  manifest.model.validate();
  manifest.optimizer.validate();
  std::error_code ec;
  fs::create_directories(out_dir, ec);
  if (!fs::exists(out_dir)) throw io_error("cannot create output directory: " + out_dir);

  const Dataset ds = dataset_of(manifest);
  const Params init = init_params(manifest.model);

  TrainResult result;
  result.paths.dir = out_dir;
  result.paths.trace = (fs::path(out_dir) / "trace.jsonl").string();
  result.paths.params = (fs::path(out_dir) / "params_final.bin").string();
  result.paths.manifest = (fs::path(out_dir) / "manifest.json").string();

  TrainOptions options;
  options.spec = manifest.optimizer;
  options.iters = manifest.iters;
  options.schedule = parse_cadence(manifest.probe_cadence);
  options.schedule.test_loss_every = manifest.test_loss_every;
  options.schedule.n_test = manifest.n_test;
  options.test_seed = manifest.data.seed;

  if (manifest.zoom > 0) {
    // Micro-step segment from the same initialization: eta/zoom for
    // zoom_iters micro-iterations, snapshot times rescaled to main units.
    TrainOptions zoom_opt = options;
    zoom_opt.spec.eta = manifest.optimizer.eta / manifest.zoom;
    zoom_opt.iters = manifest.zoom_iters;
    zoom_opt.schedule = parse_cadence("1");
    zoom_opt.schedule.test_loss_every = 0;
    zoom_opt.time_scale = 1.0 / manifest.zoom;
    const Trace zoom_trace = run_training(init, ds, zoom_opt);
    result.paths.zoom_trace = zoom_path_of(result.paths.trace);
    save_trace(manifest, zoom_trace.snapshots, result.paths.zoom_trace);
  }

  const Trace trace = run_training(init, ds, options);
  save_trace(manifest, trace.snapshots, result.paths.trace);
  save_params(trace.final_params, manifest.model, result.paths.params);

  result.final_train_loss = trace.snapshots.back().train_loss;
  result.final_test_loss = trace.snapshots.back().test_loss;
  result.final_test_zero_one = trace.snapshots.back().test_zero_one;
  const auto t_end = std::chrono::steady_clock::now();
  result.wall_seconds = std::chrono::duration<double>(t_end - t_begin).count();

  json meta = manifest_to_json_obj(manifest);
  meta["wall_seconds"] = result.wall_seconds;
  meta["gaussian_algorithm"] = kGaussianAlgorithm;
  meta["final_train_loss"] = result.final_train_loss;
  write_text_file(result.paths.manifest, meta.dump(2) + "\n");
  return result;
}

TraceAnalysis load_analysis(const std::string& trace_path) {
  auto [manifest, snapshots] = load_trace_file(trace_path);
  TraceAnalysis analysis;
  analysis.snapshots = std::move(snapshots);
  analysis.dataset = dataset_of(manifest);
  analysis.spec = manifest.optimizer;
  analysis.model = manifest.model;
  const std::string zp = zoom_path_of(trace_path);
  if (fs::exists(zp)) analysis.zoom = load_trace_file(zp).second;
  return analysis;
}

RunManifest manifest_of_trace(const std::string& trace_path) {
  return load_trace_file(trace_path).first;
}

namespace {

void append_verdict(std::ostream& os, const std::string& name, Verdict verdict,
                    const std::string& evidence) {
  os << "  " << name << ": " << to_string(verdict) << "\n    " << evidence << "\n";
}

json verdict_json(Verdict verdict, const std::string& evidence) {
  return json{{"verdict", to_string(verdict)}, {"evidence", evidence}};
}

}  // namespace

VerifyResult run_verify(const std::string& trace_path, double epsilon,
                        const TheoryConstants& constants) {
  VerifyResult result;
  const RunManifest manifest = manifest_of_trace(trace_path);
  TraceAnalysis analysis = load_analysis(trace_path);
  const Params init = init_params(manifest.model);
  const BetaStats beta = beta_stats(init, analysis.dataset);
  const PredictedTimes predicted =
      predicted_times(manifest.data, manifest.model, manifest.optimizer.eta, beta, constants);

  result.stages = verify_stage_predicates(analysis, predicted, constants);
  result.convergence = verify_convergence(analysis, epsilon, predicted);
  auto [params_final, model_cfg] = load_params(
      (fs::path(trace_path).parent_path() / "params_final.bin").string());
  (void)model_cfg;
  result.generalization =
      verify_generalization(params_final, manifest.data, manifest.n_test, manifest.data.seed);
  result.attention = verify_attention_sparsity(analysis, constants);
  result.audit = increment_audit(analysis.snapshots, analysis.dataset, manifest.optimizer.eta,
                                 manifest.optimizer.kind == OptimizerKind::signgd);

  std::ostringstream text;
  text << "verification report (" << manifest.experiment_id << ")\n";
  text << "predicted times: T1=" << predicted.t1 << " T2'=" << predicted.t2_prime
       << " T2_sgn=" << predicted.t2_sgn << " T2=" << predicted.t2 << " T3=" << predicted.t3
       << " T4-=[" << predicted.t4_minus_lo << "," << predicted.t4_minus_hi
       << "] T4=" << predicted.t4 << (predicted.monotone ? "" : " [non-monotone]") << "\n";
  for (const std::string& f : predicted.flags) text << "  note: " << f << "\n";
  const MeasuredTimes& m = result.stages.measured;
  text << "measured times: stage1_end=" << m.t_stage1_end << " qk_aligned=" << m.t_qk_aligned
       << " signal_departure=" << m.t_signal_departure << " s21_decayed=" << m.t_s21_decayed
       << " key_flip=" << m.t_key_flip << " query_flip=" << m.t_query_flip
       << " final_aligned=" << m.t_final_aligned << "\n";
  append_verdict(text, "stage I", result.stages.stage1.verdict, result.stages.stage1.evidence);
  append_verdict(text, "stage II", result.stages.stage2.verdict, result.stages.stage2.evidence);
  append_verdict(text, "stage III", result.stages.stage3.verdict, result.stages.stage3.evidence);
  append_verdict(text, "stage IV", result.stages.stage4.verdict, result.stages.stage4.evidence);
  append_verdict(text, "convergence", result.convergence.verdict, result.convergence.evidence);
  append_verdict(text, "generalization", result.generalization.verdict,
                 result.generalization.evidence);
  append_verdict(text, "attention sparsity", result.attention.verdict,
                 result.attention.evidence);
  if (result.audit.skipped)
    text << "  increment audit: skipped (" << result.audit.skip_reason << ")\n";
  else
    text << "  increment audit: " << result.audit.flags.size() << " flags over "
         << result.audit.increments_checked << " increments\n";
  result.text = text.str();

  json j;
  j["experiment_id"] = manifest.experiment_id;
  j["predicted"] = {{"t1", predicted.t1},
                    {"t2_prime", predicted.t2_prime},
                    {"t2_sgn", predicted.t2_sgn},
                    {"t2", predicted.t2},
                    {"t3", predicted.t3},
                    {"t4_minus_lo", predicted.t4_minus_lo},
                    {"t4_minus_hi", predicted.t4_minus_hi},
                    {"t4", predicted.t4},
                    {"monotone", predicted.monotone},
                    {"flags", predicted.flags},
                    {"beta_xi", predicted.beta_xi},
                    {"beta_mu", predicted.beta_mu},
                    {"constants",
                     {{"c3", predicted.constants_used.c3},
                      {"theta_c", predicted.constants_used.theta_c},
                      {"delta", predicted.constants_used.delta},
                      {"softmax_band", predicted.constants_used.softmax_band},
                      {"s21_decayed", predicted.constants_used.s21_decayed},
                      {"attn_sparse", predicted.constants_used.attn_sparse}}}};
  auto time_or_null = [](double t) { return std::isnan(t) ? json(nullptr) : json(t); };
  j["measured"] = {{"t_stage1_end", time_or_null(m.t_stage1_end)},
                   {"t_qk_aligned", time_or_null(m.t_qk_aligned)},
                   {"t_signal_departure", time_or_null(m.t_signal_departure)},
                   {"t_s21_decayed", time_or_null(m.t_s21_decayed)},
                   {"t_key_flip", time_or_null(m.t_key_flip)},
                   {"t_query_flip", time_or_null(m.t_query_flip)},
                   {"t_final_aligned", time_or_null(m.t_final_aligned)}};
  j["verdicts"] = {{"stage1", verdict_json(result.stages.stage1.verdict, result.stages.stage1.evidence)},
                   {"stage2", verdict_json(result.stages.stage2.verdict, result.stages.stage2.evidence)},
                   {"stage3", verdict_json(result.stages.stage3.verdict, result.stages.stage3.evidence)},
                   {"stage4", verdict_json(result.stages.stage4.verdict, result.stages.stage4.evidence)},
                   {"convergence", verdict_json(result.convergence.verdict, result.convergence.evidence)},
                   {"generalization",
                    verdict_json(result.generalization.verdict, result.generalization.evidence)},
                   {"attention_sparsity",
                    verdict_json(result.attention.verdict, result.attention.evidence)}};
  j["audit_flags"] = result.audit.flags.size();
  result.json = j.dump(2) + "\n";

  bool any_fail = false, any_inconclusive = false;
  auto tally = [&](Verdict v) {
    if (v == Verdict::fail) any_fail = true;
    if (v == Verdict::inconclusive) any_inconclusive = true;
  };
  tally(result.stages.stage1.verdict);
  tally(result.stages.stage2.verdict);
  tally(result.stages.stage3.verdict);
  tally(result.stages.stage4.verdict);
  tally(result.convergence.verdict);
  tally(result.generalization.verdict);
  tally(result.attention.verdict);
  result.exit_code = any_inconclusive ? 6 : (any_fail ? 1 : 0);
  return result;
}

// ------------------------------- sweeps --------------------------------------

SweepResult run_sweep(const std::string& sweep_path, const std::string& out_dir, int jobs) {
  json spec;
  try {
    spec = json::parse(slurp(sweep_path));
  } catch (const json::exception& e) {
    throw config_error("bad sweep file: " + std::string(e.what()));
  }
  const json base = spec.value("base", json::object());
  const json grid = spec.value("grid", json::object());
  std::vector<uint64_t> seeds;
  if (spec.contains("seeds")) seeds = spec.at("seeds").get<std::vector<uint64_t>>();

  // Cartesian product over grid axes (insertion order of the JSON object).
  std::vector<std::map<std::string, json>> combos{{}};
  for (const auto& [key, values] : grid.items()) {
    std::vector<std::map<std::string, json>> next;
    for (const auto& combo : combos) {
      for (const json& v : values) {
        auto c = combo;
        c[key] = v;
        next.push_back(std::move(c));
      }
    }
    combos = std::move(next);
  }
  if (seeds.empty()) seeds = {base.value("seed", 1ull)};

  struct Job {
    std::string id;
    std::string config_text;
    std::map<std::string, std::string> overrides;
  };
  std::vector<Job> jobs_list;
  for (const auto& combo : combos) {
    for (uint64_t seed : seeds) {
      std::map<std::string, json> fields;
      for (const auto& [k, v] : base.items()) fields[k] = v;
      for (const auto& [k, v] : combo) fields[k] = v;
      fields["seed"] = seed;
      std::ostringstream id;
      id << "run";
      for (const auto& [k, v] : combo) {
        std::string vs = v.is_string() ? v.get<std::string>() : v.dump();
        std::replace(vs.begin(), vs.end(), '.', 'p');
        id << "_" << k << "-" << vs;
      }
      id << "_seed-" << seed;
      std::ostringstream cfg;
      std::map<std::string, std::string> overrides;
      for (const auto& [k, v] : fields) {
        const std::string vs = v.is_string() ? v.get<std::string>() : v.dump();
        cfg << k << " = " << vs << "\n";
        overrides[k] = vs;
      }
      jobs_list.push_back({id.str(), cfg.str(), std::move(overrides)});
    }
  }

  SweepResult result;
  result.rows.resize(jobs_list.size());
  std::atomic<size_t> next{0};
  const int workers = std::max(1, jobs);
  auto worker = [&]() {
    for (;;) {
      const size_t k = next.fetch_add(1);
      if (k >= jobs_list.size()) return;
      const Job& job = jobs_list[k];
      SweepRunRow& row = result.rows[k];
      row.id = job.id;
      row.overrides = job.overrides;
      try {
        const RunManifest manifest = parse_config_text(job.config_text, job.id);
        const std::string dir = (fs::path(out_dir) / job.id).string();
        const TrainResult train = run_train(manifest, dir);
        row.train_loss = train.final_train_loss;
        row.test_loss = train.final_test_loss;
        row.test_zero_one = train.final_test_zero_one;
        const VerifyResult verify = run_verify(train.paths.trace);
        write_text_file((fs::path(dir) / "report.txt").string(), verify.text);
        write_text_file((fs::path(dir) / "report.json").string(), verify.json);
        row.measured = verify.stages.measured;
        row.stages_pass = verify.stages.all_pass();
        row.ok = true;
      } catch (const std::exception& e) {
        row.ok = false;
        row.error = e.what();
      }
    }
  };
  std::vector<std::thread> pool;
  for (int w = 0; w < workers; ++w) pool.emplace_back(worker);
  for (std::thread& t : pool) t.join();

  std::ostringstream csv;
  csv << "id,ok,error,train_loss,test_loss,test_zero_one,t_stage1_end,t_qk_aligned,"
         "t_signal_departure,t_s21_decayed,t_key_flip,t_query_flip,t_final_aligned,stages_pass\n";
  csv.precision(17);
  for (const SweepRunRow& row : result.rows) {
    if (!row.ok) result.any_error = true;
    std::string err = row.error;
    std::replace(err.begin(), err.end(), ',', ';');
    std::replace(err.begin(), err.end(), '\n', ' ');
    csv << row.id << "," << (row.ok ? 1 : 0) << "," << err << "," << row.train_loss << ","
        << row.test_loss << "," << row.test_zero_one << "," << row.measured.t_stage1_end << ","
        << row.measured.t_qk_aligned << "," << row.measured.t_signal_departure << ","
        << row.measured.t_s21_decayed << "," << row.measured.t_key_flip << ","
        << row.measured.t_query_flip << "," << row.measured.t_final_aligned << ","
        << (row.stages_pass ? 1 : 0) << "\n";
  }
  std::error_code ec;
  fs::create_directories(out_dir, ec);
  result.summary_csv_path = (fs::path(out_dir) / "summary.csv").string();
  write_text_file(result.summary_csv_path, csv.str());
  return result;
}

// ------------------------------- reports -------------------------------------

std::string render_sign_table(const SignTable& table, const std::string& format, double t_ref,
                              double t_later) {
  std::ostringstream os;
  const char* names[4] = {"K+,Q+", "K+,Q-", "K-,Q+", "K-,Q-"};
  if (format == "md") {
    os << "| init(t=" << t_ref << ") \\ t=" << t_later << " |";
    for (const char* n : names) os << " |S_" << n << "|(t) |";
    os << " Row sum |\n|---|---|---|---|---|---|\n";
    for (int r = 0; r < 4; ++r) {
      os << "| |S_" << names[r] << "|(0) |";
      for (int c = 0; c < 4; ++c) os << " " << table.counts[r][c] << " |";
      os << " " << table.row_sum(r) << " |\n";
    }
    os << "| Column sum |";
    for (int c = 0; c < 4; ++c) os << " " << table.col_sum(c) << " |";
    os << " " << table.grand_total() << " |\n";
  } else {
    os << "init_t=" << t_ref << "\\t=" << t_later;
    for (const char* n : names) os << "," << n;
    os << ",row_sum\n";
    for (int r = 0; r < 4; ++r) {
      os << names[r];
      for (int c = 0; c < 4; ++c) os << "," << table.counts[r][c];
      os << "," << table.row_sum(r) << "\n";
    }
    os << "column_sum";
    for (int c = 0; c < 4; ++c) os << "," << table.col_sum(c);
    os << "," << table.grand_total() << "\n";
  }
  if (table.zero_ref || table.zero_t)
    os << (format == "md" ? "\nzero-sign pairs: " : "zero_sign_pairs,") << table.zero_ref << ","
       << table.zero_t << "\n";
  return os.str();
}

std::string render_loss_csv(const std::vector<ProbeSnapshot>& snapshots) {
  std::ostringstream os;
  os << "t,train_loss,test_loss\n";
  char buf[64];
  for (const ProbeSnapshot& s : snapshots) {
    os << s.t << ",";
    snprintf(buf, sizeof buf, "%.17g", s.train_loss);
    os << buf << ",";
    if (s.has_test_loss()) {
      snprintf(buf, sizeof buf, "%.17g", s.test_loss);
      os << buf;
    }
    os << "\n";
  }
  return os.str();
}

std::string render_timeline(const PredictedTimes& predicted, const MeasuredTimes& measured,
                            const std::string& format) {
  struct Row {
    const char* stage;
    double pred;
    double meas;
  };
  const Row rows[] = {
      {"stage I end (T1)", predicted.t1, measured.t_stage1_end},
      {"stage II sign alignment (T2_sgn)", predicted.t2_sgn, measured.t_qk_aligned},
      {"stage II end (T2)", predicted.t2, measured.t_signal_departure},
      {"stage III end (T3)", predicted.t3, measured.t_signal_departure},
      {"stage IV decay (T4-)", predicted.t4_minus_hi, measured.t_s21_decayed},
      {"key noise flip", predicted.t4_minus_hi, measured.t_key_flip},
      {"query noise flip", 2.0 * predicted.t4_minus_hi, measured.t_query_flip},
      {"stage IV end (T4)", predicted.t4, measured.t_final_aligned},
  };
  std::ostringstream os;
  if (format == "md") {
    os << "| stage boundary | predicted | measured |\n|---|---|---|\n";
    for (const Row& r : rows) os << "| " << r.stage << " | " << r.pred << " | " << r.meas << " |\n";
  } else {
    os << "stage_boundary,predicted,measured\n";
    for (const Row& r : rows) os << r.stage << "," << r.pred << "," << r.meas << "\n";
  }
  return os.str();
}

std::string render_snapshot_csv(const std::vector<ProbeSnapshot>& snapshots) {
  std::ostringstream os;
  os << "t,quantity,neuron,sample,value\n";
  char buf[64];
  auto emit = [&](double t, const char* q, int neuron, int sample, double value) {
    snprintf(buf, sizeof buf, "%.17g", value);
    os << t << "," << q << "," << neuron << "," << sample << "," << buf << "\n";
  };
  for (const ProbeSnapshot& s : snapshots) {
    for (int q = 0; q < s.m_k(); ++q) {
      emit(s.t, "q_mu", q, -1, s.q_mu[q]);
      emit(s.t, "k_mu", q, -1, s.k_mu[q]);
      for (int i = 0; i < s.n(); ++i) {
        emit(s.t, "q_xi", q, i, s.q_xi(q, i));
        emit(s.t, "k_xi", q, i, s.k_xi(q, i));
      }
    }
    emit(s.t, "v_mu", -1, -1, s.v_mu);
    for (int i = 0; i < s.n(); ++i) {
      emit(s.t, "v_xi", -1, i, s.v_xi[i]);
      emit(s.t, "s11", -1, i, s.s11[i]);
      emit(s.t, "s21", -1, i, s.s21[i]);
      emit(s.t, "loss_deriv", -1, i, s.loss_deriv[i]);
    }
    emit(s.t, "train_loss", -1, -1, s.train_loss);
    if (s.has_test_loss()) emit(s.t, "test_loss", -1, -1, s.test_loss);
  }
  return os.str();
}

}  // namespace signdyn
