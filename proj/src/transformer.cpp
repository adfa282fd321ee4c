#include "signdyn/transformer.hpp"

#include <algorithm>
#include <fstream>

#include "json.hpp"

namespace signdyn {

using nlohmann::json;

namespace {

enum InitStream : uint64_t { kWq = 11, kWk = 12, kWvPos = 13, kWvNeg = 14 };
// Test samples live on a stream id far from the training purposes in datagen.
constexpr uint64_t kTestStream = 101;

Matrix gaussian_matrix(int rows, int cols, double std, uint64_t seed) {
  Matrix m(rows, cols);
  Rng rng(seed);
  for (double& x : m.data()) x = std * rng.next_gaussian();
  return m;
}

}  // namespace

void ModelConfig::validate() const {
  if (d < 1) throw config_error("model config: d must be >= 1");
  if (m_k < 1 || m_v < 1) throw config_error("model config: m_k and m_v must be >= 1");
  if (L < 2) throw config_error("model config: L must be >= 2");
  if (sigma_0 < 0.0) throw config_error("model config: sigma_0 must be >= 0");
}

std::vector<double> mean_value(const Params& params) {
  const int d = params.w_v_pos.cols();
  const int m_v = params.w_v_pos.rows();
  std::vector<double> v(d, 0.0);
  for (int r = 0; r < m_v; ++r) {
    const double* pos = params.w_v_pos.row_ptr(r);
    const double* neg = params.w_v_neg.row_ptr(r);
    for (int c = 0; c < d; ++c) v[c] += pos[c] - neg[c];
  }
  for (double& x : v) x /= m_v;
  return v;
}

std::vector<double> effective_readout(const Params& params, const Head& head) {
  const int d = params.w_v_pos.cols();
  const int m_v = params.w_v_pos.rows();
  std::vector<double> v(d, 0.0);
  for (int r = 0; r < m_v; ++r) {
    const double* pos = params.w_v_pos.row_ptr(r);
    const double* neg = params.w_v_neg.row_ptr(r);
    for (int c = 0; c < d; ++c) v[c] += head.pos[r] * pos[c] - head.neg[r] * neg[c];
  }
  return v;
}

Params init_params(const ModelConfig& config) {
  config.validate();
  Params p;
  p.w_q = gaussian_matrix(config.m_k, config.d, config.sigma_0, derive_seed(config.init_seed, kWq));
  p.w_k = gaussian_matrix(config.m_k, config.d, config.sigma_0, derive_seed(config.init_seed, kWk));
  p.w_v_pos =
      gaussian_matrix(config.m_v, config.d, config.sigma_0, derive_seed(config.init_seed, kWvPos));
  p.w_v_neg =
      gaussian_matrix(config.m_v, config.d, config.sigma_0, derive_seed(config.init_seed, kWvNeg));
  return p;
}

Matrix attention_logits(const Params& params, const Sample& sample) {
  const int L = static_cast<int>(sample.patches.size());
  const int m_k = params.w_q.rows();
  for (const Patch& patch : sample.patches)
    for (int idx : patch.idx)
      if (idx >= params.w_q.cols()) throw config_error("attention_logits: patch coordinate out of range");
  // Project every patch through W_Q and W_K once, then take pairwise dots.
  Matrix qp(L, m_k), kp(L, m_k);
  for (int p = 0; p < L; ++p) {
    for (int s = 0; s < m_k; ++s) {
      qp(p, s) = sample.patches[p].dot_row(params.w_q, s);
      kp(p, s) = sample.patches[p].dot_row(params.w_k, s);
    }
  }
  Matrix z(L, L);
  for (int l = 0; l < L; ++l) {
    for (int a = 0; a < L; ++a) {
      double acc = 0.0;
      for (int s = 0; s < m_k; ++s) acc += qp(l, s) * kp(a, s);
      z(l, a) = acc;
    }
  }
  return z;
}

Matrix softmax_outputs(const Matrix& z) {
  Matrix sm(z.rows(), z.cols());
  for (int l = 0; l < z.rows(); ++l) {
    double row_max = z(l, 0);
    for (int a = 1; a < z.cols(); ++a) row_max = std::max(row_max, z(l, a));
    double denom = 0.0;
    for (int a = 0; a < z.cols(); ++a) {
      sm(l, a) = std::exp(z(l, a) - row_max);
      denom += sm(l, a);
    }
    for (int a = 0; a < z.cols(); ++a) sm(l, a) /= denom;
  }
  return sm;
}

ForwardCache forward_with_readout(const Params& params, const std::vector<double>& v_eff,
                                  const Sample& sample) {
  ForwardCache cache;
  const int L = static_cast<int>(sample.patches.size());
  const int m_k = params.w_q.rows();
  cache.qp = Matrix(L, m_k);
  cache.kp = Matrix(L, m_k);
  for (int p = 0; p < L; ++p) {
    for (int s = 0; s < m_k; ++s) {
      cache.qp(p, s) = sample.patches[p].dot_row(params.w_q, s);
      cache.kp(p, s) = sample.patches[p].dot_row(params.w_k, s);
    }
  }
  cache.z = Matrix(L, L);
  for (int l = 0; l < L; ++l) {
    for (int a = 0; a < L; ++a) {
      double acc = 0.0;
      for (int s = 0; s < m_k; ++s) acc += cache.qp(l, s) * cache.kp(a, s);
      cache.z(l, a) = acc;
    }
  }
  cache.sm = softmax_outputs(cache.z);
  cache.readout.resize(L);
  for (int a = 0; a < L; ++a) cache.readout[a] = sample.patches[a].dot_dense(v_eff);
  double f = 0.0;
  for (int l = 0; l < L; ++l)
    for (int a = 0; a < L; ++a) f += cache.sm(l, a) * cache.readout[a];
  cache.f = f;
  cache.margin = sample.y * f;
  cache.loss = logistic_loss(cache.margin);
  cache.loss_deriv = logistic_loss_deriv(cache.margin);
  return cache;
}

ForwardCache forward(const Params& params, const Head& head, const Sample& sample) {
  return forward_with_readout(params, effective_readout(params, head), sample);
}

ForwardCache forward(const Params& params, const Sample& sample) {
  return forward(params, Head::fixed(params.w_v_pos.rows()), sample);
}

double empirical_loss(const Params& params, const Dataset& dataset) {
  const std::vector<double> v = mean_value(params);
  double acc = 0.0;
  for (const Sample& sample : dataset.samples)
    acc += forward_with_readout(params, v, sample).loss;
  return acc / static_cast<double>(dataset.samples.size());
}

Sample test_sample(const DataConfig& config, uint64_t seed, int i) {
  DataConfig fresh = config;
  fresh.seed = derive_seed(seed, kTestStream);
  // Fresh evaluation noise is always drawn independently; the disjoint
  // training layout is a property of the training set only.
  fresh.disjoint_supports = false;
  if (fresh.n <= i) fresh.n = i + 1;
  return generate_sample_at(fresh, i);
}

TestLoss test_loss(const Params& params, const DataConfig& config, int n_test, uint64_t seed) {
  if (n_test < 1) throw config_error("test_loss: n_test must be >= 1");
  TestLoss out;
  out.n_test = n_test;
  for (int i = 0; i < n_test; ++i) {
    const Sample sample = test_sample(config, seed, i);
    const ForwardCache cache = forward(params, sample);
    out.logistic += cache.loss;
    if (cache.margin <= 0.0) out.zero_one += 1.0;
  }
  out.logistic /= n_test;
  out.zero_one /= n_test;
  return out;
}

namespace {

void write_matrix(std::ofstream& out, const Matrix& m) {
  out.write(reinterpret_cast<const char*>(m.data().data()),
            static_cast<std::streamsize>(m.size() * sizeof(double)));
}

Matrix read_matrix(std::ifstream& in, int rows, int cols) {
  Matrix m(rows, cols);
  in.read(reinterpret_cast<char*>(m.data().data()),
          static_cast<std::streamsize>(m.size() * sizeof(double)));
  if (!in) throw io_error("checkpoint truncated while reading matrix");
  return m;
}

}  // namespace

void save_params(const Params& params, const ModelConfig& config, const std::string& path) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw io_error("cannot open for writing: " + path);
  const json header{{"magic", "signdyn-params"},
                    {"version", 1},
                    {"d", config.d},
                    {"m_k", config.m_k},
                    {"m_v", config.m_v},
                    {"L", config.L},
                    {"sigma_0", config.sigma_0},
                    {"init_seed", config.init_seed}};
  const std::string h = header.dump();
  const uint64_t len = h.size();
  out.write(reinterpret_cast<const char*>(&len), sizeof(len));
  out.write(h.data(), static_cast<std::streamsize>(h.size()));
  write_matrix(out, params.w_q);
  write_matrix(out, params.w_k);
  write_matrix(out, params.w_v_pos);
  write_matrix(out, params.w_v_neg);
  if (!out) throw io_error("write failed: " + path);
}

std::pair<Params, ModelConfig> load_params(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw io_error("cannot open for reading: " + path);
  uint64_t len = 0;
  in.read(reinterpret_cast<char*>(&len), sizeof(len));
  if (!in || len > (1ull << 20)) throw io_error("corrupt checkpoint header: " + path);
  std::string h(len, '\0');
  in.read(h.data(), static_cast<std::streamsize>(len));
  const json header = json::parse(h);
  if (header.value("magic", "") != std::string("signdyn-params"))
    throw io_error("not a params checkpoint: " + path);
  ModelConfig config;
  config.d = header.at("d").get<int>();
  config.m_k = header.at("m_k").get<int>();
  config.m_v = header.at("m_v").get<int>();
  config.L = header.at("L").get<int>();
  config.sigma_0 = header.at("sigma_0").get<double>();
  config.init_seed = header.at("init_seed").get<uint64_t>();
  Params params;
  params.w_q = read_matrix(in, config.m_k, config.d);
  params.w_k = read_matrix(in, config.m_k, config.d);
  params.w_v_pos = read_matrix(in, config.m_v, config.d);
  params.w_v_neg = read_matrix(in, config.m_v, config.d);
  return {std::move(params), config};
}

}  // namespace signdyn
