#include "signdyn/gradients.hpp"

#include <algorithm>
#include <cmath>

namespace signdyn {

namespace {

void add_scaled_patch(Matrix& m, int row, double scale, const Patch& patch) {
  double* w = m.row_ptr(row);
  for (size_t k = 0; k < patch.idx.size(); ++k) w[patch.idx[k]] += scale * patch.val[k];
}

Grads zero_grads(const Params& params, bool joint_head) {
  Grads g;
  g.g_q = Matrix(params.w_q.rows(), params.w_q.cols());
  g.g_k = Matrix(params.w_k.rows(), params.w_k.cols());
  g.g_v_pos = Matrix(params.w_v_pos.rows(), params.w_v_pos.cols());
  g.g_v_neg = Matrix(params.w_v_neg.rows(), params.w_v_neg.cols());
  if (joint_head) {
    g.g_head_pos.assign(params.w_v_pos.rows(), 0.0);
    g.g_head_neg.assign(params.w_v_neg.rows(), 0.0);
  }
  return g;
}

// dL/df for sample i: (1/n) * y * l'(margin) = -(1/n) * y * loss_deriv.
double loss_scale(const Dataset& dataset, const ForwardCache& cache, const Sample& sample) {
  return -(1.0 / static_cast<double>(dataset.samples.size())) * sample.y * cache.loss_deriv;
}

void accumulate_value(const Params& params, const Head& head, const Dataset& dataset,
                      const std::vector<ForwardCache>& caches, Grads& g) {
  const int m_v = params.w_v_pos.rows();
  const int d = params.w_v_pos.cols();
  const int L = dataset.config.L;
  // The per-row gradient is head.pos[r] (resp. -head.neg[r]) times one shared
  // direction: sum_i base_i sum_a (sum_l s_{l,a}) x_a.
  std::vector<double> shared(d, 0.0);
  for (size_t i = 0; i < dataset.samples.size(); ++i) {
    const Sample& sample = dataset.samples[i];
    const ForwardCache& cache = caches[i];
    const double base = loss_scale(dataset, cache, sample);
    for (int a = 0; a < L; ++a) {
      double col_weight = 0.0;
      for (int l = 0; l < L; ++l) col_weight += cache.sm(l, a);
      const Patch& patch = sample.patches[a];
      const double scale = base * col_weight;
      for (size_t k = 0; k < patch.idx.size(); ++k) shared[patch.idx[k]] += scale * patch.val[k];
    }
  }
  for (int r = 0; r < m_v; ++r) {
    double* pos = g.g_v_pos.row_ptr(r);
    double* neg = g.g_v_neg.row_ptr(r);
    const double wp = head.pos[r];
    const double wn = -head.neg[r];
    for (int c = 0; c < d; ++c) {
      pos[c] += wp * shared[c];
      neg[c] += wn * shared[c];
    }
  }
}

void accumulate_query_key(const Params& params, const Head& head, const Dataset& dataset,
                          const std::vector<ForwardCache>& caches, Grads& g) {
  const int m_k = params.w_q.rows();
  const int L = dataset.config.L;
  (void)head;  // readout already baked into cache.readout
  for (size_t i = 0; i < dataset.samples.size(); ++i) {
    const Sample& sample = dataset.samples[i];
    const ForwardCache& cache = caches[i];
    const double base = loss_scale(dataset, cache, sample);
    // D(l,a) = df/dz_{l,a} = s_{l,a} (u_a - sum_b s_{l,b} u_b)
    Matrix D(L, L);
    for (int l = 0; l < L; ++l) {
      double row_mean = 0.0;
      for (int b = 0; b < L; ++b) row_mean += cache.sm(l, b) * cache.readout[b];
      for (int a = 0; a < L; ++a) D(l, a) = cache.sm(l, a) * (cache.readout[a] - row_mean);
    }
    for (int s = 0; s < m_k; ++s) {
      for (int l = 0; l < L; ++l) {
        double coef_q = 0.0;
        for (int a = 0; a < L; ++a) coef_q += D(l, a) * cache.kp(a, s);
        if (coef_q != 0.0) add_scaled_patch(g.g_q, s, base * coef_q, sample.patches[l]);
      }
      for (int a = 0; a < L; ++a) {
        double coef_k = 0.0;
        for (int l = 0; l < L; ++l) coef_k += D(l, a) * cache.qp(l, s);
        if (coef_k != 0.0) add_scaled_patch(g.g_k, s, base * coef_k, sample.patches[a]);
      }
    }
  }
}

}  // namespace

bool Grads::all_finite() const { return first_non_finite().empty(); }

std::string Grads::first_non_finite() const {
  if (!g_q.all_finite()) return "g_q";
  if (!g_k.all_finite()) return "g_k";
  if (!g_v_pos.all_finite()) return "g_v_pos";
  if (!g_v_neg.all_finite()) return "g_v_neg";
  for (double x : g_head_pos)
    if (!std::isfinite(x)) return "g_head_pos";
  for (double x : g_head_neg)
    if (!std::isfinite(x)) return "g_head_neg";
  return {};
}

std::vector<ForwardCache> forward_all(const Params& params, const Head& head,
                                      const Dataset& dataset) {
  const std::vector<double> v = effective_readout(params, head);
  std::vector<ForwardCache> caches;
  caches.reserve(dataset.samples.size());
  for (const Sample& sample : dataset.samples)
    caches.push_back(forward_with_readout(params, v, sample));
  return caches;
}

Grads grad_value(const Params& params, const Head& head, const Dataset& dataset,
                 const std::vector<ForwardCache>& caches) {
  if (caches.size() != dataset.samples.size())
    throw config_error("grad_value: cache count does not match dataset");
  Grads g = zero_grads(params, false);
  accumulate_value(params, head, dataset, caches, g);
  return g;
}

Grads grad_query_key(const Params& params, const Head& head, const Dataset& dataset,
                     const std::vector<ForwardCache>& caches) {
  if (caches.size() != dataset.samples.size())
    throw config_error("grad_query_key: cache count does not match dataset");
  Grads g = zero_grads(params, false);
  accumulate_query_key(params, head, dataset, caches, g);
  return g;
}

Grads grad_query_key_two_patch(const Params& params, const Head& head, const Dataset& dataset,
                               const std::vector<ForwardCache>& caches) {
  if (dataset.config.L != 2) throw config_error("two-patch closed form requires L = 2");
  const int m_k = params.w_q.rows();
  Grads g = zero_grads(params, false);
  const std::vector<double> v = effective_readout(params, head);
  for (size_t i = 0; i < dataset.samples.size(); ++i) {
    const Sample& sample = dataset.samples[i];
    const ForwardCache& cache = caches[i];
    const double base = loss_scale(dataset, cache, sample);
    const Patch& x1 = sample.patches[0];
    const Patch& x2 = sample.patches[1];
    const double u_diff = x1.dot_dense(v) - x2.dot_dense(v);
    const double s11s12 = cache.sm(0, 0) * cache.sm(0, 1);
    const double s21s22 = cache.sm(1, 0) * cache.sm(1, 1);
    for (int s = 0; s < m_k; ++s) {
      const double k_diff = x1.dot_row(params.w_k, s) - x2.dot_row(params.w_k, s);
      const double cq = base * u_diff * k_diff;
      add_scaled_patch(g.g_q, s, cq * s11s12, x1);
      add_scaled_patch(g.g_q, s, cq * s21s22, x2);
      const double q_mix = s11s12 * x1.dot_row(params.w_q, s) + s21s22 * x2.dot_row(params.w_q, s);
      const double ck = base * u_diff * q_mix;
      add_scaled_patch(g.g_k, s, ck, x1);
      add_scaled_patch(g.g_k, s, -ck, x2);
    }
  }
  return g;
}

void grad_head(const Params& params, const Head& head, const Dataset& dataset,
               const std::vector<ForwardCache>& caches, bool joint_enabled, Grads& out) {
  if (!joint_enabled) throw mode_error("grad_head: joint head training is disabled");
  (void)head;
  const int m_v = params.w_v_pos.rows();
  const int L = dataset.config.L;
  out.g_head_pos.assign(m_v, 0.0);
  out.g_head_neg.assign(m_v, 0.0);
  for (size_t i = 0; i < dataset.samples.size(); ++i) {
    const Sample& sample = dataset.samples[i];
    const ForwardCache& cache = caches[i];
    const double base = loss_scale(dataset, cache, sample);
    std::vector<double> col_weight(L, 0.0);
    for (int l = 0; l < L; ++l)
      for (int a = 0; a < L; ++a) col_weight[a] += cache.sm(l, a);
    for (int r = 0; r < m_v; ++r) {
      double a_pos = 0.0, a_neg = 0.0;
      for (int a = 0; a < L; ++a) {
        a_pos += col_weight[a] * sample.patches[a].dot_row(params.w_v_pos, r);
        a_neg += col_weight[a] * sample.patches[a].dot_row(params.w_v_neg, r);
      }
      out.g_head_pos[r] += base * a_pos;
      out.g_head_neg[r] += -base * a_neg;
    }
  }
}

Grads compute_grads(const Params& params, const Head& head, const Dataset& dataset,
                    const std::vector<ForwardCache>& caches, bool joint_head) {
  Grads g = zero_grads(params, joint_head);
  accumulate_value(params, head, dataset, caches, g);
  accumulate_query_key(params, head, dataset, caches, g);
  if (joint_head) grad_head(params, head, dataset, caches, true, g);
  return g;
}

double empirical_loss(const Params& params, const Head& head, const Dataset& dataset) {
  const std::vector<double> v = effective_readout(params, head);
  double acc = 0.0;
  for (const Sample& sample : dataset.samples)
    acc += forward_with_readout(params, v, sample).loss;
  return acc / static_cast<double>(dataset.samples.size());
}

namespace {

double fd_entry(double& slot, const Params& params, const Head& head, const Dataset& dataset,
                double h) {
  const double saved = slot;
  const double step = h * std::max(1.0, std::abs(saved));
  slot = saved + step;
  const double up = empirical_loss(params, head, dataset);
  slot = saved - step;
  const double down = empirical_loss(params, head, dataset);
  slot = saved;
  return (up - down) / (2.0 * step);
}

void fd_matrix(Matrix& target, Matrix& out, Params& params, const Head& head,
               const Dataset& dataset, double h) {
  for (size_t e = 0; e < target.size(); ++e)
    out.data()[e] = fd_entry(target.data()[e], params, head, dataset, h);
}

}  // namespace

Grads finite_difference_oracle(const Params& params, const Head& head, const Dataset& dataset,
                               double h, bool joint_head) {
  if (!(h > 0.0)) throw config_error("finite_difference_oracle: h must be > 0");
  Params work = params;
  Head head_work = head;
  Grads g = zero_grads(params, joint_head);
  fd_matrix(work.w_q, g.g_q, work, head_work, dataset, h);
  fd_matrix(work.w_k, g.g_k, work, head_work, dataset, h);
  fd_matrix(work.w_v_pos, g.g_v_pos, work, head_work, dataset, h);
  fd_matrix(work.w_v_neg, g.g_v_neg, work, head_work, dataset, h);
  if (joint_head) {
    for (size_t r = 0; r < head_work.pos.size(); ++r)
      g.g_head_pos[r] = fd_entry(head_work.pos[r], work, head_work, dataset, h);
    for (size_t r = 0; r < head_work.neg.size(); ++r)
      g.g_head_neg[r] = fd_entry(head_work.neg[r], work, head_work, dataset, h);
  }
  return g;
}

namespace {

void compare_span(const char* name, const double* a, const double* f, size_t count, double floor,
                  GradCheckReport& report) {
  for (size_t e = 0; e < count; ++e) {
    const double denom = std::max({std::abs(a[e]), std::abs(f[e]), floor});
    const double rel = denom > 0.0 ? std::abs(a[e] - f[e]) / denom : 0.0;
    if (rel > report.max_rel_error) {
      report.max_rel_error = rel;
      report.worst_tensor = name;
      report.worst_index = static_cast<int>(e);
      report.worst_analytic = a[e];
      report.worst_numeric = f[e];
    }
  }
}

double span_scale(const double* a, const double* f, size_t count) {
  double m = 0.0;
  for (size_t e = 0; e < count; ++e) m = std::max({m, std::abs(a[e]), std::abs(f[e])});
  return m;
}

}  // namespace

GradCheckReport compare_grads(const Grads& analytic, const Grads& numeric) {
  GradCheckReport report;
  double scale = 0.0;
  scale = std::max(scale, span_scale(analytic.g_q.data().data(), numeric.g_q.data().data(),
                                     analytic.g_q.size()));
  scale = std::max(scale, span_scale(analytic.g_k.data().data(), numeric.g_k.data().data(),
                                     analytic.g_k.size()));
  scale = std::max(scale, span_scale(analytic.g_v_pos.data().data(),
                                     numeric.g_v_pos.data().data(), analytic.g_v_pos.size()));
  scale = std::max(scale, span_scale(analytic.g_v_neg.data().data(),
                                     numeric.g_v_neg.data().data(), analytic.g_v_neg.size()));
  // Entries far below the tensor scale are compared in absolute terms through
  // this floor; FD roundoff there would otherwise dominate the ratio.
  const double floor = std::max(1e-3 * scale, 1e-12);
  compare_span("g_q", analytic.g_q.data().data(), numeric.g_q.data().data(), analytic.g_q.size(),
               floor, report);
  compare_span("g_k", analytic.g_k.data().data(), numeric.g_k.data().data(), analytic.g_k.size(),
               floor, report);
  compare_span("g_v_pos", analytic.g_v_pos.data().data(), numeric.g_v_pos.data().data(),
               analytic.g_v_pos.size(), floor, report);
  compare_span("g_v_neg", analytic.g_v_neg.data().data(), numeric.g_v_neg.data().data(),
               analytic.g_v_neg.size(), floor, report);
  if (!analytic.g_head_pos.empty() && !numeric.g_head_pos.empty()) {
    compare_span("g_head_pos", analytic.g_head_pos.data(), numeric.g_head_pos.data(),
                 analytic.g_head_pos.size(), floor, report);
    compare_span("g_head_neg", analytic.g_head_neg.data(), numeric.g_head_neg.data(),
                 analytic.g_head_neg.size(), floor, report);
  }
  return report;
}

}  // namespace signdyn
