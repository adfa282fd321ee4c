#include "signdyn/probes.hpp"

#include <algorithm>
#include <cmath>

namespace signdyn {

const char* const kSignClassNames[4] = {"K+Q+", "K+Q-", "K-Q+", "K-Q-"};

namespace {

// Class index from (key sign, query sign); -1 when either sign is zero.
int sign_class(double k, double q) {
  if (k == 0.0 || q == 0.0) return -1;
  return (k > 0 ? 0 : 2) + (q > 0 ? 0 : 1);
}

// The noise patch a probe tracks for sample i: for L = 2 the single noise
// patch; for L > 2 the noise patch the signal row attends to the most.
int reference_noise_patch(const Sample& sample, const ForwardCache& cache) {
  const std::vector<int> noise = sample.noise_positions();
  if (noise.size() == 1) return noise.front();
  const int sig = sample.signal_positions.front();
  int best = noise.front();
  double best_w = -1.0;
  for (int p : noise) {
    if (cache.sm(sig, p) > best_w) {
      best_w = cache.sm(sig, p);
      best = p;
    }
  }
  return best;
}

}  // namespace

ProbeSnapshot snapshot(const Params& params, const Dataset& dataset, double t,
                       const std::vector<ForwardCache>& caches) {
  if (caches.size() != dataset.samples.size())
    throw config_error("snapshot: cache count does not match dataset");
  const int m_k = params.w_q.rows();
  const int n = static_cast<int>(dataset.samples.size());
  ProbeSnapshot snap;
  snap.t = t;
  snap.q_mu.resize(m_k);
  snap.k_mu.resize(m_k);
  snap.q_xi = Matrix(m_k, n);
  snap.k_xi = Matrix(m_k, n);
  snap.v_xi.resize(n);
  snap.s11.resize(n);
  snap.s21.resize(n);
  snap.loss_deriv.resize(n);
  snap.a_idx.resize(n);

  // mu = e1: signal inner products are plain first-column reads.
  for (int s = 0; s < m_k; ++s) {
    snap.q_mu[s] = params.w_q(s, 0);
    snap.k_mu[s] = params.w_k(s, 0);
  }
  const std::vector<double> v = mean_value(params);
  snap.v_mu = v[0];

  double loss_acc = 0.0;
  for (int i = 0; i < n; ++i) {
    const Sample& sample = dataset.samples[i];
    const ForwardCache& cache = caches[i];
    const int sig = sample.signal_positions.front();
    const int noi = reference_noise_patch(sample, cache);
    const Patch& xi = sample.patches[noi];
    const double y = sample.y;

    // cache.qp/kp hold <w, x^(p)> for every patch, so the noise inner
    // products are direct reads.
    if (cache.qp.rows() == static_cast<int>(sample.patches.size()) && cache.qp.cols() == m_k) {
      for (int s = 0; s < m_k; ++s) {
        snap.q_xi(s, i) = y * cache.qp(noi, s);
        snap.k_xi(s, i) = y * cache.kp(noi, s);
      }
    } else {
      for (int s = 0; s < m_k; ++s) {
        snap.q_xi(s, i) = y * xi.dot_row(params.w_q, s);
        snap.k_xi(s, i) = y * xi.dot_row(params.w_k, s);
      }
    }
    snap.v_xi[i] = y * xi.dot_dense(v);
    snap.s11[i] = cache.sm(sig, sig);
    // Noise-signal output; for L > 2 the maximum over noise rows.
    double s21 = 0.0;
    for (int p : sample.noise_positions()) s21 = std::max(s21, cache.sm(p, sig));
    snap.s21[i] = s21;
    int a = 0;
    double best = -1.0;
    for (int c = 0; c < static_cast<int>(sample.patches.size()); ++c) {
      if (cache.sm(sig, c) > best) {
        best = cache.sm(sig, c);
        a = c;
      }
    }
    snap.a_idx[i] = a;
    snap.loss_deriv[i] = cache.loss_deriv;
    loss_acc += cache.loss;
  }
  snap.train_loss = loss_acc / n;
  return snap;
}

long SignTable::row_sum(int r) const {
  long acc = 0;
  for (int c = 0; c < 4; ++c) acc += counts[r][c];
  return acc;
}

long SignTable::col_sum(int c) const {
  long acc = 0;
  for (int r = 0; r < 4; ++r) acc += counts[r][c];
  return acc;
}

long SignTable::grand_total() const {
  long acc = zero_ref + zero_t;
  for (int r = 0; r < 4; ++r) acc += row_sum(r);
  return acc;
}

SignTable sign_table(const ProbeSnapshot& snap_ref, const ProbeSnapshot& snap_t) {
  if (snap_ref.m_k() != snap_t.m_k() || snap_ref.n() != snap_t.n())
    throw config_error("sign_table: snapshot dimensions differ");
  SignTable table;
  table.total = static_cast<long>(snap_ref.m_k()) * snap_ref.n();
  for (int s = 0; s < snap_ref.m_k(); ++s) {
    for (int i = 0; i < snap_ref.n(); ++i) {
      const int cr = sign_class(snap_ref.k_xi(s, i), snap_ref.q_xi(s, i));
      const int ct = sign_class(snap_t.k_xi(s, i), snap_t.q_xi(s, i));
      if (cr < 0) {
        ++table.zero_ref;
      } else if (ct < 0) {
        ++table.zero_t;
      } else {
        ++table.counts[cr][ct];
      }
    }
  }
  return table;
}

BetaStats beta_stats(const Params& init_params, const Dataset& dataset) {
  BetaStats beta;
  auto consider_mu = [&](const Matrix& m) {
    for (int r = 0; r < m.rows(); ++r) beta.beta_mu = std::max(beta.beta_mu, std::abs(m(r, 0)));
  };
  consider_mu(init_params.w_q);
  consider_mu(init_params.w_k);
  consider_mu(init_params.w_v_pos);
  consider_mu(init_params.w_v_neg);
  auto consider_xi = [&](const Matrix& m, const Patch& xi) {
    for (int r = 0; r < m.rows(); ++r)
      beta.beta_xi = std::max(beta.beta_xi, std::abs(xi.dot_row(m, r)));
  };
  for (const Sample& sample : dataset.samples) {
    for (int p : sample.noise_positions()) {
      const Patch& xi = sample.patches[p];
      consider_xi(init_params.w_q, xi);
      consider_xi(init_params.w_k, xi);
      consider_xi(init_params.w_v_pos, xi);
      consider_xi(init_params.w_v_neg, xi);
    }
  }
  return beta;
}

AlignmentFraction alignment_fraction(const ProbeSnapshot& snap) {
  AlignmentFraction out;
  const int m_k = snap.m_k();
  const int n = snap.n();
  long qk = 0, fin = 0;
  for (int s = 0; s < m_k; ++s) {
    const double q_mu_sign = sgn(snap.q_mu[s]);
    const double k_mu_sign = sgn(snap.k_mu[s]);
    for (int i = 0; i < n; ++i) {
      const double qs = sgn(snap.q_xi(s, i));
      const double ks = sgn(snap.k_xi(s, i));
      if (qs != 0.0 && qs == ks) {
        ++qk;
        if (qs == q_mu_sign && k_mu_sign == -q_mu_sign && q_mu_sign != 0.0) ++fin;
      }
    }
  }
  const double total = static_cast<double>(m_k) * n;
  out.qk_noise = qk / total;
  out.final_frac = fin / total;
  return out;
}

namespace {

bool increment_ok(double observed, double full, double rel_tol) {
  const double mag = std::abs(observed);
  if (mag <= rel_tol * full) return true;  // a frozen (sgn 0) step
  return std::abs(mag - full) <= rel_tol * full;
}

}  // namespace

AuditReport increment_audit(const std::vector<ProbeSnapshot>& snapshots, const Dataset& dataset,
                            double eta, bool is_signgd, double rel_tol) {
  AuditReport report;
  if (!is_signgd) {
    report.skipped = true;
    report.skip_reason = "increment audit applies to SignGD traces only";
    return report;
  }
  std::vector<double> xi_l1(dataset.samples.size(), 0.0);
  for (size_t i = 0; i < dataset.samples.size(); ++i) {
    const Sample& sample = dataset.samples[i];
    xi_l1[i] = sample.patches[sample.first_noise_position()].l1();
  }
  const double mu_norm = 1.0;

  for (size_t k = 0; k + 1 < snapshots.size(); ++k) {
    const ProbeSnapshot& a = snapshots[k];
    const ProbeSnapshot& b = snapshots[k + 1];
    const double dt = b.t - a.t;
    if (std::abs(dt - 1.0) > 1e-12) continue;  // only cadence-1 segments
    ++report.steps_checked;
    auto flag = [&](const std::string& qty, int s, int i, double obs, double full) {
      report.flags.push_back({a.t, b.t, qty, s, i, obs, full});
    };
    for (int s = 0; s < a.m_k(); ++s) {
      ++report.increments_checked;
      if (!increment_ok(b.q_mu[s] - a.q_mu[s], eta * mu_norm, rel_tol))
        flag("q_mu", s, -1, b.q_mu[s] - a.q_mu[s], eta * mu_norm);
      ++report.increments_checked;
      if (!increment_ok(b.k_mu[s] - a.k_mu[s], eta * mu_norm, rel_tol))
        flag("k_mu", s, -1, b.k_mu[s] - a.k_mu[s], eta * mu_norm);
      for (int i = 0; i < a.n(); ++i) {
        ++report.increments_checked;
        if (!increment_ok(b.q_xi(s, i) - a.q_xi(s, i), eta * xi_l1[i], rel_tol))
          flag("q_xi", s, i, b.q_xi(s, i) - a.q_xi(s, i), eta * xi_l1[i]);
        ++report.increments_checked;
        if (!increment_ok(b.k_xi(s, i) - a.k_xi(s, i), eta * xi_l1[i], rel_tol))
          flag("k_xi", s, i, b.k_xi(s, i) - a.k_xi(s, i), eta * xi_l1[i]);
      }
    }
    ++report.increments_checked;
    if (!increment_ok(b.v_mu - a.v_mu, 2.0 * eta * mu_norm, rel_tol))
      flag("v_mu", -1, -1, b.v_mu - a.v_mu, 2.0 * eta * mu_norm);
    for (int i = 0; i < a.n(); ++i) {
      ++report.increments_checked;
      if (!increment_ok(b.v_xi[i] - a.v_xi[i], 2.0 * eta * xi_l1[i], rel_tol))
        flag("v_xi", -1, i, b.v_xi[i] - a.v_xi[i], 2.0 * eta * xi_l1[i]);
    }
  }
  return report;
}

}  // namespace signdyn
