#pragma once

#include <array>
#include <cmath>
#include <limits>
#include <string>
#include <vector>

#include "signdyn/gradients.hpp"
#include "signdyn/transformer.hpp"

namespace signdyn {

// Theory-level observables at one iteration. Inner products are the
// analysis state variables: q_mu[s] = <w_{Q,s}, mu>, q_xi(s,i) = <w_{Q,s}, y_i xi_i>,
// v_* their mean-value analogues; s11/s21 are the signal-signal and
// noise-signal softmax outputs read through the sample's recorded roles.
struct ProbeSnapshot {
  double t = 0.0;
  std::vector<double> q_mu, k_mu;  // m_k
  Matrix q_xi, k_xi;               // m_k x n
  double v_mu = 0.0;
  std::vector<double> v_xi;        // n
  std::vector<double> s11, s21;    // n
  std::vector<double> loss_deriv;  // n, positive convention
  std::vector<int> a_idx;          // n, argmax column of the signal-query row
  double train_loss = 0.0;
  double test_loss = std::numeric_limits<double>::quiet_NaN();
  double test_zero_one = std::numeric_limits<double>::quiet_NaN();

  int m_k() const { return static_cast<int>(q_mu.size()); }
  int n() const { return static_cast<int>(v_xi.size()); }
  bool has_test_loss() const { return !std::isnan(test_loss); }
};

ProbeSnapshot snapshot(const Params& params, const Dataset& dataset, double t,
                       const std::vector<ForwardCache>& caches);

// 4x4 contingency table of joint (key, query) noise sign classes between a
// reference snapshot and a later one. Classes: K+Q+, K+Q-, K-Q+, K-Q-.
// Pairs with an exact zero sign at either time are counted separately.
struct SignTable {
  std::array<std::array<long, 4>, 4> counts{};
  long zero_ref = 0;
  long zero_t = 0;
  long total = 0;

  long row_sum(int r) const;
  long col_sum(int c) const;
  long grand_total() const;  // includes the zero classes
};

extern const char* const kSignClassNames[4];

SignTable sign_table(const ProbeSnapshot& snap_ref, const ProbeSnapshot& snap_t);

struct BetaStats {
  double beta_xi = 0.0;  // max |<w, xi_i>| over query/key/value rows and samples
  double beta_mu = 0.0;  // max |<w, mu>| over query/key/value rows
};

BetaStats beta_stats(const Params& init_params, const Dataset& dataset);

struct AlignmentFraction {
  double qk_noise = 0.0;  // sgn q_xi == sgn k_xi != 0
  double final_frac = 0.0;  // additionally == sgn q_mu[s] and == -sgn k_mu[s]
};

AlignmentFraction alignment_fraction(const ProbeSnapshot& snap);

// Audit of per-step inner-product increments on cadence-1 segments of a
// SignGD trace. Allowed magnitudes: 0 or eta*||mu|| for q_mu/k_mu, 0 or
// eta*||xi_i||_1 for q_xi/k_xi, and the doubled values for the mean-value
// quantities (both branches move in opposite directions).
struct AuditFlag {
  double t_from = 0.0, t_to = 0.0;
  std::string quantity;
  int neuron = -1, sample = -1;
  double observed = 0.0;
  double expected_full = 0.0;
};

struct AuditReport {
  bool skipped = false;
  std::string skip_reason;
  long steps_checked = 0;
  long increments_checked = 0;
  std::vector<AuditFlag> flags;
};

AuditReport increment_audit(const std::vector<ProbeSnapshot>& snapshots, const Dataset& dataset,
                            double eta, bool is_signgd, double rel_tol = 1e-10);

}  // namespace signdyn
