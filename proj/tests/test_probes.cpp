#include <cmath>

#include "doctest.h"
#include "signdyn/optim.hpp"
#include "signdyn/probes.hpp"

using namespace signdyn;

namespace {

struct Setup {
  Dataset dataset;
  Params params;
  ModelConfig model;
};

Setup make_setup(int d, int s, int n, int m_k, int m_v, uint64_t seed, double sigma_0) {
  Setup out;
  DataConfig dc;
  dc.d = d;
  dc.s = s;
  dc.n = n;
  dc.sigma_p = 2.0 / std::sqrt(static_cast<double>(s));
  dc.disjoint_supports = true;
  dc.seed = seed;
  out.dataset = generate_dataset(dc);
  out.model.d = d;
  out.model.m_k = m_k;
  out.model.m_v = m_v;
  out.model.sigma_0 = sigma_0;
  out.model.init_seed = seed + 1;
  out.params = init_params(out.model);
  return out;
}

}  // namespace

TEST_CASE("snapshot of zero params") {
  Setup s = make_setup(100, 5, 4, 3, 2, 1, 0.0);
  const auto caches = forward_all(s.params, Head::fixed(2), s.dataset);
  const ProbeSnapshot snap = snapshot(s.params, s.dataset, 0.0, caches);
  CHECK(snap.v_mu == 0.0);
  for (int i = 0; i < snap.n(); ++i) {
    CHECK(snap.v_xi[i] == 0.0);
    CHECK(snap.s11[i] == doctest::Approx(0.5).epsilon(1e-15));
    CHECK(snap.s21[i] == doctest::Approx(0.5).epsilon(1e-15));
    CHECK(snap.loss_deriv[i] == doctest::Approx(0.5).epsilon(1e-15));
  }
  for (int k = 0; k < snap.m_k(); ++k) {
    CHECK(snap.q_mu[k] == 0.0);
    for (int i = 0; i < snap.n(); ++i) CHECK(snap.q_xi(k, i) == 0.0);
  }
  CHECK(snap.train_loss == doctest::Approx(std::log(2.0)).epsilon(1e-15));
}

TEST_CASE("snapshot purity: identical inputs give identical snapshots") {
  Setup s = make_setup(200, 8, 5, 4, 3, 2, 0.01);
  const auto caches = forward_all(s.params, Head::fixed(3), s.dataset);
  const ProbeSnapshot a = snapshot(s.params, s.dataset, 3.0, caches);
  const ProbeSnapshot b = snapshot(s.params, s.dataset, 3.0, caches);
  CHECK(a.q_xi.data() == b.q_xi.data());
  CHECK(a.v_xi == b.v_xi);
  CHECK(a.train_loss == b.train_loss);
}

TEST_CASE("sign_table identity case is diagonal") {
  Setup s = make_setup(200, 8, 5, 4, 3, 3, 0.01);
  const auto caches = forward_all(s.params, Head::fixed(3), s.dataset);
  const ProbeSnapshot snap = snapshot(s.params, s.dataset, 0.0, caches);
  const SignTable table = sign_table(snap, snap);
  CHECK(table.grand_total() == 4 * 5);
  for (int r = 0; r < 4; ++r)
    for (int c = 0; c < 4; ++c)
      if (r != c) CHECK(table.counts[r][c] == 0);
}

TEST_CASE("sign_table hand-built 2x2 case matches enumeration") {
  ProbeSnapshot ref, later;
  ref.q_mu = later.q_mu = {0.0, 0.0};
  ref.k_mu = later.k_mu = {0.0, 0.0};
  ref.v_xi = later.v_xi = {0.0, 0.0};
  ref.q_xi = Matrix(2, 2);
  ref.k_xi = Matrix(2, 2);
  later.q_xi = Matrix(2, 2);
  later.k_xi = Matrix(2, 2);
  // (s,i) = (0,0): K+Q+ -> K+Q-; (0,1): K-Q- -> K-Q-;
  // (1,0): K+Q- -> K+Q+; (1,1): K-Q+ -> zero query at t.
  ref.k_xi(0, 0) = 1;
  ref.q_xi(0, 0) = 1;
  later.k_xi(0, 0) = 1;
  later.q_xi(0, 0) = -1;
  ref.k_xi(0, 1) = -1;
  ref.q_xi(0, 1) = -1;
  later.k_xi(0, 1) = -2;
  later.q_xi(0, 1) = -3;
  ref.k_xi(1, 0) = 2;
  ref.q_xi(1, 0) = -1;
  later.k_xi(1, 0) = 1;
  later.q_xi(1, 0) = 4;
  ref.k_xi(1, 1) = -1;
  ref.q_xi(1, 1) = 1;
  later.k_xi(1, 1) = -1;
  later.q_xi(1, 1) = 0;
  const SignTable table = sign_table(ref, later);
  CHECK(table.counts[0][1] == 1);  // K+Q+ -> K+Q-
  CHECK(table.counts[3][3] == 1);
  CHECK(table.counts[1][0] == 1);
  CHECK(table.zero_t == 1);
  CHECK(table.grand_total() == 4);
  CHECK(table.row_sum(0) == 1);
  CHECK(table.col_sum(0) == 1);
}

TEST_CASE("beta_stats") {
  SUBCASE("zero params give zero betas") {
    Setup s = make_setup(100, 5, 3, 2, 2, 4, 0.0);
    const BetaStats beta = beta_stats(s.params, s.dataset);
    CHECK(beta.beta_xi == 0.0);
    CHECK(beta.beta_mu == 0.0);
  }
  SUBCASE("single neuron d = 2 hand case") {
    Params p;
    p.w_q = Matrix(1, 2);
    p.w_k = Matrix(1, 2);
    p.w_v_pos = Matrix(1, 2);
    p.w_v_neg = Matrix(1, 2);
    p.w_q(0, 0) = 0.3;   // beta_mu candidate
    p.w_q(0, 1) = -0.2;
    p.w_k(0, 0) = -0.5;  // |.| = 0.5 wins beta_mu
    p.w_k(0, 1) = 0.1;
    p.w_v_pos(0, 1) = 2.0;
    Dataset ds;
    ds.config.d = 2;
    ds.config.s = 1;
    ds.config.n = 1;
    ds.config.sigma_p = 1.0;
    Sample sample;
    sample.y = -1;
    sample.signal_positions = {0};
    sample.patches.resize(2);
    sample.patches[0].idx = {0};
    sample.patches[0].val = {-1.0};
    sample.patches[1].idx = {1};
    sample.patches[1].val = {0.7};
    ds.samples = {sample};
    const BetaStats beta = beta_stats(p, ds);
    CHECK(beta.beta_mu == 0.5);
    CHECK(beta.beta_xi == doctest::Approx(1.4).epsilon(1e-15));  // |2.0 * 0.7|
  }
  SUBCASE("row (a) scale beta_mu respects the Gaussian-max bound in most seeds") {
    // P(max |N(0, sigma_0^2)| <= sigma_0 sqrt(2 log(12 m_k / delta))) with
    // delta = 0.01: individual tail 2*Phi(-z) with z ~ 4.3, union over 240
    // rows stays above 0.99.
    int ok = 0;
    const int trials = 40;
    for (int trial = 0; trial < trials; ++trial) {
      Setup s = make_setup(500, 20, 8, 25, 5, 100 + trial, 0.1 / std::sqrt(500.0));
      const BetaStats beta = beta_stats(s.params, s.dataset);
      const double bound =
          std::sqrt(2.0 * std::log(12.0 * 25 / 0.01)) * (0.1 / std::sqrt(500.0));
      if (beta.beta_mu <= bound) ++ok;
    }
    CHECK(ok >= trials - 1);
  }
}

TEST_CASE("alignment_fraction at random init is near 1/2") {
  Setup s = make_setup(2000, 80, 20, 50, 10, 6, 0.1 / std::sqrt(2000.0));
  const auto caches = forward_all(s.params, Head::fixed(10), s.dataset);
  const ProbeSnapshot snap = snapshot(s.params, s.dataset, 0.0, caches);
  const AlignmentFraction frac = alignment_fraction(snap);
  // 1000 (s, i) pairs; binomial 3-sigma band around 1/2.
  const double se = std::sqrt(0.25 / 1000.0);
  CHECK(std::abs(frac.qk_noise - 0.5) <= 3.0 * se);
  CHECK(frac.final_frac <= frac.qk_noise);
}

TEST_CASE("increment audit") {
  Setup s = make_setup(400, 8, 5, 6, 4, 7, 0.1 / std::sqrt(400.0));
  REQUIRE(supports_disjoint(s.dataset));
  TrainOptions opt;
  opt.iters = 50;
  opt.spec.kind = OptimizerKind::signgd;
  opt.spec.eta = 1e-3;
  opt.schedule.segments = {{1, -1}};
  const Trace trace = run_training(s.params, s.dataset, opt);
  SUBCASE("clean SignGD cadence-1 trace has zero flags") {
    const AuditReport report =
        increment_audit(trace.snapshots, s.dataset, opt.spec.eta, true);
    CHECK(!report.skipped);
    CHECK(report.steps_checked == 50);
    CHECK(report.flags.empty());
  }
  SUBCASE("non-SignGD traces are skipped with a notice") {
    const AuditReport report =
        increment_audit(trace.snapshots, s.dataset, opt.spec.eta, false);
    CHECK(report.skipped);
    CHECK(!report.skip_reason.empty());
  }
  SUBCASE("a corrupted step is flagged") {
    std::vector<ProbeSnapshot> snaps = trace.snapshots;
    snaps[10].q_xi(2, 1) += 3.21e-4;
    const AuditReport report = increment_audit(snaps, s.dataset, opt.spec.eta, true);
    REQUIRE(!report.flags.empty());
    bool found = false;
    for (const AuditFlag& flag : report.flags)
      if (flag.quantity == "q_xi" && flag.neuron == 2 && flag.sample == 1) found = true;
    CHECK(found);
  }
}

TEST_CASE("mean value noise moves by exactly 2 eta ||xi||_1 per SignGD step") {
  Setup s = make_setup(600, 10, 6, 5, 4, 8, 0.1 / std::sqrt(600.0));
  REQUIRE(supports_disjoint(s.dataset));
  TrainOptions opt;
  opt.iters = 30;
  opt.spec.eta = 1e-3;
  opt.schedule.segments = {{1, -1}};
  const Trace trace = run_training(s.params, s.dataset, opt);
  std::vector<double> l1(s.dataset.samples.size());
  for (size_t i = 0; i < l1.size(); ++i) {
    const Sample& sample = s.dataset.samples[i];
    l1[i] = sample.patches[sample.first_noise_position()].l1();
  }
  // After the first few steps every v_xi grows by the full doubled increment.
  for (size_t k = 5; k + 1 < trace.snapshots.size(); ++k) {
    for (size_t i = 0; i < l1.size(); ++i) {
      const double delta = trace.snapshots[k + 1].v_xi[i] - trace.snapshots[k].v_xi[i];
      CHECK(delta == doctest::Approx(2.0 * opt.spec.eta * l1[i]).epsilon(1e-9));
    }
  }
}

TEST_CASE("mean value noise at init sits inside the scale band") {
  // |<v(0), y_i xi_i>| <= 2 sqrt(2 log(12 m_v n / delta)) sigma_0 sigma_p
  // sqrt(s) / sqrt(m_v), delta = 0.01; an order-of-magnitude event that
  // should hold in nearly every seed.
  int ok = 0;
  const int trials = 20;
  for (int trial = 0; trial < trials; ++trial) {
    Setup s = make_setup(2000, 80, 20, 10, 20, 300 + trial, 0.1 / std::sqrt(2000.0));
    const auto caches = forward_all(s.params, Head::fixed(20), s.dataset);
    const ProbeSnapshot snap = snapshot(s.params, s.dataset, 0.0, caches);
    double vmax = 0.0;
    for (double v : snap.v_xi) vmax = std::max(vmax, std::abs(v));
    const double sigma_0 = 0.1 / std::sqrt(2000.0);
    const double bound = 2.0 * std::sqrt(2.0 * std::log(12.0 * 20 * 20 / 0.01)) * sigma_0 *
                         s.dataset.config.sigma_p * std::sqrt(80.0) / std::sqrt(20.0);
    if (vmax <= bound) ++ok;
  }
  CHECK(ok >= trials - 1);
}
