#include <cmath>
#include <functional>

#include "doctest.h"
#include "signdyn/gradients.hpp"

using namespace signdyn;

namespace {

// Generic central difference used to calibrate the oracle itself.
double central_diff(const std::function<double(double)>& f, double x, double h) {
  const double step = h * std::max(1.0, std::abs(x));
  return (f(x + step) - f(x - step)) / (2.0 * step);
}

struct SmallSetup {
  Dataset dataset;
  Params params;
  Head head;
};

SmallSetup random_setup(int d, int s, int n, int m_k, int m_v, int L, uint64_t seed,
                        double sigma_0 = 0.15, double sigma_p = 1.0) {
  SmallSetup out;
  DataConfig dc;
  dc.d = d;
  dc.s = s;
  dc.n = n;
  dc.L = L;
  dc.sigma_p = sigma_p;
  dc.seed = seed;
  out.dataset = generate_dataset(dc);
  ModelConfig mc;
  mc.d = d;
  mc.m_k = m_k;
  mc.m_v = m_v;
  mc.L = L;
  mc.sigma_0 = sigma_0;
  mc.init_seed = seed + 1;
  out.params = init_params(mc);
  out.head = Head::fixed(m_v);
  return out;
}

}  // namespace

TEST_CASE("finite differences calibrate on x^2 at x = 3") {
  const double d = central_diff([](double x) { return x * x; }, 3.0, 1e-5);
  CHECK(std::abs(d - 6.0) < 1e-9);
}

TEST_CASE("value gradient at zero params, single sample, by hand") {
  const int d = 6, m_v = 2;
  Params p;
  p.w_q = Matrix(2, d);
  p.w_k = Matrix(2, d);
  p.w_v_pos = Matrix(m_v, d);
  p.w_v_neg = Matrix(m_v, d);
  Dataset ds;
  ds.config.d = d;
  ds.config.s = 2;
  ds.config.n = 1;
  ds.config.sigma_p = 1.0;
  Sample sample;
  sample.y = 1;
  sample.signal_positions = {0};
  sample.patches.resize(2);
  sample.patches[0].idx = {0};
  sample.patches[0].val = {1.0};
  sample.patches[1].idx = {1, 2};  // xi on coordinates {2,3} in 1-based terms
  sample.patches[1].val = {0.8, -1.1};
  ds.samples = {sample};

  const Head head = Head::fixed(m_v);
  const auto caches = forward_all(p, head, ds);
  const Grads g = grad_value(p, head, ds, caches);
  // All softmax outputs 1/2, loss_deriv 1/2:
  // grad wrt w_{V,+1,r} = -(1/2) * (1/m_v) * (mu + xi).
  for (int r = 0; r < m_v; ++r) {
    CHECK(g.g_v_pos(r, 0) == doctest::Approx(-0.5 / m_v).epsilon(1e-15));
    CHECK(g.g_v_pos(r, 1) == doctest::Approx(-0.5 / m_v * 0.8).epsilon(1e-15));
    CHECK(g.g_v_pos(r, 2) == doctest::Approx(-0.5 / m_v * -1.1).epsilon(1e-15));
    for (int c = 3; c < d; ++c) CHECK(g.g_v_pos(r, c) == 0.0);
  }
}

TEST_CASE("value gradient anti-symmetry and row constancy are exact") {
  const SmallSetup s = random_setup(40, 5, 4, 3, 2, 2, 77);
  const auto caches = forward_all(s.params, s.head, s.dataset);
  const Grads g = grad_value(s.params, s.head, s.dataset, caches);
  for (size_t e = 0; e < g.g_v_pos.size(); ++e)
    CHECK(g.g_v_pos.data()[e] == -g.g_v_neg.data()[e]);
  for (int r = 1; r < g.g_v_pos.rows(); ++r)
    for (int c = 0; c < g.g_v_pos.cols(); ++c)
      CHECK(g.g_v_pos(r, c) == doctest::Approx(g.g_v_pos(0, c)).epsilon(1e-14));
}

TEST_CASE("zero value matrices give exactly zero query/key gradients") {
  SmallSetup s = random_setup(30, 4, 3, 2, 2, 2, 5);
  s.params.w_v_pos = Matrix(2, 30);
  s.params.w_v_neg = Matrix(2, 30);
  const auto caches = forward_all(s.params, s.head, s.dataset);
  const Grads g = grad_query_key(s.params, s.head, s.dataset, caches);
  for (double x : g.g_q.data()) CHECK(x == 0.0);
  for (double x : g.g_k.data()) CHECK(x == 0.0);
}

TEST_CASE("equal value matrices (zero readout) give zero query/key gradients") {
  SmallSetup s = random_setup(30, 4, 3, 2, 2, 2, 6);
  s.params.w_v_neg = s.params.w_v_pos;
  const auto caches = forward_all(s.params, s.head, s.dataset);
  const Grads g = grad_query_key(s.params, s.head, s.dataset, caches);
  for (double x : g.g_q.data()) CHECK(x == 0.0);
  for (double x : g.g_k.data()) CHECK(x == 0.0);
}

TEST_CASE("scalar hand case m_k = m_v = 1, d = 3, matches the closed form") {
  Params p;
  p.w_q = Matrix(1, 3);
  p.w_k = Matrix(1, 3);
  p.w_v_pos = Matrix(1, 3);
  p.w_v_neg = Matrix(1, 3);
  p.w_q(0, 0) = 0.3;
  p.w_q(0, 1) = -0.2;
  p.w_q(0, 2) = 0.05;
  p.w_k(0, 0) = -0.4;
  p.w_k(0, 1) = 0.1;
  p.w_k(0, 2) = 0.25;
  p.w_v_pos(0, 0) = 0.6;
  p.w_v_pos(0, 1) = -0.15;
  p.w_v_pos(0, 2) = 0.2;
  p.w_v_neg(0, 0) = -0.1;
  p.w_v_neg(0, 1) = 0.3;
  p.w_v_neg(0, 2) = -0.05;
  Dataset ds;
  ds.config.d = 3;
  ds.config.s = 2;
  ds.config.n = 1;
  ds.config.sigma_p = 1.0;
  Sample sample;
  sample.y = -1;
  sample.signal_positions = {1};
  sample.patches.resize(2);
  sample.patches[1].idx = {0};
  sample.patches[1].val = {-1.0};
  sample.patches[0].idx = {1, 2};
  sample.patches[0].val = {0.9, -1.3};
  ds.samples = {sample};
  const Head head = Head::fixed(1);
  const auto caches = forward_all(p, head, ds);
  const ForwardCache& cache = caches[0];

  // Scalar evaluation of the two-patch gradient formula.
  const std::vector<double> v = mean_value(p);
  auto dot = [&](const Patch& x, const std::vector<double>& w) {
    double acc = 0;
    for (size_t k = 0; k < x.idx.size(); ++k) acc += w[x.idx[k]] * x.val[k];
    return acc;
  };
  const Patch& x1 = sample.patches[0];
  const Patch& x2 = sample.patches[1];
  const std::vector<double> wq = {p.w_q(0, 0), p.w_q(0, 1), p.w_q(0, 2)};
  const std::vector<double> wk = {p.w_k(0, 0), p.w_k(0, 1), p.w_k(0, 2)};
  const double u_diff = dot(x1, v) - dot(x2, v);
  const double k_diff = dot(x1, wk) - dot(x2, wk);
  const double q1 = dot(x1, wq), q2 = dot(x2, wq);
  const double base = -(1.0) * sample.y * cache.loss_deriv;  // (1/n) with n = 1
  const double s1112 = cache.sm(0, 0) * cache.sm(0, 1);
  const double s2122 = cache.sm(1, 0) * cache.sm(1, 1);
  std::vector<double> expect_q(3, 0.0), expect_k(3, 0.0);
  for (size_t k = 0; k < x1.idx.size(); ++k)
    expect_q[x1.idx[k]] += base * u_diff * k_diff * s1112 * x1.val[k];
  for (size_t k = 0; k < x2.idx.size(); ++k)
    expect_q[x2.idx[k]] += base * u_diff * k_diff * s2122 * x2.val[k];
  const double q_mix = s1112 * q1 + s2122 * q2;
  for (size_t k = 0; k < x1.idx.size(); ++k)
    expect_k[x1.idx[k]] += base * u_diff * q_mix * x1.val[k];
  for (size_t k = 0; k < x2.idx.size(); ++k)
    expect_k[x2.idx[k]] -= base * u_diff * q_mix * x2.val[k];

  const Grads g = grad_query_key(p, head, ds, caches);
  for (int c = 0; c < 3; ++c) {
    CHECK(g.g_q(0, c) == doctest::Approx(expect_q[c]).epsilon(1e-12));
    CHECK(g.g_k(0, c) == doctest::Approx(expect_k[c]).epsilon(1e-12));
  }
}

TEST_CASE("general-L path agrees with the two-patch closed form on L = 2") {
  for (uint64_t seed = 0; seed < 5; ++seed) {
    const SmallSetup s = random_setup(50, 5, 4, 3, 2, 2, 100 + seed);
    const auto caches = forward_all(s.params, s.head, s.dataset);
    const Grads general = grad_query_key(s.params, s.head, s.dataset, caches);
    const Grads closed = grad_query_key_two_patch(s.params, s.head, s.dataset, caches);
    const GradCheckReport report = compare_grads(general, closed);
    CHECK(report.max_rel_error < 1e-12);
  }
}

TEST_CASE("analytic gradients match finite differences") {
  SUBCASE("L = 2") {
    const SmallSetup s = random_setup(50, 5, 4, 3, 2, 2, 11);
    const auto caches = forward_all(s.params, s.head, s.dataset);
    const Grads analytic = compute_grads(s.params, s.head, s.dataset, caches);
    const Grads numeric = finite_difference_oracle(s.params, s.head, s.dataset, 1e-5);
    const GradCheckReport report = compare_grads(analytic, numeric);
    CAPTURE(report.worst_tensor);
    CAPTURE(report.worst_analytic);
    CAPTURE(report.worst_numeric);
    CHECK(report.max_rel_error < 1e-6);
  }
  SUBCASE("L = 4") {
    const SmallSetup s = random_setup(40, 4, 3, 3, 2, 4, 12);
    const auto caches = forward_all(s.params, s.head, s.dataset);
    const Grads analytic = compute_grads(s.params, s.head, s.dataset, caches);
    const Grads numeric = finite_difference_oracle(s.params, s.head, s.dataset, 1e-5);
    CHECK(compare_grads(analytic, numeric).max_rel_error < 1e-6);
  }
  SUBCASE("ten random small configs") {
    Rng rng(2024);
    for (int trial = 0; trial < 10; ++trial) {
      const int L = (trial % 2 == 0) ? 2 : 4;
      const int d = 10 + static_cast<int>(rng.next_below(41));
      const int s = 1 + static_cast<int>(rng.next_below(std::min(5, d / L - 1)));
      const int n = 1 + static_cast<int>(rng.next_below(4));
      const int m_k = 1 + static_cast<int>(rng.next_below(3));
      const int m_v = 1 + static_cast<int>(rng.next_below(2));
      const SmallSetup su = random_setup(d, s, n, m_k, m_v, L, 500 + trial);
      const auto caches = forward_all(su.params, su.head, su.dataset);
      const Grads analytic = compute_grads(su.params, su.head, su.dataset, caches);
      const Grads numeric = finite_difference_oracle(su.params, su.head, su.dataset, 1e-5);
      const GradCheckReport report = compare_grads(analytic, numeric);
      CAPTURE(trial);
      CAPTURE(report.worst_tensor);
      CHECK(report.max_rel_error < 1e-6);
    }
  }
}

TEST_CASE("gradient support locality under orthogonal noise") {
  const SmallSetup s = random_setup(60, 4, 3, 3, 2, 2, 13);
  const auto caches = forward_all(s.params, s.head, s.dataset);
  const Grads g = compute_grads(s.params, s.head, s.dataset, caches);
  std::vector<bool> touched(60, false);
  touched[0] = true;  // signal coordinate
  for (const Sample& sample : s.dataset.samples)
    for (int p : sample.noise_positions())
      for (int c : sample.patches[p].idx) touched[c] = true;
  for (int c = 0; c < 60; ++c) {
    if (touched[c]) continue;
    for (int r = 0; r < g.g_q.rows(); ++r) {
      CHECK(g.g_q(r, c) == 0.0);
      CHECK(g.g_k(r, c) == 0.0);
    }
    for (int r = 0; r < g.g_v_pos.rows(); ++r) CHECK(g.g_v_pos(r, c) == 0.0);
  }
}

TEST_CASE("trainable head gradients") {
  SUBCASE("disabled mode raises") {
    const SmallSetup s = random_setup(30, 4, 2, 2, 2, 2, 14);
    const auto caches = forward_all(s.params, s.head, s.dataset);
    Grads g;
    CHECK_THROWS_AS(grad_head(s.params, s.head, s.dataset, caches, false, g), mode_error);
  }
  SUBCASE("zero value matrices give zero head gradient") {
    SmallSetup s = random_setup(30, 4, 2, 2, 2, 2, 15);
    s.params.w_v_pos = Matrix(2, 30);
    s.params.w_v_neg = Matrix(2, 30);
    const auto caches = forward_all(s.params, s.head, s.dataset);
    Grads g;
    grad_head(s.params, s.head, s.dataset, caches, true, g);
    for (double x : g.g_head_pos) CHECK(x == 0.0);
    for (double x : g.g_head_neg) CHECK(x == 0.0);
  }
  SUBCASE("symmetric value init makes the two branches exact negatives") {
    SmallSetup s = random_setup(30, 4, 2, 2, 2, 2, 16);
    s.params.w_v_neg = s.params.w_v_pos;
    const auto caches = forward_all(s.params, s.head, s.dataset);
    Grads g;
    grad_head(s.params, s.head, s.dataset, caches, true, g);
    for (size_t r = 0; r < g.g_head_pos.size(); ++r)
      CHECK(g.g_head_pos[r] == doctest::Approx(-g.g_head_neg[r]).epsilon(1e-15));
  }
  SUBCASE("joint-mode finite differences cover the head") {
    SmallSetup s = random_setup(30, 4, 3, 2, 2, 2, 17);
    s.head.pos = {0.6, 0.2};
    s.head.neg = {0.4, 0.7};
    const auto caches = forward_all(s.params, s.head, s.dataset);
    const Grads analytic = compute_grads(s.params, s.head, s.dataset, caches, true);
    const Grads numeric = finite_difference_oracle(s.params, s.head, s.dataset, 1e-5, true);
    CHECK(compare_grads(analytic, numeric).max_rel_error < 1e-6);
  }
}
