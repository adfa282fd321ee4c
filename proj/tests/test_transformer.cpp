#include <cmath>
#include <cstdio>
#include <fstream>
#include <sstream>

#include "doctest.h"
#include "signdyn/transformer.hpp"

using namespace signdyn;

namespace {

DataConfig row_a_data(uint64_t seed = 7) {
  DataConfig cfg;
  cfg.d = 2000;
  cfg.n = 20;
  cfg.s = 80;
  cfg.sigma_p = 2.0 / std::sqrt(80.0);
  cfg.seed = seed;
  return cfg;
}

ModelConfig row_a_model(uint64_t seed = 21) {
  ModelConfig cfg;
  cfg.d = 2000;
  cfg.m_k = 100;
  cfg.m_v = 20;
  cfg.sigma_0 = 0.1 / std::sqrt(2000.0);
  cfg.init_seed = seed;
  return cfg;
}

Params zero_params(int m_k, int m_v, int d) {
  Params p;
  p.w_q = Matrix(m_k, d);
  p.w_k = Matrix(m_k, d);
  p.w_v_pos = Matrix(m_v, d);
  p.w_v_neg = Matrix(m_v, d);
  return p;
}

Sample two_patch_sample(int d, int y, std::vector<int> support, std::vector<double> values) {
  Sample s;
  s.y = y;
  s.signal_positions = {0};
  s.patches.resize(2);
  s.patches[0].idx = {0};
  s.patches[0].val = {static_cast<double>(y)};
  s.patches[1].idx = std::move(support);
  s.patches[1].val = std::move(values);
  (void)d;
  return s;
}

}  // namespace

TEST_CASE("init_params: sigma_0 = 0 gives all-zero parameters") {
  ModelConfig cfg = row_a_model();
  cfg.sigma_0 = 0.0;
  const Params p = init_params(cfg);
  for (double x : p.w_q.data()) CHECK(x == 0.0);
  for (double x : p.w_v_neg.data()) CHECK(x == 0.0);
}

TEST_CASE("init_params: empirical entry std within 3% at row (a) scale") {
  const ModelConfig cfg = row_a_model();
  const Params p = init_params(cfg);
  double sq = 0.0;
  size_t count = 0;
  for (const Matrix* m : {&p.w_q, &p.w_k, &p.w_v_pos, &p.w_v_neg}) {
    for (double x : m->data()) sq += x * x;
    count += m->size();
  }
  const double std_hat = std::sqrt(sq / count);
  CHECK(std_hat == doctest::Approx(cfg.sigma_0).epsilon(0.03));
}

TEST_CASE("init_params determinism") {
  const ModelConfig cfg = row_a_model(123);
  const Params a = init_params(cfg);
  const Params b = init_params(cfg);
  CHECK(a.w_q.data() == b.w_q.data());
  CHECK(a.w_v_pos.data() == b.w_v_pos.data());
}

TEST_CASE("attention_logits hand case") {
  Params p = zero_params(1, 1, 2);
  const Sample s = [] {
    Sample out;
    out.y = 1;
    out.signal_positions = {0};
    out.patches.resize(2);
    out.patches[0].idx = {0};
    out.patches[0].val = {1.0};
    out.patches[1].idx = {1};
    out.patches[1].val = {2.0};
    return out;
  }();
  SUBCASE("zero params give zero logits") {
    const Matrix z = attention_logits(p, s);
    for (double x : z.data()) CHECK(x == 0.0);
  }
  SUBCASE("w_Q = (1,0), w_K = (0,1), X = [(1,0),(0,2)]") {
    p.w_q(0, 0) = 1.0;
    p.w_k(0, 1) = 1.0;
    const Matrix z = attention_logits(p, s);
    CHECK(z(0, 0) == 0.0);
    CHECK(z(0, 1) == 2.0);
    CHECK(z(1, 0) == 0.0);
    CHECK(z(1, 1) == 0.0);
  }
}

TEST_CASE("softmax_outputs") {
  Matrix z(1, 2);
  SUBCASE("zero row splits evenly") {
    const Matrix sm = softmax_outputs(z);
    CHECK(sm(0, 0) == doctest::Approx(0.5).epsilon(1e-15));
    CHECK(sm(0, 1) == doctest::Approx(0.5).epsilon(1e-15));
  }
  SUBCASE("huge logit saturates without overflow") {
    z(0, 0) = 1000.0;
    const Matrix sm = softmax_outputs(z);
    CHECK(sm(0, 0) == doctest::Approx(1.0).epsilon(1e-12));
    CHECK(std::isfinite(sm(0, 1)));
  }
  SUBCASE("ln 3 gives 3/4, 1/4") {
    z(0, 0) = std::log(3.0);
    const Matrix sm = softmax_outputs(z);
    CHECK(sm(0, 0) == doctest::Approx(0.75).epsilon(1e-14));
    CHECK(sm(0, 1) == doctest::Approx(0.25).epsilon(1e-14));
  }
  SUBCASE("rows sum to one and shifting a row changes nothing") {
    Matrix a(3, 3);
    Rng rng(5);
    for (double& x : a.data()) x = 4.0 * rng.next_gaussian();
    const Matrix sm = softmax_outputs(a);
    for (int l = 0; l < 3; ++l) {
      double row = 0.0;
      for (int c = 0; c < 3; ++c) {
        row += sm(l, c);
        CHECK(sm(l, c) > 0.0);
        CHECK(sm(l, c) < 1.0);
      }
      CHECK(row == doctest::Approx(1.0).epsilon(1e-12));
    }
    Matrix b = a;
    for (int c = 0; c < 3; ++c) b(1, c) += 17.25;
    const Matrix sm2 = softmax_outputs(b);
    for (int c = 0; c < 3; ++c) CHECK(sm2(1, c) == doctest::Approx(sm(1, c)).epsilon(1e-12));
  }
}

TEST_CASE("forward on zero params") {
  const Params p = zero_params(3, 2, 8);
  const Sample s = two_patch_sample(8, 1, {2, 3}, {0.5, -0.25});
  const ForwardCache cache = forward(p, s);
  CHECK(cache.f == 0.0);
  CHECK(cache.loss == doctest::Approx(std::log(2.0)).epsilon(1e-15));
  CHECK(cache.loss_deriv == doctest::Approx(0.5).epsilon(1e-15));
}

TEST_CASE("forward with uniform softmax and unit readout has margin 1") {
  Params p = zero_params(2, 1, 6);
  p.w_v_pos(0, 0) = 1.0;  // v = mu, <v, xi> = 0 when support avoids coordinate 1
  const Sample s = two_patch_sample(6, 1, {2, 4}, {1.5, -0.5});
  const ForwardCache cache = forward(p, s);
  CHECK(cache.margin == doctest::Approx(1.0).epsilon(1e-15));
  CHECK(cache.loss == doctest::Approx(std::log1p(std::exp(-1.0))).epsilon(1e-15));
}

TEST_CASE("forward matches the explicit two-patch formula") {
  const ModelConfig mc = [] {
    ModelConfig cfg;
    cfg.d = 40;
    cfg.m_k = 4;
    cfg.m_v = 3;
    cfg.sigma_0 = 0.3;
    cfg.init_seed = 9;
    return cfg;
  }();
  const Params p = init_params(mc);
  DataConfig dc;
  dc.d = 40;
  dc.s = 5;
  dc.n = 6;
  dc.sigma_p = 1.0;
  dc.seed = 31;
  const Dataset ds = generate_dataset(dc);
  const std::vector<double> v = mean_value(p);
  for (const Sample& sample : ds.samples) {
    const ForwardCache cache = forward(p, sample);
    const double u1 = sample.patches[0].dot_dense(v);
    const double u2 = sample.patches[1].dot_dense(v);
    const double f_explicit = (cache.sm(0, 0) + cache.sm(1, 0)) * u1 +
                              (cache.sm(0, 1) + cache.sm(1, 1)) * u2;
    CHECK(cache.f == doctest::Approx(f_explicit).epsilon(1e-12));
  }
}

TEST_CASE("forward is invariant under permuting patches with their bookkeeping") {
  DataConfig dc;
  dc.d = 60;
  dc.s = 4;
  dc.n = 5;
  dc.L = 4;
  dc.sigma_p = 0.8;
  dc.seed = 77;
  ModelConfig mc;
  mc.d = 60;
  mc.m_k = 3;
  mc.m_v = 2;
  mc.L = 4;
  mc.sigma_0 = 0.2;
  mc.init_seed = 4;
  const Params p = init_params(mc);
  const Dataset ds = generate_dataset(dc);
  Rng rng(123);
  for (const Sample& sample : ds.samples) {
    const double f_ref = forward(p, sample).f;
    // random permutation of the patches
    std::vector<int> perm(dc.L);
    for (int i = 0; i < dc.L; ++i) perm[i] = i;
    for (int i = dc.L - 1; i > 0; --i) {
      const int j = static_cast<int>(rng.next_below(i + 1));
      std::swap(perm[i], perm[j]);
    }
    Sample shuffled;
    shuffled.y = sample.y;
    shuffled.patches.resize(dc.L);
    for (int i = 0; i < dc.L; ++i) {
      shuffled.patches[perm[i]] = sample.patches[i];
      if (sample.is_signal(i)) shuffled.signal_positions.push_back(perm[i]);
    }
    std::sort(shuffled.signal_positions.begin(), shuffled.signal_positions.end());
    CHECK(forward(p, shuffled).f == doctest::Approx(f_ref).epsilon(1e-12));
  }
}

TEST_CASE("empirical_loss saturation and single-sample value") {
  Params p = zero_params(1, 1, 6);
  DataConfig dc;
  dc.d = 6;
  dc.s = 2;
  dc.n = 1;
  dc.sigma_p = 1.0;
  dc.seed = 1;
  Dataset ds;
  ds.config = dc;
  ds.samples = {two_patch_sample(6, 1, {2, 3}, {1.0, 1.0})};
  SUBCASE("zero params give ln 2 exactly") {
    CHECK(empirical_loss(p, ds) == std::log(2.0));
  }
  SUBCASE("huge positive margin saturates below 1e-12") {
    p.w_v_pos(0, 0) = 100.0;  // margin 100 at uniform softmax
    CHECK(empirical_loss(p, ds) < 1e-12);
  }
  SUBCASE("margin 1 gives log(1 + e^-1)") {
    p.w_v_pos(0, 0) = 1.0;
    CHECK(empirical_loss(p, ds) == doctest::Approx(0.31326168751822286).epsilon(1e-14));
  }
}

TEST_CASE("logistic kernel matches a long-double reference on [-50, 50]") {
  for (int k = -50; k <= 50; ++k) {
    const double m = static_cast<double>(k);
    const long double ref = logl(1.0L + expl(-static_cast<long double>(m)));
    const double got = logistic_loss(m);
    CHECK(std::abs(got - static_cast<double>(ref)) <=
          1e-14 * std::max(1.0, std::abs(static_cast<double>(ref))));
  }
}

TEST_CASE("row (a) initialization keeps softmax outputs near 1/2") {
  const Dataset ds = generate_dataset(row_a_data());
  const Params p = init_params(row_a_model());
  for (const Sample& sample : ds.samples) {
    const ForwardCache cache = forward(p, sample);
    const int sig = sample.signal_positions.front();
    const int noi = sample.first_noise_position();
    CHECK(std::abs(cache.sm(sig, sig) - 0.5) < 0.05);
    CHECK(std::abs(cache.sm(noi, sig) - 0.5) < 0.05);
  }
}

TEST_CASE("test_loss on zero params is ln 2 with the tie rule") {
  const Params p = zero_params(2, 2, 100);
  DataConfig dc;
  dc.d = 100;
  dc.s = 5;
  dc.n = 4;
  dc.sigma_p = 1.0;
  dc.seed = 10;
  const TestLoss tl = test_loss(p, dc, 50, 10);
  CHECK(tl.logistic == doctest::Approx(std::log(2.0)).epsilon(1e-15));
  CHECK(tl.zero_one == 1.0);
  CHECK(tl.n_test == 50);
}

TEST_CASE("test stream is disjoint from the training stream") {
  DataConfig dc;
  dc.d = 300;
  dc.s = 6;
  dc.n = 10;
  dc.sigma_p = 1.0;
  dc.seed = 10;
  const Dataset train = generate_dataset(dc);
  const Sample fresh = test_sample(dc, dc.seed, 0);
  const Sample train0 = train.samples[0];
  CHECK(fresh.patches[fresh.first_noise_position()].idx !=
        train0.patches[train0.first_noise_position()].idx);
}

TEST_CASE("params checkpoint round-trips bit-exactly") {
  const ModelConfig mc = [] {
    ModelConfig cfg;
    cfg.d = 30;
    cfg.m_k = 5;
    cfg.m_v = 4;
    cfg.sigma_0 = 0.7;
    cfg.init_seed = 555;
    return cfg;
  }();
  const Params p = init_params(mc);
  const std::string path = "/tmp/signdyn_test_params.bin";
  save_params(p, mc, path);
  const auto [q, mc2] = load_params(path);
  CHECK(mc2.d == mc.d);
  CHECK(mc2.m_k == mc.m_k);
  CHECK(mc2.sigma_0 == mc.sigma_0);
  CHECK(q.w_q.data() == p.w_q.data());
  CHECK(q.w_k.data() == p.w_k.data());
  CHECK(q.w_v_pos.data() == p.w_v_pos.data());
  CHECK(q.w_v_neg.data() == p.w_v_neg.data());
  std::remove(path.c_str());
}
