#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "signdyn/common.hpp"
#include "signdyn/datagen.hpp"

namespace signdyn {

struct ModelConfig {
  int d = 0;
  int m_k = 0;
  int m_v = 0;
  int L = 2;
  double sigma_0 = 0.0;
  uint64_t init_seed = 0;

  void validate() const;
};

// Trainable matrices of the attention layer. The linear head is fixed at
// +1/m_v and -1/m_v (a trainable head is handled by the gradients module).
struct Params {
  Matrix w_q;      // m_k x d
  Matrix w_k;      // m_k x d
  Matrix w_v_pos;  // m_v x d
  Matrix w_v_neg;  // m_v x d

  bool same_shape(const Params& o) const {
    return w_q.same_shape(o.w_q) && w_k.same_shape(o.w_k) &&
           w_v_pos.same_shape(o.w_v_pos) && w_v_neg.same_shape(o.w_v_neg);
  }
  bool all_finite() const {
    return w_q.all_finite() && w_k.all_finite() && w_v_pos.all_finite() &&
           w_v_neg.all_finite();
  }
};

// Optional trainable head; theta[j][r] with j in {+1 -> row 0, -1 -> row 1}.
// f = sum_j j * sum_r theta[j][r] * A_{j,r}; theta = 1/m_v reproduces the
// fixed head exactly.
struct Head {
  std::vector<double> pos;  // coefficients for the +1 branch
  std::vector<double> neg;  // coefficients for the -1 branch

  static Head fixed(int m_v) {
    Head h;
    h.pos.assign(m_v, 1.0 / m_v);
    h.neg.assign(m_v, 1.0 / m_v);
    return h;
  }
};

struct ForwardCache {
  Matrix z;   // L x L pre-softmax logits, z(l, a)
  Matrix sm;  // L x L row-softmax of z
  double f = 0.0;
  double margin = 0.0;      // y * f
  double loss = 0.0;        // log(1 + exp(-margin))
  double loss_deriv = 0.0;  // -l'(margin) in (0,1)
  std::vector<double> readout;  // <v_eff, x^(a)> per patch
  Matrix qp, kp;  // L x m_k patch projections, reused by the gradient pass
};

// Mean value direction v = mean row of W_{V,+1} minus mean row of W_{V,-1}.
std::vector<double> mean_value(const Params& params);

// Effective readout sum_j j sum_r theta[j][r] w_{V,j,r}; equals mean_value
// with the fixed head.
std::vector<double> effective_readout(const Params& params, const Head& head);

Params init_params(const ModelConfig& config);

Matrix attention_logits(const Params& params, const Sample& sample);
Matrix softmax_outputs(const Matrix& z);

ForwardCache forward(const Params& params, const Sample& sample);
ForwardCache forward(const Params& params, const Head& head, const Sample& sample);

// Forward pass with a precomputed readout direction (batched callers compute
// effective_readout once).
ForwardCache forward_with_readout(const Params& params, const std::vector<double>& v_eff,
                                  const Sample& sample);

double empirical_loss(const Params& params, const Dataset& dataset);

struct TestLoss {
  double logistic = 0.0;
  double zero_one = 0.0;  // ties (margin == 0) count as errors
  int n_test = 0;
};

// Monte Carlo estimate on fresh samples drawn from a seed stream disjoint
// from the training stream.
TestLoss test_loss(const Params& params, const DataConfig& config, int n_test, uint64_t seed);

// Fresh evaluation sample i from the test stream of `seed`.
Sample test_sample(const DataConfig& config, uint64_t seed, int i);

// Binary checkpoint: JSON header + four dense row-major little-endian double
// matrices. Round-trips bit-exactly.
void save_params(const Params& params, const ModelConfig& config, const std::string& path);
std::pair<Params, ModelConfig> load_params(const std::string& path);

}  // namespace signdyn
