#pragma once

#include <string>
#include <vector>

#include "signdyn/common.hpp"
#include "signdyn/transformer.hpp"

namespace signdyn {

struct Grads {
  Matrix g_q;      // m_k x d
  Matrix g_k;      // m_k x d
  Matrix g_v_pos;  // m_v x d
  Matrix g_v_neg;  // m_v x d
  std::vector<double> g_head_pos;  // present only in joint-head mode
  std::vector<double> g_head_neg;

  bool all_finite() const;
  // First non-finite tensor name, or empty when clean.
  std::string first_non_finite() const;
};

// Forward caches for every sample, in dataset order.
std::vector<ForwardCache> forward_all(const Params& params, const Head& head,
                                      const Dataset& dataset);

// Gradient of the empirical loss, averaged over samples (1/n inside).
// The value part: identical rows, g_v_neg = -g_v_pos exactly.
Grads grad_value(const Params& params, const Head& head, const Dataset& dataset,
                 const std::vector<ForwardCache>& caches);

// Query/key parts via the softmax-Jacobian chain; valid for any L.
Grads grad_query_key(const Params& params, const Head& head, const Dataset& dataset,
                     const std::vector<ForwardCache>& caches);

// Two-patch closed forms for L = 2, kept as an independent cross-check of the
// general path.
Grads grad_query_key_two_patch(const Params& params, const Head& head, const Dataset& dataset,
                               const std::vector<ForwardCache>& caches);

// Gradient for the trainable head; only meaningful in joint mode.
void grad_head(const Params& params, const Head& head, const Dataset& dataset,
               const std::vector<ForwardCache>& caches, bool joint_enabled, Grads& out);

// All parts in one pass (the training loop's entry point).
Grads compute_grads(const Params& params, const Head& head, const Dataset& dataset,
                    const std::vector<ForwardCache>& caches, bool joint_head = false);

// Central-difference estimate of the full gradient; per-entry step
// h * max(1, |theta|). Test/diagnostic oracle, O(P) loss evaluations.
Grads finite_difference_oracle(const Params& params, const Head& head, const Dataset& dataset,
                               double h = 1e-6, bool joint_head = false);

struct GradCheckReport {
  double max_rel_error = 0.0;
  std::string worst_tensor;
  int worst_index = -1;
  double worst_analytic = 0.0;
  double worst_numeric = 0.0;
};

// Per-entry max-relative-error diagnostic between two gradient sets.
GradCheckReport compare_grads(const Grads& analytic, const Grads& numeric);

double empirical_loss(const Params& params, const Head& head, const Dataset& dataset);

}  // namespace signdyn
