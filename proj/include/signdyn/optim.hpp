#pragma once

#include <functional>
#include <optional>
#include <string>
#include <vector>

#include "signdyn/gradients.hpp"
#include "signdyn/probes.hpp"

namespace signdyn {

enum class OptimizerKind { signgd, gd, gd_momentum, adam };

std::string to_string(OptimizerKind kind);
OptimizerKind optimizer_kind_from_string(const std::string& name);

struct OptimizerSpec {
  OptimizerKind kind = OptimizerKind::signgd;
  double eta = 1e-4;
  double beta1 = 0.0;
  double beta2 = 0.0;
  double epsilon = 0.0;
  bool bias_correction = true;

  void validate() const;
};

struct OptimizerState {
  long step_count = 0;
  std::optional<Params> first_moment;
  std::optional<Params> second_moment;
  std::vector<double> head_m_pos, head_m_neg, head_v_pos, head_v_neg;
};

// Pure single-step transitions. sgn(0) = 0, so zero-gradient entries freeze.
Params signgd_step(const Params& params, const Grads& grads, double eta);
std::pair<Params, OptimizerState> gd_step(const Params& params, const Grads& grads, double eta,
                                          double beta1 = 0.0,
                                          OptimizerState state = OptimizerState{});
std::pair<Params, OptimizerState> adam_step(const Params& params, const Grads& grads,
                                            const OptimizerSpec& spec, OptimizerState state);

// In-place step shared by all optimizers (the training loop's fast path).
void apply_step(Params& params, Head& head, const Grads& grads, const OptimizerSpec& spec,
                OptimizerState& state, bool joint_head);

// Probe cadence schedule: cadence c_k applies while t <= until_k; the last
// segment may leave `until` unset (applies forever).
struct CadenceSegment {
  int cadence = 1;
  long until = -1;  // inclusive; -1 = unbounded
};

struct ProbeSchedule {
  std::vector<CadenceSegment> segments{{1, 50}, {10, -1}};
  int test_loss_every = 0;  // in iterations; 0 disables cadence-gated test loss
  int n_test = 500;

  bool probe_due(long t) const;
  bool test_loss_due(long t) const;
};

ProbeSchedule parse_cadence(const std::string& text);
std::string cadence_to_string(const ProbeSchedule& schedule);

struct TrainOptions {
  OptimizerSpec spec;
  long iters = 0;
  ProbeSchedule schedule;
  bool joint_head = false;
  uint64_t test_seed = 0;    // stream for cadence-gated test loss
  double time_scale = 1.0;   // snapshot t = iteration * time_scale (zoom runs)
};

struct Trace {
  std::vector<ProbeSnapshot> snapshots;
  Params final_params;
  Head final_head;
  OptimizerSpec spec;
  long iters = 0;
};

// Full-batch deterministic training loop: forward -> analytic grads ->
// optimizer step, with a snapshot at t = 0 and per the cadence schedule.
// Aborts with numeric_error naming the first non-finite tensor.
Trace run_training(const Params& init, const Dataset& dataset, const TrainOptions& options);

}  // namespace signdyn
