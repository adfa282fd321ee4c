#pragma once

#include <limits>
#include <map>
#include <string>
#include <vector>

#include "signdyn/optim.hpp"
#include "signdyn/probes.hpp"

namespace signdyn {

// Unspecified absolute constants and thresholds, recorded with every report.
struct TheoryConstants {
  double c3 = 1.0;           // Stage IV end-time constant
  double theta_c = 0.1;      // alignment-margin constant
  double delta = 0.01;       // probability budget
  double softmax_band = 0.05;  // half-width of the "concentrated at 1/2" band
  double s21_decayed = 0.05;   // noise-signal softmax "decayed" threshold
  double attn_sparse = 0.1;    // attention-sparsity threshold
};

struct PredictedTimes {
  double t1 = 0.0;
  double t2_prime = 0.0;
  double t2_sgn = 0.0;
  double t2 = 0.0;
  double t3 = 0.0;
  double t4_minus_lo = 0.0;   // 0 with a flag when its separation fails
  double t4_minus_hi = 0.0;
  double t4 = 0.0;
  bool monotone = false;      // t1 < t2_sgn <= t2 < t3 < t4_minus_lo <= t4_minus_hi < t4
  std::vector<std::string> flags;  // violated separations, non-monotonicity
  TheoryConstants constants_used;
  double beta_xi = 0.0, beta_mu = 0.0, eta = 0.0;
};

// Closed-form stage boundary predictions from run constants (||mu|| = 1).
// Throws regime_error when sigma_p * s <= ||mu|| (not a low-SNR instance).
PredictedTimes predicted_times(const DataConfig& data, const ModelConfig& model, double eta,
                               const BetaStats& beta, const TheoryConstants& constants = {});

constexpr double kAbsent = std::numeric_limits<double>::quiet_NaN();

struct MeasuredTimes {
  double t_stage1_end = kAbsent;
  double t_qk_aligned = kAbsent;
  double t_signal_departure = kAbsent;
  double t_s21_decayed = kAbsent;
  double t_key_flip = kAbsent;
  double t_query_flip = kAbsent;
  double t_final_aligned = kAbsent;
};

// A loaded trace plus the context needed for analysis. `zoom` holds the
// micro-step segment (snapshot t already rescaled to main-run units) when a
// zoom run accompanies the trace.
struct TraceAnalysis {
  std::vector<ProbeSnapshot> snapshots;
  std::vector<ProbeSnapshot> zoom;
  Dataset dataset;
  OptimizerSpec spec;
  ModelConfig model;
};

MeasuredTimes detect_transitions(const TraceAnalysis& trace, const TheoryConstants& constants = {});

enum class Verdict { pass, fail, inconclusive, skipped };
std::string to_string(Verdict v);

struct StageVerdict {
  Verdict verdict = Verdict::inconclusive;
  std::string evidence;           // measured values backing the verdict
  std::vector<double> snapshots_used;  // t values consulted
};

struct StageReport {
  PredictedTimes predicted;
  MeasuredTimes measured;
  StageVerdict stage1, stage2, stage3, stage4;
  StageVerdict convergence, generalization, attention_sparsity;
  bool applicable = true;  // stage predicates are SignGD statements
  std::string note;

  bool all_pass() const;
  bool any_inconclusive() const;
};

StageReport verify_stage_predicates(const TraceAnalysis& trace, const PredictedTimes& predicted,
                                    const TheoryConstants& constants = {});

struct ConvergenceVerdict {
  Verdict verdict = Verdict::fail;
  double t_reached = kAbsent;   // first t with L_S <= eps
  double t_required = 0.0;      // ceil(2 log(1/eps) / (eta sigma_p s))
  double attained_loss = 0.0;   // loss at the end of the trace
  double fit_r2 = 0.0;          // log L_S vs t on the post-T4 window
  double fit_slope = 0.0;
  std::string evidence;
};

ConvergenceVerdict verify_convergence(const TraceAnalysis& trace, double epsilon,
                                      const PredictedTimes& predicted);

struct GeneralizationVerdict {
  Verdict verdict = Verdict::fail;
  double logistic = 0.0;
  double zero_one = 0.0;
  int n_test = 0;
  std::string evidence;
};

GeneralizationVerdict verify_generalization(const Params& params_final, const DataConfig& config,
                                            int n_test = 500, uint64_t seed = 0);

struct AttentionSparsityVerdict {
  Verdict verdict = Verdict::fail;
  double t_sparse = kAbsent;  // first t with max(s11, s21) below threshold
  double best_max = 1.0;      // smallest max(s11, s21) attained
  std::string evidence;
};

AttentionSparsityVerdict verify_attention_sparsity(const TraceAnalysis& trace,
                                                   const TheoryConstants& constants = {});

}  // namespace signdyn
