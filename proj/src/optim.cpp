#include "signdyn/optim.hpp"

#include <algorithm>
#include <cmath>
#include <sstream>

namespace signdyn {

std::string to_string(OptimizerKind kind) {
  switch (kind) {
    case OptimizerKind::signgd: return "signgd";
    case OptimizerKind::gd: return "gd";
    case OptimizerKind::gd_momentum: return "gd_momentum";
    case OptimizerKind::adam: return "adam";
  }
  return "?";
}

OptimizerKind optimizer_kind_from_string(const std::string& name) {
  if (name == "signgd") return OptimizerKind::signgd;
  if (name == "gd") return OptimizerKind::gd;
  if (name == "gd_momentum") return OptimizerKind::gd_momentum;
  if (name == "adam") return OptimizerKind::adam;
  throw config_error("unknown optimizer: " + name);
}

void OptimizerSpec::validate() const {
  if (!(eta > 0.0)) throw config_error("optimizer: eta must be > 0");
  if (beta1 < 0.0 || beta1 >= 1.0) throw config_error("optimizer: beta1 must be in [0, 1)");
  if (beta2 < 0.0 || beta2 >= 1.0) throw config_error("optimizer: beta2 must be in [0, 1)");
  if (epsilon < 0.0) throw config_error("optimizer: epsilon must be >= 0");
}

namespace {

void signgd_apply(Matrix& theta, const Matrix& g, double eta) {
  double* t = theta.data().data();
  const double* gp = g.data().data();
  for (size_t e = 0; e < theta.size(); ++e) t[e] -= eta * sgn(gp[e]);
}

void gd_apply(Matrix& theta, const Matrix& g, double eta) {
  double* t = theta.data().data();
  const double* gp = g.data().data();
  for (size_t e = 0; e < theta.size(); ++e) t[e] -= eta * gp[e];
}

// Heavy ball: m <- beta1 * m + g;  theta <- theta - eta * m.
void momentum_apply(Matrix& theta, Matrix& m, const Matrix& g, double eta, double beta1) {
  double* t = theta.data().data();
  double* mp = m.data().data();
  const double* gp = g.data().data();
  for (size_t e = 0; e < theta.size(); ++e) {
    mp[e] = beta1 * mp[e] + gp[e];
    t[e] -= eta * mp[e];
  }
}

void adam_apply(Matrix& theta, Matrix& m, Matrix& v, const Matrix& g, const OptimizerSpec& spec,
                long t_step) {
  const double bc1 = spec.bias_correction ? 1.0 - std::pow(spec.beta1, t_step) : 1.0;
  const double bc2 = spec.bias_correction ? 1.0 - std::pow(spec.beta2, t_step) : 1.0;
  double* tp = theta.data().data();
  double* mp = m.data().data();
  double* vp = v.data().data();
  const double* gp = g.data().data();
  for (size_t e = 0; e < theta.size(); ++e) {
    mp[e] = spec.beta1 * mp[e] + (1.0 - spec.beta1) * gp[e];
    vp[e] = spec.beta2 * vp[e] + (1.0 - spec.beta2) * gp[e] * gp[e];
    const double m_hat = mp[e] / bc1;
    const double v_hat = vp[e] / bc2;
    const double denom = std::sqrt(v_hat) + spec.epsilon;
    if (denom > 0.0) tp[e] -= spec.eta * m_hat / denom;
  }
}

void adam_apply_vec(std::vector<double>& theta, std::vector<double>& m, std::vector<double>& v,
                    const std::vector<double>& g, const OptimizerSpec& spec, long t_step) {
  const double bc1 = spec.bias_correction ? 1.0 - std::pow(spec.beta1, t_step) : 1.0;
  const double bc2 = spec.bias_correction ? 1.0 - std::pow(spec.beta2, t_step) : 1.0;
  for (size_t e = 0; e < theta.size(); ++e) {
    m[e] = spec.beta1 * m[e] + (1.0 - spec.beta1) * g[e];
    v[e] = spec.beta2 * v[e] + (1.0 - spec.beta2) * g[e] * g[e];
    const double denom = std::sqrt(v[e] / bc2) + spec.epsilon;
    if (denom > 0.0) theta[e] -= spec.eta * (m[e] / bc1) / denom;
  }
}

Params zero_like(const Params& p) {
  Params z;
  z.w_q = Matrix(p.w_q.rows(), p.w_q.cols());
  z.w_k = Matrix(p.w_k.rows(), p.w_k.cols());
  z.w_v_pos = Matrix(p.w_v_pos.rows(), p.w_v_pos.cols());
  z.w_v_neg = Matrix(p.w_v_neg.rows(), p.w_v_neg.cols());
  return z;
}

}  // namespace

Params signgd_step(const Params& params, const Grads& grads, double eta) {
  Params out = params;
  signgd_apply(out.w_q, grads.g_q, eta);
  signgd_apply(out.w_k, grads.g_k, eta);
  signgd_apply(out.w_v_pos, grads.g_v_pos, eta);
  signgd_apply(out.w_v_neg, grads.g_v_neg, eta);
  return out;
}

std::pair<Params, OptimizerState> gd_step(const Params& params, const Grads& grads, double eta,
                                          double beta1, OptimizerState state) {
  Params out = params;
  if (beta1 == 0.0 && !state.first_moment) {
    gd_apply(out.w_q, grads.g_q, eta);
    gd_apply(out.w_k, grads.g_k, eta);
    gd_apply(out.w_v_pos, grads.g_v_pos, eta);
    gd_apply(out.w_v_neg, grads.g_v_neg, eta);
  } else {
    if (!state.first_moment) state.first_moment = zero_like(params);
    momentum_apply(out.w_q, state.first_moment->w_q, grads.g_q, eta, beta1);
    momentum_apply(out.w_k, state.first_moment->w_k, grads.g_k, eta, beta1);
    momentum_apply(out.w_v_pos, state.first_moment->w_v_pos, grads.g_v_pos, eta, beta1);
    momentum_apply(out.w_v_neg, state.first_moment->w_v_neg, grads.g_v_neg, eta, beta1);
  }
  state.step_count += 1;
  return {std::move(out), std::move(state)};
}

std::pair<Params, OptimizerState> adam_step(const Params& params, const Grads& grads,
                                            const OptimizerSpec& spec, OptimizerState state) {
  Params out = params;
  if (!state.first_moment) state.first_moment = zero_like(params);
  if (!state.second_moment) state.second_moment = zero_like(params);
  const long t_step = state.step_count + 1;
  adam_apply(out.w_q, state.first_moment->w_q, state.second_moment->w_q, grads.g_q, spec, t_step);
  adam_apply(out.w_k, state.first_moment->w_k, state.second_moment->w_k, grads.g_k, spec, t_step);
  adam_apply(out.w_v_pos, state.first_moment->w_v_pos, state.second_moment->w_v_pos,
             grads.g_v_pos, spec, t_step);
  adam_apply(out.w_v_neg, state.first_moment->w_v_neg, state.second_moment->w_v_neg,
             grads.g_v_neg, spec, t_step);
  state.step_count = t_step;
  return {std::move(out), std::move(state)};
}

void apply_step(Params& params, Head& head, const Grads& grads, const OptimizerSpec& spec,
                OptimizerState& state, bool joint_head) {
  const long t_step = state.step_count + 1;
  switch (spec.kind) {
    case OptimizerKind::signgd:
      signgd_apply(params.w_q, grads.g_q, spec.eta);
      signgd_apply(params.w_k, grads.g_k, spec.eta);
      signgd_apply(params.w_v_pos, grads.g_v_pos, spec.eta);
      signgd_apply(params.w_v_neg, grads.g_v_neg, spec.eta);
      if (joint_head) {
        for (size_t r = 0; r < head.pos.size(); ++r)
          head.pos[r] -= spec.eta * sgn(grads.g_head_pos[r]);
        for (size_t r = 0; r < head.neg.size(); ++r)
          head.neg[r] -= spec.eta * sgn(grads.g_head_neg[r]);
      }
      break;
    case OptimizerKind::gd:
      gd_apply(params.w_q, grads.g_q, spec.eta);
      gd_apply(params.w_k, grads.g_k, spec.eta);
      gd_apply(params.w_v_pos, grads.g_v_pos, spec.eta);
      gd_apply(params.w_v_neg, grads.g_v_neg, spec.eta);
      if (joint_head) {
        for (size_t r = 0; r < head.pos.size(); ++r) head.pos[r] -= spec.eta * grads.g_head_pos[r];
        for (size_t r = 0; r < head.neg.size(); ++r) head.neg[r] -= spec.eta * grads.g_head_neg[r];
      }
      break;
    case OptimizerKind::gd_momentum: {
      if (!state.first_moment) state.first_moment = zero_like(params);
      momentum_apply(params.w_q, state.first_moment->w_q, grads.g_q, spec.eta, spec.beta1);
      momentum_apply(params.w_k, state.first_moment->w_k, grads.g_k, spec.eta, spec.beta1);
      momentum_apply(params.w_v_pos, state.first_moment->w_v_pos, grads.g_v_pos, spec.eta,
                     spec.beta1);
      momentum_apply(params.w_v_neg, state.first_moment->w_v_neg, grads.g_v_neg, spec.eta,
                     spec.beta1);
      if (joint_head) {
        if (state.head_m_pos.empty()) {
          state.head_m_pos.assign(head.pos.size(), 0.0);
          state.head_m_neg.assign(head.neg.size(), 0.0);
        }
        for (size_t r = 0; r < head.pos.size(); ++r) {
          state.head_m_pos[r] = spec.beta1 * state.head_m_pos[r] + grads.g_head_pos[r];
          head.pos[r] -= spec.eta * state.head_m_pos[r];
          state.head_m_neg[r] = spec.beta1 * state.head_m_neg[r] + grads.g_head_neg[r];
          head.neg[r] -= spec.eta * state.head_m_neg[r];
        }
      }
      break;
    }
    case OptimizerKind::adam: {
      if (!state.first_moment) state.first_moment = zero_like(params);
      if (!state.second_moment) state.second_moment = zero_like(params);
      adam_apply(params.w_q, state.first_moment->w_q, state.second_moment->w_q, grads.g_q, spec,
                 t_step);
      adam_apply(params.w_k, state.first_moment->w_k, state.second_moment->w_k, grads.g_k, spec,
                 t_step);
      adam_apply(params.w_v_pos, state.first_moment->w_v_pos, state.second_moment->w_v_pos,
                 grads.g_v_pos, spec, t_step);
      adam_apply(params.w_v_neg, state.first_moment->w_v_neg, state.second_moment->w_v_neg,
                 grads.g_v_neg, spec, t_step);
      if (joint_head) {
        if (state.head_m_pos.empty()) {
          state.head_m_pos.assign(head.pos.size(), 0.0);
          state.head_m_neg.assign(head.neg.size(), 0.0);
          state.head_v_pos.assign(head.pos.size(), 0.0);
          state.head_v_neg.assign(head.neg.size(), 0.0);
        }
        adam_apply_vec(head.pos, state.head_m_pos, state.head_v_pos, grads.g_head_pos, spec,
                       t_step);
        adam_apply_vec(head.neg, state.head_m_neg, state.head_v_neg, grads.g_head_neg, spec,
                       t_step);
      }
      break;
    }
  }
  state.step_count = t_step;
}

bool ProbeSchedule::probe_due(long t) const {
  for (const CadenceSegment& seg : segments) {
    if (seg.until < 0 || t <= seg.until) {
      return seg.cadence <= 1 || (t % seg.cadence == 0);
    }
  }
  return false;
}

bool ProbeSchedule::test_loss_due(long t) const {
  return test_loss_every > 0 && (t % test_loss_every == 0);
}

ProbeSchedule parse_cadence(const std::string& text) {
  ProbeSchedule schedule;
  schedule.segments.clear();
  std::stringstream ss(text);
  std::string part;
  while (std::getline(ss, part, ',')) {
    if (part.empty()) continue;
    CadenceSegment seg;
    const size_t colon = part.find(':');
    try {
      if (colon == std::string::npos) {
        seg.cadence = std::stoi(part);
        seg.until = -1;
      } else {
        seg.cadence = std::stoi(part.substr(0, colon));
        seg.until = std::stol(part.substr(colon + 1));
      }
    } catch (const std::exception&) {
      throw config_error("bad cadence segment '" + part + "' (expected CADENCE[:UNTIL])");
    }
    if (seg.cadence < 1) throw config_error("cadence must be >= 1");
    schedule.segments.push_back(seg);
  }
  if (schedule.segments.empty()) throw config_error("empty cadence schedule");
  return schedule;
}

std::string cadence_to_string(const ProbeSchedule& schedule) {
  std::string out;
  for (size_t k = 0; k < schedule.segments.size(); ++k) {
    if (k) out += ",";
    out += std::to_string(schedule.segments[k].cadence);
    if (schedule.segments[k].until >= 0) out += ":" + std::to_string(schedule.segments[k].until);
  }
  return out;
}

Trace run_training(const Params& init, const Dataset& dataset, const TrainOptions& options) {
  options.spec.validate();
  if (options.iters < 0) throw config_error("run_training: iters must be >= 0");
  Params params = init;
  Head head = Head::fixed(params.w_v_pos.rows());
  OptimizerState state;
  Trace trace;
  trace.spec = options.spec;
  trace.iters = options.iters;

  const uint64_t test_seed =
      options.test_seed ? options.test_seed : dataset.config.seed;

  auto emit = [&](long t, const std::vector<ForwardCache>& caches) {
    ProbeSnapshot snap = snapshot(params, dataset, t * options.time_scale, caches);
    if (options.schedule.test_loss_due(t) || t == options.iters) {
      const TestLoss tl = test_loss(params, dataset.config, options.schedule.n_test, test_seed);
      snap.test_loss = tl.logistic;
      snap.test_zero_one = tl.zero_one;
    }
    trace.snapshots.push_back(std::move(snap));
  };

  for (long t = 0; t < options.iters; ++t) {
    const std::vector<ForwardCache> caches = forward_all(params, head, dataset);
    for (const ForwardCache& c : caches)
      if (!std::isfinite(c.loss))
        throw numeric_error("non-finite training loss at iteration " + std::to_string(t));
    if (options.schedule.probe_due(t)) emit(t, caches);
    const Grads grads = compute_grads(params, head, dataset, caches, options.joint_head);
    const std::string bad = grads.first_non_finite();
    if (!bad.empty())
      throw numeric_error("non-finite gradient tensor " + bad + " at iteration " +
                          std::to_string(t));
    apply_step(params, head, grads, options.spec, state, options.joint_head);
  }
  // Final snapshot at t = iters (the only one when iters = 0).
  {
    const std::vector<ForwardCache> caches = forward_all(params, head, dataset);
    for (const ForwardCache& c : caches)
      if (!std::isfinite(c.loss))
        throw numeric_error("non-finite training loss at iteration " +
                            std::to_string(options.iters));
    if (!params.all_finite())
      throw numeric_error("non-finite parameters at iteration " + std::to_string(options.iters));
    emit(options.iters, caches);
  }
  trace.final_params = std::move(params);
  trace.final_head = std::move(head);
  return trace;
}

}  // namespace signdyn
