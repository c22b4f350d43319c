#include "flowtrace/flow.hpp"

#include <algorithm>
#include <cmath>

namespace flowtrace::flow {

double NoiseSchedule::sigma(int step) const {
  if (step < 1 || step > steps) {
    throw contract_error("sigma queried at step " + std::to_string(step) + " of " +
                         std::to_string(steps));
  }
  switch (mode) {
    case SigmaMode::constant:
      return sigma_base;
    case SigmaMode::sqrt_dt:
      return sigma_base * std::sqrt(dt());
  }
  return sigma_base;
}

void NoiseSchedule::validate() const {
  if (steps < 1) throw config_error("schedule needs at least one step");
  if (!(sigma_base >= 0.0) || !std::isfinite(sigma_base)) {
    throw config_error("sigma_base must be finite and non-negative");
  }
}

Vec NeuralPolicy::velocity(const Vec& x, double t, const Vec& c, double gate) const {
  const nn::LowRankAdapter* ad = adapter ? &*adapter : nullptr;
  return nn::forward(net, ad, gate, x, t, c);
}

long NeuralPolicy::trainable_count() const {
  return adapter ? nn::param_count(*adapter) : 0;
}

Vec NeuralPolicy::trainable_params() const {
  return adapter ? nn::pack(*adapter) : Vec(0);
}

void NeuralPolicy::set_trainable_params(const Vec& p) {
  if (!adapter) throw contract_error("policy has no adapter to set");
  nn::unpack(p, *adapter);
}

Vec NeuralPolicy::trainable_vjp(const Vec& x, double t, const Vec& c, double gate,
                                const Vec& upstream) const {
  if (!adapter) return Vec(0);
  nn::ForwardTrace trace;
  nn::forward(net, &*adapter, gate, x, t, c, &trace);
  nn::Gradients g = nn::backward(net, &*adapter, gate, trace, upstream, false);
  return nn::pack_adapter_grads(g);
}

Vec FieldPolicy::velocity(const Vec& x, double t, const Vec& c, double gate) const {
  Vec v = base->velocity(x, t, c);
  if (delta && gate != 0.0) {
    v.noalias() += gate * nn::forward(*delta, nullptr, 0.0, x, t, c);
  }
  return v;
}

long FieldPolicy::trainable_count() const {
  return delta ? nn::param_count(*delta) : 0;
}

Vec FieldPolicy::trainable_params() const {
  return delta ? nn::pack(*delta) : Vec(0);
}

void FieldPolicy::set_trainable_params(const Vec& p) {
  if (!delta) throw contract_error("policy has no delta network to set");
  nn::unpack(p, *delta);
}

Vec FieldPolicy::trainable_vjp(const Vec& x, double t, const Vec& c, double gate,
                               const Vec& upstream) const {
  if (!delta) return Vec(0);
  if (gate == 0.0) return Vec::Zero(nn::param_count(*delta));
  nn::ForwardTrace trace;
  nn::forward(*delta, nullptr, 0.0, x, t, c, &trace);
  nn::Gradients g = nn::backward(*delta, nullptr, 0.0, trace, gate * upstream, true);
  return nn::pack_base_grads(g);
}

void InterventionPlan::validate(int T) const {
  int prev = 0;
  for (int s : steps) {
    if (s < 1 || s > T) {
      throw config_error("intervention step " + std::to_string(s) + " outside [1," +
                         std::to_string(T) + "]");
    }
    if (s <= prev) throw config_error("intervention steps must be strictly increasing");
    prev = s;
  }
}

bool InterventionPlan::covers(int step) const {
  return std::binary_search(steps.begin(), steps.end(), step);
}

InterventionPlan InterventionPlan::window(int lo, int hi, InterventionVariant v) {
  if (lo < 1 || hi < lo) throw config_error("bad intervention window");
  InterventionPlan p;
  p.variant = v;
  p.steps.reserve(hi - lo + 1);
  for (int s = lo; s <= hi; ++s) p.steps.push_back(s);
  return p;
}

const Vec* Injection::kick_at(int step) const {
  auto it = std::lower_bound(kicks.begin(), kicks.end(), step,
                             [](const auto& kv, int s) { return kv.first < s; });
  if (it != kicks.end() && it->first == step) return &it->second;
  return nullptr;
}

Vec FixedNoise::initial(Eigen::Index n) {
  if (x1.size() != n) throw contract_error("fixed noise has wrong initial size");
  return x1;
}

Vec FixedNoise::step_eps(int step, Eigen::Index n) {
  if (step < 1 || static_cast<std::size_t>(step) > eps.size()) {
    throw contract_error("fixed noise exhausted at step " + std::to_string(step));
  }
  if (eps[step - 1].size() != n) throw contract_error("fixed noise has wrong step size");
  return eps[step - 1];
}

FixedNoise draw_noise(Rng& rng, Eigen::Index n, int steps) {
  FixedNoise fn;
  fn.x1 = rng.normal_vec(n);
  fn.eps.reserve(steps);
  for (int s = 0; s < steps; ++s) fn.eps.push_back(rng.normal_vec(n));
  return fn;
}

FixedNoise coarsen_noise(const FixedNoise& fine) {
  if (fine.eps.size() % 2 != 0) throw contract_error("coarsen_noise needs an even step count");
  FixedNoise c;
  c.x1 = fine.x1;
  c.eps.reserve(fine.eps.size() / 2);
  const double inv = 1.0 / std::sqrt(2.0);
  for (std::size_t j = 0; j + 1 < fine.eps.size(); j += 2) {
    c.eps.push_back((fine.eps[j] + fine.eps[j + 1]) * inv);
  }
  return c;
}

SampleState ode_step(const SampleState& s, const Vec& v, double dt) {
  if (dt <= 0.0) throw contract_error("ode_step needs dt > 0");
  if (v.size() != s.x.size()) throw contract_error("ode_step dimension mismatch");
  if (s.t < dt - 1e-12) throw contract_error("ode_step would cross t = 0");
  SampleState out;
  out.x = s.x - v * dt;
  out.t = s.t - dt;
  out.c = s.c;
  return out;
}

SampleState mps_step(const SampleState& s, const Vec& v, double sigma, const Vec& eps, double dt) {
  if (dt <= 0.0) throw contract_error("mps_step needs dt > 0");
  if (sigma < 0.0) throw contract_error("mps_step needs sigma >= 0");
  if (v.size() != s.x.size() || eps.size() != s.x.size()) {
    throw contract_error("mps_step dimension mismatch");
  }
  if (s.t < dt - 1e-12) throw contract_error("mps_step would cross t = 0");
  SampleState out;
  out.x = s.x - v * dt + sigma * eps;
  out.t = s.t - dt;
  out.c = s.c;
  return out;
}

Trajectory rollout(const Policy& policy, const Vec& c, const NoiseSchedule& sched,
                   NoiseSource& noise, const RolloutOptions& opts) {
  sched.validate();
  if (c.size() != policy.cond_dim()) {
    throw contract_error("conditioning size " + std::to_string(c.size()) +
                         " does not match policy (" + std::to_string(policy.cond_dim()) + ")");
  }
  if (opts.intervention) opts.intervention->validate(sched.steps);

  const Eigen::Index n = policy.sample_dim();
  const double dt = sched.dt();
  const double base_gate = opts.gate < 0.0 ? 1.0 : opts.gate;

  Trajectory traj;
  traj.c = c;
  traj.sched = sched;
  traj.stochastic = opts.stochastic;
  traj.kicks_velocity_additive = opts.injection && opts.injection->velocity_additive;
  traj.steps.reserve(sched.steps);

  Vec x = noise.initial(n);
  double t = 1.0;
  for (int step = 1; step <= sched.steps; ++step) {
    TrajStep ts;
    ts.x_before = x;
    ts.t_before = t;

    double gate = base_gate;
    bool skip = false;
    if (opts.intervention && opts.intervention->covers(step)) {
      if (opts.intervention->variant == InterventionVariant::gate_adapter) {
        gate = 0.0;
      } else {
        skip = true;
      }
    }
    ts.gate = gate;
    ts.skipped = skip;

    Vec v = skip ? Vec::Zero(n) : policy.velocity(x, t, c, gate);
    const Vec* kick = opts.injection ? opts.injection->kick_at(step) : nullptr;
    if (kick && opts.injection->velocity_additive && !skip) v += *kick;
    ts.v = v;

    double sig = opts.stochastic ? sched.sigma(step) : 0.0;
    ts.sigma = sig;
    Vec x_next = x - v * dt;
    if (opts.stochastic) {
      ts.eps = noise.step_eps(step, n);
      x_next += sig * ts.eps;
    }
    if (kick && !opts.injection->velocity_additive) {
      x_next += *kick;
      ts.injected = *kick;
    } else if (kick) {
      ts.injected = *kick;
    }
    if (!x_next.allFinite()) {
      throw numeric_error("non-finite state after step " + std::to_string(step));
    }
    ts.x_after = x_next;
    traj.steps.push_back(std::move(ts));
    x = x_next;
    t -= dt;
  }
  return traj;
}

double gaussian_logprob(const Vec& action, const Vec& mu, double sigma) {
  if (sigma <= 0.0) throw contract_error("gaussian_logprob needs sigma > 0");
  if (action.size() != mu.size()) throw contract_error("gaussian_logprob dimension mismatch");
  const double n = static_cast<double>(action.size());
  const double q = (action - mu).squaredNorm();
  return -0.5 * n * std::log(2.0 * M_PI * sigma * sigma) - q / (2.0 * sigma * sigma);
}

Vec policy_mean(const Policy& policy, const Vec& x, double t, const Vec& c, double gate,
                double dt) {
  return x - policy.velocity(x, t, c, gate) * dt;
}

Trajectory replay(const Policy& policy, const Trajectory& traj) {
  Trajectory out;
  out.c = traj.c;
  out.sched = traj.sched;
  out.stochastic = traj.stochastic;
  out.kicks_velocity_additive = traj.kicks_velocity_additive;
  out.steps.reserve(traj.steps.size());

  const double dt = traj.sched.dt();
  Vec x = traj.steps.empty() ? Vec(0) : traj.steps.front().x_before;
  double t = 1.0;
  for (std::size_t i = 0; i < traj.steps.size(); ++i) {
    const TrajStep& ref = traj.steps[i];
    TrajStep ts;
    ts.x_before = x;
    ts.t_before = t;
    ts.gate = ref.gate;
    ts.skipped = ref.skipped;
    Vec v = ref.skipped ? Vec::Zero(x.size())
                        : policy.velocity(x, t, traj.c, ref.gate);
    if (ref.injected.size() > 0 && traj.kicks_velocity_additive && !ref.skipped) {
      v += ref.injected;
    }
    ts.v = v;
    ts.sigma = ref.sigma;
    Vec x_next = x - v * dt;
    if (traj.stochastic) {
      ts.eps = ref.eps;
      x_next += ref.sigma * ref.eps;
    }
    if (ref.injected.size() > 0 && !traj.kicks_velocity_additive) {
      x_next += ref.injected;
    }
    ts.injected = ref.injected;
    ts.x_after = x_next;
    out.steps.push_back(std::move(ts));
    x = x_next;
    t -= dt;
  }
  return out;
}

}  // namespace flowtrace::flow
