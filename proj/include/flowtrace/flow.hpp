#ifndef FLOWTRACE_FLOW_HPP
#define FLOWTRACE_FLOW_HPP

#include "flowtrace/common.hpp"
#include "flowtrace/nn.hpp"

#include <memory>
#include <optional>

namespace flowtrace::flow {

// flow time runs from t=1 (pure noise) down to t=0 (sample); a schedule with
// T steps walks t across [1,0] in increments of 1/T.

struct SampleState {
  Vec x;
  double t = 1.0;
  Vec c;
};

enum class SigmaMode { constant, sqrt_dt };

struct NoiseSchedule {
  int steps = 20;
  double sigma_base = 1.0;
  SigmaMode mode = SigmaMode::sqrt_dt;

  double dt() const { return 1.0 / steps; }
  // step is 1-based
  double sigma(int step) const;
  double time_before(int step) const { return 1.0 - (step - 1) * dt(); }
  void validate() const;
};

// velocity model consumed by the sampler. gate in [0,1] scales the trainable
// additive path; gate == 0 must reproduce the frozen reference exactly.
class Policy {
 public:
  virtual ~Policy() = default;
  virtual int sample_dim() const = 0;
  virtual int cond_dim() const = 0;
  virtual Vec velocity(const Vec& x, double t, const Vec& c, double gate) const = 0;

  virtual long trainable_count() const { return 0; }
  virtual Vec trainable_params() const { return Vec(0); }
  virtual void set_trainable_params(const Vec&) {
    throw contract_error("policy has no trainable parameters");
  }
  // gradient of dot(upstream, velocity(x,t,c,gate)) with respect to the
  // trainable parameters, flattened in trainable_params() order
  virtual Vec trainable_vjp(const Vec&, double, const Vec&, double, const Vec&) const {
    return Vec(0);
  }
};

// plain analytic velocity field (used for hand-built environments)
class VelocityField {
 public:
  virtual ~VelocityField() = default;
  virtual int sample_dim() const = 0;
  virtual int cond_dim() const = 0;
  virtual Vec velocity(const Vec& x, double t, const Vec& c) const = 0;
};

// network policy: base MLP with an optional low-rank adapter. the adapter is
// the only trainable part; without one the policy is frozen.
class NeuralPolicy : public Policy {
 public:
  nn::NetworkParams net;
  std::optional<nn::LowRankAdapter> adapter;

  int sample_dim() const override { return net.x_dim; }
  int cond_dim() const override { return net.c_dim; }
  Vec velocity(const Vec& x, double t, const Vec& c, double gate) const override;
  long trainable_count() const override;
  Vec trainable_params() const override;
  void set_trainable_params(const Vec& p) override;
  Vec trainable_vjp(const Vec& x, double t, const Vec& c, double gate,
                    const Vec& upstream) const override;
};

// analytic base field plus a gated additive network; the delta network is
// fully trainable. used for planted environments that still need tuning.
class FieldPolicy : public Policy {
 public:
  std::shared_ptr<const VelocityField> base;
  std::optional<nn::NetworkParams> delta;

  int sample_dim() const override { return base->sample_dim(); }
  int cond_dim() const override { return base->cond_dim(); }
  Vec velocity(const Vec& x, double t, const Vec& c, double gate) const override;
  long trainable_count() const override;
  Vec trainable_params() const override;
  void set_trainable_params(const Vec& p) override;
  Vec trainable_vjp(const Vec& x, double t, const Vec& c, double gate,
                    const Vec& upstream) const override;
};

struct TrajStep {
  Vec x_before;
  double t_before = 1.0;
  Vec v;        // velocity actually applied (zero vector when the update was skipped)
  double sigma = 0.0;
  Vec eps;      // empty in deterministic mode
  double gate = 1.0;
  bool skipped = false;
  Vec injected;  // analysis kick added to the state after the update; empty if none
  Vec x_after;
};

struct Trajectory {
  Vec c;
  NoiseSchedule sched;
  bool stochastic = true;
  bool kicks_velocity_additive = false;
  std::vector<TrajStep> steps;

  const Vec& terminal() const {
    if (steps.empty()) throw contract_error("empty trajectory");
    return steps.back().x_after;
  }
};

enum class InterventionVariant { gate_adapter, skip_update };

struct InterventionPlan {
  std::vector<int> steps;  // 1-based, strictly increasing
  InterventionVariant variant = InterventionVariant::gate_adapter;

  void validate(int T) const;
  bool covers(int step) const;
  static InterventionPlan window(int lo, int hi, InterventionVariant v);
};

// additive analysis perturbation: kicks[i] = (step, vector added at that step).
// state-additive kicks land after the full transition; velocity-additive kicks
// are added to the velocity before it (flag-selected variant).
struct Injection {
  std::vector<std::pair<int, Vec>> kicks;  // sorted by step, 1-based
  bool velocity_additive = false;

  const Vec* kick_at(int step) const;
};

// noise supply for a rollout; pre-drawn noise enables replay, antithetic
// pairing and cross-resolution coupling
class NoiseSource {
 public:
  virtual ~NoiseSource() = default;
  virtual Vec initial(Eigen::Index n) = 0;
  virtual Vec step_eps(int step, Eigen::Index n) = 0;
};

class RngNoise : public NoiseSource {
 public:
  explicit RngNoise(Rng rng) : rng_(rng) {}
  Vec initial(Eigen::Index n) override { return rng_.normal_vec(n); }
  Vec step_eps(int, Eigen::Index n) override { return rng_.normal_vec(n); }

 private:
  Rng rng_;
};

struct FixedNoise : public NoiseSource {
  Vec x1;
  std::vector<Vec> eps;  // eps[k] used at step k+1

  Vec initial(Eigen::Index n) override;
  Vec step_eps(int step, Eigen::Index n) override;
};

FixedNoise draw_noise(Rng& rng, Eigen::Index n, int steps);
// merge adjacent noise pairs into one coarse draw per Brownian consistency:
// eps_c[j] = (eps[2j] + eps[2j+1]) / sqrt(2)
FixedNoise coarsen_noise(const FixedNoise& fine);

struct RolloutOptions {
  bool stochastic = true;
  const InterventionPlan* intervention = nullptr;
  const Injection* injection = nullptr;
  double gate = -1.0;  // negative: use the policy default of 1
};

SampleState ode_step(const SampleState& s, const Vec& v, double dt);
SampleState mps_step(const SampleState& s, const Vec& v, double sigma, const Vec& eps, double dt);

Trajectory rollout(const Policy& policy, const Vec& c, const NoiseSchedule& sched,
                   NoiseSource& noise, const RolloutOptions& opts = {});

// log density of action under N(mu, sigma^2 I)
double gaussian_logprob(const Vec& action, const Vec& mu, double sigma);

// per-step policy mean mu = x - v(x,t,c)*dt
Vec policy_mean(const Policy& policy, const Vec& x, double t, const Vec& c, double gate, double dt);

// re-run a recorded trajectory against a policy using the stored noise,
// interventions and kicks; bit-identical when the policy matches
Trajectory replay(const Policy& policy, const Trajectory& traj);

}  // namespace flowtrace::flow

#endif
