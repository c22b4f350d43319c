#ifndef FLOWTRACE_FIXTURES_HPP
#define FLOWTRACE_FIXTURES_HPP

#include "flowtrace/common.hpp"
#include "flowtrace/flow.hpp"
#include "flowtrace/scorer.hpp"

#include <memory>

namespace flowtrace::fixtures {

// hand-built environments with known structure, used as oracles by the test
// suite and exposed as named tasks on the command line.

// v(x) = rate .* (x - target); conditioning is ignored
class LinearField : public flow::VelocityField {
 public:
  Vec rate;
  Vec target;
  int cond = 0;

  LinearField(Vec r, Vec tgt, int cond_dim) : rate(std::move(r)), target(std::move(tgt)), cond(cond_dim) {}
  int sample_dim() const override { return static_cast<int>(rate.size()); }
  int cond_dim() const override { return cond; }
  Vec velocity(const Vec& x, double, const Vec&) const override {
    return rate.cwiseProduct(x - target);
  }
};

// deterministic endpoint of Euler flow under LinearField from x1
Vec linear_ode_terminal(const Vec& rate, const Vec& target, const Vec& x1, int steps);

// exact per-dimension mean and variance of the stochastic sampler's terminal
// state under LinearField, from the linear moment recursion
void linear_sde_moments(const Vec& rate, const Vec& target, const flow::NoiseSchedule& sched,
                        Vec& mean, Vec& var);

// per-dimension propagation coefficient for state kicks injected after the
// listed steps (1-based) at resolution T: sum_i scale * prod_{j>i} (1 - a*dt)
Vec linear_kick_coeff(const Vec& rate, int steps, const std::vector<int>& kick_steps,
                      double scale);

// linear contraction toward a moving mean with the diffusion-compensating
// drift, so the stochastic sampler reproduces the noiseless flow marginals:
// target law N(m(1-e^-a), e^-2a) per dimension at t=0 when x1 ~ N(0,I)
class MarginalPreservingField : public flow::VelocityField {
 public:
  Vec rate;    // a, positive
  Vec target;  // m
  double sigma_base;  // must match the schedule (sqrt-dt mode)
  int cond = 0;

  MarginalPreservingField(Vec a, Vec m, double sb, int cond_dim)
      : rate(std::move(a)), target(std::move(m)), sigma_base(sb), cond(cond_dim) {}
  int sample_dim() const override { return static_cast<int>(rate.size()); }
  int cond_dim() const override { return cond; }
  Vec velocity(const Vec& x, double t, const Vec&) const override;

  void flow_marginal(double t, Vec& mean, Vec& var) const;  // law of the noiseless flow
};

// three coordinates [probe, recorder, bystander]. the probe forgets quickly,
// the recorder integrates the probe only while a time window is open, the
// bystander relaxes slowly. terminal scores that read the recorder respond to
// kicks delivered inside the feed window and to (almost) nothing else.
class WindowRecorderField : public flow::VelocityField {
 public:
  double kappa = 35.0;  // probe forgetting rate
  double gain = 400.0;  // recorder pickup rate while open
  double bystander_rate = 1.0;
  double t_lo = 0.0, t_hi = 0.0;  // window open for t in (t_lo, t_hi]
  int cond = 0;

  // feed window given as the kick steps [feed_lo, feed_hi] it should respond
  // to at reference resolution T_ref
  WindowRecorderField(int feed_lo, int feed_hi, int T_ref, int cond_dim);

  int sample_dim() const override { return 3; }
  int cond_dim() const override { return cond; }
  Vec velocity(const Vec& x, double t, const Vec&) const override;
  bool window_open(double t) const { return t > t_lo && t <= t_hi; }
};

// scorer over the window-recorder state: every dimension reads the recorder
// coordinate (names carry the slope sign)
scorer::ScorerConfig window_recorder_scorer(int cond_dim);

// three coordinates [probe, r_early, r_late] with two disjoint feed windows;
// the probe forgets fast enough that the channels stay independent
class DualRecorderField : public flow::VelocityField {
 public:
  double kappa = 15.0;
  double gain_early = 400.0;
  double gain_late = 400.0;
  double early_lo = 0.0, early_hi = 0.0;  // time window for the early recorder
  double late_lo = 0.0, late_hi = 0.0;
  int cond = 0;

  DualRecorderField(int cond_dim);

  int sample_dim() const override { return 3; }
  int cond_dim() const override { return cond; }
  Vec velocity(const Vec& x, double t, const Vec&) const override;
};

// scorer with early dimensions on r_early, late dimensions on r_late
scorer::ScorerConfig dual_recorder_scorer(int cond_dim);

}  // namespace flowtrace::fixtures

#endif
