#include "flowtrace/fixtures.hpp"

#include <cmath>

namespace flowtrace::fixtures {

namespace {

Mat random_proj(int rows, int cols, std::uint64_t seed) {
  Rng rng = Rng::stream(seed, {0xA11F});
  Mat m(rows, cols);
  for (Eigen::Index j = 0; j < m.cols(); ++j)
    for (Eigen::Index i = 0; i < m.rows(); ++i) m(i, j) = rng.normal();
  return m;
}

Vec unit_weight(int len, int idx, double scale) {
  Vec w = Vec::Zero(len);
  w[idx] = scale;
  return w;
}

}  // namespace

Vec linear_ode_terminal(const Vec& rate, const Vec& target, const Vec& x1, int steps) {
  const double dt = 1.0 / steps;
  Vec factor = (1.0 - rate.array() * dt).pow(steps);
  return target.array() + factor.array() * (x1 - target).array();
}

void linear_sde_moments(const Vec& rate, const Vec& target, const flow::NoiseSchedule& sched,
                        Vec& mean, Vec& var) {
  sched.validate();
  const double dt = sched.dt();
  mean = Vec::Zero(rate.size());
  var = Vec::Ones(rate.size());
  for (int k = 1; k <= sched.steps; ++k) {
    const double s = sched.sigma(k);
    Vec contraction = 1.0 - rate.array() * dt;
    mean = contraction.cwiseProduct(mean) + rate.cwiseProduct(target) * dt;
    var = contraction.cwiseAbs2().cwiseProduct(var).array() + s * s;
  }
}

Vec linear_kick_coeff(const Vec& rate, int steps, const std::vector<int>& kick_steps,
                      double scale) {
  const double dt = 1.0 / steps;
  Vec coeff = Vec::Zero(rate.size());
  for (int i : kick_steps) {
    if (i < 1 || i > steps) throw contract_error("kick step out of range");
    coeff.array() += (1.0 - rate.array() * dt).pow(steps - i);
  }
  return scale * coeff;
}

Vec MarginalPreservingField::velocity(const Vec& x, double t, const Vec&) const {
  const double s = 1.0 - t;
  // probability-flow drift plus the score correction that keeps the per-step
  // Gaussian marginals on the noiseless flow's law
  Vec vs = (-2.0 * rate.array() * s).exp();
  Vec mu = target.array() * (1.0 - (-rate.array() * s).exp());
  const double half_s2 = 0.5 * sigma_base * sigma_base;
  return rate.cwiseProduct(x - target).array() + half_s2 * (x - mu).array() / vs.array();
}

void MarginalPreservingField::flow_marginal(double t, Vec& mean, Vec& var) const {
  const double s = 1.0 - t;
  mean = target.array() * (1.0 - (-rate.array() * s).exp());
  var = (-2.0 * rate.array() * s).exp();
}

WindowRecorderField::WindowRecorderField(int feed_lo, int feed_hi, int T_ref, int cond_dim)
    : cond(cond_dim) {
  if (feed_lo < 1 || feed_hi < feed_lo || feed_hi >= T_ref)
    throw config_error("feed window must fit inside the schedule with room for pickup");
  // a kick landing after step i is read while the window is open at a later
  // step's evaluation time; open the window for exactly the steps that read
  // kicks from [feed_lo, feed_hi], with half-step slack at the lower edge
  t_hi = 1.0 - static_cast<double>(feed_lo) / T_ref;
  t_lo = 1.0 - (feed_hi + 0.5) / T_ref;
}

Vec WindowRecorderField::velocity(const Vec& x, double t, const Vec&) const {
  Vec v(3);
  v[0] = kappa * x[0];
  v[1] = window_open(t) ? -gain * x[0] : 0.0;
  v[2] = bystander_rate * x[2];
  return v;
}

scorer::ScorerConfig window_recorder_scorer(int cond_dim) {
  scorer::ScorerConfig cfg;
  cfg.task = scorer::TaskKind::raw;
  cfg.sample_dim = 3;
  cfg.cond_dim = cond_dim;
  const int f = scorer::feature_dim(cfg.task, cfg.sample_dim);
  cfg.dims = {
      {"rec_rise", scorer::SensTag::early, unit_weight(f, 1, 1.2), 0.0, 1.0},
      {"rec_fall", scorer::SensTag::early, unit_weight(f, 1, -1.0), 0.0, 1.2},
      {"rec_peak", scorer::SensTag::early, unit_weight(f, 1, 0.8), 0.0, 2.0},
      {"rec_dip", scorer::SensTag::early, unit_weight(f, 1, -0.6), 0.0, 0.8},
  };
  cfg.align_proj = random_proj(cond_dim, 3, 0x77DE11);
  cfg.w_align = 0.2;
  cfg.agg = scorer::Aggregator::mean;
  cfg.null_sample = Vec::Zero(3);
  scorer::finalize(cfg);
  return cfg;
}

DualRecorderField::DualRecorderField(int cond_dim) : cond(cond_dim) {
  // early recorder reads steps 3..14 of a 40-step schedule, late reads 27..38
  early_hi = 1.0 - 2.0 / 40.0;
  early_lo = 1.0 - 13.5 / 40.0;
  late_hi = 1.0 - 26.0 / 40.0;
  late_lo = 1.0 - 37.5 / 40.0;
}

Vec DualRecorderField::velocity(const Vec& x, double t, const Vec&) const {
  Vec v(3);
  v[0] = kappa * x[0];
  v[1] = (t > early_lo && t <= early_hi) ? -gain_early * x[0] : 0.0;
  v[2] = (t > late_lo && t <= late_hi) ? -gain_late * x[0] : 0.0;
  return v;
}

scorer::ScorerConfig dual_recorder_scorer(int cond_dim) {
  scorer::ScorerConfig cfg;
  cfg.task = scorer::TaskKind::raw;
  cfg.sample_dim = 3;
  cfg.cond_dim = cond_dim;
  const int f = scorer::feature_dim(cfg.task, cfg.sample_dim);
  cfg.dims = {
      {"early_main", scorer::SensTag::early, unit_weight(f, 1, 1.0), 0.0, 1.0},
      {"early_aux", scorer::SensTag::early, unit_weight(f, 1, 0.7), 0.0, 1.5},
      {"late_main", scorer::SensTag::late, unit_weight(f, 2, 1.0), 0.0, 1.0},
      {"late_aux", scorer::SensTag::late, unit_weight(f, 2, 0.7), 0.0, 1.5},
  };
  cfg.align_proj = random_proj(cond_dim, 3, 0x77DE22);
  cfg.w_align = 0.2;
  cfg.agg = scorer::Aggregator::mean;
  cfg.null_sample = Vec::Zero(3);
  scorer::finalize(cfg);
  return cfg;
}

}  // namespace flowtrace::fixtures
