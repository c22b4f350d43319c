#include "flowtrace/temporal.hpp"

#include <algorithm>
#include <cmath>

namespace flowtrace::temporal {

const char* mode_name(SenseMode m) {
  switch (m) {
    case SenseMode::signed_mean: return "signed";
    case SenseMode::mean_abs: return "mean_abs";
    case SenseMode::rms: return "rms";
  }
  return "?";
}

SenseMode mode_from_name(const std::string& s) {
  if (s == "signed") return SenseMode::signed_mean;
  if (s == "mean_abs") return SenseMode::mean_abs;
  if (s == "rms") return SenseMode::rms;
  throw config_error("unknown sensitivity mode '" + s + "'");
}

void AnalysisContext::validate() const {
  if (!policy) throw contract_error("analysis context without a policy");
  sched.validate();
  if (!score) throw contract_error("analysis context without a score function");
  if (score_dim <= 0) throw contract_error("score dimension must be positive");
  if (c.size() != policy->cond_dim()) throw contract_error("conditioning width mismatch");
  if (eta <= 0) throw config_error("kick strength must be positive");
  if (eta_relative && rms_profile.size() != sched.steps)
    throw config_error("relative kicks need a calibrated rms profile (run calibrate_rms)");
}

AnalysisContext make_context(const flow::Policy& policy, const Vec& c,
                             const flow::NoiseSchedule& sched, const scorer::ScorerConfig& scfg) {
  AnalysisContext ctx;
  ctx.policy = &policy;
  ctx.c = c;
  ctx.sched = sched;
  ctx.score = [c, scfg](const Vec& x) { return scorer::net_score(x, c, scfg); };
  ctx.composite_score = [c, scfg](const Vec& x) {
    return scorer::score_sample(x, c, scfg).composite;
  };
  ctx.score_dim = scfg.D();
  return ctx;
}

void calibrate_rms(AnalysisContext& ctx, int rollouts, std::uint64_t seed) {
  if (rollouts < 1) throw config_error("need at least one calibration rollout");
  const int T = ctx.sched.steps;
  const auto n = static_cast<Eigen::Index>(ctx.policy->sample_dim());
  Vec acc = Vec::Zero(T);
  flow::RolloutOptions opts;
  opts.stochastic = ctx.stochastic;
  opts.gate = ctx.gate;
  for (int i = 0; i < rollouts; ++i) {
    flow::RngNoise noise(Rng::stream(seed, {0x05, static_cast<std::uint64_t>(i)}));
    flow::Trajectory traj = flow::rollout(*ctx.policy, ctx.c, ctx.sched, noise, opts);
    for (int s = 0; s < T; ++s)
      acc[s] += traj.steps[static_cast<std::size_t>(s)].x_after.squaredNorm() /
                static_cast<double>(n);
  }
  ctx.rms_profile = (acc / static_cast<double>(rollouts)).cwiseSqrt();
}

std::vector<int> map_block(const std::vector<int>& block, int T_from, int T_to) {
  if (block.empty()) throw contract_error("empty step block");
  if (T_from < 1 || T_to < 1) throw contract_error("resolutions must be positive");
  std::vector<int> out;
  for (int j = 1; j <= T_to; ++j) {
    bool hit = false;
    for (int i : block) {
      if (i < 1 || i > T_from) throw contract_error("block step out of range");
      // positive-measure overlap of progressed-time intervals, exact integers
      long lo = std::max(static_cast<long>(i - 1) * T_to, static_cast<long>(j - 1) * T_from);
      long hi = std::min(static_cast<long>(i) * T_to, static_cast<long>(j) * T_from);
      if (hi > lo) {
        hit = true;
        break;
      }
    }
    if (hit) out.push_back(j);
  }
  return out;
}

namespace {

// eta multiplier for a kick after step `step` (1-based) of a T_level schedule,
// read off the analysis-resolution rms profile at the step's time midpoint
double kick_scale(const AnalysisContext& ctx, int step, int T_level) {
  if (!ctx.eta_relative) return 1.0;
  const int T = ctx.sched.steps;
  int idx = static_cast<int>(std::floor((step - 0.5) / T_level * T));  // 0-based analysis step
  idx = std::clamp(idx, 0, T - 1);
  return ctx.rms_profile[idx];
}

struct PairSetup {
  const std::vector<int>* block = nullptr;
  double mass_scale = 1.0;  // block mass correction across resolutions
  flow::NoiseSchedule sched;
};

// one antithetic pair at a given resolution; shares x1, step noise and z
// between the two branches. returns (score(plus) - score(minus)) / (2 eta).
Vec pair_stat(const AnalysisContext& ctx, const PairSetup& set, const flow::FixedNoise& noise,
              const Vec& z) {
  flow::Injection inj_p, inj_m;
  inj_p.velocity_additive = ctx.velocity_additive;
  inj_m.velocity_additive = ctx.velocity_additive;
  for (int s : *set.block) {
    Vec kick = (ctx.eta * set.mass_scale * kick_scale(ctx, s, set.sched.steps)) * z;
    inj_p.kicks.emplace_back(s, kick);
    inj_m.kicks.emplace_back(s, -kick);
  }
  flow::RolloutOptions opts;
  opts.stochastic = ctx.stochastic;
  opts.gate = ctx.gate;
  flow::FixedNoise n_p = noise, n_m = noise;
  opts.injection = &inj_p;
  flow::Trajectory tp = flow::rollout(*ctx.policy, ctx.c, set.sched, n_p, opts);
  opts.injection = &inj_m;
  flow::Trajectory tm = flow::rollout(*ctx.policy, ctx.c, set.sched, n_m, opts);
  return (ctx.score(tp.terminal()) - ctx.score(tm.terminal())) / (2.0 * ctx.eta);
}

// per-sample functional for the telescoped estimand
Vec transform(const Vec& y, SenseMode mode) {
  switch (mode) {
    case SenseMode::signed_mean: return y;
    case SenseMode::mean_abs: return y.cwiseAbs();
    case SenseMode::rms: return y.cwiseAbs2();
  }
  throw contract_error("bad mode");
}

struct Accum {
  Vec sum, sumsq;
  long n = 0;

  explicit Accum(Eigen::Index d) : sum(Vec::Zero(d)), sumsq(Vec::Zero(d)) {}
  void add(const Vec& v) {
    sum += v;
    sumsq += v.cwiseAbs2();
    ++n;
  }
  Vec mean() const { return sum / static_cast<double>(n); }
  // variance of the mean, per dimension
  Vec var_of_mean() const {
    if (n < 2) return Vec::Zero(sum.size());
    Vec m = mean();
    Vec var = (sumsq / static_cast<double>(n) - m.cwiseAbs2()) * (static_cast<double>(n) / (n - 1));
    return var.cwiseMax(0.0) / static_cast<double>(n);
  }
};

// finish a (possibly telescoped) estimate: undo the rms square, delta-method SE
void finish(SenseEstimate& est, const Vec& mean, const Vec& var_of_mean, SenseMode mode) {
  Vec se = var_of_mean.cwiseSqrt();
  if (mode == SenseMode::rms) {
    est.value = mean.cwiseMax(0.0).cwiseSqrt();
    est.se = est.value.size() ? Vec(est.value.size()) : Vec(0);
    for (Eigen::Index d = 0; d < est.value.size(); ++d)
      est.se[d] = est.value[d] > 1e-12 ? se[d] / (2.0 * est.value[d]) : std::sqrt(se[d]);
  } else {
    est.value = mean;
    est.se = se;
  }
}

}  // namespace

SenseEstimate block_sensitivity(const AnalysisContext& ctx, const std::vector<int>& block,
                                int pairs, SenseMode mode, std::uint64_t seed) {
  ctx.validate();
  if (pairs < 2) throw config_error("need at least two antithetic pairs");
  for (std::size_t i = 0; i + 1 < block.size(); ++i)
    if (block[i + 1] <= block[i]) throw contract_error("block must be strictly increasing");

  const auto n = static_cast<Eigen::Index>(ctx.policy->sample_dim());
  PairSetup set;
  set.block = &block;
  set.sched = ctx.sched;
  Accum acc(ctx.score_dim);
  for (int p = 0; p < pairs; ++p) {
    Rng rng = Rng::stream(seed, {0x10, static_cast<std::uint64_t>(p)});
    flow::FixedNoise noise = flow::draw_noise(rng, n, ctx.sched.steps);
    Vec z = rng.normal_vec(n);
    acc.add(transform(pair_stat(ctx, set, noise, z), mode));
  }

  SenseEstimate est;
  finish(est, acc.mean(), acc.var_of_mean(), mode);
  est.pairs = pairs;
  est.cost = 2L * pairs * ctx.sched.steps;
  return est;
}

void MLMCPlan::validate(int analysis_T) const {
  if (T0 < 1) throw config_error("base resolution must be positive");
  if (levels < 0) throw config_error("level count must be nonnegative");
  if ((T0 << levels) != analysis_T)
    throw config_error("finest plan resolution must equal the analysis resolution");
  if (static_cast<int>(samples.size()) != levels + 1)
    throw config_error("plan needs one sample count per level");
  for (int s : samples)
    if (s < 2) throw config_error("each level needs at least two pairs");
}

MLMCPlan MLMCPlan::standard(int analysis_T, int T0, int levels, int top_samples) {
  MLMCPlan plan;
  plan.T0 = T0;
  plan.levels = levels;
  plan.samples.resize(static_cast<std::size_t>(levels) + 1);
  for (int l = 0; l <= levels; ++l)
    plan.samples[static_cast<std::size_t>(l)] = std::max(2, top_samples << (levels - l));
  plan.validate(analysis_T);
  return plan;
}

SenseEstimate mlmc_estimate(const AnalysisContext& ctx, const std::vector<int>& block,
                            const MLMCPlan& plan, SenseMode mode, std::uint64_t seed) {
  ctx.validate();
  plan.validate(ctx.sched.steps);
  for (std::size_t i = 0; i + 1 < block.size(); ++i)
    if (block[i + 1] <= block[i]) throw contract_error("block must be strictly increasing");

  const auto n = static_cast<Eigen::Index>(ctx.policy->sample_dim());
  const int T = ctx.sched.steps;
  const double mass = static_cast<double>(block.size());

  // per-level blocks, setups and schedules
  std::vector<std::vector<int>> blocks(static_cast<std::size_t>(plan.levels) + 1);
  std::vector<PairSetup> setups(blocks.size());
  for (int l = 0; l <= plan.levels; ++l) {
    auto lu = static_cast<std::size_t>(l);
    int Tl = plan.resolution(l);
    blocks[lu] = map_block(block, T, Tl);
    if (blocks[lu].empty()) throw contract_error("block maps to nothing at a plan level");
    setups[lu].block = &blocks[lu];
    setups[lu].mass_scale = mass / static_cast<double>(blocks[lu].size());
    setups[lu].sched = ctx.sched;
    setups[lu].sched.steps = Tl;
  }

  SenseEstimate est;
  est.pairs = 0;
  est.cost = 0;
  Vec mean_total = Vec::Zero(ctx.score_dim);
  Vec var_total = Vec::Zero(ctx.score_dim);

  for (int l = 0; l <= plan.levels; ++l) {
    auto lu = static_cast<std::size_t>(l);
    const int pairs = plan.samples[lu];
    Accum acc(ctx.score_dim);
    for (int p = 0; p < pairs; ++p) {
      Rng rng = Rng::stream(
          seed, {0x20, static_cast<std::uint64_t>(l), static_cast<std::uint64_t>(p)});
      flow::FixedNoise fine = flow::draw_noise(rng, n, setups[lu].sched.steps);
      Vec z = rng.normal_vec(n);
      Vec fy = transform(pair_stat(ctx, setups[lu], fine, z), mode);
      if (l == 0) {
        acc.add(fy);
      } else {
        flow::FixedNoise coarse = flow::coarsen_noise(fine);
        Vec cy = transform(pair_stat(ctx, setups[lu - 1], coarse, z), mode);
        acc.add(fy - cy);
      }
    }
    mean_total += acc.mean();
    var_total += acc.var_of_mean();
    est.pairs += pairs;
    est.cost += 2L * pairs * setups[lu].sched.steps;
    if (l > 0) est.cost += 2L * pairs * setups[lu - 1].sched.steps;
  }

  finish(est, mean_total, var_total, mode);
  return est;
}

Mat rescale_map(const Mat& value) {
  double peak = value.cwiseAbs().maxCoeff();
  if (peak <= 0.0) return Mat::Zero(value.rows(), value.cols());
  return value / peak;
}

SensitivityMap temporal_map(const AnalysisContext& ctx, const MLMCPlan& plan, SenseMode mode,
                            std::uint64_t seed, int threads) {
  ctx.validate();
  const int T = ctx.sched.steps;
  SensitivityMap map;
  map.mode = mode;
  map.eta = ctx.eta;
  map.value.resize(T, ctx.score_dim);
  map.se.resize(T, ctx.score_dim);
  parallel_for(static_cast<std::size_t>(T), threads, [&](std::size_t s) {
    std::uint64_t mix = seed + 0x9e3779b97f4a7c15ull * (s + 0x40u);
    std::uint64_t step_seed = splitmix64(mix);
    SenseEstimate est =
        mlmc_estimate(ctx, {static_cast<int>(s) + 1}, plan, mode, step_seed);
    map.value.row(static_cast<Eigen::Index>(s)) = est.value.transpose();
    map.se.row(static_cast<Eigen::Index>(s)) = est.se.transpose();
  });
  map.rescaled = rescale_map(map.value);
  return map;
}

namespace {

double node_influence(const Vec& estimate) {
  return estimate.size() ? estimate.cwiseAbs().maxCoeff() : 0.0;
}

struct SearchState {
  const AnalysisContext* ctx;
  const MLMCPlan* plan;
  const SearchConfig* cfg;
  std::uint64_t seed;
  SearchResult out;

  void visit(int lo, int hi) {
    if (out.budget_exhausted) {
      return;
    }
    std::vector<int> block(static_cast<std::size_t>(hi - lo + 1));
    for (int s = lo; s <= hi; ++s) block[static_cast<std::size_t>(s - lo)] = s;
    std::uint64_t mix = seed ^ (static_cast<std::uint64_t>(lo) * 0x9e3779b97f4a7c15ull +
                                static_cast<std::uint64_t>(hi));
    std::uint64_t node_seed = splitmix64(mix);
    SenseEstimate est = mlmc_estimate(*ctx, block, *plan, cfg->mode, node_seed);
    out.pairs_used += est.cost / (2L * ctx->sched.steps);
    if (out.pairs_used >= cfg->budget_pairs) out.budget_exhausted = true;

    SearchLeaf node;
    node.lo = lo;
    node.hi = hi;
    node.estimate = est.value;
    node.influence = node_influence(est.value);
    out.running_max = std::max(out.running_max, node.influence);

    const int width = hi - lo + 1;
    bool prune = node.influence < cfg->tau_rel * out.running_max;
    if (width <= cfg->min_width || prune || out.budget_exhausted) {
      out.leaves.push_back(std::move(node));
      return;
    }
    int mid = lo + (width + 1) / 2 - 1;  // left child takes the larger half
    visit(lo, mid);
    visit(mid + 1, hi);
  }
};

}  // namespace

SearchResult coarse_to_fine(const AnalysisContext& ctx, const MLMCPlan& plan,
                            const SearchConfig& search, std::uint64_t seed) {
  ctx.validate();
  if (search.min_width < 1) throw config_error("leaf width must be positive");
  if (search.tau_rel < 0 || search.tau_rel >= 1)
    throw config_error("influence threshold must sit in [0,1)");
  SearchState st;
  st.ctx = &ctx;
  st.plan = &plan;
  st.cfg = &search;
  st.seed = seed;
  st.visit(1, ctx.sched.steps);
  for (const auto& leaf : st.out.leaves) {
    bool fine = leaf.hi - leaf.lo + 1 <= search.min_width;
    if (fine && leaf.influence >= search.tau_rel * st.out.running_max)
      st.out.influential.push_back(leaf);
  }
  return st.out;
}

flow::InterventionPlan zero_window(int lo, int hi, int T, flow::InterventionVariant variant) {
  flow::InterventionPlan plan = flow::InterventionPlan::window(lo, hi, variant);
  plan.validate(T);
  return plan;
}

std::vector<InterventionOutcome> intervention_eval(
    const AnalysisContext& ctx,
    const std::vector<std::pair<std::string, const flow::InterventionPlan*>>& plans, int rollouts,
    std::uint64_t seed) {
  ctx.validate();
  if (!ctx.composite_score) throw contract_error("intervention evaluation needs a composite score");
  if (rollouts < 2) throw config_error("need at least two evaluation rollouts");
  const auto n = static_cast<Eigen::Index>(ctx.policy->sample_dim());

  std::vector<InterventionOutcome> out(plans.size());
  std::vector<Accum> accs(plans.size(), Accum(ctx.score_dim));
  std::vector<double> comp_sum(plans.size(), 0.0);

  for (int i = 0; i < rollouts; ++i) {
    Rng rng = Rng::stream(seed, {0x50, static_cast<std::uint64_t>(i)});
    flow::FixedNoise noise = flow::draw_noise(rng, n, ctx.sched.steps);
    for (std::size_t k = 0; k < plans.size(); ++k) {
      flow::RolloutOptions opts;
      opts.stochastic = ctx.stochastic;
      opts.gate = ctx.gate;
      opts.intervention = plans[k].second;  // nullptr rows evaluate the intact policy
      flow::FixedNoise local = noise;       // common random numbers across plans
      flow::Trajectory traj = flow::rollout(*ctx.policy, ctx.c, ctx.sched, local, opts);
      accs[k].add(ctx.score(traj.terminal()));
      comp_sum[k] += ctx.composite_score(traj.terminal());
    }
  }

  for (std::size_t k = 0; k < plans.size(); ++k) {
    out[k].label = plans[k].first;
    out[k].net_mean = accs[k].mean();
    out[k].net_se = accs[k].var_of_mean().cwiseSqrt();
    out[k].composite_mean = comp_sum[k] / rollouts;
  }
  return out;
}

std::vector<ScanPoint> perturbation_scan(const AnalysisContext& ctx, scorer::TaskKind task,
                                         const std::vector<double>& kappas, int rollouts,
                                         std::uint64_t seed) {
  ctx.validate();
  if (rollouts < 2) throw config_error("need at least two scan rollouts");
  const auto n = static_cast<Eigen::Index>(ctx.policy->sample_dim());
  const int T = ctx.sched.steps;

  std::vector<ScanPoint> points(kappas.size());
  std::vector<double> sum(kappas.size(), 0.0), sumsq(kappas.size(), 0.0);

  flow::RolloutOptions opts;
  opts.stochastic = ctx.stochastic;
  opts.gate = ctx.gate;

  for (int i = 0; i < rollouts; ++i) {
    Rng rng = Rng::stream(seed, {0x60, static_cast<std::uint64_t>(i)});
    flow::FixedNoise noise = flow::draw_noise(rng, n, T);
    std::vector<Vec> dirs(static_cast<std::size_t>(T));
    for (int s = 0; s < T; ++s) dirs[static_cast<std::size_t>(s)] = rng.normal_vec(n);

    flow::FixedNoise base_noise = noise;
    flow::RolloutOptions base_opts = opts;
    flow::Trajectory base = flow::rollout(*ctx.policy, ctx.c, ctx.sched, base_noise, base_opts);

    for (std::size_t k = 0; k < kappas.size(); ++k) {
      flow::Injection inj;
      inj.velocity_additive = ctx.velocity_additive;
      for (int s = 1; s <= T; ++s)
        inj.kicks.emplace_back(
            s, (kappas[k] * kick_scale(ctx, s, T)) * dirs[static_cast<std::size_t>(s - 1)]);
      flow::RolloutOptions kicked = opts;
      kicked.injection = &inj;
      flow::FixedNoise local = noise;
      flow::Trajectory traj = flow::rollout(*ctx.policy, ctx.c, ctx.sched, local, kicked);
      double sim = scorer::structural_similarity(traj.terminal(), base.terminal(), task);
      sum[k] += sim;
      sumsq[k] += sim * sim;
    }
  }

  for (std::size_t k = 0; k < kappas.size(); ++k) {
    double mean = sum[k] / rollouts;
    double var = std::max(0.0, (sumsq[k] / rollouts - mean * mean) * rollouts / (rollouts - 1.0));
    points[k].kappa = kappas[k];
    points[k].similarity_mean = mean;
    points[k].similarity_se = std::sqrt(var / rollouts);
  }
  return points;
}

}  // namespace flowtrace::temporal
