#ifndef FLOWTRACE_TEMPORAL_HPP
#define FLOWTRACE_TEMPORAL_HPP

#include "flowtrace/common.hpp"
#include "flowtrace/flow.hpp"
#include "flowtrace/scorer.hpp"

#include <functional>

namespace flowtrace::temporal {

// when and where does the scorer care? finite-difference sensitivities of
// terminal scores to small kicks injected during chosen denoising steps,
// estimated with antithetic pairs under shared noise, optionally across a
// ladder of denoising resolutions with coupled corrections.

enum class SenseMode { signed_mean, mean_abs, rms };

const char* mode_name(SenseMode m);
SenseMode mode_from_name(const std::string& s);

// per-dimension scores of a terminal sample (conditioning already bound)
using ScoreFn = std::function<Vec(const Vec& terminal)>;

struct AnalysisContext {
  const flow::Policy* policy = nullptr;
  Vec c;
  flow::NoiseSchedule sched;  // analysis resolution
  ScoreFn score;
  std::function<double(const Vec&)> composite_score;  // used by intervention_eval
  int score_dim = 0;
  bool stochastic = true;
  bool velocity_additive = false;  // kick the velocity instead of the state
  double eta = 0.02;
  bool eta_relative = true;  // scale kicks by the per-step state RMS profile
  Vec rms_profile;           // per analysis step; filled by calibrate_rms
  double gate = -1.0;        // forwarded to rollouts

  void validate() const;
};

AnalysisContext make_context(const flow::Policy& policy, const Vec& c,
                             const flow::NoiseSchedule& sched, const scorer::ScorerConfig& scfg);

// estimate the per-step state RMS along unperturbed rollouts; required before
// relative-eta analysis
void calibrate_rms(AnalysisContext& ctx, int rollouts, std::uint64_t seed);

// map a step-index block across resolutions by time overlap (exact integer
// arithmetic); a block maps to every step whose time interval overlaps the
// block's time support with positive measure
std::vector<int> map_block(const std::vector<int>& block, int T_from, int T_to);

struct SenseEstimate {
  Vec value;        // per score dimension
  Vec se;           // standard error per dimension
  long pairs = 0;   // antithetic pairs consumed
  long cost = 0;    // total denoising steps run
};

// single-resolution estimate at the context schedule
SenseEstimate block_sensitivity(const AnalysisContext& ctx, const std::vector<int>& block,
                                int pairs, SenseMode mode, std::uint64_t seed);

struct MLMCPlan {
  int T0 = 10;
  int levels = 2;            // resolutions T0 * 2^l for l = 0..levels
  std::vector<int> samples;  // pairs per level, size levels+1

  int resolution(int level) const { return T0 << level; }
  void validate(int analysis_T) const;
  // halving sample counts, top level gets top_samples
  static MLMCPlan standard(int analysis_T, int T0, int levels, int top_samples);
};

// telescoped multi-resolution estimate; adjacent levels share initial noise,
// Brownian increments (pair-summed) and the kick direction
SenseEstimate mlmc_estimate(const AnalysisContext& ctx, const std::vector<int>& block,
                            const MLMCPlan& plan, SenseMode mode, std::uint64_t seed);

struct SearchConfig {
  int min_width = 2;       // stop splitting at this width
  double tau_rel = 0.05;   // influence threshold, fraction of the running max
  long budget_pairs = 100000;  // cap on total antithetic pairs (finest-level equivalents)
  SenseMode mode = SenseMode::mean_abs;
};

struct SearchLeaf {
  int lo = 0, hi = 0;
  Vec estimate;
  double influence = 0.0;  // max_d |estimate_d|
  bool influential = false;
};

struct SearchResult {
  std::vector<SearchLeaf> leaves;       // every terminal node, left to right
  std::vector<SearchLeaf> influential;  // width <= min_width and influence >= threshold
  double running_max = 0.0;
  long pairs_used = 0;
  bool budget_exhausted = false;
};

// deterministic left-first bisection from the whole horizon down to
// min_width, pruning blocks whose influence falls under tau_rel * running max
SearchResult coarse_to_fine(const AnalysisContext& ctx, const MLMCPlan& plan,
                            const SearchConfig& search, std::uint64_t seed);

struct SensitivityMap {
  Mat value;     // steps x dims
  Mat se;
  Mat rescaled;  // value / max |value|; all-zero maps stay zero
  SenseMode mode = SenseMode::mean_abs;
  double eta = 0.0;
};

Mat rescale_map(const Mat& value);

// per-step singleton-block estimates for every step of the analysis schedule
SensitivityMap temporal_map(const AnalysisContext& ctx, const MLMCPlan& plan, SenseMode mode,
                            std::uint64_t seed, int threads = 1);

// intervention window [lo,hi] as a plan over the analysis schedule
flow::InterventionPlan zero_window(int lo, int hi, int T, flow::InterventionVariant variant);

struct InterventionOutcome {
  std::string label;
  Vec net_mean;  // mean net score per dimension
  Vec net_se;
  double composite_mean = 0.0;
};

// evaluate labelled plans under common random numbers (plan k sees the same
// noise stream as every other plan for rollout i)
std::vector<InterventionOutcome> intervention_eval(
    const AnalysisContext& ctx,
    const std::vector<std::pair<std::string, const flow::InterventionPlan*>>& plans, int rollouts,
    std::uint64_t seed);

struct ScanPoint {
  double kappa = 0.0;
  double similarity_mean = 0.0;
  double similarity_se = 0.0;
};

// perturbed-vs-unperturbed structural similarity of terminal samples under
// shared noise, per relative kick strength kappa
std::vector<ScanPoint> perturbation_scan(const AnalysisContext& ctx, scorer::TaskKind task,
                                         const std::vector<double>& kappas, int rollouts,
                                         std::uint64_t seed);

}  // namespace flowtrace::temporal

#endif
