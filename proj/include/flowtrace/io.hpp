#ifndef FLOWTRACE_IO_HPP
#define FLOWTRACE_IO_HPP

#include "flowtrace/common.hpp"
#include "flowtrace/edit.hpp"
#include "flowtrace/fixtures.hpp"
#include "flowtrace/flow.hpp"
#include "flowtrace/rl.hpp"
#include "flowtrace/scorer.hpp"
#include "flowtrace/temporal.hpp"

#include <map>
#include <memory>
#include <optional>
#include <string>
#include <vector>

namespace flowtrace::io {

// run configuration: one versioned JSON file drives every subcommand.
// unknown keys are rejected with their full path so typos cannot silently
// fall back to defaults.

struct AnalysisConfig {
  int steps = 40;
  double eta = 0.02;
  bool eta_relative = true;
  bool stochastic = true;
  bool velocity_additive = false;
  temporal::SenseMode mode = temporal::SenseMode::mean_abs;
  temporal::MLMCPlan plan;
  temporal::SearchConfig search;
  int calibration_rollouts = 16;
  int rollouts = 64;

  AnalysisConfig() {
    plan.T0 = 10;
    plan.levels = 2;
    plan.samples = {64, 32, 16};
  }
};

struct InterveneConfig {
  int early_lo = 1, early_hi = 15;
  int late_lo = 21, late_hi = 40;
  int rollouts = 64;
  flow::InterventionVariant variant = flow::InterventionVariant::gate_adapter;
};

struct SweepConfig {
  std::vector<double> sigma = {0.5, 1.0, 2.0};
  std::vector<int> steps = {10, 20, 40};
  std::vector<double> beta = {0.0, 0.01, 0.04};
  std::vector<double> kappa = {0.005, 0.01, 0.02, 0.05, 0.1};
  int kappa_rollouts = 64;
};

struct RunConfig {
  int config_version = 1;
  std::string task = "toy2d";
  std::uint64_t seed = 1;
  rl::TrainMode mode = rl::TrainMode::full;
  std::string out_dir = "runs/out";
  int threads = 1;
  int epochs = 50;
  int checkpoint_every = 0;  // 0: final checkpoint only
  flow::NoiseSchedule schedule;
  rl::HyperParams hyper;
  edit::EditConfig edit;
  double w_align = 0.2;
  scorer::Aggregator aggregator = scorer::Aggregator::max;
  int agg_index = 0;
  int adapter_rank = 4;
  double adapter_alpha = 8.0;
  int net_hidden = 32;
  int net_depth = 2;
  AnalysisConfig analysis;
  InterveneConfig intervene;
  SweepConfig sweep;

  void validate() const;
};

RunConfig default_config();
RunConfig parse_config(const std::string& json_text);
RunConfig load_config(const std::string& path);
std::string dump_config(const RunConfig& cfg);  // canonical form
// hash of the training-relevant fields only (epoch budget, analysis,
// intervention and sweep settings excluded, so a longer budget or post-hoc
// analysis tweaks don't orphan checkpoints)
std::uint64_t config_hash(const RunConfig& cfg);

// apply FLOWTRACE_OUT / FLOWTRACE_THREADS; the only environment hooks
void apply_env_overrides(RunConfig& cfg);

// everything a run needs, assembled from the task name. the policy and the
// optional editor are freshly initialized from the config seed.
struct TaskBundle {
  std::shared_ptr<flow::Policy> policy;
  std::optional<edit::EditPolicy> editor;
  scorer::ScorerConfig scorer;
  edit::EditConfig edit;
  Vec e_root;
};

TaskBundle make_task(const RunConfig& cfg);
std::vector<std::string> task_names();

// checkpoint: textual header, then named raw little-endian float32 arrays.
// doubles quantize once on save; save(load(save(x))) is bitwise save(x).
struct Checkpoint {
  int version = 1;
  std::uint64_t config_hash = 0;
  int epoch = 0;
  long adam_low_step = 0;
  long adam_high_step = 0;
  std::vector<std::pair<std::string, std::vector<float>>> arrays;
};

void save_checkpoint(const std::string& path, const Checkpoint& ckpt);
Checkpoint load_checkpoint(const std::string& path);

Checkpoint checkpoint_of(const rl::Engine& engine, int epoch, std::uint64_t cfg_hash);
// restores parameters and optimizer state; shape mismatches are io errors
void apply_checkpoint(const Checkpoint& ckpt, rl::Engine& engine);

std::vector<float> to_f32(const Vec& v);
Vec from_f32(const std::vector<float>& v);

// line-delimited metrics; key order fixed, no timestamps (those go to the
// timing sidecar so identical runs produce identical logs)
std::string metrics_line(const rl::EpochMetrics& m);
rl::EpochMetrics parse_metrics_line(const std::string& line);

// CSV heatmaps: header "step,<dim names...>", one row per step, float32-exact
void write_map_csv(const std::string& path, const Mat& map, const std::vector<std::string>& dims);
Mat read_map_csv(const std::string& path, std::vector<std::string>* dims = nullptr);

// diverging palette anchored at zero; step rows, dimension columns
void write_map_svg(const std::string& path, const Mat& rescaled,
                   const std::vector<std::string>& dims);

struct CmdResult {
  int exit_code = 0;
  std::string message;
};

CmdResult cmd_train(const RunConfig& cfg);
CmdResult cmd_analyze(const RunConfig& cfg, const std::string& checkpoint_path);
CmdResult cmd_intervene(const RunConfig& cfg, const std::string& checkpoint_path);
CmdResult cmd_sweep(const RunConfig& cfg, const std::string& axis,
                    const std::string& checkpoint_path);
CmdResult cmd_export(const RunConfig& cfg, const std::string& map_prefix,
                     const std::string& checkpoint_path);

}  // namespace flowtrace::io

#endif
