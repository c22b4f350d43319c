#ifndef FLOWTRACE_RL_HPP
#define FLOWTRACE_RL_HPP

#include "flowtrace/common.hpp"
#include "flowtrace/edit.hpp"
#include "flowtrace/flow.hpp"
#include "flowtrace/scorer.hpp"

#include <memory>
#include <optional>

namespace flowtrace::rl {

struct HyperParams {
  double eps_clip_low = 0.001;
  double eps_clip_high = 0.001;
  double beta_t = 0.04;     // per-step KL weight, low level
  double beta_high = 0.02;  // KL weight on the edit policy
  double adv_eps = 1e-8;    // guard added to the advantage denominator
  int K = 4;                // edit candidates per epoch
  int M = 8;                // rollouts per candidate
  double lr_low = 5e-5;
  double lr_high = 5e-5;

  void validate() const;
};

// full: edits + adapter + both updates
// no_edit: root conditioning only, adapter trains, no high-level update
// no_adapter: edits train, generation stays frozen
// flat: one global group on the root conditioning (controlled baseline)
enum class TrainMode { full, no_edit, no_adapter, flat };

const char* mode_name(TrainMode m);
TrainMode mode_from_name(const std::string& s);

// (x - mean) / (population std + eps)
Vec group_advantages(const Vec& values, double eps);

// clipped surrogate term: min(r*A, clip(r, 1-eps, 1+eps)*A)
double grpo_term(double ratio, double adv, double eps_clip);

// KL between N(mu_theta, sigma^2 I) and N(mu_ref, sigma^2 I)
double kl_gaussian(const Vec& mu_theta, const Vec& mu_ref, double sigma);

struct RolloutRecord {
  flow::Trajectory traj;
  scorer::RewardRecord reward;
  int candidate = -1;  // j, -1 when no editor is active
  int rollout = 0;     // m, 1-based
};

struct GroupBatch {
  std::vector<edit::EditCandidate> candidates;  // empty without an editor
  std::vector<RolloutRecord> rollouts;          // K*M entries
  Vec composite;                                // per rollout, same order
  Vec advantages;                               // group-normalized composite
  Vec candidate_mean;                           // mean composite per candidate
  double reward_mean = 0.0;
  double reward_max = 0.0;
};

struct LowLevelStats {
  double kl_mean = 0.0;
  double clip_fraction = 0.0;
  double grad_norm = 0.0;
  bool applied = false;
};

struct HighLevelStats {
  double kl_mean = 0.0;
  double grad_norm = 0.0;
  Vec r_high;
  bool applied = false;
};

struct EpochMetrics {
  int epoch = 0;
  double reward_mean = 0.0;
  double reward_max = 0.0;
  Vec net_mean;  // mean net score per dimension
  double kl_low = 0.0;
  double clip_fraction = 0.0;
  double edit_reward_mean = 0.0;
  double kl_high = 0.0;
  bool low_applied = false;
  bool high_applied = false;
};

// one optimization driver: owns the generation policy, the optional edit
// policy and both Adam states. the base generator parameters are never
// touched; only the adapter path and the edit policy move.
class Engine {
 public:
  Engine(std::shared_ptr<flow::Policy> policy, std::optional<edit::EditPolicy> editor,
         edit::EditConfig ecfg, scorer::ScorerConfig scfg, flow::NoiseSchedule train_sched,
         HyperParams hp, TrainMode mode, Vec e_root, std::uint64_t seed);

  GroupBatch collect(int epoch);
  LowLevelStats low_level_update(const GroupBatch& batch);
  HighLevelStats high_level_update(const GroupBatch& batch);
  EpochMetrics train_epoch(int epoch);

  // R_high per candidate: mean composite plus the candidate's edit reward
  Vec high_level_reward(const GroupBatch& batch) const;

  flow::Policy& policy() { return *policy_; }
  const flow::Policy& policy() const { return *policy_; }
  const std::optional<edit::EditPolicy>& editor() const { return editor_; }
  edit::EditPolicy& editor_mut();
  TrainMode mode() const { return mode_; }
  const HyperParams& hyper() const { return hp_; }
  const scorer::ScorerConfig& scorer_config() const { return scfg_; }
  const edit::EditConfig& edit_config() const { return ecfg_; }
  const flow::NoiseSchedule& train_schedule() const { return sched_; }
  const Vec& root_embedding() const { return e_root_; }
  std::uint64_t seed() const { return seed_; }

  nn::AdamState& adam_low() { return adam_low_; }
  nn::AdamState& adam_high() { return adam_high_; }
  const nn::AdamState& adam_low() const { return adam_low_; }
  const nn::AdamState& adam_high() const { return adam_high_; }
  const Vec& editor_reference() const { return editor_ref_params_; }

 private:
  bool editor_active() const {
    return editor_.has_value() && (mode_ == TrainMode::full || mode_ == TrainMode::no_adapter);
  }

  std::shared_ptr<flow::Policy> policy_;
  std::optional<edit::EditPolicy> editor_;
  edit::EditConfig ecfg_;
  scorer::ScorerConfig scfg_;
  flow::NoiseSchedule sched_;
  HyperParams hp_;
  TrainMode mode_;
  Vec e_root_;
  std::uint64_t seed_;
  nn::AdamState adam_low_;
  nn::AdamState adam_high_;
  Vec editor_ref_params_;  // frozen copy for the high-level KL anchor
};

}  // namespace flowtrace::rl

#endif
