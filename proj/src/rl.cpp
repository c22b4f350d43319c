#include "flowtrace/rl.hpp"

#include <algorithm>
#include <cmath>

namespace flowtrace::rl {

void HyperParams::validate() const {
  if (eps_clip_low <= 0 || eps_clip_high <= 0) throw config_error("clip width must be positive");
  if (beta_t < 0 || beta_high < 0) throw config_error("KL weights must be nonnegative");
  if (adv_eps <= 0) throw config_error("advantage guard must be positive");
  if (K < 1) throw config_error("need at least one candidate group");
  if (M < 1) throw config_error("need at least one rollout per candidate");
  if (lr_low <= 0 || lr_high <= 0) throw config_error("learning rates must be positive");
}

const char* mode_name(TrainMode m) {
  switch (m) {
    case TrainMode::full: return "full";
    case TrainMode::no_edit: return "no_edit";
    case TrainMode::no_adapter: return "no_adapter";
    case TrainMode::flat: return "flat";
  }
  return "?";
}

TrainMode mode_from_name(const std::string& s) {
  if (s == "full") return TrainMode::full;
  if (s == "no_edit") return TrainMode::no_edit;
  if (s == "no_adapter") return TrainMode::no_adapter;
  if (s == "flat") return TrainMode::flat;
  throw config_error("unknown train mode '" + s + "'");
}

Vec group_advantages(const Vec& values, double eps) {
  const auto n = values.size();
  if (n == 0) throw contract_error("empty reward group");
  double mean = values.mean();
  double var = (values.array() - mean).square().sum() / static_cast<double>(n);
  double denom = std::sqrt(var) + eps;
  return (values.array() - mean) / denom;
}

double grpo_term(double ratio, double adv, double eps_clip) {
  double clipped = std::clamp(ratio, 1.0 - eps_clip, 1.0 + eps_clip);
  return std::min(ratio * adv, clipped * adv);
}

double kl_gaussian(const Vec& mu_theta, const Vec& mu_ref, double sigma) {
  if (sigma <= 0) throw contract_error("KL needs a positive sigma");
  return (mu_theta - mu_ref).squaredNorm() / (2.0 * sigma * sigma);
}

namespace {

// rng tag prefixes; keep collect-time streams disjoint across purposes
constexpr std::uint64_t kTagEdit = 0x01;
constexpr std::uint64_t kTagRollout = 0x02;

}  // namespace

Engine::Engine(std::shared_ptr<flow::Policy> policy, std::optional<edit::EditPolicy> editor,
               edit::EditConfig ecfg, scorer::ScorerConfig scfg, flow::NoiseSchedule train_sched,
               HyperParams hp, TrainMode mode, Vec e_root, std::uint64_t seed)
    : policy_(std::move(policy)),
      editor_(std::move(editor)),
      ecfg_(std::move(ecfg)),
      scfg_(std::move(scfg)),
      sched_(train_sched),
      hp_(hp),
      mode_(mode),
      e_root_(std::move(e_root)),
      seed_(seed) {
  if (!policy_) throw contract_error("engine needs a generation policy");
  hp_.validate();
  ecfg_.validate();
  scfg_.validate();
  sched_.validate();
  if (scfg_.null_scores.size() != scfg_.D())
    throw config_error("scorer config not finalized (null scores missing)");
  if (e_root_.size() != scfg_.cond_dim) throw config_error("root embedding size mismatch");
  if (policy_->cond_dim() != scfg_.cond_dim)
    throw config_error("policy conditioning width does not match the scorer");
  if (policy_->sample_dim() != scfg_.sample_dim)
    throw config_error("policy sample width does not match the scorer");
  if ((mode_ == TrainMode::full || mode_ == TrainMode::no_adapter) && !editor_)
    throw config_error(std::string(mode_name(mode_)) + " mode needs an edit policy");

  adam_low_ = nn::make_adam(policy_->trainable_count(), hp_.lr_low);
  if (editor_) {
    editor_ref_params_ = nn::pack(editor_->net);
    adam_high_ = nn::make_adam(editor_ref_params_.size(), hp_.lr_high);
  } else {
    adam_high_ = nn::make_adam(0, hp_.lr_high);
  }
}

edit::EditPolicy& Engine::editor_mut() {
  if (!editor_) throw contract_error("engine has no edit policy");
  return *editor_;
}

GroupBatch Engine::collect(int epoch) {
  GroupBatch batch;
  const int K = hp_.K;
  const int M = hp_.M;

  if (editor_active()) {
    Rng erng = Rng::stream(seed_, {kTagEdit, static_cast<std::uint64_t>(epoch)});
    batch.candidates = edit::propose(*editor_, e_root_, K, M, ecfg_, erng);
  }

  batch.rollouts.reserve(static_cast<std::size_t>(K) * M);
  batch.composite.resize(static_cast<Eigen::Index>(K) * M);
  flow::RolloutOptions opts;
  opts.stochastic = true;

  Eigen::Index idx = 0;
  for (int j = 0; j < K; ++j) {
    for (int m = 1; m <= M; ++m, ++idx) {
      Vec c = batch.candidates.empty() ? e_root_
                                       : edit::conditioning_for_rollout(batch.candidates[j], m);
      flow::RngNoise noise(Rng::stream(
          seed_, {kTagRollout, static_cast<std::uint64_t>(epoch), static_cast<std::uint64_t>(j),
                  static_cast<std::uint64_t>(m)}));
      RolloutRecord rec;
      rec.traj = flow::rollout(*policy_, c, sched_, noise, opts);
      rec.reward = scorer::score_sample(rec.traj.terminal(), c, scfg_);
      rec.candidate = batch.candidates.empty() ? -1 : j;
      rec.rollout = m;
      batch.composite[idx] = rec.reward.composite;
      batch.rollouts.push_back(std::move(rec));
    }
  }

  batch.advantages = group_advantages(batch.composite, hp_.adv_eps);
  batch.reward_mean = batch.composite.mean();
  batch.reward_max = batch.composite.maxCoeff();
  if (!batch.candidates.empty()) {
    batch.candidate_mean.resize(K);
    for (int j = 0; j < K; ++j)
      batch.candidate_mean[j] = batch.composite.segment(static_cast<Eigen::Index>(j) * M, M).mean();
  }
  return batch;
}

LowLevelStats Engine::low_level_update(const GroupBatch& batch) {
  LowLevelStats stats;
  const long n_par = policy_->trainable_count();
  if (mode_ == TrainMode::no_adapter || n_par == 0) return stats;
  if (batch.rollouts.empty()) throw contract_error("empty batch");

  const int T = sched_.steps;
  const double dt = sched_.dt();
  Vec grad = Vec::Zero(n_par);  // gradient of the ascent objective
  double kl_sum = 0.0;
  long clip_hits = 0, terms = 0;
  const double inv_norm = 1.0 / (static_cast<double>(batch.rollouts.size()) * T);

  for (std::size_t i = 0; i < batch.rollouts.size(); ++i) {
    const auto& rec = batch.rollouts[i];
    const double adv = batch.advantages[static_cast<Eigen::Index>(i)];
    const auto& traj = rec.traj;
    if (!traj.stochastic) throw contract_error("training rollouts must be stochastic");
    for (int t = 1; t <= T; ++t) {
      const auto& st = traj.steps[static_cast<std::size_t>(t) - 1];
      const double sigma = st.sigma;
      if (sigma <= 0) throw contract_error("training step without noise");
      // policy mean under the current parameters and under the frozen base
      Vec v_now = policy_->velocity(st.x_before, st.t_before, traj.c, st.gate);
      Vec v_ref = policy_->velocity(st.x_before, st.t_before, traj.c, 0.0);
      Vec mu_now = st.x_before - v_now * dt;
      Vec mu_old = st.x_before - st.v * dt;  // snapshot that generated the action
      Vec mu_ref = st.x_before - v_ref * dt;

      double lp_now = flow::gaussian_logprob(st.x_after, mu_now, sigma);
      double lp_old = flow::gaussian_logprob(st.x_after, mu_old, sigma);
      double ratio = std::exp(lp_now - lp_old);
      ++terms;
      if (std::abs(ratio - 1.0) > hp_.eps_clip_low) ++clip_hits;

      kl_sum += kl_gaussian(mu_now, mu_ref, sigma);

      // d(surrogate)/d(mu_now) at the unclipped branch plus the KL pull,
      // chained through mu = x - v*dt
      Vec d_mu = adv * ratio * (st.x_after - mu_now) / (sigma * sigma) -
                 hp_.beta_t * (mu_now - mu_ref) / (sigma * sigma);
      Vec upstream = -dt * d_mu;
      grad += inv_norm * policy_->trainable_vjp(st.x_before, st.t_before, traj.c, st.gate, upstream);
    }
  }

  stats.kl_mean = kl_sum * inv_norm;
  stats.clip_fraction = terms > 0 ? static_cast<double>(clip_hits) / terms : 0.0;
  stats.grad_norm = grad.norm();

  Vec params = policy_->trainable_params();
  Vec descent = -grad;
  if (nn::adam_step(params, descent, adam_low_)) {
    policy_->set_trainable_params(params);
    stats.applied = true;
  }
  return stats;
}

HighLevelStats Engine::high_level_update(const GroupBatch& batch) {
  HighLevelStats stats;
  if (!editor_active() || batch.candidates.empty()) return stats;
  const int K = static_cast<int>(batch.candidates.size());
  if (K < 2) throw contract_error("high-level group needs at least 2 candidates");

  stats.r_high = high_level_reward(batch);
  Vec adv = group_advantages(stats.r_high, hp_.adv_eps);

  // frozen anchor network
  nn::NetworkParams ref_net = editor_->net;
  nn::unpack(editor_ref_params_, ref_net);

  const double s2 = ecfg_.sigma_head * ecfg_.sigma_head;
  Vec grad = Vec::Zero(editor_ref_params_.size());
  double kl_sum = 0.0;
  const Vec zeta0 = Vec::Zero(ecfg_.latent_dim);

  for (int j = 0; j < K; ++j) {
    const auto& cand = batch.candidates[static_cast<std::size_t>(j)];
    nn::ForwardTrace trace;
    Vec m_now = nn::forward(editor_->net, nullptr, 0.0, cand.e_p, 0.0, zeta0, &trace);
    Vec m_ref = nn::forward(ref_net, nullptr, 0.0, cand.e_p, 0.0, zeta0);
    kl_sum += kl_gaussian(m_now, m_ref, ecfg_.sigma_head);

    // single update per batch: the sampling snapshot is the current net, so
    // the ratio sits at 1 and the unclipped branch carries the gradient
    Vec d_mean = adv[j] * (cand.mu - m_now) / s2 - hp_.beta_high * (m_now - m_ref) / s2;
    nn::Gradients g = nn::backward(editor_->net, nullptr, 0.0, trace, d_mean, true);
    grad += nn::pack_base_grads(g) / static_cast<double>(K);
  }

  stats.kl_mean = kl_sum / K;
  stats.grad_norm = grad.norm();

  Vec params = nn::pack(editor_->net);
  Vec descent = -grad;
  if (nn::adam_step(params, descent, adam_high_)) {
    nn::unpack(params, editor_->net);
    stats.applied = true;
  }
  return stats;
}

Vec Engine::high_level_reward(const GroupBatch& batch) const {
  const int K = static_cast<int>(batch.candidates.size());
  if (K == 0) return Vec(0);
  if (batch.candidate_mean.size() != K) throw contract_error("candidate means missing");
  Vec r(K);
  for (int j = 0; j < K; ++j)
    r[j] = batch.candidate_mean[j] + batch.candidates[static_cast<std::size_t>(j)].reward.value;
  return r;
}

EpochMetrics Engine::train_epoch(int epoch) {
  GroupBatch batch = collect(epoch);
  LowLevelStats low = low_level_update(batch);
  HighLevelStats high = high_level_update(batch);

  EpochMetrics m;
  m.epoch = epoch;
  m.reward_mean = batch.reward_mean;
  m.reward_max = batch.reward_max;
  m.net_mean = Vec::Zero(scfg_.D());
  for (const auto& rec : batch.rollouts) m.net_mean += rec.reward.tox - scfg_.null_scores;
  m.net_mean /= static_cast<double>(batch.rollouts.size());
  m.kl_low = low.kl_mean;
  m.clip_fraction = low.clip_fraction;
  m.kl_high = high.kl_mean;
  m.low_applied = low.applied;
  m.high_applied = high.applied;
  if (!batch.candidates.empty()) {
    double s = 0.0;
    for (const auto& cand : batch.candidates) s += cand.reward.value;
    m.edit_reward_mean = s / static_cast<double>(batch.candidates.size());
  }
  return m;
}

}  // namespace flowtrace::rl
