#include "flowtrace/edit.hpp"

#include <cmath>

namespace flowtrace::edit {

void EditConfig::validate() const {
  if (cond_dim < 1) throw config_error("cond_dim must be positive");
  if (latent_dim < 0) throw config_error("latent_dim must be non-negative");
  if (!(eps_proj > 0.0)) throw config_error("eps_proj must be positive");
  if (sigma_simple < 0.0 || sigma_mod < 0.0) throw config_error("edit noise scales must be >= 0");
  if (!(grid_pitch > 0.0)) throw config_error("grid_pitch must be positive");
  if (!(sigma_head > 0.0)) throw config_error("sigma_head must be positive");
  if (tau_sem < -1.0 || tau_sem > 1.0) throw config_error("tau_sem outside [-1,1]");
}

Vec project(const Vec& mu, double eps_proj) {
  if (!(eps_proj > 0.0)) throw contract_error("project needs eps_proj > 0");
  double nrm = mu.norm();
  return eps_proj * mu / std::max(nrm, eps_proj);
}

CodecResult codec_roundtrip(const Vec& e, double pitch) {
  if (!(pitch > 0.0)) throw contract_error("codec needs pitch > 0");
  CodecResult r;
  r.tokens.resize(e.size());
  r.embedding.resize(e.size());
  for (Eigen::Index i = 0; i < e.size(); ++i) {
    double q = e[i] / pitch;
    // round half toward zero so ties snap to the smaller magnitude
    double k = (q >= 0.0) ? std::ceil(q - 0.5) : std::floor(q + 0.5);
    r.tokens[i] = static_cast<long>(k);
    r.embedding[i] = k * pitch;
  }
  return r;
}

EditReward edit_reward(const Vec& e_p, const Vec& delta, const Vec& e_re, const EditConfig& cfg) {
  if (e_p.size() != delta.size() || e_p.size() != e_re.size()) {
    throw contract_error("edit_reward dimension mismatch");
  }
  EditReward out;
  Vec e_edit = e_p + delta;
  double na = e_p.norm();
  double nb = e_edit.norm();
  double cosv = 0.0;
  if (na == 0.0 || nb == 0.0) {
    out.degenerate_cosine = true;  // treat the similarity as 0 and flag it
  } else {
    cosv = e_p.dot(e_edit) / (na * nb);
  }
  out.sem = std::max(cosv - cfg.tau_sem, 0.0);
  out.recon = 1.0 / (1.0 + (e_edit - e_re).squaredNorm());
  out.value = cfg.lambda_sem * out.sem + cfg.lambda_recon * out.recon;
  return out;
}

Vec EditPolicy::propose_mu(const Vec& e_p, const Vec& zeta) const {
  return nn::forward(net, nullptr, 0.0, e_p, 0.0, zeta);
}

Vec EditPolicy::head_mean(const Vec& e_p) const {
  return nn::forward(net, nullptr, 0.0, e_p, 0.0, Vec::Zero(net.c_dim));
}

EditPolicy make_edit_policy(const EditConfig& cfg, Rng& rng, int hidden, int depth) {
  cfg.validate();
  EditPolicy p;
  p.net = nn::make_mlp(cfg.cond_dim, cfg.latent_dim, cfg.cond_dim, hidden, depth, rng, 0.5);
  return p;
}

std::vector<EditCandidate> propose(const EditPolicy& policy, const Vec& e_root, int K, int M,
                                   const EditConfig& cfg, Rng& rng) {
  cfg.validate();
  if (K < 2) throw config_error("need at least 2 edit candidates, got " + std::to_string(K));
  if (M < 1) throw config_error("need at least 1 rollout per candidate");
  if (e_root.size() != cfg.cond_dim) {
    throw contract_error("root embedding size " + std::to_string(e_root.size()) +
                         " does not match cond_dim " + std::to_string(cfg.cond_dim));
  }
  std::vector<EditCandidate> out;
  out.reserve(K);
  for (int j = 0; j < K; ++j) {
    EditCandidate cand;
    cand.e_p = e_root + cfg.sigma_simple * rng.normal_vec(cfg.cond_dim);
    cand.zeta = rng.normal_vec(cfg.latent_dim);
    cand.mu = policy.propose_mu(cand.e_p, cand.zeta);
    cand.delta = project(cand.mu, cfg.eps_proj);
    cand.e_edit = cand.e_p + cand.delta;
    CodecResult codec = codec_roundtrip(cand.e_edit, cfg.grid_pitch);
    cand.tokens = std::move(codec.tokens);
    cand.e_re = std::move(codec.embedding);
    cand.reward = edit_reward(cand.e_p, cand.delta, cand.e_re, cfg);
    cand.mod_noise.reserve(M);
    for (int m = 0; m < M; ++m) {
      cand.mod_noise.push_back(cfg.sigma_mod * rng.normal_vec(cfg.cond_dim));
    }
    out.push_back(std::move(cand));
  }
  return out;
}

Vec conditioning_for_rollout(const EditCandidate& cand, int m) {
  if (m < 1 || static_cast<std::size_t>(m) > cand.mod_noise.size()) {
    throw contract_error("rollout index " + std::to_string(m) + " outside [1," +
                         std::to_string(cand.mod_noise.size()) + "]");
  }
  return cand.e_edit + cand.mod_noise[m - 1];
}

}  // namespace flowtrace::edit
