#ifndef FLOWTRACE_EDIT_HPP
#define FLOWTRACE_EDIT_HPP

#include "flowtrace/common.hpp"
#include "flowtrace/nn.hpp"

namespace flowtrace::edit {

// conditioning-edit machinery: a small policy proposes bounded edits of a
// root conditioning embedding; a grid codec stands in for a text round trip.

struct EditConfig {
  int cond_dim = 16;
  int latent_dim = 4;
  double eps_proj = 0.8;      // projection radius
  double sigma_simple = 0.01; // jitter on the root embedding per candidate
  double sigma_mod = 0.02;    // per-rollout conditioning jitter
  double lambda_sem = 1.0;
  double lambda_recon = 0.1;
  double tau_sem = 0.7;
  double grid_pitch = 0.05;   // codec quantization pitch
  double sigma_head = 0.1;    // std of the Gaussian policy head over proposed edits

  void validate() const;
};

// scaled projection onto the eps-ball: eps * mu / max(||mu||, eps).
// never exceeds radius eps; preserves direction; hits the boundary exactly
// when ||mu|| >= eps.
Vec project(const Vec& mu, double eps_proj);

struct CodecResult {
  std::vector<long> tokens;  // grid indices
  Vec embedding;             // decoded embedding, tokens * pitch
};

// nearest-grid quantizer; ties round toward zero. idempotent on its output.
CodecResult codec_roundtrip(const Vec& e, double pitch);

struct EditReward {
  double value = 0.0;
  double sem = 0.0;    // hinged cosine term before lambda weighting
  double recon = 0.0;  // reconstruction proximity term before lambda weighting
  bool degenerate_cosine = false;
};

// lambda_sem*[cos(e_p, e_p+delta) - tau]_+ + lambda_recon/(1 + ||e_p+delta - e_re||^2)
EditReward edit_reward(const Vec& e_p, const Vec& delta, const Vec& e_re, const EditConfig& cfg);

struct EditCandidate {
  Vec e_p;      // jittered root embedding
  Vec zeta;     // latent draw fed to the policy
  Vec mu;       // raw proposed edit
  Vec delta;    // projected edit
  Vec e_edit;   // e_p + delta
  std::vector<long> tokens;
  Vec e_re;     // decoded embedding after the codec round trip
  EditReward reward;
  std::vector<Vec> mod_noise;  // M per-rollout jitters
};

// the edit policy maps (e_p, zeta) -> mu through a small MLP; the scalar
// input slot is fed 0. its Gaussian head has mean net(e_p, 0) and fixed std.
struct EditPolicy {
  nn::NetworkParams net;

  Vec propose_mu(const Vec& e_p, const Vec& zeta) const;
  Vec head_mean(const Vec& e_p) const;  // canonical mean at zeta = 0
};

EditPolicy make_edit_policy(const EditConfig& cfg, Rng& rng, int hidden = 32, int depth = 2);

// draw K candidates with M conditioning jitters each
std::vector<EditCandidate> propose(const EditPolicy& policy, const Vec& e_root, int K, int M,
                                   const EditConfig& cfg, Rng& rng);

// conditioning for rollout m (1-based) of a candidate
Vec conditioning_for_rollout(const EditCandidate& cand, int m);

}  // namespace flowtrace::edit

#endif
