#ifndef FLOWTRACE_SCORER_HPP
#define FLOWTRACE_SCORER_HPP

#include "flowtrace/common.hpp"

#include <string>

namespace flowtrace::scorer {

// multi-dimensional bounded scorer. the optimizer and the attribution tools
// only ever call these functions on terminal samples; nothing outside this
// module looks at the weights.

enum class SensTag { early, late, neutral };
enum class Aggregator { max, mean, index };
enum class TaskKind { point2, grid8, raw };

const char* tag_name(SensTag t);
const char* aggregator_name(Aggregator a);

struct DimSpec {
  std::string name;
  SensTag tag = SensTag::neutral;
  Vec weight;          // over the task feature vector
  double bias = 0.0;
  double sharpness = 1.0;
};

struct ScorerConfig {
  TaskKind task = TaskKind::point2;
  int sample_dim = 2;
  int cond_dim = 16;
  std::vector<DimSpec> dims;
  Mat align_proj;          // cond_dim x sample_dim, fixed
  double w_align = 0.2;
  Aggregator agg = Aggregator::max;
  int agg_index = 0;
  Vec null_sample;         // stored reference input, not assumed zero
  Vec null_scores;         // cached score_dims(null_sample, c = 0)

  int D() const { return static_cast<int>(dims.size()); }
  void validate() const;

  // seeded default configuration with the standard six dimensions
  static ScorerConfig standard(TaskKind task, int cond_dim, std::uint64_t seed);
};

// caches null_scores; call after hand-editing a config
void finalize(ScorerConfig& cfg);

int feature_dim(TaskKind task, int sample_dim);
Vec features(const Vec& sample, const Vec& c, const ScorerConfig& cfg);

// per-dimension scores in [0,1]^D
Vec score_dims(const Vec& sample, const Vec& c, const ScorerConfig& cfg);

// score_dims(sample) - score_dims(null baseline), in [-1,1]^D
Vec net_score(const Vec& sample, const Vec& c, const ScorerConfig& cfg);

// squashed cosine between the projected sample and c: 1 parallel, 0 opposed,
// 0.5 orthogonal or degenerate (zero-norm input, reported via the flag)
double align_score(const Vec& sample, const Vec& c, const ScorerConfig& cfg,
                   bool* degenerate = nullptr);

double aggregate(const Vec& tox, const ScorerConfig& cfg);
double terminal_reward(const Vec& tox, double align, const ScorerConfig& cfg);

struct RewardRecord {
  Vec tox;
  double align = 0.0;
  double composite = 0.0;
  bool degenerate_align = false;
};

RewardRecord score_sample(const Vec& sample, const Vec& c, const ScorerConfig& cfg);

// SSIM with the standard constants on grid tasks (single 8x8 window, unit
// dynamic range), cosine similarity otherwise
double structural_similarity(const Vec& a, const Vec& b, TaskKind task);

}  // namespace flowtrace::scorer

#endif
