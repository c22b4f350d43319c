#include "flowtrace/scorer.hpp"

#include <cmath>

namespace flowtrace::scorer {

const char* tag_name(SensTag t) {
  switch (t) {
    case SensTag::early: return "early";
    case SensTag::late: return "late";
    case SensTag::neutral: return "neutral";
  }
  return "?";
}

const char* aggregator_name(Aggregator a) {
  switch (a) {
    case Aggregator::max: return "max";
    case Aggregator::mean: return "mean";
    case Aggregator::index: return "index";
  }
  return "?";
}

void ScorerConfig::validate() const {
  if (sample_dim < 1) throw config_error("scorer sample_dim must be positive");
  if (dims.empty()) throw config_error("scorer needs at least one dimension");
  int fd = feature_dim(task, sample_dim);
  for (std::size_t d = 0; d < dims.size(); ++d) {
    if (dims[d].weight.size() != fd) {
      throw config_error("dimension '" + dims[d].name + "' weight size " +
                         std::to_string(dims[d].weight.size()) + ", feature dim " +
                         std::to_string(fd));
    }
  }
  if (align_proj.rows() != cond_dim || align_proj.cols() != sample_dim) {
    throw config_error("align projection must be cond_dim x sample_dim");
  }
  if (agg == Aggregator::index && (agg_index < 0 || agg_index >= D())) {
    throw config_error("aggregator index outside [0,D)");
  }
  if (null_sample.size() != sample_dim) throw config_error("null sample has wrong size");
  if (task == TaskKind::point2 && sample_dim != 2) throw config_error("point2 task needs n=2");
  if (task == TaskKind::grid8 && sample_dim != 64) throw config_error("grid8 task needs n=64");
}

int feature_dim(TaskKind task, int sample_dim) {
  switch (task) {
    case TaskKind::point2: return 4;
    case TaskKind::grid8: return 7;
    case TaskKind::raw: return sample_dim + 1;
  }
  return 0;
}

namespace {

double logistic(double z) { return 1.0 / (1.0 + std::exp(-z)); }

// mean of each 4x4 quadrant of the 8x8 grid
void block_means(const Vec& g, double out[4]) {
  for (int q = 0; q < 4; ++q) out[q] = 0.0;
  for (int r = 0; r < 8; ++r) {
    for (int col = 0; col < 8; ++col) {
      int q = (r / 4) * 2 + (col / 4);
      out[q] += g[r * 8 + col];
    }
  }
  for (int q = 0; q < 4; ++q) out[q] /= 16.0;
}

double laplacian_energy(const Vec& g) {
  double e = 0.0;
  for (int r = 0; r < 8; ++r) {
    for (int col = 0; col < 8; ++col) {
      double v = 4.0 * g[r * 8 + col];
      v -= g[((r + 7) % 8) * 8 + col];
      v -= g[((r + 1) % 8) * 8 + col];
      v -= g[r * 8 + (col + 7) % 8];
      v -= g[r * 8 + (col + 1) % 8];
      e += v * v;
    }
  }
  return e / 64.0;
}

}  // namespace

Vec features(const Vec& sample, const Vec& c, const ScorerConfig& cfg) {
  if (sample.size() != cfg.sample_dim) {
    throw contract_error("sample size " + std::to_string(sample.size()) +
                         " does not match scorer (" + std::to_string(cfg.sample_dim) + ")");
  }
  if (c.size() != cfg.cond_dim) {
    throw contract_error("conditioning size " + std::to_string(c.size()) +
                         " does not match scorer (" + std::to_string(cfg.cond_dim) + ")");
  }
  const double inv_sqrt2 = 1.0 / std::sqrt(2.0);
  double coupling = (cfg.align_proj * sample).dot(c) / static_cast<double>(cfg.cond_dim);
  switch (cfg.task) {
    case TaskKind::point2: {
      Vec f(4);
      f[0] = (sample[0] + sample[1]) * inv_sqrt2;  // coarse: shared component
      f[1] = (sample[0] - sample[1]) * inv_sqrt2;  // fine: residual component
      f[2] = -0.5 * sample.squaredNorm();
      f[3] = coupling;
      return f;
    }
    case TaskKind::grid8: {
      Vec f(7);
      f[0] = sample.mean();
      double bm[4];
      block_means(sample, bm);
      for (int q = 0; q < 4; ++q) f[1 + q] = bm[q];
      f[5] = -laplacian_energy(sample);
      f[6] = coupling;
      return f;
    }
    case TaskKind::raw: {
      Vec f(sample.size() + 1);
      f.head(sample.size()) = sample;
      f[sample.size()] = coupling;
      return f;
    }
  }
  throw contract_error("unknown task kind");
}

Vec score_dims(const Vec& sample, const Vec& c, const ScorerConfig& cfg) {
  Vec f = features(sample, c, cfg);
  Vec out(cfg.D());
  for (int d = 0; d < cfg.D(); ++d) {
    const DimSpec& spec = cfg.dims[d];
    out[d] = logistic(spec.sharpness * spec.weight.dot(f) + spec.bias);
  }
  return out;
}

Vec net_score(const Vec& sample, const Vec& c, const ScorerConfig& cfg) {
  if (cfg.null_scores.size() != cfg.D()) {
    throw contract_error("scorer config missing cached null scores; call finalize()");
  }
  return score_dims(sample, c, cfg) - cfg.null_scores;
}

double align_score(const Vec& sample, const Vec& c, const ScorerConfig& cfg, bool* degenerate) {
  if (sample.size() != cfg.sample_dim || c.size() != cfg.cond_dim) {
    throw contract_error("align_score dimension mismatch");
  }
  Vec p = cfg.align_proj * sample;
  double np = p.norm();
  double nc = c.norm();
  if (degenerate) *degenerate = false;
  if (np == 0.0 || nc == 0.0) {
    if (degenerate) *degenerate = true;
    return 0.5;
  }
  double cosv = p.dot(c) / (np * nc);
  return 0.5 * (1.0 + cosv);
}

double aggregate(const Vec& tox, const ScorerConfig& cfg) {
  if (tox.size() != cfg.D()) throw contract_error("aggregate: tox size mismatch");
  switch (cfg.agg) {
    case Aggregator::max: return tox.maxCoeff();
    case Aggregator::mean: return tox.mean();
    case Aggregator::index: return tox[cfg.agg_index];
  }
  throw contract_error("unknown aggregator");
}

double terminal_reward(const Vec& tox, double align, const ScorerConfig& cfg) {
  return aggregate(tox, cfg) + cfg.w_align * align;
}

RewardRecord score_sample(const Vec& sample, const Vec& c, const ScorerConfig& cfg) {
  RewardRecord r;
  r.tox = score_dims(sample, c, cfg);
  r.align = align_score(sample, c, cfg, &r.degenerate_align);
  r.composite = terminal_reward(r.tox, r.align, cfg);
  return r;
}

void finalize(ScorerConfig& cfg) {
  cfg.validate();
  cfg.null_scores = score_dims(cfg.null_sample, Vec::Zero(cfg.cond_dim), cfg);
}

ScorerConfig ScorerConfig::standard(TaskKind task, int cond_dim, std::uint64_t seed) {
  if (task == TaskKind::raw) {
    throw config_error("no standard configuration for the raw task; build dims explicitly");
  }
  ScorerConfig cfg;
  cfg.task = task;
  cfg.sample_dim = task == TaskKind::point2 ? 2 : 64;
  cfg.cond_dim = cond_dim;
  Rng rng = Rng::stream(seed, {0x5c02e5});
  cfg.align_proj = Mat::NullaryExpr(cond_dim, cfg.sample_dim,
                                    [&]() { return rng.normal() / std::sqrt(cfg.sample_dim); });
  int fd = feature_dim(task, cfg.sample_dim);
  auto dim = [&](const std::string& name, SensTag tag, int feat, double w, double sharp,
                 double bias) {
    DimSpec d;
    d.name = name;
    d.tag = tag;
    d.weight = Vec::Zero(fd);
    d.weight[feat] = w;
    d.sharpness = sharp;
    d.bias = bias;
    return d;
  };
  if (task == TaskKind::point2) {
    // features: [coarse, fine, -0.5||x||^2, coupling]
    cfg.dims.push_back(dim("coarse_pos", SensTag::early, 0, 1.0, 1.2, -1.5));
    cfg.dims.push_back(dim("coarse_neg", SensTag::early, 0, -1.0, 1.2, -2.0));
    cfg.dims.push_back(dim("fine_pos", SensTag::late, 1, 1.0, 1.2, -1.5));
    cfg.dims.push_back(dim("fine_neg", SensTag::late, 1, -1.0, 1.2, -2.0));
    cfg.dims.push_back(dim("compact", SensTag::neutral, 2, 1.0, 0.8, 0.0));
    cfg.dims.push_back(dim("coupled", SensTag::neutral, 3, 1.0, 1.5, -1.0));
  } else {
    // features: [gmean, q0..q3, -lap, coupling]
    cfg.dims.push_back(dim("bright", SensTag::early, 0, 1.0, 1.5, -1.0));
    cfg.dims.push_back(dim("quad_contrast", SensTag::early, 1, 1.0, 1.2, -1.0));
    cfg.dims.push_back(dim("smooth", SensTag::late, 5, 0.25, 1.0, 0.0));
    cfg.dims.push_back(dim("quad3", SensTag::late, 4, -1.0, 1.2, -1.0));
    cfg.dims.push_back(dim("quad1", SensTag::neutral, 2, 1.0, 1.0, -1.0));
    cfg.dims.push_back(dim("coupled", SensTag::neutral, 6, 1.0, 1.5, -1.0));
  }
  cfg.null_sample = Vec::Zero(cfg.sample_dim);
  finalize(cfg);
  return cfg;
}

double structural_similarity(const Vec& a, const Vec& b, TaskKind task) {
  if (a.size() != b.size()) throw contract_error("structural_similarity size mismatch");
  if (task == TaskKind::grid8) {
    // single-window SSIM, standard constants, unit dynamic range
    const double C1 = 0.01 * 0.01;
    const double C2 = 0.03 * 0.03;
    const double n = static_cast<double>(a.size());
    double mu_a = a.mean();
    double mu_b = b.mean();
    double var_a = (a.array() - mu_a).square().sum() / n;
    double var_b = (b.array() - mu_b).square().sum() / n;
    double cov = ((a.array() - mu_a) * (b.array() - mu_b)).sum() / n;
    return ((2.0 * mu_a * mu_b + C1) * (2.0 * cov + C2)) /
           ((mu_a * mu_a + mu_b * mu_b + C1) * (var_a + var_b + C2));
  }
  double na = a.norm();
  double nb = b.norm();
  if (na == 0.0 && nb == 0.0) return 1.0;
  if (na == 0.0 || nb == 0.0) return 0.0;
  return a.dot(b) / (na * nb);
}

}  // namespace flowtrace::scorer
