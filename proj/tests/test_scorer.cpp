#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include "doctest.h"

#include "flowtrace/scorer.hpp"

#include <cmath>

using namespace flowtrace;
using namespace flowtrace::scorer;

namespace {

double logistic(double z) { return 1.0 / (1.0 + std::exp(-z)); }

ScorerConfig raw_cfg(int n, int cond) {
  ScorerConfig cfg;
  cfg.task = TaskKind::raw;
  cfg.sample_dim = n;
  cfg.cond_dim = cond;
  DimSpec d;
  d.name = "first";
  d.weight = Vec::Zero(n + 1);
  d.weight[0] = 1.0;
  d.sharpness = 2.0;
  d.bias = -0.5;
  cfg.dims.push_back(d);
  cfg.align_proj = Mat::Identity(cond, n);
  cfg.null_sample = Vec::Zero(n);
  finalize(cfg);
  return cfg;
}

}  // namespace

TEST_CASE("feature dimensions per task") {
  CHECK(feature_dim(TaskKind::point2, 2) == 4);
  CHECK(feature_dim(TaskKind::grid8, 64) == 7);
  CHECK(feature_dim(TaskKind::raw, 10) == 11);
}

TEST_CASE("point2 features split coarse and fine components") {
  ScorerConfig cfg = ScorerConfig::standard(TaskKind::point2, 4, 123);
  Vec x = (Vec(2) << 1.0, 0.5).finished();
  Vec c = Vec::Zero(4);
  Vec f = features(x, c, cfg);
  REQUIRE(f.size() == 4);
  const double s = 1.0 / std::sqrt(2.0);
  CHECK(f[0] == doctest::Approx(1.5 * s).epsilon(1e-14));
  CHECK(f[1] == doctest::Approx(0.5 * s).epsilon(1e-14));
  CHECK(f[2] == doctest::Approx(-0.5 * 1.25).epsilon(1e-14));
  CHECK(f[3] == doctest::Approx(0.0));  // zero conditioning kills the coupling
}

TEST_CASE("grid features read quadrants and roughness") {
  ScorerConfig cfg = ScorerConfig::standard(TaskKind::grid8, 4, 123);
  Vec g = Vec::Zero(64);
  for (int r = 0; r < 4; ++r)
    for (int col = 0; col < 4; ++col) g[r * 8 + col] = 1.0;  // top-left quadrant lit
  Vec f = features(g, Vec::Zero(4), cfg);
  REQUIRE(f.size() == 7);
  CHECK(f[0] == doctest::Approx(0.25));   // global mean
  CHECK(f[1] == doctest::Approx(1.0));    // quadrant 0
  CHECK(f[2] == doctest::Approx(0.0));
  CHECK(f[3] == doctest::Approx(0.0));
  CHECK(f[4] == doctest::Approx(0.0));
  CHECK(f[5] < 0.0);                      // edges cost roughness
  // constant grids are perfectly smooth
  Vec flat = Vec::Constant(64, 0.7);
  CHECK(features(flat, Vec::Zero(4), cfg)[5] == doctest::Approx(0.0));
}

TEST_CASE("dimension scores are calibrated logistics") {
  ScorerConfig cfg = raw_cfg(3, 2);
  Vec x = (Vec(3) << 0.4, -1.0, 2.0).finished();
  Vec sc = score_dims(x, Vec::Zero(2), cfg);
  REQUIRE(sc.size() == 1);
  CHECK(sc[0] == doctest::Approx(logistic(2.0 * 0.4 - 0.5)).epsilon(1e-14));
  CHECK(sc[0] > 0.0);
  CHECK(sc[0] < 1.0);

  // monotone response along the watched coordinate
  Vec lo = x, hi = x;
  lo[0] = -3.0;
  hi[0] = 3.0;
  CHECK(score_dims(lo, Vec::Zero(2), cfg)[0] < sc[0]);
  CHECK(score_dims(hi, Vec::Zero(2), cfg)[0] > sc[0]);
}

TEST_CASE("net score subtracts the cached null response") {
  ScorerConfig cfg = raw_cfg(3, 2);
  Vec null_net = net_score(cfg.null_sample, Vec::Zero(2), cfg);
  CHECK(null_net.cwiseAbs().maxCoeff() == 0.0);

  Vec x = (Vec(3) << 1.0, 0.0, 0.0).finished();
  Vec n = net_score(x, Vec::Zero(2), cfg);
  CHECK(n[0] == doctest::Approx(logistic(1.5) - logistic(-0.5)).epsilon(1e-14));

  ScorerConfig unfinalized = cfg;
  unfinalized.null_scores = Vec(0);
  CHECK_THROWS_AS(net_score(x, Vec::Zero(2), unfinalized), contract_error);
}

TEST_CASE("alignment squashes the projected cosine") {
  ScorerConfig cfg = raw_cfg(2, 2);  // identity projection
  Vec x = (Vec(2) << 1.0, 0.0).finished();
  bool degen = false;
  CHECK(align_score(x, (Vec(2) << 2.0, 0.0).finished(), cfg, &degen) == doctest::Approx(1.0));
  CHECK_FALSE(degen);
  CHECK(align_score(x, (Vec(2) << -1.0, 0.0).finished(), cfg, &degen) == doctest::Approx(0.0));
  CHECK(align_score(x, (Vec(2) << 0.0, 1.0).finished(), cfg, &degen) == doctest::Approx(0.5));
  CHECK(align_score(Vec::Zero(2), x, cfg, &degen) == doctest::Approx(0.5));
  CHECK(degen);
}

TEST_CASE("aggregators and the composite reward") {
  ScorerConfig cfg = raw_cfg(3, 2);
  DimSpec d2 = cfg.dims[0];
  d2.name = "second";
  d2.weight = Vec::Zero(4);
  d2.weight[1] = 1.0;
  cfg.dims.push_back(d2);
  finalize(cfg);

  Vec tox = (Vec(2) << 0.3, 0.8).finished();
  cfg.agg = Aggregator::max;
  CHECK(aggregate(tox, cfg) == doctest::Approx(0.8));
  cfg.agg = Aggregator::mean;
  CHECK(aggregate(tox, cfg) == doctest::Approx(0.55));
  cfg.agg = Aggregator::index;
  cfg.agg_index = 0;
  CHECK(aggregate(tox, cfg) == doctest::Approx(0.3));

  cfg.w_align = 0.2;
  CHECK(terminal_reward(tox, 0.75, cfg) == doctest::Approx(0.3 + 0.2 * 0.75));

  Vec x = (Vec(3) << 0.5, -0.5, 0.0).finished();
  Vec c = (Vec(2) << 1.0, 0.0).finished();
  RewardRecord rec = score_sample(x, c, cfg);
  CHECK(rec.tox.size() == 2);
  CHECK(rec.composite ==
        doctest::Approx(aggregate(rec.tox, cfg) + 0.2 * rec.align).epsilon(1e-14));
}

TEST_CASE("standard configs are finalized and reproducible") {
  ScorerConfig a = ScorerConfig::standard(TaskKind::point2, 6, 42);
  ScorerConfig b = ScorerConfig::standard(TaskKind::point2, 6, 42);
  CHECK(a.D() == 6);
  CHECK(a.null_scores.size() == 6);
  CHECK((a.align_proj - b.align_proj).cwiseAbs().maxCoeff() == 0.0);

  ScorerConfig c = ScorerConfig::standard(TaskKind::point2, 6, 43);
  CHECK((a.align_proj - c.align_proj).cwiseAbs().maxCoeff() > 0.0);

  ScorerConfig g = ScorerConfig::standard(TaskKind::grid8, 6, 42);
  CHECK(g.sample_dim == 64);
  CHECK_NOTHROW(g.validate());
  CHECK_THROWS_AS(ScorerConfig::standard(TaskKind::raw, 6, 42), config_error);
}

TEST_CASE("validation catches malformed configs") {
  ScorerConfig cfg = raw_cfg(3, 2);
  ScorerConfig bad = cfg;
  bad.dims[0].weight = Vec::Zero(2);
  CHECK_THROWS_AS(bad.validate(), config_error);
  bad = cfg;
  bad.align_proj = Mat::Zero(1, 3);
  CHECK_THROWS_AS(bad.validate(), config_error);
  bad = cfg;
  bad.agg = Aggregator::index;
  bad.agg_index = 5;
  CHECK_THROWS_AS(bad.validate(), config_error);
  bad = cfg;
  bad.dims.clear();
  CHECK_THROWS_AS(bad.validate(), config_error);
}

TEST_CASE("structural similarity") {
  SUBCASE("identical inputs score 1") {
    Vec g = Rng(9).normal_vec(64);
    CHECK(structural_similarity(g, g, TaskKind::grid8) == doctest::Approx(1.0).epsilon(1e-12));
    Vec x = Rng(10).normal_vec(5);
    CHECK(structural_similarity(x, x, TaskKind::raw) == doctest::Approx(1.0).epsilon(1e-12));
  }
  SUBCASE("cosine branch behaves like a cosine") {
    Vec a = (Vec(2) << 1.0, 0.0).finished();
    Vec b = (Vec(2) << 0.0, 1.0).finished();
    CHECK(structural_similarity(a, b, TaskKind::point2) == doctest::Approx(0.0));
    CHECK(structural_similarity(a, -a, TaskKind::point2) == doctest::Approx(-1.0));
    CHECK(structural_similarity(Vec::Zero(2), Vec::Zero(2), TaskKind::point2) == 1.0);
    CHECK(structural_similarity(Vec::Zero(2), a, TaskKind::point2) == 0.0);
  }
  SUBCASE("grid branch penalizes structure loss more than gain offsets") {
    Vec g = Rng(11).normal_vec(64);
    Vec shuffled = g.reverse();
    double self = structural_similarity(g, g, TaskKind::grid8);
    double off = structural_similarity(g, shuffled, TaskKind::grid8);
    CHECK(off < self);
  }
  CHECK_THROWS_AS(structural_similarity(Vec::Zero(2), Vec::Zero(3), TaskKind::raw),
                  contract_error);
}

TEST_CASE("scores stay inside the unit interval across random probes") {
  ScorerConfig cfg = ScorerConfig::standard(TaskKind::point2, 8, 77);
  Rng rng(1234);
  for (int i = 0; i < 200; ++i) {
    Vec x = 3.0 * rng.normal_vec(2);
    Vec c = rng.normal_vec(8);
    Vec sc = score_dims(x, c, cfg);
    CHECK(sc.minCoeff() >= 0.0);
    CHECK(sc.maxCoeff() <= 1.0);
    RewardRecord rec = score_sample(x, c, cfg);
    CHECK(rec.align >= 0.0);
    CHECK(rec.align <= 1.0);
  }
}
