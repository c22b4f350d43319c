#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include "doctest.h"

#include "flowtrace/io.hpp"

#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <sstream>

using namespace flowtrace;
using namespace flowtrace::io;

namespace fs = std::filesystem;

namespace {

double max_abs_diff(const Vec& a, const Vec& b) { return (a - b).cwiseAbs().maxCoeff(); }

std::string slurp(const std::string& path) {
  std::ifstream f(path, std::ios::binary);
  REQUIRE(f.good());
  std::ostringstream ss;
  ss << f.rdbuf();
  return ss.str();
}

struct TempDir {
  fs::path path;
  explicit TempDir(const std::string& name) : path(fs::temp_directory_path() / name) {
    fs::remove_all(path);
    fs::create_directories(path);
  }
  ~TempDir() { fs::remove_all(path); }
  std::string str() const { return path.string(); }
  std::string file(const std::string& n) const { return (path / n).string(); }
};

RunConfig tiny_config(const std::string& out) {
  RunConfig cfg = default_config();
  cfg.task = "toy2d";
  cfg.seed = 5;
  cfg.epochs = 2;
  cfg.out_dir = out;
  cfg.schedule.steps = 4;
  cfg.hyper.K = 2;
  cfg.hyper.M = 2;
  cfg.net_hidden = 8;
  cfg.net_depth = 1;
  cfg.analysis.steps = 8;
  cfg.analysis.plan.T0 = 2;
  cfg.analysis.plan.levels = 2;
  cfg.analysis.plan.samples = {6, 4, 2};
  cfg.analysis.calibration_rollouts = 2;
  cfg.analysis.rollouts = 4;
  cfg.intervene.early_lo = 1;
  cfg.intervene.early_hi = 3;
  cfg.intervene.late_lo = 5;
  cfg.intervene.late_hi = 8;
  cfg.intervene.rollouts = 4;
  cfg.sweep.kappa = {0.0, 0.05};
  cfg.sweep.kappa_rollouts = 4;
  cfg.validate();
  return cfg;
}

rl::Engine engine_for(const RunConfig& cfg) {
  TaskBundle b = make_task(cfg);
  scorer::ScorerConfig scfg = b.scorer;
  scfg.w_align = cfg.w_align;
  scfg.agg = cfg.aggregator;
  scfg.agg_index = cfg.agg_index;
  scorer::finalize(scfg);
  return rl::Engine(b.policy, b.editor, b.edit, scfg, cfg.schedule, cfg.hyper, cfg.mode,
                    b.e_root, cfg.seed);
}

}  // namespace

TEST_CASE("default config survives the dump/parse round trip") {
  RunConfig cfg = default_config();
  std::string text = dump_config(cfg);
  RunConfig back = parse_config(text);
  CHECK(dump_config(back) == text);
  CHECK(config_hash(back) == config_hash(cfg));
  CHECK_NOTHROW(back.validate());
}

TEST_CASE("parser rejects unknown keys with their path") {
  RunConfig base = default_config();
  std::string text = dump_config(base);

  SUBCASE("top level") {
    std::string bad = text;
    bad.insert(bad.find("\"task\""), "\"tassk\": \"toy2d\", ");
    CHECK_THROWS_WITH_AS(parse_config(bad), doctest::Contains("tassk"), config_error);
  }
  SUBCASE("nested") {
    std::string bad = text;
    bad.insert(bad.find("\"steps\""), "\"stepz\": 3, ");
    try {
      parse_config(bad);
      FAIL("expected a config error");
    } catch (const config_error& e) {
      CHECK(std::string(e.what()).find("stepz") != std::string::npos);
    }
  }
  SUBCASE("future versions are refused") {
    std::string bad = text;
    std::size_t pos = bad.find("\"config_version\": 1");
    REQUIRE(pos != std::string::npos);
    bad.replace(pos, std::string("\"config_version\": 1").size(), "\"config_version\": 2");
    CHECK_THROWS_AS(parse_config(bad), config_error);
  }
  SUBCASE("malformed json") {
    CHECK_THROWS_AS(parse_config("{nope"), config_error);
  }
  SUBCASE("bad enum values") {
    RunConfig cfg = default_config();
    std::string t = dump_config(cfg);
    std::size_t pos = t.find("\"mode\": \"full\"");
    REQUIRE(pos != std::string::npos);
    t.replace(pos, std::string("\"mode\": \"full\"").size(), "\"mode\": \"sideways\"");
    CHECK_THROWS_AS(parse_config(t), config_error);
  }
}

TEST_CASE("config hash tracks training fields only") {
  RunConfig cfg = default_config();
  std::uint64_t h = config_hash(cfg);

  RunConfig same = cfg;
  same.out_dir = "elsewhere";
  same.threads = 7;
  same.epochs = 999;
  same.analysis.eta = 0.5;
  same.intervene.rollouts = 3;
  same.sweep.kappa = {1.0};
  same.checkpoint_every = 5;
  CHECK(config_hash(same) == h);

  RunConfig seed_moved = cfg;
  seed_moved.seed = 2;
  CHECK(config_hash(seed_moved) != h);
  RunConfig sched_moved = cfg;
  sched_moved.schedule.steps = 21;
  CHECK(config_hash(sched_moved) != h);
  RunConfig lr_moved = cfg;
  lr_moved.hyper.lr_low = 1e-4;
  CHECK(config_hash(lr_moved) != h);
  RunConfig task_moved = cfg;
  task_moved.task = "grid8";
  CHECK(config_hash(task_moved) != h);
}

TEST_CASE("environment overrides are scoped to output and threads") {
  RunConfig cfg = default_config();
  unsetenv("FLOWTRACE_OUT");
  unsetenv("FLOWTRACE_THREADS");
  apply_env_overrides(cfg);
  CHECK(cfg.out_dir == "runs/out");
  CHECK(cfg.threads == 1);

  setenv("FLOWTRACE_OUT", "env/dir", 1);
  setenv("FLOWTRACE_THREADS", "9", 1);
  apply_env_overrides(cfg);
  CHECK(cfg.out_dir == "env/dir");
  CHECK(cfg.threads == 9);

  setenv("FLOWTRACE_THREADS", "zero", 1);
  CHECK_THROWS_AS(apply_env_overrides(cfg), config_error);
  setenv("FLOWTRACE_THREADS", "0", 1);
  CHECK_THROWS_AS(apply_env_overrides(cfg), config_error);
  unsetenv("FLOWTRACE_OUT");
  unsetenv("FLOWTRACE_THREADS");
}

TEST_CASE("task bundles are consistent and reproducible") {
  for (const std::string& name : task_names()) {
    RunConfig cfg = default_config();
    cfg.task = name;
    if (name == "window" || name == "linear") cfg.mode = rl::TrainMode::flat;
    if (name == "dual") cfg.mode = rl::TrainMode::no_edit;
    TaskBundle a = make_task(cfg);
    TaskBundle b = make_task(cfg);
    INFO("task ", name);
    CHECK(a.policy->sample_dim() == a.scorer.sample_dim);
    CHECK(a.policy->cond_dim() == a.scorer.cond_dim);
    CHECK(a.e_root.size() == a.scorer.cond_dim);
    CHECK(a.scorer.null_scores.size() == a.scorer.D());
    CHECK(max_abs_diff(a.e_root, b.e_root) == 0.0);
    if (a.policy->trainable_count() > 0) {
      CHECK(max_abs_diff(a.policy->trainable_params(), b.policy->trainable_params()) == 0.0);
    }
    if (a.editor) {
      REQUIRE(b.editor);
      CHECK(max_abs_diff(nn::pack(a.editor->net), nn::pack(b.editor->net)) == 0.0);
    }
  }
  RunConfig bad = default_config();
  bad.task = "nonesuch";
  CHECK_THROWS_AS(bad.validate(), config_error);
}

TEST_CASE("different seeds give different initializations") {
  RunConfig a_cfg = default_config();
  RunConfig b_cfg = default_config();
  b_cfg.seed = a_cfg.seed + 1;
  TaskBundle a = make_task(a_cfg);
  TaskBundle b = make_task(b_cfg);
  auto* na = dynamic_cast<flow::NeuralPolicy*>(a.policy.get());
  auto* nb = dynamic_cast<flow::NeuralPolicy*>(b.policy.get());
  REQUIRE(na);
  REQUIRE(nb);
  CHECK(max_abs_diff(nn::pack(na->net), nn::pack(nb->net)) > 0.0);
}

TEST_CASE("float32 conversion is the quantization boundary") {
  Vec v(3);
  v << 0.1, -2.5, 1e-20;
  std::vector<float> f = to_f32(v);
  Vec back = from_f32(f);
  CHECK(back[1] == -2.5);  // representable exactly
  CHECK(back[0] == doctest::Approx(0.1).epsilon(1e-7));
  // quantizing twice is the identity
  CHECK(max_abs_diff(from_f32(to_f32(back)), back) == 0.0);
}

TEST_CASE("checkpoints round trip bitwise") {
  TempDir dir("ft_ckpt_test");
  RunConfig cfg = tiny_config(dir.str());
  rl::Engine eng = engine_for(cfg);
  eng.train_epoch(1);

  Checkpoint ck = checkpoint_of(eng, 1, config_hash(cfg));
  std::string p1 = dir.file("a.ckpt");
  std::string p2 = dir.file("b.ckpt");
  save_checkpoint(p1, ck);
  Checkpoint loaded = load_checkpoint(p1);
  save_checkpoint(p2, loaded);
  CHECK(slurp(p1) == slurp(p2));
  CHECK(loaded.epoch == 1);
  CHECK(loaded.config_hash == config_hash(cfg));
  CHECK(loaded.adam_low_step == eng.adam_low().step);

  // restoring into a fresh engine reproduces the parameters exactly
  rl::Engine fresh = engine_for(cfg);
  CHECK(max_abs_diff(fresh.policy().trainable_params(), eng.policy().trainable_params()) > 0.0);
  apply_checkpoint(loaded, fresh);
  CHECK(max_abs_diff(from_f32(to_f32(fresh.policy().trainable_params())),
                     from_f32(to_f32(eng.policy().trainable_params()))) == 0.0);
  CHECK(fresh.adam_low().step == eng.adam_low().step);
  CHECK(fresh.adam_high().step == eng.adam_high().step);
}

TEST_CASE("corrupt checkpoints are rejected whole") {
  TempDir dir("ft_ckpt_bad");
  RunConfig cfg = tiny_config(dir.str());
  rl::Engine eng = engine_for(cfg);
  Checkpoint ck = checkpoint_of(eng, 0, config_hash(cfg));
  std::string good_path = dir.file("good.ckpt");
  save_checkpoint(good_path, ck);
  std::string good = slurp(good_path);

  SUBCASE("missing file") {
    CHECK_THROWS_AS(load_checkpoint(dir.file("absent.ckpt")), io_error);
  }
  SUBCASE("truncated payload") {
    std::ofstream f(dir.file("trunc.ckpt"), std::ios::binary);
    f.write(good.data(), static_cast<long>(good.size() - 37));
    f.close();
    CHECK_THROWS_AS(load_checkpoint(dir.file("trunc.ckpt")), io_error);
  }
  SUBCASE("bad magic") {
    std::string bad = "not-a-checkpoint v9\n" + good.substr(good.find('\n') + 1);
    std::ofstream f(dir.file("magic.ckpt"), std::ios::binary);
    f.write(bad.data(), static_cast<long>(bad.size()));
    f.close();
    CHECK_THROWS_AS(load_checkpoint(dir.file("magic.ckpt")), io_error);
  }
  SUBCASE("version from the future names both versions") {
    std::string bad = good;
    bad.replace(bad.find("v1"), 2, "v3");
    std::ofstream f(dir.file("vers.ckpt"), std::ios::binary);
    f.write(bad.data(), static_cast<long>(bad.size()));
    f.close();
    try {
      load_checkpoint(dir.file("vers.ckpt"));
      FAIL("expected an io error");
    } catch (const io_error& e) {
      std::string msg = e.what();
      CHECK(msg.find('3') != std::string::npos);
      CHECK(msg.find('1') != std::string::npos);
    }
  }
  SUBCASE("trailing garbage") {
    std::ofstream f(dir.file("tail.ckpt"), std::ios::binary);
    f.write(good.data(), static_cast<long>(good.size()));
    f.write("extra", 5);
    f.close();
    CHECK_THROWS_AS(load_checkpoint(dir.file("tail.ckpt")), io_error);
  }
  SUBCASE("shape mismatch leaves the engine untouched") {
    RunConfig other = tiny_config(dir.str());
    other.net_hidden = 6;  // different parameter count
    rl::Engine victim = engine_for(other);
    Vec before = victim.policy().trainable_params();
    Vec editor_before = nn::pack(victim.editor()->net);
    CHECK_THROWS_AS(apply_checkpoint(ck, victim), io_error);
    CHECK(max_abs_diff(victim.policy().trainable_params(), before) == 0.0);
    CHECK(max_abs_diff(nn::pack(victim.editor()->net), editor_before) == 0.0);
    CHECK(victim.adam_low().step == 0);
  }
}

TEST_CASE("metrics lines are stable and parseable") {
  rl::EpochMetrics m;
  m.epoch = 3;
  m.reward_mean = 0.5;
  m.reward_max = 1.0;
  m.net_mean = (Vec(2) << 0.25, -0.125).finished();
  m.kl_low = 0.0625;
  m.clip_fraction = 0.0;
  m.edit_reward_mean = 0.375;
  m.kl_high = 0.015625;
  m.low_applied = true;
  m.high_applied = false;

  std::string line = metrics_line(m);
  CHECK(line ==
        "{\"epoch\":3,\"reward_mean\":0.5,\"reward_max\":1,\"net_mean\":[0.25,-0.125],"
        "\"kl_low\":0.0625,\"clip_fraction\":0,\"edit_reward_mean\":0.375,"
        "\"kl_high\":0.015625,\"low_applied\":true,\"high_applied\":false}");

  rl::EpochMetrics back = parse_metrics_line(line);
  CHECK(back.epoch == 3);
  CHECK(back.reward_mean == 0.5);
  CHECK(back.net_mean.size() == 2);
  CHECK(back.net_mean[1] == -0.125);
  CHECK(back.low_applied);
  CHECK_FALSE(back.high_applied);
  CHECK(parse_metrics_line(metrics_line(back)).kl_high == 0.015625);
  CHECK_THROWS_AS(parse_metrics_line("{bad"), io_error);
}

TEST_CASE("map CSV holds float32 values exactly") {
  TempDir dir("ft_map_csv");
  Mat m(3, 2);
  m << 0.1, -0.2, 1e-9, 2.5, -1.0 / 3.0, 0.0;
  std::vector<std::string> dims = {"alpha", "beta"};
  std::string path = dir.file("m.csv");
  write_map_csv(path, m, dims);

  std::vector<std::string> back_dims;
  Mat back = read_map_csv(path, &back_dims);
  CHECK(back_dims == dims);
  REQUIRE(back.rows() == 3);
  REQUIRE(back.cols() == 2);
  for (int r = 0; r < 3; ++r)
    for (int c = 0; c < 2; ++c)
      CHECK(back(r, c) == static_cast<double>(static_cast<float>(m(r, c))));

  // second write of the read-back matrix is byte identical
  std::string path2 = dir.file("m2.csv");
  write_map_csv(path2, back, back_dims);
  CHECK(slurp(path) == slurp(path2));

  std::ofstream f(dir.file("bad.csv"));
  f << "wrong,header\n1,2\n";
  f.close();
  CHECK_THROWS_AS(read_map_csv(dir.file("bad.csv")), io_error);
}

TEST_CASE("training runs are deterministic end to end") {
  TempDir da("ft_train_a");
  TempDir db("ft_train_b");
  RunConfig ca = tiny_config(da.str());
  RunConfig cb = tiny_config(db.str());
  CmdResult ra = cmd_train(ca);
  CmdResult rb = cmd_train(cb);
  CHECK(ra.exit_code == 0);
  CHECK(rb.exit_code == 0);
  CHECK(slurp(da.file("metrics.jsonl")) == slurp(db.file("metrics.jsonl")));
  CHECK(slurp(da.file("checkpoint.ckpt")) == slurp(db.file("checkpoint.ckpt")));
  CHECK(fs::exists(da.file("config.json")));
  CHECK(fs::exists(da.file("timing.jsonl")));

  // two epochs logged
  std::istringstream lines(slurp(da.file("metrics.jsonl")));
  std::string line;
  int count = 0;
  while (std::getline(lines, line))
    if (!line.empty()) ++count;
  CHECK(count == 2);
}

TEST_CASE("zero-epoch training still writes config and checkpoint") {
  TempDir dir("ft_train_zero");
  RunConfig cfg = tiny_config(dir.str());
  cfg.epochs = 0;
  CmdResult r = cmd_train(cfg);
  CHECK(r.exit_code == 0);
  CHECK(slurp(dir.file("metrics.jsonl")).empty());
  Checkpoint ck = load_checkpoint(dir.file("checkpoint.ckpt"));
  CHECK(ck.epoch == 0);
}

TEST_CASE("periodic checkpoints appear at the configured cadence") {
  TempDir dir("ft_train_period");
  RunConfig cfg = tiny_config(dir.str());
  cfg.epochs = 4;
  cfg.checkpoint_every = 2;
  CHECK(cmd_train(cfg).exit_code == 0);
  CHECK(fs::exists(dir.file("checkpoint_epoch2.ckpt")));
  CHECK_FALSE(fs::exists(dir.file("checkpoint_epoch4.ckpt")));  // folded into the final one
  CHECK(fs::exists(dir.file("checkpoint.ckpt")));
  CHECK(load_checkpoint(dir.file("checkpoint_epoch2.ckpt")).epoch == 2);
  CHECK(load_checkpoint(dir.file("checkpoint.ckpt")).epoch == 4);
}

TEST_CASE("analyze produces maps aligned with the analysis schedule") {
  TempDir dir("ft_analyze");
  RunConfig cfg = tiny_config(dir.str());
  CHECK(cmd_train(cfg).exit_code == 0);
  CmdResult r = cmd_analyze(cfg, dir.file("checkpoint.ckpt"));
  CHECK(r.exit_code == 0);
  std::vector<std::string> dims;
  Mat raw = read_map_csv(dir.file("map_raw.csv"), &dims);
  CHECK(raw.rows() == cfg.analysis.steps);
  CHECK(raw.cols() == 6);
  CHECK(dims.size() == 6);
  Mat rescaled = read_map_csv(dir.file("map_rescaled.csv"));
  CHECK(rescaled.cwiseAbs().maxCoeff() <= 1.0 + 1e-6);
  Mat se = read_map_csv(dir.file("map_se.csv"));
  CHECK(se.minCoeff() >= 0.0);
  CHECK(slurp(dir.file("map.svg")).find("<svg") != std::string::npos);

  // a checkpoint trained under different physics is refused
  RunConfig other = tiny_config(dir.str());
  other.schedule.sigma_base = 2.0;
  CHECK_THROWS_AS(cmd_analyze(other, dir.file("checkpoint.ckpt")), io_error);
}

TEST_CASE("intervene writes one row per window") {
  TempDir dir("ft_intervene");
  RunConfig cfg = tiny_config(dir.str());
  CHECK(cmd_train(cfg).exit_code == 0);
  CmdResult r = cmd_intervene(cfg, dir.file("checkpoint.ckpt"));
  CHECK(r.exit_code == 0);
  std::string csv = slurp(dir.file("intervene.csv"));
  CHECK(csv.find("none,") != std::string::npos);
  CHECK(csv.find("early,") != std::string::npos);
  CHECK(csv.find("late,") != std::string::npos);
  CHECK(csv.find("both,") != std::string::npos);
}

TEST_CASE("sweeps cover their axes") {
  TempDir dir("ft_sweep");
  RunConfig cfg = tiny_config(dir.str());
  cfg.epochs = 1;
  cfg.sweep.sigma = {0.5, 1.5};

  CmdResult r = cmd_sweep(cfg, "sigma", "");
  CHECK(r.exit_code == 0);
  std::string csv = slurp(dir.file("sweep_sigma.csv"));
  CHECK(csv.find("0.5,") != std::string::npos);
  CHECK(csv.find("1.5,") != std::string::npos);
  CHECK(fs::exists(dir.file("sweep_sigma_0.jsonl")));
  CHECK(fs::exists(dir.file("sweep_sigma_1.jsonl")));

  CmdResult k = cmd_sweep(cfg, "kappa", "");
  CHECK(k.exit_code == 0);
  CHECK(fs::exists(dir.file("sweep_kappa.csv")));

  CmdResult bad = cmd_sweep(cfg, "flux", "");
  CHECK(bad.exit_code == 2);
}

TEST_CASE("export summarizes checkpoints and re-renders maps") {
  TempDir dir("ft_export");
  RunConfig cfg = tiny_config(dir.str());
  CHECK(cmd_train(cfg).exit_code == 0);
  CHECK(cmd_analyze(cfg, dir.file("checkpoint.ckpt")).exit_code == 0);

  CmdResult r = cmd_export(cfg, "map", dir.file("checkpoint.ckpt"));
  CHECK(r.exit_code == 0);
  CHECK(fs::exists(dir.file("map.svg")));
  std::string info = slurp(dir.file("checkpoint_info.json"));
  CHECK(info.find("\"epoch\": 2") != std::string::npos);
  CHECK(info.find("adam_low_step") != std::string::npos);

  CmdResult nothing = cmd_export(cfg, "", "");
  CHECK(nothing.exit_code == 2);
}
