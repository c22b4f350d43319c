// flowtrace: train a gated policy against the bundled scorer, then localize
// when in the denoising schedule the score response is earned.

#include <cstdio>
#include <optional>
#include <string>
#include <vector>

#include "CLI11.hpp"
#include "flowtrace/io.hpp"

namespace ft = flowtrace;

namespace {

struct Overrides {
  std::optional<std::string> task, mode, out_dir, aggregator, analysis_mode;
  std::optional<std::uint64_t> seed;
  std::optional<int> threads, epochs, checkpoint_every, steps, K, M, analysis_steps, rollouts;
  std::optional<double> sigma_base, lr_low, lr_high, beta_t, beta_high, w_align, eta;
  std::vector<int> early, late;
};

void add_common(CLI::App* cmd, std::string& config_path, Overrides& ov) {
  cmd->add_option("-c,--config", config_path, "run configuration file (JSON)")
      ->check(CLI::ExistingFile);
  cmd->add_option("--task", ov.task, "task name (toy2d, grid8, window, dual, linear)");
  cmd->add_option("--seed", ov.seed, "master seed");
  cmd->add_option("--mode", ov.mode, "train mode (full, no_edit, no_adapter, flat)");
  cmd->add_option("-o,--out", ov.out_dir, "output directory");
  cmd->add_option("--threads", ov.threads, "worker threads for analysis");
  cmd->add_option("--epochs", ov.epochs, "training epochs");
  cmd->add_option("--checkpoint-every", ov.checkpoint_every, "periodic checkpoint interval");
  cmd->add_option("--steps", ov.steps, "denoising steps during training");
  cmd->add_option("--sigma-base", ov.sigma_base, "noise scale");
  cmd->add_option("--lr-low", ov.lr_low, "low-level learning rate");
  cmd->add_option("--lr-high", ov.lr_high, "high-level learning rate");
  cmd->add_option("--beta-t", ov.beta_t, "per-step KL weight");
  cmd->add_option("--beta-high", ov.beta_high, "edit-policy KL weight");
  cmd->add_option("-K", ov.K, "edit candidates per epoch");
  cmd->add_option("-M", ov.M, "rollouts per candidate");
  cmd->add_option("--w-align", ov.w_align, "alignment weight in the composite reward");
  cmd->add_option("--aggregator", ov.aggregator, "score aggregator (max, mean, index)");
  cmd->add_option("--analysis-steps", ov.analysis_steps, "denoising steps during analysis");
  cmd->add_option("--eta", ov.eta, "kick strength for sensitivity analysis");
  cmd->add_option("--analysis-mode", ov.analysis_mode,
                  "sensitivity mode (signed, mean_abs, rms)");
  cmd->add_option("--rollouts", ov.rollouts, "evaluation rollouts (analyze/intervene)");
  cmd->add_option("--early", ov.early, "early window as lo hi")->expected(2);
  cmd->add_option("--late", ov.late, "late window as lo hi")->expected(2);
}

ft::io::RunConfig resolve(const std::string& config_path, const Overrides& ov) {
  ft::io::RunConfig cfg =
      config_path.empty() ? ft::io::default_config() : ft::io::load_config(config_path);
  if (ov.task) cfg.task = *ov.task;
  if (ov.seed) cfg.seed = *ov.seed;
  if (ov.mode) cfg.mode = ft::rl::mode_from_name(*ov.mode);
  if (ov.out_dir) cfg.out_dir = *ov.out_dir;
  if (ov.threads) cfg.threads = *ov.threads;
  if (ov.epochs) cfg.epochs = *ov.epochs;
  if (ov.checkpoint_every) cfg.checkpoint_every = *ov.checkpoint_every;
  if (ov.steps) cfg.schedule.steps = *ov.steps;
  if (ov.sigma_base) cfg.schedule.sigma_base = *ov.sigma_base;
  if (ov.lr_low) cfg.hyper.lr_low = *ov.lr_low;
  if (ov.lr_high) cfg.hyper.lr_high = *ov.lr_high;
  if (ov.beta_t) cfg.hyper.beta_t = *ov.beta_t;
  if (ov.beta_high) cfg.hyper.beta_high = *ov.beta_high;
  if (ov.K) cfg.hyper.K = *ov.K;
  if (ov.M) cfg.hyper.M = *ov.M;
  if (ov.w_align) cfg.w_align = *ov.w_align;
  if (ov.aggregator) {
    if (*ov.aggregator == "max") cfg.aggregator = ft::scorer::Aggregator::max;
    else if (*ov.aggregator == "mean") cfg.aggregator = ft::scorer::Aggregator::mean;
    else if (*ov.aggregator == "index") cfg.aggregator = ft::scorer::Aggregator::index;
    else throw ft::config_error("aggregator must be max, mean or index");
  }
  if (ov.analysis_steps) cfg.analysis.steps = *ov.analysis_steps;
  if (ov.eta) cfg.analysis.eta = *ov.eta;
  if (ov.analysis_mode) cfg.analysis.mode = ft::temporal::mode_from_name(*ov.analysis_mode);
  if (ov.rollouts) {
    cfg.analysis.rollouts = *ov.rollouts;
    cfg.intervene.rollouts = *ov.rollouts;
  }
  if (!ov.early.empty()) {
    cfg.intervene.early_lo = ov.early[0];
    cfg.intervene.early_hi = ov.early[1];
  }
  if (!ov.late.empty()) {
    cfg.intervene.late_lo = ov.late[0];
    cfg.intervene.late_hi = ov.late[1];
  }
  ft::io::apply_env_overrides(cfg);
  cfg.validate();
  return cfg;
}

int finish(const ft::io::CmdResult& res) {
  std::fprintf(res.exit_code == 0 ? stdout : stderr, "%s\n", res.message.c_str());
  return res.exit_code;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"flowtrace: hierarchical RL over a rectified-flow sampler with temporal "
               "attribution of score responses"};
  app.require_subcommand(1);

  std::string config_path, checkpoint_path, axis, map_prefix;
  Overrides ov;

  CLI::App* train = app.add_subcommand("train", "optimize policy and editor, log metrics");
  add_common(train, config_path, ov);

  CLI::App* analyze = app.add_subcommand("analyze", "write the step-by-dimension sensitivity map");
  add_common(analyze, config_path, ov);
  analyze->add_option("--checkpoint", checkpoint_path, "trained checkpoint to load")
      ->check(CLI::ExistingFile);

  CLI::App* intervene =
      app.add_subcommand("intervene", "compare none/early/late/both window zeroing");
  add_common(intervene, config_path, ov);
  intervene->add_option("--checkpoint", checkpoint_path, "trained checkpoint to load")
      ->check(CLI::ExistingFile);

  CLI::App* sweep = app.add_subcommand("sweep", "grid over one axis (sigma, steps, beta, kappa)");
  add_common(sweep, config_path, ov);
  sweep->add_option("--axis", axis, "sweep axis")->required();
  sweep->add_option("--checkpoint", checkpoint_path, "checkpoint for kappa scans")
      ->check(CLI::ExistingFile);

  CLI::App* exp = app.add_subcommand("export", "re-render stored maps / summarize checkpoints");
  add_common(exp, config_path, ov);
  exp->add_option("--map-prefix", map_prefix, "map file prefix (reads <prefix>_rescaled.csv)");
  exp->add_option("--checkpoint", checkpoint_path, "checkpoint to summarize")
      ->check(CLI::ExistingFile);

  CLI11_PARSE(app, argc, argv);

  try {
    ft::io::RunConfig cfg = resolve(config_path, ov);
    if (train->parsed()) return finish(ft::io::cmd_train(cfg));
    if (analyze->parsed()) return finish(ft::io::cmd_analyze(cfg, checkpoint_path));
    if (intervene->parsed()) return finish(ft::io::cmd_intervene(cfg, checkpoint_path));
    if (sweep->parsed()) return finish(ft::io::cmd_sweep(cfg, axis, checkpoint_path));
    if (exp->parsed()) return finish(ft::io::cmd_export(cfg, map_prefix, checkpoint_path));
  } catch (const ft::config_error& e) {
    std::fprintf(stderr, "config error: %s\n", e.what());
    return 2;
  } catch (const ft::io_error& e) {
    std::fprintf(stderr, "io error: %s\n", e.what());
    return 2;
  } catch (const ft::numeric_error& e) {
    std::fprintf(stderr, "numeric fault: %s\n", e.what());
    return 3;
  }
  return 0;
}
