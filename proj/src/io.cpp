#include "flowtrace/io.hpp"

#include <algorithm>
#include <bit>
#include <chrono>
#include <cstdio>
#include <cstdlib>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <sstream>

#include "json.hpp"

namespace flowtrace::io {

namespace fs = std::filesystem;
using nlohmann::json;

// ---------------------------------------------------------------- config ---

namespace {

[[noreturn]] void bad_field(const std::string& path, const std::string& what) {
  throw config_error("config field '" + path + "': " + what);
}

void reject_unknown(const json& obj, const std::string& path,
                    std::initializer_list<const char*> allowed) {
  for (auto it = obj.begin(); it != obj.end(); ++it) {
    bool known = false;
    for (const char* k : allowed)
      if (it.key() == k) {
        known = true;
        break;
      }
    if (!known) bad_field(path.empty() ? it.key() : path + "." + it.key(), "unknown key");
  }
}

const json* member(const json& obj, const char* key) {
  auto it = obj.find(key);
  return it == obj.end() ? nullptr : &*it;
}

double as_num(const json& v, const std::string& path) {
  if (!v.is_number()) bad_field(path, "expected a number");
  return v.get<double>();
}

int as_int(const json& v, const std::string& path) {
  if (!v.is_number_integer()) bad_field(path, "expected an integer");
  return v.get<int>();
}

std::uint64_t as_u64(const json& v, const std::string& path) {
  if (!v.is_number_unsigned() && !v.is_number_integer()) bad_field(path, "expected an integer");
  if (v.is_number_integer() && v.get<long long>() < 0) bad_field(path, "must be nonnegative");
  return v.get<std::uint64_t>();
}

bool as_bool(const json& v, const std::string& path) {
  if (!v.is_boolean()) bad_field(path, "expected true or false");
  return v.get<bool>();
}

std::string as_str(const json& v, const std::string& path) {
  if (!v.is_string()) bad_field(path, "expected a string");
  return v.get<std::string>();
}

void num_field(const json& obj, const char* key, const std::string& path, double& out) {
  if (const json* v = member(obj, key)) out = as_num(*v, path + "." + key);
}
void int_field(const json& obj, const char* key, const std::string& path, int& out) {
  if (const json* v = member(obj, key)) out = as_int(*v, path + "." + key);
}
void bool_field(const json& obj, const char* key, const std::string& path, bool& out) {
  if (const json* v = member(obj, key)) out = as_bool(*v, path + "." + key);
}

std::vector<double> as_num_list(const json& v, const std::string& path) {
  if (!v.is_array() || v.empty()) bad_field(path, "expected a non-empty array of numbers");
  std::vector<double> out;
  for (std::size_t i = 0; i < v.size(); ++i)
    out.push_back(as_num(v[i], path + "[" + std::to_string(i) + "]"));
  return out;
}

std::vector<int> as_int_list(const json& v, const std::string& path) {
  if (!v.is_array() || v.empty()) bad_field(path, "expected a non-empty array of integers");
  std::vector<int> out;
  for (std::size_t i = 0; i < v.size(); ++i)
    out.push_back(as_int(v[i], path + "[" + std::to_string(i) + "]"));
  return out;
}

const char* sigma_mode_name(flow::SigmaMode m) {
  return m == flow::SigmaMode::sqrt_dt ? "sqrt_dt" : "constant";
}

flow::SigmaMode sigma_mode_from(const std::string& s, const std::string& path) {
  if (s == "sqrt_dt") return flow::SigmaMode::sqrt_dt;
  if (s == "constant") return flow::SigmaMode::constant;
  bad_field(path, "expected 'sqrt_dt' or 'constant'");
}

const char* variant_name(flow::InterventionVariant v) {
  return v == flow::InterventionVariant::gate_adapter ? "gate_adapter" : "skip_update";
}

flow::InterventionVariant variant_from(const std::string& s, const std::string& path) {
  if (s == "gate_adapter") return flow::InterventionVariant::gate_adapter;
  if (s == "skip_update") return flow::InterventionVariant::skip_update;
  bad_field(path, "expected 'gate_adapter' or 'skip_update'");
}

const char* agg_from_cfg(scorer::Aggregator a) { return scorer::aggregator_name(a); }

scorer::Aggregator agg_from(const std::string& s, const std::string& path) {
  if (s == "max") return scorer::Aggregator::max;
  if (s == "mean") return scorer::Aggregator::mean;
  if (s == "index") return scorer::Aggregator::index;
  bad_field(path, "expected 'max', 'mean' or 'index'");
}

void parse_schedule(const json& obj, const std::string& path, flow::NoiseSchedule& s) {
  reject_unknown(obj, path, {"steps", "sigma_base", "sigma_mode"});
  int_field(obj, "steps", path, s.steps);
  num_field(obj, "sigma_base", path, s.sigma_base);
  if (const json* v = member(obj, "sigma_mode"))
    s.mode = sigma_mode_from(as_str(*v, path + ".sigma_mode"), path + ".sigma_mode");
}

void parse_hyper(const json& obj, const std::string& path, rl::HyperParams& h) {
  reject_unknown(obj, path,
                 {"eps_clip_low", "eps_clip_high", "beta_t", "beta_high", "adv_eps", "K", "M",
                  "lr_low", "lr_high"});
  num_field(obj, "eps_clip_low", path, h.eps_clip_low);
  num_field(obj, "eps_clip_high", path, h.eps_clip_high);
  num_field(obj, "beta_t", path, h.beta_t);
  num_field(obj, "beta_high", path, h.beta_high);
  num_field(obj, "adv_eps", path, h.adv_eps);
  int_field(obj, "K", path, h.K);
  int_field(obj, "M", path, h.M);
  num_field(obj, "lr_low", path, h.lr_low);
  num_field(obj, "lr_high", path, h.lr_high);
}

void parse_edit(const json& obj, const std::string& path, edit::EditConfig& e) {
  reject_unknown(obj, path,
                 {"latent_dim", "eps_proj", "sigma_simple", "sigma_mod", "lambda_sem",
                  "lambda_recon", "tau_sem", "grid_pitch", "sigma_head"});
  int_field(obj, "latent_dim", path, e.latent_dim);
  num_field(obj, "eps_proj", path, e.eps_proj);
  num_field(obj, "sigma_simple", path, e.sigma_simple);
  num_field(obj, "sigma_mod", path, e.sigma_mod);
  num_field(obj, "lambda_sem", path, e.lambda_sem);
  num_field(obj, "lambda_recon", path, e.lambda_recon);
  num_field(obj, "tau_sem", path, e.tau_sem);
  num_field(obj, "grid_pitch", path, e.grid_pitch);
  num_field(obj, "sigma_head", path, e.sigma_head);
}

void parse_analysis(const json& obj, const std::string& path, AnalysisConfig& a) {
  reject_unknown(obj, path,
                 {"steps", "eta", "eta_relative", "stochastic", "velocity_additive", "mode",
                  "plan", "search", "calibration_rollouts", "rollouts"});
  int_field(obj, "steps", path, a.steps);
  num_field(obj, "eta", path, a.eta);
  bool_field(obj, "eta_relative", path, a.eta_relative);
  bool_field(obj, "stochastic", path, a.stochastic);
  bool_field(obj, "velocity_additive", path, a.velocity_additive);
  if (const json* v = member(obj, "mode"))
    a.mode = temporal::mode_from_name(as_str(*v, path + ".mode"));
  if (const json* v = member(obj, "plan")) {
    const std::string p = path + ".plan";
    reject_unknown(*v, p, {"T0", "levels", "samples"});
    int_field(*v, "T0", p, a.plan.T0);
    int_field(*v, "levels", p, a.plan.levels);
    if (const json* s = member(*v, "samples")) a.plan.samples = as_int_list(*s, p + ".samples");
  }
  if (const json* v = member(obj, "search")) {
    const std::string p = path + ".search";
    reject_unknown(*v, p, {"min_width", "tau_rel", "budget_pairs"});
    int_field(*v, "min_width", p, a.search.min_width);
    num_field(*v, "tau_rel", p, a.search.tau_rel);
    if (const json* b = member(*v, "budget_pairs"))
      a.search.budget_pairs = static_cast<long>(as_u64(*b, p + ".budget_pairs"));
  }
  int_field(obj, "calibration_rollouts", path, a.calibration_rollouts);
  int_field(obj, "rollouts", path, a.rollouts);
}

void parse_intervene(const json& obj, const std::string& path, InterveneConfig& iv) {
  reject_unknown(obj, path, {"early", "late", "rollouts", "variant"});
  if (const json* v = member(obj, "early")) {
    auto w = as_int_list(*v, path + ".early");
    if (w.size() != 2) bad_field(path + ".early", "expected [lo, hi]");
    iv.early_lo = w[0];
    iv.early_hi = w[1];
  }
  if (const json* v = member(obj, "late")) {
    auto w = as_int_list(*v, path + ".late");
    if (w.size() != 2) bad_field(path + ".late", "expected [lo, hi]");
    iv.late_lo = w[0];
    iv.late_hi = w[1];
  }
  int_field(obj, "rollouts", path, iv.rollouts);
  if (const json* v = member(obj, "variant"))
    iv.variant = variant_from(as_str(*v, path + ".variant"), path + ".variant");
}

void parse_sweep(const json& obj, const std::string& path, SweepConfig& sw) {
  reject_unknown(obj, path, {"sigma", "steps", "beta", "kappa", "kappa_rollouts"});
  if (const json* v = member(obj, "sigma")) sw.sigma = as_num_list(*v, path + ".sigma");
  if (const json* v = member(obj, "steps")) sw.steps = as_int_list(*v, path + ".steps");
  if (const json* v = member(obj, "beta")) sw.beta = as_num_list(*v, path + ".beta");
  if (const json* v = member(obj, "kappa")) sw.kappa = as_num_list(*v, path + ".kappa");
  int_field(obj, "kappa_rollouts", path, sw.kappa_rollouts);
}

}  // namespace

void RunConfig::validate() const {
  if (config_version != 1)
    throw config_error("config_version " + std::to_string(config_version) +
                       " unsupported (this build reads version 1)");
  auto names = task_names();
  if (std::find(names.begin(), names.end(), task) == names.end()) {
    std::string all;
    for (const auto& n : names) all += (all.empty() ? "" : ", ") + n;
    throw config_error("unknown task '" + task + "' (known: " + all + ")");
  }
  if (epochs < 0) throw config_error("epochs must be nonnegative");
  if (checkpoint_every < 0) throw config_error("checkpoint_every must be nonnegative");
  if (threads < 1 || threads > 256) throw config_error("threads must sit in [1, 256]");
  if (out_dir.empty()) throw config_error("out_dir must not be empty");
  if (adapter_rank < 1 || adapter_alpha <= 0)
    throw config_error("adapter needs positive rank and alpha");
  if (net_hidden < 1 || net_depth < 1) throw config_error("network needs positive size");
  if (agg_index < 0) throw config_error("agg_index must be nonnegative");
  schedule.validate();
  hyper.validate();
  edit.validate();
  if (analysis.steps < 1) throw config_error("analysis.steps must be positive");
  if (analysis.eta <= 0) throw config_error("analysis.eta must be positive");
  analysis.plan.validate(analysis.steps);
  if (analysis.calibration_rollouts < 1 || analysis.rollouts < 2)
    throw config_error("analysis rollout counts too small");
  if (intervene.rollouts < 2) throw config_error("intervene.rollouts must be at least 2");
}

RunConfig default_config() { return RunConfig{}; }

RunConfig parse_config(const std::string& json_text) {
  json root;
  try {
    root = json::parse(json_text);
  } catch (const json::parse_error& e) {
    throw config_error(std::string("config is not valid JSON: ") + e.what());
  }
  if (!root.is_object()) throw config_error("config root must be an object");
  reject_unknown(root, "",
                 {"config_version", "task", "seed", "mode", "out_dir", "threads", "epochs",
                  "checkpoint_every", "schedule", "hyper", "edit", "scorer", "adapter", "net",
                  "analysis", "intervene", "sweep"});

  RunConfig cfg;
  int_field(root, "config_version", "", cfg.config_version);
  if (cfg.config_version != 1)
    throw config_error("config_version " + std::to_string(cfg.config_version) +
                       " unsupported (this build reads version 1)");
  if (const json* v = member(root, "task")) cfg.task = as_str(*v, "task");
  if (const json* v = member(root, "seed")) cfg.seed = as_u64(*v, "seed");
  if (const json* v = member(root, "mode")) cfg.mode = rl::mode_from_name(as_str(*v, "mode"));
  if (const json* v = member(root, "out_dir")) cfg.out_dir = as_str(*v, "out_dir");
  int_field(root, "threads", "", cfg.threads);
  int_field(root, "epochs", "", cfg.epochs);
  int_field(root, "checkpoint_every", "", cfg.checkpoint_every);
  if (const json* v = member(root, "schedule")) parse_schedule(*v, "schedule", cfg.schedule);
  if (const json* v = member(root, "hyper")) parse_hyper(*v, "hyper", cfg.hyper);
  if (const json* v = member(root, "edit")) parse_edit(*v, "edit", cfg.edit);
  if (const json* v = member(root, "scorer")) {
    reject_unknown(*v, "scorer", {"w_align", "aggregator", "agg_index"});
    num_field(*v, "w_align", "scorer", cfg.w_align);
    if (const json* a = member(*v, "aggregator"))
      cfg.aggregator = agg_from(as_str(*a, "scorer.aggregator"), "scorer.aggregator");
    int_field(*v, "agg_index", "scorer", cfg.agg_index);
  }
  if (const json* v = member(root, "adapter")) {
    reject_unknown(*v, "adapter", {"rank", "alpha"});
    int_field(*v, "rank", "adapter", cfg.adapter_rank);
    num_field(*v, "alpha", "adapter", cfg.adapter_alpha);
  }
  if (const json* v = member(root, "net")) {
    reject_unknown(*v, "net", {"hidden", "depth"});
    int_field(*v, "hidden", "net", cfg.net_hidden);
    int_field(*v, "depth", "net", cfg.net_depth);
  }
  if (const json* v = member(root, "analysis")) parse_analysis(*v, "analysis", cfg.analysis);
  if (const json* v = member(root, "intervene")) parse_intervene(*v, "intervene", cfg.intervene);
  if (const json* v = member(root, "sweep")) parse_sweep(*v, "sweep", cfg.sweep);
  cfg.validate();
  return cfg;
}

RunConfig load_config(const std::string& path) {
  std::ifstream f(path);
  if (!f) throw io_error("cannot open config file '" + path + "'");
  std::ostringstream ss;
  ss << f.rdbuf();
  return parse_config(ss.str());
}

namespace {

json training_json(const RunConfig& cfg) {
  json j;
  j["config_version"] = cfg.config_version;
  j["task"] = cfg.task;
  j["seed"] = cfg.seed;
  j["mode"] = rl::mode_name(cfg.mode);
  j["schedule"] = {{"steps", cfg.schedule.steps},
                   {"sigma_base", cfg.schedule.sigma_base},
                   {"sigma_mode", sigma_mode_name(cfg.schedule.mode)}};
  j["hyper"] = {{"eps_clip_low", cfg.hyper.eps_clip_low},
                {"eps_clip_high", cfg.hyper.eps_clip_high},
                {"beta_t", cfg.hyper.beta_t},
                {"beta_high", cfg.hyper.beta_high},
                {"adv_eps", cfg.hyper.adv_eps},
                {"K", cfg.hyper.K},
                {"M", cfg.hyper.M},
                {"lr_low", cfg.hyper.lr_low},
                {"lr_high", cfg.hyper.lr_high}};
  j["edit"] = {{"latent_dim", cfg.edit.latent_dim},
               {"eps_proj", cfg.edit.eps_proj},
               {"sigma_simple", cfg.edit.sigma_simple},
               {"sigma_mod", cfg.edit.sigma_mod},
               {"lambda_sem", cfg.edit.lambda_sem},
               {"lambda_recon", cfg.edit.lambda_recon},
               {"tau_sem", cfg.edit.tau_sem},
               {"grid_pitch", cfg.edit.grid_pitch},
               {"sigma_head", cfg.edit.sigma_head}};
  j["scorer"] = {{"w_align", cfg.w_align},
                 {"aggregator", agg_from_cfg(cfg.aggregator)},
                 {"agg_index", cfg.agg_index}};
  j["adapter"] = {{"rank", cfg.adapter_rank}, {"alpha", cfg.adapter_alpha}};
  j["net"] = {{"hidden", cfg.net_hidden}, {"depth", cfg.net_depth}};
  return j;
}

}  // namespace

std::string dump_config(const RunConfig& cfg) {
  json j = training_json(cfg);
  j["out_dir"] = cfg.out_dir;
  j["threads"] = cfg.threads;
  j["checkpoint_every"] = cfg.checkpoint_every;
  j["analysis"] = {{"steps", cfg.analysis.steps},
                   {"eta", cfg.analysis.eta},
                   {"eta_relative", cfg.analysis.eta_relative},
                   {"stochastic", cfg.analysis.stochastic},
                   {"velocity_additive", cfg.analysis.velocity_additive},
                   {"mode", temporal::mode_name(cfg.analysis.mode)},
                   {"plan",
                    {{"T0", cfg.analysis.plan.T0},
                     {"levels", cfg.analysis.plan.levels},
                     {"samples", cfg.analysis.plan.samples}}},
                   {"search",
                    {{"min_width", cfg.analysis.search.min_width},
                     {"tau_rel", cfg.analysis.search.tau_rel},
                     {"budget_pairs", cfg.analysis.search.budget_pairs}}},
                   {"calibration_rollouts", cfg.analysis.calibration_rollouts},
                   {"rollouts", cfg.analysis.rollouts}};
  j["intervene"] = {{"early", {cfg.intervene.early_lo, cfg.intervene.early_hi}},
                    {"late", {cfg.intervene.late_lo, cfg.intervene.late_hi}},
                    {"rollouts", cfg.intervene.rollouts},
                    {"variant", variant_name(cfg.intervene.variant)}};
  j["sweep"] = {{"sigma", cfg.sweep.sigma},
                {"steps", cfg.sweep.steps},
                {"beta", cfg.sweep.beta},
                {"kappa", cfg.sweep.kappa},
                {"kappa_rollouts", cfg.sweep.kappa_rollouts}};
  return j.dump(2) + "\n";
}

std::uint64_t config_hash(const RunConfig& cfg) { return fnv1a64(training_json(cfg).dump()); }

void apply_env_overrides(RunConfig& cfg) {
  if (const char* dir = std::getenv("FLOWTRACE_OUT")) {
    if (*dir) cfg.out_dir = dir;
  }
  if (const char* t = std::getenv("FLOWTRACE_THREADS")) {
    char* end = nullptr;
    long v = std::strtol(t, &end, 10);
    if (end == t || *end != '\0' || v < 1 || v > 256)
      throw config_error("FLOWTRACE_THREADS must be an integer in [1, 256]");
    cfg.threads = static_cast<int>(v);
  }
}

// ----------------------------------------------------------------- tasks ---

std::vector<std::string> task_names() { return {"toy2d", "grid8", "window", "dual", "linear"}; }

namespace {

constexpr std::uint64_t kPolicySeedTag = 0xBA5E;
constexpr std::uint64_t kAdapterSeedTag = 0xADA7;
constexpr std::uint64_t kEditorSeedTag = 0xED17;
constexpr std::uint64_t kRootTag = 0xE007;

scorer::ScorerConfig linear_scorer(int cond_dim) {
  scorer::ScorerConfig cfg;
  cfg.task = scorer::TaskKind::raw;
  cfg.sample_dim = 4;
  cfg.cond_dim = cond_dim;
  const int f = scorer::feature_dim(cfg.task, cfg.sample_dim);
  auto unit = [&](int idx, double s) {
    Vec w = Vec::Zero(f);
    w[idx] = s;
    return w;
  };
  cfg.dims = {
      {"coord0", scorer::SensTag::neutral, unit(0, 1.0), 0.0, 1.0},
      {"coord1", scorer::SensTag::neutral, unit(1, 1.0), 0.0, 1.0},
      {"coord2", scorer::SensTag::neutral, unit(2, 1.0), 0.0, 1.0},
      {"coord3", scorer::SensTag::neutral, unit(3, 1.0), 0.0, 1.0},
  };
  Rng rng = Rng::stream(0x11EA, {0xA11F});
  cfg.align_proj.resize(cond_dim, 4);
  for (Eigen::Index j = 0; j < cfg.align_proj.cols(); ++j)
    for (Eigen::Index i = 0; i < cfg.align_proj.rows(); ++i) cfg.align_proj(i, j) = rng.normal();
  cfg.w_align = 0.2;
  cfg.agg = scorer::Aggregator::mean;
  cfg.null_sample = Vec::Zero(4);
  scorer::finalize(cfg);
  return cfg;
}

void apply_scorer_overrides(scorer::ScorerConfig& sc, const RunConfig& cfg) {
  sc.w_align = cfg.w_align;
  sc.agg = cfg.aggregator;
  sc.agg_index = cfg.agg_index;
  if (sc.agg == scorer::Aggregator::index && cfg.agg_index >= sc.D())
    throw config_error("agg_index out of range for this task's scorer");
  sc.validate();
}

}  // namespace

TaskBundle make_task(const RunConfig& cfg) {
  TaskBundle b;
  b.edit = cfg.edit;

  if (cfg.task == "toy2d" || cfg.task == "grid8") {
    const int x_dim = cfg.task == "toy2d" ? 2 : 64;
    const int cond = 16;
    auto pol = std::make_shared<flow::NeuralPolicy>();
    Rng prng = Rng::stream(cfg.seed, {kPolicySeedTag});
    pol->net = nn::make_mlp(x_dim, cond, x_dim, cfg.net_hidden, cfg.net_depth, prng, 0.5);
    Rng arng = Rng::stream(cfg.seed, {kAdapterSeedTag});
    pol->adapter = nn::make_adapter(pol->net, cfg.adapter_rank, cfg.adapter_alpha, arng, 0.1);
    b.policy = pol;
    b.edit.cond_dim = cond;
    Rng erng = Rng::stream(cfg.seed, {kEditorSeedTag});
    b.editor = edit::make_edit_policy(b.edit, erng);
    b.scorer = scorer::ScorerConfig::standard(
        cfg.task == "toy2d" ? scorer::TaskKind::point2 : scorer::TaskKind::grid8, cond, 0x5C07E);
    Rng rrng = Rng::stream(kRootTag, {1});
    b.e_root = 0.5 * rrng.normal_vec(cond);
  } else if (cfg.task == "window") {
    const int cond = 4;
    auto pol = std::make_shared<flow::FieldPolicy>();
    pol->base = std::make_shared<fixtures::WindowRecorderField>(5, 10, 40, cond);
    b.policy = pol;
    b.edit.cond_dim = cond;
    b.scorer = fixtures::window_recorder_scorer(cond);
    b.e_root = Vec::Zero(cond);
  } else if (cfg.task == "dual") {
    const int cond = 4;
    auto pol = std::make_shared<flow::FieldPolicy>();
    pol->base = std::make_shared<fixtures::DualRecorderField>(cond);
    Rng drng = Rng::stream(cfg.seed, {kPolicySeedTag});
    pol->delta = nn::make_mlp(3, cond, 3, std::min(cfg.net_hidden, 24), cfg.net_depth, drng, 0.3);
    b.policy = pol;
    b.edit.cond_dim = cond;
    b.scorer = fixtures::dual_recorder_scorer(cond);
    Rng rrng = Rng::stream(kRootTag, {2});
    b.e_root = 0.3 * rrng.normal_vec(cond);
  } else if (cfg.task == "linear") {
    const int cond = 4;
    auto pol = std::make_shared<flow::FieldPolicy>();
    Vec rate = Vec::Constant(4, 1.2);
    Vec target(4);
    target << 0.6, -0.4, 0.8, 0.2;
    pol->base = std::make_shared<fixtures::LinearField>(rate, target, cond);
    b.policy = pol;
    b.edit.cond_dim = cond;
    b.scorer = linear_scorer(cond);
    b.e_root = Vec::Zero(cond);
  } else {
    throw config_error("unknown task '" + cfg.task + "'");
  }

  apply_scorer_overrides(b.scorer, cfg);
  return b;
}

// ----------------------------------------------------------- checkpoints ---

std::vector<float> to_f32(const Vec& v) {
  std::vector<float> out(static_cast<std::size_t>(v.size()));
  for (Eigen::Index i = 0; i < v.size(); ++i) out[static_cast<std::size_t>(i)] =
      static_cast<float>(v[i]);
  return out;
}

Vec from_f32(const std::vector<float>& v) {
  Vec out(static_cast<Eigen::Index>(v.size()));
  for (std::size_t i = 0; i < v.size(); ++i) out[static_cast<Eigen::Index>(i)] =
      static_cast<double>(v[i]);
  return out;
}

namespace {

constexpr const char* kCkptMagic = "flowtrace-checkpoint v1";

void encode_f32_le(const std::vector<float>& vals, std::string& out) {
  for (float f : vals) {
    auto u = std::bit_cast<std::uint32_t>(f);
    out.push_back(static_cast<char>(u & 0xff));
    out.push_back(static_cast<char>((u >> 8) & 0xff));
    out.push_back(static_cast<char>((u >> 16) & 0xff));
    out.push_back(static_cast<char>((u >> 24) & 0xff));
  }
}

std::vector<float> decode_f32_le(const std::string& data, std::size_t pos, std::size_t count) {
  std::vector<float> out(count);
  for (std::size_t i = 0; i < count; ++i) {
    std::uint32_t u = 0;
    for (int b = 3; b >= 0; --b)
      u = (u << 8) | static_cast<unsigned char>(data[pos + 4 * i + static_cast<std::size_t>(b)]);
    out[i] = std::bit_cast<float>(u);
  }
  return out;
}

std::string take_line(const std::string& data, std::size_t& pos, const char* what) {
  auto nl = data.find('\n', pos);
  if (nl == std::string::npos)
    throw io_error(std::string("truncated checkpoint: missing newline after ") + what +
                   " (offset " + std::to_string(pos) + ")");
  std::string line = data.substr(pos, nl - pos);
  pos = nl + 1;
  return line;
}

long take_counter(const std::string& data, std::size_t& pos, const std::string& key) {
  std::string line = take_line(data, pos, key.c_str());
  if (line.rfind(key + " ", 0) != 0)
    throw io_error("checkpoint header: expected '" + key + "', got '" + line + "'");
  try {
    return std::stol(line.substr(key.size() + 1));
  } catch (const std::exception&) {
    throw io_error("checkpoint header: bad value in '" + line + "'");
  }
}

}  // namespace

void save_checkpoint(const std::string& path, const Checkpoint& ckpt) {
  std::string out;
  out += kCkptMagic;
  out += '\n';
  char buf[64];
  std::snprintf(buf, sizeof buf, "config_hash %016llx",
                static_cast<unsigned long long>(ckpt.config_hash));
  out += buf;
  out += '\n';
  out += "epoch " + std::to_string(ckpt.epoch) + '\n';
  out += "adam_low_step " + std::to_string(ckpt.adam_low_step) + '\n';
  out += "adam_high_step " + std::to_string(ckpt.adam_high_step) + '\n';
  out += "arrays " + std::to_string(ckpt.arrays.size()) + '\n';
  for (const auto& [name, vals] : ckpt.arrays) {
    out += "array " + name + ' ' + std::to_string(vals.size()) + '\n';
    encode_f32_le(vals, out);
  }
  std::ofstream f(path, std::ios::binary | std::ios::trunc);
  if (!f) throw io_error("cannot write checkpoint '" + path + "'");
  f.write(out.data(), static_cast<std::streamsize>(out.size()));
  if (!f) throw io_error("short write to checkpoint '" + path + "'");
}

Checkpoint load_checkpoint(const std::string& path) {
  std::ifstream f(path, std::ios::binary);
  if (!f) throw io_error("cannot open checkpoint '" + path + "'");
  std::ostringstream ss;
  ss << f.rdbuf();
  const std::string data = ss.str();

  std::size_t pos = 0;
  std::string magic = take_line(data, pos, "version line");
  if (magic != kCkptMagic)
    throw io_error("unsupported checkpoint version: got '" + magic + "', expected '" +
                   kCkptMagic + "'");

  Checkpoint ckpt;
  ckpt.version = 1;
  std::string hash_line = take_line(data, pos, "config_hash");
  if (hash_line.rfind("config_hash ", 0) != 0)
    throw io_error("checkpoint header: expected 'config_hash', got '" + hash_line + "'");
  ckpt.config_hash = std::stoull(hash_line.substr(12), nullptr, 16);
  ckpt.epoch = static_cast<int>(take_counter(data, pos, "epoch"));
  ckpt.adam_low_step = take_counter(data, pos, "adam_low_step");
  ckpt.adam_high_step = take_counter(data, pos, "adam_high_step");
  long n_arrays = take_counter(data, pos, "arrays");
  if (n_arrays < 0) throw io_error("checkpoint header: negative array count");

  for (long a = 0; a < n_arrays; ++a) {
    std::string line = take_line(data, pos, "array header");
    if (line.rfind("array ", 0) != 0)
      throw io_error("checkpoint: expected 'array <name> <len>', got '" + line + "'");
    std::istringstream ls(line.substr(6));
    std::string name;
    long len = -1;
    ls >> name >> len;
    if (name.empty() || len < 0)
      throw io_error("checkpoint: malformed array header '" + line + "'");
    const std::size_t bytes = static_cast<std::size_t>(len) * 4;
    if (pos + bytes > data.size())
      throw io_error("truncated checkpoint: array '" + name + "' needs " +
                     std::to_string(bytes) + " bytes, " + std::to_string(data.size() - pos) +
                     " available (offset " + std::to_string(pos) + ")");
    ckpt.arrays.emplace_back(name, decode_f32_le(data, pos, static_cast<std::size_t>(len)));
    pos += bytes;
  }
  if (pos != data.size())
    throw io_error("trailing data after last checkpoint array (offset " + std::to_string(pos) +
                   ")");
  return ckpt;
}

Checkpoint checkpoint_of(const rl::Engine& engine, int epoch, std::uint64_t cfg_hash) {
  Checkpoint ckpt;
  ckpt.config_hash = cfg_hash;
  ckpt.epoch = epoch;
  ckpt.adam_low_step = engine.adam_low().step;
  ckpt.adam_high_step = engine.adam_high().step;

  Vec base(0);
  if (const auto* np = dynamic_cast<const flow::NeuralPolicy*>(&engine.policy()))
    base = nn::pack(np->net);
  ckpt.arrays.emplace_back("base", to_f32(base));
  ckpt.arrays.emplace_back("trainable", to_f32(engine.policy().trainable_params()));
  ckpt.arrays.emplace_back(
      "editor", engine.editor() ? to_f32(nn::pack(engine.editor()->net)) : std::vector<float>{});
  ckpt.arrays.emplace_back("adam_low_m", to_f32(engine.adam_low().m));
  ckpt.arrays.emplace_back("adam_low_v", to_f32(engine.adam_low().v));
  ckpt.arrays.emplace_back("adam_high_m", to_f32(engine.adam_high().m));
  ckpt.arrays.emplace_back("adam_high_v", to_f32(engine.adam_high().v));
  return ckpt;
}

namespace {

const std::vector<float>& find_array(const Checkpoint& ckpt, const std::string& name) {
  for (const auto& [n, vals] : ckpt.arrays)
    if (n == name) return vals;
  throw io_error("checkpoint has no array '" + name + "'");
}

void check_len(const std::string& name, std::size_t got, long want) {
  if (static_cast<long>(got) != want)
    throw io_error("checkpoint array '" + name + "' length mismatch: file " +
                   std::to_string(got) + ", model " + std::to_string(want));
}

}  // namespace

void apply_checkpoint(const Checkpoint& ckpt, rl::Engine& engine) {
  // resolve and size-check every array before touching the engine, so a
  // mismatched checkpoint cannot leave it half restored
  auto* np = dynamic_cast<flow::NeuralPolicy*>(&engine.policy());
  const auto& base = find_array(ckpt, "base");
  check_len("base", base.size(), np ? nn::param_count(np->net) : 0);

  const auto& trainable = find_array(ckpt, "trainable");
  check_len("trainable", trainable.size(), engine.policy().trainable_count());

  const auto& editor = find_array(ckpt, "editor");
  check_len("editor", editor.size(),
            engine.editor() ? nn::param_count(engine.editor()->net) : 0);

  const auto& alm = find_array(ckpt, "adam_low_m");
  const auto& alv = find_array(ckpt, "adam_low_v");
  check_len("adam_low_m", alm.size(), engine.adam_low().m.size());
  check_len("adam_low_v", alv.size(), engine.adam_low().v.size());

  const auto& ahm = find_array(ckpt, "adam_high_m");
  const auto& ahv = find_array(ckpt, "adam_high_v");
  check_len("adam_high_m", ahm.size(), engine.adam_high().m.size());
  check_len("adam_high_v", ahv.size(), engine.adam_high().v.size());

  if (np) nn::unpack(from_f32(base), np->net);
  if (!trainable.empty()) engine.policy().set_trainable_params(from_f32(trainable));
  if (engine.editor()) nn::unpack(from_f32(editor), engine.editor_mut().net);
  engine.adam_low().m = from_f32(alm);
  engine.adam_low().v = from_f32(alv);
  engine.adam_low().step = ckpt.adam_low_step;
  engine.adam_high().m = from_f32(ahm);
  engine.adam_high().v = from_f32(ahv);
  engine.adam_high().step = ckpt.adam_high_step;
}

// ---------------------------------------------------------------- metrics ---

namespace {

std::string fmt_double(double v) {
  char buf[40];
  std::snprintf(buf, sizeof buf, "%.17g", v);
  return buf;
}

}  // namespace

std::string metrics_line(const rl::EpochMetrics& m) {
  std::string s = "{\"epoch\":" + std::to_string(m.epoch);
  s += ",\"reward_mean\":" + fmt_double(m.reward_mean);
  s += ",\"reward_max\":" + fmt_double(m.reward_max);
  s += ",\"net_mean\":[";
  for (Eigen::Index d = 0; d < m.net_mean.size(); ++d) {
    if (d) s += ',';
    s += fmt_double(m.net_mean[d]);
  }
  s += "],\"kl_low\":" + fmt_double(m.kl_low);
  s += ",\"clip_fraction\":" + fmt_double(m.clip_fraction);
  s += ",\"edit_reward_mean\":" + fmt_double(m.edit_reward_mean);
  s += ",\"kl_high\":" + fmt_double(m.kl_high);
  s += std::string(",\"low_applied\":") + (m.low_applied ? "true" : "false");
  s += std::string(",\"high_applied\":") + (m.high_applied ? "true" : "false");
  s += "}";
  return s;
}

rl::EpochMetrics parse_metrics_line(const std::string& line) {
  json j;
  try {
    j = json::parse(line);
  } catch (const json::parse_error& e) {
    throw io_error(std::string("bad metrics line: ") + e.what());
  }
  rl::EpochMetrics m;
  m.epoch = j.at("epoch").get<int>();
  m.reward_mean = j.at("reward_mean").get<double>();
  m.reward_max = j.at("reward_max").get<double>();
  auto nm = j.at("net_mean").get<std::vector<double>>();
  m.net_mean = Eigen::Map<const Vec>(nm.data(), static_cast<Eigen::Index>(nm.size()));
  m.kl_low = j.at("kl_low").get<double>();
  m.clip_fraction = j.at("clip_fraction").get<double>();
  m.edit_reward_mean = j.at("edit_reward_mean").get<double>();
  m.kl_high = j.at("kl_high").get<double>();
  m.low_applied = j.at("low_applied").get<bool>();
  m.high_applied = j.at("high_applied").get<bool>();
  return m;
}

// ------------------------------------------------------------------- CSV ---

namespace {

std::string fmt_f32(double v) {
  char buf[24];
  std::snprintf(buf, sizeof buf, "%.9g", static_cast<double>(static_cast<float>(v)));
  return buf;
}

}  // namespace

void write_map_csv(const std::string& path, const Mat& map,
                   const std::vector<std::string>& dims) {
  if (static_cast<Eigen::Index>(dims.size()) != map.cols())
    throw contract_error("dimension name count does not match map columns");
  std::ofstream f(path, std::ios::trunc);
  if (!f) throw io_error("cannot write '" + path + "'");
  f << "step";
  for (const auto& d : dims) f << ',' << d;
  f << '\n';
  for (Eigen::Index r = 0; r < map.rows(); ++r) {
    f << (r + 1);
    for (Eigen::Index c = 0; c < map.cols(); ++c) f << ',' << fmt_f32(map(r, c));
    f << '\n';
  }
  if (!f) throw io_error("short write to '" + path + "'");
}

Mat read_map_csv(const std::string& path, std::vector<std::string>* dims) {
  std::ifstream f(path);
  if (!f) throw io_error("cannot open '" + path + "'");
  std::string line;
  if (!std::getline(f, line)) throw io_error("empty map file '" + path + "'");
  std::vector<std::string> names;
  {
    std::istringstream hs(line);
    std::string cell;
    bool first = true;
    while (std::getline(hs, cell, ',')) {
      if (first) {
        if (cell != "step") throw io_error("map file '" + path + "': header must start with 'step'");
        first = false;
      } else {
        names.push_back(cell);
      }
    }
  }
  if (names.empty()) throw io_error("map file '" + path + "': no dimension columns");
  std::vector<std::vector<double>> rows;
  while (std::getline(f, line)) {
    if (line.empty()) continue;
    std::istringstream ls(line);
    std::string cell;
    std::vector<double> row;
    bool first = true;
    while (std::getline(ls, cell, ',')) {
      if (first) {
        first = false;
        continue;
      }
      row.push_back(std::strtod(cell.c_str(), nullptr));
    }
    if (row.size() != names.size())
      throw io_error("map file '" + path + "': row " + std::to_string(rows.size() + 1) +
                     " has " + std::to_string(row.size()) + " cells, expected " +
                     std::to_string(names.size()));
    rows.push_back(std::move(row));
  }
  Mat map(static_cast<Eigen::Index>(rows.size()), static_cast<Eigen::Index>(names.size()));
  for (std::size_t r = 0; r < rows.size(); ++r)
    for (std::size_t c = 0; c < names.size(); ++c)
      map(static_cast<Eigen::Index>(r), static_cast<Eigen::Index>(c)) = rows[r][c];
  if (dims) *dims = names;
  return map;
}

// ------------------------------------------------------------------- SVG ---

namespace {

// diverging palette: deep blue at -1 through white at 0 to deep red at +1
void cell_color(double v, int& r, int& g, int& b) {
  v = std::clamp(v, -1.0, 1.0);
  const double a = std::abs(v);
  if (v >= 0) {
    r = static_cast<int>(std::lround(255 + (178 - 255) * a));
    g = static_cast<int>(std::lround(255 + (24 - 255) * a));
    b = static_cast<int>(std::lround(255 + (43 - 255) * a));
  } else {
    r = static_cast<int>(std::lround(255 + (33 - 255) * a));
    g = static_cast<int>(std::lround(255 + (102 - 255) * a));
    b = static_cast<int>(std::lround(255 + (172 - 255) * a));
  }
}

}  // namespace

void write_map_svg(const std::string& path, const Mat& rescaled,
                   const std::vector<std::string>& dims) {
  if (static_cast<Eigen::Index>(dims.size()) != rescaled.cols())
    throw contract_error("dimension name count does not match map columns");
  const int cw = 64, ch = 11, left = 44, top = 40;
  const auto T = rescaled.rows();
  const auto D = rescaled.cols();
  const long width = left + cw * D + 8;
  const long height = top + ch * T + 8;

  std::ofstream f(path, std::ios::trunc);
  if (!f) throw io_error("cannot write '" + path + "'");
  f << "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"" << width << "\" height=\"" << height
    << "\" font-family=\"monospace\" font-size=\"10\">\n";
  f << "<rect width=\"" << width << "\" height=\"" << height << "\" fill=\"white\"/>\n";
  for (Eigen::Index d = 0; d < D; ++d)
    f << "<text x=\"" << (left + cw * d + 3) << "\" y=\"" << (top - 6) << "\">" << dims[d]
      << "</text>\n";
  char buf[160];
  for (Eigen::Index s = 0; s < T; ++s) {
    if (s % 5 == 0 || s + 1 == T)
      f << "<text x=\"4\" y=\"" << (top + ch * s + ch - 2) << "\">" << (s + 1) << "</text>\n";
    for (Eigen::Index d = 0; d < D; ++d) {
      int r, g, b;
      cell_color(rescaled(s, d), r, g, b);
      std::snprintf(buf, sizeof buf,
                    "<rect x=\"%ld\" y=\"%ld\" width=\"%d\" height=\"%d\" fill=\"rgb(%d,%d,%d)\"/>\n",
                    static_cast<long>(left + cw * d), static_cast<long>(top + ch * s), cw - 1,
                    ch - 1, r, g, b);
      f << buf;
    }
  }
  f << "</svg>\n";
  if (!f) throw io_error("short write to '" + path + "'");
}

// -------------------------------------------------------------- commands ---

namespace {

rl::Engine build_engine(const RunConfig& cfg, const TaskBundle& bundle) {
  return rl::Engine(bundle.policy, bundle.editor, bundle.edit, bundle.scorer, cfg.schedule,
                    cfg.hyper, cfg.mode, bundle.e_root, cfg.seed);
}

flow::NoiseSchedule analysis_schedule(const RunConfig& cfg) {
  flow::NoiseSchedule s = cfg.schedule;
  s.steps = cfg.analysis.steps;
  s.validate();
  return s;
}

temporal::AnalysisContext analysis_context(const RunConfig& cfg, const TaskBundle& bundle,
                                           const flow::Policy& policy) {
  temporal::AnalysisContext ctx =
      temporal::make_context(policy, bundle.e_root, analysis_schedule(cfg), bundle.scorer);
  ctx.stochastic = cfg.analysis.stochastic;
  ctx.velocity_additive = cfg.analysis.velocity_additive;
  ctx.eta = cfg.analysis.eta;
  ctx.eta_relative = cfg.analysis.eta_relative;
  if (ctx.eta_relative)
    temporal::calibrate_rms(ctx, cfg.analysis.calibration_rollouts, cfg.seed ^ 0xCA11B);
  return ctx;
}

std::vector<std::string> dim_names(const scorer::ScorerConfig& sc) {
  std::vector<std::string> names;
  names.reserve(sc.dims.size());
  for (const auto& d : sc.dims) names.push_back(d.name);
  return names;
}

void ensure_dir(const std::string& dir) {
  std::error_code ec;
  fs::create_directories(dir, ec);
  if (ec) throw io_error("cannot create output directory '" + dir + "': " + ec.message());
}

Checkpoint verified_checkpoint(const RunConfig& cfg, const std::string& path) {
  Checkpoint ckpt = load_checkpoint(path);
  const std::uint64_t want = config_hash(cfg);
  if (ckpt.config_hash != want) {
    char got[32], exp[32];
    std::snprintf(got, sizeof got, "%016llx", static_cast<unsigned long long>(ckpt.config_hash));
    std::snprintf(exp, sizeof exp, "%016llx", static_cast<unsigned long long>(want));
    throw io_error("checkpoint '" + path + "' was trained under a different configuration (hash " +
                   got + ", this config " + exp +
                   "); training-relevant fields must match the training run");
  }
  return ckpt;
}

// runs the epoch loop, streaming metrics and timing lines; per_epoch runs
// after each epoch with the metrics record
template <class F>
rl::EpochMetrics epoch_loop(rl::Engine& engine, int epochs, std::ostream& metrics,
                            std::ostream& timing, F&& per_epoch) {
  rl::EpochMetrics last;
  for (int e = 1; e <= epochs; ++e) {
    auto t0 = std::chrono::steady_clock::now();
    last = engine.train_epoch(e);
    auto t1 = std::chrono::steady_clock::now();
    metrics << metrics_line(last) << '\n';
    metrics.flush();
    char buf[96];
    std::snprintf(buf, sizeof buf, "{\"epoch\":%d,\"wall_ms\":%.3f}", e,
                  std::chrono::duration<double, std::milli>(t1 - t0).count());
    timing << buf << '\n';
    timing.flush();
    per_epoch(e, last);
  }
  return last;
}

rl::EpochMetrics run_training_to(const RunConfig& cfg, const std::string& metrics_path,
                                 const std::string& timing_path) {
  TaskBundle bundle = make_task(cfg);
  rl::Engine engine = build_engine(cfg, bundle);
  std::ofstream mf(metrics_path, std::ios::trunc), tf(timing_path, std::ios::trunc);
  if (!mf || !tf) throw io_error("cannot write metrics files under '" + metrics_path + "'");
  return epoch_loop(engine, cfg.epochs, mf, tf, [](int, const rl::EpochMetrics&) {});
}

std::string fmt_g(double v) {
  char buf[40];
  std::snprintf(buf, sizeof buf, "%.9g", v);
  return buf;
}

}  // namespace

CmdResult cmd_train(const RunConfig& cfg) {
  cfg.validate();
  ensure_dir(cfg.out_dir);
  const std::uint64_t hash = config_hash(cfg);

  {
    std::ofstream cf(cfg.out_dir + "/config.json", std::ios::trunc);
    if (!cf) throw io_error("cannot write '" + cfg.out_dir + "/config.json'");
    cf << dump_config(cfg);
  }

  TaskBundle bundle = make_task(cfg);
  rl::Engine engine = build_engine(cfg, bundle);

  std::ofstream mf(cfg.out_dir + "/metrics.jsonl", std::ios::trunc);
  std::ofstream tf(cfg.out_dir + "/timing.jsonl", std::ios::trunc);
  if (!mf || !tf) throw io_error("cannot write run logs under '" + cfg.out_dir + "'");

  int completed = 0;
  try {
    epoch_loop(engine, cfg.epochs, mf, tf, [&](int e, const rl::EpochMetrics&) {
      completed = e;
      if (cfg.checkpoint_every > 0 && e % cfg.checkpoint_every == 0 && e < cfg.epochs)
        save_checkpoint(cfg.out_dir + "/checkpoint_epoch" + std::to_string(e) + ".ckpt",
                        checkpoint_of(engine, e, hash));
    });
  } catch (const numeric_error& e) {
    save_checkpoint(cfg.out_dir + "/checkpoint_lastgood.ckpt",
                    checkpoint_of(engine, completed, hash));
    return {2, std::string("numeric fault after epoch ") + std::to_string(completed) + ": " +
                   e.what() + " (last good state saved)"};
  }

  save_checkpoint(cfg.out_dir + "/checkpoint.ckpt", checkpoint_of(engine, cfg.epochs, hash));
  return {0, "trained " + std::to_string(cfg.epochs) + " epochs of " + cfg.task + " (" +
                 rl::mode_name(cfg.mode) + ") into " + cfg.out_dir};
}

CmdResult cmd_analyze(const RunConfig& cfg, const std::string& checkpoint_path) {
  cfg.validate();
  ensure_dir(cfg.out_dir);
  TaskBundle bundle = make_task(cfg);
  rl::Engine engine = build_engine(cfg, bundle);
  if (!checkpoint_path.empty()) apply_checkpoint(verified_checkpoint(cfg, checkpoint_path), engine);

  temporal::AnalysisContext ctx = analysis_context(cfg, bundle, engine.policy());
  temporal::SensitivityMap map = temporal::temporal_map(ctx, cfg.analysis.plan, cfg.analysis.mode,
                                                        cfg.seed ^ 0xA11A, cfg.threads);
  auto names = dim_names(bundle.scorer);
  write_map_csv(cfg.out_dir + "/map_raw.csv", map.value, names);
  write_map_csv(cfg.out_dir + "/map_rescaled.csv", map.rescaled, names);
  write_map_csv(cfg.out_dir + "/map_se.csv", map.se, names);
  write_map_svg(cfg.out_dir + "/map.svg", map.rescaled, names);
  return {0, "sensitivity map (" + std::string(temporal::mode_name(map.mode)) + ", T=" +
                 std::to_string(cfg.analysis.steps) + ") written to " + cfg.out_dir};
}

CmdResult cmd_intervene(const RunConfig& cfg, const std::string& checkpoint_path) {
  cfg.validate();
  ensure_dir(cfg.out_dir);
  TaskBundle bundle = make_task(cfg);
  rl::Engine engine = build_engine(cfg, bundle);
  if (!checkpoint_path.empty()) apply_checkpoint(verified_checkpoint(cfg, checkpoint_path), engine);

  const int T = cfg.analysis.steps;
  const auto& iv = cfg.intervene;
  flow::InterventionPlan early = temporal::zero_window(iv.early_lo, iv.early_hi, T, iv.variant);
  flow::InterventionPlan late = temporal::zero_window(iv.late_lo, iv.late_hi, T, iv.variant);
  flow::InterventionPlan both;
  both.variant = iv.variant;
  both.steps = early.steps;
  for (int s : late.steps)
    if (std::find(both.steps.begin(), both.steps.end(), s) == both.steps.end())
      both.steps.push_back(s);
  std::sort(both.steps.begin(), both.steps.end());
  both.validate(T);

  temporal::AnalysisContext ctx = analysis_context(cfg, bundle, engine.policy());
  std::vector<std::pair<std::string, const flow::InterventionPlan*>> plans = {
      {"none", nullptr}, {"early", &early}, {"late", &late}, {"both", &both}};
  auto outcomes = temporal::intervention_eval(ctx, plans, iv.rollouts, cfg.seed ^ 0x17E);

  const auto names = dim_names(bundle.scorer);
  std::ofstream f(cfg.out_dir + "/intervene.csv", std::ios::trunc);
  if (!f) throw io_error("cannot write '" + cfg.out_dir + "/intervene.csv'");
  f << "window,composite_mean";
  for (const auto& n : names) f << ',' << n << "_mean," << n << "_se";
  f << '\n';
  for (const auto& o : outcomes) {
    f << o.label << ',' << fmt_g(o.composite_mean);
    for (Eigen::Index d = 0; d < o.net_mean.size(); ++d)
      f << ',' << fmt_g(o.net_mean[d]) << ',' << fmt_g(o.net_se[d]);
    f << '\n';
  }
  return {0, "intervention table (none/early/late/both, " + std::to_string(iv.rollouts) +
                 " rollouts) written to " + cfg.out_dir + "/intervene.csv"};
}

CmdResult cmd_sweep(const RunConfig& cfg, const std::string& axis,
                    const std::string& checkpoint_path) {
  cfg.validate();
  ensure_dir(cfg.out_dir);

  auto summary_path = cfg.out_dir + "/sweep_" + axis + ".csv";
  if (axis == "sigma" || axis == "steps" || axis == "beta") {
    std::ofstream sf(summary_path, std::ios::trunc);
    if (!sf) throw io_error("cannot write '" + summary_path + "'");
    sf << axis << ",reward_mean,reward_max,kl_low,clip_fraction\n";
    std::size_t count =
        axis == "sigma" ? cfg.sweep.sigma.size()
                        : (axis == "steps" ? cfg.sweep.steps.size() : cfg.sweep.beta.size());
    for (std::size_t i = 0; i < count; ++i) {
      RunConfig one = cfg;
      std::string value;
      if (axis == "sigma") {
        one.schedule.sigma_base = cfg.sweep.sigma[i];
        value = fmt_g(cfg.sweep.sigma[i]);
      } else if (axis == "steps") {
        one.schedule.steps = cfg.sweep.steps[i];
        value = std::to_string(cfg.sweep.steps[i]);
      } else {
        one.hyper.beta_t = cfg.sweep.beta[i];
        value = fmt_g(cfg.sweep.beta[i]);
      }
      one.validate();
      std::string stem = cfg.out_dir + "/sweep_" + axis + "_" + std::to_string(i);
      rl::EpochMetrics last = run_training_to(one, stem + ".jsonl", stem + "_timing.jsonl");
      sf << value << ',' << fmt_g(last.reward_mean) << ',' << fmt_g(last.reward_max) << ','
         << fmt_g(last.kl_low) << ',' << fmt_g(last.clip_fraction) << '\n';
    }
    return {0, "swept " + axis + " over " + std::to_string(count) + " settings; summary in " +
                   summary_path};
  }

  if (axis == "kappa") {
    TaskBundle bundle = make_task(cfg);
    rl::Engine engine = build_engine(cfg, bundle);
    if (!checkpoint_path.empty())
      apply_checkpoint(verified_checkpoint(cfg, checkpoint_path), engine);
    temporal::AnalysisContext ctx = analysis_context(cfg, bundle, engine.policy());
    auto points = temporal::perturbation_scan(ctx, bundle.scorer.task, cfg.sweep.kappa,
                                              cfg.sweep.kappa_rollouts, cfg.seed ^ 0x5CA);
    std::ofstream sf(summary_path, std::ios::trunc);
    if (!sf) throw io_error("cannot write '" + summary_path + "'");
    sf << "kappa,similarity_mean,similarity_se\n";
    for (const auto& p : points)
      sf << fmt_g(p.kappa) << ',' << fmt_g(p.similarity_mean) << ',' << fmt_g(p.similarity_se)
         << '\n';
    return {0, "kappa scan over " + std::to_string(points.size()) + " strengths; table in " +
                   summary_path};
  }

  return {2, "unknown sweep axis '" + axis + "'; valid axes: sigma, steps, beta, kappa"};
}

CmdResult cmd_export(const RunConfig& cfg, const std::string& map_prefix,
                     const std::string& checkpoint_path) {
  ensure_dir(cfg.out_dir);
  bool did = false;
  std::string msg;

  if (!map_prefix.empty()) {
    // bare prefixes resolve inside the run directory; paths pass through
    std::string prefix = map_prefix.find('/') == std::string::npos
                             ? cfg.out_dir + "/" + map_prefix
                             : map_prefix;
    std::vector<std::string> names;
    Mat rescaled = read_map_csv(prefix + "_rescaled.csv", &names);
    write_map_svg(prefix + ".svg", rescaled, names);
    msg += "rendered " + prefix + ".svg";
    did = true;
  }

  if (!checkpoint_path.empty()) {
    Checkpoint ckpt = load_checkpoint(checkpoint_path);
    json j;
    j["version"] = ckpt.version;
    char buf[32];
    std::snprintf(buf, sizeof buf, "%016llx", static_cast<unsigned long long>(ckpt.config_hash));
    j["config_hash"] = buf;
    j["epoch"] = ckpt.epoch;
    j["adam_low_step"] = ckpt.adam_low_step;
    j["adam_high_step"] = ckpt.adam_high_step;
    json arrays = json::array();
    for (const auto& [name, vals] : ckpt.arrays)
      arrays.push_back({{"name", name}, {"len", vals.size()}});
    j["arrays"] = arrays;
    std::ofstream f(cfg.out_dir + "/checkpoint_info.json", std::ios::trunc);
    if (!f) throw io_error("cannot write '" + cfg.out_dir + "/checkpoint_info.json'");
    f << j.dump(2) << '\n';
    if (!msg.empty()) msg += "; ";
    msg += "checkpoint summary in " + cfg.out_dir + "/checkpoint_info.json";
    did = true;
  }

  if (!did) return {2, "nothing to export: pass a map prefix and/or a checkpoint path"};
  return {0, msg};
}

}  // namespace flowtrace::io
