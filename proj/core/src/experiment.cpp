#include "adafocus/experiment.hpp"

#include <algorithm>
#include <ostream>
#include <sstream>

#include <json.hpp>

#include "adafocus/serialize.hpp"

namespace adafocus {

namespace fs = std::filesystem;
using json = nlohmann::json;

fs::path RunDirectory::split(SplitRole role) const {
  return root / "data" / (std::string(to_string(role)) + ".afsplit");
}

fs::path RunDirectory::checkpoint(const std::string& name) const {
  return root / "checkpoints" / (name + ".afck");
}

namespace {

constexpr SplitRole kRoles[] = {SplitRole::kTrain, SplitRole::kCalibration, SplitRole::kTest};

void say(const CommandContext& ctx, const std::string& line) {
  if (ctx.log) *ctx.log << line << std::endl;
}

// All-or-nothing overwrite guard, checked before a command writes anything.
void guard_outputs(const CommandContext& ctx, const std::vector<fs::path>& outputs) {
  if (ctx.overwrite) return;
  for (const auto& p : outputs) {
    if (fs::exists(p)) {
      throw ConfigError("output " + p.string() + " already exists; pass --overwrite to replace it");
    }
  }
}

void require_file(const fs::path& p, const std::string& what) {
  if (!fs::exists(p)) throw ConfigError(what + " not found at " + p.string());
}

std::string file_hash(const fs::path& p) {
  const auto bytes = read_file(p);
  return hex64(fnv1a(std::span<const std::byte>(bytes)));
}

json read_manifest(const RunDirectory& dir) {
  if (!fs::exists(dir.manifest())) return json::object();
  try {
    return json::parse(read_text(dir.manifest()));
  } catch (const json::exception& e) {
    throw FormatError("manifest: " + std::string(e.what()));
  }
}

void write_manifest(const CommandContext& ctx, const std::function<void(json&)>& update) {
  json m = read_manifest(ctx.dir);
  m["format"] = "adafocus-run";
  m["seed"] = ctx.config.seed;
  m["config_hash"] = hex64(config_hash(ctx.config));
  update(m);
  write_text_atomic(ctx.dir.manifest(), m.dump(2) + "\n");
}

void record_metrics(const CommandContext& ctx, const std::vector<fs::path>& files) {
  write_manifest(ctx, [&](json& m) {
    for (const auto& f : files) {
      m["metrics"][f.filename().string()] = file_hash(f);
    }
  });
}

DatasetSplit load_role(const CommandContext& ctx, SplitRole role) {
  const auto p = ctx.dir.split(role);
  require_file(p, std::string(to_string(role)) + " split (run gen-data first)");
  auto split = load_split(p);
  if (!(split.config == ctx.config.data)) {
    throw ConfigError("split " + p.string() + " was generated with a different data config");
  }
  return split;
}

ModelBundle load_stage(const CommandContext& ctx, const std::string& name, const std::string& needed_by) {
  const auto p = ctx.dir.checkpoint(name);
  require_file(p, needed_by + " needs a " + name + " checkpoint;");
  auto b = load_bundle(p);
  if (!(b.config == ctx.config.plan.bundle)) {
    throw ConfigError("checkpoint " + p.string() + " was trained with a different model config");
  }
  return b;
}

void save_stage(const CommandContext& ctx, const ModelBundle& b, const std::string& name) {
  const auto p = ctx.dir.checkpoint(name);
  fs::create_directories(p.parent_path());
  save_bundle(b, p);
  write_manifest(ctx, [&](json& m) {
    json comps = json::object();
    for (auto c : {Component::kGlance, Component::kFocus, Component::kClassifier, Component::kPatchPolicy,
                   Component::kSkipPolicy}) {
      if (c == Component::kSkipPolicy && !b.skip_policy) continue;
      comps[std::string(to_string(c))] = hex64(b.hash(c));
    }
    m["checkpoints"][name] = {{"file", fs::relative(p, ctx.dir.root).string()},
                              {"fnv1a", file_hash(p)},
                              {"stage", b.stage},
                              {"lineage", b.lineage},
                              {"components", comps}};
    if (b.rho) m["checkpoints"][name]["rho"] = *b.rho;
    m["lineage"] = b.lineage;
  });
}

std::string stage_log_csv(const StageReport& r) {
  std::ostringstream os;
  os.precision(10);
  os << "epoch,loss,accuracy,aux_accuracy,mean_return,keep_rate,clip_fraction\n";
  for (const auto& e : r.epochs) {
    os << e.epoch << ',' << e.loss << ',' << e.accuracy << ',' << e.aux_accuracy << ',' << e.mean_return
       << ',' << e.keep_rate << ',' << e.clip_fraction << '\n';
  }
  return os.str();
}

void write_records(const CommandContext& ctx, const std::string& stem, const std::vector<MetricsRecord>& recs) {
  const auto j = ctx.dir.metrics(stem + ".json"), c = ctx.dir.metrics(stem + ".csv");
  fs::create_directories(j.parent_path());
  write_text_atomic(j, metrics_to_json(recs));
  write_text_atomic(c, metrics_to_csv(recs));
  record_metrics(ctx, {j, c});
}

const StageConfig& stage_config(const RunConfig& c, Stage s) {
  switch (s) {
    case Stage::kPretrain: return c.plan.pretrain;
    case Stage::kStage1: return c.plan.stage1;
    case Stage::kStage2: return c.plan.stage2;
    case Stage::kStage3: return c.plan.stage3;
  }
  throw ContractError("unknown stage");
}

}  // namespace

RunDirectory run_directory_for(const RunConfig& config) {
  return {fs::path(config.runs_dir) / run_dir_name(config)};
}

void open_run(const CommandContext& ctx) {
  ctx.config.validate();
  const auto text = render_config(ctx.config);
  if (fs::exists(ctx.dir.config())) {
    if (read_text(ctx.dir.config()) != text) {
      if (!ctx.overwrite) {
        throw ConfigError("run directory " + ctx.dir.root.string() +
                          " holds a different config; pass --overwrite or choose another directory");
      }
    } else {
      return;
    }
  }
  fs::create_directories(ctx.dir.root);
  write_text_atomic(ctx.dir.config(), text);
  write_manifest(ctx, [](json&) {});
}

void cmd_gen_data(const CommandContext& ctx) {
  std::vector<fs::path> outs;
  for (auto r : kRoles) outs.push_back(ctx.dir.split(r));
  guard_outputs(ctx, outs);
  open_run(ctx);
  const auto& c = ctx.config;
  const int sizes[] = {c.sizes.train, c.sizes.calibration, c.sizes.test};
  const auto data_seed = derive_seed(c.seed, "data");
  fs::create_directories(ctx.dir.root / "data");
  for (int i = 0; i < 3; ++i) {
    auto split = generate_split(c.data, static_cast<std::size_t>(sizes[i]), kRoles[i], data_seed);
    const auto p = ctx.dir.split(kRoles[i]);
    save_split(split, p);
    write_manifest(ctx, [&](json& m) {
      m["data"][std::string(to_string(kRoles[i]))] = {{"file", fs::relative(p, ctx.dir.root).string()},
                                                     {"num_samples", sizes[i]},
                                                     {"fnv1a", file_hash(p)}};
    });
    say(ctx, "gen-data: " + std::string(to_string(kRoles[i])) + " " + std::to_string(sizes[i]) + " videos");
  }
}

void cmd_stage(const CommandContext& ctx, Stage stage) {
  const auto name = std::string(to_string(stage));
  const auto out = ctx.dir.checkpoint(name);
  const auto log_file = ctx.dir.metrics(name + "_log.csv");
  const auto& c = ctx.config;

  // Inputs are checked before anything is written.
  ModelBundle bundle;
  switch (stage) {
    case Stage::kPretrain: break;
    case Stage::kStage1:
      if (!c.plan.skip_pretrain) bundle = load_stage(ctx, "pretrain", name);
      break;
    case Stage::kStage2: bundle = load_stage(ctx, "stage1", name); break;
    case Stage::kStage3: bundle = load_stage(ctx, "stage2", name); break;
  }
  if (stage == Stage::kPretrain && c.plan.skip_pretrain) {
    throw ConfigError("pretrain is disabled by pretrain.skip = true");
  }
  auto train = load_role(ctx, SplitRole::kTrain);
  guard_outputs(ctx, {out, log_file});
  open_run(ctx);
  if (stage == Stage::kPretrain || (stage == Stage::kStage1 && c.plan.skip_pretrain)) {
    bundle = ModelBundle::create(c.plan.bundle, c.seed);
  }

  auto cb = [&](Stage s, const EpochLog& e) {
    std::ostringstream os;
    os.precision(5);
    os << to_string(s) << " epoch " << e.epoch << " loss " << e.loss << " acc " << e.accuracy;
    if (s == Stage::kPretrain) os << " focus_acc " << e.aux_accuracy;
    if (s == Stage::kStage2) os << " return " << e.mean_return << " clip " << e.clip_fraction;
    if (bundle.skip_policy && (s == Stage::kStage2 || s == Stage::kStage3)) os << " keep " << e.keep_rate;
    say(ctx, os.str());
  };
  const auto report = run_stage(bundle, train, stage_config(c, stage), derive_seed(c.seed, name), cb);
  save_stage(ctx, bundle, name);
  fs::create_directories(log_file.parent_path());
  write_text_atomic(log_file, stage_log_csv(report));
  record_metrics(ctx, {log_file});
}

void cmd_calibrate(const CommandContext& ctx) {
  const auto& c = ctx.config;
  if (!c.plan.bundle.adafocus_plus) throw ConfigError("calibrate requires model.adafocus_plus = true");
  auto bundle = load_stage(ctx, "stage3", "calibrate");
  auto calib = load_role(ctx, SplitRole::kCalibration);
  const auto out = ctx.dir.checkpoint("calibrated");
  const auto report = ctx.dir.metrics("calibration.json");
  guard_outputs(ctx, {out, report});
  open_run(ctx);
  const auto cal = calibrate(bundle, calib, c.eval.calibration_eta);
  save_stage(ctx, bundle, "calibrated");
  json j = {{"eta", c.eval.calibration_eta},
            {"rho", cal.rho},
            {"kept_fraction", cal.kept_fraction},
            {"degenerate", cal.degenerate}};
  fs::create_directories(report.parent_path());
  write_text_atomic(report, j.dump(2) + "\n");
  record_metrics(ctx, {report});
  std::ostringstream os;
  os << "calibrate: eta " << c.eval.calibration_eta << " rho " << cal.rho << " kept fraction " << cal.kept_fraction;
  say(ctx, os.str());
}

MetricsRecord cmd_eval(const CommandContext& ctx) {
  const auto& c = ctx.config;
  const auto name = c.eval.use_skip ? std::string("calibrated") : std::string("stage3");
  const auto bundle = load_stage(ctx, name, "eval");
  const auto test = load_role(ctx, SplitRole::kTest);
  guard_outputs(ctx, {ctx.dir.metrics("eval.json"), ctx.dir.metrics("eval.csv")});
  open_run(ctx);
  EvalOptions o;
  o.mode = c.eval.mode;
  o.policy = c.eval.policy;
  o.use_skip = c.eval.use_skip;
  o.seed = derive_seed(c.seed, "eval");
  o.label = "eval";
  auto r = evaluate(bundle, test, o);
  write_records(ctx, "eval", {r});
  std::ostringstream os;
  os << "eval: top1 " << r.top1 << " mean multiply-adds " << r.mean_flops;
  say(ctx, os.str());
  return r;
}

AblationOutcome cmd_ablate(const CommandContext& ctx) {
  const auto& c = ctx.config;
  const auto learned = load_stage(ctx, "stage3", "ablate");
  const auto fixed = c.eval.hold_model_constant ? learned : load_stage(ctx, "stage1", "ablate");
  const auto test = load_role(ctx, SplitRole::kTest);
  const std::vector<fs::path> outs = {ctx.dir.metrics("ablate_policies.json"),
                                      ctx.dir.metrics("ablate_policies.csv"),
                                      ctx.dir.metrics("selections_learned.csv"),
                                      ctx.dir.metrics("selections_random.csv"), ctx.dir.metrics("overlap.json")};
  guard_outputs(ctx, outs);
  open_run(ctx);
  const auto seed = derive_seed(c.seed, "ablate");
  AblationOutcome out;
  out.policies = ablate_policies(learned, fixed, test, seed);
  write_records(ctx, "ablate_policies", out.policies);
  const auto sl = export_selections(learned, test, PolicyVariant::kLearned, seed);
  const auto sr = export_selections(fixed, test, PolicyVariant::kRandom, seed);
  out.overlap_learned = overlap_rate(sl);
  out.overlap_random = overlap_rate(sr);
  write_text_atomic(outs[2], selections_to_csv(sl));
  write_text_atomic(outs[3], selections_to_csv(sr));
  write_text_atomic(outs[4], json{{"learned", out.overlap_learned}, {"random", out.overlap_random}}.dump(2) + "\n");
  record_metrics(ctx, {outs[2], outs[3], outs[4]});
  for (const auto& r : out.policies) {
    std::ostringstream os;
    os << "ablate: " << r.policy << " top1 " << r.top1;
    say(ctx, os.str());
  }
  std::ostringstream os;
  os << "ablate: glyph overlap learned " << out.overlap_learned << " random " << out.overlap_random;
  say(ctx, os.str());
  return out;
}

std::vector<MetricsRecord> cmd_sweep(const CommandContext& ctx, const std::vector<fs::path>& extra_runs) {
  const auto& c = ctx.config;
  std::vector<ModelBundle> bundles;
  bundles.push_back(load_stage(ctx, "stage3", "sweep"));
  for (const auto& root : extra_runs) {
    RunDirectory other{root};
    require_file(other.config(), "config of extra run");
    const auto oc = load_config(other.config());
    if (!(oc.data == c.data)) throw ConfigError("sweep: run " + root.string() + " uses a different data config");
    const auto p = other.checkpoint("stage3");
    require_file(p, "sweep needs a stage3 checkpoint;");
    bundles.push_back(load_bundle(p));
  }
  const auto calib = load_role(ctx, SplitRole::kCalibration);
  const auto test = load_role(ctx, SplitRole::kTest);
  guard_outputs(ctx, {ctx.dir.metrics("sweep.json"), ctx.dir.metrics("sweep.csv")});
  open_run(ctx);
  auto recs = tradeoff_sweep(bundles, calib, test, c.eval.etas, derive_seed(c.seed, "sweep"));
  write_records(ctx, "sweep", recs);
  for (const auto& r : recs) {
    std::ostringstream os;
    os << "sweep: " << r.label << " top1 " << r.top1 << " focus " << r.mean_focus;
    if (r.keep_rate) os << " keep " << *r.keep_rate;
    say(ctx, os.str());
  }
  return recs;
}

std::vector<std::string> cmd_plot(const CommandContext& ctx) {
  std::vector<MetricsRecord> recs;
  for (const char* stem : {"sweep", "ablate_policies", "eval"}) {
    const auto p = ctx.dir.metrics(std::string(stem) + ".json");
    if (!fs::exists(p)) continue;
    auto more = metrics_from_json(read_text(p));
    recs.insert(recs.end(), more.begin(), more.end());
  }
  if (recs.empty()) throw ConfigError("plot: no metrics in " + (ctx.dir.root / "metrics").string());
  const auto out = ctx.dir.plots();
  guard_outputs(ctx, {out / "tradeoff.csv", out / "tradeoff.svg", out / "online_curve.csv",
                      out / "online_curve.svg"});
  open_run(ctx);
  auto files = emit_plots(recs, out.string());
  for (const auto& f : files) say(ctx, "plot: " + f);
  return files;
}

void cmd_run_all(const CommandContext& ctx) {
  cmd_gen_data(ctx);
  if (!ctx.config.plan.skip_pretrain) cmd_stage(ctx, Stage::kPretrain);
  cmd_stage(ctx, Stage::kStage1);
  cmd_stage(ctx, Stage::kStage2);
  cmd_stage(ctx, Stage::kStage3);
  const bool plus = ctx.config.plan.bundle.adafocus_plus;
  if (plus) cmd_calibrate(ctx);
  cmd_eval(ctx);
  cmd_ablate(ctx);
  if (plus) cmd_sweep(ctx);
  cmd_plot(ctx);
}

std::vector<CheckResult> cmd_verify(const VerifyOptions& options,
                                    const std::optional<fs::path>& bundle_path, std::ostream* log) {
  std::vector<CheckResult> out;
  auto emit = [&](const CheckResult& r) {
    if (log) *log << format_check(r) << std::endl;
    out.push_back(r);
  };
  for (const auto& r : gradient_checks(options.grad)) emit(r);

  ModelBundle bundle;
  SynthConfig sc;
  if (bundle_path) {
    bundle = load_bundle(*bundle_path);
    sc.num_classes = bundle.config.num_classes;
    sc.frame_size = bundle.config.frame_size;
    sc.channels = bundle.config.channels;
  } else {
    BundleConfig bc;
    bc.adafocus_plus = true;
    bundle = ModelBundle::create(bc, derive_seed(options.seed, "verify_model"));
  }
  const auto split = generate_split(sc, static_cast<std::size_t>(std::max(options.consistency_samples, sc.num_classes)),
                                    SplitRole::kTest, derive_seed(options.seed, "verify_data"));
  emit(reward_zero_mean_check(bundle, split, options.reward_triples, derive_seed(options.seed, "reward")));
  emit(online_offline_check(bundle, split, options.consistency_samples, false));
  if (bundle.skip_policy) {
    const double etas[] = {0.9, 0.7, 0.5};
    auto calibrated = bundle;
    for (const auto& r : calibration_checks(calibrated, split, etas)) emit(r);
    emit(online_offline_check(calibrated, split, options.consistency_samples, true));
  }
  emit(bandit_check(derive_seed(options.seed, "bandit")));
  return out;
}

}  // namespace adafocus
