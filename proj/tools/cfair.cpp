#include <cstdio>
#include <filesystem>
#include <iostream>
#include <string>
#include <vector>

#include <CLI11.hpp>
#include <spdlog/sinks/stdout_color_sinks.h>
#include <spdlog/spdlog.h>

#include "cfair/cfair.hpp"

namespace fs = std::filesystem;
using namespace cfair;

namespace {

struct Common {
  std::string config_path;
  std::vector<std::string> overrides;
  bool verbose = false;
  bool quiet = false;
};

void add_common(CLI::App* cmd, Common& c) {
  cmd->add_option("-c,--config", c.config_path, "TOML run configuration (defaults apply when omitted)");
  cmd->add_option("--set", c.overrides, "Override a config value, e.g. --set stage1.steps=200 (repeatable)");
}

void setup_logging(const Common& c) {
  auto logger = spdlog::stderr_color_mt("cfair");
  spdlog::set_default_logger(logger);
  spdlog::set_pattern("[%H:%M:%S] [%^%l%$] %v");
  spdlog::set_level(c.verbose ? spdlog::level::debug : c.quiet ? spdlog::level::warn : spdlog::level::info);
}

struct Context {
  RunConfig cfg;
  std::string digest;
  fs::path out;
};

Context load(const Common& c, std::vector<std::string> extra = {}) {
  std::vector<std::string> all = c.overrides;
  all.insert(all.end(), extra.begin(), extra.end());
  Context ctx;
  ctx.cfg = load_run_config(c.config_path, all);
  ctx.digest = config_digest(ctx.cfg);
  ctx.out = ctx.cfg.output_dir;
  spdlog::debug("config: {}", canonical_text(ctx.cfg));
  spdlog::info("config digest {}", ctx.digest);
  return ctx;
}

// Digest of the settings that determine the dataset alone.
std::string data_digest(const RunConfig& cfg) {
  return sha256_hex(nlohmann::json{{"seed", cfg.seed}, {"data", cfg.data.to_json()}}.dump());
}

void write_text(const fs::path& p, const std::string& text) {
  write_file_atomic(p, text);
  spdlog::info("wrote {}", p.string());
}

// ---- gen-data ----------------------------------------------------------------

int cmd_gen_data(const Common& common) {
  const Context ctx = load(common);
  const DataBundle data = make_data(ctx.cfg);
  const fs::path dir = ctx.out / "data";
  write_text(dir / "train.csv", dataset_to_csv(data.train, ctx.digest));
  write_text(dir / "test.csv", dataset_to_csv(data.test, ctx.digest));
  write_text(dir / "normalization.json", json_text(normalization_sidecar(data.train, ctx.digest)));
  nlohmann::json manifest = {{"kind", ctx.cfg.data.kind},
                             {"seed", ctx.cfg.seed},
                             {"n_train", data.train.size()},
                             {"n_test", data.test.size()},
                             {"d_a", data.train.d_a()},
                             {"d_x", data.train.d_x()},
                             {"d_y", data.train.d_y()},
                             {"data_digest", data_digest(ctx.cfg)},
                             {"config_digest", ctx.digest}};
  if (data.scm) {
    nlohmann::json scm = data.scm->to_json();
    scm["config_digest"] = ctx.digest;
    write_text(dir / "scm.json", json_text(scm));
  }
  write_text(dir / "manifest.json", json_text(manifest));
  spdlog::info("{} train / {} test rows, d_x = {}", data.train.size(), data.test.size(), data.train.d_x());
  return kExitOk;
}

// Reads the split written by gen-data and checks it matches the current data settings.
DataBundle read_data(const Context& ctx) {
  const fs::path dir = ctx.out / "data";
  if (!fs::exists(dir / "manifest.json"))
    throw IoError("no dataset in '" + dir.string() + "' (run gen-data first)");
  const nlohmann::json manifest = read_json(dir / "manifest.json");
  if (manifest.value("data_digest", std::string()) != data_digest(ctx.cfg))
    throw ConfigError("dataset in '" + dir.string() +
                      "' was generated with different seed/data settings; rerun gen-data");
  const nlohmann::json sidecar = read_json(dir / "normalization.json");
  DataBundle data;
  data.train = dataset_from_csv(dir / "train.csv", sidecar);
  data.test = dataset_from_csv(dir / "test.csv", sidecar);
  if (fs::exists(dir / "scm.json")) {
    nlohmann::json scm = read_json(dir / "scm.json");
    scm.erase("config_digest");
    data.scm = LinearGaussianSCM::from_json(scm);
  }
  return data;
}

// ---- train-ncm ---------------------------------------------------------------

struct NcmOptions {
  std::string mode;
  bool no_ctf = false;
  std::string stage1_dir = "stage1";
};

int cmd_train_ncm(const Common& common, const NcmOptions& opt) {
  std::vector<std::string> extra;
  if (!opt.mode.empty()) extra.push_back("stage1.mode=\"" + opt.mode + "\"");
  if (opt.no_ctf) extra.push_back("stage1.lambda_ctf=0.0");
  const Context ctx = load(common, extra);
  const DataBundle data = read_data(ctx);
  const long total_steps = ctx.cfg.stage1.mode == TrainMode::Phased ? 2L * ctx.cfg.stage1.steps
                                                                    : ctx.cfg.stage1.steps;
  const Stage1Result res = run_stage1(ctx.cfg, data, [&](const LossRecord& r) {
    if (r.step % 100 == 0 || r.step + 1 == total_steps)
      spdlog::info("stage1 step {}/{} total {:.6g}", r.step + 1, total_steps, r.total);
  });

  const fs::path dir = ctx.out / opt.stage1_dir;
  write_text(dir / "mechanism.json", json_text(mechanism_to_json(res.mechanism, ctx.cfg.seed, ctx.digest)));
  write_text(dir / "abductor.json", json_text(abductor_to_json(res.abductor, ctx.cfg.seed, ctx.digest)));
  write_text(dir / "loss_history.csv", loss_history_csv(res.history, ctx.digest));

  auto first_last = [&](auto member) {
    nlohmann::json j = nlohmann::json::object();
    for (const auto& r : res.history)
      if ((r.*member).has_value()) {
        if (!j.contains("initial")) j["initial"] = *(r.*member);
        j["final"] = *(r.*member);
      }
    return j;
  };
  const GenTrainConfig& s1 = ctx.cfg.stage1;
  nlohmann::json manifest = {
      {"mode", to_string(s1.mode)},
      {"lambda_gen", s1.lambda_gen},
      {"lambda_pos", s1.lambda_pos},
      {"lambda_ctf", s1.lambda_ctf},
      {"lambda_reg", s1.lambda_reg},
      {"steps", s1.steps},
      {"d_u", res.mechanism.d_u},
      {"kernels", {{"rho_gen", res.kernels.rho_gen}, {"rho_pos", res.kernels.rho_pos}, {"rho_ctf", res.kernels.rho_ctf}}},
      {"losses",
       {{"l_gen", first_last(&LossRecord::gen)},
        {"l_pos", first_last(&LossRecord::pos)},
        {"l_ctf", first_last(&LossRecord::ctf)},
        {"l_reg", first_last(&LossRecord::reg)}}},
      {"seed", ctx.cfg.seed},
      {"data_digest", data_digest(ctx.cfg)},
      {"config_digest", ctx.digest}};
  write_text(dir / "ncm_manifest.json", json_text(manifest));
  return kExitOk;
}

std::pair<MechanismModel, AbductorModel> read_stage1(const Context& ctx, const std::string& stage1_dir) {
  const fs::path dir = ctx.out / stage1_dir;
  if (!fs::exists(dir / "mechanism.json"))
    throw IoError("no stage-1 checkpoints in '" + dir.string() + "' (run train-ncm first)");
  return {mechanism_from_json(read_json(dir / "mechanism.json")),
          abductor_from_json(read_json(dir / "abductor.json"))};
}

// ---- train-fair --------------------------------------------------------------

struct FairOptions {
  std::optional<double> lambda;
  std::string loss;
  std::string stage1_dir = "stage1";
};

int cmd_train_fair(const Common& common, const FairOptions& opt) {
  std::vector<std::string> extra;
  if (opt.lambda) extra.push_back("stage2.lambda_fair=" + fmt::format("{:.17g}", *opt.lambda));
  if (!opt.loss.empty()) extra.push_back("stage2.fairness_loss=\"" + opt.loss + "\"");
  const Context ctx = load(common, extra);
  const DataBundle data = read_data(ctx);
  const auto [mech, abd] = read_stage1(ctx, opt.stage1_dir);
  const FairTrainConfig& s2 = ctx.cfg.stage2;
  const FairRun run = run_fair(mech, abd, data.train, data.test, s2, s2.lambda_fair, ctx.cfg.seed);

  const fs::path dir = ctx.out / "fair" / to_string(s2.fairness_loss) /
                       ("lambda_" + csv::format_number(s2.lambda_fair));
  write_text(dir / "predictor.json", json_text(predictor_to_json(run.result.predictor, ctx.cfg.seed, ctx.digest)));
  write_text(dir / "metrics.json",
             json_text(metrics_json(run.metrics, s2.lambda_fair, ctx.cfg.seed, ctx.digest)));
  std::string hist = "# config_digest=" + ctx.digest + "\nstep,l_pred,l_fair,total\n";
  for (const auto& r : run.result.history)
    hist += fmt::format("{},{},{},{}\n", r.step, csv::format_number(r.pred), csv::format_number(r.fair),
                        csv::format_number(r.total));
  write_text(dir / "history.csv", hist);
  spdlog::info("lambda {}: mse {:.5g}, explained variance {:.5g}, fair_mmd {:.5g}, fair_mean_mse {:.5g}",
               s2.lambda_fair, run.metrics.mse, run.metrics.explained_variance, run.metrics.fair_mmd,
               run.metrics.fair_mean_mse);
  return kExitOk;
}

// ---- sweep / compare / plot ----------------------------------------------------

void write_comparison(const std::vector<TradeoffPoint>& pts, const std::vector<std::string>& arms,
                      const fs::path& path, const std::string& digest) {
  const Comparison c = compare(points_for(pts, arms.at(0)), points_for(pts, arms.at(1)), arms[0], arms[1]);
  write_text(path, json_text(comparison_json(c, digest)));
  spdlog::info("AUC {} = {:.6g}, {} = {:.6g} over E in [{:.4g}, {:.4g}] -> {}", c.method_1, c.auc_1,
               c.method_2, c.auc_2, c.e_lo, c.e_hi, c.verdict);
}

int cmd_sweep(const Common& common, const std::string& stage1_dir) {
  const Context ctx = load(common);
  const DataBundle data = read_data(ctx);
  const auto [mech, abd] = read_stage1(ctx, stage1_dir);
  std::vector<SweepArm> arms;
  for (const auto& name : ctx.cfg.sweep.arms) {
    FairTrainConfig c = ctx.cfg.stage2;
    c.fairness_loss = fairness_loss_from_string(name);
    arms.push_back({to_string(c.fairness_loss), c});
  }
  const SweepConfig& sc = ctx.cfg.sweep;
  spdlog::info("sweep: {} arms x {} lambdas x {} repeats on {} worker(s)", arms.size(), sc.lambdas.size(),
               sc.repeats, sc.workers);
  const SweepResult res = sweep(mech, abd, data.train, data.test, arms, sc.lambdas, sc.repeats, ctx.cfg.seed,
                                sc.workers);
  const fs::path dir = ctx.out / "sweep";
  write_text(dir / "points.csv", points_to_csv(res.points, ctx.digest));
  PlotOptions popt;
  popt.axis_swap = sc.axis_swap;
  emit_plot(res.points, dir / "plot.svg", popt, ctx.digest);
  spdlog::info("wrote {} and {}", (dir / "plot.svg").string(), (dir / "plot.csv").string());
  if (!res.failures.empty()) {
    nlohmann::json f = nlohmann::json::array();
    for (const auto& x : res.failures) {
      spdlog::warn("run {} lambda {} seed {} failed: {}", x.method, x.lambda_fair, x.seed, x.message);
      f.push_back({{"method", x.method}, {"lambda_fair", x.lambda_fair}, {"seed", x.seed}, {"error", x.message}});
    }
    write_text(dir / "failures.json", json_text({{"failures", f}, {"config_digest", ctx.digest}}));
  }
  std::vector<std::string> names;
  for (const auto& a : arms) names.push_back(a.method);
  if (names.size() >= 2) write_comparison(res.points, names, dir / "comparison.json", ctx.digest);
  return kExitOk;
}

std::string digest_from_comments(const csv::Table& t) {
  for (const auto& c : t.comments)
    if (c.rfind("config_digest=", 0) == 0) return c.substr(14);
  return {};
}

int cmd_compare(const std::string& points_path, std::vector<std::string> arms, const std::string& output) {
  const auto pts = points_from_csv(points_path);
  if (arms.empty()) arms = methods_of(pts);
  if (arms.size() != 2) throw ArgumentError("compare needs exactly two methods (use --arms a,b)");
  const std::string digest = digest_from_comments(csv::read(points_path));
  const Comparison c = compare(points_for(pts, arms[0]), points_for(pts, arms[1]), arms[0], arms[1]);
  const std::string text = json_text(comparison_json(c, digest));
  if (output.empty())
    std::cout << text;
  else
    write_text(output, text);
  return kExitOk;
}

int cmd_plot(const std::string& points_path, const std::string& svg, bool axis_swap) {
  const auto pts = points_from_csv(points_path);
  PlotOptions opt;
  opt.axis_swap = axis_swap;
  emit_plot(pts, svg, opt, digest_from_comments(csv::read(points_path)));
  spdlog::info("wrote {}", svg);
  return kExitOk;
}

// ---- verify ------------------------------------------------------------------

// Digest embedded in an artifact, or empty when the file carries none.
std::string embedded_digest(const fs::path& p) {
  const std::string ext = p.extension().string();
  if (ext == ".json") {
    const nlohmann::json j = read_json(p);
    return j.is_object() ? j.value("config_digest", std::string()) : std::string();
  }
  const std::string text = read_file(p);
  const std::string key = "config_digest=";
  const auto pos = text.find(key);
  if (pos == std::string::npos || pos > 256) return {};
  const auto start = pos + key.size();
  const auto end = text.find_first_not_of("0123456789abcdef", start);
  return text.substr(start, end - start);
}

int cmd_verify(const Common& common, std::vector<std::string> paths) {
  const Context ctx = load(common);
  if (paths.empty()) paths.push_back(ctx.out.string());
  std::vector<fs::path> files;
  for (const auto& p : paths) {
    if (fs::is_directory(p)) {
      for (const auto& e : fs::recursive_directory_iterator(p))
        if (e.is_regular_file()) files.push_back(e.path());
    } else if (fs::exists(p)) {
      files.push_back(p);
    } else {
      throw IoError("'" + p + "' does not exist");
    }
  }
  std::sort(files.begin(), files.end());
  std::size_t ok = 0, bad = 0;
  for (const auto& f : files) {
    const std::string ext = f.extension().string();
    if (ext != ".json" && ext != ".csv" && ext != ".svg") continue;
    const std::string d = embedded_digest(f);
    if (d.empty()) {
      std::cout << "MISSING  " << f.string() << "\n";
      ++bad;
    } else if (d != ctx.digest) {
      std::cout << "MISMATCH " << f.string() << " (" << d.substr(0, 12) << ")\n";
      ++bad;
    } else {
      std::cout << "OK       " << f.string() << "\n";
      ++ok;
    }
  }
  std::cout << ok << " consistent, " << bad << " inconsistent artifact(s) for digest " << ctx.digest << "\n";
  if (ok + bad == 0) throw IoError("no artifacts found");
  return bad == 0 ? kExitOk : kExitVerify;
}

}  // namespace

int main(int argc, char** argv) {
  tune_allocator();
  CLI::App app{"Counterfactually fair prediction with neural causal models and kernel losses"};
  app.require_subcommand(1);
  app.set_help_all_flag("--help-all", "Help for every subcommand");

  Common common;
  app.fallthrough();
  app.add_flag("-v,--verbose", common.verbose, "Debug logging");
  app.add_flag("-q,--quiet", common.quiet, "Warnings and errors only");
  auto* gen = app.add_subcommand("gen-data", "Generate (or ingest) the dataset and write the train/test split");
  add_common(gen, common);

  NcmOptions ncm;
  auto* tncm = app.add_subcommand("train-ncm", "Train the stage-1 mechanism and abductor");
  add_common(tncm, common);
  tncm->add_option("--mode", ncm.mode, "joint or phased (default: config value)")
      ->check(CLI::IsMember({"joint", "phased"}));
  tncm->add_flag("--no-ctf", ncm.no_ctf, "Disable the counterfactual-consistency loss (lambda_ctf = 0)");
  tncm->add_option("--stage1-dir", ncm.stage1_dir, "Checkpoint directory under the output dir")
      ->capture_default_str();

  FairOptions fair;
  auto* tfair = app.add_subcommand("train-fair", "Train one fairness-regularized predictor and evaluate it");
  add_common(tfair, common);
  tfair->add_option("--lambda", fair.lambda, "Fairness weight lambda_fair (default: config value)");
  tfair->add_option("--loss", fair.loss, "Fairness loss: mmd or mean_mse")->check(CLI::IsMember({"mmd", "mean_mse"}));
  tfair->add_option("--stage1-dir", fair.stage1_dir, "Stage-1 checkpoint directory")->capture_default_str();

  std::string sweep_stage1 = "stage1";
  auto* swp = app.add_subcommand("sweep", "Lambda sweep for every arm; writes points, plot and comparison");
  add_common(swp, common);
  swp->add_option("--stage1-dir", sweep_stage1, "Stage-1 checkpoint directory")->capture_default_str();

  std::string cmp_points, cmp_out;
  std::vector<std::string> cmp_arms;
  auto* cmp = app.add_subcommand("compare", "AUC comparison of two methods from a points CSV");
  cmp->add_option("points", cmp_points, "Points CSV")->required()->check(CLI::ExistingFile);
  cmp->add_option("--arms", cmp_arms, "The two method ids to compare")->delimiter(',');
  cmp->add_option("-o,--output", cmp_out, "Write the report here instead of stdout");

  std::string plot_points, plot_svg;
  bool plot_swap = false;
  auto* plt = app.add_subcommand("plot", "Render a points CSV as SVG (plus a sibling CSV)");
  plt->add_option("points", plot_points, "Points CSV")->required()->check(CLI::ExistingFile);
  plt->add_option("-o,--output", plot_svg, "SVG path")->required();
  plt->add_flag("--axis-swap", plot_swap, "Draw E vertically and F horizontally");

  std::vector<std::string> verify_paths;
  auto* ver = app.add_subcommand("verify", "Check that artifacts embed the digest of the given config");
  add_common(ver, common);
  ver->add_option("paths", verify_paths, "Files or directories (default: the output dir)");

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int rc = app.exit(e);
    return rc == 0 ? kExitOk : kExitArgument;
  }

  setup_logging(common);
  try {
    if (*gen) return cmd_gen_data(common);
    if (*tncm) return cmd_train_ncm(common, ncm);
    if (*tfair) return cmd_train_fair(common, fair);
    if (*swp) return cmd_sweep(common, sweep_stage1);
    if (*cmp) return cmd_compare(cmp_points, cmp_arms, cmp_out);
    if (*plt) return cmd_plot(plot_points, plot_svg, plot_swap);
    if (*ver) return cmd_verify(common, verify_paths);
  } catch (const TrainingError& e) {
    spdlog::error("{} (step {})", e.what(), e.step());
    return exit_code(e);
  } catch (const Error& e) {
    spdlog::error("{}", e.what());
    return exit_code(e);
  } catch (const std::exception& e) {
    spdlog::error("unexpected failure: {}", e.what());
    return kExitUnknown;
  }
  return kExitUnknown;
}
