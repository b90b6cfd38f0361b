#pragma once

#include <algorithm>
#include <atomic>
#include <cmath>
#include <filesystem>
#include <mutex>
#include <string>
#include <thread>
#include <tuple>
#include <vector>

#include <fmt/format.h>
#include <nlohmann/json.hpp>

#include "cfair/dataset.hpp"
#include "cfair/fair.hpp"

// Fairness/performance trade-off: lambda sweeps, fitted lines and AUC comparison.

namespace cfair {

struct TradeoffPoint {
  std::string method;
  double lambda_fair = 0.0;
  std::uint64_t seed = 0;
  double e = 0.0;  // explained variance (higher is better)
  double f = 0.0;  // fair_mmd (lower is better)
  double mse = 0.0;

  auto key() const { return std::tie(method, lambda_fair, seed); }
  bool operator==(const TradeoffPoint&) const = default;
};

inline void sort_points(std::vector<TradeoffPoint>& pts) {
  std::sort(pts.begin(), pts.end(),
            [](const TradeoffPoint& l, const TradeoffPoint& r) { return l.key() < r.key(); });
}

/// F = slope * E + intercept, fitted by ordinary least squares.
struct FittedCurve {
  double slope = 0.0;
  double intercept = 0.0;
  double e_min = 0.0;
  double e_max = 0.0;
  std::size_t count = 0;

  double operator()(double e) const { return slope * e + intercept; }
};

inline FittedCurve fit_line(const std::vector<TradeoffPoint>& pts) {
  if (pts.size() < 2) throw DegenerateFitError("fit_line: need at least 2 points");
  const double n = static_cast<double>(pts.size());
  double me = 0.0, mf = 0.0;
  for (const auto& p : pts) {
    me += p.e;
    mf += p.f;
  }
  me /= n;
  mf /= n;
  double see = 0.0, sef = 0.0;
  FittedCurve c;
  c.e_min = pts.front().e;
  c.e_max = pts.front().e;
  for (const auto& p : pts) {
    see += (p.e - me) * (p.e - me);
    sef += (p.e - me) * (p.f - mf);
    c.e_min = std::min(c.e_min, p.e);
    c.e_max = std::max(c.e_max, p.e);
  }
  if (!(c.e_max > c.e_min) || see == 0.0)
    throw DegenerateFitError("fit_line: all E values are identical");
  c.slope = sef / see;
  c.intercept = mf - c.slope * me;
  c.count = pts.size();
  return c;
}

// Integration limits may leave the observed E range by at most this fraction of its width.
inline constexpr double kAucExtrapolation = 0.05;

/// Integral of the fitted line over [e_lo, e_hi].
inline double auc(const FittedCurve& c, double e_lo, double e_hi) {
  if (!(e_lo < e_hi)) throw ArgumentError("auc: range must satisfy e_lo < e_hi");
  const double slack = kAucExtrapolation * (c.e_max - c.e_min);
  if (e_lo < c.e_min - slack - 1e-12 || e_hi > c.e_max + slack + 1e-12)
    throw ArgumentError(fmt::format("auc: [{}, {}] extrapolates beyond the observed E range [{}, {}]",
                                    e_lo, e_hi, c.e_min, c.e_max));
  return c.slope * (e_hi * e_hi - e_lo * e_lo) / 2.0 + c.intercept * (e_hi - e_lo);
}

struct Comparison {
  std::string method_1;
  std::string method_2;
  double auc_1 = 0.0;
  double auc_2 = 0.0;
  double e_lo = 0.0;
  double e_hi = 0.0;
  std::size_t n_1 = 0;
  std::size_t n_2 = 0;
  std::string verdict;  // winning method id, or "tie"
  FittedCurve curve_1;
  FittedCurve curve_2;
};

inline constexpr double kAucTie = 1e-12;

/// Fits both point sets and integrates F over the intersection of their E
/// ranges; the smaller area wins.
inline Comparison compare(const std::vector<TradeoffPoint>& p1, const std::vector<TradeoffPoint>& p2,
                          std::string name_1 = {}, std::string name_2 = {}) {
  auto name_of = [](const std::vector<TradeoffPoint>& p, std::string given, const char* fallback) {
    if (!given.empty()) return given;
    return p.empty() ? std::string(fallback) : p.front().method;
  };
  Comparison c;
  c.method_1 = name_of(p1, std::move(name_1), "method_1");
  c.method_2 = name_of(p2, std::move(name_2), "method_2");
  if (c.method_1 == c.method_2) {
    c.method_1 += "#1";
    c.method_2 += "#2";
  }
  c.curve_1 = fit_line(p1);
  c.curve_2 = fit_line(p2);
  c.e_lo = std::max(c.curve_1.e_min, c.curve_2.e_min);
  c.e_hi = std::min(c.curve_1.e_max, c.curve_2.e_max);
  if (!(c.e_lo < c.e_hi))
    throw ComparisonError(fmt::format("compare: E ranges [{}, {}] and [{}, {}] do not overlap",
                                      c.curve_1.e_min, c.curve_1.e_max, c.curve_2.e_min,
                                      c.curve_2.e_max));
  c.auc_1 = auc(c.curve_1, c.e_lo, c.e_hi);
  c.auc_2 = auc(c.curve_2, c.e_lo, c.e_hi);
  c.n_1 = p1.size();
  c.n_2 = p2.size();
  if (std::abs(c.auc_1 - c.auc_2) < kAucTie)
    c.verdict = "tie";
  else
    c.verdict = c.auc_1 < c.auc_2 ? c.method_1 : c.method_2;
  return c;
}

inline nlohmann::json comparison_json(const Comparison& c, const std::string& config_digest = {}) {
  auto curve = [](const FittedCurve& f) {
    return nlohmann::json{{"slope", f.slope},
                          {"intercept", f.intercept},
                          {"e_min", f.e_min},
                          {"e_max", f.e_max}};
  };
  nlohmann::json j = {
      {"auc", {{c.method_1, c.auc_1}, {c.method_2, c.auc_2}}},
      {"e_range", {c.e_lo, c.e_hi}},
      {"e_range_policy", "intersection of observed E ranges"},
      {"orientation", "integral of F over E; smaller is better"},
      {"verdict", c.verdict},
      {"n_points", {{c.method_1, c.n_1}, {c.method_2, c.n_2}}},
      {"fits", {{c.method_1, curve(c.curve_1)}, {c.method_2, curve(c.curve_2)}}}};
  if (!config_digest.empty()) j["config_digest"] = config_digest;
  return j;
}

// ---- points CSV --------------------------------------------------------------

inline std::string points_to_csv(std::vector<TradeoffPoint> pts, const std::string& config_digest = {}) {
  sort_points(pts);
  std::string out;
  if (!config_digest.empty()) out += "# config_digest=" + config_digest + "\n";
  out += "method,lambda_fair,seed,E,F,mse\n";
  for (const auto& p : pts)
    out += fmt::format("{},{},{},{},{},{}\n", p.method, csv::format_number(p.lambda_fair), p.seed,
                       csv::format_number(p.e), csv::format_number(p.f), csv::format_number(p.mse));
  return out;
}

inline std::vector<TradeoffPoint> points_from_csv(const std::filesystem::path& path) {
  const csv::Table t = csv::read(path);
  const std::vector<std::string> expected = {"method", "lambda_fair", "seed", "E", "F", "mse"};
  if (t.header != expected)
    throw SchemaError("'" + path.string() + "': expected columns method,lambda_fair,seed,E,F,mse");
  std::vector<TradeoffPoint> pts;
  for (std::size_t r = 0; r < t.rows.size(); ++r) {
    const auto& row = t.rows[r];
    if (row.size() != expected.size())
      throw SchemaError(fmt::format("'{}': row {} has {} fields", path.string(), r + 1, row.size()));
    const std::string where = fmt::format("'{}' row {}", path.string(), r + 1);
    TradeoffPoint p;
    p.method = row[0];
    p.lambda_fair = csv::parse_number(row[1], where);
    try {
      p.seed = std::stoull(row[2]);
    } catch (const std::exception&) {
      throw SchemaError("bad seed '" + row[2] + "' in " + where);
    }
    p.e = csv::parse_number(row[3], where);
    p.f = csv::parse_number(row[4], where);
    p.mse = csv::parse_number(row[5], where);
    pts.push_back(std::move(p));
  }
  return pts;
}

inline std::vector<std::string> methods_of(const std::vector<TradeoffPoint>& pts) {
  std::vector<std::string> out;
  for (const auto& p : pts)
    if (std::find(out.begin(), out.end(), p.method) == out.end()) out.push_back(p.method);
  std::sort(out.begin(), out.end());
  return out;
}

inline std::vector<TradeoffPoint> points_for(const std::vector<TradeoffPoint>& pts,
                                             const std::string& method) {
  std::vector<TradeoffPoint> out;
  std::copy_if(pts.begin(), pts.end(), std::back_inserter(out),
               [&](const TradeoffPoint& p) { return p.method == method; });
  return out;
}

// ---- SVG ---------------------------------------------------------------------

struct PlotOptions {
  bool axis_swap = false;  // draw E vertically and F horizontally
  int width = 640;
  int height = 480;
  std::string title = "Fairness / performance trade-off";
};

namespace detail {

inline std::string xml_escape(const std::string& s) {
  std::string out;
  for (char c : s) {
    switch (c) {
      case '&': out += "&amp;"; break;
      case '<': out += "&lt;"; break;
      case '>': out += "&gt;"; break;
      case '"': out += "&quot;"; break;
      default: out += c;
    }
  }
  return out;
}

inline std::pair<double, double> padded_range(double lo, double hi) {
  if (!(hi > lo)) {
    const double pad = std::max(std::abs(lo) * 0.1, 0.5);
    return {lo - pad, hi + pad};
  }
  const double pad = 0.05 * (hi - lo);
  return {lo - pad, hi + pad};
}

}  // namespace detail

/// Self-contained SVG scatter: one <circle> per point, one <line> per fitted
/// method (methods with at least two distinct E values), <path> axes and a
/// <rect>-keyed legend. Fitted lines are the only <line> elements.
inline std::string render_svg(std::vector<TradeoffPoint> pts, const PlotOptions& opt = {},
                              const std::string& config_digest = {}) {
  if (pts.empty()) throw ArgumentError("emit_plot: no points to plot");
  sort_points(pts);
  static const char* palette[] = {"#1f77b4", "#d62728", "#2ca02c", "#9467bd", "#ff7f0e", "#8c564b"};
  const auto methods = methods_of(pts);

  double e_lo = pts.front().e, e_hi = e_lo, f_lo = pts.front().f, f_hi = f_lo;
  for (const auto& p : pts) {
    e_lo = std::min(e_lo, p.e);
    e_hi = std::max(e_hi, p.e);
    f_lo = std::min(f_lo, p.f);
    f_hi = std::max(f_hi, p.f);
  }
  std::tie(e_lo, e_hi) = detail::padded_range(e_lo, e_hi);
  std::tie(f_lo, f_hi) = detail::padded_range(f_lo, f_hi);

  const double left = 70, right = 150, top = 40, bottom = 60;
  const double pw = opt.width - left - right, ph = opt.height - top - bottom;
  // Maps (E, F) to pixels; E is horizontal unless the axes are swapped.
  auto px = [&](double e, double f) {
    const double h = opt.axis_swap ? (f - f_lo) / (f_hi - f_lo) : (e - e_lo) / (e_hi - e_lo);
    const double v = opt.axis_swap ? (e - e_lo) / (e_hi - e_lo) : (f - f_lo) / (f_hi - f_lo);
    return std::pair<double, double>{left + h * pw, top + (1.0 - v) * ph};
  };

  std::string s;
  s += fmt::format(
      "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"{}\" height=\"{}\" viewBox=\"0 0 {} {}\">\n",
      opt.width, opt.height, opt.width, opt.height);
  if (!config_digest.empty()) s += "<!-- config_digest=" + config_digest + " -->\n";
  s += fmt::format("<rect x=\"0\" y=\"0\" width=\"{}\" height=\"{}\" fill=\"white\"/>\n", opt.width,
                   opt.height);
  s += fmt::format("<text x=\"{}\" y=\"24\" text-anchor=\"middle\" font-size=\"15\">{}</text>\n",
                   left + pw / 2, detail::xml_escape(opt.title));
  s += fmt::format("<path d=\"M {:.2f} {:.2f} L {:.2f} {:.2f} L {:.2f} {:.2f}\" stroke=\"black\" fill=\"none\"/>\n",
                   left, top, left, top + ph, left + pw, top + ph);
  const std::string h_label = opt.axis_swap ? "F (fair_mmd)" : "E (explained variance)";
  const std::string v_label = opt.axis_swap ? "E (explained variance)" : "F (fair_mmd)";
  const auto [h_lo, h_hi] = opt.axis_swap ? std::pair{f_lo, f_hi} : std::pair{e_lo, e_hi};
  const auto [v_lo, v_hi] = opt.axis_swap ? std::pair{e_lo, e_hi} : std::pair{f_lo, f_hi};
  s += fmt::format("<text x=\"{:.2f}\" y=\"{:.2f}\" text-anchor=\"middle\" font-size=\"13\">{}</text>\n",
                   left + pw / 2, top + ph + 42, h_label);
  s += fmt::format(
      "<text x=\"18\" y=\"{:.2f}\" text-anchor=\"middle\" font-size=\"13\" transform=\"rotate(-90 18 {:.2f})\">{}</text>\n",
      top + ph / 2, top + ph / 2, v_label);
  for (int t = 0; t <= 4; ++t) {
    const double frac = t / 4.0;
    s += fmt::format("<text x=\"{:.2f}\" y=\"{:.2f}\" text-anchor=\"middle\" font-size=\"10\">{:.3g}</text>\n",
                     left + frac * pw, top + ph + 16, h_lo + frac * (h_hi - h_lo));
    s += fmt::format("<text x=\"{:.2f}\" y=\"{:.2f}\" text-anchor=\"end\" font-size=\"10\">{:.3g}</text>\n",
                     left - 6, top + (1.0 - frac) * ph + 4, v_lo + frac * (v_hi - v_lo));
  }

  for (std::size_t m = 0; m < methods.size(); ++m) {
    const char* color = palette[m % std::size(palette)];
    const auto mp = points_for(pts, methods[m]);
    s += fmt::format("<g class=\"method\" data-method=\"{}\">\n", detail::xml_escape(methods[m]));
    for (const auto& p : mp) {
      const auto [x, y] = px(p.e, p.f);
      s += fmt::format("<circle cx=\"{:.2f}\" cy=\"{:.2f}\" r=\"4\" fill=\"{}\" fill-opacity=\"0.8\"/>\n", x,
                       y, color);
      s += fmt::format("<text x=\"{:.2f}\" y=\"{:.2f}\" font-size=\"8\" fill=\"{}\">λ={}</text>\n", x + 5,
                       y - 5, color, csv::format_number(p.lambda_fair));
    }
    try {
      const FittedCurve c = fit_line(mp);
      const auto [x1, y1] = px(c.e_min, c(c.e_min));
      const auto [x2, y2] = px(c.e_max, c(c.e_max));
      s += fmt::format("<line x1=\"{:.2f}\" y1=\"{:.2f}\" x2=\"{:.2f}\" y2=\"{:.2f}\" stroke=\"{}\" stroke-width=\"2\"/>\n",
                       x1, y1, x2, y2, color);
    } catch (const DegenerateFitError&) {
      // Fewer than two distinct E values: markers only.
    }
    s += "</g>\n";
    const double ly = top + 10 + 20.0 * static_cast<double>(m);
    s += fmt::format("<rect x=\"{:.2f}\" y=\"{:.2f}\" width=\"12\" height=\"12\" fill=\"{}\"/>\n",
                     left + pw + 16, ly, color);
    s += fmt::format("<text x=\"{:.2f}\" y=\"{:.2f}\" font-size=\"12\">{} (n={})</text>\n", left + pw + 34,
                     ly + 10, detail::xml_escape(methods[m]), mp.size());
  }
  s += "</svg>\n";
  return s;
}

/// Writes the SVG and a sibling CSV (same stem, .csv) of all points.
inline void emit_plot(const std::vector<TradeoffPoint>& pts, const std::filesystem::path& svg_path,
                      const PlotOptions& opt = {}, const std::string& config_digest = {}) {
  const std::string svg = render_svg(pts, opt, config_digest);
  write_file_atomic(svg_path, svg);
  std::filesystem::path csv_path = svg_path;
  csv_path.replace_extension(".csv");
  write_file_atomic(csv_path, points_to_csv(pts, config_digest));
}

// ---- sweep -------------------------------------------------------------------

struct SweepArm {
  std::string method;  // point label
  FairTrainConfig config;
};

// Default arms: kernel (MMD^2) fairness loss vs the sample-mean MSE loss.
inline std::vector<SweepArm> default_arms(const FairTrainConfig& base) {
  FairTrainConfig mmd = base, mean = base;
  mmd.fairness_loss = FairnessLoss::Mmd2;
  mean.fairness_loss = FairnessLoss::MeanMse;
  return {{"mmd", mmd}, {"mean_mse", mean}};
}

struct SweepFailure {
  std::string method;
  double lambda_fair = 0.0;
  std::uint64_t seed = 0;
  std::string message;
};

struct SweepResult {
  std::vector<TradeoffPoint> points;
  std::vector<SweepFailure> failures;
};

struct SweepJob {
  const SweepArm* arm = nullptr;
  double lambda_fair = 0.0;
  int repeat = 0;
  std::uint64_t seed = 0;
};

// Seed of the r-th repeat. Stage-2 and evaluation streams depend on the repeat
// only, so all lambdas and arms of one repeat share their random numbers.
inline std::uint64_t repeat_seed(std::uint64_t base_seed, int repeat) {
  return base_seed + static_cast<std::uint64_t>(repeat);
}

struct FairRun {
  FairResult result;
  Metrics metrics;
};

/// One stage-2 training plus test evaluation from a single seed.
inline FairRun run_fair(const MechanismModel& mech, const AbductorModel& abd, const Dataset& train,
                        const Dataset& test, FairTrainConfig cfg, double lambda_fair,
                        std::uint64_t seed) {
  cfg.lambda_fair = lambda_fair;
  cfg.validate();
  RngStream stage2(seed, "stage2");
  RngStream init = stage2.derive("init");
  Predictor h = Predictor::create(static_cast<int>(train.d_x()), static_cast<int>(train.d_a()),
                                  static_cast<int>(train.d_y()), init, cfg.hidden, cfg.layers,
                                  activation_from_string(cfg.activation));
  FairRun run;
  run.result = train_fair(std::move(h), mech, abd, train, cfg, stage2);
  RngStream eval(seed, "eval");
  run.metrics = evaluate(run.result.predictor, mech, abd, test, cfg, Kernel(run.result.rho_fair), eval);
  return run;
}

/// Runs every (arm, lambda, repeat) job on a bounded pool of worker threads.
/// Failed jobs are recorded and the sweep continues; points come back sorted.
inline SweepResult sweep(const MechanismModel& mech, const AbductorModel& abd, const Dataset& train,
                         const Dataset& test, const std::vector<SweepArm>& arms,
                         const std::vector<double>& lambdas, int repeats, std::uint64_t base_seed,
                         int workers = 1) {
  if (arms.empty()) throw ArgumentError("sweep: no arms");
  if (lambdas.empty()) throw ArgumentError("sweep: lambdas must be nonempty");
  if (repeats < 1) throw ArgumentError("sweep: repeats must be >= 1");
  for (double l : lambdas)
    if (!(l >= 0.0)) throw ArgumentError("sweep: lambdas must be >= 0");

  std::vector<SweepJob> jobs;
  for (const auto& arm : arms)
    for (double l : lambdas)
      for (int r = 0; r < repeats; ++r) jobs.push_back({&arm, l, r, repeat_seed(base_seed, r)});

  SweepResult out;
  std::mutex mu;
  std::atomic<std::size_t> next{0};
  auto worker = [&] {
    for (std::size_t i = next++; i < jobs.size(); i = next++) {
      const SweepJob& job = jobs[i];
      try {
        const FairRun run = run_fair(mech, abd, train, test, job.arm->config, job.lambda_fair, job.seed);
        std::lock_guard lock(mu);
        out.points.push_back({job.arm->method, job.lambda_fair, job.seed,
                              run.metrics.explained_variance, run.metrics.fair_mmd, run.metrics.mse});
      } catch (const std::exception& e) {
        std::lock_guard lock(mu);
        out.failures.push_back({job.arm->method, job.lambda_fair, job.seed, e.what()});
      }
    }
  };
  const int n_workers = std::clamp(workers, 1, static_cast<int>(jobs.size()));
  if (n_workers == 1) {
    worker();
  } else {
    std::vector<std::thread> pool;
    for (int w = 0; w < n_workers; ++w) pool.emplace_back(worker);
    for (auto& t : pool) t.join();
  }
  sort_points(out.points);
  std::sort(out.failures.begin(), out.failures.end(), [](const SweepFailure& l, const SweepFailure& r) {
    return std::tie(l.method, l.lambda_fair, l.seed) < std::tie(r.method, r.lambda_fair, r.seed);
  });
  if (out.points.empty())
    throw TrainingError("sweep: every run failed (first: " + out.failures.front().message + ")", 0);
  return out;
}

}  // namespace cfair
