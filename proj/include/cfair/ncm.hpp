#pragma once

#include <functional>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "cfair/adam.hpp"
#include "cfair/autodiff.hpp"
#include "cfair/dataset.hpp"
#include "cfair/kernels.hpp"
#include "cfair/mlp.hpp"
#include "cfair/random.hpp"
#include "cfair/scm.hpp"

// Stage 1: a neural causal model for A -> X <- U. The mechanism maps
// (a, eta) to x with eta ~ N(0, I); the abductor maps evidence (x, a) plus
// pushforward noise to posterior samples of the exogenous variable.

namespace cfair {

/// x = f_theta(a, eta), eta ~ N(0, I_{d_u}).
struct MechanismModel {
  Mlp net;
  int d_a = 1;
  int d_u = 1;

  int d_x() const { return net.output_dim(); }

  static MechanismModel create(int d_a, int d_u, int d_x, RngStream& rng, int hidden = 32,
                               int layers = 3, Activation act = Activation::Tanh) {
    if (d_u < 1) throw ArgumentError("MechanismModel: d_u must be >= 1");
    return {Mlp::glorot(Mlp::default_dims(d_a + d_u, d_x, hidden, layers), rng, act), d_a, d_u};
  }

  Matrix forward(const Matrix& a, const Matrix& eta) const {
    if (a.rows() != eta.rows() || a.cols() != d_a || eta.cols() != d_u)
      throw ArgumentError("MechanismModel::forward: input shapes");
    Matrix in(a.rows(), d_a + d_u);
    in << a, eta;
    return net.forward(in);
  }
};

/// u = g_psi(x, a, eta_bar): amortized posterior sampler, not assumed invertible.
struct AbductorModel {
  Mlp net;
  int d_x = 1;
  int d_a = 1;
  int d_noise = 1;

  int d_u() const { return net.output_dim(); }

  static AbductorModel create(int d_x, int d_a, int d_noise, int d_u, RngStream& rng,
                              int hidden = 32, int layers = 3, Activation act = Activation::Tanh) {
    return {Mlp::glorot(Mlp::default_dims(d_x + d_a + d_noise, d_u, hidden, layers), rng, act), d_x,
            d_a, d_noise};
  }

  Matrix forward(const Matrix& x, const Matrix& a, const Matrix& noise) const {
    if (x.rows() != a.rows() || x.rows() != noise.rows() || x.cols() != d_x || a.cols() != d_a ||
        noise.cols() != d_noise)
      throw ArgumentError("AbductorModel::forward: input shapes");
    Matrix in(x.rows(), d_x + d_a + d_noise);
    in << x, a, noise;
    return net.forward(in);
  }
};

enum class TrainMode { Joint, Phased };

inline std::string to_string(TrainMode m) { return m == TrainMode::Joint ? "joint" : "phased"; }

inline TrainMode train_mode_from_string(const std::string& s) {
  if (s == "joint") return TrainMode::Joint;
  if (s == "phased") return TrainMode::Phased;
  throw ConfigError("unknown stage-1 mode '" + s + "' (expected joint or phased)");
}

struct GenTrainConfig {
  double lambda_gen = 1.0;
  double lambda_pos = 1.0;
  double lambda_ctf = 1.0;
  double lambda_reg = 0.1;
  int n_gen = 256;
  int q_gen = 32;
  int n_pos = 128;
  int q_pos = 4;
  int n_ctf = 32;
  int q_ctf = 4;
  int n_reg = 64;
  int steps = 1000;  // per phase in phased mode
  double lr = 1e-3;
  // IMQ offsets per loss; 0 selects the median heuristic on the training data.
  double rho_gen = 0.0;
  double rho_pos = 0.0;
  double rho_ctf = 0.0;
  TrainMode mode = TrainMode::Phased;
  // Side B of the joint-matching loss uses model-sampled x instead of dataset x.
  bool pos_model_x = false;
  int hidden = 32;
  int layers = 3;
  int d_u = 0;  // 0: 5 on synthetic data (true confounder size), 8 otherwise
  std::string activation = "tanh";

  void validate() const {
    for (double l : {lambda_gen, lambda_pos, lambda_ctf, lambda_reg})
      if (!(l >= 0.0)) throw ConfigError("stage1: lambdas must be >= 0");
    for (int c : {n_gen, q_gen, n_pos, q_pos, n_ctf, q_ctf, n_reg, hidden, layers})
      if (c < 1) throw ConfigError("stage1: counts must be >= 1");
    if (steps < 0) throw ConfigError("stage1: steps must be >= 0");
    if (!(lr > 0.0)) throw ConfigError("stage1: lr must be positive");
    if (rho_gen < 0 || rho_pos < 0 || rho_ctf < 0) throw ConfigError("stage1: rho must be >= 0");
    if (d_u < 0) throw ConfigError("stage1: d_u must be >= 0");
    activation_from_string(activation);
  }

  nlohmann::json to_json() const {
    return {{"lambda_gen", lambda_gen}, {"lambda_pos", lambda_pos}, {"lambda_ctf", lambda_ctf},
            {"lambda_reg", lambda_reg}, {"n_gen", n_gen},           {"q_gen", q_gen},
            {"n_pos", n_pos},           {"q_pos", q_pos},           {"n_ctf", n_ctf},
            {"q_ctf", q_ctf},           {"n_reg", n_reg},           {"steps", steps},
            {"lr", lr},                 {"rho_gen", rho_gen},       {"rho_pos", rho_pos},
            {"rho_ctf", rho_ctf},       {"mode", to_string(mode)},  {"pos_model_x", pos_model_x},
            {"hidden", hidden},         {"layers", layers},         {"d_u", d_u},
            {"activation", activation}};
  }

  // Missing keys keep their defaults.
  static GenTrainConfig from_json(const nlohmann::json& j) {
    GenTrainConfig c;
    auto get = [&](const char* key, auto& field) {
      if (j.contains(key)) field = j.at(key).get<std::decay_t<decltype(field)>>();
    };
    try {
      get("lambda_gen", c.lambda_gen);
      get("lambda_pos", c.lambda_pos);
      get("lambda_ctf", c.lambda_ctf);
      get("lambda_reg", c.lambda_reg);
      get("n_gen", c.n_gen);
      get("q_gen", c.q_gen);
      get("n_pos", c.n_pos);
      get("q_pos", c.q_pos);
      get("n_ctf", c.n_ctf);
      get("q_ctf", c.q_ctf);
      get("n_reg", c.n_reg);
      get("steps", c.steps);
      get("lr", c.lr);
      get("rho_gen", c.rho_gen);
      get("rho_pos", c.rho_pos);
      get("rho_ctf", c.rho_ctf);
      if (j.contains("mode")) c.mode = train_mode_from_string(j.at("mode").get<std::string>());
      get("pos_model_x", c.pos_model_x);
      get("hidden", c.hidden);
      get("layers", c.layers);
      get("d_u", c.d_u);
      get("activation", c.activation);
    } catch (const nlohmann::json::exception& e) {
      throw ConfigError(std::string("stage1 config: ") + e.what());
    }
    c.validate();
    return c;
  }
};

// Resolved IMQ offsets for the three kernelized stage-1 losses.
struct Stage1Kernels {
  double rho_gen = 1.0;
  double rho_pos = 1.0;
  double rho_ctf = 1.0;
};

namespace detail {

inline Matrix repeat_rows(const Matrix& m, Index times) {
  Matrix out(m.rows() * times, m.cols());
  for (Index r = 0; r < m.rows(); ++r)
    for (Index t = 0; t < times; ++t) out.row(r * times + t) = m.row(r);
  return out;
}

// Each consecutive block of `block` rows repeated `times` times in place.
inline Matrix repeat_blocks(const Matrix& m, Index block, Index times) {
  const Index blocks = m.rows() / block;
  Matrix out(m.rows() * times, m.cols());
  for (Index b = 0; b < blocks; ++b)
    for (Index t = 0; t < times; ++t) out.middleRows((b * times + t) * block, block) = m.middleRows(b * block, block);
  return out;
}

inline Matrix tile_rows(const Matrix& m, Index times) {
  Matrix out(m.rows() * times, m.cols());
  for (Index t = 0; t < times; ++t) out.middleRows(t * m.rows(), m.rows()) = m;
  return out;
}

inline Matrix hstack(std::initializer_list<const Matrix*> parts) {
  Index cols = 0;
  const Index rows = (*parts.begin())->rows();
  for (const Matrix* p : parts) {
    if (p->rows() != rows) throw ArgumentError("hstack: row counts differ");
    cols += p->cols();
  }
  Matrix out(rows, cols);
  Index c = 0;
  for (const Matrix* p : parts) {
    out.middleCols(c, p->cols()) = *p;
    c += p->cols();
  }
  return out;
}

inline void check_batch(const Matrix& a, const Matrix& x, int d_a, int d_x, const char* who) {
  if (a.rows() < 1) throw ArgumentError(std::string(who) + ": empty batch");
  if (a.rows() != x.rows() || a.cols() != d_a || x.cols() != d_x)
    throw ArgumentError(std::string(who) + ": batch shape mismatch");
}

}  // namespace detail

inline Stage1Kernels resolve_stage1_kernels(const GenTrainConfig& cfg, const Dataset& train,
                                            int d_u, std::uint64_t seed) {
  Stage1Kernels k;
  const double rho_x = median_heuristic(train.x);
  k.rho_gen = cfg.rho_gen > 0 ? cfg.rho_gen : rho_x;
  k.rho_ctf = cfg.rho_ctf > 0 ? cfg.rho_ctf : rho_x;
  if (cfg.rho_pos > 0) {
    k.rho_pos = cfg.rho_pos;
  } else {
    // The joint (x, a, u) block: u is unobserved, so prior draws stand in for it.
    const Index n = std::min<Index>(train.size(), 512);
    RngStream rng(seed, "kernel-pos");
    const Matrix eta = sample_gaussian(rng, n, d_u);
    const Matrix xs = train.x.topRows(n);
    const Matrix as = train.a.topRows(n);
    k.rho_pos = median_heuristic(detail::hstack({&xs, &as, &eta}));
  }
  return k;
}

// ---- loss graphs -----------------------------------------------------------
//
// Each builder draws its noise from `rng` in a fixed order and records the
// loss on `tape`. Whether gradients flow to theta/psi is decided by how the
// networks were bound.

namespace graph {

/// mean_i |(1/q) sum_j Phi(f(a_i, eta_ij)) - Phi(x_i)|^2
inline ad::Var loss_gen(ad::Tape& tape, const BoundMlp& mech, int d_u, const Matrix& a,
                        const Matrix& x, int q, const Kernel& kernel, RngStream& rng) {
  if (q < 1) throw ArgumentError("loss_gen: q must be >= 1");
  detail::check_batch(a, x, mech.net->input_dim() - d_u, mech.net->output_dim(), "loss_gen");
  const Index n = a.rows();
  const Matrix a_rep = detail::repeat_rows(a, q);
  const Matrix eta = sample_gaussian(rng, n * q, d_u);
  const ad::Var out = mech.forward(tape.constant(detail::hstack({&a_rep, &eta})));
  return ad::mmd2_vs_point_blocks(out, x, kernel);
}

/// Two-sample MMD^2 between model triples (f(a_i, eta), a_i, eta) and
/// amortized triples (x_i, a_i, g(x_i, a_i, eta_bar)).
inline ad::Var loss_pos(ad::Tape& tape, const BoundMlp& mech, const BoundMlp& abd, int d_u,
                        int d_noise, const Matrix& a, const Matrix& x, int q, const Kernel& kernel,
                        RngStream& rng, bool model_x = false) {
  if (q < 1) throw ArgumentError("loss_pos: q must be >= 1");
  detail::check_batch(a, x, mech.net->input_dim() - d_u, mech.net->output_dim(), "loss_pos");
  const Index n = a.rows();
  const Matrix a_rep = detail::repeat_rows(a, q);
  const Matrix eta = sample_gaussian(rng, n * q, d_u);
  const Matrix eta_bar = sample_gaussian(rng, n * q, d_noise);
  const ad::Var a_c = tape.constant(a_rep);
  const ad::Var x_model = mech.forward(tape.constant(detail::hstack({&a_rep, &eta})));
  const ad::Var side_a = ad::hcat(x_model, a_c, tape.constant(eta));

  ad::Var x_b;
  if (model_x) {
    const Matrix eta_x = sample_gaussian(rng, n * q, d_u);
    x_b = mech.forward(tape.constant(detail::hstack({&a_rep, &eta_x})));
  } else {
    x_b = tape.constant(detail::repeat_rows(x, q));
  }
  const ad::Var u = abd.forward(ad::hcat(x_b, a_c, tape.constant(eta_bar)));
  const ad::Var side_b = ad::hcat(x_b, a_c, u);
  return ad::mmd2_mean_vs_mean(side_a, side_b, kernel);
}

/// Counterfactual consistency: for each target i, the mixture over evidence
/// j of f(a_i, g(f(a_j, eta_ijk), a_j, eta_bar_ijk)) should embed like x_i.
inline ad::Var loss_ctf(ad::Tape& tape, const BoundMlp& mech, const BoundMlp& abd, int d_u,
                        int d_noise, const Matrix& a, const Matrix& x, int q, const Kernel& kernel,
                        RngStream& rng) {
  if (q < 1) throw ArgumentError("loss_ctf: q must be >= 1");
  detail::check_batch(a, x, mech.net->input_dim() - d_u, mech.net->output_dim(), "loss_ctf");
  const Index n = a.rows();
  // Row (i, j, k) at index (i * n + j) * q + k.
  const Matrix a_evidence = detail::tile_rows(detail::repeat_rows(a, q), n);
  const Matrix a_target = detail::repeat_rows(a, n * q);
  const Matrix eta = sample_gaussian(rng, n * n * q, d_u);
  const Matrix eta_bar = sample_gaussian(rng, n * n * q, d_noise);
  const ad::Var a_ev = tape.constant(a_evidence);
  const ad::Var x_ev = mech.forward(tape.constant(detail::hstack({&a_evidence, &eta})));
  const ad::Var u = abd.forward(ad::hcat(x_ev, a_ev, tape.constant(eta_bar)));
  const ad::Var x_ctf = mech.forward(ad::hcat(tape.constant(a_target), u));
  return ad::mmd2_vs_point_blocks(x_ctf, x, kernel);
}

/// Near-world regularizer: (1/n^2) sum_ij |f(a_i, g(x_j, a_j, eta_bar_j)) - x_j|.
inline ad::Var loss_reg(ad::Tape& tape, const BoundMlp& mech, const BoundMlp& abd, int d_noise,
                        const Matrix& a, const Matrix& x, RngStream& rng) {
  detail::check_batch(a, x, abd.net->input_dim() - d_noise - x.cols(), mech.net->output_dim(),
                      "loss_reg");
  const Index n = a.rows();
  const Matrix eta_bar = sample_gaussian(rng, n, d_noise);
  const ad::Var u = abd.forward(tape.constant(detail::hstack({&x, &a, &eta_bar})));
  // Row i * n + j pairs intervention a_i with evidence j.
  const ad::Var in = ad::hcat(tape.constant(detail::repeat_rows(a, n)), ad::tile_rows(u, n));
  const ad::Var diff = mech.forward(in) - tape.constant(detail::tile_rows(x, n));
  return ad::mean(ad::row_norm(diff));
}

}  // namespace graph

// ---- value and gradient entry points --------------------------------------

struct NcmGradient {
  double value = 0.0;
  std::vector<Matrix> theta;
  std::vector<Matrix> psi;
};

// Evaluates `build(tape, mech, abd) -> Var` and differentiates it w.r.t. the
// requested parameter sets.
template <class Build>
NcmGradient differentiate(const MechanismModel& mech, const AbductorModel& abd, bool wrt_theta,
                          bool wrt_psi, Build&& build) {
  ad::Tape tape;
  const BoundMlp m = bind(tape, mech.net, wrt_theta);
  const BoundMlp g = bind(tape, abd.net, wrt_psi);
  const ad::Var loss = build(tape, m, g);
  NcmGradient out;
  out.value = loss.scalar();
  if (tape.requires_grad(loss)) tape.backward(loss);
  if (wrt_theta) out.theta = m.gradients();
  if (wrt_psi) out.psi = g.gradients();
  return out;
}

inline double loss_gen(const MechanismModel& mech, const Matrix& a, const Matrix& x, int q,
                       const Kernel& kernel, RngStream& rng) {
  ad::Tape tape;
  return graph::loss_gen(tape, bind(tape, mech.net, false), mech.d_u, a, x, q, kernel, rng).scalar();
}

inline double loss_pos(const MechanismModel& mech, const AbductorModel& abd, const Matrix& a,
                       const Matrix& x, int q, const Kernel& kernel, RngStream& rng,
                       bool model_x = false) {
  ad::Tape tape;
  return graph::loss_pos(tape, bind(tape, mech.net, false), bind(tape, abd.net, false), mech.d_u,
                         abd.d_noise, a, x, q, kernel, rng, model_x)
      .scalar();
}

inline double loss_ctf(const MechanismModel& mech, const AbductorModel& abd, const Matrix& a,
                       const Matrix& x, int q, const Kernel& kernel, RngStream& rng) {
  ad::Tape tape;
  return graph::loss_ctf(tape, bind(tape, mech.net, false), bind(tape, abd.net, false), mech.d_u,
                         abd.d_noise, a, x, q, kernel, rng)
      .scalar();
}

inline double loss_reg(const MechanismModel& mech, const AbductorModel& abd, const Matrix& a,
                       const Matrix& x, RngStream& rng) {
  ad::Tape tape;
  return graph::loss_reg(tape, bind(tape, mech.net, false), bind(tape, abd.net, false),
                         abd.d_noise, a, x, rng)
      .scalar();
}

// ---- training --------------------------------------------------------------

struct LossRecord {
  long step = 0;
  std::optional<double> gen;
  std::optional<double> pos;
  std::optional<double> ctf;
  std::optional<double> reg;
  double total = 0.0;
};

struct Stage1Result {
  MechanismModel mechanism;
  AbductorModel abductor;
  std::vector<LossRecord> history;
  Stage1Kernels kernels;
};

inline std::string loss_history_csv(const std::vector<LossRecord>& history,
                                    const std::string& config_digest = {}) {
  std::string out;
  if (!config_digest.empty()) out += "# config_digest=" + config_digest + "\n";
  out += "step,l_gen,l_pos,l_ctf,l_reg,total\n";
  auto opt = [](const std::optional<double>& v) { return v ? csv::format_number(*v) : std::string(); };
  for (const LossRecord& r : history)
    out += fmt::format("{},{},{},{},{},{}\n", r.step, opt(r.gen), opt(r.pos), opt(r.ctf),
                       opt(r.reg), csv::format_number(r.total));
  return out;
}

namespace detail {

struct Stage1Streams {
  RngStream gen, pos, ctf, reg;
  explicit Stage1Streams(const RngStream& base)
      : gen(base.derive("gen")), pos(base.derive("pos")), ctf(base.derive("ctf")),
        reg(base.derive("reg")) {}
};

inline std::pair<Matrix, Matrix> minibatch(const Dataset& d, int n, RngStream& rng) {
  const auto rows = sample_indices(rng, d.size(), n);
  return {gather_rows(d.a, rows), gather_rows(d.x, rows)};
}

inline void accumulate(std::vector<Matrix>& into, const std::vector<Matrix>& g) {
  if (into.empty()) {
    into = g;
    return;
  }
  for (std::size_t i = 0; i < into.size(); ++i) into[i] += g[i];
}

}  // namespace detail

/// Stage-1 training of the mechanism (theta) and abductor (psi).
///
/// Joint mode minimizes the lambda-weighted sum of all four losses over both
/// networks. Phased mode first fits theta on the generative loss alone, then
/// freezes it and fits psi on the weighted pos/ctf/reg losses. Losses with a
/// zero weight are skipped. Each loss draws from its own named substream, so
/// disabling one loss does not perturb the others' noise.
inline Stage1Result train_stage1(MechanismModel mech, AbductorModel abd, const Dataset& train,
                                 const GenTrainConfig& cfg, RngStream& rng,
                                 const std::function<void(const LossRecord&)>& on_step = {}) {
  cfg.validate();
  train.validate();
  if (train.size() < 2) throw ArgumentError("train_stage1: need at least 2 training rows");
  if (abd.d_u() != mech.d_u) throw ArgumentError("train_stage1: abductor output != mechanism d_u");

  Stage1Result result;
  result.kernels = resolve_stage1_kernels(cfg, train, mech.d_u, rng.seed());
  const Kernel k_gen(result.kernels.rho_gen);
  const Kernel k_pos(result.kernels.rho_pos);
  const Kernel k_ctf(result.kernels.rho_ctf);

  detail::Stage1Streams streams(rng);
  const AdamConfig adam_cfg{cfg.lr};
  AdamState theta_opt(mech.net.parameters(), adam_cfg);
  AdamState psi_opt(abd.net.parameters(), adam_cfg);

  long step = 0;
  auto run_step = [&](bool gen_on, bool pos_on, bool ctf_on, bool reg_on, bool train_theta,
                      bool train_psi) {
    LossRecord rec;
    rec.step = step;
    std::vector<Matrix> g_theta, g_psi;
    auto add = [&](std::optional<double>& slot, double lambda, const NcmGradient& g) {
      slot = g.value;
      rec.total += lambda * g.value;
      auto scale = [lambda](std::vector<Matrix> v) {
        for (auto& m : v) m *= lambda;
        return v;
      };
      if (train_theta && !g.theta.empty()) detail::accumulate(g_theta, scale(g.theta));
      if (train_psi && !g.psi.empty()) detail::accumulate(g_psi, scale(g.psi));
    };
    try {
      if (gen_on) {
        auto [a, x] = detail::minibatch(train, cfg.n_gen, streams.gen);
        add(rec.gen, cfg.lambda_gen,
            differentiate(mech, abd, train_theta, false, [&](ad::Tape& t, const BoundMlp& m, const BoundMlp&) {
              return graph::loss_gen(t, m, mech.d_u, a, x, cfg.q_gen, k_gen, streams.gen);
            }));
      }
      if (pos_on) {
        auto [a, x] = detail::minibatch(train, cfg.n_pos, streams.pos);
        add(rec.pos, cfg.lambda_pos,
            differentiate(mech, abd, train_theta, train_psi, [&](ad::Tape& t, const BoundMlp& m, const BoundMlp& g) {
              return graph::loss_pos(t, m, g, mech.d_u, abd.d_noise, a, x, cfg.q_pos, k_pos,
                                     streams.pos, cfg.pos_model_x);
            }));
      }
      if (ctf_on) {
        auto [a, x] = detail::minibatch(train, cfg.n_ctf, streams.ctf);
        add(rec.ctf, cfg.lambda_ctf,
            differentiate(mech, abd, train_theta, train_psi, [&](ad::Tape& t, const BoundMlp& m, const BoundMlp& g) {
              return graph::loss_ctf(t, m, g, mech.d_u, abd.d_noise, a, x, cfg.q_ctf, k_ctf,
                                     streams.ctf);
            }));
      }
      if (reg_on) {
        auto [a, x] = detail::minibatch(train, cfg.n_reg, streams.reg);
        add(rec.reg, cfg.lambda_reg,
            differentiate(mech, abd, train_theta, train_psi, [&](ad::Tape& t, const BoundMlp& m, const BoundMlp& g) {
              return graph::loss_reg(t, m, g, abd.d_noise, a, x, streams.reg);
            }));
      }
    } catch (const NumericalError& e) {
      throw TrainingError(std::string("stage-1 training diverged: ") + e.what(), step);
    }
    if (!std::isfinite(rec.total)) throw TrainingError("stage-1 loss is not finite", step);
    if (!g_theta.empty()) theta_opt.step(mech.net.parameters(), g_theta);
    if (!g_psi.empty()) psi_opt.step(abd.net.parameters(), g_psi);
    result.history.push_back(rec);
    if (on_step) on_step(rec);
    ++step;
  };

  if (cfg.mode == TrainMode::Joint) {
    for (int s = 0; s < cfg.steps; ++s)
      run_step(cfg.lambda_gen > 0, cfg.lambda_pos > 0, cfg.lambda_ctf > 0, cfg.lambda_reg > 0,
               true, true);
  } else {
    for (int s = 0; s < cfg.steps; ++s) run_step(true, false, false, false, true, false);
    const bool any_psi = cfg.lambda_pos > 0 || cfg.lambda_ctf > 0 || cfg.lambda_reg > 0;
    if (any_psi)
      for (int s = 0; s < cfg.steps; ++s)
        run_step(false, cfg.lambda_pos > 0, cfg.lambda_ctf > 0, cfg.lambda_reg > 0, false, true);
  }
  result.mechanism = std::move(mech);
  result.abductor = std::move(abd);
  return result;
}

/// q draws of f(a', g(x, a, eta_bar)) with fresh eta_bar per draw.
inline Matrix generate_counterfactual(const MechanismModel& mech, const AbductorModel& abd,
                                      std::span<const double> x, std::span<const double> a,
                                      std::span<const double> a_prime, Index q, RngStream& rng) {
  if (q < 1) throw ArgumentError("generate_counterfactual: q must be >= 1");
  if (static_cast<int>(x.size()) != abd.d_x || static_cast<int>(a.size()) != abd.d_a ||
      static_cast<int>(a_prime.size()) != mech.d_a)
    throw ArgumentError("generate_counterfactual: evidence/intervention dimensions");
  const Matrix noise = sample_gaussian(rng, q, abd.d_noise);
  Matrix xs(q, abd.d_x), as(q, abd.d_a), ap(q, mech.d_a);
  for (Index r = 0; r < q; ++r) {
    xs.row(r) = Eigen::Map<const Eigen::RowVectorXd>(x.data(), abd.d_x);
    as.row(r) = Eigen::Map<const Eigen::RowVectorXd>(a.data(), abd.d_a);
    ap.row(r) = Eigen::Map<const Eigen::RowVectorXd>(a_prime.data(), mech.d_a);
  }
  return mech.forward(ap, abd.forward(xs, as, noise));
}

// ---- ground-truth plug-ins -------------------------------------------------
//
// Exact single-layer (affine) networks realizing the linear SCM's mechanism
// and analytic posterior sampler, expressed in normalized coordinates.

inline MechanismModel oracle_mechanism(const LinearGaussianSCM& scm, const BlockStats& a_stats,
                                       const BlockStats& x_stats) {
  const Index dx = scm.d_x();
  const Index du = scm.d_u();
  Mlp net({1 + static_cast<int>(du), static_cast<int>(dx)});
  const double sa = a_stats.std[0];
  const double ma = a_stats.mean[0];
  for (Index c = 0; c < dx; ++c) {
    const double sx = x_stats.std[static_cast<std::size_t>(c)];
    net.weight(0)(0, c) = scm.w_a(c, 0) * sa / sx;
    for (Index k = 0; k < du; ++k) net.weight(0)(1 + k, c) = scm.w_u(c, k) / sx;
    net.bias(0)(0, c) =
        (scm.w_a(c, 0) * ma + scm.b_x(c) - x_stats.mean[static_cast<std::size_t>(c)]) / sx;
  }
  return {std::move(net), 1, static_cast<int>(du)};
}

inline AbductorModel oracle_abductor(const LinearGaussianSCM& scm, const BlockStats& a_stats,
                                     const BlockStats& x_stats) {
  const Index dx = scm.d_x();
  const Index du = scm.d_u();
  const Matrix proj = scm.w_u.transpose() * detail::inverse_gram(scm);  // du x dx
  const Matrix root = detail::psd_sqrt(Matrix::Identity(du, du) - proj * scm.w_u);
  Mlp net({static_cast<int>(dx + 1 + du), static_cast<int>(du)});
  const double sa = a_stats.std[0];
  const double ma = a_stats.mean[0];
  Vector mx(dx), sx(dx);
  for (Index c = 0; c < dx; ++c) {
    mx(c) = x_stats.mean[static_cast<std::size_t>(c)];
    sx(c) = x_stats.std[static_cast<std::size_t>(c)];
  }
  const Vector bias = proj * (mx - scm.w_a.col(0) * ma - scm.b_x);
  const Vector a_coef = -(proj * scm.w_a.col(0)) * sa;
  for (Index k = 0; k < du; ++k) {
    for (Index c = 0; c < dx; ++c) net.weight(0)(c, k) = proj(k, c) * sx(c);
    net.weight(0)(dx, k) = a_coef(k);
    for (Index m = 0; m < du; ++m) net.weight(0)(dx + 1 + m, k) = root(k, m);
    net.bias(0)(0, k) = bias(k);
  }
  return {std::move(net), static_cast<int>(dx), 1, static_cast<int>(du)};
}

}  // namespace cfair
