#pragma once

#include <functional>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "cfair/adam.hpp"
#include "cfair/autodiff.hpp"
#include "cfair/dataset.hpp"
#include "cfair/kernels.hpp"
#include "cfair/mlp.hpp"
#include "cfair/ncm.hpp"

// Stage 2: fine-tuning a predictor h(x, a) for counterfactual fairness using
// counterfactual samples from the frozen stage-1 models.

namespace cfair {

struct Predictor {
  Mlp net;
  int d_x = 1;
  int d_a = 1;

  int d_y() const { return net.output_dim(); }

  static Predictor create(int d_x, int d_a, int d_y, RngStream& rng, int hidden = 32,
                          int layers = 3, Activation act = Activation::Tanh) {
    return {Mlp::glorot(Mlp::default_dims(d_x + d_a, d_y, hidden, layers), rng, act), d_x, d_a};
  }

  // Constant predictor: every output equals `value`.
  static Predictor constant(int d_x, int d_a, int d_y, double value) {
    Predictor p{Mlp(Mlp::default_dims(d_x + d_a, d_y)), d_x, d_a};
    p.net.bias(p.net.layer_count() - 1).setConstant(value);
    return p;
  }

  Matrix predict(const Matrix& x, const Matrix& a) const {
    if (x.rows() != a.rows() || x.cols() != d_x || a.cols() != d_a)
      throw ArgumentError("Predictor::predict: input shapes");
    Matrix in(x.rows(), d_x + d_a);
    in << x, a;
    return net.forward(in);
  }
};

enum class FairnessLoss { Mmd2, MeanMse };

inline std::string to_string(FairnessLoss f) { return f == FairnessLoss::Mmd2 ? "mmd" : "mean_mse"; }

inline FairnessLoss fairness_loss_from_string(const std::string& s) {
  if (s == "mmd" || s == "mmd2") return FairnessLoss::Mmd2;
  if (s == "mean_mse") return FairnessLoss::MeanMse;
  throw ConfigError("unknown fairness loss '" + s + "' (expected mmd or mean_mse)");
}

// Distribution of intervention values a': standard normal, or resampled from the training a's.
enum class InterventionSampler { StandardNormal, Empirical };

inline std::string to_string(InterventionSampler s) {
  return s == InterventionSampler::StandardNormal ? "standard_normal" : "empirical";
}

inline InterventionSampler intervention_sampler_from_string(const std::string& s) {
  if (s == "standard_normal") return InterventionSampler::StandardNormal;
  if (s == "empirical") return InterventionSampler::Empirical;
  throw ConfigError("unknown intervention sampler '" + s + "'");
}

struct FairTrainConfig {
  double lambda_fair = 1.0;
  int n_fair = 128;
  int q_intv = 4;
  int q_abd = 16;
  FairnessLoss fairness_loss = FairnessLoss::Mmd2;
  InterventionSampler intervention_sampler = InterventionSampler::StandardNormal;
  int steps = 400;
  double lr = 1e-3;
  int n_pred = 256;
  // Factual and counterfactual branches share posterior noise during training.
  bool common_random_numbers = true;
  double rho_fair = 0.0;  // 0: median heuristic on the training targets
  int eval_q_intv = 4;
  int eval_q_abd = 16;
  int hidden = 32;
  int layers = 3;
  std::string activation = "tanh";

  void validate() const {
    if (!(lambda_fair >= 0.0)) throw ConfigError("stage2: lambda_fair must be >= 0");
    for (int c : {n_fair, q_intv, q_abd, n_pred, eval_q_intv, eval_q_abd, hidden, layers})
      if (c < 1) throw ConfigError("stage2: counts must be >= 1");
    if (steps < 0) throw ConfigError("stage2: steps must be >= 0");
    if (!(lr > 0.0)) throw ConfigError("stage2: lr must be positive");
    if (rho_fair < 0.0) throw ConfigError("stage2: rho_fair must be >= 0");
    activation_from_string(activation);
  }

  nlohmann::json to_json() const {
    return {{"lambda_fair", lambda_fair},
            {"n_fair", n_fair},
            {"q_intv", q_intv},
            {"q_abd", q_abd},
            {"fairness_loss", to_string(fairness_loss)},
            {"intervention_sampler", to_string(intervention_sampler)},
            {"steps", steps},
            {"lr", lr},
            {"n_pred", n_pred},
            {"common_random_numbers", common_random_numbers},
            {"rho_fair", rho_fair},
            {"eval_q_intv", eval_q_intv},
            {"eval_q_abd", eval_q_abd},
            {"hidden", hidden},
            {"layers", layers},
            {"activation", activation}};
  }

  static FairTrainConfig from_json(const nlohmann::json& j) {
    FairTrainConfig c;
    auto get = [&](const char* key, auto& field) {
      if (j.contains(key)) field = j.at(key).get<std::decay_t<decltype(field)>>();
    };
    try {
      get("lambda_fair", c.lambda_fair);
      get("n_fair", c.n_fair);
      get("q_intv", c.q_intv);
      get("q_abd", c.q_abd);
      if (j.contains("fairness_loss"))
        c.fairness_loss = fairness_loss_from_string(j.at("fairness_loss").get<std::string>());
      if (j.contains("intervention_sampler"))
        c.intervention_sampler =
            intervention_sampler_from_string(j.at("intervention_sampler").get<std::string>());
      get("steps", c.steps);
      get("lr", c.lr);
      get("n_pred", c.n_pred);
      get("common_random_numbers", c.common_random_numbers);
      get("rho_fair", c.rho_fair);
      get("eval_q_intv", c.eval_q_intv);
      get("eval_q_abd", c.eval_q_abd);
      get("hidden", c.hidden);
      get("layers", c.layers);
      get("activation", c.activation);
    } catch (const nlohmann::json::exception& e) {
      throw ConfigError(std::string("stage2 config: ") + e.what());
    }
    c.validate();
    return c;
  }
};

/// Generated inputs for the fairness losses. Row (i, j, k) sits at
/// (i * q_intv + j) * q_abd + k: datum i, intervention j, abduction draw k.
struct CounterfactualBatch {
  Matrix x_ctf;   // f(a_j, g(x_i, a_i, eta_tilde_ijk))
  Matrix a_ctf;   // a_j
  Matrix x_fact;  // f(a_i, g(x_i, a_i, eta_bar_ijk))
  Matrix a_fact;  // a_i
  Index block = 1;  // q_abd
};

struct CounterfactualOptions {
  int q_intv = 4;
  int q_abd = 16;
  InterventionSampler sampler = InterventionSampler::StandardNormal;
  bool common_random_numbers = false;
  const Matrix* intervention_pool = nullptr;  // a-values for the empirical sampler
};

inline CounterfactualBatch make_counterfactual_batch(const MechanismModel& mech,
                                                     const AbductorModel& abd, const Matrix& a,
                                                     const Matrix& x,
                                                     const CounterfactualOptions& opt,
                                                     RngStream& rng) {
  if (opt.q_intv < 1 || opt.q_abd < 1) throw ArgumentError("counterfactual batch: counts must be >= 1");
  detail::check_batch(a, x, abd.d_a, abd.d_x, "counterfactual batch");
  const Index n = a.rows();
  const Index per_datum = static_cast<Index>(opt.q_intv) * opt.q_abd;

  Matrix interventions(n * opt.q_intv, a.cols());
  if (opt.sampler == InterventionSampler::StandardNormal) {
    interventions = sample_gaussian(rng, n * opt.q_intv, a.cols());
  } else {
    if (!opt.intervention_pool || opt.intervention_pool->rows() == 0)
      throw ArgumentError("empirical intervention sampler needs a pool of a-values");
    for (Index r = 0; r < interventions.rows(); ++r)
      interventions.row(r) = opt.intervention_pool->row(
          static_cast<Index>(rng.uniform_index(static_cast<std::size_t>(opt.intervention_pool->rows()))));
  }
  CounterfactualBatch b;
  b.block = opt.q_abd;
  b.a_fact = detail::repeat_rows(a, per_datum);
  b.a_ctf = detail::repeat_rows(interventions, opt.q_abd);
  if (opt.common_random_numbers) {
    // One set of q_abd posterior draws per datum, shared by every intervention
    // and by the factual side; abduction and the factual pass run once per datum.
    const Matrix eta = sample_gaussian(rng, n * opt.q_abd, abd.d_noise);
    const Matrix a_rep = detail::repeat_rows(a, opt.q_abd);
    const Matrix u = abd.forward(detail::repeat_rows(x, opt.q_abd), a_rep, eta);
    const Matrix x_fact = mech.forward(a_rep, u);
    const Matrix u_ctf = detail::repeat_blocks(u, opt.q_abd, opt.q_intv);
    b.x_ctf = mech.forward(b.a_ctf, u_ctf);
    b.x_fact = detail::repeat_blocks(x_fact, opt.q_abd, opt.q_intv);
  } else {
    const Matrix x_rep = detail::repeat_rows(x, per_datum);
    const Matrix eta_tilde = sample_gaussian(rng, n * per_datum, abd.d_noise);
    const Matrix eta_bar = sample_gaussian(rng, n * per_datum, abd.d_noise);
    b.x_ctf = mech.forward(b.a_ctf, abd.forward(x_rep, b.a_fact, eta_tilde));
    b.x_fact = mech.forward(b.a_fact, abd.forward(x_rep, b.a_fact, eta_bar));
  }
  return b;
}

namespace graph {

inline ad::Var predict(ad::Tape& tape, const BoundMlp& h, const Matrix& x, const Matrix& a) {
  return h.forward(tape.constant(detail::hstack({&x, &a})));
}

/// Mean over (i, j) blocks of MMD^2 between counterfactual and factual predictions.
inline ad::Var fair_mmd(ad::Var pred_ctf, ad::Var pred_fact, Index block, const Kernel& kernel) {
  return ad::mmd2_blocks(pred_ctf, pred_fact, block, kernel);
}

/// Mean over (i, j) blocks of the squared distance between prediction sample means.
inline ad::Var fair_mean_mse(ad::Var pred_ctf, ad::Var pred_fact, Index block) {
  const ad::Var diff = ad::block_mean(pred_ctf, block) - ad::block_mean(pred_fact, block);
  return (1.0 / static_cast<double>(diff.rows())) * ad::sum(ad::square(diff));
}

inline ad::Var loss_pred(ad::Tape& tape, const BoundMlp& h, const Matrix& x, const Matrix& a,
                         const Matrix& y) {
  const ad::Var diff = predict(tape, h, x, a) - tape.constant(y);
  return ad::mean(ad::square(diff));
}

}  // namespace graph

// Fairness losses on explicit prediction sample sets (rows grouped in blocks).
inline double fair_mmd_from_predictions(const Matrix& pred_ctf, const Matrix& pred_fact,
                                        Index block, const Kernel& kernel) {
  ad::Tape tape;
  return graph::fair_mmd(tape.constant(pred_ctf), tape.constant(pred_fact), block, kernel).scalar();
}

inline double fair_mean_mse_from_predictions(const Matrix& pred_ctf, const Matrix& pred_fact,
                                             Index block) {
  ad::Tape tape;
  if (pred_ctf.rows() != pred_fact.rows() || pred_ctf.cols() != pred_fact.cols())
    throw ArgumentError("fair_mean_mse: prediction sets differ in shape");
  return graph::fair_mean_mse(tape.constant(pred_ctf), tape.constant(pred_fact), block).scalar();
}

inline double loss_pred(const Predictor& h, const Matrix& x, const Matrix& a, const Matrix& y) {
  if (x.rows() < 1) throw ArgumentError("loss_pred: empty batch");
  if (y.rows() != x.rows() || y.cols() != h.d_y()) throw ArgumentError("loss_pred: target shape");
  ad::Tape tape;
  return graph::loss_pred(tape, bind(tape, h.net, false), x, a, y).scalar();
}

inline double loss_fair_mmd(const Predictor& h, const MechanismModel& mech,
                            const AbductorModel& abd, const Matrix& a, const Matrix& x,
                            const CounterfactualOptions& opt, const Kernel& kernel,
                            RngStream& rng) {
  const CounterfactualBatch b = make_counterfactual_batch(mech, abd, a, x, opt, rng);
  return fair_mmd_from_predictions(h.predict(b.x_ctf, b.a_ctf), h.predict(b.x_fact, b.a_fact),
                                   b.block, kernel);
}

inline double loss_fair_mean_mse(const Predictor& h, const MechanismModel& mech,
                                 const AbductorModel& abd, const Matrix& a, const Matrix& x,
                                 const CounterfactualOptions& opt, RngStream& rng) {
  const CounterfactualBatch b = make_counterfactual_batch(mech, abd, a, x, opt, rng);
  return fair_mean_mse_from_predictions(h.predict(b.x_ctf, b.a_ctf),
                                        h.predict(b.x_fact, b.a_fact), b.block);
}

// Gradient of l_pred + lambda * l_fair w.r.t. the predictor parameters on given batches.
struct FairGradient {
  double pred = 0.0;
  double fair = 0.0;
  double total = 0.0;
  std::vector<Matrix> phi;
};

inline FairGradient fair_objective_gradient(const Predictor& h, const Matrix& x, const Matrix& a,
                                            const Matrix& y, const CounterfactualBatch* cf,
                                            double lambda, FairnessLoss kind,
                                            const Kernel& kernel) {
  ad::Tape tape;
  const BoundMlp hb = bind(tape, h.net, true);
  ad::Var total = graph::loss_pred(tape, hb, x, a, y);
  FairGradient out;
  out.pred = total.scalar();
  if (cf && lambda > 0.0) {
    const ad::Var pc = graph::predict(tape, hb, cf->x_ctf, cf->a_ctf);
    const ad::Var pf = graph::predict(tape, hb, cf->x_fact, cf->a_fact);
    const ad::Var fair = kind == FairnessLoss::Mmd2 ? graph::fair_mmd(pc, pf, cf->block, kernel)
                                                    : graph::fair_mean_mse(pc, pf, cf->block);
    out.fair = fair.scalar();
    total = total + lambda * fair;
  }
  out.total = total.scalar();
  tape.backward(total);
  out.phi = hb.gradients();
  return out;
}

struct FairRecord {
  long step = 0;
  double pred = 0.0;
  double fair = 0.0;
  double total = 0.0;
};

struct FairResult {
  Predictor predictor;
  std::vector<FairRecord> history;
  double rho_fair = 1.0;
};

inline double resolve_rho_fair(const FairTrainConfig& cfg, const Dataset& train) {
  return cfg.rho_fair > 0.0 ? cfg.rho_fair : median_heuristic(train.y);
}

/// Minimizes l_pred + lambda_fair * l_fair over the predictor only; the
/// stage-1 models stay frozen. With lambda_fair = 0 no counterfactuals are
/// generated and the run is plain MSE training.
inline FairResult train_fair(Predictor h, const MechanismModel& mech, const AbductorModel& abd,
                             const Dataset& train, const FairTrainConfig& cfg, RngStream& rng,
                             const std::function<void(const FairRecord&)>& on_step = {}) {
  cfg.validate();
  train.validate();
  FairResult result;
  result.rho_fair = resolve_rho_fair(cfg, train);
  const Kernel kernel(result.rho_fair);
  RngStream pred_rng = rng.derive("pred");
  RngStream fair_rng = rng.derive("fair");
  AdamState opt(h.net.parameters(), AdamConfig{cfg.lr});
  CounterfactualOptions cf_opt{cfg.q_intv, cfg.q_abd, cfg.intervention_sampler,
                               cfg.common_random_numbers, &train.a};

  for (long step = 0; step < cfg.steps; ++step) {
    const auto rows = sample_indices(pred_rng, train.size(), cfg.n_pred);
    const Matrix x = gather_rows(train.x, rows);
    const Matrix a = gather_rows(train.a, rows);
    const Matrix y = gather_rows(train.y, rows);
    FairGradient g;
    try {
      if (cfg.lambda_fair > 0.0) {
        const auto frows = sample_indices(fair_rng, train.size(), cfg.n_fair);
        const CounterfactualBatch cf = make_counterfactual_batch(
            mech, abd, gather_rows(train.a, frows), gather_rows(train.x, frows), cf_opt, fair_rng);
        g = fair_objective_gradient(h, x, a, y, &cf, cfg.lambda_fair, cfg.fairness_loss, kernel);
      } else {
        g = fair_objective_gradient(h, x, a, y, nullptr, 0.0, cfg.fairness_loss, kernel);
      }
    } catch (const NumericalError& e) {
      throw TrainingError(std::string("stage-2 training diverged: ") + e.what(), step);
    }
    if (!std::isfinite(g.total)) throw TrainingError("stage-2 loss is not finite", step);
    opt.step(h.net.parameters(), g.phi);
    FairRecord rec{step, g.pred, g.fair, g.total};
    result.history.push_back(rec);
    if (on_step) on_step(rec);
  }
  result.predictor = std::move(h);
  return result;
}

struct Metrics {
  double mse = 0.0;
  double explained_variance = 0.0;
  double fair_mmd = 0.0;
  double fair_mean_mse = 0.0;
  int q_intv = 0;
  int q_abd = 0;
  Index n_test = 0;
};

/// Test-set performance (MSE, explained variance) and both fairness scores.
/// The fairness scores share one set of counterfactual samples, generated
/// without common random numbers.
inline Metrics evaluate(const Predictor& h, const MechanismModel& mech, const AbductorModel& abd,
                        const Dataset& test, const FairTrainConfig& cfg, const Kernel& kernel,
                        RngStream& rng) {
  if (test.size() < 1) throw ArgumentError("evaluate: empty test set");
  Metrics m;
  m.n_test = test.size();
  m.q_intv = cfg.eval_q_intv;
  m.q_abd = cfg.eval_q_abd;
  const Matrix pred = h.predict(test.x, test.a);
  const Matrix resid = test.y - pred;
  m.mse = resid.array().square().mean();
  double ev = 0.0;
  for (Index c = 0; c < test.y.cols(); ++c) {
    const auto var = [](const auto& col) {
      const double mu = col.mean();
      return (col.array() - mu).square().mean();
    };
    const double vy = var(test.y.col(c));
    ev += vy > 0.0 ? 1.0 - var(resid.col(c)) / vy : 0.0;
  }
  m.explained_variance = ev / static_cast<double>(test.y.cols());

  CounterfactualOptions opt{cfg.eval_q_intv, cfg.eval_q_abd, cfg.intervention_sampler, false,
                            &test.a};
  const CounterfactualBatch b = make_counterfactual_batch(mech, abd, test.a, test.x, opt, rng);
  const Matrix pc = h.predict(b.x_ctf, b.a_ctf);
  const Matrix pf = h.predict(b.x_fact, b.a_fact);
  m.fair_mmd = fair_mmd_from_predictions(pc, pf, b.block, kernel);
  m.fair_mean_mse = fair_mean_mse_from_predictions(pc, pf, b.block);
  return m;
}

inline nlohmann::json metrics_json(const Metrics& m, double lambda_fair, std::uint64_t seed,
                                   const std::string& config_digest) {
  return {{"lambda_fair", lambda_fair},
          {"seed", seed},
          {"mse", m.mse},
          {"explained_variance", m.explained_variance},
          {"fair_mmd", m.fair_mmd},
          {"fair_mean_mse", m.fair_mean_mse},
          {"eval_q_intv", m.q_intv},
          {"eval_q_abd", m.q_abd},
          {"n_test", m.n_test},
          {"config_digest", config_digest}};
}

}  // namespace cfair
