#pragma once

#include <filesystem>
#include <optional>
#include <string>

#if defined(__GLIBC__)
#include <malloc.h>
#endif

#include <nlohmann/json.hpp>
#include <spdlog/spdlog.h>

#include "cfair/config.hpp"
#include "cfair/dataset.hpp"
#include "cfair/ncm.hpp"
#include "cfair/scm.hpp"

// End-to-end building blocks shared by the command-line tool and the
// acceptance suite: dataset construction, stage-1 setup and checkpoints.

namespace cfair {

struct DataBundle {
  Dataset train;
  Dataset test;
  std::optional<LinearGaussianSCM> scm;  // synthetic data only
};

inline LinearGaussianSCM resolve_scm(const DataConfig& data) {
  if (data.scm_asset.empty()) return LinearGaussianSCM::seeded(kDefaultScmSeed);
  return LinearGaussianSCM::from_json(read_json(data.scm_asset));
}

/// Draws (or loads) the full dataset and splits it; normalization statistics
/// come from the training rows only.
inline DataBundle make_data(const RunConfig& cfg) {
  DataBundle out;
  Dataset full;
  if (cfg.data.kind == "synthetic") {
    out.scm = resolve_scm(cfg.data);
    RngStream rng(cfg.seed, "data");
    full = sample_synthetic(*out.scm, cfg.data.n, rng);
  } else {
    full = load_crimes(cfg.data.path, cfg.data.sensitive, cfg.data.target);
    spdlog::info("crimes: {} rows, realized X dimension {}", full.size(), full.d_x());
  }
  double frac = cfg.data.train_fraction;
  if (cfg.data.n_train > 0) {
    if (cfg.data.n_train >= full.size())
      throw ConfigError(fmt::format("data.n_train = {} leaves no test rows ({} rows total)",
                                    cfg.data.n_train, full.size()));
    frac = static_cast<double>(cfg.data.n_train) / static_cast<double>(full.size());
  }
  RngStream split_rng(cfg.seed, "split");
  std::tie(out.train, out.test) = split(full, frac, split_rng);
  return out;
}

// Latent width: the true confounder size on synthetic data, 8 otherwise.
inline int resolve_d_u(const RunConfig& cfg, const DataBundle& data) {
  if (cfg.stage1.d_u > 0) return cfg.stage1.d_u;
  return data.scm ? static_cast<int>(data.scm->d_u()) : 8;
}

inline std::pair<MechanismModel, AbductorModel> init_stage1_models(const GenTrainConfig& cfg,
                                                                   const Dataset& train, int d_u,
                                                                   const RngStream& stage1) {
  RngStream init = stage1.derive("init");
  const Activation act = activation_from_string(cfg.activation);
  const int d_a = static_cast<int>(train.d_a());
  const int d_x = static_cast<int>(train.d_x());
  MechanismModel mech = MechanismModel::create(d_a, d_u, d_x, init, cfg.hidden, cfg.layers, act);
  AbductorModel abd = AbductorModel::create(d_x, d_a, d_u, d_u, init, cfg.hidden, cfg.layers, act);
  return {std::move(mech), std::move(abd)};
}

inline Stage1Result run_stage1(const RunConfig& cfg, const DataBundle& data,
                               const std::function<void(const LossRecord&)>& on_step = {}) {
  RngStream stage1(cfg.seed, "stage1");
  auto [mech, abd] = init_stage1_models(cfg.stage1, data.train, resolve_d_u(cfg, data), stage1);
  return train_stage1(std::move(mech), std::move(abd), data.train, cfg.stage1, stage1, on_step);
}

// ---- checkpoints ---------------------------------------------------------------

inline nlohmann::json mechanism_to_json(const MechanismModel& m, std::uint64_t seed,
                                        const std::string& digest) {
  return {{"model", "mechanism"}, {"d_a", m.d_a}, {"d_u", m.d_u}, {"net", m.net.to_json(seed, digest)},
          {"config_digest", digest}};
}

inline nlohmann::json abductor_to_json(const AbductorModel& m, std::uint64_t seed,
                                       const std::string& digest) {
  return {{"model", "abductor"}, {"d_x", m.d_x},   {"d_a", m.d_a}, {"d_noise", m.d_noise},
          {"net", m.net.to_json(seed, digest)},     {"config_digest", digest}};
}

inline MechanismModel mechanism_from_json(const nlohmann::json& j) {
  try {
    if (j.at("model").get<std::string>() != "mechanism") throw SchemaError("not a mechanism checkpoint");
    MechanismModel m{Mlp::from_json(j.at("net")), j.at("d_a").get<int>(), j.at("d_u").get<int>()};
    if (m.net.input_dim() != m.d_a + m.d_u) throw SchemaError("mechanism checkpoint: input width");
    return m;
  } catch (const nlohmann::json::exception& e) {
    throw SchemaError(std::string("mechanism checkpoint: ") + e.what());
  }
}

inline AbductorModel abductor_from_json(const nlohmann::json& j) {
  try {
    if (j.at("model").get<std::string>() != "abductor") throw SchemaError("not an abductor checkpoint");
    AbductorModel m{Mlp::from_json(j.at("net")), j.at("d_x").get<int>(), j.at("d_a").get<int>(),
                    j.at("d_noise").get<int>()};
    if (m.net.input_dim() != m.d_x + m.d_a + m.d_noise)
      throw SchemaError("abductor checkpoint: input width");
    return m;
  } catch (const nlohmann::json::exception& e) {
    throw SchemaError(std::string("abductor checkpoint: ") + e.what());
  }
}

inline nlohmann::json predictor_to_json(const Predictor& p, std::uint64_t seed, const std::string& digest) {
  return {{"model", "predictor"}, {"d_x", p.d_x}, {"d_a", p.d_a}, {"net", p.net.to_json(seed, digest)},
          {"config_digest", digest}};
}

inline Predictor predictor_from_json(const nlohmann::json& j) {
  try {
    if (j.at("model").get<std::string>() != "predictor") throw SchemaError("not a predictor checkpoint");
    Predictor p{Mlp::from_json(j.at("net")), j.at("d_x").get<int>(), j.at("d_a").get<int>()};
    if (p.net.input_dim() != p.d_x + p.d_a) throw SchemaError("predictor checkpoint: input width");
    return p;
  } catch (const nlohmann::json::exception& e) {
    throw SchemaError(std::string("predictor checkpoint: ") + e.what());
  }
}

// Training allocates and frees many multi-megabyte temporaries per step. Keeping
// them on the heap instead of fresh mmap()s avoids page-fault churn (glibc only).
inline void tune_allocator() {
#if defined(__GLIBC__)
  mallopt(M_MMAP_THRESHOLD, 512 << 20);
  mallopt(M_TRIM_THRESHOLD, 1024 << 20);
#endif
}

// Pretty JSON with a trailing newline; key order is sorted, so output is stable.
inline std::string json_text(const nlohmann::json& j) { return j.dump(2) + "\n"; }

}  // namespace cfair
