#pragma once

#include <cstdlib>
#include <filesystem>
#include <string>
#include <vector>

#include <fmt/format.h>
#include <nlohmann/json.hpp>
#include <openssl/evp.h>
#include <toml.hpp>

#include "cfair/errors.hpp"
#include "cfair/fair.hpp"
#include "cfair/ncm.hpp"

// Run configuration: TOML documents, dotted-key overrides and the canonical
// digest embedded in every artifact.

namespace cfair {

struct DataConfig {
  std::string kind = "synthetic";  // synthetic | crimes
  long n = 5000;                   // synthetic sample count
  double train_fraction = 0.8;
  long n_train = 0;                // > 0 overrides train_fraction with an exact count
  std::string scm_asset;           // empty: the built-in seeded SCM
  std::string path;                // crimes CSV
  std::string sensitive = "racepctblack";
  std::string target = "ViolentCrimesPerPop";

  nlohmann::json to_json() const {
    return {{"kind", kind},         {"n", n},       {"train_fraction", train_fraction},
            {"n_train", n_train},   {"scm_asset", scm_asset}, {"path", path},
            {"sensitive", sensitive}, {"target", target}};
  }
};

struct SweepConfig {
  std::vector<double> lambdas = {0.0, 0.1, 0.5, 1.0, 2.0, 5.0, 10.0};
  int repeats = 3;
  int workers = 1;
  std::vector<std::string> arms = {"mmd", "mean_mse"};
  bool axis_swap = false;

  nlohmann::json to_json() const {
    return {{"lambdas", lambdas}, {"repeats", repeats}, {"workers", workers},
            {"arms", arms},       {"axis_swap", axis_swap}};
  }
};

struct RunConfig {
  std::uint64_t seed = 0;
  std::string output_dir = "out";
  DataConfig data;
  GenTrainConfig stage1;
  FairTrainConfig stage2;
  SweepConfig sweep;

  void validate() const {
    if (data.kind != "synthetic" && data.kind != "crimes")
      throw ConfigError("data.kind must be 'synthetic' or 'crimes', got '" + data.kind + "'");
    if (data.kind == "synthetic" && data.n < 2) throw ConfigError("data.n must be >= 2");
    if (data.kind == "crimes" && data.path.empty()) throw ConfigError("data.path is required for crimes");
    if (!(data.train_fraction > 0.0 && data.train_fraction < 1.0))
      throw ConfigError("data.train_fraction must lie in (0, 1)");
    if (data.n_train < 0) throw ConfigError("data.n_train must be >= 0");
    if (output_dir.empty()) throw ConfigError("output_dir must be nonempty");
    stage1.validate();
    stage2.validate();
    if (sweep.lambdas.empty()) throw ConfigError("sweep.lambdas must be nonempty");
    for (double l : sweep.lambdas)
      if (!(l >= 0.0)) throw ConfigError("sweep.lambdas must be >= 0");
    if (sweep.repeats < 1) throw ConfigError("sweep.repeats must be >= 1");
    if (sweep.workers < 1) throw ConfigError("sweep.workers must be >= 1");
    if (sweep.arms.empty()) throw ConfigError("sweep.arms must be nonempty");
    for (const auto& a : sweep.arms) fairness_loss_from_string(a);
  }

  /// Canonical document: every setting that can influence an artifact. The
  /// output directory is excluded so relocated reruns produce identical bytes.
  nlohmann::json to_json() const {
    return {{"seed", seed},
            {"data", data.to_json()},
            {"stage1", stage1.to_json()},
            {"stage2", stage2.to_json()},
            {"sweep", sweep.to_json()}};
  }

  nlohmann::json to_json_with_output() const {
    nlohmann::json j = to_json();
    j["output_dir"] = output_dir;
    return j;
  }

  static RunConfig from_json(const nlohmann::json& j);
};

namespace detail {

// Rejects keys the section does not know, so typos fail loudly.
inline void check_keys(const nlohmann::json& given, const nlohmann::json& known, const std::string& where) {
  if (!given.is_object()) throw ConfigError(where.empty() ? "config must be a table" : where + " must be a table");
  for (const auto& [key, value] : given.items())
    if (!known.contains(key))
      throw ConfigError(fmt::format("unknown config key '{}{}'", where.empty() ? "" : where + ".", key));
}

}  // namespace detail

inline RunConfig RunConfig::from_json(const nlohmann::json& j) {
  RunConfig c;
  nlohmann::json known = c.to_json_with_output();
  detail::check_keys(j, known, "");
  try {
    if (j.contains("seed")) c.seed = j.at("seed").get<std::uint64_t>();
    if (j.contains("output_dir")) c.output_dir = j.at("output_dir").get<std::string>();
    if (j.contains("data")) {
      const auto& d = j.at("data");
      detail::check_keys(d, known["data"], "data");
      auto get = [&](const char* key, auto& field) {
        if (d.contains(key)) field = d.at(key).get<std::decay_t<decltype(field)>>();
      };
      get("kind", c.data.kind);
      get("n", c.data.n);
      get("train_fraction", c.data.train_fraction);
      get("n_train", c.data.n_train);
      get("scm_asset", c.data.scm_asset);
      get("path", c.data.path);
      get("sensitive", c.data.sensitive);
      get("target", c.data.target);
    }
    if (j.contains("stage1")) {
      detail::check_keys(j.at("stage1"), known["stage1"], "stage1");
      c.stage1 = GenTrainConfig::from_json(j.at("stage1"));
    }
    if (j.contains("stage2")) {
      detail::check_keys(j.at("stage2"), known["stage2"], "stage2");
      c.stage2 = FairTrainConfig::from_json(j.at("stage2"));
    }
    if (j.contains("sweep")) {
      const auto& s = j.at("sweep");
      detail::check_keys(s, known["sweep"], "sweep");
      auto get = [&](const char* key, auto& field) {
        if (s.contains(key)) field = s.at(key).get<std::decay_t<decltype(field)>>();
      };
      get("lambdas", c.sweep.lambdas);
      get("repeats", c.sweep.repeats);
      get("workers", c.sweep.workers);
      get("arms", c.sweep.arms);
      get("axis_swap", c.sweep.axis_swap);
    }
  } catch (const nlohmann::json::exception& e) {
    throw ConfigError(std::string("config: ") + e.what());
  }
  c.validate();
  return c;
}

// ---- TOML --------------------------------------------------------------------

inline nlohmann::json toml_to_json(const toml::node& node) {
  if (const auto* t = node.as_table()) {
    nlohmann::json out = nlohmann::json::object();
    for (const auto& [key, value] : *t) out[std::string(key.str())] = toml_to_json(value);
    return out;
  }
  if (const auto* a = node.as_array()) {
    nlohmann::json out = nlohmann::json::array();
    for (const auto& v : *a) out.push_back(toml_to_json(v));
    return out;
  }
  if (const auto* v = node.as_string()) return v->get();
  if (const auto* v = node.as_integer()) return v->get();
  if (const auto* v = node.as_floating_point()) return v->get();
  if (const auto* v = node.as_boolean()) return v->get();
  throw ConfigError("unsupported TOML value (dates and times are not accepted)");
}

inline nlohmann::json parse_toml(const std::string& text, const std::string& source) {
  try {
    return toml_to_json(toml::parse(text, source));
  } catch (const toml::parse_error& e) {
    throw ConfigError(fmt::format("{}: {} (line {})", source, e.description(), e.source().begin.line));
  }
}

/// Applies one "dotted.key=value" override. The value is read as a TOML value
/// (numbers, booleans, arrays, quoted strings); anything else is a bare string.
inline void apply_override(nlohmann::json& doc, const std::string& assignment) {
  const auto eq = assignment.find('=');
  if (eq == std::string::npos || eq == 0)
    throw ArgumentError("override '" + assignment + "' is not of the form key=value");
  const std::string key = assignment.substr(0, eq);
  const std::string raw = assignment.substr(eq + 1);
  nlohmann::json value;
  try {
    value = toml_to_json(*toml::parse("v = " + raw)["v"].node());
  } catch (const toml::parse_error&) {
    value = raw;
  }
  nlohmann::json* cur = &doc;
  std::size_t start = 0;
  while (true) {
    const auto dot = key.find('.', start);
    const std::string part = key.substr(start, dot == std::string::npos ? std::string::npos : dot - start);
    if (part.empty()) throw ArgumentError("override key '" + key + "' has an empty component");
    if (dot == std::string::npos) {
      (*cur)[part] = value;
      return;
    }
    if (!cur->contains(part)) (*cur)[part] = nlohmann::json::object();
    cur = &(*cur)[part];
    if (!cur->is_object()) throw ArgumentError("override key '" + key + "' descends into a non-table");
    start = dot + 1;
  }
}

inline constexpr const char* kOutputDirEnv = "CFAIR_OUTPUT_DIR";

/// Reads an optional TOML file, applies overrides in order, then the output
/// directory environment override.
inline RunConfig load_run_config(const std::filesystem::path& path,
                                 const std::vector<std::string>& overrides = {}) {
  nlohmann::json doc = nlohmann::json::object();
  if (!path.empty()) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw IoError("cannot open config '" + path.string() + "'");
    std::ostringstream ss;
    ss << in.rdbuf();
    doc = parse_toml(ss.str(), path.string());
  }
  for (const auto& o : overrides) apply_override(doc, o);
  RunConfig cfg = RunConfig::from_json(doc);
  if (const char* env = std::getenv(kOutputDirEnv); env && *env) cfg.output_dir = env;
  return cfg;
}

// ---- digest ------------------------------------------------------------------

inline std::string sha256_hex(const std::string& data) {
  unsigned char md[EVP_MAX_MD_SIZE];
  unsigned int len = 0;
  if (EVP_Digest(data.data(), data.size(), md, &len, EVP_sha256(), nullptr) != 1)
    throw Error("SHA-256 computation failed");
  std::string out;
  for (unsigned int i = 0; i < len; ++i) out += fmt::format("{:02x}", md[i]);
  return out;
}

// Canonical text: keys sorted, no whitespace, shortest round-trip numbers.
inline std::string canonical_text(const RunConfig& cfg) { return cfg.to_json().dump(); }

inline std::string config_digest(const RunConfig& cfg) { return sha256_hex(canonical_text(cfg)); }

}  // namespace cfair
