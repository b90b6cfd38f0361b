#pragma once

#include <cmath>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "cfair/autodiff.hpp"
#include "cfair/errors.hpp"
#include "cfair/random.hpp"
#include "cfair/types.hpp"

namespace cfair {

enum class Activation { Tanh, Softplus };

inline std::string to_string(Activation a) { return a == Activation::Tanh ? "tanh" : "softplus"; }

inline Activation activation_from_string(const std::string& s) {
  if (s == "tanh") return Activation::Tanh;
  if (s == "softplus") return Activation::Softplus;
  throw ConfigError("unknown activation '" + s + "'");
}

inline constexpr int kCheckpointFormatVersion = 1;

/// Fully connected network: affine layers with an activation between them and
/// an affine output layer. Weights are stored fan_in x fan_out so a batch
/// (rows = samples) maps as X W + b.
class Mlp {
 public:
  Mlp() = default;

  // Zero-initialized network with the given layer widths (input, hidden..., output).
  explicit Mlp(std::vector<int> layer_dims, Activation act = Activation::Tanh)
      : dims_(std::move(layer_dims)), activation_(act) {
    if (dims_.size() < 2) throw ArgumentError("Mlp: need at least input and output widths");
    for (int w : dims_)
      if (w < 1) throw ArgumentError("Mlp: layer widths must be positive");
    for (std::size_t l = 0; l + 1 < dims_.size(); ++l) {
      weights_.push_back(Matrix::Zero(dims_[l], dims_[l + 1]));
      biases_.push_back(Matrix::Zero(1, dims_[l + 1]));
    }
  }

  // Glorot-uniform weights in +-sqrt(6 / (fan_in + fan_out)), zero biases.
  static Mlp glorot(std::vector<int> layer_dims, RngStream& rng, Activation act = Activation::Tanh) {
    Mlp m(std::move(layer_dims), act);
    for (auto& w : m.weights_) {
      const double limit = std::sqrt(6.0 / static_cast<double>(w.rows() + w.cols()));
      for (Index i = 0; i < w.size(); ++i) w.data()[i] = rng.uniform(-limit, limit);
    }
    return m;
  }

  // Hidden widths default to three affine layers of width 32.
  static std::vector<int> default_dims(int in, int out, int hidden = 32, int layers = 3) {
    std::vector<int> dims{in};
    for (int l = 0; l + 1 < layers; ++l) dims.push_back(hidden);
    dims.push_back(out);
    return dims;
  }

  const std::vector<int>& layer_dims() const noexcept { return dims_; }
  Activation activation() const noexcept { return activation_; }
  int input_dim() const { return dims_.front(); }
  int output_dim() const { return dims_.back(); }
  std::size_t layer_count() const noexcept { return weights_.size(); }

  Matrix& weight(std::size_t l) { return weights_.at(l); }
  const Matrix& weight(std::size_t l) const { return weights_.at(l); }
  Matrix& bias(std::size_t l) { return biases_.at(l); }
  const Matrix& bias(std::size_t l) const { return biases_.at(l); }

  // Parameters in a fixed order: w0, b0, w1, b1, ...
  std::vector<Matrix*> parameters() {
    std::vector<Matrix*> out;
    for (std::size_t l = 0; l < weights_.size(); ++l) {
      out.push_back(&weights_[l]);
      out.push_back(&biases_[l]);
    }
    return out;
  }

  std::vector<Matrix> parameter_values() const {
    std::vector<Matrix> out;
    for (std::size_t l = 0; l < weights_.size(); ++l) {
      out.push_back(weights_[l]);
      out.push_back(biases_[l]);
    }
    return out;
  }

  std::size_t parameter_count() const {
    std::size_t n = 0;
    for (std::size_t l = 0; l < weights_.size(); ++l)
      n += static_cast<std::size_t>(weights_[l].size() + biases_[l].size());
    return n;
  }

  Matrix forward(const Matrix& input) const {
    if (input.cols() != input_dim())
      throw ArgumentError("Mlp::forward: input width " + std::to_string(input.cols()) +
                          " != " + std::to_string(input_dim()));
    Matrix h = input;
    for (std::size_t l = 0; l < weights_.size(); ++l) {
      Matrix z(h.rows(), weights_[l].cols());
      z.noalias() = h * weights_[l];
      z.rowwise() += biases_[l].row(0);
      if (l + 1 < weights_.size()) {
        if (activation_ == Activation::Tanh)
          z = ad::detail::tanh(z);
        else
          z = z.unaryExpr(&ad::detail::softplus);
      }
      if (!all_finite(z))
        throw NumericalError("Mlp::forward: non-finite output at layer " + std::to_string(l));
      h = std::move(z);
    }
    return h;
  }

  nlohmann::json to_json(std::uint64_t seed, const std::string& config_digest) const {
    nlohmann::json layers = nlohmann::json::array();
    for (std::size_t l = 0; l < weights_.size(); ++l) {
      const Matrix& w = weights_[l];
      layers.push_back({{"weight_rows", w.rows()},
                        {"weight_cols", w.cols()},
                        {"weight", std::vector<double>(w.data(), w.data() + w.size())},
                        {"bias", std::vector<double>(biases_[l].data(),
                                                     biases_[l].data() + biases_[l].size())}});
    }
    return {{"format_version", kCheckpointFormatVersion},
            {"layer_dims", dims_},
            {"activation", to_string(activation_)},
            {"layers", layers},
            {"rng_seed", seed},
            {"config_digest", config_digest}};
  }

  static Mlp from_json(const nlohmann::json& j) {
    try {
      if (j.at("format_version").get<int>() != kCheckpointFormatVersion)
        throw SchemaError("checkpoint: unsupported format_version");
      Mlp m(j.at("layer_dims").get<std::vector<int>>(),
            activation_from_string(j.at("activation").get<std::string>()));
      const auto& layers = j.at("layers");
      if (layers.size() != m.weights_.size())
        throw SchemaError("checkpoint: layer count does not match layer_dims");
      for (std::size_t l = 0; l < layers.size(); ++l) {
        const auto w = layers[l].at("weight").get<std::vector<double>>();
        const auto b = layers[l].at("bias").get<std::vector<double>>();
        if (static_cast<Index>(w.size()) != m.weights_[l].size() ||
            static_cast<Index>(b.size()) != m.biases_[l].size())
          throw SchemaError("checkpoint: parameter array size mismatch in layer " +
                            std::to_string(l));
        std::copy(w.begin(), w.end(), m.weights_[l].data());
        std::copy(b.begin(), b.end(), m.biases_[l].data());
      }
      return m;
    } catch (const nlohmann::json::exception& e) {
      throw SchemaError(std::string("checkpoint: ") + e.what());
    } catch (const ArgumentError& e) {
      throw SchemaError(std::string("checkpoint: ") + e.what());
    }
  }

  friend bool operator==(const Mlp& a, const Mlp& b) {
    if (a.dims_ != b.dims_ || a.activation_ != b.activation_) return false;
    for (std::size_t l = 0; l < a.weights_.size(); ++l)
      if (a.weights_[l] != b.weights_[l] || a.biases_[l] != b.biases_[l]) return false;
    return true;
  }

 private:
  std::vector<int> dims_;
  Activation activation_ = Activation::Tanh;
  std::vector<Matrix> weights_;
  std::vector<Matrix> biases_;
};

/// An Mlp whose parameters have been placed on a tape.
struct BoundMlp {
  const Mlp* net = nullptr;
  std::vector<ad::Var> params;  // w0, b0, w1, b1, ...
  bool trainable = false;

  ad::Var forward(ad::Var input) const {
    if (input.cols() != net->input_dim()) throw ArgumentError("BoundMlp::forward: input width");
    ad::Var h = input;
    const std::size_t layers = params.size() / 2;
    for (std::size_t l = 0; l < layers; ++l) {
      h = ad::add_row(ad::matmul(h, params[2 * l]), params[2 * l + 1]);
      if (l + 1 < layers) h = net->activation() == Activation::Tanh ? ad::tanh(h) : ad::softplus(h);
    }
    return h;
  }

  std::vector<Matrix> gradients() const {
    std::vector<Matrix> out;
    out.reserve(params.size());
    for (ad::Var p : params) out.push_back(p.tape()->grad(p));
    return out;
  }
};

inline BoundMlp bind(ad::Tape& tape, const Mlp& net, bool trainable) {
  BoundMlp b;
  b.net = &net;
  b.trainable = trainable;
  for (const Matrix& p : net.parameter_values())
    b.params.push_back(trainable ? tape.leaf(p) : tape.constant(p));
  return b;
}

inline Matrix mlp_forward(const Mlp& net, const Matrix& input) { return net.forward(input); }

}  // namespace cfair
