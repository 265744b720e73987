#pragma once

#include <algorithm>
#include <bit>
#include <cmath>
#include <cstddef>
#include <cstdint>
#include <istream>
#include <numbers>
#include <numeric>
#include <optional>
#include <ostream>
#include <span>
#include <string>
#include <string_view>
#include <variant>
#include <vector>

#include <Eigen/Dense>
#include <json.hpp>

#include "tlrl/errors.hpp"
#include "tlrl/random.hpp"

namespace tlrl::nn {

using Matrix = Eigen::MatrixXd;
using RowVector = Eigen::RowVectorXd;

enum class ModelKind { residual_mlp, ann, logreg };
enum class Mode { train, infer };

inline std::string to_string(ModelKind k) {
  switch (k) {
    case ModelKind::residual_mlp: return "residual-mlp";
    case ModelKind::ann: return "ann";
    case ModelKind::logreg: return "logreg";
  }
  return "?";
}

inline ModelKind model_kind_from_string(const std::string& s) {
  if (s == "residual-mlp") return ModelKind::residual_mlp;
  if (s == "ann") return ModelKind::ann;
  if (s == "logreg") return ModelKind::logreg;
  throw ConfigError("unknown model kind '" + s + "' (expected residual-mlp, ann or logreg)");
}

struct AdamConfig {
  double beta1 = 0.9;
  double beta2 = 0.999;
  double epsilon = 1e-7;
};

/// Defaults reproduce the residual MLP of the reference architecture.
struct ModelConfig {
  ModelKind kind = ModelKind::residual_mlp;
  std::size_t input_dim = 3328;
  std::size_t num_classes = 2;
  std::size_t stem_width = 1024;
  std::size_t bottleneck_width = 256;
  std::size_t residual_blocks = 2;
  std::vector<std::size_t> hidden;  // ann only
  double stem_dropout = 0.3;
  double block_dropout = 0.2;
  double label_smoothing = 0.1;
  std::size_t batch_size = 32;
  std::size_t epochs = 25;
  double learning_rate = 1e-3;
  double min_learning_rate = 0.0;
  double bn_momentum = 0.99;
  double bn_epsilon = 1e-3;
  AdamConfig adam;

  void validate() const {
    if (input_dim == 0) throw ConfigError("input_dim must be positive");
    if (num_classes < 2) throw ConfigError("num_classes must be >= 2");
    if (kind == ModelKind::logreg && num_classes != 2) throw ConfigError("logreg is binary only");
    if (kind == ModelKind::residual_mlp && (stem_width == 0 || bottleneck_width == 0))
      throw ConfigError("residual widths must be positive");
    for (auto h : hidden)
      if (h == 0) throw ConfigError("hidden widths must be positive");
    for (double r : {stem_dropout, block_dropout})
      if (!(r >= 0.0 && r < 1.0)) throw ConfigError("dropout rate must lie in [0,1)");
    if (!(label_smoothing >= 0.0 && label_smoothing < 1.0)) throw ConfigError("label_smoothing must lie in [0,1)");
    if (batch_size == 0) throw ConfigError("batch_size must be positive");
    if (!(learning_rate > 0.0)) throw ConfigError("learning_rate must be positive");
    if (!(bn_momentum >= 0.0 && bn_momentum < 1.0)) throw ConfigError("bn_momentum must lie in [0,1)");
    if (!(bn_epsilon > 0.0)) throw ConfigError("bn_epsilon must be positive");
  }
};

inline nlohmann::json to_json(const ModelConfig& c) {
  nlohmann::json j;
  j["kind"] = to_string(c.kind);
  j["input_dim"] = c.input_dim;
  j["num_classes"] = c.num_classes;
  j["stem_width"] = c.stem_width;
  j["bottleneck_width"] = c.bottleneck_width;
  j["residual_blocks"] = c.residual_blocks;
  j["hidden"] = c.hidden;
  j["stem_dropout"] = c.stem_dropout;
  j["block_dropout"] = c.block_dropout;
  j["label_smoothing"] = c.label_smoothing;
  j["batch_size"] = c.batch_size;
  j["epochs"] = c.epochs;
  j["learning_rate"] = c.learning_rate;
  j["min_learning_rate"] = c.min_learning_rate;
  j["bn_momentum"] = c.bn_momentum;
  j["bn_epsilon"] = c.bn_epsilon;
  j["adam"] = {{"beta1", c.adam.beta1}, {"beta2", c.adam.beta2}, {"epsilon", c.adam.epsilon}};
  return j;
}

/// Reads the keys present in `j` over `base`; unknown keys are rejected.
inline ModelConfig model_config_from_json(const nlohmann::json& j, ModelConfig c = {}) {
  for (const auto& [key, v] : j.items()) {
    try {
      if (key == "kind") c.kind = model_kind_from_string(v.get<std::string>());
      else if (key == "input_dim") c.input_dim = v.get<std::size_t>();
      else if (key == "num_classes") c.num_classes = v.get<std::size_t>();
      else if (key == "stem_width") c.stem_width = v.get<std::size_t>();
      else if (key == "bottleneck_width") c.bottleneck_width = v.get<std::size_t>();
      else if (key == "residual_blocks") c.residual_blocks = v.get<std::size_t>();
      else if (key == "hidden") c.hidden = v.get<std::vector<std::size_t>>();
      else if (key == "stem_dropout") c.stem_dropout = v.get<double>();
      else if (key == "block_dropout") c.block_dropout = v.get<double>();
      else if (key == "label_smoothing") c.label_smoothing = v.get<double>();
      else if (key == "batch_size") c.batch_size = v.get<std::size_t>();
      else if (key == "epochs") c.epochs = v.get<std::size_t>();
      else if (key == "learning_rate") c.learning_rate = v.get<double>();
      else if (key == "min_learning_rate") c.min_learning_rate = v.get<double>();
      else if (key == "bn_momentum") c.bn_momentum = v.get<double>();
      else if (key == "bn_epsilon") c.bn_epsilon = v.get<double>();
      else if (key == "adam") {
        c.adam.beta1 = v.value("beta1", c.adam.beta1);
        c.adam.beta2 = v.value("beta2", c.adam.beta2);
        c.adam.epsilon = v.value("epsilon", c.adam.epsilon);
      } else throw ConfigError("unknown model config key '" + key + "'");
    } catch (const nlohmann::json::exception& e) {
      throw ConfigError("model config key '" + key + "': " + e.what());
    }
  }
  return c;
}

// ---------------------------------------------------------------------------
// Network structure

struct DenseOp {
  std::size_t weight;  // params index, (in x out)
  std::size_t bias;    // params index, (1 x out)
};
struct ReluOp {};
struct BatchNormOp {
  std::size_t gamma, beta;  // params indices
  std::size_t mean, var;    // buffers indices
};
struct DropoutOp {
  double rate;
};
/// Pushes the current activation onto the skip stack.
struct SkipSaveOp {};
/// Pops the skip stack and adds it to the current activation.
struct SkipAddOp {};

using Op = std::variant<DenseOp, ReluOp, BatchNormOp, DropoutOp, SkipSaveOp, SkipAddOp>;

struct LayerCount {
  std::string name;
  std::size_t parameters;
};

struct ModelState {
  ModelConfig config;
  std::vector<Op> ops;
  std::vector<Matrix> params;  // trainable tensors in declaration order
  std::vector<std::string> param_names;
  std::vector<Matrix> buffers;  // batch-norm running statistics
  std::vector<std::string> buffer_names;
  std::vector<LayerCount> layers;

  std::size_t trainable_count() const {
    std::size_t n = 0;
    for (const auto& p : params) n += static_cast<std::size_t>(p.size());
    return n;
  }
  /// Trainable tensors plus batch-norm running mean and variance.
  std::size_t parameter_count() const {
    std::size_t n = trainable_count();
    for (const auto& b : buffers) n += static_cast<std::size_t>(b.size());
    return n;
  }
  std::size_t output_width() const {
    return config.kind == ModelKind::logreg ? 1 : config.num_classes;
  }
};

namespace detail {

enum class Init { he_uniform, glorot_uniform };

class Builder {
 public:
  Builder(ModelState& m, Rng& rng) : m_(m), rng_(rng) {}

  void dense(std::size_t in, std::size_t out, Init init, const std::string& name) {
    const double limit = init == Init::he_uniform ? std::sqrt(6.0 / static_cast<double>(in))
                                                  : std::sqrt(6.0 / static_cast<double>(in + out));
    Matrix w(static_cast<Eigen::Index>(in), static_cast<Eigen::Index>(out));
    for (Eigen::Index r = 0; r < w.rows(); ++r)
      for (Eigen::Index c = 0; c < w.cols(); ++c) w(r, c) = rng_.uniform(-limit, limit);
    const std::size_t wi = add_param(std::move(w), name + ".weight");
    const std::size_t bi = add_param(Matrix::Zero(1, static_cast<Eigen::Index>(out)), name + ".bias");
    m_.ops.push_back(DenseOp{wi, bi});
    m_.layers.push_back({name, in * out + out});
  }

  void batchnorm(std::size_t width, const std::string& name) {
    const auto w = static_cast<Eigen::Index>(width);
    const std::size_t g = add_param(Matrix::Ones(1, w), name + ".gamma");
    const std::size_t b = add_param(Matrix::Zero(1, w), name + ".beta");
    const std::size_t mu = m_.buffers.size();
    m_.buffers.push_back(Matrix::Zero(1, w));
    m_.buffer_names.push_back(name + ".running_mean");
    m_.buffers.push_back(Matrix::Ones(1, w));
    m_.buffer_names.push_back(name + ".running_var");
    m_.ops.push_back(BatchNormOp{g, b, mu, mu + 1});
    m_.layers.push_back({name, 4 * width});
  }

  void op(Op o) { m_.ops.push_back(o); }

 private:
  std::size_t add_param(Matrix p, std::string name) {
    m_.params.push_back(std::move(p));
    m_.param_names.push_back(std::move(name));
    return m_.params.size() - 1;
  }

  ModelState& m_;
  Rng& rng_;
};

}  // namespace detail

/// Builds and initializes a network. He-uniform for dense layers that feed a
/// ReLU, Glorot-uniform for the others, zero biases, unit BN scale.
inline ModelState build(const ModelConfig& config, std::uint64_t seed = 0) {
  config.validate();
  ModelState m;
  m.config = config;
  Rng rng(seed);
  detail::Builder b(m, rng);
  using detail::Init;
  switch (config.kind) {
    case ModelKind::residual_mlp: {
      b.dense(config.input_dim, config.stem_width, Init::he_uniform, "stem.dense");
      b.op(ReluOp{});
      b.batchnorm(config.stem_width, "stem.batchnorm");
      b.op(DropoutOp{config.stem_dropout});
      for (std::size_t k = 1; k <= config.residual_blocks; ++k) {
        const std::string p = "block" + std::to_string(k);
        b.op(SkipSaveOp{});
        b.dense(config.stem_width, config.bottleneck_width, Init::he_uniform, p + ".dense_down");
        b.op(ReluOp{});
        b.batchnorm(config.bottleneck_width, p + ".batchnorm");
        b.dense(config.bottleneck_width, config.stem_width, Init::glorot_uniform, p + ".dense_up");
        b.op(SkipAddOp{});
        b.op(ReluOp{});
        b.op(DropoutOp{config.block_dropout});
      }
      b.dense(config.stem_width, config.num_classes, Init::glorot_uniform, "output.dense");
      break;
    }
    case ModelKind::ann: {
      std::size_t in = config.input_dim;
      for (std::size_t k = 0; k < config.hidden.size(); ++k) {
        b.dense(in, config.hidden[k], Init::he_uniform, "hidden" + std::to_string(k + 1) + ".dense");
        b.op(ReluOp{});
        in = config.hidden[k];
      }
      b.dense(in, config.num_classes, Init::glorot_uniform, "output.dense");
      break;
    }
    case ModelKind::logreg:
      b.dense(config.input_dim, 1, Init::glorot_uniform, "output.dense");
      break;
  }
  return m;
}

// ---------------------------------------------------------------------------
// Forward

struct OpCache {
  Matrix input;
  Matrix aux;         // BN: normalized activations; dropout: scaled keep mask
  RowVector inv_std;  // BN only
};

struct ForwardCache {
  std::vector<OpCache> ops;
  Matrix logits;
  Matrix probs;
};

inline Matrix softmax_rows(const Matrix& z) {
  Matrix p(z.rows(), z.cols());
  for (Eigen::Index i = 0; i < z.rows(); ++i) {
    const double mx = z.row(i).maxCoeff();
    p.row(i) = (z.row(i).array() - mx).exp().matrix();
    p.row(i) /= p.row(i).sum();
  }
  return p;
}

inline double sigmoid(double z) {
  if (z >= 0.0) return 1.0 / (1.0 + std::exp(-z));
  const double e = std::exp(z);
  return e / (1.0 + e);
}

/// Maps output-layer logits to class probabilities (softmax, or sigmoid for logreg).
inline Matrix output_probabilities(const ModelState& m, const Matrix& logits) {
  if (m.config.kind != ModelKind::logreg) return softmax_rows(logits);
  Matrix p(logits.rows(), 2);
  for (Eigen::Index i = 0; i < logits.rows(); ++i) {
    p(i, 1) = sigmoid(logits(i, 0));
    p(i, 0) = sigmoid(-logits(i, 0));
  }
  return p;
}

namespace detail {

/// Runs the op list. In train mode BN uses batch statistics and, when
/// `running` is non-null, blends them into the running buffers; dropout draws
/// masks from `rng` (rate 0 draws nothing).
inline Matrix run_ops(const ModelState& m, const Matrix& x, Mode mode, Rng* rng, ForwardCache* cache,
                      std::vector<Matrix>* running) {
  if (static_cast<std::size_t>(x.cols()) != m.config.input_dim)
    throw SchemaError("input width " + std::to_string(x.cols()) + " does not match model input " +
                      std::to_string(m.config.input_dim));
  if (cache) cache->ops.assign(m.ops.size(), {});
  std::vector<Matrix> skip;
  Matrix h = x;
  for (std::size_t k = 0; k < m.ops.size(); ++k) {
    OpCache* oc = cache ? &cache->ops[k] : nullptr;
    if (oc) oc->input = h;
    std::visit(
        [&](const auto& op) {
          using T = std::decay_t<decltype(op)>;
          if constexpr (std::is_same_v<T, DenseOp>) {
            h = (h * m.params[op.weight]).rowwise() + m.params[op.bias].row(0);
          } else if constexpr (std::is_same_v<T, ReluOp>) {
            h = h.cwiseMax(0.0);
          } else if constexpr (std::is_same_v<T, BatchNormOp>) {
            const double eps = m.config.bn_epsilon;
            RowVector mean, var;
            if (mode == Mode::train) {
              mean = h.colwise().mean();
              var = (h.rowwise() - mean).array().square().colwise().mean().matrix();
              if (running) {
                const double mom = m.config.bn_momentum;
                (*running)[op.mean] = mom * (*running)[op.mean] + (1.0 - mom) * mean;
                (*running)[op.var] = mom * (*running)[op.var] + (1.0 - mom) * var;
              }
            } else {
              mean = m.buffers[op.mean].row(0);
              var = m.buffers[op.var].row(0);
            }
            const RowVector inv_std = (var.array() + eps).rsqrt().matrix();
            Matrix xhat = ((h.rowwise() - mean).array().rowwise() * inv_std.array()).matrix();
            h = ((xhat.array().rowwise() * m.params[op.gamma].row(0).array()).rowwise() +
                 m.params[op.beta].row(0).array())
                    .matrix();
            if (oc) {
              oc->aux = std::move(xhat);
              oc->inv_std = inv_std;
            }
          } else if constexpr (std::is_same_v<T, DropoutOp>) {
            if (mode == Mode::train && op.rate > 0.0) {
              if (!rng) throw InvariantError("train-mode dropout needs an rng");
              const double keep = 1.0 - op.rate;
              Matrix mask(h.rows(), h.cols());
              for (Eigen::Index c = 0; c < mask.cols(); ++c)
                for (Eigen::Index r = 0; r < mask.rows(); ++r) mask(r, c) = rng->uniform() < keep ? 1.0 / keep : 0.0;
              h = h.cwiseProduct(mask);
              if (oc) oc->aux = std::move(mask);
            }
          } else if constexpr (std::is_same_v<T, SkipSaveOp>) {
            skip.push_back(h);
          } else if constexpr (std::is_same_v<T, SkipAddOp>) {
            if (skip.empty()) throw InvariantError("unbalanced skip connection");
            h += skip.back();
            skip.pop_back();
          }
        },
        m.ops[k]);
  }
  if (cache) cache->logits = h;
  return h;
}

}  // namespace detail

/// Class probabilities (rows sum to 1). Train mode uses batch statistics,
/// updates BN running averages and applies inverted dropout.
inline Matrix forward(ModelState& model, const Matrix& x, Mode mode, Rng* rng = nullptr,
                      ForwardCache* cache = nullptr) {
  const Matrix logits = detail::run_ops(model, x, mode, rng, cache, mode == Mode::train ? &model.buffers : nullptr);
  Matrix probs = output_probabilities(model, logits);
  if (cache) cache->probs = probs;
  return probs;
}

/// Inference-mode probabilities; never mutates the model.
inline Matrix forward_infer(const ModelState& model, const Matrix& x) {
  return output_probabilities(model, detail::run_ops(model, x, Mode::infer, nullptr, nullptr, nullptr));
}

// ---------------------------------------------------------------------------
// Loss and gradients

inline constexpr double kLogEpsilon = 1e-12;

namespace detail {

inline void check_batch(const Matrix& probs, std::span<const int> labels, std::span<const double> weights) {
  if (labels.size() != static_cast<std::size_t>(probs.rows()) || weights.size() != labels.size())
    throw SchemaError("labels/weights do not match batch size");
  for (double w : weights)
    if (!(w > 0.0)) throw ConfigError("sample weights must be positive");
  for (int y : labels)
    if (y < 0 || y >= probs.cols()) throw SchemaError("label out of range");
}

}  // namespace detail

/// sum_i w_i * CE(smoothed onehot(y_i), p_i) / sum_i w_i, with smoothed
/// targets (1-s)*onehot + s/C.
inline double smoothed_weighted_loss(const Matrix& probs, std::span<const int> labels, std::span<const double> weights,
                                     double smoothing) {
  detail::check_batch(probs, labels, weights);
  const auto c = static_cast<double>(probs.cols());
  double num = 0.0, den = 0.0;
  for (Eigen::Index i = 0; i < probs.rows(); ++i) {
    double l = 0.0;
    for (Eigen::Index k = 0; k < probs.cols(); ++k) {
      const double target = (k == labels[static_cast<std::size_t>(i)] ? 1.0 - smoothing : 0.0) + smoothing / c;
      l -= target * std::log(probs(i, k) + kLogEpsilon);
    }
    num += weights[static_cast<std::size_t>(i)] * l;
    den += weights[static_cast<std::size_t>(i)];
  }
  return num / den;
}

using Gradients = std::vector<Matrix>;

/// Analytic gradients of the smoothed weighted loss for every trainable
/// tensor, from a train-mode forward cache of the same batch.
inline Gradients backward(const ModelState& model, const ForwardCache& cache, std::span<const int> labels,
                          std::span<const double> weights) {
  detail::check_batch(cache.probs, labels, weights);
  const auto b = cache.probs.rows();
  const double s = model.config.label_smoothing;
  const double wsum = std::accumulate(weights.begin(), weights.end(), 0.0);

  Matrix d(b, static_cast<Eigen::Index>(model.output_width()));
  const auto n_cls = cache.probs.cols();
  for (Eigen::Index i = 0; i < b; ++i) {
    const double scale = weights[static_cast<std::size_t>(i)] / wsum;
    const int y = labels[static_cast<std::size_t>(i)];
    if (model.config.kind == ModelKind::logreg) {
      const double target1 = (y == 1 ? 1.0 - s : 0.0) + s / 2.0;
      d(i, 0) = scale * (cache.probs(i, 1) - target1);
    } else {
      for (Eigen::Index k = 0; k < n_cls; ++k) {
        const double target = (k == y ? 1.0 - s : 0.0) + s / static_cast<double>(n_cls);
        d(i, k) = scale * (cache.probs(i, k) - target);
      }
    }
  }

  Gradients grads;
  grads.reserve(model.params.size());
  for (const auto& p : model.params) grads.push_back(Matrix::Zero(p.rows(), p.cols()));

  std::vector<Matrix> skip_grads;
  for (std::size_t k = model.ops.size(); k-- > 0;) {
    const OpCache& oc = cache.ops[k];
    std::visit(
        [&](const auto& op) {
          using T = std::decay_t<decltype(op)>;
          if constexpr (std::is_same_v<T, DenseOp>) {
            grads[op.weight].noalias() += oc.input.transpose() * d;
            grads[op.bias] += d.colwise().sum();
            if (k > 0) d = d * model.params[op.weight].transpose();
          } else if constexpr (std::is_same_v<T, ReluOp>) {
            d = d.cwiseProduct((oc.input.array() > 0.0).cast<double>().matrix());
          } else if constexpr (std::is_same_v<T, BatchNormOp>) {
            const Matrix& xhat = oc.aux;
            grads[op.gamma] += d.cwiseProduct(xhat).colwise().sum();
            grads[op.beta] += d.colwise().sum();
            const Matrix dxhat = (d.array().rowwise() * model.params[op.gamma].row(0).array()).matrix();
            const RowVector sum_dxhat = dxhat.colwise().sum();
            const RowVector sum_dxhat_xhat = dxhat.cwiseProduct(xhat).colwise().sum();
            const auto n = static_cast<double>(xhat.rows());
            d = (((n * dxhat).rowwise() - sum_dxhat).array() - xhat.array().rowwise() * sum_dxhat_xhat.array())
                    .rowwise() *
                (oc.inv_std.array() / n);
          } else if constexpr (std::is_same_v<T, DropoutOp>) {
            if (oc.aux.size() > 0) d = d.cwiseProduct(oc.aux);
          } else if constexpr (std::is_same_v<T, SkipAddOp>) {
            skip_grads.push_back(d);
          } else if constexpr (std::is_same_v<T, SkipSaveOp>) {
            if (skip_grads.empty()) throw InvariantError("unbalanced skip connection in backward");
            d += skip_grads.back();
            skip_grads.pop_back();
          }
        },
        model.ops[k]);
  }
  return grads;
}

// ---------------------------------------------------------------------------
// Optimization

/// eta_min + (eta_0 - eta_min)(1 + cos(pi t / T)) / 2; T = 0 gives eta_0.
inline double cosine_lr(std::size_t step, std::size_t total, double lr0, double lr_min = 0.0) {
  if (total == 0) return lr0;
  const double t = static_cast<double>(std::min(step, total));
  return lr_min + 0.5 * (lr0 - lr_min) * (1.0 + std::cos(std::numbers::pi * t / static_cast<double>(total)));
}

struct OptimizerState {
  AdamConfig adam;
  std::vector<Matrix> m;
  std::vector<Matrix> v;
  std::size_t step = 0;
  double lr0 = 1e-3;
  double lr_min = 0.0;
  std::size_t total_steps = 0;

  double current_lr() const { return cosine_lr(step, total_steps, lr0, lr_min); }
};

inline OptimizerState make_optimizer(const ModelState& model, std::size_t total_steps) {
  OptimizerState o;
  o.adam = model.config.adam;
  o.lr0 = model.config.learning_rate;
  o.lr_min = model.config.min_learning_rate;
  o.total_steps = total_steps;
  for (const auto& p : model.params) {
    o.m.push_back(Matrix::Zero(p.rows(), p.cols()));
    o.v.push_back(Matrix::Zero(p.rows(), p.cols()));
  }
  return o;
}

/// Bias-corrected Adam update at the scheduled learning rate of the current step.
inline void adam_step(OptimizerState& opt, ModelState& model, const Gradients& grads) {
  if (grads.size() != model.params.size() || opt.m.size() != model.params.size())
    throw InvariantError("gradient/optimizer shapes do not match the model");
  const double lr = opt.current_lr();
  ++opt.step;
  const auto t = static_cast<double>(opt.step);
  const double c1 = 1.0 - std::pow(opt.adam.beta1, t);
  const double c2 = 1.0 - std::pow(opt.adam.beta2, t);
  for (std::size_t k = 0; k < model.params.size(); ++k) {
    const Matrix& g = grads[k];
    if (g.rows() != model.params[k].rows() || g.cols() != model.params[k].cols())
      throw InvariantError("gradient shape mismatch for " + model.param_names[k]);
    opt.m[k] = opt.adam.beta1 * opt.m[k] + (1.0 - opt.adam.beta1) * g;
    opt.v[k] = opt.adam.beta2 * opt.v[k] + (1.0 - opt.adam.beta2) * g.cwiseProduct(g);
    model.params[k].array() -=
        lr * (opt.m[k].array() / c1) / ((opt.v[k].array() / c2).sqrt() + opt.adam.epsilon);
  }
}

struct EpochStat {
  std::size_t epoch = 0;  // 1-based
  double mean_loss = 0.0;
  double lr = 0.0;  // learning rate at the first step of the epoch
};

struct TrainResult {
  std::vector<EpochStat> trace;
};

inline Matrix gather_rows(const Matrix& x, std::span<const std::size_t> rows) {
  Matrix out(static_cast<Eigen::Index>(rows.size()), x.cols());
  for (std::size_t i = 0; i < rows.size(); ++i) out.row(static_cast<Eigen::Index>(i)) = x.row(static_cast<Eigen::Index>(rows[i]));
  return out;
}

/// Mini-batch training: a seeded shuffle per epoch, every batch carrying its
/// samples' weights, one Adam step per batch on a per-step cosine schedule.
inline TrainResult train(ModelState& model, const Matrix& x, std::span<const int> labels,
                         std::span<const double> weights, Rng& rng) {
  const auto n = static_cast<std::size_t>(x.rows());
  if (labels.size() != n || weights.size() != n) throw SchemaError("train: labels/weights must match rows");
  TrainResult result;
  if (n == 0 || model.config.epochs == 0) return result;
  const std::size_t bs = model.config.batch_size;
  const std::size_t steps_per_epoch = (n + bs - 1) / bs;
  OptimizerState opt = make_optimizer(model, steps_per_epoch * model.config.epochs);

  std::vector<std::size_t> order(n);
  std::iota(order.begin(), order.end(), std::size_t{0});
  std::vector<int> by;
  std::vector<double> bw;
  ForwardCache cache;
  for (std::size_t epoch = 1; epoch <= model.config.epochs; ++epoch) {
    rng.shuffle(order.begin(), order.end());
    EpochStat stat{epoch, 0.0, opt.current_lr()};
    for (std::size_t start = 0; start < n; start += bs) {
      const std::span<const std::size_t> idx(order.data() + start, std::min(bs, n - start));
      const Matrix xb = gather_rows(x, idx);
      by.clear();
      bw.clear();
      for (auto i : idx) {
        by.push_back(labels[i]);
        bw.push_back(weights[i]);
      }
      const Matrix probs = forward(model, xb, Mode::train, &rng, &cache);
      stat.mean_loss += smoothed_weighted_loss(probs, by, bw, model.config.label_smoothing);
      adam_step(opt, model, backward(model, cache, by, bw));
    }
    stat.mean_loss /= static_cast<double>(steps_per_epoch);
    result.trace.push_back(stat);
  }
  return result;
}

struct Prediction {
  Matrix probs;
  std::vector<int> labels;
};

/// Argmax with ties going to the lowest class index.
inline std::vector<int> argmax_rows(const Matrix& probs) {
  std::vector<int> out(static_cast<std::size_t>(probs.rows()));
  for (Eigen::Index i = 0; i < probs.rows(); ++i) {
    Eigen::Index best = 0;
    for (Eigen::Index k = 1; k < probs.cols(); ++k)
      if (probs(i, k) > probs(i, best)) best = k;
    out[static_cast<std::size_t>(i)] = static_cast<int>(best);
  }
  return out;
}

inline Prediction predict(const ModelState& model, const Matrix& x, std::size_t chunk = 256) {
  Prediction p;
  p.probs.resize(x.rows(), static_cast<Eigen::Index>(model.config.num_classes));
  for (Eigen::Index start = 0; start < x.rows(); start += static_cast<Eigen::Index>(chunk)) {
    const Eigen::Index len = std::min<Eigen::Index>(static_cast<Eigen::Index>(chunk), x.rows() - start);
    p.probs.middleRows(start, len) = forward_infer(model, x.middleRows(start, len));
  }
  p.labels = argmax_rows(p.probs);
  return p;
}

// ---------------------------------------------------------------------------
// Checkpoint: "TLNN", u32 version, u32 config length, config JSON bytes,
// u64 value count, float64 values (params then buffers, declaration order).

inline constexpr std::uint32_t kCheckpointVersion = 1;

inline void save_checkpoint(std::ostream& out, const ModelState& model) {
  auto put = [&](std::uint64_t v, int bytes) {
    for (int i = 0; i < bytes; ++i) out.put(static_cast<char>((v >> (8 * i)) & 0xff));
  };
  out.write("TLNN", 4);
  put(kCheckpointVersion, 4);
  const std::string cfg = to_json(model.config).dump();
  put(cfg.size(), 4);
  out.write(cfg.data(), static_cast<std::streamsize>(cfg.size()));
  put(model.parameter_count(), 8);
  auto dump = [&](const std::vector<Matrix>& tensors) {
    for (const auto& t : tensors)
      for (Eigen::Index c = 0; c < t.cols(); ++c)
        for (Eigen::Index r = 0; r < t.rows(); ++r) put(std::bit_cast<std::uint64_t>(t(r, c)), 8);
  };
  dump(model.params);
  dump(model.buffers);
  if (!out) throw FormatError("failed writing checkpoint");
}

inline ModelState load_checkpoint(std::istream& in) {
  auto get = [&](int bytes) {
    std::uint64_t v = 0;
    for (int i = 0; i < bytes; ++i) {
      const int c = in.get();
      if (c == std::char_traits<char>::eof()) throw FormatError("checkpoint truncated");
      v |= static_cast<std::uint64_t>(static_cast<unsigned char>(c)) << (8 * i);
    }
    return v;
  };
  char magic[4];
  if (!in.read(magic, 4) || std::string_view(magic, 4) != "TLNN") throw FormatError("checkpoint has bad magic");
  if (const auto v = get(4); v != kCheckpointVersion) throw FormatError("unsupported checkpoint version " + std::to_string(v));
  std::string cfg(get(4), '\0');
  if (!in.read(cfg.data(), static_cast<std::streamsize>(cfg.size()))) throw FormatError("checkpoint truncated");
  ModelConfig config;
  try {
    config = model_config_from_json(nlohmann::json::parse(cfg));
  } catch (const nlohmann::json::exception& e) {
    throw FormatError(std::string("checkpoint config unreadable: ") + e.what());
  }
  ModelState m = build(config, 0);
  if (get(8) != m.parameter_count()) throw FormatError("checkpoint parameter count does not match config");
  auto load = [&](std::vector<Matrix>& tensors) {
    for (auto& t : tensors)
      for (Eigen::Index c = 0; c < t.cols(); ++c)
        for (Eigen::Index r = 0; r < t.rows(); ++r) t(r, c) = std::bit_cast<double>(get(8));
  };
  load(m.params);
  load(m.buffers);
  return m;
}

}  // namespace tlrl::nn
