#pragma once

// Dense-network core: forward pass, softmax, losses, analytic gradients,
// plain SGD and a finite-difference gradient oracle. Everything is double
// precision and single-threaded so results are reproducible bit-for-bit.

#include <algorithm>
#include <array>
#include <cmath>
#include <cstddef>
#include <cstdint>
#include <optional>
#include <random>
#include <span>
#include <string>
#include <string_view>
#include <utility>
#include <vector>

#include "fdla/error.hpp"

namespace fdla {

using Rng = std::mt19937_64;
using Vector = std::vector<double>;

/// One sample's class-probability (or poisoned) vector.
using ConfidenceVector = std::vector<double>;

/// Distillation target for one sample; empty when the server has nothing to offer.
using TeacherTarget = std::optional<ConfidenceVector>;

class Matrix {
 public:
  Matrix() = default;
  Matrix(std::size_t rows, std::size_t cols, double fill = 0.0)
      : rows_(rows), cols_(cols), data_(rows * cols, fill) {}
  Matrix(std::size_t rows, std::size_t cols, std::vector<double> data)
      : rows_(rows), cols_(cols), data_(std::move(data)) {
    if (data_.size() != rows_ * cols_) {
      throw InputError("matrix data length " + std::to_string(data_.size()) +
                       " does not match " + std::to_string(rows_) + "x" +
                       std::to_string(cols_));
    }
  }

  std::size_t rows() const noexcept { return rows_; }
  std::size_t cols() const noexcept { return cols_; }
  std::size_t size() const noexcept { return data_.size(); }
  bool empty() const noexcept { return data_.empty(); }

  double& operator()(std::size_t r, std::size_t c) { return data_[r * cols_ + c]; }
  double operator()(std::size_t r, std::size_t c) const { return data_[r * cols_ + c]; }

  std::span<double> row(std::size_t r) { return {data_.data() + r * cols_, cols_}; }
  std::span<const double> row(std::size_t r) const { return {data_.data() + r * cols_, cols_}; }

  std::span<double> values() noexcept { return data_; }
  std::span<const double> values() const noexcept { return data_; }

  bool all_finite() const {
    return std::all_of(data_.begin(), data_.end(), [](double v) { return std::isfinite(v); });
  }

  bool operator==(const Matrix&) const = default;

 private:
  std::size_t rows_ = 0;
  std::size_t cols_ = 0;
  std::vector<double> data_;
};

/// Gathers the given rows of `source` into a new matrix.
inline Matrix select_rows(const Matrix& source, std::span<const std::size_t> rows) {
  Matrix out(rows.size(), source.cols());
  for (std::size_t i = 0; i < rows.size(); ++i) {
    auto src = source.row(rows[i]);
    std::copy(src.begin(), src.end(), out.row(i).begin());
  }
  return out;
}

enum class Activation { identity, relu };

/// Fully connected layer; `weight` is (out x in), row-major.
struct Layer {
  Matrix weight;
  Vector bias;
  Activation activation = Activation::identity;

  std::size_t in_dim() const noexcept { return weight.cols(); }
  std::size_t out_dim() const noexcept { return weight.rows(); }

  bool operator==(const Layer&) const = default;
};

enum class Arch { A1, A2, A3 };

inline std::string_view to_string(Arch arch) {
  switch (arch) {
    case Arch::A1: return "A1";
    case Arch::A2: return "A2";
    case Arch::A3: return "A3";
  }
  return "?";
}

inline Arch parse_arch(std::string_view name) {
  if (name == "A1") return Arch::A1;
  if (name == "A2") return Arch::A2;
  if (name == "A3") return Arch::A3;
  throw ConfigError("unknown architecture id '" + std::string(name) + "' (expected A1|A2|A3)");
}

/// Hidden-layer widths of each architecture profile.
inline std::vector<std::size_t> hidden_widths(Arch arch) {
  switch (arch) {
    case Arch::A1: return {64};
    case Arch::A2: return {128, 64};
    case Arch::A3: return {256, 128};
  }
  throw ConfigError("unknown architecture id");
}

/// Client i gets A_{(i mod 3) + 1} with heterogeneous models, A1 otherwise.
inline Arch arch_for_client(std::size_t client_index, bool heterogeneous) {
  if (!heterogeneous) return Arch::A1;
  static constexpr std::array<Arch, 3> kCycle{Arch::A1, Arch::A2, Arch::A3};
  return kCycle[client_index % 3];
}

struct DenseNet {
  Arch arch = Arch::A1;
  std::vector<Layer> layers;

  std::size_t input_dim() const { return layers.empty() ? 0 : layers.front().in_dim(); }
  std::size_t output_dim() const { return layers.empty() ? 0 : layers.back().out_dim(); }

  std::size_t parameter_count() const {
    std::size_t total = 0;
    for (const auto& layer : layers) total += layer.weight.size() + layer.bias.size();
    return total;
  }

  bool operator==(const DenseNet&) const = default;
};

/// Throws ConfigError unless the layer shapes chain from input to output.
inline void validate(const DenseNet& net) {
  if (net.layers.empty()) throw ConfigError("network has no layers");
  for (std::size_t l = 0; l < net.layers.size(); ++l) {
    const auto& layer = net.layers[l];
    if (layer.bias.size() != layer.out_dim()) {
      throw ConfigError("layer " + std::to_string(l) + ": bias length does not match width");
    }
    if (l > 0 && net.layers[l - 1].out_dim() != layer.in_dim()) {
      throw ConfigError("layer " + std::to_string(l) + ": input width " +
                        std::to_string(layer.in_dim()) + " does not chain from " +
                        std::to_string(net.layers[l - 1].out_dim()));
    }
  }
}

/// Builds a freshly initialized network. He-normal weights, zero biases;
/// identical seeds give bitwise-identical parameters.
inline DenseNet make_model(Arch arch, std::size_t input_dim, std::size_t n_classes,
                           std::uint64_t init_seed) {
  if (input_dim == 0 || n_classes == 0) {
    throw ConfigError("make_model: input_dim and n_classes must be positive");
  }
  std::vector<std::size_t> widths{input_dim};
  for (auto w : hidden_widths(arch)) widths.push_back(w);
  widths.push_back(n_classes);

  Rng rng(init_seed);
  DenseNet net;
  net.arch = arch;
  for (std::size_t l = 0; l + 1 < widths.size(); ++l) {
    const std::size_t fan_in = widths[l];
    const std::size_t fan_out = widths[l + 1];
    const bool is_head = l + 2 == widths.size();
    std::normal_distribution<double> init(
        0.0, std::sqrt((is_head ? 1.0 : 2.0) / static_cast<double>(fan_in)));
    Layer layer{Matrix(fan_out, fan_in), Vector(fan_out, 0.0),
                is_head ? Activation::identity : Activation::relu};
    for (double& w : layer.weight.values()) w = init(rng);
    net.layers.push_back(std::move(layer));
  }
  return net;
}

namespace detail {

// Input to each layer plus the final output; pre-activations kept for ReLU masks.
struct ForwardTrace {
  std::vector<Matrix> inputs;
  std::vector<Matrix> pre_activations;
  Matrix output;
};

inline Matrix affine(const Layer& layer, const Matrix& in) {
  Matrix out(in.rows(), layer.out_dim());
  for (std::size_t b = 0; b < in.rows(); ++b) {
    auto x = in.row(b);
    auto y = out.row(b);
    for (std::size_t o = 0; o < layer.out_dim(); ++o) {
      auto w = layer.weight.row(o);
      double acc = layer.bias[o];
      for (std::size_t i = 0; i < x.size(); ++i) acc += w[i] * x[i];
      y[o] = acc;
    }
  }
  return out;
}

inline Matrix activate(Matrix m, Activation act) {
  if (act == Activation::relu) {
    for (double& v : m.values()) v = v > 0.0 ? v : 0.0;
  }
  return m;
}

inline void check_input(const DenseNet& net, const Matrix& batch) {
  validate(net);
  if (batch.cols() != net.input_dim()) {
    throw ConfigError("forward: batch has " + std::to_string(batch.cols()) +
                      " columns, network expects " + std::to_string(net.input_dim()));
  }
}

inline ForwardTrace forward_trace(const DenseNet& net, const Matrix& batch) {
  check_input(net, batch);
  ForwardTrace trace;
  Matrix current = batch;
  for (const auto& layer : net.layers) {
    trace.inputs.push_back(current);
    Matrix pre = affine(layer, current);
    current = activate(pre, layer.activation);
    trace.pre_activations.push_back(std::move(pre));
  }
  trace.output = std::move(current);
  return trace;
}

inline double log_sum_exp(std::span<const double> v, double scale = 1.0) {
  double hi = -INFINITY;
  for (double x : v) hi = std::max(hi, x * scale);
  double acc = 0.0;
  for (double x : v) acc += std::exp(x * scale - hi);
  return hi + std::log(acc);
}

}  // namespace detail

/// Logits, one row per sample.
inline Matrix forward(const DenseNet& net, const Matrix& batch) {
  return detail::forward_trace(net, batch).output;
}

inline ConfidenceVector softmax(std::span<const double> logits) {
  if (logits.empty()) throw InputError("softmax of an empty vector");
  for (double v : logits) {
    if (!std::isfinite(v)) throw NumericError("softmax: non-finite logit");
  }
  const double hi = *std::max_element(logits.begin(), logits.end());
  ConfidenceVector out(logits.size());
  double sum = 0.0;
  for (std::size_t i = 0; i < logits.size(); ++i) {
    out[i] = std::exp(logits[i] - hi);
    sum += out[i];
  }
  for (double& v : out) v /= sum;
  return out;
}

/// Row-wise softmax of a logit matrix.
inline Matrix softmax_rows(const Matrix& logits) {
  Matrix out(logits.rows(), logits.cols());
  for (std::size_t r = 0; r < logits.rows(); ++r) {
    auto p = softmax(logits.row(r));
    std::copy(p.begin(), p.end(), out.row(r).begin());
  }
  return out;
}

inline constexpr double kProbabilityFloor = 1e-12;

inline double cross_entropy(std::span<const double> probs, std::size_t label) {
  if (label >= probs.size()) {
    throw InputError("cross_entropy: label " + std::to_string(label) + " out of range for " +
                     std::to_string(probs.size()) + " classes");
  }
  return -std::log(std::max(probs[label], kProbabilityFloor));
}

struct NormalizedTeacher {
  ConfidenceVector values;
  bool adjusted = false;  // true when the input did not already sum to 1
};

/// Makes a teacher vector a distribution: divide by the sum when it exceeds
/// 1e-9, otherwise fall back to uniform. Poisoned uploads land here.
inline NormalizedTeacher normalize_teacher(std::span<const double> teacher) {
  if (teacher.empty()) throw InputError("teacher vector is empty");
  double sum = 0.0;
  for (double v : teacher) {
    if (!std::isfinite(v) || v < 0.0) {
      throw InputError("teacher vector entries must be finite and non-negative");
    }
    sum += v;
  }
  NormalizedTeacher out;
  out.values.assign(teacher.begin(), teacher.end());
  if (sum > 1e-9) {
    out.adjusted = std::abs(sum - 1.0) > 1e-9;
    if (out.adjusted) {
      for (double& v : out.values) v /= sum;
    }
  } else {
    out.adjusted = true;
    std::fill(out.values.begin(), out.values.end(), 1.0 / static_cast<double>(teacher.size()));
  }
  return out;
}

/// KL(teacher || softmax(student_logits / temperature)).
inline double kd_loss(std::span<const double> student_logits, std::span<const double> teacher,
                      double temperature) {
  if (!(temperature > 0.0)) throw ConfigError("kd_loss: temperature must be positive");
  if (student_logits.size() != teacher.size()) {
    throw InputError("kd_loss: student and teacher lengths differ");
  }
  const auto target = normalize_teacher(teacher);
  const double inv_t = 1.0 / temperature;
  const double lse = detail::log_sum_exp(student_logits, inv_t);
  double kl = 0.0;
  for (std::size_t i = 0; i < teacher.size(); ++i) {
    const double t = target.values[i];
    if (t > 0.0) kl += t * (std::log(t) - (student_logits[i] * inv_t - lse));
  }
  // Rounding can leave a tiny negative residue at the minimum.
  return std::max(kl, 0.0);
}

/// Terms of the local objective: ce + beta * kd.
struct LossBreakdown {
  double ce = 0.0;
  double kd = 0.0;
  double total = 0.0;
};

namespace detail {

inline void check_objective_args(const Matrix& batch, std::span<const std::size_t> labels,
                                 std::span<const TeacherTarget> teachers, double beta,
                                 double temperature) {
  if (batch.rows() == 0) throw InputError("objective: empty batch");
  if (labels.size() != batch.rows()) {
    throw InputError("objective: " + std::to_string(labels.size()) + " labels for " +
                     std::to_string(batch.rows()) + " rows");
  }
  if (!teachers.empty() && teachers.size() != batch.rows()) {
    throw InputError("objective: " + std::to_string(teachers.size()) + " teacher targets for " +
                     std::to_string(batch.rows()) + " rows");
  }
  if (!(beta >= 0.0)) throw ConfigError("objective: beta must be non-negative");
  if (!(temperature > 0.0)) throw ConfigError("objective: temperature must be positive");
}

inline LossBreakdown objective_from_logits(const Matrix& logits,
                                           std::span<const std::size_t> labels,
                                           std::span<const TeacherTarget> teachers, double beta,
                                           double temperature) {
  LossBreakdown loss;
  std::size_t with_target = 0;
  for (std::size_t b = 0; b < logits.rows(); ++b) {
    loss.ce += cross_entropy(softmax(logits.row(b)), labels[b]);
    if (!teachers.empty() && teachers[b]) {
      loss.kd += kd_loss(logits.row(b), *teachers[b], temperature);
      ++with_target;
    }
  }
  loss.ce /= static_cast<double>(logits.rows());
  if (with_target > 0) loss.kd /= static_cast<double>(with_target);
  loss.total = loss.ce + beta * loss.kd;
  return loss;
}

}  // namespace detail

/// Mean cross-entropy plus beta times the mean distillation loss over the
/// rows that carry a teacher target. An empty `teachers` span means none do.
inline LossBreakdown local_objective(const DenseNet& net, const Matrix& batch,
                                     std::span<const std::size_t> labels,
                                     std::span<const TeacherTarget> teachers, double beta,
                                     double temperature) {
  detail::check_objective_args(batch, labels, teachers, beta, temperature);
  return detail::objective_from_logits(forward(net, batch), labels, teachers, beta, temperature);
}

/// Per-layer parameter gradient, shaped like the network.
struct Gradient {
  std::vector<Matrix> weight;
  std::vector<Vector> bias;
};

struct ObjectiveEvaluation {
  LossBreakdown loss;
  Gradient gradient;
};

/// Analytic gradient of `local_objective` by backpropagation.
inline ObjectiveEvaluation objective_gradient(const DenseNet& net, const Matrix& batch,
                                              std::span<const std::size_t> labels,
                                              std::span<const TeacherTarget> teachers,
                                              double beta, double temperature) {
  detail::check_objective_args(batch, labels, teachers, beta, temperature);
  auto trace = detail::forward_trace(net, batch);
  const Matrix& logits = trace.output;
  const std::size_t rows = logits.rows();
  const std::size_t classes = logits.cols();

  ObjectiveEvaluation eval;
  eval.loss = detail::objective_from_logits(logits, labels, teachers, beta, temperature);

  std::size_t with_target = 0;
  for (const auto& t : teachers) with_target += t.has_value() ? 1 : 0;

  // d total / d logits
  Matrix delta(rows, classes);
  const double ce_scale = 1.0 / static_cast<double>(rows);
  const double kd_scale =
      with_target > 0 ? beta / (temperature * static_cast<double>(with_target)) : 0.0;
  for (std::size_t b = 0; b < rows; ++b) {
    auto p = softmax(logits.row(b));
    auto d = delta.row(b);
    for (std::size_t c = 0; c < classes; ++c) d[c] = ce_scale * p[c];
    d[labels[b]] -= ce_scale;
    if (!teachers.empty() && teachers[b]) {
      const auto target = normalize_teacher(*teachers[b]);
      Vector scaled(logits.row(b).begin(), logits.row(b).end());
      for (double& v : scaled) v /= temperature;
      auto s = softmax(scaled);
      for (std::size_t c = 0; c < classes; ++c) d[c] += kd_scale * (s[c] - target.values[c]);
    }
  }

  const std::size_t depth = net.layers.size();
  eval.gradient.weight.resize(depth);
  eval.gradient.bias.resize(depth);
  for (std::size_t l = depth; l-- > 0;) {
    const Layer& layer = net.layers[l];
    const Matrix& input = trace.inputs[l];
    Matrix dw(layer.out_dim(), layer.in_dim());
    Vector db(layer.out_dim(), 0.0);
    for (std::size_t b = 0; b < rows; ++b) {
      auto d = delta.row(b);
      auto x = input.row(b);
      for (std::size_t o = 0; o < layer.out_dim(); ++o) {
        if (d[o] == 0.0) continue;
        db[o] += d[o];
        auto g = dw.row(o);
        for (std::size_t i = 0; i < x.size(); ++i) g[i] += d[o] * x[i];
      }
    }
    if (l > 0) {
      Matrix prev(rows, layer.in_dim());
      const Matrix& prev_pre = trace.pre_activations[l - 1];
      const bool relu = net.layers[l - 1].activation == Activation::relu;
      for (std::size_t b = 0; b < rows; ++b) {
        auto d = delta.row(b);
        auto out = prev.row(b);
        for (std::size_t o = 0; o < layer.out_dim(); ++o) {
          if (d[o] == 0.0) continue;
          auto w = layer.weight.row(o);
          for (std::size_t i = 0; i < out.size(); ++i) out[i] += d[o] * w[i];
        }
        if (relu) {
          for (std::size_t i = 0; i < out.size(); ++i) {
            if (prev_pre(b, i) <= 0.0) out[i] = 0.0;
          }
        }
      }
      delta = std::move(prev);
    }
    eval.gradient.weight[l] = std::move(dw);
    eval.gradient.bias[l] = std::move(db);
  }
  return eval;
}

/// params -= lr * gradient. A negative lr walks the step back exactly.
inline void apply_gradient(DenseNet& net, const Gradient& gradient, double lr) {
  if (gradient.weight.size() != net.layers.size() || gradient.bias.size() != net.layers.size()) {
    throw InputError("apply_gradient: gradient does not match network depth");
  }
  for (std::size_t l = 0; l < net.layers.size(); ++l) {
    auto w = net.layers[l].weight.values();
    auto g = gradient.weight[l].values();
    if (g.size() != w.size() || gradient.bias[l].size() != net.layers[l].bias.size()) {
      throw InputError("apply_gradient: gradient shape mismatch at layer " + std::to_string(l));
    }
    for (std::size_t i = 0; i < w.size(); ++i) w[i] -= lr * g[i];
    auto& bias = net.layers[l].bias;
    for (std::size_t i = 0; i < bias.size(); ++i) bias[i] -= lr * gradient.bias[l][i];
  }
}

inline bool all_finite(const DenseNet& net) {
  for (const auto& layer : net.layers) {
    if (!layer.weight.all_finite()) return false;
    for (double b : layer.bias) {
      if (!std::isfinite(b)) return false;
    }
  }
  return true;
}

/// One SGD step on the local objective. Throws NumericError when the loss,
/// the gradient or the updated parameters stop being finite.
inline DenseNet backward_and_step(DenseNet net, const Matrix& batch,
                                  std::span<const std::size_t> labels,
                                  std::span<const TeacherTarget> teachers, double beta,
                                  double temperature, double lr) {
  if (!(lr >= 0.0) || !std::isfinite(lr)) {
    throw ConfigError("backward_and_step: learning rate must be a finite non-negative value");
  }
  auto eval = objective_gradient(net, batch, labels, teachers, beta, temperature);
  if (!std::isfinite(eval.loss.total)) throw NumericError("objective is not finite");
  apply_gradient(net, eval.gradient, lr);
  if (!all_finite(net)) throw NumericError("parameters overflowed after SGD step");
  return net;
}

inline std::vector<double> flatten_parameters(const DenseNet& net) {
  std::vector<double> flat;
  flat.reserve(net.parameter_count());
  for (const auto& layer : net.layers) {
    auto w = layer.weight.values();
    flat.insert(flat.end(), w.begin(), w.end());
    flat.insert(flat.end(), layer.bias.begin(), layer.bias.end());
  }
  return flat;
}

inline void assign_parameters(DenseNet& net, std::span<const double> flat) {
  if (flat.size() != net.parameter_count()) {
    throw InputError("assign_parameters: expected " + std::to_string(net.parameter_count()) +
                     " values, got " + std::to_string(flat.size()));
  }
  std::size_t k = 0;
  for (auto& layer : net.layers) {
    for (double& w : layer.weight.values()) w = flat[k++];
    for (double& b : layer.bias) b = flat[k++];
  }
}

/// Flattened in the same order as flatten_parameters.
inline std::vector<double> flatten(const Gradient& gradient) {
  std::vector<double> flat;
  for (std::size_t l = 0; l < gradient.weight.size(); ++l) {
    auto w = gradient.weight[l].values();
    flat.insert(flat.end(), w.begin(), w.end());
    flat.insert(flat.end(), gradient.bias[l].begin(), gradient.bias[l].end());
  }
  return flat;
}

/// Central-difference estimate of the objective gradient, flattened.
/// Uses only `local_objective`, never the backprop path.
inline std::vector<double> finite_difference_gradient(const DenseNet& net, const Matrix& batch,
                                                      std::span<const std::size_t> labels,
                                                      std::span<const TeacherTarget> teachers,
                                                      double beta, double temperature,
                                                      double step = 1e-5) {
  auto params = flatten_parameters(net);
  std::vector<double> grad(params.size());
  DenseNet probe = net;
  for (std::size_t i = 0; i < params.size(); ++i) {
    const double saved = params[i];
    params[i] = saved + step;
    assign_parameters(probe, params);
    const double up = local_objective(probe, batch, labels, teachers, beta, temperature).total;
    params[i] = saved - step;
    assign_parameters(probe, params);
    const double down = local_objective(probe, batch, labels, teachers, beta, temperature).total;
    params[i] = saved;
    grad[i] = (up - down) / (2.0 * step);
  }
  return grad;
}

/// Index of the largest entry; ties resolve to the lowest index.
inline std::size_t argmax(std::span<const double> v) {
  std::size_t best = 0;
  for (std::size_t i = 1; i < v.size(); ++i) {
    if (v[i] > v[best]) best = i;
  }
  return best;
}

}  // namespace fdla
