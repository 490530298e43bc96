#pragma once

// f = h(g(x)) with a projection head p on top of g.
//
//   g: [linear -> batch norm -> relu] x blocks      (D -> H)
//   h: linear classifier                            (H -> C), frozen at test time
//   p: linear -> relu -> linear -> l2_normalize     (H -> H -> d)
//
// Batch-norm statistics and affine parameters are kept apart: at test time the
// layer normalizes with the current batch only, and gamma/beta are the only
// parameters of g that adaptation may touch.

#include <cmath>
#include <cstdint>
#include <random>
#include <string>
#include <vector>

#include "sata/errors.hpp"
#include "sata/params_io.hpp"
#include "sata/tensor.hpp"

namespace sata {

enum class ParamRole { BnAffine, Projection, Frozen };

inline const char* to_string(ParamRole role) {
  switch (role) {
    case ParamRole::BnAffine: return "bn-affine";
    case ParamRole::Projection: return "projection";
    case ParamRole::Frozen: return "frozen";
  }
  return "?";
}

struct NamedParam {
  std::string name;
  Tensor tensor;
  ParamRole role;
};

/// Which statistics batch norm normalizes with.
enum class BnMode {
  BatchStats,    // current batch only; running statistics are never read
  RunningStats,  // frozen source-training statistics
};

struct ModelDims {
  std::size_t input = 32;
  std::size_t hidden = 32;
  std::size_t classes = 10;
  std::size_t projection = 16;
  std::size_t blocks = 2;
};

struct Linear {
  Tensor weight;  // [in x out]
  Tensor bias;    // [out]

  Tensor operator()(const Tensor& x) const {
    if (x.rank() != 2 || x.cols() != weight.rows()) {
      throw DimensionError("linear: input " + shape_string(x.shape()) + " vs weight " +
                           shape_string(weight.shape()));
    }
    return matmul(x, weight) + bias;
  }

  static Linear init(std::size_t in, std::size_t out, std::mt19937_64& rng) {
    std::normal_distribution<double> dist(0.0, std::sqrt(2.0 / static_cast<double>(in)));
    std::vector<double> w(in * out);
    for (auto& v : w) v = dist(rng);
    return {Tensor::parameter({in, out}, std::move(w)),
            Tensor::parameter({out}, std::vector<double>(out, 0.0))};
  }
};

struct BatchNorm {
  static constexpr double kEps = 1e-5;

  Tensor gamma;  // [F]
  Tensor beta;   // [F]
  std::vector<double> running_mean;
  std::vector<double> running_var;
  double eps = kEps;

  static BatchNorm init(std::size_t features) {
    return {Tensor::parameter({features}, std::vector<double>(features, 1.0)),
            Tensor::parameter({features}, std::vector<double>(features, 0.0)),
            std::vector<double>(features, 0.0), std::vector<double>(features, 1.0), kEps};
  }

  std::size_t features() const { return gamma.size(); }
};

/// Population (1/N) batch mean and variance per column.
struct BatchMoments {
  std::vector<double> mean;
  std::vector<double> var;
};

inline BatchMoments batch_moments(const Tensor& x) {
  const std::size_t n = x.rows(), f = x.cols();
  BatchMoments m{std::vector<double>(f, 0.0), std::vector<double>(f, 0.0)};
  const auto v = x.data();
  for (std::size_t i = 0; i < n; ++i)
    for (std::size_t j = 0; j < f; ++j) m.mean[j] += v[i * f + j];
  for (auto& mu : m.mean) mu /= static_cast<double>(n);
  for (std::size_t i = 0; i < n; ++i)
    for (std::size_t j = 0; j < f; ++j) {
      const double d = v[i * f + j] - m.mean[j];
      m.var[j] += d * d;
    }
  for (auto& s : m.var) s /= static_cast<double>(n);
  return m;
}

/// Batch norm with statistics of this batch: gamma * (x - mu_B) / sqrt(var_B + eps) + beta.
/// Gradients reach gamma, beta and x.
inline Tensor bn_forward_test(const Tensor& x, const BatchNorm& layer) {
  if (x.rank() != 2 || x.cols() != layer.features()) {
    throw DimensionError("batch norm: input " + shape_string(x.shape()) + " vs " +
                         std::to_string(layer.features()) + " features");
  }
  if (x.rows() < 2) {
    throw BatchTooSmallError("batch norm needs at least 2 samples, got " +
                             std::to_string(x.rows()));
  }
  const std::size_t f = x.cols();
  // Shifting by a constant row leaves the statistics unchanged and makes a
  // constant column centre to exactly zero.
  const Tensor pivot = Tensor::constant({1, f}, {x.data().begin(), x.data().begin() + f});
  const Tensor shifted = x - pivot;
  const Tensor centred = shifted - mean(shifted, 0);
  const Tensor var = mean(centred * centred, 0);
  const Tensor normed = centred / sqrt(var + layer.eps);
  return normed * layer.gamma + layer.beta;
}

/// Batch norm with the stored source-training statistics.
inline Tensor bn_forward_running(const Tensor& x, const BatchNorm& layer) {
  const std::size_t f = layer.features();
  if (x.rank() != 2 || x.cols() != f) {
    throw DimensionError("batch norm: input " + shape_string(x.shape()) + " vs " +
                         std::to_string(f) + " features");
  }
  std::vector<double> inv(f);
  for (std::size_t j = 0; j < f; ++j) inv[j] = 1.0 / std::sqrt(layer.running_var[j] + layer.eps);
  const Tensor mu = Tensor::constant({1, f}, layer.running_mean);
  const Tensor is = Tensor::constant({1, f}, std::move(inv));
  return (x - mu) * is * layer.gamma + layer.beta;
}

class Model {
 public:
  Model() = default;

  /// Randomly initialized network; the projection head is drawn from its own
  /// seed so it can be re-drawn at deployment.
  static Model create(const ModelDims& dims, std::uint64_t seed) {
    if (dims.blocks == 0) throw ConfigError("model needs at least one feature block");
    Model m;
    m.dims_ = dims;
    std::mt19937_64 rng(seed);
    std::size_t in = dims.input;
    for (std::size_t b = 0; b < dims.blocks; ++b) {
      m.linears_.push_back(Linear::init(in, dims.hidden, rng));
      m.norms_.push_back(BatchNorm::init(dims.hidden));
      in = dims.hidden;
    }
    m.classifier_ = Linear::init(dims.hidden, dims.classes, rng);
    m.reset_projection(seed ^ 0x9e3779b97f4a7c15ull);
    return m;
  }

  void reset_projection(std::uint64_t seed) {
    std::mt19937_64 rng(seed);
    proj_hidden_ = Linear::init(dims_.hidden, dims_.hidden, rng);
    proj_out_ = Linear::init(dims_.hidden, dims_.projection, rng);
    if (adapting_) set_roles_for_adaptation();
  }

  const ModelDims& dims() const { return dims_; }
  BnMode bn_mode() const { return bn_mode_; }
  void set_bn_mode(BnMode mode) { bn_mode_ = mode; }

  const std::vector<Linear>& feature_linears() const { return linears_; }
  const std::vector<BatchNorm>& norms() const { return norms_; }
  std::vector<BatchNorm>& norms() { return norms_; }
  const Linear& classifier() const { return classifier_; }

  /// g(x) under the current batch-norm mode.
  Tensor forward_features(const Tensor& x) const { return forward_features(x, bn_mode_); }

  Tensor forward_features(const Tensor& x, BnMode mode) const {
    check_input(x);
    Tensor h = x;
    for (std::size_t b = 0; b < linears_.size(); ++b) {
      h = linears_[b](h);
      h = mode == BnMode::BatchStats ? bn_forward_test(h, norms_[b])
                                     : bn_forward_running(h, norms_[b]);
      h = relu(h);
    }
    return h;
  }

  /// g(x) with batch statistics, also folding them into the running
  /// statistics with the given momentum. Used while fitting the source model.
  Tensor forward_features_train(const Tensor& x, double momentum) {
    check_input(x);
    Tensor h = x;
    for (std::size_t b = 0; b < linears_.size(); ++b) {
      h = linears_[b](h);
      auto& bn = norms_[b];
      const BatchMoments m = batch_moments(h);
      for (std::size_t j = 0; j < bn.features(); ++j) {
        bn.running_mean[j] = (1.0 - momentum) * bn.running_mean[j] + momentum * m.mean[j];
        bn.running_var[j] = (1.0 - momentum) * bn.running_var[j] + momentum * m.var[j];
      }
      h = relu(bn_forward_test(h, bn));
    }
    return h;
  }

  /// Sets running statistics to the exact population statistics of `x`,
  /// layer by layer, each layer seeing inputs normalized with the statistics
  /// already collected below it.
  void collect_running_stats(const Tensor& x) {
    check_input(x);
    Tensor h = x.detach();
    for (std::size_t b = 0; b < linears_.size(); ++b) {
      h = linears_[b](h).detach();
      const BatchMoments m = batch_moments(h);
      norms_[b].running_mean = m.mean;
      norms_[b].running_var = m.var;
      h = relu(bn_forward_running(h, norms_[b])).detach();
    }
  }

  Tensor logits(const Tensor& features) const { return classifier_(features); }

  /// softmax(h(g(x))).
  Tensor predict(const Tensor& x) const { return predict(x, bn_mode_); }
  Tensor predict(const Tensor& x, BnMode mode) const {
    return softmax(logits(forward_features(x, mode)));
  }

  /// Unit-norm embedding of features.
  Tensor project(const Tensor& features) const {
    return l2_normalize(proj_out_(relu(proj_hidden_(features))));
  }

  /// Every learnable tensor with its partition label.
  std::vector<NamedParam> parameters() const {
    std::vector<NamedParam> out;
    for (std::size_t b = 0; b < linears_.size(); ++b) {
      const std::string prefix = "g." + std::to_string(b) + ".";
      out.push_back({prefix + "linear.weight", linears_[b].weight, ParamRole::Frozen});
      out.push_back({prefix + "linear.bias", linears_[b].bias, ParamRole::Frozen});
      out.push_back({prefix + "bn.gamma", norms_[b].gamma, ParamRole::BnAffine});
      out.push_back({prefix + "bn.beta", norms_[b].beta, ParamRole::BnAffine});
    }
    out.push_back({"h.weight", classifier_.weight, ParamRole::Frozen});
    out.push_back({"h.bias", classifier_.bias, ParamRole::Frozen});
    out.push_back({"p.0.weight", proj_hidden_.weight, ParamRole::Projection});
    out.push_back({"p.0.bias", proj_hidden_.bias, ParamRole::Projection});
    out.push_back({"p.1.weight", proj_out_.weight, ParamRole::Projection});
    out.push_back({"p.1.bias", proj_out_.bias, ParamRole::Projection});
    return out;
  }

  std::vector<Tensor> params_with_role(ParamRole role) const {
    std::vector<Tensor> out;
    for (auto& p : parameters())
      if (p.role == role) out.push_back(p.tensor);
    return out;
  }

  /// BN gamma/beta of g followed by every projection-head tensor.
  std::vector<Tensor> trainable_params() const {
    auto out = params_with_role(ParamRole::BnAffine);
    for (auto& t : params_with_role(ParamRole::Projection)) out.push_back(t);
    return out;
  }

  std::size_t trainable_count() const {
    std::size_t n = 0;
    for (auto& t : trainable_params()) n += t.size();
    return n;
  }

  std::size_t parameter_count() const {
    std::size_t n = 0;
    for (auto& p : parameters()) n += p.tensor.size();
    return n;
  }

  /// Adaptation partition: BN affine and projection differentiable, the rest constant.
  void set_roles_for_adaptation() {
    adapting_ = true;
    for (auto& p : parameters()) p.tensor.set_requires_grad(p.role != ParamRole::Frozen);
  }

  /// Source fitting: g and h differentiable, projection head untouched.
  void set_roles_for_source_training() {
    adapting_ = false;
    for (auto& p : parameters()) p.tensor.set_requires_grad(p.role != ParamRole::Projection);
  }

  void freeze_all() {
    adapting_ = false;
    for (auto& p : parameters()) p.tensor.set_requires_grad(false);
  }

  /// Deep copy with fresh, non-differentiable leaves.
  Model clone() const {
    Model m = *this;
    auto copy = [](Linear& l) {
      l.weight = l.weight.clone();
      l.bias = l.bias.clone();
    };
    for (auto& l : m.linears_) copy(l);
    for (auto& n : m.norms_) {
      n.gamma = n.gamma.clone();
      n.beta = n.beta.clone();
    }
    copy(m.classifier_);
    copy(m.proj_hidden_);
    copy(m.proj_out_);
    m.adapting_ = false;
    return m;
  }

  /// Parameters and batch-norm running statistics as a flat map.
  ParamMap to_param_map() const {
    ParamMap out;
    for (auto& p : parameters()) {
      out[p.name] = {p.tensor.shape(), {p.tensor.data().begin(), p.tensor.data().end()}};
    }
    for (std::size_t b = 0; b < norms_.size(); ++b) {
      const std::string prefix = "g." + std::to_string(b) + ".bn.";
      const std::size_t f = norms_[b].features();
      out[prefix + "running_mean"] = {{f}, norms_[b].running_mean};
      out[prefix + "running_var"] = {{f}, norms_[b].running_var};
    }
    return out;
  }

  static Model from_param_map(const ParamMap& params) {
    ModelDims dims;
    dims.blocks = 0;
    while (params.count("g." + std::to_string(dims.blocks) + ".linear.weight")) ++dims.blocks;
    if (dims.blocks == 0) throw ConfigError("params: no feature blocks found");
    const auto& w0 = require_entry(params, "g.0.linear.weight");
    const auto& hw = require_entry(params, "h.weight");
    const auto& pw = require_entry(params, "p.1.weight");
    if (w0.shape.size() != 2 || hw.shape.size() != 2 || pw.shape.size() != 2) {
      throw ConfigError("params: weight tensors must be rank 2");
    }
    dims.input = w0.shape[0];
    dims.hidden = w0.shape[1];
    dims.classes = hw.shape[1];
    dims.projection = pw.shape[1];

    Model m = create(dims, 0);
    auto fill = [&params](Tensor& t, const std::string& key) {
      const auto& e = require_entry(params, key);
      if (e.shape != t.shape()) {
        throw ConfigError("params: '" + key + "' has shape " + shape_string(e.shape) +
                          ", expected " + shape_string(t.shape()));
      }
      t = Tensor::parameter(e.shape, e.values);
    };
    auto fill_vec = [&params](std::vector<double>& v, const std::string& key) {
      const auto& e = require_entry(params, key);
      if (e.values.size() != v.size()) throw ConfigError("params: bad extent for '" + key + "'");
      v = e.values;
    };
    for (std::size_t b = 0; b < dims.blocks; ++b) {
      const std::string prefix = "g." + std::to_string(b) + ".";
      fill(m.linears_[b].weight, prefix + "linear.weight");
      fill(m.linears_[b].bias, prefix + "linear.bias");
      fill(m.norms_[b].gamma, prefix + "bn.gamma");
      fill(m.norms_[b].beta, prefix + "bn.beta");
      fill_vec(m.norms_[b].running_mean, prefix + "bn.running_mean");
      fill_vec(m.norms_[b].running_var, prefix + "bn.running_var");
    }
    fill(m.classifier_.weight, "h.weight");
    fill(m.classifier_.bias, "h.bias");
    fill(m.proj_hidden_.weight, "p.0.weight");
    fill(m.proj_hidden_.bias, "p.0.bias");
    fill(m.proj_out_.weight, "p.1.weight");
    fill(m.proj_out_.bias, "p.1.bias");
    return m;
  }

  std::uint64_t checksum() const { return sata::checksum(to_param_map()); }

 private:
  void check_input(const Tensor& x) const {
    if (x.rank() != 2 || x.cols() != dims_.input) {
      throw DimensionError("model: input " + shape_string(x.shape()) + " but model expects width " +
                           std::to_string(dims_.input));
    }
  }

  ModelDims dims_;
  std::vector<Linear> linears_;
  std::vector<BatchNorm> norms_;
  Linear classifier_;
  Linear proj_hidden_;
  Linear proj_out_;
  BnMode bn_mode_ = BnMode::BatchStats;
  bool adapting_ = false;
};

/// Frozen copy of the deployed source parameters. Every tensor it produces is
/// a constant in the differentiation graph.
class SourceSnapshot {
 public:
  explicit SourceSnapshot(const Model& source) : model_(source.clone()) {
    model_.freeze_all();
    model_.set_bn_mode(BnMode::BatchStats);
  }

  const Model& model() const { return model_; }

  /// Class probabilities with the batch's own statistics.
  Tensor predict(const Tensor& x) const { return model_.predict(x); }

  std::uint64_t checksum() const { return model_.checksum(); }

 private:
  Model model_;
};

inline SourceSnapshot snapshot(const Model& m) { return SourceSnapshot(m); }

}  // namespace sata
