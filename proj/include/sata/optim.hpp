#pragma once

#include <cmath>
#include <memory>
#include <span>
#include <string>
#include <vector>

#include "sata/errors.hpp"
#include "sata/tensor.hpp"

namespace sata {

enum class OptimizerKind { Adam, Sgd };

struct OptimizerConfig {
  OptimizerKind kind = OptimizerKind::Adam;
  double learning_rate = 1e-3;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double epsilon = 1e-8;
  double momentum = 0.0;  // sgd only
};

/// First-order optimizer over a fixed list of leaf tensors. Tensors without a
/// populated gradient are skipped.
class Optimizer {
 public:
  Optimizer(std::vector<Tensor> params, OptimizerConfig config)
      : params_(std::move(params)), config_(config) {
    for (const auto& p : params_) {
      if (!p.is_leaf()) throw ContractError("optimizer: parameters must be leaf tensors");
      first_.emplace_back(p.size(), 0.0);
      second_.emplace_back(p.size(), 0.0);
    }
  }

  const OptimizerConfig& config() const { return config_; }
  std::span<Tensor> params() { return params_; }
  long steps() const { return step_; }

  void zero_grad() { sata::zero_grad(params_); }

  void step() {
    ++step_;
    const double lr = config_.learning_rate;
    for (std::size_t k = 0; k < params_.size(); ++k) {
      auto& p = params_[k];
      if (!p.has_grad()) continue;
      auto value = p.mutable_data();
      const auto grad = p.grad();
      auto& m = first_[k];
      auto& v = second_[k];
      if (config_.kind == OptimizerKind::Sgd) {
        for (std::size_t i = 0; i < value.size(); ++i) {
          m[i] = config_.momentum * m[i] + grad[i];
          value[i] -= lr * m[i];
        }
        continue;
      }
      const double c1 = 1.0 - std::pow(config_.beta1, static_cast<double>(step_));
      const double c2 = 1.0 - std::pow(config_.beta2, static_cast<double>(step_));
      for (std::size_t i = 0; i < value.size(); ++i) {
        m[i] = config_.beta1 * m[i] + (1.0 - config_.beta1) * grad[i];
        v[i] = config_.beta2 * v[i] + (1.0 - config_.beta2) * grad[i] * grad[i];
        const double mhat = m[i] / c1;
        const double vhat = v[i] / c2;
        value[i] -= lr * mhat / (std::sqrt(vhat) + config_.epsilon);
      }
    }
  }

 private:
  std::vector<Tensor> params_;
  OptimizerConfig config_;
  std::vector<std::vector<double>> first_;
  std::vector<std::vector<double>> second_;
  long step_ = 0;
};

inline const char* to_string(OptimizerKind k) { return k == OptimizerKind::Adam ? "adam" : "sgd"; }

inline OptimizerKind parse_optimizer(const std::string& name) {
  if (name == "adam") return OptimizerKind::Adam;
  if (name == "sgd") return OptimizerKind::Sgd;
  throw ConfigError("unknown optimizer '" + name + "'");
}

}  // namespace sata
