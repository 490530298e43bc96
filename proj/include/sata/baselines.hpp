#pragma once

// Comparator policies sharing the model and harness:
//   source    - no adaptation, batch norm with source running statistics
//   bn-adapt  - no parameter change, batch norm with test-batch statistics
//   tent      - entropy minimization over BN affine, continually, never reset

#include <string>
#include <vector>

#include "sata/errors.hpp"
#include "sata/model.hpp"
#include "sata/objective.hpp"
#include "sata/optim.hpp"
#include "sata/tensor.hpp"

namespace sata {

enum class PolicyKind { Source, BnAdapt, Tent, Sata };

inline const char* to_string(PolicyKind p) {
  switch (p) {
    case PolicyKind::Source: return "source";
    case PolicyKind::BnAdapt: return "bn-adapt";
    case PolicyKind::Tent: return "tent";
    case PolicyKind::Sata: return "sata";
  }
  return "?";
}

inline PolicyKind parse_policy(const std::string& name) {
  if (name == "source") return PolicyKind::Source;
  if (name == "bn-adapt" || name == "bn-stats-adapt" || name == "bn") return PolicyKind::BnAdapt;
  if (name == "tent") return PolicyKind::Tent;
  if (name == "sata") return PolicyKind::Sata;
  throw ConfigError("unknown policy '" + name + "'");
}

/// Parameter roles a policy may change.
inline std::vector<ParamRole> policy_partition(PolicyKind p) {
  switch (p) {
    case PolicyKind::Source:
    case PolicyKind::BnAdapt: return {};
    case PolicyKind::Tent: return {ParamRole::BnAffine};
    case PolicyKind::Sata: return {ParamRole::BnAffine, ParamRole::Projection};
  }
  return {};
}

/// Batch norm mode a policy predicts with.
inline BnMode policy_bn_mode(PolicyKind p) {
  return p == PolicyKind::Source ? BnMode::RunningStats : BnMode::BatchStats;
}

/// -(1/N) sum_ij p_ij log p_ij.
inline Tensor entropy_loss(const Tensor& p) {
  detail::require_probability_rows(p, "entropy_loss");
  return scale(sum(p * log(p)), -1.0 / static_cast<double>(p.rows()));
}

inline std::vector<int> argmax_rows(const Tensor& probs) { return pseudo_label(probs); }

/// One batch of a baseline policy. Predictions come from the forward pass
/// that also produced the loss, before the update lands. `optimizer` is only
/// used by tent.
inline std::vector<int> policy_step(PolicyKind policy, Model& model, Optimizer* optimizer,
                                    const Tensor& batch) {
  switch (policy) {
    case PolicyKind::Source:
    case PolicyKind::BnAdapt: {
      model.set_bn_mode(policy_bn_mode(policy));
      return argmax_rows(model.predict(batch));
    }
    case PolicyKind::Tent: {
      if (optimizer == nullptr) throw ConfigError("tent needs an optimizer");
      model.set_bn_mode(BnMode::BatchStats);
      const Tensor probs = model.predict(batch);
      auto preds = argmax_rows(probs);
      optimizer->zero_grad();
      backward(entropy_loss(probs));
      optimizer->step();
      return preds;
    }
    case PolicyKind::Sata: break;
  }
  throw ConfigError("policy_step: sata steps through the harness adapter");
}

}  // namespace sata
