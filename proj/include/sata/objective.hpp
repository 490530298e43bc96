#pragma once

// Source-anchored self-distillation and prototype-guided contrastive
// alignment.
//
// For a test batch the frozen source model (with the batch's own BN
// statistics) gives anchor probabilities a. The adapting model gives p on the
// batch and q on an augmented copy. The anchoring term pulls p and q towards
// a. The alignment term is a supervised contrastive loss over three views of
// each sample (original, augmented, nearest source prototype) labelled with
// the anchor's argmax.

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <limits>
#include <random>
#include <span>
#include <string>
#include <vector>

#include "sata/errors.hpp"
#include "sata/model.hpp"
#include "sata/params_io.hpp"
#include "sata/tensor.hpp"

namespace sata {

using Rng = std::mt19937_64;

inline constexpr double kDefaultTemperature = 0.1;
inline constexpr double kRowSumTolerance = 1e-6;

// ---------------------------------------------------------------------------
// Prototypes

/// Per-class mean source features. Immutable once built.
class PrototypeBank {
 public:
  PrototypeBank() = default;
  explicit PrototypeBank(Tensor prototypes) : prototypes_(prototypes.detach()) {
    if (prototypes_.rank() != 2) throw DimensionError("prototype bank must be [C x F]");
    for (std::size_t c = 0; c < classes(); ++c) {
      double ss = 0.0;
      for (std::size_t j = 0; j < dim(); ++j) ss += prototypes_.at(c, j) * prototypes_.at(c, j);
      if (!(std::sqrt(ss) > kNormEpsilon)) {
        throw DegenerateVectorError("prototype " + std::to_string(c) + " has zero norm");
      }
    }
  }

  const Tensor& prototypes() const { return prototypes_; }
  std::size_t classes() const { return prototypes_.rows(); }
  std::size_t dim() const { return prototypes_.cols(); }

  ParamMap to_param_map() const {
    return {{"prototypes", {prototypes_.shape(), {prototypes_.data().begin(), prototypes_.data().end()}}}};
  }
  static PrototypeBank from_param_map(const ParamMap& params) {
    const auto& e = require_entry(params, "prototypes");
    if (e.shape.size() != 2) throw ConfigError("prototypes must be rank 2");
    return PrototypeBank(Tensor::constant(e.shape, e.values));
  }

 private:
  Tensor prototypes_;
};

inline PrototypeBank compute_prototypes(const Tensor& features, std::span<const int> labels,
                                        std::size_t classes) {
  if (features.rank() != 2 || features.rows() != labels.size()) {
    throw DimensionError("compute_prototypes: " + std::to_string(labels.size()) +
                         " labels for features " + shape_string(features.shape()));
  }
  const std::size_t f = features.cols();
  std::vector<double> sums(classes * f, 0.0);
  std::vector<std::size_t> counts(classes, 0);
  for (std::size_t i = 0; i < labels.size(); ++i) {
    const int y = labels[i];
    if (y < 0 || static_cast<std::size_t>(y) >= classes) {
      throw ConfigError("compute_prototypes: label " + std::to_string(y) + " out of range");
    }
    ++counts[y];
    for (std::size_t j = 0; j < f; ++j) sums[y * f + j] += features.at(i, j);
  }
  for (std::size_t c = 0; c < classes; ++c) {
    if (counts[c] == 0) throw MissingClassError("class " + std::to_string(c) + " has no samples");
    for (std::size_t j = 0; j < f; ++j) sums[c * f + j] /= static_cast<double>(counts[c]);
  }
  return PrototypeBank(Tensor::constant({classes, f}, std::move(sums)));
}

// ---------------------------------------------------------------------------
// Source anchoring

namespace detail {

inline void require_probability_rows(const Tensor& t, const char* what) {
  if (t.rank() != 2) throw DimensionError(std::string(what) + " must be [N x C]");
  for (std::size_t i = 0; i < t.rows(); ++i) {
    double s = 0.0;
    for (std::size_t j = 0; j < t.cols(); ++j) s += t.at(i, j);
    if (!(std::abs(s - 1.0) <= kRowSumTolerance)) {
      throw ContractError(std::string(what) + ": row " + std::to_string(i) + " sums to " +
                          std::to_string(s));
    }
  }
}

inline Tensor clamped_log_constant(const Tensor& a) {
  std::vector<double> out(a.size());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = std::log(std::max(a[i], kLogClamp));
  return Tensor::constant(a.shape(), std::move(out));
}

}  // namespace detail

/// -(1/N) sum_ij p_ij log a_ij, with a treated as a constant.
inline Tensor source_anchor_loss(const Tensor& p, const Tensor& a) {
  detail::require_probability_rows(p, "source_anchor_loss(p)");
  detail::require_probability_rows(a, "source_anchor_loss(a)");
  if (p.shape() != a.shape()) {
    throw DimensionError("source_anchor_loss: " + shape_string(p.shape()) + " vs " +
                         shape_string(a.shape()));
  }
  const Tensor log_a = detail::clamped_log_constant(a);
  return scale(sum(p * log_a), -1.0 / static_cast<double>(p.rows()));
}

/// -(1/N) sum_ij (p_ij + q_ij) log a_ij over the batch and its augmented copy.
inline Tensor source_anchor_loss(const Tensor& p, const Tensor& q, const Tensor& a) {
  detail::require_probability_rows(p, "source_anchor_loss(p)");
  detail::require_probability_rows(q, "source_anchor_loss(q)");
  detail::require_probability_rows(a, "source_anchor_loss(a)");
  if (p.shape() != a.shape() || q.shape() != a.shape()) {
    throw DimensionError("source_anchor_loss: " + shape_string(p.shape()) + ", " +
                         shape_string(q.shape()) + " vs " + shape_string(a.shape()));
  }
  const Tensor log_a = detail::clamped_log_constant(a);
  return scale(sum(p * log_a) + sum(q * log_a), -1.0 / static_cast<double>(p.rows()));
}

/// Row argmax; ties go to the lowest class index.
inline std::vector<int> pseudo_label(const Tensor& a) {
  std::vector<int> out(a.rows());
  for (std::size_t i = 0; i < a.rows(); ++i) {
    std::size_t best = 0;
    for (std::size_t j = 1; j < a.cols(); ++j)
      if (a.at(i, j) > a.at(i, best)) best = j;
    out[i] = static_cast<int>(best);
  }
  return out;
}

// ---------------------------------------------------------------------------
// Prototype view

struct PrototypeView {
  std::vector<int> indices;
  Tensor features;  // constant [N x F]
};

/// Nearest prototype by cosine similarity for every feature row.
inline PrototypeView assign_prototype_view(const Tensor& features, const PrototypeBank& bank) {
  if (features.rank() != 2 || features.cols() != bank.dim()) {
    throw DimensionError("assign_prototype_view: features " + shape_string(features.shape()) +
                         " vs prototypes " + shape_string(bank.prototypes().shape()));
  }
  const std::size_t n = features.rows(), f = features.cols(), c = bank.classes();
  const auto& protos = bank.prototypes();
  std::vector<double> proto_norm(c);
  for (std::size_t k = 0; k < c; ++k) {
    double ss = 0.0;
    for (std::size_t j = 0; j < f; ++j) ss += protos.at(k, j) * protos.at(k, j);
    proto_norm[k] = std::sqrt(ss);
  }
  PrototypeView view;
  view.indices.resize(n);
  std::vector<double> out(n * f);
  for (std::size_t i = 0; i < n; ++i) {
    double ss = 0.0;
    for (std::size_t j = 0; j < f; ++j) ss += features.at(i, j) * features.at(i, j);
    const double norm = std::sqrt(ss);
    if (!(norm > kNormEpsilon)) {
      throw DegenerateVectorError("assign_prototype_view: feature row " + std::to_string(i) +
                                  " has zero norm");
    }
    std::size_t best = 0;
    double best_sim = -std::numeric_limits<double>::infinity();
    for (std::size_t k = 0; k < c; ++k) {
      double dot = 0.0;
      for (std::size_t j = 0; j < f; ++j) dot += protos.at(k, j) * features.at(i, j);
      const double sim = dot / (proto_norm[k] * norm);
      if (sim > best_sim) {
        best_sim = sim;
        best = k;
      }
    }
    view.indices[i] = static_cast<int>(best);
    for (std::size_t j = 0; j < f; ++j) out[i * f + j] = protos.at(best, j);
  }
  view.features = Tensor::constant({n, f}, std::move(out));
  return view;
}

// ---------------------------------------------------------------------------
// Contrastive alignment

/// Supervised contrastive loss summed over rows:
///   sum_i -1/|S_i| sum_{j in S_i} log( exp(z_i.z_j/tau) / sum_{k != i} exp(z_i.z_k/tau) )
/// with S_i the other rows sharing row i's label.
inline Tensor contrastive_loss(const Tensor& z, std::span<const int> labels, double tau) {
  if (!(tau > 0.0)) throw ConfigError("contrastive_loss: temperature must be positive");
  if (z.rank() != 2 || z.rows() != labels.size()) {
    throw DimensionError("contrastive_loss: " + std::to_string(labels.size()) +
                         " labels for embeddings " + shape_string(z.shape()));
  }
  const std::size_t m = z.rows();
  if (m < 2) throw EmptyPositiveSetError("contrastive_loss: need at least two rows");

  // positives weighted by 1/|S_i|; everything except the diagonal in the denominator
  std::vector<double> pos(m * m, 0.0), off_diag(m * m, 1.0);
  for (std::size_t i = 0; i < m; ++i) {
    off_diag[i * m + i] = 0.0;
    std::size_t count = 0;
    for (std::size_t j = 0; j < m; ++j)
      if (j != i && labels[j] == labels[i]) ++count;
    if (count == 0) {
      throw EmptyPositiveSetError("contrastive_loss: label " + std::to_string(labels[i]) +
                                  " of row " + std::to_string(i) + " occurs only once");
    }
    for (std::size_t j = 0; j < m; ++j)
      if (j != i && labels[j] == labels[i]) pos[i * m + j] = 1.0 / static_cast<double>(count);
  }

  const Tensor sim = scale(matmul(z, transpose(z)), 1.0 / tau);
  // log-sum-exp over k != i, shifted by the (constant) row maximum
  std::vector<double> row_max(m, -std::numeric_limits<double>::infinity());
  for (std::size_t i = 0; i < m; ++i)
    for (std::size_t k = 0; k < m; ++k)
      if (k != i) row_max[i] = std::max(row_max[i], sim.at(i, k));
  const Tensor shift = Tensor::constant({m, 1}, row_max);
  const Tensor denom = sum(exp(sim - shift) * Tensor::constant({m, m}, std::move(off_diag)), 1);
  const Tensor log_denom = log(denom) + shift;
  const Tensor pos_mean = sum(sim * Tensor::constant({m, m}, std::move(pos)), 1);
  return sum(log_denom - pos_mean);
}

// ---------------------------------------------------------------------------
// Views and the combined objective

struct AugmentConfig {
  double scale_low = 0.9;
  double scale_high = 1.1;
  double noise_std = 0.05;
};

/// x * s + n with one scale s per sample and Gaussian noise per coordinate.
inline Tensor augment(const Tensor& x, Rng& rng, const AugmentConfig& cfg = {}) {
  const std::size_t n = x.rows(), d = x.cols();
  std::vector<double> out(x.data().begin(), x.data().end());
  std::uniform_real_distribution<double> scale_dist(cfg.scale_low, cfg.scale_high);
  std::normal_distribution<double> noise(0.0, cfg.noise_std > 0.0 ? cfg.noise_std : 1.0);
  for (std::size_t i = 0; i < n; ++i) {
    const double s = cfg.scale_low == cfg.scale_high ? cfg.scale_low : scale_dist(rng);
    for (std::size_t j = 0; j < d; ++j) {
      double& v = out[i * d + j];
      v *= s;
      if (cfg.noise_std > 0.0) v += noise(rng);
    }
  }
  return Tensor::constant(x.shape(), std::move(out));
}

/// Ablation switches and temperature of the combined loss.
struct SataOptions {
  double tau = kDefaultTemperature;
  bool disable_ta = false;
  bool disable_prototypes = false;
  bool disable_augmented_view = false;
};

/// Everything one adaptation step needs about a test batch. Embedding rows
/// are ordered [original | augmented | prototype], skipping disabled views.
struct ViewBatch {
  Tensor originals;
  Tensor augmented;  // undefined when the augmented view is disabled
  Tensor anchor_probs;
  std::vector<int> pseudo_labels;
  Tensor features;  // g(originals), differentiable
  Tensor probs;     // p
  Tensor aug_probs; // q, undefined when the augmented view is disabled
  std::vector<int> prototype_indices;
  Tensor prototype_features;
  Tensor embeddings;  // undefined when alignment is disabled
  std::vector<int> view_labels;
};

inline ViewBatch build_view_batch(const Model& model, const SourceSnapshot& source,
                                  const PrototypeBank* bank, const Tensor& originals,
                                  const Tensor& augmented, const SataOptions& opts) {
  ViewBatch vb;
  vb.originals = originals;
  vb.anchor_probs = source.predict(originals);
  vb.pseudo_labels = pseudo_label(vb.anchor_probs);

  vb.features = model.forward_features(originals);
  vb.probs = softmax(model.logits(vb.features));
  Tensor aug_features;
  if (!opts.disable_augmented_view) {
    vb.augmented = augmented;
    aug_features = model.forward_features(augmented);
    vb.aug_probs = softmax(model.logits(aug_features));
  }
  if (opts.disable_ta) return vb;

  std::vector<Tensor> views{model.project(vb.features)};
  if (aug_features.defined()) views.push_back(model.project(aug_features));
  if (!opts.disable_prototypes) {
    if (bank == nullptr) throw ConfigError("prototype view requested without a prototype bank");
    auto pv = assign_prototype_view(vb.features, *bank);
    vb.prototype_indices = std::move(pv.indices);
    vb.prototype_features = pv.features;
    views.push_back(model.project(vb.prototype_features));
  }
  if (views.size() < 2) {
    throw ConfigError("alignment needs a second view: enable the augmented or prototype view");
  }
  vb.embeddings = concat_rows(views);
  for (std::size_t v = 0; v < views.size(); ++v)
    vb.view_labels.insert(vb.view_labels.end(), vb.pseudo_labels.begin(), vb.pseudo_labels.end());
  return vb;
}

inline Tensor target_alignment_loss(const ViewBatch& vb, double tau) {
  if (!vb.embeddings.defined()) throw ContractError("target_alignment_loss: no embeddings built");
  return contrastive_loss(vb.embeddings, vb.view_labels, tau);
}

inline Tensor anchoring_term(const ViewBatch& vb) {
  return vb.aug_probs.defined() ? source_anchor_loss(vb.probs, vb.aug_probs, vb.anchor_probs)
                                : source_anchor_loss(vb.probs, vb.anchor_probs);
}

struct SataLoss {
  Tensor total;
  Tensor anchoring;
  Tensor alignment;  // undefined when disabled
};

/// Unweighted sum of the anchoring and alignment terms.
inline SataLoss sata_loss(const ViewBatch& vb, const SataOptions& opts) {
  SataLoss out;
  out.anchoring = anchoring_term(vb);
  if (opts.disable_ta) {
    out.total = out.anchoring;
    return out;
  }
  out.alignment = target_alignment_loss(vb, opts.tau);
  out.total = out.anchoring + out.alignment;
  return out;
}

}  // namespace sata
