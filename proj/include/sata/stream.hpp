#pragma once

// Synthetic source task and corruption streams.
//
// The source domain is a mixture of C isotropic Gaussians in D dimensions.
// Test streams draw fresh samples from it and pass them through a sequence of
// corruptions, each at a severity 1..5.
//
// Severity ladder: every kind has a base intensity; severity s scales it by
// {0.25, 0.5, 1, 2, 4}[s-1]. Severity 0 is the identity.
//
//   kind                 intensity i = base * ladder(s)          base
//   additive-gaussian    x + N(0, i^2)                          0.5
//   feature-scale-drift  x_j * exp(i * e_j), e_j ~ N(0,1) fixed  0.15
//   rotation             rotate D/2 fixed random planes by i rad 0.2
//   feature-dropout      zero each coordinate w.p. min(i, 0.95)  0.1
//   contrast-compress    m + (x - m) * exp(-i), m = row mean     0.3
//   shift-bias           x + i * u, u fixed random unit vector   1.0
//   heavy-tail-noise     x + i * t_3 noise                       0.25
//   permute-subset       permute round(i) fixed coordinates      2.0
//
// "Fixed" quantities depend only on the corruption's structure seed, so one
// kind keeps its direction/plane/permutation across severities.

#include <algorithm>
#include <array>
#include <cmath>
#include <cstdint>
#include <fstream>
#include <numeric>
#include <ostream>
#include <random>
#include <string>
#include <system_error>
#include <vector>

#include "sata/errors.hpp"
#include "sata/params_io.hpp"
#include "sata/tensor.hpp"

namespace sata {

/// splitmix64 finalizer, used to derive independent seeds.
inline std::uint64_t mix_seed(std::uint64_t a, std::uint64_t b = 0) {
  std::uint64_t z = a + 0x9e3779b97f4a7c15ull * (b + 1);
  z = (z ^ (z >> 30)) * 0xbf58476d1ce4e5b9ull;
  z = (z ^ (z >> 27)) * 0x94d049bb133111ebull;
  return z ^ (z >> 31);
}

/// Row-major features with integer labels.
struct LabeledSet {
  std::size_t dim = 0;
  std::vector<double> features;
  std::vector<int> labels;

  std::size_t size() const { return labels.size(); }

  Tensor batch(std::size_t begin, std::size_t end) const {
    return Tensor::constant({end - begin, dim},
                            {features.begin() + static_cast<std::ptrdiff_t>(begin * dim),
                             features.begin() + static_cast<std::ptrdiff_t>(end * dim)});
  }
  Tensor all() const { return batch(0, size()); }

  bool operator==(const LabeledSet&) const = default;
};

// ---------------------------------------------------------------------------
// Source task

struct SourceTaskConfig {
  std::size_t dim = 32;
  std::size_t classes = 10;
  double sigma = 1.0;
  double mean_scale = 0.75;     // std of each class-mean coordinate
  double min_separation = 4.0;  // minimum pairwise mean distance, in units of sigma
  std::size_t train_size = 5000;
  std::size_t test_size = 2000;
  double max_probe_error = 0.05;
};

struct SourceTask {
  SourceTaskConfig config;
  std::vector<double> means;  // [C x D]
  LabeledSet train;
  LabeledSet test;

  /// Draws n samples with uniformly random labels.
  LabeledSet sample(std::size_t n, std::uint64_t seed) const {
    std::mt19937_64 rng(seed);
    std::uniform_int_distribution<int> label(0, static_cast<int>(config.classes) - 1);
    std::normal_distribution<double> noise(0.0, 1.0);
    LabeledSet out{config.dim, std::vector<double>(n * config.dim), std::vector<int>(n)};
    for (std::size_t i = 0; i < n; ++i) {
      const int y = label(rng);
      out.labels[i] = y;
      for (std::size_t j = 0; j < config.dim; ++j) {
        out.features[i * config.dim + j] =
            means[y * config.dim + j] + config.sigma * noise(rng);
      }
    }
    return out;
  }
};

/// Error of the nearest-centroid rule fitted on `train` and applied to `test`.
inline double nearest_centroid_error(const LabeledSet& train, const LabeledSet& test,
                                     std::size_t classes) {
  const std::size_t d = train.dim;
  std::vector<double> centroids(classes * d, 0.0);
  std::vector<std::size_t> counts(classes, 0);
  for (std::size_t i = 0; i < train.size(); ++i) {
    ++counts[train.labels[i]];
    for (std::size_t j = 0; j < d; ++j) centroids[train.labels[i] * d + j] += train.features[i * d + j];
  }
  for (std::size_t c = 0; c < classes; ++c)
    for (std::size_t j = 0; j < d; ++j)
      centroids[c * d + j] /= static_cast<double>(std::max<std::size_t>(counts[c], 1));
  std::size_t wrong = 0;
  for (std::size_t i = 0; i < test.size(); ++i) {
    std::size_t best = 0;
    double best_dist = INFINITY;
    for (std::size_t c = 0; c < classes; ++c) {
      double dist = 0.0;
      for (std::size_t j = 0; j < d; ++j) {
        const double diff = test.features[i * d + j] - centroids[c * d + j];
        dist += diff * diff;
      }
      if (dist < best_dist) {
        best_dist = dist;
        best = c;
      }
    }
    if (static_cast<int>(best) != test.labels[i]) ++wrong;
  }
  return test.size() ? static_cast<double>(wrong) / static_cast<double>(test.size()) : 0.0;
}

inline SourceTask generate_source(const SourceTaskConfig& cfg, std::uint64_t seed) {
  if (cfg.dim == 0 || cfg.classes < 2) throw ConfigError("source task needs dim >= 1 and >= 2 classes");
  SourceTask task;
  task.config = cfg;
  task.means.assign(cfg.classes * cfg.dim, 0.0);
  std::mt19937_64 rng(mix_seed(seed, 1));
  std::normal_distribution<double> coord(0.0, cfg.mean_scale);
  const double min_dist = cfg.min_separation * cfg.sigma;
  constexpr int kMaxAttempts = 10000;
  for (std::size_t c = 0; c < cfg.classes; ++c) {
    int attempt = 0;
    for (;; ++attempt) {
      if (attempt == kMaxAttempts) {
        throw GenerationError("could not place class means " + std::to_string(min_dist) +
                              " apart; increase mean_scale");
      }
      for (std::size_t j = 0; j < cfg.dim; ++j) task.means[c * cfg.dim + j] = coord(rng);
      bool ok = true;
      for (std::size_t o = 0; o < c && ok; ++o) {
        double d2 = 0.0;
        for (std::size_t j = 0; j < cfg.dim; ++j) {
          const double diff = task.means[c * cfg.dim + j] - task.means[o * cfg.dim + j];
          d2 += diff * diff;
        }
        ok = std::sqrt(d2) >= min_dist;
      }
      if (ok) break;
    }
  }
  task.train = task.sample(cfg.train_size, mix_seed(seed, 2));
  task.test = task.sample(cfg.test_size, mix_seed(seed, 3));
  const double err = nearest_centroid_error(task.train, task.test, cfg.classes);
  if (err > cfg.max_probe_error) {
    throw GenerationError("linear probe error " + std::to_string(err) +
                          " exceeds the separability bound; increase mean spacing");
  }
  return task;
}

// ---------------------------------------------------------------------------
// Corruptions

enum class CorruptionKind {
  AdditiveGaussian,
  FeatureScaleDrift,
  Rotation,
  FeatureDropout,
  ContrastCompress,
  ShiftBias,
  HeavyTailNoise,
  PermuteSubset,
};

inline constexpr std::array<CorruptionKind, 8> kAllCorruptions{
    CorruptionKind::AdditiveGaussian, CorruptionKind::FeatureScaleDrift,
    CorruptionKind::Rotation,         CorruptionKind::FeatureDropout,
    CorruptionKind::ContrastCompress, CorruptionKind::ShiftBias,
    CorruptionKind::HeavyTailNoise,   CorruptionKind::PermuteSubset,
};

inline constexpr std::array<double, 5> kSeverityLadder{0.25, 0.5, 1.0, 2.0, 4.0};

inline const char* to_string(CorruptionKind k) {
  switch (k) {
    case CorruptionKind::AdditiveGaussian: return "additive-gaussian";
    case CorruptionKind::FeatureScaleDrift: return "feature-scale-drift";
    case CorruptionKind::Rotation: return "rotation";
    case CorruptionKind::FeatureDropout: return "feature-dropout";
    case CorruptionKind::ContrastCompress: return "contrast-compress";
    case CorruptionKind::ShiftBias: return "shift-bias";
    case CorruptionKind::HeavyTailNoise: return "heavy-tail-noise";
    case CorruptionKind::PermuteSubset: return "permute-subset";
  }
  return "?";
}

inline CorruptionKind parse_corruption(const std::string& name) {
  for (auto k : kAllCorruptions)
    if (name == to_string(k)) return k;
  throw ConfigError("unknown corruption kind '" + name + "'");
}

inline double default_base_intensity(CorruptionKind k) {
  switch (k) {
    case CorruptionKind::AdditiveGaussian: return 0.5;
    case CorruptionKind::FeatureScaleDrift: return 0.15;
    case CorruptionKind::Rotation: return 0.2;
    case CorruptionKind::FeatureDropout: return 0.1;
    case CorruptionKind::ContrastCompress: return 0.3;
    case CorruptionKind::ShiftBias: return 1.0;
    case CorruptionKind::HeavyTailNoise: return 0.25;
    case CorruptionKind::PermuteSubset: return 2.0;
  }
  return 0.0;
}

struct Corruption {
  CorruptionKind kind = CorruptionKind::AdditiveGaussian;
  int severity = 0;
  double base = -1.0;  // negative: use the kind's default
  std::uint64_t structure_seed = 0;

  double intensity() const {
    if (severity < 0 || severity > 5) {
      throw ConfigError("severity must be in 0..5, got " + std::to_string(severity));
    }
    if (severity == 0) return 0.0;
    const double b = base < 0.0 ? default_base_intensity(kind) : base;
    return b * kSeverityLadder[severity - 1];
  }
};

namespace detail {

/// Orthonormal basis from Gram-Schmidt on Gaussian vectors.
inline std::vector<double> random_orthonormal(std::size_t d, std::mt19937_64& rng) {
  std::normal_distribution<double> g(0.0, 1.0);
  std::vector<double> q(d * d);
  for (std::size_t r = 0; r < d; ++r) {
    for (;;) {
      for (std::size_t j = 0; j < d; ++j) q[r * d + j] = g(rng);
      for (std::size_t p = 0; p < r; ++p) {
        double dot = 0.0;
        for (std::size_t j = 0; j < d; ++j) dot += q[r * d + j] * q[p * d + j];
        for (std::size_t j = 0; j < d; ++j) q[r * d + j] -= dot * q[p * d + j];
      }
      double n = 0.0;
      for (std::size_t j = 0; j < d; ++j) n += q[r * d + j] * q[r * d + j];
      n = std::sqrt(n);
      if (n < 1e-8) continue;
      for (std::size_t j = 0; j < d; ++j) q[r * d + j] /= n;
      break;
    }
  }
  return q;
}

}  // namespace detail

/// Applies `c` to every row of `x` (row-major, width `dim`). Deterministic in
/// (c, seed); severity 0 returns `x` unchanged.
inline std::vector<double> corrupt(const std::vector<double>& x, std::size_t dim,
                                   const Corruption& c, std::uint64_t seed) {
  const double level = c.intensity();
  if (c.severity == 0) return x;
  if (dim == 0 || x.size() % dim != 0) throw DimensionError("corrupt: data not a multiple of dim");
  const std::size_t n = x.size() / dim;
  std::vector<double> out = x;
  std::mt19937_64 structure(mix_seed(c.structure_seed, static_cast<std::uint64_t>(c.kind) + 101));
  std::mt19937_64 rng(mix_seed(seed, 7));

  switch (c.kind) {
    case CorruptionKind::AdditiveGaussian: {
      std::normal_distribution<double> g(0.0, level);
      for (auto& v : out) v += g(rng);
      break;
    }
    case CorruptionKind::FeatureScaleDrift: {
      std::normal_distribution<double> g(0.0, 1.0);
      std::vector<double> s(dim);
      for (auto& v : s) v = std::exp(level * g(structure));
      for (std::size_t i = 0; i < n; ++i)
        for (std::size_t j = 0; j < dim; ++j) out[i * dim + j] *= s[j];
      break;
    }
    case CorruptionKind::Rotation: {
      const auto basis = detail::random_orthonormal(dim, structure);
      const double cs = std::cos(level), sn = std::sin(level);
      for (std::size_t i = 0; i < n; ++i) {
        double* row = out.data() + i * dim;
        for (std::size_t p = 0; p + 1 < dim; p += 2) {
          const double* u = basis.data() + p * dim;
          const double* w = basis.data() + (p + 1) * dim;
          double a = 0.0, b = 0.0;
          for (std::size_t j = 0; j < dim; ++j) {
            a += row[j] * u[j];
            b += row[j] * w[j];
          }
          const double ra = cs * a - sn * b, rb = sn * a + cs * b;
          for (std::size_t j = 0; j < dim; ++j) row[j] += (ra - a) * u[j] + (rb - b) * w[j];
        }
      }
      break;
    }
    case CorruptionKind::FeatureDropout: {
      std::bernoulli_distribution drop(std::min(level, 0.95));
      for (auto& v : out)
        if (drop(rng)) v = 0.0;
      break;
    }
    case CorruptionKind::ContrastCompress: {
      const double factor = std::exp(-level);
      for (std::size_t i = 0; i < n; ++i) {
        double m = 0.0;
        for (std::size_t j = 0; j < dim; ++j) m += out[i * dim + j];
        m /= static_cast<double>(dim);
        for (std::size_t j = 0; j < dim; ++j) out[i * dim + j] = m + (out[i * dim + j] - m) * factor;
      }
      break;
    }
    case CorruptionKind::ShiftBias: {
      std::normal_distribution<double> g(0.0, 1.0);
      std::vector<double> u(dim);
      double norm = 0.0;
      for (auto& v : u) norm += (v = g(structure)) * v;
      norm = std::sqrt(norm);
      for (std::size_t i = 0; i < n; ++i)
        for (std::size_t j = 0; j < dim; ++j) out[i * dim + j] += level * u[j] / norm;
      break;
    }
    case CorruptionKind::HeavyTailNoise: {
      std::student_t_distribution<double> t(3.0);
      for (auto& v : out) v += level * t(rng);
      break;
    }
    case CorruptionKind::PermuteSubset: {
      const auto k = std::min<std::size_t>(dim, static_cast<std::size_t>(std::lround(level)));
      std::vector<std::size_t> idx(dim);
      std::iota(idx.begin(), idx.end(), 0);
      std::shuffle(idx.begin(), idx.end(), structure);
      idx.resize(k);
      // cyclic shift of the chosen coordinates: no chosen coordinate stays put
      for (std::size_t i = 0; i < n && k >= 2; ++i) {
        double* row = out.data() + i * dim;
        const double first = row[idx[0]];
        for (std::size_t t = 0; t + 1 < k; ++t) row[idx[t]] = row[idx[t + 1]];
        row[idx[k - 1]] = first;
      }
      break;
    }
  }
  return out;
}

inline LabeledSet corrupt(const LabeledSet& x, const Corruption& c, std::uint64_t seed) {
  return {x.dim, corrupt(x.features, x.dim, c, seed), x.labels};
}

// ---------------------------------------------------------------------------
// Schedules

enum class ScheduleMode { Abrupt, Gradual, GeneralizationSplit };

inline const char* to_string(ScheduleMode m) {
  switch (m) {
    case ScheduleMode::Abrupt: return "abrupt";
    case ScheduleMode::Gradual: return "gradual";
    case ScheduleMode::GeneralizationSplit: return "generalization-split";
  }
  return "?";
}

enum class SegmentPhase { Adapt, FrozenEval };

struct Segment {
  Corruption corruption;
  std::size_t samples = 0;
  std::size_t batch_size = 0;
  SegmentPhase phase = SegmentPhase::Adapt;

  std::size_t n_batches() const { return (samples + batch_size - 1) / batch_size; }
};

struct StreamSchedule {
  ScheduleMode mode = ScheduleMode::Abrupt;
  std::uint64_t seed = 0;
  std::vector<Segment> segments;

  std::size_t total_samples() const {
    std::size_t n = 0;
    for (const auto& s : segments) n += s.samples;
    return n;
  }
};

inline constexpr std::array<int, 9> kGradualRamp{1, 2, 3, 4, 5, 4, 3, 2, 1};

/// abrupt: each corruption once at severity 5. gradual: severities
/// 1,2,3,4,5,4,3,2,1 per corruption. generalization-split: severity 5, the
/// first ceil(k/2) corruptions adapt and the rest are evaluated frozen.
inline StreamSchedule build_schedule(ScheduleMode mode, const std::vector<CorruptionKind>& kinds,
                                     std::size_t batch_size, std::uint64_t seed,
                                     std::size_t samples_per_segment) {
  if (kinds.empty()) throw ConfigError("schedule needs at least one corruption");
  if (batch_size < 2) {
    throw ConfigError("batch size must be >= 2 for batch statistics, got " +
                      std::to_string(batch_size));
  }
  if (samples_per_segment == 0) throw ConfigError("segments need at least one sample");
  StreamSchedule s;
  s.mode = mode;
  s.seed = seed;
  const std::size_t adapt_count = (kinds.size() + 1) / 2;
  for (std::size_t k = 0; k < kinds.size(); ++k) {
    Corruption base;
    base.kind = kinds[k];
    base.structure_seed = mix_seed(seed, 1000 + static_cast<std::uint64_t>(kinds[k]));
    auto push = [&](int severity, SegmentPhase phase) {
      Corruption c = base;
      c.severity = severity;
      s.segments.push_back({c, samples_per_segment, batch_size, phase});
    };
    switch (mode) {
      case ScheduleMode::Abrupt: push(5, SegmentPhase::Adapt); break;
      case ScheduleMode::Gradual:
        for (int sev : kGradualRamp) push(sev, SegmentPhase::Adapt);
        break;
      case ScheduleMode::GeneralizationSplit:
        push(5, k < adapt_count ? SegmentPhase::Adapt : SegmentPhase::FrozenEval);
        break;
    }
  }
  return s;
}

/// Clean samples of segment `index`, corrupted. Replayable from (task, schedule).
inline LabeledSet materialize(const SourceTask& task, const StreamSchedule& schedule,
                              std::size_t index) {
  const auto& seg = schedule.segments.at(index);
  const LabeledSet clean = task.sample(seg.samples, mix_seed(schedule.seed, 5000 + index));
  return corrupt(clean, seg.corruption, mix_seed(schedule.seed, 9000 + index));
}

/// Columnar text export: "dim count" header, then "label f_1 ... f_dim" rows.
inline void export_stream(std::ostream& os, const LabeledSet& data) {
  os << data.dim << ' ' << data.size() << '\n';
  for (std::size_t i = 0; i < data.size(); ++i) {
    os << data.labels[i];
    for (std::size_t j = 0; j < data.dim; ++j) os << ' ' << format_double(data.features[i * data.dim + j]);
    os << '\n';
  }
}

inline LabeledSet import_stream(std::istream& is) {
  LabeledSet out;
  std::size_t count = 0;
  if (!(is >> out.dim >> count)) throw ConfigError("stream file: missing 'dim count' header");
  out.labels.resize(count);
  out.features.resize(count * out.dim);
  std::string tok;
  for (std::size_t i = 0; i < count; ++i) {
    if (!(is >> out.labels[i])) throw ConfigError("stream file: truncated at row " + std::to_string(i));
    for (std::size_t j = 0; j < out.dim; ++j) {
      if (!(is >> tok)) throw ConfigError("stream file: truncated at row " + std::to_string(i));
      out.features[i * out.dim + j] = parse_double(tok);
    }
  }
  return out;
}

}  // namespace sata
