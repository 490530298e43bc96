#pragma once

// Continual adaptation loop, protocol runners and reports.
//
// The stream is consumed strictly in order and nothing is ever restored to
// the source parameters between segments. Every prediction of a batch comes
// from the forward pass that also produced that batch's loss, i.e. before the
// update computed from it is applied.

#include <algorithm>
#include <cctype>
#include <cerrno>
#include <chrono>
#include <cstdint>
#include <fstream>
#include <istream>
#include <map>
#include <numeric>
#include <optional>
#include <ostream>
#include <random>
#include <span>
#include <sstream>
#include <string>
#include <system_error>
#include <vector>

#include <nlohmann/json.hpp>

#include "sata/baselines.hpp"
#include "sata/errors.hpp"
#include "sata/model.hpp"
#include "sata/objective.hpp"
#include "sata/optim.hpp"
#include "sata/params_io.hpp"
#include "sata/stream.hpp"
#include "sata/tensor.hpp"

namespace sata {

// ---------------------------------------------------------------------------
// Source model

struct SourceTrainConfig {
  ModelDims dims;
  std::size_t epochs = 20;
  std::size_t batch_size = 128;
  double learning_rate = 3e-3;
  double bn_momentum = 0.1;
};

struct SourceArtifacts {
  Model model;
  PrototypeBank bank;
  double clean_error_pct = 0.0;  // source test split, running statistics
};

inline std::size_t count_errors(const std::vector<int>& preds, std::span<const int> labels) {
  std::size_t wrong = 0;
  for (std::size_t i = 0; i < preds.size(); ++i) wrong += preds[i] != labels[i];
  return wrong;
}

/// Cross-entropy of logits against integer labels, averaged over the batch.
inline Tensor cross_entropy(const Tensor& logits, std::span<const int> labels) {
  std::vector<double> onehot(logits.size(), 0.0);
  for (std::size_t i = 0; i < labels.size(); ++i) onehot[i * logits.cols() + labels[i]] = 1.0;
  const Tensor target = Tensor::constant(logits.shape(), std::move(onehot));
  return scale(sum(target * log_softmax(logits)), -1.0 / static_cast<double>(logits.rows()));
}

/// Fits g and h on the clean source split, then fixes the BN running
/// statistics to the full training set and builds the prototype bank from
/// class-mean training features.
inline SourceArtifacts train_source(const SourceTask& task, SourceTrainConfig cfg,
                                    std::uint64_t seed) {
  cfg.dims.input = task.config.dim;
  cfg.dims.classes = task.config.classes;
  Model model = Model::create(cfg.dims, mix_seed(seed, 11));
  model.set_roles_for_source_training();
  std::vector<Tensor> params;
  for (auto& p : model.parameters())
    if (p.role != ParamRole::Projection) params.push_back(p.tensor);
  Optimizer opt(params, {OptimizerKind::Adam, cfg.learning_rate});

  const auto& train = task.train;
  std::vector<std::size_t> order(train.size());
  std::iota(order.begin(), order.end(), 0);
  std::mt19937_64 rng(mix_seed(seed, 12));
  std::vector<double> xb;
  std::vector<int> yb;
  for (std::size_t epoch = 0; epoch < cfg.epochs; ++epoch) {
    std::shuffle(order.begin(), order.end(), rng);
    for (std::size_t start = 0; start + 2 <= order.size(); start += cfg.batch_size) {
      const std::size_t end = std::min(order.size(), start + cfg.batch_size);
      if (end - start < 2) break;
      xb.clear();
      yb.clear();
      for (std::size_t k = start; k < end; ++k) {
        const std::size_t i = order[k];
        xb.insert(xb.end(), train.features.begin() + static_cast<std::ptrdiff_t>(i * train.dim),
                  train.features.begin() + static_cast<std::ptrdiff_t>((i + 1) * train.dim));
        yb.push_back(train.labels[i]);
      }
      const Tensor x = Tensor::constant({end - start, train.dim}, xb);
      opt.zero_grad();
      backward(cross_entropy(model.logits(model.forward_features_train(x, cfg.bn_momentum)), yb));
      opt.step();
    }
  }
  opt.zero_grad();
  model.collect_running_stats(train.all());
  model.freeze_all();
  model.set_bn_mode(BnMode::RunningStats);

  SourceArtifacts out;
  out.bank = compute_prototypes(model.forward_features(train.all()), train.labels,
                                task.config.classes);
  const auto preds = argmax_rows(model.predict(task.test.all()));
  out.clean_error_pct =
      100.0 * static_cast<double>(count_errors(preds, task.test.labels)) /
      static_cast<double>(task.test.size());
  model.set_bn_mode(BnMode::BatchStats);
  out.model = std::move(model);
  return out;
}

// ---------------------------------------------------------------------------
// Adaptation

struct AdaptConfig {
  PolicyKind policy = PolicyKind::Sata;
  OptimizerConfig optimizer{};
  SataOptions sata{};
  AugmentConfig augment{};
  int steps_per_batch = 1;
  std::uint64_t seed = 0;
};

struct StepOutcome {
  std::vector<int> predictions;
  bool adapted = false;
  double loss = 0.0;
};

/// Owns the live model, the frozen source snapshot and the optimizer state
/// for one continual run.
class Adapter {
 public:
  Adapter(const Model& source, const PrototypeBank* bank, AdaptConfig cfg)
      : source_(snapshot(source)), live_(source.clone()), bank_(bank), cfg_(cfg),
        rng_(mix_seed(cfg.seed, 21)) {
    if (cfg_.steps_per_batch < 1) throw ConfigError("steps_per_batch must be >= 1");
    if (cfg_.policy == PolicyKind::Sata) live_.reset_projection(mix_seed(cfg.seed, 22));
    live_.set_roles_for_adaptation();
    live_.set_bn_mode(policy_bn_mode(cfg_.policy));
    std::vector<Tensor> params;
    switch (cfg_.policy) {
      case PolicyKind::Tent: params = live_.params_with_role(ParamRole::BnAffine); break;
      case PolicyKind::Sata: params = live_.trainable_params(); break;
      default: break;
    }
    optimizer_.emplace(std::move(params), cfg_.optimizer);
  }

  const Model& model() const { return live_; }
  const SourceSnapshot& source() const { return source_; }
  const AdaptConfig& config() const { return cfg_; }

  /// Predicts the batch and adapts on it. Batches too small for batch
  /// statistics are scored with running statistics and not adapted on.
  StepOutcome step(const Tensor& x) {
    if (x.rows() < 2) return {evaluate(x), false, 0.0};
    StepOutcome out;
    out.adapted = cfg_.policy == PolicyKind::Tent || cfg_.policy == PolicyKind::Sata;
    if (cfg_.policy != PolicyKind::Sata) {
      out.predictions = policy_step(cfg_.policy, live_, &*optimizer_, x);
      return out;
    }
    for (int s = 0; s < cfg_.steps_per_batch; ++s) {
      const Tensor aug = cfg_.sata.disable_augmented_view ? Tensor() : augment(x, rng_, cfg_.augment);
      const ViewBatch vb = build_view_batch(live_, source_, bank_, x, aug, cfg_.sata);
      if (s == 0) out.predictions = argmax_rows(vb.probs);
      const SataLoss loss = sata_loss(vb, cfg_.sata);
      if (s == 0) out.loss = loss.total.item();
      optimizer_->zero_grad();
      backward(loss.total);
      optimizer_->step();
    }
    return out;
  }

  /// Predictions with the current parameters, no update.
  std::vector<int> evaluate(const Tensor& x) const {
    const BnMode mode = x.rows() < 2 ? BnMode::RunningStats : live_.bn_mode();
    return argmax_rows(live_.predict(x, mode));
  }

  /// Number of scalars the optimizer may change.
  std::size_t trainable_count() {
    std::size_t n = 0;
    for (const auto& t : optimizer_->params()) n += t.size();
    return n;
  }

 private:
  SourceSnapshot source_;
  Model live_;
  const PrototypeBank* bank_;
  AdaptConfig cfg_;
  Rng rng_;
  std::optional<Optimizer> optimizer_;
};

// ---------------------------------------------------------------------------
// Protocols

enum class Protocol { Abrupt, Gradual, Forgetting, Generalization };

inline const char* to_string(Protocol p) {
  switch (p) {
    case Protocol::Abrupt: return "abrupt";
    case Protocol::Gradual: return "gradual";
    case Protocol::Forgetting: return "forgetting";
    case Protocol::Generalization: return "generalization";
  }
  return "?";
}

inline Protocol parse_protocol(const std::string& name) {
  if (name == "abrupt") return Protocol::Abrupt;
  if (name == "gradual") return Protocol::Gradual;
  if (name == "forgetting") return Protocol::Forgetting;
  if (name == "generalization") return Protocol::Generalization;
  throw ConfigError("unknown protocol '" + name + "'");
}

inline ScheduleMode schedule_mode(Protocol p) {
  switch (p) {
    case Protocol::Gradual: return ScheduleMode::Gradual;
    case Protocol::Generalization: return ScheduleMode::GeneralizationSplit;
    default: return ScheduleMode::Abrupt;
  }
}

struct ProtocolConfig {
  Protocol protocol = Protocol::Abrupt;
  std::vector<CorruptionKind> corruptions{kAllCorruptions.begin(), kAllCorruptions.end()};
  std::size_t batch_size = 200;
  std::size_t samples_per_segment = 2000;
  std::size_t gradual_samples_per_segment = 500;
};

inline StreamSchedule schedule_for(const ProtocolConfig& pc, std::uint64_t seed) {
  const std::size_t n = pc.protocol == Protocol::Gradual ? pc.gradual_samples_per_segment
                                                         : pc.samples_per_segment;
  return build_schedule(schedule_mode(pc.protocol), pc.corruptions, pc.batch_size,
                        mix_seed(seed, 31), n);
}

struct SegmentResult {
  std::size_t index = 0;
  std::string corruption;
  int severity = 0;
  SegmentPhase phase = SegmentPhase::Adapt;
  std::size_t n = 0;
  std::size_t errors = 0;
  double error_pct = 0.0;

  bool operator==(const SegmentResult&) const = default;
};

struct BatchRecord {
  std::size_t segment = 0;
  std::size_t n = 0;
  std::size_t errors = 0;
  bool adapted = false;
};

struct RunReport {
  std::string protocol;
  std::string policy;
  std::uint64_t seed = 0;
  std::size_t batch_size = 0;
  std::vector<SegmentResult> segments;
  std::vector<BatchRecord> batches;
  double mean_error_pct = 0.0;  // sample-weighted over every segment
  std::optional<double> generalization_mean_pct;  // frozen-eval segments only
  std::optional<double> source_error_before_pct;
  std::optional<double> source_error_after_pct;
  std::optional<double> forgetting_delta_pct;
  std::size_t trainable_params = 0;
  double wall_clock_ms_per_batch = 0.0;
};

inline double weighted_error_pct(const std::vector<SegmentResult>& segs, bool frozen_only = false) {
  std::size_t n = 0, wrong = 0;
  for (const auto& s : segs) {
    if (frozen_only && s.phase != SegmentPhase::FrozenEval) continue;
    n += s.n;
    wrong += s.errors;
  }
  return n ? 100.0 * static_cast<double>(wrong) / static_cast<double>(n) : 0.0;
}

/// Error of `adapter`'s current parameters on `data`, in batches, no updates.
inline double evaluate_error_pct(const Adapter& adapter, const LabeledSet& data,
                                 std::size_t batch_size) {
  std::size_t wrong = 0;
  for (std::size_t start = 0; start < data.size(); start += batch_size) {
    const std::size_t end = std::min(data.size(), start + batch_size);
    const auto preds = adapter.evaluate(data.batch(start, end));
    wrong += count_errors(preds, std::span<const int>(data.labels).subspan(start, end - start));
  }
  return 100.0 * static_cast<double>(wrong) / static_cast<double>(data.size());
}

/// Runs one continual stream. Forgetting additionally scores the clean source
/// test split before and after the stream; generalization stops adapting at
/// the first frozen-eval segment.
inline RunReport run_protocol(const StreamSchedule& schedule, Protocol protocol,
                              const AdaptConfig& cfg, const SourceTask& task,
                              const SourceArtifacts& source) {
  if (schedule.segments.empty()) throw ConfigError("run_protocol: empty schedule");
  if (schedule.mode != schedule_mode(protocol)) {
    throw ConfigError(std::string("run_protocol: protocol '") + to_string(protocol) +
                      "' cannot run a '" + to_string(schedule.mode) + "' schedule");
  }
  Adapter adapter(source.model, &source.bank, cfg);
  RunReport report;
  report.protocol = to_string(protocol);
  report.policy = to_string(cfg.policy);
  report.seed = cfg.seed;
  report.batch_size = schedule.segments.front().batch_size;
  report.trainable_params = adapter.trainable_count();

  if (protocol == Protocol::Forgetting) {
    report.source_error_before_pct = evaluate_error_pct(adapter, task.test, report.batch_size);
  }

  const auto t0 = std::chrono::steady_clock::now();
  for (std::size_t si = 0; si < schedule.segments.size(); ++si) {
    const auto& seg = schedule.segments[si];
    const LabeledSet data = materialize(task, schedule, si);
    SegmentResult res;
    res.index = si;
    res.corruption = to_string(seg.corruption.kind);
    res.severity = seg.corruption.severity;
    res.phase = seg.phase;
    res.n = data.size();
    for (std::size_t start = 0; start < data.size(); start += seg.batch_size) {
      const std::size_t end = std::min(data.size(), start + seg.batch_size);
      const Tensor x = data.batch(start, end);
      StepOutcome out;
      if (seg.phase == SegmentPhase::FrozenEval) {
        out.predictions = adapter.evaluate(x);
      } else {
        out = adapter.step(x);
      }
      const std::size_t wrong = count_errors(
          out.predictions, std::span<const int>(data.labels).subspan(start, end - start));
      res.errors += wrong;
      report.batches.push_back({si, end - start, wrong, out.adapted});
    }
    res.error_pct = 100.0 * static_cast<double>(res.errors) / static_cast<double>(res.n);
    report.segments.push_back(res);
  }
  const auto t1 = std::chrono::steady_clock::now();
  report.wall_clock_ms_per_batch =
      std::chrono::duration<double, std::milli>(t1 - t0).count() /
      static_cast<double>(std::max<std::size_t>(report.batches.size(), 1));

  report.mean_error_pct = weighted_error_pct(report.segments);
  if (protocol == Protocol::Generalization) {
    report.generalization_mean_pct = weighted_error_pct(report.segments, true);
  }
  if (protocol == Protocol::Forgetting) {
    report.source_error_after_pct = evaluate_error_pct(adapter, task.test, report.batch_size);
    report.forgetting_delta_pct = *report.source_error_after_pct - *report.source_error_before_pct;
  }
  return report;
}

// ---------------------------------------------------------------------------
// Reports

inline constexpr const char* kCsvHeader = "protocol,policy,segment,corruption,severity,n,error_pct";

/// One row per stream segment, then source_before/source_after rows when the
/// run measured forgetting. Wall-clock is not part of the CSV.
inline void write_csv(std::ostream& os, const RunReport& r) {
  os << kCsvHeader << '\n';
  for (const auto& s : r.segments) {
    os << r.protocol << ',' << r.policy << ',' << s.index << ',' << s.corruption << ','
       << s.severity << ',' << s.n << ',' << format_double(s.error_pct) << '\n';
  }
  if (r.source_error_before_pct && r.source_error_after_pct) {
    os << r.protocol << ',' << r.policy << ",source_before,clean,0,0,"
       << format_double(*r.source_error_before_pct) << '\n';
    os << r.protocol << ',' << r.policy << ",source_after,clean,0,0,"
       << format_double(*r.source_error_after_pct) << '\n';
  }
}

inline nlohmann::json to_json(const RunReport& r) {
  nlohmann::json j;
  j["protocol"] = r.protocol;
  j["policy"] = r.policy;
  j["seed"] = r.seed;
  j["batch_size"] = r.batch_size;
  j["mean_error_pct"] = r.mean_error_pct;
  j["trainable_params"] = r.trainable_params;
  j["wall_clock_ms_per_batch"] = r.wall_clock_ms_per_batch;
  auto opt = [&j](const char* key, const std::optional<double>& v) {
    if (v) j[key] = *v;
  };
  opt("generalization_mean_pct", r.generalization_mean_pct);
  opt("source_error_before_pct", r.source_error_before_pct);
  opt("source_error_after_pct", r.source_error_after_pct);
  opt("forgetting_delta_pct", r.forgetting_delta_pct);
  j["segments"] = nlohmann::json::array();
  for (const auto& s : r.segments) {
    j["segments"].push_back({{"segment", s.index},
                             {"corruption", s.corruption},
                             {"severity", s.severity},
                             {"phase", s.phase == SegmentPhase::Adapt ? "adapt" : "frozen-eval"},
                             {"n", s.n},
                             {"errors", s.errors},
                             {"error_pct", s.error_pct}});
  }
  return j;
}

inline RunReport report_from_json(const nlohmann::json& j) {
  RunReport r;
  r.protocol = j.at("protocol").get<std::string>();
  r.policy = j.at("policy").get<std::string>();
  r.seed = j.at("seed").get<std::uint64_t>();
  r.batch_size = j.at("batch_size").get<std::size_t>();
  r.mean_error_pct = j.at("mean_error_pct").get<double>();
  r.trainable_params = j.at("trainable_params").get<std::size_t>();
  r.wall_clock_ms_per_batch = j.at("wall_clock_ms_per_batch").get<double>();
  auto opt = [&j](const char* key, std::optional<double>& v) {
    if (j.contains(key)) v = j.at(key).get<double>();
  };
  opt("generalization_mean_pct", r.generalization_mean_pct);
  opt("source_error_before_pct", r.source_error_before_pct);
  opt("source_error_after_pct", r.source_error_after_pct);
  opt("forgetting_delta_pct", r.forgetting_delta_pct);
  for (const auto& s : j.at("segments")) {
    SegmentResult sr;
    sr.index = s.at("segment").get<std::size_t>();
    sr.corruption = s.at("corruption").get<std::string>();
    sr.severity = s.at("severity").get<int>();
    sr.phase = s.at("phase").get<std::string>() == "adapt" ? SegmentPhase::Adapt
                                                           : SegmentPhase::FrozenEval;
    sr.n = s.at("n").get<std::size_t>();
    sr.errors = s.at("errors").get<std::size_t>();
    sr.error_pct = s.at("error_pct").get<double>();
    r.segments.push_back(sr);
  }
  return r;
}

enum class ReportFormat { Csv, Json };

inline void emit_report(std::ostream& os, const RunReport& r, ReportFormat fmt) {
  if (fmt == ReportFormat::Csv) {
    write_csv(os, r);
  } else {
    os << to_json(r).dump(2) << '\n';
  }
}

inline void emit_report(const std::string& path, const RunReport& r, ReportFormat fmt) {
  std::ofstream os(path);
  if (!os) throw std::system_error(errno, std::generic_category(), "cannot open " + path);
  emit_report(os, r, fmt);
  if (!os) throw std::system_error(errno, std::generic_category(), "write failed: " + path);
}

/// Sample-weighted mean error per (protocol, policy) over the stream rows of
/// one or more CSV reports.
struct AggregateRow {
  std::string protocol;
  std::string policy;
  std::size_t n = 0;
  double mean_error_pct = 0.0;
};

inline std::vector<AggregateRow> aggregate_csv(const std::vector<std::string>& csv_texts) {
  std::map<std::pair<std::string, std::string>, std::pair<double, std::size_t>> acc;
  for (const auto& text : csv_texts) {
    std::istringstream is(text);
    std::string line;
    if (!std::getline(is, line) || line != kCsvHeader) {
      throw ConfigError("report: CSV header mismatch");
    }
    while (std::getline(is, line)) {
      if (line.empty()) continue;
      std::vector<std::string> f;
      std::stringstream ls(line);
      std::string cell;
      while (std::getline(ls, cell, ',')) f.push_back(cell);
      if (f.size() != 7) throw ConfigError("report: malformed row '" + line + "'");
      if (f[2].empty() || !std::all_of(f[2].begin(), f[2].end(), [](unsigned char ch) { return std::isdigit(ch) != 0; })) continue;
      const std::size_t n = std::stoull(f[5]);
      auto& [wrong, total] = acc[{f[0], f[1]}];
      wrong += parse_double(f[6]) * static_cast<double>(n) / 100.0;
      total += n;
    }
  }
  std::vector<AggregateRow> out;
  for (const auto& [key, v] : acc) {
    out.push_back({key.first, key.second, v.second,
                   v.second ? 100.0 * v.first / static_cast<double>(v.second) : 0.0});
  }
  return out;
}

// ---------------------------------------------------------------------------
// One seeded experiment end to end

struct ExperimentConfig {
  SourceTaskConfig task{};
  SourceTrainConfig train{};
  ProtocolConfig protocol{};
  AdaptConfig adapt{};
};

/// Everything that depends only on the seed: the task and its fitted source model.
struct SeededSource {
  SourceTask task;
  SourceArtifacts artifacts;
};

inline SeededSource prepare_source(const SourceTaskConfig& task_cfg,
                                   const SourceTrainConfig& train_cfg, std::uint64_t seed) {
  SeededSource s;
  s.task = generate_source(task_cfg, seed);
  s.artifacts = train_source(s.task, train_cfg, seed);
  return s;
}

inline RunReport run_experiment(const SeededSource& src, const ProtocolConfig& pc,
                                AdaptConfig adapt, std::uint64_t seed) {
  adapt.seed = seed;
  return run_protocol(schedule_for(pc, seed), pc.protocol, adapt, src.task, src.artifacts);
}

}  // namespace sata
