// sata: fit a source model, run continual adaptation streams, sweep batch
// sizes, aggregate reports.
//
// Options may also come from a config file (--config FILE, INI/TOML style,
// one [section] per subcommand); flags on the command line win.

#include <filesystem>
#include <fstream>
#include <iostream>
#include <sstream>
#include <string>
#include <vector>

#include <CLI11.hpp>

#include "sata/harness.hpp"

namespace fs = std::filesystem;
using namespace sata;

namespace {

struct RunOptions {
  std::string policy = "sata";
  std::string protocol = "abrupt";
  std::size_t batch_size = 200;
  std::uint64_t seed = 1000;
  double lr = 1e-3;
  double tau = kDefaultTemperature;
  std::string optimizer = "adam";
  bool disable_ta = false;
  bool disable_prototypes = false;
  bool disable_augmented_view = false;
  std::vector<std::string> corruptions;
  std::size_t samples = 2000;
  std::size_t gradual_samples = 500;
  std::string source_dir;
  std::string format = "csv";
  std::string out = "-";
};

void add_run_flags(CLI::App* cmd, RunOptions& o) {
  cmd->add_option("--policy", o.policy, "source | bn-adapt | tent | sata")->capture_default_str();
  cmd->add_option("--protocol", o.protocol, "abrupt | gradual | forgetting | generalization")
      ->capture_default_str();
  cmd->add_option("--batch-size", o.batch_size)->capture_default_str();
  cmd->add_option("--seed", o.seed)->capture_default_str();
  cmd->add_option("--lr", o.lr)->capture_default_str();
  cmd->add_option("--tau", o.tau, "contrastive temperature")->capture_default_str();
  cmd->add_option("--optimizer", o.optimizer, "adam | sgd")->capture_default_str();
  cmd->add_flag("--disable-ta", o.disable_ta, "drop the contrastive alignment term");
  cmd->add_flag("--disable-prototypes", o.disable_prototypes, "drop the prototype view");
  cmd->add_flag("--disable-augmented-view", o.disable_augmented_view, "anchor the original view only");
  cmd->add_option("--corruptions", o.corruptions, "subset and order of corruption kinds")->delimiter(',');
  cmd->add_option("--samples", o.samples, "samples per segment")->capture_default_str();
  cmd->add_option("--gradual-samples", o.gradual_samples, "samples per gradual segment")
      ->capture_default_str();
  cmd->add_option("--source", o.source_dir, "directory written by train-source (default: fit from --seed)");
  cmd->add_option("--format", o.format, "csv | json")->capture_default_str();
}

AdaptConfig adapt_config(const RunOptions& o) {
  AdaptConfig c;
  c.policy = parse_policy(o.policy);
  c.optimizer.kind = parse_optimizer(o.optimizer);
  c.optimizer.learning_rate = o.lr;
  c.sata.tau = o.tau;
  c.sata.disable_ta = o.disable_ta;
  c.sata.disable_prototypes = o.disable_prototypes;
  c.sata.disable_augmented_view = o.disable_augmented_view;
  c.seed = o.seed;
  return c;
}

ProtocolConfig protocol_config(const RunOptions& o, std::size_t batch) {
  ProtocolConfig pc;
  pc.protocol = parse_protocol(o.protocol);
  pc.batch_size = batch;
  pc.samples_per_segment = o.samples;
  pc.gradual_samples_per_segment = o.gradual_samples;
  if (!o.corruptions.empty()) {
    pc.corruptions.clear();
    for (const auto& k : o.corruptions) pc.corruptions.push_back(parse_corruption(k));
  }
  return pc;
}

ReportFormat parse_format(const std::string& f) {
  if (f == "csv") return ReportFormat::Csv;
  if (f == "json") return ReportFormat::Json;
  throw ConfigError("unknown report format '" + f + "'");
}

constexpr const char* kModelFile = "model.params";
constexpr const char* kPrototypeFile = "prototypes.params";
constexpr const char* kTaskFile = "task.json";

/// The task is regenerated from its seed; the model and prototypes come from
/// disk when a source directory is given.
SeededSource load_or_fit_source(const RunOptions& o) {
  if (o.source_dir.empty()) return prepare_source({}, {}, o.seed);
  const fs::path dir(o.source_dir);
  std::ifstream ts(dir / kTaskFile);
  if (!ts) throw ConfigError("missing " + (dir / kTaskFile).string() + "; run train-source first");
  const auto meta = nlohmann::json::parse(ts);
  SeededSource s;
  s.task = generate_source({}, meta.at("seed").get<std::uint64_t>());
  s.artifacts.model = Model::from_param_map(load_params((dir / kModelFile).string()));
  s.artifacts.bank = PrototypeBank::from_param_map(load_params((dir / kPrototypeFile).string()));
  s.artifacts.clean_error_pct = meta.at("clean_error_pct").get<double>();
  return s;
}

void write_report(const std::string& out, const RunReport& r, ReportFormat fmt) {
  if (out == "-") {
    emit_report(std::cout, r, fmt);
  } else {
    if (fs::path(out).has_parent_path()) fs::create_directories(fs::path(out).parent_path());
    emit_report(out, r, fmt);
  }
}

std::string read_file(const std::string& path) {
  std::ifstream is(path);
  if (!is) throw std::system_error(errno, std::generic_category(), "cannot open " + path);
  std::ostringstream ss;
  ss << is.rdbuf();
  return ss.str();
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Continual test-time adaptation on synthetic corruption streams"};
  app.set_config("--config", "", "read options from a config file");
  app.require_subcommand(1);

  // train-source
  std::uint64_t train_seed = 1000;
  std::string train_out = "source";
  std::size_t epochs = SourceTrainConfig{}.epochs;
  auto* train = app.add_subcommand("train-source", "fit the source model and prototypes");
  train->add_option("--seed", train_seed)->capture_default_str();
  train->add_option("--epochs", epochs)->capture_default_str();
  train->add_option("--out", train_out, "output directory")->capture_default_str();

  // run
  RunOptions run_opts;
  auto* run = app.add_subcommand("run", "adapt along one stream and report errors");
  add_run_flags(run, run_opts);
  run->add_option("--out", run_opts.out, "report path, - for stdout")->capture_default_str();

  // sweep
  RunOptions sweep_opts;
  sweep_opts.out = "sweep";
  std::vector<std::size_t> batch_sizes{200, 100, 50, 25, 10};
  auto* sweep = app.add_subcommand("sweep", "repeat one run over a batch-size grid");
  add_run_flags(sweep, sweep_opts);
  sweep->add_option("--batch-sizes", batch_sizes)->delimiter(',')->capture_default_str();
  sweep->add_option("--out", sweep_opts.out, "output directory")->capture_default_str();

  // report
  std::vector<std::string> inputs;
  std::string report_out = "-";
  auto* report = app.add_subcommand("report", "aggregate CSV reports per protocol and policy");
  report->add_option("files", inputs, "CSV reports")->required();
  report->add_option("--out", report_out, "summary path, - for stdout")->capture_default_str();

  CLI11_PARSE(app, argc, argv);

  try {
    if (*train) {
      SourceTrainConfig cfg;
      cfg.epochs = epochs;
      const SeededSource s = prepare_source({}, cfg, train_seed);
      fs::create_directories(train_out);
      const fs::path dir(train_out);
      save_params((dir / kModelFile).string(), s.artifacts.model.to_param_map());
      save_params((dir / kPrototypeFile).string(), s.artifacts.bank.to_param_map());
      std::ofstream(dir / kTaskFile) << nlohmann::json{{"seed", train_seed},
                                                       {"clean_error_pct", s.artifacts.clean_error_pct}}
                                            .dump(2)
                                     << '\n';
      std::cerr << "source model: clean test error " << s.artifacts.clean_error_pct << "% -> "
                << dir.string() << '\n';
    } else if (*run) {
      const SeededSource s = load_or_fit_source(run_opts);
      const RunReport r = run_experiment(s, protocol_config(run_opts, run_opts.batch_size),
                                         adapt_config(run_opts), run_opts.seed);
      write_report(run_opts.out, r, parse_format(run_opts.format));
      std::cerr << r.policy << " on " << r.protocol << ": mean error " << r.mean_error_pct << "%\n";
    } else if (*sweep) {
      const SeededSource s = load_or_fit_source(sweep_opts);
      const ReportFormat fmt = parse_format(sweep_opts.format);
      fs::create_directories(sweep_opts.out);
      for (std::size_t b : batch_sizes) {
        const RunReport r = run_experiment(s, protocol_config(sweep_opts, b), adapt_config(sweep_opts),
                                           sweep_opts.seed);
        const fs::path path = fs::path(sweep_opts.out) /
                              (sweep_opts.policy + "_" + sweep_opts.protocol + "_b" + std::to_string(b) +
                               (fmt == ReportFormat::Csv ? ".csv" : ".json"));
        emit_report(path.string(), r, fmt);
        std::cout << "batch " << b << ": mean error " << format_double(r.mean_error_pct) << "%";
        if (r.forgetting_delta_pct) std::cout << ", forgetting " << format_double(*r.forgetting_delta_pct);
        std::cout << '\n';
      }
    } else if (*report) {
      std::vector<std::string> texts;
      for (const auto& f : inputs) texts.push_back(read_file(f));
      std::ostringstream os;
      os << "protocol,policy,n,mean_error_pct\n";
      for (const auto& row : aggregate_csv(texts))
        os << row.protocol << ',' << row.policy << ',' << row.n << ',' << format_double(row.mean_error_pct)
           << '\n';
      if (report_out == "-") {
        std::cout << os.str();
      } else {
        std::ofstream(report_out) << os.str();
      }
    }
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << '\n';
    return 1;
  }
  return 0;
}
