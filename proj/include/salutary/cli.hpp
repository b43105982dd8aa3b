#pragma once

#include <chrono>
#include <ctime>
#include <filesystem>
#include <iostream>
#include <optional>
#include <sstream>
#include <string>
#include <vector>

#include <CLI11.hpp>

#include "salutary/config.hpp"
#include "salutary/engine.hpp"
#include "salutary/report.hpp"

namespace salutary::cli {

enum ExitCode : int { kOk = 0, kConfigError = 2, kNumericalError = 3, kIoError = 4 };

struct Options {
  std::string command;  // run | bins | addone | unbounded
  std::string config_path;
  std::optional<std::string> out;
  std::optional<std::string> seed_list;
  std::optional<int> workers;
  std::vector<std::string> strategies;
  std::vector<std::string> overrides;  // dotted.path=value
  std::optional<std::string> bins_mode;
  std::optional<long long> n_bins;
  std::optional<long long> n_candidates;
  std::optional<double> fraction;
};

namespace detail {

inline std::string utc_now() {
  const auto t = std::chrono::system_clock::to_time_t(std::chrono::system_clock::now());
  std::tm tm{};
  gmtime_r(&t, &tm);
  char buf[32];
  std::strftime(buf, sizeof(buf), "%Y-%m-%dT%H:%M:%SZ", &tm);
  return buf;
}

inline std::vector<std::string> flag_overrides(const Options& o) {
  std::vector<std::string> out;
  if (o.out) out.push_back("output_dir=" + Json(*o.out).dump());
  if (o.seed_list) {
    Json seeds = Json::array();
    std::stringstream ss(*o.seed_list);
    std::string item;
    while (std::getline(ss, item, ',')) {
      std::uint64_t v = 0;
      const auto [ptr, ec] = std::from_chars(item.data(), item.data() + item.size(), v);
      if (item.empty() || ec != std::errc() || ptr != item.data() + item.size()) {
        throw ConfigError("--seed-list must be comma-separated non-negative integers", "seeds");
      }
      seeds.push_back(v);
    }
    out.push_back("seeds=" + seeds.dump());
  }
  if (o.workers) out.push_back("workers=" + std::to_string(*o.workers));
  if (!o.strategies.empty()) out.push_back("al.strategies=" + Json(o.strategies).dump());
  if (o.bins_mode) out.push_back("bins.mode=" + Json(*o.bins_mode).dump());
  if (o.n_bins) out.push_back("bins.n_bins=" + std::to_string(*o.n_bins));
  if (o.n_candidates) out.push_back("addone.n_candidates=" + std::to_string(*o.n_candidates));
  if (o.fraction) out.push_back("unbounded.pool_fraction=" + Json(*o.fraction).dump());
  return out;
}

// Output directory plus manifest bookkeeping for one command invocation.
class RunOutput {
public:
  RunOutput(std::filesystem::path dir, std::string command, const ExperimentConfig& cfg)
      : dir_(std::move(dir)) {
    std::error_code ec;
    std::filesystem::create_directories(dir_, ec);
    if (ec) throw IoError("cannot create output directory '" + dir_.string() + "': " + ec.message());
    manifest_ = {{"run_id", run_id(cfg)},
                 {"version", kVersion},
                 {"command", std::move(command)},
                 {"status", "running"},
                 {"started_at", utc_now()},
                 {"config", to_json(cfg)},
                 {"outputs", Json::array()}};
    flush();
  }

  std::filesystem::path path(const std::string& name) {
    manifest_["outputs"].push_back(name);
    return dir_ / name;
  }

  void finish(const std::string& status) {
    manifest_["status"] = status;
    manifest_["finished_at"] = utc_now();
    flush();
  }

private:
  void flush() { write_text_file(dir_ / "manifest.json", manifest_.dump(2) + "\n"); }

  std::filesystem::path dir_;
  Json manifest_;
};

inline Dataset load_dataset(const ExperimentConfig& cfg) {
  if (!cfg.dataset.synthetic && !std::filesystem::exists(cfg.dataset.path)) {
    throw ConfigError("dataset.path '" + cfg.dataset.path + "' does not exist", "dataset.path");
  }
  return prepare_dataset(cfg);
}

inline Json base_summary(const std::string& command, const ExperimentConfig& cfg) {
  return {{"command", command},
          {"run_id", run_id(cfg)},
          {"version", kVersion},
          {"config", to_json(cfg)},
          {"status", "ok"}};
}

inline Json error_json(const Error& e) {
  Json j = {{"kind", e.kind()}, {"message", e.what()}};
  if (const auto* c = dynamic_cast<const ConfigError*>(&e); c != nullptr && !c->field().empty()) {
    j["field"] = c->field();
  }
  if (const auto* d = dynamic_cast<const DataError*>(&e); d != nullptr && d->row() >= 0) {
    j["row"] = d->row();
  }
  if (const auto* s = dynamic_cast<const SolverError*>(&e); s != nullptr) {
    j["best_residual"] = s->best_residual();
    j["iterations"] = s->iterations();
  }
  return j;
}

inline int exit_code_for(const Error& e) {
  if (dynamic_cast<const NumericalError*>(&e) != nullptr) return kNumericalError;
  if (dynamic_cast<const IoError*>(&e) != nullptr) return kIoError;
  return kConfigError;
}

inline int cmd_run(const ExperimentConfig& cfg, const Dataset& ds, RunOutput& output,
                   Json& summary) {
  const ExperimentResult result = run_experiment(ds, cfg);
  const std::string id = run_id(cfg);
  std::ostringstream rounds, queries;
  write_rounds_header(rounds);
  write_queries_header(queries);
  for (const auto& run : result.runs) {
    write_rounds_rows(rounds, id, run);
    write_queries_rows(queries, id, ds, run);
  }
  write_text_file(output.path("rounds.csv"), rounds.str());
  write_text_file(output.path("queries.csv"), queries.str());
  if (cfg.save_models) {
    std::filesystem::create_directories(std::filesystem::path(cfg.output_dir) / "models");
    for (const auto& run : result.runs) {
      if (run.error) continue;
      const std::string name = "models/" + std::string(to_string(run.strategy)) + "_seed" +
                               std::to_string(run.seed) + ".model";
      save_model(output.path(name).string(), run.final_model);
    }
  }
  summary.update(summary_json(result));
  bool failed = false;
  for (const auto& run : result.runs) failed = failed || run.error.has_value();
  return failed ? kNumericalError : kOk;
}

inline int cmd_bins(const ExperimentConfig& cfg, const Dataset& ds, RunOutput& output,
                    Json& summary) {
  const std::uint64_t seed = cfg.seeds.front();
  const BinReport report = bin_analysis(ds, cfg, cfg.bin_mode, cfg.n_bins, seed);
  std::ostringstream body;
  write_bins_csv(body, report);
  write_text_file(output.path("bins.csv"), body.str());
  summary["bins"] = {{"mode", std::string(to_string(report.mode))},
                     {"n_bins", report.n_bins},
                     {"seed", seed},
                     {"bin_sizes", report.bin_sizes},
                     {"baseline_test_accuracy", report.baseline_accuracy}};
  return kOk;
}

inline int cmd_addone(const ExperimentConfig& cfg, const Dataset& ds, RunOutput& output,
                      Json& summary) {
  const std::uint64_t seed = cfg.seeds.front();
  const AddOneReport report = add_one_in_study(ds, cfg, cfg.addone_candidates, seed);
  std::ostringstream body;
  write_addone_csv(body, ds, report);
  write_text_file(output.path("addone.csv"), body.str());
  summary["addone"] = {{"seed", seed},
                       {"requested", report.requested},
                       {"candidates", report.rows.size()},
                       {"spearman", report.spearman ? Json(*report.spearman) : Json(nullptr)},
                       {"sign_agreement",
                        report.sign_agreement ? Json(*report.sign_agreement) : Json(nullptr)},
                       {"warnings", report.warnings}};
  return kOk;
}

inline int cmd_unbounded(const ExperimentConfig& cfg, const Dataset& ds, RunOutput& output,
                         Json& summary) {
  std::vector<UnboundedRun> runs(cfg.seeds.size());
  salutary::detail::parallel_for(runs.size(), cfg.workers, [&](std::size_t k) {
    runs[k] = run_unbounded(ds, cfg, cfg.seeds[k]);
  });
  const std::string id = run_id(cfg);
  std::ostringstream rounds, queries;
  write_rounds_header(rounds);
  write_queries_header(queries);
  Json per_seed = Json::array();
  std::vector<SeedRun> seed_runs;
  std::vector<double> supervised;
  bool failed = false;
  for (const auto& u : runs) {
    write_rounds_rows(rounds, id, u.run);
    write_queries_rows(queries, id, ds, u.run);
    Json entry = {{"seed", u.run.seed}, {"queried_cap", u.queried_cap}};
    if (u.run.error) {
      failed = true;
      entry["error"] = {{"kind", u.run.error_kind}, {"message", *u.run.error}};
    } else {
      entry["best_round"] = u.best_round;
      entry["best_val_accuracy"] = u.best_val_accuracy;
      entry["best_test_accuracy"] = u.best_test_accuracy;
      entry["supervised_test_accuracy"] = u.supervised_test_accuracy;
      supervised.push_back(u.supervised_test_accuracy);
      // Summaries use the selected round as the run's final accuracy.
      SeedRun selected = u.run;
      selected.rounds.resize(static_cast<std::size_t>(u.best_round) + 1);
      seed_runs.push_back(std::move(selected));
    }
    per_seed.push_back(std::move(entry));
  }
  write_text_file(output.path("rounds.csv"), rounds.str());
  write_text_file(output.path("queries.csv"), queries.str());
  const auto sums = summarize(seed_runs, {Strategy::kSalutary});
  double sup_mean = 0.0, sup_ss = 0.0;
  for (double v : supervised) sup_mean += v;
  if (!supervised.empty()) sup_mean /= static_cast<double>(supervised.size());
  for (double v : supervised) sup_ss += (v - sup_mean) * (v - sup_mean);
  summary["unbounded"] = {
      {"pool_fraction", cfg.unbounded_fraction},
      {"selection", cfg.unbounded_selection},
      {"runs", per_seed},
      {"mean_best_test_accuracy", sums.front().mean_final_accuracy},
      {"std_best_test_accuracy", sums.front().std_final_accuracy},
      {"mean_supervised_test_accuracy", supervised.empty() ? Json(nullptr) : Json(sup_mean)},
      {"std_supervised_test_accuracy",
       supervised.size() > 1
           ? Json(std::sqrt(sup_ss / static_cast<double>(supervised.size() - 1)))
           : Json(0.0)},
  };
  return failed ? kNumericalError : kOk;
}

}  // namespace detail

// Runs one command. Diagnostics go to `log`; result files to the configured
// output directory. Returns the process exit code.
inline int execute(const Options& opts, std::ostream& log) {
  ExperimentConfig cfg;
  try {
    Json doc = read_config_json(opts.config_path);
    for (const auto& o : opts.overrides) apply_override(doc, o);
    for (const auto& o : detail::flag_overrides(opts)) apply_override(doc, o);
    cfg = config_from_json(doc);
  } catch (const Error& e) {
    log << "config error: " << e.what() << "\n";
    if (opts.out) {
      try {
        std::filesystem::create_directories(*opts.out);
        Json summary = {{"command", opts.command},
                        {"status", "error"},
                        {"error", detail::error_json(e)}};
        write_text_file(std::filesystem::path(*opts.out) / "summary.json", summary.dump(2) + "\n");
      } catch (const std::exception&) {
      }
    }
    return detail::exit_code_for(e);
  }

  std::optional<detail::RunOutput> output;
  Json summary = detail::base_summary(opts.command, cfg);
  int code = kOk;
  try {
    output.emplace(cfg.output_dir, opts.command, cfg);
    const Dataset ds = detail::load_dataset(cfg);
    summary["label_mapping"] = label_mapping_json(ds);
    if (opts.command == "run") {
      code = detail::cmd_run(cfg, ds, *output, summary);
    } else if (opts.command == "bins") {
      code = detail::cmd_bins(cfg, ds, *output, summary);
    } else if (opts.command == "addone") {
      code = detail::cmd_addone(cfg, ds, *output, summary);
    } else if (opts.command == "unbounded") {
      code = detail::cmd_unbounded(cfg, ds, *output, summary);
    } else {
      throw ConfigError("unknown command '" + opts.command + "'");
    }
    if (code != kOk) summary["status"] = "numerical_failure";
  } catch (const Error& e) {
    log << e.kind() << " error: " << e.what() << "\n";
    summary["status"] = "error";
    summary["error"] = detail::error_json(e);
    code = detail::exit_code_for(e);
  } catch (const std::filesystem::filesystem_error& e) {
    log << "io error: " << e.what() << "\n";
    summary["status"] = "error";
    summary["error"] = {{"kind", "io"}, {"message", e.what()}};
    code = kIoError;
  }

  try {
    if (!output) {
      // Directory creation failed; nothing else can be written.
      return code;
    }
    write_text_file(output->path("summary.json"), summary.dump(2) + "\n");
    output->finish(code == kOk ? "ok" : std::string(summary["status"]));
  } catch (const Error& e) {
    log << "io error: " << e.what() << "\n";
    return kIoError;
  }
  return code;
}

// argv front end. Flags may appear before or after the subcommand.
inline int main(int argc, char** argv, std::ostream& log = std::cerr) {
  CLI::App app{"Influence-based active learning with salutary labels"};
  app.require_subcommand(1, 1);
  Options opts;
  std::string out, seed_list;
  int workers = 0;
  app.add_option("--config", opts.config_path, "Experiment config (JSON)")->required();
  app.add_option("--out", out, "Output directory (overrides output_dir)");
  app.add_option("--seed-list", seed_list, "Comma-separated run seeds (overrides seeds)");
  app.add_option("--workers", workers, "Worker threads for independent seeds")
      ->check(CLI::PositiveNumber);
  app.add_option("--strategy", opts.strategies, "Strategy id; repeatable (overrides al.strategies)");
  app.add_option("--set", opts.overrides, "Config override dotted.path=value; repeatable");

  auto* run = app.add_subcommand("run", "Active-learning rounds for every strategy and seed");
  auto* bins = app.add_subcommand("bins", "Influence-sorted bin study");
  auto* addone = app.add_subcommand("addone", "Influence vs add-one-in retraining study");
  auto* unbounded = app.add_subcommand("unbounded", "Salutary queries up to a pool fraction");
  std::string mode;
  long long n_bins = 0, n_candidates = -1;
  double fraction = 0.0;
  bins->add_option("--mode", mode, "train-relabel | pool-add");
  bins->add_option("--n-bins", n_bins, "Number of bins (default 20)");
  addone->add_option("--n-candidates", n_candidates, "Pool points to retrain (default 300)");
  unbounded->add_option("--fraction", fraction, "Pool fraction cap (default 0.5)");
  for (auto* sub : {run, bins, addone, unbounded}) {
    sub->fallthrough();
    sub->add_option("overrides", opts.overrides, "dotted.path=value overrides");
  }

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int rc = app.exit(e, log, log);
    return rc == 0 ? kOk : kConfigError;
  }
  opts.command = app.get_subcommands().front()->get_name();
  if (!out.empty()) opts.out = out;
  if (!seed_list.empty()) opts.seed_list = seed_list;
  if (workers > 0) opts.workers = workers;
  if (bins->count("--mode") > 0) opts.bins_mode = mode;
  if (bins->count("--n-bins") > 0) opts.n_bins = n_bins;
  if (addone->count("--n-candidates") > 0) opts.n_candidates = n_candidates;
  if (unbounded->count("--fraction") > 0) opts.fraction = fraction;
  return execute(opts, log);
}

}  // namespace salutary::cli
