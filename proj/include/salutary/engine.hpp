#pragma once

#include <algorithm>
#include <array>
#include <atomic>
#include <chrono>
#include <cmath>
#include <cstdint>
#include <functional>
#include <map>
#include <mutex>
#include <numeric>
#include <optional>
#include <random>
#include <string>
#include <thread>
#include <vector>

#include "salutary/data.hpp"
#include "salutary/error.hpp"
#include "salutary/influence.hpp"
#include "salutary/model.hpp"
#include "salutary/strategies.hpp"

namespace salutary {

struct SyntheticSpec {
  Index n_per_class = 200;
  int classes = 2;
  Index features = 5;
  double separation = 3.0;
  std::uint64_t seed = 0;
  // Fraction of training-split labels flipped to another class.
  double label_noise = 0.0;
};

struct DatasetSpec {
  std::string path;
  std::string label_column = "label";
  bool has_header = true;
  std::optional<SyntheticSpec> synthetic;
};

enum class BinMode { kTrainRelabel, kPoolAdd };

inline std::string_view to_string(BinMode m) {
  return m == BinMode::kTrainRelabel ? "train-relabel" : "pool-add";
}

inline BinMode parse_bin_mode(std::string_view s) {
  if (s == "train-relabel") return BinMode::kTrainRelabel;
  if (s == "pool-add") return BinMode::kPoolAdd;
  throw ConfigError("unknown bin mode '" + std::string(s) + "'", "bins.mode");
}

struct ExperimentConfig {
  DatasetSpec dataset;
  std::array<double, 3> fractions{0.6, 0.2, 0.2};
  std::uint64_t split_seed = 0;
  std::vector<std::uint64_t> seeds{0, 1, 2, 3, 4};
  Index n_init = 300;
  int rounds = 10;
  Index budget = 10;
  std::vector<Strategy> strategies{Strategy::kSalutary};
  bool warm_start = false;
  bool standardize = true;
  TrainConfig train;
  CgConfig cg;
  Index dense_cap = kDefaultDenseCap;
  double unbounded_fraction = 0.5;
  std::string unbounded_selection = "best_validation";
  BinMode bin_mode = BinMode::kPoolAdd;
  int n_bins = 20;
  Index addone_candidates = 300;
  int workers = 1;
  std::string output_dir = "out";
  bool save_models = false;

  void validate() const {
    if (dataset.path.empty() && !dataset.synthetic.has_value()) {
      throw ConfigError("dataset.path is required", "dataset.path");
    }
    if (rounds < 0) throw ConfigError("al.rounds must be >= 0", "al.rounds");
    if (budget < 1) throw ConfigError("al.budget must be >= 1", "al.budget");
    if (n_init < 1) throw ConfigError("al.n_init must be >= 1", "al.n_init");
    if (seeds.empty()) throw ConfigError("seeds must be nonempty", "seeds");
    if (strategies.empty()) throw ConfigError("al.strategies must be nonempty", "al.strategies");
    if (!(unbounded_fraction > 0.0 && unbounded_fraction <= 1.0)) {
      throw ConfigError("unbounded.pool_fraction must be in (0, 1]", "unbounded.pool_fraction");
    }
    if (unbounded_selection != "best_validation") {
      throw ConfigError("unbounded.selection must be 'best_validation'", "unbounded.selection");
    }
    if (n_bins < 2) throw ConfigError("bins.n_bins must be >= 2", "bins.n_bins");
    if (workers < 1) throw ConfigError("workers must be >= 1", "workers");
    if (dense_cap < 1) throw ConfigError("dense_cap must be >= 1", "dense_cap");
    for (double f : fractions) {
      if (!(f > 0)) throw ConfigError("split fractions must be positive", "split.fractions");
    }
    if (std::abs(fractions[0] + fractions[1] + fractions[2] - 1.0) > 1e-9) {
      throw ConfigError("split fractions must sum to 1", "split.fractions");
    }
    train.validate();
    cg.validate();
  }
};

// Why a ground-truth label was read.
enum class LabelUse { kTraining, kValidation, kEvaluation, kAccounting };

// Records every ground-truth label read made by the engine, so tests can
// check which labels reached training and when the test split was touched.
class LabelAudit {
public:
  void record(Index i, LabelUse use) {
    const std::lock_guard lock(mu_);
    log_.push_back({i, use});
  }
  std::vector<Index> reads(LabelUse use) const {
    const std::lock_guard lock(mu_);
    std::vector<Index> out;
    for (const auto& [i, u] : log_) {
      if (u == use) out.push_back(i);
    }
    return out;
  }
  std::vector<std::pair<Index, LabelUse>> log() const {
    const std::lock_guard lock(mu_);
    return log_;
  }

private:
  mutable std::mutex mu_;
  std::vector<std::pair<Index, LabelUse>> log_;
};

struct RoundRecord {
  int round = 0;
  Index labeled_size = 0;
  Index pool_size = 0;
  double val_accuracy = 0.0;
  double test_accuracy = 0.0;
  // Entries carry the label actually used for training.
  QueryBatch queried;
  std::vector<int> ground_truth;  // aligned with queried.entries
  int disagreements = 0;
  double wall_time = 0.0;  // seconds
};

struct SeedRun {
  Strategy strategy = Strategy::kRandom;
  std::uint64_t seed = 0;
  std::vector<RoundRecord> rounds;
  FittedModel final_model;
  std::optional<std::string> error;
  std::string error_kind;

  int disagreements() const {
    int total = 0;
    for (const auto& r : rounds) total += r.disagreements;
    return total;
  }
  double final_test_accuracy() const {
    return rounds.empty() ? std::nan("") : rounds.back().test_accuracy;
  }
};

struct StrategySummary {
  Strategy strategy = Strategy::kRandom;
  double mean_final_accuracy = 0.0;
  double std_final_accuracy = 0.0;  // sample standard deviation, 0 for one seed
  int disagreements = 0;
  int failed_seeds = 0;
};

struct ExperimentResult {
  ExperimentConfig config;
  std::vector<SeedRun> runs;  // strategy-major, seeds in config order
  std::vector<StrategySummary> summary;
};

// Stream seed for a named purpose within one run seed.
inline std::uint64_t derive_seed(std::uint64_t seed, std::uint64_t purpose) {
  std::seed_seq seq{static_cast<std::uint32_t>(seed), static_cast<std::uint32_t>(seed >> 32),
                    static_cast<std::uint32_t>(purpose), 0x53414c55u};
  std::array<std::uint32_t, 2> out{};
  seq.generate(out.begin(), out.end());
  return (static_cast<std::uint64_t>(out[0]) << 32) | out[1];
}

enum : std::uint64_t { kInitStream = 1, kQueryStream = 2, kAddOneStream = 3, kNoiseStream = 4 };

// Loads the configured dataset. Synthetic label noise is applied to the
// training split only, so validation and test labels stay clean.
inline Dataset prepare_dataset(const ExperimentConfig& cfg) {
  if (cfg.dataset.synthetic.has_value()) {
    const auto& s = *cfg.dataset.synthetic;
    Dataset ds = synthetic_blobs(s.n_per_class, s.classes, s.features, s.separation, s.seed);
    if (s.label_noise > 0.0) {
      const auto sp = split(ds, cfg.fractions[0], cfg.fractions[1], cfg.fractions[2],
                            cfg.split_seed);
      ds = flip_labels(ds, sp.train, s.label_noise, derive_seed(s.seed, kNoiseStream));
    }
    return ds;
  }
  return load_csv(cfg.dataset.path, cfg.dataset.label_column, cfg.dataset.has_header);
}

namespace detail {

// Ground-truth access point for the engine; every read is audited.
class GroundTruth {
public:
  GroundTruth(const Dataset& ds, LabelAudit* audit) : ds_(&ds), audit_(audit) {}
  int operator()(Index i, LabelUse use) const {
    if (audit_ != nullptr) audit_->record(i, use);
    return ds_->label(i);
  }
  std::vector<int> labels(const IndexSet& idx, LabelUse use) const {
    std::vector<int> out;
    out.reserve(idx.size());
    for (Index i : idx) out.push_back((*this)(i, use));
    return out;
  }

private:
  const Dataset* ds_;
  LabelAudit* audit_;
};

// Split, initial labeled set and standardized features for one run seed.
struct RunSetup {
  Dataset ds;
  SplitIndices split;
  PoolState state;
};

inline RunSetup setup_run(const Dataset& raw, const ExperimentConfig& cfg, std::uint64_t seed) {
  RunSetup s;
  s.split = split(raw, cfg.fractions[0], cfg.fractions[1], cfg.fractions[2], cfg.split_seed);
  s.state = init_pool_split(s.split.train, cfg.n_init, derive_seed(seed, kInitStream));
  s.ds = cfg.standardize ? standardize(raw, s.state.labeled).first : raw;
  return s;
}

inline FittedModel fit(const Dataset& ds, const TrainingSpec& spec, const TrainConfig& config,
                       const std::optional<Vector>& warm = std::nullopt) {
  FittedModel m = train(ds, spec.indices, spec.overrides, config, warm);
  if (!m.converged) {
    throw NumericalError("training did not converge within " +
                         std::to_string(config.max_iterations) + " iterations (gradient norm " +
                         format_double(m.final_grad_norm) + ")");
  }
  return m;
}

inline void insert_sorted(IndexSet& set, Index i) {
  set.insert(std::lower_bound(set.begin(), set.end(), i), i);
}

inline void erase_sorted(IndexSet& set, Index i) {
  const auto it = std::lower_bound(set.begin(), set.end(), i);
  if (it == set.end() || *it != i) throw Error("index not present in set");
  set.erase(it);
}

// Runs `count` independent jobs on up to `workers` threads; job k writes only
// to slot k, so the output order never depends on scheduling.
inline void parallel_for(std::size_t count, int workers, const std::function<void(std::size_t)>& job) {
  if (workers <= 1 || count <= 1) {
    for (std::size_t k = 0; k < count; ++k) job(k);
    return;
  }
  std::atomic<std::size_t> next{0};
  std::vector<std::exception_ptr> errors(count);
  auto worker = [&] {
    for (std::size_t k = next++; k < count; k = next++) {
      try {
        job(k);
      } catch (...) {
        errors[k] = std::current_exception();
      }
    }
  };
  std::vector<std::thread> pool;
  const auto n = std::min<std::size_t>(static_cast<std::size_t>(workers), count);
  for (std::size_t t = 0; t < n; ++t) pool.emplace_back(worker);
  for (auto& t : pool) t.join();
  for (auto& e : errors) {
    if (e) std::rethrow_exception(e);
  }
}

// One active-learning trajectory. `max_rounds` bounds the loop; the strategy
// decides labels. Returns the per-round records (round 0 = initial model).
struct Trajectory {
  std::vector<RoundRecord> rounds;
  std::vector<FittedModel> models;  // one per round when keep_models
};

inline Trajectory run_rounds(const RunSetup& setup, const ExperimentConfig& cfg,
                             Strategy strategy, std::uint64_t seed, int max_rounds,
                             LabelAudit* audit, bool keep_models) {
  const Dataset& ds = setup.ds;
  const GroundTruth truth(ds, audit);
  PoolState state = setup.state;

  TrainingSpec spec;
  spec.indices = state.labeled;
  for (Index i : state.labeled) spec.overrides[i] = truth(i, LabelUse::kTraining);

  const std::vector<int> val_labels = truth.labels(setup.split.validation, LabelUse::kValidation);
  Trajectory out;
  auto timer = std::chrono::steady_clock::now();
  FittedModel model = fit(ds, spec, cfg.train);

  auto record = [&](int round, QueryBatch batch, std::vector<int> gt, int disagreements) {
    RoundRecord rec;
    rec.round = round;
    rec.labeled_size = state.labeled.size();
    rec.pool_size = state.pool.size();
    rec.val_accuracy = accuracy(model, ds, setup.split.validation, val_labels);
    rec.test_accuracy =
        accuracy(model, ds, setup.split.test, truth.labels(setup.split.test, LabelUse::kEvaluation));
    rec.queried = std::move(batch);
    rec.ground_truth = std::move(gt);
    rec.disagreements = disagreements;
    const auto now = std::chrono::steady_clock::now();
    rec.wall_time = std::chrono::duration<double>(now - timer).count();
    timer = now;
    out.rounds.push_back(std::move(rec));
    if (keep_models) out.models.push_back(model);
  };
  record(0, QueryBatch{{}, std::string(to_string(strategy)), 0}, {}, 0);

  for (int r = 1; r <= max_rounds && !state.pool.empty(); ++r) {
    std::optional<InfluenceContext> ctx;
    if (needs_influence(strategy)) {
      for (Index i : setup.split.validation) {
        if (audit != nullptr) audit->record(i, LabelUse::kValidation);
      }
      ctx = build_context(model, ds, spec, setup.split.validation, cfg.cg, cfg.dense_cap);
    }
    QueryRequest q;
    q.strategy = strategy;
    q.ds = &ds;
    q.model = &model;
    q.context = ctx ? &*ctx : nullptr;
    q.labeled = &state.labeled;
    q.pool = &state.pool;
    q.budget = cfg.budget;
    q.seed = derive_seed(seed, kQueryStream);
    q.round = r;
    QueryBatch batch = run_query(q);

    std::vector<int> gt;
    int disagreements = 0;
    for (auto& e : batch.entries) {
      if (e.assigned_label.has_value()) {
        state.assigned_labels[e.sample_id] = *e.assigned_label;
      } else {
        e.assigned_label = truth(e.sample_id, LabelUse::kTraining);
      }
      spec.overrides[e.sample_id] = *e.assigned_label;
      gt.push_back(truth(e.sample_id, LabelUse::kAccounting));
      if (gt.back() != *e.assigned_label) ++disagreements;
      erase_sorted(state.pool, e.sample_id);
      insert_sorted(state.labeled, e.sample_id);
    }
    spec.indices = state.labeled;
    if (spec.overrides.size() != spec.indices.size()) {
      throw Error("internal: training labels do not cover the labeled set");
    }
    model = fit(ds, spec, cfg.train,
                cfg.warm_start ? std::optional<Vector>(model.theta) : std::nullopt);
    record(r, std::move(batch), std::move(gt), disagreements);
  }
  if (!keep_models) out.models.push_back(model);
  return out;
}

}  // namespace detail

// One seed of the active-learning protocol: train on L, then R rounds of
// query -> annotate -> move from U to L -> retrain. Numerical failures are
// reported in the result rather than thrown.
inline SeedRun run_active_learning(const Dataset& raw, const ExperimentConfig& cfg,
                                   Strategy strategy, std::uint64_t seed,
                                   LabelAudit* audit = nullptr) {
  cfg.validate();
  SeedRun run;
  run.strategy = strategy;
  run.seed = seed;
  const auto setup = detail::setup_run(raw, cfg, seed);
  try {
    auto traj = detail::run_rounds(setup, cfg, strategy, seed, cfg.rounds, audit, false);
    run.rounds = std::move(traj.rounds);
    run.final_model = std::move(traj.models.back());
  } catch (const NumericalError& e) {
    run.error = e.what();
    run.error_kind = e.kind();
  }
  return run;
}

inline std::vector<StrategySummary> summarize(const std::vector<SeedRun>& runs,
                                              const std::vector<Strategy>& strategies) {
  std::vector<StrategySummary> out;
  for (Strategy s : strategies) {
    StrategySummary sum;
    sum.strategy = s;
    std::vector<double> finals;
    for (const auto& run : runs) {
      if (run.strategy != s) continue;
      if (run.error.has_value()) {
        ++sum.failed_seeds;
        continue;
      }
      finals.push_back(run.final_test_accuracy());
      sum.disagreements += run.disagreements();
    }
    if (!finals.empty()) {
      const double n = static_cast<double>(finals.size());
      sum.mean_final_accuracy = std::accumulate(finals.begin(), finals.end(), 0.0) / n;
      double ss = 0.0;
      for (double f : finals) ss += (f - sum.mean_final_accuracy) * (f - sum.mean_final_accuracy);
      sum.std_final_accuracy = finals.size() > 1 ? std::sqrt(ss / (n - 1.0)) : 0.0;
    } else {
      sum.mean_final_accuracy = std::nan("");
    }
    out.push_back(sum);
  }
  return out;
}

// Every configured strategy x seed; seeds run on cfg.workers threads.
inline ExperimentResult run_experiment(const Dataset& raw, const ExperimentConfig& cfg) {
  cfg.validate();
  ExperimentResult result;
  result.config = cfg;
  result.runs.resize(cfg.strategies.size() * cfg.seeds.size());
  detail::parallel_for(result.runs.size(), cfg.workers, [&](std::size_t k) {
    const Strategy s = cfg.strategies[k / cfg.seeds.size()];
    const std::uint64_t seed = cfg.seeds[k % cfg.seeds.size()];
    result.runs[k] = run_active_learning(raw, cfg, s, seed);
  });
  result.summary = summarize(result.runs, cfg.strategies);
  return result;
}

inline int count_disagreements(const SeedRun& run) { return run.disagreements(); }

inline int count_disagreements(const ExperimentResult& result) {
  int total = 0;
  for (const auto& run : result.runs) total += run.disagreements();
  return total;
}

struct UnboundedRun {
  SeedRun run;
  int best_round = 0;
  double best_val_accuracy = 0.0;
  double best_test_accuracy = 0.0;
  double supervised_test_accuracy = 0.0;
  Index queried_cap = 0;
};

// Salutary queries in full batches of b until ceil(fraction * |U0|) points
// would be exceeded; the round with the best validation accuracy (earliest on
// ties) is selected. Also reports a model trained on the whole training split
// with ground-truth labels.
inline UnboundedRun run_unbounded(const Dataset& raw, const ExperimentConfig& cfg,
                                  std::uint64_t seed, LabelAudit* audit = nullptr) {
  cfg.validate();
  UnboundedRun out;
  out.run.strategy = Strategy::kSalutary;
  out.run.seed = seed;
  const auto setup = detail::setup_run(raw, cfg, seed);
  out.queried_cap = static_cast<Index>(
      std::ceil(cfg.unbounded_fraction * static_cast<double>(setup.state.pool.size())));
  const int rounds = static_cast<int>(out.queried_cap / cfg.budget);
  try {
    auto traj = detail::run_rounds(setup, cfg, Strategy::kSalutary, seed, rounds, audit, true);
    out.run.rounds = std::move(traj.rounds);
    for (const auto& rec : out.run.rounds) {
      if (rec.val_accuracy > out.run.rounds[static_cast<std::size_t>(out.best_round)].val_accuracy) {
        out.best_round = rec.round;
      }
    }
    const auto& best = out.run.rounds[static_cast<std::size_t>(out.best_round)];
    out.best_val_accuracy = best.val_accuracy;
    out.best_test_accuracy = best.test_accuracy;
    out.run.final_model = traj.models[static_cast<std::size_t>(out.best_round)];

    const detail::GroundTruth truth(setup.ds, audit);
    TrainingSpec all;
    all.indices = setup.split.train;
    for (Index i : all.indices) all.overrides[i] = truth(i, LabelUse::kTraining);
    const FittedModel full = detail::fit(setup.ds, all, cfg.train);
    out.supervised_test_accuracy =
        accuracy(full, setup.ds, setup.split.test,
                 truth.labels(setup.split.test, LabelUse::kEvaluation));
  } catch (const NumericalError& e) {
    out.run.error = e.what();
    out.run.error_kind = e.kind();
  }
  return out;
}

struct BinRow {
  int bin_index = -1;  // -1 for the baseline row
  std::string arm;     // gt | salutary | baseline
  double test_accuracy = 0.0;
  std::optional<double> mean_influence;
  Index size = 0;
};

struct BinReport {
  BinMode mode = BinMode::kPoolAdd;
  int n_bins = 0;
  double baseline_accuracy = 0.0;
  std::vector<BinRow> rows;  // baseline first, then bins ascending
  std::vector<Index> bin_sizes;
};

// Equal-size bins over an ascending order; the remainder joins the last bin.
inline std::vector<Index> bin_sizes(Index count, int n_bins) {
  if (n_bins < 2) throw ConfigError("n_bins must be >= 2", "bins.n_bins");
  const auto nb = static_cast<Index>(n_bins);
  if (count < nb) {
    throw ConfigError("not enough samples (" + std::to_string(count) + ") for " +
                          std::to_string(n_bins) + " nonempty bins",
                      "bins.n_bins");
  }
  std::vector<Index> sizes(nb, count / nb);
  sizes.back() += count % nb;
  return sizes;
}

// Sorts the target set by salutary influence and retrains per bin.
//  train-relabel: whole training split; bin labels replaced by salutary labels.
//  pool-add: initial labeled set plus the bin, once with ground truth and once
//            with salutary labels.
inline BinReport bin_analysis(const Dataset& raw, const ExperimentConfig& cfg, BinMode mode,
                              int n_bins, std::uint64_t seed, LabelAudit* audit = nullptr) {
  cfg.validate();
  BinReport report;
  report.mode = mode;
  report.n_bins = n_bins;

  const auto sp = split(raw, cfg.fractions[0], cfg.fractions[1], cfg.fractions[2], cfg.split_seed);
  IndexSet base_set;
  IndexSet target;
  if (mode == BinMode::kTrainRelabel) {
    base_set = sp.train;
    target = sp.train;
  } else {
    const auto state = init_pool_split(sp.train, cfg.n_init, derive_seed(seed, kInitStream));
    base_set = state.labeled;
    target = state.pool;
  }
  report.bin_sizes = bin_sizes(target.size(), n_bins);
  const Dataset ds = cfg.standardize ? standardize(raw, base_set).first : raw;
  const detail::GroundTruth truth(ds, audit);

  TrainingSpec base;
  base.indices = base_set;
  for (Index i : base_set) base.overrides[i] = truth(i, LabelUse::kTraining);
  const std::vector<int> test_labels = truth.labels(sp.test, LabelUse::kEvaluation);
  for (Index i : sp.validation) {
    if (audit != nullptr) audit->record(i, LabelUse::kValidation);
  }

  const FittedModel model = detail::fit(ds, base, cfg.train);
  report.baseline_accuracy = accuracy(model, ds, sp.test, test_labels);
  report.rows.push_back({-1, "baseline", report.baseline_accuracy, std::nullopt, 0});

  const auto ctx = build_context(model, ds, base, sp.validation, cfg.cg, cfg.dense_cap);
  const RowMatrix scores = influence_matrix(ctx, ds, target, base_set.size());
  std::vector<SalutaryLabel> best(target.size());
  for (std::size_t k = 0; k < target.size(); ++k) {
    const auto row = scores.row(static_cast<Eigen::Index>(k));
    best[k].label = argmax(row);
    best[k].score = row[best[k].label];
  }
  std::vector<std::size_t> order(target.size());
  std::iota(order.begin(), order.end(), std::size_t{0});
  std::stable_sort(order.begin(), order.end(), [&](std::size_t a, std::size_t b) {
    return best[a].score < best[b].score;
  });

  std::size_t offset = 0;
  for (int b = 0; b < n_bins; ++b) {
    const Index size = report.bin_sizes[static_cast<std::size_t>(b)];
    double mean = 0.0;
    LabelOverride salutary;
    IndexSet members;
    for (std::size_t k = offset; k < offset + size; ++k) {
      const std::size_t t = order[k];
      mean += best[t].score;
      salutary[target[t]] = best[t].label;
      members.push_back(target[t]);
    }
    mean /= static_cast<double>(size);
    offset += size;

    auto evaluate = [&](const TrainingSpec& spec) {
      return accuracy(detail::fit(ds, spec, cfg.train), ds, sp.test, test_labels);
    };
    if (mode == BinMode::kTrainRelabel) {
      TrainingSpec relabel = base;
      for (const auto& [i, c] : salutary) relabel.overrides[i] = c;
      report.rows.push_back({b, "salutary", evaluate(relabel), mean, size});
    } else {
      TrainingSpec with_gt = base;
      TrainingSpec with_sl = base;
      for (Index i : members) {
        with_gt.indices.push_back(i);
        with_gt.overrides[i] = truth(i, LabelUse::kTraining);
        with_sl.indices.push_back(i);
        with_sl.overrides[i] = salutary[i];
      }
      std::sort(with_gt.indices.begin(), with_gt.indices.end());
      std::sort(with_sl.indices.begin(), with_sl.indices.end());
      report.rows.push_back({b, "gt", evaluate(with_gt), mean, size});
      report.rows.push_back({b, "salutary", evaluate(with_sl), mean, size});
    }
  }
  return report;
}

struct AddOneRow {
  Index sample_id = 0;
  int label = 0;
  double predicted_decrease = 0.0;
  double actual_decrease = 0.0;
};

struct AddOneReport {
  std::vector<AddOneRow> rows;
  std::optional<double> spearman;
  std::optional<double> sign_agreement;
  std::vector<std::string> warnings;
  Index requested = 0;
};

// Predicted (influence) vs actual (retrained) validation-loss decrease for
// seeded-random pool points added with their ground-truth labels.
inline AddOneReport add_one_in_study(const Dataset& raw, const ExperimentConfig& cfg,
                                     Index n_candidates, std::uint64_t seed,
                                     LabelAudit* audit = nullptr) {
  cfg.validate();
  AddOneReport report;
  report.requested = n_candidates;
  const auto setup = detail::setup_run(raw, cfg, seed);
  const Dataset& ds = setup.ds;
  const detail::GroundTruth truth(ds, audit);
  if (n_candidates > setup.state.pool.size()) {
    report.warnings.push_back("n_candidates " + std::to_string(n_candidates) +
                              " clamped to pool size " + std::to_string(setup.state.pool.size()));
    n_candidates = setup.state.pool.size();
  }
  if (n_candidates == 0) return report;

  TrainingSpec base;
  base.indices = setup.state.labeled;
  for (Index i : base.indices) base.overrides[i] = truth(i, LabelUse::kTraining);
  for (Index i : setup.split.validation) {
    if (audit != nullptr) audit->record(i, LabelUse::kValidation);
  }
  const FittedModel model = detail::fit(ds, base, cfg.train);
  const auto ctx = build_context(model, ds, base, setup.split.validation, cfg.cg, cfg.dense_cap);

  IndexSet picks = setup.state.pool;
  std::mt19937_64 rng(derive_seed(seed, kAddOneStream));
  std::shuffle(picks.begin(), picks.end(), rng);
  picks.resize(n_candidates);
  std::sort(picks.begin(), picks.end());

  report.rows.resize(picks.size());
  for (std::size_t k = 0; k < picks.size(); ++k) {
    report.rows[k].sample_id = picks[k];
    report.rows[k].label = truth(picks[k], LabelUse::kTraining);
  }
  const Index n = base.indices.size();
  detail::parallel_for(picks.size(), cfg.workers, [&](std::size_t k) {
    auto& row = report.rows[k];
    row.predicted_decrease = influence_score(ctx, ds.row(row.sample_id), row.label, n);
    row.actual_decrease = add_one_in_actual(ds, base, setup.split.validation,
                                            Candidate{row.sample_id, row.label}, cfg.train, model);
  });

  std::vector<double> pred, act;
  Index agree = 0;
  for (const auto& row : report.rows) {
    pred.push_back(row.predicted_decrease);
    act.push_back(row.actual_decrease);
    if ((row.predicted_decrease > 0) == (row.actual_decrease > 0)) ++agree;
  }
  report.sign_agreement = static_cast<double>(agree) / static_cast<double>(report.rows.size());
  if (report.rows.size() >= 2) {
    try {
      report.spearman = spearman(pred, act);
    } catch (const NumericalError& e) {
      report.warnings.push_back(e.what());
    }
  }
  return report;
}

}  // namespace salutary
