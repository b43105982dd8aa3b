#pragma once

#include <algorithm>
#include <array>
#include <cmath>
#include <cstdint>
#include <limits>
#include <optional>
#include <random>
#include <string>
#include <string_view>
#include <vector>

#include <Eigen/Dense>

#include "salutary/data.hpp"
#include "salutary/error.hpp"
#include "salutary/influence.hpp"
#include "salutary/model.hpp"

namespace salutary {

enum class Strategy {
  kRandom,
  kEntropy,
  kMargin,
  kLeastConfidence,
  kCoreset,
  kBadge,
  kIsal,
  kSalutary,
  kSalutaryGt,
};

inline constexpr std::array<std::pair<Strategy, std::string_view>, 9> kStrategyNames{{
    {Strategy::kRandom, "random"},
    {Strategy::kEntropy, "entropy"},
    {Strategy::kMargin, "margin"},
    {Strategy::kLeastConfidence, "least_confidence"},
    {Strategy::kCoreset, "coreset"},
    {Strategy::kBadge, "badge"},
    {Strategy::kIsal, "isal"},
    {Strategy::kSalutary, "salutary"},
    {Strategy::kSalutaryGt, "salutary_gt"},
}};

inline std::string_view to_string(Strategy s) {
  for (const auto& [k, name] : kStrategyNames) {
    if (k == s) return name;
  }
  return "unknown";
}

inline Strategy parse_strategy(std::string_view name) {
  for (const auto& [k, n] : kStrategyNames) {
    if (n == name) return k;
  }
  throw ConfigError("unknown strategy '" + std::string(name) + "'", "al.strategies");
}

inline bool needs_influence(Strategy s) {
  return s == Strategy::kIsal || s == Strategy::kSalutary || s == Strategy::kSalutaryGt;
}

struct QueryEntry {
  Index sample_id = 0;
  // Self-assigned label; empty means the ground truth is to be queried.
  std::optional<int> assigned_label;
  double score = 0.0;
  int rank = 0;
};

struct QueryBatch {
  std::vector<QueryEntry> entries;
  std::string strategy;
  int round = 0;

  std::size_t size() const { return entries.size(); }
  IndexSet ids() const {
    IndexSet out;
    out.reserve(entries.size());
    for (const auto& e : entries) out.push_back(e.sample_id);
    return out;
  }
};

namespace detail {

inline void check_query_args(const IndexSet& pool, Index budget) {
  if (pool.empty()) throw ConfigError("cannot query an empty pool");
  if (budget == 0) throw ConfigError("budget must be >= 1", "al.budget");
}

// Top-`budget` of pool by (score desc, sample_id asc); labels are taken from
// `labels` (aligned with pool) when given.
inline QueryBatch top_scored(const IndexSet& pool, const std::vector<double>& scores,
                             Index budget, std::string_view strategy,
                             const std::vector<int>* labels = nullptr) {
  std::vector<std::size_t> order(pool.size());
  std::iota(order.begin(), order.end(), std::size_t{0});
  const auto k = std::min<std::size_t>(budget, pool.size());
  std::partial_sort(order.begin(), order.begin() + static_cast<std::ptrdiff_t>(k), order.end(),
                    [&](std::size_t a, std::size_t b) {
                      if (scores[a] != scores[b]) return scores[a] > scores[b];
                      return pool[a] < pool[b];
                    });
  QueryBatch batch;
  batch.strategy = std::string(strategy);
  for (std::size_t r = 0; r < k; ++r) {
    QueryEntry e;
    e.sample_id = pool[order[r]];
    e.score = scores[order[r]];
    e.rank = static_cast<int>(r + 1);
    if (labels != nullptr) e.assigned_label = (*labels)[order[r]];
    batch.entries.push_back(e);
  }
  return batch;
}

inline std::mt19937_64 stream(std::uint64_t seed, std::uint64_t round, std::uint64_t tag) {
  std::seed_seq seq{static_cast<std::uint32_t>(seed), static_cast<std::uint32_t>(seed >> 32),
                    static_cast<std::uint32_t>(round), static_cast<std::uint32_t>(tag)};
  return std::mt19937_64(seq);
}

}  // namespace detail

// Uniform draw without replacement: every pool point gets a seeded uniform
// key and the largest b keys win.
inline QueryBatch random_query(const IndexSet& pool, Index budget, std::uint64_t seed,
                               int round) {
  detail::check_query_args(pool, budget);
  auto rng = detail::stream(seed, static_cast<std::uint64_t>(round), 0x52414e44);
  std::uniform_real_distribution<double> unit(0.0, 1.0);
  std::vector<double> keys(pool.size());
  for (auto& k : keys) k = unit(rng);
  auto batch = detail::top_scored(pool, keys, budget, "random");
  batch.round = round;
  return batch;
}

inline double entropy(const Eigen::Ref<const Eigen::RowVectorXd>& p) {
  double h = 0.0;
  for (Eigen::Index c = 0; c < p.size(); ++c) {
    if (p[c] > 0.0) h -= p[c] * std::log(p[c]);
  }
  return h;
}

inline QueryBatch entropy_query(const FittedModel& model, const Dataset& ds, const IndexSet& pool,
                                Index budget) {
  detail::check_query_args(pool, budget);
  const RowMatrix p = predict_proba_rows(model, ds, pool);
  std::vector<double> scores(pool.size());
  for (std::size_t k = 0; k < pool.size(); ++k) scores[k] = entropy(p.row(static_cast<Eigen::Index>(k)));
  return detail::top_scored(pool, scores, budget, "entropy");
}

// Score -(p_(1) - p_(2)): the smallest top-two margin ranks first.
inline QueryBatch margin_query(const FittedModel& model, const Dataset& ds, const IndexSet& pool,
                               Index budget) {
  detail::check_query_args(pool, budget);
  const RowMatrix p = predict_proba_rows(model, ds, pool);
  std::vector<double> scores(pool.size());
  for (std::size_t k = 0; k < pool.size(); ++k) {
    double first = -1.0, second = -1.0;
    for (Eigen::Index c = 0; c < p.cols(); ++c) {
      const double v = p(static_cast<Eigen::Index>(k), c);
      if (v > first) {
        second = first;
        first = v;
      } else if (v > second) {
        second = v;
      }
    }
    scores[k] = -(first - second);
  }
  return detail::top_scored(pool, scores, budget, "margin");
}

inline QueryBatch least_confidence_query(const FittedModel& model, const Dataset& ds,
                                         const IndexSet& pool, Index budget) {
  detail::check_query_args(pool, budget);
  const RowMatrix p = predict_proba_rows(model, ds, pool);
  std::vector<double> scores(pool.size());
  for (std::size_t k = 0; k < pool.size(); ++k) {
    scores[k] = -p.row(static_cast<Eigen::Index>(k)).maxCoeff();
  }
  return detail::top_scored(pool, scores, budget, "least_confidence");
}

// k-center greedy in feature space (Euclidean). Score is the point's distance
// to the covered set at the time it was picked, which is non-increasing.
inline QueryBatch coreset_query(const Dataset& ds, const IndexSet& labeled, const IndexSet& pool,
                                Index budget) {
  detail::check_query_args(pool, budget);
  if (labeled.empty()) throw ConfigError("coreset needs a nonempty labeled set");
  std::vector<double> nearest(pool.size(), std::numeric_limits<double>::infinity());
  for (std::size_t k = 0; k < pool.size(); ++k) {
    const auto x = ds.row(pool[k]);
    for (Index l : labeled) nearest[k] = std::min(nearest[k], (x - ds.row(l)).squaredNorm());
  }
  std::vector<bool> taken(pool.size(), false);
  QueryBatch batch;
  batch.strategy = "coreset";
  const auto k_max = std::min<std::size_t>(budget, pool.size());
  for (std::size_t r = 0; r < k_max; ++r) {
    std::size_t best = pool.size();
    for (std::size_t k = 0; k < pool.size(); ++k) {
      if (taken[k]) continue;
      if (best == pool.size() || nearest[k] > nearest[best] ||
          (nearest[k] == nearest[best] && pool[k] < pool[best])) {
        best = k;
      }
    }
    taken[best] = true;
    batch.entries.push_back({pool[best], std::nullopt, std::sqrt(nearest[best]),
                             static_cast<int>(r + 1)});
    const auto c = ds.row(pool[best]);
    for (std::size_t k = 0; k < pool.size(); ++k) {
      if (!taken[k]) nearest[k] = std::min(nearest[k], (ds.row(pool[k]) - c).squaredNorm());
    }
  }
  return batch;
}

// Last-layer gradient embedding (p - e_yhat) (x) x~ under the predicted label.
inline Vector badge_embedding(const FittedModel& model, const Dataset& ds, Index i) {
  const RowMatrix p = predict_proba_rows(model, ds, IndexSet{i});
  Eigen::RowVectorXd a = p.row(0);
  a[argmax(a)] -= 1.0;
  const RowMatrix x = augmented_rows(ds, IndexSet{i});
  const RowMatrix g = a.transpose() * x.row(0);
  return Eigen::Map<const Vector>(g.data(), g.size());
}

// k-means++ seeding over gradient embeddings, with the origin acting as an
// implicit first center: the first pick is proportional to ||g||^2 and a
// zero embedding is never chosen while any point has positive distance.
// Once every remaining distance is zero the lowest sample_id is taken.
// Embedding distances use ||a x - b y||^2 = |a|^2|x|^2 + |b|^2|y|^2 - 2(a.b)(x.y),
// so the C*(d+1)-dimensional embeddings are never materialized.
inline QueryBatch badge_query(const FittedModel& model, const Dataset& ds, const IndexSet& pool,
                              Index budget, std::uint64_t seed, int round = 0) {
  detail::check_query_args(pool, budget);
  RowMatrix a = predict_proba_rows(model, ds, pool);
  for (Eigen::Index r = 0; r < a.rows(); ++r) a(r, argmax(a.row(r))) -= 1.0;
  const RowMatrix x = augmented_rows(ds, pool);
  const Vector a2 = a.rowwise().squaredNorm();
  const Vector x2 = x.rowwise().squaredNorm();

  std::vector<double> dist(pool.size());
  for (std::size_t k = 0; k < pool.size(); ++k) {
    dist[k] = a2[static_cast<Eigen::Index>(k)] * x2[static_cast<Eigen::Index>(k)];
  }
  std::vector<bool> taken(pool.size(), false);
  auto rng = detail::stream(seed, static_cast<std::uint64_t>(round), 0x42414447);
  std::uniform_real_distribution<double> unit(0.0, 1.0);

  QueryBatch batch;
  batch.strategy = "badge";
  batch.round = round;
  const auto k_max = std::min<std::size_t>(budget, pool.size());
  for (std::size_t r = 0; r < k_max; ++r) {
    double total = 0.0;
    for (std::size_t k = 0; k < pool.size(); ++k) {
      if (!taken[k]) total += dist[k];
    }
    std::size_t pick = pool.size();
    if (total > 0.0) {
      const double target = unit(rng) * total;
      double acc = 0.0;
      for (std::size_t k = 0; k < pool.size(); ++k) {
        if (taken[k] || dist[k] <= 0.0) continue;
        acc += dist[k];
        pick = k;
        if (acc > target) break;
      }
    } else {
      for (std::size_t k = 0; k < pool.size(); ++k) {
        if (!taken[k] && (pick == pool.size() || pool[k] < pool[pick])) pick = k;
      }
    }
    taken[pick] = true;
    batch.entries.push_back({pool[pick], std::nullopt, static_cast<double>(k_max - r),
                             static_cast<int>(r + 1)});
    const auto pk = static_cast<Eigen::Index>(pick);
    for (std::size_t k = 0; k < pool.size(); ++k) {
      if (taken[k]) continue;
      const auto ik = static_cast<Eigen::Index>(k);
      const double cross = a.row(ik).dot(a.row(pk)) * x.row(ik).dot(x.row(pk));
      const double d2 = std::max(0.0, a2[ik] * x2[ik] + a2[pk] * x2[pk] - 2.0 * cross);
      dist[k] = std::min(dist[k], d2);
    }
  }
  return batch;
}

// Influence under the model's own predicted label; the batch is annotated
// with ground truth.
inline QueryBatch isal_query(const InfluenceContext& ctx, const Dataset& ds,
                             const IndexSet& pool, Index budget, Index n) {
  detail::check_query_args(pool, budget);
  const RowMatrix p = predict_proba_rows(ctx.model, ds, pool);
  std::vector<double> scores(pool.size());
  for (std::size_t k = 0; k < pool.size(); ++k) {
    const int pseudo = argmax(p.row(static_cast<Eigen::Index>(k)));
    scores[k] = label_scores(ctx, ds.row(pool[k]), n)[pseudo];
  }
  return detail::top_scored(pool, scores, budget, "isal");
}

// Ranks by salutary influence (max over labels). With use_ground_truth the
// same points are returned but left for ground-truth annotation.
inline QueryBatch salutary_query(const InfluenceContext& ctx, const Dataset& ds,
                                 const IndexSet& pool, Index budget, Index n,
                                 bool use_ground_truth = false) {
  detail::check_query_args(pool, budget);
  const RowMatrix m = influence_matrix(ctx, ds, pool, n);
  std::vector<double> scores(pool.size());
  std::vector<int> labels(pool.size());
  for (std::size_t k = 0; k < pool.size(); ++k) {
    const auto row = m.row(static_cast<Eigen::Index>(k));
    labels[k] = argmax(row);
    scores[k] = row[labels[k]];
  }
  return detail::top_scored(pool, scores, budget, use_ground_truth ? "salutary_gt" : "salutary",
                            use_ground_truth ? nullptr : &labels);
}

// Everything a strategy may need for one round.
struct QueryRequest {
  Strategy strategy = Strategy::kRandom;
  const Dataset* ds = nullptr;
  const FittedModel* model = nullptr;
  const InfluenceContext* context = nullptr;  // required by isal / salutary*
  const IndexSet* labeled = nullptr;
  const IndexSet* pool = nullptr;
  Index budget = 1;
  std::uint64_t seed = 0;
  int round = 0;
};

inline QueryBatch run_query(const QueryRequest& q) {
  if (needs_influence(q.strategy) && q.context == nullptr) {
    throw ConfigError("strategy needs an influence context");
  }
  const Index n = q.labeled != nullptr ? q.labeled->size() : 0;
  QueryBatch batch;
  switch (q.strategy) {
    case Strategy::kRandom: batch = random_query(*q.pool, q.budget, q.seed, q.round); break;
    case Strategy::kEntropy: batch = entropy_query(*q.model, *q.ds, *q.pool, q.budget); break;
    case Strategy::kMargin: batch = margin_query(*q.model, *q.ds, *q.pool, q.budget); break;
    case Strategy::kLeastConfidence:
      batch = least_confidence_query(*q.model, *q.ds, *q.pool, q.budget);
      break;
    case Strategy::kCoreset: batch = coreset_query(*q.ds, *q.labeled, *q.pool, q.budget); break;
    case Strategy::kBadge:
      batch = badge_query(*q.model, *q.ds, *q.pool, q.budget, q.seed, q.round);
      break;
    case Strategy::kIsal: batch = isal_query(*q.context, *q.ds, *q.pool, q.budget, n); break;
    case Strategy::kSalutary:
      batch = salutary_query(*q.context, *q.ds, *q.pool, q.budget, n, false);
      break;
    case Strategy::kSalutaryGt:
      batch = salutary_query(*q.context, *q.ds, *q.pool, q.budget, n, true);
      break;
  }
  batch.round = q.round;
  return batch;
}

}  // namespace salutary
