#pragma once

#include <algorithm>
#include <cmath>
#include <numeric>
#include <optional>
#include <utility>
#include <vector>

#include <Eigen/Dense>

#include "salutary/data.hpp"
#include "salutary/error.hpp"
#include "salutary/linalg.hpp"
#include "salutary/model.hpp"

namespace salutary {

struct CgConfig {
  double residual_tol = 1e-8;
  // 0 selects 10 * parameter count.
  int max_iterations = 0;

  int iterations_for(Index dim) const {
    return max_iterations > 0 ? max_iterations : static_cast<int>(10 * dim);
  }
  void validate() const {
    if (!(residual_tol > 0)) throw ConfigError("cg.residual_tol must be > 0", "cg.residual_tol");
    if (max_iterations < 0) throw ConfigError("cg.max_iterations must be >= 0", "cg.max_iterations");
  }
};

// The rows (and labels) of the training objective whose Hessian is inverted.
struct TrainingSpec {
  IndexSet indices;
  LabelOverride overrides;
};

struct SolveDiagnostics {
  double relative_residual = 0.0;
  int iterations = 0;
  // Relative distance to a dense Cholesky solve, when the dimension permits one.
  std::optional<double> dense_relative_error;
};

// Everything needed to score pool points against one fitted model: the
// validation-loss gradient and s = H^{-1} grad L_v, solved once per round.
struct InfluenceContext {
  FittedModel model;
  TrainingSpec train;
  Vector val_gradient;
  Vector ihvp;
  SolveDiagnostics diagnostics;

  Index training_size() const { return train.indices.size(); }
};

inline constexpr double kDenseAgreementTol = 1e-6;

// Mean validation cross-entropy, without the regularizer.
inline double validation_loss(const FittedModel& model, const Dataset& ds,
                              const IndexSet& val_indices) {
  if (val_indices.empty()) throw ConfigError("empty validation set");
  return Objective(ds, val_indices, {}, model.config.lambda).data_value(model.theta);
}

inline Vector validation_gradient(const FittedModel& model, const Dataset& ds,
                                  const IndexSet& val_indices) {
  if (val_indices.empty()) throw ConfigError("empty validation set");
  return Objective(ds, val_indices, {}, model.config.lambda).data_gradient(model.theta);
}

// Solves H s = grad L_v by matrix-free CG. When C*(d+1) <= dense_cap the
// result is cross-checked against a dense Cholesky solve; disagreement beyond
// kDenseAgreementTol is raised as a SolverError.
inline InfluenceContext build_context(const FittedModel& model, const Dataset& ds,
                                      TrainingSpec train, const IndexSet& val_indices,
                                      const CgConfig& cg = {},
                                      Index dense_cap = kDefaultDenseCap) {
  cg.validate();
  if (!model.converged) throw NumericalError("influence needs a converged model");
  if (train.indices.empty()) throw ConfigError("influence needs a nonempty training set");

  InfluenceContext ctx;
  ctx.model = model;
  ctx.val_gradient = validation_gradient(model, ds, val_indices);

  const Objective obj(ds, train.indices, train.overrides, model.config.lambda);
  const auto curv = obj.curvature(model.theta);
  const Index dim = obj.parameter_count();
  const CgResult solve = conjugate_gradient(curv, ctx.val_gradient, cg.residual_tol,
                                            cg.iterations_for(dim));
  if (!solve.converged) {
    throw SolverError("CG did not reach relative residual " + format_double(cg.residual_tol) +
                          " (best " + format_double(solve.relative_residual) + " after " +
                          std::to_string(solve.iterations) + " iterations)",
                      solve.relative_residual, solve.iterations);
  }
  ctx.ihvp = solve.x;
  ctx.diagnostics.relative_residual = solve.relative_residual;
  ctx.diagnostics.iterations = solve.iterations;

  if (dim <= dense_cap && ctx.val_gradient.norm() > 0.0) {
    const Matrix h = obj.dense_hessian(model.theta, dense_cap);
    const Vector dense = h.llt().solve(ctx.val_gradient);
    const double scale = dense.norm();
    auto distance = [&] { return (ctx.ihvp - dense).norm() / scale; };
    double err = distance();
    // A residual of residual_tol bounds the error only up to cond(H); on
    // ill-conditioned problems keep iterating with a tighter target.
    double tol = cg.residual_tol;
    for (int refine = 0; refine < 4 && !(err <= kDenseAgreementTol); ++refine) {
      tol *= 1e-2;
      const CgResult more = conjugate_gradient(curv, ctx.val_gradient, tol,
                                               cg.iterations_for(dim), &ctx.ihvp);
      if (more.relative_residual > ctx.diagnostics.relative_residual) break;
      ctx.ihvp = more.x;
      ctx.diagnostics.relative_residual = more.relative_residual;
      ctx.diagnostics.iterations += more.iterations;
      err = distance();
    }
    ctx.diagnostics.dense_relative_error = err;
    if (!(err <= kDenseAgreementTol)) {
      throw SolverError("CG and dense solves disagree (relative error " + format_double(err) + ")",
                        ctx.diagnostics.relative_residual, ctx.diagnostics.iterations);
    }
  }
  ctx.train = std::move(train);
  return ctx;
}

// Influence of (x, c) for every label c at once. Entry c is
//   (1/N) s . grad l(x, c) = (1/N) (p . u - u_c),  u = S x~,
// with S the ihvp viewed as a C x (d+1) matrix.
template <class Derived>
Vector label_scores(const InfluenceContext& ctx, const Eigen::MatrixBase<Derived>& x, Index n) {
  if (n == 0) throw ConfigError("training-set size N must be >= 1");
  const int classes = ctx.model.class_count;
  const auto d = static_cast<Eigen::Index>(ctx.model.feature_count);
  if (x.size() != d) throw ConfigError("feature vector has the wrong length");
  Vector xt(d + 1);
  for (Eigen::Index j = 0; j < d; ++j) xt[j] = x(j);
  xt[d] = 1.0;
  Vector z = as_matrix(ctx.model.theta, classes) * xt;
  z.array() -= z.maxCoeff();
  Vector p = z.array().exp().matrix();
  p /= p.sum();
  const Vector u = as_matrix(ctx.ihvp, classes) * xt;
  const double pu = p.dot(u);
  return ((Vector::Constant(classes, pu) - u) / static_cast<double>(n)).eval();
}

// Predicted decrease of validation loss when (x, c) joins training with
// weight 1/N. Positive means beneficial.
template <class Derived>
double influence_score(const InfluenceContext& ctx, const Eigen::MatrixBase<Derived>& x, int c,
                       Index n) {
  if (c < 0 || c >= ctx.model.class_count) throw ConfigError("label out of range");
  return label_scores(ctx, x, n)[c];
}

// |pool| x C influence scores, rows in pool order.
inline RowMatrix influence_matrix(const InfluenceContext& ctx, const Dataset& ds,
                                  const IndexSet& pool, Index n) {
  RowMatrix out(static_cast<Eigen::Index>(pool.size()), ctx.model.class_count);
  for (std::size_t k = 0; k < pool.size(); ++k) {
    out.row(static_cast<Eigen::Index>(k)) = label_scores(ctx, ds.row(pool[k]), n).transpose();
  }
  return out;
}

struct SalutaryLabel {
  int label = 0;
  double score = 0.0;
};

// Label with the highest influence (lowest index on ties).
template <class Derived>
SalutaryLabel salutary_label(const InfluenceContext& ctx, const Eigen::MatrixBase<Derived>& x,
                             Index n) {
  const Vector s = label_scores(ctx, x, n);
  const int c = argmax(s);
  return {c, s[c]};
}

struct Candidate {
  Index index = 0;
  int label = 0;
};

namespace detail {

// Training objective over `train` plus optional extra rows with their own
// weights; training rows share `train_weight` each.
inline Objective augmented_objective(const Dataset& ds, const TrainingSpec& train,
                                     const std::vector<std::pair<Candidate, double>>& extra,
                                     double train_weight, double lambda) {
  if (train.indices.empty()) throw ConfigError("training set is empty");
  IndexSet rows = train.indices;
  std::vector<int> labels = resolve_labels(ds, train.indices, train.overrides);
  Vector w(static_cast<Eigen::Index>(rows.size() + extra.size()));
  w.head(static_cast<Eigen::Index>(rows.size())).setConstant(train_weight);
  Eigen::Index k = static_cast<Eigen::Index>(rows.size());
  for (const auto& [cand, weight] : extra) {
    if (cand.label < 0 || cand.label >= ds.class_count()) {
      throw ConfigError("candidate label out of range");
    }
    rows.push_back(cand.index);
    labels.push_back(cand.label);
    w[k++] = weight;
  }
  return Objective(augmented_rows(ds, rows), std::move(labels), std::move(w), ds.class_count(),
                   lambda);
}

inline FittedModel fit_or_throw(const Objective& obj, const TrainConfig& config) {
  FittedModel m = train_objective(obj, config);
  if (!m.converged) {
    throw NumericalError("retraining did not converge (gradient norm " +
                         format_double(m.final_grad_norm) + ")");
  }
  return m;
}

}  // namespace detail

// Retrains from scratch on the training set with the candidate appended and
// returns L_v(base) - L_v(retrained). All N+1 rows get weight 1/(N+1) and the
// penalty shrinks to lambda*N/(N+1), so the minimizer is that of the original
// objective plus the candidate at weight 1/N.
inline double add_one_in_actual(const Dataset& ds, const TrainingSpec& train,
                                const IndexSet& val_indices,
                                const std::optional<Candidate>& candidate,
                                const TrainConfig& config,
                                const std::optional<FittedModel>& base = std::nullopt) {
  const double n = static_cast<double>(train.indices.size());
  const FittedModel base_model =
      base.has_value() ? *base
                       : detail::fit_or_throw(
                             detail::augmented_objective(ds, train, {}, 1.0 / n, config.lambda),
                             config);
  if (!candidate.has_value()) {
    const FittedModel again = detail::fit_or_throw(
        detail::augmented_objective(ds, train, {}, 1.0 / n, config.lambda), config);
    return validation_loss(base_model, ds, val_indices) - validation_loss(again, ds, val_indices);
  }
  const FittedModel grown = detail::fit_or_throw(
      detail::augmented_objective(ds, train, {{*candidate, 1.0 / (n + 1.0)}}, 1.0 / (n + 1.0),
                                  config.lambda * n / (n + 1.0)),
      config);
  return validation_loss(base_model, ds, val_indices) - validation_loss(grown, ds, val_indices);
}

// Like add_one_in_actual but the candidate is up-weighted by `epsilon` on top
// of the unchanged 1/N training weights; the first-order prediction for this
// perturbation is epsilon * N * influence_score.
inline double upweight_actual(const Dataset& ds, const TrainingSpec& train,
                              const IndexSet& val_indices, const Candidate& candidate,
                              double epsilon, const TrainConfig& config,
                              const FittedModel& base) {
  const double n = static_cast<double>(train.indices.size());
  const FittedModel moved = detail::fit_or_throw(
      detail::augmented_objective(ds, train, {{candidate, epsilon}}, 1.0 / n, config.lambda),
      config);
  return validation_loss(base, ds, val_indices) - validation_loss(moved, ds, val_indices);
}

// Fractional ranks (ties share their average rank), 1-based.
inline std::vector<double> fractional_ranks(const std::vector<double>& v) {
  std::vector<std::size_t> order(v.size());
  std::iota(order.begin(), order.end(), std::size_t{0});
  std::stable_sort(order.begin(), order.end(),
                   [&](std::size_t a, std::size_t b) { return v[a] < v[b]; });
  std::vector<double> ranks(v.size());
  std::size_t i = 0;
  while (i < order.size()) {
    std::size_t j = i;
    while (j + 1 < order.size() && v[order[j + 1]] == v[order[i]]) ++j;
    const double avg = 0.5 * static_cast<double>(i + j) + 1.0;
    for (std::size_t k = i; k <= j; ++k) ranks[order[k]] = avg;
    i = j + 1;
  }
  return ranks;
}

// Spearman rank correlation: Pearson correlation of fractional ranks.
inline double spearman(const std::vector<double>& a, const std::vector<double>& b) {
  if (a.size() != b.size()) throw ConfigError("spearman: sequences differ in length");
  if (a.size() < 2) throw ConfigError("spearman: need at least 2 observations");
  const auto ra = fractional_ranks(a);
  const auto rb = fractional_ranks(b);
  const double n = static_cast<double>(a.size());
  const double ma = std::accumulate(ra.begin(), ra.end(), 0.0) / n;
  const double mb = std::accumulate(rb.begin(), rb.end(), 0.0) / n;
  double sab = 0.0, saa = 0.0, sbb = 0.0;
  for (std::size_t i = 0; i < ra.size(); ++i) {
    sab += (ra[i] - ma) * (rb[i] - mb);
    saa += (ra[i] - ma) * (ra[i] - ma);
    sbb += (rb[i] - mb) * (rb[i] - mb);
  }
  if (saa == 0.0 || sbb == 0.0) {
    throw NumericalError("spearman: a sequence has zero rank variance");
  }
  return std::clamp(sab / std::sqrt(saa * sbb), -1.0, 1.0);
}

}  // namespace salutary
