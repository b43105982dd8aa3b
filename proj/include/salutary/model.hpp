#pragma once

#include <algorithm>
#include <cmath>
#include <fstream>
#include <map>
#include <optional>
#include <sstream>
#include <string>
#include <vector>

#include <Eigen/Dense>

#include "salutary/data.hpp"
#include "salutary/error.hpp"
#include "salutary/format.hpp"
#include "salutary/linalg.hpp"

namespace salutary {

using Vector = Eigen::VectorXd;
using Matrix = Eigen::MatrixXd;
using RowMatrix = Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;

// Labels that replace the dataset labels for selected rows (salutary labels,
// candidate labels).
using LabelOverride = std::map<Index, int>;

struct TrainConfig {
  double lambda = 1e-3;
  double grad_tol = 1e-8;
  int max_iterations = 100;

  void validate() const {
    if (!(lambda > 0)) throw ConfigError("train.lambda must be > 0", "train.lambda");
    if (!(grad_tol > 0)) throw ConfigError("train.grad_tol must be > 0", "train.grad_tol");
    if (max_iterations < 1) {
      throw ConfigError("train.max_iterations must be >= 1", "train.max_iterations");
    }
  }
};

inline constexpr Index kDefaultDenseCap = 512;

// Softmax parameters are stored as one vector of length C*(d+1), class-major:
// entries [c*(d+1), (c+1)*(d+1)) are the weights of class c followed by its bias.
inline Eigen::Map<const RowMatrix> as_matrix(const Vector& theta, int classes) {
  return {theta.data(), classes, theta.size() / classes};
}

// Row-wise softmax of a logit matrix with the max-shift.
inline RowMatrix softmax_rows(const RowMatrix& logits) {
  RowMatrix p = (logits.colwise() - logits.rowwise().maxCoeff()).array().exp().matrix();
  p.array().colwise() /= p.rowwise().sum().array();
  return p;
}

// Lowest index among the maxima.
template <class Derived>
int argmax(const Eigen::DenseBase<Derived>& v) {
  int best = 0;
  for (Eigen::Index c = 1; c < v.size(); ++c) {
    if (v(c) > v(best)) best = static_cast<int>(c);
  }
  return best;
}

// Rows of `ds` at `indices`, with a trailing column of ones.
inline RowMatrix augmented_rows(const Dataset& ds, const IndexSet& indices) {
  const auto d = static_cast<Eigen::Index>(ds.feature_count());
  RowMatrix x(static_cast<Eigen::Index>(indices.size()), d + 1);
  for (std::size_t k = 0; k < indices.size(); ++k) {
    const auto r = static_cast<Eigen::Index>(k);
    x.row(r).head(d) = ds.row(indices[k]);
    x(r, d) = 1.0;
  }
  return x;
}

inline std::vector<int> resolve_labels(const Dataset& ds, const IndexSet& indices,
                                       const LabelOverride& overrides) {
  std::vector<int> out;
  out.reserve(indices.size());
  for (Index i : indices) {
    const auto it = overrides.find(i);
    out.push_back(it != overrides.end() ? it->second : ds.label(i));
  }
  return out;
}

// Weighted regularized cross-entropy
//   f(theta) = sum_i w_i * -log softmax(Theta x~_i)_{y_i} + (lambda/2) ||theta||^2
// over a fixed set of rows. The plain empirical risk uses w_i = 1/m.
class Objective {
public:
  Objective(RowMatrix design, std::vector<int> labels, Vector weights, int classes,
            double lambda)
      : x_(std::move(design)),
        y_(std::move(labels)),
        w_(std::move(weights)),
        classes_(classes),
        lambda_(lambda) {
    if (x_.rows() == 0) throw ConfigError("objective needs a nonempty index set");
    if (static_cast<Eigen::Index>(y_.size()) != x_.rows() || w_.size() != x_.rows()) {
      throw ConfigError("objective: rows, labels and weights disagree in length");
    }
    for (int y : y_) {
      if (y < 0 || y >= classes_) throw ConfigError("objective: label out of range");
    }
  }

  // Mean loss over `indices`, labels taken from `overrides` where present.
  Objective(const Dataset& ds, const IndexSet& indices, const LabelOverride& overrides,
            double lambda)
      : Objective(checked_rows(ds, indices), resolve_labels(ds, indices, overrides),
                  Vector::Constant(static_cast<Eigen::Index>(indices.size()),
                                   1.0 / static_cast<double>(std::max<Index>(indices.size(), 1))),
                  ds.class_count(), lambda) {}

  Index parameter_count() const {
    return static_cast<Index>(classes_) * static_cast<Index>(x_.cols());
  }
  int classes() const noexcept { return classes_; }
  double lambda() const noexcept { return lambda_; }
  Index rows() const noexcept { return static_cast<Index>(x_.rows()); }
  const RowMatrix& design() const noexcept { return x_; }

  RowMatrix logits(const Vector& theta) const {
    check(theta);
    return x_ * as_matrix(theta, classes_).transpose();
  }

  double data_value(const Vector& theta) const {
    const RowMatrix z = logits(theta);
    double total = 0.0;
    for (Eigen::Index i = 0; i < z.rows(); ++i) {
      const double mx = z.row(i).maxCoeff();
      const double lse = mx + std::log((z.row(i).array() - mx).exp().sum());
      total += w_[i] * (lse - z(i, y_[static_cast<std::size_t>(i)]));
    }
    return total;
  }

  double value(const Vector& theta) const {
    return data_value(theta) + 0.5 * lambda_ * theta.squaredNorm();
  }

  Vector data_gradient(const Vector& theta) const {
    RowMatrix r = softmax_rows(logits(theta));
    for (Eigen::Index i = 0; i < r.rows(); ++i) r(i, y_[static_cast<std::size_t>(i)]) -= 1.0;
    r.array().colwise() *= w_.array();
    const RowMatrix g = r.transpose() * x_;
    return Eigen::Map<const Vector>(g.data(), g.size());
  }

  Vector gradient(const Vector& theta) const { return data_gradient(theta) + lambda_ * theta; }

  // Hessian of the objective frozen at one parameter vector; probabilities are
  // computed once and reused by every product.
  class Curvature {
  public:
    Curvature(const Objective& obj, RowMatrix probs) : obj_(&obj), p_(std::move(probs)) {}

    Vector data_apply(const Vector& v) const {
      obj_->check(v);
      const RowMatrix a = obj_->x_ * as_matrix(v, obj_->classes_).transpose();
      RowMatrix b = p_.cwiseProduct(a);
      const Vector pa = b.rowwise().sum();
      b -= p_.cwiseProduct(pa.replicate(1, p_.cols()));
      b.array().colwise() *= obj_->w_.array();
      const RowMatrix out = b.transpose() * obj_->x_;
      return Eigen::Map<const Vector>(out.data(), out.size());
    }

    Vector operator()(const Vector& v) const { return data_apply(v) + obj_->lambda_ * v; }

    const RowMatrix& probabilities() const noexcept { return p_; }

  private:
    const Objective* obj_;
    RowMatrix p_;
  };

  Curvature curvature(const Vector& theta) const {
    return Curvature(*this, softmax_rows(logits(theta)));
  }

  Vector hvp(const Vector& theta, const Vector& v) const { return curvature(theta)(v); }

  // Full Hessian; block (c, c') is X~^T diag(w_i (delta_cc' p_ic - p_ic p_ic')) X~ plus lambda I.
  Matrix dense_hessian(const Vector& theta, Index cap = kDefaultDenseCap) const {
    const Index dim = parameter_count();
    if (dim > cap) {
      throw ConfigError("dense Hessian of dimension " + std::to_string(dim) +
                        " exceeds the cap of " + std::to_string(cap));
    }
    const RowMatrix p = softmax_rows(logits(theta));
    const auto k = x_.cols();
    Matrix h = Matrix::Zero(static_cast<Eigen::Index>(dim), static_cast<Eigen::Index>(dim));
    for (int c = 0; c < classes_; ++c) {
      for (int e = c; e < classes_; ++e) {
        Vector s = -p.col(c).cwiseProduct(p.col(e));
        if (c == e) s += p.col(c);
        s.array() *= w_.array();
        const Matrix block = x_.transpose() * s.asDiagonal() * x_;
        h.block(c * k, e * k, k, k) = block;
        if (e != c) h.block(e * k, c * k, k, k) = block.transpose();
      }
    }
    h.diagonal().array() += lambda_;
    return h;
  }

private:
  static RowMatrix checked_rows(const Dataset& ds, const IndexSet& indices) {
    if (indices.empty()) throw ConfigError("empty index set");
    return augmented_rows(ds, indices);
  }

  void check(const Vector& v) const {
    if (static_cast<Index>(v.size()) != parameter_count()) {
      throw ConfigError("parameter vector has length " + std::to_string(v.size()) +
                        ", expected " + std::to_string(parameter_count()));
    }
  }

  RowMatrix x_;
  std::vector<int> y_;
  Vector w_;
  int classes_;
  double lambda_;
};

inline double loss(const Vector& theta, const Dataset& ds, const IndexSet& indices,
                   const LabelOverride& overrides, double lambda) {
  return Objective(ds, indices, overrides, lambda).value(theta);
}

inline Vector gradient(const Vector& theta, const Dataset& ds, const IndexSet& indices,
                       const LabelOverride& overrides, double lambda) {
  return Objective(ds, indices, overrides, lambda).gradient(theta);
}

// The Hessian does not depend on labels.
inline Vector hvp(const Vector& theta, const Dataset& ds, const IndexSet& indices, double lambda,
                  const Vector& v) {
  return Objective(ds, indices, {}, lambda).hvp(theta, v);
}

inline Matrix dense_hessian(const Vector& theta, const Dataset& ds, const IndexSet& indices,
                            double lambda, Index cap = kDefaultDenseCap) {
  return Objective(ds, indices, {}, lambda).dense_hessian(theta, cap);
}

struct FittedModel {
  Vector theta;
  int class_count = 0;
  Index feature_count = 0;
  TrainConfig config;
  IndexSet train_indices;
  bool converged = false;
  double final_grad_norm = 0.0;
  int iterations = 0;

  Index parameter_count() const { return static_cast<Index>(theta.size()); }
};

namespace detail {

// Damped Newton with CG inner solves (truncated Newton). The forcing term
// min(0.5, sqrt(||g||)) gives superlinear local convergence.
inline FittedModel newton_cg(const Objective& obj, const TrainConfig& config,
                             const std::optional<Vector>& warm_start) {
  config.validate();
  const auto dim = static_cast<Eigen::Index>(obj.parameter_count());
  FittedModel out;
  out.class_count = obj.classes();
  out.feature_count = static_cast<Index>(obj.design().cols() - 1);
  out.config = config;
  if (warm_start.has_value()) {
    if (warm_start->size() != dim) throw ConfigError("warm start has the wrong dimension");
    out.theta = *warm_start;
  } else {
    out.theta = Vector::Zero(dim);
  }

  double f = obj.value(out.theta);
  Vector g = obj.gradient(out.theta);
  double gnorm = g.norm();
  int it = 0;
  while (gnorm > config.grad_tol && it < config.max_iterations) {
    const auto curv = obj.curvature(out.theta);
    const double forcing = std::min(0.5, std::sqrt(gnorm));
    const CgResult step = conjugate_gradient(curv, Vector(-g), forcing,
                                             std::max<int>(10 * static_cast<int>(dim), 50));
    Vector dir = step.x;
    double slope = g.dot(dir);
    if (!(slope < 0.0)) {
      dir = -g;
      slope = -g.squaredNorm();
    }
    double t = 1.0;
    Vector trial = out.theta + dir;
    double f_trial = obj.value(trial);
    const double slack = 8.0 * std::numeric_limits<double>::epsilon() * std::abs(f);
    int backtracks = 0;
    while (f_trial > f + 1e-4 * t * slope + slack && backtracks < 60) {
      t *= 0.5;
      trial = out.theta + t * dir;
      f_trial = obj.value(trial);
      ++backtracks;
    }
    if (backtracks == 60) break;
    out.theta = std::move(trial);
    f = f_trial;
    g = obj.gradient(out.theta);
    gnorm = g.norm();
    ++it;
  }
  out.iterations = it;
  out.final_grad_norm = gnorm;
  out.converged = gnorm <= config.grad_tol;
  return out;
}

}  // namespace detail

// Minimizes an arbitrary (weighted) objective; used by the retraining oracles.
inline FittedModel train_objective(const Objective& obj, const TrainConfig& config,
                                   const std::optional<Vector>& warm_start = std::nullopt) {
  return detail::newton_cg(obj, config, warm_start);
}

// Fits the regularized empirical risk over `indices`. A non-converged result
// is returned with converged == false; callers decide whether that is fatal.
inline FittedModel train(const Dataset& ds, const IndexSet& indices,
                         const LabelOverride& overrides, const TrainConfig& config,
                         const std::optional<Vector>& warm_start = std::nullopt) {
  const Objective obj(ds, indices, overrides, config.lambda);
  FittedModel out = detail::newton_cg(obj, config, warm_start);
  out.train_indices = indices;
  return out;
}

template <class Derived>
Vector predict_proba(const FittedModel& model, const Eigen::MatrixBase<Derived>& x) {
  const auto d = static_cast<Eigen::Index>(model.feature_count);
  if (x.size() != d) throw ConfigError("feature vector has the wrong length");
  const auto theta = as_matrix(model.theta, model.class_count);
  Vector xv(d);
  for (Eigen::Index j = 0; j < d; ++j) xv[j] = x(j);
  Vector z = theta.leftCols(d) * xv + theta.col(d);
  z.array() -= z.maxCoeff();
  z = z.array().exp().matrix();
  return z / z.sum();
}

// Class probabilities for many rows at once (|indices| x C).
inline RowMatrix predict_proba_rows(const FittedModel& model, const Dataset& ds,
                                    const IndexSet& indices) {
  const RowMatrix x = augmented_rows(ds, indices);
  return softmax_rows(x * as_matrix(model.theta, model.class_count).transpose());
}

inline int predict(const FittedModel& model, const Dataset& ds, Index i) {
  const RowMatrix p = predict_proba_rows(model, ds, IndexSet{i});
  return argmax(p.row(0));
}

// Fraction of argmax predictions matching `labels` (one per index).
inline double accuracy(const FittedModel& model, const Dataset& ds, const IndexSet& indices,
                       const std::vector<int>& labels) {
  if (indices.empty()) throw ConfigError("accuracy needs a nonempty index set");
  if (labels.size() != indices.size()) throw ConfigError("accuracy: label count mismatch");
  const RowMatrix p = predict_proba_rows(model, ds, indices);
  Index hits = 0;
  for (Eigen::Index r = 0; r < p.rows(); ++r) {
    if (argmax(p.row(r)) == labels[static_cast<std::size_t>(r)]) ++hits;
  }
  return static_cast<double>(hits) / static_cast<double>(indices.size());
}

inline double accuracy(const FittedModel& model, const Dataset& ds, const IndexSet& indices) {
  std::vector<int> labels;
  labels.reserve(indices.size());
  for (Index i : indices) labels.push_back(ds.label(i));
  return accuracy(model, ds, indices, labels);
}

// Checkpoint format, one token per line:
//   salutary-model 1
//   classes <C>
//   features <d>
//   lambda <lambda>
//   theta <C*(d+1)>
//   <theta[0]> ... one value per line, class-major
// Values use shortest round-trip decimal text, so save/load is bit-exact.
inline void write_model(std::ostream& out, const FittedModel& model) {
  out << "salutary-model 1\n";
  out << "classes " << model.class_count << "\n";
  out << "features " << model.feature_count << "\n";
  out << "lambda " << format_double(model.config.lambda) << "\n";
  out << "theta " << model.theta.size() << "\n";
  for (Eigen::Index i = 0; i < model.theta.size(); ++i) out << format_double(model.theta[i]) << "\n";
}

inline FittedModel read_model(std::istream& in) {
  std::string tag;
  int version = 0;
  if (!(in >> tag >> version) || tag != "salutary-model" || version != 1) {
    throw IoError("not a salutary model checkpoint");
  }
  FittedModel m;
  std::string key;
  std::string text;
  Eigen::Index count = 0;
  if (!(in >> key >> m.class_count) || key != "classes") throw IoError("checkpoint: classes");
  if (!(in >> key >> m.feature_count) || key != "features") throw IoError("checkpoint: features");
  if (!(in >> key >> text) || key != "lambda" || !parse_double_exact(text, m.config.lambda)) {
    throw IoError("checkpoint: lambda");
  }
  if (!(in >> key >> count) || key != "theta" ||
      count != static_cast<Eigen::Index>(m.class_count) *
                   static_cast<Eigen::Index>(m.feature_count + 1)) {
    throw IoError("checkpoint: theta size");
  }
  m.theta.resize(count);
  for (Eigen::Index i = 0; i < count; ++i) {
    if (!(in >> text) || !parse_double_exact(text, m.theta[i])) {
      throw IoError("checkpoint: theta entry " + std::to_string(i));
    }
  }
  m.converged = true;
  return m;
}

inline void save_model(const std::string& path, const FittedModel& model) {
  std::ofstream out(path);
  if (!out) throw IoError("cannot write model checkpoint '" + path + "'");
  write_model(out, model);
}

inline FittedModel load_model(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw IoError("cannot read model checkpoint '" + path + "'");
  return read_model(in);
}

}  // namespace salutary
