#pragma once

#include <algorithm>
#include <charconv>
#include <cmath>
#include <cstdint>
#include <fstream>
#include <map>
#include <numeric>
#include <random>
#include <sstream>
#include <string>
#include <string_view>
#include <unordered_set>
#include <vector>

#include <Eigen/Dense>

#include "salutary/error.hpp"

namespace salutary {

using Index = std::size_t;
using IndexSet = std::vector<Index>;
using FeatureMatrix = Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;

// Feature matrix plus contiguous integer labels. Immutable once constructed;
// the constructor enforces label range, finiteness and id uniqueness.
class Dataset {
public:
  Dataset() = default;

  Dataset(FeatureMatrix features, std::vector<int> labels, int class_count,
          std::vector<std::int64_t> ids = {}, std::vector<double> label_values = {},
          std::vector<std::string> feature_names = {})
      : features_(std::move(features)),
        labels_(std::move(labels)),
        class_count_(class_count),
        ids_(std::move(ids)),
        label_values_(std::move(label_values)),
        feature_names_(std::move(feature_names)) {
    const auto n = static_cast<std::size_t>(features_.rows());
    if (class_count_ < 2) throw ConfigError("dataset needs at least 2 classes");
    if (features_.cols() < 1) throw ConfigError("dataset needs at least 1 feature");
    if (labels_.size() != n) throw ConfigError("label count does not match row count");
    for (int y : labels_) {
      if (y < 0 || y >= class_count_) throw ConfigError("label out of range 0..C-1");
    }
    if (!features_.allFinite()) throw ConfigError("non-finite feature value");
    if (ids_.empty()) {
      ids_.resize(n);
      std::iota(ids_.begin(), ids_.end(), std::int64_t{0});
    }
    if (ids_.size() != n) throw ConfigError("id count does not match row count");
    std::unordered_set<std::int64_t> seen(ids_.begin(), ids_.end());
    if (seen.size() != n) throw ConfigError("sample ids are not unique");
    if (label_values_.empty()) {
      label_values_.resize(static_cast<std::size_t>(class_count_));
      std::iota(label_values_.begin(), label_values_.end(), 0.0);
    }
    if (label_values_.size() != static_cast<std::size_t>(class_count_)) {
      throw ConfigError("label mapping size does not match class count");
    }
  }

  Index size() const noexcept { return labels_.size(); }
  Index feature_count() const noexcept { return static_cast<Index>(features_.cols()); }
  int class_count() const noexcept { return class_count_; }

  const FeatureMatrix& features() const noexcept { return features_; }
  auto row(Index i) const { return features_.row(static_cast<Eigen::Index>(i)); }
  const std::vector<int>& labels() const noexcept { return labels_; }
  int label(Index i) const { return labels_.at(i); }
  std::int64_t id(Index i) const { return ids_.at(i); }
  const std::vector<std::int64_t>& ids() const noexcept { return ids_; }
  // Original label value for each contiguous class index.
  const std::vector<double>& label_values() const noexcept { return label_values_; }
  const std::vector<std::string>& feature_names() const noexcept { return feature_names_; }

  Dataset with_features(FeatureMatrix features) const {
    return Dataset(std::move(features), labels_, class_count_, ids_, label_values_, feature_names_);
  }
  Dataset with_labels(std::vector<int> labels) const {
    return Dataset(features_, std::move(labels), class_count_, ids_, label_values_, feature_names_);
  }

  // Rows in the given order; ids travel with their rows.
  Dataset subset(const IndexSet& indices) const {
    FeatureMatrix f(static_cast<Eigen::Index>(indices.size()), features_.cols());
    std::vector<int> y;
    std::vector<std::int64_t> ids;
    y.reserve(indices.size());
    ids.reserve(indices.size());
    for (std::size_t k = 0; k < indices.size(); ++k) {
      f.row(static_cast<Eigen::Index>(k)) = row(indices[k]);
      y.push_back(label(indices[k]));
      ids.push_back(id(indices[k]));
    }
    return Dataset(std::move(f), std::move(y), class_count_, std::move(ids), label_values_,
                   feature_names_);
  }

private:
  FeatureMatrix features_;
  std::vector<int> labels_;
  int class_count_ = 0;
  std::vector<std::int64_t> ids_;
  std::vector<double> label_values_;
  std::vector<std::string> feature_names_;
};

struct SplitIndices {
  IndexSet train;
  IndexSet validation;
  IndexSet test;
  std::uint64_t seed = 0;
};

// Current labeled set L, pool U and the self-annotated labels for members of L.
struct PoolState {
  IndexSet labeled;
  IndexSet pool;
  std::map<Index, int> assigned_labels;
};

struct Standardization {
  Eigen::VectorXd mean;
  Eigen::VectorXd scale;  // 0 marks a constant column

  FeatureMatrix apply(const FeatureMatrix& x) const {
    FeatureMatrix out(x.rows(), x.cols());
    for (Eigen::Index j = 0; j < x.cols(); ++j) {
      if (scale[j] == 0.0) {
        out.col(j).setZero();
      } else {
        out.col(j) = (x.col(j).array() - mean[j]) / scale[j];
      }
    }
    return out;
  }
};

namespace detail {

inline std::string_view trim(std::string_view s) {
  while (!s.empty() && (s.front() == ' ' || s.front() == '\t')) s.remove_prefix(1);
  while (!s.empty() && (s.back() == ' ' || s.back() == '\t' || s.back() == '\r')) {
    s.remove_suffix(1);
  }
  return s;
}

inline std::vector<std::string_view> split_fields(std::string_view line) {
  std::vector<std::string_view> out;
  std::size_t start = 0;
  for (;;) {
    const auto comma = line.find(',', start);
    if (comma == std::string_view::npos) {
      out.push_back(trim(line.substr(start)));
      return out;
    }
    out.push_back(trim(line.substr(start, comma - start)));
    start = comma + 1;
  }
}

inline bool parse_double(std::string_view s, double& out) {
  if (!s.empty() && s.front() == '+') s.remove_prefix(1);
  if (s.empty()) return false;
  const auto [ptr, ec] = std::from_chars(s.data(), s.data() + s.size(), out);
  return ec == std::errc() && ptr == s.data() + s.size();
}

}  // namespace detail

// Parses comma-separated numeric data. With a header the label column is
// looked up by name; without one `label_column` is a 0-based column index
// (negative values count from the end, -1 = last column).
inline Dataset parse_csv(std::istream& in, const std::string& label_column, bool has_header) {
  std::string line;
  long row_number = 0;
  std::vector<std::string> names;
  std::size_t columns = 0;
  std::size_t label_pos = 0;

  auto next_line = [&]() -> bool {
    while (std::getline(in, line)) {
      ++row_number;
      if (!detail::trim(line).empty()) return true;
    }
    return false;
  };

  if (has_header) {
    if (!next_line()) throw DataError("empty CSV input", row_number);
    // Tolerate a UTF-8 byte order mark.
    if (line.rfind("\xEF\xBB\xBF", 0) == 0) line.erase(0, 3);
    for (auto f : detail::split_fields(line)) names.emplace_back(f);
    columns = names.size();
    const auto it = std::find(names.begin(), names.end(), label_column);
    if (it == names.end()) {
      throw DataError("label column '" + label_column + "' not found in header", row_number,
                      label_column);
    }
    label_pos = static_cast<std::size_t>(it - names.begin());
  }

  std::vector<double> values;
  std::vector<double> raw_labels;
  bool first = true;
  while (next_line()) {
    const auto fields = detail::split_fields(line);
    if (first && !has_header) {
      columns = fields.size();
      long pos = 0;
      const auto lc = detail::trim(label_column);
      const auto [ptr, ec] = std::from_chars(lc.data(), lc.data() + lc.size(), pos);
      if (ec != std::errc() || ptr != lc.data() + lc.size()) {
        throw DataError("without a header the label column must be an integer index",
                        row_number, label_column);
      }
      if (pos < 0) pos += static_cast<long>(columns);
      if (pos < 0 || pos >= static_cast<long>(columns)) {
        throw DataError("label column index out of range", row_number, label_column);
      }
      label_pos = static_cast<std::size_t>(pos);
      for (std::size_t j = 0; j < columns; ++j) names.push_back("c" + std::to_string(j));
    }
    first = false;
    if (fields.size() != columns) {
      throw DataError("row has " + std::to_string(fields.size()) + " fields, expected " +
                          std::to_string(columns),
                      row_number);
    }
    for (std::size_t j = 0; j < columns; ++j) {
      double v = 0.0;
      if (!detail::parse_double(fields[j], v)) {
        throw DataError("non-numeric value '" + std::string(fields[j]) + "' at row " +
                            std::to_string(row_number) + ", column '" + names[j] + "'",
                        row_number, names[j]);
      }
      if (!std::isfinite(v)) {
        throw DataError("non-finite value at row " + std::to_string(row_number) +
                            ", column '" + names[j] + "'",
                        row_number, names[j]);
      }
      if (j == label_pos) {
        raw_labels.push_back(v);
      } else {
        values.push_back(v);
      }
    }
  }
  if (columns < 2) throw DataError("CSV needs a label column and at least one feature");
  if (raw_labels.empty()) throw DataError("CSV has no data rows", row_number);

  std::vector<double> distinct = raw_labels;
  std::sort(distinct.begin(), distinct.end());
  distinct.erase(std::unique(distinct.begin(), distinct.end()), distinct.end());
  if (distinct.size() < 2) {
    throw DataError("label column '" + names[label_pos] + "' has fewer than 2 distinct values",
                    -1, names[label_pos]);
  }

  const auto n = static_cast<Eigen::Index>(raw_labels.size());
  const auto d = static_cast<Eigen::Index>(columns - 1);
  FeatureMatrix features = Eigen::Map<FeatureMatrix>(values.data(), n, d);
  std::vector<int> labels;
  labels.reserve(raw_labels.size());
  for (double v : raw_labels) {
    labels.push_back(static_cast<int>(std::lower_bound(distinct.begin(), distinct.end(), v) -
                                      distinct.begin()));
  }
  std::vector<std::string> feature_names;
  for (std::size_t j = 0; j < columns; ++j) {
    if (j != label_pos) feature_names.push_back(names[j]);
  }
  const auto class_count = static_cast<int>(distinct.size());
  return Dataset(std::move(features), std::move(labels), class_count, {}, std::move(distinct),
                 std::move(feature_names));
}

inline Dataset load_csv(const std::string& path, const std::string& label_column,
                        bool has_header = true) {
  std::ifstream in(path);
  if (!in) throw IoError("cannot open dataset file '" + path + "'");
  return parse_csv(in, label_column, has_header);
}

// Seeded shuffle into train/validation/test. Validation and test sizes are
// floor(n * f); the remainder goes to train. Each set is returned sorted.
inline SplitIndices split(const Dataset& ds, double train_fraction, double val_fraction,
                          double test_fraction, std::uint64_t seed) {
  if (!(train_fraction > 0 && val_fraction > 0 && test_fraction > 0)) {
    throw ConfigError("split fractions must be positive", "split.fractions");
  }
  if (std::abs(train_fraction + val_fraction + test_fraction - 1.0) > 1e-9) {
    throw ConfigError("split fractions must sum to 1", "split.fractions");
  }
  const Index n = ds.size();
  const auto n_val = static_cast<Index>(std::floor(static_cast<double>(n) * val_fraction));
  const auto n_test = static_cast<Index>(std::floor(static_cast<double>(n) * test_fraction));
  if (n_val == 0 || n_test == 0 || n_val + n_test >= n) {
    throw ConfigError("split leaves an empty partition", "split.fractions");
  }
  IndexSet perm(n);
  std::iota(perm.begin(), perm.end(), Index{0});
  std::mt19937_64 rng(seed);
  std::shuffle(perm.begin(), perm.end(), rng);

  SplitIndices out;
  out.seed = seed;
  const Index n_train = n - n_val - n_test;
  out.train.assign(perm.begin(), perm.begin() + static_cast<std::ptrdiff_t>(n_train));
  out.validation.assign(perm.begin() + static_cast<std::ptrdiff_t>(n_train),
                        perm.begin() + static_cast<std::ptrdiff_t>(n_train + n_val));
  out.test.assign(perm.begin() + static_cast<std::ptrdiff_t>(n_train + n_val), perm.end());
  std::sort(out.train.begin(), out.train.end());
  std::sort(out.validation.begin(), out.validation.end());
  std::sort(out.test.begin(), out.test.end());
  return out;
}

// Seeded random initial labeled set drawn from the training indices; the rest
// becomes the pool.
inline PoolState init_pool_split(const IndexSet& train_indices, Index n_init,
                                 std::uint64_t seed) {
  if (n_init == 0 || n_init > train_indices.size()) {
    throw ConfigError("n_init must be in 1..|train| (|train| = " +
                          std::to_string(train_indices.size()) + ")",
                      "al.n_init");
  }
  IndexSet perm = train_indices;
  std::mt19937_64 rng(seed);
  std::shuffle(perm.begin(), perm.end(), rng);
  PoolState state;
  state.labeled.assign(perm.begin(), perm.begin() + static_cast<std::ptrdiff_t>(n_init));
  state.pool.assign(perm.begin() + static_cast<std::ptrdiff_t>(n_init), perm.end());
  std::sort(state.labeled.begin(), state.labeled.end());
  std::sort(state.pool.begin(), state.pool.end());
  return state;
}

// Population mean/std fitted on `fit_on`, applied to every row.
inline std::pair<Dataset, Standardization> standardize(const Dataset& ds, const IndexSet& fit_on) {
  if (fit_on.empty()) throw ConfigError("standardize needs a nonempty fit set");
  const auto d = static_cast<Eigen::Index>(ds.feature_count());
  const auto m = static_cast<double>(fit_on.size());
  Standardization stats{Eigen::VectorXd::Zero(d), Eigen::VectorXd::Zero(d)};
  for (Index i : fit_on) stats.mean += ds.row(i).transpose();
  stats.mean /= m;
  Eigen::VectorXd var = Eigen::VectorXd::Zero(d);
  for (Index i : fit_on) var += (ds.row(i).transpose() - stats.mean).array().square().matrix();
  var /= m;
  for (Eigen::Index j = 0; j < d; ++j) {
    const double sd = std::sqrt(var[j]);
    // Rounding in the mean leaves ~1e-16 spread on constant columns.
    stats.scale[j] = sd <= 1e-12 * std::max(1.0, std::abs(stats.mean[j])) ? 0.0 : sd;
  }
  return {ds.with_features(stats.apply(ds.features())), stats};
}

// Gaussian clusters (unit variance) around seeded centers placed on a sphere
// of radius `separation`; centers are redrawn until every pair is at least
// `separation` apart (best of 1000 draws otherwise). Rows are class-major.
inline Dataset synthetic_blobs(Index n_per_class, int class_count, Index feature_count,
                               double separation, std::uint64_t seed) {
  if (n_per_class == 0 || feature_count == 0 || !(separation > 0) || class_count < 2) {
    throw ConfigError("synthetic_blobs: arguments must be positive and C >= 2");
  }
  std::mt19937_64 rng(seed);
  std::normal_distribution<double> normal(0.0, 1.0);
  const auto d = static_cast<Eigen::Index>(feature_count);

  Eigen::MatrixXd best;
  double best_gap = -1.0;
  for (int attempt = 0; attempt < 1000 && best_gap < separation; ++attempt) {
    Eigen::MatrixXd centers(class_count, d);
    for (int c = 0; c < class_count; ++c) {
      Eigen::VectorXd v(d);
      do {
        for (Eigen::Index j = 0; j < d; ++j) v[j] = normal(rng);
      } while (v.norm() == 0.0);
      centers.row(c) = separation * v.normalized().transpose();
    }
    double gap = std::numeric_limits<double>::infinity();
    for (int a = 0; a < class_count; ++a) {
      for (int b = a + 1; b < class_count; ++b) {
        gap = std::min(gap, (centers.row(a) - centers.row(b)).norm());
      }
    }
    if (gap > best_gap) {
      best_gap = gap;
      best = centers;
    }
  }

  const auto n = static_cast<Eigen::Index>(n_per_class) * class_count;
  FeatureMatrix x(n, d);
  std::vector<int> y(static_cast<std::size_t>(n));
  Eigen::Index r = 0;
  for (int c = 0; c < class_count; ++c) {
    for (Index k = 0; k < n_per_class; ++k, ++r) {
      for (Eigen::Index j = 0; j < d; ++j) x(r, j) = best(c, j) + normal(rng);
      y[static_cast<std::size_t>(r)] = c;
    }
  }
  return Dataset(std::move(x), std::move(y), class_count);
}

// Replaces the label of each listed row, with probability `rate`, by a
// uniformly chosen different class.
inline Dataset flip_labels(const Dataset& ds, const IndexSet& indices, double rate,
                           std::uint64_t seed) {
  if (rate < 0.0 || rate > 1.0) throw ConfigError("label noise rate must be in [0,1]");
  std::mt19937_64 rng(seed);
  std::uniform_real_distribution<double> unit(0.0, 1.0);
  std::uniform_int_distribution<int> other(1, ds.class_count() - 1);
  std::vector<int> labels = ds.labels();
  for (Index i : indices) {
    if (unit(rng) < rate) labels[i] = (labels[i] + other(rng)) % ds.class_count();
  }
  return ds.with_labels(std::move(labels));
}

}  // namespace salutary
