#pragma once

#include <cstdio>
#include <fstream>
#include <sstream>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>
#include <openssl/evp.h>

#include "salutary/engine.hpp"
#include "salutary/error.hpp"

namespace salutary {

inline constexpr const char* kVersion = "0.1.0";

using Json = nlohmann::json;

// Config documents are JSON objects mirroring ExperimentConfig:
//
//   dataset     {path, label_column, has_header, synthetic: null | {n_per_class,
//                classes, features, separation, seed, label_noise}}
//   split       {fractions: [train, val, test], seed}
//   seeds       [run seeds]
//   al          {n_init, rounds, budget, strategies: [...], warm_start}
//   preprocess  {standardize}
//   train       {lambda, grad_tol, max_iterations}
//   cg          {residual_tol, max_iterations}  (0 = 10 * parameter count)
//   dense_cap, workers, output_dir, save_models
//   unbounded   {pool_fraction, selection}
//   bins        {mode, n_bins}
//   addone      {n_candidates}
//
// Unknown keys are rejected. The canonical form is the compact dump of the
// fully-populated document (keys sorted), which is what run ids hash.
inline Json to_json(const ExperimentConfig& c) {
  Json synthetic = nullptr;
  if (c.dataset.synthetic.has_value()) {
    const auto& s = *c.dataset.synthetic;
    synthetic = {{"n_per_class", s.n_per_class}, {"classes", s.classes},
                 {"features", s.features},       {"separation", s.separation},
                 {"seed", s.seed},               {"label_noise", s.label_noise}};
  }
  Json strategies = Json::array();
  for (Strategy s : c.strategies) strategies.push_back(std::string(to_string(s)));
  return {
      {"dataset",
       {{"path", c.dataset.path},
        {"label_column", c.dataset.label_column},
        {"has_header", c.dataset.has_header},
        {"synthetic", synthetic}}},
      {"split", {{"fractions", c.fractions}, {"seed", c.split_seed}}},
      {"seeds", c.seeds},
      {"al",
       {{"n_init", c.n_init},
        {"rounds", c.rounds},
        {"budget", c.budget},
        {"strategies", strategies},
        {"warm_start", c.warm_start}}},
      {"preprocess", {{"standardize", c.standardize}}},
      {"train",
       {{"lambda", c.train.lambda},
        {"grad_tol", c.train.grad_tol},
        {"max_iterations", c.train.max_iterations}}},
      {"cg", {{"residual_tol", c.cg.residual_tol}, {"max_iterations", c.cg.max_iterations}}},
      {"dense_cap", c.dense_cap},
      {"unbounded", {{"pool_fraction", c.unbounded_fraction}, {"selection", c.unbounded_selection}}},
      {"bins", {{"mode", std::string(to_string(c.bin_mode))}, {"n_bins", c.n_bins}}},
      {"addone", {{"n_candidates", c.addone_candidates}}},
      {"workers", c.workers},
      {"output_dir", c.output_dir},
      {"save_models", c.save_models},
  };
}

namespace detail {

inline Json synthetic_defaults() {
  ExperimentConfig c;
  c.dataset.synthetic = SyntheticSpec{};
  return to_json(c)["dataset"]["synthetic"];
}

inline void check_known_keys(const Json& given, const Json& known, const std::string& prefix) {
  if (!given.is_object()) return;
  for (const auto& [key, value] : given.items()) {
    const std::string path = prefix.empty() ? key : prefix + "." + key;
    if (!known.is_object() || !known.contains(key)) {
      throw ConfigError("unknown config key '" + path + "'", path);
    }
    if (key == "synthetic") {
      if (!value.is_null()) check_known_keys(value, synthetic_defaults(), path);
      continue;
    }
    if (value.is_object()) check_known_keys(value, known[key], path);
  }
}

template <class T>
T get_field(const Json& doc, const std::string& path) {
  const Json* node = &doc;
  std::size_t start = 0;
  while (start <= path.size()) {
    const auto dot = path.find('.', start);
    const std::string key = path.substr(start, dot == std::string::npos ? std::string::npos : dot - start);
    if (!node->is_object() || !node->contains(key)) {
      throw ConfigError("missing config field '" + path + "'", path);
    }
    node = &(*node)[key];
    if (dot == std::string::npos) break;
    start = dot + 1;
  }
  try {
    return node->get<T>();
  } catch (const Json::exception&) {
    throw ConfigError("config field '" + path + "' has the wrong type", path);
  }
}

// Merges `patch` into `base` recursively (objects merge, everything else replaces).
inline void merge_into(Json& base, const Json& patch) {
  for (const auto& [key, value] : patch.items()) {
    if (value.is_object() && base.contains(key) && base[key].is_object()) {
      merge_into(base[key], value);
    } else {
      base[key] = value;
    }
  }
}

}  // namespace detail

inline ExperimentConfig config_from_json(const Json& given) {
  if (!given.is_object()) throw ConfigError("config must be a JSON object");
  const ExperimentConfig defaults;
  Json doc = to_json(defaults);
  detail::check_known_keys(given, doc, "");
  if (given.contains("dataset") && given["dataset"].is_object() &&
      given["dataset"].contains("synthetic") && !given["dataset"]["synthetic"].is_null()) {
    doc["dataset"]["synthetic"] = detail::synthetic_defaults();
  }
  detail::merge_into(doc, given);

  using detail::get_field;
  ExperimentConfig c;
  c.dataset.path = get_field<std::string>(doc, "dataset.path");
  c.dataset.label_column = get_field<std::string>(doc, "dataset.label_column");
  c.dataset.has_header = get_field<bool>(doc, "dataset.has_header");
  if (!doc["dataset"]["synthetic"].is_null()) {
    SyntheticSpec s;
    s.n_per_class = get_field<Index>(doc, "dataset.synthetic.n_per_class");
    s.classes = get_field<int>(doc, "dataset.synthetic.classes");
    s.features = get_field<Index>(doc, "dataset.synthetic.features");
    s.separation = get_field<double>(doc, "dataset.synthetic.separation");
    s.seed = get_field<std::uint64_t>(doc, "dataset.synthetic.seed");
    s.label_noise = get_field<double>(doc, "dataset.synthetic.label_noise");
    c.dataset.synthetic = s;
  }
  const auto fractions = get_field<std::vector<double>>(doc, "split.fractions");
  if (fractions.size() != 3) {
    throw ConfigError("split.fractions needs exactly 3 entries", "split.fractions");
  }
  std::copy(fractions.begin(), fractions.end(), c.fractions.begin());
  c.split_seed = get_field<std::uint64_t>(doc, "split.seed");
  c.seeds = get_field<std::vector<std::uint64_t>>(doc, "seeds");
  const auto rounds = get_field<long long>(doc, "al.rounds");
  const auto budget = get_field<long long>(doc, "al.budget");
  const auto n_init = get_field<long long>(doc, "al.n_init");
  if (rounds < 0) throw ConfigError("al.rounds must be >= 0", "al.rounds");
  if (budget < 1) throw ConfigError("al.budget must be >= 1", "al.budget");
  if (n_init < 1) throw ConfigError("al.n_init must be >= 1", "al.n_init");
  c.rounds = static_cast<int>(rounds);
  c.budget = static_cast<Index>(budget);
  c.n_init = static_cast<Index>(n_init);
  c.strategies.clear();
  for (const auto& s : get_field<std::vector<std::string>>(doc, "al.strategies")) {
    c.strategies.push_back(parse_strategy(s));
  }
  c.warm_start = get_field<bool>(doc, "al.warm_start");
  c.standardize = get_field<bool>(doc, "preprocess.standardize");
  c.train.lambda = get_field<double>(doc, "train.lambda");
  c.train.grad_tol = get_field<double>(doc, "train.grad_tol");
  c.train.max_iterations = get_field<int>(doc, "train.max_iterations");
  c.cg.residual_tol = get_field<double>(doc, "cg.residual_tol");
  c.cg.max_iterations = get_field<int>(doc, "cg.max_iterations");
  c.dense_cap = get_field<Index>(doc, "dense_cap");
  c.unbounded_fraction = get_field<double>(doc, "unbounded.pool_fraction");
  c.unbounded_selection = get_field<std::string>(doc, "unbounded.selection");
  c.bin_mode = parse_bin_mode(get_field<std::string>(doc, "bins.mode"));
  const auto n_bins = get_field<long long>(doc, "bins.n_bins");
  if (n_bins < 2) throw ConfigError("bins.n_bins must be >= 2", "bins.n_bins");
  c.n_bins = static_cast<int>(n_bins);
  const auto n_cand = get_field<long long>(doc, "addone.n_candidates");
  if (n_cand < 0) throw ConfigError("addone.n_candidates must be >= 0", "addone.n_candidates");
  c.addone_candidates = static_cast<Index>(n_cand);
  const auto workers = get_field<long long>(doc, "workers");
  if (workers < 1) throw ConfigError("workers must be >= 1", "workers");
  c.workers = static_cast<int>(workers);
  c.output_dir = get_field<std::string>(doc, "output_dir");
  c.save_models = get_field<bool>(doc, "save_models");
  c.validate();
  return c;
}

// Applies a "dotted.path=value" override. The value is parsed as JSON when
// possible (numbers, booleans, arrays) and taken as a plain string otherwise.
inline void apply_override(Json& doc, const std::string& assignment) {
  const auto eq = assignment.find('=');
  if (eq == std::string::npos || eq == 0) {
    throw ConfigError("override '" + assignment + "' is not of the form key=value");
  }
  const std::string path = assignment.substr(0, eq);
  const std::string text = assignment.substr(eq + 1);
  Json value = Json::parse(text, nullptr, false);
  if (value.is_discarded()) value = text;
  Json* node = &doc;
  std::size_t start = 0;
  for (;;) {
    const auto dot = path.find('.', start);
    const std::string key = path.substr(start, dot == std::string::npos ? std::string::npos : dot - start);
    if (key.empty()) throw ConfigError("override path '" + path + "' is malformed", path);
    if (!node->is_object()) *node = Json::object();
    if (dot == std::string::npos) {
      (*node)[key] = value;
      return;
    }
    node = &(*node)[key];
    start = dot + 1;
  }
}

inline Json read_config_json(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw ConfigError("cannot read config file '" + path + "'", "--config");
  Json doc = Json::parse(in, nullptr, false);
  if (doc.is_discarded()) throw ConfigError("config file '" + path + "' is not valid JSON", "--config");
  return doc;
}

inline ExperimentConfig load_config(const std::string& path,
                                    const std::vector<std::string>& overrides = {}) {
  Json doc = read_config_json(path);
  for (const auto& o : overrides) apply_override(doc, o);
  return config_from_json(doc);
}

// Compact, key-sorted dump of the complete config.
inline std::string canonical_config(const ExperimentConfig& c) { return to_json(c).dump(); }

// Content hash (first 16 hex digits of SHA-256) of the canonical config and
// library version. Output location and worker count do not affect results
// and are excluded.
inline std::string run_id(const ExperimentConfig& c) {
  Json doc = to_json(c);
  doc.erase("output_dir");
  doc.erase("workers");
  const std::string text = doc.dump() + "\n" + kVersion;
  unsigned char digest[EVP_MAX_MD_SIZE];
  unsigned int len = 0;
  EVP_Digest(text.data(), text.size(), digest, &len, EVP_sha256(), nullptr);
  std::string hex;
  char buf[3];
  for (unsigned int i = 0; i < 8 && i < len; ++i) {
    std::snprintf(buf, sizeof(buf), "%02x", digest[i]);
    hex += buf;
  }
  return hex;
}

}  // namespace salutary
