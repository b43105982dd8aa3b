#pragma once

#include <filesystem>
#include <fstream>
#include <ostream>
#include <string>

#include "salutary/config.hpp"
#include "salutary/engine.hpp"
#include "salutary/format.hpp"

namespace salutary {

// Result files. Reals are written in shortest round-trip form and rows are
// emitted in a fixed order, so identical runs produce identical bytes.

inline void write_rounds_header(std::ostream& out) {
  out << "run_id,seed,strategy,round,labeled_size,pool_size,val_accuracy,test_accuracy,"
         "disagreements_round\n";
}

inline void write_rounds_rows(std::ostream& out, const std::string& run_id, const SeedRun& run) {
  for (const auto& r : run.rounds) {
    out << run_id << ',' << run.seed << ',' << to_string(run.strategy) << ',' << r.round << ','
        << r.labeled_size << ',' << r.pool_size << ',' << format_double(r.val_accuracy) << ','
        << format_double(r.test_accuracy) << ',' << r.disagreements << '\n';
  }
}

inline void write_queries_header(std::ostream& out) {
  out << "run_id,seed,strategy,round,rank,sample_id,assigned_label,ground_truth_label,score\n";
}

inline void write_queries_rows(std::ostream& out, const std::string& run_id, const Dataset& ds,
                               const SeedRun& run) {
  for (const auto& r : run.rounds) {
    for (std::size_t k = 0; k < r.queried.entries.size(); ++k) {
      const auto& e = r.queried.entries[k];
      out << run_id << ',' << run.seed << ',' << to_string(run.strategy) << ',' << r.round << ','
          << e.rank << ',' << ds.id(e.sample_id) << ',' << e.assigned_label.value_or(-1) << ','
          << r.ground_truth.at(k) << ',' << format_double(e.score) << '\n';
    }
  }
}

inline void write_bins_csv(std::ostream& out, const BinReport& report) {
  out << "mode,bin_index,arm,test_accuracy,bin_mean_influence\n";
  for (const auto& row : report.rows) {
    out << to_string(report.mode) << ',' << row.bin_index << ',' << row.arm << ','
        << format_double(row.test_accuracy) << ','
        << (row.mean_influence ? format_double(*row.mean_influence) : std::string()) << '\n';
  }
}

inline void write_addone_csv(std::ostream& out, const Dataset& ds, const AddOneReport& report) {
  out << "sample_id,label,predicted_decrease,actual_decrease\n";
  for (const auto& row : report.rows) {
    out << ds.id(row.sample_id) << ',' << row.label << ',' << format_double(row.predicted_decrease)
        << ',' << format_double(row.actual_decrease) << '\n';
  }
}

inline Json label_mapping_json(const Dataset& ds) {
  Json m = Json::array();
  for (std::size_t c = 0; c < ds.label_values().size(); ++c) {
    m.push_back({{"class", c}, {"original", ds.label_values()[c]}});
  }
  return m;
}

inline Json summary_json(const ExperimentResult& result) {
  Json strategies = Json::object();
  for (const auto& s : result.summary) {
    strategies[std::string(to_string(s.strategy))] = {
        {"mean_final_test_accuracy", s.mean_final_accuracy},
        {"std_final_test_accuracy", s.std_final_accuracy},
        {"disagreements", s.disagreements},
        {"failed_seeds", s.failed_seeds},
    };
  }
  Json seeds = Json::array();
  for (const auto& run : result.runs) {
    Json entry = {{"strategy", std::string(to_string(run.strategy))},
                  {"seed", run.seed},
                  {"disagreements", run.disagreements()}};
    if (!run.rounds.empty()) {
      entry["initial_test_accuracy"] = run.rounds.front().test_accuracy;
      entry["final_test_accuracy"] = run.rounds.back().test_accuracy;
    }
    if (run.error) entry["error"] = {{"kind", run.error_kind}, {"message", *run.error}};
    seeds.push_back(std::move(entry));
  }
  return {{"strategies", strategies},
          {"runs", seeds},
          {"disagreement_total", count_disagreements(result)}};
}

inline void write_text_file(const std::filesystem::path& path, const std::string& body) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw IoError("cannot write '" + path.string() + "'");
  out << body;
  if (!out) throw IoError("write failed for '" + path.string() + "'");
}

}  // namespace salutary
