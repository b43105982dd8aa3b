#pragma once

#include <stdexcept>
#include <string>

namespace salutary {

// Base for every error the library raises. The CLI maps the concrete type to
// an exit code (see cli.hpp).
class Error : public std::runtime_error {
public:
  using std::runtime_error::runtime_error;
  virtual const char* kind() const noexcept { return "error"; }
};

// Invalid arguments, configuration or malformed input data.
class ConfigError : public Error {
public:
  explicit ConfigError(const std::string& what, std::string field = {})
      : Error(what), field_(std::move(field)) {}
  const char* kind() const noexcept override { return "config"; }
  const std::string& field() const noexcept { return field_; }

private:
  std::string field_;
};

// CSV ingestion failure; carries the offending row (1-based, header counts)
// and column name when known.
class DataError : public ConfigError {
public:
  DataError(const std::string& what, long row = -1, std::string column = {})
      : ConfigError(what, column), row_(row) {}
  const char* kind() const noexcept override { return "data"; }
  long row() const noexcept { return row_; }

private:
  long row_;
};

// Non-convergence of the trainer or of an iterative solve.
class NumericalError : public Error {
public:
  using Error::Error;
  const char* kind() const noexcept override { return "numerical"; }
};

class SolverError : public NumericalError {
public:
  SolverError(const std::string& what, double best_residual, int iterations)
      : NumericalError(what), best_residual_(best_residual), iterations_(iterations) {}
  const char* kind() const noexcept override { return "solver"; }
  double best_residual() const noexcept { return best_residual_; }
  int iterations() const noexcept { return iterations_; }

private:
  double best_residual_;
  int iterations_;
};

class IoError : public Error {
public:
  using Error::Error;
  const char* kind() const noexcept override { return "io"; }
};

}  // namespace salutary
