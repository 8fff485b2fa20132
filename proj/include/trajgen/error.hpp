#pragma once

#include <stdexcept>
#include <string>
#include <utility>
#include <vector>

namespace trajgen {

// Violated precondition of an API call (bad dimensions, empty input, ...).
class ContractError : public std::invalid_argument {
 public:
  using std::invalid_argument::invalid_argument;
};

// Operand shapes do not conform for a tensor operation.
class ShapeError : public ContractError {
 public:
  using ContractError::ContractError;
};

// Argument outside the mathematical domain of an operation (log of x <= 0).
class DomainError : public std::domain_error {
 public:
  using std::domain_error::domain_error;
};

// Malformed or out-of-range input data. `line` is 1-based when known, 0 otherwise.
class IngestError : public std::runtime_error {
 public:
  IngestError(const std::string& what, std::size_t line = 0)
      : std::runtime_error(what), line_(line) {}
  std::size_t line() const { return line_; }

 private:
  std::size_t line_;
};

// Inconsistent derived data, e.g. a remaining-distance channel going negative.
class DataError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

// A sequential sampler reached a state it cannot continue from (empty Markov row,
// untrained flow bin). Carries the trajectory produced so far and the offending bin.
class SamplingError : public std::runtime_error {
 public:
  SamplingError(const std::string& what, std::vector<double> partial, std::size_t bin)
      : std::runtime_error(what), partial_(std::move(partial)), bin_(bin) {}
  const std::vector<double>& partial() const { return partial_; }
  std::size_t bin() const { return bin_; }

 private:
  std::vector<double> partial_;
  std::size_t bin_;
};

// Training produced a non-finite loss.
class DivergenceError : public std::runtime_error {
 public:
  DivergenceError(const std::string& what, std::string checkpoint)
      : std::runtime_error(what), checkpoint_(std::move(checkpoint)) {}
  const std::string& checkpoint() const { return checkpoint_; }

 private:
  std::string checkpoint_;
};

}  // namespace trajgen
