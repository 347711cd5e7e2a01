#pragma once

#include <cstddef>
#include <stdexcept>
#include <string>

namespace geolab {

// Precondition violated by a numerical argument (non-symmetric input,
// spectrum on the branch cut, grid mismatch, ...).
class DomainError : public std::domain_error {
 public:
  using std::domain_error::domain_error;
};

// Base for failures of an otherwise valid computation. The CLI maps these
// to exit code 3.
class NumericalFailure : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

class IntegrationBlowup : public NumericalFailure {
 public:
  IntegrationBlowup(std::size_t step, double time)
      : NumericalFailure("integration produced a non-finite state at step " + std::to_string(step) +
                         " (t=" + std::to_string(time) + ")"),
        step_(step) {}
  std::size_t step() const noexcept { return step_; }

 private:
  std::size_t step_;
};

class NoConvergence : public NumericalFailure {
 public:
  NoConvergence(const std::string& what, double best_error)
      : NumericalFailure(what + " (best endpoint error " + std::to_string(best_error) + ")"),
        best_error_(best_error) {}
  double best_error() const noexcept { return best_error_; }

 private:
  double best_error_;
};

class TrainingDiverged : public NumericalFailure {
 public:
  TrainingDiverged(std::size_t step, double loss)
      : NumericalFailure("training diverged at step " + std::to_string(step) + " (loss " + std::to_string(loss) + ")") {}
};

class InsufficientData : public NumericalFailure {
 public:
  using NumericalFailure::NumericalFailure;
};

// Invalid experiment configuration. Exit code 2.
class ConfigError : public std::invalid_argument {
 public:
  using std::invalid_argument::invalid_argument;
};

}  // namespace geolab
