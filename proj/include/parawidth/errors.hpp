#pragma once

#include <stdexcept>
#include <string>

namespace parawidth {

// Base of every error raised by the library. The CLI maps these to exit
// code 3 (runtime) or 2 (usage/config) depending on the subclass.
class Error : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

// Malformed input files, bad flags, or inconsistent configuration.
class ConfigError : public Error {
 public:
  using Error::Error;
};

class IndexError : public Error {
 public:
  using Error::Error;
};

// A width configuration or value violates a declared constraint.
class ConstraintError : public Error {
 public:
  using Error::Error;
};

// Batch size not divisible by the number of parts, or bad part index.
class PartitionError : public Error {
 public:
  using Error::Error;
};

class DimensionError : public Error {
 public:
  using Error::Error;
};

class TrainingDivergence : public Error {
 public:
  TrainingDivergence(long iteration, const std::string& what)
      : Error("training diverged at iteration " + std::to_string(iteration) + ": " + what),
        iteration_(iteration) {}
  long iteration() const { return iteration_; }

 private:
  long iteration_;
};

class CalibrationError : public Error {
 public:
  using Error::Error;
};

class NormalizationError : public Error {
 public:
  using Error::Error;
};

class BuildError : public Error {
 public:
  using Error::Error;
};

class SamplingExhausted : public Error {
 public:
  SamplingExhausted(long trials, double closest_flops, double target_flops)
      : Error("no configuration accepted after " + std::to_string(trials) +
              " trials (target " + std::to_string(target_flops) + ", closest " +
              std::to_string(closest_flops) + ")"),
        trials_(trials),
        closest_flops_(closest_flops) {}
  long trials() const { return trials_; }
  double closest_flops() const { return closest_flops_; }

 private:
  long trials_;
  double closest_flops_;
};

}  // namespace parawidth
