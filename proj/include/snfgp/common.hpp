#pragma once

#include <cstdint>
#include <cstdio>
#include <stdexcept>
#include <string>

#include <Eigen/Dense>

namespace snfgp {

using Matrix = Eigen::MatrixXd;
using Vector = Eigen::VectorXd;

// Bad arguments, malformed configs or files. CLI maps this to exit code 2.
class InputError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

// Linear-algebra breakdown, non-finite values, divergence. CLI exit code 3.
class NumericalError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

class TrainingError : public NumericalError {
 public:
  TrainingError(const std::string& msg, int epoch, int batch)
      : NumericalError(msg), epoch(epoch), batch(batch) {}
  int epoch;
  int batch;
};

class ParseError : public InputError {
 public:
  using InputError::InputError;
};

class SerializationError : public InputError {
 public:
  using InputError::InputError;
};

// Shortest text form that round-trips a double exactly.
inline std::string format_double(double v) {
  char buf[32];
  std::snprintf(buf, sizeof(buf), "%.17g", v);
  return buf;
}

}  // namespace snfgp
