#pragma once

#include <stdexcept>
#include <string>

namespace latent_depth {

// Tensor shape disagreement. Never resolved by broadcasting.
class ShapeError : public std::invalid_argument {
 public:
  using std::invalid_argument::invalid_argument;
};

// Bad argument value (nonpositive size, empty selection, ...).
class ArgumentError : public std::invalid_argument {
 public:
  using std::invalid_argument::invalid_argument;
};

// NaN/Inf reached a place that requires finite values.
class NonFiniteError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

// Misuse of the recorded computation graph.
class GraphError : public std::logic_error {
 public:
  using std::logic_error::logic_error;
};

// File-level failures: unreadable paths, malformed checkpoints and manifests.
class IoError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

}  // namespace latent_depth
