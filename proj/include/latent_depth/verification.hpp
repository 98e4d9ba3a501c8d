#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include <json.hpp>

#include "latent_depth/tensor.hpp"

namespace latent_depth {

struct GradCheckOptions {
  std::uint64_t seed = 1;
  std::size_t seeds = 20;  // random instances per check
  Real tolerance = 1e-4;   // max relative error
};

struct GradCheckEntry {
  std::string name;  // e.g. "conv2d/weights"
  std::string op;    // operation under test, e.g. "conv2d"
  std::size_t seeds = 0;
  Real max_rel_error = 0.0;
  std::uint64_t worst_seed = 0;
  bool passed = false;
};

struct GradCheckReport {
  std::vector<GradCheckEntry> entries;
  GradCheckOptions options;

  bool passed() const;
  std::vector<const GradCheckEntry*> failures() const;
  nlohmann::json to_json() const;
  // One line per check: name, max error, PASS/FAIL.
  std::string text() const;
};

// Finite-difference checks of every differentiable operation and of the
// composed losses against a tiny frozen guided network.
GradCheckReport run_gradcheck_suite(const GradCheckOptions& options);

}  // namespace latent_depth
