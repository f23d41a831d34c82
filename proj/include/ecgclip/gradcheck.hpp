#pragma once

// Central finite-difference verification of contrastive_step gradients.

#include <cstddef>
#include <cstdint>
#include <functional>
#include <string>
#include <vector>

#include "ecgclip/encoder.hpp"

namespace ecgclip {

struct GradCheckConfig {
  ModelConfig model;
  std::size_t batch = 4;
  double epsilon = 1e-3;
  /// Entries compared per tensor; 0 compares every entry. Sampling always
  /// includes the entry with the largest analytic gradient.
  std::size_t samples_per_tensor = 64;
  std::uint64_t seed = 0;
  double tolerance = 1e-4;
  double log_tau_tolerance = 1e-5;
  /// Applied to the analytic gradients before comparison (harness sensitivity tests).
  std::function<void(const Model<double>&, Gradients<double>&)> mutate;
};

/// Width 1/8, 500-sample inputs, batch 4.
GradCheckConfig default_grad_check_config(std::uint64_t seed);

struct GroupCheck {
  std::string name;
  std::size_t checked = 0;
  /// max |analytic - numeric| over checked entries divided by the largest
  /// magnitude of either among them.
  double max_rel = 0.0;
  double tolerance = 0.0;
  bool passed() const { return max_rel < tolerance; }
};

struct GradCheckReport {
  std::vector<GroupCheck> groups;
  double max_rel = 0.0;
  double seconds = 0.0;
  bool passed() const;
};

/// ReLU masks and pool winners are recorded on the analytic pass and replayed
/// on every perturbed pass, so differences never straddle a kink.
GradCheckReport grad_check(const GradCheckConfig& config);

}  // namespace ecgclip
