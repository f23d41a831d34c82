#pragma once

// Deterministic synthetic 12-lead ECG generator: Gaussian QRS spikes at a
// class rate, a sinusoidal per-beat T wave, interval jitter and white noise.

#include <array>
#include <cstddef>
#include <cstdint>
#include <string>
#include <vector>

#include "ecgclip/data_model.hpp"

namespace ecgclip {

inline constexpr double kSynthRateHz = 500.0;

struct SynthClassSpec {
  std::string label;
  double base_rate_hz = 1.0;
  double qrs_width_s = 0.08;
  std::array<double, kLeadCount> t_amp{};
  double noise_std = 0.05;
  /// Each RR interval is scaled by 1 + u * jitter, u uniform in [-1, 1].
  double arrhythmia_jitter = 0.0;

  /// Throws UsageError unless rate lies in [0.5, 4] Hz, width in [0.02, 0.2] s,
  /// noise >= 0, jitter in [0, 0.5) and all values finite.
  void validate() const;
};

/// QRS amplitude of each lead, in millivolts, before the patient scale.
extern const std::array<double, kLeadCount> kQrsLeadGain;

/// Per-patient amplitude scale in [0.8, 1.2], a function of the id only.
double patient_amplitude(std::uint32_t patient_id);

/// 12 x 5000 record at 500 Hz, fully determined by (spec, patient_id, seed).
EcgRecord gen_record(const SynthClassSpec& spec, std::uint32_t patient_id, std::uint64_t seed,
                     std::uint16_t label_index = 0);

/// Label table = the class labels in order. Class c uses patients first_patient_id + c * patients_per_class + p,
/// assigned round-robin over its records. Records are class-major.
EcgDataset gen_dataset(const std::vector<SynthClassSpec>& specs, std::size_t records_per_class,
                       std::size_t patients_per_class, std::uint64_t seed, std::uint32_t first_patient_id = 0);

/// Eight separable classes: rate {1.0, 1.5, 2.0, 2.5} Hz x QRS {0.06, 0.14} s.
std::vector<SynthClassSpec> default_suite();

}  // namespace ecgclip
