#include "ecgclip/synth.hpp"

#include <algorithm>
#include <cmath>
#include <numbers>

#include "ecgclip/errors.hpp"
#include "ecgclip/random.hpp"

namespace ecgclip {

namespace {

constexpr std::uint64_t kPatientStream = 0x7061746900000000ULL;
constexpr std::uint64_t kRecordStream = 0x7265636f00000000ULL;

// Gaussian tails are cut where they fall below exp(-18) of the peak.
constexpr double kQrsSupportSigmas = 6.0;

}  // namespace

const std::array<double, kLeadCount> kQrsLeadGain = {0.6, 1.0, 0.4, -0.8, 0.3, 0.7,
                                                     -0.5, 0.2, 0.6, 1.1, 1.0, 0.8};

void SynthClassSpec::validate() const {
  auto finite = [](double v) { return std::isfinite(v); };
  if (label.empty()) throw UsageError("synthetic class needs a label");
  if (!finite(base_rate_hz) || base_rate_hz < 0.5 || base_rate_hz > 4.0) {
    throw UsageError("base rate of \"" + label + "\" must lie in [0.5, 4] Hz");
  }
  if (!finite(qrs_width_s) || qrs_width_s < 0.02 || qrs_width_s > 0.2) {
    throw UsageError("QRS width of \"" + label + "\" must lie in [0.02, 0.2] s");
  }
  if (!finite(noise_std) || noise_std < 0.0) throw UsageError("noise of \"" + label + "\" must be >= 0");
  if (!finite(arrhythmia_jitter) || arrhythmia_jitter < 0.0 || arrhythmia_jitter >= 0.5) {
    throw UsageError("jitter of \"" + label + "\" must lie in [0, 0.5)");
  }
  if (!std::all_of(t_amp.begin(), t_amp.end(), finite)) throw UsageError("T amplitudes must be finite");
}

double patient_amplitude(std::uint32_t patient_id) {
  CounterRng rng(derive_key(patient_id, kPatientStream));
  return rng.uniform(0.8, 1.2);
}

EcgRecord gen_record(const SynthClassSpec& spec, std::uint32_t patient_id, std::uint64_t seed,
                     std::uint16_t label_index) {
  spec.validate();
  EcgRecord r;
  r.patient_id = patient_id;
  r.label_index = label_index;
  r.samples.assign(kLeadCount * kSampleCount, 0.0f);

  CounterRng rng(derive_key(seed, kRecordStream ^ patient_id));
  const double amp = patient_amplitude(patient_id);
  const double rr = 1.0 / spec.base_rate_hz;
  const double duration = double(kSampleCount) / kSynthRateHz;
  const double sigma = spec.qrs_width_s / 6.0;

  // The first beat lies before the window so the T wave covers every sample.
  std::vector<double> beats;
  for (double t = rng.uniform(0.0, rr) - rr; t < duration;
       t += rr * (1.0 + spec.arrhythmia_jitter * rng.uniform(-1.0, 1.0))) {
    beats.push_back(t);
  }

  auto first_sample = [](double t) { return std::max<std::ptrdiff_t>(0, std::ptrdiff_t(std::ceil(t * kSynthRateHz))); };
  auto last_sample = [](double t) {
    return std::min<std::ptrdiff_t>(kSampleCount - 1, std::ptrdiff_t(std::ceil(t * kSynthRateHz)) - 1);
  };
  std::vector<double> qrs(kSampleCount, 0.0), twave(kSampleCount, 0.0);
  for (std::size_t b = 0; b < beats.size(); ++b) {
    const double t0 = beats[b];
    for (std::ptrdiff_t i = first_sample(t0 - kQrsSupportSigmas * sigma); i <= last_sample(t0 + kQrsSupportSigmas * sigma); ++i) {
      const double d = (double(i) / kSynthRateHz - t0) / sigma;
      qrs[i] += std::exp(-0.5 * d * d);
    }
    // T wave: one sine cycle per interval, positive lobe right after the QRS.
    const double span = (b + 1 < beats.size() ? beats[b + 1] : t0 + rr) - t0;
    for (std::ptrdiff_t i = first_sample(t0); i <= last_sample(t0 + span); ++i) {
      twave[i] = std::sin(2.0 * std::numbers::pi * (double(i) / kSynthRateHz - t0) / span);
    }
  }

  for (std::size_t l = 0; l < kLeadCount; ++l) {
    auto lead = r.lead(l);
    for (std::size_t i = 0; i < kSampleCount; ++i) {
      const double v = amp * (kQrsLeadGain[l] * qrs[i] + spec.t_amp[l] * twave[i]);
      lead[i] = static_cast<float>(spec.noise_std > 0.0 ? v + spec.noise_std * rng.normal() : v);
    }
  }
  return r;
}

EcgDataset gen_dataset(const std::vector<SynthClassSpec>& specs, std::size_t records_per_class,
                       std::size_t patients_per_class, std::uint64_t seed, std::uint32_t first_patient_id) {
  if (specs.empty()) throw UsageError("at least one synthetic class is required");
  if (patients_per_class == 0) throw UsageError("patients per class must be positive");
  std::vector<std::string> labels;
  for (const auto& s : specs) {
    s.validate();
    labels.push_back(s.label);
  }
  EcgDataset d;
  d.sampling_rate_hz = static_cast<float>(kSynthRateHz);
  d.label_table = LabelTable(labels);
  d.records.reserve(specs.size() * records_per_class);
  for (std::size_t c = 0; c < specs.size(); ++c) {
    for (std::size_t i = 0; i < records_per_class; ++i) {
      const auto patient = static_cast<std::uint32_t>(first_patient_id + c * patients_per_class + i % patients_per_class);
      d.records.push_back(gen_record(specs[c], patient, derive_key(seed, c * records_per_class + i),
                                     static_cast<std::uint16_t>(c)));
    }
  }
  return d;
}

std::vector<SynthClassSpec> default_suite() {
  struct Row {
    const char* label;
    double rate;
    double width;
  };
  // Labels are fine labels of the shipped zero-shot mapping, so superset
  // evaluation has something to score on synthetic data.
  static const Row rows[] = {
      {"Normal", 1.0, 0.06},
      {"Complete Left Bundle Branch Block", 1.0, 0.14},
      {"Sinus Arrhythmia", 1.5, 0.06},
      {"Complete Right Bundle Branch Block", 1.5, 0.14},
      {"Sinus Tachycardia", 2.0, 0.06},
      {"Ventricular Tachycardia", 2.0, 0.14},
      {"Supraventricular Tachycardia", 2.5, 0.06},
      {"Ventricular Bigeminy", 2.5, 0.14},
  };
  std::vector<SynthClassSpec> out;
  for (const auto& r : rows) {
    SynthClassSpec s;
    s.label = r.label;
    s.base_rate_hz = r.rate;
    s.qrs_width_s = r.width;
    // Wide complexes get discordant T waves.
    const double t_sign = r.width > 0.1 ? -1.0 : 1.0;
    for (std::size_t l = 0; l < kLeadCount; ++l) s.t_amp[l] = 0.3 * t_sign * kQrsLeadGain[l];
    s.noise_std = 0.05;
    s.arrhythmia_jitter = 0.05;
    out.push_back(std::move(s));
  }
  return out;
}

}  // namespace ecgclip
