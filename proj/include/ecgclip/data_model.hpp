#pragma once

#include <array>
#include <cstddef>
#include <cstdint>
#include <filesystem>
#include <limits>
#include <optional>
#include <span>
#include <string>
#include <string_view>
#include <unordered_map>
#include <vector>

namespace ecgclip {

inline constexpr std::size_t kLeadCount = 12;
inline constexpr std::size_t kSampleCount = 5000;

/// Canonical lead order of the samples matrix.
inline constexpr std::array<std::string_view, kLeadCount> kLeadNames = {
    "I", "II", "III", "aVR", "aVL", "aVF", "V1", "V2", "V3", "V4", "V5", "V6"};

/// One recording. Samples are lead-major: lead 0 samples 0..n-1, then lead 1, ...
struct EcgRecord {
  std::uint32_t patient_id = 0;
  std::uint16_t label_index = 0;
  std::size_t lead_count = kLeadCount;
  std::size_t sample_count = kSampleCount;
  std::vector<float> samples;

  std::span<const float> lead(std::size_t l) const {
    return {samples.data() + l * sample_count, sample_count};
  }
  std::span<float> lead(std::size_t l) { return {samples.data() + l * sample_count, sample_count}; }

  bool operator==(const EcgRecord&) const = default;
};

/// Ordered list of unique, non-empty UTF-8 label strings.
class LabelTable {
 public:
  LabelTable() = default;
  /// Throws DataError on duplicate or empty labels.
  explicit LabelTable(std::vector<std::string> labels);

  std::size_t size() const { return labels_.size(); }
  bool empty() const { return labels_.empty(); }
  const std::string& operator[](std::size_t i) const { return labels_[i]; }
  const std::vector<std::string>& labels() const { return labels_; }
  std::optional<std::size_t> index_of(std::string_view label) const;

  bool operator==(const LabelTable& o) const { return labels_ == o.labels_; }

 private:
  std::vector<std::string> labels_;
  std::unordered_map<std::string, std::size_t> index_;
};

struct EcgDataset {
  float sampling_rate_hz = 500.0f;
  LabelTable label_table;
  std::vector<EcgRecord> records;

  bool operator==(const EcgDataset&) const = default;
};

struct Violation {
  static constexpr std::size_t kDatasetLevel = std::numeric_limits<std::size_t>::max();
  std::size_t record_index = kDatasetLevel;
  std::string reason;
};

/// Every invariant violation; an empty result means the dataset is valid.
std::vector<Violation> validate_dataset(const EcgDataset& d);

/// EDS1 encoding. Encoding requires a valid dataset (throws DataError otherwise).
std::vector<std::uint8_t> encode_dataset(const EcgDataset& d);
EcgDataset decode_dataset(std::span<const std::uint8_t> bytes);
void save_dataset(const EcgDataset& d, const std::filesystem::path& path);
EcgDataset load_dataset(const std::filesystem::path& path);

struct SplitSpec {
  std::array<double, 3> ratios{0.8, 0.1, 0.1};
  std::uint64_t seed = 0;

  /// Throws UsageError unless ratios lie in [0,1] and sum to 1 within 1e-9.
  void validate() const;
};

struct DatasetSplit {
  EcgDataset train;
  EcgDataset val;
  EcgDataset test;
};

/// Patient-level split: distinct patient ids are sorted, shuffled with the
/// seed, and cut at round(n * cumulative ratio). Records follow their patient
/// and keep their original relative order.
DatasetSplit split_by_patient(const EcgDataset& d, const SplitSpec& s);

/// Patient ids shared between two datasets (sorted, unique).
std::vector<std::uint32_t> shared_patients(const EcgDataset& a, const EcgDataset& b);

}  // namespace ecgclip
