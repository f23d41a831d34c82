#include "ecgclip/data_model.hpp"

#include <algorithm>
#include <cmath>
#include <set>

#include "ecgclip/binary_io.hpp"
#include "ecgclip/errors.hpp"
#include "ecgclip/random.hpp"

namespace ecgclip {

namespace {

constexpr std::string_view kMagic = "EDS1";
constexpr std::uint32_t kVersion = 1;

std::string record_tag(std::size_t i) { return "record " + std::to_string(i); }

}  // namespace

LabelTable::LabelTable(std::vector<std::string> labels) : labels_(std::move(labels)) {
  for (std::size_t i = 0; i < labels_.size(); ++i) {
    if (labels_[i].empty()) throw DataError("label " + std::to_string(i) + " is empty");
    if (!index_.emplace(labels_[i], i).second) {
      throw DataError("duplicate label \"" + labels_[i] + "\"");
    }
  }
}

std::optional<std::size_t> LabelTable::index_of(std::string_view label) const {
  auto it = index_.find(std::string(label));
  if (it == index_.end()) return std::nullopt;
  return it->second;
}

std::vector<Violation> validate_dataset(const EcgDataset& d) {
  std::vector<Violation> out;
  if (!(d.sampling_rate_hz > 0.0f) || !std::isfinite(d.sampling_rate_hz)) {
    out.push_back({Violation::kDatasetLevel, "sampling rate must be positive and finite"});
  }
  for (std::size_t i = 0; i < d.records.size(); ++i) {
    const EcgRecord& r = d.records[i];
    if (r.lead_count != kLeadCount) {
      out.push_back({i, "lead count " + std::to_string(r.lead_count) + " != " +
                            std::to_string(kLeadCount)});
    }
    if (r.sample_count != kSampleCount) {
      out.push_back({i, "sample count " + std::to_string(r.sample_count) + " != " +
                            std::to_string(kSampleCount)});
    }
    if (r.samples.size() != r.lead_count * r.sample_count) {
      out.push_back({i, "payload size " + std::to_string(r.samples.size()) +
                            " does not match lead count x sample count"});
    }
    if (r.label_index >= d.label_table.size()) {
      out.push_back({i, "label index " + std::to_string(r.label_index) + " out of range (" +
                            std::to_string(d.label_table.size()) + " labels)"});
    }
    auto bad = std::find_if(r.samples.begin(), r.samples.end(),
                            [](float v) { return !std::isfinite(v); });
    if (bad != r.samples.end()) {
      out.push_back({i, "non-finite sample at position " +
                            std::to_string(std::distance(r.samples.begin(), bad))});
    }
  }
  return out;
}

std::vector<std::uint8_t> encode_dataset(const EcgDataset& d) {
  if (auto v = validate_dataset(d); !v.empty()) {
    std::string where = v.front().record_index == Violation::kDatasetLevel
                            ? std::string("dataset")
                            : record_tag(v.front().record_index);
    throw DataError("refusing to encode invalid dataset: " + where + ": " + v.front().reason);
  }
  ByteWriter w;
  w.magic(kMagic);
  w.u32(kVersion);
  w.f32(d.sampling_rate_hz);
  w.u32(static_cast<std::uint32_t>(d.label_table.size()));
  for (const auto& l : d.label_table.labels()) w.short_string(l);
  w.u32(static_cast<std::uint32_t>(d.records.size()));
  for (const auto& r : d.records) {
    w.u32(r.patient_id);
    w.u16(r.label_index);
    w.f32s(r.samples);
  }
  return std::move(w).take();
}

EcgDataset decode_dataset(std::span<const std::uint8_t> bytes) {
  ByteReader r(bytes);
  r.expect_magic(kMagic);
  const std::size_t version_at = r.offset();
  if (const auto version = r.u32(); version != kVersion) {
    throw FormatError("unsupported EDS1 version " + std::to_string(version), version_at);
  }
  EcgDataset d;
  d.sampling_rate_hz = r.f32();
  const std::uint32_t label_count = r.u32();
  std::vector<std::string> labels;
  labels.reserve(label_count);
  for (std::uint32_t i = 0; i < label_count; ++i) {
    const std::size_t at = r.offset();
    labels.push_back(r.short_string("label bytes"));
    if (labels.back().empty()) throw FormatError("empty label", at);
    if (std::find(labels.begin(), labels.end() - 1, labels.back()) != labels.end() - 1) {
      throw FormatError("duplicate label \"" + labels.back() + "\"", at);
    }
  }
  d.label_table = LabelTable(std::move(labels));
  const std::uint32_t record_count = r.u32();
  constexpr std::size_t payload = kLeadCount * kSampleCount * sizeof(float);
  // Checked up front so a huge bogus count fails before allocating.
  r.require(std::size_t{record_count} * (6 + payload), "record payload");
  d.records.resize(record_count);
  for (std::uint32_t i = 0; i < record_count; ++i) {
    EcgRecord& rec = d.records[i];
    rec.patient_id = r.u32();
    const std::size_t label_at = r.offset();
    rec.label_index = r.u16();
    if (rec.label_index >= d.label_table.size()) {
      throw FormatError(record_tag(i) + ": label index " + std::to_string(rec.label_index) +
                            " out of range (" + std::to_string(d.label_table.size()) + " labels)",
                        label_at);
    }
    rec.samples.resize(kLeadCount * kSampleCount);
    r.f32s(rec.samples, "record samples");
  }
  if (!r.at_end()) throw FormatError("trailing bytes after last record", r.offset());
  return d;
}

void save_dataset(const EcgDataset& d, const std::filesystem::path& path) {
  write_file(path, encode_dataset(d));
}

EcgDataset load_dataset(const std::filesystem::path& path) { return decode_dataset(read_file(path)); }

void SplitSpec::validate() const {
  double sum = 0.0;
  for (double r : ratios) {
    if (!(r >= 0.0 && r <= 1.0)) throw UsageError("split ratio outside [0, 1]");
    sum += r;
  }
  if (std::abs(sum - 1.0) > 1e-9) throw UsageError("split ratios must sum to 1");
}

DatasetSplit split_by_patient(const EcgDataset& d, const SplitSpec& s) {
  s.validate();
  if (d.records.empty()) throw DataError("cannot split an empty dataset");

  std::vector<std::uint32_t> patients;
  patients.reserve(d.records.size());
  for (const auto& r : d.records) patients.push_back(r.patient_id);
  std::sort(patients.begin(), patients.end());
  patients.erase(std::unique(patients.begin(), patients.end()), patients.end());

  CounterRng rng(derive_key(s.seed, 0x5350'4c49'54ULL));
  shuffle(patients, rng);

  const double n = static_cast<double>(patients.size());
  const auto cut1 = static_cast<std::size_t>(std::llround(n * s.ratios[0]));
  const auto cut2 = static_cast<std::size_t>(std::llround(n * (s.ratios[0] + s.ratios[1])));
  std::unordered_map<std::uint32_t, int> bucket;
  for (std::size_t i = 0; i < patients.size(); ++i) {
    bucket[patients[i]] = i < cut1 ? 0 : (i < std::min(cut2, patients.size()) ? 1 : 2);
  }

  DatasetSplit out;
  for (EcgDataset* part : {&out.train, &out.val, &out.test}) {
    part->sampling_rate_hz = d.sampling_rate_hz;
    part->label_table = d.label_table;
  }
  for (const auto& r : d.records) {
    EcgDataset* dst[] = {&out.train, &out.val, &out.test};
    dst[bucket.at(r.patient_id)]->records.push_back(r);
  }
  return out;
}

std::vector<std::uint32_t> shared_patients(const EcgDataset& a, const EcgDataset& b) {
  std::set<std::uint32_t> pa;
  for (const auto& r : a.records) pa.insert(r.patient_id);
  std::set<std::uint32_t> both;
  for (const auto& r : b.records) {
    if (pa.count(r.patient_id)) both.insert(r.patient_id);
  }
  return {both.begin(), both.end()};
}

}  // namespace ecgclip
