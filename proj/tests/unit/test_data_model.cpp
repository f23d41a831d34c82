#include <gtest/gtest.h>

#include <algorithm>
#include <cmath>
#include <filesystem>
#include <limits>
#include <set>

#include "ecgclip/binary_io.hpp"
#include "ecgclip/data_model.hpp"
#include "ecgclip/errors.hpp"
#include "ecgclip/random.hpp"

using namespace ecgclip;

namespace {

EcgRecord make_record(std::uint32_t patient, std::uint16_t label, CounterRng& rng) {
  EcgRecord r;
  r.patient_id = patient;
  r.label_index = label;
  r.samples.resize(kLeadCount * kSampleCount);
  for (auto& x : r.samples) x = static_cast<float>(rng.normal());
  return r;
}

EcgDataset make_dataset(std::size_t records, std::size_t patients, std::uint64_t seed) {
  CounterRng rng(seed);
  EcgDataset d;
  d.label_table = LabelTable({"Normal", "洞性頻脈", "Complete Left Bundle Branch Block"});
  for (std::size_t i = 0; i < records; ++i) {
    d.records.push_back(make_record(static_cast<std::uint32_t>(i % patients), static_cast<std::uint16_t>(i % 3), rng));
  }
  return d;
}

std::string random_label(CounterRng& rng) {
  static const std::vector<std::string> pieces = {"a", "Z", " ", "ä", "心", "🫀", "-", "9"};
  std::string s;
  const std::size_t n = 1 + rng.below(12);
  for (std::size_t i = 0; i < n; ++i) s += pieces[rng.below(pieces.size())];
  return s;
}

/// Patients only, without 240 KB of samples each; for split properties.
EcgDataset light_dataset(const std::vector<std::uint32_t>& patients) {
  EcgDataset d;
  d.label_table = LabelTable({"x"});
  for (auto p : patients) {
    EcgRecord r;
    r.patient_id = p;
    d.records.push_back(r);
  }
  return d;
}

std::set<std::uint32_t> patient_set(const EcgDataset& d) {
  std::set<std::uint32_t> s;
  for (const auto& r : d.records) s.insert(r.patient_id);
  return s;
}

}  // namespace

TEST(LabelTable, RejectsDuplicatesAndEmpty) {
  EXPECT_THROW(LabelTable({"a", "a"}), DataError);
  EXPECT_THROW(LabelTable({"a", ""}), DataError);
  LabelTable t({"b", "a"});
  EXPECT_EQ(t.index_of("a"), 1u);
  EXPECT_FALSE(t.index_of("c"));
}

TEST(Validate, ValidDatasetHasNoViolations) { EXPECT_TRUE(validate_dataset(make_dataset(3, 3, 1)).empty()); }

TEST(Validate, ShortRecordNamesSampleCount) {
  auto d = make_dataset(3, 3, 2);
  d.records[1].sample_count = kSampleCount - 1;
  d.records[1].samples.resize(kLeadCount * (kSampleCount - 1));
  const auto v = validate_dataset(d);
  ASSERT_EQ(v.size(), 1u);
  EXPECT_EQ(v[0].record_index, 1u);
  EXPECT_NE(v[0].reason.find("sample count"), std::string::npos);
}

TEST(Validate, NanNamesNonFiniteSample) {
  auto d = make_dataset(3, 3, 3);
  d.records[2].samples[777] = std::numeric_limits<float>::quiet_NaN();
  const auto v = validate_dataset(d);
  ASSERT_EQ(v.size(), 1u);
  EXPECT_EQ(v[0].record_index, 2u);
  EXPECT_NE(v[0].reason.find("non-finite sample"), std::string::npos);
}

TEST(Validate, LabelOutOfRangeAndBadRate) {
  auto d = make_dataset(2, 2, 4);
  d.records[0].label_index = 3;
  d.sampling_rate_hz = 0.0f;
  const auto v = validate_dataset(d);
  ASSERT_EQ(v.size(), 2u);
  EXPECT_THROW(encode_dataset(d), DataError);
}

TEST(Eds1, ThreeRecordRoundTripIsByteIdentical) {
  const auto d = make_dataset(3, 2, 5);
  const auto path = std::filesystem::temp_directory_path() / "ecgclip_eds1_test.eds";
  save_dataset(d, path);
  const auto bytes = read_file(path);
  const auto back = load_dataset(path);
  EXPECT_EQ(back, d);
  EXPECT_EQ(encode_dataset(back), bytes);
  std::filesystem::remove(path);
}

TEST(Eds1, RandomizedRoundTrips) {
  CounterRng rng(6);
  for (int trial = 0; trial < 100; ++trial) {
    EcgDataset d;
    d.sampling_rate_hz = static_cast<float>(rng.uniform(1.0, 2000.0));
    std::vector<std::string> labels;
    const std::size_t n_labels = 1 + rng.below(6);
    while (labels.size() < n_labels) {
      auto l = random_label(rng);
      if (std::find(labels.begin(), labels.end(), l) == labels.end()) labels.push_back(l);
    }
    d.label_table = LabelTable(labels);
    const std::size_t n = rng.below(3);
    for (std::size_t i = 0; i < n; ++i) {
      d.records.push_back(make_record(static_cast<std::uint32_t>(rng.next_u64()),
                                      static_cast<std::uint16_t>(rng.below(n_labels)), rng));
    }
    const auto bytes = encode_dataset(d);
    const auto back = decode_dataset(bytes);
    ASSERT_EQ(back, d) << "trial " << trial;
    ASSERT_EQ(encode_dataset(back), bytes) << "trial " << trial;
  }
}

TEST(Eds1, BadMagic) {
  auto bytes = encode_dataset(make_dataset(1, 1, 7));
  std::copy_n("XXXX", 4, bytes.begin());
  try {
    decode_dataset(bytes);
    FAIL();
  } catch (const FormatError& e) {
    EXPECT_NE(std::string(e.what()).find("bad magic"), std::string::npos);
    EXPECT_EQ(e.offset(), 0u);
  }
}

TEST(Eds1, TruncationNamesExpectedAndActual) {
  const auto bytes = encode_dataset(make_dataset(2, 2, 8));
  const std::vector<std::uint8_t> cut(bytes.begin(), bytes.begin() + bytes.size() - 1000);
  try {
    decode_dataset(cut);
    FAIL();
  } catch (const FormatError& e) {
    const std::string msg = e.what();
    EXPECT_NE(msg.find("truncated"), std::string::npos) << msg;
    EXPECT_NE(msg.find("expected"), std::string::npos) << msg;
    EXPECT_NE(msg.find("available"), std::string::npos) << msg;
  }
  for (std::size_t len : {std::size_t{0}, std::size_t{3}, std::size_t{10}, bytes.size() / 2}) {
    EXPECT_THROW(decode_dataset(std::span(bytes).first(len)), FormatError) << len;
  }
}

TEST(Eds1, LabelIndexOutOfRangeReportsOffset) {
  auto d = make_dataset(1, 1, 9);
  auto bytes = encode_dataset(d);
  // The record's label field sits right after its patient id, 4 bytes past the record count.
  std::size_t header = 4 + 4 + 4 + 4;
  for (const auto& l : d.label_table.labels()) header += 2 + l.size();
  const std::size_t at = header + 4 + 4;
  bytes[at] = 7;
  try {
    decode_dataset(bytes);
    FAIL();
  } catch (const FormatError& e) {
    EXPECT_NE(std::string(e.what()).find("out of range"), std::string::npos) << e.what();
    EXPECT_EQ(e.offset(), at);
  }
}

TEST(Eds1, TrailingBytesRejected) {
  auto bytes = encode_dataset(make_dataset(1, 1, 10));
  bytes.push_back(0);
  EXPECT_THROW(decode_dataset(bytes), FormatError);
}

TEST(Eds1, MissingFileIsDataError) { EXPECT_THROW(load_dataset("/nonexistent/x.eds"), DataError); }

TEST(Split, TenPatientsGiveEightOneOne) {
  std::vector<std::uint32_t> patients;
  for (std::uint32_t p = 0; p < 10; ++p)
    for (int k = 0; k < 3; ++k) patients.push_back(100 + p);
  const auto d = light_dataset(patients);
  for (std::uint64_t seed : {0ULL, 1ULL, 99ULL, 123456789ULL}) {
    const auto s = split_by_patient(d, {{0.8, 0.1, 0.1}, seed});
    EXPECT_EQ(patient_set(s.train).size(), 8u);
    EXPECT_EQ(patient_set(s.val).size(), 1u);
    EXPECT_EQ(patient_set(s.test).size(), 1u);
  }
}

TEST(Split, SinglePatientAllTrain) {
  const auto d = light_dataset({5, 5, 5, 5, 5});
  const auto s = split_by_patient(d, {{1.0, 0.0, 0.0}, 3});
  EXPECT_EQ(s.train.records.size(), 5u);
  EXPECT_TRUE(s.val.records.empty());
  EXPECT_TRUE(s.test.records.empty());
}

TEST(Split, Deterministic) {
  CounterRng rng(11);
  std::vector<std::uint32_t> patients;
  for (int i = 0; i < 200; ++i) patients.push_back(static_cast<std::uint32_t>(rng.below(40)));
  const auto d = light_dataset(patients);
  const auto a = split_by_patient(d, {{0.6, 0.2, 0.2}, 7});
  const auto b = split_by_patient(d, {{0.6, 0.2, 0.2}, 7});
  EXPECT_EQ(a.train, b.train);
  EXPECT_EQ(a.val, b.val);
  EXPECT_EQ(a.test, b.test);
  const auto c = split_by_patient(d, {{0.6, 0.2, 0.2}, 8});
  EXPECT_NE(patient_set(a.train), patient_set(c.train));
}

TEST(Split, PartitionsRecordsWithDisjointPatients) {
  CounterRng rng(12);
  for (int trial = 0; trial < 200; ++trial) {
    std::vector<std::uint32_t> patients;
    const std::size_t n = 1 + rng.below(120);
    const std::size_t span = 1 + rng.below(60);
    for (std::size_t i = 0; i < n; ++i) patients.push_back(static_cast<std::uint32_t>(rng.below(span)));
    const auto d = light_dataset(patients);
    double r0 = rng.uniform(), r1 = rng.uniform() * (1.0 - r0);
    const SplitSpec spec{{r0, r1, 1.0 - r0 - r1}, rng.next_u64()};
    const auto s = split_by_patient(d, spec);
    ASSERT_EQ(s.train.records.size() + s.val.records.size() + s.test.records.size(), n);
    ASSERT_TRUE(shared_patients(s.train, s.val).empty());
    ASSERT_TRUE(shared_patients(s.train, s.test).empty());
    ASSERT_TRUE(shared_patients(s.val, s.test).empty());
    std::multiset<std::uint32_t> all(patients.begin(), patients.end()), got;
    for (const auto* part : {&s.train, &s.val, &s.test})
      for (const auto& r : part->records) got.insert(r.patient_id);
    ASSERT_EQ(all, got);
  }
}

TEST(Split, RejectsBadSpecsAndEmptyDataset) {
  EXPECT_THROW((SplitSpec{{0.5, 0.5, 0.5}, 0}.validate()), UsageError);
  EXPECT_THROW((SplitSpec{{1.2, -0.1, -0.1}, 0}.validate()), UsageError);
  EXPECT_NO_THROW((SplitSpec{{0.7, 0.2, 0.1}, 0}.validate()));
  EXPECT_THROW(split_by_patient(light_dataset({}), {}), DataError);
}

TEST(Split, SharedPatientsFindsLeaks) {
  const auto a = light_dataset({1, 2, 3, 3});
  const auto b = light_dataset({3, 4, 1});
  EXPECT_EQ(shared_patients(a, b), (std::vector<std::uint32_t>{1, 3}));
}
