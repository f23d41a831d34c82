#include "ecgclip/text_bank.hpp"

#include <cmath>

#include "ecgclip/binary_io.hpp"
#include "ecgclip/errors.hpp"
#include "ecgclip/random.hpp"

namespace ecgclip {

namespace {
constexpr std::string_view kMagic = "ETB1";
constexpr std::uint32_t kVersion = 1;
}  // namespace

PromptTemplate::PromptTemplate(std::string text) : text_(std::move(text)) {
  at_ = text_.find(kPlaceholder);
  if (at_ == std::string::npos) {
    throw UsageError("prompt template lacks the {reports} placeholder");
  }
  if (text_.find(kPlaceholder, at_ + 1) != std::string::npos) {
    throw UsageError("prompt template contains more than one {reports} placeholder");
  }
}

std::string PromptTemplate::render(std::string_view label) const {
  if (label.empty()) throw UsageError("cannot render a prompt for an empty label");
  std::string out;
  out.reserve(text_.size() + label.size());
  out.append(text_, 0, at_);
  out.append(label);
  out.append(text_, at_ + kPlaceholder.size());
  return out;
}

EmbeddingTable::EmbeddingTable(std::size_t dim, std::vector<EmbeddingEntry> entries)
    : dim_(dim), entries_(std::move(entries)) {
  if (dim_ == 0) throw DataError("embedding dimension must be positive");
  if (entries_.empty()) throw DataError("embedding table needs at least one entry");
  for (std::size_t i = 0; i < entries_.size(); ++i) {
    const auto& e = entries_[i];
    if (e.label.empty()) throw DataError("embedding entry " + std::to_string(i) + " has an empty label");
    if (e.vector.size() != dim_) {
      throw DataError("embedding for \"" + e.label + "\" has length " +
                      std::to_string(e.vector.size()) + ", expected " + std::to_string(dim_));
    }
    for (float v : e.vector) {
      if (!std::isfinite(v)) throw DataError("embedding for \"" + e.label + "\" is not finite");
    }
    if (!index_.emplace(e.label, i).second) {
      throw DataError("duplicate label \"" + e.label + "\" in embedding table");
    }
  }
}

bool EmbeddingTable::contains(std::string_view label) const {
  return index_.count(std::string(label)) != 0;
}

std::span<const float> EmbeddingTable::lookup(std::string_view label) const {
  auto it = index_.find(std::string(label));
  if (it == index_.end()) {
    throw DataError("label \"" + std::string(label) + "\" not found in embedding table");
  }
  return entries_[it->second].vector;
}

std::vector<float> synthetic_embed(std::string_view label, std::size_t dim, std::uint64_t seed) {
  if (dim < 2) throw UsageError("synthetic embedding dimension must be at least 2");
  CounterRng rng(hash_label(label, seed));
  std::vector<double> v(dim);
  double norm2 = 0.0;
  for (double& x : v) {
    x = rng.normal();
    norm2 += x * x;
  }
  const double inv = 1.0 / std::sqrt(norm2);
  std::vector<float> out(dim);
  for (std::size_t i = 0; i < dim; ++i) out[i] = static_cast<float>(v[i] * inv);
  return out;
}

EmbeddingTable build_bank(std::span<const std::string> labels, std::size_t dim, std::uint64_t seed) {
  std::vector<EmbeddingEntry> entries;
  entries.reserve(labels.size());
  for (const auto& l : labels) entries.push_back({l, synthetic_embed(l, dim, seed)});
  return EmbeddingTable(dim, std::move(entries));
}

std::vector<std::uint8_t> encode_table(const EmbeddingTable& t) {
  ByteWriter w;
  w.magic(kMagic);
  w.u32(kVersion);
  w.u32(static_cast<std::uint32_t>(t.size()));
  w.u32(static_cast<std::uint32_t>(t.dim()));
  for (const auto& e : t.entries()) {
    w.short_string(e.label);
    w.f32s(e.vector);
  }
  return std::move(w).take();
}

EmbeddingTable decode_table(std::span<const std::uint8_t> bytes) {
  ByteReader r(bytes);
  r.expect_magic(kMagic);
  const std::size_t version_at = r.offset();
  if (const auto version = r.u32(); version != kVersion) {
    throw FormatError("unsupported ETB1 version " + std::to_string(version), version_at);
  }
  const std::uint32_t count = r.u32();
  const std::size_t dim_at = r.offset();
  const std::uint32_t dim = r.u32();
  if (dim == 0) throw FormatError("embedding dimension is zero", dim_at);
  if (count == 0) throw FormatError("embedding table has no entries", dim_at);
  std::vector<EmbeddingEntry> entries(count);
  std::unordered_map<std::string, std::size_t> seen;
  for (std::uint32_t i = 0; i < count; ++i) {
    const std::size_t at = r.offset();
    entries[i].label = r.short_string("label bytes");
    if (entries[i].label.empty()) throw FormatError("empty label", at);
    if (!seen.emplace(entries[i].label, i).second) {
      throw FormatError("duplicate label \"" + entries[i].label + "\"", at);
    }
    entries[i].vector.resize(dim);
    const std::size_t vec_at = r.offset();
    r.f32s(entries[i].vector, "embedding values");
    for (float v : entries[i].vector) {
      if (!std::isfinite(v)) throw FormatError("non-finite embedding value", vec_at);
    }
  }
  if (!r.at_end()) throw FormatError("trailing bytes after last entry", r.offset());
  return EmbeddingTable(dim, std::move(entries));
}

void save_table(const EmbeddingTable& t, const std::filesystem::path& path) {
  write_file(path, encode_table(t));
}

EmbeddingTable load_table(const std::filesystem::path& path) { return decode_table(read_file(path)); }

std::uint64_t table_hash(const EmbeddingTable& t) { return fnv1a64(encode_table(t)); }

}  // namespace ecgclip
