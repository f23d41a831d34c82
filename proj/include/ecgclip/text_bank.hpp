#pragma once

#include <cstddef>
#include <cstdint>
#include <filesystem>
#include <span>
#include <string>
#include <string_view>
#include <unordered_map>
#include <vector>

namespace ecgclip {

inline constexpr std::string_view kDefaultTemplate = "This ECG shows {reports}.";

/// Prompt with exactly one "{reports}" placeholder.
class PromptTemplate {
 public:
  static constexpr std::string_view kPlaceholder = "{reports}";

  /// Throws UsageError unless the placeholder occurs exactly once.
  explicit PromptTemplate(std::string text = std::string(kDefaultTemplate));

  /// Replaces the placeholder with the label verbatim. Throws UsageError on an empty label.
  std::string render(std::string_view label) const;
  const std::string& text() const { return text_; }

 private:
  std::string text_;
  std::size_t at_ = 0;
};

struct EmbeddingEntry {
  std::string label;
  std::vector<float> vector;

  bool operator==(const EmbeddingEntry&) const = default;
};

/// Frozen text vectors keyed by raw label string. Vectors are stored as
/// given; they are not re-normalized.
class EmbeddingTable {
 public:
  EmbeddingTable() = default;
  /// Throws DataError on empty input, dim mismatch, non-finite values or duplicate labels.
  EmbeddingTable(std::size_t dim, std::vector<EmbeddingEntry> entries);

  std::size_t dim() const { return dim_; }
  std::size_t size() const { return entries_.size(); }
  const std::vector<EmbeddingEntry>& entries() const { return entries_; }
  bool contains(std::string_view label) const;

  /// Throws DataError naming the label when absent.
  std::span<const float> lookup(std::string_view label) const;

  bool operator==(const EmbeddingTable& o) const { return dim_ == o.dim_ && entries_ == o.entries_; }

 private:
  std::size_t dim_ = 0;
  std::vector<EmbeddingEntry> entries_;
  std::unordered_map<std::string, std::size_t> index_;
};

/// Deterministic unit-norm stand-in for a language-model embedding of `label`.
std::vector<float> synthetic_embed(std::string_view label, std::size_t dim, std::uint64_t seed);

/// One synthetic_embed vector per label, in the given order.
EmbeddingTable build_bank(std::span<const std::string> labels, std::size_t dim, std::uint64_t seed);

/// ETB1 encoding.
std::vector<std::uint8_t> encode_table(const EmbeddingTable& t);
EmbeddingTable decode_table(std::span<const std::uint8_t> bytes);
void save_table(const EmbeddingTable& t, const std::filesystem::path& path);
EmbeddingTable load_table(const std::filesystem::path& path);

/// Content hash of the ETB1 encoding; stored in checkpoints.
std::uint64_t table_hash(const EmbeddingTable& t);

}  // namespace ecgclip
