#pragma once

#include <cstddef>
#include <filesystem>
#include <optional>
#include <span>
#include <string>
#include <string_view>
#include <unordered_map>
#include <vector>

#include "ecgclip/contrastive.hpp"
#include "ecgclip/data_model.hpp"
#include "ecgclip/encoder.hpp"
#include "ecgclip/text_bank.hpp"

namespace ecgclip {

enum class Task { finegrained, superclass, rhythm, mitbih };

std::string_view task_name(Task t);
/// Throws UsageError for an unknown name.
Task parse_task(std::string_view name);

/// Closed label vocabulary of a superset task, in canonical order. Empty for finegrained.
const std::vector<std::string>& superset_vocabulary(Task t);

struct MappingRow {
  std::string fine_label;
  std::optional<std::string> superclass;
  std::optional<std::string> rhythm;
  std::optional<std::string> mitbih;
  std::string note;

  /// Superset label for a task; the fine label itself for finegrained.
  std::optional<std::string> target(Task t) const;
};

/// Fine label -> superset labels, one row per fine label.
class MappingTable {
 public:
  MappingTable() = default;
  /// Throws DataError on duplicate fine labels or values outside the task vocabularies.
  explicit MappingTable(std::vector<MappingRow> rows);

  std::size_t size() const { return rows_.size(); }
  const std::vector<MappingRow>& rows() const { return rows_; }
  const MappingRow* find(std::string_view fine_label) const;
  /// Superset vocabulary values that actually occur in the table's column, canonical order.
  std::vector<std::string> used_vocabulary(Task t) const;

 private:
  std::vector<MappingRow> rows_;
  std::unordered_map<std::string, std::size_t> index_;
};

/// Parses the tab-separated mapping format: header row, then
/// fine_label, superclass, rhythm, mitbih[, note]; empty cell = no mapping.
MappingTable parse_mapping(std::string_view text);
MappingTable load_mapping(const std::filesystem::path& path);

/// Candidate labels with their projected prompt embeddings (one row each).
struct Candidates {
  std::vector<std::string> labels;
  Matrix vectors;
};

struct Ranked {
  std::size_t index = 0;
  double score = 0.0;
};

/// Top-k candidates by cosine similarity, descending; ties keep candidate order.
std::vector<Ranked> classify(std::span<const double> embedding, const Candidates& candidates, std::size_t k);

struct ReportRow {
  std::string label;
  std::size_t support = 0;
  double top1 = 0.0;
  std::optional<double> topk;

  bool operator==(const ReportRow&) const = default;
};

struct EvalReport {
  Task task = Task::finegrained;
  std::size_t k = 1;
  std::vector<ReportRow> rows;
  ReportRow overall{"all", 0, 0.0, std::nullopt};
};

/// Scores projected ECG embeddings against candidates. truth[i] must name a
/// candidate. Per-label rows follow candidate order and only cover labels
/// with support; `with_topk` adds the top-k column.
EvalReport score_embeddings(Task task, const Matrix& embeddings, std::span<const std::string> truth,
                            const Candidates& candidates, std::size_t k, bool with_topk);

/// Projected ECG embeddings (inference mode), one row per record.
Matrix embed_records(Model<float>& model, std::span<const EcgRecord> records, std::size_t chunk = 32);

/// Candidate vectors: bank entries for the labels passed through the text head.
Candidates project_candidates(const Model<float>& model, const EmbeddingTable& bank,
                              std::span<const std::string> labels);

/// Full protocol. Finegrained: truth is the record's label, candidates are the
/// dataset's labels, reports top-1 and top-k. Superset tasks: truth is the
/// mapped label, unmapped records are excluded, candidates are the task
/// vocabulary, reports top-1 only. Throws DataError when nothing is evaluable.
EvalReport eval_task(Model<float>& model, const EcgDataset& dataset, const EmbeddingTable& bank,
                     const MappingTable& mapping, Task task, std::size_t k = 5);

/// Tab-separated table: label, support, top1, top5 (or top<k>); percentages
/// with two decimals; per-label rows then "all".
std::string render_report(const EvalReport& report);
void write_report(const EvalReport& report, const std::filesystem::path& path);

}  // namespace ecgclip
