#include "ecgclip/zeroshot.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <fstream>
#include <numeric>
#include <sstream>

#include "ecgclip/errors.hpp"

namespace ecgclip {

namespace {

const std::vector<std::string> kSuperclass = {"Normal ECG", "Conduction Disturbance", "Mycardinal Infarction",
                                              "Hypertrophy", "ST/T change"};
const std::vector<std::string> kRhythm = {"Sinus Arrhythmia", "ST/T change"};
const std::vector<std::string> kMitBih = {"Normal Beat",
                                          "Sinus Arrhythmia",
                                          "Sinus Tachycardia",
                                          "Sinus Bradycardia",
                                          "Atrial premature beat",
                                          "Atrial fibrillation",
                                          "Premature ventricular contraction",
                                          "Right bundle branch block beat",
                                          "Left bundle branch block beat"};
const std::vector<std::string> kNone;

std::vector<std::string> split_tabs(std::string_view line) {
  std::vector<std::string> cells;
  std::size_t start = 0;
  while (true) {
    const std::size_t tab = line.find('\t', start);
    cells.emplace_back(line.substr(start, tab == std::string_view::npos ? std::string_view::npos : tab - start));
    if (tab == std::string_view::npos) break;
    start = tab + 1;
  }
  return cells;
}

std::optional<std::string> cell(const std::string& s) {
  if (s.empty()) return std::nullopt;
  return s;
}

std::string percent(double v) {
  char buf[32];
  std::snprintf(buf, sizeof buf, "%.2f%%", v * 100.0);
  return buf;
}

}  // namespace

std::string_view task_name(Task t) {
  switch (t) {
    case Task::finegrained: return "finegrained";
    case Task::superclass: return "superclass";
    case Task::rhythm: return "rhythm";
    case Task::mitbih: return "mitbih";
  }
  return "unknown";
}

Task parse_task(std::string_view name) {
  for (Task t : {Task::finegrained, Task::superclass, Task::rhythm, Task::mitbih})
    if (task_name(t) == name) return t;
  throw UsageError("unknown task \"" + std::string(name) + "\" (finegrained|superclass|rhythm|mitbih)");
}

const std::vector<std::string>& superset_vocabulary(Task t) {
  switch (t) {
    case Task::superclass: return kSuperclass;
    case Task::rhythm: return kRhythm;
    case Task::mitbih: return kMitBih;
    case Task::finegrained: break;
  }
  return kNone;
}

std::optional<std::string> MappingRow::target(Task t) const {
  switch (t) {
    case Task::finegrained: return fine_label;
    case Task::superclass: return superclass;
    case Task::rhythm: return rhythm;
    case Task::mitbih: return mitbih;
  }
  return std::nullopt;
}

MappingTable::MappingTable(std::vector<MappingRow> rows) : rows_(std::move(rows)) {
  for (std::size_t i = 0; i < rows_.size(); ++i) {
    const auto& r = rows_[i];
    if (r.fine_label.empty()) throw DataError("mapping row " + std::to_string(i + 1) + " has an empty fine label");
    if (!index_.emplace(r.fine_label, i).second) {
      throw DataError("duplicate fine label \"" + r.fine_label + "\" in mapping");
    }
    for (Task t : {Task::superclass, Task::rhythm, Task::mitbih}) {
      const auto v = r.target(t);
      if (!v) continue;
      const auto& vocab = superset_vocabulary(t);
      if (std::find(vocab.begin(), vocab.end(), *v) == vocab.end()) {
        throw DataError("unknown " + std::string(task_name(t)) + " value \"" + *v + "\" for \"" + r.fine_label + "\"");
      }
    }
  }
}

const MappingRow* MappingTable::find(std::string_view fine_label) const {
  auto it = index_.find(std::string(fine_label));
  return it == index_.end() ? nullptr : &rows_[it->second];
}

std::vector<std::string> MappingTable::used_vocabulary(Task t) const {
  std::vector<std::string> out;
  for (const auto& v : superset_vocabulary(t)) {
    const bool used = std::any_of(rows_.begin(), rows_.end(), [&](const MappingRow& r) { return r.target(t) == v; });
    if (used) out.push_back(v);
  }
  return out;
}

MappingTable parse_mapping(std::string_view text) {
  std::vector<MappingRow> rows;
  std::size_t line_no = 0;
  bool header = true;
  std::size_t pos = 0;
  while (pos < text.size()) {
    std::size_t nl = text.find('\n', pos);
    std::string_view line = text.substr(pos, nl == std::string_view::npos ? std::string_view::npos : nl - pos);
    pos = nl == std::string_view::npos ? text.size() : nl + 1;
    ++line_no;
    if (!line.empty() && line.back() == '\r') line.remove_suffix(1);
    if (line.empty()) continue;
    auto cells = split_tabs(line);
    if (cells.size() != 4 && cells.size() != 5) {
      throw DataError("mapping line " + std::to_string(line_no) + ": expected 4 or 5 tab-separated columns, got " +
                      std::to_string(cells.size()));
    }
    if (header) {
      if (cells[0] != "fine_label") throw DataError("mapping file must start with a fine_label header row");
      header = false;
      continue;
    }
    MappingRow r;
    r.fine_label = cells[0];
    r.superclass = cell(cells[1]);
    r.rhythm = cell(cells[2]);
    r.mitbih = cell(cells[3]);
    if (cells.size() == 5) r.note = cells[4];
    rows.push_back(std::move(r));
  }
  if (header) throw DataError("mapping file is empty");
  return MappingTable(std::move(rows));
}

MappingTable load_mapping(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw DataError("cannot open mapping file " + path.string());
  std::stringstream ss;
  ss << in.rdbuf();
  return parse_mapping(ss.str());
}

std::vector<Ranked> classify(std::span<const double> embedding, const Candidates& candidates, std::size_t k) {
  const std::size_t n = candidates.labels.size();
  if (k == 0 || k > n) throw UsageError("k must lie in [1, candidate count]");
  std::vector<Ranked> all(n);
  for (std::size_t i = 0; i < n; ++i) all[i] = {i, cosine_sim(candidates.vectors.row(i), embedding)};
  std::stable_sort(all.begin(), all.end(), [](const Ranked& a, const Ranked& b) { return a.score > b.score; });
  all.resize(k);
  return all;
}

EvalReport score_embeddings(Task task, const Matrix& embeddings, std::span<const std::string> truth,
                            const Candidates& candidates, std::size_t k, bool with_topk) {
  if (embeddings.rows != truth.size()) throw UsageError("one ground-truth label per embedding row required");
  if (truth.empty()) throw DataError("empty evaluable set");
  const std::size_t n_cand = candidates.labels.size();
  k = std::min(k, n_cand);
  std::unordered_map<std::string, std::size_t> cand_index;
  for (std::size_t i = 0; i < n_cand; ++i) cand_index.emplace(candidates.labels[i], i);

  std::vector<std::size_t> support(n_cand, 0), hit1(n_cand, 0), hitk(n_cand, 0);
  for (std::size_t r = 0; r < truth.size(); ++r) {
    auto it = cand_index.find(truth[r]);
    if (it == cand_index.end()) throw DataError("ground-truth label \"" + truth[r] + "\" is not a candidate");
    const std::size_t gt = it->second;
    const auto ranked = classify(embeddings.row(r), candidates, k);
    ++support[gt];
    if (ranked.front().index == gt) ++hit1[gt];
    if (std::any_of(ranked.begin(), ranked.end(), [&](const Ranked& x) { return x.index == gt; })) ++hitk[gt];
  }

  EvalReport rep;
  rep.task = task;
  rep.k = k;
  std::size_t total = 0, total1 = 0, totalk = 0;
  for (std::size_t i = 0; i < n_cand; ++i) {
    if (support[i] == 0) continue;
    ReportRow row{candidates.labels[i], support[i], double(hit1[i]) / double(support[i]), std::nullopt};
    if (with_topk) row.topk = double(hitk[i]) / double(support[i]);
    rep.rows.push_back(std::move(row));
    total += support[i];
    total1 += hit1[i];
    totalk += hitk[i];
  }
  rep.overall = {"all", total, double(total1) / double(total), std::nullopt};
  if (with_topk) rep.overall.topk = double(totalk) / double(total);
  return rep;
}

Matrix embed_records(Model<float>& model, std::span<const EcgRecord> records, std::size_t chunk) {
  const auto& cfg = model.config();
  const std::size_t per = cfg.encoder.in_leads * cfg.encoder.input_length;
  const std::size_t p = cfg.projection_dim;
  Matrix out(records.size(), p);
  std::vector<float> buf;
  for (std::size_t start = 0; start < records.size(); start += chunk) {
    const std::size_t n = std::min(chunk, records.size() - start);
    buf.resize(n * per);
    for (std::size_t i = 0; i < n; ++i) {
      const auto& s = records[start + i].samples;
      if (s.size() != per) throw DataError("record shape does not match the encoder input");
      std::copy(s.begin(), s.end(), buf.begin() + i * per);
    }
    const auto f = encode<float>(model, buf, n, {Mode::infer});
    const auto e = project<float>(model.ecg_head(), f, n);
    for (std::size_t i = 0; i < n * p; ++i) out.data[start * p + i] = e[i];
  }
  return out;
}

Candidates project_candidates(const Model<float>& model, const EmbeddingTable& bank,
                              std::span<const std::string> labels) {
  if (bank.dim() != model.config().text_dim) {
    throw DataError("bank dimension " + std::to_string(bank.dim()) + " does not match the model's text dimension " +
                    std::to_string(model.config().text_dim));
  }
  Candidates c;
  c.labels.assign(labels.begin(), labels.end());
  std::vector<float> raw;
  raw.reserve(labels.size() * bank.dim());
  for (const auto& l : labels) {
    const auto v = bank.lookup(l);
    raw.insert(raw.end(), v.begin(), v.end());
  }
  const auto y = project<float>(model.text_head(), raw, labels.size());
  c.vectors = Matrix(labels.size(), model.config().projection_dim);
  std::copy(y.begin(), y.end(), c.vectors.data.begin());
  return c;
}

EvalReport eval_task(Model<float>& model, const EcgDataset& dataset, const EmbeddingTable& bank,
                     const MappingTable& mapping, Task task, std::size_t k) {
  std::vector<EcgRecord> kept;
  std::vector<std::string> truth;
  std::vector<std::string> labels;
  if (task == Task::finegrained) {
    labels = dataset.label_table.labels();
    for (const auto& r : dataset.records) truth.push_back(dataset.label_table[r.label_index]);
  } else {
    labels = superset_vocabulary(task);
    for (const auto& r : dataset.records) {
      const MappingRow* row = mapping.find(dataset.label_table[r.label_index]);
      if (!row) continue;
      if (auto t = row->target(task)) {
        kept.push_back(r);
        truth.push_back(*t);
      }
    }
  }
  if (truth.empty()) {
    throw DataError("empty evaluable set: no record has a " + std::string(task_name(task)) + " mapping");
  }
  const Candidates cands = project_candidates(model, bank, labels);
  const Matrix emb = embed_records(model, task == Task::finegrained ? std::span<const EcgRecord>(dataset.records)
                                                                    : std::span<const EcgRecord>(kept));
  return score_embeddings(task, emb, truth, cands, task == Task::finegrained ? k : 1,
                          task == Task::finegrained);
}

std::string render_report(const EvalReport& report) {
  std::ostringstream out;
  out << "label\tsupport\ttop1\ttop" << (report.task == Task::finegrained ? report.k : 5) << "\n";
  auto line = [&](const ReportRow& r) {
    out << r.label << '\t' << r.support << '\t' << percent(r.top1) << '\t' << (r.topk ? percent(*r.topk) : "-")
        << '\n';
  };
  for (const auto& r : report.rows) line(r);
  line(report.overall);
  return out.str();
}

void write_report(const EvalReport& report, const std::filesystem::path& path) {
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw DataError("cannot open report file " + path.string());
  out << render_report(report);
  if (!out) throw DataError("write failed: " + path.string());
}

}  // namespace ecgclip
