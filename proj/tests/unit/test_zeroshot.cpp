#include <gtest/gtest.h>

#include <algorithm>
#include <cmath>
#include <fstream>
#include <sstream>
#include <numeric>

#include "ecgclip/errors.hpp"
#include "ecgclip/random.hpp"
#include "ecgclip/zeroshot.hpp"

using namespace ecgclip;

namespace {

std::filesystem::path mapping_path() { return std::filesystem::path(ECGCLIP_DATA_DIR) / "zero_shot_mapping.tsv"; }

Candidates random_candidates(std::size_t n, std::size_t dim, CounterRng& rng) {
  Candidates c;
  c.vectors = Matrix(n, dim);
  for (std::size_t i = 0; i < n; ++i) c.labels.push_back("c" + std::to_string(i));
  for (auto& x : c.vectors.data) x = rng.normal();
  return c;
}

std::vector<double> random_vector(std::size_t dim, CounterRng& rng) {
  std::vector<double> v(dim);
  for (auto& x : v) x = rng.normal();
  return v;
}

double scalar_cosine(std::span<const double> a, std::span<const double> b) {
  double ab = 0, aa = 0, bb = 0;
  for (std::size_t i = 0; i < a.size(); ++i) {
    ab += a[i] * b[i];
    aa += a[i] * a[i];
    bb += b[i] * b[i];
  }
  return ab / std::sqrt(aa * bb);
}

ModelConfig tiny_config() {
  ModelConfig c;
  c.encoder.stage_blocks = {1, 1, 1, 1};
  c.encoder.stage_channels = {4, 4, 6, 8};
  c.encoder.stem_kernel = 5;
  c.encoder.block_kernel = 3;
  c.encoder.input_length = 64;
  c.text_dim = 6;
  c.projection_dim = 5;
  return c;
}

}  // namespace

TEST(Task, NamesRoundTrip) {
  for (Task t : {Task::finegrained, Task::superclass, Task::rhythm, Task::mitbih}) {
    EXPECT_EQ(parse_task(task_name(t)), t);
  }
  EXPECT_THROW(parse_task("form"), UsageError);
}

TEST(Mapping, ShippedFileHasOneRowPerFineLabel) {
  const auto m = load_mapping(mapping_path());
  EXPECT_EQ(m.size(), 98u);
  EXPECT_EQ(superset_vocabulary(Task::superclass).size(), 5u);
  EXPECT_EQ(m.used_vocabulary(Task::superclass), superset_vocabulary(Task::superclass));
  EXPECT_EQ(m.used_vocabulary(Task::rhythm), superset_vocabulary(Task::rhythm));
}

TEST(Mapping, ShippedExamples) {
  const auto m = load_mapping(mapping_path());
  const auto* normal = m.find("Normal");
  ASSERT_NE(normal, nullptr);
  EXPECT_EQ(normal->superclass, "Normal ECG");
  EXPECT_EQ(normal->mitbih, "Normal Beat");

  const auto* crbbb = m.find("Complete Right Bundle Branch Block");
  ASSERT_NE(crbbb, nullptr);
  EXPECT_EQ(crbbb->superclass, "Conduction Disturbance");
  EXPECT_EQ(crbbb->mitbih, "Right bundle branch block beat");

  const auto* tachy = m.find("Tachycardia");
  ASSERT_NE(tachy, nullptr);
  EXPECT_FALSE(tachy->superclass);
  EXPECT_FALSE(tachy->rhythm);
  EXPECT_FALSE(tachy->mitbih);
}

TEST(Mapping, ParsesOptionalCellsAndNotes) {
  const auto m = parse_mapping(
      "fine_label\tsuperclass\trhythm\tmitbih\n"
      "A\tHypertrophy\t\t\n"
      "B\t\tSinus Arrhythmia\tNormal Beat\tchecked\r\n"
      "\n");
  ASSERT_EQ(m.size(), 2u);
  EXPECT_EQ(m.find("A")->superclass, "Hypertrophy");
  EXPECT_FALSE(m.find("A")->rhythm);
  EXPECT_EQ(m.find("B")->rhythm, "Sinus Arrhythmia");
  EXPECT_EQ(m.find("B")->note, "checked");
  EXPECT_EQ(m.find("C"), nullptr);
  EXPECT_EQ(m.find("B")->target(Task::finegrained), "B");
}

TEST(Mapping, RejectsBadInput) {
  const std::string header = "fine_label\tsuperclass\trhythm\tmitbih\n";
  EXPECT_THROW(parse_mapping(header + "A\t\t\t\nA\t\t\t\n"), DataError);
  EXPECT_THROW(parse_mapping(header + "A\tCardiomegaly\t\t\n"), DataError);
  EXPECT_THROW(parse_mapping(header + "A\t\t\tAtrial flutter\n"), DataError);
  EXPECT_THROW(parse_mapping(header + "A\t\t\n"), DataError);
  EXPECT_THROW(parse_mapping("A\t\t\t\n"), DataError);
  EXPECT_THROW(parse_mapping(""), DataError);
  EXPECT_THROW(load_mapping("/nonexistent/mapping.tsv"), DataError);
}

TEST(Classify, EqualVectorRanksFirstWithScoreOne) {
  CounterRng rng(1);
  const auto c = random_candidates(7, 16, rng);
  const auto v = c.vectors.row(4);
  const auto r = classify(std::vector<double>(v.begin(), v.end()), c, 3);
  ASSERT_EQ(r.size(), 3u);
  EXPECT_EQ(r[0].index, 4u);
  EXPECT_NEAR(r[0].score, 1.0, 1e-12);
}

TEST(Classify, FullRankingIsPermutation) {
  CounterRng rng(2);
  const auto c = random_candidates(10, 8, rng);
  const auto r = classify(random_vector(8, rng), c, 10);
  std::vector<std::size_t> idx;
  for (const auto& x : r) idx.push_back(x.index);
  std::sort(idx.begin(), idx.end());
  std::vector<std::size_t> expect(10);
  std::iota(expect.begin(), expect.end(), 0);
  EXPECT_EQ(idx, expect);
  for (std::size_t i = 1; i < r.size(); ++i) EXPECT_GE(r[i - 1].score, r[i].score);
}

TEST(Classify, MatchesBruteForceOracle) {
  CounterRng rng(3);
  for (int trial = 0; trial < 200; ++trial) {
    const std::size_t n = 1 + rng.below(64);
    const std::size_t dim = 2 + rng.below(20);
    const auto c = random_candidates(n, dim, rng);
    const auto e = random_vector(dim, rng);
    std::vector<std::pair<double, std::size_t>> brute;
    for (std::size_t i = 0; i < n; ++i) brute.push_back({scalar_cosine(c.vectors.row(i), e), i});
    for (std::size_t a = 0; a < n; ++a)
      for (std::size_t b = a + 1; b < n; ++b)
        if (brute[b].first > brute[a].first) std::swap(brute[a], brute[b]);
    const auto r = classify(e, c, n);
    for (std::size_t i = 0; i < n; ++i) ASSERT_EQ(r[i].index, brute[i].second) << "trial " << trial;
  }
}

TEST(Classify, TiesKeepCandidateOrder) {
  Candidates c;
  c.labels = {"a", "b", "c"};
  c.vectors = Matrix(3, 2);
  c.vectors.data = {1, 0, 2, 0, 0, 1};
  const auto r = classify(std::vector<double>{1, 0}, c, 3);
  EXPECT_EQ(r[0].index, 0u);
  EXPECT_EQ(r[1].index, 1u);
  EXPECT_EQ(r[2].index, 2u);
}

TEST(Classify, RejectsZeroNormAndBadK) {
  CounterRng rng(4);
  const auto c = random_candidates(3, 4, rng);
  EXPECT_THROW(classify(std::vector<double>(4, 0.0), c, 1), NumericError);
  EXPECT_THROW(classify(random_vector(4, rng), c, 0), UsageError);
  EXPECT_THROW(classify(random_vector(4, rng), c, 4), UsageError);
}

TEST(Score, AlignedEmbeddingsScorePerfectly) {
  CounterRng rng(5);
  const auto c = random_candidates(6, 12, rng);
  Matrix e(12, 12);
  std::vector<std::string> truth;
  for (std::size_t r = 0; r < 12; ++r) {
    const auto v = c.vectors.row(r % 6);
    std::copy(v.begin(), v.end(), e.data.begin() + r * 12);
    truth.push_back(c.labels[r % 6]);
  }
  const auto rep = score_embeddings(Task::finegrained, e, truth, c, 5, true);
  ASSERT_EQ(rep.rows.size(), 6u);
  for (const auto& row : rep.rows) {
    EXPECT_EQ(row.support, 2u);
    EXPECT_EQ(row.top1, 1.0);
    EXPECT_EQ(row.topk, 1.0);
  }
  EXPECT_EQ(rep.overall.support, 12u);
  EXPECT_EQ(rep.overall.top1, 1.0);
}

TEST(Score, ThirdRankedCountsForTopFiveOnly) {
  Candidates c;
  c.vectors = Matrix(98, 2);
  for (std::size_t i = 0; i < 98; ++i) {
    c.labels.push_back("L" + std::to_string(i));
    const double a = 0.01 * double(i);
    c.vectors(i, 0) = std::cos(a);
    c.vectors(i, 1) = std::sin(a);
  }
  Matrix e(1, 2);
  e.data = {1.0, 0.0};
  const std::vector<std::string> truth = {"L2"};
  const auto rep = score_embeddings(Task::finegrained, e, truth, c, 5, true);
  EXPECT_EQ(rep.overall.top1, 0.0);
  EXPECT_EQ(rep.overall.topk, 1.0);
}

TEST(Score, RandomEmbeddingsMatchBinomialNull) {
  CounterRng rng(6);
  const std::size_t n = 5000;
  const auto c = random_candidates(5, 32, rng);
  Matrix e(n, 32);
  for (auto& x : e.data) x = rng.normal();
  std::vector<std::string> truth;
  for (std::size_t i = 0; i < n; ++i) truth.push_back(c.labels[rng.below(5)]);
  const auto rep = score_embeddings(Task::superclass, e, truth, c, 1, false);
  const double sigma = std::sqrt(0.2 * 0.8 / double(n));
  EXPECT_NEAR(rep.overall.top1, 0.2, 3 * sigma);
  EXPECT_FALSE(rep.overall.topk);
}

TEST(Score, ReportInvariantsHold) {
  CounterRng rng(7);
  const auto c = random_candidates(9, 8, rng);
  Matrix e(300, 8);
  for (auto& x : e.data) x = rng.normal();
  std::vector<std::string> truth;
  for (std::size_t i = 0; i < 300; ++i) truth.push_back(c.labels[rng.below(7)]);
  const auto rep = score_embeddings(Task::finegrained, e, truth, c, 5, true);
  std::size_t support = 0;
  for (const auto& row : rep.rows) {
    support += row.support;
    EXPECT_LE(row.top1, *row.topk);
    EXPECT_GE(row.top1, 0.0);
    EXPECT_LE(*row.topk, 1.0);
  }
  EXPECT_EQ(rep.rows.size(), 7u);
  EXPECT_EQ(support, rep.overall.support);
  EXPECT_LE(rep.overall.top1, *rep.overall.topk);
}

TEST(Score, RejectsUnknownTruthAndEmptySet) {
  CounterRng rng(8);
  const auto c = random_candidates(3, 4, rng);
  Matrix e(1, 4, 1.0);
  const std::vector<std::string> bad = {"zzz"};
  EXPECT_THROW(score_embeddings(Task::finegrained, e, bad, c, 1, true), DataError);
  EXPECT_THROW(score_embeddings(Task::finegrained, Matrix(0, 4), {}, c, 1, true), DataError);
}

TEST(Report, FormatsPercentagesAndSentinel) {
  EvalReport rep;
  rep.task = Task::finegrained;
  rep.k = 5;
  rep.rows.push_back({"Normal", 10, 0.784, 0.9});
  rep.overall = {"all", 10, 0.784, 0.9};
  EXPECT_EQ(render_report(rep),
            "label\tsupport\ttop1\ttop5\n"
            "Normal\t10\t78.40%\t90.00%\n"
            "all\t10\t78.40%\t90.00%\n");
  EXPECT_EQ(render_report(rep), render_report(rep));

  EvalReport sup;
  sup.task = Task::superclass;
  sup.overall = {"all", 0, 0.0, std::nullopt};
  EXPECT_EQ(render_report(sup), "label\tsupport\ttop1\ttop5\nall\t0\t0.00%\t-\n");
}

TEST(Report, WritesFile) {
  EvalReport rep;
  rep.overall = {"all", 3, 1.0, 1.0};
  const auto path = std::filesystem::temp_directory_path() / "ecgclip_report_test.tsv";
  write_report(rep, path);
  std::ifstream in(path);
  std::stringstream ss;
  ss << in.rdbuf();
  EXPECT_EQ(ss.str(), render_report(rep));
  std::filesystem::remove(path);
  EXPECT_THROW(write_report(rep, "/nonexistent/dir/report.tsv"), DataError);
}

TEST(EvalTask, ExcludesUnmappedRecords) {
  const auto cfg = tiny_config();
  auto model = Model<float>::initialize(cfg, 11);
  const auto mapping = parse_mapping(
      "fine_label\tsuperclass\trhythm\tmitbih\n"
      "Normal\tNormal ECG\t\tNormal Beat\n"
      "Tachycardia\t\t\t\n"
      "LVH\tHypertrophy\t\t\n");
  EcgDataset ds;
  ds.label_table = LabelTable({"Normal", "Tachycardia", "LVH"});
  CounterRng rng(12);
  const std::size_t per = cfg.encoder.in_leads * cfg.encoder.input_length;
  for (std::uint16_t i = 0; i < 9; ++i) {
    EcgRecord r;
    r.patient_id = i;
    r.label_index = i % 3;
    r.sample_count = cfg.encoder.input_length;
    r.samples.resize(per);
    for (auto& x : r.samples) x = static_cast<float>(rng.normal());
    ds.records.push_back(std::move(r));
  }
  std::vector<std::string> bank_labels = ds.label_table.labels();
  for (const auto& v : superset_vocabulary(Task::superclass)) bank_labels.push_back(v);
  for (const auto& v : superset_vocabulary(Task::mitbih)) bank_labels.push_back(v);
  const auto bank = build_bank(bank_labels, cfg.text_dim, 3);

  const auto fine = eval_task(model, ds, bank, mapping, Task::finegrained, 5);
  EXPECT_EQ(fine.overall.support, 9u);
  EXPECT_EQ(fine.k, 3u);
  EXPECT_EQ(*fine.overall.topk, 1.0);

  const auto sc = eval_task(model, ds, bank, mapping, Task::superclass);
  EXPECT_EQ(sc.overall.support, 6u);
  EXPECT_FALSE(sc.overall.topk);
  for (const auto& row : sc.rows) EXPECT_EQ(row.support, 3u);

  const auto mb = eval_task(model, ds, bank, mapping, Task::mitbih);
  EXPECT_EQ(mb.overall.support, 3u);

  EXPECT_THROW(eval_task(model, ds, bank, mapping, Task::rhythm), DataError);
}

TEST(EvalTask, MissingSupersetPromptIsNamed) {
  const auto cfg = tiny_config();
  auto model = Model<float>::initialize(cfg, 11);
  const auto mapping = parse_mapping("fine_label\tsuperclass\trhythm\tmitbih\nNormal\tNormal ECG\t\t\n");
  EcgDataset ds;
  ds.label_table = LabelTable({"Normal"});
  EcgRecord r;
  r.sample_count = cfg.encoder.input_length;
  r.samples.assign(cfg.encoder.in_leads * cfg.encoder.input_length, 0.5f);
  ds.records.push_back(r);
  const std::vector<std::string> labels = {"Normal"};
  const auto bank = build_bank(labels, cfg.text_dim, 3);
  try {
    eval_task(model, ds, bank, mapping, Task::superclass);
    FAIL() << "expected a missing-label error";
  } catch (const DataError& e) {
    EXPECT_NE(std::string(e.what()).find("Normal ECG"), std::string::npos);
  }
}
