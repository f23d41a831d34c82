// One PASS/FAIL line per acceptance criterion; exits nonzero if any fails.

#include <algorithm>
#include <chrono>
#include <cmath>
#include <cstdio>
#include <filesystem>
#include <functional>
#include <numeric>
#include <string>
#include <vector>

#include "ecgclip/binary_io.hpp"
#include "ecgclip/contrastive.hpp"
#include "ecgclip/data_model.hpp"
#include "ecgclip/gradcheck.hpp"
#include "ecgclip/random.hpp"
#include "ecgclip/synth.hpp"
#include "ecgclip/text_bank.hpp"
#include "ecgclip/trainer.hpp"
#include "ecgclip/zeroshot.hpp"

using namespace ecgclip;
namespace fs = std::filesystem;

namespace {

struct Outcome {
  bool pass = true;
  std::string detail;

  void require(bool ok, const std::string& what) {
    if (!ok && pass) detail = what;
    pass = pass && ok;
  }
};

using Clock = std::chrono::steady_clock;

double seconds_since(Clock::time_point t0) { return std::chrono::duration<double>(Clock::now() - t0).count(); }

std::string fmt(const char* f, double a, double b = 0.0, double c = 0.0) {
  char buf[256];
  std::snprintf(buf, sizeof buf, f, a, b, c);
  return buf;
}

fs::path scratch(const std::string& name) {
  auto dir = fs::temp_directory_path() / ("ecgclip_acceptance_" + name);
  fs::remove_all(dir);
  fs::create_directories(dir);
  return dir;
}

Matrix random_matrix(std::size_t r, std::size_t c, CounterRng& rng) {
  Matrix m(r, c);
  for (auto& x : m.data) x = rng.normal();
  return m;
}

/// Synthetic records decimated to 500 samples for the short training runs.
EcgDataset small_dataset(std::size_t per_class, std::size_t patients, std::uint64_t seed, std::uint32_t first_patient) {
  auto suite = default_suite();
  suite.resize(4);
  auto d = gen_dataset(suite, per_class, patients, seed, first_patient);
  for (auto& r : d.records) {
    std::vector<float> s;
    for (std::size_t l = 0; l < kLeadCount; ++l) {
      const auto lead = r.lead(l);
      for (std::size_t i = 0; i < lead.size(); i += 10) s.push_back(lead[i]);
    }
    r.sample_count = kSampleCount / 10;
    r.samples = std::move(s);
  }
  return d;
}

TrainConfig small_config(std::size_t epochs) {
  TrainConfig c;
  c.width_factor = 1.0 / 16;
  c.batch_size = 8;
  c.epochs = epochs;
  c.projection_dim = 16;
  c.seed = 5;
  return c;
}

Outcome gradient_correctness() {
  const auto report = grad_check(default_grad_check_config(0));
  Outcome o;
  for (const auto& g : report.groups) o.require(g.passed(), g.name + fmt(" rel %.3e", g.max_rel));
  o.require(report.seconds < 300.0, fmt("took %.1f s", report.seconds));
  if (o.pass) {
    o.detail = fmt("max rel %.3e over ", report.max_rel) + std::to_string(report.groups.size()) +
               fmt(" groups, %.1f s", report.seconds);
  }
  return o;
}

Outcome loss_algebra() {
  Outcome o;
  for (std::size_t n : {2u, 8u, 32u}) {
    const double l = total_loss(Matrix(n, n, 0.42), kInitialTau);
    o.require(std::abs(l - std::log(double(n))) <= 1e-6, fmt("N=%g all-equal loss %.9f", double(n), l));
  }
  o.require(std::abs(total_loss(Matrix(32, 32, -0.3), 1.0) - 3.4657) <= 1e-4, "ln 32");
  const Matrix one(1, 1, 0.8);
  o.require(loss_e2t(one, kInitialTau)[0] == 0.0 && loss_t2e(one, kInitialTau)[0] == 0.0, "N=1 not zero");
  Matrix id(2, 2);
  id.data = {1, 0, 0, 1};
  const double l2 = total_loss(id, 0.07);
  o.require(std::abs(l2 - 6.25e-7) <= 5e-8, fmt("2x2 identity loss %.4e", l2));
  if (o.pass) o.detail = fmt("2x2 identity loss %.4e", l2);
  return o;
}

Outcome invariance_suite() {
  Outcome o;
  CounterRng rng(derive_key(0xacce55, 1));
  double perm_drift = 0.0, scale_drift = 0.0;
  for (int trial = 0; trial < 1000; ++trial) {
    const std::size_t n = 2 + rng.below(31), dim = 2 + rng.below(30);
    auto t = random_matrix(n, dim, rng), e = random_matrix(n, dim, rng);
    const double tau = std::exp(rng.uniform(std::log(0.01), std::log(10.0)));
    const auto s = similarity_matrix(t, e);
    std::vector<std::size_t> p(n);
    std::iota(p.begin(), p.end(), 0);
    shuffle(p, rng);
    Matrix tp(n, dim), ep(n, dim);
    for (std::size_t i = 0; i < n; ++i) {
      std::copy_n(t.row(p[i]).begin(), dim, tp.row(i).begin());
      std::copy_n(e.row(p[i]).begin(), dim, ep.row(i).begin());
    }
    perm_drift = std::max(perm_drift, std::abs(total_loss(similarity_matrix(tp, ep), tau) - total_loss(s, tau)));

    for (std::size_t i = 0; i < n; ++i) {
      const double a = std::exp(rng.uniform(-8.0, 8.0)), b = std::exp(rng.uniform(-8.0, 8.0));
      for (auto& x : t.row(i)) x *= a;
      for (auto& x : e.row(i)) x *= b;
    }
    const auto scaled = similarity_matrix(t, e);
    for (std::size_t k = 0; k < s.data.size(); ++k) scale_drift = std::max(scale_drift, std::abs(scaled.data[k] - s.data[k]));

    Candidates c;
    const std::size_t m = 1 + rng.below(40);
    c.vectors = random_matrix(m, dim, rng);
    for (std::size_t i = 0; i < m; ++i) c.labels.push_back("c" + std::to_string(i));
    std::vector<double> v(dim);
    for (auto& x : v) x = rng.normal();
    std::vector<std::pair<double, std::size_t>> brute;
    for (std::size_t i = 0; i < m; ++i) {
      double ab = 0, aa = 0, bb = 0;
      for (std::size_t k = 0; k < dim; ++k) {
        ab += c.vectors(i, k) * v[k];
        aa += c.vectors(i, k) * c.vectors(i, k);
        bb += v[k] * v[k];
      }
      brute.push_back({ab / std::sqrt(aa * bb), i});
    }
    std::stable_sort(brute.begin(), brute.end(), [](const auto& a, const auto& b) { return a.first > b.first; });
    const auto ranked = classify(v, c, m);
    for (std::size_t i = 0; i < m; ++i) {
      o.require(ranked[i].index == brute[i].second, "classify differs from brute force in trial " + std::to_string(trial));
    }

    Matrix emb = random_matrix(8, dim, rng);
    std::vector<std::string> truth;
    for (std::size_t i = 0; i < 8; ++i) truth.push_back(c.labels[rng.below(m)]);
    double prev = 0.0;
    for (std::size_t k = 1; k <= m; ++k) {
      const double acc = *score_embeddings(Task::finegrained, emb, truth, c, k, true).overall.topk;
      o.require(acc >= prev, "top-k accuracy decreased at k=" + std::to_string(k));
      prev = acc;
    }
    o.require(prev == 1.0, "top-m accuracy below 1");
  }
  o.require(perm_drift <= 1e-9, fmt("permutation drift %.3e", perm_drift));
  o.require(scale_drift <= 1e-6, fmt("scale drift %.3e", scale_drift));
  if (o.pass) o.detail = fmt("1000 instances, permutation drift %.2e, scale drift %.2e", perm_drift, scale_drift);
  return o;
}

Outcome frozen_text() {
  const auto dir = scratch("frozen");
  const auto d = small_dataset(5, 3, 21, 0);
  save_table(build_bank(d.label_table.labels(), 32, 9), dir / "bank.etb");
  const auto before = fnv1a64(read_file(dir / "bank.etb"));
  const auto bank = load_table(dir / "bank.etb");
  TrainOptions opt;
  opt.config = small_config(5);
  opt.out_dir = dir / "run";
  const auto r = train(d, nullptr, bank, opt);
  const auto after = fnv1a64(read_file(dir / "bank.etb"));
  Outcome o;
  o.require(r.state.epoch == 5, "run did not complete 5 epochs");
  o.require(before == after, "bank file changed");
  o.require(load_table(dir / "bank.etb") == bank, "bank contents changed");
  o.require(r.state.bank_hash == table_hash(bank), "checkpoint bank hash differs");
  fs::remove_all(dir);
  if (o.pass) o.detail = "file hash unchanged across 5 epochs";
  return o;
}

Outcome learnability() {
  Outcome o;
  const auto t0 = Clock::now();
  std::string history;
  for (std::uint64_t seed = 0; seed < 3; ++seed) {
    const auto suite = default_suite();
    const auto train_set = gen_dataset(suite, 250, 25, derive_key(seed, 1), 0);
    const auto test_set = gen_dataset(suite, 50, 5, derive_key(seed, 2), 100000);
    const auto bank = build_bank(train_set.label_table.labels(), 256, seed);
    TrainOptions opt;
    opt.config.width_factor = 0.25;
    opt.config.batch_size = 32;
    opt.config.learning_rate = 1e-3;
    opt.config.epochs = 20;
    opt.config.seed = seed;
    double best = 0.0;
    std::size_t at = 0;
    opt.on_epoch = [&](const EpochMetrics& m, const TrainState&) {
      std::printf("  learnability seed %llu epoch %zu loss %.4f top1 %.4f (%.1f s)\n",
                  static_cast<unsigned long long>(seed), m.epoch, m.loss, *m.val_top1, m.seconds);
      std::fflush(stdout);
      if (*m.val_top1 > best) {
        best = *m.val_top1;
        at = m.epoch;
      }
      return *m.val_top1 < 0.9;
    };
    train(train_set, &test_set, bank, opt);
    history += fmt("seed %g: top1 %.4f at epoch %g; ", double(seed), best, double(at));
    if (best >= 0.9) {
      const double total = seconds_since(t0);
      o.require(total <= 900.0, fmt("took %.1f s", total));
      o.detail = history + fmt("%.1f s total", total);
      return o;
    }
  }
  o.require(false, history);
  return o;
}

Outcome zero_shot_fidelity() {
  Outcome o;
  const auto m = load_mapping(fs::path(ECGCLIP_DATA_DIR) / "zero_shot_mapping.tsv");
  o.require(m.size() == 98, "mapping has " + std::to_string(m.size()) + " rows");
  o.require(superset_vocabulary(Task::superclass).size() == 5, "superclass vocabulary size");
  o.require(m.used_vocabulary(Task::superclass) == superset_vocabulary(Task::superclass), "superclass vocabulary");
  const auto* normal = m.find("Normal");
  o.require(normal && normal->superclass == "Normal ECG" && normal->mitbih == "Normal Beat", "Normal mapping");
  const auto* crbbb = m.find("Complete Right Bundle Branch Block");
  o.require(crbbb && crbbb->superclass == "Conduction Disturbance" &&
                crbbb->mitbih == "Right bundle branch block beat",
            "CRBBB mapping");
  const auto* tachy = m.find("Tachycardia");
  o.require(tachy && !tachy->superclass && !tachy->rhythm && !tachy->mitbih, "Tachycardia mapping");

  const auto& vocab = superset_vocabulary(Task::superclass);
  const auto bank = build_bank(vocab, 256, 3);
  Candidates c;
  c.labels = vocab;
  c.vectors = Matrix(vocab.size(), bank.dim());
  for (std::size_t i = 0; i < vocab.size(); ++i) {
    const auto v = bank.lookup(vocab[i]);
    std::copy(v.begin(), v.end(), c.vectors.row(i).begin());
  }
  CounterRng rng(derive_key(0xacce55, 2));
  const std::size_t n = 5000;
  const auto e = random_matrix(n, bank.dim(), rng);
  std::vector<std::string> truth;
  for (std::size_t i = 0; i < n; ++i) truth.push_back(vocab[rng.below(vocab.size())]);
  const double acc = score_embeddings(Task::superclass, e, truth, c, 1, false).overall.top1;
  const double sigma = std::sqrt(0.2 * 0.8 / double(n));
  o.require(std::abs(acc - 0.2) <= 3 * sigma, fmt("random top1 %.4f outside 0.2 +- %.4f", acc, 3 * sigma));
  if (o.pass) o.detail = fmt("98 rows, random superclass top1 %.4f (0.2 +- %.4f)", acc, 3 * sigma);
  return o;
}

std::string random_label(CounterRng& rng) {
  static const std::vector<std::string> pieces = {"a", "Z", " ", "ä", "心", "-", "9", "/"};
  std::string s;
  const std::size_t n = 1 + rng.below(16);
  for (std::size_t i = 0; i < n; ++i) s += pieces[rng.below(pieces.size())];
  return s;
}

std::vector<std::string> unique_labels(std::size_t n, CounterRng& rng) {
  std::vector<std::string> out;
  while (out.size() < n) {
    auto l = random_label(rng);
    if (std::find(out.begin(), out.end(), l) == out.end()) out.push_back(l);
  }
  return out;
}

Outcome format_round_trips() {
  Outcome o;
  const auto dir = scratch("formats");
  CounterRng rng(derive_key(0xacce55, 3));
  for (int trial = 0; trial < 100; ++trial) {
    EcgDataset d;
    d.sampling_rate_hz = static_cast<float>(rng.uniform(50.0, 1000.0));
    const std::size_t labels = 1 + rng.below(5);
    d.label_table = LabelTable(unique_labels(labels, rng));
    for (std::size_t i = rng.below(3); i > 0; --i) {
      EcgRecord r;
      r.patient_id = static_cast<std::uint32_t>(rng.next_u64());
      r.label_index = static_cast<std::uint16_t>(rng.below(labels));
      r.samples.resize(kLeadCount * kSampleCount);
      for (auto& x : r.samples) x = static_cast<float>(rng.normal());
      d.records.push_back(std::move(r));
    }
    save_dataset(d, dir / "d.eds");
    const auto bytes = read_file(dir / "d.eds");
    const auto back = load_dataset(dir / "d.eds");
    o.require(back == d && encode_dataset(back) == bytes, "EDS1 trial " + std::to_string(trial));

    const std::size_t dim = 1 + rng.below(64);
    std::vector<EmbeddingEntry> entries;
    for (auto& l : unique_labels(1 + rng.below(20), rng)) {
      std::vector<float> v(dim);
      for (auto& x : v) x = static_cast<float>(rng.normal());
      entries.push_back({l, v});
    }
    const EmbeddingTable t(dim, entries);
    save_table(t, dir / "t.etb");
    const auto tbytes = read_file(dir / "t.etb");
    const auto tback = load_table(dir / "t.etb");
    o.require(tback == t && encode_table(tback) == tbytes, "ETB1 trial " + std::to_string(trial));

    TrainConfig c;
    c.width_factor = 1.0 / double(16 + rng.below(48));
    c.projection_dim = 1 + rng.below(8);
    c.seed = rng.next_u64();
    c.learning_rate = rng.uniform(1e-5, 1e-1);
    c.freeze_tau = rng.below(2) == 1;
    auto s = init_state(c, 1 + rng.below(10), 16 + rng.below(200), rng.next_u64());
    s.epoch = rng.below(1000);
    s.optimizer.step = rng.below(100000);
    for (auto& m : s.optimizer.m)
      for (auto& x : m) x = static_cast<float>(rng.normal());
    for (auto& v : s.optimizer.v)
      for (auto& x : v) x = static_cast<float>(rng.uniform());
    save_checkpoint(s, dir / "s.ckp");
    const auto cbytes = read_file(dir / "s.ckp");
    const auto cback = load_checkpoint(dir / "s.ckp");
    o.require(cback == s && encode_checkpoint(cback) == cbytes, "CKP1 trial " + std::to_string(trial));
  }
  fs::remove_all(dir);
  if (o.pass) o.detail = "100 randomized cases each for EDS1, ETB1, CKP1";
  return o;
}

Outcome resume_determinism() {
  const auto dir = scratch("resume");
  const auto d = small_dataset(6, 3, 31, 0);
  const auto bank = build_bank(d.label_table.labels(), 32, 9);
  TrainOptions full;
  full.config = small_config(4);
  const auto straight = train(d, nullptr, bank, full);

  TrainOptions first = full;
  first.config.epochs = 2;
  first.out_dir = dir;
  train(d, nullptr, bank, first);
  TrainOptions rest = full;
  rest.resume = load_checkpoint(dir / "final.ckp");
  const auto resumed = train(d, nullptr, bank, rest);

  Outcome o;
  double drift = 0.0;
  o.require(resumed.log.size() == 2, "resumed run logged " + std::to_string(resumed.log.size()) + " epochs");
  for (std::size_t i = 0; i < resumed.log.size() && i + 2 < straight.log.size(); ++i) {
    drift = std::max(drift, std::abs(resumed.log[i].loss - straight.log[i + 2].loss));
  }
  o.require(drift <= 1e-9, fmt("epoch loss drift %.3e", drift));
  o.require(resumed.state == straight.state, "final states differ");
  fs::remove_all(dir);
  if (o.pass) o.detail = fmt("epoch loss drift %.1e, final state identical", drift);
  return o;
}

}  // namespace

int main() {
  const std::vector<std::pair<std::string, std::function<Outcome()>>> criteria = {
      {"gradient_correctness", gradient_correctness},
      {"loss_algebra", loss_algebra},
      {"invariance_suite", invariance_suite},
      {"frozen_text_contract", frozen_text},
      {"synthetic_learnability", learnability},
      {"zero_shot_protocol_fidelity", zero_shot_fidelity},
      {"format_round_trips", format_round_trips},
      {"resume_determinism", resume_determinism},
  };
  int failures = 0;
  for (const auto& [name, check] : criteria) {
    const auto t0 = Clock::now();
    Outcome o;
    try {
      o = check();
    } catch (const std::exception& e) {
      o.pass = false;
      o.detail = std::string("exception: ") + e.what();
    }
    std::printf("%s %s (%.1f s) %s\n", o.pass ? "PASS" : "FAIL", name.c_str(), seconds_since(t0), o.detail.c_str());
    std::fflush(stdout);
    failures += o.pass ? 0 : 1;
  }
  return failures == 0 ? 0 : 1;
}
