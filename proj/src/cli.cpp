#include "ecgclip/cli.hpp"

#include <algorithm>
#include <filesystem>
#include <fstream>
#include <set>
#include <sstream>

#include "CLI11.hpp"
#include "ecgclip/binary_io.hpp"
#include "ecgclip/data_model.hpp"
#include "ecgclip/errors.hpp"
#include "ecgclip/gradcheck.hpp"
#include "ecgclip/kernels.hpp"
#include "ecgclip/synth.hpp"
#include "ecgclip/text_bank.hpp"
#include "ecgclip/trainer.hpp"
#include "ecgclip/zeroshot.hpp"
#include "json.hpp"

namespace ecgclip {

namespace {

using Json = nlohmann::ordered_json;
namespace fs = std::filesystem;

struct GenSynthArgs {
  std::string out;
  std::size_t classes = 8;
  std::size_t per_class = 250;
  std::size_t patients_per_class = 25;
  std::uint64_t seed = 0;
  std::uint32_t first_patient = 0;
};

struct MakeBankArgs {
  std::string labels_from;
  std::string import_path;
  std::string supersets;
  std::size_t dim = 256;
  std::uint64_t seed = 0;
  std::string out;
};

struct TrainArgs {
  std::string data;
  std::string bank;
  std::string out_dir;
  std::string val_data;
  double val_fraction = 0.0;
  std::string resume;
  double target_top1 = 0.0;
  TrainConfig config;
};

struct EvalArgs {
  std::string checkpoint;
  std::string data;
  std::string bank;
  std::string mapping;
  std::string task = "finegrained";
  std::size_t topk = 5;
  std::string out;
};

struct GradCheckArgs {
  std::uint64_t seed = 0;
  std::size_t samples = 64;
};

struct InspectArgs {
  std::string file;
};

void print_config(std::ostream& out, const std::string& command, Json fields) {
  Json j;
  j["command"] = command;
  j["isa"] = std::string(kernels::isa_name(kernels::active_isa()));
  for (auto& [k, v] : fields.items()) j[k] = v;
  out << j.dump() << '\n';
}

Json train_config_json(const TrainConfig& c) {
  Json j;
  j["epochs"] = c.epochs;
  j["batch"] = c.batch_size;
  j["lr"] = c.learning_rate;
  j["weight_decay"] = c.weight_decay;
  j["seed"] = c.seed;
  j["width_factor"] = c.width_factor;
  j["freeze_tau"] = c.freeze_tau;
  j["tau0"] = c.initial_tau;
  j["projection_dim"] = c.projection_dim;
  j["eval_every"] = c.eval_every;
  j["checkpoint_every"] = c.checkpoint_every;
  j["beta1"] = c.beta1;
  j["beta2"] = c.beta2;
  j["adam_epsilon"] = c.adam_epsilon;
  return j;
}

std::string magic_of(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw DataError("cannot open " + path);
  char buf[4] = {};
  in.read(buf, 4);
  return std::string(buf, static_cast<std::size_t>(in.gcount()));
}

std::vector<std::string> read_label_list(const std::string& path) {
  if (magic_of(path) == "EDS1") return load_dataset(path).label_table.labels();
  std::ifstream in(path);
  if (!in) throw DataError("cannot open label list " + path);
  std::vector<std::string> labels;
  std::string line;
  while (std::getline(in, line)) {
    if (!line.empty() && line.back() == '\r') line.pop_back();
    if (!line.empty()) labels.push_back(line);
  }
  if (labels.empty()) throw DataError("label list " + path + " is empty");
  return labels;
}

int cmd_gen_synth(const GenSynthArgs& a, std::ostream& out) {
  print_config(out, "gen-synth", {{"out", a.out}, {"classes", a.classes}, {"per_class", a.per_class},
                                  {"patients_per_class", a.patients_per_class}, {"seed", a.seed},
                                  {"first_patient", a.first_patient}});
  auto suite = default_suite();
  if (a.classes == 0 || a.classes > suite.size()) {
    throw UsageError("--classes must lie in [1, " + std::to_string(suite.size()) + "]");
  }
  suite.resize(a.classes);
  const auto d = gen_dataset(suite, a.per_class, a.patients_per_class, a.seed, a.first_patient);
  save_dataset(d, a.out);
  out << "wrote " << d.records.size() << " records, " << d.label_table.size() << " labels to " << a.out << '\n';
  return 0;
}

Json read_sidecar(const std::string& table_path, std::size_t dim) {
  const std::string path = sidecar_path(table_path);
  if (!fs::exists(path)) return nullptr;
  std::ifstream in(path);
  Json meta;
  try {
    meta = Json::parse(in);
  } catch (const Json::parse_error& e) {
    throw DataError("metadata file " + path + " is not valid JSON: " + e.what());
  }
  if (!meta.is_object()) throw DataError("metadata file " + path + " must hold a JSON object");
  if (meta.contains("dim") && (!meta["dim"].is_number_unsigned() || meta["dim"].get<std::size_t>() != dim)) {
    throw DataError("metadata dim in " + path + " does not match the table dimension " + std::to_string(dim));
  }
  if (meta.contains("pooling")) {
    const auto p = meta["pooling"].is_string() ? meta["pooling"].get<std::string>() : std::string();
    if (p != "last_token" && p != "mean") throw DataError("metadata pooling must be last_token or mean");
  }
  if (meta.contains("template")) {
    if (!meta["template"].is_string()) throw DataError("metadata template must be a string");
    try {
      PromptTemplate(meta["template"].get<std::string>());
    } catch (const UsageError& e) {
      throw DataError(std::string("metadata template is invalid: ") + e.what());
    }
  }
  return meta;
}

int cmd_make_bank(const MakeBankArgs& a, std::ostream& out) {
  Json cfg{{"out", a.out}, {"dim", a.dim}, {"seed", a.seed}};
  if (!a.labels_from.empty()) cfg["labels_from"] = a.labels_from;
  if (!a.import_path.empty()) cfg["import"] = a.import_path;
  if (!a.supersets.empty()) cfg["with_supersets"] = a.supersets;

  if (!a.import_path.empty()) {
    if (!a.supersets.empty()) throw UsageError("--with-supersets applies to synthetic banks only");
    const auto table = load_table(a.import_path);
    const Json meta = read_sidecar(a.import_path, table.dim());
    cfg["dim"] = table.dim();
    cfg["metadata"] = meta;
    print_config(out, "make-bank", cfg);
    if (!a.labels_from.empty()) {
      for (const auto& l : read_label_list(a.labels_from)) table.lookup(l);
    }
    save_table(table, a.out);
    if (!meta.is_null()) {
      std::ofstream side(sidecar_path(a.out));
      side << meta.dump(2) << '\n';
      if (!side) throw DataError("cannot write " + sidecar_path(a.out));
    }
    out << "imported " << table.size() << " entries of dim " << table.dim() << " to " << a.out << '\n';
    return 0;
  }

  print_config(out, "make-bank", cfg);
  if (a.labels_from.empty()) throw UsageError("make-bank needs --labels-from or --import");
  auto labels = read_label_list(a.labels_from);
  if (!a.supersets.empty()) {
    load_mapping(a.supersets);  // rejects a malformed file before anything is written
    for (Task t : {Task::superclass, Task::rhythm, Task::mitbih}) {
      for (const auto& v : superset_vocabulary(t)) {
        if (std::find(labels.begin(), labels.end(), v) == labels.end()) labels.push_back(v);
      }
    }
  }
  const auto table = build_bank(labels, a.dim, a.seed);
  save_table(table, a.out);
  out << "wrote " << table.size() << " entries of dim " << table.dim() << " to " << a.out << '\n';
  return 0;
}

int cmd_train(TrainArgs a, std::ostream& out) {
  Json cfg = train_config_json(a.config);
  cfg["data"] = a.data;
  cfg["bank"] = a.bank;
  cfg["out_dir"] = a.out_dir;
  cfg["val_data"] = a.val_data.empty() ? Json(nullptr) : Json(a.val_data);
  cfg["val_fraction"] = a.val_fraction;
  cfg["resume"] = a.resume.empty() ? Json(nullptr) : Json(a.resume);
  cfg["target_top1"] = a.target_top1;
  if (!a.val_data.empty() && a.val_fraction > 0.0) throw UsageError("use either --val-data or --val-fraction");
  a.config.validate();

  TrainOptions o;
  if (!a.resume.empty()) {
    o.resume = load_checkpoint(a.resume);
    // Hyperparameters come from the checkpoint; only the schedule is taken from the flags.
    const auto& c = o.resume->config;
    for (const char* k : {"batch", "lr", "weight_decay", "seed", "width_factor", "freeze_tau", "tau0",
                          "projection_dim", "beta1", "beta2", "adam_epsilon"}) {
      cfg[k] = train_config_json(c)[k];
    }
  }
  print_config(out, "train", cfg);

  EcgDataset data = load_dataset(a.data);
  const auto bank = load_table(a.bank);
  EcgDataset val;
  const EcgDataset* val_ptr = nullptr;
  if (!a.val_data.empty()) {
    val = load_dataset(a.val_data);
    val_ptr = &val;
  } else if (a.val_fraction > 0.0) {
    if (a.val_fraction >= 1.0) throw UsageError("--val-fraction must lie in (0, 1)");
    auto split = split_by_patient(data, {{1.0 - a.val_fraction, a.val_fraction, 0.0}, a.config.seed});
    data = std::move(split.train);
    val = std::move(split.val);
    val_ptr = &val;
  }
  for (const EcgDataset* d : {static_cast<const EcgDataset*>(&data), val_ptr}) {
    if (!d) continue;
    if (const auto v = validate_dataset(*d); !v.empty()) {
      throw DataError("invalid dataset: record " + std::to_string(v.front().record_index) + ": " + v.front().reason);
    }
  }

  o.config = a.config;
  o.out_dir = a.out_dir;
  o.on_epoch = [&](const EpochMetrics& m, const TrainState&) {
    out << metrics_json(m) << '\n' << std::flush;
    return !(a.target_top1 > 0.0 && m.val_top1 && *m.val_top1 >= a.target_top1);
  };
  const auto r = train(data, val_ptr, bank, o);
  out << "finished at epoch " << r.state.epoch << (r.stopped_early ? " (target reached)" : "") << "; checkpoint "
      << (fs::path(a.out_dir) / "final.ckp").string() << '\n';
  return 0;
}

int cmd_eval(const EvalArgs& a, std::ostream& out) {
  print_config(out, "eval", {{"checkpoint", a.checkpoint}, {"data", a.data}, {"bank", a.bank},
                             {"mapping", a.mapping.empty() ? Json(nullptr) : Json(a.mapping)}, {"task", a.task},
                             {"topk", a.topk}, {"out", a.out.empty() ? Json(nullptr) : Json(a.out)}});
  const Task task = parse_task(a.task);
  if (a.topk == 0) throw UsageError("--topk must be positive");
  if (task != Task::finegrained && a.mapping.empty()) throw UsageError("superset tasks need --mapping");
  const MappingTable mapping = a.mapping.empty() ? MappingTable{} : load_mapping(a.mapping);
  auto state = load_checkpoint(a.checkpoint);
  const auto bank = load_table(a.bank);
  if (table_hash(bank) != state.bank_hash) {
    throw DataError("embedding table differs from the one the checkpoint was trained with");
  }
  const auto data = load_dataset(a.data);
  const auto report = eval_task(state.model, data, bank, mapping, task, a.topk);
  out << render_report(report);
  if (!a.out.empty()) write_report(report, a.out);
  return 0;
}

int cmd_grad_check(const GradCheckArgs& a, std::ostream& out) {
  auto cfg = default_grad_check_config(a.seed);
  cfg.samples_per_tensor = a.samples;
  print_config(out, "grad-check", {{"seed", a.seed}, {"width_factor", 0.125},
                                   {"input_length", cfg.model.encoder.input_length}, {"batch", cfg.batch},
                                   {"epsilon", cfg.epsilon}, {"samples_per_tensor", a.samples},
                                   {"tolerance", cfg.tolerance}, {"log_tau_tolerance", cfg.log_tau_tolerance}});
  const auto report = grad_check(cfg);
  for (const auto& g : report.groups) {
    char line[200];
    std::snprintf(line, sizeof line, "%-40s %6zu %.3e %s\n", g.name.c_str(), g.checked, g.max_rel,
                  g.passed() ? "ok" : "FAIL");
    out << line;
  }
  char tail[120];
  std::snprintf(tail, sizeof tail, "max relative error %.3e over %zu groups in %.1f s: %s\n", report.max_rel,
                report.groups.size(), report.seconds, report.passed() ? "PASS" : "FAIL");
  out << tail;
  return report.passed() ? 0 : 3;
}

int cmd_inspect(const InspectArgs& a, std::ostream& out) {
  const std::string magic = magic_of(a.file);
  Json j;
  j["file"] = a.file;
  j["format"] = magic;
  if (magic == "EDS1") {
    const auto d = load_dataset(a.file);
    std::set<std::uint32_t> patients;
    for (const auto& r : d.records) patients.insert(r.patient_id);
    j["version"] = 1;
    j["sampling_rate_hz"] = d.sampling_rate_hz;
    j["label_count"] = d.label_table.size();
    j["record_count"] = d.records.size();
    j["patient_count"] = patients.size();
    j["labels"] = d.label_table.labels();
  } else if (magic == "ETB1") {
    const auto t = load_table(a.file);
    j["version"] = 1;
    j["entry_count"] = t.size();
    j["dim"] = t.dim();
    j["hash"] = t.size() ? table_hash(t) : 0;
  } else if (magic == "CKP1") {
    const auto s = load_checkpoint(a.file);
    const auto& m = s.model.config();
    j["version"] = 1;
    j["epoch"] = s.epoch;
    j["optimizer_step"] = s.optimizer.step;
    j["seed"] = s.config.seed;
    j["bank_hash"] = s.bank_hash;
    j["tau"] = std::exp(double(s.model.log_tau()));
    j["input_length"] = m.encoder.input_length;
    j["stage_channels"] = m.encoder.stage_channels;
    j["text_dim"] = m.text_dim;
    j["projection_dim"] = m.projection_dim;
    j["parameter_count"] = s.model.parameter_count();
    j["train_config"] = train_config_json(s.config);
  } else {
    throw DataError("unrecognized file format (magic \"" + magic + "\") in " + a.file);
  }
  out << j.dump(2) << '\n';
  return 0;
}

}  // namespace

std::string sidecar_path(const std::string& table_path) { return table_path + ".json"; }

int run(const std::vector<std::string>& args, std::ostream& out, std::ostream& err) {
  CLI::App app{"ECG-text contrastive pretraining and zero-shot evaluation", "ecgclip"};
  app.require_subcommand(1, 1);

  GenSynthArgs gs;
  auto* gen = app.add_subcommand("gen-synth", "Write a synthetic EDS1 dataset");
  gen->add_option("--out", gs.out, "Output EDS1 path")->required();
  gen->add_option("--classes", gs.classes, "Number of classes from the default suite")->capture_default_str();
  gen->add_option("--per-class", gs.per_class, "Records per class")->capture_default_str();
  gen->add_option("--patients-per-class", gs.patients_per_class, "Distinct patients per class")->capture_default_str();
  gen->add_option("--seed", gs.seed, "Generator seed")->capture_default_str();
  gen->add_option("--first-patient", gs.first_patient, "First patient id")->capture_default_str();

  MakeBankArgs mb;
  auto* bank = app.add_subcommand("make-bank", "Build or import an ETB1 embedding table");
  bank->add_option("--labels-from", mb.labels_from, "EDS1 file or text file with one label per line");
  bank->add_option("--import", mb.import_path, "Existing ETB1 table to validate and copy");
  bank->add_option("--with-supersets", mb.supersets, "Mapping file; adds the superset vocabularies");
  bank->add_option("--dim", mb.dim, "Embedding dimension")->capture_default_str();
  bank->add_option("--seed", mb.seed, "Embedding seed")->capture_default_str();
  bank->add_option("--out", mb.out, "Output ETB1 path")->required();

  TrainArgs ta;
  auto* tr = app.add_subcommand("train", "Contrastive training");
  tr->add_option("--data", ta.data, "Training EDS1")->required();
  tr->add_option("--bank", ta.bank, "ETB1 embedding table")->required();
  tr->add_option("--out-dir", ta.out_dir, "Directory for metrics and checkpoints")->required();
  tr->add_option("--val-data", ta.val_data, "Validation EDS1");
  tr->add_option("--val-fraction", ta.val_fraction, "Patient fraction held out for validation");
  tr->add_option("--resume", ta.resume, "Checkpoint to continue from");
  tr->add_option("--epochs", ta.config.epochs)->capture_default_str();
  tr->add_option("--batch", ta.config.batch_size)->capture_default_str();
  tr->add_option("--lr", ta.config.learning_rate)->capture_default_str();
  tr->add_option("--weight-decay", ta.config.weight_decay)->capture_default_str();
  tr->add_option("--seed", ta.config.seed)->capture_default_str();
  tr->add_option("--width-factor", ta.config.width_factor)->capture_default_str();
  tr->add_flag("--freeze-tau", ta.config.freeze_tau, "Keep tau at its initial value");
  tr->add_option("--tau0", ta.config.initial_tau, "Initial temperature")->capture_default_str();
  tr->add_option("--projection-dim", ta.config.projection_dim)->capture_default_str();
  tr->add_option("--eval-every", ta.config.eval_every, "Epochs between validation passes")->capture_default_str();
  tr->add_option("--checkpoint-every", ta.config.checkpoint_every, "Epochs between checkpoints")->capture_default_str();
  tr->add_option("--target-top1", ta.target_top1, "Stop once validation top-1 reaches this fraction");

  EvalArgs ea;
  auto* ev = app.add_subcommand("eval", "Fine-grained or zero-shot superset evaluation");
  ev->add_option("--checkpoint", ea.checkpoint)->required();
  ev->add_option("--data", ea.data)->required();
  ev->add_option("--bank", ea.bank)->required();
  ev->add_option("--mapping", ea.mapping, "Zero-shot mapping TSV");
  ev->add_option("--task", ea.task, "finegrained|superclass|rhythm|mitbih")->capture_default_str();
  ev->add_option("--topk", ea.topk)->capture_default_str();
  ev->add_option("--out", ea.out, "Report path");

  GradCheckArgs ga;
  auto* gc = app.add_subcommand("grad-check", "Finite-difference gradient verification");
  gc->add_option("--seed", ga.seed)->capture_default_str();
  gc->add_option("--samples", ga.samples, "Entries per tensor (0 = all)")->capture_default_str();

  InspectArgs ia;
  auto* in = app.add_subcommand("inspect", "Print the header of an EDS1, ETB1 or CKP1 file");
  in->add_option("--file", ia.file)->required();

  try {
    std::vector<std::string> reversed(args.rbegin(), args.rend());
    app.parse(std::move(reversed));
  } catch (const CLI::CallForHelp&) {
    out << app.help(app.get_subcommands().empty() ? "" : app.get_subcommands().front()->get_name());
    return 0;
  } catch (const CLI::ParseError& e) {
    err << "error: " << e.what() << '\n';
    return 1;
  }

  try {
    if (gen->parsed()) return cmd_gen_synth(gs, out);
    if (bank->parsed()) return cmd_make_bank(mb, out);
    if (tr->parsed()) return cmd_train(ta, out);
    if (ev->parsed()) return cmd_eval(ea, out);
    if (gc->parsed()) return cmd_grad_check(ga, out);
    if (in->parsed()) return cmd_inspect(ia, out);
  } catch (const UsageError& e) {
    err << "error: " << e.what() << '\n';
    return 1;
  } catch (const NumericError& e) {
    err << "error: " << e.what() << '\n';
    return 3;
  } catch (const DataError& e) {
    err << "error: " << e.what() << '\n';
    return 2;
  } catch (const fs::filesystem_error& e) {
    err << "error: " << e.what() << '\n';
    return 2;
  }
  return 1;
}

}  // namespace ecgclip
