#include "ecgclip/trainer.hpp"

#include <algorithm>
#include <chrono>
#include <cmath>
#include <cstdio>
#include <fstream>
#include <numeric>

#include "ecgclip/binary_io.hpp"
#include "ecgclip/errors.hpp"
#include "ecgclip/random.hpp"
#include "ecgclip/zeroshot.hpp"
#include "json.hpp"

namespace ecgclip {

namespace {

constexpr std::string_view kMagic = "CKP1";
constexpr std::uint32_t kVersion = 1;
constexpr std::uint64_t kEpochStream = 0x65706f6368000000ULL;

std::size_t record_values(const ModelConfig& c) { return c.encoder.in_leads * c.encoder.input_length; }

void check_training_data(const EcgDataset& d, const ModelConfig& c, const EmbeddingTable& bank, const char* role) {
  for (std::size_t i = 0; i < d.records.size(); ++i) {
    const auto& r = d.records[i];
    if (r.samples.size() != record_values(c)) {
      throw DataError(std::string(role) + " record " + std::to_string(i) + " has " + std::to_string(r.samples.size()) +
                      " samples, the model expects " + std::to_string(c.encoder.in_leads) + " x " +
                      std::to_string(c.encoder.input_length));
    }
    if (r.label_index >= d.label_table.size()) {
      throw DataError(std::string(role) + " record " + std::to_string(i) + " has an out-of-range label index");
    }
  }
  for (const auto& label : d.label_table.labels()) {
    if (!bank.contains(label)) {
      throw DataError(std::string(role) + " label \"" + label + "\" not found in embedding table");
    }
  }
}

// Checkpoint sections: 4-byte tag, u64 payload length, payload.

void write_section(ByteWriter& out, std::string_view tag, const ByteWriter& payload) {
  out.magic(tag);
  out.u64(payload.size());
  out.append(payload.bytes());
}

ByteReader open_section(ByteReader& in, std::span<const std::uint8_t> bytes, std::string_view tag) {
  const std::size_t at = in.offset();
  const std::string got = in.fixed_string(4, "section tag");
  if (got != tag) throw FormatError("expected section " + std::string(tag) + ", found \"" + got + "\"", at);
  const std::uint64_t length = in.u64();
  in.require(length, std::string(tag) + " section");
  ByteReader section(bytes.subspan(in.offset(), length));
  in.fixed_string(length, "section payload");
  return section;
}

void close_section(const ByteReader& section, std::string_view tag, std::size_t base) {
  if (!section.at_end()) {
    throw FormatError("unexpected bytes at the end of the " + std::string(tag) + " section", base + section.offset());
  }
}

void write_config(ByteWriter& w, const TrainState& s) {
  const ModelConfig& m = s.model.config();
  w.u32(static_cast<std::uint32_t>(m.encoder.in_leads));
  for (auto v : m.encoder.stage_blocks) w.u32(static_cast<std::uint32_t>(v));
  for (auto v : m.encoder.stage_channels) w.u32(static_cast<std::uint32_t>(v));
  w.u32(static_cast<std::uint32_t>(m.encoder.stem_kernel));
  w.u32(static_cast<std::uint32_t>(m.encoder.block_kernel));
  w.u32(static_cast<std::uint32_t>(m.encoder.input_length));
  w.u32(static_cast<std::uint32_t>(m.text_dim));
  w.u32(static_cast<std::uint32_t>(m.projection_dim));
  w.f64(m.initial_tau);
  const TrainConfig& c = s.config;
  w.f64(c.learning_rate);
  w.f64(c.weight_decay);
  w.u64(c.batch_size);
  w.u64(c.epochs);
  w.u64(c.seed);
  w.f64(c.width_factor);
  w.u64(c.eval_every);
  w.u64(c.checkpoint_every);
  w.u8(c.freeze_tau ? 1 : 0);
  w.f64(c.initial_tau);
  w.u64(c.projection_dim);
  w.f64(c.beta1);
  w.f64(c.beta2);
  w.f64(c.adam_epsilon);
}

std::pair<ModelConfig, TrainConfig> read_config(ByteReader& r) {
  ModelConfig m;
  m.encoder.in_leads = r.u32();
  for (auto& v : m.encoder.stage_blocks) v = r.u32();
  for (auto& v : m.encoder.stage_channels) v = r.u32();
  m.encoder.stem_kernel = r.u32();
  m.encoder.block_kernel = r.u32();
  m.encoder.input_length = r.u32();
  m.text_dim = r.u32();
  m.projection_dim = r.u32();
  m.initial_tau = r.f64();
  TrainConfig c;
  c.learning_rate = r.f64();
  c.weight_decay = r.f64();
  c.batch_size = r.u64();
  c.epochs = r.u64();
  c.seed = r.u64();
  c.width_factor = r.f64();
  c.eval_every = r.u64();
  c.checkpoint_every = r.u64();
  c.freeze_tau = r.u8() != 0;
  c.initial_tau = r.f64();
  c.projection_dim = r.u64();
  c.beta1 = r.f64();
  c.beta2 = r.f64();
  c.adam_epsilon = r.f64();
  return {m, c};
}

void write_tensors(ByteWriter& w, const std::vector<Tensor<float>>& tensors) {
  w.u32(static_cast<std::uint32_t>(tensors.size()));
  for (const auto& t : tensors) {
    w.short_string(t.name);
    w.u8(static_cast<std::uint8_t>(t.kind));
    w.u32(static_cast<std::uint32_t>(t.shape.size()));
    for (auto d : t.shape) w.u32(static_cast<std::uint32_t>(d));
    w.f32s(t.data);
  }
}

std::vector<Tensor<float>> read_tensors(ByteReader& r, std::size_t base) {
  const std::uint32_t count = r.u32();
  std::vector<Tensor<float>> out;
  for (std::uint32_t i = 0; i < count; ++i) {
    Tensor<float> t;
    t.name = r.short_string("tensor name");
    const std::size_t kind_at = r.offset();
    const std::uint8_t kind = r.u8();
    if (kind > static_cast<std::uint8_t>(ParamKind::running_var)) {
      throw FormatError("unknown tensor kind " + std::to_string(kind), base + kind_at);
    }
    t.kind = static_cast<ParamKind>(kind);
    const std::uint32_t ndim = r.u32();
    std::size_t size = 1;
    for (std::uint32_t d = 0; d < ndim; ++d) {
      t.shape.push_back(r.u32());
      size *= t.shape.back();
    }
    r.require(size * sizeof(float), "tensor values");
    t.data.resize(size);
    r.f32s(t.data, "tensor values");
    out.push_back(std::move(t));
  }
  return out;
}

}  // namespace

void TrainConfig::validate() const {
  auto positive = [](double v) { return std::isfinite(v) && v > 0.0; };
  if (!positive(learning_rate)) throw UsageError("learning rate must be positive");
  if (!std::isfinite(weight_decay) || weight_decay < 0.0) throw UsageError("weight decay must be >= 0");
  if (batch_size < 2) throw UsageError("batch size must be at least 2 for contrastive training");
  if (!positive(width_factor)) throw UsageError("width factor must be positive");
  if (!positive(initial_tau)) throw UsageError("initial temperature must be positive");
  if (projection_dim == 0) throw UsageError("projection dimension must be positive");
  if (!(beta1 >= 0.0 && beta1 < 1.0) || !(beta2 >= 0.0 && beta2 < 1.0)) throw UsageError("betas must lie in [0, 1)");
  if (!positive(adam_epsilon)) throw UsageError("optimizer epsilon must be positive");
}

ModelConfig TrainConfig::model_config(std::size_t text_dim, std::size_t input_length) const {
  ModelConfig m;
  m.encoder = EncoderConfig{}.scaled(width_factor);
  m.encoder.input_length = input_length;
  m.text_dim = text_dim;
  m.projection_dim = projection_dim;
  m.initial_tau = initial_tau;
  m.validate();
  return m;
}

TrainState init_state(const TrainConfig& config, std::size_t text_dim, std::size_t input_length,
                      std::uint64_t bank_hash) {
  config.validate();
  TrainState s;
  s.config = config;
  s.model = Model<float>::initialize(config.model_config(text_dim, input_length), config.seed);
  for (const auto& p : s.model.params()) {
    s.optimizer.m.emplace_back(p.size(), 0.0f);
    s.optimizer.v.emplace_back(p.size(), 0.0f);
  }
  s.bank_hash = bank_hash;
  return s;
}

void adamw_update(TrainState& state, const Gradients<float>& grads) {
  const TrainConfig& c = state.config;
  auto& params = state.model.params();
  AdamState& opt = state.optimizer;
  if (grads.size() != params.size() || opt.m.size() != params.size()) {
    throw UsageError("gradient and optimizer state do not match the model");
  }
  ++opt.step;
  const double bc1 = 1.0 - std::pow(c.beta1, double(opt.step));
  const double bc2 = 1.0 - std::pow(c.beta2, double(opt.step));
  const std::size_t tau_index = state.model.topology().log_tau;
  for (std::size_t p = 0; p < params.size(); ++p) {
    if (p == tau_index && c.freeze_tau) continue;
    auto& w = params[p].data;
    auto& m = opt.m[p];
    auto& v = opt.v[p];
    const double shrink = is_decayed(params[p].kind) ? 1.0 - c.learning_rate * c.weight_decay : 1.0;
    for (std::size_t i = 0; i < w.size(); ++i) {
      const double g = grads[p][i];
      const double mi = c.beta1 * m[i] + (1.0 - c.beta1) * g;
      const double vi = c.beta2 * v[i] + (1.0 - c.beta2) * g * g;
      m[i] = static_cast<float>(mi);
      v[i] = static_cast<float>(vi);
      const double step = c.learning_rate * (mi / bc1) / (std::sqrt(vi / bc2) + c.adam_epsilon);
      w[i] = static_cast<float>(double(w[i]) * shrink - step);
    }
  }
  if (!c.freeze_tau) {
    Temperature t{double(state.model.log_tau())};
    t.clamp();
    state.model.set_log_tau(static_cast<float>(t.log_tau));
  }
}

double train_step(TrainState& state, const EcgDataset& data, std::span<const std::size_t> indices,
                  const EmbeddingTable& bank) {
  const ModelConfig& mc = state.model.config();
  const std::size_t n = indices.size();
  if (n < 2) throw UsageError("a contrastive step needs at least 2 records");
  const std::size_t per = record_values(mc);
  std::vector<float> batch(n * per), text(n * mc.text_dim);
  for (std::size_t i = 0; i < n; ++i) {
    const auto& r = data.records.at(indices[i]);
    if (r.samples.size() != per) throw DataError("record shape does not match the encoder input");
    std::copy(r.samples.begin(), r.samples.end(), batch.begin() + i * per);
    const auto v = bank.lookup(data.label_table[r.label_index]);
    if (v.size() != mc.text_dim) throw DataError("embedding table dimension does not match the model");
    std::copy(v.begin(), v.end(), text.begin() + i * mc.text_dim);
  }
  auto grads = state.model.zero_gradients();
  const StepLoss loss = contrastive_step<float>(state.model, batch, n, text, {Mode::train, true}, &grads);
  adamw_update(state, grads);
  return loss.loss;
}

std::vector<std::size_t> epoch_order(std::size_t count, std::uint64_t seed, std::size_t epoch) {
  std::vector<std::size_t> order(count);
  std::iota(order.begin(), order.end(), 0);
  CounterRng rng(derive_key(seed, kEpochStream + epoch));
  shuffle(order, rng);
  return order;
}

EpochMetrics run_epoch(TrainState& state, const EcgDataset& train, const EcgDataset* val,
                       const EmbeddingTable& bank) {
  const auto start = std::chrono::steady_clock::now();
  const auto order = epoch_order(train.records.size(), state.config.seed, state.epoch);
  const std::size_t b = state.config.batch_size;
  double total = 0.0;
  std::size_t steps = 0;
  for (std::size_t at = 0; at < order.size(); at += b) {
    const std::size_t n = std::min(b, order.size() - at);
    if (n < 2) break;
    total += train_step(state, train, std::span(order).subspan(at, n), bank);
    ++steps;
  }
  if (steps == 0) throw DataError("training set needs at least 2 records");
  ++state.epoch;

  EpochMetrics m;
  m.epoch = state.epoch;
  m.loss = total / double(steps);
  m.tau = std::exp(double(state.model.log_tau()));
  if (val && !val->records.empty() && state.config.eval_every > 0 && state.epoch % state.config.eval_every == 0) {
    const auto rep = eval_task(state.model, *val, bank, MappingTable{}, Task::finegrained, 5);
    m.val_top1 = rep.overall.top1;
    m.val_top5 = rep.overall.topk;
  }
  m.seconds = std::chrono::duration<double>(std::chrono::steady_clock::now() - start).count();
  return m;
}

std::string metrics_json(const EpochMetrics& m) {
  nlohmann::ordered_json j;
  j["epoch"] = m.epoch;
  j["loss"] = m.loss;
  j["tau"] = m.tau;
  j["val_top1"] = m.val_top1 ? nlohmann::ordered_json(*m.val_top1) : nlohmann::ordered_json(nullptr);
  j["val_top5"] = m.val_top5 ? nlohmann::ordered_json(*m.val_top5) : nlohmann::ordered_json(nullptr);
  j["seconds"] = m.seconds;
  return j.dump();
}

TrainResult train(const EcgDataset& train_set, const EcgDataset* val_set, const EmbeddingTable& bank,
                  const TrainOptions& options) {
  options.config.validate();
  if (train_set.records.empty()) throw DataError("training set is empty");
  if (val_set) {
    const auto leaked = shared_patients(train_set, *val_set);
    if (!leaked.empty()) {
      std::string ids;
      for (std::size_t i = 0; i < std::min<std::size_t>(leaked.size(), 10); ++i) {
        ids += (i ? ", " : "") + std::to_string(leaked[i]);
      }
      throw DataError("patient leakage: " + std::to_string(leaked.size()) +
                      " patient(s) appear in both training and validation data (ids " + ids +
                      (leaked.size() > 10 ? ", ..." : "") + ")");
    }
  }

  const std::uint64_t bank_hash = table_hash(bank);
  TrainResult result;
  if (options.resume) {
    result.state = *options.resume;
    if (result.state.bank_hash != bank_hash) {
      throw DataError("embedding table differs from the one the checkpoint was trained with");
    }
    result.state.config.epochs = options.config.epochs;
    result.state.config.eval_every = options.config.eval_every;
    result.state.config.checkpoint_every = options.config.checkpoint_every;
  } else {
    const std::size_t length = train_set.records.front().sample_count;
    result.state = init_state(options.config, bank.dim(), length, bank_hash);
  }
  TrainState& state = result.state;
  check_training_data(train_set, state.model.config(), bank, "training");
  if (val_set) check_training_data(*val_set, state.model.config(), bank, "validation");

  std::ofstream log;
  const bool write = !options.out_dir.empty();
  if (write) {
    std::filesystem::create_directories(options.out_dir);
    const auto path = options.out_dir / "metrics.ndjson";
    log.open(path, options.resume ? std::ios::app : std::ios::trunc);
    if (!log) throw DataError("cannot open metrics log " + path.string());
  }

  while (state.epoch < state.config.epochs) {
    const EpochMetrics m = run_epoch(state, train_set, val_set, bank);
    result.log.push_back(m);
    if (write) {
      log << metrics_json(m) << '\n' << std::flush;
      if (state.config.checkpoint_every > 0 && state.epoch % state.config.checkpoint_every == 0) {
        char name[32];
        std::snprintf(name, sizeof name, "epoch_%04zu.ckp", state.epoch);
        save_checkpoint(state, options.out_dir / name);
      }
    }
    if (options.on_epoch && !options.on_epoch(m, state)) {
      result.stopped_early = state.epoch < state.config.epochs;
      break;
    }
  }
  if (write) save_checkpoint(state, options.out_dir / "final.ckp");
  return result;
}

std::vector<std::uint8_t> encode_checkpoint(const TrainState& s) {
  ByteWriter out;
  out.magic(kMagic);
  out.u32(kVersion);
  ByteWriter conf, parm, bufs, optm, meta;
  write_config(conf, s);
  write_tensors(parm, s.model.params());
  write_tensors(bufs, s.model.buffers());
  optm.u64(s.optimizer.step);
  optm.u32(static_cast<std::uint32_t>(s.optimizer.m.size()));
  for (std::size_t i = 0; i < s.optimizer.m.size(); ++i) {
    optm.u64(s.optimizer.m[i].size());
    optm.f32s(s.optimizer.m[i]);
    optm.f32s(s.optimizer.v[i]);
  }
  meta.u64(s.epoch);
  meta.u64(s.config.seed);
  meta.u64(s.bank_hash);
  write_section(out, "CONF", conf);
  write_section(out, "PARM", parm);
  write_section(out, "BUFS", bufs);
  write_section(out, "OPTM", optm);
  write_section(out, "META", meta);
  return std::move(out).take();
}

TrainState decode_checkpoint(std::span<const std::uint8_t> bytes) {
  ByteReader in(bytes);
  in.expect_magic(kMagic);
  const std::size_t version_at = in.offset();
  if (const auto v = in.u32(); v != kVersion) {
    throw FormatError("unsupported CKP1 version " + std::to_string(v), version_at);
  }
  TrainState s;

  std::size_t base = in.offset() + 12;
  ByteReader conf = open_section(in, bytes, "CONF");
  auto [model_config, train_config] = read_config(conf);
  close_section(conf, "CONF", base);
  s.config = train_config;

  base = in.offset() + 12;
  ByteReader parm = open_section(in, bytes, "PARM");
  auto params = read_tensors(parm, base);
  close_section(parm, "PARM", base);

  base = in.offset() + 12;
  ByteReader bufs = open_section(in, bytes, "BUFS");
  auto buffers = read_tensors(bufs, base);
  close_section(bufs, "BUFS", base);

  try {
    model_config.validate();
  } catch (const UsageError& e) {
    throw FormatError(std::string("invalid model configuration: ") + e.what(), 8);
  }
  s.model = Model<float>(model_config, std::move(params), std::move(buffers));

  base = in.offset() + 12;
  ByteReader optm = open_section(in, bytes, "OPTM");
  s.optimizer.step = optm.u64();
  const std::size_t count_at = optm.offset();
  const std::uint32_t count = optm.u32();
  if (count != s.model.params().size()) {
    throw FormatError("optimizer state covers " + std::to_string(count) + " tensors, the model has " +
                          std::to_string(s.model.params().size()),
                      base + count_at);
  }
  for (std::uint32_t i = 0; i < count; ++i) {
    const std::size_t len_at = optm.offset();
    const std::uint64_t len = optm.u64();
    if (len != s.model.params()[i].size()) {
      throw FormatError("optimizer moment length does not match tensor " + s.model.params()[i].name, base + len_at);
    }
    s.optimizer.m.emplace_back(len);
    s.optimizer.v.emplace_back(len);
    optm.f32s(s.optimizer.m.back(), "first moments");
    optm.f32s(s.optimizer.v.back(), "second moments");
  }
  close_section(optm, "OPTM", base);

  base = in.offset() + 12;
  ByteReader meta = open_section(in, bytes, "META");
  s.epoch = meta.u64();
  const std::size_t seed_at = meta.offset();
  if (meta.u64() != s.config.seed) throw FormatError("seed in META disagrees with CONF", base + seed_at);
  s.bank_hash = meta.u64();
  close_section(meta, "META", base);

  if (!in.at_end()) throw FormatError("trailing bytes after the last section", in.offset());
  return s;
}

void save_checkpoint(const TrainState& s, const std::filesystem::path& path) { write_file(path, encode_checkpoint(s)); }

TrainState load_checkpoint(const std::filesystem::path& path) { return decode_checkpoint(read_file(path)); }

}  // namespace ecgclip
