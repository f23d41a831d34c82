#include "ecgclip/gradcheck.hpp"

#include <algorithm>
#include <chrono>
#include <cmath>
#include <numeric>

#include "ecgclip/random.hpp"

namespace ecgclip {

namespace {

constexpr std::uint64_t kDataStream = 0x6461746100000000ULL;
constexpr std::uint64_t kTextStream = 0x7465787400000000ULL;
constexpr std::uint64_t kPickStream = 0x7069636b00000000ULL;

std::vector<std::size_t> pick_entries(std::span<const double> grad, std::size_t count, CounterRng& rng) {
  std::vector<std::size_t> all(grad.size());
  std::iota(all.begin(), all.end(), 0);
  if (count == 0 || count >= all.size()) return all;
  const auto top = std::max_element(grad.begin(), grad.end(),
                                    [](double a, double b) { return std::abs(a) < std::abs(b); }) - grad.begin();
  std::swap(all[0], all[top]);
  for (std::size_t i = 1; i < count; ++i) std::swap(all[i], all[i + rng.below(all.size() - i)]);
  all.resize(count);
  return all;
}

}  // namespace

GradCheckConfig default_grad_check_config(std::uint64_t seed) {
  GradCheckConfig c;
  c.model.encoder = EncoderConfig{}.scaled(0.125);
  c.model.encoder.input_length = 500;
  c.seed = seed;
  return c;
}

bool GradCheckReport::passed() const {
  return !groups.empty() && std::all_of(groups.begin(), groups.end(), [](const GroupCheck& g) { return g.passed(); });
}

GradCheckReport grad_check(const GradCheckConfig& config) {
  const auto start = std::chrono::steady_clock::now();
  auto model = Model<double>::initialize(config.model, config.seed);
  const auto& enc = config.model.encoder;
  std::vector<double> x(config.batch * enc.in_leads * enc.input_length);
  std::vector<double> text(config.batch * config.model.text_dim);
  CounterRng data_rng(derive_key(config.seed, kDataStream));
  for (auto& v : x) v = data_rng.normal();
  CounterRng text_rng(derive_key(config.seed, kTextStream));
  for (auto& v : text) v = text_rng.normal();

  GatePattern gates;
  auto grads = model.zero_gradients();
  contrastive_step<double>(model, x, config.batch, text, {Mode::train, false, &gates}, &grads);
  gates.use = GatePattern::Use::replay;
  if (config.mutate) config.mutate(model, grads);

  auto loss_at = [&](double& w, double value) {
    const double saved = w;
    w = value;
    const double l = contrastive_step<double>(model, x, config.batch, text, {Mode::train, false, &gates}, nullptr).loss;
    w = saved;
    return l;
  };

  GradCheckReport report;
  const std::size_t tau_index = model.topology().log_tau;
  for (std::size_t p = 0; p < model.params().size(); ++p) {
    auto& tensor = model.params()[p];
    CounterRng pick(derive_key(config.seed, kPickStream + p));
    const auto entries = pick_entries(grads[p], config.samples_per_tensor, pick);
    double max_diff = 0.0, max_mag = 0.0;
    for (std::size_t i : entries) {
      double& w = tensor.data[i];
      const double base = w;
      const double numeric = (loss_at(w, base + config.epsilon) - loss_at(w, base - config.epsilon)) /
                             (2.0 * config.epsilon);
      const double analytic = grads[p][i];
      max_diff = std::max(max_diff, std::abs(analytic - numeric));
      max_mag = std::max({max_mag, std::abs(analytic), std::abs(numeric)});
    }
    GroupCheck g;
    g.name = tensor.name;
    g.checked = entries.size();
    g.max_rel = max_mag > 0.0 ? max_diff / max_mag : (max_diff > 0.0 ? INFINITY : 0.0);
    g.tolerance = p == tau_index ? config.log_tau_tolerance : config.tolerance;
    report.max_rel = std::max(report.max_rel, g.max_rel);
    report.groups.push_back(std::move(g));
  }
  report.seconds = std::chrono::duration<double>(std::chrono::steady_clock::now() - start).count();
  return report;
}

}  // namespace ecgclip
