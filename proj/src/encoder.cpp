#include "ecgclip/encoder.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>

#include "ecgclip/errors.hpp"
#include "ecgclip/kernels.hpp"
#include "ecgclip/random.hpp"

namespace ecgclip {

namespace {

constexpr double kNormEps = 1e-5;
constexpr double kNormMomentum = 0.1;
constexpr double kStdGuard = 1e-6;

std::size_t ceil_div(std::size_t a, std::size_t b) { return (a + b - 1) / b; }

// ---------------------------------------------------------------------------
// Topology

struct ShapeSink {
  std::vector<Tensor<float>>* params;
  std::vector<Tensor<float>>* buffers;
  std::size_t n_params = 0;
  std::size_t n_buffers = 0;

  std::size_t param(std::string name, ParamKind kind, std::vector<std::size_t> shape) {
    if (params) params->push_back({std::move(name), kind, std::move(shape), {}});
    return n_params++;
  }
  std::size_t buffer(std::string name, ParamKind kind, std::vector<std::size_t> shape) {
    if (buffers) buffers->push_back({std::move(name), kind, std::move(shape), {}});
    return n_buffers++;
  }

  ConvLayer conv(const std::string& prefix, std::size_t cin, std::size_t cout, std::size_t k,
                 std::size_t stride) {
    ConvLayer c;
    c.weight = param(prefix + ".weight", ParamKind::conv_weight, {cout, cin, k});
    c.in_channels = cin;
    c.out_channels = cout;
    c.kernel = k;
    c.stride = stride;
    c.pad = k / 2;
    return c;
  }

  NormLayer norm(const std::string& prefix, std::size_t ch) {
    NormLayer n;
    n.scale = param(prefix + ".scale", ParamKind::norm_scale, {ch});
    n.offset = param(prefix + ".offset", ParamKind::norm_offset, {ch});
    n.mean = buffer(prefix + ".running_mean", ParamKind::running_mean, {ch});
    n.var = buffer(prefix + ".running_var", ParamKind::running_var, {ch});
    n.channels = ch;
    return n;
  }
};

}  // namespace

void EncoderConfig::validate() const {
  if (in_leads == 0) throw UsageError("encoder needs at least one input lead");
  if (stem_kernel % 2 == 0 || block_kernel % 2 == 0) throw UsageError("encoder kernels must be odd");
  for (std::size_t c : stage_channels)
    if (c == 0) throw UsageError("stage channel counts must be positive");
  for (std::size_t b : stage_blocks)
    if (b == 0) throw UsageError("every stage needs at least one block");
  if (input_length < stem_kernel) throw UsageError("input shorter than the stem kernel");
}

EncoderConfig EncoderConfig::scaled(double width_factor) const {
  if (!(width_factor > 0.0)) throw UsageError("width factor must be positive");
  EncoderConfig c = *this;
  for (auto& ch : c.stage_channels) {
    ch = std::max<std::size_t>(1, static_cast<std::size_t>(std::llround(static_cast<double>(ch) * width_factor)));
  }
  return c;
}

std::size_t EncoderConfig::pooled_length() const {
  auto len = [](std::size_t l, std::size_t k, std::size_t s, std::size_t p) { return (l + 2 * p - k) / s + 1; };
  std::size_t l = len(input_length, stem_kernel, 2, stem_kernel / 2);
  l = len(l, 3, 2, 1);
  for (std::size_t s = 1; s < 4; ++s) l = len(l, block_kernel, 2, block_kernel / 2);
  return l;
}

void ModelConfig::validate() const {
  encoder.validate();
  if (text_dim == 0) throw UsageError("text embedding dimension must be positive");
  if (projection_dim == 0) throw UsageError("projection dimension must be positive");
  if (!(initial_tau > 0.0)) throw UsageError("initial temperature must be positive");
}

std::string_view kind_name(ParamKind k) {
  switch (k) {
    case ParamKind::conv_weight: return "conv_weight";
    case ParamKind::norm_scale: return "norm_scale";
    case ParamKind::norm_offset: return "norm_offset";
    case ParamKind::proj_weight: return "proj_weight";
    case ParamKind::proj_bias: return "proj_bias";
    case ParamKind::log_tau: return "log_tau";
    case ParamKind::running_mean: return "running_mean";
    case ParamKind::running_var: return "running_var";
  }
  return "unknown";
}

bool is_decayed(ParamKind k) {
  return k == ParamKind::conv_weight || k == ParamKind::proj_weight || k == ParamKind::proj_bias;
}

Topology build_topology(const ModelConfig& config, std::vector<Tensor<float>>* param_shapes,
                        std::vector<Tensor<float>>* buffer_shapes) {
  config.validate();
  const EncoderConfig& e = config.encoder;
  ShapeSink sink{param_shapes, buffer_shapes};
  Topology t;
  t.stem = sink.conv("stem.conv", e.in_leads, e.stage_channels[0], e.stem_kernel, 2);
  t.stem_norm = sink.norm("stem.norm", e.stage_channels[0]);
  std::size_t prev = e.stage_channels[0];
  for (std::size_t s = 0; s < 4; ++s) {
    const std::size_t ch = e.stage_channels[s];
    for (std::size_t b = 0; b < e.stage_blocks[s]; ++b) {
      const std::string p = "stage" + std::to_string(s + 1) + ".block" + std::to_string(b + 1);
      const std::size_t stride = (s > 0 && b == 0) ? 2 : 1;
      ResidualBlock blk;
      blk.conv1 = sink.conv(p + ".conv1", prev, ch, e.block_kernel, stride);
      blk.norm1 = sink.norm(p + ".norm1", ch);
      blk.conv2 = sink.conv(p + ".conv2", ch, ch, e.block_kernel, 1);
      blk.norm2 = sink.norm(p + ".norm2", ch);
      if (stride != 1 || prev != ch) {
        blk.down = sink.conv(p + ".down", prev, ch, 1, stride);
        blk.down_norm = sink.norm(p + ".down_norm", ch);
      }
      t.blocks.push_back(blk);
      prev = ch;
    }
  }
  t.encoder_param_end = sink.n_params;
  t.ecg_weight = sink.param("head.ecg.weight", ParamKind::proj_weight, {e.feature_dim(), config.projection_dim});
  t.ecg_bias = sink.param("head.ecg.bias", ParamKind::proj_bias, {config.projection_dim});
  t.text_weight = sink.param("head.text.weight", ParamKind::proj_weight, {config.text_dim, config.projection_dim});
  t.text_bias = sink.param("head.text.bias", ParamKind::proj_bias, {config.projection_dim});
  t.log_tau = sink.param("log_tau", ParamKind::log_tau, {1});
  return t;
}

// ---------------------------------------------------------------------------
// Model

template <class T>
Model<T>::Model(ModelConfig config, std::vector<Tensor<T>> params, std::vector<Tensor<T>> buffers)
    : config_(std::move(config)), params_(std::move(params)), buffers_(std::move(buffers)) {
  std::vector<Tensor<float>> ps, bs;
  topo_ = build_topology(config_, &ps, &bs);
  auto check = [](const auto& want, const auto& got, const char* what) {
    if (want.size() != got.size()) {
      throw DataError(std::string("model has ") + std::to_string(got.size()) + " " + what +
                      " tensors, topology expects " + std::to_string(want.size()));
    }
    for (std::size_t i = 0; i < want.size(); ++i) {
      std::size_t n = 1;
      for (auto d : want[i].shape) n *= d;
      if (want[i].name != got[i].name || want[i].kind != got[i].kind || want[i].shape != got[i].shape ||
          got[i].data.size() != n) {
        throw DataError(std::string(what) + " tensor " + std::to_string(i) + " (\"" + got[i].name +
                        "\") does not match topology entry \"" + want[i].name + "\"");
      }
    }
  };
  check(ps, params_, "parameter");
  check(bs, buffers_, "buffer");
}

template <class T>
Model<T> Model<T>::initialize(const ModelConfig& config, std::uint64_t seed) {
  std::vector<Tensor<float>> ps, bs;
  build_topology(config, &ps, &bs);
  std::vector<Tensor<T>> params, buffers;
  for (std::size_t i = 0; i < ps.size(); ++i) {
    Tensor<T> t{ps[i].name, ps[i].kind, ps[i].shape, {}};
    std::size_t n = 1;
    for (auto d : t.shape) n *= d;
    t.data.assign(n, T(0));
    CounterRng rng(derive_key(seed, i));
    switch (t.kind) {
      case ParamKind::conv_weight: {
        const double bound = 1.0 / std::sqrt(static_cast<double>(t.shape[1] * t.shape[2]));
        for (auto& v : t.data) v = static_cast<T>(rng.uniform(-bound, bound));
        break;
      }
      case ParamKind::proj_weight: {
        const double bound = 1.0 / std::sqrt(static_cast<double>(t.shape[0]));
        for (auto& v : t.data) v = static_cast<T>(rng.uniform(-bound, bound));
        break;
      }
      case ParamKind::norm_scale:
        std::fill(t.data.begin(), t.data.end(), T(1));
        break;
      case ParamKind::log_tau:
        t.data[0] = static_cast<T>(std::log(config.initial_tau));
        break;
      default:
        break;
    }
    params.push_back(std::move(t));
  }
  for (const auto& b : bs) {
    Tensor<T> t{b.name, b.kind, b.shape, {}};
    t.data.assign(b.shape[0], b.kind == ParamKind::running_var ? T(1) : T(0));
    buffers.push_back(std::move(t));
  }
  return Model(config, std::move(params), std::move(buffers));
}

template <class T>
ProjectionHead<T> Model<T>::text_head() const {
  return {params_[topo_.text_weight].data, params_[topo_.text_bias].data, config_.text_dim,
          config_.projection_dim};
}

template <class T>
ProjectionHead<T> Model<T>::ecg_head() const {
  return {params_[topo_.ecg_weight].data, params_[topo_.ecg_bias].data, config_.encoder.feature_dim(),
          config_.projection_dim};
}

template <class T>
std::size_t Model<T>::encoder_parameter_count() const {
  std::size_t n = 0;
  for (std::size_t i = 0; i < topo_.encoder_param_end; ++i) n += params_[i].size();
  return n;
}

template <class T>
std::size_t Model<T>::parameter_count() const {
  std::size_t n = 0;
  for (const auto& p : params_) n += p.size();
  return n;
}

template <class T>
template <class U>
Model<U> Model<T>::convert() const {
  auto cast = [](const std::vector<Tensor<T>>& src) {
    std::vector<Tensor<U>> out;
    out.reserve(src.size());
    for (const auto& t : src) {
      Tensor<U> u{t.name, t.kind, t.shape, std::vector<U>(t.data.begin(), t.data.end())};
      out.push_back(std::move(u));
    }
    return out;
  };
  return Model<U>(config_, cast(params_), cast(buffers_));
}

template <class T>
Gradients<T> Model<T>::zero_gradients() const {
  Gradients<T> g(params_.size());
  for (std::size_t i = 0; i < params_.size(); ++i) g[i].assign(params_[i].size(), T(0));
  return g;
}

template <class T>
std::vector<T> project(const ProjectionHead<T>& head, std::span<const T> x, std::size_t rows) {
  if (x.size() != rows * head.in_dim) {
    throw UsageError("projection input has " + std::to_string(x.size()) + " values, expected " +
                     std::to_string(rows) + " x " + std::to_string(head.in_dim));
  }
  std::vector<T> y(rows * head.out_dim);
  for (std::size_t r = 0; r < rows; ++r) {
    T* out = y.data() + r * head.out_dim;
    std::copy(head.bias.begin(), head.bias.end(), out);
    const T* in = x.data() + r * head.in_dim;
    for (std::size_t i = 0; i < head.in_dim; ++i) {
      kernels::axpy(in[i], head.weight.data() + i * head.out_dim, out, head.out_dim);
    }
  }
  return y;
}

template <class T>
void standardize_leads(std::span<T> record, std::size_t leads, std::size_t length) {
  for (std::size_t l = 0; l < leads; ++l) {
    T* x = record.data() + l * length;
    if (std::all_of(x, x + length, [&](T v) { return v == x[0]; })) {
      std::fill(x, x + length, T(0));
      continue;
    }
    double mean = 0.0;
    for (std::size_t i = 0; i < length; ++i) mean += x[i];
    mean /= static_cast<double>(length);
    double var = 0.0;
    for (std::size_t i = 0; i < length; ++i) var += (x[i] - mean) * (x[i] - mean);
    var /= static_cast<double>(length);
    const double sd = std::sqrt(var);
    const double inv = 1.0 / (sd + kStdGuard);
    for (std::size_t i = 0; i < length; ++i) x[i] = static_cast<T>((x[i] - mean) * inv);
  }
}

// ---------------------------------------------------------------------------
// Layers

namespace {

template <class T>
struct Act {
  std::size_t batch = 0, channels = 0, length = 0;
  std::vector<T> data;

  Act() = default;
  Act(std::size_t b, std::size_t c, std::size_t l) : batch(b), channels(c), length(l), data(b * c * l, T(0)) {}
  T* row(std::size_t b, std::size_t c) { return data.data() + (b * channels + c) * length; }
  const T* row(std::size_t b, std::size_t c) const { return data.data() + (b * channels + c) * length; }
};

template <class T>
struct ConvCache {
  std::vector<T> phased;  // batch x (cin*stride) x tq
  std::vector<T> wq;      // cout x (cin*stride) x kq
  std::size_t in_length = 0;
};

// Rewrites a strided convolution as a stride-1 correlation over the
// polyphase components of the zero-padded input:
//   phase[ci*s + r][m] = xpad[s*m + r],  wq[co][ci*s + r][q] = w[co][ci][s*q + r]
template <class T>
Act<T> conv_forward(const ConvLayer& c, const T* w, const Act<T>& x, ConvCache<T>& cache) {
  const std::size_t s = c.stride, kq = ceil_div(c.kernel, s), cv = c.in_channels * s;
  const std::size_t len = x.length, out_len = c.out_length(len), tq = out_len + kq - 1;

  cache.in_length = len;
  cache.wq.assign(c.out_channels * cv * kq, T(0));
  for (std::size_t co = 0; co < c.out_channels; ++co)
    for (std::size_t ci = 0; ci < c.in_channels; ++ci)
      for (std::size_t k = 0; k < c.kernel; ++k)
        cache.wq[(co * cv + ci * s + k % s) * kq + k / s] = w[(co * c.in_channels + ci) * c.kernel + k];

  cache.phased.assign(x.batch * cv * tq, T(0));
  for (std::size_t b = 0; b < x.batch; ++b) {
    for (std::size_t ci = 0; ci < c.in_channels; ++ci) {
      const T* src = x.row(b, ci);
      for (std::size_t r = 0; r < s; ++r) {
        T* dst = cache.phased.data() + (b * cv + ci * s + r) * tq;
        for (std::size_t m = 0; m < tq; ++m) {
          const std::size_t j = s * m + r;
          if (j >= c.pad && j - c.pad < len) dst[m] = src[j - c.pad];
        }
      }
    }
  }

  Act<T> y(x.batch, c.out_channels, out_len);
  const kernels::ConvDims dims{c.out_channels, cv, kq, out_len, tq, out_len};
  for (std::size_t b = 0; b < x.batch; ++b) {
    kernels::conv_forward(dims, cache.wq.data(), cache.phased.data() + b * cv * tq, y.row(b, 0));
  }
  return y;
}

// Accumulates the weight gradient into dw and, when dx is non-null, the input
// gradient into *dx (which must be zero-initialized or hold other paths).
template <class T>
void conv_backward(const ConvLayer& c, const ConvCache<T>& cache, const Act<T>& dy, Act<T>* dx, T* dw) {
  const std::size_t s = c.stride, kq = ceil_div(c.kernel, s), cv = c.in_channels * s;
  const std::size_t out_len = dy.length, tq = out_len + kq - 1, len = cache.in_length;
  const kernels::ConvDims dims{c.out_channels, cv, kq, out_len, tq, out_len};

  std::vector<T> dwq(c.out_channels * cv * kq, T(0));
  for (std::size_t b = 0; b < dy.batch; ++b) {
    kernels::conv_weight_grad(dims, dy.row(b, 0), cache.phased.data() + b * cv * tq, dwq.data());
  }
  for (std::size_t co = 0; co < c.out_channels; ++co)
    for (std::size_t ci = 0; ci < c.in_channels; ++ci)
      for (std::size_t k = 0; k < c.kernel; ++k)
        dw[(co * c.in_channels + ci) * c.kernel + k] += dwq[(co * cv + ci * s + k % s) * kq + k / s];

  if (dx == nullptr) return;

  // Transposed correlation: flip taps, swap channel roles, pad dy by kq-1.
  std::vector<T> wt(cv * c.out_channels * kq);
  for (std::size_t co = 0; co < c.out_channels; ++co)
    for (std::size_t v = 0; v < cv; ++v)
      for (std::size_t q = 0; q < kq; ++q)
        wt[(v * c.out_channels + co) * kq + (kq - 1 - q)] = cache.wq[(co * cv + v) * kq + q];
  const std::size_t lp = out_len + 2 * (kq - 1);
  std::vector<T> dyp(c.out_channels * lp);
  std::vector<T> dphase(cv * tq);
  const kernels::ConvDims tdims{cv, c.out_channels, kq, tq, lp, tq};
  for (std::size_t b = 0; b < dy.batch; ++b) {
    std::fill(dyp.begin(), dyp.end(), T(0));
    for (std::size_t co = 0; co < c.out_channels; ++co) {
      std::copy_n(dy.row(b, co), out_len, dyp.data() + co * lp + (kq - 1));
    }
    kernels::conv_forward(tdims, wt.data(), dyp.data(), dphase.data());
    for (std::size_t ci = 0; ci < c.in_channels; ++ci) {
      T* dst = dx->row(b, ci);
      for (std::size_t r = 0; r < s; ++r) {
        const T* src = dphase.data() + (ci * s + r) * tq;
        for (std::size_t m = 0; m < tq; ++m) {
          const std::size_t j = s * m + r;
          if (j >= c.pad && j - c.pad < len) dst[j - c.pad] += src[m];
        }
      }
    }
  }
}

template <class T>
struct NormCache {
  std::vector<T> xhat;
  std::vector<double> inv_std;
  Mode mode = Mode::infer;
};

template <class T>
Act<T> norm_forward(const NormLayer& n, Model<T>& model, const Act<T>& x, ForwardOptions opts,
                    NormCache<T>* cache) {
  const T* gamma = model.params()[n.scale].data.data();
  const T* beta = model.params()[n.offset].data.data();
  T* rmean = model.buffers()[n.mean].data.data();
  T* rvar = model.buffers()[n.var].data.data();
  const std::size_t count = x.batch * x.length;
  Act<T> y(x.batch, x.channels, x.length);
  if (cache) {
    cache->xhat.assign(x.data.size(), T(0));
    cache->inv_std.assign(x.channels, 0.0);
    cache->mode = opts.mode;
  }
  for (std::size_t c = 0; c < x.channels; ++c) {
    double mean, inv;
    if (opts.mode == Mode::train) {
      double sum = 0.0;
      for (std::size_t b = 0; b < x.batch; ++b) {
        const T* r = x.row(b, c);
        for (std::size_t t = 0; t < x.length; ++t) sum += r[t];
      }
      mean = sum / static_cast<double>(count);
      double ss = 0.0;
      for (std::size_t b = 0; b < x.batch; ++b) {
        const T* r = x.row(b, c);
        for (std::size_t t = 0; t < x.length; ++t) ss += (r[t] - mean) * (r[t] - mean);
      }
      const double var = ss / static_cast<double>(count);
      inv = 1.0 / std::sqrt(var + kNormEps);
      if (opts.update_running_stats) {
        const double unbiased = count > 1 ? ss / static_cast<double>(count - 1) : var;
        rmean[c] = static_cast<T>((1.0 - kNormMomentum) * rmean[c] + kNormMomentum * mean);
        rvar[c] = static_cast<T>((1.0 - kNormMomentum) * rvar[c] + kNormMomentum * unbiased);
      }
    } else {
      mean = rmean[c];
      inv = 1.0 / std::sqrt(static_cast<double>(rvar[c]) + kNormEps);
    }
    const T m = static_cast<T>(mean), iv = static_cast<T>(inv), g = gamma[c], o = beta[c];
    for (std::size_t b = 0; b < x.batch; ++b) {
      const T* src = x.row(b, c);
      T* dst = y.row(b, c);
      T* xh = cache ? cache->xhat.data() + (b * x.channels + c) * x.length : nullptr;
      for (std::size_t t = 0; t < x.length; ++t) {
        const T h = (src[t] - m) * iv;
        if (xh) xh[t] = h;
        dst[t] = g * h + o;
      }
    }
    if (cache) cache->inv_std[c] = inv;
  }
  return y;
}

template <class T>
Act<T> norm_backward(const NormLayer& n, const Model<T>& model, const NormCache<T>& cache, const Act<T>& dy,
                     Gradients<T>& grads) {
  const T* gamma = model.params()[n.scale].data.data();
  T* dgamma = grads[n.scale].data();
  T* dbeta = grads[n.offset].data();
  const std::size_t count = dy.batch * dy.length;
  Act<T> dx(dy.batch, dy.channels, dy.length);
  for (std::size_t c = 0; c < dy.channels; ++c) {
    double sum_dy = 0.0, sum_dy_xhat = 0.0;
    for (std::size_t b = 0; b < dy.batch; ++b) {
      const T* g = dy.row(b, c);
      const T* xh = cache.xhat.data() + (b * dy.channels + c) * dy.length;
      for (std::size_t t = 0; t < dy.length; ++t) {
        sum_dy += g[t];
        sum_dy_xhat += static_cast<double>(g[t]) * xh[t];
      }
    }
    dgamma[c] += static_cast<T>(sum_dy_xhat);
    dbeta[c] += static_cast<T>(sum_dy);
    const double k = static_cast<double>(gamma[c]) * cache.inv_std[c];
    for (std::size_t b = 0; b < dy.batch; ++b) {
      const T* g = dy.row(b, c);
      const T* xh = cache.xhat.data() + (b * dy.channels + c) * dy.length;
      T* out = dx.row(b, c);
      if (cache.mode == Mode::train) {
        const double mdy = sum_dy / static_cast<double>(count);
        const double mdx = sum_dy_xhat / static_cast<double>(count);
        for (std::size_t t = 0; t < dy.length; ++t) out[t] = static_cast<T>(k * (g[t] - mdy - xh[t] * mdx));
      } else {
        for (std::size_t t = 0; t < dy.length; ++t) out[t] = static_cast<T>(k * g[t]);
      }
    }
  }
  return dx;
}

template <class T>
void relu_inplace(Act<T>& x, GatePattern* gates) {
  if (gates == nullptr) {
    for (auto& v : x.data) v = v > T(0) ? v : T(0);
    return;
  }
  if (gates->use == GatePattern::Use::record) {
    auto& mask = gates->relu.emplace_back(x.data.size());
    for (std::size_t i = 0; i < x.data.size(); ++i) {
      mask[i] = x.data[i] > T(0);
      if (!mask[i]) x.data[i] = T(0);
    }
    return;
  }
  const auto& mask = gates->relu.at(gates->relu_cursor++);
  for (std::size_t i = 0; i < x.data.size(); ++i)
    if (!mask[i]) x.data[i] = T(0);
}

// dy *= (y > 0), where y is the ReLU output.
template <class T>
void relu_backward_inplace(const Act<T>& y, Act<T>& dy) {
  for (std::size_t i = 0; i < dy.data.size(); ++i)
    if (!(y.data[i] > T(0))) dy.data[i] = T(0);
}

// Max pooling, kernel 3, stride 2, padding 1.
template <class T>
Act<T> maxpool_forward(const Act<T>& x, std::vector<std::uint32_t>* argmax, GatePattern* gates) {
  const std::size_t out_len = (x.length + 2 - 3) / 2 + 1;
  Act<T> y(x.batch, x.channels, out_len);
  if (argmax) argmax->assign(y.data.size(), 0);
  if (gates && gates->use == GatePattern::Use::replay) {
    const auto& winners = gates->pool.at(gates->pool_cursor++);
    for (std::size_t b = 0; b < x.batch; ++b)
      for (std::size_t c = 0; c < x.channels; ++c)
        for (std::size_t t = 0; t < out_len; ++t) {
          const std::size_t i = (b * x.channels + c) * out_len + t;
          y.row(b, c)[t] = x.row(b, c)[winners[i]];
          if (argmax) (*argmax)[i] = winners[i];
        }
    return y;
  }
  for (std::size_t b = 0; b < x.batch; ++b) {
    for (std::size_t c = 0; c < x.channels; ++c) {
      const T* src = x.row(b, c);
      T* dst = y.row(b, c);
      for (std::size_t t = 0; t < out_len; ++t) {
        const std::size_t lo = 2 * t == 0 ? 0 : 2 * t - 1;
        const std::size_t hi = std::min(2 * t + 1, x.length - 1);
        std::size_t best = lo;
        for (std::size_t j = lo + 1; j <= hi; ++j)
          if (src[j] > src[best]) best = j;
        dst[t] = src[best];
        if (argmax) (*argmax)[(b * x.channels + c) * out_len + t] = static_cast<std::uint32_t>(best);
      }
    }
  }
  if (gates) gates->pool.push_back(argmax ? *argmax : std::vector<std::uint32_t>{});
  return y;
}

template <class T>
Act<T> maxpool_backward(const Act<T>& dy, const std::vector<std::uint32_t>& argmax, std::size_t in_length) {
  Act<T> dx(dy.batch, dy.channels, in_length);
  for (std::size_t b = 0; b < dy.batch; ++b)
    for (std::size_t c = 0; c < dy.channels; ++c) {
      const T* g = dy.row(b, c);
      T* out = dx.row(b, c);
      const std::uint32_t* am = argmax.data() + (b * dy.channels + c) * dy.length;
      for (std::size_t t = 0; t < dy.length; ++t) out[am[t]] += g[t];
    }
  return dx;
}

template <class T>
struct BlockCache {
  ConvCache<T> conv1, conv2, down;
  NormCache<T> norm1, norm2, down_norm;
  Act<T> a1;   // relu(norm1(conv1(x)))
  Act<T> out;  // relu(norm2(conv2(a1)) + shortcut)
  std::size_t in_channels = 0, in_length = 0;
};

template <class T>
struct Tape {
  ConvCache<T> stem;
  NormCache<T> stem_norm;
  Act<T> stem_act;
  std::vector<std::uint32_t> pool_argmax;
  std::vector<BlockCache<T>> blocks;
  std::size_t last_length = 0;
  std::size_t batch = 0;
};

template <class T>
Act<T> block_forward(const ResidualBlock& blk, Model<T>& model, const Act<T>& x, ForwardOptions opts,
                     BlockCache<T>& cache) {
  const auto& P = model.params();
  Act<T> h = conv_forward(blk.conv1, P[blk.conv1.weight].data.data(), x, cache.conv1);
  cache.a1 = norm_forward(blk.norm1, model, h, opts, &cache.norm1);
  relu_inplace(cache.a1, opts.gates);
  h = conv_forward(blk.conv2, P[blk.conv2.weight].data.data(), cache.a1, cache.conv2);
  Act<T> y = norm_forward(blk.norm2, model, h, opts, &cache.norm2);
  if (blk.down) {
    Act<T> sc = conv_forward(*blk.down, P[blk.down->weight].data.data(), x, cache.down);
    sc = norm_forward(*blk.down_norm, model, sc, opts, &cache.down_norm);
    for (std::size_t i = 0; i < y.data.size(); ++i) y.data[i] += sc.data[i];
  } else {
    for (std::size_t i = 0; i < y.data.size(); ++i) y.data[i] += x.data[i];
  }
  relu_inplace(y, opts.gates);
  cache.in_channels = x.channels;
  cache.in_length = x.length;
  cache.out = y;
  return y;
}

template <class T>
Act<T> block_backward(const ResidualBlock& blk, const Model<T>& model, BlockCache<T>& cache, Act<T> dy,
                      Gradients<T>& grads) {
  relu_backward_inplace(cache.out, dy);
  Act<T> dx(dy.batch, cache.in_channels, cache.in_length);
  Act<T> dh = norm_backward(blk.norm2, model, cache.norm2, dy, grads);
  Act<T> da1(dy.batch, blk.conv2.in_channels, cache.a1.length);
  conv_backward(blk.conv2, cache.conv2, dh, &da1, grads[blk.conv2.weight].data());
  relu_backward_inplace(cache.a1, da1);
  dh = norm_backward(blk.norm1, model, cache.norm1, da1, grads);
  conv_backward(blk.conv1, cache.conv1, dh, &dx, grads[blk.conv1.weight].data());
  if (blk.down) {
    Act<T> dsc = norm_backward(*blk.down_norm, model, cache.down_norm, dy, grads);
    conv_backward(*blk.down, cache.down, dsc, &dx, grads[blk.down->weight].data());
  } else {
    for (std::size_t i = 0; i < dx.data.size(); ++i) dx.data[i] += dy.data[i];
  }
  return dx;
}

template <class T>
std::vector<T> encoder_forward(Model<T>& model, std::span<const T> batch, std::size_t batch_size,
                               ForwardOptions opts, Tape<T>* tape) {
  const EncoderConfig& cfg = model.config().encoder;
  const std::size_t per = cfg.in_leads * cfg.input_length;
  if (batch_size == 0 || batch.size() != batch_size * per) {
    throw UsageError("encoder input has " + std::to_string(batch.size()) + " values, expected " +
                     std::to_string(batch_size) + " x " + std::to_string(cfg.in_leads) + " x " +
                     std::to_string(cfg.input_length));
  }
  const Topology& topo = model.topology();
  Tape<T> local;
  Tape<T>& tp = tape ? *tape : local;
  tp.batch = batch_size;
  if (opts.gates) {
    if (opts.gates->use == GatePattern::Use::record) {
      opts.gates->relu.clear();
      opts.gates->pool.clear();
    }
    opts.gates->relu_cursor = 0;
    opts.gates->pool_cursor = 0;
  }

  Act<T> x(batch_size, cfg.in_leads, cfg.input_length);
  std::copy(batch.begin(), batch.end(), x.data.begin());
  for (std::size_t b = 0; b < batch_size; ++b) {
    standardize_leads<T>({x.row(b, 0), per}, cfg.in_leads, cfg.input_length);
  }

  Act<T> h = conv_forward(topo.stem, model.params()[topo.stem.weight].data.data(), x, tp.stem);
  x = {};
  tp.stem_act = norm_forward(topo.stem_norm, model, h, opts, &tp.stem_norm);
  relu_inplace(tp.stem_act, opts.gates);
  h = maxpool_forward(tp.stem_act, &tp.pool_argmax, opts.gates);

  tp.blocks.resize(topo.blocks.size());
  for (std::size_t i = 0; i < topo.blocks.size(); ++i) h = block_forward(topo.blocks[i], model, h, opts, tp.blocks[i]);

  tp.last_length = h.length;
  std::vector<T> features(batch_size * h.channels);
  for (std::size_t b = 0; b < batch_size; ++b)
    for (std::size_t c = 0; c < h.channels; ++c) {
      const T* r = h.row(b, c);
      double s = 0.0;
      for (std::size_t t = 0; t < h.length; ++t) s += r[t];
      features[b * h.channels + c] = static_cast<T>(s / static_cast<double>(h.length));
    }
  return features;
}

template <class T>
void encoder_backward(const Model<T>& model, Tape<T>& tp, std::span<const T> d_features, Gradients<T>& grads) {
  const Topology& topo = model.topology();
  const std::size_t f = model.config().encoder.feature_dim();
  Act<T> dh(tp.batch, f, tp.last_length);
  const T inv_len = static_cast<T>(1.0 / static_cast<double>(tp.last_length));
  for (std::size_t b = 0; b < tp.batch; ++b)
    for (std::size_t c = 0; c < f; ++c) std::fill_n(dh.row(b, c), tp.last_length, d_features[b * f + c] * inv_len);

  for (std::size_t i = topo.blocks.size(); i-- > 0;) dh = block_backward(topo.blocks[i], model, tp.blocks[i], std::move(dh), grads);

  dh = maxpool_backward(dh, tp.pool_argmax, tp.stem_act.length);
  relu_backward_inplace(tp.stem_act, dh);
  dh = norm_backward(topo.stem_norm, model, tp.stem_norm, dh, grads);
  conv_backward<T>(topo.stem, tp.stem, dh, nullptr, grads[topo.stem.weight].data());
}

template <class T>
Matrix to_matrix(const std::vector<T>& v, std::size_t rows, std::size_t cols) {
  Matrix m(rows, cols);
  for (std::size_t i = 0; i < v.size(); ++i) m.data[i] = static_cast<double>(v[i]);
  return m;
}

// Gradients of y = W^T x + b for all rows: dW += x^T dy, db += sum dy, and
// optionally dx = dy W^T.
template <class T>
void head_backward(const ProjectionHead<T>& head, std::span<const T> x, const Matrix& dy, std::size_t rows,
                   T* dw, T* db, std::vector<T>* dx) {
  std::vector<T> g(head.out_dim);
  if (dx) dx->assign(rows * head.in_dim, T(0));
  for (std::size_t r = 0; r < rows; ++r) {
    for (std::size_t j = 0; j < head.out_dim; ++j) {
      g[j] = static_cast<T>(dy(r, j));
      db[j] += g[j];
    }
    const T* in = x.data() + r * head.in_dim;
    for (std::size_t i = 0; i < head.in_dim; ++i) {
      kernels::axpy(in[i], g.data(), dw + i * head.out_dim, head.out_dim);
      if (dx) (*dx)[r * head.in_dim + i] = kernels::dot(head.weight.data() + i * head.out_dim, g.data(), head.out_dim);
    }
  }
}

}  // namespace

namespace {

std::string describe_similarity(const Matrix& s, double tau) {
  double lo = INFINITY, hi = -INFINITY, sum = 0.0;
  std::size_t bad = 0;
  for (double v : s.data) {
    if (!std::isfinite(v)) {
      ++bad;
      continue;
    }
    lo = std::min(lo, v);
    hi = std::max(hi, v);
    sum += v;
  }
  const std::size_t good = s.data.size() - bad;
  char buf[200];
  std::snprintf(buf, sizeof buf, "similarity %zux%zu: min %.6g max %.6g mean %.6g, %zu non-finite; tau %.6g", s.rows,
                s.cols, lo, hi, good ? sum / double(good) : NAN, bad, tau);
  return buf;
}

}  // namespace

template <class T>
std::vector<T> encode(Model<T>& model, std::span<const T> batch, std::size_t batch_size, ForwardOptions opts) {
  return encoder_forward<T>(model, batch, batch_size, opts, nullptr);
}

template <class T>
StepLoss contrastive_step(Model<T>& model, std::span<const T> batch, std::size_t batch_size,
                          std::span<const T> text_vectors, ForwardOptions opts, Gradients<T>* grads) {
  const ModelConfig& cfg = model.config();
  if (text_vectors.size() != batch_size * cfg.text_dim) {
    throw UsageError("text vectors have " + std::to_string(text_vectors.size()) + " values, expected " +
                     std::to_string(batch_size) + " x " + std::to_string(cfg.text_dim));
  }
  Tape<T> tape;
  const std::vector<T> features = encoder_forward<T>(model, batch, batch_size, opts, grads ? &tape : nullptr);
  const auto ecg_head = model.ecg_head();
  const auto text_head = model.text_head();
  const std::size_t p = cfg.projection_dim;
  const Matrix e = to_matrix(project<T>(ecg_head, features, batch_size), batch_size, p);
  const Matrix t = to_matrix(project<T>(text_head, text_vectors, batch_size), batch_size, p);
  const double tau = std::exp(static_cast<double>(model.log_tau()));

  StepLoss out;
  out.tau = tau;
  out.similarity = similarity_matrix(t, e);
  if (!grads) {
    out.loss = total_loss(out.similarity, tau);
    return out;
  }
  LossGradient lg;
  try {
    lg = total_loss_gradient(out.similarity, tau);
  } catch (const NumericError& e) {
    throw NumericError(std::string(e.what()) + "; " + describe_similarity(out.similarity, tau));
  }
  out.loss = lg.loss;
  if (!std::isfinite(out.loss)) {
    throw NumericError("non-finite contrastive loss; " + describe_similarity(out.similarity, tau));
  }

  Matrix d_text, d_ecg;
  similarity_backward(t, e, out.similarity, lg.d_similarity, d_text, d_ecg);
  const Topology& topo = model.topology();
  Gradients<T>& g = *grads;
  g[topo.log_tau][0] += static_cast<T>(lg.d_log_tau);
  head_backward<T>(text_head, text_vectors, d_text, batch_size, g[topo.text_weight].data(),
                   g[topo.text_bias].data(), nullptr);
  std::vector<T> d_features;
  head_backward<T>(ecg_head, features, d_ecg, batch_size, g[topo.ecg_weight].data(), g[topo.ecg_bias].data(),
                   &d_features);
  encoder_backward<T>(model, tape, d_features, g);
  return out;
}

template class Model<float>;
template class Model<double>;
template Model<double> Model<float>::convert<double>() const;
template Model<float> Model<double>::convert<float>() const;
template Model<float> Model<float>::convert<float>() const;
template Model<double> Model<double>::convert<double>() const;
template std::vector<float> project<float>(const ProjectionHead<float>&, std::span<const float>, std::size_t);
template std::vector<double> project<double>(const ProjectionHead<double>&, std::span<const double>, std::size_t);
template void standardize_leads<float>(std::span<float>, std::size_t, std::size_t);
template void standardize_leads<double>(std::span<double>, std::size_t, std::size_t);
template std::vector<float> encode<float>(Model<float>&, std::span<const float>, std::size_t, ForwardOptions);
template std::vector<double> encode<double>(Model<double>&, std::span<const double>, std::size_t, ForwardOptions);
template StepLoss contrastive_step<float>(Model<float>&, std::span<const float>, std::size_t, std::span<const float>,
                                          ForwardOptions, Gradients<float>*);
template StepLoss contrastive_step<double>(Model<double>&, std::span<const double>, std::size_t,
                                           std::span<const double>, ForwardOptions, Gradients<double>*);

}  // namespace ecgclip
