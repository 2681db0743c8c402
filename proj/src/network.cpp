#include "parawidth/network.hpp"

#include <algorithm>
#include <cmath>
#include <cstring>
#include <istream>
#include <limits>
#include <ostream>
#include <random>

#include "parawidth/errors.hpp"
#include "parawidth/kernels.hpp"

namespace parawidth {

ChannelPlan masked_plan(const Architecture& arch, std::span<const WidthConfig> part_configs,
                        int batch) {
  const int n = static_cast<int>(part_configs.size());
  if (n < 1) throw PartitionError("partition needs at least one part");
  if (batch < 1 || batch % n != 0) {
    throw PartitionError("batch size " + std::to_string(batch) + " is not divisible by " +
                         std::to_string(n) + " parts");
  }
  for (const auto& cfg : part_configs) validate(arch.space, cfg);
  ChannelPlan plan;
  plan.parts = n;
  plan.rows_per_part = batch / n;
  plan.channels.resize(arch.nodes.size());
  plan.part_widths.resize(arch.nodes.size());
  for (std::size_t i = 0; i < arch.nodes.size(); ++i) {
    const int wl = arch.nodes[i].width_layer;
    plan.channels[i] = arch.max_channels(static_cast<int>(i));
    for (const auto& cfg : part_configs) {
      plan.part_widths[i].push_back(wl < 0 ? arch.input_channels : cfg.widths[static_cast<std::size_t>(wl)]);
    }
  }
  return plan;
}

ChannelPlan sliced_plan(const Architecture& arch, const WidthConfig& config) {
  validate(arch.space, config);
  ChannelPlan plan;
  plan.channels.resize(arch.nodes.size());
  for (std::size_t i = 0; i < arch.nodes.size(); ++i) {
    const int wl = arch.nodes[i].width_layer;
    plan.channels[i] = wl < 0 ? arch.input_channels : config.widths[static_cast<std::size_t>(wl)];
  }
  return plan;
}

template <typename T>
void mask_row_blocks(Tensor<T>& t, int rows_per_part, std::span<const int> widths) {
  const std::size_t plane = t.plane();
  for (std::size_t part = 0; part < widths.size(); ++part) {
    const int active = widths[part];
    if (active >= t.c()) continue;
    const int r0 = static_cast<int>(part) * rows_per_part;
    for (int r = r0; r < r0 + rows_per_part; ++r) {
      std::fill(t.channel(r, active), t.sample(r) + t.sample_stride(), T(0));
    }
  }
  (void)plane;
}

void BnMoments::merge(int node, int channel, std::int64_t n, double batch_mean, double batch_m2) {
  auto& mu = mean[static_cast<std::size_t>(node)][static_cast<std::size_t>(channel)];
  auto& acc = m2[static_cast<std::size_t>(node)][static_cast<std::size_t>(channel)];
  // count is per node and is advanced by the caller after all channels merge.
  const double n_a = static_cast<double>(count[static_cast<std::size_t>(node)]);
  const double n_b = static_cast<double>(n);
  const double total = n_a + n_b;
  const double delta = batch_mean - mu;
  mu += delta * n_b / total;
  acc += batch_m2 + delta * delta * n_a * n_b / total;
}

namespace {

int pooled_extent(int in, int kernel, int stride, int pad) {
  return (in + 2 * pad - kernel) / stride + 1;
}

template <typename T>
void im2col(const T* x, int c, int h, int w, int kh, int kw, int stride, int pad, int oh, int ow,
            T* col) {
  const int plane = oh * ow;
  for (int ci = 0; ci < c; ++ci) {
    const T* xc = x + static_cast<std::size_t>(ci) * h * w;
    for (int ky = 0; ky < kh; ++ky) {
      for (int kx = 0; kx < kw; ++kx) {
        T* row = col + static_cast<std::size_t>((ci * kh + ky) * kw + kx) * plane;
        for (int oy = 0; oy < oh; ++oy) {
          const int iy = oy * stride - pad + ky;
          T* dst = row + oy * ow;
          if (iy < 0 || iy >= h) {
            std::fill(dst, dst + ow, T(0));
            continue;
          }
          const T* src = xc + iy * w;
          for (int ox = 0; ox < ow; ++ox) {
            const int ix = ox * stride - pad + kx;
            dst[ox] = (ix >= 0 && ix < w) ? src[ix] : T(0);
          }
        }
      }
    }
  }
}

template <typename T>
void col2im_add(const T* col, int c, int h, int w, int kh, int kw, int stride, int pad, int oh,
                int ow, T* x) {
  const int plane = oh * ow;
  for (int ci = 0; ci < c; ++ci) {
    T* xc = x + static_cast<std::size_t>(ci) * h * w;
    for (int ky = 0; ky < kh; ++ky) {
      for (int kx = 0; kx < kw; ++kx) {
        const T* row = col + static_cast<std::size_t>((ci * kh + ky) * kw + kx) * plane;
        for (int oy = 0; oy < oh; ++oy) {
          const int iy = oy * stride - pad + ky;
          if (iy < 0 || iy >= h) continue;
          const T* src = row + oy * ow;
          T* dst = xc + iy * w;
          for (int ox = 0; ox < ow; ++ox) {
            const int ix = ox * stride - pad + kx;
            if (ix >= 0 && ix < w) dst[ix] += src[ox];
          }
        }
      }
    }
  }
}

template <typename T>
void relu_inplace(Tensor<T>& t) {
  for (T& v : t.values()) v = v < T(0) ? T(0) : v;
}

template <typename T>
void relu_backward(Tensor<T>& dy, const Tensor<T>& out) {
  auto g = dy.values();
  auto o = out.values();
  for (std::size_t i = 0; i < g.size(); ++i) {
    if (!(o[i] > T(0))) g[i] = T(0);
  }
}

template <typename T>
void add_into(Tensor<T>& dst, const Tensor<T>& src) {
  auto d = dst.values();
  auto s = src.values();
  for (std::size_t i = 0; i < d.size(); ++i) d[i] += s[i];
}

// Input-channel count of the full weight tensor of a parametric layer.
int full_fan_in_channels(const Architecture& arch, const LayerSpec& spec) {
  return spec.source < 0 ? arch.input_channels : arch.space.layer(spec.source).max_out_channels;
}

}  // namespace

template <typename T>
Network<T>::Network(Architecture arch, std::uint64_t seed) : arch_(std::move(arch)) {
  init_params(seed);
}

template <typename T>
void Network<T>::init_params(std::uint64_t seed) {
  Rng rng(seed);
  node_params_.assign(arch_.nodes.size(), NodeParams{});
  running_mean_.assign(arch_.nodes.size(), {});
  running_var_.assign(arch_.nodes.size(), {});
  params_.clear();
  auto add_param = [this](std::string name, std::size_t size, bool decay) {
    Param<T> p;
    p.name = std::move(name);
    p.value.assign(size, T(0));
    p.grad.assign(size, T(0));
    p.decay = decay;
    params_.push_back(std::move(p));
    return static_cast<int>(params_.size()) - 1;
  };
  for (std::size_t i = 0; i < arch_.nodes.size(); ++i) {
    const Node& node = arch_.nodes[i];
    if (node.layer < 0) continue;
    const LayerSpec& spec = arch_.space.layer(node.layer);
    const int co = spec.max_out_channels;
    NodeParams& np = node_params_[i];
    switch (node.kind) {
      case NodeKind::kConv: {
        const int ci = full_fan_in_channels(arch_, spec);
        const std::size_t taps = static_cast<std::size_t>(spec.kernel_h) * spec.kernel_w;
        np.weight = add_param(node.name + ".weight", static_cast<std::size_t>(co) * ci * taps, true);
        std::normal_distribution<double> dist(0.0, std::sqrt(2.0 / (static_cast<double>(co) * taps)));
        for (T& v : params_[static_cast<std::size_t>(np.weight)].value) v = static_cast<T>(dist(rng));
        break;
      }
      case NodeKind::kDepthwise: {
        const std::size_t taps = static_cast<std::size_t>(spec.kernel_h) * spec.kernel_w;
        np.weight = add_param(node.name + ".weight", static_cast<std::size_t>(co) * taps, true);
        std::normal_distribution<double> dist(0.0, std::sqrt(2.0 / static_cast<double>(taps)));
        for (T& v : params_[static_cast<std::size_t>(np.weight)].value) v = static_cast<T>(dist(rng));
        break;
      }
      case NodeKind::kLinear: {
        const std::size_t fan_in =
            static_cast<std::size_t>(full_fan_in_channels(arch_, spec)) * spec.in_h * spec.in_w;
        np.weight = add_param(node.name + ".weight", static_cast<std::size_t>(co) * fan_in, true);
        const double bound = 1.0 / std::sqrt(static_cast<double>(fan_in));
        std::uniform_real_distribution<double> dist(-bound, bound);
        for (T& v : params_[static_cast<std::size_t>(np.weight)].value) v = static_cast<T>(dist(rng));
        np.bias = add_param(node.name + ".bias", static_cast<std::size_t>(co), false);
        break;
      }
      default:
        break;
    }
    if (node.batch_norm) {
      np.gamma = add_param(node.name + ".bn.gamma", static_cast<std::size_t>(co), false);
      std::fill(params_[static_cast<std::size_t>(np.gamma)].value.begin(),
                params_[static_cast<std::size_t>(np.gamma)].value.end(), T(1));
      np.beta = add_param(node.name + ".bn.beta", static_cast<std::size_t>(co), false);
      running_mean_[i].assign(static_cast<std::size_t>(co), T(0));
      running_var_[i].assign(static_cast<std::size_t>(co), T(1));
    }
  }
}

template <typename T>
void Network<T>::zero_grad() {
  for (auto& p : params_) std::fill(p.grad.begin(), p.grad.end(), T(0));
}

template <typename T>
std::int64_t Network<T>::weight_count() const {
  std::int64_t total = 0;
  for (const auto& np : node_params_) {
    if (np.weight >= 0) total += static_cast<std::int64_t>(params_[static_cast<std::size_t>(np.weight)].value.size());
  }
  return total;
}

template <typename T>
ForwardTrace<T> Network<T>::forward(const Tensor<T>& input, const ChannelPlan& plan, BnUsage bn,
                                    BnMoments* moments) {
  const std::size_t num_nodes = arch_.nodes.size();
  if (plan.channels.size() != num_nodes) throw DimensionError("channel plan does not match architecture");
  if (input.c() != arch_.input_channels) {
    throw DimensionError("input has " + std::to_string(input.c()) + " channels, network expects " +
                         std::to_string(arch_.input_channels));
  }
  const int batch = input.n();
  if (plan.masked() && batch != plan.parts * plan.rows_per_part) {
    throw DimensionError("input batch " + std::to_string(batch) + " does not match partition of " +
                         std::to_string(plan.parts * plan.rows_per_part) + " rows");
  }
  if (moments && moments->empty()) {
    moments->mean.assign(num_nodes, {});
    moments->m2.assign(num_nodes, {});
    moments->count.assign(num_nodes, 0);
  }

  ForwardTrace<T> trace;
  trace.input = &input;
  trace.bn = bn;
  trace.nodes.resize(num_nodes);

  for (std::size_t i = 0; i < num_nodes; ++i) {
    const Node& node = arch_.nodes[i];
    NodeCache<T>& cache = trace.nodes[i];
    const int in0 = node.inputs.front();
    const Tensor<T>& x = in0 < 0 ? input : trace.nodes[static_cast<std::size_t>(in0)].out;
    const int co = plan.channels[i];
    const NodeParams& np = node_params_[i];

    switch (node.kind) {
      case NodeKind::kConv: {
        const LayerSpec& spec = arch_.space.layer(node.layer);
        const int ci = x.c();
        const int ci_full = full_fan_in_channels(arch_, spec);
        if (ci > ci_full || co > spec.max_out_channels) throw DimensionError("layer '" + node.name + "': channel overflow");
        const int kh = node.kernel_h, kw = node.kernel_w;
        const int oh = pooled_extent(x.h(), kh, node.stride, node.padding);
        const int ow = pooled_extent(x.w(), kw, node.stride, node.padding);
        Tensor<T> z(batch, co, oh, ow);
        const T* weight = params_[static_cast<std::size_t>(np.weight)].value.data();
        const std::ptrdiff_t ldw = static_cast<std::ptrdiff_t>(ci_full) * kh * kw;
        const int k = ci * kh * kw;
        const int pixels = oh * ow;
        const bool direct = kh == 1 && kw == 1 && node.stride == 1 && node.padding == 0;
        std::vector<T> col(direct ? 0 : static_cast<std::size_t>(k) * pixels);
        for (int n = 0; n < batch; ++n) {
          const T* src = x.sample(n);
          if (!direct) {
            im2col(src, ci, x.h(), x.w(), kh, kw, node.stride, node.padding, oh, ow, col.data());
            src = col.data();
          }
          kernels::gemm<T>(co, pixels, k, weight, ldw, 1, src, pixels, z.sample(n), pixels, false);
        }
        cache.out = std::move(z);
        break;
      }
      case NodeKind::kDepthwise: {
        if (x.c() != co) throw DimensionError("layer '" + node.name + "': depthwise width mismatch");
        const int kh = node.kernel_h, kw = node.kernel_w;
        const int oh = pooled_extent(x.h(), kh, node.stride, node.padding);
        const int ow = pooled_extent(x.w(), kw, node.stride, node.padding);
        Tensor<T> z(batch, co, oh, ow);
        const T* weight = params_[static_cast<std::size_t>(np.weight)].value.data();
        for (int n = 0; n < batch; ++n) {
          for (int c = 0; c < co; ++c) {
            const T* xc = x.channel(n, c);
            const T* wc = weight + static_cast<std::size_t>(c) * kh * kw;
            T* zc = z.channel(n, c);
            for (int oy = 0; oy < oh; ++oy) {
              for (int ox = 0; ox < ow; ++ox) {
                T acc = 0;
                for (int ky = 0; ky < kh; ++ky) {
                  const int iy = oy * node.stride - node.padding + ky;
                  if (iy < 0 || iy >= x.h()) continue;
                  for (int kx = 0; kx < kw; ++kx) {
                    const int ix = ox * node.stride - node.padding + kx;
                    if (ix < 0 || ix >= x.w()) continue;
                    acc += xc[iy * x.w() + ix] * wc[ky * kw + kx];
                  }
                }
                zc[oy * ow + ox] = acc;
              }
            }
          }
        }
        cache.out = std::move(z);
        break;
      }
      case NodeKind::kLinear: {
        const LayerSpec& spec = arch_.space.layer(node.layer);
        if (x.h() * x.w() != spec.in_h * spec.in_w) {
          throw DimensionError("layer '" + node.name + "': input spatial size differs from the reference");
        }
        const int features = static_cast<int>(x.sample_stride());
        const std::ptrdiff_t ldw = static_cast<std::ptrdiff_t>(full_fan_in_channels(arch_, spec)) * spec.in_h * spec.in_w;
        Tensor<T> z(batch, co, 1, 1);
        kernels::gemm_bt<T>(batch, co, features, x.data(), features,
                            params_[static_cast<std::size_t>(np.weight)].value.data(), ldw, z.data(), co, false);
        const T* bias = params_[static_cast<std::size_t>(np.bias)].value.data();
        for (int n = 0; n < batch; ++n) {
          T* row = z.sample(n);
          for (int c = 0; c < co; ++c) row[c] += bias[c];
        }
        cache.out = std::move(z);
        break;
      }
      case NodeKind::kAdd: {
        Tensor<T> sum = x;
        for (std::size_t j = 1; j < node.inputs.size(); ++j) {
          const int in = node.inputs[j];
          const Tensor<T>& other = in < 0 ? input : trace.nodes[static_cast<std::size_t>(in)].out;
          if (other.shape() != sum.shape()) {
            throw DimensionError("layer '" + node.name + "': add inputs " + sum.shape_string() + " vs " +
                                 other.shape_string());
          }
          add_into(sum, other);
        }
        cache.out = std::move(sum);
        break;
      }
      case NodeKind::kMaxPool: {
        const int oh = pooled_extent(x.h(), node.kernel_h, node.stride, node.padding);
        const int ow = pooled_extent(x.w(), node.kernel_w, node.stride, node.padding);
        Tensor<T> z(batch, x.c(), oh, ow);
        cache.argmax.assign(z.size(), 0);
        std::size_t o = 0;
        for (int n = 0; n < batch; ++n) {
          for (int c = 0; c < x.c(); ++c) {
            const T* xc = x.channel(n, c);
            for (int oy = 0; oy < oh; ++oy) {
              for (int ox = 0; ox < ow; ++ox, ++o) {
                T best = -std::numeric_limits<T>::infinity();
                int best_at = -1;
                for (int ky = 0; ky < node.kernel_h; ++ky) {
                  const int iy = oy * node.stride - node.padding + ky;
                  if (iy < 0 || iy >= x.h()) continue;
                  for (int kx = 0; kx < node.kernel_w; ++kx) {
                    const int ix = ox * node.stride - node.padding + kx;
                    if (ix < 0 || ix >= x.w()) continue;
                    const T v = xc[iy * x.w() + ix];
                    if (best_at < 0 || v > best) {
                      best = v;
                      best_at = iy * x.w() + ix;
                    }
                  }
                }
                z.data()[o] = best;
                cache.argmax[o] = best_at;
              }
            }
          }
        }
        cache.out = std::move(z);
        break;
      }
      case NodeKind::kAvgPool: {
        Tensor<T> z(batch, x.c(), 1, 1);
        const std::size_t plane = x.plane();
        for (int n = 0; n < batch; ++n) {
          for (int c = 0; c < x.c(); ++c) {
            const T* xc = x.channel(n, c);
            T acc = 0;
            for (std::size_t s = 0; s < plane; ++s) acc += xc[s];
            z.sample(n)[c] = acc / static_cast<T>(plane);
          }
        }
        cache.out = std::move(z);
        break;
      }
    }

    Tensor<T>& out = cache.out;
    const bool parametric = node.layer >= 0;
    if (parametric && plan.masked()) mask_row_blocks(out, plan.rows_per_part, plan.part_widths[i]);

    if (node.batch_norm) {
      const int channels = out.c();
      const std::size_t plane = out.plane();
      const double m = static_cast<double>(batch) * static_cast<double>(plane);
      cache.xhat = Tensor<T>(batch, channels, out.h(), out.w());
      cache.inv_std.assign(static_cast<std::size_t>(channels), T(0));
      const T* gamma = params_[static_cast<std::size_t>(np.gamma)].value.data();
      const T* beta = params_[static_cast<std::size_t>(np.beta)].value.data();
      auto& rmean = running_mean_[i];
      auto& rvar = running_var_[i];
      if (moments && moments->mean[i].empty()) {
        moments->mean[i].assign(static_cast<std::size_t>(channels), 0.0);
        moments->m2[i].assign(static_cast<std::size_t>(channels), 0.0);
      }
      if (moments && static_cast<int>(moments->mean[i].size()) < channels) {
        throw CalibrationError("batch-norm width changed during calibration");
      }
      for (int c = 0; c < channels; ++c) {
        double mean = 0.0, var = 0.0;
        if (bn == BnUsage::kRunning) {
          mean = static_cast<double>(rmean[static_cast<std::size_t>(c)]);
          var = static_cast<double>(rvar[static_cast<std::size_t>(c)]);
        } else {
          double sum = 0.0;
          for (int n = 0; n < batch; ++n) {
            const T* oc = out.channel(n, c);
            for (std::size_t s = 0; s < plane; ++s) sum += static_cast<double>(oc[s]);
          }
          mean = sum / m;
          double ss = 0.0;
          for (int n = 0; n < batch; ++n) {
            const T* oc = out.channel(n, c);
            for (std::size_t s = 0; s < plane; ++s) {
              const double d = static_cast<double>(oc[s]) - mean;
              ss += d * d;
            }
          }
          var = ss / m;
          if (moments) moments->merge(static_cast<int>(i), c, static_cast<std::int64_t>(m), mean, ss);
          if (bn == BnUsage::kBatchMomentum) {
            auto& rm = rmean[static_cast<std::size_t>(c)];
            auto& rv = rvar[static_cast<std::size_t>(c)];
            rm = static_cast<T>((1.0 - kBnMomentum) * static_cast<double>(rm) + kBnMomentum * mean);
            rv = static_cast<T>((1.0 - kBnMomentum) * static_cast<double>(rv) + kBnMomentum * var);
          }
        }
        const T mean_t = static_cast<T>(mean);
        const T inv = static_cast<T>(1.0 / std::sqrt(var + kBnEps));
        cache.inv_std[static_cast<std::size_t>(c)] = inv;
        const T g = gamma[c], b = beta[c];
        for (int n = 0; n < batch; ++n) {
          T* oc = out.channel(n, c);
          T* xc = cache.xhat.channel(n, c);
          for (std::size_t s = 0; s < plane; ++s) {
            const T xh = (oc[s] - mean_t) * inv;
            xc[s] = xh;
            oc[s] = g * xh + b;
          }
        }
      }
      if (moments && bn != BnUsage::kRunning) moments->count[i] += static_cast<std::int64_t>(m);
      if (plan.masked()) mask_row_blocks(out, plan.rows_per_part, plan.part_widths[i]);
    }
    if (node.relu) relu_inplace(out);
  }
  return trace;
}

template <typename T>
void Network<T>::backward(ForwardTrace<T>& trace, const Tensor<T>& dlogits, const ChannelPlan& plan) {
  const std::size_t num_nodes = arch_.nodes.size();
  if (trace.nodes.size() != num_nodes || trace.input == nullptr) {
    throw DimensionError("forward trace does not belong to this network");
  }
  if (dlogits.shape() != trace.logits().shape()) throw DimensionError("gradient shape differs from logits");
  const Tensor<T>& input = *trace.input;
  const int batch = input.n();

  std::vector<Tensor<T>> grads(num_nodes);
  grads.back() = dlogits;

  auto grad_for = [&](int in) -> Tensor<T>* {
    if (in < 0) return nullptr;
    Tensor<T>& g = grads[static_cast<std::size_t>(in)];
    if (g.empty()) {
      const Tensor<T>& o = trace.nodes[static_cast<std::size_t>(in)].out;
      g = Tensor<T>(o.n(), o.c(), o.h(), o.w());
    }
    return &g;
  };

  for (std::size_t idx = num_nodes; idx-- > 0;) {
    if (grads[idx].empty()) continue;
    Tensor<T> dy = std::move(grads[idx]);
    const Node& node = arch_.nodes[idx];
    NodeCache<T>& cache = trace.nodes[idx];
    const NodeParams& np = node_params_[idx];
    const int in0 = node.inputs.front();
    const Tensor<T>& x = in0 < 0 ? input : trace.nodes[static_cast<std::size_t>(in0)].out;

    if (node.relu) relu_backward(dy, cache.out);

    if (node.batch_norm) {
      if (plan.masked()) mask_row_blocks(dy, plan.rows_per_part, plan.part_widths[idx]);
      const int channels = dy.c();
      const std::size_t plane = dy.plane();
      const double m = static_cast<double>(batch) * static_cast<double>(plane);
      const T* gamma = params_[static_cast<std::size_t>(np.gamma)].value.data();
      T* dgamma = params_[static_cast<std::size_t>(np.gamma)].grad.data();
      T* dbeta = params_[static_cast<std::size_t>(np.beta)].grad.data();
      for (int c = 0; c < channels; ++c) {
        double sum_dy = 0.0, sum_dy_xh = 0.0;
        for (int n = 0; n < batch; ++n) {
          const T* g = dy.channel(n, c);
          const T* xh = cache.xhat.channel(n, c);
          for (std::size_t s = 0; s < plane; ++s) {
            sum_dy += static_cast<double>(g[s]);
            sum_dy_xh += static_cast<double>(g[s]) * static_cast<double>(xh[s]);
          }
        }
        dgamma[c] += static_cast<T>(sum_dy_xh);
        dbeta[c] += static_cast<T>(sum_dy);
        const double scale = static_cast<double>(gamma[c]) * static_cast<double>(cache.inv_std[static_cast<std::size_t>(c)]);
        for (int n = 0; n < batch; ++n) {
          T* g = dy.channel(n, c);
          const T* xh = cache.xhat.channel(n, c);
          for (std::size_t s = 0; s < plane; ++s) {
            if (trace.bn == BnUsage::kRunning) {
              g[s] = static_cast<T>(scale * static_cast<double>(g[s]));
            } else {
              g[s] = static_cast<T>(scale / m *
                                    (m * static_cast<double>(g[s]) - sum_dy -
                                     static_cast<double>(xh[s]) * sum_dy_xh));
            }
          }
        }
      }
    }
    if (node.layer >= 0 && plan.masked()) mask_row_blocks(dy, plan.rows_per_part, plan.part_widths[idx]);

    switch (node.kind) {
      case NodeKind::kConv: {
        const LayerSpec& spec = arch_.space.layer(node.layer);
        const int ci = x.c();
        const int co = dy.c();
        const int ci_full = full_fan_in_channels(arch_, spec);
        const int kh = node.kernel_h, kw = node.kernel_w;
        const int oh = dy.h(), ow = dy.w();
        const std::ptrdiff_t ldw = static_cast<std::ptrdiff_t>(ci_full) * kh * kw;
        const int k = ci * kh * kw;
        const int pixels = oh * ow;
        const bool direct = kh == 1 && kw == 1 && node.stride == 1 && node.padding == 0;
        const T* weight = params_[static_cast<std::size_t>(np.weight)].value.data();
        T* dweight = params_[static_cast<std::size_t>(np.weight)].grad.data();
        Tensor<T>* dx = grad_for(in0);
        std::vector<T> col(direct ? 0 : static_cast<std::size_t>(k) * pixels);
        std::vector<T> dcol(direct || !dx ? 0 : static_cast<std::size_t>(k) * pixels);
        for (int n = 0; n < batch; ++n) {
          const T* src = x.sample(n);
          if (!direct) {
            im2col(src, ci, x.h(), x.w(), kh, kw, node.stride, node.padding, oh, ow, col.data());
            src = col.data();
          }
          kernels::gemm_bt<T>(co, k, pixels, dy.sample(n), pixels, src, pixels, dweight, ldw, true);
          if (dx) {
            if (direct) {
              kernels::gemm<T>(k, pixels, co, weight, 1, ldw, dy.sample(n), pixels, dx->sample(n), pixels, true);
            } else {
              kernels::gemm<T>(k, pixels, co, weight, 1, ldw, dy.sample(n), pixels, dcol.data(), pixels, false);
              col2im_add(dcol.data(), ci, x.h(), x.w(), kh, kw, node.stride, node.padding, oh, ow, dx->sample(n));
            }
          }
        }
        break;
      }
      case NodeKind::kDepthwise: {
        const int co = dy.c();
        const int kh = node.kernel_h, kw = node.kernel_w;
        const int oh = dy.h(), ow = dy.w();
        const T* weight = params_[static_cast<std::size_t>(np.weight)].value.data();
        T* dweight = params_[static_cast<std::size_t>(np.weight)].grad.data();
        Tensor<T>* dx = grad_for(in0);
        for (int n = 0; n < batch; ++n) {
          for (int c = 0; c < co; ++c) {
            const T* xc = x.channel(n, c);
            const T* wc = weight + static_cast<std::size_t>(c) * kh * kw;
            T* dwc = dweight + static_cast<std::size_t>(c) * kh * kw;
            const T* gc = dy.channel(n, c);
            T* dxc = dx ? dx->channel(n, c) : nullptr;
            for (int oy = 0; oy < oh; ++oy) {
              for (int ox = 0; ox < ow; ++ox) {
                const T g = gc[oy * ow + ox];
                if (g == T(0)) continue;
                for (int ky = 0; ky < kh; ++ky) {
                  const int iy = oy * node.stride - node.padding + ky;
                  if (iy < 0 || iy >= x.h()) continue;
                  for (int kx = 0; kx < kw; ++kx) {
                    const int ix = ox * node.stride - node.padding + kx;
                    if (ix < 0 || ix >= x.w()) continue;
                    dwc[ky * kw + kx] += g * xc[iy * x.w() + ix];
                    if (dxc) dxc[iy * x.w() + ix] += g * wc[ky * kw + kx];
                  }
                }
              }
            }
          }
        }
        break;
      }
      case NodeKind::kLinear: {
        const LayerSpec& spec = arch_.space.layer(node.layer);
        const int co = dy.c();
        const int features = static_cast<int>(x.sample_stride());
        const std::ptrdiff_t ldw = static_cast<std::ptrdiff_t>(full_fan_in_channels(arch_, spec)) * spec.in_h * spec.in_w;
        const T* weight = params_[static_cast<std::size_t>(np.weight)].value.data();
        T* dweight = params_[static_cast<std::size_t>(np.weight)].grad.data();
        T* dbias = params_[static_cast<std::size_t>(np.bias)].grad.data();
        for (int n = 0; n < batch; ++n) {
          const T* g = dy.sample(n);
          for (int c = 0; c < co; ++c) dbias[c] += g[c];
        }
        kernels::gemm<T>(co, features, batch, dy.data(), 1, co, x.data(), features, dweight, ldw, true);
        if (Tensor<T>* dx = grad_for(in0)) {
          kernels::gemm<T>(batch, features, co, dy.data(), co, 1, weight, ldw, dx->data(), features, true);
        }
        break;
      }
      case NodeKind::kAdd: {
        for (int in : node.inputs) {
          if (Tensor<T>* dx = grad_for(in)) add_into(*dx, dy);
        }
        break;
      }
      case NodeKind::kMaxPool: {
        if (Tensor<T>* dx = grad_for(in0)) {
          const std::size_t plane_out = dy.plane();
          std::size_t o = 0;
          for (int n = 0; n < batch; ++n) {
            for (int c = 0; c < dy.c(); ++c) {
              T* dxc = dx->channel(n, c);
              const T* gc = dy.channel(n, c);
              for (std::size_t s = 0; s < plane_out; ++s, ++o) dxc[cache.argmax[o]] += gc[s];
            }
          }
        }
        break;
      }
      case NodeKind::kAvgPool: {
        if (Tensor<T>* dx = grad_for(in0)) {
          const std::size_t plane = dx->plane();
          const T scale = T(1) / static_cast<T>(plane);
          for (int n = 0; n < batch; ++n) {
            for (int c = 0; c < dy.c(); ++c) {
              const T g = dy.sample(n)[c] * scale;
              T* dxc = dx->channel(n, c);
              for (std::size_t s = 0; s < plane; ++s) dxc[s] += g;
            }
          }
        }
        break;
      }
    }
  }
}

namespace {

constexpr char kMagic[8] = {'P', 'W', 'N', 'E', 'T', '0', '0', '1'};

template <typename V>
void write_pod(std::ostream& out, const V& v) {
  out.write(reinterpret_cast<const char*>(&v), sizeof(V));
}

template <typename V>
V read_pod(std::istream& in) {
  V v{};
  in.read(reinterpret_cast<char*>(&v), sizeof(V));
  if (!in) throw ConfigError("truncated network checkpoint");
  return v;
}

template <typename T>
void write_vec(std::ostream& out, const std::vector<T>& v) {
  write_pod<std::uint64_t>(out, v.size());
  out.write(reinterpret_cast<const char*>(v.data()), static_cast<std::streamsize>(v.size() * sizeof(T)));
}

template <typename T>
void read_vec(std::istream& in, std::vector<T>& v, const std::string& what) {
  const auto size = read_pod<std::uint64_t>(in);
  if (size != v.size()) throw ConfigError("checkpoint size mismatch for " + what);
  in.read(reinterpret_cast<char*>(v.data()), static_cast<std::streamsize>(v.size() * sizeof(T)));
  if (!in) throw ConfigError("truncated network checkpoint");
}

}  // namespace

template <typename T>
void Network<T>::save(std::ostream& out) const {
  out.write(kMagic, sizeof(kMagic));
  write_pod<std::uint32_t>(out, sizeof(T));
  write_pod<std::uint64_t>(out, arch_.space.fingerprint());
  write_pod<std::uint64_t>(out, params_.size());
  for (const auto& p : params_) {
    write_pod<std::uint32_t>(out, static_cast<std::uint32_t>(p.name.size()));
    out.write(p.name.data(), static_cast<std::streamsize>(p.name.size()));
    write_vec(out, p.value);
  }
  for (std::size_t i = 0; i < running_mean_.size(); ++i) {
    write_vec(out, running_mean_[i]);
    write_vec(out, running_var_[i]);
  }
}

template <typename T>
void Network<T>::load(std::istream& in) {
  char magic[8];
  in.read(magic, sizeof(magic));
  if (!in || std::memcmp(magic, kMagic, sizeof(kMagic)) != 0) throw ConfigError("not a network checkpoint");
  if (read_pod<std::uint32_t>(in) != sizeof(T)) throw ConfigError("checkpoint precision mismatch");
  if (read_pod<std::uint64_t>(in) != arch_.space.fingerprint()) {
    throw ConfigError("checkpoint was written for a different architecture");
  }
  if (read_pod<std::uint64_t>(in) != params_.size()) throw ConfigError("checkpoint parameter count mismatch");
  for (auto& p : params_) {
    const auto len = read_pod<std::uint32_t>(in);
    std::string name(len, '\0');
    in.read(name.data(), len);
    if (name != p.name) throw ConfigError("checkpoint parameter '" + name + "' where '" + p.name + "' expected");
    read_vec(in, p.value, p.name);
  }
  for (std::size_t i = 0; i < running_mean_.size(); ++i) {
    read_vec(in, running_mean_[i], "running mean");
    read_vec(in, running_var_[i], "running var");
  }
}

template <typename T>
std::uint64_t Network<T>::digest() const {
  std::uint64_t h = 1469598103934665603ull;
  auto mix = [&h](const void* data, std::size_t bytes) {
    const auto* p = static_cast<const unsigned char*>(data);
    for (std::size_t i = 0; i < bytes; ++i) {
      h ^= p[i];
      h *= 1099511628211ull;
    }
  };
  for (const auto& p : params_) mix(p.value.data(), p.value.size() * sizeof(T));
  for (std::size_t i = 0; i < running_mean_.size(); ++i) {
    mix(running_mean_[i].data(), running_mean_[i].size() * sizeof(T));
    mix(running_var_[i].data(), running_var_[i].size() * sizeof(T));
  }
  return h;
}

template <typename T>
double softmax_cross_entropy(const Tensor<T>& logits, std::span<const int> labels, int begin, int end,
                             std::type_identity_t<Tensor<T>>* dlogits) {
  if (begin < 0 || end > logits.n() || begin >= end) throw DimensionError("bad row range for loss");
  if (static_cast<int>(labels.size()) < end) throw DimensionError("fewer labels than rows");
  const int classes = logits.c();
  const double rows = static_cast<double>(end - begin);
  double total = 0.0;
  std::vector<double> prob(static_cast<std::size_t>(classes));
  for (int r = begin; r < end; ++r) {
    const T* z = logits.sample(r);
    const int label = labels[static_cast<std::size_t>(r)];
    if (label < 0 || label >= classes) throw DimensionError("label out of range");
    double mx = static_cast<double>(z[0]);
    for (int c = 1; c < classes; ++c) mx = std::max(mx, static_cast<double>(z[c]));
    double denom = 0.0;
    for (int c = 0; c < classes; ++c) {
      prob[static_cast<std::size_t>(c)] = std::exp(static_cast<double>(z[c]) - mx);
      denom += prob[static_cast<std::size_t>(c)];
    }
    total += std::log(denom) - (static_cast<double>(z[label]) - mx);
    if (dlogits) {
      T* g = dlogits->sample(r);
      for (int c = 0; c < classes; ++c) {
        const double p = prob[static_cast<std::size_t>(c)] / denom;
        g[c] = static_cast<T>((p - (c == label ? 1.0 : 0.0)) / rows);
      }
    }
  }
  return total / rows;
}

template <typename T>
int count_correct(const Tensor<T>& logits, std::span<const int> labels) {
  int correct = 0;
  for (int r = 0; r < logits.n(); ++r) {
    const T* z = logits.sample(r);
    const int pred = static_cast<int>(std::max_element(z, z + logits.c()) - z);
    if (pred == labels[static_cast<std::size_t>(r)]) ++correct;
  }
  return correct;
}

template void mask_row_blocks<float>(Tensor<float>&, int, std::span<const int>);
template void mask_row_blocks<double>(Tensor<double>&, int, std::span<const int>);
template class Network<float>;
template class Network<double>;
template double softmax_cross_entropy<float>(const Tensor<float>&, std::span<const int>, int, int, Tensor<float>*);
template double softmax_cross_entropy<double>(const Tensor<double>&, std::span<const int>, int, int, Tensor<double>*);
template int count_correct<float>(const Tensor<float>&, std::span<const int>);
template int count_correct<double>(const Tensor<double>&, std::span<const int>);

}  // namespace parawidth
