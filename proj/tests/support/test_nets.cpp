#include "test_nets.hpp"

#include <algorithm>
#include <cmath>
#include <random>

namespace testnets {

using nlohmann::json;

std::string family_name(Family f) {
  switch (f) {
    case Family::kConvChain: return "conv-chain";
    case Family::kDepthwise: return "depthwise";
    case Family::kLinear: return "linear";
    case Family::kResidual: return "residual";
  }
  return "?";
}

namespace {

int pick(Rng& rng, int lo, int hi) { return std::uniform_int_distribution<int>(lo, hi)(rng); }
bool coin(Rng& rng) { return pick(rng, 0, 1) == 1; }

json conv(const std::string& name, int out, int kernel, int stride, int groups, Rng& rng,
          const std::string& input = "") {
  json e = {{"name", name}, {"kind", "conv"}, {"out", out}, {"kernel", kernel}, {"stride", stride},
            {"group_count", groups}, {"bn", coin(rng)}, {"relu", coin(rng)}};
  if (!input.empty()) e["inputs"] = {input};
  return e;
}

}  // namespace

json random_arch_json(Family family, Rng& rng) {
  const int groups = coin(rng) ? 2 : 4;
  const int hw = pick(rng, 5, 9);
  const int classes = pick(rng, 3, 5);
  json layers = json::array();
  auto width = [&] { return groups * pick(rng, 1, 4); };
  switch (family) {
    case Family::kConvChain:
      layers.push_back(conv("c1", width(), coin(rng) ? 3 : 1, pick(rng, 1, 2), groups, rng, "input"));
      layers.push_back(conv("c2", width(), coin(rng) ? 3 : 1, pick(rng, 1, 2), groups, rng));
      break;
    case Family::kDepthwise: {
      json c1 = conv("c1", width(), coin(rng) ? 3 : 1, 1, groups, rng, "input");
      c1["coupling_group"] = "dw";
      layers.push_back(c1);
      layers.push_back({{"name", "dw"}, {"kind", "dwconv"}, {"kernel", 3}, {"stride", pick(rng, 1, 2)},
                        {"group_count", groups}, {"coupling_group", "dw"}, {"bn", coin(rng)}, {"relu", coin(rng)}});
      layers.push_back(conv("c2", width(), 1, 1, groups, rng));
      break;
    }
    case Family::kLinear:
      layers.push_back(conv("c1", width(), 3, 2, groups, rng, "input"));
      layers.push_back({{"name", "fc1"}, {"kind", "linear"}, {"out", width()}, {"group_count", groups},
                        {"bn", coin(rng)}, {"relu", coin(rng)}});
      break;
    case Family::kResidual: {
      const int c = width();
      json a = conv("a", c, 3, pick(rng, 1, 2), groups, rng, "input");
      a["coupling_group"] = "res";
      layers.push_back(a);
      layers.push_back(conv("b", width(), 3, 1, groups, rng));
      json cc = conv("c", c, coin(rng) ? 3 : 1, 1, groups, rng);
      cc["coupling_group"] = "res";
      layers.push_back(cc);
      layers.push_back({{"name", "sum"}, {"kind", "add"}, {"inputs", {"a", "c"}}, {"relu", coin(rng)}});
      layers.push_back({{"name", "pool"}, {"kind", "maxpool"}, {"kernel", 3}, {"stride", 2}, {"padding", 1}});
      break;
    }
  }
  if (family != Family::kLinear) layers.push_back({{"name", "gap"}, {"kind", "avgpool"}});
  layers.push_back({{"name", "head"}, {"kind", "linear"}, {"out", classes}, {"group_count", 1}});
  return {{"name", family_name(family)},
          {"input_channels", pick(rng, 1, 4)},
          {"reference_resolution", {hw, hw + pick(rng, 0, 2)}},
          {"group_count", groups},
          {"min_keep_ratio", 0.0},
          {"layers", layers}};
}

Architecture random_arch(Family family, Rng& rng) {
  return parawidth::parse_architecture(random_arch_json(family, rng));
}

Architecture two_layer_net(int in_c, int c1, int c2, int classes, int hw, int groups, bool bn) {
  json layers = json::array();
  layers.push_back({{"name", "c1"}, {"kind", "conv"}, {"out", c1}, {"kernel", 3}, {"inputs", {"input"}},
                    {"bn", bn}, {"relu", true}});
  layers.push_back({{"name", "c2"}, {"kind", "conv"}, {"out", c2}, {"kernel", 3}, {"bn", bn}, {"relu", true}});
  layers.push_back({{"name", "gap"}, {"kind", "avgpool"}});
  layers.push_back({{"name", "head"}, {"kind", "linear"}, {"out", classes}, {"group_count", 1}});
  return parawidth::parse_architecture({{"name", "two_layer"},
                                        {"input_channels", in_c},
                                        {"reference_resolution", {hw, hw}},
                                        {"group_count", groups},
                                        {"min_keep_ratio", 0.0},
                                        {"layers", layers}});
}

template <typename T>
Tensor<T> random_tensor(int n, int c, int h, int w, Rng& rng, double scale) {
  Tensor<T> t(n, c, h, w);
  std::normal_distribution<double> dist(0.0, scale);
  for (T& v : t.values()) v = static_cast<T>(dist(rng));
  return t;
}

template <typename T>
void randomize_bn(parawidth::Network<T>& net, Rng& rng) {
  std::uniform_real_distribution<double> gamma(0.5, 1.5), beta(-0.5, 0.5), mean(-0.3, 0.3), var(0.5, 2.0);
  for (std::size_t i = 0; i < net.arch().nodes.size(); ++i) {
    if (!net.arch().nodes[i].batch_norm) continue;
    const int idx = static_cast<int>(i);
    const auto& np = net.node_params(idx);
    for (T& v : net.params()[static_cast<std::size_t>(np.gamma)].value) v = static_cast<T>(gamma(rng));
    for (T& v : net.params()[static_cast<std::size_t>(np.beta)].value) v = static_cast<T>(beta(rng));
    for (T& v : net.running_mean(idx)) v = static_cast<T>(mean(rng));
    for (T& v : net.running_var(idx)) v = static_cast<T>(var(rng));
  }
}

template <typename T>
Tensor<T> naive_conv(const Tensor<T>& x, const std::vector<T>& weight, int co_full, int ci_full, int co,
                     int kh, int kw, int stride, int pad) {
  (void)co_full;
  const int oh = (x.h() + 2 * pad - kh) / stride + 1;
  const int ow = (x.w() + 2 * pad - kw) / stride + 1;
  Tensor<T> y(x.n(), co, oh, ow);
  for (int n = 0; n < x.n(); ++n)
    for (int o = 0; o < co; ++o)
      for (int oy = 0; oy < oh; ++oy)
        for (int ox = 0; ox < ow; ++ox) {
          T acc = 0;
          for (int i = 0; i < x.c(); ++i)
            for (int ky = 0; ky < kh; ++ky)
              for (int kx = 0; kx < kw; ++kx) {
                const int iy = oy * stride - pad + ky, ix = ox * stride - pad + kx;
                if (iy < 0 || iy >= x.h() || ix < 0 || ix >= x.w()) continue;
                acc += x.at(n, i, iy, ix) *
                       weight[((static_cast<std::size_t>(o) * ci_full + i) * kh + ky) * kw + kx];
              }
          y.at(n, o, oy, ox) = acc;
        }
  return y;
}

std::vector<int> random_labels(int n, int classes, Rng& rng) {
  std::vector<int> labels(static_cast<std::size_t>(n));
  for (int& l : labels) l = pick(rng, 0, classes - 1);
  return labels;
}

template Tensor<float> random_tensor<float>(int, int, int, int, Rng&, double);
template Tensor<double> random_tensor<double>(int, int, int, int, Rng&, double);
template void randomize_bn<float>(parawidth::Network<float>&, Rng&);
template void randomize_bn<double>(parawidth::Network<double>&, Rng&);
template Tensor<float> naive_conv<float>(const Tensor<float>&, const std::vector<float>&, int, int, int, int, int,
                                         int, int);
template Tensor<double> naive_conv<double>(const Tensor<double>&, const std::vector<double>&, int, int, int, int,
                                           int, int, int);

}  // namespace testnets

namespace testnets {

template <typename T>
EquivalenceResult parallel_vs_serial(Family family, std::uint64_t seed, int n, int b) {
  Rng rng(seed);
  parawidth::SupernetHandle<T> handle{parawidth::Network<T>(random_arch(family, rng), seed), parawidth::BnMode::kFrozen,
                                      std::nullopt};
  randomize_bn(handle.net, rng);
  const auto& arch = handle.net.arch();
  std::vector<parawidth::WidthConfig> configs;
  for (int i = 0; i < n; ++i) configs.push_back(parawidth::sample_uniform(arch.space, rng));
  const auto partition = parawidth::make_partition(configs, b);
  const parawidth::Resolution res = arch.space.reference_resolution();
  const auto x = random_tensor<T>(b, arch.input_channels, res.h, res.w, rng);

  const auto parallel = parawidth::parallel_forward(handle, x, partition);
  const auto serial = parawidth::serial_forward_oracle(handle, x, partition);
  EquivalenceResult result;
  const int rows = partition.rows_per_part();
  for (std::size_t node = 0; node < arch.nodes.size(); ++node) {
    const Tensor<T>& full = parallel.trace.nodes[node].out;
    for (int p = 0; p < n; ++p) {
      const Tensor<T>& sub = serial[static_cast<std::size_t>(p)][node];
      const int active = sub.c();
      for (int r = 0; r < rows; ++r) {
        const int row = p * rows + r;
        for (int c = 0; c < full.c(); ++c) {
          const T* a = full.channel(row, c);
          for (std::size_t s = 0; s < full.plane(); ++s) {
            if (c < active) {
              const double d = std::abs(static_cast<double>(a[s]) - static_cast<double>(sub.channel(r, c)[s]));
              result.max_abs_diff = std::max(result.max_abs_diff, d);
              ++result.compared;
            } else if (a[s] != T(0)) {
              result.masked_exact_zero = false;
            }
          }
        }
      }
    }
  }
  return result;
}

template EquivalenceResult parallel_vs_serial<float>(Family, std::uint64_t, int, int);
template EquivalenceResult parallel_vs_serial<double>(Family, std::uint64_t, int, int);

}  // namespace testnets
