#include "spaces.hpp"

#include <cmath>

namespace testnets {

using namespace parawidth;

SearchSpace one_layer_space(int max_channels, int groups) {
  LayerSpec s;
  s.name = "only";
  s.kind = LayerKind::kConv;
  s.max_out_channels = max_channels;
  s.group_count = groups;
  return SearchSpace({s}, 3, 0.0, {1, 1});
}

SearchSpace long_tail_space(Rng& rng, int layers, int choices) {
  std::uniform_int_distribution<int> mult(1, 8);
  std::uniform_int_distribution<int> kernel(0, 1);
  std::vector<LayerSpec> specs;
  int hw = 32;
  for (int l = 0; l < layers; ++l) {
    if (l > 0 && l % 12 == 0 && hw > 4) hw /= 2;
    LayerSpec s;
    s.name = "l" + std::to_string(l);
    s.kind = LayerKind::kConv;
    s.max_out_channels = choices * mult(rng);
    s.kernel_h = s.kernel_w = kernel(rng) ? 3 : 1;
    s.in_h = s.in_w = s.out_h = s.out_w = hw;
    s.group_count = choices;
    s.source = l - 1;
    specs.push_back(std::move(s));
  }
  return SearchSpace(std::move(specs), 3, 0.0, {32, 32});
}

std::vector<LossRecord> synthetic_records(const SearchSpace& space, Rng& rng, int iterations, int parts) {
  const WidthConfig largest = largest_config(space);
  const double max_flops = static_cast<double>(flops(space, largest));
  std::normal_distribution<double> noise(0.0, 0.05);
  std::vector<LossRecord> records;
  for (int t = 0; t < iterations; ++t) {
    const double progress = 1.0 + 2.0 * std::exp(-4.0 * t / std::max(1, iterations));
    for (int p = 0; p < parts; ++p) {
      WidthConfig cfg = p == 0 ? largest : sample_uniform(space, rng);
      const double f = static_cast<double>(flops(space, cfg));
      const double loss = progress * (0.5 + (1.0 - f / max_flops)) * std::exp(noise(rng));
      records.push_back(LossRecord{t, p, cfg, loss, flops(space, cfg), cfg == largest});
    }
  }
  return records;
}

}  // namespace testnets
