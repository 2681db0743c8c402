#include "parawidth/search_space.hpp"

#include <algorithm>
#include <charconv>
#include <cmath>
#include <map>
#include <set>

#include "parawidth/errors.hpp"

namespace parawidth {

std::string_view layer_kind_name(LayerKind kind) {
  switch (kind) {
    case LayerKind::kConv: return "conv";
    case LayerKind::kDepthwise: return "dwconv";
    case LayerKind::kLinear: return "linear";
  }
  return "?";
}

std::string to_string(const WidthConfig& config) {
  std::string out;
  for (std::size_t i = 0; i < config.widths.size(); ++i) {
    if (i) out += ',';
    out += std::to_string(config.widths[i]);
  }
  return out;
}

WidthConfig parse_widths(std::string_view text) {
  WidthConfig config;
  std::size_t pos = 0;
  while (pos < text.size()) {
    while (pos < text.size() && (text[pos] == ' ' || text[pos] == '\t' || text[pos] == '[')) ++pos;
    std::size_t end = pos;
    while (end < text.size() && text[end] != ',' && text[end] != ']') ++end;
    std::string_view token = text.substr(pos, end - pos);
    while (!token.empty() && (token.back() == ' ' || token.back() == '\t' || token.back() == '\n' ||
                              token.back() == '\r')) {
      token.remove_suffix(1);
    }
    if (!token.empty()) {
      int value = 0;
      auto [ptr, ec] = std::from_chars(token.data(), token.data() + token.size(), value);
      if (ec != std::errc() || ptr != token.data() + token.size() || value <= 0) {
        throw ConfigError("invalid width '" + std::string(token) + "'");
      }
      config.widths.push_back(value);
    }
    pos = end + 1;
  }
  if (config.widths.empty()) throw ConfigError("empty width vector");
  return config;
}

std::size_t WidthConfigHash::operator()(const WidthConfig& c) const noexcept {
  std::uint64_t h = 1469598103934665603ull;
  for (int w : c.widths) {
    h ^= static_cast<std::uint64_t>(static_cast<std::uint32_t>(w));
    h *= 1099511628211ull;
  }
  return static_cast<std::size_t>(h);
}

namespace {

std::vector<int> compute_choices(const LayerSpec& layer, double min_keep_ratio) {
  const int step = layer.max_out_channels / layer.group_count;
  // The epsilon keeps exact products such as 0.2 * 20 from rounding up a grid point.
  const int floor_channels =
      static_cast<int>(std::ceil(min_keep_ratio * layer.max_out_channels - 1e-9));
  std::vector<int> out;
  for (int m = 1; m <= layer.group_count; ++m) {
    const int width = m * step;
    if (width >= floor_channels) out.push_back(width);
  }
  return out;
}

}  // namespace

SearchSpace::SearchSpace(std::vector<LayerSpec> layers, int input_channels,
                         double min_keep_ratio, Resolution reference_resolution)
    : layers_(std::move(layers)),
      input_channels_(input_channels),
      min_keep_ratio_(min_keep_ratio),
      resolution_(reference_resolution) {
  if (input_channels_ < 1) throw ConfigError("input_channels must be positive");
  if (!(min_keep_ratio_ >= 0.0 && min_keep_ratio_ <= 1.0)) {
    throw ConfigError("min_keep_ratio must lie in [0, 1]");
  }
  if (resolution_.h < 1 || resolution_.w < 1) throw ConfigError("reference resolution must be positive");

  std::map<std::string, int> group_dof;
  for (std::size_t l = 0; l < layers_.size(); ++l) {
    const LayerSpec& spec = layers_[l];
    const std::string where = "layer '" + spec.name + "'";
    if (spec.max_out_channels < 1) throw ConfigError(where + ": max_out_channels must be positive");
    if (spec.group_count < 1) throw ConfigError(where + ": group_count must be positive");
    if (spec.max_out_channels % spec.group_count != 0) {
      throw ConfigError(where + ": max_out_channels " + std::to_string(spec.max_out_channels) +
                        " is not divisible by group_count " + std::to_string(spec.group_count));
    }
    if (spec.kernel_h < 1 || spec.kernel_w < 1) throw ConfigError(where + ": kernel dims must be >= 1");
    if (spec.out_h < 1 || spec.out_w < 1 || spec.in_h < 1 || spec.in_w < 1) {
      throw ConfigError(where + ": spatial dims must be >= 1");
    }
    if (spec.source >= static_cast<int>(l)) throw ConfigError(where + ": source must precede the layer");

    choices_.push_back(compute_choices(spec, min_keep_ratio_));

    if (spec.coupling_group) {
      auto it = group_dof.find(*spec.coupling_group);
      if (it != group_dof.end()) {
        const LayerSpec& first = layers_[static_cast<std::size_t>(dof_layers_[it->second].front())];
        if (first.max_out_channels != spec.max_out_channels || first.group_count != spec.group_count) {
          throw ConfigError("coupling group '" + *spec.coupling_group + "' mixes layers '" +
                            first.name + "' and '" + spec.name +
                            "' with different channel counts or group counts");
        }
        dof_layers_[it->second].push_back(static_cast<int>(l));
        dof_of_layer_.push_back(it->second);
        continue;
      }
      group_dof.emplace(*spec.coupling_group, static_cast<int>(dof_layers_.size()));
    }
    dof_of_layer_.push_back(static_cast<int>(dof_layers_.size()));
    dof_layers_.push_back({static_cast<int>(l)});
  }
}

const std::vector<int>& SearchSpace::choices(int layer_index) const {
  if (layer_index < 0 || layer_index >= num_layers()) {
    throw IndexError("layer index " + std::to_string(layer_index) + " out of range [0, " +
                     std::to_string(num_layers()) + ")");
  }
  return choices_[static_cast<std::size_t>(layer_index)];
}

WidthConfig SearchSpace::expand(const std::vector<int>& dof_widths) const {
  if (static_cast<int>(dof_widths.size()) != num_dofs()) {
    throw DimensionError("expected " + std::to_string(num_dofs()) + " degree-of-freedom widths");
  }
  WidthConfig config;
  config.widths.resize(layers_.size());
  for (int d = 0; d < num_dofs(); ++d) {
    for (int l : dof_layers(d)) config.widths[static_cast<std::size_t>(l)] = dof_widths[static_cast<std::size_t>(d)];
  }
  return config;
}

std::uint64_t SearchSpace::fingerprint() const {
  std::uint64_t h = 1469598103934665603ull;
  auto mix = [&h](std::string_view s) {
    for (unsigned char ch : s) {
      h ^= ch;
      h *= 1099511628211ull;
    }
    h ^= 0xff;
    h *= 1099511628211ull;
  };
  mix(std::to_string(input_channels_));
  mix(std::to_string(min_keep_ratio_));
  mix(std::to_string(resolution_.h) + "x" + std::to_string(resolution_.w));
  for (const auto& l : layers_) {
    mix(l.name);
    mix(layer_kind_name(l.kind));
    for (int v : {l.max_out_channels, l.kernel_h, l.kernel_w, l.in_h, l.in_w, l.out_h, l.out_w,
                  l.group_count, l.source}) {
      mix(std::to_string(v));
    }
    mix(l.coupling_group.value_or(""));
  }
  return h;
}

std::vector<int> allowed_choices(const SearchSpace& space, int layer_index) {
  return space.choices(layer_index);
}

BigInt space_size(const SearchSpace& space) {
  BigInt total = 1;
  for (int d = 0; d < space.num_dofs(); ++d) total *= space.dof_choices(d).size();
  return total;
}

WidthConfig sample_uniform(const SearchSpace& space, Rng& rng) {
  std::vector<int> dof(static_cast<std::size_t>(space.num_dofs()));
  for (int d = 0; d < space.num_dofs(); ++d) {
    const auto& choices = space.dof_choices(d);
    std::uniform_int_distribution<std::size_t> pick(0, choices.size() - 1);
    dof[static_cast<std::size_t>(d)] = choices[pick(rng)];
  }
  return space.expand(dof);
}

WidthConfig largest_config(const SearchSpace& space) {
  WidthConfig config;
  for (const auto& l : space.layers()) config.widths.push_back(l.max_out_channels);
  return config;
}

WidthConfig smallest_config(const SearchSpace& space) {
  WidthConfig config;
  for (int l = 0; l < space.num_layers(); ++l) config.widths.push_back(space.choices(l).front());
  return config;
}

namespace {

std::string check(const SearchSpace& space, const WidthConfig& config) {
  if (static_cast<int>(config.widths.size()) != space.num_layers()) {
    return "config has " + std::to_string(config.widths.size()) + " widths, space has " +
           std::to_string(space.num_layers()) + " layers";
  }
  for (int l = 0; l < space.num_layers(); ++l) {
    const auto& choices = space.choices(l);
    const int w = config.widths[static_cast<std::size_t>(l)];
    if (!std::binary_search(choices.begin(), choices.end(), w)) {
      return "width " + std::to_string(w) + " is not an allowed choice for layer '" +
             space.layer(l).name + "'";
    }
  }
  for (int d = 0; d < space.num_dofs(); ++d) {
    const auto& members = space.dof_layers(d);
    const int w0 = config.widths[static_cast<std::size_t>(members.front())];
    for (int l : members) {
      if (config.widths[static_cast<std::size_t>(l)] != w0) {
        return "coupled layers '" + space.layer(members.front()).name + "' and '" +
               space.layer(l).name + "' have different widths";
      }
    }
  }
  return {};
}

}  // namespace

bool is_valid(const SearchSpace& space, const WidthConfig& config) {
  return check(space, config).empty();
}

void validate(const SearchSpace& space, const WidthConfig& config) {
  if (auto msg = check(space, config); !msg.empty()) throw ConstraintError(msg);
}

int input_width(const SearchSpace& space, const WidthConfig& config, int layer_index) {
  const int src = space.layer(layer_index).source;
  return src < 0 ? space.input_channels() : config.widths[static_cast<std::size_t>(src)];
}

std::int64_t flops_unchecked(const SearchSpace& space, const WidthConfig& config) {
  std::int64_t total = 0;
  const auto& layers = space.layers();
  for (std::size_t l = 0; l < layers.size(); ++l) {
    const LayerSpec& spec = layers[l];
    const std::int64_t out = config.widths[l];
    const std::int64_t in = spec.source < 0 ? space.input_channels()
                                            : config.widths[static_cast<std::size_t>(spec.source)];
    const std::int64_t taps = static_cast<std::int64_t>(spec.kernel_h) * spec.kernel_w;
    const std::int64_t pixels = static_cast<std::int64_t>(spec.out_h) * spec.out_w;
    switch (spec.kind) {
      case LayerKind::kConv: total += in * out * taps * pixels; break;
      case LayerKind::kDepthwise: total += out * taps * pixels; break;
      case LayerKind::kLinear:
        total += in * static_cast<std::int64_t>(spec.in_h) * spec.in_w * out;
        break;
    }
  }
  return total;
}

std::int64_t flops(const SearchSpace& space, const WidthConfig& config) {
  validate(space, config);
  return flops_unchecked(space, config);
}

std::int64_t params(const SearchSpace& space, const WidthConfig& config) {
  validate(space, config);
  std::int64_t total = 0;
  for (int l = 0; l < space.num_layers(); ++l) {
    const LayerSpec& spec = space.layer(l);
    const std::int64_t out = config.widths[static_cast<std::size_t>(l)];
    const std::int64_t in = input_width(space, config, l);
    const std::int64_t taps = static_cast<std::int64_t>(spec.kernel_h) * spec.kernel_w;
    switch (spec.kind) {
      case LayerKind::kConv: total += in * out * taps; break;
      case LayerKind::kDepthwise: total += out * taps; break;
      case LayerKind::kLinear: total += in * static_cast<std::int64_t>(spec.in_h) * spec.in_w * out; break;
    }
  }
  return total;
}

WidthConfig uniform_config(const SearchSpace& space, std::int64_t target_flops) {
  std::set<double> ratios;
  for (int l = 0; l < space.num_layers(); ++l) {
    for (int c : space.choices(l)) ratios.insert(static_cast<double>(c) / space.layer(l).max_out_channels);
  }
  WidthConfig best;
  std::int64_t best_gap = -1;
  for (double r : ratios) {
    WidthConfig config;
    for (int l = 0; l < space.num_layers(); ++l) {
      const auto& choices = space.choices(l);
      const double limit = r * space.layer(l).max_out_channels + 1e-9;
      int pick = choices.front();
      for (int c : choices) {
        if (c <= limit) pick = c;
      }
      config.widths.push_back(pick);
    }
    const std::int64_t gap = std::llabs(flops_unchecked(space, config) - target_flops);
    if (best_gap < 0 || gap < best_gap) {
      best_gap = gap;
      best = std::move(config);
    }
  }
  return best;
}

std::uint64_t enumerate_configs(const SearchSpace& space,
                                const std::function<void(const WidthConfig&)>& visit) {
  const int dofs = space.num_dofs();
  std::vector<std::size_t> index(static_cast<std::size_t>(dofs), 0);
  std::vector<int> values(static_cast<std::size_t>(dofs));
  std::uint64_t visited = 0;
  while (true) {
    for (int d = 0; d < dofs; ++d) {
      values[static_cast<std::size_t>(d)] = space.dof_choices(d)[index[static_cast<std::size_t>(d)]];
    }
    visit(space.expand(values));
    ++visited;
    int d = dofs - 1;
    while (d >= 0) {
      auto& i = index[static_cast<std::size_t>(d)];
      if (++i < space.dof_choices(d).size()) break;
      i = 0;
      --d;
    }
    if (d < 0) break;
  }
  return visited;
}

}  // namespace parawidth
