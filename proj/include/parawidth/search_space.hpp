#pragma once

// Grouped per-layer width choices, coupling constraints and the MAC/weight
// cost model for any width configuration.

#include <boost/multiprecision/cpp_int.hpp>
#include <cstdint>
#include <functional>
#include <optional>
#include <random>
#include <string>
#include <vector>

namespace parawidth {

using Rng = std::mt19937_64;
using BigInt = boost::multiprecision::cpp_int;

enum class LayerKind { kConv, kDepthwise, kLinear };

std::string_view layer_kind_name(LayerKind kind);

struct LayerSpec {
  std::string name;
  LayerKind kind = LayerKind::kConv;
  int max_out_channels = 1;
  int kernel_h = 1;
  int kernel_w = 1;
  // Spatial size of this layer's input and output at the reference resolution.
  // A linear layer fed by a spatial map flattens it, so in_h * in_w
  // multiplies its fan-in.
  int in_h = 1;
  int in_w = 1;
  int out_h = 1;
  int out_w = 1;
  std::optional<std::string> coupling_group;
  int group_count = 1;
  // Layer whose output width is this layer's input width; -1 is the network input.
  int source = -1;
};

struct WidthConfig {
  std::vector<int> widths;

  friend bool operator==(const WidthConfig&, const WidthConfig&) = default;
  friend auto operator<=>(const WidthConfig&, const WidthConfig&) = default;
};

std::string to_string(const WidthConfig& config);
// Parses "16,24,32" (whitespace tolerant). Throws ConfigError.
WidthConfig parse_widths(std::string_view text);

struct WidthConfigHash {
  std::size_t operator()(const WidthConfig& c) const noexcept;
};

struct Resolution {
  int h = 224;
  int w = 224;
};

class SearchSpace {
 public:
  SearchSpace() = default;
  // Throws ConfigError when a layer violates the divisibility/coupling rules.
  SearchSpace(std::vector<LayerSpec> layers, int input_channels, double min_keep_ratio,
              Resolution reference_resolution);

  const std::vector<LayerSpec>& layers() const { return layers_; }
  const LayerSpec& layer(int l) const { return layers_.at(static_cast<std::size_t>(l)); }
  int num_layers() const { return static_cast<int>(layers_.size()); }
  int input_channels() const { return input_channels_; }
  double min_keep_ratio() const { return min_keep_ratio_; }
  Resolution reference_resolution() const { return resolution_; }

  // Ascending; throws IndexError for an out-of-range layer.
  const std::vector<int>& choices(int layer_index) const;

  // Independent degrees of freedom: one per coupling group or uncoupled layer,
  // ordered by first member layer.
  int num_dofs() const { return static_cast<int>(dof_layers_.size()); }
  const std::vector<int>& dof_layers(int dof) const { return dof_layers_.at(static_cast<std::size_t>(dof)); }
  int dof_of_layer(int layer_index) const { return dof_of_layer_.at(static_cast<std::size_t>(layer_index)); }
  const std::vector<int>& dof_choices(int dof) const { return choices(dof_layers(dof).front()); }

  // Expands one value per degree of freedom into a full configuration.
  WidthConfig expand(const std::vector<int>& dof_widths) const;

  // Stable content hash recorded in checkpoint manifests.
  std::uint64_t fingerprint() const;

 private:
  std::vector<LayerSpec> layers_;
  int input_channels_ = 3;
  double min_keep_ratio_ = 0.2;
  Resolution resolution_;
  std::vector<std::vector<int>> choices_;
  std::vector<std::vector<int>> dof_layers_;
  std::vector<int> dof_of_layer_;
};

// {m * (C/K) : m in 1..K, m * (C/K) >= ceil(min_keep_ratio * C)}, ascending.
std::vector<int> allowed_choices(const SearchSpace& space, int layer_index);

// Product of |choices| over independent degrees of freedom.
BigInt space_size(const SearchSpace& space);

WidthConfig sample_uniform(const SearchSpace& space, Rng& rng);
WidthConfig largest_config(const SearchSpace& space);
WidthConfig smallest_config(const SearchSpace& space);

bool is_valid(const SearchSpace& space, const WidthConfig& config);
// Throws ConstraintError naming the first offending layer.
void validate(const SearchSpace& space, const WidthConfig& config);

// Multiply-accumulates over conv and linear layers. Throws ConstraintError.
std::int64_t flops(const SearchSpace& space, const WidthConfig& config);
// Conv/linear weight elements (biases and normalization affine excluded).
std::int64_t params(const SearchSpace& space, const WidthConfig& config);

// Same as flops() without validation; for hot loops over known-valid configs.
std::int64_t flops_unchecked(const SearchSpace& space, const WidthConfig& config);

// Width of the tensor feeding layer l under `config`.
int input_width(const SearchSpace& space, const WidthConfig& config, int layer_index);

// Every layer scaled by one common factor and snapped down to its grid; the
// factor is chosen so FLOPs land closest to target. Layers with one choice
// keep it.
WidthConfig uniform_config(const SearchSpace& space, std::int64_t target_flops);

// Calls visit(config) for every configuration; returns the number visited.
std::uint64_t enumerate_configs(const SearchSpace& space,
                                const std::function<void(const WidthConfig&)>& visit);

}  // namespace parawidth
