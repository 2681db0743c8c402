#pragma once

// Architecture description files: a layer graph in JSON that yields both the
// executable node list and the SearchSpace over its conv/linear layers.
//
//   {
//     "name": "desk_resnet",
//     "input_channels": 3,
//     "reference_resolution": [32, 32],
//     "group_count": 8,            // default K for every searchable layer
//     "min_keep_ratio": 0.2,
//     "layers": [
//       {"name": "stem", "kind": "conv", "out": 16, "kernel": 3, "stride": 2,
//        "inputs": ["input"], "coupling_group": "stage1", "bn": true, "relu": true},
//       {"name": "sum1", "kind": "add", "inputs": ["stem", "b1b"], "relu": true},
//       {"name": "pool", "kind": "avgpool"},
//       {"name": "fc", "kind": "linear", "out": 10, "group_count": 1}
//     ]
//   }
//
// kinds: conv, dwconv, linear, add, maxpool, avgpool (global average).
// "inputs" defaults to the previous entry. "kernel" is an int or [kh, kw];
// "padding" defaults to (kernel - 1) / 2.

#include <optional>

#include "json.hpp"
#include <string>
#include <vector>

#include "parawidth/search_space.hpp"

namespace parawidth {

enum class NodeKind { kConv, kDepthwise, kLinear, kAdd, kMaxPool, kAvgPool };

struct Node {
  std::string name;
  NodeKind kind = NodeKind::kConv;
  std::vector<int> inputs;  // node indices; -1 is the network input
  int layer = -1;           // SearchSpace layer index for conv/dwconv/linear
  int kernel_h = 1;
  int kernel_w = 1;
  int stride = 1;
  int padding = 0;
  bool batch_norm = false;
  bool relu = false;
  // Layer whose width sets this node's channel count; -1 means the input.
  int width_layer = -1;
};

struct Architecture {
  std::string name;
  SearchSpace space;
  std::vector<Node> nodes;
  int input_channels = 3;

  // Channels of node `index` when every layer is at full width.
  int max_channels(int node_index) const;
  int num_classes() const;
};

// Throws ConfigError with the offending layer name on any schema or
// consistency problem (unknown inputs, uncoupled residual partners, ...).
Architecture parse_architecture(const nlohmann::json& doc);
Architecture load_architecture(const std::string& path);

// Applies overrides on top of the file's group_count / min_keep_ratio.
struct SpaceOverrides {
  std::optional<int> group_count;
  std::optional<double> min_keep_ratio;
};
Architecture parse_architecture(const nlohmann::json& doc, const SpaceOverrides& overrides);
Architecture load_architecture(const std::string& path, const SpaceOverrides& overrides);

// Network whose full widths are `config`: same graph, every searchable
// layer fixed to a single choice. Used to build a physically sliced subnet.
Architecture slice_architecture(const Architecture& arch, const WidthConfig& config);

nlohmann::json architecture_to_json(const Architecture& arch);

}  // namespace parawidth
