#include "parawidth/architecture.hpp"

#include <fstream>
#include <map>

#include "parawidth/errors.hpp"

namespace parawidth {

using nlohmann::json;

int Architecture::max_channels(int node_index) const {
  const int wl = nodes.at(static_cast<std::size_t>(node_index)).width_layer;
  return wl < 0 ? input_channels : space.layer(wl).max_out_channels;
}

int Architecture::num_classes() const {
  if (nodes.empty() || nodes.back().kind != NodeKind::kLinear) {
    throw ConfigError("architecture '" + name + "' does not end in a linear classifier");
  }
  return space.layer(nodes.back().layer).max_out_channels;
}

namespace {

NodeKind parse_kind(const std::string& kind, const std::string& name) {
  if (kind == "conv") return NodeKind::kConv;
  if (kind == "dwconv") return NodeKind::kDepthwise;
  if (kind == "linear") return NodeKind::kLinear;
  if (kind == "add") return NodeKind::kAdd;
  if (kind == "maxpool") return NodeKind::kMaxPool;
  if (kind == "avgpool") return NodeKind::kAvgPool;
  throw ConfigError("layer '" + name + "': unknown kind '" + kind + "'");
}

std::string kind_string(NodeKind kind) {
  switch (kind) {
    case NodeKind::kConv: return "conv";
    case NodeKind::kDepthwise: return "dwconv";
    case NodeKind::kLinear: return "linear";
    case NodeKind::kAdd: return "add";
    case NodeKind::kMaxPool: return "maxpool";
    case NodeKind::kAvgPool: return "avgpool";
  }
  return "?";
}

void read_kernel(const json& entry, int& kh, int& kw, const std::string& name) {
  if (!entry.contains("kernel")) return;
  const json& k = entry.at("kernel");
  if (k.is_number_integer()) {
    kh = kw = k.get<int>();
  } else if (k.is_array() && k.size() == 2) {
    kh = k[0].get<int>();
    kw = k[1].get<int>();
  } else {
    throw ConfigError("layer '" + name + "': kernel must be an int or [kh, kw]");
  }
  if (kh < 1 || kw < 1) throw ConfigError("layer '" + name + "': kernel dims must be >= 1");
}

struct Shape {
  int h = 0;
  int w = 0;
};

}  // namespace

Architecture parse_architecture(const json& doc) { return parse_architecture(doc, {}); }

Architecture parse_architecture(const json& doc, const SpaceOverrides& overrides) {
  try {
    Architecture arch;
    arch.name = doc.value("name", std::string("unnamed"));
    arch.input_channels = doc.value("input_channels", 3);
    Resolution res;
    if (doc.contains("reference_resolution")) {
      const json& r = doc.at("reference_resolution");
      if (!r.is_array() || r.size() != 2) throw ConfigError("reference_resolution must be [H, W]");
      res.h = r[0].get<int>();
      res.w = r[1].get<int>();
    }
    const int default_groups = overrides.group_count.value_or(doc.value("group_count", 8));
    const double min_keep = overrides.min_keep_ratio.value_or(doc.value("min_keep_ratio", 0.2));
    if (!doc.contains("layers") || !doc.at("layers").is_array() || doc.at("layers").empty()) {
      throw ConfigError("architecture needs a non-empty 'layers' list");
    }

    std::map<std::string, int> index_of;
    std::vector<Shape> shapes;
    std::vector<LayerSpec> specs;
    const Shape input_shape{res.h, res.w};

    auto coupled = [&specs](int a, int b) {
      if (a == b) return true;
      if (a < 0 || b < 0) return false;
      const auto& ga = specs[static_cast<std::size_t>(a)].coupling_group;
      const auto& gb = specs[static_cast<std::size_t>(b)].coupling_group;
      return ga && gb && *ga == *gb;
    };

    for (const json& entry : doc.at("layers")) {
      Node node;
      node.name = entry.at("name").get<std::string>();
      if (node.name == "input" || index_of.count(node.name)) {
        throw ConfigError("layer name '" + node.name + "' is reserved or duplicated");
      }
      node.kind = parse_kind(entry.at("kind").get<std::string>(), node.name);
      const std::string where = "layer '" + node.name + "'";

      if (entry.contains("inputs")) {
        for (const auto& in : entry.at("inputs")) {
          const std::string src = in.get<std::string>();
          if (src == "input") {
            node.inputs.push_back(-1);
          } else if (auto it = index_of.find(src); it != index_of.end()) {
            node.inputs.push_back(it->second);
          } else {
            throw ConfigError(where + ": unknown or later input '" + src + "'");
          }
        }
      } else {
        node.inputs.push_back(static_cast<int>(arch.nodes.size()) - 1);
      }
      if (node.inputs.empty()) throw ConfigError(where + ": needs at least one input");

      auto shape_of = [&](int idx) { return idx < 0 ? input_shape : shapes[static_cast<std::size_t>(idx)]; };
      auto width_layer_of = [&](int idx) {
        return idx < 0 ? -1 : arch.nodes[static_cast<std::size_t>(idx)].width_layer;
      };
      auto channels_of = [&](int idx) {
        const int wl = width_layer_of(idx);
        return wl < 0 ? arch.input_channels : specs[static_cast<std::size_t>(wl)].max_out_channels;
      };

      const int first = node.inputs.front();
      const Shape in_shape = shape_of(first);
      Shape out_shape = in_shape;

      const bool parametric = node.kind == NodeKind::kConv || node.kind == NodeKind::kDepthwise ||
                              node.kind == NodeKind::kLinear;
      if (parametric && node.inputs.size() != 1) throw ConfigError(where + ": expects exactly one input");

      if (node.kind == NodeKind::kConv || node.kind == NodeKind::kDepthwise ||
          node.kind == NodeKind::kMaxPool) {
        read_kernel(entry, node.kernel_h, node.kernel_w, node.name);
        node.stride = entry.value("stride", 1);
        node.padding = entry.value("padding", (node.kernel_h - 1) / 2);
        if (node.stride < 1 || node.padding < 0) throw ConfigError(where + ": bad stride/padding");
        out_shape.h = (in_shape.h + 2 * node.padding - node.kernel_h) / node.stride + 1;
        out_shape.w = (in_shape.w + 2 * node.padding - node.kernel_w) / node.stride + 1;
        if (out_shape.h < 1 || out_shape.w < 1) throw ConfigError(where + ": output collapses to zero size");
      }

      switch (node.kind) {
        case NodeKind::kConv:
        case NodeKind::kDepthwise:
        case NodeKind::kLinear: {
          LayerSpec spec;
          spec.name = node.name;
          spec.kind = node.kind == NodeKind::kConv       ? LayerKind::kConv
                      : node.kind == NodeKind::kDepthwise ? LayerKind::kDepthwise
                                                          : LayerKind::kLinear;
          spec.source = width_layer_of(first);
          if (node.kind == NodeKind::kDepthwise) {
            spec.max_out_channels = entry.value("out", channels_of(first));
            if (spec.max_out_channels != channels_of(first)) {
              throw ConfigError(where + ": depthwise out must equal its input channels");
            }
          } else {
            if (!entry.contains("out")) throw ConfigError(where + ": missing 'out'");
            spec.max_out_channels = entry.at("out").get<int>();
          }
          spec.group_count = entry.value("group_count", default_groups);
          if (entry.contains("coupling_group")) {
            spec.coupling_group = entry.at("coupling_group").get<std::string>();
          }
          spec.in_h = in_shape.h;
          spec.in_w = in_shape.w;
          if (node.kind == NodeKind::kLinear) {
            out_shape = {1, 1};
          } else {
            spec.kernel_h = node.kernel_h;
            spec.kernel_w = node.kernel_w;
          }
          spec.out_h = out_shape.h;
          spec.out_w = out_shape.w;
          const bool conv_like = node.kind != NodeKind::kLinear;
          node.batch_norm = entry.value("bn", conv_like);
          node.relu = entry.value("relu", conv_like);
          node.layer = static_cast<int>(specs.size());
          node.width_layer = node.layer;
          specs.push_back(std::move(spec));
          if (node.kind == NodeKind::kDepthwise) {
            if (specs.back().source < 0) {
              if (specs.back().group_count != 1) {
                throw ConfigError(where + ": depthwise layer on the network input must use group_count 1");
              }
            } else if (!coupled(node.layer, specs.back().source)) {
              throw ConfigError(where + ": depthwise layer must share a coupling group with its input layer '" +
                                specs[static_cast<std::size_t>(specs.back().source)].name + "'");
            }
          }
          break;
        }
        case NodeKind::kAdd: {
          if (node.inputs.size() < 2) throw ConfigError(where + ": add needs at least two inputs");
          const int wl = width_layer_of(first);
          for (int in : node.inputs) {
            const Shape s = shape_of(in);
            if (s.h != in_shape.h || s.w != in_shape.w) throw ConfigError(where + ": add inputs differ in spatial size");
            if (!coupled(wl, width_layer_of(in))) {
              throw ConfigError(where + ": residual partners must share a coupling group");
            }
          }
          node.relu = entry.value("relu", false);
          node.width_layer = wl;
          break;
        }
        case NodeKind::kMaxPool:
          if (node.inputs.size() != 1) throw ConfigError(where + ": expects exactly one input");
          node.width_layer = width_layer_of(first);
          break;
        case NodeKind::kAvgPool:
          if (node.inputs.size() != 1) throw ConfigError(where + ": expects exactly one input");
          node.width_layer = width_layer_of(first);
          out_shape = {1, 1};
          break;
      }

      index_of.emplace(node.name, static_cast<int>(arch.nodes.size()));
      shapes.push_back(out_shape);
      arch.nodes.push_back(std::move(node));
    }

    arch.space = SearchSpace(std::move(specs), arch.input_channels, min_keep, res);
    return arch;
  } catch (const json::exception& e) {
    throw ConfigError(std::string("architecture description: ") + e.what());
  }
}

Architecture load_architecture(const std::string& path) { return load_architecture(path, {}); }

Architecture load_architecture(const std::string& path, const SpaceOverrides& overrides) {
  std::ifstream in(path);
  if (!in) throw ConfigError("cannot open architecture file '" + path + "'");
  json doc;
  try {
    doc = json::parse(in);
  } catch (const json::exception& e) {
    throw ConfigError("'" + path + "': " + e.what());
  }
  return parse_architecture(doc, overrides);
}

json architecture_to_json(const Architecture& arch) {
  json doc;
  doc["name"] = arch.name;
  doc["input_channels"] = arch.input_channels;
  const Resolution r = arch.space.reference_resolution();
  doc["reference_resolution"] = {r.h, r.w};
  doc["min_keep_ratio"] = arch.space.min_keep_ratio();
  json layers = json::array();
  for (const Node& node : arch.nodes) {
    json e;
    e["name"] = node.name;
    e["kind"] = kind_string(node.kind);
    json inputs = json::array();
    for (int in : node.inputs) inputs.push_back(in < 0 ? std::string("input") : arch.nodes[static_cast<std::size_t>(in)].name);
    e["inputs"] = inputs;
    if (node.kind == NodeKind::kConv || node.kind == NodeKind::kDepthwise || node.kind == NodeKind::kMaxPool) {
      e["kernel"] = {node.kernel_h, node.kernel_w};
      e["stride"] = node.stride;
      e["padding"] = node.padding;
    }
    if (node.layer >= 0) {
      const LayerSpec& spec = arch.space.layer(node.layer);
      e["out"] = spec.max_out_channels;
      e["group_count"] = spec.group_count;
      if (spec.coupling_group) e["coupling_group"] = *spec.coupling_group;
      e["bn"] = node.batch_norm;
    }
    if (node.layer >= 0 || node.kind == NodeKind::kAdd) e["relu"] = node.relu;
    layers.push_back(std::move(e));
  }
  doc["layers"] = std::move(layers);
  return doc;
}

Architecture slice_architecture(const Architecture& arch, const WidthConfig& config) {
  validate(arch.space, config);
  json doc = architecture_to_json(arch);
  for (json& e : doc["layers"]) {
    if (!e.contains("out")) continue;
    for (const Node& node : arch.nodes) {
      if (node.name == e["name"].get<std::string>()) {
        e["out"] = config.widths[static_cast<std::size_t>(node.layer)];
        e["group_count"] = 1;
      }
    }
  }
  doc["name"] = arch.name + "@" + to_string(config);
  return parse_architecture(doc);
}

}  // namespace parawidth
