#include "parawidth/supernet.hpp"

#include <algorithm>
#include <cmath>

#include "parawidth/errors.hpp"

namespace parawidth {

BatchPartition make_partition(std::vector<WidthConfig> configs, int batch_size) {
  const int n = static_cast<int>(configs.size());
  if (n < 1) throw PartitionError("partition needs at least one part");
  if (batch_size < n || batch_size % n != 0) {
    throw PartitionError("batch size " + std::to_string(batch_size) + " is not divisible by " +
                         std::to_string(n) + " parts");
  }
  return BatchPartition{n, std::move(configs), batch_size};
}

PartitionPolicy parse_partition_policy(const std::string& name) {
  if (name == "largest+random") return PartitionPolicy::kLargestRandom;
  if (name == "random") return PartitionPolicy::kAllRandom;
  if (name == "smallest+random") return PartitionPolicy::kSmallestRandom;
  if (name == "largest+smallest+random") return PartitionPolicy::kLargestSmallestRandom;
  throw ConfigError("unknown partition policy '" + name + "'");
}

std::string partition_policy_name(PartitionPolicy policy) {
  switch (policy) {
    case PartitionPolicy::kLargestRandom: return "largest+random";
    case PartitionPolicy::kAllRandom: return "random";
    case PartitionPolicy::kSmallestRandom: return "smallest+random";
    case PartitionPolicy::kLargestSmallestRandom: return "largest+smallest+random";
  }
  return "largest+random";
}

BatchPartition sample_partition(const SearchSpace& space, PartitionPolicy policy, int n_parts,
                                int batch_size, Rng& rng) {
  if (n_parts < 1) throw PartitionError("partition needs at least one part");
  if (policy == PartitionPolicy::kLargestSmallestRandom && n_parts < 2) {
    throw PartitionError("largest+smallest+random needs at least two parts");
  }
  std::vector<WidthConfig> configs;
  configs.reserve(static_cast<std::size_t>(n_parts));
  if (policy == PartitionPolicy::kLargestRandom || policy == PartitionPolicy::kLargestSmallestRandom) {
    configs.push_back(largest_config(space));
  }
  if (policy == PartitionPolicy::kSmallestRandom || policy == PartitionPolicy::kLargestSmallestRandom) {
    configs.push_back(smallest_config(space));
  }
  while (static_cast<int>(configs.size()) < n_parts) configs.push_back(sample_uniform(space, rng));
  return make_partition(std::move(configs), batch_size);
}

ChannelMask build_mask(int n, int b, int part_index, int layer_channels, int active_channels) {
  if (n < 1 || b % n != 0) {
    throw PartitionError("batch size " + std::to_string(b) + " is not divisible by " + std::to_string(n) + " parts");
  }
  if (part_index < 0 || part_index >= n) throw PartitionError("part index " + std::to_string(part_index) + " out of range");
  if (active_channels < 1 || active_channels > layer_channels) {
    throw ConstraintError("active channels " + std::to_string(active_channels) + " outside [1, " +
                          std::to_string(layer_channels) + "]");
  }
  const int rows = b / n;
  return ChannelMask{part_index, rows * part_index, rows * (part_index + 1), active_channels, b, layer_channels};
}

std::vector<std::uint8_t> ChannelMask::dense() const {
  std::vector<std::uint8_t> m(static_cast<std::size_t>(batch_size) * layer_channels, 0);
  for (int j = row_begin; j < row_end; ++j) {
    std::fill_n(m.begin() + static_cast<std::ptrdiff_t>(j) * layer_channels, active_channels, std::uint8_t{1});
  }
  return m;
}

template <typename T>
void ChannelMask::apply(Tensor<T>& t) const {
  if (t.n() != batch_size || t.c() != layer_channels) {
    throw DimensionError("mask " + std::to_string(batch_size) + "x" + std::to_string(layer_channels) +
                         " does not fit tensor " + t.shape_string());
  }
  for (int j = 0; j < batch_size; ++j) {
    if (j < row_begin || j >= row_end) {
      std::fill(t.sample(j), t.sample(j) + t.sample_stride(), T(0));
    } else {
      std::fill(t.channel(j, active_channels), t.sample(j) + t.sample_stride(), T(0));
    }
  }
}

template <typename T>
Tensor<T> pad_channels(const Tensor<T>& features, int target_channels) {
  if (target_channels < features.c()) {
    throw DimensionError("cannot pad " + features.shape_string() + " down to " + std::to_string(target_channels) +
                         " channels");
  }
  Tensor<T> out(features.n(), target_channels, features.h(), features.w());
  for (int i = 0; i < features.n(); ++i) {
    std::copy(features.sample(i), features.sample(i) + features.sample_stride(), out.sample(i));
  }
  return out;
}

std::string bn_mode_name(BnMode mode) {
  switch (mode) {
    case BnMode::kBatchStatistics: return "batch-statistics";
    case BnMode::kFrozen: return "frozen";
    case BnMode::kRecalibrated: return "recalibrated";
  }
  return "batch-statistics";
}

BnMode parse_bn_mode(const std::string& name) {
  if (name == "batch-statistics") return BnMode::kBatchStatistics;
  if (name == "frozen") return BnMode::kFrozen;
  if (name == "recalibrated") return BnMode::kRecalibrated;
  throw ConfigError("unknown batch-norm mode '" + name + "'");
}

template <typename T>
ParallelOutput<T> parallel_forward(SupernetHandle<T>& handle, const Tensor<T>& input,
                                   const BatchPartition& partition) {
  if (input.n() != partition.batch_size) {
    throw DimensionError("input has " + std::to_string(input.n()) + " rows, partition expects " +
                         std::to_string(partition.batch_size));
  }
  ParallelOutput<T> out;
  out.plan = masked_plan(handle.net.arch(), partition.part_configs, partition.batch_size);
  out.trace = handle.net.forward(input, out.plan, handle.bn_usage());
  return out;
}

template <typename T>
Network<T> extract_subnet(const Network<T>& supernet, const WidthConfig& config) {
  const Architecture& arch = supernet.arch();
  Network<T> sub(slice_architecture(arch, config), 0);
  for (std::size_t i = 0; i < arch.nodes.size(); ++i) {
    const Node& node = arch.nodes[i];
    if (node.layer < 0) continue;
    const int idx = static_cast<int>(i);
    const LayerSpec& full = arch.space.layer(node.layer);
    const LayerSpec& cut = sub.arch().space.layer(node.layer);
    const auto& src = supernet.node_params(idx);
    const auto& dst = sub.node_params(idx);
    const auto& sp = supernet.params();
    auto& dp = sub.params();
    const int co = cut.max_out_channels;
    const std::size_t taps = static_cast<std::size_t>(full.kernel_h) * full.kernel_w;
    const int ci_full = full.source < 0 ? arch.input_channels : arch.space.layer(full.source).max_out_channels;
    const int ci = cut.source < 0 ? arch.input_channels : sub.arch().space.layer(cut.source).max_out_channels;
    const auto& w_src = sp[static_cast<std::size_t>(src.weight)].value;
    auto& w_dst = dp[static_cast<std::size_t>(dst.weight)].value;
    std::size_t row_full = 0, row_cut = 0;
    switch (node.kind) {
      case NodeKind::kConv:
        row_full = static_cast<std::size_t>(ci_full) * taps;
        row_cut = static_cast<std::size_t>(ci) * taps;
        break;
      case NodeKind::kDepthwise:
        row_full = row_cut = taps;
        break;
      case NodeKind::kLinear: {
        const std::size_t hw = static_cast<std::size_t>(full.in_h) * full.in_w;
        row_full = static_cast<std::size_t>(ci_full) * hw;
        row_cut = static_cast<std::size_t>(ci) * hw;
        break;
      }
      default:
        break;
    }
    for (int o = 0; o < co; ++o) {
      std::copy_n(w_src.begin() + static_cast<std::ptrdiff_t>(o * row_full), row_cut,
                  w_dst.begin() + static_cast<std::ptrdiff_t>(o * row_cut));
    }
    auto copy_lead = [&](int s, int d) {
      if (s < 0) return;
      std::copy_n(sp[static_cast<std::size_t>(s)].value.begin(), co, dp[static_cast<std::size_t>(d)].value.begin());
    };
    copy_lead(src.bias, dst.bias);
    copy_lead(src.gamma, dst.gamma);
    copy_lead(src.beta, dst.beta);
    if (node.batch_norm) {
      std::copy_n(supernet.running_mean(idx).begin(), co, sub.running_mean(idx).begin());
      std::copy_n(supernet.running_var(idx).begin(), co, sub.running_var(idx).begin());
    }
  }
  return sub;
}

template <typename T>
std::vector<std::vector<Tensor<T>>> serial_forward_oracle(const SupernetHandle<T>& handle,
                                                          const Tensor<T>& input,
                                                          const BatchPartition& partition) {
  if (input.n() != partition.batch_size) {
    throw DimensionError("input has " + std::to_string(input.n()) + " rows, partition expects " +
                         std::to_string(partition.batch_size));
  }
  // Checks divisibility and config validity the same way the parallel path does.
  masked_plan(handle.net.arch(), partition.part_configs, partition.batch_size);
  std::vector<std::vector<Tensor<T>>> outputs;
  const int rows = partition.rows_per_part();
  for (int i = 0; i < partition.n_parts; ++i) {
    const WidthConfig& cfg = partition.part_configs[static_cast<std::size_t>(i)];
    Network<T> sub = extract_subnet(handle.net, cfg);
    const Tensor<T> slice = input.rows(i * rows, (i + 1) * rows);
    const ChannelPlan plan = sliced_plan(sub.arch(), largest_config(sub.space()));
    ForwardTrace<T> trace = sub.forward(slice, plan, BnUsage::kRunning);
    std::vector<Tensor<T>> per_node;
    per_node.reserve(trace.nodes.size());
    for (auto& node : trace.nodes) per_node.push_back(std::move(node.out));
    outputs.push_back(std::move(per_node));
  }
  return outputs;
}

namespace {

template <typename T>
void check_labels(const Tensor<T>& input, std::span<const int> labels) {
  if (static_cast<int>(labels.size()) != input.n()) {
    throw DimensionError(std::to_string(labels.size()) + " labels for " + std::to_string(input.n()) + " rows");
  }
}

}  // namespace

template <typename T>
StepResult supernet_train_step(SupernetHandle<T>& handle, const Tensor<T>& input,
                               std::span<const int> labels, const BatchPartition& partition,
                               Optimizer<T>& optimizer, double lr, long iteration) {
  if (handle.bn_mode != BnMode::kBatchStatistics) {
    throw Error("training step requires batch-statistics mode, handle is " + bn_mode_name(handle.bn_mode));
  }
  check_labels(input, labels);
  ParallelOutput<T> out = parallel_forward(handle, input, partition);
  const Tensor<T>& logits = out.trace.logits();
  Tensor<T> dlogits(logits.n(), logits.c(), logits.h(), logits.w());
  const int rows = partition.rows_per_part();
  const SearchSpace& space = handle.space();
  const WidthConfig largest = largest_config(space);

  StepResult result;
  for (int i = 0; i < partition.n_parts; ++i) {
    const double loss = softmax_cross_entropy(logits, labels, i * rows, (i + 1) * rows, &dlogits);
    if (!std::isfinite(loss)) {
      throw TrainingDivergence(iteration, "non-finite loss on part " + std::to_string(i));
    }
    const WidthConfig& cfg = partition.part_configs[static_cast<std::size_t>(i)];
    result.part_losses.push_back(loss);
    result.records.push_back(LossRecord{iteration, i, cfg, loss, flops(space, cfg), cfg == largest});
  }
  handle.net.zero_grad();
  handle.net.backward(out.trace, dlogits, out.plan);
  optimizer.step(handle.net.params(), lr);
  return result;
}

template <typename T>
StepResult supernet_train_step(SupernetHandle<T>& handle, const Tensor<T>& input,
                               std::span<const int> labels, Rng& rng, Optimizer<T>& optimizer,
                               double lr, long iteration, int n_parts, PartitionPolicy policy) {
  const BatchPartition partition = sample_partition(handle.space(), policy, n_parts, input.n(), rng);
  return supernet_train_step(handle, input, labels, partition, optimizer, lr, iteration);
}

template <typename T>
StepResult serial_train_step(SupernetHandle<T>& handle, const Tensor<T>& input,
                             std::span<const int> labels, std::span<const WidthConfig> configs,
                             Optimizer<T>& optimizer, double lr, long iteration) {
  if (handle.bn_mode != BnMode::kBatchStatistics) {
    throw Error("training step requires batch-statistics mode, handle is " + bn_mode_name(handle.bn_mode));
  }
  check_labels(input, labels);
  const SearchSpace& space = handle.space();
  const WidthConfig largest = largest_config(space);
  StepResult result;
  handle.net.zero_grad();
  for (std::size_t i = 0; i < configs.size(); ++i) {
    const ChannelPlan plan = sliced_plan(handle.net.arch(), configs[i]);
    ForwardTrace<T> trace = handle.net.forward(input, plan, BnUsage::kBatch);
    const Tensor<T>& logits = trace.logits();
    Tensor<T> dlogits(logits.n(), logits.c(), logits.h(), logits.w());
    const double loss = softmax_cross_entropy(logits, labels, 0, input.n(), &dlogits);
    if (!std::isfinite(loss)) {
      throw TrainingDivergence(iteration, "non-finite loss on subnet " + std::to_string(i));
    }
    result.part_losses.push_back(loss);
    result.records.push_back(
        LossRecord{iteration, static_cast<int>(i), configs[i], loss, flops(space, configs[i]), configs[i] == largest});
    handle.net.backward(trace, dlogits, plan);
  }
  optimizer.step(handle.net.params(), lr);
  return result;
}

template <typename T>
void recalibrate_bn(SupernetHandle<T>& handle, const WidthConfig& config,
                    std::span<const Tensor<T>> calibration_batches) {
  if (calibration_batches.empty()) throw CalibrationError("calibration stream is empty");
  const ChannelPlan plan = sliced_plan(handle.net.arch(), config);
  BnMoments moments;
  for (const auto& batch : calibration_batches) {
    handle.net.forward(batch, plan, BnUsage::kBatch, &moments);
  }
  const auto& nodes = handle.net.arch().nodes;
  for (std::size_t i = 0; i < nodes.size(); ++i) {
    if (!nodes[i].batch_norm) continue;
    const int idx = static_cast<int>(i);
    const double count = static_cast<double>(moments.count[i]);
    if (count <= 0) throw CalibrationError("no samples reached '" + nodes[i].name + "'");
    auto& rm = handle.net.running_mean(idx);
    auto& rv = handle.net.running_var(idx);
    for (std::size_t c = 0; c < moments.mean[i].size(); ++c) {
      rm[c] = static_cast<T>(moments.mean[i][c]);
      rv[c] = static_cast<T>(moments.m2[i][c] / count);
    }
  }
  handle.bn_mode = BnMode::kRecalibrated;
  handle.calibrated_for = config;
}

template <typename T>
double subnet_accuracy(SupernetHandle<T>& handle, const WidthConfig& config,
                       std::span<const Tensor<T>> batches, std::span<const std::vector<int>> labels) {
  if (batches.size() != labels.size()) throw DimensionError("batch and label counts differ");
  const ChannelPlan plan = sliced_plan(handle.net.arch(), config);
  long correct = 0, total = 0;
  for (std::size_t i = 0; i < batches.size(); ++i) {
    ForwardTrace<T> trace = handle.net.forward(batches[i], plan, BnUsage::kRunning);
    correct += count_correct(trace.logits(), labels[i]);
    total += batches[i].n();
  }
  return total == 0 ? 0.0 : static_cast<double>(correct) / static_cast<double>(total);
}

#define PARAWIDTH_INSTANTIATE(T)                                                                       \
  template void ChannelMask::apply<T>(Tensor<T>&) const;                                               \
  template Tensor<T> pad_channels<T>(const Tensor<T>&, int);                                           \
  template ParallelOutput<T> parallel_forward<T>(SupernetHandle<T>&, const Tensor<T>&,                 \
                                                 const BatchPartition&);                               \
  template Network<T> extract_subnet<T>(const Network<T>&, const WidthConfig&);                        \
  template std::vector<std::vector<Tensor<T>>> serial_forward_oracle<T>(                               \
      const SupernetHandle<T>&, const Tensor<T>&, const BatchPartition&);                              \
  template StepResult supernet_train_step<T>(SupernetHandle<T>&, const Tensor<T>&,                     \
                                             std::span<const int>, const BatchPartition&,              \
                                             Optimizer<T>&, double, long);                             \
  template StepResult supernet_train_step<T>(SupernetHandle<T>&, const Tensor<T>&,                     \
                                             std::span<const int>, Rng&, Optimizer<T>&, double, long,  \
                                             int, PartitionPolicy);                                    \
  template StepResult serial_train_step<T>(SupernetHandle<T>&, const Tensor<T>&, std::span<const int>, \
                                           std::span<const WidthConfig>, Optimizer<T>&, double, long); \
  template void recalibrate_bn<T>(SupernetHandle<T>&, const WidthConfig&, std::span<const Tensor<T>>); \
  template double subnet_accuracy<T>(SupernetHandle<T>&, const WidthConfig&, std::span<const Tensor<T>>, \
                                     std::span<const std::vector<int>>);

PARAWIDTH_INSTANTIATE(float)
PARAWIDTH_INSTANTIATE(double)

}  // namespace parawidth
