#pragma once

// Parallel-subnets training: one full-width pass per iteration in which each
// row block of the batch carries a different width configuration.

#include <cstdint>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "parawidth/loss_record.hpp"
#include "parawidth/network.hpp"
#include "parawidth/optimizer.hpp"

namespace parawidth {

struct BatchPartition {
  int n_parts = 0;
  std::vector<WidthConfig> part_configs;
  int batch_size = 0;

  int rows_per_part() const { return batch_size / n_parts; }
};

// Throws PartitionError when batch_size is not divisible by the part count.
BatchPartition make_partition(std::vector<WidthConfig> configs, int batch_size);

enum class PartitionPolicy {
  kLargestRandom,          // part 0 largest, rest uniform
  kAllRandom,
  kSmallestRandom,         // part 0 smallest, rest uniform
  kLargestSmallestRandom,  // part 0 largest, part 1 smallest, rest uniform
};

PartitionPolicy parse_partition_policy(const std::string& name);
std::string partition_policy_name(PartitionPolicy policy);

BatchPartition sample_partition(const SearchSpace& space, PartitionPolicy policy, int n_parts,
                                int batch_size, Rng& rng);

struct ChannelMask {
  int part_index = 0;
  int row_begin = 0;
  int row_end = 0;
  int active_channels = 0;
  int batch_size = 0;
  int layer_channels = 0;

  // Row-major batch_size x layer_channels 0/1 matrix.
  std::vector<std::uint8_t> dense() const;

  // Elementwise product with dense(): rows outside the part are zeroed too.
  template <typename T>
  void apply(Tensor<T>& t) const;
};

ChannelMask build_mask(int n, int b, int part_index, int layer_channels, int active_channels);

// Appends zero channels up to target_channels. Throws DimensionError when
// the tensor already has more.
template <typename T>
Tensor<T> pad_channels(const Tensor<T>& features, int target_channels);

enum class BnMode {
  kBatchStatistics,  // training: current-batch statistics, nothing accumulated
  kFrozen,           // stored statistics
  kRecalibrated,     // stored statistics refreshed for calibrated_for
};

std::string bn_mode_name(BnMode mode);
BnMode parse_bn_mode(const std::string& name);

template <typename T>
struct SupernetHandle {
  Network<T> net;
  BnMode bn_mode = BnMode::kBatchStatistics;
  std::optional<WidthConfig> calibrated_for;

  const SearchSpace& space() const { return net.space(); }
  BnUsage bn_usage() const { return bn_mode == BnMode::kBatchStatistics ? BnUsage::kBatch : BnUsage::kRunning; }
};

template <typename T>
struct ParallelOutput {
  ChannelPlan plan;
  ForwardTrace<T> trace;  // per-node masked activations; trace.logits() is the output
};

// `input` must outlive the returned trace.
template <typename T>
ParallelOutput<T> parallel_forward(SupernetHandle<T>& handle, const Tensor<T>& input,
                                   const BatchPartition& partition);

// [part][node] activations of each subnet run alone on its own rows, with
// weights physically copied out of the leading blocks of the supernet.
template <typename T>
std::vector<std::vector<Tensor<T>>> serial_forward_oracle(const SupernetHandle<T>& handle,
                                                          const Tensor<T>& input,
                                                          const BatchPartition& partition);

// Standalone network with the leading weight blocks of `config` copied out.
template <typename T>
Network<T> extract_subnet(const Network<T>& supernet, const WidthConfig& config);

struct StepResult {
  std::vector<double> part_losses;
  std::vector<LossRecord> records;
};

// One parallel-subnets iteration with a sampled partition.
template <typename T>
StepResult supernet_train_step(SupernetHandle<T>& handle, const Tensor<T>& input,
                               std::span<const int> labels, Rng& rng, Optimizer<T>& optimizer,
                               double lr, long iteration, int n_parts,
                               PartitionPolicy policy = PartitionPolicy::kLargestRandom);

// Same with a fixed partition.
template <typename T>
StepResult supernet_train_step(SupernetHandle<T>& handle, const Tensor<T>& input,
                               std::span<const int> labels, const BatchPartition& partition,
                               Optimizer<T>& optimizer, double lr, long iteration);

// Conventional slimmable-style step: every config runs on the whole batch
// through its own sliced pass, gradients accumulate, one optimizer step.
template <typename T>
StepResult serial_train_step(SupernetHandle<T>& handle, const Tensor<T>& input,
                             std::span<const int> labels, std::span<const WidthConfig> configs,
                             Optimizer<T>& optimizer, double lr, long iteration);

// Replaces the running statistics of the first C'_l channels of every batch
// norm with pooled moments of `config` over the stream. Throws
// CalibrationError on an empty stream.
template <typename T>
void recalibrate_bn(SupernetHandle<T>& handle, const WidthConfig& config,
                    std::span<const Tensor<T>> calibration_batches);

// Top-1 fraction of one subnet under the handle's current statistics.
template <typename T>
double subnet_accuracy(SupernetHandle<T>& handle, const WidthConfig& config,
                       std::span<const Tensor<T>> batches, std::span<const std::vector<int>> labels);

}  // namespace parawidth
