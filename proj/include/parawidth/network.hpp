#pragma once

// Graph executor over a full-width parameter store.
//
// One executor serves two execution styles, selected by the ChannelPlan:
//  - masked: every activation keeps the full channel count; rows of batch
//    part i have channels >= q_i zeroed after each conv/linear and again
//    after batch norm.
//  - sliced: each activation has exactly the subnet's channel count and every
//    layer reads the leading [out, in] block of the full weights.
// Weights are never copied or resized by either style.

#include <cstdint>
#include <iosfwd>
#include <span>
#include <string>
#include <type_traits>
#include <vector>

#include "parawidth/architecture.hpp"
#include "parawidth/tensor.hpp"

namespace parawidth {

enum class BnUsage {
  kBatch,          // current-batch statistics, running statistics untouched
  kBatchMomentum,  // current-batch statistics, running statistics updated
  kRunning,        // stored running statistics
};

struct ChannelPlan {
  std::vector<int> channels;  // buffer channels per node
  int parts = 0;              // 0: no masking
  int rows_per_part = 0;
  std::vector<std::vector<int>> part_widths;  // [node][part] active channels

  bool masked() const { return parts > 0; }
};

// Full-width buffers with per-part masks. Throws PartitionError when batch
// is not divisible by the number of configs, ConstraintError for an invalid
// config.
ChannelPlan masked_plan(const Architecture& arch, std::span<const WidthConfig> part_configs,
                        int batch);
// Buffers sized to one subnet.
ChannelPlan sliced_plan(const Architecture& arch, const WidthConfig& config);

// Zeroes channels >= widths[i] on rows [i * rows_per_part, (i + 1) * rows_per_part).
template <typename T>
void mask_row_blocks(Tensor<T>& t, int rows_per_part, std::span<const int> widths);

template <typename T>
struct Param {
  std::string name;
  std::vector<T> value;
  std::vector<T> grad;
  bool decay = false;
};

template <typename T>
struct NodeCache {
  Tensor<T> out;
  Tensor<T> xhat;           // normalized pre-affine values (batch norm nodes)
  std::vector<T> inv_std;   // per channel
  std::vector<std::int32_t> argmax;  // max-pool source offsets
};

template <typename T>
struct ForwardTrace {
  const Tensor<T>* input = nullptr;
  std::vector<NodeCache<T>> nodes;
  BnUsage bn = BnUsage::kRunning;

  const Tensor<T>& logits() const { return nodes.back().out; }
};

// Pooled per-channel moments of every batch-norm input seen by forward(),
// merged batch by batch (Chan et al. pairwise update).
struct BnMoments {
  std::vector<std::vector<double>> mean;  // [node][channel]
  std::vector<std::vector<double>> m2;    // [node][channel] sum of squared deviations
  std::vector<std::int64_t> count;        // [node] elements per channel

  bool empty() const { return count.empty(); }
  void merge(int node, int channel, std::int64_t n, double batch_mean, double batch_m2);
};

template <typename T>
class Network {
 public:
  static constexpr double kBnEps = 1e-5;
  static constexpr double kBnMomentum = 0.1;

  Network() = default;
  Network(Architecture arch, std::uint64_t seed);

  const Architecture& arch() const { return arch_; }
  const SearchSpace& space() const { return arch_.space; }

  std::vector<Param<T>>& params() { return params_; }
  const std::vector<Param<T>>& params() const { return params_; }

  // Node-indexed parameter handles; -1 where absent.
  struct NodeParams {
    int weight = -1;
    int bias = -1;
    int gamma = -1;
    int beta = -1;
  };
  const NodeParams& node_params(int node) const { return node_params_.at(static_cast<std::size_t>(node)); }
  std::vector<T>& running_mean(int node) { return running_mean_.at(static_cast<std::size_t>(node)); }
  std::vector<T>& running_var(int node) { return running_var_.at(static_cast<std::size_t>(node)); }
  const std::vector<T>& running_mean(int node) const { return running_mean_.at(static_cast<std::size_t>(node)); }
  const std::vector<T>& running_var(int node) const { return running_var_.at(static_cast<std::size_t>(node)); }

  // `input` must outlive the returned trace when backward() is used.
  ForwardTrace<T> forward(const Tensor<T>& input, const ChannelPlan& plan, BnUsage bn,
                          BnMoments* moments = nullptr);

  // Accumulates parameter gradients for d(loss)/d(logits).
  void backward(ForwardTrace<T>& trace, const Tensor<T>& dlogits, const ChannelPlan& plan);

  void zero_grad();

  // Conv/linear weight elements at full width.
  std::int64_t weight_count() const;

  // Raw binary parameters and running statistics.
  void save(std::ostream& out) const;
  void load(std::istream& in);

  // FNV-1a over parameter bytes and running statistics.
  std::uint64_t digest() const;

 private:
  void init_params(std::uint64_t seed);

  Architecture arch_;
  std::vector<Param<T>> params_;
  std::vector<NodeParams> node_params_;
  std::vector<std::vector<T>> running_mean_;
  std::vector<std::vector<T>> running_var_;
};

// Mean softmax cross-entropy over rows [begin, end). Writes d(loss)/d(logits)
// for those rows into dlogits (scaled by 1 / (end - begin)).
template <typename T>
double softmax_cross_entropy(const Tensor<T>& logits, std::span<const int> labels, int begin,
                             int end, std::type_identity_t<Tensor<T>>* dlogits = nullptr);

// Top-1 correct count over all rows.
template <typename T>
int count_correct(const Tensor<T>& logits, std::span<const int> labels);

}  // namespace parawidth
