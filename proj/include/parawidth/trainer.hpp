#pragma once

// Supernet pre-training with checkpoints and streamed loss records, and
// from-scratch retraining of a searched width configuration.

#include <cstdint>
#include <functional>
#include <iosfwd>
#include <optional>
#include <string>
#include <vector>

#include "json.hpp"
#include "parawidth/architecture.hpp"
#include "parawidth/dataset.hpp"
#include "parawidth/supernet.hpp"

namespace parawidth {

struct TrainRecipe {
  int epochs = 30;
  int batch_size = 128;
  int n_parts = 4;
  PartitionPolicy policy = PartitionPolicy::kLargestRandom;
  OptimizerSpec optimizer;
  double warmup_epochs = 0.0;            // linear ramp, converted to iterations at run time
  std::vector<int> milestone_epochs;     // step schedule, converted likewise
  bool augment = true;
  std::uint64_t seed = 0;
  DatasetSpec dataset;

  // Throws ConfigError.
  void validate() const;
  // Iterations per epoch for a training split of `train_size` samples.
  long iterations_per_epoch(int train_size) const;
  // The optimizer schedule with epoch quantities resolved.
  LrSchedule resolved_schedule(long iters_per_epoch) const;
};

// "desk", "imagenet-resnet50", "imagenet-mobilenetv2", "imagenet-vgg16".
TrainRecipe recipe_preset(const std::string& name);
std::vector<std::string> recipe_preset_names();

// Missing keys keep the values of the preset named by "preset" (default desk).
TrainRecipe recipe_from_json(const nlohmann::json& j);
nlohmann::json recipe_to_json(const TrainRecipe& recipe);

struct EpochSummary {
  int epoch = 0;              // 1-based
  long iterations = 0;        // completed so far
  double mean_loss = 0.0;     // over all parts
  double mean_largest_loss = 0.0;
  double seconds = 0.0;
};

struct TrainOptions {
  std::string out_dir;   // empty: nothing written to disk
  bool resume = false;   // continue from out_dir/manifest.json when present
  std::function<void(const EpochSummary&)> on_epoch;
};

struct SupernetRun {
  SupernetHandle<float> handle;
  long iterations = 0;
  std::vector<LossRecord> records;
  std::vector<EpochSummary> epochs;
};

// Files in out_dir: records.jsonl, checkpoint.bin, manifest.json.
SupernetRun train_supernet(const Architecture& arch, const TrainRecipe& recipe, const Dataset& data,
                           const TrainOptions& options = {});

struct CheckpointManifest {
  std::string arch_name;
  std::uint64_t space_fingerprint = 0;
  long iteration = 0;
  int epoch = 0;
  long total_iterations = 0;
  std::string bn_mode;
  std::uint64_t weights_digest = 0;
  nlohmann::json recipe;
};

nlohmann::json manifest_to_json(const CheckpointManifest& m);
CheckpointManifest manifest_from_json(const nlohmann::json& j);

// Network, optimizer and RNG state.
void save_checkpoint(const std::string& path, const Network<float>& net, const Optimizer<float>& optimizer,
                     const Rng& rng);
void load_checkpoint(const std::string& path, Network<float>& net, Optimizer<float>& optimizer, Rng& rng);

// Loads out_dir/checkpoint.bin into a handle for evaluation; checks the
// space fingerprint against the manifest. Throws ConfigError.
SupernetHandle<float> load_supernet(const Architecture& arch, const std::string& out_dir);

struct RetrainResult {
  Network<float> net;
  double top1 = 0.0;
  std::int64_t params = 0;
  std::vector<double> epoch_loss;
};

// Trains the physically sliced network for `config` from random
// initialization and reports validation top-1.
RetrainResult retrain_subnet(const Architecture& arch, const WidthConfig& config, const TrainRecipe& recipe,
                             const Dataset& data);

// Conventional training of the full network, the reference for retraining.
RetrainResult train_full_network(const Architecture& arch, const TrainRecipe& recipe, const Dataset& data);

// Top-1 under stored batch-norm statistics.
double evaluate_top1(Network<float>& net, const Split& split, int batch_size = 256);

struct ResultRow {
  std::string config_id;
  WidthConfig widths;
  std::int64_t flops = 0;
  std::int64_t params = 0;
  std::optional<double> proxy_acc;
  std::optional<double> retrained_acc;
};

void write_results_csv(std::ostream& out, const std::vector<ResultRow>& rows);
// Throws ConfigError with the line number.
std::vector<ResultRow> read_results_csv(std::istream& in);

}  // namespace parawidth
