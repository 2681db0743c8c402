#pragma once

// Run configuration files and the glue shared by the command-line tool and
// the end-to-end checks.

#include <chrono>
#include <string>
#include <vector>

#include "json.hpp"
#include "parawidth/architecture.hpp"
#include "parawidth/evo_search.hpp"
#include "parawidth/trainer.hpp"

namespace parawidth {

struct SearchSettings {
  int population_size = 128;
  int parent_count = 64;
  int generations = 20;
  double mutation_prob = 0.2;
  double crossover_fraction = 0.5;
  Weighting weighting = Weighting::kInverseProxy;
  std::int64_t bucket_width = 0;  // 0: default_bucket_width
  double tolerance = -1.0;        // < 0: bucket_width / 2
  int calibration_batches = 100;
  int validation_size = 0;        // 0: the whole validation split
  int eval_batch_size = 256;
};

SearchSettings search_settings_from_json(const nlohmann::json& j);
nlohmann::json search_settings_to_json(const SearchSettings& s);

// {space, recipe, search, paths}. Relative paths resolve against the
// config file's directory.
struct RunConfig {
  std::string arch_path;
  SpaceOverrides overrides;
  TrainRecipe recipe;
  SearchSettings search;
  std::string out_dir;
  nlohmann::json source;  // as read

  Architecture load_arch() const;
};

// Throws ConfigError naming the path on any problem.
RunConfig load_run_config(const std::string& path);
nlohmann::json run_config_to_json(const RunConfig& c);

std::int64_t resolve_bucket_width(const SearchSettings& s, const SearchSpace& space);
double resolve_tolerance(const SearchSettings& s, const SearchSpace& space);

// Validation and calibration batches cut from a dataset.
struct EvalData {
  std::vector<Tensor<float>> validation;
  std::vector<std::vector<int>> labels;
  std::vector<Tensor<float>> calibration;
};

EvalData make_eval_data(const Dataset& data, const SearchSettings& s, int calibration_batch_size);

// One file per command, next to its outputs.
struct RunManifest {
  std::string command;
  nlohmann::json config;
  std::vector<std::string> inputs;
  std::vector<std::string> outputs;
  std::uint64_t seed = 0;
  double wall_clock_seconds = 0.0;
};

inline constexpr const char* kToolVersion = "0.1.0";

void write_run_manifest(const std::string& dir, const RunManifest& m);

// Per-layer kept fraction widths[l] / max_out_channels[l].
std::vector<double> keep_ratios(const SearchSpace& space, const WidthConfig& config);

// Keep-ratio chart: one polyline per row over the layer index.
std::string keep_ratio_svg(const SearchSpace& space, const std::vector<ResultRow>& rows);

}  // namespace parawidth
