#pragma once

// Empirical width prior built from training-time loss records, and
// FLOPs-constrained rejection sampling from it.

#include <cstdint>
#include <map>
#include <string>
#include <utility>
#include <vector>

#include "json.hpp"
#include "parawidth/loss_record.hpp"
#include "parawidth/search_space.hpp"

namespace parawidth {

// How a record's proxy loss p turns into weight: 1/p, p, or 1.
enum class Weighting { kInverseProxy, kLiteralProxy, kFrequency };

Weighting parse_weighting(const std::string& name);
std::string weighting_name(Weighting w);

// (largest_loss_at_t / final_largest_loss) * raw_loss. Throws
// NormalizationError when final_largest_loss <= 0.
double proxy_loss(const LossRecord& record, double largest_loss_at_t, double final_largest_loss);

struct ProxyLossTable {
  std::vector<double> proxy;                    // parallel to the record list
  std::map<long, double> largest_loss_by_iter;  // mean over is_largest records of that iteration
  double final_largest_loss = 0.0;
};

// Throws BuildError when records are empty or an iteration has no
// largest-subnet record, NormalizationError when the final loss is 0.
ProxyLossTable build_proxy_table(const std::vector<LossRecord>& records);

struct PriorDistribution {
  Weighting weighting = Weighting::kInverseProxy;
  std::int64_t bucket_width = 1;
  std::vector<std::int64_t> bucket_edges;  // bucket b is [edges[b], edges[b + 1])
  std::vector<std::vector<int>> choices;   // [layer] allowed choices
  std::vector<std::vector<std::vector<double>>> weights;  // [bucket][layer][choice index]
  std::vector<std::vector<bool>> fallback;                // [bucket][layer] cell had no records
  std::uint64_t space_fingerprint = 0;

  int num_buckets() const { return static_cast<int>(weights.size()); }
  // Clamped to the first/last bucket outside the covered range.
  int bucket_of(std::int64_t flops) const;

  // One categorical per degree of freedom for a bucket: elementwise product
  // of the member layers' categoricals, renormalized.
  std::vector<std::vector<double>> dof_categoricals(const SearchSpace& space, int bucket) const;
};

// Throws BuildError on empty records or records that do not fit the space.
PriorDistribution build_distribution(const std::vector<LossRecord>& records, const SearchSpace& space,
                                     std::int64_t bucket_width, Weighting weighting);

// 5% of flops(largest_config).
std::int64_t default_bucket_width(const SearchSpace& space);

struct SampleResult {
  WidthConfig config;
  long trials = 0;
};

// Draws whole configurations from the target's bucket until one lands
// within tolerance. Throws SamplingExhausted after max_trials draws.
SampleResult sample_conditioned(const PriorDistribution& dist, const SearchSpace& space, std::int64_t target_flops,
                                double tolerance, Rng& rng, long max_trials);

// Baseline: the same acceptance rule with sample_uniform draws.
SampleResult sample_uniform_rejection(const SearchSpace& space, std::int64_t target_flops, double tolerance,
                                      Rng& rng, long max_trials);

// Up to `count` distinct in-tolerance configs, best proxy quality first.
// Inverse-proxy and frequency rank by ascending p, literal-proxy by
// descending p; a duplicate keeps its best p.
std::vector<WidthConfig> top_records(const std::vector<LossRecord>& records, const ProxyLossTable& table,
                                     Weighting weighting, int count, std::int64_t target_flops, double tolerance);

nlohmann::json distribution_to_json(const PriorDistribution& dist);
PriorDistribution distribution_from_json(const nlohmann::json& j);

}  // namespace parawidth
