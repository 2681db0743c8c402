#pragma once

// FLOPs-constrained evolutionary search seeded from the width prior and the
// best training-time records.

#include <cstdint>
#include <functional>
#include <iosfwd>
#include <optional>
#include <span>
#include <vector>

#include "parawidth/prior_sampler.hpp"
#include "parawidth/supernet.hpp"

namespace parawidth {

struct Candidate {
  WidthConfig config;
  std::int64_t flops = 0;
  std::int64_t params = 0;
  std::optional<double> proxy_accuracy;
};

Candidate make_candidate(const SearchSpace& space, const WidthConfig& config);

// Accuracy desc, then FLOPs asc, then params asc, then widths lexicographic.
bool ranks_before(const Candidate& a, const Candidate& b);

struct EvoConfig {
  int population_size = 128;
  int parent_count = 64;
  double mutation_prob = 0.2;
  int generations = 20;
  std::int64_t target_flops = 0;
  double tolerance = 0.0;
  std::uint64_t seed = 0;
  double crossover_fraction = 0.5;  // share of offspring produced by crossover
  int max_attempts = 100;           // redraws before falling back to the prior
  long max_sample_trials = 100000;  // per sample_conditioned call

  // Throws ConfigError.
  void validate() const;
};

bool within_tolerance(const SearchSpace& space, const WidthConfig& config, const EvoConfig& evo);

// P/2 distinct configs from top_records, the rest drawn from the prior;
// distinct throughout. Shorter than P only when the in-tolerance set is
// smaller than P.
std::vector<Candidate> init_population(const SearchSpace& space, const PriorDistribution& dist,
                                       const std::vector<LossRecord>& records, const EvoConfig& evo, Rng& rng);

// Operators without the tolerance check.
// Each degree of freedom is redrawn from the target bucket with probability mutation_prob.
WidthConfig mutate(const WidthConfig& config, const SearchSpace& space, const PriorDistribution& dist,
                   const EvoConfig& evo, Rng& rng);
// Each degree of freedom taken from a or b with equal probability.
WidthConfig crossover(const WidthConfig& a, const WidthConfig& b, const SearchSpace& space, Rng& rng);

// Operators with rejection: redrawn up to max_attempts times until in
// tolerance, then replaced by a prior sample.
WidthConfig mutate_offspring(const WidthConfig& config, const SearchSpace& space, const PriorDistribution& dist,
                             const EvoConfig& evo, Rng& rng);
WidthConfig crossover_offspring(const WidthConfig& a, const WidthConfig& b, const SearchSpace& space,
                                const PriorDistribution& dist, const EvoConfig& evo, Rng& rng);

class FitnessEvaluator {
 public:
  virtual ~FitnessEvaluator() = default;
  virtual double evaluate(const WidthConfig& config) = 0;
};

class OracleFitness final : public FitnessEvaluator {
 public:
  explicit OracleFitness(std::function<double(const WidthConfig&)> fn) : fn_(std::move(fn)) {}
  double evaluate(const WidthConfig& config) override { return fn_(config); }

 private:
  std::function<double(const WidthConfig&)> fn_;
};

// Recalibrates batch norm for the candidate, then scores top-1 on the
// validation batches. The spans must outlive the evaluator.
template <typename T>
class SupernetFitness final : public FitnessEvaluator {
 public:
  SupernetFitness(SupernetHandle<T>& handle, std::span<const Tensor<T>> validation,
                  std::span<const std::vector<int>> validation_labels, std::span<const Tensor<T>> calibration)
      : handle_(handle), validation_(validation), labels_(validation_labels), calibration_(calibration) {}

  double evaluate(const WidthConfig& config) override {
    recalibrate_bn(handle_, config, calibration_);
    return subnet_accuracy(handle_, config, validation_, labels_);
  }

 private:
  SupernetHandle<T>& handle_;
  std::span<const Tensor<T>> validation_;
  std::span<const std::vector<int>> labels_;
  std::span<const Tensor<T>> calibration_;
};

Candidate evaluate(Candidate candidate, FitnessEvaluator& fitness);

struct SearchLogEntry {
  int generation = 0;
  Candidate candidate;
};

struct SearchResult {
  std::vector<Candidate> ranked;            // every evaluated candidate, best first
  std::vector<SearchLogEntry> log;          // evaluation order
  std::vector<double> best_by_generation;   // best accuracy seen so far after each generation
};

// Generation 0 is the initial population; generations 1..evo.generations
// are bred from the top parent_count of everything evaluated so far.
SearchResult search(const SearchSpace& space, const PriorDistribution& dist, const std::vector<LossRecord>& records,
                    const EvoConfig& evo, FitnessEvaluator& fitness);

// {generation, widths, flops, params, proxy_accuracy} per line.
void write_search_log(std::ostream& out, const std::vector<SearchLogEntry>& log);
// rank,widths,flops,params,proxy_accuracy with widths quoted "a,b,...".
void write_ranked_csv(std::ostream& out, const std::vector<Candidate>& ranked);

}  // namespace parawidth
