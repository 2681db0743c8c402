#include "parawidth/evo_search.hpp"

#include <algorithm>
#include <cmath>
#include <ostream>
#include <unordered_set>

#include "json.hpp"
#include "parawidth/errors.hpp"

namespace parawidth {

Candidate make_candidate(const SearchSpace& space, const WidthConfig& config) {
  return Candidate{config, flops(space, config), params(space, config), std::nullopt};
}

bool ranks_before(const Candidate& a, const Candidate& b) {
  const double acc_a = a.proxy_accuracy.value_or(-1.0);
  const double acc_b = b.proxy_accuracy.value_or(-1.0);
  if (acc_a != acc_b) return acc_a > acc_b;
  if (a.flops != b.flops) return a.flops < b.flops;
  if (a.params != b.params) return a.params < b.params;
  return a.config < b.config;
}

void EvoConfig::validate() const {
  if (population_size < 2 || population_size % 2 != 0) throw ConfigError("population_size must be even and >= 2");
  if (parent_count < 1 || parent_count > population_size) throw ConfigError("parent_count must lie in [1, P]");
  if (!(mutation_prob >= 0.0 && mutation_prob <= 1.0)) throw ConfigError("mutation_prob must lie in [0, 1]");
  if (generations < 1) throw ConfigError("generations must be >= 1");
  if (!(tolerance >= 0.0)) throw ConfigError("tolerance must be non-negative");
  if (!(crossover_fraction >= 0.0 && crossover_fraction <= 1.0)) throw ConfigError("crossover_fraction must lie in [0, 1]");
  if (max_attempts < 1) throw ConfigError("max_attempts must be >= 1");
  if (max_sample_trials < 1) throw ConfigError("max_sample_trials must be >= 1");
}

bool within_tolerance(const SearchSpace& space, const WidthConfig& config, const EvoConfig& evo) {
  const double f = static_cast<double>(flops_unchecked(space, config));
  return std::abs(f - static_cast<double>(evo.target_flops)) <= evo.tolerance;
}

namespace {

using ConfigSet = std::unordered_set<WidthConfig, WidthConfigHash>;

WidthConfig prior_sample(const SearchSpace& space, const PriorDistribution& dist, const EvoConfig& evo, Rng& rng) {
  return sample_conditioned(dist, space, evo.target_flops, evo.tolerance, rng, evo.max_sample_trials).config;
}

// A prior sample not in `seen`, or nullopt after max_attempts duplicates.
std::optional<WidthConfig> fresh_prior_sample(const SearchSpace& space, const PriorDistribution& dist,
                                              const EvoConfig& evo, Rng& rng, const ConfigSet& seen) {
  for (int attempt = 0; attempt < evo.max_attempts; ++attempt) {
    WidthConfig c = prior_sample(space, dist, evo, rng);
    if (!seen.contains(c)) return c;
  }
  return std::nullopt;
}

std::vector<WidthConfig> record_seeds(const std::vector<LossRecord>& records, const PriorDistribution& dist,
                                      const EvoConfig& evo, int count) {
  if (records.empty() || count < 1) return {};
  ProxyLossTable table;
  try {
    table = build_proxy_table(records);
  } catch (const BuildError&) {
    if (dist.weighting != Weighting::kFrequency) throw;
    return {};
  }
  return top_records(records, table, dist.weighting, count, evo.target_flops, evo.tolerance);
}

}  // namespace

std::vector<Candidate> init_population(const SearchSpace& space, const PriorDistribution& dist,
                                       const std::vector<LossRecord>& records, const EvoConfig& evo, Rng& rng) {
  evo.validate();
  ConfigSet seen;
  std::vector<Candidate> population;
  for (const auto& c : record_seeds(records, dist, evo, evo.population_size / 2)) {
    if (seen.insert(c).second) population.push_back(make_candidate(space, c));
  }
  while (static_cast<int>(population.size()) < evo.population_size) {
    auto c = fresh_prior_sample(space, dist, evo, rng, seen);
    if (!c) break;
    seen.insert(*c);
    population.push_back(make_candidate(space, *c));
  }
  return population;
}

WidthConfig mutate(const WidthConfig& config, const SearchSpace& space, const PriorDistribution& dist,
                   const EvoConfig& evo, Rng& rng) {
  const auto cats = dist.dof_categoricals(space, dist.bucket_of(evo.target_flops));
  std::bernoulli_distribution flip(evo.mutation_prob);
  std::vector<int> dof(static_cast<std::size_t>(space.num_dofs()));
  for (int d = 0; d < space.num_dofs(); ++d) {
    const auto& members = space.dof_layers(d);
    int w = config.widths[static_cast<std::size_t>(members.front())];
    if (flip(rng)) {
      const auto& cat = cats[static_cast<std::size_t>(d)];
      std::discrete_distribution<std::size_t> pick(cat.begin(), cat.end());
      w = space.dof_choices(d)[pick(rng)];
    }
    dof[static_cast<std::size_t>(d)] = w;
  }
  return space.expand(dof);
}

WidthConfig crossover(const WidthConfig& a, const WidthConfig& b, const SearchSpace& space, Rng& rng) {
  std::bernoulli_distribution coin(0.5);
  std::vector<int> dof(static_cast<std::size_t>(space.num_dofs()));
  for (int d = 0; d < space.num_dofs(); ++d) {
    const auto l = static_cast<std::size_t>(space.dof_layers(d).front());
    dof[static_cast<std::size_t>(d)] = coin(rng) ? a.widths[l] : b.widths[l];
  }
  return space.expand(dof);
}

WidthConfig mutate_offspring(const WidthConfig& config, const SearchSpace& space, const PriorDistribution& dist,
                             const EvoConfig& evo, Rng& rng) {
  for (int attempt = 0; attempt < evo.max_attempts; ++attempt) {
    WidthConfig child = mutate(config, space, dist, evo, rng);
    if (within_tolerance(space, child, evo)) return child;
  }
  return prior_sample(space, dist, evo, rng);
}

WidthConfig crossover_offspring(const WidthConfig& a, const WidthConfig& b, const SearchSpace& space,
                                const PriorDistribution& dist, const EvoConfig& evo, Rng& rng) {
  for (int attempt = 0; attempt < evo.max_attempts; ++attempt) {
    WidthConfig child = crossover(a, b, space, rng);
    if (within_tolerance(space, child, evo)) return child;
  }
  return prior_sample(space, dist, evo, rng);
}

Candidate evaluate(Candidate candidate, FitnessEvaluator& fitness) {
  const double acc = fitness.evaluate(candidate.config);
  if (!std::isfinite(acc)) throw Error("fitness returned a non-finite value for " + to_string(candidate.config));
  candidate.proxy_accuracy = acc;
  return candidate;
}

SearchResult search(const SearchSpace& space, const PriorDistribution& dist, const std::vector<LossRecord>& records,
                    const EvoConfig& evo, FitnessEvaluator& fitness) {
  evo.validate();
  Rng rng(evo.seed);
  SearchResult result;
  ConfigSet seen;
  std::vector<Candidate> evaluated;

  auto run_generation = [&](int generation, const std::vector<Candidate>& members) {
    for (const auto& m : members) {
      Candidate c = evaluate(m, fitness);
      evaluated.push_back(c);
      result.log.push_back({generation, std::move(c)});
    }
    const auto best = std::min_element(evaluated.begin(), evaluated.end(), ranks_before);
    result.best_by_generation.push_back(best == evaluated.end() ? 0.0 : *best->proxy_accuracy);
  };

  std::vector<Candidate> population = init_population(space, dist, records, evo, rng);
  for (const auto& c : population) seen.insert(c.config);
  run_generation(0, population);

  const int n_cross = static_cast<int>(std::lround(evo.crossover_fraction * evo.population_size));
  for (int g = 1; g <= evo.generations; ++g) {
    std::vector<Candidate> parents = evaluated;
    const auto k = std::min<std::size_t>(static_cast<std::size_t>(evo.parent_count), parents.size());
    std::partial_sort(parents.begin(), parents.begin() + static_cast<std::ptrdiff_t>(k), parents.end(), ranks_before);
    parents.resize(k);
    std::uniform_int_distribution<std::size_t> pick(0, k - 1);

    std::vector<Candidate> offspring;
    for (int i = 0; i < evo.population_size; ++i) {
      std::optional<WidthConfig> child;
      for (int attempt = 0; attempt < evo.max_attempts && !child; ++attempt) {
        WidthConfig c = i < n_cross
                            ? crossover_offspring(parents[pick(rng)].config, parents[pick(rng)].config, space, dist, evo, rng)
                            : mutate_offspring(parents[pick(rng)].config, space, dist, evo, rng);
        if (!seen.contains(c)) child = std::move(c);
      }
      if (!child) child = fresh_prior_sample(space, dist, evo, rng, seen);
      if (!child) continue;
      seen.insert(*child);
      offspring.push_back(make_candidate(space, *child));
    }
    run_generation(g, offspring);
  }

  result.ranked = std::move(evaluated);
  std::sort(result.ranked.begin(), result.ranked.end(), ranks_before);
  return result;
}

void write_search_log(std::ostream& out, const std::vector<SearchLogEntry>& log) {
  for (const auto& e : log) {
    nlohmann::ordered_json j;
    j["generation"] = e.generation;
    j["widths"] = e.candidate.config.widths;
    j["flops"] = e.candidate.flops;
    j["params"] = e.candidate.params;
    j["proxy_accuracy"] = e.candidate.proxy_accuracy ? nlohmann::ordered_json(*e.candidate.proxy_accuracy) : nullptr;
    out << j.dump() << '\n';
  }
}

void write_ranked_csv(std::ostream& out, const std::vector<Candidate>& ranked) {
  out << "rank,widths,flops,params,proxy_accuracy\n";
  for (std::size_t i = 0; i < ranked.size(); ++i) {
    const auto& c = ranked[i];
    out << i + 1 << ",\"" << to_string(c.config) << "\"," << c.flops << ',' << c.params << ',';
    if (c.proxy_accuracy) out << *c.proxy_accuracy;
    out << '\n';
  }
}

}  // namespace parawidth
