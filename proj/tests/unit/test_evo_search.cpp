#include <algorithm>
#include <numeric>
#include <set>
#include <sstream>

#include "doctest.h"
#include "parawidth/errors.hpp"
#include "parawidth/evo_search.hpp"
#include "spaces.hpp"
#include "test_nets.hpp"

using namespace parawidth;

namespace {

double width_sum(const WidthConfig& c) { return std::accumulate(c.widths.begin(), c.widths.end(), 0.0); }

// Deterministic but unstructured fitness.
double scrambled(const WidthConfig& c) {
  std::uint64_t h = 0x9e3779b97f4a7c15ull;
  for (int w : c.widths) h = (h ^ static_cast<std::uint64_t>(w)) * 0xbf58476d1ce4e5b9ull;
  return static_cast<double>(h >> 11) / static_cast<double>(1ull << 53);
}

struct Fixture {
  SearchSpace space;
  std::vector<LossRecord> records;
  PriorDistribution dist;
  EvoConfig evo;
};

Fixture enumerable_fixture(std::uint64_t seed, double tolerance_fraction = 0.1) {
  Rng rng(seed);
  Fixture f;
  f.space = testnets::long_tail_space(rng, 4, 8);
  f.records = testnets::synthetic_records(f.space, rng, 1000, 4);
  f.dist = build_distribution(f.records, f.space, default_bucket_width(f.space), Weighting::kInverseProxy);
  const auto max_flops = flops(f.space, largest_config(f.space));
  f.evo.target_flops = max_flops / 2;
  f.evo.tolerance = tolerance_fraction * static_cast<double>(max_flops);
  f.evo.seed = seed;
  return f;
}

Candidate brute_force_best(const Fixture& f, const std::function<double(const WidthConfig&)>& fn) {
  std::optional<Candidate> best;
  enumerate_configs(f.space, [&](const WidthConfig& c) {
    if (!within_tolerance(f.space, c, f.evo)) return;
    Candidate cand = make_candidate(f.space, c);
    cand.proxy_accuracy = fn(c);
    if (!best || ranks_before(cand, *best)) best = cand;
  });
  REQUIRE(best);
  return *best;
}

}  // namespace

TEST_CASE("EvoConfig validation") {
  EvoConfig evo;
  CHECK_NOTHROW(evo.validate());
  auto bad = evo;
  bad.population_size = 5;
  CHECK_THROWS_AS(bad.validate(), ConfigError);
  bad = evo;
  bad.parent_count = 129;
  CHECK_THROWS_AS(bad.validate(), ConfigError);
  bad = evo;
  bad.generations = 0;
  CHECK_THROWS_AS(bad.validate(), ConfigError);
  bad = evo;
  bad.mutation_prob = 1.5;
  CHECK_THROWS_AS(bad.validate(), ConfigError);
}

TEST_CASE("ranking tie-break") {
  Candidate a{{{8}}, 100, 10, 0.5}, b{{{16}}, 200, 10, 0.5}, c{{{24}}, 100, 20, 0.5}, d{{{32}}, 300, 30, 0.6};
  std::vector<Candidate> v{a, b, c, d};
  std::sort(v.begin(), v.end(), ranks_before);
  CHECK(v[0].config.widths[0] == 32);
  CHECK(v[1].config.widths[0] == 8);
  CHECK(v[2].config.widths[0] == 24);
  CHECK(v[3].config.widths[0] == 16);
}

TEST_CASE("init_population examples") {
  auto f = enumerable_fixture(3);
  f.evo.population_size = 4;
  f.evo.parent_count = 2;
  Rng rng(1);
  SUBCASE("record seeded half") {
    const auto table = build_proxy_table(f.records);
    const auto seeds = top_records(f.records, table, f.dist.weighting, 2, f.evo.target_flops, f.evo.tolerance);
    REQUIRE(seeds.size() == 2);
    const auto pop = init_population(f.space, f.dist, f.records, f.evo, rng);
    REQUIRE(pop.size() == 4);
    CHECK(pop[0].config == seeds[0]);
    CHECK(pop[1].config == seeds[1]);
    std::set<WidthConfig> distinct;
    for (const auto& c : pop) distinct.insert(c.config);
    CHECK(distinct.size() == 4);
  }
  SUBCASE("no qualifying records") {
    std::vector<LossRecord> far;
    for (const auto& r : f.records) {
      if (std::abs(static_cast<double>(r.flops - f.evo.target_flops)) > f.evo.tolerance) far.push_back(r);
    }
    const auto pop = init_population(f.space, f.dist, far, f.evo, rng);
    CHECK(pop.size() == 4);
  }
  SUBCASE("every member is within tolerance") {
    for (std::uint64_t s = 0; s < 20; ++s) {
      auto g = enumerable_fixture(s);
      g.evo.population_size = 32;
      g.evo.parent_count = 8;
      Rng r(s);
      for (const auto& c : init_population(g.space, g.dist, g.records, g.evo, r)) {
        CHECK(within_tolerance(g.space, c.config, g.evo));
        CHECK(c.flops == flops(g.space, c.config));
        CHECK(c.params == params(g.space, c.config));
      }
    }
  }
  SUBCASE("unsatisfiable constraint propagates") {
    f.evo.target_flops = 1;
    f.evo.tolerance = 0.0;
    f.evo.max_sample_trials = 50;
    CHECK_THROWS_AS(init_population(f.space, f.dist, f.records, f.evo, rng), SamplingExhausted);
  }
}

TEST_CASE("operator properties") {
  Rng rng(17);
  for (int trial = 0; trial < 50; ++trial) {
    auto f = enumerable_fixture(static_cast<std::uint64_t>(trial));
    const WidthConfig a = sample_uniform(f.space, rng);
    const WidthConfig b = sample_uniform(f.space, rng);
    f.evo.mutation_prob = 0.0;
    CHECK(mutate(a, f.space, f.dist, f.evo, rng) == a);
    CHECK(crossover(a, a, f.space, rng) == a);
    const WidthConfig child = crossover(a, b, f.space, rng);
    for (std::size_t l = 0; l < a.widths.size(); ++l) {
      CHECK((child.widths[l] == a.widths[l] || child.widths[l] == b.widths[l]));
    }
    f.evo.mutation_prob = 1.0;
    CHECK(is_valid(f.space, mutate(a, f.space, f.dist, f.evo, rng)));
    f.evo.mutation_prob = 0.3;
    CHECK(within_tolerance(f.space, mutate_offspring(a, f.space, f.dist, f.evo, rng), f.evo));
    CHECK(within_tolerance(f.space, crossover_offspring(a, b, f.space, f.dist, f.evo, rng), f.evo));
  }
}

TEST_CASE("operators keep coupled layers equal") {
  std::vector<LayerSpec> specs;
  for (int l = 0; l < 4; ++l) {
    LayerSpec s;
    s.name = "c" + std::to_string(l);
    s.max_out_channels = 32;
    s.group_count = 4;
    s.source = l - 1;
    if (l % 2 == 0) s.coupling_group = "even";
    specs.push_back(s);
  }
  const SearchSpace space(specs, 3, 0.0, {4, 4});
  Rng rng(2);
  const auto records = testnets::synthetic_records(space, rng, 10, 4);
  const auto dist = build_distribution(records, space, default_bucket_width(space), Weighting::kFrequency);
  EvoConfig evo;
  evo.mutation_prob = 0.7;
  evo.target_flops = flops(space, largest_config(space)) / 2;
  for (int i = 0; i < 200; ++i) {
    const auto a = sample_uniform(space, rng), b = sample_uniform(space, rng);
    for (const auto& c : {mutate(a, space, dist, evo, rng), crossover(a, b, space, rng)}) {
      CHECK(c.widths[0] == c.widths[2]);
      CHECK(is_valid(space, c));
    }
  }
}

TEST_CASE("search returns the only in-tolerance config") {
  auto f = enumerable_fixture(4);
  const auto lone = largest_config(f.space);
  f.evo.target_flops = flops(f.space, lone);
  f.evo.tolerance = 0.0;
  std::int64_t runner_up = 0;
  enumerate_configs(f.space, [&](const WidthConfig& c) {
    if (c != lone) runner_up = std::max(runner_up, flops(f.space, c));
  });
  REQUIRE(runner_up < f.evo.target_flops);
  f.evo.population_size = 8;
  f.evo.parent_count = 4;
  f.evo.generations = 3;
  OracleFitness fit(width_sum);
  const auto result = search(f.space, f.dist, f.records, f.evo, fit);
  REQUIRE(result.ranked.size() == 1);
  CHECK(result.ranked[0].config == lone);
  CHECK(result.best_by_generation.size() == 4);
}

TEST_CASE("search finds the brute-force optimum on enumerable spaces") {
  for (std::uint64_t seed = 0; seed < 10; ++seed) {
    for (auto fn : {&width_sum, &scrambled}) {
      auto f = enumerable_fixture(seed);
      f.evo.population_size = 64;
      f.evo.parent_count = 32;
      f.evo.generations = 64;
      OracleFitness fit(fn);
      const auto result = search(f.space, f.dist, f.records, f.evo, fit);
      const Candidate best = brute_force_best(f, fn);
      REQUIRE(!result.ranked.empty());
      CHECK(result.ranked[0].config == best.config);
      for (std::size_t i = 1; i < result.best_by_generation.size(); ++i) {
        CHECK(result.best_by_generation[i] >= result.best_by_generation[i - 1]);
      }
      std::set<WidthConfig> distinct;
      for (const auto& e : result.log) {
        CHECK(within_tolerance(f.space, e.candidate.config, f.evo));
        distinct.insert(e.candidate.config);
      }
      CHECK(distinct.size() == result.log.size());
      CHECK(result.ranked.size() == result.log.size());
    }
  }
}

TEST_CASE("search is deterministic given the seed") {
  auto f = enumerable_fixture(6);
  f.evo.population_size = 16;
  f.evo.parent_count = 8;
  f.evo.generations = 5;
  OracleFitness fit(scrambled);
  const auto a = search(f.space, f.dist, f.records, f.evo, fit);
  const auto b = search(f.space, f.dist, f.records, f.evo, fit);
  REQUIRE(a.log.size() == b.log.size());
  for (std::size_t i = 0; i < a.log.size(); ++i) CHECK(a.log[i].candidate.config == b.log[i].candidate.config);
  f.evo.seed = 7;
  const auto c = search(f.space, f.dist, f.records, f.evo, fit);
  bool differs = c.log.size() != a.log.size();
  for (std::size_t i = 0; !differs && i < a.log.size(); ++i) differs = a.log[i].candidate.config != c.log[i].candidate.config;
  CHECK(differs);
}

TEST_CASE("search log and ranked table formats") {
  auto f = enumerable_fixture(1);
  f.evo.population_size = 4;
  f.evo.parent_count = 2;
  f.evo.generations = 1;
  OracleFitness fit(scrambled);
  const auto result = search(f.space, f.dist, f.records, f.evo, fit);
  std::ostringstream log, csv;
  write_search_log(log, result.log);
  write_ranked_csv(csv, result.ranked);
  std::istringstream lines(log.str());
  std::string line;
  std::size_t n = 0;
  while (std::getline(lines, line)) {
    const auto j = nlohmann::json::parse(line);
    CHECK(j.at("widths").size() == 4);
    CHECK(j.at("proxy_accuracy").get<double>() == scrambled(WidthConfig{j.at("widths").get<std::vector<int>>()}));
    ++n;
  }
  CHECK(n == result.log.size());
  const std::string table = csv.str();
  CHECK(table.rfind("rank,widths,flops,params,proxy_accuracy\n1,\"", 0) == 0);
  CHECK(parse_widths(table.substr(table.find('"') + 1, table.find('"', table.find('"') + 1) - table.find('"') - 1)) ==
        result.ranked[0].config);
}

TEST_CASE("supernet fitness is a deterministic top-1 fraction") {
  Rng rng(12);
  auto arch = testnets::two_layer_net(3, 16, 16, 4, 6, 4, true);
  SupernetHandle<float> handle{Network<float>(arch, 3), BnMode::kFrozen, std::nullopt};
  std::vector<Tensor<float>> val, cal;
  std::vector<std::vector<int>> labels;
  for (int i = 0; i < 3; ++i) {
    val.push_back(testnets::random_tensor<float>(8, 3, 6, 6, rng));
    labels.push_back(testnets::random_labels(8, 4, rng));
    cal.push_back(testnets::random_tensor<float>(8, 3, 6, 6, rng));
  }
  SupernetFitness<float> fit(handle, val, labels, cal);
  const SearchSpace& space = handle.space();
  for (int i = 0; i < 10; ++i) {
    const auto cfg = sample_uniform(space, rng);
    const double a = evaluate(make_candidate(space, cfg), fit).proxy_accuracy.value();
    const double b = fit.evaluate(cfg);
    CHECK(a == b);
    CHECK(a >= 0.0);
    CHECK(a <= 1.0);
    CHECK(handle.bn_mode == BnMode::kRecalibrated);
    CHECK(handle.calibrated_for == cfg);
  }
}
