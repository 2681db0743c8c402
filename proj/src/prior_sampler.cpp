#include "parawidth/prior_sampler.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <unordered_map>

#include "parawidth/errors.hpp"

namespace parawidth {

Weighting parse_weighting(const std::string& name) {
  if (name == "inverse-proxy") return Weighting::kInverseProxy;
  if (name == "literal-proxy") return Weighting::kLiteralProxy;
  if (name == "frequency") return Weighting::kFrequency;
  throw ConfigError("unknown weighting '" + name + "' (inverse-proxy, literal-proxy, frequency)");
}

std::string weighting_name(Weighting w) {
  switch (w) {
    case Weighting::kInverseProxy: return "inverse-proxy";
    case Weighting::kLiteralProxy: return "literal-proxy";
    case Weighting::kFrequency: return "frequency";
  }
  return "inverse-proxy";
}

double proxy_loss(const LossRecord& record, double largest_loss_at_t, double final_largest_loss) {
  if (!(final_largest_loss > 0.0)) {
    throw NormalizationError("final largest-subnet loss must be positive, got " + std::to_string(final_largest_loss));
  }
  return largest_loss_at_t / final_largest_loss * record.raw_loss;
}

ProxyLossTable build_proxy_table(const std::vector<LossRecord>& records) {
  if (records.empty()) throw BuildError("no loss records");
  ProxyLossTable table;
  std::map<long, std::pair<double, int>> sums;
  for (const auto& r : records) {
    if (!r.is_largest) continue;
    auto& s = sums[r.iteration];
    s.first += r.raw_loss;
    s.second += 1;
  }
  for (const auto& [iter, s] : sums) table.largest_loss_by_iter[iter] = s.first / s.second;
  long last = std::numeric_limits<long>::min();
  for (const auto& r : records) last = std::max(last, r.iteration);
  auto final_it = table.largest_loss_by_iter.find(last);
  if (final_it == table.largest_loss_by_iter.end()) {
    throw BuildError("no largest-subnet record at the final iteration " + std::to_string(last));
  }
  table.final_largest_loss = final_it->second;
  table.proxy.reserve(records.size());
  for (const auto& r : records) {
    auto it = table.largest_loss_by_iter.find(r.iteration);
    if (it == table.largest_loss_by_iter.end()) {
      throw BuildError("no largest-subnet record at iteration " + std::to_string(r.iteration));
    }
    table.proxy.push_back(proxy_loss(r, it->second, table.final_largest_loss));
  }
  return table;
}

int PriorDistribution::bucket_of(std::int64_t flops) const {
  if (weights.empty()) throw BuildError("distribution has no buckets");
  if (flops < 0) return 0;
  const std::int64_t b = flops / bucket_width;
  return static_cast<int>(std::min<std::int64_t>(b, num_buckets() - 1));
}

std::vector<std::vector<double>> PriorDistribution::dof_categoricals(const SearchSpace& space, int bucket) const {
  if (bucket < 0 || bucket >= num_buckets()) throw IndexError("bucket " + std::to_string(bucket) + " out of range");
  if (static_cast<int>(choices.size()) != space.num_layers()) {
    throw ConfigError("distribution has " + std::to_string(choices.size()) + " layers, space has " +
                      std::to_string(space.num_layers()));
  }
  std::vector<std::vector<double>> out;
  out.reserve(static_cast<std::size_t>(space.num_dofs()));
  for (int d = 0; d < space.num_dofs(); ++d) {
    const auto& members = space.dof_layers(d);
    std::vector<double> p(choices[static_cast<std::size_t>(members.front())].size(), 1.0);
    for (int l : members) {
      const auto& w = weights[static_cast<std::size_t>(bucket)][static_cast<std::size_t>(l)];
      for (std::size_t k = 0; k < p.size(); ++k) p[k] *= w[k];
    }
    double total = 0.0;
    for (double v : p) total += v;
    if (total > 0.0) {
      for (double& v : p) v /= total;
    } else {
      std::fill(p.begin(), p.end(), 1.0 / static_cast<double>(p.size()));
    }
    out.push_back(std::move(p));
  }
  return out;
}

std::int64_t default_bucket_width(const SearchSpace& space) {
  return std::max<std::int64_t>(1, flops(space, largest_config(space)) / 20);
}

PriorDistribution build_distribution(const std::vector<LossRecord>& records, const SearchSpace& space,
                                     std::int64_t bucket_width, Weighting weighting) {
  if (records.empty()) throw BuildError("no loss records");
  if (bucket_width <= 0) throw BuildError("bucket width must be positive");
  for (const auto& r : records) {
    if (!is_valid(space, r.widths)) {
      throw BuildError("record at iteration " + std::to_string(r.iteration) + " has widths " + to_string(r.widths) +
                       " outside the search space");
    }
  }
  std::vector<double> g(records.size(), 1.0);
  if (weighting != Weighting::kFrequency) {
    const ProxyLossTable table = build_proxy_table(records);
    for (std::size_t i = 0; i < records.size(); ++i) {
      const double p = table.proxy[i];
      if (weighting == Weighting::kInverseProxy) {
        if (!(p > 0.0)) throw NormalizationError("zero proxy loss cannot be inverted");
        g[i] = 1.0 / p;
      } else {
        g[i] = p;
      }
    }
  }

  PriorDistribution dist;
  dist.weighting = weighting;
  dist.bucket_width = bucket_width;
  dist.space_fingerprint = space.fingerprint();
  const std::int64_t max_flops = flops(space, largest_config(space));
  const int buckets = static_cast<int>(max_flops / bucket_width) + 1;
  for (int b = 0; b <= buckets; ++b) dist.bucket_edges.push_back(static_cast<std::int64_t>(b) * bucket_width);
  for (int l = 0; l < space.num_layers(); ++l) dist.choices.push_back(space.choices(l));

  dist.weights.assign(static_cast<std::size_t>(buckets), {});
  for (auto& bucket : dist.weights) {
    for (const auto& c : dist.choices) bucket.emplace_back(c.size(), 0.0);
  }
  for (std::size_t i = 0; i < records.size(); ++i) {
    const int b = dist.bucket_of(records[i].flops);
    for (int l = 0; l < space.num_layers(); ++l) {
      const auto& ch = dist.choices[static_cast<std::size_t>(l)];
      const auto k = std::lower_bound(ch.begin(), ch.end(), records[i].widths.widths[static_cast<std::size_t>(l)]) - ch.begin();
      dist.weights[static_cast<std::size_t>(b)][static_cast<std::size_t>(l)][static_cast<std::size_t>(k)] += g[i];
    }
  }
  dist.fallback.assign(static_cast<std::size_t>(buckets), std::vector<bool>(static_cast<std::size_t>(space.num_layers()), false));
  for (int b = 0; b < buckets; ++b) {
    for (int l = 0; l < space.num_layers(); ++l) {
      auto& w = dist.weights[static_cast<std::size_t>(b)][static_cast<std::size_t>(l)];
      double total = 0.0;
      for (double v : w) total += v;
      if (total > 0.0) {
        for (double& v : w) v /= total;
      } else {
        std::fill(w.begin(), w.end(), 1.0 / static_cast<double>(w.size()));
        dist.fallback[static_cast<std::size_t>(b)][static_cast<std::size_t>(l)] = true;
      }
    }
  }
  return dist;
}

namespace {

std::vector<std::vector<double>> cumulative(const std::vector<std::vector<double>>& cats) {
  std::vector<std::vector<double>> cdfs = cats;
  for (auto& c : cdfs) {
    double run = 0.0;
    for (double& v : c) {
      run += v;
      v = run;
    }
  }
  return cdfs;
}

std::size_t draw(const std::vector<double>& cdf, Rng& rng) {
  const double u = std::uniform_real_distribution<double>(0.0, cdf.back())(rng);
  const auto it = std::upper_bound(cdf.begin(), cdf.end(), u);
  return std::min<std::size_t>(static_cast<std::size_t>(it - cdf.begin()), cdf.size() - 1);
}

}  // namespace

SampleResult sample_conditioned(const PriorDistribution& dist, const SearchSpace& space, std::int64_t target_flops,
                                double tolerance, Rng& rng, long max_trials) {
  if (max_trials < 1) throw ConfigError("max_trials must be at least 1");
  const auto cdfs = cumulative(dist.dof_categoricals(space, dist.bucket_of(target_flops)));
  std::vector<int> dof_widths(static_cast<std::size_t>(space.num_dofs()));
  WidthConfig config;
  double closest = std::numeric_limits<double>::infinity();
  for (long trial = 1; trial <= max_trials; ++trial) {
    for (int d = 0; d < space.num_dofs(); ++d) {
      dof_widths[static_cast<std::size_t>(d)] = space.dof_choices(d)[draw(cdfs[static_cast<std::size_t>(d)], rng)];
    }
    config = space.expand(dof_widths);
    const double f = static_cast<double>(flops_unchecked(space, config));
    if (std::abs(f - static_cast<double>(target_flops)) <= tolerance) return {std::move(config), trial};
    if (std::abs(f - target_flops) < std::abs(closest - target_flops)) closest = f;
  }
  throw SamplingExhausted(max_trials, closest, static_cast<double>(target_flops));
}

SampleResult sample_uniform_rejection(const SearchSpace& space, std::int64_t target_flops, double tolerance, Rng& rng,
                                      long max_trials) {
  if (max_trials < 1) throw ConfigError("max_trials must be at least 1");
  double closest = std::numeric_limits<double>::infinity();
  for (long trial = 1; trial <= max_trials; ++trial) {
    WidthConfig config = sample_uniform(space, rng);
    const double f = static_cast<double>(flops_unchecked(space, config));
    if (std::abs(f - static_cast<double>(target_flops)) <= tolerance) return {std::move(config), trial};
    if (std::abs(f - target_flops) < std::abs(closest - target_flops)) closest = f;
  }
  throw SamplingExhausted(max_trials, closest, static_cast<double>(target_flops));
}

std::vector<WidthConfig> top_records(const std::vector<LossRecord>& records, const ProxyLossTable& table,
                                     Weighting weighting, int count, std::int64_t target_flops, double tolerance) {
  if (count < 1) throw ConfigError("count must be at least 1");
  if (table.proxy.size() != records.size()) throw BuildError("proxy table does not match the records");
  const bool descending = weighting == Weighting::kLiteralProxy;
  std::unordered_map<WidthConfig, double, WidthConfigHash> best;
  for (std::size_t i = 0; i < records.size(); ++i) {
    const auto& r = records[i];
    if (std::abs(static_cast<double>(r.flops) - static_cast<double>(target_flops)) > tolerance) continue;
    const double p = table.proxy[i];
    auto [it, inserted] = best.emplace(r.widths, p);
    if (!inserted && (descending ? p > it->second : p < it->second)) it->second = p;
  }
  std::vector<std::pair<WidthConfig, double>> ranked(best.begin(), best.end());
  std::sort(ranked.begin(), ranked.end(), [descending](const auto& a, const auto& b) {
    if (a.second != b.second) return descending ? a.second > b.second : a.second < b.second;
    return a.first < b.first;
  });
  std::vector<WidthConfig> out;
  for (std::size_t i = 0; i < ranked.size() && static_cast<int>(i) < count; ++i) out.push_back(ranked[i].first);
  return out;
}

nlohmann::json distribution_to_json(const PriorDistribution& dist) {
  nlohmann::ordered_json j;
  j["weighting"] = weighting_name(dist.weighting);
  j["bucket_width"] = dist.bucket_width;
  j["bucket_edges"] = dist.bucket_edges;
  j["space_fingerprint"] = dist.space_fingerprint;
  j["choices"] = dist.choices;
  nlohmann::ordered_json buckets = nlohmann::ordered_json::array();
  for (int b = 0; b < dist.num_buckets(); ++b) {
    nlohmann::ordered_json layers = nlohmann::ordered_json::array();
    for (std::size_t l = 0; l < dist.choices.size(); ++l) {
      nlohmann::ordered_json cell = nlohmann::ordered_json::object();
      for (std::size_t k = 0; k < dist.choices[l].size(); ++k) {
        cell[std::to_string(dist.choices[l][k])] = dist.weights[static_cast<std::size_t>(b)][l][k];
      }
      layers.push_back(cell);
    }
    std::vector<bool> flags = dist.fallback[static_cast<std::size_t>(b)];
    buckets.push_back({{"weights", layers}, {"fallback", flags}});
  }
  j["buckets"] = buckets;
  return nlohmann::json(j);
}

PriorDistribution distribution_from_json(const nlohmann::json& j) {
  try {
    PriorDistribution dist;
    dist.weighting = parse_weighting(j.at("weighting").get<std::string>());
    dist.bucket_width = j.at("bucket_width").get<std::int64_t>();
    dist.bucket_edges = j.at("bucket_edges").get<std::vector<std::int64_t>>();
    dist.space_fingerprint = j.at("space_fingerprint").get<std::uint64_t>();
    dist.choices = j.at("choices").get<std::vector<std::vector<int>>>();
    if (dist.bucket_width <= 0) throw ConfigError("bucket_width must be positive");
    for (const auto& bucket : j.at("buckets")) {
      std::vector<std::vector<double>> layers;
      const auto& cells = bucket.at("weights");
      if (cells.size() != dist.choices.size()) throw ConfigError("bucket layer count mismatch");
      for (std::size_t l = 0; l < dist.choices.size(); ++l) {
        std::vector<double> w;
        for (int c : dist.choices[l]) w.push_back(cells[l].at(std::to_string(c)).get<double>());
        layers.push_back(std::move(w));
      }
      dist.weights.push_back(std::move(layers));
      dist.fallback.push_back(bucket.at("fallback").get<std::vector<bool>>());
    }
    if (dist.weights.empty() || dist.bucket_edges.size() != dist.weights.size() + 1) {
      throw ConfigError("bucket_edges must have one more entry than buckets");
    }
    return dist;
  } catch (const nlohmann::json::exception& e) {
    throw ConfigError(std::string("prior distribution: ") + e.what());
  }
}

}  // namespace parawidth
