// parawidth command-line tool.

#include <algorithm>
#include <chrono>
#include <cmath>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <memory>
#include <numeric>
#include <sstream>

#include "CLI11.hpp"
#include "json.hpp"
#include "parawidth/errors.hpp"
#include "parawidth/pipeline.hpp"

namespace fs = std::filesystem;
using namespace parawidth;
using nlohmann::json;

namespace {

constexpr int kExitConfig = 2;
constexpr int kExitRuntime = 3;

// "4.1G", "300M", "2500000", or "50%" of the largest configuration.
std::int64_t parse_flops_arg(const std::string& text, const SearchSpace& space, const char* flag) {
  if (text.empty()) throw ConfigError(std::string(flag) + ": empty value");
  std::string number = text;
  double scale = 1.0;
  bool percent = false;
  switch (text.back()) {
    case 'k': case 'K': scale = 1e3; number.pop_back(); break;
    case 'm': case 'M': scale = 1e6; number.pop_back(); break;
    case 'g': case 'G': scale = 1e9; number.pop_back(); break;
    case '%': percent = true; number.pop_back(); break;
    default: break;
  }
  double value = 0.0;
  std::size_t used = 0;
  try {
    value = std::stod(number, &used);
  } catch (const std::exception&) {
    used = 0;
  }
  if (used == 0 || used != number.size() || !std::isfinite(value) || value < 0.0) {
    throw ConfigError(std::string(flag) + ": cannot parse '" + text + "'");
  }
  if (percent) return std::llround(value / 100.0 * static_cast<double>(flops(space, largest_config(space))));
  return std::llround(value * scale);
}

// A literal "a,b,..." or a file whose first non-empty line is one.
WidthConfig parse_widths_arg(const std::string& text) {
  if (fs::is_regular_file(text)) {
    std::ifstream in(text);
    std::string line;
    while (std::getline(in, line)) {
      if (line.find_first_not_of(" \t\r") != std::string::npos) return parse_widths(line);
    }
    throw ConfigError("no width vector in '" + text + "'");
  }
  return parse_widths(text);
}

std::string format_count(std::int64_t v) {
  std::ostringstream s;
  s.precision(3);
  if (v >= 1'000'000'000) s << static_cast<double>(v) / 1e9 << "G";
  else if (v >= 1'000'000) s << static_cast<double>(v) / 1e6 << "M";
  else if (v >= 1'000) s << static_cast<double>(v) / 1e3 << "K";
  else s << v;
  return s.str();
}

std::string path_in(const std::string& dir, const char* name) { return (fs::path(dir) / name).string(); }

void write_text(const std::string& path, const std::string& text) {
  std::ofstream out(path);
  if (!out) throw Error("cannot write '" + path + "'");
  out << text;
}

struct SpaceArgs {
  std::string path;
  int group_count = 0;
  double min_keep_ratio = 0.0;

  void add_to(CLI::App& cmd, bool required) {
    auto* opt = cmd.add_option("--space", path, "architecture description (JSON)");
    if (required) opt->required();
    cmd.add_option("--group-count", group_count, "override the description's group count K");
    cmd.add_option("--min-keep-ratio", min_keep_ratio, "override the description's minimum keep ratio");
  }
  SpaceOverrides overrides() const {
    SpaceOverrides o;
    if (group_count > 0) o.group_count = group_count;
    if (min_keep_ratio > 0.0) o.min_keep_ratio = min_keep_ratio;
    return o;
  }
  Architecture load() const { return load_architecture(path, overrides()); }
  json to_json() const {
    json j{{"space", path}};
    if (group_count > 0) j["group_count"] = group_count;
    if (min_keep_ratio > 0.0) j["min_keep_ratio"] = min_keep_ratio;
    return j;
  }
};

// The config's architecture unless --space names another one.
Architecture resolve_arch(const RunConfig* cfg, const SpaceArgs& space) {
  if (!space.path.empty()) return space.load();
  if (cfg == nullptr) throw ConfigError("either --space or --config is required");
  return cfg->load_arch();
}

class Timer {
 public:
  double seconds() const {
    return std::chrono::duration<double>(std::chrono::steady_clock::now() - start_).count();
  }

 private:
  std::chrono::steady_clock::time_point start_ = std::chrono::steady_clock::now();
};

// ---------------------------------------------------------------------------

struct TrainArgs {
  std::string config, out;
  std::optional<std::uint64_t> seed;
  std::optional<int> epochs;
  bool resume = false;
};

int run_train(const TrainArgs& a) {
  Timer timer;
  RunConfig cfg = load_run_config(a.config);
  if (a.seed) cfg.recipe.seed = *a.seed;
  if (a.epochs) cfg.recipe.epochs = *a.epochs;
  cfg.recipe.validate();
  const std::string out = a.out.empty() ? cfg.out_dir : a.out;
  if (out.empty()) throw ConfigError("no output directory: pass --out or set paths.out");

  const Architecture arch = cfg.load_arch();
  const Dataset data = load_dataset(cfg.recipe.dataset);
  TrainOptions options;
  options.out_dir = out;
  options.resume = a.resume;
  options.on_epoch = [&](const EpochSummary& e) {
    std::cerr << "epoch " << e.epoch << "/" << cfg.recipe.epochs << "  loss " << e.mean_loss << "  largest "
              << e.mean_largest_loss << "  " << e.seconds << "s\n";
  };
  const SupernetRun run = train_supernet(arch, cfg.recipe, data, options);
  std::cout << "trained " << run.iterations << " iterations, " << run.records.size() << " loss records -> " << out
            << "\n";

  RunManifest m;
  m.command = "train-supernet";
  m.config = run_config_to_json(cfg);
  m.inputs = {a.config, cfg.arch_path};
  m.outputs = {path_in(out, "records.jsonl"), path_in(out, "checkpoint.bin"), path_in(out, "manifest.json")};
  m.seed = cfg.recipe.seed;
  m.wall_clock_seconds = timer.seconds();
  write_run_manifest(out, m);
  return 0;
}

// ---------------------------------------------------------------------------

struct PriorArgs {
  std::string records, weighting = "inverse-proxy", bucket_width, out;
  SpaceArgs space;
};

int run_build_prior(const PriorArgs& a) {
  Timer timer;
  const Architecture arch = a.space.load();
  const Weighting weighting = parse_weighting(a.weighting);
  const std::int64_t width =
      a.bucket_width.empty() ? default_bucket_width(arch.space) : parse_flops_arg(a.bucket_width, arch.space, "--bucket-width");
  const auto records = read_records_file(a.records);
  if (records.empty()) throw BuildError("no loss records in '" + a.records + "'");
  const PriorDistribution dist = build_distribution(records, arch.space, width, weighting);

  fs::create_directories(a.out);
  const std::string path = path_in(a.out, "prior.json");
  write_text(path, distribution_to_json(dist).dump(2) + "\n");
  int fallback = 0;
  for (const auto& b : dist.fallback) fallback += static_cast<int>(std::count(b.begin(), b.end(), true));
  std::cout << dist.num_buckets() << " buckets of " << format_count(width) << " MACs, " << fallback
            << " fallback cells -> " << path << "\n";

  RunManifest m;
  m.command = "build-prior";
  m.config = a.space.to_json();
  m.config["weighting"] = weighting_name(weighting);
  m.config["bucket_width"] = width;
  m.inputs = {a.records, a.space.path};
  m.outputs = {path};
  m.wall_clock_seconds = timer.seconds();
  write_run_manifest(a.out, m);
  return 0;
}

// ---------------------------------------------------------------------------

struct SearchArgs {
  std::string config, checkpoint, prior, records, flops, tolerance, out, fitness = "supernet";
  std::optional<int> generations, population, parents;
  std::optional<std::uint64_t> seed;
  SpaceArgs space;
};

int run_search(const SearchArgs& a) {
  Timer timer;
  std::unique_ptr<RunConfig> cfg;
  if (!a.config.empty()) cfg = std::make_unique<RunConfig>(load_run_config(a.config));
  const Architecture arch = resolve_arch(cfg.get(), a.space);
  const SearchSpace& space = arch.space;
  SearchSettings settings = cfg ? cfg->search : SearchSettings{};
  if (a.generations) settings.generations = *a.generations;
  if (a.population) settings.population_size = *a.population;
  if (a.parents) settings.parent_count = *a.parents;

  std::ifstream prior_in(a.prior);
  if (!prior_in) throw ConfigError("cannot open prior '" + a.prior + "'");
  PriorDistribution dist;
  try {
    dist = distribution_from_json(json::parse(prior_in));
  } catch (const json::exception& e) {
    throw ConfigError("prior '" + a.prior + "': " + e.what());
  }
  if (dist.space_fingerprint != space.fingerprint()) {
    throw ConfigError("prior '" + a.prior + "' was built for a different search space");
  }
  std::string records_path = a.records;
  if (records_path.empty()) {
    if (a.checkpoint.empty()) throw ConfigError("--records is required without --checkpoint");
    records_path = path_in(a.checkpoint, "records.jsonl");
  }
  const auto records = read_records_file(records_path);

  EvoConfig evo;
  evo.population_size = settings.population_size;
  evo.parent_count = settings.parent_count;
  evo.generations = settings.generations;
  evo.mutation_prob = settings.mutation_prob;
  evo.crossover_fraction = settings.crossover_fraction;
  evo.target_flops = parse_flops_arg(a.flops, space, "--flops");
  evo.tolerance = a.tolerance.empty() ? static_cast<double>(dist.bucket_width) / 2.0
                                      : static_cast<double>(parse_flops_arg(a.tolerance, space, "--tolerance"));
  evo.seed = a.seed ? *a.seed : (cfg ? cfg->recipe.seed : 0);
  evo.validate();

  SearchResult result;
  std::vector<std::string> inputs = {a.prior, records_path};
  if (a.fitness == "width-sum") {
    // Deterministic stand-in fitness: mean kept ratio.
    OracleFitness oracle([&](const WidthConfig& c) {
      const auto r = keep_ratios(space, c);
      return std::accumulate(r.begin(), r.end(), 0.0) / static_cast<double>(r.size());
    });
    result = search(space, dist, records, evo, oracle);
  } else if (a.fitness == "supernet") {
    if (!cfg) throw ConfigError("--config is required for supernet fitness (dataset and batch settings)");
    if (a.checkpoint.empty()) throw ConfigError("--checkpoint is required for supernet fitness");
    auto handle = load_supernet(arch, a.checkpoint);
    const Dataset data = load_dataset(cfg->recipe.dataset);
    const EvalData eval = make_eval_data(data, settings, cfg->recipe.batch_size);
    SupernetFitness<float> fitness(handle, eval.validation, eval.labels, eval.calibration);
    result = search(space, dist, records, evo, fitness);
    inputs.push_back(a.checkpoint);
  } else {
    throw ConfigError("--fitness must be 'supernet' or 'width-sum', got '" + a.fitness + "'");
  }

  fs::create_directories(a.out);
  {
    std::ofstream log(path_in(a.out, "search_log.jsonl"));
    write_search_log(log, result.log);
    std::ofstream ranked(path_in(a.out, "ranked.csv"));
    write_ranked_csv(ranked, result.ranked);
  }
  std::vector<ResultRow> rows;
  std::string widths_txt;
  for (std::size_t i = 0; i < result.ranked.size(); ++i) {
    const Candidate& c = result.ranked[i];
    rows.push_back({"s" + std::to_string(i + 1), c.config, c.flops, c.params, c.proxy_accuracy, std::nullopt});
    widths_txt += to_string(c.config) + "\n";
  }
  {
    std::ofstream results(path_in(a.out, "results.csv"));
    write_results_csv(results, rows);
  }
  write_text(path_in(a.out, "widths.txt"), widths_txt);

  if (!result.ranked.empty()) {
    const Candidate& best = result.ranked.front();
    std::cout << "evaluated " << result.ranked.size() << " candidates; best " << to_string(best.config) << "  "
              << format_count(best.flops) << " MACs  acc " << best.proxy_accuracy.value_or(0.0) << "\n";
  } else {
    std::cout << "no candidate within tolerance\n";
  }

  RunManifest m;
  m.command = "search";
  m.config = json::object();
  if (cfg) m.config["run_config"] = run_config_to_json(*cfg);
  m.config["search"] = search_settings_to_json(settings);
  m.config["target_flops"] = evo.target_flops;
  m.config["tolerance"] = evo.tolerance;
  m.config["fitness"] = a.fitness;
  m.inputs = inputs;
  m.outputs = {path_in(a.out, "search_log.jsonl"), path_in(a.out, "ranked.csv"), path_in(a.out, "results.csv"),
               path_in(a.out, "widths.txt")};
  m.seed = evo.seed;
  m.wall_clock_seconds = timer.seconds();
  write_run_manifest(a.out, m);
  return 0;
}

// ---------------------------------------------------------------------------

struct RetrainArgs {
  std::string config, widths, out;
  std::optional<std::uint64_t> seed;
  std::optional<int> epochs;
  SpaceArgs space;
};

int run_retrain(const RetrainArgs& a) {
  Timer timer;
  RunConfig cfg = load_run_config(a.config);
  if (a.seed) cfg.recipe.seed = *a.seed;
  if (a.epochs) cfg.recipe.epochs = *a.epochs;
  cfg.recipe.validate();
  const Architecture arch = resolve_arch(&cfg, a.space);
  const WidthConfig widths = parse_widths_arg(a.widths);
  validate(arch.space, widths);
  const Dataset data = load_dataset(cfg.recipe.dataset);
  const RetrainResult r = retrain_subnet(arch, widths, cfg.recipe, data);

  nlohmann::ordered_json report;
  report["widths"] = widths.widths;
  report["flops"] = flops(arch.space, widths);
  report["params"] = r.params;
  report["top1"] = r.top1;
  report["epoch_loss"] = r.epoch_loss;
  fs::create_directories(a.out);
  write_text(path_in(a.out, "retrain.json"), report.dump(2) + "\n");
  {
    std::ofstream results(path_in(a.out, "results.csv"));
    write_results_csv(results, {{"retrained", widths, flops(arch.space, widths), r.params, std::nullopt, r.top1}});
  }
  std::cout << "top-1 " << r.top1 << "  " << format_count(flops(arch.space, widths)) << " MACs  "
            << format_count(r.params) << " params\n";

  RunManifest m;
  m.command = "retrain";
  m.config = run_config_to_json(cfg);
  m.config["widths"] = widths.widths;
  m.inputs = {a.config, a.space.path.empty() ? cfg.arch_path : a.space.path};
  m.outputs = {path_in(a.out, "retrain.json"), path_in(a.out, "results.csv")};
  m.seed = cfg.recipe.seed;
  m.wall_clock_seconds = timer.seconds();
  write_run_manifest(a.out, m);
  return 0;
}

// ---------------------------------------------------------------------------

struct FlopsArgs {
  std::string widths, out;
  bool as_json = false;
  SpaceArgs space;
};

int run_flops(const FlopsArgs& a) {
  Timer timer;
  const Architecture arch = a.space.load();
  const WidthConfig widths = a.widths.empty() ? largest_config(arch.space) : parse_widths_arg(a.widths);
  const std::int64_t f = flops(arch.space, widths);
  const std::int64_t p = params(arch.space, widths);
  const std::int64_t fmax = flops(arch.space, largest_config(arch.space));

  nlohmann::ordered_json report;
  report["arch"] = arch.name;
  const Resolution res = arch.space.reference_resolution();
  report["resolution"] = {res.h, res.w};
  report["widths"] = widths.widths;
  report["flops"] = f;
  report["params"] = p;
  report["flops_fraction_of_largest"] = static_cast<double>(f) / static_cast<double>(fmax);
  if (a.as_json) {
    std::cout << report.dump(2) << "\n";
  } else {
    std::cout << arch.name << " @ " << res.h << "x" << res.w
              << "\n  MACs   " << f << " (" << format_count(f) << ")\n  params " << p << " (" << format_count(p)
              << ")\n";
  }
  if (!a.out.empty()) {
    fs::create_directories(a.out);
    write_text(path_in(a.out, "cost.json"), report.dump(2) + "\n");
    RunManifest m;
    m.command = "flops";
    m.config = a.space.to_json();
    m.config["widths"] = widths.widths;
    m.inputs = {a.space.path};
    m.outputs = {path_in(a.out, "cost.json")};
    m.wall_clock_seconds = timer.seconds();
    write_run_manifest(a.out, m);
  }
  return 0;
}

// ---------------------------------------------------------------------------

struct ExportArgs {
  std::string results, format = "csv", out;
  SpaceArgs space;
};

int run_export(const ExportArgs& a) {
  Timer timer;
  if (a.format != "csv" && a.format != "chart") throw ConfigError("--format must be 'csv' or 'chart'");
  const Architecture arch = a.space.load();
  std::ifstream in(a.results);
  if (!in) throw ConfigError("cannot open results '" + a.results + "'");
  const auto rows = read_results_csv(in);

  std::ostringstream csv;
  csv << "config_id,layer,name,width,max_channels,keep_ratio\n";
  for (const auto& row : rows) {
    const auto ratios = keep_ratios(arch.space, row.widths);
    for (int l = 0; l < arch.space.num_layers(); ++l) {
      const auto& layer = arch.space.layer(l);
      csv << row.config_id << ',' << l << ',' << layer.name << ',' << row.widths.widths[static_cast<std::size_t>(l)]
          << ',' << layer.max_out_channels << ',' << ratios[static_cast<std::size_t>(l)] << '\n';
    }
  }
  fs::create_directories(a.out);
  std::vector<std::string> outputs = {path_in(a.out, "keep_ratios.csv")};
  write_text(outputs.front(), csv.str());
  if (a.format == "chart") {
    outputs.push_back(path_in(a.out, "keep_ratios.svg"));
    write_text(outputs.back(), keep_ratio_svg(arch.space, rows));
  }
  std::cout << rows.size() << " configurations -> " << outputs.back() << "\n";

  RunManifest m;
  m.command = "export-widths";
  m.config = a.space.to_json();
  m.config["format"] = a.format;
  m.inputs = {a.results, a.space.path};
  m.outputs = outputs;
  m.wall_clock_seconds = timer.seconds();
  write_run_manifest(a.out, m);
  return 0;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"parawidth: channel-width search with a parallel-trained supernet.\n"
               "FLOPs are multiply-accumulates counted once over conv and linear layers."};
  app.require_subcommand(1);
  app.set_version_flag("--version", kToolVersion);

  TrainArgs train;
  auto* c_train = app.add_subcommand("train-supernet", "train the supernet, streaming loss records and checkpoints");
  c_train->add_option("--config", train.config, "run config (JSON)")->required();
  c_train->add_option("--out", train.out, "output directory (default: paths.out)");
  c_train->add_option("--seed", train.seed, "override recipe.seed");
  c_train->add_option("--epochs", train.epochs, "override recipe.epochs");
  c_train->add_flag("--resume", train.resume, "continue from the checkpoint in --out");

  PriorArgs prior;
  auto* c_prior = app.add_subcommand("build-prior", "build the FLOPs-conditioned width prior from loss records");
  c_prior->add_option("--records", prior.records, "loss records (JSONL)")->required();
  prior.space.add_to(*c_prior, true);
  c_prior->add_option("--weighting", prior.weighting, "inverse-proxy | literal-proxy | frequency");
  c_prior->add_option("--bucket-width", prior.bucket_width, "bucket width in MACs (K/M/G suffix or % of largest)");
  c_prior->add_option("--out", prior.out, "output directory")->required();

  SearchArgs srch;
  auto* c_search = app.add_subcommand("search", "evolutionary search under a FLOPs target");
  c_search->add_option("--config", srch.config, "run config (dataset, search settings, architecture)");
  c_search->add_option("--checkpoint", srch.checkpoint, "supernet output directory");
  c_search->add_option("--prior", srch.prior, "prior distribution from build-prior")->required();
  c_search->add_option("--records", srch.records, "loss records (default: <checkpoint>/records.jsonl)");
  c_search->add_option("--flops", srch.flops, "target MACs (K/M/G suffix or % of largest)")->required();
  c_search->add_option("--tolerance", srch.tolerance, "accepted |flops - target| (default: half a bucket)");
  c_search->add_option("--generations", srch.generations, "bred generations after the initial population");
  c_search->add_option("--population", srch.population, "population size P");
  c_search->add_option("--parents", srch.parents, "parent count k");
  c_search->add_option("--seed", srch.seed, "search seed (default: recipe.seed)");
  c_search->add_option("--fitness", srch.fitness, "supernet | width-sum (mean keep ratio, for dry runs)");
  srch.space.add_to(*c_search, false);
  c_search->add_option("--out", srch.out, "output directory")->required();

  RetrainArgs retrain;
  auto* c_retrain = app.add_subcommand("retrain", "train one width configuration from scratch");
  c_retrain->add_option("--config", retrain.config, "run config (JSON)")->required();
  c_retrain->add_option("--widths", retrain.widths, "width vector 'a,b,...' or a file holding one")->required();
  c_retrain->add_option("--seed", retrain.seed, "override recipe.seed");
  c_retrain->add_option("--epochs", retrain.epochs, "override recipe.epochs");
  retrain.space.add_to(*c_retrain, false);
  c_retrain->add_option("--out", retrain.out, "output directory")->required();

  FlopsArgs fl;
  auto* c_flops = app.add_subcommand("flops", "MACs and parameters of a width configuration");
  fl.space.add_to(*c_flops, true);
  c_flops->add_option("--widths", fl.widths, "width vector (default: largest)");
  c_flops->add_flag("--json", fl.as_json, "print JSON");
  c_flops->add_option("--out", fl.out, "also write cost.json here");

  ExportArgs ex;
  auto* c_export = app.add_subcommand("export-widths", "per-layer kept-channel ratios of a results table");
  c_export->add_option("--results", ex.results, "results table (CSV)")->required();
  ex.space.add_to(*c_export, true);
  c_export->add_option("--format", ex.format, "csv | chart (SVG plus CSV)");
  c_export->add_option("--out", ex.out, "output directory")->required();

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    return app.exit(e) == 0 ? 0 : kExitConfig;
  }

  try {
    if (c_train->parsed()) return run_train(train);
    if (c_prior->parsed()) return run_build_prior(prior);
    if (c_search->parsed()) return run_search(srch);
    if (c_retrain->parsed()) return run_retrain(retrain);
    if (c_flops->parsed()) return run_flops(fl);
    if (c_export->parsed()) return run_export(ex);
  } catch (const ConfigError& e) {
    std::cerr << "error: " << e.what() << "\n";
    return kExitConfig;
  } catch (const BuildError& e) {
    std::cerr << "error: " << e.what() << "\n";
    return kExitConfig;
  } catch (const ConstraintError& e) {
    std::cerr << "error: " << e.what() << "\n";
    return kExitConfig;
  } catch (const IndexError& e) {
    std::cerr << "error: " << e.what() << "\n";
    return kExitConfig;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return kExitRuntime;
  }
  return kExitConfig;
}
