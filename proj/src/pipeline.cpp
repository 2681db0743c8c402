#include "parawidth/pipeline.hpp"

#include <filesystem>
#include <fstream>
#include <sstream>

#include "parawidth/errors.hpp"

namespace parawidth {

namespace fs = std::filesystem;

SearchSettings search_settings_from_json(const nlohmann::json& j) {
  SearchSettings s;
  try {
    s.population_size = j.value("population_size", s.population_size);
    s.parent_count = j.value("parent_count", s.parent_count);
    s.generations = j.value("generations", s.generations);
    s.mutation_prob = j.value("mutation_prob", s.mutation_prob);
    s.crossover_fraction = j.value("crossover_fraction", s.crossover_fraction);
    if (j.contains("weighting")) s.weighting = parse_weighting(j.at("weighting").get<std::string>());
    s.bucket_width = j.value("bucket_width", s.bucket_width);
    s.tolerance = j.value("tolerance", s.tolerance);
    s.calibration_batches = j.value("calibration_batches", s.calibration_batches);
    s.validation_size = j.value("validation_size", s.validation_size);
    s.eval_batch_size = j.value("eval_batch_size", s.eval_batch_size);
  } catch (const nlohmann::json::exception& e) {
    throw ConfigError(std::string("search: ") + e.what());
  }
  if (s.bucket_width < 0) throw ConfigError("search.bucket_width must be non-negative");
  if (s.calibration_batches < 1) throw ConfigError("search.calibration_batches must be >= 1");
  if (s.validation_size < 0) throw ConfigError("search.validation_size must be non-negative");
  if (s.eval_batch_size < 1) throw ConfigError("search.eval_batch_size must be >= 1");
  return s;
}

nlohmann::json search_settings_to_json(const SearchSettings& s) {
  nlohmann::ordered_json j;
  j["population_size"] = s.population_size;
  j["parent_count"] = s.parent_count;
  j["generations"] = s.generations;
  j["mutation_prob"] = s.mutation_prob;
  j["crossover_fraction"] = s.crossover_fraction;
  j["weighting"] = weighting_name(s.weighting);
  j["bucket_width"] = s.bucket_width;
  j["tolerance"] = s.tolerance;
  j["calibration_batches"] = s.calibration_batches;
  j["validation_size"] = s.validation_size;
  j["eval_batch_size"] = s.eval_batch_size;
  return nlohmann::json(j);
}

Architecture RunConfig::load_arch() const { return load_architecture(arch_path, overrides); }

RunConfig load_run_config(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw ConfigError("cannot open config '" + path + "'");
  RunConfig c;
  try {
    c.source = nlohmann::json::parse(in);
  } catch (const nlohmann::json::exception& e) {
    throw ConfigError("config '" + path + "': " + e.what());
  }
  const fs::path base = fs::path(path).parent_path();
  auto resolve = [&](const std::string& p) { return fs::path(p).is_absolute() ? p : (base / p).lexically_normal().string(); };
  try {
    const auto& space = c.source.at("space");
    c.arch_path = resolve(space.at("arch").get<std::string>());
    if (space.contains("group_count")) c.overrides.group_count = space.at("group_count").get<int>();
    if (space.contains("min_keep_ratio")) c.overrides.min_keep_ratio = space.at("min_keep_ratio").get<double>();
    c.recipe = recipe_from_json(c.source.value("recipe", nlohmann::json::object()));
    c.search = search_settings_from_json(c.source.value("search", nlohmann::json::object()));
    const auto paths = c.source.value("paths", nlohmann::json::object());
    if (paths.contains("out")) c.out_dir = resolve(paths.at("out").get<std::string>());
    if (paths.contains("data") && c.recipe.dataset.root.empty()) {
      c.recipe.dataset.root = resolve(paths.at("data").get<std::string>());
    }
  } catch (const nlohmann::json::exception& e) {
    throw ConfigError("config '" + path + "': " + e.what());
  } catch (const ConfigError& e) {
    throw ConfigError("config '" + path + "': " + e.what());
  }
  return c;
}

nlohmann::json run_config_to_json(const RunConfig& c) {
  nlohmann::ordered_json j;
  j["space"]["arch"] = c.arch_path;
  if (c.overrides.group_count) j["space"]["group_count"] = *c.overrides.group_count;
  if (c.overrides.min_keep_ratio) j["space"]["min_keep_ratio"] = *c.overrides.min_keep_ratio;
  j["recipe"] = recipe_to_json(c.recipe);
  j["search"] = search_settings_to_json(c.search);
  j["paths"]["out"] = c.out_dir;
  return nlohmann::json(j);
}

std::int64_t resolve_bucket_width(const SearchSettings& s, const SearchSpace& space) {
  return s.bucket_width > 0 ? s.bucket_width : default_bucket_width(space);
}

double resolve_tolerance(const SearchSettings& s, const SearchSpace& space) {
  return s.tolerance >= 0 ? s.tolerance : static_cast<double>(resolve_bucket_width(s, space)) / 2.0;
}

EvalData make_eval_data(const Dataset& data, const SearchSettings& s, int calibration_batch_size) {
  EvalData e;
  Split val = data.validation;
  if (s.validation_size > 0 && s.validation_size < val.size()) {
    val.labels.resize(static_cast<std::size_t>(s.validation_size));
    val.pixels.resize(static_cast<std::size_t>(s.validation_size) * val.sample_size());
  }
  e.validation = split_batches<float>(val, s.eval_batch_size);
  e.labels = split_label_batches(val, s.eval_batch_size);
  e.calibration = split_batches<float>(data.calibration, calibration_batch_size, s.calibration_batches);
  if (e.calibration.empty()) throw CalibrationError("calibration split is empty");
  return e;
}

void write_run_manifest(const std::string& dir, const RunManifest& m) {
  nlohmann::ordered_json j;
  j["command"] = m.command;
  j["tool_version"] = kToolVersion;
  j["seed"] = m.seed;
  j["inputs"] = m.inputs;
  j["outputs"] = m.outputs;
  j["config"] = m.config;
  j["wall_clock_seconds"] = m.wall_clock_seconds;
  fs::create_directories(dir);
  const fs::path path = fs::path(dir) / "run_manifest.json";
  std::ofstream out(path);
  if (!out) throw Error("cannot write '" + path.string() + "'");
  out << j.dump(2) << '\n';
}

std::vector<double> keep_ratios(const SearchSpace& space, const WidthConfig& config) {
  validate(space, config);
  std::vector<double> out;
  for (int l = 0; l < space.num_layers(); ++l) {
    out.push_back(static_cast<double>(config.widths[static_cast<std::size_t>(l)]) / space.layer(l).max_out_channels);
  }
  return out;
}

std::string keep_ratio_svg(const SearchSpace& space, const std::vector<ResultRow>& rows) {
  constexpr int kW = 720, kH = 360, kLeft = 60, kRight = 20, kTop = 20, kBottom = 60;
  const int layers = space.num_layers();
  const double plot_w = kW - kLeft - kRight, plot_h = kH - kTop - kBottom;
  auto x_of = [&](int l) { return kLeft + (layers > 1 ? plot_w * l / (layers - 1) : plot_w / 2); };
  auto y_of = [&](double r) { return kTop + plot_h * (1.0 - r); };
  static const char* colours[] = {"#1f77b4", "#d62728", "#2ca02c", "#ff7f0e", "#9467bd", "#8c564b", "#17becf", "#7f7f7f"};

  std::ostringstream s;
  s << "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"" << kW << "\" height=\"" << kH << "\" font-family=\"sans-serif\" font-size=\"11\">\n";
  s << "<rect width=\"100%\" height=\"100%\" fill=\"white\"/>\n";
  for (int t = 0; t <= 4; ++t) {
    const double r = t / 4.0;
    s << "<line x1=\"" << kLeft << "\" x2=\"" << kW - kRight << "\" y1=\"" << y_of(r) << "\" y2=\"" << y_of(r)
      << "\" stroke=\"#ddd\"/>\n";
    s << "<text x=\"" << kLeft - 8 << "\" y=\"" << y_of(r) + 4 << "\" text-anchor=\"end\">" << r << "</text>\n";
  }
  for (int l = 0; l < layers; ++l) {
    s << "<text x=\"" << x_of(l) << "\" y=\"" << kH - kBottom + 14 << "\" text-anchor=\"end\" transform=\"rotate(-45 "
      << x_of(l) << ' ' << kH - kBottom + 14 << ")\">" << space.layer(l).name << "</text>\n";
  }
  s << "<text x=\"14\" y=\"" << kTop + plot_h / 2 << "\" transform=\"rotate(-90 14 " << kTop + plot_h / 2
    << ")\" text-anchor=\"middle\">kept channel ratio</text>\n";
  for (std::size_t i = 0; i < rows.size(); ++i) {
    const auto ratios = keep_ratios(space, rows[i].widths);
    const char* colour = colours[i % std::size(colours)];
    s << "<polyline fill=\"none\" stroke=\"" << colour << "\" stroke-width=\"1.5\" points=\"";
    for (int l = 0; l < layers; ++l) s << x_of(l) << ',' << y_of(ratios[static_cast<std::size_t>(l)]) << ' ';
    s << "\"/>\n";
    s << "<text x=\"" << kW - kRight << "\" y=\"" << kTop + 12 * (i + 1) << "\" text-anchor=\"end\" fill=\"" << colour
      << "\">" << rows[i].config_id << "</text>\n";
  }
  s << "</svg>\n";
  return s.str();
}

}  // namespace parawidth
