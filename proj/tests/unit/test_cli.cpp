#include <sys/wait.h>

#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <numeric>
#include <sstream>

#include "doctest.h"
#include "json.hpp"
#include "parawidth/evo_search.hpp"
#include "parawidth/pipeline.hpp"
#include "parawidth/prior_sampler.hpp"
#include "spaces.hpp"

using namespace parawidth;
namespace fs = std::filesystem;
using nlohmann::json;

namespace {

const std::string kRoot = PARAWIDTH_SOURCE_DIR;
const std::string kCli = PARAWIDTH_CLI;

struct Run {
  int code = -1;
  std::string out, err;
};

std::string slurp(const fs::path& p) {
  std::ifstream in(p, std::ios::binary);
  std::ostringstream s;
  s << in.rdbuf();
  return s.str();
}

class Scratch {
 public:
  explicit Scratch(const std::string& name) : dir_(fs::temp_directory_path() / ("parawidth_cli_" + name)) {
    fs::remove_all(dir_);
    fs::create_directories(dir_);
  }
  ~Scratch() { fs::remove_all(dir_); }
  std::string operator/(const std::string& leaf) const { return (dir_ / leaf).string(); }

  Run run(const std::string& args) const {
    const std::string cmd = kCli + " " + args + " >" + (*this / "stdout") + " 2>" + (*this / "stderr");
    const int status = std::system(cmd.c_str());
    return {WIFEXITED(status) ? WEXITSTATUS(status) : -1, slurp(*this / "stdout"), slurp(*this / "stderr")};
  }

  void write(const std::string& leaf, const std::string& text) const { std::ofstream(*this / leaf) << text; }

 private:
  fs::path dir_;
};

const char* kOneLayer = R"({"name": "one", "input_channels": 3, "reference_resolution": [1, 1],
  "group_count": 2, "min_keep_ratio": 0.0,
  "layers": [{"name": "c", "kind": "conv", "out": 32, "kernel": 1, "stride": 1, "bn": false, "relu": false,
              "inputs": ["input"]}]})";

std::string records_text(const std::vector<LossRecord>& records) {
  std::ostringstream s;
  write_records(s, records);
  return s.str();
}

LossRecord rec(long t, int part, int w, double loss, bool largest) {
  return LossRecord{t, part, WidthConfig{{w}}, loss, 3 * static_cast<std::int64_t>(w), largest};
}

json read_json(const std::string& path) { return json::parse(slurp(path)); }

double prior_weight(const json& prior, int bucket, int choice) {
  return prior.at("buckets").at(bucket).at("weights").at(0).at(std::to_string(choice)).get<double>();
}

}  // namespace

TEST_CASE("usage and config errors exit with 2") {
  Scratch s("usage");
  Run r = s.run("train-supernet --config " + (s / "missing.json") + " --out " + (s / "o"));
  CHECK(r.code == 2);
  CHECK(r.err.find(s / "missing.json") != std::string::npos);
  CHECK(s.run("").code == 2);
  CHECK(s.run("flops --space").code == 2);
  CHECK(s.run("no-such-command").code == 2);
  CHECK(s.run("flops --space " + kRoot + "/archs/desk_resnet.json --widths 1,2,3").code == 2);
  CHECK(s.run("--help").code == 0);
}

TEST_CASE("flops on the bundled ResNet50 description") {
  Scratch s("flops");
  const Run r = s.run("flops --json --space " + kRoot + "/archs/resnet50.json --out " + (s / "o"));
  REQUIRE(r.code == 0);
  const auto report = json::parse(r.out);
  CHECK(report.at("flops").get<double>() == doctest::Approx(4.1e9).epsilon(0.02));
  CHECK(fs::exists(s / "o/cost.json"));
  CHECK(fs::exists(s / "o/run_manifest.json"));
}

TEST_CASE("build-prior matches hand computation") {
  Scratch s("prior");
  s.write("one.json", kOneLayer);
  SUBCASE("inverse proxy, three records") {
    // Largest loss 2.0 at t=0 and t=1; final 2.0. Proxies: w16 -> 1.0, w32 -> 2.0, 2.0.
    // Inverse weights: 16 -> 1, 32 -> 1/2 + 1/2 = 1, so 0.5 / 0.5.
    s.write("r.jsonl", records_text({rec(0, 0, 32, 2.0, true), rec(0, 1, 16, 1.0, false), rec(1, 0, 32, 2.0, true)}));
    REQUIRE(s.run("build-prior --records " + (s / "r.jsonl") + " --space " + (s / "one.json") + " --bucket-width 1000 --out " +
                  (s / "p")).code == 0);
    const json prior = read_json(s / "p/prior.json");
    CHECK(prior_weight(prior, 0, 16) == doctest::Approx(0.5));
    CHECK(prior_weight(prior, 0, 32) == doctest::Approx(0.5));
  }
  SUBCASE("inverse proxy, unequal") {
    s.write("r.jsonl", records_text({rec(0, 0, 16, 1.0, false), rec(0, 1, 32, 3.0, true)}));
    REQUIRE(s.run("build-prior --records " + (s / "r.jsonl") + " --space " + (s / "one.json") + " --bucket-width 1K --out " +
                  (s / "p")).code == 0);
    const json prior = read_json(s / "p/prior.json");
    CHECK(prior_weight(prior, 0, 16) == doctest::Approx(0.75));
    CHECK(prior_weight(prior, 0, 32) == doctest::Approx(0.25));
  }
  SUBCASE("frequency counts") {
    s.write("r.jsonl", records_text({rec(0, 0, 32, 2.0, true), rec(0, 1, 16, 9.0, false), rec(0, 2, 16, 1.0, false),
                                     rec(1, 0, 32, 2.0, true), rec(1, 1, 16, 5.0, false)}));
    REQUIRE(s.run("build-prior --weighting frequency --records " + (s / "r.jsonl") + " --space " + (s / "one.json") +
                  " --bucket-width 1000 --out " + (s / "p")).code == 0);
    const json prior = read_json(s / "p/prior.json");
    CHECK(prior_weight(prior, 0, 16) == doctest::Approx(0.6));
    CHECK(prior_weight(prior, 0, 32) == doctest::Approx(0.4));
  }
  SUBCASE("empty records") {
    s.write("r.jsonl", "");
    CHECK(s.run("build-prior --records " + (s / "r.jsonl") + " --space " + (s / "one.json") + " --out " + (s / "p")).code == 2);
  }
  SUBCASE("unknown weighting") {
    s.write("r.jsonl", records_text({rec(0, 0, 32, 2.0, true)}));
    CHECK(s.run("build-prior --weighting softmax --records " + (s / "r.jsonl") + " --space " + (s / "one.json") +
                " --out " + (s / "p")).code == 2);
  }
}

TEST_CASE("train-supernet writes records and honours --seed") {
  Scratch s("train");
  const std::string cfg = kRoot + "/tests/fixtures/cli_tiny.json";
  REQUIRE(s.run("train-supernet --config " + cfg + " --seed 7 --out " + (s / "a")).code == 0);
  REQUIRE(s.run("train-supernet --config " + cfg + " --seed 7 --out " + (s / "b")).code == 0);
  REQUIRE(s.run("train-supernet --config " + cfg + " --seed 8 --out " + (s / "c")).code == 0);

  const RunConfig c = load_run_config(cfg);
  const long iters = c.recipe.epochs * c.recipe.iterations_per_epoch(c.recipe.dataset.train_size);
  const auto records = read_records_file(s / "a/records.jsonl");
  CHECK(static_cast<long>(records.size()) == iters * c.recipe.n_parts);

  CHECK(read_json(s / "a/run_manifest.json").at("seed") == 7);
  CHECK(read_json(s / "a/run_manifest.json").at("config").at("recipe").at("seed") == 7);
  CHECK(slurp(s / "a/records.jsonl") == slurp(s / "b/records.jsonl"));
  CHECK(slurp(s / "a/checkpoint.bin") == slurp(s / "b/checkpoint.bin"));
  CHECK(slurp(s / "a/records.jsonl") != slurp(s / "c/records.jsonl"));

  // The full pipeline on the trained supernet.
  const std::string arch = kRoot + "/archs/desk_resnet.json";
  REQUIRE(s.run("build-prior --records " + (s / "a/records.jsonl") + " --space " + arch + " --out " + (s / "p")).code == 0);
  for (const char* dir : {"s1", "s2"}) {
    REQUIRE(s.run("search --config " + cfg + " --checkpoint " + (s / "a") + " --prior " + (s / "p/prior.json") +
                  " --flops 50% --out " + (s / dir)).code == 0);
  }
  for (const char* f : {"ranked.csv", "results.csv", "search_log.jsonl", "widths.txt"}) {
    CHECK(slurp(s / (std::string("s1/") + f)) == slurp(s / (std::string("s2/") + f)));
  }
  const Run rt = s.run("retrain --config " + cfg + " --epochs 1 --widths " + (s / "s1/widths.txt") + " --out " + (s / "r"));
  REQUIRE(rt.code == 0);
  const json report = read_json(s / "r/retrain.json");
  CHECK(report.at("top1").get<double>() >= 0.0);
  CHECK(report.at("top1").get<double>() <= 1.0);
  CHECK(fs::exists(s / "r/run_manifest.json"));
}

TEST_CASE("search with an injected oracle reaches the brute-force optimum") {
  Scratch s("search");
  Rng rng(21);
  // Four chained convs with eight choices each: 4096 configurations.
  json arch = {{"name", "chain"}, {"input_channels", 3}, {"reference_resolution", {8, 8}},
               {"group_count", 8}, {"min_keep_ratio", 0.0}, {"layers", json::array()}};
  std::uniform_int_distribution<int> mult(1, 4);
  for (int l = 0; l < 4; ++l) {
    json layer = {{"name", "c" + std::to_string(l)}, {"kind", "conv"}, {"out", 8 * mult(rng)},
                  {"kernel", l % 2 ? 3 : 1}, {"stride", 1}, {"bn", true}, {"relu", true}};
    if (l == 0) layer["inputs"] = {"input"};
    arch["layers"].push_back(layer);
  }
  s.write("chain.json", arch.dump());
  const Architecture a = load_architecture(s / "chain.json");
  REQUIRE(space_size(a.space) == BigInt(4096));

  s.write("r.jsonl", records_text(testnets::synthetic_records(a.space, rng, 1000, 4)));
  REQUIRE(s.run("build-prior --records " + (s / "r.jsonl") + " --space " + (s / "chain.json") + " --out " + (s / "p")).code == 0);

  const std::int64_t fmax = flops(a.space, largest_config(a.space));
  const std::int64_t target = fmax / 2;
  const std::int64_t tol = fmax / 10;
  const Run r = s.run("search --fitness width-sum --space " + (s / "chain.json") + " --prior " + (s / "p/prior.json") +
                      " --records " + (s / "r.jsonl") + " --flops " + std::to_string(target) + " --tolerance " +
                      std::to_string(tol) + " --population 64 --parents 32 --generations 64 --seed 5 --out " + (s / "o"));
  REQUIRE(r.code == 0);

  std::optional<Candidate> best;
  enumerate_configs(a.space, [&](const WidthConfig& c) {
    if (std::llabs(flops(a.space, c) - target) > tol) return;
    Candidate cand = make_candidate(a.space, c);
    const auto ratios = keep_ratios(a.space, c);
    cand.proxy_accuracy = std::accumulate(ratios.begin(), ratios.end(), 0.0) / static_cast<double>(ratios.size());
    if (!best || ranks_before(cand, *best)) best = cand;
  });
  REQUIRE(best);
  std::ifstream widths(s / "o/widths.txt");
  std::string first;
  std::getline(widths, first);
  CHECK(first == to_string(best->config));
  CHECK(read_json(s / "o/run_manifest.json").at("seed") == 5);
}

TEST_CASE("export-widths keep ratios lie in (0, 1]") {
  Scratch s("export");
  const std::string arch = kRoot + "/archs/desk_resnet.json";
  const Architecture a = load_architecture(arch);
  Rng rng(4);
  std::vector<ResultRow> rows;
  for (int i = 0; i < 5; ++i) {
    const WidthConfig c = sample_uniform(a.space, rng);
    rows.push_back({"c" + std::to_string(i), c, flops(a.space, c), params(a.space, c), 0.5, std::nullopt});
  }
  rows.push_back({"largest", largest_config(a.space), 0, 0, std::nullopt, 0.9});
  {
    std::ofstream out(s / "results.csv");
    write_results_csv(out, rows);
  }
  REQUIRE(s.run("export-widths --format chart --results " + (s / "results.csv") + " --space " + arch + " --out " + (s / "o")).code == 0);
  std::ifstream in(s / "o/keep_ratios.csv");
  std::string line;
  std::getline(in, line);
  CHECK(line == "config_id,layer,name,width,max_channels,keep_ratio");
  int count = 0;
  while (std::getline(in, line)) {
    const double ratio = std::stod(line.substr(line.rfind(',') + 1));
    CHECK(ratio > 0.0);
    CHECK(ratio <= 1.0);
    ++count;
  }
  CHECK(count == static_cast<int>(rows.size()) * a.space.num_layers());
  CHECK(slurp(s / "o/keep_ratios.svg").rfind("<svg", 0) == 0);
  CHECK(s.run("export-widths --format png --results " + (s / "results.csv") + " --space " + arch + " --out " + (s / "o")).code == 2);
}
