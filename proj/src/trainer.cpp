#include "parawidth/trainer.hpp"

#include <chrono>
#include <filesystem>
#include <fstream>
#include <numeric>
#include <sstream>

#include "parawidth/errors.hpp"

namespace parawidth {

namespace fs = std::filesystem;

void TrainRecipe::validate() const {
  if (epochs < 1) throw ConfigError("recipe.epochs must be >= 1");
  if (batch_size < 1) throw ConfigError("recipe.batch_size must be >= 1");
  if (n_parts < 1) throw ConfigError("recipe.n_parts must be >= 1");
  if (batch_size % n_parts != 0) {
    throw ConfigError("recipe.batch_size " + std::to_string(batch_size) + " is not divisible by n_parts " +
                      std::to_string(n_parts));
  }
  if (warmup_epochs < 0) throw ConfigError("recipe.warmup_epochs must be non-negative");
}

long TrainRecipe::iterations_per_epoch(int train_size) const {
  return (static_cast<long>(train_size) + batch_size - 1) / batch_size;
}

LrSchedule TrainRecipe::resolved_schedule(long iters_per_epoch) const {
  LrSchedule s = optimizer.schedule;
  if (warmup_epochs > 0) s.warmup_iters = std::lround(warmup_epochs * static_cast<double>(iters_per_epoch));
  if (!milestone_epochs.empty()) {
    s.milestones.clear();
    for (int e : milestone_epochs) s.milestones.push_back(static_cast<long>(e) * iters_per_epoch);
  }
  return s;
}

TrainRecipe recipe_preset(const std::string& name) {
  TrainRecipe r;
  if (name == "desk") {
    r.optimizer.schedule.base_lr = 0.1;
    r.warmup_epochs = 1.0;
    return r;
  }
  r.batch_size = 2048;
  r.dataset.kind = "imagenet";
  r.dataset.resolution = 224;
  if (name == "imagenet-resnet50") {
    r.epochs = 120;
    r.optimizer.kind = "lamb";
    r.optimizer.weight_decay = 2e-2;
    r.optimizer.schedule.base_lr = 0.008;
    return r;
  }
  if (name == "imagenet-mobilenetv2") {
    r.epochs = 90;
    r.optimizer.weight_decay = 4e-5;
    r.optimizer.schedule.base_lr = 0.8;
    r.warmup_epochs = 4.0;
    return r;
  }
  if (name == "imagenet-vgg16") {
    r.epochs = 100;
    r.optimizer.nesterov = false;
    r.optimizer.weight_decay = 1e-4;
    r.optimizer.schedule.kind = ScheduleKind::kStep;
    r.optimizer.schedule.base_lr = 0.1;
    r.milestone_epochs = {30, 60, 90};
    return r;
  }
  throw ConfigError("unknown recipe preset '" + name + "'");
}

std::vector<std::string> recipe_preset_names() {
  return {"desk", "imagenet-resnet50", "imagenet-mobilenetv2", "imagenet-vgg16"};
}

TrainRecipe recipe_from_json(const nlohmann::json& j) {
  try {
    TrainRecipe r = recipe_preset(j.value("preset", std::string("desk")));
    r.epochs = j.value("epochs", r.epochs);
    r.batch_size = j.value("batch_size", r.batch_size);
    r.n_parts = j.value("n_parts", r.n_parts);
    if (j.contains("policy")) r.policy = parse_partition_policy(j.at("policy").get<std::string>());
    if (j.contains("optimizer")) {
      nlohmann::json merged = optimizer_to_json(r.optimizer);
      merged.merge_patch(j.at("optimizer"));
      r.optimizer = optimizer_from_json(merged);
    }
    r.warmup_epochs = j.value("warmup_epochs", r.warmup_epochs);
    r.milestone_epochs = j.value("milestone_epochs", r.milestone_epochs);
    r.augment = j.value("augment", r.augment);
    r.seed = j.value("seed", r.seed);
    if (j.contains("dataset")) {
      nlohmann::json merged = dataset_spec_to_json(r.dataset);
      merged.merge_patch(j.at("dataset"));
      r.dataset = dataset_spec_from_json(merged);
    }
    r.validate();
    return r;
  } catch (const nlohmann::json::exception& e) {
    throw ConfigError(std::string("recipe: ") + e.what());
  }
}

nlohmann::json recipe_to_json(const TrainRecipe& r) {
  nlohmann::ordered_json j;
  j["epochs"] = r.epochs;
  j["batch_size"] = r.batch_size;
  j["n_parts"] = r.n_parts;
  j["policy"] = partition_policy_name(r.policy);
  j["optimizer"] = optimizer_to_json(r.optimizer);
  j["warmup_epochs"] = r.warmup_epochs;
  j["milestone_epochs"] = r.milestone_epochs;
  j["augment"] = r.augment;
  j["seed"] = r.seed;
  j["dataset"] = dataset_spec_to_json(r.dataset);
  return nlohmann::json(j);
}

nlohmann::json manifest_to_json(const CheckpointManifest& m) {
  nlohmann::ordered_json j;
  j["arch"] = m.arch_name;
  j["space_fingerprint"] = m.space_fingerprint;
  j["iteration"] = m.iteration;
  j["epoch"] = m.epoch;
  j["total_iterations"] = m.total_iterations;
  j["bn_mode"] = m.bn_mode;
  j["weights_digest"] = m.weights_digest;
  j["recipe"] = m.recipe;
  return nlohmann::json(j);
}

CheckpointManifest manifest_from_json(const nlohmann::json& j) {
  try {
    CheckpointManifest m;
    m.arch_name = j.at("arch").get<std::string>();
    m.space_fingerprint = j.at("space_fingerprint").get<std::uint64_t>();
    m.iteration = j.at("iteration").get<long>();
    m.epoch = j.at("epoch").get<int>();
    m.total_iterations = j.at("total_iterations").get<long>();
    m.bn_mode = j.at("bn_mode").get<std::string>();
    m.weights_digest = j.at("weights_digest").get<std::uint64_t>();
    m.recipe = j.value("recipe", nlohmann::json::object());
    return m;
  } catch (const nlohmann::json::exception& e) {
    throw ConfigError(std::string("checkpoint manifest: ") + e.what());
  }
}

namespace {

constexpr char kCheckpointMagic[8] = {'P', 'W', 'C', 'K', 'P', 'T', '0', '1'};

nlohmann::json read_json_file(const fs::path& path) {
  std::ifstream in(path);
  if (!in) throw ConfigError("cannot open '" + path.string() + "'");
  try {
    return nlohmann::json::parse(in);
  } catch (const nlohmann::json::exception& e) {
    throw ConfigError("'" + path.string() + "': " + e.what());
  }
}

void write_json_file(const fs::path& path, const nlohmann::json& j) {
  const fs::path tmp = path.string() + ".tmp";
  {
    std::ofstream out(tmp);
    if (!out) throw Error("cannot write '" + tmp.string() + "'");
    out << j.dump(2) << '\n';
  }
  fs::rename(tmp, path);
}

}  // namespace

void save_checkpoint(const std::string& path, const Network<float>& net, const Optimizer<float>& optimizer,
                     const Rng& rng) {
  const std::string tmp = path + ".tmp";
  {
    std::ofstream out(tmp, std::ios::binary);
    if (!out) throw Error("cannot write '" + tmp + "'");
    out.write(kCheckpointMagic, sizeof(kCheckpointMagic));
    net.save(out);
    optimizer.save(out);
    std::ostringstream state;
    state << rng;
    const std::string s = state.str();
    const std::uint64_t size = s.size();
    out.write(reinterpret_cast<const char*>(&size), sizeof(size));
    out.write(s.data(), static_cast<std::streamsize>(size));
    if (!out) throw Error("failed writing '" + tmp + "'");
  }
  fs::rename(tmp, path);
}

namespace {

// Positioned just past the magic.
std::ifstream open_checkpoint(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw ConfigError("cannot open checkpoint '" + path + "'");
  char magic[sizeof(kCheckpointMagic)];
  in.read(magic, sizeof(magic));
  if (!in || !std::equal(magic, magic + sizeof(magic), kCheckpointMagic)) {
    throw ConfigError("'" + path + "' is not a training checkpoint");
  }
  return in;
}

}  // namespace

void load_checkpoint(const std::string& path, Network<float>& net, Optimizer<float>& optimizer, Rng& rng) {
  std::ifstream in = open_checkpoint(path);
  net.load(in);
  optimizer.load(in);
  std::uint64_t size = 0;
  in.read(reinterpret_cast<char*>(&size), sizeof(size));
  std::string s(size, '\0');
  in.read(s.data(), static_cast<std::streamsize>(size));
  if (!in) throw ConfigError("truncated checkpoint '" + path + "'");
  std::istringstream state(s);
  state >> rng;
}

SupernetHandle<float> load_supernet(const Architecture& arch, const std::string& out_dir) {
  const fs::path dir(out_dir);
  const CheckpointManifest m = manifest_from_json(read_json_file(dir / "manifest.json"));
  if (m.space_fingerprint != arch.space.fingerprint()) {
    throw ConfigError("checkpoint in '" + out_dir + "' was trained on a different search space");
  }
  SupernetHandle<float> handle{Network<float>(arch, 0), BnMode::kBatchStatistics, std::nullopt};
  std::ifstream in = open_checkpoint((dir / "checkpoint.bin").string());
  handle.net.load(in);
  handle.bn_mode = parse_bn_mode(m.bn_mode);
  return handle;
}

namespace {

// Epoch order: a permutation, topped up from its start so every batch is full.
std::vector<int> epoch_order(int n, long iterations, int batch, Rng& rng) {
  std::vector<int> perm(static_cast<std::size_t>(n));
  std::iota(perm.begin(), perm.end(), 0);
  std::shuffle(perm.begin(), perm.end(), rng);
  std::vector<int> order;
  order.reserve(static_cast<std::size_t>(iterations * batch));
  for (long i = 0; i < iterations * batch; ++i) order.push_back(perm[static_cast<std::size_t>(i % n)]);
  return order;
}

std::vector<LossRecord> read_records_before(const fs::path& path, long iteration) {
  std::vector<LossRecord> kept;
  if (!fs::exists(path)) return kept;
  for (auto& r : read_records_file(path.string())) {
    if (r.iteration < iteration) kept.push_back(std::move(r));
  }
  return kept;
}

}  // namespace

SupernetRun train_supernet(const Architecture& arch, const TrainRecipe& recipe, const Dataset& data,
                           const TrainOptions& options) {
  recipe.validate();
  if (data.train.size() < 1) throw ConfigError("training split is empty");
  const long per_epoch = recipe.iterations_per_epoch(data.train.size());
  const long total = per_epoch * recipe.epochs;
  const LrSchedule schedule = recipe.resolved_schedule(per_epoch);

  SupernetRun run{SupernetHandle<float>{Network<float>(arch, recipe.seed), BnMode::kBatchStatistics, std::nullopt},
                  0, {}, {}};
  auto optimizer = make_optimizer<float>(recipe.optimizer);
  Rng rng(recipe.seed ^ 0x5deece66dull);
  int start_epoch = 0;

  const bool persist = !options.out_dir.empty();
  const fs::path dir(options.out_dir);
  if (persist) fs::create_directories(dir);
  if (persist && options.resume && fs::exists(dir / "manifest.json")) {
    const CheckpointManifest m = manifest_from_json(read_json_file(dir / "manifest.json"));
    if (m.space_fingerprint != arch.space.fingerprint()) {
      throw ConfigError("cannot resume: '" + options.out_dir + "' holds a different search space");
    }
    if (m.total_iterations != total) throw ConfigError("cannot resume: recipe length changed");
    load_checkpoint((dir / "checkpoint.bin").string(), run.handle.net, *optimizer, rng);
    run.iterations = m.iteration;
    start_epoch = m.epoch;
    run.records = read_records_before(dir / "records.jsonl", run.iterations);
  }

  std::ofstream records_out;
  if (persist) {
    const fs::path path = dir / "records.jsonl";
    records_out.open(path, std::ios::trunc);
    if (!records_out) throw Error("cannot write '" + path.string() + "'");
    write_records(records_out, run.records);
    records_out.flush();
  }

  const int b = recipe.batch_size;
  for (int epoch = start_epoch; epoch < recipe.epochs; ++epoch) {
    const auto t0 = std::chrono::steady_clock::now();
    const std::vector<int> order = epoch_order(data.train.size(), per_epoch, b, rng);
    double loss_sum = 0.0, largest_sum = 0.0;
    long loss_n = 0, largest_n = 0;
    for (long it = 0; it < per_epoch; ++it) {
      const std::span<const int> idx(order.data() + it * b, static_cast<std::size_t>(b));
      const Tensor<float> x = gather<float>(data.train, idx, recipe.augment ? &rng : nullptr);
      const std::vector<int> y = gather_labels(data.train, idx);
      const double lr = schedule.at(run.iterations, total);
      StepResult step = supernet_train_step(run.handle, x, y, rng, *optimizer, lr, run.iterations,
                                            recipe.n_parts, recipe.policy);
      for (const auto& r : step.records) {
        loss_sum += r.raw_loss;
        ++loss_n;
        if (r.is_largest) {
          largest_sum += r.raw_loss;
          ++largest_n;
        }
        if (persist) records_out << to_json_line(r) << '\n';
      }
      if (persist) records_out.flush();
      run.records.insert(run.records.end(), step.records.begin(), step.records.end());
      ++run.iterations;
    }
    EpochSummary summary{epoch + 1, run.iterations, loss_n ? loss_sum / loss_n : 0.0,
                         largest_n ? largest_sum / largest_n : 0.0,
                         std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count()};
    run.epochs.push_back(summary);
    if (persist) {
      save_checkpoint((dir / "checkpoint.bin").string(), run.handle.net, *optimizer, rng);
      CheckpointManifest m{arch.name, arch.space.fingerprint(), run.iterations, epoch + 1, total,
                           bn_mode_name(run.handle.bn_mode), run.handle.net.digest(), recipe_to_json(recipe)};
      write_json_file(dir / "manifest.json", manifest_to_json(m));
    }
    if (options.on_epoch) options.on_epoch(summary);
  }
  return run;
}

double evaluate_top1(Network<float>& net, const Split& split, int batch_size) {
  const ChannelPlan plan = sliced_plan(net.arch(), largest_config(net.space()));
  long correct = 0;
  std::vector<int> idx;
  for (int begin = 0; begin < split.size(); begin += batch_size) {
    idx.clear();
    for (int i = begin; i < std::min(split.size(), begin + batch_size); ++i) idx.push_back(i);
    const Tensor<float> x = gather<float>(split, idx);
    const auto trace = net.forward(x, plan, BnUsage::kRunning);
    correct += count_correct(trace.logits(), gather_labels(split, idx));
  }
  return split.size() ? static_cast<double>(correct) / split.size() : 0.0;
}

namespace {

RetrainResult train_standalone(Network<float> net, const TrainRecipe& recipe, const Dataset& data) {
  recipe.validate();
  const long per_epoch = recipe.iterations_per_epoch(data.train.size());
  const long total = per_epoch * recipe.epochs;
  const LrSchedule schedule = recipe.resolved_schedule(per_epoch);
  auto optimizer = make_optimizer<float>(recipe.optimizer);
  Rng rng(recipe.seed ^ 0x5deece66dull);
  const ChannelPlan plan = sliced_plan(net.arch(), largest_config(net.space()));
  const int b = recipe.batch_size;
  RetrainResult result;
  long iteration = 0;
  for (int epoch = 0; epoch < recipe.epochs; ++epoch) {
    const std::vector<int> order = epoch_order(data.train.size(), per_epoch, b, rng);
    double loss_sum = 0.0;
    for (long it = 0; it < per_epoch; ++it) {
      const std::span<const int> idx(order.data() + it * b, static_cast<std::size_t>(b));
      const Tensor<float> x = gather<float>(data.train, idx, recipe.augment ? &rng : nullptr);
      const std::vector<int> y = gather_labels(data.train, idx);
      ForwardTrace<float> trace = net.forward(x, plan, BnUsage::kBatchMomentum);
      const Tensor<float>& logits = trace.logits();
      Tensor<float> dlogits(logits.n(), logits.c(), logits.h(), logits.w());
      const double loss = softmax_cross_entropy(logits, y, 0, b, &dlogits);
      if (!std::isfinite(loss)) throw TrainingDivergence(iteration, "non-finite retraining loss");
      net.zero_grad();
      net.backward(trace, dlogits, plan);
      optimizer->step(net.params(), schedule.at(iteration, total));
      loss_sum += loss;
      ++iteration;
    }
    result.epoch_loss.push_back(loss_sum / static_cast<double>(per_epoch));
  }
  result.params = net.weight_count();
  result.top1 = evaluate_top1(net, data.validation);
  result.net = std::move(net);
  return result;
}

}  // namespace

RetrainResult retrain_subnet(const Architecture& arch, const WidthConfig& config, const TrainRecipe& recipe,
                             const Dataset& data) {
  validate(arch.space, config);
  return train_standalone(Network<float>(slice_architecture(arch, config), recipe.seed), recipe, data);
}

RetrainResult train_full_network(const Architecture& arch, const TrainRecipe& recipe, const Dataset& data) {
  return train_standalone(Network<float>(arch, recipe.seed), recipe, data);
}

namespace {

std::string fmt_opt(const std::optional<double>& v) {
  if (!v) return "";
  std::ostringstream s;
  s.precision(6);
  s << *v;
  return s.str();
}

// Splits one CSV line honouring double quotes.
std::vector<std::string> csv_fields(const std::string& line) {
  std::vector<std::string> out(1);
  bool quoted = false;
  for (char ch : line) {
    if (ch == '"') {
      quoted = !quoted;
    } else if (ch == ',' && !quoted) {
      out.emplace_back();
    } else if (ch != '\r') {
      out.back() += ch;
    }
  }
  return out;
}

std::optional<double> parse_opt(const std::string& s) {
  if (s.empty()) return std::nullopt;
  std::size_t used = 0;
  const double v = std::stod(s, &used);
  if (used != s.size()) throw std::invalid_argument(s);
  return v;
}

}  // namespace

void write_results_csv(std::ostream& out, const std::vector<ResultRow>& rows) {
  out << "config_id,widths,flops,params,proxy_acc,retrained_acc\n";
  for (const auto& r : rows) {
    out << r.config_id << ",\"" << to_string(r.widths) << "\"," << r.flops << ',' << r.params << ','
        << fmt_opt(r.proxy_acc) << ',' << fmt_opt(r.retrained_acc) << '\n';
  }
}

std::vector<ResultRow> read_results_csv(std::istream& in) {
  std::vector<ResultRow> rows;
  std::string line;
  long number = 0;
  if (!std::getline(in, line)) throw ConfigError("results table is empty");
  ++number;
  if (csv_fields(line) != std::vector<std::string>{"config_id", "widths", "flops", "params", "proxy_acc", "retrained_acc"}) {
    throw ConfigError("results table header must be config_id,widths,flops,params,proxy_acc,retrained_acc");
  }
  while (std::getline(in, line)) {
    ++number;
    if (line.find_first_not_of(" \t\r") == std::string::npos) continue;
    const auto f = csv_fields(line);
    try {
      if (f.size() != 6) throw std::invalid_argument("expected 6 fields");
      ResultRow r;
      r.config_id = f[0];
      r.widths = parse_widths(f[1]);
      r.flops = std::stoll(f[2]);
      r.params = std::stoll(f[3]);
      r.proxy_acc = parse_opt(f[4]);
      r.retrained_acc = parse_opt(f[5]);
      rows.push_back(std::move(r));
    } catch (const std::exception& e) {
      throw ConfigError("results line " + std::to_string(number) + ": " + e.what());
    }
  }
  return rows;
}

}  // namespace parawidth
