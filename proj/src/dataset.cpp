#include "parawidth/dataset.hpp"

#include <cmath>
#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <numbers>

#include "parawidth/errors.hpp"

namespace parawidth {

DatasetSpec dataset_spec_from_json(const nlohmann::json& j) {
  DatasetSpec s;
  try {
    s.kind = j.value("kind", s.kind);
    s.train_size = j.value("train_size", s.train_size);
    s.validation_size = j.value("validation_size", s.validation_size);
    s.calibration_size = j.value("calibration_size", s.calibration_size);
    s.resolution = j.value("resolution", s.resolution);
    s.seed = j.value("seed", s.seed);
    s.root = j.value("root", s.root);
  } catch (const nlohmann::json::exception& e) {
    throw ConfigError(std::string("dataset: ") + e.what());
  }
  if (s.train_size < 1 || s.validation_size < 1 || s.calibration_size < 1) {
    throw ConfigError("dataset split sizes must be positive");
  }
  if (s.resolution < 4) throw ConfigError("dataset resolution must be >= 4");
  return s;
}

nlohmann::json dataset_spec_to_json(const DatasetSpec& s) {
  nlohmann::ordered_json j;
  j["kind"] = s.kind;
  j["train_size"] = s.train_size;
  j["validation_size"] = s.validation_size;
  j["calibration_size"] = s.calibration_size;
  j["resolution"] = s.resolution;
  j["seed"] = s.seed;
  if (!s.root.empty()) j["root"] = s.root;
  return nlohmann::json(j);
}

Dataset load_dataset(const DatasetSpec& spec) {
  if (spec.kind == "desk10") return make_desk10(spec);
  if (spec.kind == "separable") return make_separable(spec);
  if (spec.kind == "cifar10") return load_cifar10(spec);
  throw ConfigError("unknown dataset kind '" + spec.kind + "' (desk10, separable, cifar10)");
}

namespace {

Split empty_split(int n, int c, int r) {
  Split s;
  s.channels = c;
  s.height = s.width = r;
  s.pixels.assign(static_cast<std::size_t>(n) * c * r * r, 0.0f);
  s.labels.assign(static_cast<std::size_t>(n), 0);
  return s;
}

struct Prototype {
  std::vector<float> pixels;  // 3 x r x r, unit variance
};

std::vector<Prototype> desk10_prototypes(int r, Rng& rng) {
  std::uniform_real_distribution<double> u(0.0, 1.0);
  std::normal_distribution<double> g(0.0, 1.0);
  const double two_pi = 2.0 * std::numbers::pi;
  // Classes are different mixtures of one shared grating bank.
  constexpr int kBank = 12;
  std::vector<std::vector<double>> bank;
  for (int k = 0; k < kBank; ++k) {
    const double freq = 1.0 + 7.0 * u(rng);
    const double theta = std::numbers::pi * u(rng);
    const double phase = two_pi * u(rng);
    const double mix[3] = {g(rng), g(rng), g(rng)};
    std::vector<double> plane(static_cast<std::size_t>(3) * r * r);
    for (int y = 0; y < r; ++y) {
      for (int x = 0; x < r; ++x) {
        const double t = (std::cos(theta) * x + std::sin(theta) * y) / r;
        const double v = std::sin(two_pi * freq * t + phase);
        for (int ch = 0; ch < 3; ++ch) plane[(static_cast<std::size_t>(ch) * r + y) * r + x] = mix[ch] * v;
      }
    }
    bank.push_back(std::move(plane));
  }
  std::vector<Prototype> out;
  for (int c = 0; c < 10; ++c) {
    Prototype p;
    std::vector<double> acc(static_cast<std::size_t>(3) * r * r, 0.0);
    for (const auto& plane : bank) {
      const double w = g(rng);
      for (std::size_t i = 0; i < acc.size(); ++i) acc[i] += w * plane[i];
    }
    const double cx = r * (0.2 + 0.6 * u(rng)), cy = r * (0.2 + 0.6 * u(rng)), sigma = r / 6.0;
    const double blob[3] = {g(rng), g(rng), g(rng)};
    for (int y = 0; y < r; ++y) {
      for (int x = 0; x < r; ++x) {
        const double e = std::exp(-((x - cx) * (x - cx) + (y - cy) * (y - cy)) / (2 * sigma * sigma));
        for (int ch = 0; ch < 3; ++ch) acc[(static_cast<std::size_t>(ch) * r + y) * r + x] += 2.0 * blob[ch] * e;
      }
    }
    double mean = 0.0, sq = 0.0;
    for (double v : acc) mean += v;
    mean /= static_cast<double>(acc.size());
    for (double v : acc) sq += (v - mean) * (v - mean);
    const double scale = 1.0 / std::sqrt(sq / static_cast<double>(acc.size()) + 1e-12);
    p.pixels.resize(acc.size());
    for (std::size_t i = 0; i < acc.size(); ++i) p.pixels[i] = static_cast<float>((acc[i] - mean) * scale);
    out.push_back(std::move(p));
  }
  return out;
}

void add_shifted(float* dst, const Prototype& p, int r, int dx, int dy, double weight) {
  for (int ch = 0; ch < 3; ++ch) {
    for (int y = 0; y < r; ++y) {
      const int sy = ((y - dy) % r + r) % r;
      for (int x = 0; x < r; ++x) {
        const int sx = ((x - dx) % r + r) % r;
        dst[(ch * r + y) * r + x] += static_cast<float>(weight * p.pixels[(static_cast<std::size_t>(ch) * r + sy) * r + sx]);
      }
    }
  }
}

Split desk10_split(const std::vector<Prototype>& protos, int n, int r, Rng& rng) {
  Split s = empty_split(n, 3, r);
  std::uniform_int_distribution<int> cls(0, 9), other(0, 8), shift(-r / 8, r / 8);
  std::uniform_real_distribution<double> contrast(0.3, 1.3), distract(0.0, 0.9);
  std::normal_distribution<double> noise(0.0, 1.5);
  const std::size_t stride = s.sample_size();
  for (int i = 0; i < n; ++i) {
    const int y = cls(rng);
    int y2 = other(rng);
    if (y2 >= y) ++y2;
    float* dst = s.pixels.data() + static_cast<std::size_t>(i) * stride;
    add_shifted(dst, protos[static_cast<std::size_t>(y)], r, shift(rng), shift(rng), contrast(rng));
    add_shifted(dst, protos[static_cast<std::size_t>(y2)], r, shift(rng), shift(rng), distract(rng));
    for (std::size_t k = 0; k < stride; ++k) dst[k] += static_cast<float>(noise(rng));
    s.labels[static_cast<std::size_t>(i)] = y;
  }
  return s;
}

}  // namespace

Dataset make_desk10(const DatasetSpec& spec) {
  Rng rng(spec.seed);
  const int r = spec.resolution;
  const auto protos = desk10_prototypes(r, rng);
  Dataset d;
  d.name = "desk10";
  d.num_classes = 10;
  Rng train_rng(spec.seed * 3 + 1), val_rng(spec.seed * 3 + 2), cal_rng(spec.seed * 3 + 3);
  d.train = desk10_split(protos, spec.train_size, r, train_rng);
  d.validation = desk10_split(protos, spec.validation_size, r, val_rng);
  d.calibration = desk10_split(protos, spec.calibration_size, r, cal_rng);
  return d;
}

namespace {

Split separable_split(const std::vector<double>& v, int n, int r, Rng& rng) {
  Split s = empty_split(n, 3, r);
  std::normal_distribution<double> g(0.0, 1.0);
  std::uniform_real_distribution<double> u(0.0, 1.0);
  std::bernoulli_distribution coin(0.5);
  const std::size_t dim = s.sample_size();
  std::vector<double> x(dim);
  for (int i = 0; i < n; ++i) {
    double along = 0.0;
    for (std::size_t k = 0; k < dim; ++k) {
      x[k] = g(rng);
      along += x[k] * v[k];
    }
    const int label = coin(rng) ? 1 : 0;
    const double target = (label ? 2.0 : -2.0) * (1.0 + u(rng));
    float* dst = s.pixels.data() + static_cast<std::size_t>(i) * dim;
    for (std::size_t k = 0; k < dim; ++k) dst[k] = static_cast<float>(x[k] + (target - along) * v[k]);
    s.labels[static_cast<std::size_t>(i)] = label;
  }
  return s;
}

}  // namespace

Dataset make_separable(const DatasetSpec& spec) {
  Rng rng(spec.seed);
  const int r = spec.resolution;
  std::normal_distribution<double> g(0.0, 1.0);
  double w[3], norm = 0.0;
  for (double& e : w) {
    e = g(rng);
    norm += e * e;
  }
  // Constant over space, so the direction survives global pooling.
  std::vector<double> v(static_cast<std::size_t>(3) * r * r);
  for (int ch = 0; ch < 3; ++ch) {
    for (int k = 0; k < r * r; ++k) v[static_cast<std::size_t>(ch) * r * r + k] = w[ch] / std::sqrt(norm) / r;
  }
  Dataset d;
  d.name = "separable";
  d.num_classes = 2;
  Rng train_rng(spec.seed * 3 + 1), val_rng(spec.seed * 3 + 2), cal_rng(spec.seed * 3 + 3);
  d.train = separable_split(v, spec.train_size, r, train_rng);
  d.validation = separable_split(v, spec.validation_size, r, val_rng);
  d.calibration = separable_split(v, spec.calibration_size, r, cal_rng);
  return d;
}

namespace {

constexpr int kCifarRecord = 1 + 3 * 32 * 32;
constexpr float kCifarMean[3] = {0.4914f, 0.4822f, 0.4465f};
constexpr float kCifarStd[3] = {0.2470f, 0.2435f, 0.2616f};

std::filesystem::path cifar_root(const DatasetSpec& spec) {
  std::string root = spec.root;
  if (root.empty()) {
    const char* env = std::getenv("PARAWIDTH_DATA");
    if (!env || !*env) throw ConfigError("cifar10 needs a dataset root: set PARAWIDTH_DATA or dataset.root");
    root = env;
  }
  std::filesystem::path p(root);
  if (std::filesystem::exists(p / "cifar-10-batches-bin")) p /= "cifar-10-batches-bin";
  return p;
}

// Appends up to `count` records from `file`; returns how many were read.
int read_cifar(const std::filesystem::path& file, Split& split, int count) {
  std::ifstream in(file, std::ios::binary);
  if (!in) throw ConfigError("cannot open '" + file.string() + "'");
  std::vector<unsigned char> buf(kCifarRecord);
  int read = 0;
  while (read < count && in.read(reinterpret_cast<char*>(buf.data()), kCifarRecord)) {
    if (buf[0] > 9) throw ConfigError("'" + file.string() + "' has label " + std::to_string(buf[0]));
    split.labels.push_back(buf[0]);
    for (int ch = 0; ch < 3; ++ch) {
      for (int k = 0; k < 1024; ++k) {
        split.pixels.push_back((buf[1 + ch * 1024 + k] / 255.0f - kCifarMean[ch]) / kCifarStd[ch]);
      }
    }
    ++read;
  }
  return read;
}

}  // namespace

Dataset load_cifar10(const DatasetSpec& spec) {
  if (spec.resolution != 32) throw ConfigError("cifar10 images are 32x32");
  const auto root = cifar_root(spec);
  Dataset d;
  d.name = "cifar10";
  d.num_classes = 10;
  for (Split* s : {&d.train, &d.validation, &d.calibration}) {
    s->channels = 3;
    s->height = s->width = 32;
  }
  Split pool = d.train;
  const int wanted = spec.train_size + spec.calibration_size;
  for (int b = 1; b <= 5 && pool.size() < wanted; ++b) {
    read_cifar(root / ("data_batch_" + std::to_string(b) + ".bin"), pool, wanted - pool.size());
  }
  read_cifar(root / "test_batch.bin", d.validation, spec.validation_size);
  if (pool.size() < wanted || d.validation.size() < spec.validation_size) {
    throw ConfigError("cifar10 files under '" + root.string() + "' hold fewer images than requested");
  }
  const std::size_t cut = static_cast<std::size_t>(spec.train_size);
  const std::size_t px = pool.sample_size();
  d.train.labels.assign(pool.labels.begin(), pool.labels.begin() + cut);
  d.train.pixels.assign(pool.pixels.begin(), pool.pixels.begin() + cut * px);
  d.calibration.labels.assign(pool.labels.begin() + cut, pool.labels.end());
  d.calibration.pixels.assign(pool.pixels.begin() + cut * px, pool.pixels.end());
  return d;
}

template <typename T>
Tensor<T> gather(const Split& split, std::span<const int> indices, Rng* rng) {
  const int n = static_cast<int>(indices.size());
  const int c = split.channels, h = split.height, w = split.width;
  Tensor<T> out(n, c, h, w);
  const std::size_t stride = split.sample_size();
  std::uniform_int_distribution<int> shift(-2, 2);
  std::bernoulli_distribution flip(0.5);
  for (int i = 0; i < n; ++i) {
    const int idx = indices[static_cast<std::size_t>(i)];
    if (idx < 0 || idx >= split.size()) throw IndexError("sample index " + std::to_string(idx) + " out of range");
    const float* src = split.pixels.data() + static_cast<std::size_t>(idx) * stride;
    T* dst = out.sample(i);
    if (!rng) {
      for (std::size_t k = 0; k < stride; ++k) dst[k] = static_cast<T>(src[k]);
      continue;
    }
    const bool mirror = flip(*rng);
    const int dx = shift(*rng), dy = shift(*rng);
    for (int ch = 0; ch < c; ++ch) {
      for (int y = 0; y < h; ++y) {
        const int sy = y - dy;
        for (int x = 0; x < w; ++x) {
          int sx = x - dx;
          if (mirror) sx = w - 1 - sx;
          const bool inside = sy >= 0 && sy < h && sx >= 0 && sx < w;
          dst[(ch * h + y) * w + x] = inside ? static_cast<T>(src[(static_cast<std::size_t>(ch) * h + sy) * w + sx]) : T(0);
        }
      }
    }
  }
  return out;
}

std::vector<int> gather_labels(const Split& split, std::span<const int> indices) {
  std::vector<int> out;
  out.reserve(indices.size());
  for (int idx : indices) out.push_back(split.labels.at(static_cast<std::size_t>(idx)));
  return out;
}

namespace {

std::vector<std::vector<int>> batch_indices(const Split& split, int batch_size, int max_batches) {
  if (batch_size < 1) throw ConfigError("batch size must be positive");
  std::vector<std::vector<int>> out;
  for (int begin = 0; begin < split.size(); begin += batch_size) {
    if (max_batches >= 0 && static_cast<int>(out.size()) >= max_batches) break;
    std::vector<int> idx;
    for (int i = begin; i < std::min(split.size(), begin + batch_size); ++i) idx.push_back(i);
    out.push_back(std::move(idx));
  }
  return out;
}

}  // namespace

template <typename T>
std::vector<Tensor<T>> split_batches(const Split& split, int batch_size, int max_batches) {
  std::vector<Tensor<T>> out;
  for (const auto& idx : batch_indices(split, batch_size, max_batches)) out.push_back(gather<T>(split, idx));
  return out;
}

std::vector<std::vector<int>> split_label_batches(const Split& split, int batch_size, int max_batches) {
  std::vector<std::vector<int>> out;
  for (const auto& idx : batch_indices(split, batch_size, max_batches)) out.push_back(gather_labels(split, idx));
  return out;
}

template Tensor<float> gather<float>(const Split&, std::span<const int>, Rng*);
template Tensor<double> gather<double>(const Split&, std::span<const int>, Rng*);
template std::vector<Tensor<float>> split_batches<float>(const Split&, int, int);
template std::vector<Tensor<double>> split_batches<double>(const Split&, int, int);

}  // namespace parawidth
