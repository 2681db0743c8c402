#pragma once

// Image classification splits behind one adapter: built-in synthetic sets
// and the CIFAR-10 binary format.

#include <cstdint>
#include <span>
#include <string>
#include <vector>

#include "json.hpp"
#include "parawidth/search_space.hpp"
#include "parawidth/tensor.hpp"

namespace parawidth {

struct Split {
  int channels = 0;
  int height = 0;
  int width = 0;
  std::vector<float> pixels;  // NCHW
  std::vector<int> labels;

  int size() const { return static_cast<int>(labels.size()); }
  std::size_t sample_size() const { return static_cast<std::size_t>(channels) * height * width; }
};

struct Dataset {
  std::string name;
  int num_classes = 0;
  Split train;
  Split validation;
  Split calibration;
};

struct DatasetSpec {
  std::string kind = "desk10";  // desk10 | separable | cifar10
  int train_size = 4000;
  int validation_size = 1000;
  int calibration_size = 512;
  int resolution = 32;
  std::uint64_t seed = 1;
  std::string root;  // cifar10: directory with data_batch_*.bin; empty reads PARAWIDTH_DATA
};

DatasetSpec dataset_spec_from_json(const nlohmann::json& j);
nlohmann::json dataset_spec_to_json(const DatasetSpec& spec);

// Throws ConfigError for unknown kinds or unreadable files.
Dataset load_dataset(const DatasetSpec& spec);

// Ten classes of textured 3-channel images. Each class mixes a shared bank
// of oriented gratings with its own weights and adds a coloured blob; samples
// see random shifts and contrast, a faint copy of another class, and noise.
Dataset make_desk10(const DatasetSpec& spec);
// Two classes separated with margin by a spatially constant random projection.
Dataset make_separable(const DatasetSpec& spec);
// Train: the first train_size images of data_batch_1..5; calibration: the
// next calibration_size; validation: the first validation_size of test_batch.
Dataset load_cifar10(const DatasetSpec& spec);

// Rows `indices` of a split; with `rng`, random horizontal flips and shifts
// of up to two pixels.
template <typename T>
Tensor<T> gather(const Split& split, std::span<const int> indices, Rng* rng = nullptr);

std::vector<int> gather_labels(const Split& split, std::span<const int> indices);

// The split cut into consecutive batches; the last one may be short.
template <typename T>
std::vector<Tensor<T>> split_batches(const Split& split, int batch_size, int max_batches = -1);
std::vector<std::vector<int>> split_label_batches(const Split& split, int batch_size, int max_batches = -1);

}  // namespace parawidth
