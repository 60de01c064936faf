#pragma once

// Image classification datasets in raw pixel units.
//
// Supported ids and the files looked up under the data directory:
//   mnist     train-images-idx3-ubyte, train-labels-idx1-ubyte,
//             t10k-images-idx3-ubyte, t10k-labels-idx1-ubyte (each optionally .gz)
//   cifar10   cifar-10-batches-bin/data_batch_{1..5}.bin, test_batch.bin
//   mnist-5k  mnist_5k.csv.gz, a class-balanced 5000-image MNIST sample;
//             the first 400 images of each class form the train split and
//             the remaining 100 the test split.

#include <cstdint>
#include <filesystem>
#include <random>
#include <string>
#include <string_view>
#include <vector>

#include "mta/attack.hpp"

namespace mta {

enum class Split { Train, Test };

std::string_view split_name(Split split);
Split parse_split(std::string_view name);

struct Dataset {
  std::string name;
  Split split = Split::Train;
  std::size_t num_classes = 10;
  ExampleBatch examples;

  std::size_t size() const noexcept { return examples.size(); }
  Shape input_shape() const;
  /// First `n` examples after a seeded shuffle, keeping the original order
  /// among the chosen ones. n >= size() returns everything.
  Dataset subset(std::size_t n, std::uint64_t seed) const;
};

/// `n` rows drawn by a seeded shuffle, kept in their original order.
/// n >= batch.size() returns the batch unchanged.
ExampleBatch sample_rows(const ExampleBatch& batch, std::size_t n, std::uint64_t seed);

/// $MTA_DATA_DIR when set, otherwise ./data.
std::filesystem::path default_data_dir();

/// Throws NotFoundError naming the missing file, FormatError on malformed
/// contents or checksum mismatch, ConfigError on an unknown id.
Dataset load_dataset(std::string_view name, Split split, const std::filesystem::path& data_dir = default_data_dir());

/// Shape of one image for a dataset id, without touching the disk.
Shape dataset_input_shape(std::string_view name);

/// Mini-batches over a fixed example set, reshuffled each epoch from a
/// seeded stream. The last batch of an epoch may be smaller.
class BatchStream {
 public:
  BatchStream(const ExampleBatch& data, std::size_t batch_size, std::uint64_t seed, bool shuffle = true);

  /// Next batch of the current epoch; false once the epoch is exhausted, after
  /// which the following call starts a new epoch.
  bool next(ExampleBatch& out);
  std::size_t batches_per_epoch() const noexcept;
  /// Zero-based index of the epoch currently being read.
  std::size_t epoch() const noexcept { return epoch_; }

 private:
  void start_epoch();

  const ExampleBatch* data_;
  std::size_t batch_size_;
  bool shuffle_;
  std::mt19937_64 rng_;
  std::vector<std::size_t> order_;
  std::size_t cursor_ = 0;
  std::size_t epoch_ = 0;
  bool exhausted_ = false;
};

}  // namespace mta
