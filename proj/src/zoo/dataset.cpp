#include "mta/dataset.hpp"

#include <algorithm>
#include <charconv>
#include <cstdlib>
#include <numeric>

#include "mta/errors.hpp"
#include "mta/io.hpp"

namespace mta {

namespace fs = std::filesystem;

namespace {

constexpr std::uint64_t kMnist5kChecksum = 0x97fe8b074f2ee1b6ULL;
constexpr std::size_t kMnist5kPerClass = 500;
constexpr std::size_t kMnist5kTrainPerClass = 400;

// Prefers the uncompressed file, falls back to "<name>.gz".
fs::path find_file(const fs::path& dir, const std::string& name) {
  const fs::path plain = dir / name;
  if (fs::exists(plain)) return plain;
  fs::path gz = plain;
  gz += ".gz";
  if (fs::exists(gz)) return gz;
  throw NotFoundError("dataset file not found: " + plain.string() + " (or .gz)");
}

std::uint32_t read_be32(const std::string& bytes, std::size_t offset) {
  const auto* p = reinterpret_cast<const unsigned char*>(bytes.data()) + offset;
  return (std::uint32_t(p[0]) << 24) | (std::uint32_t(p[1]) << 16) | (std::uint32_t(p[2]) << 8) | p[3];
}

ExampleBatch load_idx_pair(const fs::path& images_path, const fs::path& labels_path) {
  const std::string images = io::read_file(images_path);
  const std::string labels = io::read_file(labels_path);
  if (images.size() < 16 || read_be32(images, 0) != 0x00000803) {
    throw FormatError("not an IDX image file: " + images_path.string());
  }
  if (labels.size() < 8 || read_be32(labels, 0) != 0x00000801) {
    throw FormatError("not an IDX label file: " + labels_path.string());
  }
  const std::size_t n = read_be32(images, 4), h = read_be32(images, 8), w = read_be32(images, 12);
  if (images.size() != 16 + n * h * w) throw FormatError("truncated IDX image file: " + images_path.string());
  if (read_be32(labels, 4) != n || labels.size() != 8 + n) {
    throw FormatError("IDX label count does not match images: " + labels_path.string());
  }
  ExampleBatch out;
  out.images = Tensor({n, h, w, 1});
  for (std::size_t i = 0; i < n * h * w; ++i) out.images[i] = static_cast<unsigned char>(images[16 + i]);
  out.labels.resize(n);
  for (std::size_t i = 0; i < n; ++i) {
    const int y = static_cast<unsigned char>(labels[8 + i]);
    if (y > 9) throw FormatError("label " + std::to_string(y) + " out of range in " + labels_path.string());
    out.labels[i] = y;
  }
  return out;
}

ExampleBatch load_mnist(const fs::path& dir, Split split) {
  const std::string prefix = split == Split::Train ? "train" : "t10k";
  const fs::path images = find_file(dir, prefix + "-images-idx3-ubyte");
  return load_idx_pair(images, find_file(dir, prefix + "-labels-idx1-ubyte"));
}

ExampleBatch load_cifar10(const fs::path& dir, Split split) {
  constexpr std::size_t kRecord = 1 + 32 * 32 * 3;
  const fs::path base = dir / "cifar-10-batches-bin";
  std::vector<fs::path> files;
  if (split == Split::Train) {
    for (int i = 1; i <= 5; ++i) files.push_back(base / ("data_batch_" + std::to_string(i) + ".bin"));
  } else {
    files.push_back(base / "test_batch.bin");
  }
  std::vector<std::string> contents;
  std::size_t n = 0;
  for (const auto& f : files) {
    contents.push_back(io::read_file(f));
    if (contents.back().size() % kRecord != 0) throw FormatError("truncated CIFAR-10 batch: " + f.string());
    n += contents.back().size() / kRecord;
  }
  ExampleBatch out;
  out.images = Tensor({n, 32, 32, 3});
  out.labels.reserve(n);
  std::size_t row = 0;
  for (std::size_t fi = 0; fi < files.size(); ++fi) {
    const auto* p = reinterpret_cast<const unsigned char*>(contents[fi].data());
    for (std::size_t r = 0; r < contents[fi].size() / kRecord; ++r, ++row) {
      const unsigned char* rec = p + r * kRecord;
      if (rec[0] > 9) throw FormatError("label out of range in " + files[fi].string());
      out.labels.push_back(rec[0]);
      double* img = out.images.ptr() + row * 3072;
      // Stored as three 32x32 planes; converted to interleaved HWC.
      for (std::size_t c = 0; c < 3; ++c) {
        for (std::size_t i = 0; i < 1024; ++i) img[i * 3 + c] = rec[1 + c * 1024 + i];
      }
    }
  }
  return out;
}

ExampleBatch load_mnist_5k(const fs::path& dir, Split split) {
  const fs::path path = dir / "mnist_5k.csv.gz";
  const std::string text = io::read_file(path);
  const std::uint64_t sum = io::fnv1a64(text);
  if (sum != kMnist5kChecksum) {
    throw FormatError("checksum mismatch for " + path.string() + ": got " + io::hex64(sum) + ", expected " +
                      io::hex64(kMnist5kChecksum));
  }
  std::vector<std::vector<double>> rows_by_class(10);
  std::vector<std::size_t> per_class(10, 0);
  std::vector<double> pixels;
  pixels.reserve(784);
  const char* p = text.data();
  const char* end = p + text.size();
  std::size_t line = 0;
  while (p < end) {
    ++line;
    pixels.clear();
    int label = -1;
    for (std::size_t col = 0; col < 785; ++col) {
      int v = 0;
      auto [next, ec] = std::from_chars(p, end, v);
      if (ec != std::errc() || v < 0 || v > 255) {
        throw FormatError("malformed value at line " + std::to_string(line) + " of " + path.string());
      }
      p = next;
      if (col < 784) {
        pixels.push_back(v);
        if (p >= end || *p != ',') throw FormatError("short row at line " + std::to_string(line));
        ++p;
      } else {
        label = v;
      }
    }
    while (p < end && (*p == '\n' || *p == '\r')) ++p;
    if (label > 9) throw FormatError("label out of range at line " + std::to_string(line));
    const std::size_t k = per_class[label]++;
    const bool in_train = k < kMnist5kTrainPerClass;
    if (in_train == (split == Split::Train)) {
      rows_by_class[label].insert(rows_by_class[label].end(), pixels.begin(), pixels.end());
    }
  }
  for (std::size_t c = 0; c < 10; ++c) {
    if (per_class[c] != kMnist5kPerClass) throw FormatError("unexpected class balance in " + path.string());
  }
  // Interleave classes so that any prefix is roughly balanced.
  const std::size_t per = (split == Split::Train ? kMnist5kTrainPerClass : kMnist5kPerClass - kMnist5kTrainPerClass);
  ExampleBatch out;
  out.images = Tensor({per * 10, 28, 28, 1});
  out.labels.resize(per * 10);
  for (std::size_t i = 0; i < per; ++i) {
    for (std::size_t c = 0; c < 10; ++c) {
      const std::size_t row = i * 10 + c;
      std::copy_n(rows_by_class[c].begin() + static_cast<std::ptrdiff_t>(i * 784), 784, out.images.ptr() + row * 784);
      out.labels[row] = static_cast<int>(c);
    }
  }
  return out;
}

void shuffle_indices(std::vector<std::size_t>& v, std::mt19937_64& rng) {
  // Explicit Fisher-Yates so the order does not depend on the standard library.
  for (std::size_t i = v.size(); i > 1; --i) std::swap(v[i - 1], v[rng() % i]);
}

}  // namespace

std::string_view split_name(Split split) { return split == Split::Train ? "train" : "test"; }

Split parse_split(std::string_view name) {
  if (name == "train") return Split::Train;
  if (name == "test") return Split::Test;
  throw ConfigError("unknown split '" + std::string(name) + "'");
}

Shape Dataset::input_shape() const {
  const Shape& s = examples.images.shape();
  return Shape(s.begin() + 1, s.end());
}

Dataset Dataset::subset(std::size_t n, std::uint64_t seed) const {
  Dataset out = *this;
  out.examples = sample_rows(examples, n, seed);
  return out;
}

ExampleBatch sample_rows(const ExampleBatch& batch, std::size_t n, std::uint64_t seed) {
  if (n >= batch.size()) return batch;
  std::vector<std::size_t> idx(batch.size());
  std::iota(idx.begin(), idx.end(), 0);
  std::mt19937_64 rng(seed);
  shuffle_indices(idx, rng);
  idx.resize(n);
  std::sort(idx.begin(), idx.end());
  return batch.select(idx);
}

fs::path default_data_dir() {
  if (const char* env = std::getenv("MTA_DATA_DIR"); env && *env) return env;
  return "data";
}

Shape dataset_input_shape(std::string_view name) {
  if (name == "mnist" || name == "mnist-5k") return {28, 28, 1};
  if (name == "cifar10") return {32, 32, 3};
  throw ConfigError("unknown dataset '" + std::string(name) + "'");
}

Dataset load_dataset(std::string_view name, Split split, const fs::path& data_dir) {
  Dataset d;
  d.name = std::string(name);
  d.split = split;
  if (name == "mnist") {
    d.examples = load_mnist(data_dir, split);
  } else if (name == "cifar10") {
    d.examples = load_cifar10(data_dir, split);
  } else if (name == "mnist-5k") {
    d.examples = load_mnist_5k(data_dir, split);
  } else {
    throw ConfigError("unknown dataset '" + std::string(name) + "'");
  }
  return d;
}

BatchStream::BatchStream(const ExampleBatch& data, std::size_t batch_size, std::uint64_t seed, bool shuffle)
    : data_(&data), batch_size_(batch_size), shuffle_(shuffle), rng_(seed) {
  if (batch_size == 0) throw ConfigError("batch size must be positive");
  start_epoch();
}

void BatchStream::start_epoch() {
  order_.resize(data_->size());
  std::iota(order_.begin(), order_.end(), 0);
  if (shuffle_) shuffle_indices(order_, rng_);
  cursor_ = 0;
}

bool BatchStream::next(ExampleBatch& out) {
  if (exhausted_) {
    exhausted_ = false;
    ++epoch_;
    start_epoch();
  }
  if (cursor_ >= order_.size()) {
    exhausted_ = true;
    return false;
  }
  const std::size_t end = std::min(order_.size(), cursor_ + batch_size_);
  out = data_->select(std::span<const std::size_t>(order_).subspan(cursor_, end - cursor_));
  cursor_ = end;
  return true;
}

std::size_t BatchStream::batches_per_epoch() const noexcept {
  return (data_->size() + batch_size_ - 1) / batch_size_;
}

}  // namespace mta
