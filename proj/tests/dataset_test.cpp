#include <gtest/gtest.h>
#include <zlib.h>

#include <algorithm>
#include <filesystem>
#include <set>

#include "mta/dataset.hpp"
#include "mta/errors.hpp"
#include "mta/io.hpp"

namespace mta {
namespace {

namespace fs = std::filesystem;

double pixel(const Tensor& t, std::size_t n, std::size_t r, std::size_t c, std::size_t k) {
  const Shape& s = t.shape();
  return t[((n * s[1] + r) * s[2] + c) * s[3] + k];
}

std::vector<double> values(const Tensor& t) { return {t.data().begin(), t.data().end()}; }

void put_be32(std::string& out, std::uint32_t v) {
  for (int s = 24; s >= 0; s -= 8) out.push_back(static_cast<char>((v >> s) & 0xff));
}

void write_gz(const fs::path& path, const std::string& bytes) {
  gzFile f = gzopen(path.c_str(), "wb");
  ASSERT_NE(f, nullptr);
  ASSERT_EQ(gzwrite(f, bytes.data(), static_cast<unsigned>(bytes.size())), static_cast<int>(bytes.size()));
  gzclose(f);
}

class SyntheticData : public ::testing::Test {
 protected:
  void SetUp() override {
    dir_ = fs::temp_directory_path() / (std::string("mta_data_") +
                                        ::testing::UnitTest::GetInstance()->current_test_info()->name());
    fs::remove_all(dir_);
    fs::create_directories(dir_);
  }
  void TearDown() override { fs::remove_all(dir_); }

  // n images of 28x28; pixel (r, c) of image i is (i + r + c) mod 256, label i mod 10.
  static std::pair<std::string, std::string> idx_files(std::uint32_t n) {
    std::string img, lab;
    put_be32(img, 0x803);
    put_be32(img, n);
    put_be32(img, 28);
    put_be32(img, 28);
    put_be32(lab, 0x801);
    put_be32(lab, n);
    for (std::uint32_t i = 0; i < n; ++i) {
      for (int r = 0; r < 28; ++r)
        for (int c = 0; c < 28; ++c) img.push_back(static_cast<char>((i + r + c) % 256));
      lab.push_back(static_cast<char>(i % 10));
    }
    return {img, lab};
  }

  fs::path dir_;
};

TEST_F(SyntheticData, IdxPlainAndGzipAgree) {
  auto [img, lab] = idx_files(12);
  io::write_file_atomic(dir_ / "train-images-idx3-ubyte", img);
  io::write_file_atomic(dir_ / "train-labels-idx1-ubyte", lab);
  auto [timg, tlab] = idx_files(5);
  write_gz(dir_ / "t10k-images-idx3-ubyte.gz", timg);
  write_gz(dir_ / "t10k-labels-idx1-ubyte.gz", tlab);

  const Dataset train = load_dataset("mnist", Split::Train, dir_);
  ASSERT_EQ(train.size(), 12u);
  EXPECT_EQ(train.input_shape(), (Shape{28, 28, 1}));
  EXPECT_EQ(pixel(train.examples.images, 3, 2, 5, 0), 10.0);
  EXPECT_EQ(train.examples.labels[11], 1);

  const Dataset test = load_dataset("mnist", Split::Test, dir_);
  ASSERT_EQ(test.size(), 5u);
  EXPECT_EQ(pixel(test.examples.images, 4, 27, 27, 0), double((4 + 54) % 256));
  EXPECT_EQ(test.split, Split::Test);
}

TEST_F(SyntheticData, IdxCorruptionIsAFormatError) {
  auto [img, lab] = idx_files(4);
  io::write_file_atomic(dir_ / "train-images-idx3-ubyte", img.substr(0, img.size() - 1));
  io::write_file_atomic(dir_ / "train-labels-idx1-ubyte", lab);
  EXPECT_THROW(load_dataset("mnist", Split::Train, dir_), FormatError);

  io::write_file_atomic(dir_ / "train-images-idx3-ubyte", img);
  lab.back() = 10;
  io::write_file_atomic(dir_ / "train-labels-idx1-ubyte", lab);
  EXPECT_THROW(load_dataset("mnist", Split::Train, dir_), FormatError);

  img[3] = 0x01;
  io::write_file_atomic(dir_ / "train-images-idx3-ubyte", img);
  EXPECT_THROW(load_dataset("mnist", Split::Train, dir_), FormatError);
}

TEST_F(SyntheticData, MissingFilesNameThePath) {
  try {
    load_dataset("mnist", Split::Test, dir_);
    FAIL() << "expected NotFoundError";
  } catch (const NotFoundError& e) {
    EXPECT_NE(std::string(e.what()).find("t10k-images-idx3-ubyte"), std::string::npos);
  }
  EXPECT_THROW(load_dataset("cifar10", Split::Train, dir_), NotFoundError);
  EXPECT_THROW(load_dataset("mnist-5k", Split::Train, dir_), NotFoundError);
  EXPECT_THROW(load_dataset("svhn", Split::Train, dir_), ConfigError);
}

TEST_F(SyntheticData, CifarRecordsArePlanarRgbConvertedToHwc) {
  // Two records; channel k of pixel (r, c) holds (k * 50 + r + c) mod 256.
  std::string rec;
  for (int label : {7, 2}) {
    rec.push_back(static_cast<char>(label));
    for (int k = 0; k < 3; ++k)
      for (int r = 0; r < 32; ++r)
        for (int c = 0; c < 32; ++c) rec.push_back(static_cast<char>((k * 50 + r + c + label) % 256));
  }
  fs::create_directories(dir_ / "cifar-10-batches-bin");
  io::write_file_atomic(dir_ / "cifar-10-batches-bin" / "test_batch.bin", rec);
  const Dataset d = load_dataset("cifar10", Split::Test, dir_);
  ASSERT_EQ(d.size(), 2u);
  EXPECT_EQ(d.input_shape(), (Shape{32, 32, 3}));
  EXPECT_EQ(d.examples.labels, (std::vector<int>{7, 2}));
  EXPECT_EQ(pixel(d.examples.images, 0, 1, 2, 1), double(50 + 3 + 7));
  EXPECT_EQ(pixel(d.examples.images, 1, 31, 0, 2), double(100 + 31 + 2));

  io::write_file_atomic(dir_ / "cifar-10-batches-bin" / "test_batch.bin", rec.substr(1));
  EXPECT_THROW(load_dataset("cifar10", Split::Test, dir_), FormatError);
}

TEST_F(SyntheticData, Mnist5kChecksumMismatchIsAFormatError) {
  const std::string text = io::read_file(fs::path(MTA_TEST_DATA_DIR) / "mnist_5k.csv.gz");
  std::string altered = text;
  altered[altered.find(',') - 1] = altered[altered.find(',') - 1] == '0' ? '1' : '0';
  write_gz(dir_ / "mnist_5k.csv.gz", altered);
  EXPECT_THROW(load_dataset("mnist-5k", Split::Train, dir_), FormatError);
}

TEST(Mnist5k, SplitsAreClassBalancedAndDisjoint) {
  const Dataset train = load_dataset("mnist-5k", Split::Train, MTA_TEST_DATA_DIR);
  const Dataset test = load_dataset("mnist-5k", Split::Test, MTA_TEST_DATA_DIR);
  ASSERT_EQ(train.size(), 4000u);
  ASSERT_EQ(test.size(), 1000u);
  EXPECT_EQ(train.input_shape(), (Shape{28, 28, 1}));
  std::vector<int> per_class(10, 0);
  for (int y : test.examples.labels) ++per_class[y];
  EXPECT_EQ(per_class, std::vector<int>(10, 100));

  const std::size_t px = 28 * 28;
  std::set<std::vector<double>> seen;
  for (std::size_t i = 0; i < train.size(); ++i) {
    const double* p = train.examples.images.ptr() + i * px;
    seen.emplace(p, p + px);
  }
  std::size_t overlap = 0;
  for (std::size_t i = 0; i < test.size(); ++i) {
    const double* p = test.examples.images.ptr() + i * px;
    overlap += seen.count(std::vector<double>(p, p + px));
  }
  EXPECT_EQ(overlap, 0u);
  const auto [lo, hi] = std::minmax_element(train.examples.images.data().begin(), train.examples.images.data().end());
  EXPECT_EQ(*lo, 0.0);
  EXPECT_EQ(*hi, 255.0);
}

TEST(Mnist5k, LoadingIsDeterministic) {
  const Dataset a = load_dataset("mnist-5k", Split::Test, MTA_TEST_DATA_DIR);
  const Dataset b = load_dataset("mnist-5k", Split::Test, MTA_TEST_DATA_DIR);
  EXPECT_EQ(a.examples.images, b.examples.images);
  EXPECT_EQ(a.examples.labels, b.examples.labels);
}

ExampleBatch counting_batch(std::size_t n) {
  ExampleBatch b{Tensor({n, 1, 1, 1}), std::vector<int>(n), std::nullopt};
  for (std::size_t i = 0; i < n; ++i) {
    b.images[i] = double(i);
    b.labels[i] = int(i % 10);
  }
  return b;
}

TEST(SampleRows, SeededSortedAndWithoutReplacement) {
  const ExampleBatch all = counting_batch(50);
  const ExampleBatch a = sample_rows(all, 20, 5), b = sample_rows(all, 20, 5), c = sample_rows(all, 20, 6);
  EXPECT_EQ(a.images, b.images);
  EXPECT_NE(a.images, c.images);
  ASSERT_EQ(a.size(), 20u);
  for (std::size_t i = 1; i < a.size(); ++i) EXPECT_LT(a.images[i - 1], a.images[i]);
  for (std::size_t i = 0; i < a.size(); ++i) EXPECT_EQ(a.labels[i], int(a.images[i]) % 10);
  EXPECT_EQ(sample_rows(all, 80, 1).images, all.images);
}

TEST(BatchStream, EachEpochVisitsEveryExampleOnce) {
  const ExampleBatch all = counting_batch(23);
  BatchStream stream(all, 5, 9);
  EXPECT_EQ(stream.batches_per_epoch(), 5u);
  std::vector<std::vector<double>> epochs(2);
  for (int e = 0; e < 2; ++e) {
    ExampleBatch batch;
    std::size_t batches = 0;
    while (stream.next(batch)) {
      ++batches;
      EXPECT_LE(batch.size(), 5u);
      epochs[e].insert(epochs[e].end(), batch.images.data().begin(), batch.images.data().end());
    }
    EXPECT_EQ(batches, 5u);
  }
  EXPECT_NE(epochs[0], epochs[1]);
  for (auto& seen : epochs) {
    std::sort(seen.begin(), seen.end());
    EXPECT_EQ(seen, values(all.images));
  }
  EXPECT_EQ(stream.epoch(), 1u);
}

TEST(BatchStream, UnshuffledStreamKeepsOrder) {
  const ExampleBatch all = counting_batch(7);
  BatchStream stream(all, 3, 1, false);
  ExampleBatch batch;
  ASSERT_TRUE(stream.next(batch));
  EXPECT_EQ(values(batch.images), (std::vector<double>{0, 1, 2}));
}

}  // namespace
}  // namespace mta
