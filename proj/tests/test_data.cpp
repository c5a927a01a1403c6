#include <gtest/gtest.h>
#include <zlib.h>

#include <cstdlib>
#include <filesystem>
#include <fstream>

#include "hfcnn/data.hpp"

using namespace hfcnn;
namespace fs = std::filesystem;

namespace {

class TempDir {
 public:
  TempDir() {
    path_ = fs::temp_directory_path() / ("hfcnn_data_" + std::to_string(::getpid()) + "_" + std::to_string(counter_++));
    fs::create_directories(path_);
  }
  ~TempDir() { fs::remove_all(path_); }
  std::string file(const std::string& name) const { return (path_ / name).string(); }

 private:
  fs::path path_;
  static inline int counter_ = 0;
};

void put(const std::string& path, const std::vector<std::uint8_t>& bytes) {
  std::ofstream f(path, std::ios::binary);
  f.write(reinterpret_cast<const char*>(bytes.data()), static_cast<std::streamsize>(bytes.size()));
}

std::vector<std::uint8_t> get(const std::string& path) {
  std::ifstream f(path, std::ios::binary);
  return {std::istreambuf_iterator<char>(f), std::istreambuf_iterator<char>()};
}

void put_gz(const std::string& path, const std::vector<std::uint8_t>& bytes) {
  gzFile gz = gzopen(path.c_str(), "wb");
  gzwrite(gz, bytes.data(), static_cast<unsigned>(bytes.size()));
  gzclose(gz);
}

// Two 2x3 images and their labels, written out byte by byte.
const std::vector<std::uint8_t> kImages = {0x00, 0x00, 0x08, 0x03, 0, 0, 0, 2, 0, 0, 0, 2, 0, 0, 0, 3,
                                           0,    51,   102,  153,  204, 255,  //
                                           255,  0,    1,    2,    3,   4};
const std::vector<std::uint8_t> kLabels = {0x00, 0x00, 0x08, 0x01, 0, 0, 0, 2, 7, 3};

template <class F>
Errc code_of(F&& f) {
  try {
    f();
  } catch (const Error& e) {
    return e.code();
  }
  ADD_FAILURE() << "no error thrown";
  return Errc::io;
}

}  // namespace

TEST(Idx, ParsesFixtureBytes) {
  TempDir dir;
  put(dir.file("img"), kImages);
  put(dir.file("lab"), kLabels);
  const Dataset d = load_mnist_idx(dir.file("img"), dir.file("lab"));
  ASSERT_EQ(d.size(), 2u);
  EXPECT_EQ(d.sample_shape, (Shape{2, 3, 1}));
  EXPECT_EQ(d.labels, (std::vector<std::uint32_t>{7, 3}));
  EXPECT_EQ(d.pixels[0], 0.0);
  EXPECT_EQ(d.pixels[1], 51.0 / 255.0);
  EXPECT_EQ(d.pixels[5], 1.0);
  EXPECT_EQ(d.pixels[6], 1.0);
  EXPECT_EQ(d.pixels[11], 4.0 / 255.0);
}

TEST(Idx, RoundTripsBytesExactly) {
  TempDir dir;
  put(dir.file("img"), kImages);
  put(dir.file("lab"), kLabels);
  const Dataset d = load_mnist_idx(dir.file("img"), dir.file("lab"));
  write_mnist_idx(d, dir.file("img2"), dir.file("lab2"));
  EXPECT_EQ(get(dir.file("img2")), kImages);
  EXPECT_EQ(get(dir.file("lab2")), kLabels);
}

TEST(Idx, ReadsGzip) {
  TempDir dir;
  put_gz(dir.file("img.gz"), kImages);
  put_gz(dir.file("lab.gz"), kLabels);
  const Dataset d = load_mnist_idx(dir.file("img.gz"), dir.file("lab.gz"));
  EXPECT_EQ(d.labels, (std::vector<std::uint32_t>{7, 3}));
  EXPECT_EQ(d.pixels[4], 204.0 / 255.0);
}

TEST(Idx, MalformedInputs) {
  TempDir dir;
  put(dir.file("lab"), kLabels);

  auto bad = kImages;
  bad[3] = 0x01;  // label magic in the image file
  put(dir.file("img"), bad);
  try {
    load_mnist_idx(dir.file("img"), dir.file("lab"));
    FAIL();
  } catch (const Error& e) {
    EXPECT_EQ(e.code(), Errc::format);
    EXPECT_NE(std::string(e.what()).find("0x00000801"), std::string::npos) << e.what();
  }

  bad = kImages;
  bad.pop_back();  // truncated pixel data
  put(dir.file("img"), bad);
  EXPECT_EQ(code_of([&] { load_mnist_idx(dir.file("img"), dir.file("lab")); }), Errc::format);

  bad = kImages;
  bad.push_back(0);  // trailing garbage
  put(dir.file("img"), bad);
  EXPECT_EQ(code_of([&] { load_mnist_idx(dir.file("img"), dir.file("lab")); }), Errc::format);

  put(dir.file("img"), std::vector<std::uint8_t>(kImages.begin(), kImages.begin() + 10));  // truncated header
  EXPECT_EQ(code_of([&] { load_mnist_idx(dir.file("img"), dir.file("lab")); }), Errc::format);

  put(dir.file("img"), kImages);
  auto lab = kLabels;
  lab[7] = 3;  // count disagrees with the image file
  lab.push_back(1);
  put(dir.file("lab3"), lab);
  EXPECT_EQ(code_of([&] { load_mnist_idx(dir.file("img"), dir.file("lab3")); }), Errc::format);

  lab = kLabels;
  lab[9] = 10;  // label outside 0..9
  put(dir.file("lab4"), lab);
  EXPECT_EQ(code_of([&] { load_mnist_idx(dir.file("img"), dir.file("lab4")); }), Errc::format);

  EXPECT_EQ(code_of([&] { load_mnist_idx(dir.file("missing"), dir.file("lab")); }), Errc::io);
}

namespace {

std::vector<std::uint8_t> cifar_record(std::uint8_t label, std::uint8_t seed) {
  std::vector<std::uint8_t> r(kCifarRecord);
  r[0] = label;
  for (std::size_t i = 1; i < r.size(); ++i) r[i] = static_cast<std::uint8_t>((i * 7 + seed) % 256);
  return r;
}

}  // namespace

TEST(Cifar, ParsesChannelPlanarRecords) {
  TempDir dir;
  auto bytes = cifar_record(4, 0);
  const auto second = cifar_record(9, 5);
  bytes.insert(bytes.end(), second.begin(), second.end());
  put(dir.file("b.bin"), bytes);
  const Dataset d = load_cifar10({dir.file("b.bin")});
  ASSERT_EQ(d.size(), 2u);
  EXPECT_EQ(d.labels, (std::vector<std::uint32_t>{4, 9}));
  EXPECT_EQ(d.sample_shape, (Shape{32, 32, 3}));
  // pixel (i, j) channel c of record 0 comes from byte 1 + c*1024 + i*32 + j
  const auto img = d.image(0);
  for (std::size_t i : {0u, 5u, 31u})
    for (std::size_t j : {0u, 17u, 31u})
      for (std::size_t c = 0; c < 3; ++c)
        EXPECT_EQ(img[(i * 32 + j) * 3 + c], bytes[1 + c * 1024 + i * 32 + j] / 255.0);
}

TEST(Cifar, RoundTripsBytesExactlyAcrossFiles) {
  TempDir dir;
  auto a = cifar_record(0, 1), b = cifar_record(1, 2), c = cifar_record(2, 3);
  std::vector<std::uint8_t> first = a;
  first.insert(first.end(), b.begin(), b.end());
  put(dir.file("x.bin"), first);
  put(dir.file("y.bin"), c);
  const Dataset d = load_cifar10({dir.file("x.bin"), dir.file("y.bin")});
  ASSERT_EQ(d.size(), 3u);
  write_cifar10(d, dir.file("out.bin"));
  first.insert(first.end(), c.begin(), c.end());
  EXPECT_EQ(get(dir.file("out.bin")), first);
}

TEST(Cifar, MalformedInputs) {
  TempDir dir;
  put(dir.file("short.bin"), std::vector<std::uint8_t>(3072, 0));  // one byte short of a record
  try {
    load_cifar10({dir.file("short.bin")});
    FAIL();
  } catch (const Error& e) {
    EXPECT_EQ(e.code(), Errc::format);
    EXPECT_NE(std::string(e.what()).find("3073"), std::string::npos);
  }
  put(dir.file("label.bin"), cifar_record(10, 0));
  EXPECT_EQ(code_of([&] { load_cifar10({dir.file("label.bin")}); }), Errc::format);
  put(dir.file("empty.bin"), {});
  EXPECT_EQ(code_of([&] { load_cifar10({dir.file("empty.bin")}); }), Errc::format);
  EXPECT_EQ(code_of([&] { load_cifar10({}); }), Errc::invalid_argument);
}

TEST(Synthetic, SeededAndLabelledByFixedRule) {
  const Dataset a = synthetic_dataset(50, Shape{6, 6, 2}, 4, 1);
  const Dataset b = synthetic_dataset(50, Shape{6, 6, 2}, 4, 1);
  const Dataset c = synthetic_dataset(50, Shape{6, 6, 2}, 4, 2);
  EXPECT_EQ(a.pixels, b.pixels);
  EXPECT_EQ(a.labels, b.labels);
  EXPECT_NE(a.pixels, c.pixels);
  for (double v : a.pixels) {
    EXPECT_GE(v, 0.0);
    EXPECT_LT(v, 1.0);
  }
  std::vector<int> seen(4, 0);
  for (auto y : a.labels) {
    ASSERT_LT(y, 4u);
    ++seen[y];
  }
  for (int s : seen) EXPECT_GT(s, 0);
  EXPECT_THROW(synthetic_dataset(0, Shape{2, 2, 1}, 2, 1), Error);
}

TEST(DatasetOps, OneHotHeadWithDims) {
  const auto oh = one_hot(std::vector<std::uint32_t>{2, 0}, 3);
  EXPECT_EQ(oh[0], (std::vector<double>{0, 0, 1}));
  EXPECT_EQ(oh[1], (std::vector<double>{1, 0, 0}));
  EXPECT_THROW(one_hot(std::vector<std::uint32_t>{3}, 3), Error);

  const Dataset d = synthetic_dataset(10, Shape{4, 4, 3}, 2, 1);
  const Dataset h = head(d, 4);
  EXPECT_EQ(h.size(), 4u);
  EXPECT_EQ(h.image(3)[7], d.image(3)[7]);
  EXPECT_THROW(head(d, 11), Error);

  const Dataset r = with_dims(d, 8, 2, 3);
  EXPECT_EQ(r.sample_shape, (Shape{8, 2, 3}));
  EXPECT_EQ(r.pixels, d.pixels);
  EXPECT_THROW(with_dims(d, 4, 4, 1), Error);
}

TEST(BundledMnist, LoadsWhenPresent) {
  const char* root = std::getenv("HFCNN_DATA_DIR");
  if (!root) GTEST_SKIP() << "HFCNN_DATA_DIR not set";
  const fs::path dir = fs::path(root) / "mnist";
  if (!fs::exists(dir / "train-images-idx3-ubyte.gz")) GTEST_SKIP() << "no bundled MNIST";
  const Dataset d = load_mnist_idx((dir / "train-images-idx3-ubyte.gz").string(),
                                   (dir / "train-labels-idx1-ubyte.gz").string());
  EXPECT_EQ(d.sample_shape, (Shape{28, 28, 1}));
  EXPECT_GE(d.size(), 2000u);
  std::vector<int> seen(10, 0);
  for (auto y : d.labels) ++seen[y];
  for (int s : seen) EXPECT_GT(s, 100);
}
