#include <doctest.h>

#include <filesystem>
#include <fstream>
#include <random>
#include <sstream>

#include "oracles.hpp"
#include "stegdet/common.hpp"
#include "stegdet/corpus.hpp"

using namespace stegdet;
namespace fs = std::filesystem;

namespace {

fs::path scratch_dir(const std::string& name) {
  const fs::path dir = fs::temp_directory_path() / ("stegdet_test_" + name);
  fs::remove_all(dir);
  fs::create_directories(dir);
  return dir;
}

void write_bytes(const fs::path& file, const std::string& header, const std::vector<unsigned char>& body) {
  std::ofstream os(file, std::ios::binary);
  os << header;
  os.write(reinterpret_cast<const char*>(body.data()), static_cast<std::streamsize>(body.size()));
}

std::string slurp(const fs::path& file) {
  std::ifstream is(file, std::ios::binary);
  std::ostringstream ss;
  ss << is.rdbuf();
  return ss.str();
}

}  // namespace

TEST_CASE("grayscale conversion") {
  CHECK(to_grayscale(0, 0, 0) == 0);
  CHECK(to_grayscale(255, 255, 255) == 255);
  CHECK(to_grayscale(0, 255, 0) == 150);
  CHECK(to_grayscale(255, 0, 0) == 76);
  for (int v = 0; v < 256; ++v) CHECK(to_grayscale(v, v, v) == v);
  for (int v = 0; v < 255; ++v) {
    CHECK(to_grayscale(v + 1, 30, 40) >= to_grayscale(v, 30, 40));
    CHECK(to_grayscale(30, v + 1, 40) >= to_grayscale(30, v, 40));
    CHECK(to_grayscale(30, 40, v + 1) >= to_grayscale(30, 40, v));
  }
}

TEST_CASE("PGM and PPM decoding") {
  const auto dir = scratch_dir("pnm");
  write_bytes(dir / "a.pgm", "P5\n2 2\n255\n", {0, 255, 10, 20});
  const auto a = load_image(dir / "a.pgm");
  REQUIRE(a.height() == 2);
  REQUIRE(a.width() == 2);
  CHECK(a(0, 0) == 0);
  CHECK(a(0, 1) == 255);
  CHECK(a(1, 0) == 10);
  CHECK(a(1, 1) == 20);

  write_bytes(dir / "white.ppm", "P6\n# comment line\n2 1\n255\n", {255, 255, 255, 255, 255, 255});
  const auto w = load_image(dir / "white.ppm");
  CHECK(w.width() == 2);
  CHECK(w(0, 0) == 255);
  CHECK(w(0, 1) == 255);

  write_bytes(dir / "red.ppm", "P6 1 2 255\n", {255, 0, 0, 255, 0, 0});
  const auto r = load_image(dir / "red.ppm");
  CHECK(r(0, 0) == 76);
  CHECK(r(1, 0) == 76);

  write_bytes(dir / "zero.pgm", "P5\n0 2\n255\n", {});
  CHECK_THROWS_AS(load_image(dir / "zero.pgm"), Error);
  write_bytes(dir / "bad.pgm", "P2\n1 1\n255\n", {1});
  CHECK_THROWS_AS(load_image(dir / "bad.pgm"), Error);
  write_bytes(dir / "short.pgm", "P5\n3 3\n255\n", {1, 2});
  CHECK_THROWS_AS(load_image(dir / "short.pgm"), Error);
  write_bytes(dir / "junk.pgm", "P5\nx 3\n255\n", {1});
  CHECK_THROWS_AS(load_image(dir / "junk.pgm"), Error);
  CHECK_THROWS_AS(load_image(dir / "missing.pgm"), Error);
}

TEST_CASE("save then load is bit exact") {
  const auto dir = scratch_dir("roundtrip");
  std::mt19937_64 eng(1);
  for (int trial = 0; trial < 10; ++trial) {
    const auto img = oracle::random_image(eng, 1 + trial, 3 + 2 * trial);
    save_image(img, dir / "x.pgm");
    CHECK(load_image(dir / "x.pgm") == img);
  }
}

TEST_CASE("from_real rounds half away from zero and clamps") {
  Eigen::MatrixXd v(1, 5);
  v << -3.0, 0.5, 1.49, 254.5, 300.0;
  const auto img = GrayImage::from_real(v);
  CHECK(img(0, 0) == 0);
  CHECK(img(0, 1) == 1);
  CHECK(img(0, 2) == 1);
  CHECK(img(0, 3) == 255);
  CHECK(img(0, 4) == 255);
  v(0, 0) = std::nan("");
  CHECK_THROWS_AS(GrayImage::from_real(v), Error);
}

TEST_CASE("split counts") {
  const auto c = split_counts(800);
  CHECK(c[0] == 500);
  CHECK(c[1] == 100);
  CHECK(c[2] == 200);
  for (std::size_t n : {8, 13, 41, 99}) {
    const auto s = split_counts(n);
    CHECK(s[0] + s[1] + s[2] == n);
    CHECK(std::abs(static_cast<double>(s[0]) - 0.625 * n) <= 1.0);
    CHECK(std::abs(static_cast<double>(s[1]) - 0.125 * n) <= 1.0);
  }
}

TEST_CASE("synthetic corpus is deterministic and valid") {
  const auto a = scratch_dir("corpus_a");
  const auto b = scratch_dir("corpus_b");
  CorpusParams params;
  params.n_images = 8;
  params.size = 64;
  params.n_classes = 2;
  params.seed = 1;
  const auto ma = gen_synthetic_corpus(params, a, 1);
  const auto mb = gen_synthetic_corpus(params, b, 3);
  REQUIRE(ma.entries.size() == 8);
  CHECK(slurp(a / "manifest.json") == slurp(b / "manifest.json"));
  for (const auto& e : ma.entries) {
    CHECK(slurp(a / e.path) == slurp(b / e.path));
    const auto img = load_image(a / e.path);
    CHECK(img.height() == 64);
    CHECK(img.width() == 64);
  }
  // Different images across the corpus, and across seeds.
  CHECK(slurp(a / ma.entries[0].path) != slurp(a / ma.entries[1].path));
  params.seed = 2;
  CHECK(!(synthesize_image(params, 0, 0) == load_image(a / ma.entries[0].path)));

  const auto loaded = load_manifest(a / "manifest.json");
  CHECK(loaded.seed == 1);
  CHECK(loaded.entries.size() == 8);
  CHECK(loaded.n_classes() == 2);
  CHECK_NOTHROW(validate_manifest(loaded));

  params.size = 32;
  CHECK_THROWS_AS(gen_synthetic_corpus(params, a), Error);
  params.size = 64;
  params.n_classes = 1;
  CHECK_THROWS_AS(gen_synthetic_corpus(params, a), Error);
}

TEST_CASE("full-size manifest roles") {
  const auto dir = scratch_dir("corpus_roles");
  CorpusParams params;
  params.n_images = 800;
  params.size = 64;
  params.seed = 7;
  const auto m = gen_synthetic_corpus(params, dir, 2);
  CHECK(m.indices(Role::train).size() == 500);
  CHECK(m.indices(Role::val).size() == 100);
  CHECK(m.indices(Role::test).size() == 200);
  fs::remove_all(dir);
}

TEST_CASE("manifest validation rejects duplicates") {
  DatasetManifest m;
  m.entries = {{"a.pgm", 0, Role::train}, {"a.pgm", 1, Role::test}};
  CHECK_THROWS_AS(validate_manifest(m), Error);
  CHECK_THROWS_AS(role_from_string("holdout"), Error);
  CHECK(role_from_string(to_string(Role::val)) == Role::val);
}

TEST_CASE("seed mixing and parallel_for") {
  CHECK(mix_seed(1, 0) != mix_seed(1, 1));
  CHECK(mix_seed(1, 0) != mix_seed(2, 0));
  std::vector<int> out(100, 0);
  parallel_for(out.size(), 4, [&](std::size_t i) { out[i] = static_cast<int>(i * i); });
  for (std::size_t i = 0; i < out.size(); ++i) CHECK(out[i] == static_cast<int>(i * i));
  CHECK_THROWS_AS(parallel_for(10, 3,
                               [](std::size_t i) {
                                 if (i == 5) throw Error("boom");
                               }),
                  Error);
}
