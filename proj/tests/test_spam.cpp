#include <doctest.h>

#include <random>

#include "oracles.hpp"
#include "stegdet/spam.hpp"

using namespace stegdet;

namespace {

SpamConfig cfg_of(int T, MarkovOrder order) {
  SpamConfig cfg;
  cfg.T = T;
  cfg.order = order;
  return cfg;
}

double max_abs_diff(const Eigen::VectorXd& a, const Eigen::VectorXd& b) {
  REQUIRE(a.size() == b.size());
  return (a - b).cwiseAbs().maxCoeff();
}

}  // namespace

TEST_CASE("spam dimensions and descriptors") {
  SpamConfig cfg;
  CHECK(cfg.dimension() == 686);
  CHECK(cfg_of(3, MarkovOrder::first).dimension() == 98);
  CHECK(cfg.descriptor(false) == "spam-o2-T3");
  CHECK(cfg.descriptor(true) == "espam-o2-T3");
  std::mt19937_64 eng(3);
  const auto img = oracle::random_image(eng, 16, 20);
  CHECK(spam_features(img).values.size() == 686);
  CHECK(espam_features(img, ProbMap::Constant(16, 20, 0.5)).values.size() == 686);
}

TEST_CASE("diff_array shapes and values") {
  GrayImage x(3, 4);
  for (int i = 0; i < 3; ++i)
    for (int j = 0; j < 4; ++j) x(i, j) = static_cast<std::uint8_t>(10 * i + j * j);
  const auto right = diff_array(x, Direction::right);
  CHECK(right.rows() == 3);
  CHECK(right.cols() == 3);
  CHECK(right(1, 2) == x(1, 2) - x(1, 3));
  const auto left = diff_array(x, Direction::left);
  CHECK(left(0, 0) == x(0, 1) - x(0, 0));
  const auto up_right = diff_array(x, Direction::up_right);
  CHECK(up_right.rows() == 2);
  CHECK(up_right.cols() == 3);
  CHECK(up_right(0, 0) == x(1, 0) - x(0, 1));
}

TEST_CASE("transition rows are conditional distributions") {
  std::mt19937_64 eng(11);
  const auto img = oracle::smooth_random_image(eng, 24, 24);
  const SpamConfig cfg;
  const int K = 2 * cfg.T + 1;
  for (Direction d : kAllDirections) {
    const auto m = transition_matrix(img, d, cfg);
    for (int ctx = 0; ctx < K * K; ++ctx) {
      const double s = m.segment(ctx * K, K).sum();
      CHECK((s == doctest::Approx(1.0).epsilon(1e-12) || s == 0.0));
    }
  }
}

TEST_CASE("spam matches the line-walking oracle") {
  std::mt19937_64 eng(7);
  for (int trial = 0; trial < 20; ++trial) {
    const int rows = 5 + trial % 6, cols = 4 + (trial * 3) % 7;
    const auto img = trial % 2 ? oracle::random_image(eng, rows, cols, 100, 103)
                               : oracle::smooth_random_image(eng, rows, cols);
    const auto p = oracle::random_probmap(eng, rows, cols);
    for (int T : {1, 2, 3}) {
      for (auto order : {MarkovOrder::first, MarkovOrder::second}) {
        const auto cfg = cfg_of(T, order);
        const int o = order == MarkovOrder::first ? 1 : 2;
        CHECK(max_abs_diff(spam_features(img, cfg).values, oracle::spam(img, T, o, nullptr)) <=
              1e-12);
        CHECK(max_abs_diff(espam_features(img, p, cfg).values, oracle::spam(img, T, o, &p)) <=
              1e-12);
      }
    }
  }
}

TEST_CASE("espam with unit weights reduces to spam") {
  std::mt19937_64 eng(5);
  const auto img = oracle::smooth_random_image(eng, 32, 32);
  const auto a = spam_features(img).values;
  const auto b = espam_features(img, ProbMap::Ones(32, 32)).values;
  CHECK(max_abs_diff(a, b) <= 1e-12);
}

TEST_CASE("constant image concentrates on the zero transition") {
  GrayImage x(8, 8);
  x.pixels.setConstant(77);
  const SpamConfig cfg = cfg_of(1, MarkovOrder::first);
  const auto f = spam_features(x, cfg).values;
  // x = y = 0 at index (0+1) + 3 (0+1) = 4 in both halves.
  CHECK(f(4) == doctest::Approx(1.0));
  CHECK(f(9 + 4) == doctest::Approx(1.0));
  CHECK(f.sum() == doctest::Approx(2.0));
}

TEST_CASE("spam rejects bad inputs") {
  GrayImage x(8, 8);
  CHECK_THROWS_AS(espam_features(x, ProbMap::Ones(7, 8)), Error);
  CHECK_THROWS_AS(spam_features(x, cfg_of(0, MarkovOrder::second)), Error);
}

TEST_CASE("diff_array on a short row") {
  GrayImage x(2, 3);
  x(0, 0) = 10, x(0, 1) = 12, x(0, 2) = 9;
  const auto a = diff_array(x, Direction::right);
  CHECK(a(0, 0) == -2);
  CHECK(a(0, 1) == 3);
  GrayImage flat(4, 4);
  flat.pixels.setConstant(200);
  for (Direction d : kAllDirections) CHECK(diff_array(flat, d).cwiseAbs().maxCoeff() == 0);
  CHECK_THROWS_AS(diff_array(GrayImage(1, 5), Direction::right), Error);
}

TEST_CASE("averaged spam halves are invariant under transposition") {
  std::mt19937_64 eng(13);
  for (int trial = 0; trial < 5; ++trial) {
    const auto img = oracle::smooth_random_image(eng, 17, 23);
    const GrayImage t(PixelMatrix(img.pixels.transpose()));
    CHECK(max_abs_diff(spam_features(img).values, spam_features(t).values) <= 1e-12);
  }
}

TEST_CASE("espam is invariant to scaling the probability map") {
  std::mt19937_64 eng(17);
  const auto img = oracle::smooth_random_image(eng, 20, 20);
  const auto p = oracle::random_probmap(eng, 20, 20);
  const auto a = espam_features(img, p).values;
  const auto b = espam_features(img, ProbMap(p * 0.37)).values;
  CHECK(max_abs_diff(a, b) <= 1e-12);
  const auto half = espam_features(img, ProbMap::Constant(20, 20, 0.5)).values;
  CHECK(max_abs_diff(half, spam_features(img).values) <= 1e-12);
}
