#include <doctest.h>

#include <filesystem>
#include <set>

#include "fixtures.hpp"
#include "stegdet/mpm.hpp"

using namespace stegdet;

namespace {

// Min-max normalization written out per element.
Eigen::MatrixXd normalize_oracle(const Eigen::MatrixXd& m) {
  double lo = m(0, 0), hi = m(0, 0);
  for (Eigen::Index i = 0; i < m.size(); ++i) {
    lo = std::min(lo, m(i));
    hi = std::max(hi, m(i));
  }
  Eigen::MatrixXd out(m.rows(), m.cols());
  for (Eigen::Index i = 0; i < m.size(); ++i) {
    double v = hi == lo ? 0.5 : (m(i) - lo) / (hi - lo);
    if (v < 1.0 / 255.0) v = 1.0 / 255.0;
    if (v > 1.0) v = 1.0;
    out(i) = v;
  }
  return out;
}

}  // namespace

TEST_CASE("f_nor examples") {
  Eigen::MatrixXd m(2, 2);
  m << 0, 1, 2, 4;
  const auto f = f_nor(m);
  CHECK(f(0, 0) == kMpmFloor);
  CHECK(f(0, 1) == 0.25);
  CHECK(f(1, 0) == 0.5);
  CHECK(f(1, 1) == 1.0);
  CHECK(f_nor(Eigen::MatrixXd::Constant(3, 3, 7.0)).isConstant(0.5));
  m(0, 0) = std::numeric_limits<double>::infinity();
  CHECK_THROWS_AS(f_nor(m), Error);
  m(0, 0) = -1.0;
  CHECK_THROWS_AS(f_nor(m), Error);
}

TEST_CASE("target sampling") {
  const auto t = sample_target_classes(10, 3, 5, 42);
  CHECK(t.size() == 5);
  CHECK(std::set<int>(t.begin(), t.end()).size() == 5);
  for (int c : t) {
    CHECK(c != 3);
    CHECK(c >= 0);
    CHECK(c < 10);
  }
  CHECK(sample_target_classes(10, 3, 5, 42) == t);
  CHECK(sample_target_classes(4, 0, 3, 1).size() == 3);
  CHECK_THROWS_AS(sample_target_classes(4, 0, 4, 1), Error);
  CHECK_THROWS_AS(sample_target_classes(4, 0, 0, 1), Error);
}

TEST_CASE("mpm_gradient matches the averaged normalized gradient maps") {
  const auto& toy = fixture::toy_victim(4);
  const auto& x = toy.test.images[3];
  for (int L : {1, 2, 3}) {
    MpmConfig cfg;
    cfg.L = L;
    cfg.seed = 5;
    const auto p = mpm_gradient(toy.model, x, cfg);
    const auto targets = sample_target_classes(4, predict_class(toy.model, x), L, 5);
    Eigen::MatrixXd sum = Eigen::MatrixXd::Zero(16, 16);
    for (int t : targets) {
      const auto g = loss_and_input_grad(toy.model, x, t).grad;
      Eigen::MatrixXd a(16, 16);
      for (Eigen::Index i = 0; i < g.size(); ++i) a(i) = std::abs(g(i));
      sum += normalize_oracle(a);
    }
    CHECK((p - sum / L).cwiseAbs().maxCoeff() <= 1e-12);
    CHECK_NOTHROW(validate_probmap(p, 16, 16));
  }
  MpmConfig too_many;
  too_many.L = 4;
  CHECK_THROWS_AS(mpm_gradient(toy.model, x, too_many), Error);
}

TEST_CASE("mpm_difference with synthetic attacks") {
  const auto& toy = fixture::toy_victim(4);
  const auto& x = toy.test.images[0];
  MpmConfig cfg;
  cfg.L = 3;
  TargetedAttack identity = [](const GrayImage& img, int) {
    AttackResult r;
    r.adversarial = img;
    r.success = true;
    return r;
  };
  CHECK(mpm_difference(toy.model, x, cfg, identity).isConstant(0.5));

  cfg.L = 1;
  TargetedAttack spike = [](const GrayImage& img, int) {
    AttackResult r;
    r.adversarial = img;
    r.adversarial(2, 5) = static_cast<std::uint8_t>(img(2, 5) > 128 ? img(2, 5) - 3 : img(2, 5) + 3);
    r.success = true;
    return r;
  };
  const auto p = mpm_difference(toy.model, x, cfg, spike);
  CHECK(p(2, 5) == 1.0);
  CHECK(p(0, 0) == kMpmFloor);

  cfg.L = 3;
  TargetedAttack failing = [](const GrayImage& img, int) {
    AttackResult r;
    r.adversarial = img;
    r.success = false;
    return r;
  };
  CHECK_THROWS_AS(mpm_difference(toy.model, x, cfg, failing), Error);
}

TEST_CASE("mpm_difference with targeted cw matches recomputation and is jobs invariant") {
  const auto& toy = fixture::toy_victim(4);
  const auto& x = toy.test.images[2];
  const int label = toy.test.labels[2];
  MpmConfig cfg;
  cfg.L = 3;
  cfg.seed = 9;
  AttackConfig acfg;
  acfg.cw_steps = 60;
  TargetedAttack cw = [&](const GrayImage& img, int target) {
    AttackConfig c = acfg;
    c.target = target;
    return cw_l2(toy.model, img, label, c);
  };
  const auto p1 = mpm_difference(toy.model, x, cfg, cw, 1);
  const auto p3 = mpm_difference(toy.model, x, cfg, cw, 3);
  CHECK(p1 == p3);
  Eigen::MatrixXd sum = Eigen::MatrixXd::Zero(16, 16);
  for (int t : sample_target_classes(4, predict_class(toy.model, x), 3, 9)) {
    const Eigen::MatrixXd d = (cw(x, t).adversarial.as_real() - x.as_real()).cwiseAbs();
    sum += normalize_oracle(d);
  }
  CHECK(p1 == sum / 3.0);
}

TEST_CASE("mpm_untargeted_diff") {
  GrayImage x(3, 3);
  x.pixels.setConstant(100);
  CHECK(mpm_untargeted_diff(x, x).isConstant(0.5));
  GrayImage y = x;
  y(1, 1) = 103;
  const auto p = mpm_untargeted_diff(x, y);
  CHECK(p(1, 1) == 1.0);
  CHECK(p(0, 0) == kMpmFloor);
  y(1, 1) = 102;
  y(0, 1) = 99;
  const auto q = mpm_untargeted_diff(x, y);
  CHECK(q(0, 1) == 0.5);
  CHECK(q(2, 2) == kMpmFloor);
  CHECK_THROWS_AS(mpm_untargeted_diff(x, GrayImage(3, 4)), Error);
}

TEST_CASE("probability map file round trip and visualization") {
  Eigen::MatrixXd p(2, 3);
  p << kMpmFloor, 0.5, 1.0, 0.25, 0.75, 0.125;
  const auto file = std::filesystem::temp_directory_path() / "stegdet_pm.pf1";
  save_probmap(p, file);
  CHECK(load_probmap(file) == p);
  const auto v = probmap_visualization(p);
  CHECK(v.height() == 2);
  CHECK(v.width() == 3);
  CHECK(v(0, 2) == 255);
  CHECK(v(0, 1) == 128);
  CHECK_THROWS_AS(validate_probmap(p, 3, 2), Error);
  p(0, 0) = 0.0;
  CHECK_THROWS_AS(validate_probmap(p, 2, 3), Error);
}
