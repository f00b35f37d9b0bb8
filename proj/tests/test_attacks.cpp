#include <doctest.h>

#include "fixtures.hpp"
#include "stegdet/attacks.hpp"

using namespace stegdet;

namespace {

double accuracy(const VictimModel& model, const fixture::ToySet& s) {
  int ok = 0;
  for (std::size_t i = 0; i < s.images.size(); ++i) ok += predict_class(model, s.images[i]) == s.labels[i];
  return static_cast<double>(ok) / static_cast<double>(s.images.size());
}

}  // namespace

TEST_CASE("toy victims are accurate") {
  CHECK(accuracy(fixture::toy_victim(2).model, fixture::toy_victim(2).test) >= 0.9);
  CHECK(accuracy(fixture::toy_victim(4).model, fixture::toy_victim(4).test) >= 0.9);
}

TEST_CASE("config validation") {
  AttackConfig cfg;
  CHECK_NOTHROW(cfg.validate());
  cfg.c_grid = {1.0, 0.1};
  CHECK_THROWS_AS(cfg.validate(), Error);
  cfg.c_grid = {};
  CHECK_THROWS_AS(cfg.validate(), Error);
  cfg = {};
  cfg.alpha = 0.0;
  CHECK_THROWS_AS(cfg.validate(), Error);
  cfg = {};
  cfg.epsilon = -1.0;
  CHECK_THROWS_AS(cfg.validate(), Error);
  CHECK(attack_from_string("igsm") == AttackKind::igsm);
  CHECK_THROWS_AS(attack_from_string("jsma"), Error);
  CHECK(attack_tag(AttackKind::fgsm, AttackConfig{}) == "fgsm-eps8");
}

TEST_CASE("fgsm step size and zero epsilon") {
  const auto& toy = fixture::toy_victim(2);
  const auto& x = toy.test.images[0];
  AttackConfig cfg;
  cfg.epsilon = 0.0;
  CHECK(fgsm(toy.model, x, toy.test.labels[0], cfg).adversarial == x);

  cfg.epsilon = 8.0;
  const auto r = fgsm(toy.model, x, toy.test.labels[0], cfg);
  const auto g = loss_and_input_grad(toy.model, x, toy.test.labels[0]).grad;
  for (Eigen::Index i = 0; i < x.height(); ++i) {
    for (Eigen::Index j = 0; j < x.width(); ++j) {
      const int d = static_cast<int>(r.adversarial(i, j)) - static_cast<int>(x(i, j));
      const int s = (g(i, j) > 0) - (g(i, j) < 0);
      const int expect = std::clamp(static_cast<int>(x(i, j)) + 8 * s, 0, 255) - x(i, j);
      CHECK(d == expect);
    }
  }
  CHECK(r.linf <= 8.0);
}

TEST_CASE("targeted fgsm descends the target loss") {
  const auto& toy = fixture::toy_victim(4);
  const auto& x = toy.test.images[1];
  AttackConfig cfg;
  cfg.epsilon = 2.0;
  cfg.target = (toy.test.labels[1] + 1) % 4;
  const auto r = fgsm(toy.model, x, toy.test.labels[1], cfg);
  CHECK(loss_and_input_grad(toy.model, r.adversarial, *cfg.target).loss <
        loss_and_input_grad(toy.model, x, *cfg.target).loss);
}

TEST_CASE("igsm with one full step equals fgsm bitwise") {
  for (int n : {2, 4}) {
    const auto& toy = fixture::toy_victim(n);
    for (std::size_t k = 0; k < 10; ++k) {
      for (double eps : {2.0, 4.0, 8.0}) {
        AttackConfig cfg;
        cfg.epsilon = eps;
        cfg.alpha = eps;
        cfg.max_iters = 1;
        const auto a = fgsm(toy.model, toy.test.images[k], toy.test.labels[k], cfg);
        const auto b = igsm(toy.model, toy.test.images[k], toy.test.labels[k], cfg);
        CHECK(a.adversarial == b.adversarial);
        CHECK(a.success == b.success);
      }
    }
  }
}

TEST_CASE("gradient attacks stay in the epsilon box") {
  const auto& toy = fixture::toy_victim(4);
  for (std::size_t k = 0; k < toy.test.images.size(); ++k) {
    for (double eps : {1.0, 3.0, 6.5}) {
      AttackConfig cfg;
      cfg.epsilon = eps;
      cfg.alpha = 1.0;
      cfg.max_iters = 10;
      for (auto kind : {AttackKind::fgsm, AttackKind::igsm}) {
        const auto r = run_attack(kind, toy.model, toy.test.images[k], toy.test.labels[k], cfg);
        CHECK(r.linf <= eps);
        CHECK(distortion(toy.test.images[k], r.adversarial).first == r.linf);
      }
    }
  }
}

TEST_CASE("igsm is at least as strong as fgsm") {
  const auto& toy = fixture::toy_victim(2);
  int f = 0, i = 0;
  AttackConfig cfg;
  cfg.epsilon = 4.0;
  for (std::size_t k = 0; k < toy.test.images.size(); ++k) {
    f += fgsm(toy.model, toy.test.images[k], toy.test.labels[k], cfg).success;
    i += igsm(toy.model, toy.test.images[k], toy.test.labels[k], cfg).success;
  }
  CHECK(i >= f);
}

TEST_CASE("deepfool finds small perturbations") {
  const auto& toy = fixture::toy_victim(4);
  AttackConfig cfg;
  cfg.max_iters = 50;
  int success = 0, tried = 0;
  for (std::size_t k = 0; k < toy.test.images.size(); ++k) {
    const auto& x = toy.test.images[k];
    if (predict_class(toy.model, x) != toy.test.labels[k]) {
      const auto r = deepfool(toy.model, x, toy.test.labels[k], cfg);
      CHECK(r.adversarial == x);
      CHECK(r.iterations == 0);
      continue;
    }
    ++tried;
    const auto r = deepfool(toy.model, x, toy.test.labels[k], cfg);
    success += r.success;
    if (r.success) CHECK(predict_class(toy.model, r.adversarial) != toy.test.labels[k]);
    const auto again = deepfool(toy.model, x, toy.test.labels[k], cfg);
    CHECK(again.adversarial == r.adversarial);
  }
  CHECK(success >= 0.9 * tried);
  cfg.target = 1;
  CHECK_THROWS_AS(deepfool(toy.model, toy.test.images[0], toy.test.labels[0], cfg), Error);
}

TEST_CASE("cw margin") {
  Eigen::VectorXd z(3);
  z << 2.0, 5.0, 1.0;
  CHECK(cw_margin(z, 1, std::nullopt, 0.0) == 3.0);
  CHECK(cw_margin(z, 0, std::nullopt, 0.0) == 0.0);
  CHECK(cw_margin(z, 0, std::nullopt, 5.0) == -3.0);
  CHECK(cw_margin(z, 0, std::nullopt, 1.0) == -1.0);
  CHECK(cw_margin(z, 1, 2, 0.0) == 4.0);
  CHECK(cw_margin(z, 2, 1, 0.0) == 0.0);
  CHECK(cw_margin(z, 2, 1, 10.0) == -3.0);
}

TEST_CASE("cw success holds on the rounded image") {
  const auto& toy = fixture::toy_victim(4);
  AttackConfig cfg;
  cfg.cw_steps = 100;
  int success = 0;
  for (std::size_t k = 0; k < 12; ++k) {
    const auto& x = toy.test.images[k];
    const int label = toy.test.labels[k];
    for (std::optional<int> target : {std::optional<int>{}, std::optional<int>{(label + 2) % 4}}) {
      cfg.target = target;
      const auto r = cw_l2(toy.model, x, label, cfg);
      if (r.success) {
        ++success;
        CHECK(cw_margin(logits(toy.model, r.adversarial), label, target, cfg.kappa) <= 0.0);
      }
    }
  }
  CHECK(success >= 20);
}

TEST_CASE("cw leaves an already misclassified image alone") {
  const auto& toy = fixture::toy_victim(2);
  const auto& x = toy.test.images[0];
  const int wrong = 1 - predict_class(toy.model, x);
  const auto r = cw_l2(toy.model, x, wrong, AttackConfig{});
  CHECK(r.adversarial == x);
  CHECK(r.l2 == 0.0);
  CHECK(r.success);
}
