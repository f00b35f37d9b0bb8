#include "stegdet/attacks.hpp"

#include <cmath>
#include <limits>
#include <sstream>

#include "stegdet/common.hpp"

namespace stegdet {

namespace {

bool reached(const VictimModel& model, const GrayImage& img, int label,
             std::optional<int> target) {
  const int pred = predict_class(model, img);
  return target ? pred == *target : pred != label;
}

// Rounds an iterate and keeps it within the integer epsilon box around x.
GrayImage round_into_box(const GrayImage& x, const Eigen::MatrixXd& iterate, double epsilon) {
  const double radius = std::floor(epsilon + 1e-9);
  GrayImage out(x.height(), x.width());
  for (Eigen::Index i = 0; i < x.height(); ++i) {
    for (Eigen::Index j = 0; j < x.width(); ++j) {
      const double lo = std::max(0.0, x(i, j) - radius);
      const double hi = std::min(255.0, x(i, j) + radius);
      out(i, j) = static_cast<std::uint8_t>(std::clamp(std::round(iterate(i, j)), lo, hi));
    }
  }
  return out;
}

Eigen::MatrixXd sign(const Eigen::MatrixXd& g) {
  return g.unaryExpr([](double v) { return static_cast<double>((v > 0.0) - (v < 0.0)); });
}

AttackResult finish(const VictimModel& model, const GrayImage& x, GrayImage adv, int label,
                    std::optional<int> target, int iterations) {
  AttackResult r;
  r.success = reached(model, adv, label, target);
  std::tie(r.linf, r.l2) = distortion(x, adv);
  r.adversarial = std::move(adv);
  r.iterations = iterations;
  return r;
}

void check_label(const VictimModel& model, const GrayImage& x, int label) {
  if (x.height() != model.side || x.width() != model.side) {
    throw Error("image size does not match the victim model");
  }
  if (label < 0 || label >= model.n_classes) throw Error("label out of range");
}

}  // namespace

std::string to_string(AttackKind k) {
  switch (k) {
    case AttackKind::fgsm: return "fgsm";
    case AttackKind::igsm: return "igsm";
    case AttackKind::deepfool: return "deepfool";
    case AttackKind::cw: return "cw";
  }
  return "?";
}

AttackKind attack_from_string(const std::string& s) {
  if (s == "fgsm") return AttackKind::fgsm;
  if (s == "igsm") return AttackKind::igsm;
  if (s == "deepfool") return AttackKind::deepfool;
  if (s == "cw") return AttackKind::cw;
  throw Error("unknown attack '" + s + "'");
}

void AttackConfig::validate() const {
  if (!(epsilon >= 0.0)) throw Error("epsilon must be non-negative");
  if (!(alpha > 0.0)) throw Error("alpha must be positive");
  if (max_iters < 1) throw Error("max_iters must be at least 1");
  if (c_grid.empty()) throw Error("c grid is empty");
  for (std::size_t i = 0; i < c_grid.size(); ++i) {
    if (!(c_grid[i] > 0.0)) throw Error("c grid values must be positive");
    if (i > 0 && !(c_grid[i] > c_grid[i - 1])) throw Error("c grid must be ascending");
  }
}

std::pair<double, double> distortion(const GrayImage& a, const GrayImage& b) {
  if (a.height() != b.height() || a.width() != b.width()) throw Error("distortion: size mismatch");
  const Eigen::MatrixXd d = b.as_real() - a.as_real();
  return {d.size() ? d.cwiseAbs().maxCoeff() : 0.0, d.norm()};
}

AttackResult fgsm(const VictimModel& model, const GrayImage& x, int label,
                  const AttackConfig& cfg) {
  cfg.validate();
  check_label(model, x, label);
  const Eigen::MatrixXd xr = x.as_real();
  const int y = cfg.target.value_or(label);
  const double direction = cfg.target ? -1.0 : 1.0;
  const Eigen::MatrixXd g = loss_and_input_grad(model, xr, y).grad;
  const Eigen::MatrixXd iterate = xr + direction * cfg.epsilon * sign(g);
  return finish(model, x, round_into_box(x, iterate, cfg.epsilon), label, cfg.target, 1);
}

AttackResult igsm(const VictimModel& model, const GrayImage& x, int label,
                  const AttackConfig& cfg) {
  cfg.validate();
  check_label(model, x, label);
  const Eigen::MatrixXd xr = x.as_real();
  const Eigen::MatrixXd lo = (xr.array() - cfg.epsilon).cwiseMax(0.0);
  const Eigen::MatrixXd hi = (xr.array() + cfg.epsilon).cwiseMin(255.0);
  const int y = cfg.target.value_or(label);
  const double direction = cfg.target ? -1.0 : 1.0;

  Eigen::MatrixXd iterate = xr;
  GrayImage adv = x;
  int it = 0;
  while (it < cfg.max_iters) {
    ++it;
    const Eigen::MatrixXd g = loss_and_input_grad(model, iterate, y).grad;
    iterate = (iterate + direction * cfg.alpha * sign(g)).cwiseMax(lo).cwiseMin(hi);
    adv = round_into_box(x, iterate, cfg.epsilon);
    if (reached(model, adv, label, cfg.target)) break;
  }
  return finish(model, x, std::move(adv), label, cfg.target, it);
}

AttackResult deepfool(const VictimModel& model, const GrayImage& x, int label,
                      const AttackConfig& cfg) {
  cfg.validate();
  check_label(model, x, label);
  if (cfg.target) throw Error("deepfool only supports untargeted mode");
  if (predict_class(model, x) != label) return finish(model, x, x, label, std::nullopt, 0);

  const Eigen::MatrixXd x0 = x.as_real();
  const int n = model.n_classes;
  Eigen::MatrixXd r_total = Eigen::MatrixXd::Zero(x0.rows(), x0.cols());
  GrayImage candidate = x;
  int it = 0;
  while (it < cfg.max_iters) {
    ++it;
    const Eigen::MatrixXd point = x0 + (1.0 + cfg.overshoot) * r_total;
    std::vector<Eigen::MatrixXd> grads;
    Eigen::VectorXd z;
    for (int k = 0; k < n; ++k) {
      auto lg = logit_input_grad(model, point, Eigen::VectorXd::Unit(n, k));
      z = std::move(lg.logits);
      grads.push_back(std::move(lg.grad));
    }
    double best = std::numeric_limits<double>::infinity();
    Eigen::MatrixXd best_w;
    for (int k = 0; k < n; ++k) {
      if (k == label) continue;
      Eigen::MatrixXd w = grads[static_cast<std::size_t>(k)] - grads[static_cast<std::size_t>(label)];
      const double wn = w.norm();
      if (wn == 0.0) continue;
      const double dist = std::abs(z(k) - z(label)) / wn;
      if (dist < best) {
        best = dist;
        best_w = std::move(w) / wn;
      }
    }
    if (!std::isfinite(best)) break;  // flat logits, no direction to follow
    r_total += (best + 1e-4) * best_w;
    candidate = GrayImage::from_real(x0 + (1.0 + cfg.overshoot) * r_total);
    if (predict_class(model, candidate) != label) break;
  }
  return finish(model, x, std::move(candidate), label, std::nullopt, it);
}

double cw_margin(const Eigen::VectorXd& z, int label, std::optional<int> target, double kappa) {
  const int anchor = target.value_or(label);
  double other = -std::numeric_limits<double>::infinity();
  for (Eigen::Index i = 0; i < z.size(); ++i) {
    if (i != anchor) other = std::max(other, z(i));
  }
  const double diff = target ? other - z(anchor) : z(anchor) - other;
  return std::max(diff, -kappa);
}

AttackResult cw_l2(const VictimModel& model, const GrayImage& x, int label,
                   const AttackConfig& cfg) {
  cfg.validate();
  check_label(model, x, label);
  if (reached(model, x, label, cfg.target)) return finish(model, x, x, label, cfg.target, 0);

  const int n = model.n_classes;
  const int anchor = cfg.target.value_or(label);
  const Eigen::ArrayXXd x0 = x.as_real().array() / 255.0;
  // tanh space; pixels = 127.5 (tanh(w) + 1). The 0.999999 keeps saturated
  // pixels at finite w.
  const Eigen::ArrayXXd w0 = ((2.0 * x0 - 1.0) * 0.999999).atanh();

  GrayImage last = x;
  int total_iters = 0;
  for (const double c : cfg.c_grid) {
    Eigen::ArrayXXd w = w0;
    std::optional<GrayImage> best;
    double best_l2 = std::numeric_limits<double>::infinity();
    for (int step = 0; step <= cfg.cw_steps; ++step) {
      const Eigen::ArrayXXd t = w.tanh();
      const Eigen::ArrayXXd xs = (t + 1.0) * 0.5;
      const Eigen::MatrixXd pixels = (xs * 255.0).matrix();
      const Eigen::ArrayXXd delta = xs - x0;
      const double norm = std::sqrt(delta.square().sum());

      // Which logit competes with the anchor at this point.
      const Eigen::VectorXd z = logits(model, pixels);
      Eigen::Index other = -1;
      for (Eigen::Index i = 0; i < n; ++i) {
        if (i != anchor && (other < 0 || z(i) > z(other))) other = i;
      }
      const double diff = cfg.target ? z(other) - z(anchor) : z(anchor) - z(other);

      if (diff < 0.0) {
        GrayImage rounded = GrayImage::from_real(pixels);
        if (reached(model, rounded, label, cfg.target) &&
            cw_margin(logits(model, rounded), label, cfg.target, cfg.kappa) <= 0.0) {
          const double l2 = distortion(x, rounded).second;
          if (l2 < best_l2) {
            best_l2 = l2;
            best = std::move(rounded);
          }
        }
      }
      if (step == cfg.cw_steps) break;
      ++total_iters;

      Eigen::ArrayXXd grad = Eigen::ArrayXXd::Zero(w.rows(), w.cols());
      if (norm > 0.0) grad += delta / norm;
      if (diff > -cfg.kappa) {
        Eigen::VectorXd coeffs = Eigen::VectorXd::Zero(n);
        const double s = cfg.target ? -1.0 : 1.0;
        coeffs(anchor) = s;
        coeffs(other) = -s;
        grad += c * 255.0 * logit_input_grad(model, pixels, coeffs).grad.array();
      }
      w -= cfg.cw_learning_rate * grad * (1.0 - t.square()) * 0.5;
    }
    if (best) return finish(model, x, std::move(*best), label, cfg.target, total_iters);
    last = GrayImage::from_real(((w.tanh() + 1.0) * 127.5).matrix());
  }
  AttackResult r = finish(model, x, std::move(last), label, cfg.target, total_iters);
  r.success = false;
  return r;
}

AttackResult run_attack(AttackKind kind, const VictimModel& model, const GrayImage& x, int label,
                        const AttackConfig& cfg) {
  switch (kind) {
    case AttackKind::fgsm: return fgsm(model, x, label, cfg);
    case AttackKind::igsm: return igsm(model, x, label, cfg);
    case AttackKind::deepfool: return deepfool(model, x, label, cfg);
    case AttackKind::cw: return cw_l2(model, x, label, cfg);
  }
  throw Error("unknown attack kind");
}

std::string attack_tag(AttackKind kind, const AttackConfig& cfg) {
  std::ostringstream os;
  os << to_string(kind);
  switch (kind) {
    case AttackKind::fgsm: os << "-eps" << cfg.epsilon; break;
    case AttackKind::igsm:
      os << "-eps" << cfg.epsilon << "-a" << cfg.alpha << "-it" << cfg.max_iters;
      break;
    case AttackKind::deepfool: os << "-it" << cfg.max_iters; break;
    case AttackKind::cw:
      os << "-k" << cfg.kappa << "-c";
      for (std::size_t i = 0; i < cfg.c_grid.size(); ++i) os << (i ? "_" : "") << cfg.c_grid[i];
      os << "-s" << cfg.cw_steps;
      break;
  }
  if (cfg.target) os << "-t" << *cfg.target;
  return os.str();
}

}  // namespace stegdet
