#include "stegdet/spam.hpp"

#include <algorithm>

#include "stegdet/common.hpp"

namespace stegdet {

Offset direction_step(Direction d) {
  switch (d) {
    case Direction::right: return {0, 1};
    case Direction::left: return {0, -1};
    case Direction::down: return {1, 0};
    case Direction::up: return {-1, 0};
    case Direction::up_left: return {-1, -1};
    case Direction::down_right: return {1, 1};
    case Direction::down_left: return {1, -1};
    case Direction::up_right: return {-1, 1};
  }
  return {0, 0};
}

void SpamConfig::validate() const {
  if (T < 1) throw Error("SPAM threshold T must be at least 1");
  if (order != MarkovOrder::first && order != MarkovOrder::second) {
    throw Error("SPAM order must be first or second");
  }
}

Eigen::Index SpamConfig::half_dimension() const {
  const Eigen::Index k = 2 * T + 1;
  return order == MarkovOrder::first ? k * k : k * k * k;
}

std::string SpamConfig::descriptor(bool enhanced) const {
  return std::string(enhanced ? "espam" : "spam") + "-o" +
         std::to_string(static_cast<int>(order)) + "-T" + std::to_string(T);
}

Eigen::MatrixXi diff_array(const GrayImage& x, Direction d) {
  if (x.height() < 2 || x.width() < 2) throw Error("diff_array: image smaller than 2x2");
  const auto [di, dj] = direction_step(d);
  const Eigen::Index rows = x.height() - std::abs(di);
  const Eigen::Index cols = x.width() - std::abs(dj);
  const int r0 = std::max(0, -di);
  const int c0 = std::max(0, -dj);
  Eigen::MatrixXi a(rows, cols);
  for (Eigen::Index r = 0; r < rows; ++r) {
    for (Eigen::Index c = 0; c < cols; ++c) {
      const Eigen::Index i = r + r0;
      const Eigen::Index j = c + c0;
      a(r, c) = static_cast<int>(x(i, j)) - static_cast<int>(x(i + di, j + dj));
    }
  }
  return a;
}

Eigen::VectorXd transition_matrix(const GrayImage& x, Direction d, const SpamConfig& cfg,
                                  const ProbMap* weights) {
  cfg.validate();
  if (weights && (weights->rows() != x.height() || weights->cols() != x.width())) {
    throw Error("probability map does not match image dimensions");
  }
  const int order = static_cast<int>(cfg.order);
  // A chain of order+1 differences spans order+2 pixels.
  const int span = order + 1;
  if (x.height() < span + 1 || x.width() < span + 1) throw Error("image too small for SPAM");

  const int T = cfg.T;
  const Eigen::Index K = 2 * T + 1;
  const auto [di, dj] = direction_step(d);
  Eigen::VectorXd joint = Eigen::VectorXd::Zero(cfg.half_dimension());
  Eigen::VectorXd context = Eigen::VectorXd::Zero(cfg.half_dimension() / K);

  // Start positions p such that p + span*step stays inside the image.
  const Eigen::Index i0 = std::max(0, -di * span), j0 = std::max(0, -dj * span);
  const Eigen::Index rows = x.height() - span * std::abs(di);
  const Eigen::Index cols = x.width() - span * std::abs(dj);
  const Eigen::MatrixXi pixels = x.pixels.cast<int>();
  auto shifted = [&](const auto& m, int k) {
    return m.block(i0 + k * di, j0 + k * dj, rows, cols);
  };
  // Clamped difference A(p + k*step) + T for every start position p.
  auto diff = [&](int k) -> Eigen::MatrixXi {
    return (shifted(pixels, k) - shifted(pixels, k + 1)).cwiseMax(-T).cwiseMin(T).array() + T;
  };
  // Conditioning differences, oldest is most significant.
  Eigen::MatrixXi ctx = Eigen::MatrixXi::Zero(rows, cols);
  for (int k = 0; k < order; ++k) ctx = ctx * static_cast<int>(K) + diff(k);
  const Eigen::MatrixXi bin = diff(order) + ctx * static_cast<int>(K);

  if (weights) {
    Eigen::MatrixXd w = shifted(*weights, 0);
    for (int k = 1; k <= span; ++k) w = w.cwiseProduct(shifted(*weights, k));
    for (Eigen::Index j = 0; j < cols; ++j) {
      for (Eigen::Index i = 0; i < rows; ++i) {
        joint(bin(i, j)) += w(i, j);
        context(ctx(i, j)) += w(i, j);
      }
    }
  } else {
    for (Eigen::Index j = 0; j < cols; ++j) {
      for (Eigen::Index i = 0; i < rows; ++i) {
        joint(bin(i, j)) += 1.0;
        context(ctx(i, j)) += 1.0;
      }
    }
  }
  for (Eigen::Index ctx = 0; ctx < context.size(); ++ctx) {
    if (context(ctx) > 0.0) {
      joint.segment(ctx * K, K) /= context(ctx);
    } else {
      joint.segment(ctx * K, K).setZero();
    }
  }
  return joint;
}

namespace {

FeatureVector averaged(const GrayImage& x, const SpamConfig& cfg, const ProbMap* weights) {
  const Eigen::Index k = cfg.half_dimension();
  FeatureVector f;
  f.descriptor = cfg.descriptor(weights != nullptr);
  f.values = Eigen::VectorXd::Zero(2 * k);
  for (std::size_t n = 0; n < kAllDirections.size(); ++n) {
    const Eigen::Index half = n < 4 ? 0 : k;
    f.values.segment(half, k) += transition_matrix(x, kAllDirections[n], cfg, weights);
  }
  f.values /= 4.0;
  return f;
}

}  // namespace

FeatureVector spam_features(const GrayImage& x, const SpamConfig& cfg) {
  return averaged(x, cfg, nullptr);
}

FeatureVector espam_features(const GrayImage& x, const ProbMap& p, const SpamConfig& cfg) {
  if (p.rows() != x.height() || p.cols() != x.width()) {
    throw Error("probability map does not match image dimensions");
  }
  return averaged(x, cfg, &p);
}

}  // namespace stegdet
