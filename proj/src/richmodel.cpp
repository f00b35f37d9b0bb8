#include "stegdet/richmodel.hpp"

#include <algorithm>

namespace stegdet {

const std::vector<ResidualSpec>& srm_lite_bank() {
  using K = ResidualSpec::Kind;
  static const std::vector<ResidualSpec> bank = {
      {"first-h", K::linear, {{0, 0, -1.0}, {0, 1, 1.0}}, 1.0},
      {"first-v", K::linear, {{0, 0, -1.0}, {1, 0, 1.0}}, 1.0},
      {"second-h", K::linear, {{0, -1, 1.0}, {0, 0, -2.0}, {0, 1, 1.0}}, 2.0},
      {"second-v", K::linear, {{-1, 0, 1.0}, {0, 0, -2.0}, {1, 0, 1.0}}, 2.0},
      {"min-first-hv", K::min_hv, {}, 1.0},
      {"max-first-hv", K::max_hv, {}, 1.0},
      {"square-3x3",
       K::linear,
       {{-1, -1, -1.0}, {-1, 0, 2.0}, {-1, 1, -1.0},
        {0, -1, 2.0}, {0, 0, -4.0}, {0, 1, 2.0},
        {1, -1, -1.0}, {1, 0, 2.0}, {1, 1, -1.0}},
       4.0},
  };
  return bank;
}

void RichModelConfig::validate() const {
  if (T < 1) throw Error("rich model threshold T must be at least 1");
  if (bank.empty()) throw Error("rich model residual bank is empty");
  for (const auto& spec : bank) {
    if (!(spec.q > 0.0)) throw Error("residual " + spec.name + " has non-positive q");
    if (spec.kind == ResidualSpec::Kind::linear) {
      double sum = 0.0;
      for (const auto& t : spec.taps) sum += t.coef;
      if (spec.taps.empty() || sum != 0.0) {
        throw Error("linear residual " + spec.name + " must have coefficients summing to 0");
      }
    }
  }
}

Eigen::Index RichModelConfig::dimension() const {
  const Eigen::Index k = 2 * T + 1;
  return static_cast<Eigen::Index>(bank.size()) * 2 * k * k * k * k;
}

std::string RichModelConfig::descriptor(bool enhanced) const {
  return std::string(enhanced ? "esrm" : "srmlite") + "-v1-n" + std::to_string(bank.size()) +
         "-T" + std::to_string(T);
}

Eigen::MatrixXd linear_residual(const GrayImage& x, const ResidualSpec& spec) {
  if (spec.kind != ResidualSpec::Kind::linear) throw Error(spec.name + " is not a linear residual");
  const Eigen::Index m = x.height(), n = x.width();
  int pad = 0;
  for (const auto& tap : spec.taps) pad = std::max({pad, std::abs(tap.di), std::abs(tap.dj)});
  Eigen::MatrixXd padded(m + 2 * pad, n + 2 * pad);
  for (Eigen::Index i = 0; i < padded.rows(); ++i) {
    const Eigen::Index si = mirror_index(i - pad, m);
    for (Eigen::Index j = 0; j < padded.cols(); ++j) {
      padded(i, j) = x(si, mirror_index(j - pad, n));
    }
  }
  Eigen::MatrixXd z = Eigen::MatrixXd::Zero(m, n);
  for (const auto& tap : spec.taps) {
    z += tap.coef * padded.block(pad + tap.di, pad + tap.dj, m, n);
  }
  return z;
}

Eigen::MatrixXd minmax_residual(const std::vector<Eigen::MatrixXd>& residuals, MinMax mode) {
  if (residuals.empty()) throw Error("minmax of an empty residual set");
  Eigen::MatrixXd out = residuals.front();
  for (std::size_t k = 1; k < residuals.size(); ++k) {
    if (residuals[k].rows() != out.rows() || residuals[k].cols() != out.cols()) {
      throw Error("minmax residual dimension mismatch");
    }
    if (mode == MinMax::min) {
      out = out.cwiseMin(residuals[k]);
    } else {
      out = out.cwiseMax(residuals[k]);
    }
  }
  return out;
}

Eigen::MatrixXd compute_residual(const GrayImage& x, const ResidualSpec& spec) {
  if (spec.kind == ResidualSpec::Kind::linear) return linear_residual(x, spec);
  const auto& bank = srm_lite_bank();
  std::vector<Eigen::MatrixXd> pair{linear_residual(x, bank[0]), linear_residual(x, bank[1])};
  return minmax_residual(pair, spec.kind == ResidualSpec::Kind::min_hv ? MinMax::min : MinMax::max);
}

Eigen::VectorXd cooc4(const Eigen::MatrixXi& r, ScanAxis axis, int T, const ProbMap* weights) {
  if (T < 1) throw Error("truncation threshold must be at least 1");
  if (weights && (weights->rows() != r.rows() || weights->cols() != r.cols())) {
    throw Error("co-occurrence weights do not match residual dimensions");
  }
  const Eigen::Index K = 2 * T + 1;
  const int di = axis == ScanAxis::vertical ? 1 : 0;
  const int dj = axis == ScanAxis::horizontal ? 1 : 0;
  Eigen::VectorXd bins = Eigen::VectorXd::Zero(K * K * K * K);
  const Eigen::Index i_hi = r.rows() - 3 * di;
  const Eigen::Index j_hi = r.cols() - 3 * dj;
  for (Eigen::Index i = 0; i < i_hi; ++i) {
    for (Eigen::Index j = 0; j < j_hi; ++j) {
      Eigen::Index idx = 0;
      double w = weights ? 0.0 : 1.0;
      for (int k = 0; k < 4; ++k) {
        const int v = r(i + k * di, j + k * dj);
        if (v < -T || v > T) throw Error("co-occurrence input outside [-T, T]");
        idx = idx * K + (v + T);
        if (weights) w = std::max(w, (*weights)(i + k * di, j + k * dj));
      }
      bins(idx) += w;
    }
  }
  const double total = bins.sum();
  if (total > 0.0) bins /= total;
  return bins;
}

namespace {

FeatureVector assemble(const GrayImage& x, const RichModelConfig& cfg, const ProbMap* weights) {
  cfg.validate();
  if (weights && (weights->rows() != x.height() || weights->cols() != x.width())) {
    throw Error("probability map does not match image dimensions");
  }
  const Eigen::Index K = 2 * cfg.T + 1;
  const Eigen::Index block = K * K * K * K;
  FeatureVector f;
  f.descriptor = cfg.descriptor(weights != nullptr);
  f.values.resize(cfg.dimension());
  Eigen::Index offset = 0;
  for (const auto& spec : cfg.bank) {
    const Eigen::MatrixXi r = quantize_truncate(compute_residual(x, spec), spec.q, cfg.T);
    f.values.segment(offset, block) = cooc4(r, ScanAxis::horizontal, cfg.T, weights);
    f.values.segment(offset + block, block) = cooc4(r, ScanAxis::vertical, cfg.T, weights);
    offset += 2 * block;
  }
  return f;
}

}  // namespace

FeatureVector srm_features(const GrayImage& x, const RichModelConfig& cfg) {
  return assemble(x, cfg, nullptr);
}

FeatureVector esrm_features(const GrayImage& x, const ProbMap& p, const RichModelConfig& cfg) {
  return assemble(x, cfg, &p);
}

}  // namespace stegdet
