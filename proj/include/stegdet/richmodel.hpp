#ifndef STEGDET_RICHMODEL_HPP
#define STEGDET_RICHMODEL_HPP

#include <cmath>
#include <string>
#include <vector>

#include <Eigen/Dense>

#include "stegdet/common.hpp"
#include "stegdet/corpus.hpp"
#include "stegdet/features.hpp"
#include "stegdet/mpm.hpp"

namespace stegdet {

/// One kernel coefficient at a (row, column) offset from the anchor pixel.
struct KernelTap {
  int di;
  int dj;
  double coef;
};

/// A residual of the rich model. Linear residuals are correlations of the
/// mirror-padded image with `taps`; the min/max kinds take the elementwise
/// minimum or maximum of the first-order horizontal and vertical residuals.
struct ResidualSpec {
  enum class Kind { linear, min_hv, max_hv };

  std::string name;
  Kind kind = Kind::linear;
  std::vector<KernelTap> taps;
  double q = 1.0;  // quantization step
};

/// The seven-residual bank: 1st-order h/v, 2nd-order h/v, min/max of the
/// 1st-order h/v pair, and the 3x3 square kernel.
const std::vector<ResidualSpec>& srm_lite_bank();

struct RichModelConfig {
  int T = 2;
  std::vector<ResidualSpec> bank = srm_lite_bank();

  void validate() const;
  /// bank size x 2 scan axes x (2T+1)^4.
  Eigen::Index dimension() const;
  std::string descriptor(bool enhanced) const;
};

/// Symmetric (edge-repeating) reflection of an index into [0, n).
inline Eigen::Index mirror_index(Eigen::Index k, Eigen::Index n) {
  while (k < 0 || k >= n) k = k < 0 ? -k - 1 : 2 * n - k - 1;
  return k;
}

/// Same-size residual of a linear spec.
Eigen::MatrixXd linear_residual(const GrayImage& x, const ResidualSpec& spec);

enum class MinMax { min, max };

/// Elementwise min or max over same-shaped residuals.
Eigen::MatrixXd minmax_residual(const std::vector<Eigen::MatrixXd>& residuals, MinMax mode);

/// Residual of any spec in the bank.
Eigen::MatrixXd compute_residual(const GrayImage& x, const ResidualSpec& spec);

/// r = clamp(round(z / q), -T, T), rounding half away from zero.
template <typename Derived>
Eigen::MatrixXi quantize_truncate(const Eigen::MatrixBase<Derived>& z, double q, int T) {
  if (!(q > 0.0)) throw Error("quantization step must be positive");
  if (T < 1) throw Error("truncation threshold must be at least 1");
  if (!z.allFinite()) throw Error("cannot quantize non-finite residual");
  return z.unaryExpr([q, T](typename Derived::Scalar v) {
            const double r = std::round(static_cast<double>(v) / q);
            return static_cast<int>(std::clamp(r, static_cast<double>(-T), static_cast<double>(T)));
          })
      .eval();
}

enum class ScanAxis { horizontal, vertical };

/// Fourth-order co-occurrence of four consecutive quantized values along
/// the axis. Bin (d0,d1,d2,d3) sits at ((d0+T) K^3 + (d1+T) K^2 + (d2+T) K
/// + (d3+T)), K = 2T+1. Unweighted windows add 1; weighted windows add the
/// largest weight among their four positions. The block is divided by its
/// total so it sums to 1 (it stays all zero if no window fits).
Eigen::VectorXd cooc4(const Eigen::MatrixXi& r, ScanAxis axis, int T,
                      const ProbMap* weights = nullptr);

FeatureVector srm_features(const GrayImage& x, const RichModelConfig& cfg = {});
FeatureVector esrm_features(const GrayImage& x, const ProbMap& p, const RichModelConfig& cfg = {});

}  // namespace stegdet

#endif  // STEGDET_RICHMODEL_HPP
