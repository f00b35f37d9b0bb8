#ifndef STEGDET_SPAM_HPP
#define STEGDET_SPAM_HPP

#include <array>
#include <string>

#include <Eigen/Dense>

#include "stegdet/common.hpp"
#include "stegdet/corpus.hpp"
#include "stegdet/features.hpp"
#include "stegdet/mpm.hpp"

namespace stegdet {

/// The eight scan directions. Straight directions come first, then the
/// diagonals, which is also the order of the two averaged feature halves.
enum class Direction { right, left, down, up, up_left, down_right, down_left, up_right };

inline constexpr std::array<Direction, 8> kAllDirections{
    Direction::right,   Direction::left,       Direction::down,      Direction::up,
    Direction::up_left, Direction::down_right, Direction::down_left, Direction::up_right};

struct Offset {
  int di;
  int dj;
};

/// Unit pixel step of a direction, (row, column).
Offset direction_step(Direction d);

enum class MarkovOrder { first = 1, second = 2 };

struct SpamConfig {
  int T = 3;
  MarkovOrder order = MarkovOrder::second;

  void validate() const;
  /// (2T+1)^(order+1), the size of one averaged half.
  Eigen::Index half_dimension() const;
  Eigen::Index dimension() const { return 2 * half_dimension(); }
  std::string descriptor(bool enhanced) const;
};

/// A(p) = X(p) - X(p + step). The result has one fewer row when the step
/// moves vertically and one fewer column when it moves horizontally. Entry
/// (r, c) holds A(p) for p = (r + max(0,-di), c + max(0,-dj)).
Eigen::MatrixXi diff_array(const GrayImage& x, Direction d);

/// Empirical transition matrix of one direction, differences clamped to
/// [-T, T]. Second order entry M(x | y, z) sits at index
/// (x+T) + K (y+T) + K^2 (z+T) with K = 2T+1, where z = A(p), y = A(p+d),
/// x = A(p+2d). First order drops z. Contexts without support give 0.
/// With weights, each occurrence counts the product of the weights of all
/// pixels it touches instead of 1.
Eigen::VectorXd transition_matrix(const GrayImage& x, Direction d, const SpamConfig& cfg,
                                  const ProbMap* weights = nullptr);

/// Straight-direction average followed by diagonal average.
FeatureVector spam_features(const GrayImage& x, const SpamConfig& cfg = {});

/// SPAM with MPM-weighted transition counting.
FeatureVector espam_features(const GrayImage& x, const ProbMap& p, const SpamConfig& cfg = {});

}  // namespace stegdet

#endif  // STEGDET_SPAM_HPP
