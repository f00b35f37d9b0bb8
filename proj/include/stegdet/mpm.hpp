#ifndef STEGDET_MPM_HPP
#define STEGDET_MPM_HPP

#include <cstdint>
#include <filesystem>
#include <functional>
#include <vector>

#include <Eigen/Dense>

#include "stegdet/common.hpp"

#include "stegdet/attacks.hpp"
#include "stegdet/corpus.hpp"
#include "stegdet/victim.hpp"

namespace stegdet {

/// Modification probability map: one relative probability per pixel, every
/// entry in [kMpmFloor, 1]. Same shape as the image it describes.
using ProbMap = Eigen::MatrixXd;

/// One intensity quantum. Normalized maps never go below it, so weighted
/// features never lose a pixel entirely.
inline constexpr double kMpmFloor = 1.0 / 255.0;

struct MpmConfig {
  int L = 10;  // sampled target classes
  std::uint64_t seed = 1;
};

/// Min-max normalization clamped to [kMpmFloor, 1]; a constant input maps
/// to 0.5 everywhere.
Eigen::MatrixXd f_nor(const Eigen::MatrixXd& values);

/// L distinct classes drawn uniformly without replacement from
/// {0..n_classes-1} minus `exclude`. Deterministic in seed.
std::vector<int> sample_target_classes(int n_classes, int exclude, int L, std::uint64_t seed);

/// Mean of L normalized |grad_X J(X, y_i)| maps over sampled targets y_i.
ProbMap mpm_gradient(const VictimModel& model, const GrayImage& x, const MpmConfig& cfg);

using TargetedAttack = std::function<AttackResult(const GrayImage& x, int target)>;

/// Mean of L normalized |X_i^adv - X| maps, one targeted attack per
/// sampled class. Fails if more than L/2 attacks fail.
ProbMap mpm_difference(const VictimModel& model, const GrayImage& x, const MpmConfig& cfg,
                       const TargetedAttack& attack, int jobs = 1);

/// f_nor(|X_adv - X|).
ProbMap mpm_untargeted_diff(const GrayImage& x, const GrayImage& x_adv);

/// Throws unless p has the given shape and every entry is in [kMpmFloor, 1].
void validate_probmap(const ProbMap& p, Eigen::Index rows, Eigen::Index cols);

/// "PF1" text header (width height) followed by little-endian float64
/// values in row-major order.
void save_probmap(const ProbMap& p, const std::filesystem::path& file);
ProbMap load_probmap(const std::filesystem::path& file);

/// 8-bit rendering (values x 255) for inspection.
GrayImage probmap_visualization(const ProbMap& p);

}  // namespace stegdet

#endif  // STEGDET_MPM_HPP
