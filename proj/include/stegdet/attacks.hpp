#ifndef STEGDET_ATTACKS_HPP
#define STEGDET_ATTACKS_HPP

#include <optional>
#include <string>
#include <vector>

#include "stegdet/common.hpp"
#include "stegdet/corpus.hpp"
#include "stegdet/victim.hpp"

namespace stegdet {

enum class AttackKind { fgsm, igsm, deepfool, cw };

std::string to_string(AttackKind k);
AttackKind attack_from_string(const std::string& s);

/// Attack parameters. All distances are in intensity levels of [0,255].
/// `target` set means targeted mode.
struct AttackConfig {
  double epsilon = 8.0;
  double alpha = 1.0;
  int max_iters = 10;
  double kappa = 0.0;
  std::vector<double> c_grid{0.1, 1.0, 10.0};
  std::optional<int> target;

  int cw_steps = 200;
  double cw_learning_rate = 0.01;
  double overshoot = 0.02;

  void validate() const;
};

struct AttackResult {
  GrayImage adversarial;
  bool success = false;
  int iterations = 0;
  double linf = 0.0;
  double l2 = 0.0;
};

/// One signed-gradient step of size epsilon. Targeted mode descends
/// J(X, target); untargeted ascends J(X, label).
AttackResult fgsm(const VictimModel& model, const GrayImage& x, int label,
                  const AttackConfig& cfg);

/// Repeated signed-gradient steps of size alpha, each iterate clipped into
/// the epsilon box around x and into [0,255]. Stops on the first iterate
/// whose rounded image succeeds.
AttackResult igsm(const VictimModel& model, const GrayImage& x, int label,
                  const AttackConfig& cfg);

/// Multiclass linearization toward the nearest decision boundary; l2
/// version. Untargeted only. Uses max_iters and overshoot.
AttackResult deepfool(const VictimModel& model, const GrayImage& x, int label,
                      const AttackConfig& cfg);

/// l2 attack minimizing ||delta||_2 + c f(x + delta) in tanh space, for
/// each c of the ascending grid until the rounded solution succeeds.
AttackResult cw_l2(const VictimModel& model, const GrayImage& x, int label,
                   const AttackConfig& cfg);

/// f(x) = max(Z_true - max_{i != true} Z_i, -kappa) untargeted, or
/// max(max_{i != t} Z_i - Z_t, -kappa) when a target is given.
double cw_margin(const Eigen::VectorXd& z, int label, std::optional<int> target, double kappa);

AttackResult run_attack(AttackKind kind, const VictimModel& model, const GrayImage& x, int label,
                        const AttackConfig& cfg);

/// Attack name plus the parameters that shape its output, e.g. "fgsm-eps8".
std::string attack_tag(AttackKind kind, const AttackConfig& cfg);

/// l-infinity and l2 distance between two images of equal size.
std::pair<double, double> distortion(const GrayImage& a, const GrayImage& b);

}  // namespace stegdet

#endif  // STEGDET_ATTACKS_HPP
