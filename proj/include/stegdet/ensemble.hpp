#ifndef STEGDET_ENSEMBLE_HPP
#define STEGDET_ENSEMBLE_HPP

#include <cstdint>
#include <filesystem>
#include <string>
#include <vector>

#include <Eigen/Dense>

#include "stegdet/common.hpp"

namespace stegdet {

inline constexpr int kNormal = 0;
inline constexpr int kAdversarial = 1;

/// Fisher linear discriminant on a feature subspace. Votes adversarial when
/// w . x[subspace] > b.
struct BaseLearner {
  std::vector<Eigen::Index> subspace;  // sorted, unique
  Eigen::VectorXd w;
  double b = 0.0;

  double score(const Eigen::Ref<const Eigen::RowVectorXd>& x) const;
  int vote(const Eigen::Ref<const Eigen::RowVectorXd>& x) const {
    return score(x) > 0.0 ? kAdversarial : kNormal;
  }
};

/// Majority-vote ensemble of FLDs over standardized features. A tied vote
/// is classified adversarial.
struct EnsembleModel {
  std::string descriptor;
  Eigen::RowVectorXd mean;   // per-column standardization from training
  Eigen::RowVectorXd scale;
  Eigen::Index d_sub = 0;
  std::uint64_t seed = 0;
  std::vector<BaseLearner> learners;

  Eigen::Index dimension() const { return mean.size(); }
  Eigen::Index size() const { return static_cast<Eigen::Index>(learners.size()); }
  Eigen::MatrixXd standardize(const Eigen::MatrixXd& features) const;
  void validate() const;
};

/// In-bag flags, samples x learners.
using BootstrapMasks = Eigen::Array<bool, Eigen::Dynamic, Eigen::Dynamic>;

/// w = (S_w + reg tr(S_w)/k I)^-1 (mu_1 - mu_0) over the subspace columns;
/// b minimizes the equal-prior training error, ties broken toward the
/// midpoint of the projected class means. Labels are kNormal/kAdversarial.
BaseLearner fld_train(const Eigen::MatrixXd& features, const Eigen::VectorXi& labels,
                      const std::vector<Eigen::Index>& subspace, double reg = 1e-10);

struct EnsembleParams {
  double reg = 1e-10;
  int learner_step = 50;
  int max_learners = 500;
  double min_improvement = 0.005;
  int min_per_class = 20;
  /// Empty means the default grid {d/32, d/16, ..., d} capped at min(d, n/2).
  std::vector<Eigen::Index> d_sub_grid;
  int jobs = 1;
};

struct OobPoint {
  Eigen::Index d_sub;
  int learners;
  double error;
};

struct EnsembleTraining {
  EnsembleModel model;
  BootstrapMasks masks;         // for model.learners
  std::vector<OobPoint> curve;  // every (d_sub, L) checkpoint visited
  double oob_error = 0.0;
};

std::vector<Eigen::Index> default_d_sub_grid(Eigen::Index d, Eigen::Index n);

/// Random-subspace, bootstrap-aggregated FLD ensemble; (d_sub, L) chosen by
/// out-of-bag error. Deterministic in (features, labels, seed) for any
/// params.jobs.
EnsembleTraining ensemble_train(const Eigen::MatrixXd& features, const Eigen::VectorXi& labels,
                                std::uint64_t seed, const EnsembleParams& params = {},
                                const std::string& descriptor = "");

struct Prediction {
  int label = kNormal;
  double vote_fraction = 0.0;  // share of learners agreeing with label
};

Prediction predict(const EnsembleModel& model, const Eigen::Ref<const Eigen::RowVectorXd>& x);
std::vector<Prediction> predict_all(const EnsembleModel& model, const Eigen::MatrixXd& features);

struct OobEstimate {
  double error = 0.0;
  std::size_t skipped = 0;  // samples that were in bag for every learner
};

/// Majority-vote error of each sample over the learners whose bootstrap
/// left it out, averaged over samples with at least one such learner.
OobEstimate oob_error(const EnsembleModel& model, const Eigen::MatrixXd& features,
                      const Eigen::VectorXi& labels, const BootstrapMasks& masks);

void save_ensemble(const EnsembleModel& model, const std::filesystem::path& file);
EnsembleModel load_ensemble(const std::filesystem::path& file);

}  // namespace stegdet

#endif  // STEGDET_ENSEMBLE_HPP
