#ifndef STEGDET_PIPELINE_HPP
#define STEGDET_PIPELINE_HPP

#include <cstdint>
#include <filesystem>
#include <functional>
#include <optional>
#include <ostream>
#include <string>
#include <vector>

#include "json.hpp"

#include "stegdet/attacks.hpp"
#include "stegdet/common.hpp"
#include "stegdet/corpus.hpp"
#include "stegdet/ensemble.hpp"
#include "stegdet/features.hpp"
#include "stegdet/mpm.hpp"
#include "stegdet/richmodel.hpp"
#include "stegdet/spam.hpp"
#include "stegdet/victim.hpp"

namespace stegdet {

enum class FeatureKind { spam, espam, srmlite, esrm };
std::string to_string(FeatureKind k);
FeatureKind feature_from_string(const std::string& s);
/// True for the MPM-weighted kinds.
bool is_enhanced(FeatureKind k);

/// Everything that determines an experiment's outputs. Thread count is
/// deliberately absent: results do not depend on it.
struct ExperimentConfig {
  std::uint64_t seed = 1;

  std::size_t n_images = 800;
  int image_size = 128;
  int n_classes = 2;

  int victim_epochs = 5;
  int victim_batch = 16;
  double victim_learning_rate = 0.001;

  AttackKind attack = AttackKind::fgsm;
  std::vector<double> epsilons{2, 4, 6, 8};
  double alpha = 1.0;
  int max_iters = 10;
  double kappa = 0.0;
  std::vector<double> c_grid{0.1, 1.0, 10.0};
  int cw_steps = 200;
  double cw_learning_rate = 0.01;
  double overshoot = 0.02;

  std::vector<FeatureKind> features{FeatureKind::spam, FeatureKind::espam, FeatureKind::srmlite,
                                    FeatureKind::esrm};
  int mpm_L = 10;
  int spam_T = 3;
  int spam_order = 2;
  int srm_T = 2;

  int learner_step = 50;
  int max_learners = 500;
  double min_improvement = 0.005;
  double reg = 1e-10;

  /// Throws on an undeclared feature, non-integer or non-positive epsilon,
  /// or any other out-of-range field.
  void validate() const;

  /// Canonical form: nested objects with sorted keys.
  nlohmann::json to_json() const;
  /// Overlays the keys present in j onto *this; unknown keys are errors.
  void merge_json(const nlohmann::json& j);
  static ExperimentConfig from_json(const nlohmann::json& j);

  CorpusParams corpus_params() const;
  TrainConfig train_config() const;
  /// Attack parameters for one epsilon (ignored by deepfool and cw).
  AttackConfig attack_config(double epsilon) const;
  SpamConfig spam_config() const;
  RichModelConfig rich_config() const;
  EnsembleParams ensemble_params(int jobs) const;
  /// Sampled target classes actually used: min(mpm_L, n_classes - 1).
  int effective_L() const;
  /// Epsilon settings to run: the grid for fgsm/igsm, one unnamed setting
  /// for deepfool and cw.
  std::vector<std::optional<double>> settings() const;
};

/// Lowercase hex SHA-256 of a byte string.
std::string sha256_hex(const std::string& bytes);
/// Stable content hash of the canonical config; 64 hex characters.
std::string cache_digest(const ExperimentConfig& cfg);

/// Per-pixel modification probabilities of x, estimated the way that suits
/// `attack`: gradient maps for fgsm/igsm, a deepfool difference map, or
/// targeted cw difference maps. Labels are the victim's predictions, so the
/// estimate never needs the ground truth. `seed` picks the target classes.
ProbMap estimate_mpm(AttackKind attack, const VictimModel& model, const GrayImage& x,
                     const ExperimentConfig& cfg, std::uint64_t seed, int jobs = 1);

/// Attacks every image against its label; results keep input order.
std::vector<AttackResult> attack_batch(AttackKind kind, const VictimModel& model,
                                       const std::vector<GrayImage>& images,
                                       const std::vector<int>& labels, const AttackConfig& cfg,
                                       int jobs);

/// File name of an adversarial image: "<stem>.adv-<tag>.pgm".
std::string adversarial_name(const std::string& path, const std::string& tag);

/// One line per result: path, success, linf, l2, iterations.
void write_attack_csv(const std::vector<std::string>& paths,
                      const std::vector<AttackResult>& results, std::ostream& os);

/// Supplies the probability map for item i of a batch.
using MpmSource = std::function<ProbMap(std::size_t i)>;

/// One feature row per image, in order. `mpm` is required for the enhanced
/// kinds and ignored otherwise.
FeatureStore extract_features(FeatureKind kind, const ExperimentConfig& cfg,
                              const std::vector<GrayImage>& images, const MpmSource& mpm,
                              int jobs);

/// Detector outcome counts with adversarial as the positive class.
struct Confusion {
  std::size_t tn = 0;  // normal kept normal
  std::size_t fp = 0;  // normal flagged adversarial
  std::size_t fn = 0;  // adversarial missed
  std::size_t tp = 0;  // adversarial flagged
};

struct DetectionReport {
  std::string attack;                // attack tag
  std::optional<double> epsilon;     // empty for deepfool and cw
  std::string feature;               // feature descriptor
  Confusion counts;
  double normal_accuracy = 0.0;      // tn / (tn + fp)
  double adversarial_accuracy = 0.0; // tp / (tp + fn)
  double average_accuracy = 0.0;
  double oob_error = 0.0;
  Eigen::Index d_sub = 0;
  int learners = 0;
  std::size_t train_pairs = 0;
};

/// Applies a detector to labelled rows. Errors on a descriptor mismatch,
/// an empty set, or labels that are all one class.
DetectionReport evaluate(const EnsembleModel& model, const FeatureStore& features,
                         const Eigen::VectorXi& labels);

/// Evaluates normal rows against adversarial rows of the same descriptor.
DetectionReport evaluate(const EnsembleModel& model, const FeatureStore& normal,
                         const FeatureStore& adversarial);

/// Flags row i when any detector in the bank votes adversarial on it.
/// banks[k] pairs detector k with its own feature rows for the same images.
std::vector<bool> detector_bank(const std::vector<EnsembleModel>& detectors,
                                const std::vector<FeatureStore>& rows);

/// Stacks normal and adversarial rows, labels 0 then 1.
std::pair<FeatureStore, Eigen::VectorXi> stack_labelled(const FeatureStore& normal,
                                                        const FeatureStore& adversarial);

void write_report_csv(const std::vector<DetectionReport>& reports, std::ostream& os);
/// Normal and adversarial accuracy rows per feature, one column per epsilon.
void write_report_table(const std::vector<DetectionReport>& reports, std::ostream& os);
/// Published large-scale accuracies for the same attack (ImageNet, VGG-16,
/// 40000 images), printed for comparison only.
void write_reference_table(AttackKind attack, std::ostream& os);

struct AttackSummary {
  std::string tag;
  std::size_t attacked = 0;
  std::size_t succeeded = 0;
  std::size_t modified = 0;
};

struct ExperimentResult {
  std::string digest;
  double victim_train_accuracy = 0.0;
  double victim_test_accuracy = 0.0;
  std::vector<AttackSummary> attacks;
  std::vector<DetectionReport> reports;
};

/// Corpus, victim, attacks, features, detectors and report, each stage
/// cached under out_dir/cache by a digest of everything it depends on.
/// Writes out_dir/config.json, report.csv and report.txt. A failing stage
/// aborts with an Error naming the stage.
ExperimentResult run_experiment(const ExperimentConfig& cfg, const std::filesystem::path& out_dir,
                                int jobs = 1, std::ostream* log = nullptr);

/// Writes to a temporary sibling and renames, so readers never see a
/// partial file.
void atomic_write(const std::filesystem::path& file,
                  const std::function<void(const std::filesystem::path&)>& writer);

}  // namespace stegdet

#endif  // STEGDET_PIPELINE_HPP
