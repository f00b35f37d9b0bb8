#ifndef STEGDET_VICTIM_HPP
#define STEGDET_VICTIM_HPP

#include <cstdint>
#include <filesystem>
#include <vector>

#include <Eigen/Dense>

#include "stegdet/common.hpp"

#include "stegdet/corpus.hpp"

namespace stegdet {

enum class Activation : std::uint8_t { identity = 0, relu = 1 };

struct DenseLayer {
  Eigen::MatrixXd weight;  // out x in
  Eigen::VectorXd bias;    // out
  Activation activation = Activation::identity;
};

/// Small fully connected softmax classifier over side x side grayscale
/// images: flatten -> dense(256, ReLU) -> dense(64, ReLU) -> dense(N).
/// Inputs are scaled to [0,1] internally; every gradient this module hands
/// out is per intensity level of the original [0,255] pixel.
struct VictimModel {
  int side = 0;
  int n_classes = 0;
  std::uint64_t seed = 0;
  std::vector<DenseLayer> layers;

  Eigen::Index input_size() const { return static_cast<Eigen::Index>(side) * side; }
  /// Throws unless layer shapes chain from input_size() to n_classes and
  /// every parameter is finite.
  void validate() const;
};

struct TrainConfig {
  int epochs = 5;
  int batch_size = 16;
  double learning_rate = 0.001;
  std::uint64_t seed = 1;
};

struct TrainedVictim {
  VictimModel model;
  std::vector<double> epoch_loss;  // mean train cross-entropy after each epoch
  double train_accuracy = 0.0;
};

inline constexpr int kHidden1 = 256;
inline constexpr int kHidden2 = 64;

/// He-initialized model; deterministic in seed.
VictimModel init_victim(int side, int n_classes, std::uint64_t seed);

/// Plain minibatch SGD on the manifest's train split. Single-threaded.
TrainedVictim train_victim(const DatasetManifest& manifest, const TrainConfig& cfg);

/// Same, from images already in memory.
TrainedVictim train_victim(const std::vector<GrayImage>& images, const std::vector<int>& labels,
                           int n_classes, const TrainConfig& cfg);

/// Pre-softmax scores Z(x).
Eigen::VectorXd logits(const VictimModel& model, const Eigen::MatrixXd& pixels);
Eigen::VectorXd logits(const VictimModel& model, const GrayImage& x);

int predict_class(const VictimModel& model, const Eigen::MatrixXd& pixels);
int predict_class(const VictimModel& model, const GrayImage& x);

Eigen::VectorXd softmax(const Eigen::VectorXd& z);

struct LossGrad {
  double loss = 0.0;
  Eigen::MatrixXd grad;  // d loss / d pixel, same shape as the image
};

/// Cross-entropy J(X, y) and its gradient with respect to the pixels.
LossGrad loss_and_input_grad(const VictimModel& model, const Eigen::MatrixXd& pixels, int label);
LossGrad loss_and_input_grad(const VictimModel& model, const GrayImage& x, int label);

/// Gradient of sum_k coeffs[k] * Z_k with respect to the pixels; also
/// returns Z at the evaluation point.
struct LogitGrad {
  Eigen::VectorXd logits;
  Eigen::MatrixXd grad;
};
LogitGrad logit_input_grad(const VictimModel& model, const Eigen::MatrixXd& pixels,
                           const Eigen::VectorXd& coeffs);

/// Versioned little-endian checkpoint.
void save_victim(const VictimModel& model, const std::filesystem::path& file);
VictimModel load_victim(const std::filesystem::path& file);

}  // namespace stegdet

#endif  // STEGDET_VICTIM_HPP
