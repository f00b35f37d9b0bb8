#include "stegdet/victim.hpp"

#include <cmath>
#include <fstream>
#include <random>
#include <string>

#include "stegdet/common.hpp"

namespace stegdet {

namespace {

constexpr char kCheckpointMagic[] = "SDVICTIM";
constexpr std::uint32_t kCheckpointVersion = 1;
constexpr double kPixelScale = 1.0 / 255.0;

void check_input(const VictimModel& model, const Eigen::MatrixXd& pixels) {
  if (pixels.rows() != model.side || pixels.cols() != model.side) {
    throw Error("image is " + std::to_string(pixels.rows()) + "x" +
                std::to_string(pixels.cols()) + ", model expects " +
                std::to_string(model.side) + "x" + std::to_string(model.side));
  }
}

// Row-major flattening scaled to [0,1], matching the GrayImage layout.
Eigen::VectorXd flatten(const Eigen::MatrixXd& pixels) {
  Eigen::VectorXd x(pixels.size());
  for (Eigen::Index i = 0; i < pixels.rows(); ++i) {
    x.segment(i * pixels.cols(), pixels.cols()) = pixels.row(i).transpose() * kPixelScale;
  }
  return x;
}

Eigen::MatrixXd unflatten(const Eigen::VectorXd& g, Eigen::Index side) {
  Eigen::MatrixXd out(side, side);
  for (Eigen::Index i = 0; i < side; ++i) {
    out.row(i) = g.segment(i * side, side).transpose();
  }
  return out;
}

struct Activations {
  std::vector<Eigen::VectorXd> outputs;  // outputs[0] is the input
};

Activations forward(const VictimModel& model, const Eigen::VectorXd& x) {
  Activations a;
  a.outputs.reserve(model.layers.size() + 1);
  a.outputs.push_back(x);
  for (const auto& layer : model.layers) {
    Eigen::VectorXd z = layer.weight * a.outputs.back() + layer.bias;
    if (layer.activation == Activation::relu) z = z.cwiseMax(0.0);
    a.outputs.push_back(std::move(z));
  }
  return a;
}

// Pulls d/d(logits) back to d/d(scaled input).
Eigen::VectorXd backward(const VictimModel& model, const Activations& a, Eigen::VectorXd delta) {
  for (std::size_t l = model.layers.size(); l-- > 0;) {
    const auto& layer = model.layers[l];
    if (layer.activation == Activation::relu) {
      delta = (a.outputs[l + 1].array() > 0.0).select(delta, 0.0);
    }
    delta = layer.weight.transpose() * delta;
  }
  return delta;
}

double log_sum_exp(const Eigen::VectorXd& z) {
  const double m = z.maxCoeff();
  return m + std::log((z.array() - m).exp().sum());
}

}  // namespace

void VictimModel::validate() const {
  if (side <= 0 || n_classes < 2) throw Error("victim model has invalid shape");
  Eigen::Index in = input_size();
  for (const auto& layer : layers) {
    if (layer.weight.cols() != in || layer.bias.size() != layer.weight.rows()) {
      throw Error("victim layer dimensions do not chain");
    }
    if (!layer.weight.allFinite() || !layer.bias.allFinite()) {
      throw Error("victim model has non-finite parameters");
    }
    in = layer.weight.rows();
  }
  if (layers.empty() || in != n_classes) throw Error("victim output size differs from class count");
}

VictimModel init_victim(int side, int n_classes, std::uint64_t seed) {
  VictimModel m;
  m.side = side;
  m.n_classes = n_classes;
  m.seed = seed;
  std::mt19937_64 eng(mix_seed(seed, 0));
  std::normal_distribution<double> normal(0.0, 1.0);
  const int widths[] = {static_cast<int>(m.input_size()), kHidden1, kHidden2, n_classes};
  for (int l = 0; l < 3; ++l) {
    DenseLayer layer;
    const double stddev = std::sqrt(2.0 / widths[l]);
    layer.weight.resize(widths[l + 1], widths[l]);
    for (Eigen::Index j = 0; j < layer.weight.cols(); ++j) {
      for (Eigen::Index i = 0; i < layer.weight.rows(); ++i) {
        layer.weight(i, j) = normal(eng) * stddev;
      }
    }
    layer.bias = Eigen::VectorXd::Zero(widths[l + 1]);
    layer.activation = l < 2 ? Activation::relu : Activation::identity;
    m.layers.push_back(std::move(layer));
  }
  return m;
}

TrainedVictim train_victim(const DatasetManifest& manifest, const TrainConfig& cfg) {
  std::vector<GrayImage> images;
  std::vector<int> labels;
  for (const std::size_t i : manifest.indices(Role::train)) {
    images.push_back(load_image(manifest.resolve(manifest.entries[i])));
    labels.push_back(manifest.entries[i].label);
  }
  return train_victim(images, labels, manifest.n_classes(), cfg);
}

TrainedVictim train_victim(const std::vector<GrayImage>& images, const std::vector<int>& labels,
                           int n_classes, const TrainConfig& cfg) {
  if (images.empty()) throw Error("empty train split");
  if (images.size() != labels.size()) throw Error("image/label count mismatch");
  if (cfg.learning_rate < 0.0 || !std::isfinite(cfg.learning_rate)) {
    throw Error("learning rate must be finite and non-negative");
  }
  if (cfg.batch_size < 1) throw Error("batch size must be at least 1");
  if (n_classes < 2) throw Error("victim needs at least 2 classes");
  std::vector<bool> present(static_cast<std::size_t>(n_classes), false);
  for (const int y : labels) {
    if (y < 0 || y >= n_classes) throw Error("label out of range");
    present[static_cast<std::size_t>(y)] = true;
  }
  for (const bool p : present) {
    if (!p) throw Error("every class needs at least one train image");
  }

  const int side = static_cast<int>(images.front().height());
  const Eigen::Index n = static_cast<Eigen::Index>(images.size());
  Eigen::MatrixXd data(static_cast<Eigen::Index>(side) * side, n);
  for (Eigen::Index k = 0; k < n; ++k) {
    const auto& img = images[static_cast<std::size_t>(k)];
    if (img.height() != side || img.width() != side) throw Error("train images differ in size");
    data.col(k) = flatten(img.as_real());
  }

  TrainedVictim out;
  out.model = init_victim(side, n_classes, cfg.seed);
  auto& layers = out.model.layers;

  std::mt19937_64 eng(mix_seed(cfg.seed, 1));
  std::vector<Eigen::Index> order(static_cast<std::size_t>(n));
  for (Eigen::Index k = 0; k < n; ++k) order[static_cast<std::size_t>(k)] = k;

  auto full_pass = [&](double* accuracy) {
    Eigen::MatrixXd h = data;
    for (const auto& layer : layers) {
      h = (layer.weight * h).colwise() + layer.bias;
      if (layer.activation == Activation::relu) h = h.cwiseMax(0.0);
    }
    double loss = 0.0;
    Eigen::Index correct = 0;
    for (Eigen::Index k = 0; k < n; ++k) {
      const Eigen::VectorXd z = h.col(k);
      loss += log_sum_exp(z) - z(labels[static_cast<std::size_t>(k)]);
      Eigen::Index arg;
      z.maxCoeff(&arg);
      correct += arg == labels[static_cast<std::size_t>(k)];
    }
    if (accuracy) *accuracy = static_cast<double>(correct) / static_cast<double>(n);
    return loss / static_cast<double>(n);
  };

  for (int epoch = 0; epoch < cfg.epochs; ++epoch) {
    for (std::size_t k = order.size(); k > 1; --k) {
      std::swap(order[k - 1], order[uniform_index(eng, k)]);
    }
    for (Eigen::Index start = 0; start < n; start += cfg.batch_size) {
      const Eigen::Index bs = std::min<Eigen::Index>(cfg.batch_size, n - start);
      Eigen::MatrixXd batch(data.rows(), bs);
      Eigen::VectorXi y(bs);
      for (Eigen::Index b = 0; b < bs; ++b) {
        const Eigen::Index k = order[static_cast<std::size_t>(start + b)];
        batch.col(b) = data.col(k);
        y(b) = labels[static_cast<std::size_t>(k)];
      }
      std::vector<Eigen::MatrixXd> acts{batch};
      for (const auto& layer : layers) {
        Eigen::MatrixXd z = (layer.weight * acts.back()).colwise() + layer.bias;
        if (layer.activation == Activation::relu) z = z.cwiseMax(0.0);
        acts.push_back(std::move(z));
      }
      // Softmax cross-entropy gradient, averaged over the batch.
      Eigen::MatrixXd delta = acts.back();
      for (Eigen::Index b = 0; b < bs; ++b) {
        const double lse = log_sum_exp(delta.col(b));
        delta.col(b) = (delta.col(b).array() - lse).exp();
        delta(y(b), b) -= 1.0;
      }
      delta /= static_cast<double>(bs);
      for (std::size_t l = layers.size(); l-- > 0;) {
        auto& layer = layers[l];
        if (layer.activation == Activation::relu) {
          delta = (acts[l + 1].array() > 0.0).select(delta, 0.0);
        }
        Eigen::MatrixXd next;
        if (l > 0) next = layer.weight.transpose() * delta;
        layer.weight.noalias() -= cfg.learning_rate * delta * acts[l].transpose();
        layer.bias -= cfg.learning_rate * delta.rowwise().sum();
        delta = std::move(next);
      }
    }
    const double loss = full_pass(nullptr);
    if (!std::isfinite(loss)) {
      throw Error("non-finite training loss at epoch " + std::to_string(epoch));
    }
    out.epoch_loss.push_back(loss);
  }
  full_pass(&out.train_accuracy);
  out.model.validate();
  return out;
}

Eigen::VectorXd softmax(const Eigen::VectorXd& z) {
  Eigen::VectorXd p = (z.array() - z.maxCoeff()).exp();
  return p / p.sum();
}

Eigen::VectorXd logits(const VictimModel& model, const Eigen::MatrixXd& pixels) {
  check_input(model, pixels);
  return forward(model, flatten(pixels)).outputs.back();
}

Eigen::VectorXd logits(const VictimModel& model, const GrayImage& x) {
  return logits(model, x.as_real());
}

int predict_class(const VictimModel& model, const Eigen::MatrixXd& pixels) {
  Eigen::Index arg;
  logits(model, pixels).maxCoeff(&arg);
  return static_cast<int>(arg);
}

int predict_class(const VictimModel& model, const GrayImage& x) {
  return predict_class(model, x.as_real());
}

LossGrad loss_and_input_grad(const VictimModel& model, const Eigen::MatrixXd& pixels, int label) {
  check_input(model, pixels);
  if (label < 0 || label >= model.n_classes) {
    throw Error("label " + std::to_string(label) + " outside [0," +
                std::to_string(model.n_classes) + ")");
  }
  const Activations a = forward(model, flatten(pixels));
  const Eigen::VectorXd& z = a.outputs.back();
  const double lse = log_sum_exp(z);
  LossGrad out;
  out.loss = lse - z(label);
  Eigen::VectorXd delta = (z.array() - lse).exp();
  delta(label) -= 1.0;
  out.grad = unflatten(backward(model, a, std::move(delta)) * kPixelScale, model.side);
  return out;
}

LossGrad loss_and_input_grad(const VictimModel& model, const GrayImage& x, int label) {
  return loss_and_input_grad(model, x.as_real(), label);
}

LogitGrad logit_input_grad(const VictimModel& model, const Eigen::MatrixXd& pixels,
                           const Eigen::VectorXd& coeffs) {
  check_input(model, pixels);
  if (coeffs.size() != model.n_classes) throw Error("coefficient vector size mismatch");
  const Activations a = forward(model, flatten(pixels));
  LogitGrad out;
  out.logits = a.outputs.back();
  out.grad = unflatten(backward(model, a, coeffs) * kPixelScale, model.side);
  return out;
}

void save_victim(const VictimModel& model, const std::filesystem::path& file) {
  model.validate();
  std::ofstream os(file, std::ios::binary);
  if (!os) throw Error("cannot write victim checkpoint " + file.string());
  os.write(kCheckpointMagic, sizeof(kCheckpointMagic) - 1);
  io::write_le<std::uint32_t>(os, kCheckpointVersion);
  io::write_le<std::uint32_t>(os, static_cast<std::uint32_t>(model.side));
  io::write_le<std::uint32_t>(os, static_cast<std::uint32_t>(model.n_classes));
  io::write_le<std::uint64_t>(os, model.seed);
  io::write_le<std::uint32_t>(os, static_cast<std::uint32_t>(model.layers.size()));
  for (const auto& layer : model.layers) {
    io::write_le<std::uint32_t>(os, static_cast<std::uint32_t>(layer.weight.rows()));
    io::write_le<std::uint32_t>(os, static_cast<std::uint32_t>(layer.weight.cols()));
    io::write_le<std::uint8_t>(os, static_cast<std::uint8_t>(layer.activation));
    for (Eigen::Index i = 0; i < layer.weight.rows(); ++i) {
      for (Eigen::Index j = 0; j < layer.weight.cols(); ++j) {
        io::write_le<double>(os, layer.weight(i, j));
      }
    }
    for (Eigen::Index i = 0; i < layer.bias.size(); ++i) io::write_le<double>(os, layer.bias(i));
  }
  if (!os) throw Error("failed writing victim checkpoint " + file.string());
}

VictimModel load_victim(const std::filesystem::path& file) {
  std::ifstream is(file, std::ios::binary);
  if (!is) throw Error("cannot open victim checkpoint " + file.string());
  io::expect_magic(is, kCheckpointMagic);
  if (io::read_le<std::uint32_t>(is) != kCheckpointVersion) {
    throw Error("unsupported victim checkpoint version");
  }
  VictimModel m;
  m.side = static_cast<int>(io::read_le<std::uint32_t>(is));
  m.n_classes = static_cast<int>(io::read_le<std::uint32_t>(is));
  m.seed = io::read_le<std::uint64_t>(is);
  const auto n_layers = io::read_le<std::uint32_t>(is);
  if (n_layers > 64) throw Error("implausible layer count in checkpoint");
  for (std::uint32_t l = 0; l < n_layers; ++l) {
    DenseLayer layer;
    const auto rows = io::read_le<std::uint32_t>(is);
    const auto cols = io::read_le<std::uint32_t>(is);
    const auto act = io::read_le<std::uint8_t>(is);
    if (act > 1) throw Error("unknown activation tag in checkpoint");
    if (static_cast<std::uint64_t>(rows) * cols > (1ULL << 28)) {
      throw Error("implausible layer size in checkpoint");
    }
    layer.activation = static_cast<Activation>(act);
    layer.weight.resize(rows, cols);
    for (Eigen::Index i = 0; i < layer.weight.rows(); ++i) {
      for (Eigen::Index j = 0; j < layer.weight.cols(); ++j) {
        layer.weight(i, j) = io::read_le<double>(is);
      }
    }
    layer.bias.resize(rows);
    for (Eigen::Index i = 0; i < layer.bias.size(); ++i) layer.bias(i) = io::read_le<double>(is);
    m.layers.push_back(std::move(layer));
  }
  m.validate();
  return m;
}

}  // namespace stegdet
