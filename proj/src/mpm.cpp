#include "stegdet/mpm.hpp"

#include <cmath>
#include <fstream>
#include <random>
#include <sstream>

#include "stegdet/common.hpp"

namespace stegdet {

Eigen::MatrixXd f_nor(const Eigen::MatrixXd& values) {
  if (!values.allFinite()) throw Error("f_nor: non-finite input");
  if (values.size() == 0) return values;
  const double lo = values.minCoeff();
  const double hi = values.maxCoeff();
  if (lo < 0.0) throw Error("f_nor: negative input");
  if (hi == lo) return Eigen::MatrixXd::Constant(values.rows(), values.cols(), 0.5);
  return ((values.array() - lo) / (hi - lo)).cwiseMax(kMpmFloor).cwiseMin(1.0).matrix();
}

std::vector<int> sample_target_classes(int n_classes, int exclude, int L, std::uint64_t seed) {
  if (L < 1) throw Error("L must be at least 1");
  std::vector<int> pool;
  for (int k = 0; k < n_classes; ++k) {
    if (k != exclude) pool.push_back(k);
  }
  if (static_cast<int>(pool.size()) < L) {
    throw Error("L = " + std::to_string(L) + " exceeds the " + std::to_string(pool.size()) +
                " available target classes");
  }
  std::mt19937_64 eng(mix_seed(seed, 0));
  for (int i = 0; i < L; ++i) {
    const auto j = static_cast<std::size_t>(i) +
                   uniform_index(eng, pool.size() - static_cast<std::size_t>(i));
    std::swap(pool[static_cast<std::size_t>(i)], pool[j]);
  }
  pool.resize(static_cast<std::size_t>(L));
  return pool;
}

namespace {

ProbMap clamp_map(const Eigen::MatrixXd& m) {
  return m.cwiseMax(kMpmFloor).cwiseMin(1.0);
}

}  // namespace

ProbMap mpm_gradient(const VictimModel& model, const GrayImage& x, const MpmConfig& cfg) {
  const Eigen::MatrixXd xr = x.as_real();
  const int predicted = predict_class(model, xr);
  const auto targets = sample_target_classes(model.n_classes, predicted, cfg.L, cfg.seed);
  Eigen::MatrixXd sum = Eigen::MatrixXd::Zero(x.height(), x.width());
  for (const int t : targets) {
    sum += f_nor(loss_and_input_grad(model, xr, t).grad.cwiseAbs());
  }
  return clamp_map(sum / static_cast<double>(targets.size()));
}

ProbMap mpm_difference(const VictimModel& model, const GrayImage& x, const MpmConfig& cfg,
                       const TargetedAttack& attack, int jobs) {
  const int predicted = predict_class(model, x);
  const auto targets = sample_target_classes(model.n_classes, predicted, cfg.L, cfg.seed);
  std::vector<AttackResult> results(targets.size());
  parallel_for(targets.size(), jobs, [&](std::size_t i) { results[i] = attack(x, targets[i]); });

  std::vector<int> failed;
  Eigen::MatrixXd sum = Eigen::MatrixXd::Zero(x.height(), x.width());
  for (std::size_t i = 0; i < targets.size(); ++i) {
    if (!results[i].success) failed.push_back(targets[i]);
    sum += mpm_untargeted_diff(x, results[i].adversarial);
  }
  if (2 * failed.size() > targets.size()) {
    std::ostringstream os;
    os << "targeted attack failed for " << failed.size() << " of " << targets.size()
       << " target classes:";
    for (const int t : failed) os << ' ' << t;
    throw Error(os.str());
  }
  return clamp_map(sum / static_cast<double>(targets.size()));
}

ProbMap mpm_untargeted_diff(const GrayImage& x, const GrayImage& x_adv) {
  if (x.height() != x_adv.height() || x.width() != x_adv.width()) {
    throw Error("mpm: image dimensions differ");
  }
  return f_nor((x_adv.as_real() - x.as_real()).cwiseAbs());
}

void validate_probmap(const ProbMap& p, Eigen::Index rows, Eigen::Index cols) {
  if (p.rows() != rows || p.cols() != cols) throw Error("probability map shape mismatch");
  if (!p.allFinite() || (p.size() && (p.minCoeff() < kMpmFloor || p.maxCoeff() > 1.0))) {
    throw Error("probability map values outside [1/255, 1]");
  }
}

void save_probmap(const ProbMap& p, const std::filesystem::path& file) {
  std::ofstream os(file, std::ios::binary);
  if (!os) throw Error("cannot write probability map " + file.string());
  os << "PF1\n" << p.cols() << ' ' << p.rows() << '\n';
  for (Eigen::Index i = 0; i < p.rows(); ++i) {
    for (Eigen::Index j = 0; j < p.cols(); ++j) io::write_le<double>(os, p(i, j));
  }
  if (!os) throw Error("failed writing probability map " + file.string());
}

ProbMap load_probmap(const std::filesystem::path& file) {
  std::ifstream is(file, std::ios::binary);
  if (!is) throw Error("cannot open probability map " + file.string());
  std::string magic;
  long width = 0, height = 0;
  if (!(is >> magic >> width >> height) || magic != "PF1" || is.get() != '\n') {
    throw Error("malformed probability map header in " + file.string());
  }
  if (width <= 0 || height <= 0) throw Error("non-positive probability map dimension");
  ProbMap p(height, width);
  for (Eigen::Index i = 0; i < p.rows(); ++i) {
    for (Eigen::Index j = 0; j < p.cols(); ++j) p(i, j) = io::read_le<double>(is);
  }
  return p;
}

GrayImage probmap_visualization(const ProbMap& p) {
  return GrayImage::from_real(p * 255.0);
}

}  // namespace stegdet
