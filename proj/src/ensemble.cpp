#include "stegdet/ensemble.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <limits>
#include <numeric>
#include <random>

#include "stegdet/common.hpp"

namespace stegdet {

namespace {

constexpr char kModelMagic[] = "SDENSMBL";
constexpr std::uint32_t kModelVersion = 1;

void check_labels(const Eigen::VectorXi& labels, Eigen::Index n) {
  if (labels.size() != n) throw Error("label count does not match feature rows");
  for (Eigen::Index i = 0; i < n; ++i) {
    if (labels(i) != kNormal && labels(i) != kAdversarial) throw Error("labels must be 0 or 1");
  }
}

// FLD on features(rows, subspace). `rows` may repeat (bootstrap).
BaseLearner fit_fld(const Eigen::MatrixXd& features, const Eigen::VectorXi& labels,
                    const std::vector<Eigen::Index>& rows,
                    const std::vector<Eigen::Index>& subspace, double reg) {
  const auto k = static_cast<Eigen::Index>(subspace.size());
  if (k == 0) throw Error("empty subspace");
  std::vector<Eigen::Index> rows0, rows1;
  for (const Eigen::Index r : rows) (labels(r) == kAdversarial ? rows1 : rows0).push_back(r);
  if (rows0.empty() || rows1.empty()) throw Error("FLD needs samples from both classes");

  const Eigen::MatrixXd x0 = features(rows0, subspace);
  const Eigen::MatrixXd x1 = features(rows1, subspace);
  const Eigen::RowVectorXd mu0 = x0.colwise().mean();
  const Eigen::RowVectorXd mu1 = x1.colwise().mean();

  Eigen::MatrixXd scatter = Eigen::MatrixXd::Zero(k, k);
  scatter.selfadjointView<Eigen::Lower>().rankUpdate((x0.rowwise() - mu0).transpose());
  scatter.selfadjointView<Eigen::Lower>().rankUpdate((x1.rowwise() - mu1).transpose());

  const Eigen::VectorXd gap = (mu1 - mu0).transpose();
  BaseLearner learner;
  learner.subspace = subspace;
  if (gap.isZero(0.0)) {
    // No mean difference: any direction is as good as another.
    learner.w = Eigen::VectorXd::Constant(k, 1.0 / std::sqrt(static_cast<double>(k)));
  } else {
    double lambda = reg * scatter.diagonal().sum() / static_cast<double>(k);
    if (!(lambda > 0.0)) lambda = std::max(reg, 1e-12);
    bool solved = false;
    for (int attempt = 0; attempt < 16 && !solved; ++attempt, lambda *= 10.0) {
      Eigen::MatrixXd a = scatter;
      a.diagonal().array() += lambda;
      Eigen::LLT<Eigen::MatrixXd, Eigen::Lower> llt(a);
      if (llt.info() != Eigen::Success) continue;
      learner.w = llt.solve(gap);
      solved = learner.w.allFinite() && !learner.w.isZero(0.0);
    }
    if (!solved) throw Error("within-class scatter is singular even after regularization");
  }

  // Threshold sweep on the training projections.
  const Eigen::VectorXd s0 = x0 * learner.w;
  const Eigen::VectorXd s1 = x1 * learner.w;
  const double n0 = static_cast<double>(s0.size());
  const double n1 = static_cast<double>(s1.size());
  const double midpoint = 0.5 * (s0.mean() + s1.mean());
  std::vector<std::pair<double, int>> proj;
  proj.reserve(rows.size());
  for (Eigen::Index i = 0; i < s0.size(); ++i) proj.emplace_back(s0(i), kNormal);
  for (Eigen::Index i = 0; i < s1.size(); ++i) proj.emplace_back(s1(i), kAdversarial);
  std::sort(proj.begin(), proj.end());

  // Threshold below everything: all adversarial.
  double false_pos = n0, false_neg = 0.0;
  double best_b = proj.front().first - 1.0;
  double best_err = 0.5 * (false_pos / n0 + false_neg / n1);
  for (std::size_t i = 0; i < proj.size();) {
    const double v = proj[i].first;
    while (i < proj.size() && proj[i].first == v) {
      (proj[i].second == kNormal ? false_pos : false_neg) += proj[i].second == kNormal ? -1.0 : 1.0;
      ++i;
    }
    const double b = i < proj.size() ? 0.5 * (v + proj[i].first) : v + 1.0;
    const double err = 0.5 * (false_pos / n0 + false_neg / n1);
    if (err < best_err - 1e-15 ||
        (std::abs(err - best_err) <= 1e-15 && std::abs(b - midpoint) < std::abs(best_b - midpoint))) {
      best_err = err;
      best_b = b;
    }
  }
  learner.b = best_b;
  return learner;
}

std::vector<Eigen::Index> random_subspace(std::mt19937_64& eng, Eigen::Index d, Eigen::Index k) {
  std::vector<Eigen::Index> pool(static_cast<std::size_t>(d));
  std::iota(pool.begin(), pool.end(), Eigen::Index{0});
  for (Eigen::Index i = 0; i < k; ++i) {
    const auto j = static_cast<std::size_t>(i) +
                   uniform_index(eng, static_cast<std::uint64_t>(d - i));
    std::swap(pool[static_cast<std::size_t>(i)], pool[j]);
  }
  pool.resize(static_cast<std::size_t>(k));
  std::sort(pool.begin(), pool.end());
  return pool;
}

struct Trained {
  BaseLearner learner;
  std::vector<bool> in_bag;
};

}  // namespace

double BaseLearner::score(const Eigen::Ref<const Eigen::RowVectorXd>& x) const {
  double s = 0.0;
  for (std::size_t t = 0; t < subspace.size(); ++t) {
    s += w(static_cast<Eigen::Index>(t)) * x(subspace[t]);
  }
  return s - b;
}

Eigen::MatrixXd EnsembleModel::standardize(const Eigen::MatrixXd& features) const {
  if (features.cols() != dimension()) {
    throw Error("feature dimension " + std::to_string(features.cols()) +
                " does not match detector dimension " + std::to_string(dimension()));
  }
  return (features.rowwise() - mean).array().rowwise() / scale.array();
}

void EnsembleModel::validate() const {
  if (mean.size() != scale.size() || mean.size() == 0) throw Error("bad standardization vectors");
  if (learners.empty()) throw Error("ensemble has no learners");
  for (const auto& l : learners) {
    if (static_cast<Eigen::Index>(l.subspace.size()) != d_sub || l.w.size() != d_sub) {
      throw Error("learner subspace size differs from d_sub");
    }
    for (std::size_t t = 0; t < l.subspace.size(); ++t) {
      if (l.subspace[t] < 0 || l.subspace[t] >= dimension() ||
          (t > 0 && l.subspace[t] <= l.subspace[t - 1])) {
        throw Error("learner subspace indices invalid");
      }
    }
    if (!l.w.allFinite() || l.w.isZero(0.0) || !std::isfinite(l.b)) {
      throw Error("learner weights invalid");
    }
  }
}

BaseLearner fld_train(const Eigen::MatrixXd& features, const Eigen::VectorXi& labels,
                      const std::vector<Eigen::Index>& subspace, double reg) {
  check_labels(labels, features.rows());
  for (const Eigen::Index c : subspace) {
    if (c < 0 || c >= features.cols()) throw Error("subspace index out of range");
  }
  std::vector<Eigen::Index> rows(static_cast<std::size_t>(features.rows()));
  std::iota(rows.begin(), rows.end(), Eigen::Index{0});
  return fit_fld(features, labels, rows, subspace, reg);
}

std::vector<Eigen::Index> default_d_sub_grid(Eigen::Index d, Eigen::Index n) {
  const Eigen::Index cap = std::max<Eigen::Index>(1, std::min(d, n / 2));
  std::vector<Eigen::Index> grid;
  for (int shift = 5; shift >= 0; --shift) {
    const Eigen::Index v = std::clamp<Eigen::Index>(d >> shift, 1, cap);
    if (grid.empty() || grid.back() != v) grid.push_back(v);
  }
  return grid;
}

EnsembleTraining ensemble_train(const Eigen::MatrixXd& features, const Eigen::VectorXi& labels,
                                std::uint64_t seed, const EnsembleParams& params,
                                const std::string& descriptor) {
  const Eigen::Index n = features.rows();
  const Eigen::Index d = features.cols();
  check_labels(labels, n);
  if (!features.allFinite()) throw Error("non-finite feature values");
  std::vector<Eigen::Index> class_rows[2];
  for (Eigen::Index i = 0; i < n; ++i) class_rows[labels(i)].push_back(i);
  for (const auto& cr : class_rows) {
    if (static_cast<int>(cr.size()) < params.min_per_class) {
      throw Error("ensemble training needs at least " + std::to_string(params.min_per_class) +
                  " samples per class");
    }
  }
  if (params.learner_step < 1 || params.max_learners < params.learner_step) {
    throw Error("invalid learner schedule");
  }

  EnsembleModel base;
  base.descriptor = descriptor;
  base.seed = seed;
  base.mean = features.colwise().mean();
  base.scale = ((features.rowwise() - base.mean).array().square().colwise().sum() /
                static_cast<double>(n))
                   .sqrt()
                   .matrix();
  for (Eigen::Index j = 0; j < d; ++j) {
    if (!(base.scale(j) > 0.0)) base.scale(j) = 1.0;
  }
  const Eigen::MatrixXd z = base.standardize(features);

  const auto grid = params.d_sub_grid.empty() ? default_d_sub_grid(d, n) : params.d_sub_grid;
  EnsembleTraining best;
  best.oob_error = std::numeric_limits<double>::infinity();

  for (const Eigen::Index d_sub : grid) {
    if (d_sub < 1 || d_sub > d) throw Error("subspace dimension outside [1, d]");
    const std::uint64_t grid_seed = mix_seed(seed, static_cast<std::uint64_t>(d_sub));
    std::vector<Trained> learners;
    // Per-sample OOB vote tallies, accumulated in learner order.
    Eigen::VectorXi adv_votes = Eigen::VectorXi::Zero(n), all_votes = Eigen::VectorXi::Zero(n);
    double prev_error = std::numeric_limits<double>::infinity();
    double best_here = std::numeric_limits<double>::infinity();
    int best_here_l = 0;

    while (static_cast<int>(learners.size()) < params.max_learners) {
      const std::size_t start = learners.size();
      learners.resize(start + static_cast<std::size_t>(params.learner_step));
      parallel_for(static_cast<std::size_t>(params.learner_step), params.jobs, [&](std::size_t t) {
        std::mt19937_64 eng(mix_seed(grid_seed, start + t));
        Trained tr;
        auto subspace = random_subspace(eng, d, d_sub);
        std::vector<Eigen::Index> rows;
        rows.reserve(static_cast<std::size_t>(n));
        tr.in_bag.assign(static_cast<std::size_t>(n), false);
        for (const auto& cr : class_rows) {
          for (std::size_t k = 0; k < cr.size(); ++k) {
            const Eigen::Index r = cr[uniform_index(eng, cr.size())];
            rows.push_back(r);
            tr.in_bag[static_cast<std::size_t>(r)] = true;
          }
        }
        tr.learner = fit_fld(z, labels, rows, subspace, params.reg);
        learners[start + t] = std::move(tr);
      });
      for (std::size_t t = start; t < learners.size(); ++t) {
        for (Eigen::Index i = 0; i < n; ++i) {
          if (learners[t].in_bag[static_cast<std::size_t>(i)]) continue;
          adv_votes(i) += learners[t].learner.vote(z.row(i));
          all_votes(i) += 1;
        }
      }
      double wrong = 0.0, counted = 0.0;
      for (Eigen::Index i = 0; i < n; ++i) {
        if (all_votes(i) == 0) continue;
        const int label = 2 * adv_votes(i) >= all_votes(i) ? kAdversarial : kNormal;
        wrong += label != labels(i);
        counted += 1.0;
      }
      const double error = counted > 0.0 ? wrong / counted : 1.0;
      const int L = static_cast<int>(learners.size());
      best.curve.push_back({d_sub, L, error});
      if (error < best_here) {
        best_here = error;
        best_here_l = L;
      }
      if (L >= 2 * params.learner_step && prev_error - error < params.min_improvement) break;
      prev_error = error;
    }

    if (best_here < best.oob_error) {
      best.oob_error = best_here;
      best.model = base;
      best.model.d_sub = d_sub;
      best.masks.resize(n, best_here_l);
      for (int l = 0; l < best_here_l; ++l) {
        best.model.learners.push_back(learners[static_cast<std::size_t>(l)].learner);
        for (Eigen::Index i = 0; i < n; ++i) {
          best.masks(i, l) = learners[static_cast<std::size_t>(l)].in_bag[static_cast<std::size_t>(i)];
        }
      }
    }
  }
  best.model.validate();
  return best;
}

Prediction predict(const EnsembleModel& model, const Eigen::Ref<const Eigen::RowVectorXd>& x) {
  if (x.size() != model.dimension()) {
    throw Error("feature dimension " + std::to_string(x.size()) +
                " does not match detector dimension " + std::to_string(model.dimension()));
  }
  const Eigen::RowVectorXd z = (x - model.mean).array() / model.scale.array();
  int adv = 0;
  for (const auto& l : model.learners) adv += l.vote(z);
  const int total = static_cast<int>(model.learners.size());
  Prediction p;
  p.label = 2 * adv >= total ? kAdversarial : kNormal;
  p.vote_fraction = static_cast<double>(p.label == kAdversarial ? adv : total - adv) / total;
  return p;
}

std::vector<Prediction> predict_all(const EnsembleModel& model, const Eigen::MatrixXd& features) {
  std::vector<Prediction> out;
  out.reserve(static_cast<std::size_t>(features.rows()));
  for (Eigen::Index i = 0; i < features.rows(); ++i) out.push_back(predict(model, features.row(i)));
  return out;
}

OobEstimate oob_error(const EnsembleModel& model, const Eigen::MatrixXd& features,
                      const Eigen::VectorXi& labels, const BootstrapMasks& masks) {
  check_labels(labels, features.rows());
  if (masks.rows() != features.rows() || masks.cols() != model.size()) {
    throw Error("bootstrap masks do not match samples x learners");
  }
  const Eigen::MatrixXd z = model.standardize(features);
  OobEstimate est;
  double wrong = 0.0, counted = 0.0;
  for (Eigen::Index i = 0; i < z.rows(); ++i) {
    int adv = 0, total = 0;
    for (Eigen::Index l = 0; l < model.size(); ++l) {
      if (masks(i, l)) continue;
      adv += model.learners[static_cast<std::size_t>(l)].vote(z.row(i));
      ++total;
    }
    if (total == 0) {
      ++est.skipped;
      continue;
    }
    wrong += (2 * adv >= total ? kAdversarial : kNormal) != labels(i);
    counted += 1.0;
  }
  if (counted == 0.0) throw Error("no sample has out-of-bag votes");
  est.error = wrong / counted;
  return est;
}

void save_ensemble(const EnsembleModel& model, const std::filesystem::path& file) {
  model.validate();
  std::ofstream os(file, std::ios::binary);
  if (!os) throw Error("cannot write detector " + file.string());
  os.write(kModelMagic, sizeof(kModelMagic) - 1);
  io::write_le<std::uint32_t>(os, kModelVersion);
  io::write_string(os, model.descriptor);
  io::write_le<std::uint64_t>(os, static_cast<std::uint64_t>(model.dimension()));
  for (Eigen::Index j = 0; j < model.dimension(); ++j) io::write_le<double>(os, model.mean(j));
  for (Eigen::Index j = 0; j < model.dimension(); ++j) io::write_le<double>(os, model.scale(j));
  io::write_le<std::uint64_t>(os, static_cast<std::uint64_t>(model.d_sub));
  io::write_le<std::uint64_t>(os, static_cast<std::uint64_t>(model.size()));
  io::write_le<std::uint64_t>(os, model.seed);
  for (const auto& l : model.learners) {
    for (const Eigen::Index c : l.subspace) io::write_le<std::uint64_t>(os, static_cast<std::uint64_t>(c));
    for (Eigen::Index t = 0; t < l.w.size(); ++t) io::write_le<double>(os, l.w(t));
    io::write_le<double>(os, l.b);
  }
  if (!os) throw Error("failed writing detector " + file.string());
}

EnsembleModel load_ensemble(const std::filesystem::path& file) {
  std::ifstream is(file, std::ios::binary);
  if (!is) throw Error("cannot open detector " + file.string());
  io::expect_magic(is, kModelMagic);
  if (io::read_le<std::uint32_t>(is) != kModelVersion) throw Error("unsupported detector version");
  EnsembleModel m;
  m.descriptor = io::read_string(is);
  const auto dim = io::read_le<std::uint64_t>(is);
  if (dim == 0 || dim > (1ULL << 24)) throw Error("implausible detector dimension");
  m.mean.resize(static_cast<Eigen::Index>(dim));
  m.scale.resize(static_cast<Eigen::Index>(dim));
  for (Eigen::Index j = 0; j < m.mean.size(); ++j) m.mean(j) = io::read_le<double>(is);
  for (Eigen::Index j = 0; j < m.scale.size(); ++j) m.scale(j) = io::read_le<double>(is);
  m.d_sub = static_cast<Eigen::Index>(io::read_le<std::uint64_t>(is));
  const auto count = io::read_le<std::uint64_t>(is);
  m.seed = io::read_le<std::uint64_t>(is);
  if (m.d_sub < 1 || static_cast<std::uint64_t>(m.d_sub) > dim || count == 0 || count > 100000) {
    throw Error("implausible detector header");
  }
  for (std::uint64_t k = 0; k < count; ++k) {
    BaseLearner l;
    l.subspace.resize(static_cast<std::size_t>(m.d_sub));
    for (auto& c : l.subspace) c = static_cast<Eigen::Index>(io::read_le<std::uint64_t>(is));
    l.w.resize(m.d_sub);
    for (Eigen::Index t = 0; t < m.d_sub; ++t) l.w(t) = io::read_le<double>(is);
    l.b = io::read_le<double>(is);
    m.learners.push_back(std::move(l));
  }
  m.validate();
  return m;
}

}  // namespace stegdet
