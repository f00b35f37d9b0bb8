#ifndef STEGDET_FEATURES_HPP
#define STEGDET_FEATURES_HPP

#include <filesystem>
#include <string>
#include <vector>

#include <Eigen/Dense>

#include "stegdet/common.hpp"

namespace stegdet {

/// A feature vector tagged with the descriptor that produced it, e.g.
/// "spam-o2-T3". Vectors with different descriptors are not comparable.
struct FeatureVector {
  std::string descriptor;
  Eigen::VectorXd values;
};

/// Row-major table of feature vectors sharing one descriptor.
struct FeatureStore {
  std::string descriptor;
  Eigen::MatrixXd rows;  // n_rows x dimension

  Eigen::Index dimension() const { return rows.cols(); }
  Eigen::Index size() const { return rows.rows(); }
};

/// Binary layout: magic "SDFEAT01", u32 descriptor length, descriptor
/// bytes, u64 dimension, u64 row count, then row-major float64, all
/// little-endian.
void save_feature_store(const FeatureStore& store, const std::filesystem::path& file);
FeatureStore load_feature_store(const std::filesystem::path& file);

/// One row per line, comma separated, full double precision.
void export_feature_csv(const FeatureStore& store, const std::filesystem::path& file);

/// Stacks vectors; throws on mixed descriptors or dimensions.
FeatureStore make_feature_store(const std::vector<FeatureVector>& vectors);

}  // namespace stegdet

#endif  // STEGDET_FEATURES_HPP
