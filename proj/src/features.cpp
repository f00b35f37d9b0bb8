#include "stegdet/features.hpp"

#include <cstdio>
#include <fstream>

#include "stegdet/common.hpp"

namespace stegdet {

namespace {
constexpr char kStoreMagic[] = "SDFEAT01";
}

void save_feature_store(const FeatureStore& store, const std::filesystem::path& file) {
  std::ofstream os(file, std::ios::binary);
  if (!os) throw Error("cannot write feature store " + file.string());
  os.write(kStoreMagic, sizeof(kStoreMagic) - 1);
  io::write_string(os, store.descriptor);
  io::write_le<std::uint64_t>(os, static_cast<std::uint64_t>(store.dimension()));
  io::write_le<std::uint64_t>(os, static_cast<std::uint64_t>(store.size()));
  for (Eigen::Index i = 0; i < store.rows.rows(); ++i) {
    for (Eigen::Index j = 0; j < store.rows.cols(); ++j) io::write_le<double>(os, store.rows(i, j));
  }
  if (!os) throw Error("failed writing feature store " + file.string());
}

FeatureStore load_feature_store(const std::filesystem::path& file) {
  std::ifstream is(file, std::ios::binary);
  if (!is) throw Error("cannot open feature store " + file.string());
  io::expect_magic(is, kStoreMagic);
  FeatureStore store;
  store.descriptor = io::read_string(is);
  const auto dim = io::read_le<std::uint64_t>(is);
  const auto n = io::read_le<std::uint64_t>(is);
  if (dim > (1ULL << 24) || n > (1ULL << 24)) throw Error("implausible feature store header");
  store.rows.resize(static_cast<Eigen::Index>(n), static_cast<Eigen::Index>(dim));
  for (Eigen::Index i = 0; i < store.rows.rows(); ++i) {
    for (Eigen::Index j = 0; j < store.rows.cols(); ++j) store.rows(i, j) = io::read_le<double>(is);
  }
  return store;
}

void export_feature_csv(const FeatureStore& store, const std::filesystem::path& file) {
  std::ofstream os(file);
  if (!os) throw Error("cannot write " + file.string());
  char buf[32];
  for (Eigen::Index i = 0; i < store.rows.rows(); ++i) {
    for (Eigen::Index j = 0; j < store.rows.cols(); ++j) {
      std::snprintf(buf, sizeof buf, "%.17g", store.rows(i, j));
      os << (j ? "," : "") << buf;
    }
    os << '\n';
  }
}

FeatureStore make_feature_store(const std::vector<FeatureVector>& vectors) {
  FeatureStore store;
  if (vectors.empty()) return store;
  store.descriptor = vectors.front().descriptor;
  const Eigen::Index dim = vectors.front().values.size();
  store.rows.resize(static_cast<Eigen::Index>(vectors.size()), dim);
  for (std::size_t i = 0; i < vectors.size(); ++i) {
    if (vectors[i].descriptor != store.descriptor || vectors[i].values.size() != dim) {
      throw Error("feature vectors disagree on descriptor or dimension");
    }
    store.rows.row(static_cast<Eigen::Index>(i)) = vectors[i].values.transpose();
  }
  return store;
}

}  // namespace stegdet
