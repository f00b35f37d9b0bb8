#ifndef STEGDET_CORPUS_HPP
#define STEGDET_CORPUS_HPP

#include <array>
#include <cstdint>
#include <filesystem>
#include <string>
#include <vector>

#include <Eigen/Dense>

#include "stegdet/common.hpp"

namespace stegdet {

using PixelMatrix =
    Eigen::Matrix<std::uint8_t, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;

/// An 8-bit grayscale image. Row i, column j is pixel X_{i,j}; height is the
/// row count and width the column count. The uint8 storage enforces the
/// [0,255] range.
struct GrayImage {
  PixelMatrix pixels;

  GrayImage() = default;
  GrayImage(Eigen::Index height, Eigen::Index width)
      : pixels(PixelMatrix::Zero(height, width)) {}
  explicit GrayImage(PixelMatrix p) : pixels(std::move(p)) {}

  Eigen::Index height() const { return pixels.rows(); }
  Eigen::Index width() const { return pixels.cols(); }
  Eigen::Index size() const { return pixels.size(); }

  std::uint8_t operator()(Eigen::Index i, Eigen::Index j) const {
    return pixels(i, j);
  }
  std::uint8_t& operator()(Eigen::Index i, Eigen::Index j) {
    return pixels(i, j);
  }

  /// Pixels as reals, same layout.
  Eigen::MatrixXd as_real() const { return pixels.cast<double>(); }

  /// Round-half-away-from-zero and clamp a real matrix into an image.
  static GrayImage from_real(const Eigen::MatrixXd& values);

  friend bool operator==(const GrayImage& a, const GrayImage& b) {
    return a.pixels.rows() == b.pixels.rows() &&
           a.pixels.cols() == b.pixels.cols() && a.pixels == b.pixels;
  }
};

/// BT.601 luma, rounded and clamped.
std::uint8_t to_grayscale(int r, int g, int b);

/// Reads a binary PGM (P5) or PPM (P6, converted through to_grayscale)
/// with maxval 255.
GrayImage load_image(const std::filesystem::path& path);

/// Writes a binary P5 PGM.
void save_image(const GrayImage& img, const std::filesystem::path& path);

enum class Role { train, val, test };

std::string to_string(Role r);
Role role_from_string(const std::string& s);

struct ManifestEntry {
  std::string path;  // relative to the manifest's directory
  int label = 0;
  Role role = Role::train;
};

struct DatasetManifest {
  std::uint64_t seed = 0;
  std::vector<ManifestEntry> entries;
  std::filesystem::path root;  // directory holding the manifest; not serialized

  std::filesystem::path resolve(const ManifestEntry& e) const {
    return root / e.path;
  }
  std::vector<std::size_t> indices(Role r) const;
  int n_classes() const;
};

void save_manifest(const DatasetManifest& m, const std::filesystem::path& file);
DatasetManifest load_manifest(const std::filesystem::path& file);

/// Throws if paths are duplicated or any role is absent when expected.
void validate_manifest(const DatasetManifest& m);

struct CorpusParams {
  std::size_t n_images = 800;
  int size = 128;
  int n_classes = 2;
  std::uint64_t seed = 1;
};

/// Synthesizes image `index` of a corpus. Pure function of its arguments.
GrayImage synthesize_image(const CorpusParams& params, std::size_t index,
                           int label);

/// Writes n_images PGMs plus manifest.json into out_dir and returns the
/// manifest. Labels cycle through the classes; roles are assigned by a
/// seeded permutation with a 62.5/12.5/25 train/val/test split.
DatasetManifest gen_synthetic_corpus(const CorpusParams& params,
                                     const std::filesystem::path& out_dir,
                                     int jobs = 1);

/// Split sizes (train, val, test) for n items.
std::array<std::size_t, 3> split_counts(std::size_t n);

}  // namespace stegdet

#endif  // STEGDET_CORPUS_HPP
