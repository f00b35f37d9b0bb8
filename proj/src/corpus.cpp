#include "stegdet/corpus.hpp"

#include <cmath>
#include <fstream>
#include <numbers>
#include <random>
#include <set>
#include <sstream>

#include "json.hpp"
#include "stegdet/common.hpp"

namespace stegdet {

namespace fs = std::filesystem;

GrayImage GrayImage::from_real(const Eigen::MatrixXd& values) {
  GrayImage img(values.rows(), values.cols());
  for (Eigen::Index i = 0; i < values.rows(); ++i) {
    for (Eigen::Index j = 0; j < values.cols(); ++j) {
      const double v = values(i, j);
      if (!std::isfinite(v)) throw Error("non-finite pixel value");
      img(i, j) = static_cast<std::uint8_t>(std::clamp(std::round(v), 0.0, 255.0));
    }
  }
  return img;
}

std::uint8_t to_grayscale(int r, int g, int b) {
  const double y = 0.299 * r + 0.587 * g + 0.114 * b;
  return static_cast<std::uint8_t>(std::clamp(std::round(y), 0.0, 255.0));
}

namespace {

// Next header token of a PNM file, skipping whitespace and '#' comments.
std::string pnm_token(std::istream& is) {
  std::string tok;
  int c;
  while ((c = is.get()) != EOF) {
    if (c == '#') {
      while ((c = is.get()) != EOF && c != '\n') {
      }
      continue;
    }
    if (std::isspace(c)) {
      if (!tok.empty()) break;
      continue;
    }
    tok.push_back(static_cast<char>(c));
  }
  if (tok.empty()) throw Error("malformed PNM header");
  return tok;
}

long pnm_number(std::istream& is) {
  const std::string tok = pnm_token(is);
  std::size_t used = 0;
  long v = 0;
  try {
    v = std::stol(tok, &used);
  } catch (const std::exception&) {
    throw Error("malformed PNM header field '" + tok + "'");
  }
  if (used != tok.size()) throw Error("malformed PNM header field '" + tok + "'");
  return v;
}

}  // namespace

GrayImage load_image(const fs::path& path) {
  std::ifstream is(path, std::ios::binary);
  if (!is) throw Error("cannot open image " + path.string());
  const std::string magic = pnm_token(is);
  if (magic != "P5" && magic != "P6") {
    throw Error("unsupported image format '" + magic + "' in " + path.string());
  }
  const long width = pnm_number(is);
  const long height = pnm_number(is);
  const long maxval = pnm_number(is);
  if (width <= 0 || height <= 0) {
    throw Error("non-positive image dimension in " + path.string());
  }
  if (maxval != 255) throw Error("only maxval 255 is supported: " + path.string());
  // pnm_token consumed exactly one whitespace byte after maxval.
  const int channels = magic == "P5" ? 1 : 3;
  std::vector<unsigned char> raw(static_cast<std::size_t>(width * height * channels));
  if (!is.read(reinterpret_cast<char*>(raw.data()),
               static_cast<std::streamsize>(raw.size()))) {
    throw Error("truncated pixel data in " + path.string());
  }
  GrayImage img(height, width);
  for (long i = 0; i < height; ++i) {
    for (long j = 0; j < width; ++j) {
      const std::size_t k = static_cast<std::size_t>((i * width + j) * channels);
      img(i, j) = channels == 1 ? raw[k] : to_grayscale(raw[k], raw[k + 1], raw[k + 2]);
    }
  }
  return img;
}

void save_image(const GrayImage& img, const fs::path& path) {
  if (img.size() == 0) throw Error("refusing to write an empty image");
  std::ofstream os(path, std::ios::binary);
  if (!os) throw Error("cannot write image " + path.string());
  os << "P5\n" << img.width() << ' ' << img.height() << "\n255\n";
  os.write(reinterpret_cast<const char*>(img.pixels.data()),
           static_cast<std::streamsize>(img.size()));
  if (!os) throw Error("failed writing image " + path.string());
}

std::string to_string(Role r) {
  switch (r) {
    case Role::train: return "train";
    case Role::val: return "val";
    case Role::test: return "test";
  }
  return "?";
}

Role role_from_string(const std::string& s) {
  if (s == "train") return Role::train;
  if (s == "val") return Role::val;
  if (s == "test") return Role::test;
  throw Error("unknown role '" + s + "'");
}

std::vector<std::size_t> DatasetManifest::indices(Role r) const {
  std::vector<std::size_t> out;
  for (std::size_t i = 0; i < entries.size(); ++i) {
    if (entries[i].role == r) out.push_back(i);
  }
  return out;
}

int DatasetManifest::n_classes() const {
  int n = 0;
  for (const auto& e : entries) n = std::max(n, e.label + 1);
  return n;
}

void save_manifest(const DatasetManifest& m, const fs::path& file) {
  nlohmann::ordered_json j;
  j["seed"] = m.seed;
  j["entries"] = nlohmann::ordered_json::array();
  for (const auto& e : m.entries) {
    j["entries"].push_back({{"path", e.path}, {"label", e.label}, {"role", to_string(e.role)}});
  }
  std::ofstream os(file);
  if (!os) throw Error("cannot write manifest " + file.string());
  os << j.dump(1) << '\n';
}

DatasetManifest load_manifest(const fs::path& file) {
  std::ifstream is(file);
  if (!is) throw Error("cannot open manifest " + file.string());
  DatasetManifest m;
  try {
    const auto j = nlohmann::json::parse(is);
    m.seed = j.at("seed").get<std::uint64_t>();
    for (const auto& e : j.at("entries")) {
      m.entries.push_back({e.at("path").get<std::string>(), e.at("label").get<int>(),
                           role_from_string(e.at("role").get<std::string>())});
    }
  } catch (const nlohmann::json::exception& ex) {
    throw Error("malformed manifest " + file.string() + ": " + ex.what());
  }
  m.root = file.parent_path();
  validate_manifest(m);
  return m;
}

void validate_manifest(const DatasetManifest& m) {
  std::set<std::string> seen;
  for (const auto& e : m.entries) {
    if (!seen.insert(e.path).second) throw Error("duplicate manifest path " + e.path);
    if (e.label < 0) throw Error("negative label for " + e.path);
  }
}

std::array<std::size_t, 3> split_counts(std::size_t n) {
  const auto train = static_cast<std::size_t>(std::llround(0.625 * static_cast<double>(n)));
  const auto val = static_cast<std::size_t>(std::llround(0.125 * static_cast<double>(n)));
  return {train, val, n - train - val};
}

GrayImage synthesize_image(const CorpusParams& params, std::size_t index, int label) {
  constexpr double kNoiseHalfWidth = 24.0;
  constexpr double kTextureAmplitude = 20.0;
  constexpr double kTexturePeriod = 24.0;
  constexpr double kMaxOffset = 30.0;
  const int n = params.size;

  std::mt19937_64 eng(mix_seed(params.seed, index));
  const double phase = uniform01(eng) * std::numbers::pi / 2.0;
  const double offset = (2.0 * uniform01(eng) - 1.0) * kMaxOffset;
  Eigen::MatrixXd noise(n + 2, n + 2);
  for (Eigen::Index i = 0; i < noise.rows(); ++i) {
    for (Eigen::Index j = 0; j < noise.cols(); ++j) {
      noise(i, j) = (2.0 * uniform01(eng) - 1.0) * kNoiseHalfWidth;
    }
  }

  const double theta = label * std::numbers::pi / params.n_classes;
  const double kx = 2.0 * std::numbers::pi * std::cos(theta) / kTexturePeriod;
  const double ky = 2.0 * std::numbers::pi * std::sin(theta) / kTexturePeriod;
  Eigen::MatrixXd img(n, n);
  for (int i = 0; i < n; ++i) {
    for (int j = 0; j < n; ++j) {
      const double box = noise.block(i, j, 3, 3).sum() / 9.0;
      img(i, j) = 128.0 + offset + kTextureAmplitude * std::sin(kx * j + ky * i + phase) + box;
    }
  }
  return GrayImage::from_real(img);
}

DatasetManifest gen_synthetic_corpus(const CorpusParams& params, const fs::path& out_dir,
                                     int jobs) {
  if (params.size < 64) throw Error("corpus image size must be at least 64");
  if (params.n_classes < 2) throw Error("corpus needs at least 2 classes");
  std::error_code ec;
  fs::create_directories(out_dir, ec);
  if (ec || !fs::is_directory(out_dir)) {
    throw Error("cannot create output directory " + out_dir.string());
  }

  DatasetManifest m;
  m.seed = params.seed;
  m.root = out_dir;
  m.entries.resize(params.n_images);

  std::vector<std::size_t> order(params.n_images);
  for (std::size_t i = 0; i < order.size(); ++i) order[i] = i;
  std::mt19937_64 split_eng(mix_seed(~params.seed, 0));
  for (std::size_t i = order.size(); i > 1; --i) {
    std::swap(order[i - 1], order[uniform_index(split_eng, i)]);
  }
  const auto counts = split_counts(params.n_images);
  for (std::size_t r = 0; r < order.size(); ++r) {
    const std::size_t i = order[r];
    auto& e = m.entries[i];
    char name[32];
    std::snprintf(name, sizeof name, "img_%05zu.pgm", i);
    e.path = name;
    e.label = static_cast<int>(i % static_cast<std::size_t>(params.n_classes));
    e.role = r < counts[0] ? Role::train : (r < counts[0] + counts[1] ? Role::val : Role::test);
  }

  parallel_for(params.n_images, jobs, [&](std::size_t i) {
    save_image(synthesize_image(params, i, m.entries[i].label), out_dir / m.entries[i].path);
  });
  save_manifest(m, out_dir / "manifest.json");
  return m;
}

}  // namespace stegdet
