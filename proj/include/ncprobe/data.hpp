#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <filesystem>
#include <map>
#include <set>
#include <stdexcept>
#include <string>
#include <vector>

#include <json.hpp>

#include "ncprobe/checkpoint.hpp"
#include "ncprobe/rng.hpp"
#include "ncprobe/tensor.hpp"

namespace ncprobe {

class DatasetError : public std::invalid_argument {
 public:
  using std::invalid_argument::invalid_argument;
};

class ParseError : public std::runtime_error {
 public:
  ParseError(const std::string& file, const std::string& what, std::size_t offset)
      : std::runtime_error(file + ": " + what + " at byte " + std::to_string(offset)), offset(offset) {}
  std::size_t offset;
};

struct Provenance {
  std::string source;
  double noise_fraction = 0.0;
  std::uint64_t seed = 0;
  std::uint64_t noise_seed = 0;
  std::string noise_mode = "uniform-excluding-true";
};

// Labeled samples with class-conditional structure S = ∪_c S_c. Balance
// (|S_c| = m0 for every c) is checked on clean_labels; `labels` are what the
// model is trained on and may carry injected noise. Labels are 0-based.
struct Dataset {
  Tensor inputs;  // [m x sample_shape...]
  std::vector<int> labels;
  std::vector<int> clean_labels;
  std::size_t classes = 0;
  std::vector<std::vector<std::size_t>> per_class_index;  // by clean label
  Provenance provenance;

  std::size_t size() const { return labels.size(); }
  std::size_t m0() const { return per_class_index.empty() ? 0 : per_class_index[0].size(); }
  Shape sample_shape() const { return Shape(inputs.shape().begin() + 1, inputs.shape().end()); }
  std::size_t input_dim() const { return inputs.row_width(); }

  Dataset subset(std::span<const std::size_t> idx) const;
};

inline std::vector<std::vector<std::size_t>> index_by_class(std::span<const int> labels, std::size_t classes) {
  std::vector<std::vector<std::size_t>> out(classes);
  for (std::size_t i = 0; i < labels.size(); ++i) {
    if (labels[i] < 0 || static_cast<std::size_t>(labels[i]) >= classes)
      throw DatasetError("label " + std::to_string(labels[i]) + " outside [0, " + std::to_string(classes) + ")");
    out[static_cast<std::size_t>(labels[i])].push_back(i);
  }
  return out;
}

inline Dataset make_dataset(Tensor inputs, std::vector<int> labels, std::size_t classes, Provenance prov) {
  if (inputs.rank() < 2 || inputs.dim(0) != labels.size())
    throw DatasetError("inputs and labels disagree on sample count");
  if (classes < 1) throw DatasetError("dataset needs at least one class");
  Dataset d;
  d.per_class_index = index_by_class(labels, classes);
  const std::size_t m0 = d.per_class_index[0].size();
  for (std::size_t c = 0; c < classes; ++c)
    if (d.per_class_index[c].size() != m0)
      throw DatasetError("unbalanced dataset: class " + std::to_string(c) + " has " +
                         std::to_string(d.per_class_index[c].size()) + " samples, class 0 has " + std::to_string(m0));
  d.inputs = std::move(inputs);
  d.labels = labels;
  d.clean_labels = std::move(labels);
  d.classes = classes;
  d.provenance = std::move(prov);
  return d;
}

inline Dataset Dataset::subset(std::span<const std::size_t> idx) const {
  Dataset d;
  d.inputs = inputs.gather_rows(idx);
  for (auto i : idx) {
    d.labels.push_back(labels[i]);
    d.clean_labels.push_back(clean_labels[i]);
  }
  d.classes = classes;
  d.per_class_index = index_by_class(d.clean_labels, classes);
  d.provenance = provenance;
  return d;
}

// Concatenation; the union keeps clean-label bookkeeping but need not be balanced
// in its (possibly noisy) training labels.
inline Dataset concat(const Dataset& a, const Dataset& b) {
  if (a.classes != b.classes || a.sample_shape() != b.sample_shape())
    throw DatasetError("cannot concatenate datasets with different classes or sample shapes");
  Dataset d;
  Shape s = a.inputs.shape();
  s[0] = a.size() + b.size();
  std::vector<double> buf(a.inputs.vec());
  buf.insert(buf.end(), b.inputs.vec().begin(), b.inputs.vec().end());
  d.inputs = Tensor(std::move(s), std::move(buf));
  d.labels = a.labels;
  d.labels.insert(d.labels.end(), b.labels.begin(), b.labels.end());
  d.clean_labels = a.clean_labels;
  d.clean_labels.insert(d.clean_labels.end(), b.clean_labels.begin(), b.clean_labels.end());
  d.classes = a.classes;
  d.per_class_index = index_by_class(d.clean_labels, d.classes);
  d.provenance = a.provenance;
  d.provenance.source = a.provenance.source + "+" + b.provenance.source;
  d.provenance.noise_fraction = std::max(a.provenance.noise_fraction, b.provenance.noise_fraction);
  return d;
}

// ---------------------------------------------------------------------------
// IDX files (big-endian headers, unsigned byte payload).

inline constexpr std::uint32_t kIdxImagesMagic = 0x00000803;
inline constexpr std::uint32_t kIdxLabelsMagic = 0x00000801;

namespace detail {

inline std::uint32_t be32(std::span<const std::uint8_t> b, std::size_t off, const std::string& file) {
  if (b.size() < off + 4) throw ParseError(file, "truncated header", b.size());
  return (std::uint32_t{b[off]} << 24) | (std::uint32_t{b[off + 1]} << 16) | (std::uint32_t{b[off + 2]} << 8) |
         std::uint32_t{b[off + 3]};
}

inline void put_be32(std::vector<std::uint8_t>& out, std::uint32_t v) {
  for (int s = 24; s >= 0; s -= 8) out.push_back(static_cast<std::uint8_t>(v >> s));
}

}  // namespace detail

struct IdxImages {
  std::size_t count = 0, rows = 0, cols = 0;
  std::vector<std::uint8_t> pixels;
};

inline IdxImages parse_idx_images(std::span<const std::uint8_t> b, const std::string& name = "images") {
  const auto magic = detail::be32(b, 0, name);
  if (magic != kIdxImagesMagic) throw ParseError(name, "bad magic for IDX images", 0);
  IdxImages im;
  im.count = detail::be32(b, 4, name);
  im.rows = detail::be32(b, 8, name);
  im.cols = detail::be32(b, 12, name);
  if (im.count == 0 || im.rows == 0 || im.cols == 0) throw ParseError(name, "zero dimension in IDX header", 4);
  const std::size_t need = 16 + im.count * im.rows * im.cols;
  if (b.size() < need) throw ParseError(name, "truncated pixel data (expected " + std::to_string(need) + " bytes)", b.size());
  if (b.size() > need) throw ParseError(name, "trailing bytes after pixel data", need);
  im.pixels.assign(b.begin() + 16, b.end());
  return im;
}

inline std::vector<std::uint8_t> parse_idx_labels(std::span<const std::uint8_t> b, const std::string& name = "labels") {
  const auto magic = detail::be32(b, 0, name);
  if (magic != kIdxLabelsMagic) throw ParseError(name, "bad magic for IDX labels", 0);
  const std::size_t n = detail::be32(b, 4, name);
  if (b.size() < 8 + n) throw ParseError(name, "truncated label data (expected " + std::to_string(8 + n) + " bytes)", b.size());
  if (b.size() > 8 + n) throw ParseError(name, "trailing bytes after label data", 8 + n);
  return {b.begin() + 8, b.end()};
}

inline std::vector<std::uint8_t> encode_idx_images(const IdxImages& im) {
  std::vector<std::uint8_t> out;
  detail::put_be32(out, kIdxImagesMagic);
  detail::put_be32(out, static_cast<std::uint32_t>(im.count));
  detail::put_be32(out, static_cast<std::uint32_t>(im.rows));
  detail::put_be32(out, static_cast<std::uint32_t>(im.cols));
  out.insert(out.end(), im.pixels.begin(), im.pixels.end());
  return out;
}

inline std::vector<std::uint8_t> encode_idx_labels(std::span<const std::uint8_t> labels) {
  std::vector<std::uint8_t> out;
  detail::put_be32(out, kIdxLabelsMagic);
  detail::put_be32(out, static_cast<std::uint32_t>(labels.size()));
  out.insert(out.end(), labels.begin(), labels.end());
  return out;
}

// Builds a balanced dataset of [m, 1, rows, cols] images scaled to [0, 1].
// classes == 0 infers C as the number of distinct label values; any label
// >= C is then out of range. Classes are truncated to the smallest class count,
// keeping first occurrences in file order.
inline Dataset dataset_from_idx(std::span<const std::uint8_t> image_bytes, std::span<const std::uint8_t> label_bytes,
                                std::size_t classes = 0, const std::string& source = "idx") {
  auto im = parse_idx_images(image_bytes, source + " images");
  auto lab = parse_idx_labels(label_bytes, source + " labels");
  if (lab.size() != im.count)
    throw ParseError(source + " labels", "label count " + std::to_string(lab.size()) + " does not match image count " +
                                             std::to_string(im.count), 4);
  if (classes == 0) classes = std::set<std::uint8_t>(lab.begin(), lab.end()).size();
  for (std::size_t i = 0; i < lab.size(); ++i)
    if (lab[i] >= classes)
      throw ParseError(source + " labels",
                       "label " + std::to_string(lab[i]) + " out of range for " + std::to_string(classes) + " classes",
                       8 + i);
  std::vector<std::size_t> counts(classes, 0);
  for (auto l : lab) counts[l]++;
  const std::size_t m0 = *std::min_element(counts.begin(), counts.end());
  if (m0 == 0) throw DatasetError(source + ": some class has no samples");
  std::vector<std::size_t> keep;
  std::vector<std::size_t> taken(classes, 0);
  for (std::size_t i = 0; i < lab.size(); ++i)
    if (taken[lab[i]] < m0) {
      taken[lab[i]]++;
      keep.push_back(i);
    }
  const std::size_t px = im.rows * im.cols;
  Tensor x({keep.size(), 1, im.rows, im.cols});
  std::vector<int> y;
  for (std::size_t k = 0; k < keep.size(); ++k) {
    for (std::size_t j = 0; j < px; ++j) x[k * px + j] = im.pixels[keep[k] * px + j] / 255.0;
    y.push_back(lab[keep[k]]);
  }
  return make_dataset(std::move(x), std::move(y), classes, {source});
}

inline Dataset load_idx(const std::filesystem::path& images, const std::filesystem::path& labels,
                        std::size_t classes = 0) {
  return dataset_from_idx(read_file_bytes(images), read_file_bytes(labels), classes, images.filename().string());
}

// Inverse of dataset_from_idx for datasets whose pixels are k/255.
inline std::pair<std::vector<std::uint8_t>, std::vector<std::uint8_t>> encode_idx(const Dataset& d) {
  const auto s = d.sample_shape();
  IdxImages im;
  im.count = d.size();
  im.rows = s.size() >= 2 ? s[s.size() - 2] : 1;
  im.cols = s.back();
  for (double v : d.inputs.data()) im.pixels.push_back(static_cast<std::uint8_t>(std::lround(v * 255.0)));
  std::vector<std::uint8_t> lab(d.labels.begin(), d.labels.end());
  return {encode_idx_images(im), encode_idx_labels(lab)};
}

// ---------------------------------------------------------------------------
// Synthetic Gaussian mixture.

struct MixtureSpec {
  std::size_t classes = 5;
  std::size_t m0 = 200;
  std::size_t m0_test = 100;
  std::size_t dim = 20;
  double radius = 3.0;
  double sigma = 1.0;
};

// Class means uniform on the radius-r sphere (normalized Gaussians), then
// mean + sigma * N(0, I) per sample, class-major order. Means, train samples and
// test samples come from separate child generators so the train split does not
// depend on m0_test.
inline std::pair<Dataset, Dataset> synth_mixture_splits(const MixtureSpec& spec, const SeededRng& rng) {
  if (spec.classes < 2 || spec.dim < 2) throw DatasetError("synth_mixture needs C >= 2 and d >= 2");
  if (spec.m0 < 1) throw DatasetError("synth_mixture needs m0 >= 1");
  auto mean_rng = rng.child("means");
  Tensor means({spec.classes, spec.dim});
  for (std::size_t c = 0; c < spec.classes; ++c) {
    auto row = means.row(c);
    double norm = 0.0;
    for (auto& v : row) {
      v = mean_rng.normal();
      norm += v * v;
    }
    norm = std::sqrt(norm);
    for (auto& v : row) v *= spec.radius / norm;
  }
  auto draw = [&](SeededRng g, std::size_t m0, const std::string& tag) {
    Tensor x({spec.classes * m0, spec.dim});
    std::vector<int> y;
    for (std::size_t c = 0; c < spec.classes; ++c)
      for (std::size_t i = 0; i < m0; ++i) {
        auto r = x.row(c * m0 + i);
        auto mu = means.row(c);
        for (std::size_t j = 0; j < spec.dim; ++j) r[j] = mu[j] + spec.sigma * g.normal();
        y.push_back(static_cast<int>(c));
      }
    return make_dataset(std::move(x), std::move(y), spec.classes, {"mixture:" + tag, 0.0, rng.seed()});
  };
  Dataset train = draw(rng.child("train"), spec.m0, "train");
  Dataset test = spec.m0_test > 0 ? draw(rng.child("test"), spec.m0_test, "test") : Dataset{};
  return {std::move(train), std::move(test)};
}

inline Dataset synth_mixture(std::size_t classes, std::size_t m0, std::size_t dim, double radius, double sigma,
                             const SeededRng& rng) {
  return synth_mixture_splits({classes, m0, 0, dim, radius, sigma}, rng).first;
}

// ---------------------------------------------------------------------------
// Standardization.

struct Standardizer {
  Tensor mean;
  Tensor std;  // 1.0 where the raw std falls below the floor
  Dataset apply(Dataset d) const {
    const std::size_t p = d.input_dim();
    if (p != mean.size()) throw ShapeError("standardizer width mismatch", {p}, mean.shape());
    for (std::size_t i = 0; i < d.size(); ++i) {
      auto r = d.inputs.row(i);
      for (std::size_t j = 0; j < p; ++j) r[j] = (r[j] - mean[j]) / std[j];
    }
    return d;
  }
};

inline constexpr double kStdFloor = 1e-8;

// Per-coordinate mean 0 and population std 1 over this split.
inline Standardizer fit_standardizer(const Dataset& d) {
  if (d.size() < 2) throw DatasetError("standardize needs at least 2 samples");
  const std::size_t p = d.input_dim();
  const Tensor flat = d.inputs.reshaped({d.size(), p});
  auto mv = reduce_mean_var(flat);
  Tensor sd({p});
  for (std::size_t j = 0; j < p; ++j) {
    double ss = 0.0;
    for (std::size_t i = 0; i < d.size(); ++i) {
      const double v = flat.at(i, j) - mv.mean[j];
      ss += v * v;
    }
    const double s = std::sqrt(ss / static_cast<double>(d.size()));
    sd[j] = s < kStdFloor ? 1.0 : s;
  }
  return {std::move(mv.mean), std::move(sd)};
}

inline std::pair<Dataset, Standardizer> standardize(Dataset d) {
  auto st = fit_standardizer(d);
  return {st.apply(std::move(d)), st};
}

// ---------------------------------------------------------------------------
// Balanced splits and label noise.

struct SplitPair {
  Dataset first, second;
  std::vector<std::size_t> first_index, second_index;
};

// Two disjoint balanced subsets of m_each samples each, drawn per class
// uniformly without replacement. Indices are kept in ascending order.
inline SplitPair split_pair(const Dataset& d, std::size_t m_each, SeededRng& rng) {
  if (m_each == 0 || m_each % d.classes != 0)
    throw DatasetError("split size " + std::to_string(m_each) + " must be a positive multiple of C=" +
                       std::to_string(d.classes));
  const std::size_t per = m_each / d.classes;
  SplitPair out;
  for (std::size_t c = 0; c < d.classes; ++c) {
    const auto& idx = d.per_class_index[c];
    if (idx.size() < 2 * per)
      throw DatasetError("class " + std::to_string(c) + " has " + std::to_string(idx.size()) + " samples, split needs " +
                         std::to_string(2 * per));
    auto perm = permutation(rng, idx.size());
    for (std::size_t k = 0; k < per; ++k) {
      out.first_index.push_back(idx[perm[k]]);
      out.second_index.push_back(idx[perm[per + k]]);
    }
  }
  std::sort(out.first_index.begin(), out.first_index.end());
  std::sort(out.second_index.begin(), out.second_index.end());
  out.first = d.subset(out.first_index);
  out.second = d.subset(out.second_index);
  return out;
}

// Balanced train/test split taking the first m0_train samples of each class.
inline std::pair<Dataset, Dataset> split_head(const Dataset& d, std::size_t m0_train) {
  std::vector<std::size_t> a, b;
  for (std::size_t c = 0; c < d.classes; ++c) {
    const auto& idx = d.per_class_index[c];
    if (idx.size() <= m0_train) throw DatasetError("not enough samples per class for the requested train split");
    a.insert(a.end(), idx.begin(), idx.begin() + static_cast<long>(m0_train));
    b.insert(b.end(), idx.begin() + static_cast<long>(m0_train), idx.end());
  }
  std::sort(a.begin(), a.end());
  std::sort(b.begin(), b.end());
  return {d.subset(a), d.subset(b)};
}

struct NoiseSpec {
  double fraction = 0.0;
  std::uint64_t seed = 0;
};

struct NoisyDataset {
  Dataset data;
  std::vector<std::size_t> corrupted;  // ascending indices whose label changed
};

inline std::size_t noise_count(double fraction, std::size_t m) {
  // ceil(p*m) with a guard against p*m landing a hair above an integer.
  const double x = fraction * static_cast<double>(m);
  const double r = std::round(x);
  const auto n = static_cast<std::size_t>(std::abs(x - r) < 1e-9 ? r : std::ceil(x));
  return std::min(n, m);
}

// Exactly ceil(p*m) labels, chosen uniformly without replacement, each replaced by
// a uniform draw from the C-1 other classes.
inline NoisyDataset inject_noise(Dataset d, const NoiseSpec& spec) {
  if (spec.fraction < 0.0 || spec.fraction > 1.0) throw DatasetError("noise fraction must lie in [0, 1]");
  if (d.classes < 2 && spec.fraction > 0.0) throw DatasetError("label noise needs at least two classes");
  NoisyDataset out;
  const std::size_t m = d.size(), k = noise_count(spec.fraction, m);
  SeededRng rng(spec.seed);
  auto perm = permutation(rng, m);
  out.corrupted.assign(perm.begin(), perm.begin() + static_cast<long>(k));
  std::sort(out.corrupted.begin(), out.corrupted.end());
  for (auto i : out.corrupted) {
    const int truth = d.labels[i];
    int nl = static_cast<int>(rng.below(d.classes - 1));
    if (nl >= truth) ++nl;
    d.labels[i] = nl;
  }
  d.provenance.noise_fraction = spec.fraction;
  d.provenance.noise_seed = spec.seed;
  out.data = std::move(d);
  return out;
}

inline std::vector<double> label_histogram(std::span<const int> labels, std::size_t classes) {
  if (labels.empty()) throw DatasetError("label_histogram: no labels");
  std::vector<double> h(classes, 0.0);
  for (int l : labels) {
    if (l < 0 || static_cast<std::size_t>(l) >= classes)
      throw DatasetError("label " + std::to_string(l) + " outside [0, " + std::to_string(classes) + ")");
    h[static_cast<std::size_t>(l)] += 1.0;
  }
  for (auto& v : h) v /= static_cast<double>(labels.size());
  return h;
}

inline nlohmann::json dataset_manifest(const Dataset& d) {
  nlohmann::json j;
  j["source"] = d.provenance.source;
  j["C"] = d.classes;
  j["m0"] = d.m0();
  const auto s = d.sample_shape();
  if (s.size() == 1)
    j["d"] = s[0];
  else
    j["image_shape"] = s;
  j["noise_fraction"] = d.provenance.noise_fraction;
  j["noise_mode"] = d.provenance.noise_mode;
  j["seeds"] = {{"data", d.provenance.seed}, {"noise", d.provenance.noise_seed}};
  j["label_base"] = 1;
  return j;
}

}  // namespace ncprobe
