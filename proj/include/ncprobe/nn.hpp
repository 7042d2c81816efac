#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <limits>
#include <stdexcept>
#include <string>
#include <vector>

#include "ncprobe/rng.hpp"
#include "ncprobe/tensor.hpp"

namespace ncprobe {

enum class LayerKind : std::uint8_t {
  Linear = 1,
  Conv3x3 = 2,
  ConvStem2x2 = 3,
  BatchNorm = 4,
  ReLU = 5,
  Flatten = 6,
  OutputLinear = 7,
};

inline const char* kind_name(LayerKind k) {
  switch (k) {
    case LayerKind::Linear: return "linear";
    case LayerKind::Conv3x3: return "conv3x3";
    case LayerKind::ConvStem2x2: return "conv2x2s2";
    case LayerKind::BatchNorm: return "batchnorm";
    case LayerKind::ReLU: return "relu";
    case LayerKind::Flatten: return "flatten";
    case LayerKind::OutputLinear: return "output";
  }
  return "?";
}

class ConstructionError : public std::invalid_argument {
 public:
  using std::invalid_argument::invalid_argument;
};

// One layer of the stack. Which fields are meaningful depends on `kind`:
//  Linear/OutputLinear: in, out; weight [in x out], bias [out]
//  Conv*: in/out channels, kernel, stride, pad; weight [out x in x k x k], bias [out]
//  BatchNorm: out features (channels when spatial); weight = scale, bias = shift
struct Layer {
  LayerKind kind = LayerKind::ReLU;
  std::size_t in = 0;
  std::size_t out = 0;
  std::size_t kernel = 0;
  std::size_t stride = 1;
  std::size_t pad = 0;
  bool spatial = false;
  double eps = 1e-5;
  double momentum = 0.1;
  Tensor weight;
  Tensor bias;
  Tensor running_mean;
  Tensor running_var;

  bool has_params() const {
    return kind == LayerKind::Linear || kind == LayerKind::OutputLinear || kind == LayerKind::Conv3x3 ||
           kind == LayerKind::ConvStem2x2 || kind == LayerKind::BatchNorm;
  }

  bool operator==(const Layer&) const = default;
};

enum class ArchFamily { Mlp, Conv, Probe };

inline const char* family_name(ArchFamily f) {
  switch (f) {
    case ArchFamily::Mlp: return "mlp";
    case ArchFamily::Conv: return "conv";
    case ArchFamily::Probe: return "probe";
  }
  return "?";
}

// h = e ∘ g^L ∘ ... ∘ g^1 as a flat layer list. block_ends[i] is the index of the
// last layer of block i+1; head_index is the index of the OutputLinear.
struct Network {
  ArchFamily family = ArchFamily::Mlp;
  std::size_t depth = 0;
  std::size_t width = 0;
  std::size_t classes = 0;
  Shape input_shape;  // per-sample
  std::vector<Layer> layers;
  std::vector<std::size_t> block_ends;
  std::size_t head_index = 0;
  std::uint64_t seed = 0;

  bool has_batchnorm() const {
    return std::any_of(layers.begin(), layers.end(), [](const Layer& l) { return l.kind == LayerKind::BatchNorm; });
  }

  std::size_t parameter_count() const {
    std::size_t n = 0;
    for (const auto& l : layers)
      if (l.has_params()) n += l.weight.size() + l.bias.size();
    return n;
  }

  bool operator==(const Network&) const = default;
};

struct ParamRef {
  std::size_t layer;
  bool is_bias;
  Tensor* value;
};

// Trainable tensors in layer order: weight then bias of each parameterized layer.
inline std::vector<ParamRef> parameters(Network& net) {
  std::vector<ParamRef> out;
  for (std::size_t i = 0; i < net.layers.size(); ++i) {
    auto& l = net.layers[i];
    if (!l.has_params()) continue;
    out.push_back({i, false, &l.weight});
    out.push_back({i, true, &l.bias});
  }
  return out;
}

namespace detail {

inline Layer make_dense(LayerKind kind, std::size_t in, std::size_t out, SeededRng& rng) {
  Layer l;
  l.kind = kind;
  l.in = in;
  l.out = out;
  l.weight = gaussian(rng, {in, out});
  const double std = std::sqrt(2.0 / static_cast<double>(in));
  for (auto& w : l.weight.data()) w *= std;
  l.bias = Tensor({out});
  return l;
}

inline Layer make_conv(LayerKind kind, std::size_t cin, std::size_t cout, std::size_t k, std::size_t stride,
                       std::size_t pad, SeededRng& rng) {
  Layer l;
  l.kind = kind;
  l.in = cin;
  l.out = cout;
  l.kernel = k;
  l.stride = stride;
  l.pad = pad;
  l.weight = gaussian(rng, {cout, cin, k, k});
  const double std = std::sqrt(2.0 / static_cast<double>(cin * k * k));
  for (auto& w : l.weight.data()) w *= std;
  l.bias = Tensor({cout});
  return l;
}

inline Layer make_bn(std::size_t features, bool spatial) {
  Layer l;
  l.kind = LayerKind::BatchNorm;
  l.in = l.out = features;
  l.spatial = spatial;
  l.weight = Tensor({features}, 1.0);
  l.bias = Tensor({features}, 0.0);
  l.running_mean = Tensor({features}, 0.0);
  l.running_var = Tensor({features}, 1.0);
  return l;
}

inline Layer make_plain(LayerKind kind) {
  Layer l;
  l.kind = kind;
  return l;
}

}  // namespace detail

// MLP-L-H: L blocks of Linear -> BatchNorm -> ReLU, then a linear head.
inline Network build_mlp(std::size_t depth, std::size_t width, std::size_t input_dim, std::size_t classes,
                         SeededRng& rng) {
  if (depth < 1 || width < 1 || input_dim < 1 || classes < 1)
    throw ConstructionError("build_mlp: depth, width, input_dim and classes must be positive");
  Network net;
  net.family = ArchFamily::Mlp;
  net.depth = depth;
  net.width = width;
  net.classes = classes;
  net.input_shape = {input_dim};
  net.seed = rng.seed();
  std::size_t in = input_dim;
  for (std::size_t b = 0; b < depth; ++b) {
    net.layers.push_back(detail::make_dense(LayerKind::Linear, in, width, rng));
    net.layers.push_back(detail::make_bn(width, false));
    net.layers.push_back(detail::make_plain(LayerKind::ReLU));
    net.block_ends.push_back(net.layers.size() - 1);
    in = width;
  }
  net.layers.push_back(detail::make_dense(LayerKind::OutputLinear, width, classes, rng));
  net.head_index = net.layers.size() - 1;
  return net;
}

// Conv-L-H: a stride-2 stem (two 2x2 convs with BN, then ReLU) forms block 1,
// followed by L-1 blocks of 3x3 conv -> BN -> ReLU at H channels, then a linear head.
inline Network build_conv(std::size_t depth, std::size_t channels, const Shape& input, std::size_t classes,
                          SeededRng& rng) {
  if (depth < 1 || channels < 1 || classes < 1)
    throw ConstructionError("build_conv: depth, channels and classes must be positive");
  if (input.size() != 3 || input[0] < 1)
    throw ConstructionError("build_conv: input must be (channels, height, width)");
  if (input[1] < 4 || input[2] < 4)
    throw ConstructionError("build_conv: spatial extents must be at least 4, got " + shape_str(input));
  Network net;
  net.family = ArchFamily::Conv;
  net.depth = depth;
  net.width = channels;
  net.classes = classes;
  net.input_shape = input;
  net.seed = rng.seed();
  net.layers.push_back(detail::make_conv(LayerKind::ConvStem2x2, input[0], channels, 2, 2, 0, rng));
  net.layers.push_back(detail::make_bn(channels, true));
  net.layers.push_back(detail::make_conv(LayerKind::ConvStem2x2, channels, channels, 2, 2, 0, rng));
  net.layers.push_back(detail::make_bn(channels, true));
  net.layers.push_back(detail::make_plain(LayerKind::ReLU));
  net.block_ends.push_back(net.layers.size() - 1);
  for (std::size_t b = 1; b < depth; ++b) {
    net.layers.push_back(detail::make_conv(LayerKind::Conv3x3, channels, channels, 3, 1, 1, rng));
    net.layers.push_back(detail::make_bn(channels, true));
    net.layers.push_back(detail::make_plain(LayerKind::ReLU));
    net.block_ends.push_back(net.layers.size() - 1);
  }
  net.layers.push_back(detail::make_plain(LayerKind::Flatten));
  const std::size_t flat = channels * (input[1] / 4) * (input[2] / 4);
  net.layers.push_back(detail::make_dense(LayerKind::OutputLinear, flat, classes, rng));
  net.head_index = net.layers.size() - 1;
  return net;
}

// A bare linear classifier over p-dimensional features (no hidden blocks).
inline Network build_linear_probe(std::size_t features, std::size_t classes, SeededRng& rng) {
  if (features < 1 || classes < 1) throw ConstructionError("build_linear_probe: dimensions must be positive");
  Network net;
  net.family = ArchFamily::Probe;
  net.classes = classes;
  net.width = features;
  net.input_shape = {features};
  net.seed = rng.seed();
  net.layers.push_back(detail::make_dense(LayerKind::OutputLinear, features, classes, rng));
  net.head_index = 0;
  return net;
}

// Per-sample output shape after each layer, statically predicted.
inline std::vector<Shape> predicted_shapes(const Network& net) {
  std::vector<Shape> out;
  Shape s = net.input_shape;
  for (const auto& l : net.layers) {
    switch (l.kind) {
      case LayerKind::Linear:
      case LayerKind::OutputLinear: s = {l.out}; break;
      case LayerKind::Conv3x3:
      case LayerKind::ConvStem2x2:
        s = {l.out, (s[1] + 2 * l.pad - l.kernel) / l.stride + 1, (s[2] + 2 * l.pad - l.kernel) / l.stride + 1};
        break;
      case LayerKind::Flatten: s = {shape_numel(s)}; break;
      default: break;
    }
    out.push_back(s);
  }
  return out;
}

enum class Mode { Train, Eval };

struct ForwardTrace {
  std::vector<Tensor> features;  // block outputs f^i, each [n x p_i]
  Tensor logits;                 // [n x C]
};

namespace detail {

struct LayerCache {
  Tensor input;
  Tensor xhat;      // BatchNorm normalized input
  Tensor inv_std;   // BatchNorm per-feature 1/sqrt(var+eps)
};

inline Tensor with_batch(std::size_t n, const Shape& per_sample) {
  Shape s{n};
  s.insert(s.end(), per_sample.begin(), per_sample.end());
  return Tensor(std::move(s));
}

inline Tensor dense_forward(const Layer& l, const Tensor& x) {
  if (x.row_width() != l.in) throw ShapeError("linear layer input width mismatch", x.shape(), {l.in});
  Tensor x2 = x.rank() == 2 ? x : x.reshaped({x.dim(0), l.in});
  Tensor y = matmul(x2, l.weight);
  const std::size_t n = y.dim(0);
  for (std::size_t i = 0; i < n; ++i) {
    auto r = y.row(i);
    for (std::size_t j = 0; j < l.out; ++j) r[j] += l.bias[j];
  }
  return y;
}

inline Tensor conv_forward(const Layer& l, const Tensor& x) {
  if (x.rank() != 4 || x.dim(1) != l.in) throw ShapeError("conv layer input mismatch", x.shape(), {l.in});
  const std::size_t n = x.dim(0), cin = l.in, h = x.dim(2), w = x.dim(3), k = l.kernel, s = l.stride;
  const std::size_t ho = (h + 2 * l.pad - k) / s + 1, wo = (w + 2 * l.pad - k) / s + 1;
  Tensor y({n, l.out, ho, wo});
  const double* px = x.data().data();
  const double* pw = l.weight.data().data();
  double* py = y.data().data();
  for (std::size_t b = 0; b < n; ++b)
    for (std::size_t o = 0; o < l.out; ++o) {
      double* yo = py + ((b * l.out + o) * ho) * wo;
      for (std::size_t idx = 0; idx < ho * wo; ++idx) yo[idx] = l.bias[o];
      for (std::size_t c = 0; c < cin; ++c) {
        const double* xc = px + ((b * cin + c) * h) * w;
        for (std::size_t ky = 0; ky < k; ++ky)
          for (std::size_t kx = 0; kx < k; ++kx) {
            const double wv = pw[((o * cin + c) * k + ky) * k + kx];
            for (std::size_t oy = 0; oy < ho; ++oy) {
              const long iy = static_cast<long>(oy * s + ky) - static_cast<long>(l.pad);
              if (iy < 0 || iy >= static_cast<long>(h)) continue;
              for (std::size_t ox = 0; ox < wo; ++ox) {
                const long ix = static_cast<long>(ox * s + kx) - static_cast<long>(l.pad);
                if (ix < 0 || ix >= static_cast<long>(w)) continue;
                yo[oy * wo + ox] += wv * xc[iy * static_cast<long>(w) + ix];
              }
            }
          }
      }
    }
  return y;
}

// Features are the channel index for spatial inputs, the column index otherwise.
struct BnGeometry {
  std::size_t n, features, inner;
  std::size_t offset(std::size_t b, std::size_t f, std::size_t i) const { return (b * features + f) * inner + i; }
};

inline BnGeometry bn_geometry(const Layer& l, const Tensor& x) {
  const std::size_t n = x.dim(0);
  const std::size_t inner = x.row_width() / l.out;
  if (x.row_width() != l.out * inner || (l.spatial ? x.rank() != 4 || x.dim(1) != l.out : x.row_width() != l.out))
    throw ShapeError("batchnorm feature count mismatch", x.shape(), {l.out});
  return {n, l.out, inner};
}

inline Tensor bn_forward(Layer& l, const Tensor& x, Mode mode, bool update_running, LayerCache* cache) {
  const auto g = bn_geometry(l, x);
  Tensor y(x.shape());
  Tensor xhat(x.shape());
  Tensor inv_std({g.features});
  const double count = static_cast<double>(g.n * g.inner);
  for (std::size_t f = 0; f < g.features; ++f) {
    double mean, var;
    if (mode == Mode::Train) {
      double s = 0.0;
      for (std::size_t b = 0; b < g.n; ++b)
        for (std::size_t i = 0; i < g.inner; ++i) s += x[g.offset(b, f, i)];
      mean = s / count;
      double ss = 0.0;
      for (std::size_t b = 0; b < g.n; ++b)
        for (std::size_t i = 0; i < g.inner; ++i) {
          const double d = x[g.offset(b, f, i)] - mean;
          ss += d * d;
        }
      var = ss / count;
      if (update_running) {
        l.running_mean[f] = (1.0 - l.momentum) * l.running_mean[f] + l.momentum * mean;
        l.running_var[f] = (1.0 - l.momentum) * l.running_var[f] + l.momentum * var * count / (count - 1.0);
      }
    } else {
      mean = l.running_mean[f];
      var = l.running_var[f];
    }
    const double is = 1.0 / std::sqrt(var + l.eps);
    inv_std[f] = is;
    for (std::size_t b = 0; b < g.n; ++b)
      for (std::size_t i = 0; i < g.inner; ++i) {
        const auto o = g.offset(b, f, i);
        xhat[o] = (x[o] - mean) * is;
        y[o] = l.weight[f] * xhat[o] + l.bias[f];
      }
  }
  if (cache) {
    cache->xhat = std::move(xhat);
    cache->inv_std = std::move(inv_std);
  }
  return y;
}

inline Tensor layer_forward(Layer& l, const Tensor& x, Mode mode, bool update_running, LayerCache* cache) {
  if (cache) cache->input = x;
  switch (l.kind) {
    case LayerKind::Linear:
    case LayerKind::OutputLinear: return dense_forward(l, x);
    case LayerKind::Conv3x3:
    case LayerKind::ConvStem2x2: return conv_forward(l, x);
    case LayerKind::BatchNorm: return bn_forward(l, x, mode, update_running, cache);
    case LayerKind::ReLU: {
      Tensor y = x;
      for (auto& v : y.data()) v = v > 0.0 ? v : 0.0;
      return y;
    }
    case LayerKind::Flatten: return x.reshaped({x.dim(0), x.row_width()});
  }
  throw std::logic_error("unknown layer kind");
}

inline void check_batch(const Network& net, const Tensor& batch, Mode mode) {
  Shape expect = net.input_shape;
  Shape got(batch.shape().begin() + (batch.rank() ? 1 : 0), batch.shape().end());
  if (batch.rank() == 0 || (got != expect && !(net.family != ArchFamily::Conv && batch.row_width() == shape_numel(expect))))
    throw ShapeError("batch does not match network input signature", batch.shape(), expect);
  if (mode == Mode::Train && net.has_batchnorm() && batch.dim(0) < 2)
    throw std::invalid_argument("train-mode forward needs a batch of at least 2 samples for batch statistics");
}

inline Tensor run_forward(Network& net, const Tensor& batch, Mode mode, bool update_running,
                          std::vector<LayerCache>* caches, std::vector<Tensor>* block_out) {
  check_batch(net, batch, mode);
  if (caches) caches->assign(net.layers.size(), {});
  Tensor x = batch;
  if (net.family != ArchFamily::Conv && x.rank() != 2) x = x.reshaped({x.dim(0), x.row_width()});
  std::size_t next_block = 0;
  for (std::size_t i = 0; i < net.layers.size(); ++i) {
    x = layer_forward(net.layers[i], x, mode, update_running, caches ? &(*caches)[i] : nullptr);
    if (block_out && next_block < net.block_ends.size() && net.block_ends[next_block] == i) {
      block_out->push_back(x.reshaped({x.dim(0), x.row_width()}));
      ++next_block;
    }
  }
  return x;
}

}  // namespace detail

// Eval mode uses running BN statistics and leaves the network untouched.
// Train mode normalizes with batch statistics and updates running statistics.
inline ForwardTrace forward(Network& net, const Tensor& batch, Mode mode, bool capture = true) {
  ForwardTrace t;
  t.logits = detail::run_forward(net, batch, mode, mode == Mode::Train, nullptr, capture ? &t.features : nullptr);
  return t;
}

inline ForwardTrace forward_eval(const Network& net, const Tensor& batch, bool capture = true) {
  // Eval mode never writes to the network.
  return forward(const_cast<Network&>(net), batch, Mode::Eval, capture);
}

// Mean softmax cross-entropy; the max-shifted log-sum-exp keeps it finite.
inline double cross_entropy(const Tensor& logits, std::span<const int> labels) {
  const std::size_t n = logits.dim(0), c = logits.dim(1);
  double total = 0.0;
  for (std::size_t i = 0; i < n; ++i) {
    auto z = logits.row(i);
    const double mx = *std::max_element(z.begin(), z.end());
    double se = 0.0;
    for (std::size_t j = 0; j < c; ++j) se += std::exp(z[j] - mx);
    total += mx + std::log(se) - z[static_cast<std::size_t>(labels[i])];
  }
  return total / static_cast<double>(n);
}

inline std::vector<int> argmax_rows(const Tensor& logits) {
  std::vector<int> out(logits.dim(0));
  for (std::size_t i = 0; i < out.size(); ++i) {
    auto z = logits.row(i);
    out[i] = static_cast<int>(std::max_element(z.begin(), z.end()) - z.begin());
  }
  return out;
}

inline double error_rate(const Tensor& logits, std::span<const int> labels) {
  auto pred = argmax_rows(logits);
  std::size_t wrong = 0;
  for (std::size_t i = 0; i < pred.size(); ++i) wrong += pred[i] != labels[i];
  return static_cast<double>(wrong) / static_cast<double>(pred.size());
}

// Gradient tensors aligned with parameters(net).
struct Gradients {
  std::vector<Tensor> tensors;
  double loss = 0.0;
  Tensor logits;
};

namespace detail {

inline Tensor softmax_xent_grad(const Tensor& logits, std::span<const int> labels) {
  const std::size_t n = logits.dim(0), c = logits.dim(1);
  Tensor g(logits.shape());
  for (std::size_t i = 0; i < n; ++i) {
    auto z = logits.row(i);
    auto gi = g.row(i);
    const double mx = *std::max_element(z.begin(), z.end());
    double se = 0.0;
    for (std::size_t j = 0; j < c; ++j) se += std::exp(z[j] - mx);
    for (std::size_t j = 0; j < c; ++j)
      gi[j] = (std::exp(z[j] - mx) / se - (static_cast<int>(j) == labels[i] ? 1.0 : 0.0)) / static_cast<double>(n);
  }
  return g;
}

inline Tensor dense_backward(const Layer& l, const LayerCache& cache, const Tensor& dy, Tensor& dw, Tensor& db) {
  const Tensor& x0 = cache.input;
  Tensor x = x0.rank() == 2 ? x0 : x0.reshaped({x0.dim(0), l.in});
  dw = matmul_tn(x, dy);
  db = Tensor({l.out});
  for (std::size_t i = 0; i < dy.dim(0); ++i) {
    auto r = dy.row(i);
    for (std::size_t j = 0; j < l.out; ++j) db[j] += r[j];
  }
  Tensor dx = matmul_nt(dy, l.weight);
  return dx.reshaped(x0.shape());
}

inline Tensor conv_backward(const Layer& l, const LayerCache& cache, const Tensor& dy, Tensor& dw, Tensor& db) {
  const Tensor& x = cache.input;
  const std::size_t n = x.dim(0), cin = l.in, h = x.dim(2), w = x.dim(3), k = l.kernel, s = l.stride;
  const std::size_t ho = dy.dim(2), wo = dy.dim(3);
  dw = Tensor(l.weight.shape());
  db = Tensor({l.out});
  Tensor dx(x.shape());
  const double* px = x.data().data();
  const double* pw = l.weight.data().data();
  const double* pdy = dy.data().data();
  double* pdw = dw.data().data();
  double* pdx = dx.data().data();
  for (std::size_t b = 0; b < n; ++b)
    for (std::size_t o = 0; o < l.out; ++o) {
      const double* go = pdy + ((b * l.out + o) * ho) * wo;
      for (std::size_t idx = 0; idx < ho * wo; ++idx) db[o] += go[idx];
      for (std::size_t c = 0; c < cin; ++c) {
        const double* xc = px + ((b * cin + c) * h) * w;
        double* dxc = pdx + ((b * cin + c) * h) * w;
        for (std::size_t ky = 0; ky < k; ++ky)
          for (std::size_t kx = 0; kx < k; ++kx) {
            const std::size_t widx = ((o * cin + c) * k + ky) * k + kx;
            const double wv = pw[widx];
            double acc = 0.0;
            for (std::size_t oy = 0; oy < ho; ++oy) {
              const long iy = static_cast<long>(oy * s + ky) - static_cast<long>(l.pad);
              if (iy < 0 || iy >= static_cast<long>(h)) continue;
              for (std::size_t ox = 0; ox < wo; ++ox) {
                const long ix = static_cast<long>(ox * s + kx) - static_cast<long>(l.pad);
                if (ix < 0 || ix >= static_cast<long>(w)) continue;
                const double gv = go[oy * wo + ox];
                const long xi = iy * static_cast<long>(w) + ix;
                acc += gv * xc[xi];
                dxc[xi] += gv * wv;
              }
            }
            pdw[widx] += acc;
          }
      }
    }
  return dx;
}

inline Tensor bn_backward(const Layer& l, const LayerCache& cache, const Tensor& dy, Tensor& dgamma, Tensor& dbeta) {
  const auto g = bn_geometry(l, dy);
  dgamma = Tensor({g.features});
  dbeta = Tensor({g.features});
  Tensor dx(dy.shape());
  const double count = static_cast<double>(g.n * g.inner);
  for (std::size_t f = 0; f < g.features; ++f) {
    double sum_dy = 0.0, sum_dy_xhat = 0.0;
    for (std::size_t b = 0; b < g.n; ++b)
      for (std::size_t i = 0; i < g.inner; ++i) {
        const auto o = g.offset(b, f, i);
        sum_dy += dy[o];
        sum_dy_xhat += dy[o] * cache.xhat[o];
      }
    dgamma[f] = sum_dy_xhat;
    dbeta[f] = sum_dy;
    const double scale = l.weight[f] * cache.inv_std[f] / count;
    for (std::size_t b = 0; b < g.n; ++b)
      for (std::size_t i = 0; i < g.inner; ++i) {
        const auto o = g.offset(b, f, i);
        dx[o] = scale * (count * dy[o] - sum_dy - cache.xhat[o] * sum_dy_xhat);
      }
  }
  return dx;
}

// Reverse pass through train-mode caches; returns gradients in parameters() order.
inline std::vector<Tensor> run_backward(const Network& net, const std::vector<LayerCache>& caches, Tensor dy) {
  std::vector<std::pair<Tensor, Tensor>> per_layer(net.layers.size());
  for (std::size_t ii = net.layers.size(); ii-- > 0;) {
    const Layer& l = net.layers[ii];
    const LayerCache& c = caches[ii];
    auto& [dw, db] = per_layer[ii];
    switch (l.kind) {
      case LayerKind::Linear:
      case LayerKind::OutputLinear: dy = dense_backward(l, c, dy, dw, db); break;
      case LayerKind::Conv3x3:
      case LayerKind::ConvStem2x2: dy = conv_backward(l, c, dy, dw, db); break;
      case LayerKind::BatchNorm: dy = bn_backward(l, c, dy, dw, db); break;
      case LayerKind::ReLU:
        for (std::size_t j = 0; j < dy.size(); ++j)
          if (!(c.input[j] > 0.0)) dy[j] = 0.0;
        break;
      case LayerKind::Flatten: dy = dy.reshaped(c.input.shape()); break;
    }
  }
  std::vector<Tensor> out;
  for (std::size_t i = 0; i < net.layers.size(); ++i) {
    if (!net.layers[i].has_params()) continue;
    out.push_back(std::move(per_layer[i].first));
    out.push_back(std::move(per_layer[i].second));
  }
  return out;
}

}  // namespace detail

// Exact gradients of mean softmax cross-entropy over the batch, evaluated in
// train mode. Running BN statistics are updated only when update_running is set.
inline Gradients backward(Network& net, const Tensor& batch, std::span<const int> labels,
                          bool update_running = false) {
  if (labels.size() != batch.dim(0))
    throw ShapeError("label count does not match batch", batch.shape(), {labels.size()});
  std::vector<detail::LayerCache> caches;
  Tensor logits = detail::run_forward(net, batch, Mode::Train, update_running, &caches, nullptr);
  Gradients g;
  g.loss = cross_entropy(logits, labels);
  g.tensors = detail::run_backward(net, caches, detail::softmax_xent_grad(logits, labels));
  g.logits = std::move(logits);
  return g;
}

// Train-mode loss without touching running statistics.
inline double train_mode_loss(Network& net, const Tensor& batch, std::span<const int> labels) {
  Tensor logits = detail::run_forward(net, batch, Mode::Train, false, nullptr, nullptr);
  return cross_entropy(logits, labels);
}

struct LayerGradCheck {
  std::size_t layer;
  LayerKind kind;
  std::size_t entries = 0;
  double max_rel_error = 0.0;
  double max_abs_error = 0.0;
  double max_analytic = 0.0;
  double max_numeric = 0.0;
};

struct GradCheckReport {
  std::vector<LayerGradCheck> layers;
  double max_rel_error = 0.0;
  double step = 0.0;
  double tolerance = 0.0;
  double floor = 0.0;
  bool passed = true;
};

// Central differences for every parameter entry. Relative error is
// |a - n| / max(|a|, |n|, floor); the floor keeps exactly-zero gradients
// (biases feeding a BatchNorm) from turning rounding noise into 100% error.
inline GradCheckReport gradient_check(Network& net, const Tensor& batch, std::span<const int> labels, double step,
                                      double tolerance, double floor = 1e-6) {
  GradCheckReport rep;
  rep.step = step;
  rep.tolerance = tolerance;
  rep.floor = floor;
  Gradients g = backward(net, batch, labels, false);
  auto params = parameters(net);
  for (std::size_t p = 0; p < params.size(); ++p) {
    const std::size_t li = params[p].layer;
    if (rep.layers.empty() || rep.layers.back().layer != li) rep.layers.push_back({li, net.layers[li].kind});
    auto& lr = rep.layers.back();
    Tensor& t = *params[p].value;
    for (std::size_t j = 0; j < t.size(); ++j) {
      const double orig = t[j];
      t[j] = orig + step;
      const double up = train_mode_loss(net, batch, labels);
      t[j] = orig - step;
      const double down = train_mode_loss(net, batch, labels);
      t[j] = orig;
      const double numeric = (up - down) / (2.0 * step);
      const double analytic = g.tensors[p][j];
      const double abs_err = std::abs(analytic - numeric);
      const double rel = abs_err / std::max({std::abs(analytic), std::abs(numeric), floor});
      lr.entries++;
      lr.max_rel_error = std::max(lr.max_rel_error, rel);
      lr.max_abs_error = std::max(lr.max_abs_error, abs_err);
      lr.max_analytic = std::max(lr.max_analytic, std::abs(analytic));
      lr.max_numeric = std::max(lr.max_numeric, std::abs(numeric));
    }
  }
  for (const auto& l : rep.layers) rep.max_rel_error = std::max(rep.max_rel_error, l.max_rel_error);
  rep.passed = rep.max_rel_error < tolerance;
  return rep;
}

}  // namespace ncprobe
