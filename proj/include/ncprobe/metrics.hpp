#pragma once

#include <cmath>
#include <limits>
#include <optional>
#include <sstream>
#include <string>
#include <vector>

#include <json.hpp>

#include "ncprobe/data.hpp"
#include "ncprobe/nn.hpp"
#include "ncprobe/optim.hpp"

namespace ncprobe {

inline constexpr double kCdnvInf = std::numeric_limits<double>::infinity();
inline constexpr double kDegenerateDistSq = 1e-24;

struct ClassStats {
  Tensor means;                 // [C x p]
  std::vector<double> variance; // population variance per class
  std::vector<std::size_t> count;
};

// Per-class mean and variance of the rows of `features` grouped by `labels`.
inline ClassStats class_stats(const Tensor& features, std::span<const int> labels, std::size_t classes) {
  if (features.dim(0) != labels.size()) throw ShapeError("features and labels disagree", features.shape(), {labels.size()});
  const std::size_t p = features.row_width();
  auto groups = index_by_class(labels, classes);
  ClassStats s{Tensor({classes, p}), std::vector<double>(classes, 0.0), std::vector<std::size_t>(classes, 0)};
  for (std::size_t c = 0; c < classes; ++c) {
    if (groups[c].empty()) throw EmptySetError("class " + std::to_string(c) + " has no samples");
    auto mv = reduce_mean_var(features.gather_rows(groups[c]));
    std::copy(mv.mean.data().begin(), mv.mean.data().end(), s.means.row(c).begin());
    s.variance[c] = mv.var;
    s.count[c] = groups[c].size();
  }
  return s;
}

struct CdnvValue {
  double value = 0.0;
  bool degenerate = false;
};

// (Var1 + Var2) / (2 ||mu1 - mu2||^2) from precomputed class statistics.
inline CdnvValue cdnv_from_stats(std::span<const double> mu1, double var1, std::span<const double> mu2, double var2) {
  const double d2 = squared_distance(mu1, mu2);
  if (d2 < kDegenerateDistSq) return {kCdnvInf, true};
  return {(var1 + var2) / (2.0 * d2), false};
}

inline CdnvValue cdnv(const Tensor& f1, const Tensor& f2) {
  if (f1.row_width() != f2.row_width()) throw ShapeError("cdnv feature dimensions differ", f1.shape(), f2.shape());
  auto a = reduce_mean_var(f1);
  auto b = reduce_mean_var(f2);
  return cdnv_from_stats(a.mean.data(), a.var, b.mean.data(), b.var);
}

// Symmetric C x C matrix; the diagonal is NaN, degenerate pairs hold +inf.
struct CdnvMatrix {
  std::size_t classes = 0;
  std::vector<double> values;
  double average = 0.0;  // over non-degenerate unordered pairs
  std::size_t degenerate_pairs = 0;
  double at(std::size_t i, std::size_t j) const { return values[i * classes + j]; }
};

class AllPairsDegenerateError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

inline CdnvMatrix cdnv_matrix(const ClassStats& s, bool throw_if_all_degenerate = true) {
  const std::size_t C = s.variance.size();
  if (C < 2) throw std::invalid_argument("CDNV averages need at least two classes");
  CdnvMatrix m;
  m.classes = C;
  m.values.assign(C * C, std::numeric_limits<double>::quiet_NaN());
  double sum = 0.0;
  std::size_t n = 0;
  for (std::size_t i = 0; i < C; ++i)
    for (std::size_t j = i + 1; j < C; ++j) {
      auto v = cdnv_from_stats(s.means.row(i), s.variance[i], s.means.row(j), s.variance[j]);
      m.values[i * C + j] = m.values[j * C + i] = v.value;
      if (v.degenerate) {
        m.degenerate_pairs++;
      } else {
        sum += v.value;
        ++n;
      }
    }
  if (n == 0) {
    if (throw_if_all_degenerate) throw AllPairsDegenerateError("every class pair has coincident means");
    m.average = kCdnvInf;
  } else {
    m.average = sum / static_cast<double>(n);
  }
  return m;
}

inline CdnvMatrix avg_cdnv(const Tensor& features, std::span<const int> labels, std::size_t classes) {
  return cdnv_matrix(class_stats(features, labels, classes));
}

// argmin_c ||x - mu_c||, ties to the smallest class index.
inline int ncc_predict(std::span<const double> x, const Tensor& means) {
  int best = 0;
  double best_d = squared_distance(x, means.row(0));
  for (std::size_t c = 1; c < means.dim(0); ++c) {
    const double d = squared_distance(x, means.row(c));
    if (d < best_d) {
      best_d = d;
      best = static_cast<int>(c);
    }
  }
  return best;
}

inline double ncc_error(const Tensor& features, std::span<const int> labels, const Tensor& means) {
  if (features.row_width() != means.row_width())
    throw ShapeError("ncc feature width differs from class means", features.shape(), means.shape());
  std::size_t wrong = 0;
  for (std::size_t i = 0; i < labels.size(); ++i) wrong += ncc_predict(features.row(i), means) != labels[i];
  return static_cast<double>(wrong) / static_cast<double>(labels.size());
}

// Smallest 1-based layer index whose NCC train error is <= epsilon, else L.
inline std::size_t effective_depth(std::span<const double> ncc_train_errors, double epsilon) {
  if (ncc_train_errors.empty()) throw std::invalid_argument("effective_depth needs at least one layer");
  for (std::size_t i = 0; i < ncc_train_errors.size(); ++i)
    if (ncc_train_errors[i] <= epsilon) return i + 1;
  return ncc_train_errors.size();
}

struct LayerCollapse {
  std::size_t index = 0;  // 1-based block index
  CdnvMatrix cdnv_train;
  std::optional<CdnvMatrix> cdnv_test;
  double ncc_train_err = 0.0;
  double ncc_test_err = std::numeric_limits<double>::quiet_NaN();
  bool ncc_separable = false;
};

struct CollapseReport {
  double epsilon = 0.01;
  std::vector<LayerCollapse> layers;
  double model_train_err = 0.0;
  double model_test_err = std::numeric_limits<double>::quiet_NaN();
  std::size_t effective_depth = 0;
  bool test_means_recomputed = false;

  std::vector<double> ncc_train_errors() const {
    std::vector<double> e;
    for (const auto& l : layers) e.push_back(l.ncc_train_err);
    return e;
  }
};

struct ReportOptions {
  double epsilon = 0.01;
  // NCC test error normally uses train-split class means; this recomputes them
  // on the test split for comparison.
  bool recompute_test_means = false;
};

// Eval-mode features of every block on both splits. Class statistics for NCC
// come from the training split and its training labels; test CDNV uses the
// test split's own class statistics. An empty test set leaves test fields NaN.
inline CollapseReport collapse_report(const Network& net, const Dataset& train, const Dataset& test,
                                      const ReportOptions& opt = {}) {
  CollapseReport rep;
  rep.epsilon = opt.epsilon;
  rep.test_means_recomputed = opt.recompute_test_means;
  const auto tr = forward_eval(net, train.inputs);
  rep.model_train_err = error_rate(tr.logits, train.labels);
  const bool has_test = test.size() > 0;
  ForwardTrace te;
  if (has_test) {
    te = forward_eval(net, test.inputs);
    rep.model_test_err = error_rate(te.logits, test.labels);
  }
  for (std::size_t b = 0; b < tr.features.size(); ++b) {
    LayerCollapse lc;
    lc.index = b + 1;
    auto st = class_stats(tr.features[b], train.labels, train.classes);
    lc.cdnv_train = cdnv_matrix(st, false);
    lc.ncc_train_err = ncc_error(tr.features[b], train.labels, st.means);
    lc.ncc_separable = lc.ncc_train_err == 0.0;
    if (has_test) {
      auto st_test = class_stats(te.features[b], test.labels, test.classes);
      lc.cdnv_test = cdnv_matrix(st_test, false);
      lc.ncc_test_err = ncc_error(te.features[b], test.labels, opt.recompute_test_means ? st_test.means : st.means);
    }
    rep.layers.push_back(std::move(lc));
  }
  rep.effective_depth = effective_depth(rep.ncc_train_errors(), opt.epsilon);
  return rep;
}

// Top-block NCC train error only; the cheap path used by depth searches.
inline std::vector<double> layer_ncc_train_errors(const Network& net, const Dataset& data) {
  const auto tr = forward_eval(net, data.inputs);
  std::vector<double> out;
  for (const auto& f : tr.features) {
    auto st = class_stats(f, data.labels, data.classes);
    out.push_back(ncc_error(f, data.labels, st.means));
  }
  return out;
}

namespace detail {

inline nlohmann::json finite_or_null(double v) { return std::isfinite(v) ? nlohmann::json(v) : nlohmann::json(nullptr); }

inline nlohmann::json matrix_json(const CdnvMatrix& m) {
  auto rows = nlohmann::json::array();
  for (std::size_t i = 0; i < m.classes; ++i) {
    auto r = nlohmann::json::array();
    for (std::size_t j = 0; j < m.classes; ++j) r.push_back(finite_or_null(m.at(i, j)));
    rows.push_back(r);
  }
  return rows;
}

}  // namespace detail

// Non-finite values (diagonal, degenerate pairs, missing test split) become null.
inline nlohmann::json to_json(const CollapseReport& r) {
  nlohmann::json j;
  j["epsilon"] = r.epsilon;
  j["layers"] = nlohmann::json::array();
  for (const auto& l : r.layers) {
    nlohmann::json lj;
    lj["index"] = l.index;
    lj["cdnv_train_avg"] = detail::finite_or_null(l.cdnv_train.average);
    lj["cdnv_test_avg"] = l.cdnv_test ? detail::finite_or_null(l.cdnv_test->average) : nlohmann::json(nullptr);
    lj["cdnv_train_matrix"] = detail::matrix_json(l.cdnv_train);
    lj["cdnv_test_matrix"] = l.cdnv_test ? detail::matrix_json(*l.cdnv_test) : nlohmann::json(nullptr);
    lj["ncc_train_err"] = l.ncc_train_err;
    lj["ncc_test_err"] = detail::finite_or_null(l.ncc_test_err);
    lj["degenerate_pairs"] = l.cdnv_train.degenerate_pairs;
    j["layers"].push_back(lj);
  }
  j["model_train_err"] = r.model_train_err;
  j["model_test_err"] = detail::finite_or_null(r.model_test_err);
  j["effective_depth"] = r.effective_depth;
  j["feature_capture"] = "post-relu block output, eval-mode batchnorm";
  j["ncc_test_means"] = r.test_means_recomputed ? "test" : "train";
  return j;
}

inline const char* kReportCsvHeader =
    "epoch,layer,cdnv_train,cdnv_test,ncc_train_err,ncc_test_err,model_train_err,model_test_err,effective_depth";

inline std::string report_csv_rows(const CollapseReport& r, std::size_t epoch) {
  std::ostringstream os;
  for (const auto& l : r.layers)
    os << epoch << ',' << l.index << ',' << format_double(l.cdnv_train.average) << ','
       << format_double(l.cdnv_test ? l.cdnv_test->average : std::numeric_limits<double>::quiet_NaN()) << ','
       << format_double(l.ncc_train_err) << ',' << format_double(l.ncc_test_err) << ','
       << format_double(r.model_train_err) << ',' << format_double(r.model_test_err) << ',' << r.effective_depth
       << '\n';
  return os.str();
}

// ---------------------------------------------------------------------------
// Auxiliary linear probe on frozen features.

struct ProbeConfig {
  SgdConfig sgd = [] {
    SgdConfig c;
    c.epochs = 100;
    c.decay_epochs = {50, 75};
    return c;
  }();
};

struct ProbeResult {
  double train_err = 0.0;
  double test_err = std::numeric_limits<double>::quiet_NaN();
};

// Frozen-feature dataset: no balance requirement, labels taken as given.
inline Dataset feature_dataset(const Tensor& features, std::span<const int> labels, std::size_t classes) {
  Dataset d;
  d.inputs = features.reshaped({features.dim(0), features.row_width()});
  d.labels.assign(labels.begin(), labels.end());
  d.clean_labels = d.labels;
  d.classes = classes;
  d.provenance.source = "features";
  return d;
}

inline ProbeResult linear_probe(const Tensor& features_train, std::span<const int> labels_train,
                                const Tensor& features_test, std::span<const int> labels_test, std::size_t classes,
                                const ProbeConfig& cfg = {}) {
  auto data = feature_dataset(features_train, labels_train, classes);
  SeededRng rng = SeededRng(cfg.sgd.seed).child("probe-init");
  auto net = build_linear_probe(data.input_dim(), classes, rng);
  SgdConfig sgd = cfg.sgd;
  sgd.batch_size = std::min(sgd.batch_size, data.size());
  auto res = train(std::move(net), data, sgd);
  ProbeResult out;
  out.train_err = evaluate(res.net, data.inputs, data.labels).err;
  if (!labels_test.empty())
    out.test_err = evaluate(res.net, features_test.reshaped({features_test.dim(0), features_test.row_width()}),
                            labels_test)
                       .err;
  return out;
}

}  // namespace ncprobe
