#pragma once

#include <cstddef>
#include <functional>
#include <initializer_list>
#include <numeric>
#include <span>
#include <sstream>
#include <stdexcept>
#include <string>
#include <utility>
#include <vector>

namespace ncprobe {

using Shape = std::vector<std::size_t>;

inline std::string shape_str(const Shape& s) {
  std::ostringstream os;
  os << '[';
  for (std::size_t i = 0; i < s.size(); ++i) os << (i ? "x" : "") << s[i];
  os << ']';
  return os.str();
}

inline std::size_t shape_numel(const Shape& s) {
  return std::accumulate(s.begin(), s.end(), std::size_t{1}, std::multiplies<>{});
}

class ShapeError : public std::invalid_argument {
 public:
  ShapeError(const std::string& what, const Shape& a, const Shape& b)
      : std::invalid_argument(what + ": " + shape_str(a) + " vs " + shape_str(b)), lhs(a), rhs(b) {}
  ShapeError(const std::string& what, const Shape& a)
      : std::invalid_argument(what + ": " + shape_str(a)), lhs(a) {}
  Shape lhs, rhs;
};

class EmptySetError : public std::invalid_argument {
 public:
  using std::invalid_argument::invalid_argument;
};

// Dense row-major array of doubles, last index fastest.
class Tensor {
 public:
  Tensor() = default;
  explicit Tensor(Shape shape, double fill = 0.0) : shape_(std::move(shape)) {
    for (auto e : shape_)
      if (e == 0) throw ShapeError("tensor extents must be positive", shape_);
    data_.assign(shape_numel(shape_), fill);
  }
  Tensor(Shape shape, std::vector<double> data) : shape_(std::move(shape)), data_(std::move(data)) {
    for (auto e : shape_)
      if (e == 0) throw ShapeError("tensor extents must be positive", shape_);
    if (shape_numel(shape_) != data_.size())
      throw ShapeError("buffer length " + std::to_string(data_.size()) + " does not match shape", shape_);
  }

  static Tensor matrix(std::initializer_list<std::initializer_list<double>> rows) {
    std::vector<double> d;
    std::size_t cols = rows.begin()->size();
    for (auto& r : rows) {
      if (r.size() != cols) throw std::invalid_argument("ragged matrix literal");
      d.insert(d.end(), r.begin(), r.end());
    }
    return Tensor({rows.size(), cols}, std::move(d));
  }

  static Tensor identity(std::size_t n) {
    Tensor t({n, n});
    for (std::size_t i = 0; i < n; ++i) t.at(i, i) = 1.0;
    return t;
  }

  const Shape& shape() const { return shape_; }
  std::size_t rank() const { return shape_.size(); }
  std::size_t dim(std::size_t i) const { return shape_.at(i); }
  std::size_t size() const { return data_.size(); }
  bool empty() const { return data_.empty(); }

  std::span<double> data() { return data_; }
  std::span<const double> data() const { return data_; }
  std::vector<double>& vec() { return data_; }
  const std::vector<double>& vec() const { return data_; }

  double& operator[](std::size_t i) { return data_[i]; }
  double operator[](std::size_t i) const { return data_[i]; }

  double& at(std::size_t i, std::size_t j) { return data_[i * shape_[1] + j]; }
  double at(std::size_t i, std::size_t j) const { return data_[i * shape_[1] + j]; }

  // Row i of a tensor viewed as [dim0, rest...].
  std::span<const double> row(std::size_t i) const {
    std::size_t w = data_.size() / shape_[0];
    return std::span<const double>(data_).subspan(i * w, w);
  }
  std::span<double> row(std::size_t i) {
    std::size_t w = data_.size() / shape_[0];
    return std::span<double>(data_).subspan(i * w, w);
  }
  std::size_t row_width() const { return shape_.empty() ? 0 : data_.size() / shape_[0]; }

  Tensor reshaped(Shape s) const {
    if (shape_numel(s) != data_.size()) throw ShapeError("reshape changes element count", shape_, s);
    return Tensor(std::move(s), data_);
  }

  // Selects rows (along dim 0) in the given order.
  Tensor gather_rows(std::span<const std::size_t> idx) const {
    Shape s = shape_;
    s[0] = idx.size();
    std::size_t w = row_width();
    std::vector<double> d;
    d.reserve(idx.size() * w);
    for (auto i : idx) {
      auto r = row(i);
      d.insert(d.end(), r.begin(), r.end());
    }
    return Tensor(std::move(s), std::move(d));
  }

  bool operator==(const Tensor&) const = default;

 private:
  Shape shape_;
  std::vector<double> data_;
};

// c[i,j] = sum_t a[i,t] * b[t,j], accumulated with t ascending.
inline Tensor matmul(const Tensor& a, const Tensor& b) {
  if (a.rank() != 2 || b.rank() != 2 || a.dim(1) != b.dim(0))
    throw ShapeError("matmul inner dimensions disagree", a.shape(), b.shape());
  const std::size_t m = a.dim(0), k = a.dim(1), n = b.dim(1);
  Tensor c({m, n});
  const double* pa = a.data().data();
  const double* pb = b.data().data();
  double* pc = c.data().data();
  for (std::size_t i = 0; i < m; ++i) {
    double* ci = pc + i * n;
    for (std::size_t t = 0; t < k; ++t) {
      const double av = pa[i * k + t];
      const double* bt = pb + t * n;
      for (std::size_t j = 0; j < n; ++j) ci[j] += av * bt[j];
    }
  }
  return c;
}

// aᵀ·b without materializing the transpose; summation over rows ascending.
inline Tensor matmul_tn(const Tensor& a, const Tensor& b) {
  if (a.rank() != 2 || b.rank() != 2 || a.dim(0) != b.dim(0))
    throw ShapeError("matmul_tn leading dimensions disagree", a.shape(), b.shape());
  const std::size_t k = a.dim(0), m = a.dim(1), n = b.dim(1);
  Tensor c({m, n});
  const double* pa = a.data().data();
  const double* pb = b.data().data();
  double* pc = c.data().data();
  for (std::size_t t = 0; t < k; ++t) {
    const double* bt = pb + t * n;
    for (std::size_t i = 0; i < m; ++i) {
      const double av = pa[t * m + i];
      double* ci = pc + i * n;
      for (std::size_t j = 0; j < n; ++j) ci[j] += av * bt[j];
    }
  }
  return c;
}

// a·bᵀ; summation over the shared column index ascending.
inline Tensor matmul_nt(const Tensor& a, const Tensor& b) {
  if (a.rank() != 2 || b.rank() != 2 || a.dim(1) != b.dim(1))
    throw ShapeError("matmul_nt trailing dimensions disagree", a.shape(), b.shape());
  const std::size_t m = a.dim(0), k = a.dim(1), n = b.dim(0);
  Tensor c({m, n});
  const double* pa = a.data().data();
  const double* pb = b.data().data();
  double* pc = c.data().data();
  for (std::size_t i = 0; i < m; ++i)
    for (std::size_t j = 0; j < n; ++j) {
      double s = 0.0;
      for (std::size_t t = 0; t < k; ++t) s += pa[i * k + t] * pb[j * k + t];
      pc[i * n + j] = s;
    }
  return c;
}

struct MeanVar {
  Tensor mean;
  double var = 0.0;
};

// Population mean and total variance E||x - mu||^2 (divisor n).
inline MeanVar reduce_mean_var(const Tensor& rows) {
  if (rows.rank() < 1 || rows.size() == 0) throw EmptySetError("reduce_mean_var: empty row set");
  const std::size_t n = rows.dim(0), p = rows.row_width();
  Tensor mean({p});
  for (std::size_t i = 0; i < n; ++i) {
    auto r = rows.row(i);
    for (std::size_t j = 0; j < p; ++j) mean[j] += r[j];
  }
  for (std::size_t j = 0; j < p; ++j) mean[j] /= static_cast<double>(n);
  double ss = 0.0;
  for (std::size_t i = 0; i < n; ++i) {
    auto r = rows.row(i);
    for (std::size_t j = 0; j < p; ++j) {
      double d = r[j] - mean[j];
      ss += d * d;
    }
  }
  return {std::move(mean), ss / static_cast<double>(n)};
}

inline double squared_distance(std::span<const double> a, std::span<const double> b) {
  double s = 0.0;
  for (std::size_t j = 0; j < a.size(); ++j) {
    double d = a[j] - b[j];
    s += d * d;
  }
  return s;
}

}  // namespace ncprobe
