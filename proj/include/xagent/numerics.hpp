#pragma once

// Dense row-major matrices, elementwise nonlinearities, ordering utilities,
// a seeded generator and the finite-difference oracle shared by every module.

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <functional>
#include <initializer_list>
#include <limits>
#include <numeric>
#include <span>
#include <stdexcept>
#include <string>
#include <vector>

namespace xagent {

class ShapeError : public std::invalid_argument {
 public:
  using std::invalid_argument::invalid_argument;
};

class ArgumentError : public std::invalid_argument {
 public:
  using std::invalid_argument::invalid_argument;
};

class NumericError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

using Index = std::size_t;
using IndexList = std::vector<Index>;
using Vector = std::vector<double>;

inline constexpr double kNormEps = 1e-12;

class Matrix {
 public:
  Matrix() = default;
  Matrix(Index rows, Index cols, double fill = 0.0)
      : rows_(rows), cols_(cols), data_(rows * cols, fill) {}
  Matrix(Index rows, Index cols, std::vector<double> data)
      : rows_(rows), cols_(cols), data_(std::move(data)) {
    if (data_.size() != rows_ * cols_) {
      throw ShapeError("Matrix: data length " + std::to_string(data_.size()) +
                       " != " + std::to_string(rows_) + "x" + std::to_string(cols_));
    }
  }
  Matrix(std::initializer_list<std::initializer_list<double>> init) {
    rows_ = init.size();
    cols_ = rows_ == 0 ? 0 : init.begin()->size();
    data_.reserve(rows_ * cols_);
    for (const auto& r : init) {
      if (r.size() != cols_) throw ShapeError("Matrix: ragged initializer");
      data_.insert(data_.end(), r.begin(), r.end());
    }
  }

  static Matrix identity(Index n) {
    Matrix m(n, n);
    for (Index i = 0; i < n; ++i) m(i, i) = 1.0;
    return m;
  }
  static Matrix row_vector(std::span<const double> v) {
    return Matrix(1, v.size(), std::vector<double>(v.begin(), v.end()));
  }

  Index rows() const noexcept { return rows_; }
  Index cols() const noexcept { return cols_; }
  Index size() const noexcept { return data_.size(); }
  bool empty() const noexcept { return data_.empty(); }

  double& operator()(Index r, Index c) noexcept { return data_[r * cols_ + c]; }
  double operator()(Index r, Index c) const noexcept { return data_[r * cols_ + c]; }

  std::span<double> data() noexcept { return data_; }
  std::span<const double> data() const noexcept { return data_; }
  std::span<double> row(Index r) noexcept { return {data_.data() + r * cols_, cols_}; }
  std::span<const double> row(Index r) const noexcept {
    return {data_.data() + r * cols_, cols_};
  }

  bool all_finite() const noexcept {
    return std::all_of(data_.begin(), data_.end(), [](double v) { return std::isfinite(v); });
  }

  bool operator==(const Matrix&) const = default;

 private:
  Index rows_ = 0;
  Index cols_ = 0;
  std::vector<double> data_;
};

inline std::string shape_str(const Matrix& m) {
  return std::to_string(m.rows()) + "x" + std::to_string(m.cols());
}

inline void require_same_shape(const Matrix& a, const Matrix& b, const char* what) {
  if (a.rows() != b.rows() || a.cols() != b.cols()) {
    throw ShapeError(std::string(what) + ": shape " + shape_str(a) + " vs " + shape_str(b));
  }
}

inline void require_finite(const Matrix& m, const char* what) {
  if (!m.all_finite()) throw NumericError(std::string(what) + ": non-finite entry");
}

// ---------------------------------------------------------------------------
// Products

inline Matrix matmul(const Matrix& a, const Matrix& b) {
  if (a.cols() != b.rows()) {
    throw ShapeError("matmul: " + shape_str(a) + " * " + shape_str(b));
  }
  Matrix out(a.rows(), b.cols());
  for (Index i = 0; i < a.rows(); ++i) {
    auto orow = out.row(i);
    for (Index p = 0; p < a.cols(); ++p) {
      const double av = a(i, p);
      if (av == 0.0) continue;
      auto brow = b.row(p);
      for (Index j = 0; j < b.cols(); ++j) orow[j] += av * brow[j];
    }
  }
  require_finite(out, "matmul");
  return out;
}

/// a^T * b
inline Matrix matmul_tn(const Matrix& a, const Matrix& b) {
  if (a.rows() != b.rows()) {
    throw ShapeError("matmul_tn: " + shape_str(a) + "^T * " + shape_str(b));
  }
  Matrix out(a.cols(), b.cols());
  for (Index p = 0; p < a.rows(); ++p) {
    auto arow = a.row(p);
    auto brow = b.row(p);
    for (Index i = 0; i < a.cols(); ++i) {
      const double av = arow[i];
      if (av == 0.0) continue;
      auto orow = out.row(i);
      for (Index j = 0; j < b.cols(); ++j) orow[j] += av * brow[j];
    }
  }
  require_finite(out, "matmul_tn");
  return out;
}

/// a * b^T
inline Matrix matmul_nt(const Matrix& a, const Matrix& b) {
  if (a.cols() != b.cols()) {
    throw ShapeError("matmul_nt: " + shape_str(a) + " * " + shape_str(b) + "^T");
  }
  Matrix out(a.rows(), b.rows());
  for (Index i = 0; i < a.rows(); ++i) {
    auto arow = a.row(i);
    for (Index j = 0; j < b.rows(); ++j) {
      auto brow = b.row(j);
      double s = 0.0;
      for (Index p = 0; p < a.cols(); ++p) s += arow[p] * brow[p];
      out(i, j) = s;
    }
  }
  require_finite(out, "matmul_nt");
  return out;
}

inline Matrix transpose(const Matrix& m) {
  Matrix out(m.cols(), m.rows());
  for (Index i = 0; i < m.rows(); ++i)
    for (Index j = 0; j < m.cols(); ++j) out(j, i) = m(i, j);
  return out;
}

// ---------------------------------------------------------------------------
// Elementwise

inline Matrix operator+(const Matrix& a, const Matrix& b) {
  require_same_shape(a, b, "add");
  Matrix out = a;
  auto o = out.data();
  auto bd = b.data();
  for (Index i = 0; i < o.size(); ++i) o[i] += bd[i];
  return out;
}

inline Matrix operator-(const Matrix& a, const Matrix& b) {
  require_same_shape(a, b, "sub");
  Matrix out = a;
  auto o = out.data();
  auto bd = b.data();
  for (Index i = 0; i < o.size(); ++i) o[i] -= bd[i];
  return out;
}

inline Matrix operator*(double s, const Matrix& m) {
  Matrix out = m;
  for (double& v : out.data()) v *= s;
  return out;
}

inline Matrix& operator+=(Matrix& a, const Matrix& b) {
  require_same_shape(a, b, "add_inplace");
  auto o = a.data();
  auto bd = b.data();
  for (Index i = 0; i < o.size(); ++i) o[i] += bd[i];
  return a;
}

/// a += s * b
inline void axpy(Matrix& a, double s, const Matrix& b) {
  require_same_shape(a, b, "axpy");
  auto o = a.data();
  auto bd = b.data();
  for (Index i = 0; i < o.size(); ++i) o[i] += s * bd[i];
}

inline Matrix hadamard(const Matrix& a, const Matrix& b) {
  require_same_shape(a, b, "hadamard");
  Matrix out = a;
  auto o = out.data();
  auto bd = b.data();
  for (Index i = 0; i < o.size(); ++i) o[i] *= bd[i];
  return out;
}

/// Sum of elementwise products.
inline double dot(const Matrix& a, const Matrix& b) {
  require_same_shape(a, b, "dot");
  auto ad = a.data();
  auto bd = b.data();
  double s = 0.0;
  for (Index i = 0; i < ad.size(); ++i) s += ad[i] * bd[i];
  return s;
}

inline double sigmoid(double x) {
  if (x >= 0) return 1.0 / (1.0 + std::exp(-x));
  const double e = std::exp(x);
  return e / (1.0 + e);
}

inline Matrix sigmoid(const Matrix& m) {
  Matrix out = m;
  for (double& v : out.data()) v = sigmoid(v);
  return out;
}

inline double frobenius_norm(const Matrix& m) {
  double s = 0.0;
  for (double v : m.data()) s += v * v;
  return std::sqrt(s);
}

inline double max_abs(const Matrix& m) {
  double s = 0.0;
  for (double v : m.data()) s = std::max(s, std::abs(v));
  return s;
}

inline double max_abs_diff(const Matrix& a, const Matrix& b) {
  require_same_shape(a, b, "max_abs_diff");
  double s = 0.0;
  for (Index i = 0; i < a.size(); ++i) s = std::max(s, std::abs(a.data()[i] - b.data()[i]));
  return s;
}

// ---------------------------------------------------------------------------
// Reductions and slicing

inline Vector row_sums(const Matrix& m) {
  Vector out(m.rows(), 0.0);
  for (Index i = 0; i < m.rows(); ++i)
    for (double v : m.row(i)) out[i] += v;
  return out;
}

inline Vector col_sums(const Matrix& m) {
  Vector out(m.cols(), 0.0);
  for (Index i = 0; i < m.rows(); ++i) {
    auto r = m.row(i);
    for (Index j = 0; j < m.cols(); ++j) out[j] += r[j];
  }
  return out;
}

inline Vector row_means(const Matrix& m) {
  Vector out = row_sums(m);
  if (m.cols() > 0)
    for (double& v : out) v /= static_cast<double>(m.cols());
  return out;
}

inline Matrix slice_cols(const Matrix& m, Index begin, Index end) {
  if (begin > end || end > m.cols()) {
    throw ShapeError("slice_cols: [" + std::to_string(begin) + "," + std::to_string(end) +
                     ") of " + shape_str(m));
  }
  Matrix out(m.rows(), end - begin);
  for (Index i = 0; i < m.rows(); ++i)
    for (Index j = begin; j < end; ++j) out(i, j - begin) = m(i, j);
  return out;
}

/// m[:, begin:begin+block.cols()] += block
inline void add_cols(Matrix& m, Index begin, const Matrix& block) {
  if (block.rows() != m.rows() || begin + block.cols() > m.cols()) {
    throw ShapeError("add_cols: " + shape_str(block) + " into " + shape_str(m));
  }
  for (Index i = 0; i < m.rows(); ++i)
    for (Index j = 0; j < block.cols(); ++j) m(i, begin + j) += block(i, j);
}

// ---------------------------------------------------------------------------
// Row-wise nonlinearities

inline Matrix softmax_rows(const Matrix& m) {
  Matrix out(m.rows(), m.cols());
  for (Index i = 0; i < m.rows(); ++i) {
    auto in = m.row(i);
    auto o = out.row(i);
    if (in.empty()) continue;
    const double mx = *std::max_element(in.begin(), in.end());
    double s = 0.0;
    for (Index j = 0; j < in.size(); ++j) {
      o[j] = std::exp(in[j] - mx);
      s += o[j];
    }
    for (double& v : o) v /= s;
  }
  require_finite(out, "softmax_rows");
  return out;
}

/// Gradient through y = softmax_rows(x) given y and dL/dy.
inline Matrix softmax_rows_backward(const Matrix& y, const Matrix& dy) {
  require_same_shape(y, dy, "softmax_rows_backward");
  Matrix dx(y.rows(), y.cols());
  for (Index i = 0; i < y.rows(); ++i) {
    auto yr = y.row(i);
    auto gr = dy.row(i);
    double s = 0.0;
    for (Index j = 0; j < yr.size(); ++j) s += yr[j] * gr[j];
    auto o = dx.row(i);
    for (Index j = 0; j < yr.size(); ++j) o[j] = yr[j] * (gr[j] - s);
  }
  return dx;
}

inline double row_norm(std::span<const double> r) {
  double s = 0.0;
  for (double v : r) s += v * v;
  return std::sqrt(s);
}

/// Zero rows stay zero: the denominator is clamped at eps.
inline Matrix l2_normalize_rows(const Matrix& m, double eps = kNormEps) {
  if (!(eps > 0)) throw ArgumentError("l2_normalize_rows: eps must be > 0");
  Matrix out = m;
  for (Index i = 0; i < m.rows(); ++i) {
    const double n = std::max(row_norm(m.row(i)), eps);
    for (double& v : out.row(i)) v /= n;
  }
  return out;
}

inline Matrix l2_normalize_rows_backward(const Matrix& x, const Matrix& dy, double eps = kNormEps) {
  require_same_shape(x, dy, "l2_normalize_rows_backward");
  Matrix dx(x.rows(), x.cols());
  for (Index i = 0; i < x.rows(); ++i) {
    auto xr = x.row(i);
    auto gr = dy.row(i);
    auto o = dx.row(i);
    const double n = row_norm(xr);
    if (n <= eps) {
      for (Index j = 0; j < xr.size(); ++j) o[j] = gr[j] / eps;
      continue;
    }
    double yg = 0.0;
    for (Index j = 0; j < xr.size(); ++j) yg += xr[j] * gr[j];
    yg /= n;
    for (Index j = 0; j < xr.size(); ++j) o[j] = (gr[j] - (xr[j] / n) * yg) / n;
  }
  return dx;
}

/// Row-wise standardization without affine parameters.
inline Matrix layer_norm_rows(const Matrix& m, double eps = 1e-5) {
  Matrix out(m.rows(), m.cols());
  const double n = static_cast<double>(m.cols());
  for (Index i = 0; i < m.rows(); ++i) {
    auto r = m.row(i);
    double mean = 0.0;
    for (double v : r) mean += v;
    mean /= n;
    double var = 0.0;
    for (double v : r) var += (v - mean) * (v - mean);
    var /= n;
    const double inv = 1.0 / std::sqrt(var + eps);
    auto o = out.row(i);
    for (Index j = 0; j < r.size(); ++j) o[j] = (r[j] - mean) * inv;
  }
  return out;
}

inline Matrix layer_norm_rows_backward(const Matrix& x, const Matrix& dy, double eps = 1e-5) {
  require_same_shape(x, dy, "layer_norm_rows_backward");
  Matrix dx(x.rows(), x.cols());
  const double n = static_cast<double>(x.cols());
  for (Index i = 0; i < x.rows(); ++i) {
    auto r = x.row(i);
    auto g = dy.row(i);
    double mean = 0.0;
    for (double v : r) mean += v;
    mean /= n;
    double var = 0.0;
    for (double v : r) var += (v - mean) * (v - mean);
    var /= n;
    const double inv = 1.0 / std::sqrt(var + eps);
    double gmean = 0.0, gy = 0.0;
    for (Index j = 0; j < r.size(); ++j) {
      gmean += g[j];
      gy += g[j] * (r[j] - mean) * inv;
    }
    gmean /= n;
    gy /= n;
    auto o = dx.row(i);
    for (Index j = 0; j < r.size(); ++j) o[j] = inv * (g[j] - gmean - (r[j] - mean) * inv * gy);
  }
  return dx;
}

// ---------------------------------------------------------------------------
// Ordering and indexing

/// k indices ordered by value; ties go to the lower index.
inline IndexList topk(std::span<const double> values, Index k, bool largest) {
  if (k > values.size()) {
    throw ArgumentError("topk: k=" + std::to_string(k) + " exceeds length " +
                        std::to_string(values.size()));
  }
  IndexList idx(values.size());
  std::iota(idx.begin(), idx.end(), Index{0});
  auto before = [&](Index a, Index b) {
    if (values[a] != values[b]) return largest ? values[a] > values[b] : values[a] < values[b];
    return a < b;
  };
  std::partial_sort(idx.begin(), idx.begin() + static_cast<std::ptrdiff_t>(k), idx.end(), before);
  idx.resize(k);
  return idx;
}

inline Matrix gather_rows(const Matrix& m, const IndexList& idx) {
  Matrix out(idx.size(), m.cols());
  for (Index j = 0; j < idx.size(); ++j) {
    if (idx[j] >= m.rows()) {
      throw ArgumentError("gather_rows: index " + std::to_string(idx[j]) + " >= rows " +
                          std::to_string(m.rows()));
    }
    std::copy(m.row(idx[j]).begin(), m.row(idx[j]).end(), out.row(j).begin());
  }
  return out;
}

// ---------------------------------------------------------------------------
// Seeded generator: SplitMix64 (Steele, Lea & Flood 2014). Normals come from
// Box-Muller so the stream does not depend on the standard library's
// implementation-defined distributions.

class Rng {
 public:
  explicit Rng(std::uint64_t seed = 0) : seed_(seed), state_(seed) {}

  std::uint64_t seed() const noexcept { return seed_; }

  std::uint64_t next_u64() noexcept {
    std::uint64_t z = (state_ += 0x9E3779B97F4A7C15ULL);
    z = (z ^ (z >> 30)) * 0xBF58476D1CE4E5B9ULL;
    z = (z ^ (z >> 27)) * 0x94D049BB133111EBULL;
    return z ^ (z >> 31);
  }

  /// Uniform in [0, 1) with 53 bits.
  double uniform() noexcept { return static_cast<double>(next_u64() >> 11) * 0x1.0p-53; }

  double uniform(double lo, double hi) noexcept { return lo + (hi - lo) * uniform(); }

  double normal() noexcept {
    if (has_spare_) {
      has_spare_ = false;
      return spare_;
    }
    double u1 = uniform();
    while (u1 <= 0.0) u1 = uniform();
    const double u2 = uniform();
    const double r = std::sqrt(-2.0 * std::log(u1));
    const double th = 2.0 * 3.14159265358979323846 * u2;
    spare_ = r * std::sin(th);
    has_spare_ = true;
    return r * std::cos(th);
  }

  /// Uniform integer in [0, n) by rejection.
  Index below(Index n) {
    if (n == 0) throw ArgumentError("Rng::below: empty range");
    const std::uint64_t bound = static_cast<std::uint64_t>(n);
    const std::uint64_t limit = std::numeric_limits<std::uint64_t>::max() -
                                std::numeric_limits<std::uint64_t>::max() % bound;
    std::uint64_t v;
    do {
      v = next_u64();
    } while (v >= limit);
    return static_cast<Index>(v % bound);
  }

  /// k distinct values from [0, n), in draw order (partial Fisher-Yates).
  IndexList sample_distinct(Index n, Index k) {
    if (k > n) throw ArgumentError("Rng::sample_distinct: k > n");
    IndexList pool(n);
    std::iota(pool.begin(), pool.end(), Index{0});
    for (Index i = 0; i < k; ++i) std::swap(pool[i], pool[i + below(n - i)]);
    pool.resize(k);
    return pool;
  }

  Matrix normal_matrix(Index rows, Index cols, double scale = 1.0) {
    Matrix m(rows, cols);
    for (double& v : m.data()) v = scale * normal();
    return m;
  }

 private:
  std::uint64_t seed_;
  std::uint64_t state_;
  double spare_ = 0.0;
  bool has_spare_ = false;
};

// ---------------------------------------------------------------------------
// Finite differences

/// Central differences of a scalar function, one coordinate at a time.
inline Vector fd_gradient(const std::function<double(std::span<const double>)>& f,
                          std::span<const double> x, double h) {
  if (!(h > 0)) throw ArgumentError("fd_gradient: h must be > 0");
  Vector xp(x.begin(), x.end());
  Vector grad(x.size());
  for (Index i = 0; i < x.size(); ++i) {
    const double orig = xp[i];
    xp[i] = orig + h;
    const double fp = f(xp);
    xp[i] = orig - h;
    const double fm = f(xp);
    xp[i] = orig;
    if (!std::isfinite(fp) || !std::isfinite(fm)) {
      throw NumericError("fd_gradient: non-finite function value at coordinate " +
                         std::to_string(i));
    }
    grad[i] = (fp - fm) / (2.0 * h);
  }
  return grad;
}

/// ||a - b|| / max(||a||, ||b||, floor); zero when both vanish.
inline double relative_error(std::span<const double> a, std::span<const double> b,
                             double floor = 1e-12) {
  if (a.size() != b.size()) throw ShapeError("relative_error: length mismatch");
  double diff = 0.0, na = 0.0, nb = 0.0;
  for (Index i = 0; i < a.size(); ++i) {
    diff += (a[i] - b[i]) * (a[i] - b[i]);
    na += a[i] * a[i];
    nb += b[i] * b[i];
  }
  const double denom = std::max({std::sqrt(na), std::sqrt(nb), floor});
  return std::sqrt(diff) / denom;
}

}  // namespace xagent
