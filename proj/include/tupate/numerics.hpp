#pragma once

// Deterministic numeric kernel: dense tensors, matmul, softmax, layer norm,
// Adam and a central-difference gradient checker. Everything is templated on
// the scalar type so the same model code can run in float (production) and
// double (gradient verification).

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <cstdint>
#include <cstring>
#include <functional>
#include <numeric>
#include <span>
#include <stdexcept>
#include <string>
#include <vector>

namespace tupate {

class Error : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

inline std::string dims_to_string(const std::vector<std::size_t>& dims) {
  std::string s = "[";
  for (std::size_t i = 0; i < dims.size(); ++i) {
    if (i) s += "x";
    s += std::to_string(dims[i]);
  }
  return s + "]";
}

template <class T>
class BasicTensor {
 public:
  using value_type = T;

  BasicTensor() = default;
  explicit BasicTensor(std::vector<std::size_t> dims, T fill = T(0))
      : dims_(std::move(dims)), data_(count(dims_), fill) {}
  BasicTensor(std::vector<std::size_t> dims, std::vector<T> data)
      : dims_(std::move(dims)), data_(std::move(data)) {
    if (data_.size() != count(dims_)) {
      throw Error("tensor data length " + std::to_string(data_.size()) +
                  " does not match dims " + dims_to_string(dims_));
    }
  }

  static BasicTensor matrix(std::size_t rows, std::size_t cols, std::vector<T> data) {
    return BasicTensor({rows, cols}, std::move(data));
  }

  const std::vector<std::size_t>& dims() const { return dims_; }
  std::size_t rank() const { return dims_.size(); }
  std::size_t dim(std::size_t i) const { return dims_.at(i); }
  std::size_t size() const { return data_.size(); }
  bool empty() const { return data_.empty(); }

  std::size_t rows() const { return dims_.size() == 1 ? 1 : dims_.at(0); }
  std::size_t cols() const { return dims_.empty() ? 0 : dims_.back(); }

  std::span<T> data() { return data_; }
  std::span<const T> data() const { return data_; }
  std::vector<T>& raw() { return data_; }
  const std::vector<T>& raw() const { return data_; }

  T& operator[](std::size_t i) { return data_[i]; }
  const T& operator[](std::size_t i) const { return data_[i]; }
  T& at(std::size_t r, std::size_t c) { return data_[r * cols() + c]; }
  const T& at(std::size_t r, std::size_t c) const { return data_[r * cols() + c]; }

  std::span<T> row(std::size_t r) { return std::span<T>(data_).subspan(r * cols(), cols()); }
  std::span<const T> row(std::size_t r) const {
    return std::span<const T>(data_).subspan(r * cols(), cols());
  }

  void fill(T v) { std::fill(data_.begin(), data_.end(), v); }

  bool all_finite() const {
    return std::all_of(data_.begin(), data_.end(), [](T v) { return std::isfinite(v); });
  }

  template <class U>
  BasicTensor<U> cast() const {
    std::vector<U> out(data_.size());
    std::transform(data_.begin(), data_.end(), out.begin(), [](T v) { return static_cast<U>(v); });
    return BasicTensor<U>(dims_, std::move(out));
  }

  friend bool operator==(const BasicTensor& a, const BasicTensor& b) {
    return a.dims_ == b.dims_ && a.data_ == b.data_;
  }

 private:
  static std::size_t count(const std::vector<std::size_t>& dims) {
    std::size_t n = 1;
    for (auto d : dims) {
      if (d == 0) throw Error("tensor dims must be positive, got " + dims_to_string(dims));
      n *= d;
    }
    return dims.empty() ? 0 : n;
  }

  std::vector<std::size_t> dims_;
  std::vector<T> data_;
};

using Tensor = BasicTensor<float>;

/// Bitwise equality, so that -0.0 and 0.0 differ and NaN payloads compare.
template <class T>
bool bit_identical(const BasicTensor<T>& a, const BasicTensor<T>& b) {
  if (a.dims() != b.dims()) return false;
  auto da = a.data();
  auto db = b.data();
  return std::equal(da.begin(), da.end(), db.begin(), [](T x, T y) {
    return std::memcmp(&x, &y, sizeof(T)) == 0;
  });
}

template <class T>
void ensure_finite(const BasicTensor<T>& t, const char* op) {
  if (!t.all_finite()) throw Error(std::string(op) + ": non-finite value produced");
}

// ---------------------------------------------------------------------------
// Random numbers. A counter-based generator: output i of a stream is a pure
// function of (key, i), so streams can be derived and replayed independently.

inline std::uint64_t mix64(std::uint64_t z) {
  z += 0x9e3779b97f4a7c15ULL;
  z = (z ^ (z >> 30)) * 0xbf58476d1ce4e5b9ULL;
  z = (z ^ (z >> 27)) * 0x94d049bb133111ebULL;
  return z ^ (z >> 31);
}

class Rng {
 public:
  explicit Rng(std::uint64_t seed = 0) : key_(mix64(seed)) {}

  /// Independent stream keyed by (this stream's key, tag).
  Rng derive(std::uint64_t tag) const {
    Rng r;
    r.key_ = mix64(key_ ^ mix64(tag + 0x632be59bd9b4e019ULL));
    return r;
  }
  Rng derive(const std::string& tag) const { return derive(fnv1a(tag)); }

  std::uint64_t next_u64() { return mix64(key_ + 0xd1b54a32d192ed03ULL * ++counter_); }

  /// Uniform in [0, 1) with 53 bits.
  double uniform() { return static_cast<double>(next_u64() >> 11) * 0x1.0p-53; }

  /// Uniform integer in [0, n).
  std::uint64_t below(std::uint64_t n) {
    if (n == 0) throw Error("Rng::below: empty range");
    const std::uint64_t limit = UINT64_MAX - UINT64_MAX % n;
    std::uint64_t x;
    do {
      x = next_u64();
    } while (x >= limit);
    return x % n;
  }

  double normal(double mean = 0.0, double stddev = 1.0) {
    if (has_spare_) {
      has_spare_ = false;
      return mean + stddev * spare_;
    }
    double u1;
    do {
      u1 = uniform();
    } while (u1 <= 0.0);
    const double u2 = uniform();
    const double r = std::sqrt(-2.0 * std::log(u1));
    const double theta = 2.0 * 3.14159265358979323846 * u2;
    spare_ = r * std::sin(theta);
    has_spare_ = true;
    return mean + stddev * r * std::cos(theta);
  }

  template <class It>
  void shuffle(It first, It last) {
    const auto n = static_cast<std::uint64_t>(last - first);
    for (std::uint64_t i = n; i > 1; --i) {
      std::iter_swap(first + (i - 1), first + below(i));
    }
  }

  static std::uint64_t fnv1a(const std::string& s) {
    std::uint64_t h = 0xcbf29ce484222325ULL;
    for (unsigned char c : s) {
      h ^= c;
      h *= 0x100000001b3ULL;
    }
    return h;
  }

  std::uint64_t counter() const { return counter_; }

 private:
  std::uint64_t key_ = 0;
  std::uint64_t counter_ = 0;
  double spare_ = 0.0;
  bool has_spare_ = false;
};

template <class T>
BasicTensor<T> randn(std::vector<std::size_t> dims, double stddev, Rng& rng) {
  BasicTensor<T> t(std::move(dims));
  for (auto& v : t.data()) v = static_cast<T>(rng.normal(0.0, stddev));
  return t;
}

// ---------------------------------------------------------------------------
// Dense kernels. Sums accumulate in double regardless of T.

template <class T>
BasicTensor<T> matmul(const BasicTensor<T>& a, const BasicTensor<T>& b) {
  if (a.rank() != 2 || b.rank() != 2 || a.dim(1) != b.dim(0)) {
    throw Error("matmul: dimension mismatch " + dims_to_string(a.dims()) + " x " +
                dims_to_string(b.dims()));
  }
  const std::size_t m = a.dim(0), k = a.dim(1), n = b.dim(1);
  BasicTensor<T> c({m, n});
  std::vector<double> acc(n);
  for (std::size_t i = 0; i < m; ++i) {
    std::fill(acc.begin(), acc.end(), 0.0);
    for (std::size_t t = 0; t < k; ++t) {
      const double av = a[i * k + t];
      const T* brow = &b[t * n];
      for (std::size_t j = 0; j < n; ++j) acc[j] += av * brow[j];
    }
    for (std::size_t j = 0; j < n; ++j) c[i * n + j] = static_cast<T>(acc[j]);
  }
  ensure_finite(c, "matmul");
  return c;
}

namespace kernel {

// y[m x n] (+)= x[m x k] * w[n x k]^T, row-major spans.
template <class T>
void matmul_nt(std::span<const T> x, std::span<const T> w, std::span<T> y, std::size_t m,
               std::size_t k, std::size_t n, bool accumulate = false) {
  for (std::size_t i = 0; i < m; ++i) {
    const T* xr = &x[i * k];
    for (std::size_t j = 0; j < n; ++j) {
      const T* wr = &w[j * k];
      double s = 0.0;
      for (std::size_t t = 0; t < k; ++t) s += static_cast<double>(xr[t]) * wr[t];
      y[i * n + j] = static_cast<T>(accumulate ? y[i * n + j] + s : s);
    }
  }
}

// y[m x k] (+)= x[m x n] * w[n x k]
template <class T>
void matmul_nn(std::span<const T> x, std::span<const T> w, std::span<T> y, std::size_t m,
               std::size_t n, std::size_t k, bool accumulate = false) {
  std::vector<double> acc(k);
  for (std::size_t i = 0; i < m; ++i) {
    if (accumulate) {
      for (std::size_t t = 0; t < k; ++t) acc[t] = y[i * k + t];
    } else {
      std::fill(acc.begin(), acc.end(), 0.0);
    }
    for (std::size_t j = 0; j < n; ++j) {
      const double xv = x[i * n + j];
      if (xv == 0.0) continue;
      const T* wr = &w[j * k];
      for (std::size_t t = 0; t < k; ++t) acc[t] += xv * wr[t];
    }
    for (std::size_t t = 0; t < k; ++t) y[i * k + t] = static_cast<T>(acc[t]);
  }
}

// g[n x k] += dy[m x n]^T * x[m x k]
template <class T>
void matmul_tn_acc(std::span<const T> dy, std::span<const T> x, std::span<T> g, std::size_t m,
                   std::size_t n, std::size_t k) {
  std::vector<double> acc(k);
  for (std::size_t j = 0; j < n; ++j) {
    for (std::size_t t = 0; t < k; ++t) acc[t] = g[j * k + t];
    for (std::size_t i = 0; i < m; ++i) {
      const double d = dy[i * n + j];
      if (d == 0.0) continue;
      const T* xr = &x[i * k];
      for (std::size_t t = 0; t < k; ++t) acc[t] += d * xr[t];
    }
    for (std::size_t t = 0; t < k; ++t) g[j * k + t] = static_cast<T>(acc[t]);
  }
}

template <class T>
void softmax_inplace(std::span<T> row) {
  if (row.empty()) return;
  const T mx = *std::max_element(row.begin(), row.end());
  double sum = 0.0;
  for (auto& v : row) {
    const double e = std::exp(static_cast<double>(v) - static_cast<double>(mx));
    v = static_cast<T>(e);
    sum += e;
  }
  for (auto& v : row) v = static_cast<T>(static_cast<double>(v) / sum);
}

}  // namespace kernel

/// Softmax along `axis` (negative counts from the back). Max-shift stabilized.
template <class T>
BasicTensor<T> softmax(const BasicTensor<T>& x, int axis = -1) {
  if (x.empty()) return x;
  if (!x.all_finite()) throw Error("softmax: non-finite input");
  const int r = static_cast<int>(x.rank());
  if (axis < 0) axis += r;
  if (axis < 0 || axis >= r) throw Error("softmax: axis out of range");
  std::size_t outer = 1, inner = 1;
  for (int i = 0; i < axis; ++i) outer *= x.dim(i);
  for (int i = axis + 1; i < r; ++i) inner *= x.dim(i);
  const std::size_t len = x.dim(axis);

  BasicTensor<T> y = x;
  std::vector<T> buf(len);
  for (std::size_t o = 0; o < outer; ++o) {
    for (std::size_t in = 0; in < inner; ++in) {
      for (std::size_t j = 0; j < len; ++j) buf[j] = x[(o * len + j) * inner + in];
      kernel::softmax_inplace<T>(buf);
      for (std::size_t j = 0; j < len; ++j) y[(o * len + j) * inner + in] = buf[j];
    }
  }
  return y;
}

template <class T>
struct LayerNormCache {
  std::vector<T> xhat;  // normalized input, rows x cols
  std::vector<double> rstd;
};

inline constexpr double kLayerNormEps = 1e-5;

/// Row-wise layer norm over the last axis: y = gamma * (x - mean) / sqrt(var + eps) + beta.
template <class T>
void layer_norm_rows(std::span<const T> x, std::span<const T> gamma, std::span<const T> beta,
                     std::span<T> y, std::size_t rows, std::size_t cols,
                     LayerNormCache<T>* cache = nullptr) {
  if (cache) {
    cache->xhat.resize(rows * cols);
    cache->rstd.resize(rows);
  }
  for (std::size_t r = 0; r < rows; ++r) {
    const T* xr = &x[r * cols];
    double mean = 0.0;
    for (std::size_t c = 0; c < cols; ++c) mean += xr[c];
    mean /= static_cast<double>(cols);
    double var = 0.0;
    for (std::size_t c = 0; c < cols; ++c) {
      const double d = xr[c] - mean;
      var += d * d;
    }
    var /= static_cast<double>(cols);
    const double rstd = 1.0 / std::sqrt(var + kLayerNormEps);
    for (std::size_t c = 0; c < cols; ++c) {
      const double xh = (xr[c] - mean) * rstd;
      if (cache) cache->xhat[r * cols + c] = static_cast<T>(xh);
      y[r * cols + c] = static_cast<T>(xh * gamma[c] + beta[c]);
    }
    if (cache) cache->rstd[r] = rstd;
  }
}

template <class T>
BasicTensor<T> layer_norm(const BasicTensor<T>& x, const BasicTensor<T>& gamma,
                          const BasicTensor<T>& beta) {
  const std::size_t cols = x.cols();
  if (gamma.size() != cols || beta.size() != cols) throw Error("layer_norm: shape mismatch");
  BasicTensor<T> y(x.dims());
  layer_norm_rows<T>(x.data(), gamma.data(), beta.data(), y.data(), x.size() / cols, cols);
  ensure_finite(y, "layer_norm");
  return y;
}

/// Backward of layer_norm_rows. Accumulates into dgamma/dbeta (if non-empty) and
/// writes (or accumulates) dx.
template <class T>
void layer_norm_rows_backward(std::span<const T> dy, std::span<const T> gamma,
                              const LayerNormCache<T>& cache, std::span<T> dx,
                              std::span<T> dgamma, std::span<T> dbeta, std::size_t rows,
                              std::size_t cols, bool accumulate_dx) {
  std::vector<double> dxhat(cols);
  for (std::size_t r = 0; r < rows; ++r) {
    const T* dyr = &dy[r * cols];
    const T* xh = &cache.xhat[r * cols];
    double mean_d = 0.0, mean_dx = 0.0;
    for (std::size_t c = 0; c < cols; ++c) {
      dxhat[c] = static_cast<double>(dyr[c]) * gamma[c];
      mean_d += dxhat[c];
      mean_dx += dxhat[c] * xh[c];
      if (!dgamma.empty()) dgamma[c] = static_cast<T>(dgamma[c] + static_cast<double>(dyr[c]) * xh[c]);
      if (!dbeta.empty()) dbeta[c] = static_cast<T>(dbeta[c] + dyr[c]);
    }
    mean_d /= static_cast<double>(cols);
    mean_dx /= static_cast<double>(cols);
    const double rstd = cache.rstd[r];
    for (std::size_t c = 0; c < cols; ++c) {
      const double v = rstd * (dxhat[c] - mean_d - xh[c] * mean_dx);
      dx[r * cols + c] = static_cast<T>(accumulate_dx ? dx[r * cols + c] + v : v);
    }
  }
}

// GELU, exact erf form.
inline double gelu(double x) { return 0.5 * x * (1.0 + std::erf(x / std::sqrt(2.0))); }
inline double gelu_grad(double x) {
  constexpr double kInvSqrt2Pi = 0.39894228040143267794;
  return 0.5 * (1.0 + std::erf(x / std::sqrt(2.0))) + x * kInvSqrt2Pi * std::exp(-0.5 * x * x);
}

// ---------------------------------------------------------------------------
// Adam

struct AdamConfig {
  double lr = 1e-3;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;
};

template <class T>
struct AdamState {
  AdamConfig config;
  std::uint64_t step = 0;
  std::vector<BasicTensor<T>> m;
  std::vector<BasicTensor<T>> v;

  AdamState() = default;
  explicit AdamState(AdamConfig cfg) : config(cfg) {}
};

/// One Adam update with bias correction over aligned parameter/gradient lists.
/// Moment buffers are created lazily on the first step.
template <class T>
void adam_step(std::span<BasicTensor<T>* const> params, std::span<const BasicTensor<T>* const> grads,
               AdamState<T>& state) {
  if (params.size() != grads.size()) throw Error("adam_step: parameter/gradient count mismatch");
  if (state.m.empty()) {
    for (auto* p : params) {
      state.m.emplace_back(p->dims());
      state.v.emplace_back(p->dims());
    }
  }
  if (state.m.size() != params.size()) throw Error("adam_step: optimizer state does not match parameters");
  for (std::size_t i = 0; i < params.size(); ++i) {
    if (params[i]->dims() != grads[i]->dims() || params[i]->dims() != state.m[i].dims()) {
      throw Error("adam_step: shape mismatch " + dims_to_string(params[i]->dims()) + " vs " +
                  dims_to_string(grads[i]->dims()));
    }
  }
  ++state.step;
  const auto& c = state.config;
  const double bc1 = 1.0 - std::pow(c.beta1, static_cast<double>(state.step));
  const double bc2 = 1.0 - std::pow(c.beta2, static_cast<double>(state.step));
  for (std::size_t i = 0; i < params.size(); ++i) {
    auto p = params[i]->data();
    auto g = grads[i]->data();
    auto m = state.m[i].data();
    auto v = state.v[i].data();
    for (std::size_t j = 0; j < p.size(); ++j) {
      const double gj = g[j];
      const double mj = c.beta1 * m[j] + (1.0 - c.beta1) * gj;
      const double vj = c.beta2 * v[j] + (1.0 - c.beta2) * gj * gj;
      m[j] = static_cast<T>(mj);
      v[j] = static_cast<T>(vj);
      const double update = c.lr * (mj / bc1) / (std::sqrt(vj / bc2) + c.eps);
      p[j] = static_cast<T>(p[j] - update);
    }
  }
}

// ---------------------------------------------------------------------------
// Gradient checking

inline constexpr double kFiniteDiffStep = 1e-3;

/// Max over `coords` of |analytic - central difference| / (|analytic| + 1e-8).
/// `f` evaluates the scalar objective for the current contents of `params`;
/// `params` is perturbed in place and restored exactly.
template <class T>
double finite_diff_check(const std::function<double()>& f, std::span<T> params,
                         std::span<const T> analytic, std::span<const std::size_t> coords,
                         double h = kFiniteDiffStep) {
  if (analytic.size() != params.size()) throw Error("finite_diff_check: gradient size mismatch");
  double worst = 0.0;
  for (std::size_t idx : coords) {
    if (idx >= params.size()) throw Error("finite_diff_check: coordinate out of range");
    const T saved = params[idx];
    params[idx] = static_cast<T>(saved + h);
    const double fp = f();
    params[idx] = static_cast<T>(saved - h);
    const double fm = f();
    params[idx] = saved;
    if (!std::isfinite(fp) || !std::isfinite(fm)) throw Error("finite_diff_check: non-finite objective");
    const double numeric = (fp - fm) / (2.0 * h);
    const double a = analytic[idx];
    worst = std::max(worst, std::abs(a - numeric) / (std::abs(a) + 1e-8));
  }
  return worst;
}

/// Convenience overload for a scalar function with an analytic gradient over a
/// plain vector of doubles.
inline double finite_diff_check(const std::function<double(std::span<const double>)>& f,
                                const std::function<std::vector<double>(std::span<const double>)>& grad,
                                std::vector<double> x, std::span<const std::size_t> coords,
                                double h = kFiniteDiffStep) {
  const auto g = grad(x);
  std::span<double> xs(x);
  return finite_diff_check<double>([&] { return f(xs); }, xs, g, coords, h);
}

}  // namespace tupate
