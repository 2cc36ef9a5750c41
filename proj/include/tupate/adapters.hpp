#pragma once

// Parameter-efficient tuning: prefix (extra key/value rows per layer), bias
// (additive deltas on every linear-layer bias) and low-rank (h = Wx + b + s*BAx
// on the query and value projections). Also the attention and linear kernels
// the model routes through, so the adapter math lives in one place.

#include <cmath>
#include <cstddef>
#include <functional>
#include <set>
#include <string>
#include <variant>
#include <vector>

#include "tupate/config.hpp"
#include "tupate/numerics.hpp"

namespace tupate {

enum class Method { Prefix, Bias, Lora, Full };

inline std::string to_string(Method m) {
  switch (m) {
    case Method::Prefix: return "prefix";
    case Method::Bias: return "bias";
    case Method::Lora: return "lora";
    case Method::Full: return "full";
  }
  return "?";
}

inline Method parse_method(const std::string& s) {
  if (s == "prefix") return Method::Prefix;
  if (s == "bias") return Method::Bias;
  if (s == "lora") return Method::Lora;
  if (s == "full") return Method::Full;
  throw Error("unknown method '" + s + "' (expected prefix, bias, lora or full)");
}

struct AdapterOptions {
  std::size_t prefix_length = 20;
  std::size_t lora_rank = 8;
  double lora_alpha = 8.0;
  double init_std = 0.02;
};

template <class T>
struct PrefixLayer {
  BasicTensor<T> k;  // [n x d_h], empty when n == 0
  BasicTensor<T> v;
};

template <class T>
struct PrefixAdapter {
  std::size_t length = 0;
  std::vector<PrefixLayer<T>> layers;
};

// One delta per linear-layer bias, in layer-definition order.
template <class T>
struct BiasLayer {
  BasicTensor<T> bq, bk, bv, bo, b1, b2;
};

template <class T>
struct BiasAdapter {
  std::vector<BiasLayer<T>> layers;
};

template <class T>
struct LoraFactors {
  BasicTensor<T> a;  // [r x k]
  BasicTensor<T> b;  // [d x r]
};

template <class T>
struct LoraLayer {
  LoraFactors<T> q;
  LoraFactors<T> v;
};

template <class T>
struct LoraAdapter {
  std::size_t rank = 0;
  double alpha = 0.0;
  std::vector<LoraLayer<T>> layers;

  double scaling() const { return alpha / static_cast<double>(rank); }
};

template <class T>
using BasicAdapter = std::variant<PrefixAdapter<T>, BiasAdapter<T>, LoraAdapter<T>>;
using AdapterParams = BasicAdapter<float>;

template <class T>
Method method_of(const BasicAdapter<T>& a) {
  switch (a.index()) {
    case 0: return Method::Prefix;
    case 1: return Method::Bias;
    default: return Method::Lora;
  }
}

template <class T>
std::size_t adapter_layers(const BasicAdapter<T>& a) {
  return std::visit([](const auto& x) { return x.layers.size(); }, a);
}

// ---------------------------------------------------------------------------
// Naming. Adapter tensors live under the same "layers.<l>." prefix as the base
// weights they modify.

inline std::string layer_prefix(std::size_t l) { return "layers." + std::to_string(l) + "."; }

inline const std::vector<std::string>& bias_names() {
  static const std::vector<std::string> names = {"bq", "bk", "bv", "bo", "b1", "b2"};
  return names;
}

inline const std::vector<std::string>& head_names() {
  static const std::vector<std::string> names = {"head.w", "head.b"};
  return names;
}

/// Visit every adapter tensor in canonical order: per layer, prefix K then V;
/// bias deltas bq bk bv bo b1 b2; LoRA q.a q.b v.a v.b.
template <class A, class F>
void for_each_adapter_tensor(A& adapter, F&& f) {
  std::visit(
      [&](auto& ad) {
        for (std::size_t l = 0; l < ad.layers.size(); ++l) {
          auto& L = ad.layers[l];
          const std::string p = layer_prefix(l);
          if constexpr (requires { L.k; L.v; }) {
            if (ad.length == 0) continue;
            f(p + "prefix.k", L.k);
            f(p + "prefix.v", L.v);
          } else if constexpr (requires { L.bq; }) {
            f(p + "bias.bq", L.bq);
            f(p + "bias.bk", L.bk);
            f(p + "bias.bv", L.bv);
            f(p + "bias.bo", L.bo);
            f(p + "bias.b1", L.b1);
            f(p + "bias.b2", L.b2);
          } else {
            f(p + "lora.q.a", L.q.a);
            f(p + "lora.q.b", L.q.b);
            f(p + "lora.v.a", L.v.a);
            f(p + "lora.v.b", L.v.b);
          }
        }
      },
      adapter);
}

template <class T>
std::vector<std::string> adapter_tensor_names(const BasicAdapter<T>& a) {
  std::vector<std::string> names;
  for_each_adapter_tensor(a, [&](const std::string& n, const auto&) { names.push_back(n); });
  return names;
}

// ---------------------------------------------------------------------------
// Initialization

template <class T>
BasicAdapter<T> init_adapter(Method method, const ModelConfig& cfg, const AdapterOptions& opt,
                             Rng& rng) {
  cfg.validate();
  switch (method) {
    case Method::Prefix: {
      PrefixAdapter<T> p;
      p.length = opt.prefix_length;
      p.layers.resize(cfg.n_layers);
      if (p.length > 0) {
        for (auto& L : p.layers) {
          L.k = randn<T>({p.length, cfg.d_h}, opt.init_std, rng);
          L.v = randn<T>({p.length, cfg.d_h}, opt.init_std, rng);
        }
      }
      return p;
    }
    case Method::Bias: {
      BiasAdapter<T> b;
      b.layers.resize(cfg.n_layers);
      for (auto& L : b.layers) {
        L.bq = BasicTensor<T>({cfg.d_h});
        L.bk = BasicTensor<T>({cfg.d_h});
        L.bv = BasicTensor<T>({cfg.d_h});
        L.bo = BasicTensor<T>({cfg.d_h});
        L.b1 = BasicTensor<T>({cfg.d_ffn});
        L.b2 = BasicTensor<T>({cfg.d_h});
      }
      return b;
    }
    case Method::Lora: {
      if (opt.lora_rank == 0 || opt.lora_rank > cfg.d_h) {
        throw Error("lora rank " + std::to_string(opt.lora_rank) + " must be in [1, " +
                    std::to_string(cfg.d_h) + "]");
      }
      if (!(opt.lora_alpha > 0.0)) throw Error("lora alpha must be positive");
      LoraAdapter<T> a;
      a.rank = opt.lora_rank;
      a.alpha = opt.lora_alpha;
      a.layers.resize(cfg.n_layers);
      for (auto& L : a.layers) {
        for (auto* f : {&L.q, &L.v}) {
          f->a = randn<T>({a.rank, cfg.d_h}, opt.init_std, rng);
          f->b = BasicTensor<T>({cfg.d_h, a.rank});
        }
      }
      return a;
    }
    case Method::Full:
      break;
  }
  throw Error("init_adapter: method '" + to_string(method) + "' has no adapter");
}

template <class U, class T>
BasicAdapter<U> cast_adapter(const BasicAdapter<T>& src) {
  return std::visit(
      [](const auto& ad) -> BasicAdapter<U> {
        using Ad = std::remove_cvref_t<decltype(ad)>;
        if constexpr (std::is_same_v<Ad, PrefixAdapter<T>>) {
          PrefixAdapter<U> out;
          out.length = ad.length;
          out.layers.resize(ad.layers.size());
          for (std::size_t l = 0; l < ad.layers.size(); ++l) {
            if (ad.length == 0) continue;
            out.layers[l].k = ad.layers[l].k.template cast<U>();
            out.layers[l].v = ad.layers[l].v.template cast<U>();
          }
          return out;
        } else if constexpr (std::is_same_v<Ad, BiasAdapter<T>>) {
          BiasAdapter<U> out;
          for (const auto& L : ad.layers) {
            out.layers.push_back({L.bq.template cast<U>(), L.bk.template cast<U>(), L.bv.template cast<U>(),
                                  L.bo.template cast<U>(), L.b1.template cast<U>(), L.b2.template cast<U>()});
          }
          return out;
        } else {
          LoraAdapter<U> out;
          out.rank = ad.rank;
          out.alpha = ad.alpha;
          for (const auto& L : ad.layers) {
            out.layers.push_back({{L.q.a.template cast<U>(), L.q.b.template cast<U>()},
                                  {L.v.a.template cast<U>(), L.v.b.template cast<U>()}});
          }
          return out;
        }
      },
      src);
}

/// Same structure, all tensors zero. Used as gradient storage.
template <class T>
BasicAdapter<T> zeros_like(const BasicAdapter<T>& a) {
  BasicAdapter<T> z = a;
  for_each_adapter_tensor(z, [](const std::string&, BasicTensor<T>& t) { t.fill(T(0)); });
  return z;
}

// ---------------------------------------------------------------------------
// Kernels. Rows are tokens; a linear layer maps x[m x k] to h[m x d] with
// W stored as [d x k].

template <class T>
struct LoraRef {
  const BasicTensor<T>* a = nullptr;
  const BasicTensor<T>* b = nullptr;
  double scaling = 1.0;
};

/// h = x W^T + (b + delta) + scaling * (x A^T) B^T. `ax` receives x A^T when a
/// low-rank term is present (needed by the backward pass).
template <class T>
void linear_rows(std::span<const T> x, std::size_t m, const BasicTensor<T>& w,
                 const BasicTensor<T>& b, const BasicTensor<T>* delta, const LoraRef<T>* lora,
                 std::span<T> h, std::vector<T>* ax = nullptr) {
  const std::size_t d = w.dim(0), k = w.dim(1);
  kernel::matmul_nt<T>(x, w.data(), h, m, k, d);
  for (std::size_t i = 0; i < m; ++i) {
    for (std::size_t j = 0; j < d; ++j) {
      double v = static_cast<double>(h[i * d + j]) + b[j];
      if (delta) v += (*delta)[j];
      h[i * d + j] = static_cast<T>(v);
    }
  }
  if (lora && lora->a) {
    const std::size_t r = lora->a->dim(0);
    std::vector<T> local;
    std::vector<T>& t = ax ? *ax : local;
    t.assign(m * r, T(0));
    kernel::matmul_nt<T>(x, lora->a->data(), t, m, k, r);
    std::vector<T> delta_h(m * d);
    kernel::matmul_nt<T>(t, lora->b->data(), delta_h, m, r, d);
    for (std::size_t i = 0; i < m * d; ++i) {
      h[i] = static_cast<T>(h[i] + lora->scaling * static_cast<double>(delta_h[i]));
    }
  }
}

/// Backward of linear_rows. Gradient outputs may be null to skip them; dx is
/// accumulated into.
template <class T>
void linear_rows_backward(std::span<const T> dy, std::span<const T> x, std::size_t m,
                          const BasicTensor<T>& w, const LoraRef<T>* lora,
                          const std::vector<T>* ax, std::span<T> dx, BasicTensor<T>* dw,
                          BasicTensor<T>* db, BasicTensor<T>* da, BasicTensor<T>* dbl) {
  const std::size_t d = w.dim(0), k = w.dim(1);
  if (!dx.empty()) kernel::matmul_nn<T>(dy, w.data(), dx, m, d, k, /*accumulate=*/true);
  if (dw) kernel::matmul_tn_acc<T>(dy, x, dw->data(), m, d, k);
  if (db) {
    for (std::size_t j = 0; j < d; ++j) {
      double s = (*db)[j];
      for (std::size_t i = 0; i < m; ++i) s += dy[i * d + j];
      (*db)[j] = static_cast<T>(s);
    }
  }
  if (lora && lora->a) {
    const std::size_t r = lora->a->dim(0);
    std::vector<T> sdy(m * d);
    for (std::size_t i = 0; i < m * d; ++i) sdy[i] = static_cast<T>(lora->scaling * static_cast<double>(dy[i]));
    if (dbl) kernel::matmul_tn_acc<T>(sdy, std::span<const T>(*ax), dbl->data(), m, d, r);
    std::vector<T> dt(m * r);
    kernel::matmul_nn<T>(sdy, lora->b->data(), dt, m, d, r);
    if (da) kernel::matmul_tn_acc<T>(dt, x, da->data(), m, r, k);
    if (!dx.empty()) kernel::matmul_nn<T>(dt, lora->a->data(), dx, m, r, k, /*accumulate=*/true);
  }
}

template <class T>
struct AttentionCache {
  std::vector<T> probs;  // [heads x m x (n + m)]
};

/// Multi-head scaled dot-product attention with optional key/value prefix rows.
/// q, k, v are [m x d]; kt, vt are [n x d] (n may be 0). Keys are ordered
/// prefix first, then the sequence.
template <class T>
void attention_rows(std::span<const T> q, std::span<const T> k, std::span<const T> v,
                    std::span<const T> kt, std::span<const T> vt, std::size_t m, std::size_t n,
                    std::size_t d, std::size_t heads, std::span<T> ctx, AttentionCache<T>* cache) {
  const std::size_t hd = d / heads;
  const std::size_t len = n + m;
  const double scale = 1.0 / std::sqrt(static_cast<double>(hd));
  std::vector<T> local;
  std::vector<T>& probs = cache ? cache->probs : local;
  probs.assign(heads * m * len, T(0));
  auto key_row = [&](std::size_t j) -> const T* { return j < n ? &kt[j * d] : &k[(j - n) * d]; };
  auto val_row = [&](std::size_t j) -> const T* { return j < n ? &vt[j * d] : &v[(j - n) * d]; };
  for (std::size_t h = 0; h < heads; ++h) {
    const std::size_t off = h * hd;
    for (std::size_t i = 0; i < m; ++i) {
      T* p = &probs[(h * m + i) * len];
      const T* qi = &q[i * d + off];
      for (std::size_t j = 0; j < len; ++j) {
        const T* kj = key_row(j) + off;
        double s = 0.0;
        for (std::size_t t = 0; t < hd; ++t) s += static_cast<double>(qi[t]) * kj[t];
        p[j] = static_cast<T>(s * scale);
      }
      kernel::softmax_inplace<T>(std::span<T>(p, len));
      for (std::size_t t = 0; t < hd; ++t) {
        double s = 0.0;
        for (std::size_t j = 0; j < len; ++j) s += static_cast<double>(p[j]) * val_row(j)[off + t];
        ctx[i * d + off + t] = static_cast<T>(s);
      }
    }
  }
}

/// Backward of attention_rows. dq/dk/dv are overwritten; dkt/dvt accumulate
/// (and may be empty to skip).
template <class T>
void attention_rows_backward(std::span<const T> dctx, std::span<const T> q, std::span<const T> k,
                             std::span<const T> v, std::span<const T> kt, std::span<const T> vt,
                             std::size_t m, std::size_t n, std::size_t d, std::size_t heads,
                             const AttentionCache<T>& cache, std::span<T> dq, std::span<T> dk,
                             std::span<T> dv, std::span<T> dkt, std::span<T> dvt) {
  const std::size_t hd = d / heads;
  const std::size_t len = n + m;
  const double scale = 1.0 / std::sqrt(static_cast<double>(hd));
  std::fill(dq.begin(), dq.end(), T(0));
  std::fill(dk.begin(), dk.end(), T(0));
  std::fill(dv.begin(), dv.end(), T(0));
  std::vector<double> dkey(len * d, 0.0), dval(len * d, 0.0);
  auto key_row = [&](std::size_t j) -> const T* { return j < n ? &kt[j * d] : &k[(j - n) * d]; };
  auto val_row = [&](std::size_t j) -> const T* { return j < n ? &vt[j * d] : &v[(j - n) * d]; };
  std::vector<double> dp(len);
  for (std::size_t h = 0; h < heads; ++h) {
    const std::size_t off = h * hd;
    for (std::size_t i = 0; i < m; ++i) {
      const T* p = &cache.probs[(h * m + i) * len];
      const T* dci = &dctx[i * d + off];
      double dot = 0.0;
      for (std::size_t j = 0; j < len; ++j) {
        const T* vj = val_row(j) + off;
        double s = 0.0;
        for (std::size_t t = 0; t < hd; ++t) {
          s += static_cast<double>(dci[t]) * vj[t];
          dval[j * d + off + t] += static_cast<double>(p[j]) * dci[t];
        }
        dp[j] = s;
        dot += s * p[j];
      }
      const T* qi = &q[i * d + off];
      for (std::size_t j = 0; j < len; ++j) {
        const double ds = p[j] * (dp[j] - dot) * scale;
        if (ds == 0.0) continue;
        const T* kj = key_row(j) + off;
        for (std::size_t t = 0; t < hd; ++t) {
          dq[i * d + off + t] = static_cast<T>(dq[i * d + off + t] + ds * kj[t]);
          dkey[j * d + off + t] += ds * qi[t];
        }
      }
    }
  }
  for (std::size_t j = 0; j < len; ++j) {
    for (std::size_t c = 0; c < d; ++c) {
      if (j < n) {
        if (!dkt.empty()) dkt[j * d + c] = static_cast<T>(dkt[j * d + c] + dkey[j * d + c]);
        if (!dvt.empty()) dvt[j * d + c] = static_cast<T>(dvt[j * d + c] + dval[j * d + c]);
      } else {
        dk[(j - n) * d + c] = static_cast<T>(dkey[j * d + c]);
        dv[(j - n) * d + c] = static_cast<T>(dval[j * d + c]);
      }
    }
  }
}

// ---------------------------------------------------------------------------
// Standalone forms of the three update rules.

template <class T>
struct PrefixAttentionResult {
  BasicTensor<T> output;                // [m x d]
  std::vector<BasicTensor<T>> weights;  // per head, [m x (n + m)]
};

/// Attention over K' = [K_t; K] and V' = [V_t; V]. K_t/V_t may be empty tensors
/// (prefix length 0).
template <class T>
PrefixAttentionResult<T> prefix_attention(const BasicTensor<T>& kt, const BasicTensor<T>& vt,
                                          const BasicTensor<T>& q, const BasicTensor<T>& k,
                                          const BasicTensor<T>& v, std::size_t heads = 1) {
  if (q.rank() != 2 || k.dims() != q.dims() || v.dims() != q.dims()) {
    throw Error("prefix_attention: Q/K/V shapes differ");
  }
  const std::size_t m = q.dim(0), d = q.dim(1);
  if (heads == 0 || d % heads != 0) throw Error("prefix_attention: d_h not divisible by heads");
  const std::size_t n = kt.empty() ? 0 : kt.dim(0);
  if (kt.empty() != vt.empty() || (n > 0 && (kt.dims() != std::vector<std::size_t>{n, d} ||
                                             vt.dims() != kt.dims()))) {
    throw Error("prefix_attention: prefix shape " + dims_to_string(kt.dims()) + "/" +
                dims_to_string(vt.dims()) + " incompatible with d_h " + std::to_string(d));
  }
  PrefixAttentionResult<T> out{BasicTensor<T>({m, d}), {}};
  AttentionCache<T> cache;
  attention_rows<T>(q.data(), k.data(), v.data(), kt.data(), vt.data(), m, n, d, heads,
                    out.output.data(), &cache);
  for (std::size_t h = 0; h < heads; ++h) {
    std::vector<T> w(cache.probs.begin() + h * m * (n + m), cache.probs.begin() + (h + 1) * m * (n + m));
    out.weights.emplace_back(std::vector<std::size_t>{m, n + m}, std::move(w));
  }
  ensure_finite(out.output, "prefix_attention");
  return out;
}

/// h = W x + b + (alpha / r) B A x for a batch of row vectors x[m x k].
template <class T>
BasicTensor<T> lora_linear(const BasicTensor<T>& w, const BasicTensor<T>& b, const BasicTensor<T>& a,
                           const BasicTensor<T>& bm, double alpha, const BasicTensor<T>& x) {
  if (w.rank() != 2) throw Error("lora_linear: W must be a matrix");
  const std::size_t d = w.dim(0), k = w.dim(1);
  if (a.rank() != 2 || bm.rank() != 2) throw Error("lora_linear: A and B must be matrices");
  const std::size_t r = a.dim(0);
  if (r > std::min(d, k)) {
    throw Error("lora_linear: rank " + std::to_string(r) + " exceeds min(d, k) = " +
                std::to_string(std::min(d, k)));
  }
  if (a.dim(1) != k || bm.dim(0) != d || bm.dim(1) != r || b.size() != d || x.cols() != k) {
    throw Error("lora_linear: inconsistent shapes W" + dims_to_string(w.dims()) + " A" +
                dims_to_string(a.dims()) + " B" + dims_to_string(bm.dims()) + " x" +
                dims_to_string(x.dims()));
  }
  const std::size_t m = x.size() / k;
  BasicTensor<T> h({m, d});
  const LoraRef<T> ref{&a, &bm, alpha / static_cast<double>(r)};
  linear_rows<T>(x.data(), m, w, b, nullptr, &ref, h.data());
  ensure_finite(h, "lora_linear");
  return h;
}

/// h = W x + (b + delta) for row vectors x[m x k].
template <class T>
BasicTensor<T> bias_forward(const BasicTensor<T>& w, const BasicTensor<T>& b, const BasicTensor<T>& delta,
                            const BasicTensor<T>& x) {
  if (w.rank() != 2 || b.size() != w.dim(0) || delta.dims() != b.dims() || x.cols() != w.dim(1)) {
    throw Error("bias_forward: shape mismatch W" + dims_to_string(w.dims()) + " b" +
                dims_to_string(b.dims()) + " delta" + dims_to_string(delta.dims()));
  }
  const std::size_t m = x.size() / w.dim(1);
  BasicTensor<T> h({m, w.dim(0)});
  linear_rows<T>(x.data(), m, w, b, &delta, nullptr, h.data());
  ensure_finite(h, "bias_forward");
  return h;
}

// ---------------------------------------------------------------------------
// Trainable sets and parameter counts

/// Names of base-model tensors, canonical order.
inline std::vector<std::string> base_tensor_names(const ModelConfig& cfg) {
  std::vector<std::string> names = {"embed.tok", "embed.pos"};
  for (std::size_t l = 0; l < cfg.n_layers; ++l) {
    const std::string p = layer_prefix(l);
    for (const char* s : {"ln1.g", "ln1.b", "wq", "bq", "wk", "bk", "wv", "bv", "wo", "bo",
                          "ln2.g", "ln2.b", "w1", "b1", "w2", "b2"}) {
      names.push_back(p + s);
    }
  }
  for (const char* s : {"lnf.g", "lnf.b", "head.w", "head.b"}) names.emplace_back(s);
  return names;
}

/// Tensor names that receive gradient updates under `method`. Base weights are
/// included only for full fine-tuning; the classifier head is always trainable.
inline std::set<std::string> trainable_mask(Method method, const ModelConfig& cfg,
                                            const AdapterOptions& opt = {}) {
  std::set<std::string> mask(head_names().begin(), head_names().end());
  for (std::size_t l = 0; l < cfg.n_layers; ++l) {
    const std::string p = layer_prefix(l);
    switch (method) {
      case Method::Prefix:
        if (opt.prefix_length > 0) {
          mask.insert(p + "prefix.k");
          mask.insert(p + "prefix.v");
        }
        break;
      case Method::Bias:
        for (const auto& b : bias_names()) mask.insert(p + "bias." + b);
        break;
      case Method::Lora:
        for (const char* s : {"lora.q.a", "lora.q.b", "lora.v.a", "lora.v.b"}) mask.insert(p + s);
        break;
      case Method::Full:
        break;
    }
  }
  if (method == Method::Full) {
    for (auto& n : base_tensor_names(cfg)) mask.insert(n);
  }
  return mask;
}

inline std::set<std::string> trainable_mask(const std::string& method, const ModelConfig& cfg,
                                            const AdapterOptions& opt = {}) {
  return trainable_mask(parse_method(method), cfg, opt);
}

/// Tuned parameters per layer, classifier head excluded.
inline std::size_t per_layer_dim(Method method, const ModelConfig& cfg, const AdapterOptions& opt = {}) {
  switch (method) {
    case Method::Prefix: return 2 * opt.prefix_length * cfg.d_h;
    case Method::Bias: return 5 * cfg.d_h + cfg.d_ffn;
    case Method::Lora: return 2 * (opt.lora_rank * cfg.d_h + cfg.d_h * opt.lora_rank);
    case Method::Full: break;
  }
  throw Error("per_layer_dim: full fine-tuning has no per-layer adapter");
}

inline std::size_t count_tuned_params(Method method, const ModelConfig& cfg, const AdapterOptions& opt = {}) {
  if (method == Method::Full) {
    std::size_t total = cfg.vocab_size * cfg.d_h + cfg.max_seq_len * cfg.d_h;
    const std::size_t d = cfg.d_h, f = cfg.d_ffn;
    total += cfg.n_layers * (4 * d + 4 * (d * d + d) + (f * d + f) + (d * f + d));
    total += 2 * d + cfg.n_classes * d + cfg.n_classes;
    return total;
  }
  return per_layer_dim(method, cfg, opt) * cfg.n_layers;
}

}  // namespace tupate
