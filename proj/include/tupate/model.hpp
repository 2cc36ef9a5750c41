#pragma once

// Tiny pre-norm transformer encoder with a mean-pooled classification head.
// Forward and backward are written out per layer; adapters plug in through the
// kernels in adapters.hpp.

#include <cmath>
#include <cstddef>
#include <map>
#include <optional>
#include <set>
#include <span>
#include <string>
#include <vector>

#include "tupate/adapters.hpp"
#include "tupate/config.hpp"
#include "tupate/numerics.hpp"

namespace tupate {

template <class T>
struct BlockParams {
  BasicTensor<T> ln1_g, ln1_b;
  BasicTensor<T> wq, bq, wk, bk, wv, bv, wo, bo;
  BasicTensor<T> ln2_g, ln2_b;
  BasicTensor<T> w1, b1, w2, b2;
};

template <class T>
struct BasicModelParams {
  ModelConfig config;
  BasicTensor<T> tok;  // [vocab x d_h]
  BasicTensor<T> pos;  // [max_seq_len x d_h]
  std::vector<BlockParams<T>> layers;
  BasicTensor<T> lnf_g, lnf_b;
  BasicTensor<T> head_w;  // [n_classes x d_h]
  BasicTensor<T> head_b;  // [n_classes]
};

using ModelParams = BasicModelParams<float>;

/// Visit base tensors in canonical order (matches base_tensor_names()).
template <class P, class F>
void for_each_model_tensor(P& p, F&& f) {
  f(std::string("embed.tok"), p.tok);
  f(std::string("embed.pos"), p.pos);
  for (std::size_t l = 0; l < p.layers.size(); ++l) {
    auto& L = p.layers[l];
    const std::string s = layer_prefix(l);
    f(s + "ln1.g", L.ln1_g);
    f(s + "ln1.b", L.ln1_b);
    f(s + "wq", L.wq);
    f(s + "bq", L.bq);
    f(s + "wk", L.wk);
    f(s + "bk", L.bk);
    f(s + "wv", L.wv);
    f(s + "bv", L.bv);
    f(s + "wo", L.wo);
    f(s + "bo", L.bo);
    f(s + "ln2.g", L.ln2_g);
    f(s + "ln2.b", L.ln2_b);
    f(s + "w1", L.w1);
    f(s + "b1", L.b1);
    f(s + "w2", L.w2);
    f(s + "b2", L.b2);
  }
  f(std::string("lnf.g"), p.lnf_g);
  f(std::string("lnf.b"), p.lnf_b);
  f(std::string("head.w"), p.head_w);
  f(std::string("head.b"), p.head_b);
}

template <class T>
std::size_t parameter_count(const BasicModelParams<T>& p) {
  std::size_t n = 0;
  for_each_model_tensor(p, [&](const std::string&, const BasicTensor<T>& t) { n += t.size(); });
  return n;
}

/// Random base model. Linear weights ~ N(0, 1/fan_in), embeddings ~ N(0, 1),
/// layer-norm gains 1, biases 0.
template <class T>
BasicModelParams<T> init_model(const ModelConfig& cfg, Rng& rng) {
  cfg.validate();
  const std::size_t d = cfg.d_h, f = cfg.d_ffn;
  const double sd = 1.0 / std::sqrt(static_cast<double>(d));
  const double sf = 1.0 / std::sqrt(static_cast<double>(f));
  BasicModelParams<T> p;
  p.config = cfg;
  p.tok = randn<T>({cfg.vocab_size, d}, 1.0, rng);
  p.pos = randn<T>({cfg.max_seq_len, d}, 1.0, rng);
  p.layers.resize(cfg.n_layers);
  for (auto& L : p.layers) {
    L.ln1_g = BasicTensor<T>({d}, T(1));
    L.ln1_b = BasicTensor<T>({d});
    L.wq = randn<T>({d, d}, sd, rng);
    L.bq = BasicTensor<T>({d});
    L.wk = randn<T>({d, d}, sd, rng);
    L.bk = BasicTensor<T>({d});
    L.wv = randn<T>({d, d}, sd, rng);
    L.bv = BasicTensor<T>({d});
    L.wo = randn<T>({d, d}, sd, rng);
    L.bo = BasicTensor<T>({d});
    L.ln2_g = BasicTensor<T>({d}, T(1));
    L.ln2_b = BasicTensor<T>({d});
    L.w1 = randn<T>({f, d}, sd, rng);
    L.b1 = BasicTensor<T>({f});
    L.w2 = randn<T>({d, f}, sf, rng);
    L.b2 = BasicTensor<T>({d});
  }
  p.lnf_g = BasicTensor<T>({d}, T(1));
  p.lnf_b = BasicTensor<T>({d});
  p.head_w = randn<T>({cfg.n_classes, d}, sd, rng);
  p.head_b = BasicTensor<T>({cfg.n_classes});
  return p;
}

template <class U, class T>
BasicModelParams<U> cast_model(const BasicModelParams<T>& src) {
  BasicModelParams<U> out;
  out.config = src.config;
  out.layers.resize(src.layers.size());
  std::vector<const BasicTensor<T>*> from;
  for_each_model_tensor(src, [&](const std::string&, const BasicTensor<T>& t) { from.push_back(&t); });
  std::size_t i = 0;
  for_each_model_tensor(out, [&](const std::string&, BasicTensor<U>& t) { t = from[i++]->template cast<U>(); });
  return out;
}

template <class T>
BasicModelParams<T> zeros_like(const BasicModelParams<T>& p) {
  BasicModelParams<T> z = p;
  for_each_model_tensor(z, [](const std::string&, BasicTensor<T>& t) { t.fill(T(0)); });
  return z;
}

template <class T>
void check_adapter_fits(const BasicModelParams<T>& p, const BasicAdapter<T>& a) {
  if (adapter_layers(a) != p.layers.size()) {
    throw Error("adapter has " + std::to_string(adapter_layers(a)) + " layers, model has " +
                std::to_string(p.layers.size()));
  }
  const std::size_t d = p.config.d_h;
  for_each_adapter_tensor(a, [&](const std::string& name, const BasicTensor<T>& t) {
    const auto& dims = t.dims();
    bool ok = true;
    if (name.ends_with("prefix.k") || name.ends_with("prefix.v")) {
      ok = dims.size() == 2 && dims[1] == d;
    } else if (name.ends_with("bias.b1")) {
      ok = dims == std::vector<std::size_t>{p.config.d_ffn};
    } else if (name.find(".bias.") != std::string::npos) {
      ok = dims == std::vector<std::size_t>{d};
    } else if (name.ends_with(".a")) {
      ok = dims.size() == 2 && dims[1] == d && dims[0] <= d;
    } else if (name.ends_with(".b")) {
      ok = dims.size() == 2 && dims[0] == d && dims[1] <= d;
    }
    if (!ok) throw Error("adapter tensor " + name + " has shape " + dims_to_string(dims) + " incompatible with model");
  });
}

// ---------------------------------------------------------------------------
// Batches

struct Example {
  std::vector<int> tokens;
  int label = 0;

  friend bool operator==(const Example&, const Example&) = default;
};

struct Batch {
  std::size_t seq_len = 0;
  std::vector<int> ids;     // [size x seq_len]
  std::vector<int> labels;  // [size]

  std::size_t size() const { return labels.size(); }
  std::span<const int> sequence(std::size_t i) const {
    return std::span<const int>(ids).subspan(i * seq_len, seq_len);
  }

  static Batch from(std::span<const Example> examples) {
    Batch b;
    if (examples.empty()) return b;
    b.seq_len = examples.front().tokens.size();
    for (const auto& e : examples) {
      if (e.tokens.size() != b.seq_len) throw Error("batch: sequences must share one length");
      b.ids.insert(b.ids.end(), e.tokens.begin(), e.tokens.end());
      b.labels.push_back(e.label);
    }
    return b;
  }
};

inline void validate_batch(const ModelConfig& cfg, const Batch& b) {
  if (b.size() == 0) throw Error("batch is empty");
  if (b.seq_len == 0 || b.seq_len > cfg.max_seq_len) {
    throw Error("batch sequence length " + std::to_string(b.seq_len) + " outside [1, " +
                std::to_string(cfg.max_seq_len) + "]");
  }
  if (b.ids.size() != b.size() * b.seq_len) throw Error("batch ids/labels size mismatch");
  for (int id : b.ids) {
    if (id < 0 || static_cast<std::size_t>(id) >= cfg.vocab_size) {
      throw Error("token id " + std::to_string(id) + " outside vocabulary of " + std::to_string(cfg.vocab_size));
    }
  }
  for (int y : b.labels) {
    if (y < 0 || static_cast<std::size_t>(y) >= cfg.n_classes) {
      throw Error("label " + std::to_string(y) + " outside [0, " + std::to_string(cfg.n_classes) + ")");
    }
  }
}

// ---------------------------------------------------------------------------
// Per-sequence forward/backward

namespace detail {

template <class T>
struct LayerHooks {
  std::span<const T> kt, vt;  // prefix rows (maybe empty)
  std::size_t n_prefix = 0;
  const BiasLayer<T>* bias = nullptr;
  LoraRef<T> lora_q, lora_v;
  bool has_lora = false;
};

template <class T>
LayerHooks<T> hooks_for(const BasicAdapter<T>* adapter, std::size_t l) {
  LayerHooks<T> h;
  if (!adapter) return h;
  if (const auto* p = std::get_if<PrefixAdapter<T>>(adapter)) {
    if (p->length > 0) {
      h.kt = p->layers[l].k.data();
      h.vt = p->layers[l].v.data();
      h.n_prefix = p->length;
    }
  } else if (const auto* b = std::get_if<BiasAdapter<T>>(adapter)) {
    h.bias = &b->layers[l];
  } else if (const auto* r = std::get_if<LoraAdapter<T>>(adapter)) {
    const auto& L = r->layers[l];
    h.lora_q = {&L.q.a, &L.q.b, r->scaling()};
    h.lora_v = {&L.v.a, &L.v.b, r->scaling()};
    h.has_lora = true;
  }
  return h;
}

template <class T>
struct LayerCache {
  std::vector<T> x_in;  // residual stream entering the block
  LayerNormCache<T> ln1;
  std::vector<T> a, q, k, v;
  std::vector<T> ax_q, ax_v;
  AttentionCache<T> attn;
  std::vector<T> ctx;
  std::vector<T> x_mid;
  LayerNormCache<T> ln2;
  std::vector<T> c, u, g;
};

template <class T>
struct SeqCache {
  std::vector<LayerCache<T>> layers;
  std::vector<T> x_out;  // residual stream after the last block
  LayerNormCache<T> lnf;
  std::vector<T> z;  // final normalized hidden states [S x d]
  std::vector<double> pooled;
  std::vector<double> logits;
};

template <class T>
void forward_sequence(const BasicModelParams<T>& p, const BasicAdapter<T>* adapter, std::span<const int> ids,
                      SeqCache<T>& c) {
  const auto& cfg = p.config;
  const std::size_t S = ids.size(), d = cfg.d_h, F = cfg.d_ffn;
  std::vector<T> x(S * d);
  for (std::size_t s = 0; s < S; ++s) {
    const auto id = static_cast<std::size_t>(ids[s]);
    for (std::size_t j = 0; j < d; ++j) x[s * d + j] = static_cast<T>(static_cast<double>(p.tok[id * d + j]) + p.pos[s * d + j]);
  }
  c.layers.resize(p.layers.size());
  for (std::size_t l = 0; l < p.layers.size(); ++l) {
    const auto& L = p.layers[l];
    auto& lc = c.layers[l];
    const auto hk = hooks_for(adapter, l);
    lc.x_in = x;
    lc.a.resize(S * d);
    layer_norm_rows<T>(x, L.ln1_g.data(), L.ln1_b.data(), lc.a, S, d, &lc.ln1);
    lc.q.resize(S * d);
    lc.k.resize(S * d);
    lc.v.resize(S * d);
    linear_rows<T>(lc.a, S, L.wq, L.bq, hk.bias ? &hk.bias->bq : nullptr, hk.has_lora ? &hk.lora_q : nullptr, lc.q, &lc.ax_q);
    linear_rows<T>(lc.a, S, L.wk, L.bk, hk.bias ? &hk.bias->bk : nullptr, nullptr, lc.k);
    linear_rows<T>(lc.a, S, L.wv, L.bv, hk.bias ? &hk.bias->bv : nullptr, hk.has_lora ? &hk.lora_v : nullptr, lc.v, &lc.ax_v);
    lc.ctx.resize(S * d);
    attention_rows<T>(lc.q, lc.k, lc.v, hk.kt, hk.vt, S, hk.n_prefix, d, cfg.n_heads, lc.ctx, &lc.attn);
    std::vector<T> o(S * d);
    linear_rows<T>(lc.ctx, S, L.wo, L.bo, hk.bias ? &hk.bias->bo : nullptr, nullptr, o);
    for (std::size_t i = 0; i < S * d; ++i) x[i] = static_cast<T>(x[i] + o[i]);
    lc.x_mid = x;
    lc.c.resize(S * d);
    layer_norm_rows<T>(x, L.ln2_g.data(), L.ln2_b.data(), lc.c, S, d, &lc.ln2);
    lc.u.resize(S * F);
    linear_rows<T>(lc.c, S, L.w1, L.b1, hk.bias ? &hk.bias->b1 : nullptr, nullptr, lc.u);
    lc.g.resize(S * F);
    for (std::size_t i = 0; i < S * F; ++i) lc.g[i] = static_cast<T>(gelu(lc.u[i]));
    std::vector<T> f(S * d);
    linear_rows<T>(lc.g, S, L.w2, L.b2, hk.bias ? &hk.bias->b2 : nullptr, nullptr, f);
    for (std::size_t i = 0; i < S * d; ++i) x[i] = static_cast<T>(x[i] + f[i]);
  }
  c.x_out = x;
  c.z.resize(S * d);
  layer_norm_rows<T>(x, p.lnf_g.data(), p.lnf_b.data(), c.z, S, d, &c.lnf);
  c.pooled.assign(d, 0.0);
  for (std::size_t s = 0; s < S; ++s)
    for (std::size_t j = 0; j < d; ++j) c.pooled[j] += c.z[s * d + j];
  for (auto& v : c.pooled) v /= static_cast<double>(S);
  c.logits.assign(cfg.n_classes, 0.0);
  for (std::size_t k = 0; k < cfg.n_classes; ++k) {
    double s = p.head_b[k];
    for (std::size_t j = 0; j < d; ++j) s += p.head_w[k * d + j] * c.pooled[j];
    c.logits[k] = s;
  }
}

/// Backpropagates dlogits through one cached sequence. `base` receives base
/// tensor gradients (null: only the head is filled, into `head`).
template <class T>
void backward_sequence(const BasicModelParams<T>& p, const BasicAdapter<T>* adapter, std::span<const int> ids,
                       const SeqCache<T>& c, std::span<const double> dlogits, BasicModelParams<T>* base,
                       BasicTensor<T>& head_w_grad, BasicTensor<T>& head_b_grad, BasicAdapter<T>* adapter_grad) {
  const auto& cfg = p.config;
  const std::size_t S = ids.size(), d = cfg.d_h, F = cfg.d_ffn;
  std::vector<double> dpooled(d, 0.0);
  for (std::size_t k = 0; k < cfg.n_classes; ++k) {
    head_b_grad[k] = static_cast<T>(head_b_grad[k] + dlogits[k]);
    for (std::size_t j = 0; j < d; ++j) {
      head_w_grad[k * d + j] = static_cast<T>(head_w_grad[k * d + j] + dlogits[k] * c.pooled[j]);
      dpooled[j] += dlogits[k] * p.head_w[k * d + j];
    }
  }
  std::vector<T> dz(S * d);
  for (std::size_t s = 0; s < S; ++s)
    for (std::size_t j = 0; j < d; ++j) dz[s * d + j] = static_cast<T>(dpooled[j] / static_cast<double>(S));
  std::vector<T> dx(S * d);
  layer_norm_rows_backward<T>(dz, p.lnf_g.data(), c.lnf, dx, base ? base->lnf_g.data() : std::span<T>{},
                              base ? base->lnf_b.data() : std::span<T>{}, S, d, false);

  // Bias deltas share gradients with the biases they shift, so always collect
  // bias gradients into a scratch block when tuning biases without a base grad.
  auto* bias_grad = adapter_grad ? std::get_if<BiasAdapter<T>>(adapter_grad) : nullptr;
  auto* prefix_grad = adapter_grad ? std::get_if<PrefixAdapter<T>>(adapter_grad) : nullptr;
  auto* lora_grad = adapter_grad ? std::get_if<LoraAdapter<T>>(adapter_grad) : nullptr;

  for (std::size_t li = p.layers.size(); li-- > 0;) {
    const auto& L = p.layers[li];
    const auto& lc = c.layers[li];
    const auto hk = hooks_for(adapter, li);
    BlockParams<T>* gL = base ? &base->layers[li] : nullptr;
    BiasLayer<T>* gb = bias_grad ? &bias_grad->layers[li] : nullptr;

    auto bias_slot = [&](BasicTensor<T> BlockParams<T>::*bm, BasicTensor<T> BiasLayer<T>::*dm) -> BasicTensor<T>* {
      if (gL) return &(gL->*bm);
      if (gb) return &(gb->*dm);
      return nullptr;
    };

    // FFN: x_out = x_mid + W2 gelu(W1 c + b1) + b2
    std::vector<T> dg(S * F, T(0));
    linear_rows_backward<T>(dx, lc.g, S, L.w2, nullptr, nullptr, dg, gL ? &gL->w2 : nullptr,
                            bias_slot(&BlockParams<T>::b2, &BiasLayer<T>::b2), nullptr, nullptr);
    std::vector<T> du(S * F);
    for (std::size_t i = 0; i < S * F; ++i) du[i] = static_cast<T>(dg[i] * gelu_grad(lc.u[i]));
    std::vector<T> dc(S * d, T(0));
    linear_rows_backward<T>(du, lc.c, S, L.w1, nullptr, nullptr, dc, gL ? &gL->w1 : nullptr,
                            bias_slot(&BlockParams<T>::b1, &BiasLayer<T>::b1), nullptr, nullptr);
    layer_norm_rows_backward<T>(dc, L.ln2_g.data(), lc.ln2, dx, gL ? gL->ln2_g.data() : std::span<T>{},
                                gL ? gL->ln2_b.data() : std::span<T>{}, S, d, true);

    // Attention: x_mid = x_in + Wo ctx + bo
    std::vector<T> dctx(S * d, T(0));
    linear_rows_backward<T>(dx, lc.ctx, S, L.wo, nullptr, nullptr, dctx, gL ? &gL->wo : nullptr,
                            bias_slot(&BlockParams<T>::bo, &BiasLayer<T>::bo), nullptr, nullptr);
    std::vector<T> dq(S * d), dk(S * d), dv(S * d);
    std::span<T> dkt, dvt;
    if (prefix_grad && prefix_grad->length > 0) {
      dkt = prefix_grad->layers[li].k.data();
      dvt = prefix_grad->layers[li].v.data();
    }
    attention_rows_backward<T>(dctx, lc.q, lc.k, lc.v, hk.kt, hk.vt, S, hk.n_prefix, d, cfg.n_heads, lc.attn, dq,
                               dk, dv, dkt, dvt);
    std::vector<T> da(S * d, T(0));
    auto* lq = lora_grad ? &lora_grad->layers[li] : nullptr;
    linear_rows_backward<T>(dq, lc.a, S, L.wq, hk.has_lora ? &hk.lora_q : nullptr, &lc.ax_q, da,
                            gL ? &gL->wq : nullptr, bias_slot(&BlockParams<T>::bq, &BiasLayer<T>::bq),
                            lq ? &lq->q.a : nullptr, lq ? &lq->q.b : nullptr);
    linear_rows_backward<T>(dk, lc.a, S, L.wk, nullptr, nullptr, da, gL ? &gL->wk : nullptr,
                            bias_slot(&BlockParams<T>::bk, &BiasLayer<T>::bk), nullptr, nullptr);
    linear_rows_backward<T>(dv, lc.a, S, L.wv, hk.has_lora ? &hk.lora_v : nullptr, &lc.ax_v, da,
                            gL ? &gL->wv : nullptr, bias_slot(&BlockParams<T>::bv, &BiasLayer<T>::bv),
                            lq ? &lq->v.a : nullptr, lq ? &lq->v.b : nullptr);
    layer_norm_rows_backward<T>(da, L.ln1_g.data(), lc.ln1, dx, gL ? gL->ln1_g.data() : std::span<T>{},
                                gL ? gL->ln1_b.data() : std::span<T>{}, S, d, true);
  }

  if (base) {
    for (std::size_t s = 0; s < S; ++s) {
      const auto id = static_cast<std::size_t>(ids[s]);
      for (std::size_t j = 0; j < d; ++j) {
        base->tok[id * d + j] = static_cast<T>(base->tok[id * d + j] + dx[s * d + j]);
        base->pos[s * d + j] = static_cast<T>(base->pos[s * d + j] + dx[s * d + j]);
      }
    }
  }
}

inline double log_softmax_at(std::span<const double> logits, std::size_t k) {
  double mx = logits[0];
  for (double v : logits) mx = std::max(mx, v);
  double s = 0.0;
  for (double v : logits) s += std::exp(v - mx);
  return logits[k] - mx - std::log(s);
}

}  // namespace detail

// ---------------------------------------------------------------------------
// Public operations

template <class T>
struct ForwardResult {
  BasicTensor<T> logits;                // [batch x n_classes]
  std::vector<BasicTensor<T>> hidden;   // per block output, [batch x seq x d_h]
  BasicTensor<T> last_hidden;           // final normalized states, [batch x seq x d_h]
};

template <class T>
ForwardResult<T> forward(const BasicModelParams<T>& p, const BasicAdapter<T>* adapter, const Batch& batch,
                         bool keep_hidden = false) {
  validate_batch(p.config, batch);
  if (adapter) check_adapter_fits(p, *adapter);
  const std::size_t B = batch.size(), S = batch.seq_len, d = p.config.d_h, C = p.config.n_classes;
  ForwardResult<T> r;
  r.logits = BasicTensor<T>({B, C});
  if (keep_hidden) {
    r.hidden.assign(p.layers.size(), BasicTensor<T>({B, S, d}));
    r.last_hidden = BasicTensor<T>({B, S, d});
  }
  detail::SeqCache<T> cache;
  for (std::size_t b = 0; b < B; ++b) {
    detail::forward_sequence(p, adapter, batch.sequence(b), cache);
    for (std::size_t k = 0; k < C; ++k) r.logits[b * C + k] = static_cast<T>(cache.logits[k]);
    if (keep_hidden) {
      for (std::size_t l = 0; l < p.layers.size(); ++l) {
        const auto& next = l + 1 < p.layers.size() ? cache.layers[l + 1].x_in : cache.x_out;
        std::copy(next.begin(), next.end(), r.hidden[l].data().begin() + static_cast<std::ptrdiff_t>(b * S * d));
      }
      std::copy(cache.z.begin(), cache.z.end(), r.last_hidden.data().begin() + static_cast<std::ptrdiff_t>(b * S * d));
    }
  }
  ensure_finite(r.logits, "forward");
  return r;
}

template <class T>
ForwardResult<T> forward(const BasicModelParams<T>& p, const std::optional<BasicAdapter<T>>& adapter,
                         const Batch& batch, bool keep_hidden = false) {
  return forward(p, adapter ? &*adapter : nullptr, batch, keep_hidden);
}

template <class T>
ForwardResult<T> forward(const BasicModelParams<T>& p, std::nullptr_t, const Batch& batch, bool keep_hidden = false) {
  return forward(p, static_cast<const BasicAdapter<T>*>(nullptr), batch, keep_hidden);
}

/// Full gradient bundle: base model shape plus (optionally) adapter shape.
template <class T>
struct Gradients {
  BasicModelParams<T> model;  // head always filled; the rest only with base grads
  std::optional<BasicAdapter<T>> adapter;
};

/// Mean cross-entropy and its gradients. Base tensor gradients (other than the
/// head) are only computed when `base_grads` is set.
template <class T>
double backprop(const BasicModelParams<T>& p, const BasicAdapter<T>* adapter, const Batch& batch, Gradients<T>& g,
                bool base_grads) {
  validate_batch(p.config, batch);
  if (adapter) check_adapter_fits(p, *adapter);
  const std::size_t B = batch.size(), C = p.config.n_classes;
  g.model = zeros_like(p);
  if (adapter) {
    g.adapter = zeros_like(*adapter);
  } else {
    g.adapter.reset();
  }
  // Bias tuning without base gradients routes bias grads into the adapter slot;
  // with base gradients they land in the model and are copied afterwards.
  detail::SeqCache<T> cache;
  double loss = 0.0;
  std::vector<double> dlogits(C);
  for (std::size_t b = 0; b < B; ++b) {
    const auto ids = batch.sequence(b);
    detail::forward_sequence(p, adapter, ids, cache);
    const auto y = static_cast<std::size_t>(batch.labels[b]);
    loss -= detail::log_softmax_at(cache.logits, y);
    double mx = cache.logits[0];
    for (double v : cache.logits) mx = std::max(mx, v);
    double s = 0.0;
    for (std::size_t k = 0; k < C; ++k) s += std::exp(cache.logits[k] - mx);
    for (std::size_t k = 0; k < C; ++k) {
      dlogits[k] = (std::exp(cache.logits[k] - mx) / s - (k == y ? 1.0 : 0.0)) / static_cast<double>(B);
    }
    detail::backward_sequence(p, adapter, ids, cache, dlogits, base_grads ? &g.model : nullptr, g.model.head_w,
                              g.model.head_b, g.adapter ? &*g.adapter : nullptr);
  }
  if (base_grads && g.adapter) {
    if (auto* bg = std::get_if<BiasAdapter<T>>(&*g.adapter)) {
      for (std::size_t l = 0; l < bg->layers.size(); ++l) {
        const auto& m = g.model.layers[l];
        auto& a = bg->layers[l];
        a.bq = m.bq;
        a.bk = m.bk;
        a.bv = m.bv;
        a.bo = m.bo;
        a.b1 = m.b1;
        a.b2 = m.b2;
      }
    }
  }
  loss /= static_cast<double>(B);
  if (!std::isfinite(loss)) throw Error("loss is not finite");
  return loss;
}

template <class T>
struct LossAndGrads {
  double loss = 0.0;
  std::map<std::string, BasicTensor<T>> grads;  // only masked tensors
};

/// Loss plus gradients restricted to `mask`. Inputs are never modified.
template <class T>
LossAndGrads<T> loss_and_grads(const BasicModelParams<T>& p, const BasicAdapter<T>* adapter, const Batch& batch,
                               const std::set<std::string>& mask) {
  if (mask.empty()) throw Error("loss_and_grads: empty trainable mask");
  std::set<std::string> known;
  bool needs_base = false;
  for_each_model_tensor(p, [&](const std::string& n, const BasicTensor<T>&) { known.insert(n); });
  for (const auto& n : mask) {
    if (known.count(n) && n != "head.w" && n != "head.b") needs_base = true;
  }
  if (adapter) {
    for_each_adapter_tensor(*adapter, [&](const std::string& n, const BasicTensor<T>&) { known.insert(n); });
  }
  for (const auto& n : mask) {
    if (!known.count(n)) throw Error("loss_and_grads: mask names unknown tensor '" + n + "'");
  }
  Gradients<T> g;
  LossAndGrads<T> out;
  out.loss = backprop(p, adapter, batch, g, needs_base);
  for_each_model_tensor(g.model, [&](const std::string& n, BasicTensor<T>& t) {
    if (mask.count(n)) out.grads.emplace(n, std::move(t));
  });
  if (g.adapter) {
    for_each_adapter_tensor(*g.adapter, [&](const std::string& n, BasicTensor<T>& t) {
      if (mask.count(n)) out.grads.emplace(n, std::move(t));
    });
  }
  return out;
}

template <class T>
double loss(const BasicModelParams<T>& p, const BasicAdapter<T>* adapter, const Batch& batch) {
  const auto r = forward(p, adapter, batch);
  const std::size_t C = p.config.n_classes;
  double total = 0.0;
  std::vector<double> row(C);
  for (std::size_t b = 0; b < batch.size(); ++b) {
    for (std::size_t k = 0; k < C; ++k) row[k] = r.logits[b * C + k];
    total -= detail::log_softmax_at(row, static_cast<std::size_t>(batch.labels[b]));
  }
  return total / static_cast<double>(batch.size());
}

inline std::vector<int> predict(const ModelParams& p, const AdapterParams* adapter, const Batch& batch) {
  const auto r = forward(p, adapter, batch);
  const std::size_t C = p.config.n_classes;
  std::vector<int> out(batch.size());
  for (std::size_t b = 0; b < batch.size(); ++b) {
    std::size_t best = 0;
    for (std::size_t k = 1; k < C; ++k)
      if (r.logits[b * C + k] > r.logits[b * C + best]) best = k;
    out[b] = static_cast<int>(best);
  }
  return out;
}

/// Fraction of argmax-correct predictions.
inline double evaluate(const ModelParams& p, const AdapterParams* adapter, std::span<const Example> data) {
  if (data.empty()) throw Error("evaluate: empty dataset");
  constexpr std::size_t kChunk = 256;
  std::size_t correct = 0;
  for (std::size_t i = 0; i < data.size(); i += kChunk) {
    const auto part = data.subspan(i, std::min(kChunk, data.size() - i));
    const auto batch = Batch::from(part);
    const auto pred = predict(p, adapter, batch);
    for (std::size_t b = 0; b < pred.size(); ++b) correct += pred[b] == batch.labels[b];
  }
  return static_cast<double>(correct) / static_cast<double>(data.size());
}

}  // namespace tupate
