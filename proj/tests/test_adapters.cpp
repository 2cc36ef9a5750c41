#include <gtest/gtest.h>

#include <cmath>

#include "support.hpp"
#include "tupate/adapters.hpp"

namespace tupate {
namespace {

ModelConfig bert_base() {
  ModelConfig c;
  c.vocab_size = 30522;
  c.max_seq_len = 512;
  c.d_h = 768;
  c.n_heads = 12;
  c.n_layers = 12;
  c.d_ffn = 3072;
  c.n_classes = 2;
  return c;
}

TEST(Counts, LoraAtBertBase) {
  const auto c = bert_base();
  EXPECT_EQ(count_tuned_params(Method::Lora, c), 294912u);
  EXPECT_EQ(per_layer_dim(Method::Lora, c), 24576u);
}

TEST(Counts, PrefixAtBertBaseIsTwiceTheSingleMatrixCount) {
  const auto c = bert_base();
  EXPECT_EQ(count_tuned_params(Method::Prefix, c), 368640u);
  EXPECT_EQ(per_layer_dim(Method::Prefix, c), 30720u);
  const std::size_t single = 20 * c.d_h * c.n_layers;  // 184,320
  EXPECT_EQ(count_tuned_params(Method::Prefix, c), 2 * single);
}

TEST(Counts, BiasAtBertBase) {
  const auto c = bert_base();
  EXPECT_EQ(per_layer_dim(Method::Bias, c), 5u * 768 + 3072);
  EXPECT_EQ(count_tuned_params(Method::Bias, c), 12u * (5 * 768 + 3072));
}

TEST(Counts, EmptyAdaptersCountZero) {
  const auto c = bert_base();
  AdapterOptions o;
  o.prefix_length = 0;
  o.lora_rank = 0;
  EXPECT_EQ(count_tuned_params(Method::Prefix, c, o), 0u);
  EXPECT_EQ(count_tuned_params(Method::Lora, c, o), 0u);
}

TEST(Counts, MatchAllocatedTensors) {
  const auto c = testing::small_config();
  AdapterOptions o;
  o.prefix_length = 3;
  o.lora_rank = 2;
  Rng rng(1);
  for (Method m : {Method::Prefix, Method::Bias, Method::Lora}) {
    const auto a = init_adapter<float>(m, c, o, rng);
    std::size_t n = 0;
    for_each_adapter_tensor(a, [&](const std::string&, const Tensor& t) { n += t.size(); });
    EXPECT_EQ(n, count_tuned_params(m, c, o)) << to_string(m);
    EXPECT_EQ(count_tuned_params(m, c, o), per_layer_dim(m, c, o) * c.n_layers);
  }
  Rng r2(2);
  EXPECT_EQ(count_tuned_params(Method::Full, c), parameter_count(init_model<float>(c, r2)));
}

TEST(Init, DeterministicPerSeed) {
  const auto c = testing::small_config();
  for (Method m : {Method::Prefix, Method::Lora}) {
    Rng a(5), b(5);
    const auto x = init_adapter<float>(m, c, {}, a);
    const auto y = init_adapter<float>(m, c, {}, b);
    std::vector<const Tensor*> tx, ty;
    for_each_adapter_tensor(x, [&](const std::string&, const Tensor& t) { tx.push_back(&t); });
    for_each_adapter_tensor(y, [&](const std::string&, const Tensor& t) { ty.push_back(&t); });
    ASSERT_EQ(tx.size(), ty.size());
    for (std::size_t i = 0; i < tx.size(); ++i) EXPECT_TRUE(bit_identical(*tx[i], *ty[i]));
  }
}

TEST(Init, LoraStartsWithZeroB) {
  Rng r(3);
  const auto a = std::get<LoraAdapter<float>>(init_adapter<float>(Method::Lora, testing::small_config(), {}, r));
  for (const auto& L : a.layers) {
    for (float v : L.q.b.data()) EXPECT_EQ(v, 0.0f);
    for (float v : L.v.b.data()) EXPECT_EQ(v, 0.0f);
  }
  EXPECT_EQ(a.scaling(), 1.0);
}

TEST(Init, RejectsInvalidRank) {
  Rng r(3);
  AdapterOptions o;
  o.lora_rank = 0;
  EXPECT_THROW(init_adapter<float>(Method::Lora, testing::small_config(), o, r), Error);
  o.lora_rank = 99;
  EXPECT_THROW(init_adapter<float>(Method::Lora, testing::small_config(), o, r), Error);
  EXPECT_THROW(init_adapter<float>(Method::Full, testing::small_config(), {}, r), Error);
}

TEST(LoraLinear, HandExample) {
  const Tensor w({2, 2});
  const Tensor b({2});
  const Tensor a({1, 2}, {1, 0});
  const Tensor bm({2, 1}, {1, 1});
  const Tensor x({1, 2}, {3, 5});
  const auto h = lora_linear(w, b, a, bm, 1.0, x);
  EXPECT_EQ(h[0], 3.0f);
  EXPECT_EQ(h[1], 3.0f);
}

TEST(LoraLinear, ZeroBIsPlainLinear) {
  Rng r(4);
  const auto w = randn<float>({3, 4}, 1.0, r);
  const auto b = randn<float>({3}, 1.0, r);
  const auto a = randn<float>({2, 4}, 1.0, r);
  const Tensor bm({3, 2});
  const auto x = randn<float>({5, 4}, 1.0, r);
  const auto h = lora_linear(w, b, a, bm, 8.0, x);
  const auto base = bias_forward(w, b, Tensor({3}), x);
  EXPECT_TRUE(bit_identical(h, base));
}

TEST(LoraLinear, RankViolation) {
  EXPECT_THROW(lora_linear(Tensor({2, 2}), Tensor({2}), Tensor({3, 2}), Tensor({2, 3}), 1.0, Tensor({1, 2})), Error);
}

TEST(BiasForward, HandExample) {
  const Tensor w({2, 2}, {1, 0, 0, 1});
  const auto h = bias_forward(w, Tensor({2}), Tensor({2}, {1, 1}), Tensor({1, 2}));
  EXPECT_EQ(h[0], 1.0f);
  EXPECT_EQ(h[1], 1.0f);
  EXPECT_THROW(bias_forward(w, Tensor({2}), Tensor({3}), Tensor({1, 2})), Error);
}

TEST(PrefixAttention, OneQueryOneKeyOnePrefix) {
  const Tensor q({1, 2}, {1, 0});
  const Tensor k({1, 2}, {0, 1});
  const Tensor v({1, 2}, {1, 2});
  const Tensor kt({1, 2}, {2, 0});
  const Tensor vt({1, 2}, {3, 4});
  const auto r = prefix_attention(kt, vt, q, k, v);
  // Scores: q.kt / sqrt(2) = sqrt(2) for the prefix, q.k / sqrt(2) = 0 for the key.
  const double wp = std::exp(std::sqrt(2.0)) / (std::exp(std::sqrt(2.0)) + 1.0);
  EXPECT_NEAR(r.output[0], wp * 3 + (1 - wp) * 1, 1e-6);
  EXPECT_NEAR(r.output[1], wp * 4 + (1 - wp) * 2, 1e-6);
  ASSERT_EQ(r.weights.size(), 1u);
  EXPECT_NEAR(r.weights[0][0], wp, 1e-6);
}

TEST(PrefixAttention, WeightShapesAndNormalization) {
  Rng rng(6);
  const std::size_t m = 4, n = 3, d = 6, heads = 2;
  const auto q = randn<float>({m, d}, 1.0, rng);
  const auto k = randn<float>({m, d}, 1.0, rng);
  const auto v = randn<float>({m, d}, 1.0, rng);
  const auto kt = randn<float>({n, d}, 1.0, rng);
  const auto vt = randn<float>({n, d}, 1.0, rng);
  const auto r = prefix_attention(kt, vt, q, k, v, heads);
  ASSERT_EQ(r.weights.size(), heads);
  for (const auto& w : r.weights) {
    EXPECT_EQ(w.dims(), (std::vector<std::size_t>{m, m + n}));
    for (std::size_t i = 0; i < m; ++i) {
      double s = 0.0;
      for (std::size_t j = 0; j < m + n; ++j) s += w[i * (m + n) + j];
      EXPECT_NEAR(s, 1.0, 1e-6);
    }
  }
}

TEST(PrefixAttention, EmptyPrefixIsStandardAttention) {
  Rng rng(7);
  const auto q = randn<float>({3, 4}, 1.0, rng);
  const auto k = randn<float>({3, 4}, 1.0, rng);
  const auto v = randn<float>({3, 4}, 1.0, rng);
  const auto r = prefix_attention(Tensor(), Tensor(), q, k, v);
  // Reference: softmax(q k^T / sqrt(d)) v, computed directly.
  for (std::size_t i = 0; i < 3; ++i) {
    std::vector<double> s(3);
    double mx = -1e300;
    for (std::size_t j = 0; j < 3; ++j) {
      double dot = 0.0;
      for (std::size_t c = 0; c < 4; ++c) dot += static_cast<double>(q[i * 4 + c]) * k[j * 4 + c];
      s[j] = dot / 2.0;
      mx = std::max(mx, s[j]);
    }
    double z = 0.0;
    for (auto& x : s) z += (x = std::exp(x - mx));
    for (std::size_t c = 0; c < 4; ++c) {
      double o = 0.0;
      for (std::size_t j = 0; j < 3; ++j) o += s[j] / z * v[j * 4 + c];
      EXPECT_NEAR(r.output[i * 4 + c], o, 1e-6);
    }
  }
  EXPECT_THROW(prefix_attention(Tensor({2, 3}), Tensor({2, 3}), q, k, v), Error);
}

TEST(Masks, Semantics) {
  const auto c = testing::small_config();
  const auto prefix = trainable_mask(Method::Prefix, c);
  const auto bias = trainable_mask("bias", c);
  const auto lora = trainable_mask(Method::Lora, c);
  EXPECT_EQ(prefix.size(), 2 * c.n_layers + head_names().size());
  for (const auto& n : bias) {
    for (const char* w : {".wq", ".wk", ".wv", ".wo", ".w1", ".w2", "head.w"}) {
      if (n == "head.w") continue;
      EXPECT_EQ(n.find(w), std::string::npos) << n;
    }
  }
  const std::set<std::string> head(head_names().begin(), head_names().end());
  for (const auto* a : {&prefix, &bias, &lora}) {
    for (const auto* b : {&prefix, &bias, &lora}) {
      if (a == b) continue;
      for (const auto& n : *a) {
        if (!head.count(n)) EXPECT_EQ(b->count(n), 0u) << n;
      }
    }
  }
  const auto base = base_tensor_names(c);
  for (const auto* mk : {&prefix, &bias, &lora}) {
    for (const auto& n : base) {
      if (!head.count(n)) EXPECT_EQ(mk->count(n), 0u) << n;
    }
  }
  EXPECT_THROW(trainable_mask("adapterfusion", c), Error);
}

}  // namespace
}  // namespace tupate
