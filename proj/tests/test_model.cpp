#include <gtest/gtest.h>

#include <cmath>

#include "support.hpp"
#include "tupate/model.hpp"

namespace tupate {
namespace {

using testing::check_method_gradients;
using testing::random_batch;
using testing::small_config;

TEST(ModelGrad, FullModelMatchesFiniteDifferences) {
  const auto r = check_method_gradients(Method::Full, 100, 3);
  EXPECT_LE(r.worst, 1e-3) << r.worst_tensor;
}

TEST(ModelGrad, PrefixMatchesFiniteDifferences) {
  const auto r = check_method_gradients(Method::Prefix, 100, 4);
  EXPECT_LE(r.worst, 1e-3) << r.worst_tensor;
}

TEST(ModelGrad, BiasMatchesFiniteDifferences) {
  const auto r = check_method_gradients(Method::Bias, 100, 5);
  EXPECT_LE(r.worst, 1e-3) << r.worst_tensor;
}

TEST(ModelGrad, LoraMatchesFiniteDifferences) {
  const auto r = check_method_gradients(Method::Lora, 100, 6);
  EXPECT_LE(r.worst, 1e-3) << r.worst_tensor;
}

TEST(ModelGrad, BiasDeltaGradientEqualsBaseBiasGradient) {
  const auto cfg = small_config();
  Rng rng(8);
  const auto p = init_model<double>(cfg, rng);
  const auto ad = testing::random_adapter<double>(Method::Bias, cfg, {}, rng);
  const auto batch = random_batch(cfg, 2, 4, rng);
  std::set<std::string> mask = {"layers.0.bq", "layers.0.bias.bq", "layers.1.b2", "layers.1.bias.b2"};
  const auto lg = loss_and_grads<double>(p, &ad, batch, mask);
  EXPECT_TRUE(bit_identical(lg.grads.at("layers.0.bq"), lg.grads.at("layers.0.bias.bq")));
  EXPECT_TRUE(bit_identical(lg.grads.at("layers.1.b2"), lg.grads.at("layers.1.bias.b2")));
}

class ModelFixture : public ::testing::Test {
 protected:
  ModelConfig cfg = small_config();
  Rng rng{11};
  ModelParams p = init_model<float>(cfg, rng);
  Batch batch = random_batch(cfg, 4, 6, rng);
};

TEST_F(ModelFixture, LoraAtInitReproducesBase) {
  const auto ad = init_adapter<float>(Method::Lora, cfg, {}, rng);
  EXPECT_TRUE(bit_identical(forward(p, nullptr, batch).logits, forward(p, &ad, batch).logits));
}

TEST_F(ModelFixture, BiasAtInitReproducesBase) {
  const auto ad = init_adapter<float>(Method::Bias, cfg, {}, rng);
  EXPECT_TRUE(bit_identical(forward(p, nullptr, batch).logits, forward(p, &ad, batch).logits));
}

TEST_F(ModelFixture, EmptyPrefixReproducesBase) {
  AdapterOptions opt;
  opt.prefix_length = 0;
  const auto ad = init_adapter<float>(Method::Prefix, cfg, opt, rng);
  EXPECT_TRUE(bit_identical(forward(p, nullptr, batch).logits, forward(p, &ad, batch).logits));
}

TEST_F(ModelFixture, NonEmptyPrefixChangesLogits) {
  const auto ad = init_adapter<float>(Method::Prefix, cfg, {}, rng);
  EXPECT_FALSE(bit_identical(forward(p, nullptr, batch).logits, forward(p, &ad, batch).logits));
}

TEST_F(ModelFixture, ForwardIsDeterministic) {
  const auto a = forward(p, nullptr, batch, true);
  const auto b = forward(p, nullptr, batch, true);
  EXPECT_TRUE(bit_identical(a.logits, b.logits));
  EXPECT_TRUE(bit_identical(a.last_hidden, b.last_hidden));
  ASSERT_EQ(a.hidden.size(), cfg.n_layers);
  EXPECT_EQ(a.logits.dims(), (std::vector<std::size_t>{4, cfg.n_classes}));
}

TEST_F(ModelFixture, UniformLogitsGiveLogTwo) {
  auto c2 = cfg;
  c2.n_classes = 2;
  Rng r(1);
  auto q = init_model<float>(c2, r);
  for (auto& v : q.head_w.data()) v = 0.0f;
  for (auto& v : q.head_b.data()) v = 0.0f;
  const auto b = random_batch(c2, 5, 4, r);
  EXPECT_NEAR(loss<float>(q, nullptr, b), std::log(2.0), 1e-7);
}

TEST_F(ModelFixture, MaskSelectsExactlyTheBiasSet) {
  const auto ad = init_adapter<float>(Method::Bias, cfg, {}, rng);
  const auto mask = trainable_mask(Method::Bias, cfg);
  const auto lg = loss_and_grads<float>(p, &ad, batch, mask);
  std::set<std::string> got;
  for (const auto& [n, g] : lg.grads) got.insert(n);
  EXPECT_EQ(got, mask);
}

TEST_F(ModelFixture, MaskErrors) {
  EXPECT_THROW(loss_and_grads<float>(p, nullptr, batch, {}), Error);
  EXPECT_THROW(loss_and_grads<float>(p, nullptr, batch, {"layers.0.nope"}), Error);
}

TEST_F(ModelFixture, FrozenTensorsStayBitIdentical) {
  for (Method m : {Method::Prefix, Method::Bias, Method::Lora}) {
    auto model = p;
    auto ad = init_adapter<float>(m, cfg, {}, rng);
    const auto model0 = model;
    const auto ad0 = ad;
    const auto mask = trainable_mask(m, cfg);
    std::vector<Tensor*> params;
    std::vector<std::string> names;
    for_each_model_tensor(model, [&](const std::string& n, Tensor& t) {
      if (mask.count(n)) {
        params.push_back(&t);
        names.push_back(n);
      }
    });
    for_each_adapter_tensor(ad, [&](const std::string& n, Tensor& t) {
      params.push_back(&t);
      names.push_back(n);
    });
    AdamState<float> st(AdamConfig{.lr = 1e-2});
    for (int step = 0; step < 20; ++step) {
      const auto lg = loss_and_grads<float>(model, &ad, batch, mask);
      std::vector<const Tensor*> grads;
      for (const auto& n : names) grads.push_back(&lg.grads.at(n));
      adam_step<float>(params, grads, st);
    }
    std::vector<const Tensor*> now, then;
    for_each_model_tensor(model, [&](const std::string& n, const Tensor& t) {
      if (!mask.count(n)) now.push_back(&t);
    });
    for_each_model_tensor(model0, [&](const std::string& n, const Tensor& t) {
      if (!mask.count(n)) then.push_back(&t);
    });
    ASSERT_EQ(now.size(), then.size());
    for (std::size_t i = 0; i < now.size(); ++i) EXPECT_TRUE(bit_identical(*now[i], *then[i])) << to_string(m);
    EXPECT_FALSE(bit_identical(model.head_w, model0.head_w));
  }
}

TEST_F(ModelFixture, EvaluateCountsCorrectPredictions) {
  std::vector<Example> data;
  const auto pred = predict(p, nullptr, batch);
  for (std::size_t b = 0; b < batch.size(); ++b) {
    const auto s = batch.sequence(b);
    data.push_back({{s.begin(), s.end()}, pred[b]});
  }
  EXPECT_EQ(evaluate(p, nullptr, data), 1.0);
  EXPECT_THROW(evaluate(p, nullptr, std::span<const Example>{}), Error);
}

TEST_F(ModelFixture, ConstantPredictorOnBalancedData) {
  auto q = p;
  for (auto& v : q.head_w.data()) v = 0.0f;
  for (auto& v : q.head_b.data()) v = 0.0f;
  q.head_b[0] = 1.0f;
  std::vector<Example> data;
  for (int i = 0; i < 10; ++i) data.push_back({{1, 2, 3}, i % 2});
  EXPECT_EQ(evaluate(q, nullptr, data), 0.5);
}

TEST_F(ModelFixture, RejectsOutOfRangeTokens) {
  Batch b;
  b.seq_len = 2;
  b.ids = {0, static_cast<int>(cfg.vocab_size)};
  b.labels = {0};
  EXPECT_THROW(forward(p, nullptr, b), Error);
  b.ids = {0, 1};
  b.labels = {static_cast<int>(cfg.n_classes)};
  EXPECT_THROW(forward(p, nullptr, b), Error);
}

TEST(ModelConfigTest, Validation) {
  ModelConfig c;
  c.d_h = 10;
  c.n_heads = 3;
  EXPECT_THROW(c.validate(), Error);
  EXPECT_EQ(ModelConfig{}.hash(), ModelConfig{}.hash());
}

}  // namespace
}  // namespace tupate
