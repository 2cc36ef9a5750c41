#include <gtest/gtest.h>

#include <algorithm>

#include "tupate/lab.hpp"

namespace tupate {
namespace {

SuiteConfig tiny_suite() {
  SuiteConfig c;
  c.tasks_per_cluster = 2;
  c.vocab_size = 32;
  c.seq_len = 8;
  c.n_train = 120;
  c.n_val = 60;
  c.n_test = 60;
  c.seed = 7;
  return c;
}

ModelConfig tiny_model(const SuiteConfig& s) {
  ModelConfig m;
  m.vocab_size = s.vocab_size;
  m.max_seq_len = s.seq_len;
  m.d_h = 8;
  m.n_heads = 2;
  m.n_layers = 2;
  m.d_ffn = 16;
  return m;
}

TrainConfig tiny_train(Method m) {
  TrainConfig t;
  t.method = m;
  t.epochs = 4;
  t.early_epoch = 2;
  t.batch_size = 16;
  t.adapter.prefix_length = 2;
  t.adapter.lora_rank = 2;
  t.adapter.lora_alpha = 2;
  t.lr_scale = m == Method::Prefix ? 1.0 : 10.0;
  return t;
}

bool same_checkpoint(const Checkpoint& a, const Checkpoint& b) {
  if (a.epoch != b.epoch || a.val_accuracy != b.val_accuracy || a.lr != b.lr) return false;
  if (!bit_identical(a.head_w, b.head_w) || !bit_identical(a.head_b, b.head_b)) return false;
  if (a.adapter.has_value() != b.adapter.has_value()) return false;
  if (a.adapter) {
    std::vector<const Tensor*> x, y;
    for_each_adapter_tensor(*a.adapter, [&](const std::string&, const Tensor& t) { x.push_back(&t); });
    for_each_adapter_tensor(*b.adapter, [&](const std::string&, const Tensor& t) { y.push_back(&t); });
    for (std::size_t i = 0; i < x.size(); ++i)
      if (!bit_identical(*x[i], *y[i])) return false;
  }
  return true;
}

class TrainFixture : public ::testing::Test {
 protected:
  static void SetUpTestSuite() {
    suite_ = new Suite(gen_suite(tiny_suite()));
    Rng rng(1);
    base_ = new ModelParams(init_model<float>(tiny_model(suite_->config), rng));
  }
  static void TearDownTestSuite() {
    delete suite_;
    delete base_;
  }
  static Suite* suite_;
  static ModelParams* base_;
};
Suite* TrainFixture::suite_ = nullptr;
ModelParams* TrainFixture::base_ = nullptr;

TEST_F(TrainFixture, EveryMethodLearnsASeparableTask) {
  const auto& task = suite_->tasks[0];
  for (Method m : {Method::Prefix, Method::Bias, Method::Lora, Method::Full}) {
    auto cfg = tiny_train(m);
    cfg.epochs = 10;
    const auto r = train_task(*base_, task.data, cfg, nullptr, task.spec.id);
    EXPECT_GE(r.best.val_accuracy, 0.8) << to_string(m);
    ASSERT_EQ(r.curve.size(), cfg.epochs);
    EXPECT_EQ(r.best.val_accuracy, *std::max_element(r.curve.begin(), r.curve.end()));
    EXPECT_EQ(r.early.epoch, 2u);
    EXPECT_EQ(r.best.task_id, task.spec.id);
    EXPECT_EQ(r.best.method, m);
    EXPECT_EQ(m == Method::Full, r.best.model.has_value());
  }
}

TEST_F(TrainFixture, SameSeedSameCheckpoints) {
  const auto& task = suite_->tasks[1];
  for (Method m : {Method::Prefix, Method::Lora}) {
    const auto a = train_task(*base_, task.data, tiny_train(m));
    const auto b = train_task(*base_, task.data, tiny_train(m));
    EXPECT_TRUE(same_checkpoint(a.best, b.best));
    EXPECT_TRUE(same_checkpoint(a.early, b.early));
    auto other = tiny_train(m);
    other.seed = 99;
    EXPECT_FALSE(same_checkpoint(a.best, train_task(*base_, task.data, other).best));
  }
}

TEST_F(TrainFixture, DivergentGridPointsAreSkipped) {
  const auto& task = suite_->tasks[0];
  auto cfg = tiny_train(Method::Full);
  cfg.lr_grid = {1e38, 1e-3};
  cfg.lr_scale = 1.0;
  const auto r = train_task(*base_, task.data, cfg);
  EXPECT_EQ(r.lr, 1e-3);
  cfg.lr_grid = {1e38};
  EXPECT_THROW(train_task(*base_, task.data, cfg), Error);
}

TEST_F(TrainFixture, ConfigValidation) {
  auto cfg = tiny_train(Method::Prefix);
  cfg.early_epoch = 9;
  EXPECT_THROW(cfg.validate(), Error);
  cfg = tiny_train(Method::Prefix);
  cfg.lr_grid = {-1.0};
  EXPECT_THROW(cfg.validate(), Error);
  EXPECT_EQ(default_lr_grid(Method::Prefix), (std::vector<double>{1e-2, 1e-3}));
  EXPECT_EQ(default_lr_grid(Method::Lora), (std::vector<double>{5e-4, 2e-4}));
  EXPECT_EQ(default_lr_grid(Method::Bias), (std::vector<double>{1e-4, 4e-4}));
}

TEST_F(TrainFixture, TransferMatrixIsThreadIndependentAndWellFormed) {
  TransferConfig tc;
  tc.source = tiny_train(Method::Prefix);
  tc.target = tc.source;
  tc.limited_size = 30;
  tc.seed = 3;
  const auto seq = transfer_gain_matrix(*suite_, *base_, tc);
  tc.jobs = 3;
  const auto par = transfer_gain_matrix(*suite_, *base_, tc);
  EXPECT_EQ(seq.gains, par.gains);
  EXPECT_EQ(seq.gains.regime, "full->limited");
  EXPECT_EQ(seq.gains.sources, suite_->ids());
  for (std::size_t i = 0; i < seq.gains.sources.size(); ++i) EXPECT_EQ(seq.gains.at(i, i), 0.0);
  EXPECT_EQ(seq.direct.size(), suite_->tasks.size());

  const auto oracle = evaluate_predictor(seq.gains, seq.gains, *suite_, Grouping::AllClass);
  EXPECT_EQ(oracle.rho, 1.0);
  EXPECT_EQ(oracle.ndcg, 1.0);
  const auto in = evaluate_predictor(seq.gains, seq.gains, *suite_, Grouping::InClass);
  for (const auto& t : in.targets) EXPECT_EQ(t.ranking.size(), 1u);  // family size 2, minus the target
  EXPECT_EQ(in.grouping, "in-class");

  // Reusing the same source runs gives the same matrix.
  const auto again = transfer_gain_matrix(*suite_, *base_, tc, &seq.source_training);
  EXPECT_EQ(again.gains, seq.gains);
}

TEST_F(TrainFixture, TransferNeedsTwoTasks) {
  Suite one = *suite_;
  one.tasks.resize(1);
  TransferConfig tc;
  tc.source = tiny_train(Method::Prefix);
  tc.target = tc.source;
  EXPECT_THROW(transfer_gain_matrix(one, *base_, tc), Error);
}

TEST_F(TrainFixture, EarlyEqualsBestWhenTrainingOneEpoch) {
  auto cfg = tiny_train(Method::Bias);
  cfg.epochs = 1;
  cfg.early_epoch = 1;
  const auto training = train_suite(*suite_, *base_, cfg, Regime::Full);
  const auto ids = suite_->ids();
  GainMatrix g(ScoreMatrix(ids, ids, 0.0));
  for (std::size_t i = 0; i < g.values.size(); ++i) g.values[i] = static_cast<double>((i * 7) % 5);
  const auto r = early_vs_best_study(*suite_, training, g);
  EXPECT_EQ(r.early.rho, r.best.rho);
  EXPECT_EQ(r.early.ndcg, r.best.ndcg);
  EXPECT_THROW(early_vs_best_study(*suite_, SuiteTraining{}, g), Error);
}

TEST_F(TrainFixture, CorrelationStudyNeedsTwoRuns) {
  const auto ids = suite_->ids();
  GainMatrix g(ScoreMatrix(ids, ids, 0.0));
  EXPECT_THROW(correlation_study(*suite_, *base_, g, tiny_train(Method::Prefix), Regime::Full, 1), Error);
}

TEST_F(TrainFixture, PredictorScoreMatrices) {
  std::map<std::string, Tensor> e = {{"a", Tensor({2}, {1, 0})}, {"b", Tensor({2}, {0, 1})}};
  const auto s = similarity_scores(e);
  EXPECT_EQ(s.get("a", "b"), 0.0);
  EXPECT_EQ(s.get("a", "a"), 1.0);
  e["c"] = Tensor({3}, {1, 1, 1});
  try {
    similarity_scores(e);
    FAIL();
  } catch (const Error& err) {
    const std::string msg = err.what();
    EXPECT_NE(msg.find("2"), std::string::npos);
    EXPECT_NE(msg.find("3"), std::string::npos);
  }
  const auto d = datasize_scores({{"a", 100}, {"b", 2000}});
  EXPECT_EQ(d.get("b", "a"), 2000.0);
  EXPECT_EQ(d.get("a", "b"), 100.0);
}

}  // namespace
}  // namespace tupate
