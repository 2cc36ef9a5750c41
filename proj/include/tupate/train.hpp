#pragma once

// Training loop shared by every method: Adam over the trainable set, one
// learning-rate grid search, early and best-validation checkpoints.

#include <cmath>
#include <cstddef>
#include <cstdint>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "tupate/adapters.hpp"
#include "tupate/model.hpp"
#include "tupate/numerics.hpp"
#include "tupate/tasks.hpp"

namespace tupate {

/// Learning-rate grids searched per method.
inline std::vector<double> default_lr_grid(Method m) {
  switch (m) {
    case Method::Prefix: return {1e-2, 1e-3};
    case Method::Lora: return {5e-4, 2e-4};
    case Method::Bias: return {1e-4, 4e-4};
    case Method::Full: return {1e-3, 3e-4};
  }
  return {};
}

struct TrainConfig {
  Method method = Method::Prefix;
  std::vector<double> lr_grid;  // empty: default_lr_grid(method)
  double lr_scale = 1.0;
  std::size_t batch_size = 32;
  std::size_t epochs = 20;
  std::size_t early_epoch = 2;
  std::uint64_t seed = 0;       // data order
  std::uint64_t init_seed = 0;  // adapter initialization, shared by every task
  AdapterOptions adapter;

  std::vector<double> learning_rates() const {
    auto g = lr_grid.empty() ? default_lr_grid(method) : lr_grid;
    for (auto& v : g) v *= lr_scale;
    return g;
  }

  void validate() const {
    if (batch_size == 0) throw Error("train config: batch size must be positive");
    if (epochs == 0) throw Error("train config: epochs must be positive");
    if (early_epoch == 0 || early_epoch > epochs) {
      throw Error("train config: early epoch " + std::to_string(early_epoch) + " must be in [1, " +
                  std::to_string(epochs) + "]");
    }
    for (double lr : learning_rates()) {
      if (!(lr > 0.0) || !std::isfinite(lr)) throw Error("train config: learning rates must be positive");
    }
    if (learning_rates().empty()) throw Error("train config: empty learning-rate grid");
  }
};

/// Trained state for one task: adapter plus classifier head, or the whole
/// model for full fine-tuning.
struct Checkpoint {
  Method method = Method::Prefix;
  std::string task_id;
  std::size_t epoch = 0;
  double val_accuracy = 0.0;
  std::uint64_t seed = 0;
  double lr = 0.0;
  std::optional<AdapterParams> adapter;
  Tensor head_w, head_b;
  std::optional<ModelParams> model;

  /// Model to run with this checkpoint on top of `base`.
  ModelParams model_over(const ModelParams& base) const {
    if (model) return *model;
    ModelParams p = base;
    if (!head_w.empty()) {
      p.head_w = head_w;
      p.head_b = head_b;
    }
    return p;
  }

  const AdapterParams* adapter_ptr() const { return adapter ? &*adapter : nullptr; }

  double accuracy_on(const ModelParams& base, std::span<const Example> data) const {
    return evaluate(model_over(base), adapter_ptr(), data);
  }
};

struct TrainResult {
  Checkpoint early;
  Checkpoint best;
  std::vector<double> curve;  // validation accuracy per epoch, selected grid point
  double lr = 0.0;
};

namespace detail {

struct TrainState {
  ModelParams model;
  std::optional<AdapterParams> adapter;

  std::vector<Tensor*> trainable(Method m) {
    std::vector<Tensor*> out;
    if (m == Method::Full) {
      for_each_model_tensor(model, [&](const std::string&, Tensor& t) { out.push_back(&t); });
      return out;
    }
    for_each_adapter_tensor(*adapter, [&](const std::string&, Tensor& t) { out.push_back(&t); });
    out.push_back(&model.head_w);
    out.push_back(&model.head_b);
    return out;
  }
};

inline std::vector<const Tensor*> gradient_list(Method m, Gradients<float>& g) {
  std::vector<const Tensor*> out;
  if (m == Method::Full) {
    for_each_model_tensor(g.model, [&](const std::string&, const Tensor& t) { out.push_back(&t); });
    return out;
  }
  for_each_adapter_tensor(*g.adapter, [&](const std::string&, const Tensor& t) { out.push_back(&t); });
  out.push_back(&g.model.head_w);
  out.push_back(&g.model.head_b);
  return out;
}

inline Checkpoint snapshot(const TrainState& s, Method m, const std::string& task_id, std::size_t epoch,
                           double val, std::uint64_t seed, double lr) {
  Checkpoint c;
  c.method = m;
  c.task_id = task_id;
  c.epoch = epoch;
  c.val_accuracy = val;
  c.seed = seed;
  c.lr = lr;
  if (m == Method::Full) {
    c.model = s.model;
  } else {
    c.adapter = s.adapter;
    c.head_w = s.model.head_w;
    c.head_b = s.model.head_b;
  }
  return c;
}

struct GridRun {
  bool diverged = false;
  std::string failure;
  Checkpoint early, best;
  std::vector<double> curve;
};

inline GridRun train_one(const ModelParams& base, std::span<const Example> train, std::span<const Example> val,
                         const TrainConfig& cfg, double lr, const Checkpoint* init, const std::string& task_id) {
  TrainState s;
  if (init) {
    if (init->method != cfg.method) {
      throw Error("train: initial checkpoint method " + to_string(init->method) + " differs from " +
                  to_string(cfg.method));
    }
    s.model = init->model_over(base);
    s.adapter = init->adapter;
  } else {
    s.model = base;
    if (cfg.method != Method::Full) {
      Rng init_rng = Rng(cfg.init_seed).derive("adapter:" + to_string(cfg.method));
      s.adapter = init_adapter<float>(cfg.method, base.config, cfg.adapter, init_rng);
    }
  }
  if (s.adapter) check_adapter_fits(s.model, *s.adapter);

  AdamState<float> opt(AdamConfig{.lr = lr});
  auto params = s.trainable(cfg.method);
  std::vector<std::size_t> order(train.size());
  const Rng data_rng = Rng(cfg.seed).derive("data-order");
  Gradients<float> g;
  GridRun run;
  const bool full = cfg.method == Method::Full;
  for (std::size_t epoch = 1; epoch <= cfg.epochs; ++epoch) {
    for (std::size_t i = 0; i < order.size(); ++i) order[i] = i;
    Rng er = data_rng.derive(epoch);
    er.shuffle(order.begin(), order.end());
    for (std::size_t start = 0; start < order.size(); start += cfg.batch_size) {
      const std::size_t end = std::min(order.size(), start + cfg.batch_size);
      std::vector<Example> mb;
      mb.reserve(end - start);
      for (std::size_t i = start; i < end; ++i) mb.push_back(train[order[i]]);
      double loss = 0.0;
      try {
        loss = backprop<float>(s.model, s.adapter ? &*s.adapter : nullptr, Batch::from(mb), g, full);
      } catch (const Error& e) {
        run.diverged = true;
        run.failure = e.what();
        return run;
      }
      if (!std::isfinite(loss)) {
        run.diverged = true;
        run.failure = "non-finite loss";
        return run;
      }
      const auto grads = gradient_list(cfg.method, g);
      adam_step<float>(params, grads, opt);
      for (auto* p : params) {
        if (!p->all_finite()) {
          run.diverged = true;
          run.failure = "non-finite parameters";
          return run;
        }
      }
    }
    const double acc = evaluate(s.model, s.adapter ? &*s.adapter : nullptr, val);
    run.curve.push_back(acc);
    if (epoch == cfg.early_epoch) run.early = snapshot(s, cfg.method, task_id, epoch, acc, cfg.seed, lr);
    if (epoch == 1 || acc > run.best.val_accuracy) {
      run.best = snapshot(s, cfg.method, task_id, epoch, acc, cfg.seed, lr);
    }
  }
  return run;
}

}  // namespace detail

/// Trains `cfg.method` on `data.train`, choosing the learning rate whose best
/// validation accuracy is highest (first wins ties). `init`, when given,
/// replaces the fresh adapter/head with a previously trained checkpoint.
inline TrainResult train_task(const ModelParams& base, const TaskDataset& data, const TrainConfig& cfg,
                              const Checkpoint* init = nullptr, const std::string& task_id = {}) {
  cfg.validate();
  if (data.train.empty()) throw Error("train: empty training split");
  if (data.validation.empty()) throw Error("train: empty validation split");
  std::optional<TrainResult> best;
  std::string failures;
  for (double lr : cfg.learning_rates()) {
    auto run = detail::train_one(base, data.train, data.validation, cfg, lr, init, task_id);
    if (run.diverged) {
      failures += (failures.empty() ? "" : "; ") + std::string("lr ") + std::to_string(lr) + ": " + run.failure;
      continue;
    }
    if (!best || run.best.val_accuracy > best->best.val_accuracy) {
      best = TrainResult{std::move(run.early), std::move(run.best), std::move(run.curve), lr};
    }
  }
  if (!best) throw Error("train: every learning rate diverged (" + failures + ")");
  return *best;
}

}  // namespace tupate
