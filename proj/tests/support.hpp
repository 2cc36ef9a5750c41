#pragma once

// Fixtures shared by the unit tests and the acceptance runner.

#include <algorithm>
#include <optional>
#include <string>
#include <vector>

#include "tupate/model.hpp"

namespace tupate::testing {

inline ModelConfig small_config() {
  ModelConfig c;
  c.vocab_size = 12;
  c.max_seq_len = 6;
  c.d_h = 8;
  c.n_heads = 2;
  c.n_layers = 2;
  c.d_ffn = 12;
  c.n_classes = 3;
  return c;
}

inline Batch random_batch(const ModelConfig& c, std::size_t n, std::size_t len, Rng& rng) {
  Batch b;
  b.seq_len = len;
  for (std::size_t i = 0; i < n * len; ++i) b.ids.push_back(static_cast<int>(rng.below(c.vocab_size)));
  for (std::size_t i = 0; i < n; ++i) b.labels.push_back(static_cast<int>(rng.below(c.n_classes)));
  return b;
}

/// Adapter with every tensor drawn from N(0, 0.1^2), so no gradient is
/// structurally zero (a fresh LoRA adapter has B = 0, which zeroes dL/dA).
template <class T>
BasicAdapter<T> random_adapter(Method m, const ModelConfig& cfg, const AdapterOptions& opt, Rng& rng) {
  auto a = init_adapter<T>(m, cfg, opt, rng);
  for_each_adapter_tensor(a, [&](const std::string&, BasicTensor<T>& t) {
    for (auto& v : t.data()) v = static_cast<T>(rng.normal(0.0, 0.1));
  });
  return a;
}

struct GradCheck {
  double worst = 0.0;
  std::size_t coords = 0;
  std::string worst_tensor;
};

/// Central-difference check of loss_and_grads over `n_coords` coordinates
/// drawn uniformly from the method's trainable set, in double precision.
inline GradCheck check_method_gradients(Method m, std::size_t n_coords, std::uint64_t seed) {
  const auto cfg = small_config();
  AdapterOptions opt;
  opt.prefix_length = 3;
  opt.lora_rank = 2;
  opt.lora_alpha = 4.0;
  Rng rng(seed);
  auto p = init_model<double>(cfg, rng);
  std::optional<BasicAdapter<double>> ad;
  if (m != Method::Full) ad = random_adapter<double>(m, cfg, opt, rng);
  const auto batch = random_batch(cfg, 3, 5, rng);
  const auto mask = trainable_mask(m, cfg, opt);
  const BasicAdapter<double>* ap = ad ? &*ad : nullptr;
  const auto lg = loss_and_grads<double>(p, ap, batch, mask);

  std::vector<std::pair<std::string, BasicTensor<double>*>> params;
  for_each_model_tensor(p, [&](const std::string& n, BasicTensor<double>& t) {
    if (mask.count(n)) params.emplace_back(n, &t);
  });
  if (ad) {
    for_each_adapter_tensor(*ad, [&](const std::string& n, BasicTensor<double>& t) {
      if (mask.count(n)) params.emplace_back(n, &t);
    });
  }
  GradCheck out;
  for (std::size_t i = 0; i < n_coords; ++i) {
    auto& [name, t] = params[rng.below(params.size())];
    const std::size_t idx = rng.below(t->size());
    const std::size_t coord[] = {idx};
    const auto& g = lg.grads.at(name);
    const double e = finite_diff_check<double>([&] { return loss<double>(p, ap, batch); }, t->data(), g.data(), coord);
    if (e > out.worst) {
      out.worst = e;
      out.worst_tensor = name;
    }
    ++out.coords;
  }
  return out;
}

}  // namespace tupate::testing
