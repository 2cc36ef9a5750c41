#pragma once

// Task embeddings: tuned adapter parameters averaged over layers, plus the
// baselines (dataset-mean hidden state, diagonal empirical Fisher of a fully
// fine-tuned model, and training-set size).

#include <cstddef>
#include <span>
#include <string>
#include <vector>

#include "tupate/adapters.hpp"
#include "tupate/model.hpp"
#include "tupate/numerics.hpp"
#include "tupate/tasks.hpp"

namespace tupate {

struct TaskEmbedding {
  Tensor vector;
  std::string method;     // "tupate-prefix", "textemb", "taskemb", "datasize", ...
  std::string source_id;  // task or checkpoint the embedding came from
  bool untrained = false; // adapter was bitwise identical to its initialization

  std::size_t dim() const { return vector.size(); }
};

/// Flattens one layer of tuned tensors: prefix K then V (row-major); bias
/// deltas bq bk bv bo b1 b2; LoRA q.A q.B v.A v.B.
template <class T>
std::vector<double> layer_vector(const BasicAdapter<T>& adapter, std::size_t layer) {
  std::vector<double> v;
  const std::string p = layer_prefix(layer);
  for_each_adapter_tensor(adapter, [&](const std::string& name, const BasicTensor<T>& t) {
    if (name.rfind(p, 0) != 0) return;
    for (T x : t.data()) v.push_back(static_cast<double>(x));
  });
  return v;
}

/// Mean over layers of each layer's concatenated tuned parameters. The
/// classifier head is not part of an adapter and so never enters.
inline TaskEmbedding tupate_embed(const AdapterParams& adapter, const std::string& source_id = {},
                                  const AdapterParams* initial = nullptr) {
  const std::size_t L = adapter_layers(adapter);
  if (L == 0) throw Error("tupate_embed: adapter has no layers");
  std::vector<double> acc;
  for (std::size_t l = 0; l < L; ++l) {
    const auto v = layer_vector(adapter, l);
    if (l == 0) {
      acc.assign(v.size(), 0.0);
    } else if (v.size() != acc.size()) {
      throw Error("tupate_embed: layer " + std::to_string(l) + " has " + std::to_string(v.size()) +
                  " tuned values, layer 0 has " + std::to_string(acc.size()));
    }
    for (std::size_t i = 0; i < v.size(); ++i) acc[i] += v[i];
  }
  if (acc.empty()) throw Error("tupate_embed: adapter has no tuned parameters");
  TaskEmbedding e;
  e.method = "tupate-" + to_string(method_of(adapter));
  e.source_id = source_id;
  std::vector<float> data(acc.size());
  for (std::size_t i = 0; i < acc.size(); ++i) data[i] = static_cast<float>(acc[i] / static_cast<double>(L));
  const std::size_t dim = data.size();
  e.vector = Tensor({dim}, std::move(data));
  ensure_finite(e.vector, "tupate_embed");

  bool same = initial && initial->index() == adapter.index();
  if (same) {
    std::vector<const Tensor*> a, b;
    for_each_adapter_tensor(adapter, [&](const std::string&, const Tensor& t) { a.push_back(&t); });
    for_each_adapter_tensor(*initial, [&](const std::string&, const Tensor& t) { b.push_back(&t); });
    same = a.size() == b.size();
    for (std::size_t i = 0; same && i < a.size(); ++i) same = bit_identical(*a[i], *b[i]);
  }
  const auto d = e.vector.data();
  e.untrained = same || std::all_of(d.begin(), d.end(), [](float x) { return x == 0.0f; });
  return e;
}

/// Mean over examples of the mean over tokens of the final hidden states of
/// the frozen base model.
inline TaskEmbedding textemb(const ModelParams& params, std::span<const Example> data, const std::string& source_id = {}) {
  if (data.empty()) throw Error("textemb: empty dataset");
  const std::size_t d = params.config.d_h;
  std::vector<double> acc(d, 0.0);
  constexpr std::size_t kChunk = 256;
  for (std::size_t i = 0; i < data.size(); i += kChunk) {
    const auto part = data.subspan(i, std::min(kChunk, data.size() - i));
    const auto batch = Batch::from(part);
    const auto r = forward<float>(params, nullptr, batch, /*keep_hidden=*/true);
    const std::size_t S = batch.seq_len;
    for (std::size_t b = 0; b < batch.size(); ++b) {
      for (std::size_t s = 0; s < S; ++s)
        for (std::size_t j = 0; j < d; ++j) acc[j] += r.last_hidden[(b * S + s) * d + j] / static_cast<double>(S);
    }
  }
  TaskEmbedding e;
  e.method = "textemb";
  e.source_id = source_id;
  std::vector<float> v(d);
  for (std::size_t j = 0; j < d; ++j) v[j] = static_cast<float>(acc[j] / static_cast<double>(data.size()));
  e.vector = Tensor({d}, std::move(v));
  return e;
}

/// Diagonal empirical Fisher: F_i = mean_x (d log p(y|x) / d theta_i)^2 over
/// every base tensor, flattened in canonical name order.
inline TaskEmbedding fisher_taskemb(const ModelParams& params, std::span<const Example> data,
                                    const std::string& source_id = {}) {
  if (data.empty()) throw Error("fisher_taskemb: empty dataset");
  std::vector<double> acc(parameter_count(params), 0.0);
  Gradients<float> g;
  for (const auto& ex : data) {
    const auto batch = Batch::from(std::span<const Example>(&ex, 1));
    backprop<float>(params, nullptr, batch, g, /*base_grads=*/true);
    std::size_t off = 0;
    for_each_model_tensor(g.model, [&](const std::string&, const Tensor& t) {
      for (float v : t.data()) acc[off++] += static_cast<double>(v) * v;
    });
  }
  TaskEmbedding e;
  e.method = "taskemb";
  e.source_id = source_id;
  std::vector<float> v(acc.size());
  for (std::size_t i = 0; i < acc.size(); ++i) v[i] = static_cast<float>(acc[i] / static_cast<double>(data.size()));
  const std::size_t dim = v.size();
  e.vector = Tensor({dim}, std::move(v));
  ensure_finite(e.vector, "fisher_taskemb");
  return e;
}

/// Training-set size, used directly as a source score. Equal sizes tie and
/// fall back to id order in the ranking.
inline double datasize_score(const TaskDataset& data) { return static_cast<double>(data.train.size()); }

}  // namespace tupate
