#pragma once

// Synthetic classification suites with controllable relatedness. Each task has
// a latent vector theta; tasks in a cluster scatter around a shared centroid.
// A sequence is drawn token by token from a class-conditional distribution
//   p(v | c) = softmax_v(signal * s_c * <E_v, theta> / sqrt(d_task))
// where E is a suite-wide token feature table and s_c spreads the classes over
// [-1, 1]. Nearby thetas therefore induce nearly the same labelling rule.

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <cstdint>
#include <set>
#include <string>
#include <vector>

#include "tupate/model.hpp"
#include "tupate/numerics.hpp"

namespace tupate {

struct SuiteConfig {
  std::size_t n_clusters = 2;
  std::size_t tasks_per_cluster = 5;
  double cluster_spread = 0.3;
  double centroid_scale = 1.0;
  std::size_t d_task = 8;
  std::size_t vocab_size = 64;
  std::size_t seq_len = 16;
  std::size_t n_classes = 2;
  double signal = 1.0;
  std::size_t n_train = 2000;
  std::size_t n_val = 200;
  std::size_t n_test = 200;
  std::uint64_t seed = 0;
};

struct TaskSpec {
  std::string id;
  std::size_t cluster = 0;
  std::string family;  // "A" / "B"
  Tensor theta;        // [d_task]
  std::vector<std::vector<double>> class_token_probs;  // [n_classes][vocab]
};

struct TaskDataset {
  std::vector<Example> train;
  std::vector<Example> validation;
  std::vector<Example> test;
};

struct Task {
  TaskSpec spec;
  TaskDataset data;
};

struct Suite {
  SuiteConfig config;
  Tensor token_features;  // [vocab x d_task]
  std::vector<Task> tasks;

  const Task& find(const std::string& id) const {
    for (const auto& t : tasks)
      if (t.spec.id == id) return t;
    throw Error("suite has no task '" + id + "'");
  }
  std::vector<std::string> ids() const {
    std::vector<std::string> out;
    for (const auto& t : tasks) out.push_back(t.spec.id);
    return out;
  }
};

inline std::string task_id(std::size_t cluster, std::size_t index) {
  return "c" + std::to_string(cluster) + "-t" + std::to_string(index);
}

inline std::string family_for_cluster(std::size_t cluster) { return cluster % 2 == 0 ? "A" : "B"; }

inline std::vector<double> class_signs(std::size_t n_classes) {
  std::vector<double> s(n_classes);
  for (std::size_t c = 0; c < n_classes; ++c) {
    s[c] = n_classes == 1 ? 0.0 : -1.0 + 2.0 * static_cast<double>(c) / static_cast<double>(n_classes - 1);
  }
  return s;
}

inline std::vector<std::vector<double>> class_token_probs(const Tensor& features, const Tensor& theta,
                                                          std::size_t n_classes, double signal) {
  const std::size_t V = features.dim(0), D = features.dim(1);
  const auto signs = class_signs(n_classes);
  std::vector<double> score(V);
  for (std::size_t v = 0; v < V; ++v) {
    double s = 0.0;
    for (std::size_t j = 0; j < D; ++j) s += static_cast<double>(features[v * D + j]) * theta[j];
    score[v] = s / std::sqrt(static_cast<double>(D));
  }
  std::vector<std::vector<double>> probs(n_classes, std::vector<double>(V));
  for (std::size_t c = 0; c < n_classes; ++c) {
    double mx = -1e300;
    for (std::size_t v = 0; v < V; ++v) mx = std::max(mx, signal * signs[c] * score[v]);
    double z = 0.0;
    for (std::size_t v = 0; v < V; ++v) z += std::exp(signal * signs[c] * score[v] - mx);
    for (std::size_t v = 0; v < V; ++v) probs[c][v] = std::exp(signal * signs[c] * score[v] - mx) / z;
  }
  return probs;
}

inline int sample_categorical(const std::vector<double>& probs, Rng& rng) {
  double u = rng.uniform();
  for (std::size_t i = 0; i < probs.size(); ++i) {
    u -= probs[i];
    if (u < 0.0) return static_cast<int>(i);
  }
  return static_cast<int>(probs.size() - 1);
}

/// Accuracy of the exact posterior classifier (uniform class prior).
inline double bayes_accuracy(const TaskSpec& spec, std::span<const Example> data) {
  if (data.empty()) throw Error("bayes_accuracy: empty data");
  std::size_t correct = 0;
  for (const auto& e : data) {
    std::size_t best = 0;
    double best_ll = -1e300;
    for (std::size_t c = 0; c < spec.class_token_probs.size(); ++c) {
      double ll = 0.0;
      for (int v : e.tokens) ll += std::log(spec.class_token_probs[c][static_cast<std::size_t>(v)]);
      if (ll > best_ll) {
        best_ll = ll;
        best = c;
      }
    }
    correct += static_cast<int>(best) == e.label;
  }
  return static_cast<double>(correct) / static_cast<double>(data.size());
}

namespace detail {

inline std::vector<Example> sample_split(const TaskSpec& spec, std::size_t n, std::size_t seq_len, Rng& rng,
                                         std::set<std::vector<int>>& seen) {
  const std::size_t C = spec.class_token_probs.size();
  std::vector<int> labels(n);
  for (std::size_t i = 0; i < n; ++i) labels[i] = static_cast<int>(i % C);
  rng.shuffle(labels.begin(), labels.end());
  std::vector<Example> out;
  out.reserve(n);
  constexpr int kMaxRedraws = 1000;
  for (int y : labels) {
    Example e;
    e.label = y;
    int tries = 0;
    do {
      if (++tries > kMaxRedraws) throw Error("task generation: cannot draw distinct sequences for " + spec.id);
      e.tokens.assign(seq_len, 0);
      for (auto& t : e.tokens) t = sample_categorical(spec.class_token_probs[static_cast<std::size_t>(y)], rng);
    } while (!seen.insert(e.tokens).second);
    out.push_back(std::move(e));
  }
  return out;
}

inline void check_balance(const std::vector<Example>& split, std::size_t n_classes, const std::string& what) {
  if (split.empty()) return;
  std::vector<std::size_t> counts(n_classes, 0);
  for (const auto& e : split) ++counts[static_cast<std::size_t>(e.label)];
  const double uniform = static_cast<double>(split.size()) / static_cast<double>(n_classes);
  for (auto c : counts) {
    if (std::abs(static_cast<double>(c) - uniform) > 0.1 * uniform + 1.0) {
      throw Error("task generation: label balance violated in " + what);
    }
  }
}

}  // namespace detail

inline constexpr double kMinBayesAccuracy = 0.9;

/// Generates the whole suite. Pure function of the config (including its seed).
inline Suite gen_suite(const SuiteConfig& cfg) {
  if (cfg.n_clusters == 0) throw Error("gen_suite: need at least one cluster");
  if (cfg.tasks_per_cluster == 0) throw Error("gen_suite: need at least one task per cluster");
  if (!(cfg.cluster_spread >= 0.0)) throw Error("gen_suite: cluster spread must be non-negative");
  if (cfg.n_classes < 2) throw Error("gen_suite: need at least two classes");
  if (cfg.d_task == 0 || cfg.vocab_size < 2 || cfg.seq_len == 0) throw Error("gen_suite: invalid sizes");

  const Rng root(cfg.seed);
  Suite suite;
  suite.config = cfg;
  Rng feat_rng = root.derive("token-features");
  suite.token_features = randn<float>({cfg.vocab_size, cfg.d_task}, 1.0, feat_rng);

  // Centroids, rejection-sampled to keep clusters apart.
  Rng cent_rng = root.derive("centroids");
  std::vector<Tensor> centroids;
  constexpr int kMaxCentroidDraws = 10000;
  int draws = 0;
  while (centroids.size() < cfg.n_clusters) {
    if (++draws > kMaxCentroidDraws) throw Error("gen_suite: cannot place cluster centroids apart");
    Tensor c = randn<float>({cfg.d_task}, cfg.centroid_scale, cent_rng);
    bool ok = true;
    for (const auto& o : centroids) {
      double dist = 0.0;
      for (std::size_t j = 0; j < cfg.d_task; ++j) dist += (c[j] - o[j]) * static_cast<double>(c[j] - o[j]);
      if (std::sqrt(dist) < 2.0 * cfg.cluster_spread) ok = false;
    }
    if (ok) centroids.push_back(std::move(c));
  }

  for (std::size_t k = 0; k < cfg.n_clusters; ++k) {
    for (std::size_t i = 0; i < cfg.tasks_per_cluster; ++i) {
      Task task;
      task.spec.id = task_id(k, i);
      task.spec.cluster = k;
      task.spec.family = family_for_cluster(k);
      Rng trng = root.derive("task:" + task.spec.id);
      Rng theta_rng = trng.derive("theta");
      task.spec.theta = centroids[k];
      for (auto& v : task.spec.theta.data()) v = static_cast<float>(v + theta_rng.normal(0.0, cfg.cluster_spread));
      ensure_finite(task.spec.theta, "gen_suite");
      task.spec.class_token_probs = class_token_probs(suite.token_features, task.spec.theta, cfg.n_classes, cfg.signal);

      std::set<std::vector<int>> seen;
      Rng data_rng = trng.derive("data");
      task.data.train = detail::sample_split(task.spec, cfg.n_train, cfg.seq_len, data_rng, seen);
      task.data.validation = detail::sample_split(task.spec, cfg.n_val, cfg.seq_len, data_rng, seen);
      task.data.test = detail::sample_split(task.spec, cfg.n_test, cfg.seq_len, data_rng, seen);
      detail::check_balance(task.data.train, cfg.n_classes, task.spec.id + " train");
      detail::check_balance(task.data.validation, cfg.n_classes, task.spec.id + " validation");
      detail::check_balance(task.data.test, cfg.n_classes, task.spec.id + " test");

      const auto& probe = task.data.test.empty() ? task.data.train : task.data.test;
      if (!probe.empty()) {
        const double bayes = bayes_accuracy(task.spec, probe);
        if (bayes <= kMinBayesAccuracy) {
          throw Error("gen_suite: task " + task.spec.id + " has Bayes accuracy " + std::to_string(bayes) +
                      " (<= 0.9); raise the signal strength");
        }
      }
      suite.tasks.push_back(std::move(task));
    }
  }
  return suite;
}

/// Label-stratified subsample of the training split; validation and test are
/// kept as is. Selected examples keep their original relative order.
inline TaskDataset limit(const TaskDataset& data, std::size_t n, std::size_t n_classes, std::uint64_t seed = 0) {
  if (n < n_classes) {
    throw Error("limit: n = " + std::to_string(n) + " is smaller than the number of classes " +
                std::to_string(n_classes));
  }
  if (n > data.train.size()) {
    throw Error("limit: n = " + std::to_string(n) + " exceeds train size " + std::to_string(data.train.size()));
  }
  if (n == data.train.size()) return data;
  std::vector<std::vector<std::size_t>> by_class(n_classes);
  for (std::size_t i = 0; i < data.train.size(); ++i) {
    const auto y = static_cast<std::size_t>(data.train[i].label);
    if (y >= n_classes) throw Error("limit: label out of range");
    by_class[y].push_back(i);
  }
  Rng rng = Rng(seed).derive("limit");
  std::vector<std::size_t> keep;
  std::vector<std::size_t> quota(n_classes, n / n_classes);
  for (std::size_t c = 0; c < n % n_classes; ++c) ++quota[c];
  // Classes that are short hand their leftover quota to the others.
  std::size_t deficit = 0;
  for (std::size_t c = 0; c < n_classes; ++c) {
    if (quota[c] > by_class[c].size()) {
      deficit += quota[c] - by_class[c].size();
      quota[c] = by_class[c].size();
    }
  }
  for (std::size_t c = 0; c < n_classes && deficit > 0; ++c) {
    const std::size_t extra = std::min(deficit, by_class[c].size() - quota[c]);
    quota[c] += extra;
    deficit -= extra;
  }
  for (std::size_t c = 0; c < n_classes; ++c) {
    auto idx = by_class[c];
    rng.shuffle(idx.begin(), idx.end());
    keep.insert(keep.end(), idx.begin(), idx.begin() + static_cast<std::ptrdiff_t>(quota[c]));
  }
  std::sort(keep.begin(), keep.end());
  TaskDataset out;
  out.validation = data.validation;
  out.test = data.test;
  for (auto i : keep) out.train.push_back(data.train[i]);
  return out;
}

inline double theta_distance(const TaskSpec& a, const TaskSpec& b) {
  double s = 0.0;
  for (std::size_t j = 0; j < a.theta.size(); ++j) {
    const double d = static_cast<double>(a.theta[j]) - b.theta[j];
    s += d * d;
  }
  return std::sqrt(s);
}

}  // namespace tupate
