#pragma once

// Experiment orchestration: per-task training, the ground-truth transfer-gain
// matrix, predictor scoring and the two analysis studies.

#include <algorithm>
#include <atomic>
#include <cstddef>
#include <cstdint>
#include <exception>
#include <functional>
#include <map>
#include <mutex>
#include <optional>
#include <string>
#include <thread>
#include <vector>

#include "tupate/embed.hpp"
#include "tupate/rank.hpp"
#include "tupate/tasks.hpp"
#include "tupate/train.hpp"

namespace tupate {

enum class Regime { Full, Limited };

inline std::string to_string(Regime r) { return r == Regime::Full ? "full" : "limited"; }

inline Regime parse_regime(const std::string& s) {
  if (s == "full") return Regime::Full;
  if (s == "limited") return Regime::Limited;
  throw Error("unknown regime '" + s + "' (expected full or limited)");
}

enum class Grouping { InClass, AllClass };

inline std::string to_string(Grouping g) { return g == Grouping::InClass ? "in-class" : "all-class"; }

inline Grouping parse_grouping(const std::string& s) {
  if (s == "in-class") return Grouping::InClass;
  if (s == "all-class") return Grouping::AllClass;
  throw Error("unknown grouping '" + s + "' (expected in-class or all-class)");
}

inline constexpr std::size_t kDefaultLimitedSize = 100;

/// Training data for a task under a regime. Limited keeps a stratified
/// subsample of the training split.
inline TaskDataset regime_data(const Task& task, Regime r, std::size_t limited_size, std::size_t n_classes) {
  if (r == Regime::Full || limited_size >= task.data.train.size()) return task.data;
  return limit(task.data, limited_size, n_classes, Rng::fnv1a(task.spec.id));
}

/// Runs fn(0..n-1) on up to `jobs` threads. Results must be written to
/// per-index slots; the first exception (by index) is rethrown.
inline void parallel_for(std::size_t n, unsigned jobs, const std::function<void(std::size_t)>& fn) {
  if (jobs <= 1 || n <= 1) {
    for (std::size_t i = 0; i < n; ++i) fn(i);
    return;
  }
  std::vector<std::exception_ptr> errors(n);
  std::atomic<std::size_t> next{0};
  std::vector<std::thread> pool;
  const unsigned workers = static_cast<unsigned>(std::min<std::size_t>(jobs, n));
  for (unsigned w = 0; w < workers; ++w) {
    pool.emplace_back([&] {
      for (std::size_t i = next++; i < n; i = next++) {
        try {
          fn(i);
        } catch (...) {
          errors[i] = std::current_exception();
        }
      }
    });
  }
  for (auto& t : pool) t.join();
  for (auto& e : errors)
    if (e) std::rethrow_exception(e);
}

inline std::uint64_t derive_seed(std::uint64_t seed, const std::string& tag) {
  return Rng(seed).derive(tag).next_u64();
}

// ---------------------------------------------------------------------------
// Suite-level training

struct SuiteTraining {
  std::map<std::string, TrainResult> results;
};

/// Trains every task of the suite with `cfg`, task seeds derived from
/// (cfg.seed, task id).
inline SuiteTraining train_suite(const Suite& suite, const ModelParams& base, const TrainConfig& cfg, Regime regime,
                                 std::size_t limited_size = kDefaultLimitedSize, unsigned jobs = 1) {
  std::vector<TrainResult> slots(suite.tasks.size());
  parallel_for(suite.tasks.size(), jobs, [&](std::size_t i) {
    const auto& task = suite.tasks[i];
    TrainConfig tc = cfg;
    tc.seed = derive_seed(cfg.seed, "source:" + task.spec.id);
    slots[i] = train_task(base, regime_data(task, regime, limited_size, suite.config.n_classes), tc, nullptr,
                          task.spec.id);
  });
  SuiteTraining out;
  for (std::size_t i = 0; i < slots.size(); ++i) out.results.emplace(suite.tasks[i].spec.id, std::move(slots[i]));
  return out;
}

// ---------------------------------------------------------------------------
// Ground-truth transfer gains

struct TransferConfig {
  TrainConfig source;  // source-task tuning
  TrainConfig target;  // target-task tuning (direct and after transfer)
  Regime source_regime = Regime::Full;
  Regime target_regime = Regime::Limited;
  std::size_t limited_size = kDefaultLimitedSize;
  std::uint64_t seed = 0;
  unsigned jobs = 1;

  std::string regime_tag() const { return to_string(source_regime) + "->" + to_string(target_regime); }
};

struct TransferResult {
  GainMatrix gains;
  std::map<std::string, double> direct;  // direct-training test accuracy per target
  std::map<std::string, Checkpoint> sources;
  SuiteTraining source_training;
};

/// gains[s][t] = acc(t | tuned from s's best checkpoint) - acc(t | tuned from
/// scratch). Target runs share one seed per target so the difference isolates
/// the initialization. `sources`, if given, supplies pre-trained source runs.
inline TransferResult transfer_gain_matrix(const Suite& suite, const ModelParams& base, const TransferConfig& cfg,
                                           const SuiteTraining* sources = nullptr) {
  if (suite.tasks.size() < 2) throw Error("transfer matrix: suite needs at least two tasks");
  if (cfg.source.method != cfg.target.method) throw Error("transfer matrix: source and target methods differ");
  TransferResult out;
  TrainConfig src_cfg = cfg.source;
  src_cfg.seed = cfg.seed;
  out.source_training = sources ? *sources : train_suite(suite, base, src_cfg, cfg.source_regime, cfg.limited_size, cfg.jobs);
  for (const auto& t : suite.tasks) {
    const auto it = out.source_training.results.find(t.spec.id);
    if (it == out.source_training.results.end()) throw Error("transfer matrix: missing source run for " + t.spec.id);
    out.sources.emplace(t.spec.id, it->second.best);
  }

  const std::size_t K = suite.tasks.size();
  // Job j < K: direct run for target j. Job K + t*K + s: transfer s -> t.
  std::vector<double> acc(K + K * K, 0.0);
  std::vector<std::size_t> jobs_list;
  for (std::size_t j = 0; j < K; ++j) jobs_list.push_back(j);
  for (std::size_t t = 0; t < K; ++t)
    for (std::size_t s = 0; s < K; ++s)
      if (s != t) jobs_list.push_back(K + t * K + s);

  parallel_for(jobs_list.size(), cfg.jobs, [&](std::size_t k) {
    const std::size_t job = jobs_list[k];
    const std::size_t t = job < K ? job : (job - K) / K;
    const auto& target = suite.tasks[t];
    TrainConfig tc = cfg.target;
    tc.seed = derive_seed(cfg.seed, "target:" + target.spec.id);
    const auto data = regime_data(target, cfg.target_regime, cfg.limited_size, suite.config.n_classes);
    const Checkpoint* init = nullptr;
    if (job >= K) init = &out.sources.at(suite.tasks[(job - K) % K].spec.id);
    const auto res = train_task(base, data, tc, init, target.spec.id);
    acc[job] = res.best.accuracy_on(base, target.data.test);
  });

  const auto ids = suite.ids();
  ScoreMatrix m(ids, ids, 0.0);
  for (std::size_t t = 0; t < K; ++t) {
    out.direct[ids[t]] = acc[t];
    for (std::size_t s = 0; s < K; ++s) {
      if (s != t) m.at(s, t) = acc[K + t * K + s] - acc[t];
    }
  }
  out.gains = GainMatrix(std::move(m), cfg.regime_tag());
  return out;
}

// ---------------------------------------------------------------------------
// Predictors

/// Cosine similarity between every pair of embeddings; rows are sources.
inline ScoreMatrix similarity_scores(const std::map<std::string, Tensor>& embeddings) {
  std::vector<std::string> ids;
  for (const auto& [id, e] : embeddings) ids.push_back(id);
  ScoreMatrix m(ids, ids, 0.0);
  for (std::size_t s = 0; s < ids.size(); ++s) {
    for (std::size_t t = 0; t < ids.size(); ++t) {
      const auto& a = embeddings.at(ids[s]);
      const auto& b = embeddings.at(ids[t]);
      if (a.size() != b.size()) {
        throw Error("embedding dimension mismatch: " + ids[s] + " has " + std::to_string(a.size()) + ", " + ids[t] +
                    " has " + std::to_string(b.size()));
      }
      m.at(s, t) = cosine(a, b);
    }
  }
  return m;
}

/// Source score = its training-set size, independent of the target.
inline ScoreMatrix datasize_scores(const std::map<std::string, double>& sizes) {
  std::vector<std::string> ids;
  for (const auto& [id, n] : sizes) ids.push_back(id);
  ScoreMatrix m(ids, ids, 0.0);
  for (std::size_t s = 0; s < ids.size(); ++s)
    for (std::size_t t = 0; t < ids.size(); ++t) m.at(s, t) = sizes.at(ids[s]);
  return m;
}

inline std::map<std::string, Tensor> tupate_embeddings(const SuiteTraining& training, bool early = false) {
  std::map<std::string, Tensor> out;
  for (const auto& [id, r] : training.results) {
    const auto& ck = early ? r.early : r.best;
    if (!ck.adapter) throw Error("tupate embeddings need adapter checkpoints (task " + id + ")");
    out.emplace(id, tupate_embed(*ck.adapter, id).vector);
  }
  return out;
}

inline CandidateFilter grouping_filter(const Suite& suite, Grouping g) {
  if (g == Grouping::AllClass) return all_other_sources();
  std::map<std::string, std::string> family;
  for (const auto& t : suite.tasks) family[t.spec.id] = t.spec.family;
  return [family](const std::string& s, const std::string& t) {
    return s != t && family.at(s) == family.at(t);
  };
}

/// Restricts candidates per grouping and scores the predictor with rho/NDCG.
inline RankingReport evaluate_predictor(const ScoreMatrix& scores, const GainMatrix& gains, const Suite& suite,
                                        Grouping grouping, const std::string& predictor = {}) {
  auto rep = evaluate_ranking(scores, gains, grouping_filter(suite, grouping));
  rep.predictor = predictor;
  rep.grouping = to_string(grouping);
  return rep;
}

// ---------------------------------------------------------------------------
// Studies

struct CorrelationRun {
  double lr = 0.0;
  std::uint64_t seed = 0;
  double mean_accuracy = 0.0;  // mean test accuracy over tasks
  double rho = 0.0;
  double ndcg = 0.0;
};

struct CorrelationReport {
  Method method = Method::Prefix;
  std::vector<CorrelationRun> runs;
  double pearson_ndcg_accuracy = 0.0;
  double delta_rho = 0.0;   // highest-accuracy run minus lowest-accuracy run
  double delta_ndcg = 0.0;
};

/// Trains `n_runs` learning-rate/seed variants, embeds each, and relates the
/// ranking quality of the embeddings to in-task accuracy.
inline CorrelationReport correlation_study(const Suite& suite, const ModelParams& base, const GainMatrix& gains,
                                           const TrainConfig& cfg, Regime regime, std::size_t n_runs = 5,
                                           std::size_t limited_size = kDefaultLimitedSize, unsigned jobs = 1,
                                           Grouping grouping = Grouping::AllClass) {
  if (n_runs < 2) throw Error("correlation study: need at least two runs");
  const auto grid = cfg.learning_rates();
  CorrelationReport rep;
  rep.method = cfg.method;
  for (std::size_t r = 0; r < n_runs; ++r) {
    TrainConfig tc = cfg;
    tc.lr_grid = {grid[r % grid.size()]};
    tc.lr_scale = 1.0;
    tc.seed = derive_seed(cfg.seed, "run:" + std::to_string(r));
    tc.init_seed = derive_seed(cfg.init_seed, "run:" + std::to_string(r));
    const auto training = train_suite(suite, base, tc, regime, limited_size, jobs);
    CorrelationRun run;
    run.lr = tc.lr_grid.front();
    run.seed = tc.seed;
    double acc = 0.0;
    for (const auto& t : suite.tasks) acc += training.results.at(t.spec.id).best.accuracy_on(base, t.data.test);
    run.mean_accuracy = acc / static_cast<double>(suite.tasks.size());
    const auto rep_r = evaluate_predictor(similarity_scores(tupate_embeddings(training)), gains, suite, grouping);
    run.rho = rep_r.rho;
    run.ndcg = rep_r.ndcg;
    rep.runs.push_back(run);
  }
  std::vector<double> accs, ndcgs;
  for (const auto& r : rep.runs) {
    accs.push_back(r.mean_accuracy);
    ndcgs.push_back(r.ndcg);
  }
  rep.pearson_ndcg_accuracy = pearson(ndcgs, accs);
  const auto hi = std::max_element(rep.runs.begin(), rep.runs.end(),
                                   [](const auto& a, const auto& b) { return a.mean_accuracy < b.mean_accuracy; });
  const auto lo = std::min_element(rep.runs.begin(), rep.runs.end(),
                                   [](const auto& a, const auto& b) { return a.mean_accuracy < b.mean_accuracy; });
  rep.delta_rho = hi->rho - lo->rho;
  rep.delta_ndcg = hi->ndcg - lo->ndcg;
  return rep;
}

struct EarlyVsBest {
  Method method = Method::Prefix;
  RankingReport early;
  RankingReport best;
};

/// Ranks with embeddings from the early and the best-validation checkpoints
/// of the same runs and scores both against one gain matrix.
inline EarlyVsBest early_vs_best_study(const Suite& suite, const SuiteTraining& training, const GainMatrix& gains,
                                       Grouping grouping = Grouping::AllClass) {
  if (training.results.empty()) throw Error("early-vs-best: no checkpoints");
  EarlyVsBest out;
  const auto& first = training.results.begin()->second;
  if (!first.early.adapter || !first.best.adapter) throw Error("early-vs-best: missing adapter checkpoints");
  out.method = first.best.method;
  out.early = evaluate_predictor(similarity_scores(tupate_embeddings(training, true)), gains, suite, grouping,
                                 "tupate-" + to_string(out.method) + "-early");
  out.best = evaluate_predictor(similarity_scores(tupate_embeddings(training, false)), gains, suite, grouping,
                                "tupate-" + to_string(out.method) + "-best");
  return out;
}

}  // namespace tupate
