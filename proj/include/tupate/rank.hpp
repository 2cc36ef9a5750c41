#pragma once

// Similarity, source ranking, ensembling and the two ranking metrics: the
// average rank of the truly best source (rho) and NDCG over the whole list.

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <functional>
#include <map>
#include <set>
#include <span>
#include <string>
#include <vector>

#include "tupate/numerics.hpp"

namespace tupate {

/// K_src x K_tgt matrix addressed by id. Rows are sources, columns targets.
struct ScoreMatrix {
  std::vector<std::string> sources;
  std::vector<std::string> targets;
  std::vector<double> values;  // row-major [sources x targets]

  ScoreMatrix() = default;
  ScoreMatrix(std::vector<std::string> src, std::vector<std::string> tgt, double fill = 0.0)
      : sources(std::move(src)), targets(std::move(tgt)), values(sources.size() * targets.size(), fill) {
    validate();
  }

  double& at(std::size_t s, std::size_t t) { return values[s * targets.size() + t]; }
  double at(std::size_t s, std::size_t t) const { return values[s * targets.size() + t]; }

  double get(const std::string& s, const std::string& t) const { return at(source_index(s), target_index(t)); }

  std::size_t source_index(const std::string& id) const { return index_of(sources, id, "source"); }
  std::size_t target_index(const std::string& id) const { return index_of(targets, id, "target"); }
  bool has_source(const std::string& id) const {
    return std::find(sources.begin(), sources.end(), id) != sources.end();
  }
  bool has_target(const std::string& id) const {
    return std::find(targets.begin(), targets.end(), id) != targets.end();
  }

  void validate() const {
    if (values.size() != sources.size() * targets.size()) throw Error("score matrix: cell count mismatch");
    for (const auto* ids : {&sources, &targets}) {
      std::set<std::string> seen(ids->begin(), ids->end());
      if (seen.size() != ids->size()) throw Error("score matrix: duplicate ids");
    }
    for (double v : values) {
      if (!std::isfinite(v)) throw Error("score matrix: non-finite entry");
    }
  }

  friend bool operator==(const ScoreMatrix&, const ScoreMatrix&) = default;

 private:
  static std::size_t index_of(const std::vector<std::string>& ids, const std::string& id, const char* what) {
    const auto it = std::find(ids.begin(), ids.end(), id);
    if (it == ids.end()) throw Error(std::string("alignment failure: no ") + what + " '" + id + "'");
    return static_cast<std::size_t>(it - ids.begin());
  }
};

/// Ground-truth transfer gains. Cells with source == target are ignored.
struct GainMatrix : ScoreMatrix {
  std::string regime;  // e.g. "full->limited"

  GainMatrix() = default;
  GainMatrix(ScoreMatrix m, std::string r = {}) : ScoreMatrix(std::move(m)), regime(std::move(r)) {}
};

/// Decides whether `source` is a candidate for `target`.
using CandidateFilter = std::function<bool(const std::string& source, const std::string& target)>;

inline CandidateFilter all_other_sources() {
  return [](const std::string& s, const std::string& t) { return s != t; };
}

// ---------------------------------------------------------------------------

template <class T>
double cosine(std::span<const T> a, std::span<const T> b) {
  if (a.size() != b.size()) {
    throw Error("cosine: dimension mismatch " + std::to_string(a.size()) + " vs " + std::to_string(b.size()));
  }
  double dot = 0.0, na = 0.0, nb = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i) {
    dot += static_cast<double>(a[i]) * b[i];
    na += static_cast<double>(a[i]) * a[i];
    nb += static_cast<double>(b[i]) * b[i];
  }
  if (na == 0.0 || nb == 0.0) throw Error("cosine: zero vector");
  const double c = dot / (std::sqrt(na) * std::sqrt(nb));
  return std::clamp(c, -1.0, 1.0);
}

inline double cosine(const Tensor& a, const Tensor& b) { return cosine<float>(a.data(), b.data()); }

struct RankedSource {
  std::string id;
  double score = 0.0;

  friend bool operator==(const RankedSource&, const RankedSource&) = default;
};

/// Descending score; equal scores fall back to ascending id.
inline void sort_ranking(std::vector<RankedSource>& r) {
  std::sort(r.begin(), r.end(), [](const RankedSource& a, const RankedSource& b) {
    if (a.score != b.score) return a.score > b.score;
    return a.id < b.id;
  });
}

/// Rank candidate sources for one target by cosine similarity. The target's
/// own id is skipped if present.
inline std::vector<RankedSource> rank_sources(const std::string& target_id, const Tensor& target,
                                              const std::map<std::string, Tensor>& sources) {
  std::vector<RankedSource> out;
  for (const auto& [id, emb] : sources) {
    if (id == target_id) continue;
    out.push_back({id, cosine(target, emb)});
  }
  if (out.empty()) throw Error("rank_sources: no candidate sources");
  sort_ranking(out);
  return out;
}

/// Ranking of the candidate sources for `target` under `scores`.
inline std::vector<RankedSource> ranking_for(const ScoreMatrix& scores, const std::string& target,
                                             const std::vector<std::string>& candidates) {
  const std::size_t t = scores.target_index(target);
  std::vector<RankedSource> out;
  out.reserve(candidates.size());
  for (const auto& s : candidates) out.push_back({s, scores.at(scores.source_index(s), t)});
  sort_ranking(out);
  return out;
}

/// Elementwise mean of matrices sharing ids and shapes.
inline ScoreMatrix ensemble(std::span<const ScoreMatrix> matrices) {
  if (matrices.empty()) throw Error("ensemble: no matrices");
  ScoreMatrix out = matrices.front();
  for (const auto& m : matrices.subspan(1)) {
    if (m.sources != out.sources || m.targets != out.targets) throw Error("ensemble: id/shape mismatch");
  }
  // Running mean: identical inputs reproduce themselves bit for bit.
  for (std::size_t k = 1; k < matrices.size(); ++k) {
    const double n = static_cast<double>(k + 1);
    for (std::size_t i = 0; i < out.values.size(); ++i) {
      out.values[i] += (matrices[k].values[i] - out.values[i]) / n;
    }
  }
  return out;
}

// ---------------------------------------------------------------------------
// Metrics

/// Candidate source ids for `target`, in gain-matrix order.
inline std::vector<std::string> candidates_for(const GainMatrix& gains, const std::string& target,
                                               const CandidateFilter& filter) {
  std::vector<std::string> out;
  for (const auto& s : gains.sources) {
    if (s != target && filter(s, target)) out.push_back(s);
  }
  return out;
}

/// Id of the highest-gain candidate; ties go to the smallest id.
inline std::string best_source(const GainMatrix& gains, const std::string& target,
                               const std::vector<std::string>& candidates) {
  if (candidates.empty()) throw Error("no candidate sources for target '" + target + "'");
  const std::size_t t = gains.target_index(target);
  std::string best;
  double best_gain = -1e300;
  for (const auto& s : candidates) {
    const double g = gains.at(gains.source_index(s), t);
    if (g > best_gain || (g == best_gain && s < best)) {
      best_gain = g;
      best = s;
    }
  }
  return best;
}

/// 1-based position of `id` in `ranking`.
inline std::size_t position_of(const std::vector<RankedSource>& ranking, const std::string& id) {
  for (std::size_t i = 0; i < ranking.size(); ++i)
    if (ranking[i].id == id) return i + 1;
  throw Error("alignment failure: '" + id + "' missing from ranking");
}

/// NDCG of one predicted ranking against per-source gains. Relevance is the
/// min-max rescaled gain; DCG uses (2^rel - 1) / log2(position + 1).
inline double ndcg_single(const std::vector<RankedSource>& ranking, const std::map<std::string, double>& gain_of) {
  if (ranking.empty()) throw Error("ndcg: empty ranking");
  double lo = 1e300, hi = -1e300;
  for (const auto& r : ranking) {
    const double g = gain_of.at(r.id);
    lo = std::min(lo, g);
    hi = std::max(hi, g);
  }
  if (hi == lo) return 1.0;
  std::vector<double> rel;
  rel.reserve(ranking.size());
  for (const auto& r : ranking) rel.push_back((gain_of.at(r.id) - lo) / (hi - lo));
  double dcg = 0.0;
  for (std::size_t i = 0; i < rel.size(); ++i) dcg += (std::exp2(rel[i]) - 1.0) / std::log2(static_cast<double>(i) + 2.0);
  std::sort(rel.begin(), rel.end(), std::greater<>());
  double idcg = 0.0;
  for (std::size_t i = 0; i < rel.size(); ++i) idcg += (std::exp2(rel[i]) - 1.0) / std::log2(static_cast<double>(i) + 2.0);
  return dcg / idcg;
}

struct TargetResult {
  std::string target;
  std::vector<RankedSource> ranking;
  std::string best_source;
  std::size_t best_rank = 0;
  double ndcg = 0.0;
};

struct RankingReport {
  std::string predictor;
  std::string regime;
  std::string grouping;
  std::vector<TargetResult> targets;
  double rho = 0.0;
  double ndcg = 0.0;  // on [0, 1]
};

/// Scores every target of `gains` (ids aligned by name, not position).
inline RankingReport evaluate_ranking(const ScoreMatrix& scores, const GainMatrix& gains,
                                      const CandidateFilter& filter = all_other_sources()) {
  gains.validate();
  scores.validate();
  RankingReport rep;
  rep.regime = gains.regime;
  if (gains.targets.empty()) throw Error("evaluate: gain matrix has no targets");
  double rho_sum = 0.0, ndcg_sum = 0.0;
  for (const auto& t : gains.targets) {
    const auto cands = candidates_for(gains, t, filter);
    if (cands.empty()) throw Error("evaluate: empty candidate set for target '" + t + "'");
    TargetResult tr;
    tr.target = t;
    tr.ranking = ranking_for(scores, t, cands);
    tr.best_source = best_source(gains, t, cands);
    tr.best_rank = position_of(tr.ranking, tr.best_source);
    std::map<std::string, double> gain_of;
    const std::size_t ti = gains.target_index(t);
    for (const auto& s : cands) gain_of[s] = gains.at(gains.source_index(s), ti);
    tr.ndcg = ndcg_single(tr.ranking, gain_of);
    rho_sum += static_cast<double>(tr.best_rank);
    ndcg_sum += tr.ndcg;
    rep.targets.push_back(std::move(tr));
  }
  rep.rho = rho_sum / static_cast<double>(rep.targets.size());
  rep.ndcg = ndcg_sum / static_cast<double>(rep.targets.size());
  return rep;
}

inline double avg_best_rank(const ScoreMatrix& scores, const GainMatrix& gains,
                            const CandidateFilter& filter = all_other_sources()) {
  return evaluate_ranking(scores, gains, filter).rho;
}

inline double ndcg(const ScoreMatrix& scores, const GainMatrix& gains,
                   const CandidateFilter& filter = all_other_sources()) {
  return evaluate_ranking(scores, gains, filter).ndcg;
}

/// Expected metrics of a predictor that orders candidates uniformly at random.
/// Every candidate is equally likely at every position, so the expected DCG is
/// the mean gain term times the sum of discounts.
inline double random_ndcg(const GainMatrix& gains, const CandidateFilter& filter = all_other_sources()) {
  double total = 0.0;
  for (const auto& t : gains.targets) {
    const auto cands = candidates_for(gains, t, filter);
    if (cands.empty()) throw Error("random_ndcg: empty candidate set for target '" + t + "'");
    const std::size_t ti = gains.target_index(t);
    std::vector<double> g;
    for (const auto& s : cands) g.push_back(gains.at(gains.source_index(s), ti));
    const auto [lo, hi] = std::minmax_element(g.begin(), g.end());
    if (*hi == *lo) {
      total += 1.0;
      continue;
    }
    std::vector<double> rel;
    for (double v : g) rel.push_back((v - *lo) / (*hi - *lo));
    std::sort(rel.begin(), rel.end(), std::greater<>());
    double mean_gain = 0.0, discounts = 0.0, idcg = 0.0;
    for (std::size_t i = 0; i < rel.size(); ++i) {
      const double disc = 1.0 / std::log2(static_cast<double>(i) + 2.0);
      mean_gain += std::exp2(rel[i]) - 1.0;
      discounts += disc;
      idcg += (std::exp2(rel[i]) - 1.0) * disc;
    }
    mean_gain /= static_cast<double>(rel.size());
    total += mean_gain * discounts / idcg;
  }
  return total / static_cast<double>(gains.targets.size());
}

inline double random_rho(const GainMatrix& gains, const CandidateFilter& filter = all_other_sources()) {
  double total = 0.0;
  for (const auto& t : gains.targets) total += (static_cast<double>(candidates_for(gains, t, filter).size()) + 1.0) / 2.0;
  return total / static_cast<double>(gains.targets.size());
}

/// Sample Pearson correlation.
inline double pearson(std::span<const double> x, std::span<const double> y) {
  if (x.size() != y.size()) throw Error("pearson: length mismatch");
  if (x.size() < 2) throw Error("pearson: need at least two points");
  double mx = 0.0, my = 0.0;
  for (std::size_t i = 0; i < x.size(); ++i) {
    mx += x[i];
    my += y[i];
  }
  mx /= static_cast<double>(x.size());
  my /= static_cast<double>(y.size());
  double sxy = 0.0, sxx = 0.0, syy = 0.0;
  for (std::size_t i = 0; i < x.size(); ++i) {
    sxy += (x[i] - mx) * (y[i] - my);
    sxx += (x[i] - mx) * (x[i] - mx);
    syy += (y[i] - my) * (y[i] - my);
  }
  if (sxx <= 0.0 || syy <= 0.0) throw Error("pearson: degenerate variance");
  return std::clamp(sxy / std::sqrt(sxx * syy), -1.0, 1.0);
}

}  // namespace tupate
