// Tune prefix adapters on a small suite, embed each task from its adapter,
// and check the similarity ranking against measured transfer gains.
#include <cstdio>

#include "tupate/lab.hpp"

using namespace tupate;

int main() {
  SuiteConfig sc;
  sc.tasks_per_cluster = 3;
  sc.vocab_size = 32;
  sc.seq_len = 12;
  sc.n_train = 160;
  sc.n_val = 80;
  sc.n_test = 160;
  const auto suite = gen_suite(sc);

  ModelConfig mc;
  mc.vocab_size = sc.vocab_size;
  mc.max_seq_len = sc.seq_len;
  mc.d_h = 16;
  mc.n_heads = 2;
  mc.n_layers = 2;
  mc.d_ffn = 32;
  Rng rng(1);
  const auto base = init_model<float>(mc, rng);

  TransferConfig tc;
  tc.source.method = Method::Prefix;
  tc.source.epochs = 8;
  tc.source.adapter.prefix_length = 4;
  tc.target = tc.source;
  tc.limited_size = 40;
  const auto result = transfer_gain_matrix(suite, base, tc);

  const auto scores = similarity_scores(tupate_embeddings(result.source_training));
  for (const auto& target : suite.ids()) {
    const auto candidates = candidates_for(result.gains, target, all_other_sources());
    const auto ranking = ranking_for(scores, target, candidates);
    const auto best = best_source(result.gains, target, candidates);
    std::printf("%s  predicted best %s (cos %.3f)  measured best %s (gain %+.3f)\n", target.c_str(),
                ranking.front().id.c_str(), ranking.front().score, best.c_str(), result.gains.get(best, target));
  }
  const auto rep = evaluate_predictor(scores, result.gains, suite, Grouping::AllClass);
  std::printf("rho %.2f (random %.2f)  ndcg %.3f (random %.3f)\n", rep.rho, random_rho(result.gains), rep.ndcg,
              random_ndcg(result.gains));
}
