// tupate: command-line pipeline. Every command reads its inputs, writes its
// outputs atomically and never modifies inputs.

#include <cstdio>
#include <exception>
#include <filesystem>
#include <iostream>
#include <map>
#include <string>
#include <vector>

#include <CLI11.hpp>

#include "tupate/store.hpp"

namespace fs = std::filesystem;
using namespace tupate;

namespace {

struct ModelFlags {
  std::size_t d_h = 16;
  std::size_t heads = 2;
  std::size_t layers = 2;
  std::size_t ffn = 32;
  std::uint64_t seed = 1;

  void add(CLI::App* c) {
    c->add_option("--d-h", d_h, "hidden width")->capture_default_str();
    c->add_option("--heads", heads, "attention heads")->capture_default_str();
    c->add_option("--layers", layers, "transformer blocks")->capture_default_str();
    c->add_option("--ffn", ffn, "feed-forward width")->capture_default_str();
    c->add_option("--model-seed", seed, "base model initialization seed")->capture_default_str();
  }
};

struct TrainFlags {
  std::string method = "prefix";
  std::vector<double> lrs;
  double lr_scale = 1.0;
  std::size_t batch = 32;
  std::size_t epochs = 20;
  std::size_t early_epoch = 2;
  std::uint64_t seed = 0;
  std::uint64_t init_seed = 0;
  std::size_t prefix_length = 20;
  std::size_t lora_rank = 8;
  double lora_alpha = 8.0;
  std::string regime = "full";
  std::size_t limited_size = kDefaultLimitedSize;

  void add(CLI::App* c) {
    c->add_option("--method", method, "prefix | bias | lora | full")->capture_default_str();
    c->add_option("--lr", lrs, "learning-rate grid (repeatable; default per method)");
    c->add_option("--lr-scale", lr_scale, "multiplier applied to the grid")->capture_default_str();
    c->add_option("--batch-size", batch, "minibatch size")->capture_default_str();
    c->add_option("--epochs", epochs, "training epochs")->capture_default_str();
    c->add_option("--early-epoch", early_epoch, "epoch of the early checkpoint")->capture_default_str();
    c->add_option("--seed", seed, "data-order seed")->capture_default_str();
    c->add_option("--init-seed", init_seed, "adapter initialization seed")->capture_default_str();
    c->add_option("--prefix-length", prefix_length, "prefix tokens per layer")->capture_default_str();
    c->add_option("--lora-rank", lora_rank, "LoRA rank")->capture_default_str();
    c->add_option("--lora-alpha", lora_alpha, "LoRA alpha")->capture_default_str();
    c->add_option("--regime", regime, "full | limited")->capture_default_str();
    c->add_option("--limited-size", limited_size, "training examples in the limited regime")->capture_default_str();
  }

  TrainConfig config() const {
    TrainConfig t;
    t.method = parse_method(method);
    t.lr_grid = lrs;
    t.lr_scale = lr_scale;
    t.batch_size = batch;
    t.epochs = epochs;
    t.early_epoch = early_epoch;
    t.seed = seed;
    t.init_seed = init_seed;
    t.adapter.prefix_length = prefix_length;
    t.adapter.lora_rank = lora_rank;
    t.adapter.lora_alpha = lora_alpha;
    t.validate();
    return t;
  }
};

void write_text(const std::string& out, const std::string& text) {
  if (out == "-") {
    std::cout << text;
  } else {
    write_file_atomic(out, text);
  }
}

TaskDataset run_data(const Suite& suite, const Task& t, const RunInfo& info) {
  return regime_data(t, info.regime, info.limited_size, suite.config.n_classes);
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Task embeddings from parameter-efficient tuning, and transferability ranking"};
  app.require_subcommand(1);
  app.fallthrough(false);

  // gen-tasks
  SuiteConfig sc;
  sc.seed = 7;
  std::string suite_out;
  auto* gen = app.add_subcommand("gen-tasks", "generate a synthetic task suite");
  gen->add_option("--out", suite_out, "suite directory")->required();
  gen->add_option("--seed", sc.seed, "suite seed")->capture_default_str();
  gen->add_option("--clusters", sc.n_clusters)->capture_default_str();
  gen->add_option("--tasks-per-cluster", sc.tasks_per_cluster)->capture_default_str();
  gen->add_option("--spread", sc.cluster_spread, "within-cluster std of task parameters")->capture_default_str();
  gen->add_option("--centroid-scale", sc.centroid_scale)->capture_default_str();
  gen->add_option("--d-task", sc.d_task)->capture_default_str();
  gen->add_option("--vocab", sc.vocab_size)->capture_default_str();
  gen->add_option("--seq-len", sc.seq_len)->capture_default_str();
  gen->add_option("--classes", sc.n_classes)->capture_default_str();
  gen->add_option("--signal", sc.signal)->capture_default_str();
  gen->add_option("--n-train", sc.n_train)->capture_default_str();
  gen->add_option("--n-val", sc.n_val)->capture_default_str();
  gen->add_option("--n-test", sc.n_test)->capture_default_str();

  // train
  std::string suite_dir, run_dir, out;
  unsigned jobs = 1;
  ModelFlags mf;
  TrainFlags tf;
  auto* train = app.add_subcommand("train", "tune every task of a suite and save checkpoints");
  train->add_option("--suite", suite_dir, "suite directory")->required();
  train->add_option("--out", out, "run directory")->required();
  train->add_option("--jobs", jobs, "worker threads")->capture_default_str();
  mf.add(train);
  tf.add(train);

  // embed
  std::string kind = "tupate", which = "best";
  auto* embed = app.add_subcommand("embed", "extract task embeddings from a run");
  embed->add_option("--run", run_dir, "run directory")->required();
  embed->add_option("--suite", suite_dir, "suite directory (textemb, taskemb, datasize)");
  embed->add_option("--kind", kind, "tupate | textemb | taskemb | datasize")->capture_default_str();
  embed->add_option("--checkpoint", which, "best | early")->capture_default_str();
  embed->add_option("--out", out, "embedding container")->required();

  // rank
  std::string emb_path, gains_path, scores_out, grouping = "all-class", predictor;
  auto* rank = app.add_subcommand("rank", "rank sources for every target by embedding similarity");
  rank->add_option("--embeddings", emb_path, "embedding container")->required();
  rank->add_option("--gains", gains_path, "gain matrix CSV (adds rho and NDCG)");
  rank->add_option("--suite", suite_dir, "suite directory (needed for in-class grouping)");
  rank->add_option("--grouping", grouping, "in-class | all-class")->capture_default_str();
  rank->add_option("--scores", scores_out, "also write the score matrix CSV here");
  rank->add_option("--out", out, "report path, - for stdout")->default_val("-");

  // transfer-matrix
  std::string target_regime = "limited";
  std::size_t limited_size = kDefaultLimitedSize;
  std::size_t target_epochs = 0;
  double target_lr_scale = 1.0;
  auto* transfer = app.add_subcommand("transfer-matrix", "measure transfer gains between every pair of tasks");
  transfer->add_option("--suite", suite_dir, "suite directory")->required();
  transfer->add_option("--run", run_dir, "run whose best checkpoints are the sources")->required();
  transfer->add_option("--out", out, "gain matrix CSV")->required();
  transfer->add_option("--target-regime", target_regime, "full | limited")->capture_default_str();
  transfer->add_option("--limited-size", limited_size)->capture_default_str();
  transfer->add_option("--target-epochs", target_epochs, "target epochs (default: the run's)");
  transfer->add_option("--target-lr-scale", target_lr_scale, "multiplier on the run's grid")->capture_default_str();
  transfer->add_option("--jobs", jobs, "worker threads")->capture_default_str();

  // eval
  std::string scores_path;
  auto* eval = app.add_subcommand("eval", "score a predictor against a gain matrix");
  eval->add_option("--scores", scores_path, "score matrix CSV")->required();
  eval->add_option("--gains", gains_path, "gain matrix CSV")->required();
  eval->add_option("--suite", suite_dir, "suite directory (needed for in-class grouping)");
  eval->add_option("--grouping", grouping, "in-class | all-class")->capture_default_str();
  eval->add_option("--predictor", predictor, "name recorded in the report");
  eval->add_option("--out", out, "report path, - for stdout")->default_val("-");

  // ensemble
  std::vector<std::string> inputs;
  auto* ens = app.add_subcommand("ensemble", "average score matrices");
  ens->add_option("inputs", inputs, "score matrix CSVs")->required()->expected(1, -1);
  ens->add_option("--out", out, "averaged score matrix CSV")->required();

  // study
  auto* study = app.add_subcommand("study", "analysis studies");
  study->require_subcommand(1);
  std::size_t n_runs = 5;
  auto* corr = study->add_subcommand("correlate", "relate in-task accuracy to ranking quality");
  corr->add_option("--suite", suite_dir, "suite directory")->required();
  corr->add_option("--run", run_dir, "run providing the base model and training setup")->required();
  corr->add_option("--gains", gains_path, "gain matrix CSV")->required();
  corr->add_option("--runs", n_runs, "hyperparameter/seed variants")->capture_default_str();
  corr->add_option("--grouping", grouping, "in-class | all-class")->capture_default_str();
  corr->add_option("--jobs", jobs, "worker threads")->capture_default_str();
  corr->add_option("--out", out, "report path, - for stdout")->default_val("-");
  auto* evb = study->add_subcommand("early-vs-best", "compare early and best-checkpoint embeddings");
  evb->add_option("--suite", suite_dir, "suite directory")->required();
  evb->add_option("--run", run_dir, "run directory")->required();
  evb->add_option("--gains", gains_path, "gain matrix CSV")->required();
  evb->add_option("--grouping", grouping, "in-class | all-class")->capture_default_str();
  evb->add_option("--out", out, "report path, - for stdout")->default_val("-");

  if (argc > 1 && argv[1][0] != '-') {
    const std::string cmd = argv[1];
    bool known = false;
    for (const auto* sub : app.get_subcommands({})) known = known || sub->get_name() == cmd;
    if (!known) {
      std::cerr << app.help();
      std::cerr << "tupate: unknown command '" << cmd << "'\n";
      return 2;
    }
  }

  try {
    app.parse(argc, argv);
  } catch (const CLI::CallForHelp& e) {
    return app.exit(e);
  } catch (const CLI::CallForAllHelp& e) {
    return app.exit(e);
  } catch (const CLI::ParseError& e) {
    std::cerr << app.help();
    std::cerr << "tupate: " << e.what() << "\n";
    return 2;
  }

  try {
    if (*gen) {
      save_suite(suite_out, gen_suite(sc));
    } else if (*train) {
      const Suite suite = load_suite(suite_dir);
      RunInfo info;
      info.train = tf.config();
      info.regime = parse_regime(tf.regime);
      info.limited_size = tf.limited_size;
      info.model = ModelConfig{suite.config.vocab_size, suite.config.seq_len, mf.d_h, mf.heads, mf.layers, mf.ffn,
                               suite.config.n_classes};
      info.model.validate();
      info.model_seed = mf.seed;
      info.tasks = suite.ids();
      const auto base = make_base(info.model, mf.seed);
      const auto training = train_suite(suite, base, info.train, info.regime, info.limited_size, jobs);
      save_run(out, info, base, training);
    } else if (*embed) {
      const auto run = load_run(run_dir);
      const bool early = which == "early";
      if (!early && which != "best") throw Error("--checkpoint must be best or early");
      EmbeddingSet e;
      if (kind == "tupate") {
        e.method = "tupate-" + to_string(run.info.train.method);
        e.vectors = tupate_embeddings(run.training, early);
      } else {
        if (suite_dir.empty()) throw Error("--suite is required for --kind " + kind);
        const Suite suite = load_suite(suite_dir);
        check_run_matches(suite, run.info);
        e.method = kind;
        for (const auto& t : suite.tasks) {
          const auto data = run_data(suite, t, run.info);
          if (kind == "textemb") {
            e.vectors.emplace(t.spec.id, textemb(run.base, data.train, t.spec.id).vector);
          } else if (kind == "taskemb") {
            const auto& ck = run.training.results.at(t.spec.id);
            const auto& c = early ? ck.early : ck.best;
            if (!c.model) throw Error("taskemb needs a run trained with --method full");
            e.vectors.emplace(t.spec.id, fisher_taskemb(*c.model, data.train, t.spec.id).vector);
          } else if (kind == "datasize") {
            e.vectors.emplace(t.spec.id, Tensor({1}, {static_cast<float>(datasize_score(data))}));
          } else {
            throw Error("unknown embedding kind '" + kind + "'");
          }
        }
      }
      save_embeddings(out, e);
    } else if (*rank) {
      const auto emb = load_embeddings(emb_path);
      const auto scores = scores_for(emb);
      if (!scores_out.empty()) write_matrix(scores_out, scores);
      RankingReport rep;
      if (!gains_path.empty()) {
        const GainMatrix gains = read_gains(gains_path);
        const auto g = parse_grouping(grouping);
        if (g == Grouping::InClass && suite_dir.empty()) throw Error("--suite is required for in-class grouping");
        const auto filter = g == Grouping::InClass ? grouping_filter(load_suite(suite_dir), g) : all_other_sources();
        rep = evaluate_ranking(scores, gains, filter);
        rep.grouping = grouping;
      } else {
        for (const auto& t : scores.targets) {
          TargetResult tr;
          tr.target = t;
          std::vector<std::string> cands;
          for (const auto& s : scores.sources)
            if (s != t) cands.push_back(s);
          tr.ranking = ranking_for(scores, t, cands);
          rep.targets.push_back(std::move(tr));
        }
      }
      rep.predictor = emb.method;
      write_text(out, report_text(rep));
    } else if (*transfer) {
      const Suite suite = load_suite(suite_dir);
      const auto run = load_run(run_dir);
      check_run_matches(suite, run.info);
      TransferConfig tc;
      tc.source = run.info.train;
      tc.target = run.info.train;
      if (target_epochs) {
        tc.target.epochs = target_epochs;
        tc.target.early_epoch = std::min(tc.target.early_epoch, target_epochs);
      }
      tc.target.lr_scale = target_lr_scale;
      tc.source_regime = run.info.regime;
      tc.target_regime = parse_regime(target_regime);
      tc.limited_size = limited_size;
      tc.seed = run.info.train.seed;
      tc.jobs = jobs;
      const auto res = transfer_gain_matrix(suite, run.base, tc, &run.training);
      write_gains(out, res.gains);
    } else if (*eval) {
      const auto scores = read_matrix(scores_path);
      const GainMatrix gains = read_gains(gains_path);
      const auto g = parse_grouping(grouping);
      if (g == Grouping::InClass && suite_dir.empty()) throw Error("--suite is required for in-class grouping");
      const auto filter = g == Grouping::InClass ? grouping_filter(load_suite(suite_dir), g) : all_other_sources();
      auto rep = evaluate_ranking(scores, gains, filter);
      rep.grouping = grouping;
      rep.predictor = predictor.empty() ? fs::path(scores_path).stem().string() : predictor;
      write_text(out, report_text(rep));
    } else if (*ens) {
      std::vector<ScoreMatrix> ms;
      for (const auto& p : inputs) ms.push_back(read_matrix(p));
      write_matrix(out, ensemble(ms));
    } else if (*corr) {
      const Suite suite = load_suite(suite_dir);
      const auto run = load_run(run_dir);
      check_run_matches(suite, run.info);
      const GainMatrix gains = read_gains(gains_path);
      const auto rep = correlation_study(suite, run.base, gains, run.info.train, run.info.regime, n_runs,
                                         run.info.limited_size, jobs, parse_grouping(grouping));
      write_text(out, report_text(rep));
    } else if (*evb) {
      const Suite suite = load_suite(suite_dir);
      const auto run = load_run(run_dir);
      check_run_matches(suite, run.info);
      const GainMatrix gains = read_gains(gains_path);
      write_text(out, report_text(early_vs_best_study(suite, run.training, gains, parse_grouping(grouping))));
    }
  } catch (const std::exception& e) {
    std::string msg = e.what();
    for (auto& c : msg)
      if (c == '\n') c = ' ';
    std::cerr << "tupate: " << msg << "\n";
    return 1;
  }
  return 0;
}
