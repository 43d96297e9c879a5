// Command-line front end for the per-language pipeline:
//   build-vocab -> pretrain -> finetune pos|morph -> predict -> score
//   (+ pretrain-seq2seq / finetune lemma for lemmatization)
//
// Exit codes: 0 success, 1 usage error, 2 data error, 3 numerical failure.

#include <iostream>
#include <string>
#include <vector>

#include "CLI11.hpp"
#include "hlm/experiment.hpp"

namespace {

struct CommonArgs {
  std::string config_path;
  std::vector<std::string> overrides;
};

void add_common(CLI::App* sub, CommonArgs& args) {
  sub->add_option("-c,--config", args.config_path, "JSON experiment config");
  sub->add_option("--set", args.overrides,
                  "override a config value by dotted path, e.g. --set pretrain.epochs=5");
}

hlm::ExperimentConfig load_config(const CommonArgs& args) {
  return hlm::ExperimentConfig::load(args.config_path, args.overrides);
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"hierarchical character-level pipeline for historical languages"};
  app.require_subcommand(1);

  CommonArgs args;
  std::string split = "test";
  std::string task;
  std::string checkpoint;
  std::string upos_pred;
  std::string pred_path;

  CLI::App* stats = app.add_subcommand("stats", "token and sentence counts of one split");
  add_common(stats, args);
  stats->add_option("--split", split, "train|valid|test")->capture_default_str();

  CLI::App* vocab = app.add_subcommand("build-vocab", "build the character vocabulary");
  add_common(vocab, args);

  CLI::App* pre = app.add_subcommand("pretrain", "RTD (or MLM) pre-training");
  add_common(pre, args);

  CLI::App* pre_s2s =
      app.add_subcommand("pretrain-seq2seq", "span-corruption pre-training of the lemmatizer");
  add_common(pre_s2s, args);

  CLI::App* fine = app.add_subcommand("finetune", "fine-tune pos, morph or lemma");
  add_common(fine, args);
  fine->add_option("--task", task, "pos|morph|lemma")->required();
  fine->add_option("--checkpoint", checkpoint, "base checkpoint (defaults to the run artifact)");

  CLI::App* predict = app.add_subcommand("predict", "annotate a split with a fine-tuned model");
  add_common(predict, args);
  predict->add_option("--task", task, "pos|morph|lemma")->required();
  predict->add_option("--split", split, "train|valid|test")->capture_default_str();
  predict->add_option("--checkpoint", checkpoint, "fine-tuned checkpoint");
  predict->add_option("--upos-pred", upos_pred,
                      "UPoS prediction file consumed by lemma prediction");

  CLI::App* score = app.add_subcommand("score", "official scores of a prediction file");
  add_common(score, args);
  score->add_option("--task", task, "pos|morph|lemma")->required();
  score->add_option("--pred", pred_path, "prediction file")->required();
  score->add_option("--split", split, "gold split to score against")->capture_default_str();

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int code = app.exit(e);
    return code == 0 ? 0 : 1;
  }

  try {
    const hlm::ExperimentConfig cfg = load_config(args);
    if (stats->parsed()) return hlm::cmd_stats(cfg, split);
    if (vocab->parsed()) return hlm::cmd_build_vocab(cfg);
    if (pre->parsed()) return hlm::cmd_pretrain(cfg);
    if (pre_s2s->parsed()) return hlm::cmd_pretrain_seq2seq(cfg);
    if (fine->parsed()) return hlm::cmd_finetune(cfg, task, checkpoint);
    if (predict->parsed()) return hlm::cmd_predict(cfg, task, split, checkpoint, upos_pred);
    if (score->parsed()) return hlm::cmd_score(cfg, task, pred_path, split);
    std::cerr << "no command given\n";
    return 1;
  } catch (const hlm::NumericalError& e) {
    std::cerr << "numerical failure: " << e.what() << "\n";
    return 3;
  } catch (const hlm::ParseError& e) {
    std::cerr << "parse error: " << e.what() << "\n";
    return 2;
  } catch (const hlm::DataError& e) {
    std::cerr << "data error: " << e.what() << "\n";
    return 2;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 2;
  }
}
