#pragma once

#include <string>
#include <vector>

#include "hlm/charvocab.hpp"
#include "hlm/conllu.hpp"
#include "hlm/encoder.hpp"
#include "hlm/pretrain.hpp"
#include "hlm/seq2seq.hpp"
#include "hlm/taggers.hpp"

#include "json.hpp"

namespace hlm {

/// Resolved experiment configuration for one language. Defaults carry the
/// published training hyperparameters; a config file and --set overrides are
/// merged on top. The constrained-task rule is enforced: every referenced
/// data file must belong to the configured language.
struct ExperimentConfig {
  std::string language;
  std::uint64_t seed = 42;
  std::string run_dir = "runs/run";
  std::string train_path, valid_path, test_path;

  HlmConfig generator;       // vocab_size filled in once the vocabulary exists
  HlmConfig discriminator;
  PretrainConfig pretrain;
  bool pretrain_dropout = true;
  FinetuneConfig finetune;
  Seq2SeqConfig seq2seq;
  Seq2SeqTrainConfig seq2seq_pretrain;
  LemmaFinetuneConfig lemma_finetune;

  nlohmann::json resolved;  // the merged JSON, echoed into the run dir

  static nlohmann::json defaults();
  static ExperimentConfig from_json(const nlohmann::json& j);
  static ExperimentConfig load(const std::string& config_path,
                               const std::vector<std::string>& overrides);

  const std::string& split_path(const std::string& split) const;
  /// Parses a data split, enforcing the <language>_<split>.conllu naming rule.
  Treebank load_split(const std::string& split) const;
};

/// Dotted-path override "a.b.c=value"; values parse as JSON when possible,
/// as strings otherwise.
void apply_override(nlohmann::json& j, const std::string& assignment);

// ---------------------------------------------------------------------------
// run-directory bookkeeping
// ---------------------------------------------------------------------------

/// Creates the run directory (if needed) and writes the resolved config.
void prepare_run_dir(const ExperimentConfig& cfg);

/// Appends one role -> path record; the latest record for a role wins.
void record_artifact(const std::string& run_dir, const std::string& role,
                     const std::string& relative_path);

/// Latest recorded path for a role, or empty when absent.
std::string find_artifact(const std::string& run_dir, const std::string& role);

/// Saves a checkpoint under checkpoints/<fnv1a>.ckpt and records the role.
std::string save_checkpoint_artifact(const std::string& run_dir, const Checkpoint& ckpt,
                                     const std::string& role);

// ---------------------------------------------------------------------------
// commands (shared by the CLI and the integration tests)
// ---------------------------------------------------------------------------

int cmd_stats(const ExperimentConfig& cfg, const std::string& split);
int cmd_build_vocab(const ExperimentConfig& cfg);
int cmd_pretrain(const ExperimentConfig& cfg);
int cmd_pretrain_seq2seq(const ExperimentConfig& cfg);
int cmd_finetune(const ExperimentConfig& cfg, const std::string& task,
                 const std::string& checkpoint_path);
int cmd_predict(const ExperimentConfig& cfg, const std::string& task, const std::string& split,
                const std::string& checkpoint_path, const std::string& upos_pred_path);
int cmd_score(const ExperimentConfig& cfg, const std::string& task, const std::string& pred_path,
              const std::string& split);

}  // namespace hlm
