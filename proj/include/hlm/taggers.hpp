#pragma once

#include <algorithm>
#include <functional>
#include <set>
#include <string>
#include <vector>

#include "hlm/charvocab.hpp"
#include "hlm/conllu.hpp"
#include "hlm/encoder.hpp"
#include "hlm/metrics.hpp"
#include "hlm/ops.hpp"
#include "hlm/optim.hpp"

namespace hlm {

enum class TagTask { Pos, Morph };

inline TagTask tag_task_from_string(const std::string& s) {
  if (s == "pos") return TagTask::Pos;
  if (s == "morph") return TagTask::Morph;
  throw DataError("unknown tagging task: " + s);
}

/// One window of a sentence prepared for tagging: the character grid plus the
/// first-piece word positions and the token indices they label.
struct TagWindow {
  CharGrid grid;
  std::vector<Eigen::Index> first_piece_positions;
  std::vector<int> token_indices;
};

inline std::vector<TagWindow> tag_windows(const Sentence& s, const CharVocab& vocab,
                                          int max_word_len, int max_seq_len) {
  std::vector<TagWindow> out;
  for (const EncodedSentence& enc : encode_sentence(s, vocab, max_word_len, max_seq_len)) {
    TagWindow w;
    w.grid = CharGrid::from_words(enc.words, max_word_len);
    for (std::size_t p = 0; p < enc.words.size(); ++p) {
      if (enc.is_first_piece[p]) {
        w.first_piece_positions.push_back(static_cast<Eigen::Index>(p));
        w.token_indices.push_back(enc.word_to_token[p]);
      }
    }
    out.push_back(std::move(w));
  }
  return out;
}

/// Sorted UPoS inventory observed in the training split.
inline std::vector<std::string> upos_labels(const Treebank& train) {
  std::set<std::string> seen;
  for (const auto& s : train.sentences)
    for (const auto& t : s.tokens) seen.insert(t.upos);
  return {seen.begin(), seen.end()};
}

/// Concatenated context-free + contextual word representation for each
/// first-piece word: [tokens, 2*hidden].
template <typename S>
TensorT<S> word_final_repr(const typename HlmEncoderT<S>::WordReps& reps,
                           const std::vector<Eigen::Index>& first_piece_positions) {
  TensorT<S> intra = index_select0(reps.intra_cls, first_piece_positions);
  TensorT<S> inter = index_select0(reps.inter_ctx, first_piece_positions);
  return concat<S>({intra, inter}, 1);
}

/// k classification heads over the concatenated word representation, one per
/// morphological category (labels = observed values plus NONE), plus a UPoS
/// head for the PoS task. Heads are linear by default; head_hidden > 0 adds
/// one GELU hidden layer.
template <typename S>
class TagHeadsT {
 public:
  TagHeadsT(const FeatureSchema& schema, const std::vector<std::string>& upos,
            Eigen::Index hidden, Eigen::Index head_hidden, TagTask task, Rng& rng)
      : schema_(schema), upos_(upos), task_(task), head_hidden_(head_hidden) {
    const Eigen::Index in_dim = 2 * hidden;
    if (task_ == TagTask::Morph && schema_.category_count() == 0)
      throw DataError("morphological tagging with k = 0 categories");
    if (head_hidden_ > 0) {
      hidden_w_ = params_.add_trunc_normal("heads.hidden.w", {in_dim, head_hidden_}, rng);
      hidden_b_ = params_.add_zeros("heads.hidden.b", {head_hidden_});
    }
    const Eigen::Index feat_dim = head_hidden_ > 0 ? head_hidden_ : in_dim;
    for (std::size_t m = 0; m < schema_.category_count(); ++m) {
      const Eigen::Index n = static_cast<Eigen::Index>(schema_.values[m].size());
      morph_w_.push_back(
          params_.add_trunc_normal("heads.morph." + schema_.categories[m] + ".w", {feat_dim, n}, rng));
      morph_b_.push_back(params_.add_zeros("heads.morph." + schema_.categories[m] + ".b", {n}));
    }
    if (task_ == TagTask::Pos) {
      const Eigen::Index n = static_cast<Eigen::Index>(upos_.size());
      upos_w_ = params_.add_trunc_normal("heads.upos.w", {feat_dim, n}, rng);
      upos_b_ = params_.add_zeros("heads.upos.b", {n});
    }
  }

  ParamStoreT<S>& params() { return params_; }
  const ParamStoreT<S>& params() const { return params_; }
  const FeatureSchema& schema() const { return schema_; }
  const std::vector<std::string>& upos() const { return upos_; }
  TagTask task() const { return task_; }

  TensorT<S> features(const TensorT<S>& repr) const {
    if (head_hidden_ <= 0) return repr;
    return gelu(add(matmul(repr, hidden_w_), hidden_b_));
  }

  std::vector<TensorT<S>> morph_logits(const TensorT<S>& repr) const {
    TensorT<S> f = features(repr);
    std::vector<TensorT<S>> out;
    for (std::size_t m = 0; m < morph_w_.size(); ++m)
      out.push_back(add(matmul(f, morph_w_[m]), morph_b_[m]));
    return out;
  }

  TensorT<S> upos_logits(const TensorT<S>& repr) const {
    if (task_ != TagTask::Pos) throw DataError("upos_logits: not a PoS head");
    return add(matmul(features(repr), upos_w_), upos_b_);
  }

  /// L_morph = (1/k) * sum of per-category cross-entropies; absent features
  /// train toward NONE.
  TensorT<S> morph_loss(const TensorT<S>& repr, const std::vector<const Token*>& tokens) const {
    const auto logits = morph_logits(repr);
    TensorT<S> total;
    for (std::size_t m = 0; m < logits.size(); ++m) {
      std::vector<Eigen::Index> targets;
      targets.reserve(tokens.size());
      for (const Token* t : tokens) {
        auto it = t->feats.find(schema_.categories[m]);
        targets.push_back(it == t->feats.end() ? 0 : schema_.value_index(m, it->second));
      }
      TensorT<S> l = cross_entropy(logits[m], targets);
      total = total.defined() ? add(total, l) : l;
    }
    return scale(total, S(1) / S(logits.size()));
  }

  TensorT<S> upos_loss(const TensorT<S>& repr, const std::vector<const Token*>& tokens) const {
    std::vector<Eigen::Index> targets;
    targets.reserve(tokens.size());
    for (const Token* t : tokens) {
      const auto it = std::lower_bound(upos_.begin(), upos_.end(), t->upos);
      if (it == upos_.end() || *it != t->upos)
        throw DataError("UPoS tag not in training inventory: " + t->upos);
      targets.push_back(it - upos_.begin());
    }
    return cross_entropy(upos_logits(repr), targets);
  }

  /// Training loss: L_morph for the morph task, L_UPoS + L_morph for PoS
  /// (when the schema is non-empty); inference ignores the auxiliary heads.
  TensorT<S> train_loss(const TensorT<S>& repr, const std::vector<const Token*>& tokens) const {
    if (task_ == TagTask::Morph) return morph_loss(repr, tokens);
    TensorT<S> loss = upos_loss(repr, tokens);
    if (schema_.category_count() > 0) loss = add(loss, morph_loss(repr, tokens));
    return loss;
  }

 private:
  FeatureSchema schema_;
  std::vector<std::string> upos_;
  TagTask task_;
  Eigen::Index head_hidden_;
  ParamStoreT<S> params_;
  TensorT<S> hidden_w_, hidden_b_, upos_w_, upos_b_;
  std::vector<TensorT<S>> morph_w_, morph_b_;
};

// ---------------------------------------------------------------------------
// prediction
// ---------------------------------------------------------------------------

/// Fills upos (PoS task) or feats (morph task) on a copy of the treebank.
/// Predicted NONE means the category is absent from the output map.
template <typename S>
Treebank predict_tags(const HlmEncoderT<S>& encoder, const TagHeadsT<S>& heads,
                      const Treebank& input, const CharVocab& vocab) {
  Treebank out = input;
  for (auto& sentence : out.sentences) {
    for (const TagWindow& w :
         tag_windows(sentence, vocab, encoder.config().max_word_len, encoder.config().max_seq_len)) {
      auto reps = encoder.encode(w.grid, nullptr);
      TensorT<S> repr = word_final_repr<S>(reps, w.first_piece_positions);
      if (heads.task() == TagTask::Pos) {
        const auto pred = argmax_lastdim(heads.upos_logits(repr));
        for (std::size_t i = 0; i < w.token_indices.size(); ++i)
          sentence.tokens[static_cast<std::size_t>(w.token_indices[i])].upos =
              heads.upos()[static_cast<std::size_t>(pred[i])];
      } else {
        const auto logits = heads.morph_logits(repr);
        for (std::size_t i = 0; i < w.token_indices.size(); ++i)
          sentence.tokens[static_cast<std::size_t>(w.token_indices[i])].feats.clear();
        for (std::size_t m = 0; m < logits.size(); ++m) {
          const auto pred = argmax_lastdim(logits[m]);
          for (std::size_t i = 0; i < w.token_indices.size(); ++i) {
            const Eigen::Index v = pred[i];
            if (v == 0) continue;  // NONE: category absent in the output
            sentence.tokens[static_cast<std::size_t>(w.token_indices[i])]
                .feats[heads.schema().categories[m]] =
                heads.schema().values[m][static_cast<std::size_t>(v)];
          }
        }
      }
    }
  }
  return out;
}

/// Official validation score for early stopping: the task's shared-task
/// metric on the predicted vs gold annotations.
template <typename S>
double validation_score(const HlmEncoderT<S>& encoder, const TagHeadsT<S>& heads,
                        const Treebank& gold, const CharVocab& vocab) {
  Treebank pred = predict_tags(encoder, heads, gold, vocab);
  std::vector<std::string> pred_tags, gold_tags;
  std::vector<Feats> pred_feats, gold_feats;
  for (std::size_t s = 0; s < gold.sentences.size(); ++s) {
    for (std::size_t t = 0; t < gold.sentences[s].tokens.size(); ++t) {
      pred_tags.push_back(pred.sentences[s].tokens[t].upos);
      gold_tags.push_back(gold.sentences[s].tokens[t].upos);
      pred_feats.push_back(pred.sentences[s].tokens[t].feats);
      gold_feats.push_back(gold.sentences[s].tokens[t].feats);
    }
  }
  return heads.task() == TagTask::Pos ? pos_score(pred_tags, gold_tags).score
                                      : morph_score(pred_feats, gold_feats).score;
}

// ---------------------------------------------------------------------------
// fine-tuning loop
// ---------------------------------------------------------------------------

struct FinetuneConfig {
  double learning_rate = 2e-5;
  double weight_decay = 0.01;
  int batch_size = 16;
  int patience = 10;
  int max_epochs = 100;
  Eigen::Index head_hidden = 0;
  bool freeze_encoder = false;
};

struct FinetuneResult {
  int epochs_run = 0;
  int best_epoch = -1;
  double best_score = -1.0;
  std::vector<double> validation_curve;
  long long trainable_parameters = 0;
};

/// AdamW fine-tuning with a linear schedule and early stopping: training
/// halts after `patience` consecutive epochs without strict improvement of
/// the validation score, and the best-epoch parameters are restored.
template <typename S>
FinetuneResult finetune_tagger(HlmEncoderT<S>& encoder, TagHeadsT<S>& heads,
                               const Treebank& train, const Treebank& valid,
                               const CharVocab& vocab, const FinetuneConfig& cfg, Rng& rng) {
  if (train.sentences.empty()) throw DataError("finetune: empty training split");

  std::vector<std::vector<TagWindow>> windows;
  for (const auto& s : train.sentences)
    windows.push_back(
        tag_windows(s, vocab, encoder.config().max_word_len, encoder.config().max_seq_len));

  if (cfg.freeze_encoder)
    for (auto& p : encoder.params().items()) p.tensor.set_requires_grad(false);

  FinetuneResult result;
  result.trainable_parameters =
      (cfg.freeze_encoder ? 0 : encoder.params().total_size()) + heads.params().total_size();

  const long long steps_per_epoch =
      (static_cast<long long>(windows.size()) + cfg.batch_size - 1) / cfg.batch_size;
  LrSchedule schedule =
      LrSchedule::linear(cfg.learning_rate, cfg.max_epochs * steps_per_epoch, 0);
  OptimizerT<S> enc_opt({OptKind::AdamW, 0.9, 0.999, 1e-8, cfg.weight_decay}, encoder.params());
  OptimizerT<S> head_opt({OptKind::AdamW, 0.9, 0.999, 1e-8, cfg.weight_decay}, heads.params());

  auto best_enc = encoder.params().snapshot();
  auto best_heads = heads.params().snapshot();
  EarlyStopping stopper(cfg.patience);
  long long step = 0;

  std::vector<std::size_t> order(windows.size());
  for (std::size_t i = 0; i < order.size(); ++i) order[i] = i;

  for (int epoch = 0; epoch < cfg.max_epochs; ++epoch) {
    for (std::size_t i = order.size(); i > 1; --i)
      std::swap(order[i - 1], order[rng.uniform_int(i)]);

    for (std::size_t start = 0; start < order.size();
         start += static_cast<std::size_t>(cfg.batch_size)) {
      const std::size_t end =
          std::min(order.size(), start + static_cast<std::size_t>(cfg.batch_size));
      encoder.params().zero_grads();
      heads.params().zero_grads();

      TensorT<S> batch_loss;
      long long n_sentences = 0;
      for (std::size_t i = start; i < end; ++i) {
        const auto& sentence = train.sentences[order[i]];
        for (const TagWindow& w : windows[order[i]]) {
          if (w.first_piece_positions.empty()) continue;
          auto reps = encoder.encode(w.grid, nullptr);
          TensorT<S> repr = word_final_repr<S>(reps, w.first_piece_positions);
          std::vector<const Token*> toks;
          for (int ti : w.token_indices)
            toks.push_back(&sentence.tokens[static_cast<std::size_t>(ti)]);
          TensorT<S> l = heads.train_loss(repr, toks);
          batch_loss = batch_loss.defined() ? add(batch_loss, l) : l;
        }
        ++n_sentences;
      }
      if (!batch_loss.defined()) continue;
      TensorT<S> loss = scale(batch_loss, S(1) / S(n_sentences));
      backward(loss);
      const double lr = schedule.lr(step++);
      if (!cfg.freeze_encoder) enc_opt.step(encoder.params(), lr);
      head_opt.step(heads.params(), lr);
    }

    const double score = validation_score(encoder, heads, valid, vocab);
    result.validation_curve.push_back(score);
    ++result.epochs_run;
    const bool stop = stopper.observe(score);
    if (stopper.improved_last()) {
      best_enc = encoder.params().snapshot();
      best_heads = heads.params().snapshot();
    }
    if (stop) break;
  }
  result.best_epoch = stopper.best_epoch();
  result.best_score = stopper.best_score();

  encoder.params().restore(best_enc);
  heads.params().restore(best_heads);
  if (cfg.freeze_encoder)
    for (auto& p : encoder.params().items()) p.tensor.set_requires_grad(true);
  return result;
}

}  // namespace hlm
