#pragma once

#include <memory>
#include <string>
#include <vector>

#include "hlm/attention.hpp"
#include "hlm/charvocab.hpp"
#include "hlm/ops.hpp"
#include "hlm/optim.hpp"

namespace hlm {

/// Hyperparameters of one hierarchical encoder (generator or discriminator).
struct HlmConfig {
  int intra_layers = 4;
  int inter_layers = 12;
  Eigen::Index hidden = 768;
  Eigen::Index intra_intermediate = 1536;
  Eigen::Index inter_intermediate = 3072;
  Eigen::Index heads = 12;
  int max_word_len = 16;
  int max_seq_len = 512;
  Eigen::Index max_rel_dist_intra = 16;
  Eigen::Index max_rel_dist_inter = 512;
  double dropout = 0.1;
  int vocab_size = 0;

  static HlmConfig generator_defaults(int vocab) {
    HlmConfig c;
    c.intra_layers = 3;
    c.inter_layers = 6;
    c.vocab_size = vocab;
    return c;
  }
  static HlmConfig discriminator_defaults(int vocab) {
    HlmConfig c;
    c.intra_layers = 4;
    c.inter_layers = 12;
    c.vocab_size = vocab;
    return c;
  }

  EncoderLayerConfig intra_layer_config() const {
    return {hidden, intra_intermediate, heads, dropout, max_rel_dist_intra};
  }
  EncoderLayerConfig inter_layer_config() const {
    return {hidden, inter_intermediate, heads, dropout, max_rel_dist_inter};
  }
};

/// One window of character ids, every word padded to max_word_len.
struct CharGrid {
  Eigen::Index words = 0;
  Eigen::Index width = 0;
  std::vector<Eigen::Index> ids;   // words * width, row-major
  std::vector<std::uint8_t> pad;   // 1 where PAD

  static CharGrid from_words(const std::vector<EncodedWord>& ws, int max_word_len) {
    CharGrid g;
    g.words = static_cast<Eigen::Index>(ws.size());
    g.width = max_word_len;
    g.ids.assign(static_cast<std::size_t>(g.words * g.width), CharVocab::kPad);
    g.pad.assign(static_cast<std::size_t>(g.words * g.width), 1);
    for (Eigen::Index w = 0; w < g.words; ++w) {
      const auto& ids = ws[static_cast<std::size_t>(w)].char_ids;
      for (std::size_t c = 0; c < ids.size(); ++c) {
        g.ids[static_cast<std::size_t>(w * g.width) + c] = ids[c];
        g.pad[static_cast<std::size_t>(w * g.width) + c] = 0;
      }
    }
    return g;
  }

  int word_length(Eigen::Index w) const {
    int n = 0;
    for (Eigen::Index c = 0; c < width; ++c)
      if (!pad[static_cast<std::size_t>(w * width + c)]) ++n;
    return n;
  }
};

/// Two-level encoder of the hierarchical model: a shallow per-word encoder
/// over characters and a deep encoder over the WORD_CLS vectors, plus the
/// character-restoring head (softmax over the vocabulary for the generator,
/// a single sigmoid logit for the discriminator).
template <typename S>
class HlmEncoderT {
 public:
  enum class Head { LmSoftmax, RtdSigmoid, None };

  struct WordReps {
    TensorT<S> intra_cls;    // [W, d], context-free word vectors
    TensorT<S> inter_ctx;    // [W, d], contextualized word vectors
    TensorT<S> char_states;  // [W, L, d], per-character states (pos 0 = WORD_CLS)
    std::vector<std::uint8_t> char_pad;  // [W*L]
  };

  /// `gdes_base`: the generator's character embedding table. When set, this
  /// model's own table is a zero-initialized delta and the effective
  /// embeddings are stop_gradient(base) + delta, so this model's losses can
  /// never update the shared table.
  HlmEncoderT(const HlmConfig& cfg, Head head, Rng& rng, TensorT<S> gdes_base = {})
      : cfg_(cfg), head_(head), gdes_base_(gdes_base) {
    if (cfg.vocab_size <= 0) throw DataError("HlmEncoder: vocab_size not set");
    const Eigen::Index v = cfg.vocab_size, d = cfg.hidden;

    if (gdes_base_.defined()) {
      if (gdes_base_.shape() != Shape{v, d})
        throw ShapeError("GDES base table shape " + shape_str(gdes_base_.shape()) +
                         " does not match " + shape_str({v, d}));
      char_emb_ = params_.add_zeros("embeddings.char", {v, d});
    } else {
      char_emb_ = params_.add_trunc_normal("embeddings.char", {v, d}, rng);
    }
    emb_ln_g_ = params_.add_ones("embeddings.ln.gain", {d});
    emb_ln_b_ = params_.add_zeros("embeddings.ln.bias", {d});

    intra_rel_.max_distance = cfg.max_rel_dist_intra;
    intra_rel_.table =
        params_.add_trunc_normal("intra.rel_table", {2 * cfg.max_rel_dist_intra, d}, rng);
    inter_rel_.max_distance = cfg.max_rel_dist_inter;
    inter_rel_.table =
        params_.add_trunc_normal("inter.rel_table", {2 * cfg.max_rel_dist_inter, d}, rng);

    for (int i = 0; i < cfg.intra_layers; ++i)
      intra_layers_.push_back(DisentangledLayerT<S>::create(
          params_, "intra.l" + std::to_string(i), cfg.intra_layer_config(), rng));
    for (int i = 0; i < cfg.inter_layers; ++i)
      inter_layers_.push_back(DisentangledLayerT<S>::create(
          params_, "inter.l" + std::to_string(i), cfg.inter_layer_config(), rng));

    if (head_ != Head::None) {
      // Single-layer intra-word module of the restoring head; its relative
      // position table is the intra encoder's (shared by construction).
      lm_layer_ = std::make_unique<DisentangledLayerT<S>>(DisentangledLayerT<S>::create(
          params_, "lm_head.layer", cfg.intra_layer_config(), rng));
      if (head_ == Head::LmSoftmax) {
        lm_out_bias_ = params_.add_zeros("lm_head.out_bias", {v});
      } else {
        rtd_w_ = params_.add_trunc_normal("rtd_head.w", {d, 1}, rng);
        rtd_b_ = params_.add_zeros("rtd_head.b", {1});
      }
    }
  }

  const HlmConfig& config() const { return cfg_; }
  Head head() const { return head_; }
  ParamStoreT<S>& params() { return params_; }
  const ParamStoreT<S>& params() const { return params_; }
  TensorT<S> char_embedding_table() const { return char_emb_; }
  bool gdes_coupled() const { return gdes_base_.defined(); }

  /// Discriminator path: stop_gradient(E_G) + E_delta. Standalone: E itself.
  TensorT<S> effective_embeddings() const {
    if (!gdes_base_.defined()) return char_emb_;
    return add(stop_gradient(gdes_base_), char_emb_);
  }

  /// E_G + E_delta as raw values, for exporting a standalone checkpoint.
  std::vector<S> materialized_embedding_values() const {
    std::vector<S> out(static_cast<std::size_t>(char_emb_.size()));
    for (Eigen::Index i = 0; i < char_emb_.size(); ++i)
      out[static_cast<std::size_t>(i)] =
          char_emb_.values()[i] + (gdes_base_.defined() ? gdes_base_.values()[i] : S(0));
    return out;
  }

  /// Runs both encoder levels over one window. The intra-word encoder only
  /// ever attends within a word; the inter-word encoder attends across the
  /// whole word sequence.
  WordReps encode(const CharGrid& grid, Rng* dropout_rng = nullptr) const {
    if (grid.words == 0) throw ShapeError("encode: window has no words");
    const Eigen::Index w = grid.words, l = grid.width, d = cfg_.hidden;

    TensorT<S> x = embedding(effective_embeddings(), grid.ids, {w, l});
    x = layer_norm(x, emb_ln_g_, emb_ln_b_);
    if (dropout_rng) x = dropout(x, cfg_.dropout, *dropout_rng);
    for (const auto& layer : intra_layers_) x = layer.forward(x, intra_rel_, grid.pad, dropout_rng);

    WordReps reps;
    reps.char_states = x;
    reps.char_pad = grid.pad;
    reps.intra_cls = reshape(slice(x, 1, 0, 1), {w, d});

    TensorT<S> y = reps.intra_cls;
    for (const auto& layer : inter_layers_) y = layer.forward(y, inter_rel_, {}, dropout_rng);
    reps.inter_ctx = y;
    return reps;
  }

  /// Restored character sequence: position 0 of each word is replaced by the
  /// contextualized word vector, then one shared-table intra layer runs and
  /// the head projects every position.
  TensorT<S> head_states(const WordReps& reps, Rng* dropout_rng = nullptr) const {
    if (!lm_layer_) throw DataError("model was built without a restoring head");
    const Eigen::Index w = reps.intra_cls.dim(0), d = cfg_.hidden;
    const Eigen::Index l = reps.char_states.dim(1);
    TensorT<S> word_vec = reshape(reps.inter_ctx, {w, 1, d});
    TensorT<S> chars = slice(reps.char_states, 1, 1, l - 1);
    TensorT<S> seq = concat<S>({word_vec, chars}, 1);
    return lm_layer_->forward(seq, intra_rel_, reps.char_pad, dropout_rng);
  }

  /// Per-character vocabulary logits [W, L, V] (generator head, tied to the
  /// generator's embedding table).
  TensorT<S> lm_logits(const WordReps& reps, Rng* dropout_rng = nullptr) const {
    if (head_ != Head::LmSoftmax) throw DataError("lm_logits: not a generator-head model");
    TensorT<S> h = head_states(reps, dropout_rng);
    return add(matmul(h, transpose_last2(char_emb_)), lm_out_bias_);
  }

  /// Per-character replaced/original logits [W, L] (discriminator head).
  TensorT<S> rtd_logits(const WordReps& reps, Rng* dropout_rng = nullptr) const {
    if (head_ != Head::RtdSigmoid) throw DataError("rtd_logits: not a discriminator-head model");
    TensorT<S> h = head_states(reps, dropout_rng);
    const Eigen::Index w = h.dim(0), l = h.dim(1);
    return reshape(add(matmul(h, rtd_w_), rtd_b_), {w, l});
  }

  long long parameter_count() const { return params_.total_size(); }

  long long non_embedding_parameter_count() const {
    long long n = 0;
    for (const auto& p : params_.items())
      if (p.name.rfind("embeddings.", 0) != 0) n += p.tensor.size();
    return n;
  }

 private:
  HlmConfig cfg_;
  Head head_;
  ParamStoreT<S> params_;
  TensorT<S> char_emb_, emb_ln_g_, emb_ln_b_;
  TensorT<S> lm_out_bias_, rtd_w_, rtd_b_;
  RelPosEmbeddingT<S> intra_rel_, inter_rel_;
  std::vector<DisentangledLayerT<S>> intra_layers_, inter_layers_;
  std::unique_ptr<DisentangledLayerT<S>> lm_layer_;
  TensorT<S> gdes_base_;
};

using HlmEncoder = HlmEncoderT<double>;

}  // namespace hlm
