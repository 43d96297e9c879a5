#pragma once

#include <algorithm>
#include <cmath>
#include <functional>
#include <map>
#include <string>
#include <utility>
#include <vector>

#include "hlm/attention.hpp"
#include "hlm/charvocab.hpp"
#include "hlm/checkpoint.hpp"
#include "hlm/conllu.hpp"
#include "hlm/metrics.hpp"
#include "hlm/ops.hpp"
#include "hlm/optim.hpp"
#include "hlm/unicode.hpp"

namespace hlm {

/// The character vocabulary extended for sequence-to-sequence training: an
/// end-of-sequence token, a space token for running text, span-corruption
/// sentinels and one token per UPoS tag (plus a fallback for tags outside
/// the UD inventory). Base character ids are unchanged.
class ExtVocab {
 public:
  static const std::vector<std::string>& ud_upos_tags() {
    static const std::vector<std::string> tags = {
        "ADJ", "ADP", "ADV", "AUX", "CCONJ", "DET",  "INTJ", "NOUN", "NUM",
        "PART", "PRON", "PROPN", "PUNCT", "SCONJ", "SYM", "VERB", "X"};
    return tags;
  }

  ExtVocab() = default;
  ExtVocab(CharVocab base, int num_sentinels) : base_(std::move(base)), n_sentinels_(num_sentinels) {
    int next = base_.size();
    eos_id_ = next++;
    if (base_.contains(U' ')) {
      space_id_ = base_.id_of(U' ');
    } else {
      space_id_ = next++;
      space_is_extra_ = true;
    }
    sentinel_first_ = next;
    next += n_sentinels_;
    upos_first_ = next;
    next += static_cast<int>(ud_upos_tags().size()) + 1;  // + fallback
    size_ = next;
  }

  const CharVocab& base() const { return base_; }
  int size() const { return size_; }
  int eos_id() const { return eos_id_; }
  int space_id() const { return space_id_; }
  int num_sentinels() const { return n_sentinels_; }

  int sentinel_id(int k) const {
    if (k < 0 || k >= n_sentinels_) throw DataError("sentinel index out of range");
    return sentinel_first_ + k;
  }

  bool is_sentinel(Eigen::Index id) const {
    return id >= sentinel_first_ && id < sentinel_first_ + n_sentinels_;
  }

  int upos_token_id(const std::string& upos) const {
    const auto& tags = ud_upos_tags();
    for (std::size_t i = 0; i < tags.size(); ++i)
      if (tags[i] == upos) return upos_first_ + static_cast<int>(i);
    return upos_first_ + static_cast<int>(tags.size());  // fallback token
  }

  /// True for ids the decoder may emit as lemma characters.
  bool is_char(Eigen::Index id) const {
    return (id >= CharVocab::kNumSpecials && id < base_.size()) ||
           (space_is_extra_ ? false : id == space_id_);
  }

  std::vector<Eigen::Index> encode_chars(const std::string& text) const {
    std::vector<Eigen::Index> out;
    for (char32_t c : utf8_decode(text)) out.push_back(base_.id_of(c));
    return out;
  }

  std::string decode_chars(const std::vector<Eigen::Index>& ids) const {
    std::vector<char32_t> cps;
    for (Eigen::Index id : ids) {
      if (id == CharVocab::kUnk) {
        cps.push_back(0xFFFD);
      } else if (id >= CharVocab::kNumSpecials && id < base_.size()) {
        cps.push_back(base_.char_of(static_cast<int>(id)));
      }
    }
    return utf8_encode(cps);
  }

 private:
  CharVocab base_;
  int n_sentinels_ = 0;
  int eos_id_ = 0;
  int space_id_ = 0;
  bool space_is_extra_ = false;
  int sentinel_first_ = 0;
  int upos_first_ = 0;
  int size_ = 0;
};

struct Seq2SeqConfig {
  int enc_layers = 12;
  int dec_layers = 12;
  Eigen::Index hidden = 768;
  Eigen::Index intermediate = 2048;
  Eigen::Index heads = 12;
  double dropout = 0.0;
  Eigen::Index num_buckets = 32;
  Eigen::Index max_distance = 128;
  int max_src_len = 512;
  int max_target_len = 30;  // generated tokens, end token included
  int beam_width = 20;
  int num_sentinels = 32;
  int vocab_size = 0;

  T5LayerConfig layer_config() const {
    return {hidden, intermediate, heads, dropout, num_buckets, max_distance};
  }
};

/// Character-level encoder-decoder (t5-v1_1 style: pre-norm RMSNorm, GEGLU
/// feed-forward, no biases, shared input embeddings, untied output head,
/// bucketed relative position bias on the self-attention stacks).
template <typename S>
class Seq2SeqT {
 public:
  Seq2SeqT(const Seq2SeqConfig& cfg, Rng& rng) : cfg_(cfg) {
    if (cfg_.enc_layers != cfg_.dec_layers)
      throw DataError("encoder and decoder layer counts must match");
    if (cfg_.vocab_size <= 0) throw DataError("Seq2Seq: vocab_size not set");
    cfg_.layer_config().validate();
    const Eigen::Index d = cfg_.hidden, v = cfg_.vocab_size, f = cfg_.intermediate;

    embed_ = params_.add_trunc_normal("embeddings.shared", {v, d}, rng);
    enc_bias_ = params_.add_trunc_normal("encoder.rel_bias", {cfg_.num_buckets, cfg_.heads}, rng);
    dec_bias_ = params_.add_trunc_normal("decoder.rel_bias", {cfg_.num_buckets, cfg_.heads}, rng);

    for (int i = 0; i < cfg_.enc_layers; ++i) {
      const std::string p = "encoder.l" + std::to_string(i);
      EncLayer l;
      l.rms1 = params_.add_ones(p + ".rms1", {d});
      l.attn = T5AttentionT<S>::create(params_, p + ".attn", cfg_.layer_config(), rng);
      l.rms2 = params_.add_ones(p + ".rms2", {d});
      l.w_gate = params_.add_trunc_normal(p + ".ffn.w_gate", {d, f}, rng);
      l.w_up = params_.add_trunc_normal(p + ".ffn.w_up", {d, f}, rng);
      l.w_down = params_.add_trunc_normal(p + ".ffn.w_down", {f, d}, rng);
      enc_layers_.push_back(std::move(l));
    }
    enc_final_rms_ = params_.add_ones("encoder.final_rms", {d});

    for (int i = 0; i < cfg_.dec_layers; ++i) {
      const std::string p = "decoder.l" + std::to_string(i);
      DecLayer l;
      l.rms1 = params_.add_ones(p + ".rms1", {d});
      l.self_attn = T5AttentionT<S>::create(params_, p + ".self_attn", cfg_.layer_config(), rng);
      l.rms2 = params_.add_ones(p + ".rms2", {d});
      l.cross_attn = T5AttentionT<S>::create(params_, p + ".cross_attn", cfg_.layer_config(), rng);
      l.rms3 = params_.add_ones(p + ".rms3", {d});
      l.w_gate = params_.add_trunc_normal(p + ".ffn.w_gate", {d, f}, rng);
      l.w_up = params_.add_trunc_normal(p + ".ffn.w_up", {d, f}, rng);
      l.w_down = params_.add_trunc_normal(p + ".ffn.w_down", {f, d}, rng);
      dec_layers_.push_back(std::move(l));
    }
    dec_final_rms_ = params_.add_ones("decoder.final_rms", {d});
    lm_head_ = params_.add_trunc_normal("lm_head.w", {d, v}, rng);
  }

  const Seq2SeqConfig& config() const { return cfg_; }
  ParamStoreT<S>& params() { return params_; }
  const ParamStoreT<S>& params() const { return params_; }

  /// Encoder memory [S, d] for one source sequence.
  TensorT<S> encode(const std::vector<Eigen::Index>& src, Rng* dropout_rng = nullptr) const {
    if (src.empty()) throw ShapeError("seq2seq encode: empty source");
    const Eigen::Index s = static_cast<Eigen::Index>(src.size());
    TensorT<S> x = embedding(embed_, src, {s});
    TensorT<S> bias = t5_relative_bias(enc_bias_, s, s, /*bidirectional=*/true, cfg_.max_distance);
    for (const auto& l : enc_layers_) {
      TensorT<S> normed = rms_norm(x, l.rms1);
      TensorT<S> a = l.attn.forward(normed, normed, bias, false);
      if (dropout_rng) a = dropout(a, cfg_.dropout, *dropout_rng);
      x = add(x, a);
      TensorT<S> f = ffn_geglu(rms_norm(x, l.rms2), l.w_gate, l.w_up, l.w_down);
      if (dropout_rng) f = dropout(f, cfg_.dropout, *dropout_rng);
      x = add(x, f);
    }
    return rms_norm(x, enc_final_rms_);
  }

  /// Teacher-forced decoder logits [B, T, V] over a batch of equal-length
  /// decoder inputs (beam hypotheses share one encoder memory).
  TensorT<S> decode_logits(const TensorT<S>& memory, const std::vector<Eigen::Index>& dec_in,
                           Eigen::Index batch, Rng* dropout_rng = nullptr) const {
    if (dec_in.empty() || batch <= 0) throw ShapeError("seq2seq decode: empty input");
    const Eigen::Index t = static_cast<Eigen::Index>(dec_in.size()) / batch;
    TensorT<S> x = embedding(embed_, dec_in, {batch, t});
    TensorT<S> self_bias =
        t5_relative_bias(dec_bias_, t, t, /*bidirectional=*/false, cfg_.max_distance);
    for (const auto& l : dec_layers_) {
      TensorT<S> normed = rms_norm(x, l.rms1);
      TensorT<S> a = l.self_attn.forward(normed, normed, self_bias, true);
      if (dropout_rng) a = dropout(a, cfg_.dropout, *dropout_rng);
      x = add(x, a);
      TensorT<S> c = l.cross_attn.forward(rms_norm(x, l.rms2), memory, TensorT<S>(), false);
      if (dropout_rng) c = dropout(c, cfg_.dropout, *dropout_rng);
      x = add(x, c);
      TensorT<S> f = ffn_geglu(rms_norm(x, l.rms3), l.w_gate, l.w_up, l.w_down);
      if (dropout_rng) f = dropout(f, cfg_.dropout, *dropout_rng);
      x = add(x, f);
    }
    return matmul(rms_norm(x, dec_final_rms_), lm_head_);
  }

  /// Mean teacher-forced cross-entropy of one (source, target) pair; the
  /// decoder input is the target shifted right behind a PAD start token.
  TensorT<S> example_loss(const std::vector<Eigen::Index>& src,
                          const std::vector<Eigen::Index>& target,
                          Rng* dropout_rng = nullptr) const {
    auto [sum, n] = example_loss_sum(src, target, dropout_rng);
    return scale(sum, S(1) / S(n));
  }

  std::pair<TensorT<S>, long long> example_loss_sum(const std::vector<Eigen::Index>& src,
                                                    const std::vector<Eigen::Index>& target,
                                                    Rng* dropout_rng = nullptr) const {
    if (target.empty()) throw DataError("seq2seq: empty target");
    TensorT<S> memory = encode(src, dropout_rng);
    std::vector<Eigen::Index> dec_in;
    dec_in.push_back(CharVocab::kPad);
    dec_in.insert(dec_in.end(), target.begin(), target.end() - 1);
    TensorT<S> logits = decode_logits(memory, dec_in, 1, dropout_rng);
    TensorT<S> flat = reshape(logits, {static_cast<Eigen::Index>(target.size()),
                                       static_cast<Eigen::Index>(cfg_.vocab_size)});
    return {cross_entropy(flat, target, {}, Reduction::Sum),
            static_cast<long long>(target.size())};
  }

 private:
  struct EncLayer {
    TensorT<S> rms1, rms2, w_gate, w_up, w_down;
    T5AttentionT<S> attn;
  };
  struct DecLayer {
    TensorT<S> rms1, rms2, rms3, w_gate, w_up, w_down;
    T5AttentionT<S> self_attn, cross_attn;
  };

  Seq2SeqConfig cfg_;
  ParamStoreT<S> params_;
  TensorT<S> embed_, enc_bias_, dec_bias_, enc_final_rms_, dec_final_rms_, lm_head_;
  std::vector<EncLayer> enc_layers_;
  std::vector<DecLayer> dec_layers_;
};

using Seq2Seq = Seq2SeqT<double>;

// ---------------------------------------------------------------------------
// span corruption
// ---------------------------------------------------------------------------

struct SpanCorruption {
  std::vector<Eigen::Index> input;   // tokens with sentinels substituted
  std::vector<Eigen::Index> target;  // sentinel_i + span_i ... + EOS
  long long noise_tokens = 0;
  long long num_spans = 0;
};

namespace detail {

// Random composition of n into k positive parts.
inline std::vector<long long> random_composition(long long n, long long k, Rng& rng) {
  std::vector<long long> cuts;  // k-1 distinct values in [1, n-1]
  std::vector<long long> pool(static_cast<std::size_t>(n - 1));
  for (long long i = 0; i < n - 1; ++i) pool[static_cast<std::size_t>(i)] = i + 1;
  for (long long i = 0; i < k - 1; ++i) {
    const std::size_t j =
        static_cast<std::size_t>(i) + rng.uniform_int(pool.size() - static_cast<std::size_t>(i));
    std::swap(pool[static_cast<std::size_t>(i)], pool[j]);
    cuts.push_back(pool[static_cast<std::size_t>(i)]);
  }
  cuts.push_back(0);
  cuts.push_back(n);
  std::sort(cuts.begin(), cuts.end());
  std::vector<long long> parts;
  for (std::size_t i = 1; i < cuts.size(); ++i) parts.push_back(cuts[i] - cuts[i - 1]);
  return parts;
}

}  // namespace detail

/// T5-style denoising pair: ~rate of the tokens are covered by spans of mean
/// length `mean_span`, each span replaced in the input by a unique sentinel;
/// the target lists every sentinel followed by its removed span, then EOS.
inline SpanCorruption span_corrupt(const std::vector<Eigen::Index>& tokens, const ExtVocab& vocab,
                                   Rng& rng, double rate = 0.15, double mean_span = 3.0) {
  const long long n = static_cast<long long>(tokens.size());
  if (n < 2) throw DataError("span_corrupt: sequence shorter than 2 tokens");

  SpanCorruption out;
  long long noise = detail::round_half_up(rate * double(n));
  if (rate <= 0.0 || noise <= 0) {  // degenerate: input unchanged, empty target
    out.input = tokens;
    return out;
  }
  noise = std::min(noise, n - 1);
  long long spans = std::max<long long>(1, detail::round_half_up(double(noise) / mean_span));
  spans = std::min({spans, noise, n - noise, static_cast<long long>(vocab.num_sentinels())});

  const auto noise_parts = detail::random_composition(noise, spans, rng);
  const auto keep_parts = detail::random_composition(n - noise, spans, rng);

  std::size_t pos = 0;
  for (long long s = 0; s < spans; ++s) {
    for (long long i = 0; i < keep_parts[static_cast<std::size_t>(s)]; ++i)
      out.input.push_back(tokens[pos++]);
    const Eigen::Index sentinel = vocab.sentinel_id(static_cast<int>(s));
    out.input.push_back(sentinel);
    out.target.push_back(sentinel);
    for (long long i = 0; i < noise_parts[static_cast<std::size_t>(s)]; ++i)
      out.target.push_back(tokens[pos++]);
  }
  while (pos < tokens.size()) out.input.push_back(tokens[pos++]);
  out.target.push_back(vocab.eos_id());
  out.noise_tokens = noise;
  out.num_spans = spans;
  return out;
}

/// Character stream of one sentence: token forms joined by the space token.
inline std::vector<Eigen::Index> sentence_char_stream(const Sentence& s, const ExtVocab& vocab,
                                                      int max_len) {
  std::vector<Eigen::Index> out;
  for (std::size_t t = 0; t < s.tokens.size(); ++t) {
    if (t > 0) out.push_back(vocab.space_id());
    for (Eigen::Index id : vocab.encode_chars(s.tokens[t].form)) out.push_back(id);
  }
  if (static_cast<int>(out.size()) > max_len) out.resize(static_cast<std::size_t>(max_len));
  return out;
}

// ---------------------------------------------------------------------------
// lemmatization examples
// ---------------------------------------------------------------------------

/// Source: one UPoS tag token, the inflected form's characters, EOS.
/// Target: the lemma's characters (truncated to fit) plus EOS.
struct LemmaExample {
  std::vector<Eigen::Index> source;
  std::vector<Eigen::Index> target;
  std::string gold_lemma;
};

inline LemmaExample make_lemma_example(const std::string& form, const std::string& lemma,
                                       const std::string& upos, const ExtVocab& vocab,
                                       int max_target_len) {
  LemmaExample ex;
  ex.source.push_back(vocab.upos_token_id(upos));
  for (Eigen::Index id : vocab.encode_chars(form)) ex.source.push_back(id);
  ex.source.push_back(vocab.eos_id());
  ex.target = vocab.encode_chars(lemma);
  if (static_cast<int>(ex.target.size()) > max_target_len - 1)
    ex.target.resize(static_cast<std::size_t>(max_target_len - 1));
  ex.target.push_back(vocab.eos_id());
  ex.gold_lemma = lemma;
  return ex;
}

// ---------------------------------------------------------------------------
// beam search
// ---------------------------------------------------------------------------

struct BeamHypothesis {
  std::vector<Eigen::Index> tokens;  // content tokens, end token excluded
  double log_prob = 0.0;
};

/// Length-unnormalized beam search. A hypothesis completes when it emits the
/// end token or reaches max_len generated tokens (the end token counts).
/// Finished expansions compete for the same top-width slots as unfinished
/// ones, so width 1 is exactly greedy decoding and a width covering every
/// sequence is exhaustive. Returns up to `width` completed hypotheses by
/// descending log-probability.
template <typename S>
std::vector<BeamHypothesis> beam_decode(const Seq2SeqT<S>& model,
                                        const std::vector<Eigen::Index>& source,
                                        const std::vector<Eigen::Index>& allowed_tokens,
                                        Eigen::Index end_token, int width, int max_len) {
  if (width < 1) throw DataError("beam_decode: width must be >= 1");
  TensorT<S> memory = model.encode(source, nullptr);

  struct Candidate {
    BeamHypothesis hyp;
    bool finished = false;
  };
  std::vector<BeamHypothesis> active{{{}, 0.0}};
  std::vector<BeamHypothesis> completed;

  auto by_score = [](const BeamHypothesis& a, const BeamHypothesis& b) {
    if (a.log_prob != b.log_prob) return a.log_prob > b.log_prob;
    return a.tokens < b.tokens;  // deterministic tie-break
  };

  for (int t = 0; t < max_len && !active.empty(); ++t) {
    // One batched forward over all active prefixes (equal length t).
    std::vector<Eigen::Index> dec_in;
    for (const auto& hyp : active) {
      dec_in.push_back(CharVocab::kPad);
      dec_in.insert(dec_in.end(), hyp.tokens.begin(), hyp.tokens.end());
    }
    TensorT<S> logits =
        model.decode_logits(memory, dec_in, static_cast<Eigen::Index>(active.size()), nullptr);
    TensorT<S> logp = log_softmax_lastdim(logits);
    const Eigen::Index v = logp.dim(-1);
    const Eigen::Index t_len = logp.dim(-2);

    std::vector<Candidate> pool;
    for (std::size_t h = 0; h < active.size(); ++h) {
      const Eigen::Index row = (static_cast<Eigen::Index>(h) * t_len + (t_len - 1)) * v;
      for (Eigen::Index tok : allowed_tokens) {
        Candidate next{active[h], false};
        next.hyp.log_prob += double(logp.values()[row + tok]);
        if (tok == end_token) {
          next.finished = true;
        } else {
          next.hyp.tokens.push_back(tok);
          next.finished = static_cast<int>(next.hyp.tokens.size()) >= max_len;
        }
        pool.push_back(std::move(next));
      }
    }
    std::sort(pool.begin(), pool.end(),
              [&](const Candidate& a, const Candidate& b) { return by_score(a.hyp, b.hyp); });
    if (static_cast<int>(pool.size()) > width) pool.resize(static_cast<std::size_t>(width));

    active.clear();
    for (auto& c : pool) {
      if (c.finished)
        completed.push_back(std::move(c.hyp));
      else
        active.push_back(std::move(c.hyp));
    }
  }
  std::sort(completed.begin(), completed.end(), by_score);
  if (static_cast<int>(completed.size()) > width)
    completed.resize(static_cast<std::size_t>(width));
  return completed;
}

/// Character ids the lemmatizer is allowed to emit: real characters, UNK and
/// the end token.
inline std::vector<Eigen::Index> lemma_output_tokens(const ExtVocab& vocab) {
  std::vector<Eigen::Index> out;
  out.push_back(CharVocab::kUnk);
  for (int id = CharVocab::kNumSpecials; id < vocab.base().size(); ++id) out.push_back(id);
  out.push_back(vocab.eos_id());
  return out;
}

struct LemmaCandidate {
  std::string lemma;
  double log_prob = 0.0;
};

/// Beam-decodes one (form, UPoS) source and returns up to `top_k` distinct
/// lemma strings by descending score.
template <typename S>
std::vector<LemmaCandidate> lemmatize_token(const Seq2SeqT<S>& model, const ExtVocab& vocab,
                                            const std::string& form, const std::string& upos,
                                            int width, int max_len, int top_k = 3) {
  std::vector<Eigen::Index> src;
  src.push_back(vocab.upos_token_id(upos));
  for (Eigen::Index id : vocab.encode_chars(form)) src.push_back(id);
  src.push_back(vocab.eos_id());

  const auto hyps =
      beam_decode(model, src, lemma_output_tokens(vocab), vocab.eos_id(), width, max_len);
  std::vector<LemmaCandidate> out;
  for (const auto& h : hyps) {
    const std::string text = vocab.decode_chars(h.tokens);
    bool seen = false;
    for (const auto& c : out) seen = seen || c.lemma == text;
    if (!seen) out.push_back({text, h.log_prob});
    if (static_cast<int>(out.size()) >= top_k) break;
  }
  return out;
}

// ---------------------------------------------------------------------------
// training loops
// ---------------------------------------------------------------------------

struct Seq2SeqTrainConfig {
  int epochs = 100;
  int batch_size = 16;
  double learning_rate = 1e-5;
  std::string schedule = "cosine";
  long long warmup_steps = 1000;
  double mask_rate = 0.15;
  double mean_span = 3.0;
  OptKind optimizer = OptKind::AdamWScale;
  double weight_decay = 0.0;
};

struct Seq2SeqTrainResult {
  long long steps = 0;
  bool aborted_on_nan = false;
  double last_loss = 0.0;
};

/// Span-corruption denoising over per-sentence character streams. Sequences
/// shorter than 2 tokens are skipped.
template <typename S>
Seq2SeqTrainResult pretrain_seq2seq(Seq2SeqT<S>& model,
                                    const std::vector<std::vector<Eigen::Index>>& streams,
                                    const ExtVocab& vocab, const Seq2SeqTrainConfig& cfg,
                                    Rng& rng,
                                    const std::function<void(const std::string&)>& log_line = {}) {
  std::vector<const std::vector<Eigen::Index>*> usable;
  for (const auto& s : streams)
    if (s.size() >= 2) usable.push_back(&s);
  if (usable.empty()) throw DataError("pretrain_seq2seq: no usable sequences");

  const long long steps_per_epoch =
      (static_cast<long long>(usable.size()) + cfg.batch_size - 1) / cfg.batch_size;
  const long long total = cfg.epochs * steps_per_epoch;
  LrSchedule schedule = make_schedule(cfg.schedule, cfg.learning_rate, total,
                                      std::min<long long>(cfg.warmup_steps, total));
  OptimizerT<S> opt({cfg.optimizer, 0.9, 0.999, 1e-8, cfg.weight_decay}, model.params());

  Seq2SeqTrainResult result;
  auto good = model.params().snapshot();
  std::vector<std::size_t> order(usable.size());
  for (std::size_t i = 0; i < order.size(); ++i) order[i] = i;

  for (int epoch = 0; epoch < cfg.epochs; ++epoch) {
    for (std::size_t i = order.size(); i > 1; --i)
      std::swap(order[i - 1], order[rng.uniform_int(i)]);
    for (std::size_t start = 0; start < order.size();
         start += static_cast<std::size_t>(cfg.batch_size)) {
      const std::size_t end =
          std::min(order.size(), start + static_cast<std::size_t>(cfg.batch_size));
      model.params().zero_grads();
      const double lr = schedule.lr(result.steps);
      try {
        TensorT<S> total_loss;
        long long n = 0;
        for (std::size_t i = start; i < end; ++i) {
          SpanCorruption sc = span_corrupt(*usable[order[i]], vocab, rng, cfg.mask_rate,
                                           cfg.mean_span);
          if (sc.target.empty()) continue;
          auto [sum, k] = model.example_loss_sum(sc.input, sc.target);
          total_loss = total_loss.defined() ? add(total_loss, sum) : sum;
          n += k;
        }
        if (!total_loss.defined()) continue;
        TensorT<S> loss = scale(total_loss, S(1) / S(n));
        if (!std::isfinite(double(loss.item()))) throw NumericalError("non-finite loss");
        backward(loss);
        opt.step(model.params(), lr);
        result.last_loss = double(loss.item());
        if (log_line) {
          std::ostringstream os;
          os << result.steps << '\t' << lr << '\t' << result.last_loss << "\t-\t-";
          log_line(os.str());
        }
      } catch (const NumericalError&) {
        model.params().restore(good);
        result.aborted_on_nan = true;
        return result;
      }
      ++result.steps;
    }
    good = model.params().snapshot();
  }
  return result;
}

struct LemmaFinetuneConfig {
  double learning_rate = 1e-3;
  double weight_decay = 0.01;
  int batch_size = 16;
  int patience = 10;
  int max_epochs = 100;
  int validation_beam_width = 20;
};

struct LemmaFinetuneResult {
  int epochs_run = 0;
  int best_epoch = -1;
  double best_score = -1.0;
  std::vector<double> validation_curve;
};

/// Official lemma score ((acc@1 + acc@3)/2) of the model on gold pairs.
template <typename S>
double lemma_validation_score(const Seq2SeqT<S>& model, const ExtVocab& vocab,
                              const std::vector<LemmaExample>& pairs, int width, int max_len) {
  std::vector<std::vector<std::string>> topk;
  std::vector<std::string> gold;
  for (const auto& ex : pairs) {
    // ex.source already holds [upos] + form + EOS
    const auto hyps = beam_decode(model, ex.source, lemma_output_tokens(vocab), vocab.eos_id(),
                                  width, max_len);
    std::vector<std::string> cands;
    for (const auto& h : hyps) {
      const std::string text = vocab.decode_chars(h.tokens);
      bool seen = false;
      for (const auto& c : cands) seen = seen || c == text;
      if (!seen) cands.push_back(text);
      if (cands.size() >= 3) break;
    }
    topk.push_back(std::move(cands));
    gold.push_back(ex.gold_lemma);
  }
  return lemma_score(topk, gold).score;
}

/// Teacher-forced fine-tuning on (form+UPoS -> lemma) pairs with early
/// stopping on the validation lemma score (patience in epochs).
template <typename S>
LemmaFinetuneResult finetune_lemma(Seq2SeqT<S>& model, const ExtVocab& vocab,
                                   const std::vector<LemmaExample>& train,
                                   const std::vector<LemmaExample>& valid,
                                   const LemmaFinetuneConfig& cfg, Rng& rng) {
  if (train.empty()) throw DataError("finetune_lemma: no training pairs");
  const long long steps_per_epoch =
      (static_cast<long long>(train.size()) + cfg.batch_size - 1) / cfg.batch_size;
  LrSchedule schedule =
      LrSchedule::linear(cfg.learning_rate, cfg.max_epochs * steps_per_epoch, 0);
  OptimizerT<S> opt({OptKind::AdamW, 0.9, 0.999, 1e-8, cfg.weight_decay}, model.params());

  LemmaFinetuneResult result;
  auto best = model.params().snapshot();
  EarlyStopping stopper(cfg.patience);
  long long step = 0;
  std::vector<std::size_t> order(train.size());
  for (std::size_t i = 0; i < order.size(); ++i) order[i] = i;

  for (int epoch = 0; epoch < cfg.max_epochs; ++epoch) {
    for (std::size_t i = order.size(); i > 1; --i)
      std::swap(order[i - 1], order[rng.uniform_int(i)]);
    for (std::size_t start = 0; start < order.size();
         start += static_cast<std::size_t>(cfg.batch_size)) {
      const std::size_t end =
          std::min(order.size(), start + static_cast<std::size_t>(cfg.batch_size));
      model.params().zero_grads();
      TensorT<S> total_loss;
      long long n = 0;
      for (std::size_t i = start; i < end; ++i) {
        auto [sum, k] = model.example_loss_sum(train[order[i]].source, train[order[i]].target);
        total_loss = total_loss.defined() ? add(total_loss, sum) : sum;
        n += k;
      }
      TensorT<S> loss = scale(total_loss, S(1) / S(n));
      backward(loss);
      opt.step(model.params(), schedule.lr(step++));
    }

    const double score = lemma_validation_score(model, vocab, valid, cfg.validation_beam_width,
                                                model.config().max_target_len);
    result.validation_curve.push_back(score);
    ++result.epochs_run;
    const bool stop = stopper.observe(score);
    if (stopper.improved_last()) best = model.params().snapshot();
    if (stop) break;
  }
  result.best_epoch = stopper.best_epoch();
  result.best_score = stopper.best_score();
  model.params().restore(best);
  return result;
}

}  // namespace hlm
