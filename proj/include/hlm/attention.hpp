#pragma once

#include <cmath>
#include <cstdint>
#include <string>
#include <utility>
#include <vector>

#include "hlm/ops.hpp"
#include "hlm/optim.hpp"

namespace hlm {

/// Test hook: when `sink` is set, every attention logit matrix allocation
/// reports its (query, key) extents. Used to assert the two-level model never
/// materializes a full character-by-character attention matrix.
struct AttentionShapeLog {
  inline static std::vector<std::pair<Eigen::Index, Eigen::Index>>* sink = nullptr;
  static void record(Eigen::Index q, Eigen::Index k) {
    if (sink) sink->emplace_back(q, k);
  }
};

/// Clipped relative distance index a la DeBERTa: entry (i,j) is
/// clamp(i-j, -max_dist, max_dist-1) + max_dist, in [0, 2*max_dist).
inline std::vector<Eigen::Index> relative_index_matrix(Eigen::Index q_len, Eigen::Index k_len,
                                                       Eigen::Index max_dist) {
  std::vector<Eigen::Index> idx(static_cast<std::size_t>(q_len * k_len));
  for (Eigen::Index i = 0; i < q_len; ++i)
    for (Eigen::Index j = 0; j < k_len; ++j) {
      Eigen::Index d = i - j;
      d = std::max<Eigen::Index>(-max_dist, std::min<Eigen::Index>(max_dist - 1, d));
      idx[static_cast<std::size_t>(i * k_len + j)] = d + max_dist;
    }
  return idx;
}

/// Shared table of relative position embeddings, one row per clipped
/// distance (2*max_distance rows).
template <typename S>
struct RelPosEmbeddingT {
  TensorT<S> table;  // [2*max_distance, hidden]
  Eigen::Index max_distance = 0;
};

struct EncoderLayerConfig {
  Eigen::Index hidden_size = 768;
  Eigen::Index intermediate_size = 3072;
  Eigen::Index attention_heads = 12;
  double dropout = 0.1;
  Eigen::Index max_relative_distance = 512;

  void validate() const {
    if (hidden_size % attention_heads != 0)
      throw ShapeError("hidden size " + std::to_string(hidden_size) +
                       " not divisible by attention heads " + std::to_string(attention_heads));
  }
};

namespace detail {

// [lead..., T, d] -> [lead..., h, T, dh]
template <typename S>
TensorT<S> split_heads(const TensorT<S>& x, Eigen::Index heads) {
  const int r = x.rank();
  const Eigen::Index d = x.dim(-1);
  Shape with_heads(x.shape().begin(), x.shape().end() - 1);
  with_heads.push_back(heads);
  with_heads.push_back(d / heads);
  TensorT<S> y = reshape(x, std::move(with_heads));  // [lead..., T, h, dh]
  std::vector<int> perm(static_cast<std::size_t>(r + 1));
  for (int i = 0; i < r + 1; ++i) perm[static_cast<std::size_t>(i)] = i;
  std::swap(perm[static_cast<std::size_t>(r - 2)], perm[static_cast<std::size_t>(r - 1)]);
  return permute(y, perm);
}

// [lead..., h, T, dh] -> [lead..., T, d]
template <typename S>
TensorT<S> merge_heads(const TensorT<S>& x) {
  const int r = x.rank();
  std::vector<int> perm(static_cast<std::size_t>(r));
  for (int i = 0; i < r; ++i) perm[static_cast<std::size_t>(i)] = i;
  std::swap(perm[static_cast<std::size_t>(r - 3)], perm[static_cast<std::size_t>(r - 2)]);
  TensorT<S> y = permute(x, perm);
  Shape merged(y.shape().begin(), y.shape().end() - 2);
  merged.push_back(y.dim(-2) * y.dim(-1));
  return reshape(y, std::move(merged));
}

// Expands a per-key pad mask [lead..., K] to the full logits extent
// [lead..., h, Q, K].
inline std::vector<std::uint8_t> expand_key_mask(const std::vector<std::uint8_t>& key_mask,
                                                 Eigen::Index lead, Eigen::Index heads,
                                                 Eigen::Index q_len, Eigen::Index k_len) {
  std::vector<std::uint8_t> full(static_cast<std::size_t>(lead * heads * q_len * k_len));
  std::size_t o = 0;
  for (Eigen::Index b = 0; b < lead; ++b)
    for (Eigen::Index h = 0; h < heads; ++h)
      for (Eigen::Index i = 0; i < q_len; ++i)
        for (Eigen::Index j = 0; j < k_len; ++j)
          full[o++] = key_mask[static_cast<std::size_t>(b * k_len + j)];
  return full;
}

}  // namespace detail

/// GELU feed-forward block: W2 * gelu(W1 * x + b1) + b2.
template <typename S>
TensorT<S> ffn_gelu(const TensorT<S>& x, const TensorT<S>& w1, const TensorT<S>& b1,
                    const TensorT<S>& w2, const TensorT<S>& b2) {
  return add(matmul(gelu(add(matmul(x, w1), b1)), w2), b2);
}

/// GEGLU feed-forward block: W_down * (gelu(W_gate * x) ∘ (W_up * x)).
template <typename S>
TensorT<S> ffn_geglu(const TensorT<S>& x, const TensorT<S>& w_gate, const TensorT<S>& w_up,
                     const TensorT<S>& w_down) {
  return matmul(geglu(matmul(x, w_gate), matmul(x, w_up)), w_down);
}

// ---------------------------------------------------------------------------
// DeBERTa-style encoder layer (disentangled attention, post-norm, GELU FFN)
// ---------------------------------------------------------------------------

template <typename S>
struct DisentangledLayerT {
  EncoderLayerConfig cfg;
  TensorT<S> wq, bq, wk, bk, wv, bv, wo, bo;
  TensorT<S> attn_ln_g, attn_ln_b, ffn_ln_g, ffn_ln_b;
  TensorT<S> w1, b1, w2, b2;

  static DisentangledLayerT create(ParamStoreT<S>& ps, const std::string& prefix,
                                   const EncoderLayerConfig& cfg, Rng& rng) {
    cfg.validate();
    const Eigen::Index d = cfg.hidden_size, f = cfg.intermediate_size;
    DisentangledLayerT l;
    l.cfg = cfg;
    l.wq = ps.add_trunc_normal(prefix + ".attn.wq", {d, d}, rng);
    l.bq = ps.add_zeros(prefix + ".attn.bq", {d});
    l.wk = ps.add_trunc_normal(prefix + ".attn.wk", {d, d}, rng);
    l.bk = ps.add_zeros(prefix + ".attn.bk", {d});
    l.wv = ps.add_trunc_normal(prefix + ".attn.wv", {d, d}, rng);
    l.bv = ps.add_zeros(prefix + ".attn.bv", {d});
    l.wo = ps.add_trunc_normal(prefix + ".attn.wo", {d, d}, rng);
    l.bo = ps.add_zeros(prefix + ".attn.bo", {d});
    l.attn_ln_g = ps.add_ones(prefix + ".attn_ln.gain", {d});
    l.attn_ln_b = ps.add_zeros(prefix + ".attn_ln.bias", {d});
    l.w1 = ps.add_trunc_normal(prefix + ".ffn.w1", {d, f}, rng);
    l.b1 = ps.add_zeros(prefix + ".ffn.b1", {f});
    l.w2 = ps.add_trunc_normal(prefix + ".ffn.w2", {f, d}, rng);
    l.b2 = ps.add_zeros(prefix + ".ffn.b2", {d});
    l.ffn_ln_g = ps.add_ones(prefix + ".ffn_ln.gain", {d});
    l.ffn_ln_b = ps.add_zeros(prefix + ".ffn_ln.bias", {d});
    return l;
  }

  /// hidden: [lead..., T, d]; key_pad_mask: flat [lead... * T] bytes (1 = PAD)
  /// or empty. Attention never crosses the leading block boundaries, so the
  /// same layer serves both the per-word and the per-sentence encoder.
  /// `probs_capture` receives the attention weights [lead..., h, T, T].
  TensorT<S> forward(const TensorT<S>& hidden, const RelPosEmbeddingT<S>& relpos,
                     const std::vector<std::uint8_t>& key_pad_mask, Rng* dropout_rng,
                     TensorT<S>* probs_capture = nullptr) const {
    const Eigen::Index t = hidden.dim(-2);
    const Eigen::Index d = hidden.dim(-1);
    const Eigen::Index h = cfg.attention_heads;
    const Eigen::Index dh = d / h;
    if (t == 0) throw ShapeError("attention over an empty sequence");
    const Eigen::Index lead = hidden.size() / (t * d);

    TensorT<S> qh = detail::split_heads(add(matmul(hidden, wq), bq), h);
    TensorT<S> kh = detail::split_heads(add(matmul(hidden, wk), bk), h);
    TensorT<S> vh = detail::split_heads(add(matmul(hidden, wv), bv), h);

    // content->content
    TensorT<S> logits = matmul(qh, transpose_last2(kh));
    AttentionShapeLog::record(t, t);

    // content->position and position->content terms share the content
    // projection weights (no bias, so a zero table contributes nothing).
    const Eigen::Index k_dist = relpos.max_distance;
    const std::vector<Eigen::Index> idx = relative_index_matrix(t, t, k_dist);
    TensorT<S> pos_k = detail::split_heads(matmul(relpos.table, wk), h);  // [h,2k,dh]
    TensorT<S> pos_q = detail::split_heads(matmul(relpos.table, wq), h);

    TensorT<S> c2p = rel_gather(matmul(qh, transpose_last2(pos_k)), idx, t);
    TensorT<S> p2c = transpose_last2(rel_gather(matmul(kh, transpose_last2(pos_q)), idx, t));
    logits = scale(add(logits, add(c2p, p2c)), S(1) / S(std::sqrt(3.0 * double(dh))));

    if (!key_pad_mask.empty()) {
      logits = masked_fill(logits, detail::expand_key_mask(key_pad_mask, lead, h, t, t),
                           S(-1e30));
    }
    TensorT<S> probs = softmax_lastdim(logits);
    if (probs_capture) *probs_capture = probs;
    TensorT<S> ctx = detail::merge_heads(matmul(probs, vh));

    TensorT<S> attn_out = add(matmul(ctx, wo), bo);
    if (dropout_rng) attn_out = dropout(attn_out, cfg.dropout, *dropout_rng);
    TensorT<S> h1 = layer_norm(add(hidden, attn_out), attn_ln_g, attn_ln_b);

    TensorT<S> f = ffn_gelu(h1, w1, b1, w2, b2);
    if (dropout_rng) f = dropout(f, cfg.dropout, *dropout_rng);
    return layer_norm(add(h1, f), ffn_ln_g, ffn_ln_b);
  }
};

// ---------------------------------------------------------------------------
// T5-style attention (bucketed relative position bias, pre-norm, RMSNorm)
// ---------------------------------------------------------------------------

/// T5's logarithmic distance bucketing. Bidirectional attention uses half of
/// the buckets for positive distances; causal attention buckets only to the
/// past. Distance 0 is always bucket 0.
inline Eigen::Index t5_bucket(Eigen::Index relative_position, bool bidirectional,
                              Eigen::Index num_buckets, Eigen::Index max_distance) {
  Eigen::Index bucket = 0;
  Eigen::Index n;
  if (bidirectional) {
    num_buckets /= 2;
    if (relative_position > 0) bucket += num_buckets;
    n = std::abs(relative_position);
  } else {
    n = std::max<Eigen::Index>(-relative_position, 0);
  }
  const Eigen::Index max_exact = num_buckets / 2;
  if (n < max_exact) return bucket + n;
  const double v = double(max_exact) +
                   std::log(double(n) / double(max_exact)) /
                       std::log(double(max_distance) / double(max_exact)) *
                       double(num_buckets - max_exact);
  return bucket + std::min<Eigen::Index>(static_cast<Eigen::Index>(v), num_buckets - 1);
}

/// Bucket ids for every (query, key) pair; rel = j - i as in T5.
inline std::vector<Eigen::Index> t5_bucket_matrix(Eigen::Index q_len, Eigen::Index k_len,
                                                  bool bidirectional, Eigen::Index num_buckets,
                                                  Eigen::Index max_distance) {
  std::vector<Eigen::Index> out(static_cast<std::size_t>(q_len * k_len));
  for (Eigen::Index i = 0; i < q_len; ++i)
    for (Eigen::Index j = 0; j < k_len; ++j)
      out[static_cast<std::size_t>(i * k_len + j)] =
          t5_bucket(j - i, bidirectional, num_buckets, max_distance);
  return out;
}

/// Additive attention bias [heads, q_len, k_len] looked up from a learned
/// per-(bucket, head) table.
template <typename S>
TensorT<S> t5_relative_bias(const TensorT<S>& bucket_table, Eigen::Index q_len,
                            Eigen::Index k_len, bool bidirectional,
                            Eigen::Index max_distance) {
  const Eigen::Index num_buckets = bucket_table.dim(0);
  const auto buckets = t5_bucket_matrix(q_len, k_len, bidirectional, num_buckets, max_distance);
  TensorT<S> bias = embedding(bucket_table, buckets, {q_len, k_len});  // [q,k,h]
  return permute(bias, {2, 0, 1});
}

struct T5LayerConfig {
  Eigen::Index hidden_size = 768;
  Eigen::Index intermediate_size = 2048;
  Eigen::Index attention_heads = 12;
  double dropout = 0.0;
  Eigen::Index num_buckets = 32;
  Eigen::Index max_distance = 128;

  void validate() const {
    if (hidden_size % attention_heads != 0)
      throw ShapeError("hidden size " + std::to_string(hidden_size) +
                       " not divisible by attention heads " + std::to_string(attention_heads));
  }
};

template <typename S>
struct T5AttentionT {
  Eigen::Index heads = 0;
  TensorT<S> wq, wk, wv, wo;  // no biases, T5 convention

  static T5AttentionT create(ParamStoreT<S>& ps, const std::string& prefix,
                             const T5LayerConfig& cfg, Rng& rng) {
    const Eigen::Index d = cfg.hidden_size;
    T5AttentionT a;
    a.heads = cfg.attention_heads;
    a.wq = ps.add_trunc_normal(prefix + ".wq", {d, d}, rng);
    a.wk = ps.add_trunc_normal(prefix + ".wk", {d, d}, rng);
    a.wv = ps.add_trunc_normal(prefix + ".wv", {d, d}, rng);
    a.wo = ps.add_trunc_normal(prefix + ".wo", {d, d}, rng);
    return a;
  }

  /// query: [lead..., Tq, d]; keys/values: [Tk, d] (encoder memory) or the
  /// query itself for self-attention. `bias` is [h, Tq, Tk] or undefined.
  /// `causal` masks j > i. Unscaled logits, the T5 convention.
  TensorT<S> forward(const TensorT<S>& query, const TensorT<S>& key_value,
                     const TensorT<S>& bias, bool causal,
                     TensorT<S>* probs_capture = nullptr) const {
    const Eigen::Index tq = query.dim(-2);
    const Eigen::Index tk = key_value.dim(-2);
    const Eigen::Index d = query.dim(-1);
    if (tq == 0 || tk == 0) throw ShapeError("attention over an empty sequence");
    const Eigen::Index lead = query.size() / (tq * d);

    TensorT<S> qh = detail::split_heads(matmul(query, wq), heads);
    TensorT<S> kh = detail::split_heads(matmul(key_value, wk), heads);
    TensorT<S> vh = detail::split_heads(matmul(key_value, wv), heads);

    TensorT<S> logits = matmul(qh, transpose_last2(kh));  // [lead..,h,Tq,Tk]
    AttentionShapeLog::record(tq, tk);
    if (bias.defined()) logits = add(logits, bias);
    if (causal) {
      std::vector<std::uint8_t> mask(static_cast<std::size_t>(lead * heads * tq * tk));
      std::size_t o = 0;
      for (Eigen::Index b = 0; b < lead * heads; ++b)
        for (Eigen::Index i = 0; i < tq; ++i)
          for (Eigen::Index j = 0; j < tk; ++j) mask[o++] = j > i ? 1 : 0;
      logits = masked_fill(logits, mask, S(-1e30));
    }
    TensorT<S> probs = softmax_lastdim(logits);
    if (probs_capture) *probs_capture = probs;
    return matmul(detail::merge_heads(matmul(probs, vh)), wo);
  }
};

}  // namespace hlm
