#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <functional>
#include <set>
#include <sstream>
#include <string>
#include <utility>
#include <vector>

#include "hlm/charvocab.hpp"
#include "hlm/checkpoint.hpp"
#include "hlm/encoder.hpp"
#include "hlm/ops.hpp"
#include "hlm/optim.hpp"

namespace hlm {

enum class MaskStrategy { WholeWord, Char, CharNgram };

inline MaskStrategy mask_strategy_from_string(const std::string& s) {
  if (s == "whole_word") return MaskStrategy::WholeWord;
  if (s == "char") return MaskStrategy::Char;
  if (s == "char_ngram") return MaskStrategy::CharNgram;
  throw DataError("unknown masking strategy: " + s);
}

/// Positions chosen for masking within one window. Coordinates are
/// (word, char) with char >= 1: WORD_CLS and PAD slots are never maskable.
struct MaskPlan {
  MaskStrategy strategy = MaskStrategy::CharNgram;
  double mask_rate = 0.15;
  std::vector<std::pair<Eigen::Index, Eigen::Index>> positions;
  // n-gram strategy only: span lengths as drawn (before clipping), for
  // distribution checks.
  std::vector<int> sampled_span_lengths;

  bool empty() const { return positions.empty(); }
};

namespace detail {

// All maskable coordinates of a window: real characters, never WORD_CLS/PAD.
inline std::vector<std::pair<Eigen::Index, Eigen::Index>> maskable_positions(const CharGrid& g) {
  std::vector<std::pair<Eigen::Index, Eigen::Index>> out;
  for (Eigen::Index w = 0; w < g.words; ++w)
    for (Eigen::Index c = 1; c < g.width; ++c)
      if (!g.pad[static_cast<std::size_t>(w * g.width + c)]) out.emplace_back(w, c);
  return out;
}

}  // namespace detail

/// Samples a mask plan for one window under the given strategy:
///  whole_word — round(rate*W) words, all their characters;
///  char       — round(rate*C) characters uniformly;
///  char_ngram — spans of length 1..4 (uniform), clipped at word ends,
///               until at least round(rate*C) characters are covered.
/// Counts round half-up with a minimum of one when anything is maskable.
inline MaskPlan plan_masks(const CharGrid& grid, MaskStrategy strategy, Rng& rng,
                           double mask_rate = 0.15) {
  MaskPlan plan;
  plan.strategy = strategy;
  plan.mask_rate = mask_rate;

  const auto maskable = detail::maskable_positions(grid);
  if (maskable.empty()) return plan;

  switch (strategy) {
    case MaskStrategy::WholeWord: {
      const Eigen::Index w_count = grid.words;
      long long pick = std::max<long long>(1, detail::round_half_up(mask_rate * double(w_count)));
      pick = std::min<long long>(pick, w_count);
      std::vector<Eigen::Index> words(static_cast<std::size_t>(w_count));
      for (Eigen::Index i = 0; i < w_count; ++i) words[static_cast<std::size_t>(i)] = i;
      for (long long i = 0; i < pick; ++i) {
        const std::size_t j =
            static_cast<std::size_t>(i) + rng.uniform_int(words.size() - static_cast<std::size_t>(i));
        std::swap(words[static_cast<std::size_t>(i)], words[j]);
      }
      for (long long i = 0; i < pick; ++i) {
        const Eigen::Index w = words[static_cast<std::size_t>(i)];
        for (Eigen::Index c = 1; c < grid.width; ++c)
          if (!grid.pad[static_cast<std::size_t>(w * grid.width + c)]) plan.positions.emplace_back(w, c);
      }
      break;
    }
    case MaskStrategy::Char: {
      const long long c_count = static_cast<long long>(maskable.size());
      long long pick = std::max<long long>(1, detail::round_half_up(mask_rate * double(c_count)));
      pick = std::min(pick, c_count);
      std::vector<std::pair<Eigen::Index, Eigen::Index>> pool = maskable;
      for (long long i = 0; i < pick; ++i) {
        const std::size_t j =
            static_cast<std::size_t>(i) + rng.uniform_int(pool.size() - static_cast<std::size_t>(i));
        std::swap(pool[static_cast<std::size_t>(i)], pool[j]);
        plan.positions.push_back(pool[static_cast<std::size_t>(i)]);
      }
      break;
    }
    case MaskStrategy::CharNgram: {
      const long long c_count = static_cast<long long>(maskable.size());
      const long long target = std::max<long long>(1, detail::round_half_up(mask_rate * double(c_count)));
      std::set<std::pair<Eigen::Index, Eigen::Index>> chosen;
      while (static_cast<long long>(chosen.size()) < target) {
        const int span = 1 + static_cast<int>(rng.uniform_int(4));
        plan.sampled_span_lengths.push_back(span);
        const auto [w, c] = maskable[rng.uniform_int(maskable.size())];
        for (Eigen::Index k = c; k < std::min<Eigen::Index>(grid.width, c + span); ++k) {
          if (!grid.pad[static_cast<std::size_t>(w * grid.width + k)]) chosen.emplace(w, k);
        }
      }
      plan.positions.assign(chosen.begin(), chosen.end());
      break;
    }
  }
  std::sort(plan.positions.begin(), plan.positions.end());
  return plan;
}

/// Input grid with MASK substituted at the planned positions.
inline CharGrid apply_mask(const CharGrid& grid, const MaskPlan& plan) {
  CharGrid masked = grid;
  for (const auto& [w, c] : plan.positions)
    masked.ids[static_cast<std::size_t>(w * grid.width + c)] = CharVocab::kMask;
  return masked;
}

/// Generator-corrupted batch: original ids, ids with generator samples at the
/// masked positions, and per-position replaced labels (1 iff changed; a
/// resampled original keeps label 0).
struct RtdBatch {
  CharGrid original;
  CharGrid corrupted;
  std::vector<std::uint8_t> replaced_labels;  // words * width
};

namespace detail {

template <typename S>
Eigen::Index sample_categorical(const TensorT<S>& logits_row_values, Eigen::Index offset,
                                Eigen::Index v, Rng& rng) {
  // softmax sampling over one row of raw logits (values only)
  double m = -1e300;
  for (Eigen::Index j = 0; j < v; ++j)
    m = std::max(m, double(logits_row_values.values()[offset + j]));
  double z = 0.0;
  for (Eigen::Index j = 0; j < v; ++j)
    z += std::exp(double(logits_row_values.values()[offset + j]) - m);
  double u = rng.uniform() * z;
  for (Eigen::Index j = 0; j < v; ++j) {
    u -= std::exp(double(logits_row_values.values()[offset + j]) - m);
    if (u <= 0.0) return j;
  }
  return v - 1;
}

}  // namespace detail

// ---------------------------------------------------------------------------
// objectives
// ---------------------------------------------------------------------------

/// Sum-reduced MLM cross-entropy over the plan's positions plus the count, so
/// batches can average over all masked positions.
template <typename S>
std::pair<TensorT<S>, long long> mlm_loss_sum(const HlmEncoderT<S>& generator,
                                              const CharGrid& grid, const MaskPlan& plan,
                                              Rng* dropout_rng = nullptr) {
  if (plan.empty()) throw DataError("mlm_loss: empty mask plan");
  const CharGrid masked = apply_mask(grid, plan);
  auto reps = generator.encode(masked, dropout_rng);
  TensorT<S> logits = generator.lm_logits(reps, dropout_rng);  // [W, L, V]
  const Eigen::Index w = grid.words, l = grid.width;

  std::vector<Eigen::Index> targets(static_cast<std::size_t>(w * l), 0);
  std::vector<std::uint8_t> select(static_cast<std::size_t>(w * l), 0);
  for (const auto& [wi, ci] : plan.positions) {
    targets[static_cast<std::size_t>(wi * l + ci)] = grid.ids[static_cast<std::size_t>(wi * l + ci)];
    select[static_cast<std::size_t>(wi * l + ci)] = 1;
  }
  TensorT<S> loss = cross_entropy(reshape(logits, {w * l, Eigen::Index(generator.config().vocab_size)}),
                                  targets, select, Reduction::Sum);
  return {loss, static_cast<long long>(plan.positions.size())};
}

/// Mean MLM loss over masked positions (single window).
template <typename S>
TensorT<S> mlm_loss(const HlmEncoderT<S>& generator, const CharGrid& grid, const MaskPlan& plan,
                    Rng* dropout_rng = nullptr) {
  auto [loss_sum, n] = mlm_loss_sum(generator, grid, plan, dropout_rng);
  return scale(loss_sum, S(1) / S(n));
}

/// Runs the generator on the masked input and samples replacements at masked
/// positions. Sampling is not differentiated through.
template <typename S>
RtdBatch make_rtd_batch(const HlmEncoderT<S>& generator, const CharGrid& grid,
                        const MaskPlan& plan, Rng& rng) {
  const CharGrid masked = apply_mask(grid, plan);
  auto reps = generator.encode(masked, nullptr);
  TensorT<S> logits = generator.lm_logits(reps, nullptr);
  const Eigen::Index l = grid.width;
  const Eigen::Index v = generator.config().vocab_size;

  RtdBatch batch;
  batch.original = grid;
  batch.corrupted = grid;
  batch.replaced_labels.assign(grid.ids.size(), 0);
  for (const auto& [wi, ci] : plan.positions) {
    const Eigen::Index sampled =
        detail::sample_categorical(logits, (wi * l + ci) * v, v, rng);
    batch.corrupted.ids[static_cast<std::size_t>(wi * l + ci)] = sampled;
    if (sampled != grid.ids[static_cast<std::size_t>(wi * l + ci)])
      batch.replaced_labels[static_cast<std::size_t>(wi * l + ci)] = 1;
  }
  return batch;
}

/// Binary replaced/original positions the discriminator is scored on: real
/// character slots (not WORD_CLS, not PAD).
inline std::vector<std::uint8_t> rtd_scored_positions(const CharGrid& grid) {
  std::vector<std::uint8_t> select(grid.ids.size(), 0);
  for (Eigen::Index w = 0; w < grid.words; ++w)
    for (Eigen::Index c = 1; c < grid.width; ++c)
      if (!grid.pad[static_cast<std::size_t>(w * grid.width + c)])
        select[static_cast<std::size_t>(w * grid.width + c)] = 1;
  return select;
}

struct RtdStepStats {
  double gen_loss = 0.0;      // mean over masked positions
  double disc_loss = 0.0;     // mean over scored positions
  double combined = 0.0;      // gen + lambda * disc
  double disc_accuracy = 0.0; // threshold-0.5 accuracy on scored positions
};

/// One combined forward over a batch of windows. Returns the differentiable
/// combined loss (gen MLM + lambda * disc BCE) and scalar statistics.
template <typename S>
std::pair<TensorT<S>, RtdStepStats> rtd_forward(
    const HlmEncoderT<S>& generator, const HlmEncoderT<S>& discriminator,
    const std::vector<const CharGrid*>& batch, const std::vector<MaskPlan>& plans, double lambda,
    Rng& rng, Rng* dropout_rng = nullptr) {
  if (batch.size() != plans.size()) throw DataError("rtd_forward: batch/plan size mismatch");

  std::vector<TensorT<S>> gen_sums, disc_sums;
  long long gen_n = 0, disc_n = 0, correct = 0;
  for (std::size_t i = 0; i < batch.size(); ++i) {
    const CharGrid& grid = *batch[i];
    const MaskPlan& plan = plans[i];
    if (plan.empty()) continue;

    auto [gen_sum, n_masked] = mlm_loss_sum(generator, grid, plan, dropout_rng);
    gen_sums.push_back(gen_sum);
    gen_n += n_masked;

    RtdBatch rtd = make_rtd_batch(generator, grid, plan, rng);
    auto reps = discriminator.encode(rtd.corrupted, dropout_rng);
    TensorT<S> logits = discriminator.rtd_logits(reps, dropout_rng);
    const auto select = rtd_scored_positions(grid);
    disc_sums.push_back(
        binary_cross_entropy_with_logits(logits, rtd.replaced_labels, select, Reduction::Sum));
    for (std::size_t p = 0; p < select.size(); ++p) {
      if (!select[p]) continue;
      ++disc_n;
      const bool predicted = logits.values()[static_cast<Eigen::Index>(p)] > S(0);
      if (predicted == (rtd.replaced_labels[p] != 0)) ++correct;
    }
  }
  if (gen_sums.empty()) throw DataError("rtd_forward: batch has no maskable characters");

  TensorT<S> gen_total = gen_sums[0];
  for (std::size_t i = 1; i < gen_sums.size(); ++i) gen_total = add(gen_total, gen_sums[i]);
  TensorT<S> disc_total = disc_sums[0];
  for (std::size_t i = 1; i < disc_sums.size(); ++i) disc_total = add(disc_total, disc_sums[i]);

  TensorT<S> gen_mean = scale(gen_total, S(1) / S(gen_n));
  TensorT<S> disc_mean = scale(disc_total, S(1) / S(disc_n));
  TensorT<S> combined = add(gen_mean, scale(disc_mean, S(lambda)));

  RtdStepStats stats;
  stats.gen_loss = double(gen_mean.item());
  stats.disc_loss = double(disc_mean.item());
  stats.combined = double(combined.item());
  stats.disc_accuracy = disc_n > 0 ? double(correct) / double(disc_n) : 0.0;
  return {combined, stats};
}

// ---------------------------------------------------------------------------
// pre-training loop
// ---------------------------------------------------------------------------

struct PretrainConfig {
  std::string objective = "rtd";  // rtd | mlm
  int epochs = 30;
  int batch_size = 16;
  double learning_rate = 1e-5;
  std::string schedule = "constant";
  double warmup_proportion = 0.1;
  double mask_rate = 0.15;
  MaskStrategy strategy = MaskStrategy::CharNgram;
  double rtd_lambda = 50.0;
  double weight_decay = 0.01;
  OptKind optimizer = OptKind::Adam;
};

struct PretrainResult {
  long long steps = 0;
  bool aborted_on_nan = false;
  double last_gen_loss = 0.0;
  double last_disc_loss = 0.0;
  double last_disc_accuracy = 0.0;
  std::vector<double> combined_per_step;
};

/// RTD pre-training over encoded windows. Writes one TSV log line per step
/// (step, lr, gen_loss, disc_loss, disc_accuracy) through `log_line`. On a
/// non-finite loss or gradient the last epoch-end parameter snapshot is
/// restored and training stops.
template <typename S>
PretrainResult pretrain_rtd(HlmEncoderT<S>& generator, HlmEncoderT<S>& discriminator,
                            const std::vector<CharGrid>& windows, const PretrainConfig& cfg,
                            Rng& rng, const std::function<void(const std::string&)>& log_line = {},
                            bool use_dropout = false) {
  if (windows.empty()) throw DataError("pretrain: empty corpus");
  const long long steps_per_epoch =
      (static_cast<long long>(windows.size()) + cfg.batch_size - 1) / cfg.batch_size;
  const long long total = cfg.epochs * steps_per_epoch;
  LrSchedule schedule = make_schedule(cfg.schedule, cfg.learning_rate, total,
                                      LrSchedule::proportion_steps(cfg.warmup_proportion, total));

  OptimizerT<S> gen_opt({cfg.optimizer, 0.9, 0.999, 1e-8, cfg.weight_decay}, generator.params());
  OptimizerT<S> disc_opt({cfg.optimizer, 0.9, 0.999, 1e-8, cfg.weight_decay},
                         discriminator.params());

  PretrainResult result;
  auto gen_good = generator.params().snapshot();
  auto disc_good = discriminator.params().snapshot();

  std::vector<std::size_t> order(windows.size());
  for (std::size_t i = 0; i < order.size(); ++i) order[i] = i;

  for (int epoch = 0; epoch < cfg.epochs; ++epoch) {
    for (std::size_t i = order.size(); i > 1; --i)
      std::swap(order[i - 1], order[rng.uniform_int(i)]);

    for (std::size_t start = 0; start < order.size();
         start += static_cast<std::size_t>(cfg.batch_size)) {
      const std::size_t end =
          std::min(order.size(), start + static_cast<std::size_t>(cfg.batch_size));
      std::vector<const CharGrid*> batch;
      std::vector<MaskPlan> plans;
      for (std::size_t i = start; i < end; ++i) {
        batch.push_back(&windows[order[i]]);
        plans.push_back(plan_masks(windows[order[i]], cfg.strategy, rng, cfg.mask_rate));
      }

      generator.params().zero_grads();
      discriminator.params().zero_grads();
      const double lr = schedule.lr(result.steps);
      try {
        auto [loss, stats] = rtd_forward(generator, discriminator, batch, plans, cfg.rtd_lambda,
                                         rng, use_dropout ? &rng : nullptr);
        if (!std::isfinite(stats.combined)) throw NumericalError("non-finite combined loss");
        backward(loss);
        gen_opt.step(generator.params(), lr);
        disc_opt.step(discriminator.params(), lr);
        result.last_gen_loss = stats.gen_loss;
        result.last_disc_loss = stats.disc_loss;
        result.last_disc_accuracy = stats.disc_accuracy;
        result.combined_per_step.push_back(stats.combined);
        if (log_line) {
          std::ostringstream os;
          os << result.steps << '\t' << lr << '\t' << stats.gen_loss << '\t' << stats.disc_loss
             << '\t' << stats.disc_accuracy;
          log_line(os.str());
        }
      } catch (const NumericalError&) {
        generator.params().restore(gen_good);
        discriminator.params().restore(disc_good);
        result.aborted_on_nan = true;
        return result;
      }
      ++result.steps;
    }
    gen_good = generator.params().snapshot();
    disc_good = discriminator.params().snapshot();
  }
  return result;
}

/// MLM-only baseline objective over a single generator-headed model.
template <typename S>
PretrainResult pretrain_mlm(HlmEncoderT<S>& model, const std::vector<CharGrid>& windows,
                            const PretrainConfig& cfg, Rng& rng,
                            const std::function<void(const std::string&)>& log_line = {},
                            bool use_dropout = false) {
  if (windows.empty()) throw DataError("pretrain: empty corpus");
  const long long steps_per_epoch =
      (static_cast<long long>(windows.size()) + cfg.batch_size - 1) / cfg.batch_size;
  const long long total = cfg.epochs * steps_per_epoch;
  LrSchedule schedule = make_schedule(cfg.schedule, cfg.learning_rate, total,
                                      LrSchedule::proportion_steps(cfg.warmup_proportion, total));
  OptimizerT<S> opt({cfg.optimizer, 0.9, 0.999, 1e-8, cfg.weight_decay}, model.params());

  PretrainResult result;
  auto good = model.params().snapshot();
  std::vector<std::size_t> order(windows.size());
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
        std::vector<TensorT<S>> sums;
        long long n = 0;
        for (std::size_t i = start; i < end; ++i) {
          MaskPlan plan = plan_masks(windows[order[i]], cfg.strategy, rng, cfg.mask_rate);
          if (plan.empty()) continue;
          auto [s, k] = mlm_loss_sum(model, windows[order[i]], plan,
                                     use_dropout ? &rng : nullptr);
          sums.push_back(s);
          n += k;
        }
        if (sums.empty()) throw DataError("mlm batch has no maskable characters");
        TensorT<S> total_loss = sums[0];
        for (std::size_t i = 1; i < sums.size(); ++i) total_loss = add(total_loss, sums[i]);
        TensorT<S> loss = scale(total_loss, S(1) / S(n));
        if (!std::isfinite(double(loss.item()))) throw NumericalError("non-finite loss");
        backward(loss);
        opt.step(model.params(), lr);
        result.last_gen_loss = double(loss.item());
        result.combined_per_step.push_back(result.last_gen_loss);
        if (log_line) {
          std::ostringstream os;
          os << result.steps << '\t' << lr << '\t' << result.last_gen_loss << "\t-\t-";
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

/// Discriminator checkpoint with the GDES sum materialized as a plain
/// embedding table (the generator is discarded after pre-training).
template <typename S>
Checkpoint export_discriminator(const HlmEncoderT<S>& discriminator, const std::string& language,
                                const Rng& rng, long long step, const std::string& kind) {
  Checkpoint ckpt;
  ckpt.kind = kind;
  ckpt.language = language;
  ckpt.step = step;
  ckpt.rng_state = rng.state();
  const HlmConfig& c = discriminator.config();
  ckpt.config = {{"intra_layers", c.intra_layers},
                 {"inter_layers", c.inter_layers},
                 {"hidden", c.hidden},
                 {"intra_intermediate", c.intra_intermediate},
                 {"inter_intermediate", c.inter_intermediate},
                 {"heads", c.heads},
                 {"max_word_len", c.max_word_len},
                 {"max_seq_len", c.max_seq_len},
                 {"max_rel_dist_intra", c.max_rel_dist_intra},
                 {"max_rel_dist_inter", c.max_rel_dist_inter},
                 {"vocab_size", c.vocab_size}};
  checkpoint_from_store(ckpt, discriminator.params());
  // overwrite the delta with the effective table
  for (auto& a : ckpt.arrays) {
    if (a.name == "embeddings.char") {
      const auto merged = discriminator.materialized_embedding_values();
      a.data.assign(merged.begin(), merged.end());
    }
  }
  return ckpt;
}

}  // namespace hlm
