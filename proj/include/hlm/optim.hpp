#pragma once

#include <algorithm>
#include <cmath>
#include <limits>
#include <string>
#include <unordered_map>
#include <vector>

#include "hlm/ops.hpp"
#include "hlm/rng.hpp"
#include "hlm/tensor.hpp"

namespace hlm {

namespace detail {
inline long long round_half_up(double x) { return static_cast<long long>(std::floor(x + 0.5)); }
}  // namespace detail

/// Named trainable tensor. Names are hierarchical paths ("inter.l3.attn.wq")
/// and must be unique within a store.
template <typename Scalar>
struct ParameterT {
  std::string name;
  TensorT<Scalar> tensor;
};

/// Ordered registry of a model's parameters. Registration order is the
/// checkpoint and optimizer-state order, so it must be deterministic.
template <typename Scalar>
class ParamStoreT {
 public:
  using Tensor = TensorT<Scalar>;

  Tensor add(const std::string& name, Tensor t) {
    if (index_.count(name)) throw DataError("duplicate parameter name: " + name);
    t.set_requires_grad(true);
    index_[name] = items_.size();
    items_.push_back({name, t});
    return t;
  }

  Tensor add_trunc_normal(const std::string& name, Shape shape, Rng& rng,
                          double stddev = 0.02) {
    Tensor t = Tensor::raw(std::move(shape));
    for (Eigen::Index i = 0; i < t.size(); ++i)
      t.values()[i] = Scalar(rng.truncated_normal(stddev));
    return add(name, t);
  }

  Tensor add_zeros(const std::string& name, Shape shape) {
    return add(name, Tensor::zeros(std::move(shape)));
  }

  Tensor add_ones(const std::string& name, Shape shape) {
    return add(name, Tensor::full(std::move(shape), Scalar(1)));
  }

  bool has(const std::string& name) const { return index_.count(name) > 0; }

  Tensor get(const std::string& name) const {
    auto it = index_.find(name);
    if (it == index_.end()) throw DataError("unknown parameter: " + name);
    return items_[it->second].tensor;
  }

  std::size_t count() const { return items_.size(); }
  const std::vector<ParameterT<Scalar>>& items() const { return items_; }
  std::vector<ParameterT<Scalar>>& items() { return items_; }

  void zero_grads() {
    for (auto& p : items_) p.tensor.zero_grad();
  }

  /// Total trainable scalar count.
  long long total_size() const {
    long long n = 0;
    for (const auto& p : items_) n += p.tensor.size();
    return n;
  }

  /// Snapshot of raw values, for best-epoch restore.
  std::vector<std::vector<Scalar>> snapshot() const {
    std::vector<std::vector<Scalar>> out;
    out.reserve(items_.size());
    for (const auto& p : items_)
      out.emplace_back(p.tensor.data(), p.tensor.data() + p.tensor.size());
    return out;
  }

  void restore(const std::vector<std::vector<Scalar>>& snap) {
    if (snap.size() != items_.size()) throw DataError("snapshot/store size mismatch");
    for (std::size_t i = 0; i < snap.size(); ++i) {
      auto& t = items_[i].tensor;
      if (static_cast<Eigen::Index>(snap[i].size()) != t.size())
        throw DataError("snapshot shape mismatch at " + items_[i].name);
      std::copy(snap[i].begin(), snap[i].end(), t.data());
    }
  }

 private:
  std::vector<ParameterT<Scalar>> items_;
  std::unordered_map<std::string, std::size_t> index_;
};

// ---------------------------------------------------------------------------
// learning-rate schedules
// ---------------------------------------------------------------------------

/// Warmup is linear from 0 to base_lr over `warmup_steps`; afterwards the
/// kind decides: constant, linear decay to 0 at total_steps, or cosine decay.
struct LrSchedule {
  enum class Kind { Constant, Linear, Cosine };

  Kind kind = Kind::Constant;
  double base_lr = 0.0;
  long long total_steps = 0;
  long long warmup_steps = 0;

  static LrSchedule constant(double base, long long total, long long warmup = 0) {
    return {Kind::Constant, base, total, warmup};
  }
  static LrSchedule linear(double base, long long total, long long warmup = 0) {
    return {Kind::Linear, base, total, warmup};
  }
  static LrSchedule cosine(double base, long long total, long long warmup = 0) {
    return {Kind::Cosine, base, total, warmup};
  }

  /// Warmup expressed as a proportion of total optimizer steps.
  static long long proportion_steps(double proportion, long long total) {
    return static_cast<long long>(std::llround(proportion * static_cast<double>(total)));
  }

  double lr(long long step) const {
    if (warmup_steps > 0 && step < warmup_steps)
      return base_lr * static_cast<double>(step) / static_cast<double>(warmup_steps);
    switch (kind) {
      case Kind::Constant:
        return base_lr;
      case Kind::Linear: {
        if (step >= total_steps) return 0.0;
        const double denom = static_cast<double>(std::max<long long>(1, total_steps - warmup_steps));
        return base_lr * static_cast<double>(total_steps - step) / denom;
      }
      case Kind::Cosine: {
        if (step >= total_steps) return 0.0;
        const double t = static_cast<double>(step - warmup_steps) /
                         static_cast<double>(std::max<long long>(1, total_steps - warmup_steps));
        return base_lr * 0.5 * (1.0 + std::cos(M_PI * t));
      }
    }
    return base_lr;
  }
};

inline LrSchedule make_schedule(const std::string& kind, double base, long long total,
                                long long warmup) {
  if (kind == "constant") return LrSchedule::constant(base, total, warmup);
  if (kind == "linear") return LrSchedule::linear(base, total, warmup);
  if (kind == "cosine") return LrSchedule::cosine(base, total, warmup);
  throw DataError("unknown schedule: " + kind);
}

/// Patience-based early stopping on a validation score: stop after
/// `patience` consecutive epochs without strict improvement; the caller
/// restores the best-epoch parameters afterwards.
class EarlyStopping {
 public:
  explicit EarlyStopping(int patience) : patience_(patience) {}

  /// Records one epoch's score; returns true when training should stop.
  bool observe(double score) {
    ++epoch_;
    if (score > best_score_) {
      best_score_ = score;
      best_epoch_ = epoch_;
      stale_ = 0;
      return false;
    }
    return ++stale_ >= patience_;
  }

  bool improved_last() const { return stale_ == 0; }
  int best_epoch() const { return best_epoch_; }
  double best_score() const { return best_score_; }

 private:
  int patience_;
  int epoch_ = -1;
  int stale_ = 0;
  int best_epoch_ = -1;
  double best_score_ = -std::numeric_limits<double>::infinity();
};

// ---------------------------------------------------------------------------
// optimizers
// ---------------------------------------------------------------------------

enum class OptKind {
  Adam,        // weight decay folded into the gradient (classic L2)
  AdamW,       // decoupled weight decay
  AdamWScale,  // AdamW with the update scaled by the parameter RMS
};

inline OptKind opt_kind_from_string(const std::string& s) {
  if (s == "adam") return OptKind::Adam;
  if (s == "adamw") return OptKind::AdamW;
  if (s == "adamwscale") return OptKind::AdamWScale;
  throw DataError("unknown optimizer: " + s);
}

struct OptimizerConfig {
  OptKind kind = OptKind::Adam;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;
  double weight_decay = 0.0;
};

/// Adam-family optimizer over one ParamStore. Moment buffers are keyed by
/// registration order; the step counter drives bias correction.
template <typename Scalar>
class OptimizerT {
 public:
  using Store = ParamStoreT<Scalar>;

  OptimizerT(OptimizerConfig cfg, const Store& store) : cfg_(cfg) {
    m_.reserve(store.count());
    v_.reserve(store.count());
    for (const auto& p : store.items()) {
      m_.emplace_back(detail::Arr<Scalar>::Zero(p.tensor.size()));
      v_.emplace_back(detail::Arr<Scalar>::Zero(p.tensor.size()));
    }
  }

  long long step_count() const { return step_; }

  /// One update over every parameter that has a grad buffer. Throws
  /// NumericalError naming the parameter on NaN/Inf gradients.
  void step(Store& store, double lr) {
    ++step_;
    const Scalar b1 = Scalar(cfg_.beta1), b2 = Scalar(cfg_.beta2);
    const Scalar bc1 = Scalar(1) - Scalar(std::pow(cfg_.beta1, double(step_)));
    const Scalar bc2 = Scalar(1) - Scalar(std::pow(cfg_.beta2, double(step_)));
    for (std::size_t i = 0; i < store.count(); ++i) {
      auto& p = store.items()[i];
      if (!p.tensor.has_grad()) continue;
      auto& grad = p.tensor.grad();
      if (!grad.isFinite().all())
        throw NumericalError("non-finite gradient in parameter " + p.name);

      detail::Arr<Scalar> g = grad;
      if (cfg_.kind == OptKind::Adam && cfg_.weight_decay != 0.0)
        g += Scalar(cfg_.weight_decay) * p.tensor.values();

      m_[i] = b1 * m_[i] + (Scalar(1) - b1) * g;
      v_[i] = b2 * v_[i] + (Scalar(1) - b2) * g.square();
      detail::Arr<Scalar> update = (m_[i] / bc1) / ((v_[i] / bc2).sqrt() + Scalar(cfg_.eps));

      Scalar step_size = Scalar(lr);
      if (cfg_.kind == OptKind::AdamWScale) {
        // nanoT5 variant: the update is scaled by the parameter RMS (floored),
        // and decay is applied after the update with the unscaled lr.
        const Scalar rms = Scalar(std::sqrt(double(p.tensor.values().square().mean())));
        step_size *= std::max(Scalar(1e-3), rms);
      } else if (cfg_.kind == OptKind::AdamW && cfg_.weight_decay != 0.0) {
        p.tensor.values() *= Scalar(1) - Scalar(lr * cfg_.weight_decay);
      }
      p.tensor.values() -= step_size * update;
      if (cfg_.kind == OptKind::AdamWScale && cfg_.weight_decay != 0.0)
        p.tensor.values() -= Scalar(lr * cfg_.weight_decay) * p.tensor.values();
    }
  }

 private:
  OptimizerConfig cfg_;
  long long step_ = 0;
  std::vector<detail::Arr<Scalar>> m_, v_;
};

using ParamStore = ParamStoreT<double>;
using Optimizer = OptimizerT<double>;

}  // namespace hlm
