#pragma once

// Feature-space contrastive learning: a trainable query projector g_q, a
// momentum key projector g_k (never gradient-updated), and a FIFO memory
// queue of past keys with their pseudo-labels. Warmup uses a MoCo-style
// InfoNCE loss against the queue; afterwards a supervised contrastive loss
// treats same-pseudo-label entries as positives. Weak views feed g_q,
// strong views feed g_k, and keys are pushed after the loss step.

#include <cmath>
#include <deque>
#include <limits>
#include <string>
#include <vector>

#include "milkit/autodiff.hpp"
#include "milkit/common.hpp"
#include "milkit/models.hpp"
#include "milkit/rng.hpp"

namespace milkit {

/// Two-layer MLP d -> e -> e with ReLU, outputs L2-normalised per row.
struct ProjectorParams {
  ad::Parameter w1, b1, w2, b2;

  void init(int dim, int e_dim, Rng& rng) {
    w1 = {"gq_w1", init_weight(e_dim, dim, rng), true};
    b1 = {"gq_b1", Matrix::Zero(1, e_dim), false};
    w2 = {"gq_w2", init_weight(e_dim, e_dim, rng), true};
    b2 = {"gq_b2", Matrix::Zero(1, e_dim), false};
  }

  std::vector<ad::Parameter*> all() { return {&w1, &b1, &w2, &b2}; }
};

/// The key projector: plain tensors, moved only by ema_update_key.
struct KeyProjector {
  Matrix w1, b1, w2, b2;

  static KeyProjector copy_of(const ProjectorParams& q) {
    return {q.w1.value, q.b1.value, q.w2.value, q.b2.value};
  }
};

/// theta_k <- momentum_k * theta_k + (1 - momentum_k) * theta_q.
inline void ema_update_key(KeyProjector& k, const ProjectorParams& q, double momentum_k) {
  if (momentum_k < 0.0 || momentum_k > 1.0)
    throw ValidationError("ema_update_key: momentum_k must be in [0, 1]");
  if (k.w1.rows() != q.w1.value.rows() || k.w1.cols() != q.w1.value.cols())
    throw ValidationError("ema_update_key: shape mismatch");
  k.w1 = momentum_k * k.w1 + (1.0 - momentum_k) * q.w1.value;
  k.b1 = momentum_k * k.b1 + (1.0 - momentum_k) * q.b1.value;
  k.w2 = momentum_k * k.w2 + (1.0 - momentum_k) * q.w2.value;
  k.b2 = momentum_k * k.b2 + (1.0 - momentum_k) * q.b2.value;
}

namespace detail {

inline Matrix l2_normalize_rows_plain(Matrix z, WarningLog* log) {
  for (int r = 0; r < z.rows(); ++r) {
    double n = z.row(r).norm();
    if (n < 1e-12) {
      z.row(r).setZero();
      z(r, 0) = 1.0;
      warn(log, "projection: degenerate zero embedding at row " + std::to_string(r));
    } else {
      z.row(r) /= n;
    }
  }
  return z;
}

}  // namespace detail

/// Key path: plain forward through g_k, no tape.
inline Matrix project_keys(const KeyProjector& k, const Matrix& x, WarningLog* log = nullptr) {
  Matrix h1 = ((x * k.w1.transpose()).rowwise() + k.b1.row(0)).cwiseMax(0.0);
  Matrix z = (h1 * k.w2.transpose()).rowwise() + k.b2.row(0);
  return detail::l2_normalize_rows_plain(std::move(z), log);
}

/// Query path on the tape (gradients flow into g_q).
inline ad::Var project_queries(ad::Tape& t, ProjectorParams& p, ad::Var x, WarningLog* log = nullptr) {
  ad::Var h1 = t.relu(t.add_rowvec(t.matmul(x, t.param(p.w1), false, true), t.param(p.b1)));
  ad::Var z = t.add_rowvec(t.matmul(h1, t.param(p.w2), false, true), t.param(p.b2));
  return t.l2_normalize_rows(z, log);
}

/// FIFO queue of (unit key, pseudo-label); oldest entries evicted beyond
/// capacity. Labels are kUnlabeled during warmup.
class MemoryQueue {
 public:
  explicit MemoryQueue(int capacity = 8192, int e_dim = 0) : capacity_(capacity), e_dim_(e_dim) {
    if (capacity < 1) throw ValidationError("queue: capacity must be >= 1");
  }

  void push(const Matrix& keys, const std::vector<int>& labels) {
    if (keys.rows() != static_cast<int>(labels.size()))
      throw ValidationError("queue: key/label count mismatch");
    for (int r = 0; r < keys.rows(); ++r) {
      if (std::abs(keys.row(r).norm() - 1.0) > 1e-6)
        throw ValidationError("queue: key is not unit-norm");
      if (e_dim_ == 0) e_dim_ = static_cast<int>(keys.cols());
      entries_.emplace_back(keys.row(r).transpose(), labels[static_cast<size_t>(r)]);
    }
    while (static_cast<int>(entries_.size()) > capacity_) entries_.pop_front();
  }

  void clear() { entries_.clear(); }
  int size() const { return static_cast<int>(entries_.size()); }
  int capacity() const { return capacity_; }

  /// Oldest-first key matrix (size x e); 0 x e when empty.
  Matrix keys() const {
    Matrix out(size(), e_dim_);
    for (int r = 0; r < size(); ++r) out.row(r) = entries_[static_cast<size_t>(r)].first.transpose();
    return out;
  }

  std::vector<int> labels() const {
    std::vector<int> out;
    out.reserve(entries_.size());
    for (const auto& e : entries_) out.push_back(e.second);
    return out;
  }

  void restore(const Matrix& keys, const std::vector<int>& labels) {
    clear();
    if (keys.rows() > capacity_) throw ValidationError("queue: restore exceeds capacity");
    push(keys, labels);
  }

 private:
  int capacity_;
  int e_dim_;
  std::deque<std::pair<Vector, int>> entries_;
};

/// MoCo-style InfoNCE for a single query: -log of the positive's share of
/// the softmax over {positive} ∪ queue. Empty queue gives exactly 0.
inline double moco_loss(const Vector& q, const Vector& k_pos, const Matrix& queue_keys, double tau) {
  if (tau <= 0.0) throw ValidationError("moco_loss: tau must be positive");
  double l_pos = q.dot(k_pos) / tau;
  double mx = l_pos;
  const int m = static_cast<int>(queue_keys.rows());
  Vector l_neg(m);
  for (int i = 0; i < m; ++i) {
    l_neg(i) = q.dot(queue_keys.row(i).transpose()) / tau;
    mx = std::max(mx, l_neg(i));
  }
  double se = std::exp(l_pos - mx);
  for (int i = 0; i < m; ++i) se += std::exp(l_neg(i) - mx);
  return mx + std::log(se) - l_pos;
}

/// Supervised contrastive loss over unit vectors; the reference (plain)
/// evaluation of the same formula the tape op differentiates. A(i) is all
/// candidates (minus self_index[i] when given), P(i) its same-label subset;
/// anchors with empty P(i) are skipped; all skipped -> 0 with a warning.
inline double supcon_loss(const Matrix& anchors, const std::vector<int>& anchor_labels,
                          const Matrix& candidates, const std::vector<int>& cand_labels, double tau,
                          const std::vector<int>* self_index = nullptr, WarningLog* log = nullptr) {
  if (tau <= 0.0) throw ValidationError("supcon_loss: tau must be positive");
  const int n = static_cast<int>(anchors.rows());
  const int m = static_cast<int>(candidates.rows());
  double loss = 0.0;
  int valid = 0;
  for (int i = 0; i < n; ++i) {
    int lbl = anchor_labels[static_cast<size_t>(i)];
    if (lbl == ad::kUnlabeled) continue;
    int self = self_index ? (*self_index)[static_cast<size_t>(i)] : -1;
    int pos_count = 0;
    for (int c = 0; c < m; ++c)
      if (c != self && cand_labels[static_cast<size_t>(c)] == lbl) ++pos_count;
    if (pos_count == 0) continue;
    ++valid;
    Vector s(m);
    double mx = -std::numeric_limits<double>::infinity();
    for (int c = 0; c < m; ++c) {
      s(c) = anchors.row(i).dot(candidates.row(c)) / tau;
      if (c != self) mx = std::max(mx, s(c));
    }
    double se = 0.0;
    for (int c = 0; c < m; ++c)
      if (c != self) se += std::exp(s(c) - mx);
    double lse = mx + std::log(se);
    double pos_sum = 0.0;
    for (int c = 0; c < m; ++c)
      if (c != self && cand_labels[static_cast<size_t>(c)] == lbl) pos_sum += s(c);
    loss += lse - pos_sum / pos_count;
  }
  if (valid == 0) {
    warn(log, "supcon_loss: every anchor skipped (no positives); loss defined as 0");
    return 0.0;
  }
  return loss / valid;
}

/// Everything the contrastive branch owns during training.
struct ContrastiveState {
  ProjectorParams gq;
  KeyProjector gk;
  MemoryQueue queue;

  ContrastiveState() : queue(8192) {}

  void init(int dim, int e_dim, int queue_capacity, Rng& rng) {
    gq.init(dim, e_dim, rng);
    gk = KeyProjector::copy_of(gq);
    queue = MemoryQueue(queue_capacity, e_dim);
  }
};

}  // namespace milkit
