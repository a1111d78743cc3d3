#pragma once

#include <cmath>
#include <functional>
#include <limits>
#include <string>
#include <utility>
#include <vector>

#include "milkit/common.hpp"

namespace milkit::ad {

/// A trainable tensor. Lives outside any tape; backward() accumulates into
/// grad. `decay` marks participation in decoupled weight decay (weights yes,
/// biases no).
struct Parameter {
  std::string name;
  Matrix value;
  Matrix grad;
  bool decay = true;

  Parameter() = default;
  Parameter(std::string n, Matrix v, bool d = true)
      : name(std::move(n)), value(std::move(v)), grad(Matrix::Zero(value.rows(), value.cols())), decay(d) {}

  void zero_grad() { grad.setZero(); }
};

constexpr int kUnlabeled = -1;

/// Reverse-mode tape over dense matrices. One tape per bag step: build the
/// graph forward, call backward() on a scalar root, read parameter grads.
/// Ops only reference earlier nodes, so creation order is topological.
class Tape {
 public:
  struct Var {
    int id = -1;
    bool ok() const { return id >= 0; }
  };

  const Matrix& val(Var v) const { return nodes_[v.id].value; }
  const Matrix& grad_of(Var v) const { return nodes_[v.id].grad; }

  /// Constant leaf; no gradient flows into it.
  Var input(Matrix v) { return push(std::move(v), false, nullptr); }

  /// Differentiable leaf bound to an external parameter.
  Var param(Parameter& p) {
    Var v = push(p.value, true, nullptr);
    bound_.push_back({v.id, &p});
    return v;
  }

  Var matmul(Var a, Var b, bool trans_a = false, bool trans_b = false) {
    const Matrix& A = nodes_[a.id].value;
    const Matrix& B = nodes_[b.id].value;
    Matrix out;
    if (!trans_a && !trans_b)
      out.noalias() = A * B;
    else if (trans_a && !trans_b)
      out.noalias() = A.transpose() * B;
    else if (!trans_a && trans_b)
      out.noalias() = A * B.transpose();
    else
      out.noalias() = A.transpose() * B.transpose();
    return make(std::move(out), {a, b}, [=, this](const Matrix& g) {
      const Matrix& Av = nodes_[a.id].value;
      const Matrix& Bv = nodes_[b.id].value;
      if (needs(a)) {
        if (!trans_a && !trans_b)
          nodes_[a.id].grad.noalias() += g * Bv.transpose();
        else if (trans_a && !trans_b)
          nodes_[a.id].grad.noalias() += Bv * g.transpose();
        else if (!trans_a && trans_b)
          nodes_[a.id].grad.noalias() += g * Bv;
        else
          nodes_[a.id].grad.noalias() += Bv.transpose() * g.transpose();
      }
      if (needs(b)) {
        if (!trans_a && !trans_b)
          nodes_[b.id].grad.noalias() += Av.transpose() * g;
        else if (trans_a && !trans_b)
          nodes_[b.id].grad.noalias() += Av * g;
        else if (!trans_a && trans_b)
          nodes_[b.id].grad.noalias() += g.transpose() * Av;
        else
          nodes_[b.id].grad.noalias() += g.transpose() * Av.transpose();
      }
    });
  }

  Var add(Var a, Var b) {
    return make(nodes_[a.id].value + nodes_[b.id].value, {a, b}, [=, this](const Matrix& g) {
      if (needs(a)) nodes_[a.id].grad += g;
      if (needs(b)) nodes_[b.id].grad += g;
    });
  }

  Var sub(Var a, Var b) {
    return make(nodes_[a.id].value - nodes_[b.id].value, {a, b}, [=, this](const Matrix& g) {
      if (needs(a)) nodes_[a.id].grad += g;
      if (needs(b)) nodes_[b.id].grad -= g;
    });
  }

  /// a (N x n) + bias (1 x n) broadcast over rows.
  Var add_rowvec(Var a, Var bias) {
    Matrix out = nodes_[a.id].value;
    out.rowwise() += nodes_[bias.id].value.row(0);
    return make(std::move(out), {a, bias}, [=, this](const Matrix& g) {
      if (needs(a)) nodes_[a.id].grad += g;
      if (needs(bias)) nodes_[bias.id].grad += g.colwise().sum();
    });
  }

  Var scale(Var a, double s) {
    return make(nodes_[a.id].value * s, {a}, [=, this](const Matrix& g) {
      if (needs(a)) nodes_[a.id].grad += g * s;
    });
  }

  Var cmul(Var a, Var b) {
    return make(nodes_[a.id].value.cwiseProduct(nodes_[b.id].value), {a, b}, [=, this](const Matrix& g) {
      if (needs(a)) nodes_[a.id].grad += g.cwiseProduct(nodes_[b.id].value);
      if (needs(b)) nodes_[b.id].grad += g.cwiseProduct(nodes_[a.id].value);
    });
  }

  Var tanh_op(Var a) {
    Matrix out = nodes_[a.id].value.array().tanh().matrix();
    Var r = make(std::move(out), {a}, nullptr);
    nodes_[r.id].back = [=, this](const Matrix& g) {
      if (needs(a)) {
        const Matrix& y = nodes_[r.id].value;
        nodes_[a.id].grad.array() += g.array() * (1.0 - y.array().square());
      }
    };
    return r;
  }

  Var sigmoid_op(Var a) {
    Matrix out = (1.0 / (1.0 + (-nodes_[a.id].value.array()).exp())).matrix();
    Var r = make(std::move(out), {a}, nullptr);
    nodes_[r.id].back = [=, this](const Matrix& g) {
      if (needs(a)) {
        const Matrix& y = nodes_[r.id].value;
        nodes_[a.id].grad.array() += g.array() * y.array() * (1.0 - y.array());
      }
    };
    return r;
  }

  Var relu(Var a) {
    Matrix out = nodes_[a.id].value.cwiseMax(0.0);
    return make(std::move(out), {a}, [=, this](const Matrix& g) {
      if (needs(a)) nodes_[a.id].grad.array() += g.array() * (nodes_[a.id].value.array() > 0.0).cast<double>();
    });
  }

  Var transpose(Var a) {
    return make(nodes_[a.id].value.transpose(), {a}, [=, this](const Matrix& g) {
      if (needs(a)) nodes_[a.id].grad += g.transpose();
    });
  }

  Var row(Var a, int i) {
    return make(nodes_[a.id].value.row(i), {a}, [=, this](const Matrix& g) {
      if (needs(a)) nodes_[a.id].grad.row(i) += g.row(0);
    });
  }

  Var col(Var a, int j) {
    return make(nodes_[a.id].value.col(j), {a}, [=, this](const Matrix& g) {
      if (needs(a)) nodes_[a.id].grad.col(j) += g.col(0);
    });
  }

  Var rows(Var a, std::vector<int> idx) {
    Matrix out(static_cast<int>(idx.size()), nodes_[a.id].value.cols());
    for (int r = 0; r < out.rows(); ++r) out.row(r) = nodes_[a.id].value.row(idx[r]);
    return make(std::move(out), {a}, [=, this, idx = std::move(idx)](const Matrix& g) {
      if (needs(a))
        for (int r = 0; r < g.rows(); ++r) nodes_[a.id].grad.row(idx[r]) += g.row(r);
    });
  }

  /// Stack 1 x n rows into a k x n matrix.
  Var concat_rows(const std::vector<Var>& parts) {
    int n = static_cast<int>(nodes_[parts[0].id].value.cols());
    Matrix out(static_cast<int>(parts.size()), n);
    for (size_t r = 0; r < parts.size(); ++r) out.row(static_cast<int>(r)) = nodes_[parts[r].id].value.row(0);
    return make(std::move(out), parts, [=, this](const Matrix& g) {
      for (size_t r = 0; r < parts.size(); ++r)
        if (needs(parts[r])) nodes_[parts[r].id].grad.row(0) += g.row(static_cast<int>(r));
    });
  }

  /// Row-by-row dot product of two same-shape matrices -> k x 1.
  Var rowwise_dot(Var a, Var b) {
    Matrix out = nodes_[a.id].value.cwiseProduct(nodes_[b.id].value).rowwise().sum();
    return make(std::move(out), {a, b}, [=, this](const Matrix& g) {
      if (needs(a)) nodes_[a.id].grad += g.col(0).asDiagonal() * nodes_[b.id].value;
      if (needs(b)) nodes_[b.id].grad += g.col(0).asDiagonal() * nodes_[a.id].value;
    });
  }

  /// Softmax over an N x 1 column of scores.
  Var softmax_col(Var a) {
    const Matrix& x = nodes_[a.id].value;
    double mx = x.maxCoeff();
    Matrix e = (x.array() - mx).exp().matrix();
    Matrix out = e / e.sum();
    Var r = make(std::move(out), {a}, nullptr);
    nodes_[r.id].back = [=, this](const Matrix& g) {
      if (needs(a)) {
        const Matrix& y = nodes_[r.id].value;
        double dot = (y.array() * g.array()).sum();
        nodes_[a.id].grad.array() += y.array() * (g.array() - dot);
      }
    };
    return r;
  }

  /// L2-normalise each row onto the unit sphere. A row whose norm is ~0 maps
  /// to the first unit basis vector, carries no gradient, and is logged.
  Var l2_normalize_rows(Var a, WarningLog* log = nullptr) {
    const Matrix& x = nodes_[a.id].value;
    Matrix out(x.rows(), x.cols());
    std::vector<double> norms(static_cast<size_t>(x.rows()));
    for (int r = 0; r < x.rows(); ++r) {
      double n = x.row(r).norm();
      norms[static_cast<size_t>(r)] = n;
      if (n < kDegenerateNorm) {
        out.row(r).setZero();
        out(r, 0) = 1.0;
        warn(log, "l2_normalize_rows: degenerate zero vector at row " + std::to_string(r));
      } else {
        out.row(r) = x.row(r) / n;
      }
    }
    Var r = make(std::move(out), {a}, nullptr);
    nodes_[r.id].back = [=, this, norms = std::move(norms)](const Matrix& g) {
      if (!needs(a)) return;
      const Matrix& y = nodes_[r.id].value;
      for (int i = 0; i < g.rows(); ++i) {
        double n = norms[static_cast<size_t>(i)];
        if (n < kDegenerateNorm) continue;
        double d = y.row(i).dot(g.row(i));
        nodes_[a.id].grad.row(i) += (g.row(i) - d * y.row(i)) / n;
      }
    };
    return r;
  }

  /// Mean cross-entropy of logit rows against integer targets.
  Var cross_entropy_mean(Var logits, const std::vector<int>& targets) {
    const Matrix& x = nodes_[logits.id].value;
    int m = static_cast<int>(x.rows());
    Matrix probs(x.rows(), x.cols());
    double loss = 0.0;
    for (int r = 0; r < m; ++r) {
      double mx = x.row(r).maxCoeff();
      Eigen::ArrayXd e = (x.row(r).array() - mx).exp();
      double se = e.sum();
      probs.row(r) = (e / se).matrix();
      loss += mx + std::log(se) - x(r, targets[static_cast<size_t>(r)]);
    }
    loss /= m;
    Var out = make(scalar(loss), {logits}, nullptr);
    nodes_[out.id].back = [=, this, probs = std::move(probs)](const Matrix& g) {
      if (!needs(logits)) return;
      double go = g(0, 0) / m;
      Matrix d = probs;
      for (int r = 0; r < m; ++r) d(r, targets[static_cast<size_t>(r)]) -= 1.0;
      nodes_[logits.id].grad += go * d;
    };
    return out;
  }

  /// Mean over rows of KL(soft_row || softmax(logit_row)), with 0*log0 = 0.
  Var kl_to_soft_mean(Var logits, const Matrix& soft) {
    const Matrix& x = nodes_[logits.id].value;
    int m = static_cast<int>(x.rows());
    Matrix probs(x.rows(), x.cols());
    double loss = 0.0;
    for (int r = 0; r < m; ++r) {
      double mx = x.row(r).maxCoeff();
      Eigen::ArrayXd e = (x.row(r).array() - mx).exp();
      double lse = mx + std::log(e.sum());
      probs.row(r) = (e / e.sum()).matrix();
      for (int c = 0; c < x.cols(); ++c) {
        double s = soft(r, c);
        if (s > 0.0) loss += s * (std::log(s) - (x(r, c) - lse));
      }
    }
    loss /= m;
    Var out = make(scalar(loss), {logits}, nullptr);
    nodes_[out.id].back = [=, this, probs = std::move(probs)](const Matrix& g) {
      if (!needs(logits)) return;
      nodes_[logits.id].grad += (g(0, 0) / m) * (probs - soft);
    };
    return out;
  }

  /// Mean InfoNCE over query rows: positives are the matching key rows, the
  /// negative pool is shared. An empty pool gives exactly 0 per row.
  Var info_nce_mean(Var queries, const Matrix& pos_keys, const Matrix& negatives, double tau) {
    if (tau <= 0.0) throw ValidationError("info_nce_mean: tau must be positive");
    const Matrix& q = nodes_[queries.id].value;
    int n = static_cast<int>(q.rows());
    int m = static_cast<int>(negatives.rows());
    Vector l_pos = q.cwiseProduct(pos_keys).rowwise().sum() / tau;
    Matrix l_neg;
    if (m > 0) l_neg.noalias() = q * negatives.transpose() / tau;
    double loss = 0.0;
    Vector p_pos(n);
    Matrix p_neg(n, m);
    for (int i = 0; i < n; ++i) {
      double mx = l_pos(i);
      if (m > 0) mx = std::max(mx, l_neg.row(i).maxCoeff());
      double se = std::exp(l_pos(i) - mx);
      if (m > 0) {
        p_neg.row(i) = (l_neg.row(i).array() - mx).exp().matrix();
        se += p_neg.row(i).sum();
      }
      double ppos = std::exp(l_pos(i) - mx) / se;
      if (m > 0) p_neg.row(i) /= se;
      p_pos(i) = ppos;
      loss += mx + std::log(se) - l_pos(i);
    }
    loss /= n;
    Var out = make(scalar(loss), {queries}, nullptr);
    nodes_[out.id].back = [=, this, p_pos = std::move(p_pos),
                           p_neg = std::move(p_neg)](const Matrix& g) {
      if (!needs(queries)) return;
      double go = g(0, 0) / (n * tau);
      Matrix d = (p_pos.array() - 1.0).matrix().asDiagonal() * pos_keys;
      if (m > 0) d.noalias() += p_neg * negatives;
      nodes_[queries.id].grad += go * d;
    };
    return out;
  }

  /// Supervised contrastive loss. For anchor i, the contrast set A(i) is all
  /// candidates except `self_index[i]` (when >= 0), and P(i) the members of
  /// A(i) sharing i's label. Anchors with empty P(i) (incl. unlabeled) are
  /// skipped; if every anchor is skipped the loss is 0 and a warning is
  /// recorded.
  Var supcon_mean(Var anchors, const std::vector<int>& anchor_labels, const Matrix& candidates,
                  const std::vector<int>& cand_labels, double tau,
                  const std::vector<int>* self_index = nullptr, WarningLog* log = nullptr) {
    if (tau <= 0.0) throw ValidationError("supcon_mean: tau must be positive");
    const Matrix& a = nodes_[anchors.id].value;
    int n = static_cast<int>(a.rows());
    int m = static_cast<int>(candidates.rows());
    Matrix s;
    s.noalias() = a * candidates.transpose() / tau;

    Matrix dl = Matrix::Zero(n, m);  // dLoss/dS, filled per valid anchor
    double loss = 0.0;
    int valid = 0;
    for (int i = 0; i < n; ++i) {
      int self = self_index ? (*self_index)[static_cast<size_t>(i)] : -1;
      int lbl = anchor_labels[static_cast<size_t>(i)];
      if (lbl == kUnlabeled) continue;
      int pos_count = 0;
      for (int c = 0; c < m; ++c)
        if (c != self && cand_labels[static_cast<size_t>(c)] == lbl) ++pos_count;
      if (pos_count == 0) continue;
      ++valid;

      double mx = -std::numeric_limits<double>::infinity();
      for (int c = 0; c < m; ++c)
        if (c != self) mx = std::max(mx, s(i, c));
      double se = 0.0;
      for (int c = 0; c < m; ++c)
        if (c != self) se += std::exp(s(i, c) - mx);
      double lse = mx + std::log(se);
      double pos_mean = 0.0;
      for (int c = 0; c < m; ++c) {
        if (c == self) continue;
        double sm = std::exp(s(i, c) - mx) / se;
        bool in_p = cand_labels[static_cast<size_t>(c)] == lbl;
        dl(i, c) = sm - (in_p ? 1.0 / pos_count : 0.0);
        if (in_p) pos_mean += s(i, c);
      }
      loss += lse - pos_mean / pos_count;
    }
    if (valid == 0) {
      warn(log, "supcon_mean: every anchor skipped (no positives); loss defined as 0");
      return input(scalar(0.0));
    }
    loss /= valid;
    dl /= valid;
    Var out = make(scalar(loss), {anchors}, nullptr);
    nodes_[out.id].back = [=, this, dl = std::move(dl)](const Matrix& g) {
      if (!needs(anchors)) return;
      nodes_[anchors.id].grad.noalias() += (g(0, 0) / tau) * (dl * candidates);
    };
    return out;
  }

  /// Reverse sweep from a 1x1 root. Parameter grads accumulate (callers
  /// zero them between steps).
  void backward(Var root) {
    if (nodes_[root.id].value.size() != 1) throw RuntimeFailure("backward: root must be scalar");
    if (!nodes_[root.id].needs_grad) return;  // nothing trainable feeds the root
    for (auto& nd : nodes_)
      if (nd.needs_grad) nd.grad = Matrix::Zero(nd.value.rows(), nd.value.cols());
    nodes_[root.id].grad(0, 0) = 1.0;
    for (int i = root.id; i >= 0; --i) {
      if (nodes_[i].needs_grad && nodes_[i].back) nodes_[i].back(nodes_[i].grad);
    }
    for (auto& [id, p] : bound_) p->grad += nodes_[id].grad;
  }

 private:
  static constexpr double kDegenerateNorm = 1e-12;

  struct Node {
    Matrix value;
    Matrix grad;
    std::function<void(const Matrix&)> back;
    bool needs_grad = false;
  };

  static Matrix scalar(double v) {
    Matrix m(1, 1);
    m(0, 0) = v;
    return m;
  }

  bool needs(Var v) const { return nodes_[v.id].needs_grad; }

  Var push(Matrix v, bool needs_grad, std::function<void(const Matrix&)> back) {
    nodes_.push_back(Node{std::move(v), Matrix(), std::move(back), needs_grad});
    return Var{static_cast<int>(nodes_.size()) - 1};
  }

  Var make(Matrix v, const std::vector<Var>& inputs, std::function<void(const Matrix&)> back) {
    bool ng = false;
    for (Var in : inputs) ng = ng || nodes_[in.id].needs_grad;
    return push(std::move(v), ng, std::move(back));
  }

  std::vector<Node> nodes_;
  std::vector<std::pair<int, Parameter*>> bound_;
};

using Var = Tape::Var;

}  // namespace milkit::ad
