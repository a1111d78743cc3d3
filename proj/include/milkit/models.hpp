#pragma once

// The three bag classifiers.
//
//   dsmil    — multi-class critical-instance attention with one shared query
//              projection; per-class attention against that class's critical
//              instance; a C x d bag classifier applied row-per-class to the
//              per-class bag vectors.
//   mbdsmil  — same skeleton with a class-specific query projection phi_c per
//              branch. Tying all phi_c reproduces dsmil exactly.
//   clam     — gated attention (shared tanh/sigmoid trunk, per-branch heads,
//              including a normal-class bag branch) plus paired-logit
//              instance classifiers on the subtype branches only.
//
// Values in the attention aggregation are the raw instance features. Scores
// are scaled by 1/sqrt(q_dim) before the softmax. Argmax ties break to the
// lowest index everywhere.

#include <algorithm>
#include <cmath>
#include <numeric>
#include <string>
#include <vector>

#include "milkit/autodiff.hpp"
#include "milkit/common.hpp"
#include "milkit/dataio.hpp"
#include "milkit/rng.hpp"

namespace milkit {

enum class ModelKind { dsmil, clam, mbdsmil, dsmil_cl_pl, mbdsmil_cl_pl };

inline ModelKind model_kind_from_string(const std::string& s) {
  if (s == "dsmil") return ModelKind::dsmil;
  if (s == "clam") return ModelKind::clam;
  if (s == "mbdsmil") return ModelKind::mbdsmil;
  if (s == "dsmil_cl_pl") return ModelKind::dsmil_cl_pl;
  if (s == "mbdsmil_cl_pl") return ModelKind::mbdsmil_cl_pl;
  throw ValidationError("unknown model: " + s);
}

inline std::string to_string(ModelKind k) {
  switch (k) {
    case ModelKind::dsmil: return "dsmil";
    case ModelKind::clam: return "clam";
    case ModelKind::mbdsmil: return "mbdsmil";
    case ModelKind::dsmil_cl_pl: return "dsmil_cl_pl";
    case ModelKind::mbdsmil_cl_pl: return "mbdsmil_cl_pl";
  }
  throw RuntimeFailure("unreachable model kind");
}

/// True when the training loop runs the contrastive branch and the
/// prototype pseudo-label machinery.
inline bool uses_prototypes(ModelKind k) {
  return k == ModelKind::dsmil_cl_pl || k == ModelKind::mbdsmil_cl_pl;
}

enum class Architecture { dsmil, mbdsmil, clam };

inline Architecture architecture_of(ModelKind k) {
  switch (k) {
    case ModelKind::dsmil:
    case ModelKind::dsmil_cl_pl: return Architecture::dsmil;
    case ModelKind::mbdsmil:
    case ModelKind::mbdsmil_cl_pl: return Architecture::mbdsmil;
    case ModelKind::clam: return Architecture::clam;
  }
  throw RuntimeFailure("unreachable model kind");
}

/// Uniform fan-in initialisation: U(-1/sqrt(cols), 1/sqrt(cols)).
inline Matrix init_weight(int rows, int cols, Rng& rng) {
  Matrix w(rows, cols);
  const double s = 1.0 / std::sqrt(static_cast<double>(cols));
  for (int r = 0; r < rows; ++r)
    for (int c = 0; c < cols; ++c) w(r, c) = rng.uniform(-s, s);
  return w;
}

struct DsmilParams {
  ad::Parameter inst_w, inst_b;    // C x d, 1 x C
  ad::Parameter query_w, query_b;  // q x d, 1 x q (shared across classes)
  ad::Parameter bag_w, bag_b;      // C x d (row c scores class c's bag vector), 1 x C

  void init(int num_classes, int dim, int q_dim, Rng& rng) {
    inst_w = {"inst_w", init_weight(num_classes, dim, rng), true};
    inst_b = {"inst_b", Matrix::Zero(1, num_classes), false};
    query_w = {"query_w", init_weight(q_dim, dim, rng), true};
    query_b = {"query_b", Matrix::Zero(1, q_dim), false};
    bag_w = {"bag_w", init_weight(num_classes, dim, rng), true};
    bag_b = {"bag_b", Matrix::Zero(1, num_classes), false};
  }

  std::vector<ad::Parameter*> all() { return {&inst_w, &inst_b, &query_w, &query_b, &bag_w, &bag_b}; }
};

struct MbDsmilParams {
  ad::Parameter inst_w, inst_b;
  std::vector<ad::Parameter> phi_w, phi_b;  // per class: q x d, 1 x q
  ad::Parameter bag_w, bag_b;               // per-class heads as rows, as in dsmil

  void init(int num_classes, int dim, int q_dim, Rng& rng) {
    inst_w = {"inst_w", init_weight(num_classes, dim, rng), true};
    inst_b = {"inst_b", Matrix::Zero(1, num_classes), false};
    phi_w.clear();
    phi_b.clear();
    for (int c = 0; c < num_classes; ++c) {
      phi_w.emplace_back("phi" + std::to_string(c) + "_w", init_weight(q_dim, dim, rng), true);
      phi_b.emplace_back("phi" + std::to_string(c) + "_b", Matrix::Zero(1, q_dim), false);
    }
    bag_w = {"bag_w", init_weight(num_classes, dim, rng), true};
    bag_b = {"bag_b", Matrix::Zero(1, num_classes), false};
  }

  std::vector<ad::Parameter*> all() {
    std::vector<ad::Parameter*> ps{&inst_w, &inst_b};
    for (size_t c = 0; c < phi_w.size(); ++c) {
      ps.push_back(&phi_w[c]);
      ps.push_back(&phi_b[c]);
    }
    ps.push_back(&bag_w);
    ps.push_back(&bag_b);
    return ps;
  }
};

struct ClamParams {
  ad::Parameter trunk_v_w, trunk_v_b;  // h x d, 1 x h (tanh arm)
  ad::Parameter trunk_u_w, trunk_u_b;  // h x d, 1 x h (sigmoid gate)
  ad::Parameter att_w, att_b;          // C x h per-branch heads, 1 x C
  ad::Parameter bag_w, bag_b;          // C x d per-branch bag classifiers, 1 x C
  std::vector<ad::Parameter> ic_w, ic_b;  // subtype branches only: 2 x d, 1 x 2

  void init(int num_classes, int dim, int hidden, Rng& rng) {
    trunk_v_w = {"trunk_v_w", init_weight(hidden, dim, rng), true};
    trunk_v_b = {"trunk_v_b", Matrix::Zero(1, hidden), false};
    trunk_u_w = {"trunk_u_w", init_weight(hidden, dim, rng), true};
    trunk_u_b = {"trunk_u_b", Matrix::Zero(1, hidden), false};
    att_w = {"att_w", init_weight(num_classes, hidden, rng), true};
    att_b = {"att_b", Matrix::Zero(1, num_classes), false};
    bag_w = {"bag_w", init_weight(num_classes, dim, rng), true};
    bag_b = {"bag_b", Matrix::Zero(1, num_classes), false};
    ic_w.clear();
    ic_b.clear();
    for (int c = 0; c + 1 < num_classes; ++c) {
      ic_w.emplace_back("ic" + std::to_string(c) + "_w", init_weight(2, dim, rng), true);
      ic_b.emplace_back("ic" + std::to_string(c) + "_b", Matrix::Zero(1, 2), false);
    }
  }

  std::vector<ad::Parameter*> all() {
    std::vector<ad::Parameter*> ps{&trunk_v_w, &trunk_v_b, &trunk_u_w, &trunk_u_b,
                                   &att_w,     &att_b,     &bag_w,     &bag_b};
    for (size_t c = 0; c < ic_w.size(); ++c) {
      ps.push_back(&ic_w[c]);
      ps.push_back(&ic_b[c]);
    }
    return ps;
  }
};

/// Per-class argmax over the instance-logit columns, ties to the lowest
/// instance index.
inline std::vector<int> select_critical(const Matrix& inst_logits) {
  if (inst_logits.rows() < 1) throw ValidationError("select_critical: empty bag");
  std::vector<int> critical(static_cast<size_t>(inst_logits.cols()));
  for (int c = 0; c < inst_logits.cols(); ++c) {
    int best = 0;
    for (int j = 1; j < inst_logits.rows(); ++j)
      if (inst_logits(j, c) > inst_logits(best, c)) best = j;
    critical[static_cast<size_t>(c)] = best;
  }
  return critical;
}

/// Supervision targets for the per-class critical instances: on a tumor
/// slide, the slide-class critical keeps the slide label and every other
/// critical is pushed to normal; on a normal slide everything is normal.
inline std::vector<int> critical_supervision_targets(int slide_label, const LabelSpace& ls) {
  std::vector<int> targets(static_cast<size_t>(ls.num_classes()), ls.normal_index);
  if (slide_label != ls.normal_index) targets[static_cast<size_t>(slide_label)] = slide_label;
  return targets;
}

struct TapeForward {
  ad::Var bag_logits;               // 1 x C
  ad::Var inst_logits;              // N x C (dsmil-family; unset for clam)
  std::vector<ad::Var> attention;   // per class, N x 1
  std::vector<int> critical;        // dsmil-family
  std::vector<ad::Var> pair_logits; // clam: per subtype branch, N x 2
};

namespace detail {

/// Shared dsmil/mbdsmil body; `queries` holds one N x q var per class (all
/// aliases of the same var for the shared-projection variant).
inline TapeForward dsmil_body(ad::Tape& t, ad::Var H, ad::Var inst_logits,
                              const std::vector<ad::Var>& queries, ad::Parameter& bag_w,
                              ad::Parameter& bag_b, int q_dim) {
  TapeForward f;
  f.inst_logits = inst_logits;
  f.critical = select_critical(t.val(inst_logits));
  const int num_classes = static_cast<int>(t.val(inst_logits).cols());
  std::vector<ad::Var> bag_vecs;
  for (int c = 0; c < num_classes; ++c) {
    ad::Var q = queries[static_cast<size_t>(c)];
    ad::Var qm = t.row(q, f.critical[static_cast<size_t>(c)]);                 // 1 x q
    ad::Var scores = t.scale(t.matmul(q, qm, false, true), 1.0 / std::sqrt(q_dim));  // N x 1
    ad::Var w = t.softmax_col(scores);
    f.attention.push_back(w);
    bag_vecs.push_back(t.matmul(w, H, true, false));  // 1 x d
  }
  ad::Var stacked = t.concat_rows(bag_vecs);  // C x d
  ad::Var logits_col = t.add(t.rowwise_dot(stacked, t.param(bag_w)), t.transpose(t.param(bag_b)));
  f.bag_logits = t.transpose(logits_col);  // 1 x C
  return f;
}

}  // namespace detail

inline TapeForward dsmil_forward(ad::Tape& t, DsmilParams& p, ad::Var H) {
  if (t.val(H).cols() != p.inst_w.value.cols()) throw ValidationError("dsmil_forward: dimension mismatch");
  ad::Var inst = t.add_rowvec(t.matmul(H, t.param(p.inst_w), false, true), t.param(p.inst_b));
  ad::Var q = t.add_rowvec(t.matmul(H, t.param(p.query_w), false, true), t.param(p.query_b));
  std::vector<ad::Var> queries(static_cast<size_t>(p.inst_w.value.rows()), q);
  return detail::dsmil_body(t, H, inst, queries, p.bag_w, p.bag_b,
                            static_cast<int>(p.query_w.value.rows()));
}

inline TapeForward mbdsmil_forward(ad::Tape& t, MbDsmilParams& p, ad::Var H) {
  if (t.val(H).cols() != p.inst_w.value.cols()) throw ValidationError("mbdsmil_forward: dimension mismatch");
  ad::Var inst = t.add_rowvec(t.matmul(H, t.param(p.inst_w), false, true), t.param(p.inst_b));
  std::vector<ad::Var> queries;
  for (size_t c = 0; c < p.phi_w.size(); ++c)
    queries.push_back(t.add_rowvec(t.matmul(H, t.param(p.phi_w[c]), false, true), t.param(p.phi_b[c])));
  return detail::dsmil_body(t, H, inst, queries, p.bag_w, p.bag_b,
                            static_cast<int>(p.phi_w[0].value.rows()));
}

inline TapeForward clam_forward(ad::Tape& t, ClamParams& p, ad::Var H) {
  if (t.val(H).cols() != p.trunk_v_w.value.cols()) throw ValidationError("clam_forward: dimension mismatch");
  ad::Var v = t.tanh_op(t.add_rowvec(t.matmul(H, t.param(p.trunk_v_w), false, true), t.param(p.trunk_v_b)));
  ad::Var u = t.sigmoid_op(t.add_rowvec(t.matmul(H, t.param(p.trunk_u_w), false, true), t.param(p.trunk_u_b)));
  ad::Var gated = t.cmul(v, u);  // N x h
  ad::Var scores = t.add_rowvec(t.matmul(gated, t.param(p.att_w), false, true), t.param(p.att_b));  // N x C

  TapeForward f;
  const int num_classes = static_cast<int>(p.att_w.value.rows());
  std::vector<ad::Var> bag_vecs;
  for (int c = 0; c < num_classes; ++c) {
    ad::Var a = t.softmax_col(t.col(scores, c));
    f.attention.push_back(a);
    bag_vecs.push_back(t.matmul(a, H, true, false));
  }
  ad::Var stacked = t.concat_rows(bag_vecs);
  ad::Var logits_col = t.add(t.rowwise_dot(stacked, t.param(p.bag_w)), t.transpose(t.param(p.bag_b)));
  f.bag_logits = t.transpose(logits_col);
  for (size_t c = 0; c < p.ic_w.size(); ++c)
    f.pair_logits.push_back(
        t.add_rowvec(t.matmul(H, t.param(p.ic_w[c]), false, true), t.param(p.ic_b[c])));
  return f;
}

struct ClamInstanceTarget {
  int instance = 0;
  int branch = 0;  // subtype branch index
  int target = 0;  // 0 negative, 1 positive
};

/// Top/bottom-k instance sampling for the paired-logit instance loss.
/// Ground-truth branch of a tumor slide: top-k positive, bottom-k negative.
/// Every other subtype branch (and all of them on normal slides): top-k
/// negative. k clamps to floor(N/2) with a warning.
inline std::vector<ClamInstanceTarget> clam_instance_sampling(const Matrix& attention, int slide_label,
                                                              int k, int normal_index,
                                                              WarningLog* log = nullptr) {
  const int n = static_cast<int>(attention.cols());
  const int num_classes = static_cast<int>(attention.rows());
  if (k < 1) throw ValidationError("clam_instance_sampling: k must be >= 1");
  int k_eff = std::min(k, n / 2);
  if (k > n / 2)
    warn(log, "clam_instance_sampling: k clamped from " + std::to_string(k) + " to " +
                  std::to_string(k_eff) + " for a bag of " + std::to_string(n) + " instances");
  std::vector<ClamInstanceTarget> out;
  if (k_eff == 0) return out;

  auto ranked = [&](int branch, bool descending) {
    std::vector<int> idx(static_cast<size_t>(n));
    std::iota(idx.begin(), idx.end(), 0);
    std::stable_sort(idx.begin(), idx.end(), [&](int a, int b) {
      double va = attention(branch, a), vb = attention(branch, b);
      if (va != vb) return descending ? va > vb : va < vb;
      return a < b;
    });
    idx.resize(static_cast<size_t>(k_eff));
    return idx;
  };

  for (int branch = 0; branch < num_classes; ++branch) {
    if (branch == normal_index) continue;  // no instance classifier on the normal branch
    if (slide_label != normal_index && branch == slide_label) {
      for (int j : ranked(branch, true)) out.push_back({j, branch, 1});
      for (int j : ranked(branch, false)) out.push_back({j, branch, 0});
    } else {
      for (int j : ranked(branch, true)) out.push_back({j, branch, 0});
    }
  }
  return out;
}

/// Slide-level paired logits: per subtype branch, the row of that branch's
/// instance pair logits whose positive component is largest (ties to the
/// lowest instance index).
inline Matrix clam_slide_pairs(const std::vector<Matrix>& pair_logits) {
  Matrix pairs(static_cast<int>(pair_logits.size()), 2);
  for (size_t c = 0; c < pair_logits.size(); ++c) {
    const Matrix& pl = pair_logits[c];
    if (pl.rows() < 1 || pl.cols() != 2) throw ValidationError("clam_slide_pairs: bad pair logits");
    int best = 0;
    for (int j = 1; j < pl.rows(); ++j)
      if (pl(j, 1) > pl(best, 1)) best = j;
    pairs.row(static_cast<int>(c)) = pl.row(best);
  }
  return pairs;
}

/// Slide rule over per-subtype pairs: normal iff the negative logit strictly
/// beats the positive one on every subtype branch; otherwise the subtype with
/// the largest positive logit (ties to the lowest class index).
inline int clam_predict(const Matrix& pairs, int normal_index) {
  if (pairs.cols() != 2 || pairs.rows() < 1) throw ValidationError("clam_predict: bad pairs");
  bool all_negative = true;
  for (int c = 0; c < pairs.rows(); ++c)
    if (!(pairs(c, 0) > pairs(c, 1))) all_negative = false;
  if (all_negative) return normal_index;
  int best = 0;
  for (int c = 1; c < pairs.rows(); ++c)
    if (pairs(c, 1) > pairs(best, 1)) best = c;
  return best;
}

/// Bundles whichever architecture a run uses behind one parameter list and
/// one forward entry point.
struct ModelParams {
  ModelKind kind = ModelKind::dsmil;
  int num_classes = 0;
  int dim = 0;
  int q_dim = 64;
  int clam_hidden = 128;
  DsmilParams dsmil;
  MbDsmilParams mb;
  ClamParams clam;

  void init(ModelKind k, int c, int d, int q, int hidden, Rng& rng) {
    kind = k;
    num_classes = c;
    dim = d;
    q_dim = q;
    clam_hidden = hidden;
    switch (architecture_of(k)) {
      case Architecture::dsmil: dsmil.init(c, d, q, rng); break;
      case Architecture::mbdsmil: mb.init(c, d, q, rng); break;
      case Architecture::clam: clam.init(c, d, hidden, rng); break;
    }
  }

  std::vector<ad::Parameter*> all() {
    switch (architecture_of(kind)) {
      case Architecture::dsmil: return dsmil.all();
      case Architecture::mbdsmil: return mb.all();
      case Architecture::clam: return clam.all();
    }
    throw RuntimeFailure("unreachable model kind");
  }
};

inline TapeForward forward_model(ad::Tape& t, ModelParams& p, ad::Var H) {
  switch (architecture_of(p.kind)) {
    case Architecture::dsmil: return dsmil_forward(t, p.dsmil, H);
    case Architecture::mbdsmil: return mbdsmil_forward(t, p.mb, H);
    case Architecture::clam: return clam_forward(t, p.clam, H);
  }
  throw RuntimeFailure("unreachable model kind");
}

/// Plain-value forward for evaluation.
struct BagOutput {
  Vector bag_logits;                // C
  Matrix inst_logits;               // N x C (dsmil-family; empty for clam)
  Matrix instance_scores;           // N x C probability-like per-class scores
  Matrix attention;                 // C x N
  std::vector<int> critical;        // dsmil-family
  std::vector<Matrix> pair_logits;  // clam
};

inline Matrix softmax_rows(const Matrix& logits) {
  Matrix out(logits.rows(), logits.cols());
  for (int r = 0; r < logits.rows(); ++r) {
    double mx = logits.row(r).maxCoeff();
    Eigen::ArrayXd e = (logits.row(r).array() - mx).exp();
    out.row(r) = (e / e.sum()).matrix();
  }
  return out;
}

inline BagOutput evaluate_bag(ModelParams& p, const Matrix& features) {
  ad::Tape t;
  TapeForward f = forward_model(t, p, t.input(features));
  BagOutput out;
  out.bag_logits = t.val(f.bag_logits).row(0).transpose();
  const int n = static_cast<int>(features.rows());
  out.attention.resize(p.num_classes, n);
  for (int c = 0; c < p.num_classes; ++c)
    out.attention.row(c) = t.val(f.attention[static_cast<size_t>(c)]).col(0).transpose();
  if (architecture_of(p.kind) == Architecture::clam) {
    for (const auto& v : f.pair_logits) out.pair_logits.push_back(t.val(v));
    // Per-branch positive-class probability; the normal score is one minus
    // the best subtype score since the normal branch has no instance head.
    out.instance_scores.resize(n, p.num_classes);
    for (int c = 0; c + 1 < p.num_classes; ++c) {
      const Matrix& pl = out.pair_logits[static_cast<size_t>(c)];
      for (int j = 0; j < n; ++j) {
        double m = std::max(pl(j, 0), pl(j, 1));
        double e0 = std::exp(pl(j, 0) - m), e1 = std::exp(pl(j, 1) - m);
        out.instance_scores(j, c) = e1 / (e0 + e1);
      }
    }
    for (int j = 0; j < n; ++j) {
      double best = out.instance_scores.row(j).head(p.num_classes - 1).maxCoeff();
      out.instance_scores(j, p.num_classes - 1) = 1.0 - best;
    }
  } else {
    out.inst_logits = t.val(f.inst_logits);
    out.critical = f.critical;
    out.instance_scores = softmax_rows(out.inst_logits);
  }
  return out;
}

/// Slide prediction: argmax of bag logits for the dsmil family, the paired
/// logit rule for clam. Ties break to the lowest class index.
inline int predict_slide(const BagOutput& out, ModelKind kind, int normal_index) {
  if (architecture_of(kind) == Architecture::clam)
    return clam_predict(clam_slide_pairs(out.pair_logits), normal_index);
  int best = 0;
  for (int c = 1; c < out.bag_logits.size(); ++c)
    if (out.bag_logits(c) > out.bag_logits(best)) best = c;
  return best;
}

}  // namespace milkit
