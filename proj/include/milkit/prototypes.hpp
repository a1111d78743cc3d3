#pragma once

// Class prototypes and momentum pseudo-labels in the projection space.
//
// Each class (normal included) owns a unit-norm prototype, EMA-updated from
// the weak projected views assigned to it. Per-instance soft labels start
// from slide-level priors and drift toward the restricted prototype
// assignment; on a tumor slide the assignment (and therefore the label
// support, forever) is confined to {slide class, normal}. Normal-slide
// instances stay pinned to the normal one-hot. None of this carries
// gradients — the machinery produces targets only.

#include <cmath>
#include <map>
#include <string>
#include <vector>

#include "milkit/archive.hpp"
#include "milkit/common.hpp"
#include "milkit/dataio.hpp"
#include "milkit/rng.hpp"

namespace milkit {

struct PrototypeBank {
  Matrix mu;              // C x e, unit rows
  double momentum = 0.9;  // EMA keep rate

  int num_classes() const { return static_cast<int>(mu.rows()); }
};

inline PrototypeBank init_prototypes(int num_classes, int e_dim, std::uint64_t seed,
                                     double momentum = 0.9) {
  if (num_classes < 1 || e_dim < 1) throw ValidationError("init_prototypes: C and e must be >= 1");
  Rng rng = substream({seed, 0x9207a11eULL});
  PrototypeBank bank;
  bank.momentum = momentum;
  bank.mu.resize(num_classes, e_dim);
  for (int c = 0; c < num_classes; ++c) {
    for (int j = 0; j < e_dim; ++j) bank.mu(c, j) = rng.normal();
    bank.mu.row(c) /= bank.mu.row(c).norm();
  }
  return bank;
}

/// Hard assignment restricted to {slide class, normal}: the class whose
/// prototype is most similar to the weak projected view; ties go to normal.
inline int restricted_assign(const Vector& h_proj, const PrototypeBank& bank, int slide_label,
                             const LabelSpace& ls) {
  if (slide_label == ls.normal_index)
    throw ValidationError("restricted_assign: normal slides bypass assignment");
  double sim_slide = h_proj.dot(bank.mu.row(slide_label).transpose());
  double sim_normal = h_proj.dot(bank.mu.row(ls.normal_index).transpose());
  return sim_slide > sim_normal ? slide_label : ls.normal_index;
}

/// s' = alpha * s + (1 - alpha) * one_hot(z).
inline Vector momentum_update_label(const Vector& s, int z_class, double alpha) {
  Vector out = alpha * s;
  out(z_class) += 1.0 - alpha;
  return out;
}

/// mu_yhat <- normalise(m * mu_yhat + (1 - m) * h_proj); the antipodal
/// degenerate case (pre-normalisation norm ~ 0) skips the update.
inline void prototype_ema_update(PrototypeBank& bank, int y_hat, const Vector& h_proj,
                                 WarningLog* log = nullptr) {
  Vector blended = bank.momentum * bank.mu.row(y_hat).transpose() + (1.0 - bank.momentum) * h_proj;
  double n = blended.norm();
  if (n < 1e-12) {
    warn(log, "prototype_ema_update: degenerate (antipodal) update skipped for class " +
                  std::to_string(y_hat));
    return;
  }
  bank.mu.row(y_hat) = (blended / n).transpose();
}

/// KL(s || softmax(logits)) with 0 * log 0 = 0, via a stable log-softmax.
inline double kl_instance_loss(const Vector& logits, const Vector& s) {
  double mx = logits.maxCoeff();
  double se = (logits.array() - mx).exp().sum();
  double lse = mx + std::log(se);
  double kl = 0.0;
  for (int c = 0; c < logits.size(); ++c)
    if (s(c) > 0.0) kl += s(c) * (std::log(s(c)) - (logits(c) - lse));
  return kl;
}

/// Per-slide, per-instance soft label rows. std::map keeps serialisation
/// and iteration order deterministic.
struct SoftLabelStore {
  double alpha = 0.8;
  std::map<std::string, Matrix> labels;  // slide_id -> N x C

  Matrix& at(const std::string& slide_id) {
    auto it = labels.find(slide_id);
    if (it == labels.end()) throw RuntimeFailure("soft labels: unknown slide '" + slide_id + "'");
    return it->second;
  }
  const Matrix& at(const std::string& slide_id) const {
    auto it = labels.find(slide_id);
    if (it == labels.end()) throw RuntimeFailure("soft labels: unknown slide '" + slide_id + "'");
    return it->second;
  }
};

/// Initial soft labels: normal slides get the fixed normal one-hot; tumor
/// slides split their prior mass tumor_prior / (1 - tumor_prior) between the
/// slide class and normal.
inline SoftLabelStore init_soft_labels(const DatasetManifest& m,
                                       const std::vector<const ManifestEntry*>& slides,
                                       double alpha = 0.8, double tumor_prior = 0.5) {
  if (tumor_prior <= 0.0 || tumor_prior >= 1.0)
    throw ValidationError("init_soft_labels: tumor_prior must be in (0, 1)");
  SoftLabelStore store;
  store.alpha = alpha;
  const int c = m.label_space.num_classes();
  const int normal = m.label_space.normal_index;
  for (const ManifestEntry* e : slides) {
    auto [n, d] = read_bag_header(m.resolve(e->feature_path));
    Matrix s = Matrix::Zero(static_cast<int>(n), c);
    if (e->slide_label == normal) {
      s.col(normal).setOnes();
    } else {
      s.col(e->slide_label).setConstant(tumor_prior);
      s.col(normal).setConstant(1.0 - tumor_prior);
    }
    store.labels[e->slide_id] = std::move(s);
  }
  return store;
}

inline void save_soft_labels(const SoftLabelStore& store, const std::filesystem::path& path) {
  TensorArchive ar;
  ar.put_scalar("alpha", store.alpha);
  for (const auto& [id, s] : store.labels) ar.put("soft/" + id, s);
  ar.save(path);
}

inline SoftLabelStore load_soft_labels(const std::filesystem::path& path) {
  TensorArchive ar = TensorArchive::load(path);
  SoftLabelStore store;
  store.alpha = ar.get_scalar("alpha");
  for (const auto& e : ar.entries())
    if (e.name.rfind("soft/", 0) == 0) store.labels[e.name.substr(5)] = e.value;
  return store;
}

}  // namespace milkit
