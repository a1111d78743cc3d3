#pragma once

// Feature-space augmentations for the contrastive branch. Both transforms
// consume exactly d uniform draws per instance regardless of their strength
// parameters, so the random stream stays aligned when eta or p changes.

#include <cmath>

#include <json.hpp>

#include "milkit/common.hpp"
#include "milkit/rng.hpp"

namespace milkit {

struct AugmentConfig {
  double eta_weak = 0.05;
  double eta_strong = 0.4;
  double p_weak = 0.0;
  double p_strong = 0.0;

  void validate() const {
    if (eta_weak < 0.0 || eta_strong < 0.0) throw ValidationError("augment: eta must be >= 0");
    if (p_weak < 0.0 || p_weak >= 1.0 || p_strong < 0.0 || p_strong >= 1.0)
      throw ValidationError("augment: dropout p must be in [0, 1)");
  }
};

inline void augment_config_from_json(const nlohmann::json& doc, AugmentConfig& cfg) {
  for (const auto& [key, _] : doc.items()) {
    if (key == "eta_weak") cfg.eta_weak = doc[key].get<double>();
    else if (key == "eta_strong") cfg.eta_strong = doc[key].get<double>();
    else if (key == "p_weak") cfg.p_weak = doc[key].get<double>();
    else if (key == "p_strong") cfg.p_strong = doc[key].get<double>();
    else throw ValidationError("augment config: unknown key '" + key + "'");
  }
  cfg.validate();
}

inline nlohmann::json augment_config_to_json(const AugmentConfig& cfg) {
  return nlohmann::json{{"eta_weak", cfg.eta_weak},
                        {"eta_strong", cfg.eta_strong},
                        {"p_weak", cfg.p_weak},
                        {"p_strong", cfg.p_strong}};
}

/// Sign-aligned bounded noise: draw dbar ~ U(0,1)^d and add
/// eta * (dbar .* sign(h)) / ||dbar||_2. The perturbation never flips a
/// coordinate's sign (zero coordinates stay zero since sign(0) = 0) and has
/// norm exactly eta whenever h has no zero components.
inline Vector simcl_noise(const Vector& h, double eta, Rng& rng) {
  if (eta < 0.0) throw ValidationError("simcl_noise: eta must be >= 0");
  const int d = static_cast<int>(h.size());
  Vector dbar(d);
  for (int i = 0; i < d; ++i) dbar(i) = rng.u01();
  if (eta == 0.0) return h;
  double norm = dbar.norm();
  if (norm < 1e-300) return h;  // astronomically unlikely; keeps the math total
  Vector out = h;
  for (int i = 0; i < d; ++i) {
    double s = h(i) > 0.0 ? 1.0 : (h(i) < 0.0 ? -1.0 : 0.0);
    out(i) += eta * dbar(i) * s / norm;
  }
  return out;
}

/// Inverted dropout: each coordinate is zeroed with probability p and the
/// survivors are scaled by 1/(1-p) so the expectation is preserved.
inline Vector feature_dropout(const Vector& h, double p, Rng& rng) {
  if (p < 0.0 || p >= 1.0) throw ValidationError("feature_dropout: p must be in [0, 1)");
  const int d = static_cast<int>(h.size());
  Vector out(d);
  const double keep_scale = 1.0 / (1.0 - p);
  for (int i = 0; i < d; ++i) {
    double u = rng.u01();
    out(i) = u < p ? 0.0 : h(i) * keep_scale;
  }
  return out;
}

struct BagViews {
  Matrix weak;    // N x d
  Matrix strong;  // N x d
};

/// Two stochastic views of every instance in a bag: noise first, then
/// dropout, one independent stream per view.
inline BagViews make_views(const Matrix& features, const AugmentConfig& cfg, Rng& weak_rng,
                           Rng& strong_rng) {
  cfg.validate();
  const int n = static_cast<int>(features.rows());
  BagViews v;
  v.weak.resize(n, features.cols());
  v.strong.resize(n, features.cols());
  for (int i = 0; i < n; ++i) {
    Vector h = features.row(i).transpose();
    v.weak.row(i) = feature_dropout(simcl_noise(h, cfg.eta_weak, weak_rng), cfg.p_weak, weak_rng).transpose();
    v.strong.row(i) =
        feature_dropout(simcl_noise(h, cfg.eta_strong, strong_rng), cfg.p_strong, strong_rng).transpose();
  }
  return v;
}

}  // namespace milkit
