#pragma once

// Synthetic bag generator with a known instance-level ground truth.
//
// Class-conditional densities are isotropic Gaussians whose means sit at the
// vertices of a regular simplex, so every pair of classes is equally far
// apart and the Bayes decision rule (nearest mean, equal priors) is exact.
// Tumor slides carry a contiguous leading block of ceil(rho*N) tumor
// instances ahead of normal filler; normal slides are all normal.

#include <cmath>
#include <filesystem>
#include <string>
#include <vector>

#include <json.hpp>

#include "milkit/common.hpp"
#include "milkit/dataio.hpp"
#include "milkit/rng.hpp"

namespace milkit {

struct SynthConfig {
  int num_classes = 4;  // includes the normal class
  int feature_dim = 32;
  int train_slides_per_class = 30;
  int test_slides_per_class = 10;
  int min_instances = 40;
  int max_instances = 80;
  double min_tumor_fraction = 0.2;
  double max_tumor_fraction = 0.6;
  double class_separation = 3.0;  // exact distance between any two class means
  double noise_sigma = 1.0;
  std::uint64_t seed = 7;

  void validate() const {
    if (num_classes < 2) throw ValidationError("synth: num_classes must be >= 2");
    if (feature_dim < num_classes - 1)
      throw ValidationError("synth: feature_dim must be >= num_classes - 1 to embed the simplex");
    if (train_slides_per_class < 1 || test_slides_per_class < 1)
      throw ValidationError("synth: slides per class must be >= 1");
    if (min_instances < 1 || max_instances < min_instances)
      throw ValidationError("synth: invalid instance count range");
    if (min_tumor_fraction <= 0.0 || max_tumor_fraction > 1.0 ||
        min_tumor_fraction > max_tumor_fraction)
      throw ValidationError("synth: tumor fraction range must satisfy 0 < lo <= hi <= 1");
    if (class_separation <= 0.0) throw ValidationError("synth: class_separation must be > 0");
    if (noise_sigma <= 0.0) throw ValidationError("synth: noise_sigma must be > 0");
  }
};

inline SynthConfig synth_config_from_json(const nlohmann::json& doc) {
  SynthConfig cfg;
  for (const auto& [key, _] : doc.items()) {
    if (key == "num_classes") cfg.num_classes = doc[key].get<int>();
    else if (key == "feature_dim") cfg.feature_dim = doc[key].get<int>();
    else if (key == "train_slides_per_class") cfg.train_slides_per_class = doc[key].get<int>();
    else if (key == "test_slides_per_class") cfg.test_slides_per_class = doc[key].get<int>();
    else if (key == "min_instances") cfg.min_instances = doc[key].get<int>();
    else if (key == "max_instances") cfg.max_instances = doc[key].get<int>();
    else if (key == "min_tumor_fraction") cfg.min_tumor_fraction = doc[key].get<double>();
    else if (key == "max_tumor_fraction") cfg.max_tumor_fraction = doc[key].get<double>();
    else if (key == "class_separation") cfg.class_separation = doc[key].get<double>();
    else if (key == "noise_sigma") cfg.noise_sigma = doc[key].get<double>();
    else if (key == "seed") cfg.seed = doc[key].get<std::uint64_t>();
    else throw ValidationError("synth config: unknown key '" + key + "'");
  }
  cfg.validate();
  return cfg;
}

inline nlohmann::json synth_config_to_json(const SynthConfig& cfg) {
  return nlohmann::json{{"num_classes", cfg.num_classes},
                        {"feature_dim", cfg.feature_dim},
                        {"train_slides_per_class", cfg.train_slides_per_class},
                        {"test_slides_per_class", cfg.test_slides_per_class},
                        {"min_instances", cfg.min_instances},
                        {"max_instances", cfg.max_instances},
                        {"min_tumor_fraction", cfg.min_tumor_fraction},
                        {"max_tumor_fraction", cfg.max_tumor_fraction},
                        {"class_separation", cfg.class_separation},
                        {"noise_sigma", cfg.noise_sigma},
                        {"seed", cfg.seed}};
}

/// C class means in R^d with every pairwise distance equal to `separation`.
/// Uses the Helmert basis of the hyperplane orthogonal to the all-ones
/// direction: the C standard basis vectors of R^C all lie in one coset of
/// that hyperplane at mutual distance sqrt(2), and expressing them in the
/// Helmert coordinates drops them into R^(C-1) with distances intact.
inline Matrix simplex_means(int num_classes, int dim, double separation) {
  if (dim < num_classes - 1)
    throw ValidationError("simplex_means: dim must be >= num_classes - 1");
  const int c = num_classes;
  Matrix helmert = Matrix::Zero(c - 1, c);  // rows: orthonormal basis vectors
  for (int k = 1; k < c; ++k) {
    double a = 1.0 / std::sqrt(static_cast<double>(k) * (k + 1));
    for (int i = 0; i < k; ++i) helmert(k - 1, i) = a;
    helmert(k - 1, k) = -static_cast<double>(k) * a;
  }
  Matrix means = Matrix::Zero(c, dim);
  const double scale = separation / std::sqrt(2.0);
  // coordinates of e_i are the i-th column of the basis matrix
  means.block(0, 0, c, c - 1) = scale * helmert.transpose();
  return means;
}

/// Posterior over classes for one instance under the generative model
/// (equal priors, shared isotropic sigma): softmax of -||x - mu_c||^2 / (2 sigma^2).
inline Vector bayes_posterior(const Vector& x, const Matrix& means, double sigma) {
  const int c = static_cast<int>(means.rows());
  Vector logits(c);
  for (int i = 0; i < c; ++i) logits(i) = -(x.transpose() - means.row(i)).squaredNorm() / (2.0 * sigma * sigma);
  double m = logits.maxCoeff();
  Vector p = (logits.array() - m).exp();
  return p / p.sum();
}

struct SynthSummary {
  double bayes_accuracy = 0.0;
  int num_train_slides = 0;
  int num_test_slides = 0;
  long long total_instances = 0;
};

namespace detail {

struct SynthSlide {
  FeatureBag bag;
  int slide_label = 0;
  std::string split;
};

inline SynthSlide make_slide(const SynthConfig& cfg, const Matrix& means, int cls,
                             const std::string& split, int index, const LabelSpace& ls) {
  std::uint64_t split_tag = split == "train" ? 0x5ea11ULL : 0x7e57ULL;
  Rng rng = substream({cfg.seed, 0x5f77ab5ULL, split_tag, static_cast<std::uint64_t>(cls),
                       static_cast<std::uint64_t>(index)});
  int n = cfg.min_instances + rng.uniform_int(cfg.max_instances - cfg.min_instances + 1);
  int num_tumor = 0;
  if (cls != ls.normal_index) {
    double rho = rng.uniform(cfg.min_tumor_fraction, cfg.max_tumor_fraction);
    num_tumor = static_cast<int>(std::ceil(rho * n));
  }

  SynthSlide s;
  s.slide_label = cls;
  s.split = split;
  char id[64];
  std::snprintf(id, sizeof(id), "%s_%s_%03d", split.c_str(),
                ls.class_names[static_cast<size_t>(cls)].c_str(), index);
  s.bag.slide_id = id;
  s.bag.features.resize(n, cfg.feature_dim);
  s.bag.instance_labels = std::vector<int>(static_cast<size_t>(n));
  for (int i = 0; i < n; ++i) {
    int inst_cls = i < num_tumor ? cls : ls.normal_index;
    (*s.bag.instance_labels)[static_cast<size_t>(i)] = inst_cls;
    for (int j = 0; j < cfg.feature_dim; ++j)
      s.bag.features(i, j) = means(inst_cls, j) + cfg.noise_sigma * rng.normal();
  }
  int grid_w = static_cast<int>(std::ceil(std::sqrt(static_cast<double>(n))));
  s.bag.coords = std::vector<std::array<std::uint32_t, 2>>(static_cast<size_t>(n));
  for (int i = 0; i < n; ++i)
    (*s.bag.coords)[static_cast<size_t>(i)] = {static_cast<std::uint32_t>(i / grid_w),
                                               static_cast<std::uint32_t>(i % grid_w)};
  return s;
}

}  // namespace detail

/// Writes bags, sidecars, manifest.json and summary.json under out_dir and
/// reports the empirical Bayes accuracy over every generated instance.
inline SynthSummary generate_dataset(const SynthConfig& cfg, const std::filesystem::path& out_dir,
                                     WarningLog* log = nullptr) {
  cfg.validate();
  LabelSpace ls;
  for (int i = 0; i < cfg.num_classes - 1; ++i) ls.class_names.push_back("tumor_" + std::to_string(i));
  ls.class_names.push_back("normal");
  ls.normal_index = cfg.num_classes - 1;
  ls.validate();

  Matrix means = simplex_means(cfg.num_classes, cfg.feature_dim, cfg.class_separation);

  std::filesystem::create_directories(out_dir / "bags");
  std::filesystem::create_directories(out_dir / "labels");
  std::filesystem::create_directories(out_dir / "coords");

  DatasetManifest m;
  m.label_space = ls;
  m.feature_dim = cfg.feature_dim;
  m.base_dir = out_dir;

  SynthSummary summary;
  long long bayes_hits = 0;
  auto emit = [&](const std::string& split, int slides_per_class) {
    for (int cls = 0; cls < cfg.num_classes; ++cls) {
      for (int idx = 0; idx < slides_per_class; ++idx) {
        detail::SynthSlide s = detail::make_slide(cfg, means, cls, split, idx, ls);
        write_bag(s.bag, out_dir / "bags" / (s.bag.slide_id + ".milb"));
        write_instance_labels(*s.bag.instance_labels, out_dir / "labels" / (s.bag.slide_id + ".mill"));
        write_coords(*s.bag.coords, out_dir / "coords" / (s.bag.slide_id + ".milc"));
        ManifestEntry e;
        e.slide_id = s.bag.slide_id;
        e.feature_path = "bags/" + s.bag.slide_id + ".milb";
        e.slide_label = s.slide_label;
        e.split = split;
        e.instance_label_path = "labels/" + s.bag.slide_id + ".mill";
        e.coords_path = "coords/" + s.bag.slide_id + ".milc";
        m.entries.push_back(std::move(e));

        for (int i = 0; i < s.bag.num_instances(); ++i) {
          Vector post = bayes_posterior(s.bag.features.row(i).transpose(), means, cfg.noise_sigma);
          int pred;
          post.maxCoeff(&pred);
          if (pred == (*s.bag.instance_labels)[static_cast<size_t>(i)]) ++bayes_hits;
          ++summary.total_instances;
        }
        if (split == "train") ++summary.num_train_slides;
        else ++summary.num_test_slides;
      }
    }
  };
  emit("train", cfg.train_slides_per_class);
  emit("test", cfg.test_slides_per_class);

  summary.bayes_accuracy = static_cast<double>(bayes_hits) / static_cast<double>(summary.total_instances);
  if (summary.bayes_accuracy < 0.55)
    warn(log, "synth: Bayes accuracy " + std::to_string(summary.bayes_accuracy) +
                  " is close to chance; consider raising class_separation");

  save_manifest(m, out_dir / "manifest.json");
  nlohmann::json sj{{"bayes_accuracy", summary.bayes_accuracy},
                    {"num_train_slides", summary.num_train_slides},
                    {"num_test_slides", summary.num_test_slides},
                    {"total_instances", summary.total_instances},
                    {"config", synth_config_to_json(cfg)}};
  std::ofstream os(out_dir / "summary.json");
  if (!os) throw RuntimeFailure("cannot write synth summary");
  os << sj.dump(2) << "\n";
  return summary;
}

}  // namespace milkit
