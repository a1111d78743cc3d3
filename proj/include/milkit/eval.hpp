#pragma once

// Metrics and evaluation drivers: macro F1 with confusion matrices,
// Mann-Whitney ROC AUC (ties at half credit), one-vs-rest macro AUC,
// GT-vs-normal instance scoring, attention-map AUC, and heatmap export.
// Undefined metrics (a class entirely absent, degenerate pools) come back
// as NaN with a warning rather than a crash.

#include <algorithm>
#include <array>
#include <cmath>
#include <cstdint>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <limits>
#include <numeric>
#include <set>
#include <string>
#include <utility>
#include <vector>

#include <json.hpp>

#include "milkit/common.hpp"
#include "milkit/dataio.hpp"
#include "milkit/models.hpp"

namespace milkit {

inline constexpr double kNan = std::numeric_limits<double>::quiet_NaN();

inline MatrixI confusion_matrix(const std::vector<int>& preds, const std::vector<int>& gts,
                                int num_classes) {
  if (preds.size() != gts.size() || preds.empty())
    throw ValidationError("confusion_matrix: empty or mismatched inputs");
  MatrixI m = MatrixI::Zero(num_classes, num_classes);
  for (size_t i = 0; i < preds.size(); ++i) {
    if (gts[i] < 0 || gts[i] >= num_classes || preds[i] < 0 || preds[i] >= num_classes)
      throw ValidationError("confusion_matrix: label out of range");
    m(gts[i], preds[i]) += 1;  // rows: ground truth, cols: prediction
  }
  return m;
}

/// Unweighted mean of per-class F1. A class with no true and no predicted
/// members contributes F1 = 0 and still counts toward the average.
inline double macro_f1_from_confusion(const MatrixI& m) {
  double sum = 0.0;
  for (int c = 0; c < m.rows(); ++c) {
    double tp = m(c, c);
    double fn = m.row(c).sum() - tp;
    double fp = m.col(c).sum() - tp;
    double denom = 2.0 * tp + fp + fn;
    sum += denom > 0.0 ? 2.0 * tp / denom : 0.0;
  }
  return sum / m.rows();
}

inline double macro_f1(const std::vector<int>& preds, const std::vector<int>& gts, int num_classes) {
  return macro_f1_from_confusion(confusion_matrix(preds, gts, num_classes));
}

/// Mann-Whitney statistic: P(score+ > score-) + 0.5 P(equal). Computed by a
/// sorted sweep over tie groups; the pair count is a half-integer, so the
/// result is bit-identical to brute-force pair counting.
inline double roc_auc(const std::vector<double>& scores, const std::vector<int>& labels,
                      WarningLog* log = nullptr) {
  if (scores.size() != labels.size() || scores.empty())
    throw ValidationError("roc_auc: empty or mismatched inputs");
  long long npos = 0, nneg = 0;
  for (int l : labels) (l != 0 ? npos : nneg)++;
  if (npos == 0 || nneg == 0) {
    warn(log, "roc_auc: only one class present; AUC undefined");
    return kNan;
  }
  std::vector<int> idx(scores.size());
  std::iota(idx.begin(), idx.end(), 0);
  std::sort(idx.begin(), idx.end(), [&](int a, int b) { return scores[static_cast<size_t>(a)] < scores[static_cast<size_t>(b)]; });
  double pairs = 0.0;
  long long neg_below = 0;
  size_t i = 0;
  while (i < idx.size()) {
    size_t j = i;
    long long pos_here = 0, neg_here = 0;
    while (j < idx.size() &&
           scores[static_cast<size_t>(idx[j])] == scores[static_cast<size_t>(idx[i])]) {
      (labels[static_cast<size_t>(idx[j])] != 0 ? pos_here : neg_here)++;
      ++j;
    }
    pairs += static_cast<double>(pos_here) * static_cast<double>(neg_below) +
             0.5 * static_cast<double>(pos_here) * static_cast<double>(neg_here);
    neg_below += neg_here;
    i = j;
  }
  return pairs / (static_cast<double>(npos) * static_cast<double>(nneg));
}

/// Macro average of per-class one-vs-rest AUCs; classes absent from the
/// ground truth (or covering it entirely) are skipped with a warning.
inline double ovr_auc_macro(const Matrix& scores, const std::vector<int>& gts,
                            WarningLog* log = nullptr) {
  if (static_cast<size_t>(scores.rows()) != gts.size() || gts.empty())
    throw ValidationError("ovr_auc_macro: empty or mismatched inputs");
  double sum = 0.0;
  int counted = 0;
  for (int c = 0; c < scores.cols(); ++c) {
    std::vector<double> col(static_cast<size_t>(scores.rows()));
    std::vector<int> bin(static_cast<size_t>(scores.rows()));
    bool any = false, all = true;
    for (int r = 0; r < scores.rows(); ++r) {
      col[static_cast<size_t>(r)] = scores(r, c);
      bin[static_cast<size_t>(r)] = gts[static_cast<size_t>(r)] == c ? 1 : 0;
      any = any || bin[static_cast<size_t>(r)];
      all = all && bin[static_cast<size_t>(r)];
    }
    if (!any || all) {
      warn(log, "ovr_auc_macro: class " + std::to_string(c) + " skipped (absent or universal)");
      continue;
    }
    sum += roc_auc(col, bin, log);
    ++counted;
  }
  if (counted == 0) {
    warn(log, "ovr_auc_macro: no class had both positives and negatives");
    return kNan;
  }
  return sum / counted;
}

struct GtVsNormal {
  std::vector<double> scores;  // logit[slide class] - logit[normal]
  std::vector<int> preds;      // 1 = slide class, 0 = normal; ties to normal
};

inline GtVsNormal gt_vs_normal(const Matrix& inst_scores, int slide_label, int normal_index) {
  if (slide_label == normal_index) throw ValidationError("gt_vs_normal: tumor slides only");
  GtVsNormal out;
  for (int j = 0; j < inst_scores.rows(); ++j) {
    double s = inst_scores(j, slide_label) - inst_scores(j, normal_index);
    out.scores.push_back(s);
    out.preds.push_back(s > 0.0 ? 1 : 0);
  }
  return out;
}

/// Scale to [0,1]; a constant vector maps to all 0.5 (neutral — it can't
/// order anything anyway).
inline Vector min_max_normalize(const Vector& v) {
  double lo = v.minCoeff(), hi = v.maxCoeff();
  if (hi == lo) return Vector::Constant(v.size(), 0.5);
  return ((v.array() - lo) / (hi - lo)).matrix();
}

/// Per-slide attention AUC on the slide-class branch: min-max normalise,
/// then AUC of tumor (instance label == slide label) vs everything else.
inline double attention_auc(const Vector& attention, const std::vector<int>& inst_labels,
                            int slide_label, WarningLog* log = nullptr) {
  if (attention.size() != static_cast<Eigen::Index>(inst_labels.size()))
    throw ValidationError("attention_auc: length mismatch");
  Vector norm = min_max_normalize(attention);
  std::vector<double> scores(static_cast<size_t>(norm.size()));
  std::vector<int> bin(static_cast<size_t>(norm.size()));
  for (int j = 0; j < norm.size(); ++j) {
    scores[static_cast<size_t>(j)] = norm(j);
    bin[static_cast<size_t>(j)] = inst_labels[static_cast<size_t>(j)] == slide_label ? 1 : 0;
  }
  return roc_auc(scores, bin, log);
}

struct SlidePrediction {
  std::string slide_id;
  int label = -1;
  int pred = -1;
};

struct EvalReport {
  double slide_macro_f1 = kNan;
  double slide_ovr_auc = kNan;
  double instance_macro_f1 = kNan;
  double instance_ovr_auc = kNan;
  double gt_vs_normal_f1 = kNan;
  double gt_vs_normal_auc = kNan;
  double attention_auc = kNan;
  MatrixI slide_confusion;
  MatrixI instance_confusion;
  bool has_instance_metrics = false;
  std::vector<SlidePrediction> slides;

  nlohmann::json to_json() const {
    auto num = [](double v) { return std::isfinite(v) ? nlohmann::json(v) : nlohmann::json(nullptr); };
    auto mat = [](const MatrixI& m) {
      nlohmann::json rows = nlohmann::json::array();
      for (int r = 0; r < m.rows(); ++r) {
        nlohmann::json row = nlohmann::json::array();
        for (int c = 0; c < m.cols(); ++c) row.push_back(m(r, c));
        rows.push_back(row);
      }
      return rows;
    };
    nlohmann::json j{{"slide_macro_f1", num(slide_macro_f1)},
                     {"slide_ovr_auc", num(slide_ovr_auc)},
                     {"instance_macro_f1", num(instance_macro_f1)},
                     {"instance_ovr_auc", num(instance_ovr_auc)},
                     {"gt_vs_normal_f1", num(gt_vs_normal_f1)},
                     {"gt_vs_normal_auc", num(gt_vs_normal_auc)},
                     {"attention_auc", num(attention_auc)},
                     {"slide_confusion", mat(slide_confusion)}};
    if (has_instance_metrics) j["instance_confusion"] = mat(instance_confusion);
    nlohmann::json preds = nlohmann::json::array();
    for (const auto& s : slides)
      preds.push_back({{"slide_id", s.slide_id}, {"label", s.label}, {"pred", s.pred}});
    j["slides"] = preds;
    return j;
  }
};

namespace detail {

inline int argmax_row(const Matrix& m, int r) {
  int best = 0;
  for (int c = 1; c < m.cols(); ++c)
    if (m(r, c) > m(r, best)) best = c;
  return best;
}

}  // namespace detail

/// Full metric sweep over one manifest split. Instance-level metrics need
/// instance labels on every bag of the split; otherwise they stay NaN.
inline EvalReport evaluate_model(ModelParams& params, const DatasetManifest& m,
                                 const std::string& split, WarningLog* log = nullptr) {
  auto entries = m.split_entries(split);
  if (entries.empty()) throw ValidationError("evaluate_model: no slides in split '" + split + "'");
  const int c = m.label_space.num_classes();
  const int normal = m.label_space.normal_index;

  std::vector<int> slide_preds, slide_gts;
  Matrix slide_scores(static_cast<int>(entries.size()), c);
  std::vector<int> inst_preds, inst_gts;
  std::vector<Matrix> inst_score_blocks;
  std::vector<double> gvn_scores;
  std::vector<int> gvn_preds, gvn_gts;
  std::vector<double> att_scores;
  std::vector<int> att_gts;
  bool all_have_instance_labels = true;

  EvalReport report;
  int row = 0;
  for (const ManifestEntry* e : entries) {
    FeatureBag bag = load_bag(m, *e);
    BagOutput out = evaluate_bag(params, bag.features);

    slide_gts.push_back(e->slide_label);
    slide_preds.push_back(predict_slide(out, params.kind, normal));
    slide_scores.row(row++) = softmax_rows(out.bag_logits.transpose()).row(0);
    report.slides.push_back({e->slide_id, e->slide_label, slide_preds.back()});

    if (!bag.instance_labels) {
      all_have_instance_labels = false;
      continue;
    }
    const std::vector<int>& il = *bag.instance_labels;
    inst_score_blocks.push_back(out.instance_scores);
    for (int j = 0; j < bag.num_instances(); ++j) {
      inst_preds.push_back(detail::argmax_row(out.instance_scores, j));
      inst_gts.push_back(il[static_cast<size_t>(j)]);
    }
    if (e->slide_label != normal) {
      // GT-vs-normal restricted scores over the tumor slides' instances.
      const Matrix& basis = out.inst_logits.size() > 0 ? out.inst_logits : out.instance_scores;
      GtVsNormal g = gt_vs_normal(basis, e->slide_label, normal);
      for (int j = 0; j < bag.num_instances(); ++j) {
        gvn_scores.push_back(g.scores[static_cast<size_t>(j)]);
        gvn_preds.push_back(g.preds[static_cast<size_t>(j)]);
        gvn_gts.push_back(il[static_cast<size_t>(j)] == e->slide_label ? 1 : 0);
      }
      // Attention pool: per-slide min-max normalisation makes the scales
      // commensurable before pooling across slides.
      bool has_pos = false, has_neg = false;
      for (int l : il) (l == e->slide_label ? has_pos : has_neg) = true;
      if (has_pos && has_neg) {
        Vector a = min_max_normalize(out.attention.row(e->slide_label).transpose());
        for (int j = 0; j < bag.num_instances(); ++j) {
          att_scores.push_back(a(j));
          att_gts.push_back(il[static_cast<size_t>(j)] == e->slide_label ? 1 : 0);
        }
      } else {
        warn(log, "evaluate_model: slide " + e->slide_id +
                      " lacks a tumor/non-tumor mix; skipped for attention AUC");
      }
    }
  }

  report.slide_confusion = confusion_matrix(slide_preds, slide_gts, c);
  report.slide_macro_f1 = macro_f1_from_confusion(report.slide_confusion);
  report.slide_ovr_auc = ovr_auc_macro(slide_scores, slide_gts, log);

  if (all_have_instance_labels && !inst_gts.empty()) {
    report.has_instance_metrics = true;
    Matrix pooled(static_cast<int>(inst_gts.size()), c);
    int r = 0;
    for (const Matrix& blk : inst_score_blocks) {
      pooled.middleRows(r, static_cast<int>(blk.rows())) = blk;
      r += static_cast<int>(blk.rows());
    }
    report.instance_confusion = confusion_matrix(inst_preds, inst_gts, c);
    report.instance_macro_f1 = macro_f1_from_confusion(report.instance_confusion);
    report.instance_ovr_auc = ovr_auc_macro(pooled, inst_gts, log);
    if (!gvn_gts.empty()) {
      report.gt_vs_normal_f1 = macro_f1(gvn_preds, gvn_gts, 2);
      report.gt_vs_normal_auc = roc_auc(gvn_scores, gvn_gts, log);
    }
    if (!att_gts.empty()) report.attention_auc = roc_auc(att_scores, att_gts, log);
  } else if (!all_have_instance_labels) {
    warn(log, "evaluate_model: some bags lack instance labels; instance metrics omitted");
  }
  return report;
}

inline void export_heatmap_csv(const std::vector<std::array<std::uint32_t, 2>>& coords,
                               const Vector& scores, const std::filesystem::path& path) {
  if (static_cast<Eigen::Index>(coords.size()) != scores.size())
    throw ValidationError("export_heatmap: coordinate/score count mismatch");
  if (coords.empty()) throw ValidationError("export_heatmap: missing coordinates");
  std::ofstream os(path);
  if (!os) throw RuntimeFailure("cannot write heatmap: " + path.string());
  os << "row,col,score\n";
  char buf[64];
  for (size_t i = 0; i < coords.size(); ++i) {
    std::snprintf(buf, sizeof(buf), "%.17g", scores(static_cast<Eigen::Index>(i)));
    os << coords[i][0] << "," << coords[i][1] << "," << buf << "\n";
  }
}

/// Binary P5 PGM over the coordinate grid: scores min-max scaled to 0..255
/// (floor), empty cells black. A constant map renders all 255 and is logged.
inline void export_heatmap_pgm(const std::vector<std::array<std::uint32_t, 2>>& coords,
                               const Vector& scores, const std::filesystem::path& path,
                               WarningLog* log = nullptr) {
  if (static_cast<Eigen::Index>(coords.size()) != scores.size())
    throw ValidationError("export_heatmap: coordinate/score count mismatch");
  if (coords.empty()) throw ValidationError("export_heatmap: missing coordinates");
  std::uint32_t h = 0, w = 0;
  {
    std::set<std::pair<std::uint32_t, std::uint32_t>> seen;
    for (const auto& rc : coords) {
      if (!seen.insert({rc[0], rc[1]}).second)
        throw ValidationError("export_heatmap: coordinate collision");
      h = std::max(h, rc[0] + 1);
      w = std::max(w, rc[1] + 1);
    }
  }
  double lo = scores.minCoeff(), hi = scores.maxCoeff();
  bool constant = hi == lo;
  if (constant) warn(log, "export_heatmap: constant scores; rendering full intensity");
  std::vector<unsigned char> px(static_cast<size_t>(h) * w, 0);
  for (size_t i = 0; i < coords.size(); ++i) {
    double v = constant ? 255.0
                        : std::floor((scores(static_cast<Eigen::Index>(i)) - lo) / (hi - lo) * 255.0);
    px[static_cast<size_t>(coords[i][0]) * w + coords[i][1]] = static_cast<unsigned char>(v);
  }
  std::ofstream os(path, std::ios::binary);
  if (!os) throw RuntimeFailure("cannot write heatmap: " + path.string());
  os << "P5\n" << w << " " << h << "\n255\n";
  os.write(reinterpret_cast<const char*>(px.data()), static_cast<std::streamsize>(px.size()));
}

}  // namespace milkit
