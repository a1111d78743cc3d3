// Acceptance harness: one verdict line per criterion, nonzero exit on any
// failure. Scratch data lives under the system temp directory.

#include <unistd.h>

#include <chrono>
#include <cmath>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <sstream>
#include <string>
#include <vector>

#include "milkit/milkit.hpp"

using namespace milkit;
namespace fs = std::filesystem;

namespace {

struct Verdict {
  bool pass = false;
  std::string detail;
};

double now_seconds() {
  using clock = std::chrono::steady_clock;
  static const clock::time_point t0 = clock::now();
  return std::chrono::duration<double>(clock::now() - t0).count();
}

std::string fmt(double v) {
  char buf[48];
  std::snprintf(buf, sizeof(buf), "%.4g", v);
  return buf;
}

bool files_equal(const fs::path& a, const fs::path& b) {
  std::ifstream fa(a, std::ios::binary), fb(b, std::ios::binary);
  if (!fa || !fb) return false;
  std::string sa((std::istreambuf_iterator<char>(fa)), std::istreambuf_iterator<char>());
  std::string sb((std::istreambuf_iterator<char>(fb)), std::istreambuf_iterator<char>());
  return !sa.empty() && sa == sb;
}

// ---------------------------------------------------------------- criterion 1
Verdict check_gradient_fidelity() {
  const auto start = std::chrono::steady_clock::now();
  double worst = 0.0;
  std::string worst_name;
  for (const char* name : {"dsmil", "clam", "mbdsmil", "dsmil_cl_pl", "mbdsmil_cl_pl"}) {
    double err = run_gradient_check(model_kind_from_string(name), 13);
    if (err > worst) {
      worst = err;
      worst_name = name;
    }
  }
  double secs = std::chrono::duration<double>(std::chrono::steady_clock::now() - start).count();
  Verdict v;
  v.pass = worst <= 1e-5 && secs < 10.0;
  v.detail = "max rel err " + fmt(worst) + " (" + worst_name + "), " + fmt(secs) + " s";
  return v;
}

// ---------------------------------------------------------------- criterion 2
Verdict check_augmentation_invariants() {
  Rng rng = substream({2026, 0x41});
  double worst_norm_dev = 0.0;
  int sign_flips = 0, identity_misses = 0;
  for (int trial = 0; trial < 1000; ++trial) {
    const int d = 4 + rng.uniform_int(29);
    Vector h(d);
    for (int i = 0; i < d; ++i) {
      double mag = rng.uniform(0.05, 3.0);
      h(i) = rng.u01() < 0.5 ? -mag : mag;
    }
    for (double eta : {0.05, 0.4}) {
      Rng noise = substream({99, static_cast<std::uint64_t>(trial), eta == 0.05 ? 0ull : 1ull});
      Vector out = simcl_noise(h, eta, noise);
      worst_norm_dev = std::max(worst_norm_dev, std::abs((out - h).norm() - eta));
      for (int i = 0; i < d; ++i)
        if (out(i) * h(i) <= 0.0) ++sign_flips;
    }
    Rng noise0 = substream({99, static_cast<std::uint64_t>(trial), 2});
    Vector same = simcl_noise(h, 0.0, noise0);
    for (int i = 0; i < d; ++i)
      if (same(i) != h(i)) ++identity_misses;
  }
  Verdict v;
  v.pass = worst_norm_dev <= 1e-10 && sign_flips == 0 && identity_misses == 0;
  v.detail = "max |norm-eta| " + fmt(worst_norm_dev) + ", sign flips " + std::to_string(sign_flips) +
             ", identity misses " + std::to_string(identity_misses);
  return v;
}

// ---------------------------------------------------------------- criterion 3
Verdict check_prototype_invariants(const fs::path& scratch) {
  // Unit norm across 10,000 EMA updates.
  PrototypeBank bank = init_prototypes(4, 16, 77);
  Rng rng = substream({2026, 0x43});
  double worst_norm = 0.0;
  for (int i = 0; i < 10000; ++i) {
    Vector h(16);
    for (int j = 0; j < 16; ++j) h(j) = rng.normal();
    h /= h.norm();
    prototype_ema_update(bank, rng.uniform_int(4), h);
    for (int c = 0; c < 4; ++c)
      worst_norm = std::max(worst_norm, std::abs(bank.mu.row(c).norm() - 1.0));
  }

  // Simplex preservation across 10,000 soft-label updates.
  Vector s(4);
  s << 0.25, 0.25, 0.25, 0.25;
  double worst_sum = 0.0, worst_min = 0.0;
  for (int i = 0; i < 10000; ++i) {
    s = momentum_update_label(s, rng.uniform_int(4), 0.8);
    worst_sum = std::max(worst_sum, std::abs(s.sum() - 1.0));
    worst_min = std::min(worst_min, s.minCoeff());
  }

  // Support confinement over a full training run.
  fs::path data = scratch / "confine_data";
  SynthConfig sc;
  sc.num_classes = 3;
  sc.feature_dim = 8;
  sc.train_slides_per_class = 4;
  sc.test_slides_per_class = 2;
  sc.min_instances = 6;
  sc.max_instances = 10;
  sc.class_separation = 4.0;
  sc.seed = 11;
  generate_dataset(sc, data);
  DatasetManifest m = load_manifest(data / "manifest.json");

  TrainConfig cfg;
  cfg.model = "mbdsmil_cl_pl";
  cfg.epochs = 5;
  cfg.warmup_epochs = 2;
  cfg.folds = 2;
  cfg.q_dim = 8;
  cfg.e_dim = 8;
  cfg.queue_capacity = 256;
  cfg.seed = 19;

  FoldAssignment fa = stratified_kfold(m, cfg.folds, cfg.seed);
  WarningLog log;
  FoldResult fr = train_fold(m, fa, 0, cfg, scratch / "confine_run", &log);

  std::map<std::string, int> slide_label;
  for (const auto& e : m.entries) slide_label[e.slide_id] = e.slide_label;
  const int normal = m.label_space.normal_index;
  double confinement_leak = 0.0, soft_sum_dev = 0.0;
  for (const auto& [id, rows] : fr.state.soft.labels) {
    int lbl = slide_label.at(id);
    for (int i = 0; i < rows.rows(); ++i) {
      soft_sum_dev = std::max(soft_sum_dev, std::abs(rows.row(i).sum() - 1.0));
      for (int c = 0; c < rows.cols(); ++c)
        if (c != lbl && c != normal) confinement_leak = std::max(confinement_leak, std::abs(rows(i, c)));
    }
  }
  double trained_norm_dev = 0.0;
  for (int c = 0; c < fr.state.proto.mu.rows(); ++c)
    trained_norm_dev = std::max(trained_norm_dev, std::abs(fr.state.proto.mu.row(c).norm() - 1.0));

  Verdict v;
  v.pass = worst_norm <= 1e-9 && worst_sum <= 1e-9 && worst_min >= 0.0 &&
           confinement_leak == 0.0 && soft_sum_dev <= 1e-9 && trained_norm_dev <= 1e-9;
  v.detail = "norm dev " + fmt(worst_norm) + ", simplex dev " + fmt(worst_sum) + ", min entry " +
             fmt(worst_min) + ", confinement leak " + fmt(confinement_leak) + ", trained norm dev " +
             fmt(trained_norm_dev);
  return v;
}

// ---------------------------------------------------------------- criterion 4
double brute_force_auc(const std::vector<double>& scores, const std::vector<int>& labels) {
  double num = 0.0;
  long long pairs = 0;
  for (size_t i = 0; i < scores.size(); ++i) {
    if (labels[i] != 1) continue;
    for (size_t j = 0; j < scores.size(); ++j) {
      if (labels[j] != 0) continue;
      ++pairs;
      if (scores[i] > scores[j]) num += 1.0;
      else if (scores[i] == scores[j]) num += 0.5;
    }
  }
  return num / static_cast<double>(pairs);
}

Verdict check_metric_oracles() {
  Rng rng = substream({2026, 0x44});
  int auc_mismatches = 0, f1_mismatches = 0, attention_mismatches = 0;

  for (int trial = 0; trial < 500; ++trial) {
    int n = 2 + rng.uniform_int(199);
    std::vector<double> scores(static_cast<size_t>(n));
    std::vector<int> labels(static_cast<size_t>(n));
    const bool quantise = trial % 2 == 0;  // force heavy ties on half the trials
    for (int i = 0; i < n; ++i) {
      double u = rng.u01();
      scores[static_cast<size_t>(i)] = quantise ? std::round(u * 8.0) / 8.0 : u;
      labels[static_cast<size_t>(i)] = rng.u01() < 0.5 ? 1 : 0;
    }
    labels[0] = 0;
    if (n > 1) labels[1] = 1;
    if (roc_auc(scores, labels) != brute_force_auc(scores, labels)) ++auc_mismatches;
  }

  for (int trial = 0; trial < 500; ++trial) {
    int n = 3 + rng.uniform_int(80);
    int c = 2 + rng.uniform_int(5);
    std::vector<int> preds(static_cast<size_t>(n)), gts(static_cast<size_t>(n));
    for (int i = 0; i < n; ++i) {
      preds[static_cast<size_t>(i)] = rng.uniform_int(c);
      gts[static_cast<size_t>(i)] = rng.uniform_int(c);
    }
    if (macro_f1(preds, gts, c) != macro_f1_from_confusion(confusion_matrix(preds, gts, c)))
      ++f1_mismatches;
  }

  for (int trial = 0; trial < 200; ++trial) {
    int n = 4 + rng.uniform_int(60);
    Vector att(n);
    std::vector<int> labels(static_cast<size_t>(n));
    for (int i = 0; i < n; ++i) {
      att(i) = rng.uniform(-5.0, 5.0);
      labels[static_cast<size_t>(i)] = rng.u01() < 0.5 ? 1 : 0;
    }
    labels[0] = 0;
    labels[1] = 1;
    if (attention_auc(att, labels, 1) != attention_auc(min_max_normalize(att), labels, 1))
      ++attention_mismatches;
  }

  Verdict v;
  v.pass = auc_mismatches == 0 && f1_mismatches == 0 && attention_mismatches == 0;
  v.detail = "auc mismatches " + std::to_string(auc_mismatches) + "/500, f1 mismatches " +
             std::to_string(f1_mismatches) + "/500, attention mismatches " +
             std::to_string(attention_mismatches) + "/200";
  return v;
}

// ---------------------------------------------------------------- criterion 5
Verdict check_synthetic_benchmark(const fs::path& scratch) {
  const auto start = std::chrono::steady_clock::now();
  std::cerr << "  [benchmark] generating dataset...\n";

  SynthConfig sc;
  sc.num_classes = 4;
  sc.feature_dim = 32;
  sc.train_slides_per_class = 30;
  sc.test_slides_per_class = 10;
  sc.min_instances = 40;
  sc.max_instances = 80;
  sc.min_tumor_fraction = 0.2;
  sc.max_tumor_fraction = 0.6;
  sc.class_separation = 4.3;  // lands Bayes instance accuracy ~0.96
  sc.noise_sigma = 1.0;
  sc.seed = 7;

  fs::path data = scratch / "bench_data";
  SynthSummary sy = generate_dataset(sc, data);
  DatasetManifest m = load_manifest(data / "manifest.json");

  // Oracle reference: posterior-based instance AUC on the test split.
  Matrix means = simplex_means(sc.num_classes, sc.feature_dim, sc.class_separation);
  std::vector<int> oracle_gts;
  std::vector<Vector> oracle_rows;
  for (const ManifestEntry* e : m.split_entries("test")) {
    FeatureBag bag = load_bag(m, *e);
    for (int i = 0; i < bag.features.rows(); ++i) {
      oracle_rows.push_back(bayes_posterior(bag.features.row(i).transpose(), means, sc.noise_sigma));
      oracle_gts.push_back((*bag.instance_labels)[static_cast<size_t>(i)]);
    }
  }
  Matrix oracle_scores(static_cast<int>(oracle_rows.size()), sc.num_classes);
  for (size_t i = 0; i < oracle_rows.size(); ++i)
    oracle_scores.row(static_cast<int>(i)) = oracle_rows[i].transpose();
  double bayes_auc = ovr_auc_macro(oracle_scores, oracle_gts);

  TrainConfig cfg;
  cfg.model = "mbdsmil_cl_pl";
  cfg.epochs = 60;
  cfg.warmup_epochs = 12;
  cfg.folds = 5;
  cfg.q_dim = 64;
  cfg.e_dim = 64;
  cfg.queue_capacity = 8192;
  cfg.learning_rate = 1e-4;
  cfg.weight_decay = 1e-3;
  cfg.tau = 0.07;
  cfg.seed = 20;

  WarningLog log;
  std::cerr << "  [benchmark] training mbdsmil_cl_pl (5-fold, 60 epochs)...\n";
  CvSummary full = run_cross_validation(m, cfg, scratch / "bench_clpl", &log);

  TrainConfig base_cfg = cfg;
  base_cfg.model = "dsmil";
  std::cerr << "  [benchmark] training dsmil baseline...\n";
  CvSummary base = run_cross_validation(m, base_cfg, scratch / "bench_dsmil", &log);

  double secs = std::chrono::duration<double>(std::chrono::steady_clock::now() - start).count();

  const double inst_gain = full.mean.at("instance_macro_f1") - base.mean.at("instance_macro_f1");
  const double slide_f1 = full.mean.at("slide_macro_f1");
  const double inst_auc = full.mean.at("instance_ovr_auc");
  const double att_auc = full.mean.at("attention_auc");

  Verdict v;
  const bool bayes_ok = sy.bayes_accuracy >= 0.90 && sy.bayes_accuracy <= 0.97;
  const bool a = inst_gain >= 0.05;
  const bool b = slide_f1 >= 0.90;
  const bool c = inst_auc >= 0.85 && inst_auc >= bayes_auc - 0.1;
  const bool d = att_auc >= 0.80;
  const bool t = secs <= 1800.0;
  v.pass = bayes_ok && a && b && c && d && t;
  std::ostringstream os;
  os << "bayes acc " << fmt(sy.bayes_accuracy) << (bayes_ok ? "" : " [OUT OF RANGE]")
     << "; inst F1 " << fmt(full.mean.at("instance_macro_f1")) << " vs baseline "
     << fmt(base.mean.at("instance_macro_f1")) << " (gain " << fmt(inst_gain) << (a ? "" : " <0.05!")
     << "); slide F1 " << fmt(slide_f1) << (b ? "" : " <0.90!") << "; inst AUC " << fmt(inst_auc)
     << " (oracle " << fmt(bayes_auc) << ")" << (c ? "" : " [FAIL]") << "; attention AUC "
     << fmt(att_auc) << (d ? "" : " <0.80!") << "; " << fmt(secs) << " s" << (t ? "" : " >1800!");
  v.detail = os.str();
  return v;
}

// ---------------------------------------------------------------- criterion 6
Verdict check_structural_equalities() {
  Rng rng = substream({2026, 0x46});

  // Tied projections: mbdsmil collapses onto dsmil.
  double tied_dev = 0.0;
  {
    ModelParams ds, mb;
    Rng r1 = substream({500, 1});
    Rng r2 = substream({500, 2});
    ds.init(ModelKind::dsmil, 3, 6, 4, 8, r1);
    mb.init(ModelKind::mbdsmil, 3, 6, 4, 8, r2);
    mb.mb.inst_w.value = ds.dsmil.inst_w.value;
    mb.mb.inst_b.value = ds.dsmil.inst_b.value;
    mb.mb.bag_w.value = ds.dsmil.bag_w.value;
    mb.mb.bag_b.value = ds.dsmil.bag_b.value;
    for (size_t c = 0; c < 3; ++c) {
      mb.mb.phi_w[c].value = ds.dsmil.query_w.value;
      mb.mb.phi_b[c].value = ds.dsmil.query_b.value;
    }
    for (int trial = 0; trial < 20; ++trial) {
      Matrix H(7, 6);
      for (int i = 0; i < 7; ++i)
        for (int j = 0; j < 6; ++j) H(i, j) = rng.normal();
      BagOutput a = evaluate_bag(ds, H);
      BagOutput b = evaluate_bag(mb, H);
      tied_dev = std::max(tied_dev, (a.bag_logits - b.bag_logits).cwiseAbs().maxCoeff());
      tied_dev = std::max(tied_dev, (a.attention - b.attention).cwiseAbs().maxCoeff());
      tied_dev = std::max(tied_dev, (a.inst_logits - b.inst_logits).cwiseAbs().maxCoeff());
    }
  }

  // Permutation invariance of bag logits.
  double perm_dev = 0.0;
  for (ModelKind kind : {ModelKind::dsmil, ModelKind::mbdsmil, ModelKind::clam}) {
    ModelParams p;
    Rng r = substream({501, static_cast<std::uint64_t>(kind)});
    p.init(kind, 3, 6, 4, 8, r);
    for (int trial = 0; trial < 10; ++trial) {
      const int n = 9;
      Matrix H(n, 6);
      for (int i = 0; i < n; ++i)
        for (int j = 0; j < 6; ++j) H(i, j) = rng.normal();
      std::vector<int> perm(n);
      for (int i = 0; i < n; ++i) perm[static_cast<size_t>(i)] = i;
      for (int i = n - 1; i > 0; --i)
        std::swap(perm[static_cast<size_t>(i)], perm[static_cast<size_t>(rng.uniform_int(i + 1))]);
      Matrix Hp(n, 6);
      for (int i = 0; i < n; ++i) Hp.row(i) = H.row(perm[static_cast<size_t>(i)]);
      BagOutput a = evaluate_bag(p, H);
      BagOutput b = evaluate_bag(p, Hp);
      perm_dev = std::max(perm_dev, (a.bag_logits - b.bag_logits).cwiseAbs().maxCoeff());
    }
  }

  // Exhaustive two-subtype slide rule grid vs a direct case split.
  int rule_mismatches = 0, rule_checked = 0;
  const double grid[3] = {-1.0, 0.0, 1.0};
  for (double a0 : grid)
    for (double a1 : grid)
      for (double b0 : grid)
        for (double b1 : grid) {
          Matrix pairs(2, 2);
          pairs << a0, a1, b0, b1;
          int expect;
          if (a0 > a1 && b0 > b1) expect = 2;        // every branch favours negative -> normal
          else expect = (b1 > a1) ? 1 : 0;           // otherwise best positive, ties low
          if (clam_predict(pairs, 2) != expect) ++rule_mismatches;
          ++rule_checked;
        }

  Verdict v;
  v.pass = tied_dev <= 1e-12 && perm_dev <= 1e-9 && rule_mismatches == 0;
  v.detail = "tied-projection dev " + fmt(tied_dev) + ", permutation dev " + fmt(perm_dev) +
             ", rule mismatches " + std::to_string(rule_mismatches) + "/" +
             std::to_string(rule_checked);
  return v;
}

// ---------------------------------------------------------------- criterion 7
Verdict check_determinism(const fs::path& scratch) {
  fs::path data = scratch / "det_data";
  SynthConfig sc;
  sc.num_classes = 3;
  sc.feature_dim = 8;
  sc.train_slides_per_class = 4;
  sc.test_slides_per_class = 2;
  sc.min_instances = 6;
  sc.max_instances = 10;
  sc.class_separation = 4.0;
  sc.seed = 29;
  generate_dataset(sc, data);
  DatasetManifest m = load_manifest(data / "manifest.json");

  TrainConfig cfg;
  cfg.model = "mbdsmil_cl_pl";
  cfg.epochs = 3;
  cfg.warmup_epochs = 1;
  cfg.folds = 2;
  cfg.q_dim = 8;
  cfg.e_dim = 8;
  cfg.queue_capacity = 256;
  cfg.seed = 37;

  WarningLog log;
  run_cross_validation(m, cfg, scratch / "det_a", &log);
  run_cross_validation(m, cfg, scratch / "det_b", &log);

  int mismatched = 0;
  std::vector<std::string> rel = {"summary.json",
                                  "fold0/checkpoint.milw", "fold0/checkpoint.milw.soft",
                                  "fold0/eval.json",       "fold0/epochs.jsonl",
                                  "fold1/checkpoint.milw", "fold1/checkpoint.milw.soft",
                                  "fold1/eval.json",       "fold1/epochs.jsonl"};
  for (const auto& r : rel)
    if (!files_equal(scratch / "det_a" / r, scratch / "det_b" / r)) ++mismatched;

  // Interrupt/resume against the uninterrupted run.
  FoldAssignment fa = stratified_kfold(m, cfg.folds, cfg.seed);
  train_fold(m, fa, 0, cfg, scratch / "det_full", &log);
  TrainConfig one = cfg;
  one.epochs = 1;
  FoldResult part = train_fold(m, fa, 0, one, scratch / "det_part", &log);
  train_fold(m, fa, 0, cfg, scratch / "det_part", &log, part.checkpoint_path.string());

  int resume_mismatched = 0;
  for (const std::string r : {"checkpoint.milw", "checkpoint.milw.soft", "epochs.jsonl"})
    if (!files_equal(scratch / "det_full" / r, scratch / "det_part" / r)) ++resume_mismatched;

  Verdict v;
  v.pass = mismatched == 0 && resume_mismatched == 0;
  v.detail = "repeat-run file mismatches " + std::to_string(mismatched) + "/" +
             std::to_string(rel.size()) + ", resume mismatches " +
             std::to_string(resume_mismatched) + "/3";
  return v;
}

}  // namespace

int main() {
  fs::path scratch = fs::temp_directory_path() / ("milkit_acceptance_" + std::to_string(::getpid()));
  fs::create_directories(scratch);

  struct Row {
    const char* name;
    Verdict verdict;
  };
  std::vector<Row> rows;

  std::cerr << "criterion 1/7: gradient fidelity\n";
  rows.push_back({"gradient fidelity (all variants, rel err <= 1e-5, < 10 s)", check_gradient_fidelity()});
  std::cerr << "criterion 2/7: augmentation invariants\n";
  rows.push_back({"augmentation invariants (norm = eta, sign-safe, eta=0 identity)", check_augmentation_invariants()});
  std::cerr << "criterion 3/7: prototype and pseudo-label invariants\n";
  rows.push_back({"prototype/pseudo-label invariants (unit norm, simplex, confinement)", check_prototype_invariants(scratch)});
  std::cerr << "criterion 4/7: metric oracles\n";
  rows.push_back({"metric oracles (auc == brute force, f1 from confusion, attention invariance)", check_metric_oracles()});
  std::cerr << "criterion 5/7: synthetic benchmark (several minutes)\n";
  rows.push_back({"synthetic benchmark ordering (instance gain, slide f1, auc, attention)", check_synthetic_benchmark(scratch)});
  std::cerr << "criterion 6/7: structural equalities\n";
  rows.push_back({"structural equalities (tied projections, permutation, slide rule grid)", check_structural_equalities()});
  std::cerr << "criterion 7/7: determinism\n";
  rows.push_back({"determinism (bitwise repeat runs and resume)", check_determinism(scratch)});

  int failures = 0;
  for (const Row& r : rows) {
    if (!r.verdict.pass) ++failures;
    std::cout << (r.verdict.pass ? "[PASS] " : "[FAIL] ") << r.name << " -- " << r.verdict.detail
              << "\n";
  }

  std::error_code ec;
  fs::remove_all(scratch, ec);
  return failures == 0 ? 0 : 1;
}
