#pragma once

// Training loop: composite loss (bag cross-entropy + instance supervision +
// contrastive), AdamW with decoupled decay, balanced bag sampling,
// stratified cross-validation, rolling per-epoch checkpoints, and a
// finite-difference gradient checker that reuses the exact training loss.
//
// Determinism contract: every random draw comes from a substream keyed by
// (seed, fold, epoch, slide, purpose), so a resumed run replays the same
// stream without serialising generator state, and (config, seed) fully
// determine every artifact.

#include <cmath>
#include <filesystem>
#include <fstream>
#include <map>
#include <optional>
#include <string>
#include <vector>

#include <json.hpp>

#include "milkit/archive.hpp"
#include "milkit/augment.hpp"
#include "milkit/autodiff.hpp"
#include "milkit/common.hpp"
#include "milkit/contrastive.hpp"
#include "milkit/dataio.hpp"
#include "milkit/eval.hpp"
#include "milkit/models.hpp"
#include "milkit/prototypes.hpp"
#include "milkit/rng.hpp"

namespace milkit {

struct TrainConfig {
  std::string model = "mbdsmil_cl_pl";
  std::string manifest;  // dataset manifest path
  int fold = 0;          // train subcommand: which fold to hold out
  std::string resume;    // optional checkpoint to continue from
  std::string checkpoint;  // eval/heatmap: checkpoint to load
  std::string split = "test";
  std::string slide;  // heatmap target slide
  std::string heatmap_mode = "pgm";
  std::string heatmap_score = "attention";  // attention | instance | gt_vs_normal
  int epochs = 100;
  int warmup_epochs = 20;
  int folds = 5;
  int q_dim = 64;
  int e_dim = 1024;
  int clam_hidden = 128;
  int clam_k = 8;
  int queue_capacity = 8192;
  double learning_rate = 1e-4;
  double weight_decay = 1e-3;
  double tau = 0.07;
  double proto_momentum = 0.9;
  double label_momentum = 0.8;
  double momentum_k = 0.99;
  double lambda_bag = 1.0;
  double lambda_inst = 1.0;
  double lambda_con = 1.0;
  double tumor_prior = 0.5;
  std::string label_source = "prototype";  // prototype | classifier
  AugmentConfig augment;
  std::uint64_t seed = 1;

  ModelKind kind() const { return model_kind_from_string(model); }

  void validate() const {
    model_kind_from_string(model);
    if (epochs < 0 || warmup_epochs < 0 || warmup_epochs > epochs)
      throw ValidationError("config: need 0 <= warmup_epochs <= epochs");
    if (folds < 2) throw ValidationError("config: folds must be >= 2");
    if (fold < 0 || fold >= folds) throw ValidationError("config: fold out of range");
    if (q_dim < 1 || e_dim < 1 || clam_hidden < 1) throw ValidationError("config: dims must be >= 1");
    if (clam_k < 1) throw ValidationError("config: k must be >= 1");
    if (queue_capacity < 1) throw ValidationError("config: queue_capacity must be >= 1");
    if (learning_rate <= 0.0) throw ValidationError("config: learning_rate must be > 0");
    if (weight_decay < 0.0) throw ValidationError("config: weight_decay must be >= 0");
    if (tau <= 0.0) throw ValidationError("config: tau must be > 0");
    for (double m : {proto_momentum, label_momentum, momentum_k})
      if (m < 0.0 || m > 1.0) throw ValidationError("config: momenta must be in [0, 1]");
    if (lambda_bag < 0.0 || lambda_inst < 0.0 || lambda_con < 0.0)
      throw ValidationError("config: loss weights must be >= 0");
    if (tumor_prior <= 0.0 || tumor_prior >= 1.0)
      throw ValidationError("config: tumor_prior must be in (0, 1)");
    if (label_source != "prototype" && label_source != "classifier")
      throw ValidationError("config: label_source must be prototype|classifier");
    if (heatmap_mode != "pgm" && heatmap_mode != "csv")
      throw ValidationError("config: heatmap_mode must be pgm|csv");
    if (heatmap_score != "attention" && heatmap_score != "instance" && heatmap_score != "gt_vs_normal")
      throw ValidationError("config: heatmap_score must be attention|instance|gt_vs_normal");
    if (split != "train" && split != "test") throw ValidationError("config: split must be train|test");
    augment.validate();
  }
};

inline TrainConfig train_config_from_json(const nlohmann::json& doc) {
  TrainConfig cfg;
  for (const auto& [key, _] : doc.items()) {
    if (key == "model") cfg.model = doc[key].get<std::string>();
    else if (key == "manifest") cfg.manifest = doc[key].get<std::string>();
    else if (key == "fold") cfg.fold = doc[key].get<int>();
    else if (key == "resume") cfg.resume = doc[key].get<std::string>();
    else if (key == "checkpoint") cfg.checkpoint = doc[key].get<std::string>();
    else if (key == "split") cfg.split = doc[key].get<std::string>();
    else if (key == "slide") cfg.slide = doc[key].get<std::string>();
    else if (key == "heatmap_mode") cfg.heatmap_mode = doc[key].get<std::string>();
    else if (key == "heatmap_score") cfg.heatmap_score = doc[key].get<std::string>();
    else if (key == "epochs") cfg.epochs = doc[key].get<int>();
    else if (key == "warmup_epochs") cfg.warmup_epochs = doc[key].get<int>();
    else if (key == "folds") cfg.folds = doc[key].get<int>();
    else if (key == "q_dim") cfg.q_dim = doc[key].get<int>();
    else if (key == "e_dim") cfg.e_dim = doc[key].get<int>();
    else if (key == "clam_hidden") cfg.clam_hidden = doc[key].get<int>();
    else if (key == "clam_k") cfg.clam_k = doc[key].get<int>();
    else if (key == "queue_capacity") cfg.queue_capacity = doc[key].get<int>();
    else if (key == "learning_rate") cfg.learning_rate = doc[key].get<double>();
    else if (key == "weight_decay") cfg.weight_decay = doc[key].get<double>();
    else if (key == "tau") cfg.tau = doc[key].get<double>();
    else if (key == "proto_momentum") cfg.proto_momentum = doc[key].get<double>();
    else if (key == "label_momentum") cfg.label_momentum = doc[key].get<double>();
    else if (key == "momentum_k") cfg.momentum_k = doc[key].get<double>();
    else if (key == "lambda_bag") cfg.lambda_bag = doc[key].get<double>();
    else if (key == "lambda_inst") cfg.lambda_inst = doc[key].get<double>();
    else if (key == "lambda_con") cfg.lambda_con = doc[key].get<double>();
    else if (key == "tumor_prior") cfg.tumor_prior = doc[key].get<double>();
    else if (key == "label_source") cfg.label_source = doc[key].get<std::string>();
    else if (key == "augment") augment_config_from_json(doc[key], cfg.augment);
    else if (key == "seed") cfg.seed = doc[key].get<std::uint64_t>();
    else throw ValidationError("train config: unknown key '" + key + "'");
  }
  cfg.validate();
  return cfg;
}

inline nlohmann::json train_config_to_json(const TrainConfig& cfg) {
  return nlohmann::json{{"model", cfg.model},
                        {"manifest", cfg.manifest},
                        {"fold", cfg.fold},
                        {"resume", cfg.resume},
                        {"checkpoint", cfg.checkpoint},
                        {"split", cfg.split},
                        {"slide", cfg.slide},
                        {"heatmap_mode", cfg.heatmap_mode},
                        {"heatmap_score", cfg.heatmap_score},
                        {"epochs", cfg.epochs},
                        {"warmup_epochs", cfg.warmup_epochs},
                        {"folds", cfg.folds},
                        {"q_dim", cfg.q_dim},
                        {"e_dim", cfg.e_dim},
                        {"clam_hidden", cfg.clam_hidden},
                        {"clam_k", cfg.clam_k},
                        {"queue_capacity", cfg.queue_capacity},
                        {"learning_rate", cfg.learning_rate},
                        {"weight_decay", cfg.weight_decay},
                        {"tau", cfg.tau},
                        {"proto_momentum", cfg.proto_momentum},
                        {"label_momentum", cfg.label_momentum},
                        {"momentum_k", cfg.momentum_k},
                        {"lambda_bag", cfg.lambda_bag},
                        {"lambda_inst", cfg.lambda_inst},
                        {"lambda_con", cfg.lambda_con},
                        {"tumor_prior", cfg.tumor_prior},
                        {"label_source", cfg.label_source},
                        {"augment", augment_config_to_json(cfg.augment)},
                        {"seed", cfg.seed}};
}

/// Adam with decoupled weight decay. Decay multiplies the pre-step value and
/// skips parameters flagged decay=false (biases).
struct AdamState {
  struct Slot {
    Matrix m, v;
  };
  std::vector<Slot> slots;
  long long step = 0;
  static constexpr double beta1 = 0.9;
  static constexpr double beta2 = 0.999;
  static constexpr double eps = 1e-8;

  void init(const std::vector<ad::Parameter*>& params) {
    slots.clear();
    step = 0;
    for (const ad::Parameter* p : params)
      slots.push_back({Matrix::Zero(p->value.rows(), p->value.cols()),
                       Matrix::Zero(p->value.rows(), p->value.cols())});
  }
};

inline void adam_step(const std::vector<ad::Parameter*>& params, AdamState& st, double lr,
                      double weight_decay) {
  if (params.size() != st.slots.size()) throw RuntimeFailure("adam_step: state/parameter mismatch");
  ++st.step;
  const double bc1 = 1.0 - std::pow(AdamState::beta1, static_cast<double>(st.step));
  const double bc2 = 1.0 - std::pow(AdamState::beta2, static_cast<double>(st.step));
  for (size_t i = 0; i < params.size(); ++i) {
    ad::Parameter& p = *params[i];
    if (!all_finite(p.grad)) throw RuntimeFailure("adam_step: non-finite gradient in " + p.name);
    AdamState::Slot& s = st.slots[i];
    s.m = AdamState::beta1 * s.m + (1.0 - AdamState::beta1) * p.grad;
    s.v = AdamState::beta2 * s.v + (1.0 - AdamState::beta2) * p.grad.cwiseProduct(p.grad);
    Matrix update = (s.m / bc1).array() / ((s.v / bc2).array().sqrt() + AdamState::eps);
    if (p.decay && weight_decay > 0.0) update += weight_decay * p.value;
    p.value -= lr * update;
  }
}

struct TrainSlide {
  std::string slide_id;
  int label = -1;
  Matrix features;
};

struct TrainState {
  ModelParams model;
  ContrastiveState con;  // live only for *_cl_pl models
  PrototypeBank proto;
  SoftLabelStore soft;
  AdamState opt;
  int fold = 0;
  int epochs_done = 0;

  bool contrastive_active() const { return uses_prototypes(model.kind); }

  std::vector<ad::Parameter*> trainable() {
    std::vector<ad::Parameter*> ps = model.all();
    if (contrastive_active())
      for (ad::Parameter* p : con.gq.all()) ps.push_back(p);
    return ps;
  }
};

inline TrainState init_train_state(const TrainConfig& cfg, const DatasetManifest& m, int fold,
                                   const std::vector<const ManifestEntry*>& train_entries) {
  TrainState st;
  st.fold = fold;
  const int c = m.label_space.num_classes();
  Rng model_rng = substream({cfg.seed, 0x10de1ULL, static_cast<std::uint64_t>(fold)});
  st.model.init(cfg.kind(), c, m.feature_dim, cfg.q_dim, cfg.clam_hidden, model_rng);
  if (st.contrastive_active()) {
    Rng proj_rng = substream({cfg.seed, 0x6e0aULL, static_cast<std::uint64_t>(fold)});
    st.con.init(m.feature_dim, cfg.e_dim, cfg.queue_capacity, proj_rng);
    st.proto = init_prototypes(c, cfg.e_dim,
                               mix_key({cfg.seed, 0x5270ULL, static_cast<std::uint64_t>(fold)}),
                               cfg.proto_momentum);
    st.soft = init_soft_labels(m, train_entries, cfg.label_momentum, cfg.tumor_prior);
  }
  st.opt.init(st.trainable());
  return st;
}

inline void save_checkpoint(TrainState& st, const TrainConfig& cfg,
                            const std::filesystem::path& path) {
  TensorArchive ar;
  ar.put_scalar("meta/format", 1.0);
  ar.put_scalar("meta/model_kind", static_cast<double>(st.model.kind));
  ar.put_scalar("meta/num_classes", st.model.num_classes);
  ar.put_scalar("meta/dim", st.model.dim);
  ar.put_scalar("meta/q_dim", st.model.q_dim);
  ar.put_scalar("meta/clam_hidden", st.model.clam_hidden);
  ar.put_scalar("meta/e_dim", cfg.e_dim);
  ar.put_scalar("meta/fold", st.fold);
  ar.put_scalar("meta/epochs_done", st.epochs_done);
  ar.put_scalar("meta/seed_lo", static_cast<double>(static_cast<std::uint32_t>(cfg.seed)));
  ar.put_scalar("meta/seed_hi", static_cast<double>(static_cast<std::uint32_t>(cfg.seed >> 32)));
  auto params = st.trainable();
  for (ad::Parameter* p : params) ar.put("param/" + p->name, p->value);
  ar.put_scalar("adam/step", static_cast<double>(st.opt.step));
  for (size_t i = 0; i < params.size(); ++i) {
    ar.put("adam/" + params[i]->name + ".m", st.opt.slots[i].m);
    ar.put("adam/" + params[i]->name + ".v", st.opt.slots[i].v);
  }
  if (st.contrastive_active()) {
    ar.put("gk/w1", st.con.gk.w1);
    ar.put("gk/b1", st.con.gk.b1);
    ar.put("gk/w2", st.con.gk.w2);
    ar.put("gk/b2", st.con.gk.b2);
    ar.put("proto/mu", st.proto.mu);
    ar.put_scalar("proto/momentum", st.proto.momentum);
    ar.put("queue/keys", st.con.queue.keys());
    Vector qlabels(st.con.queue.size());
    auto labels = st.con.queue.labels();
    for (int i = 0; i < st.con.queue.size(); ++i) qlabels(i) = labels[static_cast<size_t>(i)];
    ar.put("queue/labels", qlabels);
    save_soft_labels(st.soft, path.string() + ".soft");
  }
  ar.save(path);
}

inline TrainState load_checkpoint(const std::filesystem::path& path, const TrainConfig& cfg,
                                  const DatasetManifest& m,
                                  const std::vector<const ManifestEntry*>& train_entries) {
  TensorArchive ar = TensorArchive::load(path);
  int fold = static_cast<int>(ar.get_scalar("meta/fold"));
  TrainState st = init_train_state(cfg, m, fold, train_entries);
  if (static_cast<int>(ar.get_scalar("meta/model_kind")) != static_cast<int>(st.model.kind))
    throw ValidationError("checkpoint: model kind does not match config");
  if (static_cast<int>(ar.get_scalar("meta/num_classes")) != st.model.num_classes ||
      static_cast<int>(ar.get_scalar("meta/dim")) != st.model.dim)
    throw ValidationError("checkpoint: dataset shape does not match manifest");
  if (static_cast<int>(ar.get_scalar("meta/q_dim")) != st.model.q_dim ||
      static_cast<int>(ar.get_scalar("meta/e_dim")) != cfg.e_dim)
    throw ValidationError("checkpoint: embedding dims do not match config");
  st.epochs_done = static_cast<int>(ar.get_scalar("meta/epochs_done"));

  auto params = st.trainable();
  for (ad::Parameter* p : params) {
    const Matrix& v = ar.get("param/" + p->name);
    if (v.rows() != p->value.rows() || v.cols() != p->value.cols())
      throw ValidationError("checkpoint: shape mismatch for " + p->name);
    p->value = v;
  }
  st.opt.step = static_cast<long long>(ar.get_scalar("adam/step"));
  for (size_t i = 0; i < params.size(); ++i) {
    st.opt.slots[i].m = ar.get("adam/" + params[i]->name + ".m");
    st.opt.slots[i].v = ar.get("adam/" + params[i]->name + ".v");
  }
  if (st.contrastive_active()) {
    st.con.gk.w1 = ar.get("gk/w1");
    st.con.gk.b1 = ar.get("gk/b1");
    st.con.gk.w2 = ar.get("gk/w2");
    st.con.gk.b2 = ar.get("gk/b2");
    st.proto.mu = ar.get("proto/mu");
    st.proto.momentum = ar.get_scalar("proto/momentum");
    Matrix qkeys = ar.get("queue/keys");
    Vector qlabels = ar.get_vector("queue/labels");
    std::vector<int> labels(static_cast<size_t>(qlabels.size()));
    for (int i = 0; i < qlabels.size(); ++i) labels[static_cast<size_t>(i)] = static_cast<int>(qlabels(i));
    if (qkeys.rows() > 0) st.con.queue.restore(qkeys, labels);
    st.soft = load_soft_labels(path.string() + ".soft");
  }
  return st;
}

struct StepLosses {
  double bag = 0.0, inst = 0.0, con = 0.0, total = 0.0;
};

namespace detail {

struct BuiltLoss {
  ad::Var total;
  StepLosses values;
  ad::Var anchors;                  // weak projections (cl_pl only)
  Matrix keys;                      // strong keys through g_k (cl_pl only)
  std::vector<int> labels_snapshot; // pseudo-labels used for this step
};

inline int pseudo_label_of(const TrainState& st, const TrainConfig& cfg, const Matrix& inst_logits,
                           const std::string& slide_id, int instance) {
  if (cfg.label_source == "classifier") {
    int best = 0;
    for (int c = 1; c < inst_logits.cols(); ++c)
      if (inst_logits(instance, c) > inst_logits(instance, best)) best = c;
    return best;
  }
  const Matrix& s = st.soft.at(slide_id);
  int best = 0;
  for (int c = 1; c < s.cols(); ++c)
    if (s(instance, c) > s(instance, best)) best = c;
  return best;
}

/// Builds the full composite loss graph for one bag. Pure: reads parameters,
/// soft labels and the queue, mutates nothing, and draws its augmentations
/// from substreams keyed by (seed, fold, epoch, slide), which makes it
/// usable both for the training step and for finite-difference probes.
inline BuiltLoss build_bag_loss(ad::Tape& t, TrainState& st, const TrainSlide& slide, int epoch,
                                const LabelSpace& ls, const TrainConfig& cfg,
                                WarningLog* log = nullptr) {
  BuiltLoss out;
  ad::Var H = t.input(slide.features);
  TapeForward fwd = forward_model(t, st.model, H);

  ad::Var l_bag = t.cross_entropy_mean(fwd.bag_logits, {slide.label});

  ad::Var l_inst;
  if (st.contrastive_active()) {
    l_inst = t.kl_to_soft_mean(fwd.inst_logits, st.soft.at(slide.slide_id));
  } else if (architecture_of(st.model.kind) == Architecture::clam) {
    Matrix att(st.model.num_classes, slide.features.rows());
    for (int c = 0; c < st.model.num_classes; ++c)
      att.row(c) = t.val(fwd.attention[static_cast<size_t>(c)]).col(0).transpose();
    auto samples = clam_instance_sampling(att, slide.label, cfg.clam_k, ls.normal_index, log);
    if (samples.empty()) {
      l_inst = t.input(Matrix::Zero(1, 1));
    } else {
      std::vector<ad::Var> rows;
      std::vector<int> targets;
      for (const auto& s : samples) {
        rows.push_back(t.row(fwd.pair_logits[static_cast<size_t>(s.branch)], s.instance));
        targets.push_back(s.target);
      }
      l_inst = t.cross_entropy_mean(t.concat_rows(rows), targets);
    }
  } else {
    ad::Var crit = t.rows(fwd.inst_logits, fwd.critical);
    l_inst = t.cross_entropy_mean(crit, critical_supervision_targets(slide.label, ls));
  }

  ad::Var total = t.add(t.scale(l_bag, cfg.lambda_bag), t.scale(l_inst, cfg.lambda_inst));

  if (st.contrastive_active()) {
    std::uint64_t sid = fnv1a(slide.slide_id);
    Rng weak_rng = substream({cfg.seed, 0xa9e2ULL, static_cast<std::uint64_t>(st.fold),
                              static_cast<std::uint64_t>(epoch), sid, 0});
    Rng strong_rng = substream({cfg.seed, 0xa9e2ULL, static_cast<std::uint64_t>(st.fold),
                                static_cast<std::uint64_t>(epoch), sid, 1});
    BagViews views = make_views(slide.features, cfg.augment, weak_rng, strong_rng);
    out.anchors = project_queries(t, st.con.gq, t.input(views.weak), log);
    out.keys = project_keys(st.con.gk, views.strong, log);

    const int n = static_cast<int>(slide.features.rows());
    out.labels_snapshot.resize(static_cast<size_t>(n), ad::kUnlabeled);
    const bool warmup = epoch < cfg.warmup_epochs;
    if (!warmup)
      for (int i = 0; i < n; ++i)
        out.labels_snapshot[static_cast<size_t>(i)] =
            pseudo_label_of(st, cfg, t.val(fwd.inst_logits), slide.slide_id, i);

    ad::Var l_con;
    if (warmup) {
      l_con = t.info_nce_mean(out.anchors, out.keys, st.con.queue.keys(), cfg.tau);
    } else {
      Matrix queue_keys = st.con.queue.keys();
      Matrix candidates(out.keys.rows() + queue_keys.rows(), out.keys.cols());
      candidates.topRows(out.keys.rows()) = out.keys;
      candidates.bottomRows(queue_keys.rows()) = queue_keys;
      std::vector<int> cand_labels = out.labels_snapshot;
      for (int l : st.con.queue.labels()) cand_labels.push_back(l);
      l_con = t.supcon_mean(out.anchors, out.labels_snapshot, candidates, cand_labels, cfg.tau,
                            nullptr, log);
    }
    out.values.con = t.val(l_con)(0, 0);
    total = t.add(total, t.scale(l_con, cfg.lambda_con));
  }

  out.total = total;
  out.values.bag = t.val(l_bag)(0, 0);
  out.values.inst = t.val(l_inst)(0, 0);
  out.values.total = t.val(total)(0, 0);
  return out;
}

}  // namespace detail

/// One optimisation step on one bag, followed (for CL-PL models) by the
/// non-gradient updates in fixed order: key-encoder EMA, then per-instance
/// pseudo-label + prototype updates on the detached weak projections, then
/// the queue push of this step's keys under this step's label snapshot.
inline StepLosses train_step(TrainState& st, const TrainSlide& slide, int epoch,
                             const LabelSpace& ls, const TrainConfig& cfg,
                             WarningLog* log = nullptr) {
  ad::Tape t;
  detail::BuiltLoss built = detail::build_bag_loss(t, st, slide, epoch, ls, cfg, log);
  if (!std::isfinite(built.values.total))
    throw RuntimeFailure("train_step: non-finite loss on slide " + slide.slide_id);

  auto params = st.trainable();
  for (ad::Parameter* p : params) p->zero_grad();
  t.backward(built.total);
  adam_step(params, st.opt, cfg.learning_rate, cfg.weight_decay);

  if (st.contrastive_active()) {
    ema_update_key(st.con.gk, st.con.gq, cfg.momentum_k);
    const Matrix& anchors = t.val(built.anchors);
    if (slide.label == ls.normal_index) {
      for (int i = 0; i < anchors.rows(); ++i)
        prototype_ema_update(st.proto, ls.normal_index, anchors.row(i).transpose(), log);
    } else {
      Matrix& s = st.soft.at(slide.slide_id);
      for (int i = 0; i < anchors.rows(); ++i) {
        Vector h = anchors.row(i).transpose();
        int z = restricted_assign(h, st.proto, slide.label, ls);
        s.row(i) = momentum_update_label(s.row(i).transpose(), z, cfg.label_momentum).transpose();
        prototype_ema_update(st.proto, z, h, log);
      }
    }
    st.con.queue.push(built.keys, built.labels_snapshot);
  }
  return built.values;
}

/// Max relative error between analytic and central finite-difference
/// gradients of the full training loss, over every trainable parameter.
/// Substream-keyed augmentations make each probe see identical noise.
inline double gradient_check(TrainState& st, const TrainSlide& slide, int epoch,
                             const LabelSpace& ls, const TrainConfig& cfg, double h = 1e-6) {
  auto params = st.trainable();
  for (ad::Parameter* p : params) p->zero_grad();
  {
    ad::Tape t;
    detail::BuiltLoss built = detail::build_bag_loss(t, st, slide, epoch, ls, cfg);
    t.backward(built.total);
  }
  std::vector<Matrix> analytic;
  for (ad::Parameter* p : params) analytic.push_back(p->grad);

  auto loss_at = [&]() {
    ad::Tape t;
    return detail::build_bag_loss(t, st, slide, epoch, ls, cfg).values.total;
  };
  double max_rel = 0.0;
  for (size_t pi = 0; pi < params.size(); ++pi) {
    Matrix& v = params[pi]->value;
    for (int r = 0; r < v.rows(); ++r) {
      for (int c = 0; c < v.cols(); ++c) {
        double keep = v(r, c);
        v(r, c) = keep + h;
        double f_plus = loss_at();
        v(r, c) = keep - h;
        double f_minus = loss_at();
        v(r, c) = keep;
        double numeric = (f_plus - f_minus) / (2.0 * h);
        double ga = analytic[pi](r, c);
        double rel = std::abs(ga - numeric) / std::max(std::abs(ga) + std::abs(numeric), 1e-3);
        max_rel = std::max(max_rel, rel);
      }
    }
  }
  return max_rel;
}

/// Self-contained small-bag setup for gradient checking: 3 classes, an
/// 8-dim 4-instance tumor bag, reduced embedding dims, a primed queue and
/// mid-training-like soft labels.
struct GradCheckFixture {
  LabelSpace ls;
  TrainConfig cfg;
  TrainState state;
  TrainSlide slide;
};

inline GradCheckFixture make_gradcheck_fixture(ModelKind kind, std::uint64_t seed) {
  GradCheckFixture f;
  f.ls.class_names = {"tumor_0", "tumor_1", "normal"};
  f.ls.normal_index = 2;

  f.cfg.model = to_string(kind);
  f.cfg.epochs = 2;
  f.cfg.warmup_epochs = 1;
  f.cfg.q_dim = 4;
  f.cfg.e_dim = 8;
  f.cfg.clam_hidden = 8;
  f.cfg.clam_k = 2;
  f.cfg.queue_capacity = 64;
  f.cfg.seed = seed;
  f.cfg.validate();

  Rng rng = substream({seed, 0x96adc3ecULL});
  f.state.fold = 0;
  f.state.model.init(kind, 3, 8, f.cfg.q_dim, f.cfg.clam_hidden, rng);

  f.slide.slide_id = "gradcheck_bag";
  f.slide.label = 0;
  f.slide.features.resize(4, 8);
  for (int r = 0; r < 4; ++r)
    for (int c = 0; c < 8; ++c) f.slide.features(r, c) = rng.normal();

  if (uses_prototypes(kind)) {
    f.state.con.init(8, f.cfg.e_dim, f.cfg.queue_capacity, rng);
    f.state.proto = init_prototypes(3, f.cfg.e_dim, mix_key({seed, 0x5270ULL}), f.cfg.proto_momentum);
    Matrix s(4, 3);
    s << 0.5, 0.0, 0.5, 0.7, 0.0, 0.3, 0.2, 0.0, 0.8, 0.5, 0.0, 0.5;
    f.state.soft.alpha = f.cfg.label_momentum;
    f.state.soft.labels[f.slide.slide_id] = s;
    Matrix keys(6, f.cfg.e_dim);
    for (int r = 0; r < keys.rows(); ++r) {
      for (int c = 0; c < keys.cols(); ++c) keys(r, c) = rng.normal();
      keys.row(r) /= keys.row(r).norm();
    }
    f.state.con.queue.push(keys, {0, 2, 0, 1, 2, 2});
  }
  f.state.opt.init(f.state.trainable());
  return f;
}

/// Worst-case relative gradient error for one model variant, probing both
/// contrastive phases when the model has them.
inline double run_gradient_check(ModelKind kind, std::uint64_t seed) {
  GradCheckFixture f = make_gradcheck_fixture(kind, seed);
  double worst = gradient_check(f.state, f.slide, 0, f.ls, f.cfg);
  if (uses_prototypes(kind))
    worst = std::max(worst, gradient_check(f.state, f.slide, f.cfg.warmup_epochs, f.ls, f.cfg));
  return worst;
}

struct FoldResult {
  TrainState state;
  std::filesystem::path checkpoint_path;
};

/// Trains one fold, writing a rolling checkpoint and an append-only JSONL
/// epoch log under out_dir. Resuming from the rolling checkpoint replays
/// the remaining epochs bit-identically.
inline FoldResult train_fold(const DatasetManifest& m, const FoldAssignment& fa, int fold,
                             const TrainConfig& cfg, const std::filesystem::path& out_dir,
                             WarningLog* log = nullptr, const std::string& resume_path = "") {
  std::filesystem::create_directories(out_dir);
  const LabelSpace& ls = m.label_space;

  std::vector<const ManifestEntry*> train_entries, val_entries;
  for (const ManifestEntry* e : m.split_entries("train")) {
    auto it = fa.assignment.find(e->slide_id);
    if (it == fa.assignment.end()) continue;
    (it->second == fold ? val_entries : train_entries).push_back(e);
  }
  if (train_entries.empty()) throw ValidationError("train_fold: no training slides for fold");

  TrainState st = resume_path.empty()
                      ? init_train_state(cfg, m, fold, train_entries)
                      : load_checkpoint(resume_path, cfg, m, train_entries);
  if (st.fold != fold) throw ValidationError("train_fold: checkpoint belongs to another fold");

  std::vector<TrainSlide> train_bags;
  std::vector<int> train_labels;
  for (const ManifestEntry* e : train_entries) {
    FeatureBag bag = load_bag(m, *e);
    train_bags.push_back({e->slide_id, e->slide_label, std::move(bag.features)});
    train_labels.push_back(e->slide_label);
  }
  std::vector<TrainSlide> val_bags;
  for (const ManifestEntry* e : val_entries) {
    FeatureBag bag = load_bag(m, *e);
    val_bags.push_back({e->slide_id, e->slide_label, std::move(bag.features)});
  }

  FoldResult result;
  result.checkpoint_path = out_dir / "checkpoint.milw";
  std::ofstream epoch_log(out_dir / "epochs.jsonl",
                          st.epochs_done > 0 ? std::ios::app : std::ios::trunc);
  if (!epoch_log) throw RuntimeFailure("train_fold: cannot open epoch log");

  for (int epoch = st.epochs_done; epoch < cfg.epochs; ++epoch) {
    if (st.contrastive_active() && epoch == cfg.warmup_epochs) st.con.queue.clear();

    std::vector<int> order = balanced_sample_order(
        train_labels, static_cast<int>(train_bags.size()),
        mix_key({cfg.seed, 0xba7c4ULL, static_cast<std::uint64_t>(fold),
                 static_cast<std::uint64_t>(epoch)}));
    StepLosses sums;
    for (int idx : order) {
      StepLosses l = train_step(st, train_bags[static_cast<size_t>(idx)], epoch, ls, cfg, log);
      sums.bag += l.bag;
      sums.inst += l.inst;
      sums.con += l.con;
      sums.total += l.total;
    }
    const double steps = static_cast<double>(order.size());

    double val_f1 = kNan;
    if (!val_bags.empty()) {
      std::vector<int> preds, gts;
      for (const TrainSlide& s : val_bags) {
        BagOutput out = evaluate_bag(st.model, s.features);
        preds.push_back(predict_slide(out, st.model.kind, ls.normal_index));
        gts.push_back(s.label);
      }
      val_f1 = macro_f1(preds, gts, ls.num_classes());
    }

    nlohmann::json line{{"epoch", epoch},
                        {"bag_loss", sums.bag / steps},
                        {"inst_loss", sums.inst / steps},
                        {"con_loss", sums.con / steps},
                        {"total_loss", sums.total / steps},
                        {"val_macro_f1", std::isfinite(val_f1) ? nlohmann::json(val_f1) : nlohmann::json(nullptr)}};
    epoch_log << line.dump() << "\n";
    epoch_log.flush();

    st.epochs_done = epoch + 1;
    save_checkpoint(st, cfg, result.checkpoint_path);
  }
  // Covers epochs == 0 and resume-at-completion; otherwise idempotent.
  save_checkpoint(st, cfg, result.checkpoint_path);

  result.state = std::move(st);
  return result;
}

struct CvSummary {
  std::vector<EvalReport> fold_reports;
  std::map<std::string, double> mean;
  std::map<std::string, double> stddev;

  nlohmann::json to_json() const {
    auto num = [](double v) { return std::isfinite(v) ? nlohmann::json(v) : nlohmann::json(nullptr); };
    nlohmann::json folds = nlohmann::json::array();
    for (const auto& r : fold_reports) folds.push_back(r.to_json());
    nlohmann::json jm, js;
    for (const auto& [k, v] : mean) jm[k] = num(v);
    for (const auto& [k, v] : stddev) js[k] = num(v);
    return nlohmann::json{{"folds", folds}, {"mean", jm}, {"std", js}};
  }
};

inline std::map<std::string, double> metric_map(const EvalReport& r) {
  return {{"slide_macro_f1", r.slide_macro_f1},
          {"slide_ovr_auc", r.slide_ovr_auc},
          {"instance_macro_f1", r.instance_macro_f1},
          {"instance_ovr_auc", r.instance_ovr_auc},
          {"gt_vs_normal_f1", r.gt_vs_normal_f1},
          {"gt_vs_normal_auc", r.gt_vs_normal_auc},
          {"attention_auc", r.attention_auc}};
}

/// Full k-fold protocol: stratified folds over the train split, one model
/// per fold, each evaluated on the held-out test split; mean and population
/// standard deviation per metric across folds.
inline CvSummary run_cross_validation(const DatasetManifest& m, const TrainConfig& cfg,
                                      const std::filesystem::path& out_dir,
                                      WarningLog* log = nullptr) {
  FoldAssignment fa = stratified_kfold(m, cfg.folds, cfg.seed, log);
  CvSummary summary;
  for (int fold = 0; fold < cfg.folds; ++fold) {
    auto fold_dir = out_dir / ("fold" + std::to_string(fold));
    FoldResult fr = train_fold(m, fa, fold, cfg, fold_dir, log);
    EvalReport report = evaluate_model(fr.state.model, m, "test", log);
    std::ofstream os(fold_dir / "eval.json");
    if (!os) throw RuntimeFailure("run_cross_validation: cannot write eval report");
    os << report.to_json().dump(2) << "\n";
    summary.fold_reports.push_back(std::move(report));
  }
  for (const auto& [name, _] : metric_map(summary.fold_reports.front())) {
    double s = 0.0;
    for (const auto& r : summary.fold_reports) s += metric_map(r).at(name);
    double mu = s / static_cast<double>(summary.fold_reports.size());
    double var = 0.0;
    for (const auto& r : summary.fold_reports) {
      double d = metric_map(r).at(name) - mu;
      var += d * d;
    }
    summary.mean[name] = mu;
    summary.stddev[name] = std::sqrt(var / static_cast<double>(summary.fold_reports.size()));
  }
  std::ofstream os(out_dir / "summary.json");
  if (!os) throw RuntimeFailure("run_cross_validation: cannot write summary");
  os << summary.to_json().dump(2) << "\n";
  return summary;
}

}  // namespace milkit
