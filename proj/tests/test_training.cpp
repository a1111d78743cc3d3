#include <catch2/catch_amalgamated.hpp>

#include <cstring>
#include <fstream>

#include "milkit/training.hpp"
#include "test_util.hpp"

using namespace milkit;
using milkit_test::TempDir;

namespace {

LabelSpace two_classes() {
  LabelSpace ls;
  ls.class_names = {"tumor_0", "normal"};
  ls.normal_index = 1;
  return ls;
}

DatasetManifest in_memory_manifest(const LabelSpace& ls, int dim) {
  DatasetManifest m;
  m.label_space = ls;
  m.feature_dim = dim;
  return m;
}

std::vector<TrainSlide> separable_slides(int per_class, int dim, std::uint64_t seed) {
  std::vector<TrainSlide> slides;
  Rng rng = substream({seed, 0x5eed});
  for (int cls = 0; cls < 2; ++cls) {
    for (int s = 0; s < per_class; ++s) {
      TrainSlide sl;
      sl.slide_id = "slide_" + std::to_string(cls) + "_" + std::to_string(s);
      sl.label = cls;
      sl.features.resize(6, dim);
      for (int i = 0; i < 6; ++i)
        for (int j = 0; j < dim; ++j)
          sl.features(i, j) = rng.normal() + (cls == 0 ? 3.0 : -3.0);
      slides.push_back(std::move(sl));
    }
  }
  return slides;
}

}  // namespace

TEST_CASE("train config round-trips through json", "[training]") {
  TrainConfig cfg;
  cfg.model = "clam";
  cfg.epochs = 7;
  cfg.warmup_epochs = 3;
  cfg.learning_rate = 5e-4;
  cfg.clam_k = 4;
  cfg.augment.eta_strong = 0.9;
  cfg.seed = 77;
  cfg.label_source = "classifier";

  TrainConfig back = train_config_from_json(train_config_to_json(cfg));
  CHECK(back.model == cfg.model);
  CHECK(back.epochs == cfg.epochs);
  CHECK(back.warmup_epochs == cfg.warmup_epochs);
  CHECK(back.learning_rate == cfg.learning_rate);
  CHECK(back.clam_k == cfg.clam_k);
  CHECK(back.augment.eta_strong == cfg.augment.eta_strong);
  CHECK(back.seed == cfg.seed);
  CHECK(back.label_source == cfg.label_source);

  CHECK_THROWS_AS(train_config_from_json(nlohmann::json{{"bogus", 1}}), ValidationError);
  CHECK_THROWS_AS(train_config_from_json(nlohmann::json{{"model", "alexnet"}}), ValidationError);
  CHECK_THROWS_AS(train_config_from_json(nlohmann::json{{"folds", 1}}), ValidationError);
  CHECK_THROWS_AS(train_config_from_json(nlohmann::json{{"epochs", 5}, {"warmup_epochs", 9}}),
                  ValidationError);
}

TEST_CASE("adam takes a near-sign step on a fresh slot", "[training]") {
  ad::Parameter p;
  p.name = "w";
  p.value = Matrix::Constant(1, 1, 2.0);
  p.grad = Matrix::Constant(1, 1, 0.5);
  p.decay = false;

  AdamState st;
  st.init({&p});
  adam_step({&p}, st, 0.01, 0.0);
  // Bias-corrected first step: m_hat = g, v_hat = g^2, update = g/(|g|+eps) ~= sign(g).
  CHECK_THAT(p.value(0, 0), Catch::Matchers::WithinAbs(2.0 - 0.01, 1e-8));

  SECTION("decoupled decay adds wd * theta for decay-flagged parameters") {
    ad::Parameter q;
    q.name = "w2";
    q.value = Matrix::Constant(1, 1, 2.0);
    q.grad = Matrix::Constant(1, 1, 0.5);
    q.decay = true;
    AdamState st2;
    st2.init({&q});
    adam_step({&q}, st2, 0.01, 0.1);
    // update = 1 + 0.1 * 2.0 = 1.2 -> theta = 2.0 - 0.012
    CHECK_THAT(q.value(0, 0), Catch::Matchers::WithinAbs(2.0 - 0.012, 1e-8));
  }

  SECTION("non-finite gradients fail loudly with the parameter name") {
    p.grad(0, 0) = std::numeric_limits<double>::quiet_NaN();
    try {
      adam_step({&p}, st, 0.01, 0.0);
      FAIL("expected RuntimeFailure");
    } catch (const RuntimeFailure& e) {
      CHECK(std::string(e.what()).find("w") != std::string::npos);
    }
  }
}

TEST_CASE("bag loss drops by an order of magnitude on separable data", "[training]") {
  LabelSpace ls = two_classes();
  DatasetManifest m = in_memory_manifest(ls, 4);
  TrainConfig cfg;
  cfg.model = "dsmil";
  cfg.epochs = 50;
  cfg.warmup_epochs = 0;
  cfg.q_dim = 4;
  cfg.lambda_inst = 0.0;
  cfg.lambda_con = 0.0;
  cfg.learning_rate = 5e-3;
  cfg.weight_decay = 0.0;
  cfg.seed = 3;

  TrainState st = init_train_state(cfg, m, 0, {});
  auto slides = separable_slides(4, 4, 9);

  double first = 0.0, last = 0.0;
  for (int epoch = 0; epoch < cfg.epochs; ++epoch) {
    double sum = 0.0;
    for (const auto& sl : slides) sum += train_step(st, sl, epoch, ls, cfg).bag;
    if (epoch == 0) first = sum;
    last = sum;
  }
  CHECK(last < 0.1 * first);
}

TEST_CASE("key encoder and prototypes never receive gradient updates", "[training]") {
  LabelSpace ls = two_classes();
  DatasetManifest m = in_memory_manifest(ls, 4);
  TrainConfig cfg;
  cfg.model = "mbdsmil_cl_pl";
  cfg.epochs = 4;
  cfg.warmup_epochs = 4;  // momentum_k = 1 freezes gk entirely during the check
  cfg.q_dim = 4;
  cfg.e_dim = 4;
  cfg.queue_capacity = 16;
  cfg.momentum_k = 1.0;
  cfg.seed = 5;

  TrainState st = init_train_state(cfg, m, 0, {});
  // Per-slide soft labels for the cl-pl loss.
  auto slides = separable_slides(1, 4, 10);
  for (const auto& sl : slides) {
    Matrix s = Matrix::Zero(6, 2);
    if (sl.label == ls.normal_index) s.col(1).setOnes();
    else { s.col(0).setConstant(0.5); s.col(1).setConstant(0.5); }
    st.soft.labels[sl.slide_id] = s;
  }

  // gk must be bit-frozen under momentum 1 even as gq trains; prototypes
  // moved only by their own EMA rule (never by Adam).
  Matrix gk_w1 = st.con.gk.w1;
  std::vector<std::string> names;
  for (ad::Parameter* p : st.trainable()) names.push_back(p->name);
  for (const auto& n : names) {
    CHECK(n.find("proto") == std::string::npos);
    CHECK(n.find("gk") == std::string::npos);
  }

  Matrix gq_before = st.con.gq.w1.value;
  for (const auto& sl : slides) train_step(st, sl, 0, ls, cfg);
  CHECK(std::memcmp(gk_w1.data(), st.con.gk.w1.data(), sizeof(double) * 16) == 0);
  CHECK((st.con.gq.w1.value - gq_before).cwiseAbs().maxCoeff() > 0.0);
}

TEST_CASE("warmup pushes unlabeled keys and supcon labels arrive after", "[training]") {
  LabelSpace ls = two_classes();
  DatasetManifest m = in_memory_manifest(ls, 4);
  TrainConfig cfg;
  cfg.model = "mbdsmil_cl_pl";
  cfg.epochs = 2;
  cfg.warmup_epochs = 1;
  cfg.q_dim = 4;
  cfg.e_dim = 4;
  cfg.queue_capacity = 64;
  cfg.seed = 6;

  TrainState st = init_train_state(cfg, m, 0, {});
  auto slides = separable_slides(2, 4, 11);
  for (const auto& sl : slides) {
    Matrix s = Matrix::Zero(6, 2);
    if (sl.label == ls.normal_index) s.col(1).setOnes();
    else { s.col(0).setConstant(0.5); s.col(1).setConstant(0.5); }
    st.soft.labels[sl.slide_id] = s;
  }

  for (const auto& sl : slides) train_step(st, sl, 0, ls, cfg);
  for (int lbl : st.con.queue.labels()) CHECK(lbl == ad::kUnlabeled);

  st.con.queue.clear();  // the epoch loop clears at the warmup boundary
  for (const auto& sl : slides) train_step(st, sl, 1, ls, cfg);
  CHECK(st.con.queue.size() == 4 * 6);
  for (int lbl : st.con.queue.labels()) CHECK(lbl != ad::kUnlabeled);
}

TEST_CASE("gradient check passes for representative variants", "[training]") {
  CHECK(run_gradient_check(ModelKind::dsmil, 13) <= 1e-5);
  CHECK(run_gradient_check(ModelKind::clam, 13) <= 1e-5);
}

TEST_CASE("checkpoints capture the full training state bitwise", "[training][checkpoint]") {
  TempDir td("ckpt");
  auto m = milkit_test::make_tiny_dataset(td.path);
  LabelSpace ls = m.label_space;

  TrainConfig cfg;
  cfg.model = "mbdsmil_cl_pl";
  cfg.manifest = (td / "manifest.json").string();
  cfg.epochs = 2;
  cfg.warmup_epochs = 1;
  cfg.folds = 2;
  cfg.q_dim = 4;
  cfg.e_dim = 8;
  cfg.queue_capacity = 128;
  cfg.seed = 21;

  FoldAssignment fa = stratified_kfold(m, cfg.folds, cfg.seed);
  WarningLog log;
  FoldResult fr = train_fold(m, fa, 0, cfg, (td / "run").string(), &log);

  TrainState loaded = load_checkpoint(fr.checkpoint_path, cfg, m, {});
  TrainState& orig = fr.state;

  CHECK(loaded.epochs_done == orig.epochs_done);
  CHECK(loaded.fold == orig.fold);

  auto orig_params = orig.model.all();
  auto loaded_params = loaded.model.all();
  REQUIRE(orig_params.size() == loaded_params.size());
  for (size_t i = 0; i < orig_params.size(); ++i) {
    CHECK(orig_params[i]->name == loaded_params[i]->name);
    const Matrix& a = orig_params[i]->value;
    const Matrix& b = loaded_params[i]->value;
    REQUIRE(a.size() == b.size());
    CHECK(std::memcmp(a.data(), b.data(), sizeof(double) * static_cast<size_t>(a.size())) == 0);
  }

  CHECK(std::memcmp(orig.con.gk.w1.data(), loaded.con.gk.w1.data(),
                    sizeof(double) * static_cast<size_t>(orig.con.gk.w1.size())) == 0);
  CHECK(std::memcmp(orig.proto.mu.data(), loaded.proto.mu.data(),
                    sizeof(double) * static_cast<size_t>(orig.proto.mu.size())) == 0);
  CHECK(orig.opt.step == loaded.opt.step);
  CHECK(orig.con.queue.size() == loaded.con.queue.size());
  CHECK(orig.con.queue.labels() == loaded.con.queue.labels());
  Matrix qa = orig.con.queue.keys(), qb = loaded.con.queue.keys();
  CHECK(std::memcmp(qa.data(), qb.data(), sizeof(double) * static_cast<size_t>(qa.size())) == 0);

  REQUIRE(loaded.soft.labels.size() == orig.soft.labels.size());
  for (const auto& [id, rows] : orig.soft.labels)
    CHECK((loaded.soft.labels.at(id) - rows).cwiseAbs().maxCoeff() == 0.0);

  SECTION("config mismatches are rejected at load") {
    TrainConfig other = cfg;
    other.model = "dsmil";
    CHECK_THROWS_AS(load_checkpoint(fr.checkpoint_path, other, m, {}), ValidationError);
  }
}

TEST_CASE("training writes an epoch log and resumes bitwise", "[training][checkpoint]") {
  TempDir td("resume");
  auto m = milkit_test::make_tiny_dataset(td.path);

  TrainConfig cfg;
  cfg.model = "mbdsmil_cl_pl";
  cfg.manifest = (td / "manifest.json").string();
  cfg.epochs = 3;
  cfg.warmup_epochs = 1;
  cfg.folds = 2;
  cfg.q_dim = 4;
  cfg.e_dim = 8;
  cfg.queue_capacity = 128;
  cfg.seed = 22;

  FoldAssignment fa = stratified_kfold(m, cfg.folds, cfg.seed);
  WarningLog log;

  // Uninterrupted run.
  train_fold(m, fa, 0, cfg, (td / "full").string(), &log);

  // Interrupted at epoch 1, resumed to completion.
  TrainConfig short_cfg = cfg;
  short_cfg.epochs = 1;
  short_cfg.warmup_epochs = 1;
  FoldResult part = train_fold(m, fa, 0, short_cfg, (td / "part").string(), &log);
  train_fold(m, fa, 0, cfg, (td / "part").string(), &log, part.checkpoint_path.string());

  CHECK(milkit_test::files_equal(td / "full" / "checkpoint.milw", td / "part" / "checkpoint.milw"));
  CHECK(milkit_test::files_equal(td / "full" / "checkpoint.milw.soft",
                                 td / "part" / "checkpoint.milw.soft"));
  CHECK(milkit_test::files_equal(td / "full" / "epochs.jsonl", td / "part" / "epochs.jsonl"));

  // The epoch log is valid JSONL with one record per epoch.
  std::ifstream is(td / "full" / "epochs.jsonl");
  std::string line;
  int lines = 0;
  while (std::getline(is, line)) {
    auto j = nlohmann::json::parse(line);
    CHECK(j["epoch"].get<int>() == lines);
    CHECK(j.contains("bag_loss"));
    CHECK(j.contains("inst_loss"));
    CHECK(j.contains("con_loss"));
    CHECK(j.contains("total_loss"));
    CHECK(j.contains("val_macro_f1"));
    ++lines;
  }
  CHECK(lines == 3);
}

TEST_CASE("cross validation aggregates per-fold metrics", "[training][slow]") {
  TempDir td("cv");
  auto m = milkit_test::make_tiny_dataset(td.path);

  TrainConfig cfg;
  cfg.model = "dsmil";
  cfg.manifest = (td / "manifest.json").string();
  cfg.epochs = 2;
  cfg.warmup_epochs = 0;
  cfg.folds = 2;
  cfg.q_dim = 4;
  cfg.seed = 23;

  WarningLog log;
  CvSummary s = run_cross_validation(m, cfg, (td / "cv_out").string(), &log);
  REQUIRE(s.fold_reports.size() == 2);
  CHECK(s.mean.count("slide_macro_f1") == 1);
  CHECK(s.stddev.count("slide_macro_f1") == 1);

  // Mean/stddev recomputed from the fold reports.
  double mu = (s.fold_reports[0].slide_macro_f1 + s.fold_reports[1].slide_macro_f1) / 2.0;
  CHECK_THAT(s.mean.at("slide_macro_f1"), Catch::Matchers::WithinAbs(mu, 1e-15));

  CHECK(std::filesystem::exists(td / "cv_out" / "summary.json"));
  CHECK(std::filesystem::exists(td / "cv_out" / "fold0" / "eval.json"));
  CHECK(std::filesystem::exists(td / "cv_out" / "fold1" / "eval.json"));
  CHECK(std::filesystem::exists(td / "cv_out" / "fold0" / "checkpoint.milw"));
}
