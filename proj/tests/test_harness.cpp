#include <doctest.h>

#include <filesystem>
#include <set>

#include "hivemil/checkpoint.hpp"
#include "hivemil/harness.hpp"

using namespace hivemil;

namespace {

Dataset tiny_dataset(int classes = 2, int bags = 10, std::uint64_t seed = 12) {
  SynthConfig sc;
  sc.num_classes = classes;
  sc.bags_per_class = bags;
  sc.dim = 16;
  sc.n_min = 3;
  sc.n_max = 5;
  sc.seed = seed;
  return generate_dataset(sc);
}

RunConfig tiny_config() {
  RunConfig rc;
  rc.shots = 2;
  rc.seeds = {0, 1};
  rc.max_epochs = 3;
  rc.patience = 2;
  rc.context_len = 4;
  return rc;
}

}  // namespace

TEST_CASE("few_shot_split") {
  Dataset ds = tiny_dataset(3, 30, 8);

  SUBCASE("4:3:3 partition with shot subsampling") {
    Split split = few_shot_split(ds.bags, 3, 4, 0);
    CHECK(split.train.size() == 3 * 4);
    CHECK(split.val.size() == 3 * 9);
    CHECK(split.test.size() == 3 * 9);
    CHECK(split.effective_shots == 4);
    std::vector<int> train_per_class(3, 0);
    for (int idx : split.train) ++train_per_class[static_cast<std::size_t>(ds.bags[static_cast<std::size_t>(idx)].label)];
    for (int c = 0; c < 3; ++c) CHECK(train_per_class[static_cast<std::size_t>(c)] == 4);
  }

  SUBCASE("same seed reproduces the split; different seed changes it") {
    Split a = few_shot_split(ds.bags, 3, 4, 5);
    Split b = few_shot_split(ds.bags, 3, 4, 5);
    CHECK(a.train == b.train);
    CHECK(a.val == b.val);
    CHECK(a.test == b.test);
    Split c = few_shot_split(ds.bags, 3, 4, 6);
    CHECK(a.train != c.train);
  }

  SUBCASE("partitions are disjoint") {
    Split split = few_shot_split(ds.bags, 3, 16, 1);
    std::set<int> seen;
    for (int idx : split.train) CHECK(seen.insert(idx).second);
    for (int idx : split.val) CHECK(seen.insert(idx).second);
    for (int idx : split.test) CHECK(seen.insert(idx).second);
  }

  SUBCASE("shots clamp to the train pool") {
    Split split = few_shot_split(ds.bags, 3, 16, 2);
    CHECK(split.effective_shots == 12);  // floor(0.4 * 30)
    CHECK(split.train.size() == 3 * 12);
  }

  SUBCASE("insufficient bags name the class") {
    Dataset small = tiny_dataset(2, 2, 9);
    try {
      few_shot_split(small.bags, 2, 1, 0);
      FAIL("expected ConfigError");
    } catch (const ConfigError& e) {
      CHECK(std::string(e.what()).find("class") != std::string::npos);
    }
  }
}

TEST_CASE("run config json round trip and validation") {
  RunConfig rc;
  rc.shots = 8;
  rc.aggregator = "saa";
  rc.htcl_variant = "share_parent";
  rc.gamma = 4.5871;
  rc.seeds = {3, 4};
  RunConfig back = RunConfig::from_json(rc.to_json());
  CHECK(back.shots == 8);
  CHECK(back.aggregator == "saa");
  CHECK(back.htcl_variant == "share_parent");
  CHECK(back.gamma == doctest::Approx(4.5871));
  CHECK(back.seeds == std::vector<std::uint64_t>{3, 4});

  RunConfig bad = rc;
  bad.batch_size = 2;
  CHECK_THROWS_AS(bad.validate(), ConfigError);
  bad = rc;
  bad.aggregator = "bogus";
  CHECK_THROWS_AS(bad.validate(), ConfigError);
}

TEST_CASE("model requires at least two classes") {
  SynthConfig sc;
  sc.num_classes = 1;
  sc.bags_per_class = 3;
  sc.dim = 8;
  Dataset ds = generate_dataset(sc);
  ModelConfig mc;
  mc.context_len = 2;
  CHECK_THROWS_AS(Model::init(ds.hierarchy, mc, 0), ConfigError);
}

TEST_CASE("adam first step moves by roughly the learning rate") {
  Mat theta = Mat::Zero(1, 2);
  Mat grad(1, 2);
  grad << 1.0, -2.0;
  Adam adam(1e-2, 0.0);
  adam.step({{&theta, &grad}});
  // bias-corrected first step is lr * g / (|g| + eps)
  CHECK(theta(0, 0) == doctest::Approx(-1e-2).epsilon(1e-6));
  CHECK(theta(0, 1) == doctest::Approx(1e-2).epsilon(1e-6));
}

TEST_CASE("training smoke: finite losses and nonzero gradients") {
  Dataset ds = tiny_dataset();
  RunConfig rc = tiny_config();
  Model model = Model::init(ds.hierarchy, rc.to_model_config(), 0);
  int steps = 0;
  double grad_norm = 0.0;
  double ctx_grad_norm = 0.0;
  for (const FeatureBag& bag : ds.bags) {
    if (steps >= 10) break;
    ad::Tape t;
    ForwardResult fr = model_forward(t, model, bag);
    CHECK(std::isfinite(t.val(fr.loss)(0, 0)));
    t.backward(fr.loss);
    for (const auto& [mat, var] : fr.params) {
      grad_norm += t.grad(var).norm();
      if (mat == &model.hierarchy.context_low || mat == &model.hierarchy.context_high)
        ctx_grad_norm += t.grad(var).norm();
    }
    ++steps;
  }
  CHECK(grad_norm > 0.0);
  // the HTCL pathway keeps the context tokens connected when lambda > 0
  CHECK(ctx_grad_norm > 0.0);
}

TEST_CASE("row (a) bypasses message passing entirely") {
  Dataset ds = tiny_dataset();
  RunConfig rc = tiny_config();
  rc.tgdf_on = false;
  rc.hhg_on = false;
  rc.htcl_on = false;
  Model model = Model::init(ds.hierarchy, rc.to_model_config(), 0);
  ad::Tape t;
  ForwardResult fr = model_forward(t, model, ds.bags[0]);
  CHECK(fr.gnn_bypassed);
  CHECK((t.val(fr.states.x_low) - ds.bags[0].low_feats).cwiseAbs().maxCoeff() == 0.0);
  CHECK((t.val(fr.states.t_low) - t.val(fr.encoded.e_low)).cwiseAbs().maxCoeff() == 0.0);
  // hier and intra edge sets play no role; masks are all-pass
  CHECK(fr.masks.low.sum() == fr.masks.low.size());
}

TEST_CASE("early stopping returns the best validation checkpoint") {
  Dataset ds = tiny_dataset(2, 12, 13);
  RunConfig rc = tiny_config();
  rc.max_epochs = 6;
  rc.patience = 3;
  FitResult fit = train_one(rc, ds, 0);
  REQUIRE_FALSE(fit.val_f1_history.empty());
  double best = fit.val_f1_history.front();
  for (double f : fit.val_f1_history) best = std::max(best, f);
  CHECK(fit.best_val_f1 == doctest::Approx(best));
  CHECK(fit.epochs_run <= rc.max_epochs);
}

TEST_CASE("baselines") {
  Dataset ds = tiny_dataset(2, 12, 14);
  RunConfig rc = tiny_config();
  rc.seeds = {0};

  SUBCASE("identical seeds produce identical metrics") {
    MetricValues a = baseline_one(BaselineKind::kMeanPool, rc, ds, 0);
    MetricValues b = baseline_one(BaselineKind::kMeanPool, rc, ds, 0);
    CHECK(a.accuracy == b.accuracy);
    CHECK(a.macro_f1 == b.macro_f1);
  }

  SUBCASE("all three kinds run end to end") {
    for (auto kind : {BaselineKind::kMeanPool, BaselineKind::kMaxPool,
                      BaselineKind::kAttnMil}) {
      MetricValues mv = baseline_one(kind, rc, ds, 1);
      CHECK(mv.accuracy >= 0.0);
      CHECK(mv.accuracy <= 1.0);
    }
  }

  SUBCASE("max pooling is perfect when the max-activating patch determines the class") {
    // hand-built bags: every class-c bag contains one child whose coordinate
    // c spikes, so the coordinate-wise max separates the classes linearly
    Dataset built;
    built.hierarchy = ds.hierarchy;
    Rng rng(77);
    for (int c = 0; c < 2; ++c)
      for (int i = 0; i < 12; ++i) {
        FeatureBag bag;
        bag.bag_id = "mx" + std::to_string(c) + "_" + std::to_string(i);
        bag.label = c;
        bag.low_feats = rng.gaussian_mat(1, 16);
        l2_normalize_rows_inplace(bag.low_feats);
        bag.high_feats = Mat::Zero(16, 16);
        bag.validity.assign(16, 0);
        for (int m = 0; m < 4; ++m) {
          Vec v = rng.unit_vec(16);
          v(0) = 0.0;  // background children stay off the spike coordinates
          v(1) = 0.0;
          if (m == 0) v(c) = 2.0;  // class-deterministic spike
          bag.high_feats.row(m) = l2_normalize(v).transpose();
          bag.validity[static_cast<std::size_t>(m)] = 1;
        }
        built.bags.push_back(std::move(bag));
      }
    RunConfig mrc = tiny_config();
    mrc.max_epochs = 40;
    mrc.patience = 20;
    mrc.learning_rate = 0.05;  // converge the zero-init classifier quickly
    MetricValues mv = baseline_one(BaselineKind::kMaxPool, mrc, built, 0);
    CHECK(mv.accuracy == doctest::Approx(1.0));
  }

  SUBCASE("constant features stay at chance level") {
    // rho = 0 with a single background prototype and zero noise makes every
    // patch identical up to the bag shift; disable that too
    SynthConfig sc;
    sc.num_classes = 2;
    sc.bags_per_class = 12;
    sc.dim = 8;
    sc.signal_fraction = 0.0;
    sc.background_pool = 1;
    sc.noise_scale = 0.0;
    sc.bag_shift_frac = 0.0;
    sc.invalid_child_rate = 0.0;
    sc.seed = 15;
    Dataset flat = generate_dataset(sc);
    RunConfig frc = tiny_config();
    frc.seeds = {0};
    MetricValues mv = baseline_one(BaselineKind::kMeanPool, frc, flat, 0);
    CHECK(mv.accuracy == doctest::Approx(0.5));  // balanced test, tie argmax
  }
}

TEST_CASE("run_matrix") {
  Dataset ds = tiny_dataset(2, 12, 16);
  RunConfig rc = tiny_config();
  rc.seeds = {0};

  SUBCASE("a single cell equals a direct train call") {
    MatrixSpec spec;
    auto rows = run_matrix(spec, rc, ds);
    REQUIRE(rows.size() == 1);
    CHECK(rows[0].status == "ok");
    FitResult direct = train_one(rc, ds, 0);
    CHECK(rows[0].metrics.macro_f1 == doctest::Approx(direct.test_metrics.macro_f1));
  }

  SUBCASE("2x2 grid yields cells x seeds rows and distinct cells") {
    MatrixSpec spec;
    spec.module_rows = {"a", "d"};
    spec.htcl_variants = {"class_wise", "instance_wise"};
    RunConfig rc2 = rc;
    rc2.seeds = {0, 1};
    auto rows = run_matrix(spec, rc2, ds);
    CHECK(rows.size() == 2 * 2 * 2);
    std::set<std::string> cells;
    for (const auto& r : rows) cells.insert(r.cell);
    CHECK(cells.size() == 4);
  }

  SUBCASE("rerun reproduces the CSV byte for byte") {
    MatrixSpec spec;
    spec.module_rows = {"b", "d"};
    auto a = matrix_csv(run_matrix(spec, rc, ds));
    auto b = matrix_csv(run_matrix(spec, rc, ds));
    CHECK(a == b);
  }

  SUBCASE("invalid cells are recorded and the matrix continues") {
    MatrixSpec spec;
    spec.aggregators = {"msa", "bogus"};
    auto rows = run_matrix(spec, rc, ds);
    REQUIRE(rows.size() == 2);
    CHECK(rows[0].status == "ok");
    CHECK(rows[1].status == "error");
    CHECK_FALSE(rows[1].error.empty());
  }
}

TEST_CASE("checkpoint round trip restores every tensor") {
  Dataset ds = tiny_dataset();
  RunConfig rc = tiny_config();
  Model model = Model::init(ds.hierarchy, rc.to_model_config(), 3);
  const std::string stem = "/tmp/hivemil_test_ckpt";
  save_checkpoint(model.named_trainables(), stem);

  Model other = Model::init(ds.hierarchy, rc.to_model_config(), 4);
  bool differed = false;
  {
    auto a = model.named_trainables();
    auto b = other.named_trainables();
    for (std::size_t i = 0; i < a.size(); ++i)
      if ((*a[i].second - *b[i].second).cwiseAbs().maxCoeff() > 0) differed = true;
  }
  CHECK(differed);
  load_checkpoint(other.named_trainables(), stem);
  {
    auto a = model.named_trainables();
    auto b = other.named_trainables();
    for (std::size_t i = 0; i < a.size(); ++i)
      CHECK((*a[i].second - *b[i].second).cwiseAbs().maxCoeff() == 0.0);
  }
  std::filesystem::remove(stem + ".bin");
  std::filesystem::remove(stem + ".json");
}

TEST_CASE("metrics csv layout") {
  RunConfig rc = tiny_config();
  RunMetrics rm;
  rm.per_seed.push_back({0.5, 0.25, 0.75, std::nullopt});
  rm.per_seed.push_back({1.0, 1.0, 1.0, 0.5});
  std::string csv = metrics_csv(rc, rm);
  CHECK(csv.find("seed,shots,accuracy,macro_auc,macro_f1,hit_ratio\n") == 0);
  CHECK(csv.find("0,2,0.5,0.75,0.25,\n") != std::string::npos);
  CHECK(csv.find("1,2,1,1,1,0.5\n") != std::string::npos);
}

TEST_CASE("output root environment variable") {
  setenv("HIVEMIL_OUTPUT_ROOT", "/tmp/hivemil_root", 1);
  CHECK(resolve_output_dir("runs/x") == "/tmp/hivemil_root/runs/x");
  CHECK(resolve_output_dir("/abs/path") == "/abs/path");
  unsetenv("HIVEMIL_OUTPUT_ROOT");
  CHECK(resolve_output_dir("runs/x") == "runs/x");
}
