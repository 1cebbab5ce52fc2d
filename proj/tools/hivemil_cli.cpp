#include <CLI11.hpp>
#include <chrono>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <sstream>

#include "hivemil/checkpoint.hpp"
#include "hivemil/harness.hpp"

namespace fs = std::filesystem;
using namespace hivemil;

namespace {

struct Timer {
  std::chrono::steady_clock::time_point start = std::chrono::steady_clock::now();
  double seconds() const {
    return std::chrono::duration<double>(std::chrono::steady_clock::now() - start).count();
  }
};

std::string slurp(const std::string& path) {
  std::ifstream f(path);
  if (!f) throw IoError("cannot read file: " + path);
  std::stringstream ss;
  ss << f.rdbuf();
  return ss.str();
}

// Config file first, CLI flags override whatever they name.
struct RunOpts {
  std::string data_dir, config_path, out_dir = "runs/out";
  bool time_flag = false;
  RunConfig overrides;  // parse target for the flag values
  CLI::App* cmd = nullptr;

  void add_to(CLI::App* sub, bool need_data = true) {
    cmd = sub;
    auto* data = sub->add_option("--data", data_dir, "dataset directory");
    if (need_data) data->required();
    sub->add_option("--config", config_path, "RunConfig JSON file");
    sub->add_option("--out", out_dir, "output directory");
    sub->add_flag("--time", time_flag, "print wall-clock time");
    sub->add_option("--shots", overrides.shots, "bags per class in the training set");
    sub->add_option("--seeds", overrides.seeds, "repeat seeds");
    sub->add_option("--epochs", overrides.max_epochs, "max training epochs");
    sub->add_option("--patience", overrides.patience, "early-stopping patience");
    sub->add_option("--lr", overrides.learning_rate, "learning rate");
    sub->add_option("--weight-decay", overrides.weight_decay, "weight decay");
    sub->add_option("--alpha", overrides.alpha, "TGDF threshold sensitivity");
    sub->add_option("--lambda", overrides.lambda, "HTCL weight");
    sub->add_option("--gamma", overrides.gamma, "logit scale");
    sub->add_option("--top-k-low", overrides.top_k_low, "top-k at the low scale");
    sub->add_option("--top-k-high", overrides.top_k_high, "top-k at the high scale");
    sub->add_option("--aggregator", overrides.aggregator, "msa|saa|maa|attn|sage");
    sub->add_option("--htcl-variant", overrides.htcl_variant,
                    "class_wise|share_parent|instance_wise");
    sub->add_flag("!--no-tgdf", overrides.tgdf_on, "disable TGDF (all-pass masks)");
    sub->add_flag("!--no-hhg", overrides.hhg_on, "disable hierarchical edges");
    sub->add_flag("!--no-htcl", overrides.htcl_on, "disable HTCL");
    sub->add_flag("!--no-low-filter", overrides.tgdf_low_filter,
                  "disable low-scale threshold filtering");
    sub->add_flag("!--no-mask-prop", overrides.tgdf_mask_propagation,
                  "disable cross-scale mask propagation");
    sub->add_flag("!--hit-ratio-raw", overrides.hit_ratio_post_gnn,
                  "compute hit ratio on raw encoder features");
  }

  RunConfig resolve() const {
    RunConfig rc;
    if (!config_path.empty()) rc = RunConfig::from_file(config_path);
    auto seen = [&](const std::string& name) { return cmd->count(name) > 0; };
    if (seen("--shots")) rc.shots = overrides.shots;
    if (seen("--seeds")) rc.seeds = overrides.seeds;
    if (seen("--epochs")) rc.max_epochs = overrides.max_epochs;
    if (seen("--patience")) rc.patience = overrides.patience;
    if (seen("--lr")) rc.learning_rate = overrides.learning_rate;
    if (seen("--weight-decay")) rc.weight_decay = overrides.weight_decay;
    if (seen("--alpha")) rc.alpha = overrides.alpha;
    if (seen("--lambda")) rc.lambda = overrides.lambda;
    if (seen("--gamma")) rc.gamma = overrides.gamma;
    if (seen("--top-k-low")) rc.top_k_low = overrides.top_k_low;
    if (seen("--top-k-high")) rc.top_k_high = overrides.top_k_high;
    if (seen("--aggregator")) rc.aggregator = overrides.aggregator;
    if (seen("--htcl-variant")) rc.htcl_variant = overrides.htcl_variant;
    if (seen("--no-tgdf")) rc.tgdf_on = overrides.tgdf_on;
    if (seen("--no-hhg")) rc.hhg_on = overrides.hhg_on;
    if (seen("--no-htcl")) rc.htcl_on = overrides.htcl_on;
    if (seen("--no-low-filter")) rc.tgdf_low_filter = overrides.tgdf_low_filter;
    if (seen("--no-mask-prop")) rc.tgdf_mask_propagation = overrides.tgdf_mask_propagation;
    if (seen("--hit-ratio-raw")) rc.hit_ratio_post_gnn = overrides.hit_ratio_post_gnn;
    if (!data_dir.empty()) rc.dataset_dir = data_dir;
    rc.output_dir = resolve_output_dir(out_dir);
    return rc;
  }
};

void report_time(bool enabled, const Timer& timer) {
  if (enabled) std::cout << "wall-clock: " << timer.seconds() << " s\n";
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"HiVE-MIL: hierarchical vision-language multiple instance learning"};
  app.require_subcommand(1);

  // synth
  auto* synth = app.add_subcommand("synth", "generate a synthetic dataset");
  std::string synth_config, synth_out;
  bool synth_reference = false;
  std::uint64_t synth_seed = 0;
  synth->add_option("--config", synth_config, "SynthConfig JSON file");
  synth->add_option("--out", synth_out, "output dataset directory")->required();
  synth->add_flag("--reference", synth_reference,
                  "use the reference separation-study configuration");
  auto* seed_opt = synth->add_option("--seed", synth_seed, "override the generator seed");

  RunOpts train_opts, base_opts, matrix_opts, eval_opts;

  auto* train_cmd = app.add_subcommand("train", "train the full model");
  train_opts.add_to(train_cmd);

  auto* base_cmd = app.add_subcommand("baseline", "train a pooling/MIL baseline");
  std::string baseline_kind;
  base_cmd->add_option("--kind", baseline_kind, "mean|max|attn")->required();
  base_opts.add_to(base_cmd);

  auto* matrix_cmd = app.add_subcommand("matrix", "run an ablation grid");
  std::string matrix_spec_path;
  matrix_cmd->add_option("--spec", matrix_spec_path, "MatrixSpec JSON file")->required();
  matrix_opts.add_to(matrix_cmd);

  auto* eval_cmd = app.add_subcommand("eval", "evaluate a checkpoint on the test split");
  std::string eval_checkpoint, dump_masks_dir, dump_graphs_dir;
  std::uint64_t eval_seed = 0;
  int triplets_class = -1;
  eval_cmd->add_option("--checkpoint", eval_checkpoint, "checkpoint stem (no extension)")
      ->required();
  eval_cmd->add_option("--seed", eval_seed, "split seed the checkpoint was trained with");
  eval_cmd->add_option("--dump-masks", dump_masks_dir, "write per-bag TGDF mask dumps here");
  eval_cmd->add_option("--dump-graphs", dump_graphs_dir, "write per-bag graph debug JSON here");
  eval_cmd->add_option("--triplets", triplets_class,
                       "write interpretability triplets for this class");
  eval_opts.add_to(eval_cmd);

  auto* check_cmd = app.add_subcommand("check", "run invariant and gradient suites");

  CLI11_PARSE(app, argc, argv);

  try {
    if (*synth) {
      SynthConfig cfg;
      if (synth_reference)
        cfg = reference_synth_config();
      else if (!synth_config.empty())
        cfg = synth_config_from_json(slurp(synth_config));
      if (seed_opt->count() > 0) cfg.seed = synth_seed;
      const std::string out = resolve_output_dir(synth_out);
      generate_and_save(cfg, out);
      std::cout << "wrote dataset to " << out << "\n";
      return 0;
    }

    if (*train_cmd) {
      Timer timer;
      RunConfig rc = train_opts.resolve();
      Dataset ds = load_dataset(rc.dataset_dir);
      write_run_outputs(rc, ds, rc.output_dir);
      std::cout << "wrote run outputs to " << rc.output_dir << "\n";
      report_time(train_opts.time_flag, timer);
      return 0;
    }

    if (*base_cmd) {
      Timer timer;
      RunConfig rc = base_opts.resolve();
      Dataset ds = load_dataset(rc.dataset_dir);
      BaselineKind kind = baseline_from_string(baseline_kind);
      RunMetrics rm = run_baseline(kind, rc, ds);
      fs::create_directories(rc.output_dir);
      std::ofstream csv((fs::path(rc.output_dir) / "metrics.csv").string());
      csv << metrics_csv(rc, rm);
      std::ofstream sum((fs::path(rc.output_dir) / "summary.json").string());
      sum << metrics_summary_json(rm) << "\n";
      std::cout << to_string(kind) << " macro F1 mean " << rm.macro_f1().mean << "\n";
      report_time(base_opts.time_flag, timer);
      return 0;
    }

    if (*matrix_cmd) {
      Timer timer;
      RunConfig rc = matrix_opts.resolve();
      Dataset ds = load_dataset(rc.dataset_dir);
      MatrixSpec spec = MatrixSpec::from_json(slurp(matrix_spec_path));
      auto rows = run_matrix(spec, rc, ds);
      fs::create_directories(rc.output_dir);
      std::ofstream csv((fs::path(rc.output_dir) / "matrix.csv").string());
      csv << matrix_csv(rows);
      std::ofstream man((fs::path(rc.output_dir) / "manifest.json").string());
      man << run_manifest_json(rc) << "\n";
      std::cout << "wrote " << rows.size() << " matrix rows to " << rc.output_dir << "\n";
      report_time(matrix_opts.time_flag, timer);
      return 0;
    }

    if (*eval_cmd) {
      Timer timer;
      RunConfig rc = eval_opts.resolve();
      Dataset ds = load_dataset(rc.dataset_dir);
      Model model = Model::init(ds.hierarchy, rc.to_model_config(), eval_seed);
      load_checkpoint(model.named_trainables(), eval_checkpoint);
      Split split = few_shot_split(ds.bags, ds.hierarchy.num_classes, rc.shots, eval_seed);

      std::vector<int> preds, labels;
      Mat probs(static_cast<Eigen::Index>(split.test.size()), ds.hierarchy.num_classes);
      HitStats hits;
      fs::create_directories(rc.output_dir);
      for (std::size_t i = 0; i < split.test.size(); ++i) {
        const FeatureBag& bag = ds.bags[static_cast<std::size_t>(split.test[i])];
        ad::Tape t;
        ForwardResult fr = model_forward(t, model, bag);
        const Mat& logits = t.val(fr.fused_logits);
        int arg = 0;
        for (int c = 1; c < logits.cols(); ++c)
          if (logits(0, c) > logits(0, arg)) arg = c;
        preds.push_back(arg);
        labels.push_back(bag.label);
        const double mx = logits.row(0).maxCoeff();
        Eigen::RowVectorXd ex = (logits.row(0).array() - mx).exp();
        probs.row(static_cast<Eigen::Index>(i)) = ex / ex.sum();
        NodeStates st = values_of(t, fr.states);
        hits += hit_ratio_at_k(st.x_low, st.x_high, fr.graph.high_compact_of_r,
                               st.t_low, st.t_high, model.hierarchy, 2);
        if (!dump_masks_dir.empty()) {
          fs::create_directories(dump_masks_dir);
          std::ofstream mf((fs::path(dump_masks_dir) / (bag.bag_id + ".masks.json")).string());
          mf << masks_to_json(fr.masks, bag.bag_id) << "\n";
        }
        if (!dump_graphs_dir.empty()) {
          fs::create_directories(dump_graphs_dir);
          std::ofstream gf((fs::path(dump_graphs_dir) / (bag.bag_id + ".graph.json")).string());
          gf << graph_to_json(fr.graph) << "\n";
        }
        if (triplets_class >= 0) {
          std::vector<int> cls_parent(static_cast<std::size_t>(model.hierarchy.num_parents()));
          for (int o = 0; o < model.hierarchy.num_parents(); ++o)
            cls_parent[static_cast<std::size_t>(o)] = model.hierarchy.class_of_parent(o);
          std::vector<int> cls_child(static_cast<std::size_t>(model.hierarchy.num_children()));
          for (int s2 = 0; s2 < model.hierarchy.num_children(); ++s2)
            cls_child[static_cast<std::size_t>(s2)] = model.hierarchy.class_of_child(s2);
          Triplets lo = interpretability_triplets(st.x_low, st.t_low, cls_parent,
                                                  triplets_class);
          Triplets hi = interpretability_triplets(st.x_high, st.t_high, cls_child,
                                                  triplets_class);
          auto dump = [](const Triplets& tr, int topn) {
            std::string s = "{\"anchor\":" + std::to_string(tr.anchor) +
                            ",\"anchor_score\":" + std::to_string(tr.anchor_score) +
                            ",\"positives\":[";
            for (int i = 0; i < topn && i < static_cast<int>(tr.positives.size()); ++i)
              s += (i ? "," : "") + std::to_string(tr.positives[static_cast<std::size_t>(i)].first);
            s += "],\"negatives\":[";
            for (int i = 0; i < topn && i < static_cast<int>(tr.negatives.size()); ++i)
              s += (i ? "," : "") + std::to_string(tr.negatives[static_cast<std::size_t>(i)].first);
            return s + "]}";
          };
          std::ofstream tf((fs::path(rc.output_dir) / (bag.bag_id + ".triplets.json")).string());
          tf << "{\"bag_id\":\"" << bag.bag_id << "\",\"low\":" << dump(lo, 3)
             << ",\"high\":" << dump(hi, 3) << "}\n";
        }
      }
      MetricValues mv = classification_metrics(preds, probs, labels);
      if (hits.total > 0) mv.hit_ratio = hits.ratio();
      RunMetrics rm;
      rm.per_seed.push_back(mv);
      std::ofstream sum((fs::path(rc.output_dir) / "eval.json").string());
      sum << metrics_summary_json(rm) << "\n";
      std::cout << "test accuracy " << mv.accuracy << ", macro F1 " << mv.macro_f1 << "\n";
      report_time(eval_opts.time_flag, timer);
      return 0;
    }

    if (*check_cmd) {
      bool all_pass = true;
      for (const CheckResult& r : run_all_checks()) {
        std::cout << (r.pass ? "PASS" : "FAIL") << "  " << r.name << ": " << r.detail << "\n";
        all_pass = all_pass && r.pass;
      }
      return all_pass ? 0 : 1;
    }
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 1;
  }
  return 0;
}
