#pragma once

#include <cstdint>
#include <map>
#include <optional>
#include <string>
#include <vector>

#include "hivemil/evalkit.hpp"
#include "hivemil/pipeline.hpp"
#include "hivemil/synthgen.hpp"

namespace hivemil {

struct RunConfig {
  // few-shot protocol
  int shots = 16;
  std::vector<std::uint64_t> seeds = {0, 1, 2, 3, 4};
  int max_epochs = 50;
  int patience = 10;
  double learning_rate = 1e-4;
  double weight_decay = 1e-5;
  int batch_size = 1;

  // model
  double alpha = 0.5;
  double lambda = 0.5;
  int layers = 2;
  int heads = 2;
  int context_len = 16;
  int top_k_low = 2;
  int top_k_high = 100;
  double gamma = 4.6052;
  std::string aggregator = "msa";
  std::string htcl_variant = "class_wise";
  bool tgdf_on = true;
  bool hhg_on = true;
  bool htcl_on = true;
  bool tgdf_low_filter = true;
  bool tgdf_mask_propagation = true;
  bool hit_ratio_post_gnn = true;

  // io
  std::string dataset_dir;
  std::string output_dir = "runs/out";

  void validate() const;
  ModelConfig to_model_config() const;
  std::string to_json() const;
  static RunConfig from_json(const std::string& text);
  static RunConfig from_file(const std::string& path);
};

// Prepends $HIVEMIL_OUTPUT_ROOT to relative paths when the variable is set.
std::string resolve_output_dir(const std::string& dir);

struct Split {
  std::vector<int> train, val, test;  // indices into the bag list
  int effective_shots = 0;
};

// Deterministic per-class 4:3:3 partition (floor(0.4 n) train pool,
// floor(0.3 n) val, remainder test, test trimmed to the smallest class for
// balance), then the train pool is subsampled to `shots` bags per class.
// Shots are clamped to the pool size; empty pools raise a ConfigError naming
// the class.
Split few_shot_split(const std::vector<FeatureBag>& bags, int num_classes,
                     int shots, std::uint64_t seed);

class Adam {
 public:
  Adam(double lr, double weight_decay) : lr_(lr), wd_(weight_decay) {}

  // Conventional moment defaults; recorded in the run manifest.
  static constexpr double kBeta1 = 0.9;
  static constexpr double kBeta2 = 0.999;
  static constexpr double kEps = 1e-8;

  void step(const std::vector<std::pair<Mat*, const Mat*>>& params_and_grads);

 private:
  struct Moments {
    Mat m, v;
  };
  double lr_, wd_;
  long long t_ = 0;
  std::map<Mat*, Moments> moments_;
};

struct FitResult {
  MetricValues test_metrics;
  Model model;  // best-validation parameters
  std::vector<double> val_f1_history;
  double best_val_f1 = 0.0;
  int best_epoch = -1;
  int epochs_run = 0;
  int effective_shots = 0;
};

FitResult train_one(const RunConfig& rc, const Dataset& ds, std::uint64_t seed);
RunMetrics train(const RunConfig& rc, const Dataset& ds);

enum class BaselineKind { kMeanPool, kMaxPool, kAttnMil };
BaselineKind baseline_from_string(const std::string& s);
std::string to_string(BaselineKind k);

MetricValues baseline_one(BaselineKind kind, const RunConfig& rc,
                          const Dataset& ds, std::uint64_t seed);
RunMetrics run_baseline(BaselineKind kind, const RunConfig& rc, const Dataset& ds);

// Ablation grid; absent axes default to the base config's single value.
struct MatrixSpec {
  std::vector<std::string> aggregators;
  std::vector<std::string> htcl_variants;
  // Module rows: "a" = no TGDF/HHG/HTCL, "b" = TGDF only, "c" = TGDF+HHG,
  // "d" = full.
  std::vector<std::string> module_rows;
  std::vector<int> shots;

  static MatrixSpec from_json(const std::string& text);
};

struct MatrixRow {
  std::string cell;
  std::string aggregator, htcl_variant, module_row;
  int shots = 0;
  std::uint64_t seed = 0;
  std::string status;  // "ok" or "error"
  std::string error;
  MetricValues metrics;
};

std::vector<MatrixRow> run_matrix(const MatrixSpec& spec, const RunConfig& base,
                                  const Dataset& ds);

std::string matrix_csv(const std::vector<MatrixRow>& rows);
std::string metrics_csv(const RunConfig& rc, const RunMetrics& rm);
std::string metrics_summary_json(const RunMetrics& rm);
std::string run_manifest_json(const RunConfig& rc);

// Writes metrics.csv, summary.json, manifest.json and per-seed checkpoints.
void write_run_outputs(const RunConfig& rc, const Dataset& ds,
                       const std::string& out_dir);

// Random instance for the self-check suites: unit-norm features, a small
// hierarchy, and encoded texts derived from a random context state.
struct CheckInstance {
  FeatureBag bag;
  TextHierarchy hierarchy;
  EncodedTexts texts;
};
CheckInstance random_check_instance(std::uint64_t seed, int max_n = 8,
                                    int num_classes = 2, int parents = 3,
                                    int children = 2, int dim = 16);

struct CheckResult {
  std::string name;
  bool pass = false;
  std::string detail;
};

CheckResult check_tgdf_monotonicity(int instances, std::uint64_t seed);
CheckResult check_graph_cardinalities(int instances, std::uint64_t seed);
CheckResult check_gradients(double tolerance = 1e-3);
CheckResult check_closed_forms();
CheckResult check_variant_reductions();
CheckResult check_determinism();
std::vector<CheckResult> run_all_checks();

// Finite-difference sweep over every trainable tensor of `model` against the
// summed loss over `bags`; returns the max relative error.
double fd_max_rel_error(Model& model, const std::vector<FeatureBag>& bags,
                        double step = 1e-6);

// Reference configuration for the synthetic separation study.
SynthConfig reference_synth_config();

}  // namespace hivemil
