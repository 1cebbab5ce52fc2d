// Acceptance suite: one line per criterion, nonzero exit on any failure.

#include <chrono>
#include <cstdio>
#include <string>

#include "hivemil/harness.hpp"
#include "support/oracles.hpp"

using namespace hivemil;

namespace {

int failures = 0;

struct Criterion {
  int id;
  std::chrono::steady_clock::time_point start = std::chrono::steady_clock::now();

  void report(bool pass, const std::string& detail) {
    const double secs =
        std::chrono::duration<double>(std::chrono::steady_clock::now() - start).count();
    std::printf("criterion %2d: %s  (%.1fs)  %s\n", id, pass ? "PASS" : "FAIL",
                secs, detail.c_str());
    std::fflush(stdout);
    if (!pass) ++failures;
  }
};

std::string fmt(double x) {
  char buf[64];
  std::snprintf(buf, sizeof(buf), "%.4f", x);
  return buf;
}

// 1. tgdf output equals the brute-force Algorithm-1 transcription bit for bit
void criterion_tgdf_oracle() {
  Criterion c{1};
  int mismatches = 0;
  for (std::uint64_t seed = 0; seed < 100; ++seed) {
    CheckInstance inst = random_check_instance(10'000 + seed, 8, 2, 3, 2, 16);
    const TextHierarchy& h = inst.hierarchy;
    std::vector<int> parent_text(static_cast<std::size_t>(h.num_children()));
    for (int s = 0; s < h.num_children(); ++s)
      parent_text[static_cast<std::size_t>(s)] = h.parent_of_child(s);
    FilterMasks m = tgdf(inst.bag, inst.texts, h, 0.5);
    auto brute = oracle::tgdf_bruteforce(inst.bag.low_feats, inst.bag.high_feats,
                                         inst.bag.validity, inst.texts.e_low,
                                         inst.texts.e_high, parent_text, 0.5);
    for (int n = 0; n < m.low.rows(); ++n)
      for (int o = 0; o < m.low.cols(); ++o)
        if (m.low(n, o) != brute.low[static_cast<std::size_t>(n)][static_cast<std::size_t>(o)])
          ++mismatches;
    for (int r = 0; r < m.high.rows(); ++r)
      for (int s = 0; s < m.high.cols(); ++s)
        if (m.high(r, s) != brute.high[static_cast<std::size_t>(r)][static_cast<std::size_t>(s)])
          ++mismatches;
  }
  c.report(mismatches == 0,
           "tgdf vs brute-force transcription on 100 instances, " +
               std::to_string(mismatches) + " mismatching entries");
}

// 2. per-stage alpha monotonicity and hierarchy consistency
void criterion_monotonicity() {
  Criterion c{2};
  CheckResult res = check_tgdf_monotonicity(50, 20'000);
  c.report(res.pass, res.detail);
}

// 3. graph cardinalities match mask nnz and hierarchy counts
void criterion_cardinalities() {
  Criterion c{3};
  CheckResult res = check_graph_cardinalities(50, 30'000);
  c.report(res.pass, res.detail);
}

// 4. end-to-end gradients vs central finite differences
void criterion_gradients() {
  Criterion c{4};
  CheckResult res = check_gradients(1e-3);
  c.report(res.pass, res.detail);
}

// 5. closed-form loss and attention values
void criterion_closed_forms() {
  Criterion c{5};
  CheckResult res = check_closed_forms();
  c.report(res.pass, res.detail);
}

// 6. aggregator / HTCL variant reductions
void criterion_reductions() {
  Criterion c{6};
  CheckResult res = check_variant_reductions();
  c.report(res.pass, res.detail);
}

struct SeparationOutcome {
  double full_f1 = 0.0, mean_pool_f1 = 0.0, row_a_f1 = 0.0;
  double full_hit = 0.0, no_hier_hit = 0.0;
  double wall_seconds = 0.0;
};

// 7 & 8 share the trained models on the reference configuration.
SeparationOutcome run_separation_study() {
  const auto start = std::chrono::steady_clock::now();
  Dataset ds = generate_dataset(reference_synth_config());
  RunConfig rc;
  rc.shots = 16;

  RunConfig row_a = rc;
  row_a.tgdf_on = false;
  row_a.hhg_on = false;
  row_a.htcl_on = false;

  RunConfig no_hier = rc;
  no_hier.hhg_on = false;

  SeparationOutcome out;
  const double inv = 1.0 / static_cast<double>(rc.seeds.size());
  for (std::uint64_t seed : rc.seeds) {
    FitResult full = train_one(rc, ds, seed);
    out.full_f1 += inv * full.test_metrics.macro_f1;
    out.full_hit += inv * full.test_metrics.hit_ratio.value_or(0.0);

    out.mean_pool_f1 +=
        inv * baseline_one(BaselineKind::kMeanPool, rc, ds, seed).macro_f1;
    out.row_a_f1 += inv * train_one(row_a, ds, seed).test_metrics.macro_f1;
    out.no_hier_hit +=
        inv * train_one(no_hier, ds, seed).test_metrics.hit_ratio.value_or(0.0);
  }
  out.wall_seconds =
      std::chrono::duration<double>(std::chrono::steady_clock::now() - start).count();
  return out;
}

void criterion_separation(const SeparationOutcome& out) {
  Criterion c{7};
  const double margin_mean = 100.0 * (out.full_f1 - out.mean_pool_f1);
  const double margin_row_a = 100.0 * (out.full_f1 - out.row_a_f1);
  const bool pass =
      margin_mean >= 10.0 && margin_row_a >= 5.0 && out.wall_seconds < 900.0;
  c.report(pass, "full F1 " + fmt(out.full_f1) + ", mean-pool " +
                     fmt(out.mean_pool_f1) + " (+" + fmt(margin_mean) +
                     " pts, need >= 10), row (a) " + fmt(out.row_a_f1) + " (+" +
                     fmt(margin_row_a) + " pts, need >= 5); study wall " +
                     fmt(out.wall_seconds) + " s (budget 900)");
}

void criterion_hit_trend(const SeparationOutcome& out) {
  Criterion c{8};
  const bool pass = out.full_hit >= out.no_hier_hit;
  c.report(pass, "hit ratio full " + fmt(out.full_hit) + " vs no-hier " +
                     fmt(out.no_hier_hit) + " (direction only)");
}

// 9. hit_ratio_at_k equals the Algorithm-2 transcription exactly
void criterion_hit_oracle() {
  Criterion c{9};
  int mismatches = 0;
  for (std::uint64_t seed = 0; seed < 100; ++seed) {
    CheckInstance inst = random_check_instance(40'000 + seed);
    std::vector<std::vector<int>> children_of;
    for (int o = 0; o < inst.hierarchy.num_parents(); ++o)
      children_of.push_back(inst.hierarchy.children_of_parent(o));
    const double brute = oracle::hit_ratio_bruteforce(
        inst.bag.low_feats, inst.bag.high_feats, inst.bag.validity,
        inst.texts.e_low, inst.texts.e_high, children_of, 2);
    HitStats st = hit_ratio_at_k(inst.bag, inst.texts, inst.hierarchy, 2);
    if (st.ratio() != brute) ++mismatches;
  }
  c.report(mismatches == 0, "100 instances, " + std::to_string(mismatches) +
                                " mismatching ratios");
}

// 10. identical RunConfig -> identical metrics CSV
void criterion_determinism() {
  Criterion c{10};
  SynthConfig sc;
  sc.num_classes = 2;
  sc.bags_per_class = 10;
  sc.dim = 16;
  sc.n_min = 3;
  sc.n_max = 5;
  sc.seed = 12;
  Dataset ds = generate_dataset(sc);
  RunConfig rc;
  rc.shots = 2;
  rc.seeds = {0, 1};
  rc.max_epochs = 4;
  rc.patience = 2;
  rc.context_len = 4;
  const std::string a = metrics_csv(rc, train(rc, ds));
  const std::string b = metrics_csv(rc, train(rc, ds));
  c.report(a == b, a == b ? "two runs emitted identical metrics CSVs"
                          : "metrics CSVs differ between identical runs");
}

}  // namespace

int main() {
  criterion_tgdf_oracle();
  criterion_monotonicity();
  criterion_cardinalities();
  criterion_gradients();
  criterion_closed_forms();
  criterion_reductions();
  SeparationOutcome sep = run_separation_study();
  criterion_separation(sep);
  criterion_hit_trend(sep);
  criterion_hit_oracle();
  criterion_determinism();
  std::printf("%s (%d/10 criteria passed)\n",
              failures == 0 ? "ACCEPTANCE PASS" : "ACCEPTANCE FAIL", 10 - failures);
  return failures == 0 ? 0 : 1;
}
