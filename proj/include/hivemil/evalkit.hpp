#pragma once

#include <optional>
#include <vector>

#include "hivemil/datamodel.hpp"

namespace hivemil {

struct HitStats {
  long long hits = 0;
  long long total = 0;
  double ratio() const {
    return total > 0 ? static_cast<double>(hits) / static_cast<double>(total) : 0.0;
  }
  HitStats& operator+=(const HitStats& o) {
    hits += o.hits;
    total += o.total;
    return *this;
  }
};

// Hit Ratio@K over one bag. For each low patch: take the top-`topk` parent
// texts by cosine, pool their child text sets, then scan the patch's valid
// children in grid order; a hit is recorded (and the scan stops) when a
// child's argmax high-scale text falls in the candidate set.
//
// z_high holds only valid rows; high_compact_of_r maps r = 16n+m to a row of
// z_high or -1. Rows are normalized internally, so post-GNN states are fine.
HitStats hit_ratio_at_k(const Mat& z_low, const Mat& z_high,
                        const std::vector<int>& high_compact_of_r,
                        const Mat& e_low, const Mat& e_high,
                        const TextHierarchy& h, int topk = 2);

// Raw-feature convenience overload.
HitStats hit_ratio_at_k(const FeatureBag& bag, const EncodedTexts& texts,
                        const TextHierarchy& h, int topk = 2);

struct MetricValues {
  double accuracy = 0.0;
  double macro_f1 = 0.0;
  std::optional<double> macro_auc;  // missing when undefined (single class)
  std::optional<double> hit_ratio;
};

// Standard definitions: accuracy, macro one-vs-rest AUC (rank statistic with
// tied-rank handling), macro F1 with the 0/0 := 0 convention.
MetricValues classification_metrics(const std::vector<int>& predictions,
                                    const Mat& probabilities,
                                    const std::vector<int>& labels);

struct Triplets {
  int anchor = -1;
  double anchor_score = 0.0;
  // (patch id, distribution cosine to the anchor), positives ranked most
  // similar first, negatives least similar first. The anchor is excluded.
  std::vector<std::pair<int, double>> positives;
  std::vector<std::pair<int, double>> negatives;
};

// Anchor = patch with the highest similarity to the class's text set;
// ranking by cosine between full text-score vectors.
Triplets interpretability_triplets(const Mat& patches, const Mat& texts,
                                   const std::vector<int>& class_of_text,
                                   int class_of_interest);

struct RunMetrics {
  std::vector<MetricValues> per_seed;

  struct Summary {
    double mean = 0.0;
    double stddev = 0.0;  // population std over seeds
    int count = 0;
  };
  Summary accuracy() const;
  Summary macro_f1() const;
  Summary macro_auc() const;
  Summary hit_ratio() const;
};

}  // namespace hivemil
