#pragma once

#include <string>

#include "hivemil/common.hpp"
#include "hivemil/datamodel.hpp"

namespace hivemil {

using MaskMat = Eigen::MatrixXi;  // entries in {0,1}

// Ablation switches: low-scale threshold filtering and cross-scale mask
// propagation can be disabled independently.
struct TgdfSwitches {
  bool low_filter = true;
  bool mask_propagation = true;
};

struct FilterMasks {
  MaskMat low;   // N x (C*O)
  MaskMat high;  // R x (C*O*K)
  double alpha = 0.0;

  long long nnz_low() const { return low.cast<long long>().sum(); }
  long long nnz_high() const { return high.cast<long long>().sum(); }
};

// out(i,j) = A_i . B_j. Rows are expected unit-norm upstream.
Mat cosine_sim(const Mat& a, const Mat& b);

// Per-column threshold mean + alpha * population std; inclusive comparison.
MaskMat low_scale_filter(const Mat& s_low, double alpha);

// Stage 2: masks the column by the parent retention, thresholds over all R
// rows of the masked column, and keeps an entry only when it passes the
// threshold, its parent pair survived stage 1, and the patch is valid.
// parent_text(s) maps a child-text column to its parent-text column.
MaskMat high_scale_filter(const Mat& s_high, const MaskMat& low_mask,
                          double alpha, const std::vector<char>& validity,
                          const std::vector<int>& parent_text);

FilterMasks tgdf(const FeatureBag& bag, const EncodedTexts& texts,
                 const TextHierarchy& h, double alpha,
                 const TgdfSwitches& switches = {});

// All-pass masks (used by the no-TGDF ablation); padded rows stay zero.
FilterMasks masks_all_on(const FeatureBag& bag, const TextHierarchy& h);

// {bag_id, alpha, low: [[n,o],...], high: [[r,s],...]} sparse dump.
std::string masks_to_json(const FilterMasks& m, const std::string& bag_id);

}  // namespace hivemil
