#pragma once

#include <string>
#include <vector>

#include "hivemil/datamodel.hpp"
#include "hivemil/tape.hpp"

namespace hivemil {

enum class HtclVariant { kClassWise, kShareParent, kInstanceWise };

HtclVariant htcl_variant_from_string(const std::string& s);
std::string to_string(HtclVariant v);

// (patch, text, score) triples retained by the top-k pool, per class.
struct ClassContributors {
  std::vector<std::vector<std::pair<int, int>>> chosen;  // C entries
};

// Per-class logit: gamma * mean(top-k of the class's flattened patch x text
// scores). Rows of both inputs are renormalized before scoring.
// class_of_text maps each text row to its class.
ad::Tape::Var class_logits(ad::Tape& t, ad::Tape::Var patches,
                           ad::Tape::Var texts,
                           const std::vector<int>& class_of_text,
                           int num_classes, int top_k, double gamma,
                           ClassContributors* contributors = nullptr);

struct FusedCe {
  ad::Tape::Var fused;  // 1 x C
  ad::Tape::Var ce;     // 1 x 1
};

FusedCe fuse_and_ce(ad::Tape& t, ad::Tape::Var low_logits,
                    ad::Tape::Var high_logits, int label);

// Sigmoid-based hierarchical text contrastive loss over post-GNN text states.
// t_low: (C*O) x D, t_high: (C*O*K) x D.
ad::Tape::Var htcl_loss(ad::Tape& t, ad::Tape::Var t_low, ad::Tape::Var t_high,
                        const TextHierarchy& h, HtclVariant variant);

ad::Tape::Var total_loss(ad::Tape& t, ad::Tape::Var ce, ad::Tape::Var htcl,
                         double lambda);

}  // namespace hivemil
