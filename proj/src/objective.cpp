#include "hivemil/objective.hpp"

namespace hivemil {

using Var = ad::Tape::Var;

HtclVariant htcl_variant_from_string(const std::string& s) {
  if (s == "class_wise") return HtclVariant::kClassWise;
  if (s == "share_parent") return HtclVariant::kShareParent;
  if (s == "instance_wise") return HtclVariant::kInstanceWise;
  throw ConfigError("unknown HTCL variant: " + s);
}

std::string to_string(HtclVariant v) {
  switch (v) {
    case HtclVariant::kClassWise: return "class_wise";
    case HtclVariant::kShareParent: return "share_parent";
    case HtclVariant::kInstanceWise: return "instance_wise";
  }
  return "?";
}

Var class_logits(ad::Tape& t, Var patches, Var texts,
                 const std::vector<int>& class_of_text, int num_classes,
                 int top_k, double gamma, ClassContributors* contributors) {
  if (top_k < 1) throw std::invalid_argument("class_logits: top_k must be >= 1");
  Var sims = t.matmul(t.row_l2_normalize(patches),
                      t.transpose(t.row_l2_normalize(texts)));
  const int n_patches = static_cast<int>(t.val(sims).rows());
  if (contributors) contributors->chosen.assign(static_cast<std::size_t>(num_classes), {});
  std::vector<Var> per_class;
  per_class.reserve(static_cast<std::size_t>(num_classes));
  for (int c = 0; c < num_classes; ++c) {
    bool has_texts = false;
    std::vector<std::pair<int, int>> cands;
    for (std::size_t j = 0; j < class_of_text.size(); ++j)
      if (class_of_text[j] == c) {
        has_texts = true;
        for (int i = 0; i < n_patches; ++i) cands.push_back({i, static_cast<int>(j)});
      }
    if (!has_texts)
      throw ConfigError("class_logits: class " + std::to_string(c) + " has no text columns");
    std::vector<std::pair<int, int>>* chosen =
        contributors ? &contributors->chosen[static_cast<std::size_t>(c)] : nullptr;
    per_class.push_back(t.scale(t.topk_mean(sims, cands, top_k, chosen), gamma));
  }
  return t.hstack(per_class);
}

FusedCe fuse_and_ce(ad::Tape& t, Var low_logits, Var high_logits, int label) {
  if (t.val(low_logits).cols() != t.val(high_logits).cols())
    throw std::invalid_argument("fuse_and_ce: logit length mismatch");
  if (label < 0 || label >= t.val(low_logits).cols())
    throw std::invalid_argument("fuse_and_ce: label out of range");
  FusedCe out;
  out.fused = t.add(low_logits, high_logits);
  out.ce = t.softmax_cross_entropy(out.fused, label);
  return out;
}

// Shared core: anchors x parents cosine matrix plus positive/negative
// coefficient masks, averaged per anchor then over anchors.
static Var sigmoid_pair_loss(ad::Tape& t, Var cos_anchor_parent,
                             const Mat& pos_coeff, const Mat& neg_coeff) {
  Var ls_pos = t.log_sigmoid(cos_anchor_parent);
  Var ls_neg = t.log_sigmoid(t.scale(cos_anchor_parent, -1.0));
  Var pos_term = t.sum_all(t.hadamard(t.constant(pos_coeff), ls_pos));
  Var neg_term = t.sum_all(t.hadamard(t.constant(neg_coeff), ls_neg));
  return t.scale(t.add(pos_term, neg_term), -1.0);
}

Var htcl_loss(ad::Tape& t, Var t_low, Var t_high, const TextHierarchy& h,
              HtclVariant variant) {
  if (h.num_classes < 2)
    throw ConfigError("htcl_loss: needs at least two classes for negatives");
  const int co = h.num_parents();
  const int s_total = h.num_children();
  Var parents_n = t.row_l2_normalize(t_low);

  switch (variant) {
    case HtclVariant::kClassWise: {
      // anchors = children; positives = all same-class parents
      Var anchors_n = t.row_l2_normalize(t_high);
      Var cos = t.matmul(anchors_n, t.transpose(parents_n));  // S x CO
      Mat pos = Mat::Zero(s_total, co), neg = Mat::Zero(s_total, co);
      for (int s = 0; s < s_total; ++s) {
        const int cls = h.class_of_child(s);
        const double n_pos = static_cast<double>(h.parents_per_class);
        const double n_neg = static_cast<double>(co - h.parents_per_class);
        for (int o = 0; o < co; ++o) {
          if (h.class_of_parent(o) == cls)
            pos(s, o) = 1.0 / (n_pos * s_total);
          else
            neg(s, o) = 1.0 / (n_neg * s_total);
        }
      }
      return sigmoid_pair_loss(t, cos, pos, neg);
    }
    case HtclVariant::kShareParent: {
      // anchors = per-parent means of the child embeddings
      std::vector<int> parent_of(static_cast<std::size_t>(s_total));
      for (int s = 0; s < s_total; ++s)
        parent_of[static_cast<std::size_t>(s)] = h.parent_of_child(s);
      Var anchors = t.segment_mean_rows(t_high, parent_of, co);
      Var cos = t.matmul(t.row_l2_normalize(anchors), t.transpose(parents_n));  // CO x CO
      Mat pos = Mat::Zero(co, co), neg = Mat::Zero(co, co);
      for (int i = 0; i < co; ++i)
        for (int j = 0; j < co; ++j) {
          if (i == j)
            pos(i, j) = 1.0 / static_cast<double>(co);
          else
            neg(i, j) = 1.0 / (static_cast<double>(co - 1) * co);
        }
      return sigmoid_pair_loss(t, cos, pos, neg);
    }
    case HtclVariant::kInstanceWise: {
      // anchors = children; positive = own parent only
      Var anchors_n = t.row_l2_normalize(t_high);
      Var cos = t.matmul(anchors_n, t.transpose(parents_n));  // S x CO
      Mat pos = Mat::Zero(s_total, co), neg = Mat::Zero(s_total, co);
      for (int s = 0; s < s_total; ++s) {
        const int p = h.parent_of_child(s);
        for (int o = 0; o < co; ++o) {
          if (o == p)
            pos(s, o) = 1.0 / static_cast<double>(s_total);
          else
            neg(s, o) = 1.0 / (static_cast<double>(co - 1) * s_total);
        }
      }
      return sigmoid_pair_loss(t, cos, pos, neg);
    }
  }
  throw ConfigError("htcl_loss: unknown variant");
}

Var total_loss(ad::Tape& t, Var ce, Var htcl, double lambda) {
  if (lambda < 0.0) throw std::invalid_argument("total_loss: lambda must be >= 0");
  if (lambda == 0.0 || !htcl.valid()) return ce;
  return t.add(ce, t.scale(htcl, lambda));
}

}  // namespace hivemil
