#include "hivemil/evalkit.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <numeric>
#include <set>

namespace hivemil {

// indices of the k largest entries; ties break toward the lower index
static std::vector<int> topk_indices(const Vec& scores, int k) {
  std::vector<int> order(static_cast<std::size_t>(scores.size()));
  std::iota(order.begin(), order.end(), 0);
  std::stable_sort(order.begin(), order.end(),
                   [&](int i, int j) { return scores(i) > scores(j); });
  order.resize(static_cast<std::size_t>(std::min<int>(k, static_cast<int>(scores.size()))));
  return order;
}

HitStats hit_ratio_at_k(const Mat& z_low, const Mat& z_high,
                        const std::vector<int>& high_compact_of_r,
                        const Mat& e_low, const Mat& e_high,
                        const TextHierarchy& h, int topk) {
  if (z_low.rows() == 0) throw std::invalid_argument("hit_ratio_at_k: empty bag");
  if (topk < 1) throw std::invalid_argument("hit_ratio_at_k: topk must be >= 1");
  const Mat zl = l2_normalize_rows(z_low);
  const Mat zh = l2_normalize_rows(z_high);
  const Mat el = l2_normalize_rows(e_low);
  const Mat eh = l2_normalize_rows(e_high);

  HitStats st;
  st.total = zl.rows();
  for (Eigen::Index n = 0; n < zl.rows(); ++n) {
    Vec parent_scores = el * zl.row(n).transpose();
    std::set<int> candidates;
    for (int o : topk_indices(parent_scores, topk))
      for (int s : h.children_of_parent(o)) candidates.insert(s);

    for (int m = 0; m < kChildrenPerPatch; ++m) {
      const int r = flatten_index(static_cast<int>(n), m);
      const int c = high_compact_of_r[static_cast<std::size_t>(r)];
      if (c < 0) continue;
      Vec child_scores = eh * zh.row(c).transpose();
      int best = 0;
      for (int s = 1; s < child_scores.size(); ++s)
        if (child_scores(s) > child_scores(best)) best = s;
      if (candidates.count(best)) {
        ++st.hits;
        break;  // one hit per low patch
      }
    }
  }
  return st;
}

HitStats hit_ratio_at_k(const FeatureBag& bag, const EncodedTexts& texts,
                        const TextHierarchy& h, int topk) {
  std::vector<int> compact(static_cast<std::size_t>(bag.num_high()), -1);
  int next = 0;
  for (int r = 0; r < bag.num_high(); ++r)
    if (bag.validity[static_cast<std::size_t>(r)]) compact[static_cast<std::size_t>(r)] = next++;
  Mat zh(next, bag.dim());
  for (int r = 0; r < bag.num_high(); ++r)
    if (compact[static_cast<std::size_t>(r)] >= 0)
      zh.row(compact[static_cast<std::size_t>(r)]) = bag.high_feats.row(r);
  return hit_ratio_at_k(bag.low_feats, zh, compact, texts.e_low, texts.e_high, h, topk);
}

// one-vs-rest AUC from rank sums with average-rank tie handling
static std::optional<double> binary_auc(const std::vector<double>& scores,
                                        const std::vector<char>& is_pos) {
  long long npos = 0, nneg = 0;
  for (char p : is_pos) (p ? npos : nneg)++;
  if (npos == 0 || nneg == 0) return std::nullopt;
  std::vector<int> order(scores.size());
  std::iota(order.begin(), order.end(), 0);
  std::stable_sort(order.begin(), order.end(),
                   [&](int i, int j) { return scores[static_cast<std::size_t>(i)] < scores[static_cast<std::size_t>(j)]; });
  std::vector<double> rank(scores.size());
  std::size_t i = 0;
  while (i < order.size()) {
    std::size_t j = i;
    while (j + 1 < order.size() &&
           scores[static_cast<std::size_t>(order[j + 1])] ==
               scores[static_cast<std::size_t>(order[i])])
      ++j;
    const double avg = 0.5 * (static_cast<double>(i) + static_cast<double>(j)) + 1.0;
    for (std::size_t k = i; k <= j; ++k) rank[static_cast<std::size_t>(order[k])] = avg;
    i = j + 1;
  }
  double pos_rank_sum = 0.0;
  for (std::size_t k = 0; k < scores.size(); ++k)
    if (is_pos[k]) pos_rank_sum += rank[k];
  const double u = pos_rank_sum - static_cast<double>(npos) * (static_cast<double>(npos) + 1.0) / 2.0;
  return u / (static_cast<double>(npos) * static_cast<double>(nneg));
}

MetricValues classification_metrics(const std::vector<int>& predictions,
                                    const Mat& probabilities,
                                    const std::vector<int>& labels) {
  const std::size_t n = labels.size();
  if (predictions.size() != n || static_cast<std::size_t>(probabilities.rows()) != n)
    throw std::invalid_argument("classification_metrics: length mismatch");
  const int c_count = static_cast<int>(probabilities.cols());

  MetricValues mv;
  long long correct = 0;
  for (std::size_t i = 0; i < n; ++i)
    if (predictions[i] == labels[i]) ++correct;
  mv.accuracy = n > 0 ? static_cast<double>(correct) / static_cast<double>(n) : 0.0;

  double f1_sum = 0.0;
  for (int c = 0; c < c_count; ++c) {
    long long tp = 0, fp = 0, fn = 0;
    for (std::size_t i = 0; i < n; ++i) {
      const bool pred_c = predictions[i] == c;
      const bool is_c = labels[i] == c;
      if (pred_c && is_c) ++tp;
      else if (pred_c) ++fp;
      else if (is_c) ++fn;
    }
    const double denom = 2.0 * static_cast<double>(tp) + static_cast<double>(fp) + static_cast<double>(fn);
    f1_sum += denom > 0.0 ? 2.0 * static_cast<double>(tp) / denom : 0.0;
  }
  mv.macro_f1 = c_count > 0 ? f1_sum / c_count : 0.0;

  double auc_sum = 0.0;
  int auc_count = 0;
  for (int c = 0; c < c_count; ++c) {
    std::vector<double> scores(n);
    std::vector<char> is_pos(n);
    for (std::size_t i = 0; i < n; ++i) {
      scores[i] = probabilities(static_cast<Eigen::Index>(i), c);
      is_pos[i] = labels[i] == c ? 1 : 0;
    }
    if (auto a = binary_auc(scores, is_pos)) {
      auc_sum += *a;
      ++auc_count;
    }
  }
  if (auc_count > 0) mv.macro_auc = auc_sum / auc_count;
  return mv;
}

Triplets interpretability_triplets(const Mat& patches, const Mat& texts,
                                   const std::vector<int>& class_of_text,
                                   int class_of_interest) {
  const Mat pn = l2_normalize_rows(patches);
  const Mat tn = l2_normalize_rows(texts);
  const Mat scores = pn * tn.transpose();  // patches x texts

  Triplets out;
  for (Eigen::Index i = 0; i < scores.rows(); ++i) {
    double best = -std::numeric_limits<double>::infinity();
    for (std::size_t j = 0; j < class_of_text.size(); ++j)
      if (class_of_text[j] == class_of_interest)
        best = std::max(best, scores(i, static_cast<Eigen::Index>(j)));
    if (out.anchor < 0 || best > out.anchor_score) {
      out.anchor = static_cast<int>(i);
      out.anchor_score = best;
    }
  }
  if (out.anchor < 0) return out;

  const Vec anchor_dist = l2_normalize(scores.row(out.anchor).transpose());
  std::vector<std::pair<int, double>> ranked;
  for (Eigen::Index i = 0; i < scores.rows(); ++i) {
    if (static_cast<int>(i) == out.anchor) continue;
    const Vec d = l2_normalize(scores.row(i).transpose());
    ranked.push_back({static_cast<int>(i), anchor_dist.dot(d)});
  }
  std::stable_sort(ranked.begin(), ranked.end(),
                   [](const auto& a, const auto& b) { return a.second > b.second; });
  out.positives = ranked;
  out.negatives.assign(ranked.rbegin(), ranked.rend());
  return out;
}

static RunMetrics::Summary summarize(const std::vector<double>& xs) {
  RunMetrics::Summary s;
  s.count = static_cast<int>(xs.size());
  if (xs.empty()) return s;
  for (double x : xs) s.mean += x;
  s.mean /= static_cast<double>(xs.size());
  double var = 0.0;
  for (double x : xs) var += (x - s.mean) * (x - s.mean);
  s.stddev = std::sqrt(var / static_cast<double>(xs.size()));
  return s;
}

RunMetrics::Summary RunMetrics::accuracy() const {
  std::vector<double> xs;
  for (const auto& m : per_seed) xs.push_back(m.accuracy);
  return summarize(xs);
}
RunMetrics::Summary RunMetrics::macro_f1() const {
  std::vector<double> xs;
  for (const auto& m : per_seed) xs.push_back(m.macro_f1);
  return summarize(xs);
}
RunMetrics::Summary RunMetrics::macro_auc() const {
  std::vector<double> xs;
  for (const auto& m : per_seed)
    if (m.macro_auc) xs.push_back(*m.macro_auc);
  return summarize(xs);
}
RunMetrics::Summary RunMetrics::hit_ratio() const {
  std::vector<double> xs;
  for (const auto& m : per_seed)
    if (m.hit_ratio) xs.push_back(*m.hit_ratio);
  return summarize(xs);
}

}  // namespace hivemil
