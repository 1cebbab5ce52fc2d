#include "hivemil/tgdf.hpp"

#include <nlohmann/json.hpp>

using json = nlohmann::json;

namespace hivemil {

Mat cosine_sim(const Mat& a, const Mat& b) {
  if (a.cols() != b.cols())
    throw std::invalid_argument("cosine_sim: dimension mismatch");
  return a * b.transpose();
}

MaskMat low_scale_filter(const Mat& s_low, double alpha) {
  if (s_low.rows() == 0 || s_low.cols() == 0)
    throw std::invalid_argument("low_scale_filter: empty similarity matrix");
  MaskMat out = MaskMat::Zero(s_low.rows(), s_low.cols());
  for (Eigen::Index o = 0; o < s_low.cols(); ++o) {
    ColumnStats st;
    for (Eigen::Index n = 0; n < s_low.rows(); ++n) st.add(s_low(n, o));
    const double thr = st.mean + alpha * st.pop_std();
    for (Eigen::Index n = 0; n < s_low.rows(); ++n)
      out(n, o) = s_low(n, o) >= thr ? 1 : 0;
  }
  return out;
}

MaskMat high_scale_filter(const Mat& s_high, const MaskMat& low_mask,
                          double alpha, const std::vector<char>& validity,
                          const std::vector<int>& parent_text) {
  const Eigen::Index r_count = s_high.rows();
  const Eigen::Index s_count = s_high.cols();
  if (static_cast<Eigen::Index>(validity.size()) != r_count ||
      static_cast<Eigen::Index>(parent_text.size()) != s_count)
    throw std::invalid_argument("high_scale_filter: shape mismatch");
  if (low_mask.rows() * kChildrenPerPatch != r_count)
    throw std::invalid_argument("high_scale_filter: low mask row count mismatch");

  MaskMat out = MaskMat::Zero(r_count, s_count);
  for (Eigen::Index s = 0; s < s_count; ++s) {
    const int o = parent_text[static_cast<std::size_t>(s)];
    ColumnStats st;
    for (Eigen::Index r = 0; r < r_count; ++r) {
      const double masked =
          s_high(r, s) * static_cast<double>(low_mask(parent_patch(static_cast<int>(r)), o));
      st.add(masked);
    }
    const double thr = st.mean + alpha * st.pop_std();
    for (Eigen::Index r = 0; r < r_count; ++r) {
      const int n = parent_patch(static_cast<int>(r));
      const bool eligible =
          low_mask(n, o) == 1 && validity[static_cast<std::size_t>(r)];
      const double masked = s_high(r, s) * static_cast<double>(low_mask(n, o));
      out(r, s) = (eligible && masked >= thr) ? 1 : 0;
    }
  }
  return out;
}

FilterMasks tgdf(const FeatureBag& bag, const EncodedTexts& texts,
                 const TextHierarchy& h, double alpha,
                 const TgdfSwitches& switches) {
  FilterMasks m;
  m.alpha = alpha;

  const Mat s_low = cosine_sim(bag.low_feats, texts.e_low);
  m.low = switches.low_filter
              ? low_scale_filter(s_low, alpha)
              : MaskMat::Ones(s_low.rows(), s_low.cols());

  const Mat s_high = cosine_sim(bag.high_feats, texts.e_high);
  std::vector<int> parent_text(static_cast<std::size_t>(h.num_children()));
  for (int s = 0; s < h.num_children(); ++s)
    parent_text[static_cast<std::size_t>(s)] = h.parent_of_child(s);

  const MaskMat propagated = switches.mask_propagation
                                 ? m.low
                                 : MaskMat::Ones(m.low.rows(), m.low.cols());
  m.high = high_scale_filter(s_high, propagated, alpha, bag.validity, parent_text);
  return m;
}

FilterMasks masks_all_on(const FeatureBag& bag, const TextHierarchy& h) {
  FilterMasks m;
  m.alpha = 0.0;
  m.low = MaskMat::Ones(bag.num_low(), h.num_parents());
  m.high = MaskMat::Zero(bag.num_high(), h.num_children());
  for (int r = 0; r < bag.num_high(); ++r)
    if (bag.validity[static_cast<std::size_t>(r)]) m.high.row(r).setOnes();
  return m;
}

std::string masks_to_json(const FilterMasks& m, const std::string& bag_id) {
  json j;
  j["bag_id"] = bag_id;
  j["alpha"] = m.alpha;
  json low = json::array();
  for (Eigen::Index n = 0; n < m.low.rows(); ++n)
    for (Eigen::Index o = 0; o < m.low.cols(); ++o)
      if (m.low(n, o)) low.push_back({n, o});
  json high = json::array();
  for (Eigen::Index r = 0; r < m.high.rows(); ++r)
    for (Eigen::Index s = 0; s < m.high.cols(); ++s)
      if (m.high(r, s)) high.push_back({r, s});
  j["low"] = std::move(low);
  j["high"] = std::move(high);
  return j.dump();
}

}  // namespace hivemil
