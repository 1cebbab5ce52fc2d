#include "hivemil/hhgraph.hpp"

#include <map>
#include <nlohmann/json.hpp>
#include <set>

using json = nlohmann::json;

namespace hivemil {

HHGraph build_hhg(const FeatureBag& bag, const EncodedTexts& texts,
                  const TextHierarchy& h, const FilterMasks& masks,
                  bool hier_enabled) {
  const int n_low = bag.num_low();
  const int n_high = bag.num_high();
  if (masks.low.rows() != n_low || masks.low.cols() != h.num_parents() ||
      masks.high.rows() != n_high || masks.high.cols() != h.num_children())
    throw std::invalid_argument("build_hhg: mask/bag shape mismatch");

  HHGraph g;
  g.hier_enabled = hier_enabled;
  g.x_low = bag.low_feats;
  g.t_low = texts.e_low;
  g.t_high = texts.e_high;

  g.high_compact_of_r.assign(static_cast<std::size_t>(n_high), -1);
  for (int r = 0; r < n_high; ++r) {
    if (bag.validity[static_cast<std::size_t>(r)]) {
      g.high_compact_of_r[static_cast<std::size_t>(r)] =
          static_cast<int>(g.r_of_high_compact.size());
      g.r_of_high_compact.push_back(r);
    }
  }
  g.x_high.resize(static_cast<Eigen::Index>(g.r_of_high_compact.size()), bag.dim());
  for (std::size_t i = 0; i < g.r_of_high_compact.size(); ++i)
    g.x_high.row(static_cast<Eigen::Index>(i)) =
        bag.high_feats.row(g.r_of_high_compact[i]);

  for (int n = 0; n < n_low; ++n)
    for (int o = 0; o < h.num_parents(); ++o)
      if (masks.low(n, o)) g.intra_low.push_back({n, o});

  for (int r = 0; r < n_high; ++r) {
    const int c = g.high_compact_of_r[static_cast<std::size_t>(r)];
    if (c < 0) {
      // Padded rows must carry no mask entries (FilterMasks invariant).
      continue;
    }
    for (int s = 0; s < h.num_children(); ++s)
      if (masks.high(r, s)) g.intra_high.push_back({c, s});
  }

  if (hier_enabled) {
    for (int r = 0; r < n_high; ++r) {
      const int c = g.high_compact_of_r[static_cast<std::size_t>(r)];
      if (c >= 0) g.hier_img.push_back({parent_patch(r), c});
    }
    for (int s = 0; s < h.num_children(); ++s)
      g.hier_text.push_back({h.parent_of_child(s), s});
  }
  return g;
}

EdgeCounts edge_counts(const HHGraph& g) {
  EdgeCounts c;
  c.intra_low = static_cast<long long>(g.intra_low.size());
  c.intra_high = static_cast<long long>(g.intra_high.size());
  c.hier_img = static_cast<long long>(g.hier_img.size());
  c.hier_text = static_cast<long long>(g.hier_text.size());
  return c;
}

bool adjacency_symmetric(const HHGraph& g) {
  // Expand each relation into directed pairs over (type, index) nodes and
  // check every arc has its reverse.
  enum Type { XL, XH, TL, TH };
  auto expand = [](const std::vector<HHGraph::Edge>& edges, Type ta, Type tb,
                   std::multiset<std::tuple<int, int, int, int>>& arcs) {
    for (const auto& e : edges) {
      arcs.insert({ta, e.a, tb, e.b});
      arcs.insert({tb, e.b, ta, e.a});
    }
  };
  std::multiset<std::tuple<int, int, int, int>> arcs;
  expand(g.intra_low, XL, TL, arcs);
  expand(g.intra_high, XH, TH, arcs);
  expand(g.hier_img, XL, XH, arcs);
  expand(g.hier_text, TL, TH, arcs);
  for (const auto& [ta, a, tb, b] : arcs)
    if (arcs.count({tb, b, ta, a}) != arcs.count({ta, a, tb, b})) return false;
  return true;
}

std::string graph_to_json(const HHGraph& g) {
  json j;
  j["nodes"] = {{"img_low", g.num_low()},
                {"img_high", g.num_high()},
                {"text_low", g.num_text_low()},
                {"text_high", g.num_text_high()}};
  auto dump_edges = [](const std::vector<HHGraph::Edge>& edges) {
    json arr = json::array();
    for (const auto& e : edges) arr.push_back({e.a, e.b});
    return arr;
  };
  j["edges"] = {{"intra_low", dump_edges(g.intra_low)},
                {"intra_high", dump_edges(g.intra_high)},
                {"hier_img", dump_edges(g.hier_img)},
                {"hier_text", dump_edges(g.hier_text)}};
  return j.dump();
}

}  // namespace hivemil
