#pragma once

#include <string>
#include <vector>

#include "hivemil/datamodel.hpp"
#include "hivemil/tgdf.hpp"

namespace hivemil {

// Four node types, four relations. Edges are stored once and interpreted
// bidirectionally during message passing. Padded high patches are dropped
// from the node set; img_high uses compact indices.
struct HHGraph {
  Mat x_low;   // N x D
  Mat x_high;  // R' x D, valid rows only
  Mat t_low;   // (C*O) x D
  Mat t_high;  // (C*O*K) x D

  std::vector<int> high_compact_of_r;  // R entries, -1 where invalid
  std::vector<int> r_of_high_compact;  // R' entries

  struct Edge {
    int a;  // low-side / img-side index
    int b;  // high-side / text-side index
  };
  std::vector<Edge> intra_low;   // (n, o)
  std::vector<Edge> intra_high;  // (compact high, s)
  std::vector<Edge> hier_img;    // (n, compact high)
  std::vector<Edge> hier_text;   // (o, s)

  bool hier_enabled = true;

  int num_low() const { return static_cast<int>(x_low.rows()); }
  int num_high() const { return static_cast<int>(x_high.rows()); }
  int num_text_low() const { return static_cast<int>(t_low.rows()); }
  int num_text_high() const { return static_cast<int>(t_high.rows()); }
};

struct EdgeCounts {
  long long intra_low = 0;
  long long intra_high = 0;
  long long hier_img = 0;
  long long hier_text = 0;
};

HHGraph build_hhg(const FeatureBag& bag, const EncodedTexts& texts,
                  const TextHierarchy& h, const FilterMasks& masks,
                  bool hier_enabled = true);

EdgeCounts edge_counts(const HHGraph& g);

// Expands the stored edges into both directions and checks the adjacency
// structure is symmetric; used by tests.
bool adjacency_symmetric(const HHGraph& g);

// Node counts plus per-relation edge lists (compact indices).
std::string graph_to_json(const HHGraph& g);

}  // namespace hivemil
