#pragma once

#include <optional>
#include <string>
#include <utility>
#include <vector>

#include "hivemil/hhgraph.hpp"
#include "hivemil/rng.hpp"
#include "hivemil/tape.hpp"

namespace hivemil {

enum class AggVariant { kMsa, kSaa, kMaa, kAttn, kSage };

AggVariant agg_variant_from_string(const std::string& s);
std::string to_string(AggVariant v);

struct IntraParams {
  Mat w_self, w_neigh;  // D x D
};

struct AttnParams {
  Mat w_q, w_k, w_v;  // D x D, split into heads on channel blocks
};

struct SageParams {
  Mat w_self, w_neigh;
};

// Per-layer weights; only the members engaged by the variant are allocated.
struct GnnLayerParams {
  IntraParams intra_low, intra_high;
  AttnParams hier_img, hier_text;  // kMsa, kMaa
  AttnParams hier_shared;          // kSaa, kAttn
  SageParams sage_img, sage_text;  // kSage
};

struct GnnParams {
  int dim = 0;
  int heads = 2;
  AggVariant variant = AggVariant::kMsa;
  std::vector<GnnLayerParams> layers;
  Mat scale_low, scale_high;  // 1 x D, shared across layers (kMsa, kSaa)

  bool uses_scale_embeddings() const {
    return variant == AggVariant::kMsa || variant == AggVariant::kSaa;
  }

  static GnnParams init(int dim, int heads, int num_layers, AggVariant v,
                        Rng& rng);

  // Engaged tensors only, in a fixed order; drives the optimizer, the
  // checkpoint format, and finite-difference sweeps.
  std::vector<std::pair<std::string, Mat*>> named_tensors();
};

// Leaky slope of the inter-layer nonlinearity; the final layer stays linear
// so its embeddings remain usable for cosine scoring.
inline constexpr double kGnnLeakySlope = 0.2;

struct NodeStateVars {
  ad::Tape::Var x_low, x_high, t_low, t_high;
};

struct NodeStates {
  Mat x_low, x_high, t_low, t_high;
};

NodeStates values_of(const ad::Tape& t, const NodeStateVars& v);

// Tape-side mirror of GnnParams.
struct AttnParamVars {
  ad::Tape::Var w_q, w_k, w_v;
};
struct SagePairVars {
  ad::Tape::Var w_self, w_neigh;
};
struct GnnLayerVars {
  SagePairVars intra_low, intra_high;
  AttnParamVars hier_img, hier_text, hier_shared;
  SagePairVars sage_img, sage_text;
};
struct GnnParamVars {
  std::vector<GnnLayerVars> layers;
  ad::Tape::Var scale_low, scale_high;
};

// Registers every engaged tensor as a tape leaf; appends (Mat*, Var) pairs to
// `registry` so gradients can be read back after backward().
GnnParamVars register_gnn_params(ad::Tape& t, GnnParams& p,
                                 std::vector<std::pair<Mat*, ad::Tape::Var>>& registry);

// One bipartite relation, both directions. Nodes without neighbors keep
// W_self h_v only.
std::pair<ad::Tape::Var, ad::Tape::Var> intra_aggregate(
    ad::Tape& t, const std::vector<HHGraph::Edge>& edges, ad::Tape::Var h_a,
    ad::Tape::Var h_b, const SagePairVars& w);

// Modality-Scale Attention over one hierarchical relation; scale embeddings
// optional (disengaged for kMaa / kAttn). Isolated nodes output q_v.
std::pair<ad::Tape::Var, ad::Tape::Var> msa_aggregate(
    ad::Tape& t, const std::vector<HHGraph::Edge>& edges, ad::Tape::Var h_a,
    ad::Tape::Var h_b, std::optional<ad::Tape::Var> scale_a,
    std::optional<ad::Tape::Var> scale_b, const AttnParamVars& w, int heads);

// Two-layer forward pass: h <- act(intra + hier) per layer, final layer
// linear. Hier terms are dropped entirely when the graph disables them.
NodeStateVars gnn_forward(ad::Tape& t, const HHGraph& g,
                          const NodeStateVars& init, const GnnParamVars& pv,
                          const GnnParams& p);

}  // namespace hivemil
