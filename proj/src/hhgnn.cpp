#include "hivemil/hhgnn.hpp"

#include <cmath>

namespace hivemil {

using Var = ad::Tape::Var;

AggVariant agg_variant_from_string(const std::string& s) {
  if (s == "msa") return AggVariant::kMsa;
  if (s == "saa") return AggVariant::kSaa;
  if (s == "maa") return AggVariant::kMaa;
  if (s == "attn") return AggVariant::kAttn;
  if (s == "sage") return AggVariant::kSage;
  throw ConfigError("unknown aggregator variant: " + s);
}

std::string to_string(AggVariant v) {
  switch (v) {
    case AggVariant::kMsa: return "msa";
    case AggVariant::kSaa: return "saa";
    case AggVariant::kMaa: return "maa";
    case AggVariant::kAttn: return "attn";
    case AggVariant::kSage: return "sage";
  }
  return "?";
}

static Mat near_identity(int dim, Rng& rng) {
  return Mat::Identity(dim, dim) + rng.gaussian_mat(dim, dim, 0.02);
}

// Neighbor weights start as a damped identity so cross-modal mixing is
// active from the first forward pass instead of waiting on training.
static Mat damped_identity(int dim, Rng& rng) {
  return 0.3 * Mat::Identity(dim, dim) + rng.gaussian_mat(dim, dim, 0.02);
}

GnnParams GnnParams::init(int dim, int heads, int num_layers, AggVariant v,
                          Rng& rng) {
  if (heads < 1 || dim % heads != 0)
    throw ConfigError("GnnParams: head count must divide embedding dim");
  GnnParams p;
  p.dim = dim;
  p.heads = heads;
  p.variant = v;
  p.layers.resize(static_cast<std::size_t>(num_layers));
  for (auto& l : p.layers) {
    l.intra_low = {near_identity(dim, rng), damped_identity(dim, rng)};
    l.intra_high = {near_identity(dim, rng), damped_identity(dim, rng)};
    switch (v) {
      case AggVariant::kMsa:
      case AggVariant::kMaa:
        l.hier_img = {near_identity(dim, rng), near_identity(dim, rng),
                      near_identity(dim, rng)};
        l.hier_text = {near_identity(dim, rng), near_identity(dim, rng),
                       near_identity(dim, rng)};
        break;
      case AggVariant::kSaa:
      case AggVariant::kAttn:
        l.hier_shared = {near_identity(dim, rng), near_identity(dim, rng),
                         near_identity(dim, rng)};
        break;
      case AggVariant::kSage:
        l.sage_img = {near_identity(dim, rng), damped_identity(dim, rng)};
        l.sage_text = {near_identity(dim, rng), damped_identity(dim, rng)};
        break;
    }
  }
  if (p.uses_scale_embeddings()) {
    p.scale_low = rng.gaussian_mat(1, dim, 0.02);
    p.scale_high = rng.gaussian_mat(1, dim, 0.02);
  }
  return p;
}

std::vector<std::pair<std::string, Mat*>> GnnParams::named_tensors() {
  std::vector<std::pair<std::string, Mat*>> out;
  for (std::size_t i = 0; i < layers.size(); ++i) {
    auto& l = layers[i];
    const std::string pre = "layer" + std::to_string(i) + ".";
    out.push_back({pre + "intra_low.w_self", &l.intra_low.w_self});
    out.push_back({pre + "intra_low.w_neigh", &l.intra_low.w_neigh});
    out.push_back({pre + "intra_high.w_self", &l.intra_high.w_self});
    out.push_back({pre + "intra_high.w_neigh", &l.intra_high.w_neigh});
    switch (variant) {
      case AggVariant::kMsa:
      case AggVariant::kMaa:
        out.push_back({pre + "hier_img.w_q", &l.hier_img.w_q});
        out.push_back({pre + "hier_img.w_k", &l.hier_img.w_k});
        out.push_back({pre + "hier_img.w_v", &l.hier_img.w_v});
        out.push_back({pre + "hier_text.w_q", &l.hier_text.w_q});
        out.push_back({pre + "hier_text.w_k", &l.hier_text.w_k});
        out.push_back({pre + "hier_text.w_v", &l.hier_text.w_v});
        break;
      case AggVariant::kSaa:
      case AggVariant::kAttn:
        out.push_back({pre + "hier_shared.w_q", &l.hier_shared.w_q});
        out.push_back({pre + "hier_shared.w_k", &l.hier_shared.w_k});
        out.push_back({pre + "hier_shared.w_v", &l.hier_shared.w_v});
        break;
      case AggVariant::kSage:
        out.push_back({pre + "sage_img.w_self", &l.sage_img.w_self});
        out.push_back({pre + "sage_img.w_neigh", &l.sage_img.w_neigh});
        out.push_back({pre + "sage_text.w_self", &l.sage_text.w_self});
        out.push_back({pre + "sage_text.w_neigh", &l.sage_text.w_neigh});
        break;
    }
  }
  if (uses_scale_embeddings()) {
    out.push_back({"scale.low", &scale_low});
    out.push_back({"scale.high", &scale_high});
  }
  return out;
}

NodeStates values_of(const ad::Tape& t, const NodeStateVars& v) {
  return {t.val(v.x_low), t.val(v.x_high), t.val(v.t_low), t.val(v.t_high)};
}

GnnParamVars register_gnn_params(
    ad::Tape& t, GnnParams& p,
    std::vector<std::pair<Mat*, Var>>& registry) {
  auto reg = [&](Mat& m) {
    Var v = t.param(m);
    registry.push_back({&m, v});
    return v;
  };
  GnnParamVars pv;
  pv.layers.resize(p.layers.size());
  for (std::size_t i = 0; i < p.layers.size(); ++i) {
    auto& l = p.layers[i];
    auto& lv = pv.layers[i];
    lv.intra_low = {reg(l.intra_low.w_self), reg(l.intra_low.w_neigh)};
    lv.intra_high = {reg(l.intra_high.w_self), reg(l.intra_high.w_neigh)};
    switch (p.variant) {
      case AggVariant::kMsa:
      case AggVariant::kMaa:
        lv.hier_img = {reg(l.hier_img.w_q), reg(l.hier_img.w_k), reg(l.hier_img.w_v)};
        lv.hier_text = {reg(l.hier_text.w_q), reg(l.hier_text.w_k), reg(l.hier_text.w_v)};
        break;
      case AggVariant::kSaa:
      case AggVariant::kAttn:
        lv.hier_shared = {reg(l.hier_shared.w_q), reg(l.hier_shared.w_k),
                          reg(l.hier_shared.w_v)};
        break;
      case AggVariant::kSage:
        lv.sage_img = {reg(l.sage_img.w_self), reg(l.sage_img.w_neigh)};
        lv.sage_text = {reg(l.sage_text.w_self), reg(l.sage_text.w_neigh)};
        break;
    }
  }
  if (p.uses_scale_embeddings()) {
    pv.scale_low = reg(p.scale_low);
    pv.scale_high = reg(p.scale_high);
  }
  return pv;
}

// mean over source neighbors per destination; zero row when isolated
static Var neighbor_mean(ad::Tape& t, Var h_src, const std::vector<int>& srcs,
                         const std::vector<int>& dsts, int n_dst) {
  return t.segment_mean_rows(t.gather_rows(h_src, srcs), dsts, n_dst);
}

static void split_edges(const std::vector<HHGraph::Edge>& edges,
                        std::vector<int>& a, std::vector<int>& b) {
  a.reserve(edges.size());
  b.reserve(edges.size());
  for (const auto& e : edges) {
    a.push_back(e.a);
    b.push_back(e.b);
  }
}

std::pair<Var, Var> intra_aggregate(ad::Tape& t,
                                    const std::vector<HHGraph::Edge>& edges,
                                    Var h_a, Var h_b, const SagePairVars& w) {
  std::vector<int> ea, eb;
  split_edges(edges, ea, eb);
  const int n_a = static_cast<int>(t.val(h_a).rows());
  const int n_b = static_cast<int>(t.val(h_b).rows());
  Var self_t = t.transpose(w.w_self);
  Var neigh_t = t.transpose(w.w_neigh);
  Var out_a = t.add(t.matmul(h_a, self_t),
                    t.matmul(neighbor_mean(t, h_b, eb, ea, n_a), neigh_t));
  Var out_b = t.add(t.matmul(h_b, self_t),
                    t.matmul(neighbor_mean(t, h_a, ea, eb, n_b), neigh_t));
  return {out_a, out_b};
}

// softmax(q.k / sqrt(d)) per destination and head, then q_v + sum beta v_u
static Var attention_side(ad::Tape& t, Var q, Var k, Var v,
                          const std::vector<int>& dsts,
                          const std::vector<int>& srcs, int n_dst, int heads) {
  if (dsts.empty()) return q;
  const int dim = static_cast<int>(t.val(q).cols());
  const int dh = dim / heads;
  Var qe = t.gather_rows(q, dsts);
  Var ke = t.gather_rows(k, srcs);
  Var ve = t.gather_rows(v, srcs);
  std::vector<Var> head_outs;
  head_outs.reserve(static_cast<std::size_t>(heads));
  for (int h = 0; h < heads; ++h) {
    Var qh = t.slice_cols(qe, h * dh, dh);
    Var kh = t.slice_cols(ke, h * dh, dh);
    Var vh = t.slice_cols(ve, h * dh, dh);
    Var scores = t.scale(t.rowwise_dot(qh, kh), 1.0 / std::sqrt(static_cast<double>(dh)));
    Var beta = t.segment_softmax(scores, dsts, n_dst);
    head_outs.push_back(t.segment_weighted_rowsum(beta, vh, dsts, n_dst, dh));
  }
  Var msg = heads == 1 ? head_outs[0] : t.hstack(head_outs);
  return t.add(q, msg);
}

std::pair<Var, Var> msa_aggregate(ad::Tape& t,
                                  const std::vector<HHGraph::Edge>& edges,
                                  Var h_a, Var h_b,
                                  std::optional<Var> scale_a,
                                  std::optional<Var> scale_b,
                                  const AttnParamVars& w, int heads) {
  Var hs_a = scale_a ? t.add_row_broadcast(h_a, *scale_a) : h_a;
  Var hs_b = scale_b ? t.add_row_broadcast(h_b, *scale_b) : h_b;
  Var wq_t = t.transpose(w.w_q);
  Var wk_t = t.transpose(w.w_k);
  Var wv_t = t.transpose(w.w_v);
  Var q_a = t.matmul(hs_a, wq_t), k_a = t.matmul(hs_a, wk_t), v_a = t.matmul(hs_a, wv_t);
  Var q_b = t.matmul(hs_b, wq_t), k_b = t.matmul(hs_b, wk_t), v_b = t.matmul(hs_b, wv_t);
  std::vector<int> ea, eb;
  split_edges(edges, ea, eb);
  const int n_a = static_cast<int>(t.val(h_a).rows());
  const int n_b = static_cast<int>(t.val(h_b).rows());
  Var out_a = attention_side(t, q_a, k_b, v_b, ea, eb, n_a, heads);
  Var out_b = attention_side(t, q_b, k_a, v_a, eb, ea, n_b, heads);
  return {out_a, out_b};
}

NodeStateVars gnn_forward(ad::Tape& t, const HHGraph& g,
                          const NodeStateVars& init, const GnnParamVars& pv,
                          const GnnParams& p) {
  NodeStateVars h = init;
  const int num_layers = static_cast<int>(p.layers.size());
  for (int l = 0; l < num_layers; ++l) {
    const auto& lv = pv.layers[static_cast<std::size_t>(l)];

    // Every node type participates in exactly one intra relation, so the MEAN
    // over participating relations is the relation output itself.
    auto [xl_i, tl_i] = intra_aggregate(t, g.intra_low, h.x_low, h.t_low, lv.intra_low);
    auto [xh_i, th_i] = intra_aggregate(t, g.intra_high, h.x_high, h.t_high, lv.intra_high);

    NodeStateVars next{xl_i, xh_i, tl_i, th_i};
    if (g.hier_enabled) {
      std::optional<Var> s_low, s_high;
      if (p.uses_scale_embeddings()) {
        s_low = pv.scale_low;
        s_high = pv.scale_high;
      }
      Var xl_h, xh_h, tl_h, th_h;
      switch (p.variant) {
        case AggVariant::kMsa:
        case AggVariant::kMaa: {
          std::tie(xl_h, xh_h) = msa_aggregate(t, g.hier_img, h.x_low, h.x_high,
                                               s_low, s_high, lv.hier_img, p.heads);
          std::tie(tl_h, th_h) = msa_aggregate(t, g.hier_text, h.t_low, h.t_high,
                                               s_low, s_high, lv.hier_text, p.heads);
          break;
        }
        case AggVariant::kSaa:
        case AggVariant::kAttn: {
          std::tie(xl_h, xh_h) = msa_aggregate(t, g.hier_img, h.x_low, h.x_high,
                                               s_low, s_high, lv.hier_shared, p.heads);
          std::tie(tl_h, th_h) = msa_aggregate(t, g.hier_text, h.t_low, h.t_high,
                                               s_low, s_high, lv.hier_shared, p.heads);
          break;
        }
        case AggVariant::kSage: {
          std::tie(xl_h, xh_h) = intra_aggregate(t, g.hier_img, h.x_low, h.x_high, lv.sage_img);
          std::tie(tl_h, th_h) = intra_aggregate(t, g.hier_text, h.t_low, h.t_high, lv.sage_text);
          break;
        }
      }
      next.x_low = t.add(next.x_low, xl_h);
      next.x_high = t.add(next.x_high, xh_h);
      next.t_low = t.add(next.t_low, tl_h);
      next.t_high = t.add(next.t_high, th_h);
    }

    if (l + 1 < num_layers) {
      next.x_low = t.leaky_relu(next.x_low, kGnnLeakySlope);
      next.x_high = t.leaky_relu(next.x_high, kGnnLeakySlope);
      next.t_low = t.leaky_relu(next.t_low, kGnnLeakySlope);
      next.t_high = t.leaky_relu(next.t_high, kGnnLeakySlope);
    }
    h = next;
  }
  return h;
}

}  // namespace hivemil
