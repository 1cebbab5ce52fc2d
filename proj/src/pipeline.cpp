#include "hivemil/pipeline.hpp"

namespace hivemil {

using Var = ad::Tape::Var;

void ModelConfig::validate() const {
  if (top_k_low < 1 || top_k_high < 1)
    throw ConfigError("ModelConfig: top-k values must be >= 1");
  if (alpha < 0.0) throw ConfigError("ModelConfig: alpha must be >= 0");
  if (lambda < 0.0) throw ConfigError("ModelConfig: lambda must be >= 0");
  if (layers < 1) throw ConfigError("ModelConfig: needs at least one layer");
  if (heads < 1) throw ConfigError("ModelConfig: needs at least one head");
  if (context_len < 1) throw ConfigError("ModelConfig: context_len must be >= 1");
}

Model Model::init(const TextHierarchy& dataset_hierarchy, const ModelConfig& cfg,
                  std::uint64_t seed) {
  cfg.validate();
  dataset_hierarchy.validate();
  if (dataset_hierarchy.num_classes < 2)
    throw ConfigError("Model: needs at least two classes");

  Model m;
  m.cfg = cfg;
  m.hierarchy = dataset_hierarchy;
  const int d_base = m.hierarchy.dim_base();
  Rng rng = Rng::stream(seed, 17);
  // CoOp-style small random context init
  m.hierarchy.context_low = rng.gaussian_mat(cfg.context_len, d_base, 0.02);
  m.hierarchy.context_high = rng.gaussian_mat(cfg.context_len, d_base, 0.02);
  m.stub = EncoderStub::identity(d_base);
  m.gnn = GnnParams::init(m.stub.dim_out(), cfg.heads, cfg.layers,
                          cfg.aggregator, rng);
  return m;
}

std::vector<std::pair<std::string, Mat*>> Model::named_trainables() {
  std::vector<std::pair<std::string, Mat*>> out;
  out.push_back({"ctx.low", &hierarchy.context_low});
  out.push_back({"ctx.high", &hierarchy.context_high});
  for (auto& [name, mat] : gnn.named_tensors()) out.push_back({"gnn." + name, mat});
  return out;
}

ForwardResult model_forward(ad::Tape& t, Model& model, const FeatureBag& bag,
                            bool want_contributors) {
  const TextHierarchy& h = model.hierarchy;
  const ModelConfig& cfg = model.cfg;
  ForwardResult fr;

  Var ctx_low = t.param(model.hierarchy.context_low);
  Var ctx_high = t.param(model.hierarchy.context_high);
  fr.params.push_back({&model.hierarchy.context_low, ctx_low});
  fr.params.push_back({&model.hierarchy.context_high, ctx_high});
  fr.encoded = encode_texts_ad(t, ctx_low, ctx_high, h, model.stub);

  EncodedTexts texts{t.val(fr.encoded.e_low), t.val(fr.encoded.e_high)};
  fr.masks = cfg.modules.tgdf
                 ? tgdf(bag, texts, h, cfg.alpha, cfg.modules.tgdf_sw)
                 : masks_all_on(bag, h);
  fr.graph = build_hhg(bag, texts, h, fr.masks, cfg.modules.hhg);

  NodeStateVars init;
  init.x_low = t.constant(fr.graph.x_low);
  init.x_high = t.constant(fr.graph.x_high);
  init.t_low = fr.encoded.e_low;
  init.t_high = fr.encoded.e_high;

  fr.gnn_bypassed = !cfg.modules.tgdf && !cfg.modules.hhg;
  if (fr.gnn_bypassed) {
    fr.states = init;
  } else {
    GnnParamVars pv = register_gnn_params(t, model.gnn, fr.params);
    fr.states = gnn_forward(t, fr.graph, init, pv, model.gnn);
  }

  std::vector<int> class_of_parent(static_cast<std::size_t>(h.num_parents()));
  for (int o = 0; o < h.num_parents(); ++o)
    class_of_parent[static_cast<std::size_t>(o)] = h.class_of_parent(o);
  std::vector<int> class_of_child(static_cast<std::size_t>(h.num_children()));
  for (int s = 0; s < h.num_children(); ++s)
    class_of_child[static_cast<std::size_t>(s)] = h.class_of_child(s);

  fr.logits_low = class_logits(t, fr.states.x_low, fr.states.t_low,
                               class_of_parent, h.num_classes, cfg.top_k_low,
                               cfg.gamma, want_contributors ? &fr.contrib_low : nullptr);
  fr.logits_high = class_logits(t, fr.states.x_high, fr.states.t_high,
                                class_of_child, h.num_classes, cfg.top_k_high,
                                cfg.gamma, want_contributors ? &fr.contrib_high : nullptr);
  auto fused = fuse_and_ce(t, fr.logits_low, fr.logits_high, bag.label);
  fr.fused_logits = fused.fused;
  fr.ce = fused.ce;

  if (cfg.modules.htcl && cfg.lambda > 0.0) {
    fr.htcl = htcl_loss(t, fr.states.t_low, fr.states.t_high, h, cfg.htcl_variant);
    fr.loss = total_loss(t, fr.ce, fr.htcl, cfg.lambda);
  } else {
    fr.loss = fr.ce;
  }
  return fr;
}

Prediction predict(Model& model, const FeatureBag& bag) {
  ad::Tape t;
  ForwardResult fr = model_forward(t, model, bag);
  const Mat& logits = t.val(fr.fused_logits);
  Prediction p;
  p.fused_logits = logits.row(0).transpose();
  const double mx = p.fused_logits.maxCoeff();
  Vec ex = (p.fused_logits.array() - mx).exp();
  p.probabilities = ex / ex.sum();
  p.label = 0;
  for (int c = 1; c < p.fused_logits.size(); ++c)
    if (p.fused_logits(c) > p.fused_logits(p.label)) p.label = c;
  return p;
}

}  // namespace hivemil
