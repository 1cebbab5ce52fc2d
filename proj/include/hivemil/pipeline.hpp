#pragma once

#include <cstdint>
#include <string>
#include <utility>
#include <vector>

#include "hivemil/hhgnn.hpp"
#include "hivemil/objective.hpp"
#include "hivemil/tgdf.hpp"

namespace hivemil {

// Module on/off axis of the ablation table plus the TGDF-internal switches.
// With both tgdf and hhg off the graph stage is skipped entirely and the
// model degenerates to top-k cosine scoring of the encoder outputs.
struct ModuleSwitches {
  bool tgdf = true;
  bool hhg = true;
  bool htcl = true;
  TgdfSwitches tgdf_sw;
};

struct ModelConfig {
  int top_k_low = 2;
  int top_k_high = 100;
  double gamma = 4.6052;  // QuiltNet scale; 4.5871 (PLIP) / 4.0315 (CONCH)
  double alpha = 0.5;
  double lambda = 0.5;
  int layers = 2;
  int heads = 2;
  int context_len = 16;
  AggVariant aggregator = AggVariant::kMsa;
  HtclVariant htcl_variant = HtclVariant::kClassWise;
  ModuleSwitches modules;

  void validate() const;
};

// Trainable state: context token banks (inside hierarchy) + GNN weights.
struct Model {
  TextHierarchy hierarchy;
  EncoderStub stub;
  GnnParams gnn;
  ModelConfig cfg;

  static Model init(const TextHierarchy& dataset_hierarchy,
                    const ModelConfig& cfg, std::uint64_t seed);

  std::vector<std::pair<std::string, Mat*>> named_trainables();
};

struct ForwardResult {
  ad::Tape::Var loss, ce, htcl;  // htcl invalid when disabled
  ad::Tape::Var fused_logits, logits_low, logits_high;
  NodeStateVars states;  // post-GNN states (inputs when bypassed)
  EncodedTextVars encoded;
  FilterMasks masks;
  HHGraph graph;
  ClassContributors contrib_low, contrib_high;
  bool gnn_bypassed = false;
  // Registered trainables on this tape, for gradient readback.
  std::vector<std::pair<Mat*, ad::Tape::Var>> params;
};

ForwardResult model_forward(ad::Tape& t, Model& model, const FeatureBag& bag,
                            bool want_contributors = false);

struct Prediction {
  int label = 0;
  Vec probabilities;
  Vec fused_logits;
};

Prediction predict(Model& model, const FeatureBag& bag);

}  // namespace hivemil
