#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "hivemil/common.hpp"
#include "hivemil/rng.hpp"
#include "hivemil/tape.hpp"

namespace hivemil {

// One low-scale patch covers a fixed 4x4 grid of high-scale patches.
inline constexpr int kChildrenPerPatch = 16;

// r = 16n + m
int flatten_index(int low_patch, int grid_pos);
// n = floor(r / 16)
int parent_patch(int high_patch);

// One slide: N low-scale rows, R = 16N high-scale rows with zero padding
// where a grid cell holds no real patch.
struct FeatureBag {
  std::string bag_id;
  Mat low_feats;                // N x D, unit-norm rows
  Mat high_feats;               // R x D, zero rows where invalid
  std::vector<char> validity;   // length R
  int label = 0;

  int num_low() const { return static_cast<int>(low_feats.rows()); }
  int num_high() const { return static_cast<int>(high_feats.rows()); }
  int dim() const { return static_cast<int>(low_feats.cols()); }
  int num_valid() const;

  // Renormalizes valid rows, then checks the structural invariants.
  void normalize_and_validate();
};

// Places up to 16 child feature vectors at their grid positions, zero-padding
// the rest. Returns the 16 x D block and its validity flags.
std::pair<Mat, std::vector<char>> pad_children(const std::vector<Vec>& children,
                                               const std::vector<int>& positions,
                                               int dim);

// Per-class prompt hierarchy: O parents, each with K children, plus the
// learnable context token banks for the two scales.
struct TextHierarchy {
  int num_classes = 0;       // C
  int parents_per_class = 0; // O
  int children_per_parent = 0; // K
  Mat base_parent_emb;       // (C*O) x D_base
  Mat base_child_emb;        // (C*O*K) x D_base
  Mat context_low;           // L x D_base, learnable
  Mat context_high;          // L x D_base, learnable

  int num_parents() const { return num_classes * parents_per_class; }
  int num_children() const {
    return num_classes * parents_per_class * children_per_parent;
  }
  int dim_base() const { return static_cast<int>(base_parent_emb.cols()); }
  int context_len() const { return static_cast<int>(context_low.rows()); }

  // Canonical layout: parent o = c*O + o_local, child s = o*K + k.
  int parent_of_child(int s) const { return s / children_per_parent; }
  int class_of_parent(int o) const { return o / parents_per_class; }
  int class_of_child(int s) const { return class_of_parent(parent_of_child(s)); }
  std::vector<int> children_of_parent(int o) const;

  void validate() const;
};

struct EncodedTexts {
  Mat e_low;   // (C*O) x D, unit-norm rows
  Mat e_high;  // (C*O*K) x D, unit-norm rows
};

// Stand-in for the frozen VLM text encoder: a fixed linear projection over the
// mean of (context tokens ++ base embedding). Gradients reach the context
// tokens only; the projection never trains.
struct EncoderStub {
  Mat projection;  // D x D_base
  bool is_identity = false;

  static EncoderStub identity(int dim);
  static EncoderStub random(int dim_base, int dim_out, std::uint64_t seed);

  int dim_out() const { return static_cast<int>(projection.rows()); }
};

// prompt_i -> l2_normalize(P * mean(stack(context rows, base_i)))
EncodedTexts encode_texts(const TextHierarchy& h, const EncoderStub& stub);

struct EncodedTextVars {
  ad::Tape::Var e_low;
  ad::Tape::Var e_high;
};

// Tape version; ctx_low / ctx_high are the learnable leaves.
EncodedTextVars encode_texts_ad(ad::Tape& tape, ad::Tape::Var ctx_low,
                                ad::Tape::Var ctx_high, const TextHierarchy& h,
                                const EncoderStub& stub);

// --- dataset serialization ---
// <dir>/hierarchy.json plus <dir>/bags/<bag_id>.json + .low.f32 + .high.f32
// (row-major little-endian float32; validity as a base64 LSB-first bitset).
void save_bag(const FeatureBag& bag, const std::string& dir);
FeatureBag load_bag(const std::string& dir, const std::string& bag_id);
void save_hierarchy(const TextHierarchy& h, const std::string& path);
TextHierarchy load_hierarchy(const std::string& path);

struct Dataset {
  std::vector<FeatureBag> bags;
  TextHierarchy hierarchy;
};

void save_dataset(const Dataset& ds, const std::string& dir);
Dataset load_dataset(const std::string& dir);

}  // namespace hivemil
