#pragma once

#include <cstdint>
#include <string>

#include "hivemil/datamodel.hpp"

namespace hivemil {

// Generator layout: per class, O parent prototypes on the unit sphere with K
// child prototypes each (parent + spread, renormalized). The first
// `shared_parents` parents per class are drawn from a pool common to all
// classes, so part of the coarse structure is class-blind while children stay
// class-specific. Background patches come from a pool shared across classes,
// and every bag carries its own random shift (scaled by tau) that moves all
// of its patches coherently, mimicking slide-level appearance variation.
struct SynthConfig {
  int num_classes = 3;
  int bags_per_class = 30;
  int n_min = 6;  // low patches per bag, inclusive range
  int n_max = 12;
  int dim = 64;
  int parents_per_class = 4;    // O
  int children_per_parent = 3;  // K
  double signal_fraction = 0.8;  // rho
  double noise_scale = 0.8;      // tau
  std::uint64_t seed = 1;

  int shared_parents = 2;
  int background_pool = 8;
  double child_spread = 0.5;
  double bag_shift_frac = 2.0;    // shift norm scale = frac * tau
  double text_noise_frac = 1.25;  // text base noise norm = frac * tau
  double invalid_child_rate = 0.08;
  int context_len = 16;  // L of the emitted TextHierarchy (tokens start at 0)

  void validate() const;
};

Dataset generate_dataset(const SynthConfig& cfg);

// Full config record for reproducibility; written next to the dataset.
std::string synth_manifest_json(const SynthConfig& cfg);
SynthConfig synth_config_from_json(const std::string& text);

void generate_and_save(const SynthConfig& cfg, const std::string& dir);

}  // namespace hivemil
