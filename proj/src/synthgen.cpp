#include "hivemil/synthgen.hpp"

#include <filesystem>
#include <fstream>
#include <nlohmann/json.hpp>

#include "hivemil/rng.hpp"

namespace fs = std::filesystem;
using json = nlohmann::json;

namespace hivemil {

void SynthConfig::validate() const {
  if (num_classes < 1) throw ConfigError("synth: num_classes must be >= 1");
  if (bags_per_class < 1) throw ConfigError("synth: bags_per_class must be >= 1");
  if (n_min < 1 || n_max < n_min) throw ConfigError("synth: bad N range");
  if (dim < 2) throw ConfigError("synth: dim must be >= 2");
  if (parents_per_class < 1 || children_per_parent < 1)
    throw ConfigError("synth: O and K must be >= 1");
  if (signal_fraction < 0.0 || signal_fraction > 1.0)
    throw ConfigError("synth: signal_fraction must be in [0,1]");
  if (noise_scale < 0.0) throw ConfigError("synth: noise_scale must be >= 0");
  if (shared_parents < 0 || shared_parents > parents_per_class)
    throw ConfigError("synth: shared_parents out of range");
  if (background_pool < 1) throw ConfigError("synth: background_pool must be >= 1");
  if (invalid_child_rate < 0.0 || invalid_child_rate >= 1.0)
    throw ConfigError("synth: invalid_child_rate must be in [0,1)");
  if (context_len < 1) throw ConfigError("synth: context_len must be >= 1");
}

namespace {

struct Prototypes {
  // parents[c*O + o], children[(c*O + o)*K + k], background[j]
  std::vector<Vec> parents, children, background;
};

Prototypes draw_prototypes(const SynthConfig& cfg, Rng& rng) {
  Prototypes p;
  std::vector<Vec> shared(static_cast<std::size_t>(cfg.shared_parents));
  for (auto& v : shared) v = rng.unit_vec(cfg.dim);

  for (int c = 0; c < cfg.num_classes; ++c) {
    for (int o = 0; o < cfg.parents_per_class; ++o) {
      Vec parent = o < cfg.shared_parents ? shared[static_cast<std::size_t>(o)]
                                          : rng.unit_vec(cfg.dim);
      p.parents.push_back(parent);
      for (int k = 0; k < cfg.children_per_parent; ++k) {
        Vec child = l2_normalize(parent + cfg.child_spread * rng.unit_vec(cfg.dim));
        p.children.push_back(child);
      }
    }
  }
  for (int j = 0; j < cfg.background_pool; ++j)
    p.background.push_back(rng.unit_vec(cfg.dim));
  return p;
}

TextHierarchy build_hierarchy(const SynthConfig& cfg, const Prototypes& p, Rng& rng) {
  TextHierarchy h;
  h.num_classes = cfg.num_classes;
  h.parents_per_class = cfg.parents_per_class;
  h.children_per_parent = cfg.children_per_parent;
  const double sigma = cfg.text_noise_frac * cfg.noise_scale;
  h.base_parent_emb.resize(h.num_parents(), cfg.dim);
  for (int o = 0; o < h.num_parents(); ++o)
    h.base_parent_emb.row(o) =
        (p.parents[static_cast<std::size_t>(o)] + rng.noise_vec(cfg.dim, sigma)).transpose();
  h.base_child_emb.resize(h.num_children(), cfg.dim);
  for (int s = 0; s < h.num_children(); ++s)
    h.base_child_emb.row(s) =
        (p.children[static_cast<std::size_t>(s)] + rng.noise_vec(cfg.dim, sigma)).transpose();
  h.context_low = Mat::Zero(cfg.context_len, cfg.dim);
  h.context_high = Mat::Zero(cfg.context_len, cfg.dim);
  h.validate();
  return h;
}

FeatureBag make_bag(const SynthConfig& cfg, const Prototypes& p, int cls,
                    int index, std::uint64_t bag_stream) {
  Rng rng = Rng::stream(cfg.seed, bag_stream);
  FeatureBag bag;
  char id[64];
  std::snprintf(id, sizeof(id), "bag_c%02d_i%04d", cls, index);
  bag.bag_id = id;
  bag.label = cls;

  const int n = cfg.n_min + static_cast<int>(rng.below(static_cast<std::uint64_t>(cfg.n_max - cfg.n_min + 1)));
  const Vec shift = rng.noise_vec(cfg.dim, cfg.bag_shift_frac * cfg.noise_scale);

  bag.low_feats.resize(n, cfg.dim);
  bag.high_feats = Mat::Zero(n * kChildrenPerPatch, cfg.dim);
  bag.validity.assign(static_cast<std::size_t>(n * kChildrenPerPatch), 0);

  auto noisy = [&](const Vec& proto) {
    return l2_normalize(Vec(proto + rng.noise_vec(cfg.dim, cfg.noise_scale) + shift));
  };

  for (int i = 0; i < n; ++i) {
    const bool signal = rng.uniform() < cfg.signal_fraction;
    if (signal) {
      const int o_local = static_cast<int>(rng.below(static_cast<std::uint64_t>(cfg.parents_per_class)));
      const int o = cls * cfg.parents_per_class + o_local;
      bag.low_feats.row(i) = noisy(p.parents[static_cast<std::size_t>(o)]).transpose();
      for (int m = 0; m < kChildrenPerPatch; ++m) {
        if (rng.uniform() < cfg.invalid_child_rate) continue;
        const int k = static_cast<int>(rng.below(static_cast<std::uint64_t>(cfg.children_per_parent)));
        const int s = o * cfg.children_per_parent + k;
        const int r = flatten_index(i, m);
        bag.high_feats.row(r) = noisy(p.children[static_cast<std::size_t>(s)]).transpose();
        bag.validity[static_cast<std::size_t>(r)] = 1;
      }
    } else {
      const int j = static_cast<int>(rng.below(static_cast<std::uint64_t>(cfg.background_pool)));
      bag.low_feats.row(i) = noisy(p.background[static_cast<std::size_t>(j)]).transpose();
      for (int m = 0; m < kChildrenPerPatch; ++m) {
        if (rng.uniform() < cfg.invalid_child_rate) continue;
        const int jc = static_cast<int>(rng.below(static_cast<std::uint64_t>(cfg.background_pool)));
        const int r = flatten_index(i, m);
        bag.high_feats.row(r) = noisy(p.background[static_cast<std::size_t>(jc)]).transpose();
        bag.validity[static_cast<std::size_t>(r)] = 1;
      }
    }
  }
  bag.normalize_and_validate();
  return bag;
}

}  // namespace

Dataset generate_dataset(const SynthConfig& cfg) {
  cfg.validate();
  Rng proto_rng = Rng::stream(cfg.seed, 0);
  Prototypes p = draw_prototypes(cfg, proto_rng);

  Dataset ds;
  Rng text_rng = Rng::stream(cfg.seed, 1);
  ds.hierarchy = build_hierarchy(cfg, p, text_rng);

  std::uint64_t stream = 2;
  for (int c = 0; c < cfg.num_classes; ++c)
    for (int b = 0; b < cfg.bags_per_class; ++b)
      ds.bags.push_back(make_bag(cfg, p, c, b, stream++));
  return ds;
}

std::string synth_manifest_json(const SynthConfig& cfg) {
  json j;
  j["num_classes"] = cfg.num_classes;
  j["bags_per_class"] = cfg.bags_per_class;
  j["n_min"] = cfg.n_min;
  j["n_max"] = cfg.n_max;
  j["dim"] = cfg.dim;
  j["parents_per_class"] = cfg.parents_per_class;
  j["children_per_parent"] = cfg.children_per_parent;
  j["signal_fraction"] = cfg.signal_fraction;
  j["noise_scale"] = cfg.noise_scale;
  j["seed"] = cfg.seed;
  j["shared_parents"] = cfg.shared_parents;
  j["background_pool"] = cfg.background_pool;
  j["child_spread"] = cfg.child_spread;
  j["bag_shift_frac"] = cfg.bag_shift_frac;
  j["text_noise_frac"] = cfg.text_noise_frac;
  j["invalid_child_rate"] = cfg.invalid_child_rate;
  j["context_len"] = cfg.context_len;
  return j.dump(2);
}

SynthConfig synth_config_from_json(const std::string& text) {
  json j = json::parse(text);
  SynthConfig cfg;
  auto get = [&](const char* key, auto& field) {
    if (j.contains(key)) field = j.at(key).get<std::decay_t<decltype(field)>>();
  };
  get("num_classes", cfg.num_classes);
  get("bags_per_class", cfg.bags_per_class);
  get("n_min", cfg.n_min);
  get("n_max", cfg.n_max);
  get("dim", cfg.dim);
  get("parents_per_class", cfg.parents_per_class);
  get("children_per_parent", cfg.children_per_parent);
  get("signal_fraction", cfg.signal_fraction);
  get("noise_scale", cfg.noise_scale);
  get("seed", cfg.seed);
  get("shared_parents", cfg.shared_parents);
  get("background_pool", cfg.background_pool);
  get("child_spread", cfg.child_spread);
  get("bag_shift_frac", cfg.bag_shift_frac);
  get("text_noise_frac", cfg.text_noise_frac);
  get("invalid_child_rate", cfg.invalid_child_rate);
  get("context_len", cfg.context_len);
  cfg.validate();
  return cfg;
}

void generate_and_save(const SynthConfig& cfg, const std::string& dir) {
  Dataset ds = generate_dataset(cfg);
  save_dataset(ds, dir);
  std::ofstream f((fs::path(dir) / "manifest.json").string());
  f << synth_manifest_json(cfg) << "\n";
}

}  // namespace hivemil
