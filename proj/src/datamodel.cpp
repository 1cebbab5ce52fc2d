#include "hivemil/datamodel.hpp"

#include <filesystem>
#include <fstream>
#include <nlohmann/json.hpp>
#include <set>

#include "hivemil/base64.hpp"

namespace fs = std::filesystem;
using json = nlohmann::json;

namespace hivemil {

int flatten_index(int low_patch, int grid_pos) {
  if (low_patch < 0) throw std::invalid_argument("flatten_index: negative patch index");
  if (grid_pos < 0 || grid_pos >= kChildrenPerPatch)
    throw std::invalid_argument("flatten_index: grid position out of range");
  return kChildrenPerPatch * low_patch + grid_pos;
}

int parent_patch(int high_patch) {
  if (high_patch < 0) throw std::invalid_argument("parent_patch: negative index");
  return high_patch / kChildrenPerPatch;
}

int FeatureBag::num_valid() const {
  int c = 0;
  for (char v : validity) c += v ? 1 : 0;
  return c;
}

void FeatureBag::normalize_and_validate() {
  const int n = num_low();
  const int r = num_high();
  if (r != n * kChildrenPerPatch)
    throw std::invalid_argument("FeatureBag: R != 16*N for bag " + bag_id);
  if (static_cast<int>(validity.size()) != r)
    throw std::invalid_argument("FeatureBag: validity length mismatch");
  l2_normalize_rows_inplace(low_feats);
  for (int i = 0; i < r; ++i) {
    if (validity[i]) {
      double nrm = high_feats.row(i).norm();
      if (nrm > kNormEps) high_feats.row(i) /= nrm;
    } else {
      if (high_feats.row(i).cwiseAbs().maxCoeff() != 0.0)
        throw std::invalid_argument("FeatureBag: invalid row is not zero in " + bag_id);
    }
  }
}

std::pair<Mat, std::vector<char>> pad_children(const std::vector<Vec>& children,
                                               const std::vector<int>& positions,
                                               int dim) {
  if (children.size() != positions.size())
    throw std::invalid_argument("pad_children: children/positions size mismatch");
  std::set<int> seen;
  Mat block = Mat::Zero(kChildrenPerPatch, dim);
  std::vector<char> valid(kChildrenPerPatch, 0);
  for (std::size_t i = 0; i < children.size(); ++i) {
    int m = positions[i];
    if (m < 0 || m >= kChildrenPerPatch)
      throw std::invalid_argument("pad_children: position out of range");
    if (!seen.insert(m).second)
      throw std::invalid_argument("pad_children: duplicate position");
    block.row(m) = children[i].transpose();
    valid[static_cast<std::size_t>(m)] = 1;
  }
  return {block, valid};
}

std::vector<int> TextHierarchy::children_of_parent(int o) const {
  std::vector<int> out(static_cast<std::size_t>(children_per_parent));
  for (int k = 0; k < children_per_parent; ++k)
    out[static_cast<std::size_t>(k)] = o * children_per_parent + k;
  return out;
}

void TextHierarchy::validate() const {
  if (num_classes < 1 || parents_per_class < 1 || children_per_parent < 1)
    throw ConfigError("TextHierarchy: C, O, K must be positive");
  if (base_parent_emb.rows() != num_parents())
    throw ConfigError("TextHierarchy: parent embedding count mismatch");
  if (base_child_emb.rows() != num_children())
    throw ConfigError("TextHierarchy: child embedding count mismatch");
  if (base_parent_emb.cols() != base_child_emb.cols() ||
      context_low.cols() != base_parent_emb.cols() ||
      context_high.cols() != base_parent_emb.cols())
    throw ConfigError("TextHierarchy: embedding width mismatch");
  for (int s = 0; s < num_children(); ++s) {
    if (class_of_child(s) != class_of_parent(parent_of_child(s)))
      throw ConfigError("TextHierarchy: class maps inconsistent");
  }
}

EncoderStub EncoderStub::identity(int dim) {
  EncoderStub s;
  s.projection = Mat::Identity(dim, dim);
  s.is_identity = true;
  return s;
}

EncoderStub EncoderStub::random(int dim_base, int dim_out, std::uint64_t seed) {
  EncoderStub s;
  Rng rng(seed);
  s.projection = rng.gaussian_mat(dim_out, dim_base, 1.0 / std::sqrt(dim_base));
  s.is_identity = false;
  return s;
}

static Mat encode_block(const Mat& base, const Mat& ctx, const EncoderStub& stub) {
  const double inv = 1.0 / static_cast<double>(ctx.rows() + 1);
  Mat pooled = base;
  pooled.rowwise() += ctx.colwise().sum();
  pooled *= inv;
  Mat out = stub.is_identity ? pooled : Mat(pooled * stub.projection.transpose());
  l2_normalize_rows_inplace(out);
  return out;
}

EncodedTexts encode_texts(const TextHierarchy& h, const EncoderStub& stub) {
  if (stub.projection.cols() != h.dim_base())
    throw ConfigError("encode_texts: projection input width != D_base");
  EncodedTexts e;
  e.e_low = encode_block(h.base_parent_emb, h.context_low, stub);
  e.e_high = encode_block(h.base_child_emb, h.context_high, stub);
  return e;
}

static ad::Tape::Var encode_block_ad(ad::Tape& t, ad::Tape::Var ctx,
                                     const Mat& base, const EncoderStub& stub) {
  const double inv = 1.0 / static_cast<double>(t.val(ctx).rows() + 1);
  auto pooled = t.scale(t.add_row_broadcast(t.constant(base), t.colsum(ctx)), inv);
  auto projected = stub.is_identity
                       ? pooled
                       : t.matmul(pooled, t.constant(stub.projection.transpose()));
  return t.row_l2_normalize(projected);
}

EncodedTextVars encode_texts_ad(ad::Tape& tape, ad::Tape::Var ctx_low,
                                ad::Tape::Var ctx_high, const TextHierarchy& h,
                                const EncoderStub& stub) {
  if (stub.projection.cols() != h.dim_base())
    throw ConfigError("encode_texts: projection input width != D_base");
  EncodedTextVars out;
  out.e_low = encode_block_ad(tape, ctx_low, h.base_parent_emb, stub);
  out.e_high = encode_block_ad(tape, ctx_high, h.base_child_emb, stub);
  return out;
}

// --- serialization ---

static void write_f32(const std::string& path, const Mat& m) {
  std::ofstream f(path, std::ios::binary);
  if (!f) throw IoError("cannot write " + path);
  for (Eigen::Index i = 0; i < m.rows(); ++i)
    for (Eigen::Index j = 0; j < m.cols(); ++j) {
      float x = static_cast<float>(m(i, j));
      f.write(reinterpret_cast<const char*>(&x), sizeof(float));
    }
}

static Mat read_f32(const std::string& path, int rows, int cols) {
  std::ifstream f(path, std::ios::binary);
  if (!f) throw IoError("cannot read " + path);
  Mat m(rows, cols);
  for (int i = 0; i < rows; ++i)
    for (int j = 0; j < cols; ++j) {
      float x;
      f.read(reinterpret_cast<char*>(&x), sizeof(float));
      if (!f) throw IoError("truncated float array: " + path);
      m(i, j) = static_cast<double>(x);
    }
  return m;
}

static std::string validity_to_b64(const std::vector<char>& v) {
  std::vector<std::uint8_t> bytes((v.size() + 7) / 8, 0);
  for (std::size_t i = 0; i < v.size(); ++i)
    if (v[i]) bytes[i / 8] |= static_cast<std::uint8_t>(1u << (i % 8));
  return base64_encode(bytes);
}

static std::vector<char> validity_from_b64(const std::string& s, int len) {
  auto bytes = base64_decode(s);
  std::vector<char> v(static_cast<std::size_t>(len), 0);
  for (int i = 0; i < len; ++i)
    v[static_cast<std::size_t>(i)] =
        (bytes[static_cast<std::size_t>(i) / 8] >> (i % 8)) & 1;
  return v;
}

static std::string mat_to_b64(const Mat& m) {
  std::vector<std::uint8_t> bytes(static_cast<std::size_t>(m.size()) * sizeof(float));
  auto* p = reinterpret_cast<float*>(bytes.data());
  for (Eigen::Index i = 0; i < m.rows(); ++i)
    for (Eigen::Index j = 0; j < m.cols(); ++j)
      *p++ = static_cast<float>(m(i, j));
  return base64_encode(bytes);
}

static Mat mat_from_b64(const std::string& s, int rows, int cols) {
  auto bytes = base64_decode(s);
  if (bytes.size() != static_cast<std::size_t>(rows) * cols * sizeof(float))
    throw IoError("embedded float array has wrong size");
  Mat m(rows, cols);
  const auto* p = reinterpret_cast<const float*>(bytes.data());
  for (int i = 0; i < rows; ++i)
    for (int j = 0; j < cols; ++j) m(i, j) = static_cast<double>(*p++);
  return m;
}

void save_bag(const FeatureBag& bag, const std::string& dir) {
  fs::create_directories(fs::path(dir) / "bags");
  const std::string stem = (fs::path(dir) / "bags" / bag.bag_id).string();
  write_f32(stem + ".low.f32", bag.low_feats);
  write_f32(stem + ".high.f32", bag.high_feats);
  json j;
  j["bag_id"] = bag.bag_id;
  j["N"] = bag.num_low();
  j["M"] = kChildrenPerPatch;
  j["D"] = bag.dim();
  j["label"] = bag.label;
  j["validity"] = validity_to_b64(bag.validity);
  std::ofstream f(stem + ".json");
  f << j.dump(2) << "\n";
}

FeatureBag load_bag(const std::string& dir, const std::string& bag_id) {
  const std::string stem = (fs::path(dir) / "bags" / bag_id).string();
  std::ifstream f(stem + ".json");
  if (!f) throw IoError("missing bag sidecar: " + stem + ".json");
  json j = json::parse(f);
  FeatureBag bag;
  bag.bag_id = j.at("bag_id").get<std::string>();
  int n = j.at("N").get<int>();
  int d = j.at("D").get<int>();
  int m = j.at("M").get<int>();
  if (m != kChildrenPerPatch) throw IoError("bag " + bag_id + ": unsupported M");
  bag.label = j.at("label").get<int>();
  bag.low_feats = read_f32(stem + ".low.f32", n, d);
  bag.high_feats = read_f32(stem + ".high.f32", n * kChildrenPerPatch, d);
  bag.validity = validity_from_b64(j.at("validity").get<std::string>(),
                                   n * kChildrenPerPatch);
  // Zero out padded rows explicitly; f32 round-trip keeps them zero anyway.
  for (int r = 0; r < bag.num_high(); ++r)
    if (!bag.validity[static_cast<std::size_t>(r)]) bag.high_feats.row(r).setZero();
  bag.normalize_and_validate();
  return bag;
}

void save_hierarchy(const TextHierarchy& h, const std::string& path) {
  json j;
  j["num_classes"] = h.num_classes;
  j["parents_per_class"] = h.parents_per_class;
  j["children_per_parent"] = h.children_per_parent;
  j["dim_base"] = h.dim_base();
  j["context_len"] = h.context_len();
  j["base_parent_emb"] = mat_to_b64(h.base_parent_emb);
  j["base_child_emb"] = mat_to_b64(h.base_child_emb);
  j["context_low"] = mat_to_b64(h.context_low);
  j["context_high"] = mat_to_b64(h.context_high);
  std::ofstream f(path);
  if (!f) throw IoError("cannot write " + path);
  f << j.dump(2) << "\n";
}

TextHierarchy load_hierarchy(const std::string& path) {
  std::ifstream f(path);
  if (!f) throw IoError("missing hierarchy file: " + path);
  json j = json::parse(f);
  TextHierarchy h;
  h.num_classes = j.at("num_classes").get<int>();
  h.parents_per_class = j.at("parents_per_class").get<int>();
  h.children_per_parent = j.at("children_per_parent").get<int>();
  int db = j.at("dim_base").get<int>();
  int L = j.at("context_len").get<int>();
  h.base_parent_emb = mat_from_b64(j.at("base_parent_emb").get<std::string>(),
                                   h.num_parents(), db);
  h.base_child_emb = mat_from_b64(j.at("base_child_emb").get<std::string>(),
                                  h.num_children(), db);
  h.context_low = mat_from_b64(j.at("context_low").get<std::string>(), L, db);
  h.context_high = mat_from_b64(j.at("context_high").get<std::string>(), L, db);
  h.validate();
  return h;
}

void save_dataset(const Dataset& ds, const std::string& dir) {
  fs::create_directories(dir);
  save_hierarchy(ds.hierarchy, (fs::path(dir) / "hierarchy.json").string());
  json index = json::array();
  for (const auto& bag : ds.bags) {
    save_bag(bag, dir);
    index.push_back(bag.bag_id);
  }
  std::ofstream f((fs::path(dir) / "bags.json").string());
  f << index.dump(2) << "\n";
}

Dataset load_dataset(const std::string& dir) {
  Dataset ds;
  ds.hierarchy = load_hierarchy((fs::path(dir) / "hierarchy.json").string());
  std::ifstream f((fs::path(dir) / "bags.json").string());
  if (!f) throw IoError("missing bag index: " + dir + "/bags.json");
  json index = json::parse(f);
  for (const auto& id : index)
    ds.bags.push_back(load_bag(dir, id.get<std::string>()));
  return ds;
}

}  // namespace hivemil
