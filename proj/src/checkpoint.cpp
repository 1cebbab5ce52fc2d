#include "hivemil/checkpoint.hpp"

#include <fstream>
#include <map>
#include <nlohmann/json.hpp>

using json = nlohmann::json;

namespace hivemil {

void save_checkpoint(const std::vector<std::pair<std::string, Mat*>>& tensors,
                     const std::string& stem) {
  std::ofstream bin(stem + ".bin", std::ios::binary);
  if (!bin) throw IoError("cannot write " + stem + ".bin");
  json manifest = json::array();
  std::uint64_t offset = 0;
  for (const auto& [name, mat] : tensors) {
    json entry;
    entry["name"] = name;
    entry["rows"] = mat->rows();
    entry["cols"] = mat->cols();
    entry["dtype"] = "float64";
    entry["byte_offset"] = offset;
    manifest.push_back(entry);
    for (Eigen::Index i = 0; i < mat->rows(); ++i)
      for (Eigen::Index j = 0; j < mat->cols(); ++j) {
        double x = (*mat)(i, j);
        bin.write(reinterpret_cast<const char*>(&x), sizeof(double));
        offset += sizeof(double);
      }
  }
  std::ofstream mf(stem + ".json");
  mf << manifest.dump(2) << "\n";
}

void load_checkpoint(const std::vector<std::pair<std::string, Mat*>>& tensors,
                     const std::string& stem) {
  std::ifstream mf(stem + ".json");
  if (!mf) throw IoError("missing checkpoint manifest: " + stem + ".json");
  json manifest = json::parse(mf);
  struct Entry {
    long rows, cols;
    std::uint64_t offset;
  };
  std::map<std::string, Entry> entries;
  for (const auto& e : manifest)
    entries[e.at("name").get<std::string>()] = {e.at("rows").get<long>(),
                                                e.at("cols").get<long>(),
                                                e.at("byte_offset").get<std::uint64_t>()};
  std::ifstream bin(stem + ".bin", std::ios::binary);
  if (!bin) throw IoError("missing checkpoint blob: " + stem + ".bin");
  for (const auto& [name, mat] : tensors) {
    auto it = entries.find(name);
    if (it == entries.end()) throw IoError("checkpoint missing tensor: " + name);
    const Entry& e = it->second;
    if (e.rows != mat->rows() || e.cols != mat->cols())
      throw IoError("checkpoint shape mismatch for " + name);
    bin.seekg(static_cast<std::streamoff>(e.offset));
    for (Eigen::Index i = 0; i < mat->rows(); ++i)
      for (Eigen::Index j = 0; j < mat->cols(); ++j) {
        double x;
        bin.read(reinterpret_cast<char*>(&x), sizeof(double));
        if (!bin) throw IoError("truncated checkpoint blob: " + stem + ".bin");
        (*mat)(i, j) = x;
      }
  }
}

}  // namespace hivemil
