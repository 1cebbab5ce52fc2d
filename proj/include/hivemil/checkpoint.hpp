#pragma once

#include <string>
#include <utility>
#include <vector>

#include "hivemil/common.hpp"

namespace hivemil {

// Named float-array blob: <stem>.bin (row-major little-endian float64) plus
// <stem>.json manifest entries {name, rows, cols, dtype, byte_offset}.
void save_checkpoint(const std::vector<std::pair<std::string, Mat*>>& tensors,
                     const std::string& stem);

// Loads into the given tensors; names and shapes must match the manifest.
void load_checkpoint(const std::vector<std::pair<std::string, Mat*>>& tensors,
                     const std::string& stem);

}  // namespace hivemil
