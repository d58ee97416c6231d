#pragma once

#include <string>
#include <utility>
#include <vector>

#include "phydra/tensor.hpp"

namespace phydra {

// Flat binary container of named tensors.
//
// Layout (little-endian throughout):
//   magic   "PHYW" (4 bytes)
//   version u8 = 1
//   count   u32
//   records: name_len u16, name bytes, rank u8, dims u32 each,
//            values f64 (IEEE-754 little-endian)
void save_weights(const std::string& path,
                  const std::vector<std::pair<std::string, Tensor>>& items);

std::vector<std::pair<std::string, Tensor>> load_weights(
    const std::string& path);

}  // namespace phydra
