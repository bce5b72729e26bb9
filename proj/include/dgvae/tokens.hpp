#pragma once

#include <cstdint>
#include <vector>

namespace dgvae {

using Token = std::uint32_t;
// Begin and end markers are included in every stored sequence.
using TokenSequence = std::vector<Token>;

inline constexpr Token kBos = 0;
inline constexpr Token kEos = 1;

}  // namespace dgvae
