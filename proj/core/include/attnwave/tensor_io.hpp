#pragma once

#include <filesystem>

#include "attnwave/tensor.hpp"

namespace attnwave {

// Binary tensor file: magic "ATNW", one version byte (1), then little-endian
// u64 extent count, extents, and the raw float64 row-major payload.
void save_tensor(const std::filesystem::path& path, const Tensor& t);
Tensor load_tensor(const std::filesystem::path& path);

}  // namespace attnwave
