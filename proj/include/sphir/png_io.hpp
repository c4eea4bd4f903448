#pragma once

#include <string>

#include "sphir/tensor.hpp"

namespace sphir {

/// 8-bit RGB PNG wrappers. Values map linearly between [0,1] doubles and
/// [0,255] bytes (round-to-nearest on write).
Tensor read_png(const std::string& path);
void write_png(const std::string& path, const Tensor& img);

}  // namespace sphir
