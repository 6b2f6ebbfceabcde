#pragma once
// Minimal RGB PNG writer (zlib-deflated) and the prediction/ground-truth
// overlay renderer: prediction-only red, ground-truth-only green,
// overlap yellow, elsewhere the grayscale frame.

#include <cstdint>
#include <filesystem>
#include <vector>

#include "pointseg/tensor.hpp"

namespace pointseg::png {

void write_rgb(const std::filesystem::path& path, const std::vector<std::uint8_t>& rgb,
               std::int64_t width, std::int64_t height);

// frame [H,W] in [0,1]; pred/gt binary [H,W]; gt may be undefined.
std::vector<std::uint8_t> overlay_rgb(const Tensor& frame, const Tensor& pred,
                                      const Tensor& gt);

}  // namespace pointseg::png
