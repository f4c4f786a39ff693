#pragma once

#include <cstdint>
#include <filesystem>
#include <vector>

namespace xem {

// 8-bit grayscale PNG, row-major pixels, rows*cols must match pixels.size().
void write_png_gray(const std::filesystem::path& path, const std::vector<std::uint8_t>& pixels,
                    int rows, int cols);

}  // namespace xem
