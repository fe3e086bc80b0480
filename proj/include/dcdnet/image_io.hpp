#pragma once

#include <filesystem>

#include "dcdnet/data_synth.hpp"

// 8-bit portable pixmap/graymap (binary P6/P5) I/O.
namespace dcdnet::io {

void write_ppm(const std::filesystem::path& path, const data::ImageGrid& image);
data::ImageGrid read_ppm(const std::filesystem::path& path);

// Masks are stored as 0/255.
void write_pgm(const std::filesystem::path& path, const data::MaskGrid& mask);
data::MaskGrid read_pgm_mask(const std::filesystem::path& path);

// Any [1,H,W] or [H,W] map with values in [0,1], e.g. fusion weights or scores.
void write_pgm(const std::filesystem::path& path, const Tensor& map01);

}  // namespace dcdnet::io
