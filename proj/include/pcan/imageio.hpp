#pragma once

#include <cstdint>
#include <string>
#include <vector>

namespace pcan::imageio {

// Lossless array container used for per-scene images and mask stacks.
// Layout: magic "PCN1", u32 H, u32 W, u32 channels (little-endian), then
// row-major float32 data indexed [y][x][c].
void write_pcn1(const std::string& path, int h, int w, int c, const std::vector<float>& data);
std::vector<float> read_pcn1(const std::string& path, int& h, int& w, int& c);

// Minimal RGB8 PNG writer (stored deflate blocks, no compression).
// `rgb` is row-major [y][x][3], values already in [0, 255].
void write_png(const std::string& path, int h, int w, const std::vector<uint8_t>& rgb);

}  // namespace pcan::imageio
