#pragma once

// Binary Netpbm I/O: P6 colour images as [3,H,W] and P5 grey maps as [1,H,W], maxval 255.
// Values map as v = round(x * 255) on write and x = v / 255 on read.

#include <filesystem>
#include <string>

#include "topicnet/tensor.hpp"

namespace topicnet::netpbm {

std::uint8_t quantize(double x);
inline double dequantize(std::uint8_t v) { return static_cast<double>(v) / 255.0; }

std::string encode_ppm(const Tensor& image);
std::string encode_pgm(const Tensor& map);
// Accepts P5 or P6 headers; channel count follows the magic.
Tensor decode(const std::string& bytes);

void write_ppm(const std::filesystem::path& path, const Tensor& image);
void write_pgm(const std::filesystem::path& path, const Tensor& map);
Tensor read(const std::filesystem::path& path);

std::string read_file(const std::filesystem::path& path);
void write_file(const std::filesystem::path& path, const std::string& bytes);

}  // namespace topicnet::netpbm
