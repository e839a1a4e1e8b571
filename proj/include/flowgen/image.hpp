#pragma once

#include <cmath>
#include <cstdint>
#include <fstream>
#include <string>
#include <vector>

#include "flowgen/tensor.hpp"

namespace flowgen {

// 32x32 RGB image, float values in [0,1], row-major [y][x][c]
struct Image {
  static constexpr int kSize = 32;
  std::vector<float> px;

  Image() : px(static_cast<size_t>(kSize) * kSize * 3, 0.0f) {}

  float& at(int y, int x, int c) {
    return px[(static_cast<size_t>(y) * kSize + x) * 3 + c];
  }
  float at(int y, int x, int c) const {
    return px[(static_cast<size_t>(y) * kSize + x) * 3 + c];
  }

  void clamp01() {
    for (auto& v : px) v = std::min(1.0f, std::max(0.0f, v));
  }

  bool operator==(const Image& o) const { return px == o.px; }
};

// binary PPM (P6), 8-bit, values quantized by round(v * 255)
inline void write_ppm(const Image& img, const std::string& path) {
  std::ofstream f(path, std::ios::binary);
  check(f.good(), "write_ppm: cannot open '" + path + "'");
  f << "P6\n" << Image::kSize << " " << Image::kSize << "\n255\n";
  std::vector<uint8_t> bytes(img.px.size());
  for (size_t i = 0; i < img.px.size(); ++i) {
    float v = std::min(1.0f, std::max(0.0f, img.px[i]));
    bytes[i] = static_cast<uint8_t>(std::lround(v * 255.0f));
  }
  f.write(reinterpret_cast<const char*>(bytes.data()),
          static_cast<std::streamsize>(bytes.size()));
  check(f.good(), "write_ppm: write failed for '" + path + "'");
}

inline Image read_ppm(const std::string& path) {
  std::ifstream f(path, std::ios::binary);
  check(f.good(), "read_ppm: cannot open '" + path + "'");
  std::string magic;
  int w = 0, h = 0, maxval = 0;
  f >> magic >> w >> h >> maxval;
  check(magic == "P6", "read_ppm: '" + path + "' is not a binary PPM");
  check(w == Image::kSize && h == Image::kSize,
        "read_ppm: expected " + std::to_string(Image::kSize) + "x" +
            std::to_string(Image::kSize) + ", got " + std::to_string(w) + "x" +
            std::to_string(h));
  check(maxval == 255, "read_ppm: expected 8-bit maxval 255");
  f.get();  // single whitespace after header
  std::vector<uint8_t> bytes(static_cast<size_t>(w) * h * 3);
  f.read(reinterpret_cast<char*>(bytes.data()),
         static_cast<std::streamsize>(bytes.size()));
  check(f.gcount() == static_cast<std::streamsize>(bytes.size()),
        "read_ppm: truncated payload in '" + path + "'");
  Image img;
  for (size_t i = 0; i < bytes.size(); ++i)
    img.px[i] = static_cast<float>(bytes[i]) / 255.0f;
  return img;
}

}  // namespace flowgen
