#pragma once

#include <algorithm>
#include <bit>
#include <cmath>
#include <cstdint>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <span>
#include <string>
#include <vector>

#include <json.hpp>

#include "mechlearn/error.hpp"

namespace mechlearn {

/// Single-channel raster, row-major, isotropic pixel spacing in mm.
class Image2D {
 public:
  Image2D() = default;
  Image2D(int width, int height, double pixel_spacing = 1.0, double fill = 0.0)
      : width_(width), height_(height), spacing_(pixel_spacing) {
    if (width <= 0 || height <= 0) throw InvalidInput("image dimensions must be positive");
    if (!(pixel_spacing > 0.0)) throw InvalidInput("pixel spacing must be positive");
    pixels_.assign(static_cast<std::size_t>(width) * height, fill);
  }

  int width() const noexcept { return width_; }
  int height() const noexcept { return height_; }
  std::size_t size() const noexcept { return pixels_.size(); }
  double pixel_spacing() const noexcept { return spacing_; }
  void set_pixel_spacing(double s) { spacing_ = s; }

  double& operator()(int x, int y) { return pixels_[static_cast<std::size_t>(y) * width_ + x]; }
  double operator()(int x, int y) const { return pixels_[static_cast<std::size_t>(y) * width_ + x]; }
  double& operator[](std::size_t i) { return pixels_[i]; }
  double operator[](std::size_t i) const { return pixels_[i]; }

  std::span<double> pixels() noexcept { return pixels_; }
  std::span<const double> pixels() const noexcept { return pixels_; }

  bool same_shape(const Image2D& o) const noexcept {
    return width_ == o.width_ && height_ == o.height_;
  }
  bool all_finite() const noexcept {
    return std::all_of(pixels_.begin(), pixels_.end(), [](double v) { return std::isfinite(v); });
  }

  friend bool operator==(const Image2D&, const Image2D&) = default;

 private:
  int width_ = 0;
  int height_ = 0;
  double spacing_ = 1.0;
  std::vector<double> pixels_;
};

class BinaryMask {
 public:
  BinaryMask() = default;
  BinaryMask(int width, int height, bool fill = false)
      : width_(width), height_(height),
        bits_(static_cast<std::size_t>(width) * height, fill ? 1 : 0) {
    if (width <= 0 || height <= 0) throw InvalidInput("mask dimensions must be positive");
  }

  int width() const noexcept { return width_; }
  int height() const noexcept { return height_; }
  std::size_t size() const noexcept { return bits_.size(); }

  bool operator()(int x, int y) const { return bits_[static_cast<std::size_t>(y) * width_ + x] != 0; }
  void set(int x, int y, bool v) { bits_[static_cast<std::size_t>(y) * width_ + x] = v ? 1 : 0; }
  bool operator[](std::size_t i) const { return bits_[i] != 0; }
  void set(std::size_t i, bool v) { bits_[i] = v ? 1 : 0; }

  std::size_t count() const noexcept {
    return static_cast<std::size_t>(std::count(bits_.begin(), bits_.end(), std::uint8_t{1}));
  }
  bool empty() const noexcept { return count() == 0; }

  bool same_shape(const BinaryMask& o) const noexcept {
    return width_ == o.width_ && height_ == o.height_;
  }
  bool same_shape(const Image2D& o) const noexcept {
    return width_ == o.width() && height_ == o.height();
  }

  bool contains(const BinaryMask& o) const {
    for (std::size_t i = 0; i < bits_.size(); ++i)
      if (o.bits_[i] && !bits_[i]) return false;
    return true;
  }

  friend bool operator==(const BinaryMask&, const BinaryMask&) = default;

 private:
  int width_ = 0;
  int height_ = 0;
  std::vector<std::uint8_t> bits_;
};

inline BinaryMask mask_union(const BinaryMask& a, const BinaryMask& b) {
  if (!a.same_shape(b)) throw InvalidInput("mask shapes differ");
  BinaryMask out = a;
  for (std::size_t i = 0; i < b.size(); ++i)
    if (b[i]) out.set(i, true);
  return out;
}

/// Masks round-trip through the image format as 0/1 floats.
inline Image2D mask_to_image(const BinaryMask& m, double pixel_spacing = 1.0) {
  Image2D img(m.width(), m.height(), pixel_spacing);
  for (std::size_t i = 0; i < m.size(); ++i) img[i] = m[i] ? 1.0 : 0.0;
  return img;
}

inline BinaryMask image_to_mask(const Image2D& img) {
  BinaryMask m(img.width(), img.height());
  for (std::size_t i = 0; i < img.size(); ++i) m.set(i, img[i] > 0.5);
  return m;
}

// ---------------------------------------------------------------------------
// Image file format:
//   8 bytes  "GLB2DIMG"
//   u32 LE   header length n
//   n bytes  JSON {"width","height","pixel_spacing_mm","dtype":"f32le"}
//   width*height float32 LE, row-major
// ---------------------------------------------------------------------------

inline constexpr char kImageMagic[8] = {'G', 'L', 'B', '2', 'D', 'I', 'M', 'G'};

namespace detail {

static_assert(std::endian::native == std::endian::little || std::endian::native == std::endian::big);

inline void put_u32(std::string& out, std::uint32_t v) {
  for (int i = 0; i < 4; ++i) out.push_back(static_cast<char>((v >> (8 * i)) & 0xFF));
}

inline std::uint32_t get_u32(const unsigned char* p) {
  return std::uint32_t(p[0]) | (std::uint32_t(p[1]) << 8) | (std::uint32_t(p[2]) << 16) |
         (std::uint32_t(p[3]) << 24);
}

inline void put_f32(std::string& out, float f) { put_u32(out, std::bit_cast<std::uint32_t>(f)); }

inline float get_f32(const unsigned char* p) { return std::bit_cast<float>(get_u32(p)); }

}  // namespace detail

inline std::string encode_image(const Image2D& img) {
  nlohmann::ordered_json header;
  header["width"] = img.width();
  header["height"] = img.height();
  header["pixel_spacing_mm"] = img.pixel_spacing();
  header["dtype"] = "f32le";
  const std::string h = header.dump();

  std::string out(kImageMagic, sizeof(kImageMagic));
  detail::put_u32(out, static_cast<std::uint32_t>(h.size()));
  out += h;
  out.reserve(out.size() + 4 * img.size());
  for (double v : img.pixels()) detail::put_f32(out, static_cast<float>(v));
  return out;
}

inline Image2D decode_image(std::span<const unsigned char> bytes) {
  if (bytes.size() < 12 || std::memcmp(bytes.data(), kImageMagic, 8) != 0)
    throw InvalidInput("not a GLB2DIMG image (bad magic)");
  const std::uint32_t hlen = detail::get_u32(bytes.data() + 8);
  if (bytes.size() < 12 + std::size_t(hlen)) throw InvalidInput("truncated image header");
  nlohmann::json header;
  try {
    header = nlohmann::json::parse(bytes.begin() + 12, bytes.begin() + 12 + hlen);
  } catch (const nlohmann::json::exception& e) {
    throw InvalidInput(std::string("malformed image header: ") + e.what());
  }
  if (header.value("dtype", std::string{}) != "f32le")
    throw InvalidInput("unsupported image dtype");
  const int w = header.at("width").get<int>();
  const int h = header.at("height").get<int>();
  const double spacing = header.value("pixel_spacing_mm", 1.0);
  Image2D img(w, h, spacing);
  const std::size_t off = 12 + hlen;
  if (bytes.size() != off + 4 * img.size()) throw InvalidInput("image payload size mismatch");
  for (std::size_t i = 0; i < img.size(); ++i) {
    const float f = detail::get_f32(bytes.data() + off + 4 * i);
    if (!std::isfinite(f)) throw InvalidInput("image contains non-finite values");
    img[i] = f;
  }
  return img;
}

inline void write_image(const std::filesystem::path& path, const Image2D& img) {
  std::ofstream os(path, std::ios::binary);
  if (!os) throw InvalidInput("cannot open for writing: " + path.string());
  const std::string bytes = encode_image(img);
  os.write(bytes.data(), static_cast<std::streamsize>(bytes.size()));
  if (!os) throw InvalidInput("write failed: " + path.string());
}

inline Image2D read_image(const std::filesystem::path& path) {
  std::ifstream is(path, std::ios::binary);
  if (!is) throw InvalidInput("cannot open image: " + path.string());
  std::vector<unsigned char> bytes((std::istreambuf_iterator<char>(is)), std::istreambuf_iterator<char>());
  return decode_image(bytes);
}

inline void write_mask(const std::filesystem::path& path, const BinaryMask& m, double spacing = 1.0) {
  write_image(path, mask_to_image(m, spacing));
}

inline BinaryMask read_mask(const std::filesystem::path& path) { return image_to_mask(read_image(path)); }

}  // namespace mechlearn
