#pragma once

#include <cmath>
#include <cstdint>
#include <cstring>
#include <fstream>
#include <limits>
#include <string>
#include <vector>

#include "sdc/common.hpp"
#include "sdc/tensor.hpp"

namespace sdc {

// Images are [3,H,W] (or [1,H,W] grayscale) float tensors in [0,1].
using Image = Tensor;

enum class GtKind { Disparity, Flow };

// Displacement ground truth over the reference image. Disparity fields are
// [1,H,W] horizontal displacements, flow fields [2,H,W] as (u,v) = (dx,dy).
struct GroundTruth {
  GtKind kind = GtKind::Flow;
  Tensor field;
  std::vector<std::uint8_t> valid;     // H*W, 1 = ground truth present
  std::vector<std::uint8_t> occluded;  // H*W, 1 = occluded in the second view

  int height() const { return field.dim(1); }
  int width() const { return field.dim(2); }

  // displacement (du, dv) at integer pixel
  std::pair<float, float> displacement(int y, int x) const {
    if (kind == GtKind::Disparity) return {field.at(0, y, x), 0.0f};
    return {field.at(0, y, x), field.at(1, y, x)};
  }

  bool is_valid(int y, int x) const { return valid[std::size_t(y) * std::size_t(width()) + std::size_t(x)] != 0; }
  bool is_occluded(int y, int x) const {
    return occluded[std::size_t(y) * std::size_t(width()) + std::size_t(x)] != 0;
  }
};

namespace detail {

inline std::vector<char> read_file(const std::string& path) {
  std::ifstream f(path, std::ios::binary);
  if (!f) fail_io("cannot open '" + path + "' for reading");
  f.seekg(0, std::ios::end);
  std::streamoff n = f.tellg();
  f.seekg(0, std::ios::beg);
  std::vector<char> buf(static_cast<std::size_t>(n));
  if (n > 0) f.read(buf.data(), n);
  if (!f) fail_io("failed reading '" + path + "'");
  return buf;
}

inline void write_file(const std::string& path, const void* data, std::size_t n) {
  std::ofstream f(path, std::ios::binary | std::ios::trunc);
  if (!f) fail_io("cannot open '" + path + "' for writing");
  f.write(static_cast<const char*>(data), std::streamsize(n));
  if (!f) fail_io("failed writing '" + path + "'");
}

class ByteReader {
 public:
  ByteReader(const std::vector<char>& buf, std::string path) : buf_(buf), path_(std::move(path)) {}

  std::size_t pos() const { return pos_; }
  std::size_t remaining() const { return buf_.size() - pos_; }

  void raw(void* dst, std::size_t n, const char* what) {
    if (remaining() < n) fail_io("'" + path_ + "': truncated while reading " + std::string(what));
    std::memcpy(dst, buf_.data() + pos_, n);
    pos_ += n;
  }

  std::uint32_t u32(const char* what) {
    unsigned char b[4];
    raw(b, 4, what);
    return std::uint32_t(b[0]) | std::uint32_t(b[1]) << 8 | std::uint32_t(b[2]) << 16 | std::uint32_t(b[3]) << 24;
  }

  std::int32_t i32(const char* what) { return std::int32_t(u32(what)); }

  std::uint64_t u64(const char* what) {
    std::uint64_t lo = u32(what), hi = u32(what);
    return lo | hi << 32;
  }

  float f32(const char* what) {
    std::uint32_t u = u32(what);
    float f;
    std::memcpy(&f, &u, 4);
    return f;
  }

  // whitespace-delimited ASCII token (for PNM/PFM headers)
  std::string token(const char* what) {
    while (pos_ < buf_.size() && std::isspace(static_cast<unsigned char>(buf_[pos_]))) ++pos_;
    // '#' comments run to end of line
    while (pos_ < buf_.size() && buf_[pos_] == '#') {
      while (pos_ < buf_.size() && buf_[pos_] != '\n') ++pos_;
      while (pos_ < buf_.size() && std::isspace(static_cast<unsigned char>(buf_[pos_]))) ++pos_;
    }
    std::size_t start = pos_;
    while (pos_ < buf_.size() && !std::isspace(static_cast<unsigned char>(buf_[pos_]))) ++pos_;
    if (start == pos_) fail_io("'" + path_ + "': truncated header while reading " + std::string(what));
    return std::string(buf_.data() + start, pos_ - start);
  }

  // skip exactly one whitespace byte after a header
  void skip_one_space(const char* what) {
    if (pos_ >= buf_.size()) fail_io("'" + path_ + "': truncated after " + std::string(what));
    ++pos_;
  }

 private:
  const std::vector<char>& buf_;
  std::string path_;
  std::size_t pos_ = 0;
};

class ByteWriter {
 public:
  void raw(const void* src, std::size_t n) {
    const char* p = static_cast<const char*>(src);
    buf_.insert(buf_.end(), p, p + n);
  }
  void u32(std::uint32_t v) {
    unsigned char b[4] = {(unsigned char)(v), (unsigned char)(v >> 8), (unsigned char)(v >> 16),
                          (unsigned char)(v >> 24)};
    raw(b, 4);
  }
  void i32(std::int32_t v) { u32(std::uint32_t(v)); }
  void u64(std::uint64_t v) {
    u32(std::uint32_t(v));
    u32(std::uint32_t(v >> 32));
  }
  void f32(float f) {
    std::uint32_t u;
    std::memcpy(&u, &f, 4);
    u32(u);
  }
  void text(const std::string& s) { raw(s.data(), s.size()); }

  const std::vector<char>& bytes() const { return buf_; }

 private:
  std::vector<char> buf_;
};

inline int parse_pnm_int(const std::string& tok, const std::string& path, const char* what) {
  try {
    std::size_t used = 0;
    int v = std::stoi(tok, &used);
    if (used != tok.size() || v <= 0) throw std::invalid_argument("bad");
    return v;
  } catch (...) {
    fail_io("'" + path + "': bad " + std::string(what) + " in header");
  }
}

}  // namespace detail

// --- PPM (P6) / PGM (P5), binary, maxval 255 ---

inline Image read_ppm(const std::string& path) {
  auto buf = detail::read_file(path);
  detail::ByteReader r(buf, path);
  std::string magic = r.token("magic");
  if (magic == "P3") fail_io("'" + path + "': ASCII PPM (P3) is unsupported, use binary P6");
  if (magic != "P6") fail_io("'" + path + "': bad magic '" + magic + "', expected P6");
  int w = detail::parse_pnm_int(r.token("width"), path, "width");
  int h = detail::parse_pnm_int(r.token("height"), path, "height");
  int maxval = detail::parse_pnm_int(r.token("maxval"), path, "maxval");
  if (maxval != 255) fail_io("'" + path + "': maxval " + std::to_string(maxval) + " unsupported, expected 255");
  r.skip_one_space("maxval");
  std::vector<unsigned char> px(std::size_t(w) * h * 3);
  r.raw(px.data(), px.size(), "pixel data");
  Image img({3, h, w});
  for (int y = 0; y < h; ++y)
    for (int x = 0; x < w; ++x)
      for (int c = 0; c < 3; ++c)
        img.at(c, y, x) = float(px[(std::size_t(y) * w + x) * 3 + std::size_t(c)]) / 255.0f;
  return img;
}

inline void write_ppm(const std::string& path, const Image& img) {
  require(img.rank() == 3 && img.dim(0) == 3, ErrorKind::argument, "write_ppm: image must be [3,H,W]");
  const int h = img.dim(1), w = img.dim(2);
  detail::ByteWriter out;
  out.text("P6\n" + std::to_string(w) + " " + std::to_string(h) + "\n255\n");
  std::vector<unsigned char> px(std::size_t(w) * h * 3);
  for (int y = 0; y < h; ++y)
    for (int x = 0; x < w; ++x)
      for (int c = 0; c < 3; ++c) {
        float v = std::min(1.0f, std::max(0.0f, img.at(c, y, x)));
        px[(std::size_t(y) * w + x) * 3 + std::size_t(c)] = (unsigned char)std::lround(v * 255.0f);
      }
  out.raw(px.data(), px.size());
  detail::write_file(path, out.bytes().data(), out.bytes().size());
}

inline Tensor read_pgm(const std::string& path) {
  auto buf = detail::read_file(path);
  detail::ByteReader r(buf, path);
  std::string magic = r.token("magic");
  if (magic != "P5") fail_io("'" + path + "': bad magic '" + magic + "', expected P5");
  int w = detail::parse_pnm_int(r.token("width"), path, "width");
  int h = detail::parse_pnm_int(r.token("height"), path, "height");
  int maxval = detail::parse_pnm_int(r.token("maxval"), path, "maxval");
  if (maxval != 255) fail_io("'" + path + "': maxval " + std::to_string(maxval) + " unsupported, expected 255");
  r.skip_one_space("maxval");
  std::vector<unsigned char> px(std::size_t(w) * h);
  r.raw(px.data(), px.size(), "pixel data");
  Tensor img({1, h, w});
  for (std::size_t i = 0; i < px.size(); ++i) img[i] = float(px[i]) / 255.0f;
  return img;
}

inline void write_pgm(const std::string& path, const Tensor& img) {
  require(img.rank() == 3 && img.dim(0) == 1, ErrorKind::argument, "write_pgm: image must be [1,H,W]");
  const int h = img.dim(1), w = img.dim(2);
  detail::ByteWriter out;
  out.text("P5\n" + std::to_string(w) + " " + std::to_string(h) + "\n255\n");
  std::vector<unsigned char> px(std::size_t(w) * h);
  for (std::size_t i = 0; i < px.size(); ++i) {
    float v = std::min(1.0f, std::max(0.0f, img[i]));
    px[i] = (unsigned char)std::lround(v * 255.0f);
  }
  out.raw(px.data(), px.size());
  detail::write_file(path, out.bytes().data(), out.bytes().size());
}

// --- .flo optical flow ---

inline constexpr float kFloMagic = 202021.25f;
inline constexpr float kFloInvalidThreshold = 1e9f;
inline constexpr float kFloInvalidSentinel = 1e10f;

inline GroundTruth read_flo(const std::string& path) {
  auto buf = detail::read_file(path);
  detail::ByteReader r(buf, path);
  float magic = r.f32("magic");
  if (magic != kFloMagic) fail_io("'" + path + "': bad flo magic");
  int w = r.i32("width");
  int h = r.i32("height");
  if (w <= 0 || h <= 0) fail_io("'" + path + "': bad flo dimensions");
  GroundTruth gt;
  gt.kind = GtKind::Flow;
  gt.field = Tensor({2, h, w});
  gt.valid.assign(std::size_t(h) * w, 1);
  gt.occluded.assign(std::size_t(h) * w, 0);
  for (int y = 0; y < h; ++y)
    for (int x = 0; x < w; ++x) {
      float u = r.f32("flow data");
      float v = r.f32("flow data");
      gt.field.at(0, y, x) = u;
      gt.field.at(1, y, x) = v;
      if (!(std::abs(u) <= kFloInvalidThreshold) || !(std::abs(v) <= kFloInvalidThreshold))
        gt.valid[std::size_t(y) * w + std::size_t(x)] = 0;
    }
  return gt;
}

inline void write_flo(const std::string& path, const GroundTruth& gt) {
  require(gt.kind == GtKind::Flow && gt.field.rank() == 3 && gt.field.dim(0) == 2, ErrorKind::argument,
          "write_flo: flow field must be [2,H,W]");
  const int h = gt.height(), w = gt.width();
  detail::ByteWriter out;
  out.f32(kFloMagic);
  out.i32(w);
  out.i32(h);
  for (int y = 0; y < h; ++y)
    for (int x = 0; x < w; ++x) {
      if (gt.is_valid(y, x)) {
        out.f32(gt.field.at(0, y, x));
        out.f32(gt.field.at(1, y, x));
      } else {
        out.f32(kFloInvalidSentinel);
        out.f32(kFloInvalidSentinel);
      }
    }
  detail::write_file(path, out.bytes().data(), out.bytes().size());
}

// --- PFM (grayscale "Pf") disparity ---

inline GroundTruth read_pfm(const std::string& path) {
  auto buf = detail::read_file(path);
  detail::ByteReader r(buf, path);
  std::string magic = r.token("magic");
  if (magic == "PF") fail_io("'" + path + "': color PFM is unsupported, expected grayscale Pf");
  if (magic != "Pf") fail_io("'" + path + "': bad magic '" + magic + "', expected Pf");
  int w = detail::parse_pnm_int(r.token("width"), path, "width");
  int h = detail::parse_pnm_int(r.token("height"), path, "height");
  double scale = 0.0;
  try {
    scale = std::stod(r.token("scale"));
  } catch (...) {
    fail_io("'" + path + "': bad scale in header");
  }
  if (scale == 0.0) fail_io("'" + path + "': zero scale");
  const bool little_endian = scale < 0.0;
  r.skip_one_space("scale");
  GroundTruth gt;
  gt.kind = GtKind::Disparity;
  gt.field = Tensor({1, h, w});
  gt.valid.assign(std::size_t(h) * w, 1);
  gt.occluded.assign(std::size_t(h) * w, 0);
  // rows are stored bottom-to-top
  for (int row = h - 1; row >= 0; --row)
    for (int x = 0; x < w; ++x) {
      float v;
      if (little_endian) {
        v = r.f32("pfm data");
      } else {
        unsigned char b[4];
        r.raw(b, 4, "pfm data");
        std::uint32_t u = std::uint32_t(b[3]) | std::uint32_t(b[2]) << 8 | std::uint32_t(b[1]) << 16 |
                          std::uint32_t(b[0]) << 24;
        std::memcpy(&v, &u, 4);
      }
      gt.field.at(0, row, x) = v;
      if (std::isinf(v)) {
        gt.valid[std::size_t(row) * w + std::size_t(x)] = 0;
        gt.field.at(0, row, x) = 0.0f;
      }
    }
  return gt;
}

inline void write_pfm(const std::string& path, const GroundTruth& gt) {
  require(gt.kind == GtKind::Disparity && gt.field.rank() == 3 && gt.field.dim(0) == 1, ErrorKind::argument,
          "write_pfm: disparity field must be [1,H,W]");
  const int h = gt.height(), w = gt.width();
  detail::ByteWriter out;
  out.text("Pf\n" + std::to_string(w) + " " + std::to_string(h) + "\n-1.0\n");
  for (int row = h - 1; row >= 0; --row)
    for (int x = 0; x < w; ++x)
      out.f32(gt.is_valid(row, x) ? gt.field.at(0, row, x) : std::numeric_limits<float>::infinity());
  detail::write_file(path, out.bytes().data(), out.bytes().size());
}

// Binary masks as P5: 255 = set, 0 = clear.
inline void write_mask_pgm(const std::string& path, const std::vector<std::uint8_t>& mask, int h, int w) {
  Tensor t({1, h, w});
  for (std::size_t i = 0; i < mask.size(); ++i) t[i] = mask[i] ? 1.0f : 0.0f;
  write_pgm(path, t);
}

inline std::vector<std::uint8_t> read_mask_pgm(const std::string& path, int expect_h, int expect_w) {
  Tensor t = read_pgm(path);
  require(t.dim(1) == expect_h && t.dim(2) == expect_w, ErrorKind::io, "mask '" + path + "' has wrong extents");
  std::vector<std::uint8_t> mask(t.numel());
  for (std::size_t i = 0; i < t.numel(); ++i) mask[i] = t[i] >= 0.5f ? 1 : 0;
  return mask;
}

inline bool file_exists(const std::string& path) {
  std::ifstream f(path, std::ios::binary);
  return bool(f);
}

}  // namespace sdc
