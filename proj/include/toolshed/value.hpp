// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <cstdint>
#include <cstring>
#include <map>
#include <memory>
#include <optional>
#include <span>
#include <string>
#include <string_view>
#include <variant>
#include <vector>

#include "toolshed/error.hpp"

namespace toolshed {

struct Point2 {
  double x = 0.0;
  double y = 0.0;

  friend bool operator==(const Point2&, const Point2&) = default;
};

inline Point2 operator-(Point2 a, Point2 b) { return {a.x - b.x, a.y - b.y}; }
inline Point2 operator+(Point2 a, Point2 b) { return {a.x + b.x, a.y + b.y}; }
inline Point2 operator*(double s, Point2 a) { return {s * a.x, s * a.y}; }

enum class Media : std::uint8_t { RasterImage, Float32Grid, Float32PointsN3, BoolMaskRLE, Opaque };

inline std::string_view to_string(Media m) {
  switch (m) {
    case Media::RasterImage: return "RasterImage";
    case Media::Float32Grid: return "Float32Grid";
    case Media::Float32PointsN3: return "Float32PointsN3";
    case Media::BoolMaskRLE: return "BoolMaskRLE";
    case Media::Opaque: return "Opaque";
  }
  return "Opaque";
}

inline Media media_from_string(std::string_view s) {
  if (s == "RasterImage") return Media::RasterImage;
  if (s == "Float32Grid") return Media::Float32Grid;
  if (s == "Float32PointsN3") return Media::Float32PointsN3;
  if (s == "BoolMaskRLE") return Media::BoolMaskRLE;
  if (s == "Opaque") return Media::Opaque;
  throw BadArgs("unknown media type: " + std::string(s));
}

/// Binary payload carried next to a message. Numeric media are little-endian
/// and row-major; RasterImage is packed RGB8.
struct Attachment {
  std::string name;
  Media media = Media::Opaque;
  std::uint32_t width = 0;
  std::uint32_t height = 0;
  std::vector<std::uint8_t> bytes;

  friend bool operator==(const Attachment&, const Attachment&) = default;
};

using AttachmentPtr = std::shared_ptr<const Attachment>;

/// Checks the per-media size invariants. Returns an empty string when valid.
inline std::string attachment_violation(const Attachment& a);

/// Session-scoped variable reference; serialized as "$name".
struct VariableRef {
  std::string name;

  friend bool operator==(const VariableRef&, const VariableRef&) = default;
};

/// Argument / variable value exchanged with tools.
class Value {
 public:
  using List = std::vector<Value>;
  using Storage = std::variant<std::monostate, bool, double, std::string, Point2, List, AttachmentPtr, VariableRef>;

  Value() = default;
  Value(bool b) : v_(b) {}
  Value(double d) : v_(d) {}
  Value(int i) : v_(static_cast<double>(i)) {}
  Value(std::int64_t i) : v_(static_cast<double>(i)) {}
  Value(std::size_t i) : v_(static_cast<double>(i)) {}
  Value(const char* s) : v_(std::string(s)) {}
  Value(std::string s) : v_(std::move(s)) {}
  Value(Point2 p) : v_(p) {}
  Value(List l) : v_(std::move(l)) {}
  Value(AttachmentPtr a) : v_(std::move(a)) {}
  Value(VariableRef r) : v_(std::move(r)) {}

  bool is_null() const { return std::holds_alternative<std::monostate>(v_); }
  bool is_bool() const { return std::holds_alternative<bool>(v_); }
  bool is_number() const { return std::holds_alternative<double>(v_); }
  bool is_string() const { return std::holds_alternative<std::string>(v_); }
  bool is_point() const { return std::holds_alternative<Point2>(v_); }
  bool is_list() const { return std::holds_alternative<List>(v_); }
  bool is_attachment() const { return std::holds_alternative<AttachmentPtr>(v_); }
  bool is_ref() const { return std::holds_alternative<VariableRef>(v_); }

  bool as_bool() const { return get<bool>("bool"); }
  double as_number() const { return get<double>("number"); }
  const std::string& as_string() const { return get<std::string>("string"); }
  const Point2& as_point() const { return get<Point2>("point2"); }
  const List& as_list() const { return get<List>("list"); }
  const AttachmentPtr& as_attachment() const { return get<AttachmentPtr>("attachment"); }
  const VariableRef& as_ref() const { return get<VariableRef>("variable reference"); }

  const Storage& storage() const { return v_; }
  Storage& storage() { return v_; }

  friend bool operator==(const Value& a, const Value& b);

 private:
  template <class T>
  const T& get(const char* what) const {
    if (const T* p = std::get_if<T>(&v_)) return *p;
    throw BadArgs(std::string("expected ") + what);
  }

  Storage v_;
};

using ValueMap = std::map<std::string, Value>;

inline bool operator==(const Value& a, const Value& b) {
  if (a.v_.index() != b.v_.index()) return false;
  if (const auto* pa = std::get_if<AttachmentPtr>(&a.v_)) {
    const auto& pb = std::get<AttachmentPtr>(b.v_);
    if (!*pa || !pb) return !*pa && !pb;
    return **pa == *pb;
  }
  return a.v_ == b.v_;
}

// ---------------------------------------------------------------------------
// Little-endian helpers and typed attachment views.

inline void put_u32(std::vector<std::uint8_t>& out, std::uint32_t v) {
  for (int i = 0; i < 4; ++i) out.push_back(static_cast<std::uint8_t>(v >> (8 * i)));
}

inline std::uint32_t get_u32(const std::uint8_t* p) {
  return static_cast<std::uint32_t>(p[0]) | (static_cast<std::uint32_t>(p[1]) << 8) |
         (static_cast<std::uint32_t>(p[2]) << 16) | (static_cast<std::uint32_t>(p[3]) << 24);
}

inline void put_f32(std::vector<std::uint8_t>& out, float f) {
  std::uint32_t bits;
  std::memcpy(&bits, &f, 4);
  put_u32(out, bits);
}

inline float get_f32(const std::uint8_t* p) {
  std::uint32_t bits = get_u32(p);
  float f;
  std::memcpy(&f, &bits, 4);
  return f;
}

/// Dense boolean grid, row-major.
struct BoolGrid {
  std::uint32_t width = 0;
  std::uint32_t height = 0;
  std::vector<std::uint8_t> cells;  // 0 / 1

  bool at(std::uint32_t x, std::uint32_t y) const { return cells[std::size_t(y) * width + x] != 0; }
  std::size_t count() const {
    std::size_t n = 0;
    for (auto c : cells) n += c != 0;
    return n;
  }
  friend bool operator==(const BoolGrid&, const BoolGrid&) = default;
};

/// Alternating run lengths starting with the count of false cells.
inline std::vector<std::uint32_t> rle_encode(const BoolGrid& g) {
  std::vector<std::uint32_t> runs;
  bool current = false;
  std::uint32_t run = 0;
  for (auto c : g.cells) {
    bool b = c != 0;
    if (b != current) {
      runs.push_back(run);
      run = 0;
      current = b;
    }
    ++run;
  }
  runs.push_back(run);
  return runs;
}

inline BoolGrid rle_decode(std::span<const std::uint32_t> runs, std::uint32_t width, std::uint32_t height) {
  BoolGrid g{width, height, {}};
  const std::size_t total = std::size_t(width) * height;
  g.cells.reserve(total);
  bool current = false;
  for (auto r : runs) {
    if (g.cells.size() + r > total) throw BadArgs("RLE runs exceed mask size");
    g.cells.insert(g.cells.end(), r, current ? 1 : 0);
    current = !current;
  }
  if (g.cells.size() != total) throw BadArgs("RLE runs do not cover mask");
  return g;
}

inline AttachmentPtr make_mask_attachment(std::string name, const BoolGrid& g) {
  Attachment a{std::move(name), Media::BoolMaskRLE, g.width, g.height, {}};
  for (auto r : rle_encode(g)) put_u32(a.bytes, r);
  return std::make_shared<const Attachment>(std::move(a));
}

inline BoolGrid mask_from_attachment(const Attachment& a) {
  if (a.media != Media::BoolMaskRLE) throw BadArgs("attachment '" + a.name + "' is not a mask");
  if (a.bytes.size() % 4 != 0) throw BadArgs("mask RLE byte length not a multiple of 4");
  std::vector<std::uint32_t> runs(a.bytes.size() / 4);
  for (std::size_t i = 0; i < runs.size(); ++i) runs[i] = get_u32(a.bytes.data() + 4 * i);
  return rle_decode(runs, a.width, a.height);
}

/// Dense float grid (depth maps), row-major.
struct FloatGrid {
  std::uint32_t width = 0;
  std::uint32_t height = 0;
  std::vector<float> data;

  float at(std::uint32_t x, std::uint32_t y) const { return data[std::size_t(y) * width + x]; }
  friend bool operator==(const FloatGrid&, const FloatGrid&) = default;
};

inline AttachmentPtr make_grid_attachment(std::string name, const FloatGrid& g) {
  Attachment a{std::move(name), Media::Float32Grid, g.width, g.height, {}};
  a.bytes.reserve(g.data.size() * 4);
  for (float f : g.data) put_f32(a.bytes, f);
  return std::make_shared<const Attachment>(std::move(a));
}

inline FloatGrid grid_from_attachment(const Attachment& a) {
  if (a.media != Media::Float32Grid) throw BadArgs("attachment '" + a.name + "' is not a float grid");
  if (a.bytes.size() != 4ull * a.width * a.height) throw BadArgs("float grid byte length mismatch");
  FloatGrid g{a.width, a.height, std::vector<float>(std::size_t(a.width) * a.height)};
  for (std::size_t i = 0; i < g.data.size(); ++i) g.data[i] = get_f32(a.bytes.data() + 4 * i);
  return g;
}

struct Point3f {
  float x = 0, y = 0, z = 0;
  friend bool operator==(const Point3f&, const Point3f&) = default;
};

inline AttachmentPtr make_points_attachment(std::string name, std::span<const Point3f> pts) {
  Attachment a{std::move(name), Media::Float32PointsN3, 0, 0, {}};
  a.bytes.reserve(pts.size() * 12);
  for (const auto& p : pts) {
    put_f32(a.bytes, p.x);
    put_f32(a.bytes, p.y);
    put_f32(a.bytes, p.z);
  }
  return std::make_shared<const Attachment>(std::move(a));
}

inline std::vector<Point3f> points_from_attachment(const Attachment& a) {
  if (a.media != Media::Float32PointsN3) throw BadArgs("attachment '" + a.name + "' is not a point cloud");
  if (a.bytes.size() % 12 != 0) throw BadArgs("point cloud byte length not divisible by 12");
  std::vector<Point3f> pts(a.bytes.size() / 12);
  for (std::size_t i = 0; i < pts.size(); ++i) {
    const auto* p = a.bytes.data() + 12 * i;
    pts[i] = {get_f32(p), get_f32(p + 4), get_f32(p + 8)};
  }
  return pts;
}

inline std::string attachment_violation(const Attachment& a) {
  const std::size_t cells = std::size_t(a.width) * a.height;
  switch (a.media) {
    case Media::Float32Grid:
      if (a.bytes.size() != 4 * cells) return "Float32Grid byte length must be 4*width*height";
      break;
    case Media::RasterImage:
      if (a.bytes.size() != 3 * cells) return "RasterImage byte length must be 3*width*height";
      break;
    case Media::Float32PointsN3:
      if (a.bytes.size() % 12 != 0) return "Float32PointsN3 byte length must be divisible by 12";
      break;
    case Media::BoolMaskRLE: {
      if (a.bytes.size() % 4 != 0) return "BoolMaskRLE byte length must be a multiple of 4";
      std::uint64_t sum = 0;
      for (std::size_t i = 0; i < a.bytes.size(); i += 4) sum += get_u32(a.bytes.data() + i);
      if (sum != cells) return "BoolMaskRLE run lengths must sum to width*height";
      break;
    }
    case Media::Opaque:
      break;
  }
  return {};
}

/// Replaces spaces with underscores, the naming rule for detection variables.
inline std::string variable_name_for(std::string_view obj_name) {
  std::string out(obj_name);
  for (auto& c : out)
    if (c == ' ') c = '_';
  return out;
}

}  // namespace toolshed
