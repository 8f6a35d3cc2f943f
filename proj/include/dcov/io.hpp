#pragma once

// File formats: PFM rasters, 16-bit depth PNGs, grayscale images and CSV tables.
//
// PFM layout: "Pf" (1 channel) or "PF" (3 channels), then "<width> <height>",
// then a scale whose sign gives the byte order (negative = little-endian),
// each header field followed by a single whitespace byte. The float32 payload
// stores rows bottom-to-top with channels interleaved. In memory rasters are
// top-to-bottom, row-major. We always write little-endian with scale -1.

#include <algorithm>
#include <bit>
#include <charconv>
#include <cmath>
#include <cstdint>
#include <cstdio>
#include <cstring>
#include <fstream>
#include <iterator>
#include <memory>
#include <sstream>
#include <string>
#include <string_view>
#include <vector>

#include <png.h>

#include "dcov/ba.hpp"
#include "dcov/errors.hpp"
#include "dcov/geometry.hpp"
#include "dcov/gp.hpp"
#include "dcov/image.hpp"
#include "dcov/json_util.hpp"
#include "dcov/kernel.hpp"

namespace dcov::io {

struct PfmRaster {
  int width = 0;
  int height = 0;
  int channels = 1;
  std::vector<float> data;  // top-down, row-major, interleaved

  float at(int x, int y, int c = 0) const {
    return data[(static_cast<std::size_t>(y) * width + x) * channels + c];
  }
};

inline std::vector<char> read_file(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw FormatError("cannot open '" + path + "'");
  return {std::istreambuf_iterator<char>(in), std::istreambuf_iterator<char>()};
}

inline void write_file(const std::string& path, const std::string& bytes) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw FormatError("cannot write '" + path + "'");
  out.write(bytes.data(), static_cast<std::streamsize>(bytes.size()));
  if (!out) throw FormatError("short write to '" + path + "'");
}

namespace detail {

inline bool is_space(char c) { return c == ' ' || c == '\n' || c == '\r' || c == '\t'; }

/// Next whitespace-delimited token; `pos` ends on the single separator byte after it.
inline std::string header_token(const std::vector<char>& bytes, std::size_t& pos) {
  while (pos < bytes.size() && is_space(bytes[pos])) ++pos;
  const std::size_t start = pos;
  while (pos < bytes.size() && !is_space(bytes[pos])) ++pos;
  if (start == pos) throw FormatError("truncated PFM header", pos);
  return {bytes.data() + start, pos - start};
}

inline std::uint32_t byteswap32(std::uint32_t v) {
  return (v >> 24) | ((v >> 8) & 0xff00u) | ((v << 8) & 0xff0000u) | (v << 24);
}

}  // namespace detail

inline PfmRaster parse_pfm(const std::vector<char>& bytes) {
  std::size_t pos = 0;
  PfmRaster r;
  const std::string magic = detail::header_token(bytes, pos);
  if (magic == "Pf") {
    r.channels = 1;
  } else if (magic == "PF") {
    r.channels = 3;
  } else {
    throw FormatError("bad PFM magic '" + magic + "'", 0);
  }
  const auto parse_int = [&](const char* what) {
    const std::size_t at = pos;
    const std::string tok = detail::header_token(bytes, pos);
    int v = 0;
    const auto res = std::from_chars(tok.data(), tok.data() + tok.size(), v);
    if (res.ec != std::errc() || res.ptr != tok.data() + tok.size() || v < 1) {
      throw FormatError(std::string("bad PFM ") + what + " '" + tok + "'", at);
    }
    return v;
  };
  r.width = parse_int("width");
  r.height = parse_int("height");
  const std::size_t scale_at = pos;
  const std::string scale_tok = detail::header_token(bytes, pos);
  double scale = 0.0;
  try {
    std::size_t used = 0;
    scale = std::stod(scale_tok, &used);
    if (used != scale_tok.size()) throw std::invalid_argument("trailing");
  } catch (const std::exception&) {
    throw FormatError("bad PFM scale '" + scale_tok + "'", scale_at);
  }
  if (scale == 0.0 || !std::isfinite(scale)) throw FormatError("PFM scale must be non-zero", scale_at);
  if (pos >= bytes.size()) throw FormatError("truncated PFM header", pos);
  ++pos;  // single separator byte before the payload

  const std::size_t count = static_cast<std::size_t>(r.width) * r.height * r.channels;
  if (bytes.size() - pos < count * 4) {
    throw FormatError("truncated PFM payload: expected " + std::to_string(count * 4) + " bytes",
                      bytes.size());
  }
  const bool file_little = scale < 0;
  const bool swap = file_little != (std::endian::native == std::endian::little);
  r.data.resize(count);
  const std::size_t row = static_cast<std::size_t>(r.width) * r.channels;
  for (int y = 0; y < r.height; ++y) {
    const std::size_t src = pos + static_cast<std::size_t>(r.height - 1 - y) * row * 4;
    for (std::size_t i = 0; i < row; ++i) {
      std::uint32_t u;
      std::memcpy(&u, bytes.data() + src + i * 4, 4);
      if (swap) u = detail::byteswap32(u);
      std::memcpy(&r.data[static_cast<std::size_t>(y) * row + i], &u, 4);
    }
  }
  return r;
}

inline PfmRaster read_pfm(const std::string& path) { return parse_pfm(read_file(path)); }

inline std::string encode_pfm(const PfmRaster& r) {
  if (r.channels != 1 && r.channels != 3) throw FormatError("PFM supports 1 or 3 channels");
  if (r.data.size() != static_cast<std::size_t>(r.width) * r.height * r.channels) {
    throw FormatError("PFM raster storage mismatch");
  }
  std::string out = (r.channels == 1 ? "Pf\n" : "PF\n") + std::to_string(r.width) + " " +
                    std::to_string(r.height) + "\n-1\n";
  const std::size_t header = out.size();
  const std::size_t row = static_cast<std::size_t>(r.width) * r.channels;
  out.resize(header + r.data.size() * 4);
  const bool swap = std::endian::native != std::endian::little;
  for (int y = 0; y < r.height; ++y) {
    const std::size_t dst = header + static_cast<std::size_t>(r.height - 1 - y) * row * 4;
    for (std::size_t i = 0; i < row; ++i) {
      std::uint32_t u;
      std::memcpy(&u, &r.data[static_cast<std::size_t>(y) * row + i], 4);
      if (swap) u = detail::byteswap32(u);
      std::memcpy(out.data() + dst + i * 4, &u, 4);
    }
  }
  return out;
}

inline void write_pfm(const std::string& path, const PfmRaster& r) { write_file(path, encode_pfm(r)); }

// Conversions ------------------------------------------------------------------------

inline PfmRaster to_pfm(const Image& img) {
  PfmRaster r{img.width, img.height, 1, {}};
  r.data.reserve(img.size());
  for (double v : img.data) r.data.push_back(static_cast<float>(v));
  return r;
}

/// Row-major values of a width x height grid (as produced by grid_coords).
inline PfmRaster to_pfm(const Eigen::VectorXd& values, int width, int height) {
  if (values.size() != static_cast<Eigen::Index>(width) * height) throw DomainError("raster size mismatch");
  PfmRaster r{width, height, 1, {}};
  r.data.reserve(static_cast<std::size_t>(values.size()));
  for (double v : values) r.data.push_back(static_cast<float>(v));
  return r;
}

inline Image to_image(const PfmRaster& r) {
  if (r.channels != 1) throw FormatError("expected a single-channel raster");
  Image img(r.width, r.height);
  for (std::size_t i = 0; i < r.data.size(); ++i) img.data[i] = r.data[i];
  return img;
}

inline PfmRaster to_pfm(const KernelField& f) {
  PfmRaster r{f.width(), f.height(), 3, {}};
  r.data.reserve(f.data().size());
  for (double v : f.data()) r.data.push_back(static_cast<float>(v));
  return r;
}

inline KernelField to_kernel_field(const PfmRaster& r) {
  if (r.channels != 3) throw FormatError("kernel fields need a 3-channel PF raster");
  KernelField f(r.width, r.height);
  for (std::size_t i = 0; i < r.data.size(); ++i) f.data()[i] = r.data[i];
  f.validate();
  return f;
}

// PNG --------------------------------------------------------------------------------

namespace detail {

struct PngRead {
  int width = 0;
  int height = 0;
  int bit_depth = 0;
  std::vector<std::uint16_t> values;  // grayscale samples
};

inline void png_error_fn(png_structp png, png_const_charp msg) {
  auto* err = static_cast<std::string*>(png_get_error_ptr(png));
  *err = msg;
  png_longjmp(png, 1);
}
inline void png_warning_fn(png_structp, png_const_charp) {}

inline PngRead read_png_gray(const std::string& path) {
  std::unique_ptr<std::FILE, int (*)(std::FILE*)> fp(std::fopen(path.c_str(), "rb"), &std::fclose);
  if (!fp) throw FormatError("cannot open '" + path + "'");
  std::string err;
  png_structp png = png_create_read_struct(PNG_LIBPNG_VER_STRING, &err, png_error_fn, png_warning_fn);
  if (!png) throw FormatError("libpng initialization failed");
  png_infop info = png_create_info_struct(png);
  PngRead out;
  std::vector<png_bytep> rows;
  std::vector<png_byte> buffer;
  if (setjmp(png_jmpbuf(png))) {
    png_destroy_read_struct(&png, &info, nullptr);
    throw FormatError("PNG decode failed in '" + path + "': " + err);
  }
  png_init_io(png, fp.get());
  png_read_info(png, info);
  const int color = png_get_color_type(png, info);
  out.width = static_cast<int>(png_get_image_width(png, info));
  out.height = static_cast<int>(png_get_image_height(png, info));
  out.bit_depth = png_get_bit_depth(png, info);
  const bool gray = color == PNG_COLOR_TYPE_GRAY;
  if (gray && out.bit_depth < 8) {
    png_set_expand_gray_1_2_4_to_8(png);
    out.bit_depth = 8;
  }
  png_read_update_info(png, info);
  const std::size_t stride = png_get_rowbytes(png, info);
  buffer.resize(stride * static_cast<std::size_t>(out.height));
  for (int y = 0; y < out.height; ++y) rows.push_back(buffer.data() + stride * static_cast<std::size_t>(y));
  png_read_image(png, rows.data());
  png_read_end(png, nullptr);
  png_destroy_read_struct(&png, &info, nullptr);
  if (!gray) throw FormatError("'" + path + "' is not a grayscale PNG");

  out.values.resize(static_cast<std::size_t>(out.width) * out.height);
  for (int y = 0; y < out.height; ++y) {
    const png_byte* row = rows[static_cast<std::size_t>(y)];
    for (int x = 0; x < out.width; ++x) {
      const std::size_t i = static_cast<std::size_t>(y) * out.width + x;
      out.values[i] = out.bit_depth == 16
                          ? static_cast<std::uint16_t>((row[2 * x] << 8) | row[2 * x + 1])  // PNG is big-endian
                          : row[x];
    }
  }
  return out;
}

inline void write_png_gray16(const std::string& path, int width, int height, const std::vector<std::uint16_t>& v) {
  std::unique_ptr<std::FILE, int (*)(std::FILE*)> fp(std::fopen(path.c_str(), "wb"), &std::fclose);
  if (!fp) throw FormatError("cannot write '" + path + "'");
  std::string err;
  png_structp png = png_create_write_struct(PNG_LIBPNG_VER_STRING, &err, png_error_fn, png_warning_fn);
  if (!png) throw FormatError("libpng initialization failed");
  png_infop info = png_create_info_struct(png);
  std::vector<png_byte> row(static_cast<std::size_t>(width) * 2);
  if (setjmp(png_jmpbuf(png))) {
    png_destroy_write_struct(&png, &info);
    throw FormatError("PNG encode failed for '" + path + "': " + err);
  }
  png_init_io(png, fp.get());
  png_set_IHDR(png, info, static_cast<png_uint_32>(width), static_cast<png_uint_32>(height), 16, PNG_COLOR_TYPE_GRAY,
               PNG_INTERLACE_NONE, PNG_COMPRESSION_TYPE_DEFAULT, PNG_FILTER_TYPE_DEFAULT);
  png_write_info(png, info);
  for (int y = 0; y < height; ++y) {
    for (int x = 0; x < width; ++x) {
      const std::uint16_t s = v[static_cast<std::size_t>(y) * width + x];
      row[2 * static_cast<std::size_t>(x)] = static_cast<png_byte>(s >> 8);
      row[2 * static_cast<std::size_t>(x) + 1] = static_cast<png_byte>(s & 0xff);
    }
    png_write_row(png, row.data());
  }
  png_write_end(png, nullptr);
  png_destroy_write_struct(&png, &info);
}

}  // namespace detail

inline constexpr double kDefaultDepthPngScale = 5000.0;

/// Depth in meters from a 16-bit grayscale PNG; raw 0 marks an invalid pixel
/// and is returned as 0.
inline Image read_depth_png16(const std::string& path, double scale = kDefaultDepthPngScale) {
  if (!(scale > 0)) throw DomainError("depth PNG scale must be positive");
  const auto png = detail::read_png_gray(path);
  if (png.bit_depth != 16) throw FormatError("'" + path + "' is not a 16-bit depth PNG");
  Image out(png.width, png.height);
  for (std::size_t i = 0; i < png.values.size(); ++i) out.data[i] = png.values[i] / scale;
  return out;
}

/// Writes meters as round(d * scale); non-positive or non-finite depths become 0.
inline void write_depth_png16(const std::string& path, const Image& depth, double scale = kDefaultDepthPngScale) {
  if (!(scale > 0)) throw DomainError("depth PNG scale must be positive");
  std::vector<std::uint16_t> raw(depth.size(), 0);
  for (std::size_t i = 0; i < depth.size(); ++i) {
    const double d = depth.data[i];
    if (!(d > 0) || !std::isfinite(d)) continue;
    const double r = std::round(d * scale);
    if (r > 65535.0) throw DomainError("depth exceeds the 16-bit PNG range at this scale");
    raw[i] = static_cast<std::uint16_t>(r);
  }
  detail::write_png_gray16(path, depth.width, depth.height, raw);
}

/// Grayscale intensities in [0, 1] from an 8/16-bit PNG, or values from a 1-channel PFM.
inline Image read_gray_image(const std::string& path) {
  const auto dot = path.rfind('.');
  std::string ext = dot == std::string::npos ? "" : path.substr(dot + 1);
  std::transform(ext.begin(), ext.end(), ext.begin(), [](unsigned char c) { return static_cast<char>(std::tolower(c)); });
  if (ext == "pfm") return to_image(read_pfm(path));
  if (ext != "png") throw FormatError("unsupported image extension for '" + path + "'");
  const auto png = detail::read_png_gray(path);
  const double full = png.bit_depth == 16 ? 65535.0 : 255.0;
  Image out(png.width, png.height);
  for (std::size_t i = 0; i < png.values.size(); ++i) out.data[i] = png.values[i] / full;
  return out;
}

// CSV --------------------------------------------------------------------------------

struct CsvTable {
  std::vector<std::string> header;
  std::vector<std::vector<double>> rows;

  std::size_t column(const std::string& name) const {
    const auto it = std::find(header.begin(), header.end(), name);
    if (it == header.end()) throw FormatError("missing CSV column '" + name + "'");
    return static_cast<std::size_t>(it - header.begin());
  }
};

namespace detail {
inline std::vector<std::string_view> split_csv(std::string_view line) {
  std::vector<std::string_view> out;
  std::size_t start = 0;
  while (true) {
    const std::size_t comma = line.find(',', start);
    std::string_view cell = line.substr(start, comma == std::string_view::npos ? std::string_view::npos : comma - start);
    while (!cell.empty() && (cell.front() == ' ' || cell.front() == '\t')) cell.remove_prefix(1);
    while (!cell.empty() && (cell.back() == ' ' || cell.back() == '\t' || cell.back() == '\r')) cell.remove_suffix(1);
    out.push_back(cell);
    if (comma == std::string_view::npos) break;
    start = comma + 1;
  }
  return out;
}
}  // namespace detail

/// Numeric CSV with a header row. The header must equal `expected` when given.
inline CsvTable parse_csv(const std::string& text, const std::vector<std::string>& expected = {}) {
  CsvTable t;
  std::size_t pos = 0, line_no = 0;
  bool have_header = false;
  while (pos <= text.size()) {
    const std::size_t line_start = pos;
    std::size_t end = text.find('\n', pos);
    if (end == std::string::npos) end = text.size();
    const std::string_view line(text.data() + pos, end - pos);
    pos = end + 1;
    ++line_no;
    const auto cells = detail::split_csv(line);
    if (cells.size() == 1 && cells[0].empty()) {
      if (end == text.size()) break;
      continue;
    }
    if (!have_header) {
      for (auto c : cells) t.header.emplace_back(c);
      if (!expected.empty() && t.header != expected) {
        std::string want;
        for (const auto& e : expected) want += (want.empty() ? "" : ",") + e;
        throw FormatError("CSV header must be '" + want + "'", line_start);
      }
      have_header = true;
      continue;
    }
    if (cells.size() != t.header.size()) {
      throw FormatError("CSV line " + std::to_string(line_no) + " has " + std::to_string(cells.size()) +
                            " fields, expected " + std::to_string(t.header.size()),
                        line_start);
    }
    std::vector<double> row;
    for (auto c : cells) {
      double v = 0.0;
      const auto res = std::from_chars(c.data(), c.data() + c.size(), v);
      if (res.ec != std::errc() || res.ptr != c.data() + c.size()) {
        throw FormatError("CSV line " + std::to_string(line_no) + ": bad number '" + std::string(c) + "'",
                          line_start + static_cast<std::size_t>(c.data() - line.data()));
      }
      row.push_back(v);
    }
    t.rows.push_back(std::move(row));
    if (end == text.size()) break;
  }
  if (!have_header) throw FormatError("empty CSV (no header)", 0);
  return t;
}

inline CsvTable read_csv(const std::string& path, const std::vector<std::string>& expected = {}) {
  const auto bytes = read_file(path);
  return parse_csv(std::string(bytes.begin(), bytes.end()), expected);
}

/// Shortest representation that reads back to the same double.
inline std::string format_double(double v) {
  char buf[64];
  const auto res = std::to_chars(buf, buf + sizeof(buf), v);
  return {buf, res.ptr};
}

class CsvWriter {
 public:
  explicit CsvWriter(const std::vector<std::string>& header) {
    for (std::size_t i = 0; i < header.size(); ++i) text_ += (i ? "," : "") + header[i];
    text_ += "\n";
  }
  void row(const std::vector<double>& values) {
    for (std::size_t i = 0; i < values.size(); ++i) text_ += (i ? "," : "") + format_double(values[i]);
    text_ += "\n";
  }
  const std::string& str() const { return text_; }
  void save(const std::string& path) const { write_file(path, text_); }

 private:
  std::string text_;
};

// Domain tables ------------------------------------------------------------------------

inline const std::vector<std::string> kPoseHeader{"tx", "ty", "tz", "qx", "qy", "qz", "qw"};
inline const std::vector<std::string> kTrackHeader{"frame", "landmark_id", "u", "v"};
inline const std::vector<std::string> kObservationHeader{"u", "v", "log_depth"};

inline int as_index(double v, const char* what) {
  if (!(v >= 0) || v != std::floor(v) || v > 1e9) throw FormatError(std::string("bad ") + what + " index");
  return static_cast<int>(v);
}

/// Camera-from-world poses, one per row.
inline std::vector<Pose> read_poses(const std::string& path) {
  const CsvTable t = read_csv(path, kPoseHeader);
  std::vector<Pose> out;
  for (const auto& r : t.rows) {
    const Eigen::Quaterniond q(r[6], r[3], r[4], r[5]);
    if (!(std::abs(q.norm() - 1.0) < 1e-6)) throw FormatError("pose quaternion is not unit length");
    out.push_back(Pose::from_quaternion(q, Eigen::Vector3d(r[0], r[1], r[2])));
  }
  return out;
}

inline CsvWriter poses_csv(const std::vector<Pose>& poses) {
  CsvWriter w(kPoseHeader);
  for (const auto& p : poses) {
    const Eigen::Quaterniond q = p.quaternion();
    const Eigen::Vector3d t = p.translation();
    w.row({t.x(), t.y(), t.z(), q.x(), q.y(), q.z(), q.w()});
  }
  return w;
}

/// Tracks `frame,landmark_id,u,v` in pixels. Every measurement gets `sigma`.
inline std::vector<Measurement> read_tracks(const std::string& path, double sigma) {
  const CsvTable t = read_csv(path, kTrackHeader);
  std::vector<Measurement> out;
  for (const auto& r : t.rows) {
    out.push_back({as_index(r[0], "frame"), as_index(r[1], "landmark"), Eigen::Vector2d(r[2], r[3]), sigma});
  }
  return out;
}

inline CsvWriter tracks_csv(const std::vector<Measurement>& tracks) {
  CsvWriter w(kTrackHeader);
  for (const auto& z : tracks) w.row({double(z.frame), double(z.landmark), z.pixel.x(), z.pixel.y()});
  return w;
}

inline LogDepthObservations read_observations(const std::string& path) {
  const CsvTable t = read_csv(path, kObservationHeader);
  LogDepthObservations obs;
  obs.y.resize(static_cast<Eigen::Index>(t.rows.size()));
  for (std::size_t i = 0; i < t.rows.size(); ++i) {
    const NormalizedCoord c{t.rows[i][0], t.rows[i][1]};
    if (!is_valid_coord(c)) throw FormatError("observation " + std::to_string(i) + " lies outside [-1,1]^2");
    obs.coords.push_back(c);
    obs.y(static_cast<Eigen::Index>(i)) = t.rows[i][2];
  }
  obs.validate();
  return obs;
}

inline CsvWriter observations_csv(const LogDepthObservations& obs) {
  CsvWriter w(kObservationHeader);
  for (std::size_t i = 0; i < obs.size(); ++i) {
    w.row({obs.coords[i].u, obs.coords[i].v, obs.y(static_cast<Eigen::Index>(i))});
  }
  return w;
}

inline Intrinsics intrinsics_from_json(const json::Json& j) {
  json::reject_unknown(j, "intrinsics", {"fx", "fy", "cx", "cy", "width", "height"});
  for (const char* key : {"fx", "fy", "cx", "cy", "width", "height"}) {
    if (!j.contains(key)) throw ConfigError(std::string("intrinsics: missing '") + key + "'");
  }
  Intrinsics k;
  json::read(j, "fx", k.fx, "intrinsics");
  json::read(j, "fy", k.fy, "intrinsics");
  json::read(j, "cx", k.cx, "intrinsics");
  json::read(j, "cy", k.cy, "intrinsics");
  json::read(j, "width", k.width, "intrinsics");
  json::read(j, "height", k.height, "intrinsics");
  k.validate();
  return k;
}

inline json::Json intrinsics_to_json(const Intrinsics& k) {
  return {{"fx", k.fx}, {"fy", k.fy}, {"cx", k.cx}, {"cy", k.cy}, {"width", k.width}, {"height", k.height}};
}

inline json::Json read_json(const std::string& path) {
  const auto bytes = read_file(path);
  try {
    return json::Json::parse(bytes.begin(), bytes.end());
  } catch (const nlohmann::json::parse_error& e) {
    throw FormatError(std::string("invalid JSON in '") + path + "': " + e.what(), e.byte);
  }
}

}  // namespace dcov::io
