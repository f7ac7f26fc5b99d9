#pragma once
// File formats: EVT1 binary event files, PFM float images (depth and flow),
// PGM occupancy grids, and CSV tables. All multi-byte fields little-endian.
//
// EVT1 layout: magic "EVT1", u16 width, u16 height, u64 count (16-byte
// header), then `count` 16-byte records: u64 t_us, u16 x, u16 y, i8 p,
// 3 zero bytes of padding.

#include <bit>
#include <charconv>
#include <cstdint>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <string>
#include <system_error>
#include <vector>

#include "evcm/types.hpp"

namespace evcm {

namespace detail {

inline void put_u16(std::vector<unsigned char>& b, std::uint16_t v) {
  b.push_back(static_cast<unsigned char>(v & 0xff));
  b.push_back(static_cast<unsigned char>(v >> 8));
}
inline void put_u32(std::vector<unsigned char>& b, std::uint32_t v) {
  for (int i = 0; i < 4; ++i) b.push_back(static_cast<unsigned char>((v >> (8 * i)) & 0xff));
}
inline void put_u64(std::vector<unsigned char>& b, std::uint64_t v) {
  for (int i = 0; i < 8; ++i) b.push_back(static_cast<unsigned char>((v >> (8 * i)) & 0xff));
}
inline std::uint16_t get_u16(const unsigned char* p) {
  return static_cast<std::uint16_t>(p[0] | (p[1] << 8));
}
inline std::uint64_t get_u64(const unsigned char* p) {
  std::uint64_t v = 0;
  for (int i = 7; i >= 0; --i) v = (v << 8) | p[i];
  return v;
}
inline void put_f32(std::vector<unsigned char>& b, float v) {
  put_u32(b, std::bit_cast<std::uint32_t>(v));
}
inline float get_f32_le(const unsigned char* p) {
  std::uint32_t v = 0;
  for (int i = 3; i >= 0; --i) v = (v << 8) | p[i];
  return std::bit_cast<float>(v);
}
inline float get_f32_be(const unsigned char* p) {
  std::uint32_t v = 0;
  for (int i = 0; i < 4; ++i) v = (v << 8) | p[i];
  return std::bit_cast<float>(v);
}

inline std::vector<unsigned char> read_file_bytes(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw IoError("cannot open " + path.string());
  in.seekg(0, std::ios::end);
  const std::streamoff n = in.tellg();
  in.seekg(0, std::ios::beg);
  std::vector<unsigned char> bytes(static_cast<std::size_t>(n));
  if (n > 0) in.read(reinterpret_cast<char*>(bytes.data()), n);
  if (!in) throw IoError("read failed on " + path.string());
  return bytes;
}

inline void write_file_bytes(const std::filesystem::path& path,
                             const std::vector<unsigned char>& bytes) {
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw IoError("cannot open " + path.string() + " for writing");
  out.write(reinterpret_cast<const char*>(bytes.data()),
            static_cast<std::streamsize>(bytes.size()));
  out.flush();
  if (!out) throw IoError("write failed on " + path.string());
}

// Reads one whitespace-delimited token, skipping '#' comments when enabled.
inline std::string next_token(const unsigned char* data, std::size_t size, std::size_t& pos,
                              const std::string& what, bool allow_comments) {
  for (;;) {
    while (pos < size && std::isspace(data[pos])) ++pos;
    if (allow_comments && pos < size && data[pos] == '#') {
      while (pos < size && data[pos] != '\n') ++pos;
      continue;
    }
    break;
  }
  if (pos >= size) throw TruncatedFileError(what + ": unexpected end of header");
  std::string tok;
  while (pos < size && !std::isspace(data[pos])) tok.push_back(static_cast<char>(data[pos++]));
  return tok;
}

inline int parse_int(const std::string& tok, const std::string& what) {
  int v = 0;
  const auto [ptr, ec] = std::from_chars(tok.data(), tok.data() + tok.size(), v);
  if (ec != std::errc{} || ptr != tok.data() + tok.size())
    throw IoError(what + ": bad integer '" + tok + "'");
  return v;
}

}  // namespace detail

// ---- EVT1 events ------------------------------------------------------------

inline constexpr std::size_t kEvt1HeaderBytes = 16;
inline constexpr std::size_t kEvt1RecordBytes = 16;

inline EventSlice read_events(const std::filesystem::path& path) {
  const std::vector<unsigned char> bytes = detail::read_file_bytes(path);
  if (bytes.size() < kEvt1HeaderBytes)
    throw TruncatedFileError("EVT1: file shorter than the 16-byte header");
  if (std::memcmp(bytes.data(), "EVT1", 4) != 0)
    throw BadMagicError("EVT1: bad magic in " + path.string());
  EventSlice slice;
  slice.width = detail::get_u16(bytes.data() + 4);
  slice.height = detail::get_u16(bytes.data() + 6);
  const std::uint64_t count = detail::get_u64(bytes.data() + 8);
  if (slice.width == 0 || slice.height == 0)
    throw DimensionMismatchError("EVT1: zero sensor dimension");
  const std::uint64_t payload = bytes.size() - kEvt1HeaderBytes;
  if (count > payload / kEvt1RecordBytes)
    throw TruncatedFileError("EVT1: header count exceeds payload size");
  if (payload != count * kEvt1RecordBytes)
    throw IoError("EVT1: trailing bytes after last record");

  slice.events.reserve(count);
  const unsigned char* p = bytes.data() + kEvt1HeaderBytes;
  std::uint64_t prev_t = 0;
  for (std::uint64_t i = 0; i < count; ++i, p += kEvt1RecordBytes) {
    Event e;
    e.t_us = detail::get_u64(p);
    e.x = detail::get_u16(p + 8);
    e.y = detail::get_u16(p + 10);
    e.p = static_cast<std::int8_t>(p[12]);
    if (e.x >= slice.width || e.y >= slice.height)
      throw CoordinateRangeError("EVT1: record " + std::to_string(i) +
                                 " coordinate out of range");
    if (e.p != 1 && e.p != -1)
      throw InvalidPolarityError("EVT1: record " + std::to_string(i) + " bad polarity");
    if (i > 0 && e.t_us < prev_t)
      throw UnsortedEventsError("EVT1: record " + std::to_string(i) +
                                " breaks timestamp order");
    prev_t = e.t_us;
    slice.events.push_back(e);
  }
  // The header carries no window bounds; canonicalize to the tightest window
  // containing all events (empty file -> empty window).
  slice.t_start_us = slice.events.empty() ? 0 : slice.events.front().t_us;
  slice.t_end_us = slice.events.empty() ? 0 : slice.events.back().t_us + 1;
  return slice;
}

inline void write_events(const EventSlice& slice, const std::filesystem::path& path) {
  slice.validate();
  std::vector<unsigned char> bytes;
  bytes.reserve(kEvt1HeaderBytes + slice.events.size() * kEvt1RecordBytes);
  bytes.insert(bytes.end(), {'E', 'V', 'T', '1'});
  detail::put_u16(bytes, slice.width);
  detail::put_u16(bytes, slice.height);
  detail::put_u64(bytes, slice.events.size());
  for (const Event& e : slice.events) {
    detail::put_u64(bytes, e.t_us);
    detail::put_u16(bytes, e.x);
    detail::put_u16(bytes, e.y);
    bytes.push_back(static_cast<unsigned char>(static_cast<std::uint8_t>(e.p)));
    bytes.insert(bytes.end(), {0, 0, 0});
  }
  detail::write_file_bytes(path, bytes);
}

// ---- PFM float images -------------------------------------------------------

// Grayscale "Pf" maps; the scale token's sign encodes byte order (negative =
// little-endian, which is what write_pfm emits). Rows are stored bottom-up.
inline Image<float> read_pfm(const std::filesystem::path& path) {
  const std::vector<unsigned char> bytes = detail::read_file_bytes(path);
  std::size_t pos = 0;
  const std::string magic =
      detail::next_token(bytes.data(), bytes.size(), pos, "PFM", false);
  if (magic != "Pf")
    throw BadMagicError("PFM: expected grayscale magic 'Pf' in " + path.string());
  const int w = detail::parse_int(
      detail::next_token(bytes.data(), bytes.size(), pos, "PFM", false), "PFM width");
  const int h = detail::parse_int(
      detail::next_token(bytes.data(), bytes.size(), pos, "PFM", false), "PFM height");
  const std::string scale_tok =
      detail::next_token(bytes.data(), bytes.size(), pos, "PFM", false);
  const double scale = std::strtod(scale_tok.c_str(), nullptr);
  if (scale == 0.0) throw IoError("PFM: zero scale");
  if (w <= 0 || h <= 0) throw DimensionMismatchError("PFM: non-positive dimensions");
  ++pos;  // exactly one whitespace byte separates header and raster
  const std::size_t need = static_cast<std::size_t>(w) * static_cast<std::size_t>(h) * 4;
  if (bytes.size() - pos < need) throw TruncatedFileError("PFM: raster shorter than w*h");
  if (bytes.size() - pos > need) throw IoError("PFM: trailing bytes after raster");

  const bool little = scale < 0.0;
  const float mag = static_cast<float>(little ? -scale : scale);
  Image<float> img(w, h);
  const unsigned char* p = bytes.data() + pos;
  for (int row = 0; row < h; ++row) {
    const int y = h - 1 - row;  // file stores the bottom row first
    for (int x = 0; x < w; ++x, p += 4) {
      float v = little ? detail::get_f32_le(p) : detail::get_f32_be(p);
      if (mag != 1.0f) v *= mag;
      img.at(x, y) = v;
    }
  }
  return img;
}

inline void write_pfm(const Image<float>& img, const std::filesystem::path& path) {
  if (img.empty()) throw DimensionMismatchError("PFM: refusing to write empty image");
  std::vector<unsigned char> bytes;
  const std::string header = "Pf\n" + std::to_string(img.width()) + " " +
                             std::to_string(img.height()) + "\n-1.0\n";
  bytes.insert(bytes.end(), header.begin(), header.end());
  for (int row = img.height() - 1; row >= 0; --row)
    for (int x = 0; x < img.width(); ++x) detail::put_f32(bytes, img.at(x, row));
  detail::write_file_bytes(path, bytes);
}

inline Image<float> to_float_image(const Image<double>& in) {
  Image<float> out(in.width(), in.height());
  for (std::size_t i = 0; i < in.size(); ++i) out[i] = static_cast<float>(in[i]);
  return out;
}

inline Image<double> to_double_image(const Image<float>& in) {
  Image<double> out(in.width(), in.height());
  for (std::size_t i = 0; i < in.size(); ++i) out[i] = static_cast<double>(in[i]);
  return out;
}

// Flow is stored as two PFM files (u, then v).
inline void write_flow_pfm(const FlowField& flow, const std::filesystem::path& u_path,
                           const std::filesystem::path& v_path) {
  flow.validate();
  write_pfm(to_float_image(flow.u), u_path);
  write_pfm(to_float_image(flow.v), v_path);
}

inline FlowField read_flow_pfm(const std::filesystem::path& u_path,
                               const std::filesystem::path& v_path,
                               double bin_duration_s) {
  FlowField f;
  f.u = to_double_image(read_pfm(u_path));
  f.v = to_double_image(read_pfm(v_path));
  f.bin_duration_s = bin_duration_s;
  f.validate();
  return f;
}

// ---- PGM occupancy grids ----------------------------------------------------

inline Image<std::uint8_t> read_pgm(const std::filesystem::path& path) {
  const std::vector<unsigned char> bytes = detail::read_file_bytes(path);
  std::size_t pos = 0;
  const std::string magic =
      detail::next_token(bytes.data(), bytes.size(), pos, "PGM", true);
  if (magic != "P5") throw BadMagicError("PGM: expected binary magic 'P5'");
  const int w = detail::parse_int(
      detail::next_token(bytes.data(), bytes.size(), pos, "PGM", true), "PGM width");
  const int h = detail::parse_int(
      detail::next_token(bytes.data(), bytes.size(), pos, "PGM", true), "PGM height");
  const int maxval = detail::parse_int(
      detail::next_token(bytes.data(), bytes.size(), pos, "PGM", true), "PGM maxval");
  if (w <= 0 || h <= 0) throw DimensionMismatchError("PGM: non-positive dimensions");
  if (maxval <= 0 || maxval > 255) throw IoError("PGM: only 8-bit maxval supported");
  ++pos;  // single whitespace byte before the raster
  const std::size_t need = static_cast<std::size_t>(w) * static_cast<std::size_t>(h);
  if (bytes.size() - pos < need) throw TruncatedFileError("PGM: raster shorter than w*h");
  Image<std::uint8_t> img(w, h);
  for (int y = 0; y < h; ++y)
    for (int x = 0; x < w; ++x) img.at(x, y) = bytes[pos++];
  return img;
}

inline void write_pgm(const Image<std::uint8_t>& img, const std::filesystem::path& path) {
  if (img.empty()) throw DimensionMismatchError("PGM: refusing to write empty image");
  std::vector<unsigned char> bytes;
  const std::string header =
      "P5\n" + std::to_string(img.width()) + " " + std::to_string(img.height()) + "\n255\n";
  bytes.insert(bytes.end(), header.begin(), header.end());
  for (int y = 0; y < img.height(); ++y)
    for (int x = 0; x < img.width(); ++x) bytes.push_back(img.at(x, y));
  detail::write_file_bytes(path, bytes);
}

// ---- CSV --------------------------------------------------------------------

// Shortest decimal form that parses back to the same double; deterministic.
inline std::string format_number(double v) {
  char buf[64];
  const auto res = std::to_chars(buf, buf + sizeof(buf), v);
  return std::string(buf, res.ptr);
}

class CsvWriter {
 public:
  CsvWriter(const std::filesystem::path& path, const std::vector<std::string>& columns)
      : out_(path, std::ios::trunc), n_cols_(columns.size()) {
    if (!out_) throw IoError("cannot open " + path.string() + " for writing");
    write_row(columns);
  }

  void write_row(const std::vector<std::string>& cells) {
    if (cells.size() != n_cols_) throw ConfigError("CSV: wrong cell count for row");
    for (std::size_t i = 0; i < cells.size(); ++i) {
      if (i) out_ << ',';
      out_ << cells[i];
    }
    out_ << '\n';
    if (!out_) throw IoError("CSV: write failed");
  }

  void flush() { out_.flush(); }

 private:
  std::ofstream out_;
  std::size_t n_cols_;
};

// Minimal CSV reader for tests and tooling: no quoting, comma-separated.
inline std::vector<std::vector<std::string>> read_csv(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw IoError("cannot open " + path.string());
  std::vector<std::vector<std::string>> rows;
  std::string line;
  while (std::getline(in, line)) {
    if (!line.empty() && line.back() == '\r') line.pop_back();
    std::vector<std::string> cells;
    std::size_t start = 0;
    for (;;) {
      const std::size_t comma = line.find(',', start);
      cells.push_back(line.substr(start, comma - start));
      if (comma == std::string::npos) break;
      start = comma + 1;
    }
    rows.push_back(std::move(cells));
  }
  return rows;
}

}  // namespace evcm
