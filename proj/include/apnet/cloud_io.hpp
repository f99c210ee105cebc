#pragma once

#include <cstdio>
#include <cstring>
#include <fstream>
#include <sstream>
#include <string>
#include <vector>

#include "apnet/cloud.hpp"

namespace apnet {

enum class CloudFormat { XyzrgblText, Ply };

namespace io_detail {

inline std::string format_double(double v) {
  char buf[64];
  std::snprintf(buf, sizeof(buf), "%.17g", v);
  return buf;
}

inline double parse_double(const std::string& tok, std::size_t line_no, const char* what) {
  char* end = nullptr;
  const double v = std::strtod(tok.c_str(), &end);
  APNET_REQUIRE(end == tok.c_str() + tok.size() && !tok.empty(),
                "line ", line_no, ": bad ", what, " value '", tok, "'");
  return v;
}

inline long parse_long(const std::string& tok, std::size_t line_no, const char* what) {
  char* end = nullptr;
  const long v = std::strtol(tok.c_str(), &end, 10);
  APNET_REQUIRE(end == tok.c_str() + tok.size() && !tok.empty(),
                "line ", line_no, ": bad ", what, " value '", tok, "'");
  return v;
}

inline std::vector<std::string> split_ws(const std::string& line) {
  std::vector<std::string> toks;
  std::istringstream is(line);
  std::string t;
  while (is >> t) toks.push_back(t);
  return toks;
}

// --- PLY support (read-only, vertex element only) ---

enum class PlyType { Char, UChar, Short, UShort, Int, UInt, Float, Double };

inline PlyType ply_type(const std::string& name, std::size_t line_no) {
  if (name == "char" || name == "int8") return PlyType::Char;
  if (name == "uchar" || name == "uint8") return PlyType::UChar;
  if (name == "short" || name == "int16") return PlyType::Short;
  if (name == "ushort" || name == "uint16") return PlyType::UShort;
  if (name == "int" || name == "int32") return PlyType::Int;
  if (name == "uint" || name == "uint32") return PlyType::UInt;
  if (name == "float" || name == "float32") return PlyType::Float;
  if (name == "double" || name == "float64") return PlyType::Double;
  throw Error(detail::format_msg("ply header line ", line_no, ": unsupported type '", name, "'"));
}

inline std::size_t ply_type_size(PlyType t) {
  switch (t) {
    case PlyType::Char: case PlyType::UChar: return 1;
    case PlyType::Short: case PlyType::UShort: return 2;
    case PlyType::Int: case PlyType::UInt: case PlyType::Float: return 4;
    case PlyType::Double: return 8;
  }
  return 0;
}

inline double ply_decode(PlyType t, const unsigned char* p) {
  switch (t) {
    case PlyType::Char: { signed char v; std::memcpy(&v, p, 1); return v; }
    case PlyType::UChar: { unsigned char v; std::memcpy(&v, p, 1); return v; }
    case PlyType::Short: { std::int16_t v; std::memcpy(&v, p, 2); return v; }
    case PlyType::UShort: { std::uint16_t v; std::memcpy(&v, p, 2); return v; }
    case PlyType::Int: { std::int32_t v; std::memcpy(&v, p, 4); return v; }
    case PlyType::UInt: { std::uint32_t v; std::memcpy(&v, p, 4); return v; }
    case PlyType::Float: { float v; std::memcpy(&v, p, 4); return v; }
    case PlyType::Double: { double v; std::memcpy(&v, p, 8); return v; }
  }
  return 0.0;
}

struct PlyProperty {
  std::string name;
  PlyType type = PlyType::Float;
};

struct PlyHeader {
  bool binary = false;
  std::size_t vertex_count = 0;
  std::vector<PlyProperty> properties;
  std::size_t header_lines = 0;
};

inline PlyHeader read_ply_header(std::istream& in) {
  PlyHeader h;
  std::string line;
  std::size_t line_no = 0;

  APNET_REQUIRE(std::getline(in, line), "ply: empty file");
  ++line_no;
  if (!line.empty() && line.back() == '\r') line.pop_back();
  APNET_REQUIRE(line == "ply", "ply line 1: missing 'ply' magic");

  bool have_format = false, in_vertex = false, seen_vertex = false;
  while (std::getline(in, line)) {
    ++line_no;
    if (!line.empty() && line.back() == '\r') line.pop_back();
    const auto toks = split_ws(line);
    if (toks.empty() || toks[0] == "comment" || toks[0] == "obj_info") continue;
    if (toks[0] == "format") {
      APNET_REQUIRE(toks.size() >= 2, "ply line ", line_no, ": malformed format");
      if (toks[1] == "ascii") h.binary = false;
      else if (toks[1] == "binary_little_endian") h.binary = true;
      else throw Error(detail::format_msg("ply line ", line_no, ": unsupported format '", toks[1], "'"));
      have_format = true;
    } else if (toks[0] == "element") {
      APNET_REQUIRE(toks.size() == 3, "ply line ", line_no, ": malformed element");
      APNET_REQUIRE(toks[1] == "vertex",
                    "ply line ", line_no, ": only the vertex element is supported, got '", toks[1], "'");
      APNET_REQUIRE(!seen_vertex, "ply line ", line_no, ": duplicate vertex element");
      h.vertex_count = std::size_t(parse_long(toks[2], line_no, "vertex count"));
      in_vertex = seen_vertex = true;
    } else if (toks[0] == "property") {
      APNET_REQUIRE(in_vertex, "ply line ", line_no, ": property outside vertex element");
      APNET_REQUIRE(toks.size() == 3 && toks[1] != "list",
                    "ply line ", line_no, ": list properties are not supported");
      h.properties.push_back({toks[2], ply_type(toks[1], line_no)});
    } else if (toks[0] == "end_header") {
      h.header_lines = line_no;
      APNET_REQUIRE(have_format, "ply: missing format line");
      APNET_REQUIRE(seen_vertex, "ply: missing vertex element");
      return h;
    } else {
      throw Error(detail::format_msg("ply line ", line_no, ": unexpected header token '", toks[0], "'"));
    }
  }
  throw Error("ply: truncated header (no end_header)");
}

}  // namespace io_detail

inline LabeledPointCloud read_cloud_xyzrgbl(std::istream& in) {
  using namespace io_detail;
  std::string line;
  std::size_t line_no = 0;

  // Header: xyzrgbl <N> <class_count> <has_labels:0|1>
  std::vector<std::string> head;
  while (std::getline(in, line)) {
    ++line_no;
    if (!line.empty() && line.back() == '\r') line.pop_back();
    if (line.empty() || line[0] == '#') continue;
    head = split_ws(line);
    break;
  }
  APNET_REQUIRE(!head.empty(), "xyzrgbl: missing header line");
  APNET_REQUIRE(head.size() == 4 && head[0] == "xyzrgbl",
                "line ", line_no, ": malformed header, expected 'xyzrgbl <N> <class_count> <has_labels>'");
  const long n = parse_long(head[1], line_no, "point count");
  const long class_count = parse_long(head[2], line_no, "class count");
  const long has_labels = parse_long(head[3], line_no, "labels flag");
  APNET_REQUIRE(n >= 0, "line ", line_no, ": negative point count");
  APNET_REQUIRE(class_count >= 0, "line ", line_no, ": negative class count");
  APNET_REQUIRE(has_labels == 0 || has_labels == 1, "line ", line_no, ": labels flag must be 0 or 1");

  LabeledPointCloud cloud;
  cloud.class_count = int(class_count);
  if (has_labels) cloud.labels.emplace();
  cloud.positions.reserve(std::size_t(n));

  std::size_t record = 0;
  while (std::getline(in, line)) {
    ++line_no;
    if (!line.empty() && line.back() == '\r') line.pop_back();
    if (line.empty() || line[0] == '#') continue;
    const auto toks = split_ws(line);
    const std::size_t want = has_labels ? 7 : 6;
    APNET_REQUIRE(toks.size() == want, "line ", line_no, ": expected ", want,
                  " fields, got ", toks.size());
    Point3 p{parse_double(toks[0], line_no, "x"),
             parse_double(toks[1], line_no, "y"),
             parse_double(toks[2], line_no, "z")};
    APNET_REQUIRE(std::isfinite(p.x) && std::isfinite(p.y) && std::isfinite(p.z),
                  "line ", line_no, ": non-finite coordinate");
    Color3 c{parse_double(toks[3], line_no, "r"),
             parse_double(toks[4], line_no, "g"),
             parse_double(toks[5], line_no, "b")};
    cloud.positions.push_back(p);
    cloud.colors.push_back(c);
    if (has_labels) {
      const long l = parse_long(toks[6], line_no, "label");
      APNET_REQUIRE(l >= 0 && l < class_count,
                    "line ", line_no, ": label ", l, " outside [0, ", class_count, ")");
      cloud.labels->push_back(int(l));
    }
    ++record;
  }
  APNET_REQUIRE(record == std::size_t(n), "xyzrgbl: header declares ", n,
                " points but body has ", record);
  cloud.validate();
  return cloud;
}

inline LabeledPointCloud read_cloud_ply(std::istream& in) {
  using namespace io_detail;
  const PlyHeader h = read_ply_header(in);

  int ix = -1, iy = -1, iz = -1, ir = -1, ig = -1, ib = -1, il = -1;
  for (std::size_t i = 0; i < h.properties.size(); ++i) {
    const std::string& name = h.properties[i].name;
    if (name == "x") ix = int(i);
    else if (name == "y") iy = int(i);
    else if (name == "z") iz = int(i);
    else if (name == "red" || name == "r") ir = int(i);
    else if (name == "green" || name == "g") ig = int(i);
    else if (name == "blue" || name == "b") ib = int(i);
    else if (name == "label" || name == "class") il = int(i);
  }
  APNET_REQUIRE(ix >= 0 && iy >= 0 && iz >= 0, "ply: vertex element lacks x/y/z");
  APNET_REQUIRE(ir >= 0 && ig >= 0 && ib >= 0, "ply: vertex element lacks red/green/blue");

  // 8-bit colors are normalized to [0,1] on read.
  auto color_scale = [&](int idx) {
    const PlyType t = h.properties[std::size_t(idx)].type;
    return (t == PlyType::Float || t == PlyType::Double) ? 1.0 : 1.0 / 255.0;
  };
  const double sr = color_scale(ir), sg = color_scale(ig), sb = color_scale(ib);

  LabeledPointCloud cloud;
  if (il >= 0) cloud.labels.emplace();
  cloud.positions.reserve(h.vertex_count);

  std::vector<double> row(h.properties.size(), 0.0);
  if (h.binary) {
    std::size_t rec_size = 0;
    std::vector<std::size_t> offsets;
    for (const auto& p : h.properties) {
      offsets.push_back(rec_size);
      rec_size += ply_type_size(p.type);
    }
    std::vector<unsigned char> rec(rec_size);
    for (std::size_t v = 0; v < h.vertex_count; ++v) {
      in.read(reinterpret_cast<char*>(rec.data()), std::streamsize(rec_size));
      APNET_REQUIRE(in.gcount() == std::streamsize(rec_size),
                    "ply: truncated binary body at vertex ", v);
      for (std::size_t i = 0; i < h.properties.size(); ++i)
        row[i] = ply_decode(h.properties[i].type, rec.data() + offsets[i]);
      cloud.positions.push_back({row[std::size_t(ix)], row[std::size_t(iy)], row[std::size_t(iz)]});
      cloud.colors.push_back({row[std::size_t(ir)] * sr, row[std::size_t(ig)] * sg, row[std::size_t(ib)] * sb});
      if (il >= 0) cloud.labels->push_back(int(row[std::size_t(il)]));
    }
  } else {
    std::string line;
    std::size_t line_no = h.header_lines;
    for (std::size_t v = 0; v < h.vertex_count; ++v) {
      do {
        APNET_REQUIRE(std::getline(in, line), "ply: truncated ascii body at vertex ", v);
        ++line_no;
        if (!line.empty() && line.back() == '\r') line.pop_back();
      } while (line.empty());
      const auto toks = split_ws(line);
      APNET_REQUIRE(toks.size() == h.properties.size(), "ply line ", line_no,
                    ": expected ", h.properties.size(), " values, got ", toks.size());
      for (std::size_t i = 0; i < toks.size(); ++i)
        row[i] = parse_double(toks[i], line_no, h.properties[i].name.c_str());
      cloud.positions.push_back({row[std::size_t(ix)], row[std::size_t(iy)], row[std::size_t(iz)]});
      cloud.colors.push_back({row[std::size_t(ir)] * sr, row[std::size_t(ig)] * sg, row[std::size_t(ib)] * sb});
      if (il >= 0) cloud.labels->push_back(int(row[std::size_t(il)]));
    }
  }

  if (cloud.has_labels()) {
    int max_label = -1;
    for (std::size_t i = 0; i < cloud.labels->size(); ++i) {
      const int l = (*cloud.labels)[i];
      APNET_REQUIRE(l >= 0, "ply: negative label at vertex ", i);
      max_label = std::max(max_label, l);
    }
    cloud.class_count = max_label + 1;
  }
  cloud.validate();
  return cloud;
}

inline LabeledPointCloud read_cloud(const std::string& path, CloudFormat format) {
  std::ifstream in(path, std::ios::binary);
  APNET_REQUIRE(in.good(), "cannot open '", path, "' for reading");
  switch (format) {
    case CloudFormat::XyzrgblText: return read_cloud_xyzrgbl(in);
    case CloudFormat::Ply: return read_cloud_ply(in);
  }
  throw Error("read_cloud: unknown format");
}

inline void write_cloud_xyzrgbl(const LabeledPointCloud& cloud, std::ostream& out) {
  using io_detail::format_double;
  cloud.validate();
  out << "xyzrgbl " << cloud.size() << ' ' << cloud.class_count << ' '
      << (cloud.has_labels() ? 1 : 0) << '\n';
  for (std::size_t i = 0; i < cloud.size(); ++i) {
    const Point3& p = cloud.positions[i];
    const Color3& c = cloud.colors[i];
    out << format_double(p.x) << ' ' << format_double(p.y) << ' ' << format_double(p.z)
        << ' ' << format_double(c.r) << ' ' << format_double(c.g) << ' ' << format_double(c.b);
    if (cloud.has_labels()) out << ' ' << (*cloud.labels)[i];
    out << '\n';
  }
}

inline void write_cloud(const LabeledPointCloud& cloud, const std::string& path,
                        CloudFormat format) {
  APNET_REQUIRE(format == CloudFormat::XyzrgblText, "write_cloud: PLY output is not supported");
  std::ofstream out(path, std::ios::binary);
  APNET_REQUIRE(out.good(), "cannot open '", path, "' for writing");
  write_cloud_xyzrgbl(cloud, out);
  out.flush();
  APNET_REQUIRE(out.good(), "write to '", path, "' failed");
}

}  // namespace apnet
