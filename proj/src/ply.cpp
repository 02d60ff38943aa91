#include "fruitreid/io.hpp"

#include <algorithm>
#include <bit>
#include <charconv>
#include <cmath>
#include <cstring>
#include <fstream>
#include <sstream>
#include <string_view>

namespace fruitreid {

static_assert(std::endian::native == std::endian::little,
              "binary PLY I/O assumes a little-endian host");

namespace {

enum class ScalarType { Int8, UInt8, Int16, UInt16, Int32, UInt32, Float32, Float64 };

std::optional<ScalarType> parse_scalar_type(std::string_view name) {
  if (name == "char" || name == "int8") return ScalarType::Int8;
  if (name == "uchar" || name == "uint8") return ScalarType::UInt8;
  if (name == "short" || name == "int16") return ScalarType::Int16;
  if (name == "ushort" || name == "uint16") return ScalarType::UInt16;
  if (name == "int" || name == "int32") return ScalarType::Int32;
  if (name == "uint" || name == "uint32") return ScalarType::UInt32;
  if (name == "float" || name == "float32") return ScalarType::Float32;
  if (name == "double" || name == "float64") return ScalarType::Float64;
  return std::nullopt;
}

std::size_t type_size(ScalarType t) {
  switch (t) {
    case ScalarType::Int8:
    case ScalarType::UInt8: return 1;
    case ScalarType::Int16:
    case ScalarType::UInt16: return 2;
    case ScalarType::Int32:
    case ScalarType::UInt32:
    case ScalarType::Float32: return 4;
    case ScalarType::Float64: return 8;
  }
  return 0;
}

bool is_float(ScalarType t) { return t == ScalarType::Float32 || t == ScalarType::Float64; }

struct Property {
  std::string name;
  ScalarType type = ScalarType::Float32;
  bool is_list = false;
  ScalarType count_type = ScalarType::UInt8;
};

struct Element {
  std::string name;
  std::size_t count = 0;
  std::vector<Property> properties;
};

struct Header {
  bool binary = false;
  std::vector<Element> elements;
  std::size_t data_offset = 0;
  std::size_t data_line = 0;  // first line number after end_header (ASCII)
};

[[noreturn]] void header_error(std::size_t line, const std::string& what) {
  throw ParseError("PLY header line " + std::to_string(line) + ": " + what);
}

std::vector<std::string_view> split_ws(std::string_view s) {
  std::vector<std::string_view> out;
  std::size_t i = 0;
  while (i < s.size()) {
    while (i < s.size() && (s[i] == ' ' || s[i] == '\t' || s[i] == '\r')) ++i;
    std::size_t j = i;
    while (j < s.size() && s[j] != ' ' && s[j] != '\t' && s[j] != '\r') ++j;
    if (j > i) out.push_back(s.substr(i, j - i));
    i = j;
  }
  return out;
}

Header parse_header(std::string_view data) {
  Header h;
  std::size_t pos = 0;
  std::size_t line_no = 0;
  bool saw_format = false;
  auto next_line = [&](std::string_view& line) {
    if (pos >= data.size()) return false;
    std::size_t end = data.find('\n', pos);
    if (end == std::string_view::npos) end = data.size();
    line = data.substr(pos, end - pos);
    pos = end + 1;
    ++line_no;
    return true;
  };
  std::string_view line;
  if (!next_line(line) || split_ws(line) != std::vector<std::string_view>{"ply"}) {
    header_error(1, "missing 'ply' magic");
  }
  while (true) {
    if (!next_line(line)) header_error(line_no, "missing end_header");
    auto tok = split_ws(line);
    if (tok.empty()) continue;
    if (tok[0] == "end_header") break;
    if (tok[0] == "comment" || tok[0] == "obj_info") continue;
    if (tok[0] == "format") {
      if (tok.size() != 3) header_error(line_no, "malformed format line");
      if (tok[1] == "ascii") {
        h.binary = false;
      } else if (tok[1] == "binary_little_endian") {
        h.binary = true;
      } else {
        header_error(line_no, "unsupported format '" + std::string(tok[1]) + "'");
      }
      saw_format = true;
    } else if (tok[0] == "element") {
      if (tok.size() != 3) header_error(line_no, "malformed element line");
      Element e;
      e.name = std::string(tok[1]);
      auto [p, ec] = std::from_chars(tok[2].data(), tok[2].data() + tok[2].size(), e.count);
      if (ec != std::errc() || p != tok[2].data() + tok[2].size()) {
        header_error(line_no, "bad element count '" + std::string(tok[2]) + "'");
      }
      h.elements.push_back(std::move(e));
    } else if (tok[0] == "property") {
      if (h.elements.empty()) header_error(line_no, "property before any element");
      Property prop;
      if (tok.size() == 5 && tok[1] == "list") {
        auto ct = parse_scalar_type(tok[2]);
        auto vt = parse_scalar_type(tok[3]);
        if (!ct || !vt || is_float(*ct)) header_error(line_no, "bad list property types");
        prop.is_list = true;
        prop.count_type = *ct;
        prop.type = *vt;
        prop.name = std::string(tok[4]);
      } else if (tok.size() == 3) {
        auto t = parse_scalar_type(tok[1]);
        if (!t) header_error(line_no, "unknown property type '" + std::string(tok[1]) + "'");
        prop.type = *t;
        prop.name = std::string(tok[2]);
      } else {
        header_error(line_no, "malformed property line");
      }
      h.elements.back().properties.push_back(std::move(prop));
    } else {
      header_error(line_no, "unexpected keyword '" + std::string(tok[0]) + "'");
    }
  }
  if (!saw_format) header_error(line_no, "missing format line");
  h.data_offset = pos;
  h.data_line = line_no + 1;
  return h;
}

double read_binary_scalar(const char* p, ScalarType t) {
  switch (t) {
    case ScalarType::Int8: { std::int8_t v; std::memcpy(&v, p, 1); return v; }
    case ScalarType::UInt8: { std::uint8_t v; std::memcpy(&v, p, 1); return v; }
    case ScalarType::Int16: { std::int16_t v; std::memcpy(&v, p, 2); return v; }
    case ScalarType::UInt16: { std::uint16_t v; std::memcpy(&v, p, 2); return v; }
    case ScalarType::Int32: { std::int32_t v; std::memcpy(&v, p, 4); return v; }
    case ScalarType::UInt32: { std::uint32_t v; std::memcpy(&v, p, 4); return v; }
    case ScalarType::Float32: { float v; std::memcpy(&v, p, 4); return v; }
    case ScalarType::Float64: { double v; std::memcpy(&v, p, 8); return v; }
  }
  return 0.0;
}

double parse_ascii_scalar(std::string_view tok, ScalarType t, std::size_t line) {
  const char* b = tok.data();
  const char* e = tok.data() + tok.size();
  std::from_chars_result r{};
  double out = 0.0;
  if (t == ScalarType::Float32) {
    float v = 0.0f;
    r = std::from_chars(b, e, v);
    out = v;
  } else if (t == ScalarType::Float64) {
    r = std::from_chars(b, e, out);
  } else {
    long long v = 0;
    r = std::from_chars(b, e, v);
    out = static_cast<double>(v);
  }
  // from_chars rejects "nan"/"inf" spellings only on some libraries; accept them.
  if (r.ec != std::errc() || r.ptr != e) {
    if (is_float(t) && (tok == "nan" || tok == "NaN" || tok == "-nan")) return std::nan("");
    throw ParseError("PLY data line " + std::to_string(line) + ": bad value '" + std::string(tok) +
                     "'");
  }
  return out;
}

double color_scale(ScalarType t) {
  switch (t) {
    case ScalarType::UInt8: return 1.0 / 255.0;
    case ScalarType::UInt16: return 1.0 / 65535.0;
    case ScalarType::Float32:
    case ScalarType::Float64: return 1.0;
    default: return 1.0 / 255.0;
  }
}

struct VertexLayout {
  int x = -1, y = -1, z = -1, r = -1, g = -1, b = -1, instance = -1;
};

VertexLayout find_layout(const Element& vertex) {
  VertexLayout l;
  for (std::size_t i = 0; i < vertex.properties.size(); ++i) {
    const auto& n = vertex.properties[i].name;
    const int idx = static_cast<int>(i);
    if (n == "x") l.x = idx;
    else if (n == "y") l.y = idx;
    else if (n == "z") l.z = idx;
    else if (n == "red" || n == "r") l.r = idx;
    else if (n == "green" || n == "g") l.g = idx;
    else if (n == "blue" || n == "b") l.b = idx;
    else if (n == "instance_id") l.instance = idx;
  }
  return l;
}

}  // namespace

PlyData load_ply(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw IoError("cannot open '" + path.string() + "'");
  std::string data((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());
  const Header h = parse_header(data);

  std::size_t vertex_elem = h.elements.size();
  for (std::size_t e = 0; e < h.elements.size(); ++e) {
    if (h.elements[e].name == "vertex") {
      vertex_elem = e;
      break;
    }
  }
  if (vertex_elem == h.elements.size()) throw ParseError("PLY header: no vertex element");
  const Element& vertex = h.elements[vertex_elem];
  const VertexLayout lay = find_layout(vertex);
  if (lay.x < 0 || lay.y < 0 || lay.z < 0) {
    throw ParseError("PLY header: vertex element lacks x, y, z properties");
  }
  if (lay.r < 0 || lay.g < 0 || lay.b < 0) {
    throw ParseError("PLY header: vertex element lacks red, green, blue properties");
  }
  for (const auto& p : vertex.properties) {
    if (p.is_list) throw ParseError("PLY header: list property '" + p.name + "' on vertex element");
  }

  const std::size_t n = vertex.count;
  const std::size_t nprop = vertex.properties.size();
  std::vector<double> values(n * nprop);

  if (h.binary) {
    std::size_t pos = h.data_offset;
    auto need = [&](std::size_t bytes) {
      if (pos + bytes > data.size()) throw ParseError("PLY data truncated");
    };
    // Skip any elements preceding the vertex block.
    for (std::size_t e = 0; e < vertex_elem; ++e) {
      for (std::size_t k = 0; k < h.elements[e].count; ++k) {
        for (const auto& p : h.elements[e].properties) {
          if (p.is_list) {
            need(type_size(p.count_type));
            const auto cnt = static_cast<std::size_t>(read_binary_scalar(&data[pos], p.count_type));
            pos += type_size(p.count_type);
            need(cnt * type_size(p.type));
            pos += cnt * type_size(p.type);
          } else {
            need(type_size(p.type));
            pos += type_size(p.type);
          }
        }
      }
    }
    std::size_t stride = 0;
    for (const auto& p : vertex.properties) stride += type_size(p.type);
    need(n * stride);
    for (std::size_t v = 0; v < n; ++v) {
      for (std::size_t k = 0; k < nprop; ++k) {
        values[v * nprop + k] = read_binary_scalar(&data[pos], vertex.properties[k].type);
        pos += type_size(vertex.properties[k].type);
      }
    }
  } else {
    std::size_t pos = h.data_offset;
    std::size_t line_no = h.data_line - 1;
    auto next_tokens = [&]() {
      while (pos < data.size()) {
        std::size_t end = data.find('\n', pos);
        if (end == std::string::npos) end = data.size();
        std::string_view line(&data[pos], end - pos);
        pos = end + 1;
        ++line_no;
        auto tok = split_ws(line);
        if (!tok.empty()) return tok;
      }
      throw ParseError("PLY data truncated at line " + std::to_string(line_no));
    };
    for (std::size_t e = 0; e < vertex_elem; ++e) {
      for (std::size_t k = 0; k < h.elements[e].count; ++k) next_tokens();
    }
    for (std::size_t v = 0; v < n; ++v) {
      auto tok = next_tokens();
      if (tok.size() < nprop) {
        throw ParseError("PLY data line " + std::to_string(line_no) + ": expected " +
                         std::to_string(nprop) + " values, found " + std::to_string(tok.size()));
      }
      for (std::size_t k = 0; k < nprop; ++k) {
        values[v * nprop + k] = parse_ascii_scalar(tok[k], vertex.properties[k].type, line_no);
      }
    }
  }

  PlyData out;
  out.cloud.points.resize(n);
  out.cloud.colors.resize(n);
  const double sr = color_scale(vertex.properties[lay.r].type);
  const double sg = color_scale(vertex.properties[lay.g].type);
  const double sb = color_scale(vertex.properties[lay.b].type);
  for (std::size_t v = 0; v < n; ++v) {
    const double* row = &values[v * nprop];
    Vec3 p(row[lay.x], row[lay.y], row[lay.z]);
    if (!p.allFinite()) {
      throw ValidationError("PLY vertex " + std::to_string(v) + " has a non-finite coordinate");
    }
    out.cloud.points[v] = p;
    out.cloud.colors[v] = Vec3(std::clamp(row[lay.r] * sr, 0.0, 1.0), std::clamp(row[lay.g] * sg, 0.0, 1.0),
                               std::clamp(row[lay.b] * sb, 0.0, 1.0));
  }
  if (lay.instance >= 0) {
    std::vector<int> labels(n);
    for (std::size_t v = 0; v < n; ++v) {
      labels[v] = static_cast<int>(values[v * nprop + static_cast<std::size_t>(lay.instance)]);
      if (labels[v] < -1) labels[v] = -1;
    }
    out.annotation = SceneAnnotation::from_labels(out.cloud, labels);
  }
  return out;
}

std::array<std::uint8_t, 3> instance_display_color(int id) {
  if (id < 0) return {128, 128, 128};
  // Golden-ratio hue walk, fixed saturation/value.
  const double hue = std::fmod(0.618033988749895 * static_cast<double>(id), 1.0) * 6.0;
  const int sector = static_cast<int>(hue) % 6;
  const double f = hue - std::floor(hue);
  const double v = 0.95, s = 0.75;
  const double p = v * (1 - s), q = v * (1 - s * f), t = v * (1 - s * (1 - f));
  double r = v, g = t, b = p;
  switch (sector) {
    case 0: r = v; g = t; b = p; break;
    case 1: r = q; g = v; b = p; break;
    case 2: r = p; g = v; b = t; break;
    case 3: r = p; g = q; b = v; break;
    case 4: r = t; g = p; b = v; break;
    default: r = v; g = p; b = q; break;
  }
  auto q8 = [](double x) { return static_cast<std::uint8_t>(std::lround(x * 255.0)); };
  return {q8(r), q8(g), q8(b)};
}

namespace {

std::uint8_t quantize_color(double c) {
  return static_cast<std::uint8_t>(std::lround(std::clamp(c, 0.0, 1.0) * 255.0));
}

template <typename T>
void put(std::string& buf, T v) {
  char bytes[sizeof(T)];
  std::memcpy(bytes, &v, sizeof(T));
  buf.append(bytes, sizeof(T));
}

void put_float_text(std::string& buf, float v) {
  char tmp[64];
  auto r = std::to_chars(tmp, tmp + sizeof(tmp), v);
  buf.append(tmp, r.ptr);
}

}  // namespace

void save_ply(const std::filesystem::path& path, const ColoredCloud& cloud,
              const SceneAnnotation* annotation, PlyEncoding encoding) {
  cloud.validate();
  std::vector<int> ids;
  if (annotation) {
    annotation->validate(cloud.size());
    ids = annotation->id_per_point();
  }
  const bool binary = encoding == PlyEncoding::BinaryLittleEndian;
  std::string buf;
  buf += "ply\n";
  buf += binary ? "format binary_little_endian 1.0\n" : "format ascii 1.0\n";
  buf += "comment fruitreid\n";
  buf += "element vertex " + std::to_string(cloud.size()) + "\n";
  buf += "property float x\nproperty float y\nproperty float z\n";
  buf += "property uchar red\nproperty uchar green\nproperty uchar blue\n";
  if (annotation) {
    buf += "property int instance_id\nproperty uchar semantic\n";
    buf += "property uchar instance_red\nproperty uchar instance_green\nproperty uchar instance_blue\n";
  }
  buf += "end_header\n";

  for (std::size_t i = 0; i < cloud.size(); ++i) {
    const auto& p = cloud.points[i];
    const auto& c = cloud.colors[i];
    const float xyz[3] = {static_cast<float>(p.x()), static_cast<float>(p.y()),
                          static_cast<float>(p.z())};
    const std::uint8_t rgb[3] = {quantize_color(c.x()), quantize_color(c.y()), quantize_color(c.z())};
    if (binary) {
      for (float f : xyz) put(buf, f);
      for (auto u : rgb) put(buf, u);
      if (annotation) {
        put(buf, static_cast<std::int32_t>(ids[i]));
        put(buf, static_cast<std::uint8_t>(annotation->per_point_semantic[i]));
        for (auto u : instance_display_color(ids[i])) put(buf, u);
      }
    } else {
      for (int a = 0; a < 3; ++a) {
        put_float_text(buf, xyz[a]);
        buf += ' ';
      }
      buf += std::to_string(rgb[0]) + ' ' + std::to_string(rgb[1]) + ' ' + std::to_string(rgb[2]);
      if (annotation) {
        buf += ' ' + std::to_string(ids[i]) + ' ' +
               std::to_string(static_cast<int>(annotation->per_point_semantic[i]));
        for (auto u : instance_display_color(ids[i])) buf += ' ' + std::to_string(u);
      }
      buf += '\n';
    }
  }

  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw IoError("cannot write '" + path.string() + "'");
  out.write(buf.data(), static_cast<std::streamsize>(buf.size()));
  if (!out) throw IoError("write failed for '" + path.string() + "'");
}

}  // namespace fruitreid
