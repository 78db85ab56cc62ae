#include "radiodepth/io.hpp"

#include <algorithm>
#include <bit>
#include <cstring>
#include <fstream>
#include <iomanip>
#include <sstream>

namespace radiodepth {

using nlohmann::json;

namespace {

static_assert(std::endian::native == std::endian::little ||
                  std::endian::native == std::endian::big,
              "mixed-endian platforms are not supported");

template <typename T>
T to_little(T value) {
  if constexpr (std::endian::native == std::endian::big) {
    unsigned char bytes[sizeof(T)];
    std::memcpy(bytes, &value, sizeof(T));
    std::reverse(bytes, bytes + sizeof(T));
    std::memcpy(&value, bytes, sizeof(T));
  }
  return value;
}

json vec_json(const Vec3& v) { return json::array({v.x(), v.y(), v.z()}); }

Vec3 vec_from(const json& j, const char* key) {
  if (!j.contains(key) || !j.at(key).is_array() || j.at(key).size() != 3)
    throw ConfigError(std::string("geometry: field '") + key + "' must be a 3-vector");
  const auto& a = j.at(key);
  return {a[0].get<double>(), a[1].get<double>(), a[2].get<double>()};
}

}  // namespace

json geometry_to_json(const ImagingGeometry& g) {
  return json{{"source_position", vec_json(g.source_position)},
              {"detector_origin", vec_json(g.detector_origin)},
              {"detector_u_axis", vec_json(g.detector_u_axis)},
              {"detector_v_axis", vec_json(g.detector_v_axis)},
              {"pixel_spacing_u", g.pixel_spacing_u},
              {"pixel_spacing_v", g.pixel_spacing_v},
              {"width", g.width},
              {"height", g.height}};
}

ImagingGeometry geometry_from_json(const json& j) {
  try {
    ImagingGeometry g;
    g.source_position = vec_from(j, "source_position");
    g.detector_origin = vec_from(j, "detector_origin");
    g.detector_u_axis = vec_from(j, "detector_u_axis");
    g.detector_v_axis = vec_from(j, "detector_v_axis");
    g.pixel_spacing_u = j.at("pixel_spacing_u").get<double>();
    g.pixel_spacing_v = j.at("pixel_spacing_v").get<double>();
    g.width = j.at("width").get<int>();
    g.height = j.at("height").get<int>();
    g.validate();
    return g;
  } catch (const json::exception& e) {
    throw ConfigError(std::string("geometry: ") + e.what());
  } catch (const std::invalid_argument& e) {
    throw ConfigError(e.what());
  }
}

std::string read_file(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw ValidationError("cannot open " + path.string());
  std::ostringstream ss;
  ss << in.rdbuf();
  return ss.str();
}

void write_file(const std::filesystem::path& path, const std::string& bytes) {
  if (path.has_parent_path()) std::filesystem::create_directories(path.parent_path());
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw std::runtime_error("cannot write " + path.string());
  out.write(bytes.data(), static_cast<std::streamsize>(bytes.size()));
  if (!out) throw std::runtime_error("write failed for " + path.string());
}

void write_dmap(const std::filesystem::path& path, const DmapFile& file) {
  const auto& g = file.geometry;
  json header{{"version", 1},
              {"width", g.width},
              {"height", g.height},
              {"channels", file.channels.size()},
              {"geometry", geometry_to_json(g)},
              {"object_ids", file.object_ids}};
  std::string bytes = "DMAP\n" + header.dump() + "\n";
  const std::size_t plane = g.pixel_count();
  bytes.reserve(bytes.size() + file.channels.size() * plane * 4);
  for (const auto& ch : file.channels) {
    if (!ch.matches(g)) throw std::invalid_argument("write_dmap: channel size mismatch");
    for (double v : ch.values()) {
      const float f = to_little(static_cast<float>(v));
      char raw[4];
      std::memcpy(raw, &f, 4);
      bytes.append(raw, 4);
    }
  }
  write_file(path, bytes);
}

DmapFile read_dmap(const std::filesystem::path& path) {
  const std::string bytes = read_file(path);
  const std::string name = path.string();
  if (bytes.size() < 5 || bytes.compare(0, 5, "DMAP\n") != 0)
    throw ValidationError(name + ": bad magic (expected DMAP)");
  const std::size_t eol = bytes.find('\n', 5);
  if (eol == std::string::npos) throw ValidationError(name + ": unterminated header");
  DmapFile file;
  std::size_t channels = 0;
  try {
    const json header = json::parse(bytes.substr(5, eol - 5));
    if (header.at("version").get<int>() != 1)
      throw ValidationError(name + ": unsupported version");
    file.geometry = geometry_from_json(header.at("geometry"));
    if (header.at("width").get<int>() != file.geometry.width ||
        header.at("height").get<int>() != file.geometry.height)
      throw ValidationError(name + ": header size disagrees with geometry");
    channels = header.at("channels").get<std::size_t>();
    file.object_ids = header.at("object_ids").get<std::vector<int>>();
  } catch (const json::exception& e) {
    throw ValidationError(name + ": bad header: " + e.what());
  } catch (const ConfigError& e) {
    throw ValidationError(name + ": " + e.what());
  }
  const std::size_t plane = file.geometry.pixel_count();
  const std::size_t expected = eol + 1 + channels * plane * 4;
  if (bytes.size() != expected)
    throw ValidationError(name + ": payload size " + std::to_string(bytes.size()) +
                          " != expected " + std::to_string(expected));
  const char* cursor = bytes.data() + eol + 1;
  for (std::size_t c = 0; c < channels; ++c) {
    DepthMap ch(file.geometry.width, file.geometry.height);
    for (std::size_t i = 0; i < plane; ++i, cursor += 4) {
      float f;
      std::memcpy(&f, cursor, 4);
      ch[i] = static_cast<double>(to_little(f));
    }
    file.channels.push_back(std::move(ch));
  }
  return file;
}

DmapFile to_dmap(const DepthMapSet& set) {
  return {set.geometry, set.object_ids, set.maps};
}

DepthMapSet depth_set_from_dmap(const DmapFile& file) {
  if (file.channels.size() != 2 * file.object_ids.size())
    throw ValidationError("DMAP depth set needs 2 channels per object, got " +
                          std::to_string(file.channels.size()) + " for " +
                          std::to_string(file.object_ids.size()) + " objects");
  return {file.geometry, file.object_ids, file.channels};
}

void write_ply(const std::filesystem::path& path, const PointCloud& cloud) {
  const bool labelled = cloud.has_labels();
  std::ostringstream out;
  out << "ply\nformat ascii 1.0\nelement vertex " << cloud.size() << "\n"
      << "property float x\nproperty float y\nproperty float z\n";
  if (labelled) out << "property uchar object_id\n";
  out << "end_header\n";
  out << std::setprecision(9);
  for (std::size_t i = 0; i < cloud.size(); ++i) {
    const Vec3& p = cloud.points[i];
    out << static_cast<float>(p.x()) << ' ' << static_cast<float>(p.y()) << ' '
        << static_cast<float>(p.z());
    if (labelled) out << ' ' << cloud.object_ids[i];
    out << '\n';
  }
  write_file(path, out.str());
}

PointCloud read_ply(const std::filesystem::path& path) {
  std::istringstream in(read_file(path));
  const std::string name = path.string();
  std::string line;
  if (!std::getline(in, line) || line != "ply")
    throw ValidationError(name + ": bad magic (expected ply)");
  std::size_t count = 0;
  std::vector<std::string> props;
  bool ascii = false;
  while (std::getline(in, line)) {
    if (line == "end_header") break;
    std::istringstream ls(line);
    std::string word;
    ls >> word;
    if (word == "format") {
      std::string fmt;
      ls >> fmt;
      ascii = fmt == "ascii";
    } else if (word == "element") {
      std::string kind;
      ls >> kind >> count;
      if (kind != "vertex") throw ValidationError(name + ": unsupported element " + kind);
    } else if (word == "property") {
      std::string type, prop;
      ls >> type >> prop;
      props.push_back(prop);
    }
  }
  if (!ascii) throw ValidationError(name + ": only ASCII PLY is supported");
  if (props.size() < 3 || props[0] != "x" || props[1] != "y" || props[2] != "z")
    throw ValidationError(name + ": expected x, y, z properties");
  const bool labelled = props.size() > 3 && props[3] == "object_id";
  PointCloud cloud;
  cloud.points.reserve(count);
  for (std::size_t i = 0; i < count; ++i) {
    if (!std::getline(in, line)) throw ValidationError(name + ": truncated vertex list");
    std::istringstream ls(line);
    double x, y, z;
    if (!(ls >> x >> y >> z)) throw ValidationError(name + ": malformed vertex");
    const Vec3 p(x, y, z);
    if (!p.allFinite()) throw ValidationError(name + ": non-finite coordinate");
    cloud.points.push_back(p);
    if (labelled) {
      int id;
      if (!(ls >> id)) throw ValidationError(name + ": missing object_id");
      cloud.object_ids.push_back(id);
    }
  }
  return cloud;
}

void append_f64_le(std::string& out, const double* values, std::size_t count) {
  for (std::size_t i = 0; i < count; ++i) {
    const double v = to_little(values[i]);
    char raw[8];
    std::memcpy(raw, &v, 8);
    out.append(raw, 8);
  }
}

void read_f64_le(const std::string& in, std::size_t offset, double* values,
                 std::size_t count) {
  if (offset + count * 8 > in.size()) throw ValidationError("f64 blob truncated");
  for (std::size_t i = 0; i < count; ++i) {
    double v;
    std::memcpy(&v, in.data() + offset + 8 * i, 8);
    values[i] = to_little(v);
  }
}

}  // namespace radiodepth
