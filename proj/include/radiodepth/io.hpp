#pragma once

#include <filesystem>
#include <string>
#include <vector>

#include <json.hpp>

#include "radiodepth/geometry.hpp"

namespace radiodepth {

/// Multi-channel float image file:
///   "DMAP\n" + one-line JSON header + "\n" + channels*width*height
///   little-endian float32 values, row-major, channel-major. NaN = invalid.
struct DmapFile {
  ImagingGeometry geometry;
  std::vector<int> object_ids;
  std::vector<DepthMap> channels;
};

nlohmann::json geometry_to_json(const ImagingGeometry& geom);
/// Throws ConfigError on missing or malformed fields.
ImagingGeometry geometry_from_json(const nlohmann::json& j);

void write_dmap(const std::filesystem::path& path, const DmapFile& file);
/// Throws ValidationError on bad magic, header, or truncated payload.
DmapFile read_dmap(const std::filesystem::path& path);

/// Depth-set views over a DMAP with 2K channels.
DmapFile to_dmap(const DepthMapSet& set);
DepthMapSet depth_set_from_dmap(const DmapFile& file);

/// ASCII PLY with float x, y, z and, when labelled, uchar object_id.
void write_ply(const std::filesystem::path& path, const PointCloud& cloud);
PointCloud read_ply(const std::filesystem::path& path);

/// Little-endian f64 blob helpers for model files.
void append_f64_le(std::string& out, const double* values, std::size_t count);
void read_f64_le(const std::string& in, std::size_t offset, double* values,
                 std::size_t count);

/// Whole-file helpers.
std::string read_file(const std::filesystem::path& path);
void write_file(const std::filesystem::path& path, const std::string& bytes);

}  // namespace radiodepth
