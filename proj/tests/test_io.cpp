#include <gtest/gtest.h>

#include <cmath>
#include <filesystem>

#include "radiodepth/common.hpp"
#include "radiodepth/io.hpp"

using namespace radiodepth;
namespace fs = std::filesystem;

namespace {
fs::path tmp(const std::string& name) {
  const fs::path dir = fs::path(RADIODEPTH_TEST_TMP) / "io";
  fs::create_directories(dir);
  return dir / name;
}

DepthMapSet small_set() {
  DepthMapSet s;
  s.geometry = ImagingGeometry::centered(5, 3, 2.0, 900.0);
  s.object_ids = {1, 7};
  s.maps.assign(4, DepthMap(5, 3));
  s.front(0)[2] = 700.25f;
  s.back(0)[2] = 900.5f;
  s.front(1)[14] = 650.0f;
  s.back(1)[14] = 655.0f;
  return s;
}
}  // namespace

TEST(GeometryJson, RoundTrip) {
  const ImagingGeometry g = ImagingGeometry::centered(7, 9, 1.25, 1100.0);
  EXPECT_EQ(geometry_from_json(geometry_to_json(g)), g);
}

TEST(GeometryJson, MissingFieldIsConfigError) {
  nlohmann::json j = geometry_to_json(ImagingGeometry::standard());
  j.erase("width");
  EXPECT_THROW(geometry_from_json(j), ConfigError);
}

TEST(Dmap, RoundTripPreservesValuesAndNaN) {
  const DepthMapSet s = small_set();
  write_dmap(tmp("a.dmap"), to_dmap(s));
  const DepthMapSet r = depth_set_from_dmap(read_dmap(tmp("a.dmap")));
  EXPECT_EQ(r.geometry, s.geometry);
  EXPECT_EQ(r.object_ids, s.object_ids);
  ASSERT_EQ(r.maps.size(), 4u);
  for (std::size_t m = 0; m < 4; ++m)
    for (std::size_t i = 0; i < s.maps[m].size(); ++i) {
      ASSERT_EQ(r.maps[m].valid(i), s.maps[m].valid(i));
      if (s.maps[m].valid(i)) EXPECT_EQ(r.maps[m][i], s.maps[m][i]);
    }
}

TEST(Dmap, BadMagicIsValidationError) {
  write_dmap(tmp("b.dmap"), to_dmap(small_set()));
  std::string bytes = read_file(tmp("b.dmap"));
  bytes[0] = 'X';
  write_file(tmp("b.dmap"), bytes);
  EXPECT_THROW(read_dmap(tmp("b.dmap")), ValidationError);
}

TEST(Dmap, TruncatedPayloadIsValidationError) {
  write_dmap(tmp("c.dmap"), to_dmap(small_set()));
  std::string bytes = read_file(tmp("c.dmap"));
  bytes.resize(bytes.size() - 3);
  write_file(tmp("c.dmap"), bytes);
  EXPECT_THROW(read_dmap(tmp("c.dmap")), ValidationError);
}

TEST(Ply, RoundTripLabelled) {
  PointCloud c;
  c.points = {Vec3(1.5, -2.25, 800.125), Vec3(0, 0, 0)};
  c.object_ids = {3, 4};
  write_ply(tmp("a.ply"), c);
  const PointCloud r = read_ply(tmp("a.ply"));
  ASSERT_EQ(r.size(), 2u);
  EXPECT_EQ(r.object_ids, c.object_ids);
  for (std::size_t i = 0; i < 2; ++i) EXPECT_NEAR((r.points[i] - c.points[i]).norm(), 0.0, 1e-3);
}

TEST(Ply, RoundTripUnlabelled) {
  PointCloud c;
  c.points = {Vec3(1, 2, 3)};
  write_ply(tmp("b.ply"), c);
  const PointCloud r = read_ply(tmp("b.ply"));
  EXPECT_EQ(r.size(), 1u);
  EXPECT_FALSE(r.has_labels());
}

TEST(Ply, BadMagicIsValidationError) {
  write_file(tmp("bad.ply"), "plx\nformat ascii 1.0\nend_header\n");
  EXPECT_THROW(read_ply(tmp("bad.ply")), ValidationError);
}

TEST(F64Blob, RoundTrip) {
  const double v[3] = {1.0 / 3.0, -0.0, 1e300};
  std::string bytes = "hdr";
  append_f64_le(bytes, v, 3);
  double r[3];
  read_f64_le(bytes, 3, r, 3);
  for (int i = 0; i < 3; ++i) EXPECT_EQ(r[i], v[i]);
}
