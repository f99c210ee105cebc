#include <catch2/catch_amalgamated.hpp>

#include <cstdio>
#include <filesystem>
#include <fstream>
#include <sstream>

#include "apnet/cloud.hpp"
#include "apnet/cloud_io.hpp"
#include "apnet/common.hpp"

using namespace apnet;

namespace {

LabeledPointCloud random_cloud(Rng& rng, std::size_t n, bool labels, int class_count = 5) {
  LabeledPointCloud c;
  c.class_count = class_count;
  if (labels) c.labels.emplace();
  for (std::size_t i = 0; i < n; ++i) {
    c.positions.push_back({rng.uniform(-20, 20), rng.uniform(-20, 20), rng.uniform(-2, 8)});
    c.colors.push_back({rng.uniform(), rng.uniform(), rng.uniform()});
    if (labels) c.labels->push_back(int(rng.uniform_index(std::uint64_t(class_count))));
  }
  return c;
}

// independent oracle: linear scan with the same half-open predicate
std::vector<std::size_t> crop_oracle(const LabeledPointCloud& c, const BoundingRegion& r) {
  std::vector<std::size_t> kept;
  for (std::size_t i = 0; i < c.size(); ++i) {
    const auto& p = c.positions[i];
    if (p.x >= r.min_x && p.x < r.max_x && p.y >= r.min_y && p.y < r.max_y) kept.push_back(i);
  }
  return kept;
}

std::string temp_path(const std::string& name) {
  return (std::filesystem::temp_directory_path() / name).string();
}

}  // namespace

TEST_CASE("xyzrgbl parses a labelled 3-point file") {
  std::istringstream in(
      "xyzrgbl 3 3 1\n"
      "# a comment\n"
      "0 0 0 0.1 0.2 0.3 0\n"
      "1 2 3 0.4 0.5 0.6 1\n"
      "-1 -2 0.5 0.7 0.8 0.9 2\n");
  const LabeledPointCloud c = read_cloud_xyzrgbl(in);
  REQUIRE(c.size() == 3);
  REQUIRE(c.class_count == 3);
  REQUIRE(c.has_labels());
  REQUIRE((*c.labels)[2] == 2);
  REQUIRE(c.positions[1].z == 3.0);
}

TEST_CASE("xyzrgbl accepts an empty body") {
  std::istringstream in("xyzrgbl 0 13 1\n");
  const LabeledPointCloud c = read_cloud_xyzrgbl(in);
  REQUIRE(c.size() == 0);
  REQUIRE(c.has_labels());
}

TEST_CASE("xyzrgbl rejects an out-of-range label naming the line") {
  std::istringstream in(
      "xyzrgbl 1 13 1\n"
      "0 0 0 0.5 0.5 0.5 13\n");
  try {
    read_cloud_xyzrgbl(in);
    FAIL("expected error");
  } catch (const Error& e) {
    const std::string msg = e.what();
    REQUIRE(msg.find("label 13") != std::string::npos);
    REQUIRE(msg.find("line 2") != std::string::npos);
  }
}

TEST_CASE("xyzrgbl rejects non-finite coordinates and malformed rows") {
  std::istringstream bad_coord(
      "xyzrgbl 1 2 0\n"
      "nan 0 0 0.5 0.5 0.5\n");
  REQUIRE_THROWS_AS(read_cloud_xyzrgbl(bad_coord), Error);

  std::istringstream short_row(
      "xyzrgbl 1 2 0\n"
      "0 0 0 0.5 0.5\n");
  REQUIRE_THROWS_AS(read_cloud_xyzrgbl(short_row), Error);

  std::istringstream count_mismatch(
      "xyzrgbl 2 2 0\n"
      "0 0 0 0.5 0.5 0.5\n");
  REQUIRE_THROWS_AS(read_cloud_xyzrgbl(count_mismatch), Error);
}

TEST_CASE("crop keeps contained points and drops the rest") {
  Rng rng(7);
  LabeledPointCloud c = random_cloud(rng, 10, true);
  const BoundingRegion all(-100, -100, 100, 100);
  const LabeledPointCloud same = crop(c, all);
  REQUIRE(same.size() == c.size());
  REQUIRE(same.positions[3].x == c.positions[3].x);

  const BoundingRegion none(1000, 1000, 1001, 1001);
  REQUIRE(crop(c, none).size() == 0);
}

TEST_CASE("crop matches the linear-scan oracle and preserves order") {
  Rng rng(42);
  for (int trial = 0; trial < 50; ++trial) {
    LabeledPointCloud c = random_cloud(rng, 10, trial % 2 == 0);
    const BoundingRegion r(rng.uniform(-15, 0), rng.uniform(-15, 0), rng.uniform(0, 15),
                           rng.uniform(0, 15));
    const auto kept = crop_oracle(c, r);
    const LabeledPointCloud out = crop(c, r);
    REQUIRE(out.size() == kept.size());
    for (std::size_t i = 0; i < kept.size(); ++i) {
      REQUIRE(out.positions[i].x == c.positions[kept[i]].x);
      REQUIRE(out.positions[i].y == c.positions[kept[i]].y);
      REQUIRE(out.colors[i].g == c.colors[kept[i]].g);
      if (c.has_labels()) REQUIRE((*out.labels)[i] == (*c.labels)[kept[i]]);
    }
  }
}

TEST_CASE("crop is idempotent and identity on the cloud's own bounding region") {
  Rng rng(5);
  for (int trial = 0; trial < 30; ++trial) {
    LabeledPointCloud c = random_cloud(rng, 40, true);
    const BoundingRegion r(-5, -5, 5, 5);
    const LabeledPointCloud once = crop(c, r);
    const LabeledPointCloud twice = crop(once, r);
    REQUIRE(once.size() == twice.size());
    for (std::size_t i = 0; i < once.size(); ++i)
      REQUIRE(once.positions[i].x == twice.positions[i].x);

    const LabeledPointCloud self = crop(c, bounding_region(c));
    REQUIRE(self.size() == c.size());
  }
}

TEST_CASE("xyzrgbl write/read round-trips bit-exactly") {
  Rng rng(11);
  for (int trial = 0; trial < 100; ++trial) {
    const LabeledPointCloud c = random_cloud(rng, rng.uniform_index(30), trial % 2 == 0);
    std::ostringstream out;
    write_cloud_xyzrgbl(c, out);
    std::istringstream in(out.str());
    const LabeledPointCloud back = read_cloud_xyzrgbl(in);
    REQUIRE(back.size() == c.size());
    REQUIRE(back.has_labels() == c.has_labels());
    REQUIRE(back.class_count == c.class_count);
    for (std::size_t i = 0; i < c.size(); ++i) {
      REQUIRE(back.positions[i].x == c.positions[i].x);
      REQUIRE(back.positions[i].y == c.positions[i].y);
      REQUIRE(back.positions[i].z == c.positions[i].z);
      REQUIRE(back.colors[i].r == c.colors[i].r);
      REQUIRE(back.colors[i].b == c.colors[i].b);
      if (c.has_labels()) REQUIRE((*back.labels)[i] == (*c.labels)[i]);
    }
  }
}

TEST_CASE("unlabelled clouds omit the label column") {
  Rng rng(3);
  const LabeledPointCloud c = random_cloud(rng, 4, false);
  std::ostringstream out;
  write_cloud_xyzrgbl(c, out);
  const std::string text = out.str();
  REQUIRE(text.substr(0, text.find('\n')) == "xyzrgbl 4 5 0");
  std::istringstream in(text);
  REQUIRE_FALSE(read_cloud_xyzrgbl(in).has_labels());
}

TEST_CASE("write_cloud/read_cloud work through files") {
  Rng rng(9);
  const LabeledPointCloud c = random_cloud(rng, 5, true);
  const std::string path = temp_path("apnet_roundtrip.xyzrgbl");
  write_cloud(c, path, CloudFormat::XyzrgblText);
  const LabeledPointCloud back = read_cloud(path, CloudFormat::XyzrgblText);
  REQUIRE(back.size() == 5);
  for (std::size_t i = 0; i < 5; ++i) REQUIRE(back.positions[i].z == c.positions[i].z);
  std::remove(path.c_str());

  REQUIRE_THROWS_AS(read_cloud("/nonexistent/apnet.xyzrgbl", CloudFormat::XyzrgblText), Error);
  REQUIRE_THROWS_AS(write_cloud(c, path, CloudFormat::Ply), Error);
}

TEST_CASE("ply ascii reader handles colors and labels") {
  std::istringstream in(
      "ply\n"
      "format ascii 1.0\n"
      "comment synthetic\n"
      "element vertex 2\n"
      "property float x\n"
      "property float y\n"
      "property float z\n"
      "property uchar red\n"
      "property uchar green\n"
      "property uchar blue\n"
      "property int label\n"
      "end_header\n"
      "0 0 0 255 0 0 0\n"
      "1 1 1 0 255 0 4\n");
  const LabeledPointCloud c = read_cloud_ply(in);
  REQUIRE(c.size() == 2);
  REQUIRE(c.colors[0].r == Catch::Approx(1.0));
  REQUIRE(c.colors[1].g == Catch::Approx(1.0));
  REQUIRE(c.class_count == 5);
  REQUIRE((*c.labels)[1] == 4);
}

TEST_CASE("ply binary-little-endian reader decodes packed vertices") {
  std::ostringstream out(std::ios::binary);
  out << "ply\n"
         "format binary_little_endian 1.0\n"
         "element vertex 2\n"
         "property float x\n"
         "property float y\n"
         "property float z\n"
         "property uchar red\n"
         "property uchar green\n"
         "property uchar blue\n"
         "end_header\n";
  auto put_f = [&](float v) { out.write(reinterpret_cast<const char*>(&v), 4); };
  auto put_b = [&](unsigned char v) { out.write(reinterpret_cast<const char*>(&v), 1); };
  put_f(1.5f); put_f(-2.0f); put_f(0.25f); put_b(255); put_b(128); put_b(0);
  put_f(0.0f); put_f(3.5f); put_f(1.0f); put_b(0); put_b(0); put_b(255);

  std::istringstream in(out.str(), std::ios::binary);
  const LabeledPointCloud c = read_cloud_ply(in);
  REQUIRE(c.size() == 2);
  REQUIRE(c.positions[0].x == Catch::Approx(1.5));
  REQUIRE(c.positions[1].y == Catch::Approx(3.5));
  REQUIRE(c.colors[0].r == Catch::Approx(1.0));
  REQUIRE_FALSE(c.has_labels());
}

TEST_CASE("ply reader rejects non-vertex elements and list properties") {
  std::istringstream face(
      "ply\nformat ascii 1.0\nelement face 1\nproperty float x\nend_header\n");
  REQUIRE_THROWS_AS(read_cloud_ply(face), Error);

  std::istringstream list(
      "ply\nformat ascii 1.0\nelement vertex 1\nproperty list uchar int vertex_indices\n"
      "end_header\n");
  REQUIRE_THROWS_AS(read_cloud_ply(list), Error);

  std::istringstream truncated(
      "ply\nformat ascii 1.0\nelement vertex 2\nproperty float x\nproperty float y\n"
      "property float z\nproperty uchar red\nproperty uchar green\nproperty uchar blue\n"
      "end_header\n0 0 0 1 2 3\n");
  REQUIRE_THROWS_AS(read_cloud_ply(truncated), Error);
}

TEST_CASE("cloud invariants are enforced") {
  LabeledPointCloud c;
  c.positions.push_back({0, 0, 0});
  REQUIRE_THROWS_AS(c.validate(), Error);  // colors shorter than positions

  c.colors.push_back({0, 0, 0});
  c.labels.emplace();
  c.labels->push_back(2);
  c.class_count = 2;
  REQUIRE_THROWS_AS(c.validate(), Error);  // label out of range

  (*c.labels)[0] = 1;
  REQUIRE_NOTHROW(c.validate());

  REQUIRE_THROWS_AS(BoundingRegion(1, 0, 0, 1), Error);
}
