#include <gtest/gtest.h>

#include <algorithm>
#include <cmath>
#include <numbers>
#include <set>
#include <sstream>

#include "p2mx/mesh.hpp"
#include "support/support.hpp"

using namespace p2mx;
using p2mx::testing::code_of;

TEST(Icosahedron, CountsFollowSubdivisionFormula) {
  for (int k = 0; k <= 3; ++k) {
    const Mesh m = icosahedron(k);
    const std::size_t p = std::size_t{1} << (2 * k);
    EXPECT_EQ(m.num_vertices(), 10 * p + 2) << "level " << k;
    EXPECT_EQ(m.num_edges(), 30 * p) << "level " << k;
    EXPECT_EQ(m.num_faces(), 20 * p) << "level " << k;
    EXPECT_EQ(m.euler_characteristic(), 2);
    for (const auto& v : m.vertices()) EXPECT_NEAR(norm(v), 1.0, 1e-12);
  }
}

TEST(Icosahedron, LevelOneMatchesHypothesisCount) {
  const Mesh m = icosahedron(1);
  EXPECT_EQ(m.num_vertices(), 42u);
  EXPECT_EQ(m.num_edges(), 120u);
  EXPECT_EQ(m.num_faces(), 80u);
}

TEST(Icosahedron, FirstVertexIsNormalisedGoldenRatioPoint) {
  const double phi = std::numbers::phi;
  const double s = std::sqrt(1.0 + phi * phi);
  const Vec3 v = icosahedron(0).vertices()[0];
  EXPECT_NEAR(v[0], phi / s, 1e-12);
  EXPECT_NEAR(v[1], 1.0 / s, 1e-12);
  EXPECT_NEAR(v[2], 0.0, 1e-12);
  EXPECT_NEAR(v[0], 0.850651, 1e-6);
  EXPECT_NEAR(v[1], 0.525731, 1e-6);
}

TEST(Icosahedron, OutwardFaceOrientation) {
  const Mesh m = icosahedron(2);
  for (const Face& f : m.faces()) {
    const auto& v = m.vertices();
    const Vec3 n = cross(v[f[1]] - v[f[0]], v[f[2]] - v[f[0]]);
    EXPECT_GT(dot(n, v[f[0]]), 0.0);
  }
}

TEST(Icosahedron, LevelOutOfRange) {
  EXPECT_EQ(code_of([] { (void)icosahedron(4); }), ErrorCode::kDomain);
  EXPECT_EQ(code_of([] { (void)icosahedron(-1); }), ErrorCode::kDomain);
}

TEST(Ellipsoid, AxisScaling) {
  const Mesh unit = ellipsoid({1, 1, 1}, 1);
  EXPECT_EQ(unit.num_vertices(), 42u);
  const Mesh e = ellipsoid({1, 2, 3}, 2);
  double max_y = 0.0;
  for (const auto& v : e.vertices()) max_y = std::max(max_y, std::abs(v[1]));
  EXPECT_NEAR(max_y, 2.0, 1e-9);
  for (int k = 0; k <= 3; ++k) EXPECT_EQ(ellipsoid({0.3, 0.2, 0.1}, k).euler_characteristic(), 2);
  EXPECT_EQ(code_of([] { (void)ellipsoid({1, 0, 1}, 1); }), ErrorCode::kDomain);
}

TEST(Subdivide, CountsAndMidpoints) {
  const Mesh base = icosahedron(0);
  const Subdivision sub = subdivide_with_map(base);
  EXPECT_EQ(sub.mesh.num_vertices(), 42u);
  EXPECT_EQ(sub.mesh.num_faces(), 80u);
  EXPECT_EQ(sub.mesh.euler_characteristic(), 2);
  ASSERT_EQ(sub.midpoint_edges.size(), base.num_edges());
  for (std::size_t e = 0; e < base.num_edges(); ++e) {
    const auto [a, b] = sub.midpoint_edges[e];
    const Vec3 mid = 0.5 * (base.vertices()[a] + base.vertices()[b]);
    const Vec3 got = sub.mesh.vertices()[base.num_vertices() + e];
    EXPECT_NEAR(norm(mid - got), 0.0, 1e-15);
  }
  const Mesh twice = subdivide(sub.mesh);
  EXPECT_EQ(twice.num_vertices(), 162u);
  EXPECT_EQ(twice.euler_characteristic(), 2);
}

TEST(Subdivide, GrowthFromLevelTwo) {
  const Mesh a = icosahedron(2);
  EXPECT_EQ(a.num_vertices(), 162u);
  const Mesh b = subdivide(a);
  EXPECT_EQ(b.num_vertices(), 642u);
  EXPECT_EQ(subdivide(b).num_vertices(), 2562u);
}

TEST(HypothesisFan, CountsAndGeometry) {
  const Mesh m = ellipsoid({0.3, 0.2, 0.1}, 2);
  const HypothesisFan fan = hypothesis_fan(m, 17, 0.02);
  ASSERT_EQ(fan.positions.size(), kFanNodes);
  EXPECT_EQ(fan.local_edges.size(), kFanEdges);
  EXPECT_EQ(kFanNodes, 43u);
  EXPECT_EQ(kFanEdges, 162u);
  const Vec3 c = m.vertices()[17];
  EXPECT_EQ(fan.positions[0], c);
  Vec3 centroid{0, 0, 0};
  for (std::size_t i = 1; i < kFanNodes; ++i) {
    EXPECT_NEAR(norm(fan.positions[i] - c), 0.02, 1e-12);
    centroid = centroid + (1.0 / 42.0) * fan.positions[i];
  }
  EXPECT_NEAR(norm(centroid - c), 0.0, 1e-9);
}

TEST(HypothesisFan, EdgeStructure) {
  const FanTemplate& t = fan_template();
  std::size_t spokes = 0;
  std::set<Edge> unique;
  for (const auto& [a, b] : t.edges) {
    ASSERT_LT(a, kFanNodes);
    ASSERT_LT(b, kFanNodes);
    ASSERT_NE(a, b);
    unique.insert({std::min(a, b), std::max(a, b)});
    if (a == 0 || b == 0) ++spokes;
  }
  EXPECT_EQ(unique.size(), kFanEdges);
  EXPECT_EQ(spokes, 42u);
  EXPECT_EQ(t.graph.degree(0), 42u);
  for (std::size_t i = 1; i < kFanNodes; ++i) {
    // Level-1 icosphere vertices have degree 5 or 6, plus the spoke.
    EXPECT_GE(t.graph.degree(i), 6u);
    EXPECT_LE(t.graph.degree(i), 7u);
  }
}

TEST(HypothesisFan, IndependentOfFaceOrder) {
  const Mesh m = icosahedron(1);
  std::vector<Face> faces = m.faces();
  std::reverse(faces.begin(), faces.end());
  const Mesh shuffled(m.vertices(), faces);
  EXPECT_EQ(hypothesis_fan(m, 5, 0.03).positions, hypothesis_fan(shuffled, 5, 0.03).positions);
}

TEST(HypothesisFan, InvalidArguments) {
  const Mesh m = icosahedron(0);
  EXPECT_EQ(code_of([&] { (void)hypothesis_fan(m, 12, 0.02); }), ErrorCode::kDomain);
  EXPECT_EQ(code_of([&] { (void)hypothesis_fan(m, 0, 0.0); }), ErrorCode::kDomain);
}

TEST(VertexNormals, SphereAndPlane) {
  const Mesh sphere = icosahedron(2);
  const auto n = vertex_normals(sphere);
  for (std::size_t i = 0; i < n.size(); ++i) {
    EXPECT_GT(dot(n[i], sphere.vertices()[i]), 0.99);
    EXPECT_NEAR(norm(n[i]), 1.0, 1e-9);
  }
  const Mesh fan({{0, 0, 0}, {1, 0, 0}, {0, 1, 0}, {-1, 0, 0}, {0, -1, 0}},
                 {{0, 1, 2}, {0, 2, 3}, {0, 3, 4}, {0, 4, 1}});
  for (const auto& v : vertex_normals(fan)) {
    EXPECT_NEAR(std::abs(v[2]), 1.0, 1e-12);
    EXPECT_NEAR(v[0], 0.0, 1e-12);
    EXPECT_NEAR(v[1], 0.0, 1e-12);
  }
}

TEST(VertexNormals, AllDegenerateStarIsAnError) {
  const Mesh flat({{0, 0, 0}, {0, 0, 0}, {0, 0, 0}}, {{0, 1, 2}});
  EXPECT_EQ(code_of([&] { (void)vertex_normals(flat); }), ErrorCode::kDomain);
}

TEST(Mesh, RejectsBadFaces) {
  EXPECT_EQ(code_of([] { (void)Mesh({{0, 0, 0}, {1, 0, 0}}, {{0, 1, 2}}); }), ErrorCode::kDomain);
  EXPECT_EQ(code_of([] { (void)Mesh({{0, 0, 0}, {1, 0, 0}, {0, 1, 0}}, {{0, 1, 1}}); }), ErrorCode::kDomain);
}

TEST(Obj, RoundTripOfIcosphere) {
  const Mesh m = icosahedron(1);
  std::stringstream buffer;
  write_obj(m, buffer);
  const Mesh back = read_obj(buffer);
  EXPECT_EQ(back.faces(), m.faces());
  EXPECT_EQ(back.edges(), m.edges());
  ASSERT_EQ(back.num_vertices(), m.num_vertices());
  for (std::size_t i = 0; i < m.num_vertices(); ++i) EXPECT_LT(norm(back.vertices()[i] - m.vertices()[i]), 1e-6);
}

TEST(Obj, FileRoundTripAndMissingFile) {
  const auto dir = p2mx::testing::scratch_dir("mesh_obj");
  const Mesh m = ellipsoid({0.5, 0.25, 0.125}, 2);
  save_obj(m, dir / "m.obj");
  const Mesh back = load_obj(dir / "m.obj");
  EXPECT_EQ(back.faces(), m.faces());
  for (std::size_t i = 0; i < m.num_vertices(); ++i) EXPECT_LT(norm(back.vertices()[i] - m.vertices()[i]), 1e-6);
  EXPECT_EQ(code_of([&] { (void)load_obj(dir / "absent.obj"); }), ErrorCode::kIo);
}

TEST(Obj, QuadIsFanTriangulatedAndOtherLinesIgnored) {
  std::istringstream in(
      "# comment\nmtllib x.mtl\no thing\nv 0 0 0\nv 1 0 0\nv 1 1 0\nv 0 1 0\nvn 0 0 1\nvt 0 0\n"
      "f 1/1/1 2/1/1 3/1/1 4/1/1\n");
  const Mesh m = read_obj(in);
  ASSERT_EQ(m.num_faces(), 2u);
  EXPECT_EQ(m.faces()[0], (Face{0, 1, 2}));
  EXPECT_EQ(m.faces()[1], (Face{0, 2, 3}));
}

TEST(Obj, ErrorsCarryLineNumbers) {
  std::string base;
  for (const auto& v : icosahedron(0).vertices())
    base += "v " + std::to_string(v[0]) + " " + std::to_string(v[1]) + " " + std::to_string(v[2]) + "\n";
  for (const std::string bad : {base + "f 1 2 99\n", base + "v 1 two 3\n", base + "f 1 2\n"}) {
    std::istringstream in(bad);
    try {
      (void)read_obj(in);
      ADD_FAILURE() << "accepted: " << bad.substr(base.size());
    } catch (const Error& e) {
      EXPECT_EQ(e.code(), ErrorCode::kFormat);
      EXPECT_NE(std::string(e.what()).find("line 13"), std::string::npos) << e.what();
    }
  }
}
