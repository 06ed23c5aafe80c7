#pragma once

#include <array>
#include <filesystem>
#include <iosfwd>
#include <utility>
#include <vector>

#include "p2mx/tensor.hpp"

namespace p2mx {

using Vec3 = std::array<double, 3>;
using Face = std::array<Index, 3>;
using Edge = std::pair<Index, Index>;

// Triangle mesh with derived edge set (sorted, a < b) and vertex adjacency.
class Mesh {
 public:
  Mesh() = default;
  // Throws on out-of-range or repeated face indices.
  Mesh(std::vector<Vec3> vertices, std::vector<Face> faces);

  const std::vector<Vec3>& vertices() const { return vertices_; }
  const std::vector<Face>& faces() const { return faces_; }
  const std::vector<Edge>& edges() const { return edges_; }
  const Adjacency& adjacency() const { return adjacency_; }

  std::size_t num_vertices() const { return vertices_.size(); }
  std::size_t num_faces() const { return faces_.size(); }
  std::size_t num_edges() const { return edges_.size(); }
  long euler_characteristic() const;

  // Same connectivity, new positions.
  Mesh with_vertices(std::vector<Vec3> vertices) const;

  template <typename Real>
  Tensor<Real> vertex_tensor() const;

 private:
  std::vector<Vec3> vertices_;
  std::vector<Face> faces_;
  std::vector<Edge> edges_;
  Adjacency adjacency_;
};

template <typename Real>
std::vector<Vec3> to_vec3(const Tensor<Real>& points);

// Unit icosphere: level 0 is the regular icosahedron, level k splits every
// edge of level k-1 at its midpoint and pushes the midpoint to the sphere.
Mesh icosahedron(int level);

Mesh ellipsoid(const Vec3& radii, int level);

struct Subdivision {
  Mesh mesh;
  // New vertex V + e sits at the midpoint of parent edge e (parent.edges()).
  std::vector<Edge> midpoint_edges;
};

// Midpoint subdivision without re-projection: V' = V + E, F' = 4F.
Subdivision subdivide_with_map(const Mesh& mesh);
Mesh subdivide(const Mesh& mesh);

inline constexpr std::size_t kFanNodes = 43;
inline constexpr std::size_t kFanEdges = 162;

struct HypothesisFan {
  Index center_index = 0;
  std::vector<Vec3> positions;  // center first, then the 42 hypotheses
  std::vector<Edge> local_edges;
  double scale = 0.0;
};

// Unit offsets (level-1 icosphere vertices) and the 43-node local graph
// shared by every fan: node 0 is the center, node i+1 is offset i.
struct FanTemplate {
  std::vector<Vec3> offsets;
  std::vector<Edge> edges;
  Adjacency graph;
};

const FanTemplate& fan_template();

HypothesisFan hypothesis_fan(const Mesh& mesh, Index vertex_index, double scale);

// Area-weighted vertex normals, unit length.
std::vector<Vec3> vertex_normals(const Mesh& mesh);

Mesh read_obj(std::istream& in);
void write_obj(const Mesh& mesh, std::ostream& out);
Mesh load_obj(const std::filesystem::path& path);
void save_obj(const Mesh& mesh, const std::filesystem::path& path);

// Small vector helpers.
inline Vec3 operator+(const Vec3& a, const Vec3& b) { return {a[0] + b[0], a[1] + b[1], a[2] + b[2]}; }
inline Vec3 operator-(const Vec3& a, const Vec3& b) { return {a[0] - b[0], a[1] - b[1], a[2] - b[2]}; }
inline Vec3 operator*(double s, const Vec3& a) { return {s * a[0], s * a[1], s * a[2]}; }
inline double dot(const Vec3& a, const Vec3& b) { return a[0] * b[0] + a[1] * b[1] + a[2] * b[2]; }
inline Vec3 cross(const Vec3& a, const Vec3& b) {
  return {a[1] * b[2] - a[2] * b[1], a[2] * b[0] - a[0] * b[2], a[0] * b[1] - a[1] * b[0]};
}
double norm(const Vec3& a);
Vec3 normalized(const Vec3& a);

}  // namespace p2mx
