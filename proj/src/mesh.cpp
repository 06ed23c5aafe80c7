#include "p2mx/mesh.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <iomanip>
#include <limits>
#include <map>
#include <sstream>
#include <string>

#include "p2mx/error.hpp"

namespace p2mx {

double norm(const Vec3& a) { return std::sqrt(dot(a, a)); }

Vec3 normalized(const Vec3& a) {
  const double n = norm(a);
  return (1.0 / n) * a;
}

Mesh::Mesh(std::vector<Vec3> vertices, std::vector<Face> faces)
    : vertices_(std::move(vertices)), faces_(std::move(faces)) {
  const std::size_t n = vertices_.size();
  for (std::size_t f = 0; f < faces_.size(); ++f) {
    const Face& face = faces_[f];
    for (const Index v : face)
      if (v >= n)
        fail(ErrorCode::kDomain, "mesh: face " + std::to_string(f) + " references vertex " +
                                     std::to_string(v) + " of " + std::to_string(n));
    if (face[0] == face[1] || face[1] == face[2] || face[0] == face[2])
      fail(ErrorCode::kDomain, "mesh: face " + std::to_string(f) + " repeats a vertex");
  }
  edges_.reserve(faces_.size() * 3);
  for (const Face& face : faces_)
    for (int k = 0; k < 3; ++k) {
      const Index a = face[k], b = face[(k + 1) % 3];
      edges_.emplace_back(std::min(a, b), std::max(a, b));
    }
  std::sort(edges_.begin(), edges_.end());
  edges_.erase(std::unique(edges_.begin(), edges_.end()), edges_.end());
  adjacency_ = Adjacency(n, edges_);
}

long Mesh::euler_characteristic() const {
  return static_cast<long>(num_vertices()) - static_cast<long>(num_edges()) +
         static_cast<long>(num_faces());
}

Mesh Mesh::with_vertices(std::vector<Vec3> vertices) const {
  if (vertices.size() != vertices_.size())
    fail(ErrorCode::kShape, "mesh: replacing " + std::to_string(vertices_.size()) +
                                " vertices with " + std::to_string(vertices.size()));
  Mesh out = *this;
  out.vertices_ = std::move(vertices);
  return out;
}

template <typename Real>
Tensor<Real> Mesh::vertex_tensor() const {
  std::vector<Real> data;
  data.reserve(vertices_.size() * 3);
  for (const Vec3& v : vertices_)
    for (const double c : v) data.push_back(static_cast<Real>(c));
  return Tensor<Real>({vertices_.size(), 3}, std::move(data));
}

template <typename Real>
std::vector<Vec3> to_vec3(const Tensor<Real>& points) {
  if (points.rank() != 2 || points.dim(1) != 3)
    fail(ErrorCode::kShape, "to_vec3: expected [N,3], got " + shape_str(points.shape()));
  auto d = points.data();
  std::vector<Vec3> out(points.dim(0));
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = {d[3 * i], d[3 * i + 1], d[3 * i + 2]};
  return out;
}

template Tensor<float> Mesh::vertex_tensor<float>() const;
template Tensor<double> Mesh::vertex_tensor<double>() const;
template std::vector<Vec3> to_vec3<float>(const Tensor<float>&);
template std::vector<Vec3> to_vec3<double>(const Tensor<double>&);

namespace {

Mesh regular_icosahedron() {
  const double phi = (1.0 + std::sqrt(5.0)) / 2.0;
  const double s = std::sqrt(1.0 + phi * phi);
  std::vector<Vec3> v = {
      {phi, 1, 0}, {-phi, 1, 0}, {phi, -1, 0}, {-phi, -1, 0},
      {1, 0, phi}, {1, 0, -phi}, {-1, 0, phi}, {-1, 0, -phi},
      {0, phi, 1}, {0, -phi, 1}, {0, phi, -1}, {0, -phi, -1},
  };
  for (auto& p : v) p = (1.0 / s) * p;

  // Edges join vertices at the minimal pairwise distance; faces are the
  // mutually adjacent triples, oriented outward.
  const double edge = 2.0 / s;
  auto adjacent = [&](std::size_t a, std::size_t b) {
    return std::abs(norm(v[a] - v[b]) - edge) < 1e-9;
  };
  std::vector<Face> faces;
  for (std::size_t a = 0; a < v.size(); ++a)
    for (std::size_t b = a + 1; b < v.size(); ++b)
      for (std::size_t c = b + 1; c < v.size(); ++c) {
        if (!adjacent(a, b) || !adjacent(b, c) || !adjacent(a, c)) continue;
        Face f{static_cast<Index>(a), static_cast<Index>(b), static_cast<Index>(c)};
        const Vec3 n = cross(v[b] - v[a], v[c] - v[a]);
        if (dot(n, v[a] + v[b] + v[c]) < 0) std::swap(f[1], f[2]);
        faces.push_back(f);
      }
  return Mesh(std::move(v), std::move(faces));
}

Subdivision split_edges(const Mesh& mesh, bool project_to_sphere) {
  const auto& edges = mesh.edges();
  std::map<Edge, Index> midpoint;
  std::vector<Vec3> vertices = mesh.vertices();
  vertices.reserve(mesh.num_vertices() + edges.size());
  for (const Edge& e : edges) {
    Vec3 m = 0.5 * (mesh.vertices()[e.first] + mesh.vertices()[e.second]);
    if (project_to_sphere) m = normalized(m);
    midpoint[e] = static_cast<Index>(vertices.size());
    vertices.push_back(m);
  }
  auto mid = [&](Index a, Index b) { return midpoint.at({std::min(a, b), std::max(a, b)}); };
  std::vector<Face> faces;
  faces.reserve(mesh.num_faces() * 4);
  for (const Face& f : mesh.faces()) {
    const Index ab = mid(f[0], f[1]), bc = mid(f[1], f[2]), ca = mid(f[2], f[0]);
    faces.push_back({f[0], ab, ca});
    faces.push_back({ab, f[1], bc});
    faces.push_back({ca, bc, f[2]});
    faces.push_back({ab, bc, ca});
  }
  return {Mesh(std::move(vertices), std::move(faces)), edges};
}

}  // namespace

Mesh icosahedron(int level) {
  if (level < 0 || level > 3)
    fail(ErrorCode::kDomain, "icosahedron: level " + std::to_string(level) + " not in [0, 3]");
  Mesh mesh = regular_icosahedron();
  for (int k = 0; k < level; ++k) mesh = split_edges(mesh, true).mesh;
  return mesh;
}

Mesh ellipsoid(const Vec3& radii, int level) {
  for (const double r : radii)
    if (!(r > 0.0)) fail(ErrorCode::kDomain, "ellipsoid: radii must be positive");
  Mesh sphere = icosahedron(level);
  std::vector<Vec3> v = sphere.vertices();
  for (auto& p : v)
    for (int k = 0; k < 3; ++k) p[k] *= radii[k];
  return sphere.with_vertices(std::move(v));
}

Subdivision subdivide_with_map(const Mesh& mesh) { return split_edges(mesh, false); }

Mesh subdivide(const Mesh& mesh) { return split_edges(mesh, false).mesh; }

const FanTemplate& fan_template() {
  static const FanTemplate tmpl = [] {
    const Mesh shell = icosahedron(1);
    FanTemplate t;
    t.offsets = shell.vertices();
    for (const auto& [a, b] : shell.edges()) t.edges.emplace_back(a + 1, b + 1);
    for (Index i = 0; i < shell.num_vertices(); ++i) t.edges.emplace_back(0, i + 1);
    t.graph = Adjacency(kFanNodes, t.edges);
    return t;
  }();
  return tmpl;
}

HypothesisFan hypothesis_fan(const Mesh& mesh, Index vertex_index, double scale) {
  if (vertex_index >= mesh.num_vertices())
    fail(ErrorCode::kDomain, "hypothesis_fan: vertex " + std::to_string(vertex_index) +
                                 " out of range for " + std::to_string(mesh.num_vertices()));
  if (!(scale > 0.0)) fail(ErrorCode::kDomain, "hypothesis_fan: scale must be positive");
  const FanTemplate& t = fan_template();
  HypothesisFan fan;
  fan.center_index = vertex_index;
  fan.scale = scale;
  const Vec3& c = mesh.vertices()[vertex_index];
  fan.positions.push_back(c);
  for (const Vec3& u : t.offsets) fan.positions.push_back(c + scale * u);
  fan.local_edges = t.edges;
  return fan;
}

std::vector<Vec3> vertex_normals(const Mesh& mesh) {
  const auto& v = mesh.vertices();
  std::vector<Vec3> sum(v.size(), Vec3{0, 0, 0});
  std::vector<Vec3> fallback(v.size(), Vec3{0, 0, 0});
  for (const Face& f : mesh.faces()) {
    // |cross| is twice the face area, so summing raw crosses area-weights.
    const Vec3 n = cross(v[f[1]] - v[f[0]], v[f[2]] - v[f[0]]);
    const bool degenerate = norm(n) <= 1e-300;
    for (const Index i : f) {
      sum[i] = sum[i] + n;
      if (!degenerate && norm(fallback[i]) == 0.0) fallback[i] = normalized(n);
    }
  }
  std::vector<Vec3> out(v.size());
  for (std::size_t i = 0; i < v.size(); ++i) {
    if (norm(sum[i]) > 1e-300) {
      out[i] = normalized(sum[i]);
    } else if (norm(fallback[i]) > 0.0) {
      out[i] = fallback[i];
    } else {
      fail(ErrorCode::kDomain, "vertex_normals: vertex " + std::to_string(i) +
                                   " has no nondegenerate incident face");
    }
  }
  return out;
}

// ---- OBJ ----------------------------------------------------------------------

namespace {

[[noreturn]] void obj_error(std::size_t line, const std::string& what) {
  fail(ErrorCode::kFormat, "obj line " + std::to_string(line) + ": " + what);
}

}  // namespace

Mesh read_obj(std::istream& in) {
  std::vector<Vec3> vertices;
  std::vector<std::pair<std::size_t, std::vector<long>>> polygons;
  std::string line;
  std::size_t line_no = 0;
  while (std::getline(in, line)) {
    ++line_no;
    if (const auto hash = line.find('#'); hash != std::string::npos) line.resize(hash);
    std::istringstream ss(line);
    std::string tag;
    if (!(ss >> tag)) continue;
    if (tag == "v") {
      Vec3 p;
      if (!(ss >> p[0] >> p[1] >> p[2])) obj_error(line_no, "expected 'v x y z'");
      vertices.push_back(p);
    } else if (tag == "f") {
      std::vector<long> idx;
      std::string token;
      while (ss >> token) {
        const std::string head = token.substr(0, token.find('/'));
        std::size_t used = 0;
        long value = 0;
        try {
          value = std::stol(head, &used);
        } catch (const std::exception&) {
          obj_error(line_no, "bad face index '" + token + "'");
        }
        if (used != head.size() || value == 0) obj_error(line_no, "bad face index '" + token + "'");
        idx.push_back(value);
      }
      if (idx.size() < 3) obj_error(line_no, "face needs at least 3 vertices");
      polygons.emplace_back(line_no, std::move(idx));
    }
  }
  std::vector<Face> faces;
  const long n = static_cast<long>(vertices.size());
  for (const auto& [at, idx] : polygons) {
    std::vector<Index> resolved;
    for (const long raw : idx) {
      const long i = raw > 0 ? raw - 1 : n + raw;
      if (i < 0 || i >= n)
        obj_error(at, "face index " + std::to_string(raw) + " out of range for " +
                          std::to_string(n) + " vertices");
      resolved.push_back(static_cast<Index>(i));
    }
    for (std::size_t k = 1; k + 1 < resolved.size(); ++k)
      faces.push_back({resolved[0], resolved[k], resolved[k + 1]});
  }
  try {
    return Mesh(std::move(vertices), std::move(faces));
  } catch (const Error& e) {
    fail(ErrorCode::kFormat, std::string("obj: ") + e.what());
  }
}

void write_obj(const Mesh& mesh, std::ostream& out) {
  out << std::setprecision(std::numeric_limits<double>::max_digits10);
  for (const Vec3& v : mesh.vertices()) out << "v " << v[0] << ' ' << v[1] << ' ' << v[2] << '\n';
  for (const Face& f : mesh.faces())
    out << "f " << f[0] + 1 << ' ' << f[1] + 1 << ' ' << f[2] + 1 << '\n';
}

Mesh load_obj(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) fail(ErrorCode::kIo, "cannot open " + path.string());
  return read_obj(in);
}

void save_obj(const Mesh& mesh, const std::filesystem::path& path) {
  std::ofstream out(path);
  if (!out) fail(ErrorCode::kIo, "cannot write " + path.string());
  write_obj(mesh, out);
  if (!out) fail(ErrorCode::kIo, "failed writing " + path.string());
}

}  // namespace p2mx
