#include "p2mx/losses.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>

#include "p2mx/error.hpp"

namespace p2mx {

void PointCloud::validate() const {
  if (points.empty()) fail(ErrorCode::kDomain, "point cloud is empty");
  if (!normals.empty() && normals.size() != points.size())
    fail(ErrorCode::kShape, "point cloud has " + std::to_string(normals.size()) + " normals for " +
                                std::to_string(points.size()) + " points");
  for (const Vec3& p : points)
    for (const double c : p)
      if (!std::isfinite(c)) fail(ErrorCode::kNumeric, "point cloud has non-finite coordinates");
}

Vec3 sample_triangle(const Vec3& v1, const Vec3& v2, const Vec3& v3, double r1, double r2) {
  if (!(r1 >= 0.0 && r1 <= 1.0 && r2 >= 0.0 && r2 <= 1.0))
    fail(ErrorCode::kDomain, "sample_triangle: r1, r2 must lie in [0, 1]");
  const double s = std::sqrt(r1);
  return (1.0 - s) * v1 + (s * (1.0 - r2)) * v2 + (s * r2) * v3;
}

std::vector<std::size_t> allocate_counts(std::span<const double> weights, std::size_t n) {
  const double total = std::accumulate(weights.begin(), weights.end(), 0.0);
  if (!(total > 0.0)) fail(ErrorCode::kDomain, "allocate_counts: total weight must be positive");
  std::vector<std::size_t> counts(weights.size());
  std::vector<double> remainder(weights.size());
  std::size_t assigned = 0;
  for (std::size_t i = 0; i < weights.size(); ++i) {
    const double quota = double(n) * weights[i] / total;
    counts[i] = static_cast<std::size_t>(std::floor(quota));
    remainder[i] = quota - double(counts[i]);
    assigned += counts[i];
  }
  // Rounding in the quotas can over-assign by one in pathological cases.
  while (assigned > n) {
    auto it = std::max_element(counts.begin(), counts.end());
    --*it;
    --assigned;
  }
  std::vector<std::size_t> order(weights.size());
  std::iota(order.begin(), order.end(), std::size_t{0});
  std::stable_sort(order.begin(), order.end(),
                   [&](std::size_t a, std::size_t b) { return remainder[a] > remainder[b]; });
  for (std::size_t k = 0; assigned < n; ++k, ++assigned) ++counts[order[k % order.size()]];
  return counts;
}

SurfaceSamples draw_surface_samples(const Mesh& mesh, std::size_t n, Rng& rng) {
  const auto& v = mesh.vertices();
  std::vector<double> areas;
  areas.reserve(mesh.num_faces());
  for (const Face& f : mesh.faces()) areas.push_back(0.5 * norm(cross(v[f[1]] - v[f[0]], v[f[2]] - v[f[0]])));
  if (mesh.num_faces() == 0 || !(std::accumulate(areas.begin(), areas.end(), 0.0) > 0.0))
    fail(ErrorCode::kDomain, "resample_mesh: all faces are degenerate");
  SurfaceSamples out;
  if (n == 0) return out;
  const std::vector<std::size_t> counts = allocate_counts(areas, n);
  out.faces.reserve(n);
  out.weights.reserve(n);
  for (std::size_t f = 0; f < counts.size(); ++f)
    for (std::size_t k = 0; k < counts[f]; ++k) {
      const double r1 = rng.uniform(), r2 = rng.uniform();
      const double s = std::sqrt(r1);
      out.faces.push_back(static_cast<Index>(f));
      out.weights.push_back({1.0 - s, s * (1.0 - r2), s * r2});
    }
  return out;
}

template <typename Real>
Tensor<Real> resample_points(const Tensor<Real>& vertices, const Mesh& topology,
                             const SurfaceSamples& samples, bool include_vertices) {
  if (vertices.rank() != 2 || vertices.dim(1) != 3 || vertices.dim(0) != topology.num_vertices())
    fail(ErrorCode::kShape, "resample_points: vertices " + shape_str(vertices.shape()) +
                                " for mesh of " + std::to_string(topology.num_vertices()));
  const std::size_t n = samples.faces.size();
  if (n == 0) return include_vertices ? vertices : Tensor<Real>::zeros({0, 3});
  std::array<std::vector<Index>, 3> corner;
  std::array<std::vector<Real>, 3> weight;
  for (std::size_t i = 0; i < n; ++i) {
    const Face& f = topology.faces()[samples.faces[i]];
    for (int c = 0; c < 3; ++c) {
      corner[c].push_back(f[c]);
      weight[c].push_back(static_cast<Real>(samples.weights[i][c]));
    }
  }
  Tensor<Real> points;
  for (int c = 0; c < 3; ++c) {
    Tensor<Real> term = scale_rows(gather_rows(vertices, std::span<const Index>(corner[c])),
                                   Tensor<Real>({n}, std::move(weight[c])));
    points = c == 0 ? term : add(points, term);
  }
  return include_vertices ? concat<Real>({points, vertices}, 0) : points;
}

PointCloud resample_mesh(const Mesh& mesh, std::size_t n, Rng& rng, bool include_vertices) {
  const SurfaceSamples samples = draw_surface_samples(mesh, n, rng);
  PointCloud cloud;
  const auto& v = mesh.vertices();
  for (std::size_t i = 0; i < samples.faces.size(); ++i) {
    const Face& f = mesh.faces()[samples.faces[i]];
    const auto& w = samples.weights[i];
    cloud.points.push_back(w[0] * v[f[0]] + w[1] * v[f[1]] + w[2] * v[f[2]]);
  }
  if (include_vertices) cloud.points.insert(cloud.points.end(), v.begin(), v.end());
  return cloud;
}

// ---- k-d tree -------------------------------------------------------------------

namespace {

double sq_distance(const Vec3& a, const Vec3& b) {
  const double dx = a[0] - b[0], dy = a[1] - b[1], dz = a[2] - b[2];
  return dx * dx + dy * dy + dz * dz;
}

}  // namespace

KdTree::KdTree(std::vector<Vec3> points) : points_(std::move(points)) {
  if (points_.empty()) fail(ErrorCode::kDomain, "kd-tree over an empty point set");
  std::vector<Index> order(points_.size());
  std::iota(order.begin(), order.end(), Index{0});
  nodes_.reserve(points_.size());
  root_ = build(order, 0, order.size());
}

int KdTree::build(std::vector<Index>& order, std::size_t lo, std::size_t hi) {
  if (lo >= hi) return -1;
  Vec3 low = points_[order[lo]], high = low;
  for (std::size_t i = lo; i < hi; ++i)
    for (int c = 0; c < 3; ++c) {
      low[c] = std::min(low[c], points_[order[i]][c]);
      high[c] = std::max(high[c], points_[order[i]][c]);
    }
  int axis = 0;
  for (int c = 1; c < 3; ++c)
    if (high[c] - low[c] > high[axis] - low[axis]) axis = c;
  const std::size_t mid = lo + (hi - lo) / 2;
  std::nth_element(order.begin() + lo, order.begin() + mid, order.begin() + hi,
                   [&](Index a, Index b) {
                     return points_[a][axis] < points_[b][axis] ||
                            (points_[a][axis] == points_[b][axis] && a < b);
                   });
  const int id = static_cast<int>(nodes_.size());
  nodes_.push_back({order[mid], axis});
  const int left = build(order, lo, mid);
  const int right = build(order, mid + 1, hi);
  nodes_[id].left = left;
  nodes_[id].right = right;
  return id;
}

void KdTree::search(int node, const Vec3& q, Hit& best) const {
  if (node < 0) return;
  const Node& n = nodes_[node];
  const double d = sq_distance(points_[n.point], q);
  if (d < best.sq_dist || (d == best.sq_dist && n.point < best.index)) best = {n.point, d};
  const double delta = q[n.axis] - points_[n.point][n.axis];
  search(delta < 0 ? n.left : n.right, q, best);
  // Equal-distance candidates may sit on the plane, so prune only on a
  // strictly larger plane distance.
  if (delta * delta <= best.sq_dist) search(delta < 0 ? n.right : n.left, q, best);
}

KdTree::Hit KdTree::nearest(const Vec3& query) const {
  Hit best{0, std::numeric_limits<double>::infinity()};
  best.index = std::numeric_limits<Index>::max();
  search(root_, query, best);
  return best;
}

std::vector<KdTree::Hit> KdTree::nearest(std::span<const Vec3> queries) const {
  std::vector<Hit> out;
  out.reserve(queries.size());
  for (const Vec3& q : queries) out.push_back(nearest(q));
  return out;
}

// ---- Chamfer ----------------------------------------------------------------------

namespace {

template <typename Real>
Tensor<Real> directed_term(const Tensor<Real>& from, const Tensor<Real>& to,
                           const std::vector<KdTree::Hit>& hits, bool squared) {
  std::vector<Index> idx;
  idx.reserve(hits.size());
  for (const auto& h : hits) idx.push_back(h.index);
  const Tensor<Real> diff = sub(from, gather_rows(to, std::span<const Index>(idx)));
  Tensor<Real> d = sum(square(diff), 1);
  if (!squared) d = sqrt(add(d, Tensor<Real>::filled(d.shape(), Real(1e-12))));
  return mean(d, 0);
}

template <typename Real>
void check_cloud(const Tensor<Real>& t, const char* which) {
  if (t.rank() != 2 || t.dim(1) != 3)
    fail(ErrorCode::kShape, std::string("chamfer: ") + which + " must be [P,3], got " + shape_str(t.shape()));
  if (t.dim(0) == 0) fail(ErrorCode::kDomain, std::string("chamfer: ") + which + " cloud is empty");
}

}  // namespace

template <typename Real>
Tensor<Real> chamfer(const Tensor<Real>& a, const Tensor<Real>& b, const KdTree& b_tree, bool squared) {
  check_cloud(a, "first");
  check_cloud(b, "second");
  if (b_tree.size() != b.dim(0)) fail(ErrorCode::kShape, "chamfer: tree does not match second cloud");
  const std::vector<Vec3> av = to_vec3(a);
  const KdTree a_tree(av);
  const auto ab = b_tree.nearest(av);
  const auto ba = a_tree.nearest(b_tree.points());
  return add(directed_term(a, b, ab, squared), directed_term(b, a, ba, squared));
}

template <typename Real>
Tensor<Real> chamfer(const Tensor<Real>& a, const Tensor<Real>& b, bool squared) {
  check_cloud(b, "second");
  return chamfer(a, b, KdTree(to_vec3(b)), squared);
}

double chamfer_distance(const PointCloud& a, const PointCloud& b) {
  a.validate();
  b.validate();
  const KdTree ta(a.points), tb(b.points);
  double ab = 0.0, ba = 0.0;
  for (const auto& h : tb.nearest(a.points)) ab += h.sq_dist;
  for (const auto& h : ta.nearest(b.points)) ba += h.sq_dist;
  return ab / double(a.size()) + ba / double(b.size());
}

FScore f_score(const PointCloud& pred, const PointCloud& gt, double tau) {
  if (!(tau > 0.0)) fail(ErrorCode::kDomain, "f_score: tau must be positive");
  pred.validate();
  gt.validate();
  const KdTree tp(pred.points), tg(gt.points);
  const auto pg = tg.nearest(pred.points);
  const auto gp = tp.nearest(gt.points);
  auto score = [&](double threshold, double& precision, double& recall) {
    std::size_t p = 0, r = 0;
    for (const auto& h : pg) p += h.sq_dist < threshold ? 1 : 0;
    for (const auto& h : gp) r += h.sq_dist < threshold ? 1 : 0;
    precision = 100.0 * double(p) / double(pg.size());
    recall = 100.0 * double(r) / double(gp.size());
    return precision + recall > 0.0 ? 2.0 * precision * recall / (precision + recall) : 0.0;
  };
  FScore out;
  double p2 = 0.0, r2 = 0.0;
  out.f_tau = score(tau, out.precision, out.recall);
  out.f_2tau = score(2.0 * tau, p2, r2);
  return out;
}

void MetricConfig::validate() const {
  if (!(tau > 0.0)) fail(ErrorCode::kConfig, "metric: tau must be positive");
  if (samples < 1) fail(ErrorCode::kConfig, "metric: samples must be at least 1");
}

// ---- regularisers and total loss -------------------------------------------------

void LossWeights::validate() const {
  if (!(chamfer > 0.0)) fail(ErrorCode::kConfig, "loss weights: chamfer weight must be positive");
  if (edge < 0.0 || laplacian < 0.0 || normal < 0.0)
    fail(ErrorCode::kConfig, "loss weights must be nonnegative");
}

GroundTruth::GroundTruth(PointCloud gt) : cloud(std::move(gt)), tree(cloud.points) {
  cloud.validate();
  std::vector<float> f;
  std::vector<double> d;
  for (const Vec3& p : cloud.points)
    for (const double c : p) {
      f.push_back(static_cast<float>(c));
      d.push_back(c);
    }
  points_f_ = Tensor<float>({cloud.size(), 3}, std::move(f));
  points_d_ = Tensor<double>({cloud.size(), 3}, std::move(d));
}

template <>
const Tensor<float>& GroundTruth::points<float>() const {
  return points_f_;
}
template <>
const Tensor<double>& GroundTruth::points<double>() const {
  return points_d_;
}

template <typename Real>
AuxLosses<Real> aux_losses(const Tensor<Real>& vertices, const Mesh& topology,
                           const std::vector<Vec3>& start, const GroundTruth& gt) {
  if (vertices.rank() != 2 || vertices.dim(0) != topology.num_vertices() || start.size() != topology.num_vertices())
    fail(ErrorCode::kShape, "aux_losses: vertices " + shape_str(vertices.shape()) + " / start " +
                                std::to_string(start.size()) + " for mesh of " +
                                std::to_string(topology.num_vertices()));
  AuxLosses<Real> out;
  std::vector<Index> from, to;
  for (const auto& [a, b] : topology.edges()) {
    from.push_back(a);
    to.push_back(b);
    from.push_back(b);
    to.push_back(a);
  }
  if (from.empty()) {
    out.edge = out.normal = Tensor<Real>::scalar(Real(0));
  } else {
    const Tensor<Real> diff = sub(gather_rows(vertices, std::span<const Index>(from)),
                                  gather_rows(vertices, std::span<const Index>(to)));
    out.edge = mean(sum(square(diff), 1), 0);

    const std::vector<Vec3> current = to_vec3(vertices);
    if (gt.cloud.normals.empty()) fail(ErrorCode::kShape, "aux_losses: ground truth lacks normals");
    std::vector<Real> normals;
    normals.reserve(from.size() * 3);
    std::vector<Vec3> nearest_normal(current.size());
    for (std::size_t i = 0; i < current.size(); ++i)
      nearest_normal[i] = gt.cloud.normals[gt.tree.nearest(current[i]).index];
    for (const Index p : from)
      for (int c = 0; c < 3; ++c) normals.push_back(static_cast<Real>(nearest_normal[p][c]));
    const Tensor<Real> proj = sum(mul(diff, Tensor<Real>(diff.shape(), std::move(normals))), 1);
    out.normal = mean(square(proj), 0);
  }

  const Adjacency& graph = topology.adjacency();
  const Tensor<Real> lap = sub(vertices, neighbor_mean(vertices, graph));
  std::vector<Real> lap0(start.size() * 3, Real(0));
  for (std::size_t p = 0; p < start.size(); ++p) {
    const auto nb = graph.neighbors(p);
    Vec3 avg{0, 0, 0};
    for (const Index q : nb) avg = avg + start[q];
    if (!nb.empty()) avg = (1.0 / double(nb.size())) * avg;
    for (int c = 0; c < 3; ++c) lap0[3 * p + c] = static_cast<Real>(start[p][c] - avg[c]);
  }
  out.laplacian =
      mean(sum(square(sub(lap, Tensor<Real>(lap.shape(), std::move(lap0)))), 1), 0);
  return out;
}

template <typename Real>
LossTerms<Real> total_loss(const Tensor<Real>& vertices, const Mesh& topology,
                           const std::vector<Vec3>& start, const GroundTruth& gt,
                           const LossWeights& weights, Rng& rng, std::size_t samples, bool squared) {
  weights.validate();
  const Mesh current = topology.with_vertices(to_vec3(vertices));
  const SurfaceSamples draw = draw_surface_samples(current, samples, rng);
  const Tensor<Real> cloud = resample_points(vertices, topology, draw, true);
  const Tensor<Real> cd = chamfer(cloud, gt.points<Real>(), gt.tree, squared);

  LossTerms<Real> out;
  out.chamfer = cd.item();
  Tensor<Real> total = scale(cd, weights.chamfer);
  const bool need_aux = weights.edge > 0.0 || weights.laplacian > 0.0 || weights.normal > 0.0;
  if (need_aux) {
    const AuxLosses<Real> aux = aux_losses(vertices, topology, start, gt);
    out.edge = aux.edge.item();
    out.laplacian = aux.laplacian.item();
    out.normal = aux.normal.item();
    if (weights.edge > 0.0) total = add(total, scale(aux.edge, weights.edge));
    if (weights.laplacian > 0.0) total = add(total, scale(aux.laplacian, weights.laplacian));
    if (weights.normal > 0.0) total = add(total, scale(aux.normal, weights.normal));
  }
  out.total = total;
  return out;
}

#define P2MX_INSTANTIATE(Real)                                                                     \
  template Tensor<Real> resample_points<Real>(const Tensor<Real>&, const Mesh&,                    \
                                              const SurfaceSamples&, bool);                        \
  template Tensor<Real> chamfer<Real>(const Tensor<Real>&, const Tensor<Real>&, bool);             \
  template Tensor<Real> chamfer<Real>(const Tensor<Real>&, const Tensor<Real>&, const KdTree&, bool); \
  template AuxLosses<Real> aux_losses<Real>(const Tensor<Real>&, const Mesh&,                      \
                                            const std::vector<Vec3>&, const GroundTruth&);         \
  template LossTerms<Real> total_loss<Real>(const Tensor<Real>&, const Mesh&,                      \
                                            const std::vector<Vec3>&, const GroundTruth&,          \
                                            const LossWeights&, Rng&, std::size_t, bool);

P2MX_INSTANTIATE(float)
P2MX_INSTANTIATE(double)

#undef P2MX_INSTANTIATE

}  // namespace p2mx
