#pragma once

#include <array>
#include <span>
#include <vector>

#include "p2mx/mesh.hpp"
#include "p2mx/rng.hpp"
#include "p2mx/tensor.hpp"

namespace p2mx {

struct PointCloud {
  std::vector<Vec3> points;
  std::vector<Vec3> normals;  // empty or one per point

  std::size_t size() const { return points.size(); }
  void validate() const;
};

// Uniform point in a triangle for r1, r2 in [0, 1]:
// (1 - sqrt(r1)) v1 + sqrt(r1) (1 - r2) v2 + sqrt(r1) r2 v3.
Vec3 sample_triangle(const Vec3& v1, const Vec3& v2, const Vec3& v3, double r1, double r2);

// Largest-remainder split of n over nonnegative weights; sums to n exactly
// and every count is within 1 of its real-valued share. Ties go to the lower index.
std::vector<std::size_t> allocate_counts(std::span<const double> weights, std::size_t n);

// Face id and barycentric weights for each sample point.
struct SurfaceSamples {
  std::vector<Index> faces;
  std::vector<std::array<double, 3>> weights;
};

// n points over the faces, per-face counts proportional to area.
SurfaceSamples draw_surface_samples(const Mesh& mesh, std::size_t n, Rng& rng);

// Sample positions as a differentiable function of the vertices, followed by
// the vertices themselves when include_vertices is set: [n (+V), 3].
template <typename Real>
Tensor<Real> resample_points(const Tensor<Real>& vertices, const Mesh& topology,
                             const SurfaceSamples& samples, bool include_vertices);

PointCloud resample_mesh(const Mesh& mesh, std::size_t n, Rng& rng, bool include_vertices = true);

class KdTree {
 public:
  struct Hit {
    Index index = 0;
    double sq_dist = 0.0;
  };

  explicit KdTree(std::vector<Vec3> points);

  // Closest point; among equidistant points the lowest index wins.
  Hit nearest(const Vec3& query) const;
  std::vector<Hit> nearest(std::span<const Vec3> queries) const;
  std::size_t size() const { return points_.size(); }
  const std::vector<Vec3>& points() const { return points_; }

 private:
  struct Node {
    Index point;
    int axis;
    int left = -1, right = -1;
  };
  int build(std::vector<Index>& order, std::size_t lo, std::size_t hi);
  void search(int node, const Vec3& q, Hit& best) const;

  std::vector<Vec3> points_;
  std::vector<Node> nodes_;
  int root_ = -1;
};

// mean_a min_b d(a,b) + mean_b min_a d(b,a), d = squared distance (or plain
// distance when squared is false). Nearest assignments are fixed per call;
// gradients flow to both clouds through them.
template <typename Real>
Tensor<Real> chamfer(const Tensor<Real>& a, const Tensor<Real>& b, bool squared = true);
// Same with a prebuilt tree over b's values.
template <typename Real>
Tensor<Real> chamfer(const Tensor<Real>& a, const Tensor<Real>& b, const KdTree& b_tree,
                     bool squared = true);

double chamfer_distance(const PointCloud& a, const PointCloud& b);

struct FScore {
  double f_tau = 0.0;
  double f_2tau = 0.0;
  double precision = 0.0;  // at tau, percent
  double recall = 0.0;     // at tau, percent
};

// tau is a squared-distance threshold; scores are percentages.
FScore f_score(const PointCloud& pred, const PointCloud& gt, double tau);

struct MetricConfig {
  double tau = 1e-4;
  std::size_t samples = 10000;

  void validate() const;
};

struct LossWeights {
  double chamfer = 1.0;
  double edge = 0.1;
  double laplacian = 0.5;
  double normal = 1.6e-4;

  void validate() const;
};

struct GroundTruth {
  PointCloud cloud;  // with normals
  KdTree tree;

  explicit GroundTruth(PointCloud gt);

  // Cloud points as an [P, 3] constant tensor.
  template <typename Real>
  const Tensor<Real>& points() const;

 private:
  Tensor<float> points_f_;
  Tensor<double> points_d_;
};

template <typename Real>
struct AuxLosses {
  Tensor<Real> edge, laplacian, normal;
};

// edge: mean squared edge length. laplacian: mean squared change of the
// umbrella Laplacian relative to `start`. normal: mean over directed edges of
// <v_p - v_q, n>^2 with n the normal of the ground-truth point nearest v_p.
template <typename Real>
AuxLosses<Real> aux_losses(const Tensor<Real>& vertices, const Mesh& topology,
                           const std::vector<Vec3>& start, const GroundTruth& gt);

template <typename Real>
struct LossTerms {
  Tensor<Real> total;
  double chamfer = 0.0, edge = 0.0, laplacian = 0.0, normal = 0.0;
};

inline constexpr std::size_t kResamplePoints = 4000;

// chamfer(resample(pred, samples) + vertices, gt) weighted with the aux terms.
template <typename Real>
LossTerms<Real> total_loss(const Tensor<Real>& vertices, const Mesh& topology,
                           const std::vector<Vec3>& start, const GroundTruth& gt,
                           const LossWeights& weights, Rng& rng,
                           std::size_t samples = kResamplePoints, bool squared = true);

}  // namespace p2mx
