#pragma once

#include <array>
#include <cstdint>
#include <filesystem>
#include <string>
#include <vector>

#include "p2mx/mesh.hpp"
#include "p2mx/tensor.hpp"

namespace p2mx {

struct CameraIntrinsics {
  double fx = 1.0, fy = 1.0;  // focal lengths, pixels
  double cx = 0.0, cy = 0.0;  // principal point, pixels
  std::size_t width = 1, height = 1;

  void validate() const;
};

// World to camera: p_cam = R p + T, R row-major.
struct CameraExtrinsics {
  std::array<double, 9> R{1, 0, 0, 0, 1, 0, 0, 0, 1};
  Vec3 T{0, 0, 0};

  void validate() const;
};

struct Camera {
  CameraIntrinsics intrinsics;
  CameraExtrinsics extrinsics;
};

inline constexpr double kZNear = 1e-6;

Vec3 world_to_camera(const Vec3& p, const CameraExtrinsics& extrinsics);

struct PixelProjection {
  double x = 0.0, y = 0.0;
  bool valid = false;
};

// Perspective projection of a camera-space point (unclamped coordinates).
// valid requires Z > kZNear and (x, y) inside the image with half a pixel
// of tolerance.
PixelProjection project(const Vec3& p_cam, const CameraIntrinsics& intrinsics);

template <typename Real>
struct ProjectedPoints {
  Tensor<Real> xy;                  // [P, 2], clamped to [0, W-1] x [0, H-1]
  std::vector<std::uint8_t> valid;  // per point
};

// Differentiable in the world points; clamped or invalid coordinates carry
// zero gradient.
template <typename Real>
ProjectedPoints<Real> project_points(const Tensor<Real>& points, const Camera& camera);

// Camera at `eye` looking at `target` with world +y as up; image x grows to the
// right and y downward.
CameraExtrinsics look_at(const Vec3& eye, const Vec3& target);

// {"views":[{"fx":..,"fy":..,"cx":..,"cy":..,"width":..,"height":..,"R":[9],"T":[3]}]}
std::vector<Camera> parse_cameras(const std::string& json_text);
std::string dump_cameras(const std::vector<Camera>& cameras);
std::vector<Camera> load_cameras(const std::filesystem::path& path);
void save_cameras(const std::vector<Camera>& cameras, const std::filesystem::path& path);

}  // namespace p2mx
