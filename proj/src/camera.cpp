#include "p2mx/camera.hpp"

#include <json.hpp>

#include <algorithm>
#include <cmath>
#include <fstream>
#include <sstream>

#include "p2mx/error.hpp"

namespace p2mx {

void CameraIntrinsics::validate() const {
  if (!(fx > 0.0) || !(fy > 0.0)) fail(ErrorCode::kDomain, "camera: focal lengths must be positive");
  if (width == 0 || height == 0) fail(ErrorCode::kDomain, "camera: image extent must be positive");
}

void CameraExtrinsics::validate() const {
  for (int i = 0; i < 3; ++i)
    for (int j = 0; j < 3; ++j) {
      double rtr = 0.0;
      for (int k = 0; k < 3; ++k) rtr += R[3 * k + i] * R[3 * k + j];
      if (std::abs(rtr - (i == j ? 1.0 : 0.0)) > 1e-6)
        fail(ErrorCode::kDomain, "camera: R is not orthonormal");
    }
  const double det = R[0] * (R[4] * R[8] - R[5] * R[7]) - R[1] * (R[3] * R[8] - R[5] * R[6]) +
                     R[2] * (R[3] * R[7] - R[4] * R[6]);
  if (std::abs(det - 1.0) > 1e-6) fail(ErrorCode::kDomain, "camera: det(R) must be 1");
}

Vec3 world_to_camera(const Vec3& p, const CameraExtrinsics& e) {
  const auto& R = e.R;
  return {R[0] * p[0] + R[1] * p[1] + R[2] * p[2] + e.T[0],
          R[3] * p[0] + R[4] * p[1] + R[5] * p[2] + e.T[1],
          R[6] * p[0] + R[7] * p[1] + R[8] * p[2] + e.T[2]};
}

PixelProjection project(const Vec3& p, const CameraIntrinsics& k) {
  PixelProjection out;
  if (!(p[2] > kZNear)) return out;
  out.x = p[0] / p[2] * k.fx + k.cx;
  out.y = p[1] / p[2] * k.fy + k.cy;
  const double w = double(k.width), h = double(k.height);
  out.valid = out.x >= -0.5 && out.x <= w - 0.5 && out.y >= -0.5 && out.y <= h - 0.5;
  return out;
}

template <typename Real>
ProjectedPoints<Real> project_points(const Tensor<Real>& points, const Camera& camera) {
  if (points.rank() != 2 || points.dim(1) != 3)
    fail(ErrorCode::kShape, "project_points: expected [P,3], got " + shape_str(points.shape()));
  const std::size_t n = points.dim(0);
  const auto& k = camera.intrinsics;
  const double xmax = double(k.width) - 1.0, ymax = double(k.height) - 1.0;
  auto pv = points.data();

  std::vector<Real> xy(2 * n);
  std::vector<std::uint8_t> valid(n);
  // d(x,y)/d(p_cam) per point, zeroed where clamped or behind the camera.
  std::vector<std::array<double, 6>> jac(n);
  for (std::size_t i = 0; i < n; ++i) {
    const Vec3 pc = world_to_camera({pv[3 * i], pv[3 * i + 1], pv[3 * i + 2]}, camera.extrinsics);
    const PixelProjection proj = project(pc, k);
    valid[i] = proj.valid;
    jac[i].fill(0.0);
    if (!(pc[2] > kZNear)) {
      xy[2 * i] = static_cast<Real>(std::clamp(k.cx, 0.0, xmax));
      xy[2 * i + 1] = static_cast<Real>(std::clamp(k.cy, 0.0, ymax));
      continue;
    }
    const double x = std::clamp(proj.x, 0.0, xmax), y = std::clamp(proj.y, 0.0, ymax);
    xy[2 * i] = static_cast<Real>(x);
    xy[2 * i + 1] = static_cast<Real>(y);
    const double iz = 1.0 / pc[2];
    if (proj.x > 0.0 && proj.x < xmax) {
      jac[i][0] = k.fx * iz;
      jac[i][2] = -k.fx * pc[0] * iz * iz;
    }
    if (proj.y > 0.0 && proj.y < ymax) {
      jac[i][4] = k.fy * iz;
      jac[i][5] = -k.fy * pc[1] * iz * iz;
    }
  }
  Tensor<Real> out({n, 2}, std::move(xy));
  const auto R = camera.extrinsics.R;
  record_op<Real>(OpKind::kProject, {points}, out,
                  [points, R, n, jac = std::move(jac)](std::span<const Real> g) mutable {
                    auto gp = points.grad_buffer();
                    for (std::size_t i = 0; i < n; ++i) {
                      // dL/dp_cam, then through R: dL/dp = R^T dL/dp_cam.
                      const double gx = g[2 * i], gy = g[2 * i + 1];
                      const double dc[3] = {gx * jac[i][0], gy * jac[i][4],
                                            gx * jac[i][2] + gy * jac[i][5]};
                      for (int c = 0; c < 3; ++c)
                        gp[3 * i + c] += static_cast<Real>(R[c] * dc[0] + R[3 + c] * dc[1] +
                                                           R[6 + c] * dc[2]);
                    }
                  });
  return {out, std::move(valid)};
}

template ProjectedPoints<float> project_points<float>(const Tensor<float>&, const Camera&);
template ProjectedPoints<double> project_points<double>(const Tensor<double>&, const Camera&);

CameraExtrinsics look_at(const Vec3& eye, const Vec3& target) {
  const Vec3 forward = normalized(target - eye);
  Vec3 up{0, 1, 0};
  if (norm(cross(forward, up)) < 1e-9) up = {0, 0, 1};
  const Vec3 right = normalized(cross(forward, up));
  const Vec3 down = cross(forward, right);
  CameraExtrinsics e;
  e.R = {right[0], right[1], right[2], down[0], down[1], down[2], forward[0], forward[1], forward[2]};
  const Vec3 re = world_to_camera(eye, CameraExtrinsics{e.R, {0, 0, 0}});
  e.T = {-re[0], -re[1], -re[2]};
  return e;
}

std::vector<Camera> parse_cameras(const std::string& json_text) {
  using nlohmann::json;
  json doc;
  try {
    doc = json::parse(json_text);
  } catch (const json::exception& e) {
    fail(ErrorCode::kFormat, std::string("camera json: ") + e.what());
  }
  if (!doc.contains("views") || !doc["views"].is_array())
    fail(ErrorCode::kFormat, "camera json: missing 'views' array");
  std::vector<Camera> out;
  for (const auto& v : doc["views"]) {
    Camera c;
    try {
      c.intrinsics.fx = v.at("fx").get<double>();
      c.intrinsics.fy = v.at("fy").get<double>();
      c.intrinsics.cx = v.at("cx").get<double>();
      c.intrinsics.cy = v.at("cy").get<double>();
      c.intrinsics.width = v.at("width").get<std::size_t>();
      c.intrinsics.height = v.at("height").get<std::size_t>();
      const auto R = v.at("R").get<std::vector<double>>();
      const auto T = v.at("T").get<std::vector<double>>();
      if (R.size() != 9 || T.size() != 3) fail(ErrorCode::kFormat, "camera json: R needs 9 and T 3 values");
      std::copy(R.begin(), R.end(), c.extrinsics.R.begin());
      std::copy(T.begin(), T.end(), c.extrinsics.T.begin());
    } catch (const json::exception& e) {
      fail(ErrorCode::kFormat, std::string("camera json: ") + e.what());
    }
    c.intrinsics.validate();
    c.extrinsics.validate();
    out.push_back(c);
  }
  if (out.empty()) fail(ErrorCode::kFormat, "camera json: no views");
  return out;
}

std::string dump_cameras(const std::vector<Camera>& cameras) {
  using nlohmann::json;
  json views = json::array();
  for (const auto& c : cameras) {
    views.push_back({{"fx", c.intrinsics.fx},
                     {"fy", c.intrinsics.fy},
                     {"cx", c.intrinsics.cx},
                     {"cy", c.intrinsics.cy},
                     {"width", c.intrinsics.width},
                     {"height", c.intrinsics.height},
                     {"R", c.extrinsics.R},
                     {"T", c.extrinsics.T}});
  }
  return json{{"views", views}}.dump(2);
}

std::vector<Camera> load_cameras(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) fail(ErrorCode::kIo, "cannot open camera file " + path.string());
  std::stringstream ss;
  ss << in.rdbuf();
  return parse_cameras(ss.str());
}

void save_cameras(const std::vector<Camera>& cameras, const std::filesystem::path& path) {
  std::ofstream out(path);
  if (!out) fail(ErrorCode::kIo, "cannot write camera file " + path.string());
  out << dump_cameras(cameras) << '\n';
}

}  // namespace p2mx
