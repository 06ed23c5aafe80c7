#include <gtest/gtest.h>

#include <cmath>

#include "p2mx/camera.hpp"
#include "support/support.hpp"

using namespace p2mx;
using p2mx::testing::code_of;
using p2mx::testing::random_tensor;

namespace {

CameraIntrinsics intrinsics(double f, double cx, double cy, std::size_t w, std::size_t h) {
  CameraIntrinsics k;
  k.fx = k.fy = f;
  k.cx = cx;
  k.cy = cy;
  k.width = w;
  k.height = h;
  return k;
}

std::array<double, 9> yaw(double a) {
  return {std::cos(a), 0, std::sin(a), 0, 1, 0, -std::sin(a), 0, std::cos(a)};
}

}  // namespace

TEST(WorldToCamera, Examples) {
  CameraExtrinsics e;
  EXPECT_EQ(world_to_camera({1, 2, 3}, e), (Vec3{1, 2, 3}));
  e.T = {0, 0, 5};
  EXPECT_EQ(world_to_camera({1, 1, 0}, e), (Vec3{1, 1, 5}));
  e.T = {0, 0, 0};
  e.R = {-1, 0, 0, 0, 1, 0, 0, 0, -1};
  EXPECT_EQ(world_to_camera({1, 0, 2}, e), (Vec3{-1, 0, -2}));
}

TEST(Project, Examples) {
  const PixelProjection p = project({1, 1, 2}, intrinsics(100, 64, 64, 128, 128));
  EXPECT_DOUBLE_EQ(p.x, 114.0);
  EXPECT_DOUBLE_EQ(p.y, 114.0);
  EXPECT_TRUE(p.valid);
  const PixelProjection c = project({0, 0, 1}, intrinsics(100, 64, 48, 128, 96));
  EXPECT_DOUBLE_EQ(c.x, 64.0);
  EXPECT_DOUBLE_EQ(c.y, 48.0);
  EXPECT_TRUE(c.valid);
  EXPECT_FALSE(project({0, 0, -1}, intrinsics(100, 64, 64, 128, 128)).valid);
  EXPECT_FALSE(project({0, 0, 0}, intrinsics(100, 64, 64, 128, 128)).valid);
}

TEST(Project, BoundsUseHalfPixelTolerance) {
  const CameraIntrinsics k = intrinsics(10, 0, 0, 8, 8);
  EXPECT_TRUE(project({-0.049, 0, 1}, k).valid);   // x = -0.49
  EXPECT_FALSE(project({-0.051, 0, 1}, k).valid);  // x = -0.51
  EXPECT_TRUE(project({0.749, 0.749, 1}, k).valid);
  EXPECT_FALSE(project({0.751, 0, 1}, k).valid);
}

TEST(ProjectPoints, IdentityPoseMatchesProject) {
  Camera cam;
  cam.intrinsics = intrinsics(50, 31.5, 31.5, 64, 64);
  const Tensor<double> pts({3, 3}, {0.1, -0.2, 1.0, 0.0, 0.0, 2.0, 5.0, 0.0, 1.0});
  const auto out = project_points(pts, cam);
  for (std::size_t i = 0; i < 3; ++i) {
    const PixelProjection p = project({pts.data()[3 * i], pts.data()[3 * i + 1], pts.data()[3 * i + 2]}, cam.intrinsics);
    EXPECT_EQ(out.valid[i] != 0, p.valid);
    EXPECT_DOUBLE_EQ(out.xy.data()[2 * i], std::clamp(p.x, 0.0, 63.0));
    EXPECT_DOUBLE_EQ(out.xy.data()[2 * i + 1], std::clamp(p.y, 0.0, 63.0));
  }
  EXPECT_FALSE(out.valid[2]);  // x = 281.5, clamped to 63
}

TEST(ProjectPoints, BehindCameraIsInvalid) {
  Camera cam;
  cam.intrinsics = intrinsics(50, 31.5, 31.5, 64, 64);
  const Tensor<double> pts({2, 3}, {0, 0, -1, 0.2, 0.1, -3});
  for (const auto v : project_points(pts, cam).valid) EXPECT_EQ(v, 0);
}

TEST(ProjectPoints, ScalingAlongTheRayKeepsThePixel) {
  Camera cam;
  cam.intrinsics = intrinsics(70, 31.5, 31.5, 64, 64);
  cam.extrinsics = look_at({0.9, 0.4, 0.7}, {0, 0, 0});
  Rng rng(3);
  for (int trial = 0; trial < 20; ++trial) {
    const Vec3 p{rng.uniform(-0.1, 0.1), rng.uniform(-0.1, 0.1), rng.uniform(-0.1, 0.1)};
    const Vec3 pc = world_to_camera(p, cam.extrinsics);
    const double s = rng.uniform(0.5, 2.0);
    // Camera centre in world coordinates: -R^T T.
    const auto& R = cam.extrinsics.R;
    const auto& T = cam.extrinsics.T;
    Vec3 centre{};
    for (int i = 0; i < 3; ++i) centre[i] = -(R[i] * T[0] + R[3 + i] * T[1] + R[6 + i] * T[2]);
    const Vec3 q = centre + s * (p - centre);
    const PixelProjection a = project(pc, cam.intrinsics);
    const PixelProjection b = project(world_to_camera(q, cam.extrinsics), cam.intrinsics);
    EXPECT_NEAR(a.x, b.x, 1e-9);
    EXPECT_NEAR(a.y, b.y, 1e-9);
  }
}

TEST(ProjectPoints, JointRotationLeavesProjectionUnchanged) {
  Camera cam;
  cam.intrinsics = intrinsics(70, 31.5, 31.5, 64, 64);
  cam.extrinsics = look_at({1.0, 0.4, 0.3}, {0, 0, 0});
  const auto R0 = yaw(0.7);
  // p -> R0 p, R -> R R0^T
  Camera rotated = cam;
  for (int i = 0; i < 3; ++i)
    for (int j = 0; j < 3; ++j) {
      double s = 0.0;
      for (int k = 0; k < 3; ++k) s += cam.extrinsics.R[3 * i + k] * R0[3 * j + k];
      rotated.extrinsics.R[3 * i + j] = s;
    }
  Rng rng(4);
  for (int trial = 0; trial < 20; ++trial) {
    const Vec3 p{rng.uniform(-0.1, 0.1), rng.uniform(-0.1, 0.1), rng.uniform(-0.1, 0.1)};
    Vec3 q{};
    for (int i = 0; i < 3; ++i) q[i] = R0[3 * i] * p[0] + R0[3 * i + 1] * p[1] + R0[3 * i + 2] * p[2];
    const PixelProjection a = project(world_to_camera(p, cam.extrinsics), cam.intrinsics);
    const PixelProjection b = project(world_to_camera(q, rotated.extrinsics), rotated.intrinsics);
    EXPECT_NEAR(a.x, b.x, 1e-9);
    EXPECT_NEAR(a.y, b.y, 1e-9);
  }
}

TEST(ProjectPoints, GradientAwayFromTheCameraPlane) {
  Camera cam;
  cam.intrinsics = intrinsics(20, 3.5, 3.5, 8, 8);
  cam.extrinsics = look_at({0.8, 0.3, 0.9}, {0, 0, 0});
  Rng rng(5);
  const Tensor<double> pts = scale(random_tensor({10, 3}, rng), 0.05);
  Rng wr(6);
  const Tensor<double> w = random_tensor({10, 2}, wr);
  const double err = grad_check([&](const Tensor<double>& p) { return sum_all(mul(project_points(p, cam).xy, w)); },
                                pts, 1e-6);
  EXPECT_LT(err, 1e-5);
}

TEST(ProjectPoints, ClampedCoordinatesCarryNoGradient) {
  Camera cam;
  cam.intrinsics = intrinsics(50, 3.5, 3.5, 8, 8);
  Tensor<double> pts({1, 3}, {5.0, -4.0, 1.0}, true);
  Tape<double> tape;
  Tensor<double> loss;
  {
    TapeScope<double> scope(tape);
    loss = sum_all(project_points(pts, cam).xy);
  }
  const auto grads = backward(tape, loss);
  const Tensor<double> g = grads.of(pts);
  for (const double v : g.data()) EXPECT_EQ(v, 0.0);
}

TEST(Extrinsics, LookAtIsARotationFacingTheTarget) {
  const CameraExtrinsics e = look_at({1.2, 0.4, 0.0}, {0, 0, 0});
  EXPECT_NO_THROW(e.validate());
  const Vec3 c = world_to_camera({0, 0, 0}, e);
  EXPECT_NEAR(c[0], 0.0, 1e-12);
  EXPECT_NEAR(c[1], 0.0, 1e-12);
  EXPECT_NEAR(c[2], std::sqrt(1.44 + 0.16), 1e-12);
  // World up projects upward in the image (smaller y).
  const Vec3 up = world_to_camera({0, 0.1, 0}, e);
  EXPECT_LT(up[1], 0.0);
}

TEST(Extrinsics, ValidationRejectsNonRotations) {
  CameraExtrinsics e;
  e.R = {1, 0, 0, 0, 1, 0, 0, 0, -1};
  EXPECT_EQ(code_of([&] { e.validate(); }), ErrorCode::kDomain);
  e.R = {2, 0, 0, 0, 1, 0, 0, 0, 1};
  EXPECT_EQ(code_of([&] { e.validate(); }), ErrorCode::kDomain);
  CameraIntrinsics k;
  k.fx = 0;
  EXPECT_EQ(code_of([&] { k.validate(); }), ErrorCode::kDomain);
}

TEST(CameraJson, RoundTripIsExact) {
  auto cams = p2mx::testing::ring_cameras(4, 64);
  cams[2].intrinsics.cx = 0.1 + 0.2;  // not representable in short decimal form
  const auto dir = p2mx::testing::scratch_dir("camera_json");
  save_cameras(cams, dir / "cameras.json");
  const auto back = load_cameras(dir / "cameras.json");
  ASSERT_EQ(back.size(), cams.size());
  for (std::size_t i = 0; i < cams.size(); ++i) {
    EXPECT_EQ(back[i].intrinsics.fx, cams[i].intrinsics.fx);
    EXPECT_EQ(back[i].intrinsics.fy, cams[i].intrinsics.fy);
    EXPECT_EQ(back[i].intrinsics.cx, cams[i].intrinsics.cx);
    EXPECT_EQ(back[i].intrinsics.cy, cams[i].intrinsics.cy);
    EXPECT_EQ(back[i].intrinsics.width, cams[i].intrinsics.width);
    EXPECT_EQ(back[i].intrinsics.height, cams[i].intrinsics.height);
    EXPECT_EQ(back[i].extrinsics.R, cams[i].extrinsics.R);
    EXPECT_EQ(back[i].extrinsics.T, cams[i].extrinsics.T);
  }
}

TEST(CameraJson, MalformedInput) {
  EXPECT_EQ(code_of([] { (void)parse_cameras("{"); }), ErrorCode::kFormat);
  EXPECT_EQ(code_of([] { (void)parse_cameras("{}"); }), ErrorCode::kFormat);
  EXPECT_EQ(code_of([] { (void)parse_cameras(R"({"views":[]})"); }), ErrorCode::kFormat);
  EXPECT_EQ(code_of([] {
              (void)parse_cameras(
                  R"({"views":[{"fx":1,"fy":1,"cx":0,"cy":0,"width":4,"height":4,"R":[1,0,0],"T":[0,0,0]}]})");
            }),
            ErrorCode::kFormat);
  EXPECT_EQ(code_of([] { (void)load_cameras("/nonexistent/cameras.json"); }), ErrorCode::kIo);
}
