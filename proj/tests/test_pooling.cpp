#include <gtest/gtest.h>

#include <algorithm>
#include <fstream>
#include <numeric>

#include "p2mx/pooling.hpp"
#include "support/support.hpp"

using namespace p2mx;
using p2mx::testing::code_of;
using p2mx::testing::random_tensor;
using T = Tensor<double>;

namespace {

T xy(double x, double y) { return T({1, 2}, {x, y}); }

View<double> constant_view(std::array<std::size_t, 3> channels, std::size_t size) {
  View<double> v;
  v.camera.intrinsics.width = v.camera.intrinsics.height = size;
  for (std::size_t l = 0; l < 3; ++l) {
    const std::size_t s = (size + kPyramidStrides[l] - 1) / kPyramidStrides[l];
    v.pyramid.push_back(T::filled({channels[l], s, s}, static_cast<double>(l + 1)));
  }
  return v;
}

}  // namespace

TEST(Bilinear, GridPointsAndCellCentre) {
  const T map({1, 2, 2}, {1, 2, 3, 4});
  EXPECT_DOUBLE_EQ(bilinear_sample(map, xy(0, 0)).item(), 1.0);
  EXPECT_DOUBLE_EQ(bilinear_sample(map, xy(1, 0)).item(), 2.0);
  EXPECT_DOUBLE_EQ(bilinear_sample(map, xy(0, 1)).item(), 3.0);
  EXPECT_DOUBLE_EQ(bilinear_sample(map, xy(1, 1)).item(), 4.0);
  EXPECT_DOUBLE_EQ(bilinear_sample(map, xy(0.5, 0.5)).item(), 2.5);
  EXPECT_DOUBLE_EQ(bilinear_sample(map, xy(0.25, 0.0)).item(), 1.25);
}

TEST(Bilinear, ConstantMap) {
  Rng rng(1);
  const T map = T::filled({3, 5, 7}, -0.75);
  const T pts = random_tensor({20, 2}, rng, 0.0, 4.0);
  const T out = bilinear_sample(map, pts);
  for (const double v : out.data()) EXPECT_NEAR(v, -0.75, 1e-15);
}

TEST(Bilinear, OutsideTheMapIsAnError) {
  const T map({1, 2, 2}, {1, 2, 3, 4});
  EXPECT_EQ(code_of([&] { (void)bilinear_sample(map, xy(1.5, 0)); }), ErrorCode::kDomain);
  EXPECT_EQ(code_of([&] { (void)bilinear_sample(map, xy(0, -0.5)); }), ErrorCode::kDomain);
  EXPECT_EQ(code_of([&] { (void)bilinear_sample(T::zeros({2, 2}), xy(0, 0)); }), ErrorCode::kShape);
}

TEST(PoolPyramid, ConstantLevelsConcatenateInOrder) {
  const View<double> v = constant_view({64, 128, 256}, 16);
  const T out = pool_pyramid(v, xy(6.3, 9.1));
  ASSERT_EQ(out.dim(1), 448u);
  for (std::size_t i = 0; i < 448; ++i) EXPECT_DOUBLE_EQ(out.data()[i], i < 64 ? 1.0 : i < 192 ? 2.0 : 3.0);
}

TEST(PoolPyramid, StrideScalesCoordinates) {
  View<double> v;
  v.camera.intrinsics.width = v.camera.intrinsics.height = 16;
  std::vector<double> ramp(8 * 8);
  for (std::size_t y = 0; y < 8; ++y)
    for (std::size_t x = 0; x < 8; ++x) ramp[y * 8 + x] = 100.0 * static_cast<double>(y) + static_cast<double>(x);
  v.pyramid = {T::zeros({1, 16, 16}), T({1, 8, 8}, ramp), T::zeros({1, 4, 4})};
  const std::array<std::size_t, 1> level{1};
  EXPECT_DOUBLE_EQ(pool_pyramid(v, xy(10, 6), level).item(), 305.0);
  // Beyond the level edge the coordinate clamps to the last cell.
  EXPECT_DOUBLE_EQ(pool_pyramid(v, xy(15, 15), level).item(), 707.0);
}

TEST(PoolPyramid, EmptyPyramidIsAnError) {
  View<double> v;
  EXPECT_EQ(code_of([&] { (void)pool_pyramid(v, xy(0, 0)); }), ErrorCode::kShape);
}

TEST(CrossViewStats, IdenticalAndSingleViews) {
  const T f({1, 3}, {0.5, -1.0, 2.0});
  const std::vector<double> expect{0.5, -1.0, 2.0, 0.5, -1.0, 2.0, 0.0, 0.0, 0.0};
  for (std::size_t k = 1; k <= 4; ++k) {
    const T out = cross_view_stats(std::vector<T>(k, f), std::vector<std::vector<std::uint8_t>>(k, {1}));
    for (std::size_t i = 0; i < 9; ++i) EXPECT_NEAR(out.data()[i], expect[i], 2e-6) << k << " views";
  }
}

TEST(CrossViewStats, TwoViewExample) {
  const T out = cross_view_stats<double>({T::filled({1, 4}, 0.0), T::filled({1, 4}, 2.0)}, {{1}, {1}});
  for (std::size_t i = 0; i < 4; ++i) {
    EXPECT_DOUBLE_EQ(out.data()[i], 1.0);
    EXPECT_DOUBLE_EQ(out.data()[4 + i], 2.0);
    EXPECT_NEAR(out.data()[8 + i], 1.0, 1e-12);
  }
}

TEST(CrossViewStats, InvalidViewsAreExcluded) {
  const T a({2, 1}, {1.0, 5.0}), b({2, 1}, {3.0, 7.0});
  const T out = cross_view_stats<double>({a, b}, {{1, 0}, {0, 0}});
  // node 0: only view a; node 1: no valid view.
  EXPECT_DOUBLE_EQ(out.data()[0], 1.0);
  EXPECT_DOUBLE_EQ(out.data()[1], 1.0);
  EXPECT_NEAR(out.data()[2], 0.0, 2e-6);
  for (std::size_t i = 3; i < 6; ++i) EXPECT_EQ(out.data()[i], 0.0);
}

TEST(CrossViewStats, ViewOrderAndMonotoneMax) {
  Rng rng(2);
  std::vector<T> views;
  std::vector<std::vector<std::uint8_t>> valid;
  for (int k = 0; k < 5; ++k) {
    views.push_back(random_tensor({6, 4}, rng));
    valid.push_back({1, 1, static_cast<std::uint8_t>(k % 2 == 0), 1, 0, 1});
  }
  const T base = cross_view_stats(views, valid);
  std::vector<std::size_t> perm(5);
  std::iota(perm.begin(), perm.end(), 0);
  while (std::next_permutation(perm.begin(), perm.end())) {
    std::vector<T> pv;
    std::vector<std::vector<std::uint8_t>> pm;
    for (const auto i : perm) {
      pv.push_back(views[i]);
      pm.push_back(valid[i]);
    }
    const T out = cross_view_stats(pv, pm);
    for (std::size_t i = 0; i < out.numel(); ++i) ASSERT_NEAR(out.data()[i], base.data()[i], 1e-12);
  }
  for (std::size_t k = 1; k < 5; ++k) {
    const T fewer = cross_view_stats(std::vector<T>(views.begin(), views.begin() + k),
                                     std::vector<std::vector<std::uint8_t>>(valid.begin(), valid.begin() + k));
    const T more = cross_view_stats(std::vector<T>(views.begin(), views.begin() + k + 1),
                                    std::vector<std::vector<std::uint8_t>>(valid.begin(), valid.begin() + k + 1));
    EXPECT_EQ(more.shape(), fewer.shape());
    for (std::size_t p = 0; p < 6; ++p)
      for (std::size_t c = 0; c < 4; ++c) {
        const std::size_t at = p * 12 + 4 + c;
        EXPECT_GE(more.data()[at], fewer.data()[at]);
        EXPECT_GE(more.data()[p * 12 + 8 + c], 0.0);
      }
  }
}

TEST(CrossViewStats, LengthMismatchIsAnError) {
  EXPECT_EQ(code_of([] { (void)cross_view_stats<double>({T::zeros({2, 3}), T::zeros({2, 4})}, {{1, 1}, {1, 1}}); }),
            ErrorCode::kShape);
  EXPECT_EQ(code_of([] { (void)cross_view_stats<double>({T::zeros({2, 3})}, {{1}}); }), ErrorCode::kShape);
  EXPECT_EQ(code_of([] { (void)cross_view_stats<double>({}, {}); }), ErrorCode::kShape);
}

TEST(NodeFeatures, Widths) {
  EXPECT_EQ(node_feature_width(std::array<std::size_t, 3>{64, 128, 256}), 1347u);
  EXPECT_EQ(node_feature_width(std::array<std::size_t, 3>{16, 32, 64}), 339u);
  const T out = assemble_node_features(T::zeros({1, 3 * 448}), T({1, 3}, {1, 2, 3}));
  ASSERT_EQ(out.dim(1), 1347u);
  EXPECT_EQ(out.data()[1344], 1.0);
  EXPECT_EQ(out.data()[1345], 2.0);
  EXPECT_EQ(out.data()[1346], 3.0);
}

TEST(NodeFeatures, WideChannelPoolingWidth) {
  const auto cams = p2mx::testing::ring_cameras(3, 16);
  std::vector<View<double>> views;
  for (const auto& c : cams) {
    View<double> v = constant_view({64, 128, 256}, 16);
    v.camera = c;
    views.push_back(v);
  }
  const T pts({2, 3}, {0, 0, 0, 0.05, 0.02, -0.03});
  const T f = pool_node_features(pts, views, kMdnLevels);
  EXPECT_EQ(f.shape(), (Shape{2, 1347}));
}

TEST(NodeFeatures, ViewCountsOneToFive) {
  for (std::size_t k = 1; k <= 5; ++k) {
    const auto cams = p2mx::testing::ring_cameras(k, 8);
    std::vector<View<double>> views;
    for (const auto& c : cams) {
      View<double> v = constant_view({2, 3, 4}, 8);
      v.camera = c;
      views.push_back(v);
    }
    EXPECT_EQ(pool_node_features(T::zeros({4, 3}), views, kMdnLevels).shape(), (Shape{4, 3 * 9 + 3}));
  }
}

TEST(Fmap, RoundTripIsExact) {
  Rng rng(3);
  std::vector<Tensor<float>> pyramid;
  for (const Shape& s : {Shape{4, 8, 6}, Shape{5, 4, 3}, Shape{6, 2, 2}}) {
    std::vector<float> v(shape_numel(s));
    for (auto& x : v) x = static_cast<float>(rng.normal());
    pyramid.emplace_back(s, v);
  }
  const auto dir = p2mx::testing::scratch_dir("pool_fmap");
  save_fmap(pyramid, dir / "v.fmap");
  const auto back = load_fmap(dir / "v.fmap");
  ASSERT_EQ(back.size(), 3u);
  for (std::size_t l = 0; l < 3; ++l) {
    EXPECT_EQ(back[l].shape(), pyramid[l].shape());
    for (std::size_t i = 0; i < pyramid[l].numel(); ++i) EXPECT_EQ(back[l].data()[i], pyramid[l].data()[i]);
  }
}

TEST(Fmap, BadFiles) {
  const auto dir = p2mx::testing::scratch_dir("pool_fmap_bad");
  {
    std::ofstream out(dir / "bad.fmap", std::ios::binary);
    out << "FMAX";
  }
  EXPECT_EQ(code_of([&] { (void)load_fmap(dir / "bad.fmap"); }), ErrorCode::kFormat);
  EXPECT_EQ(code_of([&] { (void)load_fmap(dir / "none.fmap"); }), ErrorCode::kIo);
}

TEST(ViewShapes, LevelExtentsAreChecked) {
  View<double> v = constant_view({2, 3, 4}, 8);
  EXPECT_NO_THROW(v.validate());
  v.pyramid[2] = T::zeros({4, 3, 3});
  EXPECT_EQ(code_of([&] { v.validate(); }), ErrorCode::kShape);
}
