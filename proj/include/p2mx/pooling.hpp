#pragma once

#include <array>
#include <cstdint>
#include <filesystem>
#include <span>
#include <vector>

#include "p2mx/camera.hpp"
#include "p2mx/tensor.hpp"

namespace p2mx {

inline constexpr std::array<std::size_t, 3> kPyramidStrides{1, 2, 4};

// One posed input: camera plus its feature pyramid, level l being
// [C_l, ceil(height / s_l), ceil(width / s_l)].
template <typename Real>
struct View {
  Camera camera;
  std::vector<Tensor<Real>> pyramid;
  std::vector<std::size_t> strides{kPyramidStrides.begin(), kPyramidStrides.end()};

  void validate() const;
};

// map [C, H, W], xy [P, 2] in map coordinates within [0, W-1] x [0, H-1].
// Returns [P, C]. Coordinates outside the map are a caller error.
template <typename Real>
Tensor<Real> bilinear_sample(const Tensor<Real>& map, const Tensor<Real>& xy);

// Samples the selected pyramid levels at image coordinates xy [P, 2]
// (level coordinate = image coordinate / stride, clamped to the level) and
// concatenates the levels in pyramid order: [P, sum C_l].
template <typename Real>
Tensor<Real> pool_pyramid(const View<Real>& view, const Tensor<Real>& xy,
                          std::span<const std::size_t> levels);
template <typename Real>
Tensor<Real> pool_pyramid(const View<Real>& view, const Tensor<Real>& xy);

// per_view[k] is [P, C]; valid[k][p] marks whether node p projected into view k.
// Returns [P, 3C] = mean | max | std over the valid views of each node
// (population std, sqrt(var + 1e-12)); all zeros for nodes with no valid view.
template <typename Real>
Tensor<Real> cross_view_stats(const std::vector<Tensor<Real>>& per_view,
                              const std::vector<std::vector<std::uint8_t>>& valid);

inline constexpr double kStdEpsilon = 1e-12;

// stats [P, 3C] | coords [P, 3]
template <typename Real>
Tensor<Real> assemble_node_features(const Tensor<Real>& stats, const Tensor<Real>& coords);

// Projects points [P, 3] into every view, pools the selected levels and
// assembles node features [P, 3 * sum C_l + 3].
template <typename Real>
Tensor<Real> pool_node_features(const Tensor<Real>& points, const std::vector<View<Real>>& views,
                                std::span<const std::size_t> levels);

std::size_t node_feature_width(std::span<const std::size_t> channels);

// FMAP: "FMAP", u32 level count, per level u32 C, H, W then C*H*W
// little-endian f32 in [C][H][W] order.
void save_fmap(const std::vector<Tensor<float>>& pyramid, const std::filesystem::path& path);
std::vector<Tensor<float>> load_fmap(const std::filesystem::path& path);

}  // namespace p2mx
