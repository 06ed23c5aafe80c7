#include "p2mx/pooling.hpp"

#include <algorithm>
#include <bit>
#include <cmath>
#include <cstring>
#include <fstream>
#include <numeric>

#include "p2mx/error.hpp"

namespace p2mx {

template <typename Real>
void View<Real>::validate() const {
  if (pyramid.empty()) fail(ErrorCode::kShape, "view: empty feature pyramid");
  if (strides.size() != pyramid.size())
    fail(ErrorCode::kShape, "view: " + std::to_string(pyramid.size()) + " levels but " +
                                std::to_string(strides.size()) + " strides");
  const auto& k = camera.intrinsics;
  for (std::size_t l = 0; l < pyramid.size(); ++l) {
    const auto& m = pyramid[l];
    const std::size_t h = (k.height + strides[l] - 1) / strides[l];
    const std::size_t w = (k.width + strides[l] - 1) / strides[l];
    if (m.rank() != 3 || m.dim(1) != h || m.dim(2) != w)
      fail(ErrorCode::kShape, "view: level " + std::to_string(l) + " has shape " +
                                  shape_str(m.shape()) + ", expected [C," + std::to_string(h) +
                                  "," + std::to_string(w) + "]");
  }
}

namespace {

// Samples `map` at xy * inv_stride. With clamp, coordinates are clamped to
// the map and clamped axes get zero coordinate gradient; without, anything
// outside the map is rejected.
template <typename Real>
Tensor<Real> sample_map(const Tensor<Real>& map, const Tensor<Real>& xy, double inv_stride,
                        bool clamp) {
  if (map.rank() != 3)
    fail(ErrorCode::kShape, "bilinear_sample: map must be [C,H,W], got " + shape_str(map.shape()));
  if (xy.rank() != 2 || xy.dim(1) != 2)
    fail(ErrorCode::kShape, "bilinear_sample: coordinates must be [P,2], got " + shape_str(xy.shape()));
  const std::size_t c = map.dim(0), h = map.dim(1), w = map.dim(2), n = xy.dim(0);
  const double xmax = double(w) - 1.0, ymax = double(h) - 1.0;
  auto mv = map.data();
  auto cv = xy.data();

  struct Cell {
    std::size_t x0, x1, y0, y1;
    double fx, fy;
    bool free_x, free_y;
  };
  std::vector<Cell> cells(n);
  std::vector<Real> out(n * c);
  for (std::size_t i = 0; i < n; ++i) {
    double u = double(cv[2 * i]) * inv_stride, v = double(cv[2 * i + 1]) * inv_stride;
    Cell cell{};
    cell.free_x = cell.free_y = true;
    if (clamp) {
      if (!(u > 0.0 && u < xmax)) cell.free_x = false;
      if (!(v > 0.0 && v < ymax)) cell.free_y = false;
      u = std::clamp(u, 0.0, xmax);
      v = std::clamp(v, 0.0, ymax);
    } else if (!(u >= 0.0 && u <= xmax && v >= 0.0 && v <= ymax)) {
      fail(ErrorCode::kDomain, "bilinear_sample: (" + std::to_string(u) + ", " + std::to_string(v) +
                                   ") outside " + shape_str(map.shape()));
    }
    cell.x0 = w > 1 ? std::min(static_cast<std::size_t>(u), w - 2) : 0;
    cell.y0 = h > 1 ? std::min(static_cast<std::size_t>(v), h - 2) : 0;
    cell.x1 = std::min(cell.x0 + 1, w - 1);
    cell.y1 = std::min(cell.y0 + 1, h - 1);
    cell.fx = u - double(cell.x0);
    cell.fy = v - double(cell.y0);
    cells[i] = cell;
  }
  // Channel-last copy so the four taps of a point read contiguous rows.
  const std::size_t plane = h * w;
  std::vector<Real> hwc(plane * c);
  for (std::size_t ch = 0; ch < c; ++ch)
    for (std::size_t q = 0; q < plane; ++q) hwc[q * c + ch] = mv[ch * plane + q];
  for (std::size_t i = 0; i < n; ++i) {
    const Cell& cell = cells[i];
    const Real w00 = static_cast<Real>((1 - cell.fx) * (1 - cell.fy));
    const Real w01 = static_cast<Real>(cell.fx * (1 - cell.fy));
    const Real w10 = static_cast<Real>((1 - cell.fx) * cell.fy);
    const Real w11 = static_cast<Real>(cell.fx * cell.fy);
    const Real* t00 = &hwc[(cell.y0 * w + cell.x0) * c];
    const Real* t01 = &hwc[(cell.y0 * w + cell.x1) * c];
    const Real* t10 = &hwc[(cell.y1 * w + cell.x0) * c];
    const Real* t11 = &hwc[(cell.y1 * w + cell.x1) * c];
    Real* o = &out[i * c];
    for (std::size_t ch = 0; ch < c; ++ch) o[ch] = w00 * t00[ch] + w01 * t01[ch] + w10 * t10[ch] + w11 * t11[ch];
  }
  Tensor<Real> y({n, c}, std::move(out));
  record_op<Real>(OpKind::kBilinear, {map, xy}, y,
                  [map, xy, c, h, w, inv_stride, cells = std::move(cells),
                   hwc = std::move(hwc)](std::span<const Real> g) mutable {
                    const std::size_t plane = h * w;
                    const bool want_map = map.requires_grad(), want_xy = xy.requires_grad();
                    std::vector<Real> gm_hwc(want_map ? plane * c : 0, Real(0));
                    std::span<Real> gc;
                    if (want_xy) gc = xy.grad_buffer();
                    for (std::size_t i = 0; i < cells.size(); ++i) {
                      const Cell& cell = cells[i];
                      const Real fx = static_cast<Real>(cell.fx), fy = static_cast<Real>(cell.fy);
                      const std::size_t o00 = (cell.y0 * w + cell.x0) * c, o01 = (cell.y0 * w + cell.x1) * c;
                      const std::size_t o10 = (cell.y1 * w + cell.x0) * c, o11 = (cell.y1 * w + cell.x1) * c;
                      const Real* gi = &g[i * c];
                      if (want_map) {
                        const Real w00 = (1 - fx) * (1 - fy), w01 = fx * (1 - fy);
                        const Real w10 = (1 - fx) * fy, w11 = fx * fy;
                        for (std::size_t ch = 0; ch < c; ++ch) {
                          gm_hwc[o00 + ch] += gi[ch] * w00;
                          gm_hwc[o01 + ch] += gi[ch] * w01;
                          gm_hwc[o10 + ch] += gi[ch] * w10;
                          gm_hwc[o11 + ch] += gi[ch] * w11;
                        }
                      }
                      if (want_xy && (cell.free_x || cell.free_y)) {
                        double du = 0.0, dv = 0.0;
                        for (std::size_t ch = 0; ch < c; ++ch) {
                          const double m00 = hwc[o00 + ch], m01 = hwc[o01 + ch];
                          const double m10 = hwc[o10 + ch], m11 = hwc[o11 + ch];
                          du += gi[ch] * ((1 - cell.fy) * (m01 - m00) + cell.fy * (m11 - m10));
                          dv += gi[ch] * ((1 - cell.fx) * (m10 - m00) + cell.fx * (m11 - m01));
                        }
                        if (cell.free_x) gc[2 * i] += static_cast<Real>(du * inv_stride);
                        if (cell.free_y) gc[2 * i + 1] += static_cast<Real>(dv * inv_stride);
                      }
                    }
                    if (want_map) {
                      auto gm = map.grad_buffer();
                      for (std::size_t ch = 0; ch < c; ++ch)
                        for (std::size_t q = 0; q < plane; ++q) gm[ch * plane + q] += gm_hwc[q * c + ch];
                    }
                  });
  return y;
}

}  // namespace

template <typename Real>
Tensor<Real> bilinear_sample(const Tensor<Real>& map, const Tensor<Real>& xy) {
  return sample_map(map, xy, 1.0, false);
}

template <typename Real>
Tensor<Real> pool_pyramid(const View<Real>& view, const Tensor<Real>& xy,
                          std::span<const std::size_t> levels) {
  if (view.pyramid.empty()) fail(ErrorCode::kShape, "pool_pyramid: empty pyramid");
  if (levels.empty()) fail(ErrorCode::kShape, "pool_pyramid: no levels selected");
  std::vector<Tensor<Real>> parts;
  for (const std::size_t l : levels) {
    if (l >= view.pyramid.size())
      fail(ErrorCode::kShape, "pool_pyramid: level " + std::to_string(l) + " of " +
                                  std::to_string(view.pyramid.size()));
    parts.push_back(sample_map(view.pyramid[l], xy, 1.0 / double(view.strides[l]), true));
  }
  return parts.size() == 1 ? parts.front() : concat(parts, 1);
}

template <typename Real>
Tensor<Real> pool_pyramid(const View<Real>& view, const Tensor<Real>& xy) {
  std::vector<std::size_t> all(view.pyramid.size());
  std::iota(all.begin(), all.end(), std::size_t{0});
  return pool_pyramid(view, xy, std::span<const std::size_t>(all));
}

template <typename Real>
Tensor<Real> cross_view_stats(const std::vector<Tensor<Real>>& per_view,
                              const std::vector<std::vector<std::uint8_t>>& valid) {
  if (per_view.empty()) fail(ErrorCode::kShape, "cross_view_stats: no views");
  if (valid.size() != per_view.size())
    fail(ErrorCode::kShape, "cross_view_stats: " + std::to_string(per_view.size()) +
                                " views but " + std::to_string(valid.size()) + " masks");
  const Shape& shape = per_view.front().shape();
  if (shape.size() != 2) fail(ErrorCode::kShape, "cross_view_stats: views must be [P,C], got " + shape_str(shape));
  const std::size_t p = shape[0], c = shape[1], k = per_view.size();
  for (std::size_t v = 0; v < k; ++v) {
    if (per_view[v].shape() != shape)
      fail(ErrorCode::kShape, "cross_view_stats: length mismatch " + shape_str(shape) + " vs " +
                                  shape_str(per_view[v].shape()));
    if (valid[v].size() != p)
      fail(ErrorCode::kShape, "cross_view_stats: mask of view " + std::to_string(v) + " has " +
                                  std::to_string(valid[v].size()) + " entries, expected " + std::to_string(p));
  }

  std::vector<Real> out(p * 3 * c, Real(0));
  std::vector<std::uint32_t> argmax(p * c, 0);
  std::vector<double> means(p * c, 0.0), stds(p * c, 0.0);
  std::vector<std::uint32_t> counts(p, 0);
  for (std::size_t i = 0; i < p; ++i) {
    for (std::size_t v = 0; v < k; ++v) counts[i] += valid[v][i] ? 1 : 0;
    if (counts[i] == 0) continue;
    const double inv = 1.0 / double(counts[i]);
    for (std::size_t ch = 0; ch < c; ++ch) {
      double total = 0.0;
      bool first = true;
      double best = 0.0;
      std::uint32_t best_view = 0;
      for (std::size_t v = 0; v < k; ++v) {
        if (!valid[v][i]) continue;
        const double f = per_view[v].data()[i * c + ch];
        total += f;
        if (first || f > best) {
          best = f;
          best_view = static_cast<std::uint32_t>(v);
          first = false;
        }
      }
      const double mu = total * inv;
      double var = 0.0;
      for (std::size_t v = 0; v < k; ++v) {
        if (!valid[v][i]) continue;
        const double d = per_view[v].data()[i * c + ch] - mu;
        var += d * d;
      }
      const double sd = std::sqrt(var * inv + kStdEpsilon);
      means[i * c + ch] = mu;
      stds[i * c + ch] = sd;
      argmax[i * c + ch] = best_view;
      out[i * 3 * c + ch] = static_cast<Real>(mu);
      out[i * 3 * c + c + ch] = static_cast<Real>(best);
      out[i * 3 * c + 2 * c + ch] = static_cast<Real>(sd);
    }
  }
  Tensor<Real> y({p, 3 * c}, std::move(out));
  record_op<Real>(OpKind::kCrossViewStats, per_view, y,
                  [per_view, valid, p, c, k, counts = std::move(counts), means = std::move(means),
                   stds = std::move(stds), argmax = std::move(argmax)](std::span<const Real> g) mutable {
                    for (std::size_t v = 0; v < k; ++v) {
                      if (!per_view[v].requires_grad()) continue;
                      auto gv = per_view[v].grad_buffer();
                      auto fv = per_view[v].data();
                      for (std::size_t i = 0; i < p; ++i) {
                        if (!valid[v][i]) continue;
                        const double inv = 1.0 / double(counts[i]);
                        for (std::size_t ch = 0; ch < c; ++ch) {
                          const std::size_t s = i * c + ch;
                          double d = g[i * 3 * c + ch] * inv;
                          if (argmax[s] == v) d += g[i * 3 * c + c + ch];
                          d += g[i * 3 * c + 2 * c + ch] * (fv[s] - means[s]) * inv / stds[s];
                          gv[s] += static_cast<Real>(d);
                        }
                      }
                    }
                  });
  return y;
}

template <typename Real>
Tensor<Real> assemble_node_features(const Tensor<Real>& stats, const Tensor<Real>& coords) {
  if (stats.rank() != 2 || coords.rank() != 2 || coords.dim(1) != 3 || coords.dim(0) != stats.dim(0))
    fail(ErrorCode::kShape, "assemble_node_features: stats " + shape_str(stats.shape()) +
                                " with coords " + shape_str(coords.shape()));
  return concat<Real>({stats, coords}, 1);
}

template <typename Real>
Tensor<Real> pool_node_features(const Tensor<Real>& points, const std::vector<View<Real>>& views,
                                std::span<const std::size_t> levels) {
  if (views.empty()) fail(ErrorCode::kShape, "pool_node_features: at least one view required");
  std::vector<Tensor<Real>> pooled;
  std::vector<std::vector<std::uint8_t>> masks;
  for (const auto& view : views) {
    ProjectedPoints<Real> proj = project_points(points, view.camera);
    pooled.push_back(pool_pyramid(view, proj.xy, levels));
    masks.push_back(std::move(proj.valid));
  }
  return assemble_node_features(cross_view_stats(pooled, masks), points);
}

std::size_t node_feature_width(std::span<const std::size_t> channels) {
  return 3 * std::accumulate(channels.begin(), channels.end(), std::size_t{0}) + 3;
}

// ---- FMAP -----------------------------------------------------------------------

namespace {

static_assert(std::endian::native == std::endian::little, "FMAP I/O assumes little-endian host");

std::uint32_t read_u32(std::ifstream& in, const std::filesystem::path& path) {
  std::uint32_t v = 0;
  in.read(reinterpret_cast<char*>(&v), 4);
  if (!in) fail(ErrorCode::kFormat, "FMAP truncated: " + path.string());
  return v;
}

void write_u32(std::ofstream& out, std::uint32_t v) { out.write(reinterpret_cast<const char*>(&v), 4); }

}  // namespace

void save_fmap(const std::vector<Tensor<float>>& pyramid, const std::filesystem::path& path) {
  std::ofstream out(path, std::ios::binary);
  if (!out) fail(ErrorCode::kIo, "cannot write " + path.string());
  out.write("FMAP", 4);
  write_u32(out, static_cast<std::uint32_t>(pyramid.size()));
  for (const auto& level : pyramid) {
    if (level.rank() != 3) fail(ErrorCode::kShape, "FMAP levels must be [C,H,W]");
    for (const std::size_t e : level.shape()) write_u32(out, static_cast<std::uint32_t>(e));
    out.write(reinterpret_cast<const char*>(level.data().data()),
              static_cast<std::streamsize>(level.numel() * sizeof(float)));
  }
  if (!out) fail(ErrorCode::kIo, "failed writing " + path.string());
}

std::vector<Tensor<float>> load_fmap(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) fail(ErrorCode::kIo, "cannot open " + path.string());
  char magic[4];
  in.read(magic, 4);
  if (!in || std::memcmp(magic, "FMAP", 4) != 0) fail(ErrorCode::kFormat, "not an FMAP file: " + path.string());
  const std::uint32_t levels = read_u32(in, path);
  std::vector<Tensor<float>> out;
  for (std::uint32_t l = 0; l < levels; ++l) {
    Shape shape{read_u32(in, path), read_u32(in, path), read_u32(in, path)};
    std::vector<float> values(shape_numel(shape));
    in.read(reinterpret_cast<char*>(values.data()), static_cast<std::streamsize>(values.size() * 4));
    if (!in) fail(ErrorCode::kFormat, "FMAP truncated: " + path.string());
    out.emplace_back(std::move(shape), std::move(values));
  }
  return out;
}

#define P2MX_INSTANTIATE(Real)                                                                   \
  template struct View<Real>;                                                                    \
  template Tensor<Real> bilinear_sample<Real>(const Tensor<Real>&, const Tensor<Real>&);         \
  template Tensor<Real> pool_pyramid<Real>(const View<Real>&, const Tensor<Real>&,               \
                                           std::span<const std::size_t>);                        \
  template Tensor<Real> pool_pyramid<Real>(const View<Real>&, const Tensor<Real>&);              \
  template Tensor<Real> cross_view_stats<Real>(const std::vector<Tensor<Real>>&,                 \
                                               const std::vector<std::vector<std::uint8_t>>&);   \
  template Tensor<Real> assemble_node_features<Real>(const Tensor<Real>&, const Tensor<Real>&);  \
  template Tensor<Real> pool_node_features<Real>(const Tensor<Real>&, const std::vector<View<Real>>&, \
                                                 std::span<const std::size_t>);

P2MX_INSTANTIATE(float)
P2MX_INSTANTIATE(double)

#undef P2MX_INSTANTIATE

}  // namespace p2mx
