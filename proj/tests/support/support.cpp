#include "support.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <numeric>

namespace p2mx::testing {

Tensor<double> random_tensor(const Shape& shape, Rng& rng, double lo, double hi) {
  std::vector<double> data(shape_numel(shape));
  for (auto& v : data) v = rng.uniform(lo, hi);
  return Tensor<double>(shape, std::move(data));
}

std::vector<Camera> ring_cameras(std::size_t count, std::size_t image_size, double radius, double height) {
  std::vector<Camera> cameras;
  for (std::size_t k = 0; k < count; ++k) {
    const double angle = 2.0 * M_PI * static_cast<double>(k) / static_cast<double>(count) + 0.3;
    Camera c;
    c.intrinsics.fx = c.intrinsics.fy = 1.6 * static_cast<double>(image_size);
    c.intrinsics.cx = c.intrinsics.cy = 0.5 * static_cast<double>(image_size) - 0.5;
    c.intrinsics.width = c.intrinsics.height = image_size;
    c.extrinsics = look_at({radius * std::cos(angle), height, radius * std::sin(angle)}, {0, 0, 0});
    cameras.push_back(c);
  }
  return cameras;
}

MicroScene micro_scene(std::size_t views, std::size_t image_size, std::uint64_t seed) {
  MicroScene scene;
  scene.mesh = ellipsoid({0.1, 0.1, 0.1}, 1);
  scene.cameras = ring_cameras(views, image_size);
  Rng rng(seed);
  for (std::size_t k = 0; k < views; ++k)
    scene.images.push_back(random_tensor({1, image_size, image_size}, rng, 0.0, 1.0));
  return scene;
}

ModelConfig micro_model_config() {
  ModelConfig config;
  config.backbone_channels = {2, 3, 4};
  config.image_channels = 1;
  config.coarse_hidden = 6;
  config.mdn_hidden = 6;
  config.coarse_level = 0;
  config.ellipsoid_radius = 0.1;
  config.seed = 3;
  return config;
}

namespace {

double sq(const Vec3& a, const Vec3& b) {
  const Vec3 d = a - b;
  return dot(d, d);
}

std::vector<double> nearest_sq(const std::vector<Vec3>& from, const std::vector<Vec3>& to) {
  std::vector<double> out;
  out.reserve(from.size());
  for (const auto& p : from) {
    double best = std::numeric_limits<double>::infinity();
    for (const auto& q : to) best = std::min(best, sq(p, q));
    out.push_back(best);
  }
  return out;
}

double mean_of(const std::vector<double>& v) {
  return std::accumulate(v.begin(), v.end(), 0.0) / static_cast<double>(v.size());
}

}  // namespace

double brute_chamfer(const std::vector<Vec3>& a, const std::vector<Vec3>& b) {
  return mean_of(nearest_sq(a, b)) + mean_of(nearest_sq(b, a));
}

FScore brute_f_score(const std::vector<Vec3>& pred, const std::vector<Vec3>& gt, double tau) {
  const auto d_pred = nearest_sq(pred, gt);
  const auto d_gt = nearest_sq(gt, pred);
  auto fraction = [](const std::vector<double>& d, double t) {
    return 100.0 * static_cast<double>(std::count_if(d.begin(), d.end(), [t](double x) { return x < t; })) /
           static_cast<double>(d.size());
  };
  auto harmonic = [](double p, double r) { return p + r > 0.0 ? 2.0 * p * r / (p + r) : 0.0; };
  FScore f;
  f.precision = fraction(d_pred, tau);
  f.recall = fraction(d_gt, tau);
  f.f_tau = harmonic(f.precision, f.recall);
  f.f_2tau = harmonic(fraction(d_pred, 2.0 * tau), fraction(d_gt, 2.0 * tau));
  return f;
}

std::vector<Vec3> random_cloud(std::size_t n, Rng& rng, double extent) {
  std::vector<Vec3> out(n);
  for (auto& p : out) p = {rng.uniform(-extent, extent), rng.uniform(-extent, extent), rng.uniform(-extent, extent)};
  return out;
}

namespace {

using T = Tensor<double>;

// Contracts an arbitrary output with fixed random weights so every output
// coordinate contributes to the checked gradient.
T contract(const T& out, std::uint64_t seed) {
  Rng rng(seed);
  const T w = random_tensor(out.shape(), rng);
  return sum_all(mul(out, w));
}

T to_points(const std::vector<Vec3>& pts) {
  std::vector<double> data;
  for (const auto& p : pts) data.insert(data.end(), p.begin(), p.end());
  return T({pts.size(), 3}, std::move(data));
}

}  // namespace

std::vector<GradCase> gradient_suite(std::uint64_t seed) {
  std::vector<GradCase> out;
  Rng rng(seed);
  auto check = [&](const std::string& name, const std::function<T()>& f, std::vector<T> params,
                   std::size_t max_coords = 0) {
    out.push_back({name, grad_check(f, std::move(params), GradCheckOptions{1e-5, max_coords})});
  };

  // ---- tensor ops
  {
    T a = random_tensor({3, 4}, rng), b = random_tensor({4, 5}, rng);
    check("matmul", [&] { return contract(matmul(a, b), 1); }, {a, b});
  }
  {
    T a = random_tensor({3, 4}, rng), b = random_tensor({3, 4}, rng);
    check("add", [&] { return contract(add(a, b), 2); }, {a, b});
    check("sub", [&] { return contract(sub(a, b), 3); }, {a, b});
    check("mul", [&] { return contract(mul(a, b), 4); }, {a, b});
    check("scale", [&] { return contract(scale(a, -1.7), 5); }, {a});
    check("square", [&] { return contract(square(a), 6); }, {a});
    check("relu", [&] { return contract(relu(a), 7); }, {a});
    check("softmax", [&] { return contract(softmax(a), 8); }, {a});
    for (std::size_t axis = 0; axis < 2; ++axis) {
      const std::string s = std::to_string(axis);
      check("sum/axis" + s, [&] { return contract(sum(a, axis), 9); }, {a});
      check("mean/axis" + s, [&] { return contract(mean(a, axis), 10); }, {a});
      check("max/axis" + s, [&] { return contract(max(a, axis), 11); }, {a});
      check("min/axis" + s, [&] { return contract(min(a, axis), 12); }, {a});
      check("concat/axis" + s, [&] { return contract(concat<double>({a, b}, axis), 13); }, {a, b});
    }
    check("sum_all", [&] { return scale(sum_all(mul(a, a)), 0.5); }, {a});
    check("mean_all", [&] { return mean_all(mul(a, b)); }, {a, b});
    check("reshape", [&] { return contract(reshape(a, {2, 6}), 14); }, {a});
  }
  {
    T a = random_tensor({5, 3}, rng, 0.2, 2.0);
    check("sqrt", [&] { return contract(sqrt(a), 15); }, {a});
  }
  {
    T x = random_tensor({4, 3}, rng), bias = random_tensor({3}, rng), w = random_tensor({4}, rng);
    check("add_bias", [&] { return contract(add_bias(x, bias), 16); }, {x, bias});
    check("scale_rows", [&] { return contract(scale_rows(x, w), 17); }, {x, w});
    const std::vector<Index> rows{2, 0, 2, 3};
    check("gather_rows", [&] { return contract(gather_rows(x, std::span<const Index>(rows)), 18); }, {x});
  }
  {
    T a = random_tensor({5, 3}, rng), b = random_tensor({4, 3}, rng);
    check("sq_dist", [&] { return contract(sq_dist(a, b), 19); }, {a, b});
  }
  {
    T x = random_tensor({5, 3}, rng);
    const Adjacency graph(5, {{0, 1}, {1, 2}, {2, 3}, {0, 3}});  // node 4 isolated
    check("neighbor_mean", [&] { return contract(neighbor_mean(x, graph), 20); }, {x});
  }
  {
    T x = random_tensor({2, 6, 6}, rng), w = random_tensor({3, 2, 3, 3}, rng), b = random_tensor({3}, rng);
    check("conv2d/stride1", [&] { return contract(conv2d(x, w, b, 1, 1), 21); }, {x, w, b});
    check("conv2d/stride2", [&] { return contract(conv2d(x, w, b, 2, 1), 22); }, {x, w, b});
    check("conv2d+relu+mean", [&] { return mean_all(relu(conv2d(x, w, b, 1, 1))); }, {x, w, b});
    check("max_pool2", [&] { return contract(max_pool2(x), 23); }, {x});
  }

  // ---- camera and pooling
  const MicroScene scene = micro_scene(2, 8);
  {
    T pts = scale(random_tensor({6, 3}, rng), 0.1).detach();
    check("project_points", [&] { return contract(project_points(pts, scene.cameras[0]).xy, 24); }, {pts});
  }
  {
    T map = random_tensor({3, 5, 6}, rng), xy = random_tensor({7, 2}, rng, 0.1, 3.9);
    check("bilinear_sample", [&] { return contract(bilinear_sample(map, xy), 25); }, {map, xy});
  }
  {
    View<double> view;
    view.camera = scene.cameras[0];
    view.pyramid = {random_tensor({2, 8, 8}, rng), random_tensor({3, 4, 4}, rng), random_tensor({2, 2, 2}, rng)};
    T xy = random_tensor({5, 2}, rng, 0.2, 6.8);
    check("pool_pyramid", [&] { return contract(pool_pyramid(view, xy), 26); }, {view.pyramid[0], view.pyramid[1], view.pyramid[2], xy});
  }
  {
    std::vector<T> per_view{random_tensor({4, 3}, rng), random_tensor({4, 3}, rng), random_tensor({4, 3}, rng)};
    const std::vector<std::vector<std::uint8_t>> valid{{1, 1, 0, 1}, {1, 0, 0, 1}, {1, 1, 0, 0}};
    check("cross_view_stats", [&] { return contract(cross_view_stats(per_view, valid), 27); }, per_view);
  }

  // ---- network pieces
  {
    ParameterSet<double> params;
    Rng init(5);
    GraphConv<double> conv(params, "g", 4, 3, init);
    T x = random_tensor({5, 4}, rng);
    const Adjacency graph(5, {{0, 1}, {1, 2}, {2, 3}, {3, 4}, {4, 0}});
    auto ps = params.tensors();
    ps.push_back(x);
    check("graph_conv", [&] { return contract(conv.forward(x, graph, true), 28); }, ps);
  }
  {
    ParameterSet<double> params;
    Rng init(6);
    Backbone<double> backbone(params, "backbone", 3, {2, 3, 4}, init);
    T image = random_tensor({3, 8, 8}, rng, 0.0, 1.0);
    check("backbone/image", [&] {
      const auto pyr = backbone.forward(image);
      return add(add(contract(pyr[0], 29), contract(pyr[1], 30)), contract(pyr[2], 31));
    }, {image});
  }
  {
    ParameterSet<double> params;
    Rng init(8);
    GraphResNet<double> scorer(params, "mdn/scorer", 7, 6, 1, init);
    T features = random_tensor({2 * kFanNodes, 7}, rng);
    auto ps = params.tensors();
    ps.push_back(features);
    check("scoring_network", [&] { return contract(score_hypotheses(scorer, features, 2), 32); }, ps, 24);
  }
  {
    T vertices = scale(random_tensor({3, 3}, rng), 0.1).detach();
    T logits = random_tensor({3, kFanNodes}, rng);
    check("deformation_reasoning", [&] {
      return contract(deformation_reasoning(fan_positions(vertices, 0.02), softmax(logits)), 33);
    }, {vertices, logits});
  }

  // ---- losses
  {
    T a = random_tensor({9, 3}, rng), b = random_tensor({7, 3}, rng);
    check("chamfer/squared", [&] { return chamfer(a, b, true); }, {a, b});
    check("chamfer/unsquared", [&] { return chamfer(a, b, false); }, {a, b});
  }
  {
    const Mesh mesh = ellipsoid({0.3, 0.2, 0.25}, 1);
    Rng draw(9);
    const SurfaceSamples samples = draw_surface_samples(mesh, 50, draw);
    T v = mesh.vertex_tensor<double>();
    check("resample_points", [&] { return contract(resample_points(v, mesh, samples, true), 34); }, {v});

    Rng gt_rng(10);
    PointCloud with_normals = resample_mesh(ellipsoid({0.28, 0.22, 0.2}, 2), 200, gt_rng, false);
    for (const auto& p : with_normals.points) with_normals.normals.push_back(normalized(p));
    const GroundTruth gt(with_normals);
    const std::vector<Vec3> start = mesh.vertices();
    T moved = add(mesh.vertex_tensor<double>(), scale(random_tensor({mesh.num_vertices(), 3}, rng), 0.01)).detach();
    check("aux/edge", [&] { return aux_losses(moved, mesh, start, gt).edge; }, {moved});
    check("aux/laplacian", [&] { return aux_losses(moved, mesh, start, gt).laplacian; }, {moved});
    check("aux/normal", [&] { return aux_losses(moved, mesh, start, gt).normal; }, {moved});
  }

  // ---- end to end: re-sampled Chamfer after refinement w.r.t. the scorer
  {
    Model<double> model(micro_model_config());
    const auto views = model.make_views(scene.images, scene.cameras);
    std::vector<View<double>> fixed = views;
    for (auto& v : fixed)
      for (auto& level : v.pyramid) level = level.detach();
    const Mesh& mesh = scene.mesh;
    Rng draw(12);
    const SurfaceSamples samples = draw_surface_samples(mesh, 60, draw);
    Rng gt_rng(13);
    const T gt = to_points(resample_mesh(ellipsoid({0.12, 0.08, 0.1}, 2), 150, gt_rng, true).points);
    const T start = mesh.vertex_tensor<double>();
    RefineConfig refine;
    refine.iterations = 2;
    check("end_to_end/scorer", [&] {
      const auto stages = mdn_refine(start, mesh, fixed, model.scorer(), refine);
      return chamfer(resample_points(stages.back().vertices, mesh, samples, true), gt, true);
    }, model.params().tensors("mdn/"), 6);
  }
  return out;
}

std::filesystem::path scratch_dir(const std::string& name) {
  namespace fs = std::filesystem;
  const fs::path dir = fs::temp_directory_path() / ("p2mx_" + name);
  fs::remove_all(dir);
  fs::create_directories(dir);
  return dir;
}

}  // namespace p2mx::testing
