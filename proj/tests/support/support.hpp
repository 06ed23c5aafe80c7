#pragma once

// Fixtures and reference implementations shared by the unit tests and the
// acceptance runner.

#include <filesystem>
#include <functional>
#include <optional>
#include <string>
#include <vector>

#include "p2mx/camera.hpp"
#include "p2mx/error.hpp"
#include "p2mx/losses.hpp"
#include "p2mx/mdn.hpp"
#include "p2mx/mesh.hpp"
#include "p2mx/pooling.hpp"
#include "p2mx/rng.hpp"
#include "p2mx/tensor.hpp"

namespace p2mx::testing {

Tensor<double> random_tensor(const Shape& shape, Rng& rng, double lo = -1.0, double hi = 1.0);

// Cameras on a horizontal ring looking at the origin.
std::vector<Camera> ring_cameras(std::size_t count, std::size_t image_size, double radius = 1.2,
                                 double height = 0.4);

// Level-1 icosphere of radius 0.1 seen by `views` ring cameras with random
// single-channel images.
struct MicroScene {
  Mesh mesh;
  std::vector<Camera> cameras;
  std::vector<Tensor<double>> images;  // [1, S, S]
};

MicroScene micro_scene(std::size_t views = 2, std::size_t image_size = 8, std::uint64_t seed = 7);

// Small double-precision model matching a MicroScene (one image channel).
ModelConfig micro_model_config();

// O(n*m) references.
double brute_chamfer(const std::vector<Vec3>& a, const std::vector<Vec3>& b);
FScore brute_f_score(const std::vector<Vec3>& pred, const std::vector<Vec3>& gt, double tau);

std::vector<Vec3> random_cloud(std::size_t n, Rng& rng, double extent = 1.0);

struct GradCase {
  std::string name;
  double error = 0.0;
};

// Finite-difference checks (64-bit) of every differentiable piece of the
// pipeline on small random instances.
std::vector<GradCase> gradient_suite(std::uint64_t seed = 11);

// Code of the p2mx::Error thrown by f, or nullopt when f returns normally.
inline std::optional<ErrorCode> code_of(const std::function<void()>& f) {
  try {
    f();
  } catch (const Error& e) {
    return e.code();
  }
  return std::nullopt;
}

// Fresh, empty directory under the system temp dir.
std::filesystem::path scratch_dir(const std::string& name);

}  // namespace p2mx::testing
