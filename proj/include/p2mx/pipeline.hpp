#pragma once

#include <cstdint>
#include <filesystem>
#include <functional>
#include <map>
#include <memory>
#include <string>
#include <vector>

#include "p2mx/camera.hpp"
#include "p2mx/losses.hpp"
#include "p2mx/mdn.hpp"
#include "p2mx/mesh.hpp"

namespace p2mx {

namespace fs = std::filesystem;

// ---- key = value files -------------------------------------------------------------

// Parses "key = value" lines; '#' starts a comment. Duplicate keys and
// malformed lines are errors.
std::map<std::string, std::string> parse_key_values(const std::string& text, const std::string& origin);

// ---- run configuration -------------------------------------------------------------

struct RunConfig {
  std::uint64_t seed = 1;
  fs::path dataset;
  std::string train_split = "train.txt";
  std::string test_split = "test.txt";
  fs::path output_dir = "run";
  fs::path resume;  // checkpoint to continue from; empty for a fresh run

  std::size_t epochs_phase1 = 30;
  std::size_t epochs_phase2 = 20;
  double epoch_scale = 1.0;
  std::size_t max_steps = 0;  // 0: run the whole schedule
  std::size_t checkpoint_every = 0;
  double lr_phase1 = 1e-4;
  double lr_phase2 = 1e-5;
  double weight_decay = 0.0;
  std::size_t views_per_step = 3;

  LossWeights loss;
  std::size_t resample_points = kResamplePoints;
  // Evenly strided subset of each ground-truth cloud used by the training
  // loss; 0 keeps every point.
  std::size_t train_gt_points = 10000;
  bool chamfer_squared = true;
  // Gaussian noise added to the coarse mesh before refinement in phase 2.
  double train_noise = 0.0;

  RefineConfig refine;
  ModelConfig model;

  void validate() const;
  std::size_t phase1_epochs() const;
  std::size_t phase2_epochs() const;
};

RunConfig parse_run_config(const std::string& text, const std::string& origin = "config");
RunConfig load_run_config(const fs::path& path);

// ---- images ---------------------------------------------------------------------------

struct GrayImage {
  std::size_t width = 0, height = 0;
  std::vector<std::uint8_t> pixels;  // row-major
};

void save_pgm(const GrayImage& image, const fs::path& path);
GrayImage load_pgm(const fs::path& path);

// [channels, H, W] in [0, 1], the gray value repeated per channel.
template <typename Real>
Tensor<Real> image_tensor(const GrayImage& image, std::size_t channels);

// Flat-shaded z-buffer render of a mesh; background 0.
GrayImage render_mesh(const Mesh& mesh, const Camera& camera, const Vec3& light_dir);

// ---- point cloud files ---------------------------------------------------------------

// "PCLD", u32 count, u8 has_normals, then little-endian f64 xyz (+ normal xyz).
void save_point_cloud(const PointCloud& cloud, const fs::path& path);
PointCloud load_point_cloud(const fs::path& path);

// ---- synthetic data --------------------------------------------------------------------

struct SynthSpec {
  std::size_t scenes = 4;
  std::vector<std::string> families{"box", "ellipsoid", "cylinder", "union"};
  double size_min = 0.07;  // half-extent range, world units
  double size_max = 0.14;
  std::size_t image_size = 64;
  std::size_t views = 3;
  double ring_radius = 1.2;
  double ring_height = 0.4;
  double focal = 0.0;  // pixels; 0 picks 1.6 * image_size
  std::size_t gt_points = 40000;
  std::size_t test_scenes = 0;

  void validate() const;
};

SynthSpec parse_synth_spec(const std::string& text, const std::string& origin = "spec");
SynthSpec load_synth_spec(const fs::path& path);

// Builds the target mesh for a family, half-extents drawn from the spec range.
Mesh synth_shape(const std::string& family, const SynthSpec& spec, Rng& rng);

// Writes scene_XXXX directories plus train/test split files. Returns the
// number of scenes written.
std::size_t synth_dataset(const SynthSpec& spec, const fs::path& out_dir, std::uint64_t seed);

// ---- scenes and datasets ---------------------------------------------------------------

struct Scene {
  std::string id;
  fs::path dir;
  std::string category;
  PointCloud gt_cloud;
  std::vector<Camera> cameras;
  std::vector<fs::path> inputs;  // per view: a .pgm image or a .fmap pyramid
};

inline constexpr const char* kSceneMesh = "mesh.obj";
inline constexpr const char* kSceneCloud = "cloud.pcl";
inline constexpr const char* kSceneCameras = "cameras.json";
inline constexpr const char* kSceneInfo = "scene.txt";

Scene load_scene(const fs::path& dir);

struct Dataset {
  fs::path root;
  std::vector<std::string> train, test;
};

std::vector<std::string> read_split(const fs::path& path);
// Reads both split files (either may be absent) and rejects overlapping ids.
Dataset load_dataset(const fs::path& root, const std::string& train_split = "train.txt",
                     const std::string& test_split = "test.txt");

// Views for the listed view indices of a scene. Images go through the model's
// backbone; precomputed pyramids are used as given.
template <typename Real>
std::vector<View<Real>> scene_views(const Model<Real>& model, const Scene& scene,
                                    const std::vector<std::size_t>& which);

// ---- checkpoints --------------------------------------------------------------------------

// Parameters plus the model shape ("model/*") and refinement settings ("refine/*").
void save_model_checkpoint(const fs::path& path, const Model<float>& model, const RefineConfig& refine,
                           const std::vector<NamedTensor>& extra = {});

struct LoadedModel {
  std::unique_ptr<Model<float>> model;
  RefineConfig refine;
  std::vector<NamedTensor> tensors;  // everything in the file
};

LoadedModel load_model_checkpoint(const fs::path& path);

// ---- training -------------------------------------------------------------------------------

struct StepRecord {
  std::size_t step = 0;
  int phase = 1;
  std::string scene_id;
  double total = 0.0, chamfer = 0.0, edge = 0.0, laplacian = 0.0, normal = 0.0;
};

struct TrainSummary {
  fs::path checkpoint;
  fs::path loss_curve;
  std::size_t first_step = 0;
  std::size_t steps = 0;  // steps run by this call
};

inline constexpr const char* kCheckpointFile = "model.ckpt";
inline constexpr const char* kLossCurveFile = "loss.csv";

// Loss terms are sums over every stage output (coarse blocks and refinement
// iterations). The CSV holds one row per step:
// step,total,chamfer,edge,laplacian,normal.
TrainSummary train(const RunConfig& config,
                   const std::function<void(const StepRecord&)>& on_step = {});

// ---- refinement and evaluation -----------------------------------------------------------

// Runs `iterations` refinement steps on an external mesh; returns one mesh
// per iteration (empty for zero iterations).
std::vector<Mesh> refine_mesh(const LoadedModel& loaded, const Mesh& mesh, const Scene& scene,
                              std::size_t iterations, std::size_t views = 0);

struct EvalRow {
  std::string scene_id;
  double cd = 0.0, f_tau = 0.0, f_2tau = 0.0, precision = 0.0, recall = 0.0;
  std::size_t n_pred = 0, n_gt = 0;
};

// Area-proportional resample of `mesh` (no vertices) scored against gt.
EvalRow evaluate_mesh(const std::string& scene_id, const Mesh& mesh, const PointCloud& gt,
                      const MetricConfig& metric, Rng& rng);

struct EvalOptions {
  MetricConfig metric;
  std::size_t views = 3;  // first K views of each scene
  std::string split = "test";  // "test", "train" or "all"
  std::uint64_t seed = 1;
};

// Coarse generation and refinement per scene, ordered by scene id.
std::vector<EvalRow> evaluate(const fs::path& checkpoint, const fs::path& dataset,
                              const EvalOptions& options);

// JSON array of the rows followed by a "mean" row.
void write_report(const std::vector<EvalRow>& rows, const fs::path& path);

}  // namespace p2mx
