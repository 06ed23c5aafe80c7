#pragma once

#include <array>
#include <cstdint>
#include <span>
#include <string>
#include <vector>

#include "p2mx/camera.hpp"
#include "p2mx/mesh.hpp"
#include "p2mx/params.hpp"
#include "p2mx/pooling.hpp"
#include "p2mx/tensor.hpp"

namespace p2mx {

// out_p = act(W_self^T f_p + W_neigh^T mean_{q in N(p)} f_q + bias)
template <typename Real>
class GraphConv {
 public:
  GraphConv(ParameterSet<Real>& params, const std::string& prefix, std::size_t in,
            std::size_t out, Rng& rng);

  Tensor<Real> forward(const Tensor<Real>& x, const Adjacency& graph, bool activate) const;

  const Tensor<Real>& w_self() const { return w_self_; }
  const Tensor<Real>& w_neigh() const { return w_neigh_; }
  const Tensor<Real>& bias() const { return bias_; }

 private:
  Tensor<Real> w_self_, w_neigh_, bias_;
};

// Six graph convolutions in -> hidden -> ... -> out with additive skips
// (conv2 + conv3) and (conv4 + conv5); ReLU on all but the last. The last
// layer's initial weights are multiplied by output_gain.
template <typename Real>
class GraphResNet {
 public:
  GraphResNet(ParameterSet<Real>& params, const std::string& prefix, std::size_t in,
              std::size_t hidden, std::size_t out, Rng& rng, double output_gain = 1.0);

  Tensor<Real> forward(const Tensor<Real>& x, const Adjacency& graph) const;

  std::size_t in_width() const { return in_; }
  std::size_t out_width() const { return out_; }

 private:
  std::size_t in_, out_;
  std::vector<GraphConv<Real>> layers_;
};

// Stand-in feature extractor: two 3x3 conv + ReLU per level, 2x2 max-pool
// between levels, giving strides 1, 2, 4.
template <typename Real>
class Backbone {
 public:
  Backbone(ParameterSet<Real>& params, const std::string& prefix, std::size_t in_channels,
           std::array<std::size_t, 3> channels, Rng& rng);

  // image [in_channels, H, W] with H, W divisible by 4.
  std::vector<Tensor<Real>> forward(const Tensor<Real>& image) const;

  const std::array<std::size_t, 3>& channels() const { return channels_; }
  std::size_t in_channels() const { return in_channels_; }

 private:
  struct Conv {
    Tensor<Real> weight, bias;
  };
  std::size_t in_channels_;
  std::array<std::size_t, 3> channels_;
  std::vector<Conv> convs_;
};

// One deformation step's output: new positions on a topology, plus the
// positions it started from (for the Laplacian regulariser).
template <typename Real>
struct StageOutput {
  Tensor<Real> vertices;
  Mesh topology;
  std::vector<Vec3> start;
};

// Offsets of the 43 fan nodes (center first) scaled by `scale`, stacked per
// vertex: [N * 43, 3].
template <typename Real>
Tensor<Real> fan_positions(const Tensor<Real>& vertices, double scale);

// Scores for every fan: features [N * 43, D] -> softmax over each fan's 43
// logits, [N, 43].
template <typename Real>
Tensor<Real> score_hypotheses(const GraphResNet<Real>& scorer, const Tensor<Real>& features,
                              std::size_t num_fans);

// Soft-argmax: sum_i s_i h_i per fan. positions [N * 43, 3], scores [N, 43].
template <typename Real>
Tensor<Real> deformation_reasoning(const Tensor<Real>& positions, const Tensor<Real>& scores);

// Single-fan forms.
template <typename Real>
Tensor<Real> score_hypotheses(const GraphResNet<Real>& scorer, const HypothesisFan& fan,
                              const Tensor<Real>& node_features);
Vec3 deformation_reasoning(const HypothesisFan& fan, std::span<const double> scores);

struct RefineConfig {
  std::size_t iterations = 3;
  // Hypothesis scale per iteration; the last entry repeats.
  std::vector<double> scales{0.02};

  double scale_at(std::size_t iteration) const;
  void validate() const;
};

inline constexpr std::array<std::size_t, 3> kMdnLevels{0, 1, 2};
inline constexpr std::array<std::size_t, 2> kCoarseLevels{1, 2};

// Iterative refinement. Each iteration re-centres fans on the current
// vertices, pools node features from every view, scores and moves all
// vertices at once. Returns one StageOutput per iteration.
template <typename Real>
std::vector<StageOutput<Real>> mdn_refine(const Tensor<Real>& vertices, const Mesh& topology,
                                          const std::vector<View<Real>>& views,
                                          const GraphResNet<Real>& scorer,
                                          const RefineConfig& config);

// Initial scale of the coarse blocks' offset heads, so an untrained model
// starts near the ellipsoid rather than at random offsets of order one.
inline constexpr double kOffsetGain = 0.01;

// Multi-view deformer from an ellipsoid: three blocks of vertex pooling plus a
// six-layer graph network predicting offsets, subdividing between blocks.
template <typename Real>
class CoarseDeformer {
 public:
  CoarseDeformer(ParameterSet<Real>& params, const std::string& prefix, std::size_t feature_width,
                 std::size_t hidden, Vec3 radii, int level, Rng& rng);

  std::vector<StageOutput<Real>> forward(const std::vector<View<Real>>& views) const;

  const Mesh& initial_mesh() const { return initial_; }

 private:
  Mesh initial_;
  std::vector<GraphResNet<Real>> blocks_;
};

struct ModelConfig {
  std::array<std::size_t, 3> backbone_channels{16, 32, 64};
  std::size_t image_channels = 3;
  std::size_t coarse_hidden = 192;
  std::size_t mdn_hidden = 192;
  int coarse_level = 2;
  double ellipsoid_radius = 0.35;
  std::uint64_t seed = 1;
};

// Backbone ("backbone/*"), coarse stage ("coarse/*") and scoring network
// ("mdn/*") sharing one parameter set.
template <typename Real>
class Model {
 public:
  explicit Model(const ModelConfig& config);
  Model(const Model&) = delete;
  Model& operator=(const Model&) = delete;

  const ModelConfig& config() const { return config_; }
  ParameterSet<Real>& params() { return params_; }
  const ParameterSet<Real>& params() const { return params_; }
  const Backbone<Real>& backbone() const { return backbone_; }
  const CoarseDeformer<Real>& coarse() const { return coarse_; }
  const GraphResNet<Real>& scorer() const { return scorer_; }

  std::vector<View<Real>> make_views(const std::vector<Tensor<Real>>& images,
                                     const std::vector<Camera>& cameras) const;

  struct Outputs {
    std::vector<StageOutput<Real>> coarse;
    std::vector<StageOutput<Real>> refined;
  };

  // coarse_generate followed by mdn_refine (skipped when iterations is 0).
  Outputs forward(const std::vector<View<Real>>& views, const RefineConfig& refine) const;

 private:
  ModelConfig config_;
  ParameterSet<Real> params_;
  Rng init_rng_;
  Backbone<Real> backbone_;
  CoarseDeformer<Real> coarse_;
  GraphResNet<Real> scorer_;
};

}  // namespace p2mx
