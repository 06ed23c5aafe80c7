#include "p2mx/mdn.hpp"

#include <algorithm>
#include <cmath>

#include "p2mx/error.hpp"

namespace p2mx {

template <typename Real>
GraphConv<Real>::GraphConv(ParameterSet<Real>& params, const std::string& prefix, std::size_t in,
                           std::size_t out, Rng& rng)
    : w_self_(params.xavier(prefix + "/w_self", {in, out}, in, out, rng)),
      w_neigh_(params.xavier(prefix + "/w_neigh", {in, out}, in, out, rng)),
      bias_(params.zeros(prefix + "/bias", {out})) {}

template <typename Real>
Tensor<Real> GraphConv<Real>::forward(const Tensor<Real>& x, const Adjacency& graph,
                                      bool activate) const {
  if (x.rank() != 2 || x.dim(1) != w_self_.dim(0))
    fail(ErrorCode::kShape, "graph_conv: features " + shape_str(x.shape()) + " vs weights " +
                                shape_str(w_self_.shape()));
  // mean(X) W = mean(X W); average whichever side is narrower.
  const Tensor<Real> neigh = w_neigh_.dim(1) < w_neigh_.dim(0) ? neighbor_mean(matmul(x, w_neigh_), graph)
                                                               : matmul(neighbor_mean(x, graph), w_neigh_);
  Tensor<Real> y = add(matmul(x, w_self_), neigh);
  y = add_bias(y, bias_);
  return activate ? relu(y) : y;
}

template <typename Real>
GraphResNet<Real>::GraphResNet(ParameterSet<Real>& params, const std::string& prefix,
                               std::size_t in, std::size_t hidden, std::size_t out, Rng& rng,
                               double output_gain)
    : in_(in), out_(out) {
  const std::size_t widths[7] = {in, hidden, hidden, hidden, hidden, hidden, out};
  for (std::size_t i = 0; i < 6; ++i)
    layers_.emplace_back(params, prefix + "/gc" + std::to_string(i + 1), widths[i], widths[i + 1], rng);
  for (const Tensor<Real>& w : {layers_.back().w_self(), layers_.back().w_neigh()}) {
    Tensor<Real> handle = w;
    for (Real& x : handle.mutable_data()) x = static_cast<Real>(x * output_gain);
  }
}

template <typename Real>
Tensor<Real> GraphResNet<Real>::forward(const Tensor<Real>& x, const Adjacency& graph) const {
  const Tensor<Real> h1 = layers_[0].forward(x, graph, true);
  const Tensor<Real> h2 = layers_[1].forward(h1, graph, true);
  const Tensor<Real> h3 = layers_[2].forward(h2, graph, true);
  const Tensor<Real> a1 = add(h2, h3);
  const Tensor<Real> h4 = layers_[3].forward(a1, graph, true);
  const Tensor<Real> h5 = layers_[4].forward(h4, graph, true);
  const Tensor<Real> a2 = add(h4, h5);
  return layers_[5].forward(a2, graph, false);
}

template <typename Real>
Backbone<Real>::Backbone(ParameterSet<Real>& params, const std::string& prefix,
                         std::size_t in_channels, std::array<std::size_t, 3> channels, Rng& rng)
    : in_channels_(in_channels), channels_(channels) {
  std::size_t c_in = in_channels;
  for (std::size_t level = 0; level < 3; ++level) {
    for (std::size_t k = 0; k < 2; ++k) {
      const std::string name = prefix + "/l" + std::to_string(level + 1) + "/conv" + std::to_string(k + 1);
      const std::size_t c_out = channels[level];
      Conv conv{params.xavier(name + "/weight", {c_out, c_in, 3, 3}, c_in * 9, c_out * 9, rng),
                params.zeros(name + "/bias", {c_out})};
      convs_.push_back(conv);
      c_in = c_out;
    }
  }
}

template <typename Real>
std::vector<Tensor<Real>> Backbone<Real>::forward(const Tensor<Real>& image) const {
  if (image.rank() != 3 || image.dim(0) != in_channels_)
    fail(ErrorCode::kShape, "backbone: expected [" + std::to_string(in_channels_) + ",H,W], got " +
                                shape_str(image.shape()));
  if (image.dim(1) % 4 != 0 || image.dim(2) % 4 != 0)
    fail(ErrorCode::kShape, "backbone: image extent " + shape_str(image.shape()) + " not divisible by 4");
  std::vector<Tensor<Real>> pyramid;
  Tensor<Real> x = image;
  for (std::size_t level = 0; level < 3; ++level) {
    if (level > 0) x = max_pool2(x);
    for (std::size_t k = 0; k < 2; ++k) {
      const Conv& c = convs_[2 * level + k];
      x = relu(conv2d(x, c.weight, c.bias, 1, 1));
    }
    pyramid.push_back(x);
  }
  return pyramid;
}

template <typename Real>
Tensor<Real> fan_positions(const Tensor<Real>& vertices, double scale) {
  if (vertices.rank() != 2 || vertices.dim(1) != 3)
    fail(ErrorCode::kShape, "fan_positions: expected [N,3], got " + shape_str(vertices.shape()));
  if (!(scale > 0.0)) fail(ErrorCode::kDomain, "fan_positions: scale must be positive");
  const std::size_t n = vertices.dim(0);
  const auto& offsets = fan_template().offsets;
  std::vector<Index> repeat(n * kFanNodes);
  std::vector<Real> shift(n * kFanNodes * 3, Real(0));
  for (std::size_t v = 0; v < n; ++v)
    for (std::size_t i = 0; i < kFanNodes; ++i) {
      repeat[v * kFanNodes + i] = static_cast<Index>(v);
      if (i == 0) continue;
      for (int c = 0; c < 3; ++c)
        shift[(v * kFanNodes + i) * 3 + c] = static_cast<Real>(scale * offsets[i - 1][c]);
    }
  return add(gather_rows(vertices, std::span<const Index>(repeat)),
             Tensor<Real>({n * kFanNodes, 3}, std::move(shift)));
}

template <typename Real>
Tensor<Real> score_hypotheses(const GraphResNet<Real>& scorer, const Tensor<Real>& features,
                              std::size_t num_fans) {
  if (features.rank() != 2 || features.dim(0) != num_fans * kFanNodes ||
      features.dim(1) != scorer.in_width())
    fail(ErrorCode::kShape, "score_hypotheses: features " + shape_str(features.shape()) + " for " +
                                std::to_string(num_fans) + " fans of width " +
                                std::to_string(scorer.in_width()));
  const Adjacency graph = fan_template().graph.replicate(num_fans);
  const Tensor<Real> logits = scorer.forward(features, graph);
  return softmax(reshape(logits, {num_fans, kFanNodes}));
}

template <typename Real>
Tensor<Real> deformation_reasoning(const Tensor<Real>& positions, const Tensor<Real>& scores) {
  if (scores.rank() != 2 || scores.dim(1) != kFanNodes || positions.rank() != 2 ||
      positions.dim(1) != 3 || positions.dim(0) != scores.numel())
    fail(ErrorCode::kShape, "deformation_reasoning: positions " + shape_str(positions.shape()) +
                                " with scores " + shape_str(scores.shape()));
  const std::size_t n = scores.dim(0);
  const Tensor<Real> weighted = scale_rows(positions, scores);
  return sum(reshape(weighted, {n, kFanNodes, 3}), 1);
}

template <typename Real>
Tensor<Real> score_hypotheses(const GraphResNet<Real>& scorer, const HypothesisFan& fan,
                              const Tensor<Real>& node_features) {
  if (fan.positions.size() != kFanNodes || fan.local_edges.size() != kFanEdges)
    fail(ErrorCode::kShape, "score_hypotheses: malformed fan");
  return reshape(score_hypotheses(scorer, node_features, 1), {kFanNodes});
}

Vec3 deformation_reasoning(const HypothesisFan& fan, std::span<const double> scores) {
  if (scores.size() != fan.positions.size())
    fail(ErrorCode::kShape, "deformation_reasoning: " + std::to_string(scores.size()) +
                                " scores for " + std::to_string(fan.positions.size()) + " hypotheses");
  Vec3 out{0, 0, 0};
  for (std::size_t i = 0; i < scores.size(); ++i) out = out + scores[i] * fan.positions[i];
  return out;
}

double RefineConfig::scale_at(std::size_t iteration) const {
  return scales.empty() ? 0.02 : scales[std::min(iteration, scales.size() - 1)];
}

void RefineConfig::validate() const {
  for (const double s : scales)
    if (!(s > 0.0)) fail(ErrorCode::kConfig, "refine: hypothesis scales must be positive");
}

template <typename Real>
std::vector<StageOutput<Real>> mdn_refine(const Tensor<Real>& vertices, const Mesh& topology,
                                          const std::vector<View<Real>>& views,
                                          const GraphResNet<Real>& scorer,
                                          const RefineConfig& config) {
  config.validate();
  if (views.empty()) fail(ErrorCode::kShape, "mdn_refine: at least one view required");
  if (vertices.rank() != 2 || vertices.dim(0) != topology.num_vertices() || vertices.dim(1) != 3)
    fail(ErrorCode::kShape, "mdn_refine: vertices " + shape_str(vertices.shape()) + " for mesh of " +
                                std::to_string(topology.num_vertices()));
  std::vector<StageOutput<Real>> out;
  Tensor<Real> current = vertices;
  const std::size_t n = topology.num_vertices();
  for (std::size_t it = 0; it < config.iterations; ++it) {
    const Tensor<Real> positions = fan_positions(current, config.scale_at(it));
    const Tensor<Real> features = pool_node_features(positions, views, kMdnLevels);
    const Tensor<Real> scores = score_hypotheses(scorer, features, n);
    Tensor<Real> next = deformation_reasoning(positions, scores);
    out.push_back({next, topology.with_vertices(to_vec3(next)), to_vec3(current)});
    current = next;
  }
  return out;
}

template <typename Real>
CoarseDeformer<Real>::CoarseDeformer(ParameterSet<Real>& params, const std::string& prefix,
                                     std::size_t feature_width, std::size_t hidden, Vec3 radii,
                                     int level, Rng& rng)
    : initial_(ellipsoid(radii, level)) {
  for (int b = 0; b < 3; ++b)
    blocks_.emplace_back(params, prefix + "/block" + std::to_string(b + 1), feature_width, hidden, 3, rng,
                         kOffsetGain);
}

template <typename Real>
std::vector<StageOutput<Real>> CoarseDeformer<Real>::forward(const std::vector<View<Real>>& views) const {
  if (views.empty()) fail(ErrorCode::kShape, "coarse_generate: at least one view required");
  std::vector<StageOutput<Real>> out;
  Mesh mesh = initial_;
  Tensor<Real> current = mesh.vertex_tensor<Real>();
  for (std::size_t b = 0; b < blocks_.size(); ++b) {
    if (b > 0) {
      const Subdivision sub = subdivide_with_map(mesh);
      std::vector<Index> first, second;
      for (const auto& [a, c] : sub.midpoint_edges) {
        first.push_back(a);
        second.push_back(c);
      }
      const Tensor<Real> mid = scale(add(gather_rows(current, std::span<const Index>(first)),
                                         gather_rows(current, std::span<const Index>(second))),
                                     0.5);
      current = concat<Real>({current, mid}, 0);
      mesh = sub.mesh;
    }
    const Tensor<Real> features = pool_node_features(current, views, kCoarseLevels);
    Tensor<Real> next = add(current, blocks_[b].forward(features, mesh.adjacency()));
    mesh = mesh.with_vertices(to_vec3(next));
    out.push_back({next, mesh, to_vec3(current)});
    current = next;
  }
  return out;
}

template <typename Real>
Model<Real>::Model(const ModelConfig& config)
    : config_(config),
      init_rng_(config.seed),
      backbone_(params_, "backbone", config.image_channels, config.backbone_channels, init_rng_),
      coarse_(params_, "coarse",
              node_feature_width(std::array<std::size_t, 2>{config.backbone_channels[1],
                                                            config.backbone_channels[2]}),
              config.coarse_hidden,
              Vec3{config.ellipsoid_radius, config.ellipsoid_radius, config.ellipsoid_radius},
              config.coarse_level, init_rng_),
      scorer_(params_, "mdn/scorer", node_feature_width(config.backbone_channels), config.mdn_hidden,
              1, init_rng_) {}

template <typename Real>
std::vector<View<Real>> Model<Real>::make_views(const std::vector<Tensor<Real>>& images,
                                                const std::vector<Camera>& cameras) const {
  if (images.size() != cameras.size())
    fail(ErrorCode::kShape, "make_views: " + std::to_string(images.size()) + " images for " +
                                std::to_string(cameras.size()) + " cameras");
  std::vector<View<Real>> views;
  for (std::size_t k = 0; k < images.size(); ++k) {
    View<Real> view;
    view.camera = cameras[k];
    view.pyramid = backbone_.forward(images[k]);
    view.validate();
    views.push_back(std::move(view));
  }
  return views;
}

template <typename Real>
typename Model<Real>::Outputs Model<Real>::forward(const std::vector<View<Real>>& views,
                                                   const RefineConfig& refine) const {
  Outputs out;
  out.coarse = coarse_.forward(views);
  if (refine.iterations > 0) {
    const auto& last = out.coarse.back();
    out.refined = mdn_refine(last.vertices, last.topology, views, scorer_, refine);
  }
  return out;
}

#define P2MX_INSTANTIATE(Real)                                                                      \
  template class GraphConv<Real>;                                                                   \
  template class GraphResNet<Real>;                                                                 \
  template class Backbone<Real>;                                                                    \
  template class CoarseDeformer<Real>;                                                              \
  template class Model<Real>;                                                                       \
  template Tensor<Real> fan_positions<Real>(const Tensor<Real>&, double);                           \
  template Tensor<Real> score_hypotheses<Real>(const GraphResNet<Real>&, const Tensor<Real>&,       \
                                               std::size_t);                                        \
  template Tensor<Real> score_hypotheses<Real>(const GraphResNet<Real>&, const HypothesisFan&,      \
                                               const Tensor<Real>&);                                \
  template Tensor<Real> deformation_reasoning<Real>(const Tensor<Real>&, const Tensor<Real>&);      \
  template std::vector<StageOutput<Real>> mdn_refine<Real>(const Tensor<Real>&, const Mesh&,        \
                                                           const std::vector<View<Real>>&,          \
                                                           const GraphResNet<Real>&,                \
                                                           const RefineConfig&);

P2MX_INSTANTIATE(float)
P2MX_INSTANTIATE(double)

#undef P2MX_INSTANTIATE

}  // namespace p2mx
