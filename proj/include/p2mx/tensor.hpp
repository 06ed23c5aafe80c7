#pragma once

// Dense tensors with a reverse-mode differentiation tape.
//
// A Tensor is a shared handle to immutable values (parameters are the one
// exception: optimizers and checkpoint loading write through mutable_data()).
// Every op below records an entry on the thread's active Tape when a tape is
// installed (TapeScope) and at least one input requires grad. backward()
// replays the tape in reverse and leaves gradients on the leaves.
//
// Instantiated for float (training) and double (tests, gradient checks).

#include <cstddef>
#include <cstdint>
#include <functional>
#include <memory>
#include <optional>
#include <span>
#include <string>
#include <string_view>
#include <unordered_map>
#include <vector>

namespace p2mx {

using Shape = std::vector<std::size_t>;
using Index = std::uint32_t;

std::size_t shape_numel(const Shape& shape);
std::string shape_str(const Shape& shape);

enum class OpKind {
  kMatMul,
  kAdd,
  kSub,
  kMul,
  kScale,
  kAddBias,
  kScaleRows,
  kRelu,
  kSoftmax,
  kConv2d,
  kMaxPool2,
  kSum,
  kMean,
  kMax,
  kMin,
  kSqrt,
  kSquare,
  kConcat,
  kGatherRows,
  kReshape,
  kSqDist,
  kNeighborMean,
  // Ops recorded by other modules through record_op().
  kProject,
  kBilinear,
  kCrossViewStats,
};

std::string_view op_name(OpKind kind);

template <typename Real>
class Tensor {
 public:
  using value_type = Real;

  Tensor() = default;
  Tensor(Shape shape, std::vector<Real> data, bool requires_grad = false);

  static Tensor zeros(Shape shape);
  static Tensor filled(Shape shape, Real value);
  static Tensor scalar(Real value);

  bool defined() const { return static_cast<bool>(s_); }
  const Shape& shape() const;
  std::size_t rank() const { return shape().size(); }
  std::size_t dim(std::size_t axis) const;
  std::size_t numel() const;

  std::span<const Real> data() const;
  Real item() const;

  bool requires_grad() const;
  Tensor& set_requires_grad(bool flag);
  const std::string& name() const;
  Tensor& set_name(std::string name);

  // Gradient accumulated by backward(); empty when none reached this tensor.
  std::span<const Real> grad() const;
  bool has_grad() const;
  void zero_grad() const;

  std::span<Real> mutable_data();
  // Allocates a zero gradient buffer on first use.
  std::span<Real> grad_buffer() const;
  void release_grad() const;

  // Copy of the values with no tape connection.
  Tensor detach() const;

  const void* id() const { return s_.get(); }

 private:
  struct Storage {
    Shape shape;
    std::vector<Real> data;
    std::vector<Real> grad;
    bool requires_grad = false;
    std::string name;
  };
  std::shared_ptr<Storage> s_;
};

template <typename Real>
class Tape {
 public:
  using Backward = std::function<void(std::span<const Real> out_grad)>;

  struct Entry {
    OpKind kind;
    std::vector<Tensor<Real>> inputs;
    Tensor<Real> output;
    Backward backward;
  };

  void record(OpKind kind, std::vector<Tensor<Real>> inputs,
              const Tensor<Real>& output, Backward backward);

  std::size_t size() const { return entries_.size(); }
  const std::vector<Entry>& entries() const { return entries_; }
  void clear() { entries_.clear(); }

  // Describes the first recorded op whose output holds NaN/Inf, if any.
  std::optional<std::string> first_non_finite() const;

  static Tape* active();

 private:
  template <typename>
  friend class TapeScope;
  static Tape*& active_slot();
  std::vector<Entry> entries_;
};

// Installs a tape as the active one for this thread until destruction.
template <typename Real>
class TapeScope {
 public:
  explicit TapeScope(Tape<Real>& tape) : previous_(Tape<Real>::active_slot()) {
    Tape<Real>::active_slot() = &tape;
  }
  ~TapeScope() { Tape<Real>::active_slot() = previous_; }
  TapeScope(const TapeScope&) = delete;
  TapeScope& operator=(const TapeScope&) = delete;

 private:
  Tape<Real>* previous_;
};

// Records `output` as produced by `kind` from `inputs` when a tape is active
// and some input requires grad. Marks output as requiring grad in that case.
template <typename Real>
void record_op(OpKind kind, std::vector<Tensor<Real>> inputs,
               Tensor<Real>& output, typename Tape<Real>::Backward backward);

template <typename Real>
class Gradients {
 public:
  void insert(const Tensor<Real>& leaf);
  // Gradient for `leaf`; zeros of its shape when unreachable from the loss.
  Tensor<Real> of(const Tensor<Real>& leaf) const;
  bool contains(const Tensor<Real>& leaf) const;
  std::size_t size() const { return grads_.size(); }

 private:
  std::unordered_map<const void*, Tensor<Real>> grads_;
};

// Reverse replay. loss must be a one-element tensor produced on `tape`.
// Consumes the tape.
template <typename Real>
Gradients<Real> backward(Tape<Real>& tape, const Tensor<Real>& loss);

// Compressed adjacency over N nodes; neighbors(p) lists p's graph neighbors.
class Adjacency {
 public:
  Adjacency() = default;
  Adjacency(std::size_t num_nodes,
            const std::vector<std::pair<Index, Index>>& undirected_edges);

  std::size_t num_nodes() const { return offsets_.empty() ? 0 : offsets_.size() - 1; }
  std::span<const Index> neighbors(std::size_t node) const {
    return {neighbors_.data() + offsets_[node], neighbors_.data() + offsets_[node + 1]};
  }
  std::size_t degree(std::size_t node) const { return offsets_[node + 1] - offsets_[node]; }

  // `copies` disjoint copies of this graph, copy c offset by c * num_nodes().
  Adjacency replicate(std::size_t copies) const;

 private:
  std::vector<std::size_t> offsets_;
  std::vector<Index> neighbors_;
};

// ---- op kinds ---------------------------------------------------------------

template <typename Real> Tensor<Real> matmul(const Tensor<Real>& a, const Tensor<Real>& b);
template <typename Real> Tensor<Real> add(const Tensor<Real>& a, const Tensor<Real>& b);
template <typename Real> Tensor<Real> sub(const Tensor<Real>& a, const Tensor<Real>& b);
template <typename Real> Tensor<Real> mul(const Tensor<Real>& a, const Tensor<Real>& b);
template <typename Real> Tensor<Real> scale(const Tensor<Real>& a, double factor);
// x[..., D] + bias[D]
template <typename Real> Tensor<Real> add_bias(const Tensor<Real>& x, const Tensor<Real>& bias);
// x[M, D] with row i multiplied by w[i]
template <typename Real> Tensor<Real> scale_rows(const Tensor<Real>& x, const Tensor<Real>& w);
template <typename Real> Tensor<Real> relu(const Tensor<Real>& x);
// Along the last axis.
template <typename Real> Tensor<Real> softmax(const Tensor<Real>& x);
// x[C, H, W], weight[O, C, k, k], bias[O] -> [O, Ho, Wo]
template <typename Real>
Tensor<Real> conv2d(const Tensor<Real>& x, const Tensor<Real>& weight, const Tensor<Real>& bias,
                    std::size_t stride, std::size_t padding);
// 2x2 window, stride 2, on [C, H, W] with even H and W.
template <typename Real> Tensor<Real> max_pool2(const Tensor<Real>& x);

template <typename Real> Tensor<Real> sum(const Tensor<Real>& x, std::size_t axis);
template <typename Real> Tensor<Real> mean(const Tensor<Real>& x, std::size_t axis);
template <typename Real> Tensor<Real> max(const Tensor<Real>& x, std::size_t axis);
template <typename Real> Tensor<Real> min(const Tensor<Real>& x, std::size_t axis);
template <typename Real> Tensor<Real> sum_all(const Tensor<Real>& x);
template <typename Real> Tensor<Real> mean_all(const Tensor<Real>& x);

template <typename Real> Tensor<Real> sqrt(const Tensor<Real>& x);
template <typename Real> Tensor<Real> square(const Tensor<Real>& x);
template <typename Real>
Tensor<Real> concat(const std::vector<Tensor<Real>>& parts, std::size_t axis);
template <typename Real>
Tensor<Real> gather_rows(const Tensor<Real>& x, std::span<const Index> rows);
template <typename Real> Tensor<Real> reshape(const Tensor<Real>& x, Shape shape);
// a[n, d], b[m, d] -> [n, m] of squared euclidean distances.
template <typename Real> Tensor<Real> sq_dist(const Tensor<Real>& a, const Tensor<Real>& b);
// x[N, D] -> mean of neighbor rows per node; zero row for isolated nodes.
template <typename Real>
Tensor<Real> neighbor_mean(const Tensor<Real>& x, const Adjacency& graph);

// ---- gradient checking ------------------------------------------------------

struct GradCheckOptions {
  double epsilon = 1e-5;
  // 0 checks every coordinate; otherwise at most this many per parameter,
  // evenly strided.
  std::size_t max_coords_per_param = 0;
};

// max over checked coordinates of |analytic - central| / max(1, |analytic|).
// f is evaluated with a fresh tape each call; params must be leaves.
double grad_check(const std::function<Tensor<double>()>& f,
                  std::vector<Tensor<double>> params, GradCheckOptions options = {});

double grad_check(const std::function<Tensor<double>(const Tensor<double>&)>& f,
                  const Tensor<double>& x, double epsilon);

}  // namespace p2mx
