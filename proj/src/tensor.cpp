#include "p2mx/tensor.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>
#include <sstream>
#include <unordered_set>

#include <Eigen/Core>

#include "p2mx/error.hpp"

namespace p2mx {

std::string_view error_code_name(ErrorCode code) {
  switch (code) {
    case ErrorCode::kShape: return "E_SHAPE";
    case ErrorCode::kDomain: return "E_DOMAIN";
    case ErrorCode::kIo: return "E_IO";
    case ErrorCode::kFormat: return "E_FORMAT";
    case ErrorCode::kConfig: return "E_CONFIG";
    case ErrorCode::kNumeric: return "E_NUMERIC";
    case ErrorCode::kUsage: return "E_USAGE";
  }
  return "E_UNKNOWN";
}

std::size_t shape_numel(const Shape& shape) {
  return std::accumulate(shape.begin(), shape.end(), std::size_t{1}, std::multiplies<>());
}

std::string shape_str(const Shape& shape) {
  std::ostringstream out;
  out << '[';
  for (std::size_t i = 0; i < shape.size(); ++i) out << (i ? "," : "") << shape[i];
  out << ']';
  return out.str();
}

std::string_view op_name(OpKind kind) {
  switch (kind) {
    case OpKind::kMatMul: return "matmul";
    case OpKind::kAdd: return "add";
    case OpKind::kSub: return "sub";
    case OpKind::kMul: return "mul";
    case OpKind::kScale: return "scale";
    case OpKind::kAddBias: return "add_bias";
    case OpKind::kScaleRows: return "scale_rows";
    case OpKind::kRelu: return "relu";
    case OpKind::kSoftmax: return "softmax";
    case OpKind::kConv2d: return "conv2d";
    case OpKind::kMaxPool2: return "max_pool2";
    case OpKind::kSum: return "sum";
    case OpKind::kMean: return "mean";
    case OpKind::kMax: return "max";
    case OpKind::kMin: return "min";
    case OpKind::kSqrt: return "sqrt";
    case OpKind::kSquare: return "square";
    case OpKind::kConcat: return "concat";
    case OpKind::kGatherRows: return "gather_rows";
    case OpKind::kReshape: return "reshape";
    case OpKind::kSqDist: return "sq_dist";
    case OpKind::kNeighborMean: return "neighbor_mean";
    case OpKind::kProject: return "project";
    case OpKind::kBilinear: return "bilinear_sample";
    case OpKind::kCrossViewStats: return "cross_view_stats";
  }
  return "unknown";
}

namespace {

[[noreturn]] void shape_error(std::string_view op, const std::string& detail) {
  fail(ErrorCode::kShape, std::string(op) + ": " + detail);
}

void require(bool ok, std::string_view op, const std::string& detail) {
  if (!ok) shape_error(op, detail);
}

// C[M,N] = alpha * op(A) op(B) + beta * C, row-major.
template <typename Real>
void gemm(bool ta, bool tb, std::size_t m, std::size_t n, std::size_t k, double alpha,
          const Real* a, const Real* b, double beta, Real* c) {
  if (m == 0 || n == 0) return;
  using Mat = Eigen::Matrix<Real, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
  using Map = Eigen::Map<const Mat>;
  const auto M = Eigen::Index(m), N = Eigen::Index(n), K = Eigen::Index(k);
  Eigen::Map<Mat> C(c, M, N);
  if (beta == 0.0) C.setZero();
  else if (beta != 1.0) C *= static_cast<Real>(beta);
  if (k == 0) return;
  const Map A(a, ta ? K : M, ta ? M : K), B(b, tb ? N : K, tb ? K : N);
  const auto s = static_cast<Real>(alpha);
  if (!ta && !tb) C.noalias() += s * A * B;
  else if (ta && !tb) C.noalias() += s * A.transpose() * B;
  else if (!ta && tb) C.noalias() += s * A * B.transpose();
  else C.noalias() += s * A.transpose() * B.transpose();
}

struct AxisSplit {
  std::size_t outer = 1, n = 1, inner = 1;
};

AxisSplit split_axis(const Shape& shape, std::size_t axis) {
  AxisSplit s;
  for (std::size_t i = 0; i < axis; ++i) s.outer *= shape[i];
  s.n = shape[axis];
  for (std::size_t i = axis + 1; i < shape.size(); ++i) s.inner *= shape[i];
  return s;
}

Shape drop_axis(const Shape& shape, std::size_t axis) {
  Shape out;
  for (std::size_t i = 0; i < shape.size(); ++i)
    if (i != axis) out.push_back(shape[i]);
  return out;
}

}  // namespace

// ---- Tensor -----------------------------------------------------------------

template <typename Real>
Tensor<Real>::Tensor(Shape shape, std::vector<Real> data, bool requires_grad)
    : s_(std::make_shared<Storage>()) {
  if (shape_numel(shape) != data.size())
    shape_error("tensor", "shape " + shape_str(shape) + " does not hold " +
                              std::to_string(data.size()) + " values");
  s_->shape = std::move(shape);
  s_->data = std::move(data);
  s_->requires_grad = requires_grad;
}

template <typename Real>
Tensor<Real> Tensor<Real>::zeros(Shape shape) {
  return filled(std::move(shape), Real(0));
}

template <typename Real>
Tensor<Real> Tensor<Real>::filled(Shape shape, Real value) {
  const std::size_t n = shape_numel(shape);
  return Tensor(std::move(shape), std::vector<Real>(n, value));
}

template <typename Real>
Tensor<Real> Tensor<Real>::scalar(Real value) {
  return Tensor(Shape{}, std::vector<Real>{value});
}

template <typename Real>
const Shape& Tensor<Real>::shape() const {
  static const Shape empty;
  return s_ ? s_->shape : empty;
}

template <typename Real>
std::size_t Tensor<Real>::dim(std::size_t axis) const {
  if (axis >= rank()) shape_error("dim", "axis " + std::to_string(axis) + " of " + shape_str(shape()));
  return s_->shape[axis];
}

template <typename Real>
std::size_t Tensor<Real>::numel() const {
  return s_ ? s_->data.size() : 0;
}

template <typename Real>
std::span<const Real> Tensor<Real>::data() const {
  if (!s_) return {};
  return s_->data;
}

template <typename Real>
Real Tensor<Real>::item() const {
  if (numel() != 1) shape_error("item", "expected one element, shape " + shape_str(shape()));
  return s_->data[0];
}

template <typename Real>
bool Tensor<Real>::requires_grad() const {
  return s_ && s_->requires_grad;
}

template <typename Real>
Tensor<Real>& Tensor<Real>::set_requires_grad(bool flag) {
  s_->requires_grad = flag;
  return *this;
}

template <typename Real>
const std::string& Tensor<Real>::name() const {
  static const std::string empty;
  return s_ ? s_->name : empty;
}

template <typename Real>
Tensor<Real>& Tensor<Real>::set_name(std::string name) {
  s_->name = std::move(name);
  return *this;
}

template <typename Real>
std::span<const Real> Tensor<Real>::grad() const {
  if (!s_) return {};
  return s_->grad;
}

template <typename Real>
bool Tensor<Real>::has_grad() const {
  return s_ && !s_->grad.empty();
}

template <typename Real>
void Tensor<Real>::zero_grad() const {
  if (s_ && !s_->grad.empty()) std::fill(s_->grad.begin(), s_->grad.end(), Real(0));
}

template <typename Real>
std::span<Real> Tensor<Real>::mutable_data() {
  return s_->data;
}

template <typename Real>
std::span<Real> Tensor<Real>::grad_buffer() const {
  if (s_->grad.empty()) s_->grad.assign(s_->data.size(), Real(0));
  return s_->grad;
}

template <typename Real>
void Tensor<Real>::release_grad() const {
  if (s_) std::vector<Real>().swap(s_->grad);
}

template <typename Real>
Tensor<Real> Tensor<Real>::detach() const {
  return Tensor(shape(), std::vector<Real>(data().begin(), data().end()));
}

// ---- Tape -------------------------------------------------------------------

template <typename Real>
Tape<Real>*& Tape<Real>::active_slot() {
  thread_local Tape<Real>* active = nullptr;
  return active;
}

template <typename Real>
Tape<Real>* Tape<Real>::active() {
  return active_slot();
}

template <typename Real>
void Tape<Real>::record(OpKind kind, std::vector<Tensor<Real>> inputs,
                        const Tensor<Real>& output, Backward backward) {
  entries_.push_back(Entry{kind, std::move(inputs), output, std::move(backward)});
}

template <typename Real>
std::optional<std::string> Tape<Real>::first_non_finite() const {
  for (std::size_t i = 0; i < entries_.size(); ++i) {
    const auto& e = entries_[i];
    for (const Real v : e.output.data()) {
      if (!std::isfinite(v)) {
        std::ostringstream out;
        out << "op #" << i << " (" << op_name(e.kind) << ") output "
            << (e.output.name().empty() ? "<unnamed>" : e.output.name()) << ' '
            << shape_str(e.output.shape()) << " is non-finite";
        for (const auto& in : e.inputs) {
          if (in.name().empty()) continue;
          out << "; input " << in.name();
        }
        return out.str();
      }
    }
  }
  return std::nullopt;
}

template <typename Real>
void record_op(OpKind kind, std::vector<Tensor<Real>> inputs, Tensor<Real>& output,
               typename Tape<Real>::Backward backward) {
  Tape<Real>* tape = Tape<Real>::active();
  if (tape == nullptr) return;
  const bool any = std::any_of(inputs.begin(), inputs.end(),
                               [](const Tensor<Real>& t) { return t.requires_grad(); });
  if (!any) return;
  output.set_requires_grad(true);
  tape->record(kind, std::move(inputs), output, std::move(backward));
}

template <typename Real>
void Gradients<Real>::insert(const Tensor<Real>& leaf) {
  std::vector<Real> g(leaf.numel(), Real(0));
  if (leaf.has_grad()) std::copy(leaf.grad().begin(), leaf.grad().end(), g.begin());
  grads_[leaf.id()] = Tensor<Real>(leaf.shape(), std::move(g));
}

template <typename Real>
Tensor<Real> Gradients<Real>::of(const Tensor<Real>& leaf) const {
  auto it = grads_.find(leaf.id());
  if (it == grads_.end()) return Tensor<Real>::zeros(leaf.shape());
  return it->second;
}

template <typename Real>
bool Gradients<Real>::contains(const Tensor<Real>& leaf) const {
  return grads_.count(leaf.id()) != 0;
}

template <typename Real>
Gradients<Real> backward(Tape<Real>& tape, const Tensor<Real>& loss) {
  if (loss.numel() != 1)
    fail(ErrorCode::kShape, "backward: loss must be scalar, got shape " + shape_str(loss.shape()));
  const auto& entries = tape.entries();
  std::unordered_set<const void*> produced;
  for (const auto& e : entries) produced.insert(e.output.id());
  if (!produced.count(loss.id()))
    fail(ErrorCode::kUsage, "backward: loss is not connected to the tape");

  Tensor<Real> seed = loss;
  seed.grad_buffer()[0] = Real(1);

  std::vector<Tensor<Real>> leaves;
  std::unordered_set<const void*> seen_leaves;
  for (auto it = entries.rbegin(); it != entries.rend(); ++it) {
    Tensor<Real> out = it->output;
    if (out.has_grad()) it->backward(out.grad());
    out.release_grad();
    for (const auto& in : it->inputs) {
      if (in.requires_grad() && !produced.count(in.id()) && seen_leaves.insert(in.id()).second)
        leaves.push_back(in);
    }
  }
  Gradients<Real> grads;
  for (const auto& leaf : leaves) grads.insert(leaf);
  tape.clear();
  return grads;
}

// ---- Adjacency --------------------------------------------------------------

Adjacency::Adjacency(std::size_t num_nodes,
                     const std::vector<std::pair<Index, Index>>& undirected_edges) {
  std::vector<std::size_t> degree(num_nodes, 0);
  for (const auto& [a, b] : undirected_edges) {
    if (a >= num_nodes || b >= num_nodes)
      fail(ErrorCode::kDomain, "adjacency: edge (" + std::to_string(a) + "," + std::to_string(b) +
                                   ") outside " + std::to_string(num_nodes) + " nodes");
    ++degree[a];
    ++degree[b];
  }
  offsets_.assign(num_nodes + 1, 0);
  for (std::size_t i = 0; i < num_nodes; ++i) offsets_[i + 1] = offsets_[i] + degree[i];
  neighbors_.resize(offsets_.back());
  std::vector<std::size_t> cursor(offsets_.begin(), offsets_.end() - 1);
  for (const auto& [a, b] : undirected_edges) {
    neighbors_[cursor[a]++] = b;
    neighbors_[cursor[b]++] = a;
  }
}

Adjacency Adjacency::replicate(std::size_t copies) const {
  Adjacency out;
  const std::size_t n = num_nodes();
  out.offsets_.reserve(n * copies + 1);
  out.neighbors_.reserve(neighbors_.size() * copies);
  out.offsets_.push_back(0);
  for (std::size_t c = 0; c < copies; ++c) {
    const auto shift = static_cast<Index>(c * n);
    for (std::size_t p = 0; p < n; ++p) {
      for (const Index q : neighbors(p)) out.neighbors_.push_back(q + shift);
      out.offsets_.push_back(out.neighbors_.size());
    }
  }
  return out;
}

// ---- ops --------------------------------------------------------------------

namespace {

template <typename Real>
Tensor<Real> make(Shape shape, std::vector<Real> data) {
  return Tensor<Real>(std::move(shape), std::move(data));
}

template <typename Real>
void require_same(std::string_view op, const Tensor<Real>& a, const Tensor<Real>& b) {
  require(a.shape() == b.shape(), op,
          "shape mismatch " + shape_str(a.shape()) + " vs " + shape_str(b.shape()));
}

template <typename Real>
void require_rank(std::string_view op, const Tensor<Real>& a, std::size_t rank) {
  require(a.rank() == rank, op,
          "expected rank " + std::to_string(rank) + ", got " + shape_str(a.shape()));
}

template <typename Real, typename F>
Tensor<Real> unary(OpKind kind, const Tensor<Real>& x, F value, auto derivative) {
  auto in = x.data();
  std::vector<Real> out(in.size());
  for (std::size_t i = 0; i < in.size(); ++i) out[i] = value(in[i]);
  Tensor<Real> y = make(x.shape(), std::move(out));
  record_op<Real>(kind, {x}, y, [x, y, derivative](std::span<const Real> g) mutable {
    if (!x.requires_grad()) return;
    auto gx = x.grad_buffer();
    auto xv = x.data();
    auto yv = y.data();
    for (std::size_t i = 0; i < g.size(); ++i) gx[i] += g[i] * derivative(xv[i], yv[i]);
  });
  return y;
}

}  // namespace

template <typename Real>
Tensor<Real> matmul(const Tensor<Real>& a, const Tensor<Real>& b) {
  require(a.rank() == 2 && b.rank() == 2 && a.dim(1) == b.dim(0), "matmul",
          "shape mismatch " + shape_str(a.shape()) + " x " + shape_str(b.shape()));
  const std::size_t m = a.dim(0), k = a.dim(1), n = b.dim(1);
  std::vector<Real> out(m * n, Real(0));
  gemm(false, false, m, n, k, 1.0, a.data().data(), b.data().data(), 0.0, out.data());
  Tensor<Real> y = make<Real>({m, n}, std::move(out));
  record_op<Real>(OpKind::kMatMul, {a, b}, y, [a, b, m, n, k](std::span<const Real> g) mutable {
    if (a.requires_grad())
      gemm(false, true, m, k, n, 1.0, g.data(), b.data().data(), 1.0, a.grad_buffer().data());
    if (b.requires_grad())
      gemm(true, false, k, n, m, 1.0, a.data().data(), g.data(), 1.0, b.grad_buffer().data());
  });
  return y;
}

template <typename Real>
Tensor<Real> add(const Tensor<Real>& a, const Tensor<Real>& b) {
  require_same("add", a, b);
  std::vector<Real> out(a.numel());
  auto av = a.data(), bv = b.data();
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = av[i] + bv[i];
  Tensor<Real> y = make(a.shape(), std::move(out));
  record_op<Real>(OpKind::kAdd, {a, b}, y, [a, b](std::span<const Real> g) mutable {
    for (const Tensor<Real>* t : {&a, &b}) {
      if (!t->requires_grad()) continue;
      auto gt = t->grad_buffer();
      for (std::size_t i = 0; i < g.size(); ++i) gt[i] += g[i];
    }
  });
  return y;
}

template <typename Real>
Tensor<Real> sub(const Tensor<Real>& a, const Tensor<Real>& b) {
  require_same("sub", a, b);
  std::vector<Real> out(a.numel());
  auto av = a.data(), bv = b.data();
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = av[i] - bv[i];
  Tensor<Real> y = make(a.shape(), std::move(out));
  record_op<Real>(OpKind::kSub, {a, b}, y, [a, b](std::span<const Real> g) mutable {
    if (a.requires_grad()) {
      auto ga = a.grad_buffer();
      for (std::size_t i = 0; i < g.size(); ++i) ga[i] += g[i];
    }
    if (b.requires_grad()) {
      auto gb = b.grad_buffer();
      for (std::size_t i = 0; i < g.size(); ++i) gb[i] -= g[i];
    }
  });
  return y;
}

template <typename Real>
Tensor<Real> mul(const Tensor<Real>& a, const Tensor<Real>& b) {
  require_same("mul", a, b);
  std::vector<Real> out(a.numel());
  auto av = a.data(), bv = b.data();
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = av[i] * bv[i];
  Tensor<Real> y = make(a.shape(), std::move(out));
  record_op<Real>(OpKind::kMul, {a, b}, y, [a, b](std::span<const Real> g) mutable {
    auto av = a.data(), bv = b.data();
    if (a.requires_grad()) {
      auto ga = a.grad_buffer();
      for (std::size_t i = 0; i < g.size(); ++i) ga[i] += g[i] * bv[i];
    }
    if (b.requires_grad()) {
      auto gb = b.grad_buffer();
      for (std::size_t i = 0; i < g.size(); ++i) gb[i] += g[i] * av[i];
    }
  });
  return y;
}

template <typename Real>
Tensor<Real> scale(const Tensor<Real>& a, double factor) {
  const Real f = static_cast<Real>(factor);
  return unary<Real>(
      OpKind::kScale, a, [f](Real v) { return v * f; }, [f](Real, Real) { return f; });
}

template <typename Real>
Tensor<Real> add_bias(const Tensor<Real>& x, const Tensor<Real>& bias) {
  require(x.rank() >= 1 && bias.rank() == 1 && bias.dim(0) == x.shape().back(), "add_bias",
          "shape mismatch " + shape_str(x.shape()) + " + " + shape_str(bias.shape()));
  const std::size_t d = bias.numel();
  const std::size_t rows = x.numel() / std::max<std::size_t>(d, 1);
  std::vector<Real> out(x.data().begin(), x.data().end());
  auto bv = bias.data();
  for (std::size_t r = 0; r < rows; ++r)
    for (std::size_t j = 0; j < d; ++j) out[r * d + j] += bv[j];
  Tensor<Real> y = make(x.shape(), std::move(out));
  record_op<Real>(OpKind::kAddBias, {x, bias}, y, [x, bias, rows, d](std::span<const Real> g) mutable {
    if (x.requires_grad()) {
      auto gx = x.grad_buffer();
      for (std::size_t i = 0; i < g.size(); ++i) gx[i] += g[i];
    }
    if (bias.requires_grad()) {
      std::vector<double> acc(d, 0.0);
      for (std::size_t r = 0; r < rows; ++r)
        for (std::size_t j = 0; j < d; ++j) acc[j] += g[r * d + j];
      auto gb = bias.grad_buffer();
      for (std::size_t j = 0; j < d; ++j) gb[j] += static_cast<Real>(acc[j]);
    }
  });
  return y;
}

template <typename Real>
Tensor<Real> scale_rows(const Tensor<Real>& x, const Tensor<Real>& w) {
  require(x.rank() == 2 && w.numel() == x.dim(0), "scale_rows",
          "shape mismatch " + shape_str(x.shape()) + " rows vs weights " + shape_str(w.shape()));
  const std::size_t m = x.dim(0), d = x.dim(1);
  std::vector<Real> out(x.numel());
  auto xv = x.data(), wv = w.data();
  for (std::size_t i = 0; i < m; ++i)
    for (std::size_t j = 0; j < d; ++j) out[i * d + j] = xv[i * d + j] * wv[i];
  Tensor<Real> y = make(x.shape(), std::move(out));
  record_op<Real>(OpKind::kScaleRows, {x, w}, y, [x, w, m, d](std::span<const Real> g) mutable {
    auto xv = x.data(), wv = w.data();
    if (x.requires_grad()) {
      auto gx = x.grad_buffer();
      for (std::size_t i = 0; i < m; ++i)
        for (std::size_t j = 0; j < d; ++j) gx[i * d + j] += g[i * d + j] * wv[i];
    }
    if (w.requires_grad()) {
      auto gw = w.grad_buffer();
      for (std::size_t i = 0; i < m; ++i) {
        double acc = 0.0;
        for (std::size_t j = 0; j < d; ++j) acc += double(g[i * d + j]) * xv[i * d + j];
        gw[i] += static_cast<Real>(acc);
      }
    }
  });
  return y;
}

template <typename Real>
Tensor<Real> relu(const Tensor<Real>& x) {
  return unary<Real>(
      OpKind::kRelu, x, [](Real v) { return v > Real(0) ? v : Real(0); },
      [](Real v, Real) { return v > Real(0) ? Real(1) : Real(0); });
}

template <typename Real>
Tensor<Real> softmax(const Tensor<Real>& x) {
  require(x.rank() >= 1 && x.shape().back() > 0, "softmax", "needs a nonempty last axis, got " + shape_str(x.shape()));
  const std::size_t n = x.shape().back();
  const std::size_t rows = x.numel() / n;
  auto xv = x.data();
  std::vector<Real> out(x.numel());
  for (std::size_t r = 0; r < rows; ++r) {
    const Real* row = xv.data() + r * n;
    const Real top = *std::max_element(row, row + n);
    double total = 0.0;
    for (std::size_t j = 0; j < n; ++j) total += std::exp(double(row[j]) - double(top));
    for (std::size_t j = 0; j < n; ++j)
      out[r * n + j] = static_cast<Real>(std::exp(double(row[j]) - double(top)) / total);
  }
  Tensor<Real> y = make(x.shape(), std::move(out));
  record_op<Real>(OpKind::kSoftmax, {x}, y, [x, y, rows, n](std::span<const Real> g) mutable {
    auto yv = y.data();
    auto gx = x.grad_buffer();
    for (std::size_t r = 0; r < rows; ++r) {
      double dot = 0.0;
      for (std::size_t j = 0; j < n; ++j) dot += double(g[r * n + j]) * yv[r * n + j];
      for (std::size_t j = 0; j < n; ++j)
        gx[r * n + j] += static_cast<Real>(yv[r * n + j] * (g[r * n + j] - dot));
    }
  });
  return y;
}

namespace {

struct ConvGeometry {
  std::size_t c, h, w, o, k, stride, pad, ho, wo;
};

// col[(ci*k + ky)*k + kx][oy*wo + ox]
template <typename Real>
void im2col(const ConvGeometry& g, const Real* x, Real* col) {
  const std::size_t plane = g.ho * g.wo;
  for (std::size_t ci = 0; ci < g.c; ++ci)
    for (std::size_t ky = 0; ky < g.k; ++ky)
      for (std::size_t kx = 0; kx < g.k; ++kx) {
        Real* dst = col + ((ci * g.k + ky) * g.k + kx) * plane;
        for (std::size_t oy = 0; oy < g.ho; ++oy) {
          const auto iy = static_cast<std::ptrdiff_t>(oy * g.stride + ky) - static_cast<std::ptrdiff_t>(g.pad);
          for (std::size_t ox = 0; ox < g.wo; ++ox) {
            const auto ix = static_cast<std::ptrdiff_t>(ox * g.stride + kx) - static_cast<std::ptrdiff_t>(g.pad);
            const bool inside = iy >= 0 && ix >= 0 && iy < static_cast<std::ptrdiff_t>(g.h) &&
                                ix < static_cast<std::ptrdiff_t>(g.w);
            dst[oy * g.wo + ox] = inside ? x[(ci * g.h + iy) * g.w + ix] : Real(0);
          }
        }
      }
}

template <typename Real>
void col2im(const ConvGeometry& g, const Real* col, Real* x) {
  const std::size_t plane = g.ho * g.wo;
  for (std::size_t ci = 0; ci < g.c; ++ci)
    for (std::size_t ky = 0; ky < g.k; ++ky)
      for (std::size_t kx = 0; kx < g.k; ++kx) {
        const Real* src = col + ((ci * g.k + ky) * g.k + kx) * plane;
        for (std::size_t oy = 0; oy < g.ho; ++oy) {
          const auto iy = static_cast<std::ptrdiff_t>(oy * g.stride + ky) - static_cast<std::ptrdiff_t>(g.pad);
          if (iy < 0 || iy >= static_cast<std::ptrdiff_t>(g.h)) continue;
          for (std::size_t ox = 0; ox < g.wo; ++ox) {
            const auto ix = static_cast<std::ptrdiff_t>(ox * g.stride + kx) - static_cast<std::ptrdiff_t>(g.pad);
            if (ix < 0 || ix >= static_cast<std::ptrdiff_t>(g.w)) continue;
            x[(ci * g.h + iy) * g.w + ix] += src[oy * g.wo + ox];
          }
        }
      }
}

}  // namespace

template <typename Real>
Tensor<Real> conv2d(const Tensor<Real>& x, const Tensor<Real>& weight, const Tensor<Real>& bias,
                    std::size_t stride, std::size_t padding) {
  require(x.rank() == 3 && weight.rank() == 4 && weight.dim(1) == x.dim(0) &&
              weight.dim(2) == weight.dim(3) && bias.rank() == 1 && bias.dim(0) == weight.dim(0),
          "conv2d",
          "shape mismatch input " + shape_str(x.shape()) + " weight " + shape_str(weight.shape()) +
              " bias " + shape_str(bias.shape()));
  require(stride >= 1, "conv2d", "stride must be >= 1");
  ConvGeometry g{x.dim(0), x.dim(1), x.dim(2), weight.dim(0), weight.dim(2), stride, padding, 0, 0};
  require(g.h + 2 * g.pad >= g.k && g.w + 2 * g.pad >= g.k, "conv2d",
          "kernel larger than padded input " + shape_str(x.shape()));
  g.ho = (g.h + 2 * g.pad - g.k) / g.stride + 1;
  g.wo = (g.w + 2 * g.pad - g.k) / g.stride + 1;
  const std::size_t ckk = g.c * g.k * g.k, plane = g.ho * g.wo;

  std::vector<Real> col(ckk * plane);
  im2col(g, x.data().data(), col.data());
  std::vector<Real> out(g.o * plane);
  auto bv = bias.data();
  for (std::size_t oc = 0; oc < g.o; ++oc) std::fill_n(out.begin() + oc * plane, plane, bv[oc]);
  gemm(false, false, g.o, plane, ckk, 1.0, weight.data().data(), col.data(), 1.0, out.data());
  Tensor<Real> y = make<Real>({g.o, g.ho, g.wo}, std::move(out));

  record_op<Real>(OpKind::kConv2d, {x, weight, bias}, y,
                  [x, weight, bias, g, col = std::move(col)](std::span<const Real> gy) mutable {
                    const std::size_t ckk = g.c * g.k * g.k, plane = g.ho * g.wo;
                    if (weight.requires_grad())
                      gemm(false, true, g.o, ckk, plane, 1.0, gy.data(), col.data(), 1.0,
                           weight.grad_buffer().data());
                    if (bias.requires_grad()) {
                      auto gb = bias.grad_buffer();
                      for (std::size_t oc = 0; oc < g.o; ++oc) {
                        double acc = 0.0;
                        for (std::size_t i = 0; i < plane; ++i) acc += gy[oc * plane + i];
                        gb[oc] += static_cast<Real>(acc);
                      }
                    }
                    if (x.requires_grad()) {
                      std::vector<Real> dcol(ckk * plane, Real(0));
                      gemm(true, false, ckk, plane, g.o, 1.0, weight.data().data(), gy.data(), 0.0,
                           dcol.data());
                      col2im(g, dcol.data(), x.grad_buffer().data());
                    }
                  });
  return y;
}

template <typename Real>
Tensor<Real> max_pool2(const Tensor<Real>& x) {
  require(x.rank() == 3 && x.dim(1) % 2 == 0 && x.dim(2) % 2 == 0, "max_pool2",
          "needs [C,H,W] with even H and W, got " + shape_str(x.shape()));
  const std::size_t c = x.dim(0), h = x.dim(1), w = x.dim(2), ho = h / 2, wo = w / 2;
  auto xv = x.data();
  std::vector<Real> out(c * ho * wo);
  std::vector<std::size_t> arg(out.size());
  for (std::size_t ci = 0; ci < c; ++ci)
    for (std::size_t oy = 0; oy < ho; ++oy)
      for (std::size_t ox = 0; ox < wo; ++ox) {
        std::size_t best = (ci * h + 2 * oy) * w + 2 * ox;
        for (std::size_t dy = 0; dy < 2; ++dy)
          for (std::size_t dx = 0; dx < 2; ++dx) {
            const std::size_t idx = (ci * h + 2 * oy + dy) * w + 2 * ox + dx;
            if (xv[idx] > xv[best]) best = idx;
          }
        const std::size_t o = (ci * ho + oy) * wo + ox;
        out[o] = xv[best];
        arg[o] = best;
      }
  Tensor<Real> y = make<Real>({c, ho, wo}, std::move(out));
  record_op<Real>(OpKind::kMaxPool2, {x}, y, [x, arg = std::move(arg)](std::span<const Real> g) mutable {
    auto gx = x.grad_buffer();
    for (std::size_t i = 0; i < g.size(); ++i) gx[arg[i]] += g[i];
  });
  return y;
}

namespace {

enum class Reduce { kSum, kMean, kMax, kMin };

template <typename Real>
Tensor<Real> reduce(const Tensor<Real>& x, std::size_t axis, Reduce mode) {
  const OpKind kind = mode == Reduce::kSum    ? OpKind::kSum
                      : mode == Reduce::kMean ? OpKind::kMean
                      : mode == Reduce::kMax  ? OpKind::kMax
                                              : OpKind::kMin;
  require(axis < x.rank(), op_name(kind),
          "axis " + std::to_string(axis) + " out of range for " + shape_str(x.shape()));
  const AxisSplit s = split_axis(x.shape(), axis);
  const bool extremum = mode == Reduce::kMax || mode == Reduce::kMin;
  require(!(extremum && s.n == 0), op_name(kind), "empty reduction axis");
  auto xv = x.data();
  std::vector<Real> out(s.outer * s.inner);
  std::vector<std::size_t> arg(extremum ? out.size() : 0);
  for (std::size_t o = 0; o < s.outer; ++o)
    for (std::size_t i = 0; i < s.inner; ++i) {
      const std::size_t base = o * s.n * s.inner + i;
      if (extremum) {
        std::size_t best = 0;
        for (std::size_t j = 1; j < s.n; ++j) {
          const Real v = xv[base + j * s.inner], b = xv[base + best * s.inner];
          if (mode == Reduce::kMax ? v > b : v < b) best = j;
        }
        out[o * s.inner + i] = xv[base + best * s.inner];
        arg[o * s.inner + i] = best;
      } else {
        double acc = 0.0;
        for (std::size_t j = 0; j < s.n; ++j) acc += xv[base + j * s.inner];
        if (mode == Reduce::kMean && s.n > 0) acc /= double(s.n);
        out[o * s.inner + i] = static_cast<Real>(acc);
      }
    }
  Tensor<Real> y = make(drop_axis(x.shape(), axis), std::move(out));
  record_op<Real>(kind, {x}, y, [x, s, mode, arg = std::move(arg)](std::span<const Real> g) mutable {
    auto gx = x.grad_buffer();
    const Real w = mode == Reduce::kMean ? Real(1.0 / double(s.n)) : Real(1);
    for (std::size_t o = 0; o < s.outer; ++o)
      for (std::size_t i = 0; i < s.inner; ++i) {
        const std::size_t base = o * s.n * s.inner + i;
        const Real gi = g[o * s.inner + i];
        if (mode == Reduce::kMax || mode == Reduce::kMin) {
          gx[base + arg[o * s.inner + i] * s.inner] += gi;
        } else {
          for (std::size_t j = 0; j < s.n; ++j) gx[base + j * s.inner] += gi * w;
        }
      }
  });
  return y;
}

}  // namespace

template <typename Real>
Tensor<Real> sum(const Tensor<Real>& x, std::size_t axis) {
  return reduce(x, axis, Reduce::kSum);
}
template <typename Real>
Tensor<Real> mean(const Tensor<Real>& x, std::size_t axis) {
  return reduce(x, axis, Reduce::kMean);
}
template <typename Real>
Tensor<Real> max(const Tensor<Real>& x, std::size_t axis) {
  return reduce(x, axis, Reduce::kMax);
}
template <typename Real>
Tensor<Real> min(const Tensor<Real>& x, std::size_t axis) {
  return reduce(x, axis, Reduce::kMin);
}
template <typename Real>
Tensor<Real> sum_all(const Tensor<Real>& x) {
  return reduce(reshape(x, Shape{x.numel()}), 0, Reduce::kSum);
}
template <typename Real>
Tensor<Real> mean_all(const Tensor<Real>& x) {
  return reduce(reshape(x, Shape{x.numel()}), 0, Reduce::kMean);
}

template <typename Real>
Tensor<Real> sqrt(const Tensor<Real>& x) {
  for (const Real v : x.data())
    if (!(v >= Real(0))) fail(ErrorCode::kDomain, "sqrt: negative or NaN input");
  return unary<Real>(
      OpKind::kSqrt, x, [](Real v) { return std::sqrt(v); },
      [](Real, Real y) { return Real(0.5) / y; });
}

template <typename Real>
Tensor<Real> square(const Tensor<Real>& x) {
  return unary<Real>(
      OpKind::kSquare, x, [](Real v) { return v * v; }, [](Real v, Real) { return Real(2) * v; });
}

template <typename Real>
Tensor<Real> concat(const std::vector<Tensor<Real>>& parts, std::size_t axis) {
  require(!parts.empty(), "concat", "no inputs");
  const Shape& first = parts.front().shape();
  require(axis < first.size(), "concat", "axis " + std::to_string(axis) + " out of range for " + shape_str(first));
  Shape out_shape = first;
  out_shape[axis] = 0;
  for (const auto& p : parts) {
    bool ok = p.rank() == first.size();
    for (std::size_t i = 0; ok && i < first.size(); ++i)
      if (i != axis && p.shape()[i] != first[i]) ok = false;
    require(ok, "concat", "shape mismatch " + shape_str(first) + " vs " + shape_str(p.shape()));
    out_shape[axis] += p.shape()[axis];
  }
  const AxisSplit s = split_axis(out_shape, axis);
  std::vector<Real> out(shape_numel(out_shape));
  std::size_t offset = 0;
  std::vector<std::size_t> offsets;
  for (const auto& p : parts) {
    const std::size_t n = p.shape()[axis];
    offsets.push_back(offset);
    auto pv = p.data();
    for (std::size_t o = 0; o < s.outer; ++o)
      std::copy_n(pv.begin() + o * n * s.inner, n * s.inner,
                  out.begin() + (o * s.n + offset) * s.inner);
    offset += n;
  }
  Tensor<Real> y = make(std::move(out_shape), std::move(out));
  record_op<Real>(OpKind::kConcat, parts, y,
                  [parts, s, axis, offsets = std::move(offsets)](std::span<const Real> g) mutable {
                    for (std::size_t k = 0; k < parts.size(); ++k) {
                      if (!parts[k].requires_grad()) continue;
                      const std::size_t n = parts[k].shape()[axis];
                      auto gp = parts[k].grad_buffer();
                      for (std::size_t o = 0; o < s.outer; ++o)
                        for (std::size_t i = 0; i < n * s.inner; ++i)
                          gp[o * n * s.inner + i] += g[(o * s.n + offsets[k]) * s.inner + i];
                    }
                  });
  return y;
}

template <typename Real>
Tensor<Real> gather_rows(const Tensor<Real>& x, std::span<const Index> rows) {
  require(x.rank() >= 1, "gather_rows", "needs rank >= 1");
  const std::size_t m = x.dim(0);
  const std::size_t width = m == 0 ? 0 : x.numel() / m;
  std::vector<Index> idx(rows.begin(), rows.end());
  std::vector<Real> out(idx.size() * width);
  auto xv = x.data();
  for (std::size_t r = 0; r < idx.size(); ++r) {
    require(idx[r] < m, "gather_rows", "row " + std::to_string(idx[r]) + " out of range for " + shape_str(x.shape()));
    std::copy_n(xv.begin() + idx[r] * width, width, out.begin() + r * width);
  }
  Shape shape = x.shape();
  shape[0] = idx.size();
  Tensor<Real> y = make(std::move(shape), std::move(out));
  record_op<Real>(OpKind::kGatherRows, {x}, y, [x, width, idx = std::move(idx)](std::span<const Real> g) mutable {
    auto gx = x.grad_buffer();
    for (std::size_t r = 0; r < idx.size(); ++r)
      for (std::size_t j = 0; j < width; ++j) gx[idx[r] * width + j] += g[r * width + j];
  });
  return y;
}

template <typename Real>
Tensor<Real> reshape(const Tensor<Real>& x, Shape shape) {
  require(shape_numel(shape) == x.numel(), "reshape",
          "cannot view " + shape_str(x.shape()) + " as " + shape_str(shape));
  Tensor<Real> y = make(std::move(shape), std::vector<Real>(x.data().begin(), x.data().end()));
  record_op<Real>(OpKind::kReshape, {x}, y, [x](std::span<const Real> g) mutable {
    auto gx = x.grad_buffer();
    for (std::size_t i = 0; i < g.size(); ++i) gx[i] += g[i];
  });
  return y;
}

template <typename Real>
Tensor<Real> sq_dist(const Tensor<Real>& a, const Tensor<Real>& b) {
  require(a.rank() == 2 && b.rank() == 2 && a.dim(1) == b.dim(1), "sq_dist",
          "shape mismatch " + shape_str(a.shape()) + " vs " + shape_str(b.shape()));
  const std::size_t n = a.dim(0), m = b.dim(0), d = a.dim(1);
  auto av = a.data(), bv = b.data();
  std::vector<Real> out(n * m);
  for (std::size_t i = 0; i < n; ++i)
    for (std::size_t j = 0; j < m; ++j) {
      double acc = 0.0;
      for (std::size_t k = 0; k < d; ++k) {
        const double diff = double(av[i * d + k]) - double(bv[j * d + k]);
        acc += diff * diff;
      }
      out[i * m + j] = static_cast<Real>(acc);
    }
  Tensor<Real> y = make<Real>({n, m}, std::move(out));
  record_op<Real>(OpKind::kSqDist, {a, b}, y, [a, b, n, m, d](std::span<const Real> g) mutable {
    auto av = a.data(), bv = b.data();
    std::span<Real> ga, gb;
    if (a.requires_grad()) ga = a.grad_buffer();
    if (b.requires_grad()) gb = b.grad_buffer();
    for (std::size_t i = 0; i < n; ++i)
      for (std::size_t j = 0; j < m; ++j) {
        const Real gij = g[i * m + j];
        if (gij == Real(0)) continue;
        for (std::size_t k = 0; k < d; ++k) {
          const Real diff = Real(2) * (av[i * d + k] - bv[j * d + k]) * gij;
          if (!ga.empty()) ga[i * d + k] += diff;
          if (!gb.empty()) gb[j * d + k] -= diff;
        }
      }
  });
  return y;
}

template <typename Real>
Tensor<Real> neighbor_mean(const Tensor<Real>& x, const Adjacency& graph) {
  require(x.rank() == 2 && x.dim(0) == graph.num_nodes(), "neighbor_mean",
          "features " + shape_str(x.shape()) + " vs graph of " + std::to_string(graph.num_nodes()) + " nodes");
  const std::size_t n = x.dim(0), d = x.dim(1);
  auto xv = x.data();
  std::vector<Real> out(n * d, Real(0));
  std::vector<double> acc(d);
  for (std::size_t p = 0; p < n; ++p) {
    const auto nb = graph.neighbors(p);
    if (nb.empty()) continue;
    std::fill(acc.begin(), acc.end(), 0.0);
    for (const Index q : nb)
      for (std::size_t j = 0; j < d; ++j) acc[j] += xv[q * d + j];
    const double inv = 1.0 / double(nb.size());
    for (std::size_t j = 0; j < d; ++j) out[p * d + j] = static_cast<Real>(acc[j] * inv);
  }
  Tensor<Real> y = make<Real>({n, d}, std::move(out));
  record_op<Real>(OpKind::kNeighborMean, {x}, y, [x, graph, n, d](std::span<const Real> g) mutable {
    auto gx = x.grad_buffer();
    for (std::size_t p = 0; p < n; ++p) {
      const auto nb = graph.neighbors(p);
      if (nb.empty()) continue;
      const Real inv = Real(1.0 / double(nb.size()));
      for (const Index q : nb)
        for (std::size_t j = 0; j < d; ++j) gx[q * d + j] += g[p * d + j] * inv;
    }
  });
  return y;
}

// ---- grad_check -------------------------------------------------------------

double grad_check(const std::function<Tensor<double>()>& f, std::vector<Tensor<double>> params,
                  GradCheckOptions options) {
  if (!(options.epsilon > 0.0)) fail(ErrorCode::kDomain, "grad_check: epsilon must be positive");
  for (auto& p : params) {
    p.set_requires_grad(true);
    p.release_grad();
  }
  Tape<double> tape;
  Tensor<double> loss;
  {
    TapeScope<double> scope(tape);
    loss = f();
  }
  if (!std::isfinite(loss.item())) fail(ErrorCode::kNumeric, "grad_check: non-finite loss");
  std::vector<std::vector<double>> analytic;
  if (tape.size() == 0 || !loss.requires_grad()) {
    for (auto& p : params) analytic.emplace_back(p.numel(), 0.0);
  } else {
    const Gradients<double> grads = backward(tape, loss);
    for (auto& p : params) {
      const Tensor<double> g = grads.of(p);
      analytic.emplace_back(g.data().begin(), g.data().end());
    }
  }

  double worst = 0.0;
  for (std::size_t k = 0; k < params.size(); ++k) {
    auto values = params[k].mutable_data();
    const std::size_t n = values.size();
    std::size_t stride = 1;
    if (options.max_coords_per_param > 0 && n > options.max_coords_per_param)
      stride = (n + options.max_coords_per_param - 1) / options.max_coords_per_param;
    for (std::size_t i = 0; i < n; i += stride) {
      const double saved = values[i];
      values[i] = saved + options.epsilon;
      const double up = f().item();
      values[i] = saved - options.epsilon;
      const double down = f().item();
      values[i] = saved;
      if (!std::isfinite(up) || !std::isfinite(down) || !std::isfinite(analytic[k][i]))
        fail(ErrorCode::kNumeric, "grad_check: non-finite value at coordinate " + std::to_string(i));
      const double numeric = (up - down) / (2.0 * options.epsilon);
      const double err = std::abs(analytic[k][i] - numeric) / std::max(1.0, std::abs(analytic[k][i]));
      worst = std::max(worst, err);
    }
  }
  return worst;
}

double grad_check(const std::function<Tensor<double>(const Tensor<double>&)>& f,
                  const Tensor<double>& x, double epsilon) {
  Tensor<double> leaf = x.detach();
  return grad_check([&] { return f(leaf); }, {leaf}, GradCheckOptions{epsilon, 0});
}

// ---- instantiations ---------------------------------------------------------

#define P2MX_INSTANTIATE(Real)                                                                   \
  template class Tensor<Real>;                                                                   \
  template class Tape<Real>;                                                                     \
  template class Gradients<Real>;                                                                \
  template void record_op<Real>(OpKind, std::vector<Tensor<Real>>, Tensor<Real>&,                \
                                typename Tape<Real>::Backward);                                  \
  template Gradients<Real> backward<Real>(Tape<Real>&, const Tensor<Real>&);                     \
  template Tensor<Real> matmul<Real>(const Tensor<Real>&, const Tensor<Real>&);                  \
  template Tensor<Real> add<Real>(const Tensor<Real>&, const Tensor<Real>&);                     \
  template Tensor<Real> sub<Real>(const Tensor<Real>&, const Tensor<Real>&);                     \
  template Tensor<Real> mul<Real>(const Tensor<Real>&, const Tensor<Real>&);                     \
  template Tensor<Real> scale<Real>(const Tensor<Real>&, double);                                \
  template Tensor<Real> add_bias<Real>(const Tensor<Real>&, const Tensor<Real>&);                \
  template Tensor<Real> scale_rows<Real>(const Tensor<Real>&, const Tensor<Real>&);              \
  template Tensor<Real> relu<Real>(const Tensor<Real>&);                                         \
  template Tensor<Real> softmax<Real>(const Tensor<Real>&);                                      \
  template Tensor<Real> conv2d<Real>(const Tensor<Real>&, const Tensor<Real>&,                   \
                                     const Tensor<Real>&, std::size_t, std::size_t);             \
  template Tensor<Real> max_pool2<Real>(const Tensor<Real>&);                                    \
  template Tensor<Real> sum<Real>(const Tensor<Real>&, std::size_t);                             \
  template Tensor<Real> mean<Real>(const Tensor<Real>&, std::size_t);                            \
  template Tensor<Real> max<Real>(const Tensor<Real>&, std::size_t);                             \
  template Tensor<Real> min<Real>(const Tensor<Real>&, std::size_t);                             \
  template Tensor<Real> sum_all<Real>(const Tensor<Real>&);                                      \
  template Tensor<Real> mean_all<Real>(const Tensor<Real>&);                                     \
  template Tensor<Real> sqrt<Real>(const Tensor<Real>&);                                         \
  template Tensor<Real> square<Real>(const Tensor<Real>&);                                       \
  template Tensor<Real> concat<Real>(const std::vector<Tensor<Real>>&, std::size_t);             \
  template Tensor<Real> gather_rows<Real>(const Tensor<Real>&, std::span<const Index>);          \
  template Tensor<Real> reshape<Real>(const Tensor<Real>&, Shape);                               \
  template Tensor<Real> sq_dist<Real>(const Tensor<Real>&, const Tensor<Real>&);                 \
  template Tensor<Real> neighbor_mean<Real>(const Tensor<Real>&, const Adjacency&);

P2MX_INSTANTIATE(float)
P2MX_INSTANTIATE(double)

#undef P2MX_INSTANTIATE

}  // namespace p2mx
