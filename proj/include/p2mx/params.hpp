#pragma once

#include <filesystem>
#include <map>
#include <string>
#include <utility>
#include <vector>

#include "p2mx/rng.hpp"
#include "p2mx/tensor.hpp"

namespace p2mx {

// Named learnable tensors in registration order. Names are slash-separated
// ("backbone/l1/conv1/weight"); the first segment is the checkpoint namespace.
template <typename Real>
class ParameterSet {
 public:
  Tensor<Real> add(const std::string& name, Tensor<Real> value);

  // Uniform in +-sqrt(6 / (fan_in + fan_out)).
  Tensor<Real> xavier(const std::string& name, Shape shape, std::size_t fan_in,
                      std::size_t fan_out, Rng& rng);
  Tensor<Real> zeros(const std::string& name, Shape shape);

  const Tensor<Real>& get(const std::string& name) const;
  bool contains(const std::string& name) const { return index_.count(name) != 0; }
  std::size_t size() const { return entries_.size(); }

  const std::vector<std::pair<std::string, Tensor<Real>>>& entries() const { return entries_; }
  std::vector<Tensor<Real>> tensors(const std::string& prefix = "") const;

  void zero_grad();
  void fill(Real value);

 private:
  std::vector<std::pair<std::string, Tensor<Real>>> entries_;
  std::map<std::string, std::size_t> index_;
};

// Adam with L2 weight decay folded into the gradient.
template <typename Real>
class Adam {
 public:
  struct Options {
    double learning_rate = 1e-4;
    double beta1 = 0.9;
    double beta2 = 0.999;
    double epsilon = 1e-8;
    double weight_decay = 0.0;
  };

  explicit Adam(Options options) : options_(options) {}

  void set_learning_rate(double lr) { options_.learning_rate = lr; }
  // Applies one update to every tensor in `params` that holds a gradient.
  void step(const std::vector<std::pair<std::string, Tensor<Real>>>& params,
            const std::vector<std::string>& trainable_prefixes);

  std::uint64_t steps_taken() const { return step_; }

  // Moment buffers as named tensors ("optim/m/<param>", "optim/v/<param>",
  // "optim/step") for checkpointing.
  std::vector<std::pair<std::string, Tensor<Real>>> state() const;
  void load_state(const std::vector<std::pair<std::string, Tensor<Real>>>& named);

 private:
  Options options_;
  std::uint64_t step_ = 0;
  std::map<std::string, std::vector<Real>> m_, v_;
};

// Checkpoint file: "P2MX", u32 version, u32 count, then per tensor: u16 name
// length, UTF-8 name, u8 rank, u32 extents, little-endian f32 values.
struct NamedTensor {
  std::string name;
  Tensor<float> value;
};

void save_checkpoint(const std::filesystem::path& path, const std::vector<NamedTensor>& tensors);
std::vector<NamedTensor> load_checkpoint(const std::filesystem::path& path);

template <typename Real>
std::vector<NamedTensor> to_named(const std::vector<std::pair<std::string, Tensor<Real>>>& entries);

// Copies checkpoint values into same-named parameters. Every parameter in
// `params` must be present with a matching shape.
template <typename Real>
void load_into(ParameterSet<Real>& params, const std::vector<NamedTensor>& tensors);

}  // namespace p2mx
