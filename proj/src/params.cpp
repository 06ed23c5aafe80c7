#include "p2mx/params.hpp"

#include <algorithm>
#include <bit>
#include <cmath>
#include <cstring>
#include <fstream>

#include "p2mx/error.hpp"

namespace p2mx {

template <typename Real>
Tensor<Real> ParameterSet<Real>::add(const std::string& name, Tensor<Real> value) {
  if (index_.count(name)) fail(ErrorCode::kUsage, "parameter registered twice: " + name);
  value.set_requires_grad(true).set_name(name);
  index_[name] = entries_.size();
  entries_.emplace_back(name, value);
  return value;
}

template <typename Real>
Tensor<Real> ParameterSet<Real>::xavier(const std::string& name, Shape shape, std::size_t fan_in,
                                        std::size_t fan_out, Rng& rng) {
  const double bound = std::sqrt(6.0 / double(fan_in + fan_out));
  std::vector<Real> values(shape_numel(shape));
  for (auto& v : values) v = static_cast<Real>(rng.uniform(-bound, bound));
  return add(name, Tensor<Real>(std::move(shape), std::move(values)));
}

template <typename Real>
Tensor<Real> ParameterSet<Real>::zeros(const std::string& name, Shape shape) {
  return add(name, Tensor<Real>::zeros(std::move(shape)));
}

template <typename Real>
const Tensor<Real>& ParameterSet<Real>::get(const std::string& name) const {
  auto it = index_.find(name);
  if (it == index_.end()) fail(ErrorCode::kUsage, "unknown parameter: " + name);
  return entries_[it->second].second;
}

template <typename Real>
std::vector<Tensor<Real>> ParameterSet<Real>::tensors(const std::string& prefix) const {
  std::vector<Tensor<Real>> out;
  for (const auto& [name, t] : entries_)
    if (name.starts_with(prefix)) out.push_back(t);
  return out;
}

template <typename Real>
void ParameterSet<Real>::zero_grad() {
  for (auto& [name, t] : entries_) {
    Tensor<Real> handle = t;
    handle.release_grad();
  }
}

template <typename Real>
void ParameterSet<Real>::fill(Real value) {
  for (auto& [name, t] : entries_) {
    Tensor<Real> handle = t;
    auto data = handle.mutable_data();
    std::fill(data.begin(), data.end(), value);
  }
}

template <typename Real>
void Adam<Real>::step(const std::vector<std::pair<std::string, Tensor<Real>>>& params,
                      const std::vector<std::string>& trainable_prefixes) {
  ++step_;
  const double c1 = 1.0 - std::pow(options_.beta1, double(step_));
  const double c2 = 1.0 - std::pow(options_.beta2, double(step_));
  for (const auto& [name, t] : params) {
    const bool trainable = std::any_of(trainable_prefixes.begin(), trainable_prefixes.end(),
                                       [&](const std::string& p) { return name.starts_with(p); });
    if (!trainable || !t.has_grad()) continue;
    Tensor<Real> handle = t;
    auto values = handle.mutable_data();
    auto grad = t.grad();
    auto& m = m_[name];
    auto& v = v_[name];
    if (m.empty()) {
      m.assign(values.size(), Real(0));
      v.assign(values.size(), Real(0));
    }
    for (std::size_t i = 0; i < values.size(); ++i) {
      const double g = double(grad[i]) + options_.weight_decay * double(values[i]);
      m[i] = static_cast<Real>(options_.beta1 * m[i] + (1.0 - options_.beta1) * g);
      v[i] = static_cast<Real>(options_.beta2 * v[i] + (1.0 - options_.beta2) * g * g);
      const double mhat = m[i] / c1, vhat = v[i] / c2;
      values[i] = static_cast<Real>(values[i] - options_.learning_rate * mhat /
                                                    (std::sqrt(vhat) + options_.epsilon));
    }
  }
}

template <typename Real>
std::vector<std::pair<std::string, Tensor<Real>>> Adam<Real>::state() const {
  std::vector<std::pair<std::string, Tensor<Real>>> out;
  for (const auto& [name, m] : m_) {
    out.emplace_back("optim/m/" + name, Tensor<Real>({m.size()}, m));
    out.emplace_back("optim/v/" + name, Tensor<Real>({m.size()}, v_.at(name)));
  }
  // Split into two 24-bit halves so the counter survives f32 storage exactly.
  out.emplace_back("optim/step", Tensor<Real>({2}, {static_cast<Real>(step_ >> 24),
                                                    static_cast<Real>(step_ & 0xFFFFFF)}));
  return out;
}

template <typename Real>
void Adam<Real>::load_state(const std::vector<std::pair<std::string, Tensor<Real>>>& named) {
  m_.clear();
  v_.clear();
  step_ = 0;
  for (const auto& [name, t] : named) {
    auto d = t.data();
    if (name == "optim/step" && d.size() == 2) {
      step_ = (static_cast<std::uint64_t>(d[0]) << 24) | static_cast<std::uint64_t>(d[1]);
    } else if (name.starts_with("optim/m/")) {
      m_[name.substr(8)] = std::vector<Real>(d.begin(), d.end());
    } else if (name.starts_with("optim/v/")) {
      v_[name.substr(8)] = std::vector<Real>(d.begin(), d.end());
    }
  }
}

namespace {

constexpr char kMagic[4] = {'P', '2', 'M', 'X'};
constexpr std::uint32_t kVersion = 1;

static_assert(std::endian::native == std::endian::little, "checkpoint I/O assumes little-endian host");

template <typename T>
void put(std::ofstream& out, T value) {
  out.write(reinterpret_cast<const char*>(&value), sizeof(T));
}

template <typename T>
T take(std::ifstream& in, const std::filesystem::path& path) {
  T value{};
  in.read(reinterpret_cast<char*>(&value), sizeof(T));
  if (!in) fail(ErrorCode::kFormat, "checkpoint truncated: " + path.string());
  return value;
}

}  // namespace

void save_checkpoint(const std::filesystem::path& path, const std::vector<NamedTensor>& tensors) {
  std::ofstream out(path, std::ios::binary);
  if (!out) fail(ErrorCode::kIo, "cannot write checkpoint: " + path.string());
  out.write(kMagic, 4);
  put<std::uint32_t>(out, kVersion);
  put<std::uint32_t>(out, static_cast<std::uint32_t>(tensors.size()));
  for (const auto& [name, value] : tensors) {
    if (name.size() > 0xFFFF) fail(ErrorCode::kFormat, "parameter name too long: " + name);
    put<std::uint16_t>(out, static_cast<std::uint16_t>(name.size()));
    out.write(name.data(), static_cast<std::streamsize>(name.size()));
    put<std::uint8_t>(out, static_cast<std::uint8_t>(value.rank()));
    for (const std::size_t e : value.shape()) put<std::uint32_t>(out, static_cast<std::uint32_t>(e));
    out.write(reinterpret_cast<const char*>(value.data().data()),
              static_cast<std::streamsize>(value.numel() * sizeof(float)));
  }
  if (!out) fail(ErrorCode::kIo, "failed writing checkpoint: " + path.string());
}

std::vector<NamedTensor> load_checkpoint(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) fail(ErrorCode::kIo, "cannot open checkpoint: " + path.string());
  char magic[4];
  in.read(magic, 4);
  if (!in || std::memcmp(magic, kMagic, 4) != 0)
    fail(ErrorCode::kFormat, "not a P2MX checkpoint: " + path.string());
  const auto version = take<std::uint32_t>(in, path);
  if (version != kVersion)
    fail(ErrorCode::kFormat, "unsupported checkpoint version " + std::to_string(version));
  const auto count = take<std::uint32_t>(in, path);
  std::vector<NamedTensor> out;
  out.reserve(count);
  for (std::uint32_t i = 0; i < count; ++i) {
    const auto len = take<std::uint16_t>(in, path);
    std::string name(len, '\0');
    in.read(name.data(), len);
    const auto rank = take<std::uint8_t>(in, path);
    Shape shape(rank);
    for (auto& e : shape) e = take<std::uint32_t>(in, path);
    std::vector<float> values(shape_numel(shape));
    in.read(reinterpret_cast<char*>(values.data()),
            static_cast<std::streamsize>(values.size() * sizeof(float)));
    if (!in) fail(ErrorCode::kFormat, "checkpoint truncated in " + name);
    out.push_back({std::move(name), Tensor<float>(std::move(shape), std::move(values))});
  }
  return out;
}

template <typename Real>
std::vector<NamedTensor> to_named(const std::vector<std::pair<std::string, Tensor<Real>>>& entries) {
  std::vector<NamedTensor> out;
  for (const auto& [name, t] : entries) {
    std::vector<float> values(t.data().begin(), t.data().end());
    out.push_back({name, Tensor<float>(t.shape(), std::move(values))});
  }
  return out;
}

template <typename Real>
void load_into(ParameterSet<Real>& params, const std::vector<NamedTensor>& tensors) {
  std::map<std::string, const Tensor<float>*> by_name;
  for (const auto& nt : tensors) by_name[nt.name] = &nt.value;
  for (const auto& [name, t] : params.entries()) {
    auto it = by_name.find(name);
    if (it == by_name.end()) fail(ErrorCode::kFormat, "checkpoint lacks parameter " + name);
    if (it->second->shape() != t.shape())
      fail(ErrorCode::kFormat, "checkpoint shape mismatch for " + name + ": " +
                                   shape_str(it->second->shape()) + " vs " + shape_str(t.shape()));
    Tensor<Real> handle = t;
    auto dst = handle.mutable_data();
    auto src = it->second->data();
    for (std::size_t i = 0; i < dst.size(); ++i) dst[i] = static_cast<Real>(src[i]);
  }
}

template class ParameterSet<float>;
template class ParameterSet<double>;
template class Adam<float>;
template class Adam<double>;
template std::vector<NamedTensor> to_named<float>(const std::vector<std::pair<std::string, Tensor<float>>>&);
template std::vector<NamedTensor> to_named<double>(const std::vector<std::pair<std::string, Tensor<double>>>&);
template void load_into<float>(ParameterSet<float>&, const std::vector<NamedTensor>&);
template void load_into<double>(ParameterSet<double>&, const std::vector<NamedTensor>&);

}  // namespace p2mx
