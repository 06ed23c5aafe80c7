#include "p2mx/pipeline.hpp"

#include <algorithm>
#include <bit>
#include <charconv>
#include <cmath>
#include <fstream>
#include <numbers>
#include <numeric>
#include <optional>
#include <set>
#include <sstream>

#include <json.hpp>

#include "p2mx/error.hpp"
#include "p2mx/params.hpp"
#include "p2mx/pooling.hpp"

namespace p2mx {

// ---- key = value files -------------------------------------------------------------

namespace {

std::string trim(std::string_view s) {
  const auto first = s.find_first_not_of(" \t\r\n");
  if (first == std::string_view::npos) return {};
  const auto last = s.find_last_not_of(" \t\r\n");
  return std::string(s.substr(first, last - first + 1));
}

std::string read_text(const fs::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) fail(ErrorCode::kIo, "cannot read " + path.string());
  std::ostringstream ss;
  ss << in.rdbuf();
  return ss.str();
}

// Consumes typed values from a parsed key/value map; leftover keys are unknown.
class Fields {
 public:
  Fields(std::map<std::string, std::string> values, std::string origin)
      : values_(std::move(values)), origin_(std::move(origin)) {}

  void get(const std::string& key, double& out) {
    if (auto v = take(key)) out = to_double(key, *v);
  }
  void get(const std::string& key, std::size_t& out) {
    if (auto v = take(key)) out = to_size(key, *v);
  }
  void get(const std::string& key, int& out) {
    if (auto v = take(key)) out = static_cast<int>(to_size(key, *v));
  }
  void get(const std::string& key, bool& out) {
    if (auto v = take(key)) {
      if (*v == "true" || *v == "1") out = true;
      else if (*v == "false" || *v == "0") out = false;
      else bad(key, *v, "a boolean");
    }
  }
  void get(const std::string& key, std::string& out) {
    if (auto v = take(key)) out = *v;
  }
  void get(const std::string& key, fs::path& out) {
    if (auto v = take(key)) out = *v;
  }
  void get(const std::string& key, std::vector<double>& out) {
    if (auto v = take(key)) {
      out.clear();
      for (const auto& item : split(*v)) out.push_back(to_double(key, item));
    }
  }
  void get(const std::string& key, std::vector<std::string>& out) {
    if (auto v = take(key)) out = split(*v);
  }
  void get(const std::string& key, std::array<std::size_t, 3>& out) {
    if (auto v = take(key)) {
      const auto items = split(*v);
      if (items.size() != 3) bad(key, *v, "three comma-separated integers");
      for (int i = 0; i < 3; ++i) out[i] = to_size(key, items[i]);
    }
  }

  void finish() const {
    if (!values_.empty())
      fail(ErrorCode::kConfig, origin_ + ": unknown key '" + values_.begin()->first + "'");
  }

 private:
  std::optional<std::string> take(const std::string& key) {
    auto it = values_.find(key);
    if (it == values_.end()) return std::nullopt;
    std::string v = it->second;
    values_.erase(it);
    return v;
  }

  [[noreturn]] void bad(const std::string& key, const std::string& value, const char* expected) const {
    fail(ErrorCode::kConfig, origin_ + ": key '" + key + "' expects " + expected + ", got '" + value + "'");
  }

  double to_double(const std::string& key, const std::string& v) const {
    char* end = nullptr;
    const double d = std::strtod(v.c_str(), &end);
    if (v.empty() || end != v.c_str() + v.size() || !std::isfinite(d)) bad(key, v, "a number");
    return d;
  }

  std::size_t to_size(const std::string& key, const std::string& v) const {
    std::uint64_t out = 0;
    const auto [ptr, ec] = std::from_chars(v.data(), v.data() + v.size(), out);
    if (v.empty() || ec != std::errc() || ptr != v.data() + v.size()) bad(key, v, "a nonnegative integer");
    return static_cast<std::size_t>(out);
  }

  static std::vector<std::string> split(const std::string& v) {
    std::vector<std::string> out;
    std::stringstream ss(v);
    std::string item;
    while (std::getline(ss, item, ',')) {
      item = trim(item);
      if (!item.empty()) out.push_back(item);
    }
    return out;
  }

  std::map<std::string, std::string> values_;
  std::string origin_;
};

}  // namespace

std::map<std::string, std::string> parse_key_values(const std::string& text, const std::string& origin) {
  std::map<std::string, std::string> out;
  std::istringstream in(text);
  std::string line;
  std::size_t lineno = 0;
  while (std::getline(in, line)) {
    ++lineno;
    if (const auto hash = line.find('#'); hash != std::string::npos) line.resize(hash);
    line = trim(line);
    if (line.empty()) continue;
    const auto eq = line.find('=');
    const std::string where = origin + ":" + std::to_string(lineno);
    if (eq == std::string::npos) fail(ErrorCode::kConfig, where + ": expected 'key = value'");
    std::string key = trim(std::string_view(line).substr(0, eq));
    std::string value = trim(std::string_view(line).substr(eq + 1));
    if (key.empty()) fail(ErrorCode::kConfig, where + ": empty key");
    if (!out.emplace(key, value).second) fail(ErrorCode::kConfig, where + ": duplicate key '" + key + "'");
  }
  return out;
}

// ---- run configuration -------------------------------------------------------------

void RunConfig::validate() const {
  if (dataset.empty()) fail(ErrorCode::kConfig, "config: dataset is required");
  if (!(lr_phase1 > 0.0) || !(lr_phase2 > 0.0)) fail(ErrorCode::kConfig, "config: learning rates must be positive");
  if (weight_decay < 0.0) fail(ErrorCode::kConfig, "config: weight_decay must be nonnegative");
  if (!(epoch_scale > 0.0)) fail(ErrorCode::kConfig, "config: epoch_scale must be positive");
  if (views_per_step < 1) fail(ErrorCode::kConfig, "config: views_per_step must be at least 1");
  if (train_noise < 0.0) fail(ErrorCode::kConfig, "config: train_noise must be nonnegative");
  if (refine.iterations < 1) fail(ErrorCode::kConfig, "config: refine_iterations must be at least 1");
  if (refine.scales.empty()) fail(ErrorCode::kConfig, "config: refine_scales is empty");
  refine.validate();
  loss.validate();
  for (const auto c : model.backbone_channels)
    if (c == 0) fail(ErrorCode::kConfig, "config: backbone channels must be positive");
  if (model.image_channels == 0 || model.coarse_hidden == 0 || model.mdn_hidden == 0)
    fail(ErrorCode::kConfig, "config: widths must be positive");
  if (model.coarse_level < 0 || model.coarse_level > 3) fail(ErrorCode::kConfig, "config: coarse_level must be 0..3");
  if (!(model.ellipsoid_radius > 0.0)) fail(ErrorCode::kConfig, "config: ellipsoid_radius must be positive");
}

std::size_t RunConfig::phase1_epochs() const {
  return static_cast<std::size_t>(std::llround(double(epochs_phase1) * epoch_scale));
}
std::size_t RunConfig::phase2_epochs() const {
  return static_cast<std::size_t>(std::llround(double(epochs_phase2) * epoch_scale));
}

RunConfig parse_run_config(const std::string& text, const std::string& origin) {
  RunConfig c;
  c.model.ellipsoid_radius = 0.2;
  Fields f(parse_key_values(text, origin), origin);
  f.get("seed", c.seed);
  f.get("dataset", c.dataset);
  f.get("train_split", c.train_split);
  f.get("test_split", c.test_split);
  f.get("output_dir", c.output_dir);
  f.get("resume", c.resume);
  f.get("epochs_phase1", c.epochs_phase1);
  f.get("epochs_phase2", c.epochs_phase2);
  f.get("epoch_scale", c.epoch_scale);
  f.get("max_steps", c.max_steps);
  f.get("checkpoint_every", c.checkpoint_every);
  f.get("lr_phase1", c.lr_phase1);
  f.get("lr_phase2", c.lr_phase2);
  f.get("weight_decay", c.weight_decay);
  f.get("views_per_step", c.views_per_step);
  f.get("w_chamfer", c.loss.chamfer);
  f.get("w_edge", c.loss.edge);
  f.get("w_laplacian", c.loss.laplacian);
  f.get("w_normal", c.loss.normal);
  f.get("resample_points", c.resample_points);
  f.get("train_gt_points", c.train_gt_points);
  f.get("chamfer_squared", c.chamfer_squared);
  f.get("train_noise", c.train_noise);
  f.get("refine_iterations", c.refine.iterations);
  f.get("refine_scales", c.refine.scales);
  f.get("backbone_channels", c.model.backbone_channels);
  f.get("image_channels", c.model.image_channels);
  f.get("coarse_hidden", c.model.coarse_hidden);
  f.get("mdn_hidden", c.model.mdn_hidden);
  f.get("coarse_level", c.model.coarse_level);
  f.get("ellipsoid_radius", c.model.ellipsoid_radius);
  f.finish();
  c.model.seed = c.seed;
  c.validate();
  return c;
}

RunConfig load_run_config(const fs::path& path) { return parse_run_config(read_text(path), path.string()); }

// ---- images ---------------------------------------------------------------------------

void save_pgm(const GrayImage& image, const fs::path& path) {
  if (image.pixels.size() != image.width * image.height) fail(ErrorCode::kShape, "pgm: pixel count mismatch");
  std::ofstream out(path, std::ios::binary);
  if (!out) fail(ErrorCode::kIo, "cannot write " + path.string());
  out << "P5\n" << image.width << ' ' << image.height << "\n255\n";
  out.write(reinterpret_cast<const char*>(image.pixels.data()), static_cast<std::streamsize>(image.pixels.size()));
  if (!out) fail(ErrorCode::kIo, "failed writing " + path.string());
}

GrayImage load_pgm(const fs::path& path) {
  const std::string bytes = read_text(path);
  std::size_t pos = 0;
  auto token = [&]() {
    while (pos < bytes.size()) {
      if (bytes[pos] == '#') {
        while (pos < bytes.size() && bytes[pos] != '\n') ++pos;
      } else if (std::isspace(static_cast<unsigned char>(bytes[pos]))) {
        ++pos;
      } else {
        break;
      }
    }
    const std::size_t start = pos;
    while (pos < bytes.size() && !std::isspace(static_cast<unsigned char>(bytes[pos]))) ++pos;
    return bytes.substr(start, pos - start);
  };
  auto number = [&](const char* what) {
    const std::string t = token();
    std::size_t v = 0;
    const auto [ptr, ec] = std::from_chars(t.data(), t.data() + t.size(), v);
    if (t.empty() || ec != std::errc() || ptr != t.data() + t.size())
      fail(ErrorCode::kFormat, path.string() + ": bad pgm " + what);
    return v;
  };
  if (token() != "P5") fail(ErrorCode::kFormat, path.string() + ": not a binary pgm (P5)");
  GrayImage img;
  img.width = number("width");
  img.height = number("height");
  const std::size_t maxval = number("maxval");
  if (maxval != 255) fail(ErrorCode::kFormat, path.string() + ": only 8-bit pgm is supported");
  ++pos;  // single whitespace before the raster
  if (bytes.size() < pos + img.width * img.height) fail(ErrorCode::kFormat, path.string() + ": truncated pgm");
  img.pixels.assign(bytes.begin() + static_cast<std::ptrdiff_t>(pos),
                    bytes.begin() + static_cast<std::ptrdiff_t>(pos + img.width * img.height));
  return img;
}

template <typename Real>
Tensor<Real> image_tensor(const GrayImage& image, std::size_t channels) {
  const std::size_t plane = image.width * image.height;
  std::vector<Real> data(channels * plane);
  for (std::size_t c = 0; c < channels; ++c)
    for (std::size_t i = 0; i < plane; ++i) data[c * plane + i] = static_cast<Real>(image.pixels[i]) / Real(255);
  return Tensor<Real>({channels, image.height, image.width}, std::move(data));
}

GrayImage render_mesh(const Mesh& mesh, const Camera& camera, const Vec3& light_dir) {
  const auto& K = camera.intrinsics;
  GrayImage img;
  img.width = K.width;
  img.height = K.height;
  img.pixels.assign(K.width * K.height, 0);
  std::vector<double> inv_depth(K.width * K.height, 0.0);
  const Vec3 light = normalized(light_dir);
  const auto& v = mesh.vertices();
  for (const Face& f : mesh.faces()) {
    std::array<Vec3, 3> cam;
    bool behind = false;
    for (int i = 0; i < 3; ++i) {
      cam[i] = world_to_camera(v[f[i]], camera.extrinsics);
      behind = behind || cam[i][2] <= kZNear;
    }
    if (behind) continue;
    std::array<double, 3> sx, sy, iz;
    for (int i = 0; i < 3; ++i) {
      iz[i] = 1.0 / cam[i][2];
      sx[i] = cam[i][0] * iz[i] * K.fx + K.cx;
      sy[i] = cam[i][1] * iz[i] * K.fy + K.cy;
    }
    const double area = (sx[1] - sx[0]) * (sy[2] - sy[0]) - (sx[2] - sx[0]) * (sy[1] - sy[0]);
    if (std::abs(area) < 1e-12) continue;
    const Vec3 n = normalized(cross(v[f[1]] - v[f[0]], v[f[2]] - v[f[0]]));
    const double shade = 0.2 + 0.8 * std::max(0.0, dot(n, light));
    const auto value = static_cast<std::uint8_t>(std::lround(255.0 * std::min(1.0, shade)));
    const auto lo_x = static_cast<long>(std::max(0.0, std::ceil(std::min({sx[0], sx[1], sx[2]}))));
    const auto hi_x = static_cast<long>(std::min(double(K.width) - 1, std::floor(std::max({sx[0], sx[1], sx[2]}))));
    const auto lo_y = static_cast<long>(std::max(0.0, std::ceil(std::min({sy[0], sy[1], sy[2]}))));
    const auto hi_y = static_cast<long>(std::min(double(K.height) - 1, std::floor(std::max({sy[0], sy[1], sy[2]}))));
    for (long py = lo_y; py <= hi_y; ++py)
      for (long px = lo_x; px <= hi_x; ++px) {
        const double x = double(px), y = double(py);
        const double w0 = ((sx[1] - x) * (sy[2] - y) - (sx[2] - x) * (sy[1] - y)) / area;
        const double w1 = ((sx[2] - x) * (sy[0] - y) - (sx[0] - x) * (sy[2] - y)) / area;
        const double w2 = 1.0 - w0 - w1;
        if (w0 < -1e-9 || w1 < -1e-9 || w2 < -1e-9) continue;
        const double depth = w0 * iz[0] + w1 * iz[1] + w2 * iz[2];
        const std::size_t idx = static_cast<std::size_t>(py) * K.width + static_cast<std::size_t>(px);
        if (depth > inv_depth[idx]) {
          inv_depth[idx] = depth;
          img.pixels[idx] = value;
        }
      }
  }
  return img;
}

// ---- point cloud files ---------------------------------------------------------------

namespace {

void put_u32(std::ostream& out, std::uint32_t v) {
  for (int i = 0; i < 4; ++i) out.put(static_cast<char>((v >> (8 * i)) & 0xFF));
}
void put_f64(std::ostream& out, double d) {
  const auto v = std::bit_cast<std::uint64_t>(d);
  for (int i = 0; i < 8; ++i) out.put(static_cast<char>((v >> (8 * i)) & 0xFF));
}

struct ByteReader {
  const std::string& bytes;
  std::size_t pos = 0;
  std::string origin;

  std::uint64_t uint(int width) {
    if (pos + static_cast<std::size_t>(width) > bytes.size()) fail(ErrorCode::kFormat, origin + ": truncated");
    std::uint64_t v = 0;
    for (int i = 0; i < width; ++i) v |= std::uint64_t(static_cast<unsigned char>(bytes[pos + i])) << (8 * i);
    pos += static_cast<std::size_t>(width);
    return v;
  }
  double f64() { return std::bit_cast<double>(uint(8)); }
};

constexpr char kCloudMagic[4] = {'P', 'C', 'L', 'D'};

}  // namespace

void save_point_cloud(const PointCloud& cloud, const fs::path& path) {
  cloud.validate();
  std::ofstream out(path, std::ios::binary);
  if (!out) fail(ErrorCode::kIo, "cannot write " + path.string());
  out.write(kCloudMagic, 4);
  put_u32(out, static_cast<std::uint32_t>(cloud.size()));
  out.put(cloud.normals.empty() ? 0 : 1);
  for (std::size_t i = 0; i < cloud.size(); ++i) {
    for (const double c : cloud.points[i]) put_f64(out, c);
    if (!cloud.normals.empty())
      for (const double c : cloud.normals[i]) put_f64(out, c);
  }
  if (!out) fail(ErrorCode::kIo, "failed writing " + path.string());
}

PointCloud load_point_cloud(const fs::path& path) {
  const std::string bytes = read_text(path);
  if (bytes.size() < 4 || bytes.compare(0, 4, std::string(kCloudMagic, 4)) != 0)
    fail(ErrorCode::kFormat, path.string() + ": not a point cloud file");
  ByteReader r{bytes, 4, path.string()};
  const auto count = static_cast<std::size_t>(r.uint(4));
  const bool has_normals = r.uint(1) != 0;
  PointCloud cloud;
  cloud.points.resize(count);
  if (has_normals) cloud.normals.resize(count);
  for (std::size_t i = 0; i < count; ++i) {
    for (auto& c : cloud.points[i]) c = r.f64();
    if (has_normals)
      for (auto& c : cloud.normals[i]) c = r.f64();
  }
  if (r.pos != bytes.size()) fail(ErrorCode::kFormat, path.string() + ": trailing bytes");
  cloud.validate();
  return cloud;
}

// ---- synthetic data --------------------------------------------------------------------

void SynthSpec::validate() const {
  if (scenes < 1) fail(ErrorCode::kConfig, "spec: scenes must be at least 1");
  if (test_scenes > scenes) fail(ErrorCode::kConfig, "spec: test_scenes exceeds scenes");
  if (families.empty()) fail(ErrorCode::kConfig, "spec: families is empty");
  for (const auto& f : families)
    if (f != "box" && f != "ellipsoid" && f != "cylinder" && f != "union")
      fail(ErrorCode::kConfig, "spec: unknown shape family '" + f + "'");
  if (!(size_min > 0.0) || !(size_max >= size_min)) fail(ErrorCode::kConfig, "spec: need 0 < size_min <= size_max");
  if (image_size < 4 || image_size % 4 != 0) fail(ErrorCode::kConfig, "spec: image_size must be a positive multiple of 4");
  if (views < 1) fail(ErrorCode::kConfig, "spec: views must be at least 1");
  if (!(ring_radius > 0.0)) fail(ErrorCode::kConfig, "spec: ring_radius must be positive");
  if (focal < 0.0) fail(ErrorCode::kConfig, "spec: focal must be nonnegative");
  if (gt_points < 1) fail(ErrorCode::kConfig, "spec: gt_points must be at least 1");
}

SynthSpec parse_synth_spec(const std::string& text, const std::string& origin) {
  SynthSpec s;
  Fields f(parse_key_values(text, origin), origin);
  f.get("scenes", s.scenes);
  f.get("families", s.families);
  f.get("size_min", s.size_min);
  f.get("size_max", s.size_max);
  f.get("image_size", s.image_size);
  f.get("views", s.views);
  f.get("ring_radius", s.ring_radius);
  f.get("ring_height", s.ring_height);
  f.get("focal", s.focal);
  f.get("gt_points", s.gt_points);
  f.get("test_scenes", s.test_scenes);
  f.finish();
  s.validate();
  return s;
}

SynthSpec load_synth_spec(const fs::path& path) { return parse_synth_spec(read_text(path), path.string()); }

namespace {

// Orients every face of a convex solid containing the origin outward.
std::vector<Face> orient_outward(const std::vector<Vec3>& v, std::vector<Face> faces) {
  for (Face& f : faces) {
    const Vec3 n = cross(v[f[1]] - v[f[0]], v[f[2]] - v[f[0]]);
    const Vec3 c = (1.0 / 3.0) * (v[f[0]] + v[f[1]] + v[f[2]]);
    if (dot(n, c) < 0.0) std::swap(f[1], f[2]);
  }
  return faces;
}

Mesh box_mesh(const Vec3& half, const Vec3& center) {
  std::vector<Vec3> v;
  for (int i = 0; i < 8; ++i)
    v.push_back({(i & 1) ? half[0] : -half[0], (i & 2) ? half[1] : -half[1], (i & 4) ? half[2] : -half[2]});
  const int quads[6][4] = {{0, 2, 6, 4}, {1, 3, 7, 5}, {0, 1, 5, 4}, {2, 3, 7, 6}, {0, 1, 3, 2}, {4, 5, 7, 6}};
  std::vector<Face> faces;
  for (const auto& q : quads) {
    faces.push_back({Index(q[0]), Index(q[1]), Index(q[2])});
    faces.push_back({Index(q[0]), Index(q[2]), Index(q[3])});
  }
  faces = orient_outward(v, std::move(faces));
  for (Vec3& p : v) p = p + center;
  return Mesh(std::move(v), std::move(faces));
}

Mesh cylinder_mesh(double radius, double half_height, std::size_t segments) {
  std::vector<Vec3> v;
  for (int ring = 0; ring < 2; ++ring)
    for (std::size_t i = 0; i < segments; ++i) {
      const double t = 2.0 * std::numbers::pi * double(i) / double(segments);
      v.push_back({radius * std::cos(t), ring == 0 ? -half_height : half_height, radius * std::sin(t)});
    }
  const auto bottom = Index(v.size());
  v.push_back({0.0, -half_height, 0.0});
  const auto top = Index(v.size());
  v.push_back({0.0, half_height, 0.0});
  std::vector<Face> faces;
  const auto n = Index(segments);
  for (Index i = 0; i < n; ++i) {
    const Index j = (i + 1) % n;
    faces.push_back({i, j, Index(n + j)});
    faces.push_back({i, Index(n + j), Index(n + i)});
    faces.push_back({bottom, i, j});
    faces.push_back({top, Index(n + i), Index(n + j)});
  }
  return Mesh(v, orient_outward(v, std::move(faces)));
}

Mesh merge(const Mesh& a, const Mesh& b) {
  std::vector<Vec3> v = a.vertices();
  std::vector<Face> faces = a.faces();
  const auto offset = Index(v.size());
  v.insert(v.end(), b.vertices().begin(), b.vertices().end());
  for (Face f : b.faces()) faces.push_back({Index(f[0] + offset), Index(f[1] + offset), Index(f[2] + offset)});
  return Mesh(std::move(v), std::move(faces));
}

std::string scene_name(std::size_t i) {
  char buf[32];
  std::snprintf(buf, sizeof buf, "scene_%04zu", i);
  return buf;
}

std::string view_name(std::size_t k, const char* ext) {
  char buf[32];
  std::snprintf(buf, sizeof buf, "view_%02zu.%s", k, ext);
  return buf;
}

void write_lines(const fs::path& path, const std::vector<std::string>& lines) {
  std::ofstream out(path);
  if (!out) fail(ErrorCode::kIo, "cannot write " + path.string());
  for (const auto& l : lines) out << l << '\n';
}

const Vec3 kLight{0.4, 0.8, 0.45};

}  // namespace

Mesh synth_shape(const std::string& family, const SynthSpec& spec, Rng& rng) {
  auto draw = [&](double factor) { return factor * rng.uniform(spec.size_min, spec.size_max); };
  if (family == "box") return box_mesh({draw(1), draw(1), draw(1)}, {0, 0, 0});
  if (family == "ellipsoid") return ellipsoid({draw(1), draw(1), draw(1)}, 3);
  if (family == "cylinder") {
    const double r = draw(1), h = draw(1);
    return cylinder_mesh(r, h, 32);
  }
  if (family == "union") {
    const Vec3 ha{draw(0.6), draw(0.6), draw(0.6)};
    const Vec3 hb{draw(0.6), draw(0.6), draw(0.6)};
    const double gap = 0.5 * spec.size_min;
    return merge(box_mesh(ha, {-(ha[0] + 0.5 * gap), 0, 0}), box_mesh(hb, {hb[0] + 0.5 * gap, 0, 0}));
  }
  fail(ErrorCode::kConfig, "unknown shape family '" + family + "'");
}

std::size_t synth_dataset(const SynthSpec& spec, const fs::path& out_dir, std::uint64_t seed) {
  spec.validate();
  std::error_code ec;
  fs::create_directories(out_dir, ec);
  if (ec || !fs::is_directory(out_dir)) fail(ErrorCode::kIo, "cannot create " + out_dir.string());
  const double focal = spec.focal > 0.0 ? spec.focal : 1.6 * double(spec.image_size);
  std::vector<std::string> train_ids, test_ids;
  for (std::size_t i = 0; i < spec.scenes; ++i) {
    Rng rng = Rng::stream(seed, i);
    const std::string& family = spec.families[i % spec.families.size()];
    const Mesh mesh = synth_shape(family, spec, rng);

    std::vector<Camera> cameras;
    const double start = rng.uniform(0.0, 2.0 * std::numbers::pi);
    for (std::size_t k = 0; k < spec.views; ++k) {
      const double t = start + 2.0 * std::numbers::pi * double(k) / double(spec.views);
      Camera cam;
      cam.intrinsics = {focal, focal, 0.5 * double(spec.image_size - 1), 0.5 * double(spec.image_size - 1),
                        spec.image_size, spec.image_size};
      cam.extrinsics = look_at({spec.ring_radius * std::cos(t), spec.ring_height, spec.ring_radius * std::sin(t)},
                               {0, 0, 0});
      for (const Vec3& p : mesh.vertices())
        if (!project(world_to_camera(p, cam.extrinsics), cam.intrinsics).valid)
          fail(ErrorCode::kDomain, "synth: shape leaves the image of view " + std::to_string(k) +
                                       "; increase ring_radius or lower focal");
      cameras.push_back(cam);
    }

    const SurfaceSamples samples = draw_surface_samples(mesh, spec.gt_points, rng);
    PointCloud cloud;
    for (std::size_t s = 0; s < samples.faces.size(); ++s) {
      const Face& f = mesh.faces()[samples.faces[s]];
      const auto& w = samples.weights[s];
      const auto& v = mesh.vertices();
      cloud.points.push_back(w[0] * v[f[0]] + w[1] * v[f[1]] + w[2] * v[f[2]]);
      cloud.normals.push_back(normalized(cross(v[f[1]] - v[f[0]], v[f[2]] - v[f[0]])));
    }

    const std::string id = scene_name(i);
    const fs::path dir = out_dir / id;
    fs::create_directories(dir, ec);
    if (ec) fail(ErrorCode::kIo, "cannot create " + dir.string());
    save_obj(mesh, dir / kSceneMesh);
    save_point_cloud(cloud, dir / kSceneCloud);
    save_cameras(cameras, dir / kSceneCameras);
    write_lines(dir / kSceneInfo, {"category = " + family});
    for (std::size_t k = 0; k < cameras.size(); ++k)
      save_pgm(render_mesh(mesh, cameras[k], kLight), dir / view_name(k, "pgm"));
    (i + spec.test_scenes >= spec.scenes ? test_ids : train_ids).push_back(id);
  }
  write_lines(out_dir / "train.txt", train_ids);
  write_lines(out_dir / "test.txt", test_ids);
  return spec.scenes;
}

// ---- scenes and datasets ---------------------------------------------------------------

Scene load_scene(const fs::path& dir) {
  if (!fs::is_directory(dir)) fail(ErrorCode::kIo, "scene directory not found: " + dir.string());
  Scene s;
  s.dir = dir;
  s.id = dir.filename().string();
  if (s.id.empty()) s.id = dir.parent_path().filename().string();
  if (fs::exists(dir / kSceneInfo)) {
    Fields f(parse_key_values(read_text(dir / kSceneInfo), (dir / kSceneInfo).string()),
             (dir / kSceneInfo).string());
    f.get("category", s.category);
    f.finish();
  }
  if (!fs::exists(dir / kSceneCameras)) fail(ErrorCode::kIo, "missing camera file " + (dir / kSceneCameras).string());
  s.cameras = load_cameras(dir / kSceneCameras);
  if (fs::exists(dir / kSceneCloud)) s.gt_cloud = load_point_cloud(dir / kSceneCloud);
  for (std::size_t k = 0; k < s.cameras.size(); ++k) {
    const fs::path fmap = dir / view_name(k, "fmap");
    const fs::path pgm = dir / view_name(k, "pgm");
    if (fs::exists(fmap)) s.inputs.push_back(fmap);
    else if (fs::exists(pgm)) s.inputs.push_back(pgm);
    else fail(ErrorCode::kIo, "missing input for view " + std::to_string(k) + " in " + dir.string());
  }
  return s;
}

std::vector<std::string> read_split(const fs::path& path) {
  std::istringstream in(read_text(path));
  std::vector<std::string> ids;
  std::string line;
  while (std::getline(in, line)) {
    line = trim(line);
    if (!line.empty() && line[0] != '#') ids.push_back(line);
  }
  return ids;
}

Dataset load_dataset(const fs::path& root, const std::string& train_split, const std::string& test_split) {
  if (!fs::is_directory(root)) fail(ErrorCode::kIo, "dataset not found: " + root.string());
  Dataset d;
  d.root = root;
  if (fs::exists(root / train_split)) d.train = read_split(root / train_split);
  if (fs::exists(root / test_split)) d.test = read_split(root / test_split);
  const std::set<std::string> train(d.train.begin(), d.train.end());
  for (const auto& id : d.test)
    if (train.count(id)) fail(ErrorCode::kConfig, "dataset: scene '" + id + "' is in both train and test splits");
  return d;
}

template <typename Real>
std::vector<View<Real>> scene_views(const Model<Real>& model, const Scene& scene,
                                    const std::vector<std::size_t>& which) {
  std::vector<View<Real>> views;
  for (const std::size_t k : which) {
    if (k >= scene.inputs.size()) fail(ErrorCode::kShape, "scene " + scene.id + " has no view " + std::to_string(k));
    View<Real> view;
    view.camera = scene.cameras[k];
    if (scene.inputs[k].extension() == ".fmap") {
      for (const auto& level : load_fmap(scene.inputs[k])) {
        std::vector<Real> data(level.data().begin(), level.data().end());
        view.pyramid.emplace_back(level.shape(), std::move(data));
      }
    } else {
      view.pyramid = model.backbone().forward(image_tensor<Real>(load_pgm(scene.inputs[k]), model.config().image_channels));
    }
    view.validate();
    views.push_back(std::move(view));
  }
  return views;
}

// ---- checkpoints --------------------------------------------------------------------------

namespace {

Tensor<float> values_tensor(const std::vector<double>& values) {
  std::vector<float> data(values.begin(), values.end());
  return Tensor<float>({values.size()}, std::move(data));
}

const NamedTensor& find_tensor(const std::vector<NamedTensor>& tensors, const std::string& name) {
  for (const auto& t : tensors)
    if (t.name == name) return t;
  fail(ErrorCode::kFormat, "checkpoint lacks " + name);
}

std::size_t to_count(float v) { return static_cast<std::size_t>(std::llround(v)); }

// Step counters are stored as two 24-bit halves so float32 holds them exactly.
Tensor<float> encode_count(std::uint64_t n) {
  return values_tensor({double(n & 0xFFFFFF), double(n >> 24)});
}
std::uint64_t decode_count(const Tensor<float>& t) {
  if (t.numel() != 2) fail(ErrorCode::kFormat, "checkpoint: malformed counter");
  return std::uint64_t(to_count(t.data()[0])) | (std::uint64_t(to_count(t.data()[1])) << 24);
}

}  // namespace

void save_model_checkpoint(const fs::path& path, const Model<float>& model, const RefineConfig& refine,
                           const std::vector<NamedTensor>& extra) {
  std::vector<NamedTensor> tensors = to_named(model.params().entries());
  const ModelConfig& c = model.config();
  tensors.push_back({"model/backbone_channels", values_tensor({double(c.backbone_channels[0]),
                                                               double(c.backbone_channels[1]),
                                                               double(c.backbone_channels[2])})});
  tensors.push_back({"model/image_channels", values_tensor({double(c.image_channels)})});
  tensors.push_back({"model/coarse_hidden", values_tensor({double(c.coarse_hidden)})});
  tensors.push_back({"model/mdn_hidden", values_tensor({double(c.mdn_hidden)})});
  tensors.push_back({"model/coarse_level", values_tensor({double(c.coarse_level)})});
  tensors.push_back({"model/ellipsoid_radius", values_tensor({c.ellipsoid_radius})});
  tensors.push_back({"refine/iterations", values_tensor({double(refine.iterations)})});
  tensors.push_back({"refine/scales", values_tensor(refine.scales)});
  tensors.insert(tensors.end(), extra.begin(), extra.end());
  if (path.has_parent_path()) fs::create_directories(path.parent_path());
  save_checkpoint(path, tensors);
}

LoadedModel load_model_checkpoint(const fs::path& path) {
  LoadedModel out;
  out.tensors = load_checkpoint(path);
  const auto& t = out.tensors;
  ModelConfig c;
  const auto channels = find_tensor(t, "model/backbone_channels").value.data();
  if (channels.size() != 3) fail(ErrorCode::kFormat, "checkpoint: malformed model/backbone_channels");
  for (int i = 0; i < 3; ++i) c.backbone_channels[i] = to_count(channels[i]);
  c.image_channels = to_count(find_tensor(t, "model/image_channels").value.data()[0]);
  c.coarse_hidden = to_count(find_tensor(t, "model/coarse_hidden").value.data()[0]);
  c.mdn_hidden = to_count(find_tensor(t, "model/mdn_hidden").value.data()[0]);
  c.coarse_level = static_cast<int>(to_count(find_tensor(t, "model/coarse_level").value.data()[0]));
  c.ellipsoid_radius = find_tensor(t, "model/ellipsoid_radius").value.data()[0];
  out.refine.iterations = to_count(find_tensor(t, "refine/iterations").value.data()[0]);
  const auto scales = find_tensor(t, "refine/scales").value.data();
  out.refine.scales.assign(scales.begin(), scales.end());
  out.refine.validate();
  out.model = std::make_unique<Model<float>>(c);
  load_into(out.model->params(), t);
  return out;
}

// ---- training -------------------------------------------------------------------------------

namespace {

constexpr std::uint64_t kOrderStream = 1ull << 40;

std::vector<std::size_t> epoch_order(std::uint64_t seed, std::size_t epoch, std::size_t n) {
  std::vector<std::size_t> order(n);
  std::iota(order.begin(), order.end(), std::size_t{0});
  Rng rng = Rng::stream(seed, kOrderStream + epoch);
  for (std::size_t i = n; i > 1; --i) std::swap(order[i - 1], order[rng.below(i)]);
  return order;
}

std::vector<std::size_t> pick_views(std::size_t available, std::size_t wanted, Rng& rng) {
  std::vector<std::size_t> all(available);
  std::iota(all.begin(), all.end(), std::size_t{0});
  const std::size_t k = std::min(wanted, available);
  for (std::size_t i = 0; i < k; ++i) std::swap(all[i], all[i + rng.below(available - i)]);
  all.resize(k);
  return all;
}

std::string format_row(const StepRecord& r) {
  std::ostringstream ss;
  ss.precision(17);
  ss << r.step << ',' << r.total << ',' << r.chamfer << ',' << r.edge << ',' << r.laplacian << ',' << r.normal;
  return ss.str();
}

PointCloud subsample(const PointCloud& cloud, std::size_t target) {
  if (target == 0 || target >= cloud.size()) return cloud;
  PointCloud out;
  for (std::size_t i = 0; i < target; ++i) {
    const std::size_t j = i * cloud.size() / target;
    out.points.push_back(cloud.points[j]);
    if (!cloud.normals.empty()) out.normals.push_back(cloud.normals[j]);
  }
  return out;
}

constexpr const char* kCsvHeader = "step,total,chamfer,edge,laplacian,normal";

}  // namespace

TrainSummary train(const RunConfig& config, const std::function<void(const StepRecord&)>& on_step) {
  config.validate();
  const Dataset dataset = load_dataset(config.dataset, config.train_split, config.test_split);
  if (dataset.train.empty()) fail(ErrorCode::kConfig, "train: split '" + config.train_split + "' lists no scenes");

  std::vector<Scene> scenes;
  std::vector<GroundTruth> truths;
  std::vector<std::vector<View<float>>> fixed_inputs;  // precomputed pyramids only
  std::vector<std::vector<Tensor<float>>> images;
  for (const auto& id : dataset.train) {
    Scene s = load_scene(dataset.root / id);
    if (s.gt_cloud.size() == 0) fail(ErrorCode::kIo, "train: scene " + id + " has no ground-truth cloud");
    if (s.gt_cloud.normals.empty()) fail(ErrorCode::kFormat, "train: scene " + id + " cloud lacks normals");
    truths.emplace_back(subsample(s.gt_cloud, config.train_gt_points));
    std::vector<Tensor<float>> imgs;
    for (const auto& in : s.inputs)
      imgs.push_back(in.extension() == ".fmap" ? Tensor<float>()
                                               : image_tensor<float>(load_pgm(in), config.model.image_channels));
    images.push_back(std::move(imgs));
    scenes.push_back(std::move(s));
  }

  Model<float> model(config.model);
  auto& params = model.params();
  Adam<float> adam({config.lr_phase1, 0.9, 0.999, 1e-8, config.weight_decay});
  std::size_t start = 0;
  if (!config.resume.empty()) {
    const auto tensors = load_checkpoint(config.resume);
    load_into(params, tensors);
    std::vector<std::pair<std::string, Tensor<float>>> optim;
    for (const auto& t : tensors)
      if (t.name.rfind("optim/", 0) == 0) optim.emplace_back(t.name, t.value);
    adam.load_state(optim);
    start = decode_count(find_tensor(tensors, "train/step").value);
  }

  const std::size_t n = scenes.size();
  const std::size_t phase1_steps = config.phase1_epochs() * n;
  std::size_t end = phase1_steps + config.phase2_epochs() * n;
  if (config.max_steps > 0) end = std::min(end, config.max_steps);

  fs::create_directories(config.output_dir);
  TrainSummary summary;
  summary.checkpoint = config.output_dir / kCheckpointFile;
  summary.loss_curve = config.output_dir / kLossCurveFile;
  summary.first_step = start;

  std::vector<std::string> kept;
  if (start > 0 && fs::exists(summary.loss_curve)) {
    const auto lines = read_split(summary.loss_curve);
    for (std::size_t i = 1; i < lines.size() && i <= start; ++i) kept.push_back(lines[i]);
  }
  std::ofstream csv(summary.loss_curve, std::ios::trunc);
  if (!csv) fail(ErrorCode::kIo, "cannot write " + summary.loss_curve.string());
  csv << kCsvHeader << '\n';
  for (const auto& l : kept) csv << l << '\n';

  auto save = [&](std::size_t steps_done) {
    std::vector<NamedTensor> extra = to_named(adam.state());
    extra.push_back({"train/step", encode_count(steps_done)});
    save_model_checkpoint(summary.checkpoint, model, config.refine, extra);
  };

  for (std::size_t step = start; step < end; ++step) {
    const std::size_t scene_index = epoch_order(config.seed, step / n, n)[step % n];
    const Scene& scene = scenes[scene_index];
    const int phase = step < phase1_steps ? 1 : 2;
    Rng rng = Rng::stream(config.seed, step);
    const auto which = pick_views(scene.cameras.size(), config.views_per_step, rng);
    adam.set_learning_rate(phase == 1 ? config.lr_phase1 : config.lr_phase2);

    StepRecord record;
    record.step = step + 1;
    record.phase = phase;
    record.scene_id = scene.id;

    Tape<float> tape;
    Tensor<float> total;
    {
      TapeScope<float> scope(tape);
      std::vector<View<float>> views;
      for (const std::size_t k : which) {
        View<float> view;
        if (images[scene_index][k].defined()) {
          view.camera = scene.cameras[k];
          view.pyramid = model.backbone().forward(images[scene_index][k]);
          if (phase == 1)
            for (auto& level : view.pyramid) level = level.detach();
          view.validate();
        } else {
          view = scene_views(model, scene, {k}).front();
        }
        views.push_back(std::move(view));
      }
      std::vector<StageOutput<float>> stages = model.coarse().forward(views);
      if (phase == 2) {
        const StageOutput<float>& last = stages.back();
        Tensor<float> input = last.vertices;
        if (config.train_noise > 0.0) {
          std::vector<float> noise(input.numel());
          for (auto& x : noise) x = static_cast<float>(config.train_noise * rng.normal());
          input = add(input, Tensor<float>(input.shape(), std::move(noise)));
        }
        auto refined = mdn_refine(input, last.topology, views, model.scorer(), config.refine);
        stages.insert(stages.end(), refined.begin(), refined.end());
      }
      for (const auto& stage : stages) {
        auto terms = total_loss(stage.vertices, stage.topology, stage.start, truths[scene_index], config.loss,
                                rng, config.resample_points, config.chamfer_squared);
        total = total.defined() ? add(total, terms.total) : terms.total;
        record.chamfer += terms.chamfer;
        record.edge += terms.edge;
        record.laplacian += terms.laplacian;
        record.normal += terms.normal;
      }
    }
    record.total = total.item();
    if (!std::isfinite(record.total)) {
      const auto where = tape.first_non_finite();
      fail(ErrorCode::kNumeric, "non-finite loss at step " + std::to_string(step + 1) + " (scene " + scene.id +
                                    "): " + where.value_or("loss"));
    }
    params.zero_grad();
    backward(tape, total);
    for (const auto& [name, t] : params.entries())
      if (t.has_grad())
        for (const float g : t.grad())
          if (!std::isfinite(g))
            fail(ErrorCode::kNumeric, "non-finite gradient for " + name + " at step " + std::to_string(step + 1));
    adam.step(params.entries(), phase == 1 ? std::vector<std::string>{"coarse/"}
                                           : std::vector<std::string>{"coarse/", "mdn/", "backbone/"});

    csv << format_row(record) << '\n';
    csv.flush();
    if (on_step) on_step(record);
    ++summary.steps;
    if (config.checkpoint_every > 0 && (step + 1) % config.checkpoint_every == 0) save(step + 1);
  }
  save(std::max(start, end));
  return summary;
}

// ---- refinement and evaluation -----------------------------------------------------------

namespace {

std::vector<std::size_t> first_views(const Scene& scene, std::size_t k) {
  const std::size_t count = k == 0 ? scene.cameras.size() : std::min(k, scene.cameras.size());
  std::vector<std::size_t> out(count);
  std::iota(out.begin(), out.end(), std::size_t{0});
  return out;
}

}  // namespace

std::vector<Mesh> refine_mesh(const LoadedModel& loaded, const Mesh& mesh, const Scene& scene,
                              std::size_t iterations, std::size_t views) {
  if (iterations == 0) return {};
  const auto input_views = scene_views(*loaded.model, scene, first_views(scene, views));
  RefineConfig rc = loaded.refine;
  rc.iterations = iterations;
  const auto stages = mdn_refine(mesh.vertex_tensor<float>(), mesh, input_views, loaded.model->scorer(), rc);
  std::vector<Mesh> out;
  for (const auto& s : stages) out.push_back(s.topology);
  return out;
}

EvalRow evaluate_mesh(const std::string& scene_id, const Mesh& mesh, const PointCloud& gt,
                      const MetricConfig& metric, Rng& rng) {
  metric.validate();
  const PointCloud pred = resample_mesh(mesh, metric.samples, rng, false);
  EvalRow row;
  row.scene_id = scene_id;
  row.cd = chamfer_distance(pred, gt);
  const FScore f = f_score(pred, gt, metric.tau);
  row.f_tau = f.f_tau;
  row.f_2tau = f.f_2tau;
  row.precision = f.precision;
  row.recall = f.recall;
  row.n_pred = pred.size();
  row.n_gt = gt.size();
  return row;
}

std::vector<EvalRow> evaluate(const fs::path& checkpoint, const fs::path& dataset, const EvalOptions& options) {
  options.metric.validate();
  if (options.views < 1) fail(ErrorCode::kConfig, "eval: views must be at least 1");
  const Dataset d = load_dataset(dataset);
  std::vector<std::string> ids;
  if (options.split == "test" || options.split == "all") ids.insert(ids.end(), d.test.begin(), d.test.end());
  if (options.split == "train" || options.split == "all") ids.insert(ids.end(), d.train.begin(), d.train.end());
  if (options.split != "test" && options.split != "train" && options.split != "all")
    fail(ErrorCode::kUsage, "eval: split must be test, train or all");
  std::sort(ids.begin(), ids.end());
  if (ids.empty()) fail(ErrorCode::kConfig, "eval: split '" + options.split + "' lists no scenes");

  const LoadedModel loaded = load_model_checkpoint(checkpoint);
  std::vector<EvalRow> rows;
  for (std::size_t i = 0; i < ids.size(); ++i) {
    const Scene scene = load_scene(d.root / ids[i]);
    if (scene.gt_cloud.size() == 0) fail(ErrorCode::kIo, "eval: scene " + ids[i] + " has no ground-truth cloud");
    const auto views = scene_views(*loaded.model, scene, first_views(scene, options.views));
    const auto out = loaded.model->forward(views, loaded.refine);
    const Mesh& mesh = out.refined.empty() ? out.coarse.back().topology : out.refined.back().topology;
    Rng rng = Rng::stream(options.seed, i);
    rows.push_back(evaluate_mesh(scene.id, mesh, scene.gt_cloud, options.metric, rng));
  }
  return rows;
}

void write_report(const std::vector<EvalRow>& rows, const fs::path& path) {
  using nlohmann::json;
  json report = json::array();
  EvalRow mean;
  mean.scene_id = "mean";
  double n_pred = 0.0, n_gt = 0.0;
  for (const auto& r : rows) {
    report.push_back({{"scene_id", r.scene_id}, {"cd", r.cd}, {"f_tau", r.f_tau}, {"f_2tau", r.f_2tau},
                      {"precision", r.precision}, {"recall", r.recall}, {"n_pred", r.n_pred}, {"n_gt", r.n_gt}});
    mean.cd += r.cd;
    mean.f_tau += r.f_tau;
    mean.f_2tau += r.f_2tau;
    mean.precision += r.precision;
    mean.recall += r.recall;
    n_pred += double(r.n_pred);
    n_gt += double(r.n_gt);
  }
  const double k = rows.empty() ? 1.0 : double(rows.size());
  report.push_back({{"scene_id", "mean"}, {"cd", mean.cd / k}, {"f_tau", mean.f_tau / k},
                    {"f_2tau", mean.f_2tau / k}, {"precision", mean.precision / k}, {"recall", mean.recall / k},
                    {"n_pred", n_pred / k}, {"n_gt", n_gt / k}});
  if (path.has_parent_path()) fs::create_directories(path.parent_path());
  std::ofstream out(path);
  if (!out) fail(ErrorCode::kIo, "cannot write " + path.string());
  out << report.dump(2) << '\n';
}

template Tensor<float> image_tensor<float>(const GrayImage&, std::size_t);
template Tensor<double> image_tensor<double>(const GrayImage&, std::size_t);
template std::vector<View<float>> scene_views<float>(const Model<float>&, const Scene&, const std::vector<std::size_t>&);
template std::vector<View<double>> scene_views<double>(const Model<double>&, const Scene&,
                                                       const std::vector<std::size_t>&);

}  // namespace p2mx
