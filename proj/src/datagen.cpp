#include "oscount/datagen.hpp"

#include <algorithm>
#include <cmath>
#include <filesystem>
#include <fstream>
#include <set>
#include <sstream>
#include <stdexcept>

#include <json.hpp>

#include "oscount/tensor_io.hpp"

namespace oscount {

namespace {

using json = nlohmann::json;

constexpr double kTwoPi = 6.283185307179586476925286766559;

struct Instance {
  std::string category;
  double cx = 0, cy = 0;
  double size = 0;  // characteristic radius
  double rot = 0;
  std::array<double, 3> color{1, 1, 1};
};

// Shapes are defined in a local frame of unit characteristic radius and
// tested point-wise; polygons use even-odd ray casting.
std::vector<std::array<double, 2>> polygon_vertices(const std::string& cat) {
  if (cat == "square") return {{1, 1}, {-1, 1}, {-1, -1}, {1, -1}};
  if (cat == "triangle") {
    std::vector<std::array<double, 2>> v;
    for (int i = 0; i < 3; ++i) {
      const double a = kTwoPi * i / 3.0 + kTwoPi / 4.0;
      v.push_back({std::cos(a), std::sin(a)});
    }
    return v;
  }
  if (cat == "cross") {
    const double w = 0.35;
    return {{1, w},  {w, w},  {w, 1},  {-w, 1},  {-w, w},  {-1, w},
            {-1, -w}, {-w, -w}, {-w, -1}, {w, -1}, {w, -w}, {1, -w}};
  }
  if (cat == "star") {
    std::vector<std::array<double, 2>> v;
    for (int i = 0; i < 10; ++i) {
      const double r = i % 2 == 0 ? 1.0 : 0.4;
      const double a = kTwoPi * i / 10.0 + kTwoPi / 4.0;
      v.push_back({r * std::cos(a), r * std::sin(a)});
    }
    return v;
  }
  throw std::invalid_argument("unknown polygon category: " + cat);
}

bool point_in_polygon(const std::vector<std::array<double, 2>>& poly, double x, double y) {
  bool inside = false;
  for (std::size_t i = 0, j = poly.size() - 1; i < poly.size(); j = i++) {
    const auto& a = poly[i];
    const auto& b = poly[j];
    if ((a[1] > y) != (b[1] > y) && x < (b[0] - a[0]) * (y - a[1]) / (b[1] - a[1]) + a[0])
      inside = !inside;
  }
  return inside;
}

bool inside_local(const std::string& cat, double u, double v) {
  if (cat == "circle") return u * u + v * v <= 1.0;
  if (cat == "ring") {
    const double r2 = u * u + v * v;
    return r2 <= 1.0 && r2 >= 0.55 * 0.55;
  }
  static thread_local std::map<std::string, std::vector<std::array<double, 2>>> cache;
  auto it = cache.find(cat);
  if (it == cache.end()) it = cache.emplace(cat, polygon_vertices(cat)).first;
  return point_in_polygon(it->second, u, v);
}

bool inside_instance(const Instance& inst, double x, double y) {
  const double dx = x - inst.cx, dy = y - inst.cy;
  const double c = std::cos(-inst.rot), s = std::sin(-inst.rot);
  const double u = (dx * c - dy * s) / inst.size;
  const double v = (dx * s + dy * c) / inst.size;
  return inside_local(inst.category, u, v);
}

double bounding_radius(const std::string& cat, double size) {
  if (cat == "circle" || cat == "ring" || cat == "triangle" || cat == "star") return size;
  if (cat == "square") return size * std::sqrt(2.0);
  if (cat == "cross") return size * std::hypot(1.0, 0.35);
  throw std::invalid_argument("unknown category: " + cat);
}

// Tight axis-aligned bounds in image coords, accounting for rotation.
std::array<double, 4> instance_bounds(const Instance& inst) {
  if (inst.category == "circle" || inst.category == "ring")
    return {inst.cx - inst.size, inst.cy - inst.size, inst.cx + inst.size, inst.cy + inst.size};
  const auto poly = polygon_vertices(inst.category);
  double minx = 1e30, miny = 1e30, maxx = -1e30, maxy = -1e30;
  const double c = std::cos(inst.rot), s = std::sin(inst.rot);
  for (const auto& p : poly) {
    const double x = inst.cx + inst.size * (p[0] * c - p[1] * s);
    const double y = inst.cy + inst.size * (p[0] * s + p[1] * c);
    minx = std::min(minx, x);
    miny = std::min(miny, y);
    maxx = std::max(maxx, x);
    maxy = std::max(maxy, y);
  }
  return {minx, miny, maxx, maxy};
}

void render_instance(Tensor<float>& image, const Instance& inst, int supersample) {
  const int H = image.dim(1), W = image.dim(2);
  const auto b = instance_bounds(inst);
  const int x0 = std::max(0, static_cast<int>(std::floor(b[0])));
  const int y0 = std::max(0, static_cast<int>(std::floor(b[1])));
  const int x1 = std::min(W - 1, static_cast<int>(std::ceil(b[2])));
  const int y1 = std::min(H - 1, static_cast<int>(std::ceil(b[3])));
  float* px = image.data().data();
  const int ss = supersample;
  for (int y = y0; y <= y1; ++y)
    for (int x = x0; x <= x1; ++x) {
      int hits = 0;
      for (int sy = 0; sy < ss; ++sy)
        for (int sx = 0; sx < ss; ++sx)
          if (inside_instance(inst, x + (sx + 0.5) / ss, y + (sy + 0.5) / ss)) ++hits;
      if (hits == 0) continue;
      const float cov = static_cast<float>(hits) / static_cast<float>(ss * ss);
      for (int c = 0; c < 3; ++c) {
        float& v = px[(static_cast<std::size_t>(c) * H + y) * W + x];
        v = v * (1.0f - cov) + static_cast<float>(inst.color[c]) * cov;
      }
    }
}

std::array<double, 3> jitter_color(Rng& rng) {
  return {rng.uniform(0.35, 1.0), rng.uniform(0.35, 1.0), rng.uniform(0.35, 1.0)};
}

}  // namespace

const std::vector<std::string>& shape_catalog() {
  static const std::vector<std::string> cats{"square", "circle", "triangle", "cross", "ring", "star"};
  return cats;
}

CountingSample generate_scene(const SceneSpec& spec, Rng& rng) {
  if (spec.count_min < 1 || spec.count_max < spec.count_min)
    throw std::invalid_argument("scene: bad count range");
  const double max_brad = bounding_radius("square", spec.base_size * spec.size_jitter_max);
  if (2.0 * max_brad + 2.0 >= std::min(spec.width, spec.height))
    throw std::invalid_argument("scene: shapes do not fit the image at max size");

  const int n_targets = static_cast<int>(rng.uniform_int(spec.count_min, spec.count_max));
  const int n_distract =
      spec.distractor_categories.empty()
          ? 0
          : static_cast<int>(rng.uniform_int(spec.distractor_min, spec.distractor_max));

  std::vector<Instance> placed;
  auto place = [&](const std::string& category) {
    for (int attempt = 0; attempt < spec.max_attempts; ++attempt) {
      Instance inst;
      inst.category = category;
      inst.size = spec.base_size * rng.uniform(spec.size_jitter_min, spec.size_jitter_max);
      inst.rot = spec.rotate ? rng.uniform(0.0, kTwoPi) : 0.0;
      const double brad = bounding_radius(category, inst.size);
      inst.cx = rng.uniform(brad + 1.0, spec.width - brad - 1.0);
      inst.cy = rng.uniform(brad + 1.0, spec.height - brad - 1.0);
      bool ok = true;
      for (const auto& other : placed) {
        const double need = brad + bounding_radius(other.category, other.size) + 1.0;
        const double dx = inst.cx - other.cx, dy = inst.cy - other.cy;
        if (dx * dx + dy * dy < need * need) {
          ok = false;
          break;
        }
      }
      if (ok) {
        inst.color = jitter_color(rng);
        placed.push_back(inst);
        return;
      }
    }
    std::ostringstream os;
    os << "scene: placement failed after " << spec.max_attempts << " attempts (category "
       << category << ", " << placed.size() << " placed, image " << spec.width << "x"
       << spec.height << ", counts [" << spec.count_min << "," << spec.count_max << "])";
    throw std::runtime_error(os.str());
  };

  for (int i = 0; i < n_targets; ++i) place(spec.target_category);
  for (int i = 0; i < n_distract; ++i) {
    const auto& cats = spec.distractor_categories;
    place(cats[static_cast<std::size_t>(rng.uniform_int(0, static_cast<std::int64_t>(cats.size()) - 1))]);
  }

  CountingSample sample;
  sample.category = spec.target_category;
  sample.image = Tensor<float>::zeros({3, spec.height, spec.width});
  if (spec.noise > 0.0)
    for (auto& v : sample.image.data())
      v = static_cast<float>(std::clamp(std::abs(rng.gaussian()) * spec.noise, 0.0, 1.0));
  for (const auto& inst : placed) render_instance(sample.image, inst, spec.supersample);

  for (int i = 0; i < n_targets; ++i) sample.points.push_back({placed[i].cx, placed[i].cy});

  const int support = static_cast<int>(rng.uniform_int(0, n_targets - 1));
  const auto b = instance_bounds(placed[static_cast<std::size_t>(support)]);
  sample.box.x0 = std::max(0, static_cast<int>(std::floor(b[0])));
  sample.box.y0 = std::max(0, static_cast<int>(std::floor(b[1])));
  sample.box.x1 = std::min(spec.width, static_cast<int>(std::ceil(b[2])));
  sample.box.y1 = std::min(spec.height, static_cast<int>(std::ceil(b[3])));
  return sample;
}

namespace {

int snap_dim(double v, int multiple) {
  const int snapped = static_cast<int>(std::llround(v / multiple)) * multiple;
  return std::max(multiple, snapped);
}

// Pixel-center affine map used by bilinear_resize; points and box corners
// move under the same map so annotations stay aligned with the pixels.
double resize_coord(double v, double ratio) { return (v + 0.5) * ratio - 0.5; }

}  // namespace

CountingSample augment_with(const CountingSample& sample, const AugmentParams& params,
                            int stride_multiple) {
  const int H = sample.image.dim(1), W = sample.image.dim(2);
  const int H2 = snap_dim(H * params.scale, stride_multiple);
  const int W2 = snap_dim(W * params.scale, stride_multiple);
  const double ry = static_cast<double>(H2) / H, rx = static_cast<double>(W2) / W;

  CountingSample out;
  out.category = sample.category;
  if (H2 == H && W2 == W) {
    out.image = sample.image.clone_detached();
    out.points = sample.points;
    out.box = sample.box;
  } else {
    out.image = bilinear_resize(sample.image, H2, W2);
    for (const auto& p : sample.points)
      out.points.push_back({resize_coord(p[0], rx), resize_coord(p[1], ry)});
    out.box.x0 = std::max(0, static_cast<int>(std::floor(resize_coord(sample.box.x0, rx))));
    out.box.y0 = std::max(0, static_cast<int>(std::floor(resize_coord(sample.box.y0, ry))));
    out.box.x1 = std::min(W2, static_cast<int>(std::ceil(resize_coord(sample.box.x1, rx))));
    out.box.y1 = std::min(H2, static_cast<int>(std::ceil(resize_coord(sample.box.y1, ry))));
  }
  if (out.box.width() < 1 || out.box.height() < 1)
    throw std::invalid_argument("augment: scale " + std::to_string(params.scale) +
                                " degenerates the support box");

  if (params.flip) {
    Tensor<float> flipped = Tensor<float>::zeros({3, H2, W2});
    const float* src = out.image.data().data();
    float* dst = flipped.data().data();
    for (int c = 0; c < 3; ++c)
      for (int y = 0; y < H2; ++y)
        for (int x = 0; x < W2; ++x)
          dst[(static_cast<std::size_t>(c) * H2 + y) * W2 + x] =
              src[(static_cast<std::size_t>(c) * H2 + y) * W2 + (W2 - 1 - x)];
    out.image = flipped;
    for (auto& p : out.points) p[0] = W2 - p[0];
    const int nx0 = W2 - out.box.x1, nx1 = W2 - out.box.x0;
    out.box.x0 = nx0;
    out.box.x1 = nx1;
  }

  // Clamp points that the pixel-center map nudged past the edge.
  for (auto& p : out.points) {
    p[0] = std::clamp(p[0], 0.0, W2 - 1e-6);
    p[1] = std::clamp(p[1], 0.0, H2 - 1e-6);
  }
  return out;
}

CountingSample augment(const CountingSample& sample, Rng& rng, int stride_multiple) {
  AugmentParams params;
  params.flip = rng.bernoulli(0.5);
  for (int attempt = 0; attempt < 16; ++attempt) {
    params.scale = rng.uniform(0.8, 1.25);
    try {
      return augment_with(sample, params, stride_multiple);
    } catch (const std::invalid_argument&) {
      continue;  // degenerate box: redraw the scale
    }
  }
  params.scale = 1.0;
  return augment_with(sample, params, stride_multiple);
}

void write_sample(const CountingSample& sample, const std::string& stem) {
  write_tensor(sample.image, stem + ".tnsr");
  json j;
  j["category"] = sample.category;
  j["box"] = {sample.box.x0, sample.box.y0, sample.box.x1, sample.box.y1};
  json pts = json::array();
  for (const auto& p : sample.points) pts.push_back({p[0], p[1]});
  j["points"] = pts;
  std::ofstream f(stem + ".json", std::ios::trunc);
  if (!f) throw std::runtime_error("cannot open for write: " + stem + ".json");
  f << j.dump(2) << "\n";
}

CountingSample read_sample(const std::string& stem) {
  CountingSample sample;
  sample.image = read_tensor(stem + ".tnsr");
  const std::string path = stem + ".json";
  std::ifstream f(path);
  if (!f) throw std::runtime_error("cannot open: " + path);
  json j;
  try {
    j = json::parse(f);
  } catch (const json::parse_error& e) {
    throw std::runtime_error(path + ": parse error at byte offset " + std::to_string(e.byte) +
                             ": " + e.what());
  }
  for (const char* key : {"category", "box", "points"})
    if (!j.contains(key))
      throw std::runtime_error(path + ": missing \"" + std::string(key) + "\" key");
  sample.category = j["category"].get<std::string>();
  const auto& b = j["box"];
  if (!b.is_array() || b.size() != 4)
    throw std::runtime_error(path + ": \"box\" must be [x0,y0,x1,y1]");
  sample.box = {b[0].get<int>(), b[1].get<int>(), b[2].get<int>(), b[3].get<int>()};
  for (const auto& p : j["points"]) {
    if (!p.is_array() || p.size() != 2)
      throw std::runtime_error(path + ": \"points\" entries must be [x,y]");
    sample.points.push_back({p[0].get<double>(), p[1].get<double>()});
  }
  return sample;
}

std::string sample_stem(const std::string& dir, const std::string& id) {
  return dir + "/samples/" + id;
}

namespace {

void check_disjoint(const Manifest& m) {
  for (std::size_t i = 0; i < m.split_names.size(); ++i)
    for (std::size_t j = i + 1; j < m.split_names.size(); ++j) {
      const auto& a = m.categories.at(m.split_names[i]);
      const auto& b = m.categories.at(m.split_names[j]);
      for (const auto& cat : a)
        if (std::find(b.begin(), b.end(), cat) != b.end())
          throw std::runtime_error("corpus: category \"" + cat + "\" appears in both \"" +
                                   m.split_names[i] + "\" and \"" + m.split_names[j] + "\"");
    }
}

}  // namespace

Manifest build_corpus(const CorpusSpec& spec, const std::string& out_dir) {
  Manifest manifest;
  for (const auto& split : spec.splits) {
    if (split.categories.empty())
      throw std::invalid_argument("corpus: split \"" + split.name + "\" has no categories");
    manifest.split_names.push_back(split.name);
    manifest.categories[split.name] = split.categories;
  }
  check_disjoint(manifest);

  // Training categories double as distractors everywhere; val/test scenes
  // thus contain only seen distractor shapes while their target category
  // stays novel.
  const std::vector<std::string>& train_cats = spec.splits.front().categories;

  std::filesystem::create_directories(out_dir + "/samples");
  Rng base(spec.seed);
  std::uint64_t global_index = 0;
  for (const auto& split : spec.splits) {
    for (int i = 0; i < split.count; ++i, ++global_index) {
      Rng rng = base.derive(global_index);
      SceneSpec scene = spec.scene;
      scene.width = spec.image_size;
      scene.height = spec.image_size;
      scene.target_category =
          split.categories[static_cast<std::size_t>(rng.uniform_int(0, static_cast<std::int64_t>(split.categories.size()) - 1))];
      scene.distractor_categories.clear();
      for (const auto& cat : train_cats)
        if (cat != scene.target_category) scene.distractor_categories.push_back(cat);
      const CountingSample sample = generate_scene(scene, rng);
      std::ostringstream id;
      id << split.name << "_" << std::setw(5) << std::setfill('0') << i;
      write_sample(sample, sample_stem(out_dir, id.str()));
      manifest.ids[split.name].push_back(id.str());
    }
  }

  json j;
  for (const auto& name : manifest.split_names) j[name] = manifest.ids[name];
  json cats;
  for (const auto& [name, list] : manifest.categories) cats[name] = list;
  j["categories"] = cats;
  std::ofstream f(out_dir + "/manifest.json", std::ios::trunc);
  if (!f) throw std::runtime_error("cannot open for write: " + out_dir + "/manifest.json");
  f << j.dump(2) << "\n";
  return manifest;
}

Manifest read_manifest(const std::string& dir) {
  const std::string path = dir + "/manifest.json";
  std::ifstream f(path);
  if (!f) throw std::runtime_error("cannot open: " + path);
  json j;
  try {
    j = json::parse(f);
  } catch (const json::parse_error& e) {
    throw std::runtime_error(path + ": parse error at byte offset " + std::to_string(e.byte) +
                             ": " + e.what());
  }
  if (!j.contains("categories")) throw std::runtime_error(path + ": missing \"categories\" key");
  Manifest m;
  for (const auto& [key, value] : j.items()) {
    if (key == "categories") continue;
    m.split_names.push_back(key);
    m.ids[key] = value.get<std::vector<std::string>>();
  }
  std::sort(m.split_names.begin(), m.split_names.end());
  for (const auto& [key, value] : j["categories"].items())
    m.categories[key] = value.get<std::vector<std::string>>();
  for (const auto& name : m.split_names)
    if (!m.categories.count(name))
      throw std::runtime_error(path + ": no category list for split \"" + name + "\"");
  check_disjoint(m);
  return m;
}

std::vector<CountingSample> load_split(const std::string& dir, const Manifest& manifest,
                                       const std::string& split) {
  if (!manifest.ids.count(split)) throw std::invalid_argument("corpus: no split \"" + split + "\"");
  std::vector<CountingSample> samples;
  for (const auto& id : manifest.ids.at(split)) samples.push_back(read_sample(sample_stem(dir, id)));
  return samples;
}

}  // namespace oscount
