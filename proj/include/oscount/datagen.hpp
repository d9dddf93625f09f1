#pragma once

#include <array>
#include <cstdint>
#include <map>
#include <string>
#include <vector>

#include "oscount/features.hpp"
#include "oscount/rng.hpp"
#include "oscount/tensor.hpp"

namespace oscount {

/// One counting task: an RGB image in [0,1], a support box around one target
/// instance, the centers of every target-category instance, and the category.
struct CountingSample {
  Tensor<float> image;
  SupportBox box;
  std::vector<std::array<double, 2>> points;  // (x, y) image pixels
  std::string category;
};

struct SceneSpec {
  int width = 64, height = 64;
  std::string target_category = "square";
  std::vector<std::string> distractor_categories;
  int count_min = 3, count_max = 12;
  int distractor_min = 1, distractor_max = 3;
  double base_size = 4.0;
  double size_jitter_min = 0.5, size_jitter_max = 1.5;
  bool rotate = true;
  double noise = 0.02;
  int max_attempts = 1000;
  int supersample = 4;  // AA subsamples per axis
};

const std::vector<std::string>& shape_catalog();

/// Renders one scene: target instances with independent size/rotation/color
/// jitter, distractors from other categories, non-overlapping placement by
/// rejection sampling. Deterministic given the rng state.
CountingSample generate_scene(const SceneSpec& spec, Rng& rng);

struct AugmentParams {
  bool flip = false;
  double scale = 1.0;
};

/// Applies an explicit flip/scale; output dims snap to the given stride
/// multiple and points/box move under the same transform. Throws if the box
/// degenerates.
CountingSample augment_with(const CountingSample& sample, const AugmentParams& params,
                            int stride_multiple);

/// Training augmentation: horizontal flip w.p. 0.5, uniform scale in
/// [0.8, 1.25]; redraws the scale if it degenerates the box.
CountingSample augment(const CountingSample& sample, Rng& rng, int stride_multiple);

/// Sample files: <stem>.tnsr holds the image, <stem>.json the annotation
/// {category, box:[x0,y0,x1,y1], points:[[x,y],...]}. Round-trips exactly.
void write_sample(const CountingSample& sample, const std::string& stem);
CountingSample read_sample(const std::string& stem);

struct SplitSpec {
  std::string name;
  int count = 0;
  std::vector<std::string> categories;
};

struct CorpusSpec {
  std::vector<SplitSpec> splits{{"train", 500, {"square", "circle", "triangle", "ring"}},
                                {"val", 100, {"star"}},
                                {"test", 100, {"cross"}}};
  int image_size = 64;
  std::uint64_t seed = 1;
  SceneSpec scene;  // size/count/noise knobs; per-sample fields are overwritten
};

struct Manifest {
  std::vector<std::string> split_names;
  std::map<std::string, std::vector<std::string>> ids;
  std::map<std::string, std::vector<std::string>> categories;
};

/// Builds the corpus under out_dir (manifest.json + samples/). Split target
/// categories must be pairwise disjoint; regeneration from the same spec is
/// bit-identical.
Manifest build_corpus(const CorpusSpec& spec, const std::string& out_dir);

/// Loads manifest.json and fails loudly if split categories overlap.
Manifest read_manifest(const std::string& dir);

std::string sample_stem(const std::string& dir, const std::string& id);
std::vector<CountingSample> load_split(const std::string& dir, const Manifest& manifest,
                                       const std::string& split);

}  // namespace oscount
