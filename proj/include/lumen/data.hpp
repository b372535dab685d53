#pragma once

#include <array>
#include <cstdint>
#include <filesystem>
#include <string>
#include <vector>

#include "lumen/image.hpp"
#include "lumen/keyvalue.hpp"
#include "lumen/metrics.hpp"

namespace lumen {

// ---- label files: "class cx cy w h", normalized to image dims ----

struct LabelParse {
  std::vector<Annotation> annotations;  // pixel space
  std::vector<std::string> warnings;    // out-of-range values that were clamped
};

LabelParse parse_label_file(const std::string& text, int image_width, int image_height,
                            std::size_t image_id = 0);
std::string write_label_file(const std::vector<Annotation>& annotations, int image_width,
                             int image_height);

LabelParse load_label_file(const std::filesystem::path& path, int image_width, int image_height,
                           std::size_t image_id = 0);

// ---- synthetic lumen scenes ----

struct Range {
  double lo = 0.0, hi = 0.0;
};

struct SynthSpec {
  int image_size = 160;
  int min_orifices = 1;
  int max_orifices = 3;
  double nesting_probability = 0.3;
  Range radius = {0.08, 0.22};  // semi-axis, fraction of image size
  Range darkness = {0.55, 0.9};
  double texture_amplitude = 0.08;
  Range blur_length = {0.0, 3.0};  // pixels
  Range contrast = {0.75, 1.0};
  Range exposure = {0.0, 0.25};
  double noise = 0.01;
  std::uint64_t seed = 7;

  void validate() const;
  std::string to_text() const;
  static SynthSpec from_keyvalues(KeyValues& kv);
  static SynthSpec from_text(const std::string& text);

  // Harder blur/contrast/exposure used for the cross-domain test split.
  SynthSpec shifted() const;
};

// Ellipse with semi-axes (a, b) rotated by theta around (cx, cy), in pixels.
struct Ellipse {
  double cx = 0, cy = 0, a = 0, b = 0, theta = 0;
  double darkness = 0;

  BBox aabb() const;
};

struct SynthSample {
  Image image;
  std::vector<Ellipse> ellipses;   // everything rasterized
  std::vector<Annotation> labels;  // visible ellipses, AABB clamped in-image
};

std::uint64_t sample_seed(std::uint64_t seed, std::uint64_t index);
SynthSample synth_sample(const SynthSpec& spec, std::uint64_t index);

// ---- manifests and splits ----

struct ManifestEntry {
  std::filesystem::path image;
  std::filesystem::path label;
  std::string domain = "synthetic";
};

struct Manifest {
  std::string split;
  std::vector<ManifestEntry> entries;
};

// Paths in the file are relative to the manifest's directory.
Manifest read_manifest(const std::filesystem::path& path);
void write_manifest(const Manifest& manifest, const std::filesystem::path& path);

struct SplitFractions {
  // Table 1 composition 2900/438/257/362 as ratios.
  std::array<double, 4> values = {2900.0 / 3957.0, 438.0 / 3957.0, 257.0 / 3957.0, 362.0 / 3957.0};
};

inline const std::array<std::string, 4> kSplitNames = {"train", "val", "test1", "test2"};

// Split sizes by largest remainder over floor(f * n).
std::array<std::size_t, 4> split_sizes(std::size_t n, const SplitFractions& fractions);
// Deterministic shuffled partition into train/val/test1/test2.
std::array<Manifest, 4> make_splits(const Manifest& all, const SplitFractions& fractions,
                                    std::uint64_t seed);

struct GeneratedDataset {
  std::filesystem::path root;
  std::array<std::filesystem::path, 4> split_manifests;
  std::filesystem::path all_manifest;
};

// Renders `count` scenes under `out_dir`; test2 samples use spec.shifted().
GeneratedDataset generate_dataset(const SynthSpec& spec, std::size_t count,
                                  const std::filesystem::path& out_dir,
                                  const SplitFractions& fractions = {});

struct LoadedSample {
  Image image;
  std::vector<Annotation> labels;
};
LoadedSample load_sample(const ManifestEntry& entry, std::size_t image_id);

}  // namespace lumen
