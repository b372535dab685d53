#include <algorithm>
#include <cmath>
#include <cstdio>
#include <fstream>
#include <numeric>
#include <random>
#include <sstream>

#include "lumen/data.hpp"

namespace lumen {

namespace fs = std::filesystem;

Manifest read_manifest(const fs::path& path) {
  std::ifstream f(path);
  if (!f) throw Error("cannot open manifest '" + path.string() + "'");
  Manifest m;
  m.split = path.stem().string();
  const fs::path base = path.parent_path();
  std::string line;
  std::size_t line_no = 0;
  while (std::getline(f, line)) {
    ++line_no;
    if (!line.empty() && line.back() == '\r') line.pop_back();
    if (line.empty() || line[0] == '#') continue;
    std::vector<std::string> fields;
    std::stringstream ss(line);
    std::string field;
    while (std::getline(ss, field, '\t')) fields.push_back(field);
    if (fields.size() != 3 || fields[0].empty() || fields[1].empty())
      throw ParseError("manifest " + path.string() + ": line " + std::to_string(line_no) +
                           ": expected image<TAB>label<TAB>domain",
                       line_no);
    const fs::path img(fields[0]), lbl(fields[1]);
    m.entries.push_back({img.is_absolute() ? img : base / img, lbl.is_absolute() ? lbl : base / lbl,
                         fields[2]});
  }
  return m;
}

void write_manifest(const Manifest& manifest, const fs::path& path) {
  const fs::path base = fs::absolute(path).parent_path();
  std::ofstream f(path, std::ios::trunc);
  if (!f) throw Error("cannot write manifest '" + path.string() + "'");
  const auto rel = [&](const fs::path& p) { return fs::absolute(p).lexically_normal().lexically_relative(base); };
  for (const auto& e : manifest.entries)
    f << rel(e.image).generic_string() << '\t' << rel(e.label).generic_string() << '\t' << e.domain << '\n';
  if (!f) throw Error("failed writing manifest '" + path.string() + "'");
}

std::array<std::size_t, 4> split_sizes(std::size_t n, const SplitFractions& fractions) {
  double total = 0.0;
  for (double f : fractions.values) {
    if (!(f >= 0.0)) throw ConfigError("fractions", "split fractions must be non-negative");
    total += f;
  }
  if (total > 1.0 + 1e-9) throw ConfigError("fractions", "split fractions sum above 1");
  std::array<std::size_t, 4> sizes{};
  std::array<double, 4> rem{};
  std::size_t used = 0;
  for (int i = 0; i < 4; ++i) {
    const double exact = fractions.values[i] * static_cast<double>(n);
    sizes[i] = static_cast<std::size_t>(std::floor(exact));
    rem[i] = exact - static_cast<double>(sizes[i]);
    used += sizes[i];
  }
  const auto target = static_cast<std::size_t>(std::llround(std::min(1.0, total) * static_cast<double>(n)));
  std::array<int, 4> order = {0, 1, 2, 3};
  std::stable_sort(order.begin(), order.end(), [&](int a, int b) { return rem[a] > rem[b]; });
  for (int k = 0; used < target && k < 4; ++k, ++used) ++sizes[order[k]];
  return sizes;
}

std::array<Manifest, 4> make_splits(const Manifest& all, const SplitFractions& fractions,
                                    std::uint64_t seed) {
  const auto sizes = split_sizes(all.entries.size(), fractions);
  for (int i = 0; i < 4; ++i)
    if (fractions.values[i] > 0.0 && sizes[i] == 0)
      throw Error("make_splits: too few images (" + std::to_string(all.entries.size()) + ") for split '" +
                  kSplitNames[i] + "'");
  std::vector<std::size_t> idx(all.entries.size());
  std::iota(idx.begin(), idx.end(), std::size_t{0});
  std::mt19937_64 rng(seed);
  // Fisher-Yates with an explicit draw so the order is library-independent.
  for (std::size_t i = idx.size(); i > 1; --i) std::swap(idx[i - 1], idx[rng() % i]);
  std::array<Manifest, 4> out;
  std::size_t pos = 0;
  for (int s = 0; s < 4; ++s) {
    out[s].split = kSplitNames[s];
    std::vector<std::size_t> part(idx.begin() + static_cast<std::ptrdiff_t>(pos),
                                  idx.begin() + static_cast<std::ptrdiff_t>(pos + sizes[s]));
    std::sort(part.begin(), part.end());
    for (auto i : part) out[s].entries.push_back(all.entries[i]);
    pos += sizes[s];
  }
  return out;
}

GeneratedDataset generate_dataset(const SynthSpec& spec, std::size_t count, const fs::path& out_dir,
                                  const SplitFractions& fractions) {
  spec.validate();
  if (count < 1) throw ConfigError("count", "must be >= 1");
  const SynthSpec hard = spec.shifted();
  fs::create_directories(out_dir / "images");
  fs::create_directories(out_dir / "labels");

  Manifest all;
  all.split = "all";
  for (std::size_t i = 0; i < count; ++i) {
    char stem[32];
    std::snprintf(stem, sizeof(stem), "%06zu", i);
    all.entries.push_back({out_dir / "images" / (std::string(stem) + ".ppm"),
                           out_dir / "labels" / (std::string(stem) + ".txt"), "synthetic"});
  }
  auto splits = make_splits(all, fractions, spec.seed);
  std::vector<char> shifted(count, 0);
  for (const auto& e : splits[3].entries) {
    const auto i = static_cast<std::size_t>(std::stoul(e.image.stem().string()));
    shifted[i] = 1;
  }

  std::vector<std::string> failures(count);
#pragma omp parallel for schedule(dynamic)
  for (std::size_t i = 0; i < count; ++i) {
    try {
      const auto sample = synth_sample(shifted[i] ? hard : spec, i);
      save_image(sample.image, all.entries[i].image);
      std::ofstream lf(all.entries[i].label, std::ios::trunc);
      lf << write_label_file(sample.labels, sample.image.width, sample.image.height);
      if (!lf) throw Error("cannot write '" + all.entries[i].label.string() + "'");
    } catch (const std::exception& e) {
      failures[i] = e.what();
    }
  }
  for (const auto& f : failures)
    if (!f.empty()) throw Error("generate: " + f);

  GeneratedDataset out;
  out.root = out_dir;
  out.all_manifest = out_dir / "all.tsv";
  write_manifest(all, out.all_manifest);
  for (int s = 0; s < 4; ++s) {
    out.split_manifests[s] = out_dir / (kSplitNames[s] + ".tsv");
    write_manifest(splits[s], out.split_manifests[s]);
  }
  std::ofstream(out_dir / "spec.txt", std::ios::trunc) << spec.to_text();
  return out;
}

LoadedSample load_sample(const ManifestEntry& entry, std::size_t image_id) {
  LoadedSample s;
  s.image = load_image(entry.image);
  s.labels = load_label_file(entry.label, s.image.width, s.image.height, image_id).annotations;
  return s;
}

}  // namespace lumen
