#include <doctest.h>

#include <cmath>

#include "lumen/train.hpp"
#include "support.hpp"

using namespace lumen;
using lumen::testing::read_file;
using lumen::testing::ScratchDir;

namespace {

const std::vector<int> kStrides = {8, 16, 32};

int owner_at(const AssignedTargets& t, std::size_t level, std::size_t image, std::size_t row, std::size_t col) {
  const auto& lv = t.levels[level];
  return lv.owner[(image * lv.height + row) * lv.width + col];
}

// Raw head maps for a `size` input filled with `fill`, gradients enabled.
RawPrediction raw_maps(std::size_t batch, int size, float fill) {
  RawPrediction raw;
  raw.input_size = size;
  for (int s : kStrides) {
    const auto side = static_cast<std::size_t>(size / s);
    raw.levels.push_back({Tensor({batch, 4, side, side}, fill), Tensor({batch, 1, side, side}, fill),
                          Tensor({batch, 1, side, side}, fill), s});
  }
  for (auto& lv : raw.levels)
    for (auto* t : {&lv.box, &lv.obj, &lv.cls}) t->set_requires_grad(true);
  return raw;
}

Annotation ann(float x1, float y1, float x2, float y2) { return {0, {x1, y1, x2, y2}, 0}; }

}  // namespace

TEST_SUITE("train") {

TEST_CASE("assignment routes boxes by size") {
  SUBCASE("a centered 40 px box at 640 goes to stride 8, center cell included") {
    const auto t = assign_targets({{ann(300, 300, 340, 340)}}, 640, kStrides);
    REQUIRE(t.boxes.size() == 1);
    CHECK(owner_at(t, 0, 0, 40, 40) == 0);
    for (int l : {1, 2})
      for (int o : t.levels[l].owner) CHECK(o == -1);
    // Neighbours whose centers lie inside the box.
    CHECK(owner_at(t, 0, 0, 39, 40) == 0);
    CHECK(owner_at(t, 0, 0, 41, 40) == 0);
    CHECK(owner_at(t, 0, 0, 40, 39) == 0);
    CHECK(owner_at(t, 0, 0, 40, 41) == 0);
  }
  SUBCASE("nested parent and child with one center separate by scale") {
    const auto t = assign_targets({{ann(170, 170, 470, 470), ann(295, 295, 345, 345)}}, 640, kStrides);
    REQUIRE(t.boxes.size() == 2);
    bool parent_s32 = false, child_s8 = false;
    for (int o : t.levels[2].owner) parent_s32 |= o == 0;
    for (int o : t.levels[0].owner) child_s8 |= o == 1;
    for (int o : t.levels[0].owner) CHECK(o != 0);
    for (int o : t.levels[2].owner) CHECK(o != 1);
    CHECK(parent_s32);
    CHECK(child_s8);
  }
  SUBCASE("routing thresholds scale with the input size") {
    // 20 px at 160 is 80 px at 640-equivalent scale: stride 16.
    const auto t = assign_targets({{ann(70, 70, 90, 90)}}, 160, kStrides);
    bool s16 = false;
    for (int o : t.levels[1].owner) s16 |= o == 0;
    CHECK(s16);
  }
  SUBCASE("empty image is all background") {
    const auto t = assign_targets({{}}, 160, kStrides);
    CHECK(t.assigned_cells() == 0);
    CHECK(t.boxes.empty());
  }
  SUBCASE("every box gets a cell and no cell holds two") {
    std::mt19937_64 rng(1);
    std::uniform_real_distribution<float> u(0.0f, 160.0f);
    for (int trial = 0; trial < 100; ++trial) {
      std::vector<std::vector<Annotation>> gts(2);
      for (auto& img : gts)
        for (int k = 0; k < 4; ++k) {
          const float a = u(rng), b = u(rng), c = u(rng), d = u(rng);
          if (std::abs(a - b) < 2 || std::abs(c - d) < 2) continue;
          img.push_back(ann(std::min(a, b), std::min(c, d), std::max(a, b), std::max(c, d)));
        }
      const auto t = assign_targets(gts, 160, kStrides);
      std::vector<int> cells(t.boxes.size(), 0);
      for (const auto& lv : t.levels)
        for (int o : lv.owner)
          if (o >= 0) ++cells[static_cast<std::size_t>(o)];
      for (int c : cells) REQUIRE(c >= 1);
    }
  }
  SUBCASE("boxes outside the image are skipped with a warning") {
    const auto t = assign_targets({{ann(200, 200, 240, 240)}}, 160, kStrides);
    CHECK(t.boxes.empty());
    CHECK(t.warnings.size() == 1);
  }
}

TEST_CASE("CIoU of two offset squares") {
  // IoU 2/6, enclosing diagonal^2 13, center distance^2 1, equal aspect.
  const double p[4] = {0, 0, 2, 2}, g[4] = {1, 0, 3, 2};
  CHECK(ciou(p, g) == doctest::Approx(1.0 / 3.0 - 1.0 / 13.0).epsilon(1e-6));
  CHECK(ciou(g, g) == doctest::Approx(1.0).epsilon(1e-6));
  // Disjoint boxes still get a finite, negative score.
  const double far[4] = {10, 10, 12, 12};
  CHECK(ciou(p, far) < 0.0);
}

TEST_CASE("objectness on an empty image with zero logits is ln 2") {
  auto raw = raw_maps(1, 64, 0.0f);
  const auto t = assign_targets({{}}, 64, kStrides);
  const auto out = compute_loss(raw, t);
  CHECK(out.terms.obj == doctest::Approx(std::log(2.0)).epsilon(1e-9));
  CHECK(out.terms.box == 0.0);
  CHECK(out.terms.cls == 0.0);
  CHECK(out.total.item() == doctest::Approx(std::log(2.0)).epsilon(1e-6));
}

TEST_CASE("all-background targets leave box and class gradients at exactly zero") {
  std::mt19937_64 rng(2);
  auto raw = raw_maps(2, 64, 0.0f);
  for (auto& lv : raw.levels)
    for (auto* tensor : {&lv.box, &lv.obj, &lv.cls})
      for (auto& v : tensor->data()) v = std::uniform_real_distribution<float>(-3.0f, 3.0f)(rng);
  const auto out = compute_loss(raw, assign_targets({{}, {}}, 64, kStrides));
  out.total.backward();
  double obj = 0.0;
  for (const auto& lv : raw.levels) {
    for (float g : lv.box.grad()) REQUIRE(g == 0.0f);
    for (float g : lv.cls.grad()) REQUIRE(g == 0.0f);
    for (float g : lv.obj.grad()) obj += std::abs(g);
  }
  CHECK(obj > 0.0);
}

TEST_CASE("loss approaches zero at the perfect fit") {
  const std::vector<std::vector<Annotation>> gts = {{ann(20, 24, 52, 60), ann(90, 90, 150, 140)}};
  const auto t = assign_targets(gts, 160, kStrides);
  REQUIRE(t.assigned_cells() > 0);
  auto raw = raw_maps(1, 160, -30.0f);
  for (std::size_t l = 0; l < 3; ++l) {
    const auto& tl = t.levels[l];
    auto& lv = raw.levels[l];
    const std::size_t plane = tl.height * tl.width;
    for (std::size_t i = 0; i < plane; ++i) {
      const int o = tl.owner[i];
      if (o < 0) continue;
      const auto d = t.ltrb(l, o, i / tl.width, i % tl.width);
      for (std::size_t k = 0; k < 4; ++k) {
        REQUIRE(d[k] > 0.0f);
        lv.box.data()[k * plane + i] = static_cast<float>(std::log(std::expm1(static_cast<double>(d[k]))));
      }
      lv.obj.data()[i] = 30.0f;
      lv.cls.data()[i] = 30.0f;
    }
  }
  const auto out = compute_loss(raw, t);
  CHECK(out.terms.box < 1e-4);
  CHECK(out.terms.obj < 1e-6);
  CHECK(out.terms.cls < 1e-6);
}

TEST_CASE("loss does not depend on batch order") {
  std::mt19937_64 rng(3);
  const std::vector<std::vector<Annotation>> gts = {{ann(10, 10, 40, 30)}, {ann(30, 20, 60, 60), ann(5, 5, 15, 20)}};
  auto a = raw_maps(2, 64, 0.0f);
  for (auto& lv : a.levels)
    for (auto* tensor : {&lv.box, &lv.obj, &lv.cls})
      for (auto& v : tensor->data()) v = std::uniform_real_distribution<float>(-2.0f, 2.0f)(rng);
  // Swap the two batch entries of every map.
  auto b = raw_maps(2, 64, 0.0f);
  for (std::size_t l = 0; l < 3; ++l) {
    const Tensor* src[3] = {&a.levels[l].box, &a.levels[l].obj, &a.levels[l].cls};
    Tensor* dst[3] = {&b.levels[l].box, &b.levels[l].obj, &b.levels[l].cls};
    for (int k = 0; k < 3; ++k) {
      const std::size_t half = src[k]->numel() / 2;
      auto s = src[k]->data();
      auto d = dst[k]->data();
      std::copy(s.begin(), s.begin() + half, d.begin() + half);
      std::copy(s.begin() + half, s.end(), d.begin());
    }
  }
  const auto la = compute_loss(a, assign_targets(gts, 64, kStrides));
  const auto lb = compute_loss(b, assign_targets({gts[1], gts[0]}, 64, kStrides));
  CHECK(la.terms.total == doctest::Approx(lb.terms.total).epsilon(1e-9));
  CHECK(la.terms.box == doctest::Approx(lb.terms.box).epsilon(1e-9));
}

TEST_CASE("train config validation and text form") {
  TrainConfig c;
  CHECK_NOTHROW(c.validate());
  c.epochs = 0;
  CHECK_THROWS_AS(c.validate(), ConfigError);
  c = {};
  c.image_size = 150;
  CHECK_THROWS_AS(c.validate(), ConfigError);
  c = {};
  c.epochs = 2;
  c.schedule.warmup_epochs = 3;
  CHECK_THROWS_AS(c.validate(), ConfigError);

  auto kv = KeyValues::parse("epochs=7\nlr0=0.002\ntrain_manifest=data/train.tsv\nseed=5\n");
  const auto parsed = TrainConfig::from_keyvalues(kv, "/cfg");
  kv.expect_consumed();
  CHECK(parsed.epochs == 7);
  CHECK(parsed.schedule.total_epochs == 7.0);
  CHECK(parsed.schedule.lr0 == doctest::Approx(0.002));
  CHECK(parsed.seed == 5);
  CHECK(parsed.train_manifest == std::filesystem::path("/cfg/data/train.tsv"));
  auto again = KeyValues::parse(parsed.to_text());
  CHECK(TrainConfig::from_keyvalues(again).to_text() == parsed.to_text());
}

TEST_CASE("short training runs are reproducible and improve the loss") {
  ScratchDir dir("fit");
  SynthSpec spec;
  spec.image_size = 64;
  spec.radius = {0.12, 0.25};
  spec.max_orifices = 2;
  const auto ds = generate_dataset(spec, 30, dir / "data", SplitFractions{{0.8, 0.2, 0.0, 0.0}});
  const auto train = read_manifest(ds.split_manifests[0]);
  const auto val = read_manifest(ds.split_manifests[1]);

  TrainConfig cfg;
  cfg.epochs = 3;
  cfg.schedule.total_epochs = 3;
  cfg.schedule.warmup_epochs = 1;
  cfg.schedule.lr0 = 0.01;
  cfg.batch_size = 8;
  cfg.image_size = 64;
  cfg.seed = 4;
  auto mcfg = ModelConfig::desk();
  mcfg.max_channels = 32;

  std::vector<EpochLog> seen;
  Detector a(mcfg, cfg.seed), b(mcfg, cfg.seed);
  const auto ra = fit(a, train, val, cfg, dir / "a", [&](const EpochLog& e) { seen.push_back(e); });
  const auto rb = fit(b, train, val, cfg, dir / "b");
  REQUIRE(ra.log.size() == 3);
  CHECK(seen.size() == 3);
  CHECK(read_file(ra.log_path) == read_file(rb.log_path));
  CHECK(read_file(ra.last_checkpoint) == read_file(rb.last_checkpoint));
  CHECK(std::filesystem::exists(ra.best_checkpoint));
  CHECK(ra.log.back().loss.total < ra.log.front().loss.total);
  const auto header = train_log_header();
  CHECK(read_file(ra.log_path).rfind(header, 0) == 0);
  CHECK(header.find("val_map5095") != std::string::npos);

  Manifest empty;
  CHECK_THROWS_AS(fit(a, empty, val, cfg, dir / "c"), Error);
}

}  // TEST_SUITE
