#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <cmath>
#include <filesystem>
#include <functional>
#include <set>

#include "phantom.hpp"
#include "train.hpp"

using namespace bc;
namespace fs = std::filesystem;

namespace {

ErrorCode code_of(const std::function<void()>& fn) {
  try {
    fn();
  } catch (const Error& e) {
    return e.code();
  }
  throw std::runtime_error("expected bc::Error");
}

fs::path fresh_dir(const char* tag) {
  fs::path dir = fs::temp_directory_path() / (std::string("bc_train_") + tag);
  fs::remove_all(dir);
  fs::create_directories(dir);
  return dir;
}

// Cohorts are slow to regenerate per test case; share one-series cohorts.
const fs::path& tiny_cohort() {
  static fs::path dir = [] {
    fs::path d = fresh_dir("tiny");
    generate_cohort(1, 404, 256, d);
    return d;
  }();
  return dir;
}

}  // namespace

TEST_CASE("task defaults follow the training protocol") {
  TrainConfig sel;
  sel.task = TaskKind::Selection;
  CHECK(epochs_of(sel) == 75);
  CHECK(base_lr_of(sel) == 0.001);

  TrainConfig seg;
  seg.task = TaskKind::Segmentation;
  CHECK(epochs_of(seg) == 100);
  CHECK(base_lr_of(seg) == 0.1);

  seg.epochs = 12;
  seg.base_lr = 0.5;
  CHECK(epochs_of(seg) == 12);
  CHECK(base_lr_of(seg) == 0.5);
}

TEST_CASE("lr_at decays by 10 at the real half and three-quarter marks") {
  TrainConfig sel;
  sel.task = TaskKind::Selection;  // E=75, base 0.001
  CHECK(lr_at(0, sel) == 0.001);
  CHECK(lr_at(37, sel) == 0.001);   // 37 < 37.5
  CHECK(lr_at(38, sel) == doctest::Approx(0.0001).epsilon(1e-12));
  CHECK(lr_at(56, sel) == doctest::Approx(0.0001).epsilon(1e-12));  // 56 < 56.25
  CHECK(lr_at(57, sel) == doctest::Approx(0.00001).epsilon(1e-12));

  TrainConfig seg;
  seg.task = TaskKind::Segmentation;  // E=100, base 0.1
  CHECK(lr_at(75, seg) == doctest::Approx(0.001).epsilon(1e-12));
  CHECK(lr_at(49, seg) == doctest::Approx(0.1).epsilon(1e-12));
  CHECK(lr_at(50, seg) == doctest::Approx(0.01).epsilon(1e-12));

  // non-increasing, exactly three distinct values
  std::set<double> values;
  double prev = lr_at(0, sel);
  for (int e = 0; e < 75; ++e) {
    double lr = lr_at(e, sel);
    CHECK(lr <= prev);
    prev = lr;
    values.insert(lr);
  }
  CHECK(values.size() == 3);

  TrainConfig small = sel;
  small.epochs = 4;
  values.clear();
  for (int e = 0; e < 4; ++e) values.insert(lr_at(e, small));
  CHECK(values.size() == 3);

  CHECK(code_of([&] { lr_at(-1, sel); }) == ErrorCode::InvalidSpec);
  CHECK(code_of([&] { lr_at(75, sel); }) == ErrorCode::InvalidSpec);
}

TEST_CASE("split_series partitions deterministically") {
  SeriesSplit split = split_series(200, 0.15, 0.15, 9);
  CHECK(split.val.size() == 30);
  CHECK(split.test.size() == 30);
  CHECK(split.train.size() == 140);

  std::set<int> seen;
  for (int i : split.train) seen.insert(i);
  for (int i : split.val) seen.insert(i);
  for (int i : split.test) seen.insert(i);
  CHECK(seen.size() == 200);
  CHECK(*seen.begin() == 0);
  CHECK(*seen.rbegin() == 199);

  SeriesSplit again = split_series(200, 0.15, 0.15, 9);
  CHECK(again.train == split.train);
  CHECK(again.val == split.val);

  SeriesSplit other = split_series(200, 0.15, 0.15, 10);
  CHECK(other.train != split.train);

  SeriesSplit solo = split_series(1, 0.15, 0.15, 9);
  CHECK(solo.train.size() == 1);
  CHECK(solo.val.empty());
  CHECK(solo.test.empty());
}

TEST_CASE("zero augmentation is the identity transform") {
  FloatImage img;
  img.rows = img.cols = 32;
  img.px.resize(32 * 32);
  Rng rng(3);
  for (float& v : img.px) v = static_cast<float>(rng.uniform(0, 255));
  FloatImage out = warp_image(img, 0, 0, 0);
  CHECK(out.px == img.px);

  std::vector<uint8_t> mask(32 * 32, 2);
  CHECK(warp_mask(mask, 32, 32, 0, 0, 0) == mask);
}

TEST_CASE("a 0.05 translation on a 512 image shifts content 25.6 px") {
  PhantomSpec spec;
  SliceRaster raster = rasterize_slice(spec, spec.l3_index);
  CtSlice slice;
  slice.rows = slice.cols = 512;
  slice.hu = raster.hu;
  FloatImage orig = window_normalize(slice);
  FloatImage shifted = warp_image(orig, 0.05 * 512, 0.0, 0.0);

  // integer cross-correlation over x with parabolic sub-pixel refinement
  auto corr = [&](int s) {
    double acc = 0;
    for (int r = 0; r < 512; ++r)
      for (int c = s; c < 512; ++c)
        acc += static_cast<double>(shifted.px[r * 512 + c]) * orig.px[r * 512 + c - s];
    return acc;
  };
  int best_s = 20;
  double best_c = corr(20);
  std::vector<double> values = {best_c};
  for (int s = 21; s <= 31; ++s) {
    double c = corr(s);
    values.push_back(c);
    if (c > best_c) {
      best_c = c;
      best_s = s;
    }
  }
  REQUIRE(best_s > 20);
  REQUIRE(best_s < 31);
  double cm = values[best_s - 21], c0 = values[best_s - 20], cp = values[best_s - 19];
  double delta = 0.5 * (cm - cp) / (cm - 2 * c0 + cp);
  double estimate = best_s + delta;
  CHECK(std::abs(estimate - 25.6) <= 0.5);
}

TEST_CASE("mask augmentation never invents labels") {
  PhantomSpec spec;
  spec.image_size = 256;
  spec.pixel_spacing_mm = 1.0;
  spec.body_a_mm = 100.0;
  spec.body_b_mm = 74.0;
  SliceRaster raster = rasterize_slice(spec, spec.l3_index);

  // reduce to a two-label mask to make invention detectable
  std::vector<uint8_t> mask = raster.labels;
  for (uint8_t& v : mask) {
    if (v == 1) v = 0;
    if (v == 3) v = 2;
  }
  TrainConfig config;
  Rng rng(8);
  for (int trial = 0; trial < 10; ++trial) {
    AugmentDraw d = draw_augment(rng, config, 256);
    std::vector<uint8_t> warped = warp_mask(mask, 256, 256, d.dx_px, d.dy_px, d.angle_rad);
    for (uint8_t v : warped) CHECK((v == 0 || v == 2));
  }
}

TEST_CASE("one Adam step at lr=1e-5 strictly decreases a full-batch loss") {
  for (uint64_t trial = 0; trial < 10; ++trial) {
    Rng rng(100 + trial);
    const int n = 8, d = 4;
    std::vector<double> xv(n * d), wv(d), bv(1), tv(n);
    for (double& v : xv) v = rng.normal();
    for (double& v : wv) v = rng.normal() * 0.5;
    bv[0] = rng.normal() * 0.1;
    for (double& v : tv) v = rng.uniform(0.05, 0.95);

    auto loss_of = [&](const std::vector<double>& w, const std::vector<double>& b,
                       Graph<double>& g, Node<double>*& wn, Node<double>*& bn) {
      wn = g.leaf({d, 1}, w, true);
      bn = g.leaf({1}, b, true);
      Node<double>* x = g.leaf({n, d}, xv, false);
      Node<double>* t = g.leaf({n, 1}, tv, false);
      Node<double>* pred = sigmoid(g, dense(g, x, wn, bn));
      return mae_loss(g, pred, t);
    };

    Graph<double> g1;
    Node<double>*wn, *bn;
    Node<double>* loss = loss_of(wv, bv, g1, wn, bn);
    double before = loss->value[0];
    g1.backward(loss);

    AdamState<double> ws, bs;
    adam_step(std::span<double>(wv), std::span<const double>(wn->grad), ws, 1e-5);
    adam_step(std::span<double>(bv), std::span<const double>(bn->grad), bs, 1e-5);

    Graph<double> g2;
    double after = loss_of(wv, bv, g2, wn, bn)->value[0];
    CHECK(after < before);
  }
}

TEST_CASE("selector overfits a single series") {
  DenseNetSpec spec;
  spec.b = 2;
  spec.k = 8;
  spec.blocks = 2;
  spec.input_size = 128;

  TrainConfig config;
  config.task = TaskKind::Selection;
  config.epochs = 30;
  config.base_lr = 0.01;
  config.val_fraction = 0;
  config.test_fraction = 0;
  config.translation_frac = 0;
  config.rotation_deg = 0;
  config.seed = 21;

  TrainResult result = train_selector(tiny_cohort(), spec, config);
  REQUIRE(result.log.size() == 30);
  CHECK(result.log.back().train_loss < 0.02);
}

TEST_CASE("segmenter overfits a single image") {
  UNetSpec spec;
  spec.d = 2;
  spec.l = 1;
  spec.f = 8;

  TrainConfig config;
  config.task = TaskKind::Segmentation;
  config.epochs = 50;
  config.batch_size = 1;
  config.val_fraction = 0;
  config.test_fraction = 0;
  config.translation_frac = 0;
  config.rotation_deg = 0;
  config.seed = 22;

  TrainResult result = train_segmenter(tiny_cohort(), spec, config);
  REQUIRE(!result.log.empty());
  double first_score = -result.log.front().train_loss;
  double final_score = -result.log.back().train_loss;
  CHECK(first_score > 0.0);
  CHECK(first_score < 3.0);
  CHECK(final_score > 2.9);
}

TEST_CASE("identical config and seed reproduce the loss curve and checkpoint") {
  DenseNetSpec spec;
  spec.b = 1;
  spec.k = 4;
  spec.blocks = 2;
  spec.input_size = 64;

  TrainConfig config;
  config.task = TaskKind::Selection;
  config.epochs = 3;
  config.val_fraction = 0;
  config.test_fraction = 0;
  config.seed = 33;
  config.log_path = fresh_dir("log_a") / "log.csv";

  TrainResult a = train_selector(tiny_cohort(), spec, config);
  config.log_path = fresh_dir("log_b") / "log.csv";
  TrainResult b = train_selector(tiny_cohort(), spec, config);

  REQUIRE(a.log.size() == b.log.size());
  for (size_t i = 0; i < a.log.size(); ++i) {
    CHECK(a.log[i].train_loss == b.log[i].train_loss);
    CHECK(a.log[i].val_metric == b.log[i].val_metric);
    CHECK(a.log[i].lr == b.log[i].lr);
  }

  fs::path ck_a = fresh_dir("ck_a") / "a.bcmp";
  fs::path ck_b = fresh_dir("ck_b") / "b.bcmp";
  save_checkpoint(*a.model, ck_a);
  save_checkpoint(*b.model, ck_b);
  CHECK(read_file(ck_a) == read_file(ck_b));

  // the per-epoch log landed on disk with one row per epoch
  std::vector<uint8_t> log_bytes = read_file(config.log_path);
  std::string text(log_bytes.begin(), log_bytes.end());
  CHECK(text.find("epoch,lr,train_loss,val_metric") == 0);
  CHECK(std::count(text.begin(), text.end(), '\n') == 4);
}

TEST_CASE("NaN guard restarts once with a warmup epoch") {
  int builds = 0;
  ModelBuilder builder = [&builds](uint64_t) -> std::unique_ptr<Model> {
    class Probe : public Model {
     public:
      explicit Probe(bool poisoned) : poisoned_(poisoned) {}
      uint32_t kind() const override { return kKindDenseNet; }
      uint32_t input_size() const override { return 32; }
      Forward run(Graph<float>& g, Node<float>* x, bool) override {
        int n = x->shape[0];
        float v = poisoned_ ? std::numeric_limits<float>::quiet_NaN() : 0.5f;
        Forward f;
        f.out = g.leaf({n, 1}, std::vector<float>(static_cast<size_t>(n), v), false);
        return f;
      }

     private:
      void append_spec(std::vector<uint8_t>&) const override {}
      bool poisoned_;
    };
    return std::make_unique<Probe>(builds++ == 0);
  };

  TrainConfig config;
  config.task = TaskKind::Selection;
  config.epochs = 2;
  config.val_fraction = 0;
  config.test_fraction = 0;
  config.seed = 5;

  TrainResult result = train_selector(tiny_cohort(), builder, config);
  CHECK(builds == 2);
  CHECK(result.restarted);
  REQUIRE(result.log.size() == 2);
  for (const EpochLog& row : result.log) CHECK(std::isfinite(row.train_loss));
  // warmup epoch ran at a tenth of the base rate
  CHECK(result.log[0].lr == doctest::Approx(0.0001).epsilon(1e-9));
  CHECK(result.log[1].lr == doctest::Approx(0.001).epsilon(1e-9));
}

TEST_CASE("empty cohorts and bad labels are rejected") {
  fs::path empty = fresh_dir("empty");
  write_text_atomic(empty / "manifest.csv",
                    "series_id,z_l3_mm,l3_index,muscle_cm2,subcutaneous_cm2,visceral_cm2\n");
  DenseNetSpec dspec;
  TrainConfig config;
  CHECK(code_of([&] { train_selector(empty, dspec, config); }) == ErrorCode::EmptyCohort);

  // corrupt one mask label beyond the class range
  fs::path dir = fresh_dir("badlabel");
  std::vector<PhantomTruth> rows = generate_cohort(1, 77, 256, dir);
  char name[32];
  std::snprintf(name, sizeof(name), "mask_%03d.pgm", rows[0].l3_index);
  fs::path mask_path = dir / rows[0].series_uid / name;
  PgmImage mask = read_pgm(mask_path);
  mask.pixels[1000] = 9;
  write_pgm(mask_path, mask.rows, mask.cols, mask.pixels);

  UNetSpec uspec;
  uspec.d = 2;
  uspec.f = 4;
  TrainConfig seg;
  seg.task = TaskKind::Segmentation;
  seg.epochs = 1;
  seg.val_fraction = 0;
  seg.test_fraction = 0;
  CHECK(code_of([&] { train_segmenter(dir, uspec, seg); }) == ErrorCode::LabelOutOfRange);
}
