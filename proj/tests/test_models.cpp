#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <cmath>
#include <cstdio>
#include <filesystem>
#include <string>
#include <vector>

#include "models.hpp"

using namespace bc;

namespace {

std::vector<float> random_image(int n, int hw, uint64_t seed) {
  Rng rng(seed);
  std::vector<float> v(size_t(n) * hw * hw);
  for (float& x : v) x = float(rng.uniform(0.0, 255.0));
  return v;
}

std::vector<float> eval_forward(Model& m, const Shape& shape, const std::vector<float>& data) {
  Graph<float> g;
  Node<float>* x = g.leaf(shape, data, false);
  Forward fw = m.run(g, x, false);
  return fw.out->value;
}

const ParamEntry& find_entry(const Model& m, const std::string& name) {
  for (const ParamEntry& e : m.params.entries)
    if (e.name == name) return e;
  FAIL("missing param entry ", name);
  static ParamEntry dummy;
  return dummy;
}

std::filesystem::path temp_path(const char* stem) {
  return std::filesystem::temp_directory_path() / stem;
}

// Per-class argmax pixel counts of a [1,classes,H,W] probability map.
std::vector<int> class_counts(const std::vector<float>& probs, int classes, int hw) {
  std::vector<int> counts(size_t(classes), 0);
  for (int i = 0; i < hw; ++i) {
    int best = 0;
    for (int c = 1; c < classes; ++c)
      if (probs[size_t(c) * hw + i] > probs[size_t(best) * hw + i]) best = c;
    counts[size_t(best)]++;
  }
  return counts;
}

}  // namespace

TEST_CASE("densenet forward on zeros stays strictly inside (0,1)") {
  DenseNetSpec spec;
  spec.b = 12;
  spec.k = 12;
  auto m = build_densenet_regressor(spec, 1);
  std::vector<float> zeros(size_t(256) * 256, 0.0f);
  std::vector<float> out = eval_forward(*m, {1, 1, 256, 256}, zeros);
  REQUIRE(out.size() == 1);
  CHECK(std::isfinite(out[0]));
  CHECK(out[0] > 0.0f);
  CHECK(out[0] < 1.0f);
}

TEST_CASE("densenet feature bookkeeping follows the c + b*k law") {
  DenseNetSpec spec;
  spec.b = 3;
  spec.k = 5;
  spec.stem_features = 7;
  spec.input_size = 64;
  auto m = build_densenet_regressor(spec, 2);

  // block 0 starts at the stem width and gains k features per layer
  CHECK(find_entry(*m, "block0.layer0.w").shape == Shape{5, 7, 3, 3});
  CHECK(find_entry(*m, "block0.layer2.w").shape == Shape{5, 17, 3, 3});
  // transition halves 7 + 3*5 = 22 features
  CHECK(find_entry(*m, "trans0.w").shape == Shape{11, 22, 1, 1});
  CHECK(find_entry(*m, "block1.layer0.w").shape == Shape{5, 11, 3, 3});
  // head sees floor((11 + 15) / 2) + 15 = 28 features
  CHECK(find_entry(*m, "head.w").shape == Shape{28, 1});

  // the default stem of the paper grid: 2k = 24, three blocks of 12*12
  DenseNetSpec big;
  big.b = 12;
  big.k = 12;
  big.input_size = 64;
  auto mb = build_densenet_regressor(big, 3);
  CHECK(find_entry(*mb, "head.w").shape == Shape{258, 1});
}

TEST_CASE("densenet parameter count grows with b and k") {
  DenseNetSpec small;
  small.b = 6;
  small.k = 12;
  small.input_size = 64;
  DenseNetSpec large;
  large.b = 18;
  large.k = 24;
  large.input_size = 64;
  auto ms = build_densenet_regressor(small, 1);
  auto ml = build_densenet_regressor(large, 1);
  CHECK(ms->param_count() > 0);
  CHECK(ms->param_count() < ml->param_count());
}

TEST_CASE("densenet rejects degenerate specs") {
  DenseNetSpec spec;
  spec.b = 0;
  CHECK_THROWS_AS(build_densenet_regressor(spec, 1), Error);
  spec.b = 4;
  spec.compression = 0.0f;
  CHECK_THROWS_AS(build_densenet_regressor(spec, 1), Error);
  spec.compression = 0.5f;
  spec.input_size = 8;
  try {
    build_densenet_regressor(spec, 1);
    FAIL("expected InvalidSpec");
  } catch (const Error& e) {
    CHECK(e.code() == ErrorCode::InvalidSpec);
  }
}

TEST_CASE("resnext cardinality 1 degenerates to a plain bottleneck") {
  ResNeXtSpec spec;
  spec.f = 8;
  spec.C = 1;
  spec.input_size = 64;
  auto m = build_resnext_regressor(spec, 4);
  // ungrouped 3x3 sees all input channels
  CHECK(find_entry(*m, "stage0.block0.grouped.w").shape == Shape{8, 8, 3, 3});
  std::vector<float> out = eval_forward(*m, {1, 1, 64, 64}, random_image(1, 64, 11));
  REQUIRE(out.size() == 1);
  CHECK(out[0] > 0.0f);
  CHECK(out[0] < 1.0f);
}

TEST_CASE("resnext f=32 C=32 runs a 256x256 slice end to end") {
  ResNeXtSpec spec;
  auto m = build_resnext_regressor(spec, 5);
  // grouped conv with one channel per group at stage width 32
  CHECK(find_entry(*m, "stage0.block0.grouped.w").shape == Shape{32, 1, 3, 3});
  CHECK(find_entry(*m, "stage2.block0.grouped.w").shape == Shape{128, 4, 3, 3});
  CHECK(m->input_size() == 256);
  std::vector<float> out = eval_forward(*m, {1, 1, 256, 256}, random_image(1, 256, 12));
  REQUIRE(out.size() == 1);
  CHECK(std::isfinite(out[0]));
  CHECK(out[0] > 0.0f);
  CHECK(out[0] < 1.0f);
}

TEST_CASE("resnext rejects widths not divisible by the cardinality") {
  ResNeXtSpec spec;
  spec.f = 16;
  spec.C = 32;
  try {
    build_resnext_regressor(spec, 1);
    FAIL("expected InvalidSpec");
  } catch (const Error& e) {
    CHECK(e.code() == ErrorCode::InvalidSpec);
  }
}

TEST_CASE("regressor outputs remain inside (0,1) at the input extremes") {
  DenseNetSpec spec;
  spec.b = 2;
  spec.k = 4;
  spec.input_size = 64;
  auto m = build_densenet_regressor(spec, 6);
  for (float fill : {0.0f, 255.0f, -255.0f}) {
    std::vector<float> img(size_t(64) * 64, fill);
    std::vector<float> out = eval_forward(*m, {1, 1, 64, 64}, img);
    CHECK(out[0] > 0.0f);
    CHECK(out[0] < 1.0f);
  }
}

TEST_CASE("unet rejects shallow or empty specs") {
  UNetSpec spec;
  spec.d = 1;
  CHECK_THROWS_AS(build_unet(spec, 1), Error);
  spec.d = 0;
  CHECK_THROWS_AS(build_unet(spec, 1), Error);
  spec.d = 2;
  spec.l = 0;
  CHECK_THROWS_AS(build_unet(spec, 1), Error);
  spec.l = 1;
  spec.classes = 1;
  try {
    build_unet(spec, 1);
    FAIL("expected InvalidSpec");
  } catch (const Error& e) {
    CHECK(e.code() == ErrorCode::InvalidSpec);
  }
}

TEST_CASE("unet softmax output sums to one per pixel") {
  UNetSpec spec;
  spec.d = 2;
  spec.l = 1;
  spec.f = 4;
  auto m = build_unet(spec, 7);
  const int hw = 32 * 32;
  std::vector<float> out = eval_forward(*m, {2, 1, 32, 32}, random_image(2, 32, 13));
  REQUIRE(out.size() == size_t(2) * 4 * hw);
  for (int n = 0; n < 2; ++n)
    for (int i = 0; i < hw; ++i) {
      float s = 0.0f;
      for (int c = 0; c < 4; ++c) {
        float p = out[(size_t(n) * 4 + c) * hw + i];
        CHECK(p >= 0.0f);
        CHECK(p <= 1.0f);
        s += p;
      }
      CHECK(s == doctest::Approx(1.0f).epsilon(1e-6));
    }
}

TEST_CASE("unet encoder widths double from f") {
  UNetSpec spec;
  spec.d = 4;
  spec.l = 2;
  spec.f = 6;
  auto m = build_unet(spec, 8);
  CHECK(find_entry(*m, "enc0.conv0.w").shape == Shape{6, 1, 3, 3});
  CHECK(find_entry(*m, "enc1.conv0.w").shape == Shape{12, 6, 3, 3});
  CHECK(find_entry(*m, "enc2.conv0.w").shape == Shape{24, 12, 3, 3});
  CHECK(find_entry(*m, "enc3.conv0.w").shape == Shape{48, 24, 3, 3});
  CHECK(find_entry(*m, "enc3.conv1.w").shape == Shape{48, 48, 3, 3});
  CHECK(find_entry(*m, "mid.conv0.w").shape == Shape{96, 48, 3, 3});
  // decoder halves features, then consumes the skip concatenation
  CHECK(find_entry(*m, "dec3.up.w").shape == Shape{48, 96, 3, 3});
  CHECK(find_entry(*m, "dec3.conv0.w").shape == Shape{48, 96, 3, 3});
  CHECK(find_entry(*m, "final.w").shape == Shape{4, 6, 1, 1});
}

TEST_CASE("unet d=5 l=1 f=16 round-trips a 512x512 slice") {
  UNetSpec spec;
  auto m = build_unet(spec, 9);
  CHECK(m->input_size() == 0);
  Graph<float> g;
  std::vector<float> img(size_t(512) * 512, 100.0f);
  Node<float>* x = g.leaf({1, 1, 512, 512}, img, false);
  Forward fw = m->run(g, x, false);
  CHECK(fw.out->shape == Shape{1, 4, 512, 512});
}

TEST_CASE("unet rejects inputs not divisible by its pooling pyramid") {
  UNetSpec spec;
  spec.d = 3;
  spec.l = 1;
  spec.f = 4;
  auto m = build_unet(spec, 10);
  Graph<float> g;
  std::vector<float> img(size_t(36) * 36, 0.0f);
  Node<float>* x = g.leaf({1, 1, 36, 36}, img, false);
  try {
    m->run(g, x, false);
    FAIL("expected ShapeMismatch");
  } catch (const Error& e) {
    CHECK(e.code() == ErrorCode::ShapeMismatch);
  }
}

TEST_CASE("unet transposed-conv decoder variant builds and runs") {
  UNetSpec spec;
  spec.d = 2;
  spec.l = 1;
  spec.f = 4;
  spec.transposed = true;
  auto m = build_unet(spec, 11);
  CHECK(find_entry(*m, "dec1.up.w").shape == Shape{16, 8, 2, 2});
  std::vector<float> out = eval_forward(*m, {1, 1, 32, 32}, random_image(1, 32, 14));
  CHECK(out.size() == size_t(4) * 32 * 32);
}

TEST_CASE("gradients reach every trainable parameter of each architecture") {
  auto touch_all = [](Model& m, Node<float>* loss, Graph<float>& g, const Forward& fw) {
    g.backward(loss);
    size_t checked = 0;
    for (size_t i = 0; i < m.params.entries.size(); ++i) {
      if (!m.params.entries[i].trainable) continue;
      REQUIRE(fw.bound[i] != nullptr);
      CHECK(fw.bound[i]->grad_touched());
      checked++;
    }
    CHECK(checked > 0);
  };

  SUBCASE("densenet") {
    DenseNetSpec spec;
    spec.b = 2;
    spec.k = 4;
    spec.input_size = 64;
    auto m = build_densenet_regressor(spec, 12);
    Graph<float> g;
    Node<float>* x = g.leaf({2, 1, 64, 64}, random_image(2, 64, 15), false);
    Forward fw = m->run(g, x, true);
    Node<float>* target = g.leaf({2, 1}, std::vector<float>{0.3f, 0.7f}, false);
    touch_all(*m, mae_loss(g, fw.out, target), g, fw);
  }

  SUBCASE("resnext") {
    ResNeXtSpec spec;
    spec.f = 8;
    spec.C = 4;
    spec.blocks_per_stage = 1;
    spec.input_size = 64;
    auto m = build_resnext_regressor(spec, 13);
    Graph<float> g;
    Node<float>* x = g.leaf({2, 1, 64, 64}, random_image(2, 64, 16), false);
    Forward fw = m->run(g, x, true);
    Node<float>* target = g.leaf({2, 1}, std::vector<float>{0.2f, 0.9f}, false);
    touch_all(*m, mae_loss(g, fw.out, target), g, fw);
  }

  SUBCASE("unet") {
    UNetSpec spec;
    spec.d = 2;
    spec.l = 1;
    spec.f = 4;
    auto m = build_unet(spec, 14);
    Graph<float> g;
    const int hw = 16 * 16;
    Node<float>* x = g.leaf({1, 1, 16, 16}, random_image(1, 16, 17), false);
    Forward fw = m->run(g, x, true);
    std::vector<float> onehot(size_t(4) * hw, 0.0f);
    Rng rng(18);
    for (int i = 0; i < hw; ++i) onehot[size_t(rng.uniform_int(4)) * hw + i] = 1.0f;
    Node<float>* q = g.leaf({1, 4, 16, 16}, onehot, false);
    touch_all(*m, soft_dice_loss(g, fw.out, q), g, fw);
  }
}

TEST_CASE("same spec and seed build bitwise-identical models") {
  UNetSpec spec;
  spec.d = 3;
  spec.l = 1;
  spec.f = 8;
  auto a = build_unet(spec, 42);
  auto b = build_unet(spec, 42);
  REQUIRE(a->params.entries.size() == b->params.entries.size());
  for (size_t i = 0; i < a->params.entries.size(); ++i) {
    CHECK(a->params.entries[i].name == b->params.entries[i].name);
    CHECK(a->params.entries[i].value == b->params.entries[i].value);
  }
  auto c = build_unet(spec, 43);
  CHECK(c->params.entries[0].value != a->params.entries[0].value);
}

TEST_CASE("checkpoint roundtrip reproduces forwards bitwise") {
  auto roundtrip = [](Model& m, const Shape& shape, const std::vector<float>& img,
                      const char* file) {
    // a training pass first, so running statistics are away from their
    // initial values and must survive the roundtrip
    {
      Graph<float> g;
      Node<float>* x = g.leaf(shape, img, false);
      m.run(g, x, true);
    }
    std::vector<float> before = eval_forward(m, shape, img);
    const std::filesystem::path path = temp_path(file);
    save_checkpoint(m, path);
    auto loaded = load_checkpoint(path);
    CHECK(loaded->kind() == m.kind());
    CHECK(loaded->input_size() == m.input_size());
    CHECK(loaded->param_count() == m.param_count());
    std::vector<float> after = eval_forward(*loaded, shape, img);
    REQUIRE(before.size() == after.size());
    CHECK(std::memcmp(before.data(), after.data(), before.size() * 4) == 0);
    std::filesystem::remove(path);
  };

  SUBCASE("densenet") {
    DenseNetSpec spec;
    spec.b = 2;
    spec.k = 4;
    spec.input_size = 64;
    auto m = build_densenet_regressor(spec, 21);
    roundtrip(*m, {1, 1, 64, 64}, random_image(1, 64, 31), "bc_ckpt_dn.bin");
  }
  SUBCASE("resnext") {
    ResNeXtSpec spec;
    spec.f = 8;
    spec.C = 2;
    spec.blocks_per_stage = 1;
    spec.input_size = 64;
    auto m = build_resnext_regressor(spec, 22);
    roundtrip(*m, {1, 1, 64, 64}, random_image(1, 64, 32), "bc_ckpt_rx.bin");
  }
  SUBCASE("unet") {
    UNetSpec spec;
    spec.d = 2;
    spec.l = 1;
    spec.f = 4;
    auto m = build_unet(spec, 23);
    roundtrip(*m, {1, 1, 32, 32}, random_image(1, 32, 33), "bc_ckpt_un.bin");
  }
}

TEST_CASE("checkpoint loader rejects malformed files with typed errors") {
  DenseNetSpec spec;
  spec.b = 2;
  spec.k = 4;
  spec.input_size = 64;
  auto m = build_densenet_regressor(spec, 24);
  const std::filesystem::path path = temp_path("bc_ckpt_bad.bin");
  save_checkpoint(*m, path);
  const std::vector<uint8_t> good = read_file(path);

  auto expect = [&](std::vector<uint8_t> bytes, ErrorCode code) {
    write_file_atomic(path, bytes);
    try {
      load_checkpoint(path);
      FAIL("expected ", error_code_name(code));
    } catch (const Error& e) {
      CHECK(e.code() == code);
    }
  };

  std::vector<uint8_t> bad = good;
  bad[0] = 'X';
  expect(bad, ErrorCode::BadMagic);

  bad = good;
  bad[4] = 99;  // version field
  expect(bad, ErrorCode::VersionMismatch);

  bad = good;
  bad[8] = 77;  // kind tag
  expect(bad, ErrorCode::CorruptEntry);

  bad.assign(good.begin(), good.begin() + good.size() / 2);
  expect(bad, ErrorCode::CorruptEntry);

  bad = good;
  bad.push_back(0);
  expect(bad, ErrorCode::CorruptEntry);

  // damage the first entry name ("stem.w"): header, spec fields, entry
  // count, then the name length prefix
  bad = good;
  const size_t name_at = 4 + 4 + 4 + 5 * 4 + 2 * 4 + 4 + 4;
  REQUIRE(bad[name_at] == 's');
  bad[name_at] = 'z';
  expect(bad, ErrorCode::CorruptEntry);

  std::filesystem::remove(path);
}

TEST_CASE("unet class counts are stable under a small translation") {
  UNetSpec spec;
  spec.d = 2;
  spec.l = 1;
  spec.f = 8;
  auto m = build_unet(spec, 25);

  // a phantom-like slice: bright body disk with a darker core on background
  const int S = 128;
  std::vector<float> img(size_t(S) * S, 0.0f);
  auto paint = [&](std::vector<float>& dst, int shift) {
    for (int r = 0; r < S; ++r)
      for (int c = 0; c < S; ++c) {
        const double dy = r - (S / 2.0 + shift);
        const double dx = c - (S / 2.0 + shift);
        const double d = std::sqrt(dx * dx + dy * dy);
        float v = 0.0f;
        if (d < 20) v = 60.0f;
        else if (d < 35) v = 180.0f;
        else if (d < 48) v = 110.0f;
        dst[size_t(r) * S + c] = v;
      }
  };
  paint(img, 0);
  std::vector<float> shifted(size_t(S) * S, 0.0f);
  paint(shifted, 2);  // one pooling stride

  std::vector<int> a = class_counts(eval_forward(*m, {1, 1, S, S}, img), 4, S * S);
  std::vector<int> b = class_counts(eval_forward(*m, {1, 1, S, S}, shifted), 4, S * S);
  for (int c = 0; c < 4; ++c) {
    CHECK(std::abs(a[size_t(c)] - b[size_t(c)]) <= int(0.05 * S * S));
  }
}
