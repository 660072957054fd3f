#include "train.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <sstream>

#include "dicom.hpp"
#include "phantom.hpp"

namespace bc {
namespace {

void check_train_config(const TrainConfig& config) {
  auto fail = [](const std::string& msg) { throw Error(ErrorCode::InvalidSpec, msg); };
  if (config.epochs < 0) fail("epochs must be non-negative");
  if (config.base_lr < 0) fail("base_lr must be non-negative");
  if (config.batch_size < 1) fail("batch size must be at least 1");
  if (config.translation_frac < 0 || config.translation_frac > 0.5)
    fail("translation fraction out of range [0, 0.5]");
  if (config.rotation_deg < 0 || config.rotation_deg > 90)
    fail("rotation limit out of range [0, 90] degrees");
  if (config.val_fraction < 0 || config.test_fraction < 0 ||
      config.val_fraction + config.test_fraction >= 1.0)
    fail("holdout fractions must be non-negative and sum below 1");
}

struct Sample {
  FloatImage image;
  float target = 0;
  std::vector<uint8_t> mask;
};

std::filesystem::path series_file(const std::filesystem::path& dir,
                                  const std::string& id, const char* stem, int index,
                                  const char* ext) {
  char name[32];
  std::snprintf(name, sizeof(name), "%s_%03d.%s", stem, index, ext);
  return dir / id / name;
}

std::vector<Sample> load_selection_samples(const std::filesystem::path& dir,
                                           const std::vector<PhantomTruth>& manifest,
                                           const std::vector<int>& indices, int edge,
                                           const SelectionConfig& selection) {
  std::vector<Sample> samples;
  for (int idx : indices) {
    const PhantomTruth& t = manifest[idx];
    CtSeries series = load_series(dir / t.series_uid);
    for (const CtSlice& slice : series.slices) {
      Sample s;
      s.image = resize_square(downsample_256(window_normalize(slice)), edge);
      s.target = static_cast<float>(
          regression_target(slice.z_mm, t.z_l3_mm, selection));
      samples.push_back(std::move(s));
    }
  }
  return samples;
}

std::vector<Sample> load_segmentation_samples(const std::filesystem::path& dir,
                                              const std::vector<PhantomTruth>& manifest,
                                              const std::vector<int>& indices) {
  std::vector<Sample> samples;
  for (int idx : indices) {
    const PhantomTruth& t = manifest[idx];
    std::vector<uint8_t> bytes =
        read_file(series_file(dir, t.series_uid, "slice", t.l3_index, "dcm"));
    CtSlice slice = decode_hu(parse_dataset(bytes));
    PgmImage mask = read_pgm(series_file(dir, t.series_uid, "mask", t.l3_index, "pgm"));
    if (mask.rows != slice.rows || mask.cols != slice.cols)
      throw Error(ErrorCode::ShapeMismatch,
                  "mask and slice dims differ for series " + t.series_uid);
    for (uint8_t v : mask.pixels)
      if (v > 3)
        throw Error(ErrorCode::LabelOutOfRange,
                    "mask label " + std::to_string(v) + " in series " + t.series_uid);
    Sample s;
    s.image = window_normalize(slice);
    s.mask = std::move(mask.pixels);
    samples.push_back(std::move(s));
  }
  return samples;
}

void check_uniform_dims(const std::vector<Sample>& samples) {
  for (const Sample& s : samples)
    if (s.image.rows != samples[0].image.rows || s.image.cols != samples[0].image.cols)
      throw Error(ErrorCode::ShapeMismatch, "cohort images differ in size");
}

// Accumulates per-class intersection and sums so validation Dice is pooled
// over the whole split, matching the batch-pooled training loss.
struct DiceAccumulator {
  double inter[4] = {0, 0, 0, 0};
  double psum[4] = {0, 0, 0, 0};
  double qsum[4] = {0, 0, 0, 0};

  void add(const float* probs, const std::vector<uint8_t>& mask, int classes,
           size_t plane) {
    for (int c = 1; c < classes; ++c) {
      const float* p = probs + static_cast<size_t>(c) * plane;
      double i = 0, ps = 0, qs = 0;
      for (size_t k = 0; k < plane; ++k) {
        double q = mask[k] == c ? 1.0 : 0.0;
        i += p[k] * q;
        ps += p[k];
        qs += q;
      }
      inter[c] += i;
      psum[c] += ps;
      qsum[c] += qs;
    }
  }

  double score(int classes, double eps = 1.0) const {
    double s = 0;
    for (int c = 1; c < classes; ++c)
      s += (2.0 * inter[c] + eps) / (psum[c] + qsum[c] + eps);
    return s;
  }
};

std::vector<float> one_hot(const std::vector<uint8_t>& mask, int classes) {
  std::vector<float> oh(static_cast<size_t>(classes) * mask.size(), 0.0f);
  for (size_t i = 0; i < mask.size(); ++i)
    oh[static_cast<size_t>(mask[i]) * mask.size() + i] = 1.0f;
  return oh;
}

struct EpochOutcome {
  double train_loss = 0;
  bool finite = true;
};

}  // namespace

int epochs_of(const TrainConfig& config) {
  if (config.epochs > 0) return config.epochs;
  return config.task == TaskKind::Selection ? 75 : 100;
}

double base_lr_of(const TrainConfig& config) {
  if (config.base_lr > 0) return config.base_lr;
  return config.task == TaskKind::Selection ? 0.001 : 0.1;
}

double lr_at(int epoch, const TrainConfig& config) {
  int total = epochs_of(config);
  if (epoch < 0 || epoch >= total)
    throw Error(ErrorCode::InvalidSpec, "epoch outside the schedule");
  int decays = (epoch >= total / 2.0 ? 1 : 0) + (epoch >= 0.75 * total ? 1 : 0);
  return base_lr_of(config) * std::pow(0.1, decays);
}

SeriesSplit split_series(int n, double val_fraction, double test_fraction,
                         uint64_t seed) {
  if (n < 0 || val_fraction < 0 || test_fraction < 0 ||
      val_fraction + test_fraction >= 1.0 + 1e-12)
    throw Error(ErrorCode::InvalidSpec, "bad split request");
  std::vector<int> order = Rng(seed).fork(17).permutation(n);
  int nv = static_cast<int>(n * val_fraction);
  int nt = static_cast<int>(n * test_fraction);
  SeriesSplit split;
  split.val.assign(order.begin(), order.begin() + nv);
  split.test.assign(order.begin() + nv, order.begin() + nv + nt);
  split.train.assign(order.begin() + nv + nt, order.end());
  std::sort(split.val.begin(), split.val.end());
  std::sort(split.test.begin(), split.test.end());
  std::sort(split.train.begin(), split.train.end());
  return split;
}

FloatImage warp_image(const FloatImage& image, double dx_px, double dy_px,
                      double angle_rad) {
  if (dx_px == 0 && dy_px == 0 && angle_rad == 0) return image;
  FloatImage out;
  out.rows = image.rows;
  out.cols = image.cols;
  out.px.assign(image.px.size(), 0.0f);
  double cx = (image.cols - 1) / 2.0, cy = (image.rows - 1) / 2.0;
  double ca = std::cos(-angle_rad), sa = std::sin(-angle_rad);
  for (int r = 0; r < image.rows; ++r) {
    double y = r - cy - dy_px;
    for (int c = 0; c < image.cols; ++c) {
      double x = c - cx - dx_px;
      double sx = ca * x - sa * y + cx;
      double sy = sa * x + ca * y + cy;
      if (sx < 0 || sy < 0 || sx > image.cols - 1 || sy > image.rows - 1) continue;
      int x0 = static_cast<int>(sx), y0 = static_cast<int>(sy);
      int x1 = std::min(x0 + 1, image.cols - 1), y1 = std::min(y0 + 1, image.rows - 1);
      double fx = sx - x0, fy = sy - y0;
      const float* row0 = image.px.data() + static_cast<size_t>(y0) * image.cols;
      const float* row1 = image.px.data() + static_cast<size_t>(y1) * image.cols;
      double top = row0[x0] + (row0[x1] - row0[x0]) * fx;
      double bot = row1[x0] + (row1[x1] - row1[x0]) * fx;
      out.px[static_cast<size_t>(r) * image.cols + c] =
          static_cast<float>(top + (bot - top) * fy);
    }
  }
  return out;
}

std::vector<uint8_t> warp_mask(const std::vector<uint8_t>& mask, int rows, int cols,
                               double dx_px, double dy_px, double angle_rad) {
  if (dx_px == 0 && dy_px == 0 && angle_rad == 0) return mask;
  std::vector<uint8_t> out(mask.size(), 0);
  double cx = (cols - 1) / 2.0, cy = (rows - 1) / 2.0;
  double ca = std::cos(-angle_rad), sa = std::sin(-angle_rad);
  for (int r = 0; r < rows; ++r) {
    double y = r - cy - dy_px;
    for (int c = 0; c < cols; ++c) {
      double x = c - cx - dx_px;
      int sx = static_cast<int>(std::lround(ca * x - sa * y + cx));
      int sy = static_cast<int>(std::lround(sa * x + ca * y + cy));
      if (sx < 0 || sy < 0 || sx >= cols || sy >= rows) continue;
      out[static_cast<size_t>(r) * cols + c] = mask[static_cast<size_t>(sy) * cols + sx];
    }
  }
  return out;
}

AugmentDraw draw_augment(Rng& rng, const TrainConfig& config, int image_size) {
  AugmentDraw d;
  double t = config.translation_frac * image_size;
  d.dx_px = rng.uniform(-t, t);
  d.dy_px = rng.uniform(-t, t);
  d.angle_rad = rng.uniform(-config.rotation_deg, config.rotation_deg) * 3.14159265358979323846 / 180.0;
  return d;
}

namespace {

// One training pass. Returns the final model; restarts once with a warmup
// epoch at base_lr/10 if the loss turns non-finite.
TrainResult train_loop(std::vector<Sample>& train_samples,
                       const std::vector<Sample>& val_samples,
                       const ModelBuilder& builder, const TrainConfig& config) {
  const int total_epochs = epochs_of(config);
  const double base = base_lr_of(config);
  const bool selection = config.task == TaskKind::Selection;
  const int classes = 4;
  const int n = static_cast<int>(train_samples.size());
  const int rows = train_samples[0].image.rows;
  const int cols = train_samples[0].image.cols;
  const size_t plane = static_cast<size_t>(rows) * cols;

  TrainResult result;
  for (int attempt = 0; attempt < 2; ++attempt) {
    bool warmup = attempt > 0;
    std::unique_ptr<Model> model = builder(config.seed);
    std::vector<AdamState<float>> states(model->params.entries.size());
    result.log.clear();
    bool diverged = false;

    for (int epoch = 0; epoch < total_epochs && !diverged; ++epoch) {
      double lr = lr_at(epoch, config);
      if (warmup && epoch == 0) lr = base * 0.1;

      std::vector<int> order = Rng(config.seed).fork(1000 + static_cast<uint64_t>(epoch)).permutation(n);
      Rng aug_rng = Rng(config.seed).fork(5000 + static_cast<uint64_t>(epoch));

      double loss_sum = 0;
      size_t loss_weight = 0;
      for (int begin = 0; begin < n && !diverged; begin += config.batch_size) {
        int bsz = std::min(config.batch_size, n - begin);
        std::vector<float> xb;
        xb.reserve(static_cast<size_t>(bsz) * plane);
        std::vector<float> yb;
        std::vector<float> oh;
        if (!selection) oh.assign(static_cast<size_t>(bsz) * classes * plane, 0.0f);
        for (int i = 0; i < bsz; ++i) {
          Sample& s = train_samples[order[begin + i]];
          AugmentDraw d = draw_augment(aug_rng, config, cols);
          FloatImage img = warp_image(s.image, d.dx_px, d.dy_px, d.angle_rad);
          xb.insert(xb.end(), img.px.begin(), img.px.end());
          if (selection) {
            yb.push_back(s.target);
          } else {
            std::vector<uint8_t> mask =
                warp_mask(s.mask, rows, cols, d.dx_px, d.dy_px, d.angle_rad);
            float* dst = oh.data() + static_cast<size_t>(i) * classes * plane;
            for (size_t k = 0; k < plane; ++k)
              dst[static_cast<size_t>(mask[k]) * plane + k] = 1.0f;
          }
        }

        Graph<float> g;
        Node<float>* x = g.leaf({bsz, 1, rows, cols}, std::move(xb), false);
        Forward f = model->run(g, x, true);
        Node<float>* loss;
        if (selection) {
          Node<float>* y = g.leaf({bsz, 1}, std::move(yb), false);
          loss = mae_loss(g, f.out, y);
        } else {
          Node<float>* y = g.leaf({bsz, classes, rows, cols}, std::move(oh), false);
          loss = soft_dice_loss(g, f.out, y, 1.0f);
        }
        double batch_loss = loss->value[0];
        if (!std::isfinite(batch_loss)) {
          diverged = true;
          break;
        }
        loss_sum += batch_loss * bsz;
        loss_weight += bsz;
        g.backward(loss);
        for (size_t e = 0; e < model->params.entries.size(); ++e) {
          ParamEntry& entry = model->params.entries[e];
          Node<float>* leaf = f.bound[e];
          if (!entry.trainable || leaf == nullptr || !leaf->grad_touched()) continue;
          adam_step(std::span<float>(entry.value),
                    std::span<const float>(leaf->grad), states[e],
                    static_cast<float>(lr));
        }
      }
      if (diverged) break;

      double train_loss = loss_sum / loss_weight;
      double val_metric;
      if (val_samples.empty()) {
        val_metric = selection ? train_loss : -train_loss;
      } else if (selection) {
        double abs_sum = 0;
        size_t count = 0;
        const size_t chunk = 16;
        for (size_t begin = 0; begin < val_samples.size(); begin += chunk) {
          size_t m = std::min(chunk, val_samples.size() - begin);
          std::vector<float> xv;
          xv.reserve(m * plane);
          for (size_t i = 0; i < m; ++i)
            xv.insert(xv.end(), val_samples[begin + i].image.px.begin(),
                      val_samples[begin + i].image.px.end());
          Graph<float> g;
          Forward f = model->run(
              g, g.leaf({static_cast<int>(m), 1, rows, cols}, std::move(xv), false),
              false);
          for (size_t i = 0; i < m; ++i)
            abs_sum += std::abs(f.out->value[i] - val_samples[begin + i].target);
          count += m;
        }
        val_metric = abs_sum / count;
      } else {
        DiceAccumulator acc;
        const size_t chunk = 4;
        for (size_t begin = 0; begin < val_samples.size(); begin += chunk) {
          size_t m = std::min(chunk, val_samples.size() - begin);
          std::vector<float> xv;
          xv.reserve(m * plane);
          for (size_t i = 0; i < m; ++i)
            xv.insert(xv.end(), val_samples[begin + i].image.px.begin(),
                      val_samples[begin + i].image.px.end());
          Graph<float> g;
          Forward f = model->run(
              g, g.leaf({static_cast<int>(m), 1, rows, cols}, std::move(xv), false),
              false);
          for (size_t i = 0; i < m; ++i)
            acc.add(f.out->value.data() + i * classes * plane,
                    val_samples[begin + i].mask, classes, plane);
        }
        val_metric = acc.score(classes);
      }
      result.log.push_back({epoch, lr, train_loss, val_metric});
    }

    if (!diverged) {
      result.model = std::move(model);
      return result;
    }
    result.restarted = true;
    if (attempt == 1) {
      // diverged twice: return the model as-is so the caller sees the state
      result.model = std::move(model);
    }
  }
  return result;
}

void write_log(const TrainResult& result, const std::filesystem::path& path) {
  if (path.empty()) return;
  std::ostringstream out;
  out << "epoch,lr,train_loss,val_metric\n";
  for (const EpochLog& row : result.log)
    out << row.epoch << ',' << format_double(row.lr) << ','
        << format_double(row.train_loss) << ',' << format_double(row.val_metric)
        << '\n';
  write_text_atomic(path, out.str());
}

TrainResult train_selector_impl(const std::filesystem::path& cohort_dir,
                                const ModelBuilder& builder,
                                const TrainConfig& config) {
  check_train_config(config);
  std::vector<PhantomTruth> manifest = read_manifest(cohort_dir / "manifest.csv");
  if (manifest.empty())
    throw Error(ErrorCode::EmptyCohort, "no series in " + cohort_dir.string());
  SeriesSplit split = split_series(static_cast<int>(manifest.size()),
                                   config.val_fraction, config.test_fraction,
                                   config.seed);
  if (split.train.empty())
    throw Error(ErrorCode::EmptyCohort, "training split is empty");

  std::unique_ptr<Model> probe = builder(config.seed);
  int edge = probe->input_size() == 0 ? 256 : static_cast<int>(probe->input_size());
  probe.reset();

  std::vector<Sample> train_samples =
      load_selection_samples(cohort_dir, manifest, split.train, edge, config.selection);
  std::vector<Sample> val_samples =
      load_selection_samples(cohort_dir, manifest, split.val, edge, config.selection);
  check_uniform_dims(train_samples);

  TrainResult result = train_loop(train_samples, val_samples, builder, config);
  write_log(result, config.log_path);
  return result;
}

}  // namespace

TrainResult train_selector(const std::filesystem::path& cohort_dir,
                           const ModelBuilder& builder, const TrainConfig& config) {
  TrainConfig c = config;
  c.task = TaskKind::Selection;
  return train_selector_impl(cohort_dir, builder, c);
}

TrainResult train_selector(const std::filesystem::path& cohort_dir,
                           const DenseNetSpec& spec, const TrainConfig& config) {
  return train_selector(
      cohort_dir, [&spec](uint64_t seed) { return build_densenet_regressor(spec, seed); },
      config);
}

TrainResult train_selector(const std::filesystem::path& cohort_dir,
                           const ResNeXtSpec& spec, const TrainConfig& config) {
  return train_selector(
      cohort_dir, [&spec](uint64_t seed) { return build_resnext_regressor(spec, seed); },
      config);
}

TrainResult train_segmenter(const std::filesystem::path& cohort_dir,
                            const UNetSpec& spec, const TrainConfig& config) {
  TrainConfig c = config;
  c.task = TaskKind::Segmentation;
  check_train_config(c);
  std::vector<PhantomTruth> manifest = read_manifest(cohort_dir / "manifest.csv");
  if (manifest.empty())
    throw Error(ErrorCode::EmptyCohort, "no series in " + cohort_dir.string());
  SeriesSplit split = split_series(static_cast<int>(manifest.size()), c.val_fraction,
                                   c.test_fraction, c.seed);
  if (split.train.empty())
    throw Error(ErrorCode::EmptyCohort, "training split is empty");

  std::vector<Sample> train_samples =
      load_segmentation_samples(cohort_dir, manifest, split.train);
  std::vector<Sample> val_samples =
      load_segmentation_samples(cohort_dir, manifest, split.val);
  check_uniform_dims(train_samples);

  ModelBuilder builder = [&spec](uint64_t seed) { return build_unet(spec, seed); };
  TrainResult result = train_loop(train_samples, val_samples, builder, c);
  write_log(result, c.log_path);
  return result;
}

}  // namespace bc
