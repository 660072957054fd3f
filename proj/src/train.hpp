#pragma once

#include <cstdint>
#include <filesystem>
#include <functional>
#include <memory>
#include <vector>

#include "common.hpp"
#include "models.hpp"
#include "pipeline.hpp"

namespace bc {

enum class TaskKind { Selection, Segmentation };

struct TrainConfig {
  TaskKind task = TaskKind::Selection;
  int epochs = 0;       // 0 picks the task default: 75 selection, 100 segmentation
  double base_lr = 0;   // 0 picks the task default: 0.001 selection, 0.1 segmentation
  int batch_size = 16;
  double translation_frac = 0.05;
  double rotation_deg = 5.0;
  double val_fraction = 0.15;   // series-level holdout fractions
  double test_fraction = 0.15;  // test indices are never touched by training
  uint64_t seed = 1;
  SelectionConfig selection;       // regression-target parameters
  std::filesystem::path log_path;  // per-epoch CSV; empty disables logging
};

int epochs_of(const TrainConfig& config);
double base_lr_of(const TrainConfig& config);

// base * 0.1^([epoch >= E/2] + [epoch >= 3E/4]); zero-based epoch against
// real-valued thresholds. Errors: InvalidSpec (epoch outside [0, E)).
double lr_at(int epoch, const TrainConfig& config);

// Deterministic series-level split; the same (n, fractions, seed) always
// yields the same partition, so evaluation can recover the held-out set.
struct SeriesSplit {
  std::vector<int> train, val, test;
};
SeriesSplit split_series(int n, double val_fraction, double test_fraction, uint64_t seed);

// Resampling core shared by image and mask augmentation: content is rotated
// about the image center and translated by (dx, dy) pixels. Images sample
// bilinearly with zero fill; masks sample nearest-neighbour with class-0
// fill.
FloatImage warp_image(const FloatImage& image, double dx_px, double dy_px,
                      double angle_rad);
std::vector<uint8_t> warp_mask(const std::vector<uint8_t>& mask, int rows, int cols,
                               double dx_px, double dy_px, double angle_rad);

struct AugmentDraw {
  double dx_px = 0, dy_px = 0, angle_rad = 0;
};
AugmentDraw draw_augment(Rng& rng, const TrainConfig& config, int image_size);

struct EpochLog {
  int epoch = 0;
  double lr = 0;
  double train_loss = 0;
  double val_metric = 0;  // MAE for selection, Dice overlap score for segmentation
};

struct TrainResult {
  std::unique_ptr<Model> model;
  std::vector<EpochLog> log;
  bool restarted = false;  // NaN guard fired and training restarted with warmup
};

using ModelBuilder = std::function<std::unique_ptr<Model>(uint64_t seed)>;

// Trains a slice-offset regressor on every slice of the cohort's training
// series against r(z). Validation metric is mean absolute error. Errors:
// EmptyCohort.
TrainResult train_selector(const std::filesystem::path& cohort_dir,
                           const ModelBuilder& builder, const TrainConfig& config);
TrainResult train_selector(const std::filesystem::path& cohort_dir,
                           const DenseNetSpec& spec, const TrainConfig& config);
TrainResult train_selector(const std::filesystem::path& cohort_dir,
                           const ResNeXtSpec& spec, const TrainConfig& config);

// Trains the segmenter on each training series' L3 slice and truth mask.
// Validation metric is the pooled Dice overlap score in (0, classes-1).
// Errors: EmptyCohort, LabelOutOfRange.
TrainResult train_segmenter(const std::filesystem::path& cohort_dir,
                            const UNetSpec& spec, const TrainConfig& config);

}  // namespace bc
