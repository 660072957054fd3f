#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "common.hpp"
#include "dicom.hpp"
#include "models.hpp"

namespace bc {

struct SelectionConfig {
  double tau_mm = 20.0;
  double sigma_slices = 2.0;
  double threshold = 0.5;
  // Literal reading of the offset target, sigmoid(tau * (z - z_l3)). With tau
  // in millimetres that saturates within a fraction of a slice, so the scale
  // divisor form is the default; the literal form is kept selectable.
  bool literal_tau_product = false;
};

struct FloatImage {
  int rows = 0;
  int cols = 0;
  std::vector<float> px;  // row-major, rows*cols
};

struct LabelMap {
  int rows = 0;
  int cols = 0;
  std::vector<uint8_t> labels;  // {0 background, 1 muscle, 2 subcut, 3 visceral}
  double row_spacing_mm = 1.0;
  double col_spacing_mm = 1.0;
};

struct TissueAreas {
  double muscle_cm2 = 0.0;
  double subcut_cm2 = 0.0;
  double visceral_cm2 = 0.0;
};

struct BodyComposition {
  int slice_index = 0;
  double z_mm = 0.0;
  TissueAreas areas;
};

struct AttenuationRanges {
  double muscle_lo_hu = -29.0;
  double muscle_hi_hu = 150.0;
  double fat_lo_hu = -190.0;
  double fat_hi_hu = -30.0;
};

// HU clamped to [center - width/2, center + width/2] and mapped linearly to
// [0, 255].
FloatImage window_normalize(const CtSlice& slice, double center = 40.0,
                            double width = 400.0);

// 2x2 mean for 512-edge inputs (exact), bilinear resampling otherwise.
// Errors: NonSquareInput.
FloatImage downsample_256(const FloatImage& image);

// General square resize used to adapt images to a model's input edge;
// integer 2:1 reductions use exact box means, everything else is bilinear.
FloatImage resize_square(const FloatImage& image, int out_size);

// r(z) = sigmoid((z - z_l3) / tau_mm), or the literal product form when the
// config selects it.
double regression_target(double z_mm, double z_l3_mm, const SelectionConfig& config);

// One prediction per slice, order preserved. Slices are windowed, reduced to
// 256, then adapted to the regressor's input edge.
std::vector<double> predict_offsets(const CtSeries& series, Model& regressor);

// Discrete normalized Gaussian of radius ceil(3 sigma), renormalized over the
// in-bounds taps at the sequence edges. sigma = 0 is the identity.
std::vector<double> smooth_offsets(const std::vector<double>& values, double sigma = 2.0);

// Finds threshold crossings between adjacent slices (linear interpolation in
// z; an exact-threshold slice is itself a crossing), keeps the crossing with
// the largest z, and returns the index of the nearest slice. Errors:
// NoCrossing (sequence entirely on one side).
int select_slice(const std::vector<double>& smoothed, const std::vector<double>& z_mm,
                 double threshold = 0.5);

// Per-pixel argmax over class probabilities [classes, rows, cols]; ties break
// toward the lower class id.
std::vector<uint8_t> argmax_labels(std::span<const float> probs, int classes,
                                   int rows, int cols);

// Windows the slice, centers it on a 512x512 canvas (padding with -1024 HU,
// cropping larger inputs), runs the network, and maps labels back to the
// slice's own dimensions (cropped-away pixels become background).
LabelMap segment_slice(const CtSlice& slice, Model& unet);

// Muscle pixels with HU outside the muscle range and fat pixels with HU
// outside the fat range revert to background. Errors: ShapeMismatch.
LabelMap apply_attenuation_mask(const LabelMap& labels, const CtSlice& slice,
                                const AttenuationRanges& ranges = {});

// area_c = count(labels == c) * row_spacing * col_spacing / 100 cm^2
TissueAreas compute_areas(const LabelMap& labels);

// The full workflow: offset regression across the series, smoothing, slice
// selection, segmentation of the selected slice, attenuation masking, areas.
// Errors: NoCrossing (message names the series), propagated model errors.
BodyComposition analyze_series(const CtSeries& series, Model& regressor, Model& unet,
                               const SelectionConfig& config = {});

// One line of the results file: series id, selected slice index, selected
// z_mm, three areas with two decimals.
std::string result_header();
std::string result_row(const std::string& series_id, const BodyComposition& bc);

}  // namespace bc
