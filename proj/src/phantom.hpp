#pragma once

#include <cstdint>
#include <filesystem>
#include <string>
#include <vector>

#include "common.hpp"

namespace bc {

// Synthetic abdominal cross-section: concentric ellipses (skin, subcutaneous
// fat ring, muscle ring, visceral cavity) with fat blobs and a high-HU
// vertebra marker whose shape keys the L3 position. All lengths in mm; the
// base geometry describes the L3 slice and other slices scale smoothly.
struct PhantomSpec {
  int slice_count = 14;
  double slice_spacing_mm = 3.0;
  int image_size = 512;
  double pixel_spacing_mm = 1.0;
  int l3_index = 7;
  double z0_mm = 0.0;

  double body_a_mm = 120.0;
  double body_b_mm = 92.0;
  double skin_mm = 2.0;
  double subcut_mm = 18.0;
  double muscle_mm = 12.0;

  int blob_count = 3;
  // blob radii as fractions of the smaller cavity semi-axis
  double blob_r_lo = 0.19;
  double blob_r_hi = 0.28;

  // cross-section scale s(dz) = 1 + taper*(dz/100) - bow*(dz/100)^2,
  // clamped to [0.85, 1.15]
  double taper = 0.08;
  double bow = 0.10;

  double hu_air = -1024.0;
  double hu_soft = 20.0;
  double hu_muscle = 60.0;
  double hu_fat = -100.0;
  double hu_marker = 400.0;
  double noise_sigma_hu = 10.0;
  double marker_tau_mm = 20.0;

  uint64_t seed = 1;
};

struct PhantomTruth {
  std::string series_uid;
  double z_l3_mm = 0.0;
  int l3_index = 0;
  double muscle_cm2 = 0.0;
  double subcut_cm2 = 0.0;
  double visceral_cm2 = 0.0;
};

struct SliceRaster {
  std::vector<float> hu;        // integer-valued after noise, rows*cols
  std::vector<uint8_t> labels;  // noiseless class ids {0,1,2,3}
};

// Deterministic in (spec, slice_index); noise comes from a per-slice fork of
// the spec seed, so slices can be produced independently.
SliceRaster rasterize_slice(const PhantomSpec& spec, int slice_index);

// Analytic per-tissue areas of the L3 cross-section in cm².
PhantomTruth analytic_truth(const PhantomSpec& spec, const std::string& series_uid);

// Writes slice_NNN.dcm plus mask_NNN.pgm per slice into dir (created if
// needed) and returns the analytic truth. Errors: InvalidSpec.
PhantomTruth generate_series(const PhantomSpec& spec, const std::string& series_uid,
                             const std::filesystem::path& dir);

// Randomized cohort: one subdirectory per series named by its uid, plus
// manifest.csv. image_size >= 256 so the marker stays resolvable.
std::vector<PhantomTruth> generate_cohort(int n, uint64_t seed, int image_size,
                                          const std::filesystem::path& out_dir);

void write_manifest(const std::vector<PhantomTruth>& rows,
                    const std::filesystem::path& path);
std::vector<PhantomTruth> read_manifest(const std::filesystem::path& path);

}  // namespace bc
