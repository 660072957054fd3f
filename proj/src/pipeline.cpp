#include "pipeline.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>

namespace bc {
namespace {

void check_config(const SelectionConfig& config) {
  if (config.tau_mm <= 0)
    throw Error(ErrorCode::InvalidSpec, "tau_mm must be positive");
  if (config.sigma_slices < 0)
    throw Error(ErrorCode::InvalidSpec, "sigma_slices must be non-negative");
}

void check_ranges(const AttenuationRanges& r) {
  bool ordered = r.muscle_lo_hu <= r.muscle_hi_hu && r.fat_lo_hu <= r.fat_hi_hu;
  bool disjoint = r.fat_hi_hu < r.muscle_lo_hu || r.muscle_hi_hu < r.fat_lo_hu;
  if (!ordered || !disjoint)
    throw Error(ErrorCode::InvalidSpec, "attenuation ranges must be ordered and disjoint");
}

double sigmoid(double x) { return 1.0 / (1.0 + std::exp(-x)); }

}  // namespace

FloatImage window_normalize(const CtSlice& slice, double center, double width) {
  if (width <= 0) throw Error(ErrorCode::InvalidSpec, "window width must be positive");
  double lo = center - width / 2.0;
  FloatImage out;
  out.rows = slice.rows;
  out.cols = slice.cols;
  out.px.resize(slice.hu.size());
  for (size_t i = 0; i < slice.hu.size(); ++i) {
    double v = std::clamp(static_cast<double>(slice.hu[i]), lo, lo + width);
    out.px[i] = static_cast<float>((v - lo) / width * 255.0);
  }
  return out;
}

FloatImage resize_square(const FloatImage& image, int out_size) {
  if (image.rows != image.cols)
    throw Error(ErrorCode::NonSquareInput,
                "expected a square image, got " + std::to_string(image.rows) + "x" +
                    std::to_string(image.cols));
  if (out_size < 1) throw Error(ErrorCode::InvalidSpec, "output size must be positive");
  int src = image.rows;
  FloatImage out;
  out.rows = out_size;
  out.cols = out_size;
  if (src == out_size) {
    out.px = image.px;
    return out;
  }
  out.px.resize(static_cast<size_t>(out_size) * out_size);
  if (src == 2 * out_size) {
    // exact 2x2 box mean
    for (int r = 0; r < out_size; ++r) {
      const float* top = image.px.data() + static_cast<size_t>(2 * r) * src;
      const float* bot = top + src;
      float* dst = out.px.data() + static_cast<size_t>(r) * out_size;
      for (int c = 0; c < out_size; ++c)
        dst[c] = 0.25f * (top[2 * c] + top[2 * c + 1] + bot[2 * c] + bot[2 * c + 1]);
    }
    return out;
  }
  // bilinear, pixel centers aligned (src = (dst + 0.5) * scale - 0.5)
  double scale = static_cast<double>(src) / out_size;
  std::vector<int> i0(out_size), i1(out_size);
  std::vector<double> frac(out_size);
  for (int d = 0; d < out_size; ++d) {
    double s = std::clamp((d + 0.5) * scale - 0.5, 0.0, src - 1.0);
    i0[d] = static_cast<int>(s);
    i1[d] = std::min(i0[d] + 1, src - 1);
    frac[d] = s - i0[d];
  }
  for (int r = 0; r < out_size; ++r) {
    const float* row0 = image.px.data() + static_cast<size_t>(i0[r]) * src;
    const float* row1 = image.px.data() + static_cast<size_t>(i1[r]) * src;
    double fr = frac[r];
    float* dst = out.px.data() + static_cast<size_t>(r) * out_size;
    for (int c = 0; c < out_size; ++c) {
      double top = row0[i0[c]] + (row0[i1[c]] - row0[i0[c]]) * frac[c];
      double bot = row1[i0[c]] + (row1[i1[c]] - row1[i0[c]]) * frac[c];
      dst[c] = static_cast<float>(top + (bot - top) * fr);
    }
  }
  return out;
}

FloatImage downsample_256(const FloatImage& image) { return resize_square(image, 256); }

double regression_target(double z_mm, double z_l3_mm, const SelectionConfig& config) {
  check_config(config);
  double dz = z_mm - z_l3_mm;
  return sigmoid(config.literal_tau_product ? config.tau_mm * dz : dz / config.tau_mm);
}

std::vector<double> predict_offsets(const CtSeries& series, Model& regressor) {
  if (series.slices.empty())
    throw Error(ErrorCode::EmptySeries, "cannot predict offsets for an empty series");
  int edge = regressor.input_size() == 0 ? 256 : static_cast<int>(regressor.input_size());

  std::vector<double> out;
  out.reserve(series.slices.size());
  // bounded-memory chunks; chunking is fixed so results are reproducible
  const size_t chunk = 8;
  for (size_t begin = 0; begin < series.slices.size(); begin += chunk) {
    size_t n = std::min(chunk, series.slices.size() - begin);
    std::vector<float> batch;
    batch.reserve(n * static_cast<size_t>(edge) * edge);
    for (size_t i = 0; i < n; ++i) {
      FloatImage img = downsample_256(window_normalize(series.slices[begin + i]));
      img = resize_square(img, edge);
      batch.insert(batch.end(), img.px.begin(), img.px.end());
    }
    Graph<float> g;
    Node<float>* x =
        g.leaf({static_cast<int>(n), 1, edge, edge}, std::move(batch), false);
    Forward f = regressor.run(g, x, false);
    for (size_t i = 0; i < n; ++i) out.push_back(f.out->value[i]);
  }
  return out;
}

std::vector<double> smooth_offsets(const std::vector<double>& values, double sigma) {
  if (sigma < 0) throw Error(ErrorCode::InvalidSpec, "sigma must be non-negative");
  if (sigma == 0 || values.size() < 2) return values;
  int radius = static_cast<int>(std::ceil(3.0 * sigma));
  std::vector<double> weight(static_cast<size_t>(radius) + 1);
  for (int k = 0; k <= radius; ++k)
    weight[k] = std::exp(-0.5 * (static_cast<double>(k) * k) / (sigma * sigma));

  int n = static_cast<int>(values.size());
  std::vector<double> out(values.size());
  for (int i = 0; i < n; ++i) {
    double acc = 0.0, norm = 0.0;
    for (int k = -radius; k <= radius; ++k) {
      int j = i + k;
      if (j < 0 || j >= n) continue;  // renormalize over in-bounds taps
      double w = weight[std::abs(k)];
      acc += w * values[j];
      norm += w;
    }
    out[i] = acc / norm;
  }
  return out;
}

int select_slice(const std::vector<double>& smoothed, const std::vector<double>& z_mm,
                 double threshold) {
  if (smoothed.size() != z_mm.size())
    throw Error(ErrorCode::ShapeMismatch, "offset and z sequences differ in length");
  if (smoothed.empty())
    throw Error(ErrorCode::NoCrossing, "empty offset sequence");

  int n = static_cast<int>(smoothed.size());
  bool found = false;
  double best_z = 0.0;
  auto consider = [&](double z) {
    if (!found || z > best_z) best_z = z;
    found = true;
  };
  for (int i = 0; i < n; ++i)
    if (smoothed[i] == threshold) consider(z_mm[i]);
  for (int i = 0; i + 1 < n; ++i) {
    double a = smoothed[i] - threshold, b = smoothed[i + 1] - threshold;
    if (a * b < 0) {
      double t = a / (a - b);
      consider(z_mm[i] + t * (z_mm[i + 1] - z_mm[i]));
    }
  }
  if (!found)
    throw Error(ErrorCode::NoCrossing, "signal never crosses the selection threshold");

  // snap to the nearest physical slice; equidistant snaps toward the head
  int best = 0;
  double best_dist = std::abs(z_mm[0] - best_z);
  for (int i = 1; i < n; ++i) {
    double d = std::abs(z_mm[i] - best_z);
    if (d <= best_dist) {
      best_dist = d;
      best = i;
    }
  }
  return best;
}

std::vector<uint8_t> argmax_labels(std::span<const float> probs, int classes, int rows,
                                   int cols) {
  size_t plane = static_cast<size_t>(rows) * cols;
  if (classes < 1 || probs.size() != plane * static_cast<size_t>(classes))
    throw Error(ErrorCode::ShapeMismatch, "probability buffer does not match dims");
  std::vector<uint8_t> labels(plane);
  for (size_t p = 0; p < plane; ++p) {
    int best = 0;
    float best_v = probs[p];
    for (int c = 1; c < classes; ++c) {
      float v = probs[static_cast<size_t>(c) * plane + p];
      if (v > best_v) {  // strict: ties keep the lower class id
        best_v = v;
        best = c;
      }
    }
    labels[p] = static_cast<uint8_t>(best);
  }
  return labels;
}

LabelMap segment_slice(const CtSlice& slice, Model& unet) {
  const int canvas = 512;
  if (slice.rows < 1 || slice.cols < 1)
    throw Error(ErrorCode::ShapeMismatch, "empty slice");

  // center the slice on the canvas; out-of-canvas content is cropped away
  int pad_r = (canvas - slice.rows) / 2;
  int pad_c = (canvas - slice.cols) / 2;
  CtSlice padded;
  padded.rows = canvas;
  padded.cols = canvas;
  padded.hu.assign(static_cast<size_t>(canvas) * canvas, -1024.0f);
  for (int r = 0; r < slice.rows; ++r) {
    int rr = r + pad_r;
    if (rr < 0 || rr >= canvas) continue;
    for (int c = 0; c < slice.cols; ++c) {
      int cc = c + pad_c;
      if (cc < 0 || cc >= canvas) continue;
      padded.hu[static_cast<size_t>(rr) * canvas + cc] =
          slice.hu[static_cast<size_t>(r) * slice.cols + c];
    }
  }

  FloatImage img = window_normalize(padded);
  Graph<float> g;
  Node<float>* x = g.leaf({1, 1, canvas, canvas}, std::move(img.px), false);
  Forward f = unet.run(g, x, false);
  int classes = f.out->shape[1];
  std::vector<uint8_t> canvas_labels =
      argmax_labels(std::span<const float>(f.out->value), classes, canvas, canvas);

  LabelMap out;
  out.rows = slice.rows;
  out.cols = slice.cols;
  out.row_spacing_mm = slice.row_spacing_mm;
  out.col_spacing_mm = slice.col_spacing_mm;
  out.labels.assign(static_cast<size_t>(slice.rows) * slice.cols, 0);
  for (int r = 0; r < slice.rows; ++r) {
    int rr = r + pad_r;
    if (rr < 0 || rr >= canvas) continue;
    for (int c = 0; c < slice.cols; ++c) {
      int cc = c + pad_c;
      if (cc < 0 || cc >= canvas) continue;
      out.labels[static_cast<size_t>(r) * slice.cols + c] =
          canvas_labels[static_cast<size_t>(rr) * canvas + cc];
    }
  }
  return out;
}

LabelMap apply_attenuation_mask(const LabelMap& labels, const CtSlice& slice,
                                const AttenuationRanges& ranges) {
  check_ranges(ranges);
  if (labels.rows != slice.rows || labels.cols != slice.cols)
    throw Error(ErrorCode::ShapeMismatch, "label map and slice dims differ");
  LabelMap out = labels;
  for (size_t i = 0; i < out.labels.size(); ++i) {
    double hu = slice.hu[i];
    uint8_t l = out.labels[i];
    if (l == 1 && (hu < ranges.muscle_lo_hu || hu > ranges.muscle_hi_hu))
      out.labels[i] = 0;
    else if ((l == 2 || l == 3) && (hu < ranges.fat_lo_hu || hu > ranges.fat_hi_hu))
      out.labels[i] = 0;
  }
  return out;
}

TissueAreas compute_areas(const LabelMap& labels) {
  if (labels.row_spacing_mm <= 0 || labels.col_spacing_mm <= 0)
    throw Error(ErrorCode::InvalidSpec, "pixel spacing must be positive");
  size_t counts[4] = {0, 0, 0, 0};
  for (uint8_t l : labels.labels)
    if (l < 4) ++counts[l];
  double px_cm2 = labels.row_spacing_mm * labels.col_spacing_mm / 100.0;
  TissueAreas areas;
  areas.muscle_cm2 = counts[1] * px_cm2;
  areas.subcut_cm2 = counts[2] * px_cm2;
  areas.visceral_cm2 = counts[3] * px_cm2;
  return areas;
}

BodyComposition analyze_series(const CtSeries& series, Model& regressor, Model& unet,
                               const SelectionConfig& config) {
  check_config(config);
  if (series.slices.empty())
    throw Error(ErrorCode::EmptySeries, "series " + series.series_uid + " has no slices");

  std::vector<double> offsets = predict_offsets(series, regressor);
  std::vector<double> smoothed = smooth_offsets(offsets, config.sigma_slices);
  std::vector<double> zs;
  zs.reserve(series.slices.size());
  for (const CtSlice& s : series.slices) zs.push_back(s.z_mm);

  int index;
  try {
    index = select_slice(smoothed, zs, config.threshold);
  } catch (const Error& e) {
    if (e.code() == ErrorCode::NoCrossing)
      throw Error(ErrorCode::NoCrossing,
                  "series " + series.series_uid + " does not cross the selection threshold");
    throw;
  }

  const CtSlice& selected = series.slices[index];
  LabelMap labels = segment_slice(selected, unet);
  labels = apply_attenuation_mask(labels, selected);

  BodyComposition bc;
  bc.slice_index = index;
  bc.z_mm = selected.z_mm;
  bc.areas = compute_areas(labels);
  return bc;
}

std::string result_header() {
  return "series_id,slice_index,z_mm,muscle_cm2,subcutaneous_cm2,visceral_cm2";
}

std::string result_row(const std::string& series_id, const BodyComposition& bc) {
  char buf[160];
  std::snprintf(buf, sizeof(buf), "%d,%.2f,%.2f,%.2f,%.2f", bc.slice_index, bc.z_mm,
                bc.areas.muscle_cm2, bc.areas.subcut_cm2, bc.areas.visceral_cm2);
  return series_id + "," + buf;
}

}  // namespace bc
