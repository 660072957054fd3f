#include "phantom.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <sstream>

#include "dicom.hpp"

namespace bc {
namespace {

// Ring boundaries derived from the spec: a1/b1 inside the skin, a2/b2 inside
// the subcutaneous fat, a3/b3 is the visceral cavity.
struct Rings {
  double a1, b1, a2, b2, a3, b3;
};

Rings derive_rings(const PhantomSpec& s) {
  Rings r;
  r.a1 = s.body_a_mm - s.skin_mm;
  r.b1 = s.body_b_mm - s.skin_mm;
  r.a2 = r.a1 - s.subcut_mm;
  r.b2 = r.b1 - s.subcut_mm;
  r.a3 = r.a2 - s.muscle_mm;
  r.b3 = r.b2 - s.muscle_mm;
  return r;
}

void validate(const PhantomSpec& s) {
  auto fail = [](const std::string& msg) { throw Error(ErrorCode::InvalidSpec, msg); };
  if (s.slice_count < 2) fail("slice_count must be at least 2");
  if (s.slice_spacing_mm <= 0 || s.pixel_spacing_mm <= 0) fail("spacings must be positive");
  if (s.image_size < 64 || s.image_size > 2048) fail("image_size out of range [64, 2048]");
  if (s.l3_index < 0 || s.l3_index >= s.slice_count) fail("l3_index outside the volume");
  if (s.skin_mm <= 0 || s.subcut_mm <= 0 || s.muscle_mm <= 0) fail("ring thicknesses must be positive");
  if (s.blob_count < 0 || s.blob_count > 16) fail("blob_count out of range [0, 16]");
  if (s.blob_count > 0 && !(s.blob_r_lo > 0 && s.blob_r_lo <= s.blob_r_hi && s.blob_r_hi <= 0.32))
    fail("blob radius fractions must satisfy 0 < lo <= hi <= 0.32");
  if (std::abs(s.taper) > 1.0 || std::abs(s.bow) > 1.0) fail("taper/bow out of range [-1, 1]");
  if (s.noise_sigma_hu < 0 || s.noise_sigma_hu > 30) fail("noise sigma out of range [0, 30]");
  if (s.marker_tau_mm <= 0) fail("marker_tau_mm must be positive");

  Rings r = derive_rings(s);
  if (r.a3 < 24 || r.b3 < 20) fail("visceral cavity too small for marker and blobs");
  // the widest cross-section (scale 1.15) must stay clear of the image edge
  double half_fov = 0.5 * s.image_size * s.pixel_spacing_mm;
  if (s.body_a_mm * 1.15 > half_fov - 2 || s.body_b_mm * 1.15 > half_fov - 2)
    fail("body does not fit the field of view at maximum scale");

  // tissue means must sit inside the attenuation ranges used downstream
  if (s.hu_muscle < -29 || s.hu_muscle > 150) fail("hu_muscle outside [-29, 150]");
  if (s.hu_fat < -190 || s.hu_fat > -30) fail("hu_fat outside [-190, -30]");
  if (s.hu_marker < 300) fail("hu_marker must be at least 300");
  if (s.hu_air > -900) fail("hu_air must be at most -900");
  if (s.hu_soft <= -1000 || s.hu_soft >= 300) fail("hu_soft out of range (-1000, 300)");

  // keep decimal strings exactly re-parseable: quarter-millimetre grid
  auto quarter = [](double v) { return v * 4.0 == std::round(v * 4.0); };
  if (!quarter(s.slice_spacing_mm)) fail("slice_spacing_mm must be a multiple of 0.25");
  if (!quarter(s.z0_mm)) fail("z0_mm must be a multiple of 0.25");
  if (!quarter(s.pixel_spacing_mm)) fail("pixel_spacing_mm must be a multiple of 0.25");
}

struct Blob {
  double cx, cy, r;
};

bool inside_ellipse(double u, double v, double a, double b) {
  return (u * u) / (a * a) + (v * v) / (b * b) <= 1.0;
}

// Blob circles in base (L3) coordinates. Deterministic given the spec seed;
// placement is rejection sampling inside the cavity with a 2 mm margin, kept
// clear of the vertebra marker so visceral truth stays exactly sum(pi r^2).
std::vector<Blob> place_blobs(const PhantomSpec& s, const Rings& r) {
  std::vector<Blob> blobs;
  if (s.blob_count == 0) return blobs;
  Rng rng = Rng(s.seed).fork(11);
  double mn = std::min(r.a3, r.b3);
  double marker_floor = 0.20 * r.b3;  // lowest v the marker ever reaches
  for (int i = 0; i < s.blob_count; ++i) {
    double radius = mn * rng.uniform(s.blob_r_lo, s.blob_r_hi);
    bool placed = false;
    for (int shrink = 0; shrink < 6 && !placed; ++shrink) {
      for (int attempt = 0; attempt < 100 && !placed; ++attempt) {
        double cx = rng.uniform(-1.0, 1.0) * (r.a3 - radius);
        double cy = rng.uniform(-1.0, 1.0) * (r.b3 - radius);
        if (cy + radius > marker_floor - 2.0) continue;
        // exact containment check: sample the circle boundary against the
        // cavity shrunk by the margin
        bool inside = true;
        for (int k = 0; k < 64 && inside; ++k) {
          double t = 2.0 * 3.14159265358979323846 * k / 64.0;
          inside = inside_ellipse(cx + radius * std::cos(t), cy + radius * std::sin(t),
                                  r.a3 - 2.0, r.b3 - 2.0);
        }
        if (!inside) continue;
        bool clear = true;
        for (const Blob& other : blobs) {
          double dx = cx - other.cx, dy = cy - other.cy;
          if (std::sqrt(dx * dx + dy * dy) < radius + other.r + 2.0) {
            clear = false;
            break;
          }
        }
        if (!clear) continue;
        blobs.push_back({cx, cy, radius});
        placed = true;
      }
      if (!placed) radius *= 0.85;
    }
    if (!placed)
      throw Error(ErrorCode::InvalidSpec, "unable to place visceral blobs in the cavity");
  }
  return blobs;
}

double sigmoid(double x) { return 1.0 / (1.0 + std::exp(-x)); }

double scale_at(const PhantomSpec& s, double dz_mm) {
  double t = dz_mm / 100.0;
  return std::clamp(1.0 + s.taper * t - s.bow * t * t, 0.85, 1.15);
}

// Vertebra marker in base coordinates: an ellipse body, transverse wings
// whose length grows smoothly with dz (the signal the regressor learns), and
// a spinous bump that appears only at and above L3.
struct Marker {
  double yc, va, vb, band_half, wing_len, bump_y, bump_r;
  bool bump;

  Marker(const Rings& r, double dz_mm, double tau_mm) {
    yc = 0.40 * r.b3;
    va = 0.16 * r.a3;
    vb = 0.20 * r.b3;
    band_half = 0.05 * r.b3;
    wing_len = r.a3 * (0.06 + 0.24 * sigmoid(dz_mm / tau_mm));
    bump_r = 0.09 * r.b3;
    bump_y = yc + vb + 0.6 * bump_r;
    bump = dz_mm >= 0.0;
  }

  bool contains(double u, double v) const {
    if (inside_ellipse(u, v - yc, va, vb)) return true;
    if (std::abs(v - yc) <= band_half && std::abs(u) <= va + wing_len) return true;
    if (bump) {
      double dy = v - bump_y;
      if (u * u + dy * dy <= bump_r * bump_r) return true;
    }
    return false;
  }
};

}  // namespace

SliceRaster rasterize_slice(const PhantomSpec& spec, int slice_index) {
  validate(spec);
  if (slice_index < 0 || slice_index >= spec.slice_count)
    throw Error(ErrorCode::InvalidSpec, "slice index outside the volume");

  Rings r = derive_rings(spec);
  std::vector<Blob> blobs = place_blobs(spec, r);
  double dz = (slice_index - spec.l3_index) * spec.slice_spacing_mm;
  double s = scale_at(spec, dz);
  Marker marker(r, dz, spec.marker_tau_mm);

  int size = spec.image_size;
  SliceRaster out;
  out.hu.resize(static_cast<size_t>(size) * size);
  out.labels.resize(static_cast<size_t>(size) * size);

  Rng noise = Rng(spec.seed).fork(100 + static_cast<uint64_t>(slice_index));
  double half = (size - 1) / 2.0;
  size_t idx = 0;
  for (int row = 0; row < size; ++row) {
    double v = (row - half) * spec.pixel_spacing_mm / s;
    for (int col = 0; col < size; ++col, ++idx) {
      double u = (col - half) * spec.pixel_spacing_mm / s;
      double mean;
      uint8_t label;
      if (!inside_ellipse(u, v, spec.body_a_mm, spec.body_b_mm)) {
        mean = spec.hu_air;
        label = 0;
      } else if (!inside_ellipse(u, v, r.a1, r.b1)) {
        mean = spec.hu_soft;  // skin
        label = 0;
      } else if (!inside_ellipse(u, v, r.a2, r.b2)) {
        mean = spec.hu_fat;  // subcutaneous ring
        label = 2;
      } else if (!inside_ellipse(u, v, r.a3, r.b3)) {
        mean = spec.hu_muscle;
        label = 1;
      } else if (marker.contains(u, v)) {
        mean = spec.hu_marker;
        label = 0;
      } else {
        mean = spec.hu_soft;
        label = 0;
        for (const Blob& blob : blobs) {
          double du = u - blob.cx, dv = v - blob.cy;
          if (du * du + dv * dv <= blob.r * blob.r) {
            mean = spec.hu_fat;  // visceral fat
            label = 3;
            break;
          }
        }
      }
      double n = spec.noise_sigma_hu > 0 ? noise.normal(0.0, spec.noise_sigma_hu) : 0.0;
      out.hu[idx] = static_cast<float>(std::lround(mean + n));
      out.labels[idx] = label;
    }
  }
  return out;
}

PhantomTruth analytic_truth(const PhantomSpec& spec, const std::string& series_uid) {
  validate(spec);
  Rings r = derive_rings(spec);
  std::vector<Blob> blobs = place_blobs(spec, r);
  const double pi = 3.14159265358979323846;
  PhantomTruth t;
  t.series_uid = series_uid;
  t.l3_index = spec.l3_index;
  t.z_l3_mm = spec.z0_mm + spec.l3_index * spec.slice_spacing_mm;
  t.muscle_cm2 = pi * (r.a2 * r.b2 - r.a3 * r.b3) / 100.0;
  t.subcut_cm2 = pi * (r.a1 * r.b1 - r.a2 * r.b2) / 100.0;
  t.visceral_cm2 = 0.0;
  for (const Blob& blob : blobs) t.visceral_cm2 += pi * blob.r * blob.r / 100.0;
  return t;
}

PhantomTruth generate_series(const PhantomSpec& spec, const std::string& series_uid,
                             const std::filesystem::path& dir) {
  PhantomTruth truth = analytic_truth(spec, series_uid);
  std::error_code ec;
  std::filesystem::create_directories(dir, ec);
  if (ec) throw Error(ErrorCode::IoError, "cannot create " + dir.string());

  SliceMeta meta;
  meta.series_uid = series_uid;
  meta.origin_x_mm = -(spec.image_size - 1) / 2.0 * spec.pixel_spacing_mm;
  meta.origin_y_mm = meta.origin_x_mm;

  for (int i = 0; i < spec.slice_count; ++i) {
    SliceRaster raster = rasterize_slice(spec, i);
    CtSlice slice;
    slice.rows = spec.image_size;
    slice.cols = spec.image_size;
    slice.hu = std::move(raster.hu);
    slice.z_mm = spec.z0_mm + i * spec.slice_spacing_mm;
    slice.row_spacing_mm = spec.pixel_spacing_mm;
    slice.col_spacing_mm = spec.pixel_spacing_mm;

    char name[32];
    std::snprintf(name, sizeof(name), "slice_%03d.dcm", i);
    write_file_atomic(dir / name, write_dataset(slice, meta));
    std::snprintf(name, sizeof(name), "mask_%03d.pgm", i);
    write_pgm(dir / name, spec.image_size, spec.image_size, raster.labels);
  }
  return truth;
}

std::vector<PhantomTruth> generate_cohort(int n, uint64_t seed, int image_size,
                                          const std::filesystem::path& out_dir) {
  if (n < 1) throw Error(ErrorCode::InvalidSpec, "cohort size must be at least 1");
  if (image_size < 256 || image_size > 1024)
    throw Error(ErrorCode::InvalidSpec, "cohort image_size out of range [256, 1024]");

  // largest body that fits the field of view at maximum scale
  double body_a_hi = std::min(132.0, (0.5 * image_size - 2.0) / 1.15 - 2.0);
  std::error_code ec;
  std::filesystem::create_directories(out_dir, ec);
  if (ec) throw Error(ErrorCode::IoError, "cannot create " + out_dir.string());

  Rng rng(seed);
  std::vector<PhantomTruth> rows;
  rows.reserve(static_cast<size_t>(n));
  for (int idx = 0; idx < n; ++idx) {
    // stratified habitus factor: cycles lean to bulky so every cohort of a
    // few series already spans a wide muscle-area range
    double f = ((idx % 4) + rng.uniform()) / 4.0;

    PhantomSpec s;
    s.image_size = image_size;
    s.pixel_spacing_mm = 1.0;
    s.body_a_mm = 100.0 + (body_a_hi - 100.0) * f;
    s.body_b_mm = s.body_a_mm * (0.70 + 0.15 * f);
    s.skin_mm = 2.0;
    s.subcut_mm = 26.0 - 16.0 * f;
    s.muscle_mm = 8.0 + 10.0 * f;
    s.blob_count = 3 + rng.uniform_int(2);
    s.taper = rng.uniform(-0.15, 0.15);
    s.bow = rng.uniform(0.0, 0.3);
    s.slice_count = 12 + rng.uniform_int(6);
    s.slice_spacing_mm = 0.25 * (8 + rng.uniform_int(13));  // 2.0 .. 5.0 mm
    int mid = s.slice_count / 2;
    s.l3_index = std::clamp(mid + rng.uniform_int(5) - 2, 2, s.slice_count - 3);
    s.z0_mm = 0.25 * rng.uniform_int(401) - 50.0;
    s.hu_muscle = 55 + rng.uniform_int(11);
    s.hu_fat = -105 + rng.uniform_int(11);
    s.seed = rng.next_u64();

    std::ostringstream uid;
    uid << "1.2.826.0.1.3680043.10." << (seed % 1000000007ULL) << "." << (idx + 1);
    rows.push_back(generate_series(s, uid.str(), out_dir / uid.str()));
  }
  write_manifest(rows, out_dir / "manifest.csv");
  return rows;
}

void write_manifest(const std::vector<PhantomTruth>& rows,
                    const std::filesystem::path& path) {
  std::ostringstream out;
  out << "series_id,z_l3_mm,l3_index,muscle_cm2,subcutaneous_cm2,visceral_cm2\n";
  for (const PhantomTruth& t : rows) {
    out << t.series_uid << ',' << format_double(t.z_l3_mm) << ',' << t.l3_index << ','
        << format_double(t.muscle_cm2) << ',' << format_double(t.subcut_cm2) << ','
        << format_double(t.visceral_cm2) << '\n';
  }
  write_text_atomic(path, out.str());
}

std::vector<PhantomTruth> read_manifest(const std::filesystem::path& path) {
  std::vector<uint8_t> bytes = read_file(path);
  std::string text(bytes.begin(), bytes.end());
  std::istringstream in(text);
  std::string line;
  std::vector<PhantomTruth> rows;
  bool header = true;
  while (std::getline(in, line)) {
    if (!line.empty() && line.back() == '\r') line.pop_back();
    if (trim(line).empty()) continue;
    if (header) {
      header = false;
      continue;
    }
    std::vector<std::string> cols = split(line, ',');
    if (cols.size() != 6)
      throw Error(ErrorCode::IoError,
                  "manifest row needs 6 columns, got " + std::to_string(cols.size()));
    PhantomTruth t;
    t.series_uid = trim(cols[0]);
    t.z_l3_mm = parse_double(trim(cols[1]), ErrorCode::MalformedDecimal);
    t.l3_index = static_cast<int>(parse_double(trim(cols[2]), ErrorCode::MalformedDecimal));
    t.muscle_cm2 = parse_double(trim(cols[3]), ErrorCode::MalformedDecimal);
    t.subcut_cm2 = parse_double(trim(cols[4]), ErrorCode::MalformedDecimal);
    t.visceral_cm2 = parse_double(trim(cols[5]), ErrorCode::MalformedDecimal);
    rows.push_back(std::move(t));
  }
  return rows;
}

}  // namespace bc
