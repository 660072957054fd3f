#include "dicom.hpp"

#include <algorithm>
#include <bit>
#include <cmath>
#include <cstring>

static_assert(std::endian::native == std::endian::little,
              "DICOM subset reader/writer assumes a little-endian host");

namespace bc {

namespace {

constexpr const char* kExplicitLE = "1.2.840.10008.1.2.1";

bool long_form_vr(const std::string& vr) {
  return vr == "OB" || vr == "OW" || vr == "OF" || vr == "SQ" || vr == "UT" ||
         vr == "UN";
}

struct Cursor {
  std::span<const uint8_t> buf;
  size_t pos = 0;

  size_t left() const { return buf.size() - pos; }
  void need(size_t n) const {
    if (left() < n)
      throw Error(ErrorCode::TruncatedElement, "element extends past the end of the file");
  }
  uint16_t peek_u16() const {
    need(2);
    return uint16_t(buf[pos] | buf[pos + 1] << 8);
  }
  uint16_t u16() {
    const uint16_t v = peek_u16();
    pos += 2;
    return v;
  }
  uint32_t u32() {
    need(4);
    const uint32_t v = uint32_t(buf[pos]) | uint32_t(buf[pos + 1]) << 8 |
                       uint32_t(buf[pos + 2]) << 16 | uint32_t(buf[pos + 3]) << 24;
    pos += 4;
    return v;
  }
  std::vector<uint8_t> bytes(size_t n) {
    need(n);
    std::vector<uint8_t> v(buf.begin() + pos, buf.begin() + pos + n);
    pos += n;
    return v;
  }
};

DicomElement parse_element(Cursor& cur) {
  DicomElement e;
  e.group = cur.u16();
  e.element = cur.u16();
  cur.need(2);
  e.vr.assign(reinterpret_cast<const char*>(cur.buf.data() + cur.pos), 2);
  cur.pos += 2;
  if (e.vr[0] < 'A' || e.vr[0] > 'Z' || e.vr[1] < 'A' || e.vr[1] > 'Z')
    throw Error(ErrorCode::UnsupportedTransferSyntax,
                "unreadable VR code; implicit-VR files are not supported");
  uint32_t len;
  if (long_form_vr(e.vr)) {
    cur.u16();  // reserved
    len = cur.u32();
  } else {
    len = cur.u16();
  }
  if (len == 0xFFFFFFFFu)
    throw Error(ErrorCode::UnsupportedTransferSyntax,
                "undefined-length elements are not supported");
  e.value = cur.bytes(len);
  return e;
}

std::string strip_padding(const std::vector<uint8_t>& value) {
  std::string s(value.begin(), value.end());
  while (!s.empty() && (s.back() == '\0' || s.back() == ' ')) s.pop_back();
  return s;
}

[[noreturn]] void missing(uint16_t group, uint16_t element) {
  char buf[32];
  std::snprintf(buf, sizeof(buf), "(%04X,%04X)", group, element);
  throw Error(ErrorCode::MissingRequiredTag, std::string("required tag ") + buf + " absent");
}

}  // namespace

const DicomElement* DicomDataset::find(uint16_t group, uint16_t element) const {
  for (const DicomElement& e : elements)
    if (e.group == group && e.element == element) return &e;
  return nullptr;
}

uint16_t DicomDataset::read_u16(uint16_t group, uint16_t element) const {
  const DicomElement* e = find(group, element);
  if (!e) missing(group, element);
  if (e->value.size() < 2)
    throw Error(ErrorCode::TruncatedElement, "unsigned-short value shorter than 2 bytes");
  return uint16_t(e->value[0] | e->value[1] << 8);
}

std::string DicomDataset::read_string(uint16_t group, uint16_t element) const {
  const DicomElement* e = find(group, element);
  if (!e) missing(group, element);
  return strip_padding(e->value);
}

std::vector<double> DicomDataset::read_decimals(uint16_t group, uint16_t element) const {
  const std::string s = read_string(group, element);
  std::vector<double> out;
  for (const std::string& part : split(s, '\\'))
    out.push_back(parse_double(trim(part), ErrorCode::MalformedDecimal));
  return out;
}

DicomDataset parse_dataset(std::span<const uint8_t> bytes) {
  if (bytes.size() < 132 || std::memcmp(bytes.data() + 128, "DICM", 4) != 0)
    throw Error(ErrorCode::MissingMagic, "no DICM marker at offset 128");
  Cursor cur{bytes, 132};
  DicomDataset ds;
  while (cur.left() >= 2 && cur.peek_u16() == 0x0002)
    ds.elements.push_back(parse_element(cur));
  const DicomElement* ts = nullptr;
  for (const DicomElement& e : ds.elements)
    if (e.group == 0x0002 && e.element == 0x0010) ts = &e;
  if (!ts)
    throw Error(ErrorCode::UnsupportedTransferSyntax, "no transfer syntax declared");
  ds.transfer_syntax = strip_padding(ts->value);
  if (ds.transfer_syntax != kExplicitLE)
    throw Error(ErrorCode::UnsupportedTransferSyntax,
                "unsupported transfer syntax " + ds.transfer_syntax);
  while (cur.left() > 0) ds.elements.push_back(parse_element(cur));
  std::stable_sort(ds.elements.begin(), ds.elements.end(),
                   [](const DicomElement& a, const DicomElement& b) {
                     return a.group != b.group ? a.group < b.group
                                               : a.element < b.element;
                   });
  return ds;
}

CtSlice decode_hu(const DicomDataset& ds) {
  CtSlice s;
  s.rows = ds.read_u16(0x0028, 0x0010);
  s.cols = ds.read_u16(0x0028, 0x0011);
  if (s.rows < 1 || s.cols < 1)
    throw Error(ErrorCode::PixelSizeMismatch, "slice dimensions must be positive");
  const uint16_t alloc = ds.read_u16(0x0028, 0x0100);
  const uint16_t stored = ds.read_u16(0x0028, 0x0101);
  const uint16_t repr = ds.read_u16(0x0028, 0x0103);
  if (alloc != 16 || stored < 8 || stored > 16 || repr != 1)
    throw Error(ErrorCode::PixelSizeMismatch,
                "only 16-bit signed pixel storage is supported");

  const std::vector<double> spacing = ds.read_decimals(0x0028, 0x0030);
  if (spacing.size() != 2 || !(spacing[0] > 0.0) || !(spacing[1] > 0.0))
    throw Error(ErrorCode::MalformedDecimal, "pixel spacing needs two positive decimals");
  s.row_spacing_mm = spacing[0];
  s.col_spacing_mm = spacing[1];

  const std::vector<double> intercept = ds.read_decimals(0x0028, 0x1052);
  const std::vector<double> slope = ds.read_decimals(0x0028, 0x1053);
  if (intercept.size() != 1 || slope.size() != 1)
    throw Error(ErrorCode::MalformedDecimal, "rescale slope and intercept must be scalars");

  // geometric position wins over the bookkeeping field
  if (ds.find(0x0020, 0x0032)) {
    const std::vector<double> ipp = ds.read_decimals(0x0020, 0x0032);
    if (ipp.size() != 3)
      throw Error(ErrorCode::MalformedDecimal, "image position needs three decimals");
    s.z_mm = ipp[2];
  } else {
    const std::vector<double> loc = ds.read_decimals(0x0020, 0x1041);
    if (loc.size() != 1)
      throw Error(ErrorCode::MalformedDecimal, "slice location must be a scalar");
    s.z_mm = loc[0];
  }

  const DicomElement* px = ds.find(0x7FE0, 0x0010);
  if (!px) missing(0x7FE0, 0x0010);
  const size_t n = size_t(s.rows) * size_t(s.cols);
  if (px->value.size() != n * 2)
    throw Error(ErrorCode::PixelSizeMismatch,
                "pixel data holds " + std::to_string(px->value.size()) +
                    " bytes, geometry needs " + std::to_string(n * 2));
  s.hu.resize(n);
  for (size_t i = 0; i < n; ++i) {
    int16_t raw;
    std::memcpy(&raw, px->value.data() + i * 2, 2);
    s.hu[i] = float(double(raw) * slope[0] + intercept[0]);
  }
  return s;
}

CtSeries load_series(const std::filesystem::path& dir) {
  std::vector<std::filesystem::path> files;
  std::error_code ec;
  for (const auto& entry : std::filesystem::directory_iterator(dir, ec)) {
    if (entry.is_regular_file() && entry.path().extension() == ".dcm")
      files.push_back(entry.path());
  }
  if (ec)
    throw Error(ErrorCode::IoError, "cannot list " + dir.string() + ": " + ec.message());
  std::sort(files.begin(), files.end());
  if (files.size() < 2)
    throw Error(ErrorCode::EmptySeries, dir.string() + " holds " +
                                            std::to_string(files.size()) +
                                            " slice files, need at least 2");
  CtSeries series;
  for (const std::filesystem::path& f : files) {
    const std::vector<uint8_t> bytes = read_file(f);
    const DicomDataset ds = parse_dataset(bytes);
    CtSlice slice = decode_hu(ds);
    const std::string uid = ds.read_string(0x0020, 0x000E);
    if (series.slices.empty()) {
      series.series_uid = uid;
    } else {
      const CtSlice& first = series.slices.front();
      if (uid != series.series_uid)
        throw Error(ErrorCode::InconsistentGeometry,
                    "mixed series ids under " + dir.string());
      if (slice.rows != first.rows || slice.cols != first.cols ||
          slice.row_spacing_mm != first.row_spacing_mm ||
          slice.col_spacing_mm != first.col_spacing_mm)
        throw Error(ErrorCode::InconsistentGeometry,
                    "slice geometry differs across " + dir.string());
    }
    series.slices.push_back(std::move(slice));
  }
  std::stable_sort(series.slices.begin(), series.slices.end(),
                   [](const CtSlice& a, const CtSlice& b) { return a.z_mm < b.z_mm; });
  for (size_t i = 1; i < series.slices.size(); ++i)
    if (!(series.slices[i - 1].z_mm < series.slices[i].z_mm))
      throw Error(ErrorCode::DuplicateZ,
                  "two slices share z = " + format_double(series.slices[i].z_mm));
  return series;
}

namespace {

void put_u16(std::vector<uint8_t>& out, uint16_t v) {
  out.push_back(uint8_t(v));
  out.push_back(uint8_t(v >> 8));
}

void put_u32(std::vector<uint8_t>& out, uint32_t v) {
  out.push_back(uint8_t(v));
  out.push_back(uint8_t(v >> 8));
  out.push_back(uint8_t(v >> 16));
  out.push_back(uint8_t(v >> 24));
}

void put_element(std::vector<uint8_t>& out, uint16_t group, uint16_t element,
                 const char* vr, std::span<const uint8_t> value) {
  put_u16(out, group);
  put_u16(out, element);
  out.push_back(uint8_t(vr[0]));
  out.push_back(uint8_t(vr[1]));
  if (long_form_vr(vr)) {
    put_u16(out, 0);
    put_u32(out, uint32_t(value.size()));
  } else {
    put_u16(out, uint16_t(value.size()));
  }
  out.insert(out.end(), value.begin(), value.end());
}

std::vector<uint8_t> padded(std::string s, char pad) {
  if (s.size() % 2 != 0) s.push_back(pad);
  return std::vector<uint8_t>(s.begin(), s.end());
}

std::vector<uint8_t> ds_value(const std::vector<double>& values) {
  std::string s;
  for (size_t i = 0; i < values.size(); ++i) {
    if (i) s.push_back('\\');
    s += format_double(values[i]);
  }
  return padded(std::move(s), ' ');
}

std::vector<uint8_t> us_value(uint16_t v) {
  std::vector<uint8_t> out;
  put_u16(out, v);
  return out;
}

}  // namespace

std::vector<uint8_t> write_dataset(const CtSlice& slice, const SliceMeta& meta) {
  if (slice.rows < 1 || slice.cols < 1 || slice.rows > 0xFFFF || slice.cols > 0xFFFF ||
      slice.hu.size() != size_t(slice.rows) * size_t(slice.cols))
    throw Error(ErrorCode::PixelSizeMismatch, "slice dimensions do not match the HU array");
  if (meta.rescale_slope == 0.0)
    throw Error(ErrorCode::ValueOverflow, "rescale slope 0 cannot encode pixels");

  std::vector<uint8_t> pixels(slice.hu.size() * 2);
  for (size_t i = 0; i < slice.hu.size(); ++i) {
    const long long v =
        std::llround((double(slice.hu[i]) - meta.rescale_intercept) / meta.rescale_slope);
    if (v < -32768 || v > 32767)
      throw Error(ErrorCode::ValueOverflow,
                  "HU " + format_double(double(slice.hu[i])) +
                      " does not fit 16-bit storage under the given rescale");
    const int16_t raw = int16_t(v);
    std::memcpy(pixels.data() + i * 2, &raw, 2);
  }

  // file meta group, itself explicit little-endian
  std::vector<uint8_t> group2;
  put_element(group2, 0x0002, 0x0010, "UI", padded(kExplicitLE, '\0'));

  std::vector<uint8_t> out(128, 0);
  const char dicm[4] = {'D', 'I', 'C', 'M'};
  out.insert(out.end(), dicm, dicm + 4);
  std::vector<uint8_t> group_len;
  put_u32(group_len, uint32_t(group2.size()));
  put_element(out, 0x0002, 0x0000, "UL", group_len);
  out.insert(out.end(), group2.begin(), group2.end());

  put_element(out, 0x0020, 0x000E, "UI", padded(meta.series_uid, '\0'));
  put_element(out, 0x0020, 0x0032, "DS",
              ds_value({meta.origin_x_mm, meta.origin_y_mm, slice.z_mm}));
  put_element(out, 0x0020, 0x1041, "DS", ds_value({slice.z_mm}));
  put_element(out, 0x0028, 0x0010, "US", us_value(uint16_t(slice.rows)));
  put_element(out, 0x0028, 0x0011, "US", us_value(uint16_t(slice.cols)));
  put_element(out, 0x0028, 0x0030, "DS",
              ds_value({slice.row_spacing_mm, slice.col_spacing_mm}));
  put_element(out, 0x0028, 0x0100, "US", us_value(16));
  put_element(out, 0x0028, 0x0101, "US", us_value(16));
  put_element(out, 0x0028, 0x0102, "US", us_value(15));
  put_element(out, 0x0028, 0x0103, "US", us_value(1));
  put_element(out, 0x0028, 0x1052, "DS", ds_value({meta.rescale_intercept}));
  put_element(out, 0x0028, 0x1053, "DS", ds_value({meta.rescale_slope}));
  put_element(out, 0x7FE0, 0x0010, "OW", pixels);
  return out;
}

}  // namespace bc
