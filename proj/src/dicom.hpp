#pragma once

#include <cstdint>
#include <filesystem>
#include <span>
#include <string>
#include <vector>

#include "common.hpp"

namespace bc {

// One decoded data element. Values are kept as raw bytes; typed readers live
// on DicomDataset.
struct DicomElement {
  uint16_t group = 0;
  uint16_t element = 0;
  std::string vr;
  std::vector<uint8_t> value;
};

struct DicomDataset {
  // ascending (group, element); file meta (group 0002) included
  std::vector<DicomElement> elements;
  std::string transfer_syntax;

  const DicomElement* find(uint16_t group, uint16_t element) const;
  // Readers raise MissingRequiredTag when the tag is absent and
  // MalformedDecimal when a decimal string does not parse.
  uint16_t read_u16(uint16_t group, uint16_t element) const;
  std::string read_string(uint16_t group, uint16_t element) const;
  std::vector<double> read_decimals(uint16_t group, uint16_t element) const;
};

struct CtSlice {
  int rows = 0;
  int cols = 0;
  std::vector<float> hu;  // rows * cols Hounsfield units
  double z_mm = 0.0;
  double row_spacing_mm = 1.0;
  double col_spacing_mm = 1.0;
};

struct CtSeries {
  std::string series_uid;
  std::vector<CtSlice> slices;  // strictly ascending z_mm
};

// Metadata the pixel array itself does not carry.
struct SliceMeta {
  std::string series_uid;
  double rescale_intercept = -1024.0;
  double rescale_slope = 1.0;
  double origin_x_mm = 0.0;
  double origin_y_mm = 0.0;
};

// Explicit-VR little-endian Part-10 subset. Anything else is rejected with
// UnsupportedTransferSyntax; declared element lengths are never overrun
// (TruncatedElement instead).
DicomDataset parse_dataset(std::span<const uint8_t> bytes);

// hu = stored * RescaleSlope + RescaleIntercept. The z coordinate comes from
// Image Position (Patient)[2], falling back to Slice Location.
CtSlice decode_hu(const DicomDataset& ds);

// Reads every *.dcm file in the directory and sorts slices by ascending z,
// regardless of file naming. Errors: EmptySeries, InconsistentGeometry,
// DuplicateZ.
CtSeries load_series(const std::filesystem::path& dir);

// Emits a Part-10 file that parse_dataset + decode_hu reproduce exactly.
// Raises ValueOverflow when a HU value cannot be stored in a signed 16-bit
// pixel under the given rescale.
std::vector<uint8_t> write_dataset(const CtSlice& slice, const SliceMeta& meta);

}  // namespace bc
