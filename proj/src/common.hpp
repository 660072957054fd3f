#pragma once

#include <cstdint>
#include <filesystem>
#include <random>
#include <span>
#include <stdexcept>
#include <string>
#include <vector>

namespace bc {

// Typed failure reasons surfaced through bc::Error. Grouped by the layer that
// raises them; the C API maps each group to a process exit code.
enum class ErrorCode {
  // DICOM parsing and series assembly
  MissingMagic,
  UnsupportedTransferSyntax,
  TruncatedElement,
  MalformedDecimal,
  MissingRequiredTag,
  PixelSizeMismatch,
  ValueOverflow,
  EmptySeries,
  InconsistentGeometry,
  DuplicateZ,
  // tensor and model construction
  ShapeMismatch,
  InvalidSpec,
  DisconnectedTensor,
  // checkpoints
  BadMagic,
  VersionMismatch,
  CorruptEntry,
  // pipeline
  NonSquareInput,
  NoCrossing,
  // training
  EmptyCohort,
  LabelOutOfRange,
  MissingSeries,
  // evaluation
  EmptyInput,
  ZeroTruthArea,
  DegenerateInput,
  // filesystem and CLI
  IoError,
  UsageError,
};

const char* error_code_name(ErrorCode code);

// Which exit code a failure maps to at the CLI boundary.
enum class ErrorCategory { Usage = 2, Data = 3, Model = 4 };
ErrorCategory error_category(ErrorCode code);

class Error : public std::runtime_error {
 public:
  Error(ErrorCode code, const std::string& message)
      : std::runtime_error(std::string(error_code_name(code)) + ": " + message),
        code_(code) {}
  ErrorCode code() const { return code_; }

 private:
  ErrorCode code_;
};

// Deterministic random source. Wraps mt19937_64 but maps draws to doubles by
// hand so results are identical across standard library implementations.
class Rng {
 public:
  explicit Rng(uint64_t seed);
  uint64_t next_u64();
  // uniform in [0, 1)
  double uniform();
  double uniform(double lo, double hi);
  // uniform integer in [0, n)
  int uniform_int(int n);
  // standard normal via Box-Muller
  double normal();
  double normal(double mean, double sigma);
  // independent generator for a named substream of the same seed
  Rng fork(uint64_t stream) const;
  // Fisher-Yates shuffle of indices [0, n)
  std::vector<int> permutation(int n);

 private:
  uint64_t base_seed_;
  std::mt19937_64 gen_;
  double spare_normal_ = 0.0;
  bool has_spare_ = false;
};

// File helpers. Writes go to a sibling temp file first and are renamed into
// place so partially written outputs are never observed.
std::vector<uint8_t> read_file(const std::filesystem::path& path);
void write_file_atomic(const std::filesystem::path& path, std::span<const uint8_t> bytes);
void write_text_atomic(const std::filesystem::path& path, const std::string& text);

// Binary PGM (P5), used for phantom ground-truth masks.
void write_pgm(const std::filesystem::path& path, int rows, int cols,
               std::span<const uint8_t> pixels);
struct PgmImage {
  int rows = 0;
  int cols = 0;
  std::vector<uint8_t> pixels;
};
PgmImage read_pgm(const std::filesystem::path& path);

// Small string utilities for CSV-style files.
std::vector<std::string> split(const std::string& line, char sep);
std::string trim(const std::string& s);
double parse_double(const std::string& s, ErrorCode on_error);
std::string format_double(double v);

}  // namespace bc
