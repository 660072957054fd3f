#include "common.hpp"

#include <cmath>
#include <cstdio>
#include <cstring>
#include <fstream>

namespace bc {

const char* error_code_name(ErrorCode code) {
  switch (code) {
    case ErrorCode::MissingMagic: return "MissingMagic";
    case ErrorCode::UnsupportedTransferSyntax: return "UnsupportedTransferSyntax";
    case ErrorCode::TruncatedElement: return "TruncatedElement";
    case ErrorCode::MalformedDecimal: return "MalformedDecimal";
    case ErrorCode::MissingRequiredTag: return "MissingRequiredTag";
    case ErrorCode::PixelSizeMismatch: return "PixelSizeMismatch";
    case ErrorCode::ValueOverflow: return "ValueOverflow";
    case ErrorCode::EmptySeries: return "EmptySeries";
    case ErrorCode::InconsistentGeometry: return "InconsistentGeometry";
    case ErrorCode::DuplicateZ: return "DuplicateZ";
    case ErrorCode::ShapeMismatch: return "ShapeMismatch";
    case ErrorCode::InvalidSpec: return "InvalidSpec";
    case ErrorCode::DisconnectedTensor: return "DisconnectedTensor";
    case ErrorCode::BadMagic: return "BadMagic";
    case ErrorCode::VersionMismatch: return "VersionMismatch";
    case ErrorCode::CorruptEntry: return "CorruptEntry";
    case ErrorCode::NonSquareInput: return "NonSquareInput";
    case ErrorCode::NoCrossing: return "NoCrossing";
    case ErrorCode::EmptyCohort: return "EmptyCohort";
    case ErrorCode::LabelOutOfRange: return "LabelOutOfRange";
    case ErrorCode::MissingSeries: return "MissingSeries";
    case ErrorCode::EmptyInput: return "EmptyInput";
    case ErrorCode::ZeroTruthArea: return "ZeroTruthArea";
    case ErrorCode::DegenerateInput: return "DegenerateInput";
    case ErrorCode::IoError: return "IoError";
    case ErrorCode::UsageError: return "UsageError";
  }
  return "UnknownError";
}

ErrorCategory error_category(ErrorCode code) {
  switch (code) {
    case ErrorCode::ShapeMismatch:
    case ErrorCode::InvalidSpec:
    case ErrorCode::DisconnectedTensor:
    case ErrorCode::BadMagic:
    case ErrorCode::VersionMismatch:
    case ErrorCode::CorruptEntry:
      return ErrorCategory::Model;
    case ErrorCode::UsageError:
      return ErrorCategory::Usage;
    default:
      return ErrorCategory::Data;
  }
}

namespace {

uint64_t splitmix64(uint64_t x) {
  x += 0x9e3779b97f4a7c15ull;
  x = (x ^ (x >> 30)) * 0xbf58476d1ce4e5b9ull;
  x = (x ^ (x >> 27)) * 0x94d049bb133111ebull;
  return x ^ (x >> 31);
}

}  // namespace

Rng::Rng(uint64_t seed) : base_seed_(seed), gen_(splitmix64(seed)) {}

uint64_t Rng::next_u64() { return gen_(); }

double Rng::uniform() {
  // top 53 bits -> [0, 1)
  return double(next_u64() >> 11) * 0x1.0p-53;
}

double Rng::uniform(double lo, double hi) { return lo + (hi - lo) * uniform(); }

int Rng::uniform_int(int n) {
  if (n <= 0) throw Error(ErrorCode::InvalidSpec, "uniform_int needs n > 0");
  // modulo rejection keeps the draw unbiased
  uint64_t limit = ~uint64_t(0) - (~uint64_t(0) % uint64_t(n));
  uint64_t v = next_u64();
  while (v >= limit) v = next_u64();
  return int(v % uint64_t(n));
}

double Rng::normal() {
  if (has_spare_) {
    has_spare_ = false;
    return spare_normal_;
  }
  double u1 = uniform();
  while (u1 <= 0.0) u1 = uniform();
  double u2 = uniform();
  double r = std::sqrt(-2.0 * std::log(u1));
  double a = 2.0 * M_PI * u2;
  spare_normal_ = r * std::sin(a);
  has_spare_ = true;
  return r * std::cos(a);
}

double Rng::normal(double mean, double sigma) { return mean + sigma * normal(); }

Rng Rng::fork(uint64_t stream) const {
  return Rng(splitmix64(base_seed_ ^ splitmix64(stream + 1)));
}

std::vector<int> Rng::permutation(int n) {
  std::vector<int> idx(n);
  for (int i = 0; i < n; ++i) idx[i] = i;
  for (int i = n - 1; i > 0; --i) {
    int j = uniform_int(i + 1);
    std::swap(idx[i], idx[j]);
  }
  return idx;
}

std::vector<uint8_t> read_file(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw Error(ErrorCode::IoError, "cannot open " + path.string());
  in.seekg(0, std::ios::end);
  std::streamoff size = in.tellg();
  in.seekg(0, std::ios::beg);
  std::vector<uint8_t> bytes(static_cast<size_t>(size));
  if (size > 0) in.read(reinterpret_cast<char*>(bytes.data()), size);
  if (!in) throw Error(ErrorCode::IoError, "short read on " + path.string());
  return bytes;
}

void write_file_atomic(const std::filesystem::path& path, std::span<const uint8_t> bytes) {
  std::filesystem::path tmp = path;
  tmp += ".tmp";
  {
    std::ofstream out(tmp, std::ios::binary | std::ios::trunc);
    if (!out) throw Error(ErrorCode::IoError, "cannot open " + tmp.string());
    out.write(reinterpret_cast<const char*>(bytes.data()),
              std::streamsize(bytes.size()));
    if (!out) throw Error(ErrorCode::IoError, "short write on " + tmp.string());
  }
  std::error_code ec;
  std::filesystem::rename(tmp, path, ec);
  if (ec) throw Error(ErrorCode::IoError, "rename failed for " + path.string());
}

void write_text_atomic(const std::filesystem::path& path, const std::string& text) {
  write_file_atomic(path, std::span<const uint8_t>(
                              reinterpret_cast<const uint8_t*>(text.data()), text.size()));
}

void write_pgm(const std::filesystem::path& path, int rows, int cols,
               std::span<const uint8_t> pixels) {
  if (int64_t(rows) * cols != int64_t(pixels.size()))
    throw Error(ErrorCode::ShapeMismatch, "pgm pixel count does not match dims");
  std::string header = "P5\n" + std::to_string(cols) + " " + std::to_string(rows) + "\n255\n";
  std::vector<uint8_t> bytes(header.begin(), header.end());
  bytes.insert(bytes.end(), pixels.begin(), pixels.end());
  write_file_atomic(path, bytes);
}

PgmImage read_pgm(const std::filesystem::path& path) {
  std::vector<uint8_t> bytes = read_file(path);
  // header is three whitespace-separated fields after the magic
  size_t pos = 0;
  auto next_token = [&]() -> std::string {
    while (pos < bytes.size() && std::isspace(bytes[pos])) ++pos;
    if (pos < bytes.size() && bytes[pos] == '#') {
      while (pos < bytes.size() && bytes[pos] != '\n') ++pos;
      while (pos < bytes.size() && std::isspace(bytes[pos])) ++pos;
    }
    size_t start = pos;
    while (pos < bytes.size() && !std::isspace(bytes[pos])) ++pos;
    return std::string(bytes.begin() + std::ptrdiff_t(start), bytes.begin() + std::ptrdiff_t(pos));
  };
  if (next_token() != "P5") throw Error(ErrorCode::BadMagic, "not a P5 pgm: " + path.string());
  PgmImage img;
  img.cols = int(parse_double(next_token(), ErrorCode::CorruptEntry));
  img.rows = int(parse_double(next_token(), ErrorCode::CorruptEntry));
  int maxval = int(parse_double(next_token(), ErrorCode::CorruptEntry));
  if (maxval != 255) throw Error(ErrorCode::CorruptEntry, "pgm maxval must be 255");
  ++pos;  // single whitespace byte after maxval
  size_t count = size_t(img.rows) * size_t(img.cols);
  if (bytes.size() - pos < count)
    throw Error(ErrorCode::CorruptEntry, "pgm pixel data truncated");
  img.pixels.assign(bytes.begin() + std::ptrdiff_t(pos),
                    bytes.begin() + std::ptrdiff_t(pos + count));
  return img;
}

std::vector<std::string> split(const std::string& line, char sep) {
  std::vector<std::string> out;
  size_t start = 0;
  while (true) {
    size_t end = line.find(sep, start);
    if (end == std::string::npos) {
      out.push_back(line.substr(start));
      break;
    }
    out.push_back(line.substr(start, end - start));
    start = end + 1;
  }
  return out;
}

std::string trim(const std::string& s) {
  size_t a = 0, b = s.size();
  while (a < b && (std::isspace(uint8_t(s[a])) || s[a] == '\0')) ++a;
  while (b > a && (std::isspace(uint8_t(s[b - 1])) || s[b - 1] == '\0')) --b;
  return s.substr(a, b - a);
}

double parse_double(const std::string& s, ErrorCode on_error) {
  std::string t = trim(s);
  if (t.empty()) throw Error(on_error, "empty numeric field");
  char* end = nullptr;
  double v = std::strtod(t.c_str(), &end);
  if (end != t.c_str() + t.size())
    throw Error(on_error, "malformed numeric field '" + t + "'");
  return v;
}

std::string format_double(double v) {
  char buf[64];
  std::snprintf(buf, sizeof(buf), "%.10g", v);
  return buf;
}

}  // namespace bc
