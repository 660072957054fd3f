#pragma once

#include <cstdint>
#include <memory>
#include <string>
#include <vector>

#include "common.hpp"
#include "tensor.hpp"

namespace bc {

// A named weight array owned by a model. Batch-norm running statistics are
// kept as non-trainable entries so checkpoints capture the full inference
// state, not just the learned weights.
struct ParamEntry {
  std::string name;
  Shape shape;
  std::vector<float> value;
  bool trainable = true;
};

struct ParamStore {
  std::vector<ParamEntry> entries;

  size_t add(std::string name, Shape shape, bool trainable = true);
  size_t trainable_count() const;
};

// Result of one forward pass. bound[i] is the graph leaf created for store
// entry i, or nullptr when the entry was only read directly (running
// statistics). The training loop pulls gradients off these leaves after
// backward and applies Adam to the store values by index.
struct Forward {
  Node<float>* out = nullptr;
  std::vector<Node<float>*> bound;
};

class Model {
 public:
  virtual ~Model() = default;

  // Checkpoint kind tag; see kKind* below.
  virtual uint32_t kind() const = 0;
  // Expected square input edge for the regressors; 0 means any size that the
  // architecture can pool (the U-Net is fully convolutional).
  virtual uint32_t input_size() const = 0;
  // x is [N,1,H,W] holding windowed intensities in [0,255]; the model applies
  // its recorded input scaling itself.
  virtual Forward run(Graph<float>& g, Node<float>* x, bool training) = 0;

  size_t param_count() const { return params.trainable_count(); }

  ParamStore params;
  float input_scale = 1.0f / 255.0f;

 private:
  friend void save_checkpoint(const Model& model, const std::filesystem::path& path);
  virtual void append_spec(std::vector<uint8_t>& out) const = 0;
};

struct DenseNetSpec {
  uint32_t b = 12;             // layers per dense block
  uint32_t k = 12;             // growth rate
  uint32_t stem_features = 0;  // 0 selects the default of 2k
  uint32_t blocks = 3;
  uint32_t input_size = 256;
  float compression = 0.5f;
  float input_scale = 1.0f / 255.0f;
};

struct ResNeXtSpec {
  uint32_t f = 32;  // initial feature width; stage widths are f, 2f, 4f, ...
  uint32_t C = 32;  // cardinality of the grouped 3x3 convolutions
  uint32_t blocks_per_stage = 2;
  uint32_t stages = 3;
  uint32_t input_size = 256;
  float input_scale = 1.0f / 255.0f;
};

struct UNetSpec {
  uint32_t d = 5;           // downsampling/upsampling module count
  uint32_t l = 1;           // convolutions per module
  uint32_t f = 16;          // features at the first encoder level
  uint32_t classes = 4;
  bool transposed = false;  // learned transposed-conv upsampling instead of
                            // nearest-neighbour + conv
  float input_scale = 1.0f / 255.0f;
};

constexpr uint32_t kKindDenseNet = 1;
constexpr uint32_t kKindResNeXt = 2;
constexpr uint32_t kKindUNet = 3;

// Builders validate their spec (InvalidSpec) and initialize weights
// He-uniform from the given seed, so equal (spec, seed) pairs produce
// bitwise-identical models.
std::unique_ptr<Model> build_densenet_regressor(const DenseNetSpec& spec, uint64_t seed);
std::unique_ptr<Model> build_resnext_regressor(const ResNeXtSpec& spec, uint64_t seed);
std::unique_ptr<Model> build_unet(const UNetSpec& spec, uint64_t seed);

// Checkpoint file: "BCMP", format version, kind tag, spec fields, then
// count-prefixed named float32 entries including running statistics.
void save_checkpoint(const Model& model, const std::filesystem::path& path);
// Errors: BadMagic, VersionMismatch, CorruptEntry.
std::unique_ptr<Model> load_checkpoint(const std::filesystem::path& path);

}  // namespace bc
