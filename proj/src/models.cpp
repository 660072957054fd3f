#include "models.hpp"

#include <algorithm>
#include <bit>
#include <cmath>
#include <cstring>
#include <utility>

// The checkpoint format stores raw little-endian float32 blocks with memcpy.
static_assert(std::endian::native == std::endian::little,
              "checkpoint and DICOM writers assume a little-endian host");

namespace bc {

size_t ParamStore::add(std::string name, Shape shape, bool trainable) {
  ParamEntry e;
  e.name = std::move(name);
  e.value.assign(size_t(numel(shape)), 0.0f);
  e.shape = std::move(shape);
  e.trainable = trainable;
  entries.push_back(std::move(e));
  return entries.size() - 1;
}

size_t ParamStore::trainable_count() const {
  size_t n = 0;
  for (const ParamEntry& e : entries)
    if (e.trainable) n += e.value.size();
  return n;
}

namespace {

constexpr uint32_t kFormatVersion = 1;
constexpr size_t kNone = size_t(-1);

[[noreturn]] void invalid(const std::string& message) {
  throw Error(ErrorCode::InvalidSpec, message);
}

// Layer descriptors hold indices into the owning model's ParamStore. Graph
// nodes are created fresh on every forward pass by Bound below.
struct ConvL {
  size_t w = kNone;
  size_t b = kNone;
  Conv2dOpts opts;
};

struct BnL {
  size_t gamma = kNone;
  size_t beta = kNone;
  size_t rmean = kNone;
  size_t rvar = kNone;
};

struct DenseL {
  size_t w = kNone;
  size_t b = kNone;
};

struct ConvBn {
  ConvL conv;
  BnL bn;
};

struct UNetModule {
  std::vector<ConvBn> convs;
};

void fill_he_uniform(std::vector<float>& v, int64_t fan_in, Rng& rng) {
  const double limit = std::sqrt(6.0 / double(fan_in));
  for (float& x : v) x = float(rng.uniform(-limit, limit));
}

ConvL make_conv(ParamStore& ps, Rng& rng, const std::string& name, int in,
                int out, int k, int stride, int pad, int groups, bool bias) {
  ConvL c;
  c.opts.stride = stride;
  c.opts.pad = pad;
  c.opts.groups = groups;
  c.w = ps.add(name + ".w", {out, in / groups, k, k});
  fill_he_uniform(ps.entries[c.w].value, int64_t(in / groups) * k * k, rng);
  if (bias) c.b = ps.add(name + ".b", {out});
  return c;
}

BnL make_bn(ParamStore& ps, const std::string& name, int c) {
  BnL bn;
  bn.gamma = ps.add(name + ".gamma", {c});
  auto& gamma = ps.entries[bn.gamma].value;
  std::fill(gamma.begin(), gamma.end(), 1.0f);
  bn.beta = ps.add(name + ".beta", {c});
  bn.rmean = ps.add(name + ".running_mean", {c}, false);
  bn.rvar = ps.add(name + ".running_var", {c}, false);
  auto& rvar = ps.entries[bn.rvar].value;
  std::fill(rvar.begin(), rvar.end(), 1.0f);
  return bn;
}

// Convolutions feeding a batch norm carry no bias; the norm would cancel it.
ConvBn make_conv_bn(ParamStore& ps, Rng& rng, const std::string& name, int in,
                    int out, int k, int stride, int pad, int groups) {
  ConvBn l;
  l.conv = make_conv(ps, rng, name, in, out, k, stride, pad, groups, false);
  l.bn = make_bn(ps, name, out);
  return l;
}

DenseL make_dense(ParamStore& ps, Rng& rng, const std::string& name, int in, int out) {
  DenseL d;
  d.w = ps.add(name + ".w", {in, out});
  fill_he_uniform(ps.entries[d.w].value, in, rng);
  d.b = ps.add(name + ".b", {out});
  return d;
}

UNetModule make_module(ParamStore& ps, Rng& rng, const std::string& name,
                       int in, int out, uint32_t l) {
  UNetModule m;
  for (uint32_t i = 0; i < l; ++i) {
    m.convs.push_back(make_conv_bn(ps, rng, name + ".conv" + std::to_string(i),
                                   i == 0 ? in : out, out, 3, 1, 1, 1));
  }
  return m;
}

// Binds store entries to graph leaves for one forward pass, one leaf per
// entry no matter how often it is used. Running statistics bypass the graph;
// batch_norm mutates them in the store directly.
struct Bound {
  Graph<float>& g;
  ParamStore& store;
  std::vector<Node<float>*> nodes;

  Bound(Graph<float>& graph, ParamStore& s)
      : g(graph), store(s), nodes(s.entries.size(), nullptr) {}

  Node<float>* leaf(size_t idx) {
    Node<float>*& n = nodes[idx];
    if (!n) {
      ParamEntry& e = store.entries[idx];
      n = g.leaf(e.shape, e.value, e.trainable);
    }
    return n;
  }

  Node<float>* maybe_leaf(size_t idx) {
    return idx == kNone ? nullptr : leaf(idx);
  }

  Node<float>* conv(const ConvL& c, Node<float>* x) {
    return conv2d(g, x, leaf(c.w), maybe_leaf(c.b), c.opts);
  }

  Node<float>* bn(const BnL& l, Node<float>* x, bool training) {
    return batch_norm(g, x, leaf(l.gamma), leaf(l.beta),
                      &store.entries[l.rmean].value,
                      &store.entries[l.rvar].value, training);
  }

  Node<float>* conv_bn_relu(const ConvBn& l, Node<float>* x, bool training) {
    return relu(g, bn(l.bn, conv(l.conv, x), training));
  }

  Node<float>* module(const UNetModule& m, Node<float>* x, bool training) {
    for (const ConvBn& c : m.convs) x = conv_bn_relu(c, x, training);
    return x;
  }

  Node<float>* linear(const DenseL& l, Node<float>* x) {
    return dense(g, x, leaf(l.w), maybe_leaf(l.b));
  }
};

void put_u32(std::vector<uint8_t>& out, uint32_t v) {
  out.push_back(uint8_t(v));
  out.push_back(uint8_t(v >> 8));
  out.push_back(uint8_t(v >> 16));
  out.push_back(uint8_t(v >> 24));
}

void put_f32(std::vector<uint8_t>& out, float v) {
  uint32_t bits;
  std::memcpy(&bits, &v, 4);
  put_u32(out, bits);
}

void check_scale(float input_scale) {
  if (!(input_scale > 0.0f) || !(input_scale <= 1.0e6f))
    invalid("input_scale must be a positive finite factor");
}

class DenseNetModel final : public Model {
 public:
  DenseNetModel(const DenseNetSpec& spec, uint64_t seed) : spec_(spec) {
    if (spec_.b < 1 || spec_.k < 1 || spec_.blocks < 1)
      invalid("dense net needs b, k and block count >= 1");
    if (spec_.b > 512 || spec_.k > 1024 || spec_.blocks > 16 || spec_.stem_features > 4096)
      invalid("dense net spec out of supported range");
    if (!(spec_.compression > 0.0f) || spec_.compression > 1.0f)
      invalid("compression must be in (0, 1]");
    if (spec_.input_size < 32 || spec_.input_size > 4096)
      invalid("regressor input size must be within [32, 4096]");
    check_scale(spec_.input_scale);
    if (spec_.stem_features == 0) spec_.stem_features = 2 * spec_.k;
    input_scale = spec_.input_scale;

    Rng rng(seed);
    int c = int(spec_.stem_features);
    stem_ = make_conv_bn(params, rng, "stem", 1, c, 7, 2, 3, 1);
    for (uint32_t bi = 0; bi < spec_.blocks; ++bi) {
      std::vector<ConvBn> layers;
      for (uint32_t li = 0; li < spec_.b; ++li) {
        const std::string name =
            "block" + std::to_string(bi) + ".layer" + std::to_string(li);
        layers.push_back(make_conv_bn(params, rng, name, c, int(spec_.k), 3, 1, 1, 1));
        c += int(spec_.k);
      }
      blocks_.push_back(std::move(layers));
      if (bi + 1 < spec_.blocks) {
        const int out = std::max(1, int(double(c) * double(spec_.compression)));
        transitions_.push_back(
            make_conv_bn(params, rng, "trans" + std::to_string(bi), c, out, 1, 1, 0, 1));
        c = out;
      }
    }
    head_ = make_dense(params, rng, "head", c, 1);
  }

  uint32_t kind() const override { return kKindDenseNet; }
  uint32_t input_size() const override { return spec_.input_size; }

  Forward run(Graph<float>& g, Node<float>* x, bool training) override {
    Bound bd(g, params);
    Node<float>* h = scale(g, x, input_scale);
    h = bd.conv_bn_relu(stem_, h, training);
    h = max_pool(g, h, {3, 2, 1});
    for (size_t bi = 0; bi < blocks_.size(); ++bi) {
      for (const ConvBn& layer : blocks_[bi]) {
        Node<float>* y = bd.conv_bn_relu(layer, h, training);
        h = concat(g, {h, y}, 1);
      }
      if (bi < transitions_.size()) {
        h = bd.conv_bn_relu(transitions_[bi], h, training);
        h = avg_pool(g, h, {2, 2, 0});
      }
    }
    h = global_avg_pool(g, h);
    h = reshape(g, h, {h->shape[0], h->shape[1]});
    h = sigmoid(g, bd.linear(head_, h));
    return {h, std::move(bd.nodes)};
  }

 private:
  void append_spec(std::vector<uint8_t>& out) const override {
    put_u32(out, spec_.b);
    put_u32(out, spec_.k);
    put_u32(out, spec_.stem_features);
    put_u32(out, spec_.blocks);
    put_u32(out, spec_.input_size);
    put_f32(out, spec_.compression);
    put_f32(out, spec_.input_scale);
  }

  DenseNetSpec spec_;
  ConvBn stem_;
  std::vector<std::vector<ConvBn>> blocks_;
  std::vector<ConvBn> transitions_;
  DenseL head_;
};

struct ResBlock {
  ConvBn reduce;
  ConvBn grouped;
  ConvBn expand;
  ConvBn proj;
  bool has_proj = false;
};

class ResNeXtModel final : public Model {
 public:
  ResNeXtModel(const ResNeXtSpec& spec, uint64_t seed) : spec_(spec) {
    if (spec_.f < 1 || spec_.C < 1 || spec_.stages < 1 || spec_.blocks_per_stage < 1)
      invalid("resnext needs f, C, stages and blocks per stage >= 1");
    if (spec_.f > 4096 || spec_.C > 1024 || spec_.stages > 8 || spec_.blocks_per_stage > 64)
      invalid("resnext spec out of supported range");
    if (spec_.f % spec_.C != 0)
      invalid("feature width f must be divisible by cardinality C");
    if (spec_.input_size < 32 || spec_.input_size > 4096)
      invalid("regressor input size must be within [32, 4096]");
    check_scale(spec_.input_scale);
    input_scale = spec_.input_scale;

    Rng rng(seed);
    stem_ = make_conv_bn(params, rng, "stem", 1, int(spec_.f), 7, 2, 3, 1);
    int in = int(spec_.f);
    for (uint32_t s = 0; s < spec_.stages; ++s) {
      const int w = int(spec_.f) << s;
      std::vector<ResBlock> blocks;
      for (uint32_t b = 0; b < spec_.blocks_per_stage; ++b) {
        const std::string name =
            "stage" + std::to_string(s) + ".block" + std::to_string(b);
        const int stride = b == 0 ? 2 : 1;
        ResBlock blk;
        blk.reduce = make_conv_bn(params, rng, name + ".reduce", in, w, 1, 1, 0, 1);
        blk.grouped =
            make_conv_bn(params, rng, name + ".grouped", w, w, 3, stride, 1, int(spec_.C));
        blk.expand = make_conv_bn(params, rng, name + ".expand", w, w, 1, 1, 0, 1);
        blk.has_proj = stride != 1 || in != w;
        if (blk.has_proj)
          blk.proj = make_conv_bn(params, rng, name + ".proj", in, w, 1, stride, 0, 1);
        blocks.push_back(blk);
        in = w;
      }
      stages_.push_back(std::move(blocks));
    }
    head_ = make_dense(params, rng, "head", in, 1);
  }

  uint32_t kind() const override { return kKindResNeXt; }
  uint32_t input_size() const override { return spec_.input_size; }

  Forward run(Graph<float>& g, Node<float>* x, bool training) override {
    Bound bd(g, params);
    Node<float>* h = scale(g, x, input_scale);
    h = bd.conv_bn_relu(stem_, h, training);
    h = max_pool(g, h, {3, 2, 1});
    for (const std::vector<ResBlock>& blocks : stages_) {
      for (const ResBlock& blk : blocks) {
        Node<float>* y = bd.conv_bn_relu(blk.reduce, h, training);
        y = bd.conv_bn_relu(blk.grouped, y, training);
        y = bd.bn(blk.expand.bn, bd.conv(blk.expand.conv, y), training);
        Node<float>* shortcut =
            blk.has_proj ? bd.bn(blk.proj.bn, bd.conv(blk.proj.conv, h), training) : h;
        h = relu(g, add(g, y, shortcut));
      }
    }
    h = global_avg_pool(g, h);
    h = reshape(g, h, {h->shape[0], h->shape[1]});
    h = sigmoid(g, bd.linear(head_, h));
    return {h, std::move(bd.nodes)};
  }

 private:
  void append_spec(std::vector<uint8_t>& out) const override {
    put_u32(out, spec_.f);
    put_u32(out, spec_.C);
    put_u32(out, spec_.blocks_per_stage);
    put_u32(out, spec_.stages);
    put_u32(out, spec_.input_size);
    put_f32(out, spec_.input_scale);
  }

  ResNeXtSpec spec_;
  ConvBn stem_;
  std::vector<std::vector<ResBlock>> stages_;
  DenseL head_;
};

struct DecStage {
  ConvL up_conv;
  BnL up_bn;
  UNetModule convs;
};

class UNetModel final : public Model {
 public:
  UNetModel(const UNetSpec& spec, uint64_t seed) : spec_(spec) {
    if (spec_.d < 2) invalid("u-net needs at least 2 resolution levels");
    if (spec_.l < 1 || spec_.f < 1) invalid("u-net needs l and f >= 1");
    if (spec_.d > 10 || spec_.l > 16 || spec_.f > 1024)
      invalid("u-net spec out of supported range");
    if (spec_.classes < 2 || spec_.classes > 64)
      invalid("segmentation needs between 2 and 64 classes");
    check_scale(spec_.input_scale);
    input_scale = spec_.input_scale;

    Rng rng(seed);
    int in = 1;
    for (uint32_t i = 0; i < spec_.d; ++i) {
      const int c = int(spec_.f) << i;
      enc_.push_back(make_module(params, rng, "enc" + std::to_string(i), in, c, spec_.l));
      in = c;
    }
    mid_ = make_module(params, rng, "mid", in, int(spec_.f) << spec_.d, spec_.l);
    for (int i = int(spec_.d) - 1; i >= 0; --i) {
      const int c = int(spec_.f) << i;
      const std::string name = "dec" + std::to_string(i);
      DecStage st;
      if (spec_.transposed) {
        st.up_conv.w = params.add(name + ".up.w", {2 * c, c, 2, 2});
        fill_he_uniform(params.entries[st.up_conv.w].value, int64_t(2 * c) * 4, rng);
      } else {
        st.up_conv = make_conv(params, rng, name + ".up", 2 * c, c, 3, 1, 1, 1, false);
      }
      st.up_bn = make_bn(params, name + ".up", c);
      st.convs = make_module(params, rng, name, 2 * c, c, spec_.l);
      dec_.push_back(std::move(st));
    }
    final_ = make_conv(params, rng, "final", int(spec_.f), int(spec_.classes), 1, 1, 0, 1, true);
  }

  uint32_t kind() const override { return kKindUNet; }
  uint32_t input_size() const override { return 0; }

  Forward run(Graph<float>& g, Node<float>* x, bool training) override {
    if (x->shape.size() != 4 || x->shape[1] != 1)
      throw Error(ErrorCode::ShapeMismatch, "segmenter input must be [N,1,H,W]");
    const int div = 1 << spec_.d;
    if (x->shape[2] % div != 0 || x->shape[3] % div != 0)
      throw Error(ErrorCode::ShapeMismatch,
                  "input spatial dims must be divisible by " + std::to_string(div));
    Bound bd(g, params);
    Node<float>* h = scale(g, x, input_scale);
    std::vector<Node<float>*> skips;
    for (const UNetModule& m : enc_) {
      h = bd.module(m, h, training);
      skips.push_back(h);
      h = max_pool(g, h, {2, 2, 0});
    }
    h = bd.module(mid_, h, training);
    for (size_t si = 0; si < dec_.size(); ++si) {
      const DecStage& st = dec_[si];
      if (spec_.transposed) {
        h = transposed_conv2d(g, h, bd.leaf(st.up_conv.w),
                              static_cast<Node<float>*>(nullptr), 2);
      } else {
        h = upsample2x(g, h);
        h = bd.conv(st.up_conv, h);
      }
      h = relu(g, bd.bn(st.up_bn, h, training));
      h = concat(g, {skips[skips.size() - 1 - si], h}, 1);
      h = bd.module(st.convs, h, training);
    }
    h = bd.conv(final_, h);
    h = softmax(g, h, 1);
    return {h, std::move(bd.nodes)};
  }

 private:
  void append_spec(std::vector<uint8_t>& out) const override {
    put_u32(out, spec_.d);
    put_u32(out, spec_.l);
    put_u32(out, spec_.f);
    put_u32(out, spec_.classes);
    put_u32(out, spec_.transposed ? 1 : 0);
    put_f32(out, spec_.input_scale);
  }

  UNetSpec spec_;
  std::vector<UNetModule> enc_;
  UNetModule mid_;
  std::vector<DecStage> dec_;
  ConvL final_;
};

struct ByteReader {
  const std::vector<uint8_t>& buf;
  size_t pos = 0;

  void need(size_t n) const {
    if (buf.size() - pos < n)
      throw Error(ErrorCode::CorruptEntry, "checkpoint truncated");
  }
  uint32_t u32() {
    need(4);
    uint32_t v = uint32_t(buf[pos]) | uint32_t(buf[pos + 1]) << 8 |
                 uint32_t(buf[pos + 2]) << 16 | uint32_t(buf[pos + 3]) << 24;
    pos += 4;
    return v;
  }
  float f32() {
    const uint32_t bits = u32();
    float v;
    std::memcpy(&v, &bits, 4);
    return v;
  }
  std::string str(size_t n) {
    need(n);
    std::string s(reinterpret_cast<const char*>(buf.data() + pos), n);
    pos += n;
    return s;
  }
  void floats(float* dst, size_t n) {
    need(n * 4);
    std::memcpy(dst, buf.data() + pos, n * 4);
    pos += n * 4;
  }
};

}  // namespace

std::unique_ptr<Model> build_densenet_regressor(const DenseNetSpec& spec, uint64_t seed) {
  return std::make_unique<DenseNetModel>(spec, seed);
}

std::unique_ptr<Model> build_resnext_regressor(const ResNeXtSpec& spec, uint64_t seed) {
  return std::make_unique<ResNeXtModel>(spec, seed);
}

std::unique_ptr<Model> build_unet(const UNetSpec& spec, uint64_t seed) {
  return std::make_unique<UNetModel>(spec, seed);
}

void save_checkpoint(const Model& model, const std::filesystem::path& path) {
  std::vector<uint8_t> out;
  const char magic[4] = {'B', 'C', 'M', 'P'};
  out.insert(out.end(), magic, magic + 4);
  put_u32(out, kFormatVersion);
  put_u32(out, model.kind());
  model.append_spec(out);
  put_u32(out, uint32_t(model.params.entries.size()));
  for (const ParamEntry& e : model.params.entries) {
    put_u32(out, uint32_t(e.name.size()));
    out.insert(out.end(), e.name.begin(), e.name.end());
    put_u32(out, uint32_t(e.shape.size()));
    for (int d : e.shape) put_u32(out, uint32_t(d));
    const size_t at = out.size();
    out.resize(at + e.value.size() * 4);
    std::memcpy(out.data() + at, e.value.data(), e.value.size() * 4);
  }
  write_file_atomic(path, out);
}

std::unique_ptr<Model> load_checkpoint(const std::filesystem::path& path) {
  const std::vector<uint8_t> bytes = read_file(path);
  if (bytes.size() < 4 || std::memcmp(bytes.data(), "BCMP", 4) != 0)
    throw Error(ErrorCode::BadMagic, "not a model checkpoint: " + path.string());
  ByteReader r{bytes, 4};
  const uint32_t version = r.u32();
  if (version != kFormatVersion)
    throw Error(ErrorCode::VersionMismatch,
                "checkpoint format version " + std::to_string(version) +
                    ", expected " + std::to_string(kFormatVersion));
  const uint32_t kind = r.u32();
  std::unique_ptr<Model> model;
  try {
    if (kind == kKindDenseNet) {
      DenseNetSpec s;
      s.b = r.u32();
      s.k = r.u32();
      s.stem_features = r.u32();
      s.blocks = r.u32();
      s.input_size = r.u32();
      s.compression = r.f32();
      s.input_scale = r.f32();
      model = build_densenet_regressor(s, 0);
    } else if (kind == kKindResNeXt) {
      ResNeXtSpec s;
      s.f = r.u32();
      s.C = r.u32();
      s.blocks_per_stage = r.u32();
      s.stages = r.u32();
      s.input_size = r.u32();
      s.input_scale = r.f32();
      model = build_resnext_regressor(s, 0);
    } else if (kind == kKindUNet) {
      UNetSpec s;
      s.d = r.u32();
      s.l = r.u32();
      s.f = r.u32();
      s.classes = r.u32();
      s.transposed = r.u32() != 0;
      s.input_scale = r.f32();
      model = build_unet(s, 0);
    } else {
      throw Error(ErrorCode::CorruptEntry, "unknown model kind tag " + std::to_string(kind));
    }
  } catch (const Error& e) {
    if (e.code() == ErrorCode::InvalidSpec)
      throw Error(ErrorCode::CorruptEntry, std::string("checkpoint spec rejected: ") + e.what());
    throw;
  }
  const uint32_t count = r.u32();
  if (count != model->params.entries.size())
    throw Error(ErrorCode::CorruptEntry,
                "checkpoint holds " + std::to_string(count) + " entries, model needs " +
                    std::to_string(model->params.entries.size()));
  for (ParamEntry& e : model->params.entries) {
    const std::string name = r.str(r.u32());
    if (name != e.name)
      throw Error(ErrorCode::CorruptEntry, "unexpected entry " + name + ", wanted " + e.name);
    const uint32_t dims = r.u32();
    if (dims != e.shape.size())
      throw Error(ErrorCode::CorruptEntry, "rank mismatch for entry " + name);
    for (int d : e.shape)
      if (r.u32() != uint32_t(d))
        throw Error(ErrorCode::CorruptEntry, "shape mismatch for entry " + name);
    r.floats(e.value.data(), e.value.size());
  }
  if (r.pos != bytes.size())
    throw Error(ErrorCode::CorruptEntry, "trailing bytes after the last entry");
  return model;
}

}  // namespace bc
