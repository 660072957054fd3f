#pragma once

#include <cstdint>
#include <functional>
#include <memory>
#include <span>
#include <string>
#include <vector>

#include "common.hpp"

namespace bc {

using Shape = std::vector<int>;

int64_t numel(const Shape& shape);
std::string shape_str(const Shape& shape);

template <typename T>
class Graph;

// One tape entry. The value is materialized eagerly when the op is recorded;
// the gradient buffer stays empty until backward actually reaches the node,
// which doubles as the "was this tensor connected to the loss" flag.
template <typename T>
struct Node {
  Shape shape;
  std::vector<T> value;
  std::vector<T> grad;
  bool requires_grad = false;
  bool is_leaf = true;
  const char* op = "leaf";
  std::function<void(Graph<T>&, Node<T>&)> backward_fn;

  int64_t size() const { return numel(shape); }
  bool grad_touched() const { return !grad.empty(); }
};

struct Conv2dOpts {
  int stride = 1;
  int pad = 0;
  int groups = 1;
};

struct Pool2dOpts {
  int kernel = 2;
  int stride = 2;
  int pad = 0;
};

// Records ops into a tape. Creation order is a topological order of the data
// flow, so backward is a single reverse sweep that visits every node once.
template <typename T>
class Graph {
 public:
  Node<T>* leaf(Shape shape, std::vector<T> value, bool requires_grad = false);
  Node<T>* leaf(Shape shape, std::span<const T> value, bool requires_grad = false);

  // Seeds d(loss)/d(loss) = 1 and replays the tape in reverse. The loss must
  // be scalar. Gradients accumulate into Node::grad; nodes the loss does not
  // depend on keep an empty grad buffer.
  void backward(Node<T>* loss);

  size_t node_count() const { return nodes_.size(); }
  size_t last_backward_visits() const { return visits_; }

  // internal: used by op implementations
  Node<T>* make(Shape shape, const char* op);
  std::vector<T>& grad_of(Node<T>* node);
  // Skip gradient work for inputs that cannot need it (constant leaves).
  static bool wants_grad(const Node<T>* node) {
    return !(node->is_leaf && !node->requires_grad);
  }

 private:
  std::vector<std::unique_ptr<Node<T>>> nodes_;
  size_t visits_ = 0;
};

// Convolution over NCHW input with OIHW weights [F, C/groups, kh, kw].
// Output spatial size floor((H + 2*pad - kh)/stride) + 1. bias may be null.
template <typename T>
Node<T>* conv2d(Graph<T>& g, Node<T>* x, Node<T>* w, Node<T>* bias,
                const Conv2dOpts& opts = {});

// Transposed convolution with weights [Cin, Cout, kh, kw]; output spatial
// size (H-1)*stride + kh. Used for the learned 2x upsampling variant.
template <typename T>
Node<T>* transposed_conv2d(Graph<T>& g, Node<T>* x, Node<T>* w, Node<T>* bias,
                           int stride = 2);

// Per-channel batch normalization over NCHW. In training mode the batch mean
// and biased variance are used and the running buffers (owned by the caller)
// are updated in place as r = momentum * r + (1 - momentum) * batch.
template <typename T>
Node<T>* batch_norm(Graph<T>& g, Node<T>* x, Node<T>* gamma, Node<T>* beta,
                    std::vector<T>* running_mean, std::vector<T>* running_var,
                    bool training, T momentum = T(0.9), T eps = T(1e-5));

template <typename T> Node<T>* relu(Graph<T>& g, Node<T>* x);
template <typename T> Node<T>* sigmoid(Graph<T>& g, Node<T>* x);
// Numerically stable softmax along one axis.
template <typename T> Node<T>* softmax(Graph<T>& g, Node<T>* x, int axis);

// Max pooling pads with -inf; average pooling does not support padding.
template <typename T> Node<T>* max_pool(Graph<T>& g, Node<T>* x, const Pool2dOpts& opts = {});
template <typename T> Node<T>* avg_pool(Graph<T>& g, Node<T>* x, const Pool2dOpts& opts = {});
template <typename T> Node<T>* global_avg_pool(Graph<T>& g, Node<T>* x);

// y = x * w + b with x [N, D], w [D, K], b [K] (bias may be null).
template <typename T> Node<T>* dense(Graph<T>& g, Node<T>* x, Node<T>* w, Node<T>* bias);

template <typename T> Node<T>* concat(Graph<T>& g, const std::vector<Node<T>*>& xs, int axis);
// Nearest-neighbour 2x spatial upsampling.
template <typename T> Node<T>* upsample2x(Graph<T>& g, Node<T>* x);
template <typename T> Node<T>* reshape(Graph<T>& g, Node<T>* x, Shape shape);
template <typename T> Node<T>* add(Graph<T>& g, Node<T>* a, Node<T>* b);
template <typename T> Node<T>* mul(Graph<T>& g, Node<T>* a, Node<T>* b);
template <typename T> Node<T>* scale(Graph<T>& g, Node<T>* x, T factor);
template <typename T> Node<T>* sum(Graph<T>& g, Node<T>* x);

// Mean absolute error; the subgradient at zero difference is taken as 0.
template <typename T> Node<T>* mae_loss(Graph<T>& g, Node<T>* pred, Node<T>* target);

// Soft Dice loss over foreground channels of [N, C, H, W] probabilities
// against a one-hot target of the same shape. Channel 0 (background) is
// excluded; intersections and sums are taken over the whole batch, so a
// perfect prediction gives exactly -(C - 1).
template <typename T>
Node<T>* soft_dice_loss(Graph<T>& g, Node<T>* probs, Node<T>* onehot, T eps = T(1));

// Adam with bias correction. State buffers are lazily sized on first use.
template <typename T>
struct AdamState {
  std::vector<T> m, v;
  int64_t t = 0;
  T beta1 = T(0.9);
  T beta2 = T(0.999);
  T eps = T(1e-8);
};

template <typename T>
void adam_step(std::span<T> param, std::span<const T> grad, AdamState<T>& state, T lr);

void set_blas_threads(int n);

}  // namespace bc
