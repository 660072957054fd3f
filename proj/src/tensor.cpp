#include "tensor.hpp"

#include <cblas.h>

#include <algorithm>
#include <cmath>
#include <cstring>

extern "C" void openblas_set_num_threads(int);

namespace bc {

int64_t numel(const Shape& shape) {
  int64_t n = 1;
  for (int d : shape) n *= d;
  return n;
}

std::string shape_str(const Shape& shape) {
  std::string s = "[";
  for (size_t i = 0; i < shape.size(); ++i) {
    if (i) s += ",";
    s += std::to_string(shape[i]);
  }
  return s + "]";
}

void set_blas_threads(int n) { openblas_set_num_threads(n > 0 ? n : 1); }

namespace {

void check(bool ok, ErrorCode code, const std::string& msg) {
  if (!ok) throw Error(code, msg);
}

void check_shape(bool ok, const std::string& msg) {
  check(ok, ErrorCode::ShapeMismatch, msg);
}

inline void gemm(bool ta, bool tb, int m, int n, int k, float alpha, const float* a,
                 int lda, const float* b, int ldb, float beta, float* c, int ldc) {
  cblas_sgemm(CblasRowMajor, ta ? CblasTrans : CblasNoTrans,
              tb ? CblasTrans : CblasNoTrans, m, n, k, alpha, a, lda, b, ldb, beta,
              c, ldc);
}

inline void gemm(bool ta, bool tb, int m, int n, int k, double alpha, const double* a,
                 int lda, const double* b, int ldb, double beta, double* c, int ldc) {
  cblas_dgemm(CblasRowMajor, ta ? CblasTrans : CblasNoTrans,
              tb ? CblasTrans : CblasNoTrans, m, n, k, alpha, a, lda, b, ldb, beta,
              c, ldc);
}

// Reusable scratch for im2col buffers; grows monotonically per thread.
template <typename T>
std::vector<T>& scratch(int which) {
  thread_local std::vector<T> bufs[2];
  return bufs[which];
}

// Unfold one image [C, H, W] into columns [C*kh*kw, Ho*Wo].
template <typename T>
void im2col(const T* src, int C, int H, int W, int kh, int kw, int stride, int pad,
            int Ho, int Wo, T* col) {
  for (int c = 0; c < C; ++c) {
    const T* plane = src + int64_t(c) * H * W;
    for (int ki = 0; ki < kh; ++ki) {
      for (int kj = 0; kj < kw; ++kj) {
        T* dst = col + (int64_t(c) * kh * kw + ki * kw + kj) * Ho * Wo;
        for (int oh = 0; oh < Ho; ++oh) {
          int ih = oh * stride - pad + ki;
          T* drow = dst + int64_t(oh) * Wo;
          if (ih < 0 || ih >= H) {
            std::fill(drow, drow + Wo, T(0));
            continue;
          }
          const T* srow = plane + int64_t(ih) * W;
          if (stride == 1) {
            int ow0 = std::max(0, pad - kj);
            int ow1 = std::min(Wo, W + pad - kj);
            if (ow1 <= ow0) {
              std::fill(drow, drow + Wo, T(0));
            } else {
              std::fill(drow, drow + ow0, T(0));
              std::memcpy(drow + ow0, srow + ow0 - pad + kj,
                          size_t(ow1 - ow0) * sizeof(T));
              std::fill(drow + ow1, drow + Wo, T(0));
            }
          } else {
            for (int ow = 0; ow < Wo; ++ow) {
              int iw = ow * stride - pad + kj;
              drow[ow] = (iw >= 0 && iw < W) ? srow[iw] : T(0);
            }
          }
        }
      }
    }
  }
}

// Fold columns back, accumulating overlaps. Inverse of im2col for gradients.
template <typename T>
void col2im_add(const T* col, int C, int H, int W, int kh, int kw, int stride,
                int pad, int Ho, int Wo, T* dst) {
  for (int c = 0; c < C; ++c) {
    T* plane = dst + int64_t(c) * H * W;
    for (int ki = 0; ki < kh; ++ki) {
      for (int kj = 0; kj < kw; ++kj) {
        const T* src = col + (int64_t(c) * kh * kw + ki * kw + kj) * Ho * Wo;
        for (int oh = 0; oh < Ho; ++oh) {
          int ih = oh * stride - pad + ki;
          if (ih < 0 || ih >= H) continue;
          const T* srow = src + int64_t(oh) * Wo;
          T* drow = plane + int64_t(ih) * W;
          for (int ow = 0; ow < Wo; ++ow) {
            int iw = ow * stride - pad + kj;
            if (iw >= 0 && iw < W) drow[iw] += srow[ow];
          }
        }
      }
    }
  }
}

int conv_out_dim(int in, int k, int stride, int pad) {
  return (in + 2 * pad - k) / stride + 1;
}

}  // namespace

template <typename T>
Node<T>* Graph<T>::make(Shape shape, const char* op) {
  auto node = std::make_unique<Node<T>>();
  node->shape = std::move(shape);
  node->value.assign(size_t(numel(node->shape)), T(0));
  node->is_leaf = false;
  node->op = op;
  nodes_.push_back(std::move(node));
  return nodes_.back().get();
}

template <typename T>
Node<T>* Graph<T>::leaf(Shape shape, std::vector<T> value, bool requires_grad) {
  check_shape(int64_t(value.size()) == numel(shape),
              "leaf value size does not match shape " + shape_str(shape));
  auto node = std::make_unique<Node<T>>();
  node->shape = std::move(shape);
  node->value = std::move(value);
  node->requires_grad = requires_grad;
  nodes_.push_back(std::move(node));
  return nodes_.back().get();
}

template <typename T>
Node<T>* Graph<T>::leaf(Shape shape, std::span<const T> value, bool requires_grad) {
  return leaf(std::move(shape), std::vector<T>(value.begin(), value.end()),
              requires_grad);
}

template <typename T>
std::vector<T>& Graph<T>::grad_of(Node<T>* node) {
  if (node->grad.empty()) node->grad.assign(size_t(node->size()), T(0));
  return node->grad;
}

template <typename T>
void Graph<T>::backward(Node<T>* loss) {
  check_shape(loss != nullptr && loss->size() == 1, "backward needs a scalar loss");
  grad_of(loss)[0] = T(1);
  visits_ = 0;
  for (auto it = nodes_.rbegin(); it != nodes_.rend(); ++it) {
    Node<T>* n = it->get();
    ++visits_;
    if (n->backward_fn && n->grad_touched()) n->backward_fn(*this, *n);
  }
}

// ---------------------------------------------------------------------------
// convolution

template <typename T>
Node<T>* conv2d(Graph<T>& g, Node<T>* x, Node<T>* w, Node<T>* bias,
                const Conv2dOpts& opts) {
  check_shape(x->shape.size() == 4, "conv2d input must be NCHW, got " + shape_str(x->shape));
  check_shape(w->shape.size() == 4, "conv2d weight must be [F,C/g,kh,kw]");
  const int N = x->shape[0], C = x->shape[1], H = x->shape[2], W = x->shape[3];
  const int F = w->shape[0], Cg = w->shape[1], kh = w->shape[2], kw = w->shape[3];
  const int groups = opts.groups, stride = opts.stride, pad = opts.pad;
  check(groups >= 1 && stride >= 1 && pad >= 0, ErrorCode::InvalidSpec,
        "conv2d options out of range");
  check_shape(C == Cg * groups, "conv2d channel mismatch: input " + shape_str(x->shape) +
                                    " weight " + shape_str(w->shape));
  check_shape(F % groups == 0, "conv2d filter count not divisible by groups");
  if (bias) check_shape(bias->shape == Shape{F}, "conv2d bias must be [F]");
  const int Ho = conv_out_dim(H, kh, stride, pad);
  const int Wo = conv_out_dim(W, kw, stride, pad);
  check_shape(Ho >= 1 && Wo >= 1, "conv2d output would be empty");

  const int Fg = F / groups;
  const int K = Cg * kh * kw;
  const int64_t HW = int64_t(H) * W, OW = int64_t(Ho) * Wo;

  Node<T>* y = g.make({N, F, Ho, Wo}, "conv2d");
  std::vector<T>& col = scratch<T>(0);
  col.resize(size_t(K) * size_t(OW));
  for (int n = 0; n < N; ++n) {
    for (int gi = 0; gi < groups; ++gi) {
      const T* xg = x->value.data() + (int64_t(n) * C + int64_t(gi) * Cg) * HW;
      im2col(xg, Cg, H, W, kh, kw, stride, pad, Ho, Wo, col.data());
      T* yg = y->value.data() + (int64_t(n) * F + int64_t(gi) * Fg) * OW;
      gemm(false, false, Fg, int(OW), K, T(1), w->value.data() + int64_t(gi) * Fg * K,
           K, col.data(), int(OW), T(0), yg, int(OW));
    }
    if (bias) {
      T* yn = y->value.data() + int64_t(n) * F * OW;
      for (int f = 0; f < F; ++f) {
        const T b = bias->value[size_t(f)];
        T* row = yn + int64_t(f) * OW;
        for (int64_t i = 0; i < OW; ++i) row[i] += b;
      }
    }
  }

  Conv2dOpts o = opts;
  y->backward_fn = [x, w, bias, o, N, C, H, W, F, Cg, kh, kw, Ho, Wo](Graph<T>& g,
                                                                      Node<T>& self) {
    const int groups = o.groups, stride = o.stride, pad = o.pad;
    const int Fg = F / groups;
    const int K = Cg * kh * kw;
    const int64_t HW = int64_t(H) * W, OW = int64_t(Ho) * Wo;
    const T* gy = self.grad.data();

    if (bias && Graph<T>::wants_grad(bias)) {
      std::vector<T>& db = g.grad_of(bias);
      for (int n = 0; n < N; ++n) {
        for (int f = 0; f < F; ++f) {
          const T* row = gy + (int64_t(n) * F + f) * OW;
          T s = T(0);
          for (int64_t i = 0; i < OW; ++i) s += row[i];
          db[size_t(f)] += s;
        }
      }
    }

    const bool want_w = Graph<T>::wants_grad(w);
    const bool want_x = Graph<T>::wants_grad(x);
    if (!want_w && !want_x) return;

    std::vector<T>& col = scratch<T>(0);
    std::vector<T>& dcol = scratch<T>(1);
    col.resize(size_t(K) * size_t(OW));
    if (want_x) dcol.resize(size_t(K) * size_t(OW));
    T* dw = want_w ? g.grad_of(w).data() : nullptr;
    T* dx = want_x ? g.grad_of(x).data() : nullptr;

    for (int n = 0; n < N; ++n) {
      for (int gi = 0; gi < groups; ++gi) {
        const T* gyg = gy + (int64_t(n) * F + int64_t(gi) * Fg) * OW;
        if (want_w) {
          const T* xg = x->value.data() + (int64_t(n) * C + int64_t(gi) * Cg) * HW;
          im2col(xg, Cg, H, W, kh, kw, stride, pad, Ho, Wo, col.data());
          gemm(false, true, Fg, K, int(OW), T(1), gyg, int(OW), col.data(), int(OW),
               T(1), dw + int64_t(gi) * Fg * K, K);
        }
        if (want_x) {
          gemm(true, false, K, int(OW), Fg, T(1),
               w->value.data() + int64_t(gi) * Fg * K, K, gyg, int(OW), T(0),
               dcol.data(), int(OW));
          col2im_add(dcol.data(), Cg, H, W, kh, kw, stride, pad, Ho, Wo,
                     dx + (int64_t(n) * C + int64_t(gi) * Cg) * HW);
        }
      }
    }
  };
  return y;
}

template <typename T>
Node<T>* transposed_conv2d(Graph<T>& g, Node<T>* x, Node<T>* w, Node<T>* bias,
                           int stride) {
  check_shape(x->shape.size() == 4, "transposed_conv2d input must be NCHW");
  check_shape(w->shape.size() == 4, "transposed_conv2d weight must be [Cin,Cout,kh,kw]");
  const int N = x->shape[0], C = x->shape[1], H = x->shape[2], W = x->shape[3];
  const int Cw = w->shape[0], Co = w->shape[1], kh = w->shape[2], kw = w->shape[3];
  check(stride >= 1, ErrorCode::InvalidSpec, "transposed_conv2d stride out of range");
  check_shape(C == Cw, "transposed_conv2d channel mismatch");
  if (bias) check_shape(bias->shape == Shape{Co}, "transposed_conv2d bias must be [Cout]");
  const int Ho = (H - 1) * stride + kh;
  const int Wo = (W - 1) * stride + kw;

  Node<T>* y = g.make({N, Co, Ho, Wo}, "transposed_conv2d");
  for (int n = 0; n < N; ++n) {
    for (int ci = 0; ci < C; ++ci) {
      const T* xp = x->value.data() + (int64_t(n) * C + ci) * H * W;
      for (int co = 0; co < Co; ++co) {
        const T* wp = w->value.data() + (int64_t(ci) * Co + co) * kh * kw;
        T* yp = y->value.data() + (int64_t(n) * Co + co) * Ho * Wo;
        for (int h = 0; h < H; ++h) {
          for (int w_ = 0; w_ < W; ++w_) {
            const T v = xp[int64_t(h) * W + w_];
            if (v == T(0)) continue;
            T* base = yp + int64_t(h * stride) * Wo + w_ * stride;
            for (int ki = 0; ki < kh; ++ki)
              for (int kj = 0; kj < kw; ++kj) base[int64_t(ki) * Wo + kj] += v * wp[ki * kw + kj];
          }
        }
      }
    }
    if (bias) {
      T* yn = y->value.data() + int64_t(n) * Co * Ho * Wo;
      for (int co = 0; co < Co; ++co) {
        const T b = bias->value[size_t(co)];
        T* row = yn + int64_t(co) * Ho * Wo;
        for (int64_t i = 0; i < int64_t(Ho) * Wo; ++i) row[i] += b;
      }
    }
  }

  y->backward_fn = [x, w, bias, stride, N, C, H, W, Co, kh, kw, Ho, Wo](Graph<T>& g,
                                                                        Node<T>& self) {
    const T* gy = self.grad.data();
    if (bias && Graph<T>::wants_grad(bias)) {
      std::vector<T>& db = g.grad_of(bias);
      for (int n = 0; n < N; ++n)
        for (int co = 0; co < Co; ++co) {
          const T* row = gy + (int64_t(n) * Co + co) * Ho * Wo;
          T s = T(0);
          for (int64_t i = 0; i < int64_t(Ho) * Wo; ++i) s += row[i];
          db[size_t(co)] += s;
        }
    }
    const bool want_w = Graph<T>::wants_grad(w);
    const bool want_x = Graph<T>::wants_grad(x);
    if (!want_w && !want_x) return;
    T* dw = want_w ? g.grad_of(w).data() : nullptr;
    T* dx = want_x ? g.grad_of(x).data() : nullptr;
    for (int n = 0; n < N; ++n) {
      for (int ci = 0; ci < C; ++ci) {
        const T* xp = x->value.data() + (int64_t(n) * C + ci) * H * W;
        T* dxp = want_x ? dx + (int64_t(n) * C + ci) * H * W : nullptr;
        for (int co = 0; co < Co; ++co) {
          const T* wp = w->value.data() + (int64_t(ci) * Co + co) * kh * kw;
          T* dwp = want_w ? dw + (int64_t(ci) * Co + co) * kh * kw : nullptr;
          const T* gp = gy + (int64_t(n) * Co + co) * Ho * Wo;
          for (int h = 0; h < H; ++h) {
            for (int w_ = 0; w_ < W; ++w_) {
              const T* base = gp + int64_t(h * stride) * Wo + w_ * stride;
              const T v = xp[int64_t(h) * W + w_];
              T acc = T(0);
              for (int ki = 0; ki < kh; ++ki) {
                for (int kj = 0; kj < kw; ++kj) {
                  const T go = base[int64_t(ki) * Wo + kj];
                  acc += go * wp[ki * kw + kj];
                  if (want_w) dwp[ki * kw + kj] += go * v;
                }
              }
              if (want_x) dxp[int64_t(h) * W + w_] += acc;
            }
          }
        }
      }
    }
  };
  return y;
}

// ---------------------------------------------------------------------------
// normalization and activations

template <typename T>
Node<T>* batch_norm(Graph<T>& g, Node<T>* x, Node<T>* gamma, Node<T>* beta,
                    std::vector<T>* running_mean, std::vector<T>* running_var,
                    bool training, T momentum, T eps) {
  check_shape(x->shape.size() == 4, "batch_norm input must be NCHW");
  const int N = x->shape[0], C = x->shape[1], H = x->shape[2], W = x->shape[3];
  check_shape(gamma->shape == Shape{C} && beta->shape == Shape{C},
              "batch_norm gamma/beta must be [C]");
  check_shape(running_mean && int(running_mean->size()) == C &&
                  running_var && int(running_var->size()) == C,
              "batch_norm running buffers must be [C]");
  const int64_t HW = int64_t(H) * W;
  const int64_t m = int64_t(N) * HW;

  std::vector<T> means(static_cast<size_t>(C));
  std::vector<T> istds(static_cast<size_t>(C));
  for (int c = 0; c < C; ++c) {
    double mean, var;
    if (training) {
      // two-pass moments in double; the biased variance feeds both the
      // normalization and the running buffer update
      double s = 0.0;
      for (int n = 0; n < N; ++n) {
        const T* p = x->value.data() + (int64_t(n) * C + c) * HW;
        for (int64_t i = 0; i < HW; ++i) s += double(p[i]);
      }
      mean = s / double(m);
      double s2 = 0.0;
      for (int n = 0; n < N; ++n) {
        const T* p = x->value.data() + (int64_t(n) * C + c) * HW;
        for (int64_t i = 0; i < HW; ++i) {
          double d = double(p[i]) - mean;
          s2 += d * d;
        }
      }
      var = s2 / double(m);
      (*running_mean)[size_t(c)] =
          T(momentum * double((*running_mean)[size_t(c)]) + (1.0 - double(momentum)) * mean);
      (*running_var)[size_t(c)] =
          T(momentum * double((*running_var)[size_t(c)]) + (1.0 - double(momentum)) * var);
    } else {
      mean = double((*running_mean)[size_t(c)]);
      var = double((*running_var)[size_t(c)]);
    }
    means[size_t(c)] = T(mean);
    istds[size_t(c)] = T(1.0 / std::sqrt(var + double(eps)));
  }

  Node<T>* y = g.make(x->shape, "batch_norm");
  for (int n = 0; n < N; ++n) {
    for (int c = 0; c < C; ++c) {
      const T* p = x->value.data() + (int64_t(n) * C + c) * HW;
      T* q = y->value.data() + (int64_t(n) * C + c) * HW;
      const T mu = means[size_t(c)], is = istds[size_t(c)];
      const T ga = gamma->value[size_t(c)], be = beta->value[size_t(c)];
      for (int64_t i = 0; i < HW; ++i) q[i] = (p[i] - mu) * is * ga + be;
    }
  }

  y->backward_fn = [x, gamma, beta, training, N, C, HW, m, means = std::move(means),
                    istds = std::move(istds)](Graph<T>& g, Node<T>& self) {
    const T* gy = self.grad.data();
    const bool want_x = Graph<T>::wants_grad(x);
    T* dx = want_x ? g.grad_of(x).data() : nullptr;
    T* dgamma = Graph<T>::wants_grad(gamma) ? g.grad_of(gamma).data() : nullptr;
    T* dbeta = Graph<T>::wants_grad(beta) ? g.grad_of(beta).data() : nullptr;
    for (int c = 0; c < C; ++c) {
      const T mu = means[size_t(c)], is = istds[size_t(c)];
      double s1 = 0.0, s2 = 0.0;
      for (int n = 0; n < N; ++n) {
        const T* go = gy + (int64_t(n) * C + c) * HW;
        const T* p = x->value.data() + (int64_t(n) * C + c) * HW;
        for (int64_t i = 0; i < HW; ++i) {
          s1 += double(go[i]);
          s2 += double(go[i]) * double((p[i] - mu) * is);
        }
      }
      if (dgamma) dgamma[c] += T(s2);
      if (dbeta) dbeta[c] += T(s1);
      if (!want_x) continue;
      const T ga_is = gamma->value[size_t(c)] * is;
      if (training) {
        const T mean_g = T(s1 / double(m));
        const T mean_gx = T(s2 / double(m));
        for (int n = 0; n < N; ++n) {
          const T* go = gy + (int64_t(n) * C + c) * HW;
          const T* p = x->value.data() + (int64_t(n) * C + c) * HW;
          T* d = dx + (int64_t(n) * C + c) * HW;
          for (int64_t i = 0; i < HW; ++i) {
            const T xhat = (p[i] - mu) * is;
            d[i] += ga_is * (go[i] - mean_g - xhat * mean_gx);
          }
        }
      } else {
        for (int n = 0; n < N; ++n) {
          const T* go = gy + (int64_t(n) * C + c) * HW;
          T* d = dx + (int64_t(n) * C + c) * HW;
          for (int64_t i = 0; i < HW; ++i) d[i] += go[i] * ga_is;
        }
      }
    }
  };
  return y;
}

template <typename T>
Node<T>* relu(Graph<T>& g, Node<T>* x) {
  Node<T>* y = g.make(x->shape, "relu");
  const int64_t n = x->size();
  for (int64_t i = 0; i < n; ++i)
    y->value[size_t(i)] = x->value[size_t(i)] > T(0) ? x->value[size_t(i)] : T(0);
  y->backward_fn = [x, n](Graph<T>& g, Node<T>& self) {
    if (!Graph<T>::wants_grad(x)) return;
    std::vector<T>& dx = g.grad_of(x);
    for (int64_t i = 0; i < n; ++i)
      if (x->value[size_t(i)] > T(0)) dx[size_t(i)] += self.grad[size_t(i)];
  };
  return y;
}

template <typename T>
Node<T>* sigmoid(Graph<T>& g, Node<T>* x) {
  Node<T>* y = g.make(x->shape, "sigmoid");
  const int64_t n = x->size();
  for (int64_t i = 0; i < n; ++i) {
    const T v = x->value[size_t(i)];
    if (v >= T(0)) {
      y->value[size_t(i)] = T(1) / (T(1) + std::exp(-v));
    } else {
      const T e = std::exp(v);
      y->value[size_t(i)] = e / (T(1) + e);
    }
  }
  y->backward_fn = [x, n](Graph<T>& g, Node<T>& self) {
    if (!Graph<T>::wants_grad(x)) return;
    std::vector<T>& dx = g.grad_of(x);
    for (int64_t i = 0; i < n; ++i) {
      const T s = self.value[size_t(i)];
      dx[size_t(i)] += self.grad[size_t(i)] * s * (T(1) - s);
    }
  };
  return y;
}

template <typename T>
Node<T>* softmax(Graph<T>& g, Node<T>* x, int axis) {
  const int rank = int(x->shape.size());
  check_shape(axis >= 0 && axis < rank, "softmax axis out of range");
  int64_t outer = 1, inner = 1;
  for (int i = 0; i < axis; ++i) outer *= x->shape[size_t(i)];
  for (int i = axis + 1; i < rank; ++i) inner *= x->shape[size_t(i)];
  const int64_t n = x->shape[size_t(axis)];

  Node<T>* y = g.make(x->shape, "softmax");
  for (int64_t o = 0; o < outer; ++o) {
    for (int64_t in = 0; in < inner; ++in) {
      const T* xs = x->value.data() + o * n * inner + in;
      T* ys = y->value.data() + o * n * inner + in;
      T mx = xs[0];
      for (int64_t a = 1; a < n; ++a) mx = std::max(mx, xs[a * inner]);
      T denom = T(0);
      for (int64_t a = 0; a < n; ++a) {
        const T e = std::exp(xs[a * inner] - mx);
        ys[a * inner] = e;
        denom += e;
      }
      for (int64_t a = 0; a < n; ++a) ys[a * inner] /= denom;
    }
  }
  y->backward_fn = [x, outer, inner, n](Graph<T>& g, Node<T>& self) {
    if (!Graph<T>::wants_grad(x)) return;
    std::vector<T>& dx = g.grad_of(x);
    for (int64_t o = 0; o < outer; ++o) {
      for (int64_t in = 0; in < inner; ++in) {
        const T* ys = self.value.data() + o * n * inner + in;
        const T* gs = self.grad.data() + o * n * inner + in;
        T* ds = dx.data() + o * n * inner + in;
        T dot = T(0);
        for (int64_t a = 0; a < n; ++a) dot += ys[a * inner] * gs[a * inner];
        for (int64_t a = 0; a < n; ++a)
          ds[a * inner] += ys[a * inner] * (gs[a * inner] - dot);
      }
    }
  };
  return y;
}

// ---------------------------------------------------------------------------
// pooling

template <typename T>
Node<T>* max_pool(Graph<T>& g, Node<T>* x, const Pool2dOpts& opts) {
  check_shape(x->shape.size() == 4, "max_pool input must be NCHW");
  const int N = x->shape[0], C = x->shape[1], H = x->shape[2], W = x->shape[3];
  const int k = opts.kernel, s = opts.stride, p = opts.pad;
  check(k >= 1 && s >= 1 && p >= 0 && p < k, ErrorCode::InvalidSpec,
        "max_pool options out of range");
  const int Ho = conv_out_dim(H, k, s, p);
  const int Wo = conv_out_dim(W, k, s, p);
  check_shape(Ho >= 1 && Wo >= 1, "max_pool output would be empty");

  Node<T>* y = g.make({N, C, Ho, Wo}, "max_pool");
  auto argmax = std::make_shared<std::vector<int32_t>>(size_t(y->size()));
  int64_t oi = 0;
  for (int n = 0; n < N; ++n) {
    for (int c = 0; c < C; ++c) {
      const T* plane = x->value.data() + (int64_t(n) * C + c) * H * W;
      for (int oh = 0; oh < Ho; ++oh) {
        for (int ow = 0; ow < Wo; ++ow, ++oi) {
          const int h0 = std::max(0, oh * s - p), h1 = std::min(H, oh * s - p + k);
          const int w0 = std::max(0, ow * s - p), w1 = std::min(W, ow * s - p + k);
          T best = plane[int64_t(h0) * W + w0];
          int32_t bidx = int32_t(h0 * W + w0);
          for (int h = h0; h < h1; ++h)
            for (int w_ = w0; w_ < w1; ++w_) {
              const T v = plane[int64_t(h) * W + w_];
              if (v > best) {
                best = v;
                bidx = int32_t(h * W + w_);
              }
            }
          y->value[size_t(oi)] = best;
          (*argmax)[size_t(oi)] = bidx;
        }
      }
    }
  }
  y->backward_fn = [x, argmax, N, C, H, W, Ho, Wo](Graph<T>& g, Node<T>& self) {
    if (!Graph<T>::wants_grad(x)) return;
    std::vector<T>& dx = g.grad_of(x);
    int64_t oi = 0;
    for (int n = 0; n < N; ++n)
      for (int c = 0; c < C; ++c) {
        T* plane = dx.data() + (int64_t(n) * C + c) * H * W;
        for (int64_t i = 0; i < int64_t(Ho) * Wo; ++i, ++oi)
          plane[(*argmax)[size_t(oi)]] += self.grad[size_t(oi)];
      }
  };
  return y;
}

template <typename T>
Node<T>* avg_pool(Graph<T>& g, Node<T>* x, const Pool2dOpts& opts) {
  check_shape(x->shape.size() == 4, "avg_pool input must be NCHW");
  const int N = x->shape[0], C = x->shape[1], H = x->shape[2], W = x->shape[3];
  const int k = opts.kernel, s = opts.stride;
  check(k >= 1 && s >= 1 && opts.pad == 0, ErrorCode::InvalidSpec,
        "avg_pool supports no padding");
  const int Ho = (H - k) / s + 1;
  const int Wo = (W - k) / s + 1;
  check_shape(Ho >= 1 && Wo >= 1, "avg_pool output would be empty");

  Node<T>* y = g.make({N, C, Ho, Wo}, "avg_pool");
  const T inv = T(1) / T(k * k);
  int64_t oi = 0;
  for (int n = 0; n < N; ++n)
    for (int c = 0; c < C; ++c) {
      const T* plane = x->value.data() + (int64_t(n) * C + c) * H * W;
      for (int oh = 0; oh < Ho; ++oh)
        for (int ow = 0; ow < Wo; ++ow, ++oi) {
          T acc = T(0);
          for (int h = oh * s; h < oh * s + k; ++h)
            for (int w_ = ow * s; w_ < ow * s + k; ++w_) acc += plane[int64_t(h) * W + w_];
          y->value[size_t(oi)] = acc * inv;
        }
    }
  y->backward_fn = [x, N, C, H, W, Ho, Wo, k, s, inv](Graph<T>& g, Node<T>& self) {
    if (!Graph<T>::wants_grad(x)) return;
    std::vector<T>& dx = g.grad_of(x);
    int64_t oi = 0;
    for (int n = 0; n < N; ++n)
      for (int c = 0; c < C; ++c) {
        T* plane = dx.data() + (int64_t(n) * C + c) * H * W;
        for (int oh = 0; oh < Ho; ++oh)
          for (int ow = 0; ow < Wo; ++ow, ++oi) {
            const T go = self.grad[size_t(oi)] * inv;
            for (int h = oh * s; h < oh * s + k; ++h)
              for (int w_ = ow * s; w_ < ow * s + k; ++w_) plane[int64_t(h) * W + w_] += go;
          }
      }
  };
  return y;
}

template <typename T>
Node<T>* global_avg_pool(Graph<T>& g, Node<T>* x) {
  check_shape(x->shape.size() == 4, "global_avg_pool input must be NCHW");
  const int N = x->shape[0], C = x->shape[1];
  const int64_t HW = int64_t(x->shape[2]) * x->shape[3];
  Node<T>* y = g.make({N, C, 1, 1}, "global_avg_pool");
  for (int n = 0; n < N; ++n)
    for (int c = 0; c < C; ++c) {
      const T* p = x->value.data() + (int64_t(n) * C + c) * HW;
      double acc = 0.0;
      for (int64_t i = 0; i < HW; ++i) acc += double(p[i]);
      y->value[size_t(int64_t(n) * C + c)] = T(acc / double(HW));
    }
  y->backward_fn = [x, N, C, HW](Graph<T>& g, Node<T>& self) {
    if (!Graph<T>::wants_grad(x)) return;
    std::vector<T>& dx = g.grad_of(x);
    for (int n = 0; n < N; ++n)
      for (int c = 0; c < C; ++c) {
        const T go = self.grad[size_t(int64_t(n) * C + c)] / T(HW);
        T* p = dx.data() + (int64_t(n) * C + c) * HW;
        for (int64_t i = 0; i < HW; ++i) p[i] += go;
      }
  };
  return y;
}

// ---------------------------------------------------------------------------
// dense, concat, shape ops

template <typename T>
Node<T>* dense(Graph<T>& g, Node<T>* x, Node<T>* w, Node<T>* bias) {
  check_shape(x->shape.size() == 2 && w->shape.size() == 2, "dense expects x [N,D], w [D,K]");
  const int N = x->shape[0], D = x->shape[1], K = w->shape[1];
  check_shape(w->shape[0] == D, "dense weight rows must match input features");
  if (bias) check_shape(bias->shape == Shape{K}, "dense bias must be [K]");
  Node<T>* y = g.make({N, K}, "dense");
  gemm(false, false, N, K, D, T(1), x->value.data(), D, w->value.data(), K, T(0),
       y->value.data(), K);
  if (bias)
    for (int n = 0; n < N; ++n)
      for (int k = 0; k < K; ++k) y->value[size_t(n) * K + k] += bias->value[size_t(k)];

  y->backward_fn = [x, w, bias, N, D, K](Graph<T>& g, Node<T>& self) {
    const T* gy = self.grad.data();
    if (bias && Graph<T>::wants_grad(bias)) {
      std::vector<T>& db = g.grad_of(bias);
      for (int n = 0; n < N; ++n)
        for (int k = 0; k < K; ++k) db[size_t(k)] += gy[size_t(n) * K + k];
    }
    if (Graph<T>::wants_grad(w))
      gemm(true, false, D, K, N, T(1), x->value.data(), D, gy, K, T(1),
           g.grad_of(w).data(), K);
    if (Graph<T>::wants_grad(x))
      gemm(false, true, N, D, K, T(1), gy, K, w->value.data(), K, T(1),
           g.grad_of(x).data(), D);
  };
  return y;
}

template <typename T>
Node<T>* concat(Graph<T>& g, const std::vector<Node<T>*>& xs, int axis) {
  check_shape(!xs.empty(), "concat needs at least one input");
  const Shape& first = xs[0]->shape;
  const int rank = int(first.size());
  check_shape(axis >= 0 && axis < rank, "concat axis out of range");
  int total = 0;
  for (Node<T>* x : xs) {
    check_shape(int(x->shape.size()) == rank, "concat rank mismatch");
    for (int i = 0; i < rank; ++i)
      check_shape(i == axis || x->shape[size_t(i)] == first[size_t(i)],
                  "concat non-axis dims must match");
    total += x->shape[size_t(axis)];
  }
  Shape out_shape = first;
  out_shape[size_t(axis)] = total;
  int64_t outer = 1, inner = 1;
  for (int i = 0; i < axis; ++i) outer *= first[size_t(i)];
  for (int i = axis + 1; i < rank; ++i) inner *= first[size_t(i)];

  Node<T>* y = g.make(out_shape, "concat");
  for (int64_t o = 0; o < outer; ++o) {
    T* dst = y->value.data() + o * int64_t(total) * inner;
    for (Node<T>* x : xs) {
      const int64_t chunk = int64_t(x->shape[size_t(axis)]) * inner;
      std::memcpy(dst, x->value.data() + o * chunk, size_t(chunk) * sizeof(T));
      dst += chunk;
    }
  }
  auto inputs = xs;
  y->backward_fn = [inputs, outer, inner, total, axis](Graph<T>& g, Node<T>& self) {
    for (int64_t o = 0; o < outer; ++o) {
      const T* src = self.grad.data() + o * int64_t(total) * inner;
      for (Node<T>* x : inputs) {
        const int64_t chunk = int64_t(x->shape[size_t(axis)]) * inner;
        if (Graph<T>::wants_grad(x)) {
          T* d = g.grad_of(x).data() + o * chunk;
          for (int64_t i = 0; i < chunk; ++i) d[i] += src[i];
        }
        src += chunk;
      }
    }
  };
  return y;
}

template <typename T>
Node<T>* upsample2x(Graph<T>& g, Node<T>* x) {
  check_shape(x->shape.size() == 4, "upsample2x input must be NCHW");
  const int N = x->shape[0], C = x->shape[1], H = x->shape[2], W = x->shape[3];
  Node<T>* y = g.make({N, C, 2 * H, 2 * W}, "upsample2x");
  for (int nc = 0; nc < N * C; ++nc) {
    const T* src = x->value.data() + int64_t(nc) * H * W;
    T* dst = y->value.data() + int64_t(nc) * 4 * H * W;
    for (int h = 0; h < H; ++h) {
      T* r0 = dst + int64_t(2 * h) * 2 * W;
      T* r1 = r0 + 2 * W;
      const T* s = src + int64_t(h) * W;
      for (int w_ = 0; w_ < W; ++w_) {
        r0[2 * w_] = r0[2 * w_ + 1] = r1[2 * w_] = r1[2 * w_ + 1] = s[w_];
      }
    }
  }
  y->backward_fn = [x, N, C, H, W](Graph<T>& g, Node<T>& self) {
    if (!Graph<T>::wants_grad(x)) return;
    std::vector<T>& dx = g.grad_of(x);
    for (int nc = 0; nc < N * C; ++nc) {
      T* d = dx.data() + int64_t(nc) * H * W;
      const T* gsrc = self.grad.data() + int64_t(nc) * 4 * H * W;
      for (int h = 0; h < H; ++h) {
        const T* r0 = gsrc + int64_t(2 * h) * 2 * W;
        const T* r1 = r0 + 2 * W;
        T* drow = d + int64_t(h) * W;
        for (int w_ = 0; w_ < W; ++w_)
          drow[w_] += r0[2 * w_] + r0[2 * w_ + 1] + r1[2 * w_] + r1[2 * w_ + 1];
      }
    }
  };
  return y;
}

template <typename T>
Node<T>* reshape(Graph<T>& g, Node<T>* x, Shape shape) {
  check_shape(numel(shape) == x->size(), "reshape must preserve element count");
  Node<T>* y = g.make(std::move(shape), "reshape");
  y->value = x->value;
  y->backward_fn = [x](Graph<T>& g, Node<T>& self) {
    if (!Graph<T>::wants_grad(x)) return;
    std::vector<T>& dx = g.grad_of(x);
    for (size_t i = 0; i < dx.size(); ++i) dx[i] += self.grad[i];
  };
  return y;
}

template <typename T>
Node<T>* add(Graph<T>& g, Node<T>* a, Node<T>* b) {
  check_shape(a->shape == b->shape, "add shapes must match: " + shape_str(a->shape) +
                                        " vs " + shape_str(b->shape));
  Node<T>* y = g.make(a->shape, "add");
  const int64_t n = a->size();
  for (int64_t i = 0; i < n; ++i)
    y->value[size_t(i)] = a->value[size_t(i)] + b->value[size_t(i)];
  y->backward_fn = [a, b, n](Graph<T>& g, Node<T>& self) {
    if (Graph<T>::wants_grad(a)) {
      std::vector<T>& da = g.grad_of(a);
      for (int64_t i = 0; i < n; ++i) da[size_t(i)] += self.grad[size_t(i)];
    }
    if (Graph<T>::wants_grad(b)) {
      std::vector<T>& db = g.grad_of(b);
      for (int64_t i = 0; i < n; ++i) db[size_t(i)] += self.grad[size_t(i)];
    }
  };
  return y;
}

template <typename T>
Node<T>* mul(Graph<T>& g, Node<T>* a, Node<T>* b) {
  check_shape(a->shape == b->shape, "mul shapes must match");
  Node<T>* y = g.make(a->shape, "mul");
  const int64_t n = a->size();
  for (int64_t i = 0; i < n; ++i)
    y->value[size_t(i)] = a->value[size_t(i)] * b->value[size_t(i)];
  y->backward_fn = [a, b, n](Graph<T>& g, Node<T>& self) {
    if (Graph<T>::wants_grad(a)) {
      std::vector<T>& da = g.grad_of(a);
      for (int64_t i = 0; i < n; ++i)
        da[size_t(i)] += self.grad[size_t(i)] * b->value[size_t(i)];
    }
    if (Graph<T>::wants_grad(b)) {
      std::vector<T>& db = g.grad_of(b);
      for (int64_t i = 0; i < n; ++i)
        db[size_t(i)] += self.grad[size_t(i)] * a->value[size_t(i)];
    }
  };
  return y;
}

template <typename T>
Node<T>* scale(Graph<T>& g, Node<T>* x, T factor) {
  Node<T>* y = g.make(x->shape, "scale");
  const int64_t n = x->size();
  for (int64_t i = 0; i < n; ++i) y->value[size_t(i)] = x->value[size_t(i)] * factor;
  y->backward_fn = [x, factor, n](Graph<T>& g, Node<T>& self) {
    if (!Graph<T>::wants_grad(x)) return;
    std::vector<T>& dx = g.grad_of(x);
    for (int64_t i = 0; i < n; ++i) dx[size_t(i)] += self.grad[size_t(i)] * factor;
  };
  return y;
}

template <typename T>
Node<T>* sum(Graph<T>& g, Node<T>* x) {
  Node<T>* y = g.make({1}, "sum");
  double acc = 0.0;
  for (const T v : x->value) acc += double(v);
  y->value[0] = T(acc);
  y->backward_fn = [x](Graph<T>& g, Node<T>& self) {
    if (!Graph<T>::wants_grad(x)) return;
    std::vector<T>& dx = g.grad_of(x);
    const T go = self.grad[0];
    for (T& d : dx) d += go;
  };
  return y;
}

// ---------------------------------------------------------------------------
// losses

template <typename T>
Node<T>* mae_loss(Graph<T>& g, Node<T>* pred, Node<T>* target) {
  check_shape(pred->shape == target->shape, "mae_loss shapes must match");
  const int64_t n = pred->size();
  check_shape(n > 0, "mae_loss needs at least one element");
  Node<T>* y = g.make({1}, "mae_loss");
  double acc = 0.0;
  for (int64_t i = 0; i < n; ++i)
    acc += std::abs(double(pred->value[size_t(i)]) - double(target->value[size_t(i)]));
  y->value[0] = T(acc / double(n));
  y->backward_fn = [pred, target, n](Graph<T>& g, Node<T>& self) {
    const T go = self.grad[0] / T(n);
    const bool want_p = Graph<T>::wants_grad(pred);
    const bool want_t = Graph<T>::wants_grad(target);
    if (!want_p && !want_t) return;
    T* dp = want_p ? g.grad_of(pred).data() : nullptr;
    T* dt = want_t ? g.grad_of(target).data() : nullptr;
    for (int64_t i = 0; i < n; ++i) {
      const T d = pred->value[size_t(i)] - target->value[size_t(i)];
      const T s = d > T(0) ? T(1) : (d < T(0) ? T(-1) : T(0));
      if (dp) dp[size_t(i)] += go * s;
      if (dt) dt[size_t(i)] -= go * s;
    }
  };
  return y;
}

template <typename T>
Node<T>* soft_dice_loss(Graph<T>& g, Node<T>* probs, Node<T>* onehot, T eps) {
  check_shape(probs->shape.size() == 4, "soft_dice_loss expects NCHW probabilities");
  check_shape(probs->shape == onehot->shape, "soft_dice_loss target shape mismatch");
  const int N = probs->shape[0], C = probs->shape[1];
  check_shape(C >= 2, "soft_dice_loss needs at least one foreground class");
  const int64_t HW = int64_t(probs->shape[2]) * probs->shape[3];

  // per foreground class: numerator 2*I + eps and denominator P + Q + eps
  std::vector<double> nums(size_t(C), 0.0), dens(size_t(C), 0.0);
  double loss = 0.0;
  for (int c = 1; c < C; ++c) {
    double I = 0.0, P = 0.0, Q = 0.0;
    for (int n = 0; n < N; ++n) {
      const T* p = probs->value.data() + (int64_t(n) * C + c) * HW;
      const T* q = onehot->value.data() + (int64_t(n) * C + c) * HW;
      for (int64_t i = 0; i < HW; ++i) {
        I += double(p[i]) * double(q[i]);
        P += double(p[i]);
        Q += double(q[i]);
      }
    }
    nums[size_t(c)] = 2.0 * I + double(eps);
    dens[size_t(c)] = P + Q + double(eps);
    loss -= nums[size_t(c)] / dens[size_t(c)];
  }

  Node<T>* y = g.make({1}, "soft_dice_loss");
  y->value[0] = T(loss);
  y->backward_fn = [probs, onehot, N, C, HW, nums = std::move(nums),
                    dens = std::move(dens)](Graph<T>& g, Node<T>& self) {
    const double go = double(self.grad[0]);
    const bool want_p = Graph<T>::wants_grad(probs);
    const bool want_q = Graph<T>::wants_grad(onehot);
    if (!want_p && !want_q) return;
    T* dp = want_p ? g.grad_of(probs).data() : nullptr;
    T* dq = want_q ? g.grad_of(onehot).data() : nullptr;
    for (int c = 1; c < C; ++c) {
      const double num = nums[size_t(c)], den = dens[size_t(c)];
      const double den2 = den * den;
      for (int n = 0; n < N; ++n) {
        const int64_t off = (int64_t(n) * C + c) * HW;
        const T* p = probs->value.data() + off;
        const T* q = onehot->value.data() + off;
        for (int64_t i = 0; i < HW; ++i) {
          if (dp) dp[off + i] -= T(go * (2.0 * double(q[i]) * den - num) / den2);
          if (dq) dq[off + i] -= T(go * (2.0 * double(p[i]) * den - num) / den2);
        }
      }
    }
  };
  return y;
}

// ---------------------------------------------------------------------------
// optimizer

template <typename T>
void adam_step(std::span<T> param, std::span<const T> grad, AdamState<T>& state, T lr) {
  check_shape(param.size() == grad.size(), "adam_step param/grad size mismatch");
  if (state.m.empty()) {
    state.m.assign(param.size(), T(0));
    state.v.assign(param.size(), T(0));
  }
  check_shape(state.m.size() == param.size(), "adam_step state size mismatch");
  state.t += 1;
  const double bc1 = 1.0 - std::pow(double(state.beta1), double(state.t));
  const double bc2 = 1.0 - std::pow(double(state.beta2), double(state.t));
  const T b1 = state.beta1, b2 = state.beta2;
  for (size_t i = 0; i < param.size(); ++i) {
    const T gv = grad[i];
    state.m[i] = b1 * state.m[i] + (T(1) - b1) * gv;
    state.v[i] = b2 * state.v[i] + (T(1) - b2) * gv * gv;
    const T mhat = T(double(state.m[i]) / bc1);
    const T vhat = T(double(state.v[i]) / bc2);
    param[i] -= lr * mhat / (std::sqrt(vhat) + state.eps);
  }
}

// ---------------------------------------------------------------------------
// explicit instantiations

#define BC_INSTANTIATE(T)                                                              \
  template class Graph<T>;                                                             \
  template Node<T>* conv2d<T>(Graph<T>&, Node<T>*, Node<T>*, Node<T>*,                 \
                              const Conv2dOpts&);                                      \
  template Node<T>* transposed_conv2d<T>(Graph<T>&, Node<T>*, Node<T>*, Node<T>*,     \
                                         int);                                         \
  template Node<T>* batch_norm<T>(Graph<T>&, Node<T>*, Node<T>*, Node<T>*,             \
                                  std::vector<T>*, std::vector<T>*, bool, T, T);       \
  template Node<T>* relu<T>(Graph<T>&, Node<T>*);                                      \
  template Node<T>* sigmoid<T>(Graph<T>&, Node<T>*);                                   \
  template Node<T>* softmax<T>(Graph<T>&, Node<T>*, int);                              \
  template Node<T>* max_pool<T>(Graph<T>&, Node<T>*, const Pool2dOpts&);               \
  template Node<T>* avg_pool<T>(Graph<T>&, Node<T>*, const Pool2dOpts&);               \
  template Node<T>* global_avg_pool<T>(Graph<T>&, Node<T>*);                           \
  template Node<T>* dense<T>(Graph<T>&, Node<T>*, Node<T>*, Node<T>*);                 \
  template Node<T>* concat<T>(Graph<T>&, const std::vector<Node<T>*>&, int);           \
  template Node<T>* upsample2x<T>(Graph<T>&, Node<T>*);                                \
  template Node<T>* reshape<T>(Graph<T>&, Node<T>*, Shape);                            \
  template Node<T>* add<T>(Graph<T>&, Node<T>*, Node<T>*);                             \
  template Node<T>* mul<T>(Graph<T>&, Node<T>*, Node<T>*);                             \
  template Node<T>* scale<T>(Graph<T>&, Node<T>*, T);                                  \
  template Node<T>* sum<T>(Graph<T>&, Node<T>*);                                       \
  template Node<T>* mae_loss<T>(Graph<T>&, Node<T>*, Node<T>*);                        \
  template Node<T>* soft_dice_loss<T>(Graph<T>&, Node<T>*, Node<T>*, T);               \
  template void adam_step<T>(std::span<T>, std::span<const T>, AdamState<T>&, T);

BC_INSTANTIATE(float)
BC_INSTANTIATE(double)

#undef BC_INSTANTIATE

}  // namespace bc
