#pragma once

#include <algorithm>
#include <functional>
#include <memory>
#include <string>
#include <unordered_map>
#include <unordered_set>
#include <vector>

#include "qm/tensor.hpp"

namespace qm {

// Reverse-mode autodiff over a dynamically built DAG. Each forward op returns
// a fresh node whose backward_fn scatters the node's accumulated gradient into
// its parents. Leaves (parameters, constants) have no backward_fn; their
// gradients accumulate across backward passes until sgd_step zeroes them.
template <typename T>
struct NodeT {
  TensorT<T> value;
  TensorT<T> grad;      // same shape as value, zero-initialized
  TensorT<T> velocity;  // SGD momentum state, sized lazily on first step
  std::vector<std::shared_ptr<NodeT>> parents;
  std::function<void(NodeT&)> backward_fn;
  std::string name;

  bool is_leaf() const { return !backward_fn; }
};

template <typename T>
using NodePtrT = std::shared_ptr<NodeT<T>>;

using Node = NodeT<float>;
using NodePtr = NodePtrT<float>;

template <typename T>
NodePtrT<T> make_leaf(TensorT<T> value, std::string name = "") {
  auto n = std::make_shared<NodeT<T>>();
  n->grad = TensorT<T>(value.shape());
  n->value = std::move(value);
  n->name = std::move(name);
  return n;
}

template <typename T>
NodePtrT<T> make_op_node(TensorT<T> value, std::vector<NodePtrT<T>> parents,
                         std::function<void(NodeT<T>&)> backward_fn) {
  auto n = std::make_shared<NodeT<T>>();
  n->grad = TensorT<T>(value.shape());
  n->value = std::move(value);
  n->parents = std::move(parents);
  n->backward_fn = std::move(backward_fn);
  return n;
}

// ---------------------------------------------------------------------------
// Elementwise and reduction ops
// ---------------------------------------------------------------------------

template <typename T>
NodePtrT<T> relu(const NodePtrT<T>& x) {
  TensorT<T> out(x->value.shape());
  const T* xi = x->value.data();
  T* yo = out.data();
  for (int64_t i = 0; i < out.size(); ++i) yo[i] = xi[i] > T(0) ? xi[i] : T(0);
  return make_op_node<T>(std::move(out), {x}, [](NodeT<T>& self) {
    NodeT<T>& p = *self.parents[0];
    const T* xv = p.value.data();
    const T* g = self.grad.data();
    T* pg = p.grad.data();
    // Subgradient at exactly zero is taken as zero.
    for (int64_t i = 0; i < self.grad.size(); ++i)
      if (xv[i] > T(0)) pg[i] += g[i];
  });
}

template <typename T>
NodePtrT<T> add(const NodePtrT<T>& a, const NodePtrT<T>& b) {
  QM_CHECK_SHAPE(a->value.same_shape(b->value),
                 "add: shape mismatch " + shape_to_string(a->value.shape()) + " vs " +
                     shape_to_string(b->value.shape()));
  TensorT<T> out(a->value.shape());
  for (int64_t i = 0; i < out.size(); ++i) out[i] = a->value[i] + b->value[i];
  return make_op_node<T>(std::move(out), {a, b}, [](NodeT<T>& self) {
    for (int pi = 0; pi < 2; ++pi) {
      T* pg = self.parents[pi]->grad.data();
      const T* g = self.grad.data();
      for (int64_t i = 0; i < self.grad.size(); ++i) pg[i] += g[i];
    }
  });
}

template <typename T>
NodePtrT<T> mul(const NodePtrT<T>& a, const NodePtrT<T>& b) {
  QM_CHECK_SHAPE(a->value.same_shape(b->value),
                 "mul: shape mismatch " + shape_to_string(a->value.shape()) + " vs " +
                     shape_to_string(b->value.shape()));
  TensorT<T> out(a->value.shape());
  for (int64_t i = 0; i < out.size(); ++i) out[i] = a->value[i] * b->value[i];
  return make_op_node<T>(std::move(out), {a, b}, [](NodeT<T>& self) {
    NodeT<T>& a = *self.parents[0];
    NodeT<T>& b = *self.parents[1];
    const T* g = self.grad.data();
    for (int64_t i = 0; i < self.grad.size(); ++i) {
      a.grad[i] += g[i] * b.value[i];
      b.grad[i] += g[i] * a.value[i];
    }
  });
}

template <typename T>
NodePtrT<T> scale(const NodePtrT<T>& x, T c) {
  TensorT<T> out(x->value.shape());
  for (int64_t i = 0; i < out.size(); ++i) out[i] = x->value[i] * c;
  return make_op_node<T>(std::move(out), {x}, [c](NodeT<T>& self) {
    T* pg = self.parents[0]->grad.data();
    const T* g = self.grad.data();
    for (int64_t i = 0; i < self.grad.size(); ++i) pg[i] += c * g[i];
  });
}

template <typename T>
NodePtrT<T> sum(const NodePtrT<T>& x) {
  T acc = 0;
  for (int64_t i = 0; i < x->value.size(); ++i) acc += x->value[i];
  return make_op_node<T>(TensorT<T>::scalar(acc), {x}, [](NodeT<T>& self) {
    T g = self.grad[0];
    T* pg = self.parents[0]->grad.data();
    for (int64_t i = 0; i < self.parents[0]->grad.size(); ++i) pg[i] += g;
  });
}

// Row selection on a [N,D] tensor; backward scatter-adds into the picked rows.
template <typename T>
NodePtrT<T> gather_rows(const NodePtrT<T>& x, std::vector<int> rows) {
  QM_CHECK_SHAPE(x->value.rank() == 2, "gather_rows: rank " + std::to_string(x->value.rank()) + " != 2");
  const int N = x->value.dim(0), D = x->value.dim(1);
  QM_CHECK(!rows.empty(), "gather_rows: empty row list");
  for (int r : rows)
    QM_CHECK(r >= 0 && r < N, "gather_rows: row " + std::to_string(r) + " outside [0," +
                                  std::to_string(N) + ")");
  TensorT<T> out({static_cast<int>(rows.size()), D});
  for (size_t i = 0; i < rows.size(); ++i)
    for (int d = 0; d < D; ++d) out[static_cast<int64_t>(i) * D + d] = x->value(rows[i], d);
  auto fn = [rows = std::move(rows), D](NodeT<T>& self) {
    T* pg = self.parents[0]->grad.data();
    const T* g = self.grad.data();
    for (size_t i = 0; i < rows.size(); ++i)
      for (int d = 0; d < D; ++d)
        pg[static_cast<int64_t>(rows[i]) * D + d] += g[static_cast<int64_t>(i) * D + d];
  };
  return make_op_node<T>(std::move(out), {x}, std::move(fn));
}

// Reshape [R,C,h,w] (or any rank) into [rows, cols]; data order is untouched.
template <typename T>
NodePtrT<T> flatten2(const NodePtrT<T>& x, int rows) {
  QM_CHECK_SHAPE(rows > 0 && x->value.size() % rows == 0,
                 "flatten2: cannot split " + std::to_string(x->value.size()) + " elements into " +
                     std::to_string(rows) + " rows");
  int cols = static_cast<int>(x->value.size() / rows);
  TensorT<T> out({rows, cols}, x->value.values());
  return make_op_node<T>(std::move(out), {x}, [](NodeT<T>& self) {
    T* pg = self.parents[0]->grad.data();
    const T* g = self.grad.data();
    for (int64_t i = 0; i < self.grad.size(); ++i) pg[i] += g[i];
  });
}

// ---------------------------------------------------------------------------
// conv2d: cross-correlation, NCHW input, KCkhkw weight
// ---------------------------------------------------------------------------

template <typename T>
NodePtrT<T> conv2d(const NodePtrT<T>& input, const NodePtrT<T>& weight, const NodePtrT<T>& bias,
                   int stride, int pad) {
  const TensorT<T>& x = input->value;
  const TensorT<T>& w = weight->value;
  const TensorT<T>& b = bias->value;
  QM_CHECK_SHAPE(x.rank() == 4, "conv2d: input rank " + std::to_string(x.rank()) + " != 4");
  QM_CHECK_SHAPE(w.rank() == 4, "conv2d: weight rank " + std::to_string(w.rank()) + " != 4");
  const int N = x.dim(0), C = x.dim(1), H = x.dim(2), W = x.dim(3);
  const int K = w.dim(0), kh = w.dim(2), kw = w.dim(3);
  QM_CHECK_SHAPE(w.dim(1) == C, "conv2d: weight input channels " + std::to_string(w.dim(1)) +
                                    " != input channels " + std::to_string(C));
  QM_CHECK_SHAPE(b.rank() == 1 && b.dim(0) == K,
                 "conv2d: bias shape " + shape_to_string(b.shape()) + " != [" + std::to_string(K) + "]");
  QM_CHECK_SHAPE(stride >= 1, "conv2d: stride " + std::to_string(stride) + " < 1");
  QM_CHECK_SHAPE(pad >= 0, "conv2d: negative pad " + std::to_string(pad));
  QM_CHECK_SHAPE(kh <= H + 2 * pad, "conv2d: kernel height " + std::to_string(kh) +
                                        " exceeds padded input height " + std::to_string(H + 2 * pad));
  QM_CHECK_SHAPE(kw <= W + 2 * pad, "conv2d: kernel width " + std::to_string(kw) +
                                        " exceeds padded input width " + std::to_string(W + 2 * pad));
  const int Ho = (H + 2 * pad - kh) / stride + 1;
  const int Wo = (W + 2 * pad - kw) / stride + 1;

  TensorT<T> out({N, K, Ho, Wo});
  const T* xd = x.data();
  const T* wd = w.data();
  T* od = out.data();
  for (int n = 0; n < N; ++n) {
    for (int k = 0; k < K; ++k) {
      const T bk = b[k];
      for (int oh = 0; oh < Ho; ++oh) {
        const int ih0 = oh * stride - pad;
        for (int ow = 0; ow < Wo; ++ow) {
          const int iw0 = ow * stride - pad;
          T acc = bk;
          for (int c = 0; c < C; ++c) {
            const T* xrow = xd + ((static_cast<int64_t>(n) * C + c) * H) * W;
            const T* wrow = wd + ((static_cast<int64_t>(k) * C + c) * kh) * kw;
            for (int i = 0; i < kh; ++i) {
              const int ih = ih0 + i;
              if (ih < 0 || ih >= H) continue;
              const T* xr = xrow + static_cast<int64_t>(ih) * W;
              const T* wr = wrow + static_cast<int64_t>(i) * kw;
              for (int j = 0; j < kw; ++j) {
                const int iw = iw0 + j;
                if (iw < 0 || iw >= W) continue;
                acc += xr[iw] * wr[j];
              }
            }
          }
          od[((static_cast<int64_t>(n) * K + k) * Ho + oh) * Wo + ow] = acc;
        }
      }
    }
  }

  auto fn = [stride, pad](NodeT<T>& self) {
    NodeT<T>& in = *self.parents[0];
    NodeT<T>& wt = *self.parents[1];
    NodeT<T>& bs = *self.parents[2];
    const int N = in.value.dim(0), C = in.value.dim(1), H = in.value.dim(2), W = in.value.dim(3);
    const int K = wt.value.dim(0), kh = wt.value.dim(2), kw = wt.value.dim(3);
    const int Ho = self.value.dim(2), Wo = self.value.dim(3);
    const T* g = self.grad.data();
    const T* xd = in.value.data();
    const T* wd = wt.value.data();
    T* gx = in.grad.data();
    T* gw = wt.grad.data();
    T* gb = bs.grad.data();
    for (int n = 0; n < N; ++n) {
      for (int k = 0; k < K; ++k) {
        for (int oh = 0; oh < Ho; ++oh) {
          const int ih0 = oh * stride - pad;
          for (int ow = 0; ow < Wo; ++ow) {
            const int iw0 = ow * stride - pad;
            const T go = g[((static_cast<int64_t>(n) * K + k) * Ho + oh) * Wo + ow];
            if (go == T(0)) continue;
            gb[k] += go;
            for (int c = 0; c < C; ++c) {
              const int64_t xoff = ((static_cast<int64_t>(n) * C + c) * H) * W;
              const int64_t woff = ((static_cast<int64_t>(k) * C + c) * kh) * kw;
              for (int i = 0; i < kh; ++i) {
                const int ih = ih0 + i;
                if (ih < 0 || ih >= H) continue;
                for (int j = 0; j < kw; ++j) {
                  const int iw = iw0 + j;
                  if (iw < 0 || iw >= W) continue;
                  gw[woff + static_cast<int64_t>(i) * kw + j] += go * xd[xoff + static_cast<int64_t>(ih) * W + iw];
                  gx[xoff + static_cast<int64_t>(ih) * W + iw] += go * wd[woff + static_cast<int64_t>(i) * kw + j];
                }
              }
            }
          }
        }
      }
    }
  };
  return make_op_node<T>(std::move(out), {input, weight, bias}, fn);
}

// ---------------------------------------------------------------------------
// linear: out[n,m] = sum_d x[n,d] * w[m,d] + b[m]
// ---------------------------------------------------------------------------

template <typename T>
NodePtrT<T> linear(const NodePtrT<T>& x, const NodePtrT<T>& weight, const NodePtrT<T>& bias) {
  const TensorT<T>& xv = x->value;
  const TensorT<T>& wv = weight->value;
  const TensorT<T>& bv = bias->value;
  QM_CHECK_SHAPE(xv.rank() == 2, "linear: input rank " + std::to_string(xv.rank()) + " != 2");
  QM_CHECK_SHAPE(wv.rank() == 2, "linear: weight rank " + std::to_string(wv.rank()) + " != 2");
  const int N = xv.dim(0), D = xv.dim(1), M = wv.dim(0);
  QM_CHECK_SHAPE(wv.dim(1) == D, "linear: weight inner dim " + std::to_string(wv.dim(1)) +
                                     " != input dim " + std::to_string(D));
  QM_CHECK_SHAPE(bv.rank() == 1 && bv.dim(0) == M,
                 "linear: bias shape " + shape_to_string(bv.shape()) + " != [" + std::to_string(M) + "]");

  TensorT<T> out({N, M});
  for (int n = 0; n < N; ++n) {
    const T* xr = xv.data() + static_cast<int64_t>(n) * D;
    for (int m = 0; m < M; ++m) {
      const T* wr = wv.data() + static_cast<int64_t>(m) * D;
      T acc = bv[m];
      for (int d = 0; d < D; ++d) acc += xr[d] * wr[d];
      out(n, m) = acc;
    }
  }
  return make_op_node<T>(std::move(out), {x, weight, bias}, [](NodeT<T>& self) {
    NodeT<T>& in = *self.parents[0];
    NodeT<T>& wt = *self.parents[1];
    NodeT<T>& bs = *self.parents[2];
    const int N = in.value.dim(0), D = in.value.dim(1), M = wt.value.dim(0);
    for (int n = 0; n < N; ++n) {
      const T* xr = in.value.data() + static_cast<int64_t>(n) * D;
      T* gxr = in.grad.data() + static_cast<int64_t>(n) * D;
      for (int m = 0; m < M; ++m) {
        const T go = self.grad(n, m);
        if (go == T(0)) continue;
        const T* wr = wt.value.data() + static_cast<int64_t>(m) * D;
        T* gwr = wt.grad.data() + static_cast<int64_t>(m) * D;
        bs.grad[m] += go;
        for (int d = 0; d < D; ++d) {
          gxr[d] += go * wr[d];
          gwr[d] += go * xr[d];
        }
      }
    }
  });
}

// ---------------------------------------------------------------------------
// softmax cross-entropy, mean over rows
// ---------------------------------------------------------------------------

template <typename T>
NodePtrT<T> softmax_cross_entropy(const NodePtrT<T>& logits, const std::vector<int>& labels) {
  const TensorT<T>& lv = logits->value;
  QM_CHECK_SHAPE(lv.rank() == 2, "softmax_cross_entropy: logits rank " + std::to_string(lv.rank()) + " != 2");
  const int N = lv.dim(0), K = lv.dim(1);
  QM_CHECK_SHAPE(static_cast<int>(labels.size()) == N,
                 "softmax_cross_entropy: " + std::to_string(labels.size()) + " labels for " +
                     std::to_string(N) + " rows");
  for (int n = 0; n < N; ++n)
    QM_CHECK(labels[n] >= 0 && labels[n] < K, "softmax_cross_entropy: label " + std::to_string(labels[n]) +
                                                  " out of range [0," + std::to_string(K) + ") at row " +
                                                  std::to_string(n));

  TensorT<T> probs({N, K});
  T loss = 0;
  for (int n = 0; n < N; ++n) {
    const T* row = lv.data() + static_cast<int64_t>(n) * K;
    T m = row[0];
    for (int k = 1; k < K; ++k) m = std::max(m, row[k]);
    T z = 0;
    for (int k = 0; k < K; ++k) z += std::exp(row[k] - m);
    const T logz = std::log(z);
    for (int k = 0; k < K; ++k) probs(n, k) = std::exp(row[k] - m) / z;
    loss += -(row[labels[n]] - m - logz);
  }
  loss /= static_cast<T>(N);

  auto fn = [probs = std::move(probs), labels](NodeT<T>& self) {
    NodeT<T>& in = *self.parents[0];
    const int N = in.value.dim(0), K = in.value.dim(1);
    const T g = self.grad[0] / static_cast<T>(N);
    T* gx = in.grad.data();
    for (int n = 0; n < N; ++n)
      for (int k = 0; k < K; ++k)
        gx[static_cast<int64_t>(n) * K + k] += g * (probs(n, k) - (k == labels[n] ? T(1) : T(0)));
  };
  return make_op_node<T>(TensorT<T>::scalar(loss), {logits}, std::move(fn));
}

// ---------------------------------------------------------------------------
// smooth L1 (Huber, transition 1.0): sum over box coordinates, mean over rows
// ---------------------------------------------------------------------------

template <typename T>
NodePtrT<T> smooth_l1(const NodePtrT<T>& pred, const TensorT<T>& target) {
  const TensorT<T>& pv = pred->value;
  QM_CHECK_SHAPE(pv.same_shape(target), "smooth_l1: pred " + shape_to_string(pv.shape()) +
                                            " vs target " + shape_to_string(target.shape()));
  QM_CHECK_SHAPE(pv.rank() == 2, "smooth_l1: rank " + std::to_string(pv.rank()) + " != 2");
  const int N = pv.dim(0);
  T loss = 0;
  for (int64_t i = 0; i < pv.size(); ++i) {
    const T d = pv[i] - target[i];
    const T a = std::abs(d);
    loss += a <= T(1) ? T(0.5) * d * d : a - T(0.5);
  }
  loss /= static_cast<T>(N);

  auto fn = [target](NodeT<T>& self) {
    NodeT<T>& in = *self.parents[0];
    const int N = in.value.dim(0);
    const T g = self.grad[0] / static_cast<T>(N);
    T* gx = in.grad.data();
    for (int64_t i = 0; i < in.value.size(); ++i) {
      const T d = in.value[i] - target[i];
      gx[i] += g * (std::abs(d) <= T(1) ? d : (d > T(0) ? T(1) : T(-1)));
    }
  };
  return make_op_node<T>(TensorT<T>::scalar(loss), {pred}, std::move(fn));
}

// ---------------------------------------------------------------------------
// backward and SGD
// ---------------------------------------------------------------------------

template <typename T>
std::vector<NodeT<T>*> topo_order(NodeT<T>* root) {
  std::vector<NodeT<T>*> order;
  std::unordered_set<NodeT<T>*> done;
  // Iterative post-order DFS; graphs can be a few thousand nodes deep.
  std::vector<std::pair<NodeT<T>*, size_t>> stack{{root, 0}};
  std::unordered_set<NodeT<T>*> open{root};
  while (!stack.empty()) {
    auto& [node, next] = stack.back();
    if (next < node->parents.size()) {
      NodeT<T>* p = node->parents[next++].get();
      if (!done.count(p) && !open.count(p)) {
        open.insert(p);
        stack.emplace_back(p, 0);
      }
    } else {
      done.insert(node);
      order.push_back(node);
      stack.pop_back();
    }
  }
  return order;  // parents before children
}

// Populates gradients of everything reachable from `loss`. Interior node
// gradients are recomputed per call; leaf gradients accumulate, so calling
// backward twice without zeroing doubles them. Each pass sums from zero in
// an identical order and the previous accumulation is added back in one
// rounding step, which keeps the doubling bit-exact.
template <typename T>
void backward(const NodePtrT<T>& loss) {
  QM_CHECK_SHAPE(loss->value.size() == 1,
                 "backward: root must be scalar, got " + shape_to_string(loss->value.shape()));
  auto order = topo_order<T>(loss.get());
  if (loss->is_leaf()) {
    loss->grad[0] += T(1);
    return;
  }
  std::vector<std::pair<NodeT<T>*, TensorT<T>>> stash;
  for (NodeT<T>* n : order) {
    if (n->is_leaf()) {
      stash.emplace_back(n, std::move(n->grad));
      n->grad = TensorT<T>(n->value.shape());
    } else {
      n->grad.zero();
    }
  }
  loss->grad[0] = T(1);
  for (auto it = order.rbegin(); it != order.rend(); ++it)
    if (!(*it)->is_leaf()) (*it)->backward_fn(**it);
  for (auto& [n, prev] : stash)
    for (int64_t i = 0; i < prev.size(); ++i) n->grad[i] += prev[i];
}

// In-place momentum update: v <- m*v + g + wd*p; p <- p - lr*v. Gradients are
// zeroed afterwards.
template <typename T>
void sgd_step(const std::vector<NodePtrT<T>>& params, T lr, T momentum, T weight_decay) {
  for (const auto& p : params) {
    if (!p->grad.all_finite())
      throw NumericError("sgd_step: non-finite gradient in parameter '" +
                         (p->name.empty() ? std::string("<unnamed>") : p->name) + "'");
    if (p->velocity.size() != p->value.size()) p->velocity = TensorT<T>(p->value.shape());
    T* v = p->velocity.data();
    T* g = p->grad.data();
    T* w = p->value.data();
    for (int64_t i = 0; i < p->value.size(); ++i) {
      v[i] = momentum * v[i] + g[i] + weight_decay * w[i];
      w[i] -= lr * v[i];
      g[i] = T(0);
    }
  }
}

template <typename T>
void zero_grad(const std::vector<NodePtrT<T>>& params) {
  for (const auto& p : params) p->grad.zero();
}

}  // namespace qm
