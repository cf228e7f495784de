#include "mtalk/autodiff/tape.hpp"

#include <Eigen/Core>
#include <algorithm>
#include <cmath>
#include <sstream>

namespace mtalk::ad {

std::string shape_str(const Shape& shape) {
  std::ostringstream os;
  os << '[';
  for (std::size_t i = 0; i < shape.size(); ++i) os << (i ? "," : "") << shape[i];
  os << ']';
  return os.str();
}

namespace {

template <typename T>
using RowMat = Eigen::Matrix<T, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
template <typename T>
using CMap = Eigen::Map<const RowMat<T>>;
template <typename T>
using MMap = Eigen::Map<RowMat<T>>;

template <typename T>
CMap<T> as_mat(const Tensor<T>& t) {
  return CMap<T>(t.ptr(), t.rows(), t.cols());
}
template <typename T>
MMap<T> as_mat(Tensor<T>& t) {
  return MMap<T>(t.ptr(), t.rows(), t.cols());
}

void check_same(const Shape& a, const Shape& b, const char* op) {
  if (a != b) throw ShapeError(std::string(op) + ": shape mismatch " + shape_str(a) + " vs " + shape_str(b));
}

template <typename T>
T gelu_value(T x) {
  return T(0.5) * x * (T(1) + std::erf(x * T(0.70710678118654752440)));
}
template <typename T>
T gelu_deriv(T x) {
  const T cdf = T(0.5) * (T(1) + std::erf(x * T(0.70710678118654752440)));
  const T pdf = std::exp(T(-0.5) * x * x) * T(0.39894228040143267794);
  return cdf + x * pdf;
}

}  // namespace

template <typename T>
const typename Tape<T>::Node& Tape<T>::node(Var v) const {
  if (v.id < 0 || static_cast<std::size_t>(v.id) >= nodes_.size()) throw InvalidArgument("tape: invalid variable id");
  return nodes_[v.id];
}

template <typename T>
Var Tape<T>::push(TensorT value, bool requires_grad, std::function<void(Tape&, int)> bw) {
  Node n;
  n.value = std::move(value);
  n.requires_grad = requires_grad;
  if (requires_grad) n.backward = std::move(bw);
  nodes_.push_back(std::move(n));
  return Var{static_cast<int>(nodes_.size()) - 1};
}

template <typename T>
Tensor<T>& Tape<T>::grad_buffer(int id) {
  Node& n = nodes_[id];
  if (n.grad.empty()) n.grad = TensorT(n.ref ? n.ref->shape : n.value.shape);
  return n.grad;
}

template <typename T>
const Tensor<T>& Tape<T>::value(Var v) const {
  const Node& n = node(v);
  return n.ref ? *n.ref : n.value;
}

template <typename T>
const Tensor<T>& Tape<T>::grad(Var v) const {
  node(v);
  return const_cast<Tape*>(this)->grad_buffer(v.id);
}

template <typename T>
Var Tape<T>::constant(TensorT value) {
  return push(std::move(value), false, nullptr);
}

template <typename T>
Var Tape<T>::input(TensorT value) {
  Var v = push(std::move(value), true, nullptr);
  return v;
}

template <typename T>
Var Tape<T>::param(Parameter<T>& p, bool trainable) {
  Node n;
  n.ref = &p.value;
  n.requires_grad = trainable;
  n.param = trainable ? &p : nullptr;
  nodes_.push_back(std::move(n));
  return Var{static_cast<int>(nodes_.size()) - 1};
}

template <typename T>
void Tape<T>::backward(Var loss) {
  const TensorT& lv = value(loss);
  require<ShapeError>(lv.size() == 1, "backward: loss must be a scalar, got shape " + shape_str(lv.shape));
  for (auto& n : nodes_) n.grad = TensorT();
  grad_buffer(loss.id)[0] = T(1);
  for (int i = loss.id; i >= 0; --i) {
    Node& n = nodes_[i];
    if (!n.requires_grad || n.grad.empty()) continue;
    if (n.backward) n.backward(*this, i);
    if (n.param) {
      auto& pg = n.param->grad;
      for (std::size_t k = 0; k < pg.size(); ++k) pg[k] += n.grad[k];
    }
  }
}

// --- linear algebra ---------------------------------------------------------

template <typename T>
Var Tape<T>::matmul(Var a, Var b) {
  const TensorT& A = value(a);
  const TensorT& B = value(b);
  require<ShapeError>(A.shape.size() == 2 && B.shape.size() == 2 && A.shape[1] == B.shape[0],
                      "matmul: incompatible shapes " + shape_str(A.shape) + " x " + shape_str(B.shape));
  TensorT C({A.shape[0], B.shape[1]});
  as_mat(C).noalias() = as_mat(A) * as_mat(B);
  return push(std::move(C), needs(a) || needs(b), [a, b](Tape& t, int self) {
    const TensorT& G = t.nodes_[self].grad;
    if (t.needs(a)) as_mat(t.grad_buffer(a.id)).noalias() += as_mat(G) * as_mat(t.value(b)).transpose();
    if (t.needs(b)) as_mat(t.grad_buffer(b.id)).noalias() += as_mat(t.value(a)).transpose() * as_mat(G);
  });
}

template <typename T>
Var Tape<T>::matmul_nt(Var a, Var b) {
  const TensorT& A = value(a);
  const TensorT& B = value(b);
  require<ShapeError>(A.shape.size() == 2 && B.shape.size() == 2 && A.shape[1] == B.shape[1],
                      "matmul_nt: incompatible shapes " + shape_str(A.shape) + " x " + shape_str(B.shape) + "^T");
  TensorT C({A.shape[0], B.shape[0]});
  as_mat(C).noalias() = as_mat(A) * as_mat(B).transpose();
  return push(std::move(C), needs(a) || needs(b), [a, b](Tape& t, int self) {
    const TensorT& G = t.nodes_[self].grad;
    if (t.needs(a)) as_mat(t.grad_buffer(a.id)).noalias() += as_mat(G) * as_mat(t.value(b));
    if (t.needs(b)) as_mat(t.grad_buffer(b.id)).noalias() += as_mat(G).transpose() * as_mat(t.value(a));
  });
}

template <typename T>
Var Tape<T>::transpose(Var a) {
  const TensorT& A = value(a);
  require<ShapeError>(A.shape.size() == 2, "transpose: expects a 2-D array");
  TensorT C({A.shape[1], A.shape[0]});
  as_mat(C) = as_mat(A).transpose();
  return push(std::move(C), needs(a), [a](Tape& t, int self) {
    as_mat(t.grad_buffer(a.id)) += as_mat(t.nodes_[self].grad).transpose();
  });
}

// --- elementwise --------------------------------------------------------------

template <typename T>
Var Tape<T>::add(Var a, Var b) {
  const TensorT& A = value(a);
  const TensorT& B = value(b);
  check_same(A.shape, B.shape, "add");
  TensorT C(A.shape);
  for (std::size_t i = 0; i < C.size(); ++i) C[i] = A[i] + B[i];
  return push(std::move(C), needs(a) || needs(b), [a, b](Tape& t, int self) {
    const TensorT& G = t.nodes_[self].grad;
    for (Var v : {a, b}) {
      if (!t.needs(v)) continue;
      auto& g = t.grad_buffer(v.id);
      for (std::size_t i = 0; i < g.size(); ++i) g[i] += G[i];
    }
  });
}

template <typename T>
Var Tape<T>::sub(Var a, Var b) {
  const TensorT& A = value(a);
  const TensorT& B = value(b);
  check_same(A.shape, B.shape, "sub");
  TensorT C(A.shape);
  for (std::size_t i = 0; i < C.size(); ++i) C[i] = A[i] - B[i];
  return push(std::move(C), needs(a) || needs(b), [a, b](Tape& t, int self) {
    const TensorT& G = t.nodes_[self].grad;
    if (t.needs(a)) {
      auto& g = t.grad_buffer(a.id);
      for (std::size_t i = 0; i < g.size(); ++i) g[i] += G[i];
    }
    if (t.needs(b)) {
      auto& g = t.grad_buffer(b.id);
      for (std::size_t i = 0; i < g.size(); ++i) g[i] -= G[i];
    }
  });
}

template <typename T>
Var Tape<T>::mul(Var a, Var b) {
  const TensorT& A = value(a);
  const TensorT& B = value(b);
  check_same(A.shape, B.shape, "mul");
  TensorT C(A.shape);
  for (std::size_t i = 0; i < C.size(); ++i) C[i] = A[i] * B[i];
  return push(std::move(C), needs(a) || needs(b), [a, b](Tape& t, int self) {
    const TensorT& G = t.nodes_[self].grad;
    if (t.needs(a)) {
      auto& g = t.grad_buffer(a.id);
      const auto& B = t.value(b);
      for (std::size_t i = 0; i < g.size(); ++i) g[i] += G[i] * B[i];
    }
    if (t.needs(b)) {
      auto& g = t.grad_buffer(b.id);
      const auto& A = t.value(a);
      for (std::size_t i = 0; i < g.size(); ++i) g[i] += G[i] * A[i];
    }
  });
}

template <typename T>
Var Tape<T>::add_row(Var x, Var bias) {
  const TensorT& X = value(x);
  const TensorT& B = value(bias);
  require<ShapeError>(static_cast<int>(B.size()) == X.cols(),
                      "add_row: bias " + shape_str(B.shape) + " does not match rows of " + shape_str(X.shape));
  TensorT C(X.shape);
  const int n = X.rows(), m = X.cols();
  for (int r = 0; r < n; ++r)
    for (int c = 0; c < m; ++c) C.at(r, c) = X.at(r, c) + B[c];
  return push(std::move(C), needs(x) || needs(bias), [x, bias](Tape& t, int self) {
    const TensorT& G = t.nodes_[self].grad;
    if (t.needs(x)) {
      auto& g = t.grad_buffer(x.id);
      for (std::size_t i = 0; i < g.size(); ++i) g[i] += G[i];
    }
    if (t.needs(bias)) {
      auto& g = t.grad_buffer(bias.id);
      const int rows = G.rows(), cols = G.cols();
      for (int r = 0; r < rows; ++r)
        for (int c = 0; c < cols; ++c) g[c] += G.at(r, c);
    }
  });
}

template <typename T>
Var Tape<T>::scale(Var a, T c) {
  const TensorT& A = value(a);
  TensorT C(A.shape);
  for (std::size_t i = 0; i < C.size(); ++i) C[i] = A[i] * c;
  return push(std::move(C), needs(a), [a, c](Tape& t, int self) {
    const TensorT& G = t.nodes_[self].grad;
    auto& g = t.grad_buffer(a.id);
    for (std::size_t i = 0; i < g.size(); ++i) g[i] += G[i] * c;
  });
}

template <typename T>
Var Tape<T>::relu(Var a) {
  const TensorT& A = value(a);
  TensorT C(A.shape);
  for (std::size_t i = 0; i < C.size(); ++i) C[i] = A[i] > T(0) ? A[i] : T(0);
  return push(std::move(C), needs(a), [a](Tape& t, int self) {
    const TensorT& G = t.nodes_[self].grad;
    const auto& A = t.value(a);
    auto& g = t.grad_buffer(a.id);
    for (std::size_t i = 0; i < g.size(); ++i)
      if (A[i] > T(0)) g[i] += G[i];
  });
}

template <typename T>
Var Tape<T>::gelu(Var a) {
  const TensorT& A = value(a);
  TensorT C(A.shape);
  for (std::size_t i = 0; i < C.size(); ++i) C[i] = gelu_value(A[i]);
  return push(std::move(C), needs(a), [a](Tape& t, int self) {
    const TensorT& G = t.nodes_[self].grad;
    const auto& A = t.value(a);
    auto& g = t.grad_buffer(a.id);
    for (std::size_t i = 0; i < g.size(); ++i) g[i] += G[i] * gelu_deriv(A[i]);
  });
}

// --- normalization ----------------------------------------------------------

namespace {

template <typename T>
void softmax_row(const T* in, T* out, int n) {
  T mx = in[0];
  for (int j = 1; j < n; ++j) mx = std::max(mx, in[j]);
  T s = 0;
  for (int j = 0; j < n; ++j) {
    out[j] = std::exp(in[j] - mx);
    s += out[j];
  }
  for (int j = 0; j < n; ++j) out[j] /= s;
}

template <typename T>
void softmax_row_backward(const T* p, const T* dy, T* dx, int n) {
  T dot = 0;
  for (int j = 0; j < n; ++j) dot += dy[j] * p[j];
  for (int j = 0; j < n; ++j) dx[j] += p[j] * (dy[j] - dot);
}

}  // namespace

template <typename T>
Var Tape<T>::softmax_rows(Var a) {
  const TensorT& A = value(a);
  TensorT C(A.shape);
  const int n = A.rows(), m = A.cols();
  for (int r = 0; r < n; ++r) softmax_row(&A.at(r, 0), &C.at(r, 0), m);
  return push(std::move(C), needs(a), [a](Tape& t, int self) {
    const Node& nd = t.nodes_[self];
    auto& g = t.grad_buffer(a.id);
    const int rows = nd.value.rows(), cols = nd.value.cols();
    for (int r = 0; r < rows; ++r) softmax_row_backward(&nd.value.at(r, 0), &nd.grad.at(r, 0), &g.at(r, 0), cols);
  });
}

template <typename T>
Var Tape<T>::causal_softmax(Var scores, int offset) {
  const TensorT& A = value(scores);
  require<ShapeError>(A.shape.size() == 2, "causal_softmax: expects a 2-D array");
  TensorT C(A.shape);
  const int n = A.rows(), m = A.cols();
  for (int r = 0; r < n; ++r) {
    const int valid = std::clamp(r + offset + 1, 1, m);
    softmax_row(&A.at(r, 0), &C.at(r, 0), valid);
  }
  return push(std::move(C), needs(scores), [scores, offset](Tape& t, int self) {
    const Node& nd = t.nodes_[self];
    auto& g = t.grad_buffer(scores.id);
    const int rows = nd.value.rows(), cols = nd.value.cols();
    for (int r = 0; r < rows; ++r) {
      const int valid = std::clamp(r + offset + 1, 1, cols);
      softmax_row_backward(&nd.value.at(r, 0), &nd.grad.at(r, 0), &g.at(r, 0), valid);
    }
  });
}

template <typename T>
Var Tape<T>::layer_norm(Var x, Var gamma, Var beta, T eps) {
  const TensorT& X = value(x);
  const TensorT& Gm = value(gamma);
  const TensorT& Bt = value(beta);
  const int n = X.rows(), m = X.cols();
  require<ShapeError>(static_cast<int>(Gm.size()) == m && static_cast<int>(Bt.size()) == m,
                      "layer_norm: affine parameters do not match width " + std::to_string(m));
  TensorT C(X.shape);
  std::vector<T> xhat(X.size()), inv_std(n);
  for (int r = 0; r < n; ++r) {
    T mu = 0;
    for (int c = 0; c < m; ++c) mu += X.at(r, c);
    mu /= m;
    T var = 0;
    for (int c = 0; c < m; ++c) {
      const T d = X.at(r, c) - mu;
      var += d * d;
    }
    var /= m;
    inv_std[r] = T(1) / std::sqrt(var + eps);
    for (int c = 0; c < m; ++c) {
      const T h = (X.at(r, c) - mu) * inv_std[r];
      xhat[static_cast<std::size_t>(r) * m + c] = h;
      C.at(r, c) = h * Gm[c] + Bt[c];
    }
  }
  return push(std::move(C), needs(x) || needs(gamma) || needs(beta),
              [x, gamma, beta, xhat = std::move(xhat), inv_std = std::move(inv_std), n, m](Tape& t, int self) {
                const TensorT& G = t.nodes_[self].grad;
                const auto& Gm = t.value(gamma);
                if (t.needs(gamma) || t.needs(beta)) {
                  TensorT* gg = t.needs(gamma) ? &t.grad_buffer(gamma.id) : nullptr;
                  TensorT* gb = t.needs(beta) ? &t.grad_buffer(beta.id) : nullptr;
                  for (int r = 0; r < n; ++r)
                    for (int c = 0; c < m; ++c) {
                      const std::size_t k = static_cast<std::size_t>(r) * m + c;
                      if (gg) (*gg)[c] += G[k] * xhat[k];
                      if (gb) (*gb)[c] += G[k];
                    }
                }
                if (t.needs(x)) {
                  auto& gx = t.grad_buffer(x.id);
                  std::vector<T> dxh(m);
                  for (int r = 0; r < n; ++r) {
                    T mean_d = 0, mean_dx = 0;
                    for (int c = 0; c < m; ++c) {
                      const std::size_t k = static_cast<std::size_t>(r) * m + c;
                      dxh[c] = G[k] * Gm[c];
                      mean_d += dxh[c];
                      mean_dx += dxh[c] * xhat[k];
                    }
                    mean_d /= m;
                    mean_dx /= m;
                    for (int c = 0; c < m; ++c) {
                      const std::size_t k = static_cast<std::size_t>(r) * m + c;
                      gx[k] += inv_std[r] * (dxh[c] - mean_d - xhat[k] * mean_dx);
                    }
                  }
                }
              });
}

// --- convolution ------------------------------------------------------------

template <typename T>
Var Tape<T>::conv1d(Var x, Var w, Var b, int kernel, int stride, int pad) {
  const TensorT& X = value(x);
  const TensorT& W = value(w);
  const TensorT& B = value(b);
  require(kernel >= 1 && stride >= 1 && pad >= 0, "conv1d: invalid kernel/stride/padding");
  require<ShapeError>(X.shape.size() == 2, "conv1d: input must be [length, channels]");
  const int len = X.rows(), cin = X.cols();
  require<ShapeError>(W.shape.size() == 2 && W.shape[0] == kernel * cin,
                      "conv1d: weight " + shape_str(W.shape) + " does not match kernel " + std::to_string(kernel) +
                          " x channels " + std::to_string(cin));
  const int cout = W.shape[1];
  require<ShapeError>(static_cast<int>(B.size()) == cout, "conv1d: bias does not match output channels");
  const int span = len + 2 * pad - kernel;
  require<ShapeError>(span >= 0, "conv1d: input shorter than kernel");
  const int out_len = span / stride + 1;

  TensorT cols({out_len, kernel * cin});
  for (int o = 0; o < out_len; ++o)
    for (int k = 0; k < kernel; ++k) {
      const int src = o * stride - pad + k;
      if (src < 0 || src >= len) continue;
      std::copy_n(&X.at(src, 0), cin, &cols.at(o, k * cin));
    }
  TensorT C({out_len, cout});
  auto cm = as_mat(C);
  cm.noalias() = as_mat(cols) * as_mat(W);
  for (int o = 0; o < out_len; ++o)
    for (int c = 0; c < cout; ++c) C.at(o, c) += B[c];

  return push(std::move(C), needs(x) || needs(w) || needs(b),
              [x, w, b, kernel, stride, pad, len, cin, out_len, cols = std::move(cols)](Tape& t, int self) {
                const TensorT& G = t.nodes_[self].grad;
                if (t.needs(w)) as_mat(t.grad_buffer(w.id)).noalias() += as_mat(cols).transpose() * as_mat(G);
                if (t.needs(b)) {
                  auto& gb = t.grad_buffer(b.id);
                  const int cout = G.cols();
                  for (int o = 0; o < out_len; ++o)
                    for (int c = 0; c < cout; ++c) gb[c] += G.at(o, c);
                }
                if (t.needs(x)) {
                  TensorT dcols({out_len, kernel * cin});
                  as_mat(dcols).noalias() = as_mat(G) * as_mat(t.value(w)).transpose();
                  auto& gx = t.grad_buffer(x.id);
                  for (int o = 0; o < out_len; ++o)
                    for (int k = 0; k < kernel; ++k) {
                      const int src = o * stride - pad + k;
                      if (src < 0 || src >= len) continue;
                      const T* d = &dcols.at(o, k * cin);
                      T* g = &gx.at(src, 0);
                      for (int c = 0; c < cin; ++c) g[c] += d[c];
                    }
                }
              });
}

template <typename T>
Var Tape<T>::upsample(Var x, int factor) {
  const TensorT& X = value(x);
  require(factor >= 1, "upsample: factor must be positive");
  const int n = X.rows(), m = X.cols();
  TensorT C({n * factor, m});
  for (int r = 0; r < n; ++r)
    for (int f = 0; f < factor; ++f) std::copy_n(&X.at(r, 0), m, &C.at(r * factor + f, 0));
  return push(std::move(C), needs(x), [x, factor, n, m](Tape& t, int self) {
    const TensorT& G = t.nodes_[self].grad;
    auto& g = t.grad_buffer(x.id);
    for (int r = 0; r < n; ++r)
      for (int f = 0; f < factor; ++f)
        for (int c = 0; c < m; ++c) g.at(r, c) += G.at(r * factor + f, c);
  });
}

// --- lookup and losses --------------------------------------------------------

template <typename T>
Var Tape<T>::embedding(Var table, std::span<const int> ids) {
  const TensorT& E = value(table);
  const int vocab = E.rows(), dim = E.cols();
  require(!ids.empty(), "embedding: empty id list");
  TensorT C({static_cast<int>(ids.size()), dim});
  for (std::size_t i = 0; i < ids.size(); ++i) {
    require<ShapeError>(ids[i] >= 0 && ids[i] < vocab,
                        "embedding: id " + std::to_string(ids[i]) + " outside table of " + std::to_string(vocab));
    std::copy_n(&E.at(ids[i], 0), dim, &C.at(static_cast<int>(i), 0));
  }
  std::vector<int> saved(ids.begin(), ids.end());
  return push(std::move(C), needs(table), [table, saved = std::move(saved), dim](Tape& t, int self) {
    const TensorT& G = t.nodes_[self].grad;
    auto& g = t.grad_buffer(table.id);
    for (std::size_t i = 0; i < saved.size(); ++i) {
      const T* src = &G.at(static_cast<int>(i), 0);
      T* dst = &g.at(saved[i], 0);
      for (int c = 0; c < dim; ++c) dst[c] += src[c];
    }
  });
}

template <typename T>
Var Tape<T>::cross_entropy(Var logits, std::span<const int> targets, std::span<const T> mask) {
  const TensorT& L = value(logits);
  const int n = L.rows(), vocab = L.cols();
  require<ShapeError>(static_cast<int>(targets.size()) == n && static_cast<int>(mask.size()) == n,
                      "cross_entropy: targets/mask length must equal logit rows");
  T denom = 0;
  for (T m : mask) denom += m;
  require(denom > T(0), "cross_entropy: loss mask is all zero");
  TensorT probs(L.shape);
  T total = 0;
  for (int r = 0; r < n; ++r) {
    if (mask[r] == T(0)) continue;
    require<ShapeError>(targets[r] >= 0 && targets[r] < vocab, "cross_entropy: target id out of range");
    softmax_row(&L.at(r, 0), &probs.at(r, 0), vocab);
    T mx = L.at(r, 0);
    for (int c = 1; c < vocab; ++c) mx = std::max(mx, L.at(r, c));
    T s = 0;
    for (int c = 0; c < vocab; ++c) s += std::exp(L.at(r, c) - mx);
    total += mask[r] * (std::log(s) + mx - L.at(r, targets[r]));
  }
  std::vector<int> tg(targets.begin(), targets.end());
  std::vector<T> mk(mask.begin(), mask.end());
  return push(TensorT::scalar(total / denom), needs(logits),
              [logits, probs = std::move(probs), tg = std::move(tg), mk = std::move(mk), denom](Tape& t, int self) {
                const T up = t.nodes_[self].grad[0] / denom;
                auto& g = t.grad_buffer(logits.id);
                const int rows = probs.rows(), vocab = probs.cols();
                for (int r = 0; r < rows; ++r) {
                  if (mk[r] == T(0)) continue;
                  const T w = up * mk[r];
                  for (int c = 0; c < vocab; ++c) g.at(r, c) += w * probs.at(r, c);
                  g.at(r, tg[r]) -= w;
                }
              });
}

template <typename T>
Var Tape<T>::sum(Var a) {
  const TensorT& A = value(a);
  T s = 0;
  for (T v : A.data) s += v;
  return push(TensorT::scalar(s), needs(a), [a](Tape& t, int self) {
    const T up = t.nodes_[self].grad[0];
    auto& g = t.grad_buffer(a.id);
    for (auto& v : g.data) v += up;
  });
}

template <typename T>
Var Tape<T>::mean(Var a) {
  const TensorT& A = value(a);
  T s = 0;
  for (T v : A.data) s += v;
  const T n = static_cast<T>(A.size());
  return push(TensorT::scalar(s / n), needs(a), [a, n](Tape& t, int self) {
    const T up = t.nodes_[self].grad[0] / n;
    auto& g = t.grad_buffer(a.id);
    for (auto& v : g.data) v += up;
  });
}

template <typename T>
Var Tape<T>::mse(Var a, Var b) {
  const TensorT& A = value(a);
  const TensorT& B = value(b);
  check_same(A.shape, B.shape, "mse");
  T s = 0;
  for (std::size_t i = 0; i < A.size(); ++i) {
    const T d = A[i] - B[i];
    s += d * d;
  }
  const T n = static_cast<T>(A.size());
  return push(TensorT::scalar(s / n), needs(a) || needs(b), [a, b, n](Tape& t, int self) {
    const T up = T(2) * t.nodes_[self].grad[0] / n;
    const auto& A = t.value(a);
    const auto& B = t.value(b);
    if (t.needs(a)) {
      auto& g = t.grad_buffer(a.id);
      for (std::size_t i = 0; i < g.size(); ++i) g[i] += up * (A[i] - B[i]);
    }
    if (t.needs(b)) {
      auto& g = t.grad_buffer(b.id);
      for (std::size_t i = 0; i < g.size(); ++i) g[i] -= up * (A[i] - B[i]);
    }
  });
}

template <typename T>
Var Tape<T>::stop_gradient(Var a) {
  return push(value(a), false, nullptr);
}

template <typename T>
Var Tape<T>::straight_through(Var pre, Var quantized) {
  const TensorT& P = value(pre);
  const TensorT& Qv = value(quantized);
  check_same(P.shape, Qv.shape, "straight_through");
  return push(Qv, needs(pre), [pre](Tape& t, int self) {
    const TensorT& G = t.nodes_[self].grad;
    auto& g = t.grad_buffer(pre.id);
    for (std::size_t i = 0; i < g.size(); ++i) g[i] += G[i];
  });
}

// --- structural ---------------------------------------------------------------

template <typename T>
Var Tape<T>::slice_rows(Var a, int start, int count) {
  const TensorT& A = value(a);
  require<ShapeError>(start >= 0 && count > 0 && start + count <= A.rows(), "slice_rows: range out of bounds");
  const int m = A.cols();
  Shape s = A.shape;
  s[0] = count;
  TensorT C(s);
  std::copy_n(&A.at(start, 0), static_cast<std::size_t>(count) * m, C.ptr());
  return push(std::move(C), needs(a), [a, start, count, m](Tape& t, int self) {
    const TensorT& G = t.nodes_[self].grad;
    auto& g = t.grad_buffer(a.id);
    T* dst = &g.at(start, 0);
    for (std::size_t i = 0; i < static_cast<std::size_t>(count) * m; ++i) dst[i] += G[i];
  });
}

template <typename T>
Var Tape<T>::slice_cols(Var a, int start, int count) {
  const TensorT& A = value(a);
  require<ShapeError>(A.shape.size() == 2 && start >= 0 && count > 0 && start + count <= A.cols(),
                      "slice_cols: range out of bounds");
  const int n = A.rows();
  TensorT C({n, count});
  for (int r = 0; r < n; ++r) std::copy_n(&A.at(r, start), count, &C.at(r, 0));
  return push(std::move(C), needs(a), [a, start, count, n](Tape& t, int self) {
    const TensorT& G = t.nodes_[self].grad;
    auto& g = t.grad_buffer(a.id);
    for (int r = 0; r < n; ++r)
      for (int c = 0; c < count; ++c) g.at(r, start + c) += G.at(r, c);
  });
}

template <typename T>
Var Tape<T>::concat_rows(std::span<const Var> parts) {
  require(!parts.empty(), "concat_rows: no inputs");
  const int m = value(parts[0]).cols();
  int total = 0;
  bool any = false;
  for (Var p : parts) {
    require<ShapeError>(value(p).cols() == m, "concat_rows: column count mismatch");
    total += value(p).rows();
    any = any || needs(p);
  }
  TensorT C({total, m});
  int row = 0;
  for (Var p : parts) {
    const auto& P = value(p);
    std::copy(P.data.begin(), P.data.end(), &C.at(row, 0));
    row += P.rows();
  }
  std::vector<Var> saved(parts.begin(), parts.end());
  return push(std::move(C), any, [saved = std::move(saved), m](Tape& t, int self) {
    const TensorT& G = t.nodes_[self].grad;
    int row = 0;
    for (Var p : saved) {
      const int r = t.value(p).rows();
      if (t.needs(p)) {
        auto& g = t.grad_buffer(p.id);
        const T* src = &G.at(row, 0);
        for (std::size_t i = 0; i < static_cast<std::size_t>(r) * m; ++i) g[i] += src[i];
      }
      row += r;
    }
  });
}

template <typename T>
Var Tape<T>::concat_cols(std::span<const Var> parts) {
  require(!parts.empty(), "concat_cols: no inputs");
  const int n = value(parts[0]).rows();
  int total = 0;
  bool any = false;
  for (Var p : parts) {
    require<ShapeError>(value(p).rows() == n, "concat_cols: row count mismatch");
    total += value(p).cols();
    any = any || needs(p);
  }
  TensorT C({n, total});
  int col = 0;
  for (Var p : parts) {
    const auto& P = value(p);
    const int w = P.cols();
    for (int r = 0; r < n; ++r) std::copy_n(&P.at(r, 0), w, &C.at(r, col));
    col += w;
  }
  std::vector<Var> saved(parts.begin(), parts.end());
  return push(std::move(C), any, [saved = std::move(saved), n](Tape& t, int self) {
    const TensorT& G = t.nodes_[self].grad;
    int col = 0;
    for (Var p : saved) {
      const int w = t.value(p).cols();
      if (t.needs(p)) {
        auto& g = t.grad_buffer(p.id);
        for (int r = 0; r < n; ++r)
          for (int c = 0; c < w; ++c) g.at(r, c) += G.at(r, col + c);
      }
      col += w;
    }
  });
}

template <typename T>
Var Tape<T>::replace_rows(Var x, std::span<const int> positions, Var src) {
  const TensorT& X = value(x);
  const TensorT& S = value(src);
  require<ShapeError>(S.cols() == X.cols(), "replace_rows: width mismatch");
  require<ShapeError>(static_cast<int>(positions.size()) == S.rows(),
                      "replace_rows: " + std::to_string(positions.size()) + " positions for " +
                          std::to_string(S.rows()) + " source rows");
  const int m = X.cols();
  TensorT C = X;
  std::vector<char> replaced(X.rows(), 0);
  for (std::size_t i = 0; i < positions.size(); ++i) {
    const int p = positions[i];
    require<ShapeError>(p >= 0 && p < X.rows(), "replace_rows: position out of range");
    std::copy_n(&S.at(static_cast<int>(i), 0), m, &C.at(p, 0));
    replaced[p] = 1;
  }
  std::vector<int> pos(positions.begin(), positions.end());
  return push(std::move(C), needs(x) || needs(src),
              [x, src, pos = std::move(pos), replaced = std::move(replaced), m](Tape& t, int self) {
                const TensorT& G = t.nodes_[self].grad;
                if (t.needs(x)) {
                  auto& g = t.grad_buffer(x.id);
                  const int rows = G.rows();
                  for (int r = 0; r < rows; ++r) {
                    if (replaced[r]) continue;
                    for (int c = 0; c < m; ++c) g.at(r, c) += G.at(r, c);
                  }
                }
                if (t.needs(src)) {
                  auto& g = t.grad_buffer(src.id);
                  for (std::size_t i = 0; i < pos.size(); ++i)
                    for (int c = 0; c < m; ++c) g.at(static_cast<int>(i), c) += G.at(pos[i], c);
                }
              });
}

template class Tape<float>;
template class Tape<double>;

}  // namespace mtalk::ad
