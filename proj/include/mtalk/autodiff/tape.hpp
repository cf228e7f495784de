#pragma once

#include <functional>
#include <span>
#include <vector>

#include "mtalk/autodiff/tensor.hpp"

namespace mtalk::ad {

template <typename T>
class Tape;

// Handle to a node recorded on a tape.
struct Var {
  int id = -1;
  bool valid() const { return id >= 0; }
};

// Reverse-mode tape over dense arrays.
//
// Nodes are appended in evaluation order, so ids are a topological order and
// backward() simply walks them in reverse. Every reduction inside a kernel
// runs in index-ascending order; two identical tapes yield bitwise-identical
// gradients.
template <typename T>
class Tape {
 public:
  using TensorT = Tensor<T>;

  Tape() = default;
  Tape(const Tape&) = delete;
  Tape& operator=(const Tape&) = delete;

  // Leaves.
  Var constant(TensorT value);
  Var input(TensorT value);  // differentiable leaf; read its gradient with grad()
  Var param(Parameter<T>& p, bool trainable = true);

  const TensorT& value(Var v) const;
  // Gradient of the last backward() with respect to v (zeros if none flowed).
  const TensorT& grad(Var v) const;
  bool requires_grad(Var v) const { return nodes_.at(v.id).requires_grad; }
  std::size_t size() const { return nodes_.size(); }

  // Populates grad() for every node and accumulates into bound parameters.
  void backward(Var loss);

  // --- primitives -------------------------------------------------------
  Var matmul(Var a, Var b);     // [n,k] x [k,m] -> [n,m]
  Var matmul_nt(Var a, Var b);  // [n,k] x [m,k]^T -> [n,m]
  Var transpose(Var a);         // 2-D
  Var add(Var a, Var b);
  Var sub(Var a, Var b);
  Var mul(Var a, Var b);
  Var add_row(Var x, Var bias);  // x [n,m] + bias [m] on every row
  Var scale(Var a, T c);
  Var relu(Var a);
  Var gelu(Var a);              // exact erf form
  Var softmax_rows(Var a);
  // Row i may attend to columns j <= i + offset; later columns get probability 0.
  Var causal_softmax(Var scores, int offset = 0);
  Var layer_norm(Var x, Var gamma, Var beta, T eps = T(1e-5));
  // x [len, c_in], w [kernel*c_in, c_out] (row = tap*c_in + channel), b [c_out].
  Var conv1d(Var x, Var w, Var b, int kernel, int stride, int pad);
  Var upsample(Var x, int factor);  // nearest-neighbour along rows
  Var embedding(Var table, std::span<const int> ids);
  // Masked mean negative log-likelihood over rows; mask-0 rows contribute exactly 0.
  Var cross_entropy(Var logits, std::span<const int> targets, std::span<const T> mask);
  Var sum(Var a);
  Var mean(Var a);
  Var mse(Var a, Var b);  // mean((a-b)^2)
  Var stop_gradient(Var a);
  // Value of `quantized`, gradient routed to `pre` unchanged.
  Var straight_through(Var pre, Var quantized);
  Var slice_rows(Var a, int start, int count);
  Var slice_cols(Var a, int start, int count);
  Var concat_rows(std::span<const Var> parts);
  Var concat_cols(std::span<const Var> parts);
  // Copy of x whose rows at `positions` are taken from consecutive rows of src.
  Var replace_rows(Var x, std::span<const int> positions, Var src);

 private:
  struct Node {
    TensorT value;
    const TensorT* ref = nullptr;  // parameter leaves alias their storage
    TensorT grad;
    bool requires_grad = false;
    Parameter<T>* param = nullptr;
    std::function<void(Tape&, int)> backward;
  };

  Var push(TensorT value, bool requires_grad, std::function<void(Tape&, int)> bw);
  TensorT& grad_buffer(int id);
  bool needs(Var v) const { return nodes_[v.id].requires_grad; }
  const Node& node(Var v) const;

  std::vector<Node> nodes_;
  TensorT empty_;
};

extern template class Tape<float>;
extern template class Tape<double>;

}  // namespace mtalk::ad
