#pragma once

#include <functional>
#include <memory>
#include <vector>

#include "focalpp/common.hpp"
#include "focalpp/numerics/param_vector.hpp"

namespace focalpp::numerics {

struct Var {
  int id = -1;
  bool valid() const { return id >= 0; }
};

// Reverse-mode tape over dense matrices. Nodes are created in topological
// order, so backward() is a single reverse sweep. Gradients propagate only
// through nodes that (transitively) depend on a gradient-tracked leaf; forward
// passes over constant parameters cost nothing extra on the way back.
class Tape {
 public:
  Var leaf(Matrix value, bool requires_grad = false);
  Var constant(Matrix value) { return leaf(std::move(value), false); }
  Var scalar(double v, bool requires_grad = false) {
    Matrix m(1, 1);
    m(0, 0) = v;
    return leaf(std::move(m), requires_grad);
  }

  // Elementwise; shapes must match.
  Var add(Var a, Var b);
  Var sub(Var a, Var b);
  Var mul(Var a, Var b);
  Var min_elem(Var a, Var b);

  Var matmul(Var a, Var b);
  Var scale(Var a, double c);
  Var add_scalar(Var a, double c);
  Var add_rowvec(Var a, Var row);     // row: 1 x cols(a)
  Var mul_colvec(Var a, Var col);     // col: rows(a) x 1
  Var div_by_scalar(Var a, Var s);    // s: 1 x 1

  Var relu(Var a);
  Var gelu(Var a);
  Var tanh_(Var a);
  Var sigmoid(Var a);
  Var exp_(Var a);
  Var log_(Var a);
  Var softplus(Var a);
  Var square(Var a);
  Var clamp(Var a, double lo, double hi);

  Var sum_all(Var a);    // 1x1
  Var mean_all(Var a);   // 1x1
  Var mean_rows(Var a);  // 1 x cols: column means
  Var row_sum(Var a);    // rows x 1: per-row sum
  Var trace_(Var a);     // 1x1

  Var softmax_rows(Var a);
  Var log_softmax_rows(Var a);

  // Per-row normalization (x - mean) / sqrt(var + eps) * gamma + beta.
  // gamma, beta: 1 x cols.
  Var layer_norm(Var a, Var gamma, Var beta, double eps = 1e-5);

  // rows(a) must be a multiple of group; averages each consecutive group of
  // rows, producing rows(a)/group x cols(a).
  Var mean_pool_groups(Var a, int group);

  // Token embedding for a B x C batch of scalars: out[b*C + j, :] =
  // x(b, j) * W.row(j) + P.row(j). W holds per-coordinate embedding vectors,
  // P the learned positional offsets. Output (B*C) x d.
  Var coordinate_embed(const Matrix& x, Var embed, Var pos);

  // Full (non-causal) multi-head self-attention within each consecutive block
  // of `tokens` rows. q, k, v: (B*tokens) x d with d divisible by heads.
  Var self_attention(Var q, Var k, Var v, int heads, int tokens);

  Var concat_cols(Var a, Var b);
  Var slice_cols(Var a, int from, int n);

  const Matrix& value(Var v) const { return nodes_[check(v)].value; }
  double scalar_value(Var v) const;
  bool requires_grad(Var v) const { return nodes_[check(v)].requires_grad; }

  // Gradient of the last backward() call w.r.t. v; zero matrix if v never
  // received gradient.
  Matrix gradient(Var v) const;

  void backward(Var root);                      // root must be 1x1
  void backward(Var root, const Matrix& seed);  // seed shape = shape of root

  std::size_t node_count() const { return nodes_.size(); }

 private:
  struct Node {
    Matrix value;
    Matrix grad;  // empty until touched by backward
    std::function<void(Tape&)> back;
    bool requires_grad = false;
  };

  int check(Var v) const {
    if (!v.valid() || v.id >= static_cast<int>(nodes_.size()))
      throw ConfigError("invalid tape variable");
    return v.id;
  }

  Var make(Matrix value, bool requires_grad, std::function<void(Tape&)> back);
  Matrix& grad_ref(int id);
  void accumulate(int id, const Matrix& g);

  std::vector<Node> nodes_;
};

// Binds every segment of a ParamVector as a matrix-shaped tape leaf. Models
// index `vars` by segment order.
struct BoundParams {
  std::vector<Var> vars;
};

BoundParams bind_params(Tape& tape, const ParamVector& params, bool requires_grad);

// Gathers segment gradients back into a flat ParamVector aligned with
// `params`. Segments that received no gradient stay zero.
ParamVector collect_gradients(const Tape& tape, const BoundParams& bound,
                              const ParamVector& params);

}  // namespace focalpp::numerics
