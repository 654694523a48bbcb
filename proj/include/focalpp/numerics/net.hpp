#pragma once

#include <cstdint>
#include <functional>
#include <string>
#include <vector>

#include "focalpp/numerics/tape.hpp"

namespace focalpp::numerics {

enum class Activation { identity, relu, gelu, tanh };

Activation activation_from_string(const std::string& s);

// Fully connected network description: input_dim -> widths... -> output implied
// by the last width. Hidden activations apply between layers; the output layer
// is linear unless output_activation says otherwise.
struct NetSpec {
  int input_dim = 0;
  std::vector<int> widths;  // at least one entry; last entry is the output dim
  Activation hidden_activation = Activation::relu;
  Activation output_activation = Activation::identity;

  void validate() const;
  int output_dim() const { return widths.empty() ? 0 : widths.back(); }
};

// MLP with a ParamVector layout of alternating weight/bias segments named
// "<prefix>.l<i>.W" / "<prefix>.l<i>.b". Weights are (in x out), biases 1 x out.
class Mlp {
 public:
  Mlp(NetSpec spec, std::string prefix = "mlp");

  const NetSpec& spec() const { return spec_; }
  const ParamLayout& layout() const { return layout_; }

  // He/Xavier-style init scaled per layer; biases zero.
  ParamVector init_params(std::uint64_t seed) const;

  // Forward on a tape; param_vars are the bound segments of this net's layout
  // in order (possibly a sub-range of a larger binding starting at `base`).
  Var forward(Tape& tape, const std::vector<Var>& param_vars, Var inputs,
              std::size_t base = 0) const;

  // Plain forward pass with no gradient bookkeeping.
  Matrix forward_plain(const ParamVector& params, const Matrix& inputs,
                       std::size_t base_segment = 0) const;

  std::size_t segment_count() const { return 2 * spec_.widths.size(); }

 private:
  NetSpec spec_;
  ParamLayout layout_;
};

// Evaluates loss_tail(tape, outputs) after an MLP forward pass and returns the
// loss with its gradient w.r.t. every parameter. Deterministic in its inputs.
std::pair<double, ParamVector> evaluate_with_gradients(
    const Mlp& net, const ParamVector& params, const Matrix& inputs,
    const std::function<Var(Tape&, Var)>& loss_tail);

}  // namespace focalpp::numerics
