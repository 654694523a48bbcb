#include "focalpp/numerics/net.hpp"

#include <cmath>

#include "focalpp/util/rng.hpp"

namespace focalpp::numerics {

Activation activation_from_string(const std::string& s) {
  if (s == "identity") return Activation::identity;
  if (s == "relu") return Activation::relu;
  if (s == "gelu") return Activation::gelu;
  if (s == "tanh") return Activation::tanh;
  throw ConfigError("unknown activation '" + s + "'");
}

void NetSpec::validate() const {
  require(input_dim > 0, "NetSpec: input_dim must be positive");
  require(!widths.empty(), "NetSpec: at least one layer required");
  for (int w : widths) require(w > 0, "NetSpec: layer widths must be positive");
}

Mlp::Mlp(NetSpec spec, std::string prefix) : spec_(std::move(spec)) {
  spec_.validate();
  int in = spec_.input_dim;
  for (std::size_t i = 0; i < spec_.widths.size(); ++i) {
    int out = spec_.widths[i];
    layout_.add(prefix + ".l" + std::to_string(i) + ".W", in, out);
    layout_.add(prefix + ".l" + std::to_string(i) + ".b", 1, out);
    in = out;
  }
}

ParamVector Mlp::init_params(std::uint64_t seed) const {
  ParamVector p(layout_);
  auto rng = make_rng(seed);
  int in = spec_.input_dim;
  for (std::size_t i = 0; i < spec_.widths.size(); ++i) {
    int out = spec_.widths[i];
    double std = std::sqrt(2.0 / static_cast<double>(in));
    auto w = p.segment(2 * i);
    for (double& x : w) x = gaussian(rng, 0.0, std);
    in = out;
  }
  return p;
}

namespace {
Var apply_activation(Tape& t, Var x, Activation a) {
  switch (a) {
    case Activation::identity: return x;
    case Activation::relu: return t.relu(x);
    case Activation::gelu: return t.gelu(x);
    case Activation::tanh: return t.tanh_(x);
  }
  throw ConfigError("bad activation");
}

Matrix apply_activation_plain(const Matrix& x, Activation a) {
  switch (a) {
    case Activation::identity: return x;
    case Activation::relu: return x.cwiseMax(0.0);
    case Activation::gelu:
      return x.unaryExpr([](double v) { return 0.5 * v * (1.0 + std::erf(v * 0.70710678118654752)); });
    case Activation::tanh: return x.array().tanh();
  }
  throw ConfigError("bad activation");
}
}  // namespace

Var Mlp::forward(Tape& tape, const std::vector<Var>& param_vars, Var inputs,
                 std::size_t base) const {
  require(tape.value(inputs).cols() == spec_.input_dim,
          "Mlp::forward: input has " + std::to_string(tape.value(inputs).cols()) +
              " columns, expected " + std::to_string(spec_.input_dim));
  require(base + segment_count() <= param_vars.size(), "Mlp::forward: parameter binding too short");
  Var x = inputs;
  for (std::size_t i = 0; i < spec_.widths.size(); ++i) {
    Var w = param_vars[base + 2 * i];
    Var b = param_vars[base + 2 * i + 1];
    x = tape.add_rowvec(tape.matmul(x, w), b);
    bool last = (i + 1 == spec_.widths.size());
    x = apply_activation(tape, x, last ? spec_.output_activation : spec_.hidden_activation);
    const Matrix& v = tape.value(x);
    if (!v.allFinite())
      throw NumericError("non-finite activation at layer " + std::to_string(i));
  }
  return x;
}

Matrix Mlp::forward_plain(const ParamVector& params, const Matrix& inputs,
                          std::size_t base_segment) const {
  require(inputs.cols() == spec_.input_dim, "Mlp::forward_plain: input dim mismatch");
  Matrix x = inputs;
  for (std::size_t i = 0; i < spec_.widths.size(); ++i) {
    Matrix w = params.segment_matrix(base_segment + 2 * i);
    Matrix b = params.segment_matrix(base_segment + 2 * i + 1);
    x = ((x * w).rowwise() + b.row(0)).eval();
    bool last = (i + 1 == spec_.widths.size());
    x = apply_activation_plain(x, last ? spec_.output_activation : spec_.hidden_activation);
  }
  return x;
}

std::pair<double, ParamVector> evaluate_with_gradients(
    const Mlp& net, const ParamVector& params, const Matrix& inputs,
    const std::function<Var(Tape&, Var)>& loss_tail) {
  require(params.layout() == net.layout(), "evaluate_with_gradients: params do not match net");
  require(params.all_finite(), "evaluate_with_gradients: parameters must be finite");
  Tape tape;
  BoundParams bound = bind_params(tape, params, true);
  Var x = tape.constant(inputs);
  Var out = net.forward(tape, bound.vars, x);
  Var loss = loss_tail(tape, out);
  const Matrix& lv = tape.value(loss);
  require(lv.rows() == 1 && lv.cols() == 1, "loss_tail must produce a scalar");
  if (!std::isfinite(lv(0, 0))) throw NumericError("non-finite loss value");
  tape.backward(loss);
  return {lv(0, 0), collect_gradients(tape, bound, params)};
}

}  // namespace focalpp::numerics
