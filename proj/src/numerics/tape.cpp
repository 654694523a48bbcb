#include "focalpp/numerics/tape.hpp"

#include <cmath>

namespace focalpp::numerics {

namespace {

constexpr double kInvSqrt2 = 0.7071067811865475244;
constexpr double kInvSqrt2Pi = 0.3989422804014326779;

void check_same_shape(const Matrix& a, const Matrix& b, const char* op) {
  if (a.rows() != b.rows() || a.cols() != b.cols())
    throw ConfigError(std::string(op) + ": shape mismatch (" + std::to_string(a.rows()) + "x" +
                      std::to_string(a.cols()) + " vs " + std::to_string(b.rows()) + "x" +
                      std::to_string(b.cols()) + ")");
}

}  // namespace

Var Tape::make(Matrix value, bool requires_grad, std::function<void(Tape&)> back) {
  Node n;
  n.value = std::move(value);
  n.requires_grad = requires_grad;
  if (requires_grad) n.back = std::move(back);
  nodes_.push_back(std::move(n));
  return Var{static_cast<int>(nodes_.size()) - 1};
}

Matrix& Tape::grad_ref(int id) {
  Node& n = nodes_[id];
  if (n.grad.size() == 0) n.grad = Matrix::Zero(n.value.rows(), n.value.cols());
  return n.grad;
}

void Tape::accumulate(int id, const Matrix& g) {
  if (!nodes_[id].requires_grad) return;
  grad_ref(id) += g;
}

Matrix Tape::gradient(Var v) const {
  const Node& n = nodes_[check(v)];
  if (n.grad.size() == 0) return Matrix::Zero(n.value.rows(), n.value.cols());
  return n.grad;
}

double Tape::scalar_value(Var v) const {
  const Matrix& m = value(v);
  require(m.rows() == 1 && m.cols() == 1, "expected 1x1 value");
  return m(0, 0);
}

Var Tape::leaf(Matrix value, bool requires_grad) {
  return make(std::move(value), requires_grad, {});
}

// Backward closures capture parent ids plus any cached forward data; `self`
// is the id the new node will get (current node count at creation time).

Var Tape::add(Var a, Var b) {
  const Matrix &va = value(a), &vb = value(b);
  check_same_shape(va, vb, "add");
  bool rg = requires_grad(a) || requires_grad(b);
  int ia = a.id, ib = b.id;
  int self = static_cast<int>(nodes_.size());
  return make(va + vb, rg, [ia, ib, self](Tape& t) {
    const Matrix& g = t.nodes_[self].grad;
    t.accumulate(ia, g);
    t.accumulate(ib, g);
  });
}

Var Tape::sub(Var a, Var b) {
  const Matrix &va = value(a), &vb = value(b);
  check_same_shape(va, vb, "sub");
  bool rg = requires_grad(a) || requires_grad(b);
  int ia = a.id, ib = b.id;
  int self = static_cast<int>(nodes_.size());
  return make(va - vb, rg, [ia, ib, self](Tape& t) {
    const Matrix& g = t.nodes_[self].grad;
    t.accumulate(ia, g);
    if (t.nodes_[ib].requires_grad) t.grad_ref(ib) -= g;
  });
}

Var Tape::mul(Var a, Var b) {
  const Matrix &va = value(a), &vb = value(b);
  check_same_shape(va, vb, "mul");
  bool rg = requires_grad(a) || requires_grad(b);
  int ia = a.id, ib = b.id;
  int self = static_cast<int>(nodes_.size());
  return make(va.cwiseProduct(vb), rg, [ia, ib, self](Tape& t) {
    const Matrix& g = t.nodes_[self].grad;
    t.accumulate(ia, g.cwiseProduct(t.nodes_[ib].value));
    t.accumulate(ib, g.cwiseProduct(t.nodes_[ia].value));
  });
}

Var Tape::min_elem(Var a, Var b) {
  const Matrix &va = value(a), &vb = value(b);
  check_same_shape(va, vb, "min_elem");
  bool rg = requires_grad(a) || requires_grad(b);
  int ia = a.id, ib = b.id;
  int self = static_cast<int>(nodes_.size());
  return make(va.cwiseMin(vb), rg, [ia, ib, self](Tape& t) {
    const Matrix& g = t.nodes_[self].grad;
    const Matrix& va2 = t.nodes_[ia].value;
    const Matrix& vb2 = t.nodes_[ib].value;
    Matrix mask = (va2.array() <= vb2.array()).cast<double>();
    t.accumulate(ia, g.cwiseProduct(mask));
    t.accumulate(ib, g.cwiseProduct(Matrix(Matrix::Ones(mask.rows(), mask.cols()) - mask)));
  });
}

Var Tape::matmul(Var a, Var b) {
  const Matrix &va = value(a), &vb = value(b);
  if (va.cols() != vb.rows())
    throw ConfigError("matmul: inner dimension mismatch (" + std::to_string(va.cols()) + " vs " +
                      std::to_string(vb.rows()) + ")");
  bool rg = requires_grad(a) || requires_grad(b);
  int ia = a.id, ib = b.id;
  int self = static_cast<int>(nodes_.size());
  return make(va * vb, rg, [ia, ib, self](Tape& t) {
    const Matrix& g = t.nodes_[self].grad;
    if (t.nodes_[ia].requires_grad) t.grad_ref(ia).noalias() += g * t.nodes_[ib].value.transpose();
    if (t.nodes_[ib].requires_grad) t.grad_ref(ib).noalias() += t.nodes_[ia].value.transpose() * g;
  });
}

Var Tape::scale(Var a, double c) {
  int ia = a.id;
  int self = static_cast<int>(nodes_.size());
  return make(value(a) * c, requires_grad(a), [ia, c, self](Tape& t) {
    t.accumulate(ia, t.nodes_[self].grad * c);
  });
}

Var Tape::add_scalar(Var a, double c) {
  int ia = a.id;
  int self = static_cast<int>(nodes_.size());
  return make(value(a).array() + c, requires_grad(a), [ia, self](Tape& t) {
    t.accumulate(ia, t.nodes_[self].grad);
  });
}

Var Tape::add_rowvec(Var a, Var row) {
  const Matrix &va = value(a), &vr = value(row);
  require(vr.rows() == 1 && vr.cols() == va.cols(), "add_rowvec: row must be 1 x cols(a)");
  bool rg = requires_grad(a) || requires_grad(row);
  int ia = a.id, ir = row.id;
  int self = static_cast<int>(nodes_.size());
  return make(va.rowwise() + vr.row(0), rg, [ia, ir, self](Tape& t) {
    const Matrix& g = t.nodes_[self].grad;
    t.accumulate(ia, g);
    if (t.nodes_[ir].requires_grad) t.grad_ref(ir) += g.colwise().sum();
  });
}

Var Tape::mul_colvec(Var a, Var col) {
  const Matrix &va = value(a), &vc = value(col);
  require(vc.cols() == 1 && vc.rows() == va.rows(), "mul_colvec: col must be rows(a) x 1");
  bool rg = requires_grad(a) || requires_grad(col);
  int ia = a.id, ic = col.id;
  int self = static_cast<int>(nodes_.size());
  return make(va.array().colwise() * vc.col(0).array(), rg, [ia, ic, self](Tape& t) {
    const Matrix& g = t.nodes_[self].grad;
    const Matrix& va2 = t.nodes_[ia].value;
    const Matrix& vc2 = t.nodes_[ic].value;
    if (t.nodes_[ia].requires_grad)
      t.grad_ref(ia) += (g.array().colwise() * vc2.col(0).array()).matrix();
    if (t.nodes_[ic].requires_grad)
      t.grad_ref(ic) += g.cwiseProduct(va2).rowwise().sum();
  });
}

Var Tape::div_by_scalar(Var a, Var s) {
  const Matrix& vs = value(s);
  require(vs.rows() == 1 && vs.cols() == 1, "div_by_scalar: divisor must be 1x1");
  double sv = vs(0, 0);
  bool rg = requires_grad(a) || requires_grad(s);
  int ia = a.id, is = s.id;
  int self = static_cast<int>(nodes_.size());
  return make(value(a) / sv, rg, [ia, is, self, sv](Tape& t) {
    const Matrix& g = t.nodes_[self].grad;
    t.accumulate(ia, g / sv);
    if (t.nodes_[is].requires_grad) {
      Matrix gs(1, 1);
      gs(0, 0) = -(g.cwiseProduct(t.nodes_[self].value)).sum() / sv;
      t.grad_ref(is) += gs;
    }
  });
}

Var Tape::relu(Var a) {
  int ia = a.id;
  int self = static_cast<int>(nodes_.size());
  return make(value(a).cwiseMax(0.0), requires_grad(a), [ia, self](Tape& t) {
    const Matrix& g = t.nodes_[self].grad;
    Matrix mask = (t.nodes_[ia].value.array() > 0.0).cast<double>();
    t.accumulate(ia, g.cwiseProduct(mask));
  });
}

Var Tape::gelu(Var a) {
  const Matrix& va = value(a);
  Matrix out = va.unaryExpr([](double x) { return 0.5 * x * (1.0 + std::erf(x * kInvSqrt2)); });
  int ia = a.id;
  int self = static_cast<int>(nodes_.size());
  return make(std::move(out), requires_grad(a), [ia, self](Tape& t) {
    const Matrix& g = t.nodes_[self].grad;
    Matrix d = t.nodes_[ia].value.unaryExpr([](double x) {
      double cdf = 0.5 * (1.0 + std::erf(x * kInvSqrt2));
      double pdf = kInvSqrt2Pi * std::exp(-0.5 * x * x);
      return cdf + x * pdf;
    });
    t.accumulate(ia, g.cwiseProduct(d));
  });
}

Var Tape::tanh_(Var a) {
  Matrix out = value(a).array().tanh();
  int ia = a.id;
  int self = static_cast<int>(nodes_.size());
  return make(std::move(out), requires_grad(a), [ia, self](Tape& t) {
    const Matrix& g = t.nodes_[self].grad;
    const Matrix& y = t.nodes_[self].value;
    t.accumulate(ia, (g.array() * (1.0 - y.array().square())).matrix());
  });
}

Var Tape::sigmoid(Var a) {
  Matrix out = value(a).unaryExpr([](double x) {
    return x >= 0.0 ? 1.0 / (1.0 + std::exp(-x)) : std::exp(x) / (1.0 + std::exp(x));
  });
  int ia = a.id;
  int self = static_cast<int>(nodes_.size());
  return make(std::move(out), requires_grad(a), [ia, self](Tape& t) {
    const Matrix& g = t.nodes_[self].grad;
    const Matrix& y = t.nodes_[self].value;
    t.accumulate(ia, (g.array() * y.array() * (1.0 - y.array())).matrix());
  });
}

Var Tape::exp_(Var a) {
  Matrix out = value(a).array().exp();
  int ia = a.id;
  int self = static_cast<int>(nodes_.size());
  return make(std::move(out), requires_grad(a), [ia, self](Tape& t) {
    t.accumulate(ia, t.nodes_[self].grad.cwiseProduct(t.nodes_[self].value));
  });
}

Var Tape::log_(Var a) {
  Matrix out = value(a).array().log();
  int ia = a.id;
  int self = static_cast<int>(nodes_.size());
  return make(std::move(out), requires_grad(a), [ia, self](Tape& t) {
    t.accumulate(ia, t.nodes_[self].grad.cwiseQuotient(t.nodes_[ia].value));
  });
}

Var Tape::softplus(Var a) {
  Matrix out = value(a).unaryExpr(
      [](double x) { return std::max(x, 0.0) + std::log1p(std::exp(-std::abs(x))); });
  int ia = a.id;
  int self = static_cast<int>(nodes_.size());
  return make(std::move(out), requires_grad(a), [ia, self](Tape& t) {
    const Matrix& g = t.nodes_[self].grad;
    Matrix d = t.nodes_[ia].value.unaryExpr([](double x) {
      return x >= 0.0 ? 1.0 / (1.0 + std::exp(-x)) : std::exp(x) / (1.0 + std::exp(x));
    });
    t.accumulate(ia, g.cwiseProduct(d));
  });
}

Var Tape::square(Var a) {
  Matrix out = value(a).array().square();
  int ia = a.id;
  int self = static_cast<int>(nodes_.size());
  return make(std::move(out), requires_grad(a), [ia, self](Tape& t) {
    t.accumulate(ia, (t.nodes_[self].grad.array() * 2.0 * t.nodes_[ia].value.array()).matrix());
  });
}

Var Tape::clamp(Var a, double lo, double hi) {
  Matrix out = value(a).cwiseMax(lo).cwiseMin(hi);
  int ia = a.id;
  int self = static_cast<int>(nodes_.size());
  return make(std::move(out), requires_grad(a), [ia, lo, hi, self](Tape& t) {
    const Matrix& g = t.nodes_[self].grad;
    const Matrix& x = t.nodes_[ia].value;
    Matrix mask = ((x.array() > lo) && (x.array() < hi)).cast<double>();
    t.accumulate(ia, g.cwiseProduct(mask));
  });
}

Var Tape::sum_all(Var a) {
  Matrix out(1, 1);
  out(0, 0) = value(a).sum();
  int ia = a.id;
  int self = static_cast<int>(nodes_.size());
  return make(std::move(out), requires_grad(a), [ia, self](Tape& t) {
    double g = t.nodes_[self].grad(0, 0);
    const Matrix& x = t.nodes_[ia].value;
    t.accumulate(ia, Matrix::Constant(x.rows(), x.cols(), g));
  });
}

Var Tape::mean_all(Var a) {
  const Matrix& va = value(a);
  Matrix out(1, 1);
  out(0, 0) = va.mean();
  double inv = 1.0 / static_cast<double>(va.size());
  int ia = a.id;
  int self = static_cast<int>(nodes_.size());
  return make(std::move(out), requires_grad(a), [ia, inv, self](Tape& t) {
    double g = t.nodes_[self].grad(0, 0) * inv;
    const Matrix& x = t.nodes_[ia].value;
    t.accumulate(ia, Matrix::Constant(x.rows(), x.cols(), g));
  });
}

Var Tape::mean_rows(Var a) {
  const Matrix& va = value(a);
  Matrix out = va.colwise().mean();
  double inv = 1.0 / static_cast<double>(va.rows());
  int ia = a.id;
  int self = static_cast<int>(nodes_.size());
  return make(std::move(out), requires_grad(a), [ia, inv, self](Tape& t) {
    const Matrix& g = t.nodes_[self].grad;  // 1 x cols
    const Matrix& x = t.nodes_[ia].value;
    Matrix gg = (g * inv).replicate(x.rows(), 1);
    t.accumulate(ia, gg);
  });
}

Var Tape::row_sum(Var a) {
  Matrix out = value(a).rowwise().sum();
  int ia = a.id;
  int self = static_cast<int>(nodes_.size());
  return make(std::move(out), requires_grad(a), [ia, self](Tape& t) {
    const Matrix& g = t.nodes_[self].grad;  // rows x 1
    const Matrix& x = t.nodes_[ia].value;
    t.accumulate(ia, g.replicate(1, x.cols()));
  });
}

Var Tape::trace_(Var a) {
  const Matrix& va = value(a);
  require(va.rows() == va.cols(), "trace: matrix must be square");
  Matrix out(1, 1);
  out(0, 0) = va.trace();
  int ia = a.id;
  int self = static_cast<int>(nodes_.size());
  return make(std::move(out), requires_grad(a), [ia, self](Tape& t) {
    double g = t.nodes_[self].grad(0, 0);
    const Matrix& x = t.nodes_[ia].value;
    Matrix gg = Matrix::Zero(x.rows(), x.cols());
    gg.diagonal().setConstant(g);
    t.accumulate(ia, gg);
  });
}

Var Tape::softmax_rows(Var a) {
  const Matrix& va = value(a);
  Matrix out(va.rows(), va.cols());
  for (Eigen::Index i = 0; i < va.rows(); ++i) {
    double mx = va.row(i).maxCoeff();
    Eigen::ArrayXd e = (va.row(i).array() - mx).exp();
    out.row(i) = (e / e.sum()).matrix();
  }
  int ia = a.id;
  int self = static_cast<int>(nodes_.size());
  return make(std::move(out), requires_grad(a), [ia, self](Tape& t) {
    const Matrix& g = t.nodes_[self].grad;
    const Matrix& s = t.nodes_[self].value;
    Matrix gs = g.cwiseProduct(s);
    Vector rs = gs.rowwise().sum();
    t.accumulate(ia, gs - (s.array().colwise() * rs.array()).matrix());
  });
}

Var Tape::log_softmax_rows(Var a) {
  const Matrix& va = value(a);
  Matrix out(va.rows(), va.cols());
  for (Eigen::Index i = 0; i < va.rows(); ++i) {
    double mx = va.row(i).maxCoeff();
    double lse = std::log((va.row(i).array() - mx).exp().sum()) + mx;
    out.row(i) = va.row(i).array() - lse;
  }
  int ia = a.id;
  int self = static_cast<int>(nodes_.size());
  return make(std::move(out), requires_grad(a), [ia, self](Tape& t) {
    const Matrix& g = t.nodes_[self].grad;
    const Matrix& ls = t.nodes_[self].value;
    Vector rs = g.rowwise().sum();
    Matrix sm = ls.array().exp().matrix();
    t.accumulate(ia, g - (sm.array().colwise() * rs.array()).matrix());
  });
}

Var Tape::layer_norm(Var a, Var gamma, Var beta, double eps) {
  const Matrix& x = value(a);
  const Matrix &vg = value(gamma), &vb = value(beta);
  require(vg.rows() == 1 && vg.cols() == x.cols(), "layer_norm: gamma must be 1 x cols");
  require(vb.rows() == 1 && vb.cols() == x.cols(), "layer_norm: beta must be 1 x cols");
  Eigen::Index n = x.cols();
  Vector mean = x.rowwise().mean();
  Matrix centered = x.array().colwise() - mean.array();
  Vector var = centered.array().square().rowwise().mean();
  Vector inv_std = (var.array() + eps).rsqrt();
  Matrix xhat = centered.array().colwise() * inv_std.array();
  Matrix out = (xhat.array().rowwise() * vg.row(0).array()).rowwise() + vb.row(0).array();
  bool rg = requires_grad(a) || requires_grad(gamma) || requires_grad(beta);
  int ia = a.id, ig = gamma.id, ib = beta.id;
  int self = static_cast<int>(nodes_.size());
  auto xhat_p = std::make_shared<Matrix>(std::move(xhat));
  auto inv_std_p = std::make_shared<Vector>(std::move(inv_std));
  return make(std::move(out), rg, [ia, ig, ib, n, xhat_p, inv_std_p, self](Tape& t) {
    const Matrix& g = t.nodes_[self].grad;
    const Matrix& gam = t.nodes_[ig].value;
    if (t.nodes_[ig].requires_grad) t.grad_ref(ig) += g.cwiseProduct(*xhat_p).colwise().sum();
    if (t.nodes_[ib].requires_grad) t.grad_ref(ib) += g.colwise().sum();
    if (t.nodes_[ia].requires_grad) {
      Matrix gx = g.array().rowwise() * gam.row(0).array();  // d/dxhat
      Vector s1 = gx.rowwise().sum();
      Vector s2 = gx.cwiseProduct(*xhat_p).rowwise().sum();
      double invn = 1.0 / static_cast<double>(n);
      Matrix dx = (gx.array() - (s1 * invn).replicate(1, n).array() -
                   xhat_p->array() * (s2 * invn).replicate(1, n).array())
                      .colwise() *
                  inv_std_p->array();
      t.grad_ref(ia) += dx.matrix();
    }
  });
}

Var Tape::mean_pool_groups(Var a, int group) {
  const Matrix& x = value(a);
  require(group > 0 && x.rows() % group == 0, "mean_pool_groups: rows not divisible by group");
  Eigen::Index out_rows = x.rows() / group;
  Matrix out = Matrix::Zero(out_rows, x.cols());
  for (Eigen::Index i = 0; i < out_rows; ++i)
    out.row(i) = x.middleRows(i * group, group).colwise().mean();
  int ia = a.id;
  int self = static_cast<int>(nodes_.size());
  double inv = 1.0 / static_cast<double>(group);
  return make(std::move(out), requires_grad(a), [ia, group, inv, self](Tape& t) {
    const Matrix& g = t.nodes_[self].grad;
    const Matrix& x2 = t.nodes_[ia].value;
    Matrix gg(x2.rows(), x2.cols());
    for (Eigen::Index i = 0; i < g.rows(); ++i)
      gg.middleRows(i * group, group) = (g.row(i) * inv).replicate(group, 1);
    t.accumulate(ia, gg);
  });
}

Var Tape::coordinate_embed(const Matrix& x, Var embed, Var pos) {
  const Matrix &w = value(embed), &p = value(pos);
  Eigen::Index B = x.rows(), C = x.cols(), d = w.cols();
  require(w.rows() == C && p.rows() == C && p.cols() == d,
          "coordinate_embed: weight/pos must be C x d");
  Matrix out(B * C, d);
  for (Eigen::Index b = 0; b < B; ++b)
    for (Eigen::Index j = 0; j < C; ++j) out.row(b * C + j) = x(b, j) * w.row(j) + p.row(j);
  bool rg = requires_grad(embed) || requires_grad(pos);
  int iw = embed.id, ip = pos.id;
  int self = static_cast<int>(nodes_.size());
  auto x_p = std::make_shared<Matrix>(x);
  return make(std::move(out), rg, [iw, ip, x_p, self](Tape& t) {
    const Matrix& g = t.nodes_[self].grad;
    Eigen::Index B = x_p->rows(), C = x_p->cols();
    if (t.nodes_[iw].requires_grad) {
      Matrix& gw = t.grad_ref(iw);
      for (Eigen::Index b = 0; b < B; ++b)
        for (Eigen::Index j = 0; j < C; ++j) gw.row(j) += (*x_p)(b, j) * g.row(b * C + j);
    }
    if (t.nodes_[ip].requires_grad) {
      Matrix& gp = t.grad_ref(ip);
      for (Eigen::Index b = 0; b < B; ++b)
        for (Eigen::Index j = 0; j < C; ++j) gp.row(j) += g.row(b * C + j);
    }
  });
}

Var Tape::self_attention(Var q, Var k, Var v, int heads, int tokens) {
  const Matrix &vq = value(q), &vk = value(k), &vv = value(v);
  check_same_shape(vq, vk, "self_attention q/k");
  check_same_shape(vq, vv, "self_attention q/v");
  Eigen::Index d = vq.cols();
  require(heads > 0 && d % heads == 0, "self_attention: dim not divisible by heads");
  require(tokens > 0 && vq.rows() % tokens == 0, "self_attention: rows not divisible by tokens");
  Eigen::Index dh = d / heads;
  Eigen::Index B = vq.rows() / tokens;
  double scale = 1.0 / std::sqrt(static_cast<double>(dh));

  Matrix out(vq.rows(), d);
  auto weights = std::make_shared<std::vector<Matrix>>();
  weights->reserve(static_cast<std::size_t>(B * heads));
  for (Eigen::Index b = 0; b < B; ++b) {
    for (int h = 0; h < heads; ++h) {
      auto qb = vq.block(b * tokens, h * dh, tokens, dh);
      auto kb = vk.block(b * tokens, h * dh, tokens, dh);
      auto vb = vv.block(b * tokens, h * dh, tokens, dh);
      Matrix s = (qb * kb.transpose()) * scale;
      Matrix a(tokens, tokens);
      for (Eigen::Index i = 0; i < tokens; ++i) {
        double mx = s.row(i).maxCoeff();
        Eigen::ArrayXd e = (s.row(i).array() - mx).exp();
        a.row(i) = (e / e.sum()).matrix();
      }
      out.block(b * tokens, h * dh, tokens, dh) = a * vb;
      weights->push_back(std::move(a));
    }
  }
  bool rg = requires_grad(q) || requires_grad(k) || requires_grad(v);
  int iq = q.id, ik = k.id, iv = v.id;
  int self = static_cast<int>(nodes_.size());
  return make(std::move(out), rg, [iq, ik, iv, heads, tokens, dh, scale, weights, self](Tape& t) {
    const Matrix& g = t.nodes_[self].grad;
    const Matrix& vq2 = t.nodes_[iq].value;
    const Matrix& vk2 = t.nodes_[ik].value;
    const Matrix& vv2 = t.nodes_[iv].value;
    Eigen::Index B = vq2.rows() / tokens;
    bool nq = t.nodes_[iq].requires_grad, nk = t.nodes_[ik].requires_grad,
         nv = t.nodes_[iv].requires_grad;
    Matrix gq, gk, gv;
    if (nq) gq = Matrix::Zero(vq2.rows(), vq2.cols());
    if (nk) gk = Matrix::Zero(vk2.rows(), vk2.cols());
    if (nv) gv = Matrix::Zero(vv2.rows(), vv2.cols());
    for (Eigen::Index b = 0; b < B; ++b) {
      for (int h = 0; h < heads; ++h) {
        const Matrix& a = (*weights)[static_cast<std::size_t>(b * heads + h)];
        auto go = g.block(b * tokens, h * dh, tokens, dh);
        auto qb = vq2.block(b * tokens, h * dh, tokens, dh);
        auto kb = vk2.block(b * tokens, h * dh, tokens, dh);
        auto vb = vv2.block(b * tokens, h * dh, tokens, dh);
        if (nv) gv.block(b * tokens, h * dh, tokens, dh).noalias() += a.transpose() * go;
        if (nq || nk) {
          Matrix ga = go * vb.transpose();
          Vector rs = ga.cwiseProduct(a).rowwise().sum();
          Matrix gs = a.cwiseProduct(ga - rs.replicate(1, tokens)) * scale;
          if (nq) gq.block(b * tokens, h * dh, tokens, dh).noalias() += gs * kb;
          if (nk) gk.block(b * tokens, h * dh, tokens, dh).noalias() += gs.transpose() * qb;
        }
      }
    }
    if (nq) t.grad_ref(iq) += gq;
    if (nk) t.grad_ref(ik) += gk;
    if (nv) t.grad_ref(iv) += gv;
  });
}

Var Tape::concat_cols(Var a, Var b) {
  const Matrix &va = value(a), &vb = value(b);
  require(va.rows() == vb.rows(), "concat_cols: row count mismatch");
  Matrix out(va.rows(), va.cols() + vb.cols());
  out.leftCols(va.cols()) = va;
  out.rightCols(vb.cols()) = vb;
  bool rg = requires_grad(a) || requires_grad(b);
  int ia = a.id, ib = b.id;
  Eigen::Index ca = va.cols(), cb = vb.cols();
  int self = static_cast<int>(nodes_.size());
  return make(std::move(out), rg, [ia, ib, ca, cb, self](Tape& t) {
    const Matrix& g = t.nodes_[self].grad;
    t.accumulate(ia, g.leftCols(ca));
    t.accumulate(ib, g.rightCols(cb));
  });
}

Var Tape::slice_cols(Var a, int from, int n) {
  const Matrix& va = value(a);
  require(from >= 0 && n > 0 && from + n <= va.cols(), "slice_cols: range out of bounds");
  int ia = a.id;
  int self = static_cast<int>(nodes_.size());
  return make(va.middleCols(from, n), requires_grad(a), [ia, from, n, self](Tape& t) {
    const Matrix& g = t.nodes_[self].grad;
    if (!t.nodes_[ia].requires_grad) return;
    Matrix& ga = t.grad_ref(ia);
    ga.middleCols(from, n) += g;
  });
}

void Tape::backward(Var root) {
  const Matrix& v = value(root);
  require(v.rows() == 1 && v.cols() == 1, "backward: root must be scalar; pass a seed otherwise");
  backward(root, Matrix::Ones(1, 1));
}

void Tape::backward(Var root, const Matrix& seed) {
  int r = check(root);
  check_same_shape(nodes_[r].value, seed, "backward seed");
  if (!nodes_[r].requires_grad) return;
  grad_ref(r) += seed;
  for (int i = r; i >= 0; --i) {
    Node& n = nodes_[i];
    if (!n.requires_grad || n.grad.size() == 0 || !n.back) continue;
    n.back(*this);
  }
}

BoundParams bind_params(Tape& tape, const ParamVector& params, bool requires_grad) {
  BoundParams bound;
  const auto& segs = params.layout().segments();
  bound.vars.reserve(segs.size());
  for (std::size_t i = 0; i < segs.size(); ++i)
    bound.vars.push_back(tape.leaf(params.segment_matrix(i), requires_grad));
  return bound;
}

ParamVector collect_gradients(const Tape& tape, const BoundParams& bound,
                              const ParamVector& params) {
  ParamVector grad = params.zeros_like();
  const auto& segs = params.layout().segments();
  require(bound.vars.size() == segs.size(), "collect_gradients: binding/layout mismatch");
  for (std::size_t i = 0; i < segs.size(); ++i) grad.set_segment(i, tape.gradient(bound.vars[i]));
  return grad;
}

}  // namespace focalpp::numerics
