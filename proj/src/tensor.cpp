// SPDX-License-Identifier: Apache-2.0

#include "agrifuse/tensor.hpp"

#include <algorithm>
#include <cmath>
#include <numbers>
#include <sstream>
#include <unordered_set>

namespace agrifuse {

using RowMat =
    Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
using MatMap = Eigen::Map<RowMat>;
using ConstMatMap = Eigen::Map<const RowMat>;

std::string shape_str(const Shape& s) {
  std::ostringstream out;
  out << '(';
  for (std::size_t i = 0; i < s.size(); ++i) {
    if (i) out << ',';
    out << s[i];
  }
  out << ')';
  return out.str();
}

std::size_t shape_numel(const Shape& s) {
  std::size_t n = 1;
  for (std::size_t d : s) n *= d;
  return n;
}

namespace detail {

void Node::accumulate(const Eigen::ArrayXd& g) {
  if (!has_grad) {
    grad = g;
    has_grad = true;
  } else {
    grad += g;
  }
}

namespace {
thread_local bool g_grad_enabled = true;
}

bool grad_enabled() { return g_grad_enabled; }

}  // namespace detail

NoGradGuard::NoGradGuard() : saved_(detail::g_grad_enabled) {
  detail::g_grad_enabled = false;
}

NoGradGuard::~NoGradGuard() { detail::g_grad_enabled = saved_; }

namespace {

std::shared_ptr<detail::Node> make_node(Shape shape, Eigen::ArrayXd values) {
  auto node = std::make_shared<detail::Node>();
  node->shape = std::move(shape);
  node->values = std::move(values);
  return node;
}

void check_same_shape(const char* op, const Tensor& a, const Tensor& b) {
  if (a.shape() != b.shape()) {
    throw ShapeError(std::string(op) + ": shape mismatch " +
                     shape_str(a.shape()) + " vs " + shape_str(b.shape()));
  }
}

// Rows/cols view of an arbitrary-rank tensor split at the last axis.
std::pair<std::size_t, std::size_t> last_axis_view(const Shape& s) {
  if (s.empty()) throw ShapeError("operation requires rank >= 1");
  const std::size_t d = s.back();
  return {shape_numel(s) / d, d};
}

}  // namespace

// ---- Tensor ------------------------------------------------------------------

const Shape& Tensor::shape() const {
  if (!node_) throw ContractError("use of undefined tensor");
  return node_->shape;
}

std::size_t Tensor::size() const { return shape_numel(shape()); }

bool Tensor::requires_grad() const { return node_ && node_->requires_grad; }

void Tensor::set_requires_grad(bool value) {
  if (!node_) throw ContractError("use of undefined tensor");
  if (value && !node_->parents.empty()) {
    throw ContractError("requires_grad can only be toggled on leaf tensors");
  }
  node_->requires_grad = value;
}

std::span<const double> Tensor::values() const {
  if (!node_) throw ContractError("use of undefined tensor");
  return {node_->values.data(), static_cast<std::size_t>(node_->values.size())};
}

std::span<double> Tensor::mutable_values() {
  if (!node_) throw ContractError("use of undefined tensor");
  if (!node_->parents.empty()) {
    throw ContractError("mutation is only permitted on leaf tensors");
  }
  return {node_->values.data(), static_cast<std::size_t>(node_->values.size())};
}

double Tensor::item() const {
  if (size() != 1) {
    throw ContractError("item() requires a scalar, got " + shape_str(shape()));
  }
  return node_->values[0];
}

double Tensor::at(std::initializer_list<std::size_t> index) const {
  const Shape& s = shape();
  if (index.size() != s.size()) {
    throw ShapeError("at(): rank mismatch for " + shape_str(s));
  }
  std::size_t flat = 0;
  std::size_t axis = 0;
  for (std::size_t i : index) {
    if (i >= s[axis]) throw ShapeError("at(): index out of range");
    flat = flat * s[axis] + i;
    ++axis;
  }
  return node_->values[static_cast<Eigen::Index>(flat)];
}

bool Tensor::has_grad() const { return node_ && node_->has_grad; }

std::span<const double> Tensor::grad() const {
  if (!node_) throw ContractError("use of undefined tensor");
  if (!node_->has_grad) {
    throw ContractError("grad(): no gradient present; run backward() first");
  }
  return {node_->grad.data(), static_cast<std::size_t>(node_->grad.size())};
}

void Tensor::zero_grad() {
  if (!node_) throw ContractError("use of undefined tensor");
  node_->has_grad = false;
  node_->grad.resize(0);
}

void Tensor::backward() {
  if (!node_) throw ContractError("use of undefined tensor");
  if (size() != 1) {
    throw ContractError("backward() requires a scalar loss, got " +
                        shape_str(shape()));
  }
  if (!node_->requires_grad) return;

  // Iterative post-order DFS over parents: children precede parents.
  std::vector<detail::Node*> order;
  std::unordered_set<detail::Node*> seen;
  std::vector<std::pair<detail::Node*, std::size_t>> stack;
  stack.emplace_back(node_.get(), 0);
  seen.insert(node_.get());
  while (!stack.empty()) {
    auto& [node, next] = stack.back();
    if (next < node->parents.size()) {
      detail::Node* parent = node->parents[next++].get();
      if (parent->requires_grad && seen.insert(parent).second) {
        stack.emplace_back(parent, 0);
      }
    } else {
      order.push_back(node);
      stack.pop_back();
    }
  }

  node_->accumulate(Eigen::ArrayXd::Ones(1));
  for (auto it = order.rbegin(); it != order.rend(); ++it) {
    detail::Node* n = *it;
    if (n->backprop && n->has_grad) n->backprop(*n);
  }
}

Tensor Tensor::detach() const {
  if (!node_) return Tensor();
  auto node = make_node(node_->shape, node_->values);
  return Tensor(std::move(node));
}

Tensor Tensor::zeros(Shape shape, bool requires_grad) {
  const std::size_t n = shape_numel(shape);
  auto node = make_node(std::move(shape),
                        Eigen::ArrayXd::Zero(static_cast<Eigen::Index>(n)));
  node->requires_grad = requires_grad;
  return Tensor(std::move(node));
}

Tensor Tensor::ones(Shape shape) { return full(std::move(shape), 1.0); }

Tensor Tensor::full(Shape shape, double value, bool requires_grad) {
  const std::size_t n = shape_numel(shape);
  auto node = make_node(
      std::move(shape),
      Eigen::ArrayXd::Constant(static_cast<Eigen::Index>(n), value));
  node->requires_grad = requires_grad;
  return Tensor(std::move(node));
}

Tensor Tensor::from_vector(Shape shape, std::vector<double> values,
                           bool requires_grad) {
  const std::size_t n = shape_numel(shape);
  if (n != values.size()) {
    throw ShapeError("from_vector: " + shape_str(shape) + " needs " +
                     std::to_string(n) + " values, got " +
                     std::to_string(values.size()));
  }
  Eigen::ArrayXd data(static_cast<Eigen::Index>(n));
  std::copy(values.begin(), values.end(), data.data());
  auto node = make_node(std::move(shape), std::move(data));
  node->requires_grad = requires_grad;
  return Tensor(std::move(node));
}

Tensor Tensor::scalar(double value) { return full({1}, value); }

Tensor Tensor::xavier_uniform(Shape shape, std::size_t fan_in,
                              std::size_t fan_out, Rng& rng) {
  const double bound = std::sqrt(6.0 / static_cast<double>(fan_in + fan_out));
  const std::size_t n = shape_numel(shape);
  Eigen::ArrayXd data(static_cast<Eigen::Index>(n));
  for (Eigen::Index i = 0; i < data.size(); ++i) {
    data[i] = rng.uniform(-bound, bound);
  }
  auto node = make_node(std::move(shape), std::move(data));
  node->requires_grad = true;
  return Tensor(std::move(node));
}

const Eigen::ArrayXd& array_of(const Tensor& t) { return t.node()->values; }

namespace {

/// Assembles an op node: forward values plus, when tracking is active and
/// some parent is tracked, the parent links and backward rule.
Tensor op_node(Shape shape, Eigen::ArrayXd values, const char* op,
               const std::vector<Tensor>& parents,
               std::function<void(detail::Node&)> backprop) {
  auto node = make_node(std::move(shape), std::move(values));
  node->op = op;
  bool tracked = false;
  if (detail::grad_enabled()) {
    for (const auto& p : parents) tracked = tracked || p.requires_grad();
  }
  if (tracked) {
    node->requires_grad = true;
    for (const auto& p : parents) node->parents.push_back(p.node_ptr());
    node->backprop = std::move(backprop);
  }
  return Tensor(std::move(node));
}

}  // namespace

// ---- arithmetic ----------------------------------------------------------

Tensor matmul(const Tensor& a, const Tensor& b) {
  if (a.rank() != 2 || b.rank() != 2) {
    throw ShapeError("matmul: operands must be rank 2, got " +
                     shape_str(a.shape()) + " and " + shape_str(b.shape()));
  }
  const std::size_t m = a.shape()[0], k = a.shape()[1];
  const std::size_t k2 = b.shape()[0], n = b.shape()[1];
  if (k != k2) {
    throw ShapeError("matmul: inner dimensions disagree, " +
                     shape_str(a.shape()) + " vs " + shape_str(b.shape()));
  }
  Eigen::ArrayXd out(static_cast<Eigen::Index>(m * n));
  {
    ConstMatMap A(array_of(a).data(), m, k);
    ConstMatMap B(array_of(b).data(), k, n);
    MatMap C(out.data(), m, n);
    C.noalias() = A * B;
  }
  return op_node(
      {m, n}, std::move(out), "matmul", {a, b},
      [m, k, n](detail::Node& self) {
        ConstMatMap G(self.grad.data(), m, n);
        auto& pa = *self.parents[0];
        auto& pb = *self.parents[1];
        ConstMatMap A(pa.values.data(), m, k);
        ConstMatMap B(pb.values.data(), k, n);
        if (pa.requires_grad) {
          Eigen::ArrayXd ga(static_cast<Eigen::Index>(m * k));
          MatMap(ga.data(), m, k).noalias() = G * B.transpose();
          pa.accumulate(ga);
        }
        if (pb.requires_grad) {
          Eigen::ArrayXd gb(static_cast<Eigen::Index>(k * n));
          MatMap(gb.data(), k, n).noalias() = A.transpose() * G;
          pb.accumulate(gb);
        }
      });
}

Tensor transpose(const Tensor& x) {
  if (x.rank() != 2) {
    throw ShapeError("transpose: rank-2 tensor required, got " +
                     shape_str(x.shape()));
  }
  const std::size_t r = x.shape()[0], c = x.shape()[1];
  Eigen::ArrayXd out(static_cast<Eigen::Index>(r * c));
  MatMap(out.data(), c, r) = ConstMatMap(array_of(x).data(), r, c).transpose();
  return op_node({c, r}, std::move(out), "transpose", {x},
                 [r, c](detail::Node& self) {
                   Eigen::ArrayXd g(static_cast<Eigen::Index>(r * c));
                   MatMap(g.data(), r, c) =
                       ConstMatMap(self.grad.data(), c, r).transpose();
                   self.parents[0]->accumulate(g);
                 });
}

Tensor add(const Tensor& a, const Tensor& b) {
  check_same_shape("add", a, b);
  return op_node(a.shape(), array_of(a) + array_of(b), "add", {a, b},
                 [](detail::Node& self) {
                   for (auto& p : self.parents) {
                     if (p->requires_grad) p->accumulate(self.grad);
                   }
                 });
}

Tensor sub(const Tensor& a, const Tensor& b) {
  check_same_shape("sub", a, b);
  return op_node(a.shape(), array_of(a) - array_of(b), "sub", {a, b},
                 [](detail::Node& self) {
                   if (self.parents[0]->requires_grad) {
                     self.parents[0]->accumulate(self.grad);
                   }
                   if (self.parents[1]->requires_grad) {
                     self.parents[1]->accumulate(-self.grad);
                   }
                 });
}

Tensor hadamard(const Tensor& a, const Tensor& b) {
  check_same_shape("hadamard", a, b);
  return op_node(a.shape(), array_of(a) * array_of(b), "hadamard", {a, b},
                 [](detail::Node& self) {
                   auto& pa = *self.parents[0];
                   auto& pb = *self.parents[1];
                   if (pa.requires_grad) pa.accumulate(self.grad * pb.values);
                   if (pb.requires_grad) pb.accumulate(self.grad * pa.values);
                 });
}

Tensor scale(const Tensor& x, double c) {
  return op_node(x.shape(), c * array_of(x), "scale", {x},
                 [c](detail::Node& self) {
                   self.parents[0]->accumulate(c * self.grad);
                 });
}

Tensor add_scalar(const Tensor& x, double c) {
  return op_node(x.shape(), array_of(x) + c, "add_scalar", {x},
                 [](detail::Node& self) {
                   self.parents[0]->accumulate(self.grad);
                 });
}

Tensor add_bias(const Tensor& x, const Tensor& bias) {
  if (bias.rank() != 1) {
    throw ShapeError("add_bias: bias must be rank 1, got " +
                     shape_str(bias.shape()));
  }
  auto [rows, cols] = last_axis_view(x.shape());
  if (cols != bias.shape()[0]) {
    throw ShapeError("add_bias: last axis " + std::to_string(cols) +
                     " vs bias " + shape_str(bias.shape()));
  }
  Eigen::ArrayXd out = array_of(x);
  MatMap view(out.data(), rows, cols);
  view.rowwise() += ConstMatMap(array_of(bias).data(), 1, cols).row(0);
  return op_node(x.shape(), std::move(out), "add_bias", {x, bias},
                 [rows, cols](detail::Node& self) {
                   auto& px = *self.parents[0];
                   auto& pb = *self.parents[1];
                   if (px.requires_grad) px.accumulate(self.grad);
                   if (pb.requires_grad) {
                     ConstMatMap G(self.grad.data(), rows, cols);
                     Eigen::ArrayXd gb(static_cast<Eigen::Index>(cols));
                     Eigen::Map<Eigen::RowVectorXd>(gb.data(), cols) =
                         G.colwise().sum();
                     pb.accumulate(gb);
                   }
                 });
}

// ---- activations -----------------------------------------------------------

Tensor sigmoid(const Tensor& x) {
  Eigen::ArrayXd y =
      0.5 * (1.0 + (0.5 * array_of(x)).tanh());  // stable logistic
  return op_node(x.shape(), std::move(y), "sigmoid", {x},
                 [](detail::Node& self) {
                   const auto& y = self.values;
                   self.parents[0]->accumulate(self.grad * y * (1.0 - y));
                 });
}

Tensor tanh_act(const Tensor& x) {
  return op_node(x.shape(), array_of(x).tanh(), "tanh", {x},
                 [](detail::Node& self) {
                   const auto& y = self.values;
                   self.parents[0]->accumulate(self.grad * (1.0 - y * y));
                 });
}

Tensor leaky_relu(const Tensor& x, double alpha) {
  const auto& v = array_of(x);
  Eigen::ArrayXd y = (v > 0.0).select(v, alpha * v);
  return op_node(x.shape(), std::move(y), "leaky_relu", {x},
                 [alpha](detail::Node& self) {
                   const auto& v = self.parents[0]->values;
                   Eigen::ArrayXd g =
                       (v > 0.0).select(self.grad, alpha * self.grad);
                   self.parents[0]->accumulate(g);
                 });
}

Tensor gelu(const Tensor& x) {
  const auto& v = array_of(x);
  const double inv_sqrt2 = 1.0 / std::numbers::sqrt2;
  Eigen::ArrayXd y(v.size());
  for (Eigen::Index i = 0; i < v.size(); ++i) {
    y[i] = 0.5 * v[i] * (1.0 + std::erf(v[i] * inv_sqrt2));
  }
  return op_node(
      x.shape(), std::move(y), "gelu", {x}, [inv_sqrt2](detail::Node& self) {
        const auto& v = self.parents[0]->values;
        const double inv_sqrt2pi = 1.0 / std::sqrt(2.0 * std::numbers::pi);
        Eigen::ArrayXd g(v.size());
        for (Eigen::Index i = 0; i < v.size(); ++i) {
          const double cdf = 0.5 * (1.0 + std::erf(v[i] * inv_sqrt2));
          const double pdf = inv_sqrt2pi * std::exp(-0.5 * v[i] * v[i]);
          g[i] = self.grad[i] * (cdf + v[i] * pdf);
        }
        self.parents[0]->accumulate(g);
      });
}

Tensor softmax(const Tensor& x) {
  auto [rows, cols] = last_axis_view(x.shape());
  Eigen::ArrayXd out(array_of(x).size());
  {
    ConstMatMap in(array_of(x).data(), rows, cols);
    MatMap y(out.data(), rows, cols);
    for (std::size_t r = 0; r < rows; ++r) {
      const double m = in.row(r).maxCoeff();
      y.row(r) = (in.row(r).array() - m).exp();
      y.row(r) /= y.row(r).sum();
    }
  }
  return op_node(x.shape(), std::move(out), "softmax", {x},
                 [rows, cols](detail::Node& self) {
                   ConstMatMap y(self.values.data(), rows, cols);
                   ConstMatMap g(self.grad.data(), rows, cols);
                   Eigen::ArrayXd gx(self.grad.size());
                   MatMap out(gx.data(), rows, cols);
                   for (std::size_t r = 0; r < rows; ++r) {
                     const double dot = (g.row(r).array() * y.row(r).array()).sum();
                     out.row(r) = y.row(r).array() * (g.row(r).array() - dot);
                   }
                   self.parents[0]->accumulate(gx);
                 });
}

Tensor layer_norm(const Tensor& x, const Tensor& gain, const Tensor& bias,
                  double eps) {
  auto [rows, cols] = last_axis_view(x.shape());
  if (gain.rank() != 1 || gain.shape()[0] != cols || bias.shape() != gain.shape()) {
    throw ShapeError("layer_norm: gain/bias must be rank 1 of size " +
                     std::to_string(cols));
  }
  Eigen::ArrayXd xhat(array_of(x).size());
  Eigen::ArrayXd inv_std(static_cast<Eigen::Index>(rows));
  Eigen::ArrayXd out(array_of(x).size());
  {
    ConstMatMap in(array_of(x).data(), rows, cols);
    MatMap xh(xhat.data(), rows, cols);
    MatMap o(out.data(), rows, cols);
    Eigen::Map<const Eigen::ArrayXd> g(array_of(gain).data(), cols);
    Eigen::Map<const Eigen::ArrayXd> b(array_of(bias).data(), cols);
    for (std::size_t r = 0; r < rows; ++r) {
      const double mu = in.row(r).mean();
      const double var = (in.row(r).array() - mu).square().mean();
      const double is = 1.0 / std::sqrt(var + eps);
      inv_std[static_cast<Eigen::Index>(r)] = is;
      xh.row(r) = (in.row(r).array() - mu) * is;
      o.row(r) = xh.row(r).array() * g.transpose() + b.transpose();
    }
  }
  return op_node(
      x.shape(), std::move(out), "layer_norm", {x, gain, bias},
      [rows, cols, xhat, inv_std](detail::Node& self) {
        auto& px = *self.parents[0];
        auto& pg = *self.parents[1];
        auto& pb = *self.parents[2];
        ConstMatMap g(self.grad.data(), rows, cols);
        ConstMatMap xh(xhat.data(), rows, cols);
        Eigen::Map<const Eigen::ArrayXd> gain(pg.values.data(), cols);
        if (px.requires_grad) {
          Eigen::ArrayXd gx(self.grad.size());
          MatMap out(gx.data(), rows, cols);
          for (std::size_t r = 0; r < rows; ++r) {
            Eigen::ArrayXd gh = g.row(r).array().transpose() * gain;
            const double mean_gh = gh.mean();
            const double mean_ghx =
                (gh * xh.row(r).array().transpose()).mean();
            out.row(r) =
                ((gh - mean_gh - xh.row(r).array().transpose() * mean_ghx) *
                 inv_std[static_cast<Eigen::Index>(r)])
                    .transpose();
          }
          px.accumulate(gx);
        }
        if (pg.requires_grad) {
          Eigen::ArrayXd gg = Eigen::ArrayXd::Zero(cols);
          for (std::size_t r = 0; r < rows; ++r) {
            gg += g.row(r).array().transpose() * xh.row(r).array().transpose();
          }
          pg.accumulate(gg);
        }
        if (pb.requires_grad) {
          Eigen::ArrayXd gb(static_cast<Eigen::Index>(cols));
          Eigen::Map<Eigen::RowVectorXd>(gb.data(), cols) = g.colwise().sum();
          pb.accumulate(gb);
        }
      });
}

BatchNorm2d BatchNorm2d::make(std::size_t channels) {
  BatchNorm2d bn;
  bn.gain = Tensor::full({channels}, 1.0, true);
  bn.bias = Tensor::zeros({channels}, true);
  bn.running_mean = Tensor::zeros({channels});
  bn.running_var = Tensor::ones({channels});
  return bn;
}

Tensor batch_norm2d(const Tensor& x, BatchNorm2d& bn, Mode mode) {
  if (x.rank() != 3) {
    throw ShapeError("batch_norm2d: [C,H,W] input required, got " +
                     shape_str(x.shape()));
  }
  const std::size_t C = x.shape()[0];
  const std::size_t hw = x.shape()[1] * x.shape()[2];
  if (bn.gain.shape()[0] != C) {
    throw ShapeError("batch_norm2d: state has " +
                     std::to_string(bn.gain.shape()[0]) + " channels, input " +
                     std::to_string(C));
  }
  Eigen::ArrayXd mean_used(static_cast<Eigen::Index>(C));
  Eigen::ArrayXd var_used(static_cast<Eigen::Index>(C));
  {
    ConstMatMap in(array_of(x).data(), C, hw);
    if (mode == Mode::train) {
      for (std::size_t c = 0; c < C; ++c) {
        mean_used[c] = in.row(c).mean();
        var_used[c] = (in.row(c).array() - mean_used[c]).square().mean();
      }
      auto rm = bn.running_mean.mutable_values();
      auto rv = bn.running_var.mutable_values();
      for (std::size_t c = 0; c < C; ++c) {
        rm[c] = (1.0 - bn.momentum) * rm[c] + bn.momentum * mean_used[c];
        rv[c] = (1.0 - bn.momentum) * rv[c] + bn.momentum * var_used[c];
      }
    } else {
      auto rm = bn.running_mean.values();
      auto rv = bn.running_var.values();
      for (std::size_t c = 0; c < C; ++c) {
        mean_used[c] = rm[c];
        var_used[c] = rv[c];
      }
    }
  }
  Eigen::ArrayXd xhat(array_of(x).size());
  Eigen::ArrayXd out(array_of(x).size());
  Eigen::ArrayXd inv_std = (var_used + bn.eps).sqrt().inverse();
  {
    ConstMatMap in(array_of(x).data(), C, hw);
    MatMap xh(xhat.data(), C, hw);
    MatMap o(out.data(), C, hw);
    const auto& g = array_of(bn.gain);
    const auto& b = array_of(bn.bias);
    for (std::size_t c = 0; c < C; ++c) {
      xh.row(c) = (in.row(c).array() - mean_used[c]) * inv_std[c];
      o.row(c) = xh.row(c).array() * g[c] + b[c];
    }
  }
  const bool train = mode == Mode::train;
  return op_node(
      x.shape(), std::move(out), "batch_norm2d", {x, bn.gain, bn.bias},
      [C, hw, xhat, inv_std, train](detail::Node& self) {
        auto& px = *self.parents[0];
        auto& pg = *self.parents[1];
        auto& pb = *self.parents[2];
        ConstMatMap g(self.grad.data(), C, hw);
        ConstMatMap xh(xhat.data(), C, hw);
        if (px.requires_grad) {
          Eigen::ArrayXd gx(self.grad.size());
          MatMap out(gx.data(), C, hw);
          for (std::size_t c = 0; c < C; ++c) {
            const double gamma = pg.values[c];
            Eigen::ArrayXd gh = g.row(c).array().transpose() * gamma;
            if (train) {
              const double mean_gh = gh.mean();
              const double mean_ghx =
                  (gh * xh.row(c).array().transpose()).mean();
              out.row(c) = ((gh - mean_gh -
                             xh.row(c).array().transpose() * mean_ghx) *
                            inv_std[c])
                               .transpose();
            } else {
              out.row(c) = (gh * inv_std[c]).transpose();
            }
          }
          px.accumulate(gx);
        }
        if (pg.requires_grad) {
          Eigen::ArrayXd gg(static_cast<Eigen::Index>(C));
          for (std::size_t c = 0; c < C; ++c) {
            gg[c] = (g.row(c).array() * xh.row(c).array()).sum();
          }
          pg.accumulate(gg);
        }
        if (pb.requires_grad) {
          Eigen::ArrayXd gb(static_cast<Eigen::Index>(C));
          for (std::size_t c = 0; c < C; ++c) gb[c] = g.row(c).sum();
          pb.accumulate(gb);
        }
      });
}

// ---- structural ------------------------------------------------------------

Tensor reshape(const Tensor& x, Shape shape) {
  if (shape_numel(shape) != x.size()) {
    throw ShapeError("reshape: cannot view " + shape_str(x.shape()) + " as " +
                     shape_str(shape));
  }
  return op_node(std::move(shape), array_of(x), "reshape", {x},
                 [](detail::Node& self) {
                   self.parents[0]->accumulate(self.grad);
                 });
}

Tensor concat_rows(const Tensor& a, const Tensor& b) {
  if (a.rank() != 2 || b.rank() != 2 || a.shape()[1] != b.shape()[1]) {
    throw ShapeError("concat_rows: need matching column counts, got " +
                     shape_str(a.shape()) + " and " + shape_str(b.shape()));
  }
  const std::size_t ra = a.shape()[0], rb = b.shape()[0], c = a.shape()[1];
  Eigen::ArrayXd out(static_cast<Eigen::Index>((ra + rb) * c));
  std::copy_n(array_of(a).data(), ra * c, out.data());
  std::copy_n(array_of(b).data(), rb * c, out.data() + ra * c);
  return op_node({ra + rb, c}, std::move(out), "concat_rows", {a, b},
                 [ra, rb, c](detail::Node& self) {
                   auto& pa = *self.parents[0];
                   auto& pb = *self.parents[1];
                   if (pa.requires_grad) {
                     pa.accumulate(self.grad.head(ra * c));
                   }
                   if (pb.requires_grad) {
                     pb.accumulate(self.grad.tail(rb * c));
                   }
                 });
}

Tensor concat_cols(const Tensor& a, const Tensor& b) {
  if (a.rank() != 2 || b.rank() != 2 || a.shape()[0] != b.shape()[0]) {
    throw ShapeError("concat_cols: need matching row counts, got " +
                     shape_str(a.shape()) + " and " + shape_str(b.shape()));
  }
  const std::size_t r = a.shape()[0], ca = a.shape()[1], cb = b.shape()[1];
  Eigen::ArrayXd out(static_cast<Eigen::Index>(r * (ca + cb)));
  for (std::size_t i = 0; i < r; ++i) {
    std::copy_n(array_of(a).data() + i * ca, ca, out.data() + i * (ca + cb));
    std::copy_n(array_of(b).data() + i * cb, cb,
                out.data() + i * (ca + cb) + ca);
  }
  return op_node({r, ca + cb}, std::move(out), "concat_cols", {a, b},
                 [r, ca, cb](detail::Node& self) {
                   auto& pa = *self.parents[0];
                   auto& pb = *self.parents[1];
                   if (pa.requires_grad) {
                     Eigen::ArrayXd ga(static_cast<Eigen::Index>(r * ca));
                     for (std::size_t i = 0; i < r; ++i) {
                       std::copy_n(self.grad.data() + i * (ca + cb), ca,
                                   ga.data() + i * ca);
                     }
                     pa.accumulate(ga);
                   }
                   if (pb.requires_grad) {
                     Eigen::ArrayXd gb(static_cast<Eigen::Index>(r * cb));
                     for (std::size_t i = 0; i < r; ++i) {
                       std::copy_n(self.grad.data() + i * (ca + cb) + ca, cb,
                                   gb.data() + i * cb);
                     }
                     pb.accumulate(gb);
                   }
                 });
}

Tensor slice_rows(const Tensor& x, std::size_t begin, std::size_t count) {
  if (x.rank() != 2) {
    throw ShapeError("slice_rows: rank-2 tensor required");
  }
  const std::size_t r = x.shape()[0], c = x.shape()[1];
  if (begin + count > r) {
    throw ShapeError("slice_rows: range [" + std::to_string(begin) + "," +
                     std::to_string(begin + count) + ") exceeds " +
                     std::to_string(r) + " rows");
  }
  Eigen::ArrayXd out = array_of(x).segment(begin * c, count * c);
  return op_node({count, c}, std::move(out), "slice_rows", {x},
                 [begin, count, c, r](detail::Node& self) {
                   Eigen::ArrayXd g = Eigen::ArrayXd::Zero(r * c);
                   g.segment(begin * c, count * c) = self.grad;
                   self.parents[0]->accumulate(g);
                 });
}

Tensor clamp01(const Tensor& x) {
  Eigen::ArrayXd y = array_of(x).min(1.0).max(0.0);
  return op_node(x.shape(), std::move(y), "clamp01", {x},
                 [](detail::Node& self) {
                   const auto& v = self.parents[0]->values;
                   Eigen::ArrayXd g = ((v >= 0.0) && (v <= 1.0))
                                          .select(self.grad, 0.0);
                   self.parents[0]->accumulate(g);
                 });
}

Tensor extract_patches(const Tensor& image, std::size_t patch) {
  if (image.rank() != 3) {
    throw ShapeError("extract_patches: [C,H,W] image required, got " +
                     shape_str(image.shape()));
  }
  const std::size_t C = image.shape()[0], H = image.shape()[1],
                    W = image.shape()[2];
  if (patch == 0 || H % patch != 0 || W % patch != 0) {
    throw ShapeError("extract_patches: patch " + std::to_string(patch) +
                     " does not tile " + shape_str(image.shape()));
  }
  const std::size_t ph = H / patch, pw = W / patch;
  const std::size_t n = ph * pw, d = patch * patch * C;
  Eigen::ArrayXd out(static_cast<Eigen::Index>(n * d));
  const double* src = array_of(image).data();
  for (std::size_t py = 0; py < ph; ++py) {
    for (std::size_t px = 0; px < pw; ++px) {
      const std::size_t row = py * pw + px;
      double* dst = out.data() + row * d;
      for (std::size_t c = 0; c < C; ++c) {
        for (std::size_t y = 0; y < patch; ++y) {
          const double* line =
              src + c * H * W + (py * patch + y) * W + px * patch;
          std::copy_n(line, patch, dst);
          dst += patch;
        }
      }
    }
  }
  return op_node(
      {n, d}, std::move(out), "extract_patches", {image},
      [C, H, W, patch, ph, pw, d](detail::Node& self) {
        Eigen::ArrayXd g = Eigen::ArrayXd::Zero(C * H * W);
        for (std::size_t py = 0; py < ph; ++py) {
          for (std::size_t px = 0; px < pw; ++px) {
            const std::size_t row = py * pw + px;
            const double* src = self.grad.data() + row * d;
            for (std::size_t c = 0; c < C; ++c) {
              for (std::size_t y = 0; y < patch; ++y) {
                double* line =
                    g.data() + c * H * W + (py * patch + y) * W + px * patch;
                for (std::size_t xcol = 0; xcol < patch; ++xcol) {
                  line[xcol] += src[xcol];
                }
                src += patch;
              }
            }
          }
        }
        self.parents[0]->accumulate(g);
      });
}

// ---- reductions and losses ---------------------------------------------------

Tensor sum(const Tensor& x) {
  Eigen::ArrayXd out(1);
  out[0] = array_of(x).sum();
  return op_node({1}, std::move(out), "sum", {x}, [](detail::Node& self) {
    auto& p = *self.parents[0];
    p.accumulate(Eigen::ArrayXd::Constant(p.values.size(), self.grad[0]));
  });
}

Tensor mean(const Tensor& x) {
  const double n = static_cast<double>(x.size());
  Eigen::ArrayXd out(1);
  out[0] = array_of(x).mean();
  return op_node({1}, std::move(out), "mean", {x}, [n](detail::Node& self) {
    auto& p = *self.parents[0];
    p.accumulate(
        Eigen::ArrayXd::Constant(p.values.size(), self.grad[0] / n));
  });
}

Tensor sqrt_scalar(const Tensor& x) {
  if (x.size() != 1) {
    throw ContractError("sqrt_scalar: scalar input required");
  }
  const double v = array_of(x)[0];
  if (v < 0.0) throw ContractError("sqrt_scalar: negative input");
  Eigen::ArrayXd out(1);
  out[0] = std::sqrt(v);
  return op_node({1}, std::move(out), "sqrt", {x}, [](detail::Node& self) {
    const double y = self.values[0];
    Eigen::ArrayXd g(1);
    g[0] = y > 0.0 ? self.grad[0] / (2.0 * y) : 0.0;  // guarded at zero
    self.parents[0]->accumulate(g);
  });
}

Tensor cross_entropy(const Tensor& logits, std::size_t label) {
  const std::size_t n = logits.size();
  if (logits.rank() != 1) {
    throw ShapeError("cross_entropy: rank-1 logits required, got " +
                     shape_str(logits.shape()));
  }
  if (label >= n) {
    throw ContractError("cross_entropy: label " + std::to_string(label) +
                        " out of range for " + std::to_string(n) + " logits");
  }
  const auto& v = array_of(logits);
  const double m = v.maxCoeff();
  Eigen::ArrayXd p = (v - m).exp();
  const double z = p.sum();
  p /= z;
  Eigen::ArrayXd out(1);
  out[0] = m + std::log(z) - v[label];
  return op_node({1}, std::move(out), "cross_entropy", {logits},
                 [p, label](detail::Node& self) {
                   Eigen::ArrayXd g = p;
                   g[label] -= 1.0;
                   self.parents[0]->accumulate(self.grad[0] * g);
                 });
}

// ---- stochastic --------------------------------------------------------------

Tensor dropout(const Tensor& x, double p, Mode mode, Rng& rng) {
  if (p < 0.0 || p >= 1.0) {
    throw ConfigError("dropout: probability must lie in [0,1), got " +
                      std::to_string(p));
  }
  if (mode == Mode::eval || p == 0.0) {
    return op_node(x.shape(), array_of(x), "dropout", {x},
                   [](detail::Node& self) {
                     self.parents[0]->accumulate(self.grad);
                   });
  }
  const double keep = 1.0 - p;
  Eigen::ArrayXd mask(array_of(x).size());
  for (Eigen::Index i = 0; i < mask.size(); ++i) {
    mask[i] = rng.bernoulli(p) ? 0.0 : 1.0 / keep;
  }
  return op_node(x.shape(), array_of(x) * mask, "dropout", {x},
                 [mask](detail::Node& self) {
                   self.parents[0]->accumulate(self.grad * mask);
                 });
}

// ---- convolution ---------------------------------------------------------------

namespace {

// im2col for stride-1 same-padded cross-correlation:
// cols[ci*kh*kw + ky*kw + kx, y*W + x] = input[ci, y+ky-pad, x+kx-pad].
void fill_im2col(const double* input, std::size_t C, std::size_t H,
                 std::size_t W, std::size_t kh, std::size_t kw, RowMat& cols) {
  const std::ptrdiff_t pad_y = static_cast<std::ptrdiff_t>(kh / 2);
  const std::ptrdiff_t pad_x = static_cast<std::ptrdiff_t>(kw / 2);
  cols.setZero();
  for (std::size_t c = 0; c < C; ++c) {
    for (std::size_t ky = 0; ky < kh; ++ky) {
      for (std::size_t kx = 0; kx < kw; ++kx) {
        const std::size_t row = (c * kh + ky) * kw + kx;
        for (std::size_t y = 0; y < H; ++y) {
          const std::ptrdiff_t sy =
              static_cast<std::ptrdiff_t>(y + ky) - pad_y;
          if (sy < 0 || sy >= static_cast<std::ptrdiff_t>(H)) continue;
          const std::ptrdiff_t x_lo = std::max<std::ptrdiff_t>(0, pad_x - static_cast<std::ptrdiff_t>(kx));
          const std::ptrdiff_t x_hi = std::min<std::ptrdiff_t>(
              static_cast<std::ptrdiff_t>(W),
              static_cast<std::ptrdiff_t>(W) + pad_x - static_cast<std::ptrdiff_t>(kx));
          for (std::ptrdiff_t x = x_lo; x < x_hi; ++x) {
            const std::ptrdiff_t sx = x + static_cast<std::ptrdiff_t>(kx) - pad_x;
            cols(row, y * W + x) = input[(c * H + sy) * W + sx];
          }
        }
      }
    }
  }
}

}  // namespace

Tensor conv2d_same(const Tensor& input, const Tensor& kernels,
                   const Tensor& bias) {
  if (input.rank() != 3 || kernels.rank() != 4 || bias.rank() != 1) {
    throw ShapeError("conv2d: expected input [C,H,W], kernels [O,C,kh,kw], "
                     "bias [O]");
  }
  const std::size_t C = input.shape()[0], H = input.shape()[1],
                    W = input.shape()[2];
  const std::size_t O = kernels.shape()[0], kc = kernels.shape()[1],
                    kh = kernels.shape()[2], kw = kernels.shape()[3];
  if (kc != C) {
    throw ShapeError("conv2d: kernel channel count " + std::to_string(kc) +
                     " vs input " + std::to_string(C));
  }
  if (kh % 2 == 0 || kw % 2 == 0) {
    throw ConfigError("conv2d: even kernel size " + std::to_string(kh) + "x" +
                      std::to_string(kw) + "; same padding needs odd sizes");
  }
  if (bias.shape()[0] != O) {
    throw ShapeError("conv2d: bias size " + shape_str(bias.shape()) +
                     " vs output channels " + std::to_string(O));
  }
  const std::size_t hw = H * W, kd = C * kh * kw;

  RowMat cols(kd, hw);
  fill_im2col(array_of(input).data(), C, H, W, kh, kw, cols);
  Eigen::ArrayXd out(static_cast<Eigen::Index>(O * hw));
  {
    ConstMatMap K(array_of(kernels).data(), O, kd);
    MatMap Y(out.data(), O, hw);
    Y.noalias() = K * cols;
    Y.colwise() += Eigen::Map<const Eigen::VectorXd>(array_of(bias).data(), O);
  }
  // Backward rebuilds the im2col matrix from the saved parent values rather
  // than retaining it; graphs hold many conv nodes at once.
  return op_node(
      {O, H, W}, std::move(out), "conv2d", {input, kernels, bias},
      [C, H, W, O, kh, kw, kd, hw](detail::Node& self) {
        auto& pin = *self.parents[0];
        auto& pker = *self.parents[1];
        auto& pbias = *self.parents[2];
        ConstMatMap G(self.grad.data(), O, hw);
        if (pbias.requires_grad) {
          Eigen::ArrayXd gb(static_cast<Eigen::Index>(O));
          Eigen::Map<Eigen::VectorXd>(gb.data(), O) = G.rowwise().sum();
          pbias.accumulate(gb);
        }
        if (pker.requires_grad) {
          RowMat cols(kd, hw);
          fill_im2col(pin.values.data(), C, H, W, kh, kw, cols);
          Eigen::ArrayXd gk(static_cast<Eigen::Index>(O * kd));
          MatMap(gk.data(), O, kd).noalias() = G * cols.transpose();
          pker.accumulate(gk);
        }
        if (pin.requires_grad) {
          ConstMatMap K(pker.values.data(), O, kd);
          RowMat gcols(kd, hw);
          gcols.noalias() = K.transpose() * G;
          // col2im scatter-add
          Eigen::ArrayXd gx = Eigen::ArrayXd::Zero(C * H * W);
          const std::ptrdiff_t pad_y = static_cast<std::ptrdiff_t>(kh / 2);
          const std::ptrdiff_t pad_x = static_cast<std::ptrdiff_t>(kw / 2);
          for (std::size_t c = 0; c < C; ++c) {
            for (std::size_t ky = 0; ky < kh; ++ky) {
              for (std::size_t kx = 0; kx < kw; ++kx) {
                const std::size_t row = (c * kh + ky) * kw + kx;
                for (std::size_t y = 0; y < H; ++y) {
                  const std::ptrdiff_t sy =
                      static_cast<std::ptrdiff_t>(y + ky) - pad_y;
                  if (sy < 0 || sy >= static_cast<std::ptrdiff_t>(H)) continue;
                  for (std::size_t x = 0; x < W; ++x) {
                    const std::ptrdiff_t sx =
                        static_cast<std::ptrdiff_t>(x + kx) - pad_x;
                    if (sx < 0 || sx >= static_cast<std::ptrdiff_t>(W)) {
                      continue;
                    }
                    gx[(c * H + sy) * W + sx] += gcols(row, y * W + x);
                  }
                }
              }
            }
          }
          pin.accumulate(gx);
        }
      });
}

}  // namespace agrifuse
