// SPDX-License-Identifier: Apache-2.0
//
// Dense double-precision tensors with reverse-mode differentiation.
// Tensors are cheap handles onto shared nodes; operations on tracked
// tensors record a backward rule, and backward() on a scalar loss fills
// the grad buffer of every tracked leaf. Eigen backs the dense kernels.

#ifndef AGRIFUSE_TENSOR_HPP
#define AGRIFUSE_TENSOR_HPP

#include <cstddef>
#include <functional>
#include <initializer_list>
#include <memory>
#include <span>
#include <string>
#include <vector>

#include <Eigen/Core>

#include "agrifuse/errors.hpp"
#include "agrifuse/rng.hpp"

namespace agrifuse {

using Shape = std::vector<std::size_t>;

enum class Mode { train, eval };

class Tensor;

/// Callback over named parameters; the visit order is the canonical
/// parameter order for optimizers and checkpoints.
using ParamVisitor = std::function<void(const std::string&, Tensor&)>;

std::string shape_str(const Shape& s);
std::size_t shape_numel(const Shape& s);

namespace detail {

struct Node {
  Shape shape;
  Eigen::ArrayXd values;
  Eigen::ArrayXd grad;       // allocated on first accumulation
  bool requires_grad = false;
  bool has_grad = false;
  const char* op = "leaf";
  std::vector<std::shared_ptr<Node>> parents;
  std::function<void(Node&)> backprop;  // pushes self.grad into parents

  void accumulate(const Eigen::ArrayXd& g);
};

/// While false, newly created ops record no graph (pure value computation).
/// Scoped via GradGuard; thread-local so parallel workers stay independent.
bool grad_enabled();

}  // namespace detail

/// Scoped disable of graph recording for eval-mode forwards.
class NoGradGuard {
 public:
  NoGradGuard();
  ~NoGradGuard();
  NoGradGuard(const NoGradGuard&) = delete;
  NoGradGuard& operator=(const NoGradGuard&) = delete;

 private:
  bool saved_;
};

class Tensor {
 public:
  Tensor() = default;

  /// Internal: wraps an existing node. Used by the op implementations.
  explicit Tensor(std::shared_ptr<detail::Node> node)
      : node_(std::move(node)) {}

  static Tensor zeros(Shape shape, bool requires_grad = false);
  static Tensor ones(Shape shape);
  static Tensor full(Shape shape, double value, bool requires_grad = false);
  static Tensor from_vector(Shape shape, std::vector<double> values,
                            bool requires_grad = false);
  static Tensor scalar(double value);
  /// Uniform in [-a, a] with a = sqrt(6 / (fan_in + fan_out)).
  static Tensor xavier_uniform(Shape shape, std::size_t fan_in,
                               std::size_t fan_out, Rng& rng);

  bool defined() const { return node_ != nullptr; }
  const Shape& shape() const;
  std::size_t rank() const { return shape().size(); }
  std::size_t size() const;
  bool requires_grad() const;
  void set_requires_grad(bool value);

  std::span<const double> values() const;
  /// Leaf-only write access (parameter init, data buffers).
  std::span<double> mutable_values();
  double item() const;  // scalar tensors
  double at(std::initializer_list<std::size_t> index) const;

  bool has_grad() const;
  std::span<const double> grad() const;
  void zero_grad();

  /// Reverse-mode sweep from a scalar. Each reachable node is visited once
  /// in reverse topological order; leaf grads accumulate additively.
  void backward();

  /// Value copy detached from any graph.
  Tensor detach() const;

  detail::Node* node() const { return node_.get(); }
  const std::shared_ptr<detail::Node>& node_ptr() const { return node_; }

 private:
  std::shared_ptr<detail::Node> node_;
};

const Eigen::ArrayXd& array_of(const Tensor& t);

// ---- arithmetic -----------------------------------------------------------

Tensor matmul(const Tensor& a, const Tensor& b);
Tensor transpose(const Tensor& x);
Tensor add(const Tensor& a, const Tensor& b);
Tensor sub(const Tensor& a, const Tensor& b);
Tensor hadamard(const Tensor& a, const Tensor& b);
Tensor scale(const Tensor& x, double c);
Tensor add_scalar(const Tensor& x, double c);
/// x[..., d] + bias[d], broadcast over leading axes.
Tensor add_bias(const Tensor& x, const Tensor& bias);

inline Tensor operator+(const Tensor& a, const Tensor& b) { return add(a, b); }
inline Tensor operator-(const Tensor& a, const Tensor& b) { return sub(a, b); }
inline Tensor operator*(double c, const Tensor& x) { return scale(x, c); }

// ---- activations and normalizers ------------------------------------------

Tensor sigmoid(const Tensor& x);
Tensor tanh_act(const Tensor& x);
Tensor leaky_relu(const Tensor& x, double alpha = 0.01);
Tensor gelu(const Tensor& x);
/// Numerically stable softmax over the last axis.
Tensor softmax(const Tensor& x);
/// Per last-axis slice: (x - mean) / sqrt(var + eps), then gain/bias.
Tensor layer_norm(const Tensor& x, const Tensor& gain, const Tensor& bias,
                  double eps = 1e-5);

/// Per-channel running statistics plus learnable affine for [C,H,W] maps.
struct BatchNorm2d {
  Tensor gain;          // [C]
  Tensor bias;          // [C]
  Tensor running_mean;  // [C], untracked
  Tensor running_var;   // [C], untracked
  double momentum = 0.1;
  double eps = 1e-5;

  static BatchNorm2d make(std::size_t channels);
};

/// Train mode normalizes with batch statistics over H*W and updates the
/// running buffers; eval mode normalizes with the running buffers.
Tensor batch_norm2d(const Tensor& x, BatchNorm2d& bn, Mode mode);

// ---- structural ------------------------------------------------------------

Tensor reshape(const Tensor& x, Shape shape);
Tensor concat_rows(const Tensor& a, const Tensor& b);
Tensor concat_cols(const Tensor& a, const Tensor& b);
Tensor slice_rows(const Tensor& x, std::size_t begin, std::size_t count);
Tensor clamp01(const Tensor& x);
/// [C,H,W] -> [N, P*P*C]: one row per patch, row-major patch scan; within a
/// patch the layout is channel-major then row-major pixels.
Tensor extract_patches(const Tensor& image, std::size_t patch);

// ---- reductions and losses --------------------------------------------------

Tensor sum(const Tensor& x);
Tensor mean(const Tensor& x);
/// Scalar sqrt; backward is zero-guarded at 0 so rmse stays finite at equality.
Tensor sqrt_scalar(const Tensor& x);
/// -log softmax(logits)[label]; backward is softmax(logits) - onehot(label).
Tensor cross_entropy(const Tensor& logits, std::size_t label);

// ---- stochastic and convolution ---------------------------------------------

/// Inverted dropout: train mode zeroes with probability p and scales the
/// survivors by 1/(1-p); eval mode is the identity.
Tensor dropout(const Tensor& x, double p, Mode mode, Rng& rng);

/// Cross-correlation of [C_in,H,W] with [C_out,C_in,kh,kw] kernels plus
/// per-channel bias, zero "same" padding; odd kernel sides required.
Tensor conv2d_same(const Tensor& input, const Tensor& kernels,
                   const Tensor& bias);

}  // namespace agrifuse

#endif  // AGRIFUSE_TENSOR_HPP
