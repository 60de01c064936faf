#pragma once

// Reverse-mode automatic differentiation over Tensor values.
//
// Every operation's backward rule is itself written with the differentiable
// operations below, so requesting gradients with create_graph = true yields a
// graph that can be differentiated again. This is what lets the meta trainer
// differentiate an unrolled attack (whose steps use input gradients of the
// surrogate) with respect to the surrogate's weights.

#include <cstdint>
#include <functional>
#include <memory>
#include <span>
#include <vector>

#include "mta/tensor.hpp"

namespace mta::ad {

class Var;

/// Which parents of a node need a gradient in the current pass.
using Needed = std::vector<bool>;

/// Maps the gradient of a node's output to gradients of its parents, in
/// parent order. An undefined Var means "zero"; rules may skip parents whose
/// `needed` entry is false.
using BackwardFn = std::function<std::vector<Var>(const Var& grad_output, const Needed& needed)>;

struct Node {
  Tensor value;
  bool requires_grad = false;
  std::vector<Var> parents;
  BackwardFn backward;
  const char* op = "leaf";
};

/// Shared handle to a graph node. Copies alias the same node.
class Var {
 public:
  Var() = default;
  explicit Var(Tensor value, bool requires_grad = false);

  bool defined() const noexcept { return static_cast<bool>(node_); }
  const Tensor& value() const;
  /// Only leaves may be mutated in place (parameter updates). Handle
  /// semantics: constness of the handle does not extend to the node.
  Tensor& mutable_value() const;
  const Shape& shape() const { return value().shape(); }
  std::size_t size() const { return value().size(); }
  bool requires_grad() const noexcept { return node_ && node_->requires_grad; }
  bool is_leaf() const noexcept { return node_ && !node_->backward; }

  /// Constant copy of the value, cut from the graph.
  Var detach() const;

  Node* node() const noexcept { return node_.get(); }
  static Var from_node(std::shared_ptr<Node> node) {
    Var v;
    v.node_ = std::move(node);
    return v;
  }

 private:
  std::shared_ptr<Node> node_;
};

bool grad_enabled() noexcept;

/// Disables graph recording on this thread for its lifetime.
class NoGradGuard {
 public:
  NoGradGuard();
  ~NoGradGuard();
  NoGradGuard(const NoGradGuard&) = delete;
  NoGradGuard& operator=(const NoGradGuard&) = delete;

 private:
  bool previous_;
};

class EnableGradGuard {
 public:
  EnableGradGuard();
  ~EnableGradGuard();
  EnableGradGuard(const EnableGradGuard&) = delete;
  EnableGradGuard& operator=(const EnableGradGuard&) = delete;

 private:
  bool previous_;
};

/// Records a result node when grad mode is on and any parent requires grad;
/// otherwise returns a constant.
Var make_result(Tensor value, std::vector<Var> parents, BackwardFn backward, const char* op);

/// Gradients of `output` with respect to each of `inputs`. The output must
/// hold one element unless `grad_output` supplies the seed. Inputs without a
/// path from the output get a zero tensor. With create_graph the returned
/// gradients are themselves differentiable.
std::vector<Var> grad(const Var& output, std::span<const Var> inputs, bool create_graph = false,
                      const Var& grad_output = {});

// ---- elementwise -----------------------------------------------------------

Var add(const Var& a, const Var& b);
Var sub(const Var& a, const Var& b);
Var mul(const Var& a, const Var& b);
Var div(const Var& a, const Var& b);
Var scale(const Var& a, double factor);
Var add_scalar(const Var& a, double offset);
Var neg(const Var& a);
Var abs(const Var& a);
/// Piecewise constant; never carries gradient.
Var sign(const Var& a);
Var atan(const Var& a);

using ConstTensor = std::shared_ptr<const Tensor>;

/// a * m with m a constant of the same shape.
Var mul_const(const Var& a, ConstTensor m);
Var relu(const Var& a);
/// Clamp to [lo, hi]; gradient passes only where lo <= a <= hi.
Var clip(const Var& a, double lo, double hi);
/// Entries equal to zero are replaced by `fill`; they carry no gradient.
Var replace_zero(const Var& a, double fill);
/// y[..., c] = a[..., c] * scale[c] + shift[c] over the last axis.
Var affine_channels(const Var& a, std::shared_ptr<const std::vector<double>> scale,
                    std::shared_ptr<const std::vector<double>> shift);

// ---- structural ------------------------------------------------------------

Var reshape(const Var& a, Shape shape);
/// 2-D product op(a) * op(b).
Var matmul(const Var& a, const Var& b, bool trans_a = false, bool trans_b = false);

/// Viewing `a` as (outer, mid, inner), sums over mid. Result has `out_shape`
/// with outer * inner elements.
Var reduce_mid(const Var& a, std::size_t outer, std::size_t mid, std::size_t inner, Shape out_shape);
/// Adjoint of reduce_mid: repeats (outer, inner) along a new mid axis.
Var expand_mid(const Var& a, std::size_t outer, std::size_t mid, std::size_t inner, Shape out_shape);

using IndexMap = std::shared_ptr<const std::vector<std::int64_t>>;

/// out[i] = a[index[i]], or 0 where index[i] < 0.
Var gather(const Var& a, IndexMap index, Shape out_shape);
/// Adjoint of gather: out[index[i]] += a[i].
Var scatter(const Var& a, IndexMap index, Shape out_shape);

struct ConvGeometry {
  std::size_t batch = 0, height = 0, width = 0, channels = 0;
  std::size_t kernel_h = 1, kernel_w = 1, stride = 1, pad = 0;
  std::size_t out_h() const { return (height + 2 * pad - kernel_h) / stride + 1; }
  std::size_t out_w() const { return (width + 2 * pad - kernel_w) / stride + 1; }
  std::size_t patch() const { return kernel_h * kernel_w * channels; }
  std::size_t rows() const { return batch * out_h() * out_w(); }
};

/// (B, H, W, C) -> (B * OH * OW, KH * KW * C) patch matrix; zero padding.
Var im2col(const Var& x, const ConvGeometry& geom);
/// Adjoint of im2col.
Var col2im(const Var& cols, const ConvGeometry& geom);

// ---- losses ------------------------------------------------------------------

/// Row-wise softmax of a (B, K) matrix.
Var softmax_rows(const Var& logits);
/// Per-example cross entropy, shape (B).
Var cross_entropy(const Var& logits, std::span<const int> labels);

/// Sum of all elements, shape (1).
Var sum_all(const Var& a);
Var mean_all(const Var& a);
/// Sum over everything but the leading axis, shape (B).
Var sum_per_row(const Var& a);
/// Broadcasts a (B) vector over a tensor of `shape` with leading axis B.
Var expand_per_row(const Var& v, const Shape& shape);

}  // namespace mta::ad
