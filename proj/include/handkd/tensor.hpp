#pragma once

#include <functional>
#include <memory>
#include <string>
#include <vector>

namespace handkd {

using Shape = std::vector<int>;

int shape_numel(const Shape& s);
std::string shape_str(const Shape& s);

namespace detail {

/// One node of the compute graph. Values are computed eagerly at
/// construction; `backprop` pushes this node's grad into its parents.
struct TensorNode {
  Shape shape;
  std::vector<double> data;
  bool requires_grad = false;
  std::vector<double> grad;  // allocated on first use
  std::vector<std::shared_ptr<TensorNode>> parents;
  std::function<void(TensorNode&)> backprop;

  void ensure_grad() {
    if (grad.empty()) grad.assign(data.size(), 0.0);
  }
};

}  // namespace detail

/// Dense 64-bit float tensor with reverse-mode autodiff. Copies share the
/// underlying node; graphs are built eagerly and freed by refcount.
class Tensor {
 public:
  Tensor() = default;

  static Tensor zeros(Shape shape, bool requires_grad = false);
  static Tensor ones(Shape shape);
  static Tensor full(Shape shape, double value, bool requires_grad = false);
  static Tensor from_vec(Shape shape, std::vector<double> data,
                         bool requires_grad = false);
  static Tensor scalar(double value);

  bool defined() const { return node_ != nullptr; }
  const Shape& shape() const { return node_->shape; }
  int ndim() const { return static_cast<int>(node_->shape.size()); }
  int extent(int axis) const { return node_->shape[axis]; }
  int numel() const { return static_cast<int>(node_->data.size()); }
  bool requires_grad() const { return node_->requires_grad; }
  /// Flips gradient tracking on a leaf (used when freezing a model).
  /// Affects only graphs built after the call.
  void set_requires_grad(bool on) { node_->requires_grad = on; }

  const std::vector<double>& values() const { return node_->data; }
  /// Mutable access for leaf tensors (optimizer updates). Mutating a
  /// non-leaf invalidates gradients; callers only touch leaves.
  std::vector<double>& raw_data() { return node_->data; }
  double item() const;

  bool has_grad() const { return !node_->grad.empty(); }
  const std::vector<double>& grad() const;
  void zero_grad();

  /// Constant copy, cut off from the graph.
  Tensor detach() const;

  bool all_finite() const;

  detail::TensorNode* node() const { return node_.get(); }
  std::shared_ptr<detail::TensorNode> node_ptr() const { return node_; }
  static Tensor wrap(std::shared_ptr<detail::TensorNode> node);

 private:
  std::shared_ptr<detail::TensorNode> node_;
};

// ---- elementwise (equal shapes, or one side with a single element) ----
Tensor add(const Tensor& a, const Tensor& b);
Tensor sub(const Tensor& a, const Tensor& b);
Tensor mul(const Tensor& a, const Tensor& b);
Tensor div(const Tensor& a, const Tensor& b);
Tensor add(const Tensor& a, double c);
Tensor mul(const Tensor& a, double c);
Tensor neg(const Tensor& a);

inline Tensor operator+(const Tensor& a, const Tensor& b) { return add(a, b); }
inline Tensor operator-(const Tensor& a, const Tensor& b) { return sub(a, b); }
inline Tensor operator*(const Tensor& a, const Tensor& b) { return mul(a, b); }
inline Tensor operator/(const Tensor& a, const Tensor& b) { return div(a, b); }
inline Tensor operator+(const Tensor& a, double c) { return add(a, c); }
inline Tensor operator-(const Tensor& a, double c) { return add(a, -c); }
inline Tensor operator*(const Tensor& a, double c) { return mul(a, c); }
inline Tensor operator/(const Tensor& a, double c) { return mul(a, 1.0 / c); }
inline Tensor operator-(const Tensor& a) { return neg(a); }

// ---- linear algebra ----
/// Standard matrix product of an M×K by a K×N tensor.
Tensor matmul(const Tensor& a, const Tensor& b);
Tensor transpose(const Tensor& a);

// ---- shape plumbing ----
Tensor reshape(const Tensor& a, Shape shape);
/// Contiguous range [offset, offset+count) of the flattened tensor.
Tensor slice(const Tensor& a, int offset, int count);
/// Flat concatenation; result is 1-D.
Tensor concat(const std::vector<Tensor>& parts);

// ---- reductions / losses ----
/// Sum of squared differences, Σ(aᵢ−bᵢ)². Sum-reduced; callers apply any
/// mean normalization explicitly.
Tensor sq_l2(const Tensor& a, const Tensor& b);

// ---- nonlinearities ----
Tensor tanh_op(const Tensor& a);
/// Softmax over the flattened tensor (used on attention score rows).
Tensor softmax(const Tensor& a);

// ---- spatial ops on C×H×W maps ----
/// Per-pixel channel mixing: weights C_out×C_in, bias C_out.
Tensor conv_1x1(const Tensor& f, const Tensor& weights, const Tensor& bias);
/// Per-channel bilinear resampling with align-corners mapping
/// src = dst·(S−1)/(S'−1); a size-1 target samples the source center.
Tensor bilinear_resize(const Tensor& f, int out_h, int out_w);
/// 2-D convolution, input C×H×W, weights O×C×kh×kw, bias O.
Tensor conv2d(const Tensor& input, const Tensor& weights, const Tensor& bias,
              int stride, int pad);

// ---- rotations ----
/// Axis-angle (3-vector, radians) to 3×3 rotation matrix. Smooth at the
/// identity: sinθ/θ and (1−cosθ)/θ² switch to Taylor forms below θ=1e-6.
Tensor rodrigues(const Tensor& axis_angle);

// ---- autodiff driver ----
/// Reverse pass from a scalar loss; accumulates into .grad of every
/// requires_grad node reachable from it. Deterministic traversal order.
void backward(const Tensor& loss);
/// Zeroes grads of every node reachable from `root` (test/diagnostic aid).
void reset_graph_grads(const Tensor& root);

// ---- gradient verification harness ----
struct GradCheckResult {
  bool pass = false;
  double max_rel_err = 0.0;
  int worst_index = -1;
  std::string message;
};

/// Compares the AD gradient of f at `params` against central finite
/// differences, coordinate by coordinate. `f` must build its graph from the
/// tensor it is handed and return a scalar.
GradCheckResult finite_diff_check(const std::function<Tensor(const Tensor&)>& f,
                                  const Tensor& params, double step,
                                  double tol);

}  // namespace handkd
