#include "handkd/tensor.hpp"

#include <algorithm>
#include <cmath>
#include <sstream>
#include <stdexcept>
#include <unordered_set>
#include <utility>

namespace handkd {

namespace {

using detail::TensorNode;
using NodePtr = std::shared_ptr<TensorNode>;

[[noreturn]] void fail(const std::string& msg) {
  throw std::invalid_argument(msg);
}

NodePtr make_node(Shape shape, std::vector<double> data) {
  auto n = std::make_shared<TensorNode>();
  n->shape = std::move(shape);
  n->data = std::move(data);
  return n;
}

// ---- matmul kernels (row-major, accumulate into c) ----

// c[m×n] += a[m×k] · b[k×n]
void mm_nn(const double* a, const double* b, double* c, int m, int k, int n) {
  for (int i = 0; i < m; ++i) {
    const double* arow = a + static_cast<size_t>(i) * k;
    double* crow = c + static_cast<size_t>(i) * n;
    for (int p = 0; p < k; ++p) {
      const double av = arow[p];
      const double* brow = b + static_cast<size_t>(p) * n;
      for (int j = 0; j < n; ++j) crow[j] += av * brow[j];
    }
  }
}

// c[m×n] += a[m×k] · b[n×k]ᵀ
void mm_nt(const double* a, const double* b, double* c, int m, int k, int n) {
  for (int i = 0; i < m; ++i) {
    const double* arow = a + static_cast<size_t>(i) * k;
    double* crow = c + static_cast<size_t>(i) * n;
    for (int j = 0; j < n; ++j) {
      const double* brow = b + static_cast<size_t>(j) * k;
      double s = 0.0;
      for (int p = 0; p < k; ++p) s += arow[p] * brow[p];
      crow[j] += s;
    }
  }
}

// c[k×n] += a[m×k]ᵀ · b[m×n]
void mm_tn(const double* a, const double* b, double* c, int m, int k, int n) {
  for (int i = 0; i < m; ++i) {
    const double* arow = a + static_cast<size_t>(i) * k;
    const double* brow = b + static_cast<size_t>(i) * n;
    for (int p = 0; p < k; ++p) {
      const double av = arow[p];
      double* crow = c + static_cast<size_t>(p) * n;
      for (int j = 0; j < n; ++j) crow[j] += av * brow[j];
    }
  }
}

enum class EwMode { kSame, kScalarA, kScalarB };

EwMode ew_mode(const Tensor& a, const Tensor& b, const char* op) {
  if (a.shape() == b.shape()) return EwMode::kSame;
  if (b.numel() == 1) return EwMode::kScalarB;
  if (a.numel() == 1) return EwMode::kScalarA;
  fail(std::string(op) + ": incompatible shapes " + shape_str(a.shape()) +
       " and " + shape_str(b.shape()));
}

void require_ndim(const Tensor& t, int nd, const char* op) {
  if (t.ndim() != nd)
    fail(std::string(op) + ": expected " + std::to_string(nd) +
         "-d tensor, got shape " + shape_str(t.shape()));
}

double sum_of(const std::vector<double>& v) {
  double s = 0.0;
  for (double x : v) s += x;
  return s;
}

}  // namespace

int shape_numel(const Shape& s) {
  int n = 1;
  for (int d : s) {
    if (d <= 0) fail("shape has non-positive extent " + shape_str(s));
    n *= d;
  }
  return n;
}

std::string shape_str(const Shape& s) {
  std::ostringstream os;
  os << '[';
  for (size_t i = 0; i < s.size(); ++i) os << (i ? "," : "") << s[i];
  os << ']';
  return os.str();
}

// ---- Tensor basics ----

Tensor Tensor::zeros(Shape shape, bool requires_grad) {
  int n = shape_numel(shape);
  Tensor t;
  t.node_ = make_node(std::move(shape), std::vector<double>(n, 0.0));
  t.node_->requires_grad = requires_grad;
  return t;
}

Tensor Tensor::ones(Shape shape) { return full(std::move(shape), 1.0); }

Tensor Tensor::full(Shape shape, double value, bool requires_grad) {
  int n = shape_numel(shape);
  Tensor t;
  t.node_ = make_node(std::move(shape), std::vector<double>(n, value));
  t.node_->requires_grad = requires_grad;
  return t;
}

Tensor Tensor::from_vec(Shape shape, std::vector<double> data,
                        bool requires_grad) {
  if (static_cast<size_t>(shape_numel(shape)) != data.size())
    fail("from_vec: shape " + shape_str(shape) + " wants " +
         std::to_string(shape_numel(shape)) + " values, got " +
         std::to_string(data.size()));
  Tensor t;
  t.node_ = make_node(std::move(shape), std::move(data));
  t.node_->requires_grad = requires_grad;
  return t;
}

Tensor Tensor::scalar(double value) { return from_vec({1}, {value}); }

Tensor Tensor::wrap(std::shared_ptr<detail::TensorNode> node) {
  Tensor t;
  t.node_ = std::move(node);
  return t;
}

double Tensor::item() const {
  if (numel() != 1)
    fail("item(): tensor has shape " + shape_str(shape()));
  return node_->data[0];
}

const std::vector<double>& Tensor::grad() const {
  if (node_->grad.empty())
    throw std::logic_error("grad(): no gradient accumulated on this tensor");
  return node_->grad;
}

void Tensor::zero_grad() {
  if (!node_->grad.empty())
    std::fill(node_->grad.begin(), node_->grad.end(), 0.0);
}

Tensor Tensor::detach() const {
  return from_vec(node_->shape, node_->data, false);
}

bool Tensor::all_finite() const {
  for (double x : node_->data)
    if (!std::isfinite(x)) return false;
  return true;
}

// ---- elementwise ----

namespace {

Tensor make_ew(const Tensor& a, const Tensor& b, EwMode mode,
               std::vector<double> out, Shape out_shape,
               std::function<void(TensorNode&, EwMode)> back) {
  auto n = make_node(std::move(out_shape), std::move(out));
  if (a.requires_grad() || b.requires_grad()) {
    n->requires_grad = true;
    n->parents = {a.node_ptr(), b.node_ptr()};
    n->backprop = [mode, back = std::move(back)](TensorNode& self) {
      back(self, mode);
    };
  }
  return Tensor::wrap(std::move(n));
}

}  // namespace

Tensor add(const Tensor& a, const Tensor& b) {
  EwMode mode = ew_mode(a, b, "add");
  const auto& av = a.values();
  const auto& bv = b.values();
  Shape out_shape = (mode == EwMode::kScalarA) ? b.shape() : a.shape();
  std::vector<double> out(shape_numel(out_shape));
  for (size_t i = 0; i < out.size(); ++i) {
    double x = (mode == EwMode::kScalarA) ? av[0] : av[i];
    double y = (mode == EwMode::kScalarB) ? bv[0] : bv[i];
    out[i] = x + y;
  }
  return make_ew(a, b, mode, std::move(out), std::move(out_shape),
                 [](TensorNode& self, EwMode m) {
                   auto& pa = *self.parents[0];
                   auto& pb = *self.parents[1];
                   const auto& g = self.grad;
                   if (pa.requires_grad) {
                     pa.ensure_grad();
                     if (m == EwMode::kScalarA)
                       pa.grad[0] += sum_of(g);
                     else
                       for (size_t i = 0; i < g.size(); ++i) pa.grad[i] += g[i];
                   }
                   if (pb.requires_grad) {
                     pb.ensure_grad();
                     if (m == EwMode::kScalarB)
                       pb.grad[0] += sum_of(g);
                     else
                       for (size_t i = 0; i < g.size(); ++i) pb.grad[i] += g[i];
                   }
                 });
}

Tensor sub(const Tensor& a, const Tensor& b) {
  EwMode mode = ew_mode(a, b, "sub");
  const auto& av = a.values();
  const auto& bv = b.values();
  Shape out_shape = (mode == EwMode::kScalarA) ? b.shape() : a.shape();
  std::vector<double> out(shape_numel(out_shape));
  for (size_t i = 0; i < out.size(); ++i) {
    double x = (mode == EwMode::kScalarA) ? av[0] : av[i];
    double y = (mode == EwMode::kScalarB) ? bv[0] : bv[i];
    out[i] = x - y;
  }
  return make_ew(a, b, mode, std::move(out), std::move(out_shape),
                 [](TensorNode& self, EwMode m) {
                   auto& pa = *self.parents[0];
                   auto& pb = *self.parents[1];
                   const auto& g = self.grad;
                   if (pa.requires_grad) {
                     pa.ensure_grad();
                     if (m == EwMode::kScalarA)
                       pa.grad[0] += sum_of(g);
                     else
                       for (size_t i = 0; i < g.size(); ++i) pa.grad[i] += g[i];
                   }
                   if (pb.requires_grad) {
                     pb.ensure_grad();
                     if (m == EwMode::kScalarB)
                       pb.grad[0] -= sum_of(g);
                     else
                       for (size_t i = 0; i < g.size(); ++i) pb.grad[i] -= g[i];
                   }
                 });
}

Tensor mul(const Tensor& a, const Tensor& b) {
  EwMode mode = ew_mode(a, b, "mul");
  const auto& av = a.values();
  const auto& bv = b.values();
  Shape out_shape = (mode == EwMode::kScalarA) ? b.shape() : a.shape();
  std::vector<double> out(shape_numel(out_shape));
  for (size_t i = 0; i < out.size(); ++i) {
    double x = (mode == EwMode::kScalarA) ? av[0] : av[i];
    double y = (mode == EwMode::kScalarB) ? bv[0] : bv[i];
    out[i] = x * y;
  }
  return make_ew(a, b, mode, std::move(out), std::move(out_shape),
                 [](TensorNode& self, EwMode m) {
                   auto& pa = *self.parents[0];
                   auto& pb = *self.parents[1];
                   const auto& g = self.grad;
                   if (pa.requires_grad) {
                     pa.ensure_grad();
                     for (size_t i = 0; i < g.size(); ++i) {
                       double y = (m == EwMode::kScalarB) ? pb.data[0]
                                                          : pb.data[i];
                       if (m == EwMode::kScalarA)
                         pa.grad[0] += g[i] * y;
                       else
                         pa.grad[i] += g[i] * y;
                     }
                   }
                   if (pb.requires_grad) {
                     pb.ensure_grad();
                     for (size_t i = 0; i < g.size(); ++i) {
                       double x = (m == EwMode::kScalarA) ? pa.data[0]
                                                          : pa.data[i];
                       if (m == EwMode::kScalarB)
                         pb.grad[0] += g[i] * x;
                       else
                         pb.grad[i] += g[i] * x;
                     }
                   }
                 });
}

Tensor div(const Tensor& a, const Tensor& b) {
  EwMode mode = ew_mode(a, b, "div");
  const auto& av = a.values();
  const auto& bv = b.values();
  Shape out_shape = (mode == EwMode::kScalarA) ? b.shape() : a.shape();
  std::vector<double> out(shape_numel(out_shape));
  for (size_t i = 0; i < out.size(); ++i) {
    double x = (mode == EwMode::kScalarA) ? av[0] : av[i];
    double y = (mode == EwMode::kScalarB) ? bv[0] : bv[i];
    out[i] = x / y;
  }
  return make_ew(a, b, mode, std::move(out), std::move(out_shape),
                 [](TensorNode& self, EwMode m) {
                   auto& pa = *self.parents[0];
                   auto& pb = *self.parents[1];
                   const auto& g = self.grad;
                   const auto& o = self.data;
                   if (pa.requires_grad) {
                     pa.ensure_grad();
                     for (size_t i = 0; i < g.size(); ++i) {
                       double y = (m == EwMode::kScalarB) ? pb.data[0]
                                                          : pb.data[i];
                       if (m == EwMode::kScalarA)
                         pa.grad[0] += g[i] / y;
                       else
                         pa.grad[i] += g[i] / y;
                     }
                   }
                   if (pb.requires_grad) {
                     pb.ensure_grad();
                     for (size_t i = 0; i < g.size(); ++i) {
                       double y = (m == EwMode::kScalarB) ? pb.data[0]
                                                          : pb.data[i];
                       double d = -g[i] * o[i] / y;
                       if (m == EwMode::kScalarB)
                         pb.grad[0] += d;
                       else
                         pb.grad[i] += d;
                     }
                   }
                 });
}

Tensor add(const Tensor& a, double c) {
  std::vector<double> out(a.values());
  for (double& x : out) x += c;
  auto n = make_node(a.shape(), std::move(out));
  if (a.requires_grad()) {
    n->requires_grad = true;
    n->parents = {a.node_ptr()};
    n->backprop = [](TensorNode& self) {
      auto& pa = *self.parents[0];
      pa.ensure_grad();
      for (size_t i = 0; i < self.grad.size(); ++i) pa.grad[i] += self.grad[i];
    };
  }
  return Tensor::wrap(std::move(n));
}

Tensor mul(const Tensor& a, double c) {
  std::vector<double> out(a.values());
  for (double& x : out) x *= c;
  auto n = make_node(a.shape(), std::move(out));
  if (a.requires_grad()) {
    n->requires_grad = true;
    n->parents = {a.node_ptr()};
    n->backprop = [c](TensorNode& self) {
      auto& pa = *self.parents[0];
      pa.ensure_grad();
      for (size_t i = 0; i < self.grad.size(); ++i)
        pa.grad[i] += self.grad[i] * c;
    };
  }
  return Tensor::wrap(std::move(n));
}

Tensor neg(const Tensor& a) { return mul(a, -1.0); }

// ---- matmul / transpose ----

Tensor matmul(const Tensor& a, const Tensor& b) {
  require_ndim(a, 2, "matmul");
  require_ndim(b, 2, "matmul");
  const int m = a.extent(0), k = a.extent(1), n = b.extent(1);
  if (b.extent(0) != k)
    fail("matmul: inner extents differ, " + shape_str(a.shape()) + " · " +
         shape_str(b.shape()));
  std::vector<double> out(static_cast<size_t>(m) * n, 0.0);
  mm_nn(a.values().data(), b.values().data(), out.data(), m, k, n);
  auto node = make_node({m, n}, std::move(out));
  if (a.requires_grad() || b.requires_grad()) {
    node->requires_grad = true;
    node->parents = {a.node_ptr(), b.node_ptr()};
    node->backprop = [m, k, n](TensorNode& self) {
      auto& pa = *self.parents[0];
      auto& pb = *self.parents[1];
      if (pa.requires_grad) {
        pa.ensure_grad();
        mm_nt(self.grad.data(), pb.data.data(), pa.grad.data(), m, n, k);
      }
      if (pb.requires_grad) {
        pb.ensure_grad();
        mm_tn(pa.data.data(), self.grad.data(), pb.grad.data(), m, k, n);
      }
    };
  }
  return Tensor::wrap(std::move(node));
}

Tensor transpose(const Tensor& a) {
  require_ndim(a, 2, "transpose");
  const int r = a.extent(0), c = a.extent(1);
  std::vector<double> out(a.values().size());
  const auto& av = a.values();
  for (int i = 0; i < r; ++i)
    for (int j = 0; j < c; ++j)
      out[static_cast<size_t>(j) * r + i] = av[static_cast<size_t>(i) * c + j];
  auto node = make_node({c, r}, std::move(out));
  if (a.requires_grad()) {
    node->requires_grad = true;
    node->parents = {a.node_ptr()};
    node->backprop = [r, c](TensorNode& self) {
      auto& pa = *self.parents[0];
      pa.ensure_grad();
      for (int i = 0; i < r; ++i)
        for (int j = 0; j < c; ++j)
          pa.grad[static_cast<size_t>(i) * c + j] +=
              self.grad[static_cast<size_t>(j) * r + i];
    };
  }
  return Tensor::wrap(std::move(node));
}

// ---- shape plumbing ----

Tensor reshape(const Tensor& a, Shape shape) {
  if (shape_numel(shape) != a.numel())
    fail("reshape: cannot view " + shape_str(a.shape()) + " as " +
         shape_str(shape));
  auto node = make_node(std::move(shape), a.values());
  if (a.requires_grad()) {
    node->requires_grad = true;
    node->parents = {a.node_ptr()};
    node->backprop = [](TensorNode& self) {
      auto& pa = *self.parents[0];
      pa.ensure_grad();
      for (size_t i = 0; i < self.grad.size(); ++i) pa.grad[i] += self.grad[i];
    };
  }
  return Tensor::wrap(std::move(node));
}

Tensor slice(const Tensor& a, int offset, int count) {
  if (offset < 0 || count <= 0 || offset + count > a.numel())
    fail("slice: range [" + std::to_string(offset) + "," +
         std::to_string(offset + count) + ") out of bounds for " +
         std::to_string(a.numel()) + " elements");
  std::vector<double> out(a.values().begin() + offset,
                          a.values().begin() + offset + count);
  auto node = make_node({count}, std::move(out));
  if (a.requires_grad()) {
    node->requires_grad = true;
    node->parents = {a.node_ptr()};
    node->backprop = [offset](TensorNode& self) {
      auto& pa = *self.parents[0];
      pa.ensure_grad();
      for (size_t i = 0; i < self.grad.size(); ++i)
        pa.grad[offset + i] += self.grad[i];
    };
  }
  return Tensor::wrap(std::move(node));
}

Tensor concat(const std::vector<Tensor>& parts) {
  if (parts.empty()) fail("concat: no inputs");
  std::vector<double> out;
  bool rg = false;
  for (const auto& p : parts) {
    out.insert(out.end(), p.values().begin(), p.values().end());
    rg = rg || p.requires_grad();
  }
  const int total = static_cast<int>(out.size());
  auto node = make_node({total}, std::move(out));
  if (rg) {
    node->requires_grad = true;
    node->parents.reserve(parts.size());
    for (const auto& p : parts) node->parents.push_back(p.node_ptr());
    node->backprop = [](TensorNode& self) {
      size_t off = 0;
      for (auto& pp : self.parents) {
        if (pp->requires_grad) {
          pp->ensure_grad();
          for (size_t i = 0; i < pp->data.size(); ++i)
            pp->grad[i] += self.grad[off + i];
        }
        off += pp->data.size();
      }
    };
  }
  return Tensor::wrap(std::move(node));
}

// ---- reductions ----

Tensor sq_l2(const Tensor& a, const Tensor& b) {
  if (a.shape() != b.shape())
    fail("sq_l2: shapes differ, " + shape_str(a.shape()) + " vs " +
         shape_str(b.shape()));
  const auto& av = a.values();
  const auto& bv = b.values();
  double s = 0.0;
  for (size_t i = 0; i < av.size(); ++i) {
    double d = av[i] - bv[i];
    s += d * d;
  }
  auto node = make_node({1}, {s});
  if (a.requires_grad() || b.requires_grad()) {
    node->requires_grad = true;
    node->parents = {a.node_ptr(), b.node_ptr()};
    node->backprop = [](TensorNode& self) {
      auto& pa = *self.parents[0];
      auto& pb = *self.parents[1];
      const double g = self.grad[0];
      if (pa.requires_grad) pa.ensure_grad();
      if (pb.requires_grad) pb.ensure_grad();
      for (size_t i = 0; i < pa.data.size(); ++i) {
        double d = 2.0 * g * (pa.data[i] - pb.data[i]);
        if (pa.requires_grad) pa.grad[i] += d;
        if (pb.requires_grad) pb.grad[i] -= d;
      }
    };
  }
  return Tensor::wrap(std::move(node));
}

// ---- nonlinearities ----

Tensor tanh_op(const Tensor& a) {
  std::vector<double> out(a.values().size());
  const auto& av = a.values();
  for (size_t i = 0; i < av.size(); ++i) out[i] = std::tanh(av[i]);
  auto node = make_node(a.shape(), std::move(out));
  if (a.requires_grad()) {
    node->requires_grad = true;
    node->parents = {a.node_ptr()};
    node->backprop = [](TensorNode& self) {
      auto& pa = *self.parents[0];
      pa.ensure_grad();
      for (size_t i = 0; i < self.grad.size(); ++i) {
        double y = self.data[i];
        pa.grad[i] += self.grad[i] * (1.0 - y * y);
      }
    };
  }
  return Tensor::wrap(std::move(node));
}

Tensor softmax(const Tensor& a) {
  const auto& av = a.values();
  double mx = av[0];
  for (double x : av) mx = std::max(mx, x);
  std::vector<double> out(av.size());
  double z = 0.0;
  for (size_t i = 0; i < av.size(); ++i) {
    out[i] = std::exp(av[i] - mx);
    z += out[i];
  }
  for (double& x : out) x /= z;
  auto node = make_node(a.shape(), std::move(out));
  if (a.requires_grad()) {
    node->requires_grad = true;
    node->parents = {a.node_ptr()};
    node->backprop = [](TensorNode& self) {
      auto& pa = *self.parents[0];
      pa.ensure_grad();
      double dot = 0.0;
      for (size_t i = 0; i < self.data.size(); ++i)
        dot += self.grad[i] * self.data[i];
      for (size_t i = 0; i < self.data.size(); ++i)
        pa.grad[i] += self.data[i] * (self.grad[i] - dot);
    };
  }
  return Tensor::wrap(std::move(node));
}

// ---- spatial ops ----

Tensor conv_1x1(const Tensor& f, const Tensor& weights, const Tensor& bias) {
  require_ndim(f, 3, "conv_1x1");
  require_ndim(weights, 2, "conv_1x1");
  require_ndim(bias, 1, "conv_1x1");
  const int c_in = f.extent(0), h = f.extent(1), w = f.extent(2);
  const int c_out = weights.extent(0);
  if (weights.extent(1) != c_in || bias.extent(0) != c_out)
    fail("conv_1x1: weights " + shape_str(weights.shape()) + ", bias " +
         shape_str(bias.shape()) + " do not fit input " +
         shape_str(f.shape()));
  const int hw = h * w;
  std::vector<double> out(static_cast<size_t>(c_out) * hw);
  for (int o = 0; o < c_out; ++o)
    std::fill_n(out.begin() + static_cast<size_t>(o) * hw, hw,
                bias.values()[o]);
  mm_nn(weights.values().data(), f.values().data(), out.data(), c_out, c_in,
        hw);
  auto node = make_node({c_out, h, w}, std::move(out));
  if (f.requires_grad() || weights.requires_grad() || bias.requires_grad()) {
    node->requires_grad = true;
    node->parents = {f.node_ptr(), weights.node_ptr(), bias.node_ptr()};
    node->backprop = [c_in, c_out, hw](TensorNode& self) {
      auto& pf = *self.parents[0];
      auto& pw = *self.parents[1];
      auto& pb = *self.parents[2];
      if (pw.requires_grad) {
        pw.ensure_grad();
        mm_nt(self.grad.data(), pf.data.data(), pw.grad.data(), c_out, hw,
              c_in);
      }
      if (pb.requires_grad) {
        pb.ensure_grad();
        for (int o = 0; o < c_out; ++o) {
          double s = 0.0;
          for (int i = 0; i < hw; ++i)
            s += self.grad[static_cast<size_t>(o) * hw + i];
          pb.grad[o] += s;
        }
      }
      if (pf.requires_grad) {
        pf.ensure_grad();
        mm_tn(pw.data.data(), self.grad.data(), pf.grad.data(), c_out, c_in,
              hw);
      }
    };
  }
  return Tensor::wrap(std::move(node));
}

namespace {

struct AxisSample {
  int i0, i1;
  double w;  // weight of i1; (1-w) goes to i0
};

std::vector<AxisSample> resize_axis_map(int src, int dst) {
  std::vector<AxisSample> m(dst);
  for (int d = 0; d < dst; ++d) {
    double s = (dst == 1) ? 0.5 * (src - 1)
                          : static_cast<double>(d) * (src - 1) / (dst - 1);
    int i0 = static_cast<int>(std::floor(s));
    if (i0 > src - 1) i0 = src - 1;
    int i1 = std::min(i0 + 1, src - 1);
    m[d] = {i0, i1, s - i0};
  }
  return m;
}

}  // namespace

Tensor bilinear_resize(const Tensor& f, int out_h, int out_w) {
  require_ndim(f, 3, "bilinear_resize");
  if (out_h <= 0 || out_w <= 0) fail("bilinear_resize: non-positive target");
  const int c = f.extent(0), h = f.extent(1), w = f.extent(2);
  auto ymap = resize_axis_map(h, out_h);
  auto xmap = resize_axis_map(w, out_w);
  std::vector<double> out(static_cast<size_t>(c) * out_h * out_w);
  const auto& fv = f.values();
  for (int ch = 0; ch < c; ++ch) {
    const double* plane = fv.data() + static_cast<size_t>(ch) * h * w;
    double* oplane = out.data() + static_cast<size_t>(ch) * out_h * out_w;
    for (int oy = 0; oy < out_h; ++oy) {
      const auto& ys = ymap[oy];
      for (int ox = 0; ox < out_w; ++ox) {
        const auto& xs = xmap[ox];
        double top = (1.0 - xs.w) * plane[ys.i0 * w + xs.i0] +
                     xs.w * plane[ys.i0 * w + xs.i1];
        double bot = (1.0 - xs.w) * plane[ys.i1 * w + xs.i0] +
                     xs.w * plane[ys.i1 * w + xs.i1];
        oplane[oy * out_w + ox] = (1.0 - ys.w) * top + ys.w * bot;
      }
    }
  }
  auto node = make_node({c, out_h, out_w}, std::move(out));
  if (f.requires_grad()) {
    node->requires_grad = true;
    node->parents = {f.node_ptr()};
    node->backprop = [c, h, w, out_h, out_w, ymap = std::move(ymap),
                      xmap = std::move(xmap)](TensorNode& self) {
      auto& pf = *self.parents[0];
      pf.ensure_grad();
      for (int ch = 0; ch < c; ++ch) {
        double* gplane = pf.grad.data() + static_cast<size_t>(ch) * h * w;
        const double* oplane =
            self.grad.data() + static_cast<size_t>(ch) * out_h * out_w;
        for (int oy = 0; oy < out_h; ++oy) {
          const auto& ys = ymap[oy];
          for (int ox = 0; ox < out_w; ++ox) {
            const auto& xs = xmap[ox];
            double g = oplane[oy * out_w + ox];
            gplane[ys.i0 * w + xs.i0] += (1.0 - ys.w) * (1.0 - xs.w) * g;
            gplane[ys.i0 * w + xs.i1] += (1.0 - ys.w) * xs.w * g;
            gplane[ys.i1 * w + xs.i0] += ys.w * (1.0 - xs.w) * g;
            gplane[ys.i1 * w + xs.i1] += ys.w * xs.w * g;
          }
        }
      }
    };
  }
  return Tensor::wrap(std::move(node));
}

namespace {

// Unrolls kh×kw patches into a (C·kh·kw) × (OH·OW) matrix; out-of-image
// taps read as zero.
std::vector<double> im2col(const double* x, int c, int h, int w, int kh,
                           int kw, int stride, int pad, int oh, int ow) {
  std::vector<double> col(static_cast<size_t>(c) * kh * kw * oh * ow, 0.0);
  const int ohw = oh * ow;
  for (int ch = 0; ch < c; ++ch) {
    const double* plane = x + static_cast<size_t>(ch) * h * w;
    for (int ky = 0; ky < kh; ++ky) {
      for (int kx = 0; kx < kw; ++kx) {
        double* row = col.data() +
                      static_cast<size_t>((ch * kh + ky) * kw + kx) * ohw;
        for (int oy = 0; oy < oh; ++oy) {
          int iy = oy * stride - pad + ky;
          if (iy < 0 || iy >= h) continue;
          for (int ox = 0; ox < ow; ++ox) {
            int ix = ox * stride - pad + kx;
            if (ix < 0 || ix >= w) continue;
            row[oy * ow + ox] = plane[iy * w + ix];
          }
        }
      }
    }
  }
  return col;
}

void col2im_acc(const double* col, double* gx, int c, int h, int w, int kh,
                int kw, int stride, int pad, int oh, int ow) {
  const int ohw = oh * ow;
  for (int ch = 0; ch < c; ++ch) {
    double* plane = gx + static_cast<size_t>(ch) * h * w;
    for (int ky = 0; ky < kh; ++ky) {
      for (int kx = 0; kx < kw; ++kx) {
        const double* row = col +
                            static_cast<size_t>((ch * kh + ky) * kw + kx) * ohw;
        for (int oy = 0; oy < oh; ++oy) {
          int iy = oy * stride - pad + ky;
          if (iy < 0 || iy >= h) continue;
          for (int ox = 0; ox < ow; ++ox) {
            int ix = ox * stride - pad + kx;
            if (ix < 0 || ix >= w) continue;
            plane[iy * w + ix] += row[oy * ow + ox];
          }
        }
      }
    }
  }
}

}  // namespace

Tensor conv2d(const Tensor& input, const Tensor& weights, const Tensor& bias,
              int stride, int pad) {
  require_ndim(input, 3, "conv2d");
  require_ndim(weights, 4, "conv2d");
  require_ndim(bias, 1, "conv2d");
  if (stride <= 0 || pad < 0) fail("conv2d: bad stride/pad");
  const int c = input.extent(0), h = input.extent(1), w = input.extent(2);
  const int o = weights.extent(0), kh = weights.extent(2),
            kw = weights.extent(3);
  if (weights.extent(1) != c || bias.extent(0) != o)
    fail("conv2d: weights " + shape_str(weights.shape()) + ", bias " +
         shape_str(bias.shape()) + " do not fit input " +
         shape_str(input.shape()));
  const int oh = (h + 2 * pad - kh) / stride + 1;
  const int ow = (w + 2 * pad - kw) / stride + 1;
  if (oh <= 0 || ow <= 0) fail("conv2d: kernel larger than padded input");
  const int ckk = c * kh * kw;
  const int ohw = oh * ow;

  auto col = im2col(input.values().data(), c, h, w, kh, kw, stride, pad, oh,
                    ow);
  std::vector<double> out(static_cast<size_t>(o) * ohw);
  for (int oc = 0; oc < o; ++oc)
    std::fill_n(out.begin() + static_cast<size_t>(oc) * ohw, ohw,
                bias.values()[oc]);
  mm_nn(weights.values().data(), col.data(), out.data(), o, ckk, ohw);

  auto node = make_node({o, oh, ow}, std::move(out));
  if (input.requires_grad() || weights.requires_grad() ||
      bias.requires_grad()) {
    node->requires_grad = true;
    node->parents = {input.node_ptr(), weights.node_ptr(), bias.node_ptr()};
    node->backprop = [c, h, w, o, kh, kw, stride, pad, oh, ow, ckk, ohw,
                      col = std::move(col)](TensorNode& self) {
      auto& px = *self.parents[0];
      auto& pw = *self.parents[1];
      auto& pb = *self.parents[2];
      if (pw.requires_grad) {
        pw.ensure_grad();
        mm_nt(self.grad.data(), col.data(), pw.grad.data(), o, ohw, ckk);
      }
      if (pb.requires_grad) {
        pb.ensure_grad();
        for (int oc = 0; oc < o; ++oc) {
          double s = 0.0;
          for (int i = 0; i < ohw; ++i)
            s += self.grad[static_cast<size_t>(oc) * ohw + i];
          pb.grad[oc] += s;
        }
      }
      if (px.requires_grad) {
        px.ensure_grad();
        std::vector<double> gcol(static_cast<size_t>(ckk) * ohw, 0.0);
        mm_tn(pw.data.data(), self.grad.data(), gcol.data(), o, ckk, ohw);
        col2im_acc(gcol.data(), px.grad.data(), c, h, w, kh, kw, stride, pad,
                   oh, ow);
      }
    };
  }
  return Tensor::wrap(std::move(node));
}

// ---- rotations ----

namespace {

struct RodriguesCoeffs {
  double a, b;    // sinθ/θ, (1−cosθ)/θ²
  double ca, cb;  // (da/dθ)/θ, (db/dθ)/θ
};

RodriguesCoeffs rodrigues_coeffs(double theta_sq) {
  RodriguesCoeffs c;
  if (theta_sq < 1e-12) {  // θ < 1e-6: second-order Taylor forms
    c.a = 1.0 - theta_sq / 6.0;
    c.b = 0.5 - theta_sq / 24.0;
    c.ca = -1.0 / 3.0 + theta_sq / 30.0;
    c.cb = -1.0 / 12.0 + theta_sq / 180.0;
  } else {
    double t = std::sqrt(theta_sq);
    double s = std::sin(t), co = std::cos(t);
    c.a = s / t;
    c.b = (1.0 - co) / theta_sq;
    c.ca = (t * co - s) / (theta_sq * t);
    c.cb = (t * s - 2.0 * (1.0 - co)) / (theta_sq * theta_sq);
  }
  return c;
}

}  // namespace

Tensor rodrigues(const Tensor& axis_angle) {
  if (axis_angle.numel() != 3)
    fail("rodrigues: expected 3 values, got shape " +
         shape_str(axis_angle.shape()));
  const auto& w = axis_angle.values();
  const double t2 = w[0] * w[0] + w[1] * w[1] + w[2] * w[2];
  const auto cf = rodrigues_coeffs(t2);
  // K = [w]ₓ, R = I + a·K + b·K²  with  K² = w·wᵀ − θ²·I
  std::vector<double> r(9, 0.0);
  for (int i = 0; i < 3; ++i)
    for (int j = 0; j < 3; ++j)
      r[i * 3 + j] = cf.b * w[i] * w[j] + ((i == j) ? 1.0 - cf.b * t2 : 0.0);
  r[0 * 3 + 1] += -cf.a * w[2];
  r[0 * 3 + 2] += cf.a * w[1];
  r[1 * 3 + 0] += cf.a * w[2];
  r[1 * 3 + 2] += -cf.a * w[0];
  r[2 * 3 + 0] += -cf.a * w[1];
  r[2 * 3 + 1] += cf.a * w[0];
  auto node = make_node({3, 3}, std::move(r));
  if (axis_angle.requires_grad()) {
    node->requires_grad = true;
    node->parents = {axis_angle.node_ptr()};
    node->backprop = [](TensorNode& self) {
      auto& pw = *self.parents[0];
      pw.ensure_grad();
      const double* w = pw.data.data();
      const double t2 = w[0] * w[0] + w[1] * w[1] + w[2] * w[2];
      const auto cf = rodrigues_coeffs(t2);
      const auto& g = self.grad;
      // ⟨G, K⟩ and ⟨G, K²⟩ with K = [w]ₓ
      double gk = w[0] * (g[7] - g[5]) + w[1] * (g[2] - g[6]) +
                  w[2] * (g[3] - g[1]);
      double gk2 = 0.0;
      for (int i = 0; i < 3; ++i)
        for (int j = 0; j < 3; ++j)
          gk2 += g[i * 3 + j] * (w[i] * w[j] - ((i == j) ? t2 : 0.0));
      double tr = g[0] + g[4] + g[8];
      // ∂R/∂w_k = ca·w_k·K + a·[e_k]ₓ + cb·w_k·K² + b·(e_k wᵀ + w e_kᵀ − 2w_k I)
      for (int k = 0; k < 3; ++k) {
        double gek;  // ⟨G, [e_k]ₓ⟩
        if (k == 0)
          gek = g[7] - g[5];
        else if (k == 1)
          gek = g[2] - g[6];
        else
          gek = g[3] - g[1];
        double rowk = 0.0, colk = 0.0;
        for (int j = 0; j < 3; ++j) {
          rowk += g[k * 3 + j] * w[j];
          colk += g[j * 3 + k] * w[j];
        }
        pw.grad[k] += cf.ca * w[k] * gk + cf.a * gek + cf.cb * w[k] * gk2 +
                      cf.b * (rowk + colk - 2.0 * w[k] * tr);
      }
    };
  }
  return Tensor::wrap(std::move(node));
}

// ---- autodiff driver ----

namespace {

// Deterministic post-order over the requires_grad subgraph: parents are
// visited in their stored order, never by pointer value.
std::vector<TensorNode*> topo_order(TensorNode* root) {
  std::vector<TensorNode*> topo;
  std::unordered_set<TensorNode*> seen;
  struct Frame {
    TensorNode* n;
    size_t next;
  };
  std::vector<Frame> stack;
  stack.push_back({root, 0});
  seen.insert(root);
  while (!stack.empty()) {
    Frame& f = stack.back();
    if (f.next < f.n->parents.size()) {
      TensorNode* p = f.n->parents[f.next++].get();
      if (p->requires_grad && seen.insert(p).second) stack.push_back({p, 0});
    } else {
      topo.push_back(f.n);
      stack.pop_back();
    }
  }
  return topo;
}

}  // namespace

void backward(const Tensor& loss) {
  if (!loss.defined() || loss.numel() != 1)
    fail("backward: loss must be a defined scalar");
  TensorNode* root = loss.node();
  if (!root->requires_grad) return;
  auto topo = topo_order(root);
  // Interior nodes get a fresh flow each pass; only leaves (no backprop)
  // accumulate across repeated backward calls.
  for (TensorNode* n : topo)
    if (n->backprop && !n->grad.empty())
      std::fill(n->grad.begin(), n->grad.end(), 0.0);
  root->ensure_grad();
  root->grad[0] += 1.0;
  for (auto it = topo.rbegin(); it != topo.rend(); ++it)
    if ((*it)->backprop) (*it)->backprop(**it);
}

void reset_graph_grads(const Tensor& root) {
  if (!root.defined()) return;
  std::unordered_set<TensorNode*> seen;
  std::vector<TensorNode*> stack{root.node()};
  seen.insert(root.node());
  while (!stack.empty()) {
    TensorNode* n = stack.back();
    stack.pop_back();
    if (!n->grad.empty()) std::fill(n->grad.begin(), n->grad.end(), 0.0);
    for (auto& p : n->parents)
      if (seen.insert(p.get()).second) stack.push_back(p.get());
  }
}

// ---- gradient verification harness ----

GradCheckResult finite_diff_check(const std::function<Tensor(const Tensor&)>& f,
                                  const Tensor& params, double step,
                                  double tol) {
  GradCheckResult r;
  Tensor p = Tensor::from_vec(params.shape(), params.values(), true);
  Tensor loss = f(p);
  if (loss.numel() != 1) {
    r.message = "function under test did not return a scalar";
    return r;
  }
  if (!std::isfinite(loss.item())) {
    r.message = "non-finite loss at the base point";
    return r;
  }
  backward(loss);
  std::vector<double> g(params.numel(), 0.0);
  if (p.has_grad()) g = p.grad();

  const auto& base = params.values();
  for (int i = 0; i < params.numel(); ++i) {
    auto vp = base, vm = base;
    vp[i] += step;
    vm[i] -= step;
    double fp = f(Tensor::from_vec(params.shape(), vp)).item();
    double fm = f(Tensor::from_vec(params.shape(), vm)).item();
    if (!std::isfinite(fp) || !std::isfinite(fm)) {
      r.message = "non-finite loss at perturbed coordinate " +
                  std::to_string(i);
      return r;
    }
    double fd = (fp - fm) / (2.0 * step);
    double rel =
        std::abs(fd - g[i]) / std::max({1.0, std::abs(fd), std::abs(g[i])});
    if (rel > r.max_rel_err) {
      r.max_rel_err = rel;
      r.worst_index = i;
    }
  }
  r.pass = r.max_rel_err <= tol;
  if (!r.pass) {
    std::ostringstream os;
    os << "max relative error " << r.max_rel_err << " at coordinate "
       << r.worst_index << " exceeds tolerance " << tol;
    r.message = os.str();
  }
  return r;
}

}  // namespace handkd
