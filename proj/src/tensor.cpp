#include "spanset/tensor.hpp"

#include <Eigen/Dense>

#include <algorithm>
#include <cmath>
#include <limits>
#include <numeric>
#include <sstream>
#include <stdexcept>
#include <unordered_set>

#include "spanset/error.hpp"

namespace spanset {

namespace {

using RowMat = Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
using MapM = Eigen::Map<RowMat>;
using CMapM = Eigen::Map<const RowMat>;
using Stride = Eigen::OuterStride<>;
using SMap = Eigen::Map<RowMat, 0, Stride>;
using CSMap = Eigen::Map<const RowMat, 0, Stride>;

using detail::Node;

thread_local bool g_grad_enabled = true;

// Gradient buffer of an input, or nullptr when it does not need one.
double* grad_of(Node* n) { return n->requires_grad ? n->ensure_grad().data() : nullptr; }

void require_same_shape(const Tensor& a, const Tensor& b, const char* op) {
  if (a.shape() != b.shape()) {
    throw DimensionError(std::string(op) + ": shape mismatch " + shape_str(a.shape()) + " vs " +
                         shape_str(b.shape()));
  }
}

void require_defined(const Tensor& t, const char* op) {
  if (!t.defined()) throw DimensionError(std::string(op) + ": undefined tensor");
}

template <class F, class D>
Tensor unary_op(const Tensor& x, F forward, D derivative) {
  require_defined(x, "unary op");
  const auto in = x.data();
  Buffer out(in.size());
  for (std::size_t i = 0; i < in.size(); ++i) out[i] = forward(in[i]);
  Node* xn = x.node();
  return make_op_result(x.shape(), std::move(out), {&x}, [xn, derivative](Node& o) {
    double* gx = grad_of(xn);
    if (!gx) return;
    for (std::size_t i = 0; i < o.value.size(); ++i) {
      gx[i] += o.grad[i] * derivative(xn->value[i], o.value[i]);
    }
  });
}

}  // namespace

std::size_t shape_numel(const Shape& shape) {
  return std::accumulate(shape.begin(), shape.end(), std::size_t{1}, std::multiplies<>());
}

std::string shape_str(const Shape& shape) {
  std::ostringstream os;
  os << '[';
  for (std::size_t i = 0; i < shape.size(); ++i) os << (i ? "," : "") << shape[i];
  os << ']';
  return os.str();
}

Buffer& detail::Node::ensure_grad() {
  if (grad.empty()) grad.assign(value.size(), 0.0);
  return grad;
}

bool grad_enabled() noexcept { return g_grad_enabled; }

NoGradGuard::NoGradGuard() : previous_(g_grad_enabled) { g_grad_enabled = false; }
NoGradGuard::~NoGradGuard() { g_grad_enabled = previous_; }

// ---------------------------------------------------------------------------
// Tensor

Tensor Tensor::zeros(Shape shape, bool requires_grad) {
  const std::size_t n = shape_numel(shape);
  return from(std::move(shape), Buffer(n, 0.0), requires_grad);
}

Tensor Tensor::full(Shape shape, double value) {
  const std::size_t n = shape_numel(shape);
  return from(std::move(shape), Buffer(n, value));
}

Tensor Tensor::from(Shape shape, std::span<const double> data, bool requires_grad) {
  return from(std::move(shape), Buffer(data.begin(), data.end()), requires_grad);
}

Tensor Tensor::from(Shape shape, Buffer data, bool requires_grad) {
  if (shape_numel(shape) != data.size()) {
    throw DimensionError("Tensor::from: shape " + shape_str(shape) + " holds " +
                         std::to_string(shape_numel(shape)) + " values, got " +
                         std::to_string(data.size()));
  }
  auto node = std::make_shared<Node>();
  node->shape = std::move(shape);
  node->value = std::move(data);
  node->requires_grad = requires_grad;
  return Tensor(std::move(node));
}

Tensor Tensor::scalar(double value, bool requires_grad) { return from({}, Buffer{value}, requires_grad); }

std::size_t Tensor::cols() const { return node_->shape.empty() ? 1 : node_->shape.back(); }

std::size_t Tensor::rows() const {
  const std::size_t c = cols();
  return c == 0 ? 0 : numel() / c;
}

std::span<double> Tensor::mutable_data() {
  if (!node_->is_leaf()) throw std::logic_error("Tensor::mutable_data on an op result");
  return node_->value;
}

double Tensor::item() const {
  if (numel() != 1) throw DimensionError("Tensor::item on shape " + shape_str(shape()));
  return node_->value[0];
}

void Tensor::zero_grad() { std::fill(node_->grad.begin(), node_->grad.end(), 0.0); }

Tensor Tensor::detach() const { return from(shape(), node_->value); }

Tensor make_op_result(Shape shape, Buffer value,
                      std::initializer_list<const Tensor*> inputs,
                      std::function<void(Node&)> backward) {
  auto node = std::make_shared<Node>();
  node->shape = std::move(shape);
  node->value = std::move(value);
  if (g_grad_enabled) {
    bool any = false;
    for (const Tensor* t : inputs) any = any || (t->defined() && t->requires_grad());
    if (any) {
      node->requires_grad = true;
      for (const Tensor* t : inputs) {
        if (t->defined()) node->parents.push_back(t->shared_node());
      }
      node->backward = std::move(backward);
    }
  }
  return Tensor(std::move(node));
}

Tensor make_op_result(Shape shape, Buffer value, const std::vector<Tensor>& inputs,
                      std::function<void(Node&)> backward) {
  auto node = std::make_shared<Node>();
  node->shape = std::move(shape);
  node->value = std::move(value);
  if (g_grad_enabled) {
    const bool any = std::any_of(inputs.begin(), inputs.end(),
                                 [](const Tensor& t) { return t.defined() && t.requires_grad(); });
    if (any) {
      node->requires_grad = true;
      for (const Tensor& t : inputs) node->parents.push_back(t.shared_node());
      node->backward = std::move(backward);
    }
  }
  return Tensor(std::move(node));
}

// ---------------------------------------------------------------------------
// Linear algebra

Tensor matmul(const Tensor& a, const Tensor& b) {
  require_defined(a, "matmul");
  require_defined(b, "matmul");
  if (a.cols() != b.rows()) {
    throw DimensionError("matmul: " + shape_str(a.shape()) + " x " + shape_str(b.shape()));
  }
  const std::size_t m = a.rows(), k = a.cols(), n = b.cols();
  Buffer out(m * n);
  MapM(out.data(), m, n).noalias() = CMapM(a.data().data(), m, k) * CMapM(b.data().data(), k, n);
  Node* an = a.node();
  Node* bn = b.node();
  return make_op_result({m, n}, std::move(out), {&a, &b}, [an, bn, m, k, n](Node& o) {
    CMapM dc(o.grad.data(), m, n);
    if (double* ga = grad_of(an)) {
      MapM(ga, m, k).noalias() += dc * CMapM(bn->value.data(), k, n).transpose();
    }
    if (double* gb = grad_of(bn)) {
      MapM(gb, k, n).noalias() += CMapM(an->value.data(), m, k).transpose() * dc;
    }
  });
}

Tensor transpose(const Tensor& x) {
  require_defined(x, "transpose");
  const std::size_t r = x.rows(), c = x.cols();
  Buffer out(r * c);
  MapM(out.data(), c, r) = CMapM(x.data().data(), r, c).transpose();
  Node* xn = x.node();
  return make_op_result({c, r}, std::move(out), {&x}, [xn, r, c](Node& o) {
    if (double* g = grad_of(xn)) MapM(g, r, c) += CMapM(o.grad.data(), c, r).transpose();
  });
}

Tensor linear(const Tensor& x, const Tensor& w, const Tensor& bias) {
  require_defined(x, "linear");
  require_defined(w, "linear");
  if (x.cols() != w.rows()) {
    throw DimensionError("linear: input " + shape_str(x.shape()) + " vs weight " +
                         shape_str(w.shape()));
  }
  const std::size_t m = x.rows(), k = x.cols(), n = w.cols();
  if (bias.defined() && bias.numel() != n) {
    throw DimensionError("linear: bias " + shape_str(bias.shape()) + " for " + std::to_string(n) +
                         " outputs");
  }
  Buffer out(m * n);
  MapM y(out.data(), m, n);
  if (bias.defined()) {
    y.rowwise() = Eigen::Map<const Eigen::RowVectorXd>(bias.data().data(), n);
    y.noalias() += CMapM(x.data().data(), m, k) * CMapM(w.data().data(), k, n);
  } else {
    y.noalias() = CMapM(x.data().data(), m, k) * CMapM(w.data().data(), k, n);
  }
  Node* xn = x.node();
  Node* wn = w.node();
  Node* bn = bias.node();
  return make_op_result({m, n}, std::move(out), {&x, &w, &bias}, [xn, wn, bn, m, k, n](Node& o) {
    CMapM dy(o.grad.data(), m, n);
    if (double* gx = grad_of(xn)) {
      MapM(gx, m, k).noalias() += dy * CMapM(wn->value.data(), k, n).transpose();
    }
    if (double* gw = grad_of(wn)) {
      MapM(gw, k, n).noalias() += CMapM(xn->value.data(), m, k).transpose() * dy;
    }
    if (bn) {
      if (double* gb = grad_of(bn)) {
        Eigen::Map<Eigen::RowVectorXd>(gb, n) += dy.colwise().sum();
      }
    }
  });
}

// ---------------------------------------------------------------------------
// Elementwise

Tensor add(const Tensor& a, const Tensor& b) {
  require_same_shape(a, b, "add");
  Buffer out(a.numel());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = a.data()[i] + b.data()[i];
  Node* an = a.node();
  Node* bn = b.node();
  return make_op_result(a.shape(), std::move(out), {&a, &b}, [an, bn](Node& o) {
    if (double* ga = grad_of(an)) {
      for (std::size_t i = 0; i < o.grad.size(); ++i) ga[i] += o.grad[i];
    }
    if (double* gb = grad_of(bn)) {
      for (std::size_t i = 0; i < o.grad.size(); ++i) gb[i] += o.grad[i];
    }
  });
}

Tensor sub(const Tensor& a, const Tensor& b) {
  require_same_shape(a, b, "sub");
  Buffer out(a.numel());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = a.data()[i] - b.data()[i];
  Node* an = a.node();
  Node* bn = b.node();
  return make_op_result(a.shape(), std::move(out), {&a, &b}, [an, bn](Node& o) {
    if (double* ga = grad_of(an)) {
      for (std::size_t i = 0; i < o.grad.size(); ++i) ga[i] += o.grad[i];
    }
    if (double* gb = grad_of(bn)) {
      for (std::size_t i = 0; i < o.grad.size(); ++i) gb[i] -= o.grad[i];
    }
  });
}

Tensor mul(const Tensor& a, const Tensor& b) {
  require_same_shape(a, b, "mul");
  Buffer out(a.numel());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = a.data()[i] * b.data()[i];
  Node* an = a.node();
  Node* bn = b.node();
  return make_op_result(a.shape(), std::move(out), {&a, &b}, [an, bn](Node& o) {
    if (double* ga = grad_of(an)) {
      for (std::size_t i = 0; i < o.grad.size(); ++i) ga[i] += o.grad[i] * bn->value[i];
    }
    if (double* gb = grad_of(bn)) {
      for (std::size_t i = 0; i < o.grad.size(); ++i) gb[i] += o.grad[i] * an->value[i];
    }
  });
}

Tensor div(const Tensor& a, const Tensor& b) {
  require_same_shape(a, b, "div");
  Buffer out(a.numel());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = a.data()[i] / b.data()[i];
  Node* an = a.node();
  Node* bn = b.node();
  return make_op_result(a.shape(), std::move(out), {&a, &b}, [an, bn](Node& o) {
    if (double* ga = grad_of(an)) {
      for (std::size_t i = 0; i < o.grad.size(); ++i) ga[i] += o.grad[i] / bn->value[i];
    }
    if (double* gb = grad_of(bn)) {
      for (std::size_t i = 0; i < o.grad.size(); ++i) gb[i] -= o.grad[i] * o.value[i] / bn->value[i];
    }
  });
}

Tensor div_or_zero(const Tensor& a, const Tensor& b) {
  require_same_shape(a, b, "div_or_zero");
  Buffer out(a.numel());
  for (std::size_t i = 0; i < out.size(); ++i) {
    out[i] = b.data()[i] == 0.0 ? 0.0 : a.data()[i] / b.data()[i];
  }
  Node* an = a.node();
  Node* bn = b.node();
  return make_op_result(a.shape(), std::move(out), {&a, &b}, [an, bn](Node& o) {
    double* ga = grad_of(an);
    double* gb = grad_of(bn);
    for (std::size_t i = 0; i < o.grad.size(); ++i) {
      const double d = bn->value[i];
      if (d == 0.0) continue;
      if (ga) ga[i] += o.grad[i] / d;
      if (gb) gb[i] -= o.grad[i] * o.value[i] / d;
    }
  });
}

Tensor scale(const Tensor& a, double c) {
  return unary_op(a, [c](double x) { return c * x; }, [c](double, double) { return c; });
}

Tensor add_scalar(const Tensor& a, double c) {
  return unary_op(a, [c](double x) { return x + c; }, [](double, double) { return 1.0; });
}

Tensor minimum(const Tensor& a, const Tensor& b) {
  require_same_shape(a, b, "minimum");
  Buffer out(a.numel());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = std::min(a.data()[i], b.data()[i]);
  Node* an = a.node();
  Node* bn = b.node();
  return make_op_result(a.shape(), std::move(out), {&a, &b}, [an, bn](Node& o) {
    double* ga = grad_of(an);
    double* gb = grad_of(bn);
    for (std::size_t i = 0; i < o.grad.size(); ++i) {
      const bool take_a = an->value[i] <= bn->value[i];
      if (take_a && ga) ga[i] += o.grad[i];
      if (!take_a && gb) gb[i] += o.grad[i];
    }
  });
}

Tensor maximum(const Tensor& a, const Tensor& b) {
  require_same_shape(a, b, "maximum");
  Buffer out(a.numel());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = std::max(a.data()[i], b.data()[i]);
  Node* an = a.node();
  Node* bn = b.node();
  return make_op_result(a.shape(), std::move(out), {&a, &b}, [an, bn](Node& o) {
    double* ga = grad_of(an);
    double* gb = grad_of(bn);
    for (std::size_t i = 0; i < o.grad.size(); ++i) {
      const bool take_a = an->value[i] >= bn->value[i];
      if (take_a && ga) ga[i] += o.grad[i];
      if (!take_a && gb) gb[i] += o.grad[i];
    }
  });
}

Tensor relu(const Tensor& x) {
  require_defined(x, "relu");
  const std::size_t n = x.numel();
  Buffer out(n);
  using Arr = Eigen::Map<Eigen::ArrayXd>;
  using CArr = Eigen::Map<const Eigen::ArrayXd>;
  Arr(out.data(), static_cast<Eigen::Index>(n)) = CArr(x.data().data(), static_cast<Eigen::Index>(n)).max(0.0);
  Node* xn = x.node();
  return make_op_result(x.shape(), std::move(out), {&x}, [xn, n](Node& o) {
    double* gx = grad_of(xn);
    if (!gx) return;
    const auto len = static_cast<Eigen::Index>(n);
    Arr(gx, len) += (CArr(o.value.data(), len) > 0.0).select(CArr(o.grad.data(), len), 0.0);
  });
}

Tensor sigmoid(const Tensor& x) {
  return unary_op(
      x,
      [](double v) {
        if (v >= 0.0) return 1.0 / (1.0 + std::exp(-v));
        const double e = std::exp(v);
        return e / (1.0 + e);
      },
      [](double, double y) { return y * (1.0 - y); });
}

Tensor abs(const Tensor& x) {
  return unary_op(x, [](double v) { return std::abs(v); },
                  [](double v, double) { return v > 0.0 ? 1.0 : (v < 0.0 ? -1.0 : 0.0); });
}

Tensor log_clamped(const Tensor& x, double floor, std::size_t* clamped) {
  if (clamped) {
    for (double v : x.data()) *clamped += v < floor ? 1 : 0;
  }
  return unary_op(x, [floor](double v) { return std::log(std::max(v, floor)); },
                  [floor](double v, double) { return v >= floor ? 1.0 / v : 0.0; });
}

// ---------------------------------------------------------------------------
// Row-wise normalizations

Tensor softmax_rows(const Tensor& x) {
  require_defined(x, "softmax_rows");
  const std::size_t r = x.rows(), c = x.cols();
  Buffer out(x.numel());
  const auto in = x.data();
  for (std::size_t i = 0; i < r; ++i) {
    const double* row = in.data() + i * c;
    double* y = out.data() + i * c;
    const double mx = *std::max_element(row, row + c);
    double z = 0.0;
    for (std::size_t j = 0; j < c; ++j) z += (y[j] = std::exp(row[j] - mx));
    for (std::size_t j = 0; j < c; ++j) y[j] /= z;
  }
  Node* xn = x.node();
  return make_op_result(x.shape(), std::move(out), {&x}, [xn, r, c](Node& o) {
    double* gx = grad_of(xn);
    if (!gx) return;
    for (std::size_t i = 0; i < r; ++i) {
      const double* y = o.value.data() + i * c;
      const double* dy = o.grad.data() + i * c;
      double dot = 0.0;
      for (std::size_t j = 0; j < c; ++j) dot += dy[j] * y[j];
      for (std::size_t j = 0; j < c; ++j) gx[i * c + j] += y[j] * (dy[j] - dot);
    }
  });
}

Tensor layer_norm(const Tensor& x, const Tensor& gain, const Tensor& bias, double eps) {
  require_defined(x, "layer_norm");
  const std::size_t r = x.rows(), c = x.cols();
  if (c == 0) throw DimensionError("layer_norm: empty rows");
  if (gain.numel() != c || bias.numel() != c) {
    throw DimensionError("layer_norm: gain/bias length does not match " + std::to_string(c));
  }
  auto normalized = std::make_shared<Buffer>(x.numel());
  auto inv_std = std::make_shared<Buffer>(r);
  Buffer out(x.numel());
  const auto in = x.data();
  const auto g = gain.data();
  const auto b = bias.data();
  for (std::size_t i = 0; i < r; ++i) {
    const double* row = in.data() + i * c;
    double mu = 0.0;
    for (std::size_t j = 0; j < c; ++j) mu += row[j];
    mu /= static_cast<double>(c);
    double var = 0.0;
    for (std::size_t j = 0; j < c; ++j) var += (row[j] - mu) * (row[j] - mu);
    var /= static_cast<double>(c);
    const double is = 1.0 / std::sqrt(var + eps);
    (*inv_std)[i] = is;
    for (std::size_t j = 0; j < c; ++j) {
      const double h = (row[j] - mu) * is;
      (*normalized)[i * c + j] = h;
      out[i * c + j] = h * g[j] + b[j];
    }
  }
  Node* xn = x.node();
  Node* gn = gain.node();
  Node* bn = bias.node();
  return make_op_result(
      x.shape(), std::move(out), {&x, &gain, &bias}, [xn, gn, bn, normalized, inv_std, r, c](Node& o) {
        double* gx = grad_of(xn);
        double* gg = grad_of(gn);
        double* gb = grad_of(bn);
        Buffer dh(c);
        for (std::size_t i = 0; i < r; ++i) {
          const double* dy = o.grad.data() + i * c;
          const double* h = normalized->data() + i * c;
          double mean_dh = 0.0, mean_dh_h = 0.0;
          for (std::size_t j = 0; j < c; ++j) {
            if (gg) gg[j] += dy[j] * h[j];
            if (gb) gb[j] += dy[j];
            dh[j] = dy[j] * gn->value[j];
            mean_dh += dh[j];
            mean_dh_h += dh[j] * h[j];
          }
          if (!gx) continue;
          mean_dh /= static_cast<double>(c);
          mean_dh_h /= static_cast<double>(c);
          for (std::size_t j = 0; j < c; ++j) {
            gx[i * c + j] += (*inv_std)[i] * (dh[j] - mean_dh - h[j] * mean_dh_h);
          }
        }
      });
}

Tensor cosine_similarity(const Tensor& a, const Tensor& b) {
  require_defined(a, "cosine_similarity");
  require_defined(b, "cosine_similarity");
  if (a.cols() != b.cols()) {
    throw DimensionError("cosine_similarity: " + shape_str(a.shape()) + " vs " + shape_str(b.shape()));
  }
  constexpr double kEps = 1e-8;
  const std::size_t n = a.rows(), k = b.rows(), d = a.cols();
  CMapM am(a.data().data(), n, d);
  CMapM bm(b.data().data(), k, d);
  auto dots = std::make_shared<RowMat>(am * bm.transpose());
  auto na = std::make_shared<Eigen::VectorXd>(am.rowwise().norm());
  auto nb = std::make_shared<Eigen::VectorXd>(bm.rowwise().norm());
  Buffer out(n * k);
  for (std::size_t i = 0; i < n; ++i) {
    for (std::size_t j = 0; j < k; ++j) out[i * k + j] = (*dots)(i, j) / ((*na)(i) * (*nb)(j) + kEps);
  }
  Node* an = a.node();
  Node* bn = b.node();
  return make_op_result({n, k}, std::move(out), {&a, &b}, [an, bn, dots, na, nb, n, k, d](Node& o) {
    // d cos / d a_i = b_j / den - dot * |b_j| a_i / (|a_i| den^2), den = |a_i||b_j| + eps
    RowMat g_over_den(n, k), a_coef(n, k), b_coef(n, k);
    for (std::size_t i = 0; i < n; ++i) {
      for (std::size_t j = 0; j < k; ++j) {
        const double den = (*na)(i) * (*nb)(j) + kEps;
        const double g = o.grad[i * k + j];
        g_over_den(i, j) = g / den;
        const double common = g * (*dots)(i, j) / (den * den);
        a_coef(i, j) = (*na)(i) > 0.0 ? common * (*nb)(j) / (*na)(i) : 0.0;
        b_coef(i, j) = (*nb)(j) > 0.0 ? common * (*na)(i) / (*nb)(j) : 0.0;
      }
    }
    CMapM am(an->value.data(), n, d);
    CMapM bm(bn->value.data(), k, d);
    if (double* ga = grad_of(an)) {
      MapM gam(ga, n, d);
      gam.noalias() += g_over_den * bm;
      gam -= (a_coef.rowwise().sum()).asDiagonal() * am;
    }
    if (double* gb = grad_of(bn)) {
      MapM gbm(gb, k, d);
      gbm.noalias() += g_over_den.transpose() * am;
      gbm -= (b_coef.colwise().sum().transpose()).asDiagonal() * bm;
    }
  });
}

// ---------------------------------------------------------------------------
// Structural ops

Tensor concat_rows(const std::vector<Tensor>& parts) {
  if (parts.empty()) throw DimensionError("concat_rows: no inputs");
  const std::size_t c = parts.front().cols();
  std::size_t total = 0;
  std::vector<std::size_t> offsets;
  for (const Tensor& p : parts) {
    require_defined(p, "concat_rows");
    if (p.cols() != c) throw DimensionError("concat_rows: column count mismatch");
    offsets.push_back(total);
    total += p.rows();
  }
  Buffer out;
  out.reserve(total * c);
  for (const Tensor& p : parts) out.insert(out.end(), p.data().begin(), p.data().end());
  std::vector<Node*> nodes;
  for (const Tensor& p : parts) nodes.push_back(p.node());
  return make_op_result({total, c}, std::move(out), parts, [nodes, offsets, c](Node& o) {
    for (std::size_t p = 0; p < nodes.size(); ++p) {
      double* g = grad_of(nodes[p]);
      if (!g) continue;
      const double* src = o.grad.data() + offsets[p] * c;
      for (std::size_t i = 0; i < nodes[p]->value.size(); ++i) g[i] += src[i];
    }
  });
}

Tensor slice_rows(const Tensor& x, std::size_t begin, std::size_t count) {
  require_defined(x, "slice_rows");
  if (begin + count > x.rows()) {
    throw DimensionError("slice_rows: rows [" + std::to_string(begin) + ", " +
                         std::to_string(begin + count) + ") of " + shape_str(x.shape()));
  }
  const std::size_t c = x.cols();
  Buffer out(x.data().begin() + begin * c, x.data().begin() + (begin + count) * c);
  Node* xn = x.node();
  return make_op_result({count, c}, std::move(out), {&x}, [xn, begin, c](Node& o) {
    if (double* g = grad_of(xn)) {
      for (std::size_t i = 0; i < o.grad.size(); ++i) g[begin * c + i] += o.grad[i];
    }
  });
}

Tensor gather_rows(const Tensor& x, std::span<const std::size_t> index) {
  require_defined(x, "gather_rows");
  const std::size_t c = x.cols();
  const std::size_t r = x.rows();
  Buffer out(index.size() * c);
  for (std::size_t i = 0; i < index.size(); ++i) {
    if (index[i] >= r) throw DimensionError("gather_rows: index out of range");
    std::copy_n(x.data().begin() + index[i] * c, c, out.begin() + i * c);
  }
  Node* xn = x.node();
  std::vector<std::size_t> idx(index.begin(), index.end());
  return make_op_result({index.size(), c}, std::move(out), {&x}, [xn, idx, c](Node& o) {
    double* g = grad_of(xn);
    if (!g) return;
    for (std::size_t i = 0; i < idx.size(); ++i) {
      for (std::size_t j = 0; j < c; ++j) g[idx[i] * c + j] += o.grad[i * c + j];
    }
  });
}

Tensor pick(const Tensor& x, std::span<const std::pair<std::size_t, std::size_t>> entries) {
  require_defined(x, "pick");
  const std::size_t r = x.rows(), c = x.cols();
  std::vector<std::size_t> flat(entries.size());
  Buffer out(entries.size());
  for (std::size_t i = 0; i < entries.size(); ++i) {
    const auto [row, col] = entries[i];
    if (row >= r || col >= c) throw DimensionError("pick: entry out of range");
    flat[i] = row * c + col;
    out[i] = x.data()[flat[i]];
  }
  Node* xn = x.node();
  return make_op_result({entries.size(), 1}, std::move(out), {&x}, [xn, flat](Node& o) {
    if (double* g = grad_of(xn)) {
      for (std::size_t i = 0; i < flat.size(); ++i) g[flat[i]] += o.grad[i];
    }
  });
}

Tensor sort_pairs(const Tensor& x) {
  require_defined(x, "sort_pairs");
  if (x.cols() != 2) throw DimensionError("sort_pairs: expected two columns, got " + shape_str(x.shape()));
  const std::size_t r = x.rows();
  Buffer out(x.numel());
  std::vector<char> swapped(r);
  for (std::size_t i = 0; i < r; ++i) {
    const double a = x.data()[2 * i], b = x.data()[2 * i + 1];
    swapped[i] = a > b;
    out[2 * i] = swapped[i] ? b : a;
    out[2 * i + 1] = swapped[i] ? a : b;
  }
  Node* xn = x.node();
  return make_op_result(x.shape(), std::move(out), {&x}, [xn, swapped](Node& o) {
    double* g = grad_of(xn);
    if (!g) return;
    for (std::size_t i = 0; i < swapped.size(); ++i) {
      g[2 * i] += o.grad[swapped[i] ? 2 * i + 1 : 2 * i];
      g[2 * i + 1] += o.grad[swapped[i] ? 2 * i : 2 * i + 1];
    }
  });
}

Tensor sum(const Tensor& x) {
  require_defined(x, "sum");
  double s = 0.0;
  for (double v : x.data()) s += v;
  Node* xn = x.node();
  return make_op_result({}, {s}, {&x}, [xn](Node& o) {
    if (double* g = grad_of(xn)) {
      for (std::size_t i = 0; i < xn->value.size(); ++i) g[i] += o.grad[0];
    }
  });
}

Tensor mean(const Tensor& x) {
  if (x.numel() == 0) throw DimensionError("mean: empty tensor");
  return scale(sum(x), 1.0 / static_cast<double>(x.numel()));
}

Tensor dropout(const Tensor& x, double p, std::mt19937_64& rng) {
  if (p <= 0.0) return x;
  if (p >= 1.0) throw std::invalid_argument("dropout: p must be < 1");
  // One draw from `rng` seeds a splitmix64 stream; an entry is kept when its
  // 53-bit uniform lands at or above p.
  const auto threshold = static_cast<std::uint64_t>(std::ldexp(p, 53));
  auto mask = std::make_shared<Buffer>(x.numel());
  const double s = 1.0 / (1.0 - p);
  std::uint64_t state = rng();
  for (double& m : *mask) {
    std::uint64_t z = (state += 0x9e3779b97f4a7c15ULL);
    z = (z ^ (z >> 30)) * 0xbf58476d1ce4e5b9ULL;
    z = (z ^ (z >> 27)) * 0x94d049bb133111ebULL;
    z ^= z >> 31;
    m = (z >> 11) >= threshold ? s : 0.0;
  }
  Buffer out(x.numel());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = x.data()[i] * (*mask)[i];
  Node* xn = x.node();
  return make_op_result(x.shape(), std::move(out), {&x}, [xn, mask](Node& o) {
    if (double* g = grad_of(xn)) {
      for (std::size_t i = 0; i < o.grad.size(); ++i) g[i] += o.grad[i] * (*mask)[i];
    }
  });
}

// ---------------------------------------------------------------------------
// Attention

AttentionLayout AttentionLayout::single(std::size_t q_rows, std::size_t k_rows) {
  return AttentionLayout{{0, q_rows}, {0, k_rows}, std::vector<std::uint8_t>(k_rows, 0)};
}

Tensor multi_head_attention(const Tensor& q, const Tensor& k, const Tensor& v, std::size_t heads,
                            const AttentionLayout& layout, std::vector<AttentionMap>* maps) {
  require_defined(q, "attention");
  require_defined(k, "attention");
  require_defined(v, "attention");
  const std::size_t d = q.cols();
  if (k.cols() != d || v.cols() != d || k.rows() != v.rows()) {
    throw DimensionError("attention: q " + shape_str(q.shape()) + ", k " + shape_str(k.shape()) +
                         ", v " + shape_str(v.shape()));
  }
  if (heads == 0 || d % heads != 0) {
    throw DimensionError("attention: width " + std::to_string(d) + " not divisible into " +
                         std::to_string(heads) + " heads");
  }
  const std::size_t segs = layout.segments();
  if (layout.k_offsets.size() != layout.q_offsets.size() || segs == 0 ||
      layout.q_offsets.back() != q.rows() || layout.k_offsets.back() != k.rows() ||
      (!layout.key_mask.empty() && layout.key_mask.size() != k.rows())) {
    throw DimensionError("attention: layout does not cover the inputs");
  }
  const std::size_t dh = d / heads;
  const double inv_sqrt = 1.0 / std::sqrt(static_cast<double>(dh));
  auto probs = std::make_shared<std::vector<RowMat>>(segs * heads);
  Buffer out(q.rows() * d, 0.0);
  if (maps) maps->assign(segs, AttentionMap{});
  const double* qd = q.data().data();
  const double* kd = k.data().data();
  const double* vd = v.data().data();

  for (std::size_t s = 0; s < segs; ++s) {
    const std::size_t q0 = layout.q_offsets[s], nq = layout.q_offsets[s + 1] - q0;
    const std::size_t k0 = layout.k_offsets[s], nk = layout.k_offsets[s + 1] - k0;
    if (maps) (*maps)[s] = AttentionMap{nq, nk, std::vector<double>(nq * nk, 0.0)};
    // Masked keys get a huge negative score before the exponential and an
    // exact zero after it.
    Eigen::RowVectorXd keep = Eigen::RowVectorXd::Ones(static_cast<Eigen::Index>(nk));
    bool masked = false;
    if (!layout.key_mask.empty()) {
      for (std::size_t j = 0; j < nk; ++j) {
        if (layout.key_mask[k0 + j]) {
          keep[static_cast<Eigen::Index>(j)] = 0.0;
          masked = true;
        }
      }
    }
    const Eigen::RowVectorXd mask_bias = (keep.array() - 1.0) * 1e300;
    for (std::size_t h = 0; h < heads; ++h) {
      CSMap qh(qd + q0 * d + h * dh, nq, dh, Stride(d));
      CSMap kh(kd + k0 * d + h * dh, nk, dh, Stride(d));
      CSMap vh(vd + k0 * d + h * dh, nk, dh, Stride(d));
      RowMat& p = (*probs)[s * heads + h];
      p.noalias() = (qh * kh.transpose()) * inv_sqrt;
      if (masked) p.array().rowwise() += mask_bias.array();
      const Eigen::VectorXd row_max = p.rowwise().maxCoeff();
      p.colwise() -= row_max;
      p = p.array().exp().matrix();
      if (masked) p.array().rowwise() *= keep.array();
      const Eigen::VectorXd z = p.rowwise().sum();
      const Eigen::VectorXd inv_z = (z.array() > 0.0).select(z.array().inverse(), 0.0);
      p = inv_z.asDiagonal() * p;
      SMap(out.data() + q0 * d + h * dh, nq, dh, Stride(d)).noalias() = p * vh;
      if (maps) {
        MapM(((*maps)[s]).weights.data(), nq, nk) += p / static_cast<double>(heads);
      }
    }
  }

  Node* qn = q.node();
  Node* kn = k.node();
  Node* vn = v.node();
  AttentionLayout lay = layout;
  return make_op_result(
      {q.rows(), d}, std::move(out), {&q, &k, &v},
      [qn, kn, vn, probs, lay, heads, d, dh, inv_sqrt](Node& o) {
        double* gq = grad_of(qn);
        double* gk = grad_of(kn);
        double* gv = grad_of(vn);
        RowMat dp, ds;
        for (std::size_t s = 0; s < lay.segments(); ++s) {
          const std::size_t q0 = lay.q_offsets[s], nq = lay.q_offsets[s + 1] - q0;
          const std::size_t k0 = lay.k_offsets[s], nk = lay.k_offsets[s + 1] - k0;
          for (std::size_t h = 0; h < heads; ++h) {
            const RowMat& p = (*probs)[s * heads + h];
            CSMap dout(o.grad.data() + q0 * d + h * dh, nq, dh, Stride(d));
            CSMap qh(qn->value.data() + q0 * d + h * dh, nq, dh, Stride(d));
            CSMap kh(kn->value.data() + k0 * d + h * dh, nk, dh, Stride(d));
            CSMap vh(vn->value.data() + k0 * d + h * dh, nk, dh, Stride(d));
            if (gv) SMap(gv + k0 * d + h * dh, nk, dh, Stride(d)).noalias() += p.transpose() * dout;
            if (!gq && !gk) continue;
            dp.noalias() = dout * vh.transpose();
            ds = p.cwiseProduct(dp);
            const Eigen::VectorXd row_dot = ds.rowwise().sum();
            ds -= row_dot.asDiagonal() * p;
            ds *= inv_sqrt;
            if (gq) SMap(gq + q0 * d + h * dh, nq, dh, Stride(d)).noalias() += ds * kh;
            if (gk) SMap(gk + k0 * d + h * dh, nk, dh, Stride(d)).noalias() += ds.transpose() * qh;
          }
        }
      });
}

// ---------------------------------------------------------------------------
// Backward sweep

void backward(const Tensor& loss) {
  require_defined(loss, "backward");
  if (loss.numel() != 1) throw DimensionError("backward: loss must be a scalar, got " + shape_str(loss.shape()));
  Node* root = loss.node();
  if (!root->requires_grad) throw std::invalid_argument("backward: loss does not depend on any parameter");

  // Iterative post-order DFS: parents appear before their consumers.
  std::vector<Node*> order;
  std::unordered_set<Node*> visited;
  std::vector<std::pair<Node*, std::size_t>> stack{{root, 0}};
  visited.insert(root);
  while (!stack.empty()) {
    auto& [node, next] = stack.back();
    if (next < node->parents.size()) {
      Node* p = node->parents[next++].get();
      if (p->requires_grad && visited.insert(p).second) stack.emplace_back(p, 0);
    } else {
      order.push_back(node);
      stack.pop_back();
    }
  }

  for (Node* n : order) {
    if (!n->is_leaf()) n->grad.assign(n->value.size(), 0.0);
  }
  root->ensure_grad()[0] += 1.0;
  for (auto it = order.rbegin(); it != order.rend(); ++it) {
    if (!(*it)->is_leaf()) (*it)->backward(**it);
  }
}

double grad_check(const std::function<Tensor()>& loss_fn, std::vector<Tensor> params,
                  GradCheckOptions options) {
  for (Tensor& p : params) p.zero_grad();
  const Tensor loss = loss_fn();
  if (!std::isfinite(loss.item())) throw std::domain_error("grad_check: non-finite loss");
  backward(loss);

  NoGradGuard no_grad;
  double worst = 0.0;
  const double h = options.epsilon;
  for (Tensor& p : params) {
    const std::vector<double> analytic =
        p.has_grad() ? std::vector<double>(p.grad().begin(), p.grad().end())
                     : std::vector<double>(p.numel(), 0.0);
    auto values = p.mutable_data();
    std::size_t stride = 1;
    if (options.max_entries_per_param > 0 && values.size() > options.max_entries_per_param) {
      stride = (values.size() + options.max_entries_per_param - 1) / options.max_entries_per_param;
    }
    for (std::size_t i = 0; i < values.size(); i += stride) {
      const double original = values[i];
      values[i] = original + h;
      const double up = loss_fn().item();
      values[i] = original - h;
      const double down = loss_fn().item();
      values[i] = original;
      if (!std::isfinite(up) || !std::isfinite(down)) {
        throw std::domain_error("grad_check: non-finite loss under perturbation");
      }
      const double fd = (up - down) / (2.0 * h);
      const double denom = std::max({std::abs(analytic[i]), std::abs(fd), options.floor});
      worst = std::max(worst, std::abs(analytic[i] - fd) / denom);
    }
  }
  return worst;
}

}  // namespace spanset
