#include "cpf/autodiff.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <sstream>

namespace cpf {

using detail::Node;

namespace {

thread_local Tape* g_active_tape = nullptr;

std::shared_ptr<Node> make_node(Shape shape, std::vector<double> value) {
  auto n = std::make_shared<Node>();
  n->shape = shape;
  n->value = std::move(value);
  return n;
}

[[noreturn]] void shape_error(const char* op, const Shape& a, const Shape& b) {
  throw ShapeError(std::string(op) + ": incompatible shapes " + to_string(a) + " and " +
                   to_string(b));
}

void require(bool ok, const char* op, const std::string& what) {
  if (!ok) throw ShapeError(std::string(op) + ": " + what);
}

// Wraps a computed value into a Tensor, attaching history when any input
// carries a gradient and a tape is active.
Tensor finish(Shape shape, std::vector<double> value, const char* op,
              std::initializer_list<const Tensor*> inputs, std::function<void(Node&)> backward) {
  auto n = make_node(shape, std::move(value));
  n->op = op;
  Tape* tape = g_active_tape;
  if (tape) {
    bool any = false;
    for (const Tensor* t : inputs) any = any || t->requires_grad();
    if (any) {
      n->requires_grad = true;
      n->leaf = false;
      n->parents.reserve(inputs.size());
      for (const Tensor* t : inputs) n->parents.push_back(t->node_ptr());
      n->backward = std::move(backward);
      tape->record(n);
    }
  }
  return Tensor(n);
}

Tensor finish_many(Shape shape, std::vector<double> value, const char* op,
                   std::span<const Tensor> inputs, std::function<void(Node&)> backward) {
  auto n = make_node(shape, std::move(value));
  n->op = op;
  Tape* tape = g_active_tape;
  if (tape) {
    bool any = false;
    for (const Tensor& t : inputs) any = any || t.requires_grad();
    if (any) {
      n->requires_grad = true;
      n->leaf = false;
      for (const Tensor& t : inputs) n->parents.push_back(t.node_ptr());
      n->backward = std::move(backward);
      tape->record(n);
    }
  }
  return Tensor(n);
}

inline bool wants(const Node& self, std::size_t i) { return self.parents[i]->requires_grad; }
inline std::vector<double>& pgrad(Node& self, std::size_t i) { return self.parents[i]->ensure_grad(); }

// C(r x c) += A(r x k) * B(k x c)
void gemm_nn(const double* a, const double* b, double* c, std::size_t r, std::size_t k,
             std::size_t cc) {
  for (std::size_t i = 0; i < r; ++i) {
    double* crow = c + i * cc;
    const double* arow = a + i * k;
    for (std::size_t p = 0; p < k; ++p) {
      const double av = arow[p];
      const double* brow = b + p * cc;
      for (std::size_t j = 0; j < cc; ++j) crow[j] += av * brow[j];
    }
  }
}

// C(k x c) += A^T * B with A (r x k), B (r x c)
void gemm_tn(const double* a, const double* b, double* c, std::size_t r, std::size_t k,
             std::size_t cc) {
  for (std::size_t i = 0; i < r; ++i) {
    const double* arow = a + i * k;
    const double* brow = b + i * cc;
    for (std::size_t p = 0; p < k; ++p) {
      const double av = arow[p];
      double* crow = c + p * cc;
      for (std::size_t j = 0; j < cc; ++j) crow[j] += av * brow[j];
    }
  }
}

std::vector<double> transposed(const std::vector<double>& v, std::size_t r, std::size_t c) {
  std::vector<double> out(v.size());
  for (std::size_t i = 0; i < r; ++i)
    for (std::size_t j = 0; j < c; ++j) out[j * r + i] = v[i * c + j];
  return out;
}

struct Broadcast {
  Shape out;
  std::size_t a_rs, a_cs, b_rs, b_cs;
  bool same;
};

Broadcast broadcast(const char* op, const Shape& a, const Shape& b) {
  auto dim = [&](std::size_t x, std::size_t y) {
    if (x == y) return x;
    if (x == 1) return y;
    if (y == 1) return x;
    shape_error(op, a, b);
  };
  Broadcast bc;
  bc.out = {dim(a.rows, b.rows), dim(a.cols, b.cols)};
  bc.a_rs = a.rows == 1 ? 0 : a.cols;
  bc.a_cs = a.cols == 1 ? 0 : 1;
  bc.b_rs = b.rows == 1 ? 0 : b.cols;
  bc.b_cs = b.cols == 1 ? 0 : 1;
  bc.same = a == b;
  return bc;
}

template <class F>
std::vector<double> binary_values(const Broadcast& bc, const std::vector<double>& a,
                                  const std::vector<double>& b, F f) {
  std::vector<double> out(bc.out.size());
  if (bc.same) {
    for (std::size_t i = 0; i < out.size(); ++i) out[i] = f(a[i], b[i]);
    return out;
  }
  for (std::size_t i = 0; i < bc.out.rows; ++i)
    for (std::size_t j = 0; j < bc.out.cols; ++j)
      out[i * bc.out.cols + j] = f(a[i * bc.a_rs + j * bc.a_cs], b[i * bc.b_rs + j * bc.b_cs]);
  return out;
}

// Accumulates ga(g, i, j) into the a-operand gradient respecting broadcast.
template <class F>
void scatter(const Broadcast& bc, bool to_a, std::vector<double>& dst, F f) {
  const std::size_t rs = to_a ? bc.a_rs : bc.b_rs;
  const std::size_t cs = to_a ? bc.a_cs : bc.b_cs;
  if (bc.same) {
    for (std::size_t k = 0; k < dst.size(); ++k) dst[k] += f(k);
    return;
  }
  for (std::size_t i = 0; i < bc.out.rows; ++i)
    for (std::size_t j = 0; j < bc.out.cols; ++j) {
      const std::size_t k = i * bc.out.cols + j;
      dst[i * rs + j * cs] += f(k);
    }
}

template <class F, class D>
Tensor unary(const Tensor& a, const char* op, F f, D dfdx) {
  const auto& av = a.node()->value;
  std::vector<double> out(av.size());
  for (std::size_t i = 0; i < av.size(); ++i) out[i] = f(av[i]);
  return finish(a.shape(), std::move(out), op, {&a}, [dfdx](Node& self) {
    if (!wants(self, 0)) return;
    auto& g = pgrad(self, 0);
    const auto& x = self.parents[0]->value;
    for (std::size_t i = 0; i < g.size(); ++i) g[i] += self.grad[i] * dfdx(x[i], self.value[i]);
  });
}

}  // namespace

std::string to_string(const Shape& s) {
  return "(" + std::to_string(s.rows) + "x" + std::to_string(s.cols) + ")";
}

// ---- Tensor ---------------------------------------------------------------

Tensor Tensor::zeros(std::size_t rows, std::size_t cols) { return full(rows, cols, 0.0); }

Tensor Tensor::full(std::size_t rows, std::size_t cols, double value) {
  return Tensor(make_node({rows, cols}, std::vector<double>(rows * cols, value)));
}

Tensor Tensor::from(std::size_t rows, std::size_t cols, std::vector<double> values) {
  if (values.size() != rows * cols)
    throw ShapeError("Tensor::from: " + std::to_string(values.size()) + " values for shape " +
                     to_string(Shape{rows, cols}));
  return Tensor(make_node({rows, cols}, std::move(values)));
}

Tensor Tensor::scalar(double value) { return full(1, 1, value); }

Tensor Tensor::identity(std::size_t n) {
  Tensor t = zeros(n, n);
  for (std::size_t i = 0; i < n; ++i) t.node_->value[i * n + i] = 1.0;
  return t;
}

Tensor Tensor::parameter(std::size_t rows, std::size_t cols, std::vector<double> values) {
  Tensor t = from(rows, cols, std::move(values));
  t.node_->requires_grad = true;
  return t;
}

Shape Tensor::shape() const { return node_->shape; }
std::size_t Tensor::rows() const { return node_->shape.rows; }
std::size_t Tensor::cols() const { return node_->shape.cols; }
std::size_t Tensor::size() const { return node_->value.size(); }
std::span<const double> Tensor::values() const { return node_->value; }
std::span<double> Tensor::mutable_values() { return node_->value; }

double Tensor::operator()(std::size_t r, std::size_t c) const {
  return node_->value[r * node_->shape.cols + c];
}

double Tensor::item() const {
  if (size() != 1) throw ShapeError("item: tensor of shape " + to_string(shape()) + " is not scalar");
  return node_->value[0];
}

bool Tensor::requires_grad() const { return node_ && node_->requires_grad; }
std::span<const double> Tensor::grad() const { return node_->grad; }
std::span<double> Tensor::mutable_grad() { return node_->ensure_grad(); }
void Tensor::zero_grad() { node_->grad.assign(node_->value.size(), 0.0); }

bool Tensor::all_finite() const {
  return std::all_of(node_->value.begin(), node_->value.end(),
                     [](double v) { return std::isfinite(v); });
}

Tensor Tensor::detach() const { return Tensor(make_node(node_->shape, node_->value)); }
Tensor Tensor::clone() const {
  Tensor t = detach();
  t.node_->requires_grad = node_->requires_grad && node_->leaf;
  return t;
}

// ---- Tape -----------------------------------------------------------------

Tape::Tape() : previous_(g_active_tape) { g_active_tape = this; }
Tape::~Tape() { g_active_tape = previous_; }
Tape* Tape::active() { return g_active_tape; }
void Tape::record(std::shared_ptr<Node> node) { nodes_.push_back(std::move(node)); }

void Tape::backward(const Tensor& loss) {
  if (loss.size() != 1)
    throw ShapeError("backward: loss must be scalar, got " + to_string(loss.shape()));
  if (!loss.requires_grad()) {
    nodes_.clear();
    return;
  }
  loss.node()->grad.assign(1, 1.0);
  for (std::size_t k = nodes_.size(); k-- > 0;) {
    Node& n = *nodes_[k];
    if (n.grad.empty() || !n.backward) continue;
    n.backward(n);
    // Blame the first node whose backward produced a non-finite gradient.
    for (const auto& parent : n.parents) {
      for (double g : parent->grad) {
        if (!std::isfinite(g)) {
          nodes_.clear();
          throw NumericError("backward: non-finite gradient from node #" + std::to_string(k) + " (" +
                             n.op + ", shape " + to_string(n.shape) + ")");
        }
      }
    }
  }
  nodes_.clear();
}

NoGradScope::NoGradScope() : saved_(g_active_tape) { g_active_tape = nullptr; }
NoGradScope::~NoGradScope() { g_active_tape = saved_; }

std::vector<std::vector<double>> gradients(const std::function<Tensor()>& loss_fn,
                                           std::span<const Tensor> params) {
  for (Tensor p : params) p.zero_grad();
  {
    Tape tape;
    Tensor loss = loss_fn();
    tape.backward(loss);
  }
  std::vector<std::vector<double>> out;
  for (Tensor p : params) {
    out.emplace_back(p.grad().begin(), p.grad().end());
    p.zero_grad();
  }
  return out;
}

// ---- linear algebra -------------------------------------------------------

Tensor matmul(const Tensor& a, const Tensor& b) {
  if (a.cols() != b.rows()) shape_error("matmul", a.shape(), b.shape());
  const std::size_t r = a.rows(), k = a.cols(), c = b.cols();
  std::vector<double> out(r * c, 0.0);
  gemm_nn(a.node()->value.data(), b.node()->value.data(), out.data(), r, k, c);
  return finish({r, c}, std::move(out), "matmul", {&a, &b}, [r, k, c](Node& self) {
    const auto& av = self.parents[0]->value;
    const auto& bv = self.parents[1]->value;
    if (wants(self, 0)) {
      auto bt = transposed(bv, k, c);
      gemm_nn(self.grad.data(), bt.data(), pgrad(self, 0).data(), r, c, k);
    }
    if (wants(self, 1)) gemm_tn(av.data(), self.grad.data(), pgrad(self, 1).data(), r, k, c);
  });
}

Tensor affine(const Tensor& x, const Tensor& w, const Tensor& b) {
  if (x.cols() != w.rows()) shape_error("affine", x.shape(), w.shape());
  if (b.rows() != 1 || b.cols() != w.cols()) shape_error("affine", w.shape(), b.shape());
  const std::size_t r = x.rows(), k = x.cols(), c = w.cols();
  std::vector<double> out(r * c);
  const auto& bv = b.node()->value;
  for (std::size_t i = 0; i < r; ++i) std::copy(bv.begin(), bv.end(), out.begin() + i * c);
  gemm_nn(x.node()->value.data(), w.node()->value.data(), out.data(), r, k, c);
  return finish({r, c}, std::move(out), "affine", {&x, &w, &b}, [r, k, c](Node& self) {
    const auto& xv = self.parents[0]->value;
    const auto& wv = self.parents[1]->value;
    if (wants(self, 0)) {
      auto wt = transposed(wv, k, c);
      gemm_nn(self.grad.data(), wt.data(), pgrad(self, 0).data(), r, c, k);
    }
    if (wants(self, 1)) gemm_tn(xv.data(), self.grad.data(), pgrad(self, 1).data(), r, k, c);
    if (wants(self, 2)) {
      auto& gb = pgrad(self, 2);
      for (std::size_t i = 0; i < r; ++i)
        for (std::size_t j = 0; j < c; ++j) gb[j] += self.grad[i * c + j];
    }
  });
}

Tensor transpose(const Tensor& a) {
  const std::size_t r = a.rows(), c = a.cols();
  return finish({c, r}, transposed(a.node()->value, r, c), "transpose", {&a}, [r, c](Node& self) {
    if (!wants(self, 0)) return;
    auto& g = pgrad(self, 0);
    for (std::size_t i = 0; i < r; ++i)
      for (std::size_t j = 0; j < c; ++j) g[i * c + j] += self.grad[j * r + i];
  });
}

Tensor inverse(const Tensor& a) {
  require(a.rows() == a.cols(), "inverse", "matrix must be square, got " + to_string(a.shape()));
  const std::size_t n = a.rows();
  std::vector<double> m = a.node()->value;
  std::vector<double> inv(n * n, 0.0);
  for (std::size_t i = 0; i < n; ++i) inv[i * n + i] = 1.0;
  for (std::size_t col = 0; col < n; ++col) {
    std::size_t piv = col;
    for (std::size_t r = col + 1; r < n; ++r)
      if (std::abs(m[r * n + col]) > std::abs(m[piv * n + col])) piv = r;
    if (m[piv * n + col] == 0.0) throw NumericError("inverse: singular matrix");
    if (piv != col)
      for (std::size_t j = 0; j < n; ++j) {
        std::swap(m[piv * n + j], m[col * n + j]);
        std::swap(inv[piv * n + j], inv[col * n + j]);
      }
    const double d = m[col * n + col];
    for (std::size_t j = 0; j < n; ++j) {
      m[col * n + j] /= d;
      inv[col * n + j] /= d;
    }
    for (std::size_t r = 0; r < n; ++r) {
      if (r == col) continue;
      const double f = m[r * n + col];
      if (f == 0.0) continue;
      for (std::size_t j = 0; j < n; ++j) {
        m[r * n + j] -= f * m[col * n + j];
        inv[r * n + j] -= f * inv[col * n + j];
      }
    }
  }
  return finish({n, n}, std::move(inv), "inverse", {&a}, [n](Node& self) {
    if (!wants(self, 0)) return;
    // dA = -Y^T G Y^T
    const auto& y = self.value;
    auto yt = transposed(y, n, n);
    std::vector<double> tmp(n * n, 0.0), res(n * n, 0.0);
    gemm_nn(yt.data(), self.grad.data(), tmp.data(), n, n, n);
    gemm_nn(tmp.data(), yt.data(), res.data(), n, n, n);
    auto& g = pgrad(self, 0);
    for (std::size_t i = 0; i < n * n; ++i) g[i] -= res[i];
  });
}

// ---- elementwise binary ---------------------------------------------------

Tensor add(const Tensor& a, const Tensor& b) {
  Broadcast bc = broadcast("add", a.shape(), b.shape());
  auto out = binary_values(bc, a.node()->value, b.node()->value, [](double x, double y) { return x + y; });
  return finish(bc.out, std::move(out), "add", {&a, &b}, [bc](Node& self) {
    const auto& g = self.grad;
    if (wants(self, 0)) scatter(bc, true, pgrad(self, 0), [&](std::size_t k) { return g[k]; });
    if (wants(self, 1)) scatter(bc, false, pgrad(self, 1), [&](std::size_t k) { return g[k]; });
  });
}

Tensor sub(const Tensor& a, const Tensor& b) {
  Broadcast bc = broadcast("sub", a.shape(), b.shape());
  auto out = binary_values(bc, a.node()->value, b.node()->value, [](double x, double y) { return x - y; });
  return finish(bc.out, std::move(out), "sub", {&a, &b}, [bc](Node& self) {
    const auto& g = self.grad;
    if (wants(self, 0)) scatter(bc, true, pgrad(self, 0), [&](std::size_t k) { return g[k]; });
    if (wants(self, 1)) scatter(bc, false, pgrad(self, 1), [&](std::size_t k) { return -g[k]; });
  });
}

Tensor mul(const Tensor& a, const Tensor& b) {
  Broadcast bc = broadcast("mul", a.shape(), b.shape());
  auto out = binary_values(bc, a.node()->value, b.node()->value, [](double x, double y) { return x * y; });
  return finish(bc.out, std::move(out), "mul", {&a, &b}, [bc](Node& self) {
    const auto& g = self.grad;
    const auto& av = self.parents[0]->value;
    const auto& bv = self.parents[1]->value;
    const std::size_t c = bc.out.cols;
    auto at = [&](std::size_t k, bool of_a) {
      const std::size_t i = k / c, j = k % c;
      return of_a ? av[i * bc.a_rs + j * bc.a_cs] : bv[i * bc.b_rs + j * bc.b_cs];
    };
    if (bc.same) {
      if (wants(self, 0)) {
        auto& ga = pgrad(self, 0);
        for (std::size_t k = 0; k < g.size(); ++k) ga[k] += g[k] * bv[k];
      }
      if (wants(self, 1)) {
        auto& gb = pgrad(self, 1);
        for (std::size_t k = 0; k < g.size(); ++k) gb[k] += g[k] * av[k];
      }
      return;
    }
    if (wants(self, 0)) scatter(bc, true, pgrad(self, 0), [&](std::size_t k) { return g[k] * at(k, false); });
    if (wants(self, 1)) scatter(bc, false, pgrad(self, 1), [&](std::size_t k) { return g[k] * at(k, true); });
  });
}

Tensor div(const Tensor& a, const Tensor& b) {
  Broadcast bc = broadcast("div", a.shape(), b.shape());
  auto out = binary_values(bc, a.node()->value, b.node()->value, [](double x, double y) { return x / y; });
  return finish(bc.out, std::move(out), "div", {&a, &b}, [bc](Node& self) {
    const auto& g = self.grad;
    const auto& av = self.parents[0]->value;
    const auto& bv = self.parents[1]->value;
    const std::size_t c = bc.out.cols;
    auto a_at = [&](std::size_t k) { return av[(k / c) * bc.a_rs + (k % c) * bc.a_cs]; };
    auto b_at = [&](std::size_t k) { return bv[(k / c) * bc.b_rs + (k % c) * bc.b_cs]; };
    if (wants(self, 0)) scatter(bc, true, pgrad(self, 0), [&](std::size_t k) { return g[k] / b_at(k); });
    if (wants(self, 1))
      scatter(bc, false, pgrad(self, 1), [&](std::size_t k) {
        const double y = b_at(k);
        return -g[k] * a_at(k) / (y * y);
      });
  });
}

// ---- elementwise unary ----------------------------------------------------

Tensor scale(const Tensor& a, double c) {
  return unary(a, "scale", [c](double x) { return c * x; }, [c](double, double) { return c; });
}

Tensor add_scalar(const Tensor& a, double c) {
  return unary(a, "add_scalar", [c](double x) { return x + c; }, [](double, double) { return 1.0; });
}

Tensor neg(const Tensor& a) {
  return unary(a, "neg", [](double x) { return -x; }, [](double, double) { return -1.0; });
}

Tensor sigmoid(const Tensor& a) {
  return unary(
      a, "sigmoid",
      [](double x) {
        if (x >= 0) return 1.0 / (1.0 + std::exp(-x));
        const double e = std::exp(x);
        return e / (1.0 + e);
      },
      [](double, double y) { return y * (1.0 - y); });
}

Tensor tanh(const Tensor& a) {
  return unary(a, "tanh", [](double x) { return std::tanh(x); }, [](double, double y) { return 1.0 - y * y; });
}

Tensor relu(const Tensor& a) {
  return unary(a, "relu", [](double x) { return x > 0 ? x : 0.0; },
               [](double x, double) { return x > 0 ? 1.0 : 0.0; });
}

Tensor exp(const Tensor& a) {
  return unary(a, "exp", [](double x) { return std::exp(x); }, [](double, double y) { return y; });
}

Tensor log(const Tensor& a) {
  return unary(a, "log", [](double x) { return std::log(x); }, [](double x, double) { return 1.0 / x; });
}

Tensor square(const Tensor& a) {
  return unary(a, "square", [](double x) { return x * x; }, [](double x, double) { return 2.0 * x; });
}

Tensor clamp(const Tensor& a, double lo, double hi) {
  return unary(a, "clamp", [lo, hi](double x) { return std::clamp(x, lo, hi); },
               [lo, hi](double x, double) { return (x >= lo && x <= hi) ? 1.0 : 0.0; });
}

// ---- row-wise -------------------------------------------------------------

Tensor softmax(const Tensor& a) {
  const std::size_t r = a.rows(), c = a.cols();
  const auto& x = a.node()->value;
  std::vector<double> out(x.size());
  for (std::size_t i = 0; i < r; ++i) {
    const double* xr = x.data() + i * c;
    double* yr = out.data() + i * c;
    const double m = *std::max_element(xr, xr + c);
    double s = 0.0;
    for (std::size_t j = 0; j < c; ++j) s += (yr[j] = std::exp(xr[j] - m));
    for (std::size_t j = 0; j < c; ++j) yr[j] /= s;
  }
  return finish(a.shape(), std::move(out), "softmax", {&a}, [r, c](Node& self) {
    if (!wants(self, 0)) return;
    auto& g = pgrad(self, 0);
    for (std::size_t i = 0; i < r; ++i) {
      const double* y = self.value.data() + i * c;
      const double* gy = self.grad.data() + i * c;
      double dot = 0.0;
      for (std::size_t j = 0; j < c; ++j) dot += gy[j] * y[j];
      for (std::size_t j = 0; j < c; ++j) g[i * c + j] += y[j] * (gy[j] - dot);
    }
  });
}

Tensor log_softmax(const Tensor& a) {
  const std::size_t r = a.rows(), c = a.cols();
  const auto& x = a.node()->value;
  std::vector<double> out(x.size());
  for (std::size_t i = 0; i < r; ++i) {
    const double* xr = x.data() + i * c;
    const double m = *std::max_element(xr, xr + c);
    double s = 0.0;
    for (std::size_t j = 0; j < c; ++j) s += std::exp(xr[j] - m);
    const double lse = m + std::log(s);
    for (std::size_t j = 0; j < c; ++j) out[i * c + j] = xr[j] - lse;
  }
  return finish(a.shape(), std::move(out), "log_softmax", {&a}, [r, c](Node& self) {
    if (!wants(self, 0)) return;
    auto& g = pgrad(self, 0);
    for (std::size_t i = 0; i < r; ++i) {
      const double* y = self.value.data() + i * c;
      const double* gy = self.grad.data() + i * c;
      double total = 0.0;
      for (std::size_t j = 0; j < c; ++j) total += gy[j];
      for (std::size_t j = 0; j < c; ++j) g[i * c + j] += gy[j] - std::exp(y[j]) * total;
    }
  });
}

Tensor logsumexp(const Tensor& a) {
  const std::size_t r = a.rows(), c = a.cols();
  const auto& x = a.node()->value;
  std::vector<double> out(r);
  for (std::size_t i = 0; i < r; ++i) {
    const double* xr = x.data() + i * c;
    const double m = *std::max_element(xr, xr + c);
    if (!std::isfinite(m)) {
      out[i] = m;
      continue;
    }
    double s = 0.0;
    for (std::size_t j = 0; j < c; ++j) s += std::exp(xr[j] - m);
    out[i] = m + std::log(s);
  }
  return finish({r, 1}, std::move(out), "logsumexp", {&a}, [r, c](Node& self) {
    if (!wants(self, 0)) return;
    auto& g = pgrad(self, 0);
    const auto& x = self.parents[0]->value;
    for (std::size_t i = 0; i < r; ++i)
      for (std::size_t j = 0; j < c; ++j)
        g[i * c + j] += self.grad[i] * std::exp(x[i * c + j] - self.value[i]);
  });
}

Tensor entropy_rows(const Tensor& p) {
  const std::size_t r = p.rows(), c = p.cols();
  const auto& x = p.node()->value;
  std::vector<double> out(r, 0.0);
  for (std::size_t i = 0; i < r; ++i)
    for (std::size_t j = 0; j < c; ++j) {
      const double v = x[i * c + j];
      if (v > 0) out[i] -= v * std::log(v);
    }
  return finish({r, 1}, std::move(out), "entropy_rows", {&p}, [r, c](Node& self) {
    if (!wants(self, 0)) return;
    auto& g = pgrad(self, 0);
    const auto& x = self.parents[0]->value;
    constexpr double floor = 1e-300;
    for (std::size_t i = 0; i < r; ++i)
      for (std::size_t j = 0; j < c; ++j)
        g[i * c + j] -= self.grad[i] * (std::log(std::max(x[i * c + j], floor)) + 1.0);
  });
}

// ---- reductions -----------------------------------------------------------

Tensor sum(const Tensor& a) {
  double s = 0.0;
  for (double v : a.node()->value) s += v;
  return finish({1, 1}, {s}, "sum", {&a}, [](Node& self) {
    if (!wants(self, 0)) return;
    for (double& g : pgrad(self, 0)) g += self.grad[0];
  });
}

Tensor mean(const Tensor& a) {
  const double n = static_cast<double>(a.size());
  require(a.size() > 0, "mean", "empty tensor");
  return scale(sum(a), 1.0 / n);
}

Tensor sum_axis(const Tensor& a, int axis) {
  const std::size_t r = a.rows(), c = a.cols();
  const auto& x = a.node()->value;
  require(axis == 0 || axis == 1, "sum_axis", "axis must be 0 or 1");
  if (axis == 0) {
    std::vector<double> out(c, 0.0);
    for (std::size_t i = 0; i < r; ++i)
      for (std::size_t j = 0; j < c; ++j) out[j] += x[i * c + j];
    return finish({1, c}, std::move(out), "sum_axis0", {&a}, [r, c](Node& self) {
      if (!wants(self, 0)) return;
      auto& g = pgrad(self, 0);
      for (std::size_t i = 0; i < r; ++i)
        for (std::size_t j = 0; j < c; ++j) g[i * c + j] += self.grad[j];
    });
  }
  std::vector<double> out(r, 0.0);
  for (std::size_t i = 0; i < r; ++i)
    for (std::size_t j = 0; j < c; ++j) out[i] += x[i * c + j];
  return finish({r, 1}, std::move(out), "sum_axis1", {&a}, [r, c](Node& self) {
    if (!wants(self, 0)) return;
    auto& g = pgrad(self, 0);
    for (std::size_t i = 0; i < r; ++i)
      for (std::size_t j = 0; j < c; ++j) g[i * c + j] += self.grad[i];
  });
}

Tensor mean_axis(const Tensor& a, int axis) {
  const double n = static_cast<double>(axis == 0 ? a.rows() : a.cols());
  require(n > 0, "mean_axis", "empty axis");
  return scale(sum_axis(a, axis), 1.0 / n);
}

Tensor max_axis(const Tensor& a, int axis) {
  require(axis == 0 || axis == 1, "max_axis", "axis must be 0 or 1");
  require(a.size() > 0, "max_axis", "empty tensor");
  const std::size_t r = a.rows(), c = a.cols();
  const auto& x = a.node()->value;
  const std::size_t outer = axis == 0 ? c : r;
  const std::size_t inner = axis == 0 ? r : c;
  auto index = [=](std::size_t o, std::size_t k) { return axis == 0 ? k * c + o : o * c + k; };
  std::vector<double> out(outer);
  std::vector<std::size_t> arg(outer);
  for (std::size_t o = 0; o < outer; ++o) {
    std::size_t best = index(o, 0);
    for (std::size_t k = 1; k < inner; ++k)
      if (x[index(o, k)] > x[best]) best = index(o, k);
    out[o] = x[best];
    arg[o] = best;
  }
  Shape s = axis == 0 ? Shape{1, c} : Shape{r, 1};
  return finish(s, std::move(out), "max_axis", {&a}, [arg = std::move(arg)](Node& self) {
    if (!wants(self, 0)) return;
    auto& g = pgrad(self, 0);
    for (std::size_t o = 0; o < arg.size(); ++o) g[arg[o]] += self.grad[o];
  });
}

// ---- structural -----------------------------------------------------------

Tensor concat_cols(std::span<const Tensor> parts) {
  require(!parts.empty(), "concat_cols", "no inputs");
  const std::size_t r = parts[0].rows();
  std::size_t c = 0;
  std::vector<std::size_t> offsets;
  for (const Tensor& p : parts) {
    if (p.rows() != r) shape_error("concat_cols", parts[0].shape(), p.shape());
    offsets.push_back(c);
    c += p.cols();
  }
  std::vector<double> out(r * c);
  for (std::size_t k = 0; k < parts.size(); ++k) {
    const auto& v = parts[k].node()->value;
    const std::size_t pc = parts[k].cols();
    for (std::size_t i = 0; i < r; ++i)
      std::copy(v.begin() + i * pc, v.begin() + (i + 1) * pc, out.begin() + i * c + offsets[k]);
  }
  return finish_many({r, c}, std::move(out), "concat_cols", parts, [r, c, offsets](Node& self) {
    for (std::size_t k = 0; k < self.parents.size(); ++k) {
      if (!wants(self, k)) continue;
      auto& g = pgrad(self, k);
      const std::size_t pc = self.parents[k]->shape.cols;
      for (std::size_t i = 0; i < r; ++i)
        for (std::size_t j = 0; j < pc; ++j) g[i * pc + j] += self.grad[i * c + offsets[k] + j];
    }
  });
}

Tensor concat_cols(const Tensor& a, const Tensor& b) {
  const Tensor parts[] = {a, b};
  return concat_cols(parts);
}

Tensor concat_rows(std::span<const Tensor> parts) {
  require(!parts.empty(), "concat_rows", "no inputs");
  const std::size_t c = parts[0].cols();
  std::size_t r = 0;
  std::vector<double> out;
  for (const Tensor& p : parts) {
    if (p.cols() != c) shape_error("concat_rows", parts[0].shape(), p.shape());
    r += p.rows();
    out.insert(out.end(), p.node()->value.begin(), p.node()->value.end());
  }
  return finish_many({r, c}, std::move(out), "concat_rows", parts, [](Node& self) {
    std::size_t offset = 0;
    for (std::size_t k = 0; k < self.parents.size(); ++k) {
      const std::size_t n = self.parents[k]->value.size();
      if (wants(self, k)) {
        auto& g = pgrad(self, k);
        for (std::size_t i = 0; i < n; ++i) g[i] += self.grad[offset + i];
      }
      offset += n;
    }
  });
}

Tensor slice_cols(const Tensor& a, std::size_t begin, std::size_t end) {
  require(begin <= end && end <= a.cols(), "slice_cols",
          "range [" + std::to_string(begin) + "," + std::to_string(end) + ") out of " + to_string(a.shape()));
  const std::size_t r = a.rows(), c = a.cols(), w = end - begin;
  const auto& x = a.node()->value;
  std::vector<double> out(r * w);
  for (std::size_t i = 0; i < r; ++i)
    std::copy(x.begin() + i * c + begin, x.begin() + i * c + end, out.begin() + i * w);
  return finish({r, w}, std::move(out), "slice_cols", {&a}, [r, c, w, begin](Node& self) {
    if (!wants(self, 0)) return;
    auto& g = pgrad(self, 0);
    for (std::size_t i = 0; i < r; ++i)
      for (std::size_t j = 0; j < w; ++j) g[i * c + begin + j] += self.grad[i * w + j];
  });
}

Tensor slice_rows(const Tensor& a, std::size_t begin, std::size_t end) {
  require(begin <= end && end <= a.rows(), "slice_rows",
          "range [" + std::to_string(begin) + "," + std::to_string(end) + ") out of " + to_string(a.shape()));
  const std::size_t c = a.cols();
  const auto& x = a.node()->value;
  std::vector<double> out(x.begin() + begin * c, x.begin() + end * c);
  return finish({end - begin, c}, std::move(out), "slice_rows", {&a}, [begin, c](Node& self) {
    if (!wants(self, 0)) return;
    auto& g = pgrad(self, 0);
    for (std::size_t k = 0; k < self.grad.size(); ++k) g[begin * c + k] += self.grad[k];
  });
}

Tensor group_max(const Tensor& a, std::size_t group) {
  require(group > 0 && a.rows() % group == 0, "group_max",
          "rows " + std::to_string(a.rows()) + " not divisible by group " + std::to_string(group));
  const std::size_t c = a.cols(), groups = a.rows() / group;
  const auto& x = a.node()->value;
  std::vector<double> out(groups * c);
  std::vector<std::size_t> arg(groups * c);
  for (std::size_t gi = 0; gi < groups; ++gi)
    for (std::size_t j = 0; j < c; ++j) {
      std::size_t best = gi * group * c + j;
      for (std::size_t k = 1; k < group; ++k) {
        const std::size_t idx = (gi * group + k) * c + j;
        if (x[idx] > x[best]) best = idx;
      }
      out[gi * c + j] = x[best];
      arg[gi * c + j] = best;
    }
  return finish({groups, c}, std::move(out), "group_max", {&a}, [arg = std::move(arg)](Node& self) {
    if (!wants(self, 0)) return;
    auto& g = pgrad(self, 0);
    for (std::size_t k = 0; k < arg.size(); ++k) g[arg[k]] += self.grad[k];
  });
}

Tensor group_sum(const Tensor& a, std::size_t group) {
  require(group > 0 && a.rows() % group == 0, "group_sum",
          "rows " + std::to_string(a.rows()) + " not divisible by group " + std::to_string(group));
  const std::size_t c = a.cols(), groups = a.rows() / group;
  const auto& x = a.node()->value;
  std::vector<double> out(groups * c, 0.0);
  for (std::size_t i = 0; i < a.rows(); ++i)
    for (std::size_t j = 0; j < c; ++j) out[(i / group) * c + j] += x[i * c + j];
  return finish({groups, c}, std::move(out), "group_sum", {&a}, [group, c](Node& self) {
    if (!wants(self, 0)) return;
    auto& g = pgrad(self, 0);
    const std::size_t rows = g.size() / c;
    for (std::size_t i = 0; i < rows; ++i)
      for (std::size_t j = 0; j < c; ++j) g[i * c + j] += self.grad[(i / group) * c + j];
  });
}

Tensor group_mean(const Tensor& a, std::size_t group) {
  return scale(group_sum(a, group), 1.0 / static_cast<double>(group));
}

Tensor repeat_rows(const Tensor& a, std::size_t times) {
  require(times > 0, "repeat_rows", "times must be positive");
  const std::size_t r = a.rows(), c = a.cols();
  const auto& x = a.node()->value;
  std::vector<double> out(r * times * c);
  for (std::size_t i = 0; i < r; ++i)
    for (std::size_t t = 0; t < times; ++t)
      std::copy(x.begin() + i * c, x.begin() + (i + 1) * c, out.begin() + (i * times + t) * c);
  return finish({r * times, c}, std::move(out), "repeat_rows", {&a}, [times, c](Node& self) {
    if (!wants(self, 0)) return;
    auto& g = pgrad(self, 0);
    const std::size_t rows = self.grad.size() / c;
    for (std::size_t i = 0; i < rows; ++i)
      for (std::size_t j = 0; j < c; ++j) g[(i / times) * c + j] += self.grad[i * c + j];
  });
}

// ---- gradient checking ----------------------------------------------------

namespace {

double check_against_fd(const std::function<double()>& eval, std::span<const Tensor> params,
                        const std::vector<std::vector<double>>& analytic, double h) {
  if (!(h >= 1e-7 && h <= 1e-3)) throw Error("grad_check: step h must lie in [1e-7, 1e-3]");
  NoGradScope no_grad;
  double worst = 0.0;
  for (std::size_t k = 0; k < params.size(); ++k) {
    Tensor p = params[k];
    auto vals = p.mutable_values();
    for (std::size_t i = 0; i < vals.size(); ++i) {
      const double orig = vals[i];
      vals[i] = orig + h;
      const double fp = eval();
      vals[i] = orig - h;
      const double fm = eval();
      vals[i] = orig;
      const double cd = (fp - fm) / (2.0 * h);
      const double a = analytic[k][i];
      worst = std::max(worst, std::abs(a - cd) / (std::abs(a) + std::abs(cd) + 1e-12));
    }
  }
  return worst;
}

}  // namespace

double grad_check(const std::function<Tensor(const Tensor&)>& f, const Tensor& x, double h) {
  Tensor leaf = Tensor::parameter(x.rows(), x.cols(), {x.values().begin(), x.values().end()});
  {
    NoGradScope no_grad;
    if (!f(leaf).all_finite()) throw NumericError("grad_check: f(x) is not finite");
  }
  const Tensor params[] = {leaf};
  auto analytic = gradients([&] { return f(leaf); }, params);
  return check_against_fd([&] { return f(leaf).item(); }, params, analytic, h);
}

double grad_check_params(const std::function<Tensor()>& f, std::span<const Tensor> params, double h) {
  {
    NoGradScope no_grad;
    if (!f().all_finite()) throw NumericError("grad_check: f(x) is not finite");
  }
  auto analytic = gradients(f, params);
  return check_against_fd([&] { return f().item(); }, params, analytic, h);
}

}  // namespace cpf
