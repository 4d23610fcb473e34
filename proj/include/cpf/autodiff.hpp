#pragma once

// Reverse-mode automatic differentiation over dense row-major matrices.
//
// Every value is a rank-2 array (rows x cols); scalars are 1x1. Operations
// record themselves on the innermost active Tape when at least one operand
// requires a gradient. With no active Tape the same calls evaluate values
// only, which is how sampling and evaluation run.

#include <cstddef>
#include <functional>
#include <memory>
#include <span>
#include <stdexcept>
#include <string>
#include <vector>

namespace cpf {

class Error : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

class ShapeError : public Error {
 public:
  using Error::Error;
};

class NumericError : public Error {
 public:
  using Error::Error;
};

struct Shape {
  std::size_t rows = 0;
  std::size_t cols = 0;

  std::size_t size() const { return rows * cols; }
  bool operator==(const Shape&) const = default;
};

std::string to_string(const Shape& s);

namespace detail {
struct Node;
}

class Tensor {
 public:
  Tensor() = default;

  static Tensor zeros(std::size_t rows, std::size_t cols);
  static Tensor full(std::size_t rows, std::size_t cols, double value);
  static Tensor from(std::size_t rows, std::size_t cols, std::vector<double> values);
  static Tensor scalar(double value);
  static Tensor identity(std::size_t n);
  // Leaf that accumulates gradients across backward passes.
  static Tensor parameter(std::size_t rows, std::size_t cols, std::vector<double> values);

  bool defined() const { return static_cast<bool>(node_); }
  Shape shape() const;
  std::size_t rows() const;
  std::size_t cols() const;
  std::size_t size() const;

  std::span<const double> values() const;
  std::span<double> mutable_values();
  double operator()(std::size_t r, std::size_t c) const;
  double item() const;

  bool requires_grad() const;
  // Empty span when no gradient has been allocated yet.
  std::span<const double> grad() const;
  std::span<double> mutable_grad();
  void zero_grad();

  bool all_finite() const;
  // Same values, no history.
  Tensor detach() const;
  Tensor clone() const;

  detail::Node* node() const { return node_.get(); }
  const std::shared_ptr<detail::Node>& node_ptr() const { return node_; }
  explicit Tensor(std::shared_ptr<detail::Node> node) : node_(std::move(node)) {}

 private:
  std::shared_ptr<detail::Node> node_;
};

namespace detail {
struct Node {
  Shape shape;
  std::vector<double> value;
  std::vector<double> grad;
  bool requires_grad = false;
  bool leaf = true;
  const char* op = "leaf";
  std::vector<std::shared_ptr<Node>> parents;
  std::function<void(Node&)> backward;

  std::vector<double>& ensure_grad() {
    if (grad.empty()) grad.assign(value.size(), 0.0);
    return grad;
  }
};
}  // namespace detail

// Records operations issued on the current thread while alive. Tapes nest;
// the innermost one receives new nodes.
class Tape {
 public:
  Tape();
  ~Tape();
  Tape(const Tape&) = delete;
  Tape& operator=(const Tape&) = delete;

  static Tape* active();

  // Seeds d(loss)/d(loss) = 1, propagates to every recorded node in reverse
  // creation order and clears the tape. Parameters accumulate into grad().
  void backward(const Tensor& loss);
  std::size_t size() const { return nodes_.size(); }
  void clear() { nodes_.clear(); }

  void record(std::shared_ptr<detail::Node> node);

 private:
  std::vector<std::shared_ptr<detail::Node>> nodes_;
  Tape* previous_ = nullptr;
};

// Suspends recording on this thread for its lifetime.
class NoGradScope {
 public:
  NoGradScope();
  ~NoGradScope();
  NoGradScope(const NoGradScope&) = delete;
  NoGradScope& operator=(const NoGradScope&) = delete;

 private:
  Tape* saved_;
};

// Gradients of `loss` with respect to `params`, returned in order. Runs its
// own tape around `loss_fn`; parameter grads are zeroed before and after.
std::vector<std::vector<double>> gradients(const std::function<Tensor()>& loss_fn,
                                           std::span<const Tensor> params);

// ---- primitives ----------------------------------------------------------

Tensor matmul(const Tensor& a, const Tensor& b);
// x * w + b with w (in x out) and b (1 x out).
Tensor affine(const Tensor& x, const Tensor& w, const Tensor& b);
Tensor transpose(const Tensor& a);

// Elementwise with broadcasting: each operand dim equals the result dim or 1.
Tensor add(const Tensor& a, const Tensor& b);
Tensor sub(const Tensor& a, const Tensor& b);
Tensor mul(const Tensor& a, const Tensor& b);
Tensor div(const Tensor& a, const Tensor& b);

Tensor scale(const Tensor& a, double c);
Tensor add_scalar(const Tensor& a, double c);
Tensor neg(const Tensor& a);
Tensor sigmoid(const Tensor& a);
Tensor tanh(const Tensor& a);
Tensor relu(const Tensor& a);
Tensor exp(const Tensor& a);
Tensor log(const Tensor& a);
Tensor square(const Tensor& a);
Tensor clamp(const Tensor& a, double lo, double hi);

// Row-wise (last dimension) reductions and normalizations.
Tensor softmax(const Tensor& a);
Tensor log_softmax(const Tensor& a);
Tensor logsumexp(const Tensor& a);  // rows x 1

Tensor sum(const Tensor& a);   // 1 x 1
Tensor mean(const Tensor& a);  // 1 x 1
// axis 0 reduces over rows (result 1 x cols); axis 1 over cols (rows x 1).
Tensor sum_axis(const Tensor& a, int axis);
Tensor mean_axis(const Tensor& a, int axis);
Tensor max_axis(const Tensor& a, int axis);

Tensor concat_cols(std::span<const Tensor> parts);
Tensor concat_cols(const Tensor& a, const Tensor& b);
Tensor concat_rows(std::span<const Tensor> parts);
Tensor slice_cols(const Tensor& a, std::size_t begin, std::size_t end);
Tensor slice_rows(const Tensor& a, std::size_t begin, std::size_t end);

// Consecutive blocks of `group` rows reduced to one row each.
Tensor group_max(const Tensor& a, std::size_t group);
Tensor group_sum(const Tensor& a, std::size_t group);
Tensor group_mean(const Tensor& a, std::size_t group);
// Each row repeated `times` consecutively.
Tensor repeat_rows(const Tensor& a, std::size_t times);

// Inverse of a small square matrix (Gauss-Jordan with partial pivoting).
Tensor inverse(const Tensor& a);

// -sum p log p per row with 0 log 0 = 0; rows x 1.
Tensor entropy_rows(const Tensor& p);

inline Tensor operator+(const Tensor& a, const Tensor& b) { return add(a, b); }
inline Tensor operator-(const Tensor& a, const Tensor& b) { return sub(a, b); }
inline Tensor operator*(const Tensor& a, const Tensor& b) { return mul(a, b); }
inline Tensor operator-(const Tensor& a) { return neg(a); }

// ---- gradient checking ---------------------------------------------------

// Max over coordinates of |analytic - central difference| /
// (|analytic| + |cd| + 1e-12) for scalar-valued f at x.
double grad_check(const std::function<Tensor(const Tensor&)>& f, const Tensor& x, double h = 1e-5);

// Same, perturbing the given parameters in place (restored afterwards).
double grad_check_params(const std::function<Tensor()>& f, std::span<const Tensor> params,
                         double h = 1e-5);

}  // namespace cpf
