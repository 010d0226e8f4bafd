#pragma once

#include <Eigen/Core>
#include <cstdint>
#include <functional>
#include <initializer_list>
#include <memory>
#include <stdexcept>
#include <string>
#include <vector>

#include "uvtex/rng.hpp"

namespace uvtex {

// Thrown on any violated call contract (bad shape, missing tape, ...).
struct ContractViolation : std::invalid_argument {
  using std::invalid_argument::invalid_argument;
};

inline void require(bool cond, const std::string& msg) {
  if (!cond) throw ContractViolation(msg);
}

// Shape of a dense tensor, rank 1..4. Layout is row-major with the last
// dimension contiguous; rank-4 is interpreted as (batch, channels, h, w).
struct Shape {
  int d[4] = {1, 1, 1, 1};
  int rank = 0;

  Shape() = default;
  Shape(std::initializer_list<int> dims) {
    require(dims.size() >= 1 && dims.size() <= 4, "shape rank must be 1..4");
    rank = static_cast<int>(dims.size());
    int i = 0;
    for (int v : dims) {
      require(v > 0, "shape dims must be positive");
      d[i++] = v;
    }
  }

  int operator[](int i) const { return d[i]; }
  int64_t numel() const {
    int64_t n = 1;
    for (int i = 0; i < rank; ++i) n *= d[i];
    return n;
  }
  bool operator==(const Shape& o) const {
    if (rank != o.rank) return false;
    for (int i = 0; i < rank; ++i)
      if (d[i] != o.d[i]) return false;
    return true;
  }
  bool operator!=(const Shape& o) const { return !(*this == o); }
  std::string str() const;
};

using Array = Eigen::ArrayXd;

namespace detail {
struct TensorImpl {
  Shape shape;
  Array data;
  std::unique_ptr<Array> grad;  // allocated on first accumulation
  bool requires_grad = false;
};
}  // namespace detail

// Shared handle to an f64 tensor. Copies alias the same storage; the tape
// captures handles by value, which keeps payloads alive exactly as long as
// some backward rule can still touch them.
class Tensor {
 public:
  Tensor() = default;

  static Tensor zeros(const Shape& s, bool requires_grad = false);
  static Tensor full(const Shape& s, double value, bool requires_grad = false);
  static Tensor from(const Shape& s, std::vector<double> values, bool requires_grad = false);
  static Tensor randn(const Shape& s, Rng& rng, double stddev, bool requires_grad = false);
  static Tensor uniform(const Shape& s, Rng& rng, double lo, double hi, bool requires_grad = false);

  bool defined() const { return impl_ != nullptr; }
  const Shape& shape() const { return impl_->shape; }
  int64_t numel() const { return impl_->shape.numel(); }

  Array& data() { return impl_->data; }
  const Array& data() const { return impl_->data; }
  double* ptr() { return impl_->data.data(); }
  const double* ptr() const { return impl_->data.data(); }

  bool requires_grad() const { return impl_ && impl_->requires_grad; }
  void set_requires_grad(bool v) { impl_->requires_grad = v; }

  bool has_grad() const { return impl_ && impl_->grad != nullptr; }
  // Gradient buffer, zero-allocated on demand. Only valid for tensors that
  // require gradients.
  Array& grad();
  const Array& grad() const;
  void zero_grad() {
    if (impl_) impl_->grad.reset();
  }
  // Adds g into the gradient buffer; no-op for requires_grad=false tensors.
  void accumulate_grad(const Array& g);

  // Value of a one-element tensor.
  double scalar() const {
    require(defined() && numel() == 1, "scalar() needs a one-element tensor");
    return impl_->data[0];
  }

  // Flat index helpers for the canonical layouts.
  int64_t index(int b, int c, int y, int x) const {
    const Shape& s = impl_->shape;
    return ((static_cast<int64_t>(b) * s.d[1] + c) * s.d[2] + y) * s.d[3] + x;
  }
  double& at(int b, int c, int y, int x) { return impl_->data[index(b, c, y, x)]; }
  double at(int b, int c, int y, int x) const { return impl_->data[index(b, c, y, x)]; }

  // Deep copy with no gradient tracking. Used for stop-gradient semantics.
  Tensor detach_copy() const;

  bool same_impl(const Tensor& o) const { return impl_ == o.impl_; }

 private:
  std::shared_ptr<detail::TensorImpl> impl_;
  static Tensor alloc(const Shape& s, bool requires_grad);
};

// Gradient tape for one forward/backward pass. Nodes are closures appended in
// execution order; backward() runs them in reverse and frees each closure as
// soon as it has run, releasing captured activations progressively.
class Tape {
 public:
  Tape() = default;
  Tape(const Tape&) = delete;
  Tape& operator=(const Tape&) = delete;

  void record(std::function<void()> backward_fn) { nodes_.push_back(std::move(backward_fn)); }
  size_t size() const { return nodes_.size(); }
  void clear() { nodes_.clear(); }

  // Seeds d(loss)/d(loss)=1 and sweeps. The tape is empty afterwards.
  void run_backward(const Tensor& loss);

 private:
  std::vector<std::function<void()>> nodes_;
};

// The active tape is per-thread; ops record onto it only while one is live.
Tape* active_tape();

// RAII activation of a tape on the current thread. Nesting is a usage error.
class TapeScope {
 public:
  explicit TapeScope(Tape& t);
  ~TapeScope();
  TapeScope(const TapeScope&) = delete;
  TapeScope& operator=(const TapeScope&) = delete;
};

// Entry point used by training code: requires an active tape and a scalar loss.
void backward(const Tensor& loss);

// ---- elementwise / reduction ops -----------------------------------------

Tensor add(const Tensor& a, const Tensor& b);
Tensor sub(const Tensor& a, const Tensor& b);
Tensor mul(const Tensor& a, const Tensor& b);
Tensor add_scalar(const Tensor& a, double s);
Tensor mul_scalar(const Tensor& a, double s);
Tensor neg(const Tensor& a);
Tensor relu(const Tensor& a);
Tensor tanh_op(const Tensor& a);
Tensor sigmoid(const Tensor& a);
Tensor softplus(const Tensor& a);
Tensor abs_op(const Tensor& a);
Tensor log_op(const Tensor& a);      // requires strictly positive input
Tensor sqrt_op(const Tensor& a);     // requires non-negative input
Tensor reciprocal(const Tensor& a);  // requires nonzero input
// max(a, floor) with pass-through gradient below the floor.
Tensor clamp_min_passthrough(const Tensor& a, double floor);

Tensor sum(const Tensor& a);   // scalar
Tensor mean(const Tensor& a);  // scalar

// Channel plumbing on rank-4 tensors.
Tensor concat_channels(const std::vector<Tensor>& xs);
Tensor slice_channels(const Tensor& x, int c0, int count);
// Replicates a single-channel map across `channels` channels.
Tensor broadcast_channel(const Tensor& x, int channels);
// y[b,c,:,:] = x[b,c,:,:] * scale[c] + shift[c]; scale/shift rank-1 of size C.
Tensor channel_affine(const Tensor& x, const Tensor& scale, const Tensor& shift);
Tensor crop_hw(const Tensor& x, int y0, int x0, int h, int w);
// Same data, new shape (numel must match).
Tensor reshape(const Tensor& x, const Shape& s);
// Sub-range of the leading (batch) dimension of a rank-4 tensor.
Tensor slice_batch(const Tensor& x, int b0, int count);

// ---- optimizer -------------------------------------------------------------

// Named parameter registry. Iteration order is registration order, which
// makes optimizer traversal deterministic.
class ParamStore {
 public:
  Tensor add_param(const std::string& name, Tensor t);
  Tensor add_buffer(const std::string& name, Tensor t);  // state, not optimized
  const std::vector<std::pair<std::string, Tensor>>& params() const { return params_; }
  const std::vector<std::pair<std::string, Tensor>>& buffers() const { return buffers_; }
  Tensor find(const std::string& name) const;  // params then buffers; undefined handle if absent
  int64_t param_count() const;
  void zero_grads();

 private:
  std::vector<std::pair<std::string, Tensor>> params_;
  std::vector<std::pair<std::string, Tensor>> buffers_;
};

struct AdamConfig {
  double lr = 1e-3;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;
};

// Adam with bias correction. Moment buffers are exposed for checkpointing.
class Adam {
 public:
  Adam(const ParamStore& store, const AdamConfig& cfg);
  void step();  // consumes .grad() of every parameter (absent grad = zero)
  int64_t step_count() const { return t_; }
  void set_step_count(int64_t t) { t_ = t; }
  // Moment buffers in parameter order, named "<param>" -> (m, v).
  std::vector<std::pair<std::string, std::pair<Tensor, Tensor>>>& moments() { return moments_; }

 private:
  AdamConfig cfg_;
  std::vector<Tensor> params_;
  std::vector<std::pair<std::string, std::pair<Tensor, Tensor>>> moments_;
  int64_t t_ = 0;
};

// ---- finite differences -----------------------------------------------------

struct GradCheckResult {
  double max_rel_err = 0.0;
  int64_t argmax = -1;
  double analytic = 0.0;
  double numeric = 0.0;
};

// Central-difference check of d f / d x against the tape gradient already
// accumulated in x. f must be a pure function of x's data.
GradCheckResult finite_diff_check(const std::function<double()>& f, Tensor& x,
                                  const Array& analytic_grad, double eps = 1e-5);

// Convenience wrapper: runs f under a fresh tape, backprops, then compares
// every coordinate of x.grad() against central differences.
GradCheckResult grad_check(const std::function<Tensor()>& f, Tensor& x, double eps = 1e-5);

}  // namespace uvtex
