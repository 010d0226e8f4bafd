#include "uvtex/tensor.hpp"

#include <cmath>
#include <cstring>
#include <sstream>

namespace uvtex {

std::string Shape::str() const {
  std::ostringstream os;
  os << "(";
  for (int i = 0; i < rank; ++i) os << (i ? "," : "") << d[i];
  os << ")";
  return os.str();
}

Tensor Tensor::alloc(const Shape& s, bool requires_grad) {
  Tensor t;
  t.impl_ = std::make_shared<detail::TensorImpl>();
  t.impl_->shape = s;
  t.impl_->data = Array::Zero(s.numel());
  t.impl_->requires_grad = requires_grad;
  return t;
}

Tensor Tensor::zeros(const Shape& s, bool rg) { return alloc(s, rg); }

Tensor Tensor::full(const Shape& s, double value, bool rg) {
  Tensor t = alloc(s, rg);
  t.impl_->data.setConstant(value);
  return t;
}

Tensor Tensor::from(const Shape& s, std::vector<double> values, bool rg) {
  require(static_cast<int64_t>(values.size()) == s.numel(),
          "Tensor::from: value count " + std::to_string(values.size()) +
              " does not match shape " + s.str());
  Tensor t = alloc(s, rg);
  std::memcpy(t.impl_->data.data(), values.data(), values.size() * sizeof(double));
  return t;
}

Tensor Tensor::randn(const Shape& s, Rng& rng, double stddev, bool rg) {
  Tensor t = alloc(s, rg);
  for (int64_t i = 0; i < t.numel(); ++i) t.impl_->data[i] = rng.normal() * stddev;
  return t;
}

Tensor Tensor::uniform(const Shape& s, Rng& rng, double lo, double hi, bool rg) {
  Tensor t = alloc(s, rg);
  for (int64_t i = 0; i < t.numel(); ++i) t.impl_->data[i] = rng.uniform(lo, hi);
  return t;
}

Array& Tensor::grad() {
  require(defined(), "grad() on undefined tensor");
  if (!impl_->grad) impl_->grad = std::make_unique<Array>(Array::Zero(numel()));
  return *impl_->grad;
}

const Array& Tensor::grad() const {
  require(defined() && impl_->grad != nullptr, "grad() reading absent gradient");
  return *impl_->grad;
}

void Tensor::accumulate_grad(const Array& g) {
  if (!impl_ || !impl_->requires_grad) return;
  if (!impl_->grad) impl_->grad = std::make_unique<Array>(Array::Zero(numel()));
  *impl_->grad += g;
}

Tensor Tensor::detach_copy() const {
  require(defined(), "detach_copy on undefined tensor");
  Tensor t = alloc(impl_->shape, false);
  t.impl_->data = impl_->data;
  return t;
}

// ---- tape -------------------------------------------------------------------

static thread_local Tape* g_active_tape = nullptr;

Tape* active_tape() { return g_active_tape; }

TapeScope::TapeScope(Tape& t) {
  require(g_active_tape == nullptr, "TapeScope: a tape is already active on this thread");
  g_active_tape = &t;
}

TapeScope::~TapeScope() { g_active_tape = nullptr; }

void Tape::run_backward(const Tensor& loss) {
  require(loss.defined() && loss.numel() == 1, "backward: loss must be a scalar tensor");
  if (loss.requires_grad()) {
    Tensor seed = loss;
    seed.grad().setConstant(1.0);
  }
  // Reverse sweep; each closure is destroyed right after it runs so captured
  // activations are freed progressively.
  for (size_t i = nodes_.size(); i-- > 0;) {
    std::function<void()> fn = std::move(nodes_[i]);
    if (fn) fn();
    nodes_[i] = nullptr;
  }
  nodes_.clear();
}

void backward(const Tensor& loss) {
  require(active_tape() != nullptr, "backward: no active tape");
  active_tape()->run_backward(loss);
}

// ---- op helpers ---------------------------------------------------------------

namespace {

bool tracing(const Tensor& a) { return active_tape() != nullptr && a.requires_grad(); }
bool tracing(const Tensor& a, const Tensor& b) {
  return active_tape() != nullptr && (a.requires_grad() || b.requires_grad());
}

}  // namespace

Tensor add(const Tensor& a, const Tensor& b) {
  require(a.shape() == b.shape(), "add: shape mismatch " + a.shape().str() + " vs " + b.shape().str());
  Tensor out = Tensor::zeros(a.shape());
  out.data() = a.data() + b.data();
  if (tracing(a, b)) {
    out.set_requires_grad(true);
    Tensor ac = a, bc = b, oc = out;
    active_tape()->record([ac, bc, oc]() mutable {
      if (!oc.has_grad()) return;
      const Array& g = oc.grad();
      ac.accumulate_grad(g);
      bc.accumulate_grad(g);
    });
  }
  return out;
}

Tensor sub(const Tensor& a, const Tensor& b) {
  require(a.shape() == b.shape(), "sub: shape mismatch");
  Tensor out = Tensor::zeros(a.shape());
  out.data() = a.data() - b.data();
  if (tracing(a, b)) {
    out.set_requires_grad(true);
    Tensor ac = a, bc = b, oc = out;
    active_tape()->record([ac, bc, oc]() mutable {
      if (!oc.has_grad()) return;
      const Array& g = oc.grad();
      ac.accumulate_grad(g);
      bc.accumulate_grad(-g);
    });
  }
  return out;
}

Tensor mul(const Tensor& a, const Tensor& b) {
  require(a.shape() == b.shape(), "mul: shape mismatch");
  Tensor out = Tensor::zeros(a.shape());
  out.data() = a.data() * b.data();
  if (tracing(a, b)) {
    out.set_requires_grad(true);
    Tensor ac = a, bc = b, oc = out;
    active_tape()->record([ac, bc, oc]() mutable {
      if (!oc.has_grad()) return;
      const Array& g = oc.grad();
      if (ac.requires_grad()) ac.accumulate_grad(g * bc.data());
      if (bc.requires_grad()) bc.accumulate_grad(g * ac.data());
    });
  }
  return out;
}

Tensor add_scalar(const Tensor& a, double s) {
  Tensor out = Tensor::zeros(a.shape());
  out.data() = a.data() + s;
  if (tracing(a)) {
    out.set_requires_grad(true);
    Tensor ac = a, oc = out;
    active_tape()->record([ac, oc]() mutable {
      if (oc.has_grad()) ac.accumulate_grad(oc.grad());
    });
  }
  return out;
}

Tensor mul_scalar(const Tensor& a, double s) {
  Tensor out = Tensor::zeros(a.shape());
  out.data() = a.data() * s;
  if (tracing(a)) {
    out.set_requires_grad(true);
    Tensor ac = a, oc = out;
    active_tape()->record([ac, oc, s]() mutable {
      if (oc.has_grad()) ac.accumulate_grad(oc.grad() * s);
    });
  }
  return out;
}

Tensor neg(const Tensor& a) { return mul_scalar(a, -1.0); }

Tensor relu(const Tensor& a) {
  Tensor out = Tensor::zeros(a.shape());
  out.data() = a.data().max(0.0);
  if (tracing(a)) {
    out.set_requires_grad(true);
    Tensor ac = a, oc = out;
    active_tape()->record([ac, oc]() mutable {
      if (!oc.has_grad()) return;
      ac.accumulate_grad(oc.grad() * (ac.data() > 0.0).cast<double>());
    });
  }
  return out;
}

Tensor tanh_op(const Tensor& a) {
  Tensor out = Tensor::zeros(a.shape());
  out.data() = a.data().tanh();
  if (tracing(a)) {
    out.set_requires_grad(true);
    Tensor ac = a, oc = out;
    active_tape()->record([ac, oc]() mutable {
      if (!oc.has_grad()) return;
      ac.accumulate_grad(oc.grad() * (1.0 - oc.data().square()));
    });
  }
  return out;
}

Tensor sigmoid(const Tensor& a) {
  Tensor out = Tensor::zeros(a.shape());
  out.data() = 0.5 * (0.5 * a.data()).tanh() + 0.5;  // numerically stable logistic
  if (tracing(a)) {
    out.set_requires_grad(true);
    Tensor ac = a, oc = out;
    active_tape()->record([ac, oc]() mutable {
      if (!oc.has_grad()) return;
      ac.accumulate_grad(oc.grad() * oc.data() * (1.0 - oc.data()));
    });
  }
  return out;
}

Tensor softplus(const Tensor& a) {
  Tensor out = Tensor::zeros(a.shape());
  // log(1+e^x) = max(x,0) + log1p(e^{-|x|})
  out.data() = a.data().max(0.0) + (-a.data().abs()).exp().log1p();
  if (tracing(a)) {
    out.set_requires_grad(true);
    Tensor ac = a, oc = out;
    active_tape()->record([ac, oc]() mutable {
      if (!oc.has_grad()) return;
      Array sig = 0.5 * (0.5 * ac.data()).tanh() + 0.5;
      ac.accumulate_grad(oc.grad() * sig);
    });
  }
  return out;
}

Tensor abs_op(const Tensor& a) {
  Tensor out = Tensor::zeros(a.shape());
  out.data() = a.data().abs();
  if (tracing(a)) {
    out.set_requires_grad(true);
    Tensor ac = a, oc = out;
    active_tape()->record([ac, oc]() mutable {
      if (!oc.has_grad()) return;
      ac.accumulate_grad(oc.grad() * ac.data().sign());
    });
  }
  return out;
}

Tensor log_op(const Tensor& a) {
  require((a.data() > 0.0).all(), "log: input must be strictly positive");
  Tensor out = Tensor::zeros(a.shape());
  out.data() = a.data().log();
  if (tracing(a)) {
    out.set_requires_grad(true);
    Tensor ac = a, oc = out;
    active_tape()->record([ac, oc]() mutable {
      if (!oc.has_grad()) return;
      ac.accumulate_grad(oc.grad() / ac.data());
    });
  }
  return out;
}

Tensor sqrt_op(const Tensor& a) {
  require((a.data() >= 0.0).all(), "sqrt: input must be non-negative");
  Tensor out = Tensor::zeros(a.shape());
  out.data() = a.data().sqrt();
  if (tracing(a)) {
    out.set_requires_grad(true);
    Tensor ac = a, oc = out;
    active_tape()->record([ac, oc]() mutable {
      if (!oc.has_grad()) return;
      ac.accumulate_grad(oc.grad() * 0.5 / oc.data().max(1e-300));
    });
  }
  return out;
}

Tensor reciprocal(const Tensor& a) {
  require((a.data() != 0.0).all(), "reciprocal: input must be nonzero");
  Tensor out = Tensor::zeros(a.shape());
  out.data() = a.data().inverse();
  if (tracing(a)) {
    out.set_requires_grad(true);
    Tensor ac = a, oc = out;
    active_tape()->record([ac, oc]() mutable {
      if (!oc.has_grad()) return;
      ac.accumulate_grad(-oc.grad() * oc.data().square());
    });
  }
  return out;
}

Tensor clamp_min_passthrough(const Tensor& a, double floor) {
  Tensor out = Tensor::zeros(a.shape());
  out.data() = a.data().max(floor);
  if (tracing(a)) {
    out.set_requires_grad(true);
    Tensor ac = a, oc = out;
    active_tape()->record([ac, oc]() mutable {
      if (oc.has_grad()) ac.accumulate_grad(oc.grad());
    });
  }
  return out;
}

Tensor sum(const Tensor& a) {
  Tensor out = Tensor::zeros(Shape{1});
  out.data()[0] = a.data().sum();
  if (tracing(a)) {
    out.set_requires_grad(true);
    Tensor ac = a, oc = out;
    active_tape()->record([ac, oc]() mutable {
      if (!oc.has_grad()) return;
      ac.accumulate_grad(Array::Constant(ac.numel(), oc.grad()[0]));
    });
  }
  return out;
}

Tensor mean(const Tensor& a) { return mul_scalar(sum(a), 1.0 / static_cast<double>(a.numel())); }

// ---- channel plumbing ---------------------------------------------------------

Tensor concat_channels(const std::vector<Tensor>& xs) {
  require(!xs.empty(), "concat_channels: empty input list");
  const Shape& s0 = xs[0].shape();
  require(s0.rank == 4, "concat_channels: rank-4 tensors required");
  int ctotal = 0;
  bool any_grad = false;
  for (const Tensor& x : xs) {
    require(x.shape().rank == 4 && x.shape()[0] == s0[0] && x.shape()[2] == s0[2] &&
                x.shape()[3] == s0[3],
            "concat_channels: batch/spatial dims must match");
    ctotal += x.shape()[1];
    any_grad = any_grad || x.requires_grad();
  }
  const int B = s0[0], H = s0[2], W = s0[3];
  const int64_t hw = static_cast<int64_t>(H) * W;
  Tensor out = Tensor::zeros(Shape{B, ctotal, H, W});
  int coff = 0;
  for (const Tensor& x : xs) {
    const int cx = x.shape()[1];
    for (int b = 0; b < B; ++b) {
      std::memcpy(out.ptr() + (static_cast<int64_t>(b) * ctotal + coff) * hw,
                  x.ptr() + static_cast<int64_t>(b) * cx * hw,
                  static_cast<size_t>(cx) * hw * sizeof(double));
    }
    coff += cx;
  }
  if (active_tape() && any_grad) {
    out.set_requires_grad(true);
    std::vector<Tensor> xc = xs;
    Tensor oc = out;
    active_tape()->record([xc, oc, B, ctotal, hw]() mutable {
      if (!oc.has_grad()) return;
      const Array& g = oc.grad();
      int off = 0;
      for (Tensor& x : xc) {
        const int cx = x.shape()[1];
        if (x.requires_grad()) {
          Array gx = Array::Zero(x.numel());
          for (int b = 0; b < B; ++b) {
            gx.segment(static_cast<int64_t>(b) * cx * hw, cx * hw) =
                g.segment((static_cast<int64_t>(b) * ctotal + off) * hw, cx * hw);
          }
          x.accumulate_grad(gx);
        }
        off += cx;
      }
    });
  }
  return out;
}

Tensor slice_channels(const Tensor& x, int c0, int count) {
  const Shape& s = x.shape();
  require(s.rank == 4, "slice_channels: rank-4 tensor required");
  require(c0 >= 0 && count > 0 && c0 + count <= s[1], "slice_channels: channel range out of bounds");
  const int B = s[0], C = s[1], H = s[2], W = s[3];
  const int64_t hw = static_cast<int64_t>(H) * W;
  Tensor out = Tensor::zeros(Shape{B, count, H, W});
  for (int b = 0; b < B; ++b) {
    std::memcpy(out.ptr() + static_cast<int64_t>(b) * count * hw,
                x.ptr() + (static_cast<int64_t>(b) * C + c0) * hw,
                static_cast<size_t>(count) * hw * sizeof(double));
  }
  if (tracing(x)) {
    out.set_requires_grad(true);
    Tensor xc = x, oc = out;
    active_tape()->record([xc, oc, c0, count, B, C, hw]() mutable {
      if (!oc.has_grad()) return;
      const Array& g = oc.grad();
      Array gx = Array::Zero(xc.numel());
      for (int b = 0; b < B; ++b) {
        gx.segment((static_cast<int64_t>(b) * C + c0) * hw, count * hw) =
            g.segment(static_cast<int64_t>(b) * count * hw, count * hw);
      }
      xc.accumulate_grad(gx);
    });
  }
  return out;
}

Tensor broadcast_channel(const Tensor& x, int channels) {
  const Shape& s = x.shape();
  require(s.rank == 4 && s[1] == 1, "broadcast_channel: input must be (B,1,H,W)");
  const int B = s[0], H = s[2], W = s[3];
  const int64_t hw = static_cast<int64_t>(H) * W;
  Tensor out = Tensor::zeros(Shape{B, channels, H, W});
  for (int b = 0; b < B; ++b)
    for (int c = 0; c < channels; ++c)
      std::memcpy(out.ptr() + (static_cast<int64_t>(b) * channels + c) * hw,
                  x.ptr() + static_cast<int64_t>(b) * hw, hw * sizeof(double));
  if (tracing(x)) {
    out.set_requires_grad(true);
    Tensor xc = x, oc = out;
    active_tape()->record([xc, oc, B, channels, hw]() mutable {
      if (!oc.has_grad()) return;
      const Array& g = oc.grad();
      Array gx = Array::Zero(xc.numel());
      for (int b = 0; b < B; ++b)
        for (int c = 0; c < channels; ++c)
          gx.segment(static_cast<int64_t>(b) * hw, hw) +=
              g.segment((static_cast<int64_t>(b) * channels + c) * hw, hw);
      xc.accumulate_grad(gx);
    });
  }
  return out;
}

Tensor channel_affine(const Tensor& x, const Tensor& scale, const Tensor& shift) {
  const Shape& s = x.shape();
  require(s.rank == 4, "channel_affine: rank-4 tensor required");
  const int B = s[0], C = s[1], H = s[2], W = s[3];
  require(scale.shape().rank == 1 && scale.shape()[0] == C, "channel_affine: scale must be rank-1 of size C");
  require(shift.shape().rank == 1 && shift.shape()[0] == C, "channel_affine: shift must be rank-1 of size C");
  const int64_t hw = static_cast<int64_t>(H) * W;
  Tensor out = Tensor::zeros(s);
  for (int b = 0; b < B; ++b)
    for (int c = 0; c < C; ++c) {
      const int64_t off = (static_cast<int64_t>(b) * C + c) * hw;
      out.data().segment(off, hw) = x.data().segment(off, hw) * scale.data()[c] + shift.data()[c];
    }
  Tape* tp = active_tape();
  if (tp && (x.requires_grad() || scale.requires_grad() || shift.requires_grad())) {
    out.set_requires_grad(true);
    Tensor xc = x, sc = scale, tc = shift, oc = out;
    tp->record([xc, sc, tc, oc, B, C, hw]() mutable {
      if (!oc.has_grad()) return;
      const Array& g = oc.grad();
      if (xc.requires_grad()) {
        Array gx(xc.numel());
        for (int b = 0; b < B; ++b)
          for (int c = 0; c < C; ++c) {
            const int64_t off = (static_cast<int64_t>(b) * C + c) * hw;
            gx.segment(off, hw) = g.segment(off, hw) * sc.data()[c];
          }
        xc.accumulate_grad(gx);
      }
      if (sc.requires_grad()) {
        Array gs = Array::Zero(C);
        for (int b = 0; b < B; ++b)
          for (int c = 0; c < C; ++c) {
            const int64_t off = (static_cast<int64_t>(b) * C + c) * hw;
            gs[c] += (g.segment(off, hw) * xc.data().segment(off, hw)).sum();
          }
        sc.accumulate_grad(gs);
      }
      if (tc.requires_grad()) {
        Array gt = Array::Zero(C);
        for (int b = 0; b < B; ++b)
          for (int c = 0; c < C; ++c)
            gt[c] += g.segment((static_cast<int64_t>(b) * C + c) * hw, hw).sum();
        tc.accumulate_grad(gt);
      }
    });
  }
  return out;
}

Tensor crop_hw(const Tensor& x, int y0, int x0, int h, int w) {
  const Shape& s = x.shape();
  require(s.rank == 4, "crop_hw: rank-4 tensor required");
  const int B = s[0], C = s[1], H = s[2], W = s[3];
  require(y0 >= 0 && x0 >= 0 && h > 0 && w > 0 && y0 + h <= H && x0 + w <= W,
          "crop_hw: window out of bounds");
  Tensor out = Tensor::zeros(Shape{B, C, h, w});
  for (int b = 0; b < B; ++b)
    for (int c = 0; c < C; ++c)
      for (int y = 0; y < h; ++y)
        std::memcpy(out.ptr() + ((static_cast<int64_t>(b) * C + c) * h + y) * w,
                    x.ptr() + ((static_cast<int64_t>(b) * C + c) * H + (y0 + y)) * W + x0,
                    static_cast<size_t>(w) * sizeof(double));
  if (tracing(x)) {
    out.set_requires_grad(true);
    Tensor xc = x, oc = out;
    active_tape()->record([xc, oc, y0, x0, h, w, B, C, H, W]() mutable {
      if (!oc.has_grad()) return;
      const Array& g = oc.grad();
      Array gx = Array::Zero(xc.numel());
      for (int b = 0; b < B; ++b)
        for (int c = 0; c < C; ++c)
          for (int y = 0; y < h; ++y)
            gx.segment(((static_cast<int64_t>(b) * C + c) * H + (y0 + y)) * W + x0, w) +=
                g.segment(((static_cast<int64_t>(b) * C + c) * h + y) * w, w);
      xc.accumulate_grad(gx);
    });
  }
  return out;
}

Tensor reshape(const Tensor& x, const Shape& s) {
  require(s.numel() == x.numel(), "reshape: element count mismatch " + x.shape().str() + " -> " +
                                      s.str());
  Tensor out = Tensor::zeros(s);
  out.data() = x.data();
  if (tracing(x)) {
    out.set_requires_grad(true);
    Tensor xc = x, oc = out;
    active_tape()->record([xc, oc]() mutable {
      if (!oc.has_grad()) return;
      xc.accumulate_grad(oc.grad());
    });
  }
  return out;
}

Tensor slice_batch(const Tensor& x, int b0, int count) {
  const Shape& s = x.shape();
  require(s.rank == 4, "slice_batch: rank-4 tensor required");
  require(b0 >= 0 && count > 0 && b0 + count <= s[0], "slice_batch: batch range out of bounds");
  const int64_t per = s.numel() / s[0];
  Tensor out = Tensor::zeros(Shape{count, s[1], s[2], s[3]});
  out.data() = x.data().segment(b0 * per, count * per);
  if (tracing(x)) {
    out.set_requires_grad(true);
    Tensor xc = x, oc = out;
    active_tape()->record([xc, oc, b0, per, count]() mutable {
      if (!oc.has_grad()) return;
      Array gx = Array::Zero(xc.numel());
      gx.segment(b0 * per, count * per) = oc.grad();
      xc.accumulate_grad(gx);
    });
  }
  return out;
}

// ---- parameters & Adam --------------------------------------------------------

Tensor ParamStore::add_param(const std::string& name, Tensor t) {
  require(t.defined(), "add_param: undefined tensor");
  t.set_requires_grad(true);
  params_.emplace_back(name, t);
  return t;
}

Tensor ParamStore::add_buffer(const std::string& name, Tensor t) {
  require(t.defined(), "add_buffer: undefined tensor");
  t.set_requires_grad(false);
  buffers_.emplace_back(name, t);
  return t;
}

Tensor ParamStore::find(const std::string& name) const {
  for (const auto& [n, t] : params_)
    if (n == name) return t;
  for (const auto& [n, t] : buffers_)
    if (n == name) return t;
  return Tensor();
}

int64_t ParamStore::param_count() const {
  int64_t n = 0;
  for (const auto& [name, t] : params_) n += t.numel();
  return n;
}

void ParamStore::zero_grads() {
  for (auto& [name, t] : params_) {
    Tensor tt = t;
    tt.zero_grad();
  }
}

Adam::Adam(const ParamStore& store, const AdamConfig& cfg) : cfg_(cfg) {
  for (const auto& [name, t] : store.params()) {
    params_.push_back(t);
    moments_.emplace_back(name, std::make_pair(Tensor::zeros(t.shape()), Tensor::zeros(t.shape())));
  }
}

void Adam::step() {
  ++t_;
  const double bc1 = 1.0 - std::pow(cfg_.beta1, static_cast<double>(t_));
  const double bc2 = 1.0 - std::pow(cfg_.beta2, static_cast<double>(t_));
  for (size_t i = 0; i < params_.size(); ++i) {
    Tensor& p = params_[i];
    Array g = p.has_grad() ? p.grad() : Array::Zero(p.numel());
    Array& m = moments_[i].second.first.data();
    Array& v = moments_[i].second.second.data();
    m = cfg_.beta1 * m + (1.0 - cfg_.beta1) * g;
    v = cfg_.beta2 * v + (1.0 - cfg_.beta2) * g.square();
    p.data() -= cfg_.lr * (m / bc1) / ((v / bc2).sqrt() + cfg_.eps);
  }
}

// ---- finite differences ----------------------------------------------------------

GradCheckResult finite_diff_check(const std::function<double()>& f, Tensor& x,
                                  const Array& analytic_grad, double eps) {
  require(analytic_grad.size() == x.numel(), "finite_diff_check: gradient size mismatch");
  GradCheckResult res;
  for (int64_t i = 0; i < x.numel(); ++i) {
    const double saved = x.data()[i];
    x.data()[i] = saved + eps;
    const double fp = f();
    x.data()[i] = saved - eps;
    const double fm = f();
    x.data()[i] = saved;
    const double gn = (fp - fm) / (2.0 * eps);
    const double ga = analytic_grad[i];
    if (!std::isfinite(gn) || !std::isfinite(ga))
      throw ContractViolation("finite_diff_check: nonfinite difference at flat index " +
                              std::to_string(i));
    const double rel = std::abs(ga - gn) / std::max(1e-8, std::abs(ga) + std::abs(gn));
    if (rel > res.max_rel_err) {
      res.max_rel_err = rel;
      res.argmax = i;
      res.analytic = ga;
      res.numeric = gn;
    }
  }
  return res;
}

GradCheckResult grad_check(const std::function<Tensor()>& f, Tensor& x, double eps) {
  x.set_requires_grad(true);
  x.zero_grad();
  Tape tape;
  {
    TapeScope scope(tape);
    Tensor out = f();
    require(out.numel() == 1, "grad_check: f must return a scalar");
    backward(out);
  }
  Array analytic = x.has_grad() ? x.grad() : Array::Zero(x.numel());
  auto eval = [&f]() { return f().scalar(); };
  return finite_diff_check(eval, x, analytic, eps);
}

}  // namespace uvtex
