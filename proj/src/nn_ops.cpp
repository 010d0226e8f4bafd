#include "uvtex/nn_ops.hpp"

#include <Eigen/Dense>
#include <cmath>
#include <cstring>
#include <vector>

namespace uvtex {

namespace {

using ColMat = Eigen::MatrixXd;
using MapRow = Eigen::Map<RowMat>;
using CMapRow = Eigen::Map<const RowMat>;

// col is (H*W) x (C*9) column-major; column c*9 + (ty+1)*3 + (tx+1) holds the
// input channel c shifted by (ty,tx) with zero fill at the borders.
void im2col_3x3(const double* x, int C, int H, int W, ColMat& col) {
  const int64_t HW = static_cast<int64_t>(H) * W;
  for (int c = 0; c < C; ++c) {
    const double* xc = x + c * HW;
    for (int ty = -1; ty <= 1; ++ty)
      for (int tx = -1; tx <= 1; ++tx) {
        double* dst = col.data() + (c * 9 + (ty + 1) * 3 + (tx + 1)) * HW;
        for (int oy = 0; oy < H; ++oy) {
          const int iy = oy + ty;
          double* drow = dst + static_cast<int64_t>(oy) * W;
          if (iy < 0 || iy >= H) {
            std::fill(drow, drow + W, 0.0);
            continue;
          }
          const double* srow = xc + static_cast<int64_t>(iy) * W;
          if (tx == 0) {
            std::memcpy(drow, srow, W * sizeof(double));
          } else if (tx == 1) {
            std::memcpy(drow, srow + 1, (W - 1) * sizeof(double));
            drow[W - 1] = 0.0;
          } else {
            drow[0] = 0.0;
            std::memcpy(drow + 1, srow, (W - 1) * sizeof(double));
          }
        }
      }
  }
}

// Adjoint of im2col_3x3: scatter-adds dcol back onto the input gradient.
void col2im_3x3(const ColMat& dcol, int C, int H, int W, double* dx) {
  const int64_t HW = static_cast<int64_t>(H) * W;
  for (int c = 0; c < C; ++c) {
    double* xc = dx + c * HW;
    for (int ty = -1; ty <= 1; ++ty)
      for (int tx = -1; tx <= 1; ++tx) {
        const double* src = dcol.data() + (c * 9 + (ty + 1) * 3 + (tx + 1)) * HW;
        for (int oy = 0; oy < H; ++oy) {
          const int iy = oy + ty;
          if (iy < 0 || iy >= H) continue;
          const double* srow = src + static_cast<int64_t>(oy) * W;
          double* drow = xc + static_cast<int64_t>(iy) * W;
          if (tx == 0) {
            for (int ox = 0; ox < W; ++ox) drow[ox] += srow[ox];
          } else if (tx == 1) {
            for (int ox = 0; ox < W - 1; ++ox) drow[ox + 1] += srow[ox];
          } else {
            for (int ox = 1; ox < W; ++ox) drow[ox - 1] += srow[ox];
          }
        }
      }
  }
}

void check_conv_weights(const Tensor& x, const Tensor& w, const Tensor& b, const char* who) {
  require(x.defined() && x.shape().rank == 4, std::string(who) + ": input must be rank-4");
  require(w.defined() && w.shape().rank == 4 && w.shape()[2] == 3 && w.shape()[3] == 3,
          std::string(who) + ": weights must be (C_out,C_in,3,3)");
  require(w.shape()[1] == x.shape()[1],
          std::string(who) + ": C_in mismatch, input " + x.shape().str() + " weights " + w.shape().str());
  if (b.defined())
    require(b.shape().rank == 1 && b.shape()[0] == w.shape()[0],
            std::string(who) + ": bias must be rank-1 of size C_out");
}

}  // namespace

namespace {

// Shifted-tap layout of a zero-padded 3x3 stride-1 conv. For tap k the
// contribution out(p) += W_k x(p + shift) holds on one contiguous flat span
// except at row seams (dx != 0), where the shifted read wraps to the
// neighbouring row and must be cancelled afterwards.
struct TapSpan {
  int64_t shift = 0;           // flat input offset dy*W + dx
  int64_t p0 = 0, p1 = 0;      // valid contiguous output span [p0, p1)
  std::vector<int64_t> seams;  // output pixels inside the span that wrapped
};

std::array<TapSpan, 9> tap_spans(int H, int W) {
  std::array<TapSpan, 9> spans;
  for (int k = 0; k < 9; ++k) {
    const int dy = k / 3 - 1, dx = k % 3 - 1;
    TapSpan& t = spans[k];
    t.shift = static_cast<int64_t>(dy) * W + dx;
    const int y0 = std::max(0, -dy), y1 = H - std::max(0, dy);
    t.p0 = static_cast<int64_t>(y0) * W + (dx < 0 ? 1 : 0);
    t.p1 = static_cast<int64_t>(y1) * W - (dx > 0 ? 1 : 0);
    if (dx < 0)
      for (int y = y0 + 1; y < y1; ++y) t.seams.push_back(static_cast<int64_t>(y) * W);
    if (dx > 0)
      for (int y = y0; y < y1 - 1; ++y) t.seams.push_back(static_cast<int64_t>(y) * W + W - 1);
    if (t.p1 < t.p0) t.p1 = t.p0;
  }
  return spans;
}

// Per-tap (C_in, C_out) weight slices; tap k of w (Co,Ci,3,3) is strided.
std::vector<ColMat> tap_weights(const double* w, int Co, int Ci) {
  std::vector<ColMat> wk(9, ColMat(Ci, Co));
  for (int k = 0; k < 9; ++k)
    for (int co = 0; co < Co; ++co)
      for (int ci = 0; ci < Ci; ++ci) wk[k](ci, co) = w[(static_cast<int64_t>(co) * Ci + ci) * 9 + k];
  return wk;
}

// Destination rows stay cache-resident across the 9 taps.
constexpr int64_t kConvRowChunk = 2048;

using MapCol = Eigen::Map<ColMat>;
using CMapCol = Eigen::Map<const ColMat>;

}  // namespace

Tensor conv2d(const Tensor& x, const Tensor& w, const Tensor& b) {
  check_conv_weights(x, w, b, "conv2d");
  const int B = x.shape()[0], Ci = x.shape()[1], H = x.shape()[2], W = x.shape()[3];
  const int Co = w.shape()[0];
  const int64_t HW = static_cast<int64_t>(H) * W;

  Tensor out = Tensor::zeros(Shape{B, Co, H, W});
  const std::array<TapSpan, 9> spans = tap_spans(H, W);
  const std::vector<ColMat> wk = tap_weights(w.ptr(), Co, Ci);
#pragma omp parallel for schedule(static)
  for (int bi = 0; bi < B; ++bi) {
    CMapCol Xm(x.ptr() + bi * Ci * HW, HW, Ci);
    MapCol Om(out.ptr() + bi * Co * HW, HW, Co);
    for (int64_t c0 = 0; c0 < HW; c0 += kConvRowChunk) {
      const int64_t c1 = std::min(HW, c0 + kConvRowChunk);
      for (int k = 0; k < 9; ++k) {
        const TapSpan& t = spans[k];
        const int64_t s = std::max(t.p0, c0), e = std::min(t.p1, c1);
        if (e > s) Om.middleRows(s, e - s).noalias() += Xm.middleRows(s + t.shift, e - s) * wk[k];
      }
    }
    for (int k = 0; k < 9; ++k)
      for (int64_t p : spans[k].seams) Om.row(p).noalias() -= Xm.row(p + spans[k].shift) * wk[k];
    if (b.defined())
      for (int c = 0; c < Co; ++c) Om.col(c).array() += b.data()[c];
  }

  Tape* tp = active_tape();
  if (tp && (x.requires_grad() || w.requires_grad() || b.requires_grad())) {
    out.set_requires_grad(true);
    Tensor xc = x, wc = w, bc = b, oc = out;
    tp->record([xc, wc, bc, oc, B, Ci, Co, H, W, HW]() mutable {
      if (!oc.has_grad()) return;
      const Array& g = oc.grad();
      const bool need_dx = xc.requires_grad();
      const bool need_dw = wc.requires_grad();
      const std::array<TapSpan, 9> spans = tap_spans(H, W);
      std::vector<ColMat> wk;
      if (need_dx) wk = tap_weights(wc.ptr(), Co, Ci);
      Array dx;
      if (need_dx) dx = Array::Zero(xc.numel());
      std::vector<std::vector<ColMat>> dwk_scratch;
      std::vector<Eigen::VectorXd> db_scratch;
      if (need_dw) dwk_scratch.assign(B, {});
      if (bc.defined() && bc.requires_grad()) db_scratch.assign(B, Eigen::VectorXd());
#pragma omp parallel for schedule(static)
      for (int bi = 0; bi < B; ++bi) {
        CMapCol Gm(g.data() + bi * Co * HW, HW, Co);
        CMapCol Xm(xc.ptr() + bi * Ci * HW, HW, Ci);
        if (need_dw) {
          std::vector<ColMat>& dwk = dwk_scratch[bi];
          dwk.assign(9, ColMat::Zero(Ci, Co));
          for (int k = 0; k < 9; ++k) {
            const TapSpan& t = spans[k];
            if (t.p1 > t.p0)
              dwk[k].noalias() = Xm.middleRows(t.p0 + t.shift, t.p1 - t.p0).transpose() *
                                 Gm.middleRows(t.p0, t.p1 - t.p0);
            for (int64_t p : t.seams)
              dwk[k].noalias() -= Xm.row(p + t.shift).transpose() * Gm.row(p);
          }
        }
        if (!db_scratch.empty()) db_scratch[bi] = Gm.colwise().sum();
        if (need_dx) {
          MapCol dXm(dx.data() + bi * Ci * HW, HW, Ci);
          for (int64_t c0 = 0; c0 < HW; c0 += kConvRowChunk) {
            const int64_t c1 = std::min(HW, c0 + kConvRowChunk);
            for (int k = 0; k < 9; ++k) {
              const TapSpan& t = spans[k];
              // dX rows q = p + shift accumulate Gm rows p; chunk over q.
              const int64_t s = std::max(t.p0 + t.shift, c0), e = std::min(t.p1 + t.shift, c1);
              if (e > s)
                dXm.middleRows(s, e - s).noalias() +=
                    Gm.middleRows(s - t.shift, e - s) * wk[k].transpose();
            }
          }
          for (int k = 0; k < 9; ++k)
            for (int64_t p : spans[k].seams)
              dXm.row(p + spans[k].shift).noalias() -= Gm.row(p) * wk[k].transpose();
        }
      }
      if (need_dx) xc.accumulate_grad(dx);
      if (need_dw) {
        Array dw = Array::Zero(wc.numel());
        for (int bi = 0; bi < B; ++bi)
          for (int k = 0; k < 9; ++k)
            for (int co = 0; co < Co; ++co)
              for (int ci = 0; ci < Ci; ++ci)
                dw[(static_cast<int64_t>(co) * Ci + ci) * 9 + k] += dwk_scratch[bi][k](ci, co);
        wc.accumulate_grad(dw);
      }
      if (!db_scratch.empty()) {
        Eigen::VectorXd db = db_scratch[0];
        for (int bi = 1; bi < B; ++bi) db += db_scratch[bi];
        bc.accumulate_grad(Eigen::Map<const Array>(db.data(), Co));
      }
    });
  }
  return out;
}

Tensor batchnorm2d(const Tensor& x, const Tensor& gamma, const Tensor& beta,
                   Tensor running_mean, Tensor running_var, bool training, double momentum,
                   double eps) {
  require(x.defined() && x.shape().rank == 4, "batchnorm2d: input must be rank-4");
  const int B = x.shape()[0], C = x.shape()[1], H = x.shape()[2], W = x.shape()[3];
  auto check1 = [C](const Tensor& t, const char* n) {
    require(t.defined() && t.shape().rank == 1 && t.shape()[0] == C,
            std::string("batchnorm2d: ") + n + " must be rank-1 of size C");
  };
  check1(gamma, "gamma");
  check1(beta, "beta");
  check1(running_mean, "running_mean");
  check1(running_var, "running_var");

  const int64_t HW = static_cast<int64_t>(H) * W;
  const double N = static_cast<double>(B) * HW;
  Array mu(C), invstd(C);
  if (training) {
    for (int c = 0; c < C; ++c) {
      double s = 0.0, ss = 0.0;
      for (int bi = 0; bi < B; ++bi) {
        auto seg = x.data().segment((static_cast<int64_t>(bi) * C + c) * HW, HW);
        s += seg.sum();
        ss += seg.square().sum();
      }
      const double m = s / N;
      const double var = std::max(0.0, ss / N - m * m);
      mu[c] = m;
      invstd[c] = 1.0 / std::sqrt(var + eps);
      running_mean.data()[c] = (1.0 - momentum) * running_mean.data()[c] + momentum * m;
      running_var.data()[c] = (1.0 - momentum) * running_var.data()[c] + momentum * var;
    }
  } else {
    for (int c = 0; c < C; ++c) {
      mu[c] = running_mean.data()[c];
      invstd[c] = 1.0 / std::sqrt(running_var.data()[c] + eps);
    }
  }

  Tensor out = Tensor::zeros(x.shape());
  for (int bi = 0; bi < B; ++bi)
    for (int c = 0; c < C; ++c) {
      const int64_t off = (static_cast<int64_t>(bi) * C + c) * HW;
      out.data().segment(off, HW) =
          (x.data().segment(off, HW) - mu[c]) * invstd[c] * gamma.data()[c] + beta.data()[c];
    }

  Tape* tp = active_tape();
  if (tp && (x.requires_grad() || gamma.requires_grad() || beta.requires_grad())) {
    out.set_requires_grad(true);
    Tensor xc = x, gc = gamma, bc = beta, oc = out;
    tp->record([xc, gc, bc, oc, mu, invstd, B, C, HW, N, training]() mutable {
      if (!oc.has_grad()) return;
      const Array& g = oc.grad();
      Array dgamma = Array::Zero(C), dbeta = Array::Zero(C);
      Array dx;
      const bool need_dx = xc.requires_grad();
      if (need_dx) dx = Array::Zero(xc.numel());
      for (int c = 0; c < C; ++c) {
        double sum_g = 0.0, sum_gx = 0.0;
        for (int bi = 0; bi < B; ++bi) {
          const int64_t off = (static_cast<int64_t>(bi) * C + c) * HW;
          auto gs = g.segment(off, HW);
          Array xhat = (xc.data().segment(off, HW) - mu[c]) * invstd[c];
          sum_g += gs.sum();
          sum_gx += (gs * xhat).sum();
        }
        dbeta[c] = sum_g;
        dgamma[c] = sum_gx;
        if (!need_dx) continue;
        for (int bi = 0; bi < B; ++bi) {
          const int64_t off = (static_cast<int64_t>(bi) * C + c) * HW;
          auto gs = g.segment(off, HW);
          if (training) {
            Array xhat = (xc.data().segment(off, HW) - mu[c]) * invstd[c];
            dx.segment(off, HW) =
                gc.data()[c] * invstd[c] * (gs - sum_g / N - xhat * (sum_gx / N));
          } else {
            dx.segment(off, HW) = gs * gc.data()[c] * invstd[c];
          }
        }
      }
      if (need_dx) xc.accumulate_grad(dx);
      gc.accumulate_grad(dgamma);
      bc.accumulate_grad(dbeta);
    });
  }
  return out;
}

Tensor avg_pool2x(const Tensor& x) {
  require(x.defined() && x.shape().rank == 4, "avg_pool2x: input must be rank-4");
  const int B = x.shape()[0], C = x.shape()[1], H = x.shape()[2], W = x.shape()[3];
  require(H % 2 == 0 && W % 2 == 0, "avg_pool2x: spatial extents must be even, got " + x.shape().str());
  const int Ho = H / 2, Wo = W / 2;
  Tensor out = Tensor::zeros(Shape{B, C, Ho, Wo});
  const double* src = x.ptr();
  double* dst = out.ptr();
  const int64_t planes = static_cast<int64_t>(B) * C;
  for (int64_t p = 0; p < planes; ++p) {
    const double* sp = src + p * H * W;
    double* dp = dst + p * Ho * Wo;
    for (int y = 0; y < Ho; ++y)
      for (int xx = 0; xx < Wo; ++xx) {
        const double* r0 = sp + (2 * y) * W + 2 * xx;
        const double* r1 = r0 + W;
        dp[y * Wo + xx] = 0.25 * (r0[0] + r0[1] + r1[0] + r1[1]);
      }
  }
  if (active_tape() && x.requires_grad()) {
    out.set_requires_grad(true);
    Tensor xc = x, oc = out;
    active_tape()->record([xc, oc, planes, H, W, Ho, Wo]() mutable {
      if (!oc.has_grad()) return;
      const Array& g = oc.grad();
      Array dx = Array::Zero(xc.numel());
      for (int64_t p = 0; p < planes; ++p) {
        const double* gp = g.data() + p * Ho * Wo;
        double* dp = dx.data() + p * H * W;
        for (int y = 0; y < Ho; ++y)
          for (int xx = 0; xx < Wo; ++xx) {
            const double gv = 0.25 * gp[y * Wo + xx];
            double* r0 = dp + (2 * y) * W + 2 * xx;
            r0[0] += gv;
            r0[1] += gv;
            r0[W] += gv;
            r0[W + 1] += gv;
          }
      }
      xc.accumulate_grad(dx);
    });
  }
  return out;
}

Tensor upsample2x_nearest(const Tensor& x) {
  require(x.defined() && x.shape().rank == 4, "upsample2x_nearest: input must be rank-4");
  const int B = x.shape()[0], C = x.shape()[1], H = x.shape()[2], W = x.shape()[3];
  const int Ho = H * 2, Wo = W * 2;
  Tensor out = Tensor::zeros(Shape{B, C, Ho, Wo});
  const int64_t planes = static_cast<int64_t>(B) * C;
  for (int64_t p = 0; p < planes; ++p) {
    const double* sp = x.ptr() + p * H * W;
    double* dp = out.ptr() + p * Ho * Wo;
    for (int y = 0; y < H; ++y)
      for (int xx = 0; xx < W; ++xx) {
        const double v = sp[y * W + xx];
        double* r0 = dp + (2 * y) * Wo + 2 * xx;
        r0[0] = v;
        r0[1] = v;
        r0[Wo] = v;
        r0[Wo + 1] = v;
      }
  }
  if (active_tape() && x.requires_grad()) {
    out.set_requires_grad(true);
    Tensor xc = x, oc = out;
    active_tape()->record([xc, oc, planes, H, W, Ho, Wo]() mutable {
      if (!oc.has_grad()) return;
      const Array& g = oc.grad();
      Array dx = Array::Zero(xc.numel());
      for (int64_t p = 0; p < planes; ++p) {
        const double* gp = g.data() + p * Ho * Wo;
        double* dp = dx.data() + p * H * W;
        for (int y = 0; y < H; ++y)
          for (int xx = 0; xx < W; ++xx) {
            const double* r0 = gp + (2 * y) * Wo + 2 * xx;
            dp[y * W + xx] += r0[0] + r0[1] + r0[Wo] + r0[Wo + 1];
          }
      }
      xc.accumulate_grad(dx);
    });
  }
  return out;
}

Tensor grid_sample_bilinear(const Tensor& img, const Tensor& flow) {
  require(img.defined() && img.shape().rank == 4, "grid_sample: image must be rank-4");
  require(flow.defined() && flow.shape().rank == 4 && flow.shape()[1] == 2,
          "grid_sample: flow must be (B,2,Hg,Wg)");
  require(flow.shape()[0] == img.shape()[0], "grid_sample: batch mismatch");
  require(img.shape()[2] >= 2 && img.shape()[3] >= 2, "grid_sample: image must be at least 2x2");
  require(flow.data().isFinite().all(), "grid_sample: nonfinite flow");

  const int B = img.shape()[0], C = img.shape()[1], H = img.shape()[2], W = img.shape()[3];
  const int Hg = flow.shape()[2], Wg = flow.shape()[3];
  const int64_t HWi = static_cast<int64_t>(H) * W;
  const int64_t HWg = static_cast<int64_t>(Hg) * Wg;
  Tensor out = Tensor::zeros(Shape{B, C, Hg, Wg});

#pragma omp parallel for schedule(static)
  for (int bi = 0; bi < B; ++bi) {
    const double* fx = flow.ptr() + (static_cast<int64_t>(bi) * 2 + 0) * HWg;
    const double* fy = flow.ptr() + (static_cast<int64_t>(bi) * 2 + 1) * HWg;
    for (int64_t p = 0; p < HWg; ++p) {
      const double px = (fx[p] + 1.0) * 0.5 * (W - 1);
      const double py = (fy[p] + 1.0) * 0.5 * (H - 1);
      const double pxc = std::min(std::max(px, 0.0), static_cast<double>(W - 1));
      const double pyc = std::min(std::max(py, 0.0), static_cast<double>(H - 1));
      const int x0 = std::min(static_cast<int>(pxc), W - 2);
      const int y0 = std::min(static_cast<int>(pyc), H - 2);
      const double ax = pxc - x0, ay = pyc - y0;
      const double w00 = (1 - ay) * (1 - ax), w01 = (1 - ay) * ax;
      const double w10 = ay * (1 - ax), w11 = ay * ax;
      for (int c = 0; c < C; ++c) {
        const double* ic = img.ptr() + (static_cast<int64_t>(bi) * C + c) * HWi;
        const double* r0 = ic + static_cast<int64_t>(y0) * W + x0;
        out.ptr()[(static_cast<int64_t>(bi) * C + c) * HWg + p] =
            w00 * r0[0] + w01 * r0[1] + w10 * r0[W] + w11 * r0[W + 1];
      }
    }
  }

  Tape* tp = active_tape();
  if (tp && (img.requires_grad() || flow.requires_grad())) {
    out.set_requires_grad(true);
    Tensor ic = img, fc = flow, oc = out;
    tp->record([ic, fc, oc, B, C, H, W, Hg, Wg, HWi, HWg]() mutable {
      if (!oc.has_grad()) return;
      const Array& g = oc.grad();
      const bool need_di = ic.requires_grad();
      const bool need_df = fc.requires_grad();
      Array dimg, dflow;
      if (need_di) dimg = Array::Zero(ic.numel());
      if (need_df) dflow = Array::Zero(fc.numel());
#pragma omp parallel for schedule(static)
      for (int bi = 0; bi < B; ++bi) {
        const double* fx = fc.ptr() + (static_cast<int64_t>(bi) * 2 + 0) * HWg;
        const double* fy = fc.ptr() + (static_cast<int64_t>(bi) * 2 + 1) * HWg;
        for (int64_t p = 0; p < HWg; ++p) {
          const double px = (fx[p] + 1.0) * 0.5 * (W - 1);
          const double py = (fy[p] + 1.0) * 0.5 * (H - 1);
          const double pxc = std::min(std::max(px, 0.0), static_cast<double>(W - 1));
          const double pyc = std::min(std::max(py, 0.0), static_cast<double>(H - 1));
          const int x0 = std::min(static_cast<int>(pxc), W - 2);
          const int y0 = std::min(static_cast<int>(pyc), H - 2);
          const double ax = pxc - x0, ay = pyc - y0;
          const double w00 = (1 - ay) * (1 - ax), w01 = (1 - ay) * ax;
          const double w10 = ay * (1 - ax), w11 = ay * ax;
          double dpx = 0.0, dpy = 0.0;
          for (int c = 0; c < C; ++c) {
            const int64_t base = (static_cast<int64_t>(bi) * C + c) * HWi +
                                 static_cast<int64_t>(y0) * W + x0;
            const double gv = g[(static_cast<int64_t>(bi) * C + c) * HWg + p];
            if (need_di) {
              dimg[base] += gv * w00;
              dimg[base + 1] += gv * w01;
              dimg[base + W] += gv * w10;
              dimg[base + W + 1] += gv * w11;
            }
            if (need_df) {
              const double* r0 = ic.ptr() + base;
              dpx += gv * ((r0[1] - r0[0]) * (1 - ay) + (r0[W + 1] - r0[W]) * ay);
              dpy += gv * ((r0[W] - r0[0]) * (1 - ax) + (r0[W + 1] - r0[1]) * ax);
            }
          }
          if (need_df) {
            const bool in_x = px > 0.0 && px < static_cast<double>(W - 1);
            const bool in_y = py > 0.0 && py < static_cast<double>(H - 1);
            dflow[(static_cast<int64_t>(bi) * 2 + 0) * HWg + p] =
                in_x ? dpx * 0.5 * (W - 1) : 0.0;
            dflow[(static_cast<int64_t>(bi) * 2 + 1) * HWg + p] =
                in_y ? dpy * 0.5 * (H - 1) : 0.0;
          }
        }
      }
      if (need_di) ic.accumulate_grad(dimg);
      if (need_df) fc.accumulate_grad(dflow);
    });
  }
  return out;
}

void init_offset_conv_replicate(Tensor& w, Tensor& b) {
  require(w.defined() && w.shape() == Shape{18, 2, 3, 3},
          "init_offset_conv_replicate: weights must be (18,2,3,3)");
  require(b.defined() && b.shape() == Shape{18}, "init_offset_conv_replicate: bias must be (18)");
  w.data().setZero();
  b.data().setZero();
  for (int k = 0; k < 9; ++k) {
    // w[out_ch][in_ch][1][1]
    w.data()[((2 * k + 0) * 2 + 0) * 9 + 4] = 1.0;
    w.data()[((2 * k + 1) * 2 + 1) * 9 + 4] = 1.0;
  }
}

Tensor flow_to_offsets(const Tensor& flow, int in_h, int in_w, const Tensor& conv_w,
                       const Tensor& conv_b) {
  require(flow.defined() && flow.shape().rank == 4 && flow.shape()[1] == 2,
          "flow_to_offsets: flow must be (B,2,Ho,Wo)");
  require(conv_w.defined() && conv_w.shape() == Shape{18, 2, 3, 3},
          "flow_to_offsets: conv weights must be (18,2,3,3)");
  const int B = flow.shape()[0], Ho = flow.shape()[2], Wo = flow.shape()[3];

  // Flow targets in input pixels.
  Tensor px = add_scalar(mul_scalar(slice_channels(flow, 0, 1), 0.5 * (in_w - 1)), 0.5 * (in_w - 1));
  Tensor py = add_scalar(mul_scalar(slice_channels(flow, 1, 1), 0.5 * (in_h - 1)), 0.5 * (in_h - 1));

  Tensor base_x = Tensor::zeros(Shape{B, 1, Ho, Wo});
  Tensor base_y = Tensor::zeros(Shape{B, 1, Ho, Wo});
  for (int bi = 0; bi < B; ++bi)
    for (int y = 0; y < Ho; ++y)
      for (int xx = 0; xx < Wo; ++xx) {
        base_x.at(bi, 0, y, xx) = decoupled_base_coord(xx, Wo, in_w);
        base_y.at(bi, 0, y, xx) = decoupled_base_coord(y, Ho, in_h);
      }

  Tensor raw = concat_channels({sub(py, base_y), sub(px, base_x)});
  return conv2d(raw, conv_w, conv_b);
}

Tensor deformable_conv2d(const Tensor& x, const Tensor& offsets, const Tensor& w,
                         const Tensor& b) {
  check_conv_weights(x, w, b, "deformable_conv2d");
  require(offsets.defined() && offsets.shape().rank == 4 && offsets.shape()[1] == 18,
          "deformable_conv2d: offsets must be (B,18,Ho,Wo)");
  require(offsets.shape()[0] == x.shape()[0], "deformable_conv2d: batch mismatch");
  const int B = x.shape()[0], Ci = x.shape()[1], Hi = x.shape()[2], Wi = x.shape()[3];
  const int Co = w.shape()[0], Ho = offsets.shape()[2], Wo = offsets.shape()[3];
  const int64_t HWo = static_cast<int64_t>(Ho) * Wo;
  const int64_t HWi = static_cast<int64_t>(Hi) * Wi;
  const int K = Ci * 9;

  // Bilinear sampling with zero padding: out-of-range corners contribute 0.
  auto build_col = [=](const double* xb, const double* ob, ColMat& col) {
    for (int k = 0; k < 9; ++k) {
      const int ty = k / 3 - 1, tx = k % 3 - 1;
      const double* offy = ob + static_cast<int64_t>(2 * k) * HWo;
      const double* offx = ob + static_cast<int64_t>(2 * k + 1) * HWo;
      for (int oy = 0; oy < Ho; ++oy)
        for (int ox = 0; ox < Wo; ++ox) {
          const int64_t p = static_cast<int64_t>(oy) * Wo + ox;
          const double sy = decoupled_base_coord(oy, Ho, Hi) + ty + offy[p];
          const double sx = decoupled_base_coord(ox, Wo, Wi) + tx + offx[p];
          const int y0 = static_cast<int>(std::floor(sy));
          const int x0 = static_cast<int>(std::floor(sx));
          const double ay = sy - y0, ax = sx - x0;
          const bool v00 = y0 >= 0 && y0 < Hi && x0 >= 0 && x0 < Wi;
          const bool v01 = y0 >= 0 && y0 < Hi && x0 + 1 >= 0 && x0 + 1 < Wi;
          const bool v10 = y0 + 1 >= 0 && y0 + 1 < Hi && x0 >= 0 && x0 < Wi;
          const bool v11 = y0 + 1 >= 0 && y0 + 1 < Hi && x0 + 1 >= 0 && x0 + 1 < Wi;
          for (int c = 0; c < Ci; ++c) {
            const double* xc = xb + c * HWi;
            double acc = 0.0;
            if (v00) acc += (1 - ay) * (1 - ax) * xc[static_cast<int64_t>(y0) * Wi + x0];
            if (v01) acc += (1 - ay) * ax * xc[static_cast<int64_t>(y0) * Wi + x0 + 1];
            if (v10) acc += ay * (1 - ax) * xc[(static_cast<int64_t>(y0) + 1) * Wi + x0];
            if (v11) acc += ay * ax * xc[(static_cast<int64_t>(y0) + 1) * Wi + x0 + 1];
            col(p, c * 9 + k) = acc;
          }
        }
    }
  };

  Tensor out = Tensor::zeros(Shape{B, Co, Ho, Wo});
  CMapRow Wm(w.ptr(), Co, K);
#pragma omp parallel for schedule(static)
  for (int bi = 0; bi < B; ++bi) {
    ColMat col(HWo, K);
    build_col(x.ptr() + bi * Ci * HWi, offsets.ptr() + bi * 18 * HWo, col);
    MapRow om(out.ptr() + bi * Co * HWo, Co, HWo);
    om.noalias() = Wm * col.transpose();
    if (b.defined())
      for (int c = 0; c < Co; ++c) om.row(c).array() += b.data()[c];
  }

  Tape* tp = active_tape();
  if (tp && (x.requires_grad() || offsets.requires_grad() || w.requires_grad() ||
             b.requires_grad())) {
    out.set_requires_grad(true);
    Tensor xc = x, oc2 = offsets, wc = w, bc = b, outc = out;
    tp->record([xc, oc2, wc, bc, outc, build_col, B, Ci, Co, Hi, Wi, Ho, Wo, HWi, HWo,
                K]() mutable {
      if (!outc.has_grad()) return;
      const Array& g = outc.grad();
      const bool need_dx = xc.requires_grad();
      const bool need_doff = oc2.requires_grad();
      const bool need_dw = wc.requires_grad();
      Array dx, doff;
      if (need_dx) dx = Array::Zero(xc.numel());
      if (need_doff) doff = Array::Zero(oc2.numel());
      std::vector<RowMat> dw_scratch;
      std::vector<Eigen::VectorXd> db_scratch;
      if (need_dw) dw_scratch.assign(B, RowMat());
      if (bc.defined() && bc.requires_grad()) db_scratch.assign(B, Eigen::VectorXd());
      CMapRow Wm(wc.ptr(), Co, K);
#pragma omp parallel for schedule(static)
      for (int bi = 0; bi < B; ++bi) {
        CMapRow gm(g.data() + bi * Co * HWo, Co, HWo);
        if (need_dw) {
          ColMat col(HWo, K);
          build_col(xc.ptr() + bi * Ci * HWi, oc2.ptr() + bi * 18 * HWo, col);
          dw_scratch[bi] = gm * col;
        }
        if (!db_scratch.empty()) db_scratch[bi] = gm.rowwise().sum();
        if (!need_dx && !need_doff) continue;
        ColMat dcol(HWo, K);
        dcol.noalias() = gm.transpose() * Wm;
        const double* xb = xc.ptr() + bi * Ci * HWi;
        const double* ob = oc2.ptr() + bi * 18 * HWo;
        double* dxb = need_dx ? dx.data() + bi * Ci * HWi : nullptr;
        double* dob = need_doff ? doff.data() + bi * 18 * HWo : nullptr;
        for (int k = 0; k < 9; ++k) {
          const int ty = k / 3 - 1, tx = k % 3 - 1;
          const double* offy = ob + static_cast<int64_t>(2 * k) * HWo;
          const double* offx = ob + static_cast<int64_t>(2 * k + 1) * HWo;
          for (int oy = 0; oy < Ho; ++oy)
            for (int ox = 0; ox < Wo; ++ox) {
              const int64_t p = static_cast<int64_t>(oy) * Wo + ox;
              const double sy = decoupled_base_coord(oy, Ho, Hi) + ty + offy[p];
              const double sx = decoupled_base_coord(ox, Wo, Wi) + tx + offx[p];
              const int y0 = static_cast<int>(std::floor(sy));
              const int x0 = static_cast<int>(std::floor(sx));
              const double ay = sy - y0, ax = sx - x0;
              const bool v00 = y0 >= 0 && y0 < Hi && x0 >= 0 && x0 < Wi;
              const bool v01 = y0 >= 0 && y0 < Hi && x0 + 1 < Wi && x0 + 1 >= 0;
              const bool v10 = y0 + 1 < Hi && y0 + 1 >= 0 && x0 >= 0 && x0 < Wi;
              const bool v11 = y0 + 1 < Hi && y0 + 1 >= 0 && x0 + 1 < Wi && x0 + 1 >= 0;
              double dsy = 0.0, dsx = 0.0;
              for (int c = 0; c < Ci; ++c) {
                const double gcol = dcol(p, c * 9 + k);
                if (gcol == 0.0) continue;
                const double* xcp = xb + c * HWi;
                const double c00 = v00 ? xcp[static_cast<int64_t>(y0) * Wi + x0] : 0.0;
                const double c01 = v01 ? xcp[static_cast<int64_t>(y0) * Wi + x0 + 1] : 0.0;
                const double c10 = v10 ? xcp[(static_cast<int64_t>(y0) + 1) * Wi + x0] : 0.0;
                const double c11 = v11 ? xcp[(static_cast<int64_t>(y0) + 1) * Wi + x0 + 1] : 0.0;
                if (need_dx) {
                  double* dxc = dxb + c * HWi;
                  if (v00) dxc[static_cast<int64_t>(y0) * Wi + x0] += gcol * (1 - ay) * (1 - ax);
                  if (v01) dxc[static_cast<int64_t>(y0) * Wi + x0 + 1] += gcol * (1 - ay) * ax;
                  if (v10) dxc[(static_cast<int64_t>(y0) + 1) * Wi + x0] += gcol * ay * (1 - ax);
                  if (v11) dxc[(static_cast<int64_t>(y0) + 1) * Wi + x0 + 1] += gcol * ay * ax;
                }
                if (need_doff) {
                  dsy += gcol * ((c10 - c00) * (1 - ax) + (c11 - c01) * ax);
                  dsx += gcol * ((c01 - c00) * (1 - ay) + (c11 - c10) * ay);
                }
              }
              if (need_doff) {
                dob[static_cast<int64_t>(2 * k) * HWo + p] += dsy;
                dob[static_cast<int64_t>(2 * k + 1) * HWo + p] += dsx;
              }
            }
        }
      }
      if (need_dx) xc.accumulate_grad(dx);
      if (need_doff) oc2.accumulate_grad(doff);
      if (need_dw) {
        RowMat dw = dw_scratch[0];
        for (int bi = 1; bi < B; ++bi) dw += dw_scratch[bi];
        wc.accumulate_grad(Eigen::Map<const Array>(dw.data(), wc.numel()));
      }
      if (!db_scratch.empty()) {
        Eigen::VectorXd db = db_scratch[0];
        for (int bi = 1; bi < B; ++bi) db += db_scratch[bi];
        bc.accumulate_grad(Eigen::Map<const Array>(db.data(), Co));
      }
    });
  }
  return out;
}

void softmax_rows_inplace(Eigen::Ref<RowMat> m) {
  for (Eigen::Index r = 0; r < m.rows(); ++r) {
    auto row = m.row(r).array();
    row -= row.maxCoeff();
    row = row.exp();
    row /= row.sum();
  }
}

namespace {
constexpr int kAttnBlockRows = 512;

// Gathers (tokens x d) from channel-major (d x tokens) storage.
ColMat tokens_of(const double* base, int d, int64_t tokens) {
  return Eigen::Map<const RowMat>(base, d, tokens).transpose();
}
}  // namespace

Tensor attention_block(const Tensor& q, const Tensor& k, const Tensor& v) {
  require(q.defined() && k.defined() && v.defined() && q.shape().rank == 4 &&
              k.shape().rank == 4 && v.shape().rank == 4,
          "attention_block: rank-4 inputs required");
  const int B = q.shape()[0], d = q.shape()[1];
  require(k.shape()[0] == B && v.shape()[0] == B, "attention_block: batch mismatch");
  require(k.shape()[1] == d && v.shape()[1] == d, "attention_block: channel width mismatch");
  require(k.shape()[2] == v.shape()[2] && k.shape()[3] == v.shape()[3],
          "attention_block: key/value spatial mismatch");
  const int64_t tq = static_cast<int64_t>(q.shape()[2]) * q.shape()[3];
  const int64_t tk = static_cast<int64_t>(k.shape()[2]) * k.shape()[3];
  require(tq <= 4096 && tk <= 4096,
          "attention_block: token count exceeds 4096 (q=" + std::to_string(tq) +
              ", k=" + std::to_string(tk) + ")");
  const double scale = 1.0 / std::sqrt(static_cast<double>(d));

  Tensor out = Tensor::zeros(q.shape());
#pragma omp parallel for schedule(static)
  for (int bi = 0; bi < B; ++bi) {
    ColMat Qm = tokens_of(q.ptr() + bi * d * tq, d, tq);
    ColMat Km = tokens_of(k.ptr() + bi * d * tk, d, tk);
    ColMat Vm = tokens_of(v.ptr() + bi * d * tk, d, tk);
    MapRow om(out.ptr() + bi * d * tq, d, tq);
    for (int64_t r0 = 0; r0 < tq; r0 += kAttnBlockRows) {
      const int64_t rows = std::min<int64_t>(kAttnBlockRows, tq - r0);
      RowMat A(rows, tk);
      A.noalias() = Qm.middleRows(r0, rows) * Km.transpose() * scale;
      softmax_rows_inplace(A);
      ColMat ob(rows, d);
      ob.noalias() = A * Vm;
      om.middleCols(r0, rows) = ob.transpose();
    }
  }

  Tape* tp = active_tape();
  if (tp && (q.requires_grad() || k.requires_grad() || v.requires_grad())) {
    out.set_requires_grad(true);
    Tensor qc = q, kc = k, vc = v, oc = out;
    tp->record([qc, kc, vc, oc, B, d, tq, tk, scale]() mutable {
      if (!oc.has_grad()) return;
      const Array& g = oc.grad();
      Array dq, dk, dv;
      const bool need_dq = qc.requires_grad(), need_dk = kc.requires_grad(),
                 need_dv = vc.requires_grad();
      if (need_dq) dq = Array::Zero(qc.numel());
      if (need_dk) dk = Array::Zero(kc.numel());
      if (need_dv) dv = Array::Zero(vc.numel());
#pragma omp parallel for schedule(static)
      for (int bi = 0; bi < B; ++bi) {
        ColMat Qm = tokens_of(qc.ptr() + bi * d * tq, d, tq);
        ColMat Km = tokens_of(kc.ptr() + bi * d * tk, d, tk);
        ColMat Vm = tokens_of(vc.ptr() + bi * d * tk, d, tk);
        ColMat dOm = tokens_of(g.data() + bi * d * tq, d, tq);
        ColMat dQ = ColMat::Zero(tq, d), dK = ColMat::Zero(tk, d), dV = ColMat::Zero(tk, d);
        for (int64_t r0 = 0; r0 < tq; r0 += kAttnBlockRows) {
          const int64_t rows = std::min<int64_t>(kAttnBlockRows, tq - r0);
          RowMat A(rows, tk);
          A.noalias() = Qm.middleRows(r0, rows) * Km.transpose() * scale;
          softmax_rows_inplace(A);
          auto dOb = dOm.middleRows(r0, rows);
          if (need_dv) dV.noalias() += A.transpose() * dOb;
          RowMat dA(rows, tk);
          dA.noalias() = dOb * Vm.transpose();
          // softmax backward: dS = A .* (dA - rowsum(dA .* A))
          Eigen::VectorXd rdot = (dA.array() * A.array()).rowwise().sum();
          RowMat dS = (A.array() * (dA.array().colwise() - rdot.array())).matrix();
          if (need_dq) dQ.middleRows(r0, rows).noalias() = dS * Km * scale;
          if (need_dk) dK.noalias() += dS.transpose() * Qm.middleRows(r0, rows) * scale;
        }
        auto scatter = [d](Array& dst, int64_t base, const ColMat& m, int64_t tokens) {
          Eigen::Map<RowMat>(dst.data() + base, d, tokens) = m.transpose();
        };
        if (need_dq) scatter(dq, bi * d * tq, dQ, tq);
        if (need_dk) scatter(dk, bi * d * tk, dK, tk);
        if (need_dv) scatter(dv, bi * d * tk, dV, tk);
      }
      if (need_dq) qc.accumulate_grad(dq);
      if (need_dk) kc.accumulate_grad(dk);
      if (need_dv) vc.accumulate_grad(dv);
    });
  }
  return out;
}

Tensor filter2d_valid(const Tensor& x, const Tensor& kernel) {
  require(x.defined() && x.shape().rank == 4, "filter2d_valid: input must be rank-4");
  require(kernel.defined() && kernel.shape().rank == 2, "filter2d_valid: kernel must be rank-2");
  require(!kernel.requires_grad(), "filter2d_valid: kernel must be constant");
  const int B = x.shape()[0], C = x.shape()[1], H = x.shape()[2], W = x.shape()[3];
  const int kh = kernel.shape()[0], kw = kernel.shape()[1];
  require(kh <= H && kw <= W, "filter2d_valid: kernel larger than input");
  const int Ho = H - kh + 1, Wo = W - kw + 1;
  Tensor out = Tensor::zeros(Shape{B, C, Ho, Wo});
  const int64_t planes = static_cast<int64_t>(B) * C;
  const double* kp = kernel.ptr();
#pragma omp parallel for schedule(static)
  for (int64_t pl = 0; pl < planes; ++pl) {
    const double* sp = x.ptr() + pl * H * W;
    double* dp = out.ptr() + pl * Ho * Wo;
    for (int y = 0; y < Ho; ++y)
      for (int xx = 0; xx < Wo; ++xx) {
        double acc = 0.0;
        for (int i = 0; i < kh; ++i) {
          const double* srow = sp + static_cast<int64_t>(y + i) * W + xx;
          const double* krow = kp + static_cast<int64_t>(i) * kw;
          for (int j = 0; j < kw; ++j) acc += srow[j] * krow[j];
        }
        dp[static_cast<int64_t>(y) * Wo + xx] = acc;
      }
  }
  if (active_tape() && x.requires_grad()) {
    out.set_requires_grad(true);
    Tensor xc = x, kc = kernel, oc = out;
    active_tape()->record([xc, kc, oc, planes, H, W, Ho, Wo, kh, kw]() mutable {
      if (!oc.has_grad()) return;
      const Array& g = oc.grad();
      Array dx = Array::Zero(xc.numel());
      const double* kp = kc.ptr();
#pragma omp parallel for schedule(static)
      for (int64_t pl = 0; pl < planes; ++pl) {
        const double* gp = g.data() + pl * Ho * Wo;
        double* dp = dx.data() + pl * H * W;
        for (int y = 0; y < Ho; ++y)
          for (int xx = 0; xx < Wo; ++xx) {
            const double gv = gp[static_cast<int64_t>(y) * Wo + xx];
            if (gv == 0.0) continue;
            for (int i = 0; i < kh; ++i) {
              double* drow = dp + static_cast<int64_t>(y + i) * W + xx;
              const double* krow = kp + static_cast<int64_t>(i) * kw;
              for (int j = 0; j < kw; ++j) drow[j] += gv * krow[j];
            }
          }
      }
      xc.accumulate_grad(dx);
    });
  }
  return out;
}

}  // namespace uvtex
