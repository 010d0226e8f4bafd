#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <cmath>

#include "uvtex/nn_ops.hpp"

using namespace uvtex;

namespace {

// Naive direct 3x3 conv, the oracle for the GEMM path.
Tensor conv_ref(const Tensor& x, const Tensor& w, const Tensor& b) {
  const int B = x.shape()[0], Ci = x.shape()[1], H = x.shape()[2], W = x.shape()[3];
  const int Co = w.shape()[0];
  Tensor out = Tensor::zeros(Shape{B, Co, H, W});
  for (int bi = 0; bi < B; ++bi)
    for (int co = 0; co < Co; ++co)
      for (int y = 0; y < H; ++y)
        for (int xx = 0; xx < W; ++xx) {
          double acc = b.defined() ? b.data()[co] : 0.0;
          for (int ci = 0; ci < Ci; ++ci)
            for (int ty = -1; ty <= 1; ++ty)
              for (int tx = -1; tx <= 1; ++tx) {
                const int iy = y + ty, ix = xx + tx;
                if (iy < 0 || iy >= H || ix < 0 || ix >= W) continue;
                acc += x.at(bi, ci, iy, ix) * w.at(co, ci, ty + 1, tx + 1);
              }
          out.at(bi, co, y, xx) = acc;
        }
  return out;
}

double bilin_zero(const Tensor& x, int b, int c, double sy, double sx) {
  const int Hi = x.shape()[2], Wi = x.shape()[3];
  const int y0 = static_cast<int>(std::floor(sy)), x0 = static_cast<int>(std::floor(sx));
  const double ay = sy - y0, ax = sx - x0;
  auto at = [&](int y, int xx) -> double {
    if (y < 0 || y >= Hi || xx < 0 || xx >= Wi) return 0.0;
    return x.at(b, c, y, xx);
  };
  return (1 - ay) * (1 - ax) * at(y0, x0) + (1 - ay) * ax * at(y0, x0 + 1) +
         ay * (1 - ax) * at(y0 + 1, x0) + ay * ax * at(y0 + 1, x0 + 1);
}

// Naive deformable conv straight from the sampling rule.
Tensor deform_ref(const Tensor& x, const Tensor& off, const Tensor& w, const Tensor& b) {
  const int B = x.shape()[0], Ci = x.shape()[1], Hi = x.shape()[2], Wi = x.shape()[3];
  const int Co = w.shape()[0], Ho = off.shape()[2], Wo = off.shape()[3];
  Tensor out = Tensor::zeros(Shape{B, Co, Ho, Wo});
  for (int bi = 0; bi < B; ++bi)
    for (int co = 0; co < Co; ++co)
      for (int oy = 0; oy < Ho; ++oy)
        for (int ox = 0; ox < Wo; ++ox) {
          double acc = b.defined() ? b.data()[co] : 0.0;
          for (int k = 0; k < 9; ++k) {
            const int ty = k / 3 - 1, tx = k % 3 - 1;
            const double sy =
                decoupled_base_coord(oy, Ho, Hi) + ty + off.at(bi, 2 * k, oy, ox);
            const double sx =
                decoupled_base_coord(ox, Wo, Wi) + tx + off.at(bi, 2 * k + 1, oy, ox);
            for (int ci = 0; ci < Ci; ++ci)
              acc += w.at(co, ci, ty + 1, tx + 1) * bilin_zero(x, bi, ci, sy, sx);
          }
          out.at(bi, co, oy, ox) = acc;
        }
  return out;
}

Tensor identity_flow(int B, int H, int W) {
  Tensor f = Tensor::zeros(Shape{B, 2, H, W});
  for (int bi = 0; bi < B; ++bi)
    for (int y = 0; y < H; ++y)
      for (int xx = 0; xx < W; ++xx) {
        f.at(bi, 0, y, xx) = 2.0 * xx / (W - 1) - 1.0;
        f.at(bi, 1, y, xx) = 2.0 * y / (H - 1) - 1.0;
      }
  return f;
}

}  // namespace

TEST_CASE("conv2d matches the naive reference") {
  Rng rng(11);
  for (int trial = 0; trial < 5; ++trial) {
    const int B = 1 + rng.uniform_int(2), Ci = 1 + rng.uniform_int(3),
              Co = 1 + rng.uniform_int(3);
    const int H = 3 + rng.uniform_int(5), W = 3 + rng.uniform_int(5);
    Tensor x = Tensor::randn(Shape{B, Ci, H, W}, rng, 1.0);
    Tensor w = Tensor::randn(Shape{Co, Ci, 3, 3}, rng, 0.5);
    Tensor b = Tensor::randn(Shape{Co}, rng, 0.5);
    Tensor got = conv2d(x, w, b);
    Tensor ref = conv_ref(x, w, b);
    CHECK((got.data() - ref.data()).abs().maxCoeff() <= 1e-12);
  }
}

TEST_CASE("conv2d delta kernel is identity; ones kernel sums the zero-padded window") {
  Tensor x = Tensor::full(Shape{1, 1, 4, 4}, 2.0);
  Tensor wd = Tensor::zeros(Shape{1, 1, 3, 3});
  wd.at(0, 0, 1, 1) = 1.0;
  Tensor y = conv2d(x, wd, Tensor());
  CHECK((y.data() - x.data()).abs().maxCoeff() == 0.0);

  Tensor w1 = Tensor::full(Shape{1, 1, 3, 3}, 1.0);
  Tensor s = conv2d(x, w1, Tensor());
  CHECK(s.at(0, 0, 1, 1) == doctest::Approx(18.0));  // interior: 9 taps
  CHECK(s.at(0, 0, 0, 0) == doctest::Approx(8.0));   // corner: 4 taps
  CHECK(s.at(0, 0, 0, 1) == doctest::Approx(12.0));  // edge: 6 taps
}

TEST_CASE("conv2d gradients pass finite differences") {
  Rng rng(12);
  Tensor x = Tensor::randn(Shape{2, 2, 4, 3}, rng, 1.0, true);
  Tensor w = Tensor::randn(Shape{2, 2, 3, 3}, rng, 0.5, true);
  Tensor b = Tensor::randn(Shape{2}, rng, 0.5, true);
  auto f = [&]() { return sum(mul(conv2d(x, w, b), conv2d(x, w, b))); };
  CHECK(grad_check(f, x, 1e-5).max_rel_err <= 1e-6);
  CHECK(grad_check(f, w, 1e-5).max_rel_err <= 1e-6);
  CHECK(grad_check(f, b, 1e-5).max_rel_err <= 1e-6);
}

TEST_CASE("batchnorm2d normalizes with batch statistics and updates running buffers") {
  Rng rng(13);
  const int B = 2, C = 3, H = 4, W = 4;
  Tensor x = Tensor::randn(Shape{B, C, H, W}, rng, 2.0);
  x.data() += 0.7;
  Tensor gamma = Tensor::full(Shape{C}, 1.0), beta = Tensor::zeros(Shape{C});
  Tensor rm = Tensor::zeros(Shape{C}), rv = Tensor::full(Shape{C}, 1.0);
  Tensor y = batchnorm2d(x, gamma, beta, rm, rv, true);
  const double N = B * H * W;
  for (int c = 0; c < C; ++c) {
    double s = 0, ss = 0;
    for (int bi = 0; bi < B; ++bi)
      for (int p = 0; p < H * W; ++p) {
        const double v = x.data()[(bi * C + c) * H * W + p];
        s += v;
        ss += v * v;
      }
    const double m = s / N, var = ss / N - m * m;
    // output is standardized
    double ys = 0, yss = 0;
    for (int bi = 0; bi < B; ++bi)
      for (int p = 0; p < H * W; ++p) {
        const double v = y.data()[(bi * C + c) * H * W + p];
        ys += v;
        yss += v * v;
      }
    CHECK(std::abs(ys / N) <= 1e-10);
    CHECK(yss / N == doctest::Approx(var / (var + 1e-5)).epsilon(1e-8));
    // running buffers moved 10% toward batch stats (biased variance)
    CHECK(rm.data()[c] == doctest::Approx(0.1 * m).epsilon(1e-10));
    CHECK(rv.data()[c] == doctest::Approx(0.9 + 0.1 * var).epsilon(1e-10));
  }
}

TEST_CASE("batchnorm2d constant input maps to beta") {
  Tensor x = Tensor::full(Shape{2, 2, 3, 3}, 5.0);
  Tensor gamma = Tensor::full(Shape{2}, 3.0);
  Tensor beta = Tensor::from(Shape{2}, {0.25, -1.0});
  Tensor rm = Tensor::zeros(Shape{2}), rv = Tensor::full(Shape{2}, 1.0);
  Tensor y = batchnorm2d(x, gamma, beta, rm, rv, true);
  for (int c = 0; c < 2; ++c)
    for (int p = 0; p < 9; ++p)
      CHECK(y.data()[c * 9 + p] == doctest::Approx(beta.data()[c]).epsilon(1e-9));
}

TEST_CASE("batchnorm2d eval mode uses running statistics") {
  Tensor x = Tensor::full(Shape{1, 1, 2, 2}, 3.0);
  Tensor gamma = Tensor::full(Shape{1}, 2.0), beta = Tensor::full(Shape{1}, 1.0);
  Tensor rm = Tensor::full(Shape{1}, 1.0), rv = Tensor::full(Shape{1}, 4.0);
  Tensor y = batchnorm2d(x, gamma, beta, rm, rv, false);
  const double expect = 2.0 * (3.0 - 1.0) / std::sqrt(4.0 + 1e-5) + 1.0;
  CHECK(y.data()[0] == doctest::Approx(expect).epsilon(1e-10));
  CHECK(rm.data()[0] == 1.0);  // eval mode must not touch the buffers
}

TEST_CASE("batchnorm2d gradients pass finite differences in both modes") {
  Rng rng(14);
  Tensor x = Tensor::randn(Shape{2, 2, 3, 3}, rng, 1.0, true);
  Tensor gamma = Tensor::uniform(Shape{2}, rng, 0.5, 1.5, true);
  Tensor beta = Tensor::uniform(Shape{2}, rng, -0.5, 0.5, true);
  // project through a fixed random map so the loss is not invariant to the
  // standardization (sum of squares of a standardized field nearly is)
  Tensor proj = Tensor::randn(Shape{2, 2, 3, 3}, rng, 1.0);
  for (bool training : {true, false}) {
    auto f = [&]() {
      Tensor rm = Tensor::from(Shape{2}, {0.1, -0.2});
      Tensor rv = Tensor::from(Shape{2}, {1.3, 0.8});
      Tensor y = batchnorm2d(x, gamma, beta, rm, rv, training);
      Tensor z = mul(y, proj);
      return sum(mul(z, add_scalar(z, 0.3)));
    };
    CHECK(grad_check(f, x, 1e-5).max_rel_err <= 1e-5);
    CHECK(grad_check(f, gamma, 1e-5).max_rel_err <= 1e-5);
    CHECK(grad_check(f, beta, 1e-5).max_rel_err <= 1e-6);
  }
}

TEST_CASE("pooling and upsampling") {
  Tensor x = Tensor::from(Shape{1, 1, 2, 4}, {1, 2, 3, 4, 5, 6, 7, 8});
  Tensor p = avg_pool2x(x);
  CHECK(p.shape() == Shape{1, 1, 1, 2});
  CHECK(p.data()[0] == doctest::Approx((1 + 2 + 5 + 6) / 4.0));
  CHECK(p.data()[1] == doctest::Approx((3 + 4 + 7 + 8) / 4.0));

  Tensor u = upsample2x_nearest(p);
  CHECK(u.shape() == Shape{1, 1, 2, 4});
  CHECK(u.at(0, 0, 0, 0) == p.data()[0]);
  CHECK(u.at(0, 0, 1, 1) == p.data()[0]);
  CHECK(u.at(0, 0, 1, 3) == p.data()[1]);

  CHECK_THROWS_AS(avg_pool2x(Tensor::zeros(Shape{1, 1, 3, 4})), ContractViolation);

  Rng rng(15);
  Tensor r = Tensor::randn(Shape{2, 2, 4, 4}, rng, 1.0, true);
  auto fp = [&]() { return sum(mul(avg_pool2x(r), avg_pool2x(r))); };
  CHECK(grad_check(fp, r, 1e-5).max_rel_err <= 1e-6);
  auto fu = [&]() { return sum(mul(upsample2x_nearest(r), upsample2x_nearest(r))); };
  CHECK(grad_check(fu, r, 1e-5).max_rel_err <= 1e-6);
  // constant field survives a pool/upsample round trip exactly
  Tensor c = Tensor::full(Shape{1, 3, 4, 4}, 0.37);
  CHECK((upsample2x_nearest(avg_pool2x(c)).data() - c.data()).abs().maxCoeff() == 0.0);
}

TEST_CASE("grid_sample identity flow reproduces the image") {
  Rng rng(16);
  // dyadic extents make the normalize/denormalize round trip exact in fp
  Tensor img = Tensor::randn(Shape{2, 3, 5, 5}, rng, 1.0);
  Tensor y = grid_sample_bilinear(img, identity_flow(2, 5, 5));
  CHECK((y.data() - img.data()).abs().maxCoeff() == 0.0);
  // awkward extents round-trip to within an ulp of the lerp
  Tensor img2 = Tensor::randn(Shape{2, 3, 5, 7}, rng, 1.0);
  Tensor y2 = grid_sample_bilinear(img2, identity_flow(2, 5, 7));
  CHECK((y2.data() - img2.data()).abs().maxCoeff() <= 1e-12);
}

TEST_CASE("grid_sample bilinear weights and border clamping") {
  Tensor img = Tensor::from(Shape{1, 1, 2, 2}, {0, 1, 2, 3});
  Tensor flow = Tensor::zeros(Shape{1, 2, 1, 3});
  // center of the 2x2 image
  flow.at(0, 0, 0, 0) = 0.0;
  flow.at(0, 1, 0, 0) = 0.0;
  // far outside to the left/top: clamps to pixel (0,0)
  flow.at(0, 0, 0, 1) = -3.0;
  flow.at(0, 1, 0, 1) = -3.0;
  // exactly the bottom-right corner
  flow.at(0, 0, 0, 2) = 1.0;
  flow.at(0, 1, 0, 2) = 1.0;
  Tensor y = grid_sample_bilinear(img, flow);
  CHECK(y.data()[0] == doctest::Approx(1.5));
  CHECK(y.data()[1] == doctest::Approx(0.0));
  CHECK(y.data()[2] == doctest::Approx(3.0));

  Tensor bad = Tensor::zeros(Shape{1, 2, 1, 1});
  bad.data()[0] = std::numeric_limits<double>::quiet_NaN();
  CHECK_THROWS_AS(grid_sample_bilinear(img, bad), ContractViolation);
}

TEST_CASE("grid_sample gradients w.r.t. image and flow") {
  Rng rng(17);
  Tensor img = Tensor::randn(Shape{1, 2, 4, 4}, rng, 1.0, true);
  Tensor flow = Tensor::uniform(Shape{1, 2, 3, 3}, rng, -0.55, 0.55, true);
  auto f = [&]() {
    Tensor y = grid_sample_bilinear(img, flow);
    return sum(mul(y, y));
  };
  CHECK(grad_check(f, img, 1e-5).max_rel_err <= 1e-6);
  CHECK(grad_check(f, flow, 1e-6).max_rel_err <= 1e-4);
}

TEST_CASE("flow_to_offsets cancels against the base grid and tracks shifts") {
  Tensor w = Tensor::zeros(Shape{18, 2, 3, 3});
  Tensor b = Tensor::zeros(Shape{18});
  init_offset_conv_replicate(w, b);

  const int Ho = 4, Wo = 4, Hi = 8, Wi = 8;
  Tensor flow = Tensor::zeros(Shape{1, 2, Ho, Wo});
  for (int y = 0; y < Ho; ++y)
    for (int xx = 0; xx < Wo; ++xx) {
      flow.at(0, 0, y, xx) = 2.0 * decoupled_base_coord(xx, Wo, Wi) / (Wi - 1) - 1.0;
      flow.at(0, 1, y, xx) = 2.0 * decoupled_base_coord(y, Ho, Hi) / (Hi - 1) - 1.0;
    }
  Tensor off = flow_to_offsets(flow, Hi, Wi, w, b);
  CHECK(off.shape() == Shape{1, 18, Ho, Wo});
  CHECK(off.data().abs().maxCoeff() <= 1e-12);

  // shift the flow target 2 input pixels right: every x offset becomes 2
  Tensor flow2 = flow.detach_copy();
  for (int y = 0; y < Ho; ++y)
    for (int xx = 0; xx < Wo; ++xx) flow2.at(0, 0, y, xx) += 2.0 * 2.0 / (Wi - 1);
  Tensor off2 = flow_to_offsets(flow2, Hi, Wi, w, b);
  for (int k = 0; k < 9; ++k)
    for (int p = 0; p < Ho * Wo; ++p) {
      CHECK(off2.data()[(2 * k + 1) * Ho * Wo + p] == doctest::Approx(2.0).epsilon(1e-10));
      CHECK(std::abs(off2.data()[(2 * k) * Ho * Wo + p]) <= 1e-12);
    }
}

TEST_CASE("flow_to_offsets is differentiable through flow and conv weights") {
  Rng rng(18);
  Tensor w = Tensor::randn(Shape{18, 2, 3, 3}, rng, 0.2, true);
  Tensor b = Tensor::randn(Shape{18}, rng, 0.1, true);
  Tensor flow = Tensor::uniform(Shape{1, 2, 3, 3}, rng, -0.8, 0.8, true);
  auto f = [&]() { return sum(mul(flow_to_offsets(flow, 6, 6, w, b), flow_to_offsets(flow, 6, 6, w, b))); };
  CHECK(grad_check(f, flow, 1e-5).max_rel_err <= 1e-6);
  CHECK(grad_check(f, w, 1e-5).max_rel_err <= 1e-6);
}

TEST_CASE("deformable_conv2d with zero offsets equals conv2d on same geometry") {
  Rng rng(19);
  Tensor x = Tensor::randn(Shape{2, 3, 6, 5}, rng, 1.0);
  Tensor w = Tensor::randn(Shape{2, 3, 3, 3}, rng, 0.5);
  Tensor b = Tensor::randn(Shape{2}, rng, 0.5);
  Tensor off = Tensor::zeros(Shape{2, 18, 6, 5});
  Tensor got = deformable_conv2d(x, off, w, b);
  Tensor ref = conv2d(x, w, b);
  CHECK((got.data() - ref.data()).abs().maxCoeff() <= 1e-12);
}

TEST_CASE("deformable_conv2d matches the naive reference on decoupled geometry") {
  Rng rng(20);
  for (int trial = 0; trial < 5; ++trial) {
    const int B = 1 + rng.uniform_int(2), Ci = 1 + rng.uniform_int(2),
              Co = 1 + rng.uniform_int(2);
    const int Hi = 4 + rng.uniform_int(4), Wi = 4 + rng.uniform_int(4);
    const int Ho = 3 + rng.uniform_int(4), Wo = 3 + rng.uniform_int(4);
    Tensor x = Tensor::randn(Shape{B, Ci, Hi, Wi}, rng, 1.0);
    Tensor w = Tensor::randn(Shape{Co, Ci, 3, 3}, rng, 0.5);
    Tensor b = Tensor::randn(Shape{Co}, rng, 0.5);
    Tensor off = Tensor::uniform(Shape{B, 18, Ho, Wo}, rng, -2.5, 2.5);
    Tensor got = deformable_conv2d(x, off, w, b);
    Tensor ref = deform_ref(x, off, w, b);
    CHECK((got.data() - ref.data()).abs().maxCoeff() <= 1e-12);
  }
}

TEST_CASE("deformable_conv2d gradients pass finite differences") {
  Rng rng(21);
  Tensor x = Tensor::randn(Shape{1, 2, 5, 5}, rng, 1.0, true);
  Tensor w = Tensor::randn(Shape{2, 2, 3, 3}, rng, 0.4, true);
  Tensor b = Tensor::randn(Shape{2}, rng, 0.3, true);
  // keep offsets away from integer lattice points where bilinear kinks live
  Tensor off = Tensor::uniform(Shape{1, 18, 4, 4}, rng, 0.2, 0.45, true);
  auto f = [&]() {
    Tensor y = deformable_conv2d(x, off, w, b);
    return sum(mul(y, y));
  };
  CHECK(grad_check(f, x, 1e-5).max_rel_err <= 1e-5);
  CHECK(grad_check(f, off, 1e-6).max_rel_err <= 1e-4);
  CHECK(grad_check(f, w, 1e-5).max_rel_err <= 1e-5);
  CHECK(grad_check(f, b, 1e-5).max_rel_err <= 1e-6);
}

TEST_CASE("attention with identical keys averages the values") {
  Rng rng(22);
  Tensor q = Tensor::randn(Shape{1, 3, 2, 2}, rng, 1.0);
  Tensor k = Tensor::full(Shape{1, 3, 2, 3}, 0.5);
  Tensor v = Tensor::randn(Shape{1, 3, 2, 3}, rng, 1.0);
  Tensor out = attention_block(q, k, v);
  for (int c = 0; c < 3; ++c) {
    double m = 0;
    for (int p = 0; p < 6; ++p) m += v.data()[c * 6 + p];
    m /= 6.0;
    for (int p = 0; p < 4; ++p)
      CHECK(out.data()[c * 4 + p] == doctest::Approx(m).epsilon(1e-12));
  }
}

TEST_CASE("attention matches a hand-computed two-token instance") {
  // d=2, one query token, two key tokens
  Tensor q = Tensor::from(Shape{1, 2, 1, 1}, {1.0, 2.0});
  Tensor k = Tensor::from(Shape{1, 2, 1, 2}, {0.5, -1.0, 1.0, 0.25});
  Tensor v = Tensor::from(Shape{1, 2, 1, 2}, {3.0, -2.0, 0.5, 4.0});
  // scores: q.k_j / sqrt(2); k_0=(0.5,1.0), k_1=(-1.0,0.25)
  const double s0 = (1.0 * 0.5 + 2.0 * 1.0) / std::sqrt(2.0);
  const double s1 = (1.0 * -1.0 + 2.0 * 0.25) / std::sqrt(2.0);
  const double m = std::max(s0, s1);
  const double e0 = std::exp(s0 - m), e1 = std::exp(s1 - m);
  const double a0 = e0 / (e0 + e1), a1 = e1 / (e0 + e1);
  Tensor out = attention_block(q, k, v);
  CHECK(out.data()[0] == doctest::Approx(a0 * 3.0 + a1 * -2.0).epsilon(1e-12));
  CHECK(out.data()[1] == doctest::Approx(a0 * 0.5 + a1 * 4.0).epsilon(1e-12));
}

TEST_CASE("softmax rows sum to one even for extreme logits") {
  RowMat m(3, 4);
  m << 1000.0, 999.0, 998.0, 997.0, -1000.0, -1000.0, -1000.0, -1000.0, 0.0, 50.0, -50.0, 25.0;
  softmax_rows_inplace(m);
  for (int r = 0; r < 3; ++r) {
    CHECK(std::abs(m.row(r).sum() - 1.0) <= 1e-12);
    CHECK(m.row(r).minCoeff() >= 0.0);
  }
}

TEST_CASE("attention rejects token counts above the cap") {
  Tensor q = Tensor::zeros(Shape{1, 1, 70, 70});  // 4900 tokens
  Tensor kv = Tensor::zeros(Shape{1, 1, 2, 2});
  CHECK_THROWS_AS(attention_block(q, kv, kv), ContractViolation);
  CHECK_THROWS_AS(attention_block(kv, q, q), ContractViolation);
}

TEST_CASE("attention gradients pass finite differences") {
  Rng rng(23);
  Tensor q = Tensor::randn(Shape{2, 3, 2, 2}, rng, 0.7, true);
  Tensor k = Tensor::randn(Shape{2, 3, 2, 3}, rng, 0.7, true);
  Tensor v = Tensor::randn(Shape{2, 3, 2, 3}, rng, 0.7, true);
  auto f = [&]() {
    Tensor y = attention_block(q, k, v);
    return sum(mul(y, y));
  };
  CHECK(grad_check(f, q, 1e-5).max_rel_err <= 1e-5);
  CHECK(grad_check(f, k, 1e-5).max_rel_err <= 1e-5);
  CHECK(grad_check(f, v, 1e-5).max_rel_err <= 1e-5);
}

TEST_CASE("attention blocked path is exact across the block boundary") {
  // 600 query tokens forces two blocks; compare against a single-pass oracle.
  Rng rng(24);
  const int tq = 600, tk = 40, d = 4;
  Tensor q = Tensor::randn(Shape{1, d, 20, 30}, rng, 1.0);
  Tensor k = Tensor::randn(Shape{1, d, 5, 8}, rng, 1.0);
  Tensor v = Tensor::randn(Shape{1, d, 5, 8}, rng, 1.0);
  Tensor out = attention_block(q, k, v);
  Eigen::Map<const RowMat> Qm(q.ptr(), d, tq), Km(k.ptr(), d, tk), Vm(v.ptr(), d, tk);
  RowMat S = (Qm.transpose() * Km / std::sqrt(static_cast<double>(d)));
  softmax_rows_inplace(S);
  RowMat O = S * Vm.transpose();  // (tq, d)
  Eigen::Map<const RowMat> Om(out.ptr(), d, tq);
  CHECK((O.transpose() - Om).cwiseAbs().maxCoeff() <= 1e-12);
}

TEST_CASE("filter2d_valid matches hand correlation and is differentiable") {
  Tensor x = Tensor::from(Shape{1, 1, 2, 3}, {1, 2, 3, 4, 5, 6});
  Tensor ker = Tensor::from(Shape{2, 2}, {1.0, 0.5, 0.25, -1.0});
  Tensor y = filter2d_valid(x, ker);
  CHECK(y.shape() == Shape{1, 1, 1, 2});
  CHECK(y.data()[0] == doctest::Approx(1 * 1.0 + 2 * 0.5 + 4 * 0.25 + 5 * -1.0));
  CHECK(y.data()[1] == doctest::Approx(2 * 1.0 + 3 * 0.5 + 5 * 0.25 + 6 * -1.0));

  Rng rng(25);
  Tensor r = Tensor::randn(Shape{2, 2, 5, 5}, rng, 1.0, true);
  auto f = [&]() { return sum(mul(filter2d_valid(r, ker), filter2d_valid(r, ker))); };
  CHECK(grad_check(f, r, 1e-5).max_rel_err <= 1e-6);
}
