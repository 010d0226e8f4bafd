#include "uvtex/losses.hpp"

#include <cmath>
#include <string>

#include "uvtex/metrics.hpp"
#include "uvtex/nn_ops.hpp"
#include "uvtex/synth_data.hpp"

namespace uvtex {

namespace {

constexpr double kSqrt2 = 1.41421356237309504880;

Tensor to_rank4(const Tensor& x) {
  if (x.shape().rank == 4) return x;
  require(x.shape().rank == 3, "expected rank-3 or rank-4 tensor, got " + x.shape().str());
  return reshape(x, Shape{1, x.shape()[0], x.shape()[1], x.shape()[2]});
}

Tensor to_unit_range(const Tensor& x) { return add_scalar(mul_scalar(x, 0.5), 0.5); }

void check_finite(double v, const char* term) {
  if (!std::isfinite(v))
    throw ContractViolation(std::string("loss term '") + term + "' is not finite");
}

// Interior guards (sqrt domain, sigma floor, ...) can fire before the term
// value exists; attach the term name so the abort is actionable either way.
template <typename F>
Tensor eval_term(const char* term, F&& f) {
  try {
    return f();
  } catch (const ContractViolation& e) {
    throw ContractViolation(std::string("loss term '") + term + "': " + e.what());
  }
}

}  // namespace

constexpr std::array<int, FeatureExtractor::kStages> FeatureExtractor::kChannels;

FeatureExtractor::FeatureExtractor(uint64_t seed) {
  Rng rng(seed);
  int c_in = 3;
  for (int i = 0; i < kStages; ++i) {
    const int c_out = kChannels[i];
    const double stddev = std::sqrt(2.0 / (c_in * 9.0));
    w_[i] = Tensor::randn(Shape{c_out, c_in, 3, 3}, rng, stddev);
    b_[i] = Tensor::zeros(Shape{c_out});
    c_in = c_out;
  }
}

std::array<Tensor, FeatureExtractor::kStages> FeatureExtractor::features(
    const Tensor& images) const {
  require(images.shape().rank == 4 && images.shape()[1] == 3,
          "feature extractor expects (B,3,H,W), got " + images.shape().str());
  std::array<Tensor, kStages> out;
  Tensor x = images;
  for (int i = 0; i < kStages; ++i) {
    x = relu(conv2d(x, w_[i], b_[i]));
    const int h = x.shape()[2], w = x.shape()[3];
    if (h % 2 == 0 && w % 2 == 0 && h >= 2 && w >= 2) x = avg_pool2x(x);
    out[i] = x;
  }
  return out;
}

Tensor FeatureExtractor::stage(const Tensor& images, int j) const {
  require(j >= 1 && j <= kStages, "feature stage out of range");
  require(images.shape().rank == 4 && images.shape()[1] == 3,
          "feature extractor expects (B,3,H,W), got " + images.shape().str());
  Tensor x = images;
  for (int i = 0; i < j; ++i) {
    x = relu(conv2d(x, w_[i], b_[i]));
    const int h = x.shape()[2], w = x.shape()[3];
    if (h % 2 == 0 && w % 2 == 0 && h >= 2 && w >= 2) x = avg_pool2x(x);
  }
  return x;
}

double w_int_schedule(int64_t step, int64_t total_steps) {
  require(total_steps > 0, "total_steps must be positive");
  return std::max(0.0, 1.0 - 2.0 * static_cast<double>(step) / static_cast<double>(total_steps));
}

Tensor gram_matrix(const Tensor& x) {
  const Shape& s = x.shape();
  require(s.rank == 4, "gram_matrix: rank-4 input required");
  const int B = s[0], C = s[1];
  const int64_t hw = static_cast<int64_t>(s[2]) * s[3];
  const double norm = 1.0 / (static_cast<double>(C) * hw);
  Tensor out = Tensor::zeros(Shape{B, C, C});
  for (int b = 0; b < B; ++b) {
    Eigen::Map<const RowMat> X(x.ptr() + b * C * hw, C, hw);
    Eigen::Map<RowMat> G(out.ptr() + static_cast<int64_t>(b) * C * C, C, C);
    G.noalias() = X * X.transpose() * norm;
  }
  Tape* tp = active_tape();
  if (tp && x.requires_grad()) {
    out.set_requires_grad(true);
    Tensor xc = x, oc = out;
    tp->record([xc, oc, B, C, hw, norm]() mutable {
      if (!oc.has_grad()) return;
      Array gx(xc.numel());
      for (int b = 0; b < B; ++b) {
        Eigen::Map<const RowMat> X(xc.ptr() + b * C * hw, C, hw);
        Eigen::Map<const RowMat> dG(oc.grad().data() + static_cast<int64_t>(b) * C * C, C, C);
        Eigen::Map<RowMat> dX(gx.data() + b * C * hw, C, hw);
        dX.noalias() = (dG + dG.transpose()) * X * norm;
      }
      xc.accumulate_grad(gx);
    });
  }
  return out;
}

Tensor make_part_masks(const Tensor& labels, int n_parts) {
  const Shape& s = labels.shape();
  require(s.rank == 4 && s[1] == 1, "make_part_masks: (B,1,H,W) labels required");
  require(!labels.requires_grad(), "make_part_masks: labels must be constant");
  const int B = s[0], H = s[2], W = s[3];
  Tensor out = Tensor::zeros(Shape{B, n_parts, H, W});
  const double* lp = labels.ptr();
  double* op = out.ptr();
  const int64_t hw = static_cast<int64_t>(H) * W;
  for (int b = 0; b < B; ++b)
    for (int p = 0; p < n_parts; ++p)
      for (int64_t i = 0; i < hw; ++i)
        op[(static_cast<int64_t>(b) * n_parts + p) * hw + i] =
            lp[b * hw + i] == static_cast<double>(p + 1) ? 1.0 : 0.0;
  return out;
}

Tensor nearest_resize(const Tensor& x, int out_h, int out_w) {
  const Shape& s = x.shape();
  require(s.rank == 4, "nearest_resize: rank-4 input required");
  require(!x.requires_grad(), "nearest_resize: constant tensors only");
  require(out_h > 0 && out_w > 0, "nearest_resize: bad output size");
  const int B = s[0], C = s[1], H = s[2], W = s[3];
  Tensor out = Tensor::zeros(Shape{B, C, out_h, out_w});
  const double sy = static_cast<double>(H) / out_h, sx = static_cast<double>(W) / out_w;
  for (int bc = 0; bc < B * C; ++bc) {
    const double* sp = x.ptr() + static_cast<int64_t>(bc) * H * W;
    double* dp = out.ptr() + static_cast<int64_t>(bc) * out_h * out_w;
    for (int y = 0; y < out_h; ++y) {
      const int yy = std::min(H - 1, static_cast<int>((y + 0.5) * sy));
      for (int xo = 0; xo < out_w; ++xo) {
        const int xx = std::min(W - 1, static_cast<int>((xo + 0.5) * sx));
        dp[y * out_w + xo] = sp[yy * W + xx];
      }
    }
  }
  return out;
}

Tensor reid_loss(const Tensor& img, const Tensor& ref, const FeatureExtractor& phi) {
  require(img.shape() == ref.shape(), "reid_loss: shape mismatch " + img.shape().str() + " vs " +
                                          ref.shape().str());
  const Tensor a = to_rank4(img), b = to_rank4(ref);
  const auto fa = phi.features(a);
  const auto fb = phi.features(b);
  Tensor total;
  for (int j = 0; j < FeatureExtractor::kStages; ++j) {
    Tensor d = sub(fa[j], fb[j]);
    Tensor t = sum(mul(d, d));
    total = total.defined() ? add(total, t) : t;
  }
  return total;
}

Tensor part_style_loss(const Tensor& img, const Tensor& ref, const Tensor& masks_img,
                       const Tensor& masks_ref, const FeatureExtractor& phi) {
  const Tensor a = to_rank4(img), b = to_rank4(ref);
  const Tensor ma = to_rank4(masks_img), mb = to_rank4(masks_ref);
  require(a.shape() == b.shape(), "part_style_loss: image shape mismatch");
  require(ma.shape() == mb.shape(), "part_style_loss: part count mismatch");

  const Tensor fa = phi.stage(a, 1);
  const Tensor fb = phi.stage(b, 1);
  const int fh = fa.shape()[2], fw = fa.shape()[3], fc = fa.shape()[1];
  const Tensor ra = nearest_resize(ma, fh, fw);
  const Tensor rb = nearest_resize(mb, fh, fw);

  Tensor total;
  for (int p = 0; p < ma.shape()[1]; ++p) {
    Tensor ga = gram_matrix(mul(fa, broadcast_channel(slice_channels(ra, p, 1), fc)));
    Tensor gb = gram_matrix(mul(fb, broadcast_channel(slice_channels(rb, p, 1), fc)));
    Tensor d = sub(ga, gb);
    Tensor t = sum(mul(d, d));
    total = total.defined() ? add(total, t) : t;
  }
  return total;
}

Tensor face_crop(const Tensor& texture) {
  const bool rank3 = texture.shape().rank == 3;
  const Tensor t4 = to_rank4(texture);
  require(t4.shape()[2] == kTextureSize && t4.shape()[3] == kTextureSize,
          "face_crop expects the full atlas texture, got " + texture.shape().str());
  const AtlasRect face = AtlasLayout::standard().face;
  const int x0 = face.px0(kTextureSize), x1 = face.px1(kTextureSize);
  const int y0 = face.py0(kTextureSize), y1 = face.py1(kTextureSize);
  Tensor out = crop_hw(t4, y0, x0, y1 - y0, x1 - x0);
  if (rank3) out = reshape(out, Shape{out.shape()[1], out.shape()[2], out.shape()[3]});
  return out;
}

Tensor face_structure_loss(const Tensor& face_patches, const std::vector<Tensor>& bank_patches) {
  require(!bank_patches.empty(), "face_structure_loss: empty bank");
  const Tensor t4 = to_rank4(face_patches);
  const int B = t4.shape()[0];
  const int n = static_cast<int>(bank_patches.size());

  std::vector<Tensor> bank01;
  bank01.reserve(bank_patches.size());
  for (const Tensor& f : bank_patches) {
    require(!f.requires_grad(), "face bank entries must be constant");
    bank01.push_back(to_unit_range(to_rank4(f)));
  }

  Tensor total;
  for (int b = 0; b < B; ++b) {
    const Tensor patch = to_unit_range(slice_batch(t4, b, 1));
    Tensor acc;
    for (const Tensor& f : bank01) {
      Tensor s = ssim(patch, f);
      acc = acc.defined() ? add(acc, s) : s;
    }
    Tensor term = mul_scalar(acc, -1.0 / n);
    total = total.defined() ? add(total, term) : term;
  }
  return total;
}

Tensor base_loss(const Tensor& img, const Tensor& ref, const Tensor& masks_img,
                 const Tensor& masks_ref, const Tensor& texture,
                 const std::vector<Tensor>& bank_patches, const FeatureExtractor& phi,
                 const LossWeights& w) {
  Tensor out = mul_scalar(reid_loss(img, ref, phi), w.reid);
  out = add(out, mul_scalar(part_style_loss(img, ref, masks_img, masks_ref, phi), w.style));
  out = add(out, mul_scalar(face_structure_loss(face_crop(texture), bank_patches), w.face));
  return out;
}

Tensor uncertainty_recon_loss(const Tensor& img, const Tensor& ref, const Tensor& sigma) {
  const Tensor a = to_rank4(img), b = to_rank4(ref), s = to_rank4(sigma);
  require(a.shape() == b.shape(), "uncertainty_recon_loss: image shape mismatch");
  require(s.shape()[0] == a.shape()[0] && s.shape()[1] == 1 && s.shape()[2] == a.shape()[2] &&
              s.shape()[3] == a.shape()[3],
          "uncertainty_recon_loss: sigma must be (B,1,H,W) matching the images");
  require(s.data().minCoeff() >= kSigmaFloor - 1e-12,
          "uncertainty_recon_loss: sigma below the 1e-3 floor");

  const Tensor resid = abs_op(sub(a, b));
  const Tensor weighted = mul(resid, broadcast_channel(reciprocal(s), a.shape()[1]));
  const Tensor log_term = log_op(mul_scalar(s, kSqrt2));
  return add(sum(log_term), mul_scalar(sum(weighted), kSqrt2));
}

Tensor cycle_loss(const Tensor& t_first, const Tensor& t_second) {
  require(t_first.shape() == t_second.shape(), "cycle_loss: shape mismatch");
  const Tensor a = to_rank4(t_first), b = to_rank4(t_second);
  const Tensor d = sub(a, b);
  Tensor total;
  for (int i = 0; i < a.shape()[0]; ++i) {
    Tensor db = slice_batch(d, i, 1);
    // eps keeps the norm's gradient finite at an exact zero difference
    Tensor nb = sqrt_op(add_scalar(sum(mul(db, db)), 1e-24));
    total = total.defined() ? add(total, nb) : nb;
  }
  return total;
}

LossBreakdown total_loss(const ViewBatch& input_view, const ViewBatch* novel_view,
                         const ModelOutputsForLoss& out, const std::vector<Tensor>& bank_patches,
                         const FeatureExtractor& phi, const TotalLossConfig& cfg) {
  require(out.texture_final.defined() && out.texture_final.shape().rank == 4,
          "total_loss: texture_final must be (B,3,S,S)");
  const int B = out.texture_final.shape()[0];
  require(static_cast<int>(input_view.rasters.size()) == B,
          "total_loss: raster count must match the batch");
  if (cfg.multi_view)
    require(novel_view != nullptr && static_cast<int>(novel_view->rasters.size()) == B,
            "total_loss: multi-view mode needs a novel view batch");

  const double inv_b = 1.0 / B;
  LossBreakdown bd;
  bd.w_int = w_int_schedule(cfg.step, cfg.total_steps);

  const Tensor render_sv = render_texture(input_view.rasters, out.texture_final);
  Tensor base_sv = eval_term("base_sv", [&] {
    return base_loss(input_view.images, render_sv, input_view.masks, input_view.render_masks,
                     out.texture_final, bank_patches, phi, cfg.weights);
  });
  bd.base_sv = base_sv.scalar() * inv_b;
  check_finite(bd.base_sv, "base_sv");
  Tensor total = mul_scalar(base_sv, inv_b);

  if (cfg.multi_view) {
    const Tensor render_nv = render_texture(novel_view->rasters, out.texture_final);
    Tensor base_nv = eval_term("base_nv", [&] {
      return base_loss(novel_view->images, render_nv, novel_view->masks,
                       novel_view->render_masks, out.texture_final, bank_patches, phi,
                       cfg.weights);
    });
    bd.base_nv = base_nv.scalar() * inv_b;
    check_finite(bd.base_nv, "base_nv");
    total = add(total, mul_scalar(base_nv, inv_b));

    if (cfg.use_cycle) {
      require(out.texture_second.defined(), "total_loss: cycle needs texture_second");
      Tensor cyc =
          eval_term("cycle", [&] { return cycle_loss(out.texture_final, out.texture_second); });
      bd.cycle = cyc.scalar() * inv_b;
      check_finite(bd.cycle, "cycle");
      total = add(total, mul_scalar(cyc, cfg.weights.cycle * inv_b));
    }
  }

  if (cfg.use_url) {
    require(out.sigma.defined(), "total_loss: url needs a sigma map");
    Tensor url = eval_term(
        "url", [&] { return uncertainty_recon_loss(input_view.images, render_sv, out.sigma); });
    bd.url = url.scalar() * inv_b;
    check_finite(bd.url, "url");
    total = add(total, mul_scalar(url, cfg.weights.url * inv_b));
  }

  if (cfg.intermediate && bd.w_int > 0.0) {
    require(out.texture_intermediate.defined(),
            "total_loss: intermediate supervision needs texture_intermediate");
    const Tensor irender_sv = render_texture(input_view.rasters, out.texture_intermediate);
    Tensor inter_sv = eval_term("inter_sv", [&] {
      return base_loss(input_view.images, irender_sv, input_view.masks, input_view.render_masks,
                       out.texture_intermediate, bank_patches, phi, cfg.weights);
    });
    bd.inter_sv = inter_sv.scalar() * inv_b;
    check_finite(bd.inter_sv, "inter_sv");
    total = add(total, mul_scalar(inter_sv, bd.w_int * inv_b));
    if (cfg.multi_view) {
      const Tensor irender_nv = render_texture(novel_view->rasters, out.texture_intermediate);
      Tensor inter_nv = eval_term("inter_nv", [&] {
        return base_loss(novel_view->images, irender_nv, novel_view->masks,
                         novel_view->render_masks, out.texture_intermediate, bank_patches, phi,
                         cfg.weights);
      });
      bd.inter_nv = inter_nv.scalar() * inv_b;
      check_finite(bd.inter_nv, "inter_nv");
      total = add(total, mul_scalar(inter_nv, bd.w_int * inv_b));
    }
  }

  bd.total = total.scalar();
  check_finite(bd.total, "total");
  bd.total_tensor = total;
  return bd;
}

}  // namespace uvtex
