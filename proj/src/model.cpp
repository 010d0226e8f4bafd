#include "uvtex/model.hpp"

#include <cmath>
#include <string>

#include "uvtex/nn_ops.hpp"

namespace uvtex {

namespace {

// He-scaled weights for a 3x3 conv, zero bias.
Tensor he_conv(int c_out, int c_in, Rng& rng) {
  return Tensor::randn({c_out, c_in, 3, 3}, rng, std::sqrt(2.0 / (9.0 * c_in)), true);
}

// (u, v, 0.5) color encoding of the UV grid, texel-center convention.
Tensor query_encoding(int batch, int s) {
  Tensor t = Tensor::zeros({batch, 3, s, s});
  for (int b = 0; b < batch; ++b)
    for (int y = 0; y < s; ++y)
      for (int x = 0; x < s; ++x) {
        t.at(b, 0, y, x) = (x + 0.5) / s;
        t.at(b, 1, y, x) = (y + 0.5) / s;
        t.at(b, 2, y, x) = 0.5;
      }
  return t;
}

Tensor coord_grid(int batch, int h, int w) {
  Tensor t = Tensor::zeros({batch, 2, h, w});
  for (int b = 0; b < batch; ++b)
    for (int y = 0; y < h; ++y)
      for (int x = 0; x < w; ++x) {
        t.at(b, 0, y, x) = (x + 0.5) / w;
        t.at(b, 1, y, x) = (y + 0.5) / h;
      }
  return t;
}

// Area-aligned bilinear resize grid in the sampler's normalized convention.
// Used by the conv-refinement ablation, which has no offset pathway to carry
// the input onto the UV grid.
Tensor resize_flow(int batch, int out_s, int in_h, int in_w) {
  Tensor t = Tensor::zeros({batch, 2, out_s, out_s});
  for (int b = 0; b < batch; ++b)
    for (int y = 0; y < out_s; ++y)
      for (int x = 0; x < out_s; ++x) {
        t.at(b, 0, y, x) = 2.0 * decoupled_base_coord(x, out_s, in_w) / (in_w - 1) - 1.0;
        t.at(b, 1, y, x) = 2.0 * decoupled_base_coord(y, out_s, in_h) / (in_h - 1) - 1.0;
      }
  return t;
}

}  // namespace

Tensor mask_fusion(const Tensor& rgb, const Tensor& flow, const Tensor& mask,
                   const Tensor& image) {
  require(rgb.defined() && rgb.shape().rank == 4 && rgb.shape()[1] == 3,
          "mask_fusion: rgb must be (B,3,S,S)");
  require(mask.defined() && mask.shape().rank == 4 && mask.shape()[1] == 1,
          "mask_fusion: mask must be (B,1,S,S)");
  const Tensor sampled = grid_sample_bilinear(image, flow);
  const Tensor m = broadcast_channel(mask, 3);
  const Tensor inv = broadcast_channel(add_scalar(neg(mask), 1.0), 3);
  return add(mul(m, sampled), mul(inv, rgb));
}

TextureModel::ConvBN TextureModel::conv_bn(const std::string& name, int c_in, int c_out,
                                           Rng& rng) {
  ConvBN l;
  l.w = store_.add_param(name + "/w", he_conv(c_out, c_in, rng));
  l.b = store_.add_param(name + "/b", Tensor::zeros({c_out}, true));
  l.gamma = store_.add_param(name + "/gamma", Tensor::full({c_out}, 1.0, true));
  l.beta = store_.add_param(name + "/beta", Tensor::zeros({c_out}, true));
  l.rmean = store_.add_buffer(name + "/rmean", Tensor::zeros({c_out}));
  l.rvar = store_.add_buffer(name + "/rvar", Tensor::full({c_out}, 1.0));
  return l;
}

TextureModel::AttnSkip TextureModel::attn_skip(const std::string& name, Rng& rng) {
  const int w = cfg_.width;
  AttnSkip a;
  a.wq = store_.add_param(name + "/wq", he_conv(w, w, rng));
  a.bq = store_.add_param(name + "/bq", Tensor::zeros({w}, true));
  a.wk = store_.add_param(name + "/wk", he_conv(w, w, rng));
  a.bk = store_.add_param(name + "/bk", Tensor::zeros({w}, true));
  a.wv = store_.add_param(name + "/wv", he_conv(w, w, rng));
  a.bv = store_.add_param(name + "/bv", Tensor::zeros({w}, true));
  a.wo = store_.add_param(name + "/wo", he_conv(w, w, rng));
  a.bo = store_.add_param(name + "/bo", Tensor::zeros({w}, true));
  a.f1w = store_.add_param(name + "/f1w", he_conv(2 * w, w, rng));
  a.f1b = store_.add_param(name + "/f1b", Tensor::zeros({2 * w}, true));
  a.f2w = store_.add_param(name + "/f2w", he_conv(w, 2 * w, rng));
  a.f2b = store_.add_param(name + "/f2b", Tensor::zeros({w}, true));
  return a;
}

TextureModel::TextureModel(const ModelConfig& cfg, uint64_t seed) : cfg_(cfg) {
  require(cfg.width >= 1 && cfg.tex_size >= 8 && cfg.in_h % 4 == 0 && cfg.in_w % 4 == 0 &&
              cfg.tex_size % 4 == 0,
          "TextureModel: geometry must survive two 2x downsamplings");
  Rng rng(seed);
  const int w = cfg_.width;
  const char* streams[3] = {"backbone/query", "backbone/key", "backbone/value"};
  const int in_ch[3] = {3, 4, 5};
  for (int s = 0; s < 3; ++s) {
    ConvBN* layer = s == 0 ? query_ : (s == 1 ? key_ : value_);
    const std::string base = streams[s];
    layer[0] = conv_bn(base + "/c1", in_ch[s], w, rng);
    layer[1] = conv_bn(base + "/c2", w, w, rng);
    layer[2] = conv_bn(base + "/c3", w, w, rng);
    layer[3] = conv_bn(base + "/c4", w, w, rng);
    layer[4] = conv_bn(base + "/c5", 2 * w, w, rng);
    layer[5] = conv_bn(base + "/c6", 2 * w, w, rng);
  }
  att_[0] = attn_skip("backbone/att_quarter", rng);
  att_[1] = attn_skip("backbone/att_half", rng);
  att_[2] = attn_skip("backbone/att_full", rng);
  head_w_ = store_.add_param("backbone/head/w", he_conv(6, w, rng));
  head_b_ = store_.add_param("backbone/head/b", Tensor::zeros({6}, true));

  if (cfg_.use_refine) {
    if (!cfg_.conv_refine) {
      Tensor ow = Tensor::zeros({18, 2, 3, 3}, true);
      Tensor ob = Tensor::zeros({18}, true);
      init_offset_conv_replicate(ow, ob);
      off_w_ = store_.add_param("refine/offset/w", ow);
      off_b_ = store_.add_param("refine/offset/b", ob);
    }
    r1_ = conv_bn("refine/r1", 4, w, rng);
    r2_ = conv_bn("refine/r2", w + 6, w, rng);
    r3_ = conv_bn("refine/r3", w, w, rng);
    r4_w_ = store_.add_param("refine/r4/w", he_conv(6, w, rng));
    r4_b_ = store_.add_param("refine/r4/b", Tensor::zeros({6}, true));
  }
}

Tensor TextureModel::run_conv_bn(const ConvBN& l, const Tensor& x, bool training) const {
  return relu(batchnorm2d(conv2d(x, l.w, l.b), l.gamma, l.beta, l.rmean, l.rvar, training));
}

Tensor TextureModel::run_attn(const AttnSkip& a, const Tensor& qf, const Tensor& kf,
                              const Tensor& vf, int pool) const {
  Tensor q = conv2d(qf, a.wq, a.bq);
  Tensor k = conv2d(kf, a.wk, a.bk);
  Tensor v = conv2d(vf, a.wv, a.bv);
  for (int f = pool; f > 1; f /= 2) {
    q = avg_pool2x(q);
    k = avg_pool2x(k);
    v = avg_pool2x(v);
  }
  Tensor t = attention_block(q, k, v);
  for (int f = pool; f > 1; f /= 2) t = upsample2x_nearest(t);
  return conv2d(t, a.wo, a.bo);
}

TextureModel::Outputs TextureModel::forward(const Tensor& image, const Tensor& parts,
                                            bool training) {
  require(image.defined() && image.shape().rank == 4 && image.shape()[1] == 3 &&
              image.shape()[2] == cfg_.in_h && image.shape()[3] == cfg_.in_w,
          "TextureModel: image must be (B,3,in_h,in_w)");
  require(parts.defined() && parts.shape().rank == 4 && parts.shape()[1] == 1 &&
              parts.shape()[2] == cfg_.in_h && parts.shape()[3] == cfg_.in_w &&
              parts.shape()[0] == image.shape()[0],
          "TextureModel: parts must be (B,1,in_h,in_w)");
  const int B = image.shape()[0];
  const int S = cfg_.tex_size;

  const Tensor parts_u = mul_scalar(parts, 1.0 / 6.0);
  const Tensor q_in = query_encoding(B, S);
  const Tensor k_in = concat_channels({image, parts_u});
  const Tensor v_in = concat_channels({image, coord_grid(B, cfg_.in_h, cfg_.in_w)});

  // Encoders: f2 and f3 stay around as skip features; p3 is the bottleneck.
  struct Enc {
    Tensor f2, f3, p3;
  };
  auto encode = [&](const ConvBN* c, const Tensor& in) {
    Enc e;
    const Tensor f1 = run_conv_bn(c[0], in, training);
    e.f2 = run_conv_bn(c[1], f1, training);
    e.f3 = run_conv_bn(c[2], avg_pool2x(e.f2), training);
    e.p3 = avg_pool2x(e.f3);
    return e;
  };
  const Enc eq = encode(query_, q_in);
  const Enc ek = encode(key_, k_in);
  const Enc ev = encode(value_, v_in);

  // Image-stream decoders supply the attention keys/values at each scale.
  auto decode = [&](const ConvBN* c, const Enc& e) {
    struct Dec {
      Tensor f4, f5, f6;
    } d;
    d.f4 = run_conv_bn(c[3], e.p3, training);
    d.f5 = run_conv_bn(c[4], concat_channels({upsample2x_nearest(d.f4), e.f3}), training);
    d.f6 = run_conv_bn(c[5], concat_channels({upsample2x_nearest(d.f5), e.f2}), training);
    return d;
  };
  const auto dk = decode(key_, ek);
  const auto dv = decode(value_, ev);

  // Query decoder: attention output summed into the decoded features,
  // then a residual conv feed-forward.
  auto att_ffn = [&](const AttnSkip& a, const Tensor& dec, const Tensor& qf, const Tensor& kf,
                     const Tensor& vf, int pool) {
    Tensor d = add(dec, run_attn(a, qf, kf, vf, pool));
    const Tensor h = conv2d(relu(conv2d(d, a.f1w, a.f1b)), a.f2w, a.f2b);
    return add(d, h);
  };
  // Token pooling keeps every scale's attention near the quarter-scale cost;
  // the projections and feed-forwards still run at their native resolution.
  Tensor d4 = run_conv_bn(query_[3], eq.p3, training);
  d4 = att_ffn(att_[0], d4, eq.p3, dk.f4, dv.f4, 1);
  Tensor d5 = run_conv_bn(query_[4], concat_channels({upsample2x_nearest(d4), eq.f3}), training);
  d5 = att_ffn(att_[1], d5, eq.f3, dk.f5, dv.f5, 2);
  Tensor d6 = run_conv_bn(query_[5], concat_channels({upsample2x_nearest(d5), eq.f2}), training);
  d6 = att_ffn(att_[2], d6, eq.f2, dk.f6, dv.f6, 4);
  const Tensor out6 = conv2d(d6, head_w_, head_b_);

  Outputs o;
  o.intermediate.rgb = tanh_op(slice_channels(out6, 0, 3));
  o.intermediate.flow = tanh_op(slice_channels(out6, 3, 2));
  o.intermediate.mask = sigmoid(slice_channels(out6, 5, 1));
  o.intermediate.fused =
      mask_fusion(o.intermediate.rgb, o.intermediate.flow, o.intermediate.mask, image);

  if (!cfg_.use_refine) {
    o.final_out = o.intermediate;
    return o;
  }

  const Tensor x4 = concat_channels({image, parts_u});
  const Tensor preds6 =
      concat_channels({o.intermediate.rgb, o.intermediate.flow, o.intermediate.mask});
  auto bn_relu = [&](const ConvBN& l, const Tensor& x) {
    return relu(batchnorm2d(x, l.gamma, l.beta, l.rmean, l.rvar, training));
  };
  Tensor h3;
  if (cfg_.conv_refine) {
    const Tensor x4r = grid_sample_bilinear(x4, resize_flow(B, S, cfg_.in_h, cfg_.in_w));
    const Tensor h1 = bn_relu(r1_, conv2d(x4r, r1_.w, r1_.b));
    const Tensor h2 = bn_relu(r2_, conv2d(concat_channels({h1, preds6}), r2_.w, r2_.b));
    h3 = bn_relu(r3_, conv2d(h2, r3_.w, r3_.b));
  } else {
    const Tensor offsets =
        flow_to_offsets(o.intermediate.flow, cfg_.in_h, cfg_.in_w, off_w_, off_b_);
    const Tensor h1 = bn_relu(r1_, deformable_conv2d(x4, offsets, r1_.w, r1_.b));
    const Tensor h2 = bn_relu(r2_, conv2d(concat_channels({h1, preds6}), r2_.w, r2_.b));
    h3 = bn_relu(r3_, deformable_conv2d(h2, offsets, r3_.w, r3_.b));
  }
  const Tensor out6f = conv2d(h3, r4_w_, r4_b_);
  o.final_out.rgb = tanh_op(slice_channels(out6f, 0, 3));
  o.final_out.flow = tanh_op(slice_channels(out6f, 3, 2));
  o.final_out.mask = sigmoid(slice_channels(out6f, 5, 1));
  o.final_out.fused = mask_fusion(o.final_out.rgb, o.final_out.flow, o.final_out.mask, image);
  return o;
}

ConfidenceNet::ConvBN ConfidenceNet::conv_bn(const std::string& name, int c_in, int c_out,
                                             Rng& rng) {
  ConvBN l;
  l.w = store_.add_param(name + "/w", he_conv(c_out, c_in, rng));
  l.b = store_.add_param(name + "/b", Tensor::zeros({c_out}, true));
  l.gamma = store_.add_param(name + "/gamma", Tensor::full({c_out}, 1.0, true));
  l.beta = store_.add_param(name + "/beta", Tensor::zeros({c_out}, true));
  l.rmean = store_.add_buffer(name + "/rmean", Tensor::zeros({c_out}));
  l.rvar = store_.add_buffer(name + "/rvar", Tensor::full({c_out}, 1.0));
  return l;
}

ConfidenceNet::ConfidenceNet(int width, uint64_t seed, int in_h, int in_w)
    : width_(width), in_h_(in_h), in_w_(in_w) {
  require(width >= 1 && in_h % 4 == 0 && in_w % 4 == 0,
          "ConfidenceNet: geometry must survive two 2x downsamplings");
  Rng rng(seed);
  c_[0] = conv_bn("conf/c1", 3, width, rng);
  for (int i = 1; i < 6; ++i)
    c_[i] = conv_bn("conf/c" + std::to_string(i + 1), width, width, rng);
  head_w_ = store_.add_param("conf/head/w", he_conv(1, width, rng));
  head_b_ = store_.add_param("conf/head/b", Tensor::zeros({1}, true));
}

Tensor ConfidenceNet::run_conv_bn(const ConvBN& l, const Tensor& x, bool training) const {
  return relu(batchnorm2d(conv2d(x, l.w, l.b), l.gamma, l.beta, l.rmean, l.rvar, training));
}

Tensor ConfidenceNet::forward(const Tensor& image, bool training) {
  require(image.defined() && image.shape().rank == 4 && image.shape()[1] == 3 &&
              image.shape()[2] == in_h_ && image.shape()[3] == in_w_,
          "ConfidenceNet: image must be (B,3,in_h,in_w)");
  const Tensor f1 = run_conv_bn(c_[0], image, training);
  const Tensor f2 = run_conv_bn(c_[1], f1, training);
  const Tensor f3 = run_conv_bn(c_[2], avg_pool2x(f2), training);
  const Tensor f4 = run_conv_bn(c_[3], avg_pool2x(f3), training);
  const Tensor f5 = run_conv_bn(c_[4], add(upsample2x_nearest(f4), f3), training);
  const Tensor f6 = run_conv_bn(c_[5], add(upsample2x_nearest(f5), f2), training);
  return clamp_min_passthrough(softplus(conv2d(f6, head_w_, head_b_)), 1e-3);
}

}  // namespace uvtex
