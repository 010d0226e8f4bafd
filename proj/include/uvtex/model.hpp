#pragma once

#include <cstdint>

#include "uvtex/tensor.hpp"

namespace uvtex {

// Channel width is uniform across every hidden layer of the backbone,
// refinement module and confidence net. 32 is the desk-scale default;
// 128 is the full-scale configuration.
struct ModelConfig {
  int width = 32;
  int tex_size = 128;  // square UV output grid
  int in_h = 128, in_w = 64;
  bool use_refine = true;    // refinement module on/off (off = backbone only)
  bool conv_refine = false;  // ablation: plain convolutions in the refinement module
};

// One prediction branch. rgb/flow pass through tanh, mask through sigmoid,
// fused = mask_fusion(rgb, flow, mask, input image). All rank-4, batch first.
struct TextureOutput {
  Tensor rgb;    // (B,3,S,S)
  Tensor flow;   // (B,2,S,S) normalized input coordinates, channel 0 = x
  Tensor mask;   // (B,1,S,S)
  Tensor fused;  // (B,3,S,S)
};

// T = M * sample(I, F) + (1 - M) * T_RGB, elementwise over the UV grid.
Tensor mask_fusion(const Tensor& rgb, const Tensor& flow, const Tensor& mask,
                   const Tensor& image);

// Texture estimation network. Three input streams (UV color encoding as
// query; image+parts as key; image+coordinate grid as value), each a 6-conv
// encoder-decoder with downsampling after conv 2 and 3 and upsampling after
// conv 4 and 5. At each of the three scales an attention block bridges the
// query encoder to the image streams' decoder features and its output is
// summed into the query decoder, followed by a residual conv feed-forward.
// A 6-channel head yields the intermediate predictions; the refinement
// module (two deformable layers sharing one flow-derived offset field, with
// the intermediate predictions concatenated as a skip) yields the final ones.
class TextureModel {
 public:
  TextureModel(const ModelConfig& cfg, uint64_t seed);

  struct Outputs {
    TextureOutput final_out;      // refinement branch (== intermediate when refinement is off)
    TextureOutput intermediate;   // backbone branch
  };

  // image (B,3,in_h,in_w) in [-1,1]; parts (B,1,in_h,in_w) holding part
  // indices 0..6 (0 = background). training selects batch-norm statistics.
  Outputs forward(const Tensor& image, const Tensor& parts, bool training);

  ParamStore& params() { return store_; }
  const ParamStore& params() const { return store_; }
  const ModelConfig& config() const { return cfg_; }

 private:
  struct ConvBN {
    Tensor w, b, gamma, beta, rmean, rvar;
  };
  struct AttnSkip {
    Tensor wq, bq, wk, bk, wv, bv, wo, bo;  // full-rank token projections
    Tensor f1w, f1b, f2w, f2b;              // conv feed-forward, width -> 2*width -> width
  };

  ConvBN conv_bn(const std::string& name, int c_in, int c_out, Rng& rng);
  AttnSkip attn_skip(const std::string& name, Rng& rng);
  Tensor run_conv_bn(const ConvBN& l, const Tensor& x, bool training) const;
  Tensor run_attn(const AttnSkip& a, const Tensor& qf, const Tensor& kf, const Tensor& vf,
                  int pool) const;

  ModelConfig cfg_;
  ParamStore store_;
  ConvBN query_[6], key_[6], value_[6];
  AttnSkip att_[3];  // index 0 = quarter scale, 1 = half, 2 = full
  Tensor head_w_, head_b_;
  Tensor off_w_, off_b_;  // flow -> per-tap offsets
  ConvBN r1_, r2_, r3_;
  Tensor r4_w_, r4_b_;
};

// Aleatoric-uncertainty head: 6-conv encoder-decoder with additive skips,
// 1-channel head, softplus, floored at 1e-3. Training-time only.
class ConfidenceNet {
 public:
  ConfidenceNet(int width, uint64_t seed, int in_h = 128, int in_w = 64);

  Tensor forward(const Tensor& image, bool training);  // (B,1,in_h,in_w), >= 1e-3

  ParamStore& params() { return store_; }
  const ParamStore& params() const { return store_; }

 private:
  struct ConvBN {
    Tensor w, b, gamma, beta, rmean, rvar;
  };
  ConvBN conv_bn(const std::string& name, int c_in, int c_out, Rng& rng);
  Tensor run_conv_bn(const ConvBN& l, const Tensor& x, bool training) const;

  int width_, in_h_, in_w_;
  ParamStore store_;
  ConvBN c_[6];
  Tensor head_w_, head_b_;
};

}  // namespace uvtex
