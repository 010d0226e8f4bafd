#pragma once

#include "uvtex/tensor.hpp"

namespace uvtex {

using RowMat = Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;

// All convolutions in this codebase are 3x3, stride 1, zero padding 1
// (shape-preserving). Weights are (C_out, C_in, 3, 3); bias is rank-1 (C_out)
// or an undefined tensor for bias-free layers.
Tensor conv2d(const Tensor& x, const Tensor& w, const Tensor& b = Tensor());

// Batch normalization over (batch, h, w) per channel. Biased variance.
// In training mode batch statistics normalize and the running buffers are
// updated in place (not recorded on the tape); in eval mode the running
// buffers normalize. gamma/beta/running_* are rank-1 of size C.
Tensor batchnorm2d(const Tensor& x, const Tensor& gamma, const Tensor& beta,
                   Tensor running_mean, Tensor running_var, bool training,
                   double momentum = 0.1, double eps = 1e-5);

// 2x2 average pooling / nearest-neighbor upsampling. Odd spatial extents are
// a contract violation.
Tensor avg_pool2x(const Tensor& x);
Tensor upsample2x_nearest(const Tensor& x);

// Samples img at flow positions. flow is (B,2,Hg,Wg) in [-1,1] with channel 0
// the normalized x coordinate and channel 1 the normalized y coordinate;
// -1 maps to coordinate 0 and +1 to W-1 (resp. H-1). Out-of-range positions
// clamp to the border. Differentiable w.r.t. both img and flow; the position
// gradient is zero in the clamped region. Nonfinite flow is a contract
// violation.
Tensor grid_sample_bilinear(const Tensor& img, const Tensor& flow);

// Center of input column mapped to output column j when the two grids are
// aligned by area (the decoupled-geometry base grid).
inline double decoupled_base_coord(int j, int out_size, int in_size) {
  return (static_cast<double>(j) + 0.5) * static_cast<double>(in_size) /
             static_cast<double>(out_size) -
         0.5;
}

// Converts a normalized flow field into a per-tap offset field (B,18,Ho,Wo)
// for deformable convolution: the flow target is denormalized to input
// pixels, the base grid is subtracted, and a learned 3x3 conv (2 -> 18)
// refines the result. Channel 2k holds the y offset of tap k, channel 2k+1
// the x offset, k = 3*(dy+1) + (dx+1).
Tensor flow_to_offsets(const Tensor& flow, int in_h, int in_w, const Tensor& conv_w,
                       const Tensor& conv_b);

// Initializes the 2->18 offset conv so every tap starts as a copy of the raw
// flow-derived offset: out channel 2k reads input channel 0 (y) at the center
// tap, 2k+1 reads channel 1 (x); all other weights and the bias are zero.
void init_offset_conv_replicate(Tensor& w, Tensor& b);

// 3x3 deformable convolution with decoupled input/output geometry. For output
// pixel (i,j) tap k samples the input bilinearly at
//   (base_y(i) + dy_k + offset_y, base_x(j) + dx_k + offset_x)
// with taps spaced one input pixel apart and zero padding outside the input.
// offsets is (B,18,Ho,Wo) laid out as in flow_to_offsets. Differentiable
// w.r.t. x, offsets, w, b.
Tensor deformable_conv2d(const Tensor& x, const Tensor& offsets, const Tensor& w,
                         const Tensor& b = Tensor());

// Scaled dot-product attention over flattened spatial tokens:
//   out = softmax(Q K^T / sqrt(d)) V
// q is (B,d,hq,wq); k and v are (B,d,hk,wk). Both token counts must be
// <= 4096. Computed in query-row blocks; the full attention matrix is never
// stored and is recomputed during backward.
Tensor attention_block(const Tensor& q, const Tensor& k, const Tensor& v);

// Row-wise softmax with max subtraction. Exposed so the invariant "rows sum
// to one" is testable against the exact code attention uses.
void softmax_rows_inplace(Eigen::Ref<RowMat> m);

// Per-channel valid-mode correlation with a small constant kernel (kh,kw).
// The kernel carries no gradient; used for fixed windows such as the SSIM
// Gaussian. Output is (B,C,H-kh+1,W-kw+1).
Tensor filter2d_valid(const Tensor& x, const Tensor& kernel);

}  // namespace uvtex
