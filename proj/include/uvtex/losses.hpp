#pragma once

#include <array>
#include <cstdint>
#include <vector>

#include "uvtex/renderer.hpp"
#include "uvtex/tensor.hpp"

namespace uvtex {

inline constexpr double kSigmaFloor = 1e-3;
inline constexpr uint64_t kPhiSeed = 73001;

// Frozen, fixed-seed 4-stage convolutional pyramid used as the perceptual
// feature extractor for the image losses and the feature-space metrics.
// Each stage is conv3x3 -> ReLU -> 2x average pool; channels 3->16->32->64
// ->128. Weights are buffers, never trained. Pooling is skipped when an
// extent is odd or 1 so small crops remain usable.
class FeatureExtractor {
 public:
  explicit FeatureExtractor(uint64_t seed = kPhiSeed);

  static constexpr int kStages = 4;
  static constexpr std::array<int, kStages> kChannels{16, 32, 64, 128};

  // images: (B,3,H,W). Returns all stage outputs, index j-1 = stage j.
  std::array<Tensor, kStages> features(const Tensor& images) const;
  // Runs only the first `j` stages and returns stage j (1-based).
  Tensor stage(const Tensor& images, int j) const;

 private:
  std::array<Tensor, kStages> w_;
  std::array<Tensor, kStages> b_;
};

struct LossWeights {
  double reid = 5000.0;  // image-feature reconstruction
  double style = 0.4;    // per-part Gram matching
  double face = 0.01;    // face-structure prior
  double cycle = 0.1;
  double url = 1e-3;     // uncertainty-weighted reconstruction
};

// Intermediate-branch supervision weight, linear from 1 to 0 over the first
// half of training.
double w_int_schedule(int64_t step, int64_t total_steps);

// (B,C,H,W) -> (B,C,C); G = X_f X_f^T / (C*H*W) with X_f the (C, H*W)
// flattening. Differentiable.
Tensor gram_matrix(const Tensor& x);

// (B,1,H,W) integer labels (0 = background, 1..P = part) -> (B,P,H,W) binary.
Tensor make_part_masks(const Tensor& labels, int n_parts);

// Nearest resample for constant mask tensors; rejects inputs with gradient.
Tensor nearest_resize(const Tensor& x, int out_h, int out_w);

// Sum over stages j=1..4 of ||phi_j(img) - phi_j(ref)||^2, summed over batch.
Tensor reid_loss(const Tensor& img, const Tensor& ref, const FeatureExtractor& phi);

// Sum over parts of squared Gram distance of masked stage-1 features; masks
// are nearest-resized to the feature resolution. Summed over batch.
Tensor part_style_loss(const Tensor& img, const Tensor& ref, const Tensor& masks_img,
                       const Tensor& masks_ref, const FeatureExtractor& phi);

// Face rectangle of the atlas, (B,3,S,S)/(3,S,S) -> (B,3,fh,fw)/(3,fh,fw).
Tensor face_crop(const Tensor& texture);

// -(1/N) sum_i ssim(patch, bank[i]) per sample, summed over batch. Patches
// are face crops in [-1,1]; SSIM is evaluated after mapping to [0,1].
Tensor face_structure_loss(const Tensor& face_patches, const std::vector<Tensor>& bank_patches);

// w.reid * reid + w.style * style + w.face * face(face_crop(texture)).
Tensor base_loss(const Tensor& img, const Tensor& ref, const Tensor& masks_img,
                 const Tensor& masks_ref, const Tensor& texture,
                 const std::vector<Tensor>& bank_patches, const FeatureExtractor& phi,
                 const LossWeights& w);

// Laplacian negative log likelihood: sum over pixels of ln(sqrt(2) sigma) +
// sqrt(2) * sum_c |img-ref| / sigma. sigma (B,1,H,W) is shared across the
// image channels and must respect the kSigmaFloor contract.
Tensor uncertainty_recon_loss(const Tensor& img, const Tensor& ref, const Tensor& sigma);

// Per-sample Euclidean norm ||t_first - t_second||_2, summed over batch.
// Callers wanting the ablation stop-gradient pass t_second.detach_copy().
Tensor cycle_loss(const Tensor& t_first, const Tensor& t_second);

// One supervision view per batch sample: ground-truth images and part masks
// plus the rasterization the prediction is rendered through. render_masks
// are the renderer-side part masks (identical to masks unless the geometry
// is deliberately jittered).
struct ViewBatch {
  std::vector<const RasterMap*> rasters;
  Tensor images;        // (B,3,H,W)
  Tensor masks;         // (B,P,H,W)
  Tensor render_masks;  // (B,P,H,W)
};

struct TotalLossConfig {
  LossWeights weights;
  bool multi_view = true;   // adds the novel-view base term (and enables cycle)
  bool use_cycle = true;
  bool use_url = true;
  bool intermediate = true;  // supervise the pre-refinement texture
  int64_t step = 0;
  int64_t total_steps = 1;
};

struct ModelOutputsForLoss {
  Tensor texture_final;         // (B,3,S,S) fused output texture
  Tensor texture_intermediate;  // (B,3,S,S) pre-refinement texture
  Tensor sigma;                 // (B,1,H,W) confidence map (url only)
  Tensor texture_second;        // (B,3,S,S) re-estimated texture (cycle only)
};

// Raw per-term values are batch means before their lambda weights; total
// applies the weights. total_tensor is the differentiable total.
struct LossBreakdown {
  double base_sv = 0, base_nv = 0, cycle = 0, url = 0, inter_sv = 0, inter_nv = 0;
  double w_int = 0;
  double total = 0;
  Tensor total_tensor;
};

// Assembles the full objective. Throws ContractViolation naming the first
// non-finite term. novel_view may be null only when !cfg.multi_view.
LossBreakdown total_loss(const ViewBatch& input_view, const ViewBatch* novel_view,
                         const ModelOutputsForLoss& out, const std::vector<Tensor>& bank_patches,
                         const FeatureExtractor& phi, const TotalLossConfig& cfg);

}  // namespace uvtex
