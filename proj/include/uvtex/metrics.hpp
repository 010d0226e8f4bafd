#pragma once

#include <cstdint>
#include <functional>
#include <string>
#include <vector>

#include "uvtex/losses.hpp"
#include "uvtex/synth_data.hpp"
#include "uvtex/tensor.hpp"

namespace uvtex {

// Differentiable SSIM with the standard 11x11 Gaussian window (sigma 1.5),
// C1 = 0.01^2, C2 = 0.03^2 for dynamic range 1. Inputs (C,H,W) or (B,C,H,W)
// in [0,1]; valid windowing, per-channel maps averaged into one scalar.
// Throws if an extent is smaller than the window.
Tensor ssim(const Tensor& a, const Tensor& b);

// PSNR in dB over [0,1] images; identical images report the 99 dB cap.
double psnr(const Tensor& a, const Tensor& b);

// Cosine similarity of global-average-pooled deepest-stage features.
double cossim_surrogate(const Tensor& a, const Tensor& b, const FeatureExtractor& phi);

// Mean over the 4 stages of per-stage feature MSE; the perceptual-distance
// stand-in reported as "pdist" (not comparable to learned-metric numbers).
double pdist_surrogate(const Tensor& a, const Tensor& b, const FeatureExtractor& phi);

// One evaluated (input view, target view) pair.
struct SampleMetrics {
  std::string id;
  int input_view = 0;
  int target_view = 0;
  bool same_view = false;
  double ssim = 0, psnr = 0, cossim = 0, pdist = 0;
};

struct MetricReport {
  double ssim_sv = 0, ssim_nv = 0;
  double psnr_sv = 0, psnr_nv = 0;
  double cossim_sv = 0, cossim_nv = 0;
  double pdist_sv = 0, pdist_nv = 0;
  int64_t n_sv = 0, n_nv = 0;
  uint64_t config_fingerprint = 0;
  std::vector<SampleMetrics> samples;

  std::string to_json() const;
  std::string to_csv() const;  // per-sample rows
};

// Texture estimator under test: (image (3,H,W), part labels (1,H,W)) ->
// texture (3,S,S). Lets oracle and degenerate models run the same protocol.
using TextureFn = std::function<Tensor(const Tensor& image, const Tensor& parts)>;

// For every identity in `identity_indices` and every view v: estimate the
// texture from view v, then compare renders against the ground-truth images
// at v (SV row) and at every other view (K-1 NV rows). Means are taken over
// all SV rows and all NV rows of the split.
MetricReport evaluate_sv_nv(const TextureFn& model, const Dataset& ds,
                            const std::vector<int>& identity_indices,
                            const FeatureExtractor& phi, uint64_t config_fingerprint = 0);

}  // namespace uvtex
