#include "uvtex/metrics.hpp"

#include <json.hpp>

#include <cmath>
#include <sstream>

#include "uvtex/nn_ops.hpp"

namespace uvtex {

namespace {

constexpr int kSsimWindow = 11;
constexpr double kSsimSigma = 1.5;
constexpr double kSsimC1 = 0.01 * 0.01;
constexpr double kSsimC2 = 0.03 * 0.03;
constexpr double kPsnrCap = 99.0;

const Tensor& gaussian_window() {
  static const Tensor k = [] {
    Tensor t = Tensor::zeros(Shape{kSsimWindow, kSsimWindow});
    double s = 0.0;
    const double c = (kSsimWindow - 1) / 2.0;
    for (int y = 0; y < kSsimWindow; ++y)
      for (int x = 0; x < kSsimWindow; ++x) {
        const double d2 = (y - c) * (y - c) + (x - c) * (x - c);
        const double v = std::exp(-d2 / (2.0 * kSsimSigma * kSsimSigma));
        t.ptr()[y * kSsimWindow + x] = v;
        s += v;
      }
    for (int64_t i = 0; i < t.numel(); ++i) t.ptr()[i] /= s;
    return t;
  }();
  return k;
}

Tensor to_rank4(const Tensor& x) {
  if (x.shape().rank == 4) return x;
  require(x.shape().rank == 3, "expected rank-3 or rank-4 image, got " + x.shape().str());
  return reshape(x, Shape{1, x.shape()[0], x.shape()[1], x.shape()[2]});
}

// mean and channel-pooled vector helpers on raw data (evaluation only)
double data_mse(const Tensor& a, const Tensor& b) {
  return (a.data() - b.data()).square().mean();
}

Tensor to_unit(const Tensor& x) { return add_scalar(mul_scalar(x, 0.5), 0.5); }

}  // namespace

Tensor ssim(const Tensor& a, const Tensor& b) {
  require(a.shape() == b.shape(), "ssim: shape mismatch " + a.shape().str() + " vs " +
                                      b.shape().str());
  const Tensor x = to_rank4(a), y = to_rank4(b);
  require(x.shape()[2] >= kSsimWindow && x.shape()[3] >= kSsimWindow,
          "ssim: images smaller than the 11x11 window");
  const Tensor& g = gaussian_window();

  const Tensor mu1 = filter2d_valid(x, g);
  const Tensor mu2 = filter2d_valid(y, g);
  const Tensor s11 = sub(filter2d_valid(mul(x, x), g), mul(mu1, mu1));
  const Tensor s22 = sub(filter2d_valid(mul(y, y), g), mul(mu2, mu2));
  const Tensor s12 = sub(filter2d_valid(mul(x, y), g), mul(mu1, mu2));

  const Tensor n1 = add_scalar(mul_scalar(mul(mu1, mu2), 2.0), kSsimC1);
  const Tensor n2 = add_scalar(mul_scalar(s12, 2.0), kSsimC2);
  const Tensor d1 = add_scalar(add(mul(mu1, mu1), mul(mu2, mu2)), kSsimC1);
  const Tensor d2 = add_scalar(add(s11, s22), kSsimC2);
  const Tensor map = mul(mul(n1, n2), reciprocal(mul(d1, d2)));
  return mean(map);
}

double psnr(const Tensor& a, const Tensor& b) {
  require(a.shape() == b.shape(), "psnr: shape mismatch");
  const double mse = data_mse(a, b);
  if (mse <= 0.0) return kPsnrCap;
  return std::min(kPsnrCap, 10.0 * std::log10(1.0 / mse));
}

double cossim_surrogate(const Tensor& a, const Tensor& b, const FeatureExtractor& phi) {
  const Tensor fa = phi.features(to_rank4(a))[FeatureExtractor::kStages - 1];
  const Tensor fb = phi.features(to_rank4(b))[FeatureExtractor::kStages - 1];
  const int c = fa.shape()[1];
  const int64_t hw = static_cast<int64_t>(fa.shape()[2]) * fa.shape()[3];
  Eigen::VectorXd va(c), vb(c);
  for (int i = 0; i < c; ++i) {
    va[i] = fa.data().segment(i * hw, hw).mean();
    vb[i] = fb.data().segment(i * hw, hw).mean();
  }
  const double denom = std::max(va.norm() * vb.norm(), 1e-12);
  return std::clamp(va.dot(vb) / denom, -1.0, 1.0);
}

double pdist_surrogate(const Tensor& a, const Tensor& b, const FeatureExtractor& phi) {
  const auto fa = phi.features(to_rank4(a));
  const auto fb = phi.features(to_rank4(b));
  double acc = 0.0;
  for (int j = 0; j < FeatureExtractor::kStages; ++j) acc += data_mse(fa[j], fb[j]);
  return acc / FeatureExtractor::kStages;
}

std::string MetricReport::to_json() const {
  nlohmann::json j;
  j["ssim_sv"] = ssim_sv;
  j["ssim_nv"] = ssim_nv;
  j["psnr_sv"] = psnr_sv;
  j["psnr_nv"] = psnr_nv;
  j["cossim_sv"] = cossim_sv;
  j["cossim_nv"] = cossim_nv;
  j["pdist_sv"] = pdist_sv;
  j["pdist_nv"] = pdist_nv;
  j["n_sv"] = n_sv;
  j["n_nv"] = n_nv;
  j["config_fingerprint"] = config_fingerprint;
  return j.dump(2) + "\n";
}

std::string MetricReport::to_csv() const {
  std::ostringstream out;
  out.precision(17);
  out << "id,input_view,target_view,kind,ssim,psnr,cossim,pdist\n";
  for (const SampleMetrics& s : samples)
    out << s.id << ',' << s.input_view << ',' << s.target_view << ','
        << (s.same_view ? "sv" : "nv") << ',' << s.ssim << ',' << s.psnr << ',' << s.cossim << ','
        << s.pdist << '\n';
  return out.str();
}

MetricReport evaluate_sv_nv(const TextureFn& model, const Dataset& ds,
                            const std::vector<int>& identity_indices,
                            const FeatureExtractor& phi, uint64_t config_fingerprint) {
  MetricReport rep;
  rep.config_fingerprint = config_fingerprint;
  double ssim_sv = 0, ssim_nv = 0, psnr_sv = 0, psnr_nv = 0;
  double cos_sv = 0, cos_nv = 0, pd_sv = 0, pd_nv = 0;

  for (int idx : identity_indices) {
    require(idx >= 0 && idx < static_cast<int>(ds.identities.size()),
            "evaluate_sv_nv: identity index out of range");
    const LoadedIdentity& ident = ds.identities[idx];
    const int k_views = static_cast<int>(ident.views.size());
    require(k_views >= 2, "evaluate_sv_nv: identity " + ident.id + " has fewer than 2 views");

    for (int v = 0; v < k_views; ++v) {
      const Tensor texture = model(ident.views[v].image, ident.views[v].parts);
      for (int k = 0; k < k_views; ++k) {
        const LoadedView& target = ident.views[k];
        const Tensor rendered = render_texture(target.raster, texture);
        const Tensor r01 = to_unit(rendered), t01 = to_unit(target.image);

        SampleMetrics row;
        row.id = ident.id;
        row.input_view = v;
        row.target_view = k;
        row.same_view = (k == v);
        row.ssim = ssim(r01, t01).scalar();
        row.psnr = psnr(r01, t01);
        row.cossim = cossim_surrogate(rendered, target.image, phi);
        row.pdist = pdist_surrogate(rendered, target.image, phi);
        rep.samples.push_back(row);

        if (row.same_view) {
          ssim_sv += row.ssim;
          psnr_sv += row.psnr;
          cos_sv += row.cossim;
          pd_sv += row.pdist;
          ++rep.n_sv;
        } else {
          ssim_nv += row.ssim;
          psnr_nv += row.psnr;
          cos_nv += row.cossim;
          pd_nv += row.pdist;
          ++rep.n_nv;
        }
      }
    }
  }

  if (rep.n_sv > 0) {
    rep.ssim_sv = ssim_sv / rep.n_sv;
    rep.psnr_sv = psnr_sv / rep.n_sv;
    rep.cossim_sv = cos_sv / rep.n_sv;
    rep.pdist_sv = pd_sv / rep.n_sv;
  }
  if (rep.n_nv > 0) {
    rep.ssim_nv = ssim_nv / rep.n_nv;
    rep.psnr_nv = psnr_nv / rep.n_nv;
    rep.cossim_nv = cos_nv / rep.n_nv;
    rep.pdist_nv = pd_nv / rep.n_nv;
  }
  return rep;
}

}  // namespace uvtex
