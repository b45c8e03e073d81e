#include "dtpdt/cdt.hpp"

#include <algorithm>
#include <cmath>
#include <limits>

#include "dtpdt/errors.hpp"
#include "dtpdt/synth.hpp"

namespace dtpdt::cdt {

namespace {
constexpr double kProbFloor = 1e-7;
}

void GumbelParams::validate() const {
  if (!(tau > 0.0)) throw ConfigError("gumbel: tau must be > 0");
}

void CdtParams::validate() const {
  if (!(gamma < 0.0)) throw ConfigError("cdt: gamma must be < 0");
  if (kernel_size < 3 || kernel_size % 2 == 0) throw ConfigError("cdt: kernel_size must be odd and >= 3");
}

GumbelNoise GumbelNoise::zeros(Dims dims) { return {Tensor(1, dims, 0.0), Tensor(1, dims, 0.0)}; }

GumbelNoise GumbelNoise::sample(Dims dims, std::mt19937_64& rng) {
  std::uniform_real_distribution<double> unif(0.0, 1.0);
  auto draw = [&]() {
    double u = unif(rng);
    if (u <= 0.0) u = std::numeric_limits<double>::min();
    return -std::log(-std::log(u));
  };
  GumbelNoise n = zeros(dims);
  for (double& v : n.bg.data) v = draw();
  for (double& v : n.fg.data) v = draw();
  return n;
}

std::pair<DiffNode, DiffNode> gumbel_softmax(const DiffNode& prob_bg, const DiffNode& prob_fg,
                                             const GumbelParams& params, const GumbelNoise& noise) {
  params.validate();
  if (params.eval_mode) {
    const Tensor& b = prob_bg.value();
    const Tensor& f = prob_fg.value();
    Tensor zb(b.channels, b.dims), zf(f.channels, f.dims);
    for (std::size_t i = 0; i < b.size(); ++i) {
      const bool fg = f.data[i] >= b.data[i];
      zf.data[i] = fg ? 1.0 : 0.0;
      zb.data[i] = fg ? 0.0 : 1.0;
    }
    return {ad::constant(std::move(zb)), ad::constant(std::move(zf))};
  }
  const double inv_tau = 1.0 / params.tau;
  auto logits = [&](const DiffNode& p, const Tensor& g) {
    return ad::scale(ad::add_const(ad::log(ad::clamp_min(p, kProbFloor)), g), inv_tau);
  };
  return ad::channel_softmax(logits(prob_bg, noise.bg), logits(prob_fg, noise.fg));
}

DiffNode soft_morphology(Morphology kind, const DiffNode& mask) {
  if (kind == Morphology::kDilation) return ad::maxpool3d(mask);
  return ad::neg(ad::maxpool3d(ad::neg(mask)));
}

DiffNode soft_boundary(const DiffNode& z_fg, const Volume& gt) {
  const DiffNode ring = ad::sub(soft_morphology(Morphology::kDilation, z_fg),
                                soft_morphology(Morphology::kErosion, z_fg));
  return ad::mul_const(ring, gt);
}

ad::Kernel3 build_distance_kernel(const CdtParams& params) {
  params.validate();
  const int k = params.kernel_size;
  const int r = k / 2;
  std::vector<double> w;
  w.reserve(static_cast<std::size_t>(k) * k * k);
  for (int oz = -r; oz <= r; ++oz)
    for (int oy = -r; oy <= r; ++oy)
      for (int ox = -r; ox <= r; ++ox) {
        const double d = std::sqrt(static_cast<double>(ox * ox + oy * oy + oz * oz));
        w.push_back(std::exp(d / params.gamma));
      }
  return ad::Kernel3(k, k, k, std::move(w));
}

double lse_min(std::span<const double> values, double beta) {
  if (values.empty()) throw DataError("lse_min: empty value list");
  if (!(beta < 0.0)) throw ConfigError("lse_min: beta must be < 0");
  const double lo = *std::min_element(values.begin(), values.end());
  double s = 0.0;
  for (double d : values) s += std::exp(beta * (d - lo));
  return lo + std::log(s) / beta;
}

DiffNode cdt_transform(const DiffNode& z_fg, const DiffNode& boundary, const CdtParams& params,
                       const ad::Kernel3& kernel, const Volume* support) {
  params.validate();
  const double floor = std::exp(params.d_cap() / params.gamma);
  const DiffNode smoothed = ad::add_scalar(
      support ? ad::conv3d_support(boundary, kernel, *support) : ad::conv3d(boundary, kernel),
      floor);
  return ad::mul(z_fg, ad::scale(ad::log(smoothed), params.gamma));
}

DiffNode cdt_transform(const DiffNode& z_fg, const DiffNode& boundary, const CdtParams& params) {
  return cdt_transform(z_fg, boundary, params, build_distance_kernel(params));
}

Volume cdt_of_mask(const Volume& mask, const CdtParams& params) {
  const DiffNode out = cdt_transform(ad::constant(mask), ad::constant(hard_boundary(mask)), params,
                                     build_distance_kernel(params), &mask);
  return out.value().to_volume(0, mask.spacing());
}

Volume balance_weights(const Volume& gt) {
  const double n_fg = gt.sum();
  if (!(n_fg > 0.0)) throw DataError("cdt_loss: ground truth has no foreground");
  const double n_bg = static_cast<double>(gt.size()) - n_fg;
  std::vector<double> w(gt.size());
  for (std::size_t i = 0; i < w.size(); ++i) w[i] = gt[i] != 0.0 ? n_bg / n_fg : 1.0;
  return Volume(gt.dims(), std::move(w), gt.spacing());
}

DiffNode cdt_loss(const DiffNode& pred_dist, const Volume& gt_dist, const Volume& gt) {
  if (pred_dist.value().dims != gt.dims() || gt_dist.dims() != gt.dims()) {
    throw DataError("cdt_loss: shape mismatch");
  }
  const Volume w = balance_weights(gt);
  const DiffNode diff = ad::add_const(ad::neg(pred_dist), Tensor::from(gt_dist));
  return ad::scale(ad::reduce_sum(ad::mul_const(ad::square(diff), w)),
                   1.0 / static_cast<double>(gt.size()));
}

}  // namespace dtpdt::cdt
