#pragma once

#include <random>
#include <span>
#include <utility>

#include "dtpdt/autodiff.hpp"
#include "dtpdt/volume.hpp"

namespace dtpdt::cdt {

using ad::DiffNode;

struct GumbelParams {
  double tau = 0.1;
  bool eval_mode = false;
  void validate() const;
};

// Gumbel noise for the background and foreground channels.
struct GumbelNoise {
  Tensor bg;
  Tensor fg;

  static GumbelNoise zeros(Dims dims);
  // g = -ln(-ln u), u ~ Uniform(0,1).
  static GumbelNoise sample(Dims dims, std::mt19937_64& rng);
};

struct CdtParams {
  double gamma = -0.3;
  int kernel_size = 31;

  void validate() const;
  double d_cap() const { return static_cast<double>(kernel_size / 2); }
};

enum class Morphology { kErosion, kDilation };

// Relaxed one-hot (bg, fg) pair. In eval mode returns the hard argmax with
// ties going to foreground.
std::pair<DiffNode, DiffNode> gumbel_softmax(const DiffNode& prob_bg, const DiffNode& prob_fg,
                                             const GumbelParams& params, const GumbelNoise& noise);

DiffNode soft_morphology(Morphology kind, const DiffNode& mask);

// (dilation - erosion) of the soft foreground, masked by the ground truth.
DiffNode soft_boundary(const DiffNode& z_fg, const Volume& gt);

// Taps hold exp(d / gamma) with d the Euclidean offset from the centre.
ad::Kernel3 build_distance_kernel(const CdtParams& params);

// (1/beta) ln sum exp(beta d_i), evaluated with a min shift.
double lse_min(std::span<const double> values, double beta);

// z_fg * gamma * ln(boundary (*) kernel + exp(d_cap / gamma)).
// When the boundary is known to vanish outside `support` (the ground truth
// for soft_boundary), passing it makes the convolution sparse.
DiffNode cdt_transform(const DiffNode& z_fg, const DiffNode& boundary, const CdtParams& params);
DiffNode cdt_transform(const DiffNode& z_fg, const DiffNode& boundary, const CdtParams& params,
                       const ad::Kernel3& kernel, const Volume* support = nullptr);

// Distance map of a hard mask through the same operator, boundary from
// hard morphology.
Volume cdt_of_mask(const Volume& mask, const CdtParams& params);

// Foreground/background balance weights: N_bg/N_fg on foreground, 1 elsewhere.
Volume balance_weights(const Volume& gt);

// sum_i w_i (gt_dist_i - pred_dist_i)^2 / N.
DiffNode cdt_loss(const DiffNode& pred_dist, const Volume& gt_dist, const Volume& gt);

}  // namespace dtpdt::cdt
