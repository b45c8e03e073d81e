#pragma once

#include <utility>
#include <vector>

#include "dtpdt/autodiff.hpp"
#include "dtpdt/synth.hpp"
#include "dtpdt/volume.hpp"

namespace dtpdt::loss {

using ad::DiffNode;

struct TverskyParams {
  double alpha_t = 0.3;  // weight on sum(pred), i.e. false positives
  double beta_t = 0.7;   // weight on sum(gt), i.e. false negatives
  void validate() const;
};

struct WeightMapParams {
  double lambda_fg = 10.0;
  double epsilon = 1e-6;
  void validate() const;
};

// Recall-anchor grid, Lagrange multipliers and learnable per-anchor
// thresholds of the precision-recall surrogate.
class AucprState {
 public:
  static constexpr double kAnchorCap = 1.0 - 1e-6;
  static constexpr double kThresholdLo = 0.01;
  static constexpr double kThresholdHi = 0.99;

  AucprState(double delta0, int m, double nu_lr = 0.01, double threshold_init = 0.5);

  // Rebuilds the anchors for a new positive-class prior; multipliers and
  // thresholds are kept per anchor index.
  void set_prior(double delta0);

  int m() const { return static_cast<int>(anchors_.size()); }
  double delta0() const { return delta0_; }
  // Recall target of anchor k (0-based index for delta_{k+1}), capped.
  double anchor(int k) const { return anchors_.at(static_cast<std::size_t>(k)); }
  // Riemann weight delta_k - delta_{k-1} on the uncapped grid.
  double weight(int /*k*/) const { return (1.0 - delta0_) / m(); }
  double nu(int k) const { return nu_.at(static_cast<std::size_t>(k)); }
  const std::vector<double>& nus() const { return nu_; }
  void set_nu(int k, double v) { nu_.at(static_cast<std::size_t>(k)) = v; }
  double nu_lr() const { return nu_lr_; }

  double threshold(int k) const;
  // Learnable thresholds as one parameter node (m channels of 1 voxel).
  const DiffNode& thresholds() const { return thresholds_; }
  DiffNode& thresholds() { return thresholds_; }
  DiffNode threshold_node(int k) const { return ad::select_channel(thresholds_, k); }
  void clamp_thresholds();

 private:
  double delta0_;
  double nu_lr_;
  std::vector<double> anchors_;
  std::vector<double> nu_;
  DiffNode thresholds_;
};

struct TpsParams {
  double lambda1 = 1.0;
  double lambda2 = 1.0;
  void validate() const;
};

DiffNode tversky_loss(const DiffNode& pred, const Volume& gt, const TverskyParams& p);

Volume weight_map(const GroundTruthBundle& bundle, const WeightMapParams& p);
Volume weight_map(const Volume& mask, const Volume& dc_map, double dc_max, const WeightMapParams& p);

DiffNode weighted_ce_loss(const DiffNode& pred, const Volume& gt, const Volume& weights);

DiffNode topo_com_loss(const DiffNode& pred, const Volume& gt, const Volume& weights,
                       const TverskyParams& tp);

struct HingeBounds {
  DiffNode tp_lower;
  DiffNode fp_upper;
};

// Hinge relaxations of the zero-one TP/FP counts at threshold T, with
// labels encoded as +1/-1.
HingeBounds hinge_bounds(const DiffNode& pred, const Volume& gt, const DiffNode& threshold);
HingeBounds hinge_bounds(const DiffNode& pred, const Volume& gt, double threshold);

// Lagrangian of precision at recall >= anchor(k), threshold T_k.
DiffNode par_lagrangian(const DiffNode& pred, const Volume& gt, int k, const AucprState& state);

DiffNode topo_cor_loss(const DiffNode& pred, const Volume& gt, const AucprState& state);

// Projected ascent on the multipliers from a gradient-free snapshot.
void update_multipliers(const Volume& pred_snapshot, const Volume& gt, AucprState& state);

DiffNode tps_loss(const DiffNode& pred, const Volume& gt, const Volume& weights,
                  const TverskyParams& tp, const TpsParams& mix, const AucprState& state);

}  // namespace dtpdt::loss
