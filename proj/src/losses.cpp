#include "dtpdt/losses.hpp"

#include <algorithm>
#include <cmath>

#include "dtpdt/errors.hpp"

namespace dtpdt::loss {

void TverskyParams::validate() const {
  if (!(alpha_t > 0.0 && alpha_t < 1.0 && beta_t > 0.0 && beta_t < 1.0)) {
    throw ConfigError("tversky: alpha_t and beta_t must lie in (0,1)");
  }
  if (std::abs(alpha_t + beta_t - 1.0) > 1e-12) {
    throw ConfigError("tversky: alpha_t + beta_t must equal 1");
  }
}

void WeightMapParams::validate() const {
  if (!(lambda_fg > 0.0)) throw ConfigError("weight map: lambda_fg must be > 0");
  if (!(epsilon > 0.0 && epsilon < 1.0)) throw ConfigError("weight map: epsilon must be in (0,1)");
}

void TpsParams::validate() const {
  if (lambda1 < 0.0 || lambda2 < 0.0) throw ConfigError("tps: lambda1/lambda2 must be >= 0");
}

AucprState::AucprState(double delta0, int m, double nu_lr, double threshold_init)
    : delta0_(delta0), nu_lr_(nu_lr) {
  if (m < 1) throw ConfigError("aucpr: m must be >= 1");
  if (nu_lr < 0.0) throw ConfigError("aucpr: nu_lr must be >= 0");
  anchors_.resize(static_cast<std::size_t>(m));
  nu_.assign(static_cast<std::size_t>(m), 0.0);
  const double t0 = std::clamp(threshold_init, kThresholdLo, kThresholdHi);
  thresholds_ = ad::parameter(Tensor(m, Dims{}, t0));
  set_prior(delta0);
}

void AucprState::set_prior(double delta0) {
  if (!(delta0 > 0.0 && delta0 < 1.0)) throw DataError("aucpr: delta0 must be in (0,1)");
  delta0_ = delta0;
  const int n = m();
  for (int k = 1; k <= n; ++k) {
    anchors_[static_cast<std::size_t>(k - 1)] =
        std::min(kAnchorCap, delta0 + (1.0 - delta0) * k / n);
  }
}

double AucprState::threshold(int k) const {
  return thresholds_.value().data.at(static_cast<std::size_t>(k));
}

void AucprState::clamp_thresholds() {
  for (double& t : thresholds_.mutable_value().data) t = std::clamp(t, kThresholdLo, kThresholdHi);
}

DiffNode tversky_loss(const DiffNode& pred, const Volume& gt, const TverskyParams& p) {
  const double sum_gt = gt.sum();
  if (!(sum_gt > 0.0)) throw DataError("tversky: empty ground truth");
  const DiffNode inter = ad::reduce_sum(pred, gt);
  const DiffNode denom = ad::add_scalar(ad::scale(ad::reduce_sum(pred), p.alpha_t), p.beta_t * sum_gt);
  return ad::add_scalar(ad::neg(ad::div(inter, denom)), 1.0);
}

Volume weight_map(const Volume& mask, const Volume& dc_map, double dc_max,
                  const WeightMapParams& p) {
  if (!(dc_max > 0.0)) throw DataError("weight map: dc_max must be > 0");
  std::vector<double> w(mask.size(), 1.0);
  for (std::size_t i = 0; i < w.size(); ++i) {
    if (mask[i] != 0.0) {
      w[i] = std::max(0.0, -p.lambda_fg * std::log(dc_map[i] / dc_max + p.epsilon));
    }
  }
  return Volume(mask.dims(), std::move(w), mask.spacing());
}

Volume weight_map(const GroundTruthBundle& bundle, const WeightMapParams& p) {
  return weight_map(bundle.mask, bundle.dc_map, bundle.dc_max, p);
}

DiffNode weighted_ce_loss(const DiffNode& pred, const Volume& gt, const Volume& weights) {
  constexpr double kFloor = 1e-7;
  const std::size_t n = gt.size();
  std::vector<double> wpos(n), wneg(n);
  for (std::size_t i = 0; i < n; ++i) {
    wpos[i] = weights[i] * gt[i];
    wneg[i] = weights[i] * (1.0 - gt[i]);
  }
  const Dims d = gt.dims();
  const DiffNode log_p = ad::log(ad::clamp_min(pred, kFloor));
  const DiffNode log_q = ad::log(ad::clamp_min(ad::add_scalar(ad::neg(pred), 1.0), kFloor));
  const DiffNode terms = ad::add(ad::mul_const(log_p, Tensor(1, d, std::move(wpos))),
                                 ad::mul_const(log_q, Tensor(1, d, std::move(wneg))));
  return ad::scale(ad::reduce_sum(terms), -1.0 / static_cast<double>(n));
}

DiffNode topo_com_loss(const DiffNode& pred, const Volume& gt, const Volume& weights,
                       const TverskyParams& tp) {
  return ad::add(tversky_loss(pred, gt, tp), weighted_ce_loss(pred, gt, weights));
}

HingeBounds hinge_bounds(const DiffNode& pred, const Volume& gt, const DiffNode& threshold) {
  const Tensor& v = pred.value();
  if (v.channels != 1 || v.dims != gt.dims()) throw DataError("hinge_bounds: shape mismatch");
  if (!threshold.value().is_scalar()) throw DataError("hinge_bounds: threshold must be scalar");
  const double t = threshold.item();
  // Per voxel: active[i] is true where the hinge is strictly positive.
  auto active = std::make_shared<std::vector<char>>(v.size());
  double tp = 0.0, fp = 0.0;
  for (std::size_t i = 0; i < v.size(); ++i) {
    const double y = gt[i] != 0.0 ? 1.0 : -1.0;
    const double h = 1.0 - y * (v.data[i] - t);
    (*active)[i] = h > 0.0;
    const double hinge = h > 0.0 ? h : 0.0;
    if (y > 0) {
      tp += 1.0 - hinge;
    } else {
      fp += hinge;
    }
  }
  const Volume labels = gt;
  // d/dv of (1 - hinge) on positives is +1 where active; d/dT is -1.
  DiffNode tp_node = ad::make_node(
      "hinge_tp_lower", Tensor::scalar(tp), {pred, threshold},
      [active, labels](ad::detail::NodeImpl& self) {
        const double up = self.grad.data[0];
        auto& pv = *self.parents[0];
        auto& tv = *self.parents[1];
        double dt = 0.0;
        for (std::size_t i = 0; i < active->size(); ++i) {
          if (labels[i] == 0.0 || !(*active)[i]) continue;
          if (pv.requires_grad) pv.grad_buffer().data[i] += up;
          dt -= up;
        }
        if (tv.requires_grad) tv.grad_buffer().data[0] += dt;
      });
  // d/dv of hinge on negatives is +1 where active; d/dT is -1.
  DiffNode fp_node = ad::make_node(
      "hinge_fp_upper", Tensor::scalar(fp), {pred, threshold},
      [active, labels](ad::detail::NodeImpl& self) {
        const double up = self.grad.data[0];
        auto& pv = *self.parents[0];
        auto& tv = *self.parents[1];
        double dt = 0.0;
        for (std::size_t i = 0; i < active->size(); ++i) {
          if (labels[i] != 0.0 || !(*active)[i]) continue;
          if (pv.requires_grad) pv.grad_buffer().data[i] += up;
          dt -= up;
        }
        if (tv.requires_grad) tv.grad_buffer().data[0] += dt;
      });
  return {tp_node, fp_node};
}

HingeBounds hinge_bounds(const DiffNode& pred, const Volume& gt, double threshold) {
  return hinge_bounds(pred, gt, ad::scalar(threshold));
}

DiffNode par_lagrangian(const DiffNode& pred, const Volume& gt, int k, const AucprState& state) {
  const double positives = gt.sum();
  if (!(positives > 0.0)) throw DataError("par_lagrangian: empty positive set");
  const double delta = state.anchor(k);
  const HingeBounds hb = hinge_bounds(pred, gt, state.threshold_node(k));
  const double target = delta * positives;
  const DiffNode precision =
      ad::div(ad::scalar(-target), ad::add_scalar(hb.fp_upper, target));
  const DiffNode constraint = ad::add_scalar(ad::scale(hb.tp_lower, 1.0 / positives), -delta);
  return ad::sub(precision, ad::scale(constraint, state.nu(k)));
}

DiffNode topo_cor_loss(const DiffNode& pred, const Volume& gt, const AucprState& state) {
  DiffNode total = ad::scale(par_lagrangian(pred, gt, 0, state), state.weight(0));
  for (int k = 1; k < state.m(); ++k) {
    total = ad::add(total, ad::scale(par_lagrangian(pred, gt, k, state), state.weight(k)));
  }
  return total;
}

void update_multipliers(const Volume& pred_snapshot, const Volume& gt, AucprState& state) {
  const double positives = gt.sum();
  if (!(positives > 0.0)) throw DataError("update_multipliers: empty positive set");
  const DiffNode snap = ad::constant(pred_snapshot);
  for (int k = 0; k < state.m(); ++k) {
    const double tp = hinge_bounds(snap, gt, state.threshold(k)).tp_lower.item();
    const double violation = state.anchor(k) - tp / positives;
    state.set_nu(k, std::max(0.0, state.nu(k) + state.nu_lr() * violation));
  }
}

DiffNode tps_loss(const DiffNode& pred, const Volume& gt, const Volume& weights,
                  const TverskyParams& tp, const TpsParams& mix, const AucprState& state) {
  return ad::add(ad::scale(topo_com_loss(pred, gt, weights, tp), mix.lambda1),
                 ad::scale(topo_cor_loss(pred, gt, state), mix.lambda2));
}

}  // namespace dtpdt::loss
