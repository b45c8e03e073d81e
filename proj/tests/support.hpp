#pragma once

#include <cmath>
#include <functional>
#include <random>

#include "dtpdt/autodiff.hpp"

namespace testing {

using dtpdt::Dims;
using dtpdt::Tensor;
using dtpdt::Volume;
using dtpdt::ad::DiffNode;

inline Tensor random_tensor(int channels, Dims d, std::mt19937_64& rng, double lo = -1.0,
                            double hi = 1.0) {
  std::uniform_real_distribution<double> u(lo, hi);
  Tensor t(channels, d);
  for (double& v : t.data) v = u(rng);
  return t;
}

inline Volume random_volume(Dims d, std::mt19937_64& rng, double lo = 0.0, double hi = 1.0) {
  return random_tensor(1, d, rng, lo, hi).to_volume();
}

inline Volume random_mask(Dims d, std::mt19937_64& rng, double p = 0.4) {
  std::bernoulli_distribution b(p);
  std::vector<double> v(d.count());
  for (double& x : v) x = b(rng) ? 1.0 : 0.0;
  return Volume(d, std::move(v));
}

struct GradCheck {
  double rel_error = 0.0;
  double analytic_norm = 0.0;
};

// Compares the autodiff gradient of f at x against central differences.
// Error is ||analytic - numeric||_2 / max(||analytic||_2, ||numeric||_2).
inline GradCheck check_gradient(const Tensor& x, const std::function<DiffNode(const DiffNode&)>& f,
                                double h = 1e-5) {
  DiffNode p = dtpdt::ad::parameter(x);
  DiffNode root = f(p);
  dtpdt::ad::backward(root);
  const Tensor analytic = p.grad();

  Tensor probe = x;
  double diff2 = 0.0, a2 = 0.0, n2 = 0.0;
  for (std::size_t i = 0; i < x.size(); ++i) {
    const double keep = probe.data[i];
    probe.data[i] = keep + h;
    const double up = f(dtpdt::ad::constant(probe)).item();
    probe.data[i] = keep - h;
    const double dn = f(dtpdt::ad::constant(probe)).item();
    probe.data[i] = keep;
    const double num = (up - dn) / (2.0 * h);
    diff2 += (analytic.data[i] - num) * (analytic.data[i] - num);
    a2 += analytic.data[i] * analytic.data[i];
    n2 += num * num;
  }
  const double scale = std::max({std::sqrt(a2), std::sqrt(n2), 1e-300});
  return {std::sqrt(diff2) / scale, std::sqrt(a2)};
}

// Brute-force same-size zero-padded correlation, the reference for conv3d.
inline Tensor naive_correlate(const Tensor& x, const dtpdt::ad::Kernel3& k) {
  Tensor y(x.channels, x.dims, 0.0);
  const Dims d = x.dims;
  for (int c = 0; c < x.channels; ++c)
    for (int z = 0; z < d.nz; ++z)
      for (int yy = 0; yy < d.ny; ++yy)
        for (int xx = 0; xx < d.nx; ++xx) {
          double s = 0.0;
          for (int oz = -k.kz() / 2; oz <= k.kz() / 2; ++oz)
            for (int oy = -k.ky() / 2; oy <= k.ky() / 2; ++oy)
              for (int ox = -k.kx() / 2; ox <= k.kx() / 2; ++ox) {
                if (!d.contains(xx + ox, yy + oy, z + oz)) continue;
                s += k.at(ox, oy, oz) *
                     x.data[c * d.count() + d.index(xx + ox, yy + oy, z + oz)];
              }
          y.data[c * d.count() + d.index(xx, yy, z)] = s;
        }
  return y;
}

}  // namespace testing
