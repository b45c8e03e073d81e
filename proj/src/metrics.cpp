#include "dtpdt/metrics.hpp"

#include <cmath>
#include <stdexcept>
#include <vector>

#include "dtpdt/errors.hpp"

namespace dtpdt::metrics {

namespace {

double ratio_or(double num, double den, double empty) { return den > 0.0 ? num / den : empty; }

void require_tree(const AirwayTree& tree) {
  if (tree.branches.empty()) throw DataError("metrics: empty airway tree");
}

bool inside(const Volume& v, const std::array<int, 3>& c) {
  return v.dims().contains(c[0], c[1], c[2]) && v(c[0], c[1], c[2]) != 0.0;
}

}  // namespace

Volume binarize(const Volume& pred, double threshold) {
  std::vector<double> out(pred.size());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = pred[i] >= threshold ? 1.0 : 0.0;
  return Volume(pred.dims(), std::move(out), pred.spacing());
}

MetricsReport confusion(const Volume& pred_bin, const Volume& gt) {
  if (pred_bin.dims() != gt.dims()) throw DataError("confusion: shape mismatch");
  MetricsReport r;
  for (std::size_t i = 0; i < gt.size(); ++i) {
    const bool p = pred_bin[i] != 0.0;
    const bool g = gt[i] != 0.0;
    if (p && g) ++r.tp;
    else if (p) ++r.fp;
    else if (g) ++r.fn;
    else ++r.tn;
  }
  const double tp = static_cast<double>(r.tp), fp = static_cast<double>(r.fp);
  const double fn = static_cast<double>(r.fn), tn = static_cast<double>(r.tn);
  r.dsc = ratio_or(2.0 * tp, 2.0 * tp + fp + fn, 1.0);
  r.precision = ratio_or(tp, tp + fp, 1.0);
  r.recall = ratio_or(tp, tp + fn, 1.0);
  r.fpr = ratio_or(fp, fp + tn, 0.0);
  return r;
}

double tree_length_detected(const Volume& pred_bin, const AirwayTree& tree) {
  require_tree(tree);
  double total = 0.0, hit = 0.0;
  for (const auto& b : tree.branches) {
    for (std::size_t i = 0; i + 1 < b.polyline.size(); ++i) {
      const Vec3 a = b.polyline[i], c = b.polyline[i + 1];
      const double len = (c - a).norm();
      const Vec3 mid = (a + c) * 0.5;
      const std::array<int, 3> v{static_cast<int>(std::floor(mid.x + 0.5)),
                                 static_cast<int>(std::floor(mid.y + 0.5)),
                                 static_cast<int>(std::floor(mid.z + 0.5))};
      total += len;
      if (inside(pred_bin, v)) hit += len;
    }
  }
  return ratio_or(hit, total, 0.0);
}

double branch_detected(const Volume& pred_bin, const AirwayTree& tree, double frac, int* detected) {
  require_tree(tree);
  if (!(frac > 0.0 && frac <= 1.0)) throw ConfigError("branch_detected: frac must be in (0,1]");
  int found = 0;
  for (const auto& b : tree.branches) {
    const auto voxels = branch_centerline_voxels(b, pred_bin.dims());
    std::size_t in = 0;
    for (const auto& v : voxels) in += inside(pred_bin, v) ? 1 : 0;
    if (!voxels.empty() && static_cast<double>(in) >= frac * static_cast<double>(voxels.size())) {
      ++found;
    }
  }
  if (detected) *detected = found;
  return static_cast<double>(found) / static_cast<double>(tree.branches.size());
}

Volume largest_component(const Volume& mask) {
  const Dims d = mask.dims();
  std::vector<int> label(mask.size(), -1);
  std::vector<std::size_t> stack;
  int best_label = -1;
  std::size_t best_size = 0;
  int next = 0;
  for (std::size_t seed = 0; seed < mask.size(); ++seed) {
    if (mask[seed] == 0.0 || label[seed] >= 0) continue;
    const int id = next++;
    std::size_t size = 0;
    label[seed] = id;
    stack.push_back(seed);
    while (!stack.empty()) {
      const std::size_t cur = stack.back();
      stack.pop_back();
      ++size;
      const auto c = d.coords(cur);
      for (int oz = -1; oz <= 1; ++oz)
        for (int oy = -1; oy <= 1; ++oy)
          for (int ox = -1; ox <= 1; ++ox) {
            const int x = c[0] + ox, y = c[1] + oy, z = c[2] + oz;
            if (!d.contains(x, y, z)) continue;
            const std::size_t n = d.index(x, y, z);
            if (mask[n] != 0.0 && label[n] < 0) {
              label[n] = id;
              stack.push_back(n);
            }
          }
    }
    if (size > best_size) {
      best_size = size;
      best_label = id;
    }
  }
  std::vector<double> out(mask.size(), 0.0);
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = (label[i] == best_label && best_label >= 0) ? 1.0 : 0.0;
  return Volume(d, std::move(out), mask.spacing());
}

MetricsReport evaluate(const Volume& pred_bin, const GroundTruthBundle& gt, double frac,
                       double threshold) {
  MetricsReport r = confusion(pred_bin, gt.mask);
  r.td = tree_length_detected(pred_bin, gt.tree);
  r.bd = branch_detected(pred_bin, gt.tree, frac, &r.branches_detected);
  r.branches_total = static_cast<int>(gt.tree.branches.size());
  r.threshold = threshold;
  return r;
}

}  // namespace dtpdt::metrics
