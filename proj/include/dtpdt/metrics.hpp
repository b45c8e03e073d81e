#pragma once

#include <cstdint>

#include "dtpdt/synth.hpp"
#include "dtpdt/volume.hpp"

namespace dtpdt::metrics {

struct MetricsReport {
  double dsc = 0.0;
  double td = 0.0;
  double bd = 0.0;
  double fpr = 0.0;
  double precision = 0.0;
  double recall = 0.0;
  std::uint64_t tp = 0, fp = 0, tn = 0, fn = 0;
  int branches_total = 0;
  int branches_detected = 0;
  double threshold = 0.5;
};

// 1 where pred >= threshold.
Volume binarize(const Volume& pred, double threshold);

// Voxel confusion counts with DSC, FPR = fp/(fp+tn), precision and recall.
// A rate with an empty denominator is reported as 1 for dsc, precision and
// recall, and 0 for fpr.
MetricsReport confusion(const Volume& pred_bin, const Volume& gt);

// Length-weighted fraction of centerline segments whose rounded midpoint
// lies inside the prediction.
double tree_length_detected(const Volume& pred_bin, const AirwayTree& tree);

// Fraction of branches with at least `frac` of their centerline voxels
// inside the prediction. `detected` receives the count when non-null.
double branch_detected(const Volume& pred_bin, const AirwayTree& tree, double frac = 0.8,
                       int* detected = nullptr);

// Largest 26-connected foreground component; ties go to the component
// whose first voxel comes first in scan order.
Volume largest_component(const Volume& mask);

// Full report for a binary prediction against a ground-truth bundle.
MetricsReport evaluate(const Volume& pred_bin, const GroundTruthBundle& gt, double frac = 0.8,
                       double threshold = 0.5);

}  // namespace dtpdt::metrics
