#pragma once

#include <cstdint>
#include <filesystem>
#include <string>
#include <vector>

#include "dtpdt/volume.hpp"

namespace dtpdt {

struct Vec3 {
  double x = 0.0, y = 0.0, z = 0.0;

  Vec3 operator+(const Vec3& o) const { return {x + o.x, y + o.y, z + o.z}; }
  Vec3 operator-(const Vec3& o) const { return {x - o.x, y - o.y, z - o.z}; }
  Vec3 operator*(double s) const { return {x * s, y * s, z * s}; }
  double dot(const Vec3& o) const { return x * o.x + y * o.y + z * o.z; }
  Vec3 cross(const Vec3& o) const {
    return {y * o.z - z * o.y, z * o.x - x * o.z, x * o.y - y * o.x};
  }
  double norm() const;
  Vec3 normalized() const;
  bool operator==(const Vec3&) const = default;
};

inline constexpr int kRootParent = -1;

struct Branch {
  int id = 0;
  int parent_id = kRootParent;
  std::vector<Vec3> polyline;  // voxel coordinates
  double radius_start = 1.0;
  double radius_end = 1.0;
  int generation = 0;

  double length() const;
};

struct AirwayTree {
  std::vector<Branch> branches;

  double total_length() const;
  bool is_leaf(int branch_index) const;
  std::vector<int> leaves() const;
  // Throws DataError if any structural invariant does not hold.
  void validate() const;
};

struct SynthParams {
  std::uint64_t seed = 1;
  Dims dims = Dims::cube(64);
  int generations = 5;
  double root_radius = 4.0;
  double radius_decay = 0.7;
  double length_decay = 0.75;
  double branch_angle_deg = 35.0;
  double jitter_deg = 8.0;
  double root_length = 20.0;

  void validate() const;
};

struct GroundTruthBundle {
  Volume mask;
  AirwayTree tree;
  Volume dc_map;
  double dc_max = 0.0;
  Volume centerline_mask;
};

// Generates a seeded binary tree and rasterizes it. Throws DataError naming
// the generation when a branch would leave the volume's 2-voxel margin.
GroundTruthBundle generate_tree(const SynthParams& params);

// Rasterizes a tree (or the branches flagged in `include`) as the union of
// tapered capsules plus centerline voxels. Fills dc and centerline too.
GroundTruthBundle rasterize_tree(const AirwayTree& tree, Dims dims,
                                 const std::vector<bool>& include = {});

// Centerline voxels of one branch: densely sampled polyline points rounded
// to the nearest voxel. Duplicates removed, order of first appearance kept.
std::vector<std::array<int, 3>> branch_centerline_voxels(const Branch& branch, Dims dims);

// Brute-force Euclidean distance (voxel units) from every foreground voxel
// to its nearest boundary voxel; zero outside the mask.
Volume exact_edt(const Volume& mask, const Volume& boundary);

// Foreground voxels with at least one background 26-neighbour; voxels
// outside the grid count as background.
Volume hard_boundary(const Volume& mask);
Volume hard_dilate(const Volume& mask);
Volume hard_erode(const Volume& mask);

// Synthetic CT appearance in Hounsfield units. Walls are thin relative to
// the voxel, so their partial-volume contrast against tissue is low.
struct ImageParams {
  double tissue_hu = -850.0;
  double lumen_hu = -1000.0;
  double wall_hu = -650.0;
  double blur_sigma = 1.0;
  double noise_hu = 80.0;
};

Volume synthesize_ct(const GroundTruthBundle& bundle, const ImageParams& params,
                     std::uint64_t seed);

// HU clamp to [-1000, 600] then affine map to [0, 255].
double normalize_hu(double hu);
Volume normalize_hu(const Volume& hu);

// RVOL format: <path> holds little-endian float64 voxels, x-fastest, and
// <path>.json the sidecar {dims, spacing, dtype, order}.
void export_volume(const Volume& v, const std::filesystem::path& path);
Volume import_volume(const std::filesystem::path& path, bool hu_clamp = false);

}  // namespace dtpdt
