#pragma once

#include <array>
#include <cstddef>
#include <cstdint>
#include <span>
#include <vector>

namespace dtpdt {

struct Dims {
  int nx = 1;
  int ny = 1;
  int nz = 1;

  std::size_t count() const {
    return static_cast<std::size_t>(nx) * static_cast<std::size_t>(ny) *
           static_cast<std::size_t>(nz);
  }
  bool contains(int x, int y, int z) const {
    return x >= 0 && y >= 0 && z >= 0 && x < nx && y < ny && z < nz;
  }
  // x-fastest linearization.
  std::size_t index(int x, int y, int z) const {
    return (static_cast<std::size_t>(z) * ny + y) * nx + x;
  }
  std::array<int, 3> coords(std::size_t i) const {
    const int x = static_cast<int>(i % nx);
    const int y = static_cast<int>((i / nx) % ny);
    const int z = static_cast<int>(i / (static_cast<std::size_t>(nx) * ny));
    return {x, y, z};
  }
  bool operator==(const Dims&) const = default;

  static Dims cube(int n) { return {n, n, n}; }
};

struct Spacing {
  double sx = 1.0;
  double sy = 1.0;
  double sz = 1.0;
  bool operator==(const Spacing&) const = default;
};

// Dense 3D scalar grid. Immutable once constructed; derive new volumes
// through the free functions below or by building a fresh data vector.
class Volume {
 public:
  Volume() : Volume(Dims{}) {}
  explicit Volume(Dims dims, double fill = 0.0, Spacing spacing = {});
  Volume(Dims dims, std::vector<double> data, Spacing spacing = {});

  const Dims& dims() const { return dims_; }
  const Spacing& spacing() const { return spacing_; }
  std::size_t size() const { return data_.size(); }
  std::span<const double> data() const { return data_; }
  const std::vector<double>& values() const { return data_; }

  double operator[](std::size_t i) const { return data_[i]; }
  double operator()(int x, int y, int z) const { return data_[dims_.index(x, y, z)]; }
  // Out-of-range reads return `outside`.
  double at_or(int x, int y, int z, double outside) const {
    return dims_.contains(x, y, z) ? (*this)(x, y, z) : outside;
  }

  Volume with_spacing(Spacing spacing) const { return Volume(dims_, data_, spacing); }

  double sum() const;
  double max() const;
  double min() const;
  bool is_binary() const;
  std::size_t count_nonzero() const;
  // 64-bit FNV-1a over the raw little-endian bytes of dims and data.
  std::uint64_t checksum() const;

  bool operator==(const Volume& o) const {
    return dims_ == o.dims_ && spacing_ == o.spacing_ && data_ == o.data_;
  }

 private:
  Dims dims_;
  Spacing spacing_;
  std::vector<double> data_;
};

// Multi-channel value carried by the autodiff graph. Channel-major, each
// channel x-fastest. A scalar is one channel of dims 1x1x1.
struct Tensor {
  int channels = 1;
  Dims dims;
  std::vector<double> data;

  Tensor() : data(1, 0.0) {}
  Tensor(int c, Dims d, double fill = 0.0)
      : channels(c), dims(d), data(static_cast<std::size_t>(c) * d.count(), fill) {}
  Tensor(int c, Dims d, std::vector<double> values);

  static Tensor scalar(double v) { return Tensor(1, Dims{}, v); }
  static Tensor from(const Volume& v) { return Tensor(1, v.dims(), v.values()); }

  std::size_t size() const { return data.size(); }
  std::size_t voxels() const { return dims.count(); }
  bool is_scalar() const { return data.size() == 1; }
  bool same_shape(const Tensor& o) const { return channels == o.channels && dims == o.dims; }

  std::span<double> channel(int c) {
    return {data.data() + static_cast<std::size_t>(c) * voxels(), voxels()};
  }
  std::span<const double> channel(int c) const {
    return {data.data() + static_cast<std::size_t>(c) * voxels(), voxels()};
  }

  // One channel copied out as a Volume.
  Volume to_volume(int c = 0, Spacing spacing = {}) const;
};

// Elementwise helpers on hard volumes (no autodiff).
Volume multiply(const Volume& a, const Volume& b);
Volume subtract(const Volume& a, const Volume& b);

}  // namespace dtpdt
