#include "dtpdt/volume.hpp"

#include <algorithm>
#include <bit>
#include <cstring>
#include <limits>
#include <numeric>
#include <stdexcept>
#include <string>

namespace dtpdt {

namespace {

void check_dims(const Dims& d) {
  if (d.nx < 1 || d.ny < 1 || d.nz < 1) {
    throw std::invalid_argument("volume dims must all be >= 1");
  }
}

void check_spacing(const Spacing& s) {
  if (!(s.sx > 0.0 && s.sy > 0.0 && s.sz > 0.0)) {
    throw std::invalid_argument("volume spacing components must be > 0");
  }
}

constexpr std::uint64_t kFnvOffset = 1469598103934665603ULL;
constexpr std::uint64_t kFnvPrime = 1099511628211ULL;

void fnv_bytes(std::uint64_t& h, const void* p, std::size_t n) {
  const auto* b = static_cast<const unsigned char*>(p);
  for (std::size_t i = 0; i < n; ++i) {
    h ^= b[i];
    h *= kFnvPrime;
  }
}

}  // namespace

Volume::Volume(Dims dims, double fill, Spacing spacing)
    : dims_(dims), spacing_(spacing) {
  check_dims(dims);
  check_spacing(spacing);
  data_.assign(dims.count(), fill);
}

Volume::Volume(Dims dims, std::vector<double> data, Spacing spacing)
    : dims_(dims), spacing_(spacing), data_(std::move(data)) {
  check_dims(dims);
  check_spacing(spacing);
  if (data_.size() != dims.count()) {
    throw std::invalid_argument("volume data length " + std::to_string(data_.size()) +
                                " != nx*ny*nz " + std::to_string(dims.count()));
  }
}

double Volume::sum() const { return std::accumulate(data_.begin(), data_.end(), 0.0); }

double Volume::max() const { return *std::max_element(data_.begin(), data_.end()); }

double Volume::min() const { return *std::min_element(data_.begin(), data_.end()); }

bool Volume::is_binary() const {
  return std::all_of(data_.begin(), data_.end(), [](double v) { return v == 0.0 || v == 1.0; });
}

std::size_t Volume::count_nonzero() const {
  return static_cast<std::size_t>(
      std::count_if(data_.begin(), data_.end(), [](double v) { return v != 0.0; }));
}

std::uint64_t Volume::checksum() const {
  static_assert(std::endian::native == std::endian::little, "little-endian host assumed");
  std::uint64_t h = kFnvOffset;
  const std::int32_t d[3] = {dims_.nx, dims_.ny, dims_.nz};
  fnv_bytes(h, d, sizeof(d));
  fnv_bytes(h, data_.data(), data_.size() * sizeof(double));
  return h;
}

Tensor::Tensor(int c, Dims d, std::vector<double> values)
    : channels(c), dims(d), data(std::move(values)) {
  if (data.size() != static_cast<std::size_t>(c) * d.count()) {
    throw std::invalid_argument("tensor data length does not match channels*dims");
  }
}

Volume Tensor::to_volume(int c, Spacing spacing) const {
  if (c < 0 || c >= channels) throw std::out_of_range("tensor channel out of range");
  auto ch = channel(c);
  return Volume(dims, std::vector<double>(ch.begin(), ch.end()), spacing);
}

Volume multiply(const Volume& a, const Volume& b) {
  if (a.dims() != b.dims()) throw std::invalid_argument("multiply: shape mismatch");
  std::vector<double> out(a.size());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = a[i] * b[i];
  return Volume(a.dims(), std::move(out), a.spacing());
}

Volume subtract(const Volume& a, const Volume& b) {
  if (a.dims() != b.dims()) throw std::invalid_argument("subtract: shape mismatch");
  std::vector<double> out(a.size());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = a[i] - b[i];
  return Volume(a.dims(), std::move(out), a.spacing());
}

}  // namespace dtpdt
