#include "dtpdt/synth.hpp"

#include <algorithm>
#include <bit>
#include <cmath>
#include <deque>
#include <fstream>
#include <limits>
#include <numbers>
#include <random>
#include <set>
#include <sstream>

#include <json.hpp>

#include "dtpdt/errors.hpp"

namespace dtpdt {

double Vec3::norm() const { return std::sqrt(dot(*this)); }

Vec3 Vec3::normalized() const {
  const double n = norm();
  return {x / n, y / n, z / n};
}

double Branch::length() const {
  double s = 0.0;
  for (std::size_t i = 1; i < polyline.size(); ++i) s += (polyline[i] - polyline[i - 1]).norm();
  return s;
}

double AirwayTree::total_length() const {
  double s = 0.0;
  for (const auto& b : branches) s += b.length();
  return s;
}

bool AirwayTree::is_leaf(int branch_index) const {
  const int id = branches.at(static_cast<std::size_t>(branch_index)).id;
  return std::none_of(branches.begin(), branches.end(),
                      [id](const Branch& b) { return b.parent_id == id; });
}

std::vector<int> AirwayTree::leaves() const {
  std::vector<int> out;
  for (int i = 0; i < static_cast<int>(branches.size()); ++i) {
    if (is_leaf(i)) out.push_back(i);
  }
  return out;
}

void AirwayTree::validate() const {
  std::set<int> ids;
  for (const auto& b : branches) {
    if (!ids.insert(b.id).second) throw DataError("airway tree: duplicate branch id");
    if (!(b.radius_start > 0.0 && b.radius_end > 0.0)) {
      throw DataError("airway tree: radii must be positive");
    }
    if (b.radius_end > b.radius_start) throw DataError("airway tree: radius increases along branch");
    if (b.polyline.size() < 2) throw DataError("airway tree: branch polyline needs >= 2 points");
  }
  for (const auto& b : branches) {
    if (b.parent_id == kRootParent) continue;
    auto it = std::find_if(branches.begin(), branches.end(),
                           [&](const Branch& p) { return p.id == b.parent_id; });
    if (it == branches.end()) throw DataError("airway tree: unknown parent id");
    if (!(it->polyline.back() == b.polyline.front())) {
      throw DataError("airway tree: child does not start at parent end");
    }
    if (b.radius_start > it->radius_end) throw DataError("airway tree: radius increases at bifurcation");
  }
}

void SynthParams::validate() const {
  if (dims.nx < 8 || dims.ny < 8 || dims.nz < 8) throw ConfigError("synth: dims must be >= 8");
  if (generations < 1) throw ConfigError("synth: generations must be >= 1");
  if (!(root_radius > 0.0)) throw ConfigError("synth: root_radius must be > 0");
  if (!(radius_decay > 0.0 && radius_decay < 1.0)) throw ConfigError("synth: radius_decay must be in (0,1)");
  if (!(length_decay > 0.0 && length_decay < 1.0)) throw ConfigError("synth: length_decay must be in (0,1)");
  if (!(root_length > 0.0)) throw ConfigError("synth: root_length must be > 0");
  if (jitter_deg < 0.0) throw ConfigError("synth: jitter_deg must be >= 0");
}

namespace {

constexpr double kMargin = 2.0;
constexpr double kCenterlineStep = 0.25;

double deg2rad(double d) { return d * std::numbers::pi / 180.0; }

// Rodrigues rotation of v about unit axis k.
Vec3 rotate(const Vec3& v, const Vec3& k, double angle) {
  const double c = std::cos(angle), s = std::sin(angle);
  return v * c + k.cross(v) * s + k * (k.dot(v) * (1.0 - c));
}

Vec3 any_perpendicular(const Vec3& d) {
  const Vec3 ref = std::abs(d.x) < 0.9 ? Vec3{1, 0, 0} : Vec3{0, 1, 0};
  return d.cross(ref).normalized();
}

std::vector<Vec3> straight_polyline(const Vec3& a, const Vec3& b) {
  const double len = (b - a).norm();
  const int n = std::max(1, static_cast<int>(std::ceil(len)));
  std::vector<Vec3> pts;
  pts.reserve(static_cast<std::size_t>(n) + 1);
  for (int i = 0; i <= n; ++i) pts.push_back(a + (b - a) * (static_cast<double>(i) / n));
  pts.back() = b;
  return pts;
}

bool inside_margin(const Vec3& p, double r, Dims d) {
  auto ok = [&](double c, int n) { return c - r >= kMargin && c + r <= n - 1 - kMargin; };
  return ok(p.x, d.nx) && ok(p.y, d.ny) && ok(p.z, d.nz);
}

std::array<int, 3> round_voxel(const Vec3& p) {
  return {static_cast<int>(std::floor(p.x + 0.5)), static_cast<int>(std::floor(p.y + 0.5)),
          static_cast<int>(std::floor(p.z + 0.5))};
}

}  // namespace

GroundTruthBundle generate_tree(const SynthParams& params) {
  params.validate();
  std::mt19937_64 rng(params.seed);
  std::uniform_real_distribution<double> unit(-1.0, 1.0);
  const double jitter = deg2rad(params.jitter_deg);
  const Dims d = params.dims;

  struct Pending {
    int parent_id;
    int generation;
    Vec3 start;
    Vec3 dir;
    Vec3 plane_normal;
    double length;
  };

  AirwayTree tree;
  const Vec3 root_dir = rotate(Vec3{0, 0, -1}, Vec3{1, 0, 0}, jitter * unit(rng) * 0.5);
  const Vec3 root_start{(d.nx - 1) / 2.0, (d.ny - 1) / 2.0,
                        d.nz - 1 - kMargin - params.root_radius - 0.5};
  std::deque<Pending> queue;
  queue.push_back({kRootParent, 0, root_start, root_dir.normalized(),
                   any_perpendicular(root_dir.normalized()), params.root_length});

  while (!queue.empty()) {
    Pending p = queue.front();
    queue.pop_front();
    Branch b;
    b.id = static_cast<int>(tree.branches.size());
    b.parent_id = p.parent_id;
    b.generation = p.generation;
    b.radius_start = params.root_radius * std::pow(params.radius_decay, p.generation);
    b.radius_end = b.radius_start * (1.0 + params.radius_decay) / 2.0;
    const Vec3 end = p.start + p.dir * p.length;
    b.polyline = straight_polyline(p.start, end);
    for (const Vec3& q : b.polyline) {
      if (!inside_margin(q, b.radius_start, d)) {
        throw DataError("synth: tree escapes volume bounds at generation " +
                        std::to_string(p.generation));
      }
    }
    if (p.generation + 1 < params.generations) {
      for (int side : {-1, 1}) {
        const double angle = deg2rad(params.branch_angle_deg) + jitter * unit(rng);
        const Vec3 child_dir = rotate(p.dir, p.plane_normal, side * angle).normalized();
        // Successive bifurcation planes are roughly orthogonal.
        Vec3 next_normal = child_dir.cross(p.plane_normal).normalized();
        next_normal = rotate(next_normal, child_dir, jitter * unit(rng)).normalized();
        queue.push_back({b.id, p.generation + 1, end, child_dir, next_normal,
                         p.length * params.length_decay});
      }
    }
    tree.branches.push_back(std::move(b));
  }
  tree.validate();
  return rasterize_tree(tree, d);
}

std::vector<std::array<int, 3>> branch_centerline_voxels(const Branch& branch, Dims dims) {
  std::vector<std::array<int, 3>> out;
  std::set<std::array<int, 3>> seen;
  auto push = [&](const Vec3& p) {
    const auto v = round_voxel(p);
    if (!dims.contains(v[0], v[1], v[2])) return;
    if (seen.insert(v).second) out.push_back(v);
  };
  for (std::size_t i = 0; i + 1 < branch.polyline.size(); ++i) {
    const Vec3& a = branch.polyline[i];
    const Vec3& b = branch.polyline[i + 1];
    const int n = std::max(1, static_cast<int>(std::ceil((b - a).norm() / kCenterlineStep)));
    for (int k = 0; k <= n; ++k) push(a + (b - a) * (static_cast<double>(k) / n));
  }
  return out;
}

GroundTruthBundle rasterize_tree(const AirwayTree& tree, Dims d, const std::vector<bool>& include) {
  const auto included = [&](std::size_t i) { return include.empty() || include.at(i); };
  const std::size_t n = d.count();
  std::vector<double> mask(n, 0.0), dc(n, std::numeric_limits<double>::infinity()),
      center(n, 0.0);

  for (std::size_t bi = 0; bi < tree.branches.size(); ++bi) {
    if (!included(bi)) continue;
    const Branch& br = tree.branches[bi];
    const double total = br.length();
    double s0 = 0.0;
    for (std::size_t i = 0; i + 1 < br.polyline.size(); ++i) {
      const Vec3 a = br.polyline[i], b = br.polyline[i + 1];
      const Vec3 ab = b - a;
      const double seg = ab.norm();
      const double s1 = s0 + seg;
      auto radius_at = [&](double s) {
        return br.radius_start + (br.radius_end - br.radius_start) * (total > 0 ? s / total : 0.0);
      };
      const double pad = std::ceil(br.radius_start) + 1.0;
      const int x0 = std::max(0, static_cast<int>(std::floor(std::min(a.x, b.x) - pad)));
      const int x1 = std::min(d.nx - 1, static_cast<int>(std::ceil(std::max(a.x, b.x) + pad)));
      const int y0 = std::max(0, static_cast<int>(std::floor(std::min(a.y, b.y) - pad)));
      const int y1 = std::min(d.ny - 1, static_cast<int>(std::ceil(std::max(a.y, b.y) + pad)));
      const int z0 = std::max(0, static_cast<int>(std::floor(std::min(a.z, b.z) - pad)));
      const int z1 = std::min(d.nz - 1, static_cast<int>(std::ceil(std::max(a.z, b.z) + pad)));
      const double ab2 = ab.dot(ab);
      for (int z = z0; z <= z1; ++z)
        for (int y = y0; y <= y1; ++y)
          for (int x = x0; x <= x1; ++x) {
            const Vec3 v{static_cast<double>(x), static_cast<double>(y), static_cast<double>(z)};
            double t = ab2 > 0 ? (v - a).dot(ab) / ab2 : 0.0;
            t = std::clamp(t, 0.0, 1.0);
            const double dist = (v - (a + ab * t)).norm();
            const std::size_t idx = d.index(x, y, z);
            dc[idx] = std::min(dc[idx], dist);
            if (dist <= radius_at(s0 + t * seg)) mask[idx] = 1.0;
          }
      s0 = s1;
    }
    for (const auto& v : branch_centerline_voxels(br, d)) {
      const std::size_t idx = d.index(v[0], v[1], v[2]);
      center[idx] = 1.0;
      mask[idx] = 1.0;
    }
  }

  double dc_max = 0.0;
  for (std::size_t i = 0; i < n; ++i) {
    if (mask[i] == 0.0 || center[i] == 1.0) {
      dc[i] = 0.0;
    } else {
      dc_max = std::max(dc_max, dc[i]);
    }
  }
  GroundTruthBundle out{Volume(d, std::move(mask)), tree, Volume(d, std::move(dc)), dc_max,
                        Volume(d, std::move(center))};
  return out;
}

Volume exact_edt(const Volume& mask, const Volume& boundary) {
  if (mask.dims() != boundary.dims()) throw DataError("exact_edt: shape mismatch");
  const Dims d = mask.dims();
  std::vector<std::array<int, 3>> bvox;
  for (std::size_t i = 0; i < boundary.size(); ++i) {
    if (boundary[i] != 0.0) bvox.push_back(d.coords(i));
  }
  const bool any_fg = mask.count_nonzero() > 0;
  if (any_fg && bvox.empty()) throw DataError("exact_edt: empty boundary with nonempty mask");
  std::vector<double> out(mask.size(), 0.0);
  for (std::size_t i = 0; i < mask.size(); ++i) {
    if (mask[i] == 0.0) continue;
    const auto c = d.coords(i);
    long best = std::numeric_limits<long>::max();
    for (const auto& b : bvox) {
      const long dx = c[0] - b[0], dy = c[1] - b[1], dz = c[2] - b[2];
      best = std::min(best, dx * dx + dy * dy + dz * dz);
    }
    out[i] = std::sqrt(static_cast<double>(best));
  }
  return Volume(d, std::move(out), mask.spacing());
}

namespace {

// Min or max over the 3x3x3 neighbourhood; out-of-grid reads as `outside`.
Volume window_extreme(const Volume& m, bool take_max, double outside) {
  const Dims d = m.dims();
  std::vector<double> out(m.size());
  for (int z = 0; z < d.nz; ++z)
    for (int y = 0; y < d.ny; ++y)
      for (int x = 0; x < d.nx; ++x) {
        double acc = take_max ? -std::numeric_limits<double>::infinity()
                              : std::numeric_limits<double>::infinity();
        for (int oz = -1; oz <= 1; ++oz)
          for (int oy = -1; oy <= 1; ++oy)
            for (int ox = -1; ox <= 1; ++ox) {
              const double v = m.at_or(x + ox, y + oy, z + oz, outside);
              acc = take_max ? std::max(acc, v) : std::min(acc, v);
            }
        out[d.index(x, y, z)] = acc;
      }
  return Volume(d, std::move(out), m.spacing());
}

}  // namespace

Volume hard_dilate(const Volume& mask) { return window_extreme(mask, true, 0.0); }

Volume hard_erode(const Volume& mask) { return window_extreme(mask, false, 0.0); }

Volume hard_boundary(const Volume& mask) {
  return multiply(subtract(hard_dilate(mask), hard_erode(mask)), mask);
}

namespace {

std::vector<double> gaussian_taps(double sigma) {
  const int r = std::max(1, static_cast<int>(std::ceil(3.0 * sigma)));
  std::vector<double> k(static_cast<std::size_t>(2 * r + 1));
  double s = 0.0;
  for (int i = -r; i <= r; ++i) {
    k[static_cast<std::size_t>(i + r)] = std::exp(-0.5 * i * i / (sigma * sigma));
    s += k[static_cast<std::size_t>(i + r)];
  }
  for (double& v : k) v /= s;
  return k;
}

// Separable blur with edge clamping.
std::vector<double> blur(const Volume& v, double sigma) {
  std::vector<double> cur(v.values());
  if (sigma <= 0.0) return cur;
  const auto k = gaussian_taps(sigma);
  const int r = static_cast<int>(k.size() / 2);
  const Dims d = v.dims();
  std::vector<double> next(cur.size());
  for (int axis = 0; axis < 3; ++axis) {
    for (int z = 0; z < d.nz; ++z)
      for (int y = 0; y < d.ny; ++y)
        for (int x = 0; x < d.nx; ++x) {
          double acc = 0.0;
          for (int t = -r; t <= r; ++t) {
            int p[3] = {x, y, z};
            const int lim[3] = {d.nx, d.ny, d.nz};
            p[axis] = std::clamp(p[axis] + t, 0, lim[axis] - 1);
            acc += k[static_cast<std::size_t>(t + r)] * cur[d.index(p[0], p[1], p[2])];
          }
          next[d.index(x, y, z)] = acc;
        }
    std::swap(cur, next);
  }
  return cur;
}

}  // namespace

Volume synthesize_ct(const GroundTruthBundle& bundle, const ImageParams& params,
                     std::uint64_t seed) {
  const Volume& mask = bundle.mask;
  const Volume wall = subtract(hard_dilate(mask), mask);
  const auto lumen = blur(mask, params.blur_sigma);
  const auto shell = blur(wall, params.blur_sigma);
  std::mt19937_64 rng(seed);
  std::normal_distribution<double> noise(0.0, params.noise_hu);
  std::vector<double> hu(mask.size());
  for (std::size_t i = 0; i < hu.size(); ++i) {
    hu[i] = params.tissue_hu + (params.lumen_hu - params.tissue_hu) * lumen[i] +
            (params.wall_hu - params.tissue_hu) * shell[i] + noise(rng);
  }
  return Volume(mask.dims(), std::move(hu), mask.spacing());
}

double normalize_hu(double hu) {
  constexpr double kLo = -1000.0, kHi = 600.0;
  const double c = std::clamp(hu, kLo, kHi);
  return (c - kLo) / (kHi - kLo) * 255.0;
}

Volume normalize_hu(const Volume& hu) {
  std::vector<double> out(hu.size());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = normalize_hu(hu[i]);
  return Volume(hu.dims(), std::move(out), hu.spacing());
}

namespace {

std::filesystem::path sidecar_of(const std::filesystem::path& p) {
  return std::filesystem::path(p.string() + ".json");
}

}  // namespace

void export_volume(const Volume& v, const std::filesystem::path& path) {
  static_assert(std::endian::native == std::endian::little, "little-endian host assumed");
  {
    std::ofstream out(path, std::ios::binary | std::ios::trunc);
    if (!out) throw DataError("export_volume: cannot open " + path.string());
    out.write(reinterpret_cast<const char*>(v.data().data()),
              static_cast<std::streamsize>(v.size() * sizeof(double)));
    if (!out) throw DataError("export_volume: write failed for " + path.string());
  }
  nlohmann::ordered_json j;
  j["dims"] = {v.dims().nx, v.dims().ny, v.dims().nz};
  j["spacing"] = {v.spacing().sx, v.spacing().sy, v.spacing().sz};
  j["dtype"] = "f64";
  j["order"] = "x-fastest";
  std::ofstream side(sidecar_of(path), std::ios::trunc);
  if (!side) throw DataError("export_volume: cannot open sidecar for " + path.string());
  side << j.dump(2) << "\n";
  if (!side) throw DataError("export_volume: sidecar write failed for " + path.string());
}

Volume import_volume(const std::filesystem::path& path, bool hu_clamp) {
  std::ifstream side(sidecar_of(path));
  if (!side) throw DataError("import_volume: missing sidecar for " + path.string());
  nlohmann::json j;
  try {
    side >> j;
  } catch (const nlohmann::json::exception& e) {
    throw DataError("import_volume: malformed sidecar: " + std::string(e.what()));
  }
  if (!j.contains("dims") || !j["dims"].is_array() || j["dims"].size() != 3) {
    throw DataError("import_volume: sidecar dims must be [nx,ny,nz]");
  }
  const std::string dtype = j.value("dtype", "");
  if (dtype != "f64") throw DataError("import_volume: unknown dtype '" + dtype + "'");
  if (j.value("order", "x-fastest") != "x-fastest") {
    throw DataError("import_volume: unsupported order");
  }
  Dims d{j["dims"][0].get<int>(), j["dims"][1].get<int>(), j["dims"][2].get<int>()};
  if (d.nx < 1 || d.ny < 1 || d.nz < 1) throw DataError("import_volume: dims must be >= 1");
  Spacing s;
  if (j.contains("spacing")) {
    s = {j["spacing"][0].get<double>(), j["spacing"][1].get<double>(),
         j["spacing"][2].get<double>()};
  }
  std::ifstream in(path, std::ios::binary | std::ios::ate);
  if (!in) throw DataError("import_volume: cannot open " + path.string());
  const auto bytes = static_cast<std::size_t>(in.tellg());
  if (bytes != d.count() * sizeof(double)) {
    throw DataError("import_volume: sidecar dims do not match file size of " + path.string());
  }
  in.seekg(0);
  std::vector<double> data(d.count());
  in.read(reinterpret_cast<char*>(data.data()), static_cast<std::streamsize>(bytes));
  if (hu_clamp) {
    for (double& v : data) v = normalize_hu(v);
  }
  return Volume(d, std::move(data), s);
}

}  // namespace dtpdt
