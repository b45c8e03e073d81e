#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <cmath>
#include <filesystem>
#include <fstream>
#include <random>

#include "dtpdt/errors.hpp"
#include "dtpdt/synth.hpp"
#include "support.hpp"

using namespace dtpdt;

namespace {

Volume cube_mask(Dims d, int lo, int hi) {
  std::vector<double> v(d.count(), 0.0);
  for (int z = lo; z <= hi; ++z)
    for (int y = lo; y <= hi; ++y)
      for (int x = lo; x <= hi; ++x) v[d.index(x, y, z)] = 1.0;
  return Volume(d, v);
}

// Distance from p to segment ab, written out independently of the generator.
double seg_dist(Vec3 p, Vec3 a, Vec3 b) {
  const double abx = b.x - a.x, aby = b.y - a.y, abz = b.z - a.z;
  const double len2 = abx * abx + aby * aby + abz * abz;
  double t = len2 > 0 ? ((p.x - a.x) * abx + (p.y - a.y) * aby + (p.z - a.z) * abz) / len2 : 0.0;
  t = std::clamp(t, 0.0, 1.0);
  const double dx = p.x - (a.x + t * abx), dy = p.y - (a.y + t * aby), dz = p.z - (a.z + t * abz);
  return std::sqrt(dx * dx + dy * dy + dz * dz);
}

std::filesystem::path scratch_dir(const std::string& tag) {
  auto p = std::filesystem::temp_directory_path() / ("dtpdt_synth_" + tag);
  std::filesystem::remove_all(p);
  std::filesystem::create_directories(p);
  return p;
}

}  // namespace

TEST_CASE("branch counts follow a full binary tree") {
  SynthParams p;
  p.generations = 1;
  const auto one = generate_tree(p);
  CHECK(one.tree.branches.size() == 1);
  p.generations = 3;
  const auto three = generate_tree(p);
  CHECK(three.tree.branches.size() == 7);
  CHECK(three.tree.leaves().size() == 4);
}

TEST_CASE("generation is deterministic per seed") {
  SynthParams p;
  p.seed = 7;
  p.generations = 4;
  const auto a = generate_tree(p);
  const auto b = generate_tree(p);
  CHECK(a.mask.checksum() == b.mask.checksum());
  CHECK(a.dc_map == b.dc_map);
  p.seed = 8;
  const auto c = generate_tree(p);
  CHECK(a.mask.checksum() != c.mask.checksum());
}

TEST_CASE("tree structural invariants") {
  for (std::uint64_t seed = 1; seed <= 6; ++seed) {
    SynthParams p;
    p.seed = seed;
    GroundTruthBundle g;
    try {
      g = generate_tree(p);
    } catch (const DataError&) {
      continue;
    }
    CHECK_NOTHROW(g.tree.validate());
    for (const auto& b : g.tree.branches) {
      CHECK(b.radius_start > 0.0);
      CHECK(b.radius_end <= b.radius_start);
      if (b.parent_id == kRootParent) continue;
      const Branch& parent = g.tree.branches[static_cast<std::size_t>(b.parent_id)];
      CHECK(b.polyline.front() == parent.polyline.back());
      CHECK(b.radius_start <= parent.radius_end + 1e-12);
      CHECK(b.generation == parent.generation + 1);
    }
  }
}

TEST_CASE("bundle invariants: mask, dc map and centerline agree") {
  SynthParams p;
  p.seed = 3;
  p.generations = 4;
  const auto g = generate_tree(p);
  CHECK(g.mask.is_binary());
  for (std::size_t i = 0; i < g.mask.size(); ++i) {
    if (g.centerline_mask[i] != 0.0) CHECK(g.mask[i] == 1.0);
    if (g.mask[i] != 0.0) {
      CHECK(g.dc_map[i] <= g.dc_max + 1e-9);
      CHECK((g.dc_map[i] == 0.0) == (g.centerline_mask[i] != 0.0));
    } else {
      CHECK(g.dc_map[i] == 0.0);
    }
  }
}

TEST_CASE("rasterization agrees with an independent capsule oracle") {
  SynthParams p;
  p.seed = 5;
  p.generations = 3;
  const auto g = generate_tree(p);
  const Dims d = g.mask.dims();
  int mismatches = 0;
  for (int z = 0; z < d.nz; z += 3)
    for (int y = 0; y < d.ny; y += 3)
      for (int x = 0; x < d.nx; x += 3) {
        const Vec3 q{double(x), double(y), double(z)};
        bool inside = false;
        for (const auto& b : g.tree.branches) {
          const double total = b.length();
          double run = 0.0;
          for (std::size_t s = 0; s + 1 < b.polyline.size(); ++s) {
            const Vec3 a = b.polyline[s], c = b.polyline[s + 1];
            const double seg = (c - a).norm();
            // Tapered radius along the arc; test both ends conservatively.
            const double r0 = b.radius_start + (b.radius_end - b.radius_start) * run / total;
            const double r1 = b.radius_start + (b.radius_end - b.radius_start) * (run + seg) / total;
            if (seg_dist(q, a, c) <= std::min(r0, r1) - 1e-6) inside = true;
            run += seg;
          }
        }
        if (inside && g.mask(x, y, z) == 0.0) ++mismatches;
      }
  CHECK(mismatches == 0);
}

TEST_CASE("leaf radius follows the decay law") {
  SynthParams p;
  p.seed = 2;
  p.generations = 3;
  const auto g = generate_tree(p);
  for (int leaf : g.tree.leaves()) {
    const Branch& b = g.tree.branches[static_cast<std::size_t>(leaf)];
    const double expect = p.root_radius * std::pow(p.radius_decay, p.generations - 1);
    CHECK(b.radius_start == doctest::Approx(expect).epsilon(0.35));
  }
}

TEST_CASE("escaping tree names the generation") {
  SynthParams p;
  p.dims = Dims::cube(24);
  p.root_length = 40.0;
  try {
    generate_tree(p);
    FAIL("expected an error");
  } catch (const DataError& e) {
    CHECK(std::string(e.what()).find("generation") != std::string::npos);
  }
}

TEST_CASE("invalid params are config errors") {
  SynthParams p;
  p.radius_decay = 1.5;
  CHECK_THROWS_AS(generate_tree(p), ConfigError);
  p = SynthParams{};
  p.generations = 0;
  CHECK_THROWS_AS(generate_tree(p), ConfigError);
}

TEST_CASE("exact edt on small cubes") {
  const Volume one = cube_mask(Dims::cube(5), 2, 2);
  CHECK(exact_edt(one, one)(2, 2, 2) == 0.0);

  const Volume c3 = cube_mask(Dims::cube(7), 2, 4);
  const Volume b3 = hard_boundary(c3);
  CHECK(b3.sum() == 26.0);
  CHECK(exact_edt(c3, b3)(3, 3, 3) == doctest::Approx(1.0));

  const Volume c5 = cube_mask(Dims::cube(9), 2, 6);
  const Volume b5 = hard_boundary(c5);
  CHECK(b5.sum() == 98.0);
  CHECK(exact_edt(c5, b5)(4, 4, 4) == doctest::Approx(2.0));
  CHECK(exact_edt(c5, b5)(0, 0, 0) == 0.0);
}

TEST_CASE("exact edt rejects an empty boundary") {
  const Volume c = cube_mask(Dims::cube(5), 1, 3);
  CHECK_THROWS_AS(exact_edt(c, Volume(Dims::cube(5))), DataError);
}

TEST_CASE("exact edt commutes with axis permutation") {
  std::mt19937_64 rng(21);
  const Dims d{6, 5, 4};
  const Volume m = testing::random_mask(d, rng, 0.6);
  const Volume e = exact_edt(m, hard_boundary(m));
  // Swap x and z.
  const Dims dt{d.nz, d.ny, d.nx};
  std::vector<double> mt(d.count());
  for (int z = 0; z < d.nz; ++z)
    for (int y = 0; y < d.ny; ++y)
      for (int x = 0; x < d.nx; ++x) mt[dt.index(z, y, x)] = m(x, y, z);
  const Volume mtv(dt, mt);
  const Volume et = exact_edt(mtv, hard_boundary(mtv));
  for (int z = 0; z < d.nz; ++z)
    for (int y = 0; y < d.ny; ++y)
      for (int x = 0; x < d.nx; ++x) CHECK(et(z, y, x) == doctest::Approx(e(x, y, z)));
}

TEST_CASE("hard boundary cases") {
  const Volume single = cube_mask(Dims::cube(5), 2, 2);
  CHECK(hard_boundary(single) == single);

  const Volume full(Dims::cube(4), 1.0);
  const Volume shell = hard_boundary(full);
  CHECK(shell.sum() == 64.0 - 8.0);
  CHECK(shell(1, 1, 1) == 0.0);
  CHECK(shell(0, 2, 2) == 1.0);

  std::mt19937_64 rng(4);
  const Volume m = testing::random_mask(Dims::cube(7), rng, 0.7);
  const Volume b = hard_boundary(m);
  const Volume er = hard_erode(m);
  for (std::size_t i = 0; i < m.size(); ++i) {
    if (b[i] != 0.0) {
      CHECK(m[i] == 1.0);
      CHECK(er[i] == 0.0);
    }
  }
}

TEST_CASE("hu normalization") {
  CHECK(normalize_hu(-1000.0) == 0.0);
  CHECK(normalize_hu(600.0) == 255.0);
  CHECK(normalize_hu(-200.0) == doctest::Approx(127.5));
  CHECK(normalize_hu(2000.0) == 255.0);
  CHECK(normalize_hu(-3000.0) == 0.0);
}

TEST_CASE("rvol round trip is bit exact") {
  const auto dir = scratch_dir("rt");
  std::mt19937_64 rng(1);
  const Volume v = testing::random_volume(Dims::cube(8), rng, -1e3, 1e3).with_spacing({0.5, 0.5, 1.0});
  export_volume(v, dir / "v.rvol");
  const Volume back = import_volume(dir / "v.rvol");
  CHECK(back == v);
  CHECK(back.spacing() == Spacing{0.5, 0.5, 1.0});
  CHECK(back.checksum() == v.checksum());
  CHECK(std::filesystem::exists(dir / "v.rvol.json"));
}

TEST_CASE("rvol import applies the hu clamp") {
  const auto dir = scratch_dir("hu");
  const Volume v(Dims{4, 1, 1}, std::vector<double>{-1000, 600, -200, 2000});
  export_volume(v, dir / "ct.rvol");
  const Volume n = import_volume(dir / "ct.rvol", true);
  CHECK(n.values() == std::vector<double>{0.0, 255.0, 127.5, 255.0});
}

TEST_CASE("rvol import rejects bad sidecars") {
  const auto dir = scratch_dir("bad");
  export_volume(Volume(Dims::cube(2), 1.0), dir / "a.rvol");
  {
    std::ofstream side(dir / "a.rvol.json");
    side << R"({"dims":[3,2,2],"spacing":[1,1,1],"dtype":"f64","order":"x-fastest"})";
  }
  CHECK_THROWS_AS(import_volume(dir / "a.rvol"), DataError);
  {
    std::ofstream side(dir / "a.rvol.json");
    side << R"({"dims":[2,2,2],"spacing":[1,1,1],"dtype":"f32","order":"x-fastest"})";
  }
  CHECK_THROWS_AS(import_volume(dir / "a.rvol"), DataError);
  CHECK_THROWS_AS(import_volume(dir / "missing.rvol"), DataError);
}

TEST_CASE("synthetic ct is deterministic and darker in the lumen") {
  SynthParams p;
  p.seed = 4;
  p.generations = 4;
  const auto g = generate_tree(p);
  const Volume a = synthesize_ct(g, ImageParams{}, 9);
  const Volume b = synthesize_ct(g, ImageParams{}, 9);
  CHECK(a.checksum() == b.checksum());
  double lumen = 0.0, other = 0.0;
  std::size_t nl = 0, no = 0;
  for (std::size_t i = 0; i < a.size(); ++i) {
    if (g.centerline_mask[i] != 0.0) {
      lumen += a[i];
      ++nl;
    } else if (g.mask[i] == 0.0) {
      other += a[i];
      ++no;
    }
  }
  CHECK(lumen / nl < other / no);
}
