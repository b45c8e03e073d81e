#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <filesystem>
#include <random>
#include <set>

#include "dtpdt/errors.hpp"
#include "dtpdt/trainer.hpp"
#include "support.hpp"

using namespace dtpdt;
using namespace dtpdt::train;
using ad::DiffNode;

namespace {

TrainConfig small_config() {
  TrainConfig c;
  c.epochs = 4;
  c.warmup_epochs = 2;
  c.lr_drop_epoch = 3;
  c.crops_per_epoch = 3;
  c.crop = Dims::cube(16);
  c.val_stride = Dims::cube(16);
  c.model.levels = 1;
  c.model.base_channels = 4;
  c.loss.cdt.kernel_size = 7;
  return c;
}

Case small_case(std::uint64_t seed) {
  SynthParams p;
  p.seed = seed;
  p.dims = Dims::cube(24);
  p.generations = 2;
  p.root_radius = 2.5;
  p.root_length = 8;
  for (int attempt = 0;; ++attempt) {
    try {
      p.seed = seed + static_cast<std::uint64_t>(attempt);
      GroundTruthBundle g = generate_tree(p);
      const Volume ct = synthesize_ct(g, ImageParams{}, p.seed);
      return {"c" + std::to_string(seed), network_input(ct), std::move(g)};
    } catch (const DataError&) {
      REQUIRE(attempt < 50);
    }
  }
}

double sum_abs(const Tensor& t) {
  double s = 0.0;
  for (double v : t.data) s += std::abs(v);
  return s;
}

}  // namespace

TEST_CASE("model output shape and input checks") {
  ToyUNet net(ToyUNetConfig{});
  std::mt19937_64 rng(1);
  const DiffNode out = net.forward(ad::constant(testing::random_tensor(1, Dims::cube(32), rng)));
  CHECK(out.value().channels == 2);
  CHECK(out.value().dims == Dims::cube(32));
  CHECK_THROWS_AS(net.forward(ad::constant(testing::random_tensor(1, Dims{32, 32, 30}, rng))), DataError);
  CHECK_THROWS_AS(net.forward(ad::constant(testing::random_tensor(2, Dims::cube(32), rng))), DataError);
  CHECK_THROWS_AS(ToyUNet(ToyUNetConfig{0, 8, true, 1}), ConfigError);
  CHECK_THROWS_AS(ToyUNet(ToyUNetConfig{5, 8, true, 1}), ConfigError);

  std::set<std::string> names;
  std::size_t count = 0;
  for (const auto& p : net.parameters()) {
    names.insert(p.name);
    std::size_t n = 1;
    for (int s : p.shape) n *= static_cast<std::size_t>(s);
    CHECK(n == p.node.value().size());
    count += n;
  }
  CHECK(names.size() == net.parameters().size());
  CHECK(count == net.parameter_count());
}

TEST_CASE("model init is deterministic per seed") {
  ToyUNetConfig c;
  ToyUNet a(c), b(c);
  c.seed = 2;
  ToyUNet d(c);
  CHECK(a.parameters()[0].node.value().data == b.parameters()[0].node.value().data);
  CHECK(a.parameters()[0].node.value().data != d.parameters()[0].node.value().data);
}

TEST_CASE("every parameter receives a gradient") {
  ToyUNet net(ToyUNetConfig{2, 4, true, 3});
  std::mt19937_64 rng(2);
  const DiffNode logits = net.forward(ad::constant(testing::random_tensor(1, Dims::cube(8), rng)));
  const auto [bg, fg] = ad::channel_softmax(ad::select_channel(logits, 0), ad::select_channel(logits, 1));
  const Volume gt = testing::random_mask(Dims::cube(8), rng);
  ad::backward(loss::tversky_loss(fg, gt, {0.3, 0.7}));
  for (const auto& p : net.parameters()) CHECK_MESSAGE(sum_abs(p.node.grad()) > 0.0, p.name);
}

TEST_CASE("model gradient matches finite differences") {
  ToyUNet net(ToyUNetConfig{1, 2, true, 4});
  std::mt19937_64 rng(3);
  const Tensor x = testing::random_tensor(1, Dims::cube(4), rng);
  const Volume gt = testing::random_mask(Dims::cube(4), rng);
  auto f = [&](const DiffNode& in) {
    const DiffNode logits = net.forward(in);
    const auto pr = ad::channel_softmax(ad::select_channel(logits, 0), ad::select_channel(logits, 1));
    return loss::tversky_loss(pr.second, gt, {0.3, 0.7});
  };
  CHECK(testing::check_gradient(x, f).rel_error < 1e-5);

  // first conv weight, by hand
  auto& w = net.parameters()[0].node;
  const DiffNode l = f(ad::constant(x));
  for (auto& p : net.parameters()) p.node.zero_grad();
  ad::backward(f(ad::constant(x)));
  const Tensor analytic = w.grad();
  const double h = 1e-6;
  double num2 = 0, diff2 = 0;
  for (std::size_t i = 0; i < w.value().size(); i += 3) {
    const double keep = w.value().data[i];
    w.mutable_value().data[i] = keep + h;
    const double up = f(ad::constant(x)).item();
    w.mutable_value().data[i] = keep - h;
    const double dn = f(ad::constant(x)).item();
    w.mutable_value().data[i] = keep;
    const double num = (up - dn) / (2 * h);
    num2 += num * num;
    diff2 += (num - analytic.data[i]) * (num - analytic.data[i]);
  }
  CHECK(std::sqrt(diff2 / num2) < 1e-5);
  (void)l;
}

TEST_CASE("schedule") {
  const TrainConfig c;
  CHECK(lr_for_epoch(0, c) == 0.002);
  CHECK(lr_for_epoch(49, c) == 0.002);
  CHECK(lr_for_epoch(50, c) == doctest::Approx(0.0002).epsilon(1e-15));
  CHECK(phase_for_epoch(9, c) == Phase::kWarmup);
  CHECK(phase_for_epoch(10, c) == Phase::kJoint);
  TrainConfig bad = c;
  bad.warmup_epochs = 60;
  CHECK_THROWS_AS(bad.validate(), ConfigError);
  bad = c;
  bad.crop = Dims{32, 32, 30};
  CHECK_THROWS_AS(bad.validate(), ConfigError);
}

TEST_CASE("adam") {
  ToyUNet net(ToyUNetConfig{1, 2, true, 1});
  std::vector<DiffNode> params;
  for (auto& p : net.parameters()) params.push_back(p.node);
  const auto before = params[0].value().data;
  Adam adam;
  adam.step(params, 0.1);  // gradients are zero
  CHECK(params[0].value().data == before);

  // first step moves each weight by lr * g / (|g| + eps)
  const DiffNode w = ad::parameter(Tensor(1, Dims{3, 1, 1}, std::vector<double>{1.0, 2.0, 3.0}));
  ad::backward(ad::reduce_sum(ad::mul_const(w, Volume(Dims{3, 1, 1}, std::vector<double>{0.5, -2.0, 0.0}))));
  std::vector<DiffNode> one{w};
  Adam a2;
  a2.step(one, 0.01);
  CHECK(w.value().data[0] == doctest::Approx(1.0 - 0.01));
  CHECK(w.value().data[1] == doctest::Approx(2.0 + 0.01));
  CHECK(w.value().data[2] == 3.0);
  CHECK(a2.steps() == 1);
}

TEST_CASE("crop extraction") {
  const Case c = small_case(1);
  const Dims s = Dims::cube(8);
  const Crop plain = extract_crop(c, s, {12, 12, 12});
  CHECK(plain.image(0, 0, 0) == c.image(8, 8, 8));
  CHECK(plain.gt.mask(7, 3, 2) == c.gt.mask(15, 11, 10));
  CHECK(plain.gt.dc_max == c.gt.dc_max);

  const Crop flipped = extract_crop(c, s, {12, 12, 12}, 0.0, true, false);
  CHECK(flipped.image(0, 2, 5) == plain.image(7, 2, 5));
  const Crop fy = extract_crop(c, s, {12, 12, 12}, 0.0, false, true);
  CHECK(fy.image(1, 0, 5) == plain.image(1, 7, 5));

  // centre near the corner is clamped inside the volume
  const Crop corner = extract_crop(c, s, {0, 0, 23});
  CHECK(corner.image(0, 0, 7) == c.image(0, 0, 23));
  // a 90 degree rotation maps x onto y
  const Crop rot = extract_crop(c, Dims{9, 9, 4}, {12, 12, 12}, 90.0);
  CHECK(rot.image(8, 4, 0) == c.image(12, 16, 10));
}

TEST_CASE("train step phases and counters") {
  TrainConfig cfg = small_config();
  Trainer t(cfg);
  const Case c = small_case(2);
  t.begin_epoch(0, cfg.lr);
  const auto w = t.train_step(t.sample_crop(c), Phase::kWarmup, cfg.lr);
  CHECK(!w.skipped);
  CHECK(w.topo_com > 0.0);
  CHECK(w.topo_cor == 0.0);
  CHECK(w.cdt == 0.0);
  CHECK(t.instrumentation().topo_cor_evals[0] == 0);
  CHECK(t.instrumentation().cdt_evals[0] == 0);

  t.begin_epoch(1, cfg.lr);
  for (int i = 0; i < 3; ++i) {
    const auto j = t.train_step(t.sample_crop(c), Phase::kJoint, cfg.lr);
    CHECK(!j.skipped);
    CHECK(j.cdt > 0.0);
  }
  CHECK(t.instrumentation().topo_cor_evals[1] == 3);
  CHECK(t.instrumentation().cdt_evals[1] == 3);
  for (double nu : t.aucpr().nus()) CHECK(nu >= 0.0);
  for (int k = 0; k < t.aucpr().m(); ++k) {
    CHECK(t.aucpr().threshold(k) >= loss::AucprState::kThresholdLo);
    CHECK(t.aucpr().threshold(k) <= loss::AucprState::kThresholdHi);
  }

  // crop with no foreground is skipped and counted
  Crop empty = extract_crop(c, cfg.crop, {8, 8, 8});
  empty.gt.mask = Volume(cfg.crop);
  const auto s = t.train_step(empty, Phase::kJoint, cfg.lr);
  CHECK(s.skipped);
  CHECK(t.instrumentation().skipped[1] == 1);
}

TEST_CASE("dice-only mode evaluates only the overlap loss") {
  TrainConfig cfg = small_config();
  cfg.loss.mode = LossMode::kDiceOnly;
  Trainer t(cfg);
  const Case c = small_case(3);
  t.begin_epoch(5, cfg.lr);
  const auto r = t.train_step(t.sample_crop(c), Phase::kJoint, cfg.lr);
  CHECK(r.topo_com > 0.0);
  CHECK(r.topo_com <= 1.0);
  CHECK(t.instrumentation().topo_cor_evals[0] == 0);
  CHECK(t.instrumentation().cdt_evals[0] == 0);
}

TEST_CASE("training is deterministic per seed") {
  const Case c = small_case(4);
  auto run = [&]() {
    Trainer t(small_config());
    std::vector<double> losses;
    for (int i = 0; i < 3; ++i) losses.push_back(t.train_step(t.sample_crop(c), Phase::kJoint, 0.002).total);
    return losses;
  };
  CHECK(run() == run());
}

TEST_CASE("a fixed crop can be overfit") {
  TrainConfig cfg = small_config();
  cfg.augment = false;
  Trainer t(cfg);
  const Case c = small_case(5);
  const Crop crop = t.sample_crop(c);
  const double first = t.train_step(crop, Phase::kWarmup, 0.01).topo_com;
  double last = first;
  for (int i = 0; i < 50; ++i) last = t.train_step(crop, Phase::kWarmup, 0.01).topo_com;
  MESSAGE("topo_com " << first << " -> " << last);
  CHECK(last < 0.5 * first);
}

TEST_CASE("sliding-window prediction averages overlapping windows") {
  ToyUNet net(ToyUNetConfig{1, 2, true, 9});
  std::mt19937_64 rng(5);
  const Dims crop = Dims::cube(8);

  // a volume the size of one window is a single forward pass
  const Volume one = testing::random_volume(crop, rng);
  const Volume p1 = predict_volume(net, one, crop, crop);
  const DiffNode logits = net.forward(ad::constant(one));
  const auto pr = ad::channel_softmax(ad::select_channel(logits, 0), ad::select_channel(logits, 1));
  for (std::size_t i = 0; i < one.size(); ++i) CHECK(p1[i] == doctest::Approx(pr.second.value().data[i]));

  // 12 along x with stride 4: windows at 0 and 4, overlapping on [4, 8)
  const Volume v = testing::random_volume(Dims{12, 8, 8}, rng);
  const Volume p = predict_volume(net, v, crop, Dims{4, 8, 8});
  CHECK(p.dims() == v.dims());
  auto window = [&](int x0) {
    Tensor w(1, crop);
    for (int z = 0; z < 8; ++z)
      for (int y = 0; y < 8; ++y)
        for (int x = 0; x < 8; ++x) w.data[crop.index(x, y, z)] = v(x0 + x, y, z);
    const DiffNode l = net.forward(ad::constant(w));
    return ad::channel_softmax(ad::select_channel(l, 0), ad::select_channel(l, 1)).second.value();
  };
  const Tensor a = window(0), b = window(4);
  CHECK(p(1, 2, 3) == doctest::Approx(a.data[crop.index(1, 2, 3)]));
  CHECK(p(10, 2, 3) == doctest::Approx(b.data[crop.index(6, 2, 3)]));
  CHECK(p(5, 2, 3) == doctest::Approx(0.5 * (a.data[crop.index(5, 2, 3)] + b.data[crop.index(1, 2, 3)])));

  // smaller than a window: padded, then cropped back
  const Volume tiny = testing::random_volume(Dims{5, 8, 6}, rng);
  const Volume pt = predict_volume(net, tiny, crop, crop);
  CHECK(pt.dims() == tiny.dims());
  CHECK(pt.min() >= 0.0);
  CHECK(pt.max() <= 1.0);
  CHECK_THROWS_AS(predict_volume(net, v, crop, Dims{9, 8, 8}), ConfigError);
}

TEST_CASE("checkpoint round trip") {
  const auto dir = std::filesystem::temp_directory_path() / "dtpdt_ckpt";
  std::filesystem::remove_all(dir);
  std::filesystem::create_directories(dir);
  ToyUNet a(ToyUNetConfig{2, 4, true, 1});
  save_checkpoint(a, dir / "m", 7, "abc");
  ToyUNet b(ToyUNetConfig{2, 4, true, 99});
  std::string hash;
  CHECK(load_checkpoint(b, dir / "m", &hash) == 7);
  CHECK(hash == "abc");
  for (std::size_t k = 0; k < a.parameters().size(); ++k)
    CHECK(a.parameters()[k].node.value().data == b.parameters()[k].node.value().data);
  ToyUNet wrong(ToyUNetConfig{2, 6, true, 1});
  CHECK_THROWS_AS(load_checkpoint(wrong, dir / "m"), DataError);
  ToyUNet deeper(ToyUNetConfig{3, 4, true, 1});
  CHECK_THROWS_AS(load_checkpoint(deeper, dir / "m"), DataError);
  CHECK_THROWS_AS(load_checkpoint(a, dir / "missing"), DataError);
}

TEST_CASE("fit follows the warm-up schedule") {
  TrainConfig cfg = small_config();
  Trainer t(cfg);
  const std::vector<Case> train{small_case(6), small_case(7)};
  const std::vector<Case> val{small_case(8)};
  const auto dir = std::filesystem::temp_directory_path() / "dtpdt_fit";
  std::filesystem::remove_all(dir);
  const auto log = t.fit(train, val, dir, "h");
  REQUIRE(log.size() == 4);
  const auto& in = t.instrumentation();
  for (int e = 0; e < 4; ++e) {
    if (e < cfg.warmup_epochs) {
      CHECK(in.topo_cor_evals[e] == 0);
      CHECK(in.cdt_evals[e] == 0);
    } else {
      CHECK(in.topo_cor_evals[e] == in.steps[e]);
      CHECK(in.cdt_evals[e] == in.steps[e]);
      CHECK(in.steps[e] >= 1);
    }
    CHECK(in.topo_com_evals[e] == in.steps[e]);
    CHECK(in.lr[e] == lr_for_epoch(e, cfg));
    CHECK(log[e].lr == in.lr[e]);
  }
  CHECK(log[3].lr == doctest::Approx(cfg.lr / 10));
  CHECK(std::filesystem::exists(dir / "best.rvol"));
  CHECK(std::filesystem::exists(dir / "final.json"));
  CHECK(t.best_epoch() >= 0);
  CHECK_THROWS_AS(t.fit({}, val), DataError);
}

TEST_CASE("mean report") {
  metrics::MetricsReport a, b;
  a.dsc = 0.5;
  b.dsc = 1.0;
  a.td = 0.2;
  b.td = 0.4;
  a.tp = 3;
  b.tp = 4;
  const auto m = mean_report({a, b});
  CHECK(m.dsc == doctest::Approx(0.75));
  CHECK(m.td == doctest::Approx(0.3));
  CHECK(m.tp == 7);
}
