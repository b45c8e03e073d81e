#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <sstream>

#include "dtpdt/cli_io.hpp"
#include "dtpdt/config.hpp"
#include "dtpdt/errors.hpp"

using namespace dtpdt;
namespace fs = std::filesystem;

namespace {

fs::path scratch(const std::string& tag) {
  auto p = fs::temp_directory_path() / ("dtpdt_cli_" + tag);
  fs::remove_all(p);
  fs::create_directories(p);
  return p;
}

std::string slurp(const fs::path& p) {
  std::ifstream in(p, std::ios::binary);
  std::ostringstream ss;
  ss << in.rdbuf();
  return ss.str();
}

// Small enough to train for a couple of epochs in a test.
RunConfig tiny() {
  return parse_config(R"(
[synth]
dims = 32
generations = 2
root_radius = 2.5
root_length = 10
[dataset]
train_count = 2
val_count = 1
test_count = 1
[train]
epochs = 3
warmup_epochs = 1
lr_drop_epoch = 2
crops_per_epoch = 2
crop = 16
[model]
levels = 1
base_channels = 4
[cdt]
kernel_size = 7
[eval]
stride = 16
)");
}

int run_cli(const std::string& args, const fs::path& err) {
  const std::string cmd = std::string(DTPDT_CLI) + " " + args + " > /dev/null 2> " + err.string();
  const int rc = std::system(cmd.c_str());
  return WIFEXITED(rc) ? WEXITSTATUS(rc) : -1;
}

}  // namespace

TEST_CASE("defaults carry the published constants") {
  const RunConfig c;
  CHECK(c.train.loss.gumbel.tau == 0.1);
  CHECK(c.train.loss.cdt.gamma == -0.3);
  CHECK(c.train.loss.cdt.kernel_size == 31);
  CHECK(c.train.loss.weights.lambda_fg == 10.0);
  CHECK(c.train.loss.anchors == 10);
  CHECK(c.train.lr == 0.002);
  CHECK(c.train.warmup_epochs == 10);
  CHECK(c.train.threshold == 0.5);
  const RunConfig shipped = load_config(fs::path(DTPDT_SOURCE_DIR) / "tools/configs/defaults.cfg");
  CHECK(config_hash(shipped) == config_hash(c));
}

TEST_CASE("config text round trips exactly") {
  RunConfig c;
  c.train.lr = 0.1 + 0.2;
  c.synth.dims = Dims{48, 40, 32};
  c.train.loss.mode = train::LossMode::kDiceOnly;
  c.train.loss.tversky = {0.5, 0.5};
  const RunConfig back = parse_config(to_config_text(c));
  CHECK(back.train.lr == c.train.lr);
  CHECK(back.synth.dims == c.synth.dims);
  CHECK(back.train.loss.mode == train::LossMode::kDiceOnly);
  CHECK(to_config_text(back) == to_config_text(c));
  CHECK(config_hash(back) == config_hash(c));
  CHECK(config_hash(c) != config_hash(RunConfig{}));
  CHECK(config_hash(c).size() == 16);
}

TEST_CASE("config parsing errors") {
  CHECK_THROWS_AS(parse_config("[train]\nnope = 1\n"), ConfigError);
  CHECK_THROWS_AS(parse_config("epochs = 3\n"), ConfigError);  // no section
  CHECK_THROWS_AS(parse_config("[train]\nepochs = three\n"), ConfigError);
  CHECK_THROWS_AS(parse_config("[train\n"), ConfigError);
  CHECK_THROWS_AS(parse_config("[train]\nepochs\n"), ConfigError);
  CHECK_THROWS_AS(parse_config("[loss]\nmode = focal\n"), ConfigError);
  CHECK_THROWS_AS(parse_config("[cdt]\ngamma = 0.3\n"), ConfigError);
  try {
    parse_config("# header\n[train]\n\nepochs = x\n", "my.cfg");
    FAIL("expected an error");
  } catch (const ConfigError& e) {
    CHECK(std::string(e.what()).find("my.cfg:4") != std::string::npos);
  }
  const RunConfig c = parse_config("[train]  # comment\nepochs = 70   # trailing\n");
  CHECK(c.train.epochs == 70);
  CHECK_THROWS_AS(load_config("/nonexistent/x.cfg"), ConfigError);
}

TEST_CASE("dataset plan") {
  const RunConfig c;
  const auto plan = io::plan_dataset(c);
  REQUIRE(plan.size() == 30);
  int counts[3] = {0, 0, 0};
  for (const auto& s : plan) ++counts[static_cast<int>(s.split)];
  CHECK(counts[0] == 20);
  CHECK(counts[1] == 5);
  CHECK(counts[2] == 5);
  CHECK(plan[3].seed == 3001);
  const auto small = io::plan_dataset(c, 20);
  CHECK(small.size() == 20);
  CHECK(small.front().split == io::Split::kTrain);
  CHECK(small.back().split == io::Split::kTest);
  CHECK_THROWS_AS(io::plan_dataset(c, 0), ConfigError);
}

TEST_CASE("mean and sample std") {
  const auto [m, s] = io::mean_std({1.0, 2.0, 3.0, 4.0});
  CHECK(m == 2.5);
  CHECK(s == doctest::Approx(std::sqrt(5.0 / 3.0)));
  CHECK(io::mean_std({7.0}).second == 0.0);
}

TEST_CASE("synth writes a deterministic dataset and refuses to overwrite") {
  const RunConfig c = tiny();
  const auto a = scratch("synth_a"), b = scratch("synth_b");
  const auto ma = io::run_synth(c, a, false);
  const auto mb = io::run_synth(c, b, false);
  CHECK(ma.dump() == mb.dump());
  CHECK(ma["cases"].size() == 4);
  CHECK(ma["config_hash"] == config_hash(c));
  for (const auto& jc : ma["cases"]) {
    for (const auto& [k, f] : jc["files"].items()) CHECK(fs::exists(a / f.get<std::string>()));
    CHECK(jc.contains("seed"));
    CHECK(jc["dims"] == nlohmann::json::array({32, 32, 32}));
  }
  CHECK(slurp(a / "case_001/mask.rvol") == slurp(b / "case_001/mask.rvol"));
  CHECK(io::read_json(a / "case_000/image.rvol.json")["config_hash"] == config_hash(c));

  CHECK_THROWS_AS(io::run_synth(c, a, false), ConfigError);
  CHECK_NOTHROW(io::run_synth(c, a, true));
  CHECK(io::run_synth(c, scratch("synth_c"), false, 3)["cases"].size() == 3);
}

TEST_CASE("loaded splits match in-memory generation") {
  const RunConfig c = tiny();
  const auto dir = scratch("load");
  io::run_synth(c, dir, false);
  for (auto split : {io::Split::kTrain, io::Split::kVal, io::Split::kTest}) {
    const auto disk = io::load_split(dir, split);
    const auto mem = io::generate_split(c, split);
    REQUIRE(disk.size() == mem.size());
    for (std::size_t i = 0; i < disk.size(); ++i) {
      CHECK(disk[i].image == mem[i].image);
      CHECK(disk[i].gt.mask == mem[i].gt.mask);
      CHECK(disk[i].gt.dc_max == mem[i].gt.dc_max);
      CHECK(disk[i].gt.tree.branches.size() == mem[i].gt.tree.branches.size());
    }
  }
  // tamper with a volume
  std::ofstream(dir / "case_000/mask.rvol", std::ios::binary | std::ios::in | std::ios::out) << "x";
  CHECK_THROWS_AS(io::load_split(dir, io::Split::kTrain), DataError);
  CHECK_THROWS_AS(io::load_split(scratch("empty"), io::Split::kTrain), DataError);
}

TEST_CASE("eval of the ground truth against itself") {
  const RunConfig c = tiny();
  const auto dir = scratch("oracle");
  io::run_synth(c, dir, false);
  const auto r = io::run_eval(c, "", dir, io::Split::kTrain, dir / "ev", true);
  for (const char* k : {"dsc", "td", "bd"}) {
    CHECK(r["aggregate"]["raw"][k]["mean"] == 1.0);
    CHECK(r["aggregate"]["lcc"][k]["mean"] == 1.0);
  }
  CHECK(r["aggregate"]["raw"]["fpr"]["mean"] == 0.0);
  CHECK(r["config_hash"] == config_hash(c));
  CHECK(r["threshold"] == 0.5);
  CHECK(fs::exists(dir / "ev/eval.json"));
}

TEST_CASE("train, eval and report on a tiny dataset") {
  const RunConfig c = tiny();
  const auto data = scratch("train_data");
  io::run_synth(c, data, false);
  const auto run = scratch("train_run");
  const auto log = io::run_train(c, data, run, false);
  CHECK(log["epochs"].size() == 3);
  CHECK(log["config_hash"] == config_hash(c));

  std::ifstream csv(run / "train_log.csv");
  std::string header;
  std::getline(csv, header);
  CHECK(header == "epoch,l_topo_com,l_topo_cor,l_cdt,val_dsc,val_td,val_bd,val_fpr,lr");
  int rows = 0;
  for (std::string line; std::getline(csv, line);) ++rows;
  CHECK(rows == 3);
  for (const char* f : {"best.rvol", "best.json", "final.rvol", "final.json", "config.cfg", "train_log.json"})
    CHECK(fs::exists(run / f));
  CHECK(config_hash(load_config(run / "config.cfg")) == config_hash(c));

  // identical config and seeds reproduce the log byte for byte
  const auto run2 = scratch("train_run2");
  io::run_train(c, data, run2, false);
  CHECK(slurp(run / "train_log.csv") == slurp(run2 / "train_log.csv"));
  CHECK(slurp(run / "final.rvol") == slurp(run2 / "final.rvol"));
  CHECK_THROWS_AS(io::run_train(c, data, run, false), ConfigError);

  const auto ev = io::run_eval(c, run / "final", data, io::Split::kTest, run, false);
  REQUIRE(ev["volumes"].size() == 1);
  CHECK(ev["checkpoint_config_hash"] == config_hash(c));
  // aggregate mean is the mean of the per-volume values
  double sum = 0.0;
  for (const auto& v : ev["volumes"]) sum += v["raw"]["dsc"].get<double>();
  CHECK(ev["aggregate"]["raw"]["dsc"]["mean"].get<double>() == doctest::Approx(sum / ev["volumes"].size()));

  RunConfig wider = c;
  wider.train.model.base_channels = 6;
  CHECK_THROWS_AS(io::run_eval(wider, run / "final", data, io::Split::kTest, {}, false), DataError);

  const auto rep = io::run_report(run, run);
  CHECK(rep["config_hash"] == config_hash(c));
  CHECK(rep["epochs"] == 3);
  CHECK(rep.contains("eval"));
}

TEST_CASE("dist writes maps and a bound summary") {
  const RunConfig c = tiny();
  const auto dir = scratch("dist");
  std::vector<double> tube(9 * 5 * 5, 0.0), broken;
  const Dims d{9, 5, 5};
  for (int z = 1; z <= 3; ++z)
    for (int y = 1; y <= 3; ++y)
      for (int x = 0; x < 9; ++x) tube[d.index(x, y, z)] = 1.0;
  broken = tube;
  for (int z = 1; z <= 3; ++z)
    for (int y = 1; y <= 3; ++y) broken[d.index(4, y, z)] = 0.0;
  export_volume(Volume(d, tube), dir / "tube.rvol");
  export_volume(Volume(d, broken), dir / "broken.rvol");

  const auto s = io::run_dist(c, dir / "tube.rvol", dir / "out", dir / "broken.rvol");
  CHECK(s["bound_violations"] == 0);
  CHECK(s["cap_violations"] == 0);
  CHECK(s["max_cdt"].get<double>() <= 3.0);
  CHECK(s["compare"]["dsc_delta"].get<double>() == doctest::Approx(1.0 - 2.0 * 72 / (81 + 72)));
  CHECK(s["compare"]["sum_abs_delta_cdt"].get<double>() > 0.0);
  for (const char* f : {"cdt.rvol", "edt.rvol", "cdt_compare.rvol", "dist_summary.json"}) CHECK(fs::exists(dir / "out" / f));
  const Volume cdt = import_volume(dir / "out/cdt.rvol");
  CHECK(cdt.max() <= 3.0);

  const auto again = io::run_dist(c, dir / "tube.rvol", dir / "out2", dir / "broken.rvol");
  CHECK(slurp(dir / "out/cdt.rvol") == slurp(dir / "out2/cdt.rvol"));
  CHECK(slurp(dir / "out/dist_summary.json").size() > 0);

  export_volume(Volume(d, 0.5), dir / "grey.rvol");
  CHECK_THROWS_AS(io::run_dist(c, dir / "grey.rvol", {}), DataError);
}

TEST_CASE("cli exit codes and error lines") {
  const auto dir = scratch("exit");
  const auto err = dir / "err.txt";
  CHECK(run_cli("frobnicate", err) == 2);
  CHECK(slurp(err).rfind("E_CONFIG: ", 0) == 0);

  std::ofstream(dir / "bad.cfg") << "[train]\nwhat = 1\n";
  CHECK(run_cli("--config " + (dir / "bad.cfg").string() + " synth --out " + (dir / "x").string(), err) == 2);
  const std::string line = slurp(err);
  CHECK(line.rfind("E_CONFIG: ", 0) == 0);
  CHECK(std::count(line.begin(), line.end(), '\n') == 1);

  CHECK(run_cli("dist --input " + (dir / "missing.rvol").string(), err) == 3);
  CHECK(slurp(err).rfind("E_DATA: ", 0) == 0);

  std::ofstream(dir / "tiny.cfg") << to_config_text(tiny());
  CHECK(run_cli("--config " + (dir / "tiny.cfg").string() + " synth --out " + (dir / "ds").string(), err) == 0);
  CHECK(run_cli("--config " + (dir / "tiny.cfg").string() + " synth --out " + (dir / "ds").string(), err) == 2);
  CHECK(run_cli("--config " + (dir / "tiny.cfg").string() + " eval --oracle --split val --data " + (dir / "ds").string() +
                    " --out " + (dir / "ev").string(),
                err) == 0);
  CHECK(fs::exists(dir / "ev/eval.json"));
}
