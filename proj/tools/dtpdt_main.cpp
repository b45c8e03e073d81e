#include <cstdio>
#include <iostream>
#include <optional>
#include <string>

#include <CLI11.hpp>

#include "dtpdt/cli_io.hpp"
#include "dtpdt/config.hpp"
#include "dtpdt/errors.hpp"

using namespace dtpdt;

namespace {

struct Globals {
  std::string config;
  std::optional<std::uint64_t> seed;
  std::string out;
  bool force = false;
};

RunConfig resolve(const Globals& g) {
  RunConfig cfg = g.config.empty() ? RunConfig{} : load_config(g.config);
  cfg.validate();
  return cfg;
}

std::string one_line(std::string s) {
  for (char& c : s)
    if (c == '\n' || c == '\r') c = ' ';
  return s;
}

void print_aggregate(const nlohmann::ordered_json& agg) {
  for (const char* which : {"raw", "lcc"}) {
    std::printf("%-4s", which);
    for (const char* k : {"dsc", "td", "bd", "fpr"}) {
      const auto& m = agg.at(which).at(k);
      std::printf("  %s %.4f +- %.4f", k, m.at("mean").get<double>(), m.at("std").get<double>());
    }
    std::printf("\n");
  }
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Airway segmentation with topology-preserving losses and a differentiable distance transform"};
  app.require_subcommand(1);
  Globals g;
  app.add_option("--config", g.config, "flat key = value config file")->check(CLI::ExistingFile);
  app.add_option("--seed", g.seed, "overrides [synth] seed for synth, [train] seed for train");
  app.add_option("--out", g.out, "output directory");
  app.add_flag("--force", g.force, "overwrite an existing output");

  auto* synth = app.add_subcommand("synth", "generate a synthetic airway dataset");
  std::optional<int> count;
  std::optional<int> dims;
  synth->add_option("--count", count, "number of cases (splits rescaled)");
  synth->add_option("--dims", dims, "cubic volume size");

  auto* train = app.add_subcommand("train", "train on the train split, validate on val");
  std::string data;
  std::string loss_mode;
  train->add_option("--data", data, "dataset directory")->required();
  train->add_option("--loss", loss_mode, "dtpdt or dice-only")->check(CLI::IsMember({"dtpdt", "dice-only"}));

  auto* eval = app.add_subcommand("eval", "score a checkpoint on a split");
  std::string checkpoint = "";
  std::string split = "test";
  bool oracle = false;
  eval->add_option("--data", data, "dataset directory")->required();
  eval->add_option("--checkpoint", checkpoint, "checkpoint stem, e.g. run/best");
  eval->add_option("--split", split, "train, val or test");
  eval->add_flag("--oracle", oracle, "score the ground truth against itself");

  auto* dist = app.add_subcommand("dist", "CDT and exact EDT maps of a binary volume");
  std::string input, compare;
  dist->add_option("--input", input, "binary RVOL volume")->required();
  dist->add_option("--compare", compare, "second binary volume, e.g. a broken copy");

  auto* report = app.add_subcommand("report", "summarize a run directory");
  std::string run_dir;
  report->add_option("--in", run_dir, "run directory")->required();

  // Global flags may come before or after the verb.
  for (auto* sub : {synth, train, eval, dist, report}) sub->fallthrough();

  try {
    app.parse(argc, argv);
  } catch (const CLI::CallForHelp& e) {
    return app.exit(e);
  } catch (const CLI::CallForAllHelp& e) {
    return app.exit(e);
  } catch (const CLI::ParseError& e) {
    std::fprintf(stderr, "E_CONFIG: %s\n", one_line(e.what()).c_str());
    return static_cast<int>(ExitCode::kConfig);
  }

  try {
    RunConfig cfg = resolve(g);
    const std::string out = g.out.empty() ? "." : g.out;
    if (synth->parsed()) {
      if (g.seed) cfg.synth.seed = *g.seed;
      if (dims) cfg.synth.dims = Dims::cube(*dims);
      cfg.validate();
      const auto m = io::run_synth(cfg, out, g.force, count);
      std::printf("wrote %zu cases to %s (config %s)\n", m.at("cases").size(), out.c_str(),
                  m.at("config_hash").get<std::string>().c_str());
    } else if (train->parsed()) {
      if (g.seed) cfg.train.seed = *g.seed;
      if (loss_mode == "dice-only") cfg.train.loss.mode = train::LossMode::kDiceOnly;
      if (loss_mode == "dtpdt") cfg.train.loss.mode = train::LossMode::kDtpdt;
      cfg.validate();
      const auto log = io::run_train(cfg, data, out, g.force);
      std::printf("trained %zu epochs, best epoch %d (config %s)\n", log.at("epochs").size(),
                  log.at("best_epoch").get<int>(), log.at("config_hash").get<std::string>().c_str());
    } else if (eval->parsed()) {
      if (!oracle && checkpoint.empty()) throw ConfigError("eval: --checkpoint is required unless --oracle is set");
      const auto r = io::run_eval(cfg, checkpoint, data, io::parse_split(split), out, oracle);
      print_aggregate(r.at("aggregate"));
    } else if (dist->parsed()) {
      std::optional<std::filesystem::path> cmp;
      if (!compare.empty()) cmp = compare;
      const auto s = io::run_dist(cfg, input, out, cmp);
      std::printf("max_abs_err %.6f bound_violations %lld\n", s.at("max_abs_err").get<double>(),
                  s.at("bound_violations").get<long long>());
      if (s.contains("compare")) {
        const auto& c = s.at("compare");
        std::printf("dsc_delta %.6f sum_abs_delta_cdt %.6f per_voxel %.6f\n", c.at("dsc_delta").get<double>(),
                    c.at("sum_abs_delta_cdt").get<double>(), c.at("sum_abs_delta_cdt_per_voxel").get<double>());
      }
    } else if (report->parsed()) {
      const auto r = io::run_report(run_dir, g.out);
      std::printf("%s\n", r.dump(2).c_str());
    }
  } catch (const Error& e) {
    std::fprintf(stderr, "%s: %s\n", e.prefix(), one_line(e.what()).c_str());
    return static_cast<int>(e.code());
  } catch (const std::exception& e) {
    std::fprintf(stderr, "E_DATA: %s\n", one_line(e.what()).c_str());
    return static_cast<int>(ExitCode::kData);
  }
  return 0;
}
