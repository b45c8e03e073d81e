#include "dtpdt/cli_io.hpp"

#include <chrono>
#include <cmath>
#include <cstdio>
#include <ctime>
#include <fstream>
#include <iostream>

#include "dtpdt/cdt.hpp"
#include "dtpdt/errors.hpp"
#include "dtpdt/metrics.hpp"

namespace dtpdt::io {

using nlohmann::json;
using nlohmann::ordered_json;

namespace {

// Stays below the 1000-seed stride between cases so their seed ranges never overlap.
constexpr int kMaxAttempts = 1000;
constexpr std::uint64_t kCtSalt = 0x5bd1e995ULL;

std::string hex64(std::uint64_t v) {
  char buf[17];
  std::snprintf(buf, sizeof buf, "%016llx", static_cast<unsigned long long>(v));
  return buf;
}

// Sidecar gets the config hash next to the layout fields.
void export_tagged(const Volume& v, const fs::path& path, const std::string& hash) {
  export_volume(v, path);
  const fs::path side(path.string() + ".json");
  json j = read_json(side);
  ordered_json o;
  for (const char* k : {"dims", "spacing", "dtype", "order"}) o[k] = j[k];
  o["config_hash"] = hash;
  write_json(side, o);
}

void ensure_dir(const fs::path& p) {
  std::error_code ec;
  fs::create_directories(p, ec);
  if (ec || !fs::is_directory(p)) throw DataError("cannot create directory " + p.string());
}

ordered_json dims_json(Dims d) { return ordered_json::array({d.nx, d.ny, d.nz}); }

Dims dims_from(const json& j) { return Dims{j.at(0).get<int>(), j.at(1).get<int>(), j.at(2).get<int>()}; }

std::string utc_now() {
  const std::time_t t = std::time(nullptr);
  char buf[32];
  std::strftime(buf, sizeof buf, "%Y-%m-%dT%H:%M:%SZ", std::gmtime(&t));
  return buf;
}

// Boundary voxel counts in cubic windows via a 3D summed-area table.
class WindowCounter {
 public:
  explicit WindowCounter(const Volume& b) : d_(b.dims()), s_((d_.nx + 1) * std::size_t(d_.ny + 1) * (d_.nz + 1), 0) {
    for (int z = 0; z < d_.nz; ++z)
      for (int y = 0; y < d_.ny; ++y)
        for (int x = 0; x < d_.nx; ++x) {
          at(x + 1, y + 1, z + 1) = (b(x, y, z) != 0.0 ? 1 : 0) + at(x, y + 1, z + 1) + at(x + 1, y, z + 1) +
                                    at(x + 1, y + 1, z) - at(x, y, z + 1) - at(x, y + 1, z) -
                                    at(x + 1, y, z) + at(x, y, z);
        }
  }
  long count(int x, int y, int z, int r) const {
    const int x0 = std::max(0, x - r), x1 = std::min(d_.nx, x + r + 1);
    const int y0 = std::max(0, y - r), y1 = std::min(d_.ny, y + r + 1);
    const int z0 = std::max(0, z - r), z1 = std::min(d_.nz, z + r + 1);
    return get(x1, y1, z1) - get(x0, y1, z1) - get(x1, y0, z1) - get(x1, y1, z0) + get(x0, y0, z1) +
           get(x0, y1, z0) + get(x1, y0, z0) - get(x0, y0, z0);
  }

 private:
  long& at(int x, int y, int z) { return s_[(std::size_t(z) * (d_.ny + 1) + y) * (d_.nx + 1) + x]; }
  long get(int x, int y, int z) const { return s_[(std::size_t(z) * (d_.ny + 1) + y) * (d_.nx + 1) + x]; }
  Dims d_;
  std::vector<long> s_;
};

Volume read_binary(const fs::path& p) {
  const Volume v = import_volume(p);
  if (!v.is_binary()) throw DataError("dist: input is not binary: " + p.string());
  return v;
}

}  // namespace

const char* split_name(Split s) {
  switch (s) {
    case Split::kTrain: return "train";
    case Split::kVal: return "val";
    case Split::kTest: return "test";
  }
  return "?";
}

Split parse_split(const std::string& s) {
  if (s == "train") return Split::kTrain;
  if (s == "val") return Split::kVal;
  if (s == "test") return Split::kTest;
  throw ConfigError("split must be train, val or test, got '" + s + "'");
}

std::vector<CaseSpec> plan_dataset(const RunConfig& cfg, std::optional<int> count) {
  cfg.dataset.validate();
  int n_train = cfg.dataset.train_count, n_val = cfg.dataset.val_count, n_test = cfg.dataset.test_count;
  if (count && *count != cfg.dataset.total()) {
    if (*count < 1) throw ConfigError("synth: count must be >= 1");
    const double total = cfg.dataset.total();
    n_val = static_cast<int>(std::lround(*count * cfg.dataset.val_count / total));
    n_test = static_cast<int>(std::lround(*count * cfg.dataset.test_count / total));
    n_train = *count - n_val - n_test;
    if (n_train < 1) {
      n_train = 1;
      n_test = std::max(0, *count - 1 - n_val);
      n_val = *count - 1 - n_test;
    }
  }
  std::vector<CaseSpec> out;
  int i = 0;
  for (auto [split, n] : {std::pair{Split::kTrain, n_train}, {Split::kVal, n_val}, {Split::kTest, n_test}}) {
    for (int k = 0; k < n; ++k, ++i) {
      char name[32];
      std::snprintf(name, sizeof name, "case_%03d", i);
      out.push_back({name, split, cfg.synth.seed + 1000ULL * static_cast<std::uint64_t>(i)});
    }
  }
  return out;
}

train::Case generate_case(const RunConfig& cfg, const CaseSpec& spec) {
  SynthParams sp = cfg.synth;
  std::string last;
  for (int attempt = 0; attempt < kMaxAttempts; ++attempt) {
    sp.seed = spec.seed + static_cast<std::uint64_t>(attempt);
    try {
      GroundTruthBundle gt = generate_tree(sp);
      const Volume ct = synthesize_ct(gt, cfg.image, sp.seed ^ kCtSalt);
      return {spec.name, ct, std::move(gt)};
    } catch (const DataError& e) {
      last = e.what();
    }
  }
  throw DataError("synth: " + spec.name + " failed after " + std::to_string(kMaxAttempts) +
                  " seeds, last error: " + last);
}

std::vector<train::Case> generate_split(const RunConfig& cfg, Split split) {
  std::vector<train::Case> out;
  for (const auto& spec : plan_dataset(cfg)) {
    if (spec.split != split) continue;
    train::Case c = generate_case(cfg, spec);
    c.image = train::network_input(c.image);
    out.push_back(std::move(c));
  }
  return out;
}

ordered_json tree_to_json(const AirwayTree& tree) {
  ordered_json arr = ordered_json::array();
  for (const auto& b : tree.branches) {
    ordered_json jb;
    jb["id"] = b.id;
    jb["parent_id"] = b.parent_id;
    jb["generation"] = b.generation;
    jb["radius_start"] = b.radius_start;
    jb["radius_end"] = b.radius_end;
    ordered_json pl = ordered_json::array();
    for (const auto& p : b.polyline) pl.push_back({p.x, p.y, p.z});
    jb["polyline"] = pl;
    arr.push_back(jb);
  }
  ordered_json j;
  j["branches"] = arr;
  return j;
}

AirwayTree tree_from_json(const json& j) {
  AirwayTree t;
  try {
    for (const auto& jb : j.at("branches")) {
      Branch b;
      b.id = jb.at("id").get<int>();
      b.parent_id = jb.at("parent_id").get<int>();
      b.generation = jb.at("generation").get<int>();
      b.radius_start = jb.at("radius_start").get<double>();
      b.radius_end = jb.at("radius_end").get<double>();
      for (const auto& p : jb.at("polyline")) b.polyline.push_back({p.at(0).get<double>(), p.at(1).get<double>(), p.at(2).get<double>()});
      t.branches.push_back(std::move(b));
    }
  } catch (const json::exception& e) {
    throw DataError(std::string("tree json: ") + e.what());
  }
  t.validate();
  return t;
}

ordered_json report_to_json(const metrics::MetricsReport& r) {
  ordered_json j;
  j["dsc"] = r.dsc;
  j["td"] = r.td;
  j["bd"] = r.bd;
  j["fpr"] = r.fpr;
  j["precision"] = r.precision;
  j["recall"] = r.recall;
  j["tp"] = r.tp;
  j["fp"] = r.fp;
  j["tn"] = r.tn;
  j["fn"] = r.fn;
  j["branches_total"] = r.branches_total;
  j["branches_detected"] = r.branches_detected;
  j["threshold"] = r.threshold;
  return j;
}

void write_json(const fs::path& path, const ordered_json& j) {
  std::ofstream out(path, std::ios::trunc);
  if (!out) throw DataError("cannot write " + path.string());
  out << j.dump(2) << "\n";
  if (!out) throw DataError("write failed for " + path.string());
}

json read_json(const fs::path& path) {
  std::ifstream in(path);
  if (!in) throw DataError("cannot read " + path.string());
  try {
    return json::parse(in);
  } catch (const json::exception& e) {
    throw DataError("malformed json " + path.string() + ": " + e.what());
  }
}

std::pair<double, double> mean_std(const std::vector<double>& v) {
  if (v.empty()) return {0.0, 0.0};
  double m = 0.0;
  for (double x : v) m += x;
  m /= static_cast<double>(v.size());
  if (v.size() < 2) return {m, 0.0};
  double s = 0.0;
  for (double x : v) s += (x - m) * (x - m);
  return {m, std::sqrt(s / static_cast<double>(v.size() - 1))};
}

ordered_json run_synth(const RunConfig& cfg, const fs::path& out, bool force, std::optional<int> count) {
  cfg.validate();
  if (fs::exists(out / "manifest.json") && !force) {
    throw ConfigError("synth: " + out.string() + " already holds a dataset, pass --force to overwrite");
  }
  ensure_dir(out);
  if (force) {
    for (const auto& e : fs::directory_iterator(out)) {
      if (e.is_directory() && e.path().filename().string().rfind("case_", 0) == 0) fs::remove_all(e.path());
    }
  }
  const std::string hash = config_hash(cfg);
  ordered_json manifest;
  manifest["config_hash"] = hash;
  manifest["seed"] = cfg.synth.seed;
  manifest["dims"] = dims_json(cfg.synth.dims);
  ordered_json cases = ordered_json::array();
  for (const auto& spec : plan_dataset(cfg, count)) {
    const train::Case c = generate_case(cfg, spec);
    const fs::path dir = out / spec.name;
    ensure_dir(dir);
    export_tagged(c.image, dir / "image.rvol", hash);
    export_tagged(c.gt.mask, dir / "mask.rvol", hash);
    export_tagged(c.gt.dc_map, dir / "dc_map.rvol", hash);
    export_tagged(c.gt.centerline_mask, dir / "centerline.rvol", hash);
    ordered_json tree = tree_to_json(c.gt.tree);
    tree["dc_max"] = c.gt.dc_max;
    tree["config_hash"] = hash;
    write_json(dir / "tree.json", tree);

    ordered_json jc;
    jc["name"] = spec.name;
    jc["split"] = split_name(spec.split);
    jc["seed"] = spec.seed;
    jc["dims"] = dims_json(c.gt.mask.dims());
    jc["branches"] = c.gt.tree.branches.size();
    jc["files"] = {{"image", spec.name + "/image.rvol"},
                   {"mask", spec.name + "/mask.rvol"},
                   {"dc_map", spec.name + "/dc_map.rvol"},
                   {"centerline", spec.name + "/centerline.rvol"},
                   {"tree", spec.name + "/tree.json"}};
    jc["checksums"] = {{"image", hex64(c.image.checksum())}, {"mask", hex64(c.gt.mask.checksum())}};
    cases.push_back(jc);
  }
  manifest["count"] = cases.size();
  manifest["cases"] = cases;
  write_json(out / "manifest.json", manifest);
  return manifest;
}

std::vector<train::Case> load_split(const fs::path& data_dir, Split split) {
  const json manifest = read_json(data_dir / "manifest.json");
  std::vector<train::Case> out;
  try {
    for (const auto& jc : manifest.at("cases")) {
      if (jc.at("split").get<std::string>() != split_name(split)) continue;
      const std::string name = jc.at("name").get<std::string>();
      const auto& files = jc.at("files");
      auto path = [&](const char* k) { return data_dir / files.at(k).get<std::string>(); };
      const Dims dims = dims_from(jc.at("dims"));
      const Volume image = import_volume(path("image"));
      GroundTruthBundle gt;
      gt.mask = import_volume(path("mask"));
      gt.dc_map = import_volume(path("dc_map"));
      gt.centerline_mask = import_volume(path("centerline"));
      const json tree = read_json(path("tree"));
      gt.tree = tree_from_json(tree);
      gt.dc_max = tree.at("dc_max").get<double>();
      for (const Volume* v : std::initializer_list<const Volume*>{&image, &gt.mask, &gt.dc_map, &gt.centerline_mask}) {
        if (v->dims() != dims) throw DataError("dataset/manifest mismatch: dims of " + name);
      }
      if (hex64(image.checksum()) != jc.at("checksums").at("image").get<std::string>() ||
          hex64(gt.mask.checksum()) != jc.at("checksums").at("mask").get<std::string>()) {
        throw DataError("dataset/manifest mismatch: checksum of " + name);
      }
      out.push_back({name, train::network_input(image), std::move(gt)});
    }
  } catch (const json::exception& e) {
    throw DataError("dataset/manifest mismatch: " + std::string(e.what()));
  }
  return out;
}

ordered_json run_train(const RunConfig& cfg, const fs::path& data_dir, const fs::path& out, bool force) {
  cfg.validate();
  if (fs::exists(out / "train_log.csv") && !force) {
    throw ConfigError("train: " + out.string() + " already holds a run, pass --force to overwrite");
  }
  const auto train_set = load_split(data_dir, Split::kTrain);
  const auto val_set = load_split(data_dir, Split::kVal);
  if (train_set.empty()) throw DataError("dataset/manifest mismatch: no train cases in " + data_dir.string());
  if (val_set.empty()) throw DataError("dataset/manifest mismatch: no val cases in " + data_dir.string());
  ensure_dir(out);
  const std::string hash = config_hash(cfg);
  {
    std::ofstream c(out / "config.cfg", std::ios::trunc);
    c << "# config_hash " << hash << "\n" << to_config_text(cfg);
  }

  const auto t0 = std::chrono::steady_clock::now();
  const std::string started = utc_now();
  train::Trainer trainer(cfg.train);
  const auto rows = trainer.fit(train_set, val_set, out, hash, [](const train::EpochLog& r) {
    std::printf("epoch %d  com %.4f cor %.4f cdt %.4f  val dsc %.4f td %.4f bd %.4f fpr %.5f  lr %g\n", r.epoch,
                r.l_topo_com, r.l_topo_cor, r.l_cdt, r.val.dsc, r.val.td, r.val.bd, r.val.fpr, r.lr);
    std::fflush(stdout);
  });
  const double wall = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();

  std::ofstream csv(out / "train_log.csv", std::ios::trunc);
  if (!csv) throw DataError("cannot write " + (out / "train_log.csv").string());
  csv << "epoch,l_topo_com,l_topo_cor,l_cdt,val_dsc,val_td,val_bd,val_fpr,lr\n";
  ordered_json epochs = ordered_json::array();
  for (const auto& r : rows) {
    char line[512];
    std::snprintf(line, sizeof line, "%d,%.10g,%.10g,%.10g,%.10g,%.10g,%.10g,%.10g,%.10g\n", r.epoch, r.l_topo_com,
                  r.l_topo_cor, r.l_cdt, r.val.dsc, r.val.td, r.val.bd, r.val.fpr, r.lr);
    csv << line;
    ordered_json e;
    e["epoch"] = r.epoch;
    e["l_topo_com"] = r.l_topo_com;
    e["l_topo_cor"] = r.l_topo_cor;
    e["l_cdt"] = r.l_cdt;
    e["lr"] = r.lr;
    e["val"] = report_to_json(r.val);
    epochs.push_back(e);
  }
  const auto& inst = trainer.instrumentation();
  ordered_json log;
  log["config_hash"] = hash;
  log["loss_mode"] = cfg.train.loss.mode == train::LossMode::kDiceOnly ? "dice-only" : "dtpdt";
  log["train_cases"] = train_set.size();
  log["val_cases"] = val_set.size();
  log["best_epoch"] = trainer.best_epoch();
  log["epochs"] = epochs;
  log["instrumentation"] = {{"topo_com_evals", inst.topo_com_evals}, {"topo_cor_evals", inst.topo_cor_evals},
                            {"cdt_evals", inst.cdt_evals},           {"steps", inst.steps},
                            {"skipped", inst.skipped},               {"lr", inst.lr}};
  log["nu"] = trainer.aucpr().nus();
  log["timing"] = {{"started", started}, {"wall_seconds", wall}};
  write_json(out / "train_log.json", log);
  return log;
}

ordered_json run_eval(const RunConfig& cfg, const fs::path& checkpoint_stem, const fs::path& data_dir, Split split,
                      const fs::path& out, bool oracle) {
  cfg.validate();
  const auto cases = load_split(data_dir, split);
  if (cases.empty()) throw DataError(std::string("eval: no ") + split_name(split) + " cases in " + data_dir.string());
  ToyUNet model(cfg.train.model);
  std::string ckpt_hash;
  int ckpt_epoch = -1;
  if (!oracle) ckpt_epoch = train::load_checkpoint(model, checkpoint_stem, &ckpt_hash);

  const double thr = cfg.train.threshold;
  const double frac = cfg.train.bd_fraction;
  ordered_json volumes = ordered_json::array();
  std::vector<metrics::MetricsReport> raw, lcc;
  for (const auto& c : cases) {
    Volume bin = c.gt.mask;
    if (!oracle) {
      const Volume prob = train::predict_volume(model, c.image, cfg.train.crop, cfg.train.val_stride);
      bin = metrics::binarize(prob, thr);
    }
    raw.push_back(metrics::evaluate(bin, c.gt, frac, thr));
    lcc.push_back(metrics::evaluate(metrics::largest_component(bin), c.gt, frac, thr));
    volumes.push_back({{"name", c.name}, {"raw", report_to_json(raw.back())}, {"lcc", report_to_json(lcc.back())}});
  }
  auto aggregate = [](const std::vector<metrics::MetricsReport>& rs) {
    ordered_json a;
    auto field = [&](const char* key, auto get) {
      std::vector<double> v;
      for (const auto& r : rs) v.push_back(get(r));
      const auto [m, s] = mean_std(v);
      a[key] = {{"mean", m}, {"std", s}};
    };
    field("dsc", [](const auto& r) { return r.dsc; });
    field("td", [](const auto& r) { return r.td; });
    field("bd", [](const auto& r) { return r.bd; });
    field("fpr", [](const auto& r) { return r.fpr; });
    field("precision", [](const auto& r) { return r.precision; });
    field("recall", [](const auto& r) { return r.recall; });
    return a;
  };
  ordered_json j;
  j["config_hash"] = config_hash(cfg);
  j["checkpoint"] = oracle ? "" : checkpoint_stem.string();
  j["checkpoint_config_hash"] = ckpt_hash;
  j["checkpoint_epoch"] = ckpt_epoch;
  j["oracle"] = oracle;
  j["split"] = split_name(split);
  j["threshold"] = thr;
  j["bd_fraction"] = frac;
  j["volumes"] = volumes;
  j["aggregate"] = {{"raw", aggregate(raw)}, {"lcc", aggregate(lcc)}};
  if (!out.empty()) {
    ensure_dir(out);
    write_json(out / "eval.json", j);
  }
  return j;
}

ordered_json run_dist(const RunConfig& cfg, const fs::path& input, const fs::path& out,
                      const std::optional<fs::path>& compare) {
  cfg.validate();
  const cdt::CdtParams& p = cfg.train.loss.cdt;
  const Volume mask = read_binary(input);
  if (mask.sum() == 0.0) throw DataError("dist: input has no foreground: " + input.string());
  const Volume boundary = hard_boundary(mask);
  const Volume dist = cdt::cdt_of_mask(mask, p);
  const Volume edt = exact_edt(mask, boundary);

  const WindowCounter counter(boundary);
  const int r = p.kernel_size / 2;
  const double cap = p.d_cap();
  const Dims d = mask.dims();
  double max_err = 0.0, max_val = 0.0;
  long violations = 0, above_cap = 0;
  for (int z = 0; z < d.nz; ++z)
    for (int y = 0; y < d.ny; ++y)
      for (int x = 0; x < d.nx; ++x) {
        const double v = dist(x, y, z);
        max_val = std::max(max_val, v);
        if (v > cap + 1e-9) ++above_cap;
        if (mask(x, y, z) == 0.0) continue;
        const double e = edt(x, y, z);
        max_err = std::max(max_err, std::abs(v - e));
        // the cap term inside the log counts as one more boundary voxel
        const double ref = std::min(e, cap);
        const double lo = ref - std::abs(p.gamma) * std::log(static_cast<double>(counter.count(x, y, z, r) + 1));
        if (v > ref + 1e-9 || v < lo - 1e-9) ++violations;
      }

  const std::string hash = config_hash(cfg);
  if (!out.empty()) {
    ensure_dir(out);
    export_tagged(dist, out / "cdt.rvol", hash);
    export_tagged(edt, out / "edt.rvol", hash);
  }
  ordered_json s;
  s["config_hash"] = hash;
  s["input"] = input.string();
  s["gamma"] = p.gamma;
  s["kernel_size"] = p.kernel_size;
  s["d_cap"] = cap;
  s["foreground_voxels"] = mask.sum();
  s["max_abs_err"] = max_err;
  s["bound_violations"] = violations;
  s["max_cdt"] = max_val;
  s["cap_violations"] = above_cap;

  if (compare) {
    const Volume other = read_binary(*compare);
    if (other.dims() != mask.dims()) throw DataError("dist: compare volume has different dims");
    const Volume other_dist = other.sum() > 0.0 ? cdt::cdt_of_mask(other, p) : Volume(other.dims());
    double sum_abs = 0.0;
    for (std::size_t i = 0; i < dist.size(); ++i) sum_abs += std::abs(dist[i] - other_dist[i]);
    const double dsc_delta = 1.0 - metrics::confusion(other, mask).dsc;
    const double per_voxel = sum_abs / mask.sum();
    if (!out.empty()) export_tagged(other_dist, out / "cdt_compare.rvol", hash);
    s["compare"] = {{"input", compare->string()},
                    {"dsc_delta", dsc_delta},
                    {"sum_abs_delta_cdt", sum_abs},
                    {"sum_abs_delta_cdt_per_voxel", per_voxel},
                    {"dsc_delta_below_0_01", dsc_delta < 0.01},
                    {"per_voxel_exceeds_10x_dsc_delta", per_voxel > 10.0 * dsc_delta}};
  }
  if (!out.empty()) write_json(out / "dist_summary.json", s);
  if (violations > 0 || above_cap > 0) {
    throw NumericError("dist: " + std::to_string(violations) + " bound violations, " + std::to_string(above_cap) +
                       " voxels above d_cap");
  }
  return s;
}

ordered_json run_report(const fs::path& run_dir, const fs::path& out) {
  const json log = read_json(run_dir / "train_log.json");
  ordered_json r;
  r["config_hash"] = log.at("config_hash");
  r["loss_mode"] = log.at("loss_mode");
  r["best_epoch"] = log.at("best_epoch");
  const auto& epochs = log.at("epochs");
  if (!epochs.empty()) {
    const int best = log.at("best_epoch").get<int>();
    for (const auto& e : epochs)
      if (e.at("epoch").get<int>() == best) r["best_val"] = e.at("val");
    r["final_val"] = epochs.back().at("val");
  }
  r["epochs"] = epochs.size();
  if (fs::exists(run_dir / "eval.json")) {
    const json ev = read_json(run_dir / "eval.json");
    r["eval_split"] = ev.at("split");
    r["eval"] = ev.at("aggregate");
    if (ev.at("config_hash") != log.at("config_hash")) r["eval_config_hash"] = ev.at("config_hash");
  }
  if (!out.empty()) {
    ensure_dir(out);
    write_json(out / "report.json", r);
  }
  return r;
}

}  // namespace dtpdt::io
