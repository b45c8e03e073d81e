#pragma once

#include <filesystem>
#include <optional>
#include <string>
#include <vector>

#include <json.hpp>

#include "dtpdt/config.hpp"
#include "dtpdt/trainer.hpp"

namespace dtpdt::io {

namespace fs = std::filesystem;

enum class Split { kTrain, kVal, kTest };
const char* split_name(Split s);
Split parse_split(const std::string& s);

// One generated case: the tree is retried with the next seed when it
// escapes the volume.
struct CaseSpec {
  std::string name;
  Split split = Split::kTrain;
  std::uint64_t seed = 0;  // tree seed actually used
};

// Case i uses tree seeds base + 1000 i + attempt. Splits are assigned in
// order train, val, test; `count` rescales the dataset section counts.
std::vector<CaseSpec> plan_dataset(const RunConfig& cfg, std::optional<int> count = {});
train::Case generate_case(const RunConfig& cfg, const CaseSpec& spec);
// In-memory benchmark split straight from the config.
std::vector<train::Case> generate_split(const RunConfig& cfg, Split split);

nlohmann::ordered_json tree_to_json(const AirwayTree& tree);
AirwayTree tree_from_json(const nlohmann::json& j);
nlohmann::ordered_json report_to_json(const metrics::MetricsReport& r);

// Writes <out>/manifest.json and one directory per case holding image,
// mask, dc_map and centerline volumes plus tree.json.
nlohmann::ordered_json run_synth(const RunConfig& cfg, const fs::path& out, bool force,
                                 std::optional<int> count = {});
std::vector<train::Case> load_split(const fs::path& data_dir, Split split);

// Trains on the train split, validates on val. Writes train_log.csv,
// train_log.json, config.cfg and best/final checkpoints.
nlohmann::ordered_json run_train(const RunConfig& cfg, const fs::path& data_dir, const fs::path& out,
                                 bool force);

// Per-volume reports and mean/std aggregates, raw and after largest
// component extraction. With `oracle` the ground truth is scored against
// itself and no checkpoint is read.
nlohmann::ordered_json run_eval(const RunConfig& cfg, const fs::path& checkpoint_stem,
                                const fs::path& data_dir, Split split, const fs::path& out,
                                bool oracle = false);

// CDT and exact EDT maps of a binary volume with a bound check. With
// `compare` a second binary volume is transformed too and the summary
// reports the dice change and the summed distance change.
nlohmann::ordered_json run_dist(const RunConfig& cfg, const fs::path& input, const fs::path& out,
                                const std::optional<fs::path>& compare = {});

// Collects config, training log and eval results from a run directory.
nlohmann::ordered_json run_report(const fs::path& run_dir, const fs::path& out);

// Mean and sample standard deviation.
std::pair<double, double> mean_std(const std::vector<double>& v);

void write_json(const fs::path& path, const nlohmann::ordered_json& j);
nlohmann::json read_json(const fs::path& path);

}  // namespace dtpdt::io
