#pragma once

#include <filesystem>
#include <string>

#include "dtpdt/synth.hpp"
#include "dtpdt/trainer.hpp"

namespace dtpdt {

struct DatasetConfig {
  int train_count = 20;
  int val_count = 5;
  int test_count = 5;
  int total() const { return train_count + val_count + test_count; }
  void validate() const;
};

// Everything a verb can be configured with. Training threshold, bd fraction
// and window stride are shared with eval.
struct RunConfig {
  SynthParams synth;
  ImageParams image;
  DatasetConfig dataset;
  train::TrainConfig train;

  void validate() const;
};

// Flat `key = value` text with [section] headers and # comments. Keys
// missing from the text keep their defaults; unknown keys are errors.
RunConfig parse_config(const std::string& text, const std::string& origin = "<config>");
RunConfig load_config(const std::filesystem::path& path);

// Canonical form: every key, fixed order, round-trip exact.
std::string to_config_text(const RunConfig& cfg);
// 16 hex digits, FNV-1a 64 over the canonical text.
std::string config_hash(const RunConfig& cfg);

}  // namespace dtpdt
