#pragma once

#include <cstdint>
#include <filesystem>
#include <functional>
#include <random>
#include <string>
#include <vector>

#include "dtpdt/cdt.hpp"
#include "dtpdt/losses.hpp"
#include "dtpdt/metrics.hpp"
#include "dtpdt/model.hpp"
#include "dtpdt/synth.hpp"

namespace dtpdt::train {

enum class LossMode { kDtpdt, kDiceOnly };
enum class Phase { kWarmup, kJoint };

struct LossConfig {
  LossMode mode = LossMode::kDtpdt;
  loss::TverskyParams tversky;
  loss::WeightMapParams weights;
  loss::TpsParams tps;
  cdt::GumbelParams gumbel;
  cdt::CdtParams cdt;
  double lambda_cdt = 1.0;
  int anchors = 10;
  double nu_lr = 0.01;
  double threshold_init = 0.5;
  void validate() const;
};

struct AdamParams {
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;
};

struct TrainConfig {
  int epochs = 60;
  int warmup_epochs = 10;
  double lr = 0.002;
  int lr_drop_epoch = 50;
  double lr_drop_factor = 10.0;
  AdamParams adam;
  int crops_per_epoch = 20;
  Dims crop = Dims::cube(32);
  bool augment = true;
  double max_rotation_deg = 10.0;
  // Sliding-window stride used for validation prediction.
  Dims val_stride = Dims::cube(32);
  double threshold = 0.5;
  double bd_fraction = 0.8;
  std::uint64_t seed = 1;
  ToyUNetConfig model;
  LossConfig loss;
  void validate() const;
};

Phase phase_for_epoch(int epoch, const TrainConfig& cfg);
double lr_for_epoch(int epoch, const TrainConfig& cfg);

// One volume with its network input (HU mapped to [0,1]) and labels.
struct Case {
  std::string name;
  Volume image;
  GroundTruthBundle gt;
};

// Network input from a CT volume in Hounsfield units.
Volume network_input(const Volume& hu);

struct StepLosses {
  double topo_com = 0.0;
  double topo_cor = 0.0;
  double cdt = 0.0;
  double total = 0.0;
  bool skipped = false;
};

// Per-epoch evaluation counts of each loss term.
struct Instrumentation {
  std::vector<long> topo_com_evals;
  std::vector<long> topo_cor_evals;
  std::vector<long> cdt_evals;
  std::vector<long> steps;
  std::vector<long> skipped;
  std::vector<double> lr;
};

class Adam {
 public:
  explicit Adam(AdamParams p = {}) : p_(p) {}
  // Updates every node in place from its accumulated gradient.
  void step(std::vector<ad::DiffNode>& params, double lr);
  long steps() const { return t_; }

 private:
  AdamParams p_;
  long t_ = 0;
  std::vector<std::vector<double>> m_, v_;
  std::vector<long> t_slot_;
};

struct EpochLog {
  int epoch = 0;
  double l_topo_com = 0.0;
  double l_topo_cor = 0.0;
  double l_cdt = 0.0;
  metrics::MetricsReport val;
  double lr = 0.0;
};

// Fully-specified crop with labels cut from a case.
struct Crop {
  Volume image;
  GroundTruthBundle gt;
};

// Crop of `size` centred on `center` (clamped into the volume). With a
// rotation, output voxels sample the source at the rotated position about
// the crop centre, nearest neighbour, edge-clamped. flip_x mirrors the crop.
Crop extract_crop(const Case& c, Dims size, std::array<int, 3> center, double rotation_deg = 0.0,
                  bool flip_x = false, bool flip_y = false);

class Trainer {
 public:
  explicit Trainer(const TrainConfig& cfg);

  StepLosses train_step(const Crop& crop, Phase phase, double lr);
  // Samples a crop around a random foreground voxel with augmentation.
  Crop sample_crop(const Case& c);

  std::vector<EpochLog> fit(const std::vector<Case>& train, const std::vector<Case>& val,
                            const std::filesystem::path& out_dir = {},
                            const std::string& config_hash = "",
                            const std::function<void(const EpochLog&)>& on_epoch = {});

  // Begins epoch bookkeeping when train_step is driven by hand.
  void begin_epoch(int epoch, double lr);

  ToyUNet& model() { return model_; }
  const ToyUNet& model() const { return model_; }
  loss::AucprState& aucpr() { return aucpr_; }
  const Instrumentation& instrumentation() const { return counters_; }
  const TrainConfig& config() const { return cfg_; }
  int best_epoch() const { return best_epoch_; }

 private:
  TrainConfig cfg_;
  ToyUNet model_;
  Adam adam_;
  loss::AucprState aucpr_;
  ad::Kernel3 kernel_;
  std::mt19937_64 rng_;
  Instrumentation counters_;
  int epoch_ = -1;
  int best_epoch_ = -1;
};

// Foreground probability map averaged over overlapping sliding windows.
Volume predict_volume(const ToyUNet& model, const Volume& image, Dims crop, Dims stride);

metrics::MetricsReport mean_report(const std::vector<metrics::MetricsReport>& reports);

// Checkpoint: <stem>.rvol holds every parameter in declaration order,
// <stem>.json the manifest {names, shapes, epoch, config_hash}.
void save_checkpoint(const ToyUNet& model, const std::filesystem::path& stem, int epoch,
                     const std::string& config_hash);
// Loads parameters into a model built from the matching config. Throws
// DataError on name or shape mismatch.
int load_checkpoint(ToyUNet& model, const std::filesystem::path& stem,
                    std::string* config_hash = nullptr);

}  // namespace dtpdt::train
