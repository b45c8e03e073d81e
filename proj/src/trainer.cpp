#include "dtpdt/trainer.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <numbers>
#include <unordered_map>

#include <json.hpp>

#include "dtpdt/errors.hpp"

namespace dtpdt::train {

void LossConfig::validate() const {
  tversky.validate();
  weights.validate();
  tps.validate();
  gumbel.validate();
  cdt.validate();
  if (lambda_cdt < 0.0) throw ConfigError("loss: lambda_cdt must be >= 0");
  if (anchors < 1) throw ConfigError("loss: anchors must be >= 1");
  if (nu_lr < 0.0) throw ConfigError("loss: nu_lr must be >= 0");
  if (!(threshold_init > 0.0 && threshold_init < 1.0)) {
    throw ConfigError("loss: threshold_init must be in (0,1)");
  }
}

void TrainConfig::validate() const {
  if (epochs < 1) throw ConfigError("train: epochs must be >= 1");
  if (warmup_epochs < 0 || warmup_epochs >= epochs) {
    throw ConfigError("train: warmup_epochs must be in [0, epochs)");
  }
  if (!(lr > 0.0)) throw ConfigError("train: lr must be > 0");
  if (!(lr_drop_factor > 0.0)) throw ConfigError("train: lr_drop_factor must be > 0");
  if (crops_per_epoch < 1) throw ConfigError("train: crops_per_epoch must be >= 1");
  if (max_rotation_deg < 0.0) throw ConfigError("train: max_rotation_deg must be >= 0");
  if (!(threshold > 0.0 && threshold < 1.0)) throw ConfigError("train: threshold must be in (0,1)");
  model.validate();
  const int div = 1 << model.levels;
  if (crop.nx % div || crop.ny % div || crop.nz % div || crop.nx < div || crop.ny < div ||
      crop.nz < div) {
    throw ConfigError("train: crop dims must be positive multiples of " + std::to_string(div));
  }
  if (val_stride.nx < 1 || val_stride.ny < 1 || val_stride.nz < 1 || val_stride.nx > crop.nx ||
      val_stride.ny > crop.ny || val_stride.nz > crop.nz) {
    throw ConfigError("train: stride must be in [1, crop] per axis");
  }
  loss.validate();
}

Phase phase_for_epoch(int epoch, const TrainConfig& cfg) {
  return epoch < cfg.warmup_epochs ? Phase::kWarmup : Phase::kJoint;
}

double lr_for_epoch(int epoch, const TrainConfig& cfg) {
  return epoch < cfg.lr_drop_epoch ? cfg.lr : cfg.lr / cfg.lr_drop_factor;
}

Volume network_input(const Volume& hu) {
  std::vector<double> v(hu.size());
  for (std::size_t i = 0; i < v.size(); ++i) v[i] = normalize_hu(hu[i]) / 255.0;
  return Volume(hu.dims(), std::move(v), hu.spacing());
}

void Adam::step(std::vector<ad::DiffNode>& params, double lr) {
  ++t_;
  if (m_.size() < params.size()) {
    m_.resize(params.size());
    v_.resize(params.size());
    t_slot_.resize(params.size(), 0);
  }
  for (std::size_t k = 0; k < params.size(); ++k) {
    Tensor& w = params[k].mutable_value();
    const Tensor& g = params[k].grad();
    auto& m = m_[k];
    auto& v = v_[k];
    if (m.size() != w.size()) {
      m.assign(w.size(), 0.0);
      v.assign(w.size(), 0.0);
      t_slot_[k] = 0;
    }
    // Slots joining late (thresholds) get their own bias correction.
    const double t = static_cast<double>(++t_slot_[k]);
    const double bc1 = 1.0 - std::pow(p_.beta1, t);
    const double bc2 = 1.0 - std::pow(p_.beta2, t);
    for (std::size_t i = 0; i < w.size(); ++i) {
      const double gi = g.data[i];
      m[i] = p_.beta1 * m[i] + (1.0 - p_.beta1) * gi;
      v[i] = p_.beta2 * v[i] + (1.0 - p_.beta2) * gi * gi;
      w.data[i] -= lr * (m[i] / bc1) / (std::sqrt(v[i] / bc2) + p_.eps);
    }
  }
}

Crop extract_crop(const Case& c, Dims size, std::array<int, 3> center, double rotation_deg,
                  bool flip_x, bool flip_y) {
  const Dims d = c.image.dims();
  auto start = [](int ctr, int n, int s) { return std::clamp(ctr - s / 2, std::min(0, n - s), std::max(0, n - s)); };
  const int x0 = start(center[0], d.nx, size.nx);
  const int y0 = start(center[1], d.ny, size.ny);
  const int z0 = start(center[2], d.nz, size.nz);
  const double th = rotation_deg * std::numbers::pi / 180.0;
  const double ct = std::cos(th), st = std::sin(th);
  const double cx = x0 + (size.nx - 1) / 2.0, cy = y0 + (size.ny - 1) / 2.0;

  std::vector<double> img(size.count()), mask(size.count()), dc(size.count()), cl(size.count());
  for (int z = 0; z < size.nz; ++z)
    for (int y = 0; y < size.ny; ++y)
      for (int x = 0; x < size.nx; ++x) {
        const int lx = flip_x ? size.nx - 1 - x : x;
        const int ly = flip_y ? size.ny - 1 - y : y;
        const double px = x0 + lx - cx, py = y0 + ly - cy;
        const int sx = std::clamp(static_cast<int>(std::lround(cx + ct * px - st * py)), 0, d.nx - 1);
        const int sy = std::clamp(static_cast<int>(std::lround(cy + st * px + ct * py)), 0, d.ny - 1);
        const int sz = std::clamp(z0 + z, 0, d.nz - 1);
        const std::size_t o = size.index(x, y, z);
        const std::size_t s = d.index(sx, sy, sz);
        img[o] = c.image[s];
        mask[o] = c.gt.mask[s];
        dc[o] = c.gt.dc_map.size() == c.image.size() ? c.gt.dc_map[s] : 0.0;
        cl[o] = c.gt.centerline_mask.size() == c.image.size() ? c.gt.centerline_mask[s] : 0.0;
      }
  Crop out;
  out.image = Volume(size, std::move(img), c.image.spacing());
  out.gt.mask = Volume(size, std::move(mask), c.image.spacing());
  out.gt.dc_map = Volume(size, std::move(dc), c.image.spacing());
  out.gt.centerline_mask = Volume(size, std::move(cl), c.image.spacing());
  // Weights stay relative to the whole scan's thickest airway.
  out.gt.dc_max = c.gt.dc_max;
  return out;
}

Trainer::Trainer(const TrainConfig& cfg)
    : cfg_((cfg.validate(), cfg)),
      model_(cfg.model),
      adam_(cfg.adam),
      aucpr_(0.5, cfg.loss.anchors, cfg.loss.nu_lr, cfg.loss.threshold_init),
      kernel_(cdt::build_distance_kernel(cfg.loss.cdt)),
      rng_(cfg.seed) {}

void Trainer::begin_epoch(int epoch, double lr) {
  epoch_ = epoch;
  counters_.topo_com_evals.push_back(0);
  counters_.topo_cor_evals.push_back(0);
  counters_.cdt_evals.push_back(0);
  counters_.steps.push_back(0);
  counters_.skipped.push_back(0);
  counters_.lr.push_back(lr);
}

Crop Trainer::sample_crop(const Case& c) {
  std::vector<std::size_t> fg;
  for (std::size_t i = 0; i < c.gt.mask.size(); ++i) {
    if (c.gt.mask[i] != 0.0) fg.push_back(i);
  }
  std::array<int, 3> center{c.image.dims().nx / 2, c.image.dims().ny / 2, c.image.dims().nz / 2};
  if (!fg.empty()) {
    std::uniform_int_distribution<std::size_t> pick(0, fg.size() - 1);
    center = c.image.dims().coords(fg[pick(rng_)]);
  }
  double angle = 0.0;
  bool fx = false, fy = false;
  if (cfg_.augment) {
    std::uniform_real_distribution<double> rot(-cfg_.max_rotation_deg, cfg_.max_rotation_deg);
    std::bernoulli_distribution coin(0.5);
    angle = rot(rng_);
    fx = coin(rng_);
    fy = coin(rng_);
  }
  return extract_crop(c, cfg_.crop, center, angle, fx, fy);
}

StepLosses Trainer::train_step(const Crop& crop, Phase phase, double lr) {
  if (epoch_ < 0) begin_epoch(0, lr);
  const std::size_t e = counters_.steps.size() - 1;
  StepLosses out;
  const Volume& gt = crop.gt.mask;
  const double n_fg = gt.sum();
  if (!(n_fg > 0.0) || n_fg >= static_cast<double>(gt.size())) {
    out.skipped = true;
    ++counters_.skipped[e];
    return out;
  }
  ++counters_.steps[e];

  std::vector<ad::DiffNode> params;
  for (auto& p : model_.parameters()) {
    p.node.zero_grad();
    params.push_back(p.node);
  }
  aucpr_.thresholds().zero_grad();

  const ad::DiffNode logits = model_.forward(ad::constant(crop.image));
  const auto [p_bg, p_fg] =
      ad::channel_softmax(ad::select_channel(logits, 0), ad::select_channel(logits, 1));

  ad::DiffNode total;
  bool joint = false;
  if (cfg_.loss.mode == LossMode::kDiceOnly) {
    const ad::DiffNode l = loss::tversky_loss(p_fg, gt, loss::TverskyParams{0.5, 0.5});
    ++counters_.topo_com_evals[e];
    out.topo_com = l.item();
    total = l;
  } else {
    const Volume w = loss::weight_map(gt, crop.gt.dc_map, crop.gt.dc_max, cfg_.loss.weights);
    const ad::DiffNode com = loss::topo_com_loss(p_fg, gt, w, cfg_.loss.tversky);
    ++counters_.topo_com_evals[e];
    out.topo_com = com.item();
    total = ad::scale(com, cfg_.loss.tps.lambda1);
    if (phase == Phase::kJoint) {
      joint = true;
      aucpr_.set_prior(n_fg / static_cast<double>(gt.size()));
      const ad::DiffNode cor = loss::topo_cor_loss(p_fg, gt, aucpr_);
      ++counters_.topo_cor_evals[e];
      out.topo_cor = cor.item();

      const cdt::GumbelNoise noise = cdt::GumbelNoise::sample(gt.dims(), rng_);
      const auto [z_bg, z_fg] = cdt::gumbel_softmax(p_bg, p_fg, cfg_.loss.gumbel, noise);
      const ad::DiffNode phi = cdt::soft_boundary(z_fg, gt);
      const ad::DiffNode dist = cdt::cdt_transform(z_fg, phi, cfg_.loss.cdt, kernel_, &gt);
      const ad::DiffNode lc = cdt::cdt_loss(dist, cdt::cdt_of_mask(gt, cfg_.loss.cdt), gt);
      ++counters_.cdt_evals[e];
      out.cdt = lc.item();
      total = ad::add(ad::add(total, ad::scale(cor, cfg_.loss.tps.lambda2)),
                      ad::scale(lc, cfg_.loss.lambda_cdt));
    }
  }
  out.total = total.item();
  if (!std::isfinite(out.total)) throw NumericError("train: non-finite loss");

  const Volume snapshot = p_fg.value().to_volume(0, gt.spacing());
  ad::backward(total);
  if (joint) params.push_back(aucpr_.thresholds());
  adam_.step(params, lr);
  if (joint) {
    aucpr_.clamp_thresholds();
    loss::update_multipliers(snapshot, gt, aucpr_);
  }
  return out;
}

namespace {

double median_of(const Volume& v) {
  std::vector<double> s(v.values());
  auto mid = s.begin() + static_cast<std::ptrdiff_t>(s.size() / 2);
  std::nth_element(s.begin(), mid, s.end());
  return *mid;
}

std::vector<int> window_starts(int n, int crop, int stride) {
  std::vector<int> starts;
  if (n <= crop) return {0};
  for (int s = 0; s + crop < n; s += stride) starts.push_back(s);
  starts.push_back(n - crop);
  return starts;
}

}  // namespace

Volume predict_volume(const ToyUNet& model, const Volume& image, Dims crop, Dims stride) {
  if (stride.nx < 1 || stride.ny < 1 || stride.nz < 1 || stride.nx > crop.nx ||
      stride.ny > crop.ny || stride.nz > crop.nz) {
    throw ConfigError("predict: stride must be in [1, crop] per axis");
  }
  const Dims d = image.dims();
  const Dims p{std::max(d.nx, crop.nx), std::max(d.ny, crop.ny), std::max(d.nz, crop.nz)};
  const double pad = median_of(image);

  std::vector<double> sum(p.count(), 0.0), hits(p.count(), 0.0);
  ad::NoGradGuard no_grad;
  for (int z0 : window_starts(p.nz, crop.nz, stride.nz))
    for (int y0 : window_starts(p.ny, crop.ny, stride.ny))
      for (int x0 : window_starts(p.nx, crop.nx, stride.nx)) {
        Tensor win(1, crop);
        for (int z = 0; z < crop.nz; ++z)
          for (int y = 0; y < crop.ny; ++y)
            for (int x = 0; x < crop.nx; ++x) {
              const int sx = x0 + x, sy = y0 + y, sz = z0 + z;
              win.data[crop.index(x, y, z)] = d.contains(sx, sy, sz) ? image(sx, sy, sz) : pad;
            }
        const ad::DiffNode logits = model.forward(ad::constant(std::move(win)));
        const auto probs =
            ad::channel_softmax(ad::select_channel(logits, 0), ad::select_channel(logits, 1));
        const Tensor& fg = probs.second.value();
        for (int z = 0; z < crop.nz; ++z)
          for (int y = 0; y < crop.ny; ++y)
            for (int x = 0; x < crop.nx; ++x) {
              const std::size_t o = p.index(x0 + x, y0 + y, z0 + z);
              sum[o] += fg.data[crop.index(x, y, z)];
              hits[o] += 1.0;
            }
      }
  std::vector<double> out(d.count());
  for (int z = 0; z < d.nz; ++z)
    for (int y = 0; y < d.ny; ++y)
      for (int x = 0; x < d.nx; ++x) {
        const std::size_t o = p.index(x, y, z);
        out[d.index(x, y, z)] = sum[o] / hits[o];
      }
  return Volume(d, std::move(out), image.spacing());
}

metrics::MetricsReport mean_report(const std::vector<metrics::MetricsReport>& reports) {
  metrics::MetricsReport m;
  if (reports.empty()) return m;
  const double n = static_cast<double>(reports.size());
  m.dsc = m.td = m.bd = m.fpr = m.precision = m.recall = 0.0;
  for (const auto& r : reports) {
    m.dsc += r.dsc / n;
    m.td += r.td / n;
    m.bd += r.bd / n;
    m.fpr += r.fpr / n;
    m.precision += r.precision / n;
    m.recall += r.recall / n;
    m.tp += r.tp;
    m.fp += r.fp;
    m.tn += r.tn;
    m.fn += r.fn;
    m.branches_total += r.branches_total;
    m.branches_detected += r.branches_detected;
  }
  m.threshold = reports.front().threshold;
  return m;
}

std::vector<EpochLog> Trainer::fit(const std::vector<Case>& train, const std::vector<Case>& val,
                                   const std::filesystem::path& out_dir,
                                   const std::string& config_hash,
                                   const std::function<void(const EpochLog&)>& on_epoch) {
  if (train.empty() || val.empty()) throw DataError("fit: training and validation sets must be nonempty");
  if (!out_dir.empty()) {
    std::error_code ec;
    std::filesystem::create_directories(out_dir, ec);
    if (ec) throw DataError("fit: cannot create " + out_dir.string());
  }
  std::vector<std::size_t> order(train.size());
  std::vector<EpochLog> log;
  double best_dsc = -1.0;
  for (int epoch = 0; epoch < cfg_.epochs; ++epoch) {
    const double lr = lr_for_epoch(epoch, cfg_);
    const Phase phase = phase_for_epoch(epoch, cfg_);
    begin_epoch(epoch, lr);
    for (std::size_t i = 0; i < order.size(); ++i) order[i] = i;
    std::shuffle(order.begin(), order.end(), rng_);

    EpochLog row;
    row.epoch = epoch;
    row.lr = lr;
    int used = 0;
    for (int i = 0; i < cfg_.crops_per_epoch; ++i) {
      const Case& c = train[order[static_cast<std::size_t>(i) % order.size()]];
      const StepLosses s = train_step(sample_crop(c), phase, lr);
      if (s.skipped) continue;
      ++used;
      row.l_topo_com += s.topo_com;
      row.l_topo_cor += s.topo_cor;
      row.l_cdt += s.cdt;
    }
    if (used > 0) {
      row.l_topo_com /= used;
      row.l_topo_cor /= used;
      row.l_cdt /= used;
    }

    std::vector<metrics::MetricsReport> reports;
    for (const Case& c : val) {
      const Volume prob = predict_volume(model_, c.image, cfg_.crop, cfg_.val_stride);
      reports.push_back(metrics::evaluate(metrics::binarize(prob, cfg_.threshold), c.gt,
                                          cfg_.bd_fraction, cfg_.threshold));
    }
    row.val = mean_report(reports);
    if (row.val.dsc > best_dsc) {
      best_dsc = row.val.dsc;
      best_epoch_ = epoch;
      if (!out_dir.empty()) save_checkpoint(model_, out_dir / "best", epoch, config_hash);
    }
    log.push_back(row);
    if (on_epoch) on_epoch(row);
  }
  if (!out_dir.empty()) save_checkpoint(model_, out_dir / "final", cfg_.epochs - 1, config_hash);
  return log;
}

namespace {

std::filesystem::path with_suffix(const std::filesystem::path& stem, const char* suffix) {
  return std::filesystem::path(stem.string() + suffix);
}

}  // namespace

void save_checkpoint(const ToyUNet& model, const std::filesystem::path& stem, int epoch,
                     const std::string& config_hash) {
  std::vector<double> flat;
  nlohmann::ordered_json j;
  j["names"] = nlohmann::json::array();
  j["shapes"] = nlohmann::json::array();
  for (const auto& p : model.parameters()) {
    const auto& d = p.node.value().data;
    flat.insert(flat.end(), d.begin(), d.end());
    j["names"].push_back(p.name);
    j["shapes"].push_back(p.shape);
  }
  j["epoch"] = epoch;
  j["config_hash"] = config_hash;
  const int n = static_cast<int>(flat.size());
  export_volume(Volume(Dims{n, 1, 1}, std::move(flat)), with_suffix(stem, ".rvol"));
  std::ofstream out(with_suffix(stem, ".json"), std::ios::trunc);
  if (!out) throw DataError("checkpoint: cannot write " + with_suffix(stem, ".json").string());
  out << j.dump(2) << "\n";
  if (!out) throw DataError("checkpoint: write failed for " + stem.string());
}

int load_checkpoint(ToyUNet& model, const std::filesystem::path& stem, std::string* config_hash) {
  std::ifstream in(with_suffix(stem, ".json"));
  if (!in) throw DataError("checkpoint: missing manifest " + with_suffix(stem, ".json").string());
  nlohmann::json j;
  try {
    in >> j;
  } catch (const nlohmann::json::exception& e) {
    throw DataError("checkpoint: malformed manifest: " + std::string(e.what()));
  }
  const Volume flat = import_volume(with_suffix(stem, ".rvol"));
  auto& params = model.parameters();
  if (!j.contains("names") || j["names"].size() != params.size()) {
    throw DataError("checkpoint: parameter count does not match the model");
  }
  std::size_t offset = 0;
  for (std::size_t k = 0; k < params.size(); ++k) {
    if (j["names"][k].get<std::string>() != params[k].name ||
        j["shapes"][k].get<std::vector<int>>() != params[k].shape) {
      throw DataError("checkpoint: parameter '" + params[k].name + "' does not match the model");
    }
    Tensor& t = params[k].node.mutable_value();
    if (offset + t.size() > flat.size()) throw DataError("checkpoint: data shorter than manifest");
    std::copy_n(flat.values().begin() + static_cast<std::ptrdiff_t>(offset), t.size(), t.data.begin());
    offset += t.size();
  }
  if (offset != flat.size()) throw DataError("checkpoint: data longer than manifest");
  if (config_hash) *config_hash = j.value("config_hash", "");
  return j.value("epoch", 0);
}

}  // namespace dtpdt::train
