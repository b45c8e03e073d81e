#include "dtpdt/config.hpp"

#include <charconv>
#include <cstdio>
#include <fstream>
#include <functional>
#include <map>
#include <sstream>
#include <vector>

#include "dtpdt/errors.hpp"

namespace dtpdt {

void DatasetConfig::validate() const {
  if (train_count < 1) throw ConfigError("dataset: train_count must be >= 1");
  if (val_count < 0 || test_count < 0) throw ConfigError("dataset: counts must be >= 0");
}

void RunConfig::validate() const {
  synth.validate();
  dataset.validate();
  train.validate();
  if (!(image.blur_sigma >= 0.0) || !(image.noise_hu >= 0.0)) {
    throw ConfigError("image: blur_sigma and noise_hu must be >= 0");
  }
}

namespace {

struct Field {
  std::string section;
  std::string key;
  std::function<std::string(const RunConfig&)> get;
  std::function<void(RunConfig&, const std::string&)> set;
};

std::string trim(const std::string& s) {
  const auto b = s.find_first_not_of(" \t\r");
  if (b == std::string::npos) return "";
  const auto e = s.find_last_not_of(" \t\r");
  return s.substr(b, e - b + 1);
}

// shortest text that reads back to the same double
std::string fmt_double(double v) {
  char buf[40];
  const auto [end, ec] = std::to_chars(buf, buf + sizeof buf, v);
  return std::string(buf, end);
}

double parse_double(const std::string& s) {
  double v = 0.0;
  const auto [p, ec] = std::from_chars(s.data(), s.data() + s.size(), v);
  if (ec != std::errc() || p != s.data() + s.size()) throw ConfigError("not a number: '" + s + "'");
  return v;
}

template <class Int>
Int parse_int(const std::string& s) {
  Int v{};
  const auto [p, ec] = std::from_chars(s.data(), s.data() + s.size(), v);
  if (ec != std::errc() || p != s.data() + s.size()) throw ConfigError("not an integer: '" + s + "'");
  return v;
}

bool parse_bool(const std::string& s) {
  if (s == "true" || s == "1" || s == "yes") return true;
  if (s == "false" || s == "0" || s == "no") return false;
  throw ConfigError("not a boolean: '" + s + "'");
}

// "64" or "64,64,48" or "64 64 48"
Dims parse_dims(const std::string& s) {
  std::string t = s;
  for (char& c : t)
    if (c == ',' || c == 'x') c = ' ';
  std::istringstream in(t);
  std::vector<std::string> parts;
  for (std::string p; in >> p;) parts.push_back(p);
  if (parts.size() == 1) return Dims::cube(parse_int<int>(parts[0]));
  if (parts.size() == 3) return Dims{parse_int<int>(parts[0]), parse_int<int>(parts[1]), parse_int<int>(parts[2])};
  throw ConfigError("dims must be one or three integers: '" + s + "'");
}

std::string fmt_dims(Dims d) {
  return std::to_string(d.nx) + "," + std::to_string(d.ny) + "," + std::to_string(d.nz);
}

std::vector<Field> fields() {
  std::vector<Field> f;
  auto dbl = [&](const char* sec, const char* key, auto member) {
    f.push_back({sec, key, [member](const RunConfig& c) { return fmt_double(member(const_cast<RunConfig&>(c))); },
                 [member](RunConfig& c, const std::string& v) { member(c) = parse_double(v); }});
  };
  auto integer = [&](const char* sec, const char* key, auto member) {
    using T = std::remove_reference_t<decltype(member(std::declval<RunConfig&>()))>;
    f.push_back({sec, key, [member](const RunConfig& c) { return std::to_string(member(const_cast<RunConfig&>(c))); },
                 [member](RunConfig& c, const std::string& v) { member(c) = parse_int<T>(v); }});
  };
  auto boolean = [&](const char* sec, const char* key, auto member) {
    f.push_back({sec, key,
                 [member](const RunConfig& c) { return std::string(member(const_cast<RunConfig&>(c)) ? "true" : "false"); },
                 [member](RunConfig& c, const std::string& v) { member(c) = parse_bool(v); }});
  };
  auto dims = [&](const char* sec, const char* key, auto member) {
    f.push_back({sec, key, [member](const RunConfig& c) { return fmt_dims(member(const_cast<RunConfig&>(c))); },
                 [member](RunConfig& c, const std::string& v) { member(c) = parse_dims(v); }});
  };
#define M(expr) [](RunConfig& c) -> auto& { return c.expr; }
  integer("synth", "seed", M(synth.seed));
  dims("synth", "dims", M(synth.dims));
  integer("synth", "generations", M(synth.generations));
  dbl("synth", "root_radius", M(synth.root_radius));
  dbl("synth", "radius_decay", M(synth.radius_decay));
  dbl("synth", "length_decay", M(synth.length_decay));
  dbl("synth", "branch_angle_deg", M(synth.branch_angle_deg));
  dbl("synth", "jitter_deg", M(synth.jitter_deg));
  dbl("synth", "root_length", M(synth.root_length));

  dbl("image", "tissue_hu", M(image.tissue_hu));
  dbl("image", "lumen_hu", M(image.lumen_hu));
  dbl("image", "wall_hu", M(image.wall_hu));
  dbl("image", "blur_sigma", M(image.blur_sigma));
  dbl("image", "noise_hu", M(image.noise_hu));

  integer("dataset", "train_count", M(dataset.train_count));
  integer("dataset", "val_count", M(dataset.val_count));
  integer("dataset", "test_count", M(dataset.test_count));

  integer("train", "seed", M(train.seed));
  integer("train", "epochs", M(train.epochs));
  integer("train", "warmup_epochs", M(train.warmup_epochs));
  dbl("train", "lr", M(train.lr));
  integer("train", "lr_drop_epoch", M(train.lr_drop_epoch));
  dbl("train", "lr_drop_factor", M(train.lr_drop_factor));
  dbl("train", "adam_beta1", M(train.adam.beta1));
  dbl("train", "adam_beta2", M(train.adam.beta2));
  dbl("train", "adam_eps", M(train.adam.eps));
  integer("train", "crops_per_epoch", M(train.crops_per_epoch));
  dims("train", "crop", M(train.crop));
  boolean("train", "augment", M(train.augment));
  dbl("train", "max_rotation_deg", M(train.max_rotation_deg));

  integer("model", "levels", M(train.model.levels));
  integer("model", "base_channels", M(train.model.base_channels));
  boolean("model", "instance_norm", M(train.model.instance_norm));
  integer("model", "seed", M(train.model.seed));

  f.push_back({"loss", "mode",
               [](const RunConfig& c) {
                 return std::string(c.train.loss.mode == train::LossMode::kDiceOnly ? "dice-only" : "dtpdt");
               },
               [](RunConfig& c, const std::string& v) {
                 if (v == "dtpdt") c.train.loss.mode = train::LossMode::kDtpdt;
                 else if (v == "dice-only") c.train.loss.mode = train::LossMode::kDiceOnly;
                 else throw ConfigError("loss mode must be dtpdt or dice-only, got '" + v + "'");
               }});
  dbl("loss", "alpha_t", M(train.loss.tversky.alpha_t));
  dbl("loss", "beta_t", M(train.loss.tversky.beta_t));
  dbl("loss", "lambda_fg", M(train.loss.weights.lambda_fg));
  dbl("loss", "epsilon", M(train.loss.weights.epsilon));
  dbl("loss", "lambda1", M(train.loss.tps.lambda1));
  dbl("loss", "lambda2", M(train.loss.tps.lambda2));
  dbl("loss", "lambda_cdt", M(train.loss.lambda_cdt));
  integer("loss", "anchors", M(train.loss.anchors));
  dbl("loss", "nu_lr", M(train.loss.nu_lr));
  dbl("loss", "threshold_init", M(train.loss.threshold_init));
  dbl("loss", "tau", M(train.loss.gumbel.tau));

  dbl("cdt", "gamma", M(train.loss.cdt.gamma));
  integer("cdt", "kernel_size", M(train.loss.cdt.kernel_size));

  dbl("eval", "threshold", M(train.threshold));
  dbl("eval", "bd_fraction", M(train.bd_fraction));
  dims("eval", "stride", M(train.val_stride));
#undef M
  return f;
}

}  // namespace

RunConfig parse_config(const std::string& text, const std::string& origin) {
  const auto table = fields();
  std::map<std::string, const Field*> by_name;
  for (const auto& f : table) by_name[f.section + "." + f.key] = &f;

  RunConfig cfg;
  std::istringstream in(text);
  std::string line, section;
  int lineno = 0;
  while (std::getline(in, line)) {
    ++lineno;
    const std::string where = origin + ":" + std::to_string(lineno) + ": ";
    if (const auto hash = line.find('#'); hash != std::string::npos) line.erase(hash);
    line = trim(line);
    if (line.empty()) continue;
    if (line.front() == '[') {
      if (line.back() != ']') throw ConfigError(where + "unterminated section header");
      section = trim(line.substr(1, line.size() - 2));
      continue;
    }
    const auto eq = line.find('=');
    if (eq == std::string::npos) throw ConfigError(where + "expected key = value");
    const std::string key = trim(line.substr(0, eq));
    const std::string value = trim(line.substr(eq + 1));
    const auto it = by_name.find(section + "." + key);
    if (it == by_name.end()) throw ConfigError(where + "unknown key '" + key + "' in [" + section + "]");
    try {
      it->second->set(cfg, value);
    } catch (const ConfigError& e) {
      throw ConfigError(where + key + ": " + e.what());
    }
  }
  cfg.validate();
  return cfg;
}

RunConfig load_config(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw ConfigError("cannot read config " + path.string());
  std::ostringstream ss;
  ss << in.rdbuf();
  return parse_config(ss.str(), path.string());
}

std::string to_config_text(const RunConfig& cfg) {
  std::string out, section;
  for (const auto& f : fields()) {
    if (f.section != section) {
      if (!section.empty()) out += "\n";
      section = f.section;
      out += "[" + section + "]\n";
    }
    out += f.key + " = " + f.get(cfg) + "\n";
  }
  return out;
}

std::string config_hash(const RunConfig& cfg) {
  std::uint64_t h = 0xcbf29ce484222325ULL;
  for (unsigned char c : to_config_text(cfg)) {
    h ^= c;
    h *= 0x100000001b3ULL;
  }
  char buf[17];
  std::snprintf(buf, sizeof buf, "%016llx", static_cast<unsigned long long>(h));
  return buf;
}

}  // namespace dtpdt
