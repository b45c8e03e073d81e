#include "dtpdt/model.hpp"

#include <cmath>
#include <random>

#include "dtpdt/errors.hpp"

namespace dtpdt {

namespace {
constexpr double kSlope = 0.01;
}

void ToyUNetConfig::validate() const {
  if (levels < 1 || levels > 4) throw ConfigError("model: levels must be in [1, 4]");
  if (base_channels < 1) throw ConfigError("model: base_channels must be >= 1");
}

ToyUNet::ToyUNet(const ToyUNetConfig& config) : config_(config) {
  config_.validate();
  std::uint64_t stream = config_.seed;
  int cin = 1;
  for (int l = 0; l <= config_.levels; ++l) {
    const int c = config_.base_channels << l;
    const std::string tag = l == config_.levels ? "mid" : "enc" + std::to_string(l);
    enc_.push_back(add_conv(tag + ".conv1", cin, c, 3, stream));
    enc_.push_back(add_conv(tag + ".conv2", c, c, 3, stream));
    cin = c;
  }
  for (int l = config_.levels - 1; l >= 0; --l) {
    const int c = config_.base_channels << l;
    const std::string tag = "dec" + std::to_string(l);
    dec_.push_back(add_conv(tag + ".conv1", cin + c, c, 3, stream));
    dec_.push_back(add_conv(tag + ".conv2", c, c, 3, stream));
    cin = c;
  }
  head_ = add_conv("head", cin, 2, 1, stream);
}

ToyUNet::Conv ToyUNet::add_conv(const std::string& name, int cin, int cout, int ksize,
                                std::uint64_t& stream) {
  // Each layer draws from its own generator so adding layers elsewhere
  // does not shift the others.
  std::mt19937_64 rng(stream++ * 0x9E3779B97F4A7C15ULL + 17);
  const int taps = ksize * ksize * ksize;
  std::normal_distribution<double> he(0.0, std::sqrt(2.0 / (cin * taps)));
  std::vector<double> w(static_cast<std::size_t>(cout) * cin * taps);
  for (double& v : w) v = he(rng);
  Conv c{static_cast<int>(params_.size()), cout, ksize};
  const int n = static_cast<int>(w.size());
  params_.push_back({name + ".weight", {cout, cin, ksize, ksize, ksize},
                     ad::parameter(Tensor(1, Dims{n, 1, 1}, std::move(w)))});
  params_.push_back({name + ".bias", {cout}, ad::parameter(Tensor(1, Dims{cout, 1, 1}, 0.0))});
  return c;
}

ad::DiffNode ToyUNet::apply(const Conv& c, const ad::DiffNode& x) const {
  return ad::conv_layer(x, params_[c.index].node, params_[c.index + 1].node, c.out_channels,
                        c.ksize);
}

ad::DiffNode ToyUNet::block(const Conv& a, const Conv& b, const ad::DiffNode& x) const {
  auto layer = [&](const Conv& c, const ad::DiffNode& in) {
    ad::DiffNode h = apply(c, in);
    if (config_.instance_norm) h = ad::instance_norm(h);
    return ad::leaky_relu(h, kSlope);
  };
  return layer(b, layer(a, x));
}

ad::DiffNode ToyUNet::forward(const ad::DiffNode& input) const {
  const Tensor& x = input.value();
  if (x.channels != 1) throw DataError("model: input must have one channel");
  const int div = 1 << config_.levels;
  if (x.dims.nx % div || x.dims.ny % div || x.dims.nz % div) {
    throw DataError("model: input dims must be divisible by " + std::to_string(div));
  }
  std::vector<ad::DiffNode> skips;
  ad::DiffNode h = input;
  for (int l = 0; l < config_.levels; ++l) {
    h = block(enc_[2 * l], enc_[2 * l + 1], h);
    skips.push_back(h);
    h = ad::maxpool_down2(h);
  }
  h = block(enc_[2 * config_.levels], enc_[2 * config_.levels + 1], h);
  for (int i = 0; i < config_.levels; ++i) {
    h = ad::concat_channels(ad::upsample2(h), skips[config_.levels - 1 - i]);
    h = block(dec_[2 * i], dec_[2 * i + 1], h);
  }
  return apply(head_, h);
}

std::size_t ToyUNet::parameter_count() const {
  std::size_t n = 0;
  for (const auto& p : params_) n += p.node.value().size();
  return n;
}

}  // namespace dtpdt
