#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "dtpdt/autodiff.hpp"

namespace dtpdt {

struct ToyUNetConfig {
  int levels = 2;
  int base_channels = 8;
  bool instance_norm = true;
  std::uint64_t seed = 1;
  void validate() const;
};

struct NamedParam {
  std::string name;
  std::vector<int> shape;
  ad::DiffNode node;
};

// Small 3D U-Net: two conv-norm-lrelu layers per level, max-pool down,
// nearest upsampling with skip concatenation, 1x1x1 head with two logits
// (background, foreground).
class ToyUNet {
 public:
  explicit ToyUNet(const ToyUNetConfig& config);

  // Input holds one channel; spatial dims must be divisible by 2^levels.
  // Returns a two-channel logit map of the same spatial size.
  ad::DiffNode forward(const ad::DiffNode& input) const;

  const ToyUNetConfig& config() const { return config_; }
  std::vector<NamedParam>& parameters() { return params_; }
  const std::vector<NamedParam>& parameters() const { return params_; }
  std::size_t parameter_count() const;

 private:
  struct Conv {
    int index;  // into params_ for the weight; bias follows
    int out_channels;
    int ksize;
  };

  Conv add_conv(const std::string& name, int cin, int cout, int ksize, std::uint64_t& stream);
  ad::DiffNode apply(const Conv& c, const ad::DiffNode& x) const;
  ad::DiffNode block(const Conv& a, const Conv& b, const ad::DiffNode& x) const;

  ToyUNetConfig config_;
  std::vector<NamedParam> params_;
  std::vector<Conv> enc_;   // 2 per level plus 2 for the bottleneck
  std::vector<Conv> dec_;   // 2 per level, deepest first
  Conv head_{};
};

}  // namespace dtpdt
