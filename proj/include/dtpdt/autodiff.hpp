#pragma once

#include <functional>
#include <memory>
#include <string>
#include <utility>
#include <vector>

#include "dtpdt/volume.hpp"

namespace dtpdt::ad {

class AutodiffError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

namespace detail {
struct NodeImpl;
}

// Handle to a value in the recorded computation graph. Copies share the
// same node. Graphs are built eagerly during the forward pass and
// released by backward().
class DiffNode {
 public:
  DiffNode() = default;

  const Tensor& value() const;
  // Gradient accumulator; zero-filled until a backward pass reaches it.
  const Tensor& grad() const;
  bool requires_grad() const;
  bool defined() const { return impl_ != nullptr; }
  const std::string& op() const;

  // Only meaningful on leaves (parameters). Used by optimizers.
  Tensor& mutable_value();
  void zero_grad();

  // Scalar shorthand; throws unless the value holds one element.
  double item() const;

  explicit DiffNode(std::shared_ptr<detail::NodeImpl> impl) : impl_(std::move(impl)) {}
  detail::NodeImpl* impl() const { return impl_.get(); }
  const std::shared_ptr<detail::NodeImpl>& shared() const { return impl_; }

 private:
  std::shared_ptr<detail::NodeImpl> impl_;
};

namespace detail {

// Backward rule: reads the node's own grad and accumulates into parents.
using BackwardFn = std::function<void(NodeImpl& self)>;

struct NodeImpl {
  Tensor value;
  Tensor grad;
  bool requires_grad = false;
  bool has_grad = false;
  bool released = false;
  std::string op;
  std::vector<std::shared_ptr<NodeImpl>> parents;
  BackwardFn backward;

  // Allocates the accumulator on first use.
  Tensor& grad_buffer();
};

}  // namespace detail

// Leaves.
DiffNode constant(Tensor value);
DiffNode constant(const Volume& value);
DiffNode scalar(double v);
DiffNode parameter(Tensor value);
DiffNode parameter(const Volume& value);

// Builds a node from a computed value and a backward rule. Exposed so that
// downstream modules can define fused operations; the node requires grad
// iff any parent does.
DiffNode make_node(std::string op, Tensor value, std::vector<DiffNode> parents,
                   detail::BackwardFn backward);

// While alive, new nodes on this thread record no backward rules.
class NoGradGuard {
 public:
  NoGradGuard();
  ~NoGradGuard();
  NoGradGuard(const NoGradGuard&) = delete;
  NoGradGuard& operator=(const NoGradGuard&) = delete;

 private:
  bool previous_;
};

// Runs reverse-mode accumulation from a scalar root, then releases the
// graph. Calling it again on the same root is an error.
void backward(const DiffNode& root);

// ---- elementwise -------------------------------------------------------
enum class OpKind { kAdd, kSub, kMul, kNeg, kLog, kExp, kClampMin, kScale };

DiffNode elementwise(OpKind kind, const DiffNode& a, const DiffNode* b = nullptr,
                     double c = 0.0);

DiffNode add(const DiffNode& a, const DiffNode& b);
DiffNode sub(const DiffNode& a, const DiffNode& b);
DiffNode mul(const DiffNode& a, const DiffNode& b);
DiffNode div(const DiffNode& a, const DiffNode& b);
DiffNode neg(const DiffNode& a);
DiffNode log(const DiffNode& a);
DiffNode exp(const DiffNode& a);
DiffNode clamp_min(const DiffNode& a, double floor);
DiffNode scale(const DiffNode& a, double c);
DiffNode add_scalar(const DiffNode& a, double c);
DiffNode square(const DiffNode& a);
DiffNode leaky_relu(const DiffNode& a, double slope);
// Multiplies by a constant tensor of the same shape.
DiffNode mul_const(const DiffNode& a, const Tensor& c);
DiffNode mul_const(const DiffNode& a, const Volume& c);
DiffNode add_const(const DiffNode& a, const Tensor& c);

inline DiffNode operator+(const DiffNode& a, const DiffNode& b) { return add(a, b); }
inline DiffNode operator-(const DiffNode& a, const DiffNode& b) { return sub(a, b); }
inline DiffNode operator*(const DiffNode& a, const DiffNode& b) { return mul(a, b); }
inline DiffNode operator/(const DiffNode& a, const DiffNode& b) { return div(a, b); }
inline DiffNode operator-(const DiffNode& a) { return neg(a); }

// ---- reductions --------------------------------------------------------
DiffNode reduce_sum(const DiffNode& a);
DiffNode reduce_sum(const DiffNode& a, const Volume& mask);
DiffNode mean(const DiffNode& a);

// ---- sliding-window ops ------------------------------------------------

// Constant convolution kernel with odd extents, centered anchor.
class Kernel3 {
 public:
  Kernel3(int kx, int ky, int kz, std::vector<double> weights);
  static Kernel3 delta(int k = 1);

  int kx() const { return kx_; }
  int ky() const { return ky_; }
  int kz() const { return kz_; }
  double at(int ox, int oy, int oz) const {
    return w_[(static_cast<std::size_t>(oz + kz_ / 2) * ky_ + (oy + ky_ / 2)) * kx_ +
              (ox + kx_ / 2)];
  }
  const std::vector<double>& weights() const { return w_; }

 private:
  int kx_, ky_, kz_;
  std::vector<double> w_;
};

// Same-size correlation with zero padding, applied to every channel.
// Kernel taps are constants.
DiffNode conv3d(const DiffNode& input, const Kernel3& kernel);
// Same result as conv3d when the input vanishes outside `support`. Cost
// scales with the support size; gradients are produced on the support only.
DiffNode conv3d_support(const DiffNode& input, const Kernel3& kernel, const Volume& support);

// 3x3x3 window, stride 1, zero padding. Gradient goes to the first maximal
// tap in x-fastest scan order.
DiffNode maxpool3d(const DiffNode& input);

// Two-way softmax across a pair of single-channel maps.
std::pair<DiffNode, DiffNode> channel_softmax(const DiffNode& a, const DiffNode& b);

// ---- network layers ----------------------------------------------------

// Multi-channel 3x3x3 (or 1x1x1) convolution with learnable weights of
// shape [cout][cin][k][k][k] stored as Tensor(cout*cin*k^3 channels=1).
DiffNode conv_layer(const DiffNode& input, const DiffNode& weight, const DiffNode& bias,
                    int out_channels, int ksize);
DiffNode instance_norm(const DiffNode& input, double eps = 1e-5);
// 2x2x2 max pooling with stride 2; dims must be even.
DiffNode maxpool_down2(const DiffNode& input);
// Nearest-neighbour 2x upsampling.
DiffNode upsample2(const DiffNode& input);
DiffNode concat_channels(const DiffNode& a, const DiffNode& b);
DiffNode select_channel(const DiffNode& input, int c);

}  // namespace dtpdt::ad
