#include "dtpdt/autodiff.hpp"

#include <algorithm>
#include <cmath>
#include <stdexcept>
#include <unordered_set>

namespace dtpdt::ad {

using detail::NodeImpl;

Tensor& NodeImpl::grad_buffer() {
  if (!has_grad) {
    grad = Tensor(value.channels, value.dims, 0.0);
    has_grad = true;
  }
  return grad;
}

const Tensor& DiffNode::value() const { return impl_->value; }

const Tensor& DiffNode::grad() const { return impl_->grad_buffer(); }

bool DiffNode::requires_grad() const { return impl_->requires_grad; }

const std::string& DiffNode::op() const { return impl_->op; }

Tensor& DiffNode::mutable_value() { return impl_->value; }

void DiffNode::zero_grad() {
  if (impl_->has_grad) std::fill(impl_->grad.data.begin(), impl_->grad.data.end(), 0.0);
}

double DiffNode::item() const {
  if (!impl_->value.is_scalar()) throw AutodiffError("item() on a non-scalar node");
  return impl_->value.data[0];
}

namespace {

thread_local bool g_no_grad = false;

DiffNode leaf(Tensor value, bool requires_grad, const char* op) {
  auto n = std::make_shared<NodeImpl>();
  n->value = std::move(value);
  n->requires_grad = requires_grad;
  n->op = op;
  return DiffNode(std::move(n));
}

void require_same_shape(const DiffNode& a, const DiffNode& b, const char* op) {
  if (!a.value().same_shape(b.value())) {
    throw AutodiffError(std::string(op) + ": operand shape mismatch");
  }
}

// Parent accessor inside backward rules; null if it does not need a grad.
Tensor* parent_grad(NodeImpl& self, std::size_t i) {
  NodeImpl& p = *self.parents[i];
  return p.requires_grad ? &p.grad_buffer() : nullptr;
}

const Tensor& parent_value(NodeImpl& self, std::size_t i) { return self.parents[i]->value; }

template <class F, class DF>
DiffNode unary(const char* op, const DiffNode& a, F f, DF df) {
  const Tensor& x = a.value();
  Tensor y(x.channels, x.dims);
  for (std::size_t i = 0; i < x.size(); ++i) y.data[i] = f(x.data[i]);
  return make_node(op, std::move(y), {a}, [df](NodeImpl& self) {
    Tensor* ga = parent_grad(self, 0);
    if (!ga) return;
    const Tensor& x = parent_value(self, 0);
    for (std::size_t i = 0; i < x.size(); ++i) {
      ga->data[i] += self.grad.data[i] * df(x.data[i], self.value.data[i]);
    }
  });
}

}  // namespace

DiffNode constant(Tensor value) { return leaf(std::move(value), false, "constant"); }
DiffNode constant(const Volume& value) { return constant(Tensor::from(value)); }
DiffNode scalar(double v) { return constant(Tensor::scalar(v)); }
DiffNode parameter(Tensor value) { return leaf(std::move(value), true, "parameter"); }
DiffNode parameter(const Volume& value) { return parameter(Tensor::from(value)); }

NoGradGuard::NoGradGuard() : previous_(g_no_grad) { g_no_grad = true; }

NoGradGuard::~NoGradGuard() { g_no_grad = previous_; }

DiffNode make_node(std::string op, Tensor value, std::vector<DiffNode> parents,
                   detail::BackwardFn backward) {
  auto n = std::make_shared<NodeImpl>();
  n->value = std::move(value);
  n->op = std::move(op);
  if (g_no_grad) return DiffNode(std::move(n));
  for (const auto& p : parents) {
    if (p.impl()->released) {
      throw AutodiffError(n->op + ": operand belongs to a released graph");
    }
    n->requires_grad = n->requires_grad || p.requires_grad();
  }
  if (n->requires_grad) {
    n->parents.reserve(parents.size());
    for (auto& p : parents) n->parents.push_back(p.shared());
    n->backward = std::move(backward);
  }
  return DiffNode(std::move(n));
}

void backward(const DiffNode& root) {
  NodeImpl* r = root.impl();
  if (!r) throw AutodiffError("backward: undefined root");
  if (!r->value.is_scalar()) throw AutodiffError("backward: root must be a scalar");
  if (r->released) {
    throw AutodiffError("backward: graph already consumed; reset gradients and rebuild");
  }
  if (!r->requires_grad) return;

  // Iterative post-order DFS gives a topological order.
  std::vector<NodeImpl*> order;
  std::unordered_set<NodeImpl*> visited;
  std::vector<std::pair<NodeImpl*, std::size_t>> stack;
  stack.emplace_back(r, 0);
  visited.insert(r);
  while (!stack.empty()) {
    auto& [node, next] = stack.back();
    if (next < node->parents.size()) {
      NodeImpl* p = node->parents[next++].get();
      if (p->requires_grad && !visited.count(p)) {
        visited.insert(p);
        stack.emplace_back(p, 0);
      }
    } else {
      order.push_back(node);
      stack.pop_back();
    }
  }

  r->grad_buffer().data[0] += 1.0;
  for (auto it = order.rbegin(); it != order.rend(); ++it) {
    NodeImpl* n = *it;
    if (n->backward) n->backward(*n);
  }
  // Free interior graph state; leaves keep their accumulated grads.
  for (NodeImpl* n : order) {
    if (n->parents.empty()) continue;
    n->parents.clear();
    n->backward = nullptr;
    n->released = true;
  }
}

// ---- elementwise -------------------------------------------------------

DiffNode elementwise(OpKind kind, const DiffNode& a, const DiffNode* b, double c) {
  switch (kind) {
    case OpKind::kAdd:
    case OpKind::kSub:
    case OpKind::kMul:
      if (!b) throw AutodiffError("elementwise: binary op needs two operands");
      break;
    default:
      break;
  }
  switch (kind) {
    case OpKind::kAdd: return add(a, *b);
    case OpKind::kSub: return sub(a, *b);
    case OpKind::kMul: return mul(a, *b);
    case OpKind::kNeg: return neg(a);
    case OpKind::kLog: return log(a);
    case OpKind::kExp: return exp(a);
    case OpKind::kClampMin: return clamp_min(a, c);
    case OpKind::kScale: return scale(a, c);
  }
  throw AutodiffError("elementwise: unknown op");
}

DiffNode add(const DiffNode& a, const DiffNode& b) {
  require_same_shape(a, b, "add");
  Tensor y = a.value();
  for (std::size_t i = 0; i < y.size(); ++i) y.data[i] += b.value().data[i];
  return make_node("add", std::move(y), {a, b}, [](NodeImpl& self) {
    for (std::size_t k = 0; k < 2; ++k) {
      if (Tensor* g = parent_grad(self, k)) {
        for (std::size_t i = 0; i < g->size(); ++i) g->data[i] += self.grad.data[i];
      }
    }
  });
}

DiffNode sub(const DiffNode& a, const DiffNode& b) {
  require_same_shape(a, b, "sub");
  Tensor y = a.value();
  for (std::size_t i = 0; i < y.size(); ++i) y.data[i] -= b.value().data[i];
  return make_node("sub", std::move(y), {a, b}, [](NodeImpl& self) {
    if (Tensor* g = parent_grad(self, 0)) {
      for (std::size_t i = 0; i < g->size(); ++i) g->data[i] += self.grad.data[i];
    }
    if (Tensor* g = parent_grad(self, 1)) {
      for (std::size_t i = 0; i < g->size(); ++i) g->data[i] -= self.grad.data[i];
    }
  });
}

DiffNode mul(const DiffNode& a, const DiffNode& b) {
  require_same_shape(a, b, "mul");
  Tensor y = a.value();
  for (std::size_t i = 0; i < y.size(); ++i) y.data[i] *= b.value().data[i];
  return make_node("mul", std::move(y), {a, b}, [](NodeImpl& self) {
    const Tensor& av = parent_value(self, 0);
    const Tensor& bv = parent_value(self, 1);
    if (Tensor* g = parent_grad(self, 0)) {
      for (std::size_t i = 0; i < g->size(); ++i) g->data[i] += self.grad.data[i] * bv.data[i];
    }
    if (Tensor* g = parent_grad(self, 1)) {
      for (std::size_t i = 0; i < g->size(); ++i) g->data[i] += self.grad.data[i] * av.data[i];
    }
  });
}

DiffNode div(const DiffNode& a, const DiffNode& b) {
  require_same_shape(a, b, "div");
  Tensor y = a.value();
  for (std::size_t i = 0; i < y.size(); ++i) {
    if (b.value().data[i] == 0.0) throw AutodiffError("div: division by zero");
    y.data[i] /= b.value().data[i];
  }
  return make_node("div", std::move(y), {a, b}, [](NodeImpl& self) {
    const Tensor& av = parent_value(self, 0);
    const Tensor& bv = parent_value(self, 1);
    if (Tensor* g = parent_grad(self, 0)) {
      for (std::size_t i = 0; i < g->size(); ++i) g->data[i] += self.grad.data[i] / bv.data[i];
    }
    if (Tensor* g = parent_grad(self, 1)) {
      for (std::size_t i = 0; i < g->size(); ++i) {
        g->data[i] -= self.grad.data[i] * av.data[i] / (bv.data[i] * bv.data[i]);
      }
    }
  });
}

DiffNode neg(const DiffNode& a) {
  return unary("neg", a, [](double x) { return -x; }, [](double, double) { return -1.0; });
}

DiffNode log(const DiffNode& a) {
  for (double v : a.value().data) {
    if (!(v > 0.0)) throw AutodiffError("log: non-positive operand; apply clamp_min first");
  }
  return unary("log", a, [](double x) { return std::log(x); },
               [](double x, double) { return 1.0 / x; });
}

DiffNode exp(const DiffNode& a) {
  return unary("exp", a, [](double x) { return std::exp(x); },
               [](double, double y) { return y; });
}

DiffNode clamp_min(const DiffNode& a, double floor) {
  return unary("clamp_min", a, [floor](double x) { return x < floor ? floor : x; },
               [floor](double x, double) { return x < floor ? 0.0 : 1.0; });
}

DiffNode scale(const DiffNode& a, double c) {
  return unary("scale", a, [c](double x) { return c * x; }, [c](double, double) { return c; });
}

DiffNode add_scalar(const DiffNode& a, double c) {
  return unary("add_scalar", a, [c](double x) { return x + c; },
               [](double, double) { return 1.0; });
}

DiffNode square(const DiffNode& a) {
  return unary("square", a, [](double x) { return x * x; },
               [](double x, double) { return 2.0 * x; });
}

DiffNode leaky_relu(const DiffNode& a, double slope) {
  return unary("leaky_relu", a, [slope](double x) { return x > 0.0 ? x : slope * x; },
               [slope](double x, double) { return x > 0.0 ? 1.0 : slope; });
}

DiffNode mul_const(const DiffNode& a, const Tensor& c) {
  if (!a.value().same_shape(c)) throw AutodiffError("mul_const: shape mismatch");
  Tensor y = a.value();
  for (std::size_t i = 0; i < y.size(); ++i) y.data[i] *= c.data[i];
  return make_node("mul_const", std::move(y), {a}, [c](NodeImpl& self) {
    if (Tensor* g = parent_grad(self, 0)) {
      for (std::size_t i = 0; i < g->size(); ++i) g->data[i] += self.grad.data[i] * c.data[i];
    }
  });
}

DiffNode mul_const(const DiffNode& a, const Volume& c) { return mul_const(a, Tensor::from(c)); }

DiffNode add_const(const DiffNode& a, const Tensor& c) {
  if (!a.value().same_shape(c)) throw AutodiffError("add_const: shape mismatch");
  Tensor y = a.value();
  for (std::size_t i = 0; i < y.size(); ++i) y.data[i] += c.data[i];
  return make_node("add_const", std::move(y), {a}, [](NodeImpl& self) {
    if (Tensor* g = parent_grad(self, 0)) {
      for (std::size_t i = 0; i < g->size(); ++i) g->data[i] += self.grad.data[i];
    }
  });
}

// ---- reductions --------------------------------------------------------

DiffNode reduce_sum(const DiffNode& a) {
  double s = 0.0;
  for (double v : a.value().data) s += v;
  return make_node("reduce_sum", Tensor::scalar(s), {a}, [](NodeImpl& self) {
    if (Tensor* g = parent_grad(self, 0)) {
      const double up = self.grad.data[0];
      for (double& v : g->data) v += up;
    }
  });
}

DiffNode reduce_sum(const DiffNode& a, const Volume& mask) {
  const Tensor& x = a.value();
  if (x.channels != 1 || x.dims != mask.dims()) {
    throw AutodiffError("reduce_sum: mask shape mismatch");
  }
  double s = 0.0;
  for (std::size_t i = 0; i < x.size(); ++i) s += x.data[i] * mask[i];
  return make_node("reduce_sum_masked", Tensor::scalar(s), {a}, [mask](NodeImpl& self) {
    if (Tensor* g = parent_grad(self, 0)) {
      const double up = self.grad.data[0];
      for (std::size_t i = 0; i < g->size(); ++i) g->data[i] += up * mask[i];
    }
  });
}

DiffNode mean(const DiffNode& a) {
  return scale(reduce_sum(a), 1.0 / static_cast<double>(a.value().size()));
}

// ---- sliding-window ops ------------------------------------------------

Kernel3::Kernel3(int kx, int ky, int kz, std::vector<double> weights)
    : kx_(kx), ky_(ky), kz_(kz), w_(std::move(weights)) {
  if (kx < 1 || ky < 1 || kz < 1 || kx % 2 == 0 || ky % 2 == 0 || kz % 2 == 0) {
    throw AutodiffError("Kernel3: sizes must be odd and positive");
  }
  if (w_.size() != static_cast<std::size_t>(kx) * ky * kz) {
    throw AutodiffError("Kernel3: weight count does not match size");
  }
  for (double w : w_) {
    if (!std::isfinite(w)) throw AutodiffError("Kernel3: non-finite weight");
  }
}

Kernel3 Kernel3::delta(int k) {
  std::vector<double> w(static_cast<std::size_t>(k) * k * k, 0.0);
  w[w.size() / 2] = 1.0;
  return Kernel3(k, k, k, std::move(w));
}

namespace {

// Calls fn(dst_offset, src_offset, count) for every contiguous x-run where
// dst voxel (x,y,z) pairs with src voxel (x+ox, y+oy, z+oz), both in range.
template <class Fn>
void for_each_shifted_row(const Dims& d, int ox, int oy, int oz, Fn&& fn) {
  const int x0 = std::max(0, -ox), x1 = std::min(d.nx, d.nx - ox);
  const int y0 = std::max(0, -oy), y1 = std::min(d.ny, d.ny - oy);
  const int z0 = std::max(0, -oz), z1 = std::min(d.nz, d.nz - oz);
  if (x0 >= x1) return;
  const std::size_t n = static_cast<std::size_t>(x1 - x0);
  for (int z = z0; z < z1; ++z) {
    for (int y = y0; y < y1; ++y) {
      fn(d.index(x0, y, z), d.index(x0 + ox, y + oy, z + oz), n);
    }
  }
}

}  // namespace

DiffNode conv3d(const DiffNode& input, const Kernel3& kernel) {
  const Tensor& x = input.value();
  const Dims d = x.dims;
  const int rx = kernel.kx() / 2, ry = kernel.ky() / 2, rz = kernel.kz() / 2;
  Tensor y(x.channels, d, 0.0);
  for (int c = 0; c < x.channels; ++c) {
    const double* src = x.channel(c).data();
    double* dst = y.channel(c).data();
    for (int oz = -rz; oz <= rz; ++oz)
      for (int oy = -ry; oy <= ry; ++oy)
        for (int ox = -rx; ox <= rx; ++ox) {
          const double w = kernel.at(ox, oy, oz);
          if (w == 0.0) continue;
          for_each_shifted_row(d, ox, oy, oz, [&](std::size_t o, std::size_t s, std::size_t n) {
            for (std::size_t i = 0; i < n; ++i) dst[o + i] += w * src[s + i];
          });
        }
  }
  return make_node("conv3d", std::move(y), {input}, [kernel](NodeImpl& self) {
    Tensor* g = parent_grad(self, 0);
    if (!g) return;
    const Dims d = self.value.dims;
    const int rx = kernel.kx() / 2, ry = kernel.ky() / 2, rz = kernel.kz() / 2;
    for (int c = 0; c < g->channels; ++c) {
      const double* up = self.grad.channel(c).data();
      double* gin = g->channel(c).data();
      for (int oz = -rz; oz <= rz; ++oz)
        for (int oy = -ry; oy <= ry; ++oy)
          for (int ox = -rx; ox <= rx; ++ox) {
            const double w = kernel.at(ox, oy, oz);
            if (w == 0.0) continue;
            for_each_shifted_row(d, ox, oy, oz,
                                 [&](std::size_t o, std::size_t s, std::size_t n) {
                                   for (std::size_t i = 0; i < n; ++i) gin[s + i] += w * up[o + i];
                                 });
          }
    }
  });
}

DiffNode conv3d_support(const DiffNode& input, const Kernel3& kernel, const Volume& support) {
  const Tensor& x = input.value();
  const Dims d = x.dims;
  if (support.dims() != d) throw AutodiffError("conv3d_support: support shape mismatch");
  auto sites = std::make_shared<std::vector<std::size_t>>();
  for (std::size_t i = 0; i < support.size(); ++i) {
    if (support[i] != 0.0) sites->push_back(i);
  }
  const int rx = kernel.kx() / 2, ry = kernel.ky() / 2, rz = kernel.kz() / 2;
  auto kp = std::make_shared<const Kernel3>(kernel);
  // Visits every in-range output p = s - o for site s, passing the x-run.
  auto visit = [d, rx, ry, rz, kp](std::size_t s, auto&& fn) {
    const Kernel3& kernel = *kp;
    const auto [sx, sy, sz] = d.coords(s);
    const int ox0 = std::max(-rx, sx - d.nx + 1), ox1 = std::min(rx, sx);
    for (int oz = std::max(-rz, sz - d.nz + 1); oz <= std::min(rz, sz); ++oz)
      for (int oy = std::max(-ry, sy - d.ny + 1); oy <= std::min(ry, sy); ++oy) {
        const double* w = &kernel.weights()[(static_cast<std::size_t>(oz + rz) * kernel.ky() +
                                             (oy + ry)) * kernel.kx()];
        const std::size_t row = d.index(0, sy - oy, sz - oz);
        fn(w, row, sx, ox0, ox1);
      }
  };
  Tensor y(x.channels, d, 0.0);
  const std::size_t nv = x.voxels();
  for (int c = 0; c < x.channels; ++c) {
    const double* src = x.data.data() + c * nv;
    double* dst = y.data.data() + c * nv;
    for (std::size_t s : *sites) {
      const double v = src[s];
      if (v == 0.0) continue;
      visit(s, [&](const double* w, std::size_t row, int sx, int ox0, int ox1) {
        for (int ox = ox0; ox <= ox1; ++ox) dst[row + sx - ox] += w[ox + rx] * v;
      });
    }
  }
  return make_node("conv3d_support", std::move(y), {input},
                   [sites, visit, rx](NodeImpl& self) {
                     Tensor* g = parent_grad(self, 0);
                     if (!g) return;
                     const std::size_t nv = g->voxels();
                     for (int c = 0; c < g->channels; ++c) {
                       const double* up = self.grad.data.data() + c * nv;
                       double* gin = g->data.data() + c * nv;
                       for (std::size_t s : *sites) {
                         double acc = 0.0;
                         visit(s, [&](const double* w, std::size_t row, int sx, int ox0, int ox1) {
                           for (int ox = ox0; ox <= ox1; ++ox) acc += w[ox + rx] * up[row + sx - ox];
                         });
                         gin[s] += acc;
                       }
                     }
                   });
}

DiffNode maxpool3d(const DiffNode& input) {
  const Tensor& x = input.value();
  const Dims d = x.dims;
  Tensor y(x.channels, d, 0.0);
  // Flat source index of the winning tap, or -1 for a padding tap.
  auto arg = std::make_shared<std::vector<long>>(x.size(), -1L);
  const std::size_t nv = x.voxels();
  for (int c = 0; c < x.channels; ++c) {
    const double* src = x.channel(c).data();
    const std::size_t base = static_cast<std::size_t>(c) * nv;
    for (int z = 0; z < d.nz; ++z)
      for (int yy = 0; yy < d.ny; ++yy)
        for (int xx = 0; xx < d.nx; ++xx) {
          double best = 0.0;
          long best_idx = -1;
          bool first = true;
          for (int oz = -1; oz <= 1; ++oz)
            for (int oy = -1; oy <= 1; ++oy)
              for (int ox = -1; ox <= 1; ++ox) {
                const int sx = xx + ox, sy = yy + oy, sz = z + oz;
                double v = 0.0;
                long idx = -1;
                if (d.contains(sx, sy, sz)) {
                  idx = static_cast<long>(d.index(sx, sy, sz));
                  v = src[idx];
                }
                if (first || v > best) {
                  best = v;
                  best_idx = idx;
                  first = false;
                }
              }
          const std::size_t o = base + d.index(xx, yy, z);
          y.data[o] = best;
          (*arg)[o] = best_idx < 0 ? -1L : static_cast<long>(base) + best_idx;
        }
  }
  return make_node("maxpool3d", std::move(y), {input}, [arg](NodeImpl& self) {
    Tensor* g = parent_grad(self, 0);
    if (!g) return;
    for (std::size_t i = 0; i < arg->size(); ++i) {
      const long s = (*arg)[i];
      if (s >= 0) g->data[static_cast<std::size_t>(s)] += self.grad.data[i];
    }
  });
}

namespace {

DiffNode sigmoid_of_difference(const char* op, const DiffNode& hi, const DiffNode& lo) {
  // value = 1 / (1 + exp(lo - hi)); parent 0 is hi, parent 1 is lo.
  const Tensor& a = hi.value();
  const Tensor& b = lo.value();
  Tensor y(a.channels, a.dims);
  for (std::size_t i = 0; i < y.size(); ++i) y.data[i] = 1.0 / (1.0 + std::exp(b.data[i] - a.data[i]));
  return make_node(op, std::move(y), {hi, lo}, [](NodeImpl& self) {
    Tensor* gh = parent_grad(self, 0);
    Tensor* gl = parent_grad(self, 1);
    for (std::size_t i = 0; i < self.value.size(); ++i) {
      const double s = self.value.data[i];
      const double t = self.grad.data[i] * s * (1.0 - s);
      if (gh) gh->data[i] += t;
      if (gl) gl->data[i] -= t;
    }
  });
}

}  // namespace

std::pair<DiffNode, DiffNode> channel_softmax(const DiffNode& a, const DiffNode& b) {
  require_same_shape(a, b, "channel_softmax");
  return {sigmoid_of_difference("softmax_c1", a, b), sigmoid_of_difference("softmax_c2", b, a)};
}

// ---- network layers ----------------------------------------------------

namespace {

// Zero-bordered copy of each channel; taps become flat shifts of the buffer.
struct Padded {
  Dims pd;
  int r = 0;
  std::size_t lo = 0, hi = 0;  // flat range whose every tap shift stays in bounds
  std::vector<double> buf;     // channels * pd.count()

  Padded(const Dims& d, int radius, int channels) : r(radius) {
    pd = Dims{d.nx + 2 * r, d.ny + 2 * r, d.nz + 2 * r};
    lo = pd.index(r, r, r);
    hi = pd.index(d.nx + r - 1, d.ny + r - 1, d.nz + r - 1) + 1;
    buf.assign(static_cast<std::size_t>(channels) * pd.count(), 0.0);
  }
  double* channel(int c) { return buf.data() + static_cast<std::size_t>(c) * pd.count(); }
  long shift(int ox, int oy, int oz) const {
    return (static_cast<long>(oz) * pd.ny + oy) * pd.nx + ox;
  }
  void load(int c, const double* src, const Dims& d) {
    double* dst = channel(c);
    for (int z = 0; z < d.nz; ++z)
      for (int y = 0; y < d.ny; ++y)
        std::copy_n(src + d.index(0, y, z), d.nx, dst + pd.index(r, y + r, z + r));
  }
  void store_add(int c, double* dst, const Dims& d) {
    const double* src = channel(c);
    for (int z = 0; z < d.nz; ++z)
      for (int y = 0; y < d.ny; ++y) {
        const double* s = src + pd.index(r, y + r, z + r);
        double* o = dst + d.index(0, y, z);
        for (int x = 0; x < d.nx; ++x) o[x] += s[x];
      }
  }
};

constexpr std::size_t kBlock = 256;

// out[a][p] += sum_b sum_t w[a*sa + b*sb + t] * in[b][p + sign*shift[t]]
// over p in [lo, hi). Four output channels share each input load.
void blocked_conv(Padded& out, int na, Padded& in, int nb, const std::vector<long>& shifts,
                  long sign, const double* w, std::size_t sa, std::size_t sb) {
  const int taps = static_cast<int>(shifts.size());
  const std::size_t lo = in.lo, hi = in.hi;
  alignas(64) double acc[4][kBlock];
  for (int a0 = 0; a0 < na; a0 += 4) {
    const int nc = std::min(4, na - a0);
    for (std::size_t i0 = lo; i0 < hi; i0 += kBlock) {
      const std::size_t n = std::min(kBlock, hi - i0);
      for (int c = 0; c < nc; ++c) std::fill_n(acc[c], n, 0.0);
      for (int b = 0; b < nb; ++b) {
        const double* src = in.channel(b) + i0;
        for (int t = 0; t < taps; ++t) {
          const double* __restrict xs = src + sign * shifts[t];
          const double* wt = w + b * sb + t;
          if (nc == 4) {
            const double w0 = wt[a0 * sa], w1 = wt[(a0 + 1) * sa];
            const double w2 = wt[(a0 + 2) * sa], w3 = wt[(a0 + 3) * sa];
            for (std::size_t i = 0; i < n; ++i) {
              const double v = xs[i];
              acc[0][i] += w0 * v;
              acc[1][i] += w1 * v;
              acc[2][i] += w2 * v;
              acc[3][i] += w3 * v;
            }
          } else {
            for (int c = 0; c < nc; ++c) {
              const double wc = wt[(a0 + c) * sa];
              for (std::size_t i = 0; i < n; ++i) acc[c][i] += wc * xs[i];
            }
          }
        }
      }
      for (int c = 0; c < nc; ++c) {
        double* dst = out.channel(a0 + c) + i0;
        for (std::size_t i = 0; i < n; ++i) dst[i] += acc[c][i];
      }
    }
  }
}

// gw[co*cin*taps + ci*taps + t] += sum_p up[co][p] * x[ci][p + shift[t]].
// up must be zero outside the interior.
void blocked_weight_grad(double* gw, Padded& up, int cout, Padded& x, int cin,
                         const std::vector<long>& shifts) {
  const int taps = static_cast<int>(shifts.size());
  const std::size_t lo = up.lo, hi = up.hi;
  // Lane-wise partial sums keep the loops vectorizable without
  // reassociating across lanes.
  constexpr std::size_t L = 8;
  for (int co0 = 0; co0 < cout; co0 += 4) {
    const int nc = std::min(4, cout - co0);
    const double* u[4] = {};
    for (int c = 0; c < nc; ++c) u[c] = up.channel(co0 + c);
    for (std::size_t i0 = lo; i0 < hi; i0 += kBlock) {
      const std::size_t n = std::min(kBlock, hi - i0);
      const std::size_t nv = n - n % L;
      for (int ci = 0; ci < cin; ++ci) {
        for (int t = 0; t < taps; ++t) {
          alignas(64) double part[4][L] = {};
          const double* __restrict xs = x.channel(ci) + shifts[t] + i0;
          for (int c = 0; c < nc; ++c) {
            const double* __restrict uc = u[c] + i0;
            for (std::size_t i = 0; i < nv; i += L)
              for (std::size_t l = 0; l < L; ++l) part[c][l] += uc[i + l] * xs[i + l];
            for (std::size_t i = nv; i < n; ++i) part[c][0] += uc[i] * xs[i];
          }
          for (int c = 0; c < nc; ++c) {
            double sum = 0.0;
            for (std::size_t l = 0; l < L; ++l) sum += part[c][l];
            gw[(static_cast<std::size_t>(co0 + c) * cin + ci) * taps + t] += sum;
          }
        }
      }
    }
  }
}

}  // namespace

DiffNode conv_layer(const DiffNode& input, const DiffNode& weight, const DiffNode& bias,
                    int out_channels, int ksize) {
  const Tensor& x = input.value();
  const int cin = x.channels;
  const int taps = ksize * ksize * ksize;
  if (ksize % 2 == 0) throw AutodiffError("conv_layer: even kernel size");
  if (weight.value().size() != static_cast<std::size_t>(out_channels) * cin * taps) {
    throw AutodiffError("conv_layer: weight size mismatch");
  }
  if (bias.value().size() != static_cast<std::size_t>(out_channels)) {
    throw AutodiffError("conv_layer: bias size mismatch");
  }
  const Dims d = x.dims;
  const int r = ksize / 2;

  Padded xp(d, r, cin);
  for (int ci = 0; ci < cin; ++ci) xp.load(ci, x.channel(ci).data(), d);
  std::vector<long> shifts;
  for (int oz = -r; oz <= r; ++oz)
    for (int oy = -r; oy <= r; ++oy)
      for (int ox = -r; ox <= r; ++ox) shifts.push_back(xp.shift(ox, oy, oz));

  Padded yp(d, r, out_channels);
  blocked_conv(yp, out_channels, xp, cin, shifts, 1, weight.value().data.data(),
               static_cast<std::size_t>(cin) * taps, static_cast<std::size_t>(taps));
  Tensor y(out_channels, d, 0.0);
  for (int co = 0; co < out_channels; ++co) {
    double* dst = y.channel(co).data();
    std::fill(dst, dst + d.count(), bias.value().data[co]);
    yp.store_add(co, dst, d);
  }
  return make_node(
      "conv_layer", std::move(y), {input, weight, bias},
      [out_channels, ksize, cin, taps, shifts](NodeImpl& self) {
        Tensor* gx = parent_grad(self, 0);
        Tensor* gw = parent_grad(self, 1);
        Tensor* gb = parent_grad(self, 2);
        const Tensor& x = parent_value(self, 0);
        const Dims d = x.dims;
        const int r = ksize / 2;

        Padded up(d, r, out_channels);
        for (int co = 0; co < out_channels; ++co) up.load(co, self.grad.channel(co).data(), d);
        if (gb) {
          for (int co = 0; co < out_channels; ++co) {
            double s = 0.0;
            for (double v : self.grad.channel(co)) s += v;
            gb->data[co] += s;
          }
        }
        if (gw) {
          Padded xp(d, r, cin);
          for (int ci = 0; ci < cin; ++ci) xp.load(ci, x.channel(ci).data(), d);
          blocked_weight_grad(gw->data.data(), up, out_channels, xp, cin, shifts);
        }
        if (gx) {
          Padded gxp(d, r, cin);
          blocked_conv(gxp, cin, up, out_channels, shifts, -1, parent_value(self, 1).data.data(),
                       static_cast<std::size_t>(taps), static_cast<std::size_t>(cin) * taps);
          for (int ci = 0; ci < cin; ++ci) gxp.store_add(ci, gx->channel(ci).data(), d);
        }
      });
}

DiffNode instance_norm(const DiffNode& input, double eps) {
  const Tensor& x = input.value();
  const std::size_t nv = x.voxels();
  Tensor y(x.channels, x.dims);
  auto inv_std = std::make_shared<std::vector<double>>(x.channels);
  for (int c = 0; c < x.channels; ++c) {
    auto xc = x.channel(c);
    double m = 0.0;
    for (double v : xc) m += v;
    m /= static_cast<double>(nv);
    double var = 0.0;
    for (double v : xc) var += (v - m) * (v - m);
    var /= static_cast<double>(nv);
    const double is = 1.0 / std::sqrt(var + eps);
    (*inv_std)[c] = is;
    auto yc = y.channel(c);
    for (std::size_t i = 0; i < nv; ++i) yc[i] = (xc[i] - m) * is;
  }
  return make_node("instance_norm", std::move(y), {input}, [inv_std](NodeImpl& self) {
    Tensor* g = parent_grad(self, 0);
    if (!g) return;
    const std::size_t nv = self.value.voxels();
    for (int c = 0; c < self.value.channels; ++c) {
      auto yc = self.value.channel(c);
      auto up = self.grad.channel(c);
      auto gc = g->channel(c);
      double mg = 0.0, mgy = 0.0;
      for (std::size_t i = 0; i < nv; ++i) {
        mg += up[i];
        mgy += up[i] * yc[i];
      }
      mg /= static_cast<double>(nv);
      mgy /= static_cast<double>(nv);
      const double is = (*inv_std)[c];
      for (std::size_t i = 0; i < nv; ++i) gc[i] += is * (up[i] - mg - yc[i] * mgy);
    }
  });
}

DiffNode maxpool_down2(const DiffNode& input) {
  const Tensor& x = input.value();
  const Dims d = x.dims;
  if (d.nx % 2 || d.ny % 2 || d.nz % 2) throw AutodiffError("maxpool_down2: odd dims");
  const Dims h{d.nx / 2, d.ny / 2, d.nz / 2};
  Tensor y(x.channels, h);
  auto arg = std::make_shared<std::vector<std::size_t>>(y.size());
  for (int c = 0; c < x.channels; ++c) {
    const std::size_t sb = static_cast<std::size_t>(c) * d.count();
    const std::size_t db = static_cast<std::size_t>(c) * h.count();
    for (int z = 0; z < h.nz; ++z)
      for (int yy = 0; yy < h.ny; ++yy)
        for (int xx = 0; xx < h.nx; ++xx) {
          std::size_t best = sb + d.index(2 * xx, 2 * yy, 2 * z);
          for (int k = 1; k < 8; ++k) {
            const std::size_t s = sb + d.index(2 * xx + (k & 1), 2 * yy + ((k >> 1) & 1),
                                               2 * z + ((k >> 2) & 1));
            if (x.data[s] > x.data[best]) best = s;
          }
          const std::size_t o = db + h.index(xx, yy, z);
          y.data[o] = x.data[best];
          (*arg)[o] = best;
        }
  }
  return make_node("maxpool_down2", std::move(y), {input}, [arg](NodeImpl& self) {
    Tensor* g = parent_grad(self, 0);
    if (!g) return;
    for (std::size_t i = 0; i < arg->size(); ++i) g->data[(*arg)[i]] += self.grad.data[i];
  });
}

DiffNode upsample2(const DiffNode& input) {
  const Tensor& x = input.value();
  const Dims h = x.dims;
  const Dims d{h.nx * 2, h.ny * 2, h.nz * 2};
  Tensor y(x.channels, d);
  for (int c = 0; c < x.channels; ++c) {
    auto src = x.channel(c);
    auto dst = y.channel(c);
    for (int z = 0; z < d.nz; ++z)
      for (int yy = 0; yy < d.ny; ++yy)
        for (int xx = 0; xx < d.nx; ++xx) dst[d.index(xx, yy, z)] = src[h.index(xx / 2, yy / 2, z / 2)];
  }
  return make_node("upsample2", std::move(y), {input}, [](NodeImpl& self) {
    Tensor* g = parent_grad(self, 0);
    if (!g) return;
    const Dims d = self.value.dims;
    const Dims h = g->dims;
    for (int c = 0; c < g->channels; ++c) {
      auto up = self.grad.channel(c);
      auto gc = g->channel(c);
      for (int z = 0; z < d.nz; ++z)
        for (int yy = 0; yy < d.ny; ++yy)
          for (int xx = 0; xx < d.nx; ++xx) gc[h.index(xx / 2, yy / 2, z / 2)] += up[d.index(xx, yy, z)];
    }
  });
}

DiffNode concat_channels(const DiffNode& a, const DiffNode& b) {
  if (a.value().dims != b.value().dims) throw AutodiffError("concat_channels: dims mismatch");
  Tensor y(a.value().channels + b.value().channels, a.value().dims);
  std::copy(a.value().data.begin(), a.value().data.end(), y.data.begin());
  std::copy(b.value().data.begin(), b.value().data.end(),
            y.data.begin() + static_cast<std::ptrdiff_t>(a.value().size()));
  return make_node("concat_channels", std::move(y), {a, b}, [](NodeImpl& self) {
    const std::size_t na = self.parents[0]->value.size();
    if (Tensor* g = parent_grad(self, 0)) {
      for (std::size_t i = 0; i < na; ++i) g->data[i] += self.grad.data[i];
    }
    if (Tensor* g = parent_grad(self, 1)) {
      for (std::size_t i = 0; i < g->size(); ++i) g->data[i] += self.grad.data[na + i];
    }
  });
}

DiffNode select_channel(const DiffNode& input, int c) {
  const Tensor& x = input.value();
  if (c < 0 || c >= x.channels) throw AutodiffError("select_channel: out of range");
  auto ch = x.channel(c);
  Tensor y(1, x.dims, std::vector<double>(ch.begin(), ch.end()));
  return make_node("select_channel", std::move(y), {input}, [c](NodeImpl& self) {
    Tensor* g = parent_grad(self, 0);
    if (!g) return;
    auto gc = g->channel(c);
    for (std::size_t i = 0; i < gc.size(); ++i) gc[i] += self.grad.data[i];
  });
}

}  // namespace dtpdt::ad
