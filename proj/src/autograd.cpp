#include "topicnet/autograd.hpp"

#include <Eigen/Core>

#include <algorithm>
#include <cmath>
#include <limits>

namespace topicnet {

namespace {

using RowMat = Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
using MapMat = Eigen::Map<RowMat>;
using MapConstMat = Eigen::Map<const RowMat>;

constexpr double kDivFloor = 1e-12;

thread_local BranchScope* g_branch_scope = nullptr;
thread_local double g_sigmoid_backward_scale = 1.0;

Tape& common_tape(std::initializer_list<const Var*> vars) {
  Tape* t = nullptr;
  for (const Var* v : vars) {
    if (!v->valid()) throw ShapeError("operation on an empty Var");
    if (t == nullptr) {
      t = &v->tape();
    } else if (t != &v->tape()) {
      throw ShapeError("operands belong to different tapes");
    }
  }
  return *t;
}

// Splits a shape around one axis into (outer, n, inner) for axis-wise kernels.
struct AxisSplit {
  std::size_t outer = 1, n = 1, inner = 1;
};

AxisSplit split_at(const Shape& s, std::size_t axis) {
  if (axis >= s.size())
    throw ShapeError("axis " + std::to_string(axis) + " invalid for shape " + to_string(s));
  AxisSplit r;
  for (std::size_t i = 0; i < axis; ++i) r.outer *= s[i];
  r.n = s[axis];
  for (std::size_t i = axis + 1; i < s.size(); ++i) r.inner *= s[i];
  return r;
}

Shape drop_axis(const Shape& s, std::size_t axis) {
  Shape out;
  for (std::size_t i = 0; i < s.size(); ++i)
    if (i != axis) out.push_back(s[i]);
  return out;
}

// ---- broadcasting ----

struct Broadcast {
  Shape out;
  std::vector<std::size_t> sa, sb;  // strides into a and b per output axis (0 = broadcast)
  bool same = false;
};

std::vector<std::size_t> aligned_strides(const Shape& in, const Shape& out) {
  std::vector<std::size_t> strides(out.size(), 0);
  std::size_t stride = 1;
  for (std::size_t k = 0; k < in.size(); ++k) {
    std::size_t ia = in.size() - 1 - k;
    std::size_t io = out.size() - 1 - k;
    strides[io] = (in[ia] == 1 && out[io] != 1) ? 0 : stride;
    stride *= in[ia];
  }
  return strides;
}

Broadcast plan_broadcast(const Shape& a, const Shape& b) {
  Broadcast p;
  p.out = broadcast_shape(a, b);
  p.same = (a == b);
  p.sa = aligned_strides(a, p.out);
  p.sb = aligned_strides(b, p.out);
  return p;
}

template <typename F>
void for_each_broadcast(const Broadcast& p, F&& f) {
  const std::size_t total = numel(p.out);
  if (p.same) {
    for (std::size_t i = 0; i < total; ++i) f(i, i, i);
    return;
  }
  const std::size_t rank = p.out.size();
  if (rank == 0) {
    f(0, 0, 0);
    return;
  }
  std::vector<std::size_t> idx(rank, 0);
  std::size_t ia = 0, ib = 0;
  const std::size_t last = rank - 1;
  const std::size_t inner = p.out[last];
  for (std::size_t o = 0; o < total; o += inner) {
    for (std::size_t j = 0; j < inner; ++j) f(o + j, ia + j * p.sa[last], ib + j * p.sb[last]);
    // advance all axes except the last
    for (std::size_t ax = last; ax-- > 0;) {
      ++idx[ax];
      ia += p.sa[ax];
      ib += p.sb[ax];
      if (idx[ax] < p.out[ax]) break;
      ia -= p.sa[ax] * idx[ax];
      ib -= p.sb[ax] * idx[ax];
      idx[ax] = 0;
    }
  }
}

enum class Binary { kAdd, kSub, kMul, kDiv };

const char* binary_name(Binary k) {
  switch (k) {
    case Binary::kAdd: return "add";
    case Binary::kSub: return "sub";
    case Binary::kMul: return "mul";
    case Binary::kDiv: return "div";
  }
  return "?";
}

Var binary(Binary kind, const Var& a, const Var& b) {
  Tape& tape = common_tape({&a, &b});
  const Tensor& av = a.value();
  const Tensor& bv = b.value();
  Broadcast plan = plan_broadcast(av.shape(), bv.shape());
  if (kind == Binary::kDiv) {
    for (double d : bv.data())
      if (std::abs(d) < kDivFloor) throw NumericError("div: denominator magnitude below 1e-12");
  }
  Tensor out(plan.out);
  double* o = out.raw();
  const double* x = av.raw();
  const double* y = bv.raw();
  switch (kind) {
    case Binary::kAdd:
      for_each_broadcast(plan, [&](std::size_t i, std::size_t ia, std::size_t ib) { o[i] = x[ia] + y[ib]; });
      break;
    case Binary::kSub:
      for_each_broadcast(plan, [&](std::size_t i, std::size_t ia, std::size_t ib) { o[i] = x[ia] - y[ib]; });
      break;
    case Binary::kMul:
      for_each_broadcast(plan, [&](std::size_t i, std::size_t ia, std::size_t ib) { o[i] = x[ia] * y[ib]; });
      break;
    case Binary::kDiv:
      for_each_broadcast(plan, [&](std::size_t i, std::size_t ia, std::size_t ib) { o[i] = x[ia] / y[ib]; });
      break;
  }
  return tape.record(
      std::move(out), {a, b},
      [a, b, kind, plan](const Tensor& g, GradSink& sink) {
        const double* gp = g.raw();
        const double* x = a.value().raw();
        const double* y = b.value().raw();
        if (sink.wants(a)) {
          double* ga = sink.buffer(a).raw();
          switch (kind) {
            case Binary::kAdd:
            case Binary::kSub:
              for_each_broadcast(plan, [&](std::size_t i, std::size_t ia, std::size_t) { ga[ia] += gp[i]; });
              break;
            case Binary::kMul:
              for_each_broadcast(plan, [&](std::size_t i, std::size_t ia, std::size_t ib) { ga[ia] += gp[i] * y[ib]; });
              break;
            case Binary::kDiv:
              for_each_broadcast(plan, [&](std::size_t i, std::size_t ia, std::size_t ib) { ga[ia] += gp[i] / y[ib]; });
              break;
          }
        }
        if (sink.wants(b)) {
          double* gb = sink.buffer(b).raw();
          switch (kind) {
            case Binary::kAdd:
              for_each_broadcast(plan, [&](std::size_t i, std::size_t, std::size_t ib) { gb[ib] += gp[i]; });
              break;
            case Binary::kSub:
              for_each_broadcast(plan, [&](std::size_t i, std::size_t, std::size_t ib) { gb[ib] -= gp[i]; });
              break;
            case Binary::kMul:
              for_each_broadcast(plan, [&](std::size_t i, std::size_t ia, std::size_t ib) { gb[ib] += gp[i] * x[ia]; });
              break;
            case Binary::kDiv:
              for_each_broadcast(plan, [&](std::size_t i, std::size_t ia, std::size_t ib) {
                gb[ib] -= gp[i] * x[ia] / (y[ib] * y[ib]);
              });
              break;
          }
        }
      },
      binary_name(kind));
}

template <typename Fwd, typename Bwd>
Var unary(const Var& a, const char* name, Fwd fwd, Bwd bwd) {
  Tape& tape = common_tape({&a});
  const Tensor& av = a.value();
  Tensor out(av.shape());
  for (std::size_t i = 0; i < av.size(); ++i) out[i] = fwd(av[i]);
  return tape.record(
      std::move(out), {a},
      [a, bwd](const Tensor& g, GradSink& sink) {
        if (!sink.wants(a)) return;
        Tensor& ga = sink.buffer(a);
        const Tensor& x = a.value();
        for (std::size_t i = 0; i < x.size(); ++i) ga[i] += g[i] * bwd(x[i]);
      },
      name);
}

// Masked pass-through used by relu and clamp_min, honoring an active BranchScope.
std::vector<std::uint32_t> branch_mask(const Tensor& x, double threshold) {
  std::vector<std::uint32_t> mask(x.size());
  for (std::size_t i = 0; i < x.size(); ++i) mask[i] = x[i] > threshold ? 1u : 0u;
  if (BranchScope* scope = BranchScope::active()) {
    if (scope->mode() == BranchScope::Mode::kRecord) {
      scope->push(mask);
    } else {
      mask = scope->next(x.size());
    }
  }
  return mask;
}

Tensor permute_tensor(const Tensor& in, const std::vector<std::size_t>& axes) {
  const Shape& s = in.shape();
  const std::size_t rank = s.size();
  Shape out_shape(rank);
  std::vector<std::size_t> in_strides(rank, 1);
  for (std::size_t i = rank; i-- > 1;) in_strides[i - 1] = in_strides[i] * s[i];
  std::vector<std::size_t> stride_of_out(rank);
  for (std::size_t i = 0; i < rank; ++i) {
    out_shape[i] = s[axes[i]];
    stride_of_out[i] = in_strides[axes[i]];
  }
  Tensor out(out_shape);
  if (rank == 0) {
    out[0] = in[0];
    return out;
  }
  std::vector<std::size_t> idx(rank, 0);
  std::size_t src = 0;
  const std::size_t total = out.size();
  const std::size_t last = rank - 1;
  const std::size_t inner = out_shape[last];
  const std::size_t inner_stride = stride_of_out[last];
  const double* ip = in.raw();
  double* op = out.raw();
  for (std::size_t o = 0; o < total; o += inner) {
    for (std::size_t j = 0; j < inner; ++j) op[o + j] = ip[src + j * inner_stride];
    for (std::size_t ax = last; ax-- > 0;) {
      ++idx[ax];
      src += stride_of_out[ax];
      if (idx[ax] < out_shape[ax]) break;
      src -= stride_of_out[ax] * idx[ax];
      idx[ax] = 0;
    }
  }
  return out;
}

// ---- spatial helpers ----

struct LerpTap {
  std::size_t i0, i1;
  double w0, w1;
};

std::vector<LerpTap> bilinear_taps(std::size_t in, std::size_t out) {
  std::vector<LerpTap> taps(out);
  const double scale = static_cast<double>(in) / static_cast<double>(out);
  for (std::size_t o = 0; o < out; ++o) {
    double src = (static_cast<double>(o) + 0.5) * scale - 0.5;
    if (src < 0.0) src = 0.0;
    auto i0 = static_cast<std::size_t>(src);
    if (i0 > in - 1) i0 = in - 1;
    std::size_t i1 = i0 + 1 < in ? i0 + 1 : i0;
    double w1 = src - static_cast<double>(i0);
    if (i1 == i0) w1 = 0.0;
    taps[o] = {i0, i1, 1.0 - w1, w1};
  }
  return taps;
}

void require_nchw(const Tensor& x, const char* op) {
  if (x.rank() != 4)
    throw ShapeError(std::string(op) + " expects [N,C,H,W], got " + to_string(x.shape()));
}

void im2col(const double* img, std::size_t C, std::size_t H, std::size_t W, std::size_t kh,
            std::size_t kw, std::size_t stride, std::size_t pad, std::size_t Ho, std::size_t Wo,
            double* cols) {
  const std::size_t plane = Ho * Wo;
  for (std::size_t c = 0; c < C; ++c) {
    const double* ch = img + c * H * W;
    for (std::size_t ki = 0; ki < kh; ++ki) {
      for (std::size_t kj = 0; kj < kw; ++kj) {
        double* row = cols + ((c * kh + ki) * kw + kj) * plane;
        for (std::size_t oy = 0; oy < Ho; ++oy) {
          const long iy = static_cast<long>(oy * stride + ki) - static_cast<long>(pad);
          double* dst = row + oy * Wo;
          if (iy < 0 || iy >= static_cast<long>(H)) {
            std::fill(dst, dst + Wo, 0.0);
            continue;
          }
          const double* src = ch + static_cast<std::size_t>(iy) * W;
          for (std::size_t ox = 0; ox < Wo; ++ox) {
            const long ix = static_cast<long>(ox * stride + kj) - static_cast<long>(pad);
            dst[ox] = (ix < 0 || ix >= static_cast<long>(W)) ? 0.0 : src[ix];
          }
        }
      }
    }
  }
}

void col2im(const double* cols, std::size_t C, std::size_t H, std::size_t W, std::size_t kh,
            std::size_t kw, std::size_t stride, std::size_t pad, std::size_t Ho, std::size_t Wo,
            double* img) {
  const std::size_t plane = Ho * Wo;
  for (std::size_t c = 0; c < C; ++c) {
    double* ch = img + c * H * W;
    for (std::size_t ki = 0; ki < kh; ++ki) {
      for (std::size_t kj = 0; kj < kw; ++kj) {
        const double* row = cols + ((c * kh + ki) * kw + kj) * plane;
        for (std::size_t oy = 0; oy < Ho; ++oy) {
          const long iy = static_cast<long>(oy * stride + ki) - static_cast<long>(pad);
          if (iy < 0 || iy >= static_cast<long>(H)) continue;
          double* dst = ch + static_cast<std::size_t>(iy) * W;
          const double* src = row + oy * Wo;
          for (std::size_t ox = 0; ox < Wo; ++ox) {
            const long ix = static_cast<long>(ox * stride + kj) - static_cast<long>(pad);
            if (ix >= 0 && ix < static_cast<long>(W)) dst[ix] += src[ox];
          }
        }
      }
    }
  }
}

}  // namespace

// ---- Var / Tape ----

const Tensor& Var::value() const { return tape().nodes_.at(id_).value; }
bool Var::requires_grad() const { return tape().nodes_.at(id_).requires_grad; }
Tape& Var::tape() const {
  if (tape_ == nullptr) throw ShapeError("empty Var");
  return *tape_;
}

bool GradSink::wants(const Var& v) const {
  return v.valid() && &v.tape() == &tape_ && tape_.nodes_[v.id()].requires_grad;
}

Tensor& GradSink::buffer(const Var& v) {
  Tensor& slot = slots_[v.id()];
  if (slot.size() == 0) slot = Tensor(v.shape(), 0.0);
  return slot;
}

void GradSink::add(const Var& v, const Tensor& g) {
  if (!wants(v)) return;
  Tensor& slot = buffer(v);
  if (slot.shape() != g.shape())
    throw ShapeError("gradient shape " + to_string(g.shape()) + " does not match " +
                     to_string(slot.shape()));
  for (std::size_t i = 0; i < g.size(); ++i) slot[i] += g[i];
}

Var Tape::leaf(Tensor value, bool requires_grad) {
  if (!value.all_finite()) throw NumericError("leaf value is not finite");
  Node n;
  n.value = std::move(value);
  n.requires_grad = requires_grad;
  n.is_leaf = true;
  n.op = requires_grad ? "leaf" : "constant";
  nodes_.push_back(std::move(n));
  return Var(this, nodes_.size() - 1);
}

Var Tape::record(Tensor value, const std::vector<Var>& inputs, BackwardFn backward,
                 const char* op_name) {
  if (!value.all_finite()) throw NumericError(std::string(op_name) + " produced a non-finite value");
  bool needs = false;
  for (const Var& v : inputs)
    if (v.valid() && v.requires_grad()) needs = true;
  Node n;
  n.value = std::move(value);
  n.requires_grad = needs;
  n.is_leaf = false;
  n.op = op_name;
  if (needs) n.backward = std::move(backward);
  nodes_.push_back(std::move(n));
  return Var(this, nodes_.size() - 1);
}

void Tape::backward(const Var& loss) {
  if (&loss.tape() != this) throw ShapeError("backward: loss belongs to another tape");
  if (loss.value().size() != 1 || loss.value().rank() != 0)
    throw ShapeError("backward requires a scalar loss, got " + to_string(loss.shape()));
  trace_.clear();
  if (!nodes_[loss.id()].requires_grad) return;
  std::vector<Tensor> slots(loss.id() + 1);
  slots[loss.id()] = Tensor(Shape{}, 1.0);
  GradSink sink(*this, slots);
  for (std::size_t id = loss.id() + 1; id-- > 0;) {
    if (slots[id].size() == 0) continue;
    Node& node = nodes_[id];
    if (node.is_leaf) {
      if (node.grad.size() == 0) node.grad = Tensor(node.value.shape(), 0.0);
      for (std::size_t i = 0; i < node.grad.size(); ++i) node.grad[i] += slots[id][i];
    } else if (node.backward) {
      trace_.push_back(id);
      node.backward(slots[id], sink);
    }
    slots[id] = Tensor();
  }
}

const Tensor& Tape::grad(const Var& leaf) const {
  const Node& n = nodes_.at(leaf.id());
  if (!n.is_leaf || !n.requires_grad)
    throw ShapeError("grad() is only retained for leaves that require grad");
  if (n.grad.size() == 0) {
    // Leaf was never reached: expose zeros of the right shape.
    auto& mutable_node = const_cast<Node&>(n);
    mutable_node.grad = Tensor(n.value.shape(), 0.0);
  }
  return n.grad;
}

void Tape::zero_grad() {
  for (Node& n : nodes_)
    if (n.is_leaf && n.grad.size() != 0) n.grad.fill(0.0);
}

// ---- branch recording ----

BranchScope::BranchScope(BranchRecording& recording, Mode mode)
    : recording_(recording), mode_(mode), previous_(g_branch_scope) {
  if (mode_ == Mode::kRecord) recording_.clear();
  g_branch_scope = this;
}

BranchScope::~BranchScope() { g_branch_scope = previous_; }

BranchScope* BranchScope::active() { return g_branch_scope; }

void BranchScope::push(std::vector<std::uint32_t> decisions) {
  recording_.decisions_.push_back(std::move(decisions));
}

const std::vector<std::uint32_t>& BranchScope::next(std::size_t expected_size) {
  if (cursor_ >= recording_.decisions_.size())
    throw ShapeError("branch replay ran past the recorded forward pass");
  const auto& d = recording_.decisions_[cursor_++];
  if (d.size() != expected_size) throw ShapeError("branch replay diverged from the recorded graph");
  return d;
}

namespace debug {
ScopedSigmoidBackwardFault::ScopedSigmoidBackwardFault(double relative_error)
    : previous_(g_sigmoid_backward_scale) {
  g_sigmoid_backward_scale = 1.0 + relative_error;
}
ScopedSigmoidBackwardFault::~ScopedSigmoidBackwardFault() { g_sigmoid_backward_scale = previous_; }
double sigmoid_backward_scale() { return g_sigmoid_backward_scale; }
}  // namespace debug

// ---- elementwise ----

Shape broadcast_shape(const Shape& a, const Shape& b) {
  const std::size_t rank = std::max(a.size(), b.size());
  Shape out(rank);
  for (std::size_t k = 0; k < rank; ++k) {
    std::size_t da = k < a.size() ? a[a.size() - 1 - k] : 1;
    std::size_t db = k < b.size() ? b[b.size() - 1 - k] : 1;
    if (da != db && da != 1 && db != 1)
      throw ShapeError("shapes " + to_string(a) + " and " + to_string(b) + " do not broadcast");
    out[rank - 1 - k] = std::max(da, db);
  }
  return out;
}

Var add(const Var& a, const Var& b) { return binary(Binary::kAdd, a, b); }
Var sub(const Var& a, const Var& b) { return binary(Binary::kSub, a, b); }
Var mul(const Var& a, const Var& b) { return binary(Binary::kMul, a, b); }
Var div(const Var& a, const Var& b) { return binary(Binary::kDiv, a, b); }

Var add(const Var& a, double b) {
  return unary(a, "add_scalar", [b](double x) { return x + b; }, [](double) { return 1.0; });
}

Var mul(const Var& a, double b) {
  return unary(a, "mul_scalar", [b](double x) { return x * b; }, [b](double) { return b; });
}

Var neg(const Var& a) { return mul(a, -1.0); }

Var exp(const Var& a) {
  return unary(a, "exp", [](double x) { return std::exp(x); }, [](double x) { return std::exp(x); });
}

Var log(const Var& a) {
  for (double v : a.value().data())
    if (!(v > 0.0)) throw NumericError("log of a non-positive value");
  return unary(a, "log", [](double x) { return std::log(x); }, [](double x) { return 1.0 / x; });
}

Var sigmoid(const Var& a) {
  auto s = [](double x) {
    if (x >= 0) return 1.0 / (1.0 + std::exp(-x));
    const double e = std::exp(x);
    return e / (1.0 + e);
  };
  return unary(a, "sigmoid", s, [s](double x) {
    const double y = s(x);
    return y * (1.0 - y) * debug::sigmoid_backward_scale();
  });
}

Var sqrt(const Var& a) {
  for (double v : a.value().data())
    if (!(v > 0.0)) throw NumericError("sqrt of a non-positive value (gradient undefined)");
  return unary(a, "sqrt", [](double x) { return std::sqrt(x); },
               [](double x) { return 0.5 / std::sqrt(x); });
}

Var relu(const Var& a) {
  Tape& tape = common_tape({&a});
  const Tensor& x = a.value();
  auto mask = branch_mask(x, 0.0);
  Tensor out(x.shape());
  for (std::size_t i = 0; i < x.size(); ++i) out[i] = mask[i] ? x[i] : 0.0;
  return tape.record(
      std::move(out), {a},
      [a, mask = std::move(mask)](const Tensor& g, GradSink& sink) {
        if (!sink.wants(a)) return;
        Tensor& ga = sink.buffer(a);
        for (std::size_t i = 0; i < g.size(); ++i)
          if (mask[i]) ga[i] += g[i];
      },
      "relu");
}

Var clamp_min(const Var& a, double floor) {
  Tape& tape = common_tape({&a});
  const Tensor& x = a.value();
  auto mask = branch_mask(x, floor);
  Tensor out(x.shape());
  for (std::size_t i = 0; i < x.size(); ++i) out[i] = mask[i] ? x[i] : floor;
  return tape.record(
      std::move(out), {a},
      [a, mask = std::move(mask)](const Tensor& g, GradSink& sink) {
        if (!sink.wants(a)) return;
        Tensor& ga = sink.buffer(a);
        for (std::size_t i = 0; i < g.size(); ++i)
          if (mask[i]) ga[i] += g[i];
      },
      "clamp_min");
}

// ---- matmul ----

Var matmul(const Var& a, const Var& b) {
  Tape& tape = common_tape({&a, &b});
  const Shape& sa = a.shape();
  const Shape& sb = b.shape();
  if (sa.size() < 2 || sb.size() < 2)
    throw ShapeError("matmul needs rank >= 2, got " + to_string(sa) + " x " + to_string(sb));
  const std::size_t P = sa[sa.size() - 2], Q = sa.back();
  const std::size_t Q2 = sb[sb.size() - 2], R = sb.back();
  if (Q != Q2) throw ShapeError("matmul inner dims differ: " + to_string(sa) + " x " + to_string(sb));
  Shape ba(sa.begin(), sa.end() - 2), bb(sb.begin(), sb.end() - 2);
  Shape batch;
  bool a_bcast = false, b_bcast = false;
  if (ba == bb) {
    batch = ba;
  } else if (bb.empty()) {
    batch = ba;
    b_bcast = true;
  } else if (ba.empty()) {
    batch = bb;
    a_bcast = true;
  } else {
    throw ShapeError("matmul batch dims differ: " + to_string(sa) + " x " + to_string(sb));
  }
  const std::size_t nb = numel(batch);
  Shape out_shape = batch;
  out_shape.push_back(P);
  out_shape.push_back(R);
  Tensor out(out_shape);
  for (std::size_t i = 0; i < nb; ++i) {
    MapConstMat A(a.value().raw() + (a_bcast ? 0 : i * P * Q), P, Q);
    MapConstMat B(b.value().raw() + (b_bcast ? 0 : i * Q * R), Q, R);
    MapMat C(out.raw() + i * P * R, P, R);
    C.noalias() = A * B;
  }
  return tape.record(
      std::move(out), {a, b},
      [a, b, P, Q, R, nb, a_bcast, b_bcast](const Tensor& g, GradSink& sink) {
        const bool wa = sink.wants(a), wb = sink.wants(b);
        double* ga = wa ? sink.buffer(a).raw() : nullptr;
        double* gb = wb ? sink.buffer(b).raw() : nullptr;
        for (std::size_t i = 0; i < nb; ++i) {
          MapConstMat G(g.raw() + i * P * R, P, R);
          MapConstMat A(a.value().raw() + (a_bcast ? 0 : i * P * Q), P, Q);
          MapConstMat B(b.value().raw() + (b_bcast ? 0 : i * Q * R), Q, R);
          if (wa) {
            MapMat GA(ga + (a_bcast ? 0 : i * P * Q), P, Q);
            GA.noalias() += G * B.transpose();
          }
          if (wb) {
            MapMat GB(gb + (b_bcast ? 0 : i * Q * R), Q, R);
            GB.noalias() += A.transpose() * G;
          }
        }
      },
      "matmul");
}

// ---- softmax / reductions ----

Var softmax(const Var& a, std::size_t axis) {
  Tape& tape = common_tape({&a});
  const Tensor& x = a.value();
  const AxisSplit sp = split_at(x.shape(), axis);
  Tensor out(x.shape());
  for (std::size_t o = 0; o < sp.outer; ++o) {
    for (std::size_t in = 0; in < sp.inner; ++in) {
      const std::size_t base = o * sp.n * sp.inner + in;
      double m = -std::numeric_limits<double>::infinity();
      for (std::size_t k = 0; k < sp.n; ++k) m = std::max(m, x[base + k * sp.inner]);
      double s = 0.0;
      for (std::size_t k = 0; k < sp.n; ++k) {
        const double e = std::exp(x[base + k * sp.inner] - m);
        out[base + k * sp.inner] = e;
        s += e;
      }
      for (std::size_t k = 0; k < sp.n; ++k) out[base + k * sp.inner] /= s;
    }
  }
  Tensor y = out;
  return tape.record(
      std::move(out), {a},
      [a, sp, y = std::move(y)](const Tensor& g, GradSink& sink) {
        if (!sink.wants(a)) return;
        Tensor& ga = sink.buffer(a);
        for (std::size_t o = 0; o < sp.outer; ++o) {
          for (std::size_t in = 0; in < sp.inner; ++in) {
            const std::size_t base = o * sp.n * sp.inner + in;
            double dot = 0.0;
            for (std::size_t k = 0; k < sp.n; ++k) dot += g[base + k * sp.inner] * y[base + k * sp.inner];
            for (std::size_t k = 0; k < sp.n; ++k) {
              const std::size_t i = base + k * sp.inner;
              ga[i] += y[i] * (g[i] - dot);
            }
          }
        }
      },
      "softmax");
}

Var reduce_max(const Var& a, std::size_t axis) {
  Tape& tape = common_tape({&a});
  const Tensor& x = a.value();
  const AxisSplit sp = split_at(x.shape(), axis);
  std::vector<std::uint32_t> argmax(sp.outer * sp.inner);
  for (std::size_t o = 0; o < sp.outer; ++o) {
    for (std::size_t in = 0; in < sp.inner; ++in) {
      const std::size_t base = o * sp.n * sp.inner + in;
      std::uint32_t best = 0;
      for (std::size_t k = 1; k < sp.n; ++k)
        if (x[base + k * sp.inner] > x[base + best * sp.inner]) best = static_cast<std::uint32_t>(k);
      argmax[o * sp.inner + in] = best;
    }
  }
  if (BranchScope* scope = BranchScope::active()) {
    if (scope->mode() == BranchScope::Mode::kRecord) {
      scope->push(argmax);
    } else {
      argmax = scope->next(argmax.size());
    }
  }
  Tensor out(drop_axis(x.shape(), axis));
  for (std::size_t o = 0; o < sp.outer; ++o)
    for (std::size_t in = 0; in < sp.inner; ++in)
      out[o * sp.inner + in] = x[o * sp.n * sp.inner + argmax[o * sp.inner + in] * sp.inner + in];
  return tape.record(
      std::move(out), {a},
      [a, sp, argmax = std::move(argmax)](const Tensor& g, GradSink& sink) {
        if (!sink.wants(a)) return;
        Tensor& ga = sink.buffer(a);
        for (std::size_t o = 0; o < sp.outer; ++o)
          for (std::size_t in = 0; in < sp.inner; ++in)
            ga[o * sp.n * sp.inner + argmax[o * sp.inner + in] * sp.inner + in] += g[o * sp.inner + in];
      },
      "reduce_max");
}

namespace {
Var reduce_linear(const Var& a, std::size_t axis, bool mean) {
  Tape& tape = common_tape({&a});
  const Tensor& x = a.value();
  const AxisSplit sp = split_at(x.shape(), axis);
  const double scale = mean ? 1.0 / static_cast<double>(sp.n) : 1.0;
  Tensor out(drop_axis(x.shape(), axis));
  for (std::size_t o = 0; o < sp.outer; ++o)
    for (std::size_t k = 0; k < sp.n; ++k)
      for (std::size_t in = 0; in < sp.inner; ++in)
        out[o * sp.inner + in] += x[(o * sp.n + k) * sp.inner + in];
  if (mean)
    for (auto& v : out.data()) v *= scale;
  return tape.record(
      std::move(out), {a},
      [a, sp, scale](const Tensor& g, GradSink& sink) {
        if (!sink.wants(a)) return;
        Tensor& ga = sink.buffer(a);
        for (std::size_t o = 0; o < sp.outer; ++o)
          for (std::size_t k = 0; k < sp.n; ++k)
            for (std::size_t in = 0; in < sp.inner; ++in)
              ga[(o * sp.n + k) * sp.inner + in] += g[o * sp.inner + in] * scale;
      },
      mean ? "reduce_mean" : "reduce_sum");
}
}  // namespace

Var reduce_mean(const Var& a, std::size_t axis) { return reduce_linear(a, axis, true); }
Var reduce_sum(const Var& a, std::size_t axis) { return reduce_linear(a, axis, false); }

Var sum_all(const Var& a) { return reduce_sum(reshape(a, Shape{a.value().size()}), 0); }
Var mean_all(const Var& a) { return reduce_mean(reshape(a, Shape{a.value().size()}), 0); }

// ---- layout ----

Var reshape(const Var& a, Shape shape) {
  Tape& tape = common_tape({&a});
  Tensor out = a.value().reshaped(std::move(shape));
  return tape.record(
      std::move(out), {a},
      [a](const Tensor& g, GradSink& sink) {
        if (!sink.wants(a)) return;
        Tensor& ga = sink.buffer(a);
        for (std::size_t i = 0; i < g.size(); ++i) ga[i] += g[i];
      },
      "reshape");
}

Var permute(const Var& a, const std::vector<std::size_t>& axes) {
  Tape& tape = common_tape({&a});
  const std::size_t rank = a.value().rank();
  if (axes.size() != rank) throw ShapeError("permute: axis count does not match rank");
  std::vector<std::size_t> inverse(rank, rank);
  for (std::size_t i = 0; i < rank; ++i) {
    if (axes[i] >= rank || inverse[axes[i]] != rank) throw ShapeError("permute: invalid axes");
    inverse[axes[i]] = i;
  }
  Tensor out = permute_tensor(a.value(), axes);
  return tape.record(
      std::move(out), {a},
      [a, inverse](const Tensor& g, GradSink& sink) {
        if (!sink.wants(a)) return;
        Tensor back = permute_tensor(g, inverse);
        Tensor& ga = sink.buffer(a);
        for (std::size_t i = 0; i < back.size(); ++i) ga[i] += back[i];
      },
      "permute");
}

Var concat(const std::vector<Var>& parts, std::size_t axis) {
  if (parts.empty()) throw ShapeError("concat of nothing");
  Tape& tape = parts.front().tape();
  const Shape& first = parts.front().shape();
  if (axis >= first.size()) throw ShapeError("concat axis out of range");
  Shape out_shape = first;
  out_shape[axis] = 0;
  for (const Var& p : parts) {
    if (&p.tape() != &tape) throw ShapeError("concat operands belong to different tapes");
    const Shape& s = p.shape();
    if (s.size() != first.size()) throw ShapeError("concat rank mismatch");
    for (std::size_t i = 0; i < s.size(); ++i)
      if (i != axis && s[i] != first[i])
        throw ShapeError("concat shape mismatch " + to_string(s) + " vs " + to_string(first));
    out_shape[axis] += s[axis];
  }
  const AxisSplit sp = split_at(out_shape, axis);
  Tensor out(out_shape);
  std::size_t offset = 0;
  std::vector<std::size_t> offsets;
  for (const Var& p : parts) {
    offsets.push_back(offset);
    const std::size_t n = p.shape()[axis];
    const Tensor& v = p.value();
    for (std::size_t o = 0; o < sp.outer; ++o)
      std::copy_n(v.raw() + o * n * sp.inner, n * sp.inner,
                  out.raw() + (o * sp.n + offset) * sp.inner);
    offset += n;
  }
  auto scatter = [parts, offsets, sp, axis](const Tensor& g, GradSink& sink) {
    for (std::size_t pi = 0; pi < parts.size(); ++pi) {
      const Var& p = parts[pi];
      if (!sink.wants(p)) continue;
      const std::size_t n = p.shape()[axis];
      Tensor& gp = sink.buffer(p);
      for (std::size_t o = 0; o < sp.outer; ++o) {
        const double* src = g.raw() + (o * sp.n + offsets[pi]) * sp.inner;
        double* dst = gp.raw() + o * n * sp.inner;
        for (std::size_t i = 0; i < n * sp.inner; ++i) dst[i] += src[i];
      }
    }
  };
  return tape.record(std::move(out), parts, scatter, "concat");
}

// ---- spatial ----

Var conv2d(const Var& x, const Var& kernel, const Var& bias, Conv2dOptions opt) {
  Tape& tape = common_tape({&x, &kernel});
  const Tensor& xv = x.value();
  const Tensor& kv = kernel.value();
  require_nchw(xv, "conv2d");
  if (kv.rank() != 4) throw ShapeError("conv2d kernel must be [Cout,Cin,kh,kw]");
  const std::size_t N = xv.dim(0), C = xv.dim(1), H = xv.dim(2), W = xv.dim(3);
  const std::size_t O = kv.dim(0), kh = kv.dim(2), kw = kv.dim(3);
  if (kv.dim(1) != C)
    throw ShapeError("conv2d channel mismatch: input " + to_string(xv.shape()) + ", kernel " +
                     to_string(kv.shape()));
  if (kh % 2 == 0 || kw % 2 == 0) throw ShapeError("conv2d kernel extents must be odd");
  if (opt.stride == 0) throw ShapeError("conv2d stride must be positive");
  if (H + 2 * opt.pad < kh || W + 2 * opt.pad < kw) throw ShapeError("conv2d kernel larger than padded input");
  const std::size_t Ho = (H + 2 * opt.pad - kh) / opt.stride + 1;
  const std::size_t Wo = (W + 2 * opt.pad - kw) / opt.stride + 1;
  const bool has_bias = bias.valid();
  if (has_bias) {
    if (&bias.tape() != &tape) throw ShapeError("conv2d bias on another tape");
    if (bias.shape() != Shape{O}) throw ShapeError("conv2d bias must be [Cout]");
  }
  const std::size_t K = C * kh * kw, plane = Ho * Wo;
  const bool pointwise = (kh == 1 && kw == 1 && opt.stride == 1 && opt.pad == 0);
  Tensor out(Shape{N, O, Ho, Wo});
  Storage cols(pointwise ? 0 : K * plane);
  MapConstMat Kmat(kv.raw(), O, K);
  for (std::size_t n = 0; n < N; ++n) {
    const double* img = xv.raw() + n * C * H * W;
    const double* colp = img;
    if (!pointwise) {
      im2col(img, C, H, W, kh, kw, opt.stride, opt.pad, Ho, Wo, cols.data());
      colp = cols.data();
    }
    MapMat Y(out.raw() + n * O * plane, O, plane);
    Y.noalias() = Kmat * MapConstMat(colp, K, plane);
    if (has_bias) {
      const Tensor& bv = bias.value();
      for (std::size_t o = 0; o < O; ++o) Y.row(static_cast<Eigen::Index>(o)).array() += bv[o];
    }
  }
  Var tracked_bias = has_bias ? bias : kernel;
  return tape.record(
      std::move(out), {x, kernel, tracked_bias},
      [x, kernel, bias, has_bias, opt, N, C, H, W, O, kh, kw, Ho, Wo, K, plane,
       pointwise](const Tensor& g, GradSink& sink) {
        const bool wx = sink.wants(x), wk = sink.wants(kernel), wb = has_bias && sink.wants(bias);
        const Tensor& xv = x.value();
        MapConstMat Kmat(kernel.value().raw(), O, K);
        Storage cols(pointwise ? 0 : K * plane);
        Storage dcols(pointwise ? 0 : K * plane);
        for (std::size_t n = 0; n < N; ++n) {
          MapConstMat G(g.raw() + n * O * plane, O, plane);
          const double* img = xv.raw() + n * C * H * W;
          if (wk) {
            const double* colp = img;
            if (!pointwise) {
              im2col(img, C, H, W, kh, kw, opt.stride, opt.pad, Ho, Wo, cols.data());
              colp = cols.data();
            }
            MapMat GK(sink.buffer(kernel).raw(), O, K);
            GK.noalias() += G * MapConstMat(colp, K, plane).transpose();
          }
          if (wb) {
            Tensor& gb = sink.buffer(bias);
            for (std::size_t o = 0; o < O; ++o) gb[o] += G.row(static_cast<Eigen::Index>(o)).sum();
          }
          if (wx) {
            double* gx = sink.buffer(x).raw() + n * C * H * W;
            if (pointwise) {
              MapMat GX(gx, K, plane);
              GX.noalias() += Kmat.transpose() * G;
            } else {
              MapMat DC(dcols.data(), K, plane);
              DC.noalias() = Kmat.transpose() * G;
              col2im(dcols.data(), C, H, W, kh, kw, opt.stride, opt.pad, Ho, Wo, gx);
            }
          }
        }
      },
      "conv2d");
}

namespace {
template <typename TapFn>
Var separable_resize(const Var& x, std::size_t out_h, std::size_t out_w, const char* name,
                     TapFn make_taps) {
  Tape& tape = common_tape({&x});
  const Tensor& xv = x.value();
  require_nchw(xv, name);
  if (out_h == 0 || out_w == 0) throw ShapeError(std::string(name) + ": output size must be >= 1");
  const std::size_t N = xv.dim(0), C = xv.dim(1), H = xv.dim(2), W = xv.dim(3);
  // Each output coordinate is a weighted sum of input coordinates along that axis.
  using Taps = std::vector<std::vector<std::pair<std::size_t, double>>>;
  Taps ty = make_taps(H, out_h), tx = make_taps(W, out_w);
  Tensor out(Shape{N, C, out_h, out_w});
  for (std::size_t nc = 0; nc < N * C; ++nc) {
    const double* src = xv.raw() + nc * H * W;
    double* dst = out.raw() + nc * out_h * out_w;
    for (std::size_t oy = 0; oy < out_h; ++oy)
      for (std::size_t ox = 0; ox < out_w; ++ox) {
        double acc = 0.0;
        for (auto [iy, wy] : ty[oy])
          for (auto [ix, wx] : tx[ox]) acc += wy * wx * src[iy * W + ix];
        dst[oy * out_w + ox] = acc;
      }
  }
  return tape.record(
      std::move(out), {x},
      [x, ty = std::move(ty), tx = std::move(tx), N, C, H, W, out_h, out_w](const Tensor& g, GradSink& sink) {
        if (!sink.wants(x)) return;
        Tensor& gx = sink.buffer(x);
        for (std::size_t nc = 0; nc < N * C; ++nc) {
          const double* gp = g.raw() + nc * out_h * out_w;
          double* dst = gx.raw() + nc * H * W;
          for (std::size_t oy = 0; oy < out_h; ++oy)
            for (std::size_t ox = 0; ox < out_w; ++ox) {
              const double go = gp[oy * out_w + ox];
              for (auto [iy, wy] : ty[oy])
                for (auto [ix, wx] : tx[ox]) dst[iy * W + ix] += wy * wx * go;
            }
        }
      },
      name);
}
}  // namespace

Var resize_bilinear(const Var& x, std::size_t out_h, std::size_t out_w) {
  return separable_resize(x, out_h, out_w, "resize_bilinear", [](std::size_t in, std::size_t out) {
    std::vector<std::vector<std::pair<std::size_t, double>>> taps(out);
    const std::vector<LerpTap> lerp = bilinear_taps(in, out);
    for (std::size_t o = 0; o < out; ++o) {
      const LerpTap& t = lerp[o];
      taps[o].push_back({t.i0, t.w0});
      if (t.w1 != 0.0) taps[o].push_back({t.i1, t.w1});
    }
    return taps;
  });
}

Var resize_area(const Var& x, std::size_t out_h, std::size_t out_w) {
  return separable_resize(x, out_h, out_w, "resize_area", [](std::size_t in, std::size_t out) {
    std::vector<std::vector<std::pair<std::size_t, double>>> taps(out);
    for (std::size_t o = 0; o < out; ++o) {
      const std::size_t start = (o * in) / out;
      const std::size_t end = ((o + 1) * in + out - 1) / out;
      const double w = 1.0 / static_cast<double>(end - start);
      for (std::size_t i = start; i < end; ++i) taps[o].push_back({i, w});
    }
    return taps;
  });
}

Var upsample_nearest2x(const Var& x) {
  Tape& tape = common_tape({&x});
  const Tensor& xv = x.value();
  require_nchw(xv, "upsample_nearest2x");
  const std::size_t N = xv.dim(0), C = xv.dim(1), H = xv.dim(2), W = xv.dim(3);
  Tensor out(Shape{N, C, 2 * H, 2 * W});
  for (std::size_t nc = 0; nc < N * C; ++nc) {
    const double* src = xv.raw() + nc * H * W;
    double* dst = out.raw() + nc * 4 * H * W;
    for (std::size_t y = 0; y < 2 * H; ++y)
      for (std::size_t xx = 0; xx < 2 * W; ++xx) dst[y * 2 * W + xx] = src[(y / 2) * W + xx / 2];
  }
  return tape.record(
      std::move(out), {x},
      [x, N, C, H, W](const Tensor& g, GradSink& sink) {
        if (!sink.wants(x)) return;
        Tensor& gx = sink.buffer(x);
        for (std::size_t nc = 0; nc < N * C; ++nc) {
          const double* gp = g.raw() + nc * 4 * H * W;
          double* dst = gx.raw() + nc * H * W;
          for (std::size_t y = 0; y < 2 * H; ++y)
            for (std::size_t xx = 0; xx < 2 * W; ++xx) dst[(y / 2) * W + xx / 2] += gp[y * 2 * W + xx];
        }
      },
      "upsample_nearest2x");
}

}  // namespace topicnet
