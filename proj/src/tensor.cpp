#include "phydra/tensor.hpp"

#include <algorithm>
#include <cmath>
#include <cstring>
#include <limits>
#include <sstream>
#include <unordered_set>

#include "phydra/mathfn.hpp"

namespace phydra {

namespace {

thread_local std::uint64_t g_matmul_madds = 0;
thread_local bool g_grad_enabled = true;

std::shared_ptr<TensorNode> make_node(Shape shape) {
  auto n = std::make_shared<TensorNode>();
  n->values.assign(static_cast<size_t>(shape_numel(shape)), 0.0);
  n->shape = std::move(shape);
  return n;
}

// Wires parents/backprop only when gradients can flow to a leaf.
void attach(const std::shared_ptr<TensorNode>& out,
            std::vector<std::shared_ptr<TensorNode>> parents,
            std::function<void()> backprop) {
  if (!g_grad_enabled) return;
  bool needs = false;
  for (const auto& p : parents) needs = needs || p->needs_grad;
  if (!needs) return;
  out->needs_grad = true;
  out->parents = std::move(parents);
  out->backprop = std::move(backprop);
}

void check_same_shape(const Tensor& a, const Tensor& b, const char* op) {
  if (a.shape() != b.shape()) {
    throw shape_error(std::string(op) + ": shape mismatch " +
                      shape_str(a.shape()) + " vs " + shape_str(b.shape()));
  }
}

std::int64_t ceil_div(std::int64_t a, std::int64_t b) {
  return a > 0 ? (a + b - 1) / b : a / b;
}
std::int64_t floor_div(std::int64_t a, std::int64_t b) {
  return a >= 0 ? a / b : -((-a + b - 1) / b);
}

}  // namespace

std::string shape_str(const Shape& s) {
  std::ostringstream os;
  os << "[";
  for (size_t i = 0; i < s.size(); ++i) os << (i ? "," : "") << s[i];
  os << "]";
  return os.str();
}

std::int64_t shape_numel(const Shape& s) {
  std::int64_t n = 1;
  for (auto d : s) {
    if (d < 0) throw shape_error("negative dimension in " + shape_str(s));
    n *= d;
  }
  return n;
}

void FlopCounter::reset() { g_matmul_madds = 0; }
std::uint64_t FlopCounter::madds() { return g_matmul_madds; }
void FlopCounter::add(std::uint64_t n) { g_matmul_madds += n; }

bool grad_enabled() { return g_grad_enabled; }
NoGradGuard::NoGradGuard() : prev_(g_grad_enabled) { g_grad_enabled = false; }
NoGradGuard::~NoGradGuard() { g_grad_enabled = prev_; }

Tensor Tensor::zeros(Shape shape) { return Tensor(make_node(std::move(shape))); }

Tensor Tensor::full(Shape shape, double value) {
  auto n = make_node(std::move(shape));
  std::fill(n->values.begin(), n->values.end(), value);
  return Tensor(n);
}

Tensor Tensor::from_data(Shape shape, std::vector<double> data) {
  if (shape_numel(shape) != static_cast<std::int64_t>(data.size())) {
    throw shape_error("from_data: " + shape_str(shape) + " needs " +
                      std::to_string(shape_numel(shape)) + " values, got " +
                      std::to_string(data.size()));
  }
  auto n = std::make_shared<TensorNode>();
  n->shape = std::move(shape);
  n->values = std::move(data);
  return Tensor(n);
}

Tensor Tensor::leaf(Shape shape, std::vector<double> data) {
  Tensor t = from_data(std::move(shape), std::move(data));
  t.set_requires_grad(true);
  return t;
}

const std::vector<double>& Tensor::grad() const {
  node_->ensure_grad();
  return node_->grad;
}

double Tensor::item() const {
  if (numel() != 1) {
    throw contract_error("item(): tensor has " + std::to_string(numel()) +
                         " elements");
  }
  return node_->values[0];
}

double Tensor::at(std::initializer_list<std::int64_t> idx) const {
  const Shape& s = node_->shape;
  if (idx.size() != s.size()) throw shape_error("at(): rank mismatch");
  std::int64_t off = 0;
  size_t k = 0;
  for (auto i : idx) {
    if (i < 0 || i >= s[k]) throw shape_error("at(): index out of range");
    off = off * s[k] + i;
    ++k;
  }
  return node_->values[static_cast<size_t>(off)];
}

void backward(const Tensor& loss) {
  if (loss.numel() != 1) {
    throw contract_error("backward: loss must be scalar, got " +
                         shape_str(loss.shape()));
  }
  // Iterative post-order DFS; parents visited in insertion order so the
  // accumulation order is deterministic.
  std::vector<TensorNode*> order;
  std::unordered_set<TensorNode*> seen;
  struct Frame {
    TensorNode* node;
    size_t next_parent;
  };
  std::vector<Frame> stack;
  TensorNode* root = loss.node().get();
  if (!root->needs_grad) {
    root->ensure_grad();
    root->grad[0] = 1.0;
    return;
  }
  stack.push_back({root, 0});
  seen.insert(root);
  while (!stack.empty()) {
    Frame& f = stack.back();
    if (f.next_parent < f.node->parents.size()) {
      TensorNode* p = f.node->parents[f.next_parent++].get();
      if (p->needs_grad && seen.insert(p).second) stack.push_back({p, 0});
    } else {
      order.push_back(f.node);
      stack.pop_back();
    }
  }
  for (TensorNode* n : order) n->ensure_grad();
  root->grad[0] = 1.0;
  for (auto it = order.rbegin(); it != order.rend(); ++it) {
    if ((*it)->backprop) (*it)->backprop();
  }
}

// ---------------------------------------------------------------------------
// elementwise
// ---------------------------------------------------------------------------

namespace {

// Helper for unary ops: dy/dx supplied as a function of (x, y).
Tensor unary_op(const Tensor& a, const char* /*name*/,
                double (*fwd)(double),
                double (*dfdx)(double x, double y)) {
  auto out = make_node(a.shape());
  const auto& av = a.node()->values;
  for (size_t i = 0; i < av.size(); ++i) out->values[i] = fwd(av[i]);
  auto an = a.node();
  attach(out, {an}, [o = out.get(), an = an.get(), dfdx] {
    an->ensure_grad();
    for (size_t i = 0; i < o->values.size(); ++i) {
      an->grad[i] += o->grad[i] * dfdx(an->values[i], o->values[i]);
    }
  });
  return Tensor(out);
}

}  // namespace

Tensor add(const Tensor& a, const Tensor& b) {
  check_same_shape(a, b, "add");
  auto out = make_node(a.shape());
  const auto& av = a.node()->values;
  const auto& bv = b.node()->values;
  for (size_t i = 0; i < av.size(); ++i) out->values[i] = av[i] + bv[i];
  attach(out, {a.node(), b.node()},
         [o = out.get(), an = a.node().get(), bn = b.node().get()] {
           if (an->needs_grad) {
             an->ensure_grad();
             for (size_t i = 0; i < o->grad.size(); ++i) an->grad[i] += o->grad[i];
           }
           if (bn->needs_grad) {
             bn->ensure_grad();
             for (size_t i = 0; i < o->grad.size(); ++i) bn->grad[i] += o->grad[i];
           }
         });
  return Tensor(out);
}

Tensor sub(const Tensor& a, const Tensor& b) {
  check_same_shape(a, b, "sub");
  auto out = make_node(a.shape());
  const auto& av = a.node()->values;
  const auto& bv = b.node()->values;
  for (size_t i = 0; i < av.size(); ++i) out->values[i] = av[i] - bv[i];
  attach(out, {a.node(), b.node()},
         [o = out.get(), an = a.node().get(), bn = b.node().get()] {
           if (an->needs_grad) {
             an->ensure_grad();
             for (size_t i = 0; i < o->grad.size(); ++i) an->grad[i] += o->grad[i];
           }
           if (bn->needs_grad) {
             bn->ensure_grad();
             for (size_t i = 0; i < o->grad.size(); ++i) bn->grad[i] -= o->grad[i];
           }
         });
  return Tensor(out);
}

Tensor mul(const Tensor& a, const Tensor& b) {
  check_same_shape(a, b, "mul");
  auto out = make_node(a.shape());
  const auto& av = a.node()->values;
  const auto& bv = b.node()->values;
  for (size_t i = 0; i < av.size(); ++i) out->values[i] = av[i] * bv[i];
  attach(out, {a.node(), b.node()},
         [o = out.get(), an = a.node().get(), bn = b.node().get()] {
           if (an->needs_grad) {
             an->ensure_grad();
             for (size_t i = 0; i < o->grad.size(); ++i)
               an->grad[i] += o->grad[i] * bn->values[i];
           }
           if (bn->needs_grad) {
             bn->ensure_grad();
             for (size_t i = 0; i < o->grad.size(); ++i)
               bn->grad[i] += o->grad[i] * an->values[i];
           }
         });
  return Tensor(out);
}

Tensor div(const Tensor& a, const Tensor& b) {
  check_same_shape(a, b, "div");
  auto out = make_node(a.shape());
  const auto& av = a.node()->values;
  const auto& bv = b.node()->values;
  for (size_t i = 0; i < av.size(); ++i) out->values[i] = av[i] / bv[i];
  attach(out, {a.node(), b.node()},
         [o = out.get(), an = a.node().get(), bn = b.node().get()] {
           if (an->needs_grad) {
             an->ensure_grad();
             for (size_t i = 0; i < o->grad.size(); ++i)
               an->grad[i] += o->grad[i] / bn->values[i];
           }
           if (bn->needs_grad) {
             bn->ensure_grad();
             for (size_t i = 0; i < o->grad.size(); ++i) {
               double inv = 1.0 / bn->values[i];
               bn->grad[i] -= o->grad[i] * an->values[i] * inv * inv;
             }
           }
         });
  return Tensor(out);
}

Tensor scale(const Tensor& a, double c) {
  auto out = make_node(a.shape());
  const auto& av = a.node()->values;
  for (size_t i = 0; i < av.size(); ++i) out->values[i] = av[i] * c;
  attach(out, {a.node()}, [o = out.get(), an = a.node().get(), c] {
    an->ensure_grad();
    for (size_t i = 0; i < o->grad.size(); ++i) an->grad[i] += o->grad[i] * c;
  });
  return Tensor(out);
}

Tensor add_scalar(const Tensor& a, double c) {
  auto out = make_node(a.shape());
  const auto& av = a.node()->values;
  for (size_t i = 0; i < av.size(); ++i) out->values[i] = av[i] + c;
  attach(out, {a.node()}, [o = out.get(), an = a.node().get()] {
    an->ensure_grad();
    for (size_t i = 0; i < o->grad.size(); ++i) an->grad[i] += o->grad[i];
  });
  return Tensor(out);
}

Tensor neg(const Tensor& a) { return scale(a, -1.0); }

Tensor leaky_relu(const Tensor& a, double slope) {
  auto out = make_node(a.shape());
  const auto& av = a.node()->values;
  for (size_t i = 0; i < av.size(); ++i)
    out->values[i] = av[i] > 0.0 ? av[i] : slope * av[i];
  attach(out, {a.node()}, [o = out.get(), an = a.node().get(), slope] {
    an->ensure_grad();
    for (size_t i = 0; i < o->grad.size(); ++i)
      an->grad[i] += o->grad[i] * (an->values[i] > 0.0 ? 1.0 : slope);
  });
  return Tensor(out);
}

Tensor softplus(const Tensor& a) {
  return unary_op(
      a, "softplus",
      [](double x) {
        if (x > 35.0) return x;
        if (x < -35.0) return std::exp(x);
        return std::log1p(std::exp(x));
      },
      [](double x, double) {
        return x >= 0.0 ? 1.0 / (1.0 + std::exp(-x))
                        : std::exp(x) / (1.0 + std::exp(x));
      });
}

Tensor sigmoid(const Tensor& a) {
  return unary_op(
      a, "sigmoid",
      [](double x) {
        return x >= 0.0 ? 1.0 / (1.0 + std::exp(-x))
                        : std::exp(x) / (1.0 + std::exp(x));
      },
      [](double, double y) { return y * (1.0 - y); });
}

Tensor exp_elem(const Tensor& a) {
  return unary_op(a, "exp", [](double x) { return std::exp(x); },
                  [](double, double y) { return y; });
}

Tensor log_elem(const Tensor& a) {
  return unary_op(a, "log", [](double x) { return std::log(x); },
                  [](double x, double) { return 1.0 / x; });
}

Tensor clamp(const Tensor& a, double lo, double hi) {
  auto out = make_node(a.shape());
  const auto& av = a.node()->values;
  for (size_t i = 0; i < av.size(); ++i)
    out->values[i] = std::min(hi, std::max(lo, av[i]));
  attach(out, {a.node()}, [o = out.get(), an = a.node().get(), lo, hi] {
    an->ensure_grad();
    for (size_t i = 0; i < o->grad.size(); ++i) {
      double x = an->values[i];
      if (x >= lo && x <= hi) an->grad[i] += o->grad[i];
    }
  });
  return Tensor(out);
}

Tensor clamp_min(const Tensor& a, double lo) {
  return clamp(a, lo, std::numeric_limits<double>::infinity());
}

Tensor round_ste(const Tensor& a) {
  auto out = make_node(a.shape());
  const auto& av = a.node()->values;
  for (size_t i = 0; i < av.size(); ++i) out->values[i] = std::round(av[i]);
  attach(out, {a.node()}, [o = out.get(), an = a.node().get()] {
    an->ensure_grad();
    for (size_t i = 0; i < o->grad.size(); ++i) an->grad[i] += o->grad[i];
  });
  return Tensor(out);
}

Tensor normal_cdf_elem(const Tensor& a) {
  return unary_op(a, "normal_cdf", [](double x) { return normal_cdf(x); },
                  [](double x, double) { return normal_pdf(x); });
}

Tensor where_mask(const Tensor& a, const Tensor& mask01) {
  check_same_shape(a, mask01, "where_mask");
  auto out = make_node(a.shape());
  const auto& av = a.node()->values;
  const auto& mv = mask01.node()->values;
  for (size_t i = 0; i < av.size(); ++i)
    out->values[i] = mv[i] != 0.0 ? av[i] : 0.0;
  attach(out, {a.node()},
         [o = out.get(), an = a.node().get(), mn = mask01.node()] {
           an->ensure_grad();
           for (size_t i = 0; i < o->grad.size(); ++i)
             if (mn->values[i] != 0.0) an->grad[i] += o->grad[i];
         });
  return Tensor(out);
}

// ---------------------------------------------------------------------------
// shape ops
// ---------------------------------------------------------------------------

Tensor reshape(const Tensor& a, Shape shape) {
  if (shape_numel(shape) != a.numel()) {
    throw shape_error("reshape: cannot view " + shape_str(a.shape()) + " as " +
                      shape_str(shape));
  }
  auto out = make_node(shape);
  out->values = a.node()->values;
  attach(out, {a.node()}, [o = out.get(), an = a.node().get()] {
    an->ensure_grad();
    for (size_t i = 0; i < o->grad.size(); ++i) an->grad[i] += o->grad[i];
  });
  return Tensor(out);
}

namespace {

std::vector<std::int64_t> row_major_strides(const Shape& s) {
  std::vector<std::int64_t> st(s.size(), 1);
  for (int i = static_cast<int>(s.size()) - 2; i >= 0; --i)
    st[static_cast<size_t>(i)] = st[static_cast<size_t>(i) + 1] * s[static_cast<size_t>(i) + 1];
  return st;
}

// dst[i_perm] = src[i]: builds mapping src index -> dst index.
std::vector<std::int64_t> permute_index_map(const Shape& src_shape,
                                            const std::vector<int>& perm) {
  Shape dst_shape(perm.size());
  for (size_t i = 0; i < perm.size(); ++i)
    dst_shape[i] = src_shape[static_cast<size_t>(perm[i])];
  auto dst_strides = row_major_strides(dst_shape);
  auto n = shape_numel(src_shape);
  std::vector<std::int64_t> map(static_cast<size_t>(n));
  std::vector<std::int64_t> idx(src_shape.size(), 0);
  for (std::int64_t flat = 0; flat < n; ++flat) {
    std::int64_t dst = 0;
    for (size_t d = 0; d < perm.size(); ++d)
      dst += idx[static_cast<size_t>(perm[d])] * dst_strides[d];
    map[static_cast<size_t>(flat)] = dst;
    for (int d = static_cast<int>(src_shape.size()) - 1; d >= 0; --d) {
      if (++idx[static_cast<size_t>(d)] < src_shape[static_cast<size_t>(d)]) break;
      idx[static_cast<size_t>(d)] = 0;
    }
  }
  return map;
}

}  // namespace

Tensor permute(const Tensor& a, const std::vector<int>& perm) {
  if (perm.size() != a.shape().size())
    throw shape_error("permute: rank mismatch");
  Shape out_shape(perm.size());
  for (size_t i = 0; i < perm.size(); ++i)
    out_shape[i] = a.shape()[static_cast<size_t>(perm[i])];
  auto map = permute_index_map(a.shape(), perm);
  auto out = make_node(out_shape);
  const auto& av = a.node()->values;
  for (size_t i = 0; i < av.size(); ++i)
    out->values[static_cast<size_t>(map[i])] = av[i];
  attach(out, {a.node()},
         [o = out.get(), an = a.node().get(), map = std::move(map)] {
           an->ensure_grad();
           for (size_t i = 0; i < an->grad.size(); ++i)
             an->grad[i] += o->grad[static_cast<size_t>(map[i])];
         });
  return Tensor(out);
}

Tensor transpose_last2(const Tensor& a) {
  std::vector<int> perm(a.shape().size());
  for (size_t i = 0; i < perm.size(); ++i) perm[i] = static_cast<int>(i);
  std::swap(perm[perm.size() - 1], perm[perm.size() - 2]);
  return permute(a, perm);
}

Tensor concat(const std::vector<Tensor>& parts, int axis) {
  if (parts.empty()) throw shape_error("concat: empty part list");
  const Shape& s0 = parts[0].shape();
  if (axis < 0 || axis >= static_cast<int>(s0.size()))
    throw shape_error("concat: bad axis");
  Shape out_shape = s0;
  std::int64_t axis_total = 0;
  for (const auto& p : parts) {
    if (p.rank() != static_cast<int>(s0.size()))
      throw shape_error("concat: rank mismatch");
    for (size_t d = 0; d < s0.size(); ++d) {
      if (static_cast<int>(d) != axis && p.shape()[d] != s0[d])
        throw shape_error("concat: shape mismatch " + shape_str(p.shape()) +
                          " vs " + shape_str(s0));
    }
    axis_total += p.shape()[static_cast<size_t>(axis)];
  }
  out_shape[static_cast<size_t>(axis)] = axis_total;

  std::int64_t outer = 1, inner = 1;
  for (int d = 0; d < axis; ++d) outer *= s0[static_cast<size_t>(d)];
  for (size_t d = static_cast<size_t>(axis) + 1; d < s0.size(); ++d)
    inner *= s0[d];

  auto out = make_node(out_shape);
  std::int64_t axis_off = 0;
  for (const auto& p : parts) {
    std::int64_t alen = p.shape()[static_cast<size_t>(axis)];
    const auto& pv = p.node()->values;
    for (std::int64_t o = 0; o < outer; ++o) {
      const double* src = pv.data() + o * alen * inner;
      double* dst =
          out->values.data() + (o * axis_total + axis_off) * inner;
      std::memcpy(dst, src, static_cast<size_t>(alen * inner) * sizeof(double));
    }
    axis_off += alen;
  }

  std::vector<std::shared_ptr<TensorNode>> parents;
  for (const auto& p : parts) parents.push_back(p.node());
  attach(out, parents,
         [o = out.get(), parents, outer, inner, axis_total, axis] {
           std::int64_t axis_off = 0;
           for (const auto& pp : parents) {
             std::int64_t alen = pp->shape[static_cast<size_t>(axis)];
             if (pp->needs_grad) {
               pp->ensure_grad();
               for (std::int64_t ot = 0; ot < outer; ++ot) {
                 const double* src =
                     o->grad.data() + (ot * axis_total + axis_off) * inner;
                 double* dst = pp->grad.data() + ot * alen * inner;
                 for (std::int64_t i = 0; i < alen * inner; ++i) dst[i] += src[i];
               }
             }
             axis_off += alen;
           }
         });
  return Tensor(out);
}

Tensor narrow(const Tensor& a, int axis, std::int64_t start, std::int64_t len) {
  const Shape& s = a.shape();
  if (axis < 0 || axis >= static_cast<int>(s.size()))
    throw shape_error("narrow: bad axis");
  if (start < 0 || len < 0 || start + len > s[static_cast<size_t>(axis)])
    throw shape_error("narrow: range out of bounds");
  Shape out_shape = s;
  out_shape[static_cast<size_t>(axis)] = len;
  std::int64_t outer = 1, inner = 1;
  for (int d = 0; d < axis; ++d) outer *= s[static_cast<size_t>(d)];
  for (size_t d = static_cast<size_t>(axis) + 1; d < s.size(); ++d)
    inner *= s[d];
  std::int64_t alen = s[static_cast<size_t>(axis)];

  auto out = make_node(out_shape);
  const auto& av = a.node()->values;
  for (std::int64_t o = 0; o < outer; ++o) {
    const double* src = av.data() + (o * alen + start) * inner;
    double* dst = out->values.data() + o * len * inner;
    std::memcpy(dst, src, static_cast<size_t>(len * inner) * sizeof(double));
  }
  attach(out, {a.node()},
         [o = out.get(), an = a.node().get(), outer, inner, alen, start, len] {
           an->ensure_grad();
           for (std::int64_t ot = 0; ot < outer; ++ot) {
             const double* src = o->grad.data() + ot * len * inner;
             double* dst = an->grad.data() + (ot * alen + start) * inner;
             for (std::int64_t i = 0; i < len * inner; ++i) dst[i] += src[i];
           }
         });
  return Tensor(out);
}

namespace {

// Mirror index into [0, n): ... 2 1 0 | 0 1 2 ... n-1 | n-1 n-2 ...
std::int64_t mirror_index(std::int64_t i, std::int64_t n) {
  if (n == 1) return 0;
  std::int64_t period = 2 * n;
  std::int64_t m = i % period;
  if (m < 0) m += period;
  return m < n ? m : period - 1 - m;
}

}  // namespace

Tensor pad_reflect(const Tensor& a, std::int64_t pad_h, std::int64_t pad_w) {
  if (a.rank() != 4) throw shape_error("pad_reflect: expected [B,C,H,W]");
  std::int64_t b = a.dim(0), c = a.dim(1), h = a.dim(2), w = a.dim(3);
  std::int64_t ho = h + pad_h, wo = w + pad_w;
  auto out = make_node({b, c, ho, wo});
  const auto& av = a.node()->values;
  std::vector<std::int64_t> col_map(static_cast<size_t>(wo));
  for (std::int64_t j = 0; j < wo; ++j) col_map[static_cast<size_t>(j)] = mirror_index(j, w);
  std::vector<std::int64_t> row_map(static_cast<size_t>(ho));
  for (std::int64_t i = 0; i < ho; ++i) row_map[static_cast<size_t>(i)] = mirror_index(i, h);
  for (std::int64_t bc = 0; bc < b * c; ++bc) {
    const double* src = av.data() + bc * h * w;
    double* dst = out->values.data() + bc * ho * wo;
    for (std::int64_t i = 0; i < ho; ++i)
      for (std::int64_t j = 0; j < wo; ++j)
        dst[i * wo + j] = src[row_map[static_cast<size_t>(i)] * w +
                              col_map[static_cast<size_t>(j)]];
  }
  attach(out, {a.node()},
         [o = out.get(), an = a.node().get(), b, c, h, w, ho, wo,
          row_map = std::move(row_map), col_map = std::move(col_map)] {
           an->ensure_grad();
           for (std::int64_t bc = 0; bc < b * c; ++bc) {
             const double* src = o->grad.data() + bc * ho * wo;
             double* dst = an->grad.data() + bc * h * w;
             for (std::int64_t i = 0; i < ho; ++i)
               for (std::int64_t j = 0; j < wo; ++j)
                 dst[row_map[static_cast<size_t>(i)] * w +
                     col_map[static_cast<size_t>(j)]] += src[i * wo + j];
           }
         });
  return Tensor(out);
}

Tensor crop_spatial(const Tensor& a, std::int64_t h, std::int64_t w) {
  if (a.rank() != 4) throw shape_error("crop_spatial: expected [B,C,H,W]");
  return narrow(narrow(a, 2, 0, h), 3, 0, w);
}

// ---------------------------------------------------------------------------
// reductions
// ---------------------------------------------------------------------------

Tensor sum(const Tensor& a) {
  auto out = make_node({1});
  double s = 0.0;
  for (double v : a.node()->values) s += v;
  out->values[0] = s;
  attach(out, {a.node()}, [o = out.get(), an = a.node().get()] {
    an->ensure_grad();
    double g = o->grad[0];
    for (size_t i = 0; i < an->grad.size(); ++i) an->grad[i] += g;
  });
  return Tensor(out);
}

Tensor mean(const Tensor& a) { return scale(sum(a), 1.0 / static_cast<double>(a.numel())); }

Tensor mse(const Tensor& a, const Tensor& b) {
  check_same_shape(a, b, "mse");
  Tensor d = sub(a, b);
  return mean(mul(d, d));
}

// ---------------------------------------------------------------------------
// matmul / attention primitives
// ---------------------------------------------------------------------------

Tensor matmul(const Tensor& a, const Tensor& b) {
  if (a.rank() != 3 || b.rank() != 3)
    throw shape_error("matmul: expected [B,M,K] x [B,K,N], got " +
                      shape_str(a.shape()) + " x " + shape_str(b.shape()));
  std::int64_t bb = a.dim(0), m = a.dim(1), k = a.dim(2);
  if (b.dim(0) != bb || b.dim(1) != k)
    throw shape_error("matmul: incompatible " + shape_str(a.shape()) + " x " +
                      shape_str(b.shape()));
  std::int64_t n = b.dim(2);
  auto out = make_node({bb, m, n});
  const double* av = a.node()->values.data();
  const double* bv = b.node()->values.data();
  double* ov = out->values.data();
  for (std::int64_t t = 0; t < bb; ++t) {
    const double* ab = av + t * m * k;
    const double* bbp = bv + t * k * n;
    double* ob = ov + t * m * n;
    for (std::int64_t i = 0; i < m; ++i) {
      double* orow = ob + i * n;
      for (std::int64_t kk = 0; kk < k; ++kk) {
        double ax = ab[i * k + kk];
        const double* brow = bbp + kk * n;
        for (std::int64_t j = 0; j < n; ++j) orow[j] += ax * brow[j];
      }
    }
  }
  FlopCounter::add(static_cast<std::uint64_t>(bb) * static_cast<std::uint64_t>(m) *
                   static_cast<std::uint64_t>(n) * static_cast<std::uint64_t>(k));
  attach(out, {a.node(), b.node()},
         [o = out.get(), an = a.node().get(), bn = b.node().get(), bb, m, k, n] {
           const double* go = o->grad.data();
           if (an->needs_grad) {
             an->ensure_grad();
             // ga[t,i,kk] += sum_j go[t,i,j] * b[t,kk,j]
             for (std::int64_t t = 0; t < bb; ++t) {
               const double* gb = go + t * m * n;
               const double* bvp = bn->values.data() + t * k * n;
               double* gap = an->grad.data() + t * m * k;
               for (std::int64_t i = 0; i < m; ++i) {
                 const double* grow = gb + i * n;
                 for (std::int64_t kk = 0; kk < k; ++kk) {
                   const double* brow = bvp + kk * n;
                   double acc = 0.0;
                   for (std::int64_t j = 0; j < n; ++j) acc += grow[j] * brow[j];
                   gap[i * k + kk] += acc;
                 }
               }
             }
           }
           if (bn->needs_grad) {
             bn->ensure_grad();
             // gb[t,kk,j] += sum_i a[t,i,kk] * go[t,i,j]
             for (std::int64_t t = 0; t < bb; ++t) {
               const double* gb = go + t * m * n;
               const double* avp = an->values.data() + t * m * k;
               double* gbp = bn->grad.data() + t * k * n;
               for (std::int64_t i = 0; i < m; ++i) {
                 const double* grow = gb + i * n;
                 for (std::int64_t kk = 0; kk < k; ++kk) {
                   double ax = avp[i * k + kk];
                   double* gbrow = gbp + kk * n;
                   for (std::int64_t j = 0; j < n; ++j) gbrow[j] += ax * grow[j];
                 }
               }
             }
           }
         });
  return Tensor(out);
}

Tensor softmax_lastdim(const Tensor& a) {
  if (a.rank() < 1 || a.shape().back() < 1)
    throw shape_error("softmax: last dim must be >= 1");
  std::int64_t l = a.shape().back();
  std::int64_t rows = a.numel() / l;
  auto out = make_node(a.shape());
  const double* av = a.node()->values.data();
  double* ov = out->values.data();
  for (std::int64_t r = 0; r < rows; ++r) {
    const double* x = av + r * l;
    double* y = ov + r * l;
    double mx = x[0];
    for (std::int64_t i = 1; i < l; ++i) mx = std::max(mx, x[i]);
    double z = 0.0;
    for (std::int64_t i = 0; i < l; ++i) {
      y[i] = std::exp(x[i] - mx);
      z += y[i];
    }
    double inv = 1.0 / z;
    for (std::int64_t i = 0; i < l; ++i) y[i] *= inv;
  }
  attach(out, {a.node()}, [o = out.get(), an = a.node().get(), rows, l] {
    an->ensure_grad();
    for (std::int64_t r = 0; r < rows; ++r) {
      const double* y = o->values.data() + r * l;
      const double* g = o->grad.data() + r * l;
      double* gx = an->grad.data() + r * l;
      double dot = 0.0;
      for (std::int64_t i = 0; i < l; ++i) dot += y[i] * g[i];
      for (std::int64_t i = 0; i < l; ++i) gx[i] += y[i] * (g[i] - dot);
    }
  });
  return Tensor(out);
}

Tensor linear_lastdim(const Tensor& x, const Tensor& w, const Tensor& bias) {
  if (w.rank() != 2) throw shape_error("linear: weight must be [F,O]");
  std::int64_t f = w.dim(0), o_dim = w.dim(1);
  if (x.shape().back() != f)
    throw shape_error("linear: input last dim " + shape_str(x.shape()) +
                      " vs weight " + shape_str(w.shape()));
  if (bias.defined() && (bias.rank() != 1 || bias.dim(0) != o_dim))
    throw shape_error("linear: bad bias shape");
  std::int64_t rows = x.numel() / f;
  Shape out_shape = x.shape();
  out_shape.back() = o_dim;
  auto out = make_node(out_shape);
  const double* xv = x.node()->values.data();
  const double* wv = w.node()->values.data();
  double* ov = out->values.data();
  for (std::int64_t r = 0; r < rows; ++r) {
    double* orow = ov + r * o_dim;
    if (bias.defined()) {
      const double* bv = bias.node()->values.data();
      for (std::int64_t j = 0; j < o_dim; ++j) orow[j] = bv[j];
    }
    const double* xrow = xv + r * f;
    for (std::int64_t i = 0; i < f; ++i) {
      double xa = xrow[i];
      const double* wrow = wv + i * o_dim;
      for (std::int64_t j = 0; j < o_dim; ++j) orow[j] += xa * wrow[j];
    }
  }
  std::vector<std::shared_ptr<TensorNode>> parents = {x.node(), w.node()};
  if (bias.defined()) parents.push_back(bias.node());
  attach(out, parents,
         [o = out.get(), xn = x.node().get(), wn = w.node().get(),
          bn = bias.defined() ? bias.node().get() : nullptr, rows, f, o_dim] {
           const double* go = o->grad.data();
           if (xn->needs_grad) {
             xn->ensure_grad();
             for (std::int64_t r = 0; r < rows; ++r) {
               const double* grow = go + r * o_dim;
               double* gx = xn->grad.data() + r * f;
               for (std::int64_t i = 0; i < f; ++i) {
                 const double* wrow = wn->values.data() + i * o_dim;
                 double acc = 0.0;
                 for (std::int64_t j = 0; j < o_dim; ++j) acc += grow[j] * wrow[j];
                 gx[i] += acc;
               }
             }
           }
           if (wn->needs_grad) {
             wn->ensure_grad();
             for (std::int64_t r = 0; r < rows; ++r) {
               const double* grow = go + r * o_dim;
               const double* xrow = xn->values.data() + r * f;
               for (std::int64_t i = 0; i < f; ++i) {
                 double xa = xrow[i];
                 double* gwrow = wn->grad.data() + i * o_dim;
                 for (std::int64_t j = 0; j < o_dim; ++j) gwrow[j] += xa * grow[j];
               }
             }
           }
           if (bn && bn->needs_grad) {
             bn->ensure_grad();
             for (std::int64_t r = 0; r < rows; ++r) {
               const double* grow = go + r * o_dim;
               for (std::int64_t j = 0; j < o_dim; ++j) bn->grad[static_cast<size_t>(j)] += grow[j];
             }
           }
         });
  return Tensor(out);
}

Tensor gather_rows(const Tensor& x, const std::vector<std::int64_t>& idx) {
  if (x.rank() != 2) throw shape_error("gather_rows: expected [N,C]");
  std::int64_t n = x.dim(0), c = x.dim(1);
  for (auto i : idx)
    if (i < 0 || i >= n) throw shape_error("gather_rows: index out of range");
  auto out = make_node({static_cast<std::int64_t>(idx.size()), c});
  const double* xv = x.node()->values.data();
  for (size_t m = 0; m < idx.size(); ++m)
    std::memcpy(out->values.data() + static_cast<std::int64_t>(m) * c,
                xv + idx[m] * c, static_cast<size_t>(c) * sizeof(double));
  attach(out, {x.node()}, [o = out.get(), xn = x.node().get(), idx, c] {
    xn->ensure_grad();
    for (size_t m = 0; m < idx.size(); ++m) {
      const double* src = o->grad.data() + static_cast<std::int64_t>(m) * c;
      double* dst = xn->grad.data() + idx[m] * c;
      for (std::int64_t j = 0; j < c; ++j) dst[j] += src[j];
    }
  });
  return Tensor(out);
}

Tensor scatter_rows(const Tensor& x, const std::vector<std::int64_t>& idx,
                    std::int64_t n_rows) {
  if (x.rank() != 2) throw shape_error("scatter_rows: expected [M,C]");
  if (static_cast<std::int64_t>(idx.size()) != x.dim(0))
    throw shape_error("scatter_rows: index count mismatch");
  std::int64_t c = x.dim(1);
  for (auto i : idx)
    if (i < 0 || i >= n_rows)
      throw shape_error("scatter_rows: index out of range");
  auto out = make_node({n_rows, c});
  const double* xv = x.node()->values.data();
  for (size_t m = 0; m < idx.size(); ++m) {
    double* dst = out->values.data() + idx[m] * c;
    const double* src = xv + static_cast<std::int64_t>(m) * c;
    for (std::int64_t j = 0; j < c; ++j) dst[j] += src[j];
  }
  attach(out, {x.node()}, [o = out.get(), xn = x.node().get(), idx, c] {
    xn->ensure_grad();
    for (size_t m = 0; m < idx.size(); ++m) {
      const double* src = o->grad.data() + idx[m] * c;
      double* dst = xn->grad.data() + static_cast<std::int64_t>(m) * c;
      for (std::int64_t j = 0; j < c; ++j) dst[j] += src[j];
    }
  });
  return Tensor(out);
}

// ---------------------------------------------------------------------------
// convolution
// ---------------------------------------------------------------------------

namespace {

struct ConvGeom {
  std::int64_t b, ci, h, w, co, kh, kw, ho, wo;
  int stride, pad;
};

ConvGeom conv_geometry(const Tensor& x, const Tensor& w, int stride, int pad,
                       bool depthwise) {
  if (x.rank() != 4 || w.rank() != 4)
    throw shape_error("conv2d: expected 4-D input and kernel");
  if (stride < 1 || pad < 0) throw config_error("conv2d: bad stride/pad");
  ConvGeom g;
  g.b = x.dim(0);
  g.ci = x.dim(1);
  g.h = x.dim(2);
  g.w = x.dim(3);
  g.kh = w.dim(2);
  g.kw = w.dim(3);
  g.stride = stride;
  g.pad = pad;
  if (depthwise) {
    if (w.dim(0) != g.ci || w.dim(1) != 1)
      throw config_error("depthwise conv: kernel " + shape_str(w.shape()) +
                         " does not match " + std::to_string(g.ci) + " channels");
    g.co = g.ci;
  } else {
    if (w.dim(1) != g.ci)
      throw config_error("conv2d: kernel " + shape_str(w.shape()) +
                         " does not match input " + shape_str(x.shape()));
    g.co = w.dim(0);
  }
  g.ho = (g.h + 2 * pad - g.kh) / stride + 1;
  g.wo = (g.w + 2 * pad - g.kw) / stride + 1;
  if (g.h + 2 * pad - g.kh < 0 || g.w + 2 * pad - g.kw < 0 || g.ho < 1 || g.wo < 1)
    throw config_error("conv2d: kernel does not fit input " +
                       shape_str(x.shape()) + " with pad " + std::to_string(pad));
  return g;
}

// Shared inner loops for conv forward/backward. Mode selects which arrays
// get accumulated.
enum class ConvPass { kForward, kBackward };

void conv_loops(const ConvGeom& g, const double* x, const double* w,
                double* out, const double* gout, double* gx, double* gw,
                bool depthwise) {
  std::int64_t in_plane = g.h * g.w;
  std::int64_t out_plane = g.ho * g.wo;
  std::int64_t ksz = g.kh * g.kw;
  for (std::int64_t b = 0; b < g.b; ++b) {
    for (std::int64_t co = 0; co < g.co; ++co) {
      std::int64_t ci_lo = depthwise ? co : 0;
      std::int64_t ci_hi = depthwise ? co + 1 : g.ci;
      for (std::int64_t ci = ci_lo; ci < ci_hi; ++ci) {
        const double* xp = x + (b * g.ci + ci) * in_plane;
        double* gxp = gx ? gx + (b * g.ci + ci) * in_plane : nullptr;
        std::int64_t wbase =
            depthwise ? co * ksz : (co * g.ci + ci) * ksz;
        for (std::int64_t ki = 0; ki < g.kh; ++ki) {
          for (std::int64_t kj = 0; kj < g.kw; ++kj) {
            double wv = w ? w[wbase + ki * g.kw + kj] : 0.0;
            double gwacc = 0.0;
            std::int64_t ow_lo = std::max<std::int64_t>(0, ceil_div(g.pad - kj, g.stride));
            std::int64_t ow_hi = std::min<std::int64_t>(g.wo - 1, floor_div(g.w - 1 + g.pad - kj, g.stride));
            if (ow_lo > ow_hi) continue;
            for (std::int64_t oh = 0; oh < g.ho; ++oh) {
              std::int64_t ih = oh * g.stride + ki - g.pad;
              if (ih < 0 || ih >= g.h) continue;
              const double* xrow = xp + ih * g.w + kj - g.pad;
              if (out) {
                double* orow = out + ((b * g.co + co) * out_plane) + oh * g.wo;
                if (g.stride == 1) {
                  for (std::int64_t ow = ow_lo; ow <= ow_hi; ++ow)
                    orow[ow] += wv * xrow[ow];
                } else {
                  for (std::int64_t ow = ow_lo; ow <= ow_hi; ++ow)
                    orow[ow] += wv * xrow[ow * g.stride];
                }
              } else {
                const double* grow =
                    gout + ((b * g.co + co) * out_plane) + oh * g.wo;
                if (gxp) {
                  double* gxrow = gxp + ih * g.w + kj - g.pad;
                  for (std::int64_t ow = ow_lo; ow <= ow_hi; ++ow)
                    gxrow[ow * g.stride] += wv * grow[ow];
                }
                if (gw) {
                  for (std::int64_t ow = ow_lo; ow <= ow_hi; ++ow)
                    gwacc += grow[ow] * xrow[ow * g.stride];
                }
              }
            }
            if (gw) gw[wbase + ki * g.kw + kj] += gwacc;
          }
        }
      }
    }
  }
}

Tensor conv2d_impl(const Tensor& x, const Tensor& w, const Tensor& bias,
                   int stride, int pad, bool depthwise) {
  ConvGeom g = conv_geometry(x, w, stride, pad, depthwise);
  if (bias.defined() && (bias.rank() != 1 || bias.dim(0) != g.co))
    throw config_error("conv2d: bad bias shape");
  auto out = make_node({g.b, g.co, g.ho, g.wo});
  if (bias.defined()) {
    std::int64_t plane = g.ho * g.wo;
    const double* bv = bias.node()->values.data();
    for (std::int64_t b = 0; b < g.b; ++b)
      for (std::int64_t co = 0; co < g.co; ++co) {
        double* dst = out->values.data() + (b * g.co + co) * plane;
        for (std::int64_t i = 0; i < plane; ++i) dst[i] = bv[co];
      }
  }
  conv_loops(g, x.node()->values.data(), w.node()->values.data(),
             out->values.data(), nullptr, nullptr, nullptr, depthwise);
  std::vector<std::shared_ptr<TensorNode>> parents = {x.node(), w.node()};
  if (bias.defined()) parents.push_back(bias.node());
  attach(out, parents,
         [o = out.get(), xn = x.node().get(), wn = w.node().get(),
          bn = bias.defined() ? bias.node().get() : nullptr, g, depthwise] {
           if (xn->needs_grad) xn->ensure_grad();
           if (wn->needs_grad) wn->ensure_grad();
           conv_loops(g, xn->values.data(), wn->values.data(), nullptr,
                      o->grad.data(),
                      xn->needs_grad ? xn->grad.data() : nullptr,
                      wn->needs_grad ? wn->grad.data() : nullptr, depthwise);
           if (bn && bn->needs_grad) {
             bn->ensure_grad();
             std::int64_t plane = g.ho * g.wo;
             for (std::int64_t b = 0; b < g.b; ++b)
               for (std::int64_t co = 0; co < g.co; ++co) {
                 const double* src = o->grad.data() + (b * g.co + co) * plane;
                 double acc = 0.0;
                 for (std::int64_t i = 0; i < plane; ++i) acc += src[i];
                 bn->grad[static_cast<size_t>(co)] += acc;
               }
           }
         });
  return Tensor(out);
}

}  // namespace

Tensor conv2d(const Tensor& x, const Tensor& w, const Tensor& bias, int stride,
              int pad) {
  return conv2d_impl(x, w, bias, stride, pad, false);
}

Tensor conv2d_depthwise(const Tensor& x, const Tensor& w, const Tensor& bias,
                        int stride, int pad) {
  return conv2d_impl(x, w, bias, stride, pad, true);
}

namespace {

struct DeconvGeom {
  std::int64_t b, ci, h, w, co, kh, kw, ho, wo;
  int stride, pad;
};

// fwd: out[b,co,ih*s+ki-p, iw*s+kj-p] += x[b,ci,ih,iw] * w[ci,co,ki,kj]
void deconv_loops(const DeconvGeom& g, const double* x, const double* w,
                  double* out, const double* gout, double* gx, double* gw) {
  std::int64_t in_plane = g.h * g.w;
  std::int64_t out_plane = g.ho * g.wo;
  std::int64_t ksz = g.kh * g.kw;
  for (std::int64_t b = 0; b < g.b; ++b) {
    for (std::int64_t ci = 0; ci < g.ci; ++ci) {
      const double* xp = x + (b * g.ci + ci) * in_plane;
      double* gxp = gx ? gx + (b * g.ci + ci) * in_plane : nullptr;
      for (std::int64_t co = 0; co < g.co; ++co) {
        std::int64_t wbase = (ci * g.co + co) * ksz;
        for (std::int64_t ki = 0; ki < g.kh; ++ki) {
          for (std::int64_t kj = 0; kj < g.kw; ++kj) {
            double wv = w ? w[wbase + ki * g.kw + kj] : 0.0;
            double gwacc = 0.0;
            for (std::int64_t ih = 0; ih < g.h; ++ih) {
              std::int64_t oh = ih * g.stride + ki - g.pad;
              if (oh < 0 || oh >= g.ho) continue;
              for (std::int64_t iw = 0; iw < g.w; ++iw) {
                std::int64_t ow = iw * g.stride + kj - g.pad;
                if (ow < 0 || ow >= g.wo) continue;
                if (out) {
                  out[(b * g.co + co) * out_plane + oh * g.wo + ow] +=
                      wv * xp[ih * g.w + iw];
                } else {
                  double go = gout[(b * g.co + co) * out_plane + oh * g.wo + ow];
                  if (gxp) gxp[ih * g.w + iw] += wv * go;
                  if (gw) gwacc += go * xp[ih * g.w + iw];
                }
              }
            }
            if (gw) gw[wbase + ki * g.kw + kj] += gwacc;
          }
        }
      }
    }
  }
}

}  // namespace

Tensor deconv2d(const Tensor& x, const Tensor& w, const Tensor& bias,
                int stride, int pad, int output_pad) {
  if (x.rank() != 4 || w.rank() != 4)
    throw shape_error("deconv2d: expected 4-D input and kernel");
  if (stride < 1 || pad < 0 || output_pad < 0)
    throw config_error("deconv2d: bad stride/pad");
  DeconvGeom g;
  g.b = x.dim(0);
  g.ci = x.dim(1);
  g.h = x.dim(2);
  g.w = x.dim(3);
  if (w.dim(0) != g.ci)
    throw config_error("deconv2d: kernel " + shape_str(w.shape()) +
                       " does not match input " + shape_str(x.shape()));
  g.co = w.dim(1);
  g.kh = w.dim(2);
  g.kw = w.dim(3);
  g.stride = stride;
  g.pad = pad;
  g.ho = (g.h - 1) * stride - 2 * pad + g.kh + output_pad;
  g.wo = (g.w - 1) * stride - 2 * pad + g.kw + output_pad;
  if (g.ho < 1 || g.wo < 1)
    throw config_error("deconv2d: non-positive output size");
  if (bias.defined() && (bias.rank() != 1 || bias.dim(0) != g.co))
    throw config_error("deconv2d: bad bias shape");
  auto out = make_node({g.b, g.co, g.ho, g.wo});
  if (bias.defined()) {
    std::int64_t plane = g.ho * g.wo;
    const double* bv = bias.node()->values.data();
    for (std::int64_t b = 0; b < g.b; ++b)
      for (std::int64_t co = 0; co < g.co; ++co) {
        double* dst = out->values.data() + (b * g.co + co) * plane;
        for (std::int64_t i = 0; i < plane; ++i) dst[i] = bv[co];
      }
  }
  deconv_loops(g, x.node()->values.data(), w.node()->values.data(),
               out->values.data(), nullptr, nullptr, nullptr);
  std::vector<std::shared_ptr<TensorNode>> parents = {x.node(), w.node()};
  if (bias.defined()) parents.push_back(bias.node());
  attach(out, parents,
         [o = out.get(), xn = x.node().get(), wn = w.node().get(),
          bn = bias.defined() ? bias.node().get() : nullptr, g] {
           if (xn->needs_grad) xn->ensure_grad();
           if (wn->needs_grad) wn->ensure_grad();
           deconv_loops(g, xn->values.data(), wn->values.data(), nullptr,
                        o->grad.data(),
                        xn->needs_grad ? xn->grad.data() : nullptr,
                        wn->needs_grad ? wn->grad.data() : nullptr);
           if (bn && bn->needs_grad) {
             bn->ensure_grad();
             std::int64_t plane = g.ho * g.wo;
             for (std::int64_t b = 0; b < g.b; ++b)
               for (std::int64_t co = 0; co < g.co; ++co) {
                 const double* src = o->grad.data() + (b * g.co + co) * plane;
                 double acc = 0.0;
                 for (std::int64_t i = 0; i < plane; ++i) acc += src[i];
                 bn->grad[static_cast<size_t>(co)] += acc;
               }
           }
         });
  return Tensor(out);
}

// ---------------------------------------------------------------------------
// broadcast helpers
// ---------------------------------------------------------------------------

Tensor mul_channel_map(const Tensor& x, const Tensor& m) {
  if (x.rank() != 4 || m.rank() != 4 || m.dim(1) != 1 || x.dim(0) != m.dim(0) ||
      x.dim(2) != m.dim(2) || x.dim(3) != m.dim(3))
    throw shape_error("mul_channel_map: " + shape_str(x.shape()) + " x " +
                      shape_str(m.shape()));
  std::int64_t b = x.dim(0), c = x.dim(1), plane = x.dim(2) * x.dim(3);
  auto out = make_node(x.shape());
  const double* xv = x.node()->values.data();
  const double* mv = m.node()->values.data();
  for (std::int64_t bi = 0; bi < b; ++bi)
    for (std::int64_t ci = 0; ci < c; ++ci) {
      const double* xp = xv + (bi * c + ci) * plane;
      const double* mp = mv + bi * plane;
      double* op = out->values.data() + (bi * c + ci) * plane;
      for (std::int64_t i = 0; i < plane; ++i) op[i] = xp[i] * mp[i];
    }
  attach(out, {x.node(), m.node()},
         [o = out.get(), xn = x.node().get(), mn = m.node().get(), b, c, plane] {
           if (xn->needs_grad) {
             xn->ensure_grad();
             for (std::int64_t bi = 0; bi < b; ++bi)
               for (std::int64_t ci = 0; ci < c; ++ci) {
                 const double* gp = o->grad.data() + (bi * c + ci) * plane;
                 const double* mp = mn->values.data() + bi * plane;
                 double* gx = xn->grad.data() + (bi * c + ci) * plane;
                 for (std::int64_t i = 0; i < plane; ++i) gx[i] += gp[i] * mp[i];
               }
           }
           if (mn->needs_grad) {
             mn->ensure_grad();
             for (std::int64_t bi = 0; bi < b; ++bi)
               for (std::int64_t ci = 0; ci < c; ++ci) {
                 const double* gp = o->grad.data() + (bi * c + ci) * plane;
                 const double* xp = xn->values.data() + (bi * c + ci) * plane;
                 double* gm = mn->grad.data() + bi * plane;
                 for (std::int64_t i = 0; i < plane; ++i) gm[i] += gp[i] * xp[i];
               }
           }
         });
  return Tensor(out);
}

Tensor mul_channel_scalar(const Tensor& x, const Tensor& s) {
  if (x.rank() != 4 || s.rank() != 2 || s.dim(0) != x.dim(0) ||
      s.dim(1) != x.dim(1))
    throw shape_error("mul_channel_scalar: " + shape_str(x.shape()) + " x " +
                      shape_str(s.shape()));
  std::int64_t b = x.dim(0), c = x.dim(1), plane = x.dim(2) * x.dim(3);
  auto out = make_node(x.shape());
  const double* xv = x.node()->values.data();
  const double* sv = s.node()->values.data();
  for (std::int64_t bc = 0; bc < b * c; ++bc) {
    double m = sv[bc];
    const double* xp = xv + bc * plane;
    double* op = out->values.data() + bc * plane;
    for (std::int64_t i = 0; i < plane; ++i) op[i] = xp[i] * m;
  }
  attach(out, {x.node(), s.node()},
         [o = out.get(), xn = x.node().get(), sn = s.node().get(), b, c, plane] {
           if (xn->needs_grad) {
             xn->ensure_grad();
             for (std::int64_t bc = 0; bc < b * c; ++bc) {
               double m = sn->values[static_cast<size_t>(bc)];
               const double* gp = o->grad.data() + bc * plane;
               double* gx = xn->grad.data() + bc * plane;
               for (std::int64_t i = 0; i < plane; ++i) gx[i] += gp[i] * m;
             }
           }
           if (sn->needs_grad) {
             sn->ensure_grad();
             for (std::int64_t bc = 0; bc < b * c; ++bc) {
               const double* gp = o->grad.data() + bc * plane;
               const double* xp = xn->values.data() + bc * plane;
               double acc = 0.0;
               for (std::int64_t i = 0; i < plane; ++i) acc += gp[i] * xp[i];
               sn->grad[static_cast<size_t>(bc)] += acc;
             }
           }
         });
  return Tensor(out);
}

Tensor add_channel_bias(const Tensor& x, const Tensor& bias) {
  if (x.rank() != 4 || bias.rank() != 1 || bias.dim(0) != x.dim(1))
    throw shape_error("add_channel_bias: " + shape_str(x.shape()) + " + " +
                      shape_str(bias.shape()));
  std::int64_t b = x.dim(0), c = x.dim(1), plane = x.dim(2) * x.dim(3);
  auto out = make_node(x.shape());
  const double* xv = x.node()->values.data();
  const double* bv = bias.node()->values.data();
  for (std::int64_t bi = 0; bi < b; ++bi)
    for (std::int64_t ci = 0; ci < c; ++ci) {
      const double* xp = xv + (bi * c + ci) * plane;
      double* op = out->values.data() + (bi * c + ci) * plane;
      for (std::int64_t i = 0; i < plane; ++i) op[i] = xp[i] + bv[ci];
    }
  attach(out, {x.node(), bias.node()},
         [o = out.get(), xn = x.node().get(), bn = bias.node().get(), b, c, plane] {
           if (xn->needs_grad) {
             xn->ensure_grad();
             for (size_t i = 0; i < o->grad.size(); ++i) xn->grad[i] += o->grad[i];
           }
           if (bn->needs_grad) {
             bn->ensure_grad();
             for (std::int64_t bi = 0; bi < b; ++bi)
               for (std::int64_t ci = 0; ci < c; ++ci) {
                 const double* gp = o->grad.data() + (bi * c + ci) * plane;
                 double acc = 0.0;
                 for (std::int64_t i = 0; i < plane; ++i) acc += gp[i];
                 bn->grad[static_cast<size_t>(ci)] += acc;
               }
           }
         });
  return Tensor(out);
}

Tensor add_rowvec(const Tensor& x, const Tensor& bias) {
  if (x.rank() != 2 || bias.rank() != 1 || bias.dim(0) != x.dim(1))
    throw shape_error("add_rowvec: " + shape_str(x.shape()) + " + " +
                      shape_str(bias.shape()));
  std::int64_t n = x.dim(0), o_dim = x.dim(1);
  auto out = make_node(x.shape());
  const double* xv = x.node()->values.data();
  const double* bv = bias.node()->values.data();
  for (std::int64_t r = 0; r < n; ++r)
    for (std::int64_t j = 0; j < o_dim; ++j)
      out->values[static_cast<size_t>(r * o_dim + j)] = xv[r * o_dim + j] + bv[j];
  attach(out, {x.node(), bias.node()},
         [o = out.get(), xn = x.node().get(), bn = bias.node().get(), n, o_dim] {
           if (xn->needs_grad) {
             xn->ensure_grad();
             for (size_t i = 0; i < o->grad.size(); ++i) xn->grad[i] += o->grad[i];
           }
           if (bn->needs_grad) {
             bn->ensure_grad();
             for (std::int64_t r = 0; r < n; ++r)
               for (std::int64_t j = 0; j < o_dim; ++j)
                 bn->grad[static_cast<size_t>(j)] += o->grad[static_cast<size_t>(r * o_dim + j)];
           }
         });
  return Tensor(out);
}

Tensor global_avg_pool(const Tensor& x) {
  if (x.rank() != 4) throw shape_error("global_avg_pool: expected [B,C,H,W]");
  std::int64_t b = x.dim(0), c = x.dim(1), plane = x.dim(2) * x.dim(3);
  auto out = make_node({b, c});
  const double* xv = x.node()->values.data();
  double inv = 1.0 / static_cast<double>(plane);
  for (std::int64_t bc = 0; bc < b * c; ++bc) {
    const double* xp = xv + bc * plane;
    double acc = 0.0;
    for (std::int64_t i = 0; i < plane; ++i) acc += xp[i];
    out->values[static_cast<size_t>(bc)] = acc * inv;
  }
  attach(out, {x.node()}, [o = out.get(), xn = x.node().get(), b, c, plane, inv] {
    xn->ensure_grad();
    for (std::int64_t bc = 0; bc < b * c; ++bc) {
      double g = o->grad[static_cast<size_t>(bc)] * inv;
      double* gx = xn->grad.data() + bc * plane;
      for (std::int64_t i = 0; i < plane; ++i) gx[i] += g;
    }
  });
  return Tensor(out);
}

}  // namespace phydra
