#include "flowharm/tensor.hpp"

#include <algorithm>
#include <cmath>
#include <sstream>

namespace flowharm::num {

std::string shape_str(const Shape& s) {
  std::ostringstream os;
  os << '[';
  for (std::size_t i = 0; i < s.size(); ++i) {
    if (i) os << ',';
    os << s[i];
  }
  os << ']';
  return os.str();
}

std::size_t shape_numel(const Shape& s) {
  std::size_t n = 1;
  for (auto e : s) n *= e;
  return n;
}

// ---- Tensor ----------------------------------------------------------------

Tensor::Tensor() : node_(std::make_shared<Node>()) {
  node_->shape = {1};
  node_->value = {0.0};
}

Tensor::Tensor(Shape shape, std::vector<double> values, bool requires_grad)
    : node_(std::make_shared<Node>()) {
  if (shape_numel(shape) != values.size()) {
    throw ShapeError("tensor: shape " + shape_str(shape) + " does not hold " +
                     std::to_string(values.size()) + " values");
  }
  node_->shape = std::move(shape);
  node_->value = std::move(values);
  node_->requires_grad = requires_grad;
}

Tensor Tensor::zeros(Shape shape) {
  const auto n = shape_numel(shape);
  return Tensor(std::move(shape), std::vector<double>(n, 0.0));
}

Tensor Tensor::full(Shape shape, double v) {
  const auto n = shape_numel(shape);
  return Tensor(std::move(shape), std::vector<double>(n, v));
}

Tensor Tensor::scalar(double v) { return Tensor({1}, {v}); }

Tensor Tensor::vector(std::vector<double> v) {
  const auto n = v.size();
  return Tensor({n}, std::move(v));
}

Tensor Tensor::matrix(std::size_t rows, std::size_t cols, std::vector<double> v) {
  return Tensor({rows, cols}, std::move(v));
}

Tensor Tensor::parameter(Shape shape, std::vector<double> values) {
  return Tensor(std::move(shape), std::move(values), true);
}

std::size_t Tensor::rows() const {
  const auto& s = node_->shape;
  return s.size() >= 2 ? s[0] : 1;
}

std::size_t Tensor::cols() const {
  const auto& s = node_->shape;
  if (s.empty()) return 1;
  return s.back();
}

double Tensor::at(std::size_t r, std::size_t c) const { return node_->value[r * cols() + c]; }

double Tensor::item() const {
  if (size() != 1) throw ShapeError("item: tensor of shape " + shape_str(shape()) + " is not a scalar");
  return node_->value[0];
}

Tensor Tensor::clone() const {
  Tensor t(node_->shape, node_->value, node_->requires_grad);
  return t;
}

Tensor Tensor::detach() const { return Tensor(node_->shape, node_->value, false); }

Tensor make_result(Shape shape, std::vector<double> values) {
  auto n = std::make_shared<Node>();
  n->shape = std::move(shape);
  n->value = std::move(values);
  return Tensor(std::move(n));
}

// ---- Tape ------------------------------------------------------------------

Tape& Tape::current() {
  thread_local Tape tape;
  return tape;
}

void Tape::record(std::vector<std::shared_ptr<Node>> inputs, std::shared_ptr<Node> output,
                  std::function<void()> backward) {
  entries_.push_back(Entry{std::move(inputs), std::move(output), std::move(backward)});
}

void Tape::backward(const std::shared_ptr<Node>& root) {
  root->ensure_grad();
  root->grad[0] += 1.0;
  for (auto it = entries_.rbegin(); it != entries_.rend(); ++it) {
    if (it->output->grad.empty()) continue;
    it->backward();
  }
  entries_.clear();
}

NoGradGuard::NoGradGuard() : prev_(Tape::current().enabled_) { Tape::current().enabled_ = false; }
NoGradGuard::~NoGradGuard() { Tape::current().enabled_ = prev_; }

void backward(const Tensor& root) {
  if (root.size() != 1) {
    throw ShapeError("backward: root must be a scalar, got shape " + shape_str(root.shape()));
  }
  auto& tape = Tape::current();
  if (tape.size() == 0) throw std::logic_error("backward: tape is empty");
  if (!root.requires_grad()) throw std::logic_error("backward: root does not depend on any parameter");
  tape.backward(root.node());
}

namespace {

using NodePtr = std::shared_ptr<Node>;

bool tracking(std::initializer_list<const Tensor*> inputs) {
  if (!Tape::current().recording()) return false;
  for (auto* t : inputs) {
    if (t->requires_grad()) return true;
  }
  return false;
}

// Registers `out` on the tape when any input is tracked.
void finish(Tensor& out, std::vector<NodePtr> inputs, std::function<void()> bw) {
  out.set_requires_grad(true);
  Tape::current().record(std::move(inputs), out.node(), std::move(bw));
}

void accumulate(const NodePtr& n, std::size_t i, double g) {
  n->ensure_grad();
  n->grad[i] += g;
}

enum class Bcast { Same, Scalar, Row, Col };

struct BinaryPlan {
  Shape out;
  Bcast ma = Bcast::Same;
  Bcast mb = Bcast::Same;
  std::size_t m = 1;  // last extent of out
};

Bcast classify(const Shape& s, const Shape& out) {
  if (s == out) return Bcast::Same;
  if (shape_numel(s) == 1) return Bcast::Scalar;
  if (out.size() == 2) {
    const auto n = out[0], m = out[1];
    if ((s.size() == 1 && s[0] == m) || (s.size() == 2 && s[0] == 1 && s[1] == m)) return Bcast::Row;
    if (s.size() == 2 && s[0] == n && s[1] == 1) return Bcast::Col;
  }
  throw ShapeError("");
}

BinaryPlan plan(const char* op, const Tensor& a, const Tensor& b) {
  BinaryPlan p;
  const auto& sa = a.shape();
  const auto& sb = b.shape();
  if (sa == sb) {
    p.out = sa;
  } else if (a.size() > b.size() || (a.size() == b.size() && sa.size() >= sb.size())) {
    p.out = sa;
  } else {
    p.out = sb;
  }
  try {
    p.ma = classify(sa, p.out);
    p.mb = classify(sb, p.out);
  } catch (const ShapeError&) {
    throw ShapeError(std::string(op) + ": incompatible shapes " + shape_str(sa) + " and " + shape_str(sb));
  }
  p.m = p.out.empty() ? 1 : p.out.back();
  return p;
}

inline std::size_t bidx(Bcast mode, std::size_t i, std::size_t m) {
  switch (mode) {
    case Bcast::Same: return i;
    case Bcast::Scalar: return 0;
    case Bcast::Row: return i % m;
    case Bcast::Col: return i / m;
  }
  return i;
}

template <class Fwd, class Da, class Db>
Tensor binary(const char* op, const Tensor& a, const Tensor& b, Fwd fwd, Da da, Db db) {
  const auto p = plan(op, a, b);
  const auto n = shape_numel(p.out);
  const auto& va = a.node()->value;
  const auto& vb = b.node()->value;
  std::vector<double> out(n);
  for (std::size_t i = 0; i < n; ++i) out[i] = fwd(va[bidx(p.ma, i, p.m)], vb[bidx(p.mb, i, p.m)], i);
  Tensor r = make_result(p.out, std::move(out));
  if (tracking({&a, &b})) {
    NodePtr an = a.node(), bn = b.node(), on = r.node();
    finish(r, {an, bn}, [an, bn, on, p, n, da, db] {
      const auto& g = on->grad;
      for (std::size_t i = 0; i < n; ++i) {
        const std::size_t ia = bidx(p.ma, i, p.m), ib = bidx(p.mb, i, p.m);
        const double x = an->value[ia], y = bn->value[ib];
        if (an->requires_grad) accumulate(an, ia, g[i] * da(x, y, on->value[i]));
        if (bn->requires_grad) accumulate(bn, ib, g[i] * db(x, y, on->value[i]));
      }
    });
  }
  return r;
}

// dfn(x, y) gives dy/dx given input x and output y.
template <class Fwd, class Dfn>
Tensor unary(const Tensor& a, Fwd fwd, Dfn dfn) {
  const auto& va = a.node()->value;
  std::vector<double> out(va.size());
  for (std::size_t i = 0; i < va.size(); ++i) out[i] = fwd(va[i], i);
  Tensor r = make_result(a.shape(), std::move(out));
  if (tracking({&a})) {
    NodePtr an = a.node(), on = r.node();
    finish(r, {an}, [an, on, dfn] {
      an->ensure_grad();
      for (std::size_t i = 0; i < an->value.size(); ++i) {
        an->grad[i] += on->grad[i] * dfn(an->value[i], on->value[i]);
      }
    });
  }
  return r;
}

std::pair<std::size_t, std::size_t> as_rows(const Tensor& a) {
  if (a.rank() == 1) return {1, a.shape()[0]};
  if (a.rank() == 2) return {a.shape()[0], a.shape()[1]};
  throw ShapeError("expected rank 1 or 2, got " + shape_str(a.shape()));
}

void require_rank2(const char* op, const Tensor& a) {
  if (a.rank() != 2) throw ShapeError(std::string(op) + ": expected a matrix, got " + shape_str(a.shape()));
}

double stable_sigmoid(double x) {
  if (x >= 0) return 1.0 / (1.0 + std::exp(-x));
  const double e = std::exp(x);
  return e / (1.0 + e);
}

}  // namespace

// ---- elementwise -------------------------------------------------------------

Tensor add(const Tensor& a, const Tensor& b) {
  return binary(
      "add", a, b, [](double x, double y, std::size_t) { return x + y; },
      [](double, double, double) { return 1.0; }, [](double, double, double) { return 1.0; });
}

Tensor sub(const Tensor& a, const Tensor& b) {
  return binary(
      "sub", a, b, [](double x, double y, std::size_t) { return x - y; },
      [](double, double, double) { return 1.0; }, [](double, double, double) { return -1.0; });
}

Tensor mul(const Tensor& a, const Tensor& b) {
  return binary(
      "mul", a, b, [](double x, double y, std::size_t) { return x * y; },
      [](double, double y, double) { return y; }, [](double x, double, double) { return x; });
}

Tensor div(const Tensor& a, const Tensor& b) {
  return binary(
      "div", a, b,
      [](double x, double y, std::size_t i) {
        if (y == 0.0) throw DomainError("div: zero divisor at element " + std::to_string(i));
        return x / y;
      },
      [](double, double y, double) { return 1.0 / y; },
      [](double, double y, double o) { return -o / y; });
}

Tensor neg(const Tensor& a) {
  return unary(
      a, [](double x, std::size_t) { return -x; }, [](double, double) { return -1.0; });
}

Tensor exp(const Tensor& a) {
  return unary(
      a, [](double x, std::size_t) { return std::exp(x); }, [](double, double y) { return y; });
}

Tensor log(const Tensor& a) {
  return unary(
      a,
      [](double x, std::size_t i) {
        if (!(x > 0.0)) {
          throw DomainError("log: non-positive operand " + std::to_string(x) + " at element " + std::to_string(i));
        }
        return std::log(x);
      },
      [](double x, double) { return 1.0 / x; });
}

Tensor sqrt(const Tensor& a) {
  return unary(
      a,
      [](double x, std::size_t i) {
        if (x < 0.0) {
          throw DomainError("sqrt: negative operand " + std::to_string(x) + " at element " + std::to_string(i));
        }
        return std::sqrt(x);
      },
      [](double, double y) { return 0.5 / y; });
}

Tensor square(const Tensor& a) {
  return unary(
      a, [](double x, std::size_t) { return x * x; }, [](double x, double) { return 2.0 * x; });
}

Tensor tanh(const Tensor& a) {
  return unary(
      a, [](double x, std::size_t) { return std::tanh(x); }, [](double, double y) { return 1.0 - y * y; });
}

Tensor sigmoid(const Tensor& a) {
  return unary(
      a, [](double x, std::size_t) { return stable_sigmoid(x); }, [](double, double y) { return y * (1.0 - y); });
}

Tensor softplus(const Tensor& a) {
  return unary(
      a,
      [](double x, std::size_t) { return x > 0 ? x + std::log1p(std::exp(-x)) : std::log1p(std::exp(x)); },
      [](double x, double) { return stable_sigmoid(x); });
}

Tensor leaky_relu(const Tensor& a, double slope) {
  return unary(
      a, [slope](double x, std::size_t) { return x > 0 ? x : slope * x; },
      [slope](double x, double) { return x > 0 ? 1.0 : slope; });
}

Tensor clamp(const Tensor& a, double lo, double hi) {
  return unary(
      a, [lo, hi](double x, std::size_t) { return std::clamp(x, lo, hi); },
      [lo, hi](double x, double) { return (x >= lo && x <= hi) ? 1.0 : 0.0; });
}

// ---- matmul ----------------------------------------------------------------

Tensor matmul(const Tensor& a, const Tensor& b) {
  if (a.rank() != 2 || b.rank() != 2 || a.shape()[1] != b.shape()[0]) {
    throw ShapeError("matmul: incompatible shapes " + shape_str(a.shape()) + " and " + shape_str(b.shape()));
  }
  const std::size_t n = a.shape()[0], k = a.shape()[1], m = b.shape()[1];
  const auto& va = a.node()->value;
  const auto& vb = b.node()->value;
  std::vector<double> out(n * m, 0.0);
  for (std::size_t i = 0; i < n; ++i) {
    double* orow = out.data() + i * m;
    for (std::size_t p = 0; p < k; ++p) {
      const double av = va[i * k + p];
      if (av == 0.0) continue;
      const double* brow = vb.data() + p * m;
      for (std::size_t j = 0; j < m; ++j) orow[j] += av * brow[j];
    }
  }
  Tensor r = make_result({n, m}, std::move(out));
  if (tracking({&a, &b})) {
    NodePtr an = a.node(), bn = b.node(), on = r.node();
    finish(r, {an, bn}, [an, bn, on, n, k, m] {
      const auto& g = on->grad;
      if (an->requires_grad) {
        an->ensure_grad();
        for (std::size_t i = 0; i < n; ++i) {
          for (std::size_t p = 0; p < k; ++p) {
            double s = 0.0;
            const double* brow = bn->value.data() + p * m;
            const double* grow = g.data() + i * m;
            for (std::size_t j = 0; j < m; ++j) s += grow[j] * brow[j];
            an->grad[i * k + p] += s;
          }
        }
      }
      if (bn->requires_grad) {
        bn->ensure_grad();
        for (std::size_t i = 0; i < n; ++i) {
          const double* grow = g.data() + i * m;
          for (std::size_t p = 0; p < k; ++p) {
            const double av = an->value[i * k + p];
            if (av == 0.0) continue;
            double* bg = bn->grad.data() + p * m;
            for (std::size_t j = 0; j < m; ++j) bg[j] += av * grow[j];
          }
        }
      }
    });
  }
  return r;
}

// ---- reductions ------------------------------------------------------------

Tensor sum(const Tensor& a) {
  double s = 0.0;
  for (double v : a.data()) s += v;
  Tensor r = make_result({1}, {s});
  if (tracking({&a})) {
    NodePtr an = a.node(), on = r.node();
    finish(r, {an}, [an, on] {
      an->ensure_grad();
      for (auto& g : an->grad) g += on->grad[0];
    });
  }
  return r;
}

Tensor mean(const Tensor& a) {
  if (a.size() == 0) throw ShapeError("mean: empty tensor");
  return sum(a) / static_cast<double>(a.size());
}

Tensor sum_rows(const Tensor& a) {
  require_rank2("sum_rows", a);
  const std::size_t n = a.shape()[0], m = a.shape()[1];
  const auto& va = a.node()->value;
  std::vector<double> out(n, 0.0);
  for (std::size_t i = 0; i < n; ++i) {
    for (std::size_t j = 0; j < m; ++j) out[i] += va[i * m + j];
  }
  Tensor r = make_result({n}, std::move(out));
  if (tracking({&a})) {
    NodePtr an = a.node(), on = r.node();
    finish(r, {an}, [an, on, n, m] {
      an->ensure_grad();
      for (std::size_t i = 0; i < n; ++i) {
        for (std::size_t j = 0; j < m; ++j) an->grad[i * m + j] += on->grad[i];
      }
    });
  }
  return r;
}

Tensor log_softmax(const Tensor& a) {
  const auto [n, m] = as_rows(a);
  if (m == 0) throw ShapeError("log_softmax: empty last axis");
  const auto& va = a.node()->value;
  std::vector<double> out(n * m);
  for (std::size_t i = 0; i < n; ++i) {
    const double* row = va.data() + i * m;
    const double mx = *std::max_element(row, row + m);
    double s = 0.0;
    for (std::size_t j = 0; j < m; ++j) s += std::exp(row[j] - mx);
    const double lse = mx + std::log(s);
    for (std::size_t j = 0; j < m; ++j) out[i * m + j] = row[j] - lse;
  }
  Tensor r = make_result(a.shape(), std::move(out));
  if (tracking({&a})) {
    NodePtr an = a.node(), on = r.node();
    finish(r, {an}, [an, on, n = n, m = m] {
      an->ensure_grad();
      for (std::size_t i = 0; i < n; ++i) {
        double gs = 0.0;
        for (std::size_t j = 0; j < m; ++j) gs += on->grad[i * m + j];
        for (std::size_t j = 0; j < m; ++j) {
          an->grad[i * m + j] += on->grad[i * m + j] - std::exp(on->value[i * m + j]) * gs;
        }
      }
    });
  }
  return r;
}

Tensor softmax(const Tensor& a) { return exp(log_softmax(a)); }

// ---- indexing / layout -------------------------------------------------------

Tensor index_select(const Tensor& a, std::span<const std::size_t> index) {
  const auto [n, m] = as_rows(a);
  if (index.size() != n) {
    throw ShapeError("index_select: " + std::to_string(index.size()) + " indices for shape " + shape_str(a.shape()));
  }
  const auto& va = a.node()->value;
  std::vector<std::size_t> flat(n);
  std::vector<double> out(n);
  for (std::size_t i = 0; i < n; ++i) {
    if (index[i] >= m) {
      throw ShapeError("index_select: index " + std::to_string(index[i]) + " out of range for shape " +
                       shape_str(a.shape()));
    }
    flat[i] = i * m + index[i];
    out[i] = va[flat[i]];
  }
  Tensor r = make_result({n}, std::move(out));
  if (tracking({&a})) {
    NodePtr an = a.node(), on = r.node();
    finish(r, {an}, [an, on, flat = std::move(flat)] {
      an->ensure_grad();
      for (std::size_t i = 0; i < flat.size(); ++i) an->grad[flat[i]] += on->grad[i];
    });
  }
  return r;
}

Tensor where(std::span<const std::uint8_t> mask, const Tensor& a, const Tensor& b) {
  if (a.shape() != b.shape() || mask.size() != a.size()) {
    throw ShapeError("where: incompatible shapes " + shape_str(a.shape()) + " and " + shape_str(b.shape()) +
                     " with mask of " + std::to_string(mask.size()));
  }
  std::vector<std::uint8_t> m(mask.begin(), mask.end());
  std::vector<double> out(a.size());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = m[i] ? a[i] : b[i];
  Tensor r = make_result(a.shape(), std::move(out));
  if (tracking({&a, &b})) {
    NodePtr an = a.node(), bn = b.node(), on = r.node();
    finish(r, {an, bn}, [an, bn, on, m = std::move(m)] {
      for (std::size_t i = 0; i < m.size(); ++i) {
        if (m[i]) {
          if (an->requires_grad) accumulate(an, i, on->grad[i]);
        } else if (bn->requires_grad) {
          accumulate(bn, i, on->grad[i]);
        }
      }
    });
  }
  return r;
}

Tensor reshape(const Tensor& a, Shape shape) {
  if (shape_numel(shape) != a.size()) {
    throw ShapeError("reshape: cannot view " + shape_str(a.shape()) + " as " + shape_str(shape));
  }
  Tensor r = make_result(std::move(shape), a.node()->value);
  if (tracking({&a})) {
    NodePtr an = a.node(), on = r.node();
    finish(r, {an}, [an, on] {
      an->ensure_grad();
      for (std::size_t i = 0; i < an->grad.size(); ++i) an->grad[i] += on->grad[i];
    });
  }
  return r;
}

Tensor slice_cols(const Tensor& a, std::size_t begin, std::size_t end) {
  require_rank2("slice_cols", a);
  const std::size_t n = a.shape()[0], m = a.shape()[1];
  if (begin > end || end > m) {
    throw ShapeError("slice_cols: range [" + std::to_string(begin) + "," + std::to_string(end) +
                     ") out of bounds for " + shape_str(a.shape()));
  }
  const std::size_t w = end - begin;
  const auto& va = a.node()->value;
  std::vector<double> out(n * w);
  for (std::size_t i = 0; i < n; ++i) {
    std::copy_n(va.begin() + static_cast<std::ptrdiff_t>(i * m + begin), w,
                out.begin() + static_cast<std::ptrdiff_t>(i * w));
  }
  Tensor r = make_result({n, w}, std::move(out));
  if (tracking({&a})) {
    NodePtr an = a.node(), on = r.node();
    finish(r, {an}, [an, on, n, m, w, begin] {
      an->ensure_grad();
      for (std::size_t i = 0; i < n; ++i) {
        for (std::size_t j = 0; j < w; ++j) an->grad[i * m + begin + j] += on->grad[i * w + j];
      }
    });
  }
  return r;
}

Tensor concat_cols(const std::vector<Tensor>& parts) {
  if (parts.empty()) throw ShapeError("concat_cols: no inputs");
  const std::size_t n = parts[0].rank() == 2 ? parts[0].shape()[0] : 0;
  std::size_t total = 0;
  for (const auto& p : parts) {
    if (p.rank() != 2 || p.shape()[0] != n) {
      throw ShapeError("concat_cols: incompatible shapes " + shape_str(parts[0].shape()) + " and " +
                       shape_str(p.shape()));
    }
    total += p.shape()[1];
  }
  std::vector<double> out(n * total);
  std::size_t off = 0;
  for (const auto& p : parts) {
    const std::size_t w = p.shape()[1];
    for (std::size_t i = 0; i < n; ++i) {
      for (std::size_t j = 0; j < w; ++j) out[i * total + off + j] = p.node()->value[i * w + j];
    }
    off += w;
  }
  Tensor r = make_result({n, total}, std::move(out));
  bool any = false;
  for (const auto& p : parts) any = any || p.requires_grad();
  if (any && Tape::current().recording()) {
    std::vector<NodePtr> ins;
    for (const auto& p : parts) ins.push_back(p.node());
    NodePtr on = r.node();
    finish(r, ins, [ins, on, n, total] {
      std::size_t o = 0;
      for (const auto& pn : ins) {
        const std::size_t w = pn->shape[1];
        if (pn->requires_grad) {
          pn->ensure_grad();
          for (std::size_t i = 0; i < n; ++i) {
            for (std::size_t j = 0; j < w; ++j) pn->grad[i * w + j] += on->grad[i * total + o + j];
          }
        }
        o += w;
      }
    });
  }
  return r;
}

}  // namespace flowharm::num
