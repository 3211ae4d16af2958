#pragma once

// Reverse-mode automatic differentiation on a tape of double-precision
// matrices. Operations are free functions: applied to constants they are
// plain eager math; applied to tensors tracked on a Tape they also record a
// backprop closure. One unusual primitive lives here on purpose: the top
// eigenvalue of a symmetric 3x3 matrix, differentiated through its
// eigenvector (d lambda1 / dA = u1 u1^T), which lets spectral penalties sit
// inside ordinary loss graphs.

#include <unihpe/numkit.hpp>

#include <cmath>
#include <cstddef>
#include <functional>
#include <stdexcept>
#include <string>
#include <unordered_map>
#include <utility>
#include <vector>

namespace unihpe::ag {

class Tape;

// ---------------------------------------------------------------------------
// Tensor: a rows x cols matrix, optionally tracked on a tape. Scalars are
// 1x1, row vectors 1xN. Copying a tracked tensor copies the handle; both
// copies refer to the same tape node.
// ---------------------------------------------------------------------------

struct Tensor {
  std::size_t rows = 0;
  std::size_t cols = 0;
  std::vector<double> v;
  Tape* tape = nullptr;
  int node = -1;

  Tensor() = default;
  Tensor(std::size_t r, std::size_t c) : rows(r), cols(c), v(r * c, 0.0) {}

  bool tracked() const { return tape != nullptr && node >= 0; }

  double& at(std::size_t r, std::size_t c) { return v[r * cols + c]; }
  double at(std::size_t r, std::size_t c) const { return v[r * cols + c]; }

  double scalar() const {
    if (rows != 1 || cols != 1)
      throw std::invalid_argument("Tensor::scalar: tensor is " + std::to_string(rows) + "x" +
                                  std::to_string(cols) + ", not 1x1");
    return v[0];
  }

  static Tensor scalar_of(double x) {
    Tensor t(1, 1);
    t.v[0] = x;
    return t;
  }

  static Tensor from_matrix(const numkit::Matrix& m) {
    Tensor t(m.rows, m.cols);
    t.v = m.v;
    return t;
  }

  numkit::Matrix to_matrix() const {
    numkit::Matrix m(rows, cols);
    m.v = v;
    return m;
  }
};

// ---------------------------------------------------------------------------
// Parameter: a named trainable matrix owned by a model. Tapes hand out
// tracked views via Tape::use; a parameter with trainable=false enters the
// graph as a constant, which is how whole submodules get frozen without
// touching their code.
// ---------------------------------------------------------------------------

struct Parameter {
  std::string name;
  std::size_t rows = 0;
  std::size_t cols = 0;
  std::vector<double> value;
  bool trainable = true;

  Parameter() = default;
  Parameter(std::string n, std::size_t r, std::size_t c)
      : name(std::move(n)), rows(r), cols(c), value(r * c, 0.0) {}

  double& at(std::size_t r, std::size_t c) { return value[r * cols + c]; }
  double at(std::size_t r, std::size_t c) const { return value[r * cols + c]; }
};

// ---------------------------------------------------------------------------
// Tape
// ---------------------------------------------------------------------------

class Tape {
 public:
  // strict: validate finiteness of everything entering or produced on the
  // tape, naming the offending operation. Costs one scan per value; training
  // keeps it on, benchmarks may turn it off.
  explicit Tape(bool strict = true) : strict_(strict) {}

  Tape(const Tape&) = delete;
  Tape& operator=(const Tape&) = delete;

  // Tracked leaf holding a copy of `value` (an input batch, a constant with
  // gradient interest).
  Tensor input(const Tensor& value) {
    if (strict_) check_finite("input", value.v);
    Tensor out = value;
    out.tape = this;
    out.node = push_node(value.rows, value.cols, value.v);
    return out;
  }

  // Tracked view of a parameter. Repeated use() of the same parameter
  // returns the same node, so gradients accumulate in one place. Frozen
  // parameters come back as plain constants.
  Tensor use(Parameter& p) {
    Tensor out;
    out.rows = p.rows;
    out.cols = p.cols;
    out.v = p.value;
    if (!p.trainable) return out;
    if (strict_) check_finite(("parameter " + p.name).c_str(), p.value);
    auto it = param_nodes_.find(&p);
    if (it == param_nodes_.end()) {
      const int id = push_node(p.rows, p.cols, p.value);
      it = param_nodes_.emplace(&p, id).first;
    }
    out.tape = this;
    out.node = it->second;
    return out;
  }

  // Runs the reverse sweep from a scalar loss. May be called repeatedly;
  // each call recomputes all gradients from scratch (bit-identically, since
  // the sweep order is fixed by node ids).
  void backward(const Tensor& loss) {
    if (loss.tape != this || loss.node < 0)
      throw std::invalid_argument("backward: loss is not tracked on this tape");
    if (loss.rows != 1 || loss.cols != 1)
      throw std::invalid_argument("backward: loss must be 1x1, got " + std::to_string(loss.rows) +
                                  "x" + std::to_string(loss.cols));
    if (!std::isfinite(nodes_[loss.node].out[0]))
      throw std::runtime_error("backward: loss value is not finite");
    grads_.assign(nodes_.size(), {});
    grad_buf(loss.node)[0] = 1.0;
    for (int i = loss.node; i >= 0; --i)
      if (!grads_[i].empty() && nodes_[i].backprop) nodes_[i].backprop();
  }

  bool has_grad(const Parameter& p) const {
    auto it = param_nodes_.find(&p);
    return it != param_nodes_.end() && static_cast<std::size_t>(it->second) < grads_.size() &&
           !grads_[it->second].empty();
  }

  // Gradient of the last backward() loss w.r.t. p. Zero if p was used but
  // received no gradient; error if p never entered this tape.
  std::vector<double> grad(const Parameter& p) const {
    auto it = param_nodes_.find(&p);
    if (it == param_nodes_.end())
      throw std::invalid_argument("Tape::grad: parameter '" + p.name +
                                  "' was never used on this tape");
    if (static_cast<std::size_t>(it->second) >= grads_.size() || grads_[it->second].empty())
      return std::vector<double>(p.rows * p.cols, 0.0);
    return grads_[it->second];
  }

  // Gradient w.r.t. a tracked tensor (inputs included).
  std::vector<double> grad(const Tensor& t) const {
    if (t.tape != this || t.node < 0)
      throw std::invalid_argument("Tape::grad: tensor is not tracked on this tape");
    if (static_cast<std::size_t>(t.node) >= grads_.size() || grads_[t.node].empty())
      return std::vector<double>(t.rows * t.cols, 0.0);
    return grads_[t.node];
  }

  std::size_t size() const { return nodes_.size(); }
  bool strict() const { return strict_; }

  // Number of top_eig3 forward evaluations whose leading eigengap was too
  // small for the eigenvector (hence the gradient) to be well conditioned.
  int eig_degeneracies() const { return eig_degeneracies_; }

  // --- internals used by the op implementations ---------------------------

  int push_node(std::size_t r, std::size_t c, std::vector<double> values) {
    nodes_.push_back(NodeRec{r, c, std::move(values), nullptr});
    return static_cast<int>(nodes_.size()) - 1;
  }

  void set_backprop(int id, std::function<void()> fn) { nodes_[id].backprop = std::move(fn); }

  const std::vector<double>& node_values(int id) const { return nodes_[id].out; }

  std::vector<double>& grad_buf(int id) {
    auto& g = grads_[id];
    if (g.empty()) g.assign(nodes_[id].rows * nodes_[id].cols, 0.0);
    return g;
  }

  bool grad_present(int id) const {
    return static_cast<std::size_t>(id) < grads_.size() && !grads_[id].empty();
  }

  void note_eig_degeneracy() { ++eig_degeneracies_; }

  static void check_finite(const char* op, const std::vector<double>& xs) {
    for (std::size_t i = 0; i < xs.size(); ++i)
      if (!std::isfinite(xs[i]))
        throw std::runtime_error(std::string(op) + ": non-finite value at flat index " +
                                 std::to_string(i));
  }

 private:
  struct NodeRec {
    std::size_t rows, cols;
    std::vector<double> out;
    std::function<void()> backprop;
  };

  std::vector<NodeRec> nodes_;
  std::vector<std::vector<double>> grads_;
  std::unordered_map<const Parameter*, int> param_nodes_;
  bool strict_;
  int eig_degeneracies_ = 0;
};

// ---------------------------------------------------------------------------
// Op plumbing
// ---------------------------------------------------------------------------

namespace detail {

// Source operand for a backprop closure: tracked operands are re-read from
// the tape at backward time (storage there is stable), constants keep a copy.
struct Src {
  int node = -1;
  std::vector<double> held;
};

inline Src src_of(const Tensor& x) {
  if (x.tracked()) return Src{x.node, {}};
  return Src{-1, x.v};
}

inline const std::vector<double>& values_of(const Tape& t, const Src& s) {
  return s.node >= 0 ? t.node_values(s.node) : s.held;
}

inline Tape* result_tape(const char* op, const Tensor& a, const Tensor& b) {
  Tape* t = a.tracked() ? a.tape : nullptr;
  if (b.tracked()) {
    if (t != nullptr && t != b.tape)
      throw std::invalid_argument(std::string(op) + ": operands live on different tapes");
    t = b.tape;
  }
  return t;
}

inline Tensor emit(const char* op, Tape* t, std::size_t r, std::size_t c,
                   std::vector<double> values) {
  Tensor out;
  out.rows = r;
  out.cols = c;
  out.v = std::move(values);
  if (t != nullptr) {
    if (t->strict()) Tape::check_finite(op, out.v);
    out.tape = t;
    out.node = t->push_node(r, c, out.v);
  }
  return out;
}

inline void require(bool cond, const std::string& msg) {
  if (!cond) throw std::invalid_argument(msg);
}

inline std::string shape_str(const Tensor& t) {
  return std::to_string(t.rows) + "x" + std::to_string(t.cols);
}

}  // namespace detail

// ---------------------------------------------------------------------------
// Arithmetic ops
// ---------------------------------------------------------------------------

inline Tensor matmul(const Tensor& a, const Tensor& b) {
  detail::require(a.cols == b.rows,
                  "matmul: inner dimensions differ, " + detail::shape_str(a) + " * " +
                      detail::shape_str(b));
  std::vector<double> out(a.rows * b.cols, 0.0);
  for (std::size_t i = 0; i < a.rows; ++i)
    for (std::size_t k = 0; k < a.cols; ++k) {
      const double aik = a.v[i * a.cols + k];
      if (aik == 0.0) continue;
      const double* brow = b.v.data() + k * b.cols;
      double* orow = out.data() + i * b.cols;
      for (std::size_t j = 0; j < b.cols; ++j) orow[j] += aik * brow[j];
    }
  Tape* t = detail::result_tape("matmul", a, b);
  Tensor res = detail::emit("matmul", t, a.rows, b.cols, std::move(out));
  if (t != nullptr) {
    const detail::Src sa = detail::src_of(a), sb = detail::src_of(b);
    const int ia = a.node, ib = b.node, io = res.node;
    const std::size_t m = a.rows, k = a.cols, n = b.cols;
    t->set_backprop(io, [t, sa, sb, ia, ib, io, m, k, n] {
      const auto& go = t->grad_buf(io);
      if (ia >= 0) {
        const auto& bv = detail::values_of(*t, sb);
        auto& ga = t->grad_buf(ia);
        for (std::size_t i = 0; i < m; ++i)
          for (std::size_t j = 0; j < n; ++j) {
            const double g = go[i * n + j];
            if (g == 0.0) continue;
            for (std::size_t p = 0; p < k; ++p) ga[i * k + p] += g * bv[p * n + j];
          }
      }
      if (ib >= 0) {
        const auto& av = detail::values_of(*t, sa);
        auto& gb = t->grad_buf(ib);
        for (std::size_t i = 0; i < m; ++i)
          for (std::size_t p = 0; p < k; ++p) {
            const double aip = av[i * k + p];
            if (aip == 0.0) continue;
            for (std::size_t j = 0; j < n; ++j) gb[p * n + j] += aip * go[i * n + j];
          }
      }
    });
  }
  return res;
}

// a * b^T; the natural layout for similarity matrices between two row sets.
inline Tensor matmul_nt(const Tensor& a, const Tensor& b) {
  detail::require(a.cols == b.cols,
                  "matmul_nt: column counts differ, " + detail::shape_str(a) + " vs " +
                      detail::shape_str(b));
  std::vector<double> out(a.rows * b.rows, 0.0);
  for (std::size_t i = 0; i < a.rows; ++i)
    for (std::size_t j = 0; j < b.rows; ++j) {
      double s = 0.0;
      const double* ra = a.v.data() + i * a.cols;
      const double* rb = b.v.data() + j * b.cols;
      for (std::size_t p = 0; p < a.cols; ++p) s += ra[p] * rb[p];
      out[i * b.rows + j] = s;
    }
  Tape* t = detail::result_tape("matmul_nt", a, b);
  Tensor res = detail::emit("matmul_nt", t, a.rows, b.rows, std::move(out));
  if (t != nullptr) {
    const detail::Src sa = detail::src_of(a), sb = detail::src_of(b);
    const int ia = a.node, ib = b.node, io = res.node;
    const std::size_t m = a.rows, n = b.rows, k = a.cols;
    t->set_backprop(io, [t, sa, sb, ia, ib, io, m, n, k] {
      const auto& go = t->grad_buf(io);
      if (ia >= 0) {
        const auto& bv = detail::values_of(*t, sb);
        auto& ga = t->grad_buf(ia);
        for (std::size_t i = 0; i < m; ++i)
          for (std::size_t j = 0; j < n; ++j) {
            const double g = go[i * n + j];
            if (g == 0.0) continue;
            for (std::size_t p = 0; p < k; ++p) ga[i * k + p] += g * bv[j * k + p];
          }
      }
      if (ib >= 0) {
        const auto& av = detail::values_of(*t, sa);
        auto& gb = t->grad_buf(ib);
        for (std::size_t i = 0; i < m; ++i)
          for (std::size_t j = 0; j < n; ++j) {
            const double g = go[i * n + j];
            if (g == 0.0) continue;
            for (std::size_t p = 0; p < k; ++p) gb[j * k + p] += g * av[i * k + p];
          }
      }
    });
  }
  return res;
}

// add supports equal shapes, a + row-vector (broadcast down rows), and
// a + scalar.
inline Tensor add(const Tensor& a, const Tensor& b) {
  const bool same = a.rows == b.rows && a.cols == b.cols;
  const bool rowb = b.rows == 1 && b.cols == a.cols && a.rows >= 1;
  const bool scalb = b.rows == 1 && b.cols == 1;
  detail::require(same || rowb || scalb,
                  "add: incompatible shapes " + detail::shape_str(a) + " + " +
                      detail::shape_str(b));
  std::vector<double> out(a.v);
  if (same)
    for (std::size_t i = 0; i < out.size(); ++i) out[i] += b.v[i];
  else if (scalb)
    for (auto& x : out) x += b.v[0];
  else
    for (std::size_t r = 0; r < a.rows; ++r)
      for (std::size_t c = 0; c < a.cols; ++c) out[r * a.cols + c] += b.v[c];
  Tape* t = detail::result_tape("add", a, b);
  Tensor res = detail::emit("add", t, a.rows, a.cols, std::move(out));
  if (t != nullptr) {
    const int ia = a.node, ib = b.node, io = res.node;
    const std::size_t rows = a.rows, cols = a.cols;
    const bool bsame = same, bscal = scalb;
    t->set_backprop(io, [t, ia, ib, io, rows, cols, bsame, bscal] {
      const auto& go = t->grad_buf(io);
      if (ia >= 0) {
        auto& ga = t->grad_buf(ia);
        for (std::size_t i = 0; i < go.size(); ++i) ga[i] += go[i];
      }
      if (ib >= 0) {
        auto& gb = t->grad_buf(ib);
        if (bsame)
          for (std::size_t i = 0; i < go.size(); ++i) gb[i] += go[i];
        else if (bscal)
          for (double g : go) gb[0] += g;
        else
          for (std::size_t r = 0; r < rows; ++r)
            for (std::size_t c = 0; c < cols; ++c) gb[c] += go[r * cols + c];
      }
    });
  }
  return res;
}

inline Tensor sub(const Tensor& a, const Tensor& b) {
  const bool same = a.rows == b.rows && a.cols == b.cols;
  const bool scalb = b.rows == 1 && b.cols == 1;
  detail::require(same || scalb,
                  "sub: incompatible shapes " + detail::shape_str(a) + " - " +
                      detail::shape_str(b));
  std::vector<double> out(a.v);
  if (same)
    for (std::size_t i = 0; i < out.size(); ++i) out[i] -= b.v[i];
  else
    for (auto& x : out) x -= b.v[0];
  Tape* t = detail::result_tape("sub", a, b);
  Tensor res = detail::emit("sub", t, a.rows, a.cols, std::move(out));
  if (t != nullptr) {
    const int ia = a.node, ib = b.node, io = res.node;
    const bool bsame = same;
    t->set_backprop(io, [t, ia, ib, io, bsame] {
      const auto& go = t->grad_buf(io);
      if (ia >= 0) {
        auto& ga = t->grad_buf(ia);
        for (std::size_t i = 0; i < go.size(); ++i) ga[i] += go[i];
      }
      if (ib >= 0) {
        auto& gb = t->grad_buf(ib);
        if (bsame)
          for (std::size_t i = 0; i < go.size(); ++i) gb[i] -= go[i];
        else
          for (double g : go) gb[0] -= g;
      }
    });
  }
  return res;
}

inline Tensor mul(const Tensor& a, const Tensor& b) {
  detail::require(a.rows == b.rows && a.cols == b.cols,
                  "mul: shapes differ, " + detail::shape_str(a) + " vs " + detail::shape_str(b));
  std::vector<double> out(a.v);
  for (std::size_t i = 0; i < out.size(); ++i) out[i] *= b.v[i];
  Tape* t = detail::result_tape("mul", a, b);
  Tensor res = detail::emit("mul", t, a.rows, a.cols, std::move(out));
  if (t != nullptr) {
    const detail::Src sa = detail::src_of(a), sb = detail::src_of(b);
    const int ia = a.node, ib = b.node, io = res.node;
    t->set_backprop(io, [t, sa, sb, ia, ib, io] {
      const auto& go = t->grad_buf(io);
      if (ia >= 0) {
        const auto& bv = detail::values_of(*t, sb);
        auto& ga = t->grad_buf(ia);
        for (std::size_t i = 0; i < go.size(); ++i) ga[i] += go[i] * bv[i];
      }
      if (ib >= 0) {
        const auto& av = detail::values_of(*t, sa);
        auto& gb = t->grad_buf(ib);
        for (std::size_t i = 0; i < go.size(); ++i) gb[i] += go[i] * av[i];
      }
    });
  }
  return res;
}

inline Tensor scale(const Tensor& a, double c) {
  std::vector<double> out(a.v);
  for (auto& x : out) x *= c;
  Tape* t = a.tracked() ? a.tape : nullptr;
  Tensor res = detail::emit("scale", t, a.rows, a.cols, std::move(out));
  if (t != nullptr) {
    const int ia = a.node, io = res.node;
    t->set_backprop(io, [t, ia, io, c] {
      const auto& go = t->grad_buf(io);
      auto& ga = t->grad_buf(ia);
      for (std::size_t i = 0; i < go.size(); ++i) ga[i] += c * go[i];
    });
  }
  return res;
}

// Multiply every entry of a by a 1x1 tensor (e.g. a learned inverse
// temperature). Differentiable in both operands.
inline Tensor mul_scalar(const Tensor& a, const Tensor& s) {
  detail::require(s.rows == 1 && s.cols == 1,
                  "mul_scalar: scale must be 1x1, got " + detail::shape_str(s));
  const double sv = s.v[0];
  std::vector<double> out(a.v);
  for (auto& x : out) x *= sv;
  Tape* t = detail::result_tape("mul_scalar", a, s);
  Tensor res = detail::emit("mul_scalar", t, a.rows, a.cols, std::move(out));
  if (t != nullptr) {
    const detail::Src sa = detail::src_of(a), ss = detail::src_of(s);
    const int ia = a.node, is = s.node, io = res.node;
    t->set_backprop(io, [t, sa, ss, ia, is, io] {
      const auto& go = t->grad_buf(io);
      if (ia >= 0) {
        const double sval = detail::values_of(*t, ss)[0];
        auto& ga = t->grad_buf(ia);
        for (std::size_t i = 0; i < go.size(); ++i) ga[i] += sval * go[i];
      }
      if (is >= 0) {
        const auto& av = detail::values_of(*t, sa);
        auto& gs = t->grad_buf(is);
        double acc = 0.0;
        for (std::size_t i = 0; i < go.size(); ++i) acc += go[i] * av[i];
        gs[0] += acc;
      }
    });
  }
  return res;
}

// ---------------------------------------------------------------------------
// Nonlinearities and normalizations
// ---------------------------------------------------------------------------

inline Tensor gelu(const Tensor& a) {
  constexpr double inv_sqrt2 = 0.70710678118654752;
  constexpr double inv_sqrt2pi = 0.39894228040143268;
  std::vector<double> out(a.v);
  for (auto& x : out) x = 0.5 * x * (1.0 + std::erf(x * inv_sqrt2));
  Tape* t = a.tracked() ? a.tape : nullptr;
  Tensor res = detail::emit("gelu", t, a.rows, a.cols, std::move(out));
  if (t != nullptr) {
    const detail::Src sa = detail::src_of(a);
    const int ia = a.node, io = res.node;
    t->set_backprop(io, [t, sa, ia, io] {
      const auto& go = t->grad_buf(io);
      const auto& av = detail::values_of(*t, sa);
      auto& ga = t->grad_buf(ia);
      for (std::size_t i = 0; i < go.size(); ++i) {
        const double x = av[i];
        const double cdf = 0.5 * (1.0 + std::erf(x * inv_sqrt2));
        const double pdf = inv_sqrt2pi * std::exp(-0.5 * x * x);
        ga[i] += go[i] * (cdf + x * pdf);
      }
    });
  }
  return res;
}

// Row-wise layer normalization with learned gain/bias (1 x cols each).
inline Tensor layer_norm(const Tensor& x, const Tensor& gain, const Tensor& bias,
                         double eps = 1e-5) {
  detail::require(gain.rows == 1 && gain.cols == x.cols && bias.rows == 1 && bias.cols == x.cols,
                  "layer_norm: gain/bias must be 1x" + std::to_string(x.cols));
  const std::size_t rows = x.rows, cols = x.cols;
  std::vector<double> out(rows * cols), xhat(rows * cols), inv_sd(rows);
  for (std::size_t r = 0; r < rows; ++r) {
    const double* xr = x.v.data() + r * cols;
    double mu = 0.0;
    for (std::size_t c = 0; c < cols; ++c) mu += xr[c];
    mu /= static_cast<double>(cols);
    double var = 0.0;
    for (std::size_t c = 0; c < cols; ++c) var += (xr[c] - mu) * (xr[c] - mu);
    var /= static_cast<double>(cols);
    const double isd = 1.0 / std::sqrt(var + eps);
    inv_sd[r] = isd;
    for (std::size_t c = 0; c < cols; ++c) {
      const double h = (xr[c] - mu) * isd;
      xhat[r * cols + c] = h;
      out[r * cols + c] = gain.v[c] * h + bias.v[c];
    }
  }
  Tape* t = detail::result_tape("layer_norm", x, gain);
  if (Tape* tb = detail::result_tape("layer_norm", x, bias); tb != nullptr) {
    detail::require(t == nullptr || t == tb, "layer_norm: operands live on different tapes");
    t = tb;
  }
  Tensor res = detail::emit("layer_norm", t, rows, cols, std::move(out));
  if (t != nullptr) {
    const detail::Src sg = detail::src_of(gain);
    const int ix = x.node, ig = gain.node, ib = bias.node, io = res.node;
    t->set_backprop(io, [t, sg, ix, ig, ib, io, rows, cols, xhat = std::move(xhat),
                         inv_sd = std::move(inv_sd)] {
      const auto& go = t->grad_buf(io);
      const auto& gv = detail::values_of(*t, sg);
      if (ix >= 0) {
        auto& gx = t->grad_buf(ix);
        for (std::size_t r = 0; r < rows; ++r) {
          double mean_gh = 0.0, mean_ghx = 0.0;
          for (std::size_t c = 0; c < cols; ++c) {
            const double gh = go[r * cols + c] * gv[c];
            mean_gh += gh;
            mean_ghx += gh * xhat[r * cols + c];
          }
          mean_gh /= static_cast<double>(cols);
          mean_ghx /= static_cast<double>(cols);
          for (std::size_t c = 0; c < cols; ++c) {
            const double gh = go[r * cols + c] * gv[c];
            gx[r * cols + c] +=
                inv_sd[r] * (gh - mean_gh - xhat[r * cols + c] * mean_ghx);
          }
        }
      }
      if (ig >= 0) {
        auto& gg = t->grad_buf(ig);
        for (std::size_t r = 0; r < rows; ++r)
          for (std::size_t c = 0; c < cols; ++c) gg[c] += go[r * cols + c] * xhat[r * cols + c];
      }
      if (ib >= 0) {
        auto& gb = t->grad_buf(ib);
        for (std::size_t r = 0; r < rows; ++r)
          for (std::size_t c = 0; c < cols; ++c) gb[c] += go[r * cols + c];
      }
    });
  }
  return res;
}

inline Tensor softmax_rows(const Tensor& a) {
  const std::size_t rows = a.rows, cols = a.cols;
  detail::require(cols > 0, "softmax_rows: empty rows");
  std::vector<double> out(rows * cols);
  for (std::size_t r = 0; r < rows; ++r) {
    const double* xr = a.v.data() + r * cols;
    double mx = xr[0];
    for (std::size_t c = 1; c < cols; ++c) mx = std::max(mx, xr[c]);
    double z = 0.0;
    for (std::size_t c = 0; c < cols; ++c) z += std::exp(xr[c] - mx);
    const double inv = 1.0 / z;
    for (std::size_t c = 0; c < cols; ++c) out[r * cols + c] = std::exp(xr[c] - mx) * inv;
  }
  Tape* t = a.tracked() ? a.tape : nullptr;
  Tensor res = detail::emit("softmax_rows", t, rows, cols, std::move(out));
  if (t != nullptr) {
    const int ia = a.node, io = res.node;
    t->set_backprop(io, [t, ia, io, rows, cols] {
      const auto& go = t->grad_buf(io);
      const auto& y = t->node_values(io);
      auto& ga = t->grad_buf(ia);
      for (std::size_t r = 0; r < rows; ++r) {
        double dot = 0.0;
        for (std::size_t c = 0; c < cols; ++c) dot += go[r * cols + c] * y[r * cols + c];
        for (std::size_t c = 0; c < cols; ++c)
          ga[r * cols + c] += y[r * cols + c] * (go[r * cols + c] - dot);
      }
    });
  }
  return res;
}

inline Tensor vlog(const Tensor& a) {
  std::vector<double> out(a.v);
  for (std::size_t i = 0; i < out.size(); ++i) {
    if (out[i] <= 0.0)
      throw std::invalid_argument("vlog: non-positive entry " + std::to_string(out[i]) +
                                  " at flat index " + std::to_string(i));
    out[i] = std::log(out[i]);
  }
  Tape* t = a.tracked() ? a.tape : nullptr;
  Tensor res = detail::emit("vlog", t, a.rows, a.cols, std::move(out));
  if (t != nullptr) {
    const detail::Src sa = detail::src_of(a);
    const int ia = a.node, io = res.node;
    t->set_backprop(io, [t, sa, ia, io] {
      const auto& go = t->grad_buf(io);
      const auto& av = detail::values_of(*t, sa);
      auto& ga = t->grad_buf(ia);
      for (std::size_t i = 0; i < go.size(); ++i) ga[i] += go[i] / av[i];
    });
  }
  return res;
}

inline Tensor vexp(const Tensor& a) {
  std::vector<double> out(a.v);
  for (auto& x : out) x = std::exp(x);
  Tape* t = a.tracked() ? a.tape : nullptr;
  Tensor res = detail::emit("vexp", t, a.rows, a.cols, std::move(out));
  if (t != nullptr) {
    const int ia = a.node, io = res.node;
    t->set_backprop(io, [t, ia, io] {
      const auto& go = t->grad_buf(io);
      const auto& y = t->node_values(io);
      auto& ga = t->grad_buf(ia);
      for (std::size_t i = 0; i < go.size(); ++i) ga[i] += go[i] * y[i];
    });
  }
  return res;
}

// ---------------------------------------------------------------------------
// Reductions
// ---------------------------------------------------------------------------

inline Tensor sum_all(const Tensor& a) {
  double s = 0.0;
  for (double x : a.v) s += x;
  Tape* t = a.tracked() ? a.tape : nullptr;
  Tensor res = detail::emit("sum_all", t, 1, 1, {s});
  if (t != nullptr) {
    const int ia = a.node, io = res.node;
    t->set_backprop(io, [t, ia, io] {
      const double g = t->grad_buf(io)[0];
      auto& ga = t->grad_buf(ia);
      for (auto& x : ga) x += g;
    });
  }
  return res;
}

inline Tensor mean_all(const Tensor& a) {
  detail::require(!a.v.empty(), "mean_all: empty tensor");
  double s = 0.0;
  for (double x : a.v) s += x;
  const double inv_n = 1.0 / static_cast<double>(a.v.size());
  Tape* t = a.tracked() ? a.tape : nullptr;
  Tensor res = detail::emit("mean_all", t, 1, 1, {s * inv_n});
  if (t != nullptr) {
    const int ia = a.node, io = res.node;
    t->set_backprop(io, [t, ia, io, inv_n] {
      const double g = t->grad_buf(io)[0] * inv_n;
      auto& ga = t->grad_buf(ia);
      for (auto& x : ga) x += g;
    });
  }
  return res;
}

// ---------------------------------------------------------------------------
// Structural ops
// ---------------------------------------------------------------------------

inline Tensor concat_cols(const Tensor& a, const Tensor& b) {
  detail::require(a.rows == b.rows, "concat_cols: row counts differ, " + detail::shape_str(a) +
                                        " vs " + detail::shape_str(b));
  const std::size_t rows = a.rows, ca = a.cols, cb = b.cols;
  std::vector<double> out(rows * (ca + cb));
  for (std::size_t r = 0; r < rows; ++r) {
    std::copy_n(a.v.data() + r * ca, ca, out.data() + r * (ca + cb));
    std::copy_n(b.v.data() + r * cb, cb, out.data() + r * (ca + cb) + ca);
  }
  Tape* t = detail::result_tape("concat_cols", a, b);
  Tensor res = detail::emit("concat_cols", t, rows, ca + cb, std::move(out));
  if (t != nullptr) {
    const int ia = a.node, ib = b.node, io = res.node;
    t->set_backprop(io, [t, ia, ib, io, rows, ca, cb] {
      const auto& go = t->grad_buf(io);
      if (ia >= 0) {
        auto& ga = t->grad_buf(ia);
        for (std::size_t r = 0; r < rows; ++r)
          for (std::size_t c = 0; c < ca; ++c) ga[r * ca + c] += go[r * (ca + cb) + c];
      }
      if (ib >= 0) {
        auto& gb = t->grad_buf(ib);
        for (std::size_t r = 0; r < rows; ++r)
          for (std::size_t c = 0; c < cb; ++c) gb[r * cb + c] += go[r * (ca + cb) + ca + c];
      }
    });
  }
  return res;
}

inline Tensor slice_cols(const Tensor& a, std::size_t start, std::size_t len) {
  detail::require(start + len <= a.cols, "slice_cols: range [" + std::to_string(start) + ", " +
                                             std::to_string(start + len) + ") exceeds " +
                                             std::to_string(a.cols) + " columns");
  std::vector<double> out(a.rows * len);
  for (std::size_t r = 0; r < a.rows; ++r)
    std::copy_n(a.v.data() + r * a.cols + start, len, out.data() + r * len);
  Tape* t = a.tracked() ? a.tape : nullptr;
  Tensor res = detail::emit("slice_cols", t, a.rows, len, std::move(out));
  if (t != nullptr) {
    const int ia = a.node, io = res.node;
    const std::size_t rows = a.rows, cols = a.cols;
    t->set_backprop(io, [t, ia, io, rows, cols, start, len] {
      const auto& go = t->grad_buf(io);
      auto& ga = t->grad_buf(ia);
      for (std::size_t r = 0; r < rows; ++r)
        for (std::size_t c = 0; c < len; ++c) ga[r * cols + start + c] += go[r * len + c];
    });
  }
  return res;
}

inline Tensor transpose(const Tensor& a) {
  std::vector<double> out(a.v.size());
  for (std::size_t r = 0; r < a.rows; ++r)
    for (std::size_t c = 0; c < a.cols; ++c) out[c * a.rows + r] = a.v[r * a.cols + c];
  Tape* t = a.tracked() ? a.tape : nullptr;
  Tensor res = detail::emit("transpose", t, a.cols, a.rows, std::move(out));
  if (t != nullptr) {
    const int ia = a.node, io = res.node;
    const std::size_t rows = a.rows, cols = a.cols;
    t->set_backprop(io, [t, ia, io, rows, cols] {
      const auto& go = t->grad_buf(io);
      auto& ga = t->grad_buf(ia);
      for (std::size_t r = 0; r < rows; ++r)
        for (std::size_t c = 0; c < cols; ++c) ga[r * cols + c] += go[c * rows + r];
    });
  }
  return res;
}

// Stacks equal-width blocks on top of each other (token sequences, batched
// pose rows). Untracked entries act as constants.
inline Tensor concat_rows(const std::vector<Tensor>& xs) {
  detail::require(!xs.empty(), "concat_rows: no operands");
  const std::size_t cols = xs[0].cols;
  std::size_t rows = 0;
  Tape* t = nullptr;
  for (std::size_t i = 0; i < xs.size(); ++i) {
    detail::require(xs[i].cols == cols, "concat_rows: operand " + std::to_string(i) + " has " +
                                            std::to_string(xs[i].cols) + " columns, expected " +
                                            std::to_string(cols));
    rows += xs[i].rows;
    if (xs[i].tracked()) {
      detail::require(t == nullptr || t == xs[i].tape,
                      "concat_rows: operands live on different tapes");
      t = xs[i].tape;
    }
  }
  std::vector<double> out(rows * cols);
  std::size_t off = 0;
  for (const Tensor& x : xs) {
    std::copy_n(x.v.data(), x.v.size(), out.data() + off);
    off += x.v.size();
  }
  Tensor res = detail::emit("concat_rows", t, rows, cols, std::move(out));
  if (t != nullptr) {
    struct Piece {
      int id;
      std::size_t offset, count;
    };
    std::vector<Piece> pieces;
    off = 0;
    for (const Tensor& x : xs) {
      if (x.tracked()) pieces.push_back({x.node, off, x.v.size()});
      off += x.v.size();
    }
    const int io = res.node;
    t->set_backprop(io, [t, io, pieces = std::move(pieces)] {
      const auto& go = t->grad_buf(io);
      for (const auto& p : pieces) {
        auto& g = t->grad_buf(p.id);
        for (std::size_t i = 0; i < p.count; ++i) g[i] += go[p.offset + i];
      }
    });
  }
  return res;
}

// Row-major relabeling of the same elements; gradients flow through 1:1.
inline Tensor reshape(const Tensor& a, std::size_t rows, std::size_t cols) {
  detail::require(rows * cols == a.v.size(),
                  "reshape: " + detail::shape_str(a) + " cannot become " + std::to_string(rows) +
                      "x" + std::to_string(cols));
  std::vector<double> out = a.v;
  Tape* t = a.tracked() ? a.tape : nullptr;
  Tensor res = detail::emit("reshape", t, rows, cols, std::move(out));
  if (t != nullptr) {
    const int ia = a.node, io = res.node;
    t->set_backprop(io, [t, ia, io] {
      const auto& go = t->grad_buf(io);
      auto& ga = t->grad_buf(ia);
      for (std::size_t i = 0; i < go.size(); ++i) ga[i] += go[i];
    });
  }
  return res;
}

inline Tensor gather_rows(const Tensor& a, const std::vector<std::size_t>& idx) {
  for (std::size_t i : idx)
    detail::require(i < a.rows, "gather_rows: index " + std::to_string(i) + " out of " +
                                    std::to_string(a.rows) + " rows");
  std::vector<double> out(idx.size() * a.cols);
  for (std::size_t r = 0; r < idx.size(); ++r)
    std::copy_n(a.v.data() + idx[r] * a.cols, a.cols, out.data() + r * a.cols);
  Tape* t = a.tracked() ? a.tape : nullptr;
  Tensor res = detail::emit("gather_rows", t, idx.size(), a.cols, std::move(out));
  if (t != nullptr) {
    const int ia = a.node, io = res.node;
    const std::size_t cols = a.cols;
    t->set_backprop(io, [t, ia, io, cols, idx] {
      const auto& go = t->grad_buf(io);
      auto& ga = t->grad_buf(ia);
      for (std::size_t r = 0; r < idx.size(); ++r)
        for (std::size_t c = 0; c < cols; ++c) ga[idx[r] * cols + c] += go[r * cols + c];
    });
  }
  return res;
}

// Stacks one row from each of three equal-width sources into a 3 x D matrix.
// This is the gather feeding per-triplet Gram matrices, so it accepts three
// distinct tensors rather than forcing callers to concatenate first.
inline Tensor stack_rows3(const Tensor& a, std::size_t ra, const Tensor& b, std::size_t rb,
                          const Tensor& c, std::size_t rc) {
  detail::require(a.cols == b.cols && b.cols == c.cols,
                  "stack_rows3: column widths differ: " + detail::shape_str(a) + ", " +
                      detail::shape_str(b) + ", " + detail::shape_str(c));
  detail::require(ra < a.rows && rb < b.rows && rc < c.rows,
                  "stack_rows3: row index out of range");
  const std::size_t d = a.cols;
  std::vector<double> out(3 * d);
  std::copy_n(a.v.data() + ra * d, d, out.data());
  std::copy_n(b.v.data() + rb * d, d, out.data() + d);
  std::copy_n(c.v.data() + rc * d, d, out.data() + 2 * d);
  Tape* t = detail::result_tape("stack_rows3", a, b);
  if (Tape* tc = c.tracked() ? c.tape : nullptr; tc != nullptr) {
    detail::require(t == nullptr || t == tc, "stack_rows3: operands live on different tapes");
    t = tc;
  }
  Tensor res = detail::emit("stack_rows3", t, 3, d, std::move(out));
  if (t != nullptr) {
    const int ia = a.node, ib = b.node, ic = c.node, io = res.node;
    t->set_backprop(io, [t, ia, ib, ic, io, ra, rb, rc, d] {
      const auto& go = t->grad_buf(io);
      if (ia >= 0) {
        auto& ga = t->grad_buf(ia);
        for (std::size_t k = 0; k < d; ++k) ga[ra * d + k] += go[k];
      }
      if (ib >= 0) {
        auto& gb = t->grad_buf(ib);
        for (std::size_t k = 0; k < d; ++k) gb[rb * d + k] += go[d + k];
      }
      if (ic >= 0) {
        auto& gc = t->grad_buf(ic);
        for (std::size_t k = 0; k < d; ++k) gc[rc * d + k] += go[2 * d + k];
      }
    });
  }
  return res;
}

// Packs rows*cols scalar tensors (row-major order) into one matrix.
inline Tensor stack_scalars(std::size_t rows, std::size_t cols, const std::vector<Tensor>& xs) {
  detail::require(xs.size() == rows * cols,
                  "stack_scalars: expected " + std::to_string(rows * cols) + " scalars, got " +
                      std::to_string(xs.size()));
  std::vector<double> out(xs.size());
  Tape* t = nullptr;
  for (std::size_t i = 0; i < xs.size(); ++i) {
    detail::require(xs[i].rows == 1 && xs[i].cols == 1,
                    "stack_scalars: element " + std::to_string(i) + " is not 1x1");
    out[i] = xs[i].v[0];
    if (xs[i].tracked()) {
      detail::require(t == nullptr || t == xs[i].tape,
                      "stack_scalars: operands live on different tapes");
      t = xs[i].tape;
    }
  }
  Tensor res = detail::emit("stack_scalars", t, rows, cols, std::move(out));
  if (t != nullptr) {
    std::vector<int> ids(xs.size());
    for (std::size_t i = 0; i < xs.size(); ++i) ids[i] = xs[i].tracked() ? xs[i].node : -1;
    const int io = res.node;
    t->set_backprop(io, [t, io, ids = std::move(ids)] {
      const auto& go = t->grad_buf(io);
      for (std::size_t i = 0; i < ids.size(); ++i)
        if (ids[i] >= 0) t->grad_buf(ids[i])[0] += go[i];
    });
  }
  return res;
}

// ---------------------------------------------------------------------------
// Row normalization (tape twin of numkit::l2_normalize_rows)
// ---------------------------------------------------------------------------

inline Tensor l2norm_rows(const Tensor& a) {
  const std::size_t rows = a.rows, cols = a.cols;
  std::vector<double> out(rows * cols), inv_n(rows);
  for (std::size_t r = 0; r < rows; ++r) {
    double s = 0.0;
    const double* xr = a.v.data() + r * cols;
    for (std::size_t c = 0; c < cols; ++c) s += xr[c] * xr[c];
    const double n = std::sqrt(s);
    if (n <= 1e-12)
      throw std::invalid_argument("l2norm_rows: row " + std::to_string(r) +
                                  " has near-zero norm " + std::to_string(n));
    inv_n[r] = 1.0 / n;
    for (std::size_t c = 0; c < cols; ++c) out[r * cols + c] = xr[c] * inv_n[r];
  }
  Tape* t = a.tracked() ? a.tape : nullptr;
  Tensor res = detail::emit("l2norm_rows", t, rows, cols, std::move(out));
  if (t != nullptr) {
    const int ia = a.node, io = res.node;
    t->set_backprop(io, [t, ia, io, rows, cols, inv_n = std::move(inv_n)] {
      const auto& go = t->grad_buf(io);
      const auto& y = t->node_values(io);
      auto& ga = t->grad_buf(ia);
      for (std::size_t r = 0; r < rows; ++r) {
        double dot = 0.0;
        for (std::size_t c = 0; c < cols; ++c) dot += go[r * cols + c] * y[r * cols + c];
        for (std::size_t c = 0; c < cols; ++c)
          ga[r * cols + c] += inv_n[r] * (go[r * cols + c] - dot * y[r * cols + c]);
      }
    });
  }
  return res;
}

// ---------------------------------------------------------------------------
// Losses
// ---------------------------------------------------------------------------

inline Tensor mse(const Tensor& a, const Tensor& b) {
  detail::require(a.rows == b.rows && a.cols == b.cols,
                  "mse: shapes differ, " + detail::shape_str(a) + " vs " + detail::shape_str(b));
  detail::require(!a.v.empty(), "mse: empty tensors");
  double s = 0.0;
  for (std::size_t i = 0; i < a.v.size(); ++i) {
    const double d = a.v[i] - b.v[i];
    s += d * d;
  }
  const double inv_n = 1.0 / static_cast<double>(a.v.size());
  Tape* t = detail::result_tape("mse", a, b);
  Tensor res = detail::emit("mse", t, 1, 1, {s * inv_n});
  if (t != nullptr) {
    const detail::Src sa = detail::src_of(a), sb = detail::src_of(b);
    const int ia = a.node, ib = b.node, io = res.node;
    t->set_backprop(io, [t, sa, sb, ia, ib, io, inv_n] {
      const double g = t->grad_buf(io)[0] * 2.0 * inv_n;
      const auto& av = detail::values_of(*t, sa);
      const auto& bv = detail::values_of(*t, sb);
      if (ia >= 0) {
        auto& ga = t->grad_buf(ia);
        for (std::size_t i = 0; i < av.size(); ++i) ga[i] += g * (av[i] - bv[i]);
      }
      if (ib >= 0) {
        auto& gb = t->grad_buf(ib);
        for (std::size_t i = 0; i < av.size(); ++i) gb[i] -= g * (av[i] - bv[i]);
      }
    });
  }
  return res;
}

// Mean cross entropy of row-wise softmax(logits) against integer labels,
// computed through log-sum-exp for stability.
inline Tensor cross_entropy_mean(const Tensor& logits, const std::vector<std::size_t>& labels) {
  detail::require(labels.size() == logits.rows,
                  "cross_entropy_mean: " + std::to_string(labels.size()) + " labels for " +
                      std::to_string(logits.rows) + " rows");
  const std::size_t rows = logits.rows, cols = logits.cols;
  for (std::size_t r = 0; r < rows; ++r)
    detail::require(labels[r] < cols, "cross_entropy_mean: label " + std::to_string(labels[r]) +
                                          " out of " + std::to_string(cols) + " classes");
  std::vector<double> probs(rows * cols);
  double loss = 0.0;
  for (std::size_t r = 0; r < rows; ++r) {
    const double* xr = logits.v.data() + r * cols;
    double mx = xr[0];
    for (std::size_t c = 1; c < cols; ++c) mx = std::max(mx, xr[c]);
    double z = 0.0;
    for (std::size_t c = 0; c < cols; ++c) z += std::exp(xr[c] - mx);
    const double lse = mx + std::log(z);
    loss += lse - xr[labels[r]];
    const double inv = 1.0 / z;
    for (std::size_t c = 0; c < cols; ++c) probs[r * cols + c] = std::exp(xr[c] - mx) * inv;
  }
  const double inv_rows = 1.0 / static_cast<double>(rows);
  Tape* t = logits.tracked() ? logits.tape : nullptr;
  Tensor res = detail::emit("cross_entropy_mean", t, 1, 1, {loss * inv_rows});
  if (t != nullptr) {
    const int ia = logits.node, io = res.node;
    t->set_backprop(io, [t, ia, io, rows, cols, inv_rows, labels, probs = std::move(probs)] {
      const double g = t->grad_buf(io)[0] * inv_rows;
      auto& ga = t->grad_buf(ia);
      for (std::size_t r = 0; r < rows; ++r) {
        for (std::size_t c = 0; c < cols; ++c) ga[r * cols + c] += g * probs[r * cols + c];
        ga[r * cols + labels[r]] -= g;
      }
    });
  }
  return res;
}

// ---------------------------------------------------------------------------
// Differentiable top eigenvalue of a symmetric 3x3 tensor.
//
// Forward solves the fixed-size eigenproblem; backward uses the classical
// perturbation identity d lambda1 = u1^T dA u1, i.e. the gradient is the
// rank-one matrix u1 u1^T. When the leading eigengap collapses, u1 is not
// unique and that identity degrades; the tape counts such events so callers
// can monitor them instead of silently training through them.
// ---------------------------------------------------------------------------

inline Tensor top_eig3(const Tensor& g) {
  detail::require(g.rows == 3 && g.cols == 3,
                  "top_eig3: expected 3x3, got " + detail::shape_str(g));
  numkit::Mat3 a;
  for (std::size_t i = 0; i < 9; ++i) a.m[i] = g.v[i];
  const numkit::EigenResult3 e = numkit::sym_eig3(a);  // rejects asymmetric input
  const numkit::Vec3 u1 = e.eigenvectors.col(0);
  const bool degen =
      e.eigenvalues[0] - e.eigenvalues[1] < 1e-8 * std::max(1.0, std::abs(e.eigenvalues[0]));
  Tape* t = g.tracked() ? g.tape : nullptr;
  Tensor res = detail::emit("top_eig3", t, 1, 1, {e.eigenvalues[0]});
  if (t != nullptr) {
    if (degen) t->note_eig_degeneracy();
    const int ia = g.node, io = res.node;
    t->set_backprop(io, [t, ia, io, u1] {
      const double gl = t->grad_buf(io)[0];
      auto& ga = t->grad_buf(ia);
      for (std::size_t r = 0; r < 3; ++r)
        for (std::size_t c = 0; c < 3; ++c) ga[r * 3 + c] += gl * u1[r] * u1[c];
    });
  }
  return res;
}

// ---------------------------------------------------------------------------
// Gradient checking: analytic tape gradient vs central finite differences.
// f must build a scalar loss from `x` on the tape it is given, using only
// deterministic operations of x.
// ---------------------------------------------------------------------------

struct GradCheckResult {
  double max_rel_err = 0.0;
  bool degenerate = false;  // a top_eig3 evaluation hit a collapsed eigengap
};

inline GradCheckResult grad_check(const std::function<Tensor(Tape&, const Tensor&)>& f,
                                  const Tensor& x, double step) {
  GradCheckResult out;

  Tape tape(true);
  Tensor tx = tape.input(x);
  Tensor loss = f(tape, tx);
  if (loss.rows != 1 || loss.cols != 1)
    throw std::invalid_argument("grad_check: f must return a scalar");
  tape.backward(loss);
  const std::vector<double> analytic = tape.grad(tx);
  out.degenerate = tape.eig_degeneracies() > 0;

  Tensor probe = x;
  for (std::size_t i = 0; i < probe.v.size(); ++i) {
    const double saved = probe.v[i];
    double fp, fm;
    {
      probe.v[i] = saved + step;
      Tape tp(true);
      fp = f(tp, tp.input(probe)).scalar();
      if (tp.eig_degeneracies() > 0) out.degenerate = true;
    }
    {
      probe.v[i] = saved - step;
      Tape tm(true);
      fm = f(tm, tm.input(probe)).scalar();
      if (tm.eig_degeneracies() > 0) out.degenerate = true;
    }
    probe.v[i] = saved;
    const double numeric = (fp - fm) / (2.0 * step);
    const double rel = std::abs(analytic[i] - numeric) /
                       (std::abs(analytic[i]) + std::abs(numeric) + 1e-12);
    out.max_rel_err = std::max(out.max_rel_err, rel);
  }
  return out;
}

}  // namespace unihpe::ag
