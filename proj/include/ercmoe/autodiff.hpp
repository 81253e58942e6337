#pragma once

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <cstdint>
#include <deque>
#include <functional>
#include <limits>
#include <span>
#include <string>
#include <utility>
#include <vector>

#include "ercmoe/errors.hpp"
#include "ercmoe/tensor.hpp"

namespace ercmoe {

class Tape;

/// Handle to a node recorded on a Tape.
class Var {
 public:
  Var() = default;
  Var(Tape* tape, std::size_t id) : tape_(tape), id_(id) {}

  Tape& tape() const { return *tape_; }
  std::size_t id() const noexcept { return id_; }
  bool valid() const noexcept { return tape_ != nullptr; }

  const Tensor& value() const;
  const Shape& shape() const { return value().shape(); }
  double item() const { return value()[0]; }

 private:
  Tape* tape_ = nullptr;
  std::size_t id_ = 0;
};

/// Define-by-run record of operations. Nodes are appended in execution order,
/// so parents always precede children and a single reverse sweep suffices.
class Tape {
 public:
  using BackwardFn = std::function<void(Tape&, std::size_t)>;

  Tape() = default;
  Tape(const Tape&) = delete;
  Tape& operator=(const Tape&) = delete;

  Var constant(Tensor value) { return push(std::move(value), {}, nullptr, false, nullptr); }

  /// Leaf bound to a parameter; backward() accumulates into `param.grad`.
  Var param(Tensor& param) {
    Tensor copy(param.shape(), param.values());
    return push(std::move(copy), {}, nullptr, true, &param);
  }

  /// Leaf that collects a gradient on the tape only.
  Var leaf(Tensor value) { return push(std::move(value), {}, nullptr, true, nullptr); }

  Var record(Tensor value, std::vector<std::size_t> parents, BackwardFn backward) {
    bool needs = false;
    for (std::size_t p : parents) needs = needs || nodes_[p].requires_grad;
    return push(std::move(value), std::move(parents), needs ? std::move(backward) : nullptr, needs, nullptr);
  }

  const Tensor& value(std::size_t id) const { return nodes_[id].value; }
  const Tensor& value(Var v) const { return nodes_[v.id()].value; }
  bool requires_grad(std::size_t id) const { return nodes_[id].requires_grad; }

  /// Upstream gradient of a node during backward (empty when none reached it).
  std::span<const double> grad(std::size_t id) const { return nodes_[id].grad; }

  /// Gradient buffer of a parent, allocated on first use.
  std::span<double> grad_accumulator(std::size_t id) {
    Node& n = nodes_[id];
    if (n.grad.empty()) n.grad.assign(n.value.size(), 0.0);
    return n.grad;
  }

  /// Gradient of `v` after backward(); zeros if the node was not reached.
  Tensor gradient(Var v) const {
    const Node& n = nodes_[v.id()];
    if (n.grad.empty()) return Tensor(n.value.shape());
    return Tensor(n.value.shape(), n.grad);
  }

  void backward(Var loss) {
    if (loss.value().size() != 1) {
      throw DimensionError("backward requires a scalar, got " + shape_string(loss.shape()));
    }
    for (Node& n : nodes_) n.grad.clear();
    nodes_[loss.id()].grad.assign(1, 1.0);
    for (std::size_t i = loss.id() + 1; i-- > 0;) {
      Node& n = nodes_[i];
      if (n.grad.empty() || !n.requires_grad) continue;
      if (n.backward) n.backward(*this, i);
      if (n.bound) {
        Tensor& p = *n.bound;
        if (!p.has_grad()) p.zero_grad();
        for (std::size_t k = 0; k < n.grad.size(); ++k) p.grad[k] += n.grad[k];
      }
    }
  }

  std::size_t size() const noexcept { return nodes_.size(); }

  /// Multiply-accumulate pairs executed by matmul on this tape.
  std::uint64_t multiply_adds() const noexcept { return multiply_adds_; }
  void count_multiply_adds(std::uint64_t n) noexcept { multiply_adds_ += n; }

  /// Test hook: perturbs the SiLU backward so gradient checks must fail.
  void set_backward_fault(bool on) noexcept { backward_fault_ = on; }
  bool backward_fault() const noexcept { return backward_fault_; }

 private:
  struct Node {
    Tensor value;
    std::vector<double> grad;
    std::vector<std::size_t> parents;
    BackwardFn backward;
    bool requires_grad = false;
    Tensor* bound = nullptr;
  };

  Var push(Tensor value, std::vector<std::size_t> parents, BackwardFn fn, bool requires_grad, Tensor* bound) {
    if (!value.all_finite()) {
      throw NumericError("non-finite value produced at tape node " + std::to_string(nodes_.size()));
    }
    nodes_.push_back(Node{std::move(value), {}, std::move(parents), std::move(fn), requires_grad, bound});
    return Var(this, nodes_.size() - 1);
  }

  std::deque<Node> nodes_;  // stable addresses: value() references survive later records
  std::uint64_t multiply_adds_ = 0;
  bool backward_fault_ = false;
};

inline const Tensor& Var::value() const { return tape_->value(id_); }

namespace detail {

inline void require_same_shape(const char* op, Var a, Var b) {
  if (a.shape() != b.shape()) {
    throw DimensionError(std::string(op) + ": shape mismatch " + shape_string(a.shape()) + " vs " +
                         shape_string(b.shape()));
  }
}

inline void require_matrix(const char* op, Var a) {
  if (a.value().rank() != 2) {
    throw DimensionError(std::string(op) + ": expected a matrix, got " + shape_string(a.shape()));
  }
}

inline void require_vector(const char* op, Var a, std::size_t n) {
  if (a.value().rank() != 1 || a.value().size() != n) {
    throw DimensionError(std::string(op) + ": expected vector of length " + std::to_string(n) + ", got " +
                         shape_string(a.shape()));
  }
}

inline double sigmoid(double x) {
  if (x >= 0) return 1.0 / (1.0 + std::exp(-x));
  const double e = std::exp(x);
  return e / (1.0 + e);
}

// c[m x p] += a[m x k] * b[k x p]
inline void gemm_nn(std::span<const double> a, std::span<const double> b, std::span<double> c, std::size_t m,
                    std::size_t k, std::size_t p) {
  for (std::size_t i = 0; i < m; ++i) {
    double* ci = c.data() + i * p;
    for (std::size_t t = 0; t < k; ++t) {
      const double av = a[i * k + t];
      const double* bt = b.data() + t * p;
      for (std::size_t j = 0; j < p; ++j) ci[j] += av * bt[j];
    }
  }
}

}  // namespace detail

// ---------------------------------------------------------------------------
// Linear algebra

inline Var matmul(Var a, Var b) {
  detail::require_matrix("matmul", a);
  detail::require_matrix("matmul", b);
  const std::size_t m = a.value().rows(), k = a.value().cols(), p = b.value().cols();
  if (b.value().rows() != k) {
    throw DimensionError("matmul: inner extents differ, " + shape_string(a.shape()) + " x " +
                         shape_string(b.shape()));
  }
  Tape& t = a.tape();
  Tensor out({m, p});
  detail::gemm_nn(a.value().data(), b.value().data(), out.data(), m, k, p);
  t.count_multiply_adds(static_cast<std::uint64_t>(m) * k * p);
  const std::size_t ia = a.id(), ib = b.id();
  return t.record(std::move(out), {ia, ib}, [ia, ib, m, k, p](Tape& tp, std::size_t self) {
    auto g = tp.grad(self);
    const auto av = tp.value(ia).data();
    const auto bv = tp.value(ib).data();
    if (tp.requires_grad(ia)) {
      // dA = G * B^T
      auto ga = tp.grad_accumulator(ia);
      for (std::size_t i = 0; i < m; ++i)
        for (std::size_t s = 0; s < k; ++s) {
          double acc = 0.0;
          for (std::size_t j = 0; j < p; ++j) acc += g[i * p + j] * bv[s * p + j];
          ga[i * k + s] += acc;
        }
    }
    if (tp.requires_grad(ib)) {
      // dB = A^T * G
      auto gb = tp.grad_accumulator(ib);
      for (std::size_t i = 0; i < m; ++i)
        for (std::size_t s = 0; s < k; ++s) {
          const double aval = av[i * k + s];
          for (std::size_t j = 0; j < p; ++j) gb[s * p + j] += aval * g[i * p + j];
        }
    }
  });
}

inline Var transpose(Var a) {
  detail::require_matrix("transpose", a);
  const std::size_t m = a.value().rows(), n = a.value().cols();
  Tensor out({n, m});
  for (std::size_t i = 0; i < m; ++i)
    for (std::size_t j = 0; j < n; ++j) out(j, i) = a.value()(i, j);
  const std::size_t ia = a.id();
  return a.tape().record(std::move(out), {ia}, [ia, m, n](Tape& tp, std::size_t self) {
    auto g = tp.grad(self);
    auto ga = tp.grad_accumulator(ia);
    for (std::size_t i = 0; i < m; ++i)
      for (std::size_t j = 0; j < n; ++j) ga[i * n + j] += g[j * m + i];
  });
}

// ---------------------------------------------------------------------------
// Elementwise

inline Var add(Var a, Var b) {
  detail::require_same_shape("add", a, b);
  Tensor out = a.value();
  for (std::size_t i = 0; i < out.size(); ++i) out[i] += b.value()[i];
  const std::size_t ia = a.id(), ib = b.id();
  return a.tape().record(std::move(out), {ia, ib}, [ia, ib](Tape& tp, std::size_t self) {
    auto g = tp.grad(self);
    for (std::size_t id : {ia, ib}) {
      if (!tp.requires_grad(id)) continue;
      auto gp = tp.grad_accumulator(id);
      for (std::size_t i = 0; i < g.size(); ++i) gp[i] += g[i];
    }
  });
}

inline Var sub(Var a, Var b) {
  detail::require_same_shape("sub", a, b);
  Tensor out = a.value();
  for (std::size_t i = 0; i < out.size(); ++i) out[i] -= b.value()[i];
  const std::size_t ia = a.id(), ib = b.id();
  return a.tape().record(std::move(out), {ia, ib}, [ia, ib](Tape& tp, std::size_t self) {
    auto g = tp.grad(self);
    if (tp.requires_grad(ia)) {
      auto ga = tp.grad_accumulator(ia);
      for (std::size_t i = 0; i < g.size(); ++i) ga[i] += g[i];
    }
    if (tp.requires_grad(ib)) {
      auto gb = tp.grad_accumulator(ib);
      for (std::size_t i = 0; i < g.size(); ++i) gb[i] -= g[i];
    }
  });
}

inline Var hadamard(Var a, Var b) {
  detail::require_same_shape("hadamard", a, b);
  Tensor out = a.value();
  for (std::size_t i = 0; i < out.size(); ++i) out[i] *= b.value()[i];
  const std::size_t ia = a.id(), ib = b.id();
  return a.tape().record(std::move(out), {ia, ib}, [ia, ib](Tape& tp, std::size_t self) {
    auto g = tp.grad(self);
    const auto av = tp.value(ia).data();
    const auto bv = tp.value(ib).data();
    if (tp.requires_grad(ia)) {
      auto ga = tp.grad_accumulator(ia);
      for (std::size_t i = 0; i < g.size(); ++i) ga[i] += g[i] * bv[i];
    }
    if (tp.requires_grad(ib)) {
      auto gb = tp.grad_accumulator(ib);
      for (std::size_t i = 0; i < g.size(); ++i) gb[i] += g[i] * av[i];
    }
  });
}

inline Var scale(Var a, double c) {
  Tensor out = a.value();
  for (double& v : out.values()) v *= c;
  const std::size_t ia = a.id();
  return a.tape().record(std::move(out), {ia}, [ia, c](Tape& tp, std::size_t self) {
    auto g = tp.grad(self);
    auto ga = tp.grad_accumulator(ia);
    for (std::size_t i = 0; i < g.size(); ++i) ga[i] += c * g[i];
  });
}

inline Var operator+(Var a, Var b) { return add(a, b); }
inline Var operator-(Var a, Var b) { return sub(a, b); }
inline Var operator*(double c, Var a) { return scale(a, c); }

/// x * sigmoid(x).
inline Var silu(Var a) {
  Tensor out = a.value();
  for (double& v : out.values()) v = v * detail::sigmoid(v);
  const std::size_t ia = a.id();
  return a.tape().record(std::move(out), {ia}, [ia](Tape& tp, std::size_t self) {
    auto g = tp.grad(self);
    const auto x = tp.value(ia).data();
    auto ga = tp.grad_accumulator(ia);
    const double fault = tp.backward_fault() ? 1.01 : 1.0;
    for (std::size_t i = 0; i < g.size(); ++i) {
      const double s = detail::sigmoid(x[i]);
      ga[i] += fault * g[i] * s * (1.0 + x[i] * (1.0 - s));
    }
  });
}

/// max(x, 0); the derivative at exactly 0 is 0.
inline Var relu_clip(Var a) {
  Tensor out = a.value();
  for (double& v : out.values()) v = v > 0.0 ? v : 0.0;
  const std::size_t ia = a.id();
  return a.tape().record(std::move(out), {ia}, [ia](Tape& tp, std::size_t self) {
    auto g = tp.grad(self);
    const auto x = tp.value(ia).data();
    auto ga = tp.grad_accumulator(ia);
    for (std::size_t i = 0; i < g.size(); ++i)
      if (x[i] > 0.0) ga[i] += g[i];
  });
}

inline Var reciprocal(Var a) {
  Tensor out = a.value();
  for (double& v : out.values()) v = 1.0 / v;
  const std::size_t ia = a.id();
  return a.tape().record(std::move(out), {ia}, [ia](Tape& tp, std::size_t self) {
    auto g = tp.grad(self);
    const auto y = tp.value(self).data();
    auto ga = tp.grad_accumulator(ia);
    for (std::size_t i = 0; i < g.size(); ++i) ga[i] -= g[i] * y[i] * y[i];
  });
}

// ---------------------------------------------------------------------------
// Row-wise

/// Numerically stable softmax over each row.
inline Var softmax_rows(Var a) {
  detail::require_matrix("softmax_rows", a);
  const std::size_t m = a.value().rows(), n = a.value().cols();
  Tensor out = a.value();
  for (std::size_t i = 0; i < m; ++i) {
    auto r = out.row(i);
    const double mx = *std::max_element(r.begin(), r.end());
    double total = 0.0;
    for (double& v : r) {
      v = std::exp(v - mx);
      total += v;
    }
    for (double& v : r) v /= total;
  }
  const std::size_t ia = a.id();
  return a.tape().record(std::move(out), {ia}, [ia, m, n](Tape& tp, std::size_t self) {
    auto g = tp.grad(self);
    const auto y = tp.value(self).data();
    auto ga = tp.grad_accumulator(ia);
    for (std::size_t i = 0; i < m; ++i) {
      double dot = 0.0;
      for (std::size_t j = 0; j < n; ++j) dot += g[i * n + j] * y[i * n + j];
      for (std::size_t j = 0; j < n; ++j) ga[i * n + j] += y[i * n + j] * (g[i * n + j] - dot);
    }
  });
}

/// Euclidean norm of every row, [m x n] -> [m]. The zero row has subgradient 0.
inline Var l2_norm_rows(Var a) {
  detail::require_matrix("l2_norm_rows", a);
  const std::size_t m = a.value().rows(), n = a.value().cols();
  Tensor out({m});
  for (std::size_t i = 0; i < m; ++i) out[i] = l2_norm(a.value().row(i));
  const std::size_t ia = a.id();
  return a.tape().record(std::move(out), {ia}, [ia, m, n](Tape& tp, std::size_t self) {
    auto g = tp.grad(self);
    const auto norms = tp.value(self).data();
    const auto x = tp.value(ia).data();
    auto ga = tp.grad_accumulator(ia);
    for (std::size_t i = 0; i < m; ++i) {
      if (norms[i] == 0.0) continue;
      const double c = g[i] / norms[i];
      for (std::size_t j = 0; j < n; ++j) ga[i * n + j] += c * x[i * n + j];
    }
  });
}

/// out[i, :] = a[i, :] * v[i]
inline Var scale_rows(Var a, Var v) {
  detail::require_matrix("scale_rows", a);
  const std::size_t m = a.value().rows(), n = a.value().cols();
  detail::require_vector("scale_rows", v, m);
  Tensor out = a.value();
  for (std::size_t i = 0; i < m; ++i)
    for (double& x : out.row(i)) x *= v.value()[i];
  const std::size_t ia = a.id(), iv = v.id();
  return a.tape().record(std::move(out), {ia, iv}, [ia, iv, m, n](Tape& tp, std::size_t self) {
    auto g = tp.grad(self);
    const auto x = tp.value(ia).data();
    const auto s = tp.value(iv).data();
    if (tp.requires_grad(ia)) {
      auto ga = tp.grad_accumulator(ia);
      for (std::size_t i = 0; i < m; ++i)
        for (std::size_t j = 0; j < n; ++j) ga[i * n + j] += g[i * n + j] * s[i];
    }
    if (tp.requires_grad(iv)) {
      auto gv = tp.grad_accumulator(iv);
      for (std::size_t i = 0; i < m; ++i) {
        double acc = 0.0;
        for (std::size_t j = 0; j < n; ++j) acc += g[i * n + j] * x[i * n + j];
        gv[i] += acc;
      }
    }
  });
}

/// out[i, j] = a[i, j] - v[i]   (v broadcast as a column)
inline Var sub_column_vector(Var a, Var v) {
  detail::require_matrix("sub_column_vector", a);
  const std::size_t m = a.value().rows(), n = a.value().cols();
  detail::require_vector("sub_column_vector", v, m);
  Tensor out = a.value();
  for (std::size_t i = 0; i < m; ++i)
    for (double& x : out.row(i)) x -= v.value()[i];
  const std::size_t ia = a.id(), iv = v.id();
  return a.tape().record(std::move(out), {ia, iv}, [ia, iv, m, n](Tape& tp, std::size_t self) {
    auto g = tp.grad(self);
    if (tp.requires_grad(ia)) {
      auto ga = tp.grad_accumulator(ia);
      for (std::size_t k = 0; k < g.size(); ++k) ga[k] += g[k];
    }
    if (tp.requires_grad(iv)) {
      auto gv = tp.grad_accumulator(iv);
      for (std::size_t i = 0; i < m; ++i)
        for (std::size_t j = 0; j < n; ++j) gv[i] -= g[i * n + j];
    }
  });
}

/// out[i, j] = a[i, j] - v[j]   (v broadcast as a row)
inline Var sub_row_vector(Var a, Var v) {
  detail::require_matrix("sub_row_vector", a);
  const std::size_t m = a.value().rows(), n = a.value().cols();
  detail::require_vector("sub_row_vector", v, n);
  Tensor out = a.value();
  for (std::size_t i = 0; i < m; ++i)
    for (std::size_t j = 0; j < n; ++j) out(i, j) -= v.value()[j];
  const std::size_t ia = a.id(), iv = v.id();
  return a.tape().record(std::move(out), {ia, iv}, [ia, iv, m, n](Tape& tp, std::size_t self) {
    auto g = tp.grad(self);
    if (tp.requires_grad(ia)) {
      auto ga = tp.grad_accumulator(ia);
      for (std::size_t k = 0; k < g.size(); ++k) ga[k] += g[k];
    }
    if (tp.requires_grad(iv)) {
      auto gv = tp.grad_accumulator(iv);
      for (std::size_t i = 0; i < m; ++i)
        for (std::size_t j = 0; j < n; ++j) gv[j] -= g[i * n + j];
    }
  });
}

// ---------------------------------------------------------------------------
// Reductions and reshaping

inline Var sum(Var a) {
  double s = 0.0;
  for (double v : a.value().data()) s += v;
  const std::size_t ia = a.id();
  return a.tape().record(Tensor::scalar(s), {ia}, [ia](Tape& tp, std::size_t self) {
    const double g = tp.grad(self)[0];
    for (double& x : tp.grad_accumulator(ia)) x += g;
  });
}

inline Var mean(Var a) { return scale(sum(a), 1.0 / static_cast<double>(a.value().size())); }

/// Column means, [m x n] -> [n].
inline Var mean_rows(Var a) {
  detail::require_matrix("mean_rows", a);
  const std::size_t m = a.value().rows(), n = a.value().cols();
  Tensor out({n});
  for (std::size_t i = 0; i < m; ++i)
    for (std::size_t j = 0; j < n; ++j) out[j] += a.value()(i, j);
  for (double& v : out.values()) v /= static_cast<double>(m);
  const std::size_t ia = a.id();
  return a.tape().record(std::move(out), {ia}, [ia, m, n](Tape& tp, std::size_t self) {
    auto g = tp.grad(self);
    auto ga = tp.grad_accumulator(ia);
    const double inv = 1.0 / static_cast<double>(m);
    for (std::size_t i = 0; i < m; ++i)
      for (std::size_t j = 0; j < n; ++j) ga[i * n + j] += g[j] * inv;
  });
}

inline Var diag(Var a) {
  detail::require_matrix("diag", a);
  const std::size_t n = a.value().rows();
  if (a.value().cols() != n) throw DimensionError("diag: matrix is not square " + shape_string(a.shape()));
  Tensor out({n});
  for (std::size_t i = 0; i < n; ++i) out[i] = a.value()(i, i);
  const std::size_t ia = a.id();
  return a.tape().record(std::move(out), {ia}, [ia, n](Tape& tp, std::size_t self) {
    auto g = tp.grad(self);
    auto ga = tp.grad_accumulator(ia);
    for (std::size_t i = 0; i < n; ++i) ga[i * n + i] += g[i];
  });
}

/// Assemble [m] vectors as the columns of an [m x k] matrix.
inline Var stack_columns(const std::vector<Var>& columns) {
  if (columns.empty()) throw DimensionError("stack_columns: no columns");
  const std::size_t m = columns.front().value().size();
  const std::size_t k = columns.size();
  Tensor out({m, k});
  std::vector<std::size_t> ids;
  ids.reserve(k);
  for (std::size_t j = 0; j < k; ++j) {
    detail::require_vector("stack_columns", columns[j], m);
    for (std::size_t i = 0; i < m; ++i) out(i, j) = columns[j].value()[i];
    ids.push_back(columns[j].id());
  }
  return columns.front().tape().record(std::move(out), ids, [ids, m, k](Tape& tp, std::size_t self) {
    auto g = tp.grad(self);
    for (std::size_t j = 0; j < k; ++j) {
      if (!tp.requires_grad(ids[j])) continue;
      auto gc = tp.grad_accumulator(ids[j]);
      for (std::size_t i = 0; i < m; ++i) gc[i] += g[i * k + j];
    }
  });
}

inline Var gather_rows(Var a, std::vector<std::size_t> rows) {
  detail::require_matrix("gather_rows", a);
  const std::size_t n = a.value().cols();
  if (rows.empty()) throw DimensionError("gather_rows: empty selection");
  Tensor out({rows.size(), n});
  for (std::size_t r = 0; r < rows.size(); ++r) {
    if (rows[r] >= a.value().rows()) throw DimensionError("gather_rows: row index out of range");
    std::copy_n(a.value().row(rows[r]).begin(), n, out.row(r).begin());
  }
  const std::size_t ia = a.id();
  return a.tape().record(std::move(out), {ia}, [ia, n, rows = std::move(rows)](Tape& tp, std::size_t self) {
    auto g = tp.grad(self);
    auto ga = tp.grad_accumulator(ia);
    for (std::size_t r = 0; r < rows.size(); ++r)
      for (std::size_t j = 0; j < n; ++j) ga[rows[r] * n + j] += g[r * n + j];
  });
}

/// out = base; out[rows[r], :] += src[r, :]
inline Var index_add_rows(Var base, const std::vector<std::size_t>& rows, Var src) {
  detail::require_matrix("index_add_rows", base);
  detail::require_matrix("index_add_rows", src);
  const std::size_t n = base.value().cols();
  if (src.value().cols() != n || src.value().rows() != rows.size()) {
    throw DimensionError("index_add_rows: source " + shape_string(src.shape()) + " does not match " +
                         std::to_string(rows.size()) + " rows of width " + std::to_string(n));
  }
  Tensor out = base.value();
  for (std::size_t r = 0; r < rows.size(); ++r)
    for (std::size_t j = 0; j < n; ++j) out(rows[r], j) += src.value()(r, j);
  const std::size_t ib = base.id(), is = src.id();
  return base.tape().record(std::move(out), {ib, is}, [ib, is, n, rows](Tape& tp, std::size_t self) {
    auto g = tp.grad(self);
    if (tp.requires_grad(ib)) {
      auto gb = tp.grad_accumulator(ib);
      for (std::size_t k = 0; k < g.size(); ++k) gb[k] += g[k];
    }
    if (tp.requires_grad(is)) {
      auto gs = tp.grad_accumulator(is);
      for (std::size_t r = 0; r < rows.size(); ++r)
        for (std::size_t j = 0; j < n; ++j) gs[r * n + j] += g[rows[r] * n + j];
    }
  });
}

/// out[r] = a[rows[r], cols[r]]
inline Var gather_elements(Var a, std::vector<std::size_t> rows, std::vector<std::size_t> cols) {
  detail::require_matrix("gather_elements", a);
  if (rows.size() != cols.size() || rows.empty()) throw DimensionError("gather_elements: bad index lists");
  const std::size_t n = a.value().cols();
  Tensor out({rows.size()});
  for (std::size_t r = 0; r < rows.size(); ++r) out[r] = a.value()(rows[r], cols[r]);
  const std::size_t ia = a.id();
  return a.tape().record(std::move(out), {ia},
                         [ia, n, rows = std::move(rows), cols = std::move(cols)](Tape& tp, std::size_t self) {
                           auto g = tp.grad(self);
                           auto ga = tp.grad_accumulator(ia);
                           for (std::size_t r = 0; r < rows.size(); ++r) ga[rows[r] * n + cols[r]] += g[r];
                         });
}

// ---------------------------------------------------------------------------
// Non-differentiable selection

struct TopK {
  std::vector<std::size_t> indices;
  std::vector<double> values;
};

/// The k largest entries in descending order; ties go to the lowest index.
inline TopK topk(std::span<const double> values, std::size_t k) {
  if (k < 1 || k > values.size()) {
    throw std::out_of_range("topk: k=" + std::to_string(k) + " outside [1, " + std::to_string(values.size()) +
                            "]");
  }
  std::vector<std::size_t> order(values.size());
  std::iota(order.begin(), order.end(), std::size_t{0});
  std::partial_sort(order.begin(), order.begin() + static_cast<std::ptrdiff_t>(k), order.end(),
                    [&](std::size_t a, std::size_t b) {
                      return values[a] > values[b] || (values[a] == values[b] && a < b);
                    });
  TopK out;
  out.indices.assign(order.begin(), order.begin() + static_cast<std::ptrdiff_t>(k));
  for (std::size_t i : out.indices) out.values.push_back(values[i]);
  return out;
}

}  // namespace ercmoe
