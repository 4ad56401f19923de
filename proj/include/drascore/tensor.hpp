#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <functional>
#include <memory>
#include <numeric>
#include <sstream>
#include <string>
#include <unordered_set>
#include <vector>

#include "drascore/common.hpp"
#include "drascore/parallel.hpp"

namespace drascore {

using Shape = std::vector<std::int64_t>;

inline std::int64_t shape_numel(const Shape& s) {
  std::int64_t n = 1;
  for (auto e : s) n *= e;
  return n;
}

inline std::string shape_str(const Shape& s) {
  std::ostringstream oss;
  oss << "[";
  for (std::size_t i = 0; i < s.size(); ++i) oss << (i ? "," : "") << s[i];
  oss << "]";
  return oss.str();
}

// Dense row-major tensor. Data is immutable after the producing op except
// for the grad buffer; ops allocate fresh outputs.
template <typename T>
struct Tensor {
  Shape shape;
  std::vector<T> data;
  std::vector<T> grad;  // empty until first use
  bool requires_grad{false};
  std::string name;

  Tensor() = default;
  Tensor(Shape s, bool rg) : shape(std::move(s)), requires_grad(rg) {
    data.assign(static_cast<std::size_t>(shape_numel(shape)), T(0));
  }

  std::int64_t numel() const { return static_cast<std::int64_t>(data.size()); }
  std::int64_t dim(int i) const { return shape[static_cast<std::size_t>(i)]; }
  int rank() const { return static_cast<int>(shape.size()); }

  void ensure_grad() {
    if (grad.size() != data.size()) grad.assign(data.size(), T(0));
  }
  void zero_grad() { std::fill(grad.begin(), grad.end(), T(0)); }

  bool all_finite() const {
    for (const T& v : data)
      if (!std::isfinite(static_cast<double>(v))) return false;
    return true;
  }
};

template <typename T>
using TensorPtr = std::shared_ptr<Tensor<T>>;

template <typename T>
TensorPtr<T> make_tensor(Shape shape, bool requires_grad = false) {
  return std::make_shared<Tensor<T>>(std::move(shape), requires_grad);
}

template <typename T>
TensorPtr<T> tensor_from(Shape shape, std::vector<T> values, bool requires_grad = false) {
  auto t = make_tensor<T>(std::move(shape), requires_grad);
  require(static_cast<std::int64_t>(values.size()) == t->numel(),
          "tensor init: ", values.size(), " values for shape ", shape_str(t->shape));
  t->data = std::move(values);
  return t;
}

template <typename T>
TensorPtr<T> scalar_tensor(T v, bool requires_grad = false) {
  auto t = make_tensor<T>(Shape{1}, requires_grad);
  t->data[0] = v;
  return t;
}

template <typename T>
void check_finite(const TensorPtr<T>& t, const std::string& context) {
  if (!t->all_finite()) fail("non-finite values in ", context);
}

// Ordered record of executed ops. Ops append in execution order, which is
// topological by construction; backward walks the record once in reverse.
template <typename T>
class Tape {
 public:
  void record(const char* op, const TensorPtr<T>& output, std::function<void()> backward) {
    nodes_.push_back(Node{op, std::move(backward)});
    outputs_.insert(output.get());
  }

  bool owns(const TensorPtr<T>& t) const { return outputs_.count(t.get()) > 0; }

  void backward(const TensorPtr<T>& root) {
    require(root->numel() == 1, "backward: root must be scalar, got shape ",
            shape_str(root->shape));
    require(owns(root), "backward: root was not produced by this tape");
    require(!backward_done_, "backward: tape already consumed; reset() first");
    backward_done_ = true;
    root->ensure_grad();
    root->grad[0] = T(1);
    for (auto it = nodes_.rbegin(); it != nodes_.rend(); ++it) it->backward();
  }

  void reset() {
    nodes_.clear();
    outputs_.clear();
    backward_done_ = false;
  }

  std::size_t size() const { return nodes_.size(); }
  bool consumed() const { return backward_done_; }

 private:
  struct Node {
    const char* op;
    std::function<void()> backward;
  };
  std::vector<Node> nodes_;
  std::unordered_set<const Tensor<T>*> outputs_;
  bool backward_done_{false};
};

namespace detail {

template <typename T>
bool wants_grad(const TensorPtr<T>& t) {
  return t->requires_grad;
}

template <typename T, typename... Rest>
bool wants_grad(const TensorPtr<T>& t, const Rest&... rest) {
  return t->requires_grad || wants_grad(rest...);
}

}  // namespace detail

// ---------------------------------------------------------------------------
// elementwise and shape ops
// ---------------------------------------------------------------------------

template <typename T>
TensorPtr<T> add(Tape<T>* tape, const TensorPtr<T>& a, const TensorPtr<T>& b) {
  bool row_broadcast = false;
  if (a->shape != b->shape) {
    // [B,N] + [N] broadcast over rows
    require(a->rank() == 2 && b->rank() == 1 && a->dim(1) == b->dim(0),
            "add: shape mismatch ", shape_str(a->shape), " vs ", shape_str(b->shape));
    row_broadcast = true;
  }
  auto out = make_tensor<T>(a->shape, detail::wants_grad(a, b));
  const std::int64_t n = a->numel();
  if (row_broadcast) {
    const std::int64_t cols = b->dim(0);
    for (std::int64_t i = 0; i < n; ++i) out->data[i] = a->data[i] + b->data[i % cols];
  } else {
    for (std::int64_t i = 0; i < n; ++i) out->data[i] = a->data[i] + b->data[i];
  }
  if (tape && out->requires_grad) {
    tape->record("add", out, [a, b, out, row_broadcast, n] {
      out->ensure_grad();
      if (a->requires_grad) {
        a->ensure_grad();
        for (std::int64_t i = 0; i < n; ++i) a->grad[i] += out->grad[i];
      }
      if (b->requires_grad) {
        b->ensure_grad();
        if (row_broadcast) {
          const std::int64_t cols = b->dim(0);
          for (std::int64_t i = 0; i < n; ++i) b->grad[i % cols] += out->grad[i];
        } else {
          for (std::int64_t i = 0; i < n; ++i) b->grad[i] += out->grad[i];
        }
      }
    });
  }
  return out;
}

template <typename T>
TensorPtr<T> sub(Tape<T>* tape, const TensorPtr<T>& a, const TensorPtr<T>& b) {
  require(a->shape == b->shape, "sub: shape mismatch ", shape_str(a->shape), " vs ",
          shape_str(b->shape));
  auto out = make_tensor<T>(a->shape, detail::wants_grad(a, b));
  const std::int64_t n = a->numel();
  for (std::int64_t i = 0; i < n; ++i) out->data[i] = a->data[i] - b->data[i];
  if (tape && out->requires_grad) {
    tape->record("sub", out, [a, b, out, n] {
      out->ensure_grad();
      if (a->requires_grad) {
        a->ensure_grad();
        for (std::int64_t i = 0; i < n; ++i) a->grad[i] += out->grad[i];
      }
      if (b->requires_grad) {
        b->ensure_grad();
        for (std::int64_t i = 0; i < n; ++i) b->grad[i] -= out->grad[i];
      }
    });
  }
  return out;
}

template <typename T>
TensorPtr<T> mul(Tape<T>* tape, const TensorPtr<T>& a, const TensorPtr<T>& b) {
  require(a->shape == b->shape, "mul: shape mismatch ", shape_str(a->shape), " vs ",
          shape_str(b->shape));
  auto out = make_tensor<T>(a->shape, detail::wants_grad(a, b));
  const std::int64_t n = a->numel();
  for (std::int64_t i = 0; i < n; ++i) out->data[i] = a->data[i] * b->data[i];
  if (tape && out->requires_grad) {
    tape->record("mul", out, [a, b, out, n] {
      out->ensure_grad();
      if (a->requires_grad) {
        a->ensure_grad();
        for (std::int64_t i = 0; i < n; ++i) a->grad[i] += out->grad[i] * b->data[i];
      }
      if (b->requires_grad) {
        b->ensure_grad();
        for (std::int64_t i = 0; i < n; ++i) b->grad[i] += out->grad[i] * a->data[i];
      }
    });
  }
  return out;
}

template <typename T>
TensorPtr<T> scale(Tape<T>* tape, const TensorPtr<T>& a, T c) {
  auto out = make_tensor<T>(a->shape, a->requires_grad);
  const std::int64_t n = a->numel();
  for (std::int64_t i = 0; i < n; ++i) out->data[i] = a->data[i] * c;
  if (tape && out->requires_grad) {
    tape->record("scale", out, [a, out, c, n] {
      out->ensure_grad();
      a->ensure_grad();
      for (std::int64_t i = 0; i < n; ++i) a->grad[i] += out->grad[i] * c;
    });
  }
  return out;
}

template <typename T>
TensorPtr<T> reshape(Tape<T>* tape, const TensorPtr<T>& a, Shape new_shape) {
  require(shape_numel(new_shape) == a->numel(), "reshape: ", shape_str(a->shape),
          " to ", shape_str(new_shape), " changes element count");
  auto out = make_tensor<T>(new_shape, a->requires_grad);
  out->data = a->data;
  if (tape && out->requires_grad) {
    const std::int64_t n = a->numel();
    tape->record("reshape", out, [a, out, n] {
      out->ensure_grad();
      a->ensure_grad();
      for (std::int64_t i = 0; i < n; ++i) a->grad[i] += out->grad[i];
    });
  }
  return out;
}

namespace detail {

template <typename T, typename FwdFn, typename DervFn>
TensorPtr<T> unary_op(Tape<T>* tape, const char* opname, const TensorPtr<T>& a,
                      FwdFn fwd, DervFn derv) {
  auto out = make_tensor<T>(a->shape, a->requires_grad);
  const std::int64_t n = a->numel();
  for (std::int64_t i = 0; i < n; ++i) out->data[i] = fwd(a->data[i]);
  if (tape && out->requires_grad) {
    tape->record(opname, out, [a, out, derv, n] {
      out->ensure_grad();
      a->ensure_grad();
      for (std::int64_t i = 0; i < n; ++i)
        a->grad[i] += out->grad[i] * derv(a->data[i], out->data[i]);
    });
  }
  return out;
}

}  // namespace detail

template <typename T>
TensorPtr<T> relu(Tape<T>* tape, const TensorPtr<T>& a) {
  return detail::unary_op(
      tape, "relu", a, [](T x) { return x > T(0) ? x : T(0); },
      [](T x, T) { return x > T(0) ? T(1) : T(0); });
}

// ELU with alpha fixed at 1.
template <typename T>
TensorPtr<T> elu(Tape<T>* tape, const TensorPtr<T>& a) {
  return detail::unary_op(
      tape, "elu", a,
      [](T x) { return x > T(0) ? x : static_cast<T>(std::expm1(static_cast<double>(x))); },
      [](T x, T y) { return x > T(0) ? T(1) : y + T(1); });
}

template <typename T>
TensorPtr<T> sigmoid(Tape<T>* tape, const TensorPtr<T>& a) {
  return detail::unary_op(
      tape, "sigmoid", a,
      [](T x) { return static_cast<T>(1.0 / (1.0 + std::exp(-static_cast<double>(x)))); },
      [](T, T y) { return y * (T(1) - y); });
}

template <typename T>
TensorPtr<T> tanh_op(Tape<T>* tape, const TensorPtr<T>& a) {
  return detail::unary_op(
      tape, "tanh", a, [](T x) { return static_cast<T>(std::tanh(static_cast<double>(x))); },
      [](T, T y) { return T(1) - y * y; });
}

// ---------------------------------------------------------------------------
// reductions
// ---------------------------------------------------------------------------

template <typename T>
TensorPtr<T> sum_all(Tape<T>* tape, const TensorPtr<T>& a) {
  auto out = make_tensor<T>(Shape{1}, a->requires_grad);
  T acc = T(0);
  for (const T& v : a->data) acc += v;  // fixed row-major order
  out->data[0] = acc;
  if (tape && out->requires_grad) {
    const std::int64_t n = a->numel();
    tape->record("sum", out, [a, out, n] {
      out->ensure_grad();
      a->ensure_grad();
      const T g = out->grad[0];
      for (std::int64_t i = 0; i < n; ++i) a->grad[i] += g;
    });
  }
  return out;
}

template <typename T>
TensorPtr<T> mean_all(Tape<T>* tape, const TensorPtr<T>& a) {
  require(a->numel() > 0, "mean: empty tensor");
  auto out = make_tensor<T>(Shape{1}, a->requires_grad);
  T acc = T(0);
  for (const T& v : a->data) acc += v;
  const T inv = T(1) / static_cast<T>(a->numel());
  out->data[0] = acc * inv;
  if (tape && out->requires_grad) {
    const std::int64_t n = a->numel();
    tape->record("mean", out, [a, out, inv, n] {
      out->ensure_grad();
      a->ensure_grad();
      const T g = out->grad[0] * inv;
      for (std::int64_t i = 0; i < n; ++i) a->grad[i] += g;
    });
  }
  return out;
}

// Shift-stable log-sum-exp. Rank-1 input reduces to a scalar; rank-2 input
// reduces along axis 1 to one value per row.
template <typename T>
TensorPtr<T> log_sum_exp(Tape<T>* tape, const TensorPtr<T>& a) {
  require(a->rank() == 1 || a->rank() == 2, "log_sum_exp: rank ", a->rank(),
          " unsupported");
  const std::int64_t rows = a->rank() == 2 ? a->dim(0) : 1;
  const std::int64_t cols = a->rank() == 2 ? a->dim(1) : a->dim(0);
  require(cols > 0, "log_sum_exp: empty axis");
  auto out = make_tensor<T>(a->rank() == 2 ? Shape{rows} : Shape{1}, a->requires_grad);
  for (std::int64_t r = 0; r < rows; ++r) {
    const T* row = a->data.data() + r * cols;
    T m = row[0];
    for (std::int64_t c = 1; c < cols; ++c) m = std::max(m, row[c]);
    double s = 0.0;
    for (std::int64_t c = 0; c < cols; ++c)
      s += std::exp(static_cast<double>(row[c] - m));
    out->data[r] = m + static_cast<T>(std::log(s));
  }
  if (tape && out->requires_grad) {
    tape->record("log_sum_exp", out, [a, out, rows, cols] {
      out->ensure_grad();
      a->ensure_grad();
      for (std::int64_t r = 0; r < rows; ++r) {
        const T* row = a->data.data() + r * cols;
        T* grow = a->grad.data() + r * cols;
        const T lse = out->data[r];
        const T g = out->grad[r];
        for (std::int64_t c = 0; c < cols; ++c)
          grow[c] += g * static_cast<T>(std::exp(static_cast<double>(row[c] - lse)));
      }
    });
  }
  return out;
}

// ---------------------------------------------------------------------------
// linear algebra
// ---------------------------------------------------------------------------

template <typename T>
TensorPtr<T> matmul(Tape<T>* tape, const TensorPtr<T>& a, const TensorPtr<T>& b) {
  require(a->rank() == 2 && b->rank() == 2, "matmul: need rank-2 operands, got ",
          shape_str(a->shape), " x ", shape_str(b->shape));
  require(a->dim(1) == b->dim(0), "matmul: inner axis mismatch ", shape_str(a->shape),
          " x ", shape_str(b->shape));
  const std::int64_t M = a->dim(0), K = a->dim(1), N = b->dim(1);
  auto out = make_tensor<T>(Shape{M, N}, detail::wants_grad(a, b));
  for (std::int64_t i = 0; i < M; ++i) {
    T* orow = out->data.data() + i * N;
    for (std::int64_t k = 0; k < K; ++k) {
      const T av = a->data[i * K + k];
      const T* brow = b->data.data() + k * N;
      for (std::int64_t j = 0; j < N; ++j) orow[j] += av * brow[j];
    }
  }
  if (tape && out->requires_grad) {
    tape->record("matmul", out, [a, b, out, M, K, N] {
      out->ensure_grad();
      if (a->requires_grad) {
        a->ensure_grad();
        for (std::int64_t i = 0; i < M; ++i)
          for (std::int64_t k = 0; k < K; ++k) {
            T acc = T(0);
            const T* grow = out->grad.data() + i * N;
            const T* brow = b->data.data() + k * N;
            for (std::int64_t j = 0; j < N; ++j) acc += grow[j] * brow[j];
            a->grad[i * K + k] += acc;
          }
      }
      if (b->requires_grad) {
        b->ensure_grad();
        for (std::int64_t k = 0; k < K; ++k)
          for (std::int64_t i = 0; i < M; ++i) {
            const T av = a->data[i * K + k];
            const T* grow = out->grad.data() + i * N;
            T* bg = b->grad.data() + k * N;
            for (std::int64_t j = 0; j < N; ++j) bg[j] += av * grow[j];
          }
      }
    });
  }
  return out;
}

// out[b] = dot(a[b,:], c[b,:])
template <typename T>
TensorPtr<T> rowwise_dot(Tape<T>* tape, const TensorPtr<T>& a, const TensorPtr<T>& c) {
  require(a->rank() == 2 && a->shape == c->shape, "rowwise_dot: shape mismatch ",
          shape_str(a->shape), " vs ", shape_str(c->shape));
  const std::int64_t B = a->dim(0), E = a->dim(1);
  auto out = make_tensor<T>(Shape{B}, detail::wants_grad(a, c));
  for (std::int64_t b = 0; b < B; ++b) {
    T acc = T(0);
    for (std::int64_t e = 0; e < E; ++e) acc += a->data[b * E + e] * c->data[b * E + e];
    out->data[b] = acc;
  }
  if (tape && out->requires_grad) {
    tape->record("rowwise_dot", out, [a, c, out, B, E] {
      out->ensure_grad();
      if (a->requires_grad) a->ensure_grad();
      if (c->requires_grad) c->ensure_grad();
      for (std::int64_t b = 0; b < B; ++b) {
        const T g = out->grad[b];
        for (std::int64_t e = 0; e < E; ++e) {
          if (a->requires_grad) a->grad[b * E + e] += g * c->data[b * E + e];
          if (c->requires_grad) c->grad[b * E + e] += g * a->data[b * E + e];
        }
      }
    });
  }
  return out;
}

// out[b,k] = dot(m[b,k,:], v[b,:])
template <typename T>
TensorPtr<T> batched_matvec(Tape<T>* tape, const TensorPtr<T>& m, const TensorPtr<T>& v) {
  require(m->rank() == 3 && v->rank() == 2, "batched_matvec: need [B,K,E] x [B,E]");
  require(m->dim(0) == v->dim(0) && m->dim(2) == v->dim(1),
          "batched_matvec: shape mismatch ", shape_str(m->shape), " x ",
          shape_str(v->shape));
  const std::int64_t B = m->dim(0), K = m->dim(1), E = m->dim(2);
  auto out = make_tensor<T>(Shape{B, K}, detail::wants_grad(m, v));
  for (std::int64_t b = 0; b < B; ++b)
    for (std::int64_t k = 0; k < K; ++k) {
      const T* mr = m->data.data() + (b * K + k) * E;
      const T* vr = v->data.data() + b * E;
      T acc = T(0);
      for (std::int64_t e = 0; e < E; ++e) acc += mr[e] * vr[e];
      out->data[b * K + k] = acc;
    }
  if (tape && out->requires_grad) {
    tape->record("batched_matvec", out, [m, v, out, B, K, E] {
      out->ensure_grad();
      if (m->requires_grad) m->ensure_grad();
      if (v->requires_grad) v->ensure_grad();
      for (std::int64_t b = 0; b < B; ++b)
        for (std::int64_t k = 0; k < K; ++k) {
          const T g = out->grad[b * K + k];
          const T* mr = m->data.data() + (b * K + k) * E;
          const T* vr = v->data.data() + b * E;
          for (std::int64_t e = 0; e < E; ++e) {
            if (v->requires_grad) v->grad[b * E + e] += g * mr[e];
            if (m->requires_grad) m->grad[(b * K + k) * E + e] += g * vr[e];
          }
        }
    });
  }
  return out;
}

// out = sum_n alpha[n] * experts[n]; the expert-mixture primitive.
template <typename T>
TensorPtr<T> mix_experts(Tape<T>* tape, const TensorPtr<T>& alpha,
                         const std::vector<TensorPtr<T>>& experts) {
  require(!experts.empty(), "mix_experts: no experts");
  require(alpha->numel() == static_cast<std::int64_t>(experts.size()),
          "mix_experts: ", experts.size(), " experts but alpha has ", alpha->numel(),
          " entries");
  for (const auto& e : experts)
    require(e->shape == experts[0]->shape, "mix_experts: expert shape mismatch");
  bool rg = alpha->requires_grad;
  for (const auto& e : experts) rg = rg || e->requires_grad;
  auto out = make_tensor<T>(experts[0]->shape, rg);
  const std::int64_t n = out->numel();
  for (std::size_t k = 0; k < experts.size(); ++k) {
    const T ak = alpha->data[k];
    const T* src = experts[k]->data.data();
    T* dst = out->data.data();
    for (std::int64_t i = 0; i < n; ++i) dst[i] += ak * src[i];
  }
  if (tape && out->requires_grad) {
    tape->record("mix_experts", out, [alpha, experts, out, n] {
      out->ensure_grad();
      for (std::size_t k = 0; k < experts.size(); ++k) {
        if (alpha->requires_grad) {
          alpha->ensure_grad();
          T acc = T(0);
          const T* src = experts[k]->data.data();
          for (std::int64_t i = 0; i < n; ++i) acc += out->grad[i] * src[i];
          alpha->grad[k] += acc;
        }
        if (experts[k]->requires_grad) {
          experts[k]->ensure_grad();
          const T ak = alpha->data[k];
          T* eg = experts[k]->grad.data();
          for (std::int64_t i = 0; i < n; ++i) eg[i] += ak * out->grad[i];
        }
      }
    });
  }
  return out;
}

template <typename T>
TensorPtr<T> concat_cols(Tape<T>* tape, const std::vector<TensorPtr<T>>& parts) {
  require(!parts.empty(), "concat: no inputs");
  const std::int64_t B = parts[0]->dim(0);
  std::int64_t total = 0;
  bool rg = false;
  for (const auto& p : parts) {
    require(p->rank() == 2 && p->dim(0) == B, "concat: row count mismatch at ",
            shape_str(p->shape));
    total += p->dim(1);
    rg = rg || p->requires_grad;
  }
  auto out = make_tensor<T>(Shape{B, total}, rg);
  std::int64_t off = 0;
  for (const auto& p : parts) {
    const std::int64_t c = p->dim(1);
    for (std::int64_t b = 0; b < B; ++b)
      std::copy_n(p->data.data() + b * c, c, out->data.data() + b * total + off);
    off += c;
  }
  if (tape && rg) {
    tape->record("concat", out, [parts, out, B, total] {
      out->ensure_grad();
      std::int64_t off = 0;
      for (const auto& p : parts) {
        const std::int64_t c = p->dim(1);
        if (p->requires_grad) {
          p->ensure_grad();
          for (std::int64_t b = 0; b < B; ++b)
            for (std::int64_t j = 0; j < c; ++j)
              p->grad[b * c + j] += out->grad[b * total + off + j];
        }
        off += c;
      }
    });
  }
  return out;
}

// Unit-normalizes along `axis` (0 for rank-1, 1 for rank-2 rows). The epsilon
// sits inside the square root so all-zero inputs stay defined.
template <typename T>
TensorPtr<T> l2_normalize(Tape<T>* tape, const TensorPtr<T>& a, int axis) {
  constexpr double kEps = 1e-12;
  require((a->rank() == 1 && axis == 0) || (a->rank() == 2 && axis == 1),
          "l2_normalize: unsupported axis ", axis, " for shape ", shape_str(a->shape));
  const std::int64_t rows = a->rank() == 2 ? a->dim(0) : 1;
  const std::int64_t cols = a->rank() == 2 ? a->dim(1) : a->dim(0);
  auto out = make_tensor<T>(a->shape, a->requires_grad);
  std::vector<T> inv_norm(static_cast<std::size_t>(rows));
  for (std::int64_t r = 0; r < rows; ++r) {
    const T* row = a->data.data() + r * cols;
    double s = 0.0;
    for (std::int64_t c = 0; c < cols; ++c)
      s += static_cast<double>(row[c]) * static_cast<double>(row[c]);
    const T inv = static_cast<T>(1.0 / std::sqrt(s + kEps));
    inv_norm[r] = inv;
    T* orow = out->data.data() + r * cols;
    for (std::int64_t c = 0; c < cols; ++c) orow[c] = row[c] * inv;
  }
  if (tape && out->requires_grad) {
    tape->record("l2_normalize", out, [a, out, inv_norm, rows, cols] {
      out->ensure_grad();
      a->ensure_grad();
      for (std::int64_t r = 0; r < rows; ++r) {
        const T* row = a->data.data() + r * cols;
        const T* grow = out->grad.data() + r * cols;
        T* ag = a->grad.data() + r * cols;
        const T inv = inv_norm[r];
        T dot = T(0);
        for (std::int64_t c = 0; c < cols; ++c) dot += grow[c] * row[c];
        const T k = dot * inv * inv * inv;
        for (std::int64_t c = 0; c < cols; ++c) ag[c] += grow[c] * inv - row[c] * k;
      }
    });
  }
  return out;
}

// ---------------------------------------------------------------------------
// 3D convolution (cross-correlation, deep-learning convention)
// ---------------------------------------------------------------------------

namespace detail {

struct ConvDims {
  std::int64_t B, Ci, D, H, W, Co, k, stride, pad, Dp, Hp, Wp;
  bool batched;
};

inline std::int64_t conv_out_extent(std::int64_t in, std::int64_t pad, std::int64_t k,
                                    std::int64_t stride) {
  return (in + 2 * pad - k) / stride + 1;
}

template <typename T>
ConvDims conv_dims(const TensorPtr<T>& input, const TensorPtr<T>& kernel,
                   const TensorPtr<T>& bias, std::int64_t stride, std::int64_t pad) {
  require(input->rank() == 4 || input->rank() == 5,
          "conv3d: input must be [C,D,H,W] or [B,C,D,H,W], got ",
          shape_str(input->shape));
  require(kernel->rank() == 5, "conv3d: kernel must be [Co,Ci,k,k,k], got ",
          shape_str(kernel->shape));
  ConvDims d;
  d.batched = input->rank() == 5;
  int off = d.batched ? 1 : 0;
  d.B = d.batched ? input->dim(0) : 1;
  d.Ci = input->dim(off + 0);
  d.D = input->dim(off + 1);
  d.H = input->dim(off + 2);
  d.W = input->dim(off + 3);
  d.Co = kernel->dim(0);
  d.k = kernel->dim(2);
  require(kernel->dim(1) == d.Ci, "conv3d: kernel input-channel axis is ",
          kernel->dim(1), " but input has ", d.Ci, " channels");
  require(kernel->dim(3) == d.k && kernel->dim(4) == d.k,
          "conv3d: kernel must be cubic, got ", shape_str(kernel->shape));
  require(d.k % 2 == 1, "conv3d: kernel extent must be odd, got ", d.k);
  require(stride >= 1, "conv3d: stride must be >= 1, got ", stride);
  require(pad >= 0, "conv3d: zero_pad must be >= 0, got ", pad);
  require(bias->rank() == 1 && bias->dim(0) == d.Co, "conv3d: bias shape ",
          shape_str(bias->shape), " does not match ", d.Co, " output channels");
  d.stride = stride;
  d.pad = pad;
  d.Dp = conv_out_extent(d.D, pad, d.k, stride);
  d.Hp = conv_out_extent(d.H, pad, d.k, stride);
  d.Wp = conv_out_extent(d.W, pad, d.k, stride);
  require(d.Dp >= 1 && d.Hp >= 1 && d.Wp >= 1,
          "conv3d: non-positive output extent for input ", shape_str(input->shape),
          " kernel ", shape_str(kernel->shape), " stride ", stride, " pad ", pad);
  return d;
}

// Output index range [lo, hi] such that lo*stride + koff - pad stays in [0, ext).
inline void conv_tap_range(std::int64_t ext, std::int64_t out_ext, std::int64_t koff,
                           std::int64_t stride, std::int64_t pad, std::int64_t& lo,
                           std::int64_t& hi) {
  std::int64_t a = pad - koff;
  lo = a <= 0 ? 0 : (a + stride - 1) / stride;
  std::int64_t num = ext - 1 + pad - koff;
  hi = num < 0 ? -1 : std::min(out_ext - 1, num / stride);
}

template <typename T>
void conv_forward_sample(const T* in, const T* ker, const T* bias, T* out,
                         const ConvDims& d) {
  const std::int64_t oplane = d.Hp * d.Wp, ovol = d.Dp * oplane;
  const std::int64_t iplane = d.H * d.W, ivol = d.D * iplane;
  for (std::int64_t co = 0; co < d.Co; ++co)
    std::fill_n(out + co * ovol, ovol, bias[co]);
  for (std::int64_t co = 0; co < d.Co; ++co) {
    T* oc = out + co * ovol;
    for (std::int64_t ci = 0; ci < d.Ci; ++ci) {
      const T* ic = in + ci * ivol;
      const T* kc = ker + (co * d.Ci + ci) * d.k * d.k * d.k;
      for (std::int64_t kz = 0; kz < d.k; ++kz) {
        std::int64_t zlo, zhi;
        conv_tap_range(d.D, d.Dp, kz, d.stride, d.pad, zlo, zhi);
        for (std::int64_t ky = 0; ky < d.k; ++ky) {
          std::int64_t ylo, yhi;
          conv_tap_range(d.H, d.Hp, ky, d.stride, d.pad, ylo, yhi);
          for (std::int64_t kx = 0; kx < d.k; ++kx) {
            std::int64_t xlo, xhi;
            conv_tap_range(d.W, d.Wp, kx, d.stride, d.pad, xlo, xhi);
            if (zhi < zlo || yhi < ylo || xhi < xlo) continue;
            const T w = kc[(kz * d.k + ky) * d.k + kx];
            if (w == T(0)) continue;
            for (std::int64_t z = zlo; z <= zhi; ++z) {
              const T* iz = ic + (z * d.stride + kz - d.pad) * iplane;
              T* ozp = oc + z * oplane;
              for (std::int64_t y = ylo; y <= yhi; ++y) {
                const T* irow = iz + (y * d.stride + ky - d.pad) * d.W + kx - d.pad;
                T* orow = ozp + y * d.Wp;
                if (d.stride == 1) {
                  for (std::int64_t x = xlo; x <= xhi; ++x) orow[x] += w * irow[x];
                } else {
                  for (std::int64_t x = xlo; x <= xhi; ++x)
                    orow[x] += w * irow[x * d.stride];
                }
              }
            }
          }
        }
      }
    }
  }
}

template <typename T>
void conv_backward_sample(const T* in, const T* ker, const T* og, T* ig, T* kg, T* bg,
                          const ConvDims& d) {
  const std::int64_t oplane = d.Hp * d.Wp, ovol = d.Dp * oplane;
  const std::int64_t iplane = d.H * d.W, ivol = d.D * iplane;
  for (std::int64_t co = 0; co < d.Co; ++co) {
    const T* ogc = og + co * ovol;
    if (bg) {
      T acc = T(0);
      for (std::int64_t i = 0; i < ovol; ++i) acc += ogc[i];
      bg[co] += acc;
    }
    for (std::int64_t ci = 0; ci < d.Ci; ++ci) {
      const T* ic = in + ci * ivol;
      T* igc = ig ? ig + ci * ivol : nullptr;
      const std::int64_t kbase = (co * d.Ci + ci) * d.k * d.k * d.k;
      for (std::int64_t kz = 0; kz < d.k; ++kz) {
        std::int64_t zlo, zhi;
        conv_tap_range(d.D, d.Dp, kz, d.stride, d.pad, zlo, zhi);
        for (std::int64_t ky = 0; ky < d.k; ++ky) {
          std::int64_t ylo, yhi;
          conv_tap_range(d.H, d.Hp, ky, d.stride, d.pad, ylo, yhi);
          for (std::int64_t kx = 0; kx < d.k; ++kx) {
            std::int64_t xlo, xhi;
            conv_tap_range(d.W, d.Wp, kx, d.stride, d.pad, xlo, xhi);
            if (zhi < zlo || yhi < ylo || xhi < xlo) continue;
            const std::int64_t kidx = kbase + (kz * d.k + ky) * d.k + kx;
            const T w = ker[kidx];
            T wacc = T(0);
            for (std::int64_t z = zlo; z <= zhi; ++z) {
              const std::int64_t izoff = (z * d.stride + kz - d.pad) * iplane;
              const T* ogz = ogc + z * oplane;
              for (std::int64_t y = ylo; y <= yhi; ++y) {
                const std::int64_t irow =
                    izoff + (y * d.stride + ky - d.pad) * d.W + kx - d.pad;
                const T* ogrow = ogz + y * d.Wp;
                if (d.stride == 1) {
                  const T* irp = ic + irow;
                  for (std::int64_t x = xlo; x <= xhi; ++x) wacc += ogrow[x] * irp[x];
                  if (igc) {
                    T* igp = igc + irow;
                    for (std::int64_t x = xlo; x <= xhi; ++x) igp[x] += w * ogrow[x];
                  }
                } else {
                  for (std::int64_t x = xlo; x <= xhi; ++x) {
                    const std::int64_t ii = irow + x * d.stride;
                    wacc += ogrow[x] * ic[ii];
                    if (igc) igc[ii] += w * ogrow[x];
                  }
                }
              }
            }
            if (kg) kg[kidx] += wacc;
          }
        }
      }
    }
  }
}

}  // namespace detail

template <typename T>
TensorPtr<T> conv3d(Tape<T>* tape, const TensorPtr<T>& input, const TensorPtr<T>& kernel,
                    const TensorPtr<T>& bias, std::int64_t stride, std::int64_t zero_pad) {
  const auto d = detail::conv_dims(input, kernel, bias, stride, zero_pad);
  Shape oshape = d.batched ? Shape{d.B, d.Co, d.Dp, d.Hp, d.Wp}
                           : Shape{d.Co, d.Dp, d.Hp, d.Wp};
  auto out = make_tensor<T>(oshape, detail::wants_grad(input, kernel, bias));
  const std::int64_t ivol = d.Ci * d.D * d.H * d.W;
  const std::int64_t ovol = d.Co * d.Dp * d.Hp * d.Wp;
  parallel_for(d.B, [&](std::int64_t lo, std::int64_t hi) {
    for (std::int64_t b = lo; b < hi; ++b)
      detail::conv_forward_sample(input->data.data() + b * ivol, kernel->data.data(),
                                  bias->data.data(), out->data.data() + b * ovol, d);
  });
  if (tape && out->requires_grad) {
    tape->record("conv3d", out, [input, kernel, bias, out, d, ivol, ovol] {
      out->ensure_grad();
      if (input->requires_grad) input->ensure_grad();
      const std::int64_t kn = kernel->numel();
      // per-sample kernel/bias partials keep the cross-batch reduction order
      // fixed regardless of thread count
      std::vector<T> kparts, bparts;
      if (kernel->requires_grad) kparts.assign(static_cast<std::size_t>(d.B * kn), T(0));
      if (bias->requires_grad) bparts.assign(static_cast<std::size_t>(d.B * d.Co), T(0));
      parallel_for(d.B, [&](std::int64_t lo, std::int64_t hi) {
        for (std::int64_t b = lo; b < hi; ++b)
          detail::conv_backward_sample(
              input->data.data() + b * ivol, kernel->data.data(),
              out->grad.data() + b * ovol,
              input->requires_grad ? input->grad.data() + b * ivol : nullptr,
              kernel->requires_grad ? kparts.data() + b * kn : nullptr,
              bias->requires_grad ? bparts.data() + b * d.Co : nullptr, d);
      });
      if (kernel->requires_grad) {
        kernel->ensure_grad();
        for (std::int64_t b = 0; b < d.B; ++b)
          for (std::int64_t i = 0; i < kn; ++i) kernel->grad[i] += kparts[b * kn + i];
      }
      if (bias->requires_grad) {
        bias->ensure_grad();
        for (std::int64_t b = 0; b < d.B; ++b)
          for (std::int64_t i = 0; i < d.Co; ++i) bias->grad[i] += bparts[b * d.Co + i];
      }
    });
  }
  return out;
}

// ---------------------------------------------------------------------------
// batch norm and pooling
// ---------------------------------------------------------------------------

// 3D batch norm over [B,C,D,H,W], per-channel statistics across B and space.
// Train mode uses batch moments (biased variance) and, when update_running is
// set, folds them into the running buffers with momentum 0.1. Eval mode uses
// the running buffers.
template <typename T>
TensorPtr<T> batchnorm3d(Tape<T>* tape, const TensorPtr<T>& x, const TensorPtr<T>& gamma,
                         const TensorPtr<T>& beta, TensorPtr<T>& running_mean,
                         TensorPtr<T>& running_var, bool train, bool update_running,
                         T momentum = T(0.1), T eps = T(1e-5)) {
  require(x->rank() == 5, "batchnorm: input must be [B,C,D,H,W], got ",
          shape_str(x->shape));
  const std::int64_t B = x->dim(0), C = x->dim(1);
  const std::int64_t S = x->dim(2) * x->dim(3) * x->dim(4);
  require(gamma->numel() == C && beta->numel() == C, "batchnorm: affine params must have ",
          C, " channels");
  if (train) require(B >= 2, "batchnorm: train mode requires batch extent >= 2, got ", B);
  auto out = make_tensor<T>(x->shape, detail::wants_grad(x, gamma, beta));
  const std::int64_t n = B * S;
  auto xhat = std::make_shared<std::vector<T>>(x->data.size());
  std::vector<T> inv_std(static_cast<std::size_t>(C));
  for (std::int64_t c = 0; c < C; ++c) {
    double mu, var;
    if (train) {
      double s = 0.0;
      for (std::int64_t b = 0; b < B; ++b) {
        const T* p = x->data.data() + (b * C + c) * S;
        for (std::int64_t i = 0; i < S; ++i) s += static_cast<double>(p[i]);
      }
      mu = s / static_cast<double>(n);
      double v = 0.0;
      for (std::int64_t b = 0; b < B; ++b) {
        const T* p = x->data.data() + (b * C + c) * S;
        for (std::int64_t i = 0; i < S; ++i) {
          double dlt = static_cast<double>(p[i]) - mu;
          v += dlt * dlt;
        }
      }
      var = v / static_cast<double>(n);
      if (update_running) {
        running_mean->data[c] = (T(1) - momentum) * running_mean->data[c] +
                                momentum * static_cast<T>(mu);
        running_var->data[c] = (T(1) - momentum) * running_var->data[c] +
                               momentum * static_cast<T>(var);
      }
    } else {
      mu = static_cast<double>(running_mean->data[c]);
      var = static_cast<double>(running_var->data[c]);
    }
    const T istd = static_cast<T>(1.0 / std::sqrt(var + static_cast<double>(eps)));
    inv_std[c] = istd;
    const T g = gamma->data[c], bta = beta->data[c], m = static_cast<T>(mu);
    for (std::int64_t b = 0; b < B; ++b) {
      const T* p = x->data.data() + (b * C + c) * S;
      T* xh = xhat->data() + (b * C + c) * S;
      T* o = out->data.data() + (b * C + c) * S;
      for (std::int64_t i = 0; i < S; ++i) {
        xh[i] = (p[i] - m) * istd;
        o[i] = g * xh[i] + bta;
      }
    }
  }
  if (tape && out->requires_grad) {
    tape->record("batchnorm", out, [x, gamma, beta, out, xhat, inv_std, train, B, C, S, n] {
      out->ensure_grad();
      if (x->requires_grad) x->ensure_grad();
      if (gamma->requires_grad) gamma->ensure_grad();
      if (beta->requires_grad) beta->ensure_grad();
      for (std::int64_t c = 0; c < C; ++c) {
        double sum_dy = 0.0, sum_dy_xhat = 0.0;
        for (std::int64_t b = 0; b < B; ++b) {
          const T* gy = out->grad.data() + (b * C + c) * S;
          const T* xh = xhat->data() + (b * C + c) * S;
          for (std::int64_t i = 0; i < S; ++i) {
            sum_dy += static_cast<double>(gy[i]);
            sum_dy_xhat += static_cast<double>(gy[i]) * static_cast<double>(xh[i]);
          }
        }
        if (gamma->requires_grad) gamma->grad[c] += static_cast<T>(sum_dy_xhat);
        if (beta->requires_grad) beta->grad[c] += static_cast<T>(sum_dy);
        if (x->requires_grad) {
          const T g = gamma->data[c], istd = inv_std[c];
          if (train) {
            const T mean_dy = static_cast<T>(sum_dy / static_cast<double>(n));
            const T mean_dy_xhat = static_cast<T>(sum_dy_xhat / static_cast<double>(n));
            for (std::int64_t b = 0; b < B; ++b) {
              const T* gy = out->grad.data() + (b * C + c) * S;
              const T* xh = xhat->data() + (b * C + c) * S;
              T* gx = x->grad.data() + (b * C + c) * S;
              for (std::int64_t i = 0; i < S; ++i)
                gx[i] += g * istd * (gy[i] - mean_dy - xh[i] * mean_dy_xhat);
            }
          } else {
            for (std::int64_t b = 0; b < B; ++b) {
              const T* gy = out->grad.data() + (b * C + c) * S;
              T* gx = x->grad.data() + (b * C + c) * S;
              for (std::int64_t i = 0; i < S; ++i) gx[i] += g * istd * gy[i];
            }
          }
        }
      }
    });
  }
  return out;
}

// [B,C,D,H,W] -> [B,C] spatial mean.
template <typename T>
TensorPtr<T> global_avg_pool(Tape<T>* tape, const TensorPtr<T>& x) {
  require(x->rank() == 5, "global_avg_pool: input must be [B,C,D,H,W], got ",
          shape_str(x->shape));
  const std::int64_t B = x->dim(0), C = x->dim(1);
  const std::int64_t S = x->dim(2) * x->dim(3) * x->dim(4);
  auto out = make_tensor<T>(Shape{B, C}, x->requires_grad);
  const T inv = T(1) / static_cast<T>(S);
  for (std::int64_t bc = 0; bc < B * C; ++bc) {
    const T* p = x->data.data() + bc * S;
    T acc = T(0);
    for (std::int64_t i = 0; i < S; ++i) acc += p[i];
    out->data[bc] = acc * inv;
  }
  if (tape && out->requires_grad) {
    tape->record("global_avg_pool", out, [x, out, B, C, S, inv] {
      out->ensure_grad();
      x->ensure_grad();
      for (std::int64_t bc = 0; bc < B * C; ++bc) {
        const T g = out->grad[bc] * inv;
        T* p = x->grad.data() + bc * S;
        for (std::int64_t i = 0; i < S; ++i) p[i] += g;
      }
    });
  }
  return out;
}

}  // namespace drascore
