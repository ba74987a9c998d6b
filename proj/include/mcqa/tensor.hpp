#pragma once

// Dense double-precision tensors with reverse-mode differentiation.
// Operations record onto the thread-local active Tape; without a tape
// they run forward-only.

#include <cmath>
#include <cstddef>
#include <cstdint>
#include <functional>
#include <memory>
#include <numeric>
#include <random>
#include <sstream>
#include <stdexcept>
#include <string>
#include <vector>

namespace mcqa {

struct TensorError : std::runtime_error {
  explicit TensorError(const std::string& msg) : std::runtime_error(msg) {}
};

using Shape = std::vector<std::size_t>;

inline std::size_t shape_size(const Shape& s) {
  std::size_t n = 1;
  for (auto d : s) n *= d;
  return n;
}

inline std::string shape_str(const Shape& s) {
  std::ostringstream os;
  os << "[";
  for (std::size_t i = 0; i < s.size(); ++i) os << (i ? "x" : "") << s[i];
  os << "]";
  return os.str();
}

namespace detail {

struct Node {
  Shape shape;
  std::vector<double> data;
  std::vector<double> grad;  // allocated lazily, same length as data
  bool requires_grad = false;
  std::function<void()> backward_fn;  // accumulates into parents' grads
  std::vector<std::shared_ptr<Node>> parents;

  void ensure_grad() {
    if (grad.size() != data.size()) grad.assign(data.size(), 0.0);
  }
};

}  // namespace detail

class Tensor {
 public:
  Tensor() = default;

  Tensor(Shape shape, std::vector<double> data, bool requires_grad = false) {
    if (shape_size(shape) != data.size())
      throw TensorError("tensor shape " + shape_str(shape) + " does not match data length " +
                        std::to_string(data.size()));
    node_ = std::make_shared<detail::Node>();
    node_->shape = std::move(shape);
    node_->data = std::move(data);
    node_->requires_grad = requires_grad;
  }

  static Tensor zeros(Shape shape, bool requires_grad = false) {
    auto n = shape_size(shape);
    return Tensor(std::move(shape), std::vector<double>(n, 0.0), requires_grad);
  }

  static Tensor full(Shape shape, double value, bool requires_grad = false) {
    auto n = shape_size(shape);
    return Tensor(std::move(shape), std::vector<double>(n, value), requires_grad);
  }

  static Tensor scalar(double value, bool requires_grad = false) {
    return Tensor({1}, {value}, requires_grad);
  }

  bool defined() const { return node_ != nullptr; }
  const Shape& shape() const { return node_->shape; }
  std::size_t size() const { return node_->data.size(); }
  std::size_t dim(std::size_t i) const { return node_->shape.at(i); }
  std::size_t rank() const { return node_->shape.size(); }
  bool requires_grad() const { return node_->requires_grad; }

  std::vector<double>& data() { return node_->data; }
  const std::vector<double>& data() const { return node_->data; }
  std::vector<double>& grad() {
    node_->ensure_grad();
    return node_->grad;
  }
  const std::vector<double>& grad() const {
    node_->ensure_grad();
    return node_->grad;
  }

  double item() const {
    if (size() != 1) throw TensorError("item() on non-scalar tensor " + shape_str(shape()));
    return node_->data[0];
  }

  double at(std::size_t i) const { return node_->data.at(i); }
  double at(std::size_t r, std::size_t c) const {
    if (rank() != 2) throw TensorError("2-index access on tensor " + shape_str(shape()));
    return node_->data.at(r * dim(1) + c);
  }

  std::shared_ptr<detail::Node> node() const { return node_; }

 private:
  std::shared_ptr<detail::Node> node_;
};

// Records executed differentiable operations in order. Constructing a Tape
// makes it the active tape for the current thread; destruction restores the
// previous one. A single tape is single-threaded.
class Tape {
 public:
  Tape() : prev_(active_ptr()) { active_ptr() = this; }
  ~Tape() {
    release();
    active_ptr() = prev_;
  }
  Tape(const Tape&) = delete;
  Tape& operator=(const Tape&) = delete;

  static Tape* active() { return active_ptr(); }

  void record(const Tensor& t) { nodes_.push_back(t.node()); }
  std::size_t num_ops() const { return nodes_.size(); }

  // Resets all participating gradients, seeds d(loss)/d(loss)=1, then replays
  // the tape in exact reverse execution order.
  void backward(const Tensor& loss) {
    if (loss.size() != 1) throw TensorError("backward requires a scalar loss, got " + shape_str(loss.shape()));
    if (!loss.requires_grad())
      throw TensorError("backward on a loss that was not produced through taped operations");
    for (auto& n : nodes_) {
      n->ensure_grad();
      std::fill(n->grad.begin(), n->grad.end(), 0.0);
      for (auto& p : n->parents) {
        if (p->requires_grad) {
          p->ensure_grad();
          std::fill(p->grad.begin(), p->grad.end(), 0.0);
        }
      }
    }
    loss.node()->ensure_grad();
    loss.node()->grad[0] = 1.0;
    for (auto it = nodes_.rbegin(); it != nodes_.rend(); ++it) {
      if ((*it)->backward_fn) (*it)->backward_fn();
    }
  }

  void clear() { release(); }

 private:
  // backward closures capture their output tensor, giving each recorded node
  // a reference cycle onto itself; dropping the closures and parent links
  // here is what actually frees the graph
  void release() {
    for (auto& n : nodes_) {
      n->backward_fn = nullptr;
      n->parents.clear();
    }
    nodes_.clear();
  }

  static Tape*& active_ptr() {
    static thread_local Tape* active = nullptr;
    return active;
  }
  std::vector<std::shared_ptr<detail::Node>> nodes_;
  Tape* prev_;
};

namespace detail {

inline void check_finite(const Tensor& t, const char* op) {
  for (double v : t.data())
    if (!std::isfinite(v))
      throw TensorError(std::string("non-finite value produced by ") + op);
}

// Finalizes an op result: marks grad participation, attaches the backward
// closure, records on the active tape.
inline void register_op(Tensor& out, std::vector<Tensor> inputs, std::function<void()> backward_fn,
                        const char* op) {
  check_finite(out, op);
  Tape* tape = Tape::active();
  if (!tape) return;
  bool needs = false;
  for (auto& in : inputs)
    if (in.requires_grad()) needs = true;
  if (!needs) return;
  auto node = out.node();
  node->requires_grad = true;
  node->parents.reserve(inputs.size());
  for (auto& in : inputs) node->parents.push_back(in.node());
  node->backward_fn = std::move(backward_fn);
  tape->record(out);
}

}  // namespace detail

// ---- matrix ops ----

inline Tensor matmul(const Tensor& a, const Tensor& b) {
  if (a.rank() != 2 || b.rank() != 2 || a.dim(1) != b.dim(0))
    throw TensorError("matmul shape mismatch: " + shape_str(a.shape()) + " x " + shape_str(b.shape()));
  const std::size_t m = a.dim(0), k = a.dim(1), n = b.dim(1);
  Tensor out = Tensor::zeros({m, n});
  {
    const auto& ad = a.data();
    const auto& bd = b.data();
    auto& od = out.data();
    for (std::size_t i = 0; i < m; ++i)
      for (std::size_t p = 0; p < k; ++p) {
        const double av = ad[i * k + p];
        if (av == 0.0) continue;
        for (std::size_t j = 0; j < n; ++j) od[i * n + j] += av * bd[p * n + j];
      }
  }
  detail::register_op(
      out, {a, b},
      [a, b, out, m, k, n]() {
        const auto& og = out.grad();
        if (a.requires_grad()) {
          auto& ag = a.node()->grad;
          const auto& bd = b.data();
          for (std::size_t i = 0; i < m; ++i)
            for (std::size_t p = 0; p < k; ++p) {
              double s = 0.0;
              for (std::size_t j = 0; j < n; ++j) s += og[i * n + j] * bd[p * n + j];
              ag[i * k + p] += s;
            }
        }
        if (b.requires_grad()) {
          auto& bg = b.node()->grad;
          const auto& ad = a.data();
          for (std::size_t p = 0; p < k; ++p)
            for (std::size_t i = 0; i < m; ++i) {
              const double av = ad[i * k + p];
              if (av == 0.0) continue;
              for (std::size_t j = 0; j < n; ++j) bg[p * n + j] += av * og[i * n + j];
            }
        }
      },
      "matmul");
  return out;
}

inline Tensor transpose(const Tensor& a) {
  if (a.rank() != 2) throw TensorError("transpose expects rank-2 tensor, got " + shape_str(a.shape()));
  const std::size_t m = a.dim(0), n = a.dim(1);
  Tensor out = Tensor::zeros({n, m});
  for (std::size_t i = 0; i < m; ++i)
    for (std::size_t j = 0; j < n; ++j) out.data()[j * m + i] = a.data()[i * n + j];
  detail::register_op(
      out, {a},
      [a, out, m, n]() {
        if (!a.requires_grad()) return;
        auto& ag = a.node()->grad;
        const auto& og = out.grad();
        for (std::size_t i = 0; i < m; ++i)
          for (std::size_t j = 0; j < n; ++j) ag[i * n + j] += og[j * m + i];
      },
      "transpose");
  return out;
}

// ---- elementwise ops (broadcasting: b may be a trailing-shape of a, i.e.
// leading dimensions of a are expanded) ----

namespace detail {

inline void check_broadcast(const Tensor& a, const Tensor& b, const char* op) {
  const auto& as = a.shape();
  const auto& bs = b.shape();
  if (bs.size() > as.size() ||
      !std::equal(bs.rbegin(), bs.rend(), as.rbegin()))
    throw TensorError(std::string(op) + " shape mismatch: " + shape_str(as) + " vs " + shape_str(bs));
}

template <typename Fwd, typename Bwd>
Tensor binary_broadcast(const Tensor& a, const Tensor& b, Fwd fwd, Bwd bwd, const char* op) {
  check_broadcast(a, b, op);
  const std::size_t bn = b.size();
  Tensor out = Tensor::zeros(a.shape());
  for (std::size_t i = 0; i < a.size(); ++i)
    out.data()[i] = fwd(a.data()[i], b.data()[i % bn]);
  register_op(
      out, {a, b},
      [a, b, out, bn, bwd]() {
        const auto& og = out.grad();
        for (std::size_t i = 0; i < og.size(); ++i) {
          double da, db;
          bwd(a.data()[i], b.data()[i % bn], og[i], da, db);
          if (a.requires_grad()) a.node()->grad[i] += da;
          if (b.requires_grad()) b.node()->grad[i % bn] += db;
        }
      },
      op);
  return out;
}

template <typename Fwd, typename Bwd>
Tensor unary(const Tensor& a, Fwd fwd, Bwd bwd, const char* op) {
  Tensor out = Tensor::zeros(a.shape());
  for (std::size_t i = 0; i < a.size(); ++i) out.data()[i] = fwd(a.data()[i]);
  register_op(
      out, {a},
      [a, out, bwd]() {
        if (!a.requires_grad()) return;
        const auto& og = out.grad();
        for (std::size_t i = 0; i < og.size(); ++i)
          a.node()->grad[i] += og[i] * bwd(a.data()[i], out.data()[i]);
      },
      op);
  return out;
}

}  // namespace detail

inline Tensor add(const Tensor& a, const Tensor& b) {
  return detail::binary_broadcast(
      a, b, [](double x, double y) { return x + y; },
      [](double, double, double g, double& da, double& db) { da = g; db = g; }, "add");
}

inline Tensor sub(const Tensor& a, const Tensor& b) {
  return detail::binary_broadcast(
      a, b, [](double x, double y) { return x - y; },
      [](double, double, double g, double& da, double& db) { da = g; db = -g; }, "sub");
}

inline Tensor mul(const Tensor& a, const Tensor& b) {
  return detail::binary_broadcast(
      a, b, [](double x, double y) { return x * y; },
      [](double x, double y, double g, double& da, double& db) {
        da = g * y;
        db = g * x;
      },
      "mul");
}

inline Tensor tanh(const Tensor& a) {
  return detail::unary(
      a, [](double x) { return std::tanh(x); },
      [](double, double y) { return 1.0 - y * y; }, "tanh");
}

inline Tensor relu(const Tensor& a) {
  return detail::unary(
      a, [](double x) { return x > 0.0 ? x : 0.0; },
      [](double x, double) { return x > 0.0 ? 1.0 : 0.0; }, "relu");
}

// Exact erf form, matching the Gaussian CDF definition.
inline Tensor gelu(const Tensor& a) {
  return detail::unary(
      a, [](double x) { return 0.5 * x * (1.0 + std::erf(x / std::sqrt(2.0))); },
      [](double x, double) {
        const double cdf = 0.5 * (1.0 + std::erf(x / std::sqrt(2.0)));
        const double pdf = std::exp(-0.5 * x * x) / std::sqrt(2.0 * M_PI);
        return cdf + x * pdf;
      },
      "gelu");
}

inline Tensor scale(const Tensor& a, double c) {
  return detail::unary(
      a, [c](double x) { return c * x; }, [c](double, double) { return c; }, "scale");
}

// ---- softmax / losses ----

// Softmax over the last dimension of scores/scale, with masked positions
// forced to exactly zero. mask entries are 0/1 over the same shape; a row
// with no unmasked position is an error.
inline Tensor masked_scaled_softmax(const Tensor& scores, double scale_div, const Tensor& mask) {
  if (scale_div <= 0.0) throw TensorError("masked_scaled_softmax: scale must be positive");
  if (mask.shape() != scores.shape())
    throw TensorError("masked_scaled_softmax mask shape " + shape_str(mask.shape()) +
                      " does not match scores " + shape_str(scores.shape()));
  if (scores.rank() == 0 || scores.size() == 0)
    throw TensorError("masked_scaled_softmax on empty tensor");
  const std::size_t n = scores.shape().back();
  const std::size_t rows = scores.size() / n;
  Tensor out = Tensor::zeros(scores.shape());
  for (std::size_t r = 0; r < rows; ++r) {
    const double* s = scores.data().data() + r * n;
    const double* m = mask.data().data() + r * n;
    double* o = out.data().data() + r * n;
    double mx = -std::numeric_limits<double>::infinity();
    for (std::size_t j = 0; j < n; ++j)
      if (m[j] != 0.0) mx = std::max(mx, s[j] / scale_div);
    if (!std::isfinite(mx))
      throw TensorError("masked_scaled_softmax: fully-masked row " + std::to_string(r));
    double z = 0.0;
    for (std::size_t j = 0; j < n; ++j)
      if (m[j] != 0.0) z += std::exp(s[j] / scale_div - mx);
    for (std::size_t j = 0; j < n; ++j) o[j] = m[j] != 0.0 ? std::exp(s[j] / scale_div - mx) / z : 0.0;
  }
  detail::register_op(
      out, {scores},
      [scores, out, mask, scale_div, rows, n]() {
        if (!scores.requires_grad()) return;
        auto& sg = scores.node()->grad;
        const auto& og = out.grad();
        const auto& od = out.data();
        for (std::size_t r = 0; r < rows; ++r) {
          double dot = 0.0;
          for (std::size_t j = 0; j < n; ++j) dot += og[r * n + j] * od[r * n + j];
          for (std::size_t j = 0; j < n; ++j)
            sg[r * n + j] += od[r * n + j] * (og[r * n + j] - dot) / scale_div;
        }
      },
      "masked_scaled_softmax");
  return out;
}

inline Tensor softmax(const Tensor& scores, double scale_div = 1.0) {
  return masked_scaled_softmax(scores, scale_div, Tensor::full(scores.shape(), 1.0));
}

// -log softmax(logits)[gold] for a 1-D logit vector, stable via logsumexp.
inline Tensor cross_entropy(const Tensor& logits, std::size_t gold) {
  if (logits.rank() != 1) throw TensorError("cross_entropy expects a 1-D logit vector");
  const std::size_t n = logits.dim(0);
  if (gold >= n)
    throw TensorError("cross_entropy gold index " + std::to_string(gold) + " out of range for " +
                      std::to_string(n) + " classes");
  double mx = *std::max_element(logits.data().begin(), logits.data().end());
  double z = 0.0;
  for (double v : logits.data()) z += std::exp(v - mx);
  const double lse = mx + std::log(z);
  Tensor out = Tensor::scalar(lse - logits.at(gold));
  detail::register_op(
      out, {logits},
      [logits, out, gold, lse, n]() {
        if (!logits.requires_grad()) return;
        auto& lg = logits.node()->grad;
        const double g = out.grad()[0];
        for (std::size_t j = 0; j < n; ++j) {
          double p = std::exp(logits.at(j) - lse);
          lg[j] += g * (p - (j == gold ? 1.0 : 0.0));
        }
      },
      "cross_entropy");
  return out;
}

// Mean cross-entropy over rows of a [k x V] logit matrix.
inline Tensor cross_entropy_rows(const Tensor& logits, const std::vector<std::size_t>& golds) {
  if (logits.rank() != 2 || logits.dim(0) != golds.size())
    throw TensorError("cross_entropy_rows: logits " + shape_str(logits.shape()) + " vs " +
                      std::to_string(golds.size()) + " targets");
  const std::size_t k = logits.dim(0), v = logits.dim(1);
  std::vector<double> lses(k);
  double total = 0.0;
  for (std::size_t r = 0; r < k; ++r) {
    if (golds[r] >= v) throw TensorError("cross_entropy_rows: gold out of range at row " + std::to_string(r));
    const double* row = logits.data().data() + r * v;
    double mx = *std::max_element(row, row + v);
    double z = 0.0;
    for (std::size_t j = 0; j < v; ++j) z += std::exp(row[j] - mx);
    lses[r] = mx + std::log(z);
    total += lses[r] - row[golds[r]];
  }
  Tensor out = Tensor::scalar(total / static_cast<double>(k));
  detail::register_op(
      out, {logits},
      [logits, out, golds, lses, k, v]() {
        if (!logits.requires_grad()) return;
        auto& lg = logits.node()->grad;
        const double g = out.grad()[0] / static_cast<double>(k);
        for (std::size_t r = 0; r < k; ++r)
          for (std::size_t j = 0; j < v; ++j) {
            double p = std::exp(logits.at(r, j) - lses[r]);
            lg[r * v + j] += g * (p - (j == golds[r] ? 1.0 : 0.0));
          }
      },
      "cross_entropy_rows");
  return out;
}

// ---- reductions / reshaping ----

inline Tensor sum(const Tensor& a) {
  double s = std::accumulate(a.data().begin(), a.data().end(), 0.0);
  Tensor out = Tensor::scalar(s);
  detail::register_op(
      out, {a},
      [a, out]() {
        if (!a.requires_grad()) return;
        const double g = out.grad()[0];
        for (auto& v : a.node()->grad) v += g;
      },
      "sum");
  return out;
}

inline Tensor mean(const Tensor& a) { return scale(sum(a), 1.0 / static_cast<double>(a.size())); }

// Rows of a 2-D tensor gathered by index; repeated indices accumulate in the
// backward scatter (this is also the embedding lookup).
inline Tensor gather_rows(const Tensor& a, const std::vector<std::size_t>& idx) {
  if (a.rank() != 2) throw TensorError("gather_rows expects rank-2 tensor");
  const std::size_t n = a.dim(1);
  Tensor out = Tensor::zeros({idx.size(), n});
  for (std::size_t i = 0; i < idx.size(); ++i) {
    if (idx[i] >= a.dim(0))
      throw TensorError("gather_rows index " + std::to_string(idx[i]) + " out of range " +
                        std::to_string(a.dim(0)));
    std::copy_n(a.data().begin() + idx[i] * n, n, out.data().begin() + i * n);
  }
  detail::register_op(
      out, {a},
      [a, out, idx, n]() {
        if (!a.requires_grad()) return;
        auto& ag = a.node()->grad;
        const auto& og = out.grad();
        for (std::size_t i = 0; i < idx.size(); ++i)
          for (std::size_t j = 0; j < n; ++j) ag[idx[i] * n + j] += og[i * n + j];
      },
      "gather_rows");
  return out;
}

Tensor reshape(const Tensor& a, Shape shape);

inline Tensor row(const Tensor& a, std::size_t i) {
  return reshape(gather_rows(a, {i}), {a.dim(1)});
}

inline Tensor slice_cols(const Tensor& a, std::size_t start, std::size_t len) {
  if (a.rank() != 2 || start + len > a.dim(1))
    throw TensorError("slice_cols out of range on " + shape_str(a.shape()));
  const std::size_t m = a.dim(0), n = a.dim(1);
  Tensor out = Tensor::zeros({m, len});
  for (std::size_t i = 0; i < m; ++i)
    std::copy_n(a.data().begin() + i * n + start, len, out.data().begin() + i * len);
  detail::register_op(
      out, {a},
      [a, out, start, len, m, n]() {
        if (!a.requires_grad()) return;
        auto& ag = a.node()->grad;
        const auto& og = out.grad();
        for (std::size_t i = 0; i < m; ++i)
          for (std::size_t j = 0; j < len; ++j) ag[i * n + start + j] += og[i * len + j];
      },
      "slice_cols");
  return out;
}

inline Tensor concat_cols(const std::vector<Tensor>& parts) {
  if (parts.empty()) throw TensorError("concat_cols of nothing");
  const std::size_t m = parts[0].dim(0);
  std::size_t total = 0;
  for (auto& p : parts) {
    if (p.rank() != 2 || p.dim(0) != m) throw TensorError("concat_cols row-count mismatch");
    total += p.dim(1);
  }
  Tensor out = Tensor::zeros({m, total});
  std::size_t off = 0;
  for (auto& p : parts) {
    const std::size_t n = p.dim(1);
    for (std::size_t i = 0; i < m; ++i)
      std::copy_n(p.data().begin() + i * n, n, out.data().begin() + i * total + off);
    off += n;
  }
  detail::register_op(
      out, {parts.begin(), parts.end()},
      [parts, out, m, total]() {
        const auto& og = out.grad();
        std::size_t off = 0;
        for (auto& p : parts) {
          const std::size_t n = p.dim(1);
          if (p.requires_grad()) {
            auto& pg = p.node()->grad;
            for (std::size_t i = 0; i < m; ++i)
              for (std::size_t j = 0; j < n; ++j) pg[i * n + j] += og[i * total + off + j];
          }
          off += n;
        }
      },
      "concat_cols");
  return out;
}

inline Tensor concat(const std::vector<Tensor>& parts) {
  if (parts.empty()) throw TensorError("concat of nothing");
  std::size_t total = 0;
  for (auto& p : parts) {
    if (p.rank() != 1) throw TensorError("concat expects 1-D tensors");
    total += p.size();
  }
  Tensor out = Tensor::zeros({total});
  std::size_t off = 0;
  for (auto& p : parts) {
    std::copy(p.data().begin(), p.data().end(), out.data().begin() + off);
    off += p.size();
  }
  detail::register_op(
      out, {parts.begin(), parts.end()},
      [parts, out]() {
        const auto& og = out.grad();
        std::size_t off = 0;
        for (auto& p : parts) {
          if (p.requires_grad()) {
            auto& pg = p.node()->grad;
            for (std::size_t j = 0; j < p.size(); ++j) pg[j] += og[off + j];
          }
          off += p.size();
        }
      },
      "concat");
  return out;
}

inline Tensor stack_scalars(const std::vector<Tensor>& scalars) {
  for (auto& s : scalars)
    if (s.size() != 1) throw TensorError("stack_scalars expects scalar tensors");
  return concat(scalars);
}

// Zero-pads a [m x n] tensor with extra rows up to total_rows.
inline Tensor pad_rows(const Tensor& a, std::size_t total_rows) {
  if (a.rank() != 2 || total_rows < a.dim(0))
    throw TensorError("pad_rows: cannot pad " + shape_str(a.shape()) + " to " + std::to_string(total_rows));
  const std::size_t m = a.dim(0), n = a.dim(1);
  Tensor out = Tensor::zeros({total_rows, n});
  std::copy(a.data().begin(), a.data().end(), out.data().begin());
  detail::register_op(
      out, {a},
      [a, out, m, n]() {
        if (!a.requires_grad()) return;
        auto& ag = a.node()->grad;
        const auto& og = out.grad();
        for (std::size_t i = 0; i < m * n; ++i) ag[i] += og[i];
      },
      "pad_rows");
  return out;
}

// Multiplies each row by 0/1 according to keep; no gradient flows through
// zeroed rows.
inline Tensor zero_rows(const Tensor& a, const std::vector<std::uint8_t>& keep) {
  if (a.rank() != 2 || keep.size() != a.dim(0))
    throw TensorError("zero_rows mask length mismatch on " + shape_str(a.shape()));
  const std::size_t m = a.dim(0), n = a.dim(1);
  Tensor out = Tensor::zeros(a.shape());
  for (std::size_t i = 0; i < m; ++i)
    if (keep[i])
      std::copy_n(a.data().begin() + i * n, n, out.data().begin() + i * n);
  detail::register_op(
      out, {a},
      [a, out, keep, m, n]() {
        if (!a.requires_grad()) return;
        auto& ag = a.node()->grad;
        const auto& og = out.grad();
        for (std::size_t i = 0; i < m; ++i)
          if (keep[i])
            for (std::size_t j = 0; j < n; ++j) ag[i * n + j] += og[i * n + j];
      },
      "zero_rows");
  return out;
}

// Per-column max over the rows marked valid; ties resolve to the first valid
// row. Requires at least one valid row.
inline Tensor masked_max_rows(const Tensor& a, const std::vector<std::uint8_t>& valid) {
  if (a.rank() != 2 || valid.size() != a.dim(0))
    throw TensorError("masked_max_rows mask length mismatch on " + shape_str(a.shape()));
  const std::size_t m = a.dim(0), n = a.dim(1);
  std::vector<std::size_t> arg(n, 0);
  bool any = false;
  Tensor out = Tensor::zeros({n});
  for (std::size_t j = 0; j < n; ++j) {
    double best = -std::numeric_limits<double>::infinity();
    for (std::size_t i = 0; i < m; ++i) {
      if (!valid[i]) continue;
      any = true;
      if (a.at(i, j) > best) {
        best = a.at(i, j);
        arg[j] = i;
      }
    }
    out.data()[j] = best;
  }
  if (!any) throw TensorError("masked_max_rows: no valid rows");
  detail::register_op(
      out, {a},
      [a, out, arg, n]() {
        if (!a.requires_grad()) return;
        auto& ag = a.node()->grad;
        const auto& og = out.grad();
        for (std::size_t j = 0; j < n; ++j) ag[arg[j] * a.dim(1) + j] += og[j];
      },
      "masked_max_rows");
  return out;
}

// Row-wise layer normalization with learned gain/bias over the last dim.
inline Tensor layer_norm(const Tensor& a, const Tensor& gain, const Tensor& bias, double eps = 1e-5) {
  const std::size_t n = a.shape().back();
  if (gain.size() != n || bias.size() != n)
    throw TensorError("layer_norm parameter size mismatch on " + shape_str(a.shape()));
  const std::size_t rows = a.size() / n;
  Tensor out = Tensor::zeros(a.shape());
  std::vector<double> inv_std(rows), means(rows);
  for (std::size_t r = 0; r < rows; ++r) {
    const double* x = a.data().data() + r * n;
    double mu = 0.0;
    for (std::size_t j = 0; j < n; ++j) mu += x[j];
    mu /= static_cast<double>(n);
    double var = 0.0;
    for (std::size_t j = 0; j < n; ++j) var += (x[j] - mu) * (x[j] - mu);
    var /= static_cast<double>(n);
    const double is = 1.0 / std::sqrt(var + eps);
    means[r] = mu;
    inv_std[r] = is;
    for (std::size_t j = 0; j < n; ++j)
      out.data()[r * n + j] = gain.at(j) * (x[j] - mu) * is + bias.at(j);
  }
  detail::register_op(
      out, {a, gain, bias},
      [a, gain, bias, out, means, inv_std, rows, n]() {
        const auto& og = out.grad();
        for (std::size_t r = 0; r < rows; ++r) {
          const double* x = a.data().data() + r * n;
          const double mu = means[r], is = inv_std[r];
          double sum_dxhat = 0.0, sum_dxhat_xhat = 0.0;
          for (std::size_t j = 0; j < n; ++j) {
            const double xhat = (x[j] - mu) * is;
            const double dxhat = og[r * n + j] * gain.at(j);
            sum_dxhat += dxhat;
            sum_dxhat_xhat += dxhat * xhat;
            if (gain.requires_grad()) gain.node()->grad[j] += og[r * n + j] * xhat;
            if (bias.requires_grad()) bias.node()->grad[j] += og[r * n + j];
          }
          if (a.requires_grad()) {
            auto& ag = a.node()->grad;
            for (std::size_t j = 0; j < n; ++j) {
              const double xhat = (x[j] - mu) * is;
              const double dxhat = og[r * n + j] * gain.at(j);
              ag[r * n + j] += is * (dxhat - sum_dxhat / n - xhat * sum_dxhat_xhat / n);
            }
          }
        }
      },
      "layer_norm");
  return out;
}

// Inverted dropout; the mask is drawn from rng so runs are seed-reproducible.
inline Tensor dropout(const Tensor& a, double rate, std::mt19937_64& rng) {
  if (rate <= 0.0) return a;
  if (rate >= 1.0) throw TensorError("dropout rate must be < 1");
  std::vector<std::uint8_t> keep(a.size());
  std::uniform_real_distribution<double> u(0.0, 1.0);
  for (auto& k : keep) k = u(rng) >= rate ? 1 : 0;
  const double inv = 1.0 / (1.0 - rate);
  Tensor out = Tensor::zeros(a.shape());
  for (std::size_t i = 0; i < a.size(); ++i) out.data()[i] = keep[i] ? a.data()[i] * inv : 0.0;
  detail::register_op(
      out, {a},
      [a, out, keep, inv]() {
        if (!a.requires_grad()) return;
        auto& ag = a.node()->grad;
        const auto& og = out.grad();
        for (std::size_t i = 0; i < og.size(); ++i)
          if (keep[i]) ag[i] += og[i] * inv;
      },
      "dropout");
  return out;
}

// Same data, new shape (sizes must agree).
inline Tensor reshape(const Tensor& a, Shape shape) {
  if (shape_size(shape) != a.size())
    throw TensorError("reshape " + shape_str(a.shape()) + " -> " + shape_str(shape) + " size mismatch");
  Tensor out = Tensor::zeros(std::move(shape));
  out.data() = a.data();
  detail::register_op(
      out, {a},
      [a, out]() {
        if (!a.requires_grad()) return;
        auto& ag = a.node()->grad;
        const auto& og = out.grad();
        for (std::size_t i = 0; i < og.size(); ++i) ag[i] += og[i];
      },
      "reshape");
  return out;
}

// y = x W + b for a 1-D x of size in, W [in x out], b [out].
inline Tensor affine(const Tensor& x, const Tensor& w, const Tensor& b) {
  if (x.rank() != 1) throw TensorError("affine expects a 1-D input");
  return reshape(add(matmul(reshape(x, {1, x.size()}), w), b), {w.dim(1)});
}

}  // namespace mcqa
