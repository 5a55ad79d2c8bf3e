#pragma once

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <cstdint>
#include <functional>
#include <memory>
#include <numeric>
#include <optional>
#include <span>
#include <sstream>
#include <stdexcept>
#include <string>
#include <utility>
#include <vector>

#include "adt/rng.hpp"

namespace adt {

using Shape = std::vector<std::size_t>;

class ShapeError : public std::invalid_argument {
 public:
  using std::invalid_argument::invalid_argument;
};

class NumericError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

class TapeError : public std::logic_error {
 public:
  using std::logic_error::logic_error;
};

inline std::size_t numel(const Shape& shape) {
  return std::accumulate(shape.begin(), shape.end(), std::size_t{1}, std::multiplies<>());
}

inline std::string to_string(const Shape& shape) {
  std::ostringstream os;
  os << '[';
  for (std::size_t i = 0; i < shape.size(); ++i) os << (i ? ", " : "") << shape[i];
  os << ']';
  return os.str();
}

class Tape;

namespace detail {

struct Node {
  Shape shape;
  std::vector<double> value;
  std::vector<double> grad;
  bool requires_grad = false;
  bool leaf = true;
  const Tape* tape = nullptr;
  std::vector<std::shared_ptr<Node>> parents;
  std::function<void(Node&)> backward;

  std::vector<double>& ensure_grad() {
    if (grad.size() != value.size()) grad.assign(value.size(), 0.0);
    return grad;
  }
};

}  // namespace detail

// Dense row-major array of doubles. Copies share the underlying node, so a
// parameter Tensor held by a model and by an optimizer is the same object.
class Tensor {
 public:
  Tensor() = default;

  static Tensor constant(Shape shape, std::vector<double> values) {
    return Tensor(make_node(std::move(shape), std::move(values), false));
  }
  static Tensor parameter(Shape shape, std::vector<double> values) {
    return Tensor(make_node(std::move(shape), std::move(values), true));
  }
  static Tensor zeros(Shape shape, bool requires_grad = false) {
    const std::size_t n = numel(shape);
    return Tensor(make_node(std::move(shape), std::vector<double>(n, 0.0), requires_grad));
  }
  static Tensor scalar(double v) { return constant({}, {v}); }

  bool defined() const { return node_ != nullptr; }
  const Shape& shape() const { return node().shape; }
  std::size_t size() const { return node().value.size(); }
  std::size_t dim(std::size_t axis) const {
    if (axis >= shape().size()) throw ShapeError("dim: axis out of range for shape " + to_string(shape()));
    return shape()[axis];
  }
  std::size_t rank() const { return shape().size(); }
  bool requires_grad() const { return node().requires_grad; }
  bool is_leaf() const { return node().leaf; }

  std::span<const double> data() const { return node().value; }
  // Mutation is for leaves only (optimizers, checkpoint loading).
  std::span<double> mutable_data() {
    if (!node().leaf) throw TapeError("mutable_data on a non-leaf tensor");
    return node_->value;
  }
  bool has_grad() const { return node().grad.size() == node().value.size() && !node().grad.empty(); }
  std::span<const double> grad() const { return node().grad; }
  std::span<double> mutable_grad() { return node_->ensure_grad(); }
  void zero_grad() {
    if (node_) std::fill(node_->grad.begin(), node_->grad.end(), 0.0);
  }

  double item() const {
    if (size() != 1) throw ShapeError("item() on tensor of shape " + to_string(shape()));
    return node().value[0];
  }
  double operator[](std::size_t i) const { return node().value.at(i); }
  double at(std::size_t row, std::size_t col) const {
    if (rank() != 2) throw ShapeError("at(row, col) on tensor of shape " + to_string(shape()));
    return node().value.at(row * shape()[1] + col);
  }

  bool same_node(const Tensor& other) const { return node_ == other.node_; }

 private:
  friend class Tape;
  explicit Tensor(std::shared_ptr<detail::Node> n) : node_(std::move(n)) {}

  static std::shared_ptr<detail::Node> make_node(Shape shape, std::vector<double> values, bool requires_grad) {
    if (numel(shape) != values.size()) {
      throw ShapeError("tensor: shape " + to_string(shape) + " holds " + std::to_string(numel(shape)) +
                       " values, got " + std::to_string(values.size()));
    }
    for (double v : values) {
      if (!std::isfinite(v)) throw NumericError("tensor: non-finite value in input");
    }
    auto n = std::make_shared<detail::Node>();
    n->shape = std::move(shape);
    n->value = std::move(values);
    n->requires_grad = requires_grad;
    return n;
  }

  const detail::Node& node() const {
    if (!node_) throw TapeError("use of an undefined tensor");
    return *node_;
  }

  std::shared_ptr<detail::Node> node_;
};

// Define-by-run recording of primitive operations. A tape is built for one
// forward pass and consumed by exactly one backward().
class Tape {
 public:
  Tape() = default;
  // Training mode enables dropout, drawing masks from `dropout_rng`.
  Tape(bool training, Rng* dropout_rng) : training_(training), dropout_rng_(dropout_rng) {}
  Tape(const Tape&) = delete;
  Tape& operator=(const Tape&) = delete;

  bool training() const { return training_; }
  std::size_t size() const { return nodes_.size(); }
  bool consumed() const { return consumed_; }

  // ----- elementwise -----

  Tensor add(const Tensor& a, const Tensor& b) { return binary("add", a, b, BinaryKind::Add); }
  Tensor sub(const Tensor& a, const Tensor& b) { return binary("sub", a, b, BinaryKind::Sub); }
  Tensor mul(const Tensor& a, const Tensor& b) { return binary("mul", a, b, BinaryKind::Mul); }

  Tensor scale(const Tensor& a, double c) {
    check_inputs("scale", {a});
    std::vector<double> out(a.data().begin(), a.data().end());
    for (double& v : out) v *= c;
    return record("scale", a.shape(), std::move(out), {a}, [c](detail::Node& self) {
      auto& ga = self.parents[0]->ensure_grad();
      for (std::size_t i = 0; i < ga.size(); ++i) ga[i] += c * self.grad[i];
    });
  }

  Tensor add_scalar(const Tensor& a, double c) {
    check_inputs("add_scalar", {a});
    std::vector<double> out(a.data().begin(), a.data().end());
    for (double& v : out) v += c;
    return record("add_scalar", a.shape(), std::move(out), {a}, [](detail::Node& self) {
      auto& ga = self.parents[0]->ensure_grad();
      for (std::size_t i = 0; i < ga.size(); ++i) ga[i] += self.grad[i];
    });
  }

  Tensor exp(const Tensor& a) {
    check_inputs("exp", {a});
    std::vector<double> out(a.size());
    for (std::size_t i = 0; i < out.size(); ++i) out[i] = std::exp(a.data()[i]);
    return record("exp", a.shape(), std::move(out), {a}, [](detail::Node& self) {
      auto& ga = self.parents[0]->ensure_grad();
      for (std::size_t i = 0; i < ga.size(); ++i) ga[i] += self.grad[i] * self.value[i];
    });
  }

  Tensor log(const Tensor& a) {
    check_inputs("log", {a});
    std::vector<double> out(a.size());
    for (std::size_t i = 0; i < out.size(); ++i) {
      if (a.data()[i] <= 0.0) throw NumericError("log: non-positive input " + std::to_string(a.data()[i]));
      out[i] = std::log(a.data()[i]);
    }
    return record("log", a.shape(), std::move(out), {a}, [](detail::Node& self) {
      auto& ga = self.parents[0]->ensure_grad();
      const auto& x = self.parents[0]->value;
      for (std::size_t i = 0; i < ga.size(); ++i) ga[i] += self.grad[i] / x[i];
    });
  }

  Tensor gelu(const Tensor& a) {
    check_inputs("gelu", {a});
    constexpr double inv_sqrt2 = 0.70710678118654752440;
    std::vector<double> out(a.size());
    for (std::size_t i = 0; i < out.size(); ++i) {
      const double x = a.data()[i];
      out[i] = 0.5 * x * (1.0 + std::erf(x * inv_sqrt2));
    }
    return record("gelu", a.shape(), std::move(out), {a}, [](detail::Node& self) {
      constexpr double inv_sqrt2 = 0.70710678118654752440;
      constexpr double inv_sqrt_2pi = 0.39894228040143267794;
      auto& ga = self.parents[0]->ensure_grad();
      const auto& xs = self.parents[0]->value;
      for (std::size_t i = 0; i < ga.size(); ++i) {
        const double x = xs[i];
        const double d = 0.5 * (1.0 + std::erf(x * inv_sqrt2)) + x * inv_sqrt_2pi * std::exp(-0.5 * x * x);
        ga[i] += self.grad[i] * d;
      }
    });
  }

  Tensor relu(const Tensor& a) {
    check_inputs("relu", {a});
    std::vector<double> out(a.size());
    for (std::size_t i = 0; i < out.size(); ++i) out[i] = a.data()[i] > 0.0 ? a.data()[i] : 0.0;
    return record("relu", a.shape(), std::move(out), {a}, [](detail::Node& self) {
      auto& ga = self.parents[0]->ensure_grad();
      const auto& xs = self.parents[0]->value;
      for (std::size_t i = 0; i < ga.size(); ++i) {
        if (xs[i] > 0.0) ga[i] += self.grad[i];
      }
    });
  }

  // Positions where mask[i] is true are replaced by `value`; their gradient is zero.
  Tensor masked_fill(const Tensor& a, const std::vector<bool>& mask, double value) {
    check_inputs("masked_fill", {a});
    if (mask.size() != a.size()) {
      throw ShapeError("masked_fill: mask of " + std::to_string(mask.size()) + " entries vs tensor " +
                       to_string(a.shape()));
    }
    if (!std::isfinite(value)) throw NumericError("masked_fill: non-finite fill value");
    std::vector<double> out(a.data().begin(), a.data().end());
    for (std::size_t i = 0; i < out.size(); ++i) {
      if (mask[i]) out[i] = value;
    }
    return record("masked_fill", a.shape(), std::move(out), {a}, [mask](detail::Node& self) {
      auto& ga = self.parents[0]->ensure_grad();
      for (std::size_t i = 0; i < ga.size(); ++i) {
        if (!mask[i]) ga[i] += self.grad[i];
      }
    });
  }

  // Inverted dropout; identity outside training mode or when p == 0.
  Tensor dropout(const Tensor& a, double p) {
    if (!training_ || p <= 0.0) return a;
    if (p >= 1.0) throw std::invalid_argument("dropout: p must be < 1");
    if (dropout_rng_ == nullptr) throw TapeError("dropout: training tape has no rng");
    check_inputs("dropout", {a});
    std::vector<double> keep(a.size());
    const double inv = 1.0 / (1.0 - p);
    for (double& k : keep) k = uniform01(*dropout_rng_) < p ? 0.0 : inv;
    std::vector<double> out(a.size());
    for (std::size_t i = 0; i < out.size(); ++i) out[i] = a.data()[i] * keep[i];
    return record("dropout", a.shape(), std::move(out), {a}, [keep = std::move(keep)](detail::Node& self) {
      auto& ga = self.parents[0]->ensure_grad();
      for (std::size_t i = 0; i < ga.size(); ++i) ga[i] += self.grad[i] * keep[i];
    });
  }

  // ----- linear algebra & layout -----

  Tensor matmul(const Tensor& a, const Tensor& b) {
    check_inputs("matmul", {a, b});
    if (a.rank() != 2 || b.rank() != 2 || a.shape()[1] != b.shape()[0]) {
      throw ShapeError("matmul: incompatible shapes " + to_string(a.shape()) + " and " + to_string(b.shape()));
    }
    const std::size_t n = a.shape()[0], k = a.shape()[1], m = b.shape()[1];
    std::vector<double> out(n * m, 0.0);
    const double* pa = a.data().data();
    const double* pb = b.data().data();
    for (std::size_t i = 0; i < n; ++i) {
      double* row = out.data() + i * m;
      for (std::size_t p = 0; p < k; ++p) {
        const double av = pa[i * k + p];
        const double* brow = pb + p * m;
        for (std::size_t j = 0; j < m; ++j) row[j] += av * brow[j];
      }
    }
    return record("matmul", {n, m}, std::move(out), {a, b}, [n, k, m](detail::Node& self) {
      auto& A = *self.parents[0];
      auto& B = *self.parents[1];
      const double* g = self.grad.data();
      if (A.requires_grad) {
        auto& ga = A.ensure_grad();
        for (std::size_t i = 0; i < n; ++i) {
          for (std::size_t p = 0; p < k; ++p) {
            const double* brow = B.value.data() + p * m;
            const double* grow = g + i * m;
            double s = 0.0;
            for (std::size_t j = 0; j < m; ++j) s += grow[j] * brow[j];
            ga[i * k + p] += s;
          }
        }
      }
      if (B.requires_grad) {
        auto& gb = B.ensure_grad();
        for (std::size_t i = 0; i < n; ++i) {
          const double* grow = g + i * m;
          for (std::size_t p = 0; p < k; ++p) {
            const double av = A.value[i * k + p];
            double* gbrow = gb.data() + p * m;
            for (std::size_t j = 0; j < m; ++j) gbrow[j] += av * grow[j];
          }
        }
      }
    });
  }

  Tensor transpose(const Tensor& a) {
    check_inputs("transpose", {a});
    if (a.rank() != 2) throw ShapeError("transpose: expected rank 2, got " + to_string(a.shape()));
    const std::size_t r = a.shape()[0], c = a.shape()[1];
    std::vector<double> out(r * c);
    for (std::size_t i = 0; i < r; ++i)
      for (std::size_t j = 0; j < c; ++j) out[j * r + i] = a.data()[i * c + j];
    return record("transpose", {c, r}, std::move(out), {a}, [r, c](detail::Node& self) {
      auto& ga = self.parents[0]->ensure_grad();
      for (std::size_t i = 0; i < r; ++i)
        for (std::size_t j = 0; j < c; ++j) ga[i * c + j] += self.grad[j * r + i];
    });
  }

  Tensor reshape(const Tensor& a, Shape shape) {
    check_inputs("reshape", {a});
    if (numel(shape) != a.size()) {
      throw ShapeError("reshape: cannot view " + to_string(a.shape()) + " as " + to_string(shape));
    }
    std::vector<double> out(a.data().begin(), a.data().end());
    return record("reshape", std::move(shape), std::move(out), {a}, [](detail::Node& self) {
      auto& ga = self.parents[0]->ensure_grad();
      for (std::size_t i = 0; i < ga.size(); ++i) ga[i] += self.grad[i];
    });
  }

  // Concatenation along `axis` (defaults to the last axis).
  Tensor concat(const std::vector<Tensor>& parts, std::optional<std::size_t> axis_opt = std::nullopt) {
    if (parts.empty()) throw ShapeError("concat: no inputs");
    check_inputs("concat", parts);
    const Shape& first = parts[0].shape();
    if (first.empty()) throw ShapeError("concat: scalar inputs");
    const std::size_t axis = axis_opt.value_or(first.size() - 1);
    if (axis >= first.size()) throw ShapeError("concat: axis out of range for " + to_string(first));
    Shape out_shape = first;
    out_shape[axis] = 0;
    for (const auto& p : parts) {
      const Shape& s = p.shape();
      bool ok = s.size() == first.size();
      for (std::size_t d = 0; ok && d < s.size(); ++d) ok = d == axis || s[d] == first[d];
      if (!ok) throw ShapeError("concat: incompatible shapes " + to_string(first) + " and " + to_string(s));
      out_shape[axis] += s[axis];
    }
    const std::size_t outer = numel(Shape(first.begin(), first.begin() + static_cast<long>(axis)));
    const std::size_t inner = numel(Shape(first.begin() + static_cast<long>(axis) + 1, first.end()));
    std::vector<std::size_t> widths;
    for (const auto& p : parts) widths.push_back(p.shape()[axis] * inner);
    const std::size_t out_width = out_shape[axis] * inner;
    std::vector<double> out(numel(out_shape));
    std::size_t offset = 0;
    for (std::size_t pi = 0; pi < parts.size(); ++pi) {
      const auto src = parts[pi].data();
      for (std::size_t o = 0; o < outer; ++o)
        std::copy_n(src.begin() + static_cast<long>(o * widths[pi]), widths[pi],
                    out.begin() + static_cast<long>(o * out_width + offset));
      offset += widths[pi];
    }
    return record("concat", out_shape, std::move(out), parts, [outer, widths, out_width](detail::Node& self) {
      std::size_t off = 0;
      for (std::size_t pi = 0; pi < self.parents.size(); ++pi) {
        auto& parent = *self.parents[pi];
        if (parent.requires_grad) {
          auto& gp = parent.ensure_grad();
          for (std::size_t o = 0; o < outer; ++o)
            for (std::size_t i = 0; i < widths[pi]; ++i) gp[o * widths[pi] + i] += self.grad[o * out_width + off + i];
        }
        off += widths[pi];
      }
    });
  }

  // Elements [begin, end) along `axis`.
  Tensor slice(const Tensor& a, std::size_t axis, std::size_t begin, std::size_t end) {
    check_inputs("slice", {a});
    const Shape& s = a.shape();
    if (axis >= s.size() || begin > end || end > s[axis]) {
      throw ShapeError("slice: range [" + std::to_string(begin) + ", " + std::to_string(end) + ") on axis " +
                       std::to_string(axis) + " of " + to_string(s));
    }
    Shape out_shape = s;
    out_shape[axis] = end - begin;
    const std::size_t outer = numel(Shape(s.begin(), s.begin() + static_cast<long>(axis)));
    const std::size_t inner = numel(Shape(s.begin() + static_cast<long>(axis) + 1, s.end()));
    const std::size_t in_width = s[axis] * inner;
    const std::size_t out_width = (end - begin) * inner;
    const std::size_t start = begin * inner;
    std::vector<double> out(outer * out_width);
    for (std::size_t o = 0; o < outer; ++o)
      std::copy_n(a.data().begin() + static_cast<long>(o * in_width + start), out_width,
                  out.begin() + static_cast<long>(o * out_width));
    return record("slice", out_shape, std::move(out), {a}, [outer, in_width, out_width, start](detail::Node& self) {
      auto& ga = self.parents[0]->ensure_grad();
      for (std::size_t o = 0; o < outer; ++o)
        for (std::size_t i = 0; i < out_width; ++i) ga[o * in_width + start + i] += self.grad[o * out_width + i];
    });
  }

  // Row gather: out[i, :] = table[indices[i], :]. Gradients scatter-add into the table.
  Tensor embedding(const Tensor& table, const std::vector<std::size_t>& indices) {
    check_inputs("embedding", {table});
    if (table.rank() != 2) throw ShapeError("embedding: table must be rank 2, got " + to_string(table.shape()));
    const std::size_t rows = table.shape()[0], width = table.shape()[1];
    std::vector<double> out(indices.size() * width);
    for (std::size_t i = 0; i < indices.size(); ++i) {
      if (indices[i] >= rows) {
        throw ShapeError("embedding: index " + std::to_string(indices[i]) + " out of range for table " +
                         to_string(table.shape()));
      }
      std::copy_n(table.data().begin() + static_cast<long>(indices[i] * width), width,
                  out.begin() + static_cast<long>(i * width));
    }
    return record("embedding", {indices.size(), width}, std::move(out), {table}, [indices, width](detail::Node& self) {
      auto& gt = self.parents[0]->ensure_grad();
      for (std::size_t i = 0; i < indices.size(); ++i)
        for (std::size_t j = 0; j < width; ++j) gt[indices[i] * width + j] += self.grad[i * width + j];
    });
  }

  // out[i] = x[i, indices[i]] for a rank-2 x.
  Tensor pick(const Tensor& x, const std::vector<std::size_t>& indices) {
    check_inputs("pick", {x});
    if (x.rank() != 2 || x.shape()[0] != indices.size()) {
      throw ShapeError("pick: tensor " + to_string(x.shape()) + " with " + std::to_string(indices.size()) +
                       " indices");
    }
    const std::size_t cols = x.shape()[1];
    std::vector<double> out(indices.size());
    for (std::size_t i = 0; i < indices.size(); ++i) {
      if (indices[i] >= cols) throw ShapeError("pick: index " + std::to_string(indices[i]) + " >= " + std::to_string(cols));
      out[i] = x.data()[i * cols + indices[i]];
    }
    return record("pick", {indices.size()}, std::move(out), {x}, [indices, cols](detail::Node& self) {
      auto& gx = self.parents[0]->ensure_grad();
      for (std::size_t i = 0; i < indices.size(); ++i) gx[i * cols + indices[i]] += self.grad[i];
    });
  }

  // x [n, d] + bias [d], the one explicit row broadcast.
  Tensor add_rowwise(const Tensor& x, const Tensor& bias) {
    check_inputs("add_rowwise", {x, bias});
    if (x.rank() != 2 || bias.rank() != 1 || bias.shape()[0] != x.shape()[1]) {
      throw ShapeError("add_rowwise: shapes " + to_string(x.shape()) + " and " + to_string(bias.shape()));
    }
    const std::size_t n = x.shape()[0], d = x.shape()[1];
    std::vector<double> out(x.data().begin(), x.data().end());
    for (std::size_t i = 0; i < n; ++i)
      for (std::size_t j = 0; j < d; ++j) out[i * d + j] += bias.data()[j];
    return record("add_rowwise", x.shape(), std::move(out), {x, bias}, [n, d](detail::Node& self) {
      auto& X = *self.parents[0];
      auto& B = *self.parents[1];
      if (X.requires_grad) {
        auto& gx = X.ensure_grad();
        for (std::size_t i = 0; i < gx.size(); ++i) gx[i] += self.grad[i];
      }
      if (B.requires_grad) {
        auto& gb = B.ensure_grad();
        for (std::size_t i = 0; i < n; ++i)
          for (std::size_t j = 0; j < d; ++j) gb[j] += self.grad[i * d + j];
      }
    });
  }

  // ----- normalizations -----

  Tensor softmax(const Tensor& a) {
    check_inputs("softmax", {a});
    const auto [rows, cols] = rows_cols("softmax", a);
    std::vector<double> out(a.size());
    for (std::size_t r = 0; r < rows; ++r) {
      const double* x = a.data().data() + r * cols;
      double* y = out.data() + r * cols;
      const double mx = *std::max_element(x, x + cols);
      double z = 0.0;
      for (std::size_t c = 0; c < cols; ++c) z += (y[c] = std::exp(x[c] - mx));
      for (std::size_t c = 0; c < cols; ++c) y[c] /= z;
    }
    return record("softmax", a.shape(), std::move(out), {a}, [rows, cols](detail::Node& self) {
      auto& ga = self.parents[0]->ensure_grad();
      for (std::size_t r = 0; r < rows; ++r) {
        const double* y = self.value.data() + r * cols;
        const double* g = self.grad.data() + r * cols;
        double dot = 0.0;
        for (std::size_t c = 0; c < cols; ++c) dot += g[c] * y[c];
        for (std::size_t c = 0; c < cols; ++c) ga[r * cols + c] += y[c] * (g[c] - dot);
      }
    });
  }

  Tensor log_softmax(const Tensor& a) {
    check_inputs("log_softmax", {a});
    const auto [rows, cols] = rows_cols("log_softmax", a);
    std::vector<double> out(a.size());
    for (std::size_t r = 0; r < rows; ++r) {
      const double* x = a.data().data() + r * cols;
      double* y = out.data() + r * cols;
      const double mx = *std::max_element(x, x + cols);
      double z = 0.0;
      for (std::size_t c = 0; c < cols; ++c) z += std::exp(x[c] - mx);
      const double lz = mx + std::log(z);
      for (std::size_t c = 0; c < cols; ++c) y[c] = x[c] - lz;
    }
    return record("log_softmax", a.shape(), std::move(out), {a}, [rows, cols](detail::Node& self) {
      auto& ga = self.parents[0]->ensure_grad();
      for (std::size_t r = 0; r < rows; ++r) {
        const double* y = self.value.data() + r * cols;
        const double* g = self.grad.data() + r * cols;
        double gs = 0.0;
        for (std::size_t c = 0; c < cols; ++c) gs += g[c];
        for (std::size_t c = 0; c < cols; ++c) ga[r * cols + c] += g[c] - std::exp(y[c]) * gs;
      }
    });
  }

  // Normalizes each row of the last axis, then applies gamma * xhat + beta.
  Tensor layer_norm(const Tensor& a, const Tensor& gamma, const Tensor& beta, double eps = 1e-5) {
    check_inputs("layer_norm", {a, gamma, beta});
    const auto [rows, cols] = rows_cols("layer_norm", a);
    if (gamma.shape() != Shape{cols} || beta.shape() != Shape{cols}) {
      throw ShapeError("layer_norm: input " + to_string(a.shape()) + " with gamma " + to_string(gamma.shape()) +
                       " and beta " + to_string(beta.shape()));
    }
    std::vector<double> xhat(a.size()), inv_std(rows), out(a.size());
    for (std::size_t r = 0; r < rows; ++r) {
      const double* x = a.data().data() + r * cols;
      double mean = 0.0;
      for (std::size_t c = 0; c < cols; ++c) mean += x[c];
      mean /= static_cast<double>(cols);
      double var = 0.0;
      for (std::size_t c = 0; c < cols; ++c) var += (x[c] - mean) * (x[c] - mean);
      var /= static_cast<double>(cols);
      inv_std[r] = 1.0 / std::sqrt(var + eps);
      for (std::size_t c = 0; c < cols; ++c) {
        xhat[r * cols + c] = (x[c] - mean) * inv_std[r];
        out[r * cols + c] = xhat[r * cols + c] * gamma.data()[c] + beta.data()[c];
      }
    }
    return record("layer_norm", a.shape(), std::move(out), {a, gamma, beta},
                  [rows, cols, xhat = std::move(xhat), inv_std = std::move(inv_std)](detail::Node& self) {
                    auto& X = *self.parents[0];
                    auto& G = *self.parents[1];
                    auto& B = *self.parents[2];
                    const double n = static_cast<double>(cols);
                    for (std::size_t r = 0; r < rows; ++r) {
                      const double* g = self.grad.data() + r * cols;
                      const double* xh = xhat.data() + r * cols;
                      if (G.requires_grad) {
                        auto& gg = G.ensure_grad();
                        for (std::size_t c = 0; c < cols; ++c) gg[c] += g[c] * xh[c];
                      }
                      if (B.requires_grad) {
                        auto& gb = B.ensure_grad();
                        for (std::size_t c = 0; c < cols; ++c) gb[c] += g[c];
                      }
                      if (X.requires_grad) {
                        auto& gx = X.ensure_grad();
                        double mean_d = 0.0, mean_dx = 0.0;
                        for (std::size_t c = 0; c < cols; ++c) {
                          const double d = g[c] * G.value[c];
                          mean_d += d;
                          mean_dx += d * xh[c];
                        }
                        mean_d /= n;
                        mean_dx /= n;
                        for (std::size_t c = 0; c < cols; ++c) {
                          const double d = g[c] * G.value[c];
                          gx[r * cols + c] += inv_std[r] * (d - mean_d - xh[c] * mean_dx);
                        }
                      }
                    }
                  });
  }

  // ----- reductions (to a scalar) -----

  Tensor sum(const Tensor& a) {
    check_inputs("sum", {a});
    double s = 0.0;
    for (double v : a.data()) s += v;
    return record("sum", {}, {s}, {a}, [](detail::Node& self) {
      auto& ga = self.parents[0]->ensure_grad();
      for (double& g : ga) g += self.grad[0];
    });
  }

  Tensor mean(const Tensor& a) {
    if (a.size() == 0) throw ShapeError("mean: empty tensor");
    return scale(sum(a), 1.0 / static_cast<double>(a.size()));
  }

  // ----- backward -----

  void backward(const Tensor& loss) {
    if (consumed_) throw TapeError("backward: tape already consumed");
    const detail::Node& root = loss.node();
    if (root.value.size() != 1) throw TapeError("backward: loss must be a scalar, got shape " + to_string(root.shape));
    if (root.tape != this) throw TapeError("backward: loss was not produced on this tape");
    consumed_ = true;
    if (!root.requires_grad) return;
    loss.node_->ensure_grad()[0] = 1.0;
    for (auto it = nodes_.rbegin(); it != nodes_.rend(); ++it) {
      detail::Node& n = **it;
      if (n.backward && !n.grad.empty()) n.backward(n);
    }
    for (auto& n : nodes_) {
      n->backward = nullptr;
      n->parents.clear();
    }
  }

 private:
  enum class BinaryKind { Add, Sub, Mul };

  Tensor binary(const char* op, const Tensor& a, const Tensor& b, BinaryKind kind) {
    check_inputs(op, {a, b});
    const bool same = a.shape() == b.shape();
    const bool a_scalar = !same && a.size() == 1;
    const bool b_scalar = !same && !a_scalar && b.size() == 1;
    if (!same && !a_scalar && !b_scalar) {
      throw ShapeError(std::string(op) + ": shape mismatch " + to_string(a.shape()) + " vs " + to_string(b.shape()));
    }
    const Shape out_shape = a_scalar ? b.shape() : a.shape();
    const std::size_t n = numel(out_shape);
    std::vector<double> out(n);
    const auto av = a.data();
    const auto bv = b.data();
    for (std::size_t i = 0; i < n; ++i) {
      const double x = av[a_scalar ? 0 : i];
      const double y = bv[b_scalar ? 0 : i];
      out[i] = kind == BinaryKind::Add ? x + y : kind == BinaryKind::Sub ? x - y : x * y;
    }
    return record(op, out_shape, std::move(out), {a, b}, [kind, a_scalar, b_scalar, n](detail::Node& self) {
      auto& A = *self.parents[0];
      auto& B = *self.parents[1];
      if (A.requires_grad) {
        auto& ga = A.ensure_grad();
        for (std::size_t i = 0; i < n; ++i) {
          const double d = kind == BinaryKind::Mul ? B.value[b_scalar ? 0 : i] : 1.0;
          ga[a_scalar ? 0 : i] += self.grad[i] * d;
        }
      }
      if (B.requires_grad) {
        auto& gb = B.ensure_grad();
        for (std::size_t i = 0; i < n; ++i) {
          const double d = kind == BinaryKind::Mul ? A.value[a_scalar ? 0 : i] : kind == BinaryKind::Sub ? -1.0 : 1.0;
          gb[b_scalar ? 0 : i] += self.grad[i] * d;
        }
      }
    });
  }

  static std::pair<std::size_t, std::size_t> rows_cols(const char* op, const Tensor& a) {
    if (a.rank() == 0 || a.shape().back() == 0) throw ShapeError(std::string(op) + ": needs a non-empty last axis");
    const std::size_t cols = a.shape().back();
    return {a.size() / cols, cols};
  }

  void check_inputs(const char* op, const std::vector<Tensor>& inputs) const {
    if (consumed_) throw TapeError(std::string(op) + ": tape already consumed");
    for (const auto& t : inputs) {
      const auto& n = t.node();
      if (n.tape != nullptr && n.tape != this) throw TapeError(std::string(op) + ": input recorded on another tape");
      for (double v : n.value) {
        if (!std::isfinite(v)) throw NumericError(std::string(op) + ": non-finite input");
      }
    }
  }

  Tensor record(const char* op, Shape shape, std::vector<double> value, const std::vector<Tensor>& inputs,
                std::function<void(detail::Node&)> backward) {
    for (double v : value) {
      if (!std::isfinite(v)) throw NumericError(std::string(op) + ": produced a non-finite value");
    }
    auto n = std::make_shared<detail::Node>();
    n->shape = std::move(shape);
    n->value = std::move(value);
    n->leaf = false;
    n->tape = this;
    for (const auto& t : inputs) {
      n->requires_grad = n->requires_grad || t.node_->requires_grad;
      n->parents.push_back(t.node_);
    }
    if (n->requires_grad) n->backward = std::move(backward);
    else n->parents.clear();
    nodes_.push_back(n);
    return Tensor(n);
  }

  std::vector<std::shared_ptr<detail::Node>> nodes_;
  bool consumed_ = false;
  bool training_ = false;
  Rng* dropout_rng_ = nullptr;
};

}  // namespace adt
