#include "dsc/tensor.hpp"

#include <algorithm>
#include <atomic>
#include <cmath>
#include <cstring>
#include <limits>
#include <numeric>
#include <sstream>
#include <stdexcept>

namespace dsc {

namespace {

std::atomic<std::uint64_t> g_next_node_id{1};

void require(bool cond, const std::string& msg) {
  if (!cond) throw std::invalid_argument(msg);
}

void require_matrix(const Tensor& t, const char* op, const char* role) {
  if (!t.defined() || t.rank() != 2) {
    std::ostringstream os;
    os << op << ": " << role << " must be a rank-2 tensor, got "
       << (t.defined() ? shape_to_string(t.shape()) : std::string("<empty>"));
    throw std::invalid_argument(os.str());
  }
}

constexpr double kInvSqrt2 = 0.70710678118654752440;
constexpr double kInvSqrt2Pi = 0.39894228040143267794;
constexpr double kLogClamp = 1e-12;
constexpr double kLayerNormEps = 1e-5;

}  // namespace

std::size_t shape_numel(const Shape& shape) {
  std::size_t n = 1;
  for (std::size_t e : shape) n *= e;
  return n;
}

std::string shape_to_string(const Shape& shape) {
  if (shape.empty()) return "scalar";
  std::ostringstream os;
  for (std::size_t i = 0; i < shape.size(); ++i) {
    if (i) os << "x";
    os << shape[i];
  }
  return os.str();
}

namespace detail {

std::shared_ptr<TensorNode> make_node(Shape shape, std::vector<double> value,
                                      bool requires_grad) {
  if (shape.size() > 3) {
    throw std::invalid_argument("tensor rank " + std::to_string(shape.size()) +
                                " exceeds the supported maximum of 3");
  }
  for (std::size_t e : shape) {
    if (e == 0) throw std::invalid_argument("tensor extents must be positive");
  }
  if (shape_numel(shape) != value.size()) {
    throw std::invalid_argument("tensor data length " + std::to_string(value.size()) +
                                " does not match shape " + shape_to_string(shape));
  }
  auto node = std::make_shared<TensorNode>();
  node->shape = std::move(shape);
  node->value = std::move(value);
  node->requires_grad = requires_grad;
  node->id = g_next_node_id.fetch_add(1, std::memory_order_relaxed);
  return node;
}

}  // namespace detail

Tensor Tensor::zeros(Shape shape, bool requires_grad) {
  std::vector<double> v(shape_numel(shape), 0.0);
  return Tensor(detail::make_node(std::move(shape), std::move(v), requires_grad));
}

Tensor Tensor::full(Shape shape, double fill, bool requires_grad) {
  std::vector<double> v(shape_numel(shape), fill);
  return Tensor(detail::make_node(std::move(shape), std::move(v), requires_grad));
}

Tensor Tensor::scalar(double v, bool requires_grad) {
  return Tensor(detail::make_node({}, {v}, requires_grad));
}

Tensor Tensor::matrix(std::size_t rows, std::size_t cols, std::vector<double> data,
                      bool requires_grad) {
  return Tensor(detail::make_node({rows, cols}, std::move(data), requires_grad));
}

Tensor Tensor::from_rows(const std::vector<std::vector<double>>& rows, bool requires_grad) {
  if (rows.empty()) throw std::invalid_argument("from_rows: need at least one row");
  const std::size_t cols = rows.front().size();
  std::vector<double> data;
  data.reserve(rows.size() * cols);
  for (const auto& r : rows) {
    if (r.size() != cols) throw std::invalid_argument("from_rows: ragged rows");
    data.insert(data.end(), r.begin(), r.end());
  }
  return matrix(rows.size(), cols, std::move(data), requires_grad);
}

std::size_t Tensor::rows() const {
  if (rank() != 2) throw std::logic_error("rows(): tensor is not rank-2");
  return node_->shape[0];
}

std::size_t Tensor::cols() const {
  if (rank() != 2) throw std::logic_error("cols(): tensor is not rank-2");
  return node_->shape[1];
}

double Tensor::value() const {
  if (node_->value.size() != 1) throw std::logic_error("value(): tensor is not scalar");
  return node_->value[0];
}

double Tensor::at(std::size_t r, std::size_t c) const {
  return node_->value.at(r * cols() + c);
}

std::vector<double> Tensor::grad() const {
  if (node_->grad.empty()) return std::vector<double>(node_->value.size(), 0.0);
  return node_->grad;
}

double Tensor::grad_at(std::size_t r, std::size_t c) const {
  if (node_->grad.empty()) return 0.0;
  return node_->grad.at(r * cols() + c);
}

std::vector<double>& GradientTable::accumulator(const detail::TensorNode* node) {
  auto it = buffers_.find(node);
  if (it == buffers_.end()) {
    it = buffers_.emplace(node, std::vector<double>(node->value.size(), 0.0)).first;
  }
  return it->second;
}

const std::vector<double>* GradientTable::find(const detail::TensorNode* node) const {
  auto it = buffers_.find(node);
  return it == buffers_.end() ? nullptr : &it->second;
}

std::vector<double> GradientTable::of(const Tensor& t) const {
  if (const auto* buf = find(t.node())) return *buf;
  return std::vector<double>(t.numel(), 0.0);
}

void Graph::note_touched(const std::shared_ptr<detail::TensorNode>& node) {
  if (!seen_.emplace(node.get(), true).second) return;
  touched_.push_back(node);
}

void Graph::note_produced(const detail::TensorNode* node) { produced_.insert(node); }

Tensor Graph::make_output(Shape shape, std::vector<double> value,
                          const std::vector<Tensor>& inputs) {
  bool rg = false;
  for (const auto& in : inputs) rg = rg || in.requires_grad();
  return Tensor(detail::make_node(std::move(shape), std::move(value), rg));
}

void Graph::record(const char* op, const std::vector<Tensor>& inputs, const Tensor& output,
                   std::function<void(GradientTable&)> backprop) {
  for (const auto& in : inputs) note_touched(in.node_);
  note_touched(output.node_);
  note_produced(output.node_.get());
  if (!output.requires_grad()) return;  // nothing downstream needs this rule
  Entry e;
  e.op = op;
  e.inputs.reserve(inputs.size());
  for (const auto& in : inputs) e.inputs.push_back(in.node_);
  e.output = output.node_;
  e.backprop = std::move(backprop);
  entries_.push_back(std::move(e));
}

// ---------------------------------------------------------------------------
// primitives
// ---------------------------------------------------------------------------

Tensor Graph::matmul(const Tensor& a, const Tensor& b) {
  require_matrix(a, "matmul", "lhs");
  require_matrix(b, "matmul", "rhs");
  const std::size_t m = a.rows(), k = a.cols(), k2 = b.rows(), n = b.cols();
  if (k != k2) {
    throw std::invalid_argument("matmul: inner dimensions disagree: " +
                                shape_to_string(a.shape()) + " vs " +
                                shape_to_string(b.shape()));
  }
  std::vector<double> out(m * n, 0.0);
  const double* pa = a.values().data();
  const double* pb = b.values().data();
  for (std::size_t i = 0; i < m; ++i) {
    for (std::size_t p = 0; p < k; ++p) {
      const double aip = pa[i * k + p];
      if (aip == 0.0) continue;
      const double* brow = pb + p * n;
      double* orow = out.data() + i * n;
      for (std::size_t j = 0; j < n; ++j) orow[j] += aip * brow[j];
    }
  }
  Tensor y = make_output({m, n}, std::move(out), {a, b});
  auto an = a.node_, bn = b.node_, yn = y.node_;
  record("matmul", {a, b}, y, [an, bn, yn, m, k, n](GradientTable& t) {
    const auto* gy = t.find(yn.get());
    if (!gy) return;
    if (an->requires_grad) {  // dA = G Bᵀ
      auto& ga = t.accumulator(an.get());
      for (std::size_t i = 0; i < m; ++i)
        for (std::size_t p = 0; p < k; ++p) {
          double s = 0.0;
          for (std::size_t j = 0; j < n; ++j)
            s += (*gy)[i * n + j] * bn->value[p * n + j];
          ga[i * k + p] += s;
        }
    }
    if (bn->requires_grad) {  // dB = Aᵀ G
      auto& gb = t.accumulator(bn.get());
      for (std::size_t p = 0; p < k; ++p)
        for (std::size_t j = 0; j < n; ++j) {
          double s = 0.0;
          for (std::size_t i = 0; i < m; ++i)
            s += an->value[i * k + p] * (*gy)[i * n + j];
          gb[p * n + j] += s;
        }
    }
  });
  return y;
}

Tensor Graph::transpose(const Tensor& x) {
  require_matrix(x, "transpose", "input");
  const std::size_t m = x.rows(), n = x.cols();
  std::vector<double> out(n * m);
  for (std::size_t i = 0; i < m; ++i)
    for (std::size_t j = 0; j < n; ++j) out[j * m + i] = x.values()[i * n + j];
  Tensor y = make_output({n, m}, std::move(out), {x});
  auto xn = x.node_, yn = y.node_;
  record("transpose", {x}, y, [xn, yn, m, n](GradientTable& t) {
    const auto* gy = t.find(yn.get());
    if (!gy || !xn->requires_grad) return;
    auto& gx = t.accumulator(xn.get());
    for (std::size_t j = 0; j < n; ++j)
      for (std::size_t i = 0; i < m; ++i) gx[i * n + j] += (*gy)[j * m + i];
  });
  return y;
}

Tensor Graph::add(const Tensor& a, const Tensor& b) {
  if (a.shape() != b.shape()) {
    throw std::invalid_argument("add: shape mismatch: " + shape_to_string(a.shape()) +
                                " vs " + shape_to_string(b.shape()));
  }
  std::vector<double> out(a.numel());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = a.values()[i] + b.values()[i];
  Tensor y = make_output(a.shape(), std::move(out), {a, b});
  auto an = a.node_, bn = b.node_, yn = y.node_;
  record("add", {a, b}, y, [an, bn, yn](GradientTable& t) {
    const auto* gy = t.find(yn.get());
    if (!gy) return;
    for (const auto& node : {an, bn}) {
      if (!node->requires_grad) continue;
      auto& g = t.accumulator(node.get());
      for (std::size_t i = 0; i < g.size(); ++i) g[i] += (*gy)[i];
    }
  });
  return y;
}

Tensor Graph::add_rowwise(const Tensor& x, const Tensor& bias) {
  require_matrix(x, "add_rowwise", "input");
  require_matrix(bias, "add_rowwise", "bias");
  const std::size_t m = x.rows(), n = x.cols();
  if (bias.rows() != 1 || bias.cols() != n) {
    throw std::invalid_argument("add_rowwise: bias must be 1x" + std::to_string(n) +
                                ", got " + shape_to_string(bias.shape()));
  }
  std::vector<double> out(m * n);
  for (std::size_t i = 0; i < m; ++i)
    for (std::size_t j = 0; j < n; ++j)
      out[i * n + j] = x.values()[i * n + j] + bias.values()[j];
  Tensor y = make_output({m, n}, std::move(out), {x, bias});
  auto xn = x.node_, bn = bias.node_, yn = y.node_;
  record("add_rowwise", {x, bias}, y, [xn, bn, yn, m, n](GradientTable& t) {
    const auto* gy = t.find(yn.get());
    if (!gy) return;
    if (xn->requires_grad) {
      auto& gx = t.accumulator(xn.get());
      for (std::size_t i = 0; i < gx.size(); ++i) gx[i] += (*gy)[i];
    }
    if (bn->requires_grad) {
      auto& gb = t.accumulator(bn.get());
      for (std::size_t i = 0; i < m; ++i)
        for (std::size_t j = 0; j < n; ++j) gb[j] += (*gy)[i * n + j];
    }
  });
  return y;
}

Tensor Graph::scale(const Tensor& x, double factor) {
  std::vector<double> out(x.numel());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = x.values()[i] * factor;
  Tensor y = make_output(x.shape(), std::move(out), {x});
  auto xn = x.node_, yn = y.node_;
  record("scale", {x}, y, [xn, yn, factor](GradientTable& t) {
    const auto* gy = t.find(yn.get());
    if (!gy || !xn->requires_grad) return;
    auto& gx = t.accumulator(xn.get());
    for (std::size_t i = 0; i < gx.size(); ++i) gx[i] += factor * (*gy)[i];
  });
  return y;
}

Tensor Graph::concat_rows(const std::vector<Tensor>& parts) {
  require(!parts.empty(), "concat_rows: need at least one part");
  for (const auto& p : parts) require_matrix(p, "concat_rows", "part");
  const std::size_t n = parts.front().cols();
  std::size_t total = 0;
  for (const auto& p : parts) {
    if (p.cols() != n) {
      throw std::invalid_argument("concat_rows: column mismatch: " +
                                  shape_to_string(parts.front().shape()) + " vs " +
                                  shape_to_string(p.shape()));
    }
    total += p.rows();
  }
  std::vector<double> out;
  out.reserve(total * n);
  for (const auto& p : parts) out.insert(out.end(), p.values().begin(), p.values().end());
  Tensor y = make_output({total, n}, std::move(out), parts);
  std::vector<std::shared_ptr<detail::TensorNode>> nodes;
  for (const auto& p : parts) nodes.push_back(p.node_);
  auto yn = y.node_;
  record("concat_rows", parts, y, [nodes, yn, n](GradientTable& t) {
    const auto* gy = t.find(yn.get());
    if (!gy) return;
    std::size_t offset = 0;
    for (const auto& node : nodes) {
      const std::size_t len = node->value.size();
      if (node->requires_grad) {
        auto& g = t.accumulator(node.get());
        for (std::size_t i = 0; i < len; ++i) g[i] += (*gy)[offset + i];
      }
      offset += len;
    }
  });
  return y;
}

Tensor Graph::concat_cols(const std::vector<Tensor>& parts) {
  require(!parts.empty(), "concat_cols: need at least one part");
  for (const auto& p : parts) require_matrix(p, "concat_cols", "part");
  const std::size_t m = parts.front().rows();
  std::size_t total = 0;
  for (const auto& p : parts) {
    if (p.rows() != m) {
      throw std::invalid_argument("concat_cols: row mismatch: " +
                                  shape_to_string(parts.front().shape()) + " vs " +
                                  shape_to_string(p.shape()));
    }
    total += p.cols();
  }
  std::vector<double> out(m * total);
  std::size_t col0 = 0;
  for (const auto& p : parts) {
    const std::size_t pc = p.cols();
    for (std::size_t i = 0; i < m; ++i)
      for (std::size_t j = 0; j < pc; ++j)
        out[i * total + col0 + j] = p.values()[i * pc + j];
    col0 += pc;
  }
  Tensor y = make_output({m, total}, std::move(out), parts);
  std::vector<std::shared_ptr<detail::TensorNode>> nodes;
  for (const auto& p : parts) nodes.push_back(p.node_);
  auto yn = y.node_;
  record("concat_cols", parts, y, [nodes, yn, m, total](GradientTable& t) {
    const auto* gy = t.find(yn.get());
    if (!gy) return;
    std::size_t col0 = 0;
    for (const auto& node : nodes) {
      const std::size_t pc = node->value.size() / m;
      if (node->requires_grad) {
        auto& g = t.accumulator(node.get());
        for (std::size_t i = 0; i < m; ++i)
          for (std::size_t j = 0; j < pc; ++j)
            g[i * pc + j] += (*gy)[i * total + col0 + j];
      }
      col0 += pc;
    }
  });
  return y;
}

Tensor Graph::slice_cols(const Tensor& x, std::size_t first, std::size_t count) {
  require_matrix(x, "slice_cols", "input");
  const std::size_t m = x.rows(), n = x.cols();
  if (count == 0 || first + count > n) {
    throw std::invalid_argument("slice_cols: range [" + std::to_string(first) + ", " +
                                std::to_string(first + count) + ") out of " +
                                std::to_string(n) + " columns");
  }
  std::vector<double> out(m * count);
  for (std::size_t i = 0; i < m; ++i)
    for (std::size_t j = 0; j < count; ++j)
      out[i * count + j] = x.values()[i * n + first + j];
  Tensor y = make_output({m, count}, std::move(out), {x});
  auto xn = x.node_, yn = y.node_;
  record("slice_cols", {x}, y, [xn, yn, m, n, first, count](GradientTable& t) {
    const auto* gy = t.find(yn.get());
    if (!gy || !xn->requires_grad) return;
    auto& gx = t.accumulator(xn.get());
    for (std::size_t i = 0; i < m; ++i)
      for (std::size_t j = 0; j < count; ++j)
        gx[i * n + first + j] += (*gy)[i * count + j];
  });
  return y;
}

Tensor Graph::gather_rows(const Tensor& x, std::vector<std::size_t> row_ids) {
  require_matrix(x, "gather_rows", "input");
  require(!row_ids.empty(), "gather_rows: need at least one row index");
  const std::size_t m = x.rows(), n = x.cols();
  for (std::size_t r : row_ids) {
    if (r >= m) {
      throw std::invalid_argument("gather_rows: row index " + std::to_string(r) +
                                  " out of range for " + shape_to_string(x.shape()));
    }
  }
  std::vector<double> out(row_ids.size() * n);
  for (std::size_t i = 0; i < row_ids.size(); ++i)
    std::memcpy(out.data() + i * n, x.values().data() + row_ids[i] * n, n * sizeof(double));
  Tensor y = make_output({row_ids.size(), n}, std::move(out), {x});
  auto xn = x.node_, yn = y.node_;
  auto ids = std::make_shared<std::vector<std::size_t>>(std::move(row_ids));
  record("gather_rows", {x}, y, [xn, yn, ids, n](GradientTable& t) {
    const auto* gy = t.find(yn.get());
    if (!gy || !xn->requires_grad) return;
    auto& gx = t.accumulator(xn.get());
    for (std::size_t i = 0; i < ids->size(); ++i)
      for (std::size_t j = 0; j < n; ++j)
        gx[(*ids)[i] * n + j] += (*gy)[i * n + j];
  });
  return y;
}

namespace {

// Shared softmax backward: dx_j = y_j (g_j - sum_k g_k y_k) per row, restricted
// to the allowed set (masked positions hold y=0 so the formula degrades to 0).
void softmax_rows_backprop(const std::vector<double>& y, const std::vector<double>& gy,
                           std::vector<double>& gx, std::size_t m, std::size_t n) {
  for (std::size_t i = 0; i < m; ++i) {
    double dot = 0.0;
    for (std::size_t j = 0; j < n; ++j) dot += gy[i * n + j] * y[i * n + j];
    for (std::size_t j = 0; j < n; ++j) {
      const double yij = y[i * n + j];
      if (yij != 0.0) gx[i * n + j] += yij * (gy[i * n + j] - dot);
    }
  }
}

}  // namespace

Tensor Graph::softmax_rows(const Tensor& x) {
  require_matrix(x, "softmax_rows", "input");
  const std::size_t m = x.rows(), n = x.cols();
  std::vector<double> out(m * n);
  for (std::size_t i = 0; i < m; ++i) {
    const double* row = x.values().data() + i * n;
    double mx = row[0];
    for (std::size_t j = 1; j < n; ++j) mx = std::max(mx, row[j]);
    double z = 0.0;
    for (std::size_t j = 0; j < n; ++j) {
      out[i * n + j] = std::exp(row[j] - mx);
      z += out[i * n + j];
    }
    for (std::size_t j = 0; j < n; ++j) out[i * n + j] /= z;
  }
  Tensor y = make_output({m, n}, std::move(out), {x});
  auto xn = x.node_, yn = y.node_;
  record("softmax_rows", {x}, y, [xn, yn, m, n](GradientTable& t) {
    const auto* gy = t.find(yn.get());
    if (!gy || !xn->requires_grad) return;
    softmax_rows_backprop(yn->value, *gy, t.accumulator(xn.get()), m, n);
  });
  return y;
}

Tensor Graph::masked_softmax_rows(const Tensor& x, const AttentionMask& mask) {
  require_matrix(x, "masked_softmax_rows", "input");
  const std::size_t m = x.rows(), n = x.cols();
  if (mask.queries() != m || mask.keys() != n) {
    throw std::invalid_argument("masked_softmax_rows: mask is " +
                                std::to_string(mask.queries()) + "x" +
                                std::to_string(mask.keys()) + " but input is " +
                                shape_to_string(x.shape()));
  }
  std::vector<double> out(m * n, 0.0);
  for (std::size_t i = 0; i < m; ++i) {
    const double* row = x.values().data() + i * n;
    double mx = -std::numeric_limits<double>::infinity();
    for (std::size_t j = 0; j < n; ++j)
      if (mask.at(i, j)) mx = std::max(mx, row[j]);
    if (mx == -std::numeric_limits<double>::infinity()) {
      throw std::invalid_argument("masked_softmax_rows: query row " + std::to_string(i) +
                                  " has every key masked");
    }
    double z = 0.0;
    for (std::size_t j = 0; j < n; ++j) {
      if (!mask.at(i, j)) continue;
      out[i * n + j] = std::exp(row[j] - mx);
      z += out[i * n + j];
    }
    for (std::size_t j = 0; j < n; ++j)
      if (mask.at(i, j)) out[i * n + j] /= z;
  }
  Tensor y = make_output({m, n}, std::move(out), {x});
  auto xn = x.node_, yn = y.node_;
  record("masked_softmax_rows", {x}, y, [xn, yn, m, n](GradientTable& t) {
    const auto* gy = t.find(yn.get());
    if (!gy || !xn->requires_grad) return;
    softmax_rows_backprop(yn->value, *gy, t.accumulator(xn.get()), m, n);
  });
  return y;
}

Tensor Graph::gelu(const Tensor& x) {
  std::vector<double> out(x.numel());
  for (std::size_t i = 0; i < out.size(); ++i) {
    const double v = x.values()[i];
    out[i] = 0.5 * v * (1.0 + std::erf(v * kInvSqrt2));
  }
  Tensor y = make_output(x.shape(), std::move(out), {x});
  auto xn = x.node_, yn = y.node_;
  record("gelu", {x}, y, [xn, yn](GradientTable& t) {
    const auto* gy = t.find(yn.get());
    if (!gy || !xn->requires_grad) return;
    auto& gx = t.accumulator(xn.get());
    for (std::size_t i = 0; i < gx.size(); ++i) {
      const double v = xn->value[i];
      const double cdf = 0.5 * (1.0 + std::erf(v * kInvSqrt2));
      const double pdf = kInvSqrt2Pi * std::exp(-0.5 * v * v);
      gx[i] += (cdf + v * pdf) * (*gy)[i];
    }
  });
  return y;
}

Tensor Graph::layer_norm(const Tensor& x, const Tensor& gain, const Tensor& offset) {
  require_matrix(x, "layer_norm", "input");
  require_matrix(gain, "layer_norm", "gain");
  require_matrix(offset, "layer_norm", "offset");
  const std::size_t m = x.rows(), n = x.cols();
  if (gain.rows() != 1 || gain.cols() != n || offset.rows() != 1 || offset.cols() != n) {
    throw std::invalid_argument("layer_norm: gain/offset must be 1x" + std::to_string(n));
  }
  std::vector<double> out(m * n);
  std::vector<double> xhat(m * n);
  std::vector<double> inv_std(m);
  for (std::size_t i = 0; i < m; ++i) {
    const double* row = x.values().data() + i * n;
    double mean = 0.0;
    for (std::size_t j = 0; j < n; ++j) mean += row[j];
    mean /= static_cast<double>(n);
    double var = 0.0;
    for (std::size_t j = 0; j < n; ++j) var += (row[j] - mean) * (row[j] - mean);
    var /= static_cast<double>(n);
    const double is = 1.0 / std::sqrt(var + kLayerNormEps);
    inv_std[i] = is;
    for (std::size_t j = 0; j < n; ++j) {
      xhat[i * n + j] = (row[j] - mean) * is;
      out[i * n + j] = xhat[i * n + j] * gain.values()[j] + offset.values()[j];
    }
  }
  Tensor y = make_output({m, n}, std::move(out), {x, gain, offset});
  auto xn = x.node_, gn = gain.node_, on = offset.node_, yn = y.node_;
  auto saved_xhat = std::make_shared<std::vector<double>>(std::move(xhat));
  auto saved_is = std::make_shared<std::vector<double>>(std::move(inv_std));
  record("layer_norm", {x, gain, offset}, y,
         [xn, gn, on, yn, saved_xhat, saved_is, m, n](GradientTable& t) {
           const auto* gy = t.find(yn.get());
           if (!gy) return;
           if (gn->requires_grad) {
             auto& gg = t.accumulator(gn.get());
             for (std::size_t i = 0; i < m; ++i)
               for (std::size_t j = 0; j < n; ++j)
                 gg[j] += (*gy)[i * n + j] * (*saved_xhat)[i * n + j];
           }
           if (on->requires_grad) {
             auto& go = t.accumulator(on.get());
             for (std::size_t i = 0; i < m; ++i)
               for (std::size_t j = 0; j < n; ++j) go[j] += (*gy)[i * n + j];
           }
           if (xn->requires_grad) {
             auto& gx = t.accumulator(xn.get());
             for (std::size_t i = 0; i < m; ++i) {
               double mean_h = 0.0, mean_hx = 0.0;
               for (std::size_t j = 0; j < n; ++j) {
                 const double h = (*gy)[i * n + j] * gn->value[j];
                 mean_h += h;
                 mean_hx += h * (*saved_xhat)[i * n + j];
               }
               mean_h /= static_cast<double>(n);
               mean_hx /= static_cast<double>(n);
               for (std::size_t j = 0; j < n; ++j) {
                 const double h = (*gy)[i * n + j] * gn->value[j];
                 gx[i * n + j] +=
                     ((h - mean_h) - (*saved_xhat)[i * n + j] * mean_hx) * (*saved_is)[i];
               }
             }
           }
         });
  return y;
}

Tensor Graph::sum(const Tensor& x) {
  double s = 0.0;
  for (double v : x.values()) s += v;
  Tensor y = make_output({}, {s}, {x});
  auto xn = x.node_, yn = y.node_;
  record("sum", {x}, y, [xn, yn](GradientTable& t) {
    const auto* gy = t.find(yn.get());
    if (!gy || !xn->requires_grad) return;
    auto& gx = t.accumulator(xn.get());
    for (std::size_t i = 0; i < gx.size(); ++i) gx[i] += (*gy)[0];
  });
  return y;
}

Tensor Graph::cross_entropy(const Tensor& probs, std::span<const int> targets) {
  require_matrix(probs, "cross_entropy", "probs");
  const std::size_t m = probs.rows(), v = probs.cols();
  if (targets.size() != m) {
    throw std::invalid_argument("cross_entropy: " + std::to_string(m) + " rows but " +
                                std::to_string(targets.size()) + " targets");
  }
  for (std::size_t i = 0; i < m; ++i) {
    if (targets[i] < 0 || static_cast<std::size_t>(targets[i]) >= v) {
      throw std::invalid_argument("cross_entropy: target " + std::to_string(targets[i]) +
                                  " at position " + std::to_string(i) +
                                  " outside vocabulary of size " + std::to_string(v));
    }
    double row_sum = 0.0;
    for (std::size_t j = 0; j < v; ++j) row_sum += probs.values()[i * v + j];
    if (std::abs(row_sum - 1.0) > 1e-9) {
      throw std::invalid_argument("cross_entropy: probs row " + std::to_string(i) +
                                  " sums to " + std::to_string(row_sum) + ", not 1");
    }
  }
  double loss = 0.0;
  for (std::size_t i = 0; i < m; ++i) {
    const double p = probs.values()[i * v + static_cast<std::size_t>(targets[i])];
    loss -= std::log(std::max(p, kLogClamp));
  }
  loss /= static_cast<double>(m);
  Tensor y = make_output({}, {loss}, {probs});
  auto pn = probs.node_, yn = y.node_;
  auto tgt = std::make_shared<std::vector<int>>(targets.begin(), targets.end());
  record("cross_entropy", {probs}, y, [pn, yn, tgt, m, v](GradientTable& t) {
    const auto* gy = t.find(yn.get());
    if (!gy || !pn->requires_grad) return;
    auto& gp = t.accumulator(pn.get());
    for (std::size_t i = 0; i < m; ++i) {
      const std::size_t j = static_cast<std::size_t>((*tgt)[i]);
      const double p = pn->value[i * v + j];
      if (p > kLogClamp) gp[i * v + j] += (*gy)[0] * (-1.0 / (static_cast<double>(m) * p));
      // below the clamp the loss is locally constant in p
    }
  });
  return y;
}

Tensor Graph::scaled_dot_attention(const Tensor& q, const Tensor& k, const Tensor& v,
                                   const AttentionMask* mask, Tensor* attention_out) {
  require_matrix(q, "scaled_dot_attention", "Q");
  require_matrix(k, "scaled_dot_attention", "K");
  require_matrix(v, "scaled_dot_attention", "V");
  if (q.cols() != k.cols()) {
    throw std::invalid_argument("scaled_dot_attention: Q and K widths disagree: " +
                                shape_to_string(q.shape()) + " vs " +
                                shape_to_string(k.shape()));
  }
  if (k.rows() != v.rows()) {
    throw std::invalid_argument("scaled_dot_attention: K and V row counts disagree: " +
                                shape_to_string(k.shape()) + " vs " +
                                shape_to_string(v.shape()));
  }
  if (mask && (mask->queries() != q.rows() || mask->keys() != k.rows())) {
    throw std::invalid_argument("scaled_dot_attention: mask shape mismatch");
  }
  const double inv_sqrt_dh = 1.0 / std::sqrt(static_cast<double>(q.cols()));
  Tensor scores = scale(matmul(q, transpose(k)), inv_sqrt_dh);
  Tensor weights = mask ? masked_softmax_rows(scores, *mask) : softmax_rows(scores);
  if (attention_out) *attention_out = weights;
  return matmul(weights, v);
}

// ---------------------------------------------------------------------------
// backward
// ---------------------------------------------------------------------------

GradientTable Graph::gradients(const Tensor& loss) const {
  if (!loss.defined() || loss.numel() != 1) {
    throw std::invalid_argument("backward: loss must be a scalar tensor");
  }
  if (!produced_.count(loss.node())) {
    throw std::invalid_argument("backward: loss was not produced by this graph");
  }
  GradientTable table;
  table.accumulator(loss.node()).assign(1, 1.0);
  for (auto it = entries_.rbegin(); it != entries_.rend(); ++it) {
    if (!table.find(it->output.get())) continue;  // unreachable from the loss
    it->backprop(table);
  }
  return table;
}

void Graph::backward(const Tensor& loss) {
  GradientTable table = gradients(loss);
  for (const auto& node : touched_) {
    if (!node->requires_grad) continue;
    if (const auto* buf = table.find(node.get())) {
      node->grad = *buf;
    } else {
      node->grad.assign(node->value.size(), 0.0);
    }
  }
}

std::vector<Graph::EntryInfo> Graph::entries() const {
  std::vector<EntryInfo> out;
  out.reserve(entries_.size());
  for (const auto& e : entries_) {
    EntryInfo info;
    info.op = e.op;
    for (const auto& in : e.inputs) info.input_ids.push_back(in->id);
    info.output_id = e.output->id;
    out.push_back(std::move(info));
  }
  return out;
}

double max_abs_diff(std::span<const double> a, std::span<const double> b) {
  if (a.size() != b.size()) return std::numeric_limits<double>::infinity();
  double m = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i) m = std::max(m, std::abs(a[i] - b[i]));
  return m;
}

bool bitwise_equal(std::span<const double> a, std::span<const double> b) {
  if (a.size() != b.size()) return false;
  return std::memcmp(a.data(), b.data(), a.size() * sizeof(double)) == 0;
}

}  // namespace dsc
