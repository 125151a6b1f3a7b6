#pragma once

#include <cstdint>
#include <functional>
#include <memory>
#include <span>
#include <string>
#include <unordered_map>
#include <unordered_set>
#include <vector>

namespace dsc {

/// Row-major dense shape, rank 0 (scalar) through 3.
using Shape = std::vector<std::size_t>;

std::size_t shape_numel(const Shape& shape);
std::string shape_to_string(const Shape& shape);

namespace detail {

struct TensorNode {
  Shape shape;
  std::vector<double> value;
  std::vector<double> grad;  // empty until backward populates it
  bool requires_grad = false;
  std::uint64_t id = 0;
};

std::shared_ptr<TensorNode> make_node(Shape shape, std::vector<double> value,
                                      bool requires_grad);

}  // namespace detail

/// Shared handle to one dense 64-bit float array with an attached gradient
/// slot. Values are immutable while a Graph that recorded them is alive;
/// `values_mut` exists for optimizers and finite-difference probes that run
/// between graph evaluations.
class Tensor {
 public:
  Tensor() = default;

  static Tensor zeros(Shape shape, bool requires_grad = false);
  static Tensor full(Shape shape, double fill, bool requires_grad = false);
  static Tensor scalar(double v, bool requires_grad = false);
  static Tensor matrix(std::size_t rows, std::size_t cols,
                       std::vector<double> data, bool requires_grad = false);
  static Tensor from_rows(const std::vector<std::vector<double>>& rows,
                          bool requires_grad = false);

  bool defined() const { return node_ != nullptr; }
  const Shape& shape() const { return node_->shape; }
  std::size_t rank() const { return node_->shape.size(); }
  std::size_t numel() const { return node_->value.size(); }
  std::size_t rows() const;
  std::size_t cols() const;
  bool is_scalar() const { return node_->value.size() == 1 && node_->shape.empty(); }

  std::span<const double> values() const { return node_->value; }
  std::span<double> values_mut() { return node_->value; }
  double value() const;                     // scalar only
  double at(std::size_t r, std::size_t c) const;

  bool requires_grad() const { return node_->requires_grad; }
  bool grad_populated() const { return !node_->grad.empty(); }
  /// Gradient buffer; zeros when no backward pass has reached this tensor.
  std::vector<double> grad() const;
  double grad_at(std::size_t r, std::size_t c) const;

  std::uint64_t node_id() const { return node_->id; }
  detail::TensorNode* node() const { return node_.get(); }

 private:
  explicit Tensor(std::shared_ptr<detail::TensorNode> node) : node_(std::move(node)) {}
  std::shared_ptr<detail::TensorNode> node_;
  friend class Graph;
};

/// Boolean q-by-k attention mask; `true` means the query row may attend the
/// key column.
class AttentionMask {
 public:
  AttentionMask(std::size_t queries, std::size_t keys, bool allowed = true)
      : queries_(queries), keys_(keys), allowed_(queries * keys, allowed ? 1 : 0) {}

  std::size_t queries() const { return queries_; }
  std::size_t keys() const { return keys_; }
  bool at(std::size_t q, std::size_t k) const { return allowed_[q * keys_ + k] != 0; }
  void set(std::size_t q, std::size_t k, bool allowed) {
    allowed_[q * keys_ + k] = allowed ? 1 : 0;
  }

 private:
  std::size_t queries_, keys_;
  std::vector<std::uint8_t> allowed_;
};

/// Per-tape gradient buffers keyed by node identity. Lets several graphs
/// backpropagate through shared parameters concurrently without touching the
/// nodes' own grad slots.
class GradientTable {
 public:
  std::vector<double>& accumulator(const detail::TensorNode* node);
  const std::vector<double>* find(const detail::TensorNode* node) const;
  /// Copy of the gradient, zeros if the tensor was unreachable.
  std::vector<double> of(const Tensor& t) const;

 private:
  std::unordered_map<const detail::TensorNode*, std::vector<double>> buffers_;
};

/// Reverse-mode tape. Records every primitive application whose output needs
/// a gradient, in topological (execution) order. A Graph and the tensors it
/// created are confined to one thread; distinct graphs may share parameter
/// tensors read-only.
class Graph {
 public:
  Graph() = default;
  Graph(const Graph&) = delete;
  Graph& operator=(const Graph&) = delete;

  // --- primitive operations -------------------------------------------------
  Tensor matmul(const Tensor& a, const Tensor& b);
  Tensor transpose(const Tensor& x);
  Tensor add(const Tensor& a, const Tensor& b);            // same shape
  Tensor add_rowwise(const Tensor& x, const Tensor& bias); // bias: 1 x cols
  Tensor scale(const Tensor& x, double factor);
  Tensor concat_rows(const std::vector<Tensor>& parts);
  Tensor concat_cols(const std::vector<Tensor>& parts);
  Tensor slice_cols(const Tensor& x, std::size_t first, std::size_t count);
  Tensor gather_rows(const Tensor& x, std::vector<std::size_t> row_ids);
  Tensor softmax_rows(const Tensor& x);
  Tensor masked_softmax_rows(const Tensor& x, const AttentionMask& mask);
  Tensor gelu(const Tensor& x);
  Tensor layer_norm(const Tensor& x, const Tensor& gain, const Tensor& offset);
  Tensor sum(const Tensor& x);                             // -> scalar
  Tensor cross_entropy(const Tensor& probs, std::span<const int> targets);

  /// softmax_rows(Q Kᵀ / sqrt(d_h), masked) · V. Masked attention weights are
  /// exactly zero; a fully-masked query row is a contract violation. When
  /// `attention_out` is non-null it receives the weight matrix.
  Tensor scaled_dot_attention(const Tensor& q, const Tensor& k, const Tensor& v,
                              const AttentionMask* mask = nullptr,
                              Tensor* attention_out = nullptr);

  // --- backward -------------------------------------------------------------
  /// Pure gradient computation; does not modify any tensor.
  GradientTable gradients(const Tensor& loss) const;
  /// gradients() plus commit: every requires_grad tensor this graph touched
  /// gets its grad slot overwritten (zeros when unreachable from the loss).
  void backward(const Tensor& loss);

  // --- introspection ---------------------------------------------------------
  struct EntryInfo {
    std::string op;
    std::vector<std::uint64_t> input_ids;
    std::uint64_t output_id;
  };
  std::vector<EntryInfo> entries() const;
  std::size_t size() const { return entries_.size(); }

 private:
  struct Entry {
    const char* op;
    std::vector<std::shared_ptr<detail::TensorNode>> inputs;
    std::shared_ptr<detail::TensorNode> output;
    std::function<void(GradientTable&)> backprop;
  };

  Tensor make_output(Shape shape, std::vector<double> value,
                     const std::vector<Tensor>& inputs);
  void record(const char* op, const std::vector<Tensor>& inputs, const Tensor& output,
              std::function<void(GradientTable&)> backprop);
  void note_touched(const std::shared_ptr<detail::TensorNode>& node);
  void note_produced(const detail::TensorNode* node);

  std::vector<Entry> entries_;
  std::vector<std::shared_ptr<detail::TensorNode>> touched_;  // first-seen order
  std::unordered_map<const detail::TensorNode*, bool> seen_;
  std::unordered_set<const detail::TensorNode*> produced_;
};

double max_abs_diff(std::span<const double> a, std::span<const double> b);
bool bitwise_equal(std::span<const double> a, std::span<const double> b);

}  // namespace dsc
