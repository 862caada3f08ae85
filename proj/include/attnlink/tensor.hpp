#pragma once

#include <cstdint>
#include <functional>
#include <memory>
#include <string>
#include <vector>

// Reverse-mode autodiff over dense 64-bit float tensors, row-major storage.
// Operations evaluate eagerly. When a Graph::Scope is active and an input
// carries gradient, the op is also recorded on that graph's tape; backward()
// then replays the tape in reverse recording order. Parameters are leaf
// tensors that outlive graphs and accumulate gradients across backward calls
// until zero_grad().

namespace attnlink {

using Shape = std::vector<std::int64_t>;

std::int64_t shape_numel(const Shape& s);
std::string shape_str(const Shape& s);

class Graph;

namespace detail {

struct Node {
  Shape shape;
  std::vector<double> value;
  std::vector<double> grad;  // allocated on first use
  bool requires_grad = false;
  std::vector<std::shared_ptr<Node>> parents;
  std::function<void(Node&)> backprop;
  Graph* owner = nullptr;
  std::size_t tape_index = 0;
  std::string name;

  std::vector<double>& grad_buf() {
    if (grad.size() != value.size()) grad.assign(value.size(), 0.0);
    return grad;
  }
};

}  // namespace detail

class Tensor {
 public:
  Tensor() = default;

  static Tensor constant(Shape shape, std::vector<double> value);
  static Tensor zeros(Shape shape);
  static Tensor full(Shape shape, double v);
  static Tensor parameter(Shape shape, std::vector<double> value, std::string name = "");

  // Extension point for fused ops: value is computed by the caller, backprop
  // receives the finished node and adds into parents' grad buffers.
  static Tensor make_op(Shape shape, std::vector<double> value, std::vector<Tensor> parents,
                        std::function<void(detail::Node&)> backprop);

  bool defined() const { return node_ != nullptr; }
  const Shape& shape() const;
  std::int64_t numel() const;
  const std::vector<double>& data() const;
  std::vector<double>& raw_data();  // in-place edits; meant for leaves between graphs
  const std::vector<double>& grad() const;
  bool has_grad() const;
  void zero_grad();
  double item() const;
  bool requires_grad() const;
  const std::string& name() const;

  std::shared_ptr<detail::Node> node() const { return node_; }

 private:
  explicit Tensor(std::shared_ptr<detail::Node> n) : node_(std::move(n)) {}
  std::shared_ptr<detail::Node> node_;
  friend class Graph;
};

class Graph {
 public:
  Graph() = default;
  ~Graph();
  Graph(const Graph&) = delete;
  Graph& operator=(const Graph&) = delete;

  class Scope {
   public:
    explicit Scope(Graph& g);
    ~Scope();
    Scope(const Scope&) = delete;
    Scope& operator=(const Scope&) = delete;

   private:
    Graph* prev_;
  };

  static Graph* active();
  std::size_t size() const { return tape_.size(); }
  void backward_from(const Tensor& loss);
  void record(const std::shared_ptr<detail::Node>& n);

 private:
  std::vector<std::shared_ptr<detail::Node>> tape_;
};

// Runs reverse accumulation from a scalar loss. Parameter gradients add onto
// whatever is already in their buffers.
void backward(const Tensor& loss);

Tensor matmul(const Tensor& a, const Tensor& b);
Tensor transpose(const Tensor& a);
Tensor add(const Tensor& a, const Tensor& b);
Tensor sub(const Tensor& a, const Tensor& b);
Tensor mul(const Tensor& a, const Tensor& b);           // elementwise
Tensor add_scaled(const Tensor& a, const Tensor& b, double s);  // a + s*b
Tensor scale(const Tensor& a, double s);
Tensor add_col_bias(const Tensor& x, const Tensor& b);  // x[m x n] + b[m] per column
Tensor relu(const Tensor& a);

// Row softmax with optional keep mask (1 = keep, 0 = masked out). Masked
// entries are exactly 0 in the output; a fully masked row is an error.
Tensor softmax_rows(const Tensor& x, const Tensor& keep_mask = Tensor());

// Normalizes the last axis to mean 0 / variance 1 (epsilon 1e-5 inside the
// square root), then applies elementwise gain and bias.
Tensor layer_norm(const Tensor& x, const Tensor& gain, const Tensor& bias);

// Gathers columns of table [d x V] at ids, giving [d x ids.size()].
Tensor embed_cols(const Tensor& table, const std::vector<int>& ids);

Tensor sum(const Tensor& a);
Tensor mean(const Tensor& a);

}  // namespace attnlink
