#include "attnlink/tensor.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <sstream>
#include <stdexcept>

namespace attnlink {

namespace {

thread_local Graph* g_active_graph = nullptr;

void check_arg(bool ok, const std::string& msg) {
  if (!ok) throw std::invalid_argument(msg);
}

const detail::Node& deref(const Tensor& t, const char* op) {
  check_arg(t.defined(), std::string(op) + ": undefined tensor");
  return *t.node();
}

}  // namespace

std::int64_t shape_numel(const Shape& s) {
  std::int64_t n = 1;
  for (auto d : s) n *= d;
  return n;
}

std::string shape_str(const Shape& s) {
  std::ostringstream os;
  os << "[";
  for (std::size_t i = 0; i < s.size(); ++i) {
    if (i) os << ", ";
    os << s[i];
  }
  os << "]";
  return os.str();
}

Tensor Tensor::constant(Shape shape, std::vector<double> value) {
  check_arg(shape_numel(shape) == static_cast<std::int64_t>(value.size()),
            "Tensor::constant: value size " + std::to_string(value.size()) +
                " does not match shape " + shape_str(shape));
  for (auto d : shape) check_arg(d > 0, "Tensor::constant: non-positive dim in " + shape_str(shape));
  auto n = std::make_shared<detail::Node>();
  n->shape = std::move(shape);
  n->value = std::move(value);
  return Tensor(std::move(n));
}

Tensor Tensor::zeros(Shape shape) {
  auto numel = shape_numel(shape);
  return constant(std::move(shape), std::vector<double>(static_cast<std::size_t>(numel), 0.0));
}

Tensor Tensor::full(Shape shape, double v) {
  auto numel = shape_numel(shape);
  return constant(std::move(shape), std::vector<double>(static_cast<std::size_t>(numel), v));
}

Tensor Tensor::parameter(Shape shape, std::vector<double> value, std::string name) {
  Tensor t = constant(std::move(shape), std::move(value));
  t.node_->requires_grad = true;
  t.node_->name = std::move(name);
  return t;
}

Tensor Tensor::make_op(Shape shape, std::vector<double> value, std::vector<Tensor> parents,
                       std::function<void(detail::Node&)> backprop) {
  Tensor t = constant(std::move(shape), std::move(value));
  bool any_grad = false;
  for (const auto& p : parents) {
    check_arg(p.defined(), "make_op: undefined parent");
    if (p.node()->requires_grad || p.node()->owner != nullptr) any_grad = true;
  }
  Graph* g = Graph::active();
  if (g != nullptr && any_grad) {
    t.node_->parents.reserve(parents.size());
    for (const auto& p : parents) t.node_->parents.push_back(p.node());
    t.node_->backprop = std::move(backprop);
    g->record(t.node_);
  }
  return t;
}

const Shape& Tensor::shape() const { return deref(*this, "shape"), node_->shape; }
std::int64_t Tensor::numel() const { return static_cast<std::int64_t>(deref(*this, "numel").value.size()); }
const std::vector<double>& Tensor::data() const { return deref(*this, "data"), node_->value; }

std::vector<double>& Tensor::raw_data() {
  deref(*this, "raw_data");
  return node_->value;
}

const std::vector<double>& Tensor::grad() const {
  deref(*this, "grad");
  return node_->grad_buf();
}

bool Tensor::has_grad() const { return defined() && node_->grad.size() == node_->value.size(); }

void Tensor::zero_grad() {
  deref(*this, "zero_grad");
  auto& g = node_->grad_buf();
  std::fill(g.begin(), g.end(), 0.0);
}

double Tensor::item() const {
  check_arg(numel() == 1, "item: tensor has shape " + shape_str(shape()) + ", expected one element");
  return node_->value[0];
}

bool Tensor::requires_grad() const { return defined() && node_->requires_grad; }
const std::string& Tensor::name() const { return deref(*this, "name"), node_->name; }

Graph::~Graph() {
  for (auto& n : tape_) n->owner = nullptr;
}

Graph::Scope::Scope(Graph& g) : prev_(g_active_graph) { g_active_graph = &g; }
Graph::Scope::~Scope() { g_active_graph = prev_; }

Graph* Graph::active() { return g_active_graph; }

void Graph::record(const std::shared_ptr<detail::Node>& n) {
  n->owner = this;
  n->tape_index = tape_.size();
  tape_.push_back(n);
}

void Graph::backward_from(const Tensor& loss) {
  const detail::Node& ln = deref(loss, "backward");
  check_arg(ln.value.size() == 1,
            "backward: loss must be a scalar, got shape " + shape_str(ln.shape));
  detail::Node* root = loss.node().get();
  check_arg(root->owner == this, "backward: loss was not recorded on this graph");

  std::vector<char> marked(tape_.size(), 0);
  std::vector<detail::Node*> stack{root};
  marked[root->tape_index] = 1;
  while (!stack.empty()) {
    detail::Node* n = stack.back();
    stack.pop_back();
    for (const auto& p : n->parents) {
      if (p->owner == this && !marked[p->tape_index]) {
        marked[p->tape_index] = 1;
        stack.push_back(p.get());
      }
    }
  }

  // Recorded intermediates restart from zero each call; leaf parameters keep
  // accumulating across calls.
  for (std::size_t i = 0; i <= root->tape_index; ++i) {
    if (marked[i]) {
      auto& g = tape_[i]->grad_buf();
      std::fill(g.begin(), g.end(), 0.0);
    }
  }
  root->grad_buf()[0] = 1.0;
  for (std::size_t i = root->tape_index + 1; i-- > 0;) {
    if (marked[i] && tape_[i]->backprop) tape_[i]->backprop(*tape_[i]);
  }
}

void backward(const Tensor& loss) {
  const detail::Node& ln = deref(loss, "backward");
  check_arg(ln.value.size() == 1,
            "backward: loss must be a scalar, got shape " + shape_str(ln.shape));
  if (ln.owner != nullptr) {
    ln.owner->backward_from(loss);
    return;
  }
  // A bare leaf: the only reachable "parameter" is the loss itself.
  if (ln.requires_grad) loss.node()->grad_buf()[0] += 1.0;
}

namespace {

bool is_matrix(const detail::Node& n) { return n.shape.size() == 2; }

void add_into(std::vector<double>& dst, const std::vector<double>& src) {
  for (std::size_t i = 0; i < dst.size(); ++i) dst[i] += src[i];
}

}  // namespace

Tensor matmul(const Tensor& a, const Tensor& b) {
  const auto& an = deref(a, "matmul");
  const auto& bn = deref(b, "matmul");
  check_arg(is_matrix(an) && is_matrix(bn),
            "matmul: expected matrices, got " + shape_str(an.shape) + " and " + shape_str(bn.shape));
  check_arg(an.shape[1] == bn.shape[0],
            "matmul: inner dimensions disagree: " + shape_str(an.shape) + " vs " + shape_str(bn.shape));
  const std::int64_t m = an.shape[0], k = an.shape[1], n = bn.shape[1];
  std::vector<double> out(static_cast<std::size_t>(m * n), 0.0);
  const double* A = an.value.data();
  const double* B = bn.value.data();
  for (std::int64_t i = 0; i < m; ++i) {
    double* C = out.data() + i * n;
    for (std::int64_t kk = 0; kk < k; ++kk) {
      const double av = A[i * k + kk];
      const double* Br = B + kk * n;
      for (std::int64_t j = 0; j < n; ++j) C[j] += av * Br[j];
    }
  }
  return Tensor::make_op({m, n}, std::move(out), {a, b}, [m, k, n](detail::Node& self) {
    const auto& A = self.parents[0]->value;
    const auto& B = self.parents[1]->value;
    const auto& G = self.grad;
    auto& dA = self.parents[0]->grad_buf();
    auto& dB = self.parents[1]->grad_buf();
    // dA += G * B^T
    for (std::int64_t i = 0; i < m; ++i)
      for (std::int64_t kk = 0; kk < k; ++kk) {
        double acc = 0.0;
        const double* Gr = G.data() + i * n;
        const double* Br = B.data() + kk * n;
        for (std::int64_t j = 0; j < n; ++j) acc += Gr[j] * Br[j];
        dA[i * k + kk] += acc;
      }
    // dB += A^T * G
    for (std::int64_t i = 0; i < m; ++i) {
      const double* Gr = G.data() + i * n;
      for (std::int64_t kk = 0; kk < k; ++kk) {
        const double av = A[i * k + kk];
        double* dBr = dB.data() + kk * n;
        for (std::int64_t j = 0; j < n; ++j) dBr[j] += av * Gr[j];
      }
    }
  });
}

Tensor transpose(const Tensor& a) {
  const auto& an = deref(a, "transpose");
  check_arg(is_matrix(an), "transpose: expected a matrix, got " + shape_str(an.shape));
  const std::int64_t m = an.shape[0], n = an.shape[1];
  std::vector<double> out(an.value.size());
  for (std::int64_t i = 0; i < m; ++i)
    for (std::int64_t j = 0; j < n; ++j) out[j * m + i] = an.value[i * n + j];
  return Tensor::make_op({n, m}, std::move(out), {a}, [m, n](detail::Node& self) {
    auto& dA = self.parents[0]->grad_buf();
    const auto& G = self.grad;
    for (std::int64_t i = 0; i < m; ++i)
      for (std::int64_t j = 0; j < n; ++j) dA[i * n + j] += G[j * m + i];
  });
}

namespace {

Tensor binary_same_shape(const char* op, const Tensor& a, const Tensor& b,
                         const std::function<double(double, double)>& f,
                         std::function<void(detail::Node&)> backprop) {
  const auto& an = deref(a, op);
  const auto& bn = deref(b, op);
  check_arg(an.shape == bn.shape, std::string(op) + ": shape mismatch: " + shape_str(an.shape) +
                                      " vs " + shape_str(bn.shape));
  std::vector<double> out(an.value.size());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = f(an.value[i], bn.value[i]);
  return Tensor::make_op(an.shape, std::move(out), {a, b}, std::move(backprop));
}

}  // namespace

Tensor add(const Tensor& a, const Tensor& b) {
  return binary_same_shape("add", a, b, [](double x, double y) { return x + y; },
                           [](detail::Node& self) {
                             add_into(self.parents[0]->grad_buf(), self.grad);
                             add_into(self.parents[1]->grad_buf(), self.grad);
                           });
}

Tensor sub(const Tensor& a, const Tensor& b) {
  return binary_same_shape("sub", a, b, [](double x, double y) { return x - y; },
                           [](detail::Node& self) {
                             add_into(self.parents[0]->grad_buf(), self.grad);
                             auto& db = self.parents[1]->grad_buf();
                             for (std::size_t i = 0; i < db.size(); ++i) db[i] -= self.grad[i];
                           });
}

Tensor mul(const Tensor& a, const Tensor& b) {
  return binary_same_shape("mul", a, b, [](double x, double y) { return x * y; },
                           [](detail::Node& self) {
                             const auto& av = self.parents[0]->value;
                             const auto& bv = self.parents[1]->value;
                             auto& da = self.parents[0]->grad_buf();
                             auto& db = self.parents[1]->grad_buf();
                             for (std::size_t i = 0; i < av.size(); ++i) {
                               da[i] += self.grad[i] * bv[i];
                               db[i] += self.grad[i] * av[i];
                             }
                           });
}

Tensor add_scaled(const Tensor& a, const Tensor& b, double s) {
  check_arg(std::isfinite(s), "add_scaled: scale must be finite");
  return binary_same_shape("add_scaled", a, b, [s](double x, double y) { return x + s * y; },
                           [s](detail::Node& self) {
                             add_into(self.parents[0]->grad_buf(), self.grad);
                             auto& db = self.parents[1]->grad_buf();
                             for (std::size_t i = 0; i < db.size(); ++i) db[i] += s * self.grad[i];
                           });
}

Tensor scale(const Tensor& a, double s) {
  const auto& an = deref(a, "scale");
  check_arg(std::isfinite(s), "scale: factor must be finite");
  std::vector<double> out(an.value.size());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = an.value[i] * s;
  return Tensor::make_op(an.shape, std::move(out), {a}, [s](detail::Node& self) {
    auto& da = self.parents[0]->grad_buf();
    for (std::size_t i = 0; i < da.size(); ++i) da[i] += s * self.grad[i];
  });
}

Tensor add_col_bias(const Tensor& x, const Tensor& b) {
  const auto& xn = deref(x, "add_col_bias");
  const auto& bn = deref(b, "add_col_bias");
  check_arg(is_matrix(xn), "add_col_bias: x must be a matrix, got " + shape_str(xn.shape));
  check_arg(bn.shape.size() == 1 && bn.shape[0] == xn.shape[0],
            "add_col_bias: bias shape " + shape_str(bn.shape) + " does not match rows of " +
                shape_str(xn.shape));
  const std::int64_t m = xn.shape[0], n = xn.shape[1];
  std::vector<double> out(xn.value.size());
  for (std::int64_t i = 0; i < m; ++i)
    for (std::int64_t j = 0; j < n; ++j) out[i * n + j] = xn.value[i * n + j] + bn.value[i];
  return Tensor::make_op(xn.shape, std::move(out), {x, b}, [m, n](detail::Node& self) {
    add_into(self.parents[0]->grad_buf(), self.grad);
    auto& db = self.parents[1]->grad_buf();
    for (std::int64_t i = 0; i < m; ++i) {
      double acc = 0.0;
      for (std::int64_t j = 0; j < n; ++j) acc += self.grad[i * n + j];
      db[i] += acc;
    }
  });
}

Tensor relu(const Tensor& a) {
  const auto& an = deref(a, "relu");
  std::vector<double> out(an.value.size());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = an.value[i] > 0.0 ? an.value[i] : 0.0;
  return Tensor::make_op(an.shape, std::move(out), {a}, [](detail::Node& self) {
    const auto& av = self.parents[0]->value;
    auto& da = self.parents[0]->grad_buf();
    for (std::size_t i = 0; i < av.size(); ++i)
      if (av[i] > 0.0) da[i] += self.grad[i];
  });
}

Tensor softmax_rows(const Tensor& x, const Tensor& keep_mask) {
  const auto& xn = deref(x, "softmax_rows");
  check_arg(is_matrix(xn), "softmax_rows: expected a matrix, got " + shape_str(xn.shape));
  const std::int64_t m = xn.shape[0], n = xn.shape[1];
  const double* keep = nullptr;
  if (keep_mask.defined()) {
    const auto& kn = *keep_mask.node();
    check_arg(kn.shape == xn.shape, "softmax_rows: mask shape " + shape_str(kn.shape) +
                                        " does not match " + shape_str(xn.shape));
    check_arg(!kn.requires_grad && kn.owner == nullptr,
              "softmax_rows: mask must not carry gradient");
    for (double v : kn.value)
      check_arg(v == 0.0 || v == 1.0, "softmax_rows: mask entries must be 0 or 1");
    keep = kn.value.data();
  }
  std::vector<double> out(xn.value.size(), 0.0);
  for (std::int64_t i = 0; i < m; ++i) {
    const double* row = xn.value.data() + i * n;
    const double* krow = keep ? keep + i * n : nullptr;
    std::int64_t kept = 0;
    double mx = -std::numeric_limits<double>::infinity();
    for (std::int64_t j = 0; j < n; ++j)
      if (!krow || krow[j] == 1.0) {
        ++kept;
        mx = std::max(mx, row[j]);
      }
    check_arg(kept > 0, "softmax_rows: row " + std::to_string(i) + " is fully masked");
    if (!std::isfinite(mx))
      throw std::runtime_error("softmax_rows: row " + std::to_string(i) +
                               " has no finite kept logits");
    double denom = 0.0;
    double* orow = out.data() + i * n;
    for (std::int64_t j = 0; j < n; ++j) {
      if (!krow || krow[j] == 1.0) {
        orow[j] = std::exp(row[j] - mx);
        denom += orow[j];
      }
    }
    for (std::int64_t j = 0; j < n; ++j) orow[j] /= denom;
    if (krow)
      for (std::int64_t j = 0; j < n; ++j)
        if (krow[j] != 1.0) orow[j] = 0.0;
  }
  std::vector<Tensor> parents{x};
  if (keep_mask.defined()) parents.push_back(keep_mask);
  return Tensor::make_op(xn.shape, std::move(out), std::move(parents), [m, n](detail::Node& self) {
    // masked entries have p = 0, which zeroes their contribution on both sides
    const auto& p = self.value;
    auto& dx = self.parents[0]->grad_buf();
    for (std::int64_t i = 0; i < m; ++i) {
      const double* pr = p.data() + i * n;
      const double* gr = self.grad.data() + i * n;
      double dot = 0.0;
      for (std::int64_t j = 0; j < n; ++j) dot += pr[j] * gr[j];
      double* dr = dx.data() + i * n;
      for (std::int64_t j = 0; j < n; ++j) dr[j] += pr[j] * (gr[j] - dot);
    }
  });
}

Tensor layer_norm(const Tensor& x, const Tensor& gain, const Tensor& bias) {
  const auto& xn = deref(x, "layer_norm");
  const auto& gn = deref(gain, "layer_norm");
  const auto& bn = deref(bias, "layer_norm");
  check_arg(!xn.shape.empty(), "layer_norm: scalar input");
  const std::int64_t d = xn.shape.back();
  check_arg(d >= 2, "layer_norm: last dimension must be at least 2, got " + shape_str(xn.shape));
  check_arg(gn.shape == Shape{d} && bn.shape == Shape{d},
            "layer_norm: gain " + shape_str(gn.shape) + " / bias " + shape_str(bn.shape) +
                " must both have shape [" + std::to_string(d) + "]");
  constexpr double kEps = 1e-5;
  const std::int64_t rows = static_cast<std::int64_t>(xn.value.size()) / d;
  std::vector<double> out(xn.value.size());
  for (std::int64_t r = 0; r < rows; ++r) {
    const double* row = xn.value.data() + r * d;
    double mu = 0.0;
    for (std::int64_t j = 0; j < d; ++j) mu += row[j];
    mu /= static_cast<double>(d);
    double var = 0.0;
    for (std::int64_t j = 0; j < d; ++j) var += (row[j] - mu) * (row[j] - mu);
    var /= static_cast<double>(d);
    const double inv = 1.0 / std::sqrt(var + kEps);
    double* orow = out.data() + r * d;
    for (std::int64_t j = 0; j < d; ++j)
      orow[j] = gn.value[j] * ((row[j] - mu) * inv) + bn.value[j];
  }
  return Tensor::make_op(xn.shape, std::move(out), {x, gain, bias}, [rows, d](detail::Node& self) {
    const auto& xv = self.parents[0]->value;
    const auto& gv = self.parents[1]->value;
    auto& dx = self.parents[0]->grad_buf();
    auto& dg = self.parents[1]->grad_buf();
    auto& db = self.parents[2]->grad_buf();
    constexpr double eps = 1e-5;
    std::vector<double> xhat(static_cast<std::size_t>(d));
    for (std::int64_t r = 0; r < rows; ++r) {
      const double* row = xv.data() + r * d;
      const double* gr = self.grad.data() + r * d;
      double mu = 0.0;
      for (std::int64_t j = 0; j < d; ++j) mu += row[j];
      mu /= static_cast<double>(d);
      double var = 0.0;
      for (std::int64_t j = 0; j < d; ++j) var += (row[j] - mu) * (row[j] - mu);
      var /= static_cast<double>(d);
      const double inv = 1.0 / std::sqrt(var + eps);
      double mean_gy = 0.0, mean_gyx = 0.0;
      for (std::int64_t j = 0; j < d; ++j) {
        xhat[j] = (row[j] - mu) * inv;
        const double gy = gv[j] * gr[j];
        mean_gy += gy;
        mean_gyx += gy * xhat[j];
      }
      mean_gy /= static_cast<double>(d);
      mean_gyx /= static_cast<double>(d);
      double* dxr = dx.data() + r * d;
      for (std::int64_t j = 0; j < d; ++j) {
        const double gy = gv[j] * gr[j];
        dxr[j] += inv * (gy - mean_gy - xhat[j] * mean_gyx);
        dg[j] += gr[j] * xhat[j];
        db[j] += gr[j];
      }
    }
  });
}

Tensor embed_cols(const Tensor& table, const std::vector<int>& ids) {
  const auto& tn = deref(table, "embed_cols");
  check_arg(is_matrix(tn), "embed_cols: table must be a matrix, got " + shape_str(tn.shape));
  check_arg(!ids.empty(), "embed_cols: empty id sequence");
  const std::int64_t d = tn.shape[0], V = tn.shape[1];
  const std::int64_t n = static_cast<std::int64_t>(ids.size());
  for (std::size_t j = 0; j < ids.size(); ++j)
    check_arg(ids[j] >= 0 && ids[j] < V, "embed_cols: id " + std::to_string(ids[j]) +
                                             " at position " + std::to_string(j) +
                                             " outside table " + shape_str(tn.shape));
  std::vector<double> out(static_cast<std::size_t>(d * n));
  for (std::int64_t r = 0; r < d; ++r)
    for (std::int64_t j = 0; j < n; ++j) out[r * n + j] = tn.value[r * V + ids[j]];
  return Tensor::make_op({d, n}, std::move(out), {table}, [d, V, n, ids](detail::Node& self) {
    auto& dt = self.parents[0]->grad_buf();
    for (std::int64_t r = 0; r < d; ++r)
      for (std::int64_t j = 0; j < n; ++j) dt[r * V + ids[j]] += self.grad[r * n + j];
  });
}

Tensor sum(const Tensor& a) {
  const auto& an = deref(a, "sum");
  double acc = 0.0;
  for (double v : an.value) acc += v;
  return Tensor::make_op({}, {acc}, {a}, [](detail::Node& self) {
    auto& da = self.parents[0]->grad_buf();
    const double g = self.grad[0];
    for (auto& v : da) v += g;
  });
}

Tensor mean(const Tensor& a) {
  const auto& an = deref(a, "mean");
  double acc = 0.0;
  for (double v : an.value) acc += v;
  const double inv = 1.0 / static_cast<double>(an.value.size());
  return Tensor::make_op({}, {acc * inv}, {a}, [inv](detail::Node& self) {
    auto& da = self.parents[0]->grad_buf();
    const double g = self.grad[0] * inv;
    for (auto& v : da) v += g;
  });
}

}  // namespace attnlink
