#include "gues/tensor.hpp"

#include <atomic>
#include <cmath>
#include <limits>
#include <numbers>
#include <sstream>

namespace gues {

std::string shape_str(const Shape& shape) {
  std::ostringstream os;
  os << '(';
  for (std::size_t i = 0; i < shape.size(); ++i) {
    if (i) os << ',';
    os << shape[i];
  }
  os << ')';
  return os.str();
}

Index numel_of(const Shape& shape) {
  Index n = 1;
  for (Index e : shape) n *= e;
  return n;
}

Tensor::Tensor(Shape shape, Buffer data, bool requires_grad)
    : impl_(std::make_shared<TensorImpl>()) {
  for (Index e : shape) {
    if (e <= 0) throw ShapeError("tensor extents must be positive, got " + shape_str(shape));
  }
  if (numel_of(shape) != data.size()) {
    throw ShapeError("tensor shape " + shape_str(shape) + " does not match " +
                     std::to_string(data.size()) + " values");
  }
  impl_->shape = std::move(shape);
  impl_->data = std::move(data);
  impl_->requires_grad = requires_grad;
}

Tensor Tensor::zeros(Shape shape, bool requires_grad) {
  return full(std::move(shape), 0.0, requires_grad);
}

Tensor Tensor::ones(Shape shape, bool requires_grad) {
  return full(std::move(shape), 1.0, requires_grad);
}

Tensor Tensor::full(Shape shape, double value, bool requires_grad) {
  const Index n = numel_of(shape);
  return Tensor(std::move(shape), Buffer::Constant(n, value), requires_grad);
}

Tensor Tensor::from(Shape shape, std::initializer_list<double> values, bool requires_grad) {
  return from(std::move(shape), std::vector<double>(values), requires_grad);
}

Tensor Tensor::from(Shape shape, const std::vector<double>& values, bool requires_grad) {
  Buffer data = Eigen::Map<const Buffer>(values.data(), static_cast<Index>(values.size()));
  return Tensor(std::move(shape), std::move(data), requires_grad);
}

Index Tensor::dim(int axis) const {
  const int r = rank();
  if (axis < 0) axis += r;
  if (axis < 0 || axis >= r) {
    throw ShapeError("axis " + std::to_string(axis) + " out of range for shape " +
                     shape_str(shape()));
  }
  return impl_->shape[static_cast<std::size_t>(axis)];
}

double Tensor::item() const {
  if (numel() != 1) throw ShapeError("item() on tensor of shape " + shape_str(shape()));
  return impl_->data[0];
}

Buffer& Tensor::mutable_grad() {
  if (!has_grad()) impl_->grad = Buffer::Zero(numel());
  return impl_->grad;
}

void Tensor::zero_grad() {
  if (has_grad()) impl_->grad.setZero();
}

Tensor Tensor::detach() const { return Tensor(shape(), data(), false); }

void accumulate_grad(TensorImpl& t, const Buffer& delta) {
  if (t.grad.size() == 0) {
    t.grad = delta;
  } else {
    t.grad += delta;
  }
}

namespace {
thread_local Graph* current_graph = nullptr;
std::atomic<std::uint64_t> next_graph_id{1};
}  // namespace

Graph::Graph() : id_(next_graph_id.fetch_add(1)) {}

Graph* active_graph() { return current_graph; }

GraphScope::GraphScope(Graph& graph) : previous_(current_graph) { current_graph = &graph; }

GraphScope::~GraphScope() { current_graph = previous_; }

bool any_requires_grad(const std::vector<Tensor>& inputs) {
  for (const auto& t : inputs) {
    if (t.defined() && t.requires_grad()) return true;
  }
  return false;
}

void maybe_record(const char* op, const std::vector<Tensor>& inputs, Tensor& output,
                  BackwardFn backward) {
  Graph* g = active_graph();
  if (g == nullptr || !any_requires_grad(inputs)) return;
  g->record(op, inputs, output, std::move(backward));
}

void Graph::record(std::string op, const std::vector<Tensor>& inputs, Tensor& output,
                   BackwardFn backward) {
  GraphNode node;
  node.op = std::move(op);
  for (const auto& t : inputs) {
    const auto& impl = t.impl();
    node.inputs.push_back(impl->graph_id == id_ ? impl->node : -1);
    node.input_tensors.push_back(impl);
  }
  output.set_requires_grad(true);
  output.impl()->graph_id = id_;
  output.impl()->node = static_cast<Index>(nodes_.size());
  node.output = output.impl();
  node.backward = std::move(backward);
  nodes_.push_back(std::move(node));
}

void Graph::backward(const Tensor& loss) {
  if (loss.numel() != 1) {
    throw ShapeError("backward requires a scalar loss, got shape " + shape_str(loss.shape()));
  }
  const auto& impl = loss.impl();
  if (impl->graph_id != id_ || impl->node < 0) {
    throw Error("backward: loss was not produced on this graph");
  }
  for (auto& node : nodes_) node.output->grad.resize(0);
  impl->grad = Buffer::Ones(1);
  for (Index i = impl->node; i >= 0; --i) {
    auto& node = nodes_[static_cast<std::size_t>(i)];
    if (node.output->grad.size() == 0) continue;
    node.backward(node.output->grad);
  }
}

std::string Graph::dump() const {
  std::ostringstream os;
  for (std::size_t i = 0; i < nodes_.size(); ++i) {
    os << i << ' ' << nodes_[i].op << ' ';
    const auto& in = nodes_[i].inputs;
    for (std::size_t j = 0; j < in.size(); ++j) {
      if (j) os << ',';
      if (in[j] < 0) {
        os << '-';
      } else {
        os << in[j];
      }
    }
    os << '\n';
  }
  return os.str();
}

double Rng::uniform() {
  return static_cast<double>(engine_() >> 11) * 0x1.0p-53;
}

double Rng::normal() {
  if (has_spare_) {
    has_spare_ = false;
    return spare_;
  }
  double u1 = uniform();
  while (u1 <= 0.0) u1 = uniform();
  const double u2 = uniform();
  const double r = std::sqrt(-2.0 * std::log(u1));
  const double theta = 2.0 * std::numbers::pi * u2;
  spare_ = r * std::sin(theta);
  has_spare_ = true;
  return r * std::cos(theta);
}

std::uint64_t Rng::below(std::uint64_t n) {
  const std::uint64_t limit = std::numeric_limits<std::uint64_t>::max() -
                              std::numeric_limits<std::uint64_t>::max() % n;
  std::uint64_t v = engine_();
  while (v >= limit) v = engine_();
  return v % n;
}

}  // namespace gues
