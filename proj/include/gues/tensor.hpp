#pragma once

#include <cstdint>
#include <functional>
#include <initializer_list>
#include <memory>
#include <random>
#include <stdexcept>
#include <string>
#include <vector>

#include <Eigen/Dense>

namespace gues {

using Index = std::int64_t;
using Shape = std::vector<Index>;
using Buffer = Eigen::ArrayXd;

class Error : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

class ShapeError : public Error {
 public:
  using Error::Error;
};

class UnknownPrimitive : public Error {
 public:
  using Error::Error;
};

class NumericError : public Error {
 public:
  using Error::Error;
};

std::string shape_str(const Shape& shape);
Index numel_of(const Shape& shape);

class Graph;

struct TensorImpl {
  Shape shape;
  Buffer data;
  Buffer grad;  // empty until a gradient is accumulated
  bool requires_grad = false;
  std::uint64_t graph_id = 0;  // 0 = not produced on any graph
  Index node = -1;
};

/// Dense row-major float64 array with an optional gradient buffer.
///
/// Copies share storage (handle semantics). Forward primitives never mutate
/// their inputs; only parameters are updated in place by optimizers.
class Tensor {
 public:
  Tensor() = default;
  Tensor(Shape shape, Buffer data, bool requires_grad = false);

  static Tensor zeros(Shape shape, bool requires_grad = false);
  static Tensor ones(Shape shape, bool requires_grad = false);
  static Tensor full(Shape shape, double value, bool requires_grad = false);
  static Tensor from(Shape shape, std::initializer_list<double> values,
                     bool requires_grad = false);
  static Tensor from(Shape shape, const std::vector<double>& values,
                     bool requires_grad = false);

  bool defined() const { return impl_ != nullptr; }
  const Shape& shape() const { return impl_->shape; }
  Index dim(int axis) const;
  int rank() const { return static_cast<int>(impl_->shape.size()); }
  Index numel() const { return impl_->data.size(); }

  const Buffer& data() const { return impl_->data; }
  Buffer& mutable_data() { return impl_->data; }
  double operator[](Index i) const { return impl_->data[i]; }
  double item() const;

  bool requires_grad() const { return impl_->requires_grad; }
  void set_requires_grad(bool value) { impl_->requires_grad = value; }
  bool has_grad() const { return impl_->grad.size() > 0; }
  const Buffer& grad() const { return impl_->grad; }
  Buffer& mutable_grad();
  void zero_grad();
  void clear_grad() { impl_->grad.resize(0); }

  /// Fresh leaf with copied values and no graph linkage.
  Tensor detach() const;

  const std::shared_ptr<TensorImpl>& impl() const { return impl_; }

 private:
  std::shared_ptr<TensorImpl> impl_;
};

using BackwardFn = std::function<void(const Buffer& out_grad)>;

struct GraphNode {
  std::string op;
  std::vector<Index> inputs;  // producing node index, -1 for leaves
  std::vector<std::shared_ptr<TensorImpl>> input_tensors;
  std::shared_ptr<TensorImpl> output;
  BackwardFn backward;
};

/// Tape of primitive applications in creation order.
class Graph {
 public:
  Graph();
  Graph(const Graph&) = delete;
  Graph& operator=(const Graph&) = delete;

  void record(std::string op, const std::vector<Tensor>& inputs, Tensor& output,
              BackwardFn backward);

  /// Seeds d(loss)/d(loss) = 1 and propagates in reverse creation order.
  /// Leaf gradients accumulate across calls; intermediate gradients are reset.
  void backward(const Tensor& loss);

  std::size_t size() const { return nodes_.size(); }
  const GraphNode& node(std::size_t i) const { return nodes_[i]; }

  /// One line per node: "index op input,input,...". Leaves print as "-".
  std::string dump() const;

 private:
  std::uint64_t id_;
  std::vector<GraphNode> nodes_;
};

/// Makes a graph the recording target for the current thread.
class GraphScope {
 public:
  explicit GraphScope(Graph& graph);
  ~GraphScope();
  GraphScope(const GraphScope&) = delete;
  GraphScope& operator=(const GraphScope&) = delete;

 private:
  Graph* previous_;
};

Graph* active_graph();

bool any_requires_grad(const std::vector<Tensor>& inputs);

/// Records `output` on the active graph when some input requires a gradient.
void maybe_record(const char* op, const std::vector<Tensor>& inputs, Tensor& output,
                  BackwardFn backward);

/// Adds `delta` into the gradient buffer of `t`, allocating it on first use.
void accumulate_grad(TensorImpl& t, const Buffer& delta);

/// Seeded generator. Uniforms come from the top 53 bits of mt19937_64 and
/// normals from Box-Muller, so sequences are identical on every platform.
class Rng {
 public:
  explicit Rng(std::uint64_t seed = 0) : engine_(seed) {}

  std::uint64_t next_u64() { return engine_(); }
  double uniform();
  double uniform(double lo, double hi) { return lo + (hi - lo) * uniform(); }
  double normal();
  /// Unbiased integer in [0, n).
  std::uint64_t below(std::uint64_t n);

  template <typename T>
  void shuffle(std::vector<T>& values) {
    for (std::size_t i = values.size(); i > 1; --i) {
      std::swap(values[i - 1], values[below(i)]);
    }
  }

 private:
  std::mt19937_64 engine_;
  bool has_spare_ = false;
  double spare_ = 0.0;
};

}  // namespace gues
