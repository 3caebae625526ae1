#pragma once

#include <cstdint>
#include <functional>
#include <span>
#include <string>
#include <unordered_map>
#include <vector>

#include "strgnn/error.hpp"
#include "strgnn/rng.hpp"

namespace strgnn {

// Dense row-major tensor of doubles. Everything in the model is rank-2;
// rank-1/rank-0 shapes are allowed but the ops below treat values as
// matrices ([1 x n] rows, [1 x 1] scalars).
struct Tensor {
  std::vector<int> shape;
  std::vector<double> data;

  Tensor() = default;
  explicit Tensor(std::vector<int> s);
  Tensor(std::vector<int> s, std::vector<double> values);

  static Tensor zeros(int rows, int cols);
  static Tensor scalar(double v);
  static Tensor uniform(int rows, int cols, double lo, double hi, Rng& rng);

  std::int64_t size() const;
  int rows() const { return shape.empty() ? 1 : shape[0]; }
  int cols() const { return shape.size() < 2 ? 1 : shape[1]; }

  double& at(int r, int c) { return data[static_cast<std::size_t>(r) * cols() + c]; }
  double at(int r, int c) const { return data[static_cast<std::size_t>(r) * cols() + c]; }

  bool same_shape(const Tensor& o) const { return shape == o.shape; }
  std::string shape_str() const;
  bool all_finite() const;
};

// Trainable weight plus its accumulated gradient.
struct Parameter {
  std::string name;
  Tensor value;
  Tensor grad;

  Parameter(std::string n, Tensor v);
  void zero_grad();
};

enum class Activation { Relu, Sigmoid, Tanh };

using ValueId = int;

// Eagerly evaluated autodiff tape. Forward values are computed on op
// creation; backward() walks the recorded nodes in reverse. A tape is
// single-threaded; run one tape per worker and flush gradients into the
// shared Parameters in a fixed order to keep training deterministic.
class Tape {
public:
  ValueId constant(Tensor t);
  ValueId param(Parameter& p);  // one node per Parameter, reused across calls

  ValueId matmul(ValueId a, ValueId b);
  // Same-shape elementwise add, or row-broadcast add when b is [1 x n].
  ValueId add(ValueId a, ValueId b);
  ValueId mul(ValueId a, ValueId b);  // elementwise, same shape
  ValueId affine(ValueId a, double scale, double shift);
  ValueId activation(ValueId a, Activation kind);
  ValueId relu(ValueId a) { return activation(a, Activation::Relu); }
  ValueId sigmoid(ValueId a) { return activation(a, Activation::Sigmoid); }
  ValueId tanh(ValueId a) { return activation(a, Activation::Tanh); }
  ValueId concat_cols(std::span<const ValueId> parts);
  ValueId gather_rows(ValueId a, std::vector<int> rows);
  ValueId pad_rows(ValueId a, int total_rows);  // zero rows appended
  // out[i][j] = a[i][j] * s[i][0]; gradients flow into both operands.
  ValueId row_scale(ValueId a, ValueId s);
  ValueId reshape(ValueId a, std::vector<int> shape);
  ValueId sum(ValueId a);  // -> [1 x 1]
  // Binary cross entropy against a fixed 0/1 target; the score is clamped
  // to [eps, 1-eps] and the clamp kills the gradient outside that range.
  ValueId bce_loss(ValueId score, double target, double eps = 1e-7);

  const Tensor& value(ValueId id) const;

  // Reverse pass seeded with d(out)/d(loss) = seed; accumulates into the
  // grad of every Parameter used by the tape. Calling twice doubles the
  // accumulated gradients.
  void backward(ValueId loss, double seed = 1.0);
  // Same reverse pass but the per-parameter gradients stay tape-local;
  // flush_param_grads() adds them into the Parameters. Lets batch workers
  // run backward in parallel while the flushes stay sequential.
  void backward_local(ValueId loss, double seed = 1.0);
  void flush_param_grads();

  std::size_t num_nodes() const { return nodes_.size(); }

private:
  enum class Op {
    Constant,
    Param,
    Matmul,
    Add,
    AddRowBroadcast,
    Mul,
    Affine,
    Relu,
    Sigmoid,
    Tanh,
    ConcatCols,
    GatherRows,
    PadRows,
    RowScale,
    Reshape,
    Sum,
    Bce,
  };

  struct Node {
    Op op;
    std::vector<ValueId> in;
    Tensor out;
    Tensor grad;           // allocated lazily during backward
    bool needs_grad = false;
    Parameter* parameter = nullptr;
    std::vector<int> rows;  // GatherRows
    double c0 = 0.0, c1 = 0.0;  // Affine scale/shift, Bce target/eps
  };

  ValueId push(Node n);
  Node& node(ValueId id) { return nodes_[static_cast<std::size_t>(id)]; }
  const Node& node(ValueId id) const { return nodes_[static_cast<std::size_t>(id)]; }
  Tensor& grad_buffer(ValueId id);
  void run_backward(ValueId loss, double seed);

  std::vector<Node> nodes_;
  std::unordered_map<const Parameter*, ValueId> param_nodes_;
};

// Central-difference check of p.grad against numeric gradients of `loss`,
// which must evaluate the same deterministic forward the gradient came
// from. p.grad has to be populated (one backward pass, zeroed before it).
// Returns the max relative error over coordinates with denominator
// max(|analytic|, |numeric|, 1e-8). Points where the forward is not
// differentiable (a relu input at exactly 0, a sort-order tie within eps)
// are the caller's responsibility to avoid.
double finite_difference_check(const std::function<double()>& loss,
                               Parameter& p, double eps);

// Checkpoint file: 8-byte magic, little-endian u64 header length, JSON
// header {"extra": ..., "tensors": [{name, shape, offset}]}, then raw
// little-endian float64 payloads. Round-trips bit-exactly.
void save_checkpoint(const std::string& path,
                     std::span<Parameter* const> params,
                     const std::string& extra_json);
// Header "extra" field of a checkpoint, without touching the payload.
std::string read_checkpoint_extra(const std::string& path);
// Loads tensors by name into the given parameters (shapes must match).
void load_checkpoint(const std::string& path, std::span<Parameter* const> params);

}  // namespace strgnn
