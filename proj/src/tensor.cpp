#include "strgnn/tensor.hpp"

#include <algorithm>
#include <bit>
#include <cmath>
#include <cstring>
#include <fstream>
#include <numeric>
#include <sstream>

#include "json.hpp"

namespace strgnn {

static_assert(std::endian::native == std::endian::little,
              "checkpoint format assumes a little-endian host");

namespace {

std::int64_t shape_size(const std::vector<int>& shape) {
  std::int64_t n = 1;
  for (int d : shape) {
    if (d < 0) throw ShapeError("negative dimension in shape");
    n *= d;
  }
  return n;
}

#ifndef NDEBUG
void check_finite(const Tensor& t, const char* op) {
  if (!t.all_finite()) {
    throw NumericError(std::string("non-finite value produced by ") + op);
  }
}
#define STRGNN_CHECK_FINITE(t, op) check_finite(t, op)
#else
#define STRGNN_CHECK_FINITE(t, op) (void)0
#endif

// c += a * b, all row-major dense.
void matmul_acc(const double* a, const double* b, double* c, int m, int k, int n) {
  for (int i = 0; i < m; ++i) {
    const double* arow = a + static_cast<std::size_t>(i) * k;
    double* crow = c + static_cast<std::size_t>(i) * n;
    for (int p = 0; p < k; ++p) {
      const double av = arow[p];
      const double* brow = b + static_cast<std::size_t>(p) * n;
      for (int j = 0; j < n; ++j) crow[j] += av * brow[j];
    }
  }
}

// c += a * b^T  (a: m x n, b: k x n, c: m x k)
void matmul_abt_acc(const double* a, const double* b, double* c, int m, int n, int k) {
  for (int i = 0; i < m; ++i) {
    const double* arow = a + static_cast<std::size_t>(i) * n;
    double* crow = c + static_cast<std::size_t>(i) * k;
    for (int p = 0; p < k; ++p) {
      const double* brow = b + static_cast<std::size_t>(p) * n;
      double acc = 0.0;
      for (int j = 0; j < n; ++j) acc += arow[j] * brow[j];
      crow[p] += acc;
    }
  }
}

// c += a^T * b  (a: m x k, b: m x n, c: k x n)
void matmul_atb_acc(const double* a, const double* b, double* c, int m, int k, int n) {
  for (int i = 0; i < m; ++i) {
    const double* arow = a + static_cast<std::size_t>(i) * k;
    const double* brow = b + static_cast<std::size_t>(i) * n;
    for (int p = 0; p < k; ++p) {
      const double av = arow[p];
      double* crow = c + static_cast<std::size_t>(p) * n;
      for (int j = 0; j < n; ++j) crow[j] += av * brow[j];
    }
  }
}

}  // namespace

Tensor::Tensor(std::vector<int> s) : shape(std::move(s)) {
  data.assign(static_cast<std::size_t>(shape_size(shape)), 0.0);
}

Tensor::Tensor(std::vector<int> s, std::vector<double> values) : shape(std::move(s)), data(std::move(values)) {
  if (static_cast<std::int64_t>(data.size()) != shape_size(shape)) {
    throw ShapeError("value count does not match shape " + shape_str());
  }
}

Tensor Tensor::zeros(int rows, int cols) { return Tensor({rows, cols}); }

Tensor Tensor::scalar(double v) { return Tensor({1, 1}, {v}); }

Tensor Tensor::uniform(int rows, int cols, double lo, double hi, Rng& rng) {
  Tensor t({rows, cols});
  for (double& x : t.data) x = rng_uniform(rng, lo, hi);
  return t;
}

std::int64_t Tensor::size() const { return static_cast<std::int64_t>(data.size()); }

std::string Tensor::shape_str() const {
  std::ostringstream os;
  os << '[';
  for (std::size_t i = 0; i < shape.size(); ++i) {
    if (i) os << 'x';
    os << shape[i];
  }
  os << ']';
  return os.str();
}

bool Tensor::all_finite() const {
  for (double v : data) {
    if (!std::isfinite(v)) return false;
  }
  return true;
}

Parameter::Parameter(std::string n, Tensor v) : name(std::move(n)), value(std::move(v)), grad(value.shape) {}

void Parameter::zero_grad() { std::fill(grad.data.begin(), grad.data.end(), 0.0); }

ValueId Tape::push(Node n) {
  nodes_.push_back(std::move(n));
  return static_cast<ValueId>(nodes_.size() - 1);
}

ValueId Tape::constant(Tensor t) {
  Node n;
  n.op = Op::Constant;
  n.out = std::move(t);
  return push(std::move(n));
}

ValueId Tape::param(Parameter& p) {
  auto it = param_nodes_.find(&p);
  if (it != param_nodes_.end()) return it->second;
  Node n;
  n.op = Op::Param;
  n.out = p.value;
  n.needs_grad = true;
  n.parameter = &p;
  ValueId id = push(std::move(n));
  param_nodes_.emplace(&p, id);
  return id;
}

const Tensor& Tape::value(ValueId id) const { return node(id).out; }

ValueId Tape::matmul(ValueId a, ValueId b) {
  const Tensor& ta = node(a).out;
  const Tensor& tb = node(b).out;
  if (ta.cols() != tb.rows()) {
    throw ShapeError("matmul shape mismatch: " + ta.shape_str() + " * " + tb.shape_str());
  }
  Node n;
  n.op = Op::Matmul;
  n.in = {a, b};
  n.needs_grad = node(a).needs_grad || node(b).needs_grad;
  n.out = Tensor({ta.rows(), tb.cols()});
  matmul_acc(ta.data.data(), tb.data.data(), n.out.data.data(), ta.rows(), ta.cols(), tb.cols());
  STRGNN_CHECK_FINITE(n.out, "matmul");
  return push(std::move(n));
}

ValueId Tape::add(ValueId a, ValueId b) {
  const Tensor& ta = node(a).out;
  const Tensor& tb = node(b).out;
  Node n;
  n.in = {a, b};
  n.needs_grad = node(a).needs_grad || node(b).needs_grad;
  if (ta.same_shape(tb)) {
    n.op = Op::Add;
    n.out = ta;
    for (std::size_t i = 0; i < n.out.data.size(); ++i) n.out.data[i] += tb.data[i];
  } else if (tb.rows() == 1 && tb.cols() == ta.cols()) {
    n.op = Op::AddRowBroadcast;
    n.out = ta;
    for (int i = 0; i < ta.rows(); ++i) {
      for (int j = 0; j < ta.cols(); ++j) n.out.at(i, j) += tb.at(0, j);
    }
  } else {
    throw ShapeError("add shape mismatch: " + ta.shape_str() + " + " + tb.shape_str());
  }
  STRGNN_CHECK_FINITE(n.out, "add");
  return push(std::move(n));
}

ValueId Tape::mul(ValueId a, ValueId b) {
  const Tensor& ta = node(a).out;
  const Tensor& tb = node(b).out;
  if (!ta.same_shape(tb)) {
    throw ShapeError("mul shape mismatch: " + ta.shape_str() + " * " + tb.shape_str());
  }
  Node n;
  n.op = Op::Mul;
  n.in = {a, b};
  n.needs_grad = node(a).needs_grad || node(b).needs_grad;
  n.out = ta;
  for (std::size_t i = 0; i < n.out.data.size(); ++i) n.out.data[i] *= tb.data[i];
  STRGNN_CHECK_FINITE(n.out, "mul");
  return push(std::move(n));
}

ValueId Tape::affine(ValueId a, double scale, double shift) {
  Node n;
  n.op = Op::Affine;
  n.in = {a};
  n.needs_grad = node(a).needs_grad;
  n.c0 = scale;
  n.c1 = shift;
  n.out = node(a).out;
  for (double& v : n.out.data) v = scale * v + shift;
  STRGNN_CHECK_FINITE(n.out, "affine");
  return push(std::move(n));
}

ValueId Tape::activation(ValueId a, Activation kind) {
  Node n;
  n.in = {a};
  n.needs_grad = node(a).needs_grad;
  n.out = node(a).out;
  switch (kind) {
    case Activation::Relu:
      n.op = Op::Relu;
      for (double& v : n.out.data) v = v > 0.0 ? v : 0.0;
      break;
    case Activation::Sigmoid:
      n.op = Op::Sigmoid;
      for (double& v : n.out.data) v = 1.0 / (1.0 + std::exp(-v));
      break;
    case Activation::Tanh:
      n.op = Op::Tanh;
      for (double& v : n.out.data) v = std::tanh(v);
      break;
  }
  STRGNN_CHECK_FINITE(n.out, "activation");
  return push(std::move(n));
}

ValueId Tape::concat_cols(std::span<const ValueId> parts) {
  if (parts.empty()) throw ShapeError("concat_cols with no inputs");
  const int rows = node(parts[0]).out.rows();
  int cols = 0;
  bool needs = false;
  for (ValueId p : parts) {
    if (node(p).out.rows() != rows) {
      throw ShapeError("concat_cols row mismatch: " + node(parts[0]).out.shape_str() + " vs " +
                       node(p).out.shape_str());
    }
    cols += node(p).out.cols();
    needs = needs || node(p).needs_grad;
  }
  Node n;
  n.op = Op::ConcatCols;
  n.in.assign(parts.begin(), parts.end());
  n.needs_grad = needs;
  n.out = Tensor({rows, cols});
  int off = 0;
  for (ValueId p : parts) {
    const Tensor& t = node(p).out;
    for (int i = 0; i < rows; ++i) {
      std::copy_n(&t.data[static_cast<std::size_t>(i) * t.cols()], t.cols(),
                  &n.out.data[static_cast<std::size_t>(i) * cols + off]);
    }
    off += t.cols();
  }
  return push(std::move(n));
}

ValueId Tape::gather_rows(ValueId a, std::vector<int> rows) {
  const Tensor& ta = node(a).out;
  for (int r : rows) {
    if (r < 0 || r >= ta.rows()) throw ShapeError("gather_rows index out of range");
  }
  Node n;
  n.op = Op::GatherRows;
  n.in = {a};
  n.needs_grad = node(a).needs_grad;
  n.rows = std::move(rows);
  n.out = Tensor({static_cast<int>(n.rows.size()), ta.cols()});
  for (std::size_t i = 0; i < n.rows.size(); ++i) {
    std::copy_n(&ta.data[static_cast<std::size_t>(n.rows[i]) * ta.cols()], ta.cols(),
                &n.out.data[i * ta.cols()]);
  }
  return push(std::move(n));
}

ValueId Tape::pad_rows(ValueId a, int total_rows) {
  const Tensor& ta = node(a).out;
  if (total_rows < ta.rows()) throw ShapeError("pad_rows cannot shrink " + ta.shape_str());
  Node n;
  n.op = Op::PadRows;
  n.in = {a};
  n.needs_grad = node(a).needs_grad;
  n.out = Tensor({total_rows, ta.cols()});
  std::copy(ta.data.begin(), ta.data.end(), n.out.data.begin());
  return push(std::move(n));
}

ValueId Tape::row_scale(ValueId a, ValueId s) {
  const Tensor& ta = node(a).out;
  const Tensor& ts = node(s).out;
  if (ts.cols() != 1 || ts.rows() != ta.rows()) {
    throw ShapeError("row_scale expects [n x 1] scales, got " + ts.shape_str() + " for " +
                     ta.shape_str());
  }
  Node n;
  n.op = Op::RowScale;
  n.in = {a, s};
  n.needs_grad = node(a).needs_grad || node(s).needs_grad;
  n.out = ta;
  for (int i = 0; i < ta.rows(); ++i) {
    const double sv = ts.at(i, 0);
    for (int j = 0; j < ta.cols(); ++j) n.out.at(i, j) *= sv;
  }
  STRGNN_CHECK_FINITE(n.out, "row_scale");
  return push(std::move(n));
}

ValueId Tape::reshape(ValueId a, std::vector<int> shape) {
  const Tensor& ta = node(a).out;
  if (shape_size(shape) != ta.size()) {
    throw ShapeError("reshape size mismatch: " + ta.shape_str());
  }
  Node n;
  n.op = Op::Reshape;
  n.in = {a};
  n.needs_grad = node(a).needs_grad;
  n.out = Tensor(std::move(shape), ta.data);
  return push(std::move(n));
}

ValueId Tape::sum(ValueId a) {
  Node n;
  n.op = Op::Sum;
  n.in = {a};
  n.needs_grad = node(a).needs_grad;
  const Tensor& ta = node(a).out;
  n.out = Tensor::scalar(std::accumulate(ta.data.begin(), ta.data.end(), 0.0));
  STRGNN_CHECK_FINITE(n.out, "sum");
  return push(std::move(n));
}

ValueId Tape::bce_loss(ValueId score, double target, double eps) {
  const Tensor& ts = node(score).out;
  if (ts.size() != 1) throw ShapeError("bce_loss expects a scalar score, got " + ts.shape_str());
  Node n;
  n.op = Op::Bce;
  n.in = {score};
  n.needs_grad = node(score).needs_grad;
  n.c0 = target;
  n.c1 = eps;
  const double s = std::clamp(ts.data[0], eps, 1.0 - eps);
  n.out = Tensor::scalar(-(target * std::log(s) + (1.0 - target) * std::log(1.0 - s)));
  STRGNN_CHECK_FINITE(n.out, "bce_loss");
  return push(std::move(n));
}

Tensor& Tape::grad_buffer(ValueId id) {
  Node& n = node(id);
  if (n.grad.data.empty()) n.grad = Tensor(n.out.shape);
  return n.grad;
}

void Tape::run_backward(ValueId loss, double seed) {
  Node& top = node(loss);
  if (top.out.size() != 1) {
    throw ShapeError("backward requires a scalar loss, got " + top.out.shape_str());
  }
  // Reset per-node grad buffers from any previous pass on this tape; the
  // parameter accumulation contract lives at the Parameter level.
  for (Node& n : nodes_) n.grad.data.clear();
  grad_buffer(loss).data[0] = seed;

  for (ValueId id = static_cast<ValueId>(nodes_.size()) - 1; id >= 0; --id) {
    Node& n = node(id);
    if (!n.needs_grad || n.grad.data.empty()) continue;
    const Tensor& g = n.grad;
    switch (n.op) {
      case Op::Constant:
      case Op::Param:
        break;
      case Op::Matmul: {
        Node& na = node(n.in[0]);
        Node& nb = node(n.in[1]);
        const int m = na.out.rows(), k = na.out.cols(), c = nb.out.cols();
        if (na.needs_grad) {
          matmul_abt_acc(g.data.data(), nb.out.data.data(), grad_buffer(n.in[0]).data.data(), m, c, k);
        }
        if (nb.needs_grad) {
          matmul_atb_acc(na.out.data.data(), g.data.data(), grad_buffer(n.in[1]).data.data(), m, k, c);
        }
        break;
      }
      case Op::Add: {
        for (int which = 0; which < 2; ++which) {
          if (!node(n.in[which]).needs_grad) continue;
          Tensor& dst = grad_buffer(n.in[which]);
          for (std::size_t i = 0; i < g.data.size(); ++i) dst.data[i] += g.data[i];
        }
        break;
      }
      case Op::AddRowBroadcast: {
        if (node(n.in[0]).needs_grad) {
          Tensor& da = grad_buffer(n.in[0]);
          for (std::size_t i = 0; i < g.data.size(); ++i) da.data[i] += g.data[i];
        }
        if (node(n.in[1]).needs_grad) {
          Tensor& db = grad_buffer(n.in[1]);
          const int rows = g.rows(), cols = g.cols();
          for (int i = 0; i < rows; ++i) {
            for (int j = 0; j < cols; ++j) db.at(0, j) += g.at(i, j);
          }
        }
        break;
      }
      case Op::Mul: {
        const Tensor& ta = node(n.in[0]).out;
        const Tensor& tb = node(n.in[1]).out;
        if (node(n.in[0]).needs_grad) {
          Tensor& da = grad_buffer(n.in[0]);
          for (std::size_t i = 0; i < g.data.size(); ++i) da.data[i] += g.data[i] * tb.data[i];
        }
        if (node(n.in[1]).needs_grad) {
          Tensor& db = grad_buffer(n.in[1]);
          for (std::size_t i = 0; i < g.data.size(); ++i) db.data[i] += g.data[i] * ta.data[i];
        }
        break;
      }
      case Op::Affine: {
        Tensor& da = grad_buffer(n.in[0]);
        for (std::size_t i = 0; i < g.data.size(); ++i) da.data[i] += n.c0 * g.data[i];
        break;
      }
      case Op::Relu: {
        const Tensor& x = node(n.in[0]).out;
        Tensor& da = grad_buffer(n.in[0]);
        // Subgradient 0 at exactly 0.
        for (std::size_t i = 0; i < g.data.size(); ++i) {
          if (x.data[i] > 0.0) da.data[i] += g.data[i];
        }
        break;
      }
      case Op::Sigmoid: {
        Tensor& da = grad_buffer(n.in[0]);
        for (std::size_t i = 0; i < g.data.size(); ++i) {
          const double s = n.out.data[i];
          da.data[i] += g.data[i] * s * (1.0 - s);
        }
        break;
      }
      case Op::Tanh: {
        Tensor& da = grad_buffer(n.in[0]);
        for (std::size_t i = 0; i < g.data.size(); ++i) {
          const double t = n.out.data[i];
          da.data[i] += g.data[i] * (1.0 - t * t);
        }
        break;
      }
      case Op::ConcatCols: {
        int off = 0;
        const int rows = g.rows(), cols = g.cols();
        for (ValueId p : n.in) {
          const int pc = node(p).out.cols();
          if (node(p).needs_grad) {
            Tensor& dp = grad_buffer(p);
            for (int i = 0; i < rows; ++i) {
              for (int j = 0; j < pc; ++j) {
                dp.at(i, j) += g.data[static_cast<std::size_t>(i) * cols + off + j];
              }
            }
          }
          off += pc;
        }
        break;
      }
      case Op::GatherRows: {
        Tensor& da = grad_buffer(n.in[0]);
        const int cols = g.cols();
        for (std::size_t i = 0; i < n.rows.size(); ++i) {
          double* dst = &da.data[static_cast<std::size_t>(n.rows[i]) * cols];
          const double* src = &g.data[i * cols];
          for (int j = 0; j < cols; ++j) dst[j] += src[j];
        }
        break;
      }
      case Op::PadRows: {
        Tensor& da = grad_buffer(n.in[0]);
        std::size_t count = da.data.size();
        for (std::size_t i = 0; i < count; ++i) da.data[i] += g.data[i];
        break;
      }
      case Op::RowScale: {
        const Tensor& ta = node(n.in[0]).out;
        const Tensor& ts = node(n.in[1]).out;
        const int rows = g.rows(), cols = g.cols();
        if (node(n.in[0]).needs_grad) {
          Tensor& da = grad_buffer(n.in[0]);
          for (int i = 0; i < rows; ++i) {
            const double sv = ts.at(i, 0);
            for (int j = 0; j < cols; ++j) da.at(i, j) += g.at(i, j) * sv;
          }
        }
        if (node(n.in[1]).needs_grad) {
          Tensor& ds = grad_buffer(n.in[1]);
          for (int i = 0; i < rows; ++i) {
            double acc = 0.0;
            for (int j = 0; j < cols; ++j) acc += g.at(i, j) * ta.at(i, j);
            ds.at(i, 0) += acc;
          }
        }
        break;
      }
      case Op::Reshape: {
        Tensor& da = grad_buffer(n.in[0]);
        for (std::size_t i = 0; i < g.data.size(); ++i) da.data[i] += g.data[i];
        break;
      }
      case Op::Sum: {
        Tensor& da = grad_buffer(n.in[0]);
        const double gv = g.data[0];
        for (double& v : da.data) v += gv;
        break;
      }
      case Op::Bce: {
        const double raw = node(n.in[0]).out.data[0];
        const double eps = n.c1;
        if (raw > eps && raw < 1.0 - eps) {
          const double y = n.c0;
          grad_buffer(n.in[0]).data[0] += g.data[0] * (raw - y) / (raw * (1.0 - raw));
        }
        break;
      }
    }
  }
}

void Tape::backward_local(ValueId loss, double seed) { run_backward(loss, seed); }

void Tape::flush_param_grads() {
  for (Node& n : nodes_) {
    if (n.op == Op::Param && !n.grad.data.empty()) {
      Tensor& dst = n.parameter->grad;
      for (std::size_t i = 0; i < dst.data.size(); ++i) dst.data[i] += n.grad.data[i];
    }
  }
}

void Tape::backward(ValueId loss, double seed) {
  run_backward(loss, seed);
  flush_param_grads();
}

double finite_difference_check(const std::function<double()>& loss, Parameter& p, double eps) {
  if (eps <= 0.0) throw ConfigError("finite_difference_check requires eps > 0");
  double max_rel = 0.0;
  for (std::size_t i = 0; i < p.value.data.size(); ++i) {
    const double saved = p.value.data[i];
    p.value.data[i] = saved + eps;
    const double up = loss();
    p.value.data[i] = saved - eps;
    const double down = loss();
    p.value.data[i] = saved;
    const double numeric = (up - down) / (2.0 * eps);
    const double analytic = p.grad.data[i];
    const double denom = std::max({std::abs(analytic), std::abs(numeric), 1e-8});
    max_rel = std::max(max_rel, std::abs(analytic - numeric) / denom);
  }
  return max_rel;
}

void save_checkpoint(const std::string& path, std::span<Parameter* const> params,
                     const std::string& extra_json) {
  nlohmann::json header;
  header["extra"] = extra_json.empty() ? nlohmann::json(nullptr) : nlohmann::json::parse(extra_json);
  nlohmann::json tensors = nlohmann::json::array();
  std::uint64_t offset = 0;
  for (const Parameter* p : params) {
    nlohmann::json t;
    t["name"] = p->name;
    t["shape"] = p->value.shape;
    t["offset"] = offset;
    tensors.push_back(std::move(t));
    offset += static_cast<std::uint64_t>(p->value.size()) * sizeof(double);
  }
  header["tensors"] = std::move(tensors);
  const std::string header_bytes = header.dump();

  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw IoError("cannot open checkpoint for writing: " + path);
  out.write("STRGNN01", 8);
  const std::uint64_t hlen = header_bytes.size();
  out.write(reinterpret_cast<const char*>(&hlen), sizeof(hlen));
  out.write(header_bytes.data(), static_cast<std::streamsize>(header_bytes.size()));
  for (const Parameter* p : params) {
    out.write(reinterpret_cast<const char*>(p->value.data.data()),
              static_cast<std::streamsize>(p->value.size() * sizeof(double)));
  }
  if (!out) throw IoError("failed writing checkpoint: " + path);
}

namespace {

nlohmann::json read_checkpoint_header(std::ifstream& in, const std::string& path) {
  char magic[8];
  in.read(magic, 8);
  if (!in || std::memcmp(magic, "STRGNN01", 8) != 0) {
    throw DataError("not a checkpoint file: " + path);
  }
  std::uint64_t hlen = 0;
  in.read(reinterpret_cast<char*>(&hlen), sizeof(hlen));
  std::string header_bytes(hlen, '\0');
  in.read(header_bytes.data(), static_cast<std::streamsize>(hlen));
  if (!in) throw DataError("truncated checkpoint header: " + path);
  return nlohmann::json::parse(header_bytes);
}

}  // namespace

std::string read_checkpoint_extra(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw IoError("cannot open checkpoint: " + path);
  const nlohmann::json header = read_checkpoint_header(in, path);
  return header.at("extra").dump();
}

void load_checkpoint(const std::string& path, std::span<Parameter* const> params) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw IoError("cannot open checkpoint: " + path);
  const nlohmann::json header = read_checkpoint_header(in, path);
  const std::streampos payload_start = in.tellg();

  std::unordered_map<std::string, nlohmann::json> by_name;
  for (const auto& t : header.at("tensors")) {
    by_name.emplace(t.at("name").get<std::string>(), t);
  }
  for (Parameter* p : params) {
    auto it = by_name.find(p->name);
    if (it == by_name.end()) throw DataError("checkpoint is missing tensor " + p->name);
    const auto shape = it->second.at("shape").get<std::vector<int>>();
    if (shape != p->value.shape) {
      throw ShapeError("checkpoint tensor " + p->name + " has mismatched shape");
    }
    const auto offset = it->second.at("offset").get<std::uint64_t>();
    in.seekg(payload_start + static_cast<std::streamoff>(offset));
    in.read(reinterpret_cast<char*>(p->value.data.data()),
            static_cast<std::streamsize>(p->value.size() * sizeof(double)));
    if (!in) throw DataError("truncated checkpoint payload: " + path);
  }
}

}  // namespace strgnn
