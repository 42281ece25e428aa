#pragma once

#include <cstdint>
#include <functional>
#include <memory>
#include <span>
#include <string>
#include <vector>

#include "kanlab/common.hpp"

namespace kanlab {

using Shape = std::vector<std::int64_t>;

std::int64_t shape_numel(const Shape& s);
std::string shape_str(const Shape& s);

// ---------------------------------------------------------------------------
// Tensor: dense n-dimensional array of f64 in row-major order, with optional
// participation in reverse-mode differentiation. Tensor is a cheap handle;
// copies share storage. Values are immutable after forward creation except
// for gradient accumulation and explicit in-place parameter updates between
// steps (optimizer, grid extension).
// ---------------------------------------------------------------------------

struct TensorStorage {
  std::int64_t id = 0;
  Shape shape;
  std::vector<double> data;
  std::vector<double> grad;  // allocated on demand, same length as data
  bool requires_grad = false;
  bool on_tape = false;  // true when produced by a recorded op
};

class Tensor {
 public:
  Tensor() = default;

  static Tensor zeros(Shape shape);
  static Tensor full(Shape shape, double value);
  static Tensor from(Shape shape, std::vector<double> values);
  static Tensor scalar(double value);
  static Tensor identity(std::int64_t n);

  bool defined() const { return bool(s_); }
  const Shape& shape() const { return s_->shape; }
  std::int64_t numel() const { return std::int64_t(s_->data.size()); }
  std::int64_t dim(int i) const { return s_->shape[std::size_t(i)]; }
  int rank() const { return int(s_->shape.size()); }
  std::int64_t id() const { return s_->id; }

  std::span<const double> data() const { return s_->data; }
  std::span<double> mutable_data() { return s_->data; }
  double value() const;  // scalar tensors only
  double at(std::initializer_list<std::int64_t> idx) const;

  bool requires_grad() const { return s_->requires_grad; }
  Tensor& set_requires_grad(bool v) {
    s_->requires_grad = v;
    return *this;
  }
  // Participates in gradient flow (leaf parameter or tape-produced).
  bool tracked() const { return s_->requires_grad || s_->on_tape; }

  bool has_grad() const { return !s_->grad.empty(); }
  std::span<double> grad();               // allocates zeros on first use
  std::span<const double> grad() const;   // throws if absent
  void zero_grad();

  TensorStorage* storage() const { return s_.get(); }
  std::shared_ptr<TensorStorage> storage_ptr() const { return s_; }
  void mark_on_tape() { s_->on_tape = true; }

  // Deep copy of values (no grad, not on tape).
  Tensor clone() const;

 private:
  explicit Tensor(std::shared_ptr<TensorStorage> s) : s_(std::move(s)) {}
  static Tensor make(Shape shape, std::vector<double> values);
  std::shared_ptr<TensorStorage> s_;
};

// ---------------------------------------------------------------------------
// Tape: ordered record of operations for reverse-mode differentiation. Nodes
// are appended in execution order, so inputs always precede their consumers
// (topological order by construction). Single-threaded per training run;
// activating a Tape installs it for the current thread.
// ---------------------------------------------------------------------------

class Tape {
 public:
  Tape();
  ~Tape();
  Tape(const Tape&) = delete;
  Tape& operator=(const Tape&) = delete;

  static Tape* active();

  struct Node {
    std::vector<std::int64_t> inputs;  // tensor ids
    std::int64_t output = 0;           // tensor id
    std::function<void()> backward;
  };

  void record(std::vector<std::int64_t> input_ids, std::int64_t output_id,
              std::function<void()> backward);
  std::size_t size() const { return nodes_.size(); }

  // Seeds d(loss)/d(loss) = 1 and propagates through all recorded nodes in
  // reverse order. Gradients accumulate additively into leaf .grad buffers.
  void backward(const Tensor& loss);

  void clear() { nodes_.clear(); }

 private:
  std::vector<Node> nodes_;
  Tape* prev_ = nullptr;
};

// Records a node on the active tape when grads are flowing; marks the output.
void maybe_record(std::initializer_list<Tensor> inputs, Tensor& output,
                  std::function<void()> backward);

// ---------------------------------------------------------------------------
// Operations. Binary elementwise ops require equal shapes or a scalar (rank-0
// or single-element) operand; no general broadcasting.
// ---------------------------------------------------------------------------

enum class EwOp { add, sub, mul, relu, silu, exp, log };

Tensor elementwise(EwOp op, const Tensor& a, const Tensor* b = nullptr);

Tensor add(const Tensor& a, const Tensor& b);
Tensor sub(const Tensor& a, const Tensor& b);
Tensor mul(const Tensor& a, const Tensor& b);
Tensor relu(const Tensor& a);
Tensor silu(const Tensor& a);
Tensor exp(const Tensor& a);
Tensor log(const Tensor& a);
Tensor scale(const Tensor& a, double c);
Tensor sum(const Tensor& a);  // -> scalar

// a: [m x k], b: [k x n] -> [m x n]
Tensor matmul(const Tensor& a, const Tensor& b);

// Stacks rank-2 tensors with equal column counts along rows.
Tensor concat_rows(const std::vector<Tensor>& parts);

// Convenience: runs tape backward on a scalar loss.
void backward(const Tensor& loss);

double silu_scalar(double x);
double silu_grad_scalar(double x);

// Raw row-major kernels shared by forward and backward passes.
namespace kernels {
// C[m x n] += / = A[m x k] * B[k x n]
void matmul_nn(const double* a, const double* b, double* c, std::int64_t m,
               std::int64_t k, std::int64_t n, bool accumulate);
// C[m x k] += A[m x n] * B[k x n]^T
void matmul_nt(const double* a, const double* b, double* c, std::int64_t m,
               std::int64_t n, std::int64_t k, bool accumulate);
// C[k x n] += A[m x k]^T * B[m x n]
void matmul_tn(const double* a, const double* b, double* c, std::int64_t m,
               std::int64_t k, std::int64_t n, bool accumulate);
}  // namespace kernels

// ---------------------------------------------------------------------------
// Tensor blob format: magic "KVT1", u32 rank, u64 extents (little-endian),
// u8 dtype code (0 = f32, 1 = f64), then raw little-endian values.
// ---------------------------------------------------------------------------

enum class BlobDtype : std::uint8_t { f32 = 0, f64 = 1 };

void write_blob(const std::string& path, const Tensor& t,
                BlobDtype dtype = BlobDtype::f32);
Tensor read_blob(const std::string& path, BlobDtype* dtype_out = nullptr);

}  // namespace kanlab
