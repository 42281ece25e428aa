#include "kanlab/tensor.hpp"

#include <atomic>
#include <cmath>
#include <cstdio>
#include <cstring>
#include <fstream>
#include <sstream>

namespace kanlab {

std::int64_t shape_numel(const Shape& s) {
  std::int64_t n = 1;
  for (auto e : s) n *= e;
  return n;
}

std::string shape_str(const Shape& s) {
  std::ostringstream os;
  os << '[';
  for (std::size_t i = 0; i < s.size(); ++i) {
    if (i) os << 'x';
    os << s[i];
  }
  os << ']';
  return os.str();
}

namespace {
std::atomic<std::int64_t> g_next_id{1};
}

Tensor Tensor::make(Shape shape, std::vector<double> values) {
  for (auto e : shape)
    if (e <= 0) throw DimensionError("tensor extents must be positive");
  const auto n = shape_numel(shape);
  if (std::int64_t(values.size()) != n)
    throw DimensionError("tensor data length " +
                         std::to_string(values.size()) +
                         " does not match shape " + shape_str(shape));
  auto s = std::make_shared<TensorStorage>();
  s->id = g_next_id.fetch_add(1);
  s->shape = std::move(shape);
  s->data = std::move(values);
  return Tensor(std::move(s));
}

Tensor Tensor::zeros(Shape shape) {
  auto n = shape_numel(shape);
  return make(std::move(shape), std::vector<double>(std::size_t(n), 0.0));
}

Tensor Tensor::full(Shape shape, double value) {
  auto n = shape_numel(shape);
  return make(std::move(shape), std::vector<double>(std::size_t(n), value));
}

Tensor Tensor::from(Shape shape, std::vector<double> values) {
  return make(std::move(shape), std::move(values));
}

Tensor Tensor::scalar(double value) { return make({1}, {value}); }

Tensor Tensor::identity(std::int64_t n) {
  Tensor t = zeros({n, n});
  auto d = t.mutable_data();
  for (std::int64_t i = 0; i < n; ++i) d[std::size_t(i * n + i)] = 1.0;
  return t;
}

double Tensor::value() const {
  if (numel() != 1) throw DimensionError("value() requires a scalar tensor");
  return s_->data[0];
}

double Tensor::at(std::initializer_list<std::int64_t> idx) const {
  if (std::int64_t(idx.size()) != rank())
    throw DimensionError("at(): index rank mismatch");
  std::int64_t off = 0;
  int i = 0;
  for (auto v : idx) {
    off = off * s_->shape[std::size_t(i)] + v;
    ++i;
  }
  return s_->data[std::size_t(off)];
}

std::span<double> Tensor::grad() {
  if (s_->grad.empty()) s_->grad.assign(s_->data.size(), 0.0);
  return s_->grad;
}

std::span<const double> Tensor::grad() const {
  if (s_->grad.empty()) throw InputError("tensor has no gradient");
  return s_->grad;
}

void Tensor::zero_grad() {
  if (!s_->grad.empty()) std::fill(s_->grad.begin(), s_->grad.end(), 0.0);
}

Tensor Tensor::clone() const {
  return make(s_->shape, s_->data);
}

// --------------------------------------------------------------------------
// Tape
// --------------------------------------------------------------------------

namespace {
thread_local Tape* g_active_tape = nullptr;
}

Tape::Tape() {
  prev_ = g_active_tape;
  g_active_tape = this;
}

Tape::~Tape() { g_active_tape = prev_; }

Tape* Tape::active() { return g_active_tape; }

void Tape::record(std::vector<std::int64_t> input_ids, std::int64_t output_id,
                  std::function<void()> backward) {
  nodes_.push_back(Node{std::move(input_ids), output_id, std::move(backward)});
}

void Tape::backward(const Tensor& loss) {
  if (loss.numel() != 1)
    throw Error("backward: loss must be a scalar tensor");
  if (!loss.tracked())
    throw Error("backward: loss is not connected to the tape");
  Tensor seed = loss;
  seed.grad()[0] = 1.0;
  for (auto it = nodes_.rbegin(); it != nodes_.rend(); ++it) {
    it->backward();
  }
}

void backward(const Tensor& loss) {
  Tape* t = Tape::active();
  if (!t) throw Error("backward: no active tape");
  t->backward(loss);
}

void maybe_record(std::initializer_list<Tensor> inputs, Tensor& output,
                  std::function<void()> fn) {
  Tape* tape = Tape::active();
  if (!tape) return;
  bool any = false;
  std::vector<std::int64_t> ids;
  ids.reserve(inputs.size());
  for (const auto& t : inputs) {
    ids.push_back(t.id());
    any = any || t.tracked();
  }
  if (!any) return;
  output.mark_on_tape();
  tape->record(std::move(ids), output.id(), std::move(fn));
}

// --------------------------------------------------------------------------
// Elementwise operations
// --------------------------------------------------------------------------

double silu_scalar(double x) { return x / (1.0 + std::exp(-x)); }

double silu_grad_scalar(double x) {
  const double s = 1.0 / (1.0 + std::exp(-x));
  return s * (1.0 + x * (1.0 - s));
}

namespace {

bool is_scalar_like(const Tensor& t) { return t.numel() == 1; }

// Binary op with equal shapes, or one single-element operand broadcast.
template <class Fwd, class BwdA, class BwdB>
Tensor binary_op(const char* name, const Tensor& a, const Tensor& b, Fwd fwd,
                 BwdA bwd_a, BwdB bwd_b) {
  const bool a_scalar = is_scalar_like(a);
  const bool b_scalar = is_scalar_like(b);
  if (!a_scalar && !b_scalar && a.shape() != b.shape())
    throw DimensionError(std::string(name) + ": shape mismatch " +
                         shape_str(a.shape()) + " vs " + shape_str(b.shape()));
  const Shape& out_shape = a_scalar && !b_scalar ? b.shape() : a.shape();
  const auto n = shape_numel(out_shape);
  std::vector<double> out(static_cast<std::size_t>(n));
  auto da = a.data();
  auto db = b.data();
  for (std::int64_t i = 0; i < n; ++i) {
    const double x = da[std::size_t(a_scalar ? 0 : i)];
    const double y = db[std::size_t(b_scalar ? 0 : i)];
    out[std::size_t(i)] = fwd(x, y);
  }
  Tensor result = Tensor::from(out_shape, std::move(out));
  Tensor ac = a, bc = b, rc = result;
  maybe_record({a, b}, result, [=]() mutable {
    auto g = rc.grad();
    const auto n2 = rc.numel();
    if (ac.tracked()) {
      auto ga = ac.grad();
      for (std::int64_t i = 0; i < n2; ++i) {
        const double x = ac.data()[std::size_t(a_scalar ? 0 : i)];
        const double y = bc.data()[std::size_t(b_scalar ? 0 : i)];
        ga[std::size_t(a_scalar ? 0 : i)] += bwd_a(x, y) * g[std::size_t(i)];
      }
    }
    if (bc.tracked()) {
      auto gb = bc.grad();
      for (std::int64_t i = 0; i < n2; ++i) {
        const double x = ac.data()[std::size_t(a_scalar ? 0 : i)];
        const double y = bc.data()[std::size_t(b_scalar ? 0 : i)];
        gb[std::size_t(b_scalar ? 0 : i)] += bwd_b(x, y) * g[std::size_t(i)];
      }
    }
  });
  return result;
}

template <class Fwd, class Bwd>
Tensor unary_op(const Tensor& a, Fwd fwd, Bwd bwd) {
  const auto n = a.numel();
  std::vector<double> out(static_cast<std::size_t>(n));
  auto da = a.data();
  for (std::int64_t i = 0; i < n; ++i)
    out[std::size_t(i)] = fwd(da[std::size_t(i)]);
  Tensor result = Tensor::from(a.shape(), std::move(out));
  Tensor ac = a, rc = result;
  maybe_record({a}, result, [=]() mutable {
    if (!ac.tracked()) return;
    auto g = rc.grad();
    auto ga = ac.grad();
    for (std::int64_t i = 0; i < ac.numel(); ++i)
      ga[std::size_t(i)] += bwd(ac.data()[std::size_t(i)]) * g[std::size_t(i)];
  });
  return result;
}

}  // namespace

Tensor add(const Tensor& a, const Tensor& b) {
  return binary_op(
      "add", a, b, [](double x, double y) { return x + y; },
      [](double, double) { return 1.0; }, [](double, double) { return 1.0; });
}

Tensor sub(const Tensor& a, const Tensor& b) {
  return binary_op(
      "sub", a, b, [](double x, double y) { return x - y; },
      [](double, double) { return 1.0; }, [](double, double) { return -1.0; });
}

Tensor mul(const Tensor& a, const Tensor& b) {
  return binary_op(
      "mul", a, b, [](double x, double y) { return x * y; },
      [](double, double y) { return y; }, [](double x, double) { return x; });
}

Tensor relu(const Tensor& a) {
  // subgradient at 0 is 0
  return unary_op(
      a, [](double x) { return x > 0.0 ? x : 0.0; },
      [](double x) { return x > 0.0 ? 1.0 : 0.0; });
}

Tensor silu(const Tensor& a) {
  return unary_op(a, silu_scalar, silu_grad_scalar);
}

Tensor exp(const Tensor& a) {
  return unary_op(
      a, [](double x) { return std::exp(x); },
      [](double x) { return std::exp(x); });
}

Tensor log(const Tensor& a) {
  return unary_op(
      a, [](double x) { return std::log(x); },
      [](double x) { return 1.0 / x; });
}

Tensor scale(const Tensor& a, double c) {
  return unary_op(
      a, [c](double x) { return c * x; }, [c](double) { return c; });
}

Tensor elementwise(EwOp op, const Tensor& a, const Tensor* b) {
  switch (op) {
    case EwOp::add:
    case EwOp::sub:
    case EwOp::mul:
      if (!b) throw InputError("elementwise: binary op needs two operands");
      break;
    default:
      if (b) throw InputError("elementwise: unary op takes one operand");
  }
  switch (op) {
    case EwOp::add: return add(a, *b);
    case EwOp::sub: return sub(a, *b);
    case EwOp::mul: return mul(a, *b);
    case EwOp::relu: return relu(a);
    case EwOp::silu: return silu(a);
    case EwOp::exp: return exp(a);
    case EwOp::log: return log(a);
  }
  throw InputError("elementwise: unknown op");
}

Tensor sum(const Tensor& a) {
  double acc = 0.0;
  for (double v : a.data()) acc += v;
  Tensor result = Tensor::scalar(acc);
  Tensor ac = a, rc = result;
  maybe_record({a}, result, [=]() mutable {
    if (!ac.tracked()) return;
    const double g = rc.grad()[0];
    auto ga = ac.grad();
    for (auto& v : ga) v += g;
  });
  return result;
}

// --------------------------------------------------------------------------
// Matrix multiplication
// --------------------------------------------------------------------------

namespace kernels {

void matmul_nn(const double* a, const double* b, double* c, std::int64_t m,
               std::int64_t k, std::int64_t n, bool accumulate) {
  if (!accumulate) std::memset(c, 0, std::size_t(m * n) * sizeof(double));
  for (std::int64_t i = 0; i < m; ++i) {
    const double* arow = a + i * k;
    double* crow = c + i * n;
    for (std::int64_t p = 0; p < k; ++p) {
      const double av = arow[p];
      if (av == 0.0) continue;
      const double* brow = b + p * n;
      for (std::int64_t j = 0; j < n; ++j) crow[j] += av * brow[j];
    }
  }
}

void matmul_nt(const double* a, const double* b, double* c, std::int64_t m,
               std::int64_t n, std::int64_t k, bool accumulate) {
  // c[m x k] (+)= a[m x n] * b[k x n]^T
  if (!accumulate) std::memset(c, 0, std::size_t(m * k) * sizeof(double));
  for (std::int64_t i = 0; i < m; ++i) {
    const double* arow = a + i * n;
    double* crow = c + i * k;
    for (std::int64_t j = 0; j < k; ++j) {
      const double* brow = b + j * n;
      double acc = 0.0;
      for (std::int64_t p = 0; p < n; ++p) acc += arow[p] * brow[p];
      crow[j] += acc;
    }
  }
}

void matmul_tn(const double* a, const double* b, double* c, std::int64_t m,
               std::int64_t k, std::int64_t n, bool accumulate) {
  // c[k x n] (+)= a[m x k]^T * b[m x n]
  if (!accumulate) std::memset(c, 0, std::size_t(k * n) * sizeof(double));
  for (std::int64_t i = 0; i < m; ++i) {
    const double* arow = a + i * k;
    const double* brow = b + i * n;
    for (std::int64_t p = 0; p < k; ++p) {
      const double av = arow[p];
      if (av == 0.0) continue;
      double* crow = c + p * n;
      for (std::int64_t j = 0; j < n; ++j) crow[j] += av * brow[j];
    }
  }
}

}  // namespace kernels

Tensor matmul(const Tensor& a, const Tensor& b) {
  if (a.rank() != 2 || b.rank() != 2)
    throw DimensionError("matmul: operands must be rank-2");
  const auto m = a.dim(0), k = a.dim(1), k2 = b.dim(0), n = b.dim(1);
  if (k != k2)
    throw DimensionError("matmul: inner dimensions disagree, " +
                         shape_str(a.shape()) + " vs " + shape_str(b.shape()));
  Tensor result = Tensor::zeros({m, n});
  {
    auto out = result.mutable_data();
    // rows are disjoint between chunks
    parallel_for(m, [&](std::int64_t r0, std::int64_t r1) {
      kernels::matmul_nn(a.data().data() + r0 * k, b.data().data(),
                         out.data() + r0 * n, r1 - r0, k, n, true);
    });
  }
  Tensor ac = a, bc = b, rc = result;
  maybe_record({a, b}, result, [=]() mutable {
    auto g = rc.grad();
    if (ac.tracked()) {
      // dA = g * B^T
      kernels::matmul_nt(g.data(), bc.data().data(), ac.grad().data(), m, n, k,
                         true);
    }
    if (bc.tracked()) {
      // dB = A^T * g
      kernels::matmul_tn(ac.data().data(), g.data(), bc.grad().data(), m, k, n,
                         true);
    }
  });
  return result;
}

Tensor concat_rows(const std::vector<Tensor>& parts) {
  if (parts.empty()) throw InputError("concat_rows: no inputs");
  const std::int64_t cols = parts[0].rank() == 2 ? parts[0].dim(1) : -1;
  std::int64_t rows = 0;
  for (const auto& p : parts) {
    if (p.rank() != 2 || p.dim(1) != cols)
      throw DimensionError("concat_rows: parts must be rank-2 with equal columns");
    rows += p.dim(0);
  }
  std::vector<double> out;
  out.reserve(std::size_t(rows * cols));
  for (const auto& p : parts)
    out.insert(out.end(), p.data().begin(), p.data().end());
  Tensor result = Tensor::from({rows, cols}, std::move(out));

  Tape* tape = Tape::active();
  bool any = false;
  std::vector<std::int64_t> ids;
  for (const auto& p : parts) {
    ids.push_back(p.id());
    any = any || p.tracked();
  }
  if (tape && any) {
    result.mark_on_tape();
    std::vector<Tensor> held = parts;
    Tensor rc = result;
    tape->record(std::move(ids), result.id(), [held, rc]() mutable {
      const auto g = rc.grad();
      std::int64_t row = 0;
      for (auto& p : held) {
        const auto n = p.numel();
        if (p.tracked()) {
          auto pg = p.grad();
          const double* src = g.data() + row;
          for (std::int64_t i = 0; i < n; ++i) pg[std::size_t(i)] += src[i];
        }
        row += n;
      }
    });
  }
  return result;
}

// --------------------------------------------------------------------------
// Blob I/O
// --------------------------------------------------------------------------

namespace {

void put_le(std::string& out, std::uint64_t v, int bytes) {
  for (int i = 0; i < bytes; ++i) out.push_back(char((v >> (8 * i)) & 0xff));
}

std::uint64_t get_le(const unsigned char* p, int bytes) {
  std::uint64_t v = 0;
  for (int i = 0; i < bytes; ++i) v |= std::uint64_t(p[i]) << (8 * i);
  return v;
}

}  // namespace

void write_blob(const std::string& path, const Tensor& t, BlobDtype dtype) {
  std::string buf;
  buf.reserve(16 + std::size_t(t.numel()) * 8);
  buf += "KVT1";
  put_le(buf, std::uint64_t(t.rank()), 4);
  for (int i = 0; i < t.rank(); ++i)
    put_le(buf, std::uint64_t(t.dim(i)), 8);
  buf.push_back(char(dtype));
  if (dtype == BlobDtype::f32) {
    for (double v : t.data()) {
      float f = float(v);
      std::uint32_t bits;
      std::memcpy(&bits, &f, 4);
      put_le(buf, bits, 4);
    }
  } else {
    for (double v : t.data()) {
      std::uint64_t bits;
      std::memcpy(&bits, &v, 8);
      put_le(buf, bits, 8);
    }
  }
  std::ofstream os(path, std::ios::binary | std::ios::trunc);
  if (!os) throw IoError("cannot open for writing: " + path);
  os.write(buf.data(), std::streamsize(buf.size()));
  if (!os) throw IoError("write failed: " + path);
}

Tensor read_blob(const std::string& path, BlobDtype* dtype_out) {
  std::ifstream is(path, std::ios::binary);
  if (!is) throw IoError("cannot open for reading: " + path);
  std::string buf((std::istreambuf_iterator<char>(is)),
                  std::istreambuf_iterator<char>());
  const auto* p = reinterpret_cast<const unsigned char*>(buf.data());
  const std::size_t size = buf.size();
  if (size < 9 || std::memcmp(p, "KVT1", 4) != 0)
    throw IoError("not a tensor blob: " + path);
  const auto rank = std::uint32_t(get_le(p + 4, 4));
  std::size_t off = 8;
  if (size < off + rank * 8 + 1) throw IoError("truncated blob: " + path);
  Shape shape(rank);
  for (std::uint32_t i = 0; i < rank; ++i) {
    shape[i] = std::int64_t(get_le(p + off, 8));
    off += 8;
  }
  const auto dtype = BlobDtype(p[off]);
  off += 1;
  if (dtype != BlobDtype::f32 && dtype != BlobDtype::f64)
    throw IoError("unknown dtype code in blob: " + path);
  if (dtype_out) *dtype_out = dtype;
  const auto n = shape_numel(shape);
  const std::size_t width = dtype == BlobDtype::f32 ? 4 : 8;
  if (size != off + std::size_t(n) * width)
    throw IoError("blob payload size mismatch: " + path);
  std::vector<double> values(static_cast<std::size_t>(n));
  for (std::int64_t i = 0; i < n; ++i) {
    if (dtype == BlobDtype::f32) {
      const auto bits = std::uint32_t(get_le(p + off + std::size_t(i) * 4, 4));
      float f;
      std::memcpy(&f, &bits, 4);
      values[std::size_t(i)] = double(f);
    } else {
      const auto bits = get_le(p + off + std::size_t(i) * 8, 8);
      double d;
      std::memcpy(&d, &bits, 8);
      values[std::size_t(i)] = d;
    }
  }
  return Tensor::from(std::move(shape), std::move(values));
}

}  // namespace kanlab
