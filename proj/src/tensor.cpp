#include "maos/tensor.hpp"

#include <atomic>
#include <cmath>
#include <cstring>
#include <sstream>
#include <stdexcept>

#include "maos/errors.hpp"

namespace maos {

std::int64_t shape_numel(const Shape& s) {
  std::int64_t n = 1;
  for (std::int64_t d : s) n *= d;
  return n;
}

std::string shape_str(const Shape& s) {
  std::ostringstream os;
  os << "[";
  for (std::size_t i = 0; i < s.size(); ++i) {
    if (i) os << ",";
    os << s[i];
  }
  os << "]";
  return os.str();
}

// ---------------------------------------------------------------------------
// Tensor
// ---------------------------------------------------------------------------

Tensor Tensor::zeros(Shape shape, bool requires_grad) {
  const std::int64_t n = shape_numel(shape);
  auto d = std::make_shared<TensorData>();
  d->shape = std::move(shape);
  d->values.assign(static_cast<std::size_t>(n), 0.0);
  d->requires_grad = requires_grad;
  return Tensor(std::move(d));
}

Tensor Tensor::full(Shape shape, double value, bool requires_grad) {
  Tensor t = zeros(std::move(shape), requires_grad);
  std::fill(t.d_->values.begin(), t.d_->values.end(), value);
  return t;
}

Tensor Tensor::from(Shape shape, std::vector<double> values, bool requires_grad) {
  if (shape_numel(shape) != static_cast<std::int64_t>(values.size())) {
    throw std::invalid_argument("tensor: shape " + shape_str(shape) + " expects " +
                                std::to_string(shape_numel(shape)) + " values, got " +
                                std::to_string(values.size()));
  }
  auto d = std::make_shared<TensorData>();
  d->shape = std::move(shape);
  d->values = std::move(values);
  d->requires_grad = requires_grad;
  return Tensor(std::move(d));
}

Tensor Tensor::gaussian(Shape shape, Rng& rng, double stddev, bool requires_grad) {
  Tensor t = zeros(std::move(shape), requires_grad);
  for (double& v : t.d_->values) v = stddev * rng.normal();
  return t;
}

double Tensor::item() const {
  if (size() != 1) {
    throw std::invalid_argument("item: tensor " + shape_str(shape()) + " is not scalar");
  }
  return d_->values[0];
}

std::vector<double>& Tensor::grad() {
  if (d_->grad.size() != d_->values.size()) d_->grad.assign(d_->values.size(), 0.0);
  return d_->grad;
}

const std::vector<double>& Tensor::grad() const {
  if (d_->grad.size() != d_->values.size()) {
    throw std::logic_error("grad: no gradient buffer allocated");
  }
  return d_->grad;
}

void Tensor::zero_grad() {
  if (!d_->grad.empty()) std::fill(d_->grad.begin(), d_->grad.end(), 0.0);
}

Tensor Tensor::detach() const {
  auto d = std::make_shared<TensorData>();
  d->shape = d_->shape;
  d->values = d_->values;
  return Tensor(std::move(d));
}

// ---------------------------------------------------------------------------
// Tape
// ---------------------------------------------------------------------------

namespace {
std::atomic<std::uint64_t> g_tape_counter{1};

std::vector<double>& ensure_grad(const std::shared_ptr<TensorData>& d) {
  if (d->grad.size() != d->values.size()) d->grad.assign(d->values.size(), 0.0);
  return d->grad;
}
}  // namespace

Tape::Tape() : id_(g_tape_counter.fetch_add(1)) {}

int Tape::record(const std::vector<int>& input_nodes, const Tensor& out,
                 std::function<void()> backward_fn) {
  const int id = static_cast<int>(nodes_.size());
  out.impl()->node = id;
  out.impl()->tape_id = id_;
  nodes_.push_back(Node{input_nodes, out.impl(), std::move(backward_fn)});
  return id;
}

bool wants_grad(const Tensor& t, const Tape* tape) {
  if (t.requires_grad()) return true;
  return tape != nullptr && t.node() >= 0 && t.tape_id() == tape->id();
}

void backward(const Tensor& loss, Tape& tape) {
  if (loss.size() != 1) {
    throw std::invalid_argument("backward: loss " + shape_str(loss.shape()) + " is not scalar");
  }
  if (loss.node() < 0 || loss.tape_id() != tape.id()) {
    throw std::invalid_argument("backward: loss is not recorded on this tape");
  }
  // Intermediate (node-output) gradients start from zero each call; leaf
  // gradients are left alone so they accumulate across calls.
  for (auto& n : tape.nodes_) {
    n.out->grad.assign(n.out->values.size(), 0.0);
  }
  ensure_grad(loss.impl())[0] = 1.0;
  for (auto it = tape.nodes_.rbegin(); it != tape.nodes_.rend(); ++it) {
    if (it->bw) it->bw();
  }
}

// ---------------------------------------------------------------------------
// Elementwise
// ---------------------------------------------------------------------------

namespace {

// y = f(x, p); df returns dy/dx from (x, y, p).
Tensor unary_op(Tape* tape, const Tensor& x, double p, double (*f)(double, double),
                double (*df)(double, double, double)) {
  Tensor out = Tensor::zeros(x.shape());
  const double* xs = x.data();
  double* ys = out.data();
  const std::int64_t n = x.size();
  for (std::int64_t i = 0; i < n; ++i) ys[i] = f(xs[i], p);
  if (tape && wants_grad(x, tape)) {
    auto xd = x.impl();
    auto od = out.impl();
    tape->record({x.node()}, out, [xd, od, p, df]() {
      auto& gx = ensure_grad(xd);
      const auto& gy = od->grad;
      const std::int64_t m = static_cast<std::int64_t>(xd->values.size());
      for (std::int64_t i = 0; i < m; ++i) {
        gx[static_cast<std::size_t>(i)] +=
            gy[static_cast<std::size_t>(i)] *
            df(xd->values[static_cast<std::size_t>(i)], od->values[static_cast<std::size_t>(i)], p);
      }
    });
  }
  return out;
}

enum class BinKind { Add, Sub, Mul };

Tensor binary_op(Tape* tape, const Tensor& a, const Tensor& b, BinKind kind) {
  if (a.shape() != b.shape()) {
    throw std::invalid_argument("elementwise: shape mismatch " + shape_str(a.shape()) + " vs " +
                                shape_str(b.shape()));
  }
  Tensor out = Tensor::zeros(a.shape());
  const double* as = a.data();
  const double* bs = b.data();
  double* ys = out.data();
  const std::int64_t n = a.size();
  switch (kind) {
    case BinKind::Add:
      for (std::int64_t i = 0; i < n; ++i) ys[i] = as[i] + bs[i];
      break;
    case BinKind::Sub:
      for (std::int64_t i = 0; i < n; ++i) ys[i] = as[i] - bs[i];
      break;
    case BinKind::Mul:
      for (std::int64_t i = 0; i < n; ++i) ys[i] = as[i] * bs[i];
      break;
  }
  const bool wa = wants_grad(a, tape);
  const bool wb = wants_grad(b, tape);
  if (tape && (wa || wb)) {
    auto ad = a.impl();
    auto bd = b.impl();
    auto od = out.impl();
    tape->record({a.node(), b.node()}, out, [ad, bd, od, kind, wa, wb]() {
      const auto& gy = od->grad;
      const std::int64_t m = static_cast<std::int64_t>(od->values.size());
      if (wa) {
        auto& ga = ensure_grad(ad);
        if (kind == BinKind::Mul) {
          for (std::int64_t i = 0; i < m; ++i) ga[i] += gy[i] * bd->values[i];
        } else {
          for (std::int64_t i = 0; i < m; ++i) ga[i] += gy[i];
        }
      }
      if (wb) {
        auto& gb = ensure_grad(bd);
        switch (kind) {
          case BinKind::Add:
            for (std::int64_t i = 0; i < m; ++i) gb[i] += gy[i];
            break;
          case BinKind::Sub:
            for (std::int64_t i = 0; i < m; ++i) gb[i] -= gy[i];
            break;
          case BinKind::Mul:
            for (std::int64_t i = 0; i < m; ++i) gb[i] += gy[i] * ad->values[i];
            break;
        }
      }
    });
  }
  return out;
}

}  // namespace

Tensor relu(Tape* tape, const Tensor& x) {
  return unary_op(
      tape, x, 0.0, [](double v, double) { return v > 0.0 ? v : 0.0; },
      [](double v, double, double) { return v > 0.0 ? 1.0 : 0.0; });
}

Tensor leaky_relu(Tape* tape, const Tensor& x, double slope) {
  return unary_op(
      tape, x, slope, [](double v, double s) { return v > 0.0 ? v : s * v; },
      [](double v, double, double s) { return v > 0.0 ? 1.0 : s; });
}

Tensor tanh(Tape* tape, const Tensor& x) {
  return unary_op(
      tape, x, 0.0, [](double v, double) { return std::tanh(v); },
      [](double, double y, double) { return 1.0 - y * y; });
}

Tensor sigmoid(Tape* tape, const Tensor& x) {
  return unary_op(
      tape, x, 0.0, [](double v, double) { return 1.0 / (1.0 + std::exp(-v)); },
      [](double, double y, double) { return y * (1.0 - y); });
}

Tensor log(Tape* tape, const Tensor& x) {
  const double* xs = x.data();
  for (std::int64_t i = 0; i < x.size(); ++i) {
    if (!(xs[i] > 0.0)) {
      throw std::domain_error("log: non-positive input " + std::to_string(xs[i]) + " at index " +
                              std::to_string(i));
    }
  }
  return unary_op(
      tape, x, 0.0, [](double v, double) { return std::log(v); },
      [](double v, double, double) { return 1.0 / v; });
}

Tensor abs(Tape* tape, const Tensor& x) {
  return unary_op(
      tape, x, 0.0, [](double v, double) { return std::fabs(v); },
      [](double v, double, double) { return v > 0.0 ? 1.0 : (v < 0.0 ? -1.0 : 0.0); });
}

Tensor neg(Tape* tape, const Tensor& x) {
  return unary_op(
      tape, x, 0.0, [](double v, double) { return -v; },
      [](double, double, double) { return -1.0; });
}

Tensor scale(Tape* tape, const Tensor& x, double c) {
  return unary_op(
      tape, x, c, [](double v, double k) { return k * v; },
      [](double, double, double k) { return k; });
}

Tensor clamp_min(Tape* tape, const Tensor& x, double lo) {
  return unary_op(
      tape, x, lo, [](double v, double l) { return v < l ? l : v; },
      [](double v, double, double l) { return v >= l ? 1.0 : 0.0; });
}

Tensor add(Tape* tape, const Tensor& a, const Tensor& b) { return binary_op(tape, a, b, BinKind::Add); }
Tensor sub(Tape* tape, const Tensor& a, const Tensor& b) { return binary_op(tape, a, b, BinKind::Sub); }
Tensor mul(Tape* tape, const Tensor& a, const Tensor& b) { return binary_op(tape, a, b, BinKind::Mul); }

// ---------------------------------------------------------------------------
// Reductions
// ---------------------------------------------------------------------------

namespace {
Tensor reduce_op(Tape* tape, const Tensor& x, bool take_mean) {
  const std::int64_t n = x.size();
  if (n == 0) throw std::invalid_argument("reduce: empty tensor");
  double acc = 0.0;
  const double* xs = x.data();
  for (std::int64_t i = 0; i < n; ++i) acc += xs[i];
  const double denom = take_mean ? static_cast<double>(n) : 1.0;
  Tensor out = Tensor::from({}, {acc / denom});
  if (tape && wants_grad(x, tape)) {
    auto xd = x.impl();
    auto od = out.impl();
    tape->record({x.node()}, out, [xd, od, denom]() {
      const double g = od->grad[0] / denom;
      auto& gx = ensure_grad(xd);
      for (double& v : gx) v += g;
    });
  }
  return out;
}
}  // namespace

Tensor sum(Tape* tape, const Tensor& x) { return reduce_op(tape, x, false); }
Tensor mean(Tape* tape, const Tensor& x) { return reduce_op(tape, x, true); }

// ---------------------------------------------------------------------------
// Convolution
// ---------------------------------------------------------------------------

namespace {

// col[(c*kh+ki)*kw+kj, oy*ow+ox] = padded src[c, oy*stride-pad+ki, ox*stride-pad+kj]
void im2col(const double* src, std::int64_t C, std::int64_t H, std::int64_t W, std::int64_t kh,
            std::int64_t kw, std::int64_t stride, std::int64_t pad, std::int64_t oh,
            std::int64_t ow, double* col) {
  for (std::int64_t c = 0; c < C; ++c) {
    for (std::int64_t ki = 0; ki < kh; ++ki) {
      for (std::int64_t kj = 0; kj < kw; ++kj) {
        double* row = col + (((c * kh + ki) * kw) + kj) * (oh * ow);
        for (std::int64_t oy = 0; oy < oh; ++oy) {
          const std::int64_t iy = oy * stride - pad + ki;
          double* dst = row + oy * ow;
          if (iy < 0 || iy >= H) {
            std::memset(dst, 0, static_cast<std::size_t>(ow) * sizeof(double));
            continue;
          }
          const double* srow = src + (c * H + iy) * W;
          for (std::int64_t ox = 0; ox < ow; ++ox) {
            const std::int64_t ix = ox * stride - pad + kj;
            dst[ox] = (ix >= 0 && ix < W) ? srow[ix] : 0.0;
          }
        }
      }
    }
  }
}

// Scatter-add transpose of im2col.
void col2im(const double* col, std::int64_t C, std::int64_t H, std::int64_t W, std::int64_t kh,
            std::int64_t kw, std::int64_t stride, std::int64_t pad, std::int64_t oh,
            std::int64_t ow, double* dst) {
  for (std::int64_t c = 0; c < C; ++c) {
    for (std::int64_t ki = 0; ki < kh; ++ki) {
      for (std::int64_t kj = 0; kj < kw; ++kj) {
        const double* row = col + (((c * kh + ki) * kw) + kj) * (oh * ow);
        for (std::int64_t oy = 0; oy < oh; ++oy) {
          const std::int64_t iy = oy * stride - pad + ki;
          if (iy < 0 || iy >= H) continue;
          const double* srow = row + oy * ow;
          double* drow = dst + (c * H + iy) * W;
          for (std::int64_t ox = 0; ox < ow; ++ox) {
            const std::int64_t ix = ox * stride - pad + kj;
            if (ix >= 0 && ix < W) drow[ix] += srow[ox];
          }
        }
      }
    }
  }
}

// C[M,N] += A[M,K] * B[K,N]
void matmul_acc(const double* A, const double* B, double* C, std::int64_t M, std::int64_t K,
                std::int64_t N) {
  for (std::int64_t m = 0; m < M; ++m) {
    double* crow = C + m * N;
    const double* arow = A + m * K;
    for (std::int64_t k = 0; k < K; ++k) {
      const double a = arow[k];
      const double* brow = B + k * N;
      for (std::int64_t n = 0; n < N; ++n) crow[n] += a * brow[n];
    }
  }
}

// C[M,N] += A[M,K] * B[N,K]^T
void matmul_abt(const double* A, const double* B, double* C, std::int64_t M, std::int64_t K,
                std::int64_t N) {
  for (std::int64_t m = 0; m < M; ++m) {
    const double* arow = A + m * K;
    double* crow = C + m * N;
    for (std::int64_t n = 0; n < N; ++n) {
      const double* brow = B + n * K;
      double acc = 0.0;
      for (std::int64_t k = 0; k < K; ++k) acc += arow[k] * brow[k];
      crow[n] += acc;
    }
  }
}

// C[M,N] += A[K0,M]^T * B[K0,N]
void matmul_atb(const double* A, const double* B, double* C, std::int64_t K0, std::int64_t M,
                std::int64_t N) {
  for (std::int64_t k0 = 0; k0 < K0; ++k0) {
    const double* arow = A + k0 * M;
    const double* brow = B + k0 * N;
    for (std::int64_t m = 0; m < M; ++m) {
      const double a = arow[m];
      if (a == 0.0) continue;
      double* crow = C + m * N;
      for (std::int64_t n = 0; n < N; ++n) crow[n] += a * brow[n];
    }
  }
}

struct Conv2dGeom {
  std::int64_t N, Cin, H, W, Cout, kh, kw, stride, pad, groups, oh, ow;
};

}  // namespace

Tensor conv2d(Tape* tape, const Tensor& input, const Tensor& weight, const Tensor& bias,
              std::int64_t stride, std::int64_t padding, std::int64_t groups) {
  if (input.shape().size() != 4) {
    throw std::invalid_argument("conv2d: input must be [N,C,H,W], got " + shape_str(input.shape()));
  }
  if (weight.shape().size() != 4) {
    throw std::invalid_argument("conv2d: weight must be [Cout,Cin/groups,kh,kw], got " +
                                shape_str(weight.shape()));
  }
  Conv2dGeom g;
  g.N = input.shape()[0];
  g.Cin = input.shape()[1];
  g.H = input.shape()[2];
  g.W = input.shape()[3];
  g.Cout = weight.shape()[0];
  g.kh = weight.shape()[2];
  g.kw = weight.shape()[3];
  g.stride = stride;
  g.pad = padding;
  g.groups = groups;
  if (groups < 1 || g.Cin % groups != 0) {
    throw std::invalid_argument("conv2d: input channels " + std::to_string(g.Cin) +
                                " not divisible by groups " + std::to_string(groups));
  }
  if (g.Cout % groups != 0) {
    throw std::invalid_argument("conv2d: output channels " + std::to_string(g.Cout) +
                                " not divisible by groups " + std::to_string(groups));
  }
  if (weight.shape()[1] != g.Cin / groups) {
    throw std::invalid_argument("conv2d: weight channel dim " + std::to_string(weight.shape()[1]) +
                                " != Cin/groups " + std::to_string(g.Cin / groups));
  }
  if (bias.shape() != Shape{g.Cout}) {
    throw std::invalid_argument("conv2d: bias shape " + shape_str(bias.shape()) + " != [" +
                                std::to_string(g.Cout) + "]");
  }
  if (g.kh > g.H + 2 * g.pad || g.kw > g.W + 2 * g.pad) {
    throw std::invalid_argument("conv2d: kernel " + std::to_string(g.kh) + "x" +
                                std::to_string(g.kw) + " exceeds padded input " +
                                std::to_string(g.H + 2 * g.pad) + "x" +
                                std::to_string(g.W + 2 * g.pad));
  }
  if (stride < 1) throw std::invalid_argument("conv2d: stride must be >= 1");
  g.oh = (g.H + 2 * g.pad - g.kh) / g.stride + 1;
  g.ow = (g.W + 2 * g.pad - g.kw) / g.stride + 1;

  const std::int64_t cin_g = g.Cin / g.groups;
  const std::int64_t cout_g = g.Cout / g.groups;
  const std::int64_t K = cin_g * g.kh * g.kw;
  const std::int64_t NN = g.oh * g.ow;

  Tensor out = Tensor::zeros({g.N, g.Cout, g.oh, g.ow});
  const bool wi = wants_grad(input, tape);
  const bool ww = wants_grad(weight, tape);
  const bool wb = wants_grad(bias, tape);
  const bool recording = tape && (wi || ww || wb);
  // Patch matrices are kept for the weight-gradient pass only.
  auto cols = (recording && ww) ? std::make_shared<std::vector<std::vector<double>>>() : nullptr;
  if (cols) cols->resize(static_cast<std::size_t>(g.N * g.groups));

  std::vector<double> col(static_cast<std::size_t>(K * NN));
  for (std::int64_t n = 0; n < g.N; ++n) {
    for (std::int64_t gr = 0; gr < g.groups; ++gr) {
      const double* src = input.data() + (n * g.Cin + gr * cin_g) * g.H * g.W;
      im2col(src, cin_g, g.H, g.W, g.kh, g.kw, g.stride, g.pad, g.oh, g.ow, col.data());
      double* dst = out.data() + (n * g.Cout + gr * cout_g) * NN;
      matmul_acc(weight.data() + gr * cout_g * K, col.data(), dst, cout_g, K, NN);
      if (cols) (*cols)[static_cast<std::size_t>(n * g.groups + gr)] = col;
    }
  }
  for (std::int64_t n = 0; n < g.N; ++n) {
    for (std::int64_t c = 0; c < g.Cout; ++c) {
      double* dst = out.data() + (n * g.Cout + c) * NN;
      const double b = bias.data()[c];
      for (std::int64_t i = 0; i < NN; ++i) dst[i] += b;
    }
  }

  if (recording) {
    auto id = input.impl();
    auto wd = weight.impl();
    auto bd = bias.impl();
    auto od = out.impl();
    tape->record({input.node(), weight.node(), bias.node()}, out,
                 [id, wd, bd, od, g, cols, wi, ww, wb, cin_g, cout_g, K, NN]() {
                   const double* gout = od->grad.data();
                   if (wb) {
                     auto& gb = ensure_grad(bd);
                     for (std::int64_t n = 0; n < g.N; ++n) {
                       for (std::int64_t c = 0; c < g.Cout; ++c) {
                         const double* row = gout + (n * g.Cout + c) * NN;
                         double acc = 0.0;
                         for (std::int64_t i = 0; i < NN; ++i) acc += row[i];
                         gb[static_cast<std::size_t>(c)] += acc;
                       }
                     }
                   }
                   if (ww) {
                     auto& gw = ensure_grad(wd);
                     for (std::int64_t n = 0; n < g.N; ++n) {
                       for (std::int64_t gr = 0; gr < g.groups; ++gr) {
                         const auto& col = (*cols)[static_cast<std::size_t>(n * g.groups + gr)];
                         matmul_abt(gout + (n * g.Cout + gr * cout_g) * NN, col.data(),
                                    gw.data() + gr * cout_g * K, cout_g, NN, K);
                       }
                     }
                   }
                   if (wi) {
                     auto& gi = ensure_grad(id);
                     std::vector<double> gcol(static_cast<std::size_t>(K * NN));
                     for (std::int64_t n = 0; n < g.N; ++n) {
                       for (std::int64_t gr = 0; gr < g.groups; ++gr) {
                         std::fill(gcol.begin(), gcol.end(), 0.0);
                         matmul_atb(wd->values.data() + gr * cout_g * K,
                                    gout + (n * g.Cout + gr * cout_g) * NN, gcol.data(), cout_g, K,
                                    NN);
                         col2im(gcol.data(), cin_g, g.H, g.W, g.kh, g.kw, g.stride, g.pad, g.oh,
                                g.ow, gi.data() + (n * g.Cin + gr * cin_g) * g.H * g.W);
                       }
                     }
                   }
                 });
  }
  return out;
}

Tensor conv_transpose2d(Tape* tape, const Tensor& input, const Tensor& weight, const Tensor& bias,
                        std::int64_t stride, std::int64_t padding) {
  if (input.shape().size() != 4) {
    throw std::invalid_argument("conv_transpose2d: input must be [N,C,H,W], got " +
                                shape_str(input.shape()));
  }
  if (weight.shape().size() != 4 || weight.shape()[0] != input.shape()[1]) {
    throw std::invalid_argument("conv_transpose2d: weight must be [Cin,Cout,kh,kw] with Cin " +
                                std::to_string(input.shape()[1]) + ", got " +
                                shape_str(weight.shape()));
  }
  const std::int64_t N = input.shape()[0];
  const std::int64_t Cin = input.shape()[1];
  const std::int64_t H = input.shape()[2];
  const std::int64_t W = input.shape()[3];
  const std::int64_t Cout = weight.shape()[1];
  const std::int64_t kh = weight.shape()[2];
  const std::int64_t kw = weight.shape()[3];
  const std::int64_t oh = (H - 1) * stride - 2 * padding + kh;
  const std::int64_t ow = (W - 1) * stride - 2 * padding + kw;
  if (oh < 1 || ow < 1) {
    throw std::invalid_argument("conv_transpose2d: output size " + std::to_string(oh) + "x" +
                                std::to_string(ow) + " underflows");
  }
  if (bias.shape() != Shape{Cout}) {
    throw std::invalid_argument("conv_transpose2d: bias shape " + shape_str(bias.shape()) +
                                " != [" + std::to_string(Cout) + "]");
  }

  const std::int64_t K = Cout * kh * kw;   // rows of the col matrix
  const std::int64_t NN = H * W;           // input positions
  Tensor out = Tensor::zeros({N, Cout, oh, ow});

  std::vector<double> colmat(static_cast<std::size_t>(K * NN));
  for (std::int64_t n = 0; n < N; ++n) {
    std::fill(colmat.begin(), colmat.end(), 0.0);
    // colmat = W^T[K,Cin] * x[Cin,NN]
    matmul_atb(weight.data(), input.data() + n * Cin * NN, colmat.data(), Cin, K, NN);
    col2im(colmat.data(), Cout, oh, ow, kh, kw, stride, padding, H, W,
           out.data() + n * Cout * oh * ow);
  }
  for (std::int64_t n = 0; n < N; ++n) {
    for (std::int64_t c = 0; c < Cout; ++c) {
      double* dst = out.data() + (n * Cout + c) * oh * ow;
      const double b = bias.data()[c];
      for (std::int64_t i = 0; i < oh * ow; ++i) dst[i] += b;
    }
  }

  const bool wi = wants_grad(input, tape);
  const bool ww = wants_grad(weight, tape);
  const bool wb = wants_grad(bias, tape);
  if (tape && (wi || ww || wb)) {
    auto id = input.impl();
    auto wd = weight.impl();
    auto bd = bias.impl();
    auto od = out.impl();
    tape->record(
        {input.node(), weight.node(), bias.node()}, out,
        [id, wd, bd, od, N, Cin, H, W, Cout, kh, kw, stride, padding, oh, ow, K, NN, wi, ww, wb]() {
          const double* gout = od->grad.data();
          if (wb) {
            auto& gb = ensure_grad(bd);
            for (std::int64_t n = 0; n < N; ++n) {
              for (std::int64_t c = 0; c < Cout; ++c) {
                const double* row = gout + (n * Cout + c) * oh * ow;
                double acc = 0.0;
                for (std::int64_t i = 0; i < oh * ow; ++i) acc += row[i];
                gb[static_cast<std::size_t>(c)] += acc;
              }
            }
          }
          if (wi || ww) {
            std::vector<double> col(static_cast<std::size_t>(K * NN));
            for (std::int64_t n = 0; n < N; ++n) {
              im2col(gout + n * Cout * oh * ow, Cout, oh, ow, kh, kw, stride, padding, H, W,
                     col.data());
              if (wi) {
                // gx[Cin,NN] += W[Cin,K] * col[K,NN]
                matmul_acc(wd->values.data(), col.data(), ensure_grad(id).data() + n * Cin * NN,
                           Cin, K, NN);
              }
              if (ww) {
                // gW[Cin,K] += x[Cin,NN] * col[K,NN]^T
                matmul_abt(id->values.data() + n * Cin * NN, col.data(), ensure_grad(wd).data(),
                           Cin, NN, K);
              }
            }
          }
        });
  }
  return out;
}

// ---------------------------------------------------------------------------
// Instance norm
// ---------------------------------------------------------------------------

Tensor instance_norm(Tape* tape, const Tensor& input, double eps) {
  if (input.shape().size() != 4) {
    throw std::invalid_argument("instance_norm: input must be [N,C,H,W], got " +
                                shape_str(input.shape()));
  }
  const std::int64_t N = input.shape()[0];
  const std::int64_t C = input.shape()[1];
  const std::int64_t M = input.shape()[2] * input.shape()[3];
  if (M < 2) {
    throw std::invalid_argument("instance_norm: spatial size " + std::to_string(M) +
                                " is degenerate (need H*W >= 2)");
  }
  Tensor out = Tensor::zeros(input.shape());
  auto inv_std = std::make_shared<std::vector<double>>(static_cast<std::size_t>(N * C));
  for (std::int64_t p = 0; p < N * C; ++p) {
    const double* x = input.data() + p * M;
    double* y = out.data() + p * M;
    double mu = 0.0;
    for (std::int64_t i = 0; i < M; ++i) mu += x[i];
    mu /= static_cast<double>(M);
    double var = 0.0;
    for (std::int64_t i = 0; i < M; ++i) {
      const double d = x[i] - mu;
      var += d * d;
    }
    var /= static_cast<double>(M);
    const double inv = 1.0 / std::sqrt(var + eps);
    (*inv_std)[static_cast<std::size_t>(p)] = inv;
    for (std::int64_t i = 0; i < M; ++i) y[i] = (x[i] - mu) * inv;
  }
  if (tape && wants_grad(input, tape)) {
    auto id = input.impl();
    auto od = out.impl();
    tape->record({input.node()}, out, [id, od, inv_std, N, C, M]() {
      auto& gx = ensure_grad(id);
      for (std::int64_t p = 0; p < N * C; ++p) {
        const double* gy = od->grad.data() + p * M;
        const double* y = od->values.data() + p * M;
        const double inv = (*inv_std)[static_cast<std::size_t>(p)];
        double mg = 0.0, mgy = 0.0;
        for (std::int64_t i = 0; i < M; ++i) {
          mg += gy[i];
          mgy += gy[i] * y[i];
        }
        mg /= static_cast<double>(M);
        mgy /= static_cast<double>(M);
        double* dst = gx.data() + p * M;
        for (std::int64_t i = 0; i < M; ++i) dst[i] += inv * (gy[i] - mg - y[i] * mgy);
      }
    });
  }
  return out;
}

// ---------------------------------------------------------------------------
// Slicing
// ---------------------------------------------------------------------------

Tensor crop2d(Tape* tape, const Tensor& input, std::int64_t row0, std::int64_t col0,
              std::int64_t h, std::int64_t w) {
  if (input.shape().size() != 4) {
    throw std::invalid_argument("crop2d: input must be [N,C,H,W], got " + shape_str(input.shape()));
  }
  const std::int64_t N = input.shape()[0];
  const std::int64_t C = input.shape()[1];
  const std::int64_t H = input.shape()[2];
  const std::int64_t W = input.shape()[3];
  if (row0 < 0 || col0 < 0 || h < 1 || w < 1 || row0 + h > H || col0 + w > W) {
    throw std::invalid_argument("crop2d: window " + std::to_string(h) + "x" + std::to_string(w) +
                                " at (" + std::to_string(row0) + "," + std::to_string(col0) +
                                ") exceeds input " + std::to_string(H) + "x" + std::to_string(W));
  }
  Tensor out = Tensor::zeros({N, C, h, w});
  for (std::int64_t n = 0; n < N; ++n) {
    for (std::int64_t c = 0; c < C; ++c) {
      const double* src = input.data() + ((n * C + c) * H + row0) * W + col0;
      double* dst = out.data() + (n * C + c) * h * w;
      for (std::int64_t i = 0; i < h; ++i) {
        std::memcpy(dst + i * w, src + i * W, static_cast<std::size_t>(w) * sizeof(double));
      }
    }
  }
  if (tape && wants_grad(input, tape)) {
    auto id = input.impl();
    auto od = out.impl();
    tape->record({input.node()}, out, [id, od, N, C, H, W, row0, col0, h, w]() {
      auto& gi = ensure_grad(id);
      for (std::int64_t n = 0; n < N; ++n) {
        for (std::int64_t c = 0; c < C; ++c) {
          double* dst = gi.data() + ((n * C + c) * H + row0) * W + col0;
          const double* src = od->grad.data() + (n * C + c) * h * w;
          for (std::int64_t i = 0; i < h; ++i) {
            for (std::int64_t j = 0; j < w; ++j) dst[i * W + j] += src[i * w + j];
          }
        }
      }
    });
  }
  return out;
}

Tensor slice_channels(Tape* tape, const Tensor& input, std::int64_t c0, std::int64_t c1) {
  if (input.shape().size() != 4) {
    throw std::invalid_argument("slice_channels: input must be [N,C,H,W], got " +
                                shape_str(input.shape()));
  }
  const std::int64_t N = input.shape()[0];
  const std::int64_t C = input.shape()[1];
  const std::int64_t HW = input.shape()[2] * input.shape()[3];
  if (c0 < 0 || c1 <= c0 || c1 > C) {
    throw std::invalid_argument("slice_channels: range [" + std::to_string(c0) + "," +
                                std::to_string(c1) + ") invalid for " + std::to_string(C) +
                                " channels");
  }
  const std::int64_t Cs = c1 - c0;
  Tensor out = Tensor::zeros({N, Cs, input.shape()[2], input.shape()[3]});
  for (std::int64_t n = 0; n < N; ++n) {
    std::memcpy(out.data() + n * Cs * HW, input.data() + (n * C + c0) * HW,
                static_cast<std::size_t>(Cs * HW) * sizeof(double));
  }
  if (tape && wants_grad(input, tape)) {
    auto id = input.impl();
    auto od = out.impl();
    tape->record({input.node()}, out, [id, od, N, C, HW, c0, Cs]() {
      auto& gi = ensure_grad(id);
      for (std::int64_t n = 0; n < N; ++n) {
        double* dst = gi.data() + (n * C + c0) * HW;
        const double* src = od->grad.data() + n * Cs * HW;
        for (std::int64_t i = 0; i < Cs * HW; ++i) dst[i] += src[i];
      }
    });
  }
  return out;
}

// ---------------------------------------------------------------------------
// Gradient check
// ---------------------------------------------------------------------------

double grad_check(const std::function<Tensor(Tape*, const Tensor&)>& f, const Tensor& point,
                  double h) {
  if (!(h > 0.0)) throw std::invalid_argument("grad_check: h must be positive");
  Tensor x = Tensor::from(point.shape(), point.values(), true);
  Tape tape;
  Tensor loss = f(&tape, x);
  if (loss.size() != 1) throw std::invalid_argument("grad_check: f must be scalar-valued");
  backward(loss, tape);
  const std::vector<double> analytic = x.grad();

  Tensor xe = Tensor::from(point.shape(), point.values(), false);
  double worst = 0.0;
  for (std::int64_t i = 0; i < xe.size(); ++i) {
    const double orig = xe.data()[i];
    xe.data()[i] = orig + h;
    const double fp = f(nullptr, xe).item();
    xe.data()[i] = orig - h;
    const double fm = f(nullptr, xe).item();
    xe.data()[i] = orig;
    const double numeric = (fp - fm) / (2.0 * h);
    const double a = analytic[static_cast<std::size_t>(i)];
    const double denom = std::max({std::fabs(a), std::fabs(numeric), 1e-4});
    worst = std::max(worst, std::fabs(a - numeric) / denom);
  }
  return worst;
}

}  // namespace maos
