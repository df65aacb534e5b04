#include "devid/tensor.hpp"

#include <algorithm>
#include <cmath>
#include <cstring>

#include "kernels.hpp"

namespace devid {

namespace {

thread_local Tape* g_current_tape = nullptr;

std::size_t shape_numel(const std::vector<int>& shape) {
  std::size_t n = 1;
  for (int d : shape) {
    if (d <= 0) throw ShapeError("tensor extents must be positive");
    n *= std::size_t(d);
  }
  return n;
}

std::string shape_str(const std::vector<int>& s) {
  std::string r = "(";
  for (std::size_t i = 0; i < s.size(); ++i) {
    if (i) r += ",";
    r += std::to_string(s[i]);
  }
  return r + ")";
}

void check_same_shape(const Tensor& a, const Tensor& b, const char* op) {
  if (a.shape() != b.shape())
    throw ShapeError(std::string(op) + ": shape mismatch " + shape_str(a.shape()) +
                     " vs " + shape_str(b.shape()));
}

std::vector<real>& ensure_grad(TensorImpl& t) {
  if (t.grad.size() != t.value.size()) t.grad.assign(t.value.size(), real(0));
  return t.grad;
}

bool tracing(std::initializer_list<const Tensor*> ins) {
  if (!g_current_tape) return false;
  for (const Tensor* t : ins)
    if (t->requires_grad()) return true;
  return false;
}

void mark_out(Tensor& out) {
  out.impl()->requires_grad = true;
  out.impl()->leaf = false;
}

// Elementwise unary op with dY/dX expressed in terms of input x and output y.
template <typename Fwd, typename Bwd>
Tensor unary_op(const Tensor& a, Fwd fwd, Bwd dydx) {
  Tensor out(a.shape());
  const std::size_t n = a.numel();
  const real* x = a.value().data();
  real* y = out.value().data();
  for (std::size_t i = 0; i < n; ++i) y[i] = fwd(x[i]);
  if (tracing({&a})) {
    mark_out(out);
    auto ai = a.impl();
    auto oi = out.impl();
    g_current_tape->record(
        [ai, oi, dydx]() {
          if (oi->grad.empty()) return;
          auto& ga = ensure_grad(*ai);
          const std::size_t n = ai->value.size();
          for (std::size_t i = 0; i < n; ++i)
            ga[i] += oi->grad[i] * dydx(ai->value[i], oi->value[i]);
        },
        oi);
  }
  return out;
}

} // namespace

// ---- Tensor ------------------------------------------------------------

Tensor::Tensor(std::vector<int> shape, real fill) {
  const std::size_t n = shape_numel(shape);
  impl_ = std::make_shared<TensorImpl>();
  impl_->shape = std::move(shape);
  impl_->value.assign(n, fill);
}

Tensor::Tensor(std::vector<int> shape, std::vector<real> data) {
  const std::size_t n = shape_numel(shape);
  if (n != data.size())
    throw ShapeError("tensor data length " + std::to_string(data.size()) +
                     " does not match shape " + shape_str(shape));
  impl_ = std::make_shared<TensorImpl>();
  impl_->shape = std::move(shape);
  impl_->value = std::move(data);
}

real Tensor::item() const {
  if (numel() != 1) throw ShapeError("item() on non-scalar tensor");
  return impl_->value[0];
}

Tensor& Tensor::set_requires_grad(bool b) {
  impl_->requires_grad = b;
  return *this;
}

std::vector<real>& Tensor::grad() { return ensure_grad(*impl_); }

void Tensor::zero_grad() {
  if (!impl_->grad.empty()) std::fill(impl_->grad.begin(), impl_->grad.end(), real(0));
}

Tensor Tensor::clone() const {
  Tensor t(impl_->shape, impl_->value);
  t.impl_->requires_grad = impl_->requires_grad;
  return t;
}

// ---- Tape ----------------------------------------------------------------

Tape* Tape::current() { return g_current_tape; }

void Tape::record(std::function<void()> back, std::shared_ptr<TensorImpl> out) {
  nodes_.push_back({std::move(back), std::move(out)});
}

BackwardStatus Tape::backward(const Tensor& loss, real seed) {
  if (loss.numel() != 1) throw ShapeError("backward: loss must be scalar");
  bool on_tape = false;
  for (const Node& n : nodes_)
    if (n.out == loss.impl()) {
      on_tape = true;
      break;
    }
  if (!on_tape) return BackwardStatus::detached;

  ensure_grad(*loss.impl())[0] += seed;
  for (auto it = nodes_.rbegin(); it != nodes_.rend(); ++it) it->back();
  for (const Node& n : nodes_)
    if (!n.out->leaf) n.out->grad.clear();
  return BackwardStatus::ok;
}

Tape::Scope::Scope(Tape& t) : prev_(g_current_tape) { g_current_tape = &t; }
Tape::Scope::~Scope() { g_current_tape = prev_; }

// ---- arithmetic ----------------------------------------------------------

Tensor add(const Tensor& a, const Tensor& b) {
  check_same_shape(a, b, "add");
  Tensor out(a.shape());
  const std::size_t n = a.numel();
  const real* pa = a.value().data();
  const real* pb = b.value().data();
  real* po = out.value().data();
  for (std::size_t i = 0; i < n; ++i) po[i] = pa[i] + pb[i];
  if (tracing({&a, &b})) {
    mark_out(out);
    auto ai = a.impl(), bi = b.impl(), oi = out.impl();
    g_current_tape->record(
        [ai, bi, oi]() {
          if (oi->grad.empty()) return;
          auto& ga = ensure_grad(*ai);
          auto& gb = ensure_grad(*bi);
          const std::size_t n = oi->grad.size();
          for (std::size_t i = 0; i < n; ++i) {
            ga[i] += oi->grad[i];
            gb[i] += oi->grad[i];
          }
        },
        oi);
  }
  return out;
}

Tensor sub(const Tensor& a, const Tensor& b) {
  check_same_shape(a, b, "sub");
  Tensor out(a.shape());
  const std::size_t n = a.numel();
  for (std::size_t i = 0; i < n; ++i) out.value()[i] = a.value()[i] - b.value()[i];
  if (tracing({&a, &b})) {
    mark_out(out);
    auto ai = a.impl(), bi = b.impl(), oi = out.impl();
    g_current_tape->record(
        [ai, bi, oi]() {
          if (oi->grad.empty()) return;
          auto& ga = ensure_grad(*ai);
          auto& gb = ensure_grad(*bi);
          for (std::size_t i = 0; i < oi->grad.size(); ++i) {
            ga[i] += oi->grad[i];
            gb[i] -= oi->grad[i];
          }
        },
        oi);
  }
  return out;
}

Tensor add_scalar(const Tensor& a, real s) {
  Tensor out(a.shape());
  for (std::size_t i = 0; i < a.numel(); ++i) out.value()[i] = a.value()[i] + s;
  if (tracing({&a})) {
    mark_out(out);
    auto ai = a.impl(), oi = out.impl();
    g_current_tape->record(
        [ai, oi]() {
          if (oi->grad.empty()) return;
          auto& ga = ensure_grad(*ai);
          for (std::size_t i = 0; i < oi->grad.size(); ++i) ga[i] += oi->grad[i];
        },
        oi);
  }
  return out;
}

Tensor add_bias(const Tensor& x, const Tensor& b) {
  if (b.rank() != 1 || x.dim(x.rank() - 1) != b.dim(0))
    throw ShapeError("add_bias: bias length must match last axis");
  Tensor out(x.shape());
  const std::size_t w = std::size_t(b.dim(0));
  const std::size_t rows = x.numel() / w;
  const real* px = x.value().data();
  const real* pb = b.value().data();
  real* po = out.value().data();
  for (std::size_t r = 0; r < rows; ++r)
    for (std::size_t c = 0; c < w; ++c) po[r * w + c] = px[r * w + c] + pb[c];
  if (tracing({&x, &b})) {
    mark_out(out);
    auto xi = x.impl(), bi = b.impl(), oi = out.impl();
    g_current_tape->record(
        [xi, bi, oi, w, rows]() {
          if (oi->grad.empty()) return;
          auto& gx = ensure_grad(*xi);
          auto& gb = ensure_grad(*bi);
          for (std::size_t r = 0; r < rows; ++r)
            for (std::size_t c = 0; c < w; ++c) {
              gx[r * w + c] += oi->grad[r * w + c];
              gb[c] += oi->grad[r * w + c];
            }
        },
        oi);
  }
  return out;
}

Tensor hadamard(const Tensor& a, const Tensor& b) {
  check_same_shape(a, b, "hadamard");
  Tensor out(a.shape());
  const std::size_t n = a.numel();
  for (std::size_t i = 0; i < n; ++i) out.value()[i] = a.value()[i] * b.value()[i];
  if (tracing({&a, &b})) {
    mark_out(out);
    auto ai = a.impl(), bi = b.impl(), oi = out.impl();
    g_current_tape->record(
        [ai, bi, oi]() {
          if (oi->grad.empty()) return;
          auto& ga = ensure_grad(*ai);
          auto& gb = ensure_grad(*bi);
          for (std::size_t i = 0; i < oi->grad.size(); ++i) {
            ga[i] += oi->grad[i] * bi->value[i];
            gb[i] += oi->grad[i] * ai->value[i];
          }
        },
        oi);
  }
  return out;
}

Tensor scalar_mul(const Tensor& a, real s) {
  Tensor out(a.shape());
  for (std::size_t i = 0; i < a.numel(); ++i) out.value()[i] = a.value()[i] * s;
  if (tracing({&a})) {
    mark_out(out);
    auto ai = a.impl(), oi = out.impl();
    g_current_tape->record(
        [ai, oi, s]() {
          if (oi->grad.empty()) return;
          auto& ga = ensure_grad(*ai);
          for (std::size_t i = 0; i < oi->grad.size(); ++i) ga[i] += oi->grad[i] * s;
        },
        oi);
  }
  return out;
}

// ---- linear algebra -------------------------------------------------------

Tensor matmul(const Tensor& a, const Tensor& b) {
  if (a.rank() != 2 || b.rank() != 2 || a.dim(1) != b.dim(0))
    throw ShapeError("matmul: need (m,k)x(k,n), got " + shape_str(a.shape()) + " x " +
                     shape_str(b.shape()));
  const int m = a.dim(0), k = a.dim(1), n = b.dim(1);
  constexpr int kTile = 32; // row tile keeps B and the row block L1/L2 hot
  Tensor out({m, n});
  const real* pa = a.value().data();
  const real* pb = b.value().data();
  real* po = out.value().data();
  for (int i0 = 0; i0 < m; i0 += kTile) {
    const int i1 = std::min(m, i0 + kTile);
    for (int kk = 0; kk < k; ++kk) {
      const real* brow = pb + std::size_t(kk) * n;
      for (int i = i0; i < i1; ++i) {
        const real av = pa[std::size_t(i) * k + kk];
        if (av == real(0)) continue;
        kernels::axpy(po + std::size_t(i) * n, brow, av, n);
      }
    }
  }
  if (tracing({&a, &b})) {
    mark_out(out);
    auto ai = a.impl(), bi = b.impl(), oi = out.impl();
    g_current_tape->record(
        [ai, bi, oi, m, k, n]() {
          if (oi->grad.empty()) return;
          auto& ga = ensure_grad(*ai);
          auto& gb = ensure_grad(*bi);
          const real* go = oi->grad.data();
          const real* pa = ai->value.data();
          const real* pb = bi->value.data();
          // dA = dOut * B^T ; dB = A^T * dOut
          for (int i0 = 0; i0 < m; i0 += kTile) {
            const int i1 = std::min(m, i0 + kTile);
            for (int kk = 0; kk < k; ++kk) {
              const real* brow = pb + std::size_t(kk) * n;
              real* gbrow = gb.data() + std::size_t(kk) * n;
              for (int i = i0; i < i1; ++i) {
                const real* gorow = go + std::size_t(i) * n;
                ga[std::size_t(i) * k + kk] += kernels::dot(gorow, brow, n);
                const real av = pa[std::size_t(i) * k + kk];
                if (av != real(0)) kernels::axpy(gbrow, gorow, av, n);
              }
            }
          }
        },
        oi);
  }
  return out;
}

Tensor matvec(const Tensor& w, const Tensor& x) {
  if (w.rank() != 2 || x.rank() != 1 || w.dim(1) != x.dim(0))
    throw ShapeError("matvec: need (m,n)x(n), got " + shape_str(w.shape()) + " x " +
                     shape_str(x.shape()));
  const int m = w.dim(0), n = w.dim(1);
  Tensor out({m});
  const real* pw = w.value().data();
  const real* px = x.value().data();
  real* po = out.value().data();
  for (int i = 0; i < m; ++i) po[i] = kernels::dot(pw + std::size_t(i) * n, px, n);
  if (tracing({&w, &x})) {
    mark_out(out);
    auto wi = w.impl(), xi = x.impl(), oi = out.impl();
    g_current_tape->record(
        [wi, xi, oi, m, n]() {
          if (oi->grad.empty()) return;
          auto& gw = ensure_grad(*wi);
          auto& gx = ensure_grad(*xi);
          const real* go = oi->grad.data();
          const real* pw = wi->value.data();
          const real* px = xi->value.data();
          for (int i = 0; i < m; ++i) {
            const real g = go[i];
            if (g == real(0)) continue;
            kernels::axpy2(gw.data() + std::size_t(i) * n, px, gx.data(),
                           pw + std::size_t(i) * n, g, n);
          }
        },
        oi);
  }
  return out;
}

// ---- convolutions ----------------------------------------------------------
// Weight layout (K, Cin, F): the (k, c) loops run outermost so each weight
// row w[k][c][:] is read once per call while the output rows, which fit in
// L1, take the rank-1 updates.

Tensor conv1d_valid(const Tensor& x, const Tensor& w, int stride) {
  if (x.rank() != 2 || w.rank() != 3 || w.dim(1) != x.dim(1))
    throw ShapeError("conv1d_valid: need x(L,Cin), w(K,Cin,F)");
  if (stride < 1) throw ShapeError("conv1d_valid: stride must be >= 1");
  const int L = x.dim(0), cin = x.dim(1), k = w.dim(0), f = w.dim(2);
  if (L < k) throw ShapeError("conv1d_valid: input shorter than kernel");
  const int lout = (L - k) / stride + 1;
  Tensor out({lout, f});
  const real* px = x.value().data();
  const real* pw = w.value().data();
  real* po = out.value().data();
  for (int kk = 0; kk < k; ++kk)
    for (int c = 0; c < cin; ++c) {
      const real* wrow = pw + (std::size_t(kk) * cin + c) * f;
      for (int l = 0; l < lout; ++l) {
        const real xv = px[std::size_t(l * stride + kk) * cin + c];
        if (xv == real(0)) continue;
        kernels::axpy(po + std::size_t(l) * f, wrow, xv, f);
      }
    }
  if (tracing({&x, &w})) {
    mark_out(out);
    auto xi = x.impl(), wi = w.impl(), oi = out.impl();
    g_current_tape->record(
        [xi, wi, oi, lout, f, k, stride, cin]() {
          if (oi->grad.empty()) return;
          auto& gx = ensure_grad(*xi);
          auto& gw = ensure_grad(*wi);
          const real* go = oi->grad.data();
          const real* px = xi->value.data();
          const real* pw = wi->value.data();
          for (int kk = 0; kk < k; ++kk)
            for (int c = 0; c < cin; ++c) {
              const std::size_t woff = (std::size_t(kk) * cin + c) * f;
              const real* wrow = pw + woff;
              real* gwrow = gw.data() + woff;
              for (int l = 0; l < lout; ++l) {
                const std::size_t xoff = std::size_t(l * stride + kk) * cin + c;
                const real* gorow = go + std::size_t(l) * f;
                gx[xoff] += kernels::dot(wrow, gorow, f);
                kernels::axpy(gwrow, gorow, px[xoff], f);
              }
            }
        },
        oi);
  }
  return out;
}

Tensor conv1d_same(const Tensor& x, const Tensor& w) {
  if (x.rank() != 2 || w.rank() != 3 || w.dim(1) != x.dim(1))
    throw ShapeError("conv1d_same: need x(L,Cin), w(K,Cin,F)");
  const int L = x.dim(0), cin = x.dim(1), k = w.dim(0), f = w.dim(2);
  if (k % 2 == 0) throw ShapeError("conv1d_same: kernel width must be odd");
  const int pad = (k - 1) / 2;
  Tensor out({L, f});
  const real* px = x.value().data();
  const real* pw = w.value().data();
  real* po = out.value().data();
  for (int kk = 0; kk < k; ++kk) {
    const int l0 = std::max(0, pad - kk);
    const int l1 = std::min(L, L + pad - kk);
    for (int c = 0; c < cin; ++c) {
      const real* wrow = pw + (std::size_t(kk) * cin + c) * f;
      for (int l = l0; l < l1; ++l) {
        const real xv = px[std::size_t(l - pad + kk) * cin + c];
        if (xv == real(0)) continue;
        kernels::axpy(po + std::size_t(l) * f, wrow, xv, f);
      }
    }
  }
  if (tracing({&x, &w})) {
    mark_out(out);
    auto xi = x.impl(), wi = w.impl(), oi = out.impl();
    g_current_tape->record(
        [xi, wi, oi, L, cin, f, k, pad]() {
          if (oi->grad.empty()) return;
          auto& gx = ensure_grad(*xi);
          auto& gw = ensure_grad(*wi);
          const real* go = oi->grad.data();
          const real* px = xi->value.data();
          const real* pw = wi->value.data();
          for (int kk = 0; kk < k; ++kk) {
            const int l0 = std::max(0, pad - kk);
            const int l1 = std::min(L, L + pad - kk);
            for (int c = 0; c < cin; ++c) {
              const std::size_t woff = (std::size_t(kk) * cin + c) * f;
              const real* wrow = pw + woff;
              real* gwrow = gw.data() + woff;
              for (int l = l0; l < l1; ++l) {
                const std::size_t xoff = std::size_t(l - pad + kk) * cin + c;
                const real* gorow = go + std::size_t(l) * f;
                gx[xoff] += kernels::dot(wrow, gorow, f);
                kernels::axpy(gwrow, gorow, px[xoff], f);
              }
            }
          }
        },
        oi);
  }
  return out;
}

// ---- elementwise nonlinearities ---------------------------------------------

Tensor sigmoid(const Tensor& a) {
  return unary_op(
      a, [](real x) { return real(1) / (real(1) + std::exp(-x)); },
      [](real, real y) { return y * (real(1) - y); });
}

Tensor tanh(const Tensor& a) {
  return unary_op(
      a, [](real x) { return std::tanh(x); },
      [](real, real y) { return real(1) - y * y; });
}

Tensor relu(const Tensor& a) {
  return unary_op(
      a, [](real x) { return x > real(0) ? x : real(0); },
      [](real x, real) { return x > real(0) ? real(1) : real(0); });
}

Tensor exp(const Tensor& a) {
  return unary_op(
      a, [](real x) { return std::exp(x); }, [](real, real y) { return y; });
}

Tensor log(const Tensor& a) {
  for (real v : a.value())
    if (v <= real(0)) throw DomainError("log: nonpositive input");
  return unary_op(
      a, [](real x) { return std::log(x); },
      [](real x, real) { return real(1) / x; });
}

// ---- reductions --------------------------------------------------------------

Tensor sum(const Tensor& a) {
  real acc = 0;
  for (real v : a.value()) acc += v;
  Tensor out = Tensor::scalar(acc);
  if (tracing({&a})) {
    mark_out(out);
    auto ai = a.impl(), oi = out.impl();
    g_current_tape->record(
        [ai, oi]() {
          if (oi->grad.empty()) return;
          auto& ga = ensure_grad(*ai);
          const real g = oi->grad[0];
          for (real& v : ga) v += g;
        },
        oi);
  }
  return out;
}

Tensor mean(const Tensor& a) {
  real acc = 0;
  for (real v : a.value()) acc += v;
  const real inv = real(1) / real(a.numel());
  Tensor out = Tensor::scalar(acc * inv);
  if (tracing({&a})) {
    mark_out(out);
    auto ai = a.impl(), oi = out.impl();
    g_current_tape->record(
        [ai, oi, inv]() {
          if (oi->grad.empty()) return;
          auto& ga = ensure_grad(*ai);
          const real g = oi->grad[0] * inv;
          for (real& v : ga) v += g;
        },
        oi);
  }
  return out;
}

Tensor max(const Tensor& a) {
  std::size_t arg = 0;
  for (std::size_t i = 1; i < a.numel(); ++i)
    if (a.value()[i] > a.value()[arg]) arg = i;
  Tensor out = Tensor::scalar(a.value()[arg]);
  if (tracing({&a})) {
    mark_out(out);
    auto ai = a.impl(), oi = out.impl();
    g_current_tape->record(
        [ai, oi, arg]() {
          if (oi->grad.empty()) return;
          ensure_grad(*ai)[arg] += oi->grad[0];
        },
        oi);
  }
  return out;
}

// ---- structural ops -----------------------------------------------------------

Tensor concat(const std::vector<Tensor>& parts, int axis) {
  if (parts.empty()) throw ShapeError("concat: no inputs");
  const int r = parts[0].rank();
  if (axis < 0 || axis >= r) throw ShapeError("concat: bad axis");
  if (axis != 0 && r != 2) throw ShapeError("concat: axis 1 requires rank 2");
  for (const Tensor& p : parts)
    if (p.rank() != r) throw ShapeError("concat: rank mismatch");

  if (r == 1 || axis == 0) {
    // Row-major concat along axis 0 is storage concat.
    std::vector<int> shape = parts[0].shape();
    int total = 0;
    for (const Tensor& p : parts) {
      for (int d = 1; d < r; ++d)
        if (p.dim(d) != parts[0].dim(d)) throw ShapeError("concat: trailing dims differ");
      total += p.dim(0);
    }
    shape[0] = total;
    Tensor out(shape);
    std::size_t off = 0;
    for (const Tensor& p : parts) {
      std::copy(p.value().begin(), p.value().end(), out.value().begin() + long(off));
      off += p.numel();
    }
    bool trace = false;
    if (g_current_tape)
      for (const Tensor& p : parts)
        if (p.requires_grad()) trace = true;
    if (trace) {
      mark_out(out);
      std::vector<std::shared_ptr<TensorImpl>> ins;
      for (const Tensor& p : parts) ins.push_back(p.impl());
      auto oi = out.impl();
      g_current_tape->record(
          [ins, oi]() {
            if (oi->grad.empty()) return;
            std::size_t off = 0;
            for (auto& in : ins) {
              auto& g = ensure_grad(*in);
              for (std::size_t i = 0; i < g.size(); ++i) g[i] += oi->grad[off + i];
              off += g.size();
            }
          },
          oi);
    }
    return out;
  }

  // axis == 1, rank 2
  const int rows = parts[0].dim(0);
  int width = 0;
  for (const Tensor& p : parts) {
    if (p.dim(0) != rows) throw ShapeError("concat: row count mismatch");
    width += p.dim(1);
  }
  Tensor out({rows, width});
  int coff = 0;
  for (const Tensor& p : parts) {
    const int w = p.dim(1);
    for (int rr = 0; rr < rows; ++rr)
      std::copy(p.value().begin() + std::size_t(rr) * w,
                p.value().begin() + std::size_t(rr + 1) * w,
                out.value().begin() + std::size_t(rr) * width + coff);
    coff += w;
  }
  bool trace = false;
  if (g_current_tape)
    for (const Tensor& p : parts)
      if (p.requires_grad()) trace = true;
  if (trace) {
    mark_out(out);
    std::vector<std::shared_ptr<TensorImpl>> ins;
    std::vector<int> widths;
    for (const Tensor& p : parts) {
      ins.push_back(p.impl());
      widths.push_back(p.dim(1));
    }
    auto oi = out.impl();
    g_current_tape->record(
        [ins, widths, oi, rows, width]() {
          if (oi->grad.empty()) return;
          int coff = 0;
          for (std::size_t pi = 0; pi < ins.size(); ++pi) {
            auto& g = ensure_grad(*ins[pi]);
            const int w = widths[pi];
            for (int rr = 0; rr < rows; ++rr)
              for (int c = 0; c < w; ++c)
                g[std::size_t(rr) * w + c] += oi->grad[std::size_t(rr) * width + coff + c];
            coff += w;
          }
        },
        oi);
  }
  return out;
}

Tensor slice(const Tensor& a, int axis, int start, int len) {
  const int r = a.rank();
  if (axis < 0 || axis >= r) throw ShapeError("slice: bad axis");
  if (axis != 0 && r != 2) throw ShapeError("slice: axis 1 requires rank 2");
  if (start < 0 || len <= 0 || start + len > a.dim(axis))
    throw ShapeError("slice: out of range");

  std::vector<int> shape = a.shape();
  shape[std::size_t(axis)] = len;
  Tensor out(shape);
  if (axis == 0) {
    const std::size_t width = a.numel() / std::size_t(a.dim(0));
    const std::size_t off = std::size_t(start) * width;
    std::copy(a.value().begin() + long(off),
              a.value().begin() + long(off + std::size_t(len) * width),
              out.value().begin());
    if (tracing({&a})) {
      mark_out(out);
      auto ai = a.impl(), oi = out.impl();
      g_current_tape->record(
          [ai, oi, off]() {
            if (oi->grad.empty()) return;
            auto& g = ensure_grad(*ai);
            for (std::size_t i = 0; i < oi->grad.size(); ++i) g[off + i] += oi->grad[i];
          },
          oi);
    }
    return out;
  }
  // column slice of a matrix
  const int rows = a.dim(0);
  const int width = a.dim(1);
  for (int rr = 0; rr < rows; ++rr)
    std::copy(a.value().begin() + std::size_t(rr) * width + start,
              a.value().begin() + std::size_t(rr) * width + start + len,
              out.value().begin() + std::size_t(rr) * len);
  if (tracing({&a})) {
    mark_out(out);
    auto ai = a.impl(), oi = out.impl();
    g_current_tape->record(
        [ai, oi, rows, width, start, len]() {
          if (oi->grad.empty()) return;
          auto& g = ensure_grad(*ai);
          for (int rr = 0; rr < rows; ++rr)
            for (int c = 0; c < len; ++c)
              g[std::size_t(rr) * width + start + c] += oi->grad[std::size_t(rr) * len + c];
        },
        oi);
  }
  return out;
}

Tensor reshape(const Tensor& a, std::vector<int> shape) {
  if (shape_numel(shape) != a.numel())
    throw ShapeError("reshape: element count mismatch for " + shape_str(shape));
  Tensor out(std::move(shape), a.value());
  if (tracing({&a})) {
    mark_out(out);
    auto ai = a.impl(), oi = out.impl();
    g_current_tape->record(
        [ai, oi]() {
          if (oi->grad.empty()) return;
          auto& g = ensure_grad(*ai);
          for (std::size_t i = 0; i < g.size(); ++i) g[i] += oi->grad[i];
        },
        oi);
  }
  return out;
}

Tensor transpose(const Tensor& a) {
  if (a.rank() != 2) throw ShapeError("transpose: rank-2 only");
  const int m = a.dim(0), n = a.dim(1);
  Tensor out({n, m});
  for (int i = 0; i < m; ++i)
    for (int j = 0; j < n; ++j)
      out.value()[std::size_t(j) * m + i] = a.value()[std::size_t(i) * n + j];
  if (tracing({&a})) {
    mark_out(out);
    auto ai = a.impl(), oi = out.impl();
    g_current_tape->record(
        [ai, oi, m, n]() {
          if (oi->grad.empty()) return;
          auto& g = ensure_grad(*ai);
          for (int i = 0; i < m; ++i)
            for (int j = 0; j < n; ++j)
              g[std::size_t(i) * n + j] += oi->grad[std::size_t(j) * m + i];
        },
        oi);
  }
  return out;
}

// ---- softmax family --------------------------------------------------------

namespace {

void softmax_row(const real* x, real* y, int n) {
  real mx = x[0];
  for (int i = 1; i < n; ++i) mx = std::max(mx, x[i]);
  real denom = 0;
  for (int i = 0; i < n; ++i) {
    y[i] = std::exp(x[i] - mx);
    denom += y[i];
  }
  const real inv = real(1) / denom;
  for (int i = 0; i < n; ++i) y[i] *= inv;
}

// dL/dx_i = y_i * (dL/dy_i - sum_j dL/dy_j * y_j)
void softmax_row_backward(const real* y, const real* gy, real* gx, int n) {
  real dot = 0;
  for (int i = 0; i < n; ++i) dot += gy[i] * y[i];
  for (int i = 0; i < n; ++i) gx[i] += y[i] * (gy[i] - dot);
}

} // namespace

Tensor softmax(const Tensor& logits) {
  if (logits.rank() != 1) throw ShapeError("softmax: rank-1 only");
  const int n = logits.dim(0);
  Tensor out({n});
  softmax_row(logits.value().data(), out.value().data(), n);
  if (tracing({&logits})) {
    mark_out(out);
    auto ai = logits.impl(), oi = out.impl();
    g_current_tape->record(
        [ai, oi, n]() {
          if (oi->grad.empty()) return;
          softmax_row_backward(oi->value.data(), oi->grad.data(),
                               ensure_grad(*ai).data(), n);
        },
        oi);
  }
  return out;
}

Tensor row_softmax(const Tensor& x) {
  if (x.rank() != 2) throw ShapeError("row_softmax: rank-2 only");
  const int rows = x.dim(0), n = x.dim(1);
  if (rows == 0 || n == 0) throw ShapeError("row_softmax: empty input");
  Tensor out({rows, n});
  for (int r = 0; r < rows; ++r)
    softmax_row(x.value().data() + std::size_t(r) * n,
                out.value().data() + std::size_t(r) * n, n);
  if (tracing({&x})) {
    mark_out(out);
    auto ai = x.impl(), oi = out.impl();
    g_current_tape->record(
        [ai, oi, rows, n]() {
          if (oi->grad.empty()) return;
          auto& gx = ensure_grad(*ai);
          for (int r = 0; r < rows; ++r)
            softmax_row_backward(oi->value.data() + std::size_t(r) * n,
                                 oi->grad.data() + std::size_t(r) * n,
                                 gx.data() + std::size_t(r) * n, n);
        },
        oi);
  }
  return out;
}

Tensor cross_entropy(const Tensor& probs, int target) {
  if (probs.rank() != 1) throw ShapeError("cross_entropy: rank-1 probs");
  if (target < 0 || target >= probs.dim(0))
    throw ShapeError("cross_entropy: target index out of range");
  constexpr real kFloor = real(1e-12);
  const real p = probs.value()[std::size_t(target)];
  Tensor out = Tensor::scalar(-std::log(std::max(p, kFloor)));
  if (tracing({&probs})) {
    mark_out(out);
    auto pi = probs.impl(), oi = out.impl();
    g_current_tape->record(
        [pi, oi, target]() {
          if (oi->grad.empty()) return;
          const real p = pi->value[std::size_t(target)];
          if (p > kFloor) ensure_grad(*pi)[std::size_t(target)] -= oi->grad[0] / p;
        },
        oi);
  }
  return out;
}

// ---- normalization ----------------------------------------------------------

Tensor layer_norm(const Tensor& x, const Tensor& gain, const Tensor& bias, real eps) {
  const std::size_t n = x.numel();
  if (gain.numel() != n || bias.numel() != n)
    throw ShapeError("layer_norm: gain/bias must match element count");
  double mu = 0;
  for (real v : x.value()) mu += double(v);
  mu /= double(n);
  double var = 0;
  for (real v : x.value()) var += (double(v) - mu) * (double(v) - mu);
  var /= double(n);
  const real sigma_inv = real(1.0 / std::sqrt(var + double(eps)));
  const real mu_r = real(mu);

  Tensor out(x.shape());
  for (std::size_t i = 0; i < n; ++i) {
    const real xhat = (x.value()[i] - mu_r) * sigma_inv;
    out.value()[i] = gain.value()[i] * xhat + bias.value()[i];
  }
  if (tracing({&x, &gain, &bias})) {
    mark_out(out);
    auto xi = x.impl(), gi = gain.impl(), bi = bias.impl(), oi = out.impl();
    g_current_tape->record(
        [xi, gi, bi, oi, n, mu_r, sigma_inv]() {
          if (oi->grad.empty()) return;
          auto& gx = ensure_grad(*xi);
          auto& gg = ensure_grad(*gi);
          auto& gb = ensure_grad(*bi);
          // dL/dxhat_i = go_i * gain_i; then the standard LN backward.
          double sum_dxhat = 0, sum_dxhat_xhat = 0;
          std::vector<real> xhat(n), dxhat(n);
          for (std::size_t i = 0; i < n; ++i) {
            xhat[i] = (xi->value[i] - mu_r) * sigma_inv;
            dxhat[i] = oi->grad[i] * gi->value[i];
            gg[i] += oi->grad[i] * xhat[i];
            gb[i] += oi->grad[i];
            sum_dxhat += double(dxhat[i]);
            sum_dxhat_xhat += double(dxhat[i]) * double(xhat[i]);
          }
          const real inv_n = real(1) / real(n);
          for (std::size_t i = 0; i < n; ++i)
            gx[i] += sigma_inv * (dxhat[i] - real(sum_dxhat) * inv_n -
                                  xhat[i] * real(sum_dxhat_xhat) * inv_n);
        },
        oi);
  }
  return out;
}

Tensor batch_norm(const Tensor& x, const Tensor& scale, const Tensor& shift,
                  std::vector<real>* running_mean, std::vector<real>* running_var,
                  real momentum, real eps, bool training, BnBatchStats* observed) {
  if (x.rank() < 2) throw ShapeError("batch_norm: rank >= 2 required");
  const int c = x.dim(x.rank() - 1);
  if (scale.numel() != std::size_t(c) || shift.numel() != std::size_t(c))
    throw ShapeError("batch_norm: scale/shift width mismatch");
  const std::size_t rows = x.numel() / std::size_t(c);

  const auto cs_n = static_cast<std::size_t>(c);
  std::vector<real> mean_c(cs_n), var_c(cs_n);
  if (training) {
    std::vector<double> mu(cs_n, 0.0), m2(cs_n, 0.0);
    const real* px = x.value().data();
    for (std::size_t r = 0; r < rows; ++r)
      for (int ch = 0; ch < c; ++ch) mu[std::size_t(ch)] += double(px[r * c + ch]);
    for (int ch = 0; ch < c; ++ch) mu[std::size_t(ch)] /= double(rows);
    for (std::size_t r = 0; r < rows; ++r)
      for (int ch = 0; ch < c; ++ch) {
        const double d = double(px[r * c + ch]) - mu[std::size_t(ch)];
        m2[std::size_t(ch)] += d * d;
      }
    for (int ch = 0; ch < c; ++ch) {
      mean_c[std::size_t(ch)] = real(mu[std::size_t(ch)]);
      var_c[std::size_t(ch)] = real(m2[std::size_t(ch)] / double(rows));
    }
    if (running_mean && running_var) {
      if (running_mean->size() != std::size_t(c) || running_var->size() != std::size_t(c))
        throw ShapeError("batch_norm: running stats width mismatch");
      for (int ch = 0; ch < c; ++ch) {
        (*running_mean)[std::size_t(ch)] =
            (real(1) - momentum) * (*running_mean)[std::size_t(ch)] + momentum * mean_c[std::size_t(ch)];
        (*running_var)[std::size_t(ch)] =
            (real(1) - momentum) * (*running_var)[std::size_t(ch)] + momentum * var_c[std::size_t(ch)];
      }
    }
    if (observed) {
      observed->mean = mean_c;
      observed->var = var_c;
    }
  } else {
    if (!running_mean || !running_var)
      throw ConfigError("batch_norm: inference requires running stats");
    mean_c.assign(running_mean->begin(), running_mean->end());
    var_c.assign(running_var->begin(), running_var->end());
  }

  std::vector<real> inv_sigma(cs_n);
  for (int ch = 0; ch < c; ++ch)
    inv_sigma[std::size_t(ch)] = real(1) / std::sqrt(var_c[std::size_t(ch)] + eps);

  Tensor out(x.shape());
  {
    const real* px = x.value().data();
    const real* ps = scale.value().data();
    const real* pb = shift.value().data();
    real* po = out.value().data();
    for (std::size_t r = 0; r < rows; ++r)
      for (int ch = 0; ch < c; ++ch) {
        const real xhat = (px[r * c + ch] - mean_c[std::size_t(ch)]) * inv_sigma[std::size_t(ch)];
        po[r * c + ch] = ps[ch] * xhat + pb[ch];
      }
  }

  if (tracing({&x, &scale, &shift})) {
    mark_out(out);
    auto xi = x.impl(), si = scale.impl(), bi = shift.impl(), oi = out.impl();
    const bool batch_stats = training;
    g_current_tape->record(
        [xi, si, bi, oi, rows, c, mean_c, inv_sigma, batch_stats]() {
          if (oi->grad.empty()) return;
          auto& gx = ensure_grad(*xi);
          auto& gs = ensure_grad(*si);
          auto& gb = ensure_grad(*bi);
          const real* px = xi->value.data();
          const real* go = oi->grad.data();
          const real* ps = si->value.data();
          const std::size_t cs = std::size_t(c);
          std::vector<double> sum_g(cs, 0.0), sum_gx(cs, 0.0);
          for (std::size_t r = 0; r < rows; ++r)
            for (int ch = 0; ch < c; ++ch) {
              const real xhat = (px[r * cs + ch] - mean_c[std::size_t(ch)]) * inv_sigma[std::size_t(ch)];
              const real g = go[r * cs + ch];
              gs[std::size_t(ch)] += g * xhat;
              gb[std::size_t(ch)] += g;
              sum_g[std::size_t(ch)] += double(g);
              sum_gx[std::size_t(ch)] += double(g) * double(xhat);
            }
          const double inv_rows = 1.0 / double(rows);
          for (std::size_t r = 0; r < rows; ++r)
            for (int ch = 0; ch < c; ++ch) {
              const real xhat = (px[r * cs + ch] - mean_c[std::size_t(ch)]) * inv_sigma[std::size_t(ch)];
              const real g = go[r * cs + ch] * ps[ch];
              if (batch_stats) {
                // normalization constants depend on the batch
                gx[r * cs + ch] += inv_sigma[std::size_t(ch)] *
                                   (g - real(sum_g[std::size_t(ch)] * inv_rows) * ps[ch] -
                                    xhat * real(sum_gx[std::size_t(ch)] * inv_rows) * ps[ch]);
              } else {
                gx[r * cs + ch] += g * inv_sigma[std::size_t(ch)];
              }
            }
        },
        oi);
  }
  return out;
}

// ---- finite differences -------------------------------------------------------

double finite_diff_check(const std::function<Tensor(const Tensor&)>& f,
                         const Tensor& point, double eps) {
  Tensor p = point.clone();
  p.set_requires_grad(true);

  Tape tape;
  {
    Tape::Scope scope(tape);
    Tensor loss = f(p);
    tape.backward(loss);
  }
  std::vector<real> analytic = p.grad();

  double worst = 0;
  for (std::size_t i = 0; i < p.numel(); ++i) {
    const real saved = p.value()[i];
    p.value()[i] = saved + real(eps);
    const double fp = double(f(p).item());
    p.value()[i] = saved - real(eps);
    const double fm = double(f(p).item());
    p.value()[i] = saved;
    const double numeric = (fp - fm) / (2 * eps);
    const double a = double(analytic[i]);
    const double err = std::abs(a - numeric) / std::max({1.0, std::abs(a), std::abs(numeric)});
    worst = std::max(worst, err);
  }
  return worst;
}

double finite_diff_check_params(const std::function<Tensor()>& loss_fn,
                                std::span<Tensor> params, double eps) {
  for (Tensor& p : params) {
    p.set_requires_grad(true);
    p.zero_grad();
  }
  Tape tape;
  {
    Tape::Scope scope(tape);
    Tensor loss = loss_fn();
    tape.backward(loss);
  }
  std::vector<std::vector<real>> analytic;
  analytic.reserve(params.size());
  for (Tensor& p : params) analytic.push_back(p.grad());

  double worst = 0;
  for (std::size_t pi = 0; pi < params.size(); ++pi) {
    Tensor& p = params[pi];
    for (std::size_t i = 0; i < p.numel(); ++i) {
      const real saved = p.value()[i];
      p.value()[i] = saved + real(eps);
      const double fp = double(loss_fn().item());
      p.value()[i] = saved - real(eps);
      const double fm = double(loss_fn().item());
      p.value()[i] = saved;
      const double numeric = (fp - fm) / (2 * eps);
      const double a = double(analytic[pi][i]);
      const double err = std::abs(a - numeric) / std::max({1.0, std::abs(a), std::abs(numeric)});
      worst = std::max(worst, err);
    }
  }
  return worst;
}

} // namespace devid
