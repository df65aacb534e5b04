#pragma once

#include <functional>
#include <initializer_list>
#include <memory>
#include <span>
#include <string>
#include <vector>

#include "devid/common.hpp"
#include "devid/errors.hpp"

namespace devid {

struct TensorImpl {
  std::vector<int> shape;
  std::vector<real> value;
  std::vector<real> grad; // empty until backward touches this tensor
  bool requires_grad = false;
  bool leaf = true;
};

// Dense row-major tensor handle. Copying a Tensor copies the handle, not
// the storage; ops always allocate fresh outputs.
class Tensor {
 public:
  Tensor() = default;
  explicit Tensor(std::vector<int> shape, real fill = real(0));
  Tensor(std::vector<int> shape, std::vector<real> data);

  static Tensor scalar(real v) { return Tensor({1}, {v}); }

  bool defined() const { return impl_ != nullptr; }
  const std::vector<int>& shape() const { return impl_->shape; }
  int rank() const { return int(impl_->shape.size()); }
  int dim(int i) const { return impl_->shape[std::size_t(i)]; }
  std::size_t numel() const { return impl_->value.size(); }

  std::vector<real>& value() { return impl_->value; }
  const std::vector<real>& value() const { return impl_->value; }
  real item() const;

  bool requires_grad() const { return impl_->requires_grad; }
  Tensor& set_requires_grad(bool b);

  // Allocates a zeroed gradient array on first use.
  std::vector<real>& grad();
  bool has_grad() const { return !impl_->grad.empty(); }
  void zero_grad();

  Tensor clone() const; // deep copy of value (grad not copied)

  std::shared_ptr<TensorImpl> impl() const { return impl_; }
  explicit Tensor(std::shared_ptr<TensorImpl> impl) : impl_(std::move(impl)) {}

 private:
  std::shared_ptr<TensorImpl> impl_;
};

enum class BackwardStatus { ok, detached };

// Reverse-mode tape. Ops executed while a tape is bound (and touching at
// least one grad-requiring tensor) append a node; backward() replays the
// nodes in exact reverse order, accumulating additively on fan-out.
class Tape {
 public:
  Tape() = default;
  Tape(const Tape&) = delete;
  Tape& operator=(const Tape&) = delete;

  static Tape* current();

  void record(std::function<void()> back, std::shared_ptr<TensorImpl> out);

  // Seeds d(loss)/d(loss) = seed and fills grads of every reachable
  // requires_grad leaf. Non-leaf grads are released afterwards.
  BackwardStatus backward(const Tensor& loss, real seed = real(1));

  void clear() { nodes_.clear(); }
  std::size_t size() const { return nodes_.size(); }

  // RAII binder; tapes are thread-local execution contexts.
  class Scope {
   public:
    explicit Scope(Tape& t);
    ~Scope();
    Scope(const Scope&) = delete;
    Scope& operator=(const Scope&) = delete;

   private:
    Tape* prev_;
  };

 private:
  struct Node {
    std::function<void()> back;
    std::shared_ptr<TensorImpl> out;
  };
  std::vector<Node> nodes_;
};

// ---- primitives ------------------------------------------------------
// Shapes are validated; mismatches throw ShapeError.

Tensor add(const Tensor& a, const Tensor& b); // same shape
Tensor sub(const Tensor& a, const Tensor& b);
Tensor add_scalar(const Tensor& a, real s);
Tensor add_bias(const Tensor& x, const Tensor& b); // b broadcast over last axis
Tensor hadamard(const Tensor& a, const Tensor& b);
Tensor scalar_mul(const Tensor& a, real s);
Tensor matmul(const Tensor& a, const Tensor& b); // (m,k)x(k,n)
Tensor matvec(const Tensor& w, const Tensor& x); // (m,n)x(n) -> (m)

// x (L, Cin), w (F, K, Cin); output (floor((L-K)/stride)+1, F).
Tensor conv1d_valid(const Tensor& x, const Tensor& w, int stride);
// Zero-padded stride-1 convolution preserving L; K must be odd.
Tensor conv1d_same(const Tensor& x, const Tensor& w);

Tensor sigmoid(const Tensor& a);
Tensor tanh(const Tensor& a);
Tensor relu(const Tensor& a);
Tensor exp(const Tensor& a);
Tensor log(const Tensor& a); // nonpositive input -> DomainError

Tensor sum(const Tensor& a);  // scalar
Tensor mean(const Tensor& a); // scalar
Tensor max(const Tensor& a);  // scalar; subgradient to first argmax

Tensor concat(const std::vector<Tensor>& parts, int axis); // rank 1 or 2
Tensor slice(const Tensor& a, int axis, int start, int len);
Tensor reshape(const Tensor& a, std::vector<int> shape);
Tensor transpose(const Tensor& a); // 2-D

Tensor softmax(const Tensor& logits);    // 1-D, max-subtracted
Tensor row_softmax(const Tensor& x);     // 2-D, softmax per row
Tensor cross_entropy(const Tensor& probs, int target); // -log probs[target]

// Normalizes all elements of x jointly (the layer), then applies gain/bias
// elementwise. gain/bias must match x's element count.
Tensor layer_norm(const Tensor& x, const Tensor& gain, const Tensor& bias,
                  real eps = real(1e-6));

struct BnBatchStats {
  std::vector<real> mean;
  std::vector<real> var;
};

// Per-channel normalization over every axis except the last. In training
// mode batch statistics are used and, when running stats are supplied,
// folded into them by EMA; `observed` exposes the batch stats so callers
// may defer that update. Inference mode uses the running stats.
Tensor batch_norm(const Tensor& x, const Tensor& scale, const Tensor& shift,
                  std::vector<real>* running_mean, std::vector<real>* running_var,
                  real momentum, real eps, bool training,
                  BnBatchStats* observed = nullptr);

// ---- verification ----------------------------------------------------

// Central-difference check of backward() for a scalar-valued f at `point`.
// Returns max over coordinates of |a - n| / max(1, |a|, |n|).
double finite_diff_check(const std::function<Tensor(const Tensor&)>& f,
                         const Tensor& point, double eps);

// Same check against an explicit parameter list; loss_fn must rebuild the
// graph from the parameters' current values on every call.
double finite_diff_check_params(const std::function<Tensor()>& loss_fn,
                                std::span<Tensor> params, double eps);

} // namespace devid
