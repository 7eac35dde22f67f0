#pragma once

#include <cstddef>
#include <cstdint>
#include <functional>
#include <optional>
#include <span>
#include <string>
#include <string_view>
#include <vector>

#include "skillformer/rng.hpp"
#include "skillformer/tensor.hpp"

namespace skillformer {

class Tape;

/// Handle to a value recorded on a Tape. Cheap to copy; only valid while the
/// owning tape is alive.
class Var {
 public:
  Var() = default;

  [[nodiscard]] const Tensor& value() const;
  [[nodiscard]] const Shape& shape() const { return value().shape(); }
  [[nodiscard]] std::size_t dim(std::size_t axis) const { return value().dim(axis); }
  [[nodiscard]] std::size_t rank() const { return value().rank(); }
  [[nodiscard]] bool needs_grad() const;
  [[nodiscard]] Tape& tape() const { return *tape_; }
  [[nodiscard]] std::size_t id() const noexcept { return id_; }
  [[nodiscard]] bool valid() const noexcept { return tape_ != nullptr; }

 private:
  friend class Tape;
  Var(Tape* tape, std::size_t id) : tape_(tape), id_(id) {}

  Tape* tape_ = nullptr;
  std::size_t id_ = 0;
};

/// Ordered record of executed ops. `backward` replays adjoints in exact
/// reverse order; gradients of watched parameters accumulate into
/// `Tensor::grad()`.
///
/// Single-threaded by contract. Use one tape per replica when running
/// replicas on separate threads.
class Tape {
 public:
  /// Propagates the output adjoint to the inputs. Receives the tape, the
  /// node's own id (so it can read its output) and the output adjoint.
  using BackwardFn = std::function<void(Tape&, std::size_t, std::span<const double>)>;

  Tape() = default;
  Tape(const Tape&) = delete;
  Tape& operator=(const Tape&) = delete;

  /// Leaf that never receives a gradient.
  Var constant(Tensor value);
  /// Leaf referring to an external tensor. Its gradient lands in
  /// `param.grad()` on backward if `param.requires_grad()`. The tensor must
  /// outlive the tape and must not be modified while the tape is in use.
  Var watch(const Tensor& param);
  /// Leaf owned by the tape whose adjoint is kept on the tape.
  Var input(Tensor value, bool requires_grad);

  /// Appends an op node. It needs a gradient iff any of `inputs` does; when
  /// it does not, `backward` is dropped.
  Var record(Tensor value, std::initializer_list<Var> inputs, const char* op, BackwardFn backward);
  Var record(Tensor value, std::span<const Var> inputs, const char* op, BackwardFn backward);

  /// Reverse sweep from a single-element loss. Throws ContractError for a
  /// non-scalar loss or a loss from another tape.
  void backward(Var loss);

  [[nodiscard]] const Tensor& value(std::size_t id) const;
  [[nodiscard]] bool needs_grad(std::size_t id) const { return nodes_[id].needs_grad; }
  /// Adjoint buffer for node `id`, zero-allocated on first use.
  std::vector<double>& adjoint(std::size_t id);
  /// Adjoint of a leaf after backward; zeros if nothing flowed into it.
  /// Intermediate adjoints are released during the sweep.
  [[nodiscard]] std::vector<double> gradient(Var v) const;

  [[nodiscard]] std::size_t size() const noexcept { return nodes_.size(); }
  [[nodiscard]] std::string_view op_name(std::size_t id) const { return nodes_[id].op; }
  [[nodiscard]] const std::string& scope_name(std::size_t id) const { return scopes_[nodes_[id].scope]; }

  struct NonFinite {
    std::size_t node;
    std::string op;
    std::string scope;
  };
  /// First node in execution order holding a NaN or infinity.
  [[nodiscard]] std::optional<NonFinite> first_non_finite() const;

  /// RAII label attached to every node recorded while it is alive. Used in
  /// diagnostics only.
  class Scope {
   public:
    Scope(Tape& tape, std::string_view name);
    ~Scope();
    Scope(const Scope&) = delete;
    Scope& operator=(const Scope&) = delete;

   private:
    Tape& tape_;
    std::uint32_t previous_;
  };

 private:
  struct Node {
    Tensor owned;
    const Tensor* external = nullptr;
    Tensor* grad_sink = nullptr;
    std::vector<double> adjoint;
    BackwardFn backward;
    const char* op = "";
    std::uint32_t scope = 0;
    bool needs_grad = false;
  };

  Var push(Node node);

  std::vector<Node> nodes_;
  std::vector<std::string> scopes_{""};
  std::uint32_t current_scope_ = 0;
};

// ---------------------------------------------------------------------------
// Differentiable ops. All operands must come from the same tape.
// ---------------------------------------------------------------------------

/// Elementwise a + b. `b` broadcasts to `a` numpy-style (right aligned,
/// extents equal or 1); the result has `a`'s shape.
Var add(Var a, Var b);
Var sub(Var a, Var b);
Var mul(Var a, Var b);
Var scale(Var a, double factor);

/// [m,k] x [k,n] -> [m,n]
Var matmul(Var a, Var b);
/// x[..., in] * W[out, in]^T + bias[out]
Var linear(Var x, Var weight, std::optional<Var> bias = std::nullopt);
/// Batched [G,m,k] x [G,k,n] -> [G,m,n]; with `transpose_b`, b is [G,n,k].
Var bmm(Var a, Var b, bool transpose_b = false);

/// Softmax over the last axis with max subtraction. Non-finite input is a
/// NumericError.
Var softmax(Var x);
/// Per-row normalization over the last axis: (x - mean) / sqrt(var + eps)
/// then * gamma + beta. Population variance.
Var layer_norm(Var x, Var gamma, Var beta, double eps);
/// (x - mean) / (std + eps) over the last axis with population std.
Var standardize(Var x, double eps);
/// Exact GELU: x * Phi(x).
Var gelu(Var x);
Var sigmoid(Var x);

/// Mean over one axis, which is removed from the shape.
Var mean(Var x, std::size_t axis);
/// Sum of every element, as a rank-0 tensor.
Var sum(Var x);

Var reshape(Var x, Shape shape);
/// Output axis i is input axis `axes[i]`.
Var permute(Var x, const std::vector<std::size_t>& axes);
Var concat(std::span<const Var> parts, std::size_t axis);
Var slice(Var x, std::size_t axis, std::size_t start, std::size_t length);

/// Inverted dropout: kept values are scaled by 1/(1-p). Identity when
/// `training` is false or p == 0.
Var dropout(Var x, double p, SplitMix64* rng, bool training);

/// Mean over rows of -log softmax(logits)[label], logits [B, C].
/// Labels outside [0, C) are a DataError.
Var cross_entropy(Var logits, std::span<const int> labels);

}  // namespace skillformer
