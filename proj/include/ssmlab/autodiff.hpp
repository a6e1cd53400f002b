#pragma once

// Reverse-mode differentiation over whole tensors.
//
// A Tape records primitive ops in execution order; every node keeps its
// forward value plus whatever intermediates its backward rule needs. Vars are
// cheap handles (tape pointer + node index). Broadcasting is limited to
// leading batch dimensions: for binary elementwise ops one operand's shape
// must equal the other's or be a suffix of it.

#include <cstddef>
#include <cstdint>
#include <functional>
#include <initializer_list>
#include <map>
#include <span>
#include <string_view>
#include <vector>

#include "ssmlab/tensor.hpp"

namespace ssmlab {

enum class Op : std::uint8_t {
  kLeaf,
  kConstant,
  kMatmul,
  kAdd,
  kSub,
  kMul,
  kScale,
  kAddScalar,
  kNeg,
  kExp,
  kLog,
  kSoftplus,
  kSigmoid,
  kSilu,
  kRelu,
  kSoftmax,
  kLogSoftmax,
  kSum,
  kMean,
  kMeanRows,
  kCumMeanRows,
  kTranspose,
  kSliceCols,
  kReshape,
  kGatherRows,
  kCausalConv,
  kLayerNorm,
  kSelectiveScan,
  kStridedSoftmax,
  kGradScale,
  kMaskedNll,
};

std::string_view op_name(Op op);

/// Non-tensor arguments of a primitive. Unused fields are ignored.
struct OpAttrs {
  double scalar = 0.0;
  std::size_t begin = 0;
  std::size_t end = 0;
  Shape shape;
  std::vector<std::size_t> indices;
  std::vector<double> weights;
};

class Tape;

class Var {
 public:
  Var() = default;
  Var(Tape* tape, std::size_t id) : tape_(tape), id_(id) {}

  Tape& tape() const { return *tape_; }
  std::size_t id() const { return id_; }
  bool valid() const { return tape_ != nullptr; }
  const Tensor& value() const;
  const Shape& shape() const { return value().shape(); }

 private:
  Tape* tape_ = nullptr;
  std::size_t id_ = 0;
};

class Tape {
 public:
  Tape() = default;
  Tape(const Tape&) = delete;
  Tape& operator=(const Tape&) = delete;

  /// Differentiable input.
  Var leaf(Tensor value);
  /// Non-differentiable input.
  Var constant(Tensor value);

  /// Evaluates `op` and appends it to the tape. While recording is disabled
  /// the result is stored as a constant (no backward information kept).
  Var apply(Op op, std::initializer_list<Var> inputs, OpAttrs attrs = {});

  const Tensor& value(std::size_t id) const { return nodes_.at(id).value; }
  const Tensor& value(Var v) const { return value(v.id()); }
  /// Intermediates saved by the node's forward pass (e.g. scan hidden states).
  const std::vector<Tensor>& saved(Var v) const { return nodes_.at(v.id()).saved; }

  Op op(std::size_t id) const { return nodes_.at(id).op; }
  const std::vector<std::size_t>& parents(std::size_t id) const { return nodes_.at(id).parents; }
  bool is_leaf(std::size_t id) const { return id < nodes_.size() && nodes_[id].op == Op::kLeaf; }
  std::size_t size() const { return nodes_.size(); }

  void set_recording(bool on) { recording_ = on; }
  bool recording() const { return recording_; }

  /// Re-executes every node in order, optionally substituting leaf values.
  /// Returns the value of every node.
  std::vector<Tensor> replay(const std::map<std::size_t, Tensor>& leaf_values = {}) const;

 private:
  struct Node {
    Op op = Op::kConstant;
    std::vector<std::size_t> parents;
    OpAttrs attrs;
    Tensor value;
    std::vector<Tensor> saved;
  };

  friend std::map<std::size_t, Tensor> gradient(const Tape&, Var, std::span<const Var>);

  std::vector<Node> nodes_;
  bool recording_ = true;
};

using Gradients = std::map<std::size_t, Tensor>;

/// d(output)/d(param) for each param; output must hold a single element and
/// params must be leaves of `tape`. Params the output does not depend on get a
/// zero tensor.
Gradients gradient(const Tape& tape, Var output, std::span<const Var> params);

// --- primitives -------------------------------------------------------------

Var matmul(Var a, Var b);
Var operator+(Var a, Var b);
Var operator-(Var a, Var b);
Var operator*(Var a, Var b);
Var operator-(Var a);
Var scale(Var a, double factor);
Var add_scalar(Var a, double c);
Var exp(Var a);
Var log(Var a);
Var softplus(Var a);
Var sigmoid(Var a);
Var silu(Var a);
Var relu(Var a);
/// Softmax / log-softmax over the last axis.
Var softmax(Var a);
Var log_softmax(Var a);
Var sum(Var a);
Var mean(Var a);
/// Mean over axis 0 of a rank-2 tensor -> vector.
Var mean_rows(Var a);
/// Row t of the result is the mean of rows 0..t.
Var cummean_rows(Var a);
Var transpose(Var a);
/// Columns [begin, end) of the last axis (rank 1 or 2).
Var slice_cols(Var a, std::size_t begin, std::size_t end);
Var reshape(Var a, Shape shape);
/// Rows of `table` selected by `ids` (embedding lookup).
Var gather_rows(Var table, std::vector<std::size_t> ids);
/// Depthwise causal convolution: x (T x C), w (C x K), b (C).
Var causal_conv(Var x, Var w, Var b);
/// Normalizes the last axis to zero mean / unit variance (no affine terms).
Var layer_norm(Var x, double eps = 1e-5);
/// Selective scan h_t = exp(delta_t * A) h_{t-1} + delta_t B_t x_t,
/// y_t = C_t . h_t + D x_t with h_{-1} = 0. x, delta: T x D; A: D x N (negative);
/// B, C: T x N; D: D. Saved: [h (T x D x N), A_bar (T x D x N)].
Var selective_scan(Var x, Var delta, Var A, Var B, Var C, Var D);
/// Row-softmax over positions s <= t with s == t or s % stride == 0; other
/// entries are exactly zero.
Var strided_softmax(Var scores, std::size_t stride);
/// Identity forward; backward multiplies the incoming gradient by `factor`.
Var grad_scale(Var a, double factor);
/// -sum_t mask_t * logp[t, target_t] / sum_t mask_t.
Var masked_nll(Var log_probs, std::vector<std::size_t> targets, std::vector<double> mask);

/// Forward kernel of the selective scan, shared with the model code.
struct ScanKernelResult {
  Tensor y;
  Tensor h;
  Tensor a_bar;
};
ScanKernelResult selective_scan_kernel(const Tensor& x, const Tensor& delta, const Tensor& A,
                                       const Tensor& B, const Tensor& C, const Tensor& D);

// --- gradient checking --------------------------------------------------------

/// Builds a scalar-valued graph from leaves holding `params`.
using ScalarGraph = std::function<Var(Tape&, std::span<const Var>)>;

/// Central-difference gradient of `f` with respect to every parameter entry.
std::vector<Tensor> central_difference(const ScalarGraph& f, const std::vector<Tensor>& params,
                                       double eps);

/// max over parameter entries of |analytic - central| / (|analytic| + 1e-12).
double finite_diff_check(const ScalarGraph& f, const std::vector<Tensor>& params, double eps);

}  // namespace ssmlab
