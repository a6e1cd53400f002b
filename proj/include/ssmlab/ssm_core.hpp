#pragma once

// Selective state-space block (Mamba-style mixer).
//
//   u      = LN(resid)
//   x, z   = split(u W_in)
//   x      = silu(causal_conv(x))
//   dt, B, C = split(x W_x)
//   delta  = softplus(dt W_dt + b_dt)
//   y      = scan(x, delta, a = -exp(A_log), B, C, D)
//   out    = resid + (y * silu(z)) W_out

#include <cstddef>

#include "ssmlab/config.hpp"
#include "ssmlab/graph.hpp"
#include "ssmlab/rng.hpp"

namespace ssmlab {

struct SelectiveSSMParams {
  Tensor in_proj;   // d_model x 2*d_inner
  Tensor conv_w;    // d_inner x d_conv
  Tensor conv_b;    // d_inner
  Tensor x_proj;    // d_inner x (dt_rank + 2*d_state)
  Tensor dt_w;      // dt_rank x d_inner
  Tensor dt_b;      // d_inner
  Tensor A_log;     // d_inner x d_state; a = -exp(A_log) < 0
  Tensor D;         // d_inner
  Tensor out_proj;  // d_inner x d_model
};

SelectiveSSMParams init_selective_params(const ModelConfig& config, Rng& rng);

/// Inverse of softplus, used to place the delta bias.
double inverse_softplus(double y);

struct Discretized {
  Tensor a_bar;  // T x D x N
  Tensor b_bar;  // T x D x N
};

/// A_bar = exp(delta * a), B_bar = delta * B (Euler rule for B).
/// `delta` must already be positive (post-softplus).
Discretized discretize(const Tensor& delta, const Tensor& A_log, const Tensor& B);

/// Input-dependent scan parameters computed from the pre-scan input x (T x d_inner).
struct SelectiveInputs {
  Tensor delta;  // T x d_inner
  Tensor B;      // T x d_state
  Tensor C;      // T x d_state
};

SelectiveInputs selective_inputs(const SelectiveSSMParams& params, const Tensor& x);

struct ScanOutput {
  Tensor y;  // T x d_inner
  Tensor h;  // T x d_inner x d_state
};

/// Recurrent scan h_t = A_bar_t h_{t-1} + B_bar_t x_t, y_t = C_t h_t + D x_t, h_{-1} = 0.
ScanOutput ssm_scan(const SelectiveSSMParams& params, const Tensor& x);
ScanOutput scan_recurrence(const Tensor& x, const Tensor& delta, const Tensor& A_log,
                           const Tensor& B, const Tensor& C, const Tensor& D);

/// Reference semantics for the scan: explicit double loop over (t, s) with the
/// product of transitions between them. O(T^2); refuses T > 64.
Tensor ssm_bruteforce(const SelectiveSSMParams& params, const Tensor& x);
Tensor bruteforce_recurrence(const Tensor& x, const Tensor& delta, const Tensor& A_log,
                             const Tensor& B, const Tensor& C, const Tensor& D);

inline constexpr std::size_t kBruteforceMaxLength = 64;

/// Graph handles for one block, in forward order.
struct BlockVars {
  Var x;          // pre-scan input (post conv + silu), T x d_inner
  Var delta;      // T x d_inner
  Var B;          // T x d_state
  Var C;          // T x d_state
  Var scan;       // selective_scan node; saved()[0] holds h
  Var y_scan;     // scan output before gating, T x d_inner
  Var scan_out;   // hook site kScanOutput
  Var mixer_out;  // hook site kMixerOutput
  Var output;     // resid + mixer_out
};

struct SelectiveInputVars {
  Var delta;
  Var B;
  Var C;
};

SelectiveInputVars selective_input_vars(ModelGraph& g, const SelectiveSSMParams& p, Var x);

BlockVars selective_block(ModelGraph& g, const SelectiveSSMParams& p, Var resid,
                          std::size_t layer, const ActivationHook& hook);

}  // namespace ssmlab
