#pragma once

// Multi-timescale stable block.
//
//   u        = LN(resid);  x, z = split(u W_in);  x = silu(conv(x))
//   g        = sum_i alpha_i sigmoid(W_i LN(x))                 (ensemble gate)
//   h^(k)    = A_bar_k h^(k)_{t-1} + B_bar_k (g * x_t)           (one scan per timescale)
//   y        = sum_k w_k (C_k h^(k) + D_k x)                     (ensemble output)
//   y        = a * StridedAttn(y) + (1 - a) * y                  (bottleneck phase only)
//   m        = (y * silu(z)) W_out
//   c        = 0.5 + 0.5 sigmoid(MLP(running_mean(resid)))      (gradient scaled by lambda_comp)
//   out      = (m + lambda_res resid) * lambda_global * c

#include <cstddef>
#include <optional>
#include <vector>

#include "ssmlab/config.hpp"
#include "ssmlab/graph.hpp"
#include "ssmlab/rng.hpp"
#include "ssmlab/ssm_core.hpp"

namespace ssmlab {

enum class Timescale { kShort = 0, kMedium = 1, kLong = 2 };

const char* timescale_name(Timescale k);
/// Offset added to the delta pre-activation: +2 short, 0 medium, -2 long.
double timescale_offset(Timescale k);

struct PhaseConfig {
  std::size_t phase = 1;  // 1 feature extraction, 2 bottleneck, 3 output
  std::size_t begin = 0;  // layer range [begin, end)
  std::size_t end = 0;
  std::size_t n_gates = 3;
  std::size_t d_state = 16;
  bool sparse_attention = false;
  std::vector<Timescale> timescales;

  friend bool operator==(const PhaseConfig&, const PhaseConfig&) = default;
};

/// Depth split 75% / 12.5% / 12.5% (each at least one layer) with
/// (n_gates, d_state) = (3, 16) / (5, 32) / (2, 8).
PhaseConfig phase_config(std::size_t layer, std::size_t n_layers);
std::vector<PhaseConfig> phase_layout(std::size_t n_layers);

struct TimescaleParams {
  Timescale scale = Timescale::kShort;
  Tensor A_log;   // d_inner x N
  Tensor B_proj;  // d_inner x N
  Tensor C_proj;  // d_inner x N
  Tensor D;       // d_inner
};

struct StableBlockParams {
  PhaseConfig phase;
  Tensor in_proj;  // d_model x 2*d_inner
  Tensor conv_w;
  Tensor conv_b;
  Tensor dt_proj_in;  // d_inner x dt_rank
  Tensor dt_w;        // dt_rank x d_inner
  Tensor dt_b;        // d_inner
  std::vector<TimescaleParams> branches;
  Tensor timescale_logits;     // one per branch
  std::vector<Tensor> gate_w;  // n_gates of d_inner x d_inner
  Tensor gate_logits;          // n_gates
  Tensor attn_q;               // d_inner x d_attn (sparse phase only)
  Tensor attn_k;
  Tensor ctx_logit;  // scalar; mixing weight = sigmoid(ctx_logit)
  Tensor comp_w1;    // d_model x d_model/4
  Tensor comp_b1;
  Tensor comp_w2;  // d_model/4 x 1
  Tensor comp_b2;  // 1
  Tensor lambda_res;
  Tensor lambda_global;
  /// Backward-only multiplier on the compression path; never trained.
  Tensor lambda_comp;
  Tensor out_proj;
};

StableBlockParams init_stable_params(const ModelConfig& config, std::size_t layer, Rng& rng);

/// Per-timescale scan results.
struct TimescaleState {
  Timescale scale;
  Var delta;
  Var B;
  Var C;
  Var scan;  // y = C h (no skip term); saved()[0] = h
};

/// One scan of the gated input per timescale of `p`.
std::vector<TimescaleState> multiscale_scan(ModelGraph& g, const StableBlockParams& p, Var x,
                                            Var gate);

/// Softmax weights over the block's timescales.
Var timescale_weights(ModelGraph& g, const StableBlockParams& p);

/// sum_k w_k (C_k h^(k) + D_k x).
Var ensemble_output(ModelGraph& g, const StableBlockParams& p,
                    const std::vector<TimescaleState>& states, Var x);

/// a * StridedAttn(h_local) + (1 - a) * h_local with a = sigmoid(ctx_logit).
Var sparse_global_context(ModelGraph& g, const StableBlockParams& p, Var h_local,
                          std::size_t stride);

/// sum_i alpha_i sigmoid(W_i LN(x)), alpha = softmax(gate_logits).
Var ensemble_gate(ModelGraph& g, const StableBlockParams& p, Var x);

/// 0.5 + 0.5 sigmoid(MLP(pooled)); pooled is R x d_model, result R x 1.
Var adaptive_compression(ModelGraph& g, const StableBlockParams& p, Var pooled);

/// (y + lambda_res x) * lambda_global [* c], with c's gradient scaled by lambda_comp.
Var scaled_residual(ModelGraph& g, const StableBlockParams& p, Var y, Var x,
                    std::optional<Var> compression);

BlockVars stable_block(ModelGraph& g, const StableBlockParams& p, Var resid, std::size_t layer,
                       std::size_t attn_stride, const ActivationHook& hook);

}  // namespace ssmlab
