#pragma once

// Implicit attention of the selective scan. Unrolling the recurrence gives,
// per channel m,
//
//   y_t[m] = sum_{s<=t} alpha[m, t, s] x_s[m] + D_m x_t[m]
//   alpha[m, t, s] = sum_n C_t[n] H_{t,s}[m, n] delta_s[m] B_s[n]
//   H_{t,s}[m, n]  = exp(a_{m,n} * sum_{k=s+1..t} delta_k[m])   (H_{t,t} = 1)

#include <cstddef>
#include <span>
#include <vector>

#include "ssmlab/model.hpp"

namespace ssmlab {

/// Which per-head matrices enter the head average.
enum class HeadVariant {
  kRaw,   // alpha as is
  kAbs,   // elementwise |alpha|
  kBoth,  // (raw + abs) / 2
};

struct AttentionOptions {
  /// Channels per head; 0 means a single head spanning all channels.
  std::size_t head_size = 0;
  HeadVariant variant = HeadVariant::kBoth;
};

struct AttentionMap {
  std::size_t layer = 0;
  Tensor alpha;     // d_inner x T x T, zero above the diagonal
  Tensor averaged;  // T x T
};

struct SubspaceVector {
  Tensor w;       // length T, row means of the averaged map
  Tensor w_norm;  // min-max rescaled to [0, 1]
  Tensor v;       // sum_t w_norm[t] h[t]
};

/// History term H_{t,s}[m, n]; requires s <= t.
double history_term(const Tensor& delta, const Tensor& A_log, std::size_t m, std::size_t n,
                    std::size_t t, std::size_t s);

/// Per-channel implicit attention for one layer of a trace.
AttentionMap ssm_attention(const Tensor& A_log, const LayerTrace& trace, std::size_t layer,
                           const AttentionOptions& options = {});
AttentionMap ssm_attention(const Model& model, const ActivationTrace& trace, std::size_t layer,
                           const AttentionOptions& options = {});

/// Mean of alpha over each group of `head_size` consecutive channels.
std::vector<Tensor> channel_group_heads(const Tensor& alpha, std::size_t head_size);

/// Mean over heads; with both variants supplied, 1/(2H) * sum_h (a_h + b_h).
Tensor average_heads(std::span<const Tensor> variant_a, std::span<const Tensor> variant_b = {});

struct Importance {
  Tensor w;
  Tensor w_norm;
};

/// w = row means of A; w_norm = (w - min)/(max - min), all ones when max == min.
Importance importance_vector(const Tensor& A);

/// sum_t w_norm[t] * h[t] for h of shape T x d.
Tensor activation_subspace(const Tensor& w_norm, const Tensor& h);

SubspaceVector compute_subspace(const AttentionMap& map, const Tensor& h);

/// sum_{s<=t} of alpha summed over channels (output-magnitude proxy at t).
double magnitude_ratio(const AttentionMap& map, std::size_t t);

/// sum_s alpha[m, t, s] x_s[m] + D_m x_t[m]; equals the layer's scan output.
Tensor reconstruct_from_attention(const AttentionMap& map, const Tensor& x, const Tensor& D);

}  // namespace ssmlab
