#pragma once

#include <cstddef>
#include <cstdint>
#include <string>

namespace ssmlab {

enum class Arch : std::int64_t { kBaseline = 0, kStable = 1 };

std::string arch_name(Arch arch);
Arch parse_arch(const std::string& name);

/// Shape and seed of a model.
///
/// Initialization constants (fixed, not configurable):
///   - projections: uniform(-1/sqrt(fan_in), 1/sqrt(fan_in))
///   - embedding: uniform(-1, 1)
///   - A_log[m, n] = log(n + 1), so a = -(n + 1)
///   - D = 1
///   - dt bias: softplus^-1 of a log-uniform draw in [0.001, 0.1]
///
/// For the stable architecture `d_state` is ignored: each layer takes the
/// state size of its depth phase.
struct ModelConfig {
  std::size_t vocab_size = 16;
  std::size_t d_model = 16;
  std::size_t d_inner = 32;
  std::size_t d_state = 8;
  std::size_t d_conv = 4;
  std::size_t n_layers = 2;
  /// Rank of the delta projection; 0 selects ceil(d_model / 16).
  std::size_t dt_rank = 0;
  /// Stride of the causal strided attention used by stable blocks.
  std::size_t attn_stride = 8;
  std::uint64_t seed = 0;
  Arch arch = Arch::kBaseline;

  std::size_t effective_dt_rank() const;
  /// Throws ssmlab::Error on invalid values.
  void validate() const;

  friend bool operator==(const ModelConfig&, const ModelConfig&) = default;
};

}  // namespace ssmlab
