#pragma once

#include <cstdint>
#include <optional>
#include <span>
#include <string>
#include <utility>
#include <vector>

#include "ssmlab/config.hpp"
#include "ssmlab/graph.hpp"
#include "ssmlab/ssm_core.hpp"
#include "ssmlab/stable_mamba.hpp"

namespace ssmlab {

using TokenId = std::uint32_t;
using Sequence = std::vector<TokenId>;

/// Embedding -> blocks -> LN -> logit head. Exactly one of `layers` /
/// `stable_layers` is populated, according to config.arch.
struct Model {
  ModelConfig config;
  Tensor embedding;  // vocab x d_model
  std::vector<SelectiveSSMParams> layers;
  std::vector<StableBlockParams> stable_layers;
  Tensor head;  // d_model x vocab
};

Model init_model(const ModelConfig& config);

/// Parameters in a fixed order with dotted names ("layers.0.in_proj").
std::vector<std::pair<std::string, Tensor*>> named_parameters(Model& model);
std::vector<std::pair<std::string, const Tensor*>> named_parameters(const Model& model);

/// Recorded activations of one layer.
struct LayerTrace {
  Tensor x;          // pre-scan input, T x d_inner
  Tensor delta;      // T x d_inner
  Tensor B;          // T x d_state
  Tensor C;          // T x d_state
  Tensor h;          // T x d_inner x d_state
  Tensor y_scan;     // scan output before gating, T x d_inner
  Tensor scan_out;   // T x d_inner
  Tensor mixer_out;  // T x d_model
};

struct ActivationTrace {
  std::size_t length = 0;
  std::vector<LayerTrace> layers;
};

struct ForwardOutput {
  Tensor logits;  // T x vocab
  std::optional<ActivationTrace> trace;
};

/// Graph of one forward pass.
struct ForwardVars {
  Var logits;
  std::vector<BlockVars> blocks;
};

/// Throws ssmlab::Error naming the first position whose token is out of vocabulary.
void check_tokens(const ModelConfig& config, std::span<const TokenId> tokens);

ForwardVars build_forward(ModelGraph& g, const Model& model, std::span<const TokenId> tokens,
                          const ActivationHook& hook = {});

ForwardOutput forward_model(const Model& model, std::span<const TokenId> tokens, bool trace,
                            const ActivationHook& hook = {});

/// Mean next-token negative log-likelihood over positions j >= 1 with
/// score_mask[j] != 0 (token j predicted from tokens < j).
Var sequence_nll(ModelGraph& g, const Model& model, std::span<const TokenId> tokens,
                 std::span<const std::uint8_t> score_mask, const ActivationHook& hook = {});

ActivationTrace extract_trace(const ModelGraph& g, const ForwardVars& vars, std::size_t length);

/// Activations recorded at `site` (scan_out or mixer_out).
const Tensor& site_activations(const LayerTrace& trace, HookSite site);
std::size_t site_width(const ModelConfig& config, HookSite site);
const char* site_name(HookSite site);
HookSite parse_site(const std::string& name);

/// A token sequence and the target positions it is scored on.
struct Example {
  Sequence tokens;
  /// score_mask[j] != 0 scores token j (predicted from tokens < j). Empty
  /// means every position j >= 1.
  std::vector<std::uint8_t> score_mask;
};

/// Score mask of an example with the empty-mask default expanded.
std::vector<std::uint8_t> effective_mask(const Example& example);

struct Accuracy {
  std::size_t correct = 0;
  std::size_t total = 0;
  double value() const { return total == 0 ? 0.0 : static_cast<double>(correct) / static_cast<double>(total); }
};

/// Top-1 next-token accuracy over scored positions; ties in the logits go to
/// the lowest token id.
Accuracy top1_accuracy(const Model& model, std::span<const Example> examples,
                       const ActivationHook& hook = {});

}  // namespace ssmlab
