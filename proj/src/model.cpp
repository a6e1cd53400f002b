#include "ssmlab/model.hpp"

#include <algorithm>
#include <cmath>

namespace ssmlab {

Model init_model(const ModelConfig& config) {
  config.validate();
  Rng rng(config.seed);
  Model m;
  m.config = config;
  m.embedding = rng.uniform_tensor(Shape{config.vocab_size, config.d_model}, -1.0, 1.0);
  for (std::size_t l = 0; l < config.n_layers; ++l) {
    if (config.arch == Arch::kStable) {
      m.stable_layers.push_back(init_stable_params(config, l, rng));
    } else {
      m.layers.push_back(init_selective_params(config, rng));
    }
  }
  const double s = 1.0 / std::sqrt(static_cast<double>(config.d_model));
  m.head = rng.uniform_tensor(Shape{config.d_model, config.vocab_size}, -s, s);
  return m;
}

namespace {

template <typename ModelT, typename Out>
void collect(ModelT& m, Out& out) {
  out.emplace_back("embedding", &m.embedding);
  for (std::size_t l = 0; l < m.layers.size(); ++l) {
    auto& p = m.layers[l];
    const std::string pre = "layers." + std::to_string(l) + ".";
    out.emplace_back(pre + "in_proj", &p.in_proj);
    out.emplace_back(pre + "conv_w", &p.conv_w);
    out.emplace_back(pre + "conv_b", &p.conv_b);
    out.emplace_back(pre + "x_proj", &p.x_proj);
    out.emplace_back(pre + "dt_w", &p.dt_w);
    out.emplace_back(pre + "dt_b", &p.dt_b);
    out.emplace_back(pre + "A_log", &p.A_log);
    out.emplace_back(pre + "D", &p.D);
    out.emplace_back(pre + "out_proj", &p.out_proj);
  }
  for (std::size_t l = 0; l < m.stable_layers.size(); ++l) {
    auto& p = m.stable_layers[l];
    const std::string pre = "stable." + std::to_string(l) + ".";
    out.emplace_back(pre + "in_proj", &p.in_proj);
    out.emplace_back(pre + "conv_w", &p.conv_w);
    out.emplace_back(pre + "conv_b", &p.conv_b);
    out.emplace_back(pre + "dt_proj_in", &p.dt_proj_in);
    out.emplace_back(pre + "dt_w", &p.dt_w);
    out.emplace_back(pre + "dt_b", &p.dt_b);
    for (auto& br : p.branches) {
      const std::string bp = pre + timescale_name(br.scale) + ".";
      out.emplace_back(bp + "A_log", &br.A_log);
      out.emplace_back(bp + "B_proj", &br.B_proj);
      out.emplace_back(bp + "C_proj", &br.C_proj);
      out.emplace_back(bp + "D", &br.D);
    }
    out.emplace_back(pre + "timescale_logits", &p.timescale_logits);
    for (std::size_t i = 0; i < p.gate_w.size(); ++i) {
      out.emplace_back(pre + "gate_w." + std::to_string(i), &p.gate_w[i]);
    }
    out.emplace_back(pre + "gate_logits", &p.gate_logits);
    if (p.phase.sparse_attention) {
      out.emplace_back(pre + "attn_q", &p.attn_q);
      out.emplace_back(pre + "attn_k", &p.attn_k);
      out.emplace_back(pre + "ctx_logit", &p.ctx_logit);
    }
    out.emplace_back(pre + "comp_w1", &p.comp_w1);
    out.emplace_back(pre + "comp_b1", &p.comp_b1);
    out.emplace_back(pre + "comp_w2", &p.comp_w2);
    out.emplace_back(pre + "comp_b2", &p.comp_b2);
    out.emplace_back(pre + "lambda_res", &p.lambda_res);
    out.emplace_back(pre + "lambda_global", &p.lambda_global);
    out.emplace_back(pre + "lambda_comp", &p.lambda_comp);
    out.emplace_back(pre + "out_proj", &p.out_proj);
  }
  out.emplace_back("head", &m.head);
}

}  // namespace

std::vector<std::pair<std::string, Tensor*>> named_parameters(Model& model) {
  std::vector<std::pair<std::string, Tensor*>> out;
  collect(model, out);
  return out;
}

std::vector<std::pair<std::string, const Tensor*>> named_parameters(const Model& model) {
  std::vector<std::pair<std::string, const Tensor*>> out;
  collect(model, out);
  return out;
}

void check_tokens(const ModelConfig& config, std::span<const TokenId> tokens) {
  if (tokens.empty()) throw Error("forward: empty token sequence");
  for (std::size_t t = 0; t < tokens.size(); ++t) {
    if (tokens[t] >= config.vocab_size) {
      throw Error("forward: token " + std::to_string(tokens[t]) + " at position " +
                  std::to_string(t) + " is outside the vocabulary (size " +
                  std::to_string(config.vocab_size) + ")");
    }
  }
}

ForwardVars build_forward(ModelGraph& g, const Model& model, std::span<const TokenId> tokens,
                          const ActivationHook& hook) {
  check_tokens(model.config, tokens);
  std::vector<std::size_t> ids(tokens.begin(), tokens.end());
  ForwardVars fv;
  Var resid = gather_rows(g.bind(model.embedding), std::move(ids));
  for (std::size_t l = 0; l < model.layers.size(); ++l) {
    fv.blocks.push_back(selective_block(g, model.layers[l], resid, l, hook));
    resid = fv.blocks.back().output;
  }
  for (std::size_t l = 0; l < model.stable_layers.size(); ++l) {
    fv.blocks.push_back(
        stable_block(g, model.stable_layers[l], resid, l, model.config.attn_stride, hook));
    resid = fv.blocks.back().output;
  }
  fv.logits = matmul(layer_norm(resid), g.bind(model.head));
  return fv;
}

ActivationTrace extract_trace(const ModelGraph& g, const ForwardVars& vars, std::size_t length) {
  ActivationTrace trace;
  trace.length = length;
  for (const auto& b : vars.blocks) {
    LayerTrace lt;
    lt.x = b.x.value();
    lt.delta = b.delta.value();
    lt.B = b.B.value();
    lt.C = b.C.value();
    lt.h = g.tape().saved(b.scan).at(0);
    lt.y_scan = b.y_scan.value();
    lt.scan_out = b.scan_out.value();
    lt.mixer_out = b.mixer_out.value();
    trace.layers.push_back(std::move(lt));
  }
  return trace;
}

ForwardOutput forward_model(const Model& model, std::span<const TokenId> tokens, bool trace,
                            const ActivationHook& hook) {
  ModelGraph g(false);
  const ForwardVars fv = build_forward(g, model, tokens, hook);
  ForwardOutput out;
  out.logits = fv.logits.value();
  if (trace) out.trace = extract_trace(g, fv, tokens.size());
  return out;
}

Var sequence_nll(ModelGraph& g, const Model& model, std::span<const TokenId> tokens,
                 std::span<const std::uint8_t> score_mask, const ActivationHook& hook) {
  if (score_mask.size() != tokens.size()) {
    throw Error("sequence_nll: score mask length " + std::to_string(score_mask.size()) +
                " differs from sequence length " + std::to_string(tokens.size()));
  }
  const ForwardVars fv = build_forward(g, model, tokens, hook);
  const std::size_t T = tokens.size();
  std::vector<std::size_t> targets(T, 0);
  std::vector<double> weights(T, 0.0);
  for (std::size_t j = 1; j < T; ++j) {
    targets[j - 1] = tokens[j];
    weights[j - 1] = score_mask[j] ? 1.0 : 0.0;
  }
  return masked_nll(log_softmax(fv.logits), std::move(targets), std::move(weights));
}

const Tensor& site_activations(const LayerTrace& trace, HookSite site) {
  return site == HookSite::kScanOutput ? trace.scan_out : trace.mixer_out;
}

std::size_t site_width(const ModelConfig& config, HookSite site) {
  return site == HookSite::kScanOutput ? config.d_inner : config.d_model;
}

const char* site_name(HookSite site) {
  return site == HookSite::kScanOutput ? "scan_output" : "mixer_output";
}

HookSite parse_site(const std::string& name) {
  if (name == "scan_output") return HookSite::kScanOutput;
  if (name == "mixer_output") return HookSite::kMixerOutput;
  throw Error("unknown hook site '" + name + "' (expected scan_output or mixer_output)");
}

std::vector<std::uint8_t> effective_mask(const Example& example) {
  if (example.score_mask.empty()) {
    std::vector<std::uint8_t> mask(example.tokens.size(), 1);
    if (!mask.empty()) mask[0] = 0;
    return mask;
  }
  if (example.score_mask.size() != example.tokens.size()) {
    throw Error("example: score mask length " + std::to_string(example.score_mask.size()) +
                " differs from sequence length " + std::to_string(example.tokens.size()));
  }
  return example.score_mask;
}

Accuracy top1_accuracy(const Model& model, std::span<const Example> examples,
                       const ActivationHook& hook) {
  Accuracy acc;
  for (const auto& ex : examples) {
    const auto mask = effective_mask(ex);
    bool any = false;
    for (std::size_t j = 1; j < mask.size(); ++j) any = any || mask[j];
    if (!any) continue;
    const Tensor logits = forward_model(model, ex.tokens, false, hook).logits;
    for (std::size_t j = 1; j < ex.tokens.size(); ++j) {
      if (!mask[j]) continue;
      const auto row = logits.row(j - 1);
      const auto best = static_cast<TokenId>(std::max_element(row.begin(), row.end()) - row.begin());
      acc.correct += best == ex.tokens[j] ? 1 : 0;
      ++acc.total;
    }
  }
  return acc;
}

}  // namespace ssmlab
