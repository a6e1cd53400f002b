#include "ssmlab/stable_mamba.hpp"

#include <algorithm>
#include <cmath>

namespace ssmlab {

const char* timescale_name(Timescale k) {
  switch (k) {
    case Timescale::kShort: return "short";
    case Timescale::kMedium: return "medium";
    case Timescale::kLong: return "long";
  }
  return "?";
}

double timescale_offset(Timescale k) {
  switch (k) {
    case Timescale::kShort: return 2.0;
    case Timescale::kMedium: return 0.0;
    case Timescale::kLong: return -2.0;
  }
  return 0.0;
}

std::vector<PhaseConfig> phase_layout(std::size_t n_layers) {
  if (n_layers < 8) {
    throw Error("phase_config: need at least 8 layers so every phase is nonempty, got " +
                std::to_string(n_layers));
  }
  const auto eighth = std::max<std::size_t>(1, static_cast<std::size_t>(std::lround(n_layers / 8.0)));
  const std::size_t pre = n_layers - 2 * eighth;
  std::vector<PhaseConfig> phases(3);
  phases[0] = {1, 0, pre, 3, 16, false, {Timescale::kShort, Timescale::kMedium}};
  phases[1] = {2, pre, pre + eighth, 5, 32, true,
               {Timescale::kShort, Timescale::kMedium, Timescale::kLong}};
  phases[2] = {3, pre + eighth, n_layers, 2, 8, false, {Timescale::kShort}};
  return phases;
}

PhaseConfig phase_config(std::size_t layer, std::size_t n_layers) {
  for (const auto& p : phase_layout(n_layers)) {
    if (layer >= p.begin && layer < p.end) return p;
  }
  throw Error("phase_config: layer " + std::to_string(layer) + " out of range for " +
              std::to_string(n_layers) + " layers");
}

StableBlockParams init_stable_params(const ModelConfig& c, std::size_t layer, Rng& rng) {
  const std::size_t R = c.effective_dt_rank();
  auto proj = [&](std::size_t fan_in, std::size_t fan_out) {
    const double s = 1.0 / std::sqrt(static_cast<double>(fan_in));
    return rng.uniform_tensor(Shape{fan_in, fan_out}, -s, s);
  };
  StableBlockParams p;
  p.phase = phase_config(layer, c.n_layers);
  const std::size_t N = p.phase.d_state;
  p.in_proj = proj(c.d_model, 2 * c.d_inner);
  {
    const double s = 1.0 / std::sqrt(static_cast<double>(c.d_conv));
    p.conv_w = rng.uniform_tensor(Shape{c.d_inner, c.d_conv}, -s, s);
  }
  p.conv_b = Tensor(Shape{c.d_inner});
  p.dt_proj_in = proj(c.d_inner, R);
  p.dt_w = proj(R, c.d_inner);
  p.dt_b = Tensor(Shape{c.d_inner});
  for (auto& b : p.dt_b.data()) {
    b = inverse_softplus(std::exp(rng.uniform(std::log(0.001), std::log(0.1))));
  }
  for (Timescale k : p.phase.timescales) {
    TimescaleParams br;
    br.scale = k;
    br.A_log = Tensor(Shape{c.d_inner, N});
    for (std::size_t m = 0; m < c.d_inner; ++m)
      for (std::size_t n = 0; n < N; ++n) br.A_log.at(m, n) = std::log(static_cast<double>(n + 1));
    br.B_proj = proj(c.d_inner, N);
    br.C_proj = proj(c.d_inner, N);
    br.D = Tensor(Shape{c.d_inner}, 1.0);
    p.branches.push_back(std::move(br));
  }
  p.timescale_logits = Tensor(Shape{p.branches.size()});
  for (std::size_t i = 0; i < p.phase.n_gates; ++i) p.gate_w.push_back(proj(c.d_inner, c.d_inner));
  p.gate_logits = Tensor(Shape{p.phase.n_gates});
  if (p.phase.sparse_attention) {
    const std::size_t d_attn = std::max<std::size_t>(1, c.d_inner / 4);
    p.attn_q = proj(c.d_inner, d_attn);
    p.attn_k = proj(c.d_inner, d_attn);
    p.ctx_logit = Tensor::scalar(0.0);
  }
  const std::size_t hidden = std::max<std::size_t>(1, c.d_model / 4);
  p.comp_w1 = proj(c.d_model, hidden);
  p.comp_b1 = Tensor(Shape{hidden});
  p.comp_w2 = proj(hidden, 1);
  p.comp_b2 = Tensor(Shape{1});
  p.lambda_res = Tensor::scalar(0.9);
  p.lambda_global = Tensor::scalar(1.0);
  p.lambda_comp = Tensor::scalar(1.0);
  p.out_proj = proj(c.d_inner, c.d_model);
  return p;
}

std::vector<TimescaleState> multiscale_scan(ModelGraph& g, const StableBlockParams& p, Var x,
                                            Var gate) {
  Var gated = gate * x;
  Var dt = matmul(matmul(x, g.bind(p.dt_proj_in)), g.bind(p.dt_w)) + g.bind(p.dt_b);
  const std::size_t d_inner = p.dt_b.dim(0);
  Var no_skip = g.constant(Tensor(Shape{d_inner}));
  std::vector<TimescaleState> states;
  for (const auto& br : p.branches) {
    TimescaleState s;
    s.scale = br.scale;
    s.delta = softplus(add_scalar(dt, timescale_offset(br.scale)));
    s.B = matmul(x, g.bind(br.B_proj));
    s.C = matmul(x, g.bind(br.C_proj));
    Var A = -exp(g.bind(br.A_log));
    s.scan = selective_scan(gated, s.delta, A, s.B, s.C, no_skip);
    states.push_back(s);
  }
  return states;
}

Var timescale_weights(ModelGraph& g, const StableBlockParams& p) {
  return softmax(g.bind(p.timescale_logits));
}

namespace {
Var element(Var vec, std::size_t i) { return reshape(slice_cols(vec, i, i + 1), Shape{}); }
}  // namespace

Var ensemble_output(ModelGraph& g, const StableBlockParams& p,
                    const std::vector<TimescaleState>& states, Var x) {
  if (states.size() != p.branches.size()) throw Error("ensemble_output: branch count mismatch");
  Var w = timescale_weights(g, p);
  Var y;
  for (std::size_t k = 0; k < states.size(); ++k) {
    Var branch = states[k].scan + g.bind(p.branches[k].D) * x;
    Var term = element(w, k) * branch;
    y = y.valid() ? y + term : term;
  }
  return y;
}

Var sparse_global_context(ModelGraph& g, const StableBlockParams& p, Var h_local,
                          std::size_t stride) {
  const double inv_sqrt = 1.0 / std::sqrt(static_cast<double>(p.attn_q.dim(1)));
  Var q = matmul(h_local, g.bind(p.attn_q));
  Var k = matmul(h_local, g.bind(p.attn_k));
  Var probs = strided_softmax(scale(matmul(q, transpose(k)), inv_sqrt), stride);
  Var h_global = matmul(probs, h_local);
  Var a = sigmoid(g.bind(p.ctx_logit));
  return h_local + a * (h_global - h_local);
}

Var ensemble_gate(ModelGraph& g, const StableBlockParams& p, Var x) {
  if (p.gate_w.empty()) throw Error("ensemble_gate: n_gates must be >= 1");
  Var normed = layer_norm(x);
  Var alpha = softmax(g.bind(p.gate_logits));
  Var gate;
  for (std::size_t i = 0; i < p.gate_w.size(); ++i) {
    Var term = element(alpha, i) * sigmoid(matmul(normed, g.bind(p.gate_w[i])));
    gate = gate.valid() ? gate + term : term;
  }
  return gate;
}

Var adaptive_compression(ModelGraph& g, const StableBlockParams& p, Var pooled) {
  Var hidden = silu(matmul(pooled, g.bind(p.comp_w1)) + g.bind(p.comp_b1));
  Var logit = matmul(hidden, g.bind(p.comp_w2)) + g.bind(p.comp_b2);
  return add_scalar(scale(sigmoid(logit), 0.5), 0.5);
}

Var scaled_residual(ModelGraph& g, const StableBlockParams& p, Var y, Var x,
                    std::optional<Var> compression) {
  Var out = (y + g.bind(p.lambda_res) * x) * g.bind(p.lambda_global);
  if (compression) {
    Var c = grad_scale(*compression, p.lambda_comp.item());
    const std::size_t width = y.shape().back();
    Var expanded = matmul(c, g.constant(Tensor(Shape{1, width}, 1.0)));
    out = out * expanded;
  }
  return out;
}

BlockVars stable_block(ModelGraph& g, const StableBlockParams& p, Var resid, std::size_t layer,
                       std::size_t attn_stride, const ActivationHook& hook) {
  const std::size_t d_inner = p.dt_b.dim(0);
  BlockVars b;
  Var u = layer_norm(resid);
  Var xz = matmul(u, g.bind(p.in_proj));
  Var x_in = slice_cols(xz, 0, d_inner);
  Var z = slice_cols(xz, d_inner, 2 * d_inner);
  b.x = silu(causal_conv(x_in, g.bind(p.conv_w), g.bind(p.conv_b)));
  Var gate = ensemble_gate(g, p, b.x);
  const auto states = multiscale_scan(g, p, b.x, gate);
  b.delta = states.front().delta;
  b.B = states.front().B;
  b.C = states.front().C;
  b.scan = states.front().scan;
  Var y = ensemble_output(g, p, states, b.x);
  if (p.phase.sparse_attention) y = sparse_global_context(g, p, y, attn_stride);
  b.y_scan = y;
  b.scan_out = run_hook(hook, layer, HookSite::kScanOutput, y * silu(z));
  b.mixer_out = run_hook(hook, layer, HookSite::kMixerOutput, matmul(b.scan_out, g.bind(p.out_proj)));
  Var c = adaptive_compression(g, p, cummean_rows(resid));
  b.output = scaled_residual(g, p, b.mixer_out, resid, c);
  return b;
}

}  // namespace ssmlab
