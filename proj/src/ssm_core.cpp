#include "ssmlab/ssm_core.hpp"

#include <cassert>
#include <cmath>

namespace ssmlab {

std::string arch_name(Arch arch) { return arch == Arch::kStable ? "stable" : "baseline"; }

Arch parse_arch(const std::string& name) {
  if (name == "baseline" || name == "mamba") return Arch::kBaseline;
  if (name == "stable") return Arch::kStable;
  throw Error("unknown architecture '" + name + "' (expected baseline or stable)");
}

std::size_t ModelConfig::effective_dt_rank() const {
  return dt_rank != 0 ? dt_rank : (d_model + 15) / 16;
}

void ModelConfig::validate() const {
  auto positive = [](std::size_t v, const char* name) {
    if (v < 1) throw Error(std::string("model config: ") + name + " must be >= 1");
  };
  positive(vocab_size, "vocab_size");
  positive(d_model, "d_model");
  positive(d_inner, "d_inner");
  positive(d_state, "d_state");
  positive(d_conv, "d_conv");
  positive(n_layers, "n_layers");
  positive(attn_stride, "attn_stride");
  if (d_inner < d_model) throw Error("model config: d_inner must be >= d_model");
  if (arch == Arch::kStable && n_layers < 8) {
    throw Error("model config: the stable architecture needs n_layers >= 8");
  }
}

double inverse_softplus(double y) { return y + std::log(-std::expm1(-y)); }

SelectiveSSMParams init_selective_params(const ModelConfig& c, Rng& rng) {
  const std::size_t R = c.effective_dt_rank();
  auto proj = [&](std::size_t fan_in, std::size_t fan_out) {
    const double s = 1.0 / std::sqrt(static_cast<double>(fan_in));
    return rng.uniform_tensor(Shape{fan_in, fan_out}, -s, s);
  };
  SelectiveSSMParams p;
  p.in_proj = proj(c.d_model, 2 * c.d_inner);
  {
    const double s = 1.0 / std::sqrt(static_cast<double>(c.d_conv));
    p.conv_w = rng.uniform_tensor(Shape{c.d_inner, c.d_conv}, -s, s);
  }
  p.conv_b = Tensor(Shape{c.d_inner});
  p.x_proj = proj(c.d_inner, R + 2 * c.d_state);
  p.dt_w = proj(R, c.d_inner);
  p.dt_b = Tensor(Shape{c.d_inner});
  for (auto& b : p.dt_b.data()) {
    const double dt = std::exp(rng.uniform(std::log(0.001), std::log(0.1)));
    b = inverse_softplus(dt);
  }
  p.A_log = Tensor(Shape{c.d_inner, c.d_state});
  for (std::size_t m = 0; m < c.d_inner; ++m)
    for (std::size_t n = 0; n < c.d_state; ++n) p.A_log.at(m, n) = std::log(static_cast<double>(n + 1));
  p.D = Tensor(Shape{c.d_inner}, 1.0);
  p.out_proj = proj(c.d_inner, c.d_model);
  return p;
}

Discretized discretize(const Tensor& delta, const Tensor& A_log, const Tensor& B) {
  if (delta.rank() != 2 || A_log.rank() != 2 || B.rank() != 2 || A_log.dim(0) != delta.dim(1) ||
      B.dim(0) != delta.dim(0) || B.dim(1) != A_log.dim(1)) {
    throw ShapeError("discretize: incompatible shapes delta " + shape_to_string(delta.shape()) +
                     ", A_log " + shape_to_string(A_log.shape()) + ", B " +
                     shape_to_string(B.shape()));
  }
  const std::size_t T = delta.dim(0);
  const std::size_t D = delta.dim(1);
  const std::size_t N = A_log.dim(1);
  Discretized out{Tensor(Shape{T, D, N}), Tensor(Shape{T, D, N})};
  for (std::size_t t = 0; t < T; ++t) {
    for (std::size_t m = 0; m < D; ++m) {
      const double dv = delta.at(t, m);
      if (!(dv > 0.0)) {
        throw Error("discretize: delta must be positive (apply softplus first); got " +
                    std::to_string(dv) + " at t=" + std::to_string(t) + ", channel=" +
                    std::to_string(m));
      }
      for (std::size_t n = 0; n < N; ++n) {
        const double a = -std::exp(A_log.at(m, n));
        out.a_bar.at(t, m, n) = std::exp(dv * a);
        out.b_bar.at(t, m, n) = dv * B.at(t, n);
      }
    }
  }
  return out;
}

SelectiveInputVars selective_input_vars(ModelGraph& g, const SelectiveSSMParams& p, Var x) {
  const std::size_t R = p.dt_w.dim(0);
  const std::size_t N = p.A_log.dim(1);
  Var proj = matmul(x, g.bind(p.x_proj));
  Var dt = slice_cols(proj, 0, R);
  SelectiveInputVars out;
  out.B = slice_cols(proj, R, R + N);
  out.C = slice_cols(proj, R + N, R + 2 * N);
  out.delta = softplus(matmul(dt, g.bind(p.dt_w)) + g.bind(p.dt_b));
  return out;
}

SelectiveInputs selective_inputs(const SelectiveSSMParams& params, const Tensor& x) {
  ModelGraph g(false);
  const auto v = selective_input_vars(g, params, g.constant(x));
  return {v.delta.value(), v.B.value(), v.C.value()};
}

namespace {
Tensor negative_exp(const Tensor& A_log) {
  Tensor a(A_log.shape());
  for (std::size_t i = 0; i < a.size(); ++i) a[i] = -std::exp(A_log[i]);
  return a;
}
}  // namespace

ScanOutput scan_recurrence(const Tensor& x, const Tensor& delta, const Tensor& A_log,
                           const Tensor& B, const Tensor& C, const Tensor& D) {
  auto res = selective_scan_kernel(x, delta, negative_exp(A_log), B, C, D);
  return {std::move(res.y), std::move(res.h)};
}

ScanOutput ssm_scan(const SelectiveSSMParams& params, const Tensor& x) {
  const auto in = selective_inputs(params, x);
  return scan_recurrence(x, in.delta, params.A_log, in.B, in.C, params.D);
}

Tensor bruteforce_recurrence(const Tensor& x, const Tensor& delta, const Tensor& A_log,
                             const Tensor& B, const Tensor& C, const Tensor& D) {
  const std::size_t T = x.dim(0);
  if (T > kBruteforceMaxLength) {
    throw Error("ssm_bruteforce: sequence length " + std::to_string(T) + " exceeds guard " +
                std::to_string(kBruteforceMaxLength));
  }
  const auto disc = discretize(delta, A_log, B);
  const std::size_t Dn = x.dim(1);
  const std::size_t N = A_log.dim(1);
  Tensor y(Shape{T, Dn});
  for (std::size_t t = 0; t < T; ++t) {
    for (std::size_t m = 0; m < Dn; ++m) {
      double acc = D[m] * x.at(t, m);
      for (std::size_t s = 0; s <= t; ++s) {
        for (std::size_t n = 0; n < N; ++n) {
          double transition = 1.0;
          for (std::size_t k = s + 1; k <= t; ++k) transition *= disc.a_bar.at(k, m, n);
          acc += C.at(t, n) * transition * disc.b_bar.at(s, m, n) * x.at(s, m);
        }
      }
      y.at(t, m) = acc;
    }
  }
  return y;
}

Tensor ssm_bruteforce(const SelectiveSSMParams& params, const Tensor& x) {
  if (x.dim(0) > kBruteforceMaxLength) {
    throw Error("ssm_bruteforce: sequence length " + std::to_string(x.dim(0)) +
                " exceeds guard " + std::to_string(kBruteforceMaxLength));
  }
  const auto in = selective_inputs(params, x);
  return bruteforce_recurrence(x, in.delta, params.A_log, in.B, in.C, params.D);
}

BlockVars selective_block(ModelGraph& g, const SelectiveSSMParams& p, Var resid,
                          std::size_t layer, const ActivationHook& hook) {
  const std::size_t d_inner = p.D.dim(0);
  BlockVars b;
  Var u = layer_norm(resid);
  Var xz = matmul(u, g.bind(p.in_proj));
  Var x_in = slice_cols(xz, 0, d_inner);
  Var z = slice_cols(xz, d_inner, 2 * d_inner);
  b.x = silu(causal_conv(x_in, g.bind(p.conv_w), g.bind(p.conv_b)));
  const auto in = selective_input_vars(g, p, b.x);
  b.delta = in.delta;
  b.B = in.B;
  b.C = in.C;
  Var A = -exp(g.bind(p.A_log));
  b.scan = selective_scan(b.x, b.delta, A, b.B, b.C, g.bind(p.D));
  b.y_scan = b.scan;
#ifndef NDEBUG
  for (double v : g.tape().saved(b.scan)[1].data()) assert(v >= 0.0 && v <= 1.0);
#endif
  b.scan_out = run_hook(hook, layer, HookSite::kScanOutput, b.y_scan * silu(z));
  b.mixer_out = run_hook(hook, layer, HookSite::kMixerOutput, matmul(b.scan_out, g.bind(p.out_proj)));
  b.output = resid + b.mixer_out;
  return b;
}

ActivationHook compose_hooks(ActivationHook first, ActivationHook second) {
  if (!first) return second;
  if (!second) return first;
  return [first = std::move(first), second = std::move(second)](std::size_t layer, HookSite site,
                                                                 Var acts) {
    return second(layer, site, first(layer, site, acts));
  };
}

ActivationHook scale_dims_hook(std::size_t layer, HookSite site, Tensor factors) {
  return [layer, site, factors = std::move(factors)](std::size_t l, HookSite s, Var acts) {
    if (l != layer || s != site) return acts;
    if (acts.shape().back() != factors.size()) {
      throw ShapeError("scale_dims_hook: " + std::to_string(factors.size()) +
                       " factors for activations of width " + std::to_string(acts.shape().back()));
    }
    return acts * acts.tape().constant(factors);
  };
}

}  // namespace ssmlab
