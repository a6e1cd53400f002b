#include "ssmlab/steering.hpp"

#include <algorithm>
#include <cmath>

namespace ssmlab {

void validate_spec(const SteeringSpec& spec, const ModelConfig& config) {
  if (spec.layer >= config.n_layers) {
    throw Error("steering: layer " + std::to_string(spec.layer) + " out of range (model has " +
                std::to_string(config.n_layers) + " layers)");
  }
  const std::size_t width = site_width(config, spec.site);
  for (const auto& [dim, f] : spec.factors) {
    if (dim >= width) {
      throw Error("steering: dimension " + std::to_string(dim) + " out of range (width " +
                  std::to_string(width) + ")");
    }
    if (!std::isfinite(f) || f <= 0.0) {
      throw Error("steering: factor for dimension " + std::to_string(dim) + " must be positive");
    }
  }
}

ActivationHook steering_hook(const SteeringSpec& spec, const ModelConfig& config) {
  validate_spec(spec, config);
  Tensor factors(Shape{site_width(config, spec.site)}, 1.0);
  for (const auto& [dim, f] : spec.factors) factors[dim] = f;
  return scale_dims_hook(spec.layer, spec.site, std::move(factors));
}

Tensor steered_logits(const Model& model, const SteeringSpec& spec, std::span<const TokenId> tokens) {
  return forward_model(model, tokens, false, steering_hook(spec, model.config)).logits;
}

SteeringSpec compose(const SteeringSpec& first, const SteeringSpec& second) {
  if (first.layer != second.layer || first.site != second.site) {
    throw Error("compose: specs target different layers or sites");
  }
  SteeringSpec out = first;
  for (const auto& [dim, f] : second.factors) {
    auto it = out.factors.find(dim);
    if (it == out.factors.end()) {
      out.factors.emplace(dim, f);
    } else {
      it->second *= f;
    }
  }
  return out;
}

SteeringSpec assign_policy(const SensitivityReport& report, const PolicyFactors& factors) {
  SteeringSpec spec;
  spec.layer = report.layer;
  spec.site = report.site;
  for (std::size_t d : report.sensitive) {
    if (d >= report.ablation_delta.size() || !report.ablation_delta[d]) {
      throw Error("assign_policy: sensitive dimension " + std::to_string(d) + " has not been scored");
    }
    const double drop = *report.ablation_delta[d];
    if (drop > 2.0) {
      spec.factors[d] = factors.strong;
    } else if (drop > -2.0) {
      spec.factors[d] = factors.weak;
    }
  }
  return spec;
}

std::vector<double> default_grid() { return {0.1, 0.5, 1.0, 2.0, 5.0, 10.0, 50.0, 100.0}; }

double paired_weak_factor(double strong) { return std::max(1.0, 0.4 * strong); }

SteeringSpec scale_policy(const SteeringSpec& policy, double strong) {
  double top = 1.0;
  for (const auto& [dim, f] : policy.factors) top = std::max(top, f);
  SteeringSpec out;
  out.layer = policy.layer;
  out.site = policy.site;
  for (const auto& [dim, f] : policy.factors) {
    if (f == top) {
      out.factors[dim] = strong;
    } else if (f != 1.0) {
      out.factors[dim] = paired_weak_factor(strong);
    }
  }
  return out;
}

GridSearchResult grid_search(const Model& model, const SteeringSpec& policy,
                             std::span<const double> candidates, std::span<const Example> tuning_set) {
  if (candidates.empty()) throw Error("grid_search: no candidates");
  for (double c : candidates) {
    if (!std::isfinite(c) || c <= 0.0) throw Error("grid_search: candidates must be positive");
  }
  GridSearchResult r;
  r.candidates.assign(candidates.begin(), candidates.end());
  for (double c : candidates) {
    const SteeringSpec spec = scale_policy(policy, c);
    const Accuracy acc = top1_accuracy(model, tuning_set, steering_hook(spec, model.config));
    if (acc.total == 0) throw Error("grid_search: tuning set has no scored positions");
    r.scores.push_back(acc.value());
  }
  std::size_t best = 0;
  for (std::size_t i = 1; i < candidates.size(); ++i) {
    const bool better = r.scores[i] > r.scores[best];
    const bool tie_closer = r.scores[i] == r.scores[best] &&
                            std::abs(std::log(candidates[i])) < std::abs(std::log(candidates[best]));
    if (better || tie_closer) best = i;
  }
  r.best = candidates[best];
  r.best_score = r.scores[best];
  r.best_spec = scale_policy(policy, r.best);
  return r;
}

Tensor activation_patch(const Model& model, std::size_t layer, std::span<const std::size_t> dims,
                        std::span<const TokenId> source, std::span<const TokenId> target,
                        HookSite site) {
  if (source.size() != target.size()) {
    throw Error("activation_patch: source length " + std::to_string(source.size()) +
                " differs from target length " + std::to_string(target.size()));
  }
  if (layer >= model.config.n_layers) {
    throw Error("activation_patch: layer " + std::to_string(layer) + " out of range");
  }
  const std::size_t width = site_width(model.config, site);
  Tensor keep(Shape{width}, 1.0);
  for (std::size_t d : dims) {
    if (d >= width) throw Error("activation_patch: dimension " + std::to_string(d) + " out of range");
    keep[d] = 0.0;
  }
  if (dims.empty()) return forward_model(model, target, false).logits;
  const auto trace = *forward_model(model, source, true).trace;
  Tensor injected = site_activations(trace.layers[layer], site);
  for (std::size_t t = 0; t < injected.dim(0); ++t)
    for (std::size_t j = 0; j < width; ++j)
      if (keep[j] != 0.0) injected.at(t, j) = 0.0;
  const ActivationHook hook = [=](std::size_t l, HookSite s, Var acts) {
    if (l != layer || s != site) return acts;
    Tape& tape = acts.tape();
    return acts * tape.constant(keep) + tape.constant(injected);
  };
  return forward_model(model, target, false, hook).logits;
}

PipelineResult steering_pipeline(const Model& model, std::size_t layer, std::span<const Sequence> corpus,
                                 std::span<const Example> tuning, std::span<const Example> heldout,
                                 const PipelineOptions& options) {
  PipelineResult r;
  r.report = sensitivity_report(model, layer, corpus, tuning, SensitivityOptions{options.tau, options.site});
  r.policy = assign_policy(r.report, options.factors);
  std::vector<double> grid = options.grid;
  if (std::find(grid.begin(), grid.end(), 1.0) == grid.end()) grid.push_back(1.0);
  r.grid = grid_search(model, r.policy, grid, tuning);
  r.baseline_tuning = top1_accuracy(model, tuning).value();
  r.steered_tuning = r.grid.best_score;
  r.baseline_heldout = top1_accuracy(model, heldout).value();
  r.steered_heldout =
      top1_accuracy(model, heldout, steering_hook(r.grid.best_spec, model.config)).value();
  return r;
}

}  // namespace ssmlab
