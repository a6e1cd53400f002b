#include "ssmlab/delta_sensitivity.hpp"

#include <cmath>

namespace ssmlab {

void VarianceAccumulator::add(std::span<const double> row) {
  if (row.size() != mean_.size()) {
    throw ShapeError("VarianceAccumulator: row of width " + std::to_string(row.size()) +
                     ", expected " + std::to_string(mean_.size()));
  }
  ++count_;
  const double n = static_cast<double>(count_);
  for (std::size_t j = 0; j < row.size(); ++j) {
    const double d = row[j] - mean_[j];
    mean_[j] += d / n;
    m2_[j] += d * (row[j] - mean_[j]);
  }
}

void VarianceAccumulator::add_rows(const Tensor& rows) {
  for (std::size_t t = 0; t < rows.dim(0); ++t) add(rows.row(t));
}

Tensor VarianceAccumulator::mean() const { return Tensor(Shape{mean_.size()}, mean_); }

Tensor VarianceAccumulator::variance() const {
  if (count_ == 0) throw Error("VarianceAccumulator: no samples");
  Tensor v(Shape{m2_.size()});
  for (std::size_t j = 0; j < m2_.size(); ++j) v[j] = m2_[j] / static_cast<double>(count_);
  return v;
}

namespace {

void require_layer(const Model& model, std::size_t layer) {
  if (layer >= model.config.n_layers) {
    throw Error("layer " + std::to_string(layer) + " out of range (model has " +
                std::to_string(model.config.n_layers) + " layers)");
  }
}

}  // namespace

Tensor record_variances(const Model& model, std::span<const Sequence> corpus, std::size_t layer,
                        HookSite site) {
  require_layer(model, layer);
  if (corpus.empty()) throw Error("record_variances: empty corpus");
  VarianceAccumulator acc(site_width(model.config, site));
  for (const auto& tokens : corpus) {
    if (tokens.empty()) continue;
    const auto trace = *forward_model(model, tokens, true).trace;
    acc.add_rows(site_activations(trace.layers[layer], site));
  }
  if (acc.count() == 0) throw Error("record_variances: corpus has no tokens");
  return acc.variance();
}

std::vector<std::size_t> select_sensitive(const Tensor& variances, double tau) {
  if (!(tau > 0.0)) throw Error("select_sensitive: tau must be positive");
  std::vector<std::size_t> out;
  for (std::size_t i = 0; i < variances.size(); ++i)
    if (variances[i] >= tau) out.push_back(i);
  return out;
}

double ablate_and_score(const Model& model, std::size_t layer, std::span<const std::size_t> dims,
                        std::span<const Example> eval_set, HookSite site) {
  require_layer(model, layer);
  const Accuracy base = top1_accuracy(model, eval_set);
  if (base.total == 0) throw Error("ablate_and_score: evaluation set has no scored positions");
  Tensor factors(Shape{site_width(model.config, site)}, 1.0);
  for (std::size_t d : dims) {
    if (d >= factors.size()) throw Error("ablate_and_score: dimension " + std::to_string(d) + " out of range");
    factors[d] = 0.0;
  }
  const Accuracy ablated = top1_accuracy(model, eval_set, scale_dims_hook(layer, site, factors));
  return 100.0 * (base.value() - ablated.value());
}

const char* category_name(AblationCategory c) {
  switch (c) {
    case AblationCategory::kCriticalBeneficial: return "Critical Beneficial";
    case AblationCategory::kVeryBeneficial: return "Very Beneficial";
    case AblationCategory::kBeneficial: return "Beneficial";
    case AblationCategory::kNeutral: return "Neutral";
    case AblationCategory::kSlightlyDetrimental: return "Slightly Detrimental";
    case AblationCategory::kDetrimental: return "Detrimental";
    case AblationCategory::kCriticalDetrimental: return "Critical Detrimental";
  }
  return "?";
}

AblationCategory categorize(double d) {
  if (std::isnan(d)) throw Error("categorize: NaN accuracy change");
  if (d > 10.0) return AblationCategory::kCriticalBeneficial;
  if (d > 5.0) return AblationCategory::kVeryBeneficial;
  if (d > 2.0) return AblationCategory::kBeneficial;
  if (d > -2.0) return AblationCategory::kNeutral;
  if (d > -5.0) return AblationCategory::kSlightlyDetrimental;
  if (d > -10.0) return AblationCategory::kDetrimental;
  return AblationCategory::kCriticalDetrimental;
}

SensitivityReport sensitivity_report(const Model& model, std::size_t layer,
                                     std::span<const Sequence> corpus,
                                     std::span<const Example> eval_set,
                                     const SensitivityOptions& options) {
  SensitivityReport r;
  r.layer = layer;
  r.site = options.site;
  r.tau = options.tau;
  r.variance = record_variances(model, corpus, layer, options.site);
  r.sensitive = select_sensitive(r.variance, options.tau);
  const Accuracy base = top1_accuracy(model, eval_set);
  if (base.total == 0) throw Error("sensitivity_report: evaluation set has no scored positions");
  r.baseline_accuracy = base.value();
  r.scored_positions = base.total;
  r.ablation_delta.assign(r.variance.size(), std::nullopt);
  r.category.assign(r.variance.size(), std::nullopt);
  Tensor factors(Shape{r.variance.size()}, 1.0);
  for (std::size_t d : r.sensitive) {
    factors[d] = 0.0;
    const Accuracy ablated = top1_accuracy(model, eval_set, scale_dims_hook(layer, options.site, factors));
    factors[d] = 1.0;
    const double delta = 100.0 * (base.value() - ablated.value());
    r.ablation_delta[d] = delta;
    r.category[d] = categorize(delta);
  }
  return r;
}

}  // namespace ssmlab
