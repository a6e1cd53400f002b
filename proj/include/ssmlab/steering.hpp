#pragma once

// Inference-time scalar steering of chosen dimensions at one layer, the
// strong/weak assignment policy, factor grid search, and activation patching.

#include <map>
#include <span>
#include <vector>

#include "ssmlab/delta_sensitivity.hpp"
#include "ssmlab/model.hpp"

namespace ssmlab {

struct SteeringSpec {
  std::size_t layer = 0;
  HookSite site = HookSite::kScanOutput;
  /// Dimension -> factor; absent dimensions keep factor 1.
  std::map<std::size_t, double> factors;
};

/// Throws when the layer or a dimension is out of range or a factor is not
/// a finite positive number.
void validate_spec(const SteeringSpec& spec, const ModelConfig& config);

/// Hook multiplying the spec's dimensions by their factors.
ActivationHook steering_hook(const SteeringSpec& spec, const ModelConfig& config);

/// Forward pass with the spec applied.
Tensor steered_logits(const Model& model, const SteeringSpec& spec, std::span<const TokenId> tokens);

/// Factors of `second` multiplied into `first`; both must target the same layer and site.
SteeringSpec compose(const SteeringSpec& first, const SteeringSpec& second);

struct PolicyFactors {
  double strong = 5.0;  // drop > 2 pp
  double weak = 2.0;    // drop in (-2, 2]
};

/// Factor per scored sensitive dimension: strong for beneficial bins, weak
/// for neutral, none for detrimental bins.
SteeringSpec assign_policy(const SensitivityReport& report, const PolicyFactors& factors = {});

/// Default candidate grid spanning 0.1 to 100.
std::vector<double> default_grid();

/// Weak factor paired with strong factor f: max(1, 0.4 f).
double paired_weak_factor(double strong);

/// Rescales a policy spec: dimensions carrying the largest factor get `strong`,
/// the remaining steered dimensions get paired_weak_factor(strong).
SteeringSpec scale_policy(const SteeringSpec& policy, double strong);

struct GridSearchResult {
  std::vector<double> candidates;
  std::vector<double> scores;  // top-1 accuracy per candidate
  double best = 1.0;
  double best_score = 0.0;
  SteeringSpec best_spec;
};

/// Evaluates each candidate as the strong factor; argmax with ties broken
/// toward the candidate closest to 1 (in log scale).
GridSearchResult grid_search(const Model& model, const SteeringSpec& policy,
                             std::span<const double> candidates, std::span<const Example> tuning_set);

struct PipelineOptions {
  double tau = 0.01;
  HookSite site = HookSite::kScanOutput;
  PolicyFactors factors;
  /// Strong-factor candidates; 1.0 is added when missing.
  std::vector<double> grid = default_grid();
};

struct PipelineResult {
  SensitivityReport report;
  SteeringSpec policy;
  GridSearchResult grid;
  double baseline_tuning = 0.0;  // top-1 accuracy
  double steered_tuning = 0.0;
  double baseline_heldout = 0.0;
  double steered_heldout = 0.0;
};

/// Variance scan over `corpus`, ablation scoring and policy on `tuning`,
/// grid search on `tuning`, then the chosen spec scored on `heldout`.
PipelineResult steering_pipeline(const Model& model, std::size_t layer, std::span<const Sequence> corpus,
                                 std::span<const Example> tuning, std::span<const Example> heldout,
                                 const PipelineOptions& options = {});

/// Target forward pass with `dims` at (layer, site) replaced position-wise by
/// the source run's activations.
Tensor activation_patch(const Model& model, std::size_t layer, std::span<const std::size_t> dims,
                        std::span<const TokenId> source, std::span<const TokenId> target,
                        HookSite site = HookSite::kScanOutput);

}  // namespace ssmlab
