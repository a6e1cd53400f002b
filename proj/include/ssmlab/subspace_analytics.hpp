#pragma once

// Layer statistics over recorded activations ("SPD-lite"), phase
// classification, and subspace metrics (sparsity, overlap, selectivity,
// temporal diagnostics, induction).

#include <cstddef>
#include <optional>
#include <span>
#include <vector>

#include "ssmlab/model.hpp"

namespace ssmlab {

struct MetricBundle {
  std::size_t layer = 0;
  double entropy = 0.0;         // nats, of the normalized singular-value spectrum
  double variance = 0.0;        // std of all activation entries
  double effective_rank = 1.0;  // exp(entropy)
  double cov = 0.0;             // std / |mean| of per-dim mean |activation|
  double grad_norm = 0.0;
  double kl_post_ablation = 0.0;
};

/// Shannon entropy (nats) of s / sum(s); 0 when all values are zero.
double spectral_entropy(std::span<const double> singular_values);

/// Statistics of a T x d activation matrix (T >= 2, d >= 2).
MetricBundle layer_metrics(const Tensor& acts, std::size_t layer = 0);

/// Parameters that produce the layer's delta (the dt projection and bias).
std::vector<const Tensor*> delta_parameters(const Model& model, std::size_t layer);

/// Gradients of the mean next-token cross-entropy of one sequence with
/// respect to delta_parameters(model, layer), scaled by `loss_scale`.
std::vector<Tensor> delta_gradients(const Model& model, std::size_t layer,
                                    std::span<const TokenId> tokens, double loss_scale = 1.0);

/// L2 norm of delta_gradients, averaged over the batch.
double gradient_sensitivity(const Model& model, std::size_t layer,
                            std::span<const Sequence> batch, double loss_scale = 1.0);

/// KL(p || q) in nats between two softmax rows given as logits.
double kl_from_logits(std::span<const double> p_logits, std::span<const double> q_logits);

/// Mean over positions of KL(original || ablated) next-token distributions,
/// where ablation zeros `dims` of the layer's mixer output.
double post_ablation_kl(const Model& model, std::size_t layer, std::span<const std::size_t> dims,
                        std::span<const Sequence> batch);

/// Gini index sum_ij |v_i - v_j| / (2 n^2 mean) of non-negative values.
double gini_sparsity(std::span<const double> values);

struct Overlap {
  double jaccard = 1.0;
  std::size_t intersection = 0;
};

/// Jaccard index of two index sets; two empty sets count as identical.
Overlap jaccard_overlap(std::span<const std::size_t> a, std::span<const std::size_t> b);

enum class Probe { kDead, kToken, kNgram };

struct SelectivityParams {
  double mag_fraction = 0.05;  // dead: max |a| below this fraction of the global max |a|
  double fire_threshold = 0.05;
  double fire_frequency = 0.01;
  double z_min = 2.0;      // (conditional mean - mean) / std
  std::size_t min_count = 10;  // occurrences needed before a context is scored
  std::size_t max_order = 3;
};

struct DimSelectivity {
  std::size_t dim = 0;
  bool dead = false;
  double max_abs = 0.0;
  double fire_rate = 0.0;
  /// Smallest n-gram order whose best context reaches z_min; 0 when none does.
  std::size_t order = 0;
  Sequence context;  // the best context at that order
  double z = 0.0;
};

/// Per-dimension selectivity over a corpus of (tokens, T x d activations).
/// The token probe considers unigrams only; the n-gram probe orders 1..max_order.
std::vector<DimSelectivity> selectivity_scan(std::span<const Sequence> corpus,
                                             std::span<const Tensor> acts, Probe probe,
                                             const SelectivityParams& params = {});

struct TemporalDiagnostics {
  std::vector<double> temporal_variance;  // per layer
  std::vector<double> mean_abs_corr;      // per adjacent layer pair
  std::vector<double> max_abs_corr;
};

/// Pearson correlation; 0 when either series is constant.
double pearson(std::span<const double> a, std::span<const double> b);

/// Per-layer temporal variance and adjacent-layer correlation over all dim pairs.
TemporalDiagnostics temporal_diagnostics(std::span<const Tensor> layer_acts);

struct InductionScore {
  std::vector<double> per_layer;
  std::vector<std::size_t> skipped;  // zero-norm positions per layer
};

/// Runs base ++ base and compares flattened hidden states at t and t + L.
InductionScore induction_score(const Model& model, std::span<const TokenId> base);

enum class AnomalyDirection { kSpike, kDip, kEither };

struct PhaseParams {
  double theta_spike = 0.1;
  AnomalyDirection direction = AnomalyDirection::kSpike;
};

struct PhaseLabel {
  std::size_t begin = 0;
  std::size_t end = 0;
  int phase = 1;  // 1 pre, 2 pre-compression, 3 bottleneck, 4 decomposition, 5 output
  bool bottleneck = false;
};

struct PhaseReport {
  std::optional<std::size_t> bottleneck;
  std::size_t candidate = 0;  // interior layer with the largest anomaly
  double score = 0.0;         // its anomaly, entropy[l] - mean of neighbours
  std::vector<PhaseLabel> phases;
};

/// Flags the interior layer whose entropy departs most from its neighbours.
PhaseReport classify_phases(std::span<const double> entropies, const PhaseParams& params = {});
PhaseReport classify_phases(std::span<const MetricBundle> bundles, const PhaseParams& params = {});

}  // namespace ssmlab
