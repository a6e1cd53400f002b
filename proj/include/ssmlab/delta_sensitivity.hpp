#pragma once

// Delta-sensitive dimensions: per-dimension activation variance at a layer's
// hook site, single-dimension ablation scored by top-1 accuracy, and the
// seven ablation bins.
//
// Sign convention: delta_pp = 100 * (baseline accuracy - ablated accuracy).
// Positive means accuracy dropped when the dimension was zeroed.

#include <optional>
#include <span>
#include <string>
#include <vector>

#include "ssmlab/model.hpp"

namespace ssmlab {

/// Streaming (Welford) per-dimension mean and population variance.
class VarianceAccumulator {
 public:
  explicit VarianceAccumulator(std::size_t width) : mean_(width, 0.0), m2_(width, 0.0) {}

  void add(std::span<const double> row);
  /// Adds every row of a T x width matrix.
  void add_rows(const Tensor& rows);

  std::size_t count() const { return count_; }
  Tensor mean() const;
  Tensor variance() const;

 private:
  std::size_t count_ = 0;
  std::vector<double> mean_;
  std::vector<double> m2_;
};

/// Variance over all (sequence, position) samples of each dimension at
/// (`layer`, `site`).
Tensor record_variances(const Model& model, std::span<const Sequence> corpus, std::size_t layer,
                        HookSite site = HookSite::kScanOutput);

/// Indices with variance >= tau, ascending.
std::vector<std::size_t> select_sensitive(const Tensor& variances, double tau = 0.01);

/// 100 * (accuracy - accuracy with `dims` zeroed at (layer, site)).
double ablate_and_score(const Model& model, std::size_t layer, std::span<const std::size_t> dims,
                        std::span<const Example> eval_set, HookSite site = HookSite::kScanOutput);

enum class AblationCategory {
  kCriticalBeneficial,    // (10, inf)
  kVeryBeneficial,        // (5, 10]
  kBeneficial,            // (2, 5]
  kNeutral,               // (-2, 2]
  kSlightlyDetrimental,   // (-5, -2]
  kDetrimental,           // (-10, -5]
  kCriticalDetrimental,   // (-inf, -10]
};

inline constexpr std::size_t kCategoryCount = 7;

const char* category_name(AblationCategory c);
/// Bins delta_pp into half-open intervals (a, b]; NaN is an error.
AblationCategory categorize(double delta_pp);

struct SensitivityReport {
  std::size_t layer = 0;
  HookSite site = HookSite::kScanOutput;
  double tau = 0.01;
  Tensor variance;
  std::vector<std::size_t> sensitive;
  double baseline_accuracy = 0.0;
  std::size_t scored_positions = 0;
  /// Per dimension; set for every sensitive dimension once scored.
  std::vector<std::optional<double>> ablation_delta;
  std::vector<std::optional<AblationCategory>> category;
};

struct SensitivityOptions {
  double tau = 0.01;
  HookSite site = HookSite::kScanOutput;
};

/// Variance scan over `corpus`, then ablation scoring of each sensitive
/// dimension on `eval_set`.
SensitivityReport sensitivity_report(const Model& model, std::size_t layer,
                                     std::span<const Sequence> corpus,
                                     std::span<const Example> eval_set,
                                     const SensitivityOptions& options = {});

}  // namespace ssmlab
