#pragma once

// Sparse autoencoder over recorded activations, its feature statistics, and
// a sparse-coding dictionary learner for the latents.

#include <cstddef>
#include <cstdint>
#include <span>
#include <utility>
#include <vector>

#include "ssmlab/tensor.hpp"

namespace ssmlab {

enum class SaeActivation { kRelu, kLinear };

struct SAEConfig {
  std::size_t d_in = 0;
  std::size_t d_hidden = 0;
  std::size_t d_latent = 0;
  double l1_weight = 1e-3;
  std::size_t steps = 500;
  double lr = 0.05;
  std::size_t batch_size = 32;
  std::uint64_t seed = 0;
  /// Nonlinearity after both encoder layers. kLinear makes the whole map linear.
  SaeActivation activation = SaeActivation::kRelu;
};

/// The 768 -> 460 -> 230 funnel rescaled to `d_in`.
SAEConfig funnel_config(std::size_t d_in);

struct SAEWeights {
  Tensor enc_w1, enc_b1;  // d_in x d_hidden, d_hidden
  Tensor enc_w2, enc_b2;  // d_hidden x d_latent, d_latent
  Tensor dec_w, dec_b;    // d_latent x d_in, d_in
  SaeActivation activation = SaeActivation::kRelu;
};

struct SAEResult {
  SAEWeights weights;
  std::vector<double> loss_curve;  // minibatch loss before each update
};

/// Requires acts of shape N x d_in with N >= 10 * d_latent.
SAEResult train_sae(const Tensor& acts, const SAEConfig& config);

Tensor sae_encode(const SAEWeights& w, const Tensor& acts);
Tensor sae_decode(const SAEWeights& w, const Tensor& latents);

/// Mean over rows of ||x - dec(enc(x))||^2.
double sae_reconstruction_error(const SAEWeights& w, const Tensor& acts);

struct SAEMetrics {
  double reconstruction_error = 0.0;
  double sparsity_pct = 0.0;         // entries with |a| < 1e-6
  double active_features_pct = 0.0;  // dims with mean activation > 0.1
};

SAEMetrics sae_metrics(const Tensor& latents, double reconstruction_error);

/// Pearson r between each latent dimension and a per-row signal strength.
std::vector<double> latent_signal_correlation(const Tensor& latents, std::span<const double> signal);

struct DictConfig {
  std::size_t dict_size = 512;
  double alpha = 1.0;
  std::size_t iterations = 500;
  std::size_t cd_sweeps = 10;  // lasso sweeps per alternation
  std::uint64_t seed = 0;
};

struct DictResult {
  Tensor atoms;  // dict_size x p, unit rows
  Tensor codes;  // N x dict_size
  double reconstruction_error = 0.0;  // mean over rows of ||x - c D||^2
  /// After each alternation: 0.5 ||X - C D||^2 + alpha ||C||_1, and the
  /// per-row reconstruction error.
  std::vector<double> objective;
  std::vector<double> reconstruction;
  /// Zero-norm atom updates, replaced by a random data row: (iteration, atom).
  std::vector<std::pair<std::size_t, std::size_t>> reinitialized;
};

/// Alternates coordinate-descent lasso on the codes with exact unit-norm atom
/// updates, so the objective never increases. Requires dict_size <= N.
DictResult dict_learn(const Tensor& data, const DictConfig& config);

}  // namespace ssmlab
