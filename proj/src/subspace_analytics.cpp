#include "ssmlab/subspace_analytics.hpp"

#include <Eigen/SVD>
#include <algorithm>
#include <cmath>
#include <map>

#include "ssmlab/stable_mamba.hpp"

namespace ssmlab {

namespace {

void require_layer(const Model& model, std::size_t layer, const char* who) {
  if (layer >= model.config.n_layers) {
    throw Error(std::string(who) + ": layer " + std::to_string(layer) + " out of range (model has " +
                std::to_string(model.config.n_layers) + " layers)");
  }
}

std::vector<std::uint8_t> all_targets(std::size_t T) { return std::vector<std::uint8_t>(T, 1); }

}  // namespace

double spectral_entropy(std::span<const double> s) {
  double total = 0.0;
  for (double v : s) {
    if (v < 0.0) throw Error("spectral_entropy: negative singular value");
    total += v;
  }
  if (total == 0.0) return 0.0;
  double h = 0.0;
  for (double v : s) {
    if (v > 0.0) {
      const double p = v / total;
      h -= p * std::log(p);
    }
  }
  return std::max(h, 0.0);
}

MetricBundle layer_metrics(const Tensor& acts, std::size_t layer) {
  if (acts.rank() != 2 || acts.dim(0) < 2 || acts.dim(1) < 2) {
    throw ShapeError("layer_metrics: need T >= 2 and d >= 2, got " + shape_to_string(acts.shape()));
  }
  const std::size_t T = acts.dim(0);
  const std::size_t d = acts.dim(1);
  Eigen::MatrixXd X(T, d);
  for (std::size_t t = 0; t < T; ++t)
    for (std::size_t j = 0; j < d; ++j) X(t, j) = acts.at(t, j);

  MetricBundle m;
  m.layer = layer;

  Eigen::MatrixXd centered = X.rowwise() - X.colwise().mean();
  Eigen::BDCSVD<Eigen::MatrixXd> svd(centered);
  const Eigen::VectorXd sv = svd.singularValues();
  // singular values at round-off level are noise from the centering
  const double cutoff = sv.size() > 0 ? sv(0) * 1e-12 : 0.0;
  std::vector<double> kept;
  for (Eigen::Index i = 0; i < sv.size(); ++i) kept.push_back(sv(i) > cutoff ? sv(i) : 0.0);
  m.entropy = spectral_entropy(kept);
  m.effective_rank = std::exp(m.entropy);

  const double mean = X.mean();
  m.variance = std::sqrt((X.array() - mean).square().mean());

  const Eigen::VectorXd mean_abs = X.cwiseAbs().colwise().mean();
  const double mu = mean_abs.mean();
  const double sd = std::sqrt((mean_abs.array() - mu).square().mean());
  m.cov = mu == 0.0 ? 0.0 : sd / std::abs(mu);
  return m;
}

std::vector<const Tensor*> delta_parameters(const Model& model, std::size_t layer) {
  require_layer(model, layer, "delta_parameters");
  if (model.config.arch == Arch::kStable) {
    const auto& p = model.stable_layers[layer];
    return {&p.dt_proj_in, &p.dt_w, &p.dt_b};
  }
  const auto& p = model.layers[layer];
  return {&p.dt_w, &p.dt_b};
}

std::vector<Tensor> delta_gradients(const Model& model, std::size_t layer,
                                    std::span<const TokenId> tokens, double loss_scale) {
  const auto params = delta_parameters(model, layer);
  ModelGraph g;
  std::vector<Var> leaves;
  for (const Tensor* p : params) leaves.push_back(g.bind(*p));
  const auto mask = all_targets(tokens.size());
  Var loss = scale(sequence_nll(g, model, tokens, mask), loss_scale);
  const Gradients grads = gradient(g.tape(), loss, leaves);
  std::vector<Tensor> out;
  for (const Var& v : leaves) out.push_back(grads.at(v.id()));
  return out;
}

double gradient_sensitivity(const Model& model, std::size_t layer,
                            std::span<const Sequence> batch, double loss_scale) {
  if (batch.empty()) throw Error("gradient_sensitivity: empty batch");
  double total = 0.0;
  for (const auto& tokens : batch) {
    double sq = 0.0;
    for (const Tensor& gr : delta_gradients(model, layer, tokens, loss_scale))
      for (double v : gr.data()) sq += v * v;
    total += std::sqrt(sq);
  }
  return total / static_cast<double>(batch.size());
}

double kl_from_logits(std::span<const double> p_logits, std::span<const double> q_logits) {
  if (p_logits.size() != q_logits.size() || p_logits.empty()) {
    throw ShapeError("kl_from_logits: logit rows of different or zero length");
  }
  auto log_normalizer = [](std::span<const double> z) {
    const double m = *std::max_element(z.begin(), z.end());
    double s = 0.0;
    for (double v : z) s += std::exp(v - m);
    return m + std::log(s);
  };
  const double lp = log_normalizer(p_logits);
  const double lq = log_normalizer(q_logits);
  double kl = 0.0;
  for (std::size_t i = 0; i < p_logits.size(); ++i) {
    const double log_p = p_logits[i] - lp;
    const double log_q = q_logits[i] - lq;
    kl += std::exp(log_p) * (log_p - log_q);
  }
  return std::max(kl, 0.0);
}

double post_ablation_kl(const Model& model, std::size_t layer, std::span<const std::size_t> dims,
                        std::span<const Sequence> batch) {
  require_layer(model, layer, "post_ablation_kl");
  if (batch.empty()) throw Error("post_ablation_kl: empty evaluation batch");
  if (dims.empty()) return 0.0;
  Tensor factors(Shape{model.config.d_model}, 1.0);
  for (std::size_t d : dims) {
    if (d >= factors.size()) {
      throw Error("post_ablation_kl: dimension " + std::to_string(d) + " out of range");
    }
    factors[d] = 0.0;
  }
  const ActivationHook hook = scale_dims_hook(layer, HookSite::kMixerOutput, factors);
  double total = 0.0;
  std::size_t count = 0;
  for (const auto& tokens : batch) {
    const Tensor base = forward_model(model, tokens, false).logits;
    const Tensor ablated = forward_model(model, tokens, false, hook).logits;
    for (std::size_t t = 0; t < tokens.size(); ++t) {
      total += kl_from_logits(base.row(t), ablated.row(t));
      ++count;
    }
  }
  return count == 0 ? 0.0 : total / static_cast<double>(count);
}

double gini_sparsity(std::span<const double> values) {
  if (values.empty()) throw Error("gini_sparsity: empty input");
  double sum = 0.0;
  for (double v : values) {
    if (v < 0.0) throw Error("gini_sparsity: negative value");
    sum += v;
  }
  if (sum == 0.0) throw Error("gini_sparsity: all values are zero");
  // sorted form sum_i (2i - n - 1) p_(i) / n, paired from both ends so equal
  // values cancel exactly
  std::vector<double> p(values.begin(), values.end());
  for (auto& v : p) v /= sum;
  std::sort(p.begin(), p.end());
  const std::size_t n = p.size();
  double acc = 0.0;
  for (std::size_t k = 0; k < n / 2; ++k) {
    acc += static_cast<double>(n - 1 - 2 * k) * (p[n - 1 - k] - p[k]);
  }
  return acc / static_cast<double>(n);
}

Overlap jaccard_overlap(std::span<const std::size_t> a, std::span<const std::size_t> b) {
  std::vector<std::size_t> sa(a.begin(), a.end());
  std::vector<std::size_t> sb(b.begin(), b.end());
  std::sort(sa.begin(), sa.end());
  sa.erase(std::unique(sa.begin(), sa.end()), sa.end());
  std::sort(sb.begin(), sb.end());
  sb.erase(std::unique(sb.begin(), sb.end()), sb.end());
  std::vector<std::size_t> common;
  std::set_intersection(sa.begin(), sa.end(), sb.begin(), sb.end(), std::back_inserter(common));
  const std::size_t uni = sa.size() + sb.size() - common.size();
  Overlap o;
  o.intersection = common.size();
  o.jaccard = uni == 0 ? 1.0 : static_cast<double>(common.size()) / static_cast<double>(uni);
  return o;
}

std::vector<DimSelectivity> selectivity_scan(std::span<const Sequence> corpus,
                                             std::span<const Tensor> acts, Probe probe,
                                             const SelectivityParams& params) {
  if (corpus.empty()) throw Error("selectivity_scan: empty corpus");
  if (corpus.size() != acts.size()) {
    throw Error("selectivity_scan: " + std::to_string(corpus.size()) + " sequences but " +
                std::to_string(acts.size()) + " activation traces");
  }
  const std::size_t d = acts.front().dim(1);
  for (std::size_t i = 0; i < corpus.size(); ++i) {
    if (acts[i].rank() != 2 || acts[i].dim(0) != corpus[i].size() || acts[i].dim(1) != d) {
      throw ShapeError("selectivity_scan: activations " + shape_to_string(acts[i].shape()) +
                       " do not match sequence " + std::to_string(i) + " of length " +
                       std::to_string(corpus[i].size()));
    }
  }

  std::vector<DimSelectivity> out(d);
  std::vector<double> sum(d, 0.0), sum_sq(d, 0.0);
  std::vector<std::size_t> fired(d, 0);
  std::size_t positions = 0;
  double global_max = 0.0;
  for (std::size_t j = 0; j < d; ++j) out[j].dim = j;
  for (const Tensor& a : acts) {
    for (std::size_t t = 0; t < a.dim(0); ++t) {
      for (std::size_t j = 0; j < d; ++j) {
        const double v = a.at(t, j);
        sum[j] += v;
        sum_sq[j] += v * v;
        out[j].max_abs = std::max(out[j].max_abs, std::abs(v));
        if (std::abs(v) > params.fire_threshold) ++fired[j];
      }
      ++positions;
    }
  }
  if (positions == 0) throw Error("selectivity_scan: corpus has no positions");
  for (const auto& s : out) global_max = std::max(global_max, s.max_abs);
  for (std::size_t j = 0; j < d; ++j) {
    out[j].fire_rate = static_cast<double>(fired[j]) / static_cast<double>(positions);
    out[j].dead = out[j].max_abs <= params.mag_fraction * global_max &&
                  out[j].fire_rate < params.fire_frequency;
  }
  if (probe == Probe::kDead) return out;

  std::vector<double> mean(d), sd(d);
  for (std::size_t j = 0; j < d; ++j) {
    mean[j] = sum[j] / static_cast<double>(positions);
    sd[j] = std::sqrt(std::max(0.0, sum_sq[j] / static_cast<double>(positions) - mean[j] * mean[j]));
  }

  const std::size_t max_order = probe == Probe::kToken ? 1 : params.max_order;
  std::vector<double> best_any(d, 0.0);
  for (std::size_t n = 1; n <= max_order; ++n) {
    struct Stats {
      std::size_t count = 0;
      std::vector<double> sums;
    };
    std::map<Sequence, Stats> contexts;
    for (std::size_t i = 0; i < corpus.size(); ++i) {
      const auto& tokens = corpus[i];
      for (std::size_t t = n - 1; t < tokens.size(); ++t) {
        Sequence key(tokens.begin() + static_cast<std::ptrdiff_t>(t + 1 - n),
                     tokens.begin() + static_cast<std::ptrdiff_t>(t + 1));
        auto& st = contexts[key];
        if (st.sums.empty()) st.sums.assign(d, 0.0);
        ++st.count;
        for (std::size_t j = 0; j < d; ++j) st.sums[j] += acts[i].at(t, j);
      }
    }
    for (std::size_t j = 0; j < d; ++j) {
      if (out[j].order != 0 || out[j].dead || sd[j] == 0.0) continue;
      double best = -INFINITY;
      const Sequence* best_ctx = nullptr;
      for (const auto& [ctx, st] : contexts) {
        if (st.count < params.min_count) continue;
        const double z = (st.sums[j] / static_cast<double>(st.count) - mean[j]) / sd[j];
        if (z > best) {
          best = z;
          best_ctx = &ctx;
        }
      }
      if (best_ctx == nullptr) continue;
      best_any[j] = std::max(best_any[j], best);
      if (best >= params.z_min) {
        out[j].order = n;
        out[j].context = *best_ctx;
        out[j].z = best;
      }
    }
  }
  for (std::size_t j = 0; j < d; ++j)
    if (out[j].order == 0) out[j].z = best_any[j];
  return out;
}

double pearson(std::span<const double> a, std::span<const double> b) {
  if (a.size() != b.size() || a.empty()) throw ShapeError("pearson: series of different length");
  const double n = static_cast<double>(a.size());
  double ma = 0.0, mb = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i) {
    ma += a[i];
    mb += b[i];
  }
  ma /= n;
  mb /= n;
  double sab = 0.0, saa = 0.0, sbb = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i) {
    sab += (a[i] - ma) * (b[i] - mb);
    saa += (a[i] - ma) * (a[i] - ma);
    sbb += (b[i] - mb) * (b[i] - mb);
  }
  if (saa == 0.0 || sbb == 0.0) return 0.0;
  return std::clamp(sab / std::sqrt(saa * sbb), -1.0, 1.0);
}

TemporalDiagnostics temporal_diagnostics(std::span<const Tensor> layer_acts) {
  if (layer_acts.size() < 2) throw Error("temporal_diagnostics: need at least 2 layers");
  const std::size_t T = layer_acts.front().dim(0);
  if (T < 2) throw Error("temporal_diagnostics: need T >= 2");
  std::vector<std::vector<std::vector<double>>> columns;
  for (const Tensor& a : layer_acts) {
    if (a.rank() != 2 || a.dim(0) != T) {
      throw ShapeError("temporal_diagnostics: layer activations " + shape_to_string(a.shape()) +
                       " do not share length " + std::to_string(T));
    }
    std::vector<std::vector<double>> cols(a.dim(1), std::vector<double>(T));
    for (std::size_t t = 0; t < T; ++t)
      for (std::size_t j = 0; j < a.dim(1); ++j) cols[j][t] = a.at(t, j);
    columns.push_back(std::move(cols));
  }
  TemporalDiagnostics out;
  for (const auto& cols : columns) {
    double total = 0.0;
    for (const auto& c : cols) {
      double m = 0.0;
      for (double v : c) m += v;
      m /= static_cast<double>(T);
      double var = 0.0;
      for (double v : c) var += (v - m) * (v - m);
      total += var / static_cast<double>(T);
    }
    out.temporal_variance.push_back(total / static_cast<double>(cols.size()));
  }
  for (std::size_t l = 0; l + 1 < columns.size(); ++l) {
    double sum_abs = 0.0, max_abs = 0.0;
    std::size_t pairs = 0;
    for (const auto& a : columns[l]) {
      for (const auto& b : columns[l + 1]) {
        const double r = std::abs(pearson(a, b));
        sum_abs += r;
        max_abs = std::max(max_abs, r);
        ++pairs;
      }
    }
    out.mean_abs_corr.push_back(sum_abs / static_cast<double>(pairs));
    out.max_abs_corr.push_back(max_abs);
  }
  return out;
}

InductionScore induction_score(const Model& model, std::span<const TokenId> base) {
  if (base.empty()) throw Error("induction_score: empty base sequence");
  const std::size_t L = base.size();
  Sequence doubled(base.begin(), base.end());
  doubled.insert(doubled.end(), base.begin(), base.end());
  const auto trace = *forward_model(model, doubled, true).trace;
  InductionScore out;
  for (const auto& layer : trace.layers) {
    const std::size_t width = layer.h.size() / (2 * L);
    double total = 0.0;
    std::size_t used = 0, skipped = 0;
    for (std::size_t t = 0; t < L; ++t) {
      const double* a = layer.h.data().data() + t * width;
      const double* b = layer.h.data().data() + (t + L) * width;
      double ab = 0.0, aa = 0.0, bb = 0.0;
      for (std::size_t i = 0; i < width; ++i) {
        ab += a[i] * b[i];
        aa += a[i] * a[i];
        bb += b[i] * b[i];
      }
      if (aa == 0.0 || bb == 0.0) {
        ++skipped;
        continue;
      }
      total += std::clamp(ab / std::sqrt(aa * bb), -1.0, 1.0);
      ++used;
    }
    out.per_layer.push_back(used == 0 ? 0.0 : total / static_cast<double>(used));
    out.skipped.push_back(skipped);
  }
  return out;
}

PhaseReport classify_phases(std::span<const double> entropies, const PhaseParams& params) {
  const std::size_t n = entropies.size();
  if (n < 5) throw Error("classify_phases: need at least 5 layers, got " + std::to_string(n));
  PhaseReport report;
  double best = -INFINITY;
  for (std::size_t l = 1; l + 1 < n; ++l) {
    const double diff = entropies[l] - 0.5 * (entropies[l - 1] + entropies[l + 1]);
    double strength = diff;
    if (params.direction == AnomalyDirection::kDip) strength = -diff;
    if (params.direction == AnomalyDirection::kEither) strength = std::abs(diff);
    if (strength > best) {
      best = strength;
      report.candidate = l;
      report.score = diff;
    }
  }
  if (best > params.theta_spike) report.bottleneck = report.candidate;

  if (!report.bottleneck) {
    report.phases.push_back(PhaseLabel{0, n, 1, false});
    return report;
  }
  const std::size_t b = *report.bottleneck;
  auto push = [&](std::size_t begin, std::size_t end, int phase) {
    if (end > begin) report.phases.push_back(PhaseLabel{begin, end, phase, phase == 3});
  };
  push(0, b - 1, 1);
  push(b - 1, b, 2);
  push(b, b + 1, 3);
  push(b + 1, b + 2, 4);
  push(b + 2, n, 5);
  return report;
}

PhaseReport classify_phases(std::span<const MetricBundle> bundles, const PhaseParams& params) {
  std::vector<double> entropies;
  for (const auto& b : bundles) entropies.push_back(b.entropy);
  return classify_phases(entropies, params);
}

}  // namespace ssmlab
