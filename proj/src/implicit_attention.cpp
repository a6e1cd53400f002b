#include "ssmlab/implicit_attention.hpp"

#include <algorithm>
#include <cmath>

namespace ssmlab {

double history_term(const Tensor& delta, const Tensor& A_log, std::size_t m, std::size_t n,
                    std::size_t t, std::size_t s) {
  if (s > t) throw Error("history_term: requires s <= t");
  double total = 0.0;
  for (std::size_t k = s + 1; k <= t; ++k) total += delta.at(k, m);
  return std::exp(-std::exp(A_log.at(m, n)) * total);
}

AttentionMap ssm_attention(const Tensor& A_log, const LayerTrace& trace, std::size_t layer,
                           const AttentionOptions& options) {
  if (trace.delta.empty() || trace.B.empty() || trace.C.empty()) {
    throw Error("ssm_attention: trace for layer " + std::to_string(layer) +
                " lacks delta/B/C recordings");
  }
  const std::size_t T = trace.delta.dim(0);
  const std::size_t Dn = trace.delta.dim(1);
  const std::size_t N = A_log.dim(1);
  if (A_log.dim(0) != Dn || trace.B.dim(1) != N) {
    throw ShapeError("ssm_attention: A_log " + shape_to_string(A_log.shape()) +
                     " incompatible with trace delta " + shape_to_string(trace.delta.shape()) +
                     " / B " + shape_to_string(trace.B.shape()));
  }
  AttentionMap map;
  map.layer = layer;
  map.alpha = Tensor(Shape{Dn, T, T});
  std::vector<double> prefix(T + 1);
  for (std::size_t m = 0; m < Dn; ++m) {
    prefix[0] = 0.0;
    for (std::size_t t = 0; t < T; ++t) prefix[t + 1] = prefix[t] + trace.delta.at(t, m);
    for (std::size_t n = 0; n < N; ++n) {
      const double a = -std::exp(A_log.at(m, n));
      for (std::size_t t = 0; t < T; ++t) {
        const double c = trace.C.at(t, n);
        for (std::size_t s = 0; s <= t; ++s) {
          const double H = s == t ? 1.0 : std::exp(a * (prefix[t + 1] - prefix[s + 1]));
          map.alpha.at(m, t, s) += c * H * trace.delta.at(s, m) * trace.B.at(s, n);
        }
      }
    }
  }

  const std::size_t head_size = options.head_size == 0 ? Dn : options.head_size;
  const auto raw = channel_group_heads(map.alpha, head_size);
  std::vector<Tensor> absolute;
  if (options.variant != HeadVariant::kRaw) {
    Tensor abs_alpha = map.alpha;
    for (auto& v : abs_alpha.data()) v = std::abs(v);
    absolute = channel_group_heads(abs_alpha, head_size);
  }
  switch (options.variant) {
    case HeadVariant::kRaw: map.averaged = average_heads(raw); break;
    case HeadVariant::kAbs: map.averaged = average_heads(absolute); break;
    case HeadVariant::kBoth: map.averaged = average_heads(raw, absolute); break;
  }
  return map;
}

AttentionMap ssm_attention(const Model& model, const ActivationTrace& trace, std::size_t layer,
                           const AttentionOptions& options) {
  if (layer >= trace.layers.size()) {
    throw Error("ssm_attention: missing trace for layer " + std::to_string(layer));
  }
  if (layer >= model.layers.size()) {
    throw Error("ssm_attention: layer " + std::to_string(layer) +
                " is not a baseline selective block");
  }
  return ssm_attention(model.layers[layer].A_log, trace.layers[layer], layer, options);
}

std::vector<Tensor> channel_group_heads(const Tensor& alpha, std::size_t head_size) {
  const std::size_t Dn = alpha.dim(0);
  const std::size_t T = alpha.dim(1);
  if (head_size == 0 || Dn % head_size != 0) {
    throw Error("channel_group_heads: head size " + std::to_string(head_size) +
                " must divide " + std::to_string(Dn) + " channels");
  }
  std::vector<Tensor> heads;
  for (std::size_t h0 = 0; h0 < Dn; h0 += head_size) {
    Tensor head(Shape{T, T});
    for (std::size_t m = h0; m < h0 + head_size; ++m)
      for (std::size_t i = 0; i < T * T; ++i) head[i] += alpha[m * T * T + i];
    for (auto& v : head.data()) v /= static_cast<double>(head_size);
    heads.push_back(std::move(head));
  }
  return heads;
}

Tensor average_heads(std::span<const Tensor> variant_a, std::span<const Tensor> variant_b) {
  if (variant_a.empty()) throw Error("average_heads: need at least one head");
  if (!variant_b.empty() && variant_b.size() != variant_a.size()) {
    throw Error("average_heads: variants have different head counts");
  }
  const Shape& shape = variant_a.front().shape();
  Tensor out(shape);
  auto add = [&](const Tensor& m) {
    if (m.shape() != shape) {
      throw ShapeError("average_heads: shape mismatch " + shape_to_string(shape) + " vs " +
                       shape_to_string(m.shape()));
    }
    for (std::size_t i = 0; i < out.size(); ++i) out[i] += m[i];
  };
  for (const auto& m : variant_a) add(m);
  for (const auto& m : variant_b) add(m);
  const double count = static_cast<double>(variant_a.size() + variant_b.size());
  for (auto& v : out.data()) v /= count;
  return out;
}

Importance importance_vector(const Tensor& A) {
  if (A.rank() != 2 || A.dim(0) != A.dim(1)) {
    throw ShapeError("importance_vector: expected a square matrix, got " + shape_to_string(A.shape()));
  }
  const std::size_t T = A.dim(0);
  if (T == 0) throw Error("importance_vector: empty matrix");
  Importance imp{Tensor(Shape{T}), Tensor(Shape{T})};
  for (std::size_t i = 0; i < T; ++i) {
    double row = 0.0;
    for (std::size_t j = 0; j < T; ++j) row += A.at(i, j);
    imp.w[i] = row / static_cast<double>(T);
  }
  const auto [lo, hi] = std::minmax_element(imp.w.data().begin(), imp.w.data().end());
  const double min = *lo;
  const double max = *hi;
  for (std::size_t i = 0; i < T; ++i) {
    imp.w_norm[i] = max == min ? 1.0 : (imp.w[i] - min) / (max - min);
  }
  return imp;
}

Tensor activation_subspace(const Tensor& w_norm, const Tensor& h) {
  if (h.rank() != 2 || w_norm.rank() != 1 || w_norm.dim(0) != h.dim(0)) {
    throw ShapeError("activation_subspace: weights " + shape_to_string(w_norm.shape()) +
                     " do not match hidden states " + shape_to_string(h.shape()));
  }
  const std::size_t T = h.dim(0);
  const std::size_t d = h.dim(1);
  Tensor v(Shape{d});
  for (std::size_t t = 0; t < T; ++t)
    for (std::size_t j = 0; j < d; ++j) v[j] += w_norm[t] * h.at(t, j);
  return v;
}

SubspaceVector compute_subspace(const AttentionMap& map, const Tensor& h) {
  auto imp = importance_vector(map.averaged);
  SubspaceVector out;
  out.v = activation_subspace(imp.w_norm, h);
  out.w = std::move(imp.w);
  out.w_norm = std::move(imp.w_norm);
  return out;
}

double magnitude_ratio(const AttentionMap& map, std::size_t t) {
  const std::size_t Dn = map.alpha.dim(0);
  const std::size_t T = map.alpha.dim(1);
  if (t >= T) throw Error("magnitude_ratio: t=" + std::to_string(t) + " out of range");
  double total = 0.0;
  for (std::size_t m = 0; m < Dn; ++m)
    for (std::size_t s = 0; s <= t; ++s) total += map.alpha.at(m, t, s);
  return total;
}

Tensor reconstruct_from_attention(const AttentionMap& map, const Tensor& x, const Tensor& D) {
  const std::size_t Dn = map.alpha.dim(0);
  const std::size_t T = map.alpha.dim(1);
  if (x.shape() != Shape{T, Dn} || D.shape() != Shape{Dn}) {
    throw ShapeError("reconstruct_from_attention: x " + shape_to_string(x.shape()) + ", D " +
                     shape_to_string(D.shape()) + " vs alpha " + shape_to_string(map.alpha.shape()));
  }
  Tensor y(Shape{T, Dn});
  for (std::size_t m = 0; m < Dn; ++m) {
    for (std::size_t t = 0; t < T; ++t) {
      double acc = D[m] * x.at(t, m);
      for (std::size_t s = 0; s <= t; ++s) acc += map.alpha.at(m, t, s) * x.at(s, m);
      y.at(t, m) = acc;
    }
  }
  return y;
}

}  // namespace ssmlab
