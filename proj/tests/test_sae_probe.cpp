#include <algorithm>
#include <cmath>
#include <limits>
#include <numeric>

#include "doctest.h"
#include "ssmlab/rng.hpp"
#include "ssmlab/sae_probe.hpp"
#include "ssmlab/tasks_harness.hpp"

using namespace ssmlab;

namespace {

// N x d data of rank r plus optional noise.
Tensor low_rank(Rng& rng, std::size_t N, std::size_t d, std::size_t r, double noise = 0.0) {
  const Tensor basis = rng.normal_tensor(Shape{r, d});
  Tensor out(Shape{N, d});
  for (std::size_t i = 0; i < N; ++i) {
    for (std::size_t k = 0; k < r; ++k) {
      const double c = rng.normal();
      for (std::size_t j = 0; j < d; ++j) out.at(i, j) += c * basis.at(k, j);
    }
    for (std::size_t j = 0; j < d; ++j) out.at(i, j) += noise * rng.normal();
  }
  return out;
}

double mean_energy(const Tensor& x) {
  double s = 0.0;
  for (double v : x.data()) s += v * v;
  return s / static_cast<double>(x.dim(0));
}

}  // namespace

TEST_CASE("funnel dimensions keep the 768-460-230 ratios") {
  const SAEConfig full = funnel_config(768);
  CHECK(full.d_hidden == 460);
  CHECK(full.d_latent == 230);
  const SAEConfig small = funnel_config(16);
  CHECK(small.d_hidden == 10);
  CHECK(small.d_latent == 5);
  CHECK(funnel_config(1).d_latent == 1);
}

TEST_CASE("linear identity-capable autoencoder reconstructs low-rank data") {
  Rng rng(1);
  const Tensor x = low_rank(rng, 200, 6, 2);
  SAEConfig c;
  c.d_in = c.d_hidden = c.d_latent = 6;
  c.l1_weight = 0.0;
  c.activation = SaeActivation::kLinear;
  c.steps = 3000;
  c.lr = 0.01;
  c.seed = 2;
  const SAEResult r = train_sae(x, c);
  const double err = sae_reconstruction_error(r.weights, x);
  MESSAGE("reconstruction " << err << " of energy " << mean_energy(x));
  CHECK(err < 1e-4 * mean_energy(x));
}

TEST_CASE("default SAE loss trends down and training is deterministic") {
  Rng rng(3);
  const Tensor x = low_rank(rng, 400, 16, 4, 0.1);
  SAEConfig c = funnel_config(16);
  c.seed = 4;
  const SAEResult a = train_sae(x, c);
  const SAEResult b = train_sae(x, c);
  CHECK(a.loss_curve == b.loss_curve);
  CHECK(a.weights.dec_w == b.weights.dec_w);
  REQUIRE(a.loss_curve.size() == c.steps);
  const auto w = windowed_means(a.loss_curve, 50);
  CHECK(w.back() <= w.front());
  CHECK(a.loss_curve[200] < a.loss_curve[0]);
}

TEST_CASE("all-zero data gives zero latents and zero loss") {
  const Tensor x(Shape{60, 8});
  SAEConfig c = funnel_config(8);
  c.steps = 20;
  const SAEResult r = train_sae(x, c);
  for (double l : r.loss_curve) CHECK(l == 0.0);
  const Tensor z = sae_encode(r.weights, x);
  for (double v : z.data()) CHECK(v == 0.0);
  CHECK(sae_reconstruction_error(r.weights, x) == 0.0);
}

TEST_CASE("SAE preconditions and divergence") {
  SAEConfig c = funnel_config(8);  // d_latent 2
  CHECK_THROWS_AS(train_sae(Tensor(Shape{19, 8}), c), Error);
  CHECK_NOTHROW(train_sae(Tensor(Shape{20, 8}), SAEConfig{c.d_in, c.d_hidden, c.d_latent, 0.0, 1}));
  CHECK_THROWS_AS(train_sae(Tensor(Shape{40, 7}), c), ShapeError);
  SAEConfig inverted = c;
  inverted.d_latent = inverted.d_hidden + 1;
  CHECK_THROWS_AS(train_sae(Tensor(Shape{400, 8}), inverted), Error);
  SAEConfig negative = c;
  negative.l1_weight = -1.0;
  CHECK_THROWS_AS(train_sae(Tensor(Shape{40, 8}), negative), Error);

  Tensor bad(Shape{40, 8}, 1.0);
  bad.at(0, 0) = std::numeric_limits<double>::quiet_NaN();
  c.batch_size = 40;  // every step sees the NaN row
  try {
    train_sae(bad, c);
    FAIL("expected divergence");
  } catch (const Error& e) {
    CHECK(std::string(e.what()).find("step 0") != std::string::npos);
  }
}

TEST_CASE("sae_metrics definitions") {
  Tensor ninety(Shape{10, 10});
  for (std::size_t i = 0; i < 10; ++i) ninety.at(i, i % 10) = 1.0;  // 10 of 100 nonzero
  CHECK(sae_metrics(ninety, 0.0).sparsity_pct == 90.0);

  const Tensor all_active(Shape{5, 4}, 0.2);
  CHECK(sae_metrics(all_active, 0.0).active_features_pct == 100.0);
  CHECK(sae_metrics(all_active, 0.0).sparsity_pct == 0.0);

  Tensor three(Shape{8, 16});
  for (std::size_t i = 0; i < 8; ++i) {
    three.at(i, 2) = 0.5;
    three.at(i, 7) = 0.11;
    three.at(i, 13) = 1.0;
    three.at(i, 4) = 0.1;  // exactly 0.1 is not active
  }
  const SAEMetrics m = sae_metrics(three, 3.5);
  CHECK(m.active_features_pct == 18.75);
  CHECK(m.reconstruction_error == 3.5);

  // Near-zero cutoff is 1e-6.
  Tensor tiny(Shape{1, 2});
  tiny.at(0, 0) = 9e-7;
  tiny.at(0, 1) = 1e-6;
  CHECK(sae_metrics(tiny, 0.0).sparsity_pct == 50.0);

  Tensor nan(Shape{1, 1}, std::numeric_limits<double>::quiet_NaN());
  CHECK_THROWS_AS(sae_metrics(nan, 0.0), Error);
}

TEST_CASE("sae_metrics bounds and permutation invariance") {
  Rng rng(5);
  for (int trial = 0; trial < 50; ++trial) {
    const std::size_t N = 1 + rng.index(20), d = 1 + rng.index(12);
    Tensor z(Shape{N, d});
    for (auto& v : z.data()) v = rng.bernoulli(0.4) ? 0.0 : rng.normal(0.1, 0.3);
    const SAEMetrics m = sae_metrics(z, 0.0);
    CHECK(m.sparsity_pct >= 0.0);
    CHECK(m.sparsity_pct <= 100.0);
    CHECK(m.active_features_pct >= 0.0);
    CHECK(m.active_features_pct <= 100.0);
    const auto perm = rng.sample_without_replacement(d, d);
    Tensor zp(Shape{N, d});
    for (std::size_t i = 0; i < N; ++i)
      for (std::size_t j = 0; j < d; ++j) zp.at(i, j) = z.at(i, perm[j]);
    const SAEMetrics mp = sae_metrics(zp, 0.0);
    CHECK(mp.sparsity_pct == m.sparsity_pct);
    CHECK(mp.active_features_pct == m.active_features_pct);
  }
}

TEST_CASE("latent-signal correlation finds the planted latent") {
  Rng rng(6);
  const std::size_t N = 500;
  std::vector<double> signal(N);
  Tensor z(Shape{N, 4});
  for (std::size_t i = 0; i < N; ++i) {
    signal[i] = rng.uniform();
    z.at(i, 0) = rng.normal();
    z.at(i, 2) = 3.0 * signal[i] + 0.05 * rng.normal();
    z.at(i, 3) = -signal[i];
  }
  const auto r = latent_signal_correlation(z, signal);
  CHECK(r[2] > 0.99);
  CHECK(r[3] == doctest::Approx(-1.0));
  CHECK(std::abs(r[0]) < 0.15);
  CHECK(r[1] == 0.0);  // constant latent
  CHECK_THROWS_AS(latent_signal_correlation(z, std::vector<double>(3)), ShapeError);
}

TEST_CASE("dictionary learning recovers one-hot points up to permutation and sign") {
  Tensor x(Shape{3, 3});
  for (std::size_t i = 0; i < 3; ++i) x.at(i, i) = 1.0;
  for (std::uint64_t seed = 0; seed < 5; ++seed) {
    DictConfig c;
    c.dict_size = 3;
    // A vanishing penalty leaves every basis of R^3 optimal; a small one picks the sparse basis.
    c.alpha = 0.01;
    c.iterations = 500;
    c.seed = seed;
    const DictResult r = dict_learn(x, c);
    std::vector<std::size_t> perm{0, 1, 2};
    double best = std::numeric_limits<double>::infinity();
    do {
      double worst = 0.0;
      for (std::size_t a = 0; a < 3; ++a) {
        double plus = 0.0, minus = 0.0;
        for (std::size_t j = 0; j < 3; ++j) {
          plus = std::max(plus, std::abs(r.atoms.at(a, j) - x.at(perm[a], j)));
          minus = std::max(minus, std::abs(r.atoms.at(a, j) + x.at(perm[a], j)));
        }
        worst = std::max(worst, std::min(plus, minus));
      }
      best = std::min(best, worst);
    } while (std::next_permutation(perm.begin(), perm.end()));
    CHECK(best < 1e-4);
    CHECK(r.reconstruction_error < 3 * 0.01 * 0.01);
  }
}

TEST_CASE("a dominant penalty zeroes the codes") {
  Rng rng(7);
  const Tensor x = low_rank(rng, 30, 5, 3);
  DictConfig c;
  c.dict_size = 4;
  c.alpha = 1e6;
  c.iterations = 3;
  const DictResult r = dict_learn(x, c);
  for (double v : r.codes.data()) CHECK(v == 0.0);
  CHECK(r.reconstruction_error == doctest::Approx(mean_energy(x)).epsilon(1e-12));
  // Every atom goes unused, so every update is a logged re-initialization.
  CHECK(r.reinitialized.size() == 12);
  CHECK(r.reinitialized.front() == std::pair<std::size_t, std::size_t>{0, 0});
}

TEST_CASE("atoms stay unit norm after every iteration") {
  Rng rng(8);
  const Tensor x = low_rank(rng, 40, 6, 3, 0.1);
  for (std::size_t iters = 1; iters <= 6; ++iters) {
    DictConfig c;
    c.dict_size = 5;
    c.alpha = 0.1;
    c.iterations = iters;
    c.seed = 9;
    const DictResult r = dict_learn(x, c);
    for (std::size_t a = 0; a < 5; ++a) {
      double n = 0.0;
      for (std::size_t j = 0; j < 6; ++j) n += r.atoms.at(a, j) * r.atoms.at(a, j);
      CHECK(std::sqrt(n) == doctest::Approx(1.0).epsilon(1e-12));
    }
  }
}

TEST_CASE("alternations never increase the objective") {
  Rng rng(10);
  for (double alpha : {0.0, 0.05, 0.5}) {
    const Tensor x = low_rank(rng, 60, 8, 4, 0.2);
    DictConfig c;
    c.dict_size = 6;
    c.alpha = alpha;
    c.iterations = 40;
    c.seed = 11;
    const DictResult r = dict_learn(x, c);
    for (std::size_t i = 1; i < r.objective.size(); ++i) {
      CHECK(r.objective[i] <= r.objective[i - 1] + 1e-8 * std::max(1.0, r.objective[i - 1]));
    }
    if (alpha == 0.0) {
      // Without the penalty the objective is the reconstruction error itself.
      for (std::size_t i = 1; i < r.reconstruction.size(); ++i)
        CHECK(r.reconstruction[i] <= r.reconstruction[i - 1] + 1e-8);
    }
  }
}

TEST_CASE("dict_learn preconditions") {
  const Tensor x(Shape{4, 3}, 1.0);
  DictConfig c;
  c.dict_size = 5;
  CHECK_THROWS_AS(dict_learn(x, c), Error);
  c.dict_size = 0;
  CHECK_THROWS_AS(dict_learn(x, c), Error);
  c.dict_size = 2;
  c.alpha = -1.0;
  CHECK_THROWS_AS(dict_learn(x, c), Error);
  CHECK_THROWS_AS(dict_learn(Tensor(Shape{0, 3}), DictConfig{}), ShapeError);
}
