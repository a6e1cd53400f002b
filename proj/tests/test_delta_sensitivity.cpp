#include <cmath>

#include "doctest.h"
#include "ssmlab/delta_sensitivity.hpp"

using namespace ssmlab;

namespace {

ModelConfig toy_config(std::uint64_t seed = 1) {
  ModelConfig c;
  c.vocab_size = 7;
  c.d_model = 6;
  c.d_inner = 8;
  c.d_state = 3;
  c.d_conv = 3;
  c.n_layers = 2;
  c.seed = seed;
  return c;
}

Sequence random_tokens(Rng& rng, std::size_t n, std::size_t vocab) {
  Sequence s(n);
  for (auto& t : s) t = static_cast<TokenId>(rng.index(vocab));
  return s;
}

/// Zeroes the z-gate column of scan-output dim `j`, so silu(z) = 0 there.
void kill_scan_dim(Model& m, std::size_t layer, std::size_t j) {
  auto& p = m.layers[layer];
  for (std::size_t r = 0; r < p.in_proj.dim(0); ++r) p.in_proj.at(r, m.config.d_inner + j) = 0.0;
}

}  // namespace

TEST_CASE("streaming variance") {
  SUBCASE("constant and alternating") {
    VarianceAccumulator acc(2);
    for (int t = 0; t < 10; ++t) {
      const double row[2] = {3.25, t % 2 ? 1.0 : -1.0};
      acc.add(row);
    }
    const Tensor v = acc.variance();
    CHECK(v[0] == 0.0);
    CHECK(v[1] == doctest::Approx(1.0).epsilon(1e-15));
  }
  SUBCASE("matches two-pass variance") {
    Rng rng(1);
    for (int trial = 0; trial < 20; ++trial) {
      const std::size_t n = 2 + rng.index(500);
      Tensor X = rng.normal_tensor({n, 5}, 1.0 + rng.uniform(0.0, 10.0));
      for (std::size_t i = 0; i < X.size(); ++i) X[i] += 1000.0;
      VarianceAccumulator acc(5);
      acc.add_rows(X);
      const Tensor v = acc.variance();
      for (std::size_t j = 0; j < 5; ++j) {
        double mean = 0.0;
        for (std::size_t t = 0; t < n; ++t) mean += X.at(t, j);
        mean /= static_cast<double>(n);
        double ss = 0.0;
        for (std::size_t t = 0; t < n; ++t) ss += (X.at(t, j) - mean) * (X.at(t, j) - mean);
        CHECK(std::abs(v[j] - ss / static_cast<double>(n)) <= 1e-10);
      }
    }
  }
  SUBCASE("errors") {
    VarianceAccumulator acc(3);
    CHECK_THROWS_AS(acc.variance(), Error);
    const double row[2] = {1.0, 2.0};
    CHECK_THROWS_AS(acc.add(row), ShapeError);
  }
}

TEST_CASE("record_variances agrees with the trace") {
  const Model model = init_model(toy_config(2));
  Rng rng(2);
  const std::vector<Sequence> corpus = {random_tokens(rng, 9, 7), random_tokens(rng, 4, 7)};
  for (HookSite site : {HookSite::kScanOutput, HookSite::kMixerOutput}) {
    const Tensor v = record_variances(model, corpus, 1, site);
    CHECK(v.size() == site_width(model.config, site));
    std::vector<Tensor> acts;
    for (const auto& s : corpus) acts.push_back(site_activations(forward_model(model, s, true).trace->layers[1], site));
    for (std::size_t j = 0; j < v.size(); ++j) {
      double sum = 0.0;
      std::size_t n = 0;
      for (const auto& a : acts)
        for (std::size_t t = 0; t < a.dim(0); ++t, ++n) sum += a.at(t, j);
      const double mean = sum / static_cast<double>(n);
      double ss = 0.0;
      for (const auto& a : acts)
        for (std::size_t t = 0; t < a.dim(0); ++t) ss += (a.at(t, j) - mean) * (a.at(t, j) - mean);
      CHECK(std::abs(v[j] - ss / static_cast<double>(n)) <= 1e-10);
    }
  }
  CHECK_THROWS_AS(record_variances(model, {}, 0), Error);
  CHECK_THROWS_AS(record_variances(model, corpus, 2), Error);
}

TEST_CASE("select_sensitive") {
  CHECK(select_sensitive(Tensor::vector({0.02, 0.005, 0.5})) == std::vector<std::size_t>{0, 2});
  CHECK(select_sensitive(Tensor::vector({0.001, 0.005})).empty());
  CHECK(select_sensitive(Tensor::vector({0.01, 0.0099999}), 0.01) == std::vector<std::size_t>{0});
  CHECK_THROWS_AS(select_sensitive(Tensor::vector({1.0}), 0.0), Error);
  Rng rng(3);
  for (int trial = 0; trial < 200; ++trial) {
    const Tensor v = rng.uniform_tensor({20}, 0.0, 0.1);
    const double t1 = rng.uniform(0.001, 0.1);
    const double t2 = t1 + rng.uniform(0.0, 0.05);
    const auto a = select_sensitive(v, t1);
    for (std::size_t i : select_sensitive(v, t2)) CHECK(std::find(a.begin(), a.end(), i) != a.end());
  }
}

TEST_CASE("categorize") {
  CHECK(categorize(12.0) == AblationCategory::kCriticalBeneficial);
  CHECK(categorize(0.0) == AblationCategory::kNeutral);
  CHECK(categorize(-7.0) == AblationCategory::kDetrimental);
  CHECK(categorize(10.0) == AblationCategory::kVeryBeneficial);
  CHECK(categorize(5.0) == AblationCategory::kBeneficial);
  CHECK(categorize(2.0) == AblationCategory::kNeutral);
  CHECK(categorize(-2.0) == AblationCategory::kSlightlyDetrimental);
  CHECK(categorize(-5.0) == AblationCategory::kDetrimental);
  CHECK(categorize(-10.0) == AblationCategory::kCriticalDetrimental);
  CHECK(categorize(INFINITY) == AblationCategory::kCriticalBeneficial);
  CHECK(categorize(-INFINITY) == AblationCategory::kCriticalDetrimental);
  CHECK_THROWS_AS(categorize(NAN), Error);
  CHECK(std::string(category_name(AblationCategory::kSlightlyDetrimental)) == "Slightly Detrimental");

  // bins partition the line: each value lies inside its bin's (lo, hi]
  const double edges[kCategoryCount + 1] = {INFINITY, 10.0, 5.0, 2.0, -2.0, -5.0, -10.0, -INFINITY};
  Rng rng(4);
  for (int trial = 0; trial < 10000; ++trial) {
    const double x = rng.normal(0.0, 15.0);
    const auto c = static_cast<std::size_t>(categorize(x));
    CHECK(x <= edges[c]);
    CHECK(x > edges[c + 1]);
  }
}

TEST_CASE("ablate_and_score") {
  Model model = init_model(toy_config(5));
  kill_scan_dim(model, 1, 3);
  Rng rng(5);
  std::vector<Example> eval;
  for (int i = 0; i < 6; ++i) eval.push_back({random_tokens(rng, 10, 7), {}});
  CHECK(ablate_and_score(model, 1, {}, eval) == 0.0);
  const std::vector<std::size_t> dead = {3};
  CHECK(ablate_and_score(model, 1, dead, eval) == 0.0);
  const std::vector<std::size_t> some = {0, 5};
  CHECK(ablate_and_score(model, 1, some, eval) == ablate_and_score(model, 1, some, eval));
  const std::vector<Example> unscored = {{{1, 2, 3}, {0, 0, 0}}};
  CHECK_THROWS_AS(ablate_and_score(model, 1, dead, unscored), Error);
  const std::vector<std::size_t> bad = {8};
  CHECK_THROWS_AS(ablate_and_score(model, 1, bad, eval), Error);
}

TEST_CASE("sensitivity report scores every sensitive dimension") {
  Model model = init_model(toy_config(6));
  kill_scan_dim(model, 0, 2);
  Rng rng(6);
  std::vector<Sequence> corpus;
  std::vector<Example> eval;
  for (int i = 0; i < 5; ++i) {
    corpus.push_back(random_tokens(rng, 12, 7));
    eval.push_back({random_tokens(rng, 12, 7), {}});
  }
  const auto r = sensitivity_report(model, 0, corpus, eval, {1e-6, HookSite::kScanOutput});
  CHECK(r.variance[2] == 0.0);
  CHECK(std::find(r.sensitive.begin(), r.sensitive.end(), 2) == r.sensitive.end());
  CHECK(r.sensitive.size() <= 8);
  for (std::size_t j = 0; j < 8; ++j) {
    const bool sensitive = std::find(r.sensitive.begin(), r.sensitive.end(), j) != r.sensitive.end();
    CHECK(r.ablation_delta[j].has_value() == sensitive);
    if (sensitive) {
      const std::vector<std::size_t> one = {j};
      CHECK(*r.ablation_delta[j] == ablate_and_score(model, 0, one, eval));
      CHECK(*r.category[j] == categorize(*r.ablation_delta[j]));
    }
  }
}
