#include <cmath>

#include "doctest.h"
#include "ssmlab/checkpoint.hpp"
#include "ssmlab/model.hpp"
#include "ssmlab/ssm_core.hpp"

using namespace ssmlab;

namespace {

ModelConfig small_config(std::uint64_t seed = 1) {
  ModelConfig c;
  c.vocab_size = 11;
  c.d_model = 8;
  c.d_inner = 12;
  c.d_state = 4;
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

}  // namespace

TEST_CASE("discretize examples") {
  const Tensor A_log(Shape{1, 1}, 0.0);  // a = -1
  const Tensor B = Tensor::matrix(1, 1, {2.0});
  SUBCASE("delta -> 0 freezes the state") {
    const auto d = discretize(Tensor::matrix(1, 1, {1e-12}), A_log, B);
    CHECK(d.a_bar[0] == doctest::Approx(1.0).epsilon(1e-11));
    CHECK(d.b_bar[0] == doctest::Approx(0.0));
  }
  SUBCASE("delta -> infinity resets the state") {
    const auto d = discretize(Tensor::matrix(1, 1, {1e3}), A_log, B);
    CHECK(d.a_bar[0] < 1e-300);
  }
  SUBCASE("delta = 1, a = -1, B = 2") {
    const auto d = discretize(Tensor::matrix(1, 1, {1.0}), A_log, B);
    CHECK(d.a_bar[0] == doctest::Approx(std::exp(-1.0)).epsilon(1e-15));
    CHECK(d.b_bar[0] == 2.0);
  }
  SUBCASE("non-positive delta signals a missing softplus") {
    CHECK_THROWS_AS(discretize(Tensor::matrix(1, 1, {0.0}), A_log, B), Error);
    CHECK_THROWS_AS(discretize(Tensor::matrix(1, 1, {-0.5}), A_log, B), Error);
  }
}

TEST_CASE("scan on zero input stays zero") {
  Rng rng(2);
  auto p = init_selective_params(small_config(), rng);
  const auto out = ssm_scan(p, Tensor(Shape{7, 12}));
  for (double v : out.y.data()) CHECK(v == 0.0);
  for (double v : out.h.data()) CHECK(v == 0.0);
}

TEST_CASE("single step scan is C (B_bar x) + D x") {
  Rng rng(3);
  const Tensor x = rng.normal_tensor({1, 3});
  const Tensor delta = rng.uniform_tensor({1, 3}, 0.1, 1.0);
  const Tensor A_log = rng.normal_tensor({3, 2});
  const Tensor B = rng.normal_tensor({1, 2});
  const Tensor C = rng.normal_tensor({1, 2});
  const Tensor D = rng.normal_tensor({3});
  const auto out = scan_recurrence(x, delta, A_log, B, C, D);
  const Tensor brute = bruteforce_recurrence(x, delta, A_log, B, C, D);
  for (std::size_t m = 0; m < 3; ++m) {
    double expect = D[m] * x[m];
    for (std::size_t n = 0; n < 2; ++n) expect += C[n] * delta[m] * B[n] * x[m];
    CHECK(out.y[m] == doctest::Approx(expect).epsilon(1e-14));
    CHECK(brute[m] == doctest::Approx(expect).epsilon(1e-14));
  }
}

TEST_CASE("hand-unrolled two step instance") {
  // a = -1, delta = ln 2 => A_bar = 0.5; B = C = 1, D = 0, x = (1, 1)
  const double ln2 = std::log(2.0);
  const Tensor x = Tensor::matrix(2, 1, {1.0, 1.0});
  const Tensor delta = Tensor::matrix(2, 1, {ln2, ln2});
  const Tensor A_log(Shape{1, 1}, 0.0);
  const Tensor B = Tensor::matrix(2, 1, {1.0, 1.0});
  const Tensor C = Tensor::matrix(2, 1, {1.0, 1.0});
  const Tensor D(Shape{1}, 0.0);
  const auto scan = scan_recurrence(x, delta, A_log, B, C, D);
  const Tensor brute = bruteforce_recurrence(x, delta, A_log, B, C, D);
  const double h0 = ln2;
  const double h1 = 0.5 * ln2 + ln2;
  CHECK(scan.h[0] == doctest::Approx(h0).epsilon(1e-15));
  CHECK(scan.h[1] == doctest::Approx(h1).epsilon(1e-15));
  CHECK(scan.y[0] == doctest::Approx(h0).epsilon(1e-15));
  CHECK(scan.y[1] == doctest::Approx(h1).epsilon(1e-15));
  CHECK(brute[0] == doctest::Approx(h0).epsilon(1e-15));
  CHECK(brute[1] == doctest::Approx(h1).epsilon(1e-15));
}

TEST_CASE("scan matches the brute-force recurrence on 50 random instances") {
  double worst = 0.0;
  for (std::uint64_t seed = 0; seed < 50; ++seed) {
    Rng rng(seed);
    ModelConfig c = small_config(seed);
    c.d_state = 1 + rng.index(8);
    c.d_inner = c.d_model + rng.index(8);
    const std::size_t T = 1 + rng.index(32);
    auto p = init_selective_params(c, rng);
    const Tensor x = rng.normal_tensor({T, c.d_inner});
    const double err = max_relative_error(ssm_scan(p, x).y, ssm_bruteforce(p, x));
    CHECK(err <= 1e-9);
    worst = std::max(worst, err);
  }
  MESSAGE("worst scan/brute-force relative error " << worst);
}

TEST_CASE("brute force refuses long sequences") {
  Rng rng(4);
  auto p = init_selective_params(small_config(), rng);
  CHECK_THROWS_AS(ssm_bruteforce(p, Tensor(Shape{65, 12})), Error);
  CHECK_NOTHROW(ssm_bruteforce(p, Tensor(Shape{64, 12})));
}

TEST_CASE("forward is causal and deterministic") {
  const Model model = init_model(small_config());
  Rng rng(9);
  const Sequence tokens = random_tokens(rng, 20, 11);

  SUBCASE("prefix invariance, bit-identical") {
    const Tensor full = forward_model(model, tokens, false).logits;
    for (std::size_t t : {1u, 5u, 13u}) {
      const Sequence prefix(tokens.begin(), tokens.begin() + t);
      const Tensor part = forward_model(model, prefix, false).logits;
      for (std::size_t i = 0; i < part.size(); ++i) CHECK(part[i] == full[i]);
    }
  }
  SUBCASE("same seed and tokens give identical logits") {
    const Model again = init_model(small_config());
    CHECK(forward_model(model, tokens, false).logits == forward_model(again, tokens, false).logits);
  }
  SUBCASE("perturbing the last token leaves earlier logits unchanged") {
    Sequence changed = tokens;
    changed.back() = (changed.back() + 1) % 11;
    const Tensor a = forward_model(model, tokens, false).logits;
    const Tensor b = forward_model(model, changed, false).logits;
    const std::size_t V = 11;
    for (std::size_t i = 0; i < (tokens.size() - 1) * V; ++i) CHECK(a[i] == b[i]);
    bool differs = false;
    for (std::size_t i = (tokens.size() - 1) * V; i < a.size(); ++i) differs = differs || a[i] != b[i];
    CHECK(differs);
  }
}

TEST_CASE("out-of-vocabulary tokens are reported with their position") {
  const Model model = init_model(small_config());
  const Sequence tokens = {1, 2, 11, 3};
  try {
    forward_model(model, tokens, false);
    FAIL("expected error");
  } catch (const Error& e) {
    CHECK(std::string(e.what()).find("position 2") != std::string::npos);
  }
}

TEST_CASE("trace is returned only when requested and has the documented shapes") {
  const Model model = init_model(small_config());
  const Sequence tokens = {1, 2, 3, 4, 5};
  CHECK_FALSE(forward_model(model, tokens, false).trace.has_value());
  const auto out = forward_model(model, tokens, true);
  REQUIRE(out.trace.has_value());
  const auto& tr = *out.trace;
  CHECK(tr.length == 5);
  REQUIRE(tr.layers.size() == 2);
  CHECK(tr.layers[0].x.shape() == Shape{5, 12});
  CHECK(tr.layers[0].h.shape() == Shape{5, 12, 4});
  CHECK(tr.layers[0].delta.shape() == Shape{5, 12});
  CHECK(tr.layers[0].scan_out.shape() == Shape{5, 12});
  CHECK(tr.layers[0].mixer_out.shape() == Shape{5, 8});
  // every transition lies strictly inside (0, 1) at these scales
  for (const auto& layer : tr.layers) {
    const auto d = discretize(layer.delta, model.layers[0].A_log, layer.B);
    for (double v : d.a_bar.data()) {
      CHECK(v > 0.0);
      CHECK(v < 1.0);
    }
  }
}

TEST_CASE("trace hidden states reproduce the scan output") {
  const Model model = init_model(small_config(5));
  const Sequence tokens = {3, 1, 4, 1, 5, 9, 2, 6};
  const auto tr = *forward_model(model, tokens, true).trace;
  for (std::size_t l = 0; l < tr.layers.size(); ++l) {
    const auto& L = tr.layers[l];
    const auto scan = ssm_scan(model.layers[l], L.x);
    CHECK(max_abs_difference(scan.y, L.y_scan) == 0.0);
    CHECK(max_abs_difference(scan.h, L.h) == 0.0);
  }
}

TEST_CASE("checkpoint round trip is bit-exact") {
  for (Arch arch : {Arch::kBaseline, Arch::kStable}) {
    ModelConfig c = small_config(7);
    c.arch = arch;
    if (arch == Arch::kStable) c.n_layers = 8;
    const Model model = init_model(c);
    const auto bytes = serialize_model(model);
    CHECK(std::string(bytes.begin(), bytes.begin() + 5) == "SSMB1");
    const Model back = deserialize_model(bytes);
    CHECK(back.config == model.config);
    CHECK(serialize_model(back) == bytes);
    const Sequence tokens = {1, 2, 3};
    CHECK(forward_model(back, tokens, false).logits == forward_model(model, tokens, false).logits);
  }
}

TEST_CASE("checkpoint rejects corrupt input") {
  const Model model = init_model(small_config());
  auto bytes = serialize_model(model);
  auto truncated = bytes;
  truncated.resize(bytes.size() - 3);
  CHECK_THROWS_AS(deserialize_model(truncated), Error);
  bytes[0] = 'X';
  CHECK_THROWS_AS(deserialize_model(bytes), Error);
}
