#include <chrono>
#include <limits>
#include <cmath>
#include <set>
#include <sstream>

#include "doctest.h"
#include "ssmlab/delta_sensitivity.hpp"
#include "ssmlab/steering.hpp"
#include "ssmlab/subspace_analytics.hpp"
#include "ssmlab/tasks_harness.hpp"

using namespace ssmlab;

namespace {

ModelConfig toy_config(std::size_t vocab, std::uint64_t seed = 1, std::size_t layers = 2) {
  ModelConfig c;
  c.vocab_size = vocab;
  c.d_model = 8;
  c.d_inner = 12;
  c.d_state = 4;
  c.d_conv = 3;
  c.n_layers = layers;
  c.seed = seed;
  return c;
}

TaskSpec small_spec(TaskKind kind, std::uint64_t seed = 3) {
  TaskSpec s;
  s.kind = kind;
  s.vocab_size = 12;
  s.seq_len = 16;
  s.n_train = 40;
  s.n_eval = 20;
  s.seed = seed;
  return s;
}

std::size_t scored_count(const Example& ex) {
  const auto m = effective_mask(ex);
  std::size_t n = 0;
  for (std::size_t j = 1; j < m.size(); ++j) n += m[j] ? 1 : 0;
  return n;
}

}  // namespace

TEST_CASE("task names round-trip") {
  for (TaskKind k : {TaskKind::kCopy, TaskKind::kNeedle, TaskKind::kCharLm})
    CHECK(parse_task(task_name(k)) == k);
  CHECK_THROWS_AS(parse_task("sort"), Error);
}

TEST_CASE("copy task: second half repeats the first and only it is scored") {
  const Dataset d = generate_task(small_spec(TaskKind::kCopy));
  REQUIRE(d.train.size() == 40);
  REQUIRE(d.eval.size() == 20);
  for (const auto& ex : d.train) {
    REQUIRE(ex.tokens.size() == 16);
    for (std::size_t i = 0; i < 8; ++i) {
      CHECK(ex.tokens[i + 8] == ex.tokens[i]);
      CHECK(ex.score_mask[i] == 0);
      CHECK(ex.score_mask[i + 8] == 1);
    }
  }
}

TEST_CASE("copy scoring on a hand sequence") {
  // "abab": only positions 2 and 3 are scored; a perfect copier gets both.
  const Example ex{{0, 1, 0, 1}, {0, 0, 1, 1}};
  const LogitsFn copier = [](const Sequence& s) {
    Tensor logits(Shape{s.size(), 2});
    for (std::size_t j = 0; j + 1 < s.size(); ++j) logits.at(j, s[j >= 1 ? j - 1 : 0]) = 50.0;
    // Row j predicts token j + 1 = token j - 1 in an alternating sequence.
    return logits;
  };
  const EvalReport r = evaluate(copier, std::span<const Example>(&ex, 1));
  CHECK(r.scored == 2);
  CHECK(r.top1 == doctest::Approx(1.0));
  CHECK(r.per_position[2] == doctest::Approx(1.0));
  CHECK(std::isnan(r.per_position[1]));
}

TEST_CASE("needle task: the answer appears exactly once in context") {
  TaskSpec spec = small_spec(TaskKind::kNeedle);
  spec.n_train = 200;
  const NeedleVocab nv = needle_vocab(spec.vocab_size);
  const Dataset d = generate_task(spec);
  std::set<std::size_t> positions;
  for (const auto& ex : d.train) {
    const std::size_t T = ex.tokens.size();
    CHECK(ex.tokens[T - 3] == nv.query);
    CHECK(scored_count(ex) == 1);
    CHECK(ex.score_mask[T - 1] == 1);
    const TokenId key = ex.tokens[T - 2];
    const TokenId value = ex.tokens[T - 1];
    CHECK(key >= nv.key_begin);
    CHECK(key < nv.key_end);
    CHECK(value >= nv.value_begin);
    CHECK(value < nv.value_end);
    std::size_t value_hits = 0, key_hits = 0, query_hits = 0;
    for (std::size_t i = 0; i + 3 < T; ++i) {
      value_hits += ex.tokens[i] == value;
      key_hits += ex.tokens[i] == key;
      query_hits += ex.tokens[i] == nv.query;
      if (ex.tokens[i] == key) {
        CHECK(ex.tokens[i + 1] == value);
        positions.insert(i);
      }
    }
    CHECK(value_hits == 1);
    CHECK(key_hits == 1);
    CHECK(query_hits == 0);
  }
  CHECK(positions.size() > 5);  // needle depth varies
}

TEST_CASE("needle vocabulary partitions the token ids") {
  for (std::size_t V = 8; V <= 64; ++V) {
    const NeedleVocab nv = needle_vocab(V);
    CHECK(nv.key_begin == 1);
    CHECK(nv.key_end == nv.value_begin);
    CHECK(nv.value_end == nv.filler_begin);
    CHECK(nv.filler_end == V);
    CHECK(nv.key_end > nv.key_begin);
    CHECK(nv.value_end - nv.value_begin >= 2);
    CHECK(nv.filler_end > nv.filler_begin);
  }
  CHECK_THROWS_AS(needle_vocab(7), Error);
  TaskSpec short_needle = small_spec(TaskKind::kNeedle);
  short_needle.seq_len = 5;
  CHECK_THROWS_AS(generate_task(short_needle), Error);
  TaskSpec odd_copy = small_spec(TaskKind::kCopy);
  odd_copy.seq_len = 15;
  CHECK_THROWS_AS(generate_task(odd_copy), Error);
}

TEST_CASE("charlm task: sentences end in a period and facts recur") {
  TaskSpec spec = small_spec(TaskKind::kCharLm);
  spec.seq_len = 48;
  const Dataset d = generate_task(spec);
  std::size_t periods = 0;
  for (const auto& ex : d.train) {
    CHECK(ex.tokens.size() == 48);
    CHECK(ex.score_mask[0] == 0);
    CHECK(scored_count(ex) == 47);
    for (TokenId t : ex.tokens) {
      CHECK(t < spec.vocab_size);
      periods += t == 1;
    }
  }
  CHECK(periods > d.train.size());
}

TEST_CASE("generation is deterministic in the seed") {
  for (TaskKind k : {TaskKind::kCopy, TaskKind::kNeedle, TaskKind::kCharLm}) {
    const Dataset a = generate_task(small_spec(k, 9));
    const Dataset b = generate_task(small_spec(k, 9));
    const Dataset c = generate_task(small_spec(k, 10));
    bool same = true, differs = false;
    for (std::size_t i = 0; i < a.train.size(); ++i) {
      same = same && a.train[i].tokens == b.train[i].tokens && a.train[i].score_mask == b.train[i].score_mask;
      differs = differs || a.train[i].tokens != c.train[i].tokens;
    }
    CHECK(same);
    CHECK(differs);
  }
}

TEST_CASE("NDJSON round trip and rejection of bad lines") {
  const Dataset d = generate_task(small_spec(TaskKind::kNeedle));
  std::stringstream ss;
  write_examples(ss, d.eval);
  const auto back = read_examples(ss);
  REQUIRE(back.size() == d.eval.size());
  for (std::size_t i = 0; i < back.size(); ++i) {
    CHECK(back[i].tokens == d.eval[i].tokens);
    CHECK(back[i].score_mask == d.eval[i].score_mask);
  }
  std::stringstream defaulted("{\"tokens\": [1, 2, 3]}\n\n");
  const auto ex = read_examples(defaulted);
  REQUIRE(ex.size() == 1);
  CHECK(scored_count(ex[0]) == 2);
  std::stringstream bad_key("{\"tokens\": [1], \"label\": 2}\n");
  CHECK_THROWS_AS(read_examples(bad_key), Error);
  std::stringstream bad_json("{\"tokens\": [1,\n");
  CHECK_THROWS_AS(read_examples(bad_json), Error);
  std::stringstream bad_mask("{\"tokens\": [1, 2], \"score_mask\": [0, 2]}\n");
  CHECK_THROWS_AS(read_examples(bad_mask), Error);
}

TEST_CASE("perplexity of a uniform predictor equals the vocabulary size") {
  const std::size_t V = 12;
  Model model = init_model(toy_config(V));
  model.head = Tensor(model.head.shape(), 0.0);
  const Dataset d = generate_task(small_spec(TaskKind::kCopy));
  const EvalReport r = evaluate(model, d.eval);
  CHECK(r.perplexity == doctest::Approx(static_cast<double>(V)).epsilon(1e-12));
  CHECK(r.mean_nll == doctest::Approx(std::log(static_cast<double>(V))).epsilon(1e-12));
  // Ties go to token 0, so top-1 is the frequency of token 0 among targets.
  std::size_t zeros = 0;
  for (const auto& ex : d.eval)
    for (std::size_t j = 8; j < 16; ++j) zeros += ex.tokens[j] == 0;
  CHECK(r.top1 == doctest::Approx(static_cast<double>(zeros) / static_cast<double>(r.scored)));
  CHECK(r.top1 < 0.25);
}

TEST_CASE("evaluation invariants") {
  const Dataset d = generate_task(small_spec(TaskKind::kCopy));
  const Model model = init_model(toy_config(12, 4));
  const EvalReport r = evaluate(model, d.eval);
  CHECK(r.perplexity >= 1.0);
  CHECK(std::exp(r.mean_nll) == doctest::Approx(r.perplexity).epsilon(1e-10));
  CHECK(r.scored == d.eval.size() * 8);
  std::vector<Example> reversed(d.eval.rbegin(), d.eval.rend());
  const EvalReport rr = evaluate(model, reversed);
  CHECK(rr.top1 == r.top1);
  CHECK(rr.mean_nll == doctest::Approx(r.mean_nll).epsilon(1e-12));

  // An oracle that looks up the true continuation scores perfectly.
  const LogitsFn oracle = [&](const Sequence& s) {
    Tensor logits(Shape{s.size(), 12});
    for (std::size_t j = 0; j < s.size(); ++j) {
      const std::size_t half = s.size() / 2;
      if (j + 1 >= half && j + 1 < s.size()) logits.at(j, s[j + 1 - half]) = 30.0;
    }
    return logits;
  };
  const EvalReport perfect = evaluate(oracle, d.eval);
  CHECK(perfect.top1 == 1.0);
  CHECK(perfect.perplexity < 1.0 + 1e-9);
  CHECK(perfect.perplexity >= 1.0);

  const std::vector<Example> unscored{Example{{1, 2}, {0, 0}}};
  CHECK_THROWS_AS(evaluate(model, unscored), Error);
}

TEST_CASE("windowed means") {
  const std::vector<double> v{1, 2, 3, 4, 5, 6, 7};
  CHECK(windowed_means(v, 2) == std::vector<double>{1.5, 3.5, 5.5});
  CHECK(windowed_means(v, 7) == std::vector<double>{4.0});
  CHECK(windowed_means(v, 8).empty());
  CHECK_THROWS_AS(windowed_means(v, 0), Error);
}

TEST_CASE("training with zero learning rate leaves the model unchanged") {
  const Dataset d = generate_task(small_spec(TaskKind::kCopy));
  Model model = init_model(toy_config(12, 5));
  const Model before = model;
  TrainConfig cfg;
  cfg.steps = 5;
  cfg.lr = 0.0;
  const TrainResult r = train(model, d.train, cfg);
  CHECK(r.loss_curve.size() == 5);
  const auto a = named_parameters(before);
  const auto b = named_parameters(static_cast<const Model&>(model));
  for (std::size_t i = 0; i < a.size(); ++i) CHECK(*a[i].second == *b[i].second);
}

TEST_CASE("trainable parameters skip lambda_comp") {
  ModelConfig c = toy_config(12);
  c.arch = Arch::kStable;
  c.n_layers = 8;
  Model model = init_model(c);
  const auto all = named_parameters(model);
  const auto trainable = trainable_parameters(model);
  std::size_t lambdas = 0;
  for (const auto& [name, t] : all) lambdas += name.find("lambda_comp") != std::string::npos;
  CHECK(lambdas > 0);
  CHECK(trainable.size() + lambdas == all.size());
  for (const auto& [name, t] : trainable) CHECK(name.find("lambda_comp") == std::string::npos);
}

TEST_CASE("training reduces copy loss and is reproducible") {
  TaskSpec spec = small_spec(TaskKind::kCopy);
  spec.vocab_size = 6;
  spec.seq_len = 12;
  spec.n_train = 64;
  const Dataset d = generate_task(spec);
  TrainConfig cfg;
  cfg.steps = 120;
  cfg.batch_size = 4;
  cfg.seed = 7;
  Model a = init_model(toy_config(6, 2));
  Model b = init_model(toy_config(6, 2));
  const auto t0 = std::chrono::steady_clock::now();
  const TrainResult ra = train(a, d.train, cfg);
  const double secs = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
  MESSAGE("120 steps took " << secs << " s");
  const TrainResult rb = train(b, d.train, cfg);
  CHECK(ra.loss_curve == rb.loss_curve);
  const auto pa = named_parameters(static_cast<const Model&>(a));
  const auto pb = named_parameters(static_cast<const Model&>(b));
  for (std::size_t i = 0; i < pa.size(); ++i) CHECK(*pa[i].second == *pb[i].second);
  const auto w = windowed_means(ra.loss_curve, 20);
  CHECK(w.back() < w.front());
  for (double v : ra.loss_curve) CHECK(std::isfinite(v));
}

TEST_CASE("training rejects unusable data and divergence is reported with the step") {
  Model model = init_model(toy_config(12));
  const std::vector<Example> unscored{Example{{1, 2, 3}, {0, 0, 0}}};
  CHECK_THROWS_AS(train(model, unscored, TrainConfig{}), Error);
  const std::vector<Example> oov{Example{{1, 40, 3}, {}}};
  CHECK_THROWS_AS(train(model, oov, TrainConfig{}), Error);

  const Dataset d = generate_task(small_spec(TaskKind::kCopy));
  model.head = Tensor(model.head.shape(), std::numeric_limits<double>::quiet_NaN());
  TrainConfig cfg;
  cfg.steps = 3;
  try {
    train(model, d.train, cfg);
    FAIL("expected divergence");
  } catch (const Error& e) {
    CHECK(std::string(e.what()).find("step 0") != std::string::npos);
  }
}

TEST_CASE("perturb_ppl: empty and dead dimensions leave perplexity unchanged") {
  Model model = init_model(toy_config(12, 6));
  const Dataset d = generate_task(small_spec(TaskKind::kCopy));
  const PplChange none = perturb_ppl(model, 0, {}, d.eval);
  CHECK(none.after == none.before);
  // Zero the gate column of dim 3 so the gated scan output is always 0 there.
  for (std::size_t r = 0; r < model.layers[1].in_proj.dim(0); ++r) model.layers[1].in_proj.at(r, 12 + 3) = 0.0;
  const std::vector<std::size_t> dead{3};
  const PplChange c = perturb_ppl(model, 1, dead, d.eval);
  CHECK(c.after == doctest::Approx(c.before).epsilon(1e-12));
  const std::vector<std::size_t> all{0, 1, 2, 4, 5, 6};
  const PplChange moved = perturb_ppl(model, 1, all, d.eval);
  CHECK(moved.after != moved.before);
  const std::vector<std::size_t> out_of_range{12};
  CHECK_THROWS_AS(perturb_ppl(model, 1, out_of_range, d.eval), Error);
  CHECK_THROWS_AS(perturb_ppl(model, 2, dead, d.eval), Error);
}

TEST_CASE("on a trained model, ablation and steering behave consistently") {
  TaskSpec spec = small_spec(TaskKind::kCopy);
  spec.vocab_size = 6;
  spec.seq_len = 12;
  spec.n_train = 64;
  const Dataset d = generate_task(spec);
  ModelConfig mc = toy_config(6, 8);
  mc.d_model = 16;
  mc.d_inner = 32;
  mc.d_state = 8;
  mc.d_conv = 4;
  Model model = init_model(mc);
  TrainConfig cfg;
  cfg.steps = 1500;
  train(model, d.train, cfg);
  const double trained = evaluate(model, d.eval).top1;
  MESSAGE("trained copy accuracy " << trained);
  REQUIRE(trained > 0.9);

  const std::size_t layer = 1;
  std::vector<std::size_t> all(32);
  for (std::size_t i = 0; i < all.size(); ++i) all[i] = i;
  const double full = ablate_and_score(model, layer, all, d.eval);
  double worst_single = -100.0;
  for (std::size_t dim : all) {
    const std::vector<std::size_t> one{dim};
    worst_single = std::max(worst_single, ablate_and_score(model, layer, one, d.eval));
  }
  MESSAGE("accuracy drop: all dims " << full << " pp, worst single " << worst_single << " pp");
  CHECK(full >= worst_single);
  CHECK(perturb_ppl(model, layer, all, d.eval).after > perturb_ppl(model, layer, {}, d.eval).after);

  std::vector<Sequence> batch;
  for (const auto& ex : d.eval) batch.push_back(ex.tokens);
  const std::vector<std::size_t> none;
  std::vector<std::size_t> mixer_all(16);
  for (std::size_t i = 0; i < mixer_all.size(); ++i) mixer_all[i] = i;
  CHECK(post_ablation_kl(model, layer, mixer_all, batch) > post_ablation_kl(model, layer, none, batch));
}
