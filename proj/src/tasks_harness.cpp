#include "ssmlab/tasks_harness.hpp"

#include <algorithm>
#include <cmath>
#include <istream>
#include <limits>
#include <ostream>

#include "json.hpp"

namespace ssmlab {

const char* task_name(TaskKind kind) {
  switch (kind) {
    case TaskKind::kCopy: return "copy";
    case TaskKind::kNeedle: return "needle";
    case TaskKind::kCharLm: return "charlm";
  }
  return "?";
}

TaskKind parse_task(const std::string& name) {
  if (name == "copy") return TaskKind::kCopy;
  if (name == "needle") return TaskKind::kNeedle;
  if (name == "charlm") return TaskKind::kCharLm;
  throw Error("unknown task '" + name + "' (expected copy, needle or charlm)");
}

NeedleVocab needle_vocab(std::size_t V) {
  if (V < 8) throw Error("needle task needs vocab_size >= 8, got " + std::to_string(V));
  const std::size_t rest = V - 1;
  const std::size_t keys = std::max<std::size_t>(1, rest / 4);
  const std::size_t values = std::max<std::size_t>(2, rest / 2);
  NeedleVocab nv;
  nv.query = 0;
  nv.key_begin = 1;
  nv.key_end = static_cast<TokenId>(1 + keys);
  nv.value_begin = nv.key_end;
  nv.value_end = static_cast<TokenId>(nv.value_begin + values);
  nv.filler_begin = nv.value_end;
  nv.filler_end = static_cast<TokenId>(V);
  return nv;
}

void validate_task(const TaskSpec& spec) {
  if (spec.seq_len < 2) throw Error("task: seq_len must be at least 2");
  if (spec.n_train == 0 && spec.n_eval == 0) throw Error("task: n_train and n_eval are both zero");
  switch (spec.kind) {
    case TaskKind::kCopy:
      if (spec.seq_len % 2 != 0) throw Error("copy task: seq_len must be even");
      if (spec.vocab_size < 2) throw Error("copy task: vocab_size must be at least 2");
      break;
    case TaskKind::kNeedle:
      needle_vocab(spec.vocab_size);
      if (spec.seq_len < 6) throw Error("needle task: seq_len must be at least 6 (key, value, filler, query)");
      break;
    case TaskKind::kCharLm:
      if (spec.vocab_size < 8) throw Error("charlm task: vocab_size must be at least 8");
      break;
  }
}

namespace {

TokenId uniform_token(Rng& rng, TokenId begin, TokenId end) {
  return static_cast<TokenId>(begin + rng.index(end - begin));
}

Example copy_example(Rng& rng, const TaskSpec& spec) {
  const std::size_t half = spec.seq_len / 2;
  Example ex;
  ex.tokens.resize(spec.seq_len);
  ex.score_mask.assign(spec.seq_len, 0);
  for (std::size_t i = 0; i < half; ++i) {
    ex.tokens[i] = uniform_token(rng, 0, static_cast<TokenId>(spec.vocab_size));
    ex.tokens[half + i] = ex.tokens[i];
    ex.score_mask[half + i] = 1;
  }
  return ex;
}

Example needle_example(Rng& rng, const TaskSpec& spec) {
  const NeedleVocab nv = needle_vocab(spec.vocab_size);
  const std::size_t T = spec.seq_len;
  Example ex;
  ex.tokens.resize(T);
  ex.score_mask.assign(T, 0);
  for (std::size_t i = 0; i + 3 < T; ++i) ex.tokens[i] = uniform_token(rng, nv.filler_begin, nv.filler_end);
  const TokenId key = uniform_token(rng, nv.key_begin, nv.key_end);
  const TokenId value = uniform_token(rng, nv.value_begin, nv.value_end);
  const std::size_t pos = rng.index(T - 4);  // key at pos, value at pos + 1 <= T - 4
  ex.tokens[pos] = key;
  ex.tokens[pos + 1] = value;
  ex.tokens[T - 3] = nv.query;
  ex.tokens[T - 2] = key;
  ex.tokens[T - 1] = value;
  ex.score_mask[T - 1] = 1;
  return ex;
}

/// Seeded toy language: a lexicon of letter strings, sentences
/// "subject verb object." and fixed subject -> (verb, object) facts.
struct CharGrammar {
  static constexpr TokenId kSpace = 0;
  static constexpr TokenId kStop = 1;
  std::vector<Sequence> subjects, verbs, objects;
  std::vector<std::size_t> fact_verb, fact_object;
  double fact_rate = 0.5;

  CharGrammar(std::size_t vocab, std::uint64_t seed) {
    Rng rng(seed ^ 0x5eedf00dULL);
    auto word = [&] {
      Sequence w(2 + rng.index(3));
      for (auto& c : w) c = uniform_token(rng, 2, static_cast<TokenId>(vocab));
      return w;
    };
    for (int i = 0; i < 8; ++i) subjects.push_back(word());
    for (int i = 0; i < 4; ++i) verbs.push_back(word());
    for (int i = 0; i < 12; ++i) objects.push_back(word());
    for (std::size_t i = 0; i < subjects.size(); ++i) {
      fact_verb.push_back(rng.index(verbs.size()));
      fact_object.push_back(rng.index(objects.size()));
    }
  }

  void sentence(Rng& rng, Sequence& out) const {
    const std::size_t s = rng.index(subjects.size());
    std::size_t v, o;
    if (rng.bernoulli(fact_rate)) {
      v = fact_verb[s];
      o = fact_object[s];
    } else {
      v = rng.index(verbs.size());
      o = rng.index(objects.size());
    }
    auto put = [&](const Sequence& w) { out.insert(out.end(), w.begin(), w.end()); };
    put(subjects[s]);
    out.push_back(kSpace);
    put(verbs[v]);
    out.push_back(kSpace);
    put(objects[o]);
    out.push_back(kStop);
    out.push_back(kSpace);
  }
};

Example charlm_example(Rng& rng, const TaskSpec& spec, const CharGrammar& grammar) {
  Example ex;
  while (ex.tokens.size() < spec.seq_len) grammar.sentence(rng, ex.tokens);
  ex.tokens.resize(spec.seq_len);
  ex.score_mask.assign(spec.seq_len, 1);
  ex.score_mask[0] = 0;
  return ex;
}

}  // namespace

Dataset generate_task(const TaskSpec& spec) {
  validate_task(spec);
  Rng rng(spec.seed);
  const CharGrammar grammar(std::max<std::size_t>(spec.vocab_size, 8), spec.seed);
  auto make = [&] {
    switch (spec.kind) {
      case TaskKind::kCopy: return copy_example(rng, spec);
      case TaskKind::kNeedle: return needle_example(rng, spec);
      case TaskKind::kCharLm: return charlm_example(rng, spec, grammar);
    }
    throw Error("generate_task: unknown task kind");
  };
  Dataset d;
  for (std::size_t i = 0; i < spec.n_train; ++i) d.train.push_back(make());
  for (std::size_t i = 0; i < spec.n_eval; ++i) d.eval.push_back(make());
  return d;
}

void write_examples(std::ostream& out, std::span<const Example> examples) {
  for (const auto& ex : examples) {
    nlohmann::json j;
    j["tokens"] = ex.tokens;
    j["score_mask"] = effective_mask(ex);
    out << j.dump() << '\n';
  }
}

std::vector<Example> read_examples(std::istream& in) {
  std::vector<Example> out;
  std::string line;
  std::size_t line_no = 0;
  while (std::getline(in, line)) {
    ++line_no;
    if (line.find_first_not_of(" \t\r") == std::string::npos) continue;
    try {
      const auto j = nlohmann::json::parse(line);
      for (const auto& [key, value] : j.items()) {
        if (key != "tokens" && key != "score_mask") throw Error("unexpected key '" + key + "'");
      }
      Example ex;
      ex.tokens = j.at("tokens").get<Sequence>();
      if (j.contains("score_mask")) {
        for (int m : j.at("score_mask").get<std::vector<int>>()) {
          if (m != 0 && m != 1) throw Error("score_mask entries must be 0 or 1");
          ex.score_mask.push_back(static_cast<std::uint8_t>(m));
        }
      }
      effective_mask(ex);
      out.push_back(std::move(ex));
    } catch (const nlohmann::json::exception& e) {
      throw Error("examples line " + std::to_string(line_no) + ": " + e.what());
    } catch (const Error& e) {
      throw Error("examples line " + std::to_string(line_no) + ": " + e.what());
    }
  }
  return out;
}

std::vector<std::pair<std::string, Tensor*>> trainable_parameters(Model& model) {
  std::vector<std::pair<std::string, Tensor*>> out;
  for (auto& [name, t] : named_parameters(model)) {
    if (name.size() >= 11 && name.compare(name.size() - 11, 11, "lambda_comp") == 0) continue;
    out.emplace_back(name, t);
  }
  return out;
}

namespace {

void train_step(Model& model, const std::vector<std::pair<std::string, Tensor*>>& params,
                const std::vector<const Example*>& usable, const TrainConfig& config, Rng& rng,
                TrainResult& result) {
  {
    ModelGraph g;
    std::vector<Var> leaves;
    for (const auto& [name, t] : params) leaves.push_back(g.bind(*t));
    Var total;
    for (std::size_t b = 0; b < config.batch_size; ++b) {
      const Example& ex = *usable[rng.index(usable.size())];
      const auto mask = effective_mask(ex);
      Var nll = sequence_nll(g, model, ex.tokens, mask);
      total = b == 0 ? nll : total + nll;
    }
    Var loss = scale(total, 1.0 / static_cast<double>(config.batch_size));
    const double value = loss.value().item();
    if (!std::isfinite(value)) throw Error("loss diverged");
    result.loss_curve.push_back(value);
    const Gradients grads = gradient(g.tape(), loss, leaves);
    double sq = 0.0;
    for (const Var& v : leaves)
      for (double x : grads.at(v.id()).data()) sq += x * x;
    const double norm = std::sqrt(sq);
    if (!std::isfinite(norm)) throw Error("gradient diverged");
    const double factor = norm > config.clip_norm ? config.clip_norm / norm : 1.0;
    for (std::size_t i = 0; i < params.size(); ++i) {
      const Tensor& gr = grads.at(leaves[i].id());
      auto& w = params[i].second->storage();
      for (std::size_t k = 0; k < w.size(); ++k) w[k] -= config.lr * factor * gr[k];
    }
  }
}

}  // namespace

TrainResult train(Model& model, std::span<const Example> data, const TrainConfig& config) {
  std::vector<const Example*> usable;
  for (const auto& ex : data) {
    const auto mask = effective_mask(ex);
    if (std::any_of(mask.begin() + std::min<std::size_t>(1, mask.size()), mask.end(),
                    [](std::uint8_t m) { return m != 0; })) {
      check_tokens(model.config, ex.tokens);
      usable.push_back(&ex);
    }
  }
  if (usable.empty()) throw Error("train: no example has a scored position");
  if (config.batch_size == 0) throw Error("train: batch_size must be positive");
  const auto params = trainable_parameters(model);
  Rng rng(config.seed);
  TrainResult result;
  for (std::size_t step = 0; step < config.steps; ++step) {
    try {
      train_step(model, params, usable, config, rng, result);
    } catch (const Error& e) {
      throw Error("train: step " + std::to_string(step) + ": " + e.what());
    }
  }
  return result;
}


std::vector<double> windowed_means(std::span<const double> values, std::size_t window) {
  if (window == 0) throw Error("windowed_means: window must be positive");
  std::vector<double> out;
  for (std::size_t start = 0; start + window <= values.size(); start += window) {
    double s = 0.0;
    for (std::size_t i = start; i < start + window; ++i) s += values[i];
    out.push_back(s / static_cast<double>(window));
  }
  return out;
}

EvalReport evaluate(const LogitsFn& logits_fn, std::span<const Example> examples) {
  EvalReport r;
  std::size_t max_len = 0;
  for (const auto& ex : examples) max_len = std::max(max_len, ex.tokens.size());
  std::vector<std::size_t> pos_total(max_len, 0), pos_correct(max_len, 0);
  std::size_t correct = 0;
  double nll = 0.0;
  for (const auto& ex : examples) {
    const auto mask = effective_mask(ex);
    bool any = false;
    for (std::size_t j = 1; j < mask.size(); ++j) any = any || mask[j];
    if (!any) continue;
    const Tensor logits = logits_fn(ex.tokens);
    for (std::size_t j = 1; j < ex.tokens.size(); ++j) {
      if (!mask[j]) continue;
      const auto row = logits.row(j - 1);
      const double m = *std::max_element(row.begin(), row.end());
      double z = 0.0;
      for (double v : row) z += std::exp(v - m);
      nll += -(row[ex.tokens[j]] - m - std::log(z));
      const bool hit = static_cast<TokenId>(std::max_element(row.begin(), row.end()) - row.begin()) == ex.tokens[j];
      correct += hit ? 1 : 0;
      ++pos_total[j];
      pos_correct[j] += hit ? 1 : 0;
      ++r.scored;
    }
  }
  if (r.scored == 0) throw Error("evaluate: no scored positions");
  r.top1 = static_cast<double>(correct) / static_cast<double>(r.scored);
  r.mean_nll = nll / static_cast<double>(r.scored);
  r.perplexity = std::exp(r.mean_nll);
  r.per_position.resize(max_len);
  for (std::size_t j = 0; j < max_len; ++j) {
    r.per_position[j] = pos_total[j] == 0 ? std::numeric_limits<double>::quiet_NaN()
                                          : static_cast<double>(pos_correct[j]) / static_cast<double>(pos_total[j]);
  }
  return r;
}

EvalReport evaluate(const Model& model, std::span<const Example> examples, const ActivationHook& hook) {
  return evaluate([&](const Sequence& tokens) { return forward_model(model, tokens, false, hook).logits; },
                  examples);
}

PplChange perturb_ppl(const Model& model, std::size_t layer, std::span<const std::size_t> dims,
                      std::span<const Example> examples, HookSite site) {
  if (layer >= model.config.n_layers) {
    throw Error("perturb_ppl: layer " + std::to_string(layer) + " out of range");
  }
  Tensor factors(Shape{site_width(model.config, site)}, 1.0);
  for (std::size_t d : dims) {
    if (d >= factors.size()) throw Error("perturb_ppl: dimension " + std::to_string(d) + " out of range");
    factors[d] = 0.0;
  }
  PplChange c;
  c.before = evaluate(model, examples).perplexity;
  c.after = dims.empty() ? c.before
                         : evaluate(model, examples, scale_dims_hook(layer, site, factors)).perplexity;
  return c;
}

}  // namespace ssmlab
