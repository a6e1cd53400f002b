#include "ssmlab/cli_reports.hpp"

#include <openssl/evp.h>

#include <algorithm>
#include <charconv>
#include <cmath>
#include <cstring>
#include <chrono>
#include <ctime>
#include <fstream>
#include <iomanip>
#include <ostream>
#include <set>
#include <sstream>

#include "ssmlab/checkpoint.hpp"
#include "ssmlab/delta_sensitivity.hpp"
#include "ssmlab/sae_probe.hpp"

namespace ssmlab::cli {

namespace fs = std::filesystem;
using nlohmann::json;

const std::vector<std::string>& commands() {
  static const std::vector<std::string> names{"train", "analyze", "ablate", "steer",
                                              "sae",   "dump-attention", "compare"};
  return names;
}

std::string format_number(double value) {
  if (std::isnan(value)) return "nan";
  char buf[64];
  const auto res = std::to_chars(buf, buf + sizeof buf, value);
  return std::string(buf, res.ptr);
}

std::string sha256_hex(const std::string& bytes) {
  unsigned char digest[EVP_MAX_MD_SIZE];
  unsigned int len = 0;
  if (EVP_Digest(bytes.data(), bytes.size(), digest, &len, EVP_sha256(), nullptr) != 1) {
    throw Error("sha256: digest failed");
  }
  std::ostringstream out;
  for (unsigned int i = 0; i < len; ++i) out << std::hex << std::setw(2) << std::setfill('0') << int(digest[i]);
  return out.str();
}

std::string sha256_file(const fs::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw Error("cannot read " + path.string());
  std::ostringstream ss;
  ss << in.rdbuf();
  return sha256_hex(ss.str());
}

void set_override(json& config, const std::string& assignment) {
  const auto eq = assignment.find('=');
  if (eq == std::string::npos || eq == 0) {
    throw ConfigError("override '" + assignment + "' is not of the form key=value");
  }
  const std::string key = assignment.substr(0, eq);
  const std::string text = assignment.substr(eq + 1);
  json value = json::parse(text, nullptr, false);
  if (value.is_discarded()) value = text;
  json* node = &config;
  std::size_t start = 0;
  while (true) {
    const auto dot = key.find('.', start);
    const std::string part = key.substr(start, dot == std::string::npos ? std::string::npos : dot - start);
    if (part.empty()) throw ConfigError("override key '" + key + "' has an empty component");
    if (!node->is_object()) {
      if (!node->is_null()) throw ConfigError("override key '" + key + "' descends into a non-object");
      *node = json::object();
    }
    if (dot == std::string::npos) {
      (*node)[part] = value;
      return;
    }
    node = &(*node)[part];
    start = dot + 1;
  }
}

namespace {

bool is_non_negative_integer(const json& v) {
  return v.is_number_unsigned() || (v.is_number_integer() && v.get<std::int64_t>() >= 0);
}

// ---- config reading -------------------------------------------------------

void check_keys(const json& obj, std::initializer_list<const char*> allowed, const std::string& where) {
  if (!obj.is_object()) throw ConfigError(where + ": expected an object");
  for (const auto& [key, value] : obj.items()) {
    if (std::none_of(allowed.begin(), allowed.end(), [&](const char* a) { return key == a; })) {
      throw ConfigError(where + ": unknown key '" + key + "'");
    }
  }
}

std::string path_of(const std::string& where, const char* key) {
  return where.empty() ? std::string(key) : where + "." + key;
}

void read_size(const json& obj, const char* key, std::size_t& out, const std::string& where) {
  if (!obj.contains(key)) return;
  const json& v = obj.at(key);
  if (!is_non_negative_integer(v)) throw ConfigError(path_of(where, key) + ": expected a non-negative integer");
  out = v.get<std::size_t>();
}

void read_u64(const json& obj, const char* key, std::uint64_t& out, const std::string& where) {
  if (!obj.contains(key)) return;
  const json& v = obj.at(key);
  if (!is_non_negative_integer(v)) throw ConfigError(path_of(where, key) + ": expected a non-negative integer");
  out = v.get<std::uint64_t>();
}

void read_double(const json& obj, const char* key, double& out, const std::string& where) {
  if (!obj.contains(key)) return;
  const json& v = obj.at(key);
  if (!v.is_number()) throw ConfigError(path_of(where, key) + ": expected a number");
  out = v.get<double>();
  if (!std::isfinite(out)) throw ConfigError(path_of(where, key) + ": must be finite");
}

std::optional<std::string> read_string(const json& obj, const char* key, const std::string& where) {
  if (!obj.contains(key)) return std::nullopt;
  const json& v = obj.at(key);
  if (!v.is_string()) throw ConfigError(path_of(where, key) + ": expected a string");
  return v.get<std::string>();
}

fs::path resolve(const fs::path& base, const std::string& p) {
  const fs::path path(p);
  return fs::weakly_canonical(path.is_absolute() ? path : base / path);
}

template <class Parse>
auto parse_named(const std::string& where, const std::string& text, Parse parse) {
  try {
    return parse(text);
  } catch (const ConfigError&) {
    throw;
  } catch (const Error& e) {
    throw ConfigError(where + ": " + e.what());
  }
}

AnomalyDirection parse_direction(const std::string& s) {
  if (s == "spike") return AnomalyDirection::kSpike;
  if (s == "dip") return AnomalyDirection::kDip;
  if (s == "either") return AnomalyDirection::kEither;
  throw ConfigError("unknown direction '" + s + "' (expected spike, dip or either)");
}

const char* direction_name(AnomalyDirection d) {
  switch (d) {
    case AnomalyDirection::kSpike: return "spike";
    case AnomalyDirection::kDip: return "dip";
    case AnomalyDirection::kEither: return "either";
  }
  return "?";
}

HeadVariant parse_variant(const std::string& s) {
  if (s == "raw") return HeadVariant::kRaw;
  if (s == "abs") return HeadVariant::kAbs;
  if (s == "both") return HeadVariant::kBoth;
  throw ConfigError("unknown head variant '" + s + "' (expected raw, abs or both)");
}

const char* variant_name(HeadVariant v) {
  switch (v) {
    case HeadVariant::kRaw: return "raw";
    case HeadVariant::kAbs: return "abs";
    case HeadVariant::kBoth: return "both";
  }
  return "?";
}

json model_json(const ModelConfig& c) {
  return {{"vocab_size", c.vocab_size}, {"d_model", c.d_model},     {"d_inner", c.d_inner},
          {"d_state", c.d_state},       {"d_conv", c.d_conv},       {"n_layers", c.n_layers},
          {"dt_rank", c.dt_rank},       {"attn_stride", c.attn_stride}, {"arch", arch_name(c.arch)}};
}

json task_json(const TaskSpec& t) {
  return {{"kind", task_name(t.kind)}, {"seq_len", t.seq_len}, {"n_train", t.n_train}, {"n_eval", t.n_eval}};
}

}  // namespace

RunConfig parse_run_config(const json& j, const fs::path& base_dir, const char* seed_env) {
  check_keys(j, {"command", "seed", "output_dir", "checkpoint", "model", "task", "train", "analysis", "steer",
                 "sae", "inputs"},
             "config");
  RunConfig c;
  c.command = read_string(j, "command", "").value_or("");
  if (c.command.empty()) throw ConfigError("config: missing 'command'");
  if (std::find(commands().begin(), commands().end(), c.command) == commands().end()) {
    throw ConfigError("config: unknown command '" + c.command + "'");
  }
  read_u64(j, "seed", c.seed, "");
  if (seed_env != nullptr && *seed_env != '\0') {
    std::uint64_t v = 0;
    const char* end = seed_env + std::strlen(seed_env);
    const auto res = std::from_chars(seed_env, end, v);
    if (res.ec != std::errc() || res.ptr != end) {
      throw ConfigError("SSMLAB_SEED='" + std::string(seed_env) + "' is not a non-negative integer");
    }
    c.seed = v;
  }
  const auto out = read_string(j, "output_dir", "");
  if (!out || out->empty()) throw ConfigError("config: missing 'output_dir'");
  c.output_dir = resolve(base_dir, *out);
  if (const auto ck = read_string(j, "checkpoint", "")) {
    c.checkpoint = resolve(base_dir, *ck);
    if (c.command != "train" && !fs::is_regular_file(*c.checkpoint)) {
      throw ConfigError("checkpoint " + c.checkpoint->string() + " does not exist");
    }
    if (c.command == "train" && !fs::is_regular_file(*c.checkpoint)) {
      throw ConfigError("checkpoint " + c.checkpoint->string() + " (training start point) does not exist");
    }
  }

  if (j.contains("model")) {
    const json& m = j.at("model");
    check_keys(m, {"vocab_size", "d_model", "d_inner", "d_state", "d_conv", "n_layers", "dt_rank", "attn_stride",
                   "arch"},
               "model");
    read_size(m, "vocab_size", c.model.vocab_size, "model");
    read_size(m, "d_model", c.model.d_model, "model");
    read_size(m, "d_inner", c.model.d_inner, "model");
    read_size(m, "d_state", c.model.d_state, "model");
    read_size(m, "d_conv", c.model.d_conv, "model");
    read_size(m, "n_layers", c.model.n_layers, "model");
    read_size(m, "dt_rank", c.model.dt_rank, "model");
    read_size(m, "attn_stride", c.model.attn_stride, "model");
    if (const auto a = read_string(m, "arch", "model")) c.model.arch = parse_named("model.arch", *a, parse_arch);
  }
  c.model.seed = c.seed;
  try {
    c.model.validate();
  } catch (const Error& e) {
    throw ConfigError(std::string("model: ") + e.what());
  }

  if (j.contains("task")) {
    const json& t = j.at("task");
    check_keys(t, {"kind", "seq_len", "n_train", "n_eval"}, "task");
    if (const auto k = read_string(t, "kind", "task")) c.task.kind = parse_named("task.kind", *k, parse_task);
    read_size(t, "seq_len", c.task.seq_len, "task");
    read_size(t, "n_train", c.task.n_train, "task");
    read_size(t, "n_eval", c.task.n_eval, "task");
  }
  c.task.vocab_size = c.model.vocab_size;
  c.task.seed = c.seed + 1;

  if (j.contains("train")) {
    const json& t = j.at("train");
    check_keys(t, {"steps", "lr", "batch_size", "clip_norm"}, "train");
    read_size(t, "steps", c.train.steps, "train");
    read_double(t, "lr", c.train.lr, "train");
    read_size(t, "batch_size", c.train.batch_size, "train");
    read_double(t, "clip_norm", c.train.clip_norm, "train");
  }
  c.train.seed = c.seed + 2;
  if (c.train.batch_size == 0) throw ConfigError("train.batch_size must be positive");
  if (c.train.lr < 0.0) throw ConfigError("train.lr must be >= 0");
  if (c.train.clip_norm <= 0.0) throw ConfigError("train.clip_norm must be positive");

  if (j.contains("analysis")) {
    const json& a = j.at("analysis");
    check_keys(a, {"layers", "site", "tau", "max_sequences", "theta_spike", "direction", "head_size", "variant",
                   "sequence"},
               "analysis");
    if (a.contains("layers")) {
      const json& l = a.at("layers");
      if (!l.is_array()) throw ConfigError("analysis.layers: expected an array of layer indices");
      for (const auto& v : l) {
        if (!is_non_negative_integer(v)) throw ConfigError("analysis.layers: expected non-negative integers");
        c.analysis.layers.push_back(v.get<std::size_t>());
      }
    }
    if (const auto s = read_string(a, "site", "analysis")) c.analysis.site = parse_named("analysis.site", *s, parse_site);
    read_double(a, "tau", c.analysis.tau, "analysis");
    read_size(a, "max_sequences", c.analysis.max_sequences, "analysis");
    read_double(a, "theta_spike", c.analysis.theta_spike, "analysis");
    if (const auto d = read_string(a, "direction", "analysis")) c.analysis.direction = parse_direction(*d);
    read_size(a, "head_size", c.analysis.head_size, "analysis");
    if (const auto v = read_string(a, "variant", "analysis")) c.analysis.variant = parse_variant(*v);
    read_size(a, "sequence", c.analysis.sequence, "analysis");
  }
  if (c.analysis.tau <= 0.0) throw ConfigError("analysis.tau must be positive");

  if (j.contains("steer")) {
    const json& s = j.at("steer");
    check_keys(s, {"layer", "spec", "grid", "strong", "weak", "tuning_fraction"}, "steer");
    if (s.contains("layer")) {
      std::size_t layer = 0;
      read_size(s, "layer", layer, "steer");
      c.steer.layer = layer;
    }
    if (const auto p = read_string(s, "spec", "steer")) {
      c.steer.spec = resolve(base_dir, *p);
      if (!fs::is_regular_file(*c.steer.spec)) {
        throw ConfigError("steer.spec " + c.steer.spec->string() + " does not exist");
      }
    }
    if (s.contains("grid")) {
      const json& g = s.at("grid");
      if (!g.is_array() || g.empty()) throw ConfigError("steer.grid: expected a non-empty array of numbers");
      c.steer.grid.clear();
      for (const auto& v : g) {
        if (!v.is_number() || !(v.get<double>() > 0.0) || !std::isfinite(v.get<double>())) {
          throw ConfigError("steer.grid: candidates must be finite positive numbers");
        }
        c.steer.grid.push_back(v.get<double>());
      }
    }
    read_double(s, "strong", c.steer.factors.strong, "steer");
    read_double(s, "weak", c.steer.factors.weak, "steer");
    read_double(s, "tuning_fraction", c.steer.tuning_fraction, "steer");
  }
  if (!(c.steer.factors.strong > 0.0) || !(c.steer.factors.weak > 0.0)) {
    throw ConfigError("steer.strong and steer.weak must be positive");
  }
  if (!(c.steer.tuning_fraction > 0.0 && c.steer.tuning_fraction < 1.0)) {
    throw ConfigError("steer.tuning_fraction must be in (0, 1)");
  }

  if (j.contains("sae")) {
    const json& s = j.at("sae");
    check_keys(s, {"layer", "l1_weight", "steps", "lr", "batch_size", "dict_size", "alpha", "dict_iterations"},
               "sae");
    if (s.contains("layer")) {
      std::size_t layer = 0;
      read_size(s, "layer", layer, "sae");
      c.sae.layer = layer;
    }
    read_double(s, "l1_weight", c.sae.l1_weight, "sae");
    read_size(s, "steps", c.sae.steps, "sae");
    read_double(s, "lr", c.sae.lr, "sae");
    read_size(s, "batch_size", c.sae.batch_size, "sae");
    read_size(s, "dict_size", c.sae.dict_size, "sae");
    read_double(s, "alpha", c.sae.alpha, "sae");
    read_size(s, "dict_iterations", c.sae.dict_iterations, "sae");
  }
  if (c.sae.l1_weight < 0.0 || c.sae.alpha < 0.0) throw ConfigError("sae.l1_weight and sae.alpha must be >= 0");
  if (c.sae.batch_size == 0) throw ConfigError("sae.batch_size must be positive");

  if (j.contains("inputs")) {
    const json& in = j.at("inputs");
    if (!in.is_array()) throw ConfigError("inputs: expected an array of run directories");
    for (const auto& v : in) {
      if (!v.is_string()) throw ConfigError("inputs: expected strings");
      c.inputs.push_back(resolve(base_dir, v.get<std::string>()));
      if (!fs::is_regular_file(c.inputs.back() / "metrics.json")) {
        throw ConfigError("inputs: " + c.inputs.back().string() + " has no metrics.json");
      }
    }
  }
  if (c.command == "compare" && c.inputs.empty()) throw ConfigError("compare: 'inputs' lists no run directories");
  if (c.command != "compare" && !c.inputs.empty()) throw ConfigError("'inputs' is only used by compare");
  if (c.command != "compare") {
    try {
      validate_task(c.task);
    } catch (const Error& e) {
      throw ConfigError(std::string("task: ") + e.what());
    }
  }

  json& r = c.resolved;
  r["command"] = c.command;
  r["seed"] = c.seed;
  r["output_dir"] = c.output_dir.string();
  if (c.checkpoint) r["checkpoint"] = c.checkpoint->string();
  r["model"] = model_json(c.model);
  r["task"] = task_json(c.task);
  r["train"] = {{"steps", c.train.steps}, {"lr", c.train.lr}, {"batch_size", c.train.batch_size},
                {"clip_norm", c.train.clip_norm}};
  r["analysis"] = {{"layers", c.analysis.layers},       {"site", site_name(c.analysis.site)},
                   {"tau", c.analysis.tau},             {"max_sequences", c.analysis.max_sequences},
                   {"theta_spike", c.analysis.theta_spike}, {"direction", direction_name(c.analysis.direction)},
                   {"head_size", c.analysis.head_size}, {"variant", variant_name(c.analysis.variant)},
                   {"sequence", c.analysis.sequence}};
  json steer = {{"grid", c.steer.grid},
                {"strong", c.steer.factors.strong},
                {"weak", c.steer.factors.weak},
                {"tuning_fraction", c.steer.tuning_fraction}};
  if (c.steer.layer) steer["layer"] = *c.steer.layer;
  if (c.steer.spec) steer["spec"] = c.steer.spec->string();
  r["steer"] = steer;
  json sae = {{"l1_weight", c.sae.l1_weight}, {"steps", c.sae.steps},           {"lr", c.sae.lr},
              {"batch_size", c.sae.batch_size}, {"dict_size", c.sae.dict_size}, {"alpha", c.sae.alpha},
              {"dict_iterations", c.sae.dict_iterations}};
  if (c.sae.layer) sae["layer"] = *c.sae.layer;
  r["sae"] = sae;
  if (!c.inputs.empty()) {
    r["inputs"] = json::array();
    for (const auto& p : c.inputs) r["inputs"].push_back(p.string());
  }
  return c;
}

namespace {

// ---- run context ----------------------------------------------------------

struct Context {
  const RunConfig& config;
  std::ostream& log;
  std::vector<fs::path> inputs;
  std::vector<std::string> outputs;  // file names inside output_dir

  fs::path out(const std::string& name) { return config.output_dir / name; }

  void write_text(const std::string& name, const std::string& text) {
    std::ofstream f(out(name), std::ios::binary);
    if (!f) throw Error("cannot write " + out(name).string());
    f << text;
    if (!f) throw Error("write failed for " + out(name).string());
    if (std::find(outputs.begin(), outputs.end(), name) == outputs.end()) outputs.push_back(name);
  }

  void write_json(const std::string& name, const json& j) { write_text(name, j.dump(2) + "\n"); }
};

Model load_or_init(Context& ctx) {
  if (ctx.config.checkpoint) {
    ctx.inputs.push_back(*ctx.config.checkpoint);
    Model m = load_checkpoint(*ctx.config.checkpoint);
    return m;
  }
  return init_model(ctx.config.model);
}

/// Task data regenerated against the model's vocabulary.
Dataset task_data(const RunConfig& config, const Model& model) {
  TaskSpec spec = config.task;
  spec.vocab_size = model.config.vocab_size;
  try {
    validate_task(spec);
  } catch (const Error& e) {
    throw ConfigError(std::string("task: ") + e.what());
  }
  return generate_task(spec);
}

std::vector<Example> eval_subset(const RunConfig& config, const Dataset& d) {
  std::vector<Example> out = d.eval;
  if (config.analysis.max_sequences != 0 && out.size() > config.analysis.max_sequences) {
    out.resize(config.analysis.max_sequences);
  }
  if (out.empty()) throw ConfigError("task: the eval split is empty");
  return out;
}

std::vector<Sequence> tokens_of(std::span<const Example> examples) {
  std::vector<Sequence> out;
  for (const auto& e : examples) out.push_back(e.tokens);
  return out;
}

void check_layer(const Model& model, std::size_t layer, const std::string& what) {
  if (layer >= model.config.n_layers) {
    throw ConfigError(what + ": layer " + std::to_string(layer) + " out of range for a " +
                      std::to_string(model.config.n_layers) + "-layer model");
  }
}

std::vector<std::size_t> analysis_layers(const RunConfig& config, const Model& model) {
  std::vector<std::size_t> layers = config.analysis.layers;
  if (layers.empty()) {
    for (std::size_t l = 0; l < model.config.n_layers; ++l) layers.push_back(l);
  }
  std::set<std::size_t> seen;
  for (std::size_t l : layers) {
    check_layer(model, l, "analysis.layers");
    if (!seen.insert(l).second) throw ConfigError("analysis.layers: layer " + std::to_string(l) + " repeated");
  }
  return layers;
}

json eval_row(const std::string& run, const std::string& split, const EvalReport& r) {
  return {{"run", run}, {"split", split}, {"top1", r.top1}, {"perplexity", r.perplexity}, {"scored", r.scored}};
}

json tensor_json(const Tensor& t) { return json(t.data()); }

json spec_json(const SteeringSpec& spec) {
  json factors = json::array();
  for (const auto& [dim, f] : spec.factors) factors.push_back({{"dim", dim}, {"factor", f}});
  return {{"layer", spec.layer}, {"site", site_name(spec.site)}, {"factors", factors}};
}

SteeringSpec read_spec(const fs::path& path) {
  std::ifstream in(path);
  json j = json::parse(in, nullptr, false);
  if (j.is_discarded()) throw ConfigError("steer.spec: " + path.string() + " is not valid JSON");
  try {
    check_keys(j, {"layer", "site", "factors"}, "steering spec");
    SteeringSpec s;
    s.layer = j.at("layer").get<std::size_t>();
    s.site = parse_site(j.at("site").get<std::string>());
    for (const auto& f : j.at("factors")) {
      check_keys(f, {"dim", "factor"}, "steering spec factor");
      if (!s.factors.emplace(f.at("dim").get<std::size_t>(), f.at("factor").get<double>()).second) {
        throw ConfigError("steering spec: dimension repeated");
      }
    }
    return s;
  } catch (const json::exception& e) {
    throw ConfigError("steer.spec: " + std::string(e.what()));
  } catch (const ConfigError&) {
    throw;
  } catch (const Error& e) {
    throw ConfigError("steer.spec: " + std::string(e.what()));
  }
}

std::string csv_row(std::initializer_list<std::string> cells) {
  std::string out;
  for (const auto& c : cells) {
    if (!out.empty()) out += ',';
    out += c;
  }
  return out + "\n";
}

// ---- commands -------------------------------------------------------------

json cmd_train(Context& ctx) {
  Model model = load_or_init(ctx);
  const Dataset data = task_data(ctx.config, model);
  const EvalReport before = evaluate(model, data.eval);
  ctx.log << "training " << ctx.config.train.steps << " steps on " << task_name(ctx.config.task.kind) << "\n";
  const TrainResult r = train(model, data.train, ctx.config.train);
  const EvalReport after = evaluate(model, data.eval);
  save_checkpoint(model, ctx.out("model.ssmb"));
  ctx.outputs.push_back("model.ssmb");
  std::string csv = "step,loss\n";
  for (std::size_t i = 0; i < r.loss_curve.size(); ++i) csv += csv_row({std::to_string(i), format_number(r.loss_curve[i])});
  ctx.write_text("loss_curve.csv", csv);
  const std::size_t window = std::max<std::size_t>(1, std::min<std::size_t>(50, r.loss_curve.size()));
  const auto w = windowed_means(r.loss_curve, window);
  json m = {{"command", "train"},
            {"model", model_json(model.config)},
            {"task", task_json(ctx.config.task)},
            {"steps", r.loss_curve.size()},
            {"loss_window", window},
            {"loss_first_window", w.empty() ? json(nullptr) : json(w.front())},
            {"loss_last_window", w.empty() ? json(nullptr) : json(w.back())},
            {"rows", json::array({eval_row("before_training", "eval", before), eval_row("trained", "eval", after)})}};
  ctx.log << "eval top1 " << before.top1 << " -> " << after.top1 << ", perplexity " << before.perplexity << " -> "
          << after.perplexity << "\n";
  return m;
}

json cmd_analyze(Context& ctx) {
  const Model model = load_or_init(ctx);
  const Dataset data = task_data(ctx.config, model);
  const auto examples = eval_subset(ctx.config, data);
  const auto corpus = tokens_of(examples);
  const auto layers = analysis_layers(ctx.config, model);
  const HookSite site = ctx.config.analysis.site;

  std::vector<std::vector<double>> rows_per_layer(model.config.n_layers);
  std::size_t width = site_width(model.config, site);
  std::size_t total_rows = 0;
  for (const auto& seq : corpus) {
    const auto out = forward_model(model, seq, true);
    for (std::size_t l : layers) {
      const Tensor& a = site_activations(out.trace->layers[l], site);
      rows_per_layer[l].insert(rows_per_layer[l].end(), a.data().begin(), a.data().end());
    }
    total_rows += seq.size();
  }
  std::vector<std::size_t> mixer_dims(model.config.d_model);
  for (std::size_t i = 0; i < mixer_dims.size(); ++i) mixer_dims[i] = i;

  std::vector<MetricBundle> bundles;
  json layer_json = json::array();
  std::string csv = "layer,entropy,effective_rank,variance,cov,grad_norm,kl_post_ablation\n";
  for (std::size_t l : layers) {
    Tensor acts(Shape{total_rows, width});
    std::copy(rows_per_layer[l].begin(), rows_per_layer[l].end(), acts.storage().begin());
    MetricBundle b = layer_metrics(acts, l);
    b.grad_norm = gradient_sensitivity(model, l, corpus);
    b.kl_post_ablation = post_ablation_kl(model, l, mixer_dims, corpus);
    bundles.push_back(b);
    layer_json.push_back({{"layer", l},
                          {"entropy", b.entropy},
                          {"effective_rank", b.effective_rank},
                          {"variance", b.variance},
                          {"cov", b.cov},
                          {"grad_norm", b.grad_norm},
                          {"kl_post_ablation", b.kl_post_ablation}});
    csv += csv_row({std::to_string(l), format_number(b.entropy), format_number(b.effective_rank),
                    format_number(b.variance), format_number(b.cov), format_number(b.grad_norm),
                    format_number(b.kl_post_ablation)});
  }
  ctx.write_text("entropy_per_layer.csv", csv);

  json phases = nullptr;
  const bool all_layers = layers.size() == model.config.n_layers &&
                          std::is_sorted(layers.begin(), layers.end());
  if (all_layers && layers.size() >= 5) {
    const PhaseReport pr = classify_phases(std::span<const MetricBundle>(bundles),
                                           PhaseParams{ctx.config.analysis.theta_spike, ctx.config.analysis.direction});
    json labels = json::array();
    for (const auto& p : pr.phases) {
      labels.push_back({{"begin", p.begin}, {"end", p.end}, {"phase", p.phase}, {"bottleneck", p.bottleneck}});
    }
    phases = {{"bottleneck", pr.bottleneck ? json(*pr.bottleneck) : json(nullptr)},
              {"candidate", pr.candidate},
              {"score", pr.score},
              {"direction", direction_name(ctx.config.analysis.direction)},
              {"phases", labels}};
  }
  return {{"command", "analyze"},
          {"site", site_name(site)},
          {"sequences", corpus.size()},
          {"layers", layer_json},
          {"phase_report", phases}};
}

json report_json(const SensitivityReport& r) {
  json dims = json::array();
  json bins = json::object();
  for (std::size_t c = 0; c < kCategoryCount; ++c) bins[category_name(static_cast<AblationCategory>(c))] = json::array();
  for (std::size_t d : r.sensitive) {
    json entry = {{"dim", d}, {"variance", r.variance[d]}};
    if (r.ablation_delta[d]) {
      entry["delta_pp"] = *r.ablation_delta[d];
      entry["category"] = category_name(*r.category[d]);
      bins[category_name(*r.category[d])].push_back(d);
    }
    dims.push_back(entry);
  }
  return {{"layer", r.layer},
          {"site", site_name(r.site)},
          {"tau", r.tau},
          {"baseline_accuracy", r.baseline_accuracy},
          {"scored_positions", r.scored_positions},
          {"variance", tensor_json(r.variance)},
          {"sensitive", r.sensitive},
          {"dims", dims},
          {"bins", bins}};
}

const char* kSignConvention =
    "delta_pp = 100 * (baseline top-1 accuracy - accuracy with the dimension zeroed); positive means the "
    "dimension helped (accuracy dropped when it was removed)";

json cmd_ablate(Context& ctx) {
  const Model model = load_or_init(ctx);
  const Dataset data = task_data(ctx.config, model);
  const auto examples = eval_subset(ctx.config, data);
  const auto corpus = tokens_of(examples);
  const auto layers = analysis_layers(ctx.config, model);
  json reports = json::array();
  json summary = json::array();
  for (std::size_t l : layers) {
    const SensitivityReport r =
        sensitivity_report(model, l, corpus, examples, SensitivityOptions{ctx.config.analysis.tau, ctx.config.analysis.site});
    reports.push_back(report_json(r));
    const PplChange ppl = perturb_ppl(model, l, r.sensitive, examples, ctx.config.analysis.site);
    summary.push_back({{"layer", l},
                       {"sensitive", r.sensitive.size()},
                       {"ablate_sensitive_delta_pp", ablate_and_score(model, l, r.sensitive, examples, r.site)},
                       {"ppl_before", ppl.before},
                       {"ppl_after", ppl.after}});
    ctx.log << "layer " << l << ": " << r.sensitive.size() << " sensitive dims\n";
  }
  ctx.write_json("sensitivity_report.json", {{"sign_convention", kSignConvention}, {"layers", reports}});
  return {{"command", "ablate"}, {"site", site_name(ctx.config.analysis.site)}, {"layers", summary}};
}

json cmd_steer(Context& ctx) {
  const Model model = load_or_init(ctx);
  const Dataset data = task_data(ctx.config, model);
  const auto examples = eval_subset(ctx.config, data);
  const std::size_t layer = ctx.config.steer.layer.value_or(model.config.n_layers - 1);
  check_layer(model, layer, "steer.layer");
  const HookSite site = ctx.config.analysis.site;

  if (ctx.config.steer.spec) {
    ctx.inputs.push_back(*ctx.config.steer.spec);
    const SteeringSpec spec = read_spec(*ctx.config.steer.spec);
    try {
      validate_spec(spec, model.config);
    } catch (const Error& e) {
      throw ConfigError(std::string("steer.spec: ") + e.what());
    }
    const EvalReport base = evaluate(model, examples);
    const EvalReport steered = evaluate(model, examples, steering_hook(spec, model.config));
    ctx.write_json("steering_spec.json", spec_json(spec));
    return {{"command", "steer"},
            {"mode", "apply"},
            {"layer", spec.layer},
            {"site", site_name(spec.site)},
            {"rows", json::array({eval_row("baseline", "eval", base), eval_row("steered", "eval", steered)})}};
  }

  const std::size_t n_tune = static_cast<std::size_t>(
      std::lround(ctx.config.steer.tuning_fraction * static_cast<double>(examples.size())));
  if (n_tune == 0 || n_tune >= examples.size()) {
    throw ConfigError("steer: tuning_fraction leaves an empty tuning or held-out split");
  }
  const std::span<const Example> tuning(examples.data(), n_tune);
  const std::span<const Example> heldout(examples.data() + n_tune, examples.size() - n_tune);
  const auto corpus = tokens_of(tuning);
  PipelineOptions opts;
  opts.tau = ctx.config.analysis.tau;
  opts.site = site;
  opts.factors = ctx.config.steer.factors;
  opts.grid = ctx.config.steer.grid;
  const PipelineResult r = steering_pipeline(model, layer, corpus, tuning, heldout, opts);
  ctx.write_json("steering_spec.json", spec_json(r.grid.best_spec));
  ctx.write_json("sensitivity_report.json", {{"sign_convention", kSignConvention}, {"layers", json::array({report_json(r.report)})}});

  json grid = json::array();
  for (std::size_t i = 0; i < r.grid.candidates.size(); ++i) {
    grid.push_back({{"candidate", r.grid.candidates[i]}, {"top1", r.grid.scores[i]}});
  }
  const auto hook = steering_hook(r.grid.best_spec, model.config);
  json rows = json::array({eval_row("baseline", "tuning", evaluate(model, tuning)),
                           eval_row("steered", "tuning", evaluate(model, tuning, hook)),
                           eval_row("baseline", "heldout", evaluate(model, heldout)),
                           eval_row("steered", "heldout", evaluate(model, heldout, hook))});
  ctx.log << "best strong factor " << r.grid.best << ": tuning " << r.baseline_tuning << " -> " << r.steered_tuning
          << ", held-out " << r.baseline_heldout << " -> " << r.steered_heldout << "\n";
  return {{"command", "steer"},
          {"mode", "search"},
          {"layer", layer},
          {"site", site_name(site)},
          {"policy", spec_json(r.policy)},
          {"grid", grid},
          {"best_factor", r.grid.best},
          {"heldout_delta_pp", 100.0 * (r.steered_heldout - r.baseline_heldout)},
          {"rows", rows}};
}

json cmd_sae(Context& ctx) {
  const Model model = load_or_init(ctx);
  const Dataset data = task_data(ctx.config, model);
  const auto examples = eval_subset(ctx.config, data);
  const std::size_t layer = ctx.config.sae.layer.value_or(model.config.n_layers - 1);
  check_layer(model, layer, "sae.layer");
  const HookSite site = ctx.config.analysis.site;
  const std::size_t width = site_width(model.config, site);
  std::vector<double> rows;
  for (const auto& ex : examples) {
    const auto out = forward_model(model, ex.tokens, true);
    const Tensor& a = site_activations(out.trace->layers[layer], site);
    rows.insert(rows.end(), a.data().begin(), a.data().end());
  }
  Tensor acts(Shape{rows.size() / width, width});
  std::copy(rows.begin(), rows.end(), acts.storage().begin());

  SAEConfig sc = funnel_config(width);
  sc.l1_weight = ctx.config.sae.l1_weight;
  sc.steps = ctx.config.sae.steps;
  sc.lr = ctx.config.sae.lr;
  sc.batch_size = ctx.config.sae.batch_size;
  sc.seed = ctx.config.seed + 3;
  const SAEResult sae = train_sae(acts, sc);
  const Tensor latents = sae_encode(sae.weights, acts);
  const SAEMetrics m = sae_metrics(latents, sae_reconstruction_error(sae.weights, acts));

  json dict = nullptr;
  if (ctx.config.sae.dict_size > 0) {
    DictConfig dc;
    dc.dict_size = ctx.config.sae.dict_size;
    dc.alpha = ctx.config.sae.alpha;
    dc.iterations = ctx.config.sae.dict_iterations;
    dc.seed = ctx.config.seed + 4;
    const DictResult d = dict_learn(latents, dc);
    dict = {{"dict_size", dc.dict_size},
            {"alpha", dc.alpha},
            {"iterations", dc.iterations},
            {"reconstruction_error", d.reconstruction_error},
            {"objective", d.objective.empty() ? json(nullptr) : json(d.objective.back())},
            {"reinitialized", d.reinitialized.size()}};
  }
  std::string csv = "step,loss\n";
  for (std::size_t i = 0; i < sae.loss_curve.size(); ++i) csv += csv_row({std::to_string(i), format_number(sae.loss_curve[i])});
  ctx.write_text("sae_loss_curve.csv", csv);
  return {{"command", "sae"},
          {"layer", layer},
          {"site", site_name(site)},
          {"samples", acts.dim(0)},
          {"d_in", sc.d_in},
          {"d_hidden", sc.d_hidden},
          {"d_latent", sc.d_latent},
          {"reconstruction_error", m.reconstruction_error},
          {"sparsity_pct", m.sparsity_pct},
          {"active_features_pct", m.active_features_pct},
          {"dictionary", dict}};
}

json cmd_dump_attention(Context& ctx) {
  const Model model = load_or_init(ctx);
  if (model.config.arch != Arch::kBaseline) {
    throw ConfigError("dump-attention: implicit attention is defined for baseline selective blocks only");
  }
  const Dataset data = task_data(ctx.config, model);
  if (ctx.config.analysis.sequence >= data.eval.size()) {
    throw ConfigError("analysis.sequence " + std::to_string(ctx.config.analysis.sequence) + " out of range");
  }
  const auto layers = analysis_layers(ctx.config, model);
  const Sequence& tokens = data.eval[ctx.config.analysis.sequence].tokens;
  const auto out = forward_model(model, tokens, true);
  const AttentionOptions opts{ctx.config.analysis.head_size, ctx.config.analysis.variant};
  json per_layer = json::array();
  for (std::size_t l : layers) {
    AttentionMap map;
    try {
      map = ssm_attention(model, *out.trace, l, opts);
    } catch (const Error& e) {
      throw ConfigError(std::string("dump-attention: ") + e.what());
    }
    const std::size_t T = map.averaged.dim(0);
    std::string csv = "t,s,value\n";
    for (std::size_t t = 0; t < T; ++t)
      for (std::size_t s = 0; s < T; ++s)
        csv += csv_row({std::to_string(t), std::to_string(s), format_number(map.averaged.at(t, s))});
    ctx.write_text("attention_layer" + std::to_string(l) + ".csv", csv);
    const SubspaceVector sv = compute_subspace(map, out.trace->layers[l].y_scan);
    std::vector<double> ratio;
    for (std::size_t t = 0; t < T; ++t) ratio.push_back(magnitude_ratio(map, t));
    per_layer.push_back({{"layer", l},
                         {"importance", tensor_json(sv.w)},
                         {"importance_normalized", tensor_json(sv.w_norm)},
                         {"subspace", tensor_json(sv.v)},
                         {"magnitude_ratio", ratio}});
  }
  return {{"command", "dump-attention"},
          {"sequence", ctx.config.analysis.sequence},
          {"tokens", tokens},
          {"head_size", opts.head_size},
          {"variant", variant_name(opts.variant)},
          {"layers", per_layer}};
}

json cmd_compare(Context& ctx) {
  json rows = json::array();
  std::string csv = "input,command,run,split,top1,perplexity\n";
  for (const auto& dir : ctx.config.inputs) {
    const fs::path mp = dir / "metrics.json";
    ctx.inputs.push_back(mp);
    std::ifstream in(mp);
    const json m = json::parse(in, nullptr, false);
    if (m.is_discarded() || !m.is_object()) throw Error(mp.string() + " is not a JSON object");
    const std::string input = dir.filename().string();
    const std::string command = m.value("command", "");
    if (!m.contains("rows")) continue;
    for (const auto& r : m.at("rows")) {
      json row = {{"input", input},
                  {"command", command},
                  {"run", r.at("run")},
                  {"split", r.at("split")},
                  {"top1", r.at("top1")},
                  {"perplexity", r.at("perplexity")}};
      csv += csv_row({input, command, r.at("run").get<std::string>(), r.at("split").get<std::string>(),
                      format_number(r.at("top1").get<double>()), format_number(r.at("perplexity").get<double>())});
      rows.push_back(row);
    }
  }
  if (rows.empty()) throw ConfigError("compare: no input has evaluation rows");
  ctx.write_text("comparison.csv", csv);
  return {{"command", "compare"}, {"rows", rows}};
}

std::string utc_now() {
  const auto now = std::chrono::system_clock::to_time_t(std::chrono::system_clock::now());
  std::tm tm{};
  gmtime_r(&now, &tm);
  std::ostringstream out;
  out << std::put_time(&tm, "%Y-%m-%dT%H:%M:%SZ");
  return out.str();
}

}  // namespace

int run(const RunConfig& config, std::ostream& log) {
  try {
    std::error_code ec;
    fs::create_directories(config.output_dir, ec);
    if (ec || !fs::is_directory(config.output_dir)) {
      throw ConfigError("cannot create output_dir " + config.output_dir.string());
    }
    Context ctx{config, log, {}, {}};
    json metrics;
    if (config.command == "train") metrics = cmd_train(ctx);
    else if (config.command == "analyze") metrics = cmd_analyze(ctx);
    else if (config.command == "ablate") metrics = cmd_ablate(ctx);
    else if (config.command == "steer") metrics = cmd_steer(ctx);
    else if (config.command == "sae") metrics = cmd_sae(ctx);
    else if (config.command == "dump-attention") metrics = cmd_dump_attention(ctx);
    else if (config.command == "compare") metrics = cmd_compare(ctx);
    else throw ConfigError("unknown command '" + config.command + "'");
    metrics["seed"] = config.seed;
    ctx.write_json("metrics.json", metrics);

    json inputs = json::array();
    for (const auto& p : ctx.inputs) inputs.push_back({{"path", p.string()}, {"sha256", sha256_file(p)}});
    json outputs = json::array();
    for (const auto& name : ctx.outputs) outputs.push_back({{"path", name}, {"sha256", sha256_file(ctx.out(name))}});
    const json manifest = {{"tool", "ssmlab"},
                           {"version", kToolVersion},
                           {"command", config.command},
                           {"seed", config.seed},
                           {"created_utc", utc_now()},
                           {"config", config.resolved},
                           {"inputs", inputs},
                           {"outputs", outputs}};
    std::ofstream mf(ctx.out("manifest.json"), std::ios::binary);
    mf << manifest.dump(2) << "\n";
    if (!mf) throw Error("cannot write manifest.json");
    return kExitOk;
  } catch (const ConfigError& e) {
    log << "config error: " << e.what() << "\n";
    return kExitConfig;
  } catch (const std::exception& e) {
    log << "error: " << e.what() << "\n";
    return kExitRuntime;
  }
}

}  // namespace ssmlab::cli
