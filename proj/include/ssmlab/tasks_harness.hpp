#pragma once

// Synthetic tasks (copy, needle retrieval, character-level LM), seeded SGD
// training, and evaluation (top-1 accuracy, perplexity, ablation delta-PPL).

#include <functional>
#include <iosfwd>
#include <span>
#include <string>
#include <vector>

#include "ssmlab/model.hpp"

namespace ssmlab {

enum class TaskKind { kCopy, kNeedle, kCharLm };

const char* task_name(TaskKind kind);
TaskKind parse_task(const std::string& name);

struct TaskSpec {
  TaskKind kind = TaskKind::kCopy;
  std::size_t vocab_size = 16;
  std::size_t seq_len = 32;
  std::size_t n_train = 256;
  std::size_t n_eval = 64;
  std::uint64_t seed = 0;
};

struct Dataset {
  std::vector<Example> train;
  std::vector<Example> eval;
};

/// Token roles of the needle task: query marker 0, then keys, values, filler.
struct NeedleVocab {
  TokenId query = 0;
  TokenId key_begin = 0, key_end = 0;
  TokenId value_begin = 0, value_end = 0;
  TokenId filler_begin = 0, filler_end = 0;
};
NeedleVocab needle_vocab(std::size_t vocab_size);

/// Throws when the spec cannot be generated (e.g. needle sequence too short).
void validate_task(const TaskSpec& spec);
Dataset generate_task(const TaskSpec& spec);

/// Newline-delimited JSON, one {"tokens": [...], "score_mask": [...]} per line.
void write_examples(std::ostream& out, std::span<const Example> examples);
std::vector<Example> read_examples(std::istream& in);

struct TrainConfig {
  std::size_t steps = 500;
  double lr = 0.5;
  std::size_t batch_size = 8;
  double clip_norm = 1.0;
  std::uint64_t seed = 0;
};

struct TrainResult {
  std::vector<double> loss_curve;  // mean batch loss before each update
};

/// Parameters updated by training (everything except lambda_comp).
std::vector<std::pair<std::string, Tensor*>> trainable_parameters(Model& model);

/// Plain SGD on the masked next-token cross-entropy, clipped to clip_norm
/// in global L2 norm. Throws with the step index on a non-finite loss.
TrainResult train(Model& model, std::span<const Example> data, const TrainConfig& config);

/// Mean of each consecutive window of `window` values (last partial window dropped).
std::vector<double> windowed_means(std::span<const double> values, std::size_t window);

struct EvalReport {
  double top1 = 0.0;
  double mean_nll = 0.0;
  double perplexity = 1.0;
  std::size_t scored = 0;
  /// Accuracy by target position (NaN where nothing is scored).
  std::vector<double> per_position;
};

using LogitsFn = std::function<Tensor(const Sequence&)>;

EvalReport evaluate(const LogitsFn& logits, std::span<const Example> examples);
EvalReport evaluate(const Model& model, std::span<const Example> examples,
                    const ActivationHook& hook = {});

struct PplChange {
  double before = 0.0;
  double after = 0.0;
};

/// Perplexity with and without `dims` zeroed at (layer, site).
PplChange perturb_ppl(const Model& model, std::size_t layer, std::span<const std::size_t> dims,
                      std::span<const Example> examples, HookSite site = HookSite::kScanOutput);

}  // namespace ssmlab
