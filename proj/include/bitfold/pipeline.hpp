#ifndef BITFOLD_PIPELINE_HPP_
#define BITFOLD_PIPELINE_HPP_

#include <functional>
#include <optional>
#include <string>
#include <vector>

#include "bitfold/checkpoint.hpp"
#include "bitfold/eval.hpp"
#include "bitfold/lm_train.hpp"

// Stage-wise training of tokenizer, language model, flow fine-tuning and
// residual head from one ModelConfig, with checkpoint assembly and the
// configuration grid.
namespace bitfold::app {

using eval::EvalItem;

struct DataSpec {
  int n = 200;
  int length = 64;
  int length_spread = 0;  // lengths drawn uniformly from length +- spread
  int chains = 1;
  double jitter = 0.1;
  std::uint64_t seed = 0;
};

/// Item i is synthesized from seed and i alone, so prefixes agree across n.
std::vector<EvalItem> generate_dataset(const DataSpec& spec);

/// `index.tsv` (id, chains, length, sequence) plus one native `<id>.bb` per item.
void write_dataset(const std::string& dir, const std::vector<EvalItem>& items);
std::vector<EvalItem> read_dataset(const std::string& dir);

struct Pipeline {
  ModelConfig cfg;
  std::optional<tok::Tokenizer> tokenizer;
  std::optional<geo::LanguageModel> lm;
  std::optional<resdiff::Head> resdiff;
  std::int64_t step = 0;
  std::string rng_state;

  /// Parameters under `tok.`, `lm.` and `resdiff.`.
  Checkpoint to_checkpoint() const;
  /// Rebuilds each component present in the checkpoint from its config;
  /// raises LayoutMismatch when parameter names or shapes disagree.
  static Pipeline from_checkpoint(const Checkpoint& ckpt);
  eval::Models models() const;
};

struct StageOptions {
  int steps = -1;  // negative uses cfg.train.steps
  std::function<void(int step, double loss)> on_step;
};

/// Language-model training examples with linkers inserted between chains.
std::vector<dlm::LmExample> lm_examples(const tok::Tokenizer& tk, const ModelConfig& cfg,
                                        const std::vector<EvalItem>& data);
/// Tokenizer trunk features aligned to lm_examples (zero rows at linkers).
repa::TargetStore repa_targets(const tok::Tokenizer& tk, const ModelConfig& cfg, const std::vector<EvalItem>& data);

std::vector<double> train_tokenizer_stage(Pipeline& p, const std::vector<EvalItem>& data, const StageOptions& opts);
/// Creates the model (and alignment head when enabled) unless present.
std::vector<double> train_lm_stage(Pipeline& p, const std::vector<EvalItem>& data, const StageOptions& opts);
std::vector<double> finetune_fm_stage(Pipeline& p, const std::vector<EvalItem>& data, const StageOptions& opts);
std::vector<double> train_resdiff_stage(Pipeline& p, const std::vector<EvalItem>& data, const StageOptions& opts);

/// Sampler, refinement and multimer settings taken from the config.
eval::FoldingConfig folding_config(const ModelConfig& cfg);

// ------------------------------------------------------------ grid

/// `+`-joined feature names: baseline (index head, plain blocks), bit,
/// index, geo (pair bias and pair transition), fm, repa, resdiff, sft.
ModelConfig grid_config(const ModelConfig& base, const std::string& name);

inline const std::vector<std::string> kDefaultGrid = {
    "baseline", "bit", "bit+fm", "geo+bit", "geo+bit+repa", "geo+bit+repa+resdiff", "geo+bit+repa+resdiff+sft"};

struct GridSpec {
  ModelConfig base;
  std::vector<std::string> configs = kDefaultGrid;
  int tokenizer_steps = -1;
  int lm_steps = -1;
  int fm_steps = -1;
  int resdiff_steps = -1;
  int diversity_length = 0;  // 0 skips co-generation
  int diversity_samples = 40;
};

struct GridRow {
  std::string name;
  eval::Aggregate mean;
  double diversity = 0.0;
  double train_seconds = 0.0;
  double eval_seconds = 0.0;
};

/// Trains and evaluates each configuration with the shared tokenizer (trained
/// from the base config when null). Rows are sorted by name.
std::vector<GridRow> reproduce_grid(const GridSpec& spec, const std::vector<EvalItem>& train,
                                    const std::vector<EvalItem>& test, const tok::Tokenizer* shared = nullptr);
std::string grid_csv(const std::vector<GridRow>& rows);

} // namespace bitfold::app

#endif
