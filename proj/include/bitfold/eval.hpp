#ifndef BITFOLD_EVAL_HPP_
#define BITFOLD_EVAL_HPP_

#include <functional>
#include <string>
#include <vector>

#include "bitfold/diffusion.hpp"
#include "bitfold/resdiff.hpp"
#include "bitfold/tokenizer.hpp"

// Token accuracies, folding evaluation, co-generation diversity and report output.
namespace bitfold::eval {

struct TokenAccuracy {
  double bit_acc = 0.0;
  double index_acc = 0.0;
  int positions = 0;  // compared positions after excluding MASK/PAD
};

/// Positions where either side is MASK or PAD are skipped; with nothing
/// left to compare both accuracies are 0. Raises LengthMismatch.
TokenAccuracy token_accuracy(const std::vector<int>& pred, const std::vector<int>& truth, int bits);
/// `pred` as (L, K) sign rows.
TokenAccuracy token_accuracy(const Tensor& pred_bits, const std::vector<int>& truth, int bits);

struct EvalItem {
  std::string id;
  geom::BackboneStructure structure;
  std::vector<int> seq;
};

struct EvalRow {
  std::string id;
  double rmsd = 0.0;
  double tm = 0.0;
  double bit_acc = 0.0;
  double index_acc = 0.0;
};

struct Aggregate {
  double rmsd = 0.0, tm = 0.0, bit_acc = 0.0, index_acc = 0.0;
};

struct EvalReport {
  std::vector<EvalRow> rows;
  Aggregate mean, median;
  double runtime_seconds = 0.0;
  std::vector<std::vector<int>> tokens;  // predicted structure tokens per row, for consistency checks
};

struct Models {
  const tok::Tokenizer* tokenizer = nullptr;
  const geo::LanguageModel* lm = nullptr;
  const resdiff::Head* resdiff = nullptr;  // refines decoded tokens when set and enabled
};

enum class Sampler { MaskPredict, Flow };

struct FoldingConfig {
  Sampler sampler = Sampler::MaskPredict;
  int steps = 0;  // mask-predict steps; 0 uses the model's T
  dlm::Strategy strategy = dlm::Strategy::Confidence;
  double temperature = 0.0;
  bool use_resdiff = false;
  int fm_steps = 10;
  double fm_sigma = 10.0;
  int linker_len = 25;
  int pos_offset = 25;
  std::uint64_t seed = 0;
  int threads = 0;  // 0 reads BITFOLD_THREADS, default 1
};

Aggregate mean_of(const std::vector<EvalRow>& rows);
Aggregate median_of(const std::vector<EvalRow>& rows);

/// Reference tokens of a structure: sign-quantized encoder output.
std::vector<int> reference_tokens(const tok::Tokenizer& tk, const geom::BackboneStructure& s);

/// Folds every item from its sequence and scores it against the truth.
/// Each item draws from its own stream split off `seed` in dataset order;
/// refinement noise uses a separate child stream so token predictions do
/// not depend on use_resdiff.
EvalReport folding_eval(const Models& models, const std::vector<EvalItem>& data, const FoldingConfig& cfg);

/// Greedy leader clustering: each sample joins the first cluster whose
/// representative scores tm >= threshold against it, else opens a cluster.
/// Returns clusters / samples. Raises LengthMismatch and DegenerateInput.
double diversity(const std::vector<geom::BackboneStructure>& samples, double tm_threshold = 0.5);
int cluster_count(const std::vector<geom::BackboneStructure>& samples, double tm_threshold);

struct CoGenConfig {
  std::vector<int> lengths = {60, 100, 160};
  int samples = 40;
  int steps = 0;  // 0 uses the model's T
  double temperature = 1.0;
  double tm_threshold = 0.5;
  std::uint64_t seed = 0;
  int threads = 0;
};

struct CoGenRow {
  int length = 0;
  int samples = 0;
  double diversity = 0.0;
  double runtime_seconds = 0.0;
};

/// Unconditional joint generation of sequence and structure per length.
std::vector<CoGenRow> cogeneration_eval(const Models& models, const CoGenConfig& cfg);
std::vector<geom::BackboneStructure> cogenerate(const Models& models, int length, int n, int steps,
                                                double temperature, std::uint64_t seed, int threads = 0);

// ------------------------------------------------------------ reports

inline constexpr const char* kCsvHeader = "id,rmsd,tm,bit_acc,index_acc";

std::string to_csv(const EvalReport& report);
/// `[section]` / `key = value` text with the mean and median aggregates.
std::string summary_text(const EvalReport& report);

struct ScatterPoint {
  std::string label;
  double seconds = 0.0;  // x axis
  double rmsd = 0.0;     // y axis
};

/// Standalone SVG of RMSD against per-sample runtime.
std::string scatter_svg(const std::vector<ScatterPoint>& points, const std::string& title = "");

void write_text_file(const std::string& path, const std::string& text);

/// Threads for per-sample work: explicit count, else BITFOLD_THREADS, else 1.
int thread_count(int requested);
/// Runs fn(i) for i in [0, n) on up to `threads` workers.
void parallel_for(int n, int threads, const std::function<void(int)>& fn);

} // namespace bitfold::eval

#endif
