#ifndef BITFOLD_SUITES_HPP_
#define BITFOLD_SUITES_HPP_

#include <cstdint>
#include <string>
#include <vector>

#include "bitfold/config.hpp"

// Self-checks exposed through the command line: finite-difference checks of
// every trainable objective and a per-step timing of encoder variants.
namespace bitfold::suites {

struct GradRow {
  std::string name;
  std::uint64_t seed = 0;
  double max_rel_error = 0.0;
  std::string worst_param;
};

inline const std::vector<std::string> kGradientTargets = {
    "index_ce", "bit_ce", "repa", "resdiff", "transition", "pair_bias_attention", "triangle_update",
    "triangle_attention", "seqstruct_attention"};

/// One row per target and seed.
std::vector<GradRow> gradient_suite(const std::vector<std::uint64_t>& seeds,
                                    const std::vector<std::string>& targets = kGradientTargets);

struct BenchRow {
  std::string variant;
  double seconds_per_step = 0.0;  // median over repetitions
  std::size_t parameters = 0;
};

/// Encoder variants by name: plain, base, st, tu, ta, ssa.
BlockConfig variant_block(const std::string& name, const BlockConfig& dims = {});

struct BenchOptions {
  int length = 64;
  int blocks = 1;
  int reps = 5;
  int warmup = 1;
  std::vector<std::string> variants = {"plain", "base", "tu", "ta"};
  BlockConfig dims;
  std::uint64_t seed = 0;
};

/// Wall-clock of one training step (forward and backward of the diffusion
/// loss) per variant.
std::vector<BenchRow> block_benchmark(const BenchOptions& opts);

} // namespace bitfold::suites

#endif
