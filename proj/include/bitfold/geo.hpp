#ifndef BITFOLD_GEO_HPP_
#define BITFOLD_GEO_HPP_

#include <optional>
#include <string>
#include <vector>

#include "bitfold/config.hpp"
#include "bitfold/ops.hpp"

// Geometry-aware encoder blocks and the joint sequence/structure language
// model built from them. Sub-layers return deltas; callers add residuals.
namespace bitfold::geo {

enum class TriangleMode { Outgoing, Incoming };
enum class TriangleAttnMode { Starting, Ending };

// Parameter registration, one per sub-layer.
void add_init_pair(ParameterSet& ps, const std::string& name, int d_in, const BlockConfig& cfg, std::uint64_t seed);
void add_attn_pair_bias(ParameterSet& ps, const std::string& name, int d_in, int d_inner, int heads, int d_pair,
                        std::uint64_t seed);
void add_transition(ParameterSet& ps, const std::string& name, int dim, int ratio, std::uint64_t seed);
void add_triangle_update(ParameterSet& ps, const std::string& name, const BlockConfig& cfg, std::uint64_t seed);
void add_triangle_attention(ParameterSet& ps, const std::string& name, const BlockConfig& cfg, std::uint64_t seed);
void add_seqstruct_attention(ParameterSet& ps, const std::string& name, int d_model, const BlockConfig& cfg,
                             std::uint64_t seed);

/// pair[i][j] = MLP3(concat(h[i], h[j])), (L, L, d_pair).
Var init_pair(Graph& g, const ParameterSet& ps, const std::string& name, Var h);
/// Gated multi-head attention on LN(h) with logits biased by a per-head
/// linear map of pair[i][j]; key_bias (L, L) is added to every head.
Var attn_pair_bias(Graph& g, const ParameterSet& ps, const std::string& name, Var h, Var pair, int heads,
                   std::optional<Var> key_bias = std::nullopt);
/// LN -> silu(W_a x) * (W_b x) -> W_o, on the trailing axis of any rank.
Var transition(Graph& g, const ParameterSet& ps, const std::string& name, Var x);
Var triangle_update(Graph& g, const ParameterSet& ps, const std::string& name, Var pair, TriangleMode mode);
Var triangle_attention(Graph& g, const ParameterSet& ps, const std::string& name, Var pair, TriangleAttnMode mode,
                       int heads);
struct TrackPair {
  Var seq;
  Var structure;
};
TrackPair seqstruct_attention(Graph& g, const ParameterSet& ps, const std::string& name, Var h_seq, Var h_struct,
                              Var pair, int heads, std::optional<Var> key_bias = std::nullopt);

// ----------------------------------------------------------- language model

struct LmInput {
  std::vector<int> seq;        // amino-acid ids, kAaMask, kAaPad
  std::vector<int> structure;  // token indices, mask_token(k), pad_token(k)
  std::vector<int> positions;
};

struct LMOutput {
  HeadKind head = HeadKind::Bit;
  int bits = 0;
  Var seq_logits;                 // (L, 20)
  Var struct_logits;              // (L, 2^K) or (L, K, 2)
  std::vector<Var> hidden;        // per block, structure-track rows (L, D)
};

struct LanguageModel {
  LmConfig lm;
  BlockConfig block;
  int bits = 8;
  ParameterSet params;

  static LanguageModel create(const LmConfig& lm, const BlockConfig& block, int bits, std::uint64_t seed);
};

LMOutput forward(Graph& g, const LanguageModel& model, const LmInput& input);

} // namespace bitfold::geo

#endif
