#ifndef BITFOLD_TOKENIZER_HPP_
#define BITFOLD_TOKENIZER_HPP_

#include <functional>
#include <string>
#include <vector>

#include "bitfold/config.hpp"
#include "bitfold/geometry.hpp"
#include "bitfold/optim.hpp"
#include "bitfold/ops.hpp"

// Structure tokenizer: invariant per-residue features -> residual MLP encoder
// -> sign quantizer -> relative-position transformer decoder.
namespace bitfold::tok {

inline int codebook_size(int k) { return 1 << k; }
inline int mask_token(int k) { return codebook_size(k); }
inline int pad_token(int k) { return codebook_size(k) + 1; }

inline constexpr int kFeatureDim = 34;
inline constexpr double kCoordScale = 10.0;

/// Rigid-invariant descriptors (L, kFeatureDim): C-alpha distances to
/// same-chain neighbours at offsets +-1..4 with presence flags, sin/cos of
/// phi/psi/omega with presence flags, N/C/O in the residue's local frame.
Tensor residue_features(const geom::BackboneStructure& s);

/// Residue index 0..L-1 over the whole complex plus chain_index * pos_offset.
std::vector<int> chain_positions(const std::vector<int>& chain_ids, int pos_offset);

struct Tokenizer {
  TokenizerConfig cfg;
  ParameterSet params;

  static Tokenizer create(const TokenizerConfig& cfg, std::uint64_t seed);
  int bits() const { return cfg.bits; }
};

struct EncoderOutput {
  Var z;      // (L, K) continuous tokens
  Var trunk;  // (L, width) normalized trunk activation
};

EncoderOutput encode(Graph& g, const Tokenizer& tk, const Tensor& features);
Tensor encode(const Tokenizer& tk, const geom::BackboneStructure& s);
/// Trunk activations, the frozen teacher representation used for alignment.
Tensor trunk_representation(const Tokenizer& tk, const geom::BackboneStructure& s);

struct Quantized {
  Var bits;        // straight-through sign
  Var commitment;  // mean (z - sg(bits))^2
  Var entropy;     // ln 2 - mean per-dimension binary entropy of soft batch frequencies
};

Quantized lfq_quantize(Var z);
Tensor quantize(const Tensor& z);

/// index = sum_k [bit_k > 0] 2^k over columns k = 0..K-1.
std::vector<int> bits_to_index(const Tensor& bits);
/// Rows of +-1; MASK, PAD and anything outside [0, 2^K) raise IndexOutOfRange.
Tensor index_to_bits(const std::vector<int>& indices, int k);

/// Decoded backbone (L, 4, 3), centered on the C-alpha centroid.
Var decode(Graph& g, const Tokenizer& tk, Var tokens, const std::vector<int>& positions);
geom::BackboneStructure decode(const Tokenizer& tk, const Tensor& tokens, const std::vector<int>& positions,
                               const std::vector<int>& chain_ids = {});
geom::BackboneStructure coords_to_structure(const Tensor& xyz, const std::vector<int>& chain_ids);

/// Distance-matrix MSE over all backbone atoms (in units of 10 A) plus a
/// C-alpha torsion sin/cos term that fixes handedness.
Var reconstruction_loss(Var pred, const geom::BackboneStructure& truth);

struct SampleReconstruction {
  double rmsd_cont = 0, rmsd_quant = 0, tm_cont = 0, tm_quant = 0;
};

struct ReconstructionReport {
  std::vector<SampleReconstruction> samples;
  double rmsd_cont = 0, rmsd_quant = 0, tm_cont = 0, tm_quant = 0;  // means
  std::vector<double> losses;  // per training step
};

ReconstructionReport evaluate_reconstruction(const Tokenizer& tk, const std::vector<geom::BackboneStructure>& data,
                                             int pos_offset = 0);

struct TokenizerTrainOptions {
  int steps = 1500;
  int batch = 8;
  LrSchedule lr{1e-3, 100, 1e-4, 1500};
  std::uint64_t seed = 0;
  int pos_offset = 0;
  std::function<void(int step, double loss)> on_step;
};

struct TokenizerTraining {
  Tokenizer tokenizer;
  ReconstructionReport report;  // on the training set, after training
};

/// Trains on the dataset; a non-finite loss raises NonFiniteLoss.
TokenizerTraining train_tokenizer(const std::vector<geom::BackboneStructure>& data, const TokenizerConfig& cfg,
                                  const TokenizerTrainOptions& opts);

// Token files: `TOK v1 K=<k> L=<n>` then one row per residue, either K
// signed bits or a single index; MASK is `M`, PAD is `P`.
std::string write_tokens(const std::vector<int>& indices, int k, bool as_bits);
struct TokenFile {
  int k = 0;
  std::vector<int> indices;  // MASK/PAD use mask_token/pad_token
};
TokenFile parse_tokens(std::string_view text);

} // namespace bitfold::tok

#endif
