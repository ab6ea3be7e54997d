#ifndef BITFOLD_FM_HPP_
#define BITFOLD_FM_HPP_

#include <functional>
#include <string>
#include <vector>

#include "bitfold/lm_train.hpp"
#include "bitfold/resdiff.hpp"
#include "bitfold/tokenizer.hpp"

// Data-space flow matching whose denoiser is decoder . LM . encoder, sampled
// with Euler steps on a linear path from a Gaussian prior.
namespace bitfold::fm {

struct FlowState {
  geom::BackboneStructure x;  // C-alpha centroid at the origin
  double t = 0.0;
  std::vector<int> seq;       // empty when unconditioned
};

/// Moves the C-alpha centroid to the origin.
geom::BackboneStructure center_ca(const geom::BackboneStructure& s);

/// Isotropic Gaussian coordinates (sigma per coordinate) for the given chain
/// layout, centered.
geom::BackboneStructure prior_draw(const std::vector<int>& chain_ids, double sigma, Rng& rng);

/// x_t = t x1 + (1 - t) x0 with both endpoints centered; t outside [0, 1] raises BadT.
FlowState corrupt(const geom::BackboneStructure& x1, double t, double sigma, Rng& rng);

/// Kabsch-aligns x_hat onto x_t on C-alpha atoms, then
/// x_s = (s - t) / (1 - t) x_hat + (1 - s) / (1 - t) x_t. s < t raises TimeOrder.
FlowState euler_step(const FlowState& xt, const geom::BackboneStructure& x_hat, double s);

struct Models {
  const tok::Tokenizer* tokenizer = nullptr;
  const geo::LanguageModel* lm = nullptr;
  const resdiff::Head* resdiff = nullptr;  // optional residual refinement
  int pos_offset = 0;
};

/// LM input for a noisy structure: the quantized encoder tokens on the
/// structure track and the conditioning sequence (or MASK) on the other.
dlm::TokenState noisy_state(const tok::Tokenizer& tk, const geom::BackboneStructure& x,
                            const std::vector<int>& seq, int pos_offset, int bits);

/// One LM pass predicting every structure token, argmax per bit (or index).
std::vector<int> predict_tokens(const geo::LanguageModel& lm, const dlm::TokenState& state);

/// encode -> quantize -> one LM pass -> decode (plus an optional sampled
/// residual) -> centered coordinates.
geom::BackboneStructure denoise(const FlowState& x, const Models& models, Rng& rng);

using Denoiser = std::function<geom::BackboneStructure(const FlowState&, Rng&)>;
Denoiser composed_denoiser(const Models& models);

struct FmResult {
  geom::BackboneStructure structure;
  int denoiser_calls = 0;
};

/// Euler integration over t_k = k / n_steps starting from a prior draw.
FmResult fm_generate(const Denoiser& denoiser, const std::vector<int>& chain_ids, const std::vector<int>& seq,
                     int n_steps, double sigma, Rng& rng);

/// Sum over bits of the mean cross entropy over rows with known structure,
/// every row trained regardless of its input.
Var fm_bit_loss(const geo::LMOutput& out, const std::vector<int>& clean_tokens,
                const std::vector<bool>& struct_known = {});

struct FmExample {
  std::string id;
  geom::BackboneStructure structure;
  std::vector<int> seq;
};

struct FinetuneOptions {
  int steps = 1000;
  int batch = 4;
  LrSchedule lr{1e-4, 2000, 1e-5, 300000};
  double sigma = 10.0;
  int pos_offset = 0;
  std::function<void(int step, double loss)> on_step;
};

/// Trains the LM to predict clean bit tokens from encoder tokens of corrupted
/// structures, t ~ U(0, 1). The tokenizer is read only. Needs the bit head.
void fm_finetune(dlm::LmTrainer& trainer, const tok::Tokenizer& tk, const std::vector<FmExample>& data,
                 const FinetuneOptions& opts);

} // namespace bitfold::fm

#endif
