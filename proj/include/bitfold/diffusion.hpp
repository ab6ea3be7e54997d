#ifndef BITFOLD_DIFFUSION_HPP_
#define BITFOLD_DIFFUSION_HPP_

#include <vector>

#include "bitfold/geo.hpp"
#include "bitfold/rng.hpp"

// Absorbing discrete diffusion over the joint (sequence, structure token)
// state, with mask-predict generation.
namespace bitfold::dlm {

struct NoiseSchedule {
  int T = 0;
  std::vector<double> alpha_bar;  // index 0..T, alpha_bar[0] = 1
  std::vector<double> beta;       // index 1..T, beta[t] = alpha_bar[t] / alpha_bar[t-1]; beta[0] = 1
  std::vector<double> lambda_w;   // index 1..T

  /// (alpha_bar[to] - alpha_bar[from]) / (1 - alpha_bar[from]) for to < from.
  double unmask_probability(int from, int to) const;
};

/// Linear absorbing schedule alpha_bar_t = 1 - t/T; T < 2 raises BadT.
NoiseSchedule make_schedule(int T, LossWeight weight = LossWeight::Constant);

/// Which track is supplied as conditioning and therefore never masked.
enum class Conditioning { None, Folding, InverseFolding };

struct TokenState {
  int bits = 8;
  std::vector<int> seq;               // amino-acid ids, kAaMask, kAaPad
  std::vector<int> structure;         // indices, mask_token(bits), pad_token(bits)
  std::vector<int> positions;
  std::vector<bool> struct_known;     // false where no structure exists (linkers); empty means all known

  static TokenState observed(std::vector<int> seq, std::vector<int> structure, int bits,
                             std::vector<int> positions = {});

  int length() const { return static_cast<int>(seq.size()); }
  bool seq_masked(int i) const;
  bool struct_masked(int i) const;
  bool seq_pad(int i) const;
  bool struct_pad(int i) const;
  bool has_structure(int i) const { return struct_known.empty() || struct_known[i]; }
  /// Masked structure token at a position that has structure.
  bool struct_open(int i) const { return struct_masked(i) && has_structure(i); }
  std::vector<bool> mask_seq() const;
  std::vector<bool> mask_struct() const;
  /// Masked sequence tokens plus open structure tokens.
  int masked_count() const;
  /// (L, K) rows of +-1 at observed positions, 0 at masked or padded ones.
  Tensor struct_bits() const;
  geo::LmInput input() const { return {seq, structure, positions}; }
  void validate() const;

  friend bool operator==(const TokenState& a, const TokenState& b) {
    return a.bits == b.bits && a.seq == b.seq && a.structure == b.structure && a.positions == b.positions &&
           a.struct_known == b.struct_known;
  }
};

/// Direct corruption q(x_t | x_0): every non-PAD position of each free track
/// is masked independently with probability 1 - alpha_bar_t. Positions
/// without structure always carry MASK on the structure track.
TokenState forward_mask(const TokenState& x0, int t, const NoiseSchedule& schedule, Conditioning cond, Rng& rng);
/// One kernel q(x_t | x_{t-1}): each unmasked free position is masked with probability 1 - beta_t.
TokenState forward_step(const TokenState& x_prev, int t, const NoiseSchedule& schedule, Conditioning cond, Rng& rng);

/// Uniform draw from {both tracks free 0.5, sequence-only 0.25, structure-only 0.25};
/// folding SFT always masks the structure track only.
Conditioning sample_training_mode(Rng& rng, bool folding_sft);

Var loss_index(const geo::LMOutput& out, const TokenState& x0, const TokenState& xt, int t,
               const NoiseSchedule& schedule);
Var loss_bit(const geo::LMOutput& out, const TokenState& x0, const TokenState& xt, int t,
             const NoiseSchedule& schedule);
/// Dispatches on the active head.
Var diffusion_loss(const geo::LMOutput& out, const TokenState& x0, const TokenState& xt, int t,
                   const NoiseSchedule& schedule);

/// Each masked position unmasks to x0_pred with probability
/// unmask_probability(t, t_prev); unmasked positions are kept.
TokenState posterior_step(const TokenState& xt, const TokenState& x0_pred, int t, const NoiseSchedule& schedule,
                          Rng& rng, int t_prev = -1);
/// Probability that posterior_step maps xt to x_prev.
double posterior_transition_probability(const TokenState& xt, const TokenState& x0_pred, const TokenState& x_prev,
                                        int t, const NoiseSchedule& schedule, int t_prev = -1);

/// Per-position draws from the model's predictive distribution at masked
/// positions, with the probability of each chosen token.
struct Proposal {
  TokenState x0;                     // observed entries copied, masked entries filled
  std::vector<double> seq_conf;      // probability of the chosen token, 1 where observed
  std::vector<double> struct_conf;
  std::vector<Tensor> hidden;        // per block structure-track hidden states
};

/// temperature 0 takes the argmax (per bit for the bit head).
Proposal propose(const geo::LanguageModel& model, const TokenState& xt, double temperature, Rng& rng);

enum class Strategy { Stochastic, Confidence };

struct GenerateOptions {
  int length = 0;
  Conditioning mode = Conditioning::None;
  std::vector<int> seq;        // required for folding
  std::vector<int> structure;  // required for inverse folding
  std::vector<int> positions;  // default 0..L-1
  std::vector<bool> struct_known;
  int steps = 100;             // <= T
  Strategy strategy = Strategy::Stochastic;
  double temperature = 1.0;
};

struct Generation {
  TokenState state;
  std::vector<Tensor> hidden;  // from the last model call
  int model_calls = 0;
};

Generation generate(const geo::LanguageModel& model, const GenerateOptions& opts, Rng& rng);

/// The sampling time grid T = t_S > ... > t_0 = 0 with S = steps.
std::vector<int> time_grid(int T, int steps);

} // namespace bitfold::dlm

#endif
