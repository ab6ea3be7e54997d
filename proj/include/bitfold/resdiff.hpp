#ifndef BITFOLD_RESDIFF_HPP_
#define BITFOLD_RESDIFF_HPP_

#include <functional>
#include <vector>

#include "bitfold/diffusion.hpp"
#include "bitfold/optim.hpp"
#include "bitfold/tokenizer.hpp"

// Continuous diffusion over quantization residuals r = z_cont - z_quant,
// conditioned on the bit tokens and the language model's hidden states.
namespace bitfold::resdiff {

struct DdpmSchedule {
  int T = 0;
  std::vector<double> beta;       // index 1..T
  std::vector<double> alpha_bar;  // index 0..T, alpha_bar[0] = 1
};

/// Linear beta from beta_start to beta_end, scaled by 1000 / T and capped at
/// 0.99 so that alpha_bar_T is near zero for any T. T < 2 raises BadT.
DdpmSchedule make_ddpm(int T, double beta_start, double beta_end);

inline constexpr int kTimeDim = 32;

struct Head {
  ResDiffConfig cfg;
  int bits = 8;
  int d_cond = 0;    // language model width
  int n_layers = 0;  // language model blocks
  DdpmSchedule ddpm;
  ParameterSet params;

  static Head create(const ResDiffConfig& cfg, int bits, int d_cond, int n_layers, std::uint64_t seed);
};

/// z_cont - z_quant; raises ShapeMismatch.
Tensor residual(const Tensor& z_cont, const Tensor& z_quant);

/// c = z_quant W_quant + sum_i softmax(w)_i h_i, shape (L, d_cond).
Var condition(Graph& g, const Head& head, Var z_quant, const std::vector<Var>& hidden);

/// eps_phi(r_t, t, c): input projection, adaLN residual MLP blocks, output projection.
Var predict_noise(Graph& g, const Head& head, Var r_t, int t, Var cond);

struct Noised {
  Tensor r_t;
  Tensor eps;
};
/// r_t = sqrt(alpha_bar_t) r + sqrt(1 - alpha_bar_t) eps.
Noised ddpm_forward(const DdpmSchedule& s, const Tensor& r, int t, Rng& rng);

/// mean (eps - pred)^2.
Var noise_mse(Var pred, const Tensor& eps);
/// Noise prediction loss at step t in [1, T]; raises BadT.
Var resdiff_loss(Graph& g, const Head& head, const Tensor& r, int t, Var cond, Rng& rng);

using NoiseFn = std::function<Tensor(const Tensor& r_t, int t)>;
/// Ancestral sampling from r_T ~ N(0, I) down to r_0.
Tensor ddpm_sample(const DdpmSchedule& s, const Shape& shape, const NoiseFn& predict, Rng& rng);
Tensor resdiff_sample(const Head& head, const Tensor& cond, Rng& rng);

/// Conditioning input for one structure.
struct Example {
  Tensor z_quant;
  Tensor r;  // empty when the continuous tokens are unknown
  std::vector<Tensor> hidden;
};

/// Hidden states of the language model run once over the fully observed state.
std::vector<Tensor> lm_hidden(const geo::LanguageModel& lm, const dlm::TokenState& state);

/// Encodes the structure, quantizes it and collects the model's hidden states
/// with the sequence and the quantized tokens observed.
Example make_example(const tok::Tokenizer& tk, const geo::LanguageModel& lm, const geom::BackboneStructure& s,
                     const std::vector<int>& seq);

Tensor condition_tensor(const Head& head, const Tensor& z_quant, const std::vector<Tensor>& hidden);
/// z_quant plus one sampled residual.
Tensor refine(const Head& head, const Tensor& z_quant, const std::vector<Tensor>& hidden, Rng& rng);

struct TrainOptions {
  int steps = 1000;
  int batch = 8;
  LrSchedule lr{1e-4, 2000, 1e-5, 300000};
  std::function<void(int step, double loss)> on_step;
};

struct Trainer {
  Head head;
  Adam adam;
  Rng rng;
  int step = 0;
  std::vector<double> losses;

  static Trainer create(Head head, std::uint64_t seed);
};

/// Samples t uniformly per example; raises NonFiniteLoss.
void train(Trainer& tr, const std::vector<Example>& data, const TrainOptions& opts);

} // namespace bitfold::resdiff

#endif
