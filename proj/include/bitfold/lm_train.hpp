#ifndef BITFOLD_LM_TRAIN_HPP_
#define BITFOLD_LM_TRAIN_HPP_

#include <functional>
#include <string>
#include <vector>

#include "bitfold/diffusion.hpp"
#include "bitfold/optim.hpp"
#include "bitfold/repa.hpp"

namespace bitfold::dlm {

struct LmExample {
  std::string id;
  TokenState x0;
};

struct LmTrainOptions {
  int steps = 1000;
  int batch = 8;
  LrSchedule lr{1e-4, 2000, 1e-5, 300000};
  bool folding_sft = false;
  double repa_weight = 0.0;
  /// Required when the model carries an alignment head.
  const repa::TargetStore* repa_targets = nullptr;
  std::function<void(int step, double loss)> on_step;
};

/// Model plus everything needed to continue training deterministically.
struct LmTrainer {
  geo::LanguageModel model;
  Adam adam;
  Rng rng;
  int step = 0;
  std::vector<double> losses;

  static LmTrainer create(geo::LanguageModel model, std::uint64_t seed);
};

/// Adds the alignment head under `repa.*` to the model's parameters.
void attach_repa_head(geo::LanguageModel& model, const RepaConfig& cfg, int d_teacher, std::uint64_t seed);
bool has_repa_head(const geo::LanguageModel& model);

/// Runs opts.steps updates. Each sample draws a masking mode, a step t and
/// a corruption; the loss is the head's diffusion loss plus
/// repa_weight * alignment loss. Raises NonFiniteLoss.
void train_lm(LmTrainer& trainer, const std::vector<LmExample>& data, const LmTrainOptions& opts);

/// The per-sample objective used by train_lm, exposed for gradient checks.
Var training_loss(Graph& g, const geo::LanguageModel& model, const TokenState& x0, const TokenState& xt, int t,
                  const NoiseSchedule& schedule, double repa_weight, const Tensor* repa_target);

} // namespace bitfold::dlm

#endif
