#include "bitfold/lm_train.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>

#include "bitfold/error.hpp"

namespace bitfold::dlm {

LmTrainer LmTrainer::create(geo::LanguageModel model, std::uint64_t seed) {
  LmTrainer t;
  t.model = std::move(model);
  t.rng = Rng(seed ^ 0x6c6d747261696eULL);
  return t;
}

void attach_repa_head(geo::LanguageModel& model, const RepaConfig& cfg, int d_teacher, std::uint64_t seed) {
  repa::add_head(model.params, "repa", model.lm.blocks, model.block.d_model, cfg.hidden, d_teacher, seed);
}

bool has_repa_head(const geo::LanguageModel& model) { return model.params.contains("repa.layer_logits"); }

Var training_loss(Graph& g, const geo::LanguageModel& model, const TokenState& x0, const TokenState& xt, int t,
                  const NoiseSchedule& schedule, double repa_weight, const Tensor* repa_target) {
  const geo::LMOutput out = geo::forward(g, model, xt.input());
  Var loss = diffusion_loss(out, x0, xt, t, schedule);
  if (repa_target) loss = loss + repa_weight * repa::repa_loss(g, model.params, "repa", out.hidden, *repa_target);
  return loss;
}

void train_lm(LmTrainer& tr, const std::vector<LmExample>& data, const LmTrainOptions& opts) {
  if (opts.steps <= 0) return;
  if (data.empty()) fail(ErrorCode::SpecInvalid, "language model training needs data");
  const bool align = has_repa_head(tr.model);
  if (align && !opts.repa_targets) fail(ErrorCode::CacheMiss, "alignment head present but no targets supplied");
  const NoiseSchedule schedule = make_schedule(tr.model.lm.diffusion_steps, tr.model.lm.weight);
  const int batch = std::max(1, std::min<int>(opts.batch, static_cast<int>(data.size())));
  std::vector<int> order(data.size());
  std::iota(order.begin(), order.end(), 0);
  std::size_t cursor = order.size();

  for (int s = 0; s < opts.steps; ++s) {
    Gradients total;
    double loss_sum = 0.0;
    for (int b = 0; b < batch; ++b) {
      if (cursor == order.size()) {
        std::shuffle(order.begin(), order.end(), tr.rng.engine());
        cursor = 0;
      }
      const LmExample& ex = data[order[cursor++]];
      const Conditioning mode = sample_training_mode(tr.rng, opts.folding_sft);
      const int t = tr.rng.uniform_int(1, schedule.T);
      const TokenState xt = forward_mask(ex.x0, t, schedule, mode, tr.rng);
      const Tensor* target = align ? &opts.repa_targets->at(ex.id) : nullptr;
      Graph g;
      Var loss = training_loss(g, tr.model, ex.x0, xt, t, schedule, opts.repa_weight, target);
      const double v = loss.value().item();
      if (!std::isfinite(v)) fail(ErrorCode::NonFiniteLoss, "language model loss is " + std::to_string(v));
      loss_sum += v;
      Gradients grads = g.backward(loss, tr.model.params);
      if (b == 0)
        total = std::move(grads);
      else
        accumulate_gradients(total, grads);
    }
    scale_gradients(total, 1.0 / batch);
    tr.adam.step(tr.model.params, total, opts.lr.at(tr.step));
    ++tr.step;
    tr.losses.push_back(loss_sum / batch);
    if (opts.on_step) opts.on_step(tr.step, tr.losses.back());
  }
}

} // namespace bitfold::dlm
