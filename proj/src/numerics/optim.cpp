#include "bitfold/optim.hpp"

#include <cmath>

namespace bitfold {

double LrSchedule::at(int step) const {
  if (warmup > 0 && step < warmup) return peak * static_cast<double>(step + 1) / warmup;
  if (total_steps <= warmup) return peak;
  const double frac = std::min(1.0, static_cast<double>(step - warmup) / (total_steps - warmup));
  return peak + (final_lr - peak) * frac;
}

double Adam::step(ParameterSet& params, const Gradients& grads, double lr) {
  double sq = 0;
  for (const auto& [_, g] : grads)
    for (double v : g.values()) sq += v * v;
  const double norm = std::sqrt(sq);
  const double clip = (opts_.clip_norm > 0 && norm > opts_.clip_norm) ? opts_.clip_norm / norm : 1.0;
  ++t_;
  const double bc1 = 1.0 - std::pow(opts_.beta1, t_);
  const double bc2 = 1.0 - std::pow(opts_.beta2, t_);
  for (auto& [name, p] : params) {
    auto it = grads.find(name);
    if (it == grads.end()) continue;
    const Tensor& g = it->second;
    auto [mi, _m] = m_.try_emplace(name, p.shape());
    auto [vi, _v] = v_.try_emplace(name, p.shape());
    Tensor& m = mi->second;
    Tensor& v = vi->second;
    for (std::size_t i = 0; i < p.size(); ++i) {
      const double gi = g[i] * clip;
      m[i] = opts_.beta1 * m[i] + (1 - opts_.beta1) * gi;
      v[i] = opts_.beta2 * v[i] + (1 - opts_.beta2) * gi * gi;
      const double update = (m[i] / bc1) / (std::sqrt(v[i] / bc2) + opts_.eps);
      p[i] -= lr * (update + opts_.weight_decay * p[i]);
    }
  }
  return norm;
}

void accumulate_gradients(Gradients& into, const Gradients& from) {
  for (const auto& [name, g] : from) {
    auto [it, inserted] = into.try_emplace(name, g);
    if (inserted) continue;
    Tensor& dst = it->second;
    for (std::size_t i = 0; i < dst.size(); ++i) dst[i] += g[i];
  }
}

void scale_gradients(Gradients& grads, double c) {
  for (auto& [_, g] : grads)
    for (double& v : g.values()) v *= c;
}

} // namespace bitfold
