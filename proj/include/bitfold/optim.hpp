#ifndef BITFOLD_OPTIM_HPP_
#define BITFOLD_OPTIM_HPP_

#include <map>
#include <string>

#include "bitfold/graph.hpp"

namespace bitfold {

/// Linear warmup to `peak`, then linear decay to `final_lr` at `total_steps`.
struct LrSchedule {
  double peak = 1e-4;
  int warmup = 2000;
  double final_lr = 1e-5;
  int total_steps = 300000;

  double at(int step) const;
};

struct AdamOptions {
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;
  double weight_decay = 0.0;
  double clip_norm = 1.0;  // <= 0 disables clipping
};

class Adam {
public:
  explicit Adam(AdamOptions opts = {}) : opts_(opts) {}

  /// One update of every parameter that has an entry in `grads`. Returns the
  /// pre-clip global gradient norm.
  double step(ParameterSet& params, const Gradients& grads, double lr);
  int steps_taken() const { return t_; }

private:
  AdamOptions opts_;
  int t_ = 0;
  std::map<std::string, Tensor> m_, v_;
};

/// In-place a += b for matching gradient maps (used to accumulate over a batch).
void accumulate_gradients(Gradients& into, const Gradients& from);
void scale_gradients(Gradients& grads, double c);

} // namespace bitfold

#endif
