#include "bitfold/resdiff.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>

#include "bitfold/error.hpp"
#include "bitfold/nn.hpp"
#include "bitfold/repa.hpp"

namespace bitfold::resdiff {

DdpmSchedule make_ddpm(int T, double beta_start, double beta_end) {
  if (T < 2) fail(ErrorCode::BadT, "residual diffusion needs T >= 2, got " + std::to_string(T));
  if (!(beta_start > 0 && beta_end < 1 && beta_start <= beta_end))
    fail(ErrorCode::InvalidConfig, "beta range must lie in (0, 1)");
  DdpmSchedule s;
  s.T = T;
  s.beta.assign(T + 1, 0.0);
  s.alpha_bar.assign(T + 1, 1.0);
  const double scale = 1000.0 / T;
  for (int t = 1; t <= T; ++t) {
    const double b = beta_start + (beta_end - beta_start) * (t - 1) / (T - 1);
    s.beta[t] = std::min(0.99, b * scale);
    s.alpha_bar[t] = s.alpha_bar[t - 1] * (1.0 - s.beta[t]);
  }
  return s;
}

Head Head::create(const ResDiffConfig& cfg, int bits, int d_cond, int n_layers, std::uint64_t seed) {
  if (cfg.hidden < 1 || cfg.layers < 1 || d_cond < 1 || n_layers < 1)
    fail(ErrorCode::InvalidConfig, "residual head dimensions must be positive");
  Head h;
  h.cfg = cfg;
  h.bits = bits;
  h.d_cond = d_cond;
  h.n_layers = n_layers;
  h.ddpm = make_ddpm(cfg.steps, cfg.beta_start, cfg.beta_end);
  ParameterSet& ps = h.params;
  const int hd = cfg.hidden;
  nn::add_linear(ps, "cond.wq", bits, d_cond, seed + 1, nn::Init::Default, false);
  ps.add("cond.layer_logits", Tensor(Shape{n_layers}));
  nn::add_linear(ps, "in", bits, hd, seed + 2);
  for (int i = 0; i < cfg.layers; ++i) {
    const std::string p = "l" + std::to_string(i);
    nn::add_linear(ps, p + ".ada", d_cond + kTimeDim, 2 * hd, seed + 10 + 3 * i, nn::Init::Zero);
    nn::add_linear(ps, p + ".fc1", hd, hd, seed + 11 + 3 * i);
    nn::add_linear(ps, p + ".fc2", hd, hd, seed + 12 + 3 * i);
  }
  nn::add_linear(ps, "out", hd, bits, seed + 3);
  return h;
}

Tensor residual(const Tensor& z_cont, const Tensor& z_quant) {
  if (z_cont.shape() != z_quant.shape())
    fail(ErrorCode::ShapeMismatch,
         "residual of " + shape_string(z_cont.shape()) + " and " + shape_string(z_quant.shape()));
  Tensor r = z_cont;
  for (std::size_t i = 0; i < r.size(); ++i) r[i] -= z_quant[i];
  return r;
}

Var condition(Graph& g, const Head& head, Var z_quant, const std::vector<Var>& hidden) {
  Var tokens = nn::linear(g, head.params, "cond.wq", z_quant);
  return tokens + repa::ensemble_hidden(hidden, g.param(head.params, "cond.layer_logits"));
}

Var predict_noise(Graph& g, const Head& head, Var r_t, int t, Var cond) {
  const int l = r_t.dim(0), hd = head.cfg.hidden;
  const Tensor te = nn::sinusoidal_embedding(t, kTimeDim);
  Tensor tile(Shape{l, kTimeDim});
  for (int i = 0; i < l; ++i)
    for (int k = 0; k < kTimeDim; ++k) tile.at(i, k) = te[k];
  Var ctx = silu(concat({cond, g.constant(tile)}, 1));
  Var x = nn::linear(g, head.params, "in", r_t);
  for (int i = 0; i < head.cfg.layers; ++i) {
    const std::string p = "l" + std::to_string(i);
    Var mod = nn::linear(g, head.params, p + ".ada", ctx);
    Var shift = slice(mod, 1, 0, hd);
    Var gain = add_scalar(slice(mod, 1, hd, hd), 1.0);
    Var h = layernorm_last(x) * gain + shift;
    h = nn::linear(g, head.params, p + ".fc2", silu(nn::linear(g, head.params, p + ".fc1", h)));
    x = x + h;
  }
  return nn::linear(g, head.params, "out", x);
}

Noised ddpm_forward(const DdpmSchedule& s, const Tensor& r, int t, Rng& rng) {
  if (t < 1 || t > s.T) fail(ErrorCode::BadT, "t = " + std::to_string(t) + " outside [1, " + std::to_string(s.T) + "]");
  Noised n{r, Tensor(r.shape())};
  const double a = std::sqrt(s.alpha_bar[t]), b = std::sqrt(1.0 - s.alpha_bar[t]);
  for (std::size_t i = 0; i < r.size(); ++i) {
    n.eps[i] = rng.normal();
    n.r_t[i] = a * r[i] + b * n.eps[i];
  }
  return n;
}

Var noise_mse(Var pred, const Tensor& eps) { return mean_all(square(pred - pred.graph().constant(eps))); }

Var resdiff_loss(Graph& g, const Head& head, const Tensor& r, int t, Var cond, Rng& rng) {
  const Noised n = ddpm_forward(head.ddpm, r, t, rng);
  return noise_mse(predict_noise(g, head, g.constant(n.r_t), t, cond), n.eps);
}

Tensor ddpm_sample(const DdpmSchedule& s, const Shape& shape, const NoiseFn& predict, Rng& rng) {
  Tensor x(shape);
  for (double& v : x.values()) v = rng.normal();
  for (int t = s.T; t >= 1; --t) {
    const Tensor eps = predict(x, t);
    const double beta = s.beta[t];
    const double coef = beta / std::sqrt(1.0 - s.alpha_bar[t]);
    const double inv_sqrt_alpha = 1.0 / std::sqrt(1.0 - beta);
    const double sigma = t > 1 ? std::sqrt(beta * (1.0 - s.alpha_bar[t - 1]) / (1.0 - s.alpha_bar[t])) : 0.0;
    for (std::size_t i = 0; i < x.size(); ++i) {
      x[i] = inv_sqrt_alpha * (x[i] - coef * eps[i]);
      if (t > 1) x[i] += sigma * rng.normal();
    }
  }
  return x;
}

Tensor resdiff_sample(const Head& head, const Tensor& cond, Rng& rng) {
  return ddpm_sample(head.ddpm, Shape{cond.rows(), head.bits},
                     [&](const Tensor& x, int t) {
                       Graph g(false);
                       return predict_noise(g, head, g.constant(x), t, g.constant(cond)).value();
                     },
                     rng);
}

std::vector<Tensor> lm_hidden(const geo::LanguageModel& lm, const dlm::TokenState& state) {
  Graph g(false);
  const geo::LMOutput out = geo::forward(g, lm, state.input());
  std::vector<Tensor> hidden;
  for (const Var& h : out.hidden) hidden.push_back(h.value());
  return hidden;
}

Example make_example(const tok::Tokenizer& tk, const geo::LanguageModel& lm, const geom::BackboneStructure& s,
                     const std::vector<int>& seq) {
  Example ex;
  const Tensor z = tok::encode(tk, s);
  ex.z_quant = tok::quantize(z);
  ex.r = residual(z, ex.z_quant);
  ex.hidden = lm_hidden(lm, dlm::TokenState::observed(seq, tok::bits_to_index(ex.z_quant), tk.bits()));
  return ex;
}

namespace {

std::vector<Var> constants(Graph& g, const std::vector<Tensor>& ts) {
  std::vector<Var> out;
  for (const Tensor& t : ts) out.push_back(g.constant(t));
  return out;
}

} // namespace

Tensor condition_tensor(const Head& head, const Tensor& z_quant, const std::vector<Tensor>& hidden) {
  Graph g(false);
  return condition(g, head, g.constant(z_quant), constants(g, hidden)).value();
}

Tensor refine(const Head& head, const Tensor& z_quant, const std::vector<Tensor>& hidden, Rng& rng) {
  const Tensor r = resdiff_sample(head, condition_tensor(head, z_quant, hidden), rng);
  Tensor z = z_quant;
  for (std::size_t i = 0; i < z.size(); ++i) z[i] += r[i];
  return z;
}

Trainer Trainer::create(Head head, std::uint64_t seed) {
  Trainer t;
  t.head = std::move(head);
  t.rng = Rng(seed ^ 0x7265736469666675ULL);
  return t;
}

void train(Trainer& tr, const std::vector<Example>& data, const TrainOptions& opts) {
  if (opts.steps <= 0) return;
  if (data.empty()) fail(ErrorCode::SpecInvalid, "residual head training needs data");
  const int batch = std::max(1, opts.batch);
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
      const Example& ex = data[order[cursor++]];
      const int t = tr.rng.uniform_int(1, tr.head.ddpm.T);
      Graph g;
      Var cond = condition(g, tr.head, g.constant(ex.z_quant), constants(g, ex.hidden));
      Var loss = resdiff_loss(g, tr.head, ex.r, t, cond, tr.rng);
      const double v = loss.value().item();
      if (!std::isfinite(v)) fail(ErrorCode::NonFiniteLoss, "residual loss is " + std::to_string(v));
      loss_sum += v;
      Gradients grads = g.backward(loss, tr.head.params);
      if (b == 0)
        total = std::move(grads);
      else
        accumulate_gradients(total, grads);
    }
    scale_gradients(total, 1.0 / batch);
    tr.adam.step(tr.head.params, total, opts.lr.at(tr.step));
    ++tr.step;
    tr.losses.push_back(loss_sum / batch);
    if (opts.on_step) opts.on_step(tr.step, tr.losses.back());
  }
}

} // namespace bitfold::resdiff
