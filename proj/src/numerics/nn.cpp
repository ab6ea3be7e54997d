#include "bitfold/nn.hpp"

#include <algorithm>
#include <cmath>

namespace bitfold::nn {

void add_linear(ParameterSet& ps, const std::string& name, int in, int out, std::uint64_t seed, Init init,
                bool bias) {
  if (init == Init::Zero)
    ps.add(name + ".w", Tensor(Shape{in, out}));
  else
    ps.add(name + ".w", init_normal({in, out}, 1.0 / std::sqrt(static_cast<double>(in)), seed, name + ".w"));
  if (bias) ps.add(name + ".b", Tensor(Shape{out}));
}

Var linear(Graph& g, const ParameterSet& ps, const std::string& name, Var x) {
  Var y = matmul(x, g.param(ps, name + ".w"));
  if (ps.contains(name + ".b")) y = add(y, g.param(ps, name + ".b"));
  return y;
}

void add_layernorm(ParameterSet& ps, const std::string& name, int dim) {
  ps.add(name + ".gamma", Tensor(Shape{dim}, 1.0));
  ps.add(name + ".beta", Tensor(Shape{dim}));
}

Var layer_norm(Graph& g, const ParameterSet& ps, const std::string& name, Var x) {
  return add(mul(layernorm_last(x), g.param(ps, name + ".gamma")), g.param(ps, name + ".beta"));
}

void add_mlp(ParameterSet& ps, const std::string& name, int in, int hidden, int out, int layers,
             std::uint64_t seed, Init last) {
  for (int i = 0; i < layers; ++i) {
    const int a = i == 0 ? in : hidden;
    const int b = i == layers - 1 ? out : hidden;
    add_linear(ps, name + "." + std::to_string(i), a, b, seed, i == layers - 1 ? last : Init::Default);
  }
}

Var mlp(Graph& g, const ParameterSet& ps, const std::string& name, Var x, int layers) {
  for (int i = 0; i < layers; ++i) {
    x = linear(g, ps, name + "." + std::to_string(i), x);
    if (i + 1 < layers) x = silu(x);
  }
  return x;
}

Var multi_head_attention(Var q, Var k, Var v, int heads, std::optional<Var> bias) {
  const int l = q.dim(0);
  const int dh = q.dim(1) / heads;
  auto split = [&](Var x) { return permute(reshape(x, {x.dim(0), heads, dh}), {1, 0, 2}); };
  Var logits = scale(bmm(split(q), split(k), false, true), 1.0 / std::sqrt(static_cast<double>(dh)));
  if (bias) logits = add(logits, *bias);
  Var attn = softmax_last(logits);
  Var out = bmm(attn, split(v));  // (H, L, dh)
  return reshape(permute(out, {1, 0, 2}), {l, heads * dh});
}

Var relative_position_bias(Graph& g, const ParameterSet& ps, const std::string& name,
                           const std::vector<int>& positions, int clip) {
  const int l = static_cast<int>(positions.size());
  std::vector<int> idx(static_cast<std::size_t>(l) * l);
  for (int i = 0; i < l; ++i)
    for (int j = 0; j < l; ++j)
      idx[static_cast<std::size_t>(i) * l + j] = std::clamp(positions[j] - positions[i], -clip, clip) + clip;
  Var table = g.param(ps, name);
  return permute(gather_rows(table, idx, {l, l}), {2, 0, 1});
}

void add_embedding(ParameterSet& ps, const std::string& name, int rows, int dim, std::uint64_t seed,
                   double stddev) {
  ps.add(name, init_normal({rows, dim}, stddev, seed, name));
}

Tensor sinusoidal_embedding(double t, int dim) {
  Tensor e(Shape{dim});
  const int half = dim / 2;
  for (int i = 0; i < half; ++i) {
    const double freq = std::exp(-std::log(10000.0) * i / std::max(1, half));
    e[i] = std::sin(t * freq);
    e[half + i] = std::cos(t * freq);
  }
  return e;
}

} // namespace bitfold::nn
