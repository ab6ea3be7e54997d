#ifndef BITFOLD_NN_HPP_
#define BITFOLD_NN_HPP_

#include <cstdint>
#include <optional>
#include <string>

#include "bitfold/ops.hpp"

// Layer building blocks. A layer is a naming convention over a ParameterSet:
// add_* registers tensors under `name.*`, the matching function runs it.

namespace bitfold::nn {

enum class Init { Default, Zero };

void add_linear(ParameterSet& ps, const std::string& name, int in, int out, std::uint64_t seed,
                Init init = Init::Default, bool bias = true);
Var linear(Graph& g, const ParameterSet& ps, const std::string& name, Var x);

void add_layernorm(ParameterSet& ps, const std::string& name, int dim);
Var layer_norm(Graph& g, const ParameterSet& ps, const std::string& name, Var x);

/// linear -> silu -> ... -> linear, `layers` linear maps in total.
void add_mlp(ParameterSet& ps, const std::string& name, int in, int hidden, int out, int layers,
             std::uint64_t seed, Init last = Init::Default);
Var mlp(Graph& g, const ParameterSet& ps, const std::string& name, Var x, int layers);

/// Scaled dot-product attention over rows of q/k/v (L, H*dh). `bias`, if given,
/// is (H, L, L) and added to the logits.
Var multi_head_attention(Var q, Var k, Var v, int heads, std::optional<Var> bias = std::nullopt);

/// Relative-position bias (H, L, L) from a (2*clip+1, H) table:
/// bias[h][i][j] = table[clamp(pos[j] - pos[i], -clip, clip) + clip][h].
Var relative_position_bias(Graph& g, const ParameterSet& ps, const std::string& name,
                           const std::vector<int>& positions, int clip);

void add_embedding(ParameterSet& ps, const std::string& name, int rows, int dim, std::uint64_t seed,
                   double stddev = 1.0);

/// Sinusoidal features of a scalar, dim must be even.
Tensor sinusoidal_embedding(double t, int dim);

} // namespace bitfold::nn

#endif
