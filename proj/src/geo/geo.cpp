#include "bitfold/geo.hpp"

#include <algorithm>
#include <cmath>

#include "bitfold/alphabet.hpp"
#include "bitfold/error.hpp"
#include "bitfold/nn.hpp"

namespace bitfold::geo {

using nn::Init;

namespace {

// Gated attention with per-head logit bias projected from the pair stream.
// x is already normalized.
Var pair_bias_core(Graph& g, const ParameterSet& ps, const std::string& name, Var x, Var pair, int heads,
                   std::optional<Var> key_bias) {
  Var q = nn::linear(g, ps, name + ".q", x);
  Var k = nn::linear(g, ps, name + ".k", x);
  Var v = nn::linear(g, ps, name + ".v", x);
  Var bias = permute(nn::linear(g, ps, name + ".b", pair), {2, 0, 1});
  if (key_bias) bias = bias + *key_bias;
  Var attn = nn::multi_head_attention(q, k, v, heads, bias);
  Var gate = sigmoid(nn::linear(g, ps, name + ".g", x));
  return nn::linear(g, ps, name + ".o", gate * attn);
}

void add_gate(ParameterSet& ps, const std::string& name, int in, int out) {
  nn::add_linear(ps, name, in, out, 0, Init::Zero);
  ps.get(name + ".b").fill(1.0);
}

// Attention along the last pair axis for every row: queries (i, j), keys
// (i, k), logits biased by b(pair[j][k]).
Var triangle_rows(Graph& g, const ParameterSet& ps, const std::string& name, Var pair, int heads) {
  const int l = pair.dim(0);
  Var x = nn::layer_norm(g, ps, name + ".ln", pair);
  Var q = nn::linear(g, ps, name + ".q", x);
  Var k = nn::linear(g, ps, name + ".k", x);
  Var v = nn::linear(g, ps, name + ".v", x);
  const int dh = q.dim(2) / heads;
  auto split = [&](Var t) { return reshape(permute(reshape(t, {l, l, heads, dh}), {0, 2, 1, 3}), {l * heads, l, dh}); };
  Var logits = scale(bmm(split(q), split(k), false, true), 1.0 / std::sqrt(static_cast<double>(dh)));
  Var bias = permute(nn::linear(g, ps, name + ".b", x), {2, 0, 1});
  logits = add(reshape(logits, {l, heads, l, l}), bias);
  Var attn = reshape(softmax_last(logits), {l * heads, l, l});
  Var out = reshape(permute(reshape(bmm(attn, split(v)), {l, heads, l, dh}), {0, 2, 1, 3}), {l, l, heads * dh});
  Var gate = sigmoid(nn::linear(g, ps, name + ".g", x));
  return nn::linear(g, ps, name + ".o", gate * out);
}

} // namespace

void add_init_pair(ParameterSet& ps, const std::string& name, int d_in, const BlockConfig& cfg, std::uint64_t seed) {
  nn::add_mlp(ps, name, 2 * d_in, cfg.d_pair_hidden, cfg.d_pair, 3, seed);
}

Var init_pair(Graph& g, const ParameterSet& ps, const std::string& name, Var h) {
  // The first layer of MLP(concat(h_i, h_j)) splits into W_top h_i + W_bot h_j.
  const int d = h.dim(1);
  Var w0 = g.param(ps, name + ".0.w");
  Var a = add(matmul(h, slice(w0, 0, 0, d)), g.param(ps, name + ".0.b"));
  Var b = matmul(h, slice(w0, 0, d, d));
  Var x = silu(outer_add(a, b));
  x = silu(nn::linear(g, ps, name + ".1", x));
  return nn::linear(g, ps, name + ".2", x);
}

void add_attn_pair_bias(ParameterSet& ps, const std::string& name, int d_in, int d_inner, int heads, int d_pair,
                        std::uint64_t seed) {
  nn::add_layernorm(ps, name + ".ln", d_in);
  for (const char* p : {".q", ".k", ".v"}) nn::add_linear(ps, name + p, d_in, d_inner, seed, Init::Default, false);
  nn::add_linear(ps, name + ".b", d_pair, heads, seed, Init::Default, false);
  add_gate(ps, name + ".g", d_in, d_inner);
  nn::add_linear(ps, name + ".o", d_inner, d_in, seed, Init::Zero);
}

Var attn_pair_bias(Graph& g, const ParameterSet& ps, const std::string& name, Var h, Var pair, int heads,
                   std::optional<Var> key_bias) {
  return pair_bias_core(g, ps, name, nn::layer_norm(g, ps, name + ".ln", h), pair, heads, key_bias);
}

void add_transition(ParameterSet& ps, const std::string& name, int dim, int ratio, std::uint64_t seed) {
  if (ratio < 1) fail(ErrorCode::InvalidConfig, "transition ratio must be >= 1");
  nn::add_layernorm(ps, name + ".ln", dim);
  nn::add_linear(ps, name + ".a", dim, dim * ratio, seed);
  nn::add_linear(ps, name + ".b", dim, dim * ratio, seed);
  nn::add_linear(ps, name + ".o", dim * ratio, dim, seed, Init::Zero);
}

Var transition(Graph& g, const ParameterSet& ps, const std::string& name, Var x) {
  Var y = nn::layer_norm(g, ps, name + ".ln", x);
  Var h = silu(nn::linear(g, ps, name + ".a", y)) * nn::linear(g, ps, name + ".b", y);
  return nn::linear(g, ps, name + ".o", h);
}

void add_triangle_update(ParameterSet& ps, const std::string& name, const BlockConfig& cfg, std::uint64_t seed) {
  const int dp = cfg.d_pair, c = cfg.d_tri_update;
  nn::add_layernorm(ps, name + ".ln", dp);
  for (const char* p : {".ag", ".av", ".bg", ".bv"}) nn::add_linear(ps, name + p, dp, c, seed);
  add_gate(ps, name + ".g", dp, dp);
  nn::add_layernorm(ps, name + ".ln_out", c);
  nn::add_linear(ps, name + ".o", c, dp, seed, Init::Zero);
}

Var triangle_update(Graph& g, const ParameterSet& ps, const std::string& name, Var pair, TriangleMode mode) {
  Var x = nn::layer_norm(g, ps, name + ".ln", pair);
  Var a = sigmoid(nn::linear(g, ps, name + ".ag", x)) * nn::linear(g, ps, name + ".av", x);
  Var b = sigmoid(nn::linear(g, ps, name + ".bg", x)) * nn::linear(g, ps, name + ".bv", x);
  // Channel-major (c, row, col) so every channel is one matrix product.
  Var ac = permute(a, {2, 0, 1});
  Var bc = permute(b, {2, 0, 1});
  Var t = mode == TriangleMode::Outgoing ? bmm(ac, bc, false, true) : bmm(ac, bc, true, false);
  t = nn::layer_norm(g, ps, name + ".ln_out", permute(t, {1, 2, 0}));
  Var gate = sigmoid(nn::linear(g, ps, name + ".g", x));
  return gate * nn::linear(g, ps, name + ".o", t);
}

void add_triangle_attention(ParameterSet& ps, const std::string& name, const BlockConfig& cfg, std::uint64_t seed) {
  const int dp = cfg.d_pair, inner = cfg.heads_tri * cfg.d_tri_attn_head;
  nn::add_layernorm(ps, name + ".ln", dp);
  for (const char* p : {".q", ".k", ".v"}) nn::add_linear(ps, name + p, dp, inner, seed, Init::Default, false);
  nn::add_linear(ps, name + ".b", dp, cfg.heads_tri, seed, Init::Default, false);
  add_gate(ps, name + ".g", dp, inner);
  nn::add_linear(ps, name + ".o", inner, dp, seed, Init::Zero);
}

Var triangle_attention(Graph& g, const ParameterSet& ps, const std::string& name, Var pair, TriangleAttnMode mode,
                       int heads) {
  if (mode == TriangleAttnMode::Starting) return triangle_rows(g, ps, name, pair, heads);
  // Ending node: the same computation on the transposed map.
  return permute(triangle_rows(g, ps, name, permute(pair, {1, 0, 2}), heads), {1, 0, 2});
}

void add_seqstruct_attention(ParameterSet& ps, const std::string& name, int d_model, const BlockConfig& cfg,
                             std::uint64_t seed) {
  const int d = 2 * d_model, inner = cfg.d_seqstruct;
  nn::add_layernorm(ps, name + ".ln_seq", d_model);
  nn::add_layernorm(ps, name + ".ln_struct", d_model);
  for (const char* p : {".q", ".k", ".v"}) nn::add_linear(ps, name + p, d, inner, seed, Init::Default, false);
  nn::add_linear(ps, name + ".b", cfg.d_pair, cfg.heads_seqstruct, seed, Init::Default, false);
  add_gate(ps, name + ".g", d, inner);
  nn::add_linear(ps, name + ".o", inner, d, seed, Init::Zero);
}

TrackPair seqstruct_attention(Graph& g, const ParameterSet& ps, const std::string& name, Var h_seq, Var h_struct,
                              Var pair, int heads, std::optional<Var> key_bias) {
  const int d = h_seq.dim(1);
  Var x = concat({nn::layer_norm(g, ps, name + ".ln_seq", h_seq), nn::layer_norm(g, ps, name + ".ln_struct", h_struct)},
                 1);
  Var out = pair_bias_core(g, ps, name, x, pair, heads, key_bias);
  return {slice(out, 1, 0, d), slice(out, 1, d, d)};
}

// ----------------------------------------------------------- language model

namespace {

std::string block_name(int b) { return "blk" + std::to_string(b); }

int struct_vocab(const LanguageModel& m) { return (1 << m.bits) + 2; }

// Relative-position bias over the joint 2L sequence; same-track and
// cross-track pairs use separate halves of the table.
Var joint_position_bias(Graph& g, const ParameterSet& ps, const std::string& name, const std::vector<int>& positions,
                        int clip) {
  const int l = static_cast<int>(positions.size());
  const int n = 2 * l;
  const int width = 2 * clip + 1;
  std::vector<int> idx(static_cast<std::size_t>(n) * n);
  for (int i = 0; i < n; ++i)
    for (int j = 0; j < n; ++j) {
      const int rel = std::clamp(positions[j % l] - positions[i % l], -clip, clip) + clip;
      idx[static_cast<std::size_t>(i) * n + j] = ((i < l) == (j < l) ? 0 : width) + rel;
    }
  return permute(gather_rows(g.param(ps, name), idx, {n, n}), {2, 0, 1});
}

Var embed_structure(Graph& g, const LanguageModel& m, const std::vector<int>& tokens) {
  const int l = static_cast<int>(tokens.size());
  const int v = 1 << m.bits;
  if (m.lm.head == HeadKind::Index) return gather_rows(g.param(m.params, "emb.struct"), tokens, {l});
  // Bit head input: observed rows go through W_input, masked rows take the
  // absorbing embedding, padding its own vector.
  Tensor bits(Shape{l, m.bits});
  Tensor flags(Shape{l, 2});
  for (int i = 0; i < l; ++i) {
    const int t = tokens[i];
    if (t >= 0 && t < v) {
      for (int k = 0; k < m.bits; ++k) bits.at(i, k) = (t >> k) & 1 ? 1.0 : -1.0;
    } else if (t == v) {
      flags.at(i, 0) = 1.0;
    } else if (t == v + 1) {
      flags.at(i, 1) = 1.0;
    } else {
      fail(ErrorCode::IndexOutOfRange, "structure token " + std::to_string(t));
    }
  }
  return matmul(g.constant(std::move(bits)), g.param(m.params, "emb.bits.w")) +
         matmul(g.constant(std::move(flags)), g.param(m.params, "emb.special"));
}

} // namespace

LanguageModel LanguageModel::create(const LmConfig& lm, const BlockConfig& block, int bits, std::uint64_t seed) {
  block.validate();
  if (lm.blocks < 1) fail(ErrorCode::InvalidConfig, "lm.blocks must be >= 1");
  if (bits < 1 || bits > 16) fail(ErrorCode::InvalidConfig, "bits must be in [1, 16]");
  if (block.d_model % block.heads != 0) fail(ErrorCode::InvalidConfig, "d_model must be divisible by heads");
  LanguageModel m;
  m.lm = lm;
  m.block = block;
  m.bits = bits;
  ParameterSet& ps = m.params;
  const int d = block.d_model;
  const int v = 1 << bits;
  nn::add_embedding(ps, "emb.seq", kAaVocab, d, seed, 0.5);
  nn::add_embedding(ps, "emb.track", 2, d, seed, 0.5);
  if (lm.head == HeadKind::Index) {
    nn::add_embedding(ps, "emb.struct", v + 2, d, seed, 0.5);
  } else {
    nn::add_linear(ps, "emb.bits", bits, d, seed, Init::Default, false);
    nn::add_embedding(ps, "emb.special", 2, d, seed, 0.5);
  }
  if (block.has_pair()) add_init_pair(ps, "pair_init", d, block, seed);
  for (int b = 0; b < lm.blocks; ++b) {
    const std::string p = block_name(b);
    nn::add_layernorm(ps, p + ".ln1", d);
    nn::add_linear(ps, p + ".qkv", d, 3 * d, seed, Init::Default, false);
    nn::add_linear(ps, p + ".o", d, d, seed);
    nn::add_embedding(ps, p + ".rel", 2 * (2 * lm.rel_clip + 1), block.heads, seed, 0.1);
    nn::add_layernorm(ps, p + ".ln2", d);
    nn::add_mlp(ps, p + ".mlp", d, 4 * d, d, 2, seed);
    if (block.has_pair()) {
      add_attn_pair_bias(ps, p + ".pb", d, d, block.heads_pair_bias, block.d_pair, seed);
      add_transition(ps, p + ".pt", block.d_pair, block.transition_ratio, seed);
    }
    if (block.seqstruct_attention) add_seqstruct_attention(ps, p + ".ss", d, block, seed);
    if (block.struct_transition) add_transition(ps, p + ".st", d, block.transition_ratio, seed);
    if (block.triangle_update) {
      add_triangle_update(ps, p + ".tuo", block, seed);
      add_triangle_update(ps, p + ".tui", block, seed);
    }
    if (block.triangle_attention) {
      add_triangle_attention(ps, p + ".tas", block, seed);
      add_triangle_attention(ps, p + ".tae", block, seed);
    }
  }
  nn::add_layernorm(ps, "final_ln", d);
  nn::add_linear(ps, "head.seq", d, kNumAminoAcids, seed);
  nn::add_linear(ps, "head.struct", d, lm.head == HeadKind::Index ? v : 2 * bits, seed);
  return m;
}

LMOutput forward(Graph& g, const LanguageModel& m, const LmInput& input) {
  const int l = static_cast<int>(input.seq.size());
  if (l < 1 || static_cast<int>(input.structure.size()) != l || static_cast<int>(input.positions.size()) != l)
    fail(ErrorCode::LengthMismatch, "track lengths differ");
  const BlockConfig& bc = m.block;
  const ParameterSet& ps = m.params;
  const int v = 1 << m.bits;
  for (int s : input.seq)
    if (s < 0 || s >= kAaVocab) fail(ErrorCode::IndexOutOfRange, "sequence token " + std::to_string(s));
  for (int t : input.structure)
    if (t < 0 || t >= struct_vocab(m)) fail(ErrorCode::IndexOutOfRange, "structure token " + std::to_string(t));

  Var h_seq = gather_rows(g.param(ps, "emb.seq"), input.seq, {l});
  Var h_struct = embed_structure(g, m, input.structure);
  std::vector<int> track(2 * l, 0);
  std::fill(track.begin() + l, track.end(), 1);
  Var x = concat({h_seq, h_struct}, 0) + gather_rows(g.param(ps, "emb.track"), track, {2 * l});

  // Padding keys are excluded from every query's softmax.
  std::optional<Var> key_mask, struct_key_mask;
  {
    Tensor mask(Shape{2 * l, 2 * l});
    Tensor struct_mask(Shape{l, l});
    bool any = false, any_struct = false;
    for (int j = 0; j < 2 * l; ++j) {
      const bool pad = j < l ? input.seq[j] == kAaPad : input.structure[j - l] == v + 1;
      if (!pad) continue;
      any = true;
      for (int i = 0; i < 2 * l; ++i) mask.at(i, j) = -1e9;
      if (j < l) continue;
      any_struct = true;
      for (int i = 0; i < l; ++i) struct_mask.at(i, j - l) = -1e9;
    }
    if (any) key_mask = g.constant(std::move(mask));
    if (any_struct) struct_key_mask = g.constant(std::move(struct_mask));
  }

  Var pair;
  if (bc.has_pair()) pair = init_pair(g, ps, "pair_init", slice(x, 0, l, l));

  LMOutput out;
  out.head = m.lm.head;
  out.bits = m.bits;
  const int d = bc.d_model;
  for (int b = 0; b < m.lm.blocks; ++b) {
    const std::string p = block_name(b);
    Var y = nn::layer_norm(g, ps, p + ".ln1", x);
    Var qkv = nn::linear(g, ps, p + ".qkv", y);
    Var bias = joint_position_bias(g, ps, p + ".rel", input.positions, m.lm.rel_clip);
    if (key_mask) bias = bias + *key_mask;
    Var att = nn::multi_head_attention(slice(qkv, 1, 0, d), slice(qkv, 1, d, d), slice(qkv, 1, 2 * d, d), bc.heads,
                                       bias);
    x = x + nn::linear(g, ps, p + ".o", att);

    if (bc.any_geo()) {
      Var hs = slice(x, 0, 0, l);
      Var ht = slice(x, 0, l, l);
      if (bc.has_pair()) ht = ht + attn_pair_bias(g, ps, p + ".pb", ht, pair, bc.heads_pair_bias, struct_key_mask);
      if (bc.seqstruct_attention) {
        TrackPair delta = seqstruct_attention(g, ps, p + ".ss", hs, ht, pair, bc.heads_seqstruct, struct_key_mask);
        hs = hs + delta.seq;
        ht = ht + delta.structure;
      }
      x = concat({hs, ht}, 0);
    }
    x = x + nn::mlp(g, ps, p + ".mlp", nn::layer_norm(g, ps, p + ".ln2", x), 2);
    if (bc.struct_transition) {
      Var ht = slice(x, 0, l, l);
      x = concat({slice(x, 0, 0, l), ht + transition(g, ps, p + ".st", ht)}, 0);
    }

    if (bc.has_pair()) {
      if (bc.triangle_update) {
        pair = pair + triangle_update(g, ps, p + ".tuo", pair, TriangleMode::Outgoing);
        pair = pair + triangle_update(g, ps, p + ".tui", pair, TriangleMode::Incoming);
      }
      if (bc.triangle_attention) {
        pair = pair + triangle_attention(g, ps, p + ".tas", pair, TriangleAttnMode::Starting, bc.heads_tri);
        pair = pair + triangle_attention(g, ps, p + ".tae", pair, TriangleAttnMode::Ending, bc.heads_tri);
      }
      pair = pair + transition(g, ps, p + ".pt", pair);
    }
    out.hidden.push_back(slice(x, 0, l, l));
  }

  Var final_h = nn::layer_norm(g, ps, "final_ln", x);
  out.seq_logits = nn::linear(g, ps, "head.seq", slice(final_h, 0, 0, l));
  Var s = nn::linear(g, ps, "head.struct", slice(final_h, 0, l, l));
  out.struct_logits = m.lm.head == HeadKind::Index ? s : reshape(s, {l, m.bits, 2});
  return out;
}

} // namespace bitfold::geo
