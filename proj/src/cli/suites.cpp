#include "bitfold/suites.hpp"

#include <algorithm>
#include <chrono>
#include <functional>
#include <map>

#include "bitfold/alphabet.hpp"
#include "bitfold/error.hpp"
#include "bitfold/grad_check.hpp"
#include "bitfold/lm_train.hpp"
#include "bitfold/resdiff.hpp"

namespace bitfold::suites {

namespace {

void randomize(ParameterSet& ps, std::uint64_t seed, double stddev) {
  Rng rng(seed);
  for (auto& [name, t] : ps) {
    const bool gain = name.size() > 6 && name.compare(name.size() - 6, 6, ".gamma") == 0;
    for (double& v : t.values()) v = (gain ? 1.0 : 0.0) + rng.normal(0.0, stddev);
  }
}

Tensor noise(Shape shape, std::uint64_t seed, double stddev = 1.0) {
  Rng rng(seed);
  Tensor t(std::move(shape));
  for (double& v : t.values()) v = rng.normal(0.0, stddev);
  return t;
}

BlockConfig tiny_dims() {
  BlockConfig c;
  c.d_model = 8;
  c.heads = 2;
  c.d_pair = 4;
  c.d_pair_hidden = 6;
  c.d_tri_update = 3;
  c.d_tri_attn_head = 2;
  c.heads_tri = 2;
  c.heads_pair_bias = 2;
  c.transition_ratio = 2;
  c.d_seqstruct = 6;
  c.heads_seqstruct = 2;
  return c;
}

dlm::TokenState random_state(int l, int bits, std::uint64_t seed) {
  Rng rng(seed);
  std::vector<int> seq(l), st(l);
  for (int i = 0; i < l; ++i) {
    seq[i] = rng.uniform_int(0, kNumAminoAcids - 1);
    st[i] = rng.uniform_int(0, tok::codebook_size(bits) - 1);
  }
  return dlm::TokenState::observed(std::move(seq), std::move(st), bits);
}

GradCheckReport check(const ScalarFn& fn, const ParameterSet& ps, std::uint64_t seed, std::size_t max_elements) {
  GradCheckOptions opt;
  opt.seed = seed;
  opt.max_elements_per_tensor = max_elements;
  return grad_check(fn, ps, opt);
}

GradCheckReport lm_loss_check(HeadKind head, std::uint64_t seed) {
  LmConfig lm;
  lm.blocks = 1;
  lm.head = head;
  lm.diffusion_steps = 20;
  lm.rel_clip = 4;
  BlockConfig bc = tiny_dims();
  bc.pair_bias_and_pair_transition = true;
  bc.struct_transition = true;
  geo::LanguageModel m = geo::LanguageModel::create(lm, bc, 3, seed);
  randomize(m.params, seed, 0.2);
  const dlm::NoiseSchedule s = dlm::make_schedule(20);
  const dlm::TokenState x0 = random_state(5, 3, seed + 20);
  Rng rng(seed);
  dlm::TokenState xt = dlm::forward_mask(x0, 12, s, dlm::Conditioning::None, rng);
  xt.seq[0] = kAaMask;
  xt.structure[1] = tok::mask_token(3);
  ScalarFn fn = [&](Graph& g, const ParameterSet& p) {
    geo::LanguageModel local = m;
    local.params.assign_from(p);
    return dlm::training_loss(g, local, x0, xt, 12, s, 0.0, nullptr);
  };
  return check(fn, m.params, seed, 4);
}

GradCheckReport repa_check(std::uint64_t seed) {
  std::vector<Tensor> layers;
  for (int i = 0; i < 3; ++i) layers.push_back(noise({5, 6}, 40 + i));
  const Tensor target = noise({5, 4}, 41);
  ParameterSet ps;
  repa::add_head(ps, "r", 3, 6, 8, 4, seed);
  randomize(ps, seed + 5, 0.5);
  ScalarFn fn = [&](Graph& g, const ParameterSet& p) {
    std::vector<Var> hidden;
    for (const Tensor& t : layers) hidden.push_back(g.constant(t));
    return repa::repa_loss(g, p, "r", hidden, target);
  };
  return check(fn, ps, seed, 24);
}

GradCheckReport resdiff_check(std::uint64_t seed) {
  std::vector<Tensor> hidden;
  for (int i = 0; i < 3; ++i) hidden.push_back(noise({4, 6}, 11 + i));
  const Tensor zq = tok::quantize(noise({4, 4}, 14));
  const Tensor r = noise({4, 4}, 15, 0.5);
  ResDiffConfig cfg;
  cfg.enabled = true;
  cfg.steps = 10;
  cfg.hidden = 8;
  cfg.layers = 2;
  resdiff::Head h = resdiff::Head::create(cfg, 4, 6, 3, seed);
  randomize(h.params, seed, 0.3);
  ScalarFn fn = [&](Graph& g, const ParameterSet& p) {
    resdiff::Head local = h;
    local.params.assign_from(p);
    Rng rng(seed);
    std::vector<Var> hv;
    for (const Tensor& t : hidden) hv.push_back(g.constant(t));
    Var cond = resdiff::condition(g, local, g.constant(zq), hv);
    return resdiff::resdiff_loss(g, local, r, 4, cond, rng);
  };
  return check(fn, h.params, seed, 8);
}

GradCheckReport layer_check(const std::string& target, std::uint64_t seed) {
  const BlockConfig cfg = tiny_dims();
  const int l = 4, dp = cfg.d_pair, d = 4;
  ParameterSet ps;
  ScalarFn fn;
  if (target == "transition") {
    geo::add_transition(ps, "tr", d, 2, seed);
    ps.add("x", noise({3, 3, d}, seed + 1));
    const Tensor w = noise({3, 3, d}, seed + 2);
    fn = [w](Graph& g, const ParameterSet& q) { return sum_all(geo::transition(g, q, "tr", g.param(q, "x")) * g.constant(w)); };
  } else if (target == "pair_bias_attention") {
    geo::add_attn_pair_bias(ps, "pb", d, d, 2, dp, seed);
    ps.add("h", noise({l, d}, seed + 1));
    ps.add("pair", noise({l, l, dp}, seed + 2));
    const Tensor w = noise({l, d}, seed + 3);
    fn = [w](Graph& g, const ParameterSet& q) {
      return sum_all(geo::attn_pair_bias(g, q, "pb", g.param(q, "h"), g.param(q, "pair"), 2) * g.constant(w));
    };
  } else if (target == "triangle_update") {
    geo::add_triangle_update(ps, "tu", cfg, seed);
    ps.add("pair", noise({l, l, dp}, seed + 1));
    const Tensor w = noise({l, l, dp}, seed + 2);
    fn = [w](Graph& g, const ParameterSet& q) {
      Var p = g.param(q, "pair");
      return sum_all((geo::triangle_update(g, q, "tu", p, geo::TriangleMode::Outgoing) +
                      geo::triangle_update(g, q, "tu", p, geo::TriangleMode::Incoming)) *
                     g.constant(w));
    };
  } else if (target == "triangle_attention") {
    geo::add_triangle_attention(ps, "ta", cfg, seed);
    ps.add("pair", noise({l, l, dp}, seed + 1));
    const Tensor w = noise({l, l, dp}, seed + 2);
    const int heads = cfg.heads_tri;
    fn = [w, heads](Graph& g, const ParameterSet& q) {
      Var p = g.param(q, "pair");
      return sum_all((geo::triangle_attention(g, q, "ta", p, geo::TriangleAttnMode::Starting, heads) +
                      geo::triangle_attention(g, q, "ta", p, geo::TriangleAttnMode::Ending, heads)) *
                     g.constant(w));
    };
  } else if (target == "seqstruct_attention") {
    geo::add_seqstruct_attention(ps, "ss", d, cfg, seed);
    ps.add("hs", noise({l, d}, seed + 1));
    ps.add("ht", noise({l, d}, seed + 2));
    ps.add("pair", noise({l, l, dp}, seed + 3));
    const Tensor w1 = noise({l, d}, seed + 4), w2 = noise({l, d}, seed + 5);
    const int heads = cfg.heads_seqstruct;
    fn = [w1, w2, heads](Graph& g, const ParameterSet& q) {
      geo::TrackPair r = geo::seqstruct_attention(g, q, "ss", g.param(q, "hs"), g.param(q, "ht"), g.param(q, "pair"), heads);
      return sum_all(r.seq * g.constant(w1)) + sum_all(r.structure * g.constant(w2));
    };
  } else {
    fail(ErrorCode::InvalidConfig, "unknown gradient target '" + target + "'");
  }
  // Inputs keep their values; only the layer's own parameters are noised.
  ParameterSet layer;
  for (const auto& [name, t] : ps)
    if (name.find('.') != std::string::npos) layer.add(name, t);
  randomize(layer, seed + 100, 0.3);
  ps.assign_from(layer);
  return check(fn, ps, seed, 24);
}

} // namespace

std::vector<GradRow> gradient_suite(const std::vector<std::uint64_t>& seeds, const std::vector<std::string>& targets) {
  std::vector<GradRow> rows;
  for (const std::string& name : targets)
    for (std::uint64_t seed : seeds) {
      GradCheckReport r;
      if (name == "index_ce")
        r = lm_loss_check(HeadKind::Index, seed);
      else if (name == "bit_ce")
        r = lm_loss_check(HeadKind::Bit, seed);
      else if (name == "repa")
        r = repa_check(seed);
      else if (name == "resdiff")
        r = resdiff_check(seed);
      else
        r = layer_check(name, seed);
      rows.push_back({name, seed, r.max_rel_error, r.worst_param});
    }
  return rows;
}

BlockConfig variant_block(const std::string& name, const BlockConfig& dims) {
  static const std::map<std::string, int> level = {{"plain", 0}, {"base", 1}, {"st", 2}, {"tu", 3}, {"ta", 4}, {"ssa", 5}};
  const auto it = level.find(name);
  if (it == level.end()) fail(ErrorCode::InvalidConfig, "unknown encoder variant '" + name + "'");
  BlockConfig b = dims;
  b.pair_bias_and_pair_transition = it->second >= 1;
  b.struct_transition = it->second >= 2;
  b.triangle_update = it->second >= 3;
  b.triangle_attention = it->second >= 4;
  b.seqstruct_attention = it->second >= 5;
  return b;
}

std::vector<BenchRow> block_benchmark(const BenchOptions& opts) {
  if (opts.reps < 1 || opts.length < 1) fail(ErrorCode::InvalidConfig, "benchmark needs reps >= 1 and length >= 1");
  const int bits = 8;
  const dlm::NoiseSchedule s = dlm::make_schedule(100);
  const dlm::TokenState x0 = random_state(opts.length, bits, opts.seed + 1);
  Rng rng(opts.seed);
  const dlm::TokenState xt = dlm::forward_mask(x0, 50, s, dlm::Conditioning::None, rng);
  std::vector<BenchRow> rows;
  for (const std::string& v : opts.variants) {
    LmConfig lm;
    lm.blocks = opts.blocks;
    lm.diffusion_steps = 100;
    const geo::LanguageModel m = geo::LanguageModel::create(lm, variant_block(v, opts.dims), bits, opts.seed);
    std::vector<double> times;
    for (int r = 0; r < opts.warmup + opts.reps; ++r) {
      const auto start = std::chrono::steady_clock::now();
      Graph g;
      Var loss = dlm::training_loss(g, m, x0, xt, 50, s, 0.0, nullptr);
      const Gradients grads = g.backward(loss, m.params);
      const double sec = std::chrono::duration<double>(std::chrono::steady_clock::now() - start).count();
      if (r >= opts.warmup && !grads.empty()) times.push_back(sec);
    }
    std::sort(times.begin(), times.end());
    rows.push_back({v, times[times.size() / 2], m.params.scalar_count()});
  }
  return rows;
}

} // namespace bitfold::suites
