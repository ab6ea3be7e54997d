// Acceptance report: one PASS/FAIL line per criterion. The exit status is
// nonzero when a criterion fails that is not listed with --allow-fail.

#include <algorithm>
#include <array>
#include <chrono>
#include <cmath>
#include <cstdio>
#include <filesystem>
#include <functional>
#include <map>
#include <numbers>
#include <optional>
#include <set>
#include <string>
#include <vector>

#include <CLI11.hpp>
#include <fmt/core.h>

#include "bitfold/alphabet.hpp"
#include "bitfold/fm.hpp"
#include "bitfold/multimer.hpp"
#include "bitfold/pipeline.hpp"
#include "bitfold/suites.hpp"
#include "lm_reference.hpp"
#include "stats.hpp"
#include "test_util.hpp"

using namespace bitfold;
using geom::BackboneStructure;
using testutil::permute_pair;
using testutil::permute_rows;
using testutil::random_tensor;
using testutil::randomize;

namespace {

struct Outcome {
  bool pass = true;
  std::vector<std::string> notes;

  void expect(bool ok, const std::string& what) {
    if (!ok) {
      pass = false;
      notes.push_back("FAILED " + what);
    }
  }
  void note(const std::string& s) { notes.push_back(s); }
};

double seconds_since(std::chrono::steady_clock::time_point t0) {
  return std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
}

// ------------------------------------------------------------ shared toy task

// Synthetic structures for the tokenizer, the head comparison and the
// residual head: 200 training and 40 held-out items of length 48.
constexpr int kTrainItems = 200;
constexpr int kHeldOut = 40;
constexpr int kToyLength = 48;
constexpr std::uint64_t kToySeed = 2024;

constexpr int kTokenizerSteps = 1500;
constexpr int kHeadLmSteps = 600;
constexpr int kResDiffSteps = 3000;

ModelConfig toy_config() {
  ModelConfig c;
  c.lm.blocks = 2;
  c.lm.diffusion_steps = 50;
  c.block.d_model = 64;
  c.block.heads = 4;
  c.train.lr_peak = 2e-3;
  c.train.warmup = 50;
  c.train.lr_final = 2e-4;
  c.train.batch = 8;
  return c;
}

struct Shared {
  std::vector<eval::EvalItem> train, test;
  std::optional<tok::Tokenizer> tokenizer;
  std::map<std::pair<int, std::uint64_t>, app::Pipeline> lms;  // (head, seed)

  Shared() {
    app::DataSpec spec;
    spec.n = kTrainItems + kHeldOut;
    spec.length = kToyLength;
    spec.seed = kToySeed;
    const auto all = app::generate_dataset(spec);
    train.assign(all.begin(), all.begin() + kTrainItems);
    test.assign(all.begin() + kTrainItems, all.end());
  }

  const tok::Tokenizer& tk() {
    if (!tokenizer) {
      const auto t0 = std::chrono::steady_clock::now();
      std::vector<BackboneStructure> data;
      for (const auto& e : train) data.push_back(e.structure);
      tok::TokenizerTrainOptions opts;
      opts.steps = kTokenizerSteps;
      opts.batch = 8;
      opts.lr = LrSchedule{1e-3, 100, 1e-4, kTokenizerSteps};
      opts.seed = 1;
      tokenizer = tok::train_tokenizer(data, toy_config().tokenizer, opts).tokenizer;
      std::printf("  (tokenizer: %d structures, %d steps, %.0f s)\n", kTrainItems, kTokenizerSteps, seconds_since(t0));
      std::fflush(stdout);
    }
    return *tokenizer;
  }

  const app::Pipeline& lm(HeadKind head, std::uint64_t seed) {
    const auto key = std::make_pair(static_cast<int>(head), seed);
    auto it = lms.find(key);
    if (it != lms.end()) return it->second;
    app::Pipeline p;
    p.cfg = toy_config();
    p.cfg.lm.head = head;
    p.cfg.train.seed = seed;
    p.cfg.train.steps = kHeadLmSteps;
    p.tokenizer = tk();
    app::train_lm_stage(p, train, {});
    return lms.emplace(key, std::move(p)).first->second;
  }
};

Shared& shared() {
  static Shared s;
  return s;
}

// ------------------------------------------------------------ 1 codec

Outcome codec_exactness() {
  Outcome o;
  const auto t0 = std::chrono::steady_clock::now();
  for (int k : {4, 8, 12}) {
    const int n = 1 << k;
    std::vector<int> all(n);
    for (int i = 0; i < n; ++i) all[i] = i;
    const Tensor bits = tok::index_to_bits(all, k);
    o.expect(tok::bits_to_index(bits) == all, fmt::format("index roundtrip K={}", k));
    bool signs = true;
    std::set<std::vector<double>> patterns;
    for (int i = 0; i < n; ++i) {
      std::vector<double> row(k);
      for (int b = 0; b < k; ++b) {
        row[b] = bits.at(i, b);
        signs = signs && row[b] == (((i >> b) & 1) ? 1.0 : -1.0);
      }
      patterns.insert(row);
    }
    o.expect(signs, fmt::format("bit k of index i is sign of (i >> k) & 1, K={}", k));
    o.expect(static_cast<int>(patterns.size()) == n, fmt::format("distinct sign patterns K={}", k));
    o.expect(tok::index_to_bits(tok::bits_to_index(bits), k) == bits, fmt::format("bits roundtrip K={}", k));
    for (int bad : {tok::mask_token(k), tok::pad_token(k), -1}) {
      bool raised = false;
      try {
        tok::index_to_bits({bad}, k);
      } catch (const Error& e) {
        raised = e.code() == ErrorCode::IndexOutOfRange;
      }
      o.expect(raised, fmt::format("IndexOutOfRange for {} at K={}", bad, k));
    }
  }
  const double secs = seconds_since(t0);
  o.expect(secs < 1.0, "under 1 s");
  o.note(fmt::format("K=4,8,12 exhaustive in {:.3f} s", secs));
  return o;
}

// ------------------------------------------------------------ 2 gradients

Outcome gradient_suite() {
  Outcome o;
  const auto t0 = std::chrono::steady_clock::now();
  double worst = 0.0;
  std::string worst_name;
  for (const suites::GradRow& r : suites::gradient_suite({1, 2, 3})) {
    o.expect(r.max_rel_error < 1e-4, fmt::format("{} seed {} ({:.3g} at {})", r.name, r.seed, r.max_rel_error, r.worst_param));
    if (r.max_rel_error > worst) {
      worst = r.max_rel_error;
      worst_name = r.name;
    }
  }
  const double secs = seconds_since(t0);
  o.expect(secs < 120.0, "under 2 min");
  o.note(fmt::format("{} objectives x 3 seeds, worst {:.2e} ({}), {:.1f} s", suites::kGradientTargets.size(), worst,
                     worst_name, secs));
  return o;
}

// ------------------------------------------------------------ 3 diffusion

Outcome diffusion_correctness() {
  using namespace dlm;
  Outcome o;
  const auto t0 = std::chrono::steady_clock::now();
  Rng gen(4);
  std::vector<int> seq, st;
  for (int i = 0; i < 8; ++i) {
    seq.push_back(gen.uniform_int(0, 19));
    st.push_back(gen.uniform_int(0, 7));
  }
  const TokenState x0 = TokenState::observed(seq, st, 3);
  const NoiseSchedule s = make_schedule(10);
  Rng rng(5);
  const int draws = 10000;
  double p_min = 1.0;
  for (int t : {2, 5, 8}) {
    std::vector<int> composed(9), direct(9);
    for (int n = 0; n < draws; ++n) {
      TokenState x = x0;
      for (int k = 1; k <= t; ++k) x = forward_step(x, k, s, Conditioning::InverseFolding, rng);
      composed[x.masked_count()]++;
      direct[forward_mask(x0, t, s, Conditioning::InverseFolding, rng).masked_count()]++;
    }
    const double p = 1.0 - s.alpha_bar[t];
    const double pc = teststats::binomial_chi_square_p(composed, 8, p, draws);
    const double pd = teststats::binomial_chi_square_p(direct, 8, p, draws);
    o.expect(pc > 0.01, fmt::format("composed kernels at t={} (p={:.3g})", t, pc));
    o.expect(pd > 0.01, fmt::format("direct masking at t={} (p={:.3g})", t, pd));
    p_min = std::min({p_min, pc, pd});
  }

  // Brute-force posterior over {a, b, MASK}^2 with T = 3.
  const int T = 3;
  const NoiseSchedule s3 = make_schedule(T);
  const std::array<int, 3> vocab = {0, 1, kAaMask};
  const TokenState y0 = TokenState::observed({0, 1}, {0, 0}, 1);
  auto state = [&](int code) {
    TokenState x = y0;
    x.seq = {vocab[code % 3], vocab[code / 3]};
    return x;
  };
  auto kernel = [&](int from, int to, int t) {
    double p = 1.0;
    for (int i = 0; i < 2; ++i) {
      const int a = state(from).seq[i], b = state(to).seq[i];
      if (a == kAaMask) p *= b == kAaMask ? 1.0 : 0.0;
      else if (b == a) p *= s3.beta[t];
      else if (b == kAaMask) p *= 1.0 - s3.beta[t];
      else p *= 0.0;
    }
    return p;
  };
  double tv_max = 0.0;
  for (int t = 1; t <= T; ++t) {
    std::vector<double> marg(9, 0.0);
    marg[0 + 3 * 1] = 1.0;
    for (int k = 1; k < t; ++k) {
      std::vector<double> next(9, 0.0);
      for (int a = 0; a < 9; ++a)
        for (int b = 0; b < 9; ++b) next[b] += marg[a] * kernel(a, b, k);
      marg = next;
    }
    for (int b = 0; b < 9; ++b) {
      double z = 0;
      for (int a = 0; a < 9; ++a) z += marg[a] * kernel(a, b, t);
      if (z <= 0) continue;
      double tv = 0;
      for (int a = 0; a < 9; ++a)
        tv += std::abs(marg[a] * kernel(a, b, t) / z - posterior_transition_probability(state(b), y0, state(a), t, s3));
      tv_max = std::max(tv_max, 0.5 * tv);
    }
  }
  o.expect(tv_max < 1e-12, fmt::format("posterior total variation {:.3g}", tv_max));
  const double secs = seconds_since(t0);
  o.expect(secs < 60.0, "under 1 min");
  o.note(fmt::format("min chi-square p {:.3f} over 1e4 draws, posterior TV {:.1e}, {:.1f} s", p_min, tv_max, secs));
  return o;
}

// ------------------------------------------------------------ 4 geometry

Outcome geometry() {
  using namespace geom;
  Outcome o;
  const auto t0 = std::chrono::steady_clock::now();
  SynthSpec spec;
  spec.length = 40;
  const BackboneStructure s = synth_backbone(spec, 3).structure;
  Rng rng(11);
  double worst_rmsd = 0.0, worst_det = 0.0;
  for (int t = 0; t < 20; ++t) {
    Eigen::Quaterniond q(rng.normal(), rng.normal(), rng.normal(), rng.normal());
    const Mat3 r = q.normalized().toRotationMatrix();
    const Vec3 shift(rng.normal(0, 20), rng.normal(0, 20), rng.normal(0, 20));
    const AlignmentResult a = kabsch_align(transformed(s, r, shift), s);
    worst_rmsd = std::max(worst_rmsd, a.rmsd);
    worst_det = std::max(worst_det, std::abs(a.rotation.determinant() - 1.0));
  }
  o.expect(worst_rmsd < 1e-9, fmt::format("rigid invariance ({:.2e})", worst_rmsd));
  o.expect(worst_det < 1e-9, "proper rotation");
  const double self_tm = tm_score(s, s);
  o.expect(std::abs(self_tm - 1.0) < 1e-12, fmt::format("TM(A,A) = {:.15f}", self_tm));
  const double d0 = tm_d0(30);
  o.expect(std::abs(d0 - 1.258) < 1e-3, fmt::format("d0(30) = {:.4f}", d0));

  // A mirrored chiral cloud cannot be superposed; Kabsch must still find
  // the best proper rotation, checked against a 2-degree Euler grid.
  Coords cloud(5, 3);
  cloud << 0, 0, 0, 1.5, 0, 0, 0, 2.0, 0, 0, 0, 2.5, 1.0, 1.2, 0.7;
  Coords mirror = cloud;
  mirror.col(0) *= -1.0;
  const AlignmentResult k = kabsch(mirror, cloud);
  o.expect(std::abs(k.rotation.determinant() - 1.0) < 1e-9, "reflection case returns a proper rotation");
  const Coords x = mirror.rowwise() - mirror.colwise().mean();
  const Coords y = cloud.rowwise() - cloud.colwise().mean();
  const double step = 2.0 * std::numbers::pi / 180.0;
  double grid_min = std::numeric_limits<double>::infinity();
  for (int ia = 0; ia < 180; ++ia)
    for (int ib = 0; ib <= 90; ++ib)
      for (int ic = 0; ic < 180; ++ic) {
        const Mat3 r = (Eigen::AngleAxisd(ia * step, Vec3::UnitZ()) * Eigen::AngleAxisd(ib * step, Vec3::UnitY()) *
                        Eigen::AngleAxisd(ic * step, Vec3::UnitZ()))
                           .toRotationMatrix();
        grid_min = std::min(grid_min, rmsd_unaligned(x * r.transpose(), y));
      }
  const double resolution = x.rowwise().norm().maxCoeff() * std::sqrt(3.0) * step;
  o.expect(grid_min >= k.rmsd - 1e-9 && grid_min - k.rmsd <= resolution,
           fmt::format("grid minimum {:.5f} vs kabsch {:.5f}", grid_min, k.rmsd));
  const double secs = seconds_since(t0);
  o.expect(secs < 60.0, "under 1 min");
  o.note(fmt::format("rigid rmsd {:.1e}, d0(30) {:.4f}, mirror kabsch {:.4f} vs grid {:.4f} (res {:.3f}), {:.1f} s",
                     worst_rmsd, d0, k.rmsd, grid_min, resolution, secs));
  return o;
}

// ------------------------------------------------------------ 5 quantization

Outcome quantization_effect() {
  Outcome o;
  Shared& sh = shared();
  std::vector<BackboneStructure> held;
  for (const auto& e : sh.test) held.push_back(e.structure);
  const tok::ReconstructionReport r = tok::evaluate_reconstruction(sh.tk(), held);
  int worse = 0;
  for (const auto& s : r.samples) worse += s.rmsd_quant > s.rmsd_cont;
  const double frac = static_cast<double>(worse) / r.samples.size();
  o.expect(frac >= 0.9, fmt::format("quantized worse on {}/{} held-out samples", worse, r.samples.size()));
  o.note(fmt::format("quant > cont on {}/{} ({:.1f}%), mean rRMSD cont {:.3f} quant {:.3f}, TM cont {:.3f} quant {:.3f}",
                     worse, r.samples.size(), 100 * frac, r.rmsd_cont, r.rmsd_quant, r.tm_cont, r.tm_quant));
  return o;
}

// ------------------------------------------------------------ 6 bit head

Outcome bit_head_accuracy() {
  Outcome o;
  Shared& sh = shared();
  int wins = 0;
  bool ordering = true;
  std::string per_seed;
  for (std::uint64_t seed : {1, 2, 3}) {
    double index_acc[2] = {0, 0};
    for (HeadKind head : {HeadKind::Index, HeadKind::Bit}) {
      const app::Pipeline& p = sh.lm(head, seed);
      eval::FoldingConfig fc = app::folding_config(p.cfg);
      fc.seed = seed;
      std::vector<eval::EvalItem> seen(sh.train.begin(), sh.train.begin() + kHeldOut);
      for (const std::vector<eval::EvalItem>* data : {&seen, &sh.test}) {
        const eval::EvalReport rep = eval::folding_eval(p.models(), *data, fc);
        for (const eval::EvalRow& row : rep.rows) ordering = ordering && row.bit_acc >= row.index_acc;
        if (data == &sh.test) index_acc[head == HeadKind::Bit] = rep.mean.index_acc;
      }
    }
    wins += index_acc[1] > index_acc[0];
    per_seed += fmt::format(" seed {}: bit {:.4f} index {:.4f};", seed, index_acc[1], index_acc[0]);
  }
  // One-sided sign test over three paired seeds.
  double p = 0.0;
  for (int k = wins; k <= 3; ++k) p += std::tgamma(4) / (std::tgamma(k + 1) * std::tgamma(4 - k)) / 8.0;
  o.expect(ordering, "bit_acc >= index_acc on every row");
  o.expect(wins == 3, fmt::format("bit head wins {}/3 seeds", wins));
  o.note(fmt::format("held-out index_acc after {} steps:{} wins {}/3, sign-test p {:.3f}", kHeadLmSteps, per_seed,
                     wins, p));
  return o;
}

// ------------------------------------------------------------ 7 reductions

Outcome geodplm_reductions() {
  using namespace geo;
  using namespace lmref;
  Outcome o;
  // Plain model against the loop-level transformer, both heads.
  double plain_err = 0.0;
  for (HeadKind head : {HeadKind::Bit, HeadKind::Index}) {
    LmConfig lm;
    lm.blocks = 2;
    lm.head = head;
    lm.rel_clip = 4;
    LanguageModel m = LanguageModel::create(lm, tiny_block(), 3, 5);
    randomize(m.params, 6, 0.2);
    Rng rng(7);
    LmInput in;
    for (int i = 0; i < 7; ++i) {
      in.seq.push_back(rng.bernoulli(0.3) ? kAaMask : rng.uniform_int(0, 19));
      in.structure.push_back(rng.bernoulli(0.3) ? 8 : rng.uniform_int(0, 7));
      in.positions.push_back(i < 3 ? i : i + 30);
    }
    Graph g(false);
    const LMOutput out = forward(g, m, in);
    const PlainOutput ref = plain_reference(m, in);
    const Tensor sl = out.struct_logits.value();
    plain_err = std::max(plain_err, (M(out.seq_logits.value()) - ref.seq_logits).cwiseAbs().maxCoeff());
    plain_err = std::max(plain_err, (M(sl.reshaped({7, static_cast<int>(sl.size() / 7)})) - ref.struct_logits).cwiseAbs().maxCoeff());
  }
  o.expect(plain_err < 1e-12, fmt::format("flags-off forward vs plain transformer ({:.2e})", plain_err));

  // Zero pair features reduce pair-bias attention to gated attention.
  const int l = 5, d = 8, dp = 4, heads = 2;
  ParameterSet pb;
  add_attn_pair_bias(pb, "pb", d, d, heads, dp, 1);
  randomize(pb, 7);
  const Tensor h = random_tensor({l, d}, 8);
  double bias_err = 0.0;
  {
    const Mat y = ref_ln(M(h), pb, "pb.ln");
    const Mat att = ref_attention(ref_linear(y, pb, "pb.q"), ref_linear(y, pb, "pb.k"), ref_linear(y, pb, "pb.v"), heads,
                                  [](int, int, int) { return 0.0; });
    const Mat expected = ref_linear((sigm(ref_linear(y, pb, "pb.g")).array() * att.array()).matrix(), pb, "pb.o");
    Graph g(false);
    const Tensor got = attn_pair_bias(g, pb, "pb", g.constant(h), g.constant(Tensor(Shape{l, l, dp})), heads).value();
    bias_err = (M(got) - expected).cwiseAbs().maxCoeff();
  }
  o.expect(bias_err < 1e-12, fmt::format("zero pair bias vs vanilla attention ({:.2e})", bias_err));

  // Permutation equivariance of every geometric sub-layer.
  const BlockConfig cfg = tiny_block();
  const std::vector<int> perm = testutil::random_permutation(l, 3);
  const Tensor pair = random_tensor({l, l, cfg.d_pair}, 9);
  const Tensor hp = permute_rows(h, perm), pairp = permute_pair(pair, perm);
  std::map<std::string, double> err;
  auto eval1 = [](const std::function<Var(Graph&)>& f) {
    Graph g(false);
    return f(g).value();
  };
  ParameterSet ps;
  add_init_pair(ps, "ip", d, cfg, 1);
  add_transition(ps, "tr", cfg.d_pair, 2, 2);
  add_triangle_update(ps, "tu", cfg, 3);
  add_triangle_attention(ps, "ta", cfg, 4);
  add_seqstruct_attention(ps, "ss", d, cfg, 5);
  add_attn_pair_bias(ps, "ab", d, d, heads, cfg.d_pair, 6);
  randomize(ps, 10);
  auto pair_fn = [&](const std::string& name, const std::function<Var(Graph&, Var)>& f) {
    const Tensor a = eval1([&](Graph& g) { return f(g, g.constant(pair)); });
    const Tensor b = eval1([&](Graph& g) { return f(g, g.constant(pairp)); });
    err[name] = testutil::max_abs_diff(b, permute_pair(a, perm));
  };
  {
    const Tensor a = eval1([&](Graph& g) { return init_pair(g, ps, "ip", g.constant(h)); });
    const Tensor b = eval1([&](Graph& g) { return init_pair(g, ps, "ip", g.constant(hp)); });
    err["init_pair"] = testutil::max_abs_diff(b, permute_pair(a, perm));
  }
  pair_fn("transition", [&](Graph& g, Var p) { return transition(g, ps, "tr", p); });
  pair_fn("triangle_update_out", [&](Graph& g, Var p) { return triangle_update(g, ps, "tu", p, TriangleMode::Outgoing); });
  pair_fn("triangle_update_in", [&](Graph& g, Var p) { return triangle_update(g, ps, "tu", p, TriangleMode::Incoming); });
  pair_fn("triangle_attention_start",
          [&](Graph& g, Var p) { return triangle_attention(g, ps, "ta", p, TriangleAttnMode::Starting, cfg.heads_tri); });
  pair_fn("triangle_attention_end",
          [&](Graph& g, Var p) { return triangle_attention(g, ps, "ta", p, TriangleAttnMode::Ending, cfg.heads_tri); });
  {
    const Tensor a = eval1([&](Graph& g) { return attn_pair_bias(g, ps, "ab", g.constant(h), g.constant(pair), heads); });
    const Tensor b = eval1([&](Graph& g) { return attn_pair_bias(g, ps, "ab", g.constant(hp), g.constant(pairp), heads); });
    err["pair_bias_attention"] = testutil::max_abs_diff(b, permute_rows(a, perm));
  }
  {
    const Tensor ht = random_tensor({l, d}, 12), htp = permute_rows(ht, perm);
    Graph g1(false), g2(false);
    const TrackPair a = seqstruct_attention(g1, ps, "ss", g1.constant(h), g1.constant(ht), g1.constant(pair), heads);
    const TrackPair b = seqstruct_attention(g2, ps, "ss", g2.constant(hp), g2.constant(htp), g2.constant(pairp), heads);
    err["seqstruct_attention"] = std::max(testutil::max_abs_diff(b.seq.value(), permute_rows(a.seq.value(), perm)),
                                          testutil::max_abs_diff(b.structure.value(), permute_rows(a.structure.value(), perm)));
  }
  double worst = 0.0;
  for (const auto& [name, e] : err) {
    o.expect(e < 1e-12, fmt::format("{} equivariance ({:.2e})", name, e));
    worst = std::max(worst, e);
  }
  o.note(fmt::format("plain {:.1e}, zero-bias {:.1e}, worst equivariance {:.1e} over {} sub-layers", plain_err, bias_err,
                     worst, err.size()));
  return o;
}

// ------------------------------------------------------------ 8 efficiency

Outcome efficiency_ordering() {
  Outcome o;
  const auto t0 = std::chrono::steady_clock::now();
  suites::BenchOptions opts;
  opts.length = 64;
  opts.variants = {"plain", "base", "tu", "ta"};
  std::map<std::string, double> sec;
  for (const suites::BenchRow& r : suites::block_benchmark(opts)) sec[r.variant] = r.seconds_per_step;
  o.expect(sec["ta"] > sec["tu"], "TA > TU");
  o.expect(sec["tu"] > sec["base"], "TU > Base");
  o.expect(sec["base"] > sec["plain"], "Base > plain");
  const double secs = seconds_since(t0);
  o.expect(secs < 120.0, "under 2 min");
  o.note(fmt::format("s/step plain {:.4f} base {:.4f} tu {:.4f} ta {:.4f} (TU/Base {:.1f}x, TA/Base {:.1f}x), {:.1f} s",
                     sec["plain"], sec["base"], sec["tu"], sec["ta"], sec["tu"] / sec["base"], sec["ta"] / sec["base"],
                     secs));
  return o;
}

// ------------------------------------------------------------ 9 flow matching

Outcome fm_exactness() {
  using namespace fm;
  Outcome o;
  const auto t0 = std::chrono::steady_clock::now();
  geom::SynthSpec spec;
  spec.length = 30;
  spec.jitter = 0.0;
  const BackboneStructure truth = geom::synth_backbone(spec, 5).structure;
  Rng rng(3);
  const FlowState xt = corrupt(truth, 0.0, 10.0, rng);
  const Eigen::Quaterniond q(0.8, 0.1, -0.4, 0.3);
  const BackboneStructure posed = geom::transformed(truth, q.normalized().toRotationMatrix(), geom::Vec3(30, 1, -7));
  o.expect(euler_step(xt, posed, 0.0).x == xt.x, "s = t keeps x_t");
  const geom::AlignmentResult a = geom::kabsch(posed.ca(), xt.x.ca());
  o.expect(euler_step(xt, posed, 1.0).x == geom::transformed(posed, a.rotation, a.translation),
           "s = 1 lands on the aligned prediction");

  const Denoiser oracle = [&](const FlowState&, Rng&) { return posed; };
  double worst = 0.0;
  for (int n : {1, 5, 10}) {
    Rng r(n);
    const FmResult res = fm_generate(oracle, truth.chain_ids(), {}, n, 10.0, r);
    const double rmsd = geom::kabsch(res.structure.ca(), truth.ca()).rmsd;
    o.expect(rmsd < 1e-6, fmt::format("n_steps {} rmsd {:.2e}", n, rmsd));
    o.expect(res.denoiser_calls == n, fmt::format("n_steps {} calls", n));
    worst = std::max(worst, rmsd);
  }
  const double secs = seconds_since(t0);
  o.expect(secs < 10.0, "under 10 s");
  o.note(fmt::format("endpoint identities exact, oracle rmsd <= {:.1e} for n in {{1,5,10}}, {:.2f} s", worst, secs));
  return o;
}

// ------------------------------------------------------------ 10 residual head

Outcome resdiff_refinement() {
  Outcome o;
  Shared& sh = shared();
  const auto t0 = std::chrono::steady_clock::now();
  app::Pipeline p = sh.lm(HeadKind::Bit, 1);
  p.cfg.resdiff.enabled = true;
  app::StageOptions so;
  so.steps = kResDiffSteps;
  app::train_resdiff_stage(p, sh.train, so);

  Rng rng(17);
  int better = 0;
  double mse_q_sum = 0.0, mse_r_sum = 0.0;
  for (const auto& item : sh.test) {
    const resdiff::Example ex = resdiff::make_example(*p.tokenizer, *p.lm, item.structure, item.seq);
    const Tensor refined = resdiff::refine(*p.resdiff, ex.z_quant, ex.hidden, rng);
    double mse_q = 0.0, mse_r = 0.0;
    for (std::size_t i = 0; i < ex.r.size(); ++i) {
      const double z_cont = ex.z_quant[i] + ex.r[i];
      mse_q += ex.r[i] * ex.r[i];
      mse_r += (refined[i] - z_cont) * (refined[i] - z_cont);
    }
    better += mse_r < mse_q;
    mse_q_sum += mse_q / ex.r.size();
    mse_r_sum += mse_r / ex.r.size();
  }
  const double frac = static_cast<double>(better) / sh.test.size();
  o.expect(frac >= 0.8, fmt::format("refinement better on {}/{}", better, sh.test.size()));

  // The zero predictor's noise loss is E[eps^2] = 1.
  const resdiff::DdpmSchedule sched = p.resdiff->ddpm;
  Rng mc(5);
  double loss = 0.0;
  const int draws = 2000;
  const Tensor r0 = random_tensor({kToyLength, p.resdiff->bits}, 6, 0.3);
  for (int n = 0; n < draws; ++n) {
    const int t = mc.uniform_int(1, sched.T);
    const resdiff::Noised x = resdiff::ddpm_forward(sched, r0, t, mc);
    Graph g(false);
    loss += resdiff::noise_mse(g.constant(Tensor(x.eps.shape())), x.eps).value().item();
  }
  loss /= draws;
  o.expect(std::abs(loss - 1.0) <= 0.05, fmt::format("zero-predictor loss {:.4f}", loss));
  o.note(fmt::format("better on {}/{} ({:.0f}%), mean MSE quant {:.4f} refined {:.4f}; zero-predictor loss {:.4f}; {:.0f} s",
                     better, sh.test.size(), 100 * frac, mse_q_sum / sh.test.size(), mse_r_sum / sh.test.size(), loss,
                     seconds_since(t0)));
  return o;
}

// ------------------------------------------------------------ 11 alignment

geo::LanguageModel small_lm(int bits = 3) {
  LmConfig lm;
  lm.blocks = 2;
  lm.diffusion_steps = 10;
  lm.rel_clip = 8;
  BlockConfig bc;
  bc.d_model = 16;
  bc.heads = 2;
  return geo::LanguageModel::create(lm, bc, bits, 3);
}

dlm::TokenState random_state(int l, int bits, std::uint64_t seed) {
  Rng rng(seed);
  std::vector<int> seq, st;
  for (int i = 0; i < l; ++i) {
    seq.push_back(rng.uniform_int(0, 19));
    st.push_back(rng.uniform_int(0, (1 << bits) - 1));
  }
  return dlm::TokenState::observed(seq, st, bits);
}

Outcome repa_bounds() {
  Outcome o;
  auto cosine = [](const Tensor& p, const Tensor& t) {
    Graph g(false);
    return repa::cosine_alignment(g.constant(p), g.constant(t)).value().item();
  };
  const Tensor t = random_tensor({6, 4}, 3);
  const double same = cosine(t, t), opposite = cosine(testutil::scaled(t, -1.0), t);
  const double orth = cosine(Tensor(Shape{2, 2}, {1, 0, 0, 1}), Tensor(Shape{2, 2}, {0, 3, -2, 0}));
  o.expect(std::abs(same + 1.0) < 1e-14, fmt::format("aligned = -1 ({:.17g})", same));
  o.expect(std::abs(opposite - 1.0) < 1e-14, fmt::format("opposed = +1 ({:.17g})", opposite));
  o.expect(orth == 0.0, fmt::format("orthogonal = 0 ({:.3g})", orth));
  double lo = 1.0, hi = -1.0;
  for (std::uint64_t seed = 1; seed <= 200; ++seed) {
    const double c = cosine(random_tensor({6, 4}, seed + 100, seed % 7 + 0.1), t);
    lo = std::min(lo, c);
    hi = std::max(hi, c);
  }
  o.expect(lo >= -1.0 && hi <= 1.0, "loss within [-1, 1]");
  o.expect(std::isfinite(cosine(Tensor(Shape{6, 4}), t)), "zero rows stay finite");

  const std::vector<dlm::LmExample> data = {{"a", random_state(8, 3, 1)}, {"b", random_state(8, 3, 2)}};
  repa::TargetStore targets;
  targets.put("a", random_tensor({8, 5}, 3));
  targets.put("b", random_tensor({8, 5}, 4));
  dlm::LmTrainOptions opts;
  opts.steps = 8;
  opts.batch = 2;
  dlm::LmTrainer plain = dlm::LmTrainer::create(small_lm(), 11);
  dlm::train_lm(plain, data, opts);
  geo::LanguageModel m = small_lm();
  RepaConfig rc;
  rc.hidden = 8;
  dlm::attach_repa_head(m, rc, 5, 12);
  dlm::LmTrainer aligned = dlm::LmTrainer::create(m, 11);
  opts.repa_targets = &targets;
  dlm::train_lm(aligned, data, opts);
  bool identical = aligned.losses == plain.losses;
  for (const auto& [name, value] : plain.model.params) identical = identical && aligned.model.params.get(name) == value;
  o.expect(identical, "repa_weight 0 run bit-identical to the run without the head");
  o.note(fmt::format("endpoints -1/+1/0 exact, 200 random losses in [{:.3f}, {:.3f}], zero-weight run bit-identical", lo,
                     hi));
  return o;
}

// ------------------------------------------------------------ 12 multimer

Outcome multimer_neutrality() {
  Outcome o;
  const int bits = 4;
  auto chain = [&](int l, std::uint64_t seed) {
    Rng rng(seed);
    mm::Chain c;
    for (int i = 0; i < l; ++i) {
      c.seq.push_back(rng.uniform_int(0, 19));
      c.structure.push_back(rng.uniform_int(0, (1 << bits) - 1));
    }
    return c;
  };
  auto logits = [](const geo::LanguageModel& m, const dlm::TokenState& s) {
    Graph g(false);
    const geo::LMOutput out = geo::forward(g, m, s.input());
    return std::make_pair(out.seq_logits.value(), out.struct_logits.value());
  };
  const mm::Chain a = chain(10, 3), b = chain(6, 4);
  const geo::LanguageModel m = small_lm(bits);
  const dlm::TokenState mono = dlm::TokenState::observed(a.seq, a.structure, bits);
  o.expect(mm::insert_linker({a}, 0, 0, bits).state == mono, "one chain with linker 0, offset 0 is the monomer state");
  o.expect(logits(m, mm::insert_linker({a}, 0, 0, bits).state) == logits(m, mono), "forward bit-identical to monomer");
  std::vector<int> seq = a.seq, st = a.structure;
  seq.insert(seq.end(), b.seq.begin(), b.seq.end());
  st.insert(st.end(), b.structure.begin(), b.structure.end());
  const dlm::TokenState concat = dlm::TokenState::observed(seq, st, bits);
  o.expect(mm::insert_linker({a, b}, 0, 0, bits).state == concat, "two chains with linker 0, offset 0 concatenate");
  o.expect(logits(m, mm::insert_linker({a, b}, 0, 0, bits).state) == logits(m, concat),
           "two-chain forward bit-identical to the concatenated monomer");

  bool roundtrip = true;
  for (int linker : {0, 1, 25})
    for (int offset : {0, 25, 100}) {
      const mm::Joined j = mm::insert_linker({a, b, chain(4, 5)}, linker, offset, bits);
      const std::vector<mm::Chain> back = mm::strip_linker(j.state, j.layout);
      roundtrip = roundtrip && back.size() == 3 && back[0].seq == a.seq && back[0].structure == a.structure &&
                  back[1].seq == b.seq && back[1].structure == b.structure;
    }
  o.expect(roundtrip, "strip after insert is the identity");

  const ModelConfig defaults;
  const ModelConfig loaded = ModelConfig::from_text("[lm]\nblocks = 2\n");
  o.expect(defaults.multimer.linker_len == 25 && defaults.multimer.pos_offset == 25, "defaults 25/25");
  o.expect(loaded.multimer.linker_len == 25 && loaded.multimer.pos_offset == 25, "loaded config keeps 25/25");
  const ModelConfig echoed = ModelConfig::from_text(defaults.to_text());
  o.expect(echoed.multimer.linker_len == 25 && echoed.multimer.pos_offset == 25, "canonical text roundtrip");
  o.note("monomer and concatenation bit-identical, 9 roundtrips exact, linker 25 and offset 25 by default");
  return o;
}

// ------------------------------------------------------------ 13 end to end

constexpr int kOverfitItems = 8;
constexpr int kOverfitLength = 32;
constexpr int kOverfitTokenizerSteps = 3000;
constexpr int kOverfitLmSteps = 3500;

Outcome end_to_end_overfit() {
  Outcome o;
  const auto t0 = std::chrono::steady_clock::now();
  app::DataSpec spec;
  spec.n = kOverfitItems;
  spec.length = kOverfitLength;
  spec.seed = 13;
  const auto data = app::generate_dataset(spec);

  app::Pipeline p;
  p.cfg = toy_config();
  p.cfg.block = suites::variant_block("base", p.cfg.block);
  p.cfg.lm.head = HeadKind::Bit;
  p.cfg.train.warmup = 100;
  p.cfg.train.lr_final = 1e-4;
  app::StageOptions tok_opts, lm_opts;
  tok_opts.steps = kOverfitTokenizerSteps;
  lm_opts.steps = kOverfitLmSteps;
  app::train_tokenizer_stage(p, data, tok_opts);
  app::train_lm_stage(p, data, lm_opts);

  const eval::FoldingConfig fc = app::folding_config(p.cfg);
  const eval::EvalReport rep = eval::folding_eval(p.models(), data, fc);
  double tm_min = 1.0;
  for (const eval::EvalRow& r : rep.rows) tm_min = std::min(tm_min, r.tm);
  o.expect(rep.mean.tm > 0.9, fmt::format("mean folding TM {:.3f}", rep.mean.tm));

  const std::string path = (std::filesystem::temp_directory_path() / "bitfold_acceptance.ckpt").string();
  save_checkpoint(path, p.to_checkpoint());
  const app::Pipeline q = app::Pipeline::from_checkpoint(load_checkpoint(path, p.cfg));
  std::filesystem::remove(path);
  o.expect(eval::to_csv(eval::folding_eval(q.models(), data, fc)) == eval::to_csv(rep), "reloaded eval bit-exact");
  const double secs = seconds_since(t0);
  o.expect(secs < 1200.0, "under 20 min");
  o.note(fmt::format("{} structures of length {}, {} tokenizer + {} LM steps: TM mean {:.3f} min {:.3f}, RMSD {:.3f}, "
                     "bit_acc {:.3f}; reload bit-exact; {:.0f} s",
                     kOverfitItems, kOverfitLength, kOverfitTokenizerSteps, kOverfitLmSteps, rep.mean.tm, tm_min,
                     rep.mean.rmsd, rep.mean.bit_acc, secs));
  return o;
}

// ------------------------------------------------------------ 14 diversity

Outcome diversity_metric() {
  Outcome o;
  geom::SynthSpec spec;
  spec.length = 40;
  const BackboneStructure s = geom::synth_backbone(spec, 1).structure;
  for (int n : {1, 5, 40}) {
    const double d = eval::diversity(std::vector<BackboneStructure>(n, s));
    o.expect(d == 1.0 / n, fmt::format("{} identical samples give {:.6f}", n, d));
  }
  // Independent Gaussian clouds share no fold.
  std::vector<BackboneStructure> clouds;
  Rng rng(9);
  for (int i = 0; i < 10; ++i) clouds.push_back(fm::prior_draw(std::vector<int>(40, 0), 10.0, rng));
  double max_tm = 0.0;
  for (std::size_t i = 0; i < clouds.size(); ++i)
    for (std::size_t j = 0; j < clouds.size(); ++j)
      if (i != j) max_tm = std::max(max_tm, geom::tm_score(clouds[i], clouds[j]));
  o.expect(max_tm < 0.5, fmt::format("clouds dissimilar (max TM {:.3f})", max_tm));
  o.expect(eval::diversity(clouds) == 1.0, "all-dissimilar samples give 1");

  // The co-generation protocol draws 40 samples per length.
  eval::Models models;
  const tok::Tokenizer tk = tok::Tokenizer::create(toy_config().tokenizer, 1);
  const geo::LanguageModel lm = small_lm(tk.bits());
  models.tokenizer = &tk;
  models.lm = &lm;
  eval::CoGenConfig cc;
  cc.steps = 4;
  const auto rows = eval::cogeneration_eval(models, cc);
  bool forty = rows.size() == 3;
  for (const eval::CoGenRow& r : rows) forty = forty && r.samples == 40 && r.diversity >= 1.0 / 40 && r.diversity <= 1.0;
  o.expect(forty, "40 samples at each default length");
  std::string lens;
  for (const eval::CoGenRow& r : rows) lens += fmt::format(" L={}: {:.3f}", r.length, r.diversity);
  o.note(fmt::format("identical -> 1/N exact, dissimilar (max TM {:.3f}) -> 1.0; protocol 40 samples:{}", max_tm, lens));
  return o;
}

struct Criterion {
  int id;
  const char* name;
  Outcome (*run)();
};

const std::vector<Criterion> kCriteria = {
    {1, "codec exactness", codec_exactness},
    {2, "gradient suite", gradient_suite},
    {3, "diffusion correctness", diffusion_correctness},
    {4, "geometry", geometry},
    {5, "quantization amplifies reconstruction error", quantization_effect},
    {6, "bit head token accuracy", bit_head_accuracy},
    {7, "encoder block reductions", geodplm_reductions},
    {8, "efficiency ordering", efficiency_ordering},
    {9, "flow sampler exactness", fm_exactness},
    {10, "residual refinement", resdiff_refinement},
    {11, "alignment bounds and neutrality", repa_bounds},
    {12, "multimer neutrality and roundtrip", multimer_neutrality},
    {13, "end-to-end overfit", end_to_end_overfit},
    {14, "diversity metric", diversity_metric},
};

} // namespace

int main(int argc, char** argv) {
  CLI::App app{"Acceptance report"};
  std::vector<int> only;
  std::vector<int> allow_fail;
  app.add_option("criteria", only, "Run only these criteria");
  app.add_option("--allow-fail", allow_fail, "Criteria whose failure does not fail the run")->delimiter(',');
  CLI11_PARSE(app, argc, argv);

  int unexpected = 0, passed = 0, ran = 0;
  for (const Criterion& c : kCriteria) {
    if (!only.empty() && std::find(only.begin(), only.end(), c.id) == only.end()) continue;
    const auto t0 = std::chrono::steady_clock::now();
    Outcome o;
    try {
      o = c.run();
    } catch (const std::exception& e) {
      o.expect(false, std::string("exception: ") + e.what());
    }
    ++ran;
    passed += o.pass;
    const bool allowed = std::find(allow_fail.begin(), allow_fail.end(), c.id) != allow_fail.end();
    if (!o.pass && !allowed) ++unexpected;
    std::string detail;
    for (const std::string& n : o.notes) detail += (detail.empty() ? "" : "; ") + n;
    std::printf("[%s] %2d %s (%.1f s): %s\n", o.pass ? "PASS" : (allowed ? "FAIL, allowed" : "FAIL"), c.id, c.name,
                seconds_since(t0), detail.c_str());
    std::fflush(stdout);
  }
  std::printf("%d/%d criteria passed\n", passed, ran);
  return unexpected == 0 ? 0 : 1;
}
