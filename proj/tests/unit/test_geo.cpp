#include "doctest.h"

#include <cmath>

#include <Eigen/Dense>

#include "bitfold/alphabet.hpp"
#include "bitfold/geo.hpp"
#include "bitfold/grad_check.hpp"
#include "bitfold/nn.hpp"
#include "test_util.hpp"
#include "lm_reference.hpp"

using namespace bitfold;
using namespace bitfold::geo;
using testutil::permute_pair;
using testutil::permute_rows;
using testutil::random_tensor;
using testutil::randomize;
using namespace lmref;

namespace {

Tensor run(const std::function<Var(Graph&)>& f) {
  Graph g(false);
  return f(g).value();
}

} // namespace

TEST_CASE("init_pair") {
  const BlockConfig cfg = tiny_block();
  ParameterSet ps;
  add_init_pair(ps, "pi", 5, cfg, 1);
  randomize(ps, 2);
  const Tensor h = random_tensor({6, 5}, 3);
  const Tensor pair = run([&](Graph& g) { return init_pair(g, ps, "pi", g.constant(h)); });
  CHECK(pair.shape() == Shape{6, 6, 4});
  const Tensor direct = run([&](Graph& g) { return nn::mlp(g, ps, "pi", cross_concat(g.constant(h)), 3); });
  CHECK(max_abs_diff(pair, direct) < 1e-12);

  Tensor constant(Shape{4, 5}, 0.7);
  const Tensor flat = run([&](Graph& g) { return init_pair(g, ps, "pi", g.constant(constant)); });
  for (int i = 0; i < 4; ++i)
    for (int j = 0; j < 4; ++j)
      for (int c = 0; c < 4; ++c) CHECK(flat.at(i, j, c) == doctest::Approx(flat.at(0, 0, c)).epsilon(1e-14));

  const Tensor one = run([&](Graph& g) { return init_pair(g, ps, "pi", g.constant(random_tensor({1, 5}, 4))); });
  CHECK(one.shape() == Shape{1, 1, 4});

  const std::vector<int> perm = testutil::random_permutation(6, 5);
  const Tensor moved = run([&](Graph& g) { return init_pair(g, ps, "pi", g.constant(permute_rows(h, perm))); });
  CHECK(max_abs_diff(moved, permute_pair(pair, perm)) < 1e-12);
}

TEST_CASE("attention with pair bias") {
  const int l = 5, d = 8, dp = 4, heads = 2;
  ParameterSet ps;
  add_attn_pair_bias(ps, "pb", d, d, heads, dp, 1);
  randomize(ps, 7);
  const Tensor h = random_tensor({l, d}, 8);
  const Tensor pair = random_tensor({l, l, dp}, 9);

  auto reference = [&](const ParameterSet& p, const Tensor& pr, bool use_bias) {
    const Mat y = ref_ln(M(h), p, "pb.ln");
    const Mat q = ref_linear(y, p, "pb.q"), k = ref_linear(y, p, "pb.k"), v = ref_linear(y, p, "pb.v");
    const Mat wb = P(p, "pb.b.w");
    const Mat att = ref_attention(q, k, v, heads, [&](int hh, int i, int j) {
      if (!use_bias) return 0.0;
      double s = 0;
      for (int c = 0; c < dp; ++c) s += pr.at(i, j, c) * wb(c, hh);
      return s;
    });
    const Mat gate = sigm(ref_linear(y, p, "pb.g"));
    return Mat(ref_linear((gate.array() * att.array()).matrix(), p, "pb.o"));
  };

  const Tensor out = run([&](Graph& g) { return attn_pair_bias(g, ps, "pb", g.constant(h), g.constant(pair), heads); });
  CHECK((M(out) - reference(ps, pair, true)).cwiseAbs().maxCoeff() < 1e-12);

  // Zero pair and zero bias projection reduce to ordinary gated self-attention.
  ParameterSet zero_bias = ps;
  zero_bias.get("pb.b.w").fill(0.0);
  for (const Tensor& pr : {Tensor(Shape{l, l, dp}), pair}) {
    const Tensor o = run([&](Graph& g) { return attn_pair_bias(g, zero_bias, "pb", g.constant(h), g.constant(pr), heads); });
    CHECK((M(o) - reference(zero_bias, pr, false)).cwiseAbs().maxCoeff() < 1e-12);
  }

  // A huge bias toward key j0 makes every row copy value j0.
  ParameterSet sat = ps;
  sat.get("pb.b.w").fill(0.0);
  for (int hh = 0; hh < heads; ++hh) sat.get("pb.b.w").at(0, hh) = 1.0;
  sat.get("pb.g.w").fill(0.0);
  sat.get("pb.g.b").fill(60.0);
  sat.get("pb.o.w").fill(0.0);
  for (int c = 0; c < d; ++c) sat.get("pb.o.w").at(c, c) = 1.0;
  sat.get("pb.o.b").fill(0.0);
  const int j0 = 3;
  Tensor spike(Shape{l, l, dp});
  for (int i = 0; i < l; ++i) spike.at(i, j0, 0) = 1e9;
  const Tensor o = run([&](Graph& g) { return attn_pair_bias(g, sat, "pb", g.constant(h), g.constant(spike), heads); });
  const Mat v = ref_linear(ref_ln(M(h), sat, "pb.ln"), sat, "pb.v");
  for (int i = 0; i < l; ++i)
    for (int c = 0; c < d; ++c) CHECK(std::abs(o.at(i, c) - v(j0, c)) < 1e-6 * (1.0 + std::abs(v(j0, c))));

  const std::vector<int> perm = testutil::random_permutation(l, 3);
  const Tensor moved = run([&](Graph& g) {
    return attn_pair_bias(g, ps, "pb", g.constant(permute_rows(h, perm)), g.constant(permute_pair(pair, perm)), heads);
  });
  CHECK(max_abs_diff(moved, permute_rows(out, perm)) < 1e-12);

  for (std::uint64_t seed : {1, 2, 3}) {
    ParameterSet p = ps;
    randomize(p, 100 + seed);
    p.add("h", h);
    p.add("pair", random_tensor({l, l, dp}, seed));
    ScalarFn fn = [&](Graph& g, const ParameterSet& q) {
      Var y = attn_pair_bias(g, q, "pb", g.param(q, "h"), g.param(q, "pair"), heads);
      return sum_all(y * g.constant(random_tensor({l, d}, 50)));
    };
    GradCheckOptions opt;
    opt.seed = seed;
    const GradCheckReport r = grad_check(fn, p, opt);
    INFO(r.worst_param);
    CHECK(r.max_rel_error < 1e-4);
  }
}

TEST_CASE("transition") {
  ParameterSet ps;
  add_transition(ps, "tr", 4, 4, 1);
  const Tensor x = random_tensor({3, 3, 4}, 2);
  const Tensor zero = run([&](Graph& g) { return transition(g, ps, "tr", g.constant(x)); });
  CHECK(zero.shape() == Shape{3, 3, 4});
  CHECK(max_abs_diff(zero, Tensor(Shape{3, 3, 4})) == 0.0);
  CHECK_THROWS_AS(add_transition(ps, "bad", 4, 0, 1), Error);

  for (std::uint64_t seed : {1, 2, 3}) {
    ParameterSet p = ps;
    randomize(p, seed);
    p.add("x", x);
    const Tensor w = random_tensor({3, 3, 4}, 40 + seed);
    ScalarFn fn = [&](Graph& g, const ParameterSet& q) {
      return sum_all(transition(g, q, "tr", g.param(q, "x")) * g.constant(w));
    };
    GradCheckOptions opt;
    opt.seed = seed;
    CHECK(grad_check(fn, p, opt).max_rel_error < 1e-4);
  }
}

TEST_CASE("triangle multiplicative update") {
  const BlockConfig cfg = tiny_block();
  const int l = 5, dp = cfg.d_pair, c = cfg.d_tri_update;
  ParameterSet ps;
  add_triangle_update(ps, "tu", cfg, 1);
  randomize(ps, 11);
  const Tensor pair = random_tensor({l, l, dp}, 12);

  for (TriangleMode mode : {TriangleMode::Outgoing, TriangleMode::Incoming}) {
    const Tensor out = run([&](Graph& g) { return triangle_update(g, ps, "tu", g.constant(pair), mode); });

    // Loop oracle for the stated contraction.
    const Mat x = ref_ln(M(pair.reshaped({l * l, dp})), ps, "tu.ln");
    const Mat a = sigm(ref_linear(x, ps, "tu.ag")).cwiseProduct(ref_linear(x, ps, "tu.av"));
    const Mat b = sigm(ref_linear(x, ps, "tu.bg")).cwiseProduct(ref_linear(x, ps, "tu.bv"));
    Mat t = Mat::Zero(l * l, c);
    for (int i = 0; i < l; ++i)
      for (int j = 0; j < l; ++j)
        for (int k = 0; k < l; ++k)
          for (int ch = 0; ch < c; ++ch)
            t(i * l + j, ch) += mode == TriangleMode::Outgoing ? a(i * l + k, ch) * b(j * l + k, ch)
                                                               : a(k * l + i, ch) * b(k * l + j, ch);
    const Mat expected =
        sigm(ref_linear(x, ps, "tu.g")).cwiseProduct(ref_linear(ref_ln(t, ps, "tu.ln_out"), ps, "tu.o"));
    CHECK((M(out.reshaped({l * l, dp})) - expected).cwiseAbs().maxCoeff() < 1e-12);

    const std::vector<int> perm = testutil::random_permutation(l, 21);
    const Tensor moved = run([&](Graph& g) { return triangle_update(g, ps, "tu", g.constant(permute_pair(pair, perm)), mode); });
    CHECK(max_abs_diff(moved, permute_pair(out, perm)) < 1e-12);

    const Tensor single =
        run([&](Graph& g) { return triangle_update(g, ps, "tu", g.constant(random_tensor({1, 1, dp}, 5)), mode); });
    CHECK(single.shape() == Shape{1, 1, dp});
    CHECK(single.all_finite());

    ParameterSet no_values = ps;
    for (const char* n : {"tu.av.w", "tu.av.b", "tu.bv.w", "tu.bv.b"}) no_values.get(n).fill(0.0);
    no_values.get("tu.ln_out.beta").fill(0.0);
    no_values.get("tu.o.b").fill(0.0);
    const Tensor none = run([&](Graph& g) { return triangle_update(g, no_values, "tu", g.constant(pair), mode); });
    CHECK(max_abs_diff(none, Tensor(Shape{l, l, dp})) == 0.0);

    for (std::uint64_t seed : {1, 2, 3}) {
      ParameterSet p = ps;
      randomize(p, 30 + seed);
      p.add("pair", random_tensor({l, l, dp}, seed));
      const Tensor w = random_tensor({l, l, dp}, 60 + seed);
      ScalarFn fn = [&](Graph& g, const ParameterSet& q) {
        return sum_all(triangle_update(g, q, "tu", g.param(q, "pair"), mode) * g.constant(w));
      };
      GradCheckOptions opt;
      opt.seed = seed;
      const GradCheckReport r = grad_check(fn, p, opt);
      INFO(r.worst_param);
      CHECK(r.max_rel_error < 1e-4);
    }
  }
}

TEST_CASE("triangle attention") {
  BlockConfig cfg = tiny_block();
  const int l = 4, dp = cfg.d_pair;
  ParameterSet ps;
  add_triangle_attention(ps, "ta", cfg, 1);
  randomize(ps, 13);
  const Tensor pair = random_tensor({l, l, dp}, 14);

  for (TriangleAttnMode mode : {TriangleAttnMode::Starting, TriangleAttnMode::Ending}) {
    const Tensor out = run([&](Graph& g) { return triangle_attention(g, ps, "ta", g.constant(pair), mode, cfg.heads_tri); });
    CHECK(out.shape() == Shape{l, l, dp});
    const std::vector<int> perm = testutil::random_permutation(l, 22);
    const Tensor moved = run([&](Graph& g) {
      return triangle_attention(g, ps, "ta", g.constant(permute_pair(pair, perm)), mode, cfg.heads_tri);
    });
    CHECK(max_abs_diff(moved, permute_pair(out, perm)) < 1e-12);

    for (std::uint64_t seed : {1, 2, 3}) {
      ParameterSet p = ps;
      randomize(p, 70 + seed);
      p.add("pair", random_tensor({l, l, dp}, seed));
      const Tensor w = random_tensor({l, l, dp}, 80 + seed);
      ScalarFn fn = [&](Graph& g, const ParameterSet& q) {
        return sum_all(triangle_attention(g, q, "ta", g.param(q, "pair"), mode, cfg.heads_tri) * g.constant(w));
      };
      GradCheckOptions opt;
      opt.seed = seed;
      const GradCheckReport r = grad_check(fn, p, opt);
      INFO(r.worst_param);
      CHECK(r.max_rel_error < 1e-4);
    }
  }

  // One head with zero query and bias projections: uniform weights, so each
  // entry averages the values along the attended index.
  cfg.heads_tri = 1;
  ParameterSet one;
  add_triangle_attention(one, "ta", cfg, 2);
  randomize(one, 15);
  one.get("ta.q.w").fill(0.0);
  one.get("ta.b.w").fill(0.0);
  one.get("ta.g.w").fill(0.0);
  one.get("ta.g.b").fill(1.0);
  const Mat x = ref_ln(M(pair.reshaped({l * l, dp})), one, "ta.ln");
  const Mat v = ref_linear(x, one, "ta.v");
  const double gate = 1.0 / (1.0 + std::exp(-1.0));
  for (TriangleAttnMode mode : {TriangleAttnMode::Starting, TriangleAttnMode::Ending}) {
    const Tensor out = run([&](Graph& g) { return triangle_attention(g, one, "ta", g.constant(pair), mode, 1); });
    Mat mean(l * l, v.cols());
    for (int i = 0; i < l; ++i)
      for (int j = 0; j < l; ++j) {
        mean.row(i * l + j).setZero();
        for (int k = 0; k < l; ++k)
          mean.row(i * l + j) += (mode == TriangleAttnMode::Starting ? v.row(i * l + k) : v.row(k * l + j)) / l;
      }
    const Mat expected = ref_linear(gate * mean, one, "ta.o");
    CHECK((M(out.reshaped({l * l, dp})) - expected).cwiseAbs().maxCoeff() < 1e-12);
  }
}

TEST_CASE("seqstruct attention") {
  const BlockConfig cfg = tiny_block();
  const int l = 5, d = 4, dp = cfg.d_pair, heads = cfg.heads_seqstruct;
  ParameterSet ss;
  add_seqstruct_attention(ss, "ss", d, cfg, 1);
  randomize(ss, 17);
  const Tensor hs = random_tensor({l, d}, 18), ht = random_tensor({l, d}, 19);
  const Tensor pair = random_tensor({l, l, dp}, 20);
  Graph g0(false);
  const TrackPair out = seqstruct_attention(g0, ss, "ss", g0.constant(hs), g0.constant(ht), g0.constant(pair), heads);
  CHECK(out.seq.shape() == Shape{l, d});
  CHECK(out.structure.shape() == Shape{l, d});

  // With an empty structure track the sequence half is pair-bias attention
  // on the sequence features, using the matching weight blocks.
  ParameterSet sym = ss;
  sym.get("ss.ln_struct.beta").fill(0.0);
  auto rows = [&](const std::string& n, int start, int count) {
    const Tensor& t = sym.get(n);
    Tensor o(Shape{count, t.cols()});
    for (int r = 0; r < count; ++r)
      for (int c = 0; c < t.cols(); ++c) o.at(r, c) = t.at(start + r, c);
    return o;
  };
  ParameterSet pb;
  pb.add("pb.ln.gamma", sym.get("ss.ln_seq.gamma"));
  pb.add("pb.ln.beta", sym.get("ss.ln_seq.beta"));
  for (const char* n : {"q", "k", "v", "g"}) pb.add(std::string("pb.") + n + ".w", rows(std::string("ss.") + n + ".w", 0, d));
  pb.add("pb.g.b", sym.get("ss.g.b"));
  pb.add("pb.b.w", sym.get("ss.b.w"));
  const Tensor& ow = sym.get("ss.o.w");
  Tensor o_w(Shape{ow.rows(), d}), o_b(Shape{d});
  for (int r = 0; r < ow.rows(); ++r)
    for (int c = 0; c < d; ++c) o_w.at(r, c) = ow.at(r, c);
  for (int c = 0; c < d; ++c) o_b[c] = sym.get("ss.o.b")[c];
  pb.add("pb.o.w", o_w);
  pb.add("pb.o.b", o_b);
  Graph g(false);
  const TrackPair half =
      seqstruct_attention(g, sym, "ss", g.constant(hs), g.constant(Tensor(Shape{l, d})), g.constant(pair), heads);
  Var ref = attn_pair_bias(g, pb, "pb", g.constant(hs), g.constant(pair), heads);
  CHECK(max_abs_diff(half.seq.value(), ref.value()) < 1e-12);

  const std::vector<int> perm = testutil::random_permutation(l, 23);
  Graph g2(false);
  const TrackPair moved = seqstruct_attention(g2, ss, "ss", g2.constant(permute_rows(hs, perm)),
                                              g2.constant(permute_rows(ht, perm)), g2.constant(permute_pair(pair, perm)), heads);
  CHECK(max_abs_diff(moved.seq.value(), permute_rows(out.seq.value(), perm)) < 1e-12);
  CHECK(max_abs_diff(moved.structure.value(), permute_rows(out.structure.value(), perm)) < 1e-12);

  for (std::uint64_t seed : {1, 2, 3}) {
    ParameterSet p = ss;
    randomize(p, 90 + seed);
    p.add("hs", hs);
    p.add("ht", ht);
    p.add("pair", pair);
    const Tensor w1 = random_tensor({l, d}, seed), w2 = random_tensor({l, d}, seed + 10);
    ScalarFn fn = [&](Graph& gg, const ParameterSet& q) {
      TrackPair r = seqstruct_attention(gg, q, "ss", gg.param(q, "hs"), gg.param(q, "ht"), gg.param(q, "pair"), heads);
      return sum_all(r.seq * gg.constant(w1)) + sum_all(r.structure * gg.constant(w2));
    };
    GradCheckOptions opt;
    opt.seed = seed;
    const GradCheckReport r = grad_check(fn, p, opt);
    INFO(r.worst_param);
    CHECK(r.max_rel_error < 1e-4);
  }
}

namespace {

LmInput sample_input(int l, int bits, std::uint64_t seed) {
  Rng rng(seed);
  LmInput in;
  for (int i = 0; i < l; ++i) {
    in.seq.push_back(rng.bernoulli(0.3) ? kAaMask : rng.uniform_int(0, 19));
    in.structure.push_back(rng.bernoulli(0.3) ? (1 << bits) : rng.uniform_int(0, (1 << bits) - 1));
    in.positions.push_back(i < l / 2 ? i : i + 30);
  }
  return in;
}

LmConfig tiny_lm(HeadKind head) {
  LmConfig c;
  c.blocks = 2;
  c.head = head;
  c.rel_clip = 4;
  return c;
}

std::size_t plain_parameter_count(const LmConfig& lm, const BlockConfig& bc, int k) {
  const std::size_t d = bc.d_model, v = std::size_t{1} << k;
  std::size_t n = kAaVocab * d + 2 * d;
  n += lm.head == HeadKind::Index ? (v + 2) * d : k * d + 2 * d;
  const std::size_t block = 2 * d + 3 * d * d + d * d + d + 2 * (2 * lm.rel_clip + 1) * bc.heads + 2 * d +
                            (d * 4 * d + 4 * d) + (4 * d * d + d);
  n += lm.blocks * block + 2 * d + (d * kNumAminoAcids + kNumAminoAcids);
  n += lm.head == HeadKind::Index ? d * v + v : d * 2 * k + 2 * k;
  return n;
}

BlockConfig variant(const std::string& name) {
  BlockConfig c = tiny_block();
  c.pair_bias_and_pair_transition = name != "plain";
  c.struct_transition = name == "ST" || name == "TU" || name == "TA";
  c.triangle_update = name == "TU";
  c.triangle_attention = name == "TA";
  c.seqstruct_attention = name == "SSA";
  return c;
}

} // namespace

TEST_CASE("plain model matches an independent transformer") {
  for (HeadKind head : {HeadKind::Bit, HeadKind::Index}) {
    const LmConfig lm = tiny_lm(head);
    LanguageModel m = LanguageModel::create(lm, tiny_block(), 3, 5);
    randomize(m.params, 6, 0.2);
    CHECK(m.params.scalar_count() == plain_parameter_count(lm, tiny_block(), 3));
    const LmInput in = sample_input(7, 3, 8);
    Graph g(false);
    const LMOutput out = forward(g, m, in);
    const PlainOutput ref = plain_reference(m, in);
    CHECK((M(out.seq_logits.value()) - ref.seq_logits).cwiseAbs().maxCoeff() < 1e-12);
    CHECK((M(out.struct_logits.value().reshaped({7, static_cast<int>(ref.struct_logits.cols())})) - ref.struct_logits).cwiseAbs().maxCoeff() <
          1e-12);
    CHECK(out.hidden.size() == 2);
    CHECK(out.hidden[0].shape() == Shape{7, 8});
    if (head == HeadKind::Bit) CHECK(out.struct_logits.shape() == Shape{7, 3, 2});
    else CHECK(out.struct_logits.shape() == Shape{7, 8});
  }
}

TEST_CASE("geometric variants start as the plain model") {
  const LmConfig lm = tiny_lm(HeadKind::Bit);
  const LanguageModel plain = LanguageModel::create(lm, variant("plain"), 3, 5);
  const LmInput in = sample_input(6, 3, 9);
  Graph g0(false);
  const LMOutput base_out = forward(g0, plain, in);
  std::size_t prev = 0;
  for (const std::string name : {"Base", "ST", "TU", "TA", "SSA"}) {
    const LanguageModel m = LanguageModel::create(lm, variant(name), 3, 5);
    Graph g(false);
    const LMOutput out = forward(g, m, in);
    INFO(name);
    CHECK(max_abs_diff(out.seq_logits.value(), base_out.seq_logits.value()) < 1e-12);
    CHECK(max_abs_diff(out.struct_logits.value(), base_out.struct_logits.value()) < 1e-12);
    CHECK(m.params.scalar_count() > plain.params.scalar_count());
    if (name == "ST") CHECK(m.params.scalar_count() > prev);
    prev = m.params.scalar_count();
  }

  BlockConfig bad = tiny_block();
  bad.triangle_update = true;
  try {
    LanguageModel::create(lm, bad, 3, 1);
    FAIL("expected InvalidConfig");
  } catch (const Error& e) {
    CHECK(e.code() == ErrorCode::InvalidConfig);
  }
}

TEST_CASE("padding keys are ignored") {
  for (const std::string name : {"plain", "Base", "SSA"}) {
    LanguageModel m = LanguageModel::create(tiny_lm(HeadKind::Bit), variant(name), 3, 5);
    randomize(m.params, 3, 0.2);
    LmInput in = sample_input(5, 3, 2);
    Graph g(false);
    const LMOutput a = forward(g, m, in);
    in.seq.push_back(kAaPad);
    in.structure.push_back((1 << 3) + 1);
    in.positions.push_back(5);
    const LMOutput b = forward(g, m, in);
    INFO(name);
    for (int i = 0; i < 5; ++i) {
      for (int c = 0; c < kNumAminoAcids; ++c)
        CHECK(std::abs(b.seq_logits.value().at(i, c) - a.seq_logits.value().at(i, c)) < 1e-9);
      for (int c = 0; c < 3; ++c)
        CHECK(std::abs(b.struct_logits.value().at(i, c, 1) - a.struct_logits.value().at(i, c, 1)) < 1e-9);
    }
  }
}
