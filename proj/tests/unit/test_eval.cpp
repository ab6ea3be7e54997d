#include "doctest.h"

#include <algorithm>

#include "bitfold/eval.hpp"
#include "test_util.hpp"

using namespace bitfold;
using namespace bitfold::eval;
using geom::BackboneStructure;

namespace {

BackboneStructure synth(int l, std::uint64_t seed, int chains = 1) {
  geom::SynthSpec spec;
  spec.length = l;
  spec.chains = chains;
  return geom::synth_backbone(spec, seed).structure;
}

tok::Tokenizer tiny_tokenizer(int bits) {
  TokenizerConfig cfg;
  cfg.bits = bits;
  cfg.width = 16;
  cfg.enc_blocks = 1;
  cfg.dec_blocks = 1;
  cfg.heads = 2;
  cfg.rel_clip = 8;
  return tok::Tokenizer::create(cfg, 1);
}

geo::LanguageModel tiny_model(int bits, HeadKind head = HeadKind::Bit) {
  LmConfig lm;
  lm.blocks = 2;
  lm.head = head;
  lm.diffusion_steps = 8;
  lm.rel_clip = 8;
  BlockConfig bc;
  bc.d_model = 16;
  bc.heads = 2;
  geo::LanguageModel m = geo::LanguageModel::create(lm, bc, bits, 3);
  testutil::randomize(m.params, 9, 0.3);
  return m;
}

std::vector<EvalItem> items() {
  std::vector<EvalItem> out;
  for (int i = 0; i < 3; ++i) {
    geom::SynthSpec spec;
    spec.length = 12 + 2 * i;
    spec.chains = i == 2 ? 2 : 1;
    const geom::SynthResult r = geom::synth_backbone(spec, 40 + i);
    out.push_back({"s" + std::to_string(i), r.structure, r.sequence});
  }
  return out;
}

} // namespace

TEST_CASE("token accuracy") {
  const std::vector<int> truth = {0, 17, 255, 128, 3};
  const TokenAccuracy same = token_accuracy(truth, truth, 8);
  CHECK(same.index_acc == 1.0);
  CHECK(same.bit_acc == 1.0);

  std::vector<int> one_off = truth;
  for (std::size_t i = 0; i < truth.size(); ++i) one_off[i] ^= 1 << (i % 8);
  const TokenAccuracy off = token_accuracy(one_off, truth, 8);
  CHECK(off.index_acc == 0.0);
  CHECK(off.bit_acc == 7.0 / 8.0);

  std::vector<int> masked = truth;
  masked[1] = tok::mask_token(8);
  masked[3] = tok::pad_token(8);
  const TokenAccuracy m = token_accuracy(masked, truth, 8);
  CHECK(m.positions == 3);
  CHECK(m.index_acc == 1.0);

  CHECK(token_accuracy(tok::index_to_bits(one_off, 8), truth, 8).bit_acc == 7.0 / 8.0);
  CHECK_THROWS_AS(token_accuracy(std::vector<int>{1, 2}, truth, 8), Error);
  try {
    token_accuracy(std::vector<int>{1}, truth, 8);
  } catch (const Error& e) {
    CHECK(e.code() == ErrorCode::LengthMismatch);
  }

  // Matching an index means matching all of its bits.
  Rng rng(1);
  for (int trial = 0; trial < 200; ++trial) {
    const int k = rng.uniform_int(1, 10);
    std::vector<int> a(rng.uniform_int(1, 20)), b(a.size());
    for (std::size_t i = 0; i < a.size(); ++i) {
      a[i] = rng.uniform_int(0, (1 << k) - 1);
      b[i] = rng.bernoulli(0.3) ? a[i] : rng.uniform_int(0, (1 << k) - 1);
    }
    const TokenAccuracy acc = token_accuracy(a, b, k);
    CHECK(acc.bit_acc >= acc.index_acc);
  }
}

TEST_CASE("diversity endpoints") {
  const BackboneStructure s = synth(40, 1);
  const std::vector<BackboneStructure> same(6, s);
  CHECK(diversity(same) == 1.0 / 6.0);

  std::vector<BackboneStructure> varied;
  for (int i = 0; i < 6; ++i) varied.push_back(synth(40, 10 + i));
  double max_tm = 0.0;
  for (std::size_t i = 0; i < varied.size(); ++i)
    for (std::size_t j = 0; j < varied.size(); ++j)
      if (i != j) max_tm = std::max(max_tm, geom::tm_score(varied[i], varied[j]));
  CHECK(diversity(varied, std::min(1.0, max_tm + 1e-9)) == 1.0);

  double prev = 1.0;
  for (double th : {1.0, 0.8, 0.6, 0.5, 0.4, 0.2, 0.0}) {
    const double d = diversity(varied, th);
    CHECK(d <= prev);
    CHECK(d >= 1.0 / 6.0);
    prev = d;
  }
  CHECK(diversity(varied, 0.0) == 1.0 / 6.0);
  CHECK(diversity(varied) == diversity(varied));

  CHECK_THROWS_AS(diversity({synth(40, 1), synth(41, 1)}), Error);
  CHECK_THROWS_AS(diversity({}), Error);
}

TEST_CASE("folding evaluation contracts") {
  const tok::Tokenizer tk = tiny_tokenizer(4);
  const geo::LanguageModel lm = tiny_model(4);
  const std::vector<EvalItem> data = items();
  Models models{&tk, &lm};
  FoldingConfig cfg;
  cfg.seed = 5;
  cfg.linker_len = 3;
  const EvalReport a = folding_eval(models, data, cfg);
  REQUIRE(a.rows.size() == data.size());
  for (std::size_t i = 0; i < data.size(); ++i) {
    const EvalRow& r = a.rows[i];
    CHECK(r.id == data[i].id);
    CHECK(r.tm >= 0.0);
    CHECK(r.tm <= 1.0);
    CHECK(r.rmsd >= 0.0);
    CHECK(r.bit_acc >= r.index_acc);
    CHECK(a.tokens[i].size() == data[i].seq.size());
  }
  const EvalReport b = folding_eval(models, data, cfg);
  CHECK(to_csv(a) == to_csv(b));
  CHECK(a.tokens == b.tokens);

  cfg.threads = 3;
  CHECK(to_csv(folding_eval(models, data, cfg)) == to_csv(a));
  cfg.threads = 0;

  cfg.strategy = dlm::Strategy::Stochastic;
  cfg.temperature = 1.0;
  const EvalReport stoch = folding_eval(models, data, cfg);
  CHECK(stoch.rows.size() == data.size());

  // Refinement changes structures only.
  const resdiff::Head head = resdiff::Head::create(ResDiffConfig{true, 4, 1e-4, 0.02, 16, 2}, 4, lm.block.d_model,
                                                   lm.lm.blocks, 7);
  models.resdiff = &head;
  cfg.use_resdiff = true;
  const EvalReport refined = folding_eval(models, data, cfg);
  CHECK(refined.tokens == stoch.tokens);
  bool moved = false;
  for (std::size_t i = 0; i < data.size(); ++i) {
    CHECK(refined.rows[i].bit_acc == stoch.rows[i].bit_acc);
    moved = moved || refined.rows[i].rmsd != stoch.rows[i].rmsd;
  }
  CHECK(moved);

  cfg.sampler = Sampler::Flow;
  cfg.fm_steps = 3;
  const EvalReport flow = folding_eval(models, data, cfg);
  CHECK(flow.rows.size() == data.size());
  CHECK(to_csv(flow) == to_csv(folding_eval(models, data, cfg)));

  const tok::Tokenizer other = tiny_tokenizer(5);
  CHECK_THROWS_AS(folding_eval(Models{&other, &lm}, data, cfg), Error);
}

TEST_CASE("co-generation protocol") {
  const tok::Tokenizer tk = tiny_tokenizer(4);
  const geo::LanguageModel lm = tiny_model(4);
  CoGenConfig cfg;
  CHECK(cfg.samples == 40);
  CHECK(cfg.lengths == std::vector<int>{60, 100, 160});
  cfg.lengths = {10, 14};
  cfg.samples = 4;
  cfg.steps = 4;
  const std::vector<CoGenRow> rows = cogeneration_eval(Models{&tk, &lm}, cfg);
  REQUIRE(rows.size() == 2);
  for (const CoGenRow& r : rows) {
    CHECK(r.samples == 4);
    CHECK(r.diversity >= 0.25);
    CHECK(r.diversity <= 1.0);
  }
  const auto s1 = cogenerate(Models{&tk, &lm}, 10, 3, 4, 1.0, 2);
  CHECK(s1 == cogenerate(Models{&tk, &lm}, 10, 3, 4, 1.0, 2));
  CHECK(s1.front().length() == 10);
}

TEST_CASE("report formats") {
  EvalReport r;
  r.rows = {{"a", 1.5, 0.25, 0.75, 0.5}, {"b", 0.5, 0.75, 1.0, 1.0}, {"c", 4.0, 0.1, 0.5, 0.0}};
  r.mean = mean_of(r.rows);
  r.median = median_of(r.rows);
  CHECK(r.mean.rmsd == doctest::Approx(2.0));
  CHECK(r.median.rmsd == 1.5);
  CHECK(median_of({r.rows[0], r.rows[1]}).tm == 0.5);
  const std::string csv = to_csv(r);
  CHECK(csv.rfind("id,rmsd,tm,bit_acc,index_acc\n", 0) == 0);
  CHECK(csv.find("a,1.500000,0.250000,0.750000,0.500000\n") != std::string::npos);
  CHECK(std::count(csv.begin(), csv.end(), '\n') == 4);
  const std::string sum = summary_text(r);
  CHECK(sum.find("[mean]") != std::string::npos);
  CHECK(sum.find("[median]\nrmsd = 1.500000") != std::string::npos);
  const std::string svg = scatter_svg({{"plain", 0.1, 2.0}, {"geo", 0.4, 1.0}}, "speed");
  CHECK(svg.rfind("<svg", 0) == 0);
  CHECK(svg.find("<circle") != std::string::npos);
  CHECK(svg.find("</svg>") != std::string::npos);
}

TEST_CASE("worker pool") {
  std::vector<int> out(17, 0);
  parallel_for(17, 4, [&](int i) { out[i] = i * i; });
  for (int i = 0; i < 17; ++i) CHECK(out[i] == i * i);
  CHECK_THROWS_AS(parallel_for(5, 2, [](int i) {
                    if (i == 3) fail(ErrorCode::Io, "boom");
                  }),
                  Error);
  CHECK(thread_count(3) == 3);
}
