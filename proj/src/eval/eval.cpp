#include "bitfold/eval.hpp"

#include <fmt/format.h>

#include <algorithm>
#include <atomic>
#include <chrono>
#include <cstdlib>
#include <fstream>
#include <thread>

#include "bitfold/error.hpp"
#include "bitfold/fm.hpp"
#include "bitfold/multimer.hpp"

namespace bitfold::eval {

using geom::BackboneStructure;

namespace {

bool special(int token, int bits) { return token < 0 || token >= tok::codebook_size(bits); }

double seconds_since(std::chrono::steady_clock::time_point start) {
  return std::chrono::duration<double>(std::chrono::steady_clock::now() - start).count();
}

double median(std::vector<double> v) {
  if (v.empty()) return 0.0;
  std::sort(v.begin(), v.end());
  const std::size_t n = v.size();
  return n % 2 ? v[n / 2] : 0.5 * (v[n / 2 - 1] + v[n / 2]);
}

Tensor keep_rows(const Tensor& x, const std::vector<bool>& drop) {
  const int cols = x.cols();
  std::vector<double> out;
  int rows = 0;
  for (int i = 0; i < x.rows(); ++i) {
    if (drop[i]) continue;
    out.insert(out.end(), x.data() + static_cast<std::size_t>(i) * cols, x.data() + static_cast<std::size_t>(i + 1) * cols);
    ++rows;
  }
  return Tensor(Shape{rows, cols}, std::move(out));
}

void require_models(const Models& m) {
  if (!m.tokenizer || !m.lm) fail(ErrorCode::InvalidConfig, "evaluation needs a tokenizer and a language model");
  if (m.tokenizer->bits() != m.lm->bits) fail(ErrorCode::HeadMismatch, "tokenizer and language model disagree on bits");
}

struct Folded {
  BackboneStructure structure;
  std::vector<int> tokens;  // stripped of linkers
};

Folded fold_mask_predict(const Models& models, const EvalItem& item, const FoldingConfig& cfg, Rng& gen_rng,
                         Rng& ref_rng) {
  const int bits = models.lm->bits;
  std::vector<mm::Chain> chains =
      mm::split_by_chain(item.seq, std::vector<int>(item.seq.size(), tok::mask_token(bits)), item.structure.chain_ids());
  const mm::Joined joined = mm::insert_linker(chains, cfg.linker_len, cfg.pos_offset, bits);

  dlm::GenerateOptions opt;
  opt.mode = dlm::Conditioning::Folding;
  opt.seq = joined.state.seq;
  opt.positions = joined.state.positions;
  opt.struct_known = joined.state.struct_known;
  opt.steps = cfg.steps > 0 ? cfg.steps : models.lm->lm.diffusion_steps;
  opt.strategy = cfg.strategy;
  opt.temperature = cfg.temperature;
  const dlm::Generation gen = dlm::generate(*models.lm, opt, gen_rng);

  Folded f;
  f.tokens = mm::drop_linker(gen.state.structure, joined.layout);
  Tensor z = tok::index_to_bits(f.tokens, bits);
  if (cfg.use_resdiff && models.resdiff) {
    std::vector<Tensor> hidden = resdiff::lm_hidden(*models.lm, gen.state);
    for (Tensor& h : hidden) h = keep_rows(h, joined.layout.linker_mask);
    z = resdiff::refine(*models.resdiff, z, hidden, ref_rng);
  }
  const std::vector<int> chain_ids = item.structure.chain_ids();
  f.structure = tok::decode(*models.tokenizer, z, tok::chain_positions(chain_ids, cfg.pos_offset), chain_ids);
  return f;
}

Folded fold_flow(const Models& models, const EvalItem& item, const FoldingConfig& cfg, Rng& gen_rng, Rng& ref_rng) {
  fm::Models fmm{models.tokenizer, models.lm, cfg.use_resdiff ? models.resdiff : nullptr, cfg.pos_offset};
  // The denoiser's refinement noise comes from its own stream.
  const fm::Denoiser base = fm::composed_denoiser(fmm);
  fm::Denoiser den = [&](const fm::FlowState& x, Rng&) { return base(x, ref_rng); };
  const fm::FmResult r = fm::fm_generate(den, item.structure.chain_ids(), item.seq, cfg.fm_steps, cfg.fm_sigma, gen_rng);
  Folded f;
  f.structure = r.structure;
  f.tokens = fm::predict_tokens(
      *models.lm, fm::noisy_state(*models.tokenizer, r.structure, item.seq, cfg.pos_offset, models.lm->bits));
  return f;
}

} // namespace

TokenAccuracy token_accuracy(const std::vector<int>& pred, const std::vector<int>& truth, int bits) {
  if (pred.size() != truth.size())
    fail(ErrorCode::LengthMismatch,
         fmt::format("token accuracy on {} predicted vs {} reference tokens", pred.size(), truth.size()));
  TokenAccuracy acc;
  long matched_bits = 0, matched = 0;
  for (std::size_t i = 0; i < pred.size(); ++i) {
    if (special(pred[i], bits) || special(truth[i], bits)) continue;
    ++acc.positions;
    matched += pred[i] == truth[i];
    matched_bits += bits - __builtin_popcount(static_cast<unsigned>(pred[i] ^ truth[i]));
  }
  if (acc.positions == 0) return acc;
  acc.index_acc = static_cast<double>(matched) / acc.positions;
  acc.bit_acc = static_cast<double>(matched_bits) / (static_cast<double>(acc.positions) * bits);
  return acc;
}

TokenAccuracy token_accuracy(const Tensor& pred_bits, const std::vector<int>& truth, int bits) {
  if (pred_bits.rank() != 2 || pred_bits.cols() != bits)
    fail(ErrorCode::ShapeMismatch, "bit predictions must be (L, K) with K = " + std::to_string(bits));
  if (pred_bits.rows() != static_cast<int>(truth.size()))
    fail(ErrorCode::LengthMismatch, "bit prediction rows differ from the reference length");
  return token_accuracy(tok::bits_to_index(pred_bits), truth, bits);
}

Aggregate mean_of(const std::vector<EvalRow>& rows) {
  Aggregate a;
  if (rows.empty()) return a;
  for (const EvalRow& r : rows) {
    a.rmsd += r.rmsd;
    a.tm += r.tm;
    a.bit_acc += r.bit_acc;
    a.index_acc += r.index_acc;
  }
  const double n = static_cast<double>(rows.size());
  a.rmsd /= n;
  a.tm /= n;
  a.bit_acc /= n;
  a.index_acc /= n;
  return a;
}

Aggregate median_of(const std::vector<EvalRow>& rows) {
  std::vector<double> rmsd, tm, bit, index;
  for (const EvalRow& r : rows) {
    rmsd.push_back(r.rmsd);
    tm.push_back(r.tm);
    bit.push_back(r.bit_acc);
    index.push_back(r.index_acc);
  }
  return {median(rmsd), median(tm), median(bit), median(index)};
}

std::vector<int> reference_tokens(const tok::Tokenizer& tk, const BackboneStructure& s) {
  return tok::bits_to_index(tok::quantize(tok::encode(tk, s)));
}

EvalReport folding_eval(const Models& models, const std::vector<EvalItem>& data, const FoldingConfig& cfg) {
  require_models(models);
  const auto start = std::chrono::steady_clock::now();
  Rng root(cfg.seed);
  std::vector<Rng> gen_rngs, ref_rngs;
  for (std::size_t i = 0; i < data.size(); ++i) {
    Rng item = root.split();
    gen_rngs.push_back(item.split());
    ref_rngs.push_back(item.split());
  }
  EvalReport rep;
  rep.rows.resize(data.size());
  rep.tokens.resize(data.size());
  parallel_for(static_cast<int>(data.size()), thread_count(cfg.threads), [&](int i) {
    const EvalItem& item = data[i];
    if (item.seq.size() != item.structure.residues.size())
      fail(ErrorCode::LengthMismatch, "item " + item.id + ": sequence and structure lengths differ");
    const Folded f = cfg.sampler == Sampler::Flow ? fold_flow(models, item, cfg, gen_rngs[i], ref_rngs[i])
                                                  : fold_mask_predict(models, item, cfg, gen_rngs[i], ref_rngs[i]);
    const TokenAccuracy acc = token_accuracy(f.tokens, reference_tokens(*models.tokenizer, item.structure),
                                             models.lm->bits);
    rep.rows[i] = {item.id, geom::ca_rmsd(f.structure, item.structure), geom::tm_score(f.structure, item.structure),
                   acc.bit_acc, acc.index_acc};
    rep.tokens[i] = f.tokens;
  });
  rep.mean = mean_of(rep.rows);
  rep.median = median_of(rep.rows);
  rep.runtime_seconds = seconds_since(start);
  return rep;
}

int cluster_count(const std::vector<BackboneStructure>& samples, double tm_threshold) {
  if (samples.empty()) fail(ErrorCode::DegenerateInput, "diversity of an empty sample set");
  const int l = samples.front().length();
  for (const BackboneStructure& s : samples)
    if (s.length() != l)
      fail(ErrorCode::LengthMismatch, fmt::format("diversity over lengths {} and {}", l, s.length()));
  std::vector<int> leaders;
  for (int i = 0; i < static_cast<int>(samples.size()); ++i) {
    bool joined = false;
    for (int r : leaders)
      if (geom::tm_score(samples[i], samples[r]) >= tm_threshold) {
        joined = true;
        break;
      }
    if (!joined) leaders.push_back(i);
  }
  return static_cast<int>(leaders.size());
}

double diversity(const std::vector<BackboneStructure>& samples, double tm_threshold) {
  return static_cast<double>(cluster_count(samples, tm_threshold)) / static_cast<double>(samples.size());
}

std::vector<BackboneStructure> cogenerate(const Models& models, int length, int n, int steps, double temperature,
                                          std::uint64_t seed, int threads) {
  require_models(models);
  Rng root(seed);
  std::vector<Rng> rngs;
  for (int i = 0; i < n; ++i) rngs.push_back(root.split());
  std::vector<BackboneStructure> out(n);
  parallel_for(n, thread_count(threads), [&](int i) {
    dlm::GenerateOptions opt;
    opt.length = length;
    opt.mode = dlm::Conditioning::None;
    opt.steps = steps > 0 ? steps : models.lm->lm.diffusion_steps;
    opt.temperature = temperature;
    const dlm::Generation gen = dlm::generate(*models.lm, opt, rngs[i]);
    out[i] = tok::decode(*models.tokenizer, tok::index_to_bits(gen.state.structure, models.lm->bits),
                         gen.state.positions);
  });
  return out;
}

std::vector<CoGenRow> cogeneration_eval(const Models& models, const CoGenConfig& cfg) {
  std::vector<CoGenRow> rows;
  for (std::size_t k = 0; k < cfg.lengths.size(); ++k) {
    const auto start = std::chrono::steady_clock::now();
    const std::vector<BackboneStructure> samples = cogenerate(models, cfg.lengths[k], cfg.samples, cfg.steps,
                                                              cfg.temperature, cfg.seed + k, cfg.threads);
    rows.push_back({cfg.lengths[k], cfg.samples, diversity(samples, cfg.tm_threshold), seconds_since(start)});
  }
  return rows;
}

std::string to_csv(const EvalReport& report) {
  std::string out = std::string(kCsvHeader) + "\n";
  for (const EvalRow& r : report.rows)
    out += fmt::format("{},{:.6f},{:.6f},{:.6f},{:.6f}\n", r.id, r.rmsd, r.tm, r.bit_acc, r.index_acc);
  return out;
}

std::string summary_text(const EvalReport& report) {
  std::string out = fmt::format("[summary]\nsamples = {}\nruntime_seconds = {:.3f}\n", report.rows.size(),
                                report.runtime_seconds);
  for (const auto& [name, a] : {std::pair{"mean", report.mean}, std::pair{"median", report.median}})
    out += fmt::format("\n[{}]\nrmsd = {:.6f}\ntm = {:.6f}\nbit_acc = {:.6f}\nindex_acc = {:.6f}\n", name, a.rmsd, a.tm,
                       a.bit_acc, a.index_acc);
  return out;
}

std::string scatter_svg(const std::vector<ScatterPoint>& points, const std::string& title) {
  const double w = 480, h = 360, m = 50;
  double xmax = 1e-9, ymax = 1e-9;
  for (const ScatterPoint& p : points) {
    xmax = std::max(xmax, p.seconds);
    ymax = std::max(ymax, p.rmsd);
  }
  xmax *= 1.1;
  ymax *= 1.1;
  auto sx = [&](double x) { return m + x / xmax * (w - 2 * m); };
  auto sy = [&](double y) { return h - m - y / ymax * (h - 2 * m); };
  std::string out = fmt::format(
      "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"{0}\" height=\"{1}\" viewBox=\"0 0 {0} {1}\">\n"
      "<rect width=\"100%\" height=\"100%\" fill=\"white\"/>\n"
      "<line x1=\"{2}\" y1=\"{3}\" x2=\"{4}\" y2=\"{3}\" stroke=\"black\"/>\n"
      "<line x1=\"{2}\" y1=\"{2}\" x2=\"{2}\" y2=\"{3}\" stroke=\"black\"/>\n"
      "<text x=\"{5}\" y=\"{6}\" text-anchor=\"middle\" font-size=\"12\">seconds per sample</text>\n"
      "<text x=\"14\" y=\"{7}\" text-anchor=\"middle\" font-size=\"12\" transform=\"rotate(-90 14 {7})\">RMSD (A)</text>\n"
      "<text x=\"{5}\" y=\"20\" text-anchor=\"middle\" font-size=\"14\">{8}</text>\n"
      "<text x=\"{4}\" y=\"{9}\" text-anchor=\"end\" font-size=\"10\">{10:.3g}</text>\n"
      "<text x=\"{11}\" y=\"{12}\" text-anchor=\"end\" font-size=\"10\">{13:.3g}</text>\n",
      w, h, m, h - m, w - m, w / 2, h - 12, h / 2, title, h - m + 14, xmax, m - 4, m + 4, ymax);
  for (const ScatterPoint& p : points)
    out += fmt::format(
        "<circle cx=\"{0:.2f}\" cy=\"{1:.2f}\" r=\"4\" fill=\"steelblue\"/>\n"
        "<text x=\"{2:.2f}\" y=\"{3:.2f}\" font-size=\"10\">{4}</text>\n",
        sx(p.seconds), sy(p.rmsd), sx(p.seconds) + 6, sy(p.rmsd) - 6, p.label);
  return out + "</svg>\n";
}

void write_text_file(const std::string& path, const std::string& text) {
  std::ofstream f(path, std::ios::binary);
  if (!f) fail(ErrorCode::Io, "cannot open " + path + " for writing");
  f << text;
  if (!f) fail(ErrorCode::Io, "write to " + path + " failed");
}

int thread_count(int requested) {
  if (requested > 0) return requested;
  if (const char* env = std::getenv("BITFOLD_THREADS")) {
    const int n = std::atoi(env);
    if (n > 0) return n;
  }
  return 1;
}

void parallel_for(int n, int threads, const std::function<void(int)>& fn) {
  threads = std::max(1, std::min(threads, n));
  if (threads == 1) {
    for (int i = 0; i < n; ++i) fn(i);
    return;
  }
  std::atomic<int> next{0};
  std::vector<std::exception_ptr> errors(n);
  std::vector<std::thread> pool;
  for (int w = 0; w < threads; ++w)
    pool.emplace_back([&] {
      for (int i = next++; i < n; i = next++) {
        try {
          fn(i);
        } catch (...) {
          errors[i] = std::current_exception();
        }
      }
    });
  for (std::thread& t : pool) t.join();
  for (const std::exception_ptr& e : errors)
    if (e) std::rethrow_exception(e);
}

} // namespace bitfold::eval
