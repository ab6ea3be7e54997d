#include "bitfold/pipeline.hpp"

#include <fmt/format.h>

#include <algorithm>
#include <chrono>
#include <filesystem>
#include <fstream>
#include <sstream>

#include "bitfold/alphabet.hpp"
#include "bitfold/error.hpp"
#include "bitfold/fm.hpp"
#include "bitfold/multimer.hpp"
#include "bitfold/suites.hpp"

namespace bitfold::app {

namespace fs = std::filesystem;

namespace {

// Stage offsets from the configured seed, so every stream derives from it.
enum SeedOffset : std::uint64_t { kLmInit = 1, kLmTrain = 2, kFmTrain = 3, kResInit = 4, kResTrain = 5, kEval = 6 };

int stage_steps(const ModelConfig& cfg, const StageOptions& opts) {
  return opts.steps >= 0 ? opts.steps : cfg.train.steps;
}

LrSchedule schedule(const ModelConfig& cfg, int steps) {
  return LrSchedule{cfg.train.lr_peak, cfg.train.warmup, cfg.train.lr_final, std::max(1, steps)};
}

ParameterSet with_prefix(const ParameterSet& ps, const std::string& prefix) {
  ParameterSet out;
  for (const auto& [name, t] : ps) out.add(prefix + name, t);
  return out;
}

ParameterSet strip_prefix(const ParameterSet& ps, const std::string& prefix) {
  ParameterSet out;
  for (const auto& [name, t] : ps)
    if (name.compare(0, prefix.size(), prefix) == 0) out.add(name.substr(prefix.size()), t);
  return out;
}

void load_into(ParameterSet& target, const ParameterSet& stored, const std::string& what) {
  if (target.names() != stored.names())
    fail(ErrorCode::LayoutMismatch, what + " parameters in the checkpoint do not match the configured architecture");
  for (const auto& [name, t] : stored)
    if (target.get(name).shape() != t.shape())
      fail(ErrorCode::LayoutMismatch, fmt::format("{} parameter {} has shape {} but the config implies {}", what, name,
                                                  shape_string(t.shape()), shape_string(target.get(name).shape())));
  target.assign_from(stored);
}

const tok::Tokenizer& need_tokenizer(const Pipeline& p) {
  if (!p.tokenizer) fail(ErrorCode::InvalidConfig, "this stage needs a trained tokenizer");
  return *p.tokenizer;
}

const geo::LanguageModel& need_lm(const Pipeline& p) {
  if (!p.lm) fail(ErrorCode::InvalidConfig, "this stage needs a trained language model");
  return *p.lm;
}

std::string read_file(const std::string& path) {
  std::ifstream f(path, std::ios::binary);
  if (!f) fail(ErrorCode::Io, "cannot open " + path);
  std::stringstream ss;
  ss << f.rdbuf();
  return ss.str();
}

std::vector<mm::Chain> chains_of(const EvalItem& item, const std::vector<int>& tokens) {
  return mm::split_by_chain(item.seq, tokens, item.structure.chain_ids());
}

StageOptions with_steps(int steps) {
  StageOptions o;
  o.steps = steps;
  return o;
}

Pipeline fresh(const ModelConfig& cfg) {
  Pipeline p;
  p.cfg = cfg;
  return p;
}

} // namespace

std::vector<EvalItem> generate_dataset(const DataSpec& spec) {
  if (spec.n < 0 || spec.length < 2 || spec.chains < 1 || spec.length_spread < 0 ||
      spec.length - spec.length_spread < 2 * spec.chains)
    fail(ErrorCode::InvalidConfig, "dataset spec needs n >= 0 and at least two residues per chain");
  std::vector<EvalItem> out;
  for (int i = 0; i < spec.n; ++i) {
    Rng rng(spec.seed * 1000003ULL + static_cast<std::uint64_t>(i));
    geom::SynthSpec s;
    s.length = spec.length + (spec.length_spread ? rng.uniform_int(-spec.length_spread, spec.length_spread) : 0);
    s.chains = spec.chains;
    s.jitter = spec.jitter;
    geom::SynthResult r = geom::synth_backbone(s, rng.next_u64());
    const std::string id = fmt::format("s{:05d}", i);
    r.structure.source_id = id;
    out.push_back({id, geom::round_to_native_precision(r.structure), r.sequence});
  }
  return out;
}

void write_dataset(const std::string& dir, const std::vector<EvalItem>& items) {
  fs::create_directories(dir);
  std::string index;
  for (const EvalItem& it : items) {
    if (it.id.empty() || it.id.find_first_of(" \t\n/") != std::string::npos)
      fail(ErrorCode::InvalidConfig, "dataset ids must be non-empty without whitespace or '/'");
    index += fmt::format("{}\t{}\t{}\t{}\n", it.id, it.structure.chain_count(), it.structure.length(),
                         sequence_to_string(it.seq));
    geom::write_backbone_file((fs::path(dir) / (it.id + ".bb")).string(), it.structure);
  }
  eval::write_text_file((fs::path(dir) / "index.tsv").string(), index);
}

std::vector<EvalItem> read_dataset(const std::string& dir) {
  const std::string index = read_file((fs::path(dir) / "index.tsv").string());
  std::vector<EvalItem> out;
  std::istringstream in(index);
  std::string line;
  int line_no = 0;
  while (std::getline(in, line)) {
    ++line_no;
    if (line.empty()) continue;
    std::istringstream row(line);
    std::string id, seq;
    int chains = 0, length = 0;
    if (!(row >> id >> chains >> length >> seq)) throw ParseError(line_no, "index.tsv: expected id, chains, length, sequence");
    EvalItem item;
    item.id = id;
    item.structure = geom::read_backbone_file((fs::path(dir) / (id + ".bb")).string());
    item.seq = sequence_from_string(seq);
    if (item.structure.length() != length || static_cast<int>(item.seq.size()) != length)
      fail(ErrorCode::LengthMismatch, fmt::format("item {}: index says {} residues, files disagree", id, length));
    if (item.structure.chain_count() != chains)
      fail(ErrorCode::LengthMismatch, fmt::format("item {}: index says {} chains", id, chains));
    out.push_back(std::move(item));
  }
  return out;
}

Checkpoint Pipeline::to_checkpoint() const {
  Checkpoint c;
  c.config = cfg;
  if (tokenizer) c.params.merge(with_prefix(tokenizer->params, "tok."));
  if (lm) c.params.merge(with_prefix(lm->params, "lm."));
  if (resdiff) c.params.merge(with_prefix(resdiff->params, "resdiff."));
  c.step = step;
  c.rng_state = rng_state;
  return c;
}

Pipeline Pipeline::from_checkpoint(const Checkpoint& ckpt) {
  Pipeline p;
  p.cfg = ckpt.config;
  p.cfg.validate();
  p.step = ckpt.step;
  p.rng_state = ckpt.rng_state;
  const int bits = p.cfg.tokenizer.bits;
  if (const ParameterSet s = strip_prefix(ckpt.params, "tok."); s.tensor_count()) {
    p.tokenizer = tok::Tokenizer::create(p.cfg.tokenizer, 0);
    load_into(p.tokenizer->params, s, "tokenizer");
  }
  if (const ParameterSet s = strip_prefix(ckpt.params, "lm."); s.tensor_count()) {
    p.lm = geo::LanguageModel::create(p.cfg.lm, p.cfg.block, bits, 0);
    if (s.contains("repa.layer_logits")) dlm::attach_repa_head(*p.lm, p.cfg.repa, p.cfg.tokenizer.width, 0);
    load_into(p.lm->params, s, "language model");
  }
  if (const ParameterSet s = strip_prefix(ckpt.params, "resdiff."); s.tensor_count()) {
    p.resdiff = resdiff::Head::create(p.cfg.resdiff, bits, p.cfg.block.d_model, p.cfg.lm.blocks, 0);
    load_into(p.resdiff->params, s, "residual head");
  }
  return p;
}

eval::Models Pipeline::models() const {
  return {tokenizer ? &*tokenizer : nullptr, lm ? &*lm : nullptr, resdiff ? &*resdiff : nullptr};
}

std::vector<dlm::LmExample> lm_examples(const tok::Tokenizer& tk, const ModelConfig& cfg,
                                        const std::vector<EvalItem>& data) {
  std::vector<dlm::LmExample> out;
  for (const EvalItem& item : data) {
    const mm::Joined j = mm::insert_linker(chains_of(item, eval::reference_tokens(tk, item.structure)),
                                           cfg.multimer.linker_len, cfg.multimer.pos_offset, tk.bits());
    out.push_back({item.id, j.state});
  }
  return out;
}

repa::TargetStore repa_targets(const tok::Tokenizer& tk, const ModelConfig& cfg, const std::vector<EvalItem>& data) {
  repa::TargetStore store;
  for (const EvalItem& item : data) {
    const Tensor trunk = tok::trunk_representation(tk, item.structure);
    const mm::ChainLayout layout =
        mm::insert_linker(chains_of(item, std::vector<int>(item.seq.size(), 0)), cfg.multimer.linker_len,
                          cfg.multimer.pos_offset, tk.bits())
            .layout;
    const int d = trunk.cols();
    Tensor expanded(Shape{layout.expanded_length(), d});
    for (int i = 0, src = 0; i < layout.expanded_length(); ++i) {
      if (layout.linker_mask[i]) continue;
      for (int c = 0; c < d; ++c) expanded.at(i, c) = trunk.at(src, c);
      ++src;
    }
    store.put(item.id, std::move(expanded));
  }
  return store;
}

std::vector<double> train_tokenizer_stage(Pipeline& p, const std::vector<EvalItem>& data, const StageOptions& opts) {
  const int steps = stage_steps(p.cfg, opts);
  if (steps == 0) {
    p.tokenizer = tok::Tokenizer::create(p.cfg.tokenizer, p.cfg.train.seed);
    return {};
  }
  std::vector<geom::BackboneStructure> structures;
  for (const EvalItem& it : data) structures.push_back(it.structure);
  tok::TokenizerTrainOptions o;
  o.steps = steps;
  o.batch = p.cfg.train.batch;
  o.lr = schedule(p.cfg, steps);
  o.seed = p.cfg.train.seed;
  o.pos_offset = p.cfg.multimer.pos_offset;
  o.on_step = opts.on_step;
  tok::TokenizerTraining t = tok::train_tokenizer(structures, p.cfg.tokenizer, o);
  p.tokenizer = std::move(t.tokenizer);
  p.step += steps;
  return t.report.losses;
}

std::vector<double> train_lm_stage(Pipeline& p, const std::vector<EvalItem>& data, const StageOptions& opts) {
  const tok::Tokenizer& tk = need_tokenizer(p);
  const int steps = stage_steps(p.cfg, opts);
  const std::uint64_t seed = p.cfg.train.seed;
  if (!p.lm) {
    p.lm = geo::LanguageModel::create(p.cfg.lm, p.cfg.block, tk.bits(), seed + kLmInit);
    if (p.cfg.repa.enabled) dlm::attach_repa_head(*p.lm, p.cfg.repa, tk.cfg.width, seed + kLmInit);
  }
  if (p.lm->bits != tk.bits()) fail(ErrorCode::HeadMismatch, "tokenizer and language model disagree on bits");
  const std::vector<dlm::LmExample> examples = lm_examples(tk, p.cfg, data);
  const bool repa = p.cfg.repa.enabled && dlm::has_repa_head(*p.lm);
  const repa::TargetStore targets = repa ? repa_targets(tk, p.cfg, data) : repa::TargetStore{};
  dlm::LmTrainer tr = dlm::LmTrainer::create(*p.lm, seed + kLmTrain);
  dlm::LmTrainOptions o;
  o.steps = steps;
  o.batch = p.cfg.train.batch;
  o.lr = schedule(p.cfg, steps);
  o.folding_sft = p.cfg.lm.folding_sft;
  o.repa_weight = repa ? p.cfg.repa.weight : 0.0;
  o.repa_targets = repa ? &targets : nullptr;
  o.on_step = opts.on_step;
  dlm::train_lm(tr, examples, o);
  p.lm = std::move(tr.model);
  p.step += steps;
  p.rng_state = tr.rng.state();
  return tr.losses;
}

std::vector<double> finetune_fm_stage(Pipeline& p, const std::vector<EvalItem>& data, const StageOptions& opts) {
  const tok::Tokenizer& tk = need_tokenizer(p);
  need_lm(p);
  const int steps = stage_steps(p.cfg, opts);
  std::vector<fm::FmExample> examples;
  for (const EvalItem& it : data) examples.push_back({it.id, it.structure, it.seq});
  dlm::LmTrainer tr = dlm::LmTrainer::create(*p.lm, p.cfg.train.seed + kFmTrain);
  fm::FinetuneOptions o;
  o.steps = steps;
  o.batch = p.cfg.train.batch;
  o.lr = schedule(p.cfg, steps);
  o.sigma = p.cfg.fm.sigma;
  o.pos_offset = p.cfg.multimer.pos_offset;
  o.on_step = opts.on_step;
  fm::fm_finetune(tr, tk, examples, o);
  p.lm = std::move(tr.model);
  p.step += steps;
  p.rng_state = tr.rng.state();
  return tr.losses;
}

std::vector<double> train_resdiff_stage(Pipeline& p, const std::vector<EvalItem>& data, const StageOptions& opts) {
  const tok::Tokenizer& tk = need_tokenizer(p);
  const geo::LanguageModel& lm = need_lm(p);
  const int steps = stage_steps(p.cfg, opts);
  const std::uint64_t seed = p.cfg.train.seed;
  if (!p.resdiff) p.resdiff = resdiff::Head::create(p.cfg.resdiff, tk.bits(), lm.block.d_model, lm.lm.blocks, seed + kResInit);
  std::vector<resdiff::Example> examples;
  for (const EvalItem& it : data) examples.push_back(resdiff::make_example(tk, lm, it.structure, it.seq));
  resdiff::Trainer tr = resdiff::Trainer::create(*p.resdiff, seed + kResTrain);
  resdiff::TrainOptions o;
  o.steps = steps;
  o.batch = p.cfg.train.batch;
  o.lr = schedule(p.cfg, steps);
  o.on_step = opts.on_step;
  resdiff::train(tr, examples, o);
  p.resdiff = std::move(tr.head);
  p.step += steps;
  p.rng_state = tr.rng.state();
  return tr.losses;
}

eval::FoldingConfig folding_config(const ModelConfig& cfg) {
  eval::FoldingConfig f;
  f.sampler = cfg.fm.enabled ? eval::Sampler::Flow : eval::Sampler::MaskPredict;
  f.use_resdiff = cfg.resdiff.enabled;
  f.fm_steps = cfg.fm.n_steps;
  f.fm_sigma = cfg.fm.sigma;
  f.linker_len = cfg.multimer.linker_len;
  f.pos_offset = cfg.multimer.pos_offset;
  f.seed = cfg.train.seed + kEval;
  return f;
}

ModelConfig grid_config(const ModelConfig& base, const std::string& name) {
  ModelConfig c = base;
  c.block = suites::variant_block("plain", base.block);
  c.lm.head = HeadKind::Index;
  c.lm.folding_sft = false;
  c.repa.enabled = false;
  c.resdiff.enabled = false;
  c.fm.enabled = false;
  std::size_t at = 0;
  while (at <= name.size()) {
    const std::size_t end = std::min(name.find('+', at), name.size());
    const std::string part = name.substr(at, end - at);
    if (part == "baseline" || part == "index")
      c.lm.head = HeadKind::Index;
    else if (part == "bit")
      c.lm.head = HeadKind::Bit;
    else if (part == "geo")
      c.block.pair_bias_and_pair_transition = true;
    else if (part == "fm")
      c.fm.enabled = true;
    else if (part == "repa")
      c.repa.enabled = true;
    else if (part == "resdiff")
      c.resdiff.enabled = true;
    else if (part == "sft")
      c.lm.folding_sft = true;
    else
      fail(ErrorCode::InvalidConfig, "unknown grid feature '" + part + "' in '" + name + "'");
    at = end + 1;
  }
  c.validate();
  return c;
}

std::vector<GridRow> reproduce_grid(const GridSpec& spec, const std::vector<EvalItem>& train,
                                    const std::vector<EvalItem>& test, const tok::Tokenizer* shared) {
  std::optional<tok::Tokenizer> own;
  if (!shared) {
    Pipeline p = fresh(spec.base);
    train_tokenizer_stage(p, train, with_steps(spec.tokenizer_steps));
    own = std::move(p.tokenizer);
    shared = &*own;
  }
  std::vector<std::string> names = spec.configs;
  std::sort(names.begin(), names.end());
  names.erase(std::unique(names.begin(), names.end()), names.end());
  std::vector<GridRow> rows;
  for (const std::string& name : names) {
    Pipeline p = fresh(grid_config(spec.base, name));
    p.tokenizer = *shared;
    const auto start = std::chrono::steady_clock::now();
    train_lm_stage(p, train, with_steps(spec.lm_steps));
    if (p.cfg.fm.enabled) finetune_fm_stage(p, train, with_steps(spec.fm_steps));
    if (p.cfg.resdiff.enabled) train_resdiff_stage(p, train, with_steps(spec.resdiff_steps));
    GridRow row;
    row.name = name;
    row.train_seconds = std::chrono::duration<double>(std::chrono::steady_clock::now() - start).count();
    const eval::EvalReport rep = eval::folding_eval(p.models(), test, folding_config(p.cfg));
    row.mean = rep.mean;
    row.eval_seconds = rep.runtime_seconds;
    if (spec.diversity_length > 0)
      row.diversity = eval::diversity(eval::cogenerate(p.models(), spec.diversity_length, spec.diversity_samples, 0, 1.0,
                                                       p.cfg.train.seed + kEval));
    rows.push_back(row);
  }
  return rows;
}

std::string grid_csv(const std::vector<GridRow>& rows) {
  std::string out = "config,rmsd,tm,bit_acc,index_acc,diversity,train_seconds,eval_seconds\n";
  for (const GridRow& r : rows)
    out += fmt::format("{},{:.6f},{:.6f},{:.6f},{:.6f},{:.6f},{:.3f},{:.3f}\n", r.name, r.mean.rmsd, r.mean.tm,
                       r.mean.bit_acc, r.mean.index_acc, r.diversity, r.train_seconds, r.eval_seconds);
  return out;
}

} // namespace bitfold::app
