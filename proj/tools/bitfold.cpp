#include <CLI11.hpp>
#include <fmt/format.h>

#include <filesystem>
#include <optional>

#include "bitfold/alphabet.hpp"
#include "bitfold/error.hpp"
#include "bitfold/pipeline.hpp"
#include "bitfold/suites.hpp"

using namespace bitfold;
namespace fs = std::filesystem;

namespace {

// Raised for bad flag combinations detected after parsing.
struct UsageError : std::runtime_error {
  using std::runtime_error::runtime_error;
};

struct Common {
  std::string config_path;
  std::vector<std::string> sets;
  std::optional<std::uint64_t> seed;
  int log_every = 100;
};

ModelConfig config_from_flags(const Common& c, const ModelConfig& fallback) {
  ModelConfig cfg = c.config_path.empty() ? fallback : ModelConfig::from_file(c.config_path);
  for (const std::string& s : c.sets) cfg.apply_override(s);
  if (c.seed) cfg.train.seed = *c.seed;
  cfg.validate();
  return cfg;
}

ModelConfig config_only(const Common& c) {
  try {
    return config_from_flags(c, ModelConfig{});
  } catch (const Error& e) {
    if (e.code() == ErrorCode::InvalidConfig || e.code() == ErrorCode::ParseError) throw UsageError(e.what());
    throw;
  }
}

/// The checkpoint's pipeline. An explicit --config or --set must reproduce
/// the stored config (the seed may differ) or loading fails.
app::Pipeline pipeline_from(const Common& c, const std::string& path) {
  const Checkpoint ckpt = load_checkpoint(path);
  app::Pipeline p = app::Pipeline::from_checkpoint(ckpt);
  if (!c.config_path.empty() || !c.sets.empty()) {
    ModelConfig expected = config_from_flags(c, ckpt.config);
    expected.train.seed = ckpt.config.train.seed;
    if (!(expected == ckpt.config))
      fail(ErrorCode::InvalidConfig, "checkpoint " + path + " was written with a different configuration");
  }
  if (c.seed) p.cfg.train.seed = *c.seed;
  return p;
}

app::StageOptions stage(int steps, const Common& c, const char* what) {
  app::StageOptions o;
  o.steps = steps;
  const int every = c.log_every;
  if (every > 0)
    o.on_step = [every, what](int step, double loss) {
      if (step % every == 0) fmt::print(stderr, "{} step {} loss {:.6f}\n", what, step, loss);
    };
  return o;
}

void write_losses(const std::string& path, const std::vector<double>& losses) {
  std::string out = "step,loss\n";
  for (std::size_t i = 0; i < losses.size(); ++i) out += fmt::format("{},{:.17g}\n", i + 1, losses[i]);
  eval::write_text_file(path, out);
}

void save(const app::Pipeline& p, const std::string& out, const std::vector<double>& losses) {
  if (const fs::path dir = fs::path(out).parent_path(); !dir.empty()) fs::create_directories(dir);
  save_checkpoint(out, p.to_checkpoint());
  write_losses(out + ".losses.csv", losses);
  fmt::print("wrote {} ({} steps)\n", out, losses.size());
}

std::vector<eval::EvalItem> data_or_empty(const std::string& dir, int steps) {
  if (dir.empty()) {
    if (steps != 0) throw UsageError("--data is required unless --steps is 0");
    return {};
  }
  return app::read_dataset(dir);
}

int steps_or_config(int steps, const ModelConfig& cfg) { return steps >= 0 ? steps : cfg.train.steps; }

} // namespace

int main(int argc, char** argv) {
  CLI::App app{"Structure tokenizer, joint sequence/structure diffusion LM and refinements"};
  app.require_subcommand(1);
  app.fallthrough();
  Common common;
  app.add_option("--config", common.config_path, "Config file ([section] / key = value)");
  app.add_option("--set", common.sets, "Override section.key=value (repeatable)");
  app.add_option("--seed", common.seed, "Seed for every random stream");
  app.add_option("--log-every", common.log_every, "Progress line interval in steps (0 disables)");

  // gen-data
  app::DataSpec data;
  std::string data_out;
  auto* gen = app.add_subcommand("gen-data", "Write a synthetic backbone dataset");
  gen->add_option("--n", data.n, "Number of structures")->capture_default_str();
  gen->add_option("--length", data.length, "Residues per structure")->capture_default_str();
  gen->add_option("--spread", data.length_spread, "Length spread (+-)")->capture_default_str();
  gen->add_option("--chains", data.chains, "Chains per structure")->capture_default_str();
  gen->add_option("--jitter", data.jitter, "Coordinate noise in Angstrom")->capture_default_str();
  gen->add_option("--out", data_out, "Output directory")->required();

  // training stages
  std::string data_dir, in_ckpt, out_ckpt = "model.ckpt";
  int steps = -1;
  auto* ttok = app.add_subcommand("train-tokenizer", "Train the structure tokenizer");
  auto* tlm = app.add_subcommand("train-lm", "Train the diffusion language model");
  auto* tfm = app.add_subcommand("finetune-fm", "Flow-matching fine-tuning of the language model");
  auto* trd = app.add_subcommand("train-resdiff", "Train the residual refinement head");
  for (CLI::App* sub : {ttok, tlm, tfm, trd}) {
    sub->add_option("--data", data_dir, "Dataset directory");
    sub->add_option("--out", out_ckpt, "Checkpoint to write")->capture_default_str();
    sub->add_option("--steps", steps, "Training steps (default train.steps)");
  }
  tlm->add_option("--tokenizer", in_ckpt, "Checkpoint holding the tokenizer (untrained when omitted)");
  for (CLI::App* sub : {tfm, trd}) sub->add_option("--ckpt", in_ckpt, "Input checkpoint")->required();

  // sample
  std::string mode = "folding", sample_out, seq_text;
  int n_samples = 1, length = 64, sample_steps = 0;
  double temperature = 1.0;
  auto* sample = app.add_subcommand("sample", "Generate structures");
  sample->add_option("--ckpt", in_ckpt, "Checkpoint")->required();
  sample->add_option("--mode", mode, "uncond or folding")->check(CLI::IsMember({"uncond", "folding"}))->capture_default_str();
  sample->add_option("--n", n_samples, "Samples")->capture_default_str();
  sample->add_option("--length", length, "Length for unconditional sampling")->capture_default_str();
  sample->add_option("--seq", seq_text, "One-letter sequence for folding");
  sample->add_option("--steps", sample_steps, "Mask-predict steps (default T)");
  sample->add_option("--temperature", temperature, "Sampling temperature")->capture_default_str();
  sample->add_option("--out", sample_out, "Output directory")->required();

  // eval
  std::string eval_mode = "folding", csv_out, summary_out, svg_out, test_dir;
  std::vector<std::string> grid_configs;
  std::vector<int> cogen_lengths = {60, 100, 160};
  int cogen_samples = 40, div_length = 0;
  auto* ev = app.add_subcommand("eval", "Evaluate a checkpoint or run the configuration grid");
  ev->add_option("--mode", eval_mode, "folding, cogen or grid")
      ->check(CLI::IsMember({"folding", "cogen", "grid"}))
      ->capture_default_str();
  ev->add_option("--ckpt", in_ckpt, "Checkpoint (folding, cogen; grid reuses its tokenizer)");
  ev->add_option("--data", data_dir, "Evaluation dataset (grid: training dataset)");
  ev->add_option("--test", test_dir, "Grid held-out dataset (default --data)");
  ev->add_option("--csv", csv_out, "CSV report");
  ev->add_option("--summary", summary_out, "Structured summary");
  ev->add_option("--svg", svg_out, "Speed-vs-RMSD scatter");
  ev->add_option("--configs", grid_configs, "Grid configurations")->delimiter(',');
  ev->add_option("--steps", steps, "Grid training steps per stage (default train.steps)");
  ev->add_option("--lengths", cogen_lengths, "Co-generation lengths")->delimiter(',');
  ev->add_option("--samples", cogen_samples, "Co-generation samples per length")->capture_default_str();
  ev->add_option("--diversity-length", div_length, "Grid co-generation length (0 skips)");

  // grad-check
  std::vector<std::uint64_t> seeds = {1, 2, 3};
  std::vector<std::string> targets = suites::kGradientTargets;
  double tol = 1e-4;
  auto* gc = app.add_subcommand("grad-check", "Finite-difference checks of every trainable objective");
  gc->add_option("--seeds", seeds, "Seeds")->delimiter(',');
  gc->add_option("--targets", targets, "Objectives")->delimiter(',');
  gc->add_option("--tol", tol, "Maximum relative error")->capture_default_str();

  // bench
  suites::BenchOptions bench;
  auto* bn = app.add_subcommand("bench", "Per-step time of encoder variants");
  bn->add_option("--length", bench.length, "Sequence length")->capture_default_str();
  bn->add_option("--blocks", bench.blocks, "Encoder blocks")->capture_default_str();
  bn->add_option("--reps", bench.reps, "Timed repetitions")->capture_default_str();
  bn->add_option("--variants", bench.variants, "plain, base, st, tu, ta, ssa")->delimiter(',');

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int code = app.exit(e);
    return code == 0 ? 0 : 2;
  }

  try {
    if (gen->parsed()) {
      const ModelConfig cfg = config_only(common);
      data.seed = common.seed ? *common.seed : cfg.train.seed;
      const std::vector<eval::EvalItem> items = app::generate_dataset(data);
      app::write_dataset(data_out, items);
      fmt::print("wrote {} structures to {}\n", items.size(), data_out);
    } else if (ttok->parsed()) {
      app::Pipeline p;
      p.cfg = config_only(common);
      const auto items = data_or_empty(data_dir, steps_or_config(steps, p.cfg));
      const auto losses = app::train_tokenizer_stage(p, items, stage(steps, common, "tokenizer"));
      save(p, out_ckpt, losses);
    } else if (tlm->parsed()) {
      app::Pipeline p;
      p.cfg = config_only(common);
      if (!in_ckpt.empty()) {
        const app::Pipeline src = app::Pipeline::from_checkpoint(load_checkpoint(in_ckpt));
        if (!src.tokenizer) fail(ErrorCode::InvalidConfig, in_ckpt + " holds no tokenizer");
        if (!(src.cfg.tokenizer.bits == p.cfg.tokenizer.bits && src.cfg.tokenizer.width == p.cfg.tokenizer.width))
          fail(ErrorCode::InvalidConfig, "tokenizer checkpoint disagrees with the configured tokenizer");
        p.cfg.tokenizer = src.cfg.tokenizer;
        p.tokenizer = src.tokenizer;
      } else {
        p.tokenizer = tok::Tokenizer::create(p.cfg.tokenizer, p.cfg.train.seed);
      }
      const auto items = data_or_empty(data_dir, steps_or_config(steps, p.cfg));
      const auto losses = app::train_lm_stage(p, items, stage(steps, common, "lm"));
      save(p, out_ckpt, losses);
    } else if (tfm->parsed() || trd->parsed()) {
      app::Pipeline p = pipeline_from(common, in_ckpt);
      const auto items = data_or_empty(data_dir, steps_or_config(steps, p.cfg));
      const auto losses = tfm->parsed() ? app::finetune_fm_stage(p, items, stage(steps, common, "fm"))
                                        : app::train_resdiff_stage(p, items, stage(steps, common, "resdiff"));
      save(p, out_ckpt, losses);
    } else if (sample->parsed()) {
      const app::Pipeline p = pipeline_from(common, in_ckpt);
      fs::create_directories(sample_out);
      std::vector<geom::BackboneStructure> out;
      if (mode == "uncond") {
        out = eval::cogenerate(p.models(), length, n_samples, sample_steps, temperature, p.cfg.train.seed);
      } else {
        if (seq_text.empty()) throw UsageError("--seq is required for folding");
        const std::vector<int> seq = sequence_from_string(seq_text);
        const eval::Models m = p.models();
        Rng root(p.cfg.train.seed);
        for (int i = 0; i < n_samples; ++i) {
          dlm::GenerateOptions opt;
          opt.mode = dlm::Conditioning::Folding;
          opt.seq = seq;
          opt.steps = sample_steps > 0 ? sample_steps : p.cfg.lm.diffusion_steps;
          opt.strategy = dlm::Strategy::Confidence;
          opt.temperature = temperature;
          Rng rng = root.split();
          const dlm::Generation g = dlm::generate(*m.lm, opt, rng);
          out.push_back(tok::decode(*m.tokenizer, tok::index_to_bits(g.state.structure, m.lm->bits), g.state.positions));
        }
      }
      for (std::size_t i = 0; i < out.size(); ++i)
        geom::write_backbone_file((fs::path(sample_out) / fmt::format("sample{:03d}.bb", i)).string(), out[i]);
      fmt::print("wrote {} samples to {}\n", out.size(), sample_out);
    } else if (ev->parsed()) {
      if (eval_mode == "grid") {
        app::GridSpec spec;
        spec.base = config_only(common);
        if (!grid_configs.empty()) spec.configs = grid_configs;
        spec.tokenizer_steps = spec.lm_steps = spec.fm_steps = spec.resdiff_steps = steps;
        spec.diversity_length = div_length;
        spec.diversity_samples = cogen_samples;
        if (data_dir.empty()) throw UsageError("grid needs --data");
        const auto train = app::read_dataset(data_dir);
        const auto test = test_dir.empty() ? train : app::read_dataset(test_dir);
        std::optional<app::Pipeline> shared;
        if (!in_ckpt.empty()) shared = app::Pipeline::from_checkpoint(load_checkpoint(in_ckpt));
        if (shared && !shared->tokenizer) fail(ErrorCode::InvalidConfig, in_ckpt + " holds no tokenizer");
        if (shared) spec.base.tokenizer = shared->cfg.tokenizer;
        const auto rows = app::reproduce_grid(spec, train, test, shared ? &*shared->tokenizer : nullptr);
        const std::string table = app::grid_csv(rows);
        fmt::print("{}", table);
        if (!csv_out.empty()) eval::write_text_file(csv_out, table);
        if (!svg_out.empty()) {
          std::vector<eval::ScatterPoint> pts;
          for (const auto& r : rows) pts.push_back({r.name, r.eval_seconds / std::max<std::size_t>(1, test.size()), r.mean.rmsd});
          eval::write_text_file(svg_out, eval::scatter_svg(pts, "folding RMSD vs sampling time"));
        }
      } else {
        if (in_ckpt.empty()) throw UsageError("--ckpt is required");
        const app::Pipeline p = pipeline_from(common, in_ckpt);
        if (eval_mode == "folding") {
          if (data_dir.empty()) throw UsageError("folding evaluation needs --data");
          const eval::EvalReport rep = eval::folding_eval(p.models(), app::read_dataset(data_dir), app::folding_config(p.cfg));
          if (!csv_out.empty()) eval::write_text_file(csv_out, eval::to_csv(rep));
          const std::string summary = eval::summary_text(rep);
          if (!summary_out.empty()) eval::write_text_file(summary_out, summary);
          fmt::print("{}", summary);
          if (!svg_out.empty())
            eval::write_text_file(svg_out, eval::scatter_svg({{"model", rep.runtime_seconds / std::max<std::size_t>(1, rep.rows.size()),
                                                                rep.mean.rmsd}},
                                                              "folding RMSD vs sampling time"));
        } else {
          eval::CoGenConfig cg;
          cg.lengths = cogen_lengths;
          cg.samples = cogen_samples;
          cg.seed = p.cfg.train.seed;
          const auto rows = eval::cogeneration_eval(p.models(), cg);
          std::string table = "length,samples,diversity,runtime_seconds\n";
          for (const auto& r : rows)
            table += fmt::format("{},{},{:.6f},{:.3f}\n", r.length, r.samples, r.diversity, r.runtime_seconds);
          fmt::print("{}", table);
          if (!csv_out.empty()) eval::write_text_file(csv_out, table);
        }
      }
    } else if (gc->parsed()) {
      bool ok = true;
      for (const suites::GradRow& r : suites::gradient_suite(seeds, targets)) {
        const bool pass = r.max_rel_error < tol;
        ok = ok && pass;
        fmt::print("{:<22} seed {:<3} max_rel_error {:.3e} {}{}\n", r.name, r.seed, r.max_rel_error, pass ? "ok" : "FAIL",
                   pass ? "" : " (" + r.worst_param + ")");
      }
      return ok ? 0 : 1;
    } else if (bn->parsed()) {
      bench.dims = config_only(common).block;
      fmt::print("variant,seconds_per_step,parameters\n");
      for (const suites::BenchRow& r : suites::block_benchmark(bench))
        fmt::print("{},{:.6f},{}\n", r.variant, r.seconds_per_step, r.parameters);
    }
  } catch (const UsageError& e) {
    fmt::print(stderr, "usage error: {}\n", e.what());
    return 2;
  } catch (const std::exception& e) {
    fmt::print(stderr, "error: {}\n", e.what());
    return 1;
  }
  return 0;
}
