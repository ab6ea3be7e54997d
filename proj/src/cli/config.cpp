#include "bitfold/config.hpp"

#include <charconv>
#include <fstream>
#include <sstream>
#include <variant>
#include <vector>

#include <fmt/format.h>

#include "bitfold/error.hpp"

namespace bitfold {
namespace {

using FieldRef = std::variant<int*, double*, bool*, std::uint64_t*, HeadKind*, LossWeight*>;

struct Field {
  const char* section;
  const char* key;
  FieldRef ref;
};

std::vector<Field> fields(ModelConfig& c) {
  return {
      {"tokenizer", "bits", &c.tokenizer.bits},
      {"tokenizer", "width", &c.tokenizer.width},
      {"tokenizer", "enc_blocks", &c.tokenizer.enc_blocks},
      {"tokenizer", "dec_blocks", &c.tokenizer.dec_blocks},
      {"tokenizer", "heads", &c.tokenizer.heads},
      {"tokenizer", "rel_clip", &c.tokenizer.rel_clip},
      {"tokenizer", "commit_weight", &c.tokenizer.commit_weight},
      {"tokenizer", "entropy_weight", &c.tokenizer.entropy_weight},
      {"tokenizer", "quant_mix", &c.tokenizer.quant_mix},
      {"block", "pair_bias_and_pair_transition", &c.block.pair_bias_and_pair_transition},
      {"block", "struct_transition", &c.block.struct_transition},
      {"block", "triangle_update", &c.block.triangle_update},
      {"block", "triangle_attention", &c.block.triangle_attention},
      {"block", "seqstruct_attention", &c.block.seqstruct_attention},
      {"block", "d_model", &c.block.d_model},
      {"block", "heads", &c.block.heads},
      {"block", "d_pair", &c.block.d_pair},
      {"block", "d_pair_hidden", &c.block.d_pair_hidden},
      {"block", "d_tri_update", &c.block.d_tri_update},
      {"block", "d_tri_attn_head", &c.block.d_tri_attn_head},
      {"block", "heads_tri", &c.block.heads_tri},
      {"block", "heads_pair_bias", &c.block.heads_pair_bias},
      {"block", "transition_ratio", &c.block.transition_ratio},
      {"block", "d_seqstruct", &c.block.d_seqstruct},
      {"block", "heads_seqstruct", &c.block.heads_seqstruct},
      {"lm", "blocks", &c.lm.blocks},
      {"lm", "head", &c.lm.head},
      {"lm", "diffusion_steps", &c.lm.diffusion_steps},
      {"lm", "loss_weight", &c.lm.weight},
      {"lm", "folding_sft", &c.lm.folding_sft},
      {"lm", "rel_clip", &c.lm.rel_clip},
      {"repa", "enabled", &c.repa.enabled},
      {"repa", "weight", &c.repa.weight},
      {"repa", "hidden", &c.repa.hidden},
      {"resdiff", "enabled", &c.resdiff.enabled},
      {"resdiff", "steps", &c.resdiff.steps},
      {"resdiff", "beta_start", &c.resdiff.beta_start},
      {"resdiff", "beta_end", &c.resdiff.beta_end},
      {"resdiff", "hidden", &c.resdiff.hidden},
      {"resdiff", "layers", &c.resdiff.layers},
      {"fm", "enabled", &c.fm.enabled},
      {"fm", "n_steps", &c.fm.n_steps},
      {"fm", "sigma", &c.fm.sigma},
      {"multimer", "linker_len", &c.multimer.linker_len},
      {"multimer", "pos_offset", &c.multimer.pos_offset},
      {"train", "lr_peak", &c.train.lr_peak},
      {"train", "warmup", &c.train.warmup},
      {"train", "lr_final", &c.train.lr_final},
      {"train", "steps", &c.train.steps},
      {"train", "batch", &c.train.batch},
      {"train", "seed", &c.train.seed},
  };
}

std::string_view trim(std::string_view s) {
  const auto b = s.find_first_not_of(" \t\r");
  if (b == std::string_view::npos) return {};
  const auto e = s.find_last_not_of(" \t\r");
  return s.substr(b, e - b + 1);
}

template <typename T>
T parse_number(std::string_view v, std::string_view name) {
  T out{};
  const auto [ptr, ec] = std::from_chars(v.data(), v.data() + v.size(), out);
  if (ec != std::errc() || ptr != v.data() + v.size())
    fail(ErrorCode::InvalidConfig, fmt::format("bad value '{}' for {}", v, name));
  return out;
}

double parse_real(std::string_view v, std::string_view name) {
  const std::string s(v);
  char* end = nullptr;
  const double out = std::strtod(s.c_str(), &end);
  if (s.empty() || end != s.c_str() + s.size())
    fail(ErrorCode::InvalidConfig, fmt::format("bad value '{}' for {}", v, name));
  return out;
}

void assign(const FieldRef& ref, std::string_view v, std::string_view name) {
  std::visit(
      [&](auto* p) {
        using T = std::remove_pointer_t<decltype(p)>;
        if constexpr (std::is_same_v<T, int>) {
          *p = parse_number<int>(v, name);
        } else if constexpr (std::is_same_v<T, std::uint64_t>) {
          *p = parse_number<std::uint64_t>(v, name);
        } else if constexpr (std::is_same_v<T, double>) {
          *p = parse_real(v, name);
        } else if constexpr (std::is_same_v<T, bool>) {
          if (v == "true" || v == "1") *p = true;
          else if (v == "false" || v == "0") *p = false;
          else fail(ErrorCode::InvalidConfig, fmt::format("bad boolean '{}' for {}", v, name));
        } else if constexpr (std::is_same_v<T, HeadKind>) {
          if (v == "bit") *p = HeadKind::Bit;
          else if (v == "index") *p = HeadKind::Index;
          else fail(ErrorCode::InvalidConfig, fmt::format("head must be bit or index, got '{}'", v));
        } else {
          if (v == "constant") *p = LossWeight::Constant;
          else if (v == "inverse_t") *p = LossWeight::InverseT;
          else fail(ErrorCode::InvalidConfig, fmt::format("loss_weight must be constant or inverse_t, got '{}'", v));
        }
      },
      ref);
}

std::string render(const FieldRef& ref) {
  return std::visit(
      [](auto* p) -> std::string {
        using T = std::remove_pointer_t<decltype(p)>;
        if constexpr (std::is_same_v<T, bool>) return *p ? "true" : "false";
        else if constexpr (std::is_same_v<T, double>) return fmt::format("{}", *p);
        else if constexpr (std::is_same_v<T, HeadKind>) return *p == HeadKind::Bit ? "bit" : "index";
        else if constexpr (std::is_same_v<T, LossWeight>) return *p == LossWeight::Constant ? "constant" : "inverse_t";
        else return std::to_string(*p);
      },
      ref);
}

} // namespace

void BlockConfig::validate() const {
  if ((triangle_update || triangle_attention || seqstruct_attention) && !pair_bias_and_pair_transition)
    fail(ErrorCode::InvalidConfig, "triangle and seqstruct modules need the pair representation");
  const int dims[] = {d_model, heads, d_pair, d_pair_hidden, d_tri_update, d_tri_attn_head, heads_tri,
                      heads_pair_bias, transition_ratio, d_seqstruct, heads_seqstruct};
  for (int d : dims)
    if (d <= 0) fail(ErrorCode::InvalidConfig, "block dimensions must be positive");
  if (d_model % heads != 0 || d_model % heads_pair_bias != 0)
    fail(ErrorCode::InvalidConfig, "d_model must divide into heads");
  if (d_seqstruct % heads_seqstruct != 0) fail(ErrorCode::InvalidConfig, "d_seqstruct must divide into heads");
}

std::string ModelConfig::to_text() const {
  ModelConfig copy = *this;
  std::string out;
  std::string section;
  for (const Field& f : fields(copy)) {
    if (section != f.section) {
      if (!section.empty()) out += "\n";
      section = f.section;
      out += "[" + section + "]\n";
    }
    out += fmt::format("{} = {}\n", f.key, render(f.ref));
  }
  return out;
}

void ModelConfig::set(std::string_view section, std::string_view key, std::string_view value) {
  for (const Field& f : fields(*this)) {
    if (section == f.section && key == f.key) {
      assign(f.ref, value, fmt::format("{}.{}", section, key));
      return;
    }
  }
  fail(ErrorCode::InvalidConfig, fmt::format("unknown config key {}.{}", section, key));
}

ModelConfig ModelConfig::from_text(std::string_view text) {
  ModelConfig c;
  std::string section;
  std::istringstream in{std::string(text)};
  std::string raw;
  int line_no = 0;
  while (std::getline(in, raw)) {
    ++line_no;
    std::string_view line = raw;
    if (const auto hash = line.find('#'); hash != std::string_view::npos) line = line.substr(0, hash);
    line = trim(line);
    if (line.empty()) continue;
    if (line.front() == '[') {
      if (line.back() != ']') fail(ErrorCode::InvalidConfig, fmt::format("line {}: unterminated section", line_no));
      section = std::string(trim(line.substr(1, line.size() - 2)));
      continue;
    }
    const auto eq = line.find('=');
    if (eq == std::string_view::npos || section.empty())
      fail(ErrorCode::InvalidConfig, fmt::format("line {}: expected key = value inside a section", line_no));
    c.set(section, trim(line.substr(0, eq)), trim(line.substr(eq + 1)));
  }
  c.validate();
  return c;
}

ModelConfig ModelConfig::from_file(const std::string& path) {
  std::ifstream in(path);
  if (!in) fail(ErrorCode::Io, "cannot open config " + path);
  std::stringstream ss;
  ss << in.rdbuf();
  return from_text(ss.str());
}

void ModelConfig::apply_override(std::string_view assignment) {
  const auto eq = assignment.find('=');
  const auto dot = assignment.find('.');
  if (eq == std::string_view::npos || dot == std::string_view::npos || dot > eq)
    fail(ErrorCode::InvalidConfig, fmt::format("override '{}' is not section.key=value", assignment));
  set(trim(assignment.substr(0, dot)), trim(assignment.substr(dot + 1, eq - dot - 1)),
      trim(assignment.substr(eq + 1)));
}

void ModelConfig::validate() const {
  block.validate();
  if (tokenizer.bits < 1 || tokenizer.bits > 16) fail(ErrorCode::InvalidConfig, "tokenizer.bits outside [1, 16]");
  if (tokenizer.width % tokenizer.heads != 0) fail(ErrorCode::InvalidConfig, "tokenizer width must divide into heads");
  if (lm.diffusion_steps < 2) fail(ErrorCode::BadT, "lm.diffusion_steps must be at least 2");
  if (lm.blocks < 1) fail(ErrorCode::InvalidConfig, "lm.blocks must be positive");
  if (resdiff.steps < 2) fail(ErrorCode::InvalidConfig, "resdiff.steps must be at least 2");
  if (!(resdiff.beta_start > 0 && resdiff.beta_end < 1 && resdiff.beta_start <= resdiff.beta_end))
    fail(ErrorCode::InvalidConfig, "resdiff beta range must lie in (0, 1)");
  if (fm.n_steps < 1) fail(ErrorCode::InvalidConfig, "fm.n_steps must be positive");
  if (multimer.linker_len < 0 || multimer.pos_offset < 0)
    fail(ErrorCode::InvalidConfig, "multimer linker and offset must be non-negative");
  if (train.batch < 1 || train.steps < 0) fail(ErrorCode::InvalidConfig, "train.batch/steps invalid");
}

} // namespace bitfold
