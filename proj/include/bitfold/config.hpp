#ifndef BITFOLD_CONFIG_HPP_
#define BITFOLD_CONFIG_HPP_

#include <cstdint>
#include <string>
#include <string_view>

namespace bitfold {

struct TokenizerConfig {
  int bits = 8;
  int width = 64;
  int enc_blocks = 3;
  int dec_blocks = 3;
  int heads = 4;
  int rel_clip = 32;
  double commit_weight = 0.25;
  double entropy_weight = 0.1;
  double quant_mix = 0.5;  // probability a decoder training pass sees quantized tokens
};

struct BlockConfig {
  bool pair_bias_and_pair_transition = false;
  bool struct_transition = false;
  bool triangle_update = false;
  bool triangle_attention = false;
  bool seqstruct_attention = false;
  int d_model = 64;
  int heads = 4;
  int d_pair = 16;
  int d_pair_hidden = 32;
  int d_tri_update = 16;
  int d_tri_attn_head = 8;
  int heads_tri = 4;
  int heads_pair_bias = 4;
  int transition_ratio = 4;
  int d_seqstruct = 64;
  int heads_seqstruct = 4;

  bool has_pair() const { return pair_bias_and_pair_transition; }
  bool any_geo() const {
    return pair_bias_and_pair_transition || struct_transition || triangle_update || triangle_attention ||
           seqstruct_attention;
  }
  void validate() const;
};

enum class HeadKind { Index, Bit };
enum class LossWeight { Constant, InverseT };

struct LmConfig {
  int blocks = 4;
  HeadKind head = HeadKind::Bit;
  int diffusion_steps = 100;
  LossWeight weight = LossWeight::Constant;
  bool folding_sft = false;
  int rel_clip = 32;
};

struct RepaConfig {
  bool enabled = false;
  double weight = 0.5;
  int hidden = 64;
};

struct ResDiffConfig {
  bool enabled = false;
  int steps = 100;
  double beta_start = 1e-4;
  double beta_end = 0.02;
  int hidden = 128;
  int layers = 4;
};

struct FmConfig {
  bool enabled = false;
  int n_steps = 10;
  double sigma = 10.0;
};

struct MultimerConfig {
  int linker_len = 25;
  int pos_offset = 25;
};

struct TrainConfig {
  double lr_peak = 1e-4;
  int warmup = 2000;
  double lr_final = 1e-5;
  int steps = 1000;
  int batch = 8;
  std::uint64_t seed = 0;
};

struct ModelConfig {
  TokenizerConfig tokenizer;
  BlockConfig block;
  LmConfig lm;
  RepaConfig repa;
  ResDiffConfig resdiff;
  FmConfig fm;
  MultimerConfig multimer;
  TrainConfig train;

  /// Canonical text form: every key, fixed order. Used as the checkpoint echo.
  std::string to_text() const;
  /// Parses `[section]` / `key = value` text; unknown keys raise InvalidConfig.
  static ModelConfig from_text(std::string_view text);
  static ModelConfig from_file(const std::string& path);
  /// `section.key=value`.
  void apply_override(std::string_view assignment);
  void set(std::string_view section, std::string_view key, std::string_view value);
  void validate() const;

  friend bool operator==(const ModelConfig& a, const ModelConfig& b) { return a.to_text() == b.to_text(); }
};

} // namespace bitfold

#endif
