#ifndef BITFOLD_CHECKPOINT_HPP_
#define BITFOLD_CHECKPOINT_HPP_

#include <cstdint>
#include <string>
#include <string_view>

#include "bitfold/config.hpp"
#include "bitfold/graph.hpp"

namespace bitfold {

inline constexpr std::uint32_t kCheckpointVersion = 1;

// Little-endian binary: "BFCK", u32 version, u32 config length, config text,
// u32 record count, records {u32 name length, name, u32 rank, u32 dims[rank],
// f64 payload}, i64 step, u32 rng state length, rng state text.
struct Checkpoint {
  ModelConfig config;
  ParameterSet params;
  std::int64_t step = 0;
  std::string rng_state;

  friend bool operator==(const Checkpoint& a, const Checkpoint& b) {
    return a.config == b.config && a.params == b.params && a.step == b.step && a.rng_state == b.rng_state;
  }
};

std::string encode_checkpoint(const Checkpoint& ckpt);
/// Raises Io on truncation, bad magic or an unknown version, and
/// InvalidConfig when the config echo does not parse back to itself.
Checkpoint decode_checkpoint(std::string_view bytes);

void save_checkpoint(const std::string& path, const Checkpoint& ckpt);
Checkpoint load_checkpoint(const std::string& path);
/// As above, and raises InvalidConfig unless the echo equals `expected`.
Checkpoint load_checkpoint(const std::string& path, const ModelConfig& expected);

} // namespace bitfold

#endif
