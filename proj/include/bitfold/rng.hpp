#ifndef BITFOLD_RNG_HPP_
#define BITFOLD_RNG_HPP_

#include <cstdint>
#include <random>
#include <sstream>
#include <string>

namespace bitfold {

/// The single source of randomness. Every stochastic routine takes one by
/// reference so callers control the stream.
class Rng {
public:
  explicit Rng(std::uint64_t seed = 0) : gen_(seed) {}

  double uniform() { return std::uniform_real_distribution<double>(0.0, 1.0)(gen_); }
  double uniform(double lo, double hi) { return std::uniform_real_distribution<double>(lo, hi)(gen_); }
  double normal(double mean = 0.0, double stddev = 1.0) {
    return std::normal_distribution<double>(mean, stddev)(gen_);
  }
  /// Uniform integer in [lo, hi].
  int uniform_int(int lo, int hi) { return std::uniform_int_distribution<int>(lo, hi)(gen_); }
  bool bernoulli(double p) { return uniform() < p; }
  std::uint64_t next_u64() { return gen_(); }
  /// Independent child stream; advances this stream by one draw.
  Rng split() { return Rng(gen_() ^ 0x5851f42d4c957f2dULL); }

  std::mt19937_64& engine() { return gen_; }

  std::string state() const {
    std::ostringstream os;
    os << gen_;
    return os.str();
  }
  void set_state(const std::string& s) {
    std::istringstream is(s);
    is >> gen_;
  }

private:
  std::mt19937_64 gen_;
};

} // namespace bitfold

#endif
