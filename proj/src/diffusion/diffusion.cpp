#include "bitfold/diffusion.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>

#include "bitfold/alphabet.hpp"
#include "bitfold/error.hpp"

namespace bitfold::dlm {

double NoiseSchedule::unmask_probability(int from, int to) const {
  const double denom = 1.0 - alpha_bar.at(from);
  if (denom <= 0.0) return 1.0;
  return (alpha_bar.at(to) - alpha_bar.at(from)) / denom;
}

NoiseSchedule make_schedule(int T, LossWeight weight) {
  if (T < 2) fail(ErrorCode::BadT, "diffusion needs T >= 2, got " + std::to_string(T));
  NoiseSchedule s;
  s.T = T;
  s.alpha_bar.resize(T + 1);
  s.beta.assign(T + 1, 1.0);
  s.lambda_w.assign(T + 1, 1.0);
  for (int t = 0; t <= T; ++t) s.alpha_bar[t] = 1.0 - static_cast<double>(t) / T;
  for (int t = 1; t <= T; ++t) {
    s.beta[t] = s.alpha_bar[t] / s.alpha_bar[t - 1];
    if (weight == LossWeight::InverseT) s.lambda_w[t] = 1.0 / t;
  }
  return s;
}

// ----------------------------------------------------------------- TokenState

TokenState TokenState::observed(std::vector<int> seq, std::vector<int> structure, int bits,
                                std::vector<int> positions) {
  TokenState s;
  s.bits = bits;
  s.seq = std::move(seq);
  s.structure = std::move(structure);
  if (positions.empty()) {
    positions.resize(s.seq.size());
    std::iota(positions.begin(), positions.end(), 0);
  }
  s.positions = std::move(positions);
  s.validate();
  return s;
}

bool TokenState::seq_masked(int i) const { return seq[i] == kAaMask; }
bool TokenState::struct_masked(int i) const { return structure[i] == (1 << bits); }
bool TokenState::seq_pad(int i) const { return seq[i] == kAaPad; }
bool TokenState::struct_pad(int i) const { return structure[i] == (1 << bits) + 1; }

std::vector<bool> TokenState::mask_seq() const {
  std::vector<bool> m(seq.size());
  for (int i = 0; i < length(); ++i) m[i] = seq_masked(i);
  return m;
}

std::vector<bool> TokenState::mask_struct() const {
  std::vector<bool> m(structure.size());
  for (int i = 0; i < length(); ++i) m[i] = struct_masked(i);
  return m;
}

int TokenState::masked_count() const {
  int n = 0;
  for (int i = 0; i < length(); ++i) n += seq_masked(i) + struct_open(i);
  return n;
}

Tensor TokenState::struct_bits() const {
  Tensor b(Shape{length(), bits});
  for (int i = 0; i < length(); ++i) {
    const int t = structure[i];
    if (t < 0 || t >= (1 << bits)) continue;
    for (int k = 0; k < bits; ++k) b.at(i, k) = (t >> k) & 1 ? 1.0 : -1.0;
  }
  return b;
}

void TokenState::validate() const {
  const std::size_t l = seq.size();
  if (structure.size() != l || positions.size() != l || (!struct_known.empty() && struct_known.size() != l))
    fail(ErrorCode::LengthMismatch, "token state tracks differ in length");
  if (bits < 1 || bits > 16) fail(ErrorCode::InvalidConfig, "bits outside [1, 16]");
  for (int s : seq)
    if (s < 0 || s >= kAaVocab) fail(ErrorCode::IndexOutOfRange, "sequence token " + std::to_string(s));
  for (int t : structure)
    if (t < 0 || t > (1 << bits) + 1) fail(ErrorCode::IndexOutOfRange, "structure token " + std::to_string(t));
}

// ------------------------------------------------------------------ corruption

namespace {

TokenState corrupt(const TokenState& x, double keep, Conditioning cond, Rng& rng) {
  TokenState out = x;
  const int mask = 1 << x.bits;
  for (int i = 0; i < x.length(); ++i) {
    if (cond != Conditioning::Folding && !x.seq_pad(i) && !x.seq_masked(i) && rng.bernoulli(1.0 - keep))
      out.seq[i] = kAaMask;
    if (!x.has_structure(i)) {
      out.structure[i] = mask;
    } else if (cond != Conditioning::InverseFolding && !x.struct_pad(i) && !x.struct_masked(i) &&
               rng.bernoulli(1.0 - keep)) {
      out.structure[i] = mask;
    }
  }
  return out;
}

void check_t(int t, const NoiseSchedule& s) {
  if (t < 1 || t > s.T) fail(ErrorCode::BadT, "t = " + std::to_string(t) + " outside [1, " + std::to_string(s.T) + "]");
}

} // namespace

TokenState forward_mask(const TokenState& x0, int t, const NoiseSchedule& schedule, Conditioning cond, Rng& rng) {
  check_t(t, schedule);
  return corrupt(x0, schedule.alpha_bar[t], cond, rng);
}

TokenState forward_step(const TokenState& x_prev, int t, const NoiseSchedule& schedule, Conditioning cond, Rng& rng) {
  check_t(t, schedule);
  return corrupt(x_prev, schedule.beta[t], cond, rng);
}

Conditioning sample_training_mode(Rng& rng, bool folding_sft) {
  if (folding_sft) return Conditioning::Folding;
  const double u = rng.uniform();
  if (u < 0.5) return Conditioning::None;
  return u < 0.75 ? Conditioning::InverseFolding : Conditioning::Folding;
}

// ---------------------------------------------------------------------- losses

namespace {

// Cross-entropy over masked sequence rows, weighted to a mean; 0 when none.
Var sequence_term(const geo::LMOutput& out, const TokenState& x0, const TokenState& xt) {
  const int l = xt.length();
  std::vector<int> targets(l, 0);
  std::vector<double> weights(l, 0.0);
  int n = 0;
  for (int i = 0; i < l; ++i)
    if (xt.seq_masked(i) && x0.seq[i] < kNumAminoAcids) {
      targets[i] = x0.seq[i];
      weights[i] = 1.0;
      ++n;
    }
  if (n > 0)
    for (double& w : weights) w /= n;
  return cross_entropy(out.seq_logits, targets, weights);
}

struct StructTargets {
  std::vector<int> rows;  // positions scored
};

StructTargets struct_rows(const TokenState& x0, const TokenState& xt) {
  StructTargets s;
  const int v = 1 << x0.bits;
  for (int i = 0; i < xt.length(); ++i)
    if (xt.struct_masked(i) && x0.has_structure(i) && x0.structure[i] >= 0 && x0.structure[i] < v) s.rows.push_back(i);
  return s;
}

void check_states(const geo::LMOutput& out, const TokenState& x0, const TokenState& xt) {
  if (x0.length() != xt.length() || out.seq_logits.dim(0) != xt.length())
    fail(ErrorCode::LengthMismatch, "loss inputs differ in length");
  if (x0.bits != out.bits || xt.bits != out.bits) fail(ErrorCode::HeadMismatch, "token width differs from the head");
}

} // namespace

Var loss_index(const geo::LMOutput& out, const TokenState& x0, const TokenState& xt, int t,
               const NoiseSchedule& schedule) {
  if (out.head != HeadKind::Index) fail(ErrorCode::HeadMismatch, "loss_index needs the index head");
  check_states(out, x0, xt);
  check_t(t, schedule);
  const int l = xt.length();
  const StructTargets st = struct_rows(x0, xt);
  std::vector<int> targets(l, 0);
  std::vector<double> weights(l, 0.0);
  for (int i : st.rows) {
    targets[i] = x0.structure[i];
    weights[i] = 1.0 / static_cast<double>(st.rows.size());
  }
  Var total = sequence_term(out, x0, xt) + cross_entropy(out.struct_logits, targets, weights);
  return scale(total, schedule.lambda_w[t]);
}

Var loss_bit(const geo::LMOutput& out, const TokenState& x0, const TokenState& xt, int t,
             const NoiseSchedule& schedule) {
  if (out.head != HeadKind::Bit) fail(ErrorCode::HeadMismatch, "loss_bit needs the bit head");
  check_states(out, x0, xt);
  check_t(t, schedule);
  const int l = xt.length();
  const int k = out.bits;
  const StructTargets st = struct_rows(x0, xt);
  std::vector<int> targets(static_cast<std::size_t>(l) * k, 0);
  std::vector<double> weights(targets.size(), 0.0);
  for (int i : st.rows)
    for (int b = 0; b < k; ++b) {
      targets[static_cast<std::size_t>(i) * k + b] = (x0.structure[i] >> b) & 1;
      weights[static_cast<std::size_t>(i) * k + b] = 1.0 / static_cast<double>(st.rows.size());
    }
  Var bit_ce = cross_entropy(reshape(out.struct_logits, {l * k, 2}), targets, weights);
  return scale(sequence_term(out, x0, xt) + bit_ce, schedule.lambda_w[t]);
}

Var diffusion_loss(const geo::LMOutput& out, const TokenState& x0, const TokenState& xt, int t,
                   const NoiseSchedule& schedule) {
  return out.head == HeadKind::Index ? loss_index(out, x0, xt, t, schedule) : loss_bit(out, x0, xt, t, schedule);
}

// ------------------------------------------------------------------- posterior

TokenState posterior_step(const TokenState& xt, const TokenState& x0_pred, int t, const NoiseSchedule& schedule,
                          Rng& rng, int t_prev) {
  check_t(t, schedule);
  if (t_prev < 0) t_prev = t - 1;
  if (t_prev >= t) fail(ErrorCode::TimeOrder, "posterior target must precede t");
  if (x0_pred.length() != xt.length()) fail(ErrorCode::LengthMismatch, "prediction length differs");
  const double u = schedule.unmask_probability(t, t_prev);
  TokenState out = xt;
  for (int i = 0; i < xt.length(); ++i) {
    if (xt.seq_masked(i) && rng.bernoulli(u)) out.seq[i] = x0_pred.seq[i];
    if (xt.struct_open(i) && rng.bernoulli(u)) out.structure[i] = x0_pred.structure[i];
  }
  return out;
}

double posterior_transition_probability(const TokenState& xt, const TokenState& x0_pred, const TokenState& x_prev,
                                        int t, const NoiseSchedule& schedule, int t_prev) {
  if (t_prev < 0) t_prev = t - 1;
  const double u = schedule.unmask_probability(t, t_prev);
  const int mask_a = kAaMask, mask_s = 1 << xt.bits;
  auto factor = [&](bool masked, int now, int pred, int prev, int mask) {
    if (!masked) return prev == now ? 1.0 : 0.0;
    if (prev == mask) return 1.0 - u;
    return prev == pred ? u : 0.0;
  };
  double p = 1.0;
  for (int i = 0; i < xt.length(); ++i) {
    p *= factor(xt.seq_masked(i), xt.seq[i], x0_pred.seq[i], x_prev.seq[i], mask_a);
    p *= factor(xt.struct_open(i), xt.structure[i], x0_pred.structure[i], x_prev.structure[i], mask_s);
  }
  return p;
}

// ------------------------------------------------------------------ generation

namespace {

// Samples from softmax(logits / temperature); temperature 0 is argmax with the
// lowest index winning ties. Returns (choice, probability under softmax(logits / max(T, 1e-12))).
std::pair<int, double> sample_categorical(const double* logits, int n, double temperature, Rng& rng) {
  std::vector<double> p(n);
  const double temp = temperature > 0 ? temperature : 1.0;
  double mx = logits[0];
  for (int c = 1; c < n; ++c) mx = std::max(mx, logits[c]);
  double z = 0.0;
  for (int c = 0; c < n; ++c) z += p[c] = std::exp((logits[c] - mx) / temp);
  for (double& v : p) v /= z;
  int choice = 0;
  if (temperature <= 0) {
    choice = static_cast<int>(std::max_element(p.begin(), p.end()) - p.begin());
  } else {
    double u = rng.uniform();
    choice = n - 1;
    for (int c = 0; c < n; ++c) {
      if (u < p[c]) {
        choice = c;
        break;
      }
      u -= p[c];
    }
  }
  return {choice, p[choice]};
}

} // namespace

Proposal propose(const geo::LanguageModel& model, const TokenState& xt, double temperature, Rng& rng) {
  Graph g(false);
  const geo::LMOutput out = geo::forward(g, model, xt.input());
  const int l = xt.length();
  const int k = model.bits;
  Proposal p;
  p.x0 = xt;
  p.seq_conf.assign(l, 1.0);
  p.struct_conf.assign(l, 1.0);
  const Tensor& sl = out.seq_logits.value();
  const Tensor& tl = out.struct_logits.value();
  for (int i = 0; i < l; ++i) {
    if (xt.seq_masked(i)) {
      auto [c, pr] = sample_categorical(sl.data() + static_cast<std::size_t>(i) * kNumAminoAcids, kNumAminoAcids,
                                        temperature, rng);
      p.x0.seq[i] = c;
      p.seq_conf[i] = pr;
    }
    if (!xt.struct_open(i)) continue;
    if (out.head == HeadKind::Index) {
      auto [c, pr] = sample_categorical(tl.data() + static_cast<std::size_t>(i) * (1 << k), 1 << k, temperature, rng);
      p.x0.structure[i] = c;
      p.struct_conf[i] = pr;
    } else {
      int index = 0;
      double conf = 1.0;
      for (int b = 0; b < k; ++b) {
        auto [c, pr] = sample_categorical(tl.data() + (static_cast<std::size_t>(i) * k + b) * 2, 2, temperature, rng);
        index |= c << b;
        conf *= pr;
      }
      p.x0.structure[i] = index;
      p.struct_conf[i] = conf;
    }
  }
  for (const Var& h : out.hidden) p.hidden.push_back(h.value());
  return p;
}

std::vector<int> time_grid(int T, int steps) {
  if (steps < 1 || steps > T) fail(ErrorCode::BadT, "steps must lie in [1, T]");
  std::vector<int> grid(steps + 1);
  for (int k = 0; k <= steps; ++k) grid[steps - k] = static_cast<int>((static_cast<long long>(k) * T) / steps);
  return grid;
}

Generation generate(const geo::LanguageModel& model, const GenerateOptions& opts, Rng& rng) {
  const NoiseSchedule schedule = make_schedule(model.lm.diffusion_steps, model.lm.weight);
  int l = opts.length;
  if (opts.mode == Conditioning::Folding) {
    if (opts.seq.empty()) fail(ErrorCode::ModeInputMissing, "folding needs a sequence");
    if (l == 0) l = static_cast<int>(opts.seq.size());
    if (static_cast<int>(opts.seq.size()) != l) fail(ErrorCode::LengthMismatch, "sequence length differs from L");
  }
  if (opts.mode == Conditioning::InverseFolding) {
    if (opts.structure.empty()) fail(ErrorCode::ModeInputMissing, "inverse folding needs structure tokens");
    if (l == 0) l = static_cast<int>(opts.structure.size());
    if (static_cast<int>(opts.structure.size()) != l) fail(ErrorCode::LengthMismatch, "structure length differs from L");
  }
  if (l < 1) fail(ErrorCode::SpecInvalid, "generation length must be positive");
  const std::vector<int> grid = time_grid(schedule.T, opts.steps);

  TokenState x;
  x.bits = model.bits;
  x.seq = opts.mode == Conditioning::Folding ? opts.seq : std::vector<int>(l, kAaMask);
  x.structure = opts.mode == Conditioning::InverseFolding ? opts.structure : std::vector<int>(l, 1 << model.bits);
  x.positions = opts.positions;
  if (x.positions.empty()) {
    x.positions.resize(l);
    std::iota(x.positions.begin(), x.positions.end(), 0);
  }
  x.struct_known = opts.struct_known;
  x.validate();

  Generation gen;
  const int free_total = x.masked_count();
  for (std::size_t step = 0; step + 1 < grid.size() && x.masked_count() > 0; ++step) {
    const int t = grid[step], t_prev = grid[step + 1];
    Proposal p = propose(model, x, opts.temperature, rng);
    ++gen.model_calls;
    gen.hidden = std::move(p.hidden);
    if (opts.strategy == Strategy::Stochastic) {
      x = posterior_step(x, p.x0, t, schedule, rng, t_prev);
      continue;
    }
    const int target = t_prev == 0 ? 0 : static_cast<int>(std::lround(free_total * (1.0 - schedule.alpha_bar[t_prev])));
    const int reveal = std::max(0, x.masked_count() - target);
    struct Candidate {
      double conf;
      int pos;
      int track;
    };
    std::vector<Candidate> cands;
    for (int i = 0; i < l; ++i) {
      if (x.seq_masked(i)) cands.push_back({p.seq_conf[i], i, 0});
      if (x.struct_open(i)) cands.push_back({p.struct_conf[i], i, 1});
    }
    std::sort(cands.begin(), cands.end(), [](const Candidate& a, const Candidate& b) {
      if (a.conf != b.conf) return a.conf > b.conf;
      if (a.pos != b.pos) return a.pos < b.pos;
      return a.track < b.track;
    });
    for (int c = 0; c < reveal && c < static_cast<int>(cands.size()); ++c) {
      const Candidate& cd = cands[c];
      if (cd.track == 0)
        x.seq[cd.pos] = p.x0.seq[cd.pos];
      else
        x.structure[cd.pos] = p.x0.structure[cd.pos];
    }
  }
  gen.state = std::move(x);
  return gen;
}

} // namespace bitfold::dlm
