#include "bitfold/fm.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>

#include "bitfold/alphabet.hpp"
#include "bitfold/error.hpp"

namespace bitfold::fm {

using geom::BackboneStructure;

BackboneStructure center_ca(const BackboneStructure& s) {
  if (s.length() == 0) return s;
  const geom::Vec3 c = s.ca().colwise().mean().transpose();
  BackboneStructure out = s;
  for (geom::Residue& r : out.residues) r.atoms.rowwise() -= c.transpose();
  return out;
}

BackboneStructure prior_draw(const std::vector<int>& chain_ids, double sigma, Rng& rng) {
  BackboneStructure s;
  s.residues.resize(chain_ids.size());
  for (std::size_t i = 0; i < chain_ids.size(); ++i) {
    s.residues[i].chain_id = chain_ids[i];
    for (int a = 0; a < geom::kAtomsPerResidue; ++a)
      for (int k = 0; k < 3; ++k) s.residues[i].atoms(a, k) = rng.normal(0.0, sigma);
  }
  return center_ca(s);
}

FlowState corrupt(const BackboneStructure& x1, double t, double sigma, Rng& rng) {
  if (!(t >= 0.0 && t <= 1.0)) fail(ErrorCode::BadT, "flow time " + std::to_string(t) + " outside [0, 1]");
  const BackboneStructure target = center_ca(x1);
  const BackboneStructure noise = prior_draw(x1.chain_ids(), sigma, rng);
  FlowState st;
  st.t = t;
  st.x = target;
  for (int i = 0; i < target.length(); ++i)
    st.x.residues[i].atoms = t * target.residues[i].atoms + (1.0 - t) * noise.residues[i].atoms;
  return st;
}

FlowState euler_step(const FlowState& xt, const BackboneStructure& x_hat, double s) {
  if (s < xt.t) fail(ErrorCode::TimeOrder, "Euler step from t = " + std::to_string(xt.t) + " back to " + std::to_string(s));
  if (s > 1.0) fail(ErrorCode::BadT, "flow time beyond 1");
  if (x_hat.length() != xt.x.length()) fail(ErrorCode::LengthMismatch, "denoised structure length differs");
  if (s == xt.t) return xt;
  const geom::AlignmentResult a = geom::kabsch(x_hat.ca(), xt.x.ca());
  const BackboneStructure aligned = geom::transformed(x_hat, a.rotation, a.translation);
  const double wa = (s - xt.t) / (1.0 - xt.t), wx = (1.0 - s) / (1.0 - xt.t);
  FlowState out = xt;
  out.t = s;
  for (int i = 0; i < xt.x.length(); ++i)
    out.x.residues[i].atoms = wa * aligned.residues[i].atoms + wx * xt.x.residues[i].atoms;
  return out;
}

dlm::TokenState noisy_state(const tok::Tokenizer& tk, const BackboneStructure& x, const std::vector<int>& seq,
                            int pos_offset, int bits) {
  if (tk.bits() != bits) fail(ErrorCode::HeadMismatch, "tokenizer and language model disagree on bits");
  const int l = x.length();
  if (!seq.empty() && static_cast<int>(seq.size()) != l)
    fail(ErrorCode::LengthMismatch, "conditioning sequence length differs from the structure");
  std::vector<int> s = seq.empty() ? std::vector<int>(l, kAaMask) : seq;
  return dlm::TokenState::observed(std::move(s), tok::bits_to_index(tok::quantize(tok::encode(tk, x))), bits,
                                   tok::chain_positions(x.chain_ids(), pos_offset));
}

std::vector<int> predict_tokens(const geo::LanguageModel& lm, const dlm::TokenState& state) {
  Graph g(false);
  const geo::LMOutput out = geo::forward(g, lm, state.input());
  const Tensor& logits = out.struct_logits.value();
  const int l = state.length();
  std::vector<int> tokens(l, 0);
  if (out.head == HeadKind::Bit) {
    for (int i = 0; i < l; ++i)
      for (int b = 0; b < out.bits; ++b)
        if (logits.at(i, b, 1) > logits.at(i, b, 0)) tokens[i] |= 1 << b;
  } else {
    const int v = logits.cols();
    for (int i = 0; i < l; ++i) {
      const double* row = logits.data() + static_cast<std::size_t>(i) * v;
      tokens[i] = static_cast<int>(std::max_element(row, row + v) - row);
    }
  }
  return tokens;
}

BackboneStructure denoise(const FlowState& x, const Models& models, Rng& rng) {
  if (!models.tokenizer || !models.lm) fail(ErrorCode::InvalidConfig, "denoiser needs a tokenizer and a model");
  const int bits = models.lm->bits;
  dlm::TokenState state = noisy_state(*models.tokenizer, x.x, x.seq, models.pos_offset, bits);
  state.structure = predict_tokens(*models.lm, state);
  Tensor z = tok::index_to_bits(state.structure, bits);
  if (models.resdiff) z = resdiff::refine(*models.resdiff, z, resdiff::lm_hidden(*models.lm, state), rng);
  const std::vector<int> chains = x.x.chain_ids();
  return center_ca(tok::decode(*models.tokenizer, z, state.positions, chains));
}

Denoiser composed_denoiser(const Models& models) {
  return [models](const FlowState& x, Rng& rng) { return denoise(x, models, rng); };
}

FmResult fm_generate(const Denoiser& denoiser, const std::vector<int>& chain_ids, const std::vector<int>& seq,
                     int n_steps, double sigma, Rng& rng) {
  if (n_steps < 1) fail(ErrorCode::InvalidConfig, "flow sampling needs at least one step");
  FlowState x;
  x.x = prior_draw(chain_ids, sigma, rng);
  x.seq = seq;
  FmResult res;
  for (int k = 0; k < n_steps; ++k) {
    const BackboneStructure x_hat = denoiser(x, rng);
    ++res.denoiser_calls;
    x = euler_step(x, x_hat, static_cast<double>(k + 1) / n_steps);
  }
  res.structure = x.x;
  return res;
}

Var fm_bit_loss(const geo::LMOutput& out, const std::vector<int>& clean_tokens, const std::vector<bool>& struct_known) {
  if (out.head != HeadKind::Bit) fail(ErrorCode::HeadMismatch, "flow fine-tuning needs the bit head");
  const int l = out.struct_logits.dim(0), k = out.bits;
  if (static_cast<int>(clean_tokens.size()) != l) fail(ErrorCode::LengthMismatch, "clean token count differs");
  int rows = 0;
  for (int i = 0; i < l; ++i) rows += struct_known.empty() || struct_known[i];
  std::vector<int> targets(static_cast<std::size_t>(l) * k, 0);
  std::vector<double> weights(targets.size(), 0.0);
  for (int i = 0; i < l; ++i) {
    if (!(struct_known.empty() || struct_known[i])) continue;
    for (int b = 0; b < k; ++b) {
      targets[static_cast<std::size_t>(i) * k + b] = (clean_tokens[i] >> b) & 1;
      weights[static_cast<std::size_t>(i) * k + b] = 1.0 / rows;
    }
  }
  return cross_entropy(reshape(out.struct_logits, {l * k, 2}), targets, weights);
}

void fm_finetune(dlm::LmTrainer& tr, const tok::Tokenizer& tk, const std::vector<FmExample>& data,
                 const FinetuneOptions& opts) {
  if (tr.model.lm.head != HeadKind::Bit) fail(ErrorCode::HeadMismatch, "flow fine-tuning needs the bit head");
  if (opts.steps <= 0) return;
  if (data.empty()) fail(ErrorCode::SpecInvalid, "flow fine-tuning needs data");
  std::vector<std::vector<int>> clean;
  for (const FmExample& ex : data) clean.push_back(tok::bits_to_index(tok::quantize(tok::encode(tk, ex.structure))));
  const int batch = std::max(1, opts.batch);
  std::vector<int> order(data.size());
  std::iota(order.begin(), order.end(), 0);
  std::size_t cursor = order.size();
  for (int s = 0; s < opts.steps; ++s) {
    Gradients total;
    double loss_sum = 0.0;
    for (int b = 0; b < batch; ++b) {
      if (cursor == order.size()) {
        std::shuffle(order.begin(), order.end(), tr.rng.engine());
        cursor = 0;
      }
      const int idx = order[cursor++];
      const FlowState xt = corrupt(data[idx].structure, tr.rng.uniform(), opts.sigma, tr.rng);
      const dlm::TokenState state = noisy_state(tk, xt.x, data[idx].seq, opts.pos_offset, tr.model.bits);
      Graph g;
      Var loss = fm_bit_loss(geo::forward(g, tr.model, state.input()), clean[idx]);
      const double v = loss.value().item();
      if (!std::isfinite(v)) fail(ErrorCode::NonFiniteLoss, "flow fine-tuning loss is " + std::to_string(v));
      loss_sum += v;
      Gradients grads = g.backward(loss, tr.model.params);
      if (b == 0)
        total = std::move(grads);
      else
        accumulate_gradients(total, grads);
    }
    scale_gradients(total, 1.0 / batch);
    tr.adam.step(tr.model.params, total, opts.lr.at(tr.step));
    ++tr.step;
    tr.losses.push_back(loss_sum / batch);
    if (opts.on_step) opts.on_step(tr.step, tr.losses.back());
  }
}

} // namespace bitfold::fm
