#include "bitfold/tokenizer.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>
#include <sstream>

#include <fmt/format.h>

#include "bitfold/nn.hpp"
#include "bitfold/rng.hpp"

namespace bitfold::tok {

using geom::BackboneStructure;
using geom::Vec3;

// ------------------------------------------------------------- features

Tensor residue_features(const BackboneStructure& s) {
  const int n = s.length();
  Tensor f(Shape{n, kFeatureDim});
  auto atom = [&](int i, int a) -> Vec3 { return s.residues[i].atoms.row(a).transpose(); };
  auto same_chain = [&](int i, int j) {
    return j >= 0 && j < n && s.residues[i].chain_id == s.residues[j].chain_id;
  };
  for (int i = 0; i < n; ++i) {
    int c = 0;
    for (int o : {-4, -3, -2, -1, 1, 2, 3, 4}) {
      const int j = i + o;
      if (same_chain(i, j)) {
        f.at(i, c) = (atom(i, geom::kCA) - atom(j, geom::kCA)).norm() / kCoordScale;
        f.at(i, c + 8) = 1.0;
      }
      ++c;
    }
    c = 16;
    auto torsion = [&](bool present, const Vec3& a, const Vec3& b, const Vec3& cc, const Vec3& d) {
      if (present) {
        const double t = geom::dihedral(a, b, cc, d);
        f.at(i, c) = std::sin(t);
        f.at(i, c + 1) = std::cos(t);
        f.at(i, 22 + (c - 16) / 2) = 1.0;
      }
      c += 2;
    };
    const bool prev = same_chain(i, i - 1), next = same_chain(i, i + 1);
    torsion(prev, prev ? atom(i - 1, geom::kC) : Vec3::Zero(), atom(i, geom::kN), atom(i, geom::kCA),
            atom(i, geom::kC));
    torsion(next, atom(i, geom::kN), atom(i, geom::kCA), atom(i, geom::kC),
            next ? atom(i + 1, geom::kN) : Vec3::Zero());
    torsion(next, atom(i, geom::kCA), atom(i, geom::kC), next ? atom(i + 1, geom::kN) : Vec3::Zero(),
            next ? atom(i + 1, geom::kCA) : Vec3::Zero());
    // Local frame: x along CA->C, y in the N-CA-C plane.
    const Vec3 ca = atom(i, geom::kCA);
    const Vec3 ex = (atom(i, geom::kC) - ca).normalized();
    Vec3 ey = atom(i, geom::kN) - ca;
    ey = (ey - ey.dot(ex) * ex).normalized();
    const Vec3 ez = ex.cross(ey);
    c = 25;
    for (int a : {geom::kN, geom::kC, geom::kO}) {
      const Vec3 d = atom(i, a) - ca;
      f.at(i, c++) = d.dot(ex);
      f.at(i, c++) = d.dot(ey);
      f.at(i, c++) = d.dot(ez);
    }
  }
  return f;
}

std::vector<int> chain_positions(const std::vector<int>& chain_ids, int pos_offset) {
  std::vector<int> pos(chain_ids.size());
  int chain_index = 0;
  for (std::size_t i = 0; i < chain_ids.size(); ++i) {
    if (i > 0 && chain_ids[i] != chain_ids[i - 1]) ++chain_index;
    pos[i] = static_cast<int>(i) + chain_index * pos_offset;
  }
  return pos;
}

// ---------------------------------------------------------------- model

Tokenizer Tokenizer::create(const TokenizerConfig& cfg, std::uint64_t seed) {
  Tokenizer tk;
  tk.cfg = cfg;
  ParameterSet& ps = tk.params;
  const int w = cfg.width;
  nn::add_linear(ps, "enc.in", kFeatureDim, w, seed);
  for (int b = 0; b < cfg.enc_blocks; ++b) {
    const std::string p = "enc.block" + std::to_string(b);
    nn::add_layernorm(ps, p + ".ln", w);
    nn::add_mlp(ps, p + ".mlp", w, 2 * w, w, 2, seed);
  }
  nn::add_layernorm(ps, "enc.ln", w);
  nn::add_linear(ps, "enc.out", w, cfg.bits, seed);

  nn::add_linear(ps, "dec.in", cfg.bits, w, seed);
  for (int b = 0; b < cfg.dec_blocks; ++b) {
    const std::string p = "dec.block" + std::to_string(b);
    nn::add_layernorm(ps, p + ".ln1", w);
    nn::add_linear(ps, p + ".qkv", w, 3 * w, seed, nn::Init::Default, false);
    nn::add_linear(ps, p + ".o", w, w, seed);
    nn::add_embedding(ps, p + ".rel", 2 * cfg.rel_clip + 1, cfg.heads, seed, 0.1);
    nn::add_layernorm(ps, p + ".ln2", w);
    nn::add_mlp(ps, p + ".mlp", w, 2 * w, w, 2, seed);
  }
  nn::add_layernorm(ps, "dec.ln", w);
  nn::add_linear(ps, "dec.out", w, 18, seed);
  return tk;
}

EncoderOutput encode(Graph& g, const Tokenizer& tk, const Tensor& features) {
  const ParameterSet& ps = tk.params;
  Var h = nn::linear(g, ps, "enc.in", g.constant(features));
  for (int b = 0; b < tk.cfg.enc_blocks; ++b) {
    const std::string p = "enc.block" + std::to_string(b);
    h = h + nn::mlp(g, ps, p + ".mlp", nn::layer_norm(g, ps, p + ".ln", h), 2);
  }
  Var trunk = nn::layer_norm(g, ps, "enc.ln", h);
  return {nn::linear(g, ps, "enc.out", trunk), trunk};
}

Tensor encode(const Tokenizer& tk, const BackboneStructure& s) {
  Graph g(false);
  return encode(g, tk, residue_features(s)).z.value();
}

Tensor trunk_representation(const Tokenizer& tk, const BackboneStructure& s) {
  Graph g(false);
  return encode(g, tk, residue_features(s)).trunk.value();
}

Quantized lfq_quantize(Var z) {
  Graph& g = z.graph();
  Var bits = straight_through_sign(z);
  Var commitment = mean_all(square(z - stop_gradient(bits)));
  const int n = z.dim(0);
  Var soft = add_scalar(scale(sigmoid(scale(z, 4.0)), 1.0 - 2e-6), 1e-6);
  Var freq = matmul(g.constant(Tensor(Shape{1, n}, 1.0 / n)), soft);
  Var h = -(freq * log(freq) + (add_scalar(-freq, 1.0)) * log(add_scalar(-freq, 1.0)));
  Var entropy = add_scalar(-mean_all(h), std::log(2.0));
  return {bits, commitment, entropy};
}

Tensor quantize(const Tensor& z) {
  Tensor out = z;
  for (double& v : out.values()) v = v >= 0.0 ? 1.0 : -1.0;
  return out;
}

std::vector<int> bits_to_index(const Tensor& bits) {
  std::vector<int> out(bits.rows());
  const int k = bits.cols();
  for (int i = 0; i < bits.rows(); ++i) {
    int idx = 0;
    for (int j = 0; j < k; ++j) {
      const double b = bits[static_cast<std::size_t>(i) * k + j];
      if (b != 1.0 && b != -1.0) fail(ErrorCode::IndexOutOfRange, fmt::format("bit value {} is not +-1", b));
      if (b > 0) idx |= 1 << j;
    }
    out[i] = idx;
  }
  return out;
}

Tensor index_to_bits(const std::vector<int>& indices, int k) {
  Tensor out(Shape{static_cast<int>(indices.size()), k});
  for (std::size_t i = 0; i < indices.size(); ++i) {
    if (indices[i] < 0 || indices[i] >= codebook_size(k))
      fail(ErrorCode::IndexOutOfRange, fmt::format("token {} outside codebook of size {}", indices[i], codebook_size(k)));
    for (int j = 0; j < k; ++j) out[i * k + j] = (indices[i] >> j) & 1 ? 1.0 : -1.0;
  }
  return out;
}

namespace {

Var normalize_rows(Var v) {
  return div(v, expand_last(sqrt(add_scalar(sum_last(square(v)), 1e-12)), 3));
}

// Per-residue head outputs (L, 18) -> backbone (L, 4, 3). Columns 0..5 give
// two vectors orthonormalized into the local rotation, 6..8 the step to the
// next C-alpha (3.8 A inside a chain, free at a chain start), 9..17 the N, C
// and O offsets in the residue frame.
Var frame_head(Graph& g, Var out, const std::vector<int>& positions) {
  const int l = out.dim(0);
  Tensor ex(Shape{3}), ey(Shape{3});
  ex[0] = 1.0;
  ey[1] = 1.0;
  Var e1 = normalize_rows(slice(out, 1, 0, 3) + g.constant(ex));
  Var b = slice(out, 1, 3, 3) + g.constant(ey);
  Var e2 = normalize_rows(b - e1 * expand_last(sum_last(e1 * b), 3));
  Var e3 = cross_last(e1, e2);
  Var rot = concat({reshape(e1, {l, 3, 1}), reshape(e2, {l, 3, 1}), reshape(e3, {l, 3, 1})}, 2);
  Var c = slice(out, 1, 6, 3) + g.constant(ex);
  Tensor inside(Shape{l, 3}), start(Shape{l, 3});
  for (int i = 0; i < l; ++i) {
    const bool chain_start = i == 0 || positions[i] != positions[i - 1] + 1;
    for (int k = 0; k < 3; ++k) (chain_start ? start : inside).at(i, k) = 1.0;
  }
  Var step = scale(normalize_rows(c), 3.8) * g.constant(inside) + scale(c, kCoordScale) * g.constant(start);
  Var frames = compose_frames(rot, step);
  Var ca = slice(frames, 1, 0, 3);
  Var gmat = reshape(slice(frames, 1, 3, 9), {l, 3, 3});
  Var offsets = scale(reshape(slice(out, 1, 9, 9), {l, 3, 3}), 2.0);
  Var others = bmm(offsets, gmat, false, true) + permute(expand_last(ca, 3), {0, 2, 1});
  Var xyz = concat({slice(others, 1, 0, 1), reshape(ca, {l, 1, 3}), slice(others, 1, 1, 2)}, 1);
  Var centroid = reshape(matmul(g.constant(Tensor(Shape{1, l}, 1.0 / l)), ca), {3});
  return xyz - centroid;
}

} // namespace

Var decode(Graph& g, const Tokenizer& tk, Var tokens, const std::vector<int>& positions) {
  const ParameterSet& ps = tk.params;
  const int l = tokens.dim(0);
  const int w = tk.cfg.width;
  if (static_cast<int>(positions.size()) != l)
    fail(ErrorCode::LengthMismatch, fmt::format("{} positions for {} tokens", positions.size(), l));
  Var h = nn::linear(g, ps, "dec.in", tokens);
  for (int b = 0; b < tk.cfg.dec_blocks; ++b) {
    const std::string p = "dec.block" + std::to_string(b);
    Var x = nn::layer_norm(g, ps, p + ".ln1", h);
    Var qkv = nn::linear(g, ps, p + ".qkv", x);
    Var bias = nn::relative_position_bias(g, ps, p + ".rel", positions, tk.cfg.rel_clip);
    Var att = nn::multi_head_attention(slice(qkv, 1, 0, w), slice(qkv, 1, w, w), slice(qkv, 1, 2 * w, w),
                                       tk.cfg.heads, bias);
    h = h + nn::linear(g, ps, p + ".o", att);
    h = h + nn::mlp(g, ps, p + ".mlp", nn::layer_norm(g, ps, p + ".ln2", h), 2);
  }
  return frame_head(g, nn::linear(g, ps, "dec.out", nn::layer_norm(g, ps, "dec.ln", h)), positions);
}

BackboneStructure coords_to_structure(const Tensor& xyz, const std::vector<int>& chain_ids) {
  const int l = xyz.dim(0);
  BackboneStructure s;
  s.residues.resize(l);
  for (int i = 0; i < l; ++i) {
    s.residues[i].chain_id = chain_ids.empty() ? 0 : chain_ids[i];
    for (int a = 0; a < 4; ++a)
      for (int k = 0; k < 3; ++k) s.residues[i].atoms(a, k) = xyz.at(i, a, k);
  }
  return s;
}

BackboneStructure decode(const Tokenizer& tk, const Tensor& tokens, const std::vector<int>& positions,
                         const std::vector<int>& chain_ids) {
  Graph g(false);
  return coords_to_structure(decode(g, tk, g.constant(tokens), positions).value(), chain_ids);
}

// ---------------------------------------------------------------- losses

namespace {

// C-alpha torsion sin/cos for quadruples (i..i+3), as graph values.
std::pair<Var, Var> ca_torsions(Var ca) {
  const int l = ca.dim(0);
  Var b1 = slice(ca, 0, 1, l - 3) - slice(ca, 0, 0, l - 3);
  Var b2 = slice(ca, 0, 2, l - 3) - slice(ca, 0, 1, l - 3);
  Var b3 = slice(ca, 0, 3, l - 3) - slice(ca, 0, 2, l - 3);
  Var n1 = cross_last(b1, b2);
  Var n2 = cross_last(b2, b3);
  Var x = sum_last(n1 * n2);
  Var y = sqrt(sum_last(square(b2))) * sum_last(b1 * n2);
  Var r = sqrt(add_scalar(square(x) + square(y), 1e-6));
  return {div(y, r), div(x, r)};
}

} // namespace

Var reconstruction_loss(Var pred, const BackboneStructure& truth) {
  Graph& g = pred.graph();
  const int l = pred.dim(0);
  if (truth.length() != l) fail(ErrorCode::LengthMismatch, "reconstruction target length differs");
  const geom::Coords atoms = truth.all_atoms();
  const int m = 4 * l;
  Tensor target(Shape{m, m});
  for (int i = 0; i < m; ++i)
    for (int j = 0; j < m; ++j) target.at(i, j) = (atoms.row(i) - atoms.row(j)).norm() / kCoordScale;
  Var d = scale(pairwise_distances(reshape(pred, {m, 3})), 1.0 / kCoordScale);
  Var loss = mean_all(square(d - g.constant(target)));
  if (l >= 4) {
    Tensor ca_true = Tensor::from_matrix(geom::Coords(truth.ca()));
    Graph tg(false);
    auto [ts, tc] = ca_torsions(tg.constant(ca_true));
    Tensor w(Shape{l - 3});
    for (int i = 0; i + 3 < l; ++i)
      w[i] = truth.residues[i].chain_id == truth.residues[i + 3].chain_id ? 1.0 / (l - 3) : 0.0;
    auto [ps, pc] = ca_torsions(reshape(slice(pred, 1, geom::kCA, 1), {l, 3}));
    Var err = square(ps - g.constant(ts.value())) + square(pc - g.constant(tc.value()));
    loss = loss + sum_all(err * g.constant(w));
  }
  return loss;
}

// -------------------------------------------------------------- training

ReconstructionReport evaluate_reconstruction(const Tokenizer& tk, const std::vector<BackboneStructure>& data,
                                             int pos_offset) {
  ReconstructionReport rep;
  for (const BackboneStructure& s : data) {
    const Tensor z = encode(tk, s);
    const std::vector<int> chains = s.chain_ids();
    const std::vector<int> pos = chain_positions(chains, pos_offset);
    const BackboneStructure cont = decode(tk, z, pos, chains);
    const BackboneStructure quant = decode(tk, quantize(z), pos, chains);
    SampleReconstruction r;
    r.rmsd_cont = geom::ca_rmsd(cont, s);
    r.rmsd_quant = geom::ca_rmsd(quant, s);
    r.tm_cont = geom::tm_score(cont, s);
    r.tm_quant = geom::tm_score(quant, s);
    rep.samples.push_back(r);
    rep.rmsd_cont += r.rmsd_cont;
    rep.rmsd_quant += r.rmsd_quant;
    rep.tm_cont += r.tm_cont;
    rep.tm_quant += r.tm_quant;
  }
  if (!data.empty()) {
    const double n = static_cast<double>(data.size());
    rep.rmsd_cont /= n;
    rep.rmsd_quant /= n;
    rep.tm_cont /= n;
    rep.tm_quant /= n;
  }
  return rep;
}

TokenizerTraining train_tokenizer(const std::vector<BackboneStructure>& data, const TokenizerConfig& cfg,
                                  const TokenizerTrainOptions& opts) {
  if (data.empty()) fail(ErrorCode::SpecInvalid, "tokenizer training needs a non-empty dataset");
  TokenizerTraining out{Tokenizer::create(cfg, opts.seed), {}};
  Tokenizer& tk = out.tokenizer;
  std::vector<Tensor> features;
  std::vector<std::vector<int>> positions;
  for (const BackboneStructure& s : data) {
    features.push_back(residue_features(s));
    positions.push_back(chain_positions(s.chain_ids(), opts.pos_offset));
  }
  Rng rng(opts.seed ^ 0x746f6b656e697aULL);
  Adam adam;
  std::vector<int> order(data.size());
  std::iota(order.begin(), order.end(), 0);
  std::size_t cursor = order.size();
  std::vector<double> losses;
  for (int step = 0; step < opts.steps; ++step) {
    std::vector<int> batch;
    for (int b = 0; b < std::min<int>(opts.batch, static_cast<int>(data.size())); ++b) {
      if (cursor == order.size()) {
        std::shuffle(order.begin(), order.end(), rng.engine());
        cursor = 0;
      }
      batch.push_back(order[cursor++]);
    }
    Graph g;
    int rows = 0;
    for (int i : batch) rows += data[i].length();
    Tensor feats(Shape{rows, kFeatureDim});
    int at = 0;
    for (int i : batch) {
      std::copy(features[i].data(), features[i].data() + features[i].size(), feats.data() + at * kFeatureDim);
      at += data[i].length();
    }
    EncoderOutput enc = encode(g, tk, feats);
    Quantized q = lfq_quantize(enc.z);
    Var recon = g.constant(Tensor::scalar(0.0));
    at = 0;
    for (int i : batch) {
      const int l = data[i].length();
      Var tokens = rng.bernoulli(cfg.quant_mix) ? slice(q.bits, 0, at, l) : slice(enc.z, 0, at, l);
      recon = recon + reconstruction_loss(decode(g, tk, tokens, positions[i]), data[i]);
      at += l;
    }
    recon = scale(recon, 1.0 / static_cast<double>(batch.size()));
    Var loss = recon + scale(q.commitment, cfg.commit_weight) + scale(q.entropy, cfg.entropy_weight);
    const double value = loss.value().item();
    if (!std::isfinite(value)) fail(ErrorCode::NonFiniteLoss, fmt::format("tokenizer loss {} at step {}", value, step));
    Gradients grads = g.backward(loss, tk.params);
    adam.step(tk.params, grads, opts.lr.at(step));
    losses.push_back(value);
    if (opts.on_step) opts.on_step(step + 1, value);
  }
  out.report = evaluate_reconstruction(tk, data, opts.pos_offset);
  out.report.losses = std::move(losses);
  return out;
}

// ------------------------------------------------------------ token files

std::string write_tokens(const std::vector<int>& indices, int k, bool as_bits) {
  std::string out = fmt::format("TOK v1 K={} L={}\n", k, indices.size());
  for (int idx : indices) {
    if (idx == mask_token(k)) {
      out += "M\n";
    } else if (idx == pad_token(k)) {
      out += "P\n";
    } else if (as_bits) {
      const Tensor b = index_to_bits({idx}, k);
      for (int j = 0; j < k; ++j) out += (j ? " " : "") + std::string(b[j] > 0 ? "+1" : "-1");
      out += "\n";
    } else {
      if (idx < 0 || idx >= codebook_size(k)) fail(ErrorCode::IndexOutOfRange, fmt::format("token {}", idx));
      out += fmt::format("{}\n", idx);
    }
  }
  return out;
}

TokenFile parse_tokens(std::string_view text) {
  std::istringstream in{std::string(text)};
  std::string line;
  if (!std::getline(in, line)) throw ParseError(1, "empty token file");
  TokenFile tf;
  int l = 0;
  if (std::sscanf(line.c_str(), "TOK v1 K=%d L=%d", &tf.k, &l) != 2 || tf.k < 1 || tf.k > 16 || l < 0)
    throw ParseError(1, "bad token header '" + line + "'");
  for (int i = 0; i < l; ++i) {
    const int line_no = i + 2;
    if (!std::getline(in, line)) throw ParseError(line_no, "missing token row");
    std::istringstream row(line);
    std::vector<std::string> fields;
    for (std::string f; row >> f;) fields.push_back(f);
    if (fields.size() == 1 && fields[0] == "M") {
      tf.indices.push_back(mask_token(tf.k));
    } else if (fields.size() == 1 && fields[0] == "P") {
      tf.indices.push_back(pad_token(tf.k));
    } else if (fields.size() == 1) {
      char* end = nullptr;
      const long v = std::strtol(fields[0].c_str(), &end, 10);
      if (*end != '\0' || v < 0 || v >= codebook_size(tf.k)) throw ParseError(line_no, "bad index '" + fields[0] + "'");
      tf.indices.push_back(static_cast<int>(v));
    } else if (static_cast<int>(fields.size()) == tf.k) {
      int idx = 0;
      for (int j = 0; j < tf.k; ++j) {
        if (fields[j] == "+1" || fields[j] == "1") idx |= 1 << j;
        else if (fields[j] != "-1") throw ParseError(line_no, "bad bit '" + fields[j] + "'");
      }
      tf.indices.push_back(idx);
    } else {
      throw ParseError(line_no, fmt::format("expected 1 or {} fields", tf.k));
    }
  }
  return tf;
}

} // namespace bitfold::tok
