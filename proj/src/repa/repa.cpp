#include "bitfold/repa.hpp"

#include <cstdio>
#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <sstream>

#include <fmt/format.h>

#include "bitfold/error.hpp"
#include "bitfold/nn.hpp"

namespace bitfold::repa {

Var ensemble_hidden(const std::vector<Var>& hidden, Var layer_logits) {
  if (hidden.empty()) fail(ErrorCode::ShapeMismatch, "ensemble over zero layers");
  const int n = static_cast<int>(hidden.size());
  if (layer_logits.rank() != 1 || layer_logits.dim(0) != n)
    fail(ErrorCode::ShapeMismatch, fmt::format("{} layer logits for {} layers", layer_logits.value().size(), n));
  const Shape shape = hidden[0].shape();
  const int flat = static_cast<int>(hidden[0].value().size());
  std::vector<Var> rows;
  for (const Var& h : hidden) rows.push_back(reshape(h, {1, flat}));
  Var weights = reshape(softmax_last(layer_logits), {1, n});
  return reshape(matmul(weights, concat(rows, 0)), shape);
}

void add_head(ParameterSet& ps, const std::string& prefix, int n_layers, int d_model, int hidden, int d_teacher,
              std::uint64_t seed) {
  nn::add_mlp(ps, prefix + ".proj", d_model, hidden, d_teacher, 3, seed);
  ps.add(prefix + ".layer_logits", Tensor(Shape{n_layers}));
}

Var cosine_alignment(Var projected, Var targets) {
  Var dot = sum_last(projected * targets);
  Var norms = sqrt(clamp_min(sum_last(square(projected)) * sum_last(square(targets)), 1e-16));
  return -mean_all(div(dot, norms));
}

Var repa_loss(Graph& g, const ParameterSet& ps, const std::string& prefix, const std::vector<Var>& hidden,
              const Tensor& targets) {
  Var mixed = ensemble_hidden(hidden, g.param(ps, prefix + ".layer_logits"));
  Var projected = nn::mlp(g, ps, prefix + ".proj", mixed, 3);
  if (projected.shape() != targets.shape())
    fail(ErrorCode::ShapeMismatch,
         "alignment targets " + shape_string(targets.shape()) + " vs " + shape_string(projected.shape()));
  return cosine_alignment(projected, g.constant(targets));
}

const Tensor& TargetStore::at(const std::string& id) const {
  auto it = targets_.find(id);
  if (it == targets_.end()) fail(ErrorCode::CacheMiss, "no alignment target for '" + id + "'");
  return it->second;
}

void TargetStore::save(const std::string& dir) const {
  std::filesystem::create_directories(dir);
  for (const auto& [id, t] : targets_) {
    std::ofstream out(std::filesystem::path(dir) / (id + ".repa"), std::ios::binary);
    if (!out) fail(ErrorCode::Io, "cannot write alignment target for " + id);
    out << write_target(t);
  }
}

TargetStore TargetStore::load(const std::string& dir) {
  TargetStore store;
  if (!std::filesystem::is_directory(dir)) fail(ErrorCode::Io, "no target directory " + dir);
  for (const auto& entry : std::filesystem::directory_iterator(dir)) {
    if (entry.path().extension() != ".repa") continue;
    std::ifstream in(entry.path(), std::ios::binary);
    std::stringstream ss;
    ss << in.rdbuf();
    store.put(entry.path().stem().string(), parse_target(ss.str()));
  }
  return store;
}

TargetStore precompute_targets(const tok::Tokenizer& teacher,
                               const std::vector<std::pair<std::string, geom::BackboneStructure>>& data) {
  TargetStore store;
  for (const auto& [id, s] : data) store.put(id, tok::trunk_representation(teacher, s));
  return store;
}

std::string write_target(const Tensor& target) {
  const int l = target.rows(), d = target.cols();
  std::string out = fmt::format("REPA v1 L={} D={}\n", l, d);
  for (int i = 0; i < l; ++i) {
    for (int k = 0; k < d; ++k) out += (k ? " " : "") + fmt::format("{}", target.at(i, k));
    out += "\n";
  }
  return out;
}

Tensor parse_target(std::string_view text) {
  std::istringstream in{std::string(text)};
  std::string line;
  int l = 0, d = 0;
  if (!std::getline(in, line) || std::sscanf(line.c_str(), "REPA v1 L=%d D=%d", &l, &d) != 2 || l < 0 || d < 1)
    throw ParseError(1, "bad alignment target header");
  Tensor t(Shape{l, d});
  for (int i = 0; i < l; ++i) {
    if (!std::getline(in, line)) throw ParseError(i + 2, "missing row");
    const char* p = line.c_str();
    for (int k = 0; k < d; ++k) {
      char* end = nullptr;
      t.at(i, k) = std::strtod(p, &end);
      if (end == p) throw ParseError(i + 2, fmt::format("expected {} values", d));
      p = end;
    }
    while (*p == ' ') ++p;
    if (*p != '\0') throw ParseError(i + 2, "trailing data");
  }
  return t;
}

} // namespace bitfold::repa
