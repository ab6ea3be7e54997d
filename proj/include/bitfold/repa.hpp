#ifndef BITFOLD_REPA_HPP_
#define BITFOLD_REPA_HPP_

#include <map>
#include <string>
#include <utility>
#include <vector>

#include "bitfold/tokenizer.hpp"

// Representation alignment: LM structure-track hidden states, ensembled over
// blocks and projected, are pulled toward frozen teacher features.
namespace bitfold::repa {

/// sum_i softmax(layer_logits)_i * hidden_i; layer_logits has shape (N).
Var ensemble_hidden(const std::vector<Var>& hidden, Var layer_logits);

/// Registers `prefix.proj` (3-layer MLP d_model -> hidden -> d_teacher) and
/// `prefix.layer_logits` (N, zero).
void add_head(ParameterSet& ps, const std::string& prefix, int n_layers, int d_model, int hidden, int d_teacher,
              std::uint64_t seed);

/// -mean_i cos(projected_i, target_i), the norm product floored at 1e-8.
Var cosine_alignment(Var projected, Var targets);

Var repa_loss(Graph& g, const ParameterSet& ps, const std::string& prefix, const std::vector<Var>& hidden,
              const Tensor& targets);

/// Teacher features per sample id.
class TargetStore {
public:
  void put(const std::string& id, Tensor target) { targets_[id] = std::move(target); }
  bool contains(const std::string& id) const { return targets_.count(id) != 0; }
  /// Raises CacheMiss for unknown ids.
  const Tensor& at(const std::string& id) const;
  std::size_t size() const { return targets_.size(); }
  bool empty() const { return targets_.empty(); }
  const std::map<std::string, Tensor>& entries() const { return targets_; }

  /// One `<id>.repa` file per sample.
  void save(const std::string& dir) const;
  static TargetStore load(const std::string& dir);

  friend bool operator==(const TargetStore& a, const TargetStore& b) { return a.targets_ == b.targets_; }

private:
  std::map<std::string, Tensor> targets_;
};

/// Trunk representations of the frozen tokenizer encoder.
TargetStore precompute_targets(const tok::Tokenizer& teacher,
                               const std::vector<std::pair<std::string, geom::BackboneStructure>>& data);

/// `REPA v1 L=<n> D=<d>` then one row of decimals per residue.
std::string write_target(const Tensor& target);
Tensor parse_target(std::string_view text);

} // namespace bitfold::repa

#endif
