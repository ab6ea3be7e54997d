#ifndef BITFOLD_MULTIMER_HPP_
#define BITFOLD_MULTIMER_HPP_

#include <vector>

#include "bitfold/diffusion.hpp"

// Multi-chain inputs joined by glycine linkers, with per-chain position offsets.
namespace bitfold::mm {

struct ChainLayout {
  std::vector<int> chain_lengths;
  int linker_len = 0;
  int pos_offset = 0;
  std::vector<bool> linker_mask;  // over the expanded length

  int expanded_length() const { return static_cast<int>(linker_mask.size()); }
  int chain_count() const { return static_cast<int>(chain_lengths.size()); }
  /// Owning chain per expanded position; a linker belongs to the chain before it.
  std::vector<int> chain_index() const;
};

/// Raises InvalidConfig for no chains, empty chains or negative sizes.
ChainLayout make_layout(const std::vector<int>& chain_lengths, int linker_len, int pos_offset);

/// Expanded index i plus (owning chain) * pos_offset.
std::vector<int> position_indices(const ChainLayout& layout);

struct Chain {
  std::vector<int> seq;
  std::vector<int> structure;  // token indices, MASK allowed
};

struct Joined {
  dlm::TokenState state;
  ChainLayout layout;
};

/// Joins chains with linker_len glycines; linker structure tokens are MASK
/// and flagged as having no structure.
Joined insert_linker(const std::vector<Chain>& chains, int linker_len, int pos_offset, int bits);

/// Drops linker positions; raises LayoutMismatch when the lengths disagree.
std::vector<Chain> strip_linker(const dlm::TokenState& joined, const ChainLayout& layout);

/// Values at non-linker positions, in order.
template <typename T>
std::vector<T> drop_linker(const std::vector<T>& values, const ChainLayout& layout);

/// Non-linker position indices and chain ids of the stripped complex, as the
/// decoder consumes them.
std::vector<int> stripped_positions(const ChainLayout& layout);
std::vector<int> stripped_chain_ids(const ChainLayout& layout);

/// Splits a complex's per-residue sequence and tokens at chain boundaries.
std::vector<Chain> split_by_chain(const std::vector<int>& seq, const std::vector<int>& structure,
                                  const std::vector<int>& chain_ids);

} // namespace bitfold::mm

#endif
