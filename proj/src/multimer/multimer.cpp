#include "bitfold/multimer.hpp"

#include <algorithm>

#include "bitfold/alphabet.hpp"
#include "bitfold/error.hpp"
#include "bitfold/tokenizer.hpp"

namespace bitfold::mm {

std::vector<int> ChainLayout::chain_index() const {
  std::vector<int> out;
  out.reserve(linker_mask.size());
  for (int c = 0; c < chain_count(); ++c) {
    out.insert(out.end(), chain_lengths[c], c);
    if (c + 1 < chain_count()) out.insert(out.end(), linker_len, c);
  }
  return out;
}

ChainLayout make_layout(const std::vector<int>& chain_lengths, int linker_len, int pos_offset) {
  if (chain_lengths.empty()) fail(ErrorCode::InvalidConfig, "layout needs at least one chain");
  if (linker_len < 0 || pos_offset < 0) fail(ErrorCode::InvalidConfig, "linker length and offset must be >= 0");
  if (std::any_of(chain_lengths.begin(), chain_lengths.end(), [](int n) { return n < 1; }))
    fail(ErrorCode::InvalidConfig, "empty chain in layout");
  ChainLayout l;
  l.chain_lengths = chain_lengths;
  l.linker_len = linker_len;
  l.pos_offset = pos_offset;
  for (std::size_t c = 0; c < chain_lengths.size(); ++c) {
    l.linker_mask.insert(l.linker_mask.end(), chain_lengths[c], false);
    if (c + 1 < chain_lengths.size()) l.linker_mask.insert(l.linker_mask.end(), linker_len, true);
  }
  return l;
}

std::vector<int> position_indices(const ChainLayout& layout) {
  std::vector<int> pos = layout.chain_index();
  for (std::size_t i = 0; i < pos.size(); ++i) pos[i] = static_cast<int>(i) + pos[i] * layout.pos_offset;
  return pos;
}

Joined insert_linker(const std::vector<Chain>& chains, int linker_len, int pos_offset, int bits) {
  std::vector<int> lengths;
  for (const Chain& c : chains) {
    if (c.seq.size() != c.structure.size()) fail(ErrorCode::LengthMismatch, "chain tracks differ in length");
    lengths.push_back(static_cast<int>(c.seq.size()));
  }
  Joined j;
  j.layout = make_layout(lengths, linker_len, pos_offset);
  std::vector<int> seq, st;
  for (std::size_t c = 0; c < chains.size(); ++c) {
    seq.insert(seq.end(), chains[c].seq.begin(), chains[c].seq.end());
    st.insert(st.end(), chains[c].structure.begin(), chains[c].structure.end());
    if (c + 1 < chains.size()) {
      seq.insert(seq.end(), linker_len, kGlycine);
      st.insert(st.end(), linker_len, tok::mask_token(bits));
    }
  }
  j.state = dlm::TokenState::observed(std::move(seq), std::move(st), bits, position_indices(j.layout));
  const auto& mask = j.layout.linker_mask;
  if (std::find(mask.begin(), mask.end(), true) != mask.end()) {
    j.state.struct_known.resize(mask.size());
    for (std::size_t i = 0; i < mask.size(); ++i) j.state.struct_known[i] = !mask[i];
  }
  return j;
}

template <typename T>
std::vector<T> drop_linker(const std::vector<T>& values, const ChainLayout& layout) {
  if (static_cast<int>(values.size()) != layout.expanded_length())
    fail(ErrorCode::LayoutMismatch, "joined length " + std::to_string(values.size()) + " does not match layout length " +
                                        std::to_string(layout.expanded_length()));
  std::vector<T> out;
  for (std::size_t i = 0; i < values.size(); ++i)
    if (!layout.linker_mask[i]) out.push_back(values[i]);
  return out;
}

template std::vector<int> drop_linker(const std::vector<int>&, const ChainLayout&);
template std::vector<double> drop_linker(const std::vector<double>&, const ChainLayout&);

std::vector<Chain> strip_linker(const dlm::TokenState& joined, const ChainLayout& layout) {
  const std::vector<int> seq = drop_linker(joined.seq, layout);
  const std::vector<int> st = drop_linker(joined.structure, layout);
  std::vector<Chain> out;
  std::size_t at = 0;
  for (int n : layout.chain_lengths) {
    out.push_back({std::vector<int>(seq.begin() + at, seq.begin() + at + n),
                   std::vector<int>(st.begin() + at, st.begin() + at + n)});
    at += n;
  }
  return out;
}

std::vector<int> stripped_positions(const ChainLayout& layout) { return drop_linker(position_indices(layout), layout); }

std::vector<int> stripped_chain_ids(const ChainLayout& layout) { return drop_linker(layout.chain_index(), layout); }

std::vector<Chain> split_by_chain(const std::vector<int>& seq, const std::vector<int>& structure,
                                  const std::vector<int>& chain_ids) {
  if (seq.size() != structure.size() || seq.size() != chain_ids.size())
    fail(ErrorCode::LengthMismatch, "per-residue arrays differ in length");
  std::vector<Chain> out;
  for (std::size_t i = 0; i < seq.size(); ++i) {
    if (i == 0 || chain_ids[i] != chain_ids[i - 1]) out.emplace_back();
    out.back().seq.push_back(seq[i]);
    out.back().structure.push_back(structure[i]);
  }
  return out;
}

} // namespace bitfold::mm
