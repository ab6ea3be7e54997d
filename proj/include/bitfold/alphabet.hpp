#ifndef BITFOLD_ALPHABET_HPP_
#define BITFOLD_ALPHABET_HPP_

#include <string>
#include <string_view>
#include <vector>

namespace bitfold {

inline constexpr std::string_view kAminoAcids = "ACDEFGHIKLMNPQRSTVWY";
inline constexpr int kNumAminoAcids = 20;
inline constexpr int kAaMask = 20;
inline constexpr int kAaPad = 21;
inline constexpr int kAaVocab = 22;
inline constexpr int kGlycine = 5;

int aa_index(char c);  // -1 when not one of the 20 letters
std::string sequence_to_string(const std::vector<int>& seq);  // MASK -> '#', PAD -> '-'
std::vector<int> sequence_from_string(std::string_view s);

} // namespace bitfold

#endif
