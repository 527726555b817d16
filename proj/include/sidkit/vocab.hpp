#pragma once

// Token id layout shared by the recommender and the decoder: specials first,
// then one contiguous block per SID level (the optional dedup level has its
// own cardinality D), then hashed user tokens.

#include <sidkit/common.hpp>

#include <cstdint>
#include <utility>

namespace sidkit {

struct VocabLayout {
  int levels = 0;  // base SID levels L
  int W = 0;       // cardinality of each base level
  int D = 0;       // dedup level cardinality; 0 = no dedup level
  int U = 0;       // hashed user tokens

  static constexpr int PAD = 0;
  static constexpr int BOS = 1;
  static constexpr int EOS = 2;

  int l_tok() const { return levels + (D > 0 ? 1 : 0); }

  int card(int level) const { return level < levels ? W : D; }

  int sid_offset(int level) const { return 3 + level * W; }

  int user_offset() const { return 3 + levels * W + D; }

  int total_vocab() const { return user_offset() + U; }

  int to_global(int level, int code) const {
    if (level < 0 || level >= l_tok() || code < 0 || code >= card(level))
      throw ContractViolation("to_global: (level, code) out of range");
    return sid_offset(level) + code;
  }

  // Inverse of to_global over the SID ranges only.
  std::pair<int, int> from_global(int token) const {
    int base = token - 3;
    if (base >= 0 && base < levels * W) return {base / W, base % W};
    int dedup = base - levels * W;
    if (D > 0 && dedup >= 0 && dedup < D) return {levels, dedup};
    throw ContractViolation("from_global: token " + std::to_string(token) +
                            " is not a SID token");
  }

  bool is_sid_token(int token) const {
    return token >= 3 && token < user_offset();
  }
};

inline VocabLayout build_vocab(int levels, int W, int D, int U) {
  if (levels < 1) throw ValidationError("build_vocab: need at least one level");
  if (W < 2) throw ValidationError("build_vocab: W must be >= 2");
  if (D < 0 || U < 0) throw ValidationError("build_vocab: negative cardinality");
  std::int64_t total = 3ll + std::int64_t(levels) * W + D + U;
  if (total > (1ll << 30))
    throw ValidationError("build_vocab: vocabulary exceeds representable range");
  return VocabLayout{levels, W, D, U};
}

// Stable across processes: 64-bit FNV-1a of the UTF-8 user id, modulo U.
inline int hash_user_token(const VocabLayout& vocab, std::string_view user_id) {
  if (vocab.U < 1)
    throw ContractViolation("hash_user_token: layout has no user tokens");
  return vocab.user_offset() +
         static_cast<int>(fnv1a64(user_id) % static_cast<std::uint64_t>(vocab.U));
}

}  // namespace sidkit
