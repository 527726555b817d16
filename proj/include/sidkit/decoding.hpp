#pragma once

// Candidate generation: a prefix trie over valid SIDs, and beam search over
// SID tokens with optional trie constraints and per-beam KV caches.

#include <sidkit/model.hpp>
#include <sidkit/tokenizer.hpp>
#include <sidkit/vocab.hpp>

#include <algorithm>
#include <optional>
#include <string>
#include <vector>

namespace sidkit {

class SIDTrie {
 public:
  struct Node {
    std::vector<std::pair<int, int>> children;  // (code, node index), sorted
    int item = -1;                              // leaf: index into items_
  };

  static SIDTrie build(const SIDTable& table) {
    SIDTrie trie;
    trie.nodes_.emplace_back();
    for (const auto& [sid, item] : table.reverse) {
      if (trie.depth_ == 0)
        trie.depth_ = static_cast<int>(sid.size());
      else if (static_cast<int>(sid.size()) != trie.depth_)
        throw ValidationError("build_trie: SID length mismatch at item " + item);
      int node = 0;
      for (int code : sid) {
        int next = trie.child(node, code);
        if (next < 0) {
          next = static_cast<int>(trie.nodes_.size());
          trie.nodes_.emplace_back();
          auto& ch = trie.nodes_[std::size_t(node)].children;
          ch.insert(std::lower_bound(ch.begin(), ch.end(),
                                     std::pair<int, int>{code, 0}),
                    {code, next});
        }
        node = next;
      }
      trie.nodes_[std::size_t(node)].item = static_cast<int>(trie.items_.size());
      trie.items_.push_back(item);
    }
    return trie;
  }

  int depth() const { return depth_; }
  std::size_t leaf_count() const { return items_.size(); }

  int child(int node, int code) const {
    const auto& ch = nodes_[std::size_t(node)].children;
    auto it = std::lower_bound(ch.begin(), ch.end(), std::pair<int, int>{code, 0},
                               [](const auto& a, const auto& b) {
                                 return a.first < b.first;
                               });
    return (it != ch.end() && it->first == code) ? it->second : -1;
  }

  const std::vector<std::pair<int, int>>& children(int node) const {
    return nodes_[std::size_t(node)].children;
  }

  bool contains(const std::vector<int>& sid) const {
    return find_leaf(sid) >= 0;
  }

  const std::string* item_of(const std::vector<int>& sid) const {
    int leaf = find_leaf(sid);
    if (leaf < 0) return nullptr;
    return &items_[std::size_t(nodes_[std::size_t(leaf)].item)];
  }

  const std::string& leaf_item(int node) const {
    if (nodes_[std::size_t(node)].item < 0)
      throw ContractViolation("leaf_item: not a leaf");
    return items_[std::size_t(nodes_[std::size_t(node)].item)];
  }

 private:
  int find_leaf(const std::vector<int>& sid) const {
    if (static_cast<int>(sid.size()) != depth_ || nodes_.size() == 1) return -1;
    int node = 0;
    for (int code : sid) {
      node = child(node, code);
      if (node < 0) return -1;
    }
    return nodes_[std::size_t(node)].item >= 0 ? node : -1;
  }

  std::vector<Node> nodes_;
  std::vector<std::string> items_;
  int depth_ = 0;
};

inline SIDTrie build_trie(const SIDTable& table) { return SIDTrie::build(table); }

// ---------------------------------------------------------------------------

enum class DecodeMode { Constrained, Free };

inline std::string to_string(DecodeMode m) {
  return m == DecodeMode::Constrained ? "constrained" : "free";
}

struct ScoredItem {
  std::string item;
  double log_prob = 0;
};

struct BeamSearchResult {
  std::vector<ScoredItem> items;  // descending log-probability
  int invalid_count = 0;          // FREE-mode sequences outside the trie
};

namespace detail {

template <typename T>
inline VecD log_softmax_row(const Eigen::Ref<const Eigen::Matrix<T, Eigen::Dynamic, 1>>& row) {
  double mx = static_cast<double>(row.maxCoeff());
  double denom = 0;
  VecD out(row.size());
  for (Eigen::Index j = 0; j < row.size(); ++j) {
    out(j) = static_cast<double>(row(j)) - mx;
    denom += std::exp(out(j));
  }
  const double lse = std::log(denom);
  out.array() -= lse;
  return out;
}

struct BeamCandidate {
  double score;
  int token;  // global token id (tie-break: lower wins)
  int beam;   // parent beam index (tie-break: lower wins)
  int code;
  int node;   // trie node after taking this code (constrained only)

  bool operator<(const BeamCandidate& other) const {
    if (score != other.score) return score > other.score;
    if (token != other.token) return token < other.token;
    return beam < other.beam;
  }
};

}  // namespace detail

// The model input for decoding: encoder tokens (ENC_DEC) or the full context
// ending with BOS (DEC_ONLY), as produced by build_model_input.
template <typename T>
BeamSearchResult beam_search(const GRModel<T>& model, const ExampleTokens& input,
                             const SIDTrie& trie, int width, DecodeMode mode) {
  if (width < 1) throw ValidationError("beam_search: width must be >= 1");
  const VocabLayout& vocab = model.vocab;
  const int l_tok = vocab.l_tok();
  if (mode == DecodeMode::Constrained && trie.leaf_count() > 0 &&
      trie.depth() != l_tok)
    throw ValidationError("beam_search: trie depth does not match the vocab");

  struct Beam {
    std::vector<int> codes;
    int node = 0;
    double logp = 0;
  };

  std::optional<typename GRModel<T>::EncoderContext> ctx;
  std::vector<typename GRModel<T>::BeamCache> caches;
  MatX<T> logits;

  if (model.cfg.arch == Arch::EncDec) {
    ctx = model.make_encoder_context(input.enc);
    caches.push_back(model.make_beam_cache());
    logits = model.decode_step(&*ctx, caches, {VocabLayout::BOS});
  } else {
    auto [cache, last] = model.prefill_cache(input.dec);
    caches.push_back(std::move(cache));
    logits = MatX<T>(1, last.size());
    logits.row(0) = last.transpose();
  }

  std::vector<Beam> beams{Beam{}};
  for (int level = 0; level < l_tok; ++level) {
    std::vector<detail::BeamCandidate> candidates;
    for (std::size_t b = 0; b < beams.size(); ++b) {
      VecD lsm = detail::log_softmax_row<T>(logits.row(static_cast<Eigen::Index>(b)).transpose());
      if (mode == DecodeMode::Constrained) {
        for (const auto& [code, node] : trie.children(beams[b].node)) {
          const int tok = vocab.to_global(level, code);
          candidates.push_back({beams[b].logp + lsm(tok), tok,
                                static_cast<int>(b), code, node});
        }
      } else {
        for (int code = 0; code < vocab.card(level); ++code) {
          const int tok = vocab.to_global(level, code);
          candidates.push_back({beams[b].logp + lsm(tok), tok,
                                static_cast<int>(b), code, -1});
        }
      }
    }
    if (candidates.empty()) break;  // constrained search exhausted the trie
    std::sort(candidates.begin(), candidates.end());
    if (static_cast<int>(candidates.size()) > width) candidates.resize(std::size_t(width));

    std::vector<Beam> next;
    std::vector<int> parents, tokens;
    for (const auto& c : candidates) {
      Beam nb = beams[std::size_t(c.beam)];
      nb.codes.push_back(c.code);
      nb.node = c.node;
      nb.logp = c.score;
      next.push_back(std::move(nb));
      parents.push_back(c.beam);
      tokens.push_back(c.token);
    }
    beams = std::move(next);
    if (level + 1 < l_tok) {
      caches = GRModel<T>::reorder_caches(caches, parents);
      logits = model.decode_step(ctx ? &*ctx : nullptr, caches, tokens);
    }
  }

  BeamSearchResult result;
  for (const auto& b : beams) {
    if (static_cast<int>(b.codes.size()) != l_tok) continue;
    const std::string* item = nullptr;
    if (mode == DecodeMode::Constrained) {
      item = &trie.leaf_item(b.node);
    } else {
      item = trie.item_of(b.codes);
      if (!item) {
        ++result.invalid_count;
        continue;
      }
    }
    result.items.push_back({*item, b.logp});
  }
  std::stable_sort(result.items.begin(), result.items.end(),
                   [](const ScoredItem& a, const ScoredItem& b) {
                     return a.log_prob > b.log_prob;
                   });
  return result;
}

// ---------------------------------------------------------------------------

struct TopKResult {
  std::vector<ScoredItem> items;  // at most K; fewer means explicit misses
  int invalid_count = 0;
};

inline int default_beam_width(int k) { return std::max(2 * k, 10); }

template <typename T>
TopKResult decode_topk_for_user(const GRModel<T>& model,
                                const std::vector<std::string>& history,
                                const SIDTable& table, const SIDTrie& trie,
                                int k, DecodeMode mode, int width = 0,
                                std::optional<std::string> user_id = std::nullopt) {
  if (k < 1) throw ValidationError("decode_topk_for_user: K must be >= 1");
  if (width <= 0) width = default_beam_width(k);
  auto input = build_model_input(history, table, model.vocab, model.cfg,
                                 std::move(user_id));
  auto result = beam_search(model, input, trie, width, mode);
  TopKResult out;
  out.invalid_count = result.invalid_count;
  for (std::size_t i = 0; i < result.items.size() && i < std::size_t(k); ++i)
    out.items.push_back(result.items[i]);
  return out;
}

}  // namespace sidkit
