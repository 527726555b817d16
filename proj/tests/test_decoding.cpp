#include <sidkit/decoding.hpp>

#include <catch2/catch_amalgamated.hpp>

#include <random>
#include <set>

#include "test_util.hpp"

using namespace sidkit;

namespace {

SIDTable make_table(int levels, int W, int dedup_card,
                    std::vector<std::pair<std::string, std::vector<int>>> rows) {
  SIDTable t;
  t.strategy = dedup_card > 0 ? DedupStrategy::AppendDigit
                              : DedupStrategy::RandomSelect;
  t.levels = levels;
  t.W = W;
  t.dedup_card = dedup_card;
  for (auto& [item, sid] : rows) {
    t.item_order.push_back(item);
    t.forward[item] = sid;
    t.reverse[sid] = item;
  }
  return t;
}

ModelConfig decode_cfg(Arch arch, std::uint64_t seed) {
  ModelConfig cfg;
  cfg.arch = arch;
  cfg.layers = 2;
  cfg.heads = 2;
  cfg.d_model = 8;
  cfg.d_ff = 16;
  cfg.max_history_items = 6;
  cfg.dropout = 0.f;
  cfg.seed = seed;
  return cfg;
}

// All 16 two-level SIDs over W=4, items i0..i15.
SIDTable full_square_table() {
  std::vector<std::pair<std::string, std::vector<int>>> rows;
  for (int a = 0; a < 4; ++a)
    for (int b = 0; b < 4; ++b)
      rows.push_back({"i" + std::to_string(a * 4 + b), {a, b}});
  return make_table(2, 4, 0, rows);
}

// Independent oracle: score a SID prefix by summing per-position log-softmax
// values from the batched forward (never touches the KV-cache path).
template <typename T>
double prefix_logprob(const GRModel<T>& m, const std::vector<std::string>& history,
                      const SIDTable& table, const std::vector<int>& codes,
                      std::size_t upto) {
  std::string pseudo = table.reverse.at(codes);
  auto ex = build_model_input(history, table, m.vocab, m.cfg, std::nullopt, &pseudo);
  auto batch = pack_batch({ex}, m.cfg.arch);
  auto logits = m.forward(batch, false, 0);
  double total = 0;
  int row0 = m.cfg.arch == Arch::EncDec ? 0 : batch.dec_len[0] - int(codes.size());
  for (std::size_t l = 0; l < upto; ++l) {
    VecD lsm = sidkit::detail::log_softmax_row<T>(
        logits.row(row0 + static_cast<Eigen::Index>(l)).transpose());
    total += lsm(m.vocab.to_global(static_cast<int>(l), codes[l]));
  }
  return total;
}

template <typename T>
double full_sequence_logprob(const GRModel<T>& m, const std::vector<std::string>& history,
                             const SIDTable& table, const std::vector<int>& codes) {
  return prefix_logprob(m, history, table, codes, codes.size());
}

}  // namespace

TEST_CASE("trie construction exposes exact child sets") {
  auto table = make_table(2, 16, 16, {{"x", {3, 7, 0}}, {"y", {3, 8, 0}}});
  auto trie = build_trie(table);
  REQUIRE(trie.depth() == 3);
  REQUIRE(trie.leaf_count() == 2);
  REQUIRE(trie.children(0).size() == 1);
  REQUIRE(trie.children(0)[0].first == 3);
  int n3 = trie.child(0, 3);
  REQUIRE(n3 > 0);
  REQUIRE(trie.children(n3).size() == 2);
  REQUIRE(trie.children(n3)[0].first == 7);
  REQUIRE(trie.children(n3)[1].first == 8);
  REQUIRE(trie.contains({3, 7, 0}));
  REQUIRE_FALSE(trie.contains({3, 9, 0}));
  REQUIRE(*trie.item_of({3, 8, 0}) == "y");
}

TEST_CASE("empty trie rejects every query") {
  SIDTable empty;
  auto trie = build_trie(empty);
  REQUIRE(trie.leaf_count() == 0);
  REQUIRE_FALSE(trie.contains({0}));
  REQUIRE_FALSE(trie.contains({}));
}

TEST_CASE("trie membership agrees with a set oracle on 1000 SIDs") {
  std::mt19937_64 rng(8);
  std::uniform_int_distribution<int> code(0, 31);
  std::set<std::vector<int>> members;
  while (members.size() < 1000) {
    std::vector<int> sid{code(rng), code(rng), code(rng)};
    members.insert(sid);
  }
  std::vector<std::pair<std::string, std::vector<int>>> rows;
  int i = 0;
  for (const auto& sid : members) rows.push_back({"m" + std::to_string(i++), sid});
  auto trie = build_trie(make_table(3, 32, 0, rows));

  for (const auto& sid : members) REQUIRE(trie.contains(sid));
  int negatives = 0;
  while (negatives < 1000) {
    std::vector<int> sid{code(rng), code(rng), code(rng)};
    if (members.count(sid)) continue;
    REQUIRE_FALSE(trie.contains(sid));
    ++negatives;
  }
}

TEST_CASE("trie rejects unequal SID lengths") {
  auto table = make_table(2, 8, 0, {{"a", {1, 2}}, {"b", {1, 2, 3}}});
  REQUIRE_THROWS_AS(build_trie(table), ValidationError);
}

TEST_CASE("width-1 constrained beam equals stepwise greedy argmax") {
  for (auto arch : {Arch::EncDec, Arch::DecOnly}) {
    GRModel<float> m(decode_cfg(arch, 31), build_vocab(2, 4, 0, 0));
    auto table = full_square_table();
    auto trie = build_trie(table);
    std::vector<std::string> history{"i3", "i9"};

    // Greedy oracle via the batched forward only.
    std::vector<int> greedy;
    int node = 0;
    for (int level = 0; level < 2; ++level) {
      std::vector<int> dec_prefix{VocabLayout::BOS};
      for (std::size_t l = 0; l < greedy.size(); ++l)
        dec_prefix.push_back(m.vocab.to_global(int(l), greedy[l]));
      ExampleTokens ex = build_model_input(history, table, m.vocab, m.cfg, std::nullopt);
      if (arch == Arch::EncDec)
        ex.dec = dec_prefix;
      else
        ex.dec.insert(ex.dec.end(), dec_prefix.begin() + 1, dec_prefix.end());
      auto batch = pack_batch({ex}, arch);
      auto logits = m.forward(batch, false, 0);
      Eigen::Index row = batch.dec_len[0] - 1;
      int best_code = -1;
      float best = -1e30f;
      for (const auto& [code, child] : trie.children(node)) {
        float v = logits(row, m.vocab.to_global(level, code));
        if (v > best) {
          best = v;
          best_code = code;
        }
      }
      node = trie.child(node, best_code);
      greedy.push_back(best_code);
    }

    auto result = beam_search(m, build_model_input(history, table, m.vocab, m.cfg,
                                                   std::nullopt),
                              trie, 1, DecodeMode::Constrained);
    REQUIRE(result.items.size() == 1);
    REQUIRE(result.items[0].item == *trie.item_of(greedy));
  }
}

TEST_CASE("a one-item trie forces that item with its full-sequence log-prob") {
  GRModel<float> m(decode_cfg(Arch::EncDec, 7), build_vocab(2, 4, 0, 0));
  auto full = full_square_table();
  auto table = make_table(2, 4, 0, {{"only", {2, 1}}});
  auto trie = build_trie(table);
  std::vector<std::string> history{"only"};
  auto result = beam_search(m, build_model_input(history, table, m.vocab, m.cfg,
                                                 std::nullopt),
                            trie, 8, DecodeMode::Constrained);
  REQUIRE(result.items.size() == 1);
  REQUIRE(result.items[0].item == "only");
  double oracle = full_sequence_logprob(m, history, table, {2, 1});
  REQUIRE(result.items[0].log_prob == Catch::Approx(oracle).margin(1e-6));
}

TEST_CASE("constrained beam ranking equals the exhaustive enumeration oracle") {
  for (auto arch : {Arch::EncDec, Arch::DecOnly}) {
    GRModel<float> m(decode_cfg(arch, 101), build_vocab(2, 4, 0, 0));
    auto table = full_square_table();
    auto trie = build_trie(table);
    std::vector<std::string> history{"i1", "i14", "i7"};

    std::vector<ScoredItem> oracle;
    for (const auto& [sid, item] : table.reverse)
      oracle.push_back({item, full_sequence_logprob(m, history, table, sid)});
    std::stable_sort(oracle.begin(), oracle.end(),
                     [](const ScoredItem& a, const ScoredItem& b) {
                       return a.log_prob > b.log_prob;
                     });

    auto result = beam_search(m, build_model_input(history, table, m.vocab, m.cfg,
                                                   std::nullopt),
                              trie, 16, DecodeMode::Constrained);
    REQUIRE(result.items.size() == 16);
    for (std::size_t i = 0; i < 16; ++i) {
      REQUIRE(result.items[i].item == oracle[i].item);
      REQUIRE(result.items[i].log_prob ==
              Catch::Approx(oracle[i].log_prob).margin(1e-6));
    }
  }
}

TEST_CASE("beam reordering permutes caches consistently") {
  GRModel<float> m(decode_cfg(Arch::EncDec, 3), build_vocab(2, 4, 0, 0));
  auto table = full_square_table();
  std::vector<std::string> history{"i5"};
  auto input = build_model_input(history, table, m.vocab, m.cfg, std::nullopt);
  auto ctx = m.make_encoder_context(input.enc);

  // Three beams with different level-0 tokens.
  std::vector<GRModel<float>::BeamCache> caches{m.make_beam_cache(),
                                                m.make_beam_cache(),
                                                m.make_beam_cache()};
  m.decode_step(&ctx, caches, {VocabLayout::BOS, VocabLayout::BOS, VocabLayout::BOS});
  std::vector<int> level0 = {m.vocab.to_global(0, 0), m.vocab.to_global(0, 2),
                             m.vocab.to_global(0, 3)};
  m.decode_step(&ctx, caches, level0);

  std::vector<int> perm{2, 0, 1};
  auto reordered = GRModel<float>::reorder_caches(caches, perm);
  std::vector<int> next = {m.vocab.to_global(1, 1), m.vocab.to_global(1, 1),
                           m.vocab.to_global(1, 1)};
  auto logits = m.decode_step(&ctx, reordered, next);

  // Oracle: full batched forward of each reordered prefix.
  for (int b = 0; b < 3; ++b) {
    ExampleTokens ex = input;
    ex.dec = {VocabLayout::BOS, level0[std::size_t(perm[std::size_t(b)])], next[std::size_t(b)]};
    auto batch = pack_batch({ex}, Arch::EncDec);
    auto full = m.forward(batch, false, 0);
    REQUIRE((logits.row(b) - full.row(2)).cwiseAbs().maxCoeff() < 1e-5f);
  }
}

TEST_CASE("constrained decoding only emits trie members") {
  GRModel<float> m(decode_cfg(Arch::EncDec, 17), build_vocab(2, 4, 0, 0));
  std::vector<std::pair<std::string, std::vector<int>>> rows;
  for (int a = 0; a < 4; ++a)
    for (int b = 0; b < 4; ++b)
      if ((a + b) % 3 != 0)  // sparse subset
        rows.push_back({"s" + std::to_string(a * 4 + b), {a, b}});
  auto table = make_table(2, 4, 0, rows);
  auto trie = build_trie(table);

  std::mt19937_64 rng(12);
  for (int trial = 0; trial < 20; ++trial) {
    std::vector<std::string> history{
        rows[rng() % rows.size()].first, rows[rng() % rows.size()].first};
    auto result = beam_search(m, build_model_input(history, table, m.vocab, m.cfg,
                                                   std::nullopt),
                              trie, 8, DecodeMode::Constrained);
    REQUIRE(result.invalid_count == 0);
    for (const auto& s : result.items) {
      REQUIRE(trie.contains(table.sid_of(s.item)));
      REQUIRE(s.log_prob <= 0.0);
    }
    // Monotone score: a full sequence can never outscore its own prefix.
    for (const auto& s : result.items) {
      const auto& sid = table.sid_of(s.item);
      REQUIRE(s.log_prob <= prefix_logprob(m, history, table, sid, 1) + 1e-6);
    }
  }
}

TEST_CASE("free-form decoding reports dropped invalid sequences") {
  GRModel<float> m(decode_cfg(Arch::EncDec, 23), build_vocab(2, 4, 0, 0));
  std::vector<std::pair<std::string, std::vector<int>>> rows;
  for (int i = 0; i < 5; ++i) rows.push_back({"v" + std::to_string(i), {i % 4, i / 4}});
  auto table = make_table(2, 4, 0, rows);
  auto trie = build_trie(table);

  auto result = beam_search(m, build_model_input({"v0", "v3"}, table, m.vocab,
                                                 m.cfg, std::nullopt),
                            trie, 16, DecodeMode::Free);
  // Width 16 covers the whole 4x4 grid: exactly 5 valid, 11 invalid.
  REQUIRE(result.invalid_count == 11);
  REQUIRE(result.items.size() == 5);
  for (const auto& s : result.items) REQUIRE(trie.contains(table.sid_of(s.item)));
}

TEST_CASE("larger beams do not hurt average recall on the enumerable instance") {
  GRModel<float> m(decode_cfg(Arch::EncDec, 41), build_vocab(2, 4, 0, 0));
  auto table = full_square_table();
  auto trie = build_trie(table);
  std::mt19937_64 rng(2);

  auto run = [&](int width, const std::vector<std::string>& history,
                 const std::string& target) {
    auto r = beam_search(m, build_model_input(history, table, m.vocab, m.cfg,
                                              std::nullopt),
                         trie, width, DecodeMode::Constrained);
    for (std::size_t i = 0; i < r.items.size() && i < 4; ++i)
      if (r.items[i].item == target) return 1.0;
    return 0.0;
  };

  double narrow = 0, wide = 0;
  for (int trial = 0; trial < 100; ++trial) {
    std::vector<std::string> history{"i" + std::to_string(rng() % 16)};
    std::string target = "i" + std::to_string(rng() % 16);
    narrow += run(4, history, target);
    wide += run(16, history, target);
  }
  REQUIRE(wide >= narrow);
}

TEST_CASE("decode_topk truncates and keeps the constraint guarantees") {
  GRModel<float> m(decode_cfg(Arch::EncDec, 77), build_vocab(2, 4, 0, 0));
  auto table = full_square_table();
  auto trie = build_trie(table);
  std::vector<std::string> history{"i2"};

  auto top1 = decode_topk_for_user(m, history, table, trie, 1,
                                   DecodeMode::Constrained);
  auto full = beam_search(m, build_model_input(history, table, m.vocab, m.cfg,
                                               std::nullopt),
                          trie, default_beam_width(1), DecodeMode::Constrained);
  REQUIRE(top1.items.size() == 1);
  REQUIRE(top1.items[0].item == full.items[0].item);

  auto top5 = decode_topk_for_user(m, history, table, trie, 5,
                                   DecodeMode::Constrained);
  REQUIRE(top5.items.size() == 5);
  for (const auto& s : top5.items) REQUIRE(table.forward.count(s.item) == 1);
}
