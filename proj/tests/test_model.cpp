#include <sidkit/model.hpp>

#include <catch2/catch_amalgamated.hpp>

#include <cstring>
#include <random>

#include "test_util.hpp"

using namespace sidkit;

namespace {

ModelConfig tiny_cfg(Arch arch, std::uint64_t seed = 1) {
  ModelConfig cfg;
  cfg.arch = arch;
  cfg.layers = 2;
  cfg.heads = 2;
  cfg.d_model = 8;
  cfg.d_ff = 16;
  cfg.max_history_items = 4;
  cfg.dropout = 0.f;
  cfg.seed = seed;
  return cfg;
}

// Random but valid batch: histories of SID codes plus a target SID.
template <typename T>
TokenBatch random_batch(const GRModel<T>& m, int B, std::uint64_t seed,
                        int min_hist = 0) {
  std::mt19937_64 rng(seed);
  const auto& v = m.vocab;
  std::vector<ExampleTokens> ex;
  for (int b = 0; b < B; ++b) {
    std::uniform_int_distribution<int> hist_len(min_hist, m.cfg.max_history_items);
    std::uniform_int_distribution<int> code(0, v.W - 1);
    int n_hist = hist_len(rng);
    std::vector<std::vector<int>> sids;
    sids.resize(std::size_t(n_hist));
    for (auto& sid : sids) {
      sid.resize(std::size_t(v.l_tok()));
      for (int l = 0; l < v.l_tok(); ++l)
        sid[std::size_t(l)] = std::uniform_int_distribution<int>(0, v.card(l) - 1)(rng);
    }
    std::vector<const std::vector<int>*> ptrs;
    for (auto& s : sids) ptrs.push_back(&s);
    std::vector<int> target(std::size_t(v.l_tok()));
    for (int l = 0; l < v.l_tok(); ++l)
      target[std::size_t(l)] = std::uniform_int_distribution<int>(0, v.card(l) - 1)(rng);
    ex.push_back(build_model_input_codes(ptrs, &target, v, m.cfg, std::nullopt));
  }
  return pack_batch(ex, m.cfg.arch);
}

}  // namespace

TEST_CASE("build_model_input flattens history SIDs through the vocab layout") {
  auto vocab = build_vocab(3, 256, 0, 0);
  auto cfg = tiny_cfg(Arch::EncDec);
  std::vector<int> sid{3, 7, 0};
  std::vector<const std::vector<int>*> hist{&sid};
  auto ex = build_model_input_codes(hist, nullptr, vocab, cfg, std::nullopt);
  REQUIRE(ex.enc == std::vector<int>{3 + 3, 3 + 256 + 7, 3 + 512 + 0});
  REQUIRE(ex.dec == std::vector<int>{VocabLayout::BOS});
  REQUIRE(ex.target.empty());
}

TEST_CASE("build_model_input uses a BOS sentinel for empty history") {
  auto vocab = build_vocab(2, 4, 0, 0);
  auto ex = build_model_input_codes({}, nullptr, vocab, tiny_cfg(Arch::EncDec),
                                    std::nullopt);
  REQUIRE(ex.enc == std::vector<int>{VocabLayout::BOS});
}

TEST_CASE("build_model_input truncates history to the last H items") {
  auto vocab = build_vocab(1, 9, 0, 0);
  auto cfg = tiny_cfg(Arch::EncDec);
  cfg.max_history_items = 2;
  std::vector<std::vector<int>> sids = {{1}, {2}, {3}, {4}};
  std::vector<const std::vector<int>*> hist;
  for (auto& s : sids) hist.push_back(&s);
  auto ex = build_model_input_codes(hist, nullptr, vocab, cfg, std::nullopt);
  REQUIRE(ex.enc == std::vector<int>{3 + 3, 3 + 4});
}

TEST_CASE("build_model_input aligns decoder-only targets causally") {
  auto vocab = build_vocab(2, 4, 0, 0);
  auto cfg = tiny_cfg(Arch::DecOnly);
  std::vector<int> sid{1, 2};
  std::vector<int> target{3, 0};
  std::vector<const std::vector<int>*> hist{&sid};
  auto ex = build_model_input_codes(hist, &target, vocab, cfg, std::nullopt);
  // context [g(0,1), g(1,2), BOS, g(0,3)], target at BOS predicts g(0,3),
  // position of g(0,3) predicts g(1,0)
  REQUIRE(ex.dec == std::vector<int>{4, 9, VocabLayout::BOS, 6});
  REQUIRE(ex.target ==
          std::vector<int>{VocabLayout::PAD, VocabLayout::PAD, 6, 7});
}

TEST_CASE("forward is deterministic and batch-order stable") {
  GRModel<float> m(tiny_cfg(Arch::EncDec), build_vocab(2, 4, 0, 0));
  auto batch = random_batch(m, 5, 7);
  auto a = m.forward(batch, false, 0);
  auto b = m.forward(batch, false, 0);
  REQUIRE(std::memcmp(a.data(), b.data(), sizeof(float) * a.size()) == 0);
}

TEST_CASE("PAD positions cannot influence the logits") {
  GRModel<float> m(tiny_cfg(Arch::EncDec), build_vocab(2, 4, 0, 0));
  auto batch = random_batch(m, 6, 3);
  auto before = m.forward(batch, false, 0);

  // Overwrite the PAD embedding row with noise; masked attention must make
  // the decoder logits invariant to it.
  auto tok = m.params.mat(0);
  std::mt19937_64 rng(5);
  std::normal_distribution<float> g(0, 10.f);
  for (Eigen::Index j = 0; j < tok.cols(); ++j) tok(VocabLayout::PAD, j) = g(rng);
  auto after = m.forward(batch, false, 0);
  REQUIRE(((before - after).cwiseAbs().maxCoeff()) < 1e-5f);
}

TEST_CASE("decoder-only causality: future tokens do not affect earlier logits") {
  GRModel<float> m(tiny_cfg(Arch::DecOnly), build_vocab(2, 4, 0, 0));
  auto batch = random_batch(m, 1, 11, 2);
  const int len = batch.dec_len[0];
  REQUIRE(len >= 4);
  auto before = m.forward(batch, false, 0);

  TokenBatch perturbed = batch;
  perturbed.dec(0, len - 1) = (batch.dec(0, len - 1) + 1) % 4 + 3;
  auto after = m.forward(perturbed, false, 0);
  for (int t = 0; t + 1 < len - 1; ++t) {
    auto diff = (before.row(t) - after.row(t)).cwiseAbs().maxCoeff();
    REQUIRE(diff < 1e-6f);
  }
}

TEST_CASE("enc-dec decoder causality holds as well") {
  GRModel<float> m(tiny_cfg(Arch::EncDec), build_vocab(3, 4, 0, 0));
  auto batch = random_batch(m, 1, 13, 1);
  auto before = m.forward(batch, false, 0);
  TokenBatch perturbed = batch;
  perturbed.dec(0, 2) = (batch.dec(0, 2) + 1) % 4 + 3;  // position 2 input
  auto after = m.forward(perturbed, false, 0);
  for (int t = 0; t < 2; ++t)
    REQUIRE((before.row(t) - after.row(t)).cwiseAbs().maxCoeff() < 1e-6f);
}

TEST_CASE("next_token_loss matches closed forms") {
  const int V = 7;
  MatX<float> logits = MatX<float>::Zero(1, V);
  MatX<int> targets(1, 1);
  targets << 3;

  SECTION("near-one-hot logits give near-zero loss") {
    logits(0, 3) = 1e6f;
    REQUIRE(next_token_loss(logits, targets) == Catch::Approx(0.0).margin(1e-9));
  }
  SECTION("uniform logits give ln V") {
    REQUIRE(next_token_loss(logits, targets) == Catch::Approx(std::log(double(V))));
  }
  SECTION("PAD positions are excluded from the mean") {
    MatX<float> two = MatX<float>::Zero(2, V);
    two(0, 2) = 5.f;
    MatX<int> t2(2, 1);
    t2 << 2, VocabLayout::PAD;
    MatX<float> one = two.topRows(1);
    MatX<int> t1(1, 1);
    t1 << 2;
    REQUIRE(next_token_loss(two, t2) == Catch::Approx(next_token_loss(one, t1)));
  }
  SECTION("all-PAD targets violate the contract") {
    MatX<int> pads = MatX<int>::Zero(1, 1);
    REQUIRE_THROWS_AS(next_token_loss(logits, pads), ContractViolation);
  }
}

TEST_CASE("init is seed-deterministic and seed-sensitive") {
  auto vocab = build_vocab(2, 4, 0, 0);
  GRModel<float> a(tiny_cfg(Arch::EncDec, 5), vocab);
  GRModel<float> b(tiny_cfg(Arch::EncDec, 5), vocab);
  GRModel<float> c(tiny_cfg(Arch::EncDec, 6), vocab);
  REQUIRE(a.params.data() == b.params.data());
  REQUIRE(a.params.data() != c.params.data());
}

TEST_CASE("parameter count matches the closed-form shape sum") {
  ModelConfig cfg;  // paper defaults: 8 layers, 6 heads, 128/1024
  cfg.seed = 1;
  auto vocab = build_vocab(3, 256, 16, 0);
  REQUIRE(vocab.total_vocab() == 787);
  GRModel<float> m(cfg, vocab);

  const long long d = cfg.d_model, ff = cfg.d_ff, V = vocab.total_vocab();
  const long long inner = cfg.inner_dim();  // 6 heads x ceil(128/6) = 132
  const long long l_tok = vocab.l_tok();
  const long long attn = 2 * d + 3 * (d * inner + inner) + inner * d + d;
  const long long ffn = 2 * d + d * ff + ff + ff * d + d;
  const long long te = 1 + cfg.max_history_items * l_tok;
  const long long td = l_tok;
  long long expect = V * d + te * d + td * d;         // embeddings
  expect += 4 * (attn + ffn) + 2 * d;                 // encoder + final LN
  expect += 4 * (attn + attn + ffn) + 2 * d;          // decoder + final LN
  expect += d * V + V;                                // output projection
  REQUIRE(static_cast<long long>(m.params.size()) == expect);
}

TEST_CASE("model checkpoint round-trips forward outputs bit-exactly") {
  auto dir = testutil::temp_dir("model_ckpt");
  for (auto arch : {Arch::EncDec, Arch::DecOnly}) {
    GRModel<float> m(tiny_cfg(arch, 21), build_vocab(2, 4, 4, 3));
    auto batch = random_batch(m, 4, 17);
    auto before = m.forward(batch, false, 0);
    auto path = dir + "/" + to_string(arch) + ".sidm";
    save_model(m, path);
    auto loaded = load_model(path);
    auto after = loaded.forward(batch, false, 0);
    REQUIRE(std::memcmp(before.data(), after.data(),
                        sizeof(float) * before.size()) == 0);
  }
}

TEST_CASE("model checkpoint rejects bad magic") {
  auto dir = testutil::temp_dir("model_bad");
  write_text_file(dir + "/junk.sidm", "not a checkpoint");
  REQUIRE_THROWS_AS(load_model(dir + "/junk.sidm"), FormatError);
}

TEST_CASE("enc-dec analytic gradients match finite differences") {
  GRModel<double> m(tiny_cfg(Arch::EncDec, 3), build_vocab(2, 4, 2, 2));
  auto batch = random_batch(m, 3, 5, 1);
  REQUIRE(finite_diff_gradcheck<double>(m, batch, 1e-3, 100, 99) <= 1e-3);
}

TEST_CASE("dec-only analytic gradients match finite differences") {
  GRModel<double> m(tiny_cfg(Arch::DecOnly, 3), build_vocab(2, 4, 2, 2));
  auto batch = random_batch(m, 3, 5, 1);
  REQUIRE(finite_diff_gradcheck<double>(m, batch, 1e-3, 100, 99) <= 1e-3);
}

TEST_CASE("incremental decode with KV caches matches the batched forward") {
  for (auto arch : {Arch::DecOnly, Arch::EncDec}) {
    GRModel<float> m(tiny_cfg(arch, 9), build_vocab(2, 4, 0, 0));
    std::mt19937_64 rng(4);

    // Build a valid single-row batch with a fully materialized target.
    auto batch = random_batch(m, 1, 23, 2);
    auto full = m.forward(batch, false, 0);

    std::optional<GRModel<float>::EncoderContext> ctx;
    if (arch == Arch::EncDec) {
      std::vector<int> enc_tokens;
      for (int j = 0; j < batch.enc_len[0]; ++j) enc_tokens.push_back(batch.enc(0, j));
      ctx = m.make_encoder_context(enc_tokens);
    }
    std::vector<GRModel<float>::BeamCache> caches{m.make_beam_cache()};
    for (int t = 0; t < batch.dec_len[0]; ++t) {
      auto logits = m.decode_step(ctx ? &*ctx : nullptr, caches, {batch.dec(0, t)});
      auto diff = (logits.row(0) - full.row(t)).cwiseAbs().maxCoeff();
      REQUIRE(diff < 1e-5f);
    }
  }
}
