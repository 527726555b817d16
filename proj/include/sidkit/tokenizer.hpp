#pragma once

// Residual-quantization tokenizers over item embeddings. Three trainers
// share one residual cascade: RK-Means (Sculley mini-batch k-means per
// level), R-VQ (Adam on the codebooks per level), and RQ-VAE (jointly
// trained MLP autoencoder with codebooks in latent space, straight-through
// gradients, Adagrad). Items then receive hierarchical Semantic IDs with
// collision de-duplication.

#include <sidkit/common.hpp>
#include <sidkit/data.hpp>
#include <sidkit/io.hpp>
#include <sidkit/nn.hpp>

#include <algorithm>
#include <map>
#include <memory>
#include <numeric>
#include <optional>
#include <sstream>
#include <string>
#include <vector>

namespace sidkit {

enum class TokenizerAlgorithm { RKMeans, RVQ, RQVAE };
enum class DedupStrategy { AppendDigit, RandomSelect };

inline std::string to_string(TokenizerAlgorithm a) {
  switch (a) {
    case TokenizerAlgorithm::RKMeans: return "rkmeans";
    case TokenizerAlgorithm::RVQ: return "rvq";
    case TokenizerAlgorithm::RQVAE: return "rqvae";
  }
  return "?";
}

struct TokenizerConfig {
  TokenizerAlgorithm algorithm = TokenizerAlgorithm::RKMeans;
  int levels = 3;           // L
  int codebook_size = 256;  // W
  int steps_per_level = 1000;
  int total_steps = 15000;  // RQ-VAE
  int batch_size = 2048;
  float learning_rate = 1e-3f;
  std::uint64_t seed = 0;
  bool normalize_residuals = true;  // RK-Means / R-VQ: L2-normalize the input
  bool whiten_input = true;         // RQ-VAE only
  float commitment_beta = 0.25f;
  int latent_dim = 32;
  std::vector<int> enc_hidden = {512, 256};

  void validate() const {
    if (levels < 1) throw ValidationError("tokenizer: levels must be >= 1");
    if (codebook_size < 2) throw ValidationError("tokenizer: W must be >= 2");
    if (batch_size < 1 || steps_per_level < 1 || total_steps < 1)
      throw ValidationError("tokenizer: sizes and steps must be positive");
    if (learning_rate <= 0) throw ValidationError("tokenizer: lr must be positive");
  }
};

struct Codebook {
  int level = 0;
  MatF centroids;                    // W x d'
  std::vector<std::uint64_t> usage;  // assignments over the catalog
};

// ---------------------------------------------------------------------------
// k-means++ seeding: first centroid uniform, the rest D^2-sampled.

template <typename T>
MatX<T> kmeanspp_init(const MatX<T>& points, int W, std::uint64_t seed) {
  const Eigen::Index n = points.rows();
  if (n < W)
    throw ValidationError("kmeanspp_init: need at least W points (" +
                          std::to_string(n) + " < " + std::to_string(W) + ")");
  Rng rng = make_rng(seed, 0x4b6d);
  MatX<T> centroids(W, points.cols());
  std::vector<char> chosen(static_cast<std::size_t>(n), 0);

  std::uniform_int_distribution<Eigen::Index> uni(0, n - 1);
  Eigen::Index first = uni(rng);
  centroids.row(0) = points.row(first);
  chosen[static_cast<std::size_t>(first)] = 1;

  VecX<T> d2(n);
  for (Eigen::Index i = 0; i < n; ++i)
    d2(i) = (points.row(i) - centroids.row(0)).squaredNorm();

  std::uniform_real_distribution<double> unit(0.0, 1.0);
  for (int w = 1; w < W; ++w) {
    double total = 0;
    for (Eigen::Index i = 0; i < n; ++i) total += static_cast<double>(d2(i));
    Eigen::Index pick = -1;
    if (total > 0) {
      double u = unit(rng) * total;
      double acc = 0;
      for (Eigen::Index i = 0; i < n; ++i) {
        acc += static_cast<double>(d2(i));
        if (u < acc) {
          pick = i;
          break;
        }
      }
      if (pick < 0) pick = n - 1;
    }
    if (pick < 0 || chosen[static_cast<std::size_t>(pick)]) {
      // Residual mass is zero (duplicate points): take the first free index.
      for (Eigen::Index i = 0; i < n; ++i)
        if (!chosen[static_cast<std::size_t>(i)]) {
          pick = i;
          break;
        }
    }
    chosen[static_cast<std::size_t>(pick)] = 1;
    centroids.row(w) = points.row(pick);
    for (Eigen::Index i = 0; i < n; ++i)
      d2(i) = std::min(d2(i), (points.row(i) - centroids.row(w)).squaredNorm());
  }
  return centroids;
}

// Nearest centroid in Euclidean distance, ties broken by lowest index.
template <typename T>
inline int nearest_centroid(const MatX<T>& centroids,
                            const Eigen::Ref<const Eigen::Matrix<T, 1, Eigen::Dynamic>>& point) {
  int best = 0;
  T best_d = (centroids.row(0) - point).squaredNorm();
  for (Eigen::Index k = 1; k < centroids.rows(); ++k) {
    T d = (centroids.row(k) - point).squaredNorm();
    if (d < best_d) {
      best_d = d;
      best = static_cast<int>(k);
    }
  }
  return best;
}

// ---------------------------------------------------------------------------
// RQ-VAE network: encoder MLP -> L latent codebooks -> mirror decoder.
// Codebooks live in the same flat ParamStore as the MLPs so the whole model
// is finite-difference checkable.

template <typename T>
struct RqvaeNet {
  int d_in = 0, d_z = 0, levels = 0, W = 0;
  Mlp<T> encoder, decoder;
  std::vector<int> cb_idx;  // codebook entries, one per level
  ParamStore<T> params;

  RqvaeNet(int d_in_, int d_z_, std::vector<int> hidden, int levels_, int W_,
           std::uint64_t seed)
      : d_in(d_in_), d_z(d_z_), levels(levels_), W(W_) {
    std::vector<int> enc_dims{d_in};
    enc_dims.insert(enc_dims.end(), hidden.begin(), hidden.end());
    enc_dims.push_back(d_z);
    std::vector<int> dec_dims(enc_dims.rbegin(), enc_dims.rend());
    encoder.register_params(params, "enc", enc_dims);
    decoder.register_params(params, "dec", dec_dims);
    for (int l = 0; l < levels; ++l)
      cb_idx.push_back(params.add("cb" + std::to_string(l), W, d_z,
                                  ParamKind::Weight));
    params.finalize();
    params.init(seed, 0.02, /*he_weights=*/true);
  }

  struct LossTerms {
    double recon = 0, codebook = 0, commitment = 0;
    double total() const { return recon + codebook + commitment; }
  };

  struct Trace {
    typename Mlp<T>::Trace enc_trace, dec_trace;
    MatX<T> z;                           // encoder output
    std::vector<MatX<T>> residuals;      // r_0 .. r_{L-1}
    std::vector<std::vector<int>> assign;  // per level, per row
    MatX<T> zq;                          // sum of chosen centroids
    MatX<T> xhat;
  };

  // Values captured at a base point so finite differences see the same
  // stop-gradient quantities the analytic backward uses.
  struct FrozenSt {
    std::vector<MatX<T>> residuals;
    std::vector<std::vector<int>> assign;
    std::vector<MatX<T>> cum_centroid;  // sum of chosen centroids through level l
    MatX<T> delta;                      // zq - z at the base point
  };

  LossTerms forward_loss(const MatX<T>& x, double beta, Trace* out) const {
    Trace local;
    Trace& tr = out ? *out : local;
    tr.z = encoder.forward(params, x, &tr.enc_trace);
    const Eigen::Index b = x.rows();
    const double inv_b = 1.0 / static_cast<double>(b);

    LossTerms terms;
    MatX<T> r = tr.z;
    tr.zq = MatX<T>::Zero(b, d_z);
    for (int l = 0; l < levels; ++l) {
      MatX<T> cb = params.mat(cb_idx[static_cast<std::size_t>(l)]);
      std::vector<int> a(static_cast<std::size_t>(b));
#pragma omp parallel for schedule(static)
      for (Eigen::Index i = 0; i < b; ++i)
        a[static_cast<std::size_t>(i)] = nearest_centroid<T>(cb, r.row(i));
      tr.residuals.push_back(r);
      MatX<T> c(b, d_z);
      for (Eigen::Index i = 0; i < b; ++i)
        c.row(i) = cb.row(a[static_cast<std::size_t>(i)]);
      terms.codebook += inv_b * (r - c).squaredNorm();
      terms.commitment += beta * inv_b * (r - c).squaredNorm();
      tr.zq += c;
      r -= c;
      tr.assign.push_back(std::move(a));
    }
    MatX<T> dec_in = tr.zq;  // value equals z + (zq - z); gradients use ST
    tr.xhat = decoder.forward(params, dec_in, &tr.dec_trace);
    terms.recon = inv_b * (x - tr.xhat).squaredNorm();
    return terms;
  }

  // Accumulates grads of (recon + codebook + beta*commit) into params.grad.
  void backward(const MatX<T>& x, double beta, const Trace& tr) {
    const Eigen::Index b = x.rows();
    const T inv_b = static_cast<T>(1.0 / static_cast<double>(b));

    MatX<T> d_xhat = T(2) * inv_b * (tr.xhat - x);
    MatX<T> d_zq = decoder.backward(params, tr.dec_trace, d_xhat);

    // Straight-through: decoder-input gradient flows to the encoder output.
    MatX<T> d_z = d_zq;
    for (int l = 0; l < levels; ++l) {
      const auto& r = tr.residuals[static_cast<std::size_t>(l)];
      const auto& a = tr.assign[static_cast<std::size_t>(l)];
      auto cb = params.mat(cb_idx[static_cast<std::size_t>(l)]);
      auto cb_grad = params.grad(cb_idx[static_cast<std::size_t>(l)]);
      for (Eigen::Index i = 0; i < b; ++i) {
        const int k = a[static_cast<std::size_t>(i)];
        auto diff = (cb.row(k) - r.row(i)).eval();
        cb_grad.row(k) += T(2) * inv_b * diff;        // codebook loss
        d_z.row(i) -= static_cast<T>(beta) * T(2) * inv_b * diff;  // commitment
      }
    }
    encoder.backward(params, tr.enc_trace, d_z);
  }

  FrozenSt freeze(const Trace& tr) const {
    FrozenSt f;
    f.residuals = tr.residuals;
    f.assign = tr.assign;
    MatX<T> cum = MatX<T>::Zero(tr.z.rows(), d_z);
    for (int l = 0; l < levels; ++l) {
      auto cb = params.mat(cb_idx[static_cast<std::size_t>(l)]);
      for (Eigen::Index i = 0; i < tr.z.rows(); ++i)
        cum.row(i) += cb.row(tr.assign[static_cast<std::size_t>(l)]
                                      [static_cast<std::size_t>(i)]);
      f.cum_centroid.push_back(cum);
    }
    f.delta = tr.zq - tr.z;
    return f;
  }

  // Loss with all stop-gradient values pinned at the base point; equals
  // forward_loss there and is the correct target for finite differences.
  double loss_frozen(const MatX<T>& x, double beta, const FrozenSt& f) const {
    MatX<T> z = encoder.forward(params, x, nullptr);
    const double inv_b = 1.0 / static_cast<double>(x.rows());
    double commit = 0, codebook = 0;
    for (int l = 0; l < levels; ++l) {
      commit += beta * inv_b *
                (z - f.cum_centroid[static_cast<std::size_t>(l)]).squaredNorm();
      auto cb = params.mat(cb_idx[static_cast<std::size_t>(l)]);
      const auto& r = f.residuals[static_cast<std::size_t>(l)];
      for (Eigen::Index i = 0; i < x.rows(); ++i)
        codebook += inv_b * (r.row(i) -
                             cb.row(f.assign[static_cast<std::size_t>(l)]
                                            [static_cast<std::size_t>(i)]))
                                .squaredNorm();
    }
    MatX<T> xhat = decoder.forward(params, MatX<T>(z + f.delta), nullptr);
    double recon = inv_b * (x - xhat).squaredNorm();
    return recon + codebook + commit;
  }
};

// ---------------------------------------------------------------------------

struct ResidualTokenizer {
  TokenizerConfig config;
  int input_dim = 0;
  std::vector<Codebook> codebooks;
  std::optional<WhiteningTransform> whitening;
  std::shared_ptr<RqvaeNet<float>> net;  // RQ-VAE only

  int code_dim() const {
    return config.algorithm == TokenizerAlgorithm::RQVAE ? config.latent_dim
                                                         : input_dim;
  }

  // Maps a raw embedding into the frame the level-0 codebook quantizes.
  VecF prepare(const VecF& embedding) const {
    if (static_cast<int>(embedding.size()) != input_dim)
      throw ValidationError("tokenize: embedding dimension " +
                            std::to_string(embedding.size()) + " != " +
                            std::to_string(input_dim));
    if (config.algorithm == TokenizerAlgorithm::RQVAE) {
      VecF x = embedding;
      if (whitening)
        x = whitening->apply(embedding.cast<double>()).cast<float>();
      MatF row(1, input_dim);
      row.row(0) = x.transpose();
      MatF z = net->encoder.forward(net->params, row, nullptr);
      return z.row(0).transpose();
    }
    VecF x = embedding;
    if (config.normalize_residuals) {
      float n = x.norm();
      if (n >= 1e-12f) x /= n;  // zero-norm guard skips normalization
    }
    return x;
  }

  std::vector<int> tokenize(const VecF& embedding) const {
    VecF r = prepare(embedding);
    std::vector<int> codes;
    codes.reserve(codebooks.size());
    Eigen::Matrix<float, 1, Eigen::Dynamic> row = r.transpose();
    for (const auto& cb : codebooks) {
      int a = nearest_centroid<float>(cb.centroids, row);
      codes.push_back(a);
      row -= cb.centroids.row(a);
    }
    return codes;
  }
};

// Tokenize every catalog row; rows are independent so this parallelizes.
inline MatX<int> tokenize_all(const ResidualTokenizer& t, const ItemCatalog& catalog) {
  MatX<int> codes(catalog.size(), static_cast<int>(t.codebooks.size()));
#pragma omp parallel for schedule(static)
  for (int i = 0; i < catalog.size(); ++i) {
    auto c = t.tokenize(catalog.embeddings.row(i).transpose());
    for (std::size_t l = 0; l < c.size(); ++l)
      codes(i, static_cast<Eigen::Index>(l)) = c[l];
  }
  return codes;
}

// ---------------------------------------------------------------------------
// Shared trainer plumbing.

namespace detail {

inline std::vector<int> sample_batch(int n, int batch, std::uint64_t seed,
                                     int level, int step) {
  std::vector<int> idx(static_cast<std::size_t>(n));
  std::iota(idx.begin(), idx.end(), 0);
  if (batch >= n) return idx;  // full batch, in order
  Rng rng = make_rng(seed, (std::uint64_t(level + 1) << 40) ^
                               std::uint64_t(step) ^ 0xBA7C4ull);
  for (int i = 0; i < batch; ++i) {
    std::uniform_int_distribution<int> pick(i, n - 1);
    std::swap(idx[static_cast<std::size_t>(i)],
              idx[static_cast<std::size_t>(pick(rng))]);
  }
  idx.resize(static_cast<std::size_t>(batch));
  return idx;
}

// Re-seed centroids unused for `dead_after` consecutive steps to the worst
// quantized batch points. Returns the re-seeded centroid indices.
inline std::vector<int> collect_dead(const std::vector<int>& streak, int dead_after) {
  std::vector<int> dead;
  for (std::size_t k = 0; k < streak.size(); ++k)
    if (streak[k] >= dead_after) dead.push_back(static_cast<int>(k));
  return dead;
}

inline std::vector<int> worst_points(const std::vector<float>& d2, int count) {
  std::vector<int> order(d2.size());
  std::iota(order.begin(), order.end(), 0);
  std::stable_sort(order.begin(), order.end(),
                   [&](int a, int b) { return d2[std::size_t(a)] > d2[std::size_t(b)]; });
  order.resize(std::min<std::size_t>(order.size(), std::size_t(count)));
  return order;
}

constexpr int kDeadAfterSteps = 100;

// Normalize rows in place (zero-norm rows are left untouched).
inline MatF normalized_rows(const MatF& x) {
  MatF out = x;
  for (Eigen::Index i = 0; i < out.rows(); ++i) {
    float n = out.row(i).norm();
    if (n >= 1e-12f) out.row(i) /= n;
  }
  return out;
}

}  // namespace detail

// ---------------------------------------------------------------------------
// RK-Means: per level, Sculley mini-batch k-means with per-centroid 1/count
// learning rates; levels trained strictly in order.

inline ResidualTokenizer train_rkmeans(const ItemCatalog& catalog,
                                       const TokenizerConfig& cfg) {
  cfg.validate();
  if (cfg.algorithm != TokenizerAlgorithm::RKMeans)
    throw ValidationError("train_rkmeans: config algorithm mismatch");
  const int n = catalog.size();
  const int W = cfg.codebook_size;
  if (n < W)
    throw ValidationError("train_rkmeans: fewer items than codebook size");

  ResidualTokenizer t;
  t.config = cfg;
  t.input_dim = catalog.dim();

  MatF residual = cfg.normalize_residuals
                      ? detail::normalized_rows(catalog.embeddings)
                      : catalog.embeddings;

  for (int level = 0; level < cfg.levels; ++level) {
    auto first_batch = detail::sample_batch(n, cfg.batch_size, cfg.seed, level, 0);
    MatF batch_pts(static_cast<Eigen::Index>(first_batch.size()), residual.cols());
    for (std::size_t i = 0; i < first_batch.size(); ++i)
      batch_pts.row(static_cast<Eigen::Index>(i)) = residual.row(first_batch[i]);
    MatF centroids = kmeanspp_init<float>(batch_pts, W, cfg.seed + std::uint64_t(level));

    std::vector<std::uint64_t> counts(static_cast<std::size_t>(W), 0);
    std::vector<int> unused_streak(static_cast<std::size_t>(W), 0);

    for (int step = 0; step < cfg.steps_per_level; ++step) {
      auto idx = detail::sample_batch(n, cfg.batch_size, cfg.seed, level, step);
      const int b = static_cast<int>(idx.size());
      std::vector<int> assign(static_cast<std::size_t>(b));
      std::vector<float> d2(static_cast<std::size_t>(b));
#pragma omp parallel for schedule(static)
      for (int i = 0; i < b; ++i) {
        int a = nearest_centroid<float>(centroids, residual.row(idx[std::size_t(i)]));
        assign[std::size_t(i)] = a;
        d2[std::size_t(i)] =
            (residual.row(idx[std::size_t(i)]) - centroids.row(a)).squaredNorm();
      }

      std::vector<char> used(static_cast<std::size_t>(W), 0);
      for (int i = 0; i < b; ++i) {
        const int a = assign[std::size_t(i)];
        used[std::size_t(a)] = 1;
        counts[std::size_t(a)] += 1;
        const float lr = 1.0f / static_cast<float>(counts[std::size_t(a)]);
        centroids.row(a) += lr * (residual.row(idx[std::size_t(i)]) - centroids.row(a));
      }

      for (int k = 0; k < W; ++k)
        unused_streak[std::size_t(k)] =
            used[std::size_t(k)] ? 0 : unused_streak[std::size_t(k)] + 1;
      auto dead = detail::collect_dead(unused_streak, detail::kDeadAfterSteps);
      if (!dead.empty()) {
        auto worst = detail::worst_points(d2, static_cast<int>(dead.size()));
        for (std::size_t j = 0; j < worst.size(); ++j) {
          const int k = dead[j];
          centroids.row(k) = residual.row(idx[std::size_t(worst[j])]);
          counts[std::size_t(k)] = 1;
          unused_streak[std::size_t(k)] = 0;
        }
      }
    }

    // Final full pass fixes usage counts and the next level's residuals.
    Codebook cb;
    cb.level = level;
    cb.centroids = centroids;
    cb.usage.assign(static_cast<std::size_t>(W), 0);
    std::vector<int> assign(static_cast<std::size_t>(n));
#pragma omp parallel for schedule(static)
    for (int i = 0; i < n; ++i)
      assign[std::size_t(i)] = nearest_centroid<float>(centroids, residual.row(i));
    for (int i = 0; i < n; ++i) {
      cb.usage[std::size_t(assign[std::size_t(i)])] += 1;
      residual.row(i) -= centroids.row(assign[std::size_t(i)]);
    }
    t.codebooks.push_back(std::move(cb));
  }
  return t;
}

// ---------------------------------------------------------------------------
// R-VQ: same layer-wise schedule, centroids updated by Adam on the batch
// quantization loss sum ||x - c_a||^2 with frozen nearest assignments.

inline ResidualTokenizer train_rvq(const ItemCatalog& catalog,
                                   const TokenizerConfig& cfg) {
  cfg.validate();
  if (cfg.algorithm != TokenizerAlgorithm::RVQ)
    throw ValidationError("train_rvq: config algorithm mismatch");
  const int n = catalog.size();
  const int W = cfg.codebook_size;
  if (n < W) throw ValidationError("train_rvq: fewer items than codebook size");

  ResidualTokenizer t;
  t.config = cfg;
  t.input_dim = catalog.dim();

  MatF residual = cfg.normalize_residuals
                      ? detail::normalized_rows(catalog.embeddings)
                      : catalog.embeddings;
  const Eigen::Index d = residual.cols();

  for (int level = 0; level < cfg.levels; ++level) {
    auto first_batch = detail::sample_batch(n, cfg.batch_size, cfg.seed, level, 0);
    MatF batch_pts(static_cast<Eigen::Index>(first_batch.size()), d);
    for (std::size_t i = 0; i < first_batch.size(); ++i)
      batch_pts.row(static_cast<Eigen::Index>(i)) = residual.row(first_batch[i]);
    MatF centroids = kmeanspp_init<float>(batch_pts, W, cfg.seed + std::uint64_t(level));

    AdamState<float> adam;
    adam.reset(static_cast<std::size_t>(W) * static_cast<std::size_t>(d));
    AdamConfig adam_cfg;
    adam_cfg.lr = cfg.learning_rate;
    MatF grad(W, d);
    std::vector<int> unused_streak(static_cast<std::size_t>(W), 0);

    for (int step = 0; step < cfg.steps_per_level; ++step) {
      auto idx = detail::sample_batch(n, cfg.batch_size, cfg.seed, level, step);
      const int b = static_cast<int>(idx.size());
      std::vector<int> assign(static_cast<std::size_t>(b));
      std::vector<float> d2(static_cast<std::size_t>(b));
#pragma omp parallel for schedule(static)
      for (int i = 0; i < b; ++i) {
        int a = nearest_centroid<float>(centroids, residual.row(idx[std::size_t(i)]));
        assign[std::size_t(i)] = a;
        d2[std::size_t(i)] =
            (residual.row(idx[std::size_t(i)]) - centroids.row(a)).squaredNorm();
      }

      grad.setZero();
      std::vector<char> used(static_cast<std::size_t>(W), 0);
      for (int i = 0; i < b; ++i) {
        const int a = assign[std::size_t(i)];
        used[std::size_t(a)] = 1;
        grad.row(a) += 2.0f * (centroids.row(a) - residual.row(idx[std::size_t(i)]));
      }
      adamw_step<float>({centroids.data(), std::size_t(centroids.size())},
                        {grad.data(), std::size_t(grad.size())}, adam, adam_cfg);

      for (int k = 0; k < W; ++k)
        unused_streak[std::size_t(k)] =
            used[std::size_t(k)] ? 0 : unused_streak[std::size_t(k)] + 1;
      auto dead = detail::collect_dead(unused_streak, detail::kDeadAfterSteps);
      if (!dead.empty()) {
        auto worst = detail::worst_points(d2, static_cast<int>(dead.size()));
        for (std::size_t j = 0; j < worst.size(); ++j) {
          const int k = dead[j];
          centroids.row(k) = residual.row(idx[std::size_t(worst[j])]);
          unused_streak[std::size_t(k)] = 0;
          for (Eigen::Index c = 0; c < d; ++c) {
            adam.m[std::size_t(k * d + c)] = 0.f;
            adam.v[std::size_t(k * d + c)] = 0.f;
          }
        }
      }
    }

    Codebook cb;
    cb.level = level;
    cb.centroids = centroids;
    cb.usage.assign(static_cast<std::size_t>(W), 0);
    std::vector<int> assign(static_cast<std::size_t>(n));
#pragma omp parallel for schedule(static)
    for (int i = 0; i < n; ++i)
      assign[std::size_t(i)] = nearest_centroid<float>(centroids, residual.row(i));
    for (int i = 0; i < n; ++i) {
      cb.usage[std::size_t(assign[std::size_t(i)])] += 1;
      residual.row(i) -= centroids.row(assign[std::size_t(i)]);
    }
    t.codebooks.push_back(std::move(cb));
  }
  return t;
}

// ---------------------------------------------------------------------------
// RQ-VAE: joint Adagrad training of the autoencoder and latent codebooks.

inline ResidualTokenizer train_rqvae(
    const ItemCatalog& catalog, const TokenizerConfig& cfg,
    std::optional<WhiteningTransform> whitening = std::nullopt) {
  cfg.validate();
  if (cfg.algorithm != TokenizerAlgorithm::RQVAE)
    throw ValidationError("train_rqvae: config algorithm mismatch");
  const int n = catalog.size();
  const int W = cfg.codebook_size;
  if (n < W) throw ValidationError("train_rqvae: fewer items than codebook size");

  ResidualTokenizer t;
  t.config = cfg;
  t.input_dim = catalog.dim();

  MatF data = catalog.embeddings;
  if (cfg.whiten_input) {
    if (!whitening) whitening = fit_whitening(catalog);
    data = apply_whitening(*whitening, catalog).embeddings;
    t.whitening = whitening;
  }

  auto net = std::make_shared<RqvaeNet<float>>(t.input_dim, cfg.latent_dim,
                                               cfg.enc_hidden, cfg.levels, W,
                                               cfg.seed);

  auto gather = [&](const std::vector<int>& idx) {
    MatF x(static_cast<Eigen::Index>(idx.size()), data.cols());
    for (std::size_t i = 0; i < idx.size(); ++i)
      x.row(static_cast<Eigen::Index>(i)) = data.row(idx[i]);
    return x;
  };

  // Codebooks seeded by k-means++ on the first batch's residual cascade.
  {
    auto idx = detail::sample_batch(n, cfg.batch_size, cfg.seed, 0, 0);
    if (static_cast<int>(idx.size()) < W)
      throw ValidationError("train_rqvae: first batch smaller than W");
    MatF x = gather(idx);
    MatF r = net->encoder.forward(net->params, x, nullptr);
    for (int l = 0; l < cfg.levels; ++l) {
      MatF seeds = kmeanspp_init<float>(r, W, cfg.seed + std::uint64_t(l) + 17);
      net->params.mat(net->cb_idx[std::size_t(l)]) = seeds;
      for (Eigen::Index i = 0; i < r.rows(); ++i) {
        int a = nearest_centroid<float>(seeds, r.row(i));
        r.row(i) -= seeds.row(a);
      }
    }
  }

  AdagradState<float> opt;
  opt.reset(net->params.size());
  std::vector<std::vector<int>> unused_streak(
      static_cast<std::size_t>(cfg.levels),
      std::vector<int>(static_cast<std::size_t>(W), 0));

  for (int step = 0; step < cfg.total_steps; ++step) {
    auto idx = detail::sample_batch(n, cfg.batch_size, cfg.seed, 0, step);
    MatF x = gather(idx);
    typename RqvaeNet<float>::Trace tr;
    auto terms = net->forward_loss(x, cfg.commitment_beta, &tr);
    if (!std::isfinite(terms.total()))
      throw TrainingError("train_rqvae: non-finite loss at step " +
                          std::to_string(step));
    net->params.zero_grad();
    net->backward(x, cfg.commitment_beta, tr);
    adagrad_step<float>({net->params.data().data(), net->params.size()},
                        {net->params.grad_data().data(), net->params.size()},
                        opt, cfg.learning_rate);

    for (int l = 0; l < cfg.levels; ++l) {
      std::vector<char> used(static_cast<std::size_t>(W), 0);
      std::vector<float> d2(tr.assign[std::size_t(l)].size(), 0.f);
      auto cb = net->params.mat(net->cb_idx[std::size_t(l)]);
      const auto& r = tr.residuals[std::size_t(l)];
      for (std::size_t i = 0; i < tr.assign[std::size_t(l)].size(); ++i) {
        int a = tr.assign[std::size_t(l)][i];
        used[std::size_t(a)] = 1;
        d2[i] = (r.row(static_cast<Eigen::Index>(i)) - cb.row(a)).squaredNorm();
      }
      auto& streak = unused_streak[std::size_t(l)];
      for (int k = 0; k < W; ++k)
        streak[std::size_t(k)] = used[std::size_t(k)] ? 0 : streak[std::size_t(k)] + 1;
      auto dead = detail::collect_dead(streak, detail::kDeadAfterSteps);
      if (!dead.empty()) {
        auto worst = detail::worst_points(d2, static_cast<int>(dead.size()));
        const auto& entry = net->params.entries()[std::size_t(net->cb_idx[std::size_t(l)])];
        for (std::size_t j = 0; j < worst.size(); ++j) {
          const int k = dead[j];
          cb.row(k) = r.row(worst[j]);
          streak[std::size_t(k)] = 0;
          for (Eigen::Index c = 0; c < cb.cols(); ++c)
            opt.g2[entry.offset + std::size_t(k) * std::size_t(cb.cols()) +
                   std::size_t(c)] = 0.f;
        }
      }
    }
  }

  t.net = net;
  for (int l = 0; l < cfg.levels; ++l) {
    Codebook cb;
    cb.level = l;
    cb.centroids = net->params.mat(net->cb_idx[std::size_t(l)]);
    cb.usage.assign(static_cast<std::size_t>(W), 0);
    t.codebooks.push_back(std::move(cb));
  }
  // Usage from a full catalog pass with the trained model.
  MatX<int> codes = tokenize_all(t, catalog);
  for (Eigen::Index i = 0; i < codes.rows(); ++i)
    for (int l = 0; l < cfg.levels; ++l)
      t.codebooks[std::size_t(l)].usage[std::size_t(codes(i, l))] += 1;
  return t;
}

inline ResidualTokenizer train_tokenizer(const ItemCatalog& catalog,
                                         const TokenizerConfig& cfg) {
  switch (cfg.algorithm) {
    case TokenizerAlgorithm::RKMeans: return train_rkmeans(catalog, cfg);
    case TokenizerAlgorithm::RVQ: return train_rvq(catalog, cfg);
    case TokenizerAlgorithm::RQVAE: return train_rqvae(catalog, cfg);
  }
  throw ValidationError("train_tokenizer: unknown algorithm");
}

// ---------------------------------------------------------------------------
// SID assignment with collision handling.

struct SIDTable {
  DedupStrategy strategy = DedupStrategy::AppendDigit;
  int levels = 0;      // base levels L
  int W = 0;
  int dedup_card = 0;  // D; 0 for RANDOM_SELECT
  std::vector<std::string> item_order;
  std::unordered_map<std::string, std::vector<int>> forward;
  std::map<std::vector<int>, std::string> reverse;   // decodable SIDs only
  std::map<int, long long> collision_histogram;      // group size -> #raw SIDs
  double collision_rate = 0.0;

  int l_tok() const { return levels + (dedup_card > 0 ? 1 : 0); }

  const std::vector<int>& sid_of(const std::string& item) const {
    auto it = forward.find(item);
    if (it == forward.end())
      throw ValidationError("sid lookup: unknown item " + item);
    return it->second;
  }
};

inline std::string sid_to_string(const std::vector<int>& sid) {
  std::ostringstream os;
  os << "[";
  for (std::size_t i = 0; i < sid.size(); ++i)
    os << (i ? "," : "") << sid[i];
  os << "]";
  return os.str();
}

inline SIDTable assign_sids(const ResidualTokenizer& t, const ItemCatalog& catalog,
                            DedupStrategy strategy, std::uint64_t seed,
                            int dedup_budget = 0) {
  if (t.codebooks.empty()) throw ValidationError("assign_sids: untrained tokenizer");
  SIDTable table;
  table.strategy = strategy;
  table.levels = t.config.levels;
  table.W = t.config.codebook_size;
  table.item_order = catalog.ids;

  MatX<int> codes = tokenize_all(t, catalog);
  std::map<std::vector<int>, std::vector<int>> groups;  // raw SID -> item rows
  for (int i = 0; i < catalog.size(); ++i) {
    std::vector<int> raw(static_cast<std::size_t>(codes.cols()));
    for (Eigen::Index l = 0; l < codes.cols(); ++l)
      raw[static_cast<std::size_t>(l)] = codes(i, l);
    groups[raw].push_back(i);  // catalog order within each group
  }

  std::size_t max_group = 0;
  for (const auto& [raw, members] : groups) {
    max_group = std::max(max_group, members.size());
    table.collision_histogram[static_cast<int>(members.size())] += 1;
  }
  table.collision_rate =
      catalog.size() == 0
          ? 0.0
          : 1.0 - static_cast<double>(groups.size()) / catalog.size();

  if (strategy == DedupStrategy::AppendDigit) {
    if (dedup_budget > 0) {
      for (const auto& [raw, members] : groups)
        if (members.size() > static_cast<std::size_t>(dedup_budget))
          throw ValidationError("dedup capacity exceeded for SID " +
                                sid_to_string(raw) + ": group size " +
                                std::to_string(members.size()) + " > budget " +
                                std::to_string(dedup_budget));
      table.dedup_card = dedup_budget;
    } else {
      // Budget: max observed group size, next power of two, at least 16.
      std::size_t d = 16;
      while (d < max_group) d <<= 1;
      table.dedup_card = static_cast<int>(d);
    }
    for (const auto& [raw, members] : groups) {
      for (std::size_t j = 0; j < members.size(); ++j) {
        std::vector<int> full = raw;
        full.push_back(static_cast<int>(j));
        table.forward[catalog.ids[std::size_t(members[j])]] = full;
        table.reverse[full] = catalog.ids[std::size_t(members[j])];
      }
    }
  } else {
    table.dedup_card = 0;
    Rng rng = make_rng(seed, 0x5e1ec7);
    for (const auto& [raw, members] : groups) {
      std::size_t pick = 0;
      if (members.size() > 1) {
        std::uniform_int_distribution<std::size_t> uni(0, members.size() - 1);
        pick = uni(rng);
      }
      for (int row : members)
        table.forward[catalog.ids[std::size_t(row)]] = raw;
      table.reverse[raw] = catalog.ids[std::size_t(members[pick])];
    }
  }
  return table;
}

inline void save_sid_table(const SIDTable& table, const std::string& path) {
  std::ostringstream out;
  for (const auto& item : table.item_order) {
    nlohmann::json j;
    j["item"] = item;
    j["sid"] = table.sid_of(item);
    out << j.dump() << "\n";
  }
  write_text_file(path, out.str());
}

// ---------------------------------------------------------------------------
// Quantization diagnostics.

struct QuantizationReport {
  struct Level {
    double rmse = 0;
    std::vector<std::uint64_t> usage;
    double perplexity = 0;
    int dead_codes = 0;
  };
  std::vector<Level> levels;
  double collision_rate = 0;
};

inline QuantizationReport quantization_report(const ResidualTokenizer& t,
                                              const ItemCatalog& catalog) {
  if (t.codebooks.empty())
    throw ValidationError("quantization_report: untrained tokenizer");
  const int n = catalog.size();
  const int L = static_cast<int>(t.codebooks.size());
  QuantizationReport report;
  report.levels.resize(static_cast<std::size_t>(L));
  for (auto& lv : report.levels)
    lv.usage.assign(static_cast<std::size_t>(t.config.codebook_size), 0);

  std::vector<double> sq_err(static_cast<std::size_t>(L), 0.0);
  std::map<std::vector<int>, int> raw_counts;
  for (int i = 0; i < n; ++i) {
    VecF r = t.prepare(catalog.embeddings.row(i).transpose());
    Eigen::Matrix<float, 1, Eigen::Dynamic> row = r.transpose();
    std::vector<int> raw;
    for (int l = 0; l < L; ++l) {
      const auto& cb = t.codebooks[std::size_t(l)];
      int a = nearest_centroid<float>(cb.centroids, row);
      row -= cb.centroids.row(a);
      sq_err[std::size_t(l)] += static_cast<double>(row.squaredNorm());
      report.levels[std::size_t(l)].usage[std::size_t(a)] += 1;
      raw.push_back(a);
    }
    raw_counts[raw] += 1;
  }

  for (int l = 0; l < L; ++l) {
    auto& lv = report.levels[std::size_t(l)];
    lv.rmse = n > 0 ? std::sqrt(sq_err[std::size_t(l)] / n) : 0.0;
    double entropy = 0;
    for (auto u : lv.usage) {
      if (u == 0) {
        ++lv.dead_codes;
        continue;
      }
      double p = static_cast<double>(u) / n;
      entropy -= p * std::log(p);
    }
    lv.perplexity = std::exp(entropy);
  }
  report.collision_rate =
      n == 0 ? 0.0 : 1.0 - static_cast<double>(raw_counts.size()) / n;
  return report;
}

// ---------------------------------------------------------------------------
// Checkpoint: versioned binary blob; float payloads round-trip bit-exactly.

inline constexpr char kTokenizerMagic[4] = {'S', 'I', 'D', 'T'};

inline void save_tokenizer(const ResidualTokenizer& t, const std::string& path) {
  BinaryWriter w(path);
  w.put_bytes(kTokenizerMagic, 4);
  w.put<std::uint32_t>(1);
  w.put<std::uint32_t>(static_cast<std::uint32_t>(t.config.algorithm));
  w.put<std::uint32_t>(static_cast<std::uint32_t>(t.config.levels));
  w.put<std::uint32_t>(static_cast<std::uint32_t>(t.config.codebook_size));
  w.put<std::uint32_t>(static_cast<std::uint32_t>(t.config.steps_per_level));
  w.put<std::uint32_t>(static_cast<std::uint32_t>(t.config.total_steps));
  w.put<std::uint32_t>(static_cast<std::uint32_t>(t.config.batch_size));
  w.put<float>(t.config.learning_rate);
  w.put<std::uint64_t>(t.config.seed);
  w.put<std::uint8_t>(t.config.normalize_residuals ? 1 : 0);
  w.put<std::uint8_t>(t.config.whiten_input ? 1 : 0);
  w.put<float>(t.config.commitment_beta);
  w.put<std::uint32_t>(static_cast<std::uint32_t>(t.config.latent_dim));
  w.put<std::uint32_t>(static_cast<std::uint32_t>(t.config.enc_hidden.size()));
  for (int h : t.config.enc_hidden) w.put<std::uint32_t>(std::uint32_t(h));
  w.put<std::uint32_t>(static_cast<std::uint32_t>(t.input_dim));

  w.put<std::uint8_t>(t.whitening ? 1 : 0);
  if (t.whitening) {
    const auto& wt = *t.whitening;
    w.put<std::uint32_t>(static_cast<std::uint32_t>(wt.dim()));
    w.put<double>(wt.eps);
    w.put_bytes(wt.mean.data(), sizeof(double) * std::size_t(wt.mean.size()));
    w.put_bytes(wt.rotation.data(), sizeof(double) * std::size_t(wt.rotation.size()));
    w.put_bytes(wt.scale.data(), sizeof(double) * std::size_t(wt.scale.size()));
  }

  w.put<std::uint8_t>(t.net ? 1 : 0);
  if (t.net) {
    w.put<std::uint64_t>(t.net->params.size());
    w.put_bytes(t.net->params.data().data(), sizeof(float) * t.net->params.size());
  }

  w.put<std::uint32_t>(static_cast<std::uint32_t>(t.codebooks.size()));
  for (const auto& cb : t.codebooks) {
    w.put<std::uint32_t>(static_cast<std::uint32_t>(cb.centroids.rows()));
    w.put<std::uint32_t>(static_cast<std::uint32_t>(cb.centroids.cols()));
    w.put_matrix(cb.centroids);
    w.put_bytes(cb.usage.data(), sizeof(std::uint64_t) * cb.usage.size());
  }
  w.close();
}

inline ResidualTokenizer load_tokenizer(const std::string& path) {
  BinaryReader r(path);
  char magic[4];
  r.read_bytes(magic, 4);
  if (std::memcmp(magic, kTokenizerMagic, 4) != 0)
    throw FormatError("bad magic in " + path + " (expected SIDT)");
  if (r.get<std::uint32_t>() != 1)
    throw FormatError("unsupported tokenizer checkpoint version");

  ResidualTokenizer t;
  t.config.algorithm = static_cast<TokenizerAlgorithm>(r.get<std::uint32_t>());
  t.config.levels = static_cast<int>(r.get<std::uint32_t>());
  t.config.codebook_size = static_cast<int>(r.get<std::uint32_t>());
  t.config.steps_per_level = static_cast<int>(r.get<std::uint32_t>());
  t.config.total_steps = static_cast<int>(r.get<std::uint32_t>());
  t.config.batch_size = static_cast<int>(r.get<std::uint32_t>());
  t.config.learning_rate = r.get<float>();
  t.config.seed = r.get<std::uint64_t>();
  t.config.normalize_residuals = r.get<std::uint8_t>() != 0;
  t.config.whiten_input = r.get<std::uint8_t>() != 0;
  t.config.commitment_beta = r.get<float>();
  t.config.latent_dim = static_cast<int>(r.get<std::uint32_t>());
  t.config.enc_hidden.resize(r.get<std::uint32_t>());
  for (auto& h : t.config.enc_hidden) h = static_cast<int>(r.get<std::uint32_t>());
  t.input_dim = static_cast<int>(r.get<std::uint32_t>());

  if (r.get<std::uint8_t>()) {
    WhiteningTransform wt;
    auto d = static_cast<Eigen::Index>(r.get<std::uint32_t>());
    wt.eps = r.get<double>();
    wt.mean = VecD(d);
    r.read_bytes(wt.mean.data(), sizeof(double) * std::size_t(d));
    wt.rotation = MatD(d, d);
    r.read_bytes(wt.rotation.data(), sizeof(double) * std::size_t(d * d));
    wt.scale = VecD(d);
    r.read_bytes(wt.scale.data(), sizeof(double) * std::size_t(d));
    t.whitening = std::move(wt);
  }

  if (r.get<std::uint8_t>()) {
    auto net = std::make_shared<RqvaeNet<float>>(
        t.input_dim, t.config.latent_dim, t.config.enc_hidden, t.config.levels,
        t.config.codebook_size, t.config.seed);
    auto count = r.get<std::uint64_t>();
    if (count != net->params.size())
      throw FormatError("tokenizer checkpoint: parameter count mismatch");
    r.read_bytes(net->params.data().data(), sizeof(float) * count);
    t.net = std::move(net);
  }

  auto n_cb = r.get<std::uint32_t>();
  for (std::uint32_t i = 0; i < n_cb; ++i) {
    Codebook cb;
    cb.level = static_cast<int>(i);
    auto rows = static_cast<Eigen::Index>(r.get<std::uint32_t>());
    auto cols = static_cast<Eigen::Index>(r.get<std::uint32_t>());
    cb.centroids = r.get_matrix<float>(rows, cols);
    cb.usage.resize(std::size_t(rows));
    r.read_bytes(cb.usage.data(), sizeof(std::uint64_t) * cb.usage.size());
    t.codebooks.push_back(std::move(cb));
  }
  return t;
}

}  // namespace sidkit
