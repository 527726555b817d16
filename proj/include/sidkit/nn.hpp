#pragma once

// Flat parameter storage plus the optimizer and MLP building blocks shared
// by the RQ-VAE tokenizer and the sequence model. Numeric code is templated
// on the scalar so gradient checks can run in double while training stays
// in float32.

#include <sidkit/common.hpp>

#include <cmath>
#include <functional>
#include <span>
#include <string>
#include <vector>

namespace sidkit {

enum class ParamKind { Weight, Bias, LnGain, LnBias, Embedding };

template <typename T>
class ParamStore {
 public:
  struct Entry {
    std::string name;
    std::size_t offset;
    Eigen::Index rows, cols;
    ParamKind kind;
  };

  int add(std::string name, Eigen::Index rows, Eigen::Index cols, ParamKind kind) {
    Entry e{std::move(name), data_.size(), rows, cols, kind};
    data_.resize(data_.size() + static_cast<std::size_t>(rows * cols), T(0));
    entries_.push_back(std::move(e));
    return static_cast<int>(entries_.size()) - 1;
  }

  void finalize() { grad_.assign(data_.size(), T(0)); }

  Eigen::Map<MatX<T>> mat(int idx) {
    const Entry& e = entries_[static_cast<std::size_t>(idx)];
    return {data_.data() + e.offset, e.rows, e.cols};
  }
  Eigen::Map<const MatX<T>> mat(int idx) const {
    const Entry& e = entries_[static_cast<std::size_t>(idx)];
    return {data_.data() + e.offset, e.rows, e.cols};
  }
  Eigen::Map<const MatX<T>> cmat(int idx) const {
    const Entry& e = entries_[static_cast<std::size_t>(idx)];
    return {data_.data() + e.offset, e.rows, e.cols};
  }
  Eigen::Map<MatX<T>> grad(int idx) {
    const Entry& e = entries_[static_cast<std::size_t>(idx)];
    return {grad_.data() + e.offset, e.rows, e.cols};
  }

  void zero_grad() { std::fill(grad_.begin(), grad_.end(), T(0)); }

  std::size_t size() const { return data_.size(); }
  AlignedVec<T>& data() { return data_; }
  const AlignedVec<T>& data() const { return data_; }
  AlignedVec<T>& grad_data() { return grad_; }
  const AlignedVec<T>& grad_data() const { return grad_; }
  const std::vector<Entry>& entries() const { return entries_; }

  // Truncated normal (resample beyond 2 sigma) for weights and embeddings,
  // ones for layer-norm gains, zeros elsewhere. Single pass in registration
  // order keeps initialization deterministic under the seed. `he_weights`
  // swaps the fixed sigma for sqrt(2/fan_in) on Weight entries.
  void init(std::uint64_t seed, double sigma = 0.02, bool he_weights = false) {
    Rng rng = make_rng(seed, 0xC0DE);
    for (const Entry& e : entries_) {
      T* p = data_.data() + e.offset;
      const std::size_t n = static_cast<std::size_t>(e.rows * e.cols);
      switch (e.kind) {
        case ParamKind::Weight:
        case ParamKind::Embedding: {
          double s = sigma;
          if (he_weights && e.kind == ParamKind::Weight)
            s = std::sqrt(2.0 / static_cast<double>(e.rows));
          std::normal_distribution<double> gauss(0.0, s);
          for (std::size_t i = 0; i < n; ++i) {
            double v;
            do {
              v = gauss(rng);
            } while (std::abs(v) > 2.0 * s);
            p[i] = static_cast<T>(v);
          }
          break;
        }
        case ParamKind::LnGain:
          std::fill(p, p + n, T(1));
          break;
        case ParamKind::Bias:
        case ParamKind::LnBias:
          std::fill(p, p + n, T(0));
          break;
      }
    }
  }

 private:
  AlignedVec<T> data_, grad_;
  std::vector<Entry> entries_;
};

// ---------------------------------------------------------------------------
// Optimizers over flat arrays.

template <typename T>
struct AdamState {
  AlignedVec<T> m, v;
  long long t = 0;

  void reset(std::size_t n) {
    m.assign(n, T(0));
    v.assign(n, T(0));
    t = 0;
  }
};

struct AdamConfig {
  double lr = 1e-3;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;
  double weight_decay = 0.0;  // decoupled, applied before the Adam delta
};

template <typename T>
inline void adamw_step(std::span<T> params, std::span<const T> grads,
                       AdamState<T>& state, const AdamConfig& cfg) {
  if (params.size() != grads.size() || params.size() != state.m.size())
    throw ContractViolation("adamw_step: shape mismatch");
  for (const T& g : grads)
    if (!std::isfinite(static_cast<double>(g)))
      throw NumericError("adamw_step: non-finite gradient");

  state.t += 1;
  const double bc1 = 1.0 - std::pow(cfg.beta1, double(state.t));
  const double bc2 = 1.0 - std::pow(cfg.beta2, double(state.t));
  for (std::size_t i = 0; i < params.size(); ++i) {
    const double g = static_cast<double>(grads[i]);
    if (cfg.weight_decay != 0.0)
      params[i] -= static_cast<T>(cfg.lr * cfg.weight_decay *
                                  static_cast<double>(params[i]));
    double m = cfg.beta1 * static_cast<double>(state.m[i]) + (1 - cfg.beta1) * g;
    double v = cfg.beta2 * static_cast<double>(state.v[i]) + (1 - cfg.beta2) * g * g;
    state.m[i] = static_cast<T>(m);
    state.v[i] = static_cast<T>(v);
    params[i] -= static_cast<T>(cfg.lr * (m / bc1) / (std::sqrt(v / bc2) + cfg.eps));
  }
}

template <typename T>
struct AdagradState {
  AlignedVec<T> g2;
  void reset(std::size_t n) { g2.assign(n, T(0)); }
};

template <typename T>
inline void adagrad_step(std::span<T> params, std::span<const T> grads,
                         AdagradState<T>& state, double lr, double eps = 1e-10) {
  if (params.size() != grads.size() || params.size() != state.g2.size())
    throw ContractViolation("adagrad_step: shape mismatch");
  for (std::size_t i = 0; i < params.size(); ++i) {
    const double g = static_cast<double>(grads[i]);
    if (!std::isfinite(g)) throw NumericError("adagrad_step: non-finite gradient");
    double acc = static_cast<double>(state.g2[i]) + g * g;
    state.g2[i] = static_cast<T>(acc);
    params[i] -= static_cast<T>(lr * g / (std::sqrt(acc) + eps));
  }
}

// ---------------------------------------------------------------------------
// Plain feed-forward stack with ReLU between layers (none after the last).
// Parameters live in a caller-owned ParamStore as consecutive (W, b) pairs.

template <typename T>
struct Mlp {
  std::vector<int> dims;  // [in, hidden..., out]
  std::vector<int> w_idx, b_idx;

  void register_params(ParamStore<T>& store, const std::string& prefix,
                       std::vector<int> layer_dims) {
    dims = std::move(layer_dims);
    for (std::size_t i = 0; i + 1 < dims.size(); ++i) {
      w_idx.push_back(store.add(prefix + ".w" + std::to_string(i), dims[i],
                                dims[i + 1], ParamKind::Weight));
      b_idx.push_back(store.add(prefix + ".b" + std::to_string(i), 1,
                                dims[i + 1], ParamKind::Bias));
    }
  }

  struct Trace {
    std::vector<MatX<T>> inputs;  // A_i fed to layer i
    std::vector<MatX<T>> preact;  // Z_i
  };

  MatX<T> forward(const ParamStore<T>& store, const MatX<T>& x,
                  Trace* trace = nullptr) const {
    MatX<T> a = x;
    for (std::size_t i = 0; i < w_idx.size(); ++i) {
      if (trace) trace->inputs.push_back(a);
      MatX<T> z = a * store.mat(w_idx[i]);
      z.array().rowwise() += store.mat(b_idx[i]).row(0).array();
      if (trace) trace->preact.push_back(z);
      if (i + 1 < w_idx.size())
        a = z.array().max(T(0)).matrix();
      else
        a = std::move(z);
    }
    return a;
  }

  // Accumulates parameter grads into the store; returns d(loss)/d(input).
  MatX<T> backward(ParamStore<T>& store, const Trace& trace,
                   const MatX<T>& d_out) const {
    MatX<T> da = d_out;
    for (int i = static_cast<int>(w_idx.size()) - 1; i >= 0; --i) {
      MatX<T> dz;
      if (i + 1 < static_cast<int>(w_idx.size()))
        dz = da.array() *
             (trace.preact[static_cast<std::size_t>(i)].array() > T(0)).template cast<T>();
      else
        dz = std::move(da);
      store.grad(w_idx[static_cast<std::size_t>(i)]).noalias() +=
          trace.inputs[static_cast<std::size_t>(i)].transpose() * dz;
      store.grad(b_idx[static_cast<std::size_t>(i)]).row(0).noalias() +=
          dz.colwise().sum();
      da.noalias() = dz * store.mat(w_idx[static_cast<std::size_t>(i)]).transpose();
    }
    return da;
  }
};

// ---------------------------------------------------------------------------
// Central-difference probe over a flat parameter vector. `loss` must
// re-evaluate the objective at the current parameter values. Uses the
// fourth-order central stencil at step h: the layer-norm chains in these
// models carry third derivatives large enough that the plain two-point
// stencil's O(h^2) truncation alone would breach a 1e-3 relative tolerance
// on perfectly correct gradients.

template <typename T>
inline double finite_diff_max_rel_error(AlignedVec<T>& params,
                                        const AlignedVec<T>& analytic_grad,
                                        const std::function<double()>& loss,
                                        int probes, double h, std::uint64_t seed) {
  if (probes <= 0)
    throw ContractViolation("finite_diff_max_rel_error: probes must be >= 1");
  if (params.empty()) throw ContractViolation("finite_diff_max_rel_error: no params");
  Rng rng = make_rng(seed, 0xFD);
  std::uniform_int_distribution<std::size_t> pick(0, params.size() - 1);
  double worst = 0.0;
  for (int p = 0; p < probes; ++p) {
    const std::size_t i = pick(rng);
    const T saved = params[i];
    auto eval_at = [&](double offset) {
      params[i] = saved + static_cast<T>(offset);
      double v = loss();
      params[i] = saved;
      return v;
    };
    const double f_p2 = eval_at(2 * h);
    const double f_p1 = eval_at(h);
    const double f_m1 = eval_at(-h);
    const double f_m2 = eval_at(-2 * h);
    const double fd = (-f_p2 + 8 * f_p1 - 8 * f_m1 + f_m2) / (12.0 * h);
    const double g = static_cast<double>(analytic_grad[i]);
    const double rel =
        std::abs(fd - g) / std::max({std::abs(fd), std::abs(g), 1e-8});
    worst = std::max(worst, rel);
  }
  return worst;
}

}  // namespace sidkit
