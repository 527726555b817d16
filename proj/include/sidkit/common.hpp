#pragma once

// Shared scaffolding: error taxonomy, matrix aliases, seeded RNG helpers,
// portable hashing, and the process-wide thread cap (SIDKIT_THREADS).

#include <Eigen/Dense>

#include <bit>
#include <cstdint>
#include <cstdlib>
#include <random>
#include <stdexcept>
#include <string>
#include <string_view>
#include <thread>
#include <vector>

#ifdef _OPENMP
#include <omp.h>
#endif

static_assert(std::endian::native == std::endian::little,
              "sidkit file formats assume a little-endian host");

namespace sidkit {

template <typename T>
using MatX = Eigen::Matrix<T, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
template <typename T>
using VecX = Eigen::Matrix<T, Eigen::Dynamic, 1>;

// Flat buffers that back Eigen Maps must be max-aligned: with AVX-512 the
// kernels peel unaligned heads, so a malloc-dependent base address would
// change float summation order between otherwise identical runs.
template <typename T>
using AlignedVec = std::vector<T, Eigen::aligned_allocator<T>>;

using MatF = MatX<float>;
using VecF = VecX<float>;
using MatD = MatX<double>;
using VecD = VecX<double>;

// Exit-code contract: usage/config/IO errors -> 2, runtime/numeric -> 1.
struct FormatError : std::runtime_error {
  using std::runtime_error::runtime_error;
};
struct ValidationError : std::runtime_error {
  using std::runtime_error::runtime_error;
};
struct ParseError : std::runtime_error {
  using std::runtime_error::runtime_error;
};
struct ConfigError : std::runtime_error {
  using std::runtime_error::runtime_error;
};
struct IoError : std::runtime_error {
  using std::runtime_error::runtime_error;
};
struct NumericError : std::runtime_error {
  using std::runtime_error::runtime_error;
};
struct TrainingError : std::runtime_error {
  using std::runtime_error::runtime_error;
};
// Broken internal precondition (caller bug), not bad user input.
struct ContractViolation : std::logic_error {
  using std::logic_error::logic_error;
};

// 64-bit FNV-1a over UTF-8 bytes. Fixed here so user-token assignment and
// artifact fingerprints are stable across processes and platforms.
inline std::uint64_t fnv1a64(std::string_view bytes) {
  std::uint64_t h = 1469598103934665603ull;
  for (unsigned char c : bytes) {
    h ^= c;
    h *= 1099511628211ull;
  }
  return h;
}

inline std::uint64_t splitmix64(std::uint64_t x) {
  x += 0x9e3779b97f4a7c15ull;
  x = (x ^ (x >> 30)) * 0xbf58476d1ce4e5b9ull;
  x = (x ^ (x >> 27)) * 0x94d049bb133111ebull;
  return x ^ (x >> 31);
}

using Rng = std::mt19937_64;

inline Rng make_rng(std::uint64_t seed, std::uint64_t stream = 0) {
  return Rng(splitmix64(seed ^ splitmix64(stream + 0x51d1ull)));
}

// Thread cap: SIDKIT_THREADS, default all cores. Set 1 for bit-reproducible
// runs. Applied to both Eigen's GEMM pool and our own omp loops.
inline int thread_count() {
  static const int n = [] {
    if (const char* env = std::getenv("SIDKIT_THREADS")) {
      int v = std::atoi(env);
      if (v >= 1) return v;
    }
    unsigned hw = std::thread::hardware_concurrency();
    return hw ? static_cast<int>(hw) : 1;
  }();
  return n;
}

inline void init_threads() {
  Eigen::setNbThreads(thread_count());
#ifdef _OPENMP
  omp_set_num_threads(thread_count());
#endif
}

}  // namespace sidkit
