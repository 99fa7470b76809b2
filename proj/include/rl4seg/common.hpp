#pragma once

#include <chrono>
#include <cstdint>
#include <functional>
#include <random>
#include <stdexcept>
#include <string>
#include <thread>
#include <vector>

namespace rl4seg {

#ifdef RL4SEG_REAL_FLOAT32
using real = float;
#else
using real = double;
#endif

// Thrown for contract violations (bad shapes, invalid configs, missing files).
class Error : public std::runtime_error {
 public:
  explicit Error(const std::string& what) : std::runtime_error(what) {}
};

inline void require(bool cond, const std::string& msg) {
  if (!cond) throw Error(msg);
}

inline uint64_t splitmix64(uint64_t x) {
  x += 0x9e3779b97f4a7c15ULL;
  x = (x ^ (x >> 30)) * 0xbf58476d1ce4e5b9ULL;
  x = (x ^ (x >> 27)) * 0x94d049bb133111ebULL;
  return x ^ (x >> 31);
}

// Independent RNG stream keyed by (seed, purpose tag, index). Every stochastic
// step in the pipeline derives its stream this way, so results do not depend
// on worker count or scheduling.
inline std::mt19937_64 rng_stream(uint64_t seed, uint64_t tag, uint64_t index = 0) {
  uint64_t s = splitmix64(seed ^ splitmix64(tag ^ splitmix64(index)));
  return std::mt19937_64(s);
}

// Stable stream tags. Values are part of the reproducibility contract: changing
// them changes every downstream artifact.
enum class Stream : uint64_t {
  PhantomGeometry = 1,
  PhantomNoise = 2,
  InitWeights = 3,
  ActionSample = 4,
  PatchPick = 5,
  Distortion = 6,
  Augmentation = 7,
  Holdout = 8,
  DefectInjection = 9,
};

inline std::mt19937_64 rng_stream(uint64_t seed, Stream tag, uint64_t index = 0) {
  return rng_stream(seed, static_cast<uint64_t>(tag), index);
}

// FNV-1a over raw bytes; used for checkpoint/self-consistency checksums.
inline uint64_t fnv1a(const void* data, size_t n, uint64_t h = 0xcbf29ce484222325ULL) {
  const unsigned char* p = static_cast<const unsigned char*>(data);
  for (size_t i = 0; i < n; ++i) {
    h ^= p[i];
    h *= 0x100000001b3ULL;
  }
  return h;
}

// Runs fn(i) for i in [0, n) across up to `workers` threads. Tasks are
// statically partitioned; fn must only touch per-index state. Exceptions are
// rethrown on the calling thread.
void parallel_for(int64_t n, int workers, const std::function<void(int64_t)>& fn);

int default_workers();

class Timer {
 public:
  Timer() : start_(std::chrono::steady_clock::now()) {}
  double seconds() const {
    return std::chrono::duration<double>(std::chrono::steady_clock::now() - start_).count();
  }

 private:
  std::chrono::steady_clock::time_point start_;
};

std::string format_real(double v, int precision = 6);

}  // namespace rl4seg
