#include "rl4seg/tensor.hpp"

#include <cmath>
#include <cstdio>
#include <cstring>
#include <future>

namespace rl4seg {

Tensor::Tensor(std::vector<int> s, std::vector<real> v) : shape(std::move(s)), values(std::move(v)) {
  require(count(shape) == static_cast<int64_t>(values.size()),
          "Tensor: value count does not match shape");
}

int64_t Tensor::count(const std::vector<int>& s) {
  int64_t n = 1;
  for (int d : s) {
    require(d >= 0, "Tensor: negative dimension");
    n *= d;
  }
  return n;
}

bool Tensor::all_finite() const {
  for (real v : values) {
    if (!std::isfinite(static_cast<double>(v))) return false;
  }
  return true;
}

uint64_t Tensor::checksum() const {
  uint64_t h = fnv1a(shape.data(), shape.size() * sizeof(int));
  return fnv1a(values.data(), values.size() * sizeof(real), h);
}

Tensor random_uniform(const std::vector<int>& shape, real lo, real hi, std::mt19937_64& rng) {
  Tensor t(shape);
  std::uniform_real_distribution<double> dist(lo, hi);
  for (auto& v : t.values) v = static_cast<real>(dist(rng));
  return t;
}

Tensor random_normal(const std::vector<int>& shape, real mean, real stddev, std::mt19937_64& rng) {
  Tensor t(shape);
  std::normal_distribution<double> dist(mean, stddev);
  for (auto& v : t.values) v = static_cast<real>(dist(rng));
  return t;
}

void parallel_for(int64_t n, int workers, const std::function<void(int64_t)>& fn) {
  if (n <= 0) return;
  workers = std::max(1, std::min<int>(workers, static_cast<int>(n)));
  if (workers == 1) {
    for (int64_t i = 0; i < n; ++i) fn(i);
    return;
  }
  std::vector<std::thread> threads;
  std::vector<std::exception_ptr> errors(static_cast<size_t>(workers));
  for (int w = 0; w < workers; ++w) {
    threads.emplace_back([&, w]() {
      try {
        for (int64_t i = w; i < n; i += workers) fn(i);
      } catch (...) {
        errors[static_cast<size_t>(w)] = std::current_exception();
      }
    });
  }
  for (auto& t : threads) t.join();
  for (auto& e : errors) {
    if (e) std::rethrow_exception(e);
  }
}

int default_workers() {
  unsigned hw = std::thread::hardware_concurrency();
  return hw == 0 ? 1 : static_cast<int>(hw);
}

std::string format_real(double v, int precision) {
  char buf[64];
  std::snprintf(buf, sizeof(buf), "%.*g", precision, v);
  return buf;
}

}  // namespace rl4seg
