#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <cstdio>
#include <new>
#include <numeric>
#include <random>
#include <stdexcept>
#include <string>
#include <vector>

namespace bag {

// 64-byte-aligned allocator. Heap doubles are only 16-byte aligned by
// default, and SIMD kernels that peel to an alignment boundary would then
// sum in an order that depends on the allocation address, making results
// differ between identical runs. Fixing the alignment fixes the order.
template <typename T>
struct AlignedAllocator {
  using value_type = T;
  static constexpr std::size_t kAlign = 64;

  AlignedAllocator() = default;
  template <typename U>
  AlignedAllocator(const AlignedAllocator<U>&) {}

  T* allocate(std::size_t n) {
    return static_cast<T*>(::operator new(n * sizeof(T), std::align_val_t(kAlign)));
  }
  void deallocate(T* p, std::size_t) { ::operator delete(p, std::align_val_t(kAlign)); }

  template <typename U>
  bool operator==(const AlignedAllocator<U>&) const {
    return true;
  }
  template <typename U>
  bool operator!=(const AlignedAllocator<U>&) const {
    return false;
  }
};

using dvec = std::vector<double, AlignedAllocator<double>>;

inline bool operator==(const dvec& a, const std::vector<double>& b) {
  return std::equal(a.begin(), a.end(), b.begin(), b.end());
}
inline bool operator==(const std::vector<double>& a, const dvec& b) { return b == a; }

// Dense row-major double array. Shapes are small (<=3 dims in practice).
struct Array {
  std::vector<int> shape;
  dvec data;

  Array() = default;
  Array(std::vector<int> s, double fill = 0.0) : shape(std::move(s)) {
    data.assign(static_cast<size_t>(numel_of(shape)), fill);
  }
  Array(std::vector<int> s, dvec d) : shape(std::move(s)), data(std::move(d)) {
    if (numel_of(shape) != static_cast<int64_t>(data.size()))
      throw std::invalid_argument("Array: shape/data size mismatch");
  }

  static int64_t numel_of(const std::vector<int>& s) {
    int64_t n = 1;
    for (int d : s) {
      if (d < 0) throw std::invalid_argument("Array: negative dimension");
      n *= d;
    }
    return n;
  }

  int64_t numel() const { return static_cast<int64_t>(data.size()); }
  int rows() const { return shape.at(0); }
  int cols() const { return shape.size() >= 2 ? shape.at(1) : 1; }

  double& at(int i, int j) { return data[static_cast<size_t>(i) * cols() + j]; }
  double at(int i, int j) const { return data[static_cast<size_t>(i) * cols() + j]; }

  bool same_shape(const Array& o) const { return shape == o.shape; }

  bool all_finite() const {
    for (double v : data)
      if (!std::isfinite(v)) return false;
    return true;
  }

  static Array zeros(std::vector<int> s) { return Array(std::move(s), 0.0); }
  static Array full(std::vector<int> s, double v) { return Array(std::move(s), v); }
  static Array scalar(double v) { return Array({1}, dvec{v}); }

  static Array randn(std::vector<int> s, std::mt19937_64& rng, double stddev) {
    Array a(std::move(s));
    std::normal_distribution<double> dist(0.0, stddev);
    for (double& v : a.data) v = dist(rng);
    return a;
  }
};

inline std::string shape_str(const std::vector<int>& s) {
  std::string out = "(";
  for (size_t i = 0; i < s.size(); ++i) {
    if (i) out += ",";
    out += std::to_string(s[i]);
  }
  return out + ")";
}

// 17 significant digits round-trips a double exactly in decimal.
inline std::string format_g17(double v) {
  char buf[40];
  std::snprintf(buf, sizeof(buf), "%.17g", v);
  return buf;
}

}  // namespace bag
