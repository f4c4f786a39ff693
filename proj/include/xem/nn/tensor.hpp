#pragma once

#include <array>
#include <cstdint>
#include <numeric>
#include <string>
#include <vector>

#include "xem/error.hpp"

namespace xem::nn {

// Dense f32 tensor, fixed layout [N, C, D, H, W]. 2D data rides along with
// D=1; 2D *networks* keep kernel extent 1 in Z so a volume passes through
// them slice by slice in a single call.
struct Tensor {
  std::array<int, 5> shape{0, 0, 0, 0, 0};
  std::vector<float> v;

  Tensor() = default;
  explicit Tensor(std::array<int, 5> s) : shape(s), v(static_cast<std::size_t>(count(s)), 0.0f) {}

  static std::int64_t count(const std::array<int, 5>& s) {
    return std::int64_t(s[0]) * s[1] * s[2] * s[3] * s[4];
  }

  std::int64_t size() const { return static_cast<std::int64_t>(v.size()); }
  bool empty() const { return v.empty(); }

  int n() const { return shape[0]; }
  int c() const { return shape[1]; }
  int d() const { return shape[2]; }
  int h() const { return shape[3]; }
  int w() const { return shape[4]; }

  float* data() { return v.data(); }
  const float* data() const { return v.data(); }

  void fill(float x) { std::fill(v.begin(), v.end(), x); }
  void zero() { fill(0.0f); }

  std::string shape_str() const {
    std::string s = "[";
    for (int i = 0; i < 5; ++i) s += std::to_string(shape[i]) + (i < 4 ? "," : "]");
    return s;
  }
};

inline void check_same_shape(const Tensor& a, const Tensor& b, const char* what) {
  if (a.shape != b.shape)
    fail(ErrorKind::Shape, std::string(what) + ": shapes " + a.shape_str() + " vs " + b.shape_str());
}

}  // namespace xem::nn
