#pragma once

#include <functional>
#include <string>

#include "xem/nn/ops.hpp"
#include "xem/nn/tensor.hpp"
#include "xem/rng.hpp"

namespace xem::nn {

// Reference to one parameter tensor and its gradient, used by the optimizer,
// serialization and hashing. Enumeration order is the network build order and
// is part of the checkpoint format.
struct ParamRef {
  std::string name;
  Tensor* w;
  Tensor* g;
};

using ParamVisitor = std::function<void(const ParamRef&)>;

struct Stride3 {
  int z = 1, y = 1, x = 1;
};

class Conv3d {
 public:
  Conv3d() = default;
  Conv3d(std::string name, int cin, int cout, Stride3 kernel, Stride3 stride, Stride3 pad);

  void init(Rng& rng, float std_dev = 0.02f);
  Tensor forward(const Tensor& x);
  // gw/gb accumulate when accum_params; gx computed only when need_gx.
  Tensor backward(const Tensor& gy, bool need_gx, bool accum_params);
  void visit(const ParamVisitor& cb);
  void drop_cache() { x_ = Tensor(); }

  int cin() const { return cin_; }
  int cout() const { return cout_; }

 private:
  Conv3dDims dims_for(const Tensor& x) const;
  std::string name_;
  int cin_ = 0, cout_ = 0;
  Stride3 k_, s_, p_;
  Tensor w_, b_, gw_, gb_;
  Tensor x_;  // forward cache
};

class InstanceNorm {
 public:
  InstanceNorm() = default;
  // per_slice: statistics per (n,c,z) over H*W, used by 2D networks so a
  // volume passed through them is normalized slice-wise.
  InstanceNorm(std::string name, int channels, bool per_slice);

  void init(Rng& rng);
  Tensor forward(const Tensor& x);
  Tensor backward(const Tensor& gy, bool accum_params);
  void visit(const ParamVisitor& cb);
  void drop_cache() { x_ = Tensor(); mean_ = Tensor(); invstd_ = Tensor(); }

 private:
  std::string name_;
  int channels_ = 0;
  bool per_slice_ = false;
  Tensor gamma_, beta_, ggamma_, gbeta_;
  Tensor x_, mean_, invstd_;
};

class LeakyReLU {
 public:
  explicit LeakyReLU(float alpha = 0.2f) : alpha_(alpha) {}
  Tensor forward(const Tensor& x);
  Tensor backward(const Tensor& gy) const;

 private:
  float alpha_;
  Tensor x_;
};

class Tanh {
 public:
  Tensor forward(const Tensor& x);
  Tensor backward(const Tensor& gy) const;

 private:
  Tensor y_;
};

// Symmetric clamp; gradient passes through inside [-bound, bound] (inclusive).
class ClampSym {
 public:
  explicit ClampSym(float bound) : bound_(bound) {}
  Tensor forward(const Tensor& x);
  Tensor backward(const Tensor& gy) const;

 private:
  float bound_;
  Tensor x_;
};

class UpsampleNearest {
 public:
  explicit UpsampleNearest(Stride3 factor = {2, 2, 2}) : f_(factor) {}
  Tensor forward(const Tensor& x);
  Tensor backward(const Tensor& gy) const;

 private:
  Stride3 f_;
  std::array<int, 5> in_shape_{};
};

// Channel concatenation helpers for skip connections.
Tensor concat_channels(const Tensor& a, const Tensor& b);
void split_channels(const Tensor& g, int c_a, Tensor& ga, Tensor& gb);

}  // namespace xem::nn
