#include "xem/nn/layers.hpp"

#include <cmath>

namespace xem::nn {

// --- Conv3d --------------------------------------------------------------------

Conv3d::Conv3d(std::string name, int cin, int cout, Stride3 kernel, Stride3 stride, Stride3 pad)
    : name_(std::move(name)), cin_(cin), cout_(cout), k_(kernel), s_(stride), p_(pad) {
  w_ = Tensor({cout, cin, k_.z, k_.y, k_.x});
  b_ = Tensor({1, cout, 1, 1, 1});
  gw_ = Tensor(w_.shape);
  gb_ = Tensor(b_.shape);
}

void Conv3d::init(Rng& rng, float std_dev) {
  for (auto& x : w_.v) x = static_cast<float>(rng.normal(0.0, std_dev));
  b_.zero();
}

Conv3dDims Conv3d::dims_for(const Tensor& x) const {
  Conv3dDims d{};
  d.N = x.n();
  d.Cin = x.c();
  d.D = x.d();
  d.H = x.h();
  d.W = x.w();
  d.Cout = cout_;
  d.kz = k_.z;
  d.ky = k_.y;
  d.kx = k_.x;
  d.sz = s_.z;
  d.sy = s_.y;
  d.sx = s_.x;
  d.pz = p_.z;
  d.py = p_.y;
  d.px = p_.x;
  if (x.c() != cin_)
    fail(ErrorKind::Shape, name_ + ": expected " + std::to_string(cin_) + " channels, got " +
                               std::to_string(x.c()));
  if (d.oD() < 1 || d.oH() < 1 || d.oW() < 1)
    fail(ErrorKind::Shape, name_ + ": input " + x.shape_str() + " too small for kernel");
  return d;
}

Tensor Conv3d::forward(const Tensor& x) {
  const Conv3dDims d = dims_for(x);
  x_ = x;
  Tensor y({d.N, d.Cout, d.oD(), d.oH(), d.oW()});
  conv3d_forward<float>(x.data(), w_.data(), b_.data(), y.data(), d);
  return y;
}

Tensor Conv3d::backward(const Tensor& gy, bool need_gx, bool accum_params) {
  const Conv3dDims d = dims_for(x_);
  Tensor gx;
  if (need_gx) gx = Tensor(x_.shape);
  conv3d_backward<float>(x_.data(), w_.data(), gy.data(), need_gx ? gx.data() : nullptr,
                         accum_params ? gw_.data() : nullptr, accum_params ? gb_.data() : nullptr,
                         d);
  return gx;
}

void Conv3d::visit(const ParamVisitor& cb) {
  cb({name_ + ".w", &w_, &gw_});
  cb({name_ + ".b", &b_, &gb_});
}

// --- InstanceNorm ----------------------------------------------------------------

InstanceNorm::InstanceNorm(std::string name, int channels, bool per_slice)
    : name_(std::move(name)), channels_(channels), per_slice_(per_slice) {
  gamma_ = Tensor({1, channels, 1, 1, 1});
  beta_ = Tensor({1, channels, 1, 1, 1});
  ggamma_ = Tensor(gamma_.shape);
  gbeta_ = Tensor(beta_.shape);
}

void InstanceNorm::init(Rng& rng) {
  for (auto& g : gamma_.v) g = static_cast<float>(rng.normal(1.0, 0.02));
  beta_.zero();
}

Tensor InstanceNorm::forward(const Tensor& x) {
  if (x.c() != channels_) fail(ErrorKind::Shape, name_ + ": channel mismatch");
  x_ = x;
  const int R = per_slice_ ? x.d() : 1;
  const int L = per_slice_ ? x.h() * x.w() : x.d() * x.h() * x.w();
  mean_ = Tensor({x.n(), x.c(), R, 1, 1});
  invstd_ = Tensor({x.n(), x.c(), R, 1, 1});
  Tensor y(x.shape);
  instance_norm_forward<float>(x.data(), gamma_.data(), beta_.data(), y.data(), mean_.data(),
                               invstd_.data(), x.n(), x.c(), R, L, 1e-5f);
  return y;
}

Tensor InstanceNorm::backward(const Tensor& gy, bool accum_params) {
  const int R = per_slice_ ? x_.d() : 1;
  const int L = per_slice_ ? x_.h() * x_.w() : x_.d() * x_.h() * x_.w();
  Tensor gx(x_.shape);
  instance_norm_backward<float>(x_.data(), gamma_.data(), mean_.data(), invstd_.data(), gy.data(),
                                gx.data(), accum_params ? ggamma_.data() : nullptr,
                                accum_params ? gbeta_.data() : nullptr, x_.n(), x_.c(), R, L);
  return gx;
}

void InstanceNorm::visit(const ParamVisitor& cb) {
  cb({name_ + ".gamma", &gamma_, &ggamma_});
  cb({name_ + ".beta", &beta_, &gbeta_});
}

// --- activations ------------------------------------------------------------------

Tensor LeakyReLU::forward(const Tensor& x) {
  x_ = x;
  Tensor y(x.shape);
  for (std::size_t i = 0; i < x.v.size(); ++i)
    y.v[i] = x.v[i] > 0.0f ? x.v[i] : alpha_ * x.v[i];
  return y;
}

Tensor LeakyReLU::backward(const Tensor& gy) const {
  Tensor gx(x_.shape);
  for (std::size_t i = 0; i < gy.v.size(); ++i)
    gx.v[i] = x_.v[i] > 0.0f ? gy.v[i] : alpha_ * gy.v[i];
  return gx;
}

Tensor Tanh::forward(const Tensor& x) {
  Tensor y(x.shape);
  for (std::size_t i = 0; i < x.v.size(); ++i) y.v[i] = std::tanh(x.v[i]);
  y_ = y;
  return y;
}

Tensor Tanh::backward(const Tensor& gy) const {
  Tensor gx(y_.shape);
  for (std::size_t i = 0; i < gy.v.size(); ++i) gx.v[i] = gy.v[i] * (1.0f - y_.v[i] * y_.v[i]);
  return gx;
}

Tensor ClampSym::forward(const Tensor& x) {
  x_ = x;
  Tensor y(x.shape);
  for (std::size_t i = 0; i < x.v.size(); ++i)
    y.v[i] = std::min(std::max(x.v[i], -bound_), bound_);
  return y;
}

Tensor ClampSym::backward(const Tensor& gy) const {
  Tensor gx(x_.shape);
  for (std::size_t i = 0; i < gy.v.size(); ++i)
    gx.v[i] = (x_.v[i] >= -bound_ && x_.v[i] <= bound_) ? gy.v[i] : 0.0f;
  return gx;
}

Tensor UpsampleNearest::forward(const Tensor& x) {
  in_shape_ = x.shape;
  Tensor y({x.n(), x.c(), x.d() * f_.z, x.h() * f_.y, x.w() * f_.x});
  upsample_nearest_forward<float>(x.data(), y.data(), x.n(), x.c(), x.d(), x.h(), x.w(), f_.z,
                                  f_.y, f_.x);
  return y;
}

Tensor UpsampleNearest::backward(const Tensor& gy) const {
  Tensor gx(in_shape_);
  upsample_nearest_backward<float>(gy.data(), gx.data(), in_shape_[0], in_shape_[1], in_shape_[2],
                                   in_shape_[3], in_shape_[4], f_.z, f_.y, f_.x);
  return gx;
}

// --- concat -----------------------------------------------------------------------

Tensor concat_channels(const Tensor& a, const Tensor& b) {
  if (a.n() != b.n() || a.d() != b.d() || a.h() != b.h() || a.w() != b.w())
    fail(ErrorKind::Shape, "concat_channels: spatial shapes differ: " + a.shape_str() + " vs " +
                               b.shape_str());
  Tensor y({a.n(), a.c() + b.c(), a.d(), a.h(), a.w()});
  const std::int64_t spatial = std::int64_t(a.d()) * a.h() * a.w();
  for (int n = 0; n < a.n(); ++n) {
    float* dst = y.data() + std::int64_t(n) * y.c() * spatial;
    const float* sa = a.data() + std::int64_t(n) * a.c() * spatial;
    const float* sb = b.data() + std::int64_t(n) * b.c() * spatial;
    std::memcpy(dst, sa, sizeof(float) * std::size_t(a.c() * spatial));
    std::memcpy(dst + std::int64_t(a.c()) * spatial, sb, sizeof(float) * std::size_t(b.c() * spatial));
  }
  return y;
}

void split_channels(const Tensor& g, int c_a, Tensor& ga, Tensor& gb) {
  const int c_b = g.c() - c_a;
  ga = Tensor({g.n(), c_a, g.d(), g.h(), g.w()});
  gb = Tensor({g.n(), c_b, g.d(), g.h(), g.w()});
  const std::int64_t spatial = std::int64_t(g.d()) * g.h() * g.w();
  for (int n = 0; n < g.n(); ++n) {
    const float* src = g.data() + std::int64_t(n) * g.c() * spatial;
    std::memcpy(ga.data() + std::int64_t(n) * c_a * spatial, src,
                sizeof(float) * std::size_t(c_a * spatial));
    std::memcpy(gb.data() + std::int64_t(n) * c_b * spatial, src + std::int64_t(c_a) * spatial,
                sizeof(float) * std::size_t(c_b * spatial));
  }
}

}  // namespace xem::nn
