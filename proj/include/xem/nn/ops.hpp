#pragma once

#include <Eigen/Core>
#include <cmath>
#include <cstring>
#include <vector>

namespace xem::nn {

// Low-level kernels, templated on the scalar so tests can run the exact same
// code paths in double for finite-difference checks.

struct Conv3dDims {
  int N, Cin, D, H, W;
  int Cout, kz, ky, kx;
  int sz, sy, sx;
  int pz, py, px;

  // Floor division: C++ '/' truncates toward zero, which would round a
  // negative numerator (input smaller than the kernel) up to output size 1.
  static int fdiv(int a, int b) { return a >= 0 ? a / b : -((-a + b - 1) / b); }

  int oD() const { return fdiv(D + 2 * pz - kz, sz) + 1; }
  int oH() const { return fdiv(H + 2 * py - ky, sy) + 1; }
  int oW() const { return fdiv(W + 2 * px - kx, sx) + 1; }
  int K() const { return Cin * kz * ky * kx; }
};

namespace detail {

template <class T>
using MatRM = Eigen::Matrix<T, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
template <class T>
using MapRM = Eigen::Map<MatRM<T>>;
template <class T>
using CMapRM = Eigen::Map<const MatRM<T>>;
template <class T>
using StridedMap = Eigen::Map<MatRM<T>, 0, Eigen::OuterStride<>>;
template <class T>
using CStridedMap = Eigen::Map<const MatRM<T>, 0, Eigen::OuterStride<>>;

// Gather one output-Z slice into a [K, oH*oW] column matrix.
template <class T>
void im2col_slice(const T* x, T* col, const Conv3dDims& d, int oz) {
  const int oH = d.oH(), oW = d.oW();
  const std::int64_t chan_stride = std::int64_t(d.D) * d.H * d.W;
  for (int c = 0; c < d.Cin; ++c) {
    for (int dz = 0; dz < d.kz; ++dz) {
      const int iz = oz * d.sz - d.pz + dz;
      const bool z_ok = iz >= 0 && iz < d.D;
      for (int dy = 0; dy < d.ky; ++dy) {
        for (int dx = 0; dx < d.kx; ++dx) {
          T* row = col + (std::int64_t(((c * d.kz + dz) * d.ky + dy) * d.kx + dx)) * oH * oW;
          if (!z_ok) {
            std::memset(row, 0, sizeof(T) * std::size_t(oH) * oW);
            continue;
          }
          const T* plane = x + c * chan_stride + std::int64_t(iz) * d.H * d.W;
          for (int oy = 0; oy < oH; ++oy) {
            const int iy = oy * d.sy - d.py + dy;
            T* dst = row + std::int64_t(oy) * oW;
            if (iy < 0 || iy >= d.H) {
              std::memset(dst, 0, sizeof(T) * std::size_t(oW));
              continue;
            }
            const T* src = plane + std::int64_t(iy) * d.W;
            for (int ox = 0; ox < oW; ++ox) {
              const int ix = ox * d.sx - d.px + dx;
              dst[ox] = (ix >= 0 && ix < d.W) ? src[ix] : T(0);
            }
          }
        }
      }
    }
  }
}

// Scatter-add a [K, oH*oW] gradient matrix back onto the input slice window.
template <class T>
void col2im_add_slice(const T* col, T* gx, const Conv3dDims& d, int oz) {
  const int oH = d.oH(), oW = d.oW();
  const std::int64_t chan_stride = std::int64_t(d.D) * d.H * d.W;
  for (int c = 0; c < d.Cin; ++c) {
    for (int dz = 0; dz < d.kz; ++dz) {
      const int iz = oz * d.sz - d.pz + dz;
      if (iz < 0 || iz >= d.D) continue;
      T* plane = gx + c * chan_stride + std::int64_t(iz) * d.H * d.W;
      for (int dy = 0; dy < d.ky; ++dy) {
        for (int dx = 0; dx < d.kx; ++dx) {
          const T* row = col + (std::int64_t(((c * d.kz + dz) * d.ky + dy) * d.kx + dx)) * oH * oW;
          for (int oy = 0; oy < oH; ++oy) {
            const int iy = oy * d.sy - d.py + dy;
            if (iy < 0 || iy >= d.H) continue;
            T* dst_row = plane + std::int64_t(iy) * d.W;
            const T* src = row + std::int64_t(oy) * oW;
            for (int ox = 0; ox < oW; ++ox) {
              const int ix = ox * d.sx - d.px + dx;
              if (ix >= 0 && ix < d.W) dst_row[ix] += src[ox];
            }
          }
        }
      }
    }
  }
}

}  // namespace detail

// y[N,Cout,oD,oH,oW] = conv(x[N,Cin,D,H,W], w[Cout,Cin,kz,ky,kx]) + b
template <class T>
void conv3d_forward(const T* x, const T* w, const T* b, T* y, const Conv3dDims& d) {
  const int oD = d.oD(), oH = d.oH(), oW = d.oW(), K = d.K();
  const std::int64_t oHW = std::int64_t(oH) * oW;
  const std::int64_t in_sample = std::int64_t(d.Cin) * d.D * d.H * d.W;
  const std::int64_t out_sample = std::int64_t(d.Cout) * oD * oHW;

  detail::CMapRM<T> W_mat(w, d.Cout, K);
  std::vector<T> col(std::size_t(K) * oHW);

  for (int n = 0; n < d.N; ++n) {
    for (int oz = 0; oz < oD; ++oz) {
      detail::im2col_slice(x + n * in_sample, col.data(), d, oz);
      detail::CMapRM<T> C(col.data(), K, oHW);
      detail::StridedMap<T> Y(y + n * out_sample + std::int64_t(oz) * oHW, d.Cout, oHW,
                              Eigen::OuterStride<>(oD * oHW));
      Y.noalias() = W_mat * C;
      if (b != nullptr)
        for (int c = 0; c < d.Cout; ++c) Y.row(c).array() += b[c];
    }
  }
}

// Any of gx/gw/gb may be null; gw and gb are accumulated into, gx is overwritten.
template <class T>
void conv3d_backward(const T* x, const T* w, const T* gy, T* gx, T* gw, T* gb,
                     const Conv3dDims& d) {
  const int oD = d.oD(), oH = d.oH(), oW = d.oW(), K = d.K();
  const std::int64_t oHW = std::int64_t(oH) * oW;
  const std::int64_t in_sample = std::int64_t(d.Cin) * d.D * d.H * d.W;
  const std::int64_t out_sample = std::int64_t(d.Cout) * oD * oHW;

  if (gx != nullptr) std::memset(gx, 0, sizeof(T) * std::size_t(d.N) * in_sample);

  detail::CMapRM<T> W_mat(w, d.Cout, K);
  std::vector<T> col(std::size_t(K) * oHW);
  std::vector<T> colg(gx != nullptr ? std::size_t(K) * oHW : 0);

  for (int n = 0; n < d.N; ++n) {
    for (int oz = 0; oz < oD; ++oz) {
      detail::CStridedMap<T> GY(gy + n * out_sample + std::int64_t(oz) * oHW, d.Cout, oHW,
                                Eigen::OuterStride<>(oD * oHW));
      if (gw != nullptr) {
        detail::im2col_slice(x + n * in_sample, col.data(), d, oz);
        detail::CMapRM<T> C(col.data(), K, oHW);
        detail::MapRM<T> GW(gw, d.Cout, K);
        GW.noalias() += GY * C.transpose();
      }
      if (gb != nullptr) {
        // Fixed-order scalar reduction: Eigen's vectorized sum() peels to the
        // first aligned element, so its rounding depends on where the heap
        // happened to place the buffer — enough to break bit-reproducibility.
        for (int c = 0; c < d.Cout; ++c) {
          const T* row = gy + n * out_sample + (std::int64_t(c) * oD + oz) * oHW;
          T acc = 0;
          for (std::int64_t i = 0; i < oHW; ++i) acc += row[i];
          gb[c] += acc;
        }
      }
      if (gx != nullptr) {
        detail::MapRM<T> CG(colg.data(), K, oHW);
        CG.noalias() = W_mat.transpose() * GY;
        detail::col2im_add_slice(colg.data(), gx + n * in_sample, d, oz);
      }
    }
  }
}

// Instance normalization over groups. The tensor is viewed as [N, C, R, L]:
// R = D and L = H*W for per-slice (2D) semantics, R = 1 and L = D*H*W for
// volumetric. gamma/beta are per channel; mean/invstd have one entry per
// (n,c,r) group.
template <class T>
void instance_norm_forward(const T* x, const T* gamma, const T* beta, T* y, T* mean, T* invstd,
                           int N, int C, int R, int L, T eps) {
  const std::int64_t groups = std::int64_t(N) * C * R;
  for (std::int64_t g = 0; g < groups; ++g) {
    const int c = static_cast<int>((g / R) % C);
    const T* xs = x + g * L;
    T* ys = y + g * L;
    double mu = 0;
    for (int i = 0; i < L; ++i) mu += static_cast<double>(xs[i]);
    mu /= L;
    double var = 0;
    for (int i = 0; i < L; ++i) {
      const double dv = static_cast<double>(xs[i]) - mu;
      var += dv * dv;
    }
    var /= L;
    const T is = static_cast<T>(1.0 / std::sqrt(var + static_cast<double>(eps)));
    mean[g] = static_cast<T>(mu);
    invstd[g] = is;
    const T gc = gamma[c], bc = beta[c], m = static_cast<T>(mu);
    for (int i = 0; i < L; ++i) ys[i] = gc * (xs[i] - m) * is + bc;
  }
}

template <class T>
void instance_norm_backward(const T* x, const T* gamma, const T* mean, const T* invstd,
                            const T* gy, T* gx, T* ggamma, T* gbeta, int N, int C, int R, int L) {
  const std::int64_t groups = std::int64_t(N) * C * R;
  for (std::int64_t g = 0; g < groups; ++g) {
    const int c = static_cast<int>((g / R) % C);
    const T* xs = x + g * L;
    const T* gys = gy + g * L;
    T* gxs = gx + g * L;
    const T m = mean[g], is = invstd[g];
    double sum_gy = 0, sum_gy_xhat = 0;
    for (int i = 0; i < L; ++i) {
      const double xhat = static_cast<double>((xs[i] - m) * is);
      sum_gy += static_cast<double>(gys[i]);
      sum_gy_xhat += static_cast<double>(gys[i]) * xhat;
    }
    if (ggamma != nullptr) ggamma[c] += static_cast<T>(sum_gy_xhat);
    if (gbeta != nullptr) gbeta[c] += static_cast<T>(sum_gy);
    const double mean_gy = sum_gy / L;
    const double mean_gy_xhat = sum_gy_xhat / L;
    const double scale = static_cast<double>(gamma[c]) * static_cast<double>(is);
    for (int i = 0; i < L; ++i) {
      const double xhat = static_cast<double>((xs[i] - m) * is);
      gxs[i] = static_cast<T>(scale * (static_cast<double>(gys[i]) - mean_gy - xhat * mean_gy_xhat));
    }
  }
}

// Nearest-neighbour upsampling by integer factors.
template <class T>
void upsample_nearest_forward(const T* x, T* y, int N, int C, int D, int H, int W, int fz, int fy,
                              int fx) {
  const int oD = D * fz, oH = H * fy, oW = W * fx;
  for (std::int64_t nc = 0; nc < std::int64_t(N) * C; ++nc) {
    const T* xs = x + nc * D * H * W;
    T* ys = y + nc * std::int64_t(oD) * oH * oW;
    for (int z = 0; z < oD; ++z)
      for (int yy = 0; yy < oH; ++yy) {
        const T* src = xs + (std::int64_t(z / fz) * H + yy / fy) * W;
        T* dst = ys + (std::int64_t(z) * oH + yy) * oW;
        for (int xx = 0; xx < oW; ++xx) dst[xx] = src[xx / fx];
      }
  }
}

template <class T>
void upsample_nearest_backward(const T* gy, T* gx, int N, int C, int D, int H, int W, int fz,
                               int fy, int fx) {
  const int oD = D * fz, oH = H * fy, oW = W * fx;
  std::memset(gx, 0, sizeof(T) * std::size_t(N) * C * D * H * W);
  for (std::int64_t nc = 0; nc < std::int64_t(N) * C; ++nc) {
    const T* gys = gy + nc * std::int64_t(oD) * oH * oW;
    T* gxs = gx + nc * D * H * W;
    for (int z = 0; z < oD; ++z)
      for (int yy = 0; yy < oH; ++yy) {
        T* dst = gxs + (std::int64_t(z / fz) * H + yy / fy) * W;
        const T* src = gys + (std::int64_t(z) * oH + yy) * oW;
        for (int xx = 0; xx < oW; ++xx) dst[xx / fx] += src[xx];
      }
  }
}

}  // namespace xem::nn
