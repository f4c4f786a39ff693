#include "xem/inference.hpp"

#include <algorithm>
#include <cmath>
#include <vector>

namespace xem {

namespace {

std::int64_t mirror101(std::int64_t i, std::int64_t n) {
  if (n == 1) return 0;
  const std::int64_t period = 2 * (n - 1);
  i %= period;
  if (i < 0) i += period;
  return i < n ? i : period - i;
}

std::vector<std::int64_t> tile_starts(std::int64_t extent, std::int64_t tile, std::int64_t step) {
  std::vector<std::int64_t> out;
  for (std::int64_t s = 0;; s += step) {
    if (s + tile >= extent) {
      out.push_back(extent - tile);
      break;
    }
    out.push_back(s);
  }
  return out;
}

// Linear feathering ramp over the overlap margin; plateau 1 in the core.
std::vector<float> feather(std::int64_t tile, std::int64_t overlap) {
  std::vector<float> w(tile);
  const double cap = static_cast<double>(overlap) + 1.0;
  for (std::int64_t p = 0; p < tile; ++p)
    w[p] = static_cast<float>(std::min({static_cast<double>(p + 1),
                                        static_cast<double>(tile - p), cap}) /
                              cap);
  return w;
}

std::int64_t round_up(std::int64_t v, std::int64_t m) { return (v + m - 1) / m * m; }

}  // namespace

ReconVolumes reconstruct_volume(UNetGenerator& gen, const Volume& xray, Shape3 tile, int overlap) {
  const GeneratorSpec& gs = gen.spec();
  const Shape3 vs = xray.shape();
  if (tile.z < 1 || tile.y < 1 || tile.x < 1)
    fail(ErrorKind::Config, "reconstruct: tile extents must be positive");
  if (overlap < 0) fail(ErrorKind::Config, "reconstruct: overlap must be >= 0");

  const std::int64_t div = std::int64_t(1) << gs.depth;
  const bool d3 = gs.dims == Dims::D3;
  const Shape3 padded{d3 ? round_up(vs.z, div) : vs.z, round_up(vs.y, div), round_up(vs.x, div)};

  // Clamp the tile to the padded volume and to the divisibility grid.
  const auto fit = [&](std::int64_t t, std::int64_t extent, std::int64_t grid, const char* axis) {
    t = std::min(t, extent);
    t -= t % grid;
    if (t < grid)
      fail(ErrorKind::Config, std::string("reconstruct: tile ") + axis + " below the generator's " +
                                  std::to_string(grid) + "-voxel grid");
    return t;
  };
  const Shape3 t{fit(tile.z, padded.z, d3 ? div : 1, "Z"), fit(tile.y, padded.y, div, "Y"),
                 fit(tile.x, padded.x, div, "X")};
  const auto step_for = [&](std::int64_t te, const char* axis) {
    const std::int64_t step = te - overlap;
    if (step < 1)
      fail(ErrorKind::Config, std::string("reconstruct: overlap ") + std::to_string(overlap) +
                                  " leaves no step along " + axis + " (tile " +
                                  std::to_string(te) + ")");
    return step;
  };

  const Volume xn = normalize(xray, NormMode::Symmetric);
  const auto& src = xn.data();
  std::vector<float> pad(static_cast<std::size_t>(padded.voxels()));
  for (std::int64_t z = 0; z < padded.z; ++z)
    for (std::int64_t y = 0; y < padded.y; ++y)
      for (std::int64_t x = 0; x < padded.x; ++x)
        pad[(z * padded.y + y) * padded.x + x] =
            src[(mirror101(z, vs.z) * vs.y + mirror101(y, vs.y)) * vs.x + mirror101(x, vs.x)];

  std::vector<float> acc_mean(pad.size(), 0.0f), acc_lv(pad.size(), 0.0f), acc_w(pad.size(), 0.0f);
  const auto wz = feather(t.z, std::min<std::int64_t>(overlap, t.z - 1));
  const auto wy = feather(t.y, std::min<std::int64_t>(overlap, t.y - 1));
  const auto wx = feather(t.x, std::min<std::int64_t>(overlap, t.x - 1));

  for (std::int64_t sz : tile_starts(padded.z, t.z, step_for(t.z, "Z")))
    for (std::int64_t sy : tile_starts(padded.y, t.y, step_for(t.y, "Y")))
      for (std::int64_t sx : tile_starts(padded.x, t.x, step_for(t.x, "X"))) {
        nn::Tensor in({1, 1, static_cast<int>(t.z), static_cast<int>(t.y), static_cast<int>(t.x)});
        for (std::int64_t z = 0; z < t.z; ++z)
          for (std::int64_t y = 0; y < t.y; ++y)
            std::copy_n(pad.begin() + ((sz + z) * padded.y + sy + y) * padded.x + sx, t.x,
                        in.v.begin() + (z * t.y + y) * t.x);
        const GenOutput out = gen.forward(in);
        for (std::int64_t z = 0; z < t.z; ++z)
          for (std::int64_t y = 0; y < t.y; ++y)
            for (std::int64_t x = 0; x < t.x; ++x) {
              const float w = wz[z] * wy[y] * wx[x];
              const std::size_t dst = ((sz + z) * padded.y + sy + y) * padded.x + sx + x;
              const std::size_t sidx = (z * t.y + y) * t.x + x;
              acc_mean[dst] += w * out.mean.v[sidx];
              acc_lv[dst] += w * out.log_variance.v[sidx];
              acc_w[dst] += w;
            }
      }

  std::vector<float> mean(static_cast<std::size_t>(vs.voxels()));
  std::vector<float> logvar(mean.size());
  for (std::int64_t z = 0; z < vs.z; ++z)
    for (std::int64_t y = 0; y < vs.y; ++y)
      for (std::int64_t x = 0; x < vs.x; ++x) {
        const std::size_t p = (z * padded.y + y) * padded.x + x;
        const std::size_t o = (z * vs.y + y) * vs.x + x;
        const float m = acc_mean[p] / acc_w[p];
        mean[o] = std::clamp((m + 1.0f) * 0.5f, 0.0f, 1.0f);  // back to stored [0,1]
        logvar[o] = acc_lv[p] / acc_w[p];
      }
  return ReconVolumes{
      Volume(vs, std::move(mean), xray.voxel_size_nm(), Modality::Em, Range{0, 1}),
      Volume(vs, std::move(logvar), xray.voxel_size_nm(), Modality::Variance, Range{-14, 14})};
}

}  // namespace xem
