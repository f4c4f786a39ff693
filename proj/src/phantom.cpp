#include "xem/phantom.hpp"

#include <algorithm>
#include <cmath>

#include <nlohmann/json.hpp>

namespace xem {

using nlohmann::json;

void PhantomConfig::validate() const {
  if (size.z < 1 || size.y < 1 || size.x < 1) fail(ErrorKind::Config, "phantom size must be >= 1");
  if (n_cells < 2) fail(ErrorKind::Config, "n_cells must be >= 2");
  if (xray_downsample < 1) fail(ErrorKind::Config, "xray_downsample must be >= 1");
  for (double s : {em_noise_sigma, xray_blur_sigma_vx.z, xray_blur_sigma_vx.y,
                   xray_blur_sigma_vx.x, xray_noise_sigma, intensity_jitter}) {
    if (!(s >= 0.0) || !std::isfinite(s)) fail(ErrorKind::Config, "sigmas must be finite and >= 0");
  }
  if (!(membrane_halfwidth_vx > 0)) fail(ErrorKind::Config, "membrane_halfwidth_vx must be > 0");
}

void to_json(json& j, const PhantomConfig& cfg) {
  j = json{{"size", {cfg.size.z, cfg.size.y, cfg.size.x}},
           {"n_cells", cfg.n_cells},
           {"membrane_halfwidth_vx", cfg.membrane_halfwidth_vx},
           {"em_noise_sigma", cfg.em_noise_sigma},
           {"xray_blur_sigma_vx",
            {cfg.xray_blur_sigma_vx.z, cfg.xray_blur_sigma_vx.y, cfg.xray_blur_sigma_vx.x}},
           {"xray_downsample", cfg.xray_downsample},
           {"xray_noise_sigma", cfg.xray_noise_sigma},
           {"intensity_jitter", cfg.intensity_jitter},
           {"seed", cfg.seed},
           {"voxel_size_nm", {cfg.voxel_size_nm.z, cfg.voxel_size_nm.y, cfg.voxel_size_nm.x}}};
}

void from_json(const json& j, PhantomConfig& cfg) {
  auto tri = [](const json& a, auto& z, auto& y, auto& x) {
    z = a.at(0);
    y = a.at(1);
    x = a.at(2);
  };
  if (j.contains("size")) tri(j["size"], cfg.size.z, cfg.size.y, cfg.size.x);
  cfg.n_cells = j.value("n_cells", cfg.n_cells);
  cfg.membrane_halfwidth_vx = j.value("membrane_halfwidth_vx", cfg.membrane_halfwidth_vx);
  cfg.em_noise_sigma = j.value("em_noise_sigma", cfg.em_noise_sigma);
  if (j.contains("xray_blur_sigma_vx"))
    tri(j["xray_blur_sigma_vx"], cfg.xray_blur_sigma_vx.z, cfg.xray_blur_sigma_vx.y,
        cfg.xray_blur_sigma_vx.x);
  cfg.xray_downsample = j.value("xray_downsample", cfg.xray_downsample);
  cfg.xray_noise_sigma = j.value("xray_noise_sigma", cfg.xray_noise_sigma);
  cfg.intensity_jitter = j.value("intensity_jitter", cfg.intensity_jitter);
  cfg.seed = j.value("seed", cfg.seed);
  if (j.contains("voxel_size_nm"))
    tri(j["voxel_size_nm"], cfg.voxel_size_nm.z, cfg.voxel_size_nm.y, cfg.voxel_size_nm.x);
}

// --- blur ---------------------------------------------------------------------

namespace {

std::vector<float> gaussian_kernel(double sigma) {
  if (sigma <= 0.0) return {1.0f};
  const int radius = static_cast<int>(std::ceil(3.0 * sigma));
  std::vector<double> k(2 * radius + 1);
  double sum = 0;
  for (int i = -radius; i <= radius; ++i) {
    k[i + radius] = std::exp(-0.5 * (i / sigma) * (i / sigma));
    sum += k[i + radius];
  }
  std::vector<float> out(k.size());
  for (std::size_t i = 0; i < k.size(); ++i) out[i] = static_cast<float>(k[i] / sum);
  return out;
}

// Mirror index without repeating the edge sample (reflect-101).
inline std::int64_t mirror(std::int64_t i, std::int64_t n) {
  if (n == 1) return 0;
  const std::int64_t period = 2 * (n - 1);
  i = std::abs(i) % period;
  return i < n ? i : period - i;
}

void blur_axis(std::vector<float>& data, const Shape3& s, int axis, const std::vector<float>& k) {
  if (k.size() == 1) return;
  const int radius = static_cast<int>(k.size() / 2);
  const std::int64_t n = axis == 0 ? s.z : axis == 1 ? s.y : s.x;
  const std::int64_t stride = axis == 0 ? s.y * s.x : axis == 1 ? s.x : 1;
  std::vector<float> line(static_cast<std::size_t>(n));

  // Iterate over all 1D lines along `axis`.
  const std::int64_t plane_a = axis == 0 ? s.y : s.z;
  const std::int64_t plane_b = axis == 2 ? s.y : s.x;
  for (std::int64_t a = 0; a < plane_a; ++a) {
    for (std::int64_t b = 0; b < plane_b; ++b) {
      std::int64_t base;
      if (axis == 0) base = a * s.x + b;                    // (y,x) fixed
      else if (axis == 1) base = a * s.y * s.x + b;         // (z,x) fixed
      else base = a * s.y * s.x + b * s.x;                  // (z,y) fixed
      for (std::int64_t i = 0; i < n; ++i) line[i] = data[base + i * stride];
      for (std::int64_t i = 0; i < n; ++i) {
        double acc = 0;
        for (int t = -radius; t <= radius; ++t)
          acc += static_cast<double>(k[t + radius]) * line[mirror(i + t, n)];
        data[base + i * stride] = static_cast<float>(acc);
      }
    }
  }
}

}  // namespace

Volume gaussian_blur3d(const Volume& v, Vec3 sigma_vx) {
  std::vector<float> data = v.data();
  blur_axis(data, v.shape(), 0, gaussian_kernel(sigma_vx.z));
  blur_axis(data, v.shape(), 1, gaussian_kernel(sigma_vx.y));
  blur_axis(data, v.shape(), 2, gaussian_kernel(sigma_vx.x));
  return Volume(v.shape(), std::move(data), v.voxel_size_nm(), v.modality(), v.intensity_range(),
                Dtype::F32);
}

// --- degradation ----------------------------------------------------------------

Volume degrade_to_xray(const Volume& em, const PhantomConfig& cfg) {
  cfg.validate();
  if (em.intensity_range().lo < 0.0 || em.intensity_range().hi > 1.0)
    fail(ErrorKind::Config, "degrade_to_xray expects an EM volume normalized to [0,1]");

  Volume blurred = gaussian_blur3d(em, cfg.xray_blur_sigma_vx);
  const Shape3 s = em.shape();
  std::vector<float> data = blurred.data();

  if (cfg.xray_downsample > 1) {
    const std::int64_t k = cfg.xray_downsample;
    const Shape3 bs{(s.z + k - 1) / k, (s.y + k - 1) / k, (s.x + k - 1) / k};
    std::vector<float> blocks(static_cast<std::size_t>(bs.voxels()), 0.0f);
    std::vector<float> counts(static_cast<std::size_t>(bs.voxels()), 0.0f);
    for (std::int64_t z = 0; z < s.z; ++z)
      for (std::int64_t y = 0; y < s.y; ++y)
        for (std::int64_t x = 0; x < s.x; ++x) {
          const std::int64_t bi = ((z / k) * bs.y + y / k) * bs.x + x / k;
          blocks[bi] += data[(z * s.y + y) * s.x + x];
          counts[bi] += 1.0f;
        }
    for (std::size_t i = 0; i < blocks.size(); ++i) blocks[i] /= counts[i];
    for (std::int64_t z = 0; z < s.z; ++z)
      for (std::int64_t y = 0; y < s.y; ++y)
        for (std::int64_t x = 0; x < s.x; ++x)
          data[(z * s.y + y) * s.x + x] = blocks[((z / k) * bs.y + y / k) * bs.x + x / k];
  }

  Rng rng = Rng(cfg.seed).fork(3);  // stream 3: degradation noise/jitter
  if (cfg.xray_noise_sigma > 0) {
    for (auto& v : data) v += static_cast<float>(rng.normal(0.0, cfg.xray_noise_sigma));
  }
  if (cfg.intensity_jitter > 0) {
    const double a = 1.0 + cfg.intensity_jitter * rng.uniform(-1.0, 1.0);
    const double b = 0.5 * cfg.intensity_jitter * rng.uniform(-1.0, 1.0);
    for (auto& v : data) v = static_cast<float>(a * v + b);
  }
  for (auto& v : data) v = std::clamp(v, 0.0f, 1.0f);

  return Volume(s, std::move(data), em.voxel_size_nm(), Modality::Xray, {0, 1}, Dtype::F32);
}

// --- phantom generation ----------------------------------------------------------

VolumePair generate_phantom(const PhantomConfig& cfg) {
  cfg.validate();
  Rng rng = Rng(cfg.seed).fork(1);

  const Shape3 s = cfg.size;
  const int n = cfg.n_cells;

  // Distances are measured in units of the X voxel pitch so the membrane
  // halfwidth stays meaningful on anisotropic grids.
  const double az = cfg.voxel_size_nm.z / cfg.voxel_size_nm.x;
  const double ay = cfg.voxel_size_nm.y / cfg.voxel_size_nm.x;

  std::vector<double> sz(n), sy(n), sx(n), cell_intensity(n);
  for (int i = 0; i < n; ++i) sz[i] = rng.uniform(0.0, static_cast<double>(s.z)) * az;
  for (int i = 0; i < n; ++i) sy[i] = rng.uniform(0.0, static_cast<double>(s.y)) * ay;
  for (int i = 0; i < n; ++i) sx[i] = rng.uniform(0.0, static_cast<double>(s.x));
  for (int i = 0; i < n; ++i)
    cell_intensity[i] = std::clamp(0.72 + cfg.intensity_jitter * rng.uniform(-1.0, 1.0), 0.3, 0.95);

  // Pairwise site distances, needed for exact point-to-bisector distances.
  std::vector<double> site_dist(static_cast<std::size_t>(n) * n, 0.0);
  for (int i = 0; i < n; ++i)
    for (int j = 0; j < n; ++j) {
      const double dz = sz[i] - sz[j], dy = sy[i] - sy[j], dx = sx[i] - sx[j];
      site_dist[static_cast<std::size_t>(i) * n + j] = std::sqrt(dz * dz + dy * dy + dx * dx);
    }

  const std::size_t nvox = static_cast<std::size_t>(s.voxels());
  std::vector<float> label(nvox), em(nvox);
  std::vector<double> d2(n);

  const double half = cfg.membrane_halfwidth_vx;
  constexpr double kMembraneValue = 0.12;

  std::size_t idx = 0;
  std::int64_t n_membrane = 0;
  for (std::int64_t z = 0; z < s.z; ++z) {
    const double pz = (z + 0.5) * az;
    for (std::int64_t y = 0; y < s.y; ++y) {
      const double py = (y + 0.5) * ay;
      for (std::int64_t x = 0; x < s.x; ++x, ++idx) {
        const double px = x + 0.5;
        int best = 0;
        double best_d2 = 1e300;
        for (int i = 0; i < n; ++i) {
          const double dz = pz - sz[i], dy = py - sy[i], dx = px - sx[i];
          d2[i] = dz * dz + dy * dy + dx * dx;
          if (d2[i] < best_d2) {
            best_d2 = d2[i];
            best = i;
          }
        }
        // Distance from an interior point to its Voronoi cell boundary is the
        // minimum perpendicular distance to the bisector planes of the owner.
        double boundary = 1e300;
        for (int j = 0; j < n; ++j) {
          if (j == best) continue;
          const double plane = (d2[j] - best_d2) / (2.0 * site_dist[static_cast<std::size_t>(best) * n + j]);
          boundary = std::min(boundary, plane);
        }
        const bool membrane = boundary <= half;
        label[idx] = membrane ? 1.0f : 0.0f;
        n_membrane += membrane;
        em[idx] = static_cast<float>(membrane ? kMembraneValue : cell_intensity[best]);
      }
    }
  }

  const double frac = static_cast<double>(n_membrane) / static_cast<double>(nvox);
  if (frac < 0.02 || frac > 0.6)
    fail(ErrorKind::DegeneratePhantom,
         "membrane fraction " + std::to_string(frac) + " outside [0.02,0.6]; re-seed advised");

  if (cfg.em_noise_sigma > 0) {
    Rng noise = Rng(cfg.seed).fork(2);
    for (auto& v : em) v += static_cast<float>(noise.normal(0.0, cfg.em_noise_sigma));
  }
  for (auto& v : em) v = std::clamp(v, 0.0f, 1.0f);

  Volume em_vol(s, std::move(em), cfg.voxel_size_nm, Modality::Em, {0, 1}, Dtype::F32);
  Volume label_vol(s, std::move(label), cfg.voxel_size_nm, Modality::Label, {0, 1}, Dtype::U8);
  Volume xray_vol = degrade_to_xray(em_vol, cfg);
  return VolumePair(std::move(xray_vol), std::move(em_vol), std::move(label_vol));
}

}  // namespace xem
