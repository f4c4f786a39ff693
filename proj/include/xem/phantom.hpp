#pragma once

#include <nlohmann/json_fwd.hpp>

#include "xem/volume.hpp"

namespace xem {

// Synthetic tissue stand-in: Voronoi cells whose boundaries act as membranes.
// Everything is a pure function of the config, bit-identical across runs.
struct PhantomConfig {
  Shape3 size{64, 96, 96};
  int n_cells = 40;
  double membrane_halfwidth_vx = 1.0;
  double em_noise_sigma = 0.03;
  Vec3 xray_blur_sigma_vx{2.0, 1.0, 1.0};  // Z sigma >= XY sigma by default
  int xray_downsample = 2;
  double xray_noise_sigma = 0.05;
  double intensity_jitter = 0.08;
  std::uint64_t seed = 0;
  Vec3 voxel_size_nm{100, 100, 100};

  void validate() const;
};

void to_json(nlohmann::json& j, const PhantomConfig& cfg);
void from_json(const nlohmann::json& j, PhantomConfig& cfg);

// Aligned (xray, em, labels) triple. EM is dark membranes on bright jittered
// cell interiors; X-ray is degrade_to_xray(EM).
VolumePair generate_phantom(const PhantomConfig& cfg);

// The forward model of the modality gap: anisotropic Gaussian blur, block
// downsample + nearest upsample back to the grid, additive noise, a global
// affine intensity shift, clip to [0,1].
Volume degrade_to_xray(const Volume& em, const PhantomConfig& cfg);

// Separable Gaussian blur with mirror (reflect-101) boundaries; sigma in
// voxels per axis, kernel truncated at ceil(3*sigma). sigma=0 is a copy.
Volume gaussian_blur3d(const Volume& v, Vec3 sigma_vx);

}  // namespace xem
