#pragma once

#include "xem/models.hpp"
#include "xem/volume.hpp"

namespace xem {

// Full-volume reconstruction: mean in [0,1] (denormalized) and the raw
// log-variance map.
struct ReconVolumes {
  Volume mean;
  Volume log_variance;
};

// Tiled inference over overlapping crops, blended by linear feathering. The
// volume is reflect-padded so every axis the generator downsamples is a
// multiple of 2^depth; the tile is clamped to the padded extents. `xray` is a
// stored [0,1] volume; normalization happens inside.
ReconVolumes reconstruct_volume(UNetGenerator& gen, const Volume& xray, Shape3 tile,
                                int overlap = 16);

}  // namespace xem
