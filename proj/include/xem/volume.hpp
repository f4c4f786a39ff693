#pragma once

#include <array>
#include <cstdint>
#include <filesystem>
#include <memory>
#include <optional>
#include <string>
#include <utility>
#include <vector>

#include "xem/error.hpp"
#include "xem/rng.hpp"

namespace xem {

enum class Modality { Xray, Em, Label, Probability, Variance };
enum class Dtype { U8, F32 };

// Slicing planes. XY slices vary the Z index, XZ vary Y, YZ vary X.
// Extracted slice shapes: XY -> (Y,X), XZ -> (Z,X), YZ -> (Z,Y).
enum class Axis { XY, XZ, YZ };

inline constexpr std::array<Axis, 3> kAllAxes = {Axis::XY, Axis::XZ, Axis::YZ};

const char* to_string(Modality m);
const char* to_string(Dtype d);
const char* to_string(Axis a);
Modality modality_from_string(const std::string& s);
Dtype dtype_from_string(const std::string& s);

// Index order is [Z,Y,X] everywhere, matching the on-disk raw layout.
struct Shape3 {
  std::int64_t z = 0, y = 0, x = 0;
  std::int64_t voxels() const { return z * y * x; }
  bool operator==(const Shape3&) const = default;
};

struct Vec3 {
  double z = 0, y = 0, x = 0;
  bool operator==(const Vec3&) const = default;
};

struct Range {
  double lo = 0, hi = 1;
  double span() const { return hi - lo; }
  bool operator==(const Range&) const = default;
};

// 3D scalar grid with voxel-size metadata. Immutable after construction; the
// payload is shared, so copies are cheap and safe to hand to parallel workers.
// Payloads loaded from disk stay on disk until first access.
class Volume {
 public:
  Volume() = default;
  Volume(Shape3 shape, std::vector<float> data, Vec3 voxel_size_nm, Modality modality,
         Range intensity_range, Dtype dtype = Dtype::F32);

  const Shape3& shape() const { return shape_; }
  const Vec3& voxel_size_nm() const { return voxel_size_nm_; }
  Modality modality() const { return modality_; }
  Range intensity_range() const { return intensity_range_; }
  Dtype dtype() const { return dtype_; }

  // Materializes a lazily opened payload on first call.
  const std::vector<float>& data() const;
  bool materialized() const;

  std::int64_t index(std::int64_t z, std::int64_t y, std::int64_t x) const {
    return (z * shape_.y + y) * shape_.x + x;
  }
  float at(std::int64_t z, std::int64_t y, std::int64_t x) const { return data()[index(z, y, x)]; }

 private:
  friend Volume load_volume(const std::filesystem::path&);

  struct LazySource;

  Shape3 shape_;
  Vec3 voxel_size_nm_{1, 1, 1};
  Modality modality_ = Modality::Em;
  Range intensity_range_{0, 1};
  Dtype dtype_ = Dtype::F32;
  std::shared_ptr<const std::vector<float>> data_;
  std::shared_ptr<LazySource> lazy_;
};

// Aligned (X-ray, EM) pair on one grid, optionally with binary membrane labels.
struct VolumePair {
  Volume xray;
  Volume em;
  std::optional<Volume> labels;

  VolumePair() = default;
  VolumePair(Volume xray, Volume em, std::optional<Volume> labels = std::nullopt);
};

struct Slice2D {
  std::int64_t rows = 0, cols = 0;
  std::vector<float> v;

  float& at(std::int64_t r, std::int64_t c) { return v[r * cols + c]; }
  float at(std::int64_t r, std::int64_t c) const { return v[r * cols + c]; }
  std::int64_t size() const { return rows * cols; }
};

// --- v3d on-disk format -----------------------------------------------------
//
// A volume <stem> is a JSON header next to a raw payload:
//   <stem>.json (or <stem>.v3d) + <stem>.raw
// Header fields: {"shape":[Z,Y,X], "dtype":"u8"|"f32", "voxel_size_nm":[z,y,x],
//                 "modality":"...", "intensity_range":[lo,hi]}.
// Raw payload: little-endian, row-major [Z,Y,X], no compression, no header.
// load/save accept the ".v3d", ".json" or bare-stem spellings of the same
// volume; ".v3d" is the header itself under the logical-volume name.

Volume load_volume(const std::filesystem::path& path);
void save_volume(const Volume& v, const std::filesystem::path& path);

enum class NormMode { Unit, Symmetric };

// Affine remap of v.intensity_range onto [0,1] (Unit) or [-1,1] (Symmetric).
// The result is f32 with the target range recorded; the inverse map is
// recoverable from the source volume's range via denormalize().
Volume normalize(const Volume& v, NormMode mode);
Volume denormalize(const Volume& v, Range original_range, NormMode mode);

// One spatial window applied to every member of the pair; offsets drawn
// uniformly from the valid set. Deterministic given the rng state.
VolumePair random_crop_pair(const VolumePair& pair, Shape3 size, Rng& rng);

Volume crop_volume(const Volume& v, Shape3 offset, Shape3 size);

Slice2D extract_slice(const Volume& v, Axis axis, std::int64_t index);

// Extent orthogonal to the slicing plane (number of slices along `axis`).
std::int64_t axis_extent(const Shape3& s, Axis axis);

}  // namespace xem
