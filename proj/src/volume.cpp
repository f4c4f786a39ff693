#include "xem/volume.hpp"

#include <bit>
#include <cmath>
#include <cstring>
#include <fstream>
#include <mutex>

#include <nlohmann/json.hpp>

namespace xem {

static_assert(std::endian::native == std::endian::little,
              "v3d raw payloads are little-endian; big-endian hosts are unsupported");

using nlohmann::json;

const char* to_string(ErrorKind k) {
  switch (k) {
    case ErrorKind::Format: return "format error";
    case ErrorKind::LengthMismatch: return "length-mismatch error";
    case ErrorKind::DegenerateRange: return "degenerate-range error";
    case ErrorKind::CropTooLarge: return "crop-too-large error";
    case ErrorKind::Bounds: return "bounds error";
    case ErrorKind::Shape: return "shape error";
    case ErrorKind::Label: return "label error";
    case ErrorKind::EmptyInput: return "empty-input error";
    case ErrorKind::DegeneratePhantom: return "degenerate-phantom error";
    case ErrorKind::Config: return "configuration error";
    case ErrorKind::NanAbort: return "nan-abort error";
    case ErrorKind::Io: return "io error";
  }
  return "error";
}

const char* to_string(Modality m) {
  switch (m) {
    case Modality::Xray: return "xray";
    case Modality::Em: return "em";
    case Modality::Label: return "label";
    case Modality::Probability: return "probability";
    case Modality::Variance: return "variance";
  }
  return "?";
}

const char* to_string(Dtype d) { return d == Dtype::U8 ? "u8" : "f32"; }

const char* to_string(Axis a) {
  switch (a) {
    case Axis::XY: return "xy";
    case Axis::XZ: return "xz";
    case Axis::YZ: return "yz";
  }
  return "?";
}

Modality modality_from_string(const std::string& s) {
  if (s == "xray") return Modality::Xray;
  if (s == "em") return Modality::Em;
  if (s == "label") return Modality::Label;
  if (s == "probability") return Modality::Probability;
  if (s == "variance") return Modality::Variance;
  fail(ErrorKind::Format, "unknown modality '" + s + "'");
}

Dtype dtype_from_string(const std::string& s) {
  if (s == "u8") return Dtype::U8;
  if (s == "f32") return Dtype::F32;
  fail(ErrorKind::Format, "unknown dtype '" + s + "'");
}

namespace {

void validate_meta(const Shape3& shape, const Range& range) {
  if (shape.z < 1 || shape.y < 1 || shape.x < 1)
    fail(ErrorKind::Shape, "all volume dimensions must be >= 1");
  if (!(range.lo < range.hi))
    fail(ErrorKind::DegenerateRange, "intensity_range requires lo < hi");
}

void validate_values(const std::vector<float>& data, Modality modality) {
  for (float v : data) {
    if (!std::isfinite(v)) fail(ErrorKind::Format, "volume contains non-finite values");
  }
  if (modality == Modality::Label) {
    for (float v : data) {
      if (v != 0.0f && v != 1.0f) fail(ErrorKind::Label, "label volume must be binary {0,1}");
    }
  } else if (modality == Modality::Probability) {
    for (float v : data) {
      if (v < 0.0f || v > 1.0f)
        fail(ErrorKind::Format, "probability volume must lie in [0,1]");
    }
  }
}

}  // namespace

struct Volume::LazySource {
  std::filesystem::path raw_path;
  Dtype dtype;
  Shape3 shape;
  Modality modality;
  mutable std::once_flag once;
  mutable std::shared_ptr<const std::vector<float>> materialized;
};

Volume::Volume(Shape3 shape, std::vector<float> data, Vec3 voxel_size_nm, Modality modality,
               Range intensity_range, Dtype dtype)
    : shape_(shape),
      voxel_size_nm_(voxel_size_nm),
      modality_(modality),
      intensity_range_(intensity_range),
      dtype_(dtype) {
  validate_meta(shape, intensity_range);
  if (voxel_size_nm.z <= 0 || voxel_size_nm.y <= 0 || voxel_size_nm.x <= 0)
    fail(ErrorKind::Format, "voxel_size_nm must be positive");
  if (static_cast<std::int64_t>(data.size()) != shape.voxels())
    fail(ErrorKind::LengthMismatch, "data size does not match shape");
  validate_values(data, modality);
  data_ = std::make_shared<const std::vector<float>>(std::move(data));
}

bool Volume::materialized() const { return data_ != nullptr; }

const std::vector<float>& Volume::data() const {
  if (data_) return *data_;
  if (!lazy_) fail(ErrorKind::Format, "empty volume");
  std::call_once(lazy_->once, [&] {
    std::ifstream in(lazy_->raw_path, std::ios::binary);
    if (!in) fail(ErrorKind::Io, "cannot open raw payload " + lazy_->raw_path.string());
    const std::int64_t n = lazy_->shape.voxels();
    auto out = std::make_shared<std::vector<float>>();
    out->resize(static_cast<std::size_t>(n));
    if (lazy_->dtype == Dtype::U8) {
      constexpr std::int64_t kChunk = 1 << 22;
      std::vector<unsigned char> buf(static_cast<std::size_t>(std::min(n, kChunk)));
      std::int64_t done = 0;
      while (done < n) {
        const std::int64_t take = std::min(kChunk, n - done);
        in.read(reinterpret_cast<char*>(buf.data()), take);
        if (in.gcount() != take) fail(ErrorKind::Io, "short read on " + lazy_->raw_path.string());
        for (std::int64_t i = 0; i < take; ++i)
          (*out)[static_cast<std::size_t>(done + i)] = static_cast<float>(buf[static_cast<std::size_t>(i)]);
        done += take;
      }
    } else {
      in.read(reinterpret_cast<char*>(out->data()), n * 4);
      if (in.gcount() != n * 4) fail(ErrorKind::Io, "short read on " + lazy_->raw_path.string());
    }
    validate_values(*out, lazy_->modality);
    lazy_->materialized = std::move(out);
  });
  // Safe: lazy_ is never reset once set, and materialized is written once.
  const_cast<Volume*>(this)->data_ = lazy_->materialized;
  return *data_;
}

VolumePair::VolumePair(Volume xray_in, Volume em_in, std::optional<Volume> labels_in)
    : xray(std::move(xray_in)), em(std::move(em_in)), labels(std::move(labels_in)) {
  if (!(xray.shape() == em.shape()))
    fail(ErrorKind::Shape, "xray and em shapes differ");
  if (!(xray.voxel_size_nm() == em.voxel_size_nm()))
    fail(ErrorKind::Shape, "xray and em voxel sizes differ");
  if (labels) {
    if (!(labels->shape() == em.shape()))
      fail(ErrorKind::Shape, "labels shape differs from pair");
    if (!(labels->voxel_size_nm() == em.voxel_size_nm()))
      fail(ErrorKind::Shape, "labels voxel size differs from pair");
    if (labels->modality() != Modality::Label)
      fail(ErrorKind::Label, "labels volume must have modality=label");
  }
}

// --- v3d io ------------------------------------------------------------------

namespace {

// Resolve a user-facing path (".v3d", ".json", ".raw" or bare stem) to the
// (header, raw) file pair.
struct V3dPaths {
  std::filesystem::path header;
  std::filesystem::path raw;
};

V3dPaths resolve_for_load(const std::filesystem::path& path) {
  namespace fs = std::filesystem;
  const std::string ext = path.extension().string();
  fs::path stem = path;
  if (ext == ".v3d" || ext == ".json" || ext == ".raw") stem.replace_extension();
  fs::path raw = stem;
  raw += ".raw";
  for (const char* header_ext : {".v3d", ".json"}) {
    fs::path header = stem;
    header += header_ext;
    if (fs::exists(header)) return {header, raw};
  }
  fail(ErrorKind::Format, "no v3d header found for " + path.string());
}

V3dPaths resolve_for_save(const std::filesystem::path& path) {
  namespace fs = std::filesystem;
  const std::string ext = path.extension().string();
  fs::path stem = path;
  if (ext == ".v3d" || ext == ".json" || ext == ".raw") stem.replace_extension();
  fs::path header = stem;
  header += (ext == ".json") ? ".json" : ".v3d";
  fs::path raw = stem;
  raw += ".raw";
  return {header, raw};
}

}  // namespace

Volume load_volume(const std::filesystem::path& path) {
  namespace fs = std::filesystem;
  const V3dPaths p = resolve_for_load(path);

  std::ifstream in(p.header);
  if (!in) fail(ErrorKind::Io, "cannot open header " + p.header.string());
  json j;
  try {
    in >> j;
  } catch (const json::exception& e) {
    fail(ErrorKind::Format, "corrupt v3d header " + p.header.string() + ": " + e.what());
  }

  Volume v;
  try {
    const auto shape = j.at("shape");
    if (!shape.is_array() || shape.size() != 3) fail(ErrorKind::Format, "shape must be [Z,Y,X]");
    v.shape_ = {shape[0].get<std::int64_t>(), shape[1].get<std::int64_t>(),
                shape[2].get<std::int64_t>()};
    v.dtype_ = dtype_from_string(j.at("dtype").get<std::string>());
    const auto vs = j.at("voxel_size_nm");
    v.voxel_size_nm_ = {vs.at(0).get<double>(), vs.at(1).get<double>(), vs.at(2).get<double>()};
    v.modality_ = modality_from_string(j.at("modality").get<std::string>());
    const auto ir = j.at("intensity_range");
    v.intensity_range_ = {ir.at(0).get<double>(), ir.at(1).get<double>()};
  } catch (const json::exception& e) {
    fail(ErrorKind::Format, "missing v3d header field: " + std::string(e.what()));
  }
  validate_meta(v.shape_, v.intensity_range_);
  if (v.voxel_size_nm_.z <= 0 || v.voxel_size_nm_.y <= 0 || v.voxel_size_nm_.x <= 0)
    fail(ErrorKind::Format, "voxel_size_nm must be positive");

  std::error_code ec;
  const auto fsize = fs::file_size(p.raw, ec);
  if (ec) fail(ErrorKind::Io, "cannot stat raw payload " + p.raw.string());
  const std::uint64_t expect =
      static_cast<std::uint64_t>(v.shape_.voxels()) * (v.dtype_ == Dtype::U8 ? 1 : 4);
  if (fsize != expect)
    fail(ErrorKind::LengthMismatch, "raw payload " + p.raw.string() + " has " +
                                        std::to_string(fsize) + " bytes, header implies " +
                                        std::to_string(expect));

  auto src = std::make_shared<Volume::LazySource>();
  src->raw_path = p.raw;
  src->dtype = v.dtype_;
  src->shape = v.shape_;
  src->modality = v.modality_;
  v.lazy_ = std::move(src);
  return v;
}

void save_volume(const Volume& v, const std::filesystem::path& path) {
  const V3dPaths p = resolve_for_save(path);
  if (p.header.has_parent_path()) std::filesystem::create_directories(p.header.parent_path());

  json j;
  j["shape"] = {v.shape().z, v.shape().y, v.shape().x};
  j["dtype"] = to_string(v.dtype());
  j["voxel_size_nm"] = {v.voxel_size_nm().z, v.voxel_size_nm().y, v.voxel_size_nm().x};
  j["modality"] = to_string(v.modality());
  j["intensity_range"] = {v.intensity_range().lo, v.intensity_range().hi};

  {
    std::ofstream out(p.header);
    if (!out) fail(ErrorKind::Io, "cannot write header " + p.header.string());
    out << j.dump(2) << "\n";
  }

  std::ofstream out(p.raw, std::ios::binary);
  if (!out) fail(ErrorKind::Io, "cannot write raw payload " + p.raw.string());
  const auto& data = v.data();
  if (v.dtype() == Dtype::U8) {
    std::vector<unsigned char> buf(data.size());
    for (std::size_t i = 0; i < data.size(); ++i) {
      const float c = std::min(std::max(data[i], 0.0f), 255.0f);
      buf[i] = static_cast<unsigned char>(std::lrint(c));
    }
    out.write(reinterpret_cast<const char*>(buf.data()), static_cast<std::streamsize>(buf.size()));
  } else {
    out.write(reinterpret_cast<const char*>(data.data()),
              static_cast<std::streamsize>(data.size() * 4));
  }
  if (!out) fail(ErrorKind::Io, "short write on " + p.raw.string());
}

// --- transforms ----------------------------------------------------------------

Volume normalize(const Volume& v, NormMode mode) {
  const Range r = v.intensity_range();
  if (!(r.lo < r.hi)) fail(ErrorKind::DegenerateRange, "cannot normalize degenerate range");
  const double scale = (mode == NormMode::Unit ? 1.0 : 2.0) / r.span();
  const double offset = mode == NormMode::Unit ? 0.0 : -1.0;
  const auto& in = v.data();
  std::vector<float> out(in.size());
  for (std::size_t i = 0; i < in.size(); ++i)
    out[i] = static_cast<float>((in[i] - r.lo) * scale + offset);
  const Range target = mode == NormMode::Unit ? Range{0, 1} : Range{-1, 1};
  return Volume(v.shape(), std::move(out), v.voxel_size_nm(), v.modality(), target, Dtype::F32);
}

Volume denormalize(const Volume& v, Range original_range, NormMode mode) {
  const double scale = original_range.span() / (mode == NormMode::Unit ? 1.0 : 2.0);
  const double offset = mode == NormMode::Unit ? 0.0 : 1.0;
  const auto& in = v.data();
  std::vector<float> out(in.size());
  for (std::size_t i = 0; i < in.size(); ++i)
    out[i] = static_cast<float>((in[i] + offset) * scale + original_range.lo);
  return Volume(v.shape(), std::move(out), v.voxel_size_nm(), v.modality(), original_range,
                Dtype::F32);
}

Volume crop_volume(const Volume& v, Shape3 offset, Shape3 size) {
  const Shape3& s = v.shape();
  if (offset.z < 0 || offset.y < 0 || offset.x < 0 || offset.z + size.z > s.z ||
      offset.y + size.y > s.y || offset.x + size.x > s.x)
    fail(ErrorKind::Bounds, "crop window outside volume");
  const auto& in = v.data();
  std::vector<float> out(static_cast<std::size_t>(size.voxels()));
  std::size_t o = 0;
  for (std::int64_t z = 0; z < size.z; ++z)
    for (std::int64_t y = 0; y < size.y; ++y) {
      const float* row = in.data() + v.index(offset.z + z, offset.y + y, offset.x);
      std::memcpy(out.data() + o, row, static_cast<std::size_t>(size.x) * 4);
      o += static_cast<std::size_t>(size.x);
    }
  return Volume(size, std::move(out), v.voxel_size_nm(), v.modality(), v.intensity_range(),
                v.dtype());
}

VolumePair random_crop_pair(const VolumePair& pair, Shape3 size, Rng& rng) {
  const Shape3& s = pair.em.shape();
  if (size.z > s.z || size.y > s.y || size.x > s.x)
    fail(ErrorKind::CropTooLarge, "crop " + std::to_string(size.z) + "x" + std::to_string(size.y) +
                                      "x" + std::to_string(size.x) + " exceeds volume " +
                                      std::to_string(s.z) + "x" + std::to_string(s.y) + "x" +
                                      std::to_string(s.x));
  if (size.z < 1 || size.y < 1 || size.x < 1) fail(ErrorKind::Bounds, "crop size must be >= 1");
  const Shape3 offset{rng.uniform_int(s.z - size.z + 1), rng.uniform_int(s.y - size.y + 1),
                      rng.uniform_int(s.x - size.x + 1)};
  std::optional<Volume> labels;
  if (pair.labels) labels = crop_volume(*pair.labels, offset, size);
  return VolumePair(crop_volume(pair.xray, offset, size), crop_volume(pair.em, offset, size),
                    std::move(labels));
}

std::int64_t axis_extent(const Shape3& s, Axis axis) {
  switch (axis) {
    case Axis::XY: return s.z;
    case Axis::XZ: return s.y;
    case Axis::YZ: return s.x;
  }
  return 0;
}

Slice2D extract_slice(const Volume& v, Axis axis, std::int64_t index) {
  const Shape3& s = v.shape();
  const std::int64_t extent = axis_extent(s, axis);
  if (index < 0 || index >= extent)
    fail(ErrorKind::Bounds, "slice index " + std::to_string(index) + " outside [0," +
                                std::to_string(extent - 1) + "] for axis " +
                                std::string(to_string(axis)));
  const auto& d = v.data();
  Slice2D out;
  switch (axis) {
    case Axis::XY: {  // (Y,X)
      out.rows = s.y;
      out.cols = s.x;
      out.v.assign(d.begin() + index * s.y * s.x, d.begin() + (index + 1) * s.y * s.x);
      break;
    }
    case Axis::XZ: {  // (Z,X)
      out.rows = s.z;
      out.cols = s.x;
      out.v.resize(static_cast<std::size_t>(s.z * s.x));
      for (std::int64_t z = 0; z < s.z; ++z)
        std::memcpy(out.v.data() + z * s.x, d.data() + v.index(z, index, 0),
                    static_cast<std::size_t>(s.x) * 4);
      break;
    }
    case Axis::YZ: {  // (Z,Y)
      out.rows = s.z;
      out.cols = s.y;
      out.v.resize(static_cast<std::size_t>(s.z * s.y));
      for (std::int64_t z = 0; z < s.z; ++z)
        for (std::int64_t y = 0; y < s.y; ++y) out.v[z * s.y + y] = d[v.index(z, y, index)];
      break;
    }
  }
  return out;
}

}  // namespace xem
