#include "xem/models.hpp"

#include <algorithm>
#include <cstring>
#include <fstream>
#include <optional>

#include <nlohmann/json.hpp>

#include "xem/losses.hpp"

namespace xem {

using nlohmann::json;

const char* to_string(Dims d) { return d == Dims::D2 ? "2d" : "3d"; }
const char* to_string(ReconLoss r) { return r == ReconLoss::Nll ? "nll" : "l1"; }

const char* to_string(VariantName v) {
  switch (v) {
    case VariantName::Full2d: return "full2d";
    case VariantName::Hybrid3d: return "hybrid3d";
    case VariantName::Full3d: return "full3d";
    case VariantName::Full3dL1: return "full3d_l1";
    case VariantName::Full3dSeg: return "full3d_seg";
  }
  return "?";
}

Dims dims_from_string(const std::string& s) {
  if (s == "2d") return Dims::D2;
  if (s == "3d") return Dims::D3;
  fail(ErrorKind::Config, "unknown dims '" + s + "' (expected 2d|3d)");
}

VariantName variant_name_from_string(const std::string& s) {
  for (VariantName v : {VariantName::Full2d, VariantName::Hybrid3d, VariantName::Full3d,
                        VariantName::Full3dL1, VariantName::Full3dSeg})
    if (s == to_string(v)) return v;
  fail(ErrorKind::Config,
       "unknown variant '" + s + "' (expected full2d|hybrid3d|full3d|full3d_l1|full3d_seg)");
}

VariantSpec variant_spec(VariantName name) {
  switch (name) {
    case VariantName::Full2d:
      return {name, Dims::D2, Dims::D2, ReconLoss::Nll, false};
    case VariantName::Hybrid3d:
      return {name, Dims::D3, Dims::D2, ReconLoss::Nll, false};
    case VariantName::Full3d:
      return {name, Dims::D3, Dims::D3, ReconLoss::Nll, false};
    case VariantName::Full3dL1:
      return {name, Dims::D3, Dims::D3, ReconLoss::L1, false};
    case VariantName::Full3dSeg:
      return {name, Dims::D3, Dims::D3, ReconLoss::Nll, true};
  }
  fail(ErrorKind::Config, "unknown variant");
}

VariantSpec variant_spec_from_string(const std::string& name) {
  return variant_spec(variant_name_from_string(name));
}

void to_json(json& j, const VariantSpec& v) {
  j = json{{"name", to_string(v.name)},
           {"generator_dims", to_string(v.generator_dims)},
           {"discriminator_dims", to_string(v.discriminator_dims)},
           {"recon_loss", to_string(v.recon_loss)},
           {"use_seg_loss", v.use_seg_loss}};
}

void from_json(const json& j, VariantSpec& v) {
  if (j.is_string()) {
    v = variant_spec_from_string(j.get<std::string>());
    return;
  }
  v = variant_spec_from_string(j.at("name").get<std::string>());
  // Tolerate the expanded form but insist it agrees with the table.
  VariantSpec parsed = v;
  if (j.contains("generator_dims"))
    parsed.generator_dims = dims_from_string(j.at("generator_dims").get<std::string>());
  if (j.contains("discriminator_dims"))
    parsed.discriminator_dims = dims_from_string(j.at("discriminator_dims").get<std::string>());
  if (j.contains("recon_loss")) {
    const auto s = j.at("recon_loss").get<std::string>();
    if (s != "nll" && s != "l1") fail(ErrorKind::Config, "unknown recon_loss '" + s + "'");
    parsed.recon_loss = s == "nll" ? ReconLoss::Nll : ReconLoss::L1;
  }
  if (j.contains("use_seg_loss")) parsed.use_seg_loss = j.at("use_seg_loss").get<bool>();
  if (parsed.generator_dims != v.generator_dims ||
      parsed.discriminator_dims != v.discriminator_dims || parsed.recon_loss != v.recon_loss ||
      parsed.use_seg_loss != v.use_seg_loss)
    fail(ErrorKind::Config,
         std::string("variant fields inconsistent with '") + to_string(v.name) + "'");
}

void to_json(json& j, const GeneratorSpec& s) {
  j = json{{"dims", to_string(s.dims)}, {"base_channels", s.base_channels}, {"depth", s.depth}};
}

void from_json(const json& j, GeneratorSpec& s) {
  s = GeneratorSpec{};
  if (j.contains("dims")) s.dims = dims_from_string(j.at("dims").get<std::string>());
  if (j.contains("base_channels")) s.base_channels = j.at("base_channels").get<int>();
  if (j.contains("depth")) s.depth = j.at("depth").get<int>();
}

void to_json(json& j, const DiscriminatorSpec& s) {
  j = json{{"dims", to_string(s.dims)},
           {"base_channels", s.base_channels},
           {"n_layers", s.n_layers},
           {"conditional", s.conditional}};
}

void from_json(const json& j, DiscriminatorSpec& s) {
  s = DiscriminatorSpec{};
  if (j.contains("dims")) s.dims = dims_from_string(j.at("dims").get<std::string>());
  if (j.contains("base_channels")) s.base_channels = j.at("base_channels").get<int>();
  if (j.contains("n_layers")) s.n_layers = j.at("n_layers").get<int>();
  if (j.contains("conditional")) s.conditional = j.at("conditional").get<bool>();
}

void to_json(json& j, const SegNetSpec& s) {
  j = json{{"base_channels", s.base_channels}, {"depth", s.depth}};
}

void from_json(const json& j, SegNetSpec& s) {
  s = SegNetSpec{};
  if (j.contains("base_channels")) s.base_channels = j.at("base_channels").get<int>();
  if (j.contains("depth")) s.depth = j.at("depth").get<int>();
}

GeneratorSpec generator_spec_for(Dims dims) {
  GeneratorSpec s;
  s.dims = dims;
  s.base_channels = dims == Dims::D2 ? 64 : 32;
  s.depth = 4;
  return s;
}

namespace {

int level_channels(int base, int level) { return base << std::min(level, 3); }

nn::Stride3 k3(Dims d) { return d == Dims::D2 ? nn::Stride3{1, 3, 3} : nn::Stride3{3, 3, 3}; }
nn::Stride3 k4(Dims d) { return d == Dims::D2 ? nn::Stride3{1, 4, 4} : nn::Stride3{4, 4, 4}; }
nn::Stride3 s2(Dims d) { return d == Dims::D2 ? nn::Stride3{1, 2, 2} : nn::Stride3{2, 2, 2}; }
nn::Stride3 s1() { return nn::Stride3{1, 1, 1}; }
nn::Stride3 p1(Dims d) { return d == Dims::D2 ? nn::Stride3{0, 1, 1} : nn::Stride3{1, 1, 1}; }

void validate_width_depth(const char* what, int base, int depth, int max_depth = 8) {
  if (base < 1) fail(ErrorKind::Config, std::string(what) + ": base_channels must be >= 1");
  if (depth < 1 || depth > max_depth)
    fail(ErrorKind::Config, std::string(what) + ": depth must be in [1," +
                                std::to_string(max_depth) + "], got " + std::to_string(depth));
}

}  // namespace

namespace detail {

struct EncBlock {
  nn::Conv3d conv;
  std::optional<nn::InstanceNorm> norm;
  nn::LeakyReLU act{0.2f};
};

struct DecBlock {
  nn::UpsampleNearest up;
  nn::Conv3d conv;
  nn::InstanceNorm norm;
  nn::LeakyReLU act{0.0f};  // slope 0 == plain ReLU
  int up_channels = 0;      // left half of the concat, needed to split the gradient
};

// Shared encoder/decoder trunk. Heads (tanh mean, clamped log-variance, or the
// segmentation logit) live in the wrapper classes. A 2D trunk is the same
// machine with unit kernel extent and unit stride along Z plus per-slice
// normalization, so volumes pass through it slice-wise in one call.
struct UNetCore {
  Dims dims;
  int depth;
  int base;
  int in_channels;
  std::string label;  // for error messages: "generator" or "segnet"
  std::vector<EncBlock> enc;
  std::vector<DecBlock> dec;
  nn::UpsampleNearest up_final;
  nn::Conv3d fuse_conv;
  nn::InstanceNorm fuse_norm;
  nn::LeakyReLU fuse_act{0.0f};

  virtual ~UNetCore() = default;

  UNetCore(Dims dims_, int base_, int depth_, int in_channels_, std::string label_, Rng& rng)
      : dims(dims_), depth(depth_), base(base_), in_channels(in_channels_),
        label(std::move(label_)), up_final(s2(dims_)) {
    validate_width_depth(label.c_str(), base, depth);
    const bool per_slice = dims == Dims::D2;
    enc.reserve(depth);
    for (int l = 0; l < depth; ++l) {
      EncBlock b;
      const int cin = l == 0 ? in_channels : level_channels(base, l - 1);
      const int cout = level_channels(base, l);
      b.conv = nn::Conv3d(label + ".enc" + std::to_string(l), cin, cout, k4(dims), s2(dims), p1(dims));
      b.conv.init(rng);
      if (l > 0) {  // pix2pix convention: no norm on the first encoder layer
        b.norm = nn::InstanceNorm(label + ".enc" + std::to_string(l) + ".norm", cout, per_slice);
        b.norm->init(rng);
      }
      enc.push_back(std::move(b));
    }
    dec.resize(std::max(depth - 1, 0));
    for (int l = depth - 2; l >= 0; --l) {
      DecBlock b;
      b.up = nn::UpsampleNearest(s2(dims));
      const int cin = level_channels(base, l + 1) + level_channels(base, l);
      const int cout = level_channels(base, l);
      b.conv = nn::Conv3d(label + ".dec" + std::to_string(l), cin, cout, k3(dims), s1(), p1(dims));
      b.conv.init(rng);
      b.norm = nn::InstanceNorm(label + ".dec" + std::to_string(l) + ".norm", cout, per_slice);
      b.norm.init(rng);
      dec[l] = std::move(b);
    }
    fuse_conv = nn::Conv3d(label + ".fuse", base, base, k3(dims), s1(), p1(dims));
    fuse_conv.init(rng);
    fuse_norm = nn::InstanceNorm(label + ".fuse.norm", base, per_slice);
    fuse_norm.init(rng);
  }

  void check_input(const nn::Tensor& x) const {
    const int div = 1 << depth;
    const auto bad = [&](const char* axis, int extent) {
      fail(ErrorKind::Shape, label + " input " + axis + " extent " + std::to_string(extent) +
                                 " is not a positive multiple of " + std::to_string(div));
    };
    if (dims == Dims::D3 && (x.d() < div || x.d() % div != 0)) bad("depth(Z)", x.d());
    if (x.h() < div || x.h() % div != 0) bad("height(Y)", x.h());
    if (x.w() < div || x.w() % div != 0) bad("width(X)", x.w());
    if (dims == Dims::D2 && x.d() < 1) bad("depth(Z)", x.d());
  }

  // Full-resolution feature map with `base` channels.
  nn::Tensor forward(const nn::Tensor& x) {
    check_input(x);
    std::vector<nn::Tensor> skips(std::max(depth - 1, 0));
    nn::Tensor h = x;
    for (int l = 0; l < depth; ++l) {
      h = enc[l].conv.forward(h);
      if (enc[l].norm) h = enc[l].norm->forward(h);
      h = enc[l].act.forward(h);
      if (l < depth - 1) skips[l] = h;
    }
    for (int l = depth - 2; l >= 0; --l) {
      nn::Tensor u = dec[l].up.forward(h);
      dec[l].up_channels = u.c();
      h = dec[l].conv.forward(nn::concat_channels(u, skips[l]));
      h = dec[l].norm.forward(h);
      h = dec[l].act.forward(h);
    }
    h = up_final.forward(h);
    h = fuse_conv.forward(h);
    h = fuse_norm.forward(h);
    return fuse_act.forward(h);
  }

  // Returns the input gradient when requested (frozen segnet path); parameter
  // gradients accumulate only when accum_params.
  nn::Tensor backward(nn::Tensor g, bool need_input_grad, bool accum_params) {
    g = fuse_act.backward(g);
    g = fuse_norm.backward(g, accum_params);
    g = fuse_conv.backward(g, true, accum_params);
    g = up_final.backward(g);
    std::vector<nn::Tensor> gskip(std::max(depth - 1, 0));
    for (int l = 0; l <= depth - 2; ++l) {
      g = dec[l].act.backward(g);
      g = dec[l].norm.backward(g, accum_params);
      nn::Tensor gcat = dec[l].conv.backward(g, true, accum_params);
      nn::Tensor gu;
      nn::split_channels(gcat, dec[l].up_channels, gu, gskip[l]);
      g = dec[l].up.backward(gu);
    }
    for (int l = depth - 1; l >= 0; --l) {
      if (l < depth - 1) {
        nn::check_same_shape(g, gskip[l], label.c_str());
        for (std::int64_t i = 0; i < g.size(); ++i) g.v[i] += gskip[l].v[i];
        gskip[l] = nn::Tensor();
      }
      g = enc[l].act.backward(g);
      if (enc[l].norm) g = enc[l].norm->backward(g, accum_params);
      g = enc[l].conv.backward(g, need_input_grad || l > 0, accum_params);
    }
    return need_input_grad ? std::move(g) : nn::Tensor();
  }

  void visit(const nn::ParamVisitor& cb) {
    for (auto& b : enc) {
      b.conv.visit(cb);
      if (b.norm) b.norm->visit(cb);
    }
    for (int l = depth - 2; l >= 0; --l) {  // build order
      dec[l].conv.visit(cb);
      dec[l].norm.visit(cb);
    }
    fuse_conv.visit(cb);
    fuse_norm.visit(cb);
  }
};

}  // namespace detail

namespace {

std::vector<nn::ParamRef> collect(const std::function<void(const nn::ParamVisitor&)>& visit_all) {
  std::vector<nn::ParamRef> out;
  visit_all([&](const nn::ParamRef& p) { out.push_back(p); });
  return out;
}

void add_inplace(nn::Tensor& acc, const nn::Tensor& g) {
  nn::check_same_shape(acc, g, "head gradient");
  for (std::int64_t i = 0; i < acc.size(); ++i) acc.v[i] += g.v[i];
}

}  // namespace

// --- UNetGenerator ---------------------------------------------------------------

struct GeneratorHeads {
  nn::Conv3d mean_conv;
  nn::Tanh mean_act;
  nn::Conv3d logvar_conv;
  nn::ClampSym logvar_act{14.0f};
};

namespace detail {
struct GenCore : UNetCore {
  GeneratorHeads heads;
  GenCore(const GeneratorSpec& s, int in_channels, Rng& rng)
      : UNetCore(s.dims, s.base_channels, s.depth, in_channels, "generator", rng) {
    heads.mean_conv = nn::Conv3d("generator.mean", base, 1, k3(dims), s1(), p1(dims));
    heads.mean_conv.init(rng);
    heads.logvar_conv = nn::Conv3d("generator.logvar", base, 1, k3(dims), s1(), p1(dims));
    heads.logvar_conv.init(rng);
  }
};
}  // namespace detail

UNetGenerator::UNetGenerator(GeneratorSpec spec, std::uint64_t init_seed, int in_channels)
    : spec_(spec) {
  Rng rng = Rng(init_seed).fork(0x6e67);  // init stream
  auto core = std::make_unique<detail::GenCore>(spec_, in_channels, rng);
  core_.reset(core.release());
}

UNetGenerator::~UNetGenerator() = default;
UNetGenerator::UNetGenerator(UNetGenerator&&) noexcept = default;
UNetGenerator& UNetGenerator::operator=(UNetGenerator&&) noexcept = default;

GenOutput UNetGenerator::forward(const nn::Tensor& x) {
  auto& core = static_cast<detail::GenCore&>(*core_);
  nn::Tensor feat = core.forward(x);
  GenOutput out;
  out.mean = core.heads.mean_act.forward(core.heads.mean_conv.forward(feat));
  out.log_variance = core.heads.logvar_act.forward(core.heads.logvar_conv.forward(feat));
  return out;
}

void UNetGenerator::backward(const nn::Tensor& g_mean, const nn::Tensor& g_log_variance) {
  auto& core = static_cast<detail::GenCore&>(*core_);
  nn::Tensor gfeat =
      core.heads.mean_conv.backward(core.heads.mean_act.backward(g_mean), true, true);
  add_inplace(gfeat,
              core.heads.logvar_conv.backward(core.heads.logvar_act.backward(g_log_variance),
                                              true, true));
  core.backward(std::move(gfeat), false, true);
}

std::vector<nn::ParamRef> UNetGenerator::params() {
  auto& core = static_cast<detail::GenCore&>(*core_);
  return collect([&](const nn::ParamVisitor& cb) {
    core.visit(cb);
    core.heads.mean_conv.visit(cb);
    core.heads.logvar_conv.visit(cb);
  });
}

void UNetGenerator::zero_grad() {
  for (auto& p : params()) p.g->zero();
}

// --- SegUNet ---------------------------------------------------------------------

namespace detail {
struct SegCore : UNetCore {
  nn::Conv3d logit_conv;
  SegCore(const SegNetSpec& s, Rng& rng)
      : UNetCore(Dims::D2, s.base_channels, s.depth, 1, "segnet", rng) {
    logit_conv = nn::Conv3d("segnet.logit", base, 1, k3(Dims::D2), s1(), p1(Dims::D2));
    logit_conv.init(rng);
  }
};
}  // namespace detail

SegUNet::SegUNet(SegNetSpec spec, std::uint64_t init_seed) : spec_(spec) {
  Rng rng = Rng(init_seed).fork(0x7365);
  auto core = std::make_unique<detail::SegCore>(spec_, rng);
  core_.reset(core.release());
}

SegUNet::~SegUNet() = default;
SegUNet::SegUNet(SegUNet&&) noexcept = default;
SegUNet& SegUNet::operator=(SegUNet&&) noexcept = default;

nn::Tensor SegUNet::forward_logits(const nn::Tensor& x) {
  auto& core = static_cast<detail::SegCore&>(*core_);
  return core.logit_conv.forward(core.forward(x));
}

nn::Tensor SegUNet::forward(const nn::Tensor& x) {
  nn::Tensor logits = forward_logits(x);
  probs_ = nn::Tensor(logits.shape);
  for (std::int64_t i = 0; i < logits.size(); ++i)
    probs_.v[i] = static_cast<float>(1.0 / (1.0 + std::exp(-static_cast<double>(logits.v[i]))));
  return probs_;
}

nn::Tensor SegUNet::backward_input(const nn::Tensor& g_probs) {
  auto& core = static_cast<detail::SegCore&>(*core_);
  if (probs_.empty()) fail(ErrorKind::Shape, "segnet: backward_input before forward");
  nn::check_same_shape(g_probs, probs_, "segnet probability gradient");
  nn::Tensor g_logits(g_probs.shape);
  for (std::int64_t i = 0; i < g_probs.size(); ++i) {
    const double p = probs_.v[i];
    g_logits.v[i] = static_cast<float>(static_cast<double>(g_probs.v[i]) * p * (1.0 - p));
  }
  nn::Tensor gx = core.logit_conv.backward(g_logits, true, false);
  return core.backward(std::move(gx), true, false);
}

void SegUNet::backward_logits(const nn::Tensor& g_logits) {
  auto& core = static_cast<detail::SegCore&>(*core_);
  nn::Tensor gx = core.logit_conv.backward(g_logits, true, true);
  core.backward(std::move(gx), false, true);
}

std::vector<nn::ParamRef> SegUNet::params() {
  auto& core = static_cast<detail::SegCore&>(*core_);
  return collect([&](const nn::ParamVisitor& cb) {
    core.visit(cb);
    core.logit_conv.visit(cb);
  });
}

void SegUNet::zero_grad() {
  for (auto& p : params()) p.g->zero();
}

// --- PatchDiscriminator ----------------------------------------------------------

struct PatchDiscriminator::Impl {
  struct Layer {
    nn::Conv3d conv;
    std::optional<nn::InstanceNorm> norm;
    std::optional<nn::LeakyReLU> act;
  };
  std::vector<Layer> layers;

  Impl(const DiscriminatorSpec& s, int in_channels, Rng& rng) {
    if (s.n_layers < 1 || s.n_layers > 6)
      fail(ErrorKind::Config,
           "discriminator: n_layers must be in [1,6], got " + std::to_string(s.n_layers));
    if (s.base_channels < 1) fail(ErrorKind::Config, "discriminator: base_channels must be >= 1");
    const bool per_slice = s.dims == Dims::D2;
    const auto add = [&](int idx, int cin, int cout, nn::Stride3 stride, bool norm, bool act) {
      Layer l;
      l.conv = nn::Conv3d("disc.c" + std::to_string(idx), cin, cout, k4(s.dims), stride, p1(s.dims));
      l.conv.init(rng);
      if (norm) {
        l.norm = nn::InstanceNorm("disc.c" + std::to_string(idx) + ".norm", cout, per_slice);
        l.norm->init(rng);
      }
      if (act) l.act = nn::LeakyReLU(0.2f);
      layers.push_back(std::move(l));
    };
    int idx = 0;
    add(idx++, in_channels, level_channels(s.base_channels, 0), s2(s.dims), false, true);
    for (int i = 1; i < s.n_layers; ++i)
      add(idx++, level_channels(s.base_channels, i - 1), level_channels(s.base_channels, i),
          s2(s.dims), true, true);
    add(idx++, level_channels(s.base_channels, s.n_layers - 1),
        level_channels(s.base_channels, s.n_layers), s1(), true, true);
    add(idx++, level_channels(s.base_channels, s.n_layers), 1, s1(), false, false);
  }
};

PatchDiscriminator::PatchDiscriminator(DiscriminatorSpec spec, std::uint64_t init_seed,
                                       int in_channels)
    : spec_(spec) {
  Rng rng = Rng(init_seed).fork(0x6473);
  impl_ = std::make_unique<Impl>(spec_, spec_.conditional ? in_channels + 1 : in_channels, rng);
}

PatchDiscriminator::~PatchDiscriminator() = default;
PatchDiscriminator::PatchDiscriminator(PatchDiscriminator&&) noexcept = default;
PatchDiscriminator& PatchDiscriminator::operator=(PatchDiscriminator&&) noexcept = default;

nn::Tensor PatchDiscriminator::forward(const nn::Tensor& y) {
  nn::Tensor h = y;
  for (auto& l : impl_->layers) {
    h = l.conv.forward(h);
    if (l.norm) h = l.norm->forward(h);
    if (l.act) h = l.act->forward(h);
  }
  return h;
}

nn::Tensor PatchDiscriminator::backward(const nn::Tensor& g_logits, bool need_input_grad,
                                        bool accum_params) {
  nn::Tensor g = g_logits;
  for (auto it = impl_->layers.rbegin(); it != impl_->layers.rend(); ++it) {
    if (it->act) g = it->act->backward(g);
    if (it->norm) g = it->norm->backward(g, accum_params);
    const bool need_gx = need_input_grad || std::next(it) != impl_->layers.rend();
    g = it->conv.backward(g, need_gx, accum_params);
  }
  return need_input_grad ? std::move(g) : nn::Tensor();
}

std::vector<nn::ParamRef> PatchDiscriminator::params() {
  return collect([&](const nn::ParamVisitor& cb) {
    for (auto& l : impl_->layers) {
      l.conv.visit(cb);
      if (l.norm) l.norm->visit(cb);
    }
  });
}

void PatchDiscriminator::zero_grad() {
  for (auto& p : params()) p.g->zero();
}

// --- checkpoints -----------------------------------------------------------------

namespace {

constexpr char kParamsMagic[8] = {'X', 'E', 'M', 'P', 'A', 'R', '0', '1'};

template <typename T>
void write_raw(std::ofstream& f, const T& v) {
  f.write(reinterpret_cast<const char*>(&v), sizeof(v));
}

template <typename T>
void read_raw(std::ifstream& f, T& v) {
  f.read(reinterpret_cast<char*>(&v), sizeof(v));
}

[[noreturn]] void fail_params(const std::filesystem::path& p, const std::string& msg) {
  fail(ErrorKind::Format, "params file " + p.string() + ": " + msg);
}

}  // namespace

std::uint64_t params_hash(const std::vector<nn::ParamRef>& params) {
  // FNV-1a over name bytes then the little-endian f32 payload, per parameter.
  std::uint64_t h = 1469598103934665603ULL;
  const auto mix = [&](const void* data, std::size_t n) {
    const auto* b = static_cast<const unsigned char*>(data);
    for (std::size_t i = 0; i < n; ++i) {
      h ^= b[i];
      h *= 1099511628211ULL;
    }
  };
  for (const auto& p : params) {
    mix(p.name.data(), p.name.size());
    mix(p.w->v.data(), p.w->v.size() * sizeof(float));
  }
  return h;
}

void save_params(const std::filesystem::path& dir, const std::vector<nn::ParamRef>& params) {
  std::filesystem::create_directories(dir);
  const auto path = dir / "params.bin";
  const auto tmp = dir / "params.bin.tmp";
  {
    std::ofstream f(tmp, std::ios::binary | std::ios::trunc);
    if (!f) fail(ErrorKind::Io, "cannot open " + tmp.string() + " for writing");
    f.write(kParamsMagic, sizeof(kParamsMagic));
    write_raw(f, static_cast<std::uint32_t>(params.size()));
    for (const auto& p : params) {
      write_raw(f, static_cast<std::uint32_t>(p.name.size()));
      f.write(p.name.data(), static_cast<std::streamsize>(p.name.size()));
      write_raw(f, static_cast<std::uint32_t>(5));
      for (int d : p.w->shape) write_raw(f, static_cast<std::int32_t>(d));
      f.write(reinterpret_cast<const char*>(p.w->v.data()),
              static_cast<std::streamsize>(p.w->v.size() * sizeof(float)));
    }
    if (!f) fail(ErrorKind::Io, "short write to " + tmp.string());
  }
  std::filesystem::rename(tmp, path);
}

void load_params(const std::filesystem::path& dir, const std::vector<nn::ParamRef>& params) {
  const auto path = dir / "params.bin";
  std::ifstream f(path, std::ios::binary);
  if (!f) fail(ErrorKind::Io, "cannot open " + path.string());
  char magic[8];
  f.read(magic, sizeof(magic));
  if (!f || std::memcmp(magic, kParamsMagic, sizeof(magic)) != 0)
    fail_params(path, "bad magic");
  std::uint32_t count = 0;
  read_raw(f, count);
  if (count != params.size())
    fail_params(path, "holds " + std::to_string(count) + " tensors, model expects " +
                          std::to_string(params.size()));
  for (const auto& p : params) {
    std::uint32_t name_len = 0;
    read_raw(f, name_len);
    if (!f || name_len > 4096) fail_params(path, "corrupt tensor name length");
    std::string name(name_len, '\0');
    f.read(name.data(), name_len);
    if (name != p.name)
      fail_params(path, "tensor '" + name + "' where model expects '" + p.name + "'");
    std::uint32_t rank = 0;
    read_raw(f, rank);
    if (rank != 5) fail_params(path, "tensor '" + name + "' has rank " + std::to_string(rank));
    std::array<int, 5> dims{};
    for (int i = 0; i < 5; ++i) {
      std::int32_t d = 0;
      read_raw(f, d);
      dims[i] = d;
    }
    if (dims != p.w->shape)
      fail_params(path, "tensor '" + name + "' shape mismatch");
    f.read(reinterpret_cast<char*>(p.w->v.data()),
           static_cast<std::streamsize>(p.w->v.size() * sizeof(float)));
    if (!f) fail_params(path, "truncated payload for tensor '" + name + "'");
  }
}

void write_checkpoint_spec(const std::filesystem::path& dir, const json& spec) {
  std::filesystem::create_directories(dir);
  const auto tmp = dir / "spec.json.tmp";
  std::ofstream f(tmp, std::ios::trunc);
  if (!f) fail(ErrorKind::Io, "cannot open " + tmp.string() + " for writing");
  f << spec.dump(2) << "\n";
  f.close();
  std::filesystem::rename(tmp, dir / "spec.json");
}

json read_checkpoint_spec(const std::filesystem::path& dir) {
  const auto path = dir / "spec.json";
  std::ifstream f(path);
  if (!f) fail(ErrorKind::Io, "cannot open " + path.string());
  json j = json::parse(f, nullptr, false);
  if (j.is_discarded()) fail(ErrorKind::Format, "invalid JSON in " + path.string());
  return j;
}

void save_segnet_checkpoint(const std::filesystem::path& dir, SegUNet& net) {
  save_params(dir, net.params());
  json spec{{"kind", "segnet"},
            {"segnet", net.spec()},
            {"input_normalization", "symmetric"},
            {"param_hash", params_hash(net.params())}};
  write_checkpoint_spec(dir, spec);
}

SegUNet load_segnet_checkpoint(const std::filesystem::path& dir) {
  const json spec = read_checkpoint_spec(dir);
  if (spec.value("kind", "") != "segnet")
    fail(ErrorKind::Format, dir.string() + ": spec.json kind is not 'segnet'");
  SegUNet net(spec.at("segnet").get<SegNetSpec>(), 0);
  load_params(dir, net.params());
  return net;
}

void save_generator_checkpoint(const std::filesystem::path& dir, UNetGenerator& gen,
                               const VariantSpec& variant, const Shape3& train_crop) {
  save_params(dir, gen.params());
  json spec{{"kind", "generator"},
            {"variant", variant},
            {"generator", gen.spec()},
            {"train_crop", {train_crop.z, train_crop.y, train_crop.x}},
            {"input_normalization", "symmetric"},
            {"param_hash", params_hash(gen.params())}};
  write_checkpoint_spec(dir, spec);
}

GeneratorCheckpoint load_generator_checkpoint(const std::filesystem::path& dir) {
  const json spec = read_checkpoint_spec(dir);
  if (spec.value("kind", "") != "generator")
    fail(ErrorKind::Format, dir.string() + ": spec.json kind is not 'generator'");
  GeneratorCheckpoint ck{UNetGenerator(spec.at("generator").get<GeneratorSpec>(), 0),
                         spec.at("variant").get<VariantSpec>(), Shape3{}};
  const auto crop = spec.at("train_crop");
  ck.train_crop = Shape3{crop.at(0).get<std::int64_t>(), crop.at(1).get<std::int64_t>(),
                         crop.at(2).get<std::int64_t>()};
  load_params(dir, ck.generator.params());
  return ck;
}

void save_discriminator_checkpoint(const std::filesystem::path& dir, PatchDiscriminator& disc) {
  save_params(dir, disc.params());
  json spec{{"kind", "discriminator"},
            {"discriminator", disc.spec()},
            {"param_hash", params_hash(disc.params())}};
  write_checkpoint_spec(dir, spec);
}

PatchDiscriminator load_discriminator_checkpoint(const std::filesystem::path& dir) {
  const json spec = read_checkpoint_spec(dir);
  if (spec.value("kind", "") != "discriminator")
    fail(ErrorKind::Format, dir.string() + ": spec.json kind is not 'discriminator'");
  PatchDiscriminator disc(spec.at("discriminator").get<DiscriminatorSpec>(), 0);
  load_params(dir, disc.params());
  return disc;
}

}  // namespace xem

// --- losses: the piece that needs VariantSpec ------------------------------------

namespace xem {

double total_generator_loss(double loss_g_adv, double loss_recon, std::optional<double> loss_seg,
                            const LossWeights& weights, const VariantSpec& variant) {
  if (variant.use_seg_loss && !loss_seg)
    fail(ErrorKind::Config,
         std::string("variant ") + to_string(variant.name) + " requires a segmentation loss term");
  if (!variant.use_seg_loss && loss_seg)
    fail(ErrorKind::Config, std::string("variant ") + to_string(variant.name) +
                                " does not take a segmentation loss term");
  double total = weights.w_gan * loss_g_adv + weights.w_nll * loss_recon;
  if (loss_seg) total += weights.w_seg * *loss_seg;
  return total;
}

}  // namespace xem
