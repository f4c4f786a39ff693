#pragma once

#include <cstdint>
#include <filesystem>
#include <memory>
#include <optional>
#include <string>
#include <vector>

#include <nlohmann/json_fwd.hpp>

#include "xem/nn/adam.hpp"
#include "xem/nn/layers.hpp"
#include "xem/volume.hpp"

namespace xem {

enum class Dims { D2, D3 };
enum class ReconLoss { Nll, L1 };
enum class VariantName { Full2d, Hybrid3d, Full3d, Full3dL1, Full3dSeg };

const char* to_string(Dims d);
const char* to_string(ReconLoss r);
const char* to_string(VariantName v);
Dims dims_from_string(const std::string& s);
VariantName variant_name_from_string(const std::string& s);

// The five model variants. The table is fixed; everything else derives from it.
struct VariantSpec {
  VariantName name = VariantName::Full3d;
  Dims generator_dims = Dims::D3;
  Dims discriminator_dims = Dims::D3;
  ReconLoss recon_loss = ReconLoss::Nll;
  bool use_seg_loss = false;
};

VariantSpec variant_spec(VariantName name);
VariantSpec variant_spec_from_string(const std::string& name);

void to_json(nlohmann::json& j, const VariantSpec& v);
void from_json(const nlohmann::json& j, VariantSpec& v);

// U-Net encoder/decoder; two output heads (mean, log-variance). Output spatial
// shape equals input spatial shape; log-variance is clamped to [-14,14].
struct GeneratorSpec {
  Dims dims = Dims::D3;
  int base_channels = 32;  // 2D default is 64, see generator_spec_for()
  int depth = 4;           // number of down/up levels
};

struct DiscriminatorSpec {
  Dims dims = Dims::D3;
  int base_channels = 64;
  int n_layers = 3;
  bool conditional = false;  // concatenate the source volume as an extra channel
};

// Frozen 2D membrane segmentation U-Net; inputs are symmetric-normalized
// slices, output is a per-pixel membrane probability.
struct SegNetSpec {
  int base_channels = 64;
  int depth = 4;
};

void to_json(nlohmann::json& j, const GeneratorSpec& s);
void from_json(const nlohmann::json& j, GeneratorSpec& s);
void to_json(nlohmann::json& j, const DiscriminatorSpec& s);
void from_json(const nlohmann::json& j, DiscriminatorSpec& s);
void to_json(nlohmann::json& j, const SegNetSpec& s);
void from_json(const nlohmann::json& j, SegNetSpec& s);

// Architecture defaults per dims (pix2pix-scale capacity, shrunk for 3D).
GeneratorSpec generator_spec_for(Dims dims);

struct GenOutput {
  nn::Tensor mean;
  nn::Tensor log_variance;
};

namespace detail {
struct UNetCore;
}

class UNetGenerator {
 public:
  UNetGenerator(GeneratorSpec spec, std::uint64_t init_seed, int in_channels = 1);
  ~UNetGenerator();
  UNetGenerator(UNetGenerator&&) noexcept;
  UNetGenerator& operator=(UNetGenerator&&) noexcept;

  const GeneratorSpec& spec() const { return spec_; }
  GenOutput forward(const nn::Tensor& x);
  // Accumulates parameter gradients from head gradients; input gradient is
  // not needed for the generator.
  void backward(const nn::Tensor& g_mean, const nn::Tensor& g_log_variance);
  std::vector<nn::ParamRef> params();
  void zero_grad();

 private:
  GeneratorSpec spec_;
  std::unique_ptr<detail::UNetCore> core_;
};

class SegUNet {
 public:
  SegUNet(SegNetSpec spec, std::uint64_t init_seed);
  ~SegUNet();
  SegUNet(SegUNet&&) noexcept;
  SegUNet& operator=(SegUNet&&) noexcept;

  const SegNetSpec& spec() const { return spec_; }
  // Probability map in [0,1], same spatial shape as the input slice batch.
  nn::Tensor forward(const nn::Tensor& x);
  // Gradient w.r.t. the input given dL/d(probabilities); parameters frozen.
  nn::Tensor backward_input(const nn::Tensor& g_probs);
  // Pre-training path: logits out, parameter gradients accumulated.
  nn::Tensor forward_logits(const nn::Tensor& x);
  void backward_logits(const nn::Tensor& g_logits);
  std::vector<nn::ParamRef> params();
  void zero_grad();

 private:
  SegNetSpec spec_;
  std::unique_ptr<detail::UNetCore> core_;
  nn::Tensor probs_;
};

class PatchDiscriminator {
 public:
  PatchDiscriminator(DiscriminatorSpec spec, std::uint64_t init_seed, int in_channels = 1);
  ~PatchDiscriminator();
  PatchDiscriminator(PatchDiscriminator&&) noexcept;
  PatchDiscriminator& operator=(PatchDiscriminator&&) noexcept;

  const DiscriminatorSpec& spec() const { return spec_; }
  // Patch logits map; spatial extent strictly smaller than the input in the
  // dimensions the discriminator retains (Z is per-slice for 2D dims).
  nn::Tensor forward(const nn::Tensor& y);
  nn::Tensor backward(const nn::Tensor& g_logits, bool need_input_grad, bool accum_params);
  std::vector<nn::ParamRef> params();
  void zero_grad();

 private:
  DiscriminatorSpec spec_;
  struct Impl;
  std::unique_ptr<Impl> impl_;
};

// --- checkpoints -----------------------------------------------------------------
//
// A checkpoint is a directory holding params.bin (tagged tensor list) and
// spec.json (the portable contract: kind, architecture, variant when
// applicable, input normalization).

std::uint64_t params_hash(const std::vector<nn::ParamRef>& params);

void save_params(const std::filesystem::path& dir, const std::vector<nn::ParamRef>& params);
void load_params(const std::filesystem::path& dir, const std::vector<nn::ParamRef>& params);

void write_checkpoint_spec(const std::filesystem::path& dir, const nlohmann::json& spec);
nlohmann::json read_checkpoint_spec(const std::filesystem::path& dir);

void save_segnet_checkpoint(const std::filesystem::path& dir, SegUNet& net);
SegUNet load_segnet_checkpoint(const std::filesystem::path& dir);

void save_generator_checkpoint(const std::filesystem::path& dir, UNetGenerator& gen,
                               const VariantSpec& variant, const Shape3& train_crop);
struct GeneratorCheckpoint {
  UNetGenerator generator;
  VariantSpec variant;
  Shape3 train_crop;
};
GeneratorCheckpoint load_generator_checkpoint(const std::filesystem::path& dir);

void save_discriminator_checkpoint(const std::filesystem::path& dir, PatchDiscriminator& disc);
PatchDiscriminator load_discriminator_checkpoint(const std::filesystem::path& dir);

}  // namespace xem
