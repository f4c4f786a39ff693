#pragma once

#include <array>
#include <cstdint>
#include <filesystem>
#include <optional>
#include <string>
#include <vector>

#include <nlohmann/json_fwd.hpp>

#include "xem/losses.hpp"
#include "xem/models.hpp"
#include "xem/nn/adam.hpp"
#include "xem/volume.hpp"

namespace xem {

// Segmentation pre-training hyperparameters. Defaults are the published
// schedule; base_channels/depth size the U-Net itself.
struct SegTrainConfig {
  int iterations = 3000;
  int batch_size = 4;
  double lr = 0.0001;
  double weight_decay = 0.00005;
  std::uint64_t seed = 0;
  SegNetSpec net;
  int log_every = 25;

  void validate() const;
};

// Reconstruction (GAN) training hyperparameters. The paper-published values
// are the defaults; steps_per_epoch defines one "epoch" over the random-crop
// stream, which the source text leaves open.
struct ReconTrainConfig {
  int epochs = 100;
  int constant_epochs = 50;
  double lr = 0.0002;
  int batch_size = 1;
  Shape3 crop{64, 128, 128};
  LossWeights weights;
  VariantSpec variant = variant_spec(VariantName::Full3d);
  std::optional<std::filesystem::path> seg_checkpoint;
  std::uint64_t seed = 0;
  int steps_per_epoch = 250;
  // Architecture knobs; dims always come from the variant. gen_base 0 means
  // "the dims default" (32 for 3D, 64 for 2D).
  int gen_base = 0;
  int gen_depth = 4;
  int disc_base = 64;
  int disc_layers = 3;
  bool disc_conditional = false;
  bool deterministic = true;  // single-worker seeded mode (the only mode implemented)

  void validate() const;
  GeneratorSpec generator_spec() const;
  DiscriminatorSpec discriminator_spec() const;
};

void to_json(nlohmann::json& j, const SegTrainConfig& c);
void from_json(const nlohmann::json& j, SegTrainConfig& c);
void to_json(nlohmann::json& j, const ReconTrainConfig& c);
void from_json(const nlohmann::json& j, ReconTrainConfig& c);

// Learning rate for a 1-based epoch: cfg.lr through constant_epochs, then a
// linear ramp hitting exactly 0 at the final epoch.
double lr_at_epoch(int epoch, const ReconTrainConfig& cfg);

struct SlicePick {
  Axis axis = Axis::XY;
  std::int64_t index = 0;
};

// One random section per direction, for the segmentation-consistency term.
std::array<SlicePick, 3> sample_seg_slices(const Shape3& shape, Rng& rng);

// --- segmentation pre-training -----------------------------------------------------

// Uniform-shaped (EM slice, binary mask) pairs; images already in the seg
// net's symmetric [-1,1] normalization.
class SegSliceDataset {
 public:
  void add(Slice2D image, Slice2D mask);
  // All XY slices of every pair; EM normalized to [-1,1], labels validated binary.
  static SegSliceDataset from_pairs(const std::vector<VolumePair>& pairs);

  std::size_t size() const { return samples_.size(); }
  const Slice2D& image(std::size_t i) const { return samples_[i].image; }
  const Slice2D& mask(std::size_t i) const { return samples_[i].mask; }

 private:
  struct Sample {
    Slice2D image, mask;
  };
  std::vector<Sample> samples_;
};

struct SegTrainResult {
  double final_loss = 0;             // mean loss of the last logged window
  double initial_loss = 0;           // mean loss of the first logged window
  std::filesystem::path checkpoint;  // directory with params.bin + spec.json
};

// Cross-entropy pre-training of the membrane net. Writes config.json,
// history.csv and the checkpoint under out_dir; extra_config keys (e.g. the
// CLI's data/out paths) are merged into the dumped config.
SegTrainResult pretrain_segnet(const SegSliceDataset& dataset, const SegTrainConfig& cfg,
                               const std::filesystem::path& out_dir,
                               const nlohmann::json& extra_config);
SegTrainResult pretrain_segnet(const SegSliceDataset& dataset, const SegTrainConfig& cfg,
                               const std::filesystem::path& out_dir);

// --- reconstruction training -------------------------------------------------------

struct StepLosses {
  double loss_d = 0;
  double loss_g_adv = 0;
  double loss_recon = 0;
  double loss_seg = 0;  // 0 when the variant has no seg term
  double total = 0;
  double lr = 0;
};

// One training example: normalized crop tensors plus the sampled sections.
struct CropBatch {
  nn::Tensor x;  // source (X-ray), [-1,1]
  nn::Tensor y;  // target (EM), [-1,1]
  std::array<SlicePick, 3> slices{};
  std::size_t pair_index = 0;
};

// Owns the three networks and both optimizers; exposes the D/G sub-steps so
// the gradient-isolation and frozen-seg invariants are directly testable.
class ReconTrainer {
 public:
  ReconTrainer(std::vector<VolumePair> dataset, ReconTrainConfig cfg,
               std::filesystem::path run_dir, const nlohmann::json& extra_config);
  ReconTrainer(std::vector<VolumePair> dataset, ReconTrainConfig cfg,
               std::filesystem::path run_dir);
  ~ReconTrainer();

  CropBatch next_batch();
  // Single discriminator update (real vs detached fake). Returns loss_d.
  double d_step(const CropBatch& batch);
  // Single generator update with the weighted total objective.
  StepLosses g_step(const CropBatch& batch);
  // D step then G step on a fresh batch; appends to history.
  StepLosses train_step();
  // Full schedule with per-epoch checkpoints. Returns final checkpoint dir.
  std::filesystem::path run();

  const ReconTrainConfig& config() const { return cfg_; }
  int step_count() const { return step_; }
  UNetGenerator& generator() { return *gen_; }
  PatchDiscriminator& discriminator() { return *disc_; }
  std::optional<SegUNet>& segnet() { return seg_; }
  std::uint64_t generator_hash() { return params_hash(gen_->params()); }
  std::uint64_t discriminator_hash() { return params_hash(disc_->params()); }
  std::uint64_t segnet_hash();

 private:
  StepLosses g_accumulate(const CropBatch& batch, GenOutput& out);
  void append_history(const StepLosses& s);
  void check_finite(const StepLosses& s, const CropBatch& batch);
  [[noreturn]] void dump_nan_batch(const CropBatch& batch, const std::string& why);
  nn::Tensor disc_input(const CropBatch& batch, const nn::Tensor& t) const;

  ReconTrainConfig cfg_;
  std::vector<VolumePair> data_;
  std::filesystem::path run_dir_;
  Rng rng_data_;
  Rng rng_slices_;
  std::optional<UNetGenerator> gen_;
  std::optional<PatchDiscriminator> disc_;
  std::optional<SegUNet> seg_;
  std::optional<nn::Adam> opt_g_;
  std::optional<nn::Adam> opt_d_;
  GenOutput last_out_;  // generator output for the current batch (B=1 fast path)
  int step_ = 0;
  int epoch_ = 1;
};

// Convenience wrapper: construct, run the whole schedule, return the final
// generator checkpoint directory.
std::filesystem::path train_reconstruction(std::vector<VolumePair> dataset,
                                           const ReconTrainConfig& cfg,
                                           const std::filesystem::path& run_dir);

}  // namespace xem
