#pragma once

#include <array>
#include <filesystem>
#include <map>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include <nlohmann/json_fwd.hpp>

#include "xem/inference.hpp"
#include "xem/models.hpp"
#include "xem/volume.hpp"

namespace xem {

// 10*log10(range^2 / MSE); +inf sentinel at zero MSE.
double psnr(std::span<const float> pred, std::span<const float> target, double data_range);

struct SsimParams {
  int window = 7;
  double k1 = 0.01;
  double k2 = 0.03;
  double data_range = 1.0;
};

// Mean local SSIM over valid sliding windows (uniform window, population
// variance/covariance); symmetric in its arguments.
double ssim(const Slice2D& pred, const Slice2D& target, const SsimParams& params = {});

struct Overlap {
  double jaccard = 0;
  double dice = 0;
};

// Jaccard = |A∩B|/|A∪B| and Dice = 2|A∩B|/(|A|+|B|) on binary masks; both
// defined as 1.0 when both masks are empty.
Overlap overlap_scores(std::span<const float> pred_mask, std::span<const float> gt_mask);

// Per-direction protocol: PSNR/SSIM slice-averaged along each axis,
// segmentation overlap per direction plus a "3D" entry scored on the volume
// assembled from the XY-slice predictions.
struct MetricsReport {
  std::map<std::string, double> psnr;     // keys XY, XZ, YZ
  std::map<std::string, double> ssim;     // keys XY, XZ, YZ
  std::map<std::string, double> jaccard;  // keys XY, XZ, YZ, 3D (empty without labels)
  std::map<std::string, double> dice;     // keys XY, XZ, YZ, 3D (empty without labels)
  std::map<std::string, std::int64_t> n_slices;
  std::string config_hash;
};

void to_json(nlohmann::json& j, const MetricsReport& r);
void from_json(const nlohmann::json& j, MetricsReport& r);

// Runs the frozen seg net on one stored [0,1]-intensity slice: symmetric
// normalization, reflect padding up to the net's divisibility requirement,
// crop back. Returns the probability map.
Slice2D segnet_probabilities(SegUNet& seg, const Slice2D& slice, Range intensity_range);

// seg + labels must be supplied together for the JS/Dice entries.
MetricsReport evaluate_volume(const Volume& pred, const Volume& target, SegUNet* seg = nullptr,
                              const Volume* gt_labels = nullptr, double threshold = 0.5);

// report.json (full precision; infinities as the string "inf") and report.md
// (the human-readable per-direction tables).
void write_report(const MetricsReport& report, const std::filesystem::path& out_dir);

// Fig.-4-style panels: mean / variance=exp(log_variance) / |mean-target|
// volumes plus one grayscale PNG per axis and kind at the requested (default:
// middle) slice. Per-panel display scaling is recorded in panels.json.
struct PanelExport {
  Volume variance;
  Volume error;
  std::vector<std::filesystem::path> files;
};
PanelExport export_uncertainty(const ReconVolumes& recon, const Volume& target,
                               const std::filesystem::path& out_dir,
                               std::optional<std::array<std::int64_t, 3>> slice_indices = {});

// Mean variance over the voxels in the top / bottom error deciles — the
// "uncertainty highlights the erroneous areas" ordering.
struct DecileStats {
  double mean_variance_top = 0;
  double mean_variance_bottom = 0;
};
DecileStats uncertainty_error_deciles(const Volume& variance, const Volume& error);

}  // namespace xem
