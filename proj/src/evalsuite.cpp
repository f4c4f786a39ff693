#include "xem/evalsuite.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <fstream>
#include <limits>
#include <numeric>

#include <nlohmann/json.hpp>

#include "xem/pngio.hpp"

namespace xem {

using nlohmann::json;

double psnr(std::span<const float> pred, std::span<const float> target, double data_range) {
  if (pred.size() != target.size()) fail(ErrorKind::Shape, "psnr: tensors differ in size");
  if (pred.empty()) fail(ErrorKind::EmptyInput, "psnr on empty tensors");
  if (!(data_range > 0)) fail(ErrorKind::Config, "psnr: data_range must be > 0");
  double mse = 0;
  for (std::size_t i = 0; i < pred.size(); ++i) {
    const double d = static_cast<double>(pred[i]) - static_cast<double>(target[i]);
    mse += d * d;
  }
  mse /= static_cast<double>(pred.size());
  if (mse == 0) return std::numeric_limits<double>::infinity();
  return 10.0 * std::log10(data_range * data_range / mse);
}

double ssim(const Slice2D& pred, const Slice2D& target, const SsimParams& params) {
  if (pred.rows != target.rows || pred.cols != target.cols)
    fail(ErrorKind::Shape, "ssim: slice shapes differ");
  if (params.window < 1) fail(ErrorKind::Config, "ssim: window must be >= 1");
  if (!(params.data_range > 0)) fail(ErrorKind::Config, "ssim: data_range must be > 0");
  const std::int64_t w = params.window, R = pred.rows, C = pred.cols;
  if (R < w || C < w)
    fail(ErrorKind::Shape, "ssim: slice " + std::to_string(R) + "x" + std::to_string(C) +
                               " smaller than window " + std::to_string(w));

  // Integral images over a, b, a^2, b^2, ab; (R+1)x(C+1) with a zero border.
  const std::int64_t W = C + 1;
  std::vector<double> sa((R + 1) * W, 0), sb(sa.size(), 0), saa(sa.size(), 0), sbb(sa.size(), 0),
      sab(sa.size(), 0);
  for (std::int64_t r = 0; r < R; ++r)
    for (std::int64_t c = 0; c < C; ++c) {
      const double a = pred.at(r, c), b = target.at(r, c);
      const std::int64_t i = (r + 1) * W + (c + 1);
      sa[i] = a + sa[i - 1] + sa[i - W] - sa[i - W - 1];
      sb[i] = b + sb[i - 1] + sb[i - W] - sb[i - W - 1];
      saa[i] = a * a + saa[i - 1] + saa[i - W] - saa[i - W - 1];
      sbb[i] = b * b + sbb[i - 1] + sbb[i - W] - sbb[i - W - 1];
      sab[i] = a * b + sab[i - 1] + sab[i - W] - sab[i - W - 1];
    }
  const auto window_sum = [&](const std::vector<double>& s, std::int64_t r0, std::int64_t c0) {
    return s[(r0 + w) * W + (c0 + w)] - s[r0 * W + (c0 + w)] - s[(r0 + w) * W + c0] +
           s[r0 * W + c0];
  };

  const double n = static_cast<double>(w) * w;
  const double c1 = (params.k1 * params.data_range) * (params.k1 * params.data_range);
  const double c2 = (params.k2 * params.data_range) * (params.k2 * params.data_range);
  double acc = 0;
  std::int64_t count = 0;
  for (std::int64_t r0 = 0; r0 + w <= R; ++r0)
    for (std::int64_t c0 = 0; c0 + w <= C; ++c0) {
      const double mu_a = window_sum(sa, r0, c0) / n;
      const double mu_b = window_sum(sb, r0, c0) / n;
      const double va = window_sum(saa, r0, c0) / n - mu_a * mu_a;
      const double vb = window_sum(sbb, r0, c0) / n - mu_b * mu_b;
      const double cov = window_sum(sab, r0, c0) / n - mu_a * mu_b;
      acc += ((2 * mu_a * mu_b + c1) * (2 * cov + c2)) /
             ((mu_a * mu_a + mu_b * mu_b + c1) * (va + vb + c2));
      ++count;
    }
  return acc / static_cast<double>(count);
}

Overlap overlap_scores(std::span<const float> pred_mask, std::span<const float> gt_mask) {
  if (pred_mask.size() != gt_mask.size()) fail(ErrorKind::Shape, "overlap: masks differ in size");
  std::int64_t inter = 0, np = 0, ng = 0;
  for (std::size_t i = 0; i < pred_mask.size(); ++i) {
    const float p = pred_mask[i], g = gt_mask[i];
    if ((p != 0.0f && p != 1.0f) || (g != 0.0f && g != 1.0f))
      fail(ErrorKind::Label, "overlap: masks must be binary");
    np += p == 1.0f;
    ng += g == 1.0f;
    inter += (p == 1.0f) && (g == 1.0f);
  }
  const std::int64_t uni = np + ng - inter;
  if (np == 0 && ng == 0) return {1.0, 1.0};
  return {static_cast<double>(inter) / static_cast<double>(uni),
          2.0 * static_cast<double>(inter) / static_cast<double>(np + ng)};
}

namespace {

const char* axis_key(Axis a) {
  switch (a) {
    case Axis::XY: return "XY";
    case Axis::XZ: return "XZ";
    case Axis::YZ: return "YZ";
  }
  return "?";
}

const char* axis_label(Axis a) {  // Table style
  switch (a) {
    case Axis::XY: return "X-Y";
    case Axis::XZ: return "X-Z";
    case Axis::YZ: return "Y-Z";
  }
  return "?";
}

std::int64_t mirror101(std::int64_t i, std::int64_t n) {
  if (n == 1) return 0;
  const std::int64_t period = 2 * (n - 1);
  i %= period;
  if (i < 0) i += period;
  return i < n ? i : period - i;
}

std::uint64_t fnv1a(const std::string& s) {
  std::uint64_t h = 1469598103934665603ULL;
  for (unsigned char c : s) {
    h ^= c;
    h *= 1099511628211ULL;
  }
  return h;
}

std::string hex64(std::uint64_t v) {
  char buf[17];
  std::snprintf(buf, sizeof(buf), "%016llx", static_cast<unsigned long long>(v));
  return buf;
}

json num_or_inf(double v) {
  if (std::isinf(v)) return v > 0 ? "inf" : "-inf";
  if (std::isnan(v)) return "nan";
  return v;
}

double parse_num(const json& j) {
  if (j.is_string()) {
    const auto s = j.get<std::string>();
    if (s == "inf") return std::numeric_limits<double>::infinity();
    if (s == "-inf") return -std::numeric_limits<double>::infinity();
    if (s == "nan") return std::numeric_limits<double>::quiet_NaN();
    fail(ErrorKind::Format, "report: unknown numeric string '" + s + "'");
  }
  return j.get<double>();
}

std::string fmt4(double v) {
  if (std::isinf(v)) return v > 0 ? "inf" : "-inf";
  char buf[40];
  std::snprintf(buf, sizeof(buf), "%.4f", v);
  return buf;
}

}  // namespace

void to_json(json& j, const MetricsReport& r) {
  const auto map_json = [](const std::map<std::string, double>& m) {
    json o = json::object();
    for (const auto& [k, v] : m) o[k] = num_or_inf(v);
    return o;
  };
  j = json{{"psnr", map_json(r.psnr)},       {"ssim", map_json(r.ssim)},
           {"jaccard", map_json(r.jaccard)}, {"dice", map_json(r.dice)},
           {"n_slices", r.n_slices},         {"config_hash", r.config_hash}};
}

void from_json(const json& j, MetricsReport& r) {
  r = MetricsReport{};
  const auto read_map = [&](const char* key, std::map<std::string, double>& m) {
    if (!j.contains(key)) return;
    for (const auto& [k, v] : j.at(key).items()) m[k] = parse_num(v);
  };
  read_map("psnr", r.psnr);
  read_map("ssim", r.ssim);
  read_map("jaccard", r.jaccard);
  read_map("dice", r.dice);
  if (j.contains("n_slices"))
    for (const auto& [k, v] : j.at("n_slices").items()) r.n_slices[k] = v.get<std::int64_t>();
  if (j.contains("config_hash")) r.config_hash = j.at("config_hash").get<std::string>();
}

Slice2D segnet_probabilities(SegUNet& seg, const Slice2D& slice, Range intensity_range) {
  const std::int64_t div = std::int64_t(1) << seg.spec().depth;
  const std::int64_t R = slice.rows, C = slice.cols;
  if (R < 1 || C < 1) fail(ErrorKind::Shape, "segnet: empty slice");
  const std::int64_t Rp = (R + div - 1) / div * div;
  const std::int64_t Cp = (C + div - 1) / div * div;

  const double lo = intensity_range.lo, span = intensity_range.span();
  nn::Tensor x({1, 1, 1, static_cast<int>(Rp), static_cast<int>(Cp)});
  for (std::int64_t r = 0; r < Rp; ++r)
    for (std::int64_t c = 0; c < Cp; ++c) {
      const double v = slice.at(mirror101(r, R), mirror101(c, C));
      x.v[r * Cp + c] = static_cast<float>((v - lo) / span * 2.0 - 1.0);
    }
  const nn::Tensor probs = seg.forward(x);
  Slice2D out;
  out.rows = R;
  out.cols = C;
  out.v.resize(R * C);
  for (std::int64_t r = 0; r < R; ++r)
    for (std::int64_t c = 0; c < C; ++c) out.v[r * C + c] = probs.v[r * Cp + c];
  return out;
}

MetricsReport evaluate_volume(const Volume& pred, const Volume& target, SegUNet* seg,
                              const Volume* gt_labels, double threshold) {
  if (pred.shape() != target.shape())
    fail(ErrorKind::Shape, "evaluate: pred/target shapes differ");
  if ((seg == nullptr) != (gt_labels == nullptr))
    fail(ErrorKind::Config,
         "evaluate: segmentation metrics require both a seg checkpoint and ground-truth labels");
  if (!(threshold > 0 && threshold < 1))
    fail(ErrorKind::Config, "evaluate: threshold must be in (0,1)");

  const double data_range = target.intensity_range().span();
  SsimParams sp;
  sp.data_range = data_range;

  MetricsReport rep;
  {
    json cfg{{"ssim_window", sp.window},
             {"ssim_k1", sp.k1},
             {"ssim_k2", sp.k2},
             {"data_range", data_range},
             {"threshold", threshold},
             {"mask_3d_assembly", "xy"},
             {"seg", seg != nullptr},
             {"seg_depth", seg ? seg->spec().depth : 0}};
    rep.config_hash = hex64(fnv1a(cfg.dump()));
  }

  for (Axis axis : kAllAxes) {
    const std::int64_t n = axis_extent(pred.shape(), axis);
    double psnr_acc = 0, ssim_acc = 0;
    for (std::int64_t k = 0; k < n; ++k) {
      const Slice2D ps = extract_slice(pred, axis, k);
      const Slice2D ts = extract_slice(target, axis, k);
      psnr_acc += psnr(ps.v, ts.v, data_range);
      ssim_acc += ssim(ps, ts, sp);
    }
    rep.psnr[axis_key(axis)] = psnr_acc / static_cast<double>(n);
    rep.ssim[axis_key(axis)] = ssim_acc / static_cast<double>(n);
    rep.n_slices[axis_key(axis)] = n;
  }

  if (seg) {
    if (gt_labels->shape() != pred.shape())
      fail(ErrorKind::Shape, "evaluate: labels shape differs from pred");
    std::vector<float> mask3d(static_cast<std::size_t>(pred.shape().voxels()), 0.0f);
    for (Axis axis : kAllAxes) {
      const std::int64_t n = axis_extent(pred.shape(), axis);
      double js_acc = 0, dice_acc = 0;
      for (std::int64_t k = 0; k < n; ++k) {
        const Slice2D ps = extract_slice(pred, axis, k);
        Slice2D probs = segnet_probabilities(*seg, ps, pred.intensity_range());
        for (auto& v : probs.v) v = v >= threshold ? 1.0f : 0.0f;
        const Slice2D gs = extract_slice(*gt_labels, axis, k);
        const Overlap o = overlap_scores(probs.v, gs.v);
        js_acc += o.jaccard;
        dice_acc += o.dice;
        if (axis == Axis::XY)
          std::copy(probs.v.begin(), probs.v.end(),
                    mask3d.begin() + k * pred.shape().y * pred.shape().x);
      }
      rep.jaccard[axis_key(axis)] = js_acc / static_cast<double>(n);
      rep.dice[axis_key(axis)] = dice_acc / static_cast<double>(n);
    }
    const Overlap o3 = overlap_scores(mask3d, gt_labels->data());
    rep.jaccard["3D"] = o3.jaccard;
    rep.dice["3D"] = o3.dice;
  }
  return rep;
}

void write_report(const MetricsReport& report, const std::filesystem::path& out_dir) {
  std::filesystem::create_directories(out_dir);
  {
    std::ofstream f(out_dir / "report.json", std::ios::trunc);
    if (!f) fail(ErrorKind::Io, "cannot open " + (out_dir / "report.json").string());
    f << json(report).dump(2) << "\n";
  }
  std::ofstream f(out_dir / "report.md", std::ios::trunc);
  if (!f) fail(ErrorKind::Io, "cannot open " + (out_dir / "report.md").string());
  f << "# Evaluation report\n\n";
  f << "| Dir. | PSNR (dB) | SSIM |\n|------|-----------|------|\n";
  for (Axis a : kAllAxes)
    f << "| " << axis_label(a) << " | " << fmt4(report.psnr.at(axis_key(a))) << " | "
      << fmt4(report.ssim.at(axis_key(a))) << " |\n";
  if (!report.jaccard.empty()) {
    f << "\n| Dir. | JS | Dice |\n|------|----|------|\n";
    for (Axis a : kAllAxes)
      f << "| " << axis_label(a) << " | " << fmt4(report.jaccard.at(axis_key(a))) << " | "
        << fmt4(report.dice.at(axis_key(a))) << " |\n";
    f << "| 3D | " << fmt4(report.jaccard.at("3D")) << " | " << fmt4(report.dice.at("3D"))
      << " |\n";
  }
  f << "\nconfig_hash: " << report.config_hash << "\n";
}

// --- uncertainty export ------------------------------------------------------------

namespace {

std::vector<std::uint8_t> to_gray(const Slice2D& s, double lo, double hi) {
  std::vector<std::uint8_t> px(s.v.size());
  const double span = hi > lo ? hi - lo : 1.0;
  for (std::size_t i = 0; i < s.v.size(); ++i) {
    const double t = (static_cast<double>(s.v[i]) - lo) / span;
    px[i] = static_cast<std::uint8_t>(std::lround(std::clamp(t, 0.0, 1.0) * 255.0));
  }
  return px;
}

}  // namespace

PanelExport export_uncertainty(const ReconVolumes& recon, const Volume& target,
                               const std::filesystem::path& out_dir,
                               std::optional<std::array<std::int64_t, 3>> slice_indices) {
  const Shape3& s = recon.mean.shape();
  if (s != target.shape()) fail(ErrorKind::Shape, "export: mean/target shapes differ");
  if (s != recon.log_variance.shape())
    fail(ErrorKind::Shape, "export: mean/log_variance shapes differ");
  std::error_code ec;
  std::filesystem::create_directories(out_dir, ec);
  if (ec) fail(ErrorKind::Io, "cannot create " + out_dir.string() + ": " + ec.message());

  const auto& mv = recon.mean.data();
  const auto& lv = recon.log_variance.data();
  const auto& tv = target.data();
  std::vector<float> var(mv.size()), err(mv.size());
  float var_max = 0, err_max = 0;
  for (std::size_t i = 0; i < mv.size(); ++i) {
    var[i] = std::exp(lv[i]);
    err[i] = std::abs(mv[i] - tv[i]);
    var_max = std::max(var_max, var[i]);
    err_max = std::max(err_max, err[i]);
  }
  PanelExport out{
      Volume(s, std::move(var), recon.mean.voxel_size_nm(), Modality::Variance,
             Range{0, std::max<double>(var_max, 1e-6)}),
      Volume(s, std::move(err), recon.mean.voxel_size_nm(), Modality::Em,
             Range{0, std::max<double>(err_max, 1e-6)}),
      {}};

  const auto save = [&](const Volume& v, const char* name) {
    const auto p = out_dir / name;
    save_volume(v, p);
    out.files.push_back(p);
  };
  save(recon.mean, "mean.v3d");
  save(out.variance, "variance.v3d");
  save(out.error, "error.v3d");

  std::array<std::int64_t, 3> idx =
      slice_indices.value_or(std::array<std::int64_t, 3>{s.z / 2, s.y / 2, s.x / 2});
  json panels = json::array();
  for (std::size_t a = 0; a < kAllAxes.size(); ++a) {
    const Axis axis = kAllAxes[a];
    const std::int64_t k = idx[a];  // extract_slice validates bounds
    struct Item {
      const Volume* vol;
      const char* kind;
      bool per_slice_scale;
      double lo, hi;
    };
    const Item items[] = {
        {&recon.mean, "mean", false, recon.mean.intensity_range().lo,
         recon.mean.intensity_range().hi},
        {&out.variance, "variance", true, 0, 0},
        {&out.error, "error", true, 0, 0},
    };
    for (const Item& it : items) {
      Slice2D sl = extract_slice(*it.vol, axis, k);
      double lo = it.lo, hi = it.hi;
      if (it.per_slice_scale) {
        lo = 0;
        hi = *std::max_element(sl.v.begin(), sl.v.end());
        if (hi <= 0) hi = 1.0;
      }
      const std::string name =
          std::string(it.kind) + "_" + to_string(axis) + "_" + std::to_string(k) + ".png";
      write_png_gray(out_dir / name, to_gray(sl, lo, hi), static_cast<int>(sl.rows),
                     static_cast<int>(sl.cols));
      out.files.push_back(out_dir / name);
      panels.push_back(json{{"file", name},
                            {"kind", it.kind},
                            {"axis", to_string(axis)},
                            {"index", k},
                            {"display_min", lo},
                            {"display_max", hi}});
    }
  }
  std::ofstream f(out_dir / "panels.json", std::ios::trunc);
  if (!f) fail(ErrorKind::Io, "cannot open " + (out_dir / "panels.json").string());
  f << panels.dump(2) << "\n";
  out.files.push_back(out_dir / "panels.json");
  return out;
}

DecileStats uncertainty_error_deciles(const Volume& variance, const Volume& error) {
  if (variance.shape() != error.shape())
    fail(ErrorKind::Shape, "deciles: variance/error shapes differ");
  const auto& vv = variance.data();
  const auto& ev = error.data();
  const std::size_t n = ev.size();
  if (n == 0) fail(ErrorKind::EmptyInput, "deciles: empty volumes");
  std::vector<std::uint32_t> order(n);
  std::iota(order.begin(), order.end(), 0u);
  std::sort(order.begin(), order.end(),
            [&](std::uint32_t a, std::uint32_t b) { return ev[a] < ev[b]; });
  const std::size_t k = std::max<std::size_t>(1, n / 10);
  DecileStats st;
  for (std::size_t i = 0; i < k; ++i) {
    st.mean_variance_bottom += vv[order[i]];
    st.mean_variance_top += vv[order[n - 1 - i]];
  }
  st.mean_variance_bottom /= static_cast<double>(k);
  st.mean_variance_top /= static_cast<double>(k);
  return st;
}

}  // namespace xem
