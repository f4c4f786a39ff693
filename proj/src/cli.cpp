#include "xem/cli.hpp"

#include <cstdint>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <optional>
#include <string>
#include <utility>
#include <vector>

#include <CLI11.hpp>
#include <nlohmann/json.hpp>

#include "xem/error.hpp"
#include "xem/evalsuite.hpp"
#include "xem/inference.hpp"
#include "xem/models.hpp"
#include "xem/phantom.hpp"
#include "xem/plot.hpp"
#include "xem/trainer.hpp"
#include "xem/volume.hpp"

namespace xem {
namespace {

using nlohmann::json;
namespace fs = std::filesystem;

int exit_code_for(ErrorKind k) {
  switch (k) {
    case ErrorKind::NanAbort:
    case ErrorKind::Io:
      return 1;
    default:
      return 3;
  }
}

// --- flag/string parsing ------------------------------------------------------------

std::vector<std::string> split(const std::string& s, char sep) {
  std::vector<std::string> parts;
  std::size_t pos = 0;
  while (true) {
    const std::size_t next = s.find(sep, pos);
    parts.push_back(s.substr(pos, next - pos));
    if (next == std::string::npos) return parts;
    pos = next + 1;
  }
}

// "ZxYxX" with positive integer extents.
Shape3 parse_shape3(const std::string& s, const std::string& flag) {
  const std::vector<std::string> parts = split(s, 'x');
  const std::string want = flag + " expects ZxYxX (e.g. 64x96x96), got '" + s + "'";
  if (parts.size() != 3) fail(ErrorKind::Config, want);
  std::int64_t v[3];
  for (int i = 0; i < 3; ++i) {
    std::size_t used = 0;
    try {
      v[i] = std::stoll(parts[i], &used);
    } catch (const std::exception&) {
      fail(ErrorKind::Config, want);
    }
    if (used != parts[i].size() || v[i] <= 0) fail(ErrorKind::Config, want);
  }
  return Shape3{v[0], v[1], v[2]};
}

// "z,y,x" with real values.
Vec3 parse_vec3(const std::string& s, const std::string& flag) {
  const std::vector<std::string> parts = split(s, ',');
  const std::string want = flag + " expects z,y,x (e.g. 2,1,1), got '" + s + "'";
  if (parts.size() != 3) fail(ErrorKind::Config, want);
  double v[3];
  for (int i = 0; i < 3; ++i) {
    std::size_t used = 0;
    try {
      v[i] = std::stod(parts[i], &used);
    } catch (const std::exception&) {
      fail(ErrorKind::Config, want);
    }
    if (used != parts[i].size()) fail(ErrorKind::Config, want);
  }
  return Vec3{v[0], v[1], v[2]};
}

json shape_to_json(const Shape3& s) { return json::array({s.z, s.y, s.x}); }

Shape3 shape_from_json(const json& a, const std::string& key) {
  if (!a.is_array() || a.size() != 3)
    fail(ErrorKind::Config, "config key '" + key + "' must be a [Z,Y,X] array");
  return Shape3{a.at(0).get<std::int64_t>(), a.at(1).get<std::int64_t>(),
                a.at(2).get<std::int64_t>()};
}

// --- config files ---------------------------------------------------------------------

json read_json_file(const fs::path& file) {
  std::ifstream in(file);
  if (!in) fail(ErrorKind::Io, "cannot open " + file.string());
  try {
    json j;
    in >> j;
    return j;
  } catch (const json::exception& e) {
    fail(ErrorKind::Format, file.string() + ": " + e.what());
  }
}

void write_config(const fs::path& out_dir, const json& j) {
  std::error_code ec;
  fs::create_directories(out_dir, ec);
  if (ec) fail(ErrorKind::Io, "cannot create " + out_dir.string() + ": " + ec.message());
  const fs::path file = out_dir / "config.json";
  std::ofstream out(file, std::ios::trunc);
  if (!out) fail(ErrorKind::Io, "cannot open " + file.string());
  out << j.dump(2) << '\n';
  if (!out) fail(ErrorKind::Io, "write failed for " + file.string());
}

// Pre-scan the raw arguments for --config so file values can seed the bound
// variables before CLI11 applies explicit flags on top. Last --config wins.
std::optional<fs::path> find_config_arg(const std::vector<std::string>& args) {
  std::optional<fs::path> found;
  for (std::size_t i = 0; i < args.size(); ++i) {
    if (args[i] == "--config" && i + 1 < args.size())
      found = args[i + 1];
    else if (args[i].rfind("--config=", 0) == 0)
      found = args[i].substr(9);
  }
  return found;
}

void check_config_command(const json& j, const std::string& cmd) {
  if (j.contains("command") && j.at("command").get<std::string>() != cmd)
    fail(ErrorKind::Config, "config file is for command '" +
                                j.at("command").get<std::string>() + "', not '" + cmd + "'");
}

void require_path(const std::string& value, const std::string& cmd, const std::string& flag) {
  if (value.empty()) fail(ErrorKind::Config, cmd + ": " + flag + " is required (flag or config)");
}

void check_device(const std::string& device) {
  if (device != "cpu")
    fail(ErrorKind::Config, "device '" + device + "': only 'cpu' is available in this build");
}

// --- dataset directories ----------------------------------------------------------------

// A dataset directory is whatever make-phantom produced: volume triples plus a
// manifest.json listing them.
std::vector<VolumePair> load_pairs(const fs::path& dir, bool need_labels) {
  const fs::path mf = dir / "manifest.json";
  const json j = read_json_file(mf);
  if (!j.contains("pairs") || !j.at("pairs").is_array() || j.at("pairs").empty())
    fail(ErrorKind::Format, mf.string() + ": no pairs listed");
  std::vector<VolumePair> pairs;
  pairs.reserve(j.at("pairs").size());
  for (const auto& e : j.at("pairs")) {
    Volume xray = load_volume(dir / e.at("xray").get<std::string>());
    Volume em = load_volume(dir / e.at("em").get<std::string>());
    std::optional<Volume> labels;
    if (e.contains("labels")) labels = load_volume(dir / e.at("labels").get<std::string>());
    if (need_labels && !labels)
      fail(ErrorKind::Config,
           mf.string() + ": pair " + std::to_string(pairs.size()) + " has no labels entry");
    pairs.emplace_back(std::move(xray), std::move(em), std::move(labels));
  }
  return pairs;
}

// Accept either a generator checkpoint directory or a run directory.
fs::path resolve_generator_dir(const fs::path& p) {
  if (fs::exists(p / "params.bin")) return p;
  for (const char* sub : {"generator", "ckpt/final/generator"})
    if (fs::exists(p / sub / "params.bin")) return p / sub;
  return p;  // let load_generator_checkpoint produce the precise error
}

// --- make-phantom -------------------------------------------------------------------------

struct MakePhantomArgs {
  std::string out;
  int count = 8;
  PhantomConfig phantom;
};

int run_make_phantom(const MakePhantomArgs& a) {
  require_path(a.out, "make-phantom", "--out");
  if (a.count < 1) fail(ErrorKind::Config, "make-phantom: --count must be >= 1");
  a.phantom.validate();

  const fs::path dir(a.out);
  write_config(dir, json{{"command", "make-phantom"},
                         {"out", a.out},
                         {"count", a.count},
                         {"phantom", a.phantom}});

  json pairs = json::array();
  for (int i = 0; i < a.count; ++i) {
    PhantomConfig pc = a.phantom;
    pc.seed = a.phantom.seed + static_cast<std::uint64_t>(i);
    const VolumePair p = generate_phantom(pc);
    const std::string stem = "pair_" + std::to_string(pc.seed) + "_";
    save_volume(p.xray, dir / (stem + "xray.v3d"));
    save_volume(p.em, dir / (stem + "em.v3d"));
    save_volume(*p.labels, dir / (stem + "labels.v3d"));
    pairs.push_back({{"xray", stem + "xray.v3d"},
                     {"em", stem + "em.v3d"},
                     {"labels", stem + "labels.v3d"},
                     {"seed", pc.seed}});
  }
  std::ofstream mf(dir / "manifest.json", std::ios::trunc);
  if (!mf) fail(ErrorKind::Io, "cannot open " + (dir / "manifest.json").string());
  mf << json{{"count", a.count}, {"phantom", a.phantom}, {"pairs", pairs}}.dump(2) << '\n';
  if (!mf) fail(ErrorKind::Io, "write failed for " + (dir / "manifest.json").string());

  std::printf("wrote %d phantom pairs to %s\n", a.count, dir.string().c_str());
  return 0;
}

// --- train-seg ------------------------------------------------------------------------------

struct TrainSegArgs {
  std::string data, out, device = "cpu";
  SegTrainConfig cfg;
};

int run_train_seg(const TrainSegArgs& a) {
  require_path(a.data, "train-seg", "--data");
  require_path(a.out, "train-seg", "--out");
  check_device(a.device);

  const json extra{{"command", "train-seg"}, {"data", a.data}, {"out", a.out}};
  json resolved = a.cfg;
  resolved.update(extra);
  write_config(a.out, resolved);

  const std::vector<VolumePair> pairs = load_pairs(a.data, /*need_labels=*/true);
  const SegSliceDataset dataset = SegSliceDataset::from_pairs(pairs);
  const SegTrainResult r = pretrain_segnet(dataset, a.cfg, a.out, extra);
  std::printf("seg pre-training done: loss %.6f -> %.6f (%zu slices)\ncheckpoint: %s\n",
              r.initial_loss, r.final_loss, dataset.size(), r.checkpoint.string().c_str());
  return 0;
}

// --- train ----------------------------------------------------------------------------------

struct TrainArgs {
  std::string data, out, device = "cpu";
  ReconTrainConfig cfg;
};

int run_train(const TrainArgs& a) {
  require_path(a.data, "train", "--data");
  require_path(a.out, "train", "--out");
  check_device(a.device);

  const json extra{{"command", "train"}, {"data", a.data}, {"out", a.out}};
  json resolved = a.cfg;
  resolved.update(extra);
  write_config(a.out, resolved);

  std::vector<VolumePair> pairs = load_pairs(a.data, /*need_labels=*/false);
  ReconTrainer trainer(std::move(pairs), a.cfg, a.out, extra);
  const fs::path final_gen = trainer.run();
  std::printf("training done: %d epochs x %d steps\nfinal generator checkpoint: %s\n",
              a.cfg.epochs, a.cfg.steps_per_epoch, final_gen.string().c_str());
  return 0;
}

// --- reconstruct ------------------------------------------------------------------------------

struct ReconstructArgs {
  std::string ckpt, input, out, device = "cpu";
  std::optional<Shape3> tile;  // default: the checkpoint's training crop
  int overlap = 16;
};

int run_reconstruct(const ReconstructArgs& a) {
  require_path(a.ckpt, "reconstruct", "--ckpt");
  require_path(a.input, "reconstruct", "--input");
  require_path(a.out, "reconstruct", "--out");
  check_device(a.device);

  GeneratorCheckpoint ck = load_generator_checkpoint(resolve_generator_dir(a.ckpt));
  const Shape3 tile = a.tile.value_or(ck.train_crop);
  const Volume xray = load_volume(a.input);

  write_config(a.out, json{{"command", "reconstruct"},
                           {"ckpt", a.ckpt},
                           {"input", a.input},
                           {"out", a.out},
                           {"tile", shape_to_json(tile)},
                           {"overlap", a.overlap}});

  const ReconVolumes rv = reconstruct_volume(ck.generator, xray, tile, a.overlap);
  const fs::path dir(a.out);
  save_volume(rv.mean, dir / "mean.v3d");
  save_volume(rv.log_variance, dir / "log_variance.v3d");
  std::printf("wrote %s and %s\n", (dir / "mean.v3d").string().c_str(),
              (dir / "log_variance.v3d").string().c_str());
  return 0;
}

// --- eval ------------------------------------------------------------------------------------

struct EvalArgs {
  std::string pred, target, labels, seg_ckpt, logvar, out, device = "cpu";
  double threshold = 0.5;
};

void print_metric_row(const char* name, const std::map<std::string, double>& m) {
  if (m.empty()) return;
  std::printf("%-5s", name);
  for (const char* k : {"XY", "XZ", "YZ", "3D"}) {
    const auto it = m.find(k);
    if (it != m.end()) std::printf("  %s %.4f", k, it->second);
  }
  std::printf("\n");
}

int run_eval(const EvalArgs& a) {
  require_path(a.pred, "eval", "--pred");
  require_path(a.target, "eval", "--target");
  require_path(a.out, "eval", "--out");
  check_device(a.device);
  if (a.labels.empty() != a.seg_ckpt.empty())
    fail(ErrorKind::Config, "eval: --labels and --seg-ckpt must be given together");

  json resolved{{"command", "eval"},
                {"pred", a.pred},
                {"target", a.target},
                {"out", a.out},
                {"threshold", a.threshold}};
  if (!a.labels.empty()) {
    resolved["labels"] = a.labels;
    resolved["seg_ckpt"] = a.seg_ckpt;
  }
  if (!a.logvar.empty()) resolved["logvar"] = a.logvar;
  write_config(a.out, resolved);

  const Volume pred = load_volume(a.pred);
  const Volume target = load_volume(a.target);
  std::optional<SegUNet> seg;
  std::optional<Volume> labels;
  if (!a.seg_ckpt.empty()) {
    seg.emplace(load_segnet_checkpoint(a.seg_ckpt));
    labels = load_volume(a.labels);
  }

  const MetricsReport report = evaluate_volume(pred, target, seg ? &*seg : nullptr,
                                               labels ? &*labels : nullptr, a.threshold);
  write_report(report, a.out);

  if (!a.logvar.empty()) {
    const Volume logvar = load_volume(a.logvar);
    const ReconVolumes rv{pred, logvar};
    export_uncertainty(rv, target, fs::path(a.out) / "panels");
  }

  print_metric_row("PSNR", report.psnr);
  print_metric_row("SSIM", report.ssim);
  print_metric_row("JS", report.jaccard);
  print_metric_row("Dice", report.dice);
  std::printf("report: %s\n", (fs::path(a.out) / "report.json").string().c_str());
  return 0;
}

// --- plot ------------------------------------------------------------------------------------

struct PlotArgs {
  std::string history, out;
  std::vector<std::string> series;
};

int run_plot(const PlotArgs& a) {
  require_path(a.history, "plot", "--history");
  require_path(a.out, "plot", "--out");
  write_config(a.out, json{{"command", "plot"},
                           {"history", a.history},
                           {"out", a.out},
                           {"series", a.series}});
  const HistoryTable table = read_history_csv(a.history);
  write_loss_curves_svg(table, a.series, fs::path(a.out) / "loss_curves.svg");
  std::printf("wrote %s\n", (fs::path(a.out) / "loss_curves.svg").string().c_str());
  return 0;
}

// --- config-file seeding -----------------------------------------------------------------------

void seed_from_config(const json& j, MakePhantomArgs& a) {
  if (j.contains("out")) a.out = j.at("out").get<std::string>();
  if (j.contains("count")) a.count = j.at("count").get<int>();
  if (j.contains("phantom")) j.at("phantom").get_to(a.phantom);
}

void seed_from_config(const json& j, TrainSegArgs& a) {
  if (j.contains("data")) a.data = j.at("data").get<std::string>();
  if (j.contains("out")) a.out = j.at("out").get<std::string>();
  j.get_to(a.cfg);  // tolerant: only the keys present are applied
}

void seed_from_config(const json& j, TrainArgs& a) {
  if (j.contains("data")) a.data = j.at("data").get<std::string>();
  if (j.contains("out")) a.out = j.at("out").get<std::string>();
  j.get_to(a.cfg);
}

void seed_from_config(const json& j, ReconstructArgs& a) {
  if (j.contains("ckpt")) a.ckpt = j.at("ckpt").get<std::string>();
  if (j.contains("input")) a.input = j.at("input").get<std::string>();
  if (j.contains("out")) a.out = j.at("out").get<std::string>();
  if (j.contains("tile")) a.tile = shape_from_json(j.at("tile"), "tile");
  if (j.contains("overlap")) a.overlap = j.at("overlap").get<int>();
}

void seed_from_config(const json& j, EvalArgs& a) {
  if (j.contains("pred")) a.pred = j.at("pred").get<std::string>();
  if (j.contains("target")) a.target = j.at("target").get<std::string>();
  if (j.contains("labels")) a.labels = j.at("labels").get<std::string>();
  if (j.contains("seg_ckpt")) a.seg_ckpt = j.at("seg_ckpt").get<std::string>();
  if (j.contains("logvar")) a.logvar = j.at("logvar").get<std::string>();
  if (j.contains("out")) a.out = j.at("out").get<std::string>();
  if (j.contains("threshold")) a.threshold = j.at("threshold").get<double>();
}

void seed_from_config(const json& j, PlotArgs& a) {
  if (j.contains("history")) a.history = j.at("history").get<std::string>();
  if (j.contains("out")) a.out = j.at("out").get<std::string>();
  if (j.contains("series")) a.series = j.at("series").get<std::vector<std::string>>();
}

}  // namespace

int run_cli(const std::vector<std::string>& args) {
  try {
    CLI::App app{"xem - X-ray to EM volume translation toolkit"};
    app.require_subcommand(1);
    app.set_version_flag("--version", "xem 0.1.0");

    MakePhantomArgs mp;
    TrainSegArgs ts;
    TrainArgs tr;
    ReconstructArgs rc;
    EvalArgs ev;
    PlotArgs pl;

    // Flags override config-file values: load the file into the bound structs
    // first, then let CLI11 apply whatever was given explicitly.
    const std::optional<fs::path> config_file = find_config_arg(args);
    const std::string cmd = args.empty() ? "" : args[0];
    if (config_file) {
      const json j = read_json_file(*config_file);
      check_config_command(j, cmd);
      if (cmd == "make-phantom") seed_from_config(j, mp);
      else if (cmd == "train-seg") seed_from_config(j, ts);
      else if (cmd == "train") seed_from_config(j, tr);
      else if (cmd == "reconstruct") seed_from_config(j, rc);
      else if (cmd == "eval") seed_from_config(j, ev);
      else if (cmd == "plot") seed_from_config(j, pl);
    }

    std::string config_sink;  // consumed by the pre-scan; registered for help/validation
    std::string mp_size, mp_blur, mp_voxel, tr_variant, tr_crop, tr_seg_ckpt, rc_tile;

    CLI::App* c_mp = app.add_subcommand("make-phantom", "Generate synthetic volume triples");
    c_mp->add_option("--config", config_sink, "JSON config file (flags override)");
    c_mp->add_option("--out", mp.out, "output dataset directory");
    c_mp->add_option("--count", mp.count, "number of pairs");
    c_mp->add_option("--size", mp_size, "volume size as ZxYxX");
    c_mp->add_option("--seed", mp.phantom.seed, "base seed; pair i uses seed+i");
    c_mp->add_option("--cells", mp.phantom.n_cells, "Voronoi cell count");
    c_mp->add_option("--membrane-halfwidth", mp.phantom.membrane_halfwidth_vx,
                     "membrane half-width in voxels");
    c_mp->add_option("--em-noise", mp.phantom.em_noise_sigma, "EM noise sigma");
    c_mp->add_option("--xray-blur", mp_blur, "X-ray blur sigma as z,y,x voxels");
    c_mp->add_option("--xray-downsample", mp.phantom.xray_downsample, "X-ray downsample factor");
    c_mp->add_option("--xray-noise", mp.phantom.xray_noise_sigma, "X-ray noise sigma");
    c_mp->add_option("--jitter", mp.phantom.intensity_jitter, "per-cell intensity jitter");
    c_mp->add_option("--voxel-size", mp_voxel, "voxel size in nm as z,y,x");

    CLI::App* c_ts = app.add_subcommand("train-seg", "Pre-train the 2D membrane seg net");
    c_ts->add_option("--config", config_sink, "JSON config file (flags override)");
    c_ts->add_option("--data", ts.data, "dataset directory (needs labels)");
    c_ts->add_option("--out", ts.out, "run directory");
    c_ts->add_option("--iterations", ts.cfg.iterations, "training iterations");
    c_ts->add_option("--batch-size", ts.cfg.batch_size, "slices per batch");
    c_ts->add_option("--lr", ts.cfg.lr, "learning rate");
    c_ts->add_option("--weight-decay", ts.cfg.weight_decay, "L2 weight decay");
    c_ts->add_option("--seed", ts.cfg.seed, "seed");
    c_ts->add_option("--seg-base", ts.cfg.net.base_channels, "seg U-Net base channels");
    c_ts->add_option("--seg-depth", ts.cfg.net.depth, "seg U-Net depth");
    c_ts->add_option("--log-every", ts.cfg.log_every, "console log period");
    c_ts->add_option("--device", ts.device, "compute device (cpu)");

    CLI::App* c_tr = app.add_subcommand("train", "Train the reconstruction GAN");
    c_tr->add_option("--config", config_sink, "JSON config file (flags override)");
    c_tr->add_option("--data", tr.data, "dataset directory");
    c_tr->add_option("--out", tr.out, "run directory");
    c_tr->add_option("--variant", tr_variant,
                     "full2d | hybrid3d | full3d | full3d_l1 | full3d_seg");
    c_tr->add_option("--epochs", tr.cfg.epochs, "total epochs");
    c_tr->add_option("--constant-epochs", tr.cfg.constant_epochs,
                     "epochs at constant lr before linear decay");
    c_tr->add_option("--lr", tr.cfg.lr, "initial learning rate");
    c_tr->add_option("--batch-size", tr.cfg.batch_size, "crops per step");
    c_tr->add_option("--crop", tr_crop, "training crop as ZxYxX");
    c_tr->add_option("--steps-per-epoch", tr.cfg.steps_per_epoch, "steps per epoch");
    c_tr->add_option("--w-gan", tr.cfg.weights.w_gan, "adversarial weight");
    c_tr->add_option("--w-nll", tr.cfg.weights.w_nll, "reconstruction (NLL/L1) weight");
    c_tr->add_option("--w-seg", tr.cfg.weights.w_seg, "seg-consistency weight");
    c_tr->add_option("--seg-ckpt", tr_seg_ckpt, "frozen seg net checkpoint (seg variants)");
    c_tr->add_option("--seed", tr.cfg.seed, "seed");
    c_tr->add_option("--gen-base", tr.cfg.gen_base, "generator base channels (0 = dims default)");
    c_tr->add_option("--gen-depth", tr.cfg.gen_depth, "generator depth");
    c_tr->add_option("--disc-base", tr.cfg.disc_base, "discriminator base channels");
    c_tr->add_option("--disc-layers", tr.cfg.disc_layers, "discriminator stride-2 layers");
    c_tr->add_flag("--disc-conditional,!--no-disc-conditional", tr.cfg.disc_conditional,
                   "concatenate the source volume into the discriminator input");
    c_tr->add_flag("--deterministic,!--no-deterministic", tr.cfg.deterministic,
                   "single-worker seeded mode (the only mode implemented)");
    c_tr->add_option("--device", tr.device, "compute device (cpu)");

    CLI::App* c_rc = app.add_subcommand("reconstruct", "Run tiled full-volume inference");
    c_rc->add_option("--config", config_sink, "JSON config file (flags override)");
    c_rc->add_option("--ckpt", rc.ckpt, "generator checkpoint (or run) directory");
    c_rc->add_option("--input", rc.input, "input X-ray volume (v3d)");
    c_rc->add_option("--out", rc.out, "output directory");
    c_rc->add_option("--tile", rc_tile, "tile size as ZxYxX (default: training crop)");
    c_rc->add_option("--overlap", rc.overlap, "tile overlap in voxels");
    c_rc->add_option("--device", rc.device, "compute device (cpu)");

    CLI::App* c_ev = app.add_subcommand("eval", "Score a reconstruction against ground truth");
    c_ev->add_option("--config", config_sink, "JSON config file (flags override)");
    c_ev->add_option("--pred", ev.pred, "predicted volume (v3d)");
    c_ev->add_option("--target", ev.target, "ground-truth EM volume (v3d)");
    c_ev->add_option("--labels", ev.labels, "binary membrane labels (v3d)");
    c_ev->add_option("--seg-ckpt", ev.seg_ckpt, "seg net checkpoint for JS/Dice");
    c_ev->add_option("--logvar", ev.logvar, "log-variance volume; triggers uncertainty panels");
    c_ev->add_option("--out", ev.out, "report directory");
    c_ev->add_option("--threshold", ev.threshold, "membrane probability threshold");
    c_ev->add_option("--device", ev.device, "compute device (cpu)");

    CLI::App* c_pl = app.add_subcommand("plot", "Render history.csv as an SVG loss chart");
    c_pl->add_option("--config", config_sink, "JSON config file (flags override)");
    c_pl->add_option("--history", pl.history, "history.csv from a run directory");
    c_pl->add_option("--out", pl.out, "output directory");
    c_pl->add_option("--series", pl.series, "columns to plot (default: all loss columns)");

    std::vector<std::string> full;
    full.reserve(args.size() + 1);
    full.emplace_back("xem");
    full.insert(full.end(), args.begin(), args.end());
    std::vector<const char*> argv;
    argv.reserve(full.size());
    for (const std::string& s : full) argv.push_back(s.c_str());

    try {
      app.parse(static_cast<int>(argv.size()), argv.data());
    } catch (const CLI::ParseError& e) {
      if (e.get_exit_code() == 0) return app.exit(e);  // --help / --version
      std::cerr << "xem: usage: " << e.what() << "\n";
      return 2;
    }

    // String-typed flags that need post-parse decoding.
    if (!mp_size.empty()) mp.phantom.size = parse_shape3(mp_size, "--size");
    if (!mp_blur.empty()) mp.phantom.xray_blur_sigma_vx = parse_vec3(mp_blur, "--xray-blur");
    if (!mp_voxel.empty()) mp.phantom.voxel_size_nm = parse_vec3(mp_voxel, "--voxel-size");
    if (!tr_variant.empty()) tr.cfg.variant = variant_spec_from_string(tr_variant);
    if (!tr_crop.empty()) tr.cfg.crop = parse_shape3(tr_crop, "--crop");
    if (!tr_seg_ckpt.empty()) tr.cfg.seg_checkpoint = fs::path(tr_seg_ckpt);
    if (!rc_tile.empty()) rc.tile = parse_shape3(rc_tile, "--tile");

    if (app.got_subcommand(c_mp)) return run_make_phantom(mp);
    if (app.got_subcommand(c_ts)) return run_train_seg(ts);
    if (app.got_subcommand(c_tr)) return run_train(tr);
    if (app.got_subcommand(c_rc)) return run_reconstruct(rc);
    if (app.got_subcommand(c_ev)) return run_eval(ev);
    if (app.got_subcommand(c_pl)) return run_plot(pl);
    std::cerr << "xem: usage: a subcommand is required\n";
    return 2;
  } catch (const Error& e) {
    std::cerr << "xem: error: " << e.what() << "\n";
    return exit_code_for(e.kind());
  } catch (const std::exception& e) {
    std::cerr << "xem: error: runtime: " << e.what() << "\n";
    return 1;
  }
}

}  // namespace xem
