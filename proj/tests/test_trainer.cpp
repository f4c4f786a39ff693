// Training procedures: the learning-rate schedule, slice sampling, seg
// pre-training, and the reconstruction loop's freezing/isolation/determinism
// guarantees.

#include <algorithm>
#include <array>
#include <cmath>
#include <filesystem>
#include <fstream>
#include <string>
#include <vector>

#include <doctest.h>
#include <nlohmann/json.hpp>

#include "xem/phantom.hpp"
#include "xem/plot.hpp"
#include "xem/trainer.hpp"

using namespace xem;
namespace fs = std::filesystem;

namespace {

fs::path temp_dir(const char* tag) {
  fs::path p = fs::temp_directory_path() / (std::string("xem_trainer_") + tag);
  fs::remove_all(p);
  fs::create_directories(p);
  return p;
}

template <class F>
ErrorKind kind_of(F&& f) {
  try {
    f();
  } catch (const Error& e) {
    return e.kind();
  }
  FAIL("expected an Error");
  return ErrorKind::Io;
}

template <class F>
std::string message_of(F&& f) {
  try {
    f();
  } catch (const Error& e) {
    return e.what();
  }
  FAIL("expected an Error");
  return {};
}

// Small aligned triples for training tests. Skips the occasional seed whose
// random geometry trips the membrane-fraction guard.
std::vector<VolumePair> make_pairs(int n, Shape3 size, int n_cells, std::uint64_t seed0) {
  std::vector<VolumePair> pairs;
  std::uint64_t seed = seed0;
  while (static_cast<int>(pairs.size()) < n) {
    PhantomConfig cfg;
    cfg.size = size;
    cfg.n_cells = n_cells;
    cfg.seed = seed++;
    try {
      pairs.push_back(generate_phantom(cfg));
    } catch (const Error& e) {
      if (e.kind() != ErrorKind::DegeneratePhantom) throw;
    }
  }
  return pairs;
}

// Tiny-but-real reconstruction config used throughout this suite.
ReconTrainConfig tiny_config(VariantName variant) {
  ReconTrainConfig cfg;
  cfg.variant = variant_spec(variant);
  cfg.crop = Shape3{8, 16, 16};
  cfg.gen_base = 4;
  cfg.gen_depth = 2;
  cfg.disc_base = 4;
  cfg.disc_layers = 1;
  cfg.epochs = 2;
  cfg.constant_epochs = 2;
  cfg.steps_per_epoch = 3;
  return cfg;
}

}  // namespace

TEST_CASE("lr schedule: published values and the single-breakpoint shape") {
  ReconTrainConfig cfg;  // epochs 100, constant 50, lr 2e-4
  CHECK(lr_at_epoch(1, cfg) == doctest::Approx(0.0002).epsilon(1e-12));
  CHECK(lr_at_epoch(50, cfg) == doctest::Approx(0.0002).epsilon(1e-12));
  CHECK(lr_at_epoch(75, cfg) == doctest::Approx(0.0001).epsilon(1e-12));
  CHECK(lr_at_epoch(100, cfg) == 0.0);

  CHECK(kind_of([&] { (void)lr_at_epoch(0, cfg); }) == ErrorKind::Bounds);
  CHECK(kind_of([&] { (void)lr_at_epoch(101, cfg); }) == ErrorKind::Bounds);

  // Non-increasing, piecewise linear, exactly one slope change (at 50 -> 51).
  std::vector<double> slope;
  for (int e = 1; e < 100; ++e) {
    const double d = lr_at_epoch(e + 1, cfg) - lr_at_epoch(e, cfg);
    CHECK(d <= 1e-18);
    slope.push_back(d);
  }
  int changes = 0;
  for (std::size_t i = 1; i < slope.size(); ++i)
    if (std::abs(slope[i] - slope[i - 1]) > 1e-15) ++changes;
  CHECK(changes == 1);
  CHECK(std::abs(slope[48]) < 1e-18);                                   // epoch 49 -> 50
  CHECK(slope[49] == doctest::Approx(-0.0002 / 50.0).epsilon(1e-12));  // epoch 50 -> 51
}

TEST_CASE("config defaults are the published values") {
  const SegTrainConfig s;
  CHECK(s.iterations == 3000);
  CHECK(s.batch_size == 4);
  CHECK(s.lr == 0.0001);
  CHECK(s.weight_decay == 0.00005);

  const ReconTrainConfig r;
  CHECK(r.epochs == 100);
  CHECK(r.constant_epochs == 50);
  CHECK(r.lr == 0.0002);
  CHECK(r.batch_size == 1);
  CHECK(r.crop == Shape3{64, 128, 128});
  CHECK(r.weights.w_gan == 1.0);
  CHECK(r.weights.w_nll == 0.00002);
  CHECK(r.weights.w_seg == 1.0);
  CHECK(r.variant.name == VariantName::Full3d);
  CHECK_FALSE(r.seg_checkpoint.has_value());
}

TEST_CASE("recon config JSON round trip, with and without seg checkpoint") {
  ReconTrainConfig cfg = tiny_config(VariantName::Full3dSeg);
  cfg.seg_checkpoint = fs::path("/tmp/segdir");
  cfg.weights.w_seg = 0.25;
  cfg.seed = 9;
  const nlohmann::json j = cfg;
  ReconTrainConfig back;
  j.get_to(back);
  CHECK(back.variant.name == VariantName::Full3dSeg);
  CHECK(back.crop == cfg.crop);
  CHECK(back.weights.w_seg == 0.25);
  CHECK(back.seed == 9);
  CHECK(back.gen_base == 4);
  REQUIRE(back.seg_checkpoint.has_value());
  CHECK(*back.seg_checkpoint == fs::path("/tmp/segdir"));

  const nlohmann::json j2 = ReconTrainConfig{};
  ReconTrainConfig plain;
  j2.get_to(plain);
  CHECK_FALSE(plain.seg_checkpoint.has_value());
  CHECK(plain.epochs == 100);
}

TEST_CASE("derived network specs follow the variant dims") {
  ReconTrainConfig cfg;
  cfg.variant = variant_spec(VariantName::Hybrid3d);  // 3D generator, 2D discriminator
  CHECK(cfg.generator_spec().dims == Dims::D3);
  CHECK(cfg.generator_spec().base_channels == 32);  // gen_base 0 -> dims default
  CHECK(cfg.discriminator_spec().dims == Dims::D2);
  CHECK(cfg.discriminator_spec().base_channels == 64);

  cfg.variant = variant_spec(VariantName::Full2d);
  CHECK(cfg.generator_spec().dims == Dims::D2);
  CHECK(cfg.generator_spec().base_channels == 64);

  cfg.gen_base = 12;
  CHECK(cfg.generator_spec().base_channels == 12);
}

TEST_CASE("recon config validation rejects inconsistent setups") {
  CHECK(kind_of([] {
          ReconTrainConfig c;
          c.constant_epochs = 101;
          c.validate();
        }) == ErrorKind::Config);
  CHECK(kind_of([] {
          ReconTrainConfig c;
          c.epochs = 0;
          c.validate();
        }) == ErrorKind::Config);
  CHECK(kind_of([] {
          ReconTrainConfig c;
          c.weights.w_nll = -1.0;
          c.validate();
        }) == ErrorKind::Config);
  CHECK(kind_of([] {
          ReconTrainConfig c;
          c.steps_per_epoch = 0;
          c.validate();
        }) == ErrorKind::Config);

  // seg checkpoint iff the variant wants it.
  const std::string need = message_of([] {
    ReconTrainConfig c;
    c.variant = variant_spec(VariantName::Full3dSeg);
    c.validate();
  });
  CHECK(need.find("full3d_seg") != std::string::npos);
  CHECK(need.find("seg") != std::string::npos);
  CHECK(kind_of([] {
          ReconTrainConfig c;  // full3d does not take one
          c.seg_checkpoint = fs::path("/tmp/x");
          c.validate();
        }) == ErrorKind::Config);
}

TEST_CASE("sample_seg_slices: one pick per direction, in range, deterministic") {
  const Shape3 shape{64, 128, 128};
  Rng rng(3);
  for (int t = 0; t < 100; ++t) {
    const auto picks = sample_seg_slices(shape, rng);
    CHECK(picks[0].axis == Axis::XY);
    CHECK(picks[1].axis == Axis::XZ);
    CHECK(picks[2].axis == Axis::YZ);
    CHECK(picks[0].index >= 0);
    CHECK(picks[0].index < 64);
    CHECK(picks[1].index < 128);
    CHECK(picks[2].index < 128);
  }

  const auto all_zero = [&] {
    Rng r(4);
    return sample_seg_slices(Shape3{1, 1, 1}, r);
  }();
  for (const auto& p : all_zero) CHECK(p.index == 0);

  Rng a(5), b(5);
  for (int t = 0; t < 20; ++t) {
    const auto pa = sample_seg_slices(shape, a);
    const auto pb = sample_seg_slices(shape, b);
    for (int i = 0; i < 3; ++i) CHECK(pa[i].index == pb[i].index);
  }

  CHECK(kind_of([] {
          Rng r(6);
          (void)sample_seg_slices(Shape3{0, 4, 4}, r);
        }) == ErrorKind::Shape);
}

TEST_CASE("sample_seg_slices indices are uniform over each direction") {
  // 10^4 draws on (8,8,8); per-bucket expectation 1250, sigma ~= 33.07.
  const Shape3 shape{8, 8, 8};
  Rng rng(7);
  std::array<std::array<int, 8>, 3> counts{};
  for (int t = 0; t < 10000; ++t) {
    const auto picks = sample_seg_slices(shape, rng);
    for (int i = 0; i < 3; ++i) ++counts[static_cast<std::size_t>(i)][picks[i].index];
  }
  for (const auto& per_axis : counts)
    for (int c : per_axis) CHECK(std::abs(c - 1250) < 133);  // 4 sigma
}

TEST_CASE("seg dataset construction enforces shape and binary labels") {
  SegSliceDataset ds;
  Slice2D img{2, 2, {0.1f, 0.2f, 0.3f, 0.4f}};
  Slice2D mask{2, 2, {0.0f, 1.0f, 1.0f, 0.0f}};
  ds.add(img, mask);
  CHECK(ds.size() == 1);

  Slice2D soft{2, 2, {0.0f, 0.5f, 1.0f, 0.0f}};
  CHECK(kind_of([&] { ds.add(img, soft); }) == ErrorKind::Label);
  Slice2D wide{2, 3, {0, 0, 0, 0, 0, 0}};
  CHECK(kind_of([&] { ds.add(wide, wide); }) == ErrorKind::Shape);  // shape drift

  // from_pairs demands labels.
  auto pair = make_pairs(1, Shape3{8, 16, 16}, 4, 1).front();
  pair.labels.reset();
  CHECK(kind_of([&] { (void)SegSliceDataset::from_pairs({pair}); }) == ErrorKind::Config);
}

TEST_CASE("seg pre-training: loss falls, artifacts land, reruns are identical") {
  // 32 phantom XY slices of 32x32.
  const auto pairs = make_pairs(1, Shape3{32, 32, 32}, 8, 11);
  const SegSliceDataset ds = SegSliceDataset::from_pairs(pairs);
  REQUIRE(ds.size() == 32);

  SegTrainConfig cfg;
  cfg.iterations = 200;
  cfg.net.base_channels = 4;
  cfg.net.depth = 2;
  cfg.seed = 13;

  const fs::path out = temp_dir("segpre");
  const SegTrainResult res = pretrain_segnet(ds, cfg, out, {{"note", "test"}});
  CHECK(res.final_loss < res.initial_loss);
  CHECK(std::isfinite(res.final_loss));
  CHECK(res.checkpoint == out);

  // Artifacts: config.json (with the merged extra key), history.csv, checkpoint.
  CHECK(fs::exists(out / "config.json"));
  CHECK(fs::exists(out / "params.bin"));
  CHECK(fs::exists(out / "spec.json"));
  std::ifstream cj(out / "config.json");
  nlohmann::json dumped = nlohmann::json::parse(cj);
  CHECK(dumped.at("note") == "test");
  CHECK(dumped.at("iterations") == 200);

  const HistoryTable hist = read_history_csv(out / "history.csv");
  CHECK(hist.columns == std::vector<std::string>{"iteration", "loss", "lr"});
  REQUIRE(hist.rows.size() == 200);
  for (const auto& row : hist.rows) CHECK(std::isfinite(row[1]));

  // The checkpoint loads and still produces probabilities.
  SegUNet net = load_segnet_checkpoint(out);
  nn::Tensor x({1, 1, 1, 32, 32});
  for (std::size_t i = 0; i < x.v.size(); ++i)
    x.v[i] = ds.image(0).v[i];
  const nn::Tensor p = net.forward(x);
  for (float v : p.v) {
    REQUIRE(v >= 0.0f);
    REQUIRE(v <= 1.0f);
  }

  // Determinism: a rerun reproduces the iteration-1 loss exactly.
  SegTrainConfig quick = cfg;
  quick.iterations = 3;
  const SegTrainResult r1 = pretrain_segnet(ds, quick, temp_dir("segdet1"));
  const SegTrainResult r2 = pretrain_segnet(ds, quick, temp_dir("segdet2"));
  const HistoryTable h1 = read_history_csv(r1.checkpoint / "history.csv");
  const HistoryTable h2 = read_history_csv(r2.checkpoint / "history.csv");
  CHECK(h1.rows[0][1] == doctest::Approx(h2.rows[0][1]).epsilon(1e-9));

  CHECK(kind_of([&] {
          (void)pretrain_segnet(SegSliceDataset{}, cfg, temp_dir("segempty"));
        }) == ErrorKind::EmptyInput);
}

TEST_CASE("trainer constructor rejects bad crops with precise errors") {
  auto pairs = make_pairs(1, Shape3{16, 24, 24}, 8, 21);

  ReconTrainConfig huge = tiny_config(VariantName::Full3d);
  huge.crop = Shape3{32, 64, 64};
  const fs::path dir = temp_dir("badcrop");
  try {
    ReconTrainer t(pairs, huge, dir / "a");
    FAIL("expected CropTooLarge");
  } catch (const Error& e) {
    CHECK(e.kind() == ErrorKind::CropTooLarge);
    CHECK(std::string(e.what()).find("pair 0") != std::string::npos);
  }

  // Crop extents must match the generator's downsampling depth (2^2 here)...
  ReconTrainConfig odd = tiny_config(VariantName::Full3d);
  odd.crop = Shape3{10, 16, 16};
  const std::string msg =
      message_of([&] { ReconTrainer t(pairs, odd, dir / "b"); });
  CHECK(msg.find("Z extent 10") != std::string::npos);
  CHECK(msg.find("multiple of 4") != std::string::npos);

  // ...but a 2D generator has no Z constraint.
  ReconTrainConfig flat = tiny_config(VariantName::Full2d);
  flat.crop = Shape3{5, 16, 16};
  ReconTrainer t2d(pairs, flat, dir / "c");
  const StepLosses s = t2d.train_step();
  CHECK(std::isfinite(s.total));
}

TEST_CASE("two-epoch smoke run: layout, finite history, loadable checkpoints") {
  auto pairs = make_pairs(4, Shape3{16, 24, 24}, 8, 31);
  ReconTrainConfig cfg = tiny_config(VariantName::Full3d);
  const fs::path run = temp_dir("smoke");
  ReconTrainer trainer(pairs, cfg, run, {{"invoked_as", "smoke"}});
  const fs::path final_ckpt = trainer.run();

  CHECK(final_ckpt == run / "ckpt" / "final" / "generator");
  for (const char* epoch : {"epoch_1", "epoch_2", "final"}) {
    CHECK(fs::exists(run / "ckpt" / epoch / "generator" / "params.bin"));
    CHECK(fs::exists(run / "ckpt" / epoch / "generator" / "spec.json"));
    CHECK(fs::exists(run / "ckpt" / epoch / "discriminator" / "params.bin"));
  }

  std::ifstream cj(run / "config.json");
  nlohmann::json dumped = nlohmann::json::parse(cj);
  CHECK(dumped.at("invoked_as") == "smoke");
  CHECK(dumped.at("epochs") == 2);

  const HistoryTable hist = read_history_csv(run / "history.csv");
  CHECK(hist.columns == std::vector<std::string>{"step", "epoch", "loss_d", "loss_g_adv",
                                                 "loss_recon", "loss_seg", "total", "lr"});
  REQUIRE(hist.rows.size() == 6);  // 2 epochs x 3 steps
  for (const auto& row : hist.rows)
    for (double v : row) CHECK(std::isfinite(v));
  CHECK(hist.rows[0][hist.column_index("lr")] == doctest::Approx(0.0002));
  CHECK(hist.rows[5][hist.column_index("epoch")] == 2.0);

  GeneratorCheckpoint ck = load_generator_checkpoint(final_ckpt);
  CHECK(ck.variant.name == VariantName::Full3d);
  CHECK(ck.train_crop == cfg.crop);
  CHECK(params_hash(ck.generator.params()) == trainer.generator_hash());
}

TEST_CASE("gradient isolation: D steps leave G alone and vice versa; seg frozen") {
  auto pairs = make_pairs(2, Shape3{16, 24, 24}, 8, 41);

  // A frozen membrane net saved straight from init.
  const fs::path segdir = temp_dir("frozenseg");
  {
    SegNetSpec sspec;
    sspec.base_channels = 4;
    sspec.depth = 2;
    SegUNet seg(sspec, 77);
    save_segnet_checkpoint(segdir, seg);
  }

  ReconTrainConfig cfg = tiny_config(VariantName::Full3dSeg);
  cfg.seg_checkpoint = segdir;
  ReconTrainer trainer(pairs, cfg, temp_dir("isolation"));

  const std::uint64_t seg0 = trainer.segnet_hash();
  CHECK(seg0 != 0);

  const CropBatch batch = trainer.next_batch();
  const std::uint64_t g0 = trainer.generator_hash();
  const std::uint64_t d0 = trainer.discriminator_hash();

  const double loss_d = trainer.d_step(batch);
  CHECK(std::isfinite(loss_d));
  CHECK(trainer.generator_hash() == g0);        // D update never touches G
  CHECK(trainer.discriminator_hash() != d0);    // ...but does move D
  CHECK(trainer.segnet_hash() == seg0);

  const std::uint64_t d1 = trainer.discriminator_hash();
  const StepLosses s = trainer.g_step(batch);
  CHECK(std::isfinite(s.total));
  CHECK(s.loss_seg > 0.0);
  CHECK(trainer.discriminator_hash() == d1);    // G update never touches D
  CHECK(trainer.generator_hash() != g0);
  CHECK(trainer.segnet_hash() == seg0);

  for (int i = 0; i < 3; ++i) (void)trainer.train_step();
  CHECK(trainer.segnet_hash() == seg0);  // frozen across full steps too
}

TEST_CASE("determinism: same seed and data reproduce the first steps exactly") {
  auto pairs = make_pairs(2, Shape3{16, 24, 24}, 8, 51);
  ReconTrainConfig cfg = tiny_config(VariantName::Full3d);
  cfg.seed = 99;

  ReconTrainer a(pairs, cfg, temp_dir("det_a"));
  ReconTrainer b(pairs, cfg, temp_dir("det_b"));
  for (int i = 0; i < 3; ++i) {
    const StepLosses sa = a.train_step();
    const StepLosses sb = b.train_step();
    CHECK(sa.loss_d == doctest::Approx(sb.loss_d).epsilon(1e-9));
    CHECK(sa.loss_g_adv == doctest::Approx(sb.loss_g_adv).epsilon(1e-9));
    CHECK(sa.loss_recon == doctest::Approx(sb.loss_recon).epsilon(1e-9));
    CHECK(sa.total == doctest::Approx(sb.total).epsilon(1e-9));
  }
  CHECK(a.generator_hash() == b.generator_hash());
  CHECK(a.discriminator_hash() == b.discriminator_hash());
}

TEST_CASE("full3d_seg with w_seg=0 matches full3d step for step") {
  auto pairs = make_pairs(2, Shape3{16, 24, 24}, 8, 61);

  const fs::path segdir = temp_dir("abseg");
  {
    SegNetSpec sspec;
    sspec.base_channels = 4;
    sspec.depth = 2;
    SegUNet seg(sspec, 78);
    save_segnet_checkpoint(segdir, seg);
  }

  ReconTrainConfig plain = tiny_config(VariantName::Full3d);
  plain.seed = 7;
  ReconTrainConfig gated = tiny_config(VariantName::Full3dSeg);
  gated.seed = 7;
  gated.seg_checkpoint = segdir;
  gated.weights.w_seg = 0.0;

  ReconTrainer ta(pairs, plain, temp_dir("ab_a"));
  ReconTrainer tb(pairs, gated, temp_dir("ab_b"));
  for (int i = 0; i < 5; ++i) {
    const StepLosses sa = ta.train_step();
    const StepLosses sb = tb.train_step();
    CHECK(sa.loss_d == doctest::Approx(sb.loss_d).epsilon(1e-6));
    CHECK(sa.loss_g_adv == doctest::Approx(sb.loss_g_adv).epsilon(1e-6));
    CHECK(sa.loss_recon == doctest::Approx(sb.loss_recon).epsilon(1e-6));
    CHECK(sa.total == doctest::Approx(sb.total).epsilon(1e-6));
    CHECK(sa.loss_seg == 0.0);   // variant has no seg term
    CHECK(sb.loss_seg > 0.0);    // measured, but weighted to nothing
  }
  CHECK(ta.generator_hash() == tb.generator_hash());
}

TEST_CASE("w_gan = w_seg = 0 reduces to NLL regression and the loss falls") {
  auto pairs = make_pairs(4, Shape3{16, 24, 24}, 8, 71);

  std::vector<double> deltas;
  for (std::uint64_t seed : {0ull, 1ull, 2ull}) {
    ReconTrainConfig cfg = tiny_config(VariantName::Full3d);
    cfg.weights.w_gan = 0.0;
    cfg.weights.w_nll = 1.0;
    cfg.seed = seed;
    cfg.epochs = 1;
    cfg.constant_epochs = 1;
    ReconTrainer trainer(pairs, cfg, temp_dir(("nll" + std::to_string(seed)).c_str()));

    std::vector<double> recon;
    for (int i = 0; i < 200; ++i) recon.push_back(trainer.train_step().loss_recon);
    const auto mean = [&](std::size_t b, std::size_t e) {
      double s = 0;
      for (std::size_t i = b; i < e; ++i) s += recon[i];
      return s / static_cast<double>(e - b);
    };
    deltas.push_back(mean(0, 20) - mean(180, 200));
  }
  std::sort(deltas.begin(), deltas.end());
  CHECK(deltas[1] > 0.0);  // 3-seed median improvement
}
