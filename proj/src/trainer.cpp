#include "xem/trainer.hpp"

#include <cmath>
#include <cstdio>
#include <fstream>
#include <utility>

#include <nlohmann/json.hpp>

namespace xem {

using nlohmann::json;

// --- configs ---------------------------------------------------------------------

void SegTrainConfig::validate() const {
  if (iterations < 1) fail(ErrorKind::Config, "seg training: iterations must be >= 1");
  if (batch_size < 1) fail(ErrorKind::Config, "seg training: batch_size must be >= 1");
  if (!(lr > 0)) fail(ErrorKind::Config, "seg training: lr must be > 0");
  if (weight_decay < 0) fail(ErrorKind::Config, "seg training: weight_decay must be >= 0");
  if (net.base_channels < 1 || net.depth < 1)
    fail(ErrorKind::Config, "seg training: invalid net spec");
}

void ReconTrainConfig::validate() const {
  if (epochs < 1) fail(ErrorKind::Config, "training: epochs must be >= 1");
  if (constant_epochs < 1 || constant_epochs > epochs)
    fail(ErrorKind::Config, "training: constant_epochs must be in [1, epochs]");
  if (!(lr > 0)) fail(ErrorKind::Config, "training: lr must be > 0");
  if (batch_size < 1) fail(ErrorKind::Config, "training: batch_size must be >= 1");
  if (steps_per_epoch < 1) fail(ErrorKind::Config, "training: steps_per_epoch must be >= 1");
  if (crop.z < 1 || crop.y < 1 || crop.x < 1)
    fail(ErrorKind::Config, "training: crop extents must be positive");
  if (weights.w_gan < 0 || weights.w_nll < 0 || weights.w_seg < 0)
    fail(ErrorKind::Config, "training: loss weights must be nonnegative");
  if (variant.use_seg_loss && !seg_checkpoint)
    fail(ErrorKind::Config, std::string("variant ") + to_string(variant.name) +
                                " requires --seg-ckpt (segmentation checkpoint)");
  if (!variant.use_seg_loss && seg_checkpoint)
    fail(ErrorKind::Config, std::string("variant ") + to_string(variant.name) +
                                " does not use a segmentation checkpoint");
  if (gen_base < 0 || gen_depth < 1) fail(ErrorKind::Config, "training: invalid generator spec");
  if (disc_base < 1 || disc_layers < 1)
    fail(ErrorKind::Config, "training: invalid discriminator spec");
}

GeneratorSpec ReconTrainConfig::generator_spec() const {
  GeneratorSpec s = generator_spec_for(variant.generator_dims);
  if (gen_base > 0) s.base_channels = gen_base;
  s.depth = gen_depth;
  return s;
}

DiscriminatorSpec ReconTrainConfig::discriminator_spec() const {
  DiscriminatorSpec s;
  s.dims = variant.discriminator_dims;
  s.base_channels = disc_base;
  s.n_layers = disc_layers;
  s.conditional = disc_conditional;
  return s;
}

void to_json(json& j, const SegTrainConfig& c) {
  j = json{{"iterations", c.iterations}, {"batch_size", c.batch_size},
           {"lr", c.lr},                 {"weight_decay", c.weight_decay},
           {"seed", c.seed},             {"net", c.net},
           {"log_every", c.log_every}};
}

void from_json(const json& j, SegTrainConfig& c) {
  c = SegTrainConfig{};
  if (j.contains("iterations")) c.iterations = j.at("iterations").get<int>();
  if (j.contains("batch_size")) c.batch_size = j.at("batch_size").get<int>();
  if (j.contains("lr")) c.lr = j.at("lr").get<double>();
  if (j.contains("weight_decay")) c.weight_decay = j.at("weight_decay").get<double>();
  if (j.contains("seed")) c.seed = j.at("seed").get<std::uint64_t>();
  if (j.contains("net")) c.net = j.at("net").get<SegNetSpec>();
  if (j.contains("log_every")) c.log_every = j.at("log_every").get<int>();
}

void to_json(json& j, const ReconTrainConfig& c) {
  j = json{{"epochs", c.epochs},
           {"constant_epochs", c.constant_epochs},
           {"lr", c.lr},
           {"batch_size", c.batch_size},
           {"crop", {c.crop.z, c.crop.y, c.crop.x}},
           {"weights",
            {{"w_gan", c.weights.w_gan}, {"w_nll", c.weights.w_nll}, {"w_seg", c.weights.w_seg}}},
           {"variant", c.variant},
           {"seed", c.seed},
           {"steps_per_epoch", c.steps_per_epoch},
           {"gen_base", c.gen_base},
           {"gen_depth", c.gen_depth},
           {"disc_base", c.disc_base},
           {"disc_layers", c.disc_layers},
           {"disc_conditional", c.disc_conditional},
           {"deterministic", c.deterministic}};
  if (c.seg_checkpoint) j["seg_checkpoint"] = c.seg_checkpoint->string();
}

void from_json(const json& j, ReconTrainConfig& c) {
  c = ReconTrainConfig{};
  if (j.contains("epochs")) c.epochs = j.at("epochs").get<int>();
  if (j.contains("constant_epochs")) c.constant_epochs = j.at("constant_epochs").get<int>();
  if (j.contains("lr")) c.lr = j.at("lr").get<double>();
  if (j.contains("batch_size")) c.batch_size = j.at("batch_size").get<int>();
  if (j.contains("crop")) {
    const auto& a = j.at("crop");
    c.crop = Shape3{a.at(0).get<std::int64_t>(), a.at(1).get<std::int64_t>(),
                    a.at(2).get<std::int64_t>()};
  }
  if (j.contains("weights")) {
    const auto& w = j.at("weights");
    if (w.contains("w_gan")) c.weights.w_gan = w.at("w_gan").get<double>();
    if (w.contains("w_nll")) c.weights.w_nll = w.at("w_nll").get<double>();
    if (w.contains("w_seg")) c.weights.w_seg = w.at("w_seg").get<double>();
  }
  if (j.contains("variant")) c.variant = j.at("variant").get<VariantSpec>();
  if (j.contains("seg_checkpoint"))
    c.seg_checkpoint = std::filesystem::path(j.at("seg_checkpoint").get<std::string>());
  if (j.contains("seed")) c.seed = j.at("seed").get<std::uint64_t>();
  if (j.contains("steps_per_epoch")) c.steps_per_epoch = j.at("steps_per_epoch").get<int>();
  if (j.contains("gen_base")) c.gen_base = j.at("gen_base").get<int>();
  if (j.contains("gen_depth")) c.gen_depth = j.at("gen_depth").get<int>();
  if (j.contains("disc_base")) c.disc_base = j.at("disc_base").get<int>();
  if (j.contains("disc_layers")) c.disc_layers = j.at("disc_layers").get<int>();
  if (j.contains("disc_conditional")) c.disc_conditional = j.at("disc_conditional").get<bool>();
  if (j.contains("deterministic")) c.deterministic = j.at("deterministic").get<bool>();
}

double lr_at_epoch(int epoch, const ReconTrainConfig& cfg) {
  if (epoch < 1 || epoch > cfg.epochs)
    fail(ErrorKind::Bounds, "epoch " + std::to_string(epoch) + " outside [1," +
                                std::to_string(cfg.epochs) + "]");
  if (epoch <= cfg.constant_epochs) return cfg.lr;
  return cfg.lr * static_cast<double>(cfg.epochs - epoch) /
         static_cast<double>(cfg.epochs - cfg.constant_epochs);
}

std::array<SlicePick, 3> sample_seg_slices(const Shape3& shape, Rng& rng) {
  if (shape.z < 1 || shape.y < 1 || shape.x < 1)
    fail(ErrorKind::Shape, "sample_seg_slices on empty shape");
  std::array<SlicePick, 3> picks;
  for (std::size_t i = 0; i < kAllAxes.size(); ++i) {
    const Axis axis = kAllAxes[i];
    picks[i] = SlicePick{axis, rng.uniform_int(axis_extent(shape, axis))};
  }
  return picks;
}

// --- shared helpers --------------------------------------------------------------

namespace {

nn::Tensor tensor_from_volume(const Volume& v) {
  nn::Tensor t({1, 1, static_cast<int>(v.shape().z), static_cast<int>(v.shape().y),
                static_cast<int>(v.shape().x)});
  t.v = v.data();
  return t;
}

// Rows/cols follow extract_slice: XY -> (Y,X), XZ -> (Z,X), YZ -> (Z,Y).
nn::Tensor slice_tensor(const nn::Tensor& t, const SlicePick& pick) {
  const int Z = t.d(), Y = t.h(), X = t.w();
  const auto& src = t.v;
  nn::Tensor out;
  switch (pick.axis) {
    case Axis::XY: {
      out = nn::Tensor({1, 1, 1, Y, X});
      const std::int64_t base = pick.index * static_cast<std::int64_t>(Y) * X;
      std::copy_n(src.begin() + base, std::int64_t(Y) * X, out.v.begin());
      break;
    }
    case Axis::XZ: {
      out = nn::Tensor({1, 1, 1, Z, X});
      for (int z = 0; z < Z; ++z) {
        const std::int64_t base = (std::int64_t(z) * Y + pick.index) * X;
        std::copy_n(src.begin() + base, X, out.v.begin() + std::int64_t(z) * X);
      }
      break;
    }
    case Axis::YZ: {
      out = nn::Tensor({1, 1, 1, Z, Y});
      for (int z = 0; z < Z; ++z)
        for (int y = 0; y < Y; ++y)
          out.v[std::int64_t(z) * Y + y] = src[(std::int64_t(z) * Y + y) * X + pick.index];
      break;
    }
  }
  return out;
}

void scatter_slice_grad(nn::Tensor& g, const SlicePick& pick, const nn::Tensor& gs) {
  const int Z = g.d(), Y = g.h(), X = g.w();
  switch (pick.axis) {
    case Axis::XY: {
      const std::int64_t base = pick.index * static_cast<std::int64_t>(Y) * X;
      for (std::int64_t i = 0; i < std::int64_t(Y) * X; ++i) g.v[base + i] += gs.v[i];
      break;
    }
    case Axis::XZ:
      for (int z = 0; z < Z; ++z) {
        const std::int64_t base = (std::int64_t(z) * Y + pick.index) * X;
        for (int x = 0; x < X; ++x) g.v[base + x] += gs.v[std::int64_t(z) * X + x];
      }
      break;
    case Axis::YZ:
      for (int z = 0; z < Z; ++z)
        for (int y = 0; y < Y; ++y)
          g.v[(std::int64_t(z) * Y + y) * X + pick.index] += gs.v[std::int64_t(z) * Y + y];
      break;
  }
}

void scale_grads(const std::vector<nn::ParamRef>& params, float s) {
  for (const auto& p : params)
    for (auto& g : p.g->v) g *= s;
}

void write_json_file(const std::filesystem::path& path, const json& j) {
  std::ofstream f(path, std::ios::trunc);
  if (!f) fail(ErrorKind::Io, "cannot open " + path.string() + " for writing");
  f << j.dump(2) << "\n";
}

std::string fmt_full(double v) {
  char buf[40];
  std::snprintf(buf, sizeof(buf), "%.17g", v);
  return buf;
}

void check_divisible_crop(const char* what, const Shape3& crop, Dims dims, int depth) {
  const std::int64_t div = std::int64_t(1) << depth;
  const auto bad = [&](const char* axis, std::int64_t extent) {
    fail(ErrorKind::Config, std::string(what) + ": crop " + axis + " extent " +
                                std::to_string(extent) + " is not a positive multiple of " +
                                std::to_string(div));
  };
  if (dims == Dims::D3 && (crop.z < div || crop.z % div)) bad("Z", crop.z);
  if (crop.y < div || crop.y % div) bad("Y", crop.y);
  if (crop.x < div || crop.x % div) bad("X", crop.x);
}

}  // namespace

// --- segmentation pre-training -----------------------------------------------------

void SegSliceDataset::add(Slice2D image, Slice2D mask) {
  if (image.rows != mask.rows || image.cols != mask.cols)
    fail(ErrorKind::Shape, "seg dataset: image/mask shapes differ");
  if (!samples_.empty() &&
      (image.rows != samples_[0].image.rows || image.cols != samples_[0].image.cols))
    fail(ErrorKind::Shape, "seg dataset: all slices must share one shape");
  for (float m : mask.v)
    if (m != 0.0f && m != 1.0f) fail(ErrorKind::Label, "seg dataset: mask is not binary");
  samples_.push_back(Sample{std::move(image), std::move(mask)});
}

SegSliceDataset SegSliceDataset::from_pairs(const std::vector<VolumePair>& pairs) {
  SegSliceDataset ds;
  for (const auto& pair : pairs) {
    if (!pair.labels) fail(ErrorKind::Config, "seg dataset: pair has no labels");
    const Volume em = normalize(pair.em, NormMode::Symmetric);
    for (std::int64_t z = 0; z < em.shape().z; ++z)
      ds.add(extract_slice(em, Axis::XY, z), extract_slice(*pair.labels, Axis::XY, z));
  }
  return ds;
}

SegTrainResult pretrain_segnet(const SegSliceDataset& dataset, const SegTrainConfig& cfg,
                               const std::filesystem::path& out_dir) {
  return pretrain_segnet(dataset, cfg, out_dir, json::object());
}

SegTrainResult pretrain_segnet(const SegSliceDataset& dataset, const SegTrainConfig& cfg,
                               const std::filesystem::path& out_dir,
                               const nlohmann::json& extra_config) {
  cfg.validate();
  if (dataset.size() == 0) fail(ErrorKind::EmptyInput, "seg training: empty dataset");
  const std::int64_t rows = dataset.image(0).rows, cols = dataset.image(0).cols;
  check_divisible_crop("seg training", Shape3{1, rows, cols}, Dims::D2, cfg.net.depth);

  std::filesystem::create_directories(out_dir);
  json resolved = cfg;
  resolved.update(extra_config);
  write_json_file(out_dir / "config.json", resolved);

  SegUNet net(cfg.net, cfg.seed);
  nn::AdamConfig oc;
  oc.lr = cfg.lr;
  oc.beta1 = 0.9;  // plain supervised training, not a GAN
  oc.weight_decay = cfg.weight_decay;
  nn::Adam opt(net.params(), oc);
  Rng rng = Rng(cfg.seed).fork(20);

  std::ofstream hist(out_dir / "history.csv", std::ios::trunc);
  if (!hist) fail(ErrorKind::Io, "cannot open " + (out_dir / "history.csv").string());
  hist << "iteration,loss,lr\n";

  const int B = cfg.batch_size;
  std::vector<double> losses;
  losses.reserve(cfg.iterations);
  for (int it = 1; it <= cfg.iterations; ++it) {
    nn::Tensor x({B, 1, 1, static_cast<int>(rows), static_cast<int>(cols)});
    nn::Tensor t(x.shape);
    for (int b = 0; b < B; ++b) {
      const std::size_t i = static_cast<std::size_t>(rng.uniform_int(dataset.size()));
      std::copy(dataset.image(i).v.begin(), dataset.image(i).v.end(),
                x.v.begin() + std::int64_t(b) * rows * cols);
      std::copy(dataset.mask(i).v.begin(), dataset.mask(i).v.end(),
                t.v.begin() + std::int64_t(b) * rows * cols);
    }
    opt.zero_grad();
    nn::Tensor z = net.forward_logits(x);
    // Per-pixel binary cross-entropy with the sigmoid fused in:
    // softplus(z) - t*z, gradient sigmoid(z) - t.
    nn::Tensor gz(z.shape);
    double loss = 0;
    const double n = static_cast<double>(z.size());
    for (std::int64_t i = 0; i < z.size(); ++i) {
      const double zi = z.v[i], ti = t.v[i];
      loss += detail::softplus(zi) - ti * zi;
      gz.v[i] = static_cast<float>((detail::sigmoid(zi) - ti) / n);
    }
    loss /= n;
    if (!std::isfinite(loss))
      fail(ErrorKind::NanAbort, "seg training: non-finite loss at iteration " + std::to_string(it));
    net.backward_logits(gz);
    opt.step();
    losses.push_back(loss);
    hist << it << "," << fmt_full(loss) << "," << fmt_full(cfg.lr) << "\n";
  }
  hist.flush();

  save_segnet_checkpoint(out_dir, net);
  const std::size_t win = std::max<std::size_t>(1, losses.size() / 10);
  const auto window_mean = [&](std::size_t begin) {
    double s = 0;
    for (std::size_t i = begin; i < begin + win; ++i) s += losses[i];
    return s / static_cast<double>(win);
  };
  return SegTrainResult{window_mean(losses.size() - win), window_mean(0), out_dir};
}

// --- reconstruction training -------------------------------------------------------

ReconTrainer::ReconTrainer(std::vector<VolumePair> dataset, ReconTrainConfig cfg,
                           std::filesystem::path run_dir)
    : ReconTrainer(std::move(dataset), std::move(cfg), std::move(run_dir), json::object()) {}

ReconTrainer::ReconTrainer(std::vector<VolumePair> dataset, ReconTrainConfig cfg,
                           std::filesystem::path run_dir, const nlohmann::json& extra_config)
    : cfg_(std::move(cfg)),
      data_(std::move(dataset)),
      run_dir_(std::move(run_dir)),
      rng_data_(0),
      rng_slices_(0) {
  cfg_.validate();
  if (data_.empty()) fail(ErrorKind::EmptyInput, "training: empty dataset");
  for (std::size_t i = 0; i < data_.size(); ++i) {
    const Shape3& s = data_[i].em.shape();
    if (cfg_.crop.z > s.z || cfg_.crop.y > s.y || cfg_.crop.x > s.x)
      fail(ErrorKind::CropTooLarge, "training: crop does not fit pair " + std::to_string(i));
  }
  check_divisible_crop("generator", cfg_.crop, cfg_.variant.generator_dims, cfg_.gen_depth);

  gen_.emplace(cfg_.generator_spec(), cfg_.seed);
  disc_.emplace(cfg_.discriminator_spec(), cfg_.seed);
  if (cfg_.variant.use_seg_loss) {
    seg_.emplace(load_segnet_checkpoint(*cfg_.seg_checkpoint));
    // every sampled section of the crop must be consumable by the seg net
    const std::int64_t div = std::int64_t(1) << seg_->spec().depth;
    for (std::int64_t e : {cfg_.crop.z, cfg_.crop.y, cfg_.crop.x})
      if (e < div || e % div)
        fail(ErrorKind::Config, "training: crop extent " + std::to_string(e) +
                                    " is not a multiple of the seg net's " + std::to_string(div));
  }

  nn::AdamConfig oc;
  oc.lr = cfg_.lr;
  opt_g_.emplace(gen_->params(), oc);
  opt_d_.emplace(disc_->params(), oc);

  rng_data_ = Rng(cfg_.seed).fork(10);
  rng_slices_ = Rng(cfg_.seed).fork(11);

  std::filesystem::create_directories(run_dir_);
  json resolved = cfg_;
  resolved.update(extra_config);
  write_json_file(run_dir_ / "config.json", resolved);
  std::ofstream hist(run_dir_ / "history.csv", std::ios::trunc);
  if (!hist) fail(ErrorKind::Io, "cannot open " + (run_dir_ / "history.csv").string());
  hist << "step,epoch,loss_d,loss_g_adv,loss_recon,loss_seg,total,lr\n";
}

ReconTrainer::~ReconTrainer() = default;

std::uint64_t ReconTrainer::segnet_hash() {
  return seg_ ? params_hash(seg_->params()) : 0;
}

CropBatch ReconTrainer::next_batch() {
  CropBatch b;
  b.pair_index = static_cast<std::size_t>(rng_data_.uniform_int(data_.size()));
  const VolumePair crop = random_crop_pair(data_[b.pair_index], cfg_.crop, rng_data_);
  b.x = tensor_from_volume(normalize(crop.xray, NormMode::Symmetric));
  b.y = tensor_from_volume(normalize(crop.em, NormMode::Symmetric));
  // Always drawn, even for variants without the seg term, so the random
  // streams of all variants stay aligned.
  b.slices = sample_seg_slices(cfg_.crop, rng_slices_);
  return b;
}

nn::Tensor ReconTrainer::disc_input(const CropBatch& batch, const nn::Tensor& t) const {
  return cfg_.disc_conditional ? nn::concat_channels(batch.x, t) : t;
}

namespace {

// Discriminator phase for one example; gradients accumulate into D.
double accum_d(PatchDiscriminator& disc, const nn::Tensor& real_in, const nn::Tensor& fake_in) {
  // The real-side backward must run before the fake forward reuses the caches.
  nn::Tensor r = disc.forward(real_in);
  nn::Tensor gr(r.shape);
  const double loss_real = [&] {
    double acc = 0;
    const double n = static_cast<double>(r.size());
    for (std::int64_t i = 0; i < r.size(); ++i) {
      acc += detail::softplus<double>(-static_cast<double>(r.v[i]));
      gr.v[i] = static_cast<float>((detail::sigmoid<double>(r.v[i]) - 1.0) / n);
    }
    return acc / n;
  }();
  disc.backward(gr, false, true);

  nn::Tensor f = disc.forward(fake_in);
  nn::Tensor gf(f.shape);
  const double loss_fake = [&] {
    double acc = 0;
    const double n = static_cast<double>(f.size());
    for (std::int64_t i = 0; i < f.size(); ++i) {
      acc += detail::softplus<double>(static_cast<double>(f.v[i]));
      gf.v[i] = static_cast<float>(detail::sigmoid<double>(f.v[i]) / n);
    }
    return acc / n;
  }();
  disc.backward(gf, false, true);
  return loss_real + loss_fake;
}

}  // namespace

double ReconTrainer::d_step(const CropBatch& batch) {
  opt_d_->zero_grad();
  const GenOutput out = gen_->forward(batch.x);
  const double loss_d = accum_d(*disc_, disc_input(batch, batch.y), disc_input(batch, out.mean));
  opt_d_->set_lr(lr_at_epoch(epoch_, cfg_));
  opt_d_->step();
  return loss_d;
}

StepLosses ReconTrainer::g_step(const CropBatch& batch) {
  opt_g_->zero_grad();
  GenOutput out = gen_->forward(batch.x);
  StepLosses s = g_accumulate(batch, out);
  opt_g_->set_lr(lr_at_epoch(epoch_, cfg_));
  opt_g_->step();
  return s;
}

// Generator phase for one example: adversarial + reconstruction (+ seg) terms,
// gradients accumulated into the generator. Assumes gen_ caches belong to the
// forward pass that produced `out`.
StepLosses ReconTrainer::g_accumulate(const CropBatch& batch, GenOutput& out) {
  StepLosses s;
  s.lr = lr_at_epoch(epoch_, cfg_);

  // Adversarial: fresh pass through the (already updated) discriminator.
  nn::Tensor f = disc_->forward(disc_input(batch, out.mean));
  nn::Tensor gf(f.shape);
  s.loss_g_adv = adversarial_loss_g_grad<float>(std::span<const float>(f.v), std::span<float>(gf.v));
  nn::Tensor g_in = disc_->backward(gf, true, false);
  // Conditional mode concatenates x as channel 0; the generator grad is channel 1.
  nn::Tensor g_mean_adv;
  if (cfg_.disc_conditional) {
    nn::Tensor gx_unused;
    nn::split_channels(g_in, 1, gx_unused, g_mean_adv);
  } else {
    g_mean_adv = std::move(g_in);
  }

  // Reconstruction term.
  nn::Tensor g_mean_rec(out.mean.shape);
  nn::Tensor g_logvar(out.log_variance.shape);
  if (cfg_.variant.recon_loss == ReconLoss::Nll) {
    s.loss_recon = nll_loss_grad<float>(std::span<const float>(out.mean.v),
                                        std::span<const float>(out.log_variance.v),
                                        std::span<const float>(batch.y.v),
                                        std::span<float>(g_mean_rec.v), std::span<float>(g_logvar.v));
  } else {
    s.loss_recon = l1_loss_grad<float>(std::span<const float>(out.mean.v),
                                       std::span<const float>(batch.y.v),
                                       std::span<float>(g_mean_rec.v));
  }

  nn::Tensor g_mean_total(out.mean.shape);
  const float wg = static_cast<float>(cfg_.weights.w_gan);
  const float wr = static_cast<float>(cfg_.weights.w_nll);
  for (std::int64_t i = 0; i < g_mean_total.size(); ++i)
    g_mean_total.v[i] = wg * g_mean_adv.v[i] + wr * g_mean_rec.v[i];
  for (auto& v : g_logvar.v) v *= wr;

  // Segmentation consistency on one section per direction, frozen seg net.
  std::optional<double> seg_total;
  if (cfg_.variant.use_seg_loss) {
    double acc = 0;
    const double n_slices = static_cast<double>(batch.slices.size());
    for (const SlicePick& pick : batch.slices) {
      nn::Tensor real_slice = slice_tensor(batch.y, pick);
      nn::Tensor fake_slice = slice_tensor(out.mean, pick);
      nn::Tensor pr = seg_->forward(real_slice);
      nn::Tensor pf = seg_->forward(fake_slice);  // caches now hold the fake pass
      nn::Tensor gpf(pf.shape);
      const double slice_loss = seg_consistency_loss_grad<float>(
          {std::span<const float>(pf.v)}, {std::span<const float>(pr.v)},
          {std::span<float>(gpf.v)});
      acc += slice_loss / n_slices;
      if (cfg_.weights.w_seg != 0.0) {
        const float scale = static_cast<float>(cfg_.weights.w_seg / n_slices);
        for (auto& v : gpf.v) v *= scale;
        nn::Tensor g_slice = seg_->backward_input(gpf);
        scatter_slice_grad(g_mean_total, pick, g_slice);
      }
    }
    seg_total = acc;
    s.loss_seg = acc;
  }

  gen_->backward(g_mean_total, g_logvar);
  s.loss_d = 0;
  s.total = total_generator_loss(s.loss_g_adv, s.loss_recon, seg_total, cfg_.weights, cfg_.variant);
  return s;
}

StepLosses ReconTrainer::train_step() {
  const double lr = lr_at_epoch(epoch_, cfg_);
  opt_d_->set_lr(lr);
  opt_g_->set_lr(lr);
  const int B = cfg_.batch_size;

  std::vector<CropBatch> batches;
  batches.reserve(B);
  for (int b = 0; b < B; ++b) batches.push_back(next_batch());

  StepLosses s;
  s.lr = lr;
  try {
    // Single D update over the batch; fakes are detached values.
    opt_d_->zero_grad();
    GenOutput out;
    for (int b = 0; b < B; ++b) {
      out = gen_->forward(batches[b].x);
      s.loss_d +=
          accum_d(*disc_, disc_input(batches[b], batches[b].y), disc_input(batches[b], out.mean));
      if (B == 1) last_out_ = std::move(out);
    }
    if (B > 1) scale_grads(disc_->params(), 1.0f / static_cast<float>(B));
    opt_d_->step();
    s.loss_d /= B;

    // Single G update; at batch 1 the forward pass above is still cached.
    opt_g_->zero_grad();
    for (int b = 0; b < B; ++b) {
      GenOutput cur = (B == 1) ? std::move(last_out_) : gen_->forward(batches[b].x);
      const StepLosses part = g_accumulate(batches[b], cur);
      s.loss_g_adv += part.loss_g_adv / B;
      s.loss_recon += part.loss_recon / B;
      s.loss_seg += part.loss_seg / B;
      s.total += part.total / B;
    }
    if (B > 1) scale_grads(gen_->params(), 1.0f / static_cast<float>(B));
    opt_g_->step();
  } catch (const Error& e) {
    if (e.kind() == ErrorKind::NanAbort) dump_nan_batch(batches[0], e.what());
    throw;
  }

  ++step_;
  check_finite(s, batches[0]);
  append_history(s);
  return s;
}

void ReconTrainer::check_finite(const StepLosses& s, const CropBatch& batch) {
  for (double v : {s.loss_d, s.loss_g_adv, s.loss_recon, s.loss_seg, s.total})
    if (!std::isfinite(v))
      dump_nan_batch(batch, "non-finite loss at step " + std::to_string(step_) +
                                " (lr=" + fmt_full(s.lr) + ")");
}

void ReconTrainer::dump_nan_batch(const CropBatch& batch, const std::string& why) {
  const auto dir = run_dir_ / "nan_dump";
  std::filesystem::create_directories(dir);
  const auto dump = [&](const nn::Tensor& t, const char* name) {
    Volume v(Shape3{t.d(), t.h(), t.w()}, t.v, Vec3{1, 1, 1}, Modality::Em, Range{-1, 1});
    save_volume(v, dir / name);
  };
  dump(batch.x, "x.v3d");
  dump(batch.y, "y.v3d");
  fail(ErrorKind::NanAbort,
       why + "; offending batch (pair " + std::to_string(batch.pair_index) + ") dumped to " +
           dir.string());
}

void ReconTrainer::append_history(const StepLosses& s) {
  std::ofstream hist(run_dir_ / "history.csv", std::ios::app);
  hist << step_ << "," << epoch_ << "," << fmt_full(s.loss_d) << "," << fmt_full(s.loss_g_adv)
       << "," << fmt_full(s.loss_recon) << "," << fmt_full(s.loss_seg) << "," << fmt_full(s.total)
       << "," << fmt_full(s.lr) << "\n";
}

std::filesystem::path ReconTrainer::run() {
  const auto ckpt_root = run_dir_ / "ckpt";
  std::filesystem::create_directories(ckpt_root);
  for (epoch_ = 1; epoch_ <= cfg_.epochs; ++epoch_) {
    for (int i = 0; i < cfg_.steps_per_epoch; ++i) train_step();
    // Stage the epoch checkpoint in a temp dir, then rename into place.
    const auto tmp = ckpt_root / "_tmp";
    std::filesystem::remove_all(tmp);
    save_generator_checkpoint(tmp / "generator", *gen_, cfg_.variant, cfg_.crop);
    save_discriminator_checkpoint(tmp / "discriminator", *disc_);
    const auto dst = ckpt_root / ("epoch_" + std::to_string(epoch_));
    std::filesystem::remove_all(dst);
    std::filesystem::rename(tmp, dst);
  }
  epoch_ = cfg_.epochs;  // keep lr queries valid after the loop
  const auto final_dir = ckpt_root / "final";
  std::filesystem::remove_all(final_dir);
  save_generator_checkpoint(final_dir / "generator", *gen_, cfg_.variant, cfg_.crop);
  save_discriminator_checkpoint(final_dir / "discriminator", *disc_);
  return final_dir / "generator";
}

std::filesystem::path train_reconstruction(std::vector<VolumePair> dataset,
                                           const ReconTrainConfig& cfg,
                                           const std::filesystem::path& run_dir) {
  ReconTrainer trainer(std::move(dataset), cfg, run_dir);
  return trainer.run();
}

}  // namespace xem
