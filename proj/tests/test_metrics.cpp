// Evaluation metrics: PSNR/SSIM/overlap closed forms and independent
// reference implementations, the per-direction volume protocol, uncertainty
// panels and the history plotting utilities.

#include <algorithm>
#include <cmath>
#include <filesystem>
#include <fstream>
#include <limits>
#include <map>
#include <vector>

#include <doctest.h>
#include <nlohmann/json.hpp>

#include "xem/evalsuite.hpp"
#include "xem/plot.hpp"
#include "xem/rng.hpp"

using namespace xem;
namespace fs = std::filesystem;

namespace {

fs::path temp_dir(const char* tag) {
  fs::path p = fs::temp_directory_path() / (std::string("xem_metrics_") + tag);
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

Slice2D make_slice(std::int64_t rows, std::int64_t cols, Rng& rng) {
  Slice2D s;
  s.rows = rows;
  s.cols = cols;
  s.v.resize(static_cast<std::size_t>(rows * cols));
  for (auto& x : s.v) x = static_cast<float>(rng.uniform());
  return s;
}

// Naive SSIM: explicit per-window accumulation, no integral images. Used as
// the independent oracle for the production implementation.
double ssim_naive(const Slice2D& a, const Slice2D& b, const SsimParams& p) {
  const std::int64_t w = p.window;
  const double c1 = (p.k1 * p.data_range) * (p.k1 * p.data_range);
  const double c2 = (p.k2 * p.data_range) * (p.k2 * p.data_range);
  double acc = 0;
  std::int64_t count = 0;
  for (std::int64_t r0 = 0; r0 + w <= a.rows; ++r0)
    for (std::int64_t c0 = 0; c0 + w <= a.cols; ++c0) {
      double ma = 0, mb = 0;
      for (std::int64_t r = r0; r < r0 + w; ++r)
        for (std::int64_t c = c0; c < c0 + w; ++c) {
          ma += a.at(r, c);
          mb += b.at(r, c);
        }
      const double n = static_cast<double>(w * w);
      ma /= n;
      mb /= n;
      double va = 0, vb = 0, cov = 0;
      for (std::int64_t r = r0; r < r0 + w; ++r)
        for (std::int64_t c = c0; c < c0 + w; ++c) {
          const double da = a.at(r, c) - ma, db = b.at(r, c) - mb;
          va += da * da;
          vb += db * db;
          cov += da * db;
        }
      va /= n;
      vb /= n;
      cov /= n;
      acc += ((2 * ma * mb + c1) * (2 * cov + c2)) / ((ma * ma + mb * mb + c1) * (va + vb + c2));
      ++count;
    }
  return acc / static_cast<double>(count);
}

Volume make_volume(Shape3 s, const std::vector<float>& v, Range range = {0, 1},
                   Modality m = Modality::Em) {
  return Volume(s, v, {8, 8, 8}, m, range);
}

}  // namespace

TEST_CASE("psnr closed forms") {
  std::vector<float> a(100, 0.25f), b(100, 0.25f);

  // Zero MSE -> +inf sentinel.
  CHECK(psnr(a, b, 1.0) == std::numeric_limits<double>::infinity());

  // |diff| = 1 everywhere at data_range 255 -> 20*log10(255) dB.
  std::vector<float> c(100, 100.0f), d(100, 101.0f);
  CHECK(psnr(c, d, 255.0) == doctest::Approx(20.0 * std::log10(255.0)).epsilon(1e-12));
  CHECK(psnr(c, d, 255.0) == doctest::Approx(48.130803608679).epsilon(1e-9));

  // Error equal to the full range -> exactly 0 dB.
  std::vector<float> e(10, 0.0f), f(10, 255.0f);
  CHECK(psnr(e, f, 255.0) == doctest::Approx(0.0).epsilon(1e-12));

  // Quarter-range error -> 10*log10(16) ~ 12.04 dB.
  std::vector<float> g(10, 0.0f), h(10, 0.25f);
  CHECK(psnr(g, h, 1.0) == doctest::Approx(10.0 * std::log10(16.0)).epsilon(1e-12));

  // Strictly decreasing under a noise ladder.
  Rng rng(4);
  std::vector<float> base(500);
  for (auto& x : base) x = static_cast<float>(rng.uniform());
  double prev = std::numeric_limits<double>::infinity();
  for (double sigma : {0.01, 0.03, 0.1, 0.3}) {
    std::vector<float> noisy = base;
    Rng nrng(5);
    for (auto& x : noisy) x += static_cast<float>(nrng.normal(0.0, sigma));
    const double p = psnr(noisy, base, 1.0);
    CHECK(p < prev);
    prev = p;
  }

  std::vector<float> one(1, 0.0f);
  CHECK(kind_of([&] { (void)psnr(a, one, 1.0); }) == ErrorKind::Shape);
  CHECK(kind_of([&] { (void)psnr({}, {}, 1.0); }) == ErrorKind::EmptyInput);
  CHECK(kind_of([&] { (void)psnr(a, b, 0.0); }) == ErrorKind::Config);
  CHECK(kind_of([&] { (void)psnr(a, b, -1.0); }) == ErrorKind::Config);
}

TEST_CASE("ssim: identity, symmetry, oracle agreement") {
  Rng rng(21);

  SUBCASE("identical slices score exactly 1") {
    const Slice2D s = make_slice(12, 15, rng);
    CHECK(ssim(s, s) == doctest::Approx(1.0).epsilon(1e-12));
  }

  SUBCASE("symmetric in its arguments") {
    const Slice2D a = make_slice(10, 11, rng), b = make_slice(10, 11, rng);
    CHECK(ssim(a, b) == doctest::Approx(ssim(b, a)).epsilon(1e-12));
  }

  SUBCASE("matches the naive reference on 20 random slice pairs") {
    for (int t = 0; t < 20; ++t) {
      const std::int64_t rows = 7 + rng.uniform_int(10);
      const std::int64_t cols = 7 + rng.uniform_int(10);
      Slice2D a = make_slice(rows, cols, rng);
      Slice2D b = make_slice(rows, cols, rng);
      // Mix in correlation so the test isn't all low-SSIM pairs.
      if (t % 2 == 0)
        for (std::size_t i = 0; i < b.v.size(); ++i) b.v[i] = 0.7f * a.v[i] + 0.3f * b.v[i];
      const SsimParams p;
      CHECK(ssim(a, b, p) == doctest::Approx(ssim_naive(a, b, p)).epsilon(1e-9));
    }
  }

  SUBCASE("single-window constant slices: luminance-only closed form") {
    // a = 0.4, b = 0.6 constant over one 7x7 window: variances and covariance
    // vanish, SSIM = (2ab + c1) / (a^2 + b^2 + c1).
    Slice2D a, b;
    a.rows = b.rows = 7;
    a.cols = b.cols = 7;
    a.v.assign(49, 0.4f);
    b.v.assign(49, 0.6f);
    const double c1 = 0.01 * 0.01;
    const double expected = (2 * 0.4 * 0.6 + c1) / (0.4 * 0.4 + 0.6 * 0.6 + c1);
    CHECK(ssim(a, b) == doctest::Approx(expected).epsilon(1e-6));
  }

  SUBCASE("invariant under joint intensity rescaling") {
    const Slice2D a = make_slice(9, 9, rng), b = make_slice(9, 9, rng);
    Slice2D a10 = a, b10 = b;
    for (auto& x : a10.v) x *= 10.0f;
    for (auto& x : b10.v) x *= 10.0f;
    SsimParams p10;
    p10.data_range = 10.0;
    CHECK(ssim(a10, b10, p10) == doctest::Approx(ssim(a, b)).epsilon(1e-5));
  }

  SUBCASE("shape and parameter validation") {
    const Slice2D a = make_slice(8, 8, rng), b = make_slice(8, 9, rng);
    CHECK(kind_of([&] { (void)ssim(a, b); }) == ErrorKind::Shape);
    const Slice2D tiny = make_slice(3, 12, rng);
    CHECK(kind_of([&] { (void)ssim(tiny, tiny); }) == ErrorKind::Shape);  // rows < window
    SsimParams bad;
    bad.window = 0;
    CHECK(kind_of([&] { (void)ssim(a, a, bad); }) == ErrorKind::Config);
    SsimParams badr;
    badr.data_range = 0.0;
    CHECK(kind_of([&] { (void)ssim(a, a, badr); }) == ErrorKind::Config);
  }
}

TEST_CASE("overlap scores: closed forms") {
  auto mask = [](std::initializer_list<int> bits) {
    std::vector<float> m(8, 0.0f);
    for (int b : bits) m[static_cast<std::size_t>(b)] = 1.0f;
    return m;
  };

  const auto o_same = overlap_scores(mask({1, 3, 5}), mask({1, 3, 5}));
  CHECK(o_same.jaccard == 1.0);
  CHECK(o_same.dice == 1.0);

  const auto o_disj = overlap_scores(mask({0, 1}), mask({6, 7}));
  CHECK(o_disj.jaccard == 0.0);
  CHECK(o_disj.dice == 0.0);

  // {a,b} vs {b,c}: intersection 1, union 3 -> J = 1/3, D = 2/4 = 1/2.
  const auto o_ab = overlap_scores(mask({0, 1}), mask({1, 2}));
  CHECK(o_ab.jaccard == doctest::Approx(1.0 / 3.0).epsilon(1e-12));
  CHECK(o_ab.dice == doctest::Approx(0.5).epsilon(1e-12));

  // Both empty is defined as perfect agreement.
  const auto o_empty = overlap_scores(mask({}), mask({}));
  CHECK(o_empty.jaccard == 1.0);
  CHECK(o_empty.dice == 1.0);

  // One empty -> 0.
  const auto o_half = overlap_scores(mask({2}), mask({}));
  CHECK(o_half.jaccard == 0.0);
  CHECK(o_half.dice == 0.0);

  std::vector<float> nonbin(8, 0.0f);
  nonbin[2] = 0.5f;
  CHECK(kind_of([&] { (void)overlap_scores(nonbin, mask({})); }) == ErrorKind::Label);
  std::vector<float> seven(7, 0.0f);
  CHECK(kind_of([&] { (void)overlap_scores(seven, mask({})); }) == ErrorKind::Shape);
}

TEST_CASE("overlap scores: exhaustive over all pairs of 9-pixel masks") {
  // 512 x 512 = 262144 pairs, checked against direct set arithmetic.
  for (unsigned pa = 0; pa < 512; ++pa) {
    std::vector<float> ma(9), mb(9);
    for (int i = 0; i < 9; ++i) ma[static_cast<std::size_t>(i)] = (pa >> i) & 1u ? 1.0f : 0.0f;
    for (unsigned pb = 0; pb < 512; ++pb) {
      for (int i = 0; i < 9; ++i) mb[static_cast<std::size_t>(i)] = (pb >> i) & 1u ? 1.0f : 0.0f;
      const unsigned inter = static_cast<unsigned>(__builtin_popcount(pa & pb));
      const unsigned uni = static_cast<unsigned>(__builtin_popcount(pa | pb));
      const unsigned total = static_cast<unsigned>(__builtin_popcount(pa) + __builtin_popcount(pb));
      const double ej = uni == 0 ? 1.0 : static_cast<double>(inter) / uni;
      const double ed = total == 0 ? 1.0 : 2.0 * inter / total;
      const Overlap o = overlap_scores(ma, mb);
      REQUIRE(o.jaccard == doctest::Approx(ej).epsilon(1e-12));
      REQUIRE(o.dice == doctest::Approx(ed).epsilon(1e-12));
    }
  }
}

TEST_CASE("overlap scores: dice/jaccard identity on random masks") {
  // D = 2J/(1+J) whenever the union is non-empty.
  Rng rng(33);
  for (int t = 0; t < 1000; ++t) {
    std::vector<float> a(64), b(64);
    for (auto& x : a) x = rng.uniform() < 0.3 ? 1.0f : 0.0f;
    for (auto& x : b) x = rng.uniform() < 0.3 ? 1.0f : 0.0f;
    const Overlap o = overlap_scores(a, b);
    CHECK(o.dice == doctest::Approx(2.0 * o.jaccard / (1.0 + o.jaccard)).epsilon(1e-9));
  }
}

TEST_CASE("evaluate_volume: identity, key sets, slice counts") {
  Rng rng(9);
  const Shape3 s{8, 9, 10};
  std::vector<float> v(static_cast<std::size_t>(s.voxels()));
  for (auto& x : v) x = static_cast<float>(rng.uniform());
  const Volume vol = make_volume(s, v);

  const MetricsReport rep = evaluate_volume(vol, vol);
  const std::vector<std::string> axes{"XY", "XZ", "YZ"};
  CHECK(rep.psnr.size() == 3);
  CHECK(rep.ssim.size() == 3);
  for (const auto& k : axes) {
    REQUIRE(rep.psnr.count(k) == 1);
    CHECK(rep.psnr.at(k) == std::numeric_limits<double>::infinity());
    CHECK(rep.ssim.at(k) == doctest::Approx(1.0).epsilon(1e-12));
  }
  CHECK(rep.jaccard.empty());
  CHECK(rep.dice.empty());
  CHECK(rep.n_slices.at("XY") == 8);
  CHECK(rep.n_slices.at("XZ") == 9);
  CHECK(rep.n_slices.at("YZ") == 10);
  CHECK_FALSE(rep.config_hash.empty());
}

TEST_CASE("evaluate_volume: z-blur degrades the z-resolving directions most") {
  // Target mixes a high-frequency Z pattern with an in-plane gradient; a
  // Z-axis blur destroys the former and keeps the latter, so SSIM along XZ/YZ
  // (whose slices resolve Z) must fall below SSIM along XY.
  const Shape3 s{16, 16, 16};
  std::vector<float> tv(static_cast<std::size_t>(s.voxels()));
  for (std::int64_t z = 0; z < s.z; ++z)
    for (std::int64_t y = 0; y < s.y; ++y)
      for (std::int64_t x = 0; x < s.x; ++x)
        tv[static_cast<std::size_t>((z * s.y + y) * s.x + x)] =
            0.5f * static_cast<float>(z % 2) +
            0.5f * static_cast<float>(y + x) / static_cast<float>(s.y + s.x);
  const Volume target = make_volume(s, tv);

  // Reflect-boundary 1-2-1 blur along Z only.
  std::vector<float> pv(tv.size());
  for (std::int64_t z = 0; z < s.z; ++z)
    for (std::int64_t y = 0; y < s.y; ++y)
      for (std::int64_t x = 0; x < s.x; ++x) {
        auto at = [&](std::int64_t zz) {
          zz = std::clamp<std::int64_t>(zz, 0, s.z - 1);
          return tv[static_cast<std::size_t>((zz * s.y + y) * s.x + x)];
        };
        pv[static_cast<std::size_t>((z * s.y + y) * s.x + x)] =
            0.25f * at(z - 1) + 0.5f * at(z) + 0.25f * at(z + 1);
      }
  const Volume pred = make_volume(s, pv);

  const MetricsReport rep = evaluate_volume(pred, target);
  CHECK(rep.ssim.at("XZ") < rep.ssim.at("XY"));
  CHECK(rep.ssim.at("YZ") < rep.ssim.at("XY"));
  for (const auto& [k, p] : rep.psnr) CHECK(std::isfinite(p));
}

TEST_CASE("evaluate_volume is invariant under jointly reversing Z") {
  Rng rng(14);
  const Shape3 s{7, 9, 8};
  std::vector<float> pv(static_cast<std::size_t>(s.voxels())), tv(pv.size());
  for (auto& x : pv) x = static_cast<float>(rng.uniform());
  for (std::size_t i = 0; i < tv.size(); ++i)
    tv[i] = 0.8f * pv[i] + 0.2f * static_cast<float>(rng.uniform());

  auto reverse_z = [&](const std::vector<float>& v) {
    std::vector<float> r(v.size());
    const std::int64_t plane = s.y * s.x;
    for (std::int64_t z = 0; z < s.z; ++z)
      std::copy(v.begin() + z * plane, v.begin() + (z + 1) * plane,
                r.begin() + (s.z - 1 - z) * plane);
    return r;
  };

  const MetricsReport a = evaluate_volume(make_volume(s, pv), make_volume(s, tv));
  const MetricsReport b =
      evaluate_volume(make_volume(s, reverse_z(pv)), make_volume(s, reverse_z(tv)));
  for (const auto& [k, v] : a.psnr) CHECK(b.psnr.at(k) == doctest::Approx(v).epsilon(1e-10));
  for (const auto& [k, v] : a.ssim) CHECK(b.ssim.at(k) == doctest::Approx(v).epsilon(1e-10));
}

TEST_CASE("evaluate_volume configuration errors") {
  std::vector<float> v8(8, 0.5f);
  const Volume a = make_volume({2, 2, 2}, v8);
  std::vector<float> v12(12, 0.5f);
  const Volume b = make_volume({3, 2, 2}, v12);
  CHECK(kind_of([&] { (void)evaluate_volume(a, b); }) == ErrorKind::Shape);

  SegUNet seg(SegNetSpec{4, 1}, 7);
  CHECK(kind_of([&] { (void)evaluate_volume(a, a, &seg, nullptr); }) == ErrorKind::Config);
  std::vector<float> lab(8, 0.0f);
  const Volume labels({2, 2, 2}, lab, {8, 8, 8}, Modality::Label, {0, 1});
  CHECK(kind_of([&] { (void)evaluate_volume(a, a, nullptr, &labels); }) == ErrorKind::Config);
  CHECK(kind_of([&] { (void)evaluate_volume(a, a, &seg, &labels, 0.0); }) == ErrorKind::Config);
  CHECK(kind_of([&] { (void)evaluate_volume(a, a, &seg, &labels, 1.0); }) == ErrorKind::Config);
}

TEST_CASE("evaluate_volume with a frozen seg net fills the per-direction masks") {
  Rng rng(17);
  const Shape3 s{8, 8, 8};  // every slice must fit the 7x7 SSIM window
  std::vector<float> pv(static_cast<std::size_t>(s.voxels()));
  for (auto& x : pv) x = static_cast<float>(rng.uniform());
  const Volume pred = make_volume(s, pv);
  std::vector<float> lv(pv.size(), 0.0f);
  for (std::size_t i = 0; i < lv.size(); i += 3) lv[i] = 1.0f;
  const Volume labels(s, lv, {8, 8, 8}, Modality::Label, {0, 1});

  SegUNet seg(SegNetSpec{4, 2}, 99);
  const MetricsReport rep = evaluate_volume(pred, pred, &seg, &labels);
  for (const char* k : {"XY", "XZ", "YZ", "3D"}) {
    REQUIRE(rep.jaccard.count(k) == 1);
    REQUIRE(rep.dice.count(k) == 1);
    CHECK(rep.jaccard.at(k) >= 0.0);
    CHECK(rep.jaccard.at(k) <= 1.0);
    CHECK(rep.dice.at(k) >= rep.jaccard.at(k) - 1e-12);  // D >= J always
  }
  CHECK(rep.jaccard.size() == 4);

  // Deterministic: same inputs, same report.
  const MetricsReport rep2 = evaluate_volume(pred, pred, &seg, &labels);
  for (const auto& [k, v] : rep.jaccard) CHECK(rep2.jaccard.at(k) == v);
}

TEST_CASE("segnet_probabilities pads, crops back and stays in [0,1]") {
  SegUNet seg(SegNetSpec{4, 2}, 3);  // depth 2 -> needs multiples of 4
  Rng rng(5);
  Slice2D odd = make_slice(9, 11, rng);  // not divisible by 4
  const Slice2D probs = segnet_probabilities(seg, odd, Range{0, 1});
  CHECK(probs.rows == 9);
  CHECK(probs.cols == 11);
  for (float p : probs.v) {
    REQUIRE(p >= 0.0f);
    REQUIRE(p <= 1.0f);
  }
  // Same input, same map.
  const Slice2D again = segnet_probabilities(seg, odd, Range{0, 1});
  CHECK(again.v == probs.v);
}

TEST_CASE("report json round trip preserves infinities and full precision") {
  const fs::path dir = temp_dir("report");
  MetricsReport rep;
  rep.psnr = {{"XY", std::numeric_limits<double>::infinity()},
              {"XZ", 23.456789012345678},
              {"YZ", 21.0}};
  rep.ssim = {{"XY", 0.987654321987654}, {"XZ", 0.5}, {"YZ", 0.25}};
  rep.jaccard = {{"XY", 0.4}, {"XZ", 0.3}, {"YZ", 0.2}, {"3D", 0.1}};
  rep.dice = {{"XY", 0.5}, {"XZ", 0.4}, {"YZ", 0.3}, {"3D", 0.2}};
  rep.n_slices = {{"XY", 4}, {"XZ", 5}, {"YZ", 6}};
  rep.config_hash = "deadbeef00000000";
  write_report(rep, dir);

  REQUIRE(fs::exists(dir / "report.json"));
  REQUIRE(fs::exists(dir / "report.md"));

  nlohmann::json j;
  std::ifstream(dir / "report.json") >> j;
  CHECK(j["psnr"]["XY"] == "inf");  // infinity serialized as a string
  CHECK(j["psnr"]["XZ"].get<double>() == 23.456789012345678);

  MetricsReport back = j.get<MetricsReport>();
  CHECK(back.psnr.at("XY") == std::numeric_limits<double>::infinity());
  CHECK(back.psnr.at("XZ") == 23.456789012345678);
  CHECK(back.ssim.at("XY") == 0.987654321987654);
  CHECK(back.n_slices.at("YZ") == 6);
  CHECK(back.config_hash == "deadbeef00000000");

  // report.md carries the per-direction table.
  std::ifstream md(dir / "report.md");
  std::string text((std::istreambuf_iterator<char>(md)), std::istreambuf_iterator<char>());
  for (const char* needle : {"X-Y", "X-Z", "Y-Z", "PSNR", "SSIM", "Dice", "config_hash"})
    CHECK(text.find(needle) != std::string::npos);
}

TEST_CASE("export_uncertainty: exact variance/error volumes and panel files") {
  const fs::path dir = temp_dir("panels");
  const Shape3 s{4, 6, 6};
  const std::size_t n = static_cast<std::size_t>(s.voxels());

  std::vector<float> mean_v(n), target_v(n), logvar_v(n, 0.0f);
  Rng rng(8);
  for (std::size_t i = 0; i < n; ++i) {
    target_v[i] = static_cast<float>(rng.uniform());
    mean_v[i] = target_v[i];  // perfect reconstruction
  }
  ReconVolumes recon;
  recon.mean = make_volume(s, mean_v);
  recon.log_variance = Volume(s, logvar_v, {8, 8, 8}, Modality::Variance, {-14, 14});
  const Volume target = make_volume(s, target_v);

  const PanelExport pe = export_uncertainty(recon, target, dir);
  // log_variance = 0 -> variance exactly 1; mean == target -> error exactly 0.
  for (float v : pe.variance.data()) REQUIRE(v == 1.0f);
  for (float e : pe.error.data()) REQUIRE(e == 0.0f);

  // One PNG per axis and kind (mean, variance, error) plus panels.json.
  CHECK(pe.files.size() >= 9);
  for (const auto& f : pe.files) CHECK(fs::exists(f));
  REQUIRE(fs::exists(dir / "panels.json"));
  nlohmann::json pj;
  std::ifstream(dir / "panels.json") >> pj;
  REQUIRE(pj.is_array());
  CHECK(pj.size() == 9);  // 3 axes x {mean, variance, error}
  for (const auto& item : pj) {
    CHECK(item.contains("file"));
    CHECK(item.contains("display_min"));
    CHECK(item.contains("display_max"));
  }

  // Saved volumes round trip through the v3d loader.
  CHECK(fs::exists(dir / "variance.v3d"));
  CHECK(fs::exists(dir / "error.v3d"));
  const Volume var_back = load_volume(dir / "variance.v3d");
  CHECK(var_back.shape() == s);

  // Explicit slice indices are honored.
  const fs::path dir2 = temp_dir("panels2");
  const PanelExport pe2 =
      export_uncertainty(recon, target, dir2, std::array<std::int64_t, 3>{1, 2, 3});
  CHECK(pe2.files.size() == pe.files.size());
  nlohmann::json pj2;
  std::ifstream(dir2 / "panels.json") >> pj2;
  std::map<std::string, std::int64_t> seen;
  for (const auto& item : pj2) seen[item["axis"].get<std::string>()] = item["index"].get<std::int64_t>();
  CHECK(seen.at("xy") == 1);
  CHECK(seen.at("xz") == 2);
  CHECK(seen.at("yz") == 3);

  // Shape mismatches are rejected.
  std::vector<float> small(8, 0.5f);
  const Volume bad = make_volume({2, 2, 2}, small);
  CHECK(kind_of([&] { (void)export_uncertainty(recon, bad, dir2); }) == ErrorKind::Shape);
}

TEST_CASE("uncertainty deciles: exact means on a constructed ramp") {
  // error voxel i = i, variance = 3*error + 5 (monotone): the decile means
  // are then closed-form averages over index ranges.
  const Shape3 s{10, 10, 10};
  const std::size_t n = 1000;
  std::vector<float> err(n), var(n);
  // Shuffle the assignment so the deciles don't coincide with memory order.
  std::vector<std::size_t> perm(n);
  for (std::size_t i = 0; i < n; ++i) perm[i] = i;
  Rng rng(12);
  for (std::size_t i = n; i > 1; --i)
    std::swap(perm[i - 1], perm[static_cast<std::size_t>(rng.uniform_int(std::int64_t(i)))]);
  for (std::size_t i = 0; i < n; ++i) {
    err[perm[i]] = static_cast<float>(i);
    var[perm[i]] = static_cast<float>(3.0 * i + 5.0);
  }
  const Volume verr(s, err, {8, 8, 8}, Modality::Variance, {0, 1000});
  const Volume vvar(s, var, {8, 8, 8}, Modality::Variance, {0, 5000});

  const DecileStats ds = uncertainty_error_deciles(vvar, verr);
  // Top decile: errors 900..999 -> mean variance 3*949.5 + 5; bottom: 0..99.
  CHECK(ds.mean_variance_top == doctest::Approx(3 * 949.5 + 5).epsilon(1e-6));
  CHECK(ds.mean_variance_bottom == doctest::Approx(3 * 49.5 + 5).epsilon(1e-6));
  CHECK(ds.mean_variance_top > ds.mean_variance_bottom);
}

TEST_CASE("read_history_csv parses rectangular numeric tables") {
  const fs::path dir = temp_dir("csv");

  {
    std::ofstream f(dir / "h.csv");
    f << "step,loss_d,loss_g\n1,0.5,1.25\n2,0.25,1.5\n3,0.125,1.75\n";
  }
  const HistoryTable t = read_history_csv(dir / "h.csv");
  REQUIRE(t.columns.size() == 3);
  CHECK(t.columns[0] == "step");
  CHECK(t.column_index("loss_g") == 2);
  REQUIRE(t.rows.size() == 3);
  CHECK(t.rows[1][1] == 0.25);
  CHECK(t.rows[2][2] == 1.75);
  CHECK(kind_of([&] { (void)t.column_index("nope"); }) == ErrorKind::Format);

  CHECK(kind_of([&] { (void)read_history_csv(dir / "missing.csv"); }) == ErrorKind::Io);

  {
    std::ofstream f(dir / "ragged.csv");
    f << "a,b\n1,2\n3\n";
  }
  CHECK(kind_of([&] { (void)read_history_csv(dir / "ragged.csv"); }) == ErrorKind::Format);

  {
    std::ofstream f(dir / "nan.csv");
    f << "a,b\n1,zebra\n";
  }
  CHECK(kind_of([&] { (void)read_history_csv(dir / "nan.csv"); }) == ErrorKind::Format);
}

TEST_CASE("write_loss_curves_svg renders the selected series") {
  const fs::path dir = temp_dir("svg");
  HistoryTable t;
  t.columns = {"step", "loss_d", "loss_g", "lr"};
  for (int i = 0; i < 20; ++i)
    t.rows.push_back({double(i), 1.0 / (i + 1), std::log(i + 2.0), 2e-4});

  write_loss_curves_svg(t, {}, dir / "all.svg");
  std::ifstream f(dir / "all.svg");
  std::string svg((std::istreambuf_iterator<char>(f)), std::istreambuf_iterator<char>());
  CHECK(svg.find("<svg") != std::string::npos);
  CHECK(svg.find("polyline") != std::string::npos);
  CHECK(svg.find("loss_d") != std::string::npos);
  CHECK(svg.find("loss_g") != std::string::npos);
  // Default selection excludes the step axis and the lr column.
  CHECK(svg.find(">lr<") == std::string::npos);

  write_loss_curves_svg(t, {"loss_g"}, dir / "one.svg");
  std::ifstream f2(dir / "one.svg");
  std::string svg2((std::istreambuf_iterator<char>(f2)), std::istreambuf_iterator<char>());
  CHECK(svg2.find("loss_g") != std::string::npos);
  CHECK(svg2.find("loss_d") == std::string::npos);

  CHECK(kind_of([&] { write_loss_curves_svg(t, {"zzz"}, dir / "bad.svg"); }) ==
        ErrorKind::Format);
}
