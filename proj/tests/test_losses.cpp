// Closed-form and gradient checks for the four training objectives.

#include <cmath>
#include <optional>
#include <span>
#include <vector>

#include <doctest.h>

#include "xem/losses.hpp"
#include "xem/models.hpp"
#include "xem/rng.hpp"

using namespace xem;

namespace {

// Pre-sigmoid logit for a target probability.
double logit(double p) { return std::log(p / (1.0 - p)); }

std::vector<double> randn(std::size_t n, Rng& rng, double sigma = 1.0) {
  std::vector<double> v(n);
  for (double& x : v) x = rng.normal(0.0, sigma);
  return v;
}

}  // namespace

TEST_CASE("adversarial losses closed forms") {
  // All probabilities 1/2: loss_d = 2 ln 2, loss_g = ln 2, independent of map shape.
  for (std::size_t n : {1u, 5u, 64u}) {
    std::vector<double> half(n, logit(0.5));
    const auto l = adversarial_losses<double>(half, half);
    CHECK(l.loss_d == doctest::Approx(2.0 * std::log(2.0)).epsilon(1e-12));
    CHECK(l.loss_g == doctest::Approx(std::log(2.0)).epsilon(1e-12));
  }

  // Saturated correct discriminator: real -> 1, fake -> 0 drives loss_d to 0.
  std::vector<double> high(4, 40.0), low(4, -40.0);
  const auto sat = adversarial_losses<double>(high, low);
  CHECK(sat.loss_d < 1e-12);

  // f32 path agrees with the double closed form within f32 tolerance.
  std::vector<float> halff(6, static_cast<float>(logit(0.5)));
  const auto lf = adversarial_losses<float>(halff, halff);
  CHECK(lf.loss_d == doctest::Approx(2.0 * std::log(2.0)).epsilon(1e-6));

  std::vector<double> three(3, 0.0), four(4, 0.0);
  CHECK_THROWS_AS((void)adversarial_losses<double>(three, four), Error);
  CHECK_THROWS_AS((void)adversarial_losses<double>({}, {}), Error);
}

TEST_CASE("adversarial gradients match finite differences") {
  Rng rng(11);
  std::vector<double> real = randn(12, rng), fake = randn(12, rng);
  std::vector<double> g_real(12), g_fake(12), g_fake_g(12);
  adversarial_loss_d_grad<double>(real, fake, g_real, g_fake);
  const double lg = adversarial_loss_g_grad<double>(fake, g_fake_g);
  CHECK(lg == doctest::Approx(adversarial_losses<double>(real, fake).loss_g).epsilon(1e-12));

  const double h = 1e-6;
  for (std::size_t i = 0; i < real.size(); ++i) {
    auto rp = real, rm = real;
    rp[i] += h;
    rm[i] -= h;
    const double num = (adversarial_losses<double>(rp, fake).loss_d -
                        adversarial_losses<double>(rm, fake).loss_d) /
                       (2 * h);
    CHECK(g_real[i] == doctest::Approx(num).epsilon(1e-6));

    auto fp = fake, fm = fake;
    fp[i] += h;
    fm[i] -= h;
    const double numd = (adversarial_losses<double>(real, fp).loss_d -
                         adversarial_losses<double>(real, fm).loss_d) /
                        (2 * h);
    CHECK(g_fake[i] == doctest::Approx(numd).epsilon(1e-6));
    const double numg = (adversarial_losses<double>(real, fp).loss_g -
                         adversarial_losses<double>(real, fm).loss_g) /
                        (2 * h);
    CHECK(g_fake_g[i] == doctest::Approx(numg).epsilon(1e-6));
  }
}

TEST_CASE("nll closed forms") {
  // Residual 0 with sigma^2 = 1/(2 pi): the 0.5*s and 0.5*log(2 pi) terms cancel.
  {
    std::vector<double> mu{0.3}, s{std::log(1.0 / (2.0 * M_PI))}, y{0.3};
    CHECK(std::abs(nll_loss<double>(mu, s, y)) < 1e-12);
  }
  // Residual 1, sigma^2 = 1 -> 1/2 + 1/2 log(2 pi).
  {
    std::vector<double> mu{0.0}, s{0.0}, y{1.0};
    CHECK(nll_loss<double>(mu, s, y) ==
          doctest::Approx(0.5 + 0.5 * std::log(2.0 * M_PI)).epsilon(1e-12));
    CHECK(nll_loss<double>(mu, s, y) == doctest::Approx(1.418939).epsilon(1e-6));
  }
  // Residual 2, sigma^2 = 4 -> 4/8 + 1/2 log(8 pi).
  {
    std::vector<double> mu{1.0}, s{std::log(4.0)}, y{3.0};
    CHECK(nll_loss<double>(mu, s, y) ==
          doctest::Approx(0.5 + 0.5 * std::log(8.0 * M_PI)).epsilon(1e-12));
    CHECK(nll_loss<double>(mu, s, y) == doctest::Approx(2.112086).epsilon(1e-6));
  }
  // f32 route hits the same values within f32 precision.
  {
    std::vector<float> mu{0.0f}, s{0.0f}, y{1.0f};
    CHECK(nll_loss<float>(mu, s, y) == doctest::Approx(1.418939).epsilon(1e-6));
  }

  std::vector<double> a{0, 0}, b{0};
  CHECK_THROWS_AS((void)nll_loss<double>(a, a, b), Error);
  std::vector<double> bad{std::numeric_limits<double>::quiet_NaN()}, ok{0.0};
  CHECK_THROWS_AS((void)nll_loss<double>(bad, ok, ok), Error);
  std::vector<double> inf{std::numeric_limits<double>::infinity()};
  CHECK_THROWS_AS((void)nll_loss<double>(ok, inf, ok), Error);
}

TEST_CASE("nll gradients match central finite differences on 10 random tensors") {
  Rng rng(42);
  for (int t = 0; t < 10; ++t) {
    const std::size_t n = 4 + static_cast<std::size_t>(rng.uniform_int(12));
    std::vector<double> mu = randn(n, rng), s = randn(n, rng), y = randn(n, rng);
    std::vector<double> gm(n), gs(n);
    nll_loss_grad<double>(mu, s, y, gm, gs);

    const double h = 1e-3;
    for (std::size_t i = 0; i < n; ++i) {
      auto mp = mu, mm = mu;
      mp[i] += h;
      mm[i] -= h;
      const double num_m = (nll_loss<double>(mp, s, y) - nll_loss<double>(mm, s, y)) / (2 * h);
      const double denom_m = std::max(std::abs(num_m), 1e-8);
      CHECK(std::abs(gm[i] - num_m) / denom_m < 1e-4);

      auto sp = s, sm = s;
      sp[i] += h;
      sm[i] -= h;
      const double num_s = (nll_loss<double>(mu, sp, y) - nll_loss<double>(mu, sm, y)) / (2 * h);
      const double denom_s = std::max(std::abs(num_s), 1e-8);
      CHECK(std::abs(gs[i] - num_s) / denom_s < 1e-4);
    }
  }
}

TEST_CASE("nll variance monotonicity: minimum at sigma^2 = residual^2") {
  // 1-pixel sweep with a fixed residual: the loss blows up as sigma^2 -> 0+
  // and is minimized exactly at sigma^2 = r^2.
  const double r = 0.7;
  auto loss_at = [&](double var) {
    std::vector<double> mu{0.0}, s{std::log(var)}, y{r};
    return nll_loss<double>(mu, s, y);
  };
  const double at_min = loss_at(r * r);
  for (double var : {1e-6, 1e-3, 0.1, 0.3, 1.0, 4.0, 100.0}) {
    if (std::abs(var - r * r) < 1e-12) continue;
    CHECK(loss_at(var) > at_min);
  }
  CHECK(loss_at(1e-8) > loss_at(1e-4));  // divergence toward 0+
  CHECK(loss_at(1e-4) > loss_at(1e-2));
  // Derivative changes sign across the minimum.
  CHECK(loss_at(r * r * 0.9) > at_min);
  CHECK(loss_at(r * r * 1.1) > at_min);
}

TEST_CASE("l1 closed forms and subgradient") {
  std::vector<double> a{0.5, 0.5}, b{0.5, 0.5};
  CHECK(l1_loss<double>(a, b) == 0.0);
  std::vector<double> c{0.25, 0.5}, d{0.0, 0.25};
  CHECK(l1_loss<double>(c, d) == doctest::Approx(0.25).epsilon(1e-12));
  std::vector<double> e{0, 1}, f{1, 1};
  CHECK(l1_loss<double>(e, f) == doctest::Approx(0.5).epsilon(1e-12));

  std::vector<double> g(2);
  l1_loss_grad<double>(e, f, g);
  CHECK(g[0] == doctest::Approx(-0.5));  // e < f -> -1/n
  CHECK(g[1] == 0.0);                    // exact tie -> 0

  std::vector<double> one{0};
  CHECK_THROWS_AS((void)l1_loss<double>(a, one), Error);
}

TEST_CASE("seg consistency closed forms, symmetry, gradient") {
  auto spans = [](const std::vector<std::vector<double>>& vv) {
    std::vector<std::span<const double>> s;
    for (const auto& v : vv) s.emplace_back(v);
    return s;
  };

  std::vector<std::vector<double>> p{{0.2, 0.8, 0.5, 0.1}, {0.9, 0.4, 0.3, 0.6}};
  CHECK(seg_consistency_loss<double>(spans(p), spans(p)) == 0.0);

  // Maps differing by 0.5 everywhere -> 0.25.
  std::vector<std::vector<double>> q = p;
  for (auto& v : q)
    for (auto& x : v) x += 0.5;
  CHECK(seg_consistency_loss<double>(spans(p), spans(q)) == doctest::Approx(0.25).epsilon(1e-12));
  // Symmetric in its arguments.
  CHECK(seg_consistency_loss<double>(spans(q), spans(p)) == doctest::Approx(0.25).epsilon(1e-12));

  // One slice differs on exactly 1 of 4 pixels by 1.0: that slice scores 1/4,
  // then the mean over 2 slices gives 1/8.
  std::vector<std::vector<double>> r = p;
  r[1][2] += 1.0;
  CHECK(seg_consistency_loss<double>(spans(p), spans(r)) == doctest::Approx(0.125).epsilon(1e-12));

  CHECK_THROWS_AS((void)seg_consistency_loss<double>({}, {}), Error);
  std::vector<std::vector<double>> bad{{0.1, 0.2}};
  CHECK_THROWS_AS((void)seg_consistency_loss<double>(spans(p), spans(bad)), Error);

  // Gradient vs central differences.
  Rng rng(7);
  for (int t = 0; t < 10; ++t) {
    std::vector<std::vector<double>> fake, real;
    const int slices = 1 + static_cast<int>(rng.uniform_int(3));
    const std::size_t n = 3 + static_cast<std::size_t>(rng.uniform_int(6));
    for (int si = 0; si < slices; ++si) {
      fake.push_back(randn(n, rng, 0.3));
      real.push_back(randn(n, rng, 0.3));
    }
    std::vector<std::vector<double>> grads(fake.size(), std::vector<double>(n));
    std::vector<std::span<double>> gspans;
    for (auto& g : grads) gspans.emplace_back(g);
    seg_consistency_loss_grad<double>(spans(fake), spans(real), gspans);

    const double h = 1e-3;
    for (std::size_t si = 0; si < fake.size(); ++si)
      for (std::size_t i = 0; i < n; ++i) {
        auto fp = fake, fm = fake;
        fp[si][i] += h;
        fm[si][i] -= h;
        const double num = (seg_consistency_loss<double>(spans(fp), spans(real)) -
                            seg_consistency_loss<double>(spans(fm), spans(real))) /
                           (2 * h);
        const double denom = std::max(std::abs(num), 1e-8);
        CHECK(std::abs(grads[si][i] - num) / denom < 1e-4);
      }
  }
}

TEST_CASE("total generator loss arithmetic and variant gating") {
  const LossWeights paper{};  // (w_gan, w_nll, w_seg) = (1, 2e-5, 1)
  const VariantSpec seg_variant = variant_spec(VariantName::Full3dSeg);
  const VariantSpec plain = variant_spec(VariantName::Full3d);

  // Components (adv=1.0, recon=1000, seg=0.5) with paper weights -> 1.52.
  CHECK(total_generator_loss(1.0, 1000.0, 0.5, paper, seg_variant) ==
        doctest::Approx(1.52).epsilon(1e-12));
  CHECK(total_generator_loss(0.0, 0.0, 0.0, paper, seg_variant) == 0.0);

  LossWeights proj{};
  proj.w_gan = 0.0;
  proj.w_nll = 1.0;
  proj.w_seg = 0.0;
  CHECK(total_generator_loss(0.7, 3.0, std::nullopt, proj, plain) == doctest::Approx(3.0));

  // Seg supplied for a no-seg variant (and vice versa) is a configuration error.
  CHECK_THROWS_AS((void)total_generator_loss(1.0, 1.0, 0.5, paper, plain), Error);
  CHECK_THROWS_AS((void)total_generator_loss(1.0, 1.0, std::nullopt, paper, seg_variant), Error);

  // Exactly linear in each component (random coefficient probe).
  Rng rng(3);
  for (int t = 0; t < 20; ++t) {
    LossWeights w{};
    w.w_gan = rng.uniform(0.0, 2.0);
    w.w_nll = rng.uniform(0.0, 2.0);
    w.w_seg = rng.uniform(0.0, 2.0);
    const double a = rng.normal(), b = rng.normal(), c = rng.normal();
    const double base = total_generator_loss(a, b, c, w, seg_variant);
    const double da = rng.normal();
    CHECK(total_generator_loss(a + da, b, c, w, seg_variant) - base ==
          doctest::Approx(w.w_gan * da).epsilon(1e-9));
    const double db = rng.normal();
    CHECK(total_generator_loss(a, b + db, c, w, seg_variant) - base ==
          doctest::Approx(w.w_nll * db).epsilon(1e-9));
    const double dc = rng.normal();
    CHECK(total_generator_loss(a, b, c + dc, w, seg_variant) - base ==
          doctest::Approx(w.w_seg * dc).epsilon(1e-9));
  }
}

TEST_CASE("loss weight defaults match the published values") {
  const LossWeights w{};
  CHECK(w.w_nll == 0.00002);
  CHECK(w.w_gan == 1.0);
  CHECK(w.w_seg == 1.0);
}
