#pragma once

#include <cmath>
#include <optional>
#include <span>
#include <vector>

#include "xem/error.hpp"

namespace xem {

struct VariantSpec;  // models.hpp

// Weighted combination defaults: (w_nll, w_gan, w_seg) = (0.00002, 1.0, 1.0).
// For the L1 variant, w_nll weights the L1 term (same slot).
struct LossWeights {
  double w_gan = 1.0;
  double w_nll = 0.00002;
  double w_seg = 1.0;
};

template <class T>
struct AdvLosses {
  T loss_d;
  T loss_g;
};

namespace detail {

// log(1 + exp(x)) without overflow.
template <class T>
inline T softplus(T x) {
  return x > T(0) ? x + std::log1p(std::exp(-x)) : std::log1p(std::exp(x));
}

template <class T>
inline T sigmoid(T x) {
  return x > T(0) ? T(1) / (T(1) + std::exp(-x)) : std::exp(x) / (T(1) + std::exp(x));
}

template <class T>
inline void check_finite(std::span<const T> v, const char* what) {
  for (const T& x : v)
    if (!std::isfinite(static_cast<double>(x))) fail(ErrorKind::NanAbort, std::string(what) + " contains non-finite values");
}

}  // namespace detail

// Vanilla GAN losses on pre-sigmoid patch logits; the sigmoid is fused into
// the binary cross-entropy. loss_d scores real against label 1 and fake
// against label 0; loss_g is the non-saturating -log sigmoid(fake).
template <class T>
AdvLosses<T> adversarial_losses(std::span<const T> real_logits, std::span<const T> fake_logits) {
  if (real_logits.size() != fake_logits.size())
    fail(ErrorKind::Shape, "real/fake score maps differ in size");
  if (real_logits.empty()) fail(ErrorKind::EmptyInput, "empty score maps");
  using D = double;
  D d_real = 0, d_fake = 0, g = 0;
  for (const T& r : real_logits) d_real += detail::softplus<D>(-static_cast<D>(r));
  for (const T& f : fake_logits) {
    d_fake += detail::softplus<D>(static_cast<D>(f));
    g += detail::softplus<D>(-static_cast<D>(f));
  }
  const D n = static_cast<D>(real_logits.size());
  return {static_cast<T>(d_real / n + d_fake / n), static_cast<T>(g / n)};
}

// d(loss_d)/d(logits); independent maps may have different sizes here since
// each side is a separate mean.
template <class T>
void adversarial_loss_d_grad(std::span<const T> real_logits, std::span<const T> fake_logits,
                             std::span<T> g_real, std::span<T> g_fake) {
  const double nr = static_cast<double>(real_logits.size());
  const double nf = static_cast<double>(fake_logits.size());
  for (std::size_t i = 0; i < real_logits.size(); ++i)
    g_real[i] = static_cast<T>((detail::sigmoid<double>(real_logits[i]) - 1.0) / nr);
  for (std::size_t i = 0; i < fake_logits.size(); ++i)
    g_fake[i] = static_cast<T>(detail::sigmoid<double>(fake_logits[i]) / nf);
}

// Non-saturating generator loss and its gradient w.r.t. the fake logits.
template <class T>
T adversarial_loss_g_grad(std::span<const T> fake_logits, std::span<T> g_fake) {
  if (fake_logits.empty()) fail(ErrorKind::EmptyInput, "empty score map");
  const double n = static_cast<double>(fake_logits.size());
  double loss = 0;
  for (std::size_t i = 0; i < fake_logits.size(); ++i) {
    loss += detail::softplus<double>(-static_cast<double>(fake_logits[i]));
    g_fake[i] = static_cast<T>((detail::sigmoid<double>(fake_logits[i]) - 1.0) / n);
  }
  return static_cast<T>(loss / n);
}

// Gaussian negative log-likelihood with a log-variance parametrization:
//   mean_i[ 0.5*exp(-s_i)*(y_i-mu_i)^2 + 0.5*s_i + 0.5*log(2*pi) ],  s = log sigma^2.
template <class T>
T nll_loss(std::span<const T> mean, std::span<const T> log_variance, std::span<const T> target) {
  if (mean.size() != log_variance.size() || mean.size() != target.size())
    fail(ErrorKind::Shape, "nll_loss tensors differ in size");
  if (mean.empty()) fail(ErrorKind::EmptyInput, "nll_loss on empty tensors");
  detail::check_finite(mean, "mean");
  detail::check_finite(log_variance, "log_variance");
  detail::check_finite(target, "target");
  constexpr double kHalfLog2Pi = 0.91893853320467274178032973640562;
  double acc = 0;
  for (std::size_t i = 0; i < mean.size(); ++i) {
    const double r = static_cast<double>(target[i]) - static_cast<double>(mean[i]);
    const double s = static_cast<double>(log_variance[i]);
    acc += 0.5 * std::exp(-s) * r * r + 0.5 * s + kHalfLog2Pi;
  }
  return static_cast<T>(acc / static_cast<double>(mean.size()));
}

// Returns the loss and fills d/d(mean), d/d(log_variance).
template <class T>
T nll_loss_grad(std::span<const T> mean, std::span<const T> log_variance,
                std::span<const T> target, std::span<T> g_mean, std::span<T> g_log_variance) {
  const T loss = nll_loss(mean, log_variance, target);
  const double n = static_cast<double>(mean.size());
  for (std::size_t i = 0; i < mean.size(); ++i) {
    const double r = static_cast<double>(target[i]) - static_cast<double>(mean[i]);
    const double inv_var = std::exp(-static_cast<double>(log_variance[i]));
    g_mean[i] = static_cast<T>(-inv_var * r / n);
    g_log_variance[i] = static_cast<T>((0.5 - 0.5 * inv_var * r * r) / n);
  }
  return loss;
}

template <class T>
T l1_loss(std::span<const T> mean, std::span<const T> target) {
  if (mean.size() != target.size()) fail(ErrorKind::Shape, "l1_loss tensors differ in size");
  if (mean.empty()) fail(ErrorKind::EmptyInput, "l1_loss on empty tensors");
  double acc = 0;
  for (std::size_t i = 0; i < mean.size(); ++i)
    acc += std::abs(static_cast<double>(mean[i]) - static_cast<double>(target[i]));
  return static_cast<T>(acc / static_cast<double>(mean.size()));
}

// Subgradient 0 at exact ties.
template <class T>
T l1_loss_grad(std::span<const T> mean, std::span<const T> target, std::span<T> g_mean) {
  const T loss = l1_loss(mean, target);
  const double n = static_cast<double>(mean.size());
  for (std::size_t i = 0; i < mean.size(); ++i) {
    const double d = static_cast<double>(mean[i]) - static_cast<double>(target[i]);
    g_mean[i] = static_cast<T>(d > 0 ? 1.0 / n : (d < 0 ? -1.0 / n : 0.0));
  }
  return loss;
}

// Membrane-consistency term: mean over slices of the mean squared difference
// between the two probability maps (mean reduction keeps the weight
// resolution-independent).
template <class T>
T seg_consistency_loss(const std::vector<std::span<const T>>& probs_fake,
                       const std::vector<std::span<const T>>& probs_real) {
  if (probs_fake.empty() || probs_real.empty())
    fail(ErrorKind::EmptyInput, "seg_consistency_loss on empty slice set");
  if (probs_fake.size() != probs_real.size())
    fail(ErrorKind::Shape, "seg_consistency_loss slice counts differ");
  double acc = 0;
  for (std::size_t s = 0; s < probs_fake.size(); ++s) {
    if (probs_fake[s].size() != probs_real[s].size())
      fail(ErrorKind::Shape, "seg_consistency_loss slice shapes differ");
    if (probs_fake[s].empty()) fail(ErrorKind::EmptyInput, "seg_consistency_loss empty slice");
    double slice_acc = 0;
    for (std::size_t i = 0; i < probs_fake[s].size(); ++i) {
      const double d = static_cast<double>(probs_fake[s][i]) - static_cast<double>(probs_real[s][i]);
      slice_acc += d * d;
    }
    acc += slice_acc / static_cast<double>(probs_fake[s].size());
  }
  return static_cast<T>(acc / static_cast<double>(probs_fake.size()));
}

// Gradient w.r.t. the fake maps (the real side is produced by the frozen net
// from ground truth and never needs gradients in training).
template <class T>
T seg_consistency_loss_grad(const std::vector<std::span<const T>>& probs_fake,
                            const std::vector<std::span<const T>>& probs_real,
                            const std::vector<std::span<T>>& g_fake) {
  const T loss = seg_consistency_loss(probs_fake, probs_real);
  const double ns = static_cast<double>(probs_fake.size());
  for (std::size_t s = 0; s < probs_fake.size(); ++s) {
    const double n = static_cast<double>(probs_fake[s].size());
    for (std::size_t i = 0; i < probs_fake[s].size(); ++i) {
      const double d = static_cast<double>(probs_fake[s][i]) - static_cast<double>(probs_real[s][i]);
      g_fake[s][i] = static_cast<T>(2.0 * d / (n * ns));
    }
  }
  return loss;
}

// w_gan*adv + w_nll*recon + w_seg*seg. The seg term must be present exactly
// when the variant uses it. Declared in losses.cpp to avoid a models include
// cycle here.
double total_generator_loss(double loss_g_adv, double loss_recon, std::optional<double> loss_seg,
                            const LossWeights& weights, const VariantSpec& variant);

}  // namespace xem
