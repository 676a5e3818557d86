#pragma once

// ESMM-style CTR + CTCVR cross-entropy losses and the dynamically weighted
// CTCVR variant. The weighted form computed here is the per-instance
// weighted sum (1/N) sum_n wgt(x_n) l_n with wgt = N / N_c; it is
// algebraically identical to summing each nonempty domain's mean loss.
// Note the weighted loss sums per-domain means without dividing by the
// number of nonempty domains, so its scale grows with the domain diversity
// of a batch; fold that into alpha when tuning.

#include <cmath>
#include <cstdint>
#include <span>
#include <vector>

#include "mmn/domains.hpp"
#include "mmn/errors.hpp"

namespace mmn {

// Probabilities entering a log are clamped to [kProbClamp, 1 - kProbClamp].
inline constexpr double kProbClamp = 1e-12;

inline double clamp_prob(double p) {
  if (p < kProbClamp) return kProbClamp;
  if (p > 1.0 - kProbClamp) return 1.0 - kProbClamp;
  return p;
}

enum class Weighting { none, dynamic };

struct LossBreakdown {
  double loss_ctr = 0.0;
  double loss_ctcvr = 0.0;           // unweighted mean
  double loss_ctcvr_weighted = 0.0;  // dynamically weighted form
  double total = 0.0;
  double alpha = 1.0;
  // Mean CTCVR loss per nonempty domain, ascending domain index.
  std::vector<std::pair<int, double>> domain_mean_ctcvr;

  bool finite() const {
    return std::isfinite(loss_ctr) && std::isfinite(loss_ctcvr) &&
           std::isfinite(loss_ctcvr_weighted) && std::isfinite(total);
  }
};

// Mean binary cross-entropy of the click labels.
inline double ctr_loss(std::span<const double> p_ctr, std::span<const std::uint8_t> y) {
  double acc = 0.0;
  for (std::size_t n = 0; n < p_ctr.size(); ++n) {
    const double p = clamp_prob(p_ctr[n]);
    acc += y[n] ? -std::log(p) : -std::log(1.0 - p);
  }
  return acc / static_cast<double>(p_ctr.size());
}

// Per-instance CTCVR cross entropy: label y*z against p_ctr * p_cvr.
inline std::vector<double> ctcvr_per_instance(std::span<const double> p_ctr,
                                              std::span<const double> p_cvr,
                                              std::span<const std::uint8_t> y,
                                              std::span<const std::uint8_t> z) {
  std::vector<double> l(p_ctr.size());
  for (std::size_t n = 0; n < p_ctr.size(); ++n) {
    const double p = clamp_prob(p_ctr[n] * p_cvr[n]);
    const bool label = y[n] != 0 && z[n] != 0;
    l[n] = label ? -std::log(p) : -std::log(1.0 - p);
  }
  return l;
}

// Batch CTCVR loss, plain mean or dynamically weighted.
inline double ctcvr_loss(std::span<const double> p_ctr, std::span<const double> p_cvr,
                         std::span<const std::uint8_t> y, std::span<const std::uint8_t> z,
                         const BatchMasks& masks, Weighting weighting) {
  const std::vector<double> l = ctcvr_per_instance(p_ctr, p_cvr, y, z);
  const double n = static_cast<double>(l.size());
  double acc = 0.0;
  if (weighting == Weighting::none) {
    for (double v : l) acc += v;
  } else {
    const std::vector<double> w = dynamic_weights(masks);
    for (std::size_t i = 0; i < l.size(); ++i) acc += w[i] * l[i];
  }
  return acc / n;
}

// One domain's share of the unweighted batch loss.
struct DomainContribution {
  int domain = 0;
  std::size_t count = 0;
  double contribution = 0.0;  // sum of the domain's per-instance losses / N
  double domain_mean = 0.0;
};

// How the unweighted mean distributes over domains: each nonempty domain
// contributes (N_c / N) times its own mean, not the mean itself. The
// contributions sum back to the unweighted loss.
inline std::vector<DomainContribution> loss_scale_diagnostic(
    std::span<const double> per_instance, const BatchMasks& masks) {
  std::vector<DomainContribution> out;
  out.reserve(masks.num_nonempty());
  const double n = static_cast<double>(masks.batch_size);
  for (const auto& slice : masks.nonempty) {
    DomainContribution c;
    c.domain = slice.domain;
    c.count = slice.count();
    double sum = 0.0;
    for (std::uint32_t r : slice.rows) sum += per_instance[r];
    c.contribution = sum / n;
    c.domain_mean = sum / static_cast<double>(slice.count());
    out.push_back(c);
  }
  return out;
}

}  // namespace mmn
