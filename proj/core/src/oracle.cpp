#include <algorithm>
#include <cmath>
#include <vector>

#include "skillformer/data.hpp"
#include "skillformer/error.hpp"
#include "skillformer/rng.hpp"

namespace skillformer {

namespace {

constexpr std::size_t kSkewGrid = 1000;

/// P(S <= x) for S a sum of n iid U[0, 1].
double irwin_hall_cdf(std::size_t n, double x) {
  if (x <= 0.0) return 0.0;
  if (x >= static_cast<double>(n)) return 1.0;
  const auto top = static_cast<std::size_t>(std::floor(x));
  double total = 0.0, binom = 1.0, factorial = 1.0;
  for (std::size_t i = 2; i <= n; ++i) factorial *= static_cast<double>(i);
  for (std::size_t k = 0; k <= top; ++k) {
    const double term = binom * std::pow(x - static_cast<double>(k), static_cast<double>(n));
    total += (k % 2 == 0) ? term : -term;
    binom = binom * static_cast<double>(n - k) / static_cast<double>(k + 1);
  }
  return std::clamp(total / factorial, 0.0, 1.0);
}

/// CDF of a sum of n iid latents under the generator's prior.
class SumDistribution {
 public:
  SumDistribution(std::size_t n, bool skew) : n_(n), skew_(skew) {
    if (!skew_ || n_ == 0) return;
    // Cell masses of z = sqrt(u) on a uniform grid: P(j/G <= z < (j+1)/G).
    const double g2 = static_cast<double>(kSkewGrid * kSkewGrid);
    std::vector<double> unit(kSkewGrid);
    for (std::size_t j = 0; j < kSkewGrid; ++j) unit[j] = static_cast<double>(2 * j + 1) / g2;
    std::vector<double> pmf = unit;
    for (std::size_t k = 1; k < n_; ++k) {
      std::vector<double> next(pmf.size() + kSkewGrid - 1, 0.0);
      for (std::size_t a = 0; a < pmf.size(); ++a) {
        for (std::size_t b = 0; b < kSkewGrid; ++b) next[a + b] += pmf[a] * unit[b];
      }
      pmf = std::move(next);
    }
    // The sum of n cells with index total s lies in [s/G, (s+n)/G). The CDF
    // is tabulated at those centres and interpolated linearly between them.
    cdf_.resize(pmf.size());
    double acc = 0.0;
    for (std::size_t s = 0; s < pmf.size(); ++s) {
      cdf_[s] = acc + pmf[s] / 2.0;
      acc += pmf[s];
    }
  }

  /// P(S < x).
  [[nodiscard]] double cdf(double x) const {
    if (n_ == 0) return x > 0.0 ? 1.0 : 0.0;
    if (!skew_) return irwin_hall_cdf(n_, x);
    if (x <= 0.0) return 0.0;
    if (x >= static_cast<double>(n_)) return 1.0;
    const double g = static_cast<double>(kSkewGrid);
    const double pos = x * g - static_cast<double>(n_) / 2.0;  // in units of cell centres
    if (pos <= 0.0) return cdf_.front() * std::max(0.0, x * g / (static_cast<double>(n_) / 2.0));
    const auto i = static_cast<std::size_t>(std::floor(pos));
    if (i + 1 >= cdf_.size()) return 1.0;
    const double frac = pos - static_cast<double>(i);
    return cdf_[i] + frac * (cdf_[i + 1] - cdf_[i]);
  }

 private:
  std::size_t n_;
  bool skew_;
  std::vector<double> cdf_;
};

/// Class probabilities for the total latent sum given an observed partial sum.
std::array<double, 4> class_probabilities(const SumDistribution& hidden, double observed_sum, std::size_t views) {
  std::array<double, 4> p{};
  const double quarter = static_cast<double>(views) / 4.0;
  double below = hidden.cdf(0.0 - observed_sum);
  for (std::size_t c = 0; c < 4; ++c) {
    const double upper = c == 3 ? 1.0 : hidden.cdf(static_cast<double>(c + 1) * quarter - observed_sum);
    p[c] = upper - below;
    below = upper;
  }
  return p;
}

std::size_t argmax(const std::array<double, 4>& p) {
  std::size_t best = 0;
  for (std::size_t c = 1; c < 4; ++c) {
    if (p[c] > p[best]) best = c;
  }
  return best;
}

}  // namespace

OracleResult bayes_oracle(const SyntheticSpec& spec, std::span<const std::size_t> observed, std::size_t draws,
                          std::uint64_t seed) {
  spec.validate();
  if (draws < 10000) throw ConfigError("oracle needs at least 10000 draws, got " + std::to_string(draws));
  std::vector<bool> seen(spec.views, false);
  for (const std::size_t v : observed) {
    if (v >= spec.views) throw ConfigError("observed view " + std::to_string(v) + " out of range");
    if (seen[v]) throw ConfigError("observed view " + std::to_string(v) + " listed twice");
    seen[v] = true;
  }
  const std::size_t hidden_count = spec.views - observed.size();
  const SumDistribution hidden(hidden_count, spec.skew);

  SplitMix64 rng = SplitMix64::stream(seed, 0x0a11ce);
  std::vector<double> z(spec.views);
  std::size_t correct = 0;
  for (std::size_t i = 0; i < draws; ++i) {
    for (double& v : z) {
      const double u = rng.uniform();
      v = spec.skew ? std::sqrt(u) : u;
    }
    const int label = label_from_latent(z);
    int decision;
    if (hidden_count == 0) {
      decision = label;
    } else {
      double partial = 0.0;
      for (const std::size_t v : observed) partial += z[v];
      decision = static_cast<int>(argmax(class_probabilities(hidden, partial, spec.views)));
    }
    if (decision == label) ++correct;
  }
  OracleResult r;
  r.draws = draws;
  r.accuracy = static_cast<double>(correct) / static_cast<double>(draws);
  r.std_error = std::sqrt(r.accuracy * (1.0 - r.accuracy) / static_cast<double>(draws));
  return r;
}

std::array<double, 4> class_prior(const SyntheticSpec& spec) {
  spec.validate();
  const SumDistribution total(spec.views, spec.skew);
  return class_probabilities(total, 0.0, spec.views);
}

}  // namespace skillformer
