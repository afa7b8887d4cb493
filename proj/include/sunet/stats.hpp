#pragma once

// Two-sample t-test with a two-tailed p-value computed from the regularized
// incomplete beta function (continued fraction, modified Lentz).  The
// regularized incomplete gamma (for chi-square tail probabilities) lives
// here too since the special-function machinery is shared.

#include <cmath>
#include <limits>

#include "core.hpp"

namespace sunet {

namespace special_detail {

constexpr double kEps = 1e-14;
constexpr double kTiny = 1e-300;
constexpr int kMaxIter = 500;

// continued fraction for the incomplete beta (modified Lentz)
inline double betacf(double a, double b, double x) {
  const double qab = a + b, qap = a + 1.0, qam = a - 1.0;
  double c = 1.0, d = 1.0 - qab * x / qap;
  if (std::abs(d) < kTiny) d = kTiny;
  d = 1.0 / d;
  double h = d;
  for (int m = 1; m <= kMaxIter; ++m) {
    const int m2 = 2 * m;
    double aa = m * (b - m) * x / ((qam + m2) * (a + m2));
    d = 1.0 + aa * d;
    if (std::abs(d) < kTiny) d = kTiny;
    c = 1.0 + aa / c;
    if (std::abs(c) < kTiny) c = kTiny;
    d = 1.0 / d;
    h *= d * c;
    aa = -(a + m) * (qab + m) * x / ((a + m2) * (qap + m2));
    d = 1.0 + aa * d;
    if (std::abs(d) < kTiny) d = kTiny;
    c = 1.0 + aa / c;
    if (std::abs(c) < kTiny) c = kTiny;
    d = 1.0 / d;
    const double del = d * c;
    h *= del;
    if (std::abs(del - 1.0) < kEps) return h;
  }
  throw numeric_error("incomplete beta: continued fraction did not converge");
}

}  // namespace special_detail

// regularized incomplete beta I_x(a, b)
inline double ibeta(double a, double b, double x) {
  if (!(a > 0.0) || !(b > 0.0)) throw numeric_error("ibeta: parameters must be positive");
  if (x <= 0.0) return 0.0;
  if (x >= 1.0) return 1.0;
  const double ln_front =
      std::lgamma(a + b) - std::lgamma(a) - std::lgamma(b) + a * std::log(x) + b * std::log1p(-x);
  const double front = std::exp(ln_front);
  if (x < (a + 1.0) / (a + b + 2.0)) return front * special_detail::betacf(a, b, x) / a;
  return 1.0 - front * special_detail::betacf(b, a, 1.0 - x) / b;
}

// regularized lower incomplete gamma P(a, x)
inline double igamma_p(double a, double x) {
  if (!(a > 0.0) || x < 0.0) throw numeric_error("igamma: bad arguments");
  if (x == 0.0) return 0.0;
  using namespace special_detail;
  if (x < a + 1.0) {  // series
    double ap = a, sum = 1.0 / a, del = sum;
    for (int i = 0; i < kMaxIter; ++i) {
      ap += 1.0;
      del *= x / ap;
      sum += del;
      if (std::abs(del) < std::abs(sum) * kEps)
        return sum * std::exp(-x + a * std::log(x) - std::lgamma(a));
    }
    throw numeric_error("incomplete gamma: series did not converge");
  }
  // continued fraction for Q(a, x)
  double b = x + 1.0 - a, c = 1.0 / kTiny, d = 1.0 / b, h = d;
  for (int i = 1; i <= kMaxIter; ++i) {
    const double an = -double(i) * (double(i) - a);
    b += 2.0;
    d = an * d + b;
    if (std::abs(d) < kTiny) d = kTiny;
    c = b + an / c;
    if (std::abs(c) < kTiny) c = kTiny;
    d = 1.0 / d;
    const double del = d * c;
    h *= del;
    if (std::abs(del - 1.0) < kEps)
      return 1.0 - h * std::exp(-x + a * std::log(x) - std::lgamma(a));
  }
  throw numeric_error("incomplete gamma: continued fraction did not converge");
}

// chi-square upper tail probability with k degrees of freedom
inline double chi2_sf(double x, double k) { return 1.0 - igamma_p(k / 2.0, x / 2.0); }

// ---- two-sample t-test --------------------------------------------------------

struct TTestResult {
  double t = 0.0;
  double df = 0.0;
  double p = 1.0;
  bool significant = false;  // p < alpha
  bool degenerate = false;   // zero variance in both groups
};

namespace stats_detail {

inline void mean_var(const std::vector<double>& x, double& mean, double& var) {
  mean = 0.0;
  for (double v : x) mean += v;
  mean /= double(x.size());
  var = 0.0;
  for (double v : x) var += (v - mean) * (v - mean);
  var /= double(x.size() - 1);  // sample variance
}

}  // namespace stats_detail

// Pooled equal-variance test by default; `welch` switches to the unequal
// variance form with Welch-Satterthwaite degrees of freedom.
inline TTestResult ttest_independent(const std::vector<double>& a, const std::vector<double>& b,
                                     double alpha = 0.05, bool welch = false) {
  if (a.size() < 2 || b.size() < 2)
    throw data_error("t-test: need at least 2 samples per group, got " +
                     std::to_string(a.size()) + " and " + std::to_string(b.size()));
  const double na = double(a.size()), nb = double(b.size());
  double ma, va, mb, vb;
  stats_detail::mean_var(a, ma, va);
  stats_detail::mean_var(b, mb, vb);

  TTestResult r;
  if (va == 0.0 && vb == 0.0) {
    r.degenerate = true;
    if (ma == mb) {
      r.t = 0.0;
      r.p = 1.0;
    } else {
      r.t = ma > mb ? std::numeric_limits<double>::infinity()
                    : -std::numeric_limits<double>::infinity();
      r.p = 0.0;
    }
    r.df = welch ? na + nb - 2.0 : na + nb - 2.0;
    r.significant = r.p < alpha;
    return r;
  }

  double se;
  if (welch) {
    const double qa = va / na, qb = vb / nb;
    se = std::sqrt(qa + qb);
    r.df = (qa + qb) * (qa + qb) / (qa * qa / (na - 1.0) + qb * qb / (nb - 1.0));
  } else {
    const double sp2 = ((na - 1.0) * va + (nb - 1.0) * vb) / (na + nb - 2.0);
    se = std::sqrt(sp2 * (1.0 / na + 1.0 / nb));
    r.df = na + nb - 2.0;
  }
  r.t = (ma - mb) / se;
  r.p = ibeta(r.df / 2.0, 0.5, r.df / (r.df + r.t * r.t));
  r.significant = r.p < alpha;
  return r;
}

}  // namespace sunet
