#include "phydra/mathfn.hpp"

#include <cmath>
#include <limits>

namespace phydra {

namespace {

constexpr double kLn2Hi = 6.93147180369123816490e-01;
constexpr double kLn2Lo = 1.90821492927058770002e-10;
constexpr double kLog2E = 1.44269504088896340736e+00;
constexpr double kInvSqrt2 = 7.07106781186547524401e-01;
constexpr double kInvSqrtPi = 5.64189583547756286948e-01;
constexpr double kInvSqrt2Pi = 3.98942280401432677940e-01;

// erf via its Maclaurin series; accurate for |x| <= 2.5 where the terms
// stay small relative to the result.
double erf_series(double x) {
  double term = x;  // (-1)^n x^(2n+1) / n!
  double sum = x;
  for (int n = 1; n <= 120; ++n) {
    term *= -x * x / n;
    double add = term / (2.0 * n + 1.0);
    sum += add;
    if (std::fabs(add) < 1e-18 * std::fabs(sum)) break;
  }
  return 2.0 * kInvSqrtPi * sum;
}

// Laplace continued fraction for erfc, x >= 2.5:
//   erfc(x) = exp(-x^2)/sqrt(pi) * 1/(x + (1/2)/(x + 1/(x + (3/2)/(x + ...))))
// evaluated with the modified Lentz algorithm.
double erfc_cf(double x) {
  const double tiny = 1e-300;
  double f = x;
  double c = x;
  double d = 0.0;
  for (int n = 1; n <= 80; ++n) {
    double a = 0.5 * n;
    d = x + a * d;
    if (d == 0.0) d = tiny;
    c = x + a / c;
    if (c == 0.0) c = tiny;
    d = 1.0 / d;
    double delta = c * d;
    f *= delta;
    if (std::fabs(delta - 1.0) < 1e-17) break;
  }
  return fixed_exp(-x * x) * kInvSqrtPi / f;
}

}  // namespace

double fixed_exp(double x) {
  if (std::isnan(x)) return x;
  if (x > 709.7) return std::numeric_limits<double>::infinity();
  if (x < -745.0) return 0.0;
  double kd = std::floor(x * kLog2E + 0.5);
  double r = (x - kd * kLn2Hi) - kd * kLn2Lo;
  // Taylor series of e^r for |r| <= ln2/2; term 14 is below 1e-17.
  double term = 1.0;
  double sum = 1.0;
  for (int n = 1; n <= 13; ++n) {
    term *= r / n;
    sum += term;
  }
  return std::ldexp(sum, static_cast<int>(kd));
}

double fixed_erfc(double x) {
  if (std::isnan(x)) return x;
  if (x < 0.0) return 2.0 - fixed_erfc(-x);
  if (x <= 2.5) return 1.0 - erf_series(x);
  if (x > 27.3) return 0.0;  // exp(-x^2) underflows
  return erfc_cf(x);
}

double normal_cdf(double x) { return 0.5 * fixed_erfc(-x * kInvSqrt2); }

double normal_pdf(double x) { return kInvSqrt2Pi * fixed_exp(-0.5 * x * x); }

double logistic_cdf(double x) {
  if (x >= 0.0) return 1.0 / (1.0 + fixed_exp(-x));
  double e = fixed_exp(x);
  return e / (1.0 + e);
}

double gauss_interval_prob(double lo, double hi, double mu, double sigma) {
  double a = (lo - mu) / sigma;
  double b = (hi - mu) / sigma;
  if (a + b >= 0.0) {
    // upper tail: Phi(b) - Phi(a) = (erfc(a/sqrt2) - erfc(b/sqrt2)) / 2
    return 0.5 * (fixed_erfc(a * kInvSqrt2) - fixed_erfc(b * kInvSqrt2));
  }
  return 0.5 * (fixed_erfc(-b * kInvSqrt2) - fixed_erfc(-a * kInvSqrt2));
}

double logistic_interval_prob(double lo, double hi, double loc, double scale) {
  double a = (lo - loc) / scale;
  double b = (hi - loc) / scale;
  if (a + b >= 0.0) {
    // 1-F(a) - (1-F(b)) keeps the difference well conditioned in the tail
    return logistic_cdf(-a) - logistic_cdf(-b);
  }
  return logistic_cdf(b) - logistic_cdf(a);
}

}  // namespace phydra
