#pragma once

namespace phydra {

// Scalar math used by the entropy-coding tables and rate estimates.
//
// libm implementations of exp/erfc differ across platforms and the coder
// requires byte-identical frequency tables for identical (mu, sigma), so
// these are fixed polynomial / continued-fraction routines evaluated in
// double precision with pinned constants.

double fixed_exp(double x);
double fixed_erfc(double x);

// Standard normal CDF / PDF.
double normal_cdf(double x);
double normal_pdf(double x);

// Logistic sigmoid 1 / (1 + e^-x).
double logistic_cdf(double x);

// P(lo <= X <= hi) for X ~ N(mu, sigma), evaluated in the tail that keeps
// the CDF difference well conditioned.
double gauss_interval_prob(double lo, double hi, double mu, double sigma);

// Same for a logistic distribution with the given location and scale.
double logistic_interval_prob(double lo, double hi, double loc, double scale);

}  // namespace phydra
