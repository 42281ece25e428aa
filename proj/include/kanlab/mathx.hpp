#pragma once

#include <cstdint>
#include <vector>

namespace kanlab::mathx {

// Standard normal.
double norm_cdf(double x);
double norm_ppf(double p);  // inverse CDF

// Regularized incomplete beta I_x(a, b).
double ibeta(double a, double b, double x);

// Student's t distribution with df degrees of freedom.
double t_cdf(double t, double df);
double t_ppf(double p, double df);  // inverse CDF

// Noncentral t CDF P(T <= t) with df degrees of freedom and noncentrality
// delta, by numeric integration over the chi-square mixing variable.
double noncentral_t_cdf(double t, double df, double delta);

// Solves A x = b in place for a small dense system (Gaussian elimination
// with partial pivoting). A is n x n row-major.
std::vector<double> solve_dense(std::vector<double> a, std::vector<double> b,
                                int n);

}  // namespace kanlab::mathx
