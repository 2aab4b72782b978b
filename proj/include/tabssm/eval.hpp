#pragma once

#include <map>
#include <span>
#include <string>
#include <vector>

namespace tabssm {

double mse(std::span<const double> pred, std::span<const double> y);

/// Mann-Whitney AUC via average ranks with tie correction; requires both
/// classes present. labels must be 0 or 1.
double auc(std::span<const double> scores, std::span<const double> labels);

/// Closed-form CRPS of a normal forecast:
///   sigma * [ z (2 Phi(z) - 1) + 2 phi(z) - 1/sqrt(pi) ],  z = (y - mu) / sigma.
double crps_normal(double mu, double sigma, double y);
double crps_normal_mean(std::span<const double> mu, std::span<const double> sigma,
                        std::span<const double> y);

/// Two-sided p-value of Student's t with df degrees of freedom, via the
/// regularized incomplete beta function.
double student_t_two_sided_p(double t, std::size_t df);

struct TTestResult {
  double p = 1.0;
  double t = 0.0;
  bool zero_variance = false;  // degenerate: all per-fold differences equal
};

/// Paired two-sided t-test over per-fold metrics (same folds, same seeds).
/// Zero-variance differences give p = 1 when the mean difference is 0, else
/// p = 0 with the zero_variance flag set.
TTestResult paired_t_test(std::span<const double> a, std::span<const double> b);

/// Step-up FDR control: sorted p(i) <= i q / m for the largest such i rejects
/// hypotheses 1..i. Returned flags follow the original order.
std::vector<bool> benjamini_hochberg(std::span<const double> p, double q);

/// Monotone BH-adjusted p-values (reject iff adjusted <= q).
std::vector<double> bh_adjusted_p(std::span<const double> p);

struct FoldResult {
  std::string model_id;
  std::size_t fold = 0;
  std::string metric;  // mse | auc | crps | nll
  double value = 0.0;
};

struct Aggregate {
  double mean = 0.0;
  double stddev = 0.0;  // sample standard deviation (k-1); 0 for a single fold
  std::size_t count = 0;
};

std::map<std::pair<std::string, std::string>, Aggregate> aggregate(
    std::span<const FoldResult> results);

/// Per-dataset ranks (1 = best, ties averaged) averaged across datasets.
/// values[m][d] is model m's metric on dataset d; higher_better per dataset.
std::vector<double> average_ranks(const std::vector<std::vector<double>>& values,
                                  const std::vector<bool>& higher_better);

}  // namespace tabssm
