#include "tabssm/eval.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>
#include <stdexcept>

namespace tabssm {

double mse(std::span<const double> pred, std::span<const double> y) {
  if (pred.size() != y.size()) throw std::invalid_argument("mse length mismatch");
  if (pred.empty()) throw std::invalid_argument("mse of empty vectors");
  double s = 0.0;
  for (std::size_t i = 0; i < pred.size(); ++i) {
    const double d = pred[i] - y[i];
    s += d * d;
  }
  return s / static_cast<double>(pred.size());
}

double auc(std::span<const double> scores, std::span<const double> labels) {
  if (scores.size() != labels.size()) throw std::invalid_argument("auc length mismatch");
  const std::size_t n = scores.size();
  std::size_t npos = 0;
  for (double l : labels) {
    if (l != 0.0 && l != 1.0) throw std::invalid_argument("auc labels must be 0 or 1");
    npos += l == 1.0;
  }
  const std::size_t nneg = n - npos;
  if (npos == 0 || nneg == 0)
    throw std::invalid_argument("auc requires both classes present");

  std::vector<std::size_t> order(n);
  std::iota(order.begin(), order.end(), std::size_t{0});
  std::sort(order.begin(), order.end(),
            [&](std::size_t a, std::size_t b) { return scores[a] < scores[b]; });

  // average ranks over tie groups
  double rank_sum_pos = 0.0;
  std::size_t i = 0;
  while (i < n) {
    std::size_t j = i;
    while (j < n && scores[order[j]] == scores[order[i]]) ++j;
    const double avg_rank = 0.5 * (static_cast<double>(i + 1) + static_cast<double>(j));
    for (std::size_t k = i; k < j; ++k) {
      if (labels[order[k]] == 1.0) rank_sum_pos += avg_rank;
    }
    i = j;
  }
  const double np = static_cast<double>(npos), nn = static_cast<double>(nneg);
  return (rank_sum_pos - np * (np + 1.0) / 2.0) / (np * nn);
}

namespace {

double normal_pdf(double z) { return std::exp(-0.5 * z * z) / std::sqrt(2.0 * M_PI); }
double normal_cdf(double z) { return 0.5 * std::erfc(-z / std::sqrt(2.0)); }

// Regularized incomplete beta I_x(a, b) by the Lentz continued fraction.
double betacf(double a, double b, double x) {
  constexpr int kMaxIter = 300;
  constexpr double kEps = 3e-16, kFpMin = 1e-300;
  const double qab = a + b, qap = a + 1.0, qam = a - 1.0;
  double c = 1.0, d = 1.0 - qab * x / qap;
  if (std::abs(d) < kFpMin) d = kFpMin;
  d = 1.0 / d;
  double h = d;
  for (int m = 1; m <= kMaxIter; ++m) {
    const int m2 = 2 * m;
    double aa = m * (b - m) * x / ((qam + m2) * (a + m2));
    d = 1.0 + aa * d;
    if (std::abs(d) < kFpMin) d = kFpMin;
    c = 1.0 + aa / c;
    if (std::abs(c) < kFpMin) c = kFpMin;
    d = 1.0 / d;
    h *= d * c;
    aa = -(a + m) * (qab + m) * x / ((a + m2) * (qap + m2));
    d = 1.0 + aa * d;
    if (std::abs(d) < kFpMin) d = kFpMin;
    c = 1.0 + aa / c;
    if (std::abs(c) < kFpMin) c = kFpMin;
    d = 1.0 / d;
    const double del = d * c;
    h *= del;
    if (std::abs(del - 1.0) < kEps) break;
  }
  return h;
}

double incomplete_beta(double a, double b, double x) {
  if (x <= 0.0) return 0.0;
  if (x >= 1.0) return 1.0;
  const double ln_front = std::lgamma(a + b) - std::lgamma(a) - std::lgamma(b) +
                          a * std::log(x) + b * std::log1p(-x);
  const double front = std::exp(ln_front);
  if (x < (a + 1.0) / (a + b + 2.0)) return front * betacf(a, b, x) / a;
  return 1.0 - front * betacf(b, a, 1.0 - x) / b;
}

}  // namespace

double crps_normal(double mu, double sigma, double y) {
  if (sigma <= 0.0) throw std::invalid_argument("crps_normal requires sigma > 0");
  const double z = (y - mu) / sigma;
  return sigma *
         (z * (2.0 * normal_cdf(z) - 1.0) + 2.0 * normal_pdf(z) - 1.0 / std::sqrt(M_PI));
}

double crps_normal_mean(std::span<const double> mu, std::span<const double> sigma,
                        std::span<const double> y) {
  if (mu.size() != sigma.size() || mu.size() != y.size())
    throw std::invalid_argument("crps length mismatch");
  if (mu.empty()) throw std::invalid_argument("crps of empty vectors");
  double s = 0.0;
  for (std::size_t i = 0; i < mu.size(); ++i) s += crps_normal(mu[i], sigma[i], y[i]);
  return s / static_cast<double>(mu.size());
}

double student_t_two_sided_p(double t, std::size_t df) {
  if (df == 0) throw std::invalid_argument("t-test needs at least 1 degree of freedom");
  const double d = static_cast<double>(df);
  return incomplete_beta(d / 2.0, 0.5, d / (d + t * t));
}

TTestResult paired_t_test(std::span<const double> a, std::span<const double> b) {
  if (a.size() != b.size()) throw std::invalid_argument("paired t-test length mismatch");
  const std::size_t k = a.size();
  if (k < 2) throw std::invalid_argument("paired t-test needs k >= 2 folds");
  std::vector<double> d(k);
  for (std::size_t i = 0; i < k; ++i) d[i] = a[i] - b[i];
  double mean = 0.0;
  for (double v : d) mean += v;
  mean /= static_cast<double>(k);
  double var = 0.0;
  for (double v : d) var += (v - mean) * (v - mean);
  var /= static_cast<double>(k - 1);

  TTestResult r;
  if (var == 0.0) {
    r.zero_variance = true;
    r.p = mean == 0.0 ? 1.0 : 0.0;
    r.t = mean == 0.0 ? 0.0 : std::numeric_limits<double>::infinity();
    return r;
  }
  r.t = mean / (std::sqrt(var) / std::sqrt(static_cast<double>(k)));
  r.p = student_t_two_sided_p(r.t, k - 1);
  return r;
}

std::vector<double> bh_adjusted_p(std::span<const double> p) {
  const std::size_t m = p.size();
  for (double v : p) {
    if (v < 0.0 || v > 1.0) throw std::invalid_argument("p-values must lie in [0,1]");
  }
  std::vector<std::size_t> order(m);
  std::iota(order.begin(), order.end(), std::size_t{0});
  std::sort(order.begin(), order.end(),
            [&](std::size_t a, std::size_t b) { return p[a] < p[b]; });
  std::vector<double> adj(m);
  double running = 1.0;
  for (std::size_t i = m; i-- > 0;) {
    const double v = p[order[i]] * static_cast<double>(m) / static_cast<double>(i + 1);
    running = std::min(running, std::min(v, 1.0));
    adj[order[i]] = running;
  }
  return adj;
}

std::vector<bool> benjamini_hochberg(std::span<const double> p, double q) {
  const auto adj = bh_adjusted_p(p);
  std::vector<bool> reject(p.size());
  for (std::size_t i = 0; i < p.size(); ++i) reject[i] = adj[i] <= q;
  return reject;
}

std::map<std::pair<std::string, std::string>, Aggregate> aggregate(
    std::span<const FoldResult> results) {
  if (results.empty()) throw std::invalid_argument("aggregate of no fold results");
  std::map<std::pair<std::string, std::string>, std::vector<double>> groups;
  for (const auto& r : results) groups[{r.model_id, r.metric}].push_back(r.value);
  std::map<std::pair<std::string, std::string>, Aggregate> out;
  for (const auto& [key, vals] : groups) {
    Aggregate a;
    a.count = vals.size();
    for (double v : vals) a.mean += v;
    a.mean /= static_cast<double>(vals.size());
    if (vals.size() > 1) {
      double var = 0.0;
      for (double v : vals) var += (v - a.mean) * (v - a.mean);
      a.stddev = std::sqrt(var / static_cast<double>(vals.size() - 1));
    }
    out[key] = a;
  }
  return out;
}

std::vector<double> average_ranks(const std::vector<std::vector<double>>& values,
                                  const std::vector<bool>& higher_better) {
  if (values.empty()) throw std::invalid_argument("average_ranks of no models");
  const std::size_t models = values.size();
  const std::size_t datasets = values[0].size();
  if (datasets == 0) throw std::invalid_argument("average_ranks of no datasets");
  for (const auto& row : values) {
    if (row.size() != datasets)
      throw std::invalid_argument("average_ranks: missing cell (ragged metric table)");
  }
  if (higher_better.size() != datasets)
    throw std::invalid_argument("average_ranks: one direction needed per dataset");

  std::vector<double> sums(models, 0.0);
  for (std::size_t d = 0; d < datasets; ++d) {
    for (std::size_t m = 0; m < models; ++m) {
      double better = 0.0, equal = 0.0;
      for (std::size_t o = 0; o < models; ++o) {
        if (o == m) continue;
        if (values[o][d] == values[m][d]) {
          equal += 1.0;
        } else {
          const bool o_better =
              higher_better[d] ? values[o][d] > values[m][d] : values[o][d] < values[m][d];
          if (o_better) better += 1.0;
        }
      }
      sums[m] += better + 0.5 * equal + 1.0;  // ties share the average rank
    }
  }
  for (double& s : sums) s /= static_cast<double>(datasets);
  return sums;
}

}  // namespace tabssm
