// Test-only reference implementations, written as direct transcriptions of the
// defining formulas. They stay independent of the library's computation paths.
#pragma once

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <initializer_list>
#include <map>
#include <string>
#include <vector>

#include "tabssm/autodiff.hpp"
#include "tabssm/tensor.hpp"

namespace oracles {

// Central-difference check swept over several steps; a tensor passes when the
// quotient agrees at any step (small steps lose tiny gradients to rounding,
// large steps lose curved ones to truncation; a wrong gradient fails at all).
inline std::vector<std::pair<std::string, double>> fd_sweep_errors(
    tabssm::ParamStore& params, const tabssm::GraphBuilder& f,
    std::initializer_list<double> steps = {1e-5, 1e-4, 1e-3}) {
  std::map<std::string, double> best;
  for (double h : steps) {
    auto report = tabssm::check_gradients(params, f, h);
    for (const auto& [name, err] : report.per_param) {
      auto it = best.find(name);
      if (it == best.end() || err < it->second) best[name] = err;
    }
  }
  return {best.begin(), best.end()};
}

// C[m,n] = sum_k A[m,k] B[k,n], plain triple loop
inline tabssm::Tensor matmul_loops(const tabssm::Tensor& a, const tabssm::Tensor& b) {
  const std::size_t m = a.dim(0), k = a.dim(1), n = b.dim(1);
  tabssm::Tensor c({m, n});
  for (std::size_t i = 0; i < m; ++i)
    for (std::size_t j = 0; j < n; ++j) {
      double acc = 0.0;
      for (std::size_t p = 0; p < k; ++p) acc += a.at(i * k + p) * b.at(p * n + j);
      c.at(i * n + j) = acc;
    }
  return c;
}

// Truncated Taylor series of exp, 64-bit-extended arithmetic.
inline double exp_taylor(double x, int terms = 20) {
  long double sum = 0.0L, term = 1.0L;
  for (int k = 0; k < terms; ++k) {
    sum += term;
    term *= static_cast<long double>(x) / static_cast<long double>(k + 1);
  }
  return static_cast<double>(sum);
}

// y[n,j,c] = bias[c] + sum_m x[n, j+m-K+1, c] * k[c,m], left zero padding.
inline tabssm::Tensor causal_conv_loops(const tabssm::Tensor& x, const tabssm::Tensor& kern,
                                        const tabssm::Tensor& bias) {
  const std::size_t N = x.dim(0), J = x.dim(1), C = x.dim(2), K = kern.dim(1);
  tabssm::Tensor y({N, J, C});
  for (std::size_t n = 0; n < N; ++n)
    for (std::size_t j = 0; j < J; ++j)
      for (std::size_t c = 0; c < C; ++c) {
        double acc = bias.at(c);
        for (std::size_t m = 0; m < K; ++m) {
          const std::ptrdiff_t src =
              static_cast<std::ptrdiff_t>(j) + static_cast<std::ptrdiff_t>(m) -
              static_cast<std::ptrdiff_t>(K) + 1;
          if (src < 0) continue;
          acc += x.at((n * J + static_cast<std::size_t>(src)) * C + c) * kern.at(c * K + m);
        }
        y.at((n * J + j) * C + c) = acc;
      }
  return y;
}

// Unrolled selective-scan recurrence:
//   h_0 = delta_0 * B_0 (x) u_0
//   h_j = exp(delta_j (x) A) . h_{j-1} + delta_j * B_j (x) u_j
//   y_j[c] = sum_s h_j[c,s] C_j[s] + alpha[c] u_j[c]
inline tabssm::Tensor ssm_scan_unrolled(const tabssm::Tensor& delta, const tabssm::Tensor& a,
                                        const tabssm::Tensor& b, const tabssm::Tensor& c,
                                        const tabssm::Tensor& u, const tabssm::Tensor& alpha) {
  const std::size_t N = delta.dim(0), J = delta.dim(1), C = delta.dim(2), S = a.dim(1);
  tabssm::Tensor y({N, J, C});
  for (std::size_t n = 0; n < N; ++n) {
    std::vector<double> h(C * S, 0.0);
    for (std::size_t j = 0; j < J; ++j) {
      for (std::size_t ch = 0; ch < C; ++ch) {
        const double dl = delta.at((n * J + j) * C + ch);
        const double uu = u.at((n * J + j) * C + ch);
        for (std::size_t s = 0; s < S; ++s) {
          const double trans = std::exp(dl * a.at(ch * S + s));
          const double inject = dl * b.at((n * J + j) * S + s) * uu;
          h[ch * S + s] = trans * h[ch * S + s] + inject;
        }
      }
      for (std::size_t ch = 0; ch < C; ++ch) {
        double acc = 0.0;
        for (std::size_t s = 0; s < S; ++s)
          acc += h[ch * S + s] * c.at((n * J + j) * S + s);
        y.at((n * J + j) * C + ch) = acc + alpha.at(ch) * u.at((n * J + j) * C + ch);
      }
    }
  }
  return y;
}

// Normal CDF via erf.
inline double normal_cdf(double z) { return 0.5 * std::erfc(-z / std::sqrt(2.0)); }

// Trapezoid quadrature of int (F(t) - 1{t >= y})^2 dt over mu +- 10 sigma,
// split at the observation so each piece is smooth.
inline double crps_normal_quadrature(double mu, double sigma, double y, std::size_t pts = 40000) {
  const double lo = mu - 10.0 * sigma, hi = mu + 10.0 * sigma;
  auto segment = [&](double a, double b, bool right_of_y) {
    if (b <= a) return 0.0;
    const double h = (b - a) / static_cast<double>(pts);
    double sum = 0.0;
    for (std::size_t i = 0; i <= pts; ++i) {
      const double t = a + h * static_cast<double>(i);
      const double f = normal_cdf((t - mu) / sigma) - (right_of_y ? 1.0 : 0.0);
      const double v = f * f;
      sum += (i == 0 || i == pts) ? 0.5 * v : v;
    }
    return sum * h;
  };
  const double split = std::min(std::max(y, lo), hi);
  return segment(lo, split, false) + segment(split, hi, true);
}

// AUC by comparing every (positive, negative) pair; ties count one half.
inline double auc_pairwise(const std::vector<double>& scores, const std::vector<double>& labels) {
  double wins = 0.0;
  std::size_t np = 0, nn = 0;
  for (std::size_t i = 0; i < scores.size(); ++i) {
    if (labels[i] != 1.0) continue;
    ++np;
    for (std::size_t j = 0; j < scores.size(); ++j) {
      if (labels[j] == 1.0) continue;
      if (scores[i] > scores[j])
        wins += 1.0;
      else if (scores[i] == scores[j])
        wins += 0.5;
    }
  }
  for (double l : labels)
    if (l != 1.0) ++nn;
  return wins / (static_cast<double>(np) * static_cast<double>(nn));
}

}  // namespace oracles
