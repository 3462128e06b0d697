#include <algorithm>
#include <array>
#include <cmath>
#include <limits>

#include "engage/error.hpp"
#include "engage/metrics.hpp"

namespace engage::metrics {

namespace {

// Value with first and second derivative with respect to one scalar.
struct Jet {
  double v = 0.0;
  double d1 = 0.0;
  double d2 = 0.0;
};

Jet operator+(Jet a, Jet b) { return {a.v + b.v, a.d1 + b.d1, a.d2 + b.d2}; }
Jet operator*(Jet a, Jet b) {
  return {a.v * b.v, a.d1 * b.v + a.v * b.d1, a.d2 * b.v + 2.0 * a.d1 * b.d1 + a.v * b.d2};
}
Jet operator*(double k, Jet a) { return {k * a.v, k * a.d1, k * a.d2}; }
Jet reciprocal(Jet g) {
  const double inv = 1.0 / g.v;
  return {inv, -g.d1 * inv * inv, (2.0 * g.d1 * g.d1 - g.v * g.d2) * inv * inv * inv};
}
Jet exp(Jet f) {
  const double e = std::exp(f.v);
  return {e, f.d1 * e, (f.d2 + f.d1 * f.d1) * e};
}

// x^-s as a jet in s.
Jet pow_neg(double x, Jet s) { return exp(-std::log(x) * s); }

// Bernoulli numbers B_2 .. B_16 divided by (2j)!.
constexpr std::array<double, 8> kBernoulliOverFactorial = {
    1.0 / 6.0 / 2.0,
    -1.0 / 30.0 / 24.0,
    1.0 / 42.0 / 720.0,
    -1.0 / 30.0 / 40320.0,
    5.0 / 66.0 / 3628800.0,
    -691.0 / 2730.0 / 479001600.0,
    7.0 / 6.0 / 87178291200.0,
    -3617.0 / 510.0 / 20922789888000.0,
};

struct Solved2 {
  std::array<double, 2> beta{};
  std::array<double, 3> inverse{};  // a00, a01, a11 of (X'WX)^-1
};

// Solves the 2x2 weighted normal equations.
Solved2 solve_normal_2x2(double a00, double a01, double a11, double r0, double r1) {
  const double det = a00 * a11 - a01 * a01;
  if (!(a00 > 0.0) || !(a11 > 0.0) || det <= 1e-12 * a00 * a11) {
    throw Error(ErrorCode::kSingularDesign, "design matrix is rank deficient");
  }
  Solved2 s;
  s.inverse = {a11 / det, -a01 / det, a00 / det};
  s.beta = {s.inverse[0] * r0 + s.inverse[1] * r1, s.inverse[1] * r0 + s.inverse[2] * r1};
  return s;
}

// Weighted least squares with two regressors per observation.
FitResult fit_two_parameter(std::span<const std::array<double, 2>> rows, std::span<const double> y,
                            std::span<const double> w, const char* name0, const char* name1) {
  double a00 = 0.0, a01 = 0.0, a11 = 0.0, r0 = 0.0, r1 = 0.0;
  for (std::size_t i = 0; i < rows.size(); ++i) {
    const auto& x = rows[i];
    a00 += w[i] * x[0] * x[0];
    a01 += w[i] * x[0] * x[1];
    a11 += w[i] * x[1] * x[1];
    r0 += w[i] * x[0] * y[i];
    r1 += w[i] * x[1] * y[i];
  }
  const Solved2 s = solve_normal_2x2(a00, a01, a11, r0, r1);
  double chi2 = 0.0;
  for (std::size_t i = 0; i < rows.size(); ++i) {
    const double r = y[i] - (s.beta[0] * rows[i][0] + s.beta[1] * rows[i][1]);
    chi2 += w[i] * r * r;
  }
  const std::size_t dof = rows.size() > 2 ? rows.size() - 2 : 0;
  const double scale = dof > 0 ? chi2 / static_cast<double>(dof) : 1.0;
  FitResult fit;
  fit.parameters.push_back({name0, s.beta[0], std::sqrt(s.inverse[0] * scale)});
  fit.parameters.push_back({name1, s.beta[1], std::sqrt(s.inverse[2] * scale)});
  fit.residual_norm = std::sqrt(chi2);
  return fit;
}

}  // namespace

const FitParameter& FitResult::at(std::string_view name) const {
  for (const auto& p : parameters) {
    if (p.name == name) {
      return p;
    }
  }
  throw Error(ErrorCode::kInvalidArgument, "no fit parameter named " + std::string(name));
}

FitResult fit_log_linear(std::span<const Point> points, std::optional<std::span<const double>> weights) {
  if (points.size() < 2) {
    throw Error(ErrorCode::kInvalidArgument, "log-linear fit needs at least two points");
  }
  if (weights && weights->size() != points.size()) {
    throw Error(ErrorCode::kInvalidArgument, "weights and points differ in length");
  }
  std::vector<std::array<double, 2>> rows;
  std::vector<double> y;
  std::vector<double> w;
  for (std::size_t i = 0; i < points.size(); ++i) {
    if (!(points[i].x > 0.0)) {
      throw Error(ErrorCode::kInvalidArgument, "log-linear fit needs x > 0");
    }
    const double wi = weights ? (*weights)[i] : 1.0;
    if (!(wi > 0.0)) {
      throw Error(ErrorCode::kInvalidArgument, "weights must be positive");
    }
    rows.push_back({std::log10(points[i].x), 1.0});
    y.push_back(points[i].y);
    w.push_back(wi);
  }
  const double x0 = rows.front()[0];
  if (std::all_of(rows.begin(), rows.end(), [x0](const auto& r) { return r[0] == x0; })) {
    throw Error(ErrorCode::kSingularDesign, "all x values are equal");
  }
  return fit_two_parameter(rows, y, w, "m", "c");
}

FitResult fit_additive_improvement(std::span<const ImprovementObservation> observations) {
  if (observations.size() < 2) {
    throw Error(ErrorCode::kInvalidArgument, "additive fit needs at least two observations");
  }
  std::vector<std::array<double, 2>> rows;
  std::vector<double> y;
  std::vector<double> w;
  for (const auto& o : observations) {
    if (!(o.sigma > 0.0)) {
      throw Error(ErrorCode::kInvalidArgument, "sigma must be positive");
    }
    rows.push_back({o.has_alt_model ? 1.0 : 0.0, o.has_reward_model ? 1.0 : 0.0});
    y.push_back(o.y);
    w.push_back(1.0 / (o.sigma * o.sigma));
  }
  return fit_two_parameter(rows, y, w, "b", "c");
}

ZetaTerms hurwitz_zeta(double s, double q) {
  if (!(s > 1.0) || !(q > 0.0)) {
    throw Error(ErrorCode::kDomain, "hurwitz zeta needs s > 1 and q > 0");
  }
  const Jet js{s, 1.0, 0.0};
  // Direct terms until the Euler-Maclaurin remainder is accurate.
  const int direct = std::max(0, static_cast<int>(std::ceil(24.0 - q)));
  Jet sum{};
  for (int k = 0; k < direct; ++k) {
    sum = sum + pow_neg(q + k, js);
  }
  const double a = q + direct;
  // integral a^{1-s}/(s-1)
  const Jet s_minus_1{s - 1.0, 1.0, 0.0};
  sum = sum + a * (pow_neg(a, js) * reciprocal(s_minus_1));
  sum = sum + 0.5 * pow_neg(a, js);
  // + sum_j B_2j/(2j)! * s(s+1)...(s+2j-2) * a^{-s-2j+1}
  Jet rising{s, 1.0, 0.0};
  double a_pow = 1.0 / a;  // a^{-(2j-1)}
  for (std::size_t j = 0; j < kBernoulliOverFactorial.size(); ++j) {
    sum = sum + kBernoulliOverFactorial[j] * (rising * (a_pow * pow_neg(a, js)));
    rising = rising * Jet{s + 2.0 * static_cast<double>(j) + 1.0, 1.0, 0.0} *
             Jet{s + 2.0 * static_cast<double>(j) + 2.0, 1.0, 0.0};
    a_pow /= a * a;
  }
  return {sum.v, sum.d1, sum.d2};
}

FitResult fit_power_law_tail(std::span<const int> lengths, int x_min) {
  if (x_min < 1) {
    throw Error(ErrorCode::kInvalidArgument, "x_min must be >= 1");
  }
  double sum_log = 0.0;
  std::size_t n = 0;
  int first = 0;
  bool all_equal = true;
  for (int x : lengths) {
    if (x < x_min) {
      continue;
    }
    if (n == 0) {
      first = x;
    } else if (x != first) {
      all_equal = false;
    }
    sum_log += std::log(static_cast<double>(x));
    ++n;
  }
  if (n < kMinTailSamples) {
    throw Error(ErrorCode::kInsufficientTail,
                "power-law fit needs at least " + std::to_string(kMinTailSamples) +
                    " samples >= x_min, got " + std::to_string(n));
  }
  if (all_equal) {
    throw Error(ErrorCode::kDegenerateLikelihood, "all tail samples are equal");
  }
  const double nn = static_cast<double>(n);
  const double q = static_cast<double>(x_min);
  // Score of the log-likelihood  -a*sum_log - n*log zeta(a, x_min).
  const auto score = [&](double a) {
    const ZetaTerms z = hurwitz_zeta(a, q);
    return -sum_log - nn * z.d1 / z.value;
  };
  double lo = 1.0 + 1e-6;
  double hi = 20.0;
  if (score(hi) > 0.0 || score(lo) < 0.0) {
    throw Error(ErrorCode::kDegenerateLikelihood, "likelihood has no interior maximum");
  }
  // The log-likelihood is concave in the exponent, so the score is monotone.
  for (int iter = 0; iter < 200 && hi - lo > 1e-12; ++iter) {
    const double mid = 0.5 * (lo + hi);
    (score(mid) > 0.0 ? lo : hi) = mid;
  }
  const double alpha = 0.5 * (lo + hi);
  const ZetaTerms z = hurwitz_zeta(alpha, q);
  const double info = nn * (z.d2 * z.value - z.d1 * z.d1) / (z.value * z.value);
  FitResult fit;
  fit.parameters.push_back({"slope", -alpha, 1.0 / std::sqrt(info)});
  fit.residual_norm = 0.0;
  return fit;
}

}  // namespace engage::metrics
