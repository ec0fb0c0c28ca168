#pragma once

// Cumulative relocalization error curves.

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <limits>
#include <span>
#include <sstream>
#include <string>
#include <vector>

#include "gnnet/alignment.hpp"
#include "gnnet/bench/scene.hpp"
#include "gnnet/error.hpp"

namespace gnnet::bench {

inline constexpr int kCurveSteps = 100;  // thresholds k / 100, k = 0..100

struct EvalCurve {
  std::vector<double> thresholds;
  std::vector<double> fraction;  // share of candidates with error <= threshold
};

struct EvalSummary {
  std::size_t candidates = 0;
  std::size_t failures = 0;
  double auc = 0.0;  // trapezoid over [0, 1], so a perfect curve scores 1
  double success_at_0_1 = 0.0;
  double success_at_0_5 = 0.0;
  double success_at_1_0 = 0.0;
};

struct Evaluation {
  EvalCurve curve;
  EvalSummary summary;
  std::vector<double> errors;
};

inline double threshold_at(int k) { return static_cast<double>(k) / kCurveSteps; }

/// Translation error of a tracked candidate; failures score infinity.
inline double relocalization_error(const RelocCandidate& c, const TrackResult& r) {
  if (!r.converged || !r.pose.is_finite()) return std::numeric_limits<double>::infinity();
  return (r.pose.translation - c.relative_pose.translation).norm();
}

inline Evaluation evaluate_errors(std::vector<double> errors) {
  if (errors.empty()) throw ConfigError("evaluate_relocalization: no candidates");
  Evaluation ev;
  ev.errors = errors;
  std::sort(errors.begin(), errors.end());
  const auto n = static_cast<double>(errors.size());
  for (int k = 0; k <= kCurveSteps; ++k) {
    const double t = threshold_at(k);
    const auto within = std::upper_bound(errors.begin(), errors.end(), t) - errors.begin();
    ev.curve.thresholds.push_back(t);
    ev.curve.fraction.push_back(static_cast<double>(within) / n);
  }
  auto& s = ev.summary;
  s.candidates = errors.size();
  s.failures = static_cast<std::size_t>(std::count(errors.begin(), errors.end(), std::numeric_limits<double>::infinity()));
  for (int k = 1; k <= kCurveSteps; ++k) {
    s.auc += 0.5 * (ev.curve.fraction[static_cast<std::size_t>(k - 1)] + ev.curve.fraction[static_cast<std::size_t>(k)]) /
             kCurveSteps;
  }
  s.success_at_0_1 = ev.curve.fraction[10];
  s.success_at_0_5 = ev.curve.fraction[50];
  s.success_at_1_0 = ev.curve.fraction[100];
  return ev;
}

inline Evaluation evaluate_relocalization(std::span<const RelocCandidate> candidates,
                                          std::span<const TrackResult> results) {
  if (candidates.size() != results.size()) throw ConfigError("evaluate_relocalization: size mismatch");
  std::vector<double> errors;
  errors.reserve(candidates.size());
  for (std::size_t i = 0; i < candidates.size(); ++i) errors.push_back(relocalization_error(candidates[i], results[i]));
  return evaluate_errors(std::move(errors));
}

namespace detail {

inline std::string fixed(double v, int digits) {
  char buf[64];
  std::snprintf(buf, sizeof buf, "%.*f", digits, v);
  return buf;
}

}  // namespace detail

inline std::string curve_csv(const EvalCurve& c) {
  std::string out = "threshold,fraction\n";
  for (std::size_t i = 0; i < c.thresholds.size(); ++i) {
    out += detail::fixed(c.thresholds[i], 2) + "," + detail::fixed(c.fraction[i], 6) + "\n";
  }
  return out;
}

struct NamedCurve {
  std::string name;
  EvalCurve curve;
};

/// One row per threshold, one column per method.
inline std::string combined_csv(std::span<const NamedCurve> curves) {
  if (curves.empty()) return {};
  std::string out = "threshold";
  for (const auto& c : curves) out += "," + c.name;
  out += "\n";
  const auto& grid = curves.front().curve.thresholds;
  for (const auto& c : curves) {
    if (c.curve.thresholds != grid) throw ConfigError("combined_csv: threshold grids differ");
  }
  for (std::size_t i = 0; i < grid.size(); ++i) {
    out += detail::fixed(grid[i], 2);
    for (const auto& c : curves) out += "," + detail::fixed(c.curve.fraction[i], 6);
    out += "\n";
  }
  return out;
}

/// Self-contained SVG line plot of one or more curves.
inline std::string curves_svg(std::span<const NamedCurve> curves, const std::string& title) {
  static const char* colors[] = {"#1f77b4", "#d62728", "#2ca02c", "#ff7f0e", "#9467bd"};
  const double W = 480, H = 360, L = 60, R = 20, T = 40, B = 50;
  auto sx = [&](double t) { return L + t * (W - L - R); };
  auto sy = [&](double f) { return H - B - f * (H - T - B); };
  std::ostringstream os;
  os << "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"" << W << "\" height=\"" << H
     << "\" font-family=\"sans-serif\" font-size=\"12\">\n";
  os << "<rect width=\"100%\" height=\"100%\" fill=\"white\"/>\n";
  os << "<text x=\"" << W / 2 << "\" y=\"22\" text-anchor=\"middle\" font-size=\"14\">" << title << "</text>\n";
  for (int k = 0; k <= 10; k += 2) {
    const double v = k / 10.0;
    os << "<line x1=\"" << sx(v) << "\" y1=\"" << sy(0) << "\" x2=\"" << sx(v) << "\" y2=\"" << sy(1)
       << "\" stroke=\"#ddd\"/>\n";
    os << "<line x1=\"" << sx(0) << "\" y1=\"" << sy(v) << "\" x2=\"" << sx(1) << "\" y2=\"" << sy(v)
       << "\" stroke=\"#ddd\"/>\n";
    os << "<text x=\"" << sx(v) << "\" y=\"" << sy(0) + 16 << "\" text-anchor=\"middle\">" << detail::fixed(v, 1)
       << "</text>\n";
    os << "<text x=\"" << sx(0) - 6 << "\" y=\"" << sy(v) + 4 << "\" text-anchor=\"end\">" << detail::fixed(v, 1)
       << "</text>\n";
  }
  os << "<rect x=\"" << sx(0) << "\" y=\"" << sy(1) << "\" width=\"" << sx(1) - sx(0) << "\" height=\""
     << sy(0) - sy(1) << "\" fill=\"none\" stroke=\"black\"/>\n";
  os << "<text x=\"" << (sx(0) + sx(1)) / 2 << "\" y=\"" << H - 12
     << "\" text-anchor=\"middle\">translation error threshold [m]</text>\n";
  os << "<text transform=\"translate(16," << (sy(0) + sy(1)) / 2
     << ") rotate(-90)\" text-anchor=\"middle\">fraction of candidates</text>\n";
  for (std::size_t i = 0; i < curves.size(); ++i) {
    const auto& c = curves[i].curve;
    const char* col = colors[i % 5];
    os << "<polyline fill=\"none\" stroke=\"" << col << "\" stroke-width=\"2\" points=\"";
    for (std::size_t k = 0; k < c.thresholds.size(); ++k) {
      os << detail::fixed(sx(c.thresholds[k]), 2) << "," << detail::fixed(sy(c.fraction[k]), 2) << " ";
    }
    os << "\"/>\n";
    const double ly = sy(1) + 18 + 16 * static_cast<double>(i);
    os << "<line x1=\"" << sx(0.62) << "\" y1=\"" << ly - 4 << "\" x2=\"" << sx(0.68) << "\" y2=\"" << ly - 4
       << "\" stroke=\"" << col << "\" stroke-width=\"2\"/>\n";
    os << "<text x=\"" << sx(0.70) << "\" y=\"" << ly << "\">" << curves[i].name << "</text>\n";
  }
  os << "</svg>\n";
  return os.str();
}

}  // namespace gnnet::bench
