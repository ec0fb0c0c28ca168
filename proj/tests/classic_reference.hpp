#pragma once

// Standalone photometric direct image alignment on a single grayscale image
// pair: scalar residuals, hand-written interpolation, projection and SE(3)
// exponential. Shares no code with the library beyond Eigen's 6x6 solve, and
// is used as a reference for the feature-metric solver with D = 1.

#include <Eigen/Cholesky>
#include <Eigen/Core>

#include <array>
#include <cmath>
#include <vector>

namespace classic {

struct Gray {
  int w = 0, h = 0;
  std::vector<double> px;  // row-major
  double at(int y, int x) const { return px[static_cast<std::size_t>(y * w + x)]; }
};

struct Camera {
  double fx, fy, cx, cy;
  int w, h;
};

struct Point {
  double u, v, idepth;
};

struct Settings {
  int max_iterations = 50;
  double tol = 1e-6;
  double huber = 9.0;
  bool grad_weighting = true;
  double grad_const = 50.0;
  double lambda0 = 1e-4, up = 10.0, down = 0.5, lambda_max = 1e10;
  double border = 2.0;
  int min_points = 6;
};

using Mat6 = Eigen::Matrix<double, 6, 6>;
using Vec6 = Eigen::Matrix<double, 6, 1>;

struct Pose {
  double R[3][3] = {{1, 0, 0}, {0, 1, 0}, {0, 0, 1}};
  double t[3] = {0, 0, 0};
};

inline Pose compose(const Pose& a, const Pose& b) {
  Pose c;
  for (int i = 0; i < 3; ++i) {
    for (int j = 0; j < 3; ++j) {
      c.R[i][j] = 0;
      for (int k = 0; k < 3; ++k) c.R[i][j] += a.R[i][k] * b.R[k][j];
    }
    c.t[i] = a.t[i];
    for (int k = 0; k < 3; ++k) c.t[i] += a.R[i][k] * b.t[k];
  }
  return c;
}

inline Pose exp_twist(const Vec6& xi) {
  const double wx = xi[3], wy = xi[4], wz = xi[5];
  const double th2 = wx * wx + wy * wy + wz * wz, th = std::sqrt(th2);
  double A, B, C;
  if (th < 1e-8) {
    A = 1 - th2 / 6;
    B = 0.5 - th2 / 24;
    C = 1.0 / 6 - th2 / 120;
  } else {
    A = std::sin(th) / th;
    B = (1 - std::cos(th)) / th2;
    C = (th - std::sin(th)) / (th2 * th);
  }
  const double K[3][3] = {{0, -wz, wy}, {wz, 0, -wx}, {-wy, wx, 0}};
  double K2[3][3];
  for (int i = 0; i < 3; ++i)
    for (int j = 0; j < 3; ++j) {
      K2[i][j] = 0;
      for (int k = 0; k < 3; ++k) K2[i][j] += K[i][k] * K[k][j];
    }
  Pose p;
  for (int i = 0; i < 3; ++i) {
    double vrow = 0;
    for (int j = 0; j < 3; ++j) {
      const double id = i == j ? 1.0 : 0.0;
      p.R[i][j] = id + A * K[i][j] + B * K2[i][j];
      vrow += (id + B * K[i][j] + C * K2[i][j]) * xi[j];
    }
    p.t[i] = vrow;
  }
  return p;
}

inline double interp(const Gray& g, double x, double y) {
  int x0 = static_cast<int>(std::floor(x)), y0 = static_cast<int>(std::floor(y));
  if (x0 > g.w - 2) x0 = g.w - 2;
  if (y0 > g.h - 2) y0 = g.h - 2;
  const double ax = x - x0, ay = y - y0;
  return (1 - ax) * (1 - ay) * g.at(y0, x0) + ax * (1 - ay) * g.at(y0, x0 + 1) +
         (1 - ax) * ay * g.at(y0 + 1, x0) + ax * ay * g.at(y0 + 1, x0 + 1);
}

struct System {
  Mat6 H = Mat6::Zero();
  Vec6 b = Vec6::Zero();
  double energy = 0;
  int n = 0;
  double mean() const { return n ? energy / n : 0.0; }
};

inline System build(const Gray& tgt, const std::vector<Point>& pts,
                    const std::vector<double>& ref_vals, const Pose& T, const Camera& cam,
                    const Settings& s) {
  System sys;
  for (std::size_t i = 0; i < pts.size(); ++i) {
    const Point& p = pts[i];
    const double z = 1.0 / p.idepth;
    const double X[3] = {(p.u - cam.cx) / cam.fx * z, (p.v - cam.cy) / cam.fy * z, z};
    double Y[3];
    for (int r = 0; r < 3; ++r) Y[r] = T.R[r][0] * X[0] + T.R[r][1] * X[1] + T.R[r][2] * X[2] + T.t[r];
    if (!(Y[2] > 0)) continue;
    const double u = cam.fx * Y[0] / Y[2] + cam.cx, v = cam.fy * Y[1] / Y[2] + cam.cy;
    if (!(u >= s.border && v >= s.border && u <= cam.w - 1 - s.border && v <= cam.h - 1 - s.border)) continue;
    if (!(u >= 1 && v >= 1 && u <= tgt.w - 2 && v <= tgt.h - 2)) continue;
    const double gx = 0.5 * (interp(tgt, u + 1, v) - interp(tgt, u - 1, v));
    const double gy = 0.5 * (interp(tgt, u, v + 1) - interp(tgt, u, v - 1));
    const double r = interp(tgt, u, v) - ref_vals[i];
    const double iz = 1.0 / Y[2];
    // d(u,v)/d(xi) for a left-multiplied increment: [I, -[Y]x]
    const double du[6] = {cam.fx * iz, 0, -cam.fx * Y[0] * iz * iz,
                          -cam.fx * Y[0] * Y[1] * iz * iz, cam.fx * (1 + Y[0] * Y[0] * iz * iz),
                          -cam.fx * Y[1] * iz};
    const double dv[6] = {0, cam.fy * iz, -cam.fy * Y[1] * iz * iz,
                          -cam.fy * (1 + Y[1] * Y[1] * iz * iz), cam.fy * Y[0] * Y[1] * iz * iz,
                          cam.fy * Y[0] * iz};
    Vec6 J;
    for (int k = 0; k < 6; ++k) J[k] = gx * du[k] + gy * dv[k];
    const double a = std::abs(r);
    const double gw = s.grad_weighting ? s.grad_const * s.grad_const /
                                             (s.grad_const * s.grad_const + gx * gx + gy * gy)
                                       : 1.0;
    const double hw = a <= s.huber ? 1.0 : s.huber / a;
    const double w = gw * hw;
    sys.H += w * J * J.transpose();
    sys.b -= w * J * r;
    sys.energy += gw * (a <= s.huber ? 0.5 * a * a : s.huber * (a - 0.5 * s.huber));
    ++sys.n;
  }
  sys.H = 0.5 * (sys.H + sys.H.transpose()).eval();
  return sys;
}

struct Result {
  Pose pose;
  bool converged = false;
  System first_system;
};

/// Single-level Levenberg-Marquardt, same schedule as the library solver.
inline Result align(const Gray& ref, const Gray& tgt, const std::vector<Point>& pts,
                    const Pose& init, const Camera& cam, const Settings& s) {
  std::vector<Point> kept;
  std::vector<double> ref_vals;
  for (const Point& p : pts) {
    if (p.u >= 0 && p.v >= 0 && p.u <= ref.w - 1 && p.v <= ref.h - 1) {
      kept.push_back(p);
      ref_vals.push_back(interp(ref, p.u, p.v));
    }
  }
  Result res;
  res.pose = init;
  System sys = build(tgt, kept, ref_vals, res.pose, cam, s);
  res.first_system = sys;
  if (sys.n < s.min_points) return res;
  double lambda = s.lambda0;
  for (int it = 0; it < s.max_iterations; ++it) {
    Mat6 A = sys.H;
    A.diagonal() += lambda * sys.H.diagonal();
    const Vec6 d = A.ldlt().solve(sys.b);
    if (!d.allFinite()) return res;
    const double step = d.norm();
    const Pose cand = compose(exp_twist(d), res.pose);
    const System next = build(tgt, kept, ref_vals, cand, cam, s);
    if (next.n >= s.min_points && next.mean() <= sys.mean()) {
      res.pose = cand;
      sys = next;
      lambda *= s.down;
      if (step < s.tol) {
        res.converged = true;
        return res;
      }
    } else {
      if (step < s.tol) {
        res.converged = true;
        return res;
      }
      lambda *= s.up;
      if (lambda > s.lambda_max) return res;
    }
  }
  return res;
}

}  // namespace classic
