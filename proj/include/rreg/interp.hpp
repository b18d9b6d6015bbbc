#pragma once

#include <algorithm>
#include <cmath>

#include "rreg/shape.hpp"

namespace rreg {

// Trilinear interpolation with border-replicate clamping. All arithmetic is
// done in double and cast to the storage type at the very end, which makes
// lattice-point samples and border clamps exact. Weights use the
// (1-f)*a + f*b form so f==0 and f==1 reproduce corner values bitwise.

struct TriCoord {
    int i0, j0, k0;        // base corner, i0+1 always in bounds (nx >= 2)
    double fx, fy, fz;     // fractions in [0,1]
    double gx, gy, gz;     // 1 where position gradients pass the clamp, else 0
};

namespace detail {
inline void clamp_axis(double p, int n, int& i0, double& f, double& g) {
    g = (p >= 0.0 && p <= double(n - 1)) ? 1.0 : 0.0;
    p = std::clamp(p, 0.0, double(n - 1));
    if (n < 2) {
        i0 = 0;
        f = 0.0;
        g = 0.0;
        return;
    }
    int i = int(std::floor(p));
    if (i > n - 2) i = n - 2;
    i0 = i;
    f = p - double(i);
}
}  // namespace detail

inline TriCoord tri_coord(const Shape3& s, double x, double y, double z) {
    TriCoord c;
    detail::clamp_axis(x, s.nx, c.i0, c.fx, c.gx);
    detail::clamp_axis(y, s.ny, c.j0, c.fy, c.gy);
    detail::clamp_axis(z, s.nz, c.k0, c.fz, c.gz);
    return c;
}

template <class T>
struct TriCorners {
    double c000, c100, c010, c110, c001, c101, c011, c111;

    TriCorners(const T* plane, const Shape3& s, const TriCoord& c) {
        const std::size_t base = s.index(c.i0, c.j0, c.k0);
        const std::size_t sx = 1;
        const std::size_t sy = std::size_t(s.nx);
        const std::size_t sz = std::size_t(s.nx) * std::size_t(s.ny);
        c000 = double(plane[base]);
        c100 = double(plane[base + sx]);
        c010 = double(plane[base + sy]);
        c110 = double(plane[base + sy + sx]);
        c001 = double(plane[base + sz]);
        c101 = double(plane[base + sz + sx]);
        c011 = double(plane[base + sz + sy]);
        c111 = double(plane[base + sz + sy + sx]);
    }
};

inline double lerp1(double a, double b, double f) { return (1.0 - f) * a + f * b; }

template <class T>
double tri_value(const T* plane, const Shape3& s, const TriCoord& c) {
    TriCorners<T> k(plane, s, c);
    const double x00 = lerp1(k.c000, k.c100, c.fx);
    const double x10 = lerp1(k.c010, k.c110, c.fx);
    const double x01 = lerp1(k.c001, k.c101, c.fx);
    const double x11 = lerp1(k.c011, k.c111, c.fx);
    const double y0 = lerp1(x00, x10, c.fy);
    const double y1 = lerp1(x01, x11, c.fy);
    return lerp1(y0, y1, c.fz);
}

// Value plus derivative with respect to the sample position (clamp-masked).
template <class T>
double tri_value_grad(const T* plane, const Shape3& s, const TriCoord& c,
                      double& dx, double& dy, double& dz) {
    TriCorners<T> k(plane, s, c);
    const double x00 = lerp1(k.c000, k.c100, c.fx);
    const double x10 = lerp1(k.c010, k.c110, c.fx);
    const double x01 = lerp1(k.c001, k.c101, c.fx);
    const double x11 = lerp1(k.c011, k.c111, c.fx);
    const double y0 = lerp1(x00, x10, c.fy);
    const double y1 = lerp1(x01, x11, c.fy);

    dx = c.gx * lerp1(lerp1(k.c100 - k.c000, k.c110 - k.c010, c.fy),
                      lerp1(k.c101 - k.c001, k.c111 - k.c011, c.fy), c.fz);
    dy = c.gy * lerp1(x10 - x00, x11 - x01, c.fz);
    dz = c.gz * (y1 - y0);
    return lerp1(y0, y1, c.fz);
}

// Adjoint of tri_value: accumulate g times the corner weights into the
// gradient plane. Caller is responsible for write ordering.
template <class T>
void tri_splat(T* grad_plane, const Shape3& s, const TriCoord& c, double g) {
    const std::size_t base = s.index(c.i0, c.j0, c.k0);
    const std::size_t sx = 1;
    const std::size_t sy = std::size_t(s.nx);
    const std::size_t sz = std::size_t(s.nx) * std::size_t(s.ny);
    const double wx0 = 1.0 - c.fx, wx1 = c.fx;
    const double wy0 = 1.0 - c.fy, wy1 = c.fy;
    const double wz0 = 1.0 - c.fz, wz1 = c.fz;
    grad_plane[base] += T(g * wx0 * wy0 * wz0);
    grad_plane[base + sx] += T(g * wx1 * wy0 * wz0);
    grad_plane[base + sy] += T(g * wx0 * wy1 * wz0);
    grad_plane[base + sy + sx] += T(g * wx1 * wy1 * wz0);
    grad_plane[base + sz] += T(g * wx0 * wy0 * wz1);
    grad_plane[base + sz + sx] += T(g * wx1 * wy0 * wz1);
    grad_plane[base + sz + sy] += T(g * wx0 * wy1 * wz1);
    grad_plane[base + sz + sy + sx] += T(g * wx1 * wy1 * wz1);
}

// Nearest-neighbor index with border clamping; ties round half up.
inline std::size_t nn_index(const Shape3& s, double x, double y, double z) {
    int i = int(std::floor(std::clamp(x, 0.0, double(s.nx - 1)) + 0.5));
    int j = int(std::floor(std::clamp(y, 0.0, double(s.ny - 1)) + 0.5));
    int k = int(std::floor(std::clamp(z, 0.0, double(s.nz - 1)) + 0.5));
    i = std::min(i, s.nx - 1);
    j = std::min(j, s.ny - 1);
    k = std::min(k, s.nz - 1);
    return s.index(i, j, k);
}

}  // namespace rreg
