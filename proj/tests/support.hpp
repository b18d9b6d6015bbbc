#pragma once

// Test-only oracles, independent of the implementation paths they check.

#include <cmath>
#include <functional>
#include <vector>

#include "rreg/rng.hpp"
#include "rreg/volume.hpp"
#include "rreg/volume_ops.hpp"

namespace testsup {

using namespace rreg;

inline ScalarVolume random_volume(const Shape3& s, std::uint64_t seed, float lo = 0.f,
                                  float hi = 1.f) {
    ScalarVolume v(s);
    SplitMix rng(seed);
    for (float& x : v.data) x = float(rng.next_range(lo, hi));
    return v;
}

template <class T>
FieldT<T> random_field(const Shape3& s, FieldKind kind, std::uint64_t seed, double amp) {
    FieldT<T> f(s, kind);
    SplitMix rng(seed);
    for (T& x : f.data) x = T(rng.next_range(-amp, amp));
    return f;
}

// Smooth low-frequency displacement built from a few sine modes; used where
// oracles need differentiable fields rather than white noise.
template <class T>
FieldT<T> smooth_field(const Shape3& s, FieldKind kind, std::uint64_t seed, double amp) {
    FieldT<T> f(s, kind);
    SplitMix rng(seed);
    double ph[3][3], w[3][3];
    for (int c = 0; c < 3; ++c)
        for (int d = 0; d < 3; ++d) {
            ph[c][d] = rng.next_range(0.0, 6.28);
            w[c][d] = rng.next_range(0.5, 1.5);
        }
    for (int k = 0; k < s.nz; ++k)
        for (int j = 0; j < s.ny; ++j)
            for (int i = 0; i < s.nx; ++i) {
                const double x = 6.28318530718 * i / s.nx;
                const double y = 6.28318530718 * j / s.ny;
                const double z = 6.28318530718 * k / s.nz;
                for (int c = 0; c < 3; ++c)
                    f.at(c, i, j, k) = T(amp / 3.0 *
                                         (std::sin(w[c][0] * x + ph[c][0]) +
                                          std::sin(w[c][1] * y + ph[c][1]) +
                                          std::sin(w[c][2] * z + ph[c][2])));
            }
    return f;
}

// Fixed-point inversion of phi = id + u: psi(x) = x - u(psi(x)).
inline VectorField invert_fixed_point(const VectorField& phi, int iterations = 30) {
    const Shape3 s = phi.shape;
    VectorField u(s, FieldKind::displacement);
    for (int c = 0; c < 3; ++c)
        for (int k = 0; k < s.nz; ++k)
            for (int j = 0; j < s.ny; ++j)
                for (int i = 0; i < s.nx; ++i)
                    u.at(c, i, j, k) = phi.at(c, i, j, k) - float(c == 0 ? i : (c == 1 ? j : k));

    VectorField psi = identity_grid(s);
    for (int it = 0; it < iterations; ++it) {
        VectorField next(s, FieldKind::deformation);
        for (int k = 0; k < s.nz; ++k)
            for (int j = 0; j < s.ny; ++j)
                for (int i = 0; i < s.nx; ++i) {
                    TriCoord c = tri_coord(s, psi.at(0, i, j, k), psi.at(1, i, j, k),
                                           psi.at(2, i, j, k));
                    next.at(0, i, j, k) = float(i - tri_value(u.channel(0), s, c));
                    next.at(1, i, j, k) = float(j - tri_value(u.channel(1), s, c));
                    next.at(2, i, j, k) = float(k - tri_value(u.channel(2), s, c));
                }
        psi = next;
    }
    return psi;
}

// Central finite-difference check of an analytic gradient. `eval` must return
// the scalar objective for the current parameter vector; `params` is mutated
// in place during probing and restored afterwards.
struct FdReport {
    double max_rel_err = 0.0;
    std::size_t worst_index = 0;
};

inline double fd_rel_err(double analytic, double numeric, double floor = 1e-8) {
    const double denom = std::max({std::fabs(analytic), std::fabs(numeric), floor});
    return std::fabs(analytic - numeric) / denom;
}

template <class Eval>
FdReport check_gradient(std::vector<double>& params, const std::vector<double>& analytic,
                        Eval&& eval, double h = 1e-5, std::size_t stride = 1) {
    FdReport rep;
    for (std::size_t i = 0; i < params.size(); i += stride) {
        const double saved = params[i];
        params[i] = saved + h;
        const double fp = eval();
        params[i] = saved - h;
        const double fm = eval();
        params[i] = saved;
        const double numeric = (fp - fm) / (2.0 * h);
        const double rel = fd_rel_err(analytic[i], numeric);
        if (rel > rep.max_rel_err) {
            rep.max_rel_err = rel;
            rep.worst_index = i;
        }
    }
    return rep;
}

}  // namespace testsup

namespace testsup {

// Explicit-Euler flow integration of a stationary velocity field: the
// independent oracle for scaling-and-squaring.
template <class T>
rreg::FieldT<T> euler_flow(const rreg::FieldT<T>& v, int steps) {
    using namespace rreg;
    const Shape3 s = v.shape;
    FieldT<T> phi = identity_grid_t<T>(s);
    const double h = 1.0 / double(steps);
    for (int t = 0; t < steps; ++t) {
        FieldT<T> next(s, FieldKind::deformation);
        for (std::size_t idx = 0; idx < s.voxels(); ++idx) {
            const double x = double(phi.channel(0)[idx]);
            const double y = double(phi.channel(1)[idx]);
            const double z = double(phi.channel(2)[idx]);
            TriCoord c = tri_coord(s, x, y, z);
            next.channel(0)[idx] = T(x + h * tri_value(v.channel(0), s, c));
            next.channel(1)[idx] = T(y + h * tri_value(v.channel(1), s, c));
            next.channel(2)[idx] = T(z + h * tri_value(v.channel(2), s, c));
        }
        phi = next;
    }
    return phi;
}

}  // namespace testsup
