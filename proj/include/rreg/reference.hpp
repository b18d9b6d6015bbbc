#pragma once

// Serial reference implementations of the parallel kernels. Kept for tests
// (bitwise comparison against the OpenMP paths) and for the benchmark tool.

#include "rreg/volume_ops.hpp"

namespace rreg::ref {

template <class T>
VolumeT<T> warp_scalar(const VolumeT<T>& m, const FieldT<T>& phi) {
    require_same_shape(m.shape, phi.shape, "ref::warp_scalar");
    const Shape3 s = m.shape;
    VolumeT<T> out(s);
    out.spacing = m.spacing;
    for (std::size_t v = 0; v < s.voxels(); ++v) {
        TriCoord c = tri_coord(s, double(phi.channel(0)[v]), double(phi.channel(1)[v]),
                               double(phi.channel(2)[v]));
        out.data[v] = T(tri_value(m.data.data(), s, c));
    }
    return out;
}

template <class T>
FieldT<T> compose(const FieldT<T>& outer, const FieldT<T>& inner) {
    require_same_shape(outer.shape, inner.shape, "ref::compose");
    const Shape3 s = outer.shape;
    FieldT<T> out(s, FieldKind::deformation);
    for (std::size_t v = 0; v < s.voxels(); ++v) {
        TriCoord c = tri_coord(s, double(inner.channel(0)[v]), double(inner.channel(1)[v]),
                               double(inner.channel(2)[v]));
        for (int ch = 0; ch < 3; ++ch)
            out.channel(ch)[v] = T(tri_value(outer.channel(ch), s, c));
    }
    return out;
}

template <class T>
VolumeT<T> jacobian_determinants(const FieldT<T>& phi,
                                 JacobianScheme scheme = JacobianScheme::central) {
    const Shape3 s = phi.shape;
    VolumeT<T> out(s);
    const int step[3] = {1, s.nx, s.nx * s.ny};
    for (int k = 0; k < s.nz; ++k)
        for (int j = 0; j < s.ny; ++j)
            for (int i = 0; i < s.nx; ++i) {
                const std::size_t v = s.index(i, j, k);
                const int pos[3] = {i, j, k};
                double J[3][3];
                for (int d = 0; d < 3; ++d) {
                    const int n_d = s.dim(d);
                    int lo, hi;
                    if (scheme == JacobianScheme::central) {
                        lo = pos[d] > 0 ? pos[d] - 1 : 0;
                        hi = pos[d] < n_d - 1 ? pos[d] + 1 : n_d - 1;
                    } else {
                        lo = pos[d] < n_d - 1 ? pos[d] : pos[d] - 1;
                        hi = lo + 1;
                    }
                    const double inv = 1.0 / double(hi - lo);
                    const std::size_t vhi = v + std::size_t((hi - pos[d]) * step[d]);
                    const std::size_t vlo = v - std::size_t((pos[d] - lo) * step[d]);
                    for (int c = 0; c < 3; ++c)
                        J[c][d] = (double(phi.channel(c)[vhi]) - double(phi.channel(c)[vlo])) * inv;
                }
                out.data[v] = T(J[0][0] * (J[1][1] * J[2][2] - J[1][2] * J[2][1]) -
                                J[0][1] * (J[1][0] * J[2][2] - J[1][2] * J[2][0]) +
                                J[0][2] * (J[1][0] * J[2][1] - J[1][1] * J[2][0]));
            }
    return out;
}

}  // namespace rreg::ref
