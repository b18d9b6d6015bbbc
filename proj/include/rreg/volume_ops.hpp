#pragma once

#include <cstdint>
#include <vector>

#include "rreg/interp.hpp"
#include "rreg/volume.hpp"

namespace rreg {

// Core grid operations. Per-voxel outputs are computed independently and can
// be parallelized freely; adjoints that must scatter run serially so results
// stay bit-identical for any thread count.

template <class T>
FieldT<T> identity_grid_t(const Shape3& s) {
    FieldT<T> phi(s, FieldKind::deformation);
    T* px = phi.channel(0);
    T* py = phi.channel(1);
    T* pz = phi.channel(2);
#pragma omp parallel for schedule(static)
    for (int k = 0; k < s.nz; ++k)
        for (int j = 0; j < s.ny; ++j) {
            std::size_t idx = s.index(0, j, k);
            for (int i = 0; i < s.nx; ++i, ++idx) {
                px[idx] = T(i);
                py[idx] = T(j);
                pz[idx] = T(k);
            }
        }
    return phi;
}

inline VectorField identity_grid(const Shape3& s) { return identity_grid_t<float>(s); }

template <class T>
T trilinear_sample(const VolumeT<T>& vol, double x, double y, double z) {
    return T(tri_value(vol.data.data(), vol.shape, tri_coord(vol.shape, x, y, z)));
}

template <class T>
void require_deformation(const FieldT<T>& phi, const char* where) {
    if (phi.kind != FieldKind::deformation)
        throw std::invalid_argument(std::string(where) + ": expected deformation field, got " +
                                    kind_name(phi.kind));
}

// output(x) = trilinear_sample(m, phi(x))
template <class T>
VolumeT<T> warp_scalar(const VolumeT<T>& m, const FieldT<T>& phi) {
    require_same_shape(m.shape, phi.shape, "warp_scalar");
    require_deformation(phi, "warp_scalar");
    const Shape3 s = m.shape;
    VolumeT<T> out(s);
    out.spacing = m.spacing;
    const T* px = phi.channel(0);
    const T* py = phi.channel(1);
    const T* pz = phi.channel(2);
    const T* src = m.data.data();
    T* dst = out.data.data();
    const std::int64_t n = std::int64_t(s.voxels());
#pragma omp parallel for schedule(static)
    for (std::int64_t v = 0; v < n; ++v) {
        TriCoord c = tri_coord(s, double(px[v]), double(py[v]), double(pz[v]));
        dst[v] = T(tri_value(src, s, c));
    }
    return out;
}

template <class T>
ChannelsT<T> warp_channels(const ChannelsT<T>& m, const FieldT<T>& phi) {
    require_same_shape(m.shape, phi.shape, "warp_channels");
    require_deformation(phi, "warp_channels");
    const Shape3 s = m.shape;
    ChannelsT<T> out(s, m.channels);
    const T* px = phi.channel(0);
    const T* py = phi.channel(1);
    const T* pz = phi.channel(2);
    const std::int64_t n = std::int64_t(s.voxels());
#pragma omp parallel for schedule(static)
    for (std::int64_t v = 0; v < n; ++v) {
        TriCoord c = tri_coord(s, double(px[v]), double(py[v]), double(pz[v]));
        for (int ch = 0; ch < m.channels; ++ch)
            out.channel(ch)[v] = T(tri_value(m.channel(ch), s, c));
    }
    return out;
}

// Nearest-neighbor warp; labels are preserved exactly.
template <class T>
LabelVolume warp_labels(const LabelVolume& l, const FieldT<T>& phi) {
    require_same_shape(l.shape, phi.shape, "warp_labels");
    require_deformation(phi, "warp_labels");
    const Shape3 s = l.shape;
    LabelVolume out(s, l.label_count);
    const T* px = phi.channel(0);
    const T* py = phi.channel(1);
    const T* pz = phi.channel(2);
    const std::int64_t n = std::int64_t(s.voxels());
#pragma omp parallel for schedule(static)
    for (std::int64_t v = 0; v < n; ++v)
        out.data[v] = l.data[nn_index(s, double(px[v]), double(py[v]), double(pz[v]))];
    return out;
}

// result(x) = outer(inner(x)), sampled trilinearly per channel.
template <class T>
FieldT<T> compose(const FieldT<T>& outer, const FieldT<T>& inner) {
    require_same_shape(outer.shape, inner.shape, "compose");
    require_deformation(outer, "compose");
    require_deformation(inner, "compose");
    const Shape3 s = outer.shape;
    FieldT<T> out(s, FieldKind::deformation);
    const T* ix = inner.channel(0);
    const T* iy = inner.channel(1);
    const T* iz = inner.channel(2);
    const std::int64_t n = std::int64_t(s.voxels());
#pragma omp parallel for schedule(static)
    for (std::int64_t v = 0; v < n; ++v) {
        TriCoord c = tri_coord(s, double(ix[v]), double(iy[v]), double(iz[v]));
        out.channel(0)[v] = T(tri_value(outer.channel(0), s, c));
        out.channel(1)[v] = T(tri_value(outer.channel(1), s, c));
        out.channel(2)[v] = T(tri_value(outer.channel(2), s, c));
    }
    return out;
}

// d(warp_scalar)/d(phi): gather per voxel, safe to parallelize.
template <class T>
FieldT<T> warp_scalar_vjp_phi(const VolumeT<T>& m, const FieldT<T>& phi, const VolumeT<T>& gout) {
    require_same_shape(m.shape, phi.shape, "warp_scalar_vjp_phi");
    require_same_shape(m.shape, gout.shape, "warp_scalar_vjp_phi");
    const Shape3 s = m.shape;
    FieldT<T> gphi(s, phi.kind);
    const T* px = phi.channel(0);
    const T* py = phi.channel(1);
    const T* pz = phi.channel(2);
    const std::int64_t n = std::int64_t(s.voxels());
#pragma omp parallel for schedule(static)
    for (std::int64_t v = 0; v < n; ++v) {
        TriCoord c = tri_coord(s, double(px[v]), double(py[v]), double(pz[v]));
        double dx, dy, dz;
        tri_value_grad(m.data.data(), s, c, dx, dy, dz);
        const double g = double(gout.data[v]);
        gphi.channel(0)[v] = T(g * dx);
        gphi.channel(1)[v] = T(g * dy);
        gphi.channel(2)[v] = T(g * dz);
    }
    return gphi;
}

// d(warp_scalar)/d(m): scatter of interpolation weights; runs serially so the
// accumulation order is fixed.
template <class T>
VolumeT<T> warp_scalar_vjp_source(const FieldT<T>& phi, const VolumeT<T>& gout) {
    require_same_shape(phi.shape, gout.shape, "warp_scalar_vjp_source");
    const Shape3 s = phi.shape;
    VolumeT<T> gm(s, T(0));
    const T* px = phi.channel(0);
    const T* py = phi.channel(1);
    const T* pz = phi.channel(2);
    const std::int64_t n = std::int64_t(s.voxels());
    for (std::int64_t v = 0; v < n; ++v) {
        TriCoord c = tri_coord(s, double(px[v]), double(py[v]), double(pz[v]));
        tri_splat(gm.data.data(), s, c, double(gout.data[v]));
    }
    return gm;
}

template <class T>
FieldT<T> warp_channels_vjp_phi(const ChannelsT<T>& m, const FieldT<T>& phi,
                                const ChannelsT<T>& gout) {
    require_same_shape(m.shape, phi.shape, "warp_channels_vjp_phi");
    const Shape3 s = m.shape;
    FieldT<T> gphi(s, phi.kind);
    const T* px = phi.channel(0);
    const T* py = phi.channel(1);
    const T* pz = phi.channel(2);
    const std::int64_t n = std::int64_t(s.voxels());
#pragma omp parallel for schedule(static)
    for (std::int64_t v = 0; v < n; ++v) {
        TriCoord c = tri_coord(s, double(px[v]), double(py[v]), double(pz[v]));
        double ax = 0.0, ay = 0.0, az = 0.0;
        for (int ch = 0; ch < m.channels; ++ch) {
            double dx, dy, dz;
            tri_value_grad(m.channel(ch), s, c, dx, dy, dz);
            const double g = double(gout.channel(ch)[v]);
            ax += g * dx;
            ay += g * dy;
            az += g * dz;
        }
        gphi.channel(0)[v] = T(ax);
        gphi.channel(1)[v] = T(ay);
        gphi.channel(2)[v] = T(az);
    }
    return gphi;
}

// Reverse-mode step for compose: accumulates into both input gradients.
// The outer-gradient scatter is serial by design.
template <class T>
void compose_vjp(const FieldT<T>& outer, const FieldT<T>& inner, const FieldT<T>& gout,
                 FieldT<T>& gouter, FieldT<T>& ginner) {
    const Shape3 s = outer.shape;
    require_same_shape(s, gout.shape, "compose_vjp");
    const T* ix = inner.channel(0);
    const T* iy = inner.channel(1);
    const T* iz = inner.channel(2);
    const std::int64_t n = std::int64_t(s.voxels());

#pragma omp parallel for schedule(static)
    for (std::int64_t v = 0; v < n; ++v) {
        TriCoord c = tri_coord(s, double(ix[v]), double(iy[v]), double(iz[v]));
        double ax = 0.0, ay = 0.0, az = 0.0;
        for (int ch = 0; ch < 3; ++ch) {
            double dx, dy, dz;
            tri_value_grad(outer.channel(ch), s, c, dx, dy, dz);
            const double g = double(gout.channel(ch)[v]);
            ax += g * dx;
            ay += g * dy;
            az += g * dz;
        }
        ginner.channel(0)[v] += T(ax);
        ginner.channel(1)[v] += T(ay);
        ginner.channel(2)[v] += T(az);
    }

    for (std::int64_t v = 0; v < n; ++v) {
        TriCoord c = tri_coord(s, double(ix[v]), double(iy[v]), double(iz[v]));
        for (int ch = 0; ch < 3; ++ch)
            tri_splat(gouter.channel(ch), s, c, double(gout.channel(ch)[v]));
    }
}

// Forward differences, 9 channels laid out as channel(c*3 + d) = d u_c / d x_d.
// The far plane of each axis gets derivative 0.
template <class T>
ChannelsT<T> spatial_gradient(const FieldT<T>& u) {
    const Shape3 s = u.shape;
    ChannelsT<T> out(s, 9, T(0));
    const int step[3] = {1, s.nx, s.nx * s.ny};
#pragma omp parallel for schedule(static)
    for (int k = 0; k < s.nz; ++k)
        for (int j = 0; j < s.ny; ++j) {
            const std::size_t row = s.index(0, j, k);
            for (int c = 0; c < 3; ++c) {
                const T* uc = u.channel(c);
                for (int d = 0; d < 3; ++d) {
                    T* o = out.channel(c * 3 + d);
                    const int lim = (d == 0) ? s.nx - 1 : s.dim(d) - 1;
                    const bool in_d = (d == 0) || (d == 1 ? j < lim : k < lim);
                    for (int i = 0; i < s.nx; ++i) {
                        const std::size_t v = row + std::size_t(i);
                        const bool ok = (d == 0) ? (i < lim) : in_d;
                        o[v] = ok ? uc[v + std::size_t(step[d])] - uc[v] : T(0);
                    }
                }
            }
        }
    return out;
}

// Adjoint of spatial_gradient: gather form, parallel-safe.
template <class T>
FieldT<T> spatial_gradient_adjoint(const ChannelsT<T>& g, FieldKind kind) {
    const Shape3 s = g.shape;
    FieldT<T> out(s, kind, T(0));
    const int step[3] = {1, s.nx, s.nx * s.ny};
#pragma omp parallel for schedule(static)
    for (int k = 0; k < s.nz; ++k)
        for (int j = 0; j < s.ny; ++j)
            for (int i = 0; i < s.nx; ++i) {
                const std::size_t v = s.index(i, j, k);
                const int pos[3] = {i, j, k};
                for (int c = 0; c < 3; ++c) {
                    double acc = 0.0;
                    for (int d = 0; d < 3; ++d) {
                        const T* gc = g.channel(c * 3 + d);
                        const int n_d = s.dim(d);
                        if (pos[d] < n_d - 1) acc -= double(gc[v]);
                        if (pos[d] >= 1 && pos[d] - 1 < n_d - 1)
                            acc += double(gc[v - std::size_t(step[d])]);
                    }
                    out.channel(c)[v] += T(acc);
                }
            }
    return out;
}

enum class JacobianScheme { central, forward };

// Determinant of the finite-difference Jacobian of a deformation at each
// voxel. Central differences divide by the actual index span, so border
// voxels fall back to one-sided derivatives.
template <class T>
VolumeT<T> jacobian_determinants(const FieldT<T>& phi,
                                 JacobianScheme scheme = JacobianScheme::central) {
    require_deformation(phi, "jacobian_determinants");
    const Shape3 s = phi.shape;
    VolumeT<T> out(s);
    const int step[3] = {1, s.nx, s.nx * s.ny};
#pragma omp parallel for schedule(static)
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
                const double det = J[0][0] * (J[1][1] * J[2][2] - J[1][2] * J[2][1]) -
                                   J[0][1] * (J[1][0] * J[2][2] - J[1][2] * J[2][0]) +
                                   J[0][2] * (J[1][0] * J[2][1] - J[1][1] * J[2][0]);
                out.data[v] = T(det);
            }
    return out;
}

namespace detail {
inline double axis_scale(int n_src, int n_dst) {
    return n_dst > 1 ? double(n_src - 1) / double(n_dst - 1) : 0.0;
}
}  // namespace detail

// Trilinear resampling with the align-corners convention: corner voxel
// centers map to corner voxel centers.
template <class T>
void resample_plane(const T* src, const Shape3& ss, T* dst, const Shape3& ds) {
    const double rx = detail::axis_scale(ss.nx, ds.nx);
    const double ry = detail::axis_scale(ss.ny, ds.ny);
    const double rz = detail::axis_scale(ss.nz, ds.nz);
#pragma omp parallel for schedule(static)
    for (int k = 0; k < ds.nz; ++k)
        for (int j = 0; j < ds.ny; ++j)
            for (int i = 0; i < ds.nx; ++i) {
                TriCoord c = tri_coord(ss, double(i) * rx, double(j) * ry, double(k) * rz);
                dst[ds.index(i, j, k)] = T(tri_value(src, ss, c));
            }
}

template <class T>
VolumeT<T> resample(const VolumeT<T>& vol, const Shape3& target) {
    require(target.nx >= 1 && target.ny >= 1 && target.nz >= 1, "resample: bad target shape");
    VolumeT<T> out(target);
    out.spacing = vol.spacing;
    resample_plane(vol.data.data(), vol.shape, out.data.data(), target);
    return out;
}

template <class T>
ChannelsT<T> resample_channels(const ChannelsT<T>& vol, const Shape3& target) {
    ChannelsT<T> out(target, vol.channels);
    for (int c = 0; c < vol.channels; ++c)
        resample_plane(vol.channel(c), vol.shape, out.channel(c), target);
    return out;
}

namespace detail {

// Adjoint of one 1D linear-resample pass. Lines along the resampled axis are
// independent; the in-line scatter is serial per line.
inline void resample_axis_adjoint(const std::vector<double>& g, int n_dst, int n_src,
                                  std::int64_t lines, std::int64_t stride_axis_dst,
                                  std::int64_t stride_axis_src,
                                  const std::vector<std::int64_t>& line_base_dst,
                                  const std::vector<std::int64_t>& line_base_src,
                                  std::vector<double>& out) {
    const double r = axis_scale(n_src, n_dst);
#pragma omp parallel for schedule(static)
    for (std::int64_t L = 0; L < lines; ++L) {
        const std::int64_t bd = line_base_dst[std::size_t(L)];
        const std::int64_t bs = line_base_src[std::size_t(L)];
        for (int y = 0; y < n_dst; ++y) {
            int i0;
            double f, gmask;
            clamp_axis(double(y) * r, n_src, i0, f, gmask);
            const double gv = g[std::size_t(bd + y * stride_axis_dst)];
            out[std::size_t(bs + i0 * stride_axis_src)] += (1.0 - f) * gv;
            out[std::size_t(bs + (i0 + 1 < n_src ? i0 + 1 : i0) * stride_axis_src)] +=
                (i0 + 1 < n_src) ? f * gv : 0.0;
        }
    }
}

inline std::vector<std::int64_t> line_bases(const Shape3& s, int axis) {
    std::vector<std::int64_t> base;
    const std::int64_t sx = 1, sy = s.nx, sz = std::int64_t(s.nx) * s.ny;
    if (axis == 0) {
        base.reserve(std::size_t(s.ny) * s.nz);
        for (int k = 0; k < s.nz; ++k)
            for (int j = 0; j < s.ny; ++j) base.push_back(j * sy + k * sz);
    } else if (axis == 1) {
        base.reserve(std::size_t(s.nx) * s.nz);
        for (int k = 0; k < s.nz; ++k)
            for (int i = 0; i < s.nx; ++i) base.push_back(i * sx + k * sz);
    } else {
        base.reserve(std::size_t(s.nx) * s.ny);
        for (int j = 0; j < s.ny; ++j)
            for (int i = 0; i < s.nx; ++i) base.push_back(i * sx + j * sy);
    }
    return base;
}

// Adjoint of resample_plane for one channel, via three separable 1D passes.
inline void resample_adjoint_plane(const double* gout, const Shape3& ds, const Shape3& ss,
                                   double* gsrc_accum) {
    const Shape3 mid1(ds.nx, ds.ny, ss.nz);  // after adjoint of the z pass
    const Shape3 mid2(ds.nx, ss.ny, ss.nz);  // after adjoint of the y pass

    std::vector<double> g0(gout, gout + ds.voxels());
    std::vector<double> g1(mid1.voxels(), 0.0);
    {
        auto bd = line_bases(ds, 2);
        auto bs = line_bases(mid1, 2);
        resample_axis_adjoint(g0, ds.nz, ss.nz, std::int64_t(bd.size()),
                              std::int64_t(ds.nx) * ds.ny, std::int64_t(mid1.nx) * mid1.ny, bd, bs,
                              g1);
    }
    std::vector<double> g2(mid2.voxels(), 0.0);
    {
        auto bd = line_bases(mid1, 1);
        auto bs = line_bases(mid2, 1);
        resample_axis_adjoint(g1, mid1.ny, ss.ny, std::int64_t(bd.size()), mid1.nx, mid2.nx, bd,
                              bs, g2);
    }
    {
        std::vector<double> g3(ss.voxels(), 0.0);
        auto bd = line_bases(mid2, 0);
        auto bs = line_bases(ss, 0);
        resample_axis_adjoint(g2, mid2.nx, ss.nx, std::int64_t(bd.size()), 1, 1, bd, bs, g3);
        for (std::size_t v = 0; v < g3.size(); ++v) gsrc_accum[v] += g3[v];
    }
}

}  // namespace detail

template <class T>
ChannelsT<T> resample_channels_adjoint(const ChannelsT<T>& gout, const Shape3& src_shape) {
    ChannelsT<T> gsrc(src_shape, gout.channels, T(0));
    std::vector<double> gd(gout.plane());
    std::vector<double> acc(src_shape.voxels());
    for (int c = 0; c < gout.channels; ++c) {
        for (std::size_t v = 0; v < gd.size(); ++v) gd[v] = double(gout.channel(c)[v]);
        std::fill(acc.begin(), acc.end(), 0.0);
        detail::resample_adjoint_plane(gd.data(), gout.shape, src_shape, acc.data());
        for (std::size_t v = 0; v < acc.size(); ++v) gsrc.channel(c)[v] = T(acc[v]);
    }
    return gsrc;
}

template <class T>
FieldT<T> resample_field(const FieldT<T>& f, const Shape3& target) {
    FieldT<T> out(target, f.kind);
    for (int c = 0; c < 3; ++c) resample_plane(f.channel(c), f.shape, out.channel(c), target);
    return out;
}

}  // namespace rreg
