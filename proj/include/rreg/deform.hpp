#pragma once

#include <cmath>
#include <vector>

#include "rreg/volume_ops.hpp"

namespace rreg {

struct SsConfig {
    int steps = 7;  // squaring count, valid range [0, 12]
};

inline void require_ss_config(const SsConfig& cfg) {
    require(cfg.steps >= 0 && cfg.steps <= 12, "scaling_and_squaring: steps out of [0,12]");
}

// phi = id + v / 2^N, then N self-compositions.
template <class T>
FieldT<T> scaling_and_squaring(const FieldT<T>& v, const SsConfig& cfg = {}) {
    require_ss_config(cfg);
    const Shape3 s = v.shape;
    const double scale = std::ldexp(1.0, -cfg.steps);  // 2^-N
    FieldT<T> phi = identity_grid_t<T>(s);
    const std::int64_t n3 = std::int64_t(phi.data.size());
#pragma omp parallel for schedule(static)
    for (std::int64_t i = 0; i < n3; ++i)
        phi.data[i] = T(double(phi.data[i]) + double(v.data[i]) * scale);
    for (int t = 0; t < cfg.steps; ++t) phi = compose(phi, phi);
    return phi;
}

// u = phi - identity
template <class T>
FieldT<T> displacement_of(const FieldT<T>& phi) {
    if (phi.kind != FieldKind::deformation)
        throw std::invalid_argument("displacement_of: expected deformation field");
    const Shape3 s = phi.shape;
    FieldT<T> u(s, FieldKind::displacement);
#pragma omp parallel for schedule(static)
    for (int k = 0; k < s.nz; ++k)
        for (int j = 0; j < s.ny; ++j) {
            std::size_t idx = s.index(0, j, k);
            for (int i = 0; i < s.nx; ++i, ++idx) {
                u.channel(0)[idx] = T(double(phi.channel(0)[idx]) - double(i));
                u.channel(1)[idx] = T(double(phi.channel(1)[idx]) - double(j));
                u.channel(2)[idx] = T(double(phi.channel(2)[idx]) - double(k));
            }
        }
    return u;
}

template <class T>
FieldT<T> deformation_of(const FieldT<T>& u) {
    if (u.kind == FieldKind::deformation)
        throw std::invalid_argument("deformation_of: input already a deformation");
    const Shape3 s = u.shape;
    FieldT<T> phi(s, FieldKind::deformation);
#pragma omp parallel for schedule(static)
    for (int k = 0; k < s.nz; ++k)
        for (int j = 0; j < s.ny; ++j) {
            std::size_t idx = s.index(0, j, k);
            for (int i = 0; i < s.nx; ++i, ++idx) {
                phi.channel(0)[idx] = T(double(u.channel(0)[idx]) + double(i));
                phi.channel(1)[idx] = T(double(u.channel(1)[idx]) + double(j));
                phi.channel(2)[idx] = T(double(u.channel(2)[idx]) + double(k));
            }
        }
    return phi;
}

// Exact reverse-mode derivative of scaling_and_squaring: replays the forward
// compositions, then walks them backwards. Each squaring uses phi as both
// arguments, so its gradient receives the outer and inner contributions.
template <class T>
FieldT<T> ss_vjp(const FieldT<T>& v, const SsConfig& cfg, const FieldT<T>& grad_phi) {
    require_ss_config(cfg);
    require_same_shape(v.shape, grad_phi.shape, "ss_vjp");
    const Shape3 s = v.shape;
    const double scale = std::ldexp(1.0, -cfg.steps);

    std::vector<FieldT<T>> stages;
    stages.reserve(std::size_t(cfg.steps));
    FieldT<T> phi = identity_grid_t<T>(s);
    const std::int64_t n3 = std::int64_t(phi.data.size());
#pragma omp parallel for schedule(static)
    for (std::int64_t i = 0; i < n3; ++i)
        phi.data[i] = T(double(phi.data[i]) + double(v.data[i]) * scale);
    for (int t = 0; t < cfg.steps; ++t) {
        stages.push_back(phi);
        phi = compose(phi, phi);
    }

    FieldT<T> g = grad_phi;
    g.kind = FieldKind::deformation;
    for (int t = cfg.steps - 1; t >= 0; --t) {
        FieldT<T> gouter(s, FieldKind::deformation, T(0));
        FieldT<T> ginner(s, FieldKind::deformation, T(0));
        compose_vjp(stages[std::size_t(t)], stages[std::size_t(t)], g, gouter, ginner);
#pragma omp parallel for schedule(static)
        for (std::int64_t i = 0; i < n3; ++i)
            g.data[i] = T(double(gouter.data[i]) + double(ginner.data[i]));
    }

    FieldT<T> gv(s, FieldKind::velocity);
#pragma omp parallel for schedule(static)
    for (std::int64_t i = 0; i < n3; ++i) gv.data[i] = T(double(g.data[i]) * scale);
    return gv;
}

}  // namespace rreg
