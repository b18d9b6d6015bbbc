#include "rreg/metrics.hpp"

#include <algorithm>
#include <cmath>

#include "rreg/interp.hpp"
#include "rreg/par.hpp"
#include "rreg/volume_ops.hpp"

namespace rreg::metrics {

DiceReport dice(const LabelVolume& a, const LabelVolume& b, const std::vector<int>& labels) {
    require_same_shape(a.shape, b.shape, "dice");
    int max_label = 0;
    for (int l : labels) max_label = std::max(max_label, l);
    std::vector<std::int64_t> na(std::size_t(max_label) + 1, 0), nb(na.size(), 0), nab(na.size(), 0);
    const std::size_t n = a.shape.voxels();
    for (std::size_t v = 0; v < n; ++v) {
        const std::uint16_t la = a.data[v];
        const std::uint16_t lb = b.data[v];
        if (la <= max_label) ++na[la];
        if (lb <= max_label) ++nb[lb];
        if (la == lb && la <= max_label) ++nab[la];
    }

    DiceReport rep;
    double sum = 0.0;
    for (int l : labels) {
        const std::int64_t denom = na[std::size_t(l)] + nb[std::size_t(l)];
        if (denom == 0) continue;  // absent from both
        const double d = 2.0 * double(nab[std::size_t(l)]) / double(denom);
        rep.labels.push_back(l);
        rep.per_label.push_back(d);
        sum += d;
    }
    rep.mean = rep.labels.empty() ? 0.0 : sum / double(rep.labels.size());
    return rep;
}

DiceReport dice(const LabelVolume& a, const LabelVolume& b) {
    const int count = std::max(a.label_count, b.label_count);
    std::vector<int> labels(std::size_t(std::max(count, 1)));
    for (std::size_t i = 0; i < labels.size(); ++i) labels[i] = int(i);
    return dice(a, b, labels);
}

namespace {

inline double det3(const double J[3][3]) {
    return J[0][0] * (J[1][1] * J[2][2] - J[1][2] * J[2][1]) -
           J[0][1] * (J[1][0] * J[2][2] - J[1][2] * J[2][0]) +
           J[0][2] * (J[1][0] * J[2][1] - J[1][1] * J[2][0]);
}

}  // namespace

double ndv_percent(const VectorField& phi, NdvMode mode) {
    if (phi.kind != FieldKind::deformation)
        throw std::invalid_argument("ndv_percent: expected deformation field");
    const Shape3 s = phi.shape;
    if (s.nx < 3 || s.ny < 3 || s.nz < 3) return 0.0;
    const std::int64_t step[3] = {1, s.nx, std::int64_t(s.nx) * s.ny};

    const double bad = plane_sum(s.nz, [&](int k) {
        if (k < 1 || k >= s.nz - 1) return 0.0;
        double acc = 0.0;
        for (int j = 1; j < s.ny - 1; ++j)
            for (int i = 1; i < s.nx - 1; ++i) {
                const std::size_t v = s.index(i, j, k);
                if (mode == NdvMode::central) {
                    double J[3][3];
                    for (int d = 0; d < 3; ++d)
                        for (int c = 0; c < 3; ++c)
                            J[c][d] = 0.5 * (double(phi.channel(c)[v + std::size_t(step[d])]) -
                                             double(phi.channel(c)[v - std::size_t(step[d])]));
                    if (det3(J) <= 0.0) acc += 1.0;
                    continue;
                }
                // One-sided differences in all eight forward/backward corner
                // combinations (the digital-diffeomorphism scheme set).
                double fwd[3][3], bwd[3][3];
                for (int d = 0; d < 3; ++d)
                    for (int c = 0; c < 3; ++c) {
                        const double center = double(phi.channel(c)[v]);
                        fwd[c][d] = double(phi.channel(c)[v + std::size_t(step[d])]) - center;
                        bwd[c][d] = center - double(phi.channel(c)[v - std::size_t(step[d])]);
                    }
                int non_diffeo = 0;
                for (int combo = 0; combo < 8; ++combo) {
                    double J[3][3];
                    for (int d = 0; d < 3; ++d) {
                        const bool use_fwd = (combo >> d) & 1;
                        for (int c = 0; c < 3; ++c) J[c][d] = use_fwd ? fwd[c][d] : bwd[c][d];
                    }
                    if (det3(J) <= 0.0) ++non_diffeo;
                }
                if (mode == NdvMode::forward_fractional)
                    acc += double(non_diffeo) / 8.0;
                else
                    acc += non_diffeo > 0 ? 1.0 : 0.0;
            }
        return acc;
    });

    const double interior =
        double(s.nx - 2) * double(s.ny - 2) * double(s.nz - 2);
    return 100.0 * bad / interior;
}

TreReport tre(const LandmarkSet& moving_lms, const LandmarkSet& fixed_lms,
              const VectorField& phi) {
    if (moving_lms.points.size() != fixed_lms.points.size())
        throw std::invalid_argument("tre: landmark count mismatch");
    if (phi.kind != FieldKind::deformation)
        throw std::invalid_argument("tre: expected deformation field");

    TreReport rep;
    rep.distances_mm.reserve(fixed_lms.points.size());
    const Shape3 s = phi.shape;
    for (std::size_t p = 0; p < fixed_lms.points.size(); ++p) {
        const auto& fx = fixed_lms.points[p];
        TriCoord c = tri_coord(s, fx[0], fx[1], fx[2]);
        double mapped[3];
        for (int d = 0; d < 3; ++d) mapped[d] = tri_value(phi.channel(d), s, c);
        double d2 = 0.0;
        for (int d = 0; d < 3; ++d) {
            const double diff = (mapped[d] - moving_lms.points[p][d]) * double(fixed_lms.spacing[std::size_t(d)]);
            d2 += diff * diff;
        }
        rep.distances_mm.push_back(std::sqrt(d2));
    }

    double sum = 0.0;
    for (double d : rep.distances_mm) sum += d;
    rep.mean = rep.distances_mm.empty() ? 0.0 : sum / double(rep.distances_mm.size());
    double var = 0.0;
    for (double d : rep.distances_mm) var += (d - rep.mean) * (d - rep.mean);
    rep.stddev = rep.distances_mm.empty() ? 0.0 : std::sqrt(var / double(rep.distances_mm.size()));
    return rep;
}

}  // namespace rreg::metrics
