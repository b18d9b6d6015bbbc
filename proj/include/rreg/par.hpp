#pragma once

#include <vector>

namespace rreg {

// Deterministic parallel reduction: one partial per z-plane computed
// independently, then combined in plane order. Results are bit-identical
// for any thread count.
template <class F>
double plane_sum(int nz, F&& per_plane) {
    std::vector<double> partial(std::size_t(nz), 0.0);
#pragma omp parallel for schedule(static)
    for (int z = 0; z < nz; ++z) partial[std::size_t(z)] = per_plane(z);
    double s = 0.0;
    for (double p : partial) s += p;
    return s;
}

}  // namespace rreg
