#pragma once

#include <array>
#include <vector>

#include "rreg/volume.hpp"

namespace rreg::metrics {

struct DiceReport {
    std::vector<int> labels;        // labels included in the mean
    std::vector<double> per_label;  // aligned with labels
    double mean = 0.0;
};

// Per-label overlap 2|a=L & b=L| / (|a=L| + |b=L|). Labels absent from both
// volumes are excluded from the mean.
DiceReport dice(const LabelVolume& a, const LabelVolume& b);
DiceReport dice(const LabelVolume& a, const LabelVolume& b, const std::vector<int>& labels);

enum class NdvMode {
    forward_fractional,  // eight one-sided corner Jacobians, fractional count
    forward_binary,      // same scheme set, a voxel counts fully if any det <= 0
    central              // single central-difference determinant per voxel
};

// Percentage of non-diffeomorphic volume over interior voxels.
double ndv_percent(const VectorField& phi, NdvMode mode = NdvMode::forward_fractional);

struct LandmarkSet {
    std::vector<std::array<double, 3>> points;  // voxel coordinates
    Spacing spacing{1.f, 1.f, 1.f};
};

struct TreReport {
    std::vector<double> distances_mm;
    double mean = 0.0;
    double stddev = 0.0;
};

// Landmarks live in fixed space and are mapped through phi into moving space;
// distances are scaled per-axis by the landmark spacing.
TreReport tre(const LandmarkSet& moving_lms, const LandmarkSet& fixed_lms, const VectorField& phi);

}  // namespace rreg::metrics
