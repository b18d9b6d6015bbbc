#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include "rreg/metrics.hpp"
#include "rreg/synth.hpp"
#include "support.hpp"

using namespace rreg;
using namespace rreg::metrics;

TEST_CASE("dice") {
    Shape3 s(8, 8, 8);

    SUBCASE("identical volumes give 1 for every present label") {
        LabelVolume a = synth::multi_channel_labels(s, 4, 5);
        DiceReport rep = dice(a, a);
        CHECK(rep.mean == 1.0);
        for (double d : rep.per_label) CHECK(d == 1.0);
    }
    SUBCASE("disjoint masks give 0") {
        LabelVolume a(s, 2), b(s, 2);
        a.at(1, 1, 1) = 1;
        b.at(5, 5, 5) = 1;
        DiceReport rep = dice(a, b, {1});
        CHECK(rep.mean == 0.0);
    }
    SUBCASE("half-overlapping equal-size masks give 0.5") {
        LabelVolume a(s, 2), b(s, 2);
        // a: x in [0,4), b: x in [2,6) on one row -> overlap 2 of 4 each
        for (int i = 0; i < 4; ++i) a.at(i, 0, 0) = 1;
        for (int i = 2; i < 6; ++i) b.at(i, 0, 0) = 1;
        DiceReport rep = dice(a, b, {1});
        CHECK(rep.mean == doctest::Approx(0.5));
    }
    SUBCASE("symmetric in its arguments") {
        LabelVolume a = synth::multi_channel_labels(s, 5, 7);
        LabelVolume b = synth::multi_channel_labels(s, 5, 8);
        DiceReport r1 = dice(a, b);
        DiceReport r2 = dice(b, a);
        CHECK(r1.mean == r2.mean);
    }
    SUBCASE("labels absent from both are excluded from the mean") {
        LabelVolume a(s, 4), b(s, 4);  // only label 0 present
        DiceReport rep = dice(a, b);
        CHECK(rep.labels.size() == 1);
        CHECK(rep.mean == 1.0);
    }
    SUBCASE("shape mismatch throws") {
        LabelVolume a(s, 2), b(Shape3(4, 4, 4), 2);
        CHECK_THROWS_AS(dice(a, b), std::invalid_argument);
    }
}

TEST_CASE("ndv_percent") {
    Shape3 s(16, 16, 16);

    SUBCASE("identity gives exactly 0") {
        CHECK(ndv_percent(identity_grid(s)) == 0.0);
        CHECK(ndv_percent(identity_grid(s), NdvMode::forward_binary) == 0.0);
        CHECK(ndv_percent(identity_grid(s), NdvMode::central) == 0.0);
    }
    SUBCASE("constructed local fold is detected by all modes") {
        VectorField phi = identity_grid(s);
        // reflect x about 6 inside a small block: x -> 12 - x
        for (int k = 6; k < 10; ++k)
            for (int j = 6; j < 10; ++j)
                for (int i = 4; i < 9; ++i) phi.at(0, i, j, k) = float(12 - i);
        const double frac = ndv_percent(phi, NdvMode::forward_fractional);
        const double bin = ndv_percent(phi, NdvMode::forward_binary);
        const double cen = ndv_percent(phi, NdvMode::central);
        CHECK(frac > 0.0);
        CHECK(bin >= frac);  // binary counts whole voxels
        CHECK(cen > 0.0);

        // brute-force central-difference determinant oracle
        int folded = 0;
        for (int k = 1; k < 15; ++k)
            for (int j = 1; j < 15; ++j)
                for (int i = 1; i < 15; ++i) {
                    double J[3][3];
                    for (int d = 0; d < 3; ++d) {
                        const int di = d == 0, dj = d == 1, dk = d == 2;
                        for (int c = 0; c < 3; ++c)
                            J[c][d] = 0.5 * (double(phi.at(c, i + di, j + dj, k + dk)) -
                                             double(phi.at(c, i - di, j - dj, k - dk)));
                    }
                    const double det = J[0][0] * (J[1][1] * J[2][2] - J[1][2] * J[2][1]) -
                                       J[0][1] * (J[1][0] * J[2][2] - J[1][2] * J[2][0]) +
                                       J[0][2] * (J[1][0] * J[2][1] - J[1][1] * J[2][0]);
                    if (det <= 0.0) ++folded;
                }
        CHECK(cen == doctest::Approx(100.0 * folded / (14.0 * 14.0 * 14.0)).epsilon(1e-12));
    }
    SUBCASE("default synth deformations are clean (spot check)") {
        for (std::uint64_t seed : {3ull, 17ull, 40ull}) {
            VectorField v = synth::random_svf(Shape3(32, 32, 32), 3.0f, 4, seed);
            CHECK(ndv_percent(scaling_and_squaring(v, SsConfig{7})) == 0.0);
        }
    }
    SUBCASE("wrong kind throws") {
        VectorField u(s, FieldKind::displacement);
        CHECK_THROWS_AS(ndv_percent(u), std::invalid_argument);
    }
}

TEST_CASE("tre") {
    Shape3 s(16, 16, 16);

    SUBCASE("identity deformation reports the initial misalignment") {
        LandmarkSet fixed_lms, moving_lms;
        fixed_lms.points = {{4, 4, 4}, {8, 8, 8}};
        moving_lms.points = {{5, 4, 4}, {8, 11, 8}};
        TreReport rep = tre(moving_lms, fixed_lms, identity_grid(s));
        CHECK(rep.distances_mm[0] == doctest::Approx(1.0));
        CHECK(rep.distances_mm[1] == doctest::Approx(3.0));
        CHECK(rep.mean == doctest::Approx(2.0));
    }
    SUBCASE("landmarks pushed through the ground-truth field give ~0") {
        VectorField u = testsup::smooth_field<float>(s, FieldKind::displacement, 71, 1.5);
        VectorField phi = deformation_of(u);
        LandmarkSet fixed_lms, moving_lms;
        SplitMix rng(73);
        for (int p = 0; p < 10; ++p) {
            const double x = rng.next_range(3.0, 12.0);
            const double y = rng.next_range(3.0, 12.0);
            const double z = rng.next_range(3.0, 12.0);
            fixed_lms.points.push_back({x, y, z});
            TriCoord c = tri_coord(s, x, y, z);
            moving_lms.points.push_back({tri_value(phi.channel(0), s, c),
                                         tri_value(phi.channel(1), s, c),
                                         tri_value(phi.channel(2), s, c)});
        }
        TreReport rep = tre(moving_lms, fixed_lms, phi);
        CHECK(rep.mean < 0.1);
    }
    SUBCASE("swapping correspondence direction with the numerical inverse") {
        VectorField u = testsup::smooth_field<float>(s, FieldKind::displacement, 79, 1.2);
        VectorField phi = deformation_of(u);
        VectorField psi = testsup::invert_fixed_point(phi);
        LandmarkSet fixed_lms, moving_lms;
        SplitMix rng(83);
        for (int p = 0; p < 8; ++p) {
            const double x = rng.next_range(4.0, 11.0);
            const double y = rng.next_range(4.0, 11.0);
            const double z = rng.next_range(4.0, 11.0);
            fixed_lms.points.push_back({x, y, z});
            TriCoord c = tri_coord(s, x, y, z);
            moving_lms.points.push_back({tri_value(phi.channel(0), s, c),
                                         tri_value(phi.channel(1), s, c),
                                         tri_value(phi.channel(2), s, c)});
        }
        TreReport fwd = tre(moving_lms, fixed_lms, phi);
        TreReport swapped = tre(fixed_lms, moving_lms, psi);
        CHECK(fwd.mean < 0.05);
        CHECK(swapped.mean < 0.05);
    }
    SUBCASE("spacing 2mm doubles distances") {
        LandmarkSet fixed_lms, moving_lms;
        fixed_lms.points = {{4, 4, 4}};
        moving_lms.points = {{5, 4, 4}};
        TreReport r1 = tre(moving_lms, fixed_lms, identity_grid(s));
        fixed_lms.spacing = {2.f, 2.f, 2.f};
        TreReport r2 = tre(moving_lms, fixed_lms, identity_grid(s));
        CHECK(r2.mean == doctest::Approx(2.0 * r1.mean));
    }
    SUBCASE("count mismatch throws") {
        LandmarkSet a, b;
        a.points = {{1, 1, 1}};
        CHECK_THROWS_AS(tre(a, b, identity_grid(s)), std::invalid_argument);
    }
}
