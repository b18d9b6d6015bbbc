#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <cstring>

#include "rreg/deform.hpp"
#include "rreg/synth.hpp"
#include "support.hpp"

using namespace rreg;
using testsup::smooth_field;

TEST_CASE("SS of the zero field is exactly the identity grid") {
    Shape3 s(8, 8, 8);
    VectorField v(s, FieldKind::velocity, 0.f);
    VectorField phi = scaling_and_squaring(v, SsConfig{7});
    VectorField id = identity_grid(s);
    CHECK(std::memcmp(phi.data.data(), id.data.data(), id.data.size() * sizeof(float)) == 0);
    CHECK(phi.kind == FieldKind::deformation);
}

TEST_CASE("SS of a constant velocity is a translation in the interior") {
    Shape3 s(16, 16, 16);
    VectorField v(s, FieldKind::velocity);
    const float c[3] = {1.25f, -0.75f, 0.5f};
    for (int ch = 0; ch < 3; ++ch)
        std::fill(v.channel(ch), v.channel(ch) + s.voxels(), c[ch]);
    VectorField phi = scaling_and_squaring(v, SsConfig{7});
    // Border clamping contaminates a band of roughly |c| + 4 voxels through
    // the squarings; margin 5 brings the error below 5e-6 (measured).
    for (int k = 5; k < 11; ++k)
        for (int j = 5; j < 11; ++j)
            for (int i = 5; i < 11; ++i) {
                CHECK(std::fabs(phi.at(0, i, j, k) - (i + 1.25)) < 1e-4);
                CHECK(std::fabs(phi.at(1, i, j, k) - (j - 0.75)) < 1e-4);
                CHECK(std::fabs(phi.at(2, i, j, k) - (k + 0.5)) < 1e-4);
            }
}

TEST_CASE("SS agrees with the small-step Euler flow oracle") {
    Shape3 s(32, 32, 32);
    VectorField v = synth::random_svf(s, 2.0f, 4, 1);
    VectorField ss = scaling_and_squaring(v, SsConfig{7});
    VectorField euler = testsup::euler_flow(v, 128);
    double max_err = 0.0;
    for (int c = 0; c < 3; ++c)
        for (int k = 6; k < 26; ++k)
            for (int j = 6; j < 26; ++j)
                for (int i = 6; i < 26; ++i)
                    max_err = std::max(max_err, std::fabs(double(ss.at(c, i, j, k)) -
                                                          double(euler.at(c, i, j, k))));
    CHECK(max_err < 0.08);  // measured 0.048 at amplitude 2
}

TEST_CASE("SS semigroup: N+1 steps equals composing two half-velocity flows") {
    Shape3 s(16, 16, 16);
    VectorField v = smooth_field<float>(s, FieldKind::velocity, 101, 2.0);
    VectorField half(s, FieldKind::velocity);
    for (std::size_t i = 0; i < v.data.size(); ++i) half.data[i] = 0.5f * v.data[i];

    VectorField a = scaling_and_squaring(v, SsConfig{5});
    VectorField h = scaling_and_squaring(half, SsConfig{4});
    VectorField b = compose(h, h);
    double max_err = 0.0;
    for (int c = 0; c < 3; ++c)
        for (int k = 4; k < 12; ++k)
            for (int j = 4; j < 12; ++j)
                for (int i = 4; i < 12; ++i)
                    max_err = std::max(max_err,
                                       std::fabs(double(a.at(c, i, j, k)) - double(b.at(c, i, j, k))));
    CHECK(max_err < 2e-3);
}

TEST_CASE("displacement_of") {
    Shape3 s(6, 7, 8);
    SUBCASE("identity gives zero displacement") {
        VectorField u = displacement_of(identity_grid(s));
        for (float x : u.data) CHECK(x == 0.f);
        CHECK(u.kind == FieldKind::displacement);
    }
    SUBCASE("round-trips with deformation_of") {
        VectorField u = smooth_field<float>(s, FieldKind::displacement, 7, 1.0);
        VectorField back = displacement_of(deformation_of(u));
        for (std::size_t i = 0; i < u.data.size(); ++i)
            CHECK(back.data[i] == doctest::Approx(u.data[i]).epsilon(1e-6));
    }
    SUBCASE("wrong kind throws") {
        VectorField u(s, FieldKind::displacement);
        CHECK_THROWS_AS(displacement_of(u), std::invalid_argument);
        CHECK_THROWS_AS(deformation_of(identity_grid(s)), std::invalid_argument);
    }
}

TEST_CASE("ss_vjp") {
    Shape3 s(6, 6, 6);

    SUBCASE("zero upstream gradient gives zero velocity gradient") {
        VectorField v = smooth_field<float>(s, FieldKind::velocity, 11, 1.0);
        VectorField g(s, FieldKind::deformation, 0.f);
        VectorField gv = ss_vjp(v, SsConfig{4}, g);
        for (float x : gv.data) CHECK(x == 0.f);
    }

    SUBCASE("N=0 passes gradients through unchanged") {
        VectorField v = smooth_field<float>(s, FieldKind::velocity, 12, 1.0);
        VectorField g(s, FieldKind::deformation);
        SplitMix rng(13);
        for (float& x : g.data) x = float(rng.next_range(-1.0, 1.0));
        VectorField gv = ss_vjp(v, SsConfig{0}, g);
        for (std::size_t i = 0; i < g.data.size(); ++i) CHECK(gv.data[i] == g.data[i]);
    }

    SUBCASE("matches central finite differences for N in {1,4,7}") {
        for (int steps : {1, 4, 7}) {
            CAPTURE(steps);
            FieldT<double> v = smooth_field<double>(s, FieldKind::velocity, 17, 0.8);
            FieldT<double> w(s, FieldKind::deformation);
            SplitMix rng(19);
            for (double& x : w.data) x = rng.next_range(-1.0, 1.0);

            auto objective = [&]() {
                FieldT<double> phi = scaling_and_squaring(v, SsConfig{steps});
                double acc = 0.0;
                for (std::size_t i = 0; i < phi.data.size(); ++i) acc += w.data[i] * phi.data[i];
                return acc;
            };
            FieldT<double> gv = ss_vjp(v, SsConfig{steps}, w);

            std::vector<double> analytic(gv.data.begin(), gv.data.end());
            testsup::FdReport rep =
                testsup::check_gradient(v.data, analytic, objective, 1e-5, 7);
            CAPTURE(rep.worst_index);
            CHECK(rep.max_rel_err < 1e-3);
        }
    }
}
