#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <cstring>
#include <set>

#include "rreg/metrics.hpp"
#include "rreg/synth.hpp"
#include "support.hpp"

using namespace rreg;
using namespace rreg::synth;

TEST_CASE("perlin3 basics") {
    Shape3 s(32, 32, 32);
    PerlinConfig cfg;
    cfg.seed = 7;

    SUBCASE("zero at lattice points for a single octave") {
        ScalarVolume v = perlin3(s, cfg);
        // freq 4 on 32 voxels puts lattice points every 8 voxels
        for (int k = 0; k < 32; k += 8)
            for (int j = 0; j < 32; j += 8)
                for (int i = 0; i < 32; i += 8) CHECK(v.at(i, j, k) == 0.f);
    }
    SUBCASE("deterministic in the seed") {
        ScalarVolume a = perlin3(s, cfg);
        ScalarVolume b = perlin3(s, cfg);
        CHECK(std::memcmp(a.data.data(), b.data.data(), a.data.size() * sizeof(float)) == 0);
        cfg.seed = 8;
        ScalarVolume c = perlin3(s, cfg);
        CHECK(std::memcmp(a.data.data(), c.data.data(), a.data.size() * sizeof(float)) != 0);
    }
    SUBCASE("empirical range and spread") {
        ScalarVolume v = perlin3(s, cfg);
        float lo = 1e9f, hi = -1e9f;
        double sum = 0.0, sum2 = 0.0;
        for (float x : v.data) {
            lo = std::min(lo, x);
            hi = std::max(hi, x);
            sum += x;
            sum2 += double(x) * double(x);
        }
        CHECK(lo >= -1.f);
        CHECK(hi <= 1.f);
        const double n = double(v.data.size());
        const double stddev = std::sqrt(sum2 / n - (sum / n) * (sum / n));
        CHECK(stddev > 0.05);
    }
    SUBCASE("octaves add finer detail deterministically") {
        cfg.octaves = 3;
        ScalarVolume a = perlin3(s, cfg);
        ScalarVolume b = perlin3(s, cfg);
        CHECK(std::memcmp(a.data.data(), b.data.data(), a.data.size() * sizeof(float)) == 0);
    }
    SUBCASE("invalid config throws") {
        cfg.base_frequency = 0;
        CHECK_THROWS_AS(perlin3(s, cfg), std::invalid_argument);
    }
}

TEST_CASE("multi_channel_labels") {
    Shape3 s(32, 32, 32);

    SUBCASE("labels lie in [0, C)") {
        LabelVolume l = multi_channel_labels(s, 16, 5);
        for (auto x : l.data) CHECK(x < 16);
        CHECK(l.label_count == 16);
    }
    SUBCASE("every channel wins somewhere for C=16 (statistically over 20 seeds)") {
        int empty_total = 0;
        for (std::uint64_t seed = 0; seed < 20; ++seed) {
            LabelVolume l = multi_channel_labels(s, 16, seed);
            std::set<std::uint16_t> present(l.data.begin(), l.data.end());
            empty_total += 16 - int(present.size());
        }
        // rare empty labels allowed; across 20 seeds nearly all 320 slots fill
        CHECK(empty_total <= 6);
    }
    SUBCASE("C < 2 throws") {
        CHECK_THROWS_AS(multi_channel_labels(s, 1, 0), std::invalid_argument);
    }
}

TEST_CASE("assign_intensities") {
    Shape3 s(8, 8, 8);
    SUBCASE("single-label map gives a constant image") {
        LabelVolume l(s, 1);
        ScalarVolume img = assign_intensities(l, 3);
        for (float x : img.data) CHECK(x == img.data[0]);
        CHECK(img.data[0] >= 0.f);
        CHECK(img.data[0] < 1.f);
    }
    SUBCASE("voxels sharing a label share a value exactly; at most K distinct values") {
        LabelVolume l = multi_channel_labels(s, 4, 9);
        ScalarVolume img = assign_intensities(l, 3);
        std::set<float> values(img.data.begin(), img.data.end());
        CHECK(values.size() <= 4);
        for (std::size_t v = 0; v < l.data.size(); ++v)
            for (std::size_t w = v + 1; w < l.data.size(); w += 97)
                if (l.data[v] == l.data[w]) CHECK(img.data[v] == img.data[w]);
    }
}

TEST_CASE("random_svf") {
    Shape3 s(16, 16, 16);
    SUBCASE("amplitude 0 gives the zero field") {
        VectorField v = random_svf(s, 0.f, 4, 1);
        for (float x : v.data) CHECK(x == 0.f);
    }
    SUBCASE("max abs component equals the amplitude after scaling") {
        VectorField v = random_svf(s, 2.5f, 4, 1);
        float max_abs = 0.f;
        for (float x : v.data) max_abs = std::max(max_abs, std::fabs(x));
        CHECK(max_abs == doctest::Approx(2.5).epsilon(1e-6));
    }
}

TEST_CASE("default SVFs integrate to diffeomorphic deformations (50 seeds)") {
    Shape3 s(32, 32, 32);
    for (std::uint64_t seed = 0; seed < 50; ++seed) {
        VectorField v = random_svf(s, 3.0f, 4, seed);
        VectorField phi = scaling_and_squaring(v, SsConfig{7});
        CAPTURE(seed);
        CHECK(metrics::ndv_percent(phi) == 0.0);
    }
}

TEST_CASE("make_pair") {
    PairConfig cfg;
    cfg.shape = Shape3(16, 16, 16);
    cfg.channels = 8;

    SUBCASE("zero amplitude makes fixed and moving bitwise equal") {
        PairConfig zero = cfg;
        zero.svf_amplitude = 0.f;
        TrainingPair p = make_pair(zero, 11);
        CHECK(std::memcmp(p.fixed.data.data(), p.moving.data.data(),
                          p.fixed.data.size() * sizeof(float)) == 0);
        CHECK(p.fixed_labels.data == p.moving_labels.data);
    }
    SUBCASE("same seed reproduces the pair exactly") {
        TrainingPair a = make_pair(cfg, 12);
        TrainingPair b = make_pair(cfg, 12);
        CHECK(a.fixed.data == b.fixed.data);
        CHECK(a.moving.data == b.moving.data);
        CHECK(a.fixed_labels.data == b.fixed_labels.data);
        CHECK(a.phi_to_fixed.data == b.phi_to_fixed.data);
    }
    SUBCASE("the deformation actually moves shapes: Dice < 1") {
        TrainingPair p = make_pair(cfg, 13);
        metrics::DiceReport rep = metrics::dice(p.fixed_labels, p.moving_labels);
        CHECK(rep.mean < 1.0);
        CHECK(rep.mean > 0.2);  // same source image, moderate deformation
    }
    SUBCASE("images take at most C distinct values") {
        TrainingPair p = make_pair(cfg, 14);
        std::set<float> values(p.fixed.data.begin(), p.fixed.data.end());
        // warping interpolates, but label regions dominate; the source image
        // itself has at most C values
        LabelVolume labels = multi_channel_labels(cfg.shape, cfg.channels, seed_mix(14, 1),
                                                  cfg.shape_noise);
        ScalarVolume img = assign_intensities(labels, seed_mix(14, 2));
        std::set<float> src_values(img.data.begin(), img.data.end());
        CHECK(src_values.size() <= std::size_t(cfg.channels));
    }
    SUBCASE("intensity consistency: constant intensity per label region in source") {
        LabelVolume labels = multi_channel_labels(cfg.shape, cfg.channels, 21, cfg.shape_noise);
        ScalarVolume img = assign_intensities(labels, 22);
        std::vector<float> seen(std::size_t(cfg.channels), -1.f);
        for (std::size_t v = 0; v < labels.data.size(); ++v) {
            float& sv = seen[labels.data[v]];
            if (sv < 0.f)
                sv = img.data[v];
            else
                CHECK(sv == img.data[v]);
        }
    }
}

TEST_CASE("pair_stream") {
    PairConfig cfg;
    cfg.shape = Shape3(16, 16, 16);
    cfg.channels = 4;
    PairStream stream(cfg, 99);

    SUBCASE("restartable and order-deterministic") {
        TrainingPair a0 = stream.make(0);
        TrainingPair a5 = stream.make(5);
        PairStream again(cfg, 99);
        CHECK(again.make(0).fixed.data == a0.fixed.data);
        CHECK(again.make(5).fixed.data == a5.fixed.data);
    }
    SUBCASE("disjoint index ranges give disjoint seeds") {
        std::set<std::uint64_t> seeds;
        for (std::uint64_t i = 0; i < 1000; ++i) seeds.insert(stream.pair_seed(i));
        CHECK(seeds.size() == 1000);
    }
}
