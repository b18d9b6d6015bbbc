#include "rreg/synth.hpp"

#include <algorithm>
#include <cmath>

#include "rreg/par.hpp"
#include "rreg/rng.hpp"

namespace rreg::synth {

namespace {

// Ken Perlin's reference permutation; the seed enters through per-axis lattice
// offsets and a final xor, so each seed selects a different gradient layout.
constexpr std::uint8_t kPerm[256] = {
    151, 160, 137, 91,  90,  15,  131, 13,  201, 95,  96,  53,  194, 233, 7,   225, 140, 36,
    103, 30,  69,  142, 8,   99,  37,  240, 21,  10,  23,  190, 6,   148, 247, 120, 234, 75,
    0,   26,  197, 62,  94,  252, 219, 203, 117, 35,  11,  32,  57,  177, 33,  88,  237, 149,
    56,  87,  174, 20,  125, 136, 171, 168, 68,  175, 74,  165, 71,  134, 139, 48,  27,  166,
    77,  146, 158, 231, 83,  111, 229, 122, 60,  211, 133, 230, 220, 105, 92,  41,  55,  46,
    245, 40,  244, 102, 143, 54,  65,  25,  63,  161, 1,   216, 80,  73,  209, 76,  132, 187,
    208, 89,  18,  169, 200, 196, 135, 130, 116, 188, 159, 86,  164, 100, 109, 198, 173, 186,
    3,   64,  52,  217, 226, 250, 124, 123, 5,   202, 38,  147, 118, 126, 255, 82,  85,  212,
    207, 206, 59,  227, 47,  16,  58,  17,  182, 189, 28,  42,  223, 183, 170, 213, 119, 248,
    152, 2,   44,  154, 163, 70,  221, 153, 101, 155, 167, 43,  172, 9,   129, 22,  39,  253,
    19,  98,  108, 110, 79,  113, 224, 232, 178, 185, 112, 104, 218, 246, 97,  228, 251, 34,
    242, 193, 238, 210, 144, 12,  191, 179, 162, 241, 81,  51,  145, 235, 249, 14,  239, 107,
    49,  192, 214, 31,  181, 199, 106, 157, 184, 84,  204, 176, 115, 121, 50,  45,  127, 4,
    150, 254, 138, 236, 205, 93,  222, 114, 67,  29,  24,  72,  243, 141, 128, 195, 78,  66,
    215, 61,  156, 180};

struct LatticeHash {
    int ox, oy, oz;
    int fx;

    explicit LatticeHash(std::uint64_t seed) {
        const std::uint64_t h = splitmix64(seed);
        ox = int(h & 255);
        oy = int((h >> 8) & 255);
        oz = int((h >> 16) & 255);
        fx = int((h >> 24) & 255);
    }

    int operator()(int xi, int yi, int zi) const {
        const int a = kPerm[(xi + ox) & 255];
        const int b = kPerm[(a + yi + oy) & 255];
        return kPerm[(b + zi + oz) & 255] ^ fx;
    }
};

// Perlin's 12 edge gradients via the hash & 15 trick.
inline double grad_dot(int h, double x, double y, double z) {
    switch (h & 15) {
        case 0: return x + y;
        case 1: return -x + y;
        case 2: return x - y;
        case 3: return -x - y;
        case 4: return x + z;
        case 5: return -x + z;
        case 6: return x - z;
        case 7: return -x - z;
        case 8: return y + z;
        case 9: return -y + z;
        case 10: return y - z;
        case 11: return -y - z;
        case 12: return x + y;
        case 13: return -y + z;
        case 14: return -x + y;
        default: return -y - z;
    }
}

inline double fade(double t) { return t * t * t * (t * (t * 6.0 - 15.0) + 10.0); }

double perlin_at(const LatticeHash& hash, double x, double y, double z) {
    const int xi = int(std::floor(x));
    const int yi = int(std::floor(y));
    const int zi = int(std::floor(z));
    const double fx = x - xi, fy = y - yi, fz = z - zi;
    const double u = fade(fx), v = fade(fy), w = fade(fz);

    double corner[2][2][2];
    for (int dz = 0; dz < 2; ++dz)
        for (int dy = 0; dy < 2; ++dy)
            for (int dx = 0; dx < 2; ++dx)
                corner[dz][dy][dx] = grad_dot(hash(xi + dx, yi + dy, zi + dz), fx - dx, fy - dy,
                                              fz - dz);

    const double x00 = lerp1(corner[0][0][0], corner[0][0][1], u);
    const double x10 = lerp1(corner[0][1][0], corner[0][1][1], u);
    const double x01 = lerp1(corner[1][0][0], corner[1][0][1], u);
    const double x11 = lerp1(corner[1][1][0], corner[1][1][1], u);
    return lerp1(lerp1(x00, x10, v), lerp1(x01, x11, v), w);
}

}  // namespace

ScalarVolume perlin3(const Shape3& shape, const PerlinConfig& cfg) {
    require(cfg.base_frequency >= 1, "perlin3: base_frequency must be >= 1");
    require(cfg.octaves >= 1, "perlin3: octaves must be >= 1");
    require(cfg.persistence > 0.f && cfg.persistence <= 1.f, "perlin3: persistence out of (0,1]");

    ScalarVolume out(shape);
    std::vector<LatticeHash> hashes;
    hashes.reserve(std::size_t(cfg.octaves));
    for (int o = 0; o < cfg.octaves; ++o) hashes.emplace_back(seed_mix(cfg.seed, std::uint64_t(o)));

#pragma omp parallel for schedule(static)
    for (int k = 0; k < shape.nz; ++k)
        for (int j = 0; j < shape.ny; ++j) {
            std::size_t idx = shape.index(0, j, k);
            for (int i = 0; i < shape.nx; ++i, ++idx) {
                double value = 0.0;
                double amp = 1.0;
                double freq = double(cfg.base_frequency);
                for (int o = 0; o < cfg.octaves; ++o) {
                    const double x = double(i) * freq / double(shape.nx);
                    const double y = double(j) * freq / double(shape.ny);
                    const double z = double(k) * freq / double(shape.nz);
                    value += amp * perlin_at(hashes[std::size_t(o)], x, y, z);
                    amp *= double(cfg.persistence);
                    freq *= 2.0;
                }
                out.data[idx] = float(value);
            }
        }
    return out;
}

LabelVolume multi_channel_labels(const Shape3& shape, int channels, std::uint64_t seed,
                                 const PerlinConfig& noise) {
    require(channels >= 2, "multi_channel_labels: need at least 2 channels");
    LabelVolume labels(shape, channels);
    std::vector<float> best(shape.voxels(), 0.f);
    const std::int64_t n = std::int64_t(shape.voxels());

    for (int c = 0; c < channels; ++c) {
        PerlinConfig cfg = noise;
        cfg.seed = seed_mix(seed, std::uint64_t(c));
        ScalarVolume chan = perlin3(shape, cfg);
#pragma omp parallel for schedule(static)
        for (std::int64_t v = 0; v < n; ++v) {
            if (c == 0 || chan.data[v] > best[v]) {
                best[v] = chan.data[v];
                labels.data[v] = std::uint16_t(c);
            }
        }
    }
    return labels;
}

ScalarVolume assign_intensities(const LabelVolume& labels, std::uint64_t seed) {
    std::vector<float> table(std::size_t(labels.label_count));
    for (int l = 0; l < labels.label_count; ++l) {
        SplitMix rng(seed_mix(seed, std::uint64_t(l)));
        table[std::size_t(l)] = float(rng.next_unit());
    }
    ScalarVolume out(labels.shape);
    const std::int64_t n = std::int64_t(labels.shape.voxels());
#pragma omp parallel for schedule(static)
    for (std::int64_t v = 0; v < n; ++v) out.data[v] = table[labels.data[v]];
    return out;
}

VectorField random_svf(const Shape3& shape, float amplitude, int frequency, std::uint64_t seed) {
    require(amplitude >= 0.f, "random_svf: amplitude must be >= 0");
    VectorField v(shape, FieldKind::velocity);
    if (amplitude == 0.f) return v;

    for (int c = 0; c < 3; ++c) {
        PerlinConfig cfg;
        cfg.base_frequency = frequency;
        cfg.seed = seed_mix(seed, std::uint64_t(c) + 101);
        ScalarVolume chan = perlin3(shape, cfg);
        std::copy(chan.data.begin(), chan.data.end(), v.channel(c));
    }

    float max_abs = 0.f;
    for (float x : v.data) max_abs = std::max(max_abs, std::fabs(x));
    if (max_abs == 0.f) return v;
    const float scale = amplitude / max_abs;
    const std::int64_t n3 = std::int64_t(v.data.size());
#pragma omp parallel for schedule(static)
    for (std::int64_t i = 0; i < n3; ++i) v.data[i] *= scale;
    return v;
}

TrainingPair make_pair(const PairConfig& cfg, std::uint64_t seed) {
    require(cfg.channels >= 2, "make_pair: channels must be >= 2");

    TrainingPair pair;
    pair.seed = seed;

    LabelVolume labels =
        multi_channel_labels(cfg.shape, cfg.channels, seed_mix(seed, 1), cfg.shape_noise);
    const std::uint64_t intensity_seed =
        cfg.intensity_seed_policy == IntensitySeedPolicy::fixed_palette ? cfg.palette_seed
                                                                        : seed_mix(seed, 2);
    ScalarVolume image = assign_intensities(labels, intensity_seed);

    VectorField va = random_svf(cfg.shape, cfg.svf_amplitude, cfg.svf_frequency, seed_mix(seed, 3));
    VectorField vb = random_svf(cfg.shape, cfg.svf_amplitude, cfg.svf_frequency, seed_mix(seed, 4));
    SsConfig ss{cfg.ss_steps};
    pair.phi_to_fixed = scaling_and_squaring(va, ss);
    pair.phi_to_moving = scaling_and_squaring(vb, ss);

    pair.fixed = warp_scalar(image, pair.phi_to_fixed);
    pair.moving = warp_scalar(image, pair.phi_to_moving);
    if (cfg.emit_labels) {
        pair.fixed_labels = warp_labels(labels, pair.phi_to_fixed);
        pair.moving_labels = warp_labels(labels, pair.phi_to_moving);
    }
    return pair;
}

}  // namespace rreg::synth
