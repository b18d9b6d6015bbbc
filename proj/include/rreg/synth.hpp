#pragma once

#include <cstdint>

#include "rreg/deform.hpp"
#include "rreg/rng.hpp"
#include "rreg/volume.hpp"

namespace rreg::synth {

// Classic gradient-noise settings. base_frequency is the number of lattice
// cells spanned per axis.
struct PerlinConfig {
    int base_frequency = 4;
    int octaves = 1;
    float persistence = 0.5f;
    std::uint64_t seed = 0;
};

enum class IntensitySeedPolicy : std::uint8_t { per_pair, fixed_palette };

struct PairConfig {
    Shape3 shape{32, 32, 32};
    int channels = 16;             // shape count C
    float svf_amplitude = 3.0f;    // max velocity component, voxels
    int svf_frequency = 4;         // lattice cells for the velocity noise
    int ss_steps = 7;
    IntensitySeedPolicy intensity_seed_policy = IntensitySeedPolicy::per_pair;
    std::uint64_t palette_seed = 0;  // used when intensity_seed_policy == fixed_palette
    bool emit_labels = true;
    PerlinConfig shape_noise;  // frequency/octaves/persistence for the label channels
};

struct TrainingPair {
    ScalarVolume fixed;
    ScalarVolume moving;
    LabelVolume fixed_labels;
    LabelVolume moving_labels;
    VectorField phi_to_fixed;
    VectorField phi_to_moving;
    std::uint64_t seed = 0;
};

// Perlin gradient noise: hash-derived unit gradients on an integer lattice,
// quintic fade, trilinear blend of corner dot products; octaves summed with
// persistence weights.
ScalarVolume perlin3(const Shape3& shape, const PerlinConfig& cfg);

// argmax over C independent noise channels; ties go to the lowest channel.
LabelVolume multi_channel_labels(const Shape3& shape, int channels, std::uint64_t seed,
                                 const PerlinConfig& noise = {});

// One constant intensity per label, uniform on [0,1).
ScalarVolume assign_intensities(const LabelVolume& labels, std::uint64_t seed);

// Three independent noise channels scaled so max |component| == amplitude.
VectorField random_svf(const Shape3& shape, float amplitude, int frequency, std::uint64_t seed);

TrainingPair make_pair(const PairConfig& cfg, std::uint64_t seed);

// Restartable deterministic stream: pair i depends only on (cfg, base_seed, i).
class PairStream {
  public:
    PairStream(const PairConfig& cfg, std::uint64_t base_seed)
        : cfg_(cfg), base_seed_(base_seed) {}

    std::uint64_t pair_seed(std::uint64_t index) const { return seed_mix(base_seed_, index); }
    TrainingPair make(std::uint64_t index) const { return make_pair(cfg_, pair_seed(index)); }
    const PairConfig& config() const { return cfg_; }

  private:
    PairConfig cfg_;
    std::uint64_t base_seed_;
};

}  // namespace rreg::synth
