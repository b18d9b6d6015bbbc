#pragma once

#include <cstdint>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "rreg/metrics.hpp"
#include "rreg/net.hpp"
#include "rreg/synth.hpp"

namespace rreg::train {

struct AdamConfig {
    double lr = 1e-3;
    double beta1 = 0.9;
    double beta2 = 0.999;
    double epsilon = 1e-8;
};

template <class T>
struct AdamState {
    AdamConfig cfg;
    std::int64_t step = 0;
    std::vector<T> m1;
    std::vector<T> m2;

    AdamState(std::size_t n, const AdamConfig& c) : cfg(c), m1(n, T(0)), m2(n, T(0)) {}
};

// Standard bias-corrected Adam update, elementwise in double.
template <class T>
void adam_step(std::span<T> params, std::span<const T> grads, AdamState<T>& state);

enum class Phase : std::uint8_t { pretrain, finetune, scratch };

struct TrainConfig {
    Phase phase = Phase::pretrain;
    int epochs = 4;
    int pairs_per_epoch = 200;  // 3000 at paper scale
    double data_fraction = 1.0;
    std::uint64_t seed = 1;
    loss::SimilarityKind loss_variant = loss::SimilarityKind::ncc;
    double eta = 1e-7;   // 0 disables the KL term
    double lambda = 1.0;
    double lr_pretrain = 4e-4;
    double lr_finetune = 1e-4;
    int eval_every = 1;  // epochs between validation passes
    int val_pairs = 8;   // held-out random pairs for pretraining validation
    int ncc_window = 5;
    bool augment_flip = false;
    std::string out_dir;  // empty: no checkpoints/curves written
};

struct CurveLog {
    std::vector<std::pair<std::int64_t, double>> train_loss;  // (step, loss)
    std::vector<double> train_sim_reg;  // similarity + lambda*reg component per step
    std::vector<std::pair<int, double>> val_dice;  // (epoch, mean validation Dice)
    double seconds_per_pair = 0.0;  // informational; not part of determinism contracts

    std::vector<double> epoch_mean_loss(int pairs_per_epoch) const;
    std::vector<double> epoch_mean_sim_reg(int pairs_per_epoch) const;
};

// Minimize the pretraining objective on streamed random pairs. The model is
// updated in place; checkpoints and curves go to cfg.out_dir when set.
CurveLog pretrain(net::Model<float>& model, const synth::PairConfig& pair_cfg,
                  const TrainConfig& cfg);

// ------------------------------------------------------------- downstream

// Desk-scale downstream family: one base anatomy deformed per subject, with
// per-region linear intensity gradients and mild additive noise. Distinct
// from the pretraining distribution (different shape frequency, non-constant
// intensities, noise).
struct DownstreamConfig {
    Shape3 shape{32, 32, 32};
    int n_train = 64;
    int n_val = 16;
    int n_test = 16;
    int channels = 16;
    int label_frequency = 5;  // pretraining uses 4
    float svf_amplitude = 2.5f;
    int svf_frequency = 4;
    int ss_steps = 7;
    float noise_sigma = 0.02f;
    float gradient_strength = 0.6f;
    std::uint64_t seed = 2024;
};

struct Subject {
    ScalarVolume image;
    LabelVolume labels;
};

struct DownstreamDataset {
    DownstreamConfig cfg;
    std::vector<Subject> train;  // train[0] is the atlas
    std::vector<Subject> val;
    std::vector<Subject> test;

    const Subject& atlas() const { return train.front(); }
};

DownstreamDataset make_downstream(const DownstreamConfig& cfg);

// Atlas-to-subject fine-tuning. Optional pretrained source model supplies
// encoder weights; nothing is frozen.
CurveLog finetune(net::Model<float>& backbone, const DownstreamDataset& data,
                  const TrainConfig& cfg, const net::Model<float>* encoder_source = nullptr);

// Mean Dice of warped atlas labels against subject labels over a split.
double split_dice(net::Model<float>& model, const Subject& atlas,
                  const std::vector<Subject>& subjects);
// Mean Dice of the unwarped atlas labels (the "Initial" column semantics).
double identity_dice(const Subject& atlas, const std::vector<Subject>& subjects);

// Backbone trained on random pairs only (never shown downstream data).
CurveLog train_on_random_only(net::Model<float>& backbone, const synth::PairConfig& pair_cfg,
                              const TrainConfig& cfg);

// ------------------------------------------------------ instance optimization

struct InstanceOptConfig {
    int iterations = 100;
    double lr = 0.1;
    double lambda = 1.0;
    int ncc_window = 5;
    int ss_steps = 7;
};

struct InstanceOptResult {
    VectorField phi;
    std::vector<double> losses;
};

// Directly optimize a stationary velocity field with Adam on the fine-tuning
// loss; optionally initialized from a model prediction.
InstanceOptResult instance_optimize(const ScalarVolume& fixed, const ScalarVolume& moving,
                                    const InstanceOptConfig& cfg,
                                    const VectorField* initial_velocity = nullptr);

// ---------------------------------------------------------------- step timer

struct StepTiming {
    double median_seconds = 0.0;
    double mean_seconds = 0.0;
    double stddev_seconds = 0.0;
};

// Median wall-clock of full training steps (forward + loss + backward + Adam)
// on a fixed synthetic pair. The model is copied; the caller's instance is
// not mutated.
StepTiming step_timer(const net::Model<float>& model, const Shape3& shape, int steps = 20);

// ------------------------------------------------------------------ manifest

void write_manifest(const std::string& path, const std::vector<std::pair<std::string, std::string>>& entries);

extern template void adam_step<float>(std::span<float>, std::span<const float>, AdamState<float>&);
extern template void adam_step<double>(std::span<double>, std::span<const double>, AdamState<double>&);

}  // namespace rreg::train
