#include "rreg/train.hpp"

#include <algorithm>
#include <chrono>
#include <cmath>
#include <filesystem>
#include <fstream>
#include <numeric>

#include "rreg/io.hpp"

namespace rreg::train {

template <class T>
void adam_step(std::span<T> params, std::span<const T> grads, AdamState<T>& state) {
    if (params.size() != grads.size() || params.size() != state.m1.size())
        throw std::invalid_argument("adam_step: buffer length mismatch");
    state.step += 1;
    const double b1 = state.cfg.beta1;
    const double b2 = state.cfg.beta2;
    const double c1 = 1.0 - std::pow(b1, double(state.step));
    const double c2 = 1.0 - std::pow(b2, double(state.step));
    const double lr = state.cfg.lr;
    const double eps = state.cfg.epsilon;
    const std::int64_t n = std::int64_t(params.size());
#pragma omp parallel for schedule(static)
    for (std::int64_t i = 0; i < n; ++i) {
        const std::size_t u = std::size_t(i);
        const double g = double(grads[u]);
        const double m = b1 * double(state.m1[u]) + (1.0 - b1) * g;
        const double v = b2 * double(state.m2[u]) + (1.0 - b2) * g * g;
        state.m1[u] = T(m);
        state.m2[u] = T(v);
        const double mhat = m / c1;
        const double vhat = v / c2;
        params[u] = T(double(params[u]) - lr * mhat / (std::sqrt(vhat) + eps));
    }
}

template void adam_step<float>(std::span<float>, std::span<const float>, AdamState<float>&);
template void adam_step<double>(std::span<double>, std::span<const double>, AdamState<double>&);

std::vector<double> CurveLog::epoch_mean_loss(int pairs_per_epoch) const {
    std::vector<double> means;
    for (std::size_t start = 0; start + std::size_t(pairs_per_epoch) <= train_loss.size();
         start += std::size_t(pairs_per_epoch)) {
        double acc = 0.0;
        for (int i = 0; i < pairs_per_epoch; ++i) acc += train_loss[start + std::size_t(i)].second;
        means.push_back(acc / pairs_per_epoch);
    }
    return means;
}

std::vector<double> CurveLog::epoch_mean_sim_reg(int pairs_per_epoch) const {
    std::vector<double> means;
    for (std::size_t start = 0; start + std::size_t(pairs_per_epoch) <= train_sim_reg.size();
         start += std::size_t(pairs_per_epoch)) {
        double acc = 0.0;
        for (int i = 0; i < pairs_per_epoch; ++i) acc += train_sim_reg[start + std::size_t(i)];
        means.push_back(acc / pairs_per_epoch);
    }
    return means;
}

namespace {

void write_run_outputs(const std::string& out_dir, const CurveLog& log,
                       const net::Model<float>& last, const net::Model<float>* best) {
    if (out_dir.empty()) return;
    std::filesystem::create_directories(out_dir);
    io::write_loss_csv(out_dir + "/loss.csv", log.train_loss);
    io::write_val_csv(out_dir + "/val_dice.csv", log.val_dice);
    net::save_checkpoint(last, out_dir + "/ckpt_last.rregckpt");
    if (best) net::save_checkpoint(*best, out_dir + "/ckpt_best.rregckpt");
}

double pretrain_val_dice(net::Model<float>& model, const synth::PairConfig& pair_cfg,
                         std::uint64_t seed, int val_pairs) {
    synth::PairConfig cfg = pair_cfg;
    cfg.emit_labels = true;
    synth::PairStream stream(cfg, seed_mix(seed, 0x76616cULL));
    double acc = 0.0;
    for (int i = 0; i < val_pairs; ++i) {
        synth::TrainingPair pair = stream.make(std::uint64_t(i));
        net::PretrainOutputs<float> out = model.forward_pretrain(pair.fixed, pair.moving, false);
        LabelVolume warped = warp_labels(pair.moving_labels, out.phi);
        acc += metrics::dice(warped, pair.fixed_labels).mean;
    }
    return acc / val_pairs;
}

ScalarVolume flip_volume(const ScalarVolume& v, int axis) {
    ScalarVolume out(v.shape);
    out.spacing = v.spacing;
    const Shape3 s = v.shape;
    for (int k = 0; k < s.nz; ++k)
        for (int j = 0; j < s.ny; ++j)
            for (int i = 0; i < s.nx; ++i) {
                const int fi = axis == 0 ? s.nx - 1 - i : i;
                const int fj = axis == 1 ? s.ny - 1 - j : j;
                const int fk = axis == 2 ? s.nz - 1 - k : k;
                out.at(i, j, k) = v.at(fi, fj, fk);
            }
    return out;
}

std::vector<std::size_t> shuffled_indices(std::size_t n, std::uint64_t seed) {
    std::vector<std::size_t> idx(n);
    std::iota(idx.begin(), idx.end(), std::size_t(0));
    SplitMix rng(seed);
    for (std::size_t i = n; i > 1; --i) {
        const std::size_t j = std::size_t(rng.next_u64() % i);
        std::swap(idx[i - 1], idx[j]);
    }
    return idx;
}

}  // namespace

CurveLog pretrain(net::Model<float>& model, const synth::PairConfig& pair_cfg,
                  const TrainConfig& cfg) {
    require(model.config().mode == net::ModelMode::pretrain,
            "pretrain: model must be in pretrain mode");
    require(cfg.epochs > 0 && cfg.pairs_per_epoch > 0, "pretrain: positive counts required");

    synth::PairConfig data_cfg = pair_cfg;
    data_cfg.emit_labels = (cfg.loss_variant == loss::SimilarityKind::dice);
    synth::PairStream stream(data_cfg, cfg.seed);

    loss::LossWeights weights;
    weights.lambda = cfg.lambda;
    weights.eta = cfg.eta;
    loss::NccConfig ncc;
    ncc.window = cfg.ncc_window;
    const SsConfig ss{model.config().ss_steps};

    AdamConfig adam_cfg;
    adam_cfg.lr = cfg.lr_pretrain;
    AdamState<float> adam(model.param_count(), adam_cfg);

    CurveLog log;
    net::Model<float> best = model;
    double best_dice = -1.0;
    std::int64_t step = 0;
    const auto t0 = std::chrono::steady_clock::now();

    for (int epoch = 0; epoch < cfg.epochs; ++epoch) {
        for (int i = 0; i < cfg.pairs_per_epoch; ++i) {
            synth::TrainingPair pair =
                stream.make(std::uint64_t(epoch) * std::uint64_t(cfg.pairs_per_epoch) +
                            std::uint64_t(i));
            net::PretrainOutputs<float> outs = model.forward_pretrain(pair.fixed, pair.moving);
            const LabelVolume* fl =
                cfg.loss_variant == loss::SimilarityKind::dice ? &pair.fixed_labels : nullptr;
            const LabelVolume* ml =
                cfg.loss_variant == loss::SimilarityKind::dice ? &pair.moving_labels : nullptr;
            loss::PretrainResult<float> res =
                loss::pretrain_loss(outs.ensemble, outs.decoders, pair.fixed, pair.moving, fl, ml,
                                    weights, ncc, ss, cfg.loss_variant);
            model.backward_pretrain(res.grads);
            adam_step<float>(model.params().flat, model.params().flat_grad, adam);
            log.train_loss.emplace_back(step++, res.value);
            log.train_sim_reg.push_back(res.similarity + cfg.lambda * res.regularizer);
        }
        if ((epoch + 1) % cfg.eval_every == 0 || epoch + 1 == cfg.epochs) {
            const double vd = pretrain_val_dice(model, data_cfg, cfg.seed, cfg.val_pairs);
            log.val_dice.emplace_back(epoch + 1, vd);
            if (vd > best_dice) {
                best_dice = vd;
                best = model;
            }
        }
    }
    const auto t1 = std::chrono::steady_clock::now();
    log.seconds_per_pair = std::chrono::duration<double>(t1 - t0).count() /
                           double(std::int64_t(cfg.epochs) * cfg.pairs_per_epoch);
    write_run_outputs(cfg.out_dir, log, model, &best);
    return log;
}

// ------------------------------------------------------------- downstream

DownstreamDataset make_downstream(const DownstreamConfig& cfg) {
    require(cfg.n_train >= 2 && cfg.n_val >= 1 && cfg.n_test >= 1,
            "make_downstream: split sizes too small");
    DownstreamDataset ds;
    ds.cfg = cfg;

    synth::PerlinConfig shape_noise;
    shape_noise.base_frequency = cfg.label_frequency;
    LabelVolume base = synth::multi_channel_labels(cfg.shape, cfg.channels, seed_mix(cfg.seed, 1),
                                                   shape_noise);

    const int total = cfg.n_train + cfg.n_val + cfg.n_test;
    for (int i = 0; i < total; ++i) {
        const std::uint64_t subject_seed = seed_mix(cfg.seed, 1000 + std::uint64_t(i));

        // per-region linear intensity gradients
        ScalarVolume rendered(cfg.shape);
        {
            std::vector<float> base_val(std::size_t(cfg.channels));
            std::vector<std::array<float, 3>> grad_dir(std::size_t(cfg.channels));
            SplitMix rng(seed_mix(subject_seed, 2));
            for (int l = 0; l < cfg.channels; ++l) {
                base_val[std::size_t(l)] = float(rng.next_unit());
                for (int d = 0; d < 3; ++d)
                    grad_dir[std::size_t(l)][std::size_t(d)] =
                        float(cfg.gradient_strength * rng.next_range(-1.0, 1.0));
            }
            const Shape3 s = cfg.shape;
            for (int k = 0; k < s.nz; ++k)
                for (int j = 0; j < s.ny; ++j)
                    for (int i2 = 0; i2 < s.nx; ++i2) {
                        const int l = base.at(i2, j, k);
                        const float x = float(i2) / float(s.nx) - 0.5f;
                        const float y = float(j) / float(s.ny) - 0.5f;
                        const float z = float(k) / float(s.nz) - 0.5f;
                        const auto& g = grad_dir[std::size_t(l)];
                        rendered.at(i2, j, k) = std::clamp(
                            base_val[std::size_t(l)] + g[0] * x + g[1] * y + g[2] * z, 0.f, 1.f);
                    }
        }

        VectorField v = synth::random_svf(cfg.shape, cfg.svf_amplitude, cfg.svf_frequency,
                                          seed_mix(subject_seed, 3));
        VectorField psi = scaling_and_squaring(v, SsConfig{cfg.ss_steps});

        Subject subj;
        subj.image = warp_scalar(rendered, psi);
        subj.labels = warp_labels(base, psi);

        if (cfg.noise_sigma > 0.f) {
            SplitMix rng(seed_mix(subject_seed, 4));
            for (float& x : subj.image.data)
                x = std::clamp(x + float(cfg.noise_sigma * rng.next_normal()), 0.f, 1.f);
        }

        if (i < cfg.n_train)
            ds.train.push_back(std::move(subj));
        else if (i < cfg.n_train + cfg.n_val)
            ds.val.push_back(std::move(subj));
        else
            ds.test.push_back(std::move(subj));
    }
    return ds;
}

double split_dice(net::Model<float>& model, const Subject& atlas,
                  const std::vector<Subject>& subjects) {
    double acc = 0.0;
    for (const Subject& subj : subjects) {
        net::BackboneOutputs<float> out =
            model.forward_backbone(subj.image, atlas.image, false);
        LabelVolume warped = warp_labels(atlas.labels, out.phi);
        acc += metrics::dice(warped, subj.labels).mean;
    }
    return subjects.empty() ? 0.0 : acc / double(subjects.size());
}

double identity_dice(const Subject& atlas, const std::vector<Subject>& subjects) {
    double acc = 0.0;
    for (const Subject& subj : subjects) acc += metrics::dice(atlas.labels, subj.labels).mean;
    return subjects.empty() ? 0.0 : acc / double(subjects.size());
}

CurveLog finetune(net::Model<float>& backbone, const DownstreamDataset& data,
                  const TrainConfig& cfg, const net::Model<float>* encoder_source) {
    require(backbone.config().mode == net::ModelMode::backbone,
            "finetune: model must be in backbone mode");
    require(!data.train.empty() && data.train.size() >= 2, "finetune: empty dataset");
    require(cfg.data_fraction > 0.0 && cfg.data_fraction <= 1.0,
            "finetune: data_fraction out of (0,1]");

    if (encoder_source) net::transfer_encoder(*encoder_source, backbone);

    // deterministic prefix of a seed-shuffled index list (atlas excluded)
    const std::size_t n_pairs = data.train.size() - 1;
    std::vector<std::size_t> order = shuffled_indices(n_pairs, seed_mix(cfg.seed, 0xf2acULL));
    const std::size_t selected =
        std::max<std::size_t>(1, std::size_t(std::llround(cfg.data_fraction * double(n_pairs))));
    order.resize(std::min(selected, n_pairs));

    loss::NccConfig ncc;
    ncc.window = cfg.ncc_window;
    AdamConfig adam_cfg;
    adam_cfg.lr = cfg.lr_finetune;
    AdamState<float> adam(backbone.param_count(), adam_cfg);

    CurveLog log;
    net::Model<float> best = backbone;
    double best_dice = -1.0;
    std::int64_t step = 0;
    const Subject& atlas = data.atlas();
    const auto t0 = std::chrono::steady_clock::now();

    for (int epoch = 0; epoch < cfg.epochs; ++epoch) {
        std::vector<std::size_t> epoch_order = order;
        {
            SplitMix rng(seed_mix(cfg.seed, 0xe70000ULL + std::uint64_t(epoch)));
            for (std::size_t i = epoch_order.size(); i > 1; --i)
                std::swap(epoch_order[i - 1], epoch_order[std::size_t(rng.next_u64() % i)]);
        }
        for (std::size_t oi : epoch_order) {
            const Subject& subj = data.train[oi + 1];
            ScalarVolume fixed = subj.image;
            ScalarVolume moving = atlas.image;
            if (cfg.augment_flip) {
                SplitMix rng(seed_mix(cfg.seed, 0xf11b00ULL + std::uint64_t(step)));
                const int axis = int(rng.next_u64() % 4);  // 3 = no flip
                if (axis < 3) {
                    fixed = flip_volume(fixed, axis);
                    moving = flip_volume(moving, axis);
                }
            }
            net::BackboneOutputs<float> outs = backbone.forward_backbone(fixed, moving);
            loss::FinetuneResult<float> res =
                loss::finetune_loss(outs.warped, fixed, displacement_of(outs.phi), cfg.lambda, ncc);
            backbone.backward_backbone(res.grad_warped, res.grad_u);
            adam_step<float>(backbone.params().flat, backbone.params().flat_grad, adam);
            log.train_loss.emplace_back(step++, res.value);
            log.train_sim_reg.push_back(res.value);
        }
        if ((epoch + 1) % cfg.eval_every == 0 || epoch + 1 == cfg.epochs) {
            const double vd = split_dice(backbone, atlas, data.val);
            log.val_dice.emplace_back(epoch + 1, vd);
            if (vd > best_dice) {
                best_dice = vd;
                best = backbone;
            }
        }
    }
    const auto t1 = std::chrono::steady_clock::now();
    if (step > 0)
        log.seconds_per_pair = std::chrono::duration<double>(t1 - t0).count() / double(step);
    write_run_outputs(cfg.out_dir, log, backbone, &best);
    return log;
}

CurveLog train_on_random_only(net::Model<float>& backbone, const synth::PairConfig& pair_cfg,
                              const TrainConfig& cfg) {
    require(backbone.config().mode == net::ModelMode::backbone,
            "train_on_random_only: model must be in backbone mode");
    synth::PairConfig data_cfg = pair_cfg;
    data_cfg.emit_labels = false;
    synth::PairStream stream(data_cfg, cfg.seed);

    loss::NccConfig ncc;
    ncc.window = cfg.ncc_window;
    AdamConfig adam_cfg;
    adam_cfg.lr = cfg.lr_pretrain;
    AdamState<float> adam(backbone.param_count(), adam_cfg);

    CurveLog log;
    std::int64_t step = 0;
    for (int epoch = 0; epoch < cfg.epochs; ++epoch)
        for (int i = 0; i < cfg.pairs_per_epoch; ++i) {
            synth::TrainingPair pair =
                stream.make(std::uint64_t(epoch) * std::uint64_t(cfg.pairs_per_epoch) +
                            std::uint64_t(i));
            net::BackboneOutputs<float> outs =
                backbone.forward_backbone(pair.fixed, pair.moving);
            loss::FinetuneResult<float> res = loss::finetune_loss(
                outs.warped, pair.fixed, displacement_of(outs.phi), cfg.lambda, ncc);
            backbone.backward_backbone(res.grad_warped, res.grad_u);
            adam_step<float>(backbone.params().flat, backbone.params().flat_grad, adam);
            log.train_loss.emplace_back(step++, res.value);
            log.train_sim_reg.push_back(res.value);
        }
    write_run_outputs(cfg.out_dir, log, backbone, nullptr);
    return log;
}

InstanceOptResult instance_optimize(const ScalarVolume& fixed, const ScalarVolume& moving,
                                    const InstanceOptConfig& cfg,
                                    const VectorField* initial_velocity) {
    require_same_shape(fixed.shape, moving.shape, "instance_optimize");
    VectorField v = initial_velocity ? *initial_velocity
                                     : VectorField(fixed.shape, FieldKind::velocity, 0.f);
    require(v.kind == FieldKind::velocity, "instance_optimize: initial field must be a velocity");

    loss::NccConfig ncc;
    ncc.window = cfg.ncc_window;
    const SsConfig ss{cfg.ss_steps};
    AdamConfig adam_cfg;
    adam_cfg.lr = cfg.lr;
    AdamState<float> adam(v.data.size(), adam_cfg);

    InstanceOptResult out;
    for (int it = 0; it < cfg.iterations; ++it) {
        VectorField phi = scaling_and_squaring(v, ss);
        ScalarVolume warped = warp_scalar(moving, phi);
        loss::FinetuneResult<float> res =
            loss::finetune_loss(warped, fixed, displacement_of(phi), cfg.lambda, ncc);
        out.losses.push_back(res.value);
        VectorField gphi = warp_scalar_vjp_phi(moving, phi, res.grad_warped);
        for (std::size_t i = 0; i < gphi.data.size(); ++i)
            gphi.data[i] = float(double(gphi.data[i]) + double(res.grad_u.data[i]));
        VectorField gv = ss_vjp(v, ss, gphi);
        adam_step<float>(std::span<float>(v.data), std::span<const float>(gv.data), adam);
    }
    out.phi = scaling_and_squaring(v, ss);
    return out;
}

StepTiming step_timer(const net::Model<float>& model, const Shape3& shape, int steps) {
    require(steps >= 5, "step_timer: need at least 5 steps");
    net::Model<float> work = model;
    synth::PairConfig pcfg;
    pcfg.shape = shape;
    pcfg.emit_labels = false;
    synth::TrainingPair pair = synth::make_pair(pcfg, 7);

    loss::NccConfig ncc;
    loss::LossWeights w;
    const SsConfig ss{work.config().ss_steps};
    AdamConfig adam_cfg;
    adam_cfg.lr = 1e-4;
    AdamState<float> adam(work.param_count(), adam_cfg);

    auto run_step = [&]() {
        if (work.config().mode == net::ModelMode::pretrain) {
            net::PretrainOutputs<float> outs = work.forward_pretrain(pair.fixed, pair.moving);
            loss::PretrainResult<float> res =
                loss::pretrain_loss(outs.ensemble, outs.decoders, pair.fixed, pair.moving,
                                    nullptr, nullptr, w, ncc, ss, loss::SimilarityKind::ncc);
            work.backward_pretrain(res.grads);
        } else {
            net::BackboneOutputs<float> outs = work.forward_backbone(pair.fixed, pair.moving);
            loss::FinetuneResult<float> res =
                loss::finetune_loss(outs.warped, pair.fixed, displacement_of(outs.phi), 1.0, ncc);
            work.backward_backbone(res.grad_warped, res.grad_u);
        }
        adam_step<float>(work.params().flat, work.params().flat_grad, adam);
    };

    run_step();  // warm-up
    run_step();
    std::vector<double> times;
    times.reserve(std::size_t(steps));
    for (int i = 0; i < steps; ++i) {
        const auto t0 = std::chrono::steady_clock::now();
        run_step();
        const auto t1 = std::chrono::steady_clock::now();
        times.push_back(std::chrono::duration<double>(t1 - t0).count());
    }
    std::vector<double> sorted = times;
    std::sort(sorted.begin(), sorted.end());
    StepTiming t;
    t.median_seconds = sorted[sorted.size() / 2];
    for (double x : times) t.mean_seconds += x;
    t.mean_seconds /= double(times.size());
    for (double x : times) t.stddev_seconds += (x - t.mean_seconds) * (x - t.mean_seconds);
    t.stddev_seconds = std::sqrt(t.stddev_seconds / double(times.size()));
    return t;
}

void write_manifest(const std::string& path,
                    const std::vector<std::pair<std::string, std::string>>& entries) {
    std::ofstream os(path);
    if (!os) throw std::runtime_error("cannot write manifest: " + path);
    for (const auto& [k, v] : entries) os << k << " = " << v << "\n";
}

}  // namespace rreg::train
