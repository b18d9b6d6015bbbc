#pragma once

#include <cmath>
#include <vector>

#include "rreg/deform.hpp"
#include "rreg/par.hpp"
#include "rreg/volume_ops.hpp"

namespace rreg::loss {

struct LossWeights {
    double lambda = 1.0;   // diffusion regularizer weight
    double eta = 1e-7;     // self-distillation KL weight
};

struct NccConfig {
    int window = 5;        // odd cube side; 9 at paper scale, 5 at desk scale
    double epsilon = 1e-5;
};

inline void require_ncc_config(const NccConfig& cfg) {
    require(cfg.window >= 3 && (cfg.window % 2) == 1, "ncc: window must be odd and >= 3");
}

constexpr double kLogVarClamp = 10.0;

namespace detail {

// Sliding-cube sums with windows clipped at the borders. Three separable
// passes; each line is summed serially via prefix sums, lines in parallel.
inline void box_pass_x(const std::vector<double>& in, std::vector<double>& out, const Shape3& s,
                       int r) {
#pragma omp parallel for schedule(static)
    for (int k = 0; k < s.nz; ++k) {
        std::vector<double> prefix(std::size_t(s.nx) + 1);
        for (int j = 0; j < s.ny; ++j) {
            const std::size_t row = s.index(0, j, k);
            prefix[0] = 0.0;
            for (int i = 0; i < s.nx; ++i) prefix[std::size_t(i) + 1] = prefix[std::size_t(i)] + in[row + std::size_t(i)];
            for (int i = 0; i < s.nx; ++i) {
                const int lo = std::max(i - r, 0);
                const int hi = std::min(i + r, s.nx - 1);
                out[row + std::size_t(i)] = prefix[std::size_t(hi) + 1] - prefix[std::size_t(lo)];
            }
        }
    }
}

inline void box_pass_yz(const std::vector<double>& in, std::vector<double>& out, const Shape3& s,
                        int r, int axis) {
    const int n = axis == 1 ? s.ny : s.nz;
    const std::size_t stride = axis == 1 ? std::size_t(s.nx) : std::size_t(s.nx) * std::size_t(s.ny);
    const int outer_n = axis == 1 ? s.nz : s.ny;
#pragma omp parallel for schedule(static)
    for (int o = 0; o < outer_n; ++o) {
        std::vector<double> prefix(std::size_t(n) + 1);
        for (int i = 0; i < s.nx; ++i) {
            const std::size_t base =
                axis == 1 ? s.index(i, 0, o) : s.index(i, o, 0);
            prefix[0] = 0.0;
            for (int t = 0; t < n; ++t)
                prefix[std::size_t(t) + 1] = prefix[std::size_t(t)] + in[base + std::size_t(t) * stride];
            for (int t = 0; t < n; ++t) {
                const int lo = std::max(t - r, 0);
                const int hi = std::min(t + r, n - 1);
                out[base + std::size_t(t) * stride] = prefix[std::size_t(hi) + 1] - prefix[std::size_t(lo)];
            }
        }
    }
}

inline std::vector<double> box_sum(const std::vector<double>& in, const Shape3& s, int r) {
    std::vector<double> a(in.size()), b(in.size());
    box_pass_x(in, a, s, r);
    box_pass_yz(a, b, s, r, 1);
    box_pass_yz(b, a, s, r, 2);
    return a;
}

inline int axis_count(int i, int n, int r) {
    return std::min(i + r, n - 1) - std::max(i - r, 0) + 1;
}

}  // namespace detail

template <class T>
struct NccResult {
    double value = 0.0;
    VolumeT<T> grad_warped;
    VolumeT<T> grad_fixed;
};

// Windowed local NCC in the squared-correlation form:
//   cc = cross^2 / (var_a * var_b + eps), loss = -mean(cc).
// The epsilon guard keeps constant patches (which shape images contain by
// construction) at cc = 0 instead of 0/0.
template <class T>
NccResult<T> ncc_loss(const VolumeT<T>& warped, const VolumeT<T>& fixed, const NccConfig& cfg = {}) {
    require_same_shape(warped.shape, fixed.shape, "ncc_loss");
    require_ncc_config(cfg);
    const Shape3 s = warped.shape;
    const std::size_t n = s.voxels();
    const int r = cfg.window / 2;
    const double eps = cfg.epsilon;

    std::vector<double> a(n), b(n), aa(n), bb(n), ab(n);
    const std::int64_t nn = std::int64_t(n);
#pragma omp parallel for schedule(static)
    for (std::int64_t v = 0; v < nn; ++v) {
        const double av = double(warped.data[std::size_t(v)]);
        const double bv = double(fixed.data[std::size_t(v)]);
        a[std::size_t(v)] = av;
        b[std::size_t(v)] = bv;
        aa[std::size_t(v)] = av * av;
        bb[std::size_t(v)] = bv * bv;
        ab[std::size_t(v)] = av * bv;
    }
    const std::vector<double> A = detail::box_sum(a, s, r);
    const std::vector<double> B = detail::box_sum(b, s, r);
    const std::vector<double> AA = detail::box_sum(aa, s, r);
    const std::vector<double> BB = detail::box_sum(bb, s, r);
    const std::vector<double> AB = detail::box_sum(ab, s, r);

    // Per-center coefficients for the value and for the gather-form gradient.
    std::vector<double> p(n), q(n), rr(n), pbm(n), pam(n), qam(n), rbm(n);
    std::vector<double> cc(n);
#pragma omp parallel for schedule(static)
    for (int k = 0; k < s.nz; ++k) {
        const double cz = double(detail::axis_count(k, s.nz, r));
        for (int j = 0; j < s.ny; ++j) {
            const double cyz = cz * double(detail::axis_count(j, s.ny, r));
            for (int i = 0; i < s.nx; ++i) {
                const std::size_t v = s.index(i, j, k);
                const double cnt = cyz * double(detail::axis_count(i, s.nx, r));
                const double am = A[v] / cnt;
                const double bm = B[v] / cnt;
                const double cross = AB[v] - A[v] * B[v] / cnt;
                const double va = AA[v] - A[v] * A[v] / cnt;
                const double vb = BB[v] - B[v] * B[v] / cnt;
                const double den = va * vb + eps;
                cc[v] = cross * cross / den;
                const double pv = 2.0 * cross / den;
                const double qv = 2.0 * cross * cross * vb / (den * den);
                const double rv = 2.0 * cross * cross * va / (den * den);
                p[v] = pv;
                q[v] = qv;
                rr[v] = rv;
                pbm[v] = pv * bm;
                pam[v] = pv * am;
                qam[v] = qv * am;
                rbm[v] = rv * bm;
            }
        }
    }

    NccResult<T> res;
    res.value = -plane_sum(s.nz, [&](int z) {
                    double acc = 0.0;
                    const std::size_t base = s.index(0, 0, z);
                    for (std::size_t v = 0; v < std::size_t(s.nx) * std::size_t(s.ny); ++v)
                        acc += cc[base + v];
                    return acc;
                }) / double(n);

    const std::vector<double> SP = detail::box_sum(p, s, r);
    const std::vector<double> SPB = detail::box_sum(pbm, s, r);
    const std::vector<double> SPA = detail::box_sum(pam, s, r);
    const std::vector<double> SQ = detail::box_sum(q, s, r);
    const std::vector<double> SQA = detail::box_sum(qam, s, r);
    const std::vector<double> SR = detail::box_sum(rr, s, r);
    const std::vector<double> SRB = detail::box_sum(rbm, s, r);

    res.grad_warped = VolumeT<T>(s);
    res.grad_fixed = VolumeT<T>(s);
    const double inv_n = 1.0 / double(n);
#pragma omp parallel for schedule(static)
    for (std::int64_t v = 0; v < nn; ++v) {
        const std::size_t u = std::size_t(v);
        res.grad_warped.data[u] =
            T(-inv_n * (b[u] * SP[u] - SPB[u] - a[u] * SQ[u] + SQA[u]));
        res.grad_fixed.data[u] =
            T(-inv_n * (a[u] * SP[u] - SPA[u] - b[u] * SR[u] + SRB[u]));
    }
    return res;
}

template <class T>
struct DiffusionResult {
    double value = 0.0;
    FieldT<T> grad;
};

// Mean over voxels and the 9 derivative channels of squared forward
// differences.
template <class T>
DiffusionResult<T> diffusion_reg(const FieldT<T>& u) {
    const Shape3 s = u.shape;
    ChannelsT<T> g = spatial_gradient(u);
    const double norm = 1.0 / (9.0 * double(s.voxels()));

    DiffusionResult<T> res;
    res.value = plane_sum(s.nz, [&](int z) {
                    double acc = 0.0;
                    const std::size_t pl = std::size_t(s.nx) * std::size_t(s.ny);
                    for (int c = 0; c < 9; ++c) {
                        const T* gc = g.channel(c) + std::size_t(z) * pl;
                        for (std::size_t v = 0; v < pl; ++v) acc += double(gc[v]) * double(gc[v]);
                    }
                    return acc;
                }) * norm;

    const std::int64_t total = std::int64_t(g.data.size());
#pragma omp parallel for schedule(static)
    for (std::int64_t v = 0; v < total; ++v)
        g.data[std::size_t(v)] = T(2.0 * norm * double(g.data[std::size_t(v)]));
    res.grad = spatial_gradient_adjoint(g, u.kind);
    return res;
}

template <class T>
struct KlResult {
    double value = 0.0;
    FieldT<T> grad_mu_ens;
    ChannelsT<T> grad_logvar_ens;
    FieldT<T> grad_mu_dec;
    ChannelsT<T> grad_logvar_dec;
};

// Diagonal-Gaussian KL(ensemble || decoder) per voxel and component,
// averaged. Log-variances are clamped to [-10, 10] before exponentiation;
// the clamp masks the gradient outside that range.
template <class T>
KlResult<T> kl_gaussian(const GaussianFieldT<T>& ens, const GaussianFieldT<T>& dec) {
    const Shape3 s = ens.mean.shape;
    require_same_shape(s, dec.mean.shape, "kl_gaussian");
    const std::size_t n = s.voxels();
    const double norm = 1.0 / (3.0 * double(n));

    KlResult<T> res;
    res.grad_mu_ens = FieldT<T>(s, FieldKind::velocity);
    res.grad_logvar_ens = ChannelsT<T>(s, 3);
    res.grad_mu_dec = FieldT<T>(s, FieldKind::velocity);
    res.grad_logvar_dec = ChannelsT<T>(s, 3);

    std::vector<double> plane_acc(std::size_t(s.nz), 0.0);
#pragma omp parallel for schedule(static)
    for (int z = 0; z < s.nz; ++z) {
        const std::size_t pl = std::size_t(s.nx) * std::size_t(s.ny);
        const std::size_t off = std::size_t(z) * pl;
        double acc = 0.0;
        for (int c = 0; c < 3; ++c) {
            const T* me = ens.mean.channel(c) + off;
            const T* le = ens.log_variance.channel(c) + off;
            const T* md = dec.mean.channel(c) + off;
            const T* ld = dec.log_variance.channel(c) + off;
            T* gme = res.grad_mu_ens.channel(c) + off;
            T* gle = res.grad_logvar_ens.channel(c) + off;
            T* gmd = res.grad_mu_dec.channel(c) + off;
            T* gld = res.grad_logvar_dec.channel(c) + off;
            for (std::size_t v = 0; v < pl; ++v) {
                const double rawa = double(le[v]);
                const double rawb = double(ld[v]);
                const double a = std::clamp(rawa, -kLogVarClamp, kLogVarClamp);
                const double b = std::clamp(rawb, -kLogVarClamp, kLogVarClamp);
                const double maska = (rawa >= -kLogVarClamp && rawa <= kLogVarClamp) ? 1.0 : 0.0;
                const double maskb = (rawb >= -kLogVarClamp && rawb <= kLogVarClamp) ? 1.0 : 0.0;
                const double dmu = double(me[v]) - double(md[v]);
                const double ea = std::exp(a);
                const double enb = std::exp(-b);
                acc += 0.5 * (b - a) + 0.5 * (ea + dmu * dmu) * enb - 0.5;
                gme[v] = T(norm * dmu * enb);
                gmd[v] = T(-norm * dmu * enb);
                gle[v] = T(norm * maska * 0.5 * (ea * enb - 1.0));
                gld[v] = T(norm * maskb * 0.5 * (1.0 - (ea + dmu * dmu) * enb));
            }
        }
        plane_acc[std::size_t(z)] = acc;
    }
    double total = 0.0;
    for (double x : plane_acc) total += x;
    res.value = total * norm;
    return res;
}

template <class T>
struct SoftDiceResult {
    double value = 0.0;
    ChannelsT<T> grad_warped;
    ChannelsT<T> grad_fixed;
};

constexpr double kDiceEps = 1e-6;

// 1 - mean over labels of 2|A.B| / (|A| + |B|), on per-label probability
// channels.
template <class T>
SoftDiceResult<T> soft_dice_loss(const ChannelsT<T>& warped_probs, const ChannelsT<T>& fixed_probs) {
    require_same_shape(warped_probs.shape, fixed_probs.shape, "soft_dice_loss");
    if (warped_probs.channels != fixed_probs.channels)
        throw std::invalid_argument("soft_dice_loss: channel count mismatch");
    const Shape3 s = warped_probs.shape;
    const int L = warped_probs.channels;
    const std::size_t pl = std::size_t(s.nx) * std::size_t(s.ny);

    SoftDiceResult<T> res;
    res.grad_warped = ChannelsT<T>(s, L);
    res.grad_fixed = ChannelsT<T>(s, L);

    double dice_sum = 0.0;
    for (int l = 0; l < L; ++l) {
        const T* pw = warped_probs.channel(l);
        const T* pf = fixed_probs.channel(l);
        double inter = 0.0, sw = 0.0, sf = 0.0;
        {
            std::vector<double> acc(std::size_t(s.nz) * 3, 0.0);
#pragma omp parallel for schedule(static)
            for (int z = 0; z < s.nz; ++z) {
                const std::size_t off = std::size_t(z) * pl;
                double ai = 0.0, aw = 0.0, af = 0.0;
                for (std::size_t v = 0; v < pl; ++v) {
                    const double w = double(pw[off + v]);
                    const double f = double(pf[off + v]);
                    ai += w * f;
                    aw += w;
                    af += f;
                }
                acc[std::size_t(z) * 3] = ai;
                acc[std::size_t(z) * 3 + 1] = aw;
                acc[std::size_t(z) * 3 + 2] = af;
            }
            for (int z = 0; z < s.nz; ++z) {
                inter += acc[std::size_t(z) * 3];
                sw += acc[std::size_t(z) * 3 + 1];
                sf += acc[std::size_t(z) * 3 + 2];
            }
        }
        const double den = sw + sf + kDiceEps;
        dice_sum += 2.0 * inter / den;
        const double gshared = 2.0 * inter / (den * den);
        const double scale = -1.0 / double(L);
        T* gw = res.grad_warped.channel(l);
        T* gf = res.grad_fixed.channel(l);
        const std::int64_t nn = std::int64_t(s.voxels());
#pragma omp parallel for schedule(static)
        for (std::int64_t v = 0; v < nn; ++v) {
            gw[std::size_t(v)] = T(scale * (2.0 * double(pf[std::size_t(v)]) / den - gshared));
            gf[std::size_t(v)] = T(scale * (2.0 * double(pw[std::size_t(v)]) / den - gshared));
        }
    }
    res.value = 1.0 - dice_sum / double(L);
    return res;
}

template <class T>
ChannelsT<T> one_hot(const LabelVolume& labels) {
    ChannelsT<T> out(labels.shape, labels.label_count, T(0));
    const std::int64_t n = std::int64_t(labels.shape.voxels());
#pragma omp parallel for schedule(static)
    for (std::int64_t v = 0; v < n; ++v) out.channel(labels.data[std::size_t(v)])[std::size_t(v)] = T(1);
    return out;
}

template <class T>
struct FinetuneResult {
    double value = 0.0;
    double similarity = 0.0;
    double regularizer = 0.0;
    VolumeT<T> grad_warped;
    VolumeT<T> grad_fixed;
    FieldT<T> grad_u;
};

// NCC + lambda * diffusion.
template <class T>
FinetuneResult<T> finetune_loss(const VolumeT<T>& warped, const VolumeT<T>& fixed,
                                const FieldT<T>& u, double lambda, const NccConfig& ncc_cfg = {}) {
    NccResult<T> ncc = ncc_loss(warped, fixed, ncc_cfg);
    DiffusionResult<T> reg = diffusion_reg(u);
    FinetuneResult<T> res;
    res.similarity = ncc.value;
    res.regularizer = reg.value;
    res.value = ncc.value + lambda * reg.value;
    res.grad_warped = std::move(ncc.grad_warped);
    res.grad_fixed = std::move(ncc.grad_fixed);
    res.grad_u = std::move(reg.grad);
    const std::int64_t n3 = std::int64_t(res.grad_u.data.size());
#pragma omp parallel for schedule(static)
    for (std::int64_t v = 0; v < n3; ++v)
        res.grad_u.data[std::size_t(v)] = T(double(res.grad_u.data[std::size_t(v)]) * lambda);
    return res;
}

enum class SimilarityKind : std::uint8_t { ncc, dice };

template <class T>
struct PretrainGrads {
    FieldT<T> mu_ens;
    ChannelsT<T> logvar_ens;
    std::vector<FieldT<T>> mu_dec;
    std::vector<ChannelsT<T>> logvar_dec;
};

template <class T>
struct PretrainResult {
    double value = 0.0;
    double similarity = 0.0;   // NCC (or soft Dice) term
    double regularizer = 0.0;  // diffusion term, unweighted
    double kl = 0.0;           // mean decoder KL, unweighted
    PretrainGrads<T> grads;
};

// Full pretraining objective on Gaussian velocity fields:
//   sim(warp(m, SS(mu_ens)), f) + lambda * diffusion(u_ens)
//   + eta/K * sum_k KL(ens || dec_k)
// All decoder fields are expected at full resolution.
template <class T>
PretrainResult<T> pretrain_loss(const GaussianFieldT<T>& ens,
                                const std::vector<GaussianFieldT<T>>& decoders,
                                const VolumeT<T>& fixed, const VolumeT<T>& moving,
                                const LabelVolume* fixed_labels, const LabelVolume* moving_labels,
                                const LossWeights& w, const NccConfig& ncc_cfg,
                                const SsConfig& ss_cfg, SimilarityKind sim_kind) {
    require(!decoders.empty(), "pretrain_loss: need at least one decoder output");
    const Shape3 s = ens.mean.shape;
    require_same_shape(s, fixed.shape, "pretrain_loss");

    PretrainResult<T> res;
    FieldT<T> phi = scaling_and_squaring(ens.mean, ss_cfg);
    FieldT<T> grad_phi(s, FieldKind::deformation, T(0));

    if (sim_kind == SimilarityKind::ncc) {
        VolumeT<T> warped = warp_scalar(moving, phi);
        NccResult<T> ncc = ncc_loss(warped, fixed, ncc_cfg);
        res.similarity = ncc.value;
        grad_phi = warp_scalar_vjp_phi(moving, phi, ncc.grad_warped);
    } else {
        require(fixed_labels && moving_labels, "pretrain_loss: dice variant needs label maps");
        ChannelsT<T> mov_probs = one_hot<T>(*moving_labels);
        ChannelsT<T> warped_probs = warp_channels(mov_probs, phi);
        ChannelsT<T> fix_probs = one_hot<T>(*fixed_labels);
        SoftDiceResult<T> sd = soft_dice_loss(warped_probs, fix_probs);
        res.similarity = sd.value;
        grad_phi = warp_channels_vjp_phi(mov_probs, phi, sd.grad_warped);
    }

    FieldT<T> u = displacement_of(phi);
    DiffusionResult<T> reg = diffusion_reg(u);
    res.regularizer = reg.value;
    const std::int64_t n3 = std::int64_t(grad_phi.data.size());
#pragma omp parallel for schedule(static)
    for (std::int64_t v = 0; v < n3; ++v)
        grad_phi.data[std::size_t(v)] = T(double(grad_phi.data[std::size_t(v)]) +
                                          w.lambda * double(reg.grad.data[std::size_t(v)]));

    const std::size_t K = decoders.size();
    res.grads.mu_ens = FieldT<T>(s, FieldKind::velocity, T(0));
    res.grads.logvar_ens = ChannelsT<T>(s, 3, T(0));
    res.grads.mu_dec.reserve(K);
    res.grads.logvar_dec.reserve(K);
    const double kw = w.eta / double(K);
    for (const GaussianFieldT<T>& dec : decoders) {
        KlResult<T> kl = kl_gaussian(ens, dec);
        res.kl += kl.value / double(K);
        for (std::size_t v = 0; v < kl.grad_mu_dec.data.size(); ++v) {
            kl.grad_mu_dec.data[v] = T(double(kl.grad_mu_dec.data[v]) * kw);
            res.grads.mu_ens.data[v] =
                T(double(res.grads.mu_ens.data[v]) + kw * double(kl.grad_mu_ens.data[v]));
        }
        for (std::size_t v = 0; v < kl.grad_logvar_dec.data.size(); ++v) {
            kl.grad_logvar_dec.data[v] = T(double(kl.grad_logvar_dec.data[v]) * kw);
            res.grads.logvar_ens.data[v] =
                T(double(res.grads.logvar_ens.data[v]) + kw * double(kl.grad_logvar_ens.data[v]));
        }
        res.grads.mu_dec.push_back(std::move(kl.grad_mu_dec));
        res.grads.logvar_dec.push_back(std::move(kl.grad_logvar_dec));
    }

    FieldT<T> gmu_ss = ss_vjp(ens.mean, ss_cfg, grad_phi);
    for (std::size_t v = 0; v < gmu_ss.data.size(); ++v)
        res.grads.mu_ens.data[v] = T(double(res.grads.mu_ens.data[v]) + double(gmu_ss.data[v]));

    res.value = res.similarity + w.lambda * res.regularizer + w.eta * res.kl;
    return res;
}

}  // namespace rreg::loss
