#include "rreg/net.hpp"

#include <cmath>
#include <cstring>
#include <cstdio>
#include <fstream>

#include "rreg/losses.hpp"
#include "rreg/rng.hpp"
#include "rreg/volume_ops.hpp"

namespace rreg::net {

void validate_config(const ModelConfig& cfg) {
    require(cfg.stages >= 2, "ModelConfig: stages must be >= 2");
    require(cfg.base_channels >= 1, "ModelConfig: base_channels must be >= 1");
    require(cfg.decoder_width >= 1, "ModelConfig: decoder_width must be >= 1");
    require(cfg.ss_steps >= 0 && cfg.ss_steps <= 12, "ModelConfig: ss_steps out of range");
}

void require_divisible(const Shape3& s, int stages) {
    const int f = 1 << stages;
    require(s.nx % f == 0 && s.ny % f == 0 && s.nz % f == 0,
            "input grid " + s.str() + " not divisible by 2^" + std::to_string(stages));
}

// ---------------------------------------------------------------- ParamStore

template <class T>
std::size_t ParamStore<T>::add(const std::string& name, std::vector<int> dims) {
    ParamTensor<T> t;
    t.name = name;
    t.dims = std::move(dims);
    t.size = 1;
    for (int d : t.dims) t.size *= std::size_t(d);
    t.offset = offset_acc_;
    offset_acc_ += t.size;
    index_[name] = tensors.size();
    tensors.push_back(t);
    return tensors.size() - 1;
}

template <class T>
void ParamStore<T>::finalize() {
    flat.assign(offset_acc_, T(0));
    flat_grad.assign(offset_acc_, T(0));
}

template <class T>
std::span<T> ParamStore<T>::values(const std::string& name) {
    const ParamTensor<T>& t = tensor(name);
    return {flat.data() + t.offset, t.size};
}

template <class T>
std::span<const T> ParamStore<T>::values(const std::string& name) const {
    const ParamTensor<T>& t = tensor(name);
    return {flat.data() + t.offset, t.size};
}

template <class T>
std::span<T> ParamStore<T>::grads(const std::string& name) {
    const ParamTensor<T>& t = tensor(name);
    return {flat_grad.data() + t.offset, t.size};
}

template <class T>
const ParamTensor<T>& ParamStore<T>::tensor(const std::string& name) const {
    auto it = index_.find(name);
    if (it == index_.end()) throw std::invalid_argument("unknown parameter tensor: " + name);
    return tensors[it->second];
}

template <class T>
void ParamStore<T>::zero_grad() {
    std::fill(flat_grad.begin(), flat_grad.end(), T(0));
}

// ------------------------------------------------------------ conv3 kernels

template <class T>
void conv3_forward(const ChannelsT<T>& in, std::type_identity_t<std::span<const T>> w,
                   std::type_identity_t<std::span<const T>> b, int cout, ChannelsT<T>& out) {
    const Shape3 s = in.shape;
    const int cin = in.channels;
    out = ChannelsT<T>(s, cout);
    const std::int64_t jobs = std::int64_t(cout) * s.nz;
#pragma omp parallel for schedule(static)
    for (std::int64_t job = 0; job < jobs; ++job) {
        const int co = int(job / s.nz);
        const int z = int(job % s.nz);
        std::vector<double> acc(std::size_t(s.nx));
        for (int y = 0; y < s.ny; ++y) {
            std::fill(acc.begin(), acc.end(), double(b[std::size_t(co)]));
            for (int ci = 0; ci < cin; ++ci)
                for (int tz = 0; tz < 3; ++tz) {
                    const int zz = z + tz - 1;
                    if (zz < 0 || zz >= s.nz) continue;
                    for (int ty = 0; ty < 3; ++ty) {
                        const int yy = y + ty - 1;
                        if (yy < 0 || yy >= s.ny) continue;
                        const T* row = in.channel(ci) + s.index(0, yy, zz);
                        const T* wk = w.data() + (((std::size_t(co) * cin + ci) * 3 + tz) * 3 + ty) * 3;
                        const double w0 = double(wk[0]), w1 = double(wk[1]), w2 = double(wk[2]);
                        for (int x = 1; x < s.nx; ++x) acc[std::size_t(x)] += w0 * double(row[x - 1]);
                        for (int x = 0; x < s.nx; ++x) acc[std::size_t(x)] += w1 * double(row[x]);
                        for (int x = 0; x < s.nx - 1; ++x) acc[std::size_t(x)] += w2 * double(row[x + 1]);
                    }
                }
            T* orow = out.channel(co) + s.index(0, y, z);
            for (int x = 0; x < s.nx; ++x) orow[x] = T(acc[std::size_t(x)]);
        }
    }
}

template <class T>
void conv3_forward_serial(const ChannelsT<T>& in, std::type_identity_t<std::span<const T>> w,
                          std::type_identity_t<std::span<const T>> b, int cout,
                          ChannelsT<T>& out) {
    const Shape3 s = in.shape;
    const int cin = in.channels;
    out = ChannelsT<T>(s, cout);
    std::vector<double> acc(std::size_t(s.nx));
    for (int co = 0; co < cout; ++co)
        for (int z = 0; z < s.nz; ++z)
            for (int y = 0; y < s.ny; ++y) {
                std::fill(acc.begin(), acc.end(), double(b[std::size_t(co)]));
                for (int ci = 0; ci < cin; ++ci)
                    for (int tz = 0; tz < 3; ++tz) {
                        const int zz = z + tz - 1;
                        if (zz < 0 || zz >= s.nz) continue;
                        for (int ty = 0; ty < 3; ++ty) {
                            const int yy = y + ty - 1;
                            if (yy < 0 || yy >= s.ny) continue;
                            const T* row = in.channel(ci) + s.index(0, yy, zz);
                            const T* wk =
                                w.data() + (((std::size_t(co) * cin + ci) * 3 + tz) * 3 + ty) * 3;
                            const double w0 = double(wk[0]), w1 = double(wk[1]), w2 = double(wk[2]);
                            for (int x = 1; x < s.nx; ++x) acc[std::size_t(x)] += w0 * double(row[x - 1]);
                            for (int x = 0; x < s.nx; ++x) acc[std::size_t(x)] += w1 * double(row[x]);
                            for (int x = 0; x < s.nx - 1; ++x) acc[std::size_t(x)] += w2 * double(row[x + 1]);
                        }
                    }
                T* orow = out.channel(co) + s.index(0, y, z);
                for (int x = 0; x < s.nx; ++x) orow[x] = T(acc[std::size_t(x)]);
            }
}

template <class T>
void conv3_backward_input(const ChannelsT<T>& gout, std::type_identity_t<std::span<const T>> w,
                          int cin, ChannelsT<T>& gin) {
    const Shape3 s = gout.shape;
    const int cout = gout.channels;
    gin = ChannelsT<T>(s, cin);
    const std::int64_t jobs = std::int64_t(cin) * s.nz;
#pragma omp parallel for schedule(static)
    for (std::int64_t job = 0; job < jobs; ++job) {
        const int ci = int(job / s.nz);
        const int z = int(job % s.nz);
        std::vector<double> acc(std::size_t(s.nx));
        for (int y = 0; y < s.ny; ++y) {
            std::fill(acc.begin(), acc.end(), 0.0);
            for (int co = 0; co < cout; ++co)
                for (int tz = 0; tz < 3; ++tz) {
                    const int zz = z - (tz - 1);
                    if (zz < 0 || zz >= s.nz) continue;
                    for (int ty = 0; ty < 3; ++ty) {
                        const int yy = y - (ty - 1);
                        if (yy < 0 || yy >= s.ny) continue;
                        const T* row = gout.channel(co) + s.index(0, yy, zz);
                        const T* wk = w.data() + (((std::size_t(co) * cin + ci) * 3 + tz) * 3 + ty) * 3;
                        const double w0 = double(wk[0]), w1 = double(wk[1]), w2 = double(wk[2]);
                        // tap 0 reads in(x-1): adjoint sends gout(x) to x+1
                        for (int x = 0; x < s.nx - 1; ++x) acc[std::size_t(x)] += w0 * double(row[x + 1]);
                        for (int x = 0; x < s.nx; ++x) acc[std::size_t(x)] += w1 * double(row[x]);
                        for (int x = 1; x < s.nx; ++x) acc[std::size_t(x)] += w2 * double(row[x - 1]);
                    }
                }
            T* orow = gin.channel(ci) + s.index(0, y, z);
            for (int x = 0; x < s.nx; ++x) orow[x] = T(acc[std::size_t(x)]);
        }
    }
}

template <class T>
void conv3_backward_params(const ChannelsT<T>& in, const ChannelsT<T>& gout, std::span<T> gw,
                           std::span<T> gb) {
    const Shape3 s = in.shape;
    const int cin = in.channels;
    const int cout = gout.channels;
#pragma omp parallel for schedule(static)
    for (int co = 0; co < cout; ++co) {
        std::vector<double> wacc(std::size_t(cin) * 27, 0.0);
        double bacc = 0.0;
        for (int z = 0; z < s.nz; ++z)
            for (int y = 0; y < s.ny; ++y) {
                const T* grow = gout.channel(co) + s.index(0, y, z);
                for (int x = 0; x < s.nx; ++x) bacc += double(grow[x]);
                for (int ci = 0; ci < cin; ++ci)
                    for (int tz = 0; tz < 3; ++tz) {
                        const int zz = z + tz - 1;
                        if (zz < 0 || zz >= s.nz) continue;
                        for (int ty = 0; ty < 3; ++ty) {
                            const int yy = y + ty - 1;
                            if (yy < 0 || yy >= s.ny) continue;
                            const T* irow = in.channel(ci) + s.index(0, yy, zz);
                            double s0 = 0.0, s1 = 0.0, s2 = 0.0;
                            for (int x = 1; x < s.nx; ++x) s0 += double(grow[x]) * double(irow[x - 1]);
                            for (int x = 0; x < s.nx; ++x) s1 += double(grow[x]) * double(irow[x]);
                            for (int x = 0; x < s.nx - 1; ++x) s2 += double(grow[x]) * double(irow[x + 1]);
                            double* wk = wacc.data() + ((std::size_t(ci) * 3 + tz) * 3 + ty) * 3;
                            wk[0] += s0;
                            wk[1] += s1;
                            wk[2] += s2;
                        }
                    }
            }
        T* gwp = gw.data() + std::size_t(co) * cin * 27;
        for (std::size_t i = 0; i < wacc.size(); ++i) gwp[i] += T(wacc[i]);
        gb[std::size_t(co)] += T(bacc);
    }
}

// ------------------------------------------------------------- small layers

namespace {

template <class T>
ChannelsT<T> leaky(const ChannelsT<T>& pre) {
    ChannelsT<T> out(pre.shape, pre.channels);
    const std::int64_t n = std::int64_t(pre.data.size());
#pragma omp parallel for schedule(static)
    for (std::int64_t v = 0; v < n; ++v) {
        const T x = pre.data[std::size_t(v)];
        out.data[std::size_t(v)] = x > T(0) ? x : T(double(x) * kLeakySlope);
    }
    return out;
}

template <class T>
ChannelsT<T> leaky_backward(const ChannelsT<T>& g, const ChannelsT<T>& pre) {
    ChannelsT<T> out(pre.shape, pre.channels);
    const std::int64_t n = std::int64_t(pre.data.size());
#pragma omp parallel for schedule(static)
    for (std::int64_t v = 0; v < n; ++v) {
        const std::size_t u = std::size_t(v);
        out.data[u] = pre.data[u] > T(0) ? g.data[u] : T(double(g.data[u]) * kLeakySlope);
    }
    return out;
}

template <class T>
ChannelsT<T> avgpool2(const ChannelsT<T>& in) {
    const Shape3 s = in.shape;
    const Shape3 o(s.nx / 2, s.ny / 2, s.nz / 2);
    ChannelsT<T> out(o, in.channels);
    const std::int64_t jobs = std::int64_t(in.channels) * o.nz;
#pragma omp parallel for schedule(static)
    for (std::int64_t job = 0; job < jobs; ++job) {
        const int c = int(job / o.nz);
        const int k = int(job % o.nz);
        for (int j = 0; j < o.ny; ++j)
            for (int i = 0; i < o.nx; ++i) {
                double acc = 0.0;
                for (int dz = 0; dz < 2; ++dz)
                    for (int dy = 0; dy < 2; ++dy)
                        for (int dx = 0; dx < 2; ++dx)
                            acc += double(in.channel(c)[s.index(2 * i + dx, 2 * j + dy, 2 * k + dz)]);
                out.channel(c)[o.index(i, j, k)] = T(acc * 0.125);
            }
    }
    return out;
}

template <class T>
ChannelsT<T> avgpool2_backward(const ChannelsT<T>& gout, const Shape3& in_shape) {
    const Shape3 o = gout.shape;
    ChannelsT<T> gin(in_shape, gout.channels);
    const std::int64_t jobs = std::int64_t(gout.channels) * in_shape.nz;
#pragma omp parallel for schedule(static)
    for (std::int64_t job = 0; job < jobs; ++job) {
        const int c = int(job / in_shape.nz);
        const int k = int(job % in_shape.nz);
        for (int j = 0; j < in_shape.ny; ++j)
            for (int i = 0; i < in_shape.nx; ++i)
                gin.channel(c)[in_shape.index(i, j, k)] =
                    T(double(gout.channel(c)[o.index(i / 2, j / 2, k / 2)]) * 0.125);
    }
    return gin;
}

template <class T>
ChannelsT<T> concat(const ChannelsT<T>& a, const ChannelsT<T>& b) {
    ChannelsT<T> out(a.shape, a.channels + b.channels);
    std::memcpy(out.data.data(), a.data.data(), a.data.size() * sizeof(T));
    std::memcpy(out.data.data() + a.data.size(), b.data.data(), b.data.size() * sizeof(T));
    return out;
}

template <class T>
ChannelsT<T> take_channels(const ChannelsT<T>& in, int first, int count) {
    ChannelsT<T> out(in.shape, count);
    std::memcpy(out.data.data(), in.channel(first), out.data.size() * sizeof(T));
    return out;
}

template <class T>
ChannelsT<T> stack_input(const VolumeT<T>& fixed, const VolumeT<T>& moving) {
    require_same_shape(fixed.shape, moving.shape, "model input");
    ChannelsT<T> x(fixed.shape, 2);
    std::memcpy(x.channel(0), fixed.data.data(), fixed.data.size() * sizeof(T));
    std::memcpy(x.channel(1), moving.data.data(), moving.data.size() * sizeof(T));
    return x;
}

template <class T>
FieldT<T> field_from(const ChannelsT<T>& c, int first, FieldKind kind) {
    FieldT<T> f(c.shape, kind);
    for (int d = 0; d < 3; ++d)
        std::memcpy(f.channel(d), c.channel(first + d), c.plane() * sizeof(T));
    return f;
}

template <class T>
Shape3 stage_shape(const Shape3& s, int k) {
    return Shape3(s.nx >> k, s.ny >> k, s.nz >> k);
}

}  // namespace

// ------------------------------------------------------------- ForwardCache

template <class T>
struct ForwardCache {
    bool valid = false;
    ModelMode mode = ModelMode::pretrain;
    VolumeT<T> moving;
    ChannelsT<T> x0;
    std::vector<ChannelsT<T>> enc_in, enc_pre, enc_pooled;
    // pretrain
    std::vector<ChannelsT<T>> lw_pre1, lw_post1, lw_pre2, lw_post2;
    ChannelsT<T> ens_avg;
    // backbone
    std::vector<ChannelsT<T>> dec_cat, dec_pre_a, dec_post_a, dec_pre_b, dec_post_b;
    FieldT<T> velocity;
    FieldT<T> phi;
};

// -------------------------------------------------------------------- Model

template <class T>
Model<T>::Model(const ModelConfig& cfg) : cfg_(cfg) {
    validate_config(cfg_);
    register_params();
    params_.finalize();
    init_params(cfg_.init_seed);
}

template <class T>
Model<T>::Model(const Model& other) : cfg_(other.cfg_), params_(other.params_) {}

template <class T>
Model<T>& Model<T>::operator=(const Model& other) {
    cfg_ = other.cfg_;
    params_ = other.params_;
    cache_.reset();
    return *this;
}

template <class T>
Model<T>::Model(Model&&) noexcept = default;
template <class T>
Model<T>& Model<T>::operator=(Model&&) noexcept = default;
template <class T>
Model<T>::~Model() = default;

template <class T>
void Model<T>::register_params() {
    const int K = cfg_.stages;
    for (int k = 1; k <= K; ++k) {
        params_.add("enc" + std::to_string(k) + ".w",
                    {cfg_.encoder_out(k), cfg_.encoder_in(k), 3, 3, 3});
        params_.add("enc" + std::to_string(k) + ".b", {cfg_.encoder_out(k)});
    }
    if (cfg_.mode == ModelMode::pretrain) {
        const int D = cfg_.decoder_width;
        for (int k = 1; k <= K; ++k) {
            const std::string p = "lw" + std::to_string(k);
            params_.add(p + ".c1.w", {D, cfg_.encoder_out(k), 3, 3, 3});
            params_.add(p + ".c1.b", {D});
            params_.add(p + ".c2.w", {D, D, 3, 3, 3});
            params_.add(p + ".c2.b", {D});
            params_.add(p + ".head.w", {6, D, 3, 3, 3});
            params_.add(p + ".head.b", {6});
        }
        params_.add("ens.head.w", {6, D, 3, 3, 3});
        params_.add("ens.head.b", {6});
    } else {
        for (int k = K - 1; k >= 0; --k) {
            const std::string p = "dec" + std::to_string(k);
            params_.add(p + ".a.w", {cfg_.decoder_out(k), cfg_.decoder_in(k), 3, 3, 3});
            params_.add(p + ".a.b", {cfg_.decoder_out(k)});
            params_.add(p + ".b.w", {cfg_.decoder_out(k), cfg_.decoder_out(k), 3, 3, 3});
            params_.add(p + ".b.b", {cfg_.decoder_out(k)});
        }
        params_.add("head.w", {3, cfg_.decoder_out(0), 3, 3, 3});
        params_.add("head.b", {3});
    }
}

template <class T>
void Model<T>::init_params(std::uint64_t seed) {
    for (std::size_t t = 0; t < params_.tensors.size(); ++t) {
        const ParamTensor<T>& pt = params_.tensors[t];
        T* dst = params_.flat.data() + pt.offset;
        const bool is_bias = pt.dims.size() == 1;
        const bool is_head = pt.name.find("head") != std::string::npos;
        if (is_bias || is_head) {
            std::fill(dst, dst + pt.size, T(0));
            continue;
        }
        const double fan_in = double(pt.dims[1]) * 27.0;
        const double gain = std::sqrt(2.0 / (1.0 + kLeakySlope * kLeakySlope));
        const double stddev = gain / std::sqrt(fan_in);
        SplitMix rng(seed_mix(seed, t));
        for (std::size_t i = 0; i < pt.size; ++i) dst[i] = T(stddev * rng.next_normal());
    }
}

template <class T>
std::size_t Model<T>::lightweight_decoder_param_count(int k) const {
    const int D = cfg_.decoder_width;
    const std::size_t c1 = std::size_t(D) * cfg_.encoder_out(k) * 27 + D;
    const std::size_t c2 = std::size_t(D) * D * 27 + D;
    const std::size_t head = std::size_t(6) * D * 27 + 6;
    return c1 + c2 + head;
}

template <class T>
std::size_t Model<T>::backbone_stage_param_count(int k) const {
    const std::size_t a = std::size_t(cfg_.decoder_out(k)) * cfg_.decoder_in(k) * 27 +
                          std::size_t(cfg_.decoder_out(k));
    const std::size_t b = std::size_t(cfg_.decoder_out(k)) * cfg_.decoder_out(k) * 27 +
                          std::size_t(cfg_.decoder_out(k));
    return a + b;
}

template <class T>
PretrainOutputs<T> Model<T>::forward_pretrain(const VolumeT<T>& fixed, const VolumeT<T>& moving,
                                              bool record) {
    require(cfg_.mode == ModelMode::pretrain, "forward_pretrain: model is not in pretrain mode");
    require_divisible(fixed.shape, cfg_.stages);
    const int K = cfg_.stages;
    const Shape3 full = fixed.shape;

    auto cache = std::make_unique<ForwardCache<T>>();
    cache->mode = ModelMode::pretrain;
    cache->moving = moving;
    cache->x0 = stack_input(fixed, moving);

    // encoder
    ChannelsT<T> cur = cache->x0;
    for (int k = 1; k <= K; ++k) {
        cache->enc_in.push_back(cur);
        ChannelsT<T> pre;
        conv3_forward(cur, params_.values("enc" + std::to_string(k) + ".w"),
                      params_.values("enc" + std::to_string(k) + ".b"), cfg_.encoder_out(k), pre);
        ChannelsT<T> post = leaky(pre);
        cur = avgpool2(post);
        cache->enc_pre.push_back(std::move(pre));
        cache->enc_pooled.push_back(cur);
    }

    // lightweight decoders
    PretrainOutputs<T> out;
    out.decoders.reserve(std::size_t(K));
    ChannelsT<T> ens_sum(full, cfg_.decoder_width, T(0));
    for (int k = 1; k <= K; ++k) {
        const std::string p = "lw" + std::to_string(k);
        const ChannelsT<T>& ek = cache->enc_pooled[std::size_t(k - 1)];
        ChannelsT<T> pre1;
        conv3_forward(ek, params_.values(p + ".c1.w"), params_.values(p + ".c1.b"),
                      cfg_.decoder_width, pre1);
        ChannelsT<T> post1 = leaky(pre1);
        ChannelsT<T> pre2;
        conv3_forward(post1, params_.values(p + ".c2.w"), params_.values(p + ".c2.b"),
                      cfg_.decoder_width, pre2);
        ChannelsT<T> post2 = leaky(pre2);
        ChannelsT<T> head6;
        conv3_forward(post2, params_.values(p + ".head.w"), params_.values(p + ".head.b"), 6,
                      head6);

        // velocity means in full-resolution voxel units: x2 per level
        const double scale = double(1 << k);
        GaussianFieldT<T> g(full);
        {
            ChannelsT<T> head_full = resample_channels(head6, full);
            for (int c = 0; c < 3; ++c) {
                const T* src = head_full.channel(c);
                T* dst = g.mean.channel(c);
                const std::int64_t n = std::int64_t(head_full.plane());
#pragma omp parallel for schedule(static)
                for (std::int64_t v = 0; v < n; ++v) dst[std::size_t(v)] = T(double(src[std::size_t(v)]) * scale);
                std::memcpy(g.log_variance.channel(c), head_full.channel(3 + c),
                            head_full.plane() * sizeof(T));
            }
        }
        out.decoders.push_back(std::move(g));

        // ensemble feature aggregation
        ChannelsT<T> up = resample_channels(post2, full);
        const std::int64_t n3 = std::int64_t(ens_sum.data.size());
#pragma omp parallel for schedule(static)
        for (std::int64_t v = 0; v < n3; ++v)
            ens_sum.data[std::size_t(v)] = T(double(ens_sum.data[std::size_t(v)]) +
                                             double(up.data[std::size_t(v)]) / double(K));

        cache->lw_pre1.push_back(std::move(pre1));
        cache->lw_post1.push_back(std::move(post1));
        cache->lw_pre2.push_back(std::move(pre2));
        cache->lw_post2.push_back(std::move(post2));
    }

    ChannelsT<T> ens6;
    conv3_forward(ens_sum, params_.values("ens.head.w"), params_.values("ens.head.b"), 6, ens6);
    out.ensemble = GaussianFieldT<T>(full);
    out.ensemble.mean = field_from(ens6, 0, FieldKind::velocity);
    out.ensemble.log_variance = take_channels(ens6, 3, 3);
    cache->ens_avg = std::move(ens_sum);

    out.phi = scaling_and_squaring(out.ensemble.mean, SsConfig{cfg_.ss_steps});
    out.warped = warp_scalar(moving, out.phi);

    if (record)
        cache_ = std::move(cache);
    else
        cache_.reset();
    return out;
}

template <class T>
void Model<T>::backward_pretrain(const loss::PretrainGrads<T>& g) {
    if (!cache_ || cache_->mode != ModelMode::pretrain)
        throw std::invalid_argument("backward_pretrain: no recorded pretrain forward");
    const int K = cfg_.stages;
    const Shape3 full = cache_->x0.shape;
    params_.zero_grad();

    // gradients flowing into each pooled encoder feature map
    std::vector<ChannelsT<T>> gE;
    gE.resize(std::size_t(K));
    for (int k = 1; k <= K; ++k)
        gE[std::size_t(k - 1)] = ChannelsT<T>(stage_shape<T>(full, k), cfg_.encoder_out(k), T(0));

    // ensemble head
    ChannelsT<T> gens6(full, 6);
    for (int c = 0; c < 3; ++c) {
        std::memcpy(gens6.channel(c), g.mu_ens.channel(c), gens6.plane() * sizeof(T));
        std::memcpy(gens6.channel(3 + c), g.logvar_ens.channel(c), gens6.plane() * sizeof(T));
    }
    conv3_backward_params(cache_->ens_avg, gens6, params_.grads("ens.head.w"),
                          params_.grads("ens.head.b"));
    ChannelsT<T> gA;
    conv3_backward_input(gens6, params_.values("ens.head.w"), cfg_.decoder_width, gA);
    {
        const std::int64_t n = std::int64_t(gA.data.size());
#pragma omp parallel for schedule(static)
        for (std::int64_t v = 0; v < n; ++v)
            gA.data[std::size_t(v)] = T(double(gA.data[std::size_t(v)]) / double(K));
    }

    for (int k = 1; k <= K; ++k) {
        const std::string p = "lw" + std::to_string(k);
        const Shape3 sk = stage_shape<T>(full, k);
        const std::size_t ki = std::size_t(k - 1);

        // head gradient: upsampled outputs back to stage resolution
        ChannelsT<T> ghead_full(full, 6);
        for (int c = 0; c < 3; ++c) {
            std::memcpy(ghead_full.channel(c), g.mu_dec[ki].channel(c),
                        ghead_full.plane() * sizeof(T));
            std::memcpy(ghead_full.channel(3 + c), g.logvar_dec[ki].channel(c),
                        ghead_full.plane() * sizeof(T));
        }
        ChannelsT<T> ghead = resample_channels_adjoint(ghead_full, sk);
        const double scale = double(1 << k);
        for (int c = 0; c < 3; ++c) {
            T* gc = ghead.channel(c);
            for (std::size_t v = 0; v < ghead.plane(); ++v) gc[v] = T(double(gc[v]) * scale);
        }

        conv3_backward_params(cache_->lw_post2[ki], ghead, params_.grads(p + ".head.w"),
                              params_.grads(p + ".head.b"));
        ChannelsT<T> gpost2;
        conv3_backward_input(ghead, params_.values(p + ".head.w"), cfg_.decoder_width, gpost2);

        // ensemble aggregation path
        ChannelsT<T> gup = resample_channels_adjoint(gA, sk);
        for (std::size_t v = 0; v < gpost2.data.size(); ++v)
            gpost2.data[v] = T(double(gpost2.data[v]) + double(gup.data[v]));

        ChannelsT<T> gpre2 = leaky_backward(gpost2, cache_->lw_pre2[ki]);
        conv3_backward_params(cache_->lw_post1[ki], gpre2, params_.grads(p + ".c2.w"),
                              params_.grads(p + ".c2.b"));
        ChannelsT<T> gpost1;
        conv3_backward_input(gpre2, params_.values(p + ".c2.w"), cfg_.decoder_width, gpost1);

        ChannelsT<T> gpre1 = leaky_backward(gpost1, cache_->lw_pre1[ki]);
        conv3_backward_params(cache_->enc_pooled[ki], gpre1, params_.grads(p + ".c1.w"),
                              params_.grads(p + ".c1.b"));
        ChannelsT<T> ge;
        conv3_backward_input(gpre1, params_.values(p + ".c1.w"), cfg_.encoder_out(k), ge);
        for (std::size_t v = 0; v < ge.data.size(); ++v)
            gE[ki].data[v] = T(double(gE[ki].data[v]) + double(ge.data[v]));
    }

    // encoder backward
    for (int k = K; k >= 1; --k) {
        const std::size_t ki = std::size_t(k - 1);
        const Shape3 pre_shape = stage_shape<T>(full, k - 1);
        ChannelsT<T> gpost = avgpool2_backward(gE[ki], pre_shape);
        ChannelsT<T> gpre = leaky_backward(gpost, cache_->enc_pre[ki]);
        conv3_backward_params(cache_->enc_in[ki], gpre,
                              params_.grads("enc" + std::to_string(k) + ".w"),
                              params_.grads("enc" + std::to_string(k) + ".b"));
        if (k > 1) {
            ChannelsT<T> gin;
            conv3_backward_input(gpre, params_.values("enc" + std::to_string(k) + ".w"),
                                 cfg_.encoder_in(k), gin);
            for (std::size_t v = 0; v < gin.data.size(); ++v)
                gE[ki - 1].data[v] = T(double(gE[ki - 1].data[v]) + double(gin.data[v]));
        }
    }
}

template <class T>
BackboneOutputs<T> Model<T>::forward_backbone(const VolumeT<T>& fixed, const VolumeT<T>& moving,
                                              bool record) {
    require(cfg_.mode == ModelMode::backbone, "forward_backbone: model is not in backbone mode");
    require_divisible(fixed.shape, cfg_.stages);
    const int K = cfg_.stages;
    const Shape3 full = fixed.shape;

    auto cache = std::make_unique<ForwardCache<T>>();
    cache->mode = ModelMode::backbone;
    cache->moving = moving;
    cache->x0 = stack_input(fixed, moving);

    ChannelsT<T> cur = cache->x0;
    for (int k = 1; k <= K; ++k) {
        cache->enc_in.push_back(cur);
        ChannelsT<T> pre;
        conv3_forward(cur, params_.values("enc" + std::to_string(k) + ".w"),
                      params_.values("enc" + std::to_string(k) + ".b"), cfg_.encoder_out(k), pre);
        ChannelsT<T> post = leaky(pre);
        cur = avgpool2(post);
        cache->enc_pre.push_back(std::move(pre));
        cache->enc_pooled.push_back(cur);
    }

    // U-shaped decoder with skip connections, coarse to fine
    cache->dec_cat.resize(std::size_t(K));
    cache->dec_pre_a.resize(std::size_t(K));
    cache->dec_post_a.resize(std::size_t(K));
    cache->dec_pre_b.resize(std::size_t(K));
    cache->dec_post_b.resize(std::size_t(K));

    ChannelsT<T> up_src = cache->enc_pooled[std::size_t(K - 1)];
    for (int k = K - 1; k >= 0; --k) {
        const std::string p = "dec" + std::to_string(k);
        const Shape3 sk = stage_shape<T>(full, k);
        ChannelsT<T> up = resample_channels(up_src, sk);
        const ChannelsT<T>& skip = (k == 0) ? cache->x0 : cache->enc_pooled[std::size_t(k - 1)];
        ChannelsT<T> cat = concat(up, skip);
        ChannelsT<T> pre_a;
        conv3_forward(cat, params_.values(p + ".a.w"), params_.values(p + ".a.b"),
                      cfg_.decoder_out(k), pre_a);
        ChannelsT<T> post_a = leaky(pre_a);
        ChannelsT<T> pre_b;
        conv3_forward(post_a, params_.values(p + ".b.w"), params_.values(p + ".b.b"),
                      cfg_.decoder_out(k), pre_b);
        ChannelsT<T> post_b = leaky(pre_b);
        up_src = post_b;

        const std::size_t ki = std::size_t(k);
        cache->dec_cat[ki] = std::move(cat);
        cache->dec_pre_a[ki] = std::move(pre_a);
        cache->dec_post_a[ki] = std::move(post_a);
        cache->dec_pre_b[ki] = std::move(pre_b);
        cache->dec_post_b[ki] = std::move(post_b);
    }

    ChannelsT<T> v3;
    conv3_forward(cache->dec_post_b[0], params_.values("head.w"), params_.values("head.b"), 3, v3);

    BackboneOutputs<T> out;
    out.velocity = field_from(v3, 0, FieldKind::velocity);
    out.phi = scaling_and_squaring(out.velocity, SsConfig{cfg_.ss_steps});
    out.warped = warp_scalar(moving, out.phi);
    cache->velocity = out.velocity;
    cache->phi = out.phi;

    if (record)
        cache_ = std::move(cache);
    else
        cache_.reset();
    return out;
}

template <class T>
void Model<T>::backward_backbone(const VolumeT<T>& grad_warped, const FieldT<T>& grad_u) {
    if (!cache_ || cache_->mode != ModelMode::backbone)
        throw std::invalid_argument("backward_backbone: no recorded backbone forward");
    const int K = cfg_.stages;
    const Shape3 full = cache_->x0.shape;
    params_.zero_grad();

    // chain loss gradients through warp and scaling-and-squaring
    FieldT<T> gphi = warp_scalar_vjp_phi(cache_->moving, cache_->phi, grad_warped);
    for (std::size_t v = 0; v < gphi.data.size(); ++v)
        gphi.data[v] = T(double(gphi.data[v]) + double(grad_u.data[v]));
    FieldT<T> gv = ss_vjp(cache_->velocity, SsConfig{cfg_.ss_steps}, gphi);

    ChannelsT<T> gv3(full, 3);
    for (int c = 0; c < 3; ++c)
        std::memcpy(gv3.channel(c), gv.channel(c), gv3.plane() * sizeof(T));

    conv3_backward_params(cache_->dec_post_b[0], gv3, params_.grads("head.w"),
                          params_.grads("head.b"));
    ChannelsT<T> gD;
    conv3_backward_input(gv3, params_.values("head.w"), cfg_.decoder_out(0), gD);

    std::vector<ChannelsT<T>> gE;
    gE.resize(std::size_t(K));
    for (int k = 1; k <= K; ++k)
        gE[std::size_t(k - 1)] = ChannelsT<T>(stage_shape<T>(full, k), cfg_.encoder_out(k), T(0));

    for (int k = 0; k <= K - 1; ++k) {
        const std::string p = "dec" + std::to_string(k);
        const std::size_t ki = std::size_t(k);
        ChannelsT<T> gpost_b = std::move(gD);
        ChannelsT<T> gpre_b = leaky_backward(gpost_b, cache_->dec_pre_b[ki]);
        conv3_backward_params(cache_->dec_post_a[ki], gpre_b, params_.grads(p + ".b.w"),
                              params_.grads(p + ".b.b"));
        ChannelsT<T> gpost_a;
        conv3_backward_input(gpre_b, params_.values(p + ".b.w"), cfg_.decoder_out(k), gpost_a);
        ChannelsT<T> gpre_a = leaky_backward(gpost_a, cache_->dec_pre_a[ki]);
        conv3_backward_params(cache_->dec_cat[ki], gpre_a, params_.grads(p + ".a.w"),
                              params_.grads(p + ".a.b"));
        ChannelsT<T> gcat;
        conv3_backward_input(gpre_a, params_.values(p + ".a.w"), cfg_.decoder_in(k), gcat);

        const int up_ch = (k == K - 1) ? cfg_.encoder_out(K) : cfg_.decoder_out(k + 1);
        ChannelsT<T> gup = take_channels(gcat, 0, up_ch);
        ChannelsT<T> gskip = take_channels(gcat, up_ch, cfg_.decoder_skip(k));
        if (k > 0) {
            for (std::size_t v = 0; v < gskip.data.size(); ++v)
                gE[ki - 1].data[v] = T(double(gE[ki - 1].data[v]) + double(gskip.data[v]));
        }
        const Shape3 src_shape =
            (k == K - 1) ? stage_shape<T>(full, K) : stage_shape<T>(full, k + 1);
        ChannelsT<T> gsrc = resample_channels_adjoint(gup, src_shape);
        if (k == K - 1) {
            for (std::size_t v = 0; v < gsrc.data.size(); ++v)
                gE[std::size_t(K - 1)].data[v] =
                    T(double(gE[std::size_t(K - 1)].data[v]) + double(gsrc.data[v]));
        } else {
            gD = std::move(gsrc);  // gradient into D_{k+1}
        }
    }

    for (int k = K; k >= 1; --k) {
        const std::size_t ki = std::size_t(k - 1);
        const Shape3 pre_shape = stage_shape<T>(full, k - 1);
        ChannelsT<T> gpost = avgpool2_backward(gE[ki], pre_shape);
        ChannelsT<T> gpre = leaky_backward(gpost, cache_->enc_pre[ki]);
        conv3_backward_params(cache_->enc_in[ki], gpre,
                              params_.grads("enc" + std::to_string(k) + ".w"),
                              params_.grads("enc" + std::to_string(k) + ".b"));
        if (k > 1) {
            ChannelsT<T> gin;
            conv3_backward_input(gpre, params_.values("enc" + std::to_string(k) + ".w"),
                                 cfg_.encoder_in(k), gin);
            for (std::size_t v = 0; v < gin.data.size(); ++v)
                gE[ki - 1].data[v] = T(double(gE[ki - 1].data[v]) + double(gin.data[v]));
        }
    }
}

// -------------------------------------------------------------- checkpoints

namespace {

constexpr char kMagic[4] = {'R', 'R', 'E', 'G'};
constexpr std::uint32_t kVersion = 1;

void write_u32(std::ostream& os, std::uint32_t v) { os.write(reinterpret_cast<const char*>(&v), 4); }
void write_u64(std::ostream& os, std::uint64_t v) { os.write(reinterpret_cast<const char*>(&v), 8); }
std::uint32_t read_u32(std::istream& is) {
    std::uint32_t v = 0;
    is.read(reinterpret_cast<char*>(&v), 4);
    return v;
}
std::uint64_t read_u64(std::istream& is) {
    std::uint64_t v = 0;
    is.read(reinterpret_cast<char*>(&v), 8);
    return v;
}

void write_config(std::ostream& os, const ModelConfig& cfg) {
    write_u32(os, std::uint32_t(cfg.mode));
    write_u32(os, std::uint32_t(cfg.stages));
    write_u32(os, std::uint32_t(cfg.base_channels));
    write_u32(os, std::uint32_t(cfg.decoder_width));
    write_u32(os, std::uint32_t(cfg.ss_steps));
    write_u64(os, cfg.init_seed);
}

ModelConfig read_config(std::istream& is) {
    ModelConfig cfg;
    cfg.mode = ModelMode(read_u32(is));
    cfg.stages = int(read_u32(is));
    cfg.base_channels = int(read_u32(is));
    cfg.decoder_width = int(read_u32(is));
    cfg.ss_steps = int(read_u32(is));
    cfg.init_seed = read_u64(is);
    return cfg;
}

}  // namespace

template <class T>
void save_checkpoint(const Model<T>& model, const std::string& path) {
    const std::string tmp = path + ".tmp";
    {
        std::ofstream os(tmp, std::ios::binary);
        if (!os) throw std::runtime_error("cannot open checkpoint for writing: " + path);
        os.write(kMagic, 4);
        write_u32(os, kVersion);
        write_config(os, model.config());
        const ParamStore<T>& ps = model.params();
        write_u32(os, std::uint32_t(ps.tensors.size()));
        for (const ParamTensor<T>& t : ps.tensors) {
            write_u32(os, std::uint32_t(t.name.size()));
            os.write(t.name.data(), std::streamsize(t.name.size()));
            write_u32(os, std::uint32_t(t.dims.size()));
            for (int d : t.dims) write_u32(os, std::uint32_t(d));
            for (std::size_t i = 0; i < t.size; ++i) {
                const float f = float(ps.flat[t.offset + i]);
                os.write(reinterpret_cast<const char*>(&f), 4);
            }
        }
        if (!os) throw std::runtime_error("checkpoint write failed: " + path);
    }
    if (std::rename(tmp.c_str(), path.c_str()) != 0)
        throw std::runtime_error("checkpoint rename failed: " + path);
}

ModelConfig peek_checkpoint_config(const std::string& path) {
    std::ifstream is(path, std::ios::binary);
    if (!is) throw std::runtime_error("cannot open checkpoint: " + path);
    char magic[4];
    is.read(magic, 4);
    if (!is || std::memcmp(magic, kMagic, 4) != 0)
        throw std::runtime_error("not a checkpoint file (bad magic): " + path);
    const std::uint32_t version = read_u32(is);
    if (version != kVersion)
        throw std::runtime_error("unsupported checkpoint version " + std::to_string(version));
    return read_config(is);
}

template <class T>
Model<T> load_checkpoint(const std::string& path) {
    std::ifstream is(path, std::ios::binary);
    if (!is) throw std::runtime_error("cannot open checkpoint: " + path);
    char magic[4];
    is.read(magic, 4);
    if (!is || std::memcmp(magic, kMagic, 4) != 0)
        throw std::runtime_error("not a checkpoint file (bad magic): " + path);
    const std::uint32_t version = read_u32(is);
    if (version != kVersion)
        throw std::runtime_error("unsupported checkpoint version " + std::to_string(version));
    Model<T> model(read_config(is));

    const std::uint32_t count = read_u32(is);
    if (count != model.params().tensors.size())
        throw std::runtime_error("checkpoint tensor count mismatch");
    for (std::uint32_t t = 0; t < count; ++t) {
        const std::uint32_t name_len = read_u32(is);
        std::string name(name_len, '\0');
        is.read(name.data(), name_len);
        const std::uint32_t ndims = read_u32(is);
        std::vector<int> dims(ndims);
        for (auto& d : dims) d = int(read_u32(is));
        const ParamTensor<T>& pt = model.params().tensor(name);
        if (pt.dims != dims) throw std::runtime_error("checkpoint tensor shape mismatch: " + name);
        std::span<T> dst = model.params().values(name);
        for (std::size_t i = 0; i < pt.size; ++i) {
            float f = 0.f;
            is.read(reinterpret_cast<char*>(&f), 4);
            dst[i] = T(f);
        }
    }
    if (!is) throw std::runtime_error("truncated checkpoint: " + path);
    return model;
}

template <class T>
void transfer_encoder(const Model<T>& pretrained, Model<T>& backbone) {
    const ModelConfig& a = pretrained.config();
    const ModelConfig& b = backbone.config();
    if (a.stages != b.stages || a.base_channels != b.base_channels)
        throw std::invalid_argument("transfer_encoder: encoder configs do not match (stages " +
                                    std::to_string(a.stages) + " vs " + std::to_string(b.stages) +
                                    ", base " + std::to_string(a.base_channels) + " vs " +
                                    std::to_string(b.base_channels) + ")");
    for (const ParamTensor<T>& t : pretrained.params().tensors) {
        if (t.name.rfind("enc", 0) != 0) continue;
        std::span<const T> src = pretrained.params().values(t.name);
        std::span<T> dst = backbone.params().values(t.name);
        std::copy(src.begin(), src.end(), dst.begin());
    }
}

// explicit instantiations
template class ParamStore<float>;
template class ParamStore<double>;
template class Model<float>;
template class Model<double>;
template void conv3_forward<float>(const ChannelsT<float>&, std::span<const float>,
                                   std::span<const float>, int, ChannelsT<float>&);
template void conv3_forward<double>(const ChannelsT<double>&, std::span<const double>,
                                    std::span<const double>, int, ChannelsT<double>&);
template void conv3_forward_serial<float>(const ChannelsT<float>&, std::span<const float>,
                                          std::span<const float>, int, ChannelsT<float>&);
template void conv3_forward_serial<double>(const ChannelsT<double>&, std::span<const double>,
                                           std::span<const double>, int, ChannelsT<double>&);
template void conv3_backward_input<float>(const ChannelsT<float>&, std::span<const float>, int,
                                          ChannelsT<float>&);
template void conv3_backward_input<double>(const ChannelsT<double>&, std::span<const double>, int,
                                           ChannelsT<double>&);
template void conv3_backward_params<float>(const ChannelsT<float>&, const ChannelsT<float>&,
                                           std::span<float>, std::span<float>);
template void conv3_backward_params<double>(const ChannelsT<double>&, const ChannelsT<double>&,
                                            std::span<double>, std::span<double>);
template void save_checkpoint<float>(const Model<float>&, const std::string&);
template void save_checkpoint<double>(const Model<double>&, const std::string&);
template Model<float> load_checkpoint<float>(const std::string&);
template Model<double> load_checkpoint<double>(const std::string&);
template void transfer_encoder<float>(const Model<float>&, Model<float>&);
template void transfer_encoder<double>(const Model<double>&, Model<double>&);

}  // namespace rreg::net
