#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <cstdio>
#include <cstring>

#include "rreg/net.hpp"
#include "support.hpp"

using namespace rreg;
using namespace rreg::net;

namespace {

template <class T>
void randomize_params(Model<T>& model, std::uint64_t seed, double scale = 0.05) {
    SplitMix rng(seed);
    for (T& x : model.params().flat) x = T(x + scale * rng.next_range(-1.0, 1.0));
}

template <class T>
VolumeT<T> random_image(const Shape3& s, std::uint64_t seed) {
    VolumeT<T> v(s);
    SplitMix rng(seed);
    for (T& x : v.data) x = T(rng.next_range(0.0, 1.0));
    return v;
}

}  // namespace

TEST_CASE("encoder shape contract holds for K in {2,3,4}") {
    for (int K : {2, 3, 4}) {
        CAPTURE(K);
        ModelConfig cfg;
        cfg.stages = K;
        cfg.base_channels = 4;
        Model<float> model(cfg);
        Shape3 s(32, 32, 32);
        VolumeT<float> f = random_image<float>(s, 1), m = random_image<float>(s, 2);
        PretrainOutputs<float> out = model.forward_pretrain(f, m);
        CHECK(out.decoders.size() == std::size_t(K));
        CHECK(out.ensemble.mean.shape == s);
        for (int k = 1; k <= K; ++k) CHECK(out.decoders[std::size_t(k - 1)].mean.shape == s);
        CHECK(out.phi.shape == s);
        CHECK(out.warped.shape == s);
    }
}

TEST_CASE("indivisible input shape throws") {
    ModelConfig cfg;
    cfg.stages = 4;
    Model<float> model(cfg);
    VolumeT<float> f(Shape3(24, 24, 24)), m(Shape3(24, 24, 24));
    CHECK_THROWS_AS(model.forward_pretrain(f, m), std::invalid_argument);
}

TEST_CASE("zero-initialized heads give the identity transform") {
    ModelConfig cfg;
    cfg.stages = 3;
    cfg.base_channels = 4;
    Model<float> model(cfg);
    Shape3 s(16, 16, 16);
    VolumeT<float> f = random_image<float>(s, 3), m = random_image<float>(s, 4);
    PretrainOutputs<float> out = model.forward_pretrain(f, m);
    for (float x : out.ensemble.mean.data) CHECK(x == 0.f);
    CHECK(std::memcmp(out.warped.data.data(), m.data.data(), m.data.size() * sizeof(float)) == 0);

    ModelConfig bb = cfg;
    bb.mode = ModelMode::backbone;
    Model<float> backbone(bb);
    BackboneOutputs<float> bout = backbone.forward_backbone(f, m);
    for (float x : bout.velocity.data) CHECK(x == 0.f);
    CHECK(std::memcmp(bout.warped.data.data(), m.data.data(), m.data.size() * sizeof(float)) == 0);
}

TEST_CASE("zero input with zero biases gives zero features (velocity stays zero)") {
    ModelConfig cfg;
    cfg.stages = 2;
    cfg.base_channels = 4;
    Model<float> model(cfg);
    Shape3 s(8, 8, 8);
    VolumeT<float> z(s, 0.f);
    PretrainOutputs<float> out = model.forward_pretrain(z, z);
    for (float x : out.ensemble.mean.data) CHECK(x == 0.f);
    for (float x : out.ensemble.log_variance.data) CHECK(x == 0.f);
}

TEST_CASE("forward is deterministic") {
    ModelConfig cfg;
    cfg.stages = 2;
    cfg.base_channels = 4;
    Model<float> model(cfg);
    randomize_params(model, 11);
    Shape3 s(8, 8, 8);
    VolumeT<float> f = random_image<float>(s, 5), m = random_image<float>(s, 6);
    PretrainOutputs<float> a = model.forward_pretrain(f, m);
    PretrainOutputs<float> b = model.forward_pretrain(f, m);
    CHECK(a.ensemble.mean.data == b.ensemble.mean.data);
    CHECK(a.warped.data == b.warped.data);
}

TEST_CASE("parameter accounting") {
    ModelConfig cfg;  // desk defaults: K=4, base 8, D=8
    Model<float> pretrain(cfg);
    ModelConfig bb = cfg;
    bb.mode = ModelMode::backbone;
    Model<float> backbone(bb);

    SUBCASE("backbone has more parameters than the pretrain configuration") {
        CHECK(backbone.param_count() > pretrain.param_count());
    }
    SUBCASE("each lightweight decoder is smaller than the backbone stage decoding its level") {
        for (int K : {2, 3, 4}) {
            ModelConfig c;
            c.stages = K;
            Model<float> p(c);
            ModelConfig b2 = c;
            b2.mode = ModelMode::backbone;
            Model<float> bk(b2);
            for (int k = 1; k <= K; ++k) {
                CAPTURE(K);
                CAPTURE(k);
                CHECK(p.lightweight_decoder_param_count(k) <
                      bk.backbone_stage_param_count(k - 1));
            }
        }
    }
    SUBCASE("flat view length equals the sum of tensor sizes") {
        std::size_t total = 0;
        for (const auto& t : pretrain.params().tensors) total += t.size;
        CHECK(total == pretrain.param_count());
    }
}

TEST_CASE("pretrain-mode parameter gradients match finite differences") {
    ModelConfig cfg;
    cfg.stages = 2;
    cfg.base_channels = 2;
    cfg.decoder_width = 2;
    cfg.ss_steps = 4;
    Model<double> model(cfg);
    randomize_params(model, 21);

    Shape3 s(8, 8, 8);
    VolumeT<double> f = random_image<double>(s, 7), m = random_image<double>(s, 8);
    loss::LossWeights w;
    w.eta = 1e-3;
    loss::NccConfig ncc;
    SsConfig ss{cfg.ss_steps};

    PretrainOutputs<double> outs = model.forward_pretrain(f, m);
    loss::PretrainResult<double> res =
        loss::pretrain_loss(outs.ensemble, outs.decoders, f, m, nullptr, nullptr, w, ncc, ss,
                            loss::SimilarityKind::ncc);
    model.backward_pretrain(res.grads);

    std::vector<double> analytic(model.params().flat_grad.begin(),
                                 model.params().flat_grad.end());
    auto eval = [&]() {
        PretrainOutputs<double> o = model.forward_pretrain(f, m, false);
        return loss::pretrain_loss(o.ensemble, o.decoders, f, m, nullptr, nullptr, w, ncc, ss,
                                   loss::SimilarityKind::ncc)
            .value;
    };
    testsup::FdReport rep = testsup::check_gradient(model.params().flat, analytic, eval, 1e-5, 3);
    CAPTURE(rep.worst_index);
    CHECK(rep.max_rel_err < 1e-3);
}

TEST_CASE("backbone-mode parameter gradients match finite differences") {
    ModelConfig cfg;
    cfg.mode = ModelMode::backbone;
    cfg.stages = 2;
    cfg.base_channels = 2;
    cfg.decoder_width = 2;
    cfg.ss_steps = 4;
    Model<double> model(cfg);
    randomize_params(model, 23);

    Shape3 s(8, 8, 8);
    VolumeT<double> f = random_image<double>(s, 9), m = random_image<double>(s, 10);
    loss::NccConfig ncc;

    BackboneOutputs<double> outs = model.forward_backbone(f, m);
    loss::FinetuneResult<double> res =
        loss::finetune_loss(outs.warped, f, displacement_of(outs.phi), 1.0, ncc);
    model.backward_backbone(res.grad_warped, res.grad_u);

    std::vector<double> analytic(model.params().flat_grad.begin(),
                                 model.params().flat_grad.end());
    auto eval = [&]() {
        BackboneOutputs<double> o = model.forward_backbone(f, m, false);
        return loss::finetune_loss(o.warped, f, displacement_of(o.phi), 1.0, ncc).value;
    };
    testsup::FdReport rep = testsup::check_gradient(model.params().flat, analytic, eval, 1e-5, 7);
    CAPTURE(rep.worst_index);
    CHECK(rep.max_rel_err < 1e-3);
}

TEST_CASE("no dead parameters at a generic point") {
    ModelConfig cfg;
    cfg.stages = 2;
    cfg.base_channels = 2;
    cfg.decoder_width = 2;
    cfg.ss_steps = 2;
    Model<double> model(cfg);
    randomize_params(model, 31);

    Shape3 s(8, 8, 8);
    VolumeT<double> f = random_image<double>(s, 11), m = random_image<double>(s, 12);
    loss::LossWeights w;
    w.eta = 1e-2;
    PretrainOutputs<double> outs = model.forward_pretrain(f, m);
    loss::PretrainResult<double> res = loss::pretrain_loss(
        outs.ensemble, outs.decoders, f, m, nullptr, nullptr, w, loss::NccConfig{}, SsConfig{2},
        loss::SimilarityKind::ncc);
    model.backward_pretrain(res.grads);

    std::size_t dead = 0;
    for (double g : model.params().flat_grad)
        if (g == 0.0) ++dead;
    CHECK(dead == 0);
}

TEST_CASE("two identical backward passes give bit-identical gradients") {
    ModelConfig cfg;
    cfg.stages = 2;
    cfg.base_channels = 4;
    Model<float> model(cfg);
    randomize_params(model, 41);
    Shape3 s(8, 8, 8);
    VolumeT<float> f = random_image<float>(s, 13), m = random_image<float>(s, 14);
    loss::LossWeights w;
    w.eta = 1e-3;

    std::vector<float> g1, g2;
    for (int pass = 0; pass < 2; ++pass) {
        PretrainOutputs<float> outs = model.forward_pretrain(f, m);
        loss::PretrainResult<float> res = loss::pretrain_loss(
            outs.ensemble, outs.decoders, f, m, nullptr, nullptr, w, loss::NccConfig{},
            SsConfig{cfg.ss_steps}, loss::SimilarityKind::ncc);
        model.backward_pretrain(res.grads);
        (pass == 0 ? g1 : g2) = model.params().flat_grad;
    }
    CHECK(g1 == g2);
}

TEST_CASE("zero upstream gradients give zero parameter gradients") {
    ModelConfig cfg;
    cfg.stages = 2;
    cfg.base_channels = 2;
    Model<float> model(cfg);
    randomize_params(model, 43);
    Shape3 s(8, 8, 8);
    VolumeT<float> f = random_image<float>(s, 15), m = random_image<float>(s, 16);
    model.forward_pretrain(f, m);
    loss::PretrainGrads<float> g;
    g.mu_ens = FieldT<float>(s, FieldKind::velocity, 0.f);
    g.logvar_ens = ChannelsT<float>(s, 3, 0.f);
    for (int k = 0; k < 2; ++k) {
        g.mu_dec.emplace_back(s, FieldKind::velocity, 0.f);
        g.logvar_dec.emplace_back(s, 3, 0.f);
    }
    model.backward_pretrain(g);
    for (float x : model.params().flat_grad) CHECK(x == 0.f);
}

TEST_CASE("backward without recorded forward throws") {
    ModelConfig cfg;
    cfg.stages = 2;
    Model<float> model(cfg);
    loss::PretrainGrads<float> g;
    CHECK_THROWS_AS(model.backward_pretrain(g), std::invalid_argument);
}

TEST_CASE("checkpoint round-trip is bit-exact") {
    ModelConfig cfg;
    cfg.stages = 3;
    cfg.base_channels = 4;
    cfg.init_seed = 77;
    Model<float> model(cfg);
    randomize_params(model, 51);

    const std::string path = "ckpt_roundtrip_test.rregckpt";
    save_checkpoint(model, path);
    Model<float> loaded = load_checkpoint<float>(path);
    CHECK(loaded.config().stages == 3);
    CHECK(loaded.config().base_channels == 4);
    CHECK(loaded.config().init_seed == 77);
    CHECK(loaded.params().flat == model.params().flat);

    ModelConfig peeked = peek_checkpoint_config(path);
    CHECK(peeked.stages == 3);
    CHECK(int(peeked.mode) == int(ModelMode::pretrain));
    std::remove(path.c_str());
}

TEST_CASE("load rejects non-checkpoint files") {
    const std::string path = "ckpt_bad_test.rregckpt";
    {
        std::FILE* fp = std::fopen(path.c_str(), "wb");
        std::fputs("not a checkpoint", fp);
        std::fclose(fp);
    }
    CHECK_THROWS(load_checkpoint<float>(path));
    std::remove(path.c_str());
}

TEST_CASE("transfer_encoder") {
    ModelConfig pcfg;
    pcfg.stages = 3;
    pcfg.base_channels = 4;
    Model<float> pretrained(pcfg);
    randomize_params(pretrained, 61);

    ModelConfig bcfg = pcfg;
    bcfg.mode = ModelMode::backbone;
    bcfg.init_seed = 999;
    Model<float> backbone(bcfg);

    SUBCASE("encoder bytes equal the source after transfer; decoders stay fresh") {
        std::vector<float> fresh_dec(backbone.params().values("dec0.a.w").begin(),
                                     backbone.params().values("dec0.a.w").end());
        transfer_encoder(pretrained, backbone);
        for (int k = 1; k <= 3; ++k) {
            const std::string name = "enc" + std::to_string(k) + ".w";
            auto src = pretrained.params().values(name);
            auto dst = backbone.params().values(name);
            CHECK(std::memcmp(src.data(), dst.data(), src.size() * sizeof(float)) == 0);
        }
        auto dec = backbone.params().values("dec0.a.w");
        CHECK(std::memcmp(fresh_dec.data(), dec.data(), dec.size() * sizeof(float)) == 0);
    }
    SUBCASE("mismatched stage count throws") {
        ModelConfig small = bcfg;
        small.stages = 2;
        Model<float> wrong(small);
        CHECK_THROWS_AS(transfer_encoder(pretrained, wrong), std::invalid_argument);
    }
}
