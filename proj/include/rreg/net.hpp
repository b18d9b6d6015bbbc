#pragma once

#include <algorithm>
#include <type_traits>
#include <cstdint>
#include <map>
#include <memory>
#include <span>
#include <string>
#include <vector>

#include "rreg/deform.hpp"
#include "rreg/losses.hpp"
#include "rreg/volume.hpp"

namespace rreg::net {

enum class ModelMode : std::uint8_t { pretrain = 0, backbone = 1 };

struct ModelConfig {
    ModelMode mode = ModelMode::pretrain;
    int stages = 4;          // K encoder stages, halving resolution each
    int base_channels = 8;   // stage-1 width, doubling per stage
    int decoder_width = 8;   // lightweight decoder channels
    int ss_steps = 7;
    std::uint64_t init_seed = 1;

    int encoder_out(int k) const { return base_channels << (k - 1); }  // k in [1, stages]
    int encoder_in(int k) const { return k == 1 ? 2 : encoder_out(k - 1); }
    // Backbone decoder widths mirror the encoder but never drop below
    // 2*base at intermediate scales.
    int decoder_out(int k) const {
        if (k == 0) return base_channels;
        return std::max(encoder_out(k), 2 * base_channels);
    }
    int decoder_skip(int k) const { return k == 0 ? 2 : encoder_out(k); }
    int decoder_in(int k) const {
        const int up = (k == stages - 1) ? encoder_out(stages) : decoder_out(k + 1);
        return up + decoder_skip(k);
    }
};

void validate_config(const ModelConfig& cfg);
void require_divisible(const Shape3& s, int stages);

template <class T>
struct ParamTensor {
    std::string name;
    std::vector<int> dims;
    std::size_t offset = 0;
    std::size_t size = 0;
};

// Named tensors backed by one flat value/gradient buffer.
template <class T>
class ParamStore {
  public:
    std::size_t add(const std::string& name, std::vector<int> dims);
    void finalize();  // allocates values/grads

    std::span<T> values(const std::string& name);
    std::span<const T> values(const std::string& name) const;
    std::span<T> grads(const std::string& name);
    const ParamTensor<T>& tensor(const std::string& name) const;
    bool has(const std::string& name) const { return index_.count(name) != 0; }

    std::vector<ParamTensor<T>> tensors;
    std::vector<T> flat;       // parameters
    std::vector<T> flat_grad;  // gradients, same layout

    void zero_grad();

  private:
    std::map<std::string, std::size_t> index_;
    std::size_t offset_acc_ = 0;
};

template <class T>
struct PretrainOutputs {
    GaussianFieldT<T> ensemble;               // full resolution
    std::vector<GaussianFieldT<T>> decoders;  // per stage, upsampled to full resolution
    FieldT<T> phi;                            // SS(mu_ens)
    VolumeT<T> warped;                        // m warped by phi
};

template <class T>
struct BackboneOutputs {
    FieldT<T> velocity;
    FieldT<T> phi;
    VolumeT<T> warped;
};

template <class T>
struct ForwardCache;  // defined in net.cpp

// The registration network. A model instance is single-writer: forward and
// backward mutate recorded state and must not run concurrently on one
// instance.
template <class T>
class Model {
  public:
    explicit Model(const ModelConfig& cfg);
    Model(const Model& other);
    Model& operator=(const Model& other);
    Model(Model&&) noexcept;
    Model& operator=(Model&&) noexcept;
    ~Model();

    const ModelConfig& config() const { return cfg_; }
    ParamStore<T>& params() { return params_; }
    const ParamStore<T>& params() const { return params_; }

    // Fan-in-scaled normal init; registration heads are zero-initialized so
    // the initial transform is the identity.
    void init_params(std::uint64_t seed);

    PretrainOutputs<T> forward_pretrain(const VolumeT<T>& fixed, const VolumeT<T>& moving,
                                        bool record = true);
    void backward_pretrain(const loss::PretrainGrads<T>& g);

    BackboneOutputs<T> forward_backbone(const VolumeT<T>& fixed, const VolumeT<T>& moving,
                                        bool record = true);
    void backward_backbone(const VolumeT<T>& grad_warped, const FieldT<T>& grad_u);

    std::size_t param_count() const { return params_.flat.size(); }
    std::size_t lightweight_decoder_param_count(int k) const;  // k in [1, stages]
    std::size_t backbone_stage_param_count(int k) const;       // k in [0, stages-1]

  private:
    ModelConfig cfg_;
    ParamStore<T> params_;
    std::unique_ptr<ForwardCache<T>> cache_;

    void register_params();
};

// Checkpoint file: magic "RREG", version, config block, named parameter
// table (name, dims, little-endian f32 payload).
template <class T>
void save_checkpoint(const Model<T>& model, const std::string& path);

template <class T>
Model<T> load_checkpoint(const std::string& path);

ModelConfig peek_checkpoint_config(const std::string& path);

// Copy encoder parameters from a pretraining checkpoint into a backbone
// model; everything else keeps its fresh initialization, nothing is frozen.
template <class T>
void transfer_encoder(const Model<T>& pretrained, Model<T>& backbone);

// --- primitive layers (exposed for tests and the benchmark tool) ---

constexpr double kLeakySlope = 0.2;

template <class T>
void conv3_forward(const ChannelsT<T>& in, std::type_identity_t<std::span<const T>> w,
                   std::type_identity_t<std::span<const T>> b, int cout, ChannelsT<T>& out);
template <class T>
void conv3_backward_input(const ChannelsT<T>& gout, std::type_identity_t<std::span<const T>> w,
                          int cin, ChannelsT<T>& gin);
template <class T>
void conv3_backward_params(const ChannelsT<T>& in, const ChannelsT<T>& gout, std::span<T> gw,
                           std::span<T> gb);
template <class T>
void conv3_forward_serial(const ChannelsT<T>& in, std::type_identity_t<std::span<const T>> w,
                          std::type_identity_t<std::span<const T>> b, int cout,
                          ChannelsT<T>& out);

extern template class Model<float>;
extern template class Model<double>;
extern template class ParamStore<float>;
extern template class ParamStore<double>;

}  // namespace rreg::net
