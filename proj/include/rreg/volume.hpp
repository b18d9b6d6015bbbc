#pragma once

#include <cstdint>
#include <vector>

#include "rreg/shape.hpp"

namespace rreg {

// Dense 3D scalar grid, one value per voxel.
template <class T>
struct VolumeT {
    Shape3 shape;
    Spacing spacing{1.f, 1.f, 1.f};
    std::vector<T> data;

    VolumeT() = default;
    explicit VolumeT(Shape3 s, T fill = T(0)) : shape(s), data(s.voxels(), fill) {}

    T& at(int i, int j, int k) { return data[shape.index(i, j, k)]; }
    const T& at(int i, int j, int k) const { return data[shape.index(i, j, k)]; }
};

using ScalarVolume = VolumeT<float>;

enum class FieldKind : std::uint8_t { velocity, displacement, deformation };

inline const char* kind_name(FieldKind k) {
    switch (k) {
        case FieldKind::velocity: return "velocity";
        case FieldKind::displacement: return "displacement";
        default: return "deformation";
    }
}

// Dense 3-vector grid stored as three channel planes (channel-major,
// x-fastest within a plane). kind==deformation means values are absolute
// sample coordinates in voxel units (identity grid + displacement).
template <class T>
struct FieldT {
    Shape3 shape;
    FieldKind kind = FieldKind::displacement;
    std::vector<T> data;  // 3 * voxels

    FieldT() = default;
    FieldT(Shape3 s, FieldKind k, T fill = T(0)) : shape(s), kind(k), data(3 * s.voxels(), fill) {}

    std::size_t plane() const { return shape.voxels(); }
    T* channel(int c) { return data.data() + std::size_t(c) * plane(); }
    const T* channel(int c) const { return data.data() + std::size_t(c) * plane(); }
    T& at(int c, int i, int j, int k) { return channel(c)[shape.index(i, j, k)]; }
    const T& at(int c, int i, int j, int k) const { return channel(c)[shape.index(i, j, k)]; }
};

using VectorField = FieldT<float>;

// Multi-channel grid (feature maps, per-label probabilities, gradient
// stacks). Same channel-major layout as FieldT.
template <class T>
struct ChannelsT {
    Shape3 shape;
    int channels = 0;
    std::vector<T> data;

    ChannelsT() = default;
    ChannelsT(Shape3 s, int c, T fill = T(0))
        : shape(s), channels(c), data(std::size_t(c) * s.voxels(), fill) {}

    std::size_t plane() const { return shape.voxels(); }
    T* channel(int c) { return data.data() + std::size_t(c) * plane(); }
    const T* channel(int c) const { return data.data() + std::size_t(c) * plane(); }
};

// Dense integer label grid. Every value lies in [0, label_count).
struct LabelVolume {
    Shape3 shape;
    int label_count = 0;
    std::vector<std::uint16_t> data;

    LabelVolume() = default;
    LabelVolume(Shape3 s, int labels) : shape(s), label_count(labels), data(s.voxels(), 0) {}

    std::uint16_t& at(int i, int j, int k) { return data[shape.index(i, j, k)]; }
    std::uint16_t at(int i, int j, int k) const { return data[shape.index(i, j, k)]; }
};

// Gaussian velocity field: mean plus per-component log-variance.
template <class T>
struct GaussianFieldT {
    FieldT<T> mean;          // kind == velocity
    ChannelsT<T> log_variance;  // 3 channels

    GaussianFieldT() = default;
    explicit GaussianFieldT(Shape3 s)
        : mean(s, FieldKind::velocity), log_variance(s, 3) {}
};

using GaussianField = GaussianFieldT<float>;

}  // namespace rreg
