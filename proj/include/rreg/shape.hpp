#pragma once

#include <array>
#include <cstddef>
#include <cstdint>
#include <stdexcept>
#include <string>

namespace rreg {

// Dense 3D grid extent. Data layout everywhere is x-fastest:
// index(i,j,k) = i + nx*(j + ny*k).
struct Shape3 {
    int nx = 0;
    int ny = 0;
    int nz = 0;

    constexpr Shape3() = default;
    constexpr Shape3(int x, int y, int z) : nx(x), ny(y), nz(z) {}
    explicit constexpr Shape3(int n) : nx(n), ny(n), nz(n) {}

    constexpr std::size_t voxels() const {
        return std::size_t(nx) * std::size_t(ny) * std::size_t(nz);
    }
    constexpr std::size_t index(int i, int j, int k) const {
        return std::size_t(i) + std::size_t(nx) * (std::size_t(j) + std::size_t(ny) * std::size_t(k));
    }
    constexpr int dim(int axis) const { return axis == 0 ? nx : (axis == 1 ? ny : nz); }
    constexpr bool contains(int i, int j, int k) const {
        return i >= 0 && i < nx && j >= 0 && j < ny && k >= 0 && k < nz;
    }
    constexpr bool operator==(const Shape3& o) const {
        return nx == o.nx && ny == o.ny && nz == o.nz;
    }
    constexpr bool operator!=(const Shape3& o) const { return !(*this == o); }

    bool valid() const { return nx >= 2 && ny >= 2 && nz >= 2; }

    std::string str() const {
        return std::to_string(nx) + "x" + std::to_string(ny) + "x" + std::to_string(nz);
    }
};

inline void require(bool cond, const std::string& msg) {
    if (!cond) throw std::invalid_argument(msg);
}

inline void require_same_shape(const Shape3& a, const Shape3& b, const char* where) {
    if (a != b)
        throw std::invalid_argument(std::string(where) + ": shape mismatch " + a.str() + " vs " + b.str());
}

using Spacing = std::array<float, 3>;  // mm per voxel

}  // namespace rreg
