#pragma once

#include <array>
#include <cstdint>
#include <string>
#include <vector>

#include "json.hpp"

namespace aosense {

// Real-valued 3D grid with voxel metadata. Storage is 32-bit float;
// numeric pipelines accumulate in double and cast on the way out.
// Axis order is (z, y, x), row-major with x fastest.
struct Volume {
    std::array<int, 3> shape{0, 0, 0};             // nz, ny, nx
    std::array<double, 3> voxel_um{0.2, 0.125, 0.125};  // dz, dy, dx
    std::vector<float> data;
    nlohmann::json meta = nlohmann::json::object();

    Volume() = default;
    Volume(int nz, int ny, int nx, std::array<double, 3> voxel)
        : shape{nz, ny, nx}, voxel_um(voxel),
          data(static_cast<std::size_t>(nz) * ny * nx, 0.0f) {}

    std::size_t size() const { return data.size(); }
    float& at(int z, int y, int x) {
        return data[(static_cast<std::size_t>(z) * shape[1] + y) * shape[2] + x];
    }
    float at(int z, int y, int x) const {
        return data[(static_cast<std::size_t>(z) * shape[1] + y) * shape[2] + x];
    }
    double sum() const;
    float max_value() const;
};

// Self-describing container: one JSON header line
//   {"magic":"AOSV1","dtype":"f32le","shape":[...],"voxel_um":[...],"meta":{...}}
// followed by '\n' and the raw little-endian float payload, row-major.
void write_volume(const Volume& v, const std::string& path);
Volume read_volume(const std::string& path);

// Write via temp file + rename so readers never observe partial output.
void atomic_write_file(const std::string& path, const std::string& bytes);

}  // namespace aosense
