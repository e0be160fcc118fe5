#include "aosense/volume.hpp"

#include <cstdio>
#include <cstring>
#include <fstream>
#include <stdexcept>

namespace aosense {

using nlohmann::json;

double Volume::sum() const {
    double s = 0.0;
    for (float v : data) s += v;
    return s;
}

float Volume::max_value() const {
    float m = data.empty() ? 0.0f : data[0];
    for (float v : data)
        if (v > m) m = v;
    return m;
}

void atomic_write_file(const std::string& path, const std::string& bytes) {
    const std::string tmp = path + ".tmp";
    {
        std::ofstream out(tmp, std::ios::binary | std::ios::trunc);
        if (!out) throw std::runtime_error("cannot open for write: " + tmp);
        out.write(bytes.data(), static_cast<std::streamsize>(bytes.size()));
        if (!out) throw std::runtime_error("short write: " + tmp);
    }
    if (std::rename(tmp.c_str(), path.c_str()) != 0)
        throw std::runtime_error("rename failed: " + path);
}

void write_volume(const Volume& v, const std::string& path) {
    json header = {
        {"magic", "AOSV1"},
        {"dtype", "f32le"},
        {"shape", v.shape},
        {"voxel_um", v.voxel_um},
        {"meta", v.meta},
    };
    std::string bytes = header.dump();
    bytes.push_back('\n');
    const std::size_t payload = v.data.size() * sizeof(float);
    const std::size_t head = bytes.size();
    bytes.resize(head + payload);
    // Assumes little-endian host; this project only targets x86-64.
    std::memcpy(bytes.data() + head, v.data.data(), payload);
    atomic_write_file(path, bytes);
}

Volume read_volume(const std::string& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw std::runtime_error("cannot open volume: " + path);
    std::string line;
    if (!std::getline(in, line))
        throw std::runtime_error("missing container header: " + path);

    json header;
    try {
        header = json::parse(line);
    } catch (const json::exception& e) {
        throw std::runtime_error("bad container header in " + path + ": " + e.what());
    }
    if (header.value("magic", "") != "AOSV1")
        throw std::runtime_error("not an AOSV1 container: " + path);
    if (header.value("dtype", "") != "f32le")
        throw std::runtime_error("unsupported dtype in " + path);

    Volume v;
    const auto shape = header.at("shape").get<std::vector<long>>();
    if (shape.size() != 3) throw std::runtime_error("shape must have 3 dims: " + path);
    v.shape = {static_cast<int>(shape[0]), static_cast<int>(shape[1]),
               static_cast<int>(shape[2])};
    if (header.contains("voxel_um")) {
        const auto vox = header.at("voxel_um").get<std::vector<double>>();
        if (vox.size() == 3) v.voxel_um = {vox[0], vox[1], vox[2]};
    }
    v.meta = header.value("meta", json::object());

    const std::size_t n = static_cast<std::size_t>(v.shape[0]) * v.shape[1] * v.shape[2];
    v.data.resize(n);
    in.read(reinterpret_cast<char*>(v.data.data()),
            static_cast<std::streamsize>(n * sizeof(float)));
    if (static_cast<std::size_t>(in.gcount()) != n * sizeof(float))
        throw std::runtime_error("payload length mismatch in " + path);
    return v;
}

}  // namespace aosense
