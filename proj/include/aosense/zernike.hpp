#pragma once

#include <array>
#include <cstdint>
#include <string>
#include <vector>

#include "json.hpp"

namespace aosense {

// ANSI/OSA single-index Zernike bookkeeping for the first 15 modes.
// Modes are orthonormal over the unit disk (mean square = 1), so a
// coefficient in um equals that mode's RMS contribution in um.

inline constexpr int kNumModes = 15;

// Piston, tip, tilt, defocus: carried as always-zero slots so indexing
// matches the ANSI pyramid, never sampled, never predicted.
inline constexpr std::array<int, 4> kExcludedModes{0, 1, 2, 4};
inline constexpr std::array<int, 11> kDetectableModes{3, 5, 6, 7, 8, 9, 10, 11, 12, 13, 14};

struct ZernikeIndex {
    int j = 0;  // ANSI single index
    int n = 0;  // radial order
    int m = 0;  // signed azimuthal frequency
};

ZernikeIndex ansi_to_nm(int j);
int nm_to_ansi(int n, int m);

// Orthonormal Zernike polynomial value at (rho, theta), rho in [0,1].
// Throws std::invalid_argument for an invalid (n, m) pair.
double eval_mode(int n, int m, double rho, double theta);

struct ZernikeCoeffs {
    std::array<double, kNumModes> amps{};  // um RMS per mode

    double& operator[](int j) { return amps[static_cast<std::size_t>(j)]; }
    double operator[](int j) const { return amps[static_cast<std::size_t>(j)]; }

    double rms_um() const;  // l2 norm; equals wavefront RMS by orthonormality
    double rms_waves(double lambda_um) const { return rms_um() / lambda_um; }
    bool finite() const;

    ZernikeCoeffs operator+(const ZernikeCoeffs& o) const;
    ZernikeCoeffs operator-(const ZernikeCoeffs& o) const;
    ZernikeCoeffs operator*(double s) const;
};

void to_json(nlohmann::json& j, const ZernikeCoeffs& c);
void from_json(const nlohmann::json& j, ZernikeCoeffs& c);

struct Wavefront {
    int size = 0;                  // square grid side
    std::vector<double> phase;     // um, undefined (0) outside mask
    std::vector<std::uint8_t> mask;

    double& at(int y, int x) { return phase[static_cast<std::size_t>(y) * size + x]; }
    double at(int y, int x) const { return phase[static_cast<std::size_t>(y) * size + x]; }
    bool in_mask(int y, int x) const { return mask[static_cast<std::size_t>(y) * size + x] != 0; }
};

// Pointwise sum of amplitude-weighted modes over the unit-disk mask.
// Grid spans [-1, 1] with pixel-centre sampling; grid_size >= 32.
Wavefront compose_wavefront(const ZernikeCoeffs& coeffs, int grid_size);

// RMS about the in-mask mean / peak-to-valley over the mask (um).
// Throw on an empty mask.
double wavefront_rms(const Wavefront& w);
double wavefront_pv(const Wavefront& w);

enum class AberrationKind { Single, Bimodal, Powerlaw, Dirichlet };

AberrationKind aberration_kind_from_string(const std::string& s);
std::string to_string(AberrationKind k);

// Draw one aberration. Deterministic per seed; only the 11 detectable
// modes receive mass; amplitudes are non-negative and partition the
// drawn total linearly (Lomax gamma = 0.75 for the powerlaw kind).
ZernikeCoeffs sample_aberration(AberrationKind kind, double alpha_max_um, std::uint64_t seed);

// Rotate the wavefront by theta radians in coefficient space: each
// (n,-|m|),(n,+|m|) twin pair turns by |m|*theta, m = 0 modes unchanged.
// Exactly norm-preserving.
ZernikeCoeffs rotate_coeffs(const ZernikeCoeffs& coeffs, double theta);

// Twin groups among the detectable modes, plus the rotationally
// invariant spherical mode. Used by the confidence module.
struct TwinGroup {
    int m = 0;        // |m| (0 for the invariant group)
    int j_sin = -1;   // ANSI index of the -|m| (sine) mode, -1 if none
    int j_cos = -1;   // ANSI index of the +|m| (cosine) mode
    std::string name;
};
const std::vector<TwinGroup>& twin_groups();

}  // namespace aosense
