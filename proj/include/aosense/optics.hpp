#pragma once

#include <array>
#include <string>
#include <vector>

#include "aosense/volume.hpp"
#include "aosense/zernike.hpp"

namespace aosense {

struct OpticsConfig {
    double na = 1.0;           // detection numerical aperture
    double refr_index = 1.33;  // imaging medium
    double lambda_exc_um = 0.488;
    double lambda_det_um = 0.510;
    std::array<double, 3> voxel_um{0.200, 0.125, 0.125};  // dz, dy, dx
    std::array<int, 3> shape{64, 64, 64};                 // nz, ny, nx

    void validate() const;  // throws std::invalid_argument
    double k_na() const;    // pupil cutoff 2*pi*NA/lambda_det, rad/um
    double k_medium() const;  // 2*pi*eta/lambda_det, rad/um
};

// Complex pupil A*exp(i*phi) sampled on the lateral FFT grid of the
// volume (FFT frequency ordering, DC at index 0). Amplitude is zero
// outside the NA support.
struct PupilField {
    int n = 0;  // lateral grid side (= shape y = shape x)
    std::vector<double> amp;
    std::vector<double> phase;  // radians
    std::vector<std::uint8_t> mask;
    std::vector<double> kx, ky;  // angular frequencies per axis, rad/um
    double k_na = 0.0;

    std::size_t idx(int y, int x) const { return static_cast<std::size_t>(y) * n + x; }
};

struct PSF3D {
    std::array<int, 3> shape{0, 0, 0};  // nz, ny, nx
    std::vector<double> intensity;

    double at(int z, int y, int x) const {
        return intensity[(static_cast<std::size_t>(z) * shape[1] + y) * shape[2] + x];
    }
    double sum() const;
    Volume to_volume(const OpticsConfig& cfg) const;
};

enum class LightSheetKind { MBSq35, MBSq30, MBSq50, Sinc, Gaussian };

LightSheetKind light_sheet_kind_from_string(const std::string& s);
std::string to_string(LightSheetKind k);

struct LightSheetProfile {
    LightSheetKind kind = LightSheetKind::MBSq35;
    std::vector<double> intensity_z;  // peak-normalized, sampled at dz
};

// Uniform amplitude 1 inside the NA support, zero phase.
PupilField make_pupil(const OpticsConfig& cfg);

// phase += 2*pi/lambda * wavefront(coeffs) over the NA-normalized disk.
PupilField apply_aberration(const PupilField& pupil, const ZernikeCoeffs& coeffs,
                            double lambda_um);

// Per z plane: |IFFT2(E * exp(i kz z))|^2, emitter at the centre voxel.
// Normalized so the unaberrated PSF for the same config sums to 1.
PSF3D detection_psf(const PupilField& pupil, const OpticsConfig& cfg);

// Same propagation on an axially extended grid of z_factor*nz planes
// (used by the renderer, which crops the core volume afterwards).
PSF3D detection_psf_extended(const PupilField& pupil, const OpticsConfig& cfg,
                             int z_factor);

// Axial excitation cross-section sampled at dz over n_z planes centred
// on focus. Deterministic; peak value 1 at z = 0.
LightSheetProfile light_sheet(LightSheetKind kind, const OpticsConfig& cfg);
LightSheetProfile light_sheet_planes(LightSheetKind kind, const OpticsConfig& cfg,
                                     int n_z);

// Per z-plane scalar multiply. Shapes must agree on z.
PSF3D overall_psf(const PSF3D& det, const LightSheetProfile& sheet);

// OTF-masked Wiener filter: conj(OTF)/(|OTF|^2 + 1/snr) restricted to
// the support of the ideal OTF, inverse transformed, clamped at zero.
// `psf` and `ideal_psf` are centred at the middle voxel.
Volume wiener_deconvolve(const Volume& vol, const PSF3D& psf, double snr_param,
                         const PSF3D& ideal_psf, bool clamp_negative = true);

}  // namespace aosense
