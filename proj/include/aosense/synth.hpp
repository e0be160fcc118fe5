#pragma once

#include <array>
#include <cstdint>
#include <string>
#include <vector>

#include "aosense/fft.hpp"
#include "aosense/optics.hpp"
#include "aosense/volume.hpp"
#include "aosense/zernike.hpp"

namespace aosense {

struct PunctaField {
    int count = 0;
    std::vector<std::array<double, 3>> positions_um;  // (z, y, x) within FOV
    std::vector<double> fwhm_um;                      // from the configured set
    double photons = 0.0;                             // integrated N_o per punctum
};

struct CameraModel {
    double qe = 0.82;          // quantum efficiency
    double read_noise = 1.5;   // counts RMS
    double baseline = 100.0;   // counts

    void validate() const;
};

struct GenConfig {
    OpticsConfig optics;
    LightSheetKind sheet = LightSheetKind::MBSq35;
    int j_max = 5;
    std::array<double, 2> photon_range{1.0, 200000.0};
    std::vector<double> fwhm_set_um{0.1, 0.2, 0.3, 0.4};
    double amp_max_um = 0.5 * 0.510;  // 0.5 lambda RMS at 510 nm
    CameraModel camera;
    bool apply_noise = true;
    int z_extend = 3;  // axial render extent multiplier

    static GenConfig training_defaults();
    static GenConfig test_defaults();  // 1.0 lambda, 5e5 photons, J <= 150
};

struct SampleRecord {
    Volume volume;       // camera counts (or photons when noise is off)
    ZernikeCoeffs truth;
    PunctaField puncta;
    double photons = 0.0;
    AberrationKind kind = AberrationKind::Single;
    std::uint64_t seed = 0;
};

// Deterministic puncta draw: J uniform in [1, j_max], positions uniform
// inside the FOV, FWHM from the configured set, photons uniform in range.
PunctaField place_puncta(std::uint64_t seed, const GenConfig& cfg);

// Immutable per-config render tables (extended PSF spectrum is built per
// aberration by the caller; kernels are cached here).
class Renderer {
public:
    explicit Renderer(const GenConfig& cfg);

    // Gaussian-blurred PSF at each sub-voxel position, scaled so every
    // punctum integrates to N_o over the extended render domain, summed.
    // psf_ext must be laterally volume-shaped and z_extend*nz deep.
    Volume render_field(const PunctaField& puncta, const PSF3D& psf_ext) const;

    // Render on the extended grid without cropping (photon-conservation
    // checks integrate this directly).
    Volume render_field_extended(const PunctaField& puncta, const PSF3D& psf_ext) const;

    // Overall PSF on the extended axial grid for a given aberration.
    PSF3D aberrated_psf_ext(const ZernikeCoeffs& coeffs) const;

    const LightSheetProfile& sheet_profile() const { return sheet_ext_; }
    const GenConfig& config() const { return cfg_; }

private:
    Volume render_impl(const PunctaField& puncta, const PSF3D& psf_ext,
                       bool crop) const;

    GenConfig cfg_;
    PupilField pupil_;
    LightSheetProfile sheet_ext_;
};

// counts = Poisson(qe * photons) + Normal(baseline, read_noise^2),
// clamped at zero; deterministic per seed; rejects negative input.
Volume apply_camera(const Volume& photons, const CameraModel& cam, std::uint64_t seed);

// Full per-seed pipeline: kind draw, aberration, puncta, render, camera.
SampleRecord generate_sample(std::uint64_t seed, const GenConfig& cfg,
                             const Renderer& renderer);
SampleRecord generate_sample(std::uint64_t seed, const GenConfig& cfg);

// n samples with seeds seed0..seed0+n-1 written to
// <out>/samples/<seed>.vol plus <out>/manifest.json. Parallel by seed,
// byte-identical across runs and thread counts.
nlohmann::json generate_dataset(const GenConfig& cfg, int n, const std::string& out_dir,
                                std::uint64_t seed0 = 0, int threads = 1);

}  // namespace aosense
