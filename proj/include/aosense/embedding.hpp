#pragma once

#include <array>
#include <cstdint>
#include <vector>

#include "aosense/fft.hpp"
#include "aosense/optics.hpp"
#include "aosense/synth.hpp"
#include "aosense/volume.hpp"

namespace aosense {

inline constexpr int kEmbeddingPlanes = 6;  // alpha1..3, phi1..3
inline constexpr int kEmbeddingSize = 64;   // d

struct FourierEmbedding {
    // planes[0..2] amplitude ratios, planes[3..5] unwrapped phase (rad).
    std::array<std::vector<float>, kEmbeddingPlanes> planes;

    FourierEmbedding() {
        for (auto& p : planes)
            p.assign(static_cast<std::size_t>(kEmbeddingSize) * kEmbeddingSize, 0.0f);
    }
    float at(int plane, int y, int x) const {
        return planes[static_cast<std::size_t>(plane)]
                     [static_cast<std::size_t>(y) * kEmbeddingSize + x];
    }
    float& at(int plane, int y, int x) {
        return planes[static_cast<std::size_t>(plane)]
                     [static_cast<std::size_t>(y) * kEmbeddingSize + x];
    }
    Volume to_volume() const;  // shape (6, d, d), meta.embedding = true
    static FourierEmbedding from_volume(const Volume& v);
};

struct PreprocessConfig {
    double highpass_sigma_vox = 3.0;  // Gaussian background removal
    double tukey_alpha = 0.5;         // lateral window, cosine fraction
    // Interference removal knobs.
    int ncc_kernel_vox = 16;
    int peak_min_distance_vox = 3;
    double peak_threshold = 0.65;  // fraction of the NCC maximum
    int peak_mask_radius_vox = 2;
    double division_delta_rel = 1e-4;  // tau regularizer, of max |F(S)|^2
    // Amplitude ratios are only meaningful where the ideal OTF carries
    // signal; below this fraction of the per-plane peak the ratio is 0.
    double support_guard_rel = 1e-3;

    void validate() const;
};

// Filter chain of Eq. 14: Gaussian high-pass, lateral low-pass at the
// detection OTF limit, Tukey window in x and y only, peak-normalized.
// apply_window = false skips the Tukey stage: the source-division step
// needs unsmeared interference fringes, while peak detection prefers
// the windowed volume.
Volume preprocess(const Volume& vol, const PreprocessConfig& cfg,
                  const OpticsConfig& optics, bool apply_window = true);

struct InterferenceResult {
    Volume reconstructed;      // V' = Re IFFT(tau)
    std::vector<cplx> tau;     // frequency-centred spectrum, nz*ny*nx
    std::array<int, 3> shape;  // of tau
    int peaks_found = 0;
    bool removed = false;  // false -> pass-through (tau = F(V))
    std::vector<std::array<double, 3>> peak_positions;  // refined, voxels
};

// Peak detection by normalized cross-correlation against a kernel
// cropped around the brightest voxel, point-mask division in Fourier
// space. No detectable peaks -> flagged pass-through. The two-volume
// form detects peaks on `detection` but divides the spectrum of
// `volume` (the windowed / unwindowed pair described above).
InterferenceResult remove_interference(const Volume& volume,
                                       const Volume& detection,
                                       const PreprocessConfig& cfg);
InterferenceResult remove_interference(const Volume& preprocessed,
                                       const PreprocessConfig& cfg);

// Immutable per-config tables: the preprocessed ideal-PSF denominator
// and the lateral OTF support. Shareable across threads once built.
class EmbeddingContext {
public:
    EmbeddingContext(const OpticsConfig& optics, LightSheetKind sheet,
                     const PreprocessConfig& cfg = {});

    FourierEmbedding embed(const Volume& raw) const;

    // Pipeline stages, exposed for tests. Both plane extractors consume
    // the interference-removed spectrum tau: the alpha ratio (and its
    // cached ideal denominator) is taken after source-shape division so
    // multi-puncta fringes never reach the embedding.
    std::array<std::vector<double>, 3> amplitude_planes(const InterferenceResult& ir) const;
    std::array<std::vector<double>, 3> phase_planes(const InterferenceResult& ir) const;

    const std::vector<std::uint8_t>& support() const { return support_; }
    const PreprocessConfig& preprocess_config() const { return pre_cfg_; }
    const OpticsConfig& optics() const { return optics_; }
    const Volume& ideal_volume() const { return ideal_vol_; }

private:
    OpticsConfig optics_;
    PreprocessConfig pre_cfg_;
    Volume ideal_vol_;                    // preprocessed ideal overall PSF
    std::vector<double> ideal_mag_;       // |F(V_ideal)|, centred, full 3D
    std::vector<std::uint8_t> support_;   // lateral OTF disk, d*d
    double ideal_mag_max_ = 0.0;
};

// Rotate all six planes about the DC pixel (d/2, d/2) by theta radians
// (counter-clockwise, bilinear); values outside the support disk are 0.
FourierEmbedding rotate_embedding(const FourierEmbedding& e, double theta);

// Fourier-domain crop/pad of a volume to the embedding cube (64^3).
Volume resample_to_cube(const Volume& v, int size);

}  // namespace aosense
