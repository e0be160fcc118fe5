#include "aosense/optics.hpp"

#include <cmath>
#include <complex>
#include <stdexcept>

#include "aosense/fft.hpp"

namespace aosense {

namespace {

constexpr double kTwoPi = 6.28318530717958647692;

// Numerical aperture integration grid for light-sheet cross sections.
constexpr int kSheetPupilSamples = 4001;

}  // namespace

void OpticsConfig::validate() const {
    if (!(na > 0.0)) throw std::invalid_argument("NA must be positive");
    if (na / refr_index > 1.0)
        throw std::invalid_argument("NA must not exceed the refractive index");
    if (!(lambda_det_um > 0.0) || !(lambda_exc_um > 0.0))
        throw std::invalid_argument("wavelengths must be positive");
    for (double v : voxel_um)
        if (!(v > 0.0)) throw std::invalid_argument("voxel dims must be positive");
    for (int s : shape)
        if (s <= 0 || s % 2 != 0)
            throw std::invalid_argument("volume shape must be positive and even");
    if (shape[1] != shape[2])
        throw std::invalid_argument("lateral shape must be square");
}

double OpticsConfig::k_na() const { return kTwoPi * na / lambda_det_um; }
double OpticsConfig::k_medium() const { return kTwoPi * refr_index / lambda_det_um; }

double PSF3D::sum() const {
    double s = 0.0;
    for (double v : intensity) s += v;
    return s;
}

Volume PSF3D::to_volume(const OpticsConfig& cfg) const {
    Volume v(shape[0], shape[1], shape[2], cfg.voxel_um);
    for (std::size_t i = 0; i < intensity.size(); ++i)
        v.data[i] = static_cast<float>(intensity[i]);
    return v;
}

PupilField make_pupil(const OpticsConfig& cfg) {
    cfg.validate();
    PupilField p;
    p.n = cfg.shape[2];
    p.k_na = cfg.k_na();
    const std::size_t n2 = static_cast<std::size_t>(p.n) * p.n;
    p.amp.assign(n2, 0.0);
    p.phase.assign(n2, 0.0);
    p.mask.assign(n2, 0);

    const auto fx = fft_freqs(p.n, cfg.voxel_um[2]);
    const auto fy = fft_freqs(p.n, cfg.voxel_um[1]);
    p.kx.resize(p.n);
    p.ky.resize(p.n);
    for (int i = 0; i < p.n; ++i) {
        p.kx[i] = kTwoPi * fx[i];
        p.ky[i] = kTwoPi * fy[i];
    }

    const double k_na2 = p.k_na * p.k_na;
    std::size_t support = 0;
    for (int y = 0; y < p.n; ++y)
        for (int x = 0; x < p.n; ++x) {
            const double k2 = p.kx[x] * p.kx[x] + p.ky[y] * p.ky[y];
            if (k2 <= k_na2) {
                p.amp[p.idx(y, x)] = 1.0;
                p.mask[p.idx(y, x)] = 1;
                ++support;
            }
        }
    if (support == 0) throw std::invalid_argument("empty pupil support");
    return p;
}

PupilField apply_aberration(const PupilField& pupil, const ZernikeCoeffs& coeffs,
                            double lambda_um) {
    if (!coeffs.finite()) throw std::invalid_argument("non-finite coefficients");
    PupilField out = pupil;

    std::vector<ZernikeIndex> active;
    for (int j = 0; j < kNumModes; ++j)
        if (coeffs[j] != 0.0) active.push_back(ansi_to_nm(j));
    if (active.empty()) return out;

    const double scale = kTwoPi / lambda_um;
    for (int y = 0; y < pupil.n; ++y)
        for (int x = 0; x < pupil.n; ++x) {
            const std::size_t i = pupil.idx(y, x);
            if (!pupil.mask[i]) continue;
            const double rho = std::hypot(pupil.kx[x], pupil.ky[y]) / pupil.k_na;
            const double theta = std::atan2(pupil.ky[y], pupil.kx[x]);
            double w = 0.0;
            for (const auto& zi : active)
                w += coeffs[zi.j] * eval_mode(zi.n, zi.m, std::min(rho, 1.0), theta);
            out.phase[i] += scale * w;
        }
    return out;
}

namespace {

PSF3D propagate(const PupilField& pupil, const OpticsConfig& cfg, int nz) {
    const int n = pupil.n;
    const std::size_t n2 = static_cast<std::size_t>(n) * n;

    // kz over the propagating disk; samples with a negative radicand are
    // evanescent and excluded (cannot occur while NA <= eta holds).
    const double km2 = cfg.k_medium() * cfg.k_medium();
    std::vector<double> kz(n2, 0.0);
    std::vector<cplx> base(n2, cplx(0.0, 0.0));
    for (int y = 0; y < n; ++y)
        for (int x = 0; x < n; ++x) {
            const std::size_t i = pupil.idx(y, x);
            if (!pupil.mask[i] || pupil.amp[i] == 0.0) continue;
            const double k2 = pupil.kx[x] * pupil.kx[x] + pupil.ky[y] * pupil.ky[y];
            const double rad = km2 - k2;
            if (rad <= 0.0) continue;
            kz[i] = std::sqrt(rad);
            // Checkerboard factor shifts the emitter to the centre voxel
            // (exact half-grid shift for even n).
            const double sign = ((x + y) % 2 == 0) ? 1.0 : -1.0;
            base[i] = std::polar(pupil.amp[i] * sign, pupil.phase[i]);
        }

    PSF3D psf;
    psf.shape = {nz, n, n};
    psf.intensity.assign(static_cast<std::size_t>(nz) * n2, 0.0);

    std::vector<cplx> plane(n2);
    for (int iz = 0; iz < nz; ++iz) {
        const double z = (iz - nz / 2) * cfg.voxel_um[0];
        for (std::size_t i = 0; i < n2; ++i) {
            if (base[i] == cplx(0.0, 0.0)) {
                plane[i] = cplx(0.0, 0.0);
            } else {
                plane[i] = base[i] * std::polar(1.0, kz[i] * z);
            }
        }
        fft2(plane.data(), n, n, true);
        double* out = &psf.intensity[static_cast<std::size_t>(iz) * n2];
        for (std::size_t i = 0; i < n2; ++i) out[i] = std::norm(plane[i]);
    }
    return psf;
}

// Unaberrated total over the configured nz planes: per plane, Parseval
// gives sum |IFFT2(A e^{i phi})|^2 = (sum A^2) / (n*n) independent of
// phase, so the norm is analytic and identical for every pure-phase
// aberration of the same pupil support.
double ideal_norm(const PupilField& pupil, int nz) {
    double a2 = 0.0;
    for (double a : pupil.amp) a2 += a * a;
    const double n2 = static_cast<double>(pupil.n) * pupil.n;
    return nz * a2 / n2;
}

}  // namespace

PSF3D detection_psf(const PupilField& pupil, const OpticsConfig& cfg) {
    cfg.validate();
    PSF3D psf = propagate(pupil, cfg, cfg.shape[0]);
    const double norm = ideal_norm(pupil, cfg.shape[0]);
    for (double& v : psf.intensity) v /= norm;
    return psf;
}

PSF3D detection_psf_extended(const PupilField& pupil, const OpticsConfig& cfg,
                             int z_factor) {
    if (z_factor < 1) throw std::invalid_argument("z_factor must be >= 1");
    PSF3D psf = propagate(pupil, cfg, cfg.shape[0] * z_factor);
    // Same normalization as the core PSF so the two agree plane by plane.
    const double norm = ideal_norm(pupil, cfg.shape[0]);
    for (double& v : psf.intensity) v /= norm;
    return psf;
}

LightSheetKind light_sheet_kind_from_string(const std::string& s) {
    if (s == "MBSq35" || s == "mbsq35") return LightSheetKind::MBSq35;
    if (s == "MBSq30" || s == "mbsq30") return LightSheetKind::MBSq30;
    if (s == "MBSq50" || s == "mbsq50") return LightSheetKind::MBSq50;
    if (s == "Sinc" || s == "sinc") return LightSheetKind::Sinc;
    if (s == "Gaussian" || s == "gaussian") return LightSheetKind::Gaussian;
    throw std::invalid_argument("unknown light sheet kind: " + s);
}

std::string to_string(LightSheetKind k) {
    switch (k) {
        case LightSheetKind::MBSq35: return "MBSq35";
        case LightSheetKind::MBSq30: return "MBSq30";
        case LightSheetKind::MBSq50: return "MBSq50";
        case LightSheetKind::Sinc: return "Sinc";
        case LightSheetKind::Gaussian: return "Gaussian";
    }
    return "?";
}

namespace {

struct SheetModel {
    // Beamlet centres, annulus bounds and spread, all in NA units.
    double na_centre = 0.0;
    double annulus_lo = 0.0;
    double annulus_hi = 1.0;
    double sigma_na = 0.1;
    bool bessel_pair = true;  // two beamlets at +-na_centre vs single lobe
    bool tophat = false;      // rect profile (sinc sheet)
};

SheetModel sheet_model(LightSheetKind kind) {
    switch (kind) {
        case LightSheetKind::MBSq35: return {0.35, 0.30, 0.40, 0.10, true, false};
        case LightSheetKind::MBSq30: return {0.30, 0.225, 0.375, 0.10, true, false};
        case LightSheetKind::MBSq50: return {0.50, 0.30, 0.40, 0.10, true, false};
        case LightSheetKind::Sinc: return {0.0, 0.0, 0.24, 0.0, false, true};
        case LightSheetKind::Gaussian: return {0.0, 0.0, 1.0, 0.21, false, false};
    }
    return {};
}

// Coherent axial cross-section: the excitation pupil's kz line profile
// P(u) transformed to real space, intensity |E(z)|^2.
double sheet_intensity(const SheetModel& m, double lambda_exc, double z) {
    const double du = 2.0 / (kSheetPupilSamples - 1);
    cplx e(0.0, 0.0);
    for (int i = 0; i < kSheetPupilSamples; ++i) {
        const double u = -1.0 + i * du;
        double p = 0.0;
        if (m.tophat) {
            p = (std::fabs(u) <= m.annulus_hi) ? 1.0 : 0.0;
        } else if (m.bessel_pair) {
            if (std::fabs(u) >= m.annulus_lo && std::fabs(u) <= m.annulus_hi) {
                const double d1 = (u - m.na_centre) / m.sigma_na;
                const double d2 = (u + m.na_centre) / m.sigma_na;
                p = std::exp(-0.5 * d1 * d1) + std::exp(-0.5 * d2 * d2);
            }
        } else {
            const double d = u / m.sigma_na;
            p = std::exp(-0.5 * d * d);
        }
        if (p != 0.0) e += p * std::polar(1.0, kTwoPi * u * z / lambda_exc);
    }
    return std::norm(e);
}

}  // namespace

LightSheetProfile light_sheet_planes(LightSheetKind kind, const OpticsConfig& cfg,
                                     int n_z) {
    const SheetModel m = sheet_model(kind);
    LightSheetProfile profile;
    profile.kind = kind;
    profile.intensity_z.resize(n_z);
    const double peak = sheet_intensity(m, cfg.lambda_exc_um, 0.0);
    if (!(peak > 0.0)) throw std::runtime_error("degenerate light sheet profile");
    for (int iz = 0; iz < n_z; ++iz) {
        const double z = (iz - n_z / 2) * cfg.voxel_um[0];
        profile.intensity_z[iz] = sheet_intensity(m, cfg.lambda_exc_um, z) / peak;
    }
    return profile;
}

LightSheetProfile light_sheet(LightSheetKind kind, const OpticsConfig& cfg) {
    return light_sheet_planes(kind, cfg, cfg.shape[0]);
}

PSF3D overall_psf(const PSF3D& det, const LightSheetProfile& sheet) {
    if (static_cast<std::size_t>(det.shape[0]) != sheet.intensity_z.size())
        throw std::invalid_argument("sheet profile length must match PSF z planes");
    PSF3D out = det;
    const std::size_t plane = static_cast<std::size_t>(det.shape[1]) * det.shape[2];
    for (int iz = 0; iz < det.shape[0]; ++iz) {
        const double s = sheet.intensity_z[iz];
        double* p = &out.intensity[static_cast<std::size_t>(iz) * plane];
        for (std::size_t i = 0; i < plane; ++i) p[i] *= s;
    }
    return out;
}

Volume wiener_deconvolve(const Volume& vol, const PSF3D& psf, double snr_param,
                         const PSF3D& ideal_psf, bool clamp_negative) {
    if (!(snr_param > 0.0)) throw std::invalid_argument("snr_param must be positive");
    if (vol.shape != psf.shape || vol.shape != ideal_psf.shape)
        throw std::invalid_argument("volume/PSF shape mismatch");
    if (psf.sum() <= 0.0) throw std::invalid_argument("PSF is identically zero");

    const int nz = vol.shape[0], ny = vol.shape[1], nx = vol.shape[2];
    const std::size_t n = vol.size();

    auto otf_of = [&](const PSF3D& p) {
        std::vector<cplx> buf(n);
        for (std::size_t i = 0; i < n; ++i) buf[i] = cplx(p.intensity[i], 0.0);
        ifftshift3(buf, nz, ny, nx);  // centre voxel -> origin
        fft3(buf.data(), nz, ny, nx, false);
        return buf;
    };

    std::vector<cplx> otf = otf_of(psf);
    std::vector<cplx> otf_ideal = otf_of(ideal_psf);

    double ideal_max = 0.0;
    for (const auto& c : otf_ideal) ideal_max = std::max(ideal_max, std::abs(c));
    const double support_eps = 1e-6 * ideal_max;

    std::vector<cplx> spec(n);
    for (std::size_t i = 0; i < n; ++i) spec[i] = cplx(vol.data[i], 0.0);
    fft3(spec.data(), nz, ny, nx, false);

    const double reg = 1.0 / snr_param;
    for (std::size_t i = 0; i < n; ++i) {
        if (std::abs(otf_ideal[i]) <= support_eps) {
            spec[i] = cplx(0.0, 0.0);
            continue;
        }
        const cplx h = otf[i];
        spec[i] *= std::conj(h) / (std::norm(h) + reg);
    }
    fft3(spec.data(), nz, ny, nx, true);

    Volume out(nz, ny, nx, vol.voxel_um);
    out.meta = vol.meta;
    for (std::size_t i = 0; i < n; ++i) {
        double v = spec[i].real();
        if (clamp_negative && v < 0.0) v = 0.0;
        out.data[i] = static_cast<float>(v);
    }
    return out;
}

}  // namespace aosense
