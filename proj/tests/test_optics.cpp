#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include "doctest.h"

#include <cmath>
#include <complex>

#include "aosense/fft.hpp"
#include "aosense/optics.hpp"
#include "aosense/rng.hpp"

using namespace aosense;

namespace {

OpticsConfig default_cfg() { return OpticsConfig{}; }

ZernikeCoeffs random_detectable(std::uint64_t seed, double scale) {
    CounterRng rng(seed, 77);
    ZernikeCoeffs c;
    for (int j : kDetectableModes) c[j] = rng.uniform(-scale, scale);
    return c;
}

}  // namespace

TEST_CASE("pupil support geometry") {
    auto cfg = default_cfg();
    auto pupil = make_pupil(cfg);

    // The NA cutoff sits at NA/eta of the propagating disk radius.
    CHECK(cfg.k_na() / cfg.k_medium() == doctest::Approx(cfg.na / cfg.refr_index));
    CHECK(cfg.na / cfg.refr_index == doctest::Approx(0.7519).epsilon(1e-3));

    // Compare the pixel-counted support radius against the analytic one.
    std::size_t count = 0;
    for (auto m : pupil.mask) count += m;
    const double r_pix = std::sqrt(static_cast<double>(count) / M_PI);
    const double dk = 2.0 * M_PI / (cfg.shape[2] * cfg.voxel_um[2]);
    CHECK(r_pix * dk == doctest::Approx(cfg.k_na()).epsilon(0.02));

    // Doubling the grid leaves the physical cutoff unchanged.
    auto cfg2 = cfg;
    cfg2.shape = {64, 128, 128};
    auto pupil2 = make_pupil(cfg2);
    CHECK(pupil2.k_na == doctest::Approx(pupil.k_na));

    auto bad = cfg;
    bad.na = 0.0;
    CHECK_THROWS(make_pupil(bad));
    bad.na = 1.5;  // NA/eta > 1
    CHECK_THROWS(make_pupil(bad));
}

TEST_CASE("apply_aberration phase scaling and conjugation") {
    auto cfg = default_cfg();
    auto pupil = make_pupil(cfg);

    ZernikeCoeffs zero;
    auto same = apply_aberration(pupil, zero, cfg.lambda_det_um);
    for (std::size_t i = 0; i < pupil.phase.size(); ++i)
        CHECK(same.phase[i] == pupil.phase[i]);

    // 0.0755 lambda RMS on one mode -> pupil phase RMS 0.0755 * 2 pi.
    ZernikeCoeffs c;
    c[5] = 0.0755 * cfg.lambda_det_um;
    auto ab = apply_aberration(pupil, c, cfg.lambda_det_um);
    double mean = 0.0, var = 0.0;
    std::size_t n = 0;
    for (std::size_t i = 0; i < ab.phase.size(); ++i)
        if (ab.mask[i]) {
            mean += ab.phase[i];
            ++n;
        }
    mean /= static_cast<double>(n);
    for (std::size_t i = 0; i < ab.phase.size(); ++i)
        if (ab.mask[i]) var += (ab.phase[i] - mean) * (ab.phase[i] - mean);
    const double rms = std::sqrt(var / static_cast<double>(n));
    // The discrete pupil disk is not the exact unit disk, so allow 2%.
    CHECK(rms == doctest::Approx(0.0755 * 2.0 * M_PI).epsilon(0.02));

    auto neg = apply_aberration(pupil, c * -1.0, cfg.lambda_det_um);
    for (std::size_t i = 0; i < ab.phase.size(); ++i)
        CHECK(neg.phase[i] == doctest::Approx(-ab.phase[i]));
}

TEST_CASE("detection PSF: centre peak, symmetry, normalization") {
    auto cfg = default_cfg();
    auto pupil = make_pupil(cfg);
    auto psf = detection_psf(pupil, cfg);

    CHECK(psf.sum() == doctest::Approx(1.0).epsilon(1e-9));

    // Unaberrated: global maximum at the centre voxel.
    const int cz = cfg.shape[0] / 2, cy = cfg.shape[1] / 2, cx = cfg.shape[2] / 2;
    const double peak = psf.at(cz, cy, cx);
    for (std::size_t i = 0; i < psf.intensity.size(); ++i)
        CHECK(psf.intensity[i] <= peak + 1e-15);

    // Reflection symmetry about the centre in x and y:
    // intensity(c+d) == intensity(c-d) within 1e-9 of the peak.
    for (int d = 1; d < 20; ++d) {
        CHECK(std::abs(psf.at(cz, cy, cx + d) - psf.at(cz, cy, cx - d)) < 1e-9 * peak);
        CHECK(std::abs(psf.at(cz, cy + d, cx) - psf.at(cz, cy - d, cx)) < 1e-9 * peak);
    }

    CHECK(psf.intensity[0] >= 0.0);
    for (double v : psf.intensity) CHECK(std::isfinite(v));
}

TEST_CASE("phase-only aberrations conserve PSF energy") {
    auto cfg = default_cfg();
    auto pupil = make_pupil(cfg);
    const double ideal_total = detection_psf(pupil, cfg).sum();
    for (std::uint64_t s = 0; s < 8; ++s) {
        auto c = random_detectable(s, 0.12);  // |c| <= ~0.4 um
        auto ab = apply_aberration(pupil, c, cfg.lambda_det_um);
        const double total = detection_psf(ab, cfg).sum();
        CHECK(std::abs(total - ideal_total) < 1e-6 * ideal_total);
    }
}

TEST_CASE("astigmatism through-focus anisotropy") {
    // At exactly z = 0 a pure astigmatic PSF is invariant under a 90
    // degree rotation (the pupil phase flips sign, conjugating the
    // field), which forces equal second-moment eigenvalues. The mode's
    // fingerprint is the diagonal elongation at defocused planes, with
    // the major axis flipping between +z and -z.
    auto cfg = default_cfg();
    auto pupil = make_pupil(cfg);
    ZernikeCoeffs c;
    c[3] = 0.12;
    auto psf = detection_psf(apply_aberration(pupil, c, cfg.lambda_det_um), cfg);

    const int n = cfg.shape[1];
    auto moments = [&](const PSF3D& p, int iz) {
        double sxx = 0, syy = 0, sxy = 0, w = 0;
        for (int y = 0; y < n; ++y)
            for (int x = 0; x < n; ++x) {
                const double v = p.at(iz, y, x);
                const double dx = x - n / 2, dy = y - n / 2;
                sxx += v * dx * dx;
                syy += v * dy * dy;
                sxy += v * dx * dy;
                w += v;
            }
        return std::array<double, 3>{sxx / w, syy / w, sxy / w};
    };
    auto eig_ratio = [](const std::array<double, 3>& m) {
        const double tr = m[0] + m[1];
        const double disc = std::sqrt(tr * tr / 4.0 - (m[0] * m[1] - m[2] * m[2]));
        return (tr / 2.0 + disc) / (tr / 2.0 - disc);
    };

    const int cz = cfg.shape[0] / 2;
    const int dz = 3;  // 0.6 um defocus
    const auto above = moments(psf, cz + dz);
    const auto below = moments(psf, cz - dz);
    CHECK(eig_ratio(above) > 1.5);
    CHECK(eig_ratio(below) > 1.5);
    // Oblique astigmatism elongates along opposite diagonals on the two
    // sides of focus: the xy cross-moment changes sign.
    CHECK(above[2] * below[2] < 0.0);

    // At focus the symmetry argument pins the eigenvalues together.
    CHECK(eig_ratio(moments(psf, cz)) < 1.05);

    // The ideal PSF stays isotropic everywhere.
    auto ideal = detection_psf(pupil, cfg);
    CHECK(eig_ratio(moments(ideal, cz + dz)) < 1.05);
}

TEST_CASE("OTF of a real PSF is Hermitian") {
    auto cfg = default_cfg();
    auto pupil = make_pupil(cfg);
    auto c = random_detectable(3, 0.1);
    auto psf = detection_psf(apply_aberration(pupil, c, cfg.lambda_det_um), cfg);

    const int nz = cfg.shape[0], ny = cfg.shape[1], nx = cfg.shape[2];
    std::vector<cplx> buf(psf.intensity.size());
    for (std::size_t i = 0; i < buf.size(); ++i) buf[i] = cplx(psf.intensity[i], 0.0);
    fft3(buf.data(), nz, ny, nx, false);

    double otf_max = 0.0;
    for (auto& v : buf) otf_max = std::max(otf_max, std::abs(v));
    CounterRng rng(5, 5);
    for (int t = 0; t < 200; ++t) {
        const int z = static_cast<int>(rng.uniform_int(0, nz - 1));
        const int y = static_cast<int>(rng.uniform_int(0, ny - 1));
        const int x = static_cast<int>(rng.uniform_int(0, nx - 1));
        const int zc = (nz - z) % nz, yc = (ny - y) % ny, xc = (nx - x) % nx;
        const cplx a = buf[(static_cast<std::size_t>(z) * ny + y) * nx + x];
        const cplx b = buf[(static_cast<std::size_t>(zc) * ny + yc) * nx + xc];
        CHECK(std::abs(a - std::conj(b)) < 1e-10 * otf_max);
    }
}

TEST_CASE("detection PSF is bit-reproducible") {
    auto cfg = default_cfg();
    auto pupil = make_pupil(cfg);
    auto c = random_detectable(11, 0.1);
    auto ab = apply_aberration(pupil, c, cfg.lambda_det_um);
    auto a = detection_psf(ab, cfg);
    auto b = detection_psf(ab, cfg);
    for (std::size_t i = 0; i < a.intensity.size(); ++i)
        CHECK(a.intensity[i] == b.intensity[i]);
}

TEST_CASE("light sheet profiles") {
    auto cfg = default_cfg();

    for (auto kind : {LightSheetKind::MBSq35, LightSheetKind::MBSq30,
                      LightSheetKind::MBSq50, LightSheetKind::Sinc,
                      LightSheetKind::Gaussian}) {
        auto sheet = light_sheet(kind, cfg);
        REQUIRE(sheet.intensity_z.size() == 64);
        CHECK(sheet.intensity_z[32] == doctest::Approx(1.0));
        for (double v : sheet.intensity_z) {
            CHECK(v >= 0.0);
            CHECK(v <= 1.0 + 1e-12);
        }
    }

    // Gaussian sheet follows an exp-quadratic profile: fit log I vs z^2.
    auto g = light_sheet(LightSheetKind::Gaussian, cfg);
    double sxx = 0, sxy = 0, syy = 0, sx = 0, sy = 0;
    int n = 0;
    for (int iz = 0; iz < 64; ++iz) {
        const double z = (iz - 32) * cfg.voxel_um[0];
        const double I = g.intensity_z[iz];
        // Far tail falls below the quadrature noise floor; fit the body.
        if (I < 1e-6) continue;
        const double X = z * z, Y = std::log(I);
        sx += X;
        sy += Y;
        sxx += X * X;
        syy += Y * Y;
        sxy += X * Y;
        ++n;
    }
    const double cov = sxy - sx * sy / n;
    const double vx = sxx - sx * sx / n;
    const double vy = syy - sy * sy / n;
    const double r2 = cov * cov / (vx * vy);
    CHECK(r2 > 0.999);

    // MBSq-35 has side lobes: not monotone in |z|.
    auto mb = light_sheet(LightSheetKind::MBSq35, cfg);
    bool rises = false;
    for (int iz = 33; iz < 63; ++iz)
        if (mb.intensity_z[iz + 1] > mb.intensity_z[iz] + 1e-9) rises = true;
    CHECK(rises);

    // Frozen fixture: MBSq-35 profile values at selected offsets
    // (generated once from this model, guards against silent drift).
    // Tolerance covers vectorized-libm jitter in the oscillatory
    // integral; real model drift moves these at the percent level.
    const std::pair<int, double> fixture[] = {
        {32, 1.0}, {34, 0.051628}, {36, 0.733393}, {40, 0.251922},
        {44, 0.013795}, {48, 0.015213}, {56, 0.001192},
    };
    for (const auto& [iz, expect] : fixture)
        CHECK(mb.intensity_z[iz] == doctest::Approx(expect).epsilon(1e-2));

    CHECK_THROWS(light_sheet_kind_from_string("Hex"));
}

TEST_CASE("overall PSF composition") {
    auto cfg = default_cfg();
    auto pupil = make_pupil(cfg);
    auto det = detection_psf(pupil, cfg);

    LightSheetProfile uniform;
    uniform.intensity_z.assign(64, 1.0);
    auto same = overall_psf(det, uniform);
    for (std::size_t i = 0; i < det.intensity.size(); ++i)
        CHECK(same.intensity[i] == det.intensity[i]);

    LightSheetProfile delta;
    delta.intensity_z.assign(64, 0.0);
    delta.intensity_z[32] = 1.0;
    auto one = overall_psf(det, delta);
    const std::size_t plane = 64 * 64;
    for (int iz = 0; iz < 64; ++iz) {
        double s = 0.0;
        for (std::size_t i = 0; i < plane; ++i) s += one.intensity[iz * plane + i];
        if (iz == 32)
            CHECK(s > 0.0);
        else
            CHECK(s == 0.0);
    }

    // A Gaussian sheet narrows the axial FWHM vs the detection PSF.
    auto sheet = light_sheet(LightSheetKind::Gaussian, cfg);
    auto ov = overall_psf(det, sheet);
    auto axial_fwhm = [&](const PSF3D& p) {
        const int cy = 32, cx = 32;
        std::vector<double> prof(64);
        double peak = 0.0;
        for (int iz = 0; iz < 64; ++iz) {
            prof[iz] = p.at(iz, cy, cx);
            peak = std::max(peak, prof[iz]);
        }
        int lo = 32, hi = 32;
        while (lo > 0 && prof[lo] > peak / 2) --lo;
        while (hi < 63 && prof[hi] > peak / 2) ++hi;
        return hi - lo;
    };
    CHECK(axial_fwhm(ov) < axial_fwhm(det));

    LightSheetProfile wrong;
    wrong.intensity_z.assign(32, 1.0);
    CHECK_THROWS(overall_psf(det, wrong));
}

TEST_CASE("wiener deconvolution") {
    auto cfg = default_cfg();
    auto pupil = make_pupil(cfg);
    auto ideal = detection_psf(pupil, cfg);

    // Deconvolving the ideal PSF by itself concentrates energy.
    Volume blurred = ideal.to_volume(cfg);
    auto sharp = wiener_deconvolve(blurred, ideal, 1e6, ideal);
    const int c = 32;
    const double frac_before = blurred.at(c, c, c) / blurred.sum();
    const double frac_after = sharp.at(c, c, c) / sharp.sum();
    CHECK(frac_after > frac_before);

    // Delta PSF: identity up to OTF-mask filtering (all-pass ideal here).
    PSF3D delta;
    delta.shape = cfg.shape;
    delta.intensity.assign(blurred.size(), 0.0);
    delta.intensity[(static_cast<std::size_t>(c) * 64 + c) * 64 + c] = 1.0;
    auto same = wiener_deconvolve(blurred, delta, 1e9, delta);
    for (int i = 0; i < 64; ++i)
        CHECK(same.at(c, c, i) == doctest::Approx(blurred.at(c, c, i)).epsilon(1e-4));

    // Linearity before clamping.
    Volume scaled = blurred;
    for (auto& v : scaled.data) v *= 3.5f;
    auto d1 = wiener_deconvolve(blurred, ideal, 100.0, ideal, false);
    auto d3 = wiener_deconvolve(scaled, ideal, 100.0, ideal, false);
    float dmax = 0;
    for (auto v : d1.data) dmax = std::max(dmax, std::abs(v));
    for (std::size_t i = 0; i < d1.size(); ++i)
        CHECK(std::abs(d3.data[i] - 3.5f * d1.data[i]) <= 1e-4f * dmax);

    PSF3D zero;
    zero.shape = cfg.shape;
    zero.intensity.assign(blurred.size(), 0.0);
    CHECK_THROWS(wiener_deconvolve(blurred, zero, 100.0, ideal));
}
