#include "aosense/embedding.hpp"

#include <algorithm>
#include <cmath>
#include <queue>
#include <stdexcept>

namespace aosense {

namespace {

constexpr double kTwoPi = 6.28318530717958647692;

std::size_t vidx(const std::array<int, 3>& sh, int z, int y, int x) {
    return (static_cast<std::size_t>(z) * sh[1] + y) * sh[2] + x;
}

}  // namespace

Volume FourierEmbedding::to_volume() const {
    Volume v(kEmbeddingPlanes, kEmbeddingSize, kEmbeddingSize, {0, 0, 0});
    for (int p = 0; p < kEmbeddingPlanes; ++p)
        std::copy(planes[static_cast<std::size_t>(p)].begin(),
                  planes[static_cast<std::size_t>(p)].end(),
                  v.data.begin() +
                      static_cast<std::ptrdiff_t>(p) * kEmbeddingSize * kEmbeddingSize);
    v.meta["embedding"] = true;
    return v;
}

FourierEmbedding FourierEmbedding::from_volume(const Volume& v) {
    if (v.shape != std::array<int, 3>{kEmbeddingPlanes, kEmbeddingSize, kEmbeddingSize})
        throw std::invalid_argument("volume is not a (6, 64, 64) embedding");
    FourierEmbedding e;
    for (int p = 0; p < kEmbeddingPlanes; ++p)
        std::copy(v.data.begin() +
                      static_cast<std::ptrdiff_t>(p) * kEmbeddingSize * kEmbeddingSize,
                  v.data.begin() +
                      static_cast<std::ptrdiff_t>(p + 1) * kEmbeddingSize * kEmbeddingSize,
                  e.planes[static_cast<std::size_t>(p)].begin());
    return e;
}

void PreprocessConfig::validate() const {
    if (tukey_alpha < 0.0 || tukey_alpha > 1.0)
        throw std::invalid_argument("tukey_alpha must be in [0, 1]");
    if (highpass_sigma_vox < 0.0)
        throw std::invalid_argument("highpass sigma must be >= 0");
    if (ncc_kernel_vox < 4) throw std::invalid_argument("NCC kernel too small");
    if (peak_threshold <= 0.0 || peak_threshold > 1.0)
        throw std::invalid_argument("peak threshold must be in (0, 1]");
}

Volume preprocess(const Volume& vol, const PreprocessConfig& cfg,
                  const OpticsConfig& optics, bool apply_window) {
    cfg.validate();
    const int nz = vol.shape[0], ny = vol.shape[1], nx = vol.shape[2];
    const std::size_t n = vol.size();

    std::vector<cplx> spec(n);
    for (std::size_t i = 0; i < n; ++i) spec[i] = cplx(vol.data[i], 0.0);
    fft3(spec.data(), nz, ny, nx, false);

    // High-pass (one minus a Gaussian in cycles/voxel) and a hard lateral
    // low-pass at the incoherent OTF limit 2*NA/lambda.
    const auto fz = fft_freqs(nz, 1.0);
    const auto fy = fft_freqs(ny, 1.0);
    const auto fx = fft_freqs(nx, 1.0);
    const double sig = cfg.highpass_sigma_vox;
    const double gauss_c = 2.0 * M_PI * M_PI * sig * sig;

    const double k_otf = 2.0 * optics.k_na();
    const auto ky_phys = fft_freqs(ny, optics.voxel_um[1]);
    const auto kx_phys = fft_freqs(nx, optics.voxel_um[2]);

    for (int z = 0; z < nz; ++z)
        for (int y = 0; y < ny; ++y)
            for (int x = 0; x < nx; ++x) {
                const std::size_t i = vidx(vol.shape, z, y, x);
                const double klat =
                    kTwoPi * std::hypot(ky_phys[static_cast<std::size_t>(y)],
                                        kx_phys[static_cast<std::size_t>(x)]);
                if (klat > k_otf) {
                    spec[i] = cplx(0.0, 0.0);
                    continue;
                }
                const double f2 =
                    fz[static_cast<std::size_t>(z)] * fz[static_cast<std::size_t>(z)] +
                    fy[static_cast<std::size_t>(y)] * fy[static_cast<std::size_t>(y)] +
                    fx[static_cast<std::size_t>(x)] * fx[static_cast<std::size_t>(x)];
                const double hp = 1.0 - std::exp(-gauss_c * f2);
                spec[i] *= hp;
            }
    fft3(spec.data(), nz, ny, nx, true);

    // Tukey window along x and y only; no axial window. Centred on the
    // FFT centre voxel len/2 so an even image stays even and the tau
    // phase of a symmetric sample holds at zero.
    auto tukey = [&](int i, int len) {
        const double a = cfg.tukey_alpha;
        if (a <= 0.0) return 1.0;
        const double r = std::fabs(i - len / 2.0) / (len / 2.0);  // [0, 1]
        if (r <= 1.0 - a) return 1.0;
        if (r >= 1.0) return 0.0;
        return 0.5 * (1.0 + std::cos(M_PI * (r - (1.0 - a)) / a));
    };
    std::vector<double> wy(static_cast<std::size_t>(ny)), wx(static_cast<std::size_t>(nx));
    for (int y = 0; y < ny; ++y)
        wy[static_cast<std::size_t>(y)] = apply_window ? tukey(y, ny) : 1.0;
    for (int x = 0; x < nx; ++x)
        wx[static_cast<std::size_t>(x)] = apply_window ? tukey(x, nx) : 1.0;

    Volume out(nz, ny, nx, vol.voxel_um);
    out.meta = vol.meta;
    double peak = 0.0;
    std::vector<double> tmp(n);
    for (int z = 0; z < nz; ++z)
        for (int y = 0; y < ny; ++y)
            for (int x = 0; x < nx; ++x) {
                const std::size_t i = vidx(vol.shape, z, y, x);
                tmp[i] = spec[i].real() * wy[static_cast<std::size_t>(y)] *
                         wx[static_cast<std::size_t>(x)];
                peak = std::max(peak, std::fabs(tmp[i]));
            }
    // Peak normalization makes the embedding photon-scale invariant.
    const double scale = peak > 0.0 ? 1.0 / peak : 0.0;
    for (std::size_t i = 0; i < n; ++i) out.data[i] = static_cast<float>(tmp[i] * scale);
    return out;
}

namespace {

// Local normalized cross-correlation (zero-mean kernel) via FFT.
std::vector<double> ncc_volume(const Volume& v, const std::vector<double>& kernel,
                               const std::array<int, 3>& ksh) {
    const int nz = v.shape[0], ny = v.shape[1], nx = v.shape[2];
    const std::size_t n = v.size();
    const double kcount = static_cast<double>(ksh[0]) * ksh[1] * ksh[2];

    double kmean = 0.0;
    for (double kv : kernel) kmean += kv;
    kmean /= kcount;
    double kvar = 0.0;
    for (double kv : kernel) kvar += (kv - kmean) * (kv - kmean);
    if (kvar <= 0.0) return std::vector<double>(n, 0.0);

    // Kernel spectrum, centred taps wrapped around the origin.
    std::vector<cplx> kspec(n, cplx(0.0, 0.0));
    for (int z = 0; z < ksh[0]; ++z)
        for (int y = 0; y < ksh[1]; ++y)
            for (int x = 0; x < ksh[2]; ++x) {
                const int dz = z - ksh[0] / 2, dy = y - ksh[1] / 2, dx = x - ksh[2] / 2;
                const int wz = (dz + nz) % nz, wy = (dy + ny) % ny, wx = (dx + nx) % nx;
                kspec[vidx(v.shape, wz, wy, wx)] +=
                    cplx(kernel[vidx(ksh, z, y, x)] - kmean, 0.0);
            }
    fft3(kspec.data(), nz, ny, nx, false);

    std::vector<cplx> vspec(n), v2spec(n), box(n, cplx(0.0, 0.0));
    for (std::size_t i = 0; i < n; ++i) {
        vspec[i] = cplx(v.data[i], 0.0);
        v2spec[i] = cplx(static_cast<double>(v.data[i]) * v.data[i], 0.0);
    }
    for (int z = 0; z < ksh[0]; ++z)
        for (int y = 0; y < ksh[1]; ++y)
            for (int x = 0; x < ksh[2]; ++x) {
                const int dz = z - ksh[0] / 2, dy = y - ksh[1] / 2, dx = x - ksh[2] / 2;
                const int wz = (dz + nz) % nz, wy = (dy + ny) % ny, wx = (dx + nx) % nx;
                box[vidx(v.shape, wz, wy, wx)] = cplx(1.0, 0.0);
            }
    fft3(vspec.data(), nz, ny, nx, false);
    fft3(v2spec.data(), nz, ny, nx, false);
    fft3(box.data(), nz, ny, nx, false);

    std::vector<cplx> num(n), lsum(n), lsum2(n);
    for (std::size_t i = 0; i < n; ++i) {
        num[i] = vspec[i] * std::conj(kspec[i]);
        lsum[i] = vspec[i] * std::conj(box[i]);
        lsum2[i] = v2spec[i] * std::conj(box[i]);
    }
    fft3(num.data(), nz, ny, nx, true);
    fft3(lsum.data(), nz, ny, nx, true);
    fft3(lsum2.data(), nz, ny, nx, true);

    std::vector<double> ncc(n, 0.0);
    for (std::size_t i = 0; i < n; ++i) {
        const double s1 = lsum[i].real();
        const double s2 = lsum2[i].real();
        const double lvar = s2 - s1 * s1 / kcount;
        if (lvar <= 1e-12) continue;
        ncc[i] = num[i].real() / std::sqrt(lvar * kvar);
    }
    return ncc;
}

}  // namespace

InterferenceResult remove_interference(const Volume& preprocessed,
                                       const PreprocessConfig& cfg) {
    return remove_interference(preprocessed, preprocessed, cfg);
}

InterferenceResult remove_interference(const Volume& volume, const Volume& detection,
                                       const PreprocessConfig& cfg) {
    cfg.validate();
    if (volume.shape != detection.shape)
        throw std::invalid_argument("volume/detection shape mismatch");
    const Volume& preprocessed = detection;
    const int nz = preprocessed.shape[0], ny = preprocessed.shape[1],
              nx = preprocessed.shape[2];
    const std::size_t n = preprocessed.size();

    InterferenceResult res;
    res.shape = preprocessed.shape;

    auto spectrum_of = [&](const std::vector<float>& data) {
        std::vector<cplx> s(n);
        for (std::size_t i = 0; i < n; ++i) s[i] = cplx(data[i], 0.0);
        fft3(s.data(), nz, ny, nx, false);
        return s;
    };

    // Brightest voxel seeds the matched kernel.
    std::size_t peak_i = 0;
    float peak_v = preprocessed.data.empty() ? 0.0f : preprocessed.data[0];
    for (std::size_t i = 0; i < n; ++i)
        if (preprocessed.data[i] > peak_v) {
            peak_v = preprocessed.data[i];
            peak_i = i;
        }

    auto passthrough = [&]() {
        res.removed = false;
        res.peaks_found = 0;
        res.tau = spectrum_of(volume.data);
        std::vector<cplx> shifted(n);
        for (int z = 0; z < nz; ++z)
            for (int y = 0; y < ny; ++y)
                for (int x = 0; x < nx; ++x)
                    shifted[vidx(res.shape, fftshift_index(z, nz), fftshift_index(y, ny),
                                 fftshift_index(x, nx))] =
                        res.tau[vidx(res.shape, z, y, x)];
        res.tau = std::move(shifted);
        res.reconstructed = volume;
        return res;
    };

    if (!(peak_v > 0.0f)) return passthrough();

    const int pz = static_cast<int>(peak_i / (static_cast<std::size_t>(ny) * nx));
    const int py = static_cast<int>((peak_i / nx) % ny);
    const int px = static_cast<int>(peak_i % nx);

    // Kernel cropped around the brightest peak, clamped to the borders.
    const int ks = cfg.ncc_kernel_vox;
    const std::array<int, 3> ksh{ks, ks, ks};
    std::vector<double> kernel(static_cast<std::size_t>(ks) * ks * ks, 0.0);
    const int z0 = std::clamp(pz - ks / 2, 0, nz - ks);
    const int y0 = std::clamp(py - ks / 2, 0, ny - ks);
    const int x0 = std::clamp(px - ks / 2, 0, nx - ks);
    for (int z = 0; z < ks; ++z)
        for (int y = 0; y < ks; ++y)
            for (int x = 0; x < ks; ++x)
                kernel[vidx(ksh, z, y, x)] = preprocessed.at(z0 + z, y0 + y, x0 + x);

    const std::vector<double> ncc = ncc_volume(preprocessed, kernel, ksh);
    double ncc_max = 0.0;
    for (double v : ncc) ncc_max = std::max(ncc_max, v);
    if (!(ncc_max > 0.0)) return passthrough();

    // Local maxima above threshold with a minimum pairwise distance.
    const double thresh = cfg.peak_threshold * ncc_max;
    const int md = cfg.peak_min_distance_vox;
    std::vector<std::array<int, 3>> peaks;
    for (int z = 0; z < nz; ++z)
        for (int y = 0; y < ny; ++y)
            for (int x = 0; x < nx; ++x) {
                const double v = ncc[vidx(res.shape, z, y, x)];
                if (v < thresh) continue;
                bool is_max = true;
                for (int dz = -md; dz <= md && is_max; ++dz)
                    for (int dy = -md; dy <= md && is_max; ++dy)
                        for (int dx = -md; dx <= md && is_max; ++dx) {
                            if (dz == 0 && dy == 0 && dx == 0) continue;
                            const int zz = z + dz, yy = y + dy, xx = x + dx;
                            if (zz < 0 || zz >= nz || yy < 0 || yy >= ny || xx < 0 ||
                                xx >= nx)
                                continue;
                            const double o = ncc[vidx(res.shape, zz, yy, xx)];
                            // Strictly greater wins; ties resolve to the
                            // lexicographically first voxel.
                            if (o > v ||
                                (o == v && (dz < 0 || (dz == 0 && (dy < 0 ||
                                                                   (dy == 0 && dx < 0))))))
                                is_max = false;
                        }
                if (is_max) peaks.push_back({z, y, x});
            }
    if (peaks.empty()) return passthrough();

    // Sub-voxel refinement: zoomed-DFT matched-filter correlation around
    // each integer peak. Spikes left on the voxel grid would leave
    // residual fringes in tau for off-grid sources. The common offset of
    // the kernel's own bead shifts all positions alike, which only tilts
    // the tau phase (tip/tilt territory) and cancels in |tau|.
    std::vector<cplx> cross(n);
    {
        std::vector<cplx> fk(n, cplx(0.0, 0.0));
        for (int z = 0; z < ks; ++z)
            for (int y = 0; y < ks; ++y)
                for (int x = 0; x < ks; ++x) {
                    const int dz = z - ks / 2, dy = y - ks / 2, dx = x - ks / 2;
                    const int wz = (dz + nz) % nz, wy = (dy + ny) % ny,
                              wx = (dx + nx) % nx;
                    fk[vidx(res.shape, wz, wy, wx)] +=
                        cplx(kernel[vidx(ksh, z, y, x)], 0.0);
                }
        fft3(fk.data(), nz, ny, nx, false);
        std::vector<cplx> fvol(n);
        for (std::size_t i = 0; i < n; ++i) fvol[i] = cplx(volume.data[i], 0.0);
        fft3(fvol.data(), nz, ny, nx, false);
        for (std::size_t i = 0; i < n; ++i) cross[i] = fvol[i] * std::conj(fk[i]);
    }
    const auto fzl = fft_freqs(nz, 1.0);
    const auto fyl = fft_freqs(ny, 1.0);
    const auto fxl = fft_freqs(nx, 1.0);
    auto zoom_refine = [&](const std::array<int, 3>& p) {
        constexpr int kHalf = 6;        // +-0.6 voxels
        constexpr double kStep = 0.1;   // upsampled grid pitch
        constexpr int kPts = 2 * kHalf + 1;
        // Stage 1: collapse kz, then ky, then kx onto the local grid.
        std::vector<cplx> t1(static_cast<std::size_t>(kPts) * ny * nx, cplx(0, 0));
        for (int uz = 0; uz < kPts; ++uz) {
            const double z_pos = p[0] + (uz - kHalf) * kStep;
            for (int z = 0; z < nz; ++z) {
                const cplx ph = std::polar(1.0, kTwoPi * fzl[static_cast<std::size_t>(z)] * z_pos);
                const std::size_t src = static_cast<std::size_t>(z) * ny * nx;
                const std::size_t dst = static_cast<std::size_t>(uz) * ny * nx;
                for (std::size_t i = 0; i < static_cast<std::size_t>(ny) * nx; ++i)
                    t1[dst + i] += cross[src + i] * ph;
            }
        }
        std::vector<cplx> t2(static_cast<std::size_t>(kPts) * kPts * nx, cplx(0, 0));
        for (int uy = 0; uy < kPts; ++uy) {
            const double y_pos = p[1] + (uy - kHalf) * kStep;
            for (int y = 0; y < ny; ++y) {
                const cplx ph = std::polar(1.0, kTwoPi * fyl[static_cast<std::size_t>(y)] * y_pos);
                for (int uz = 0; uz < kPts; ++uz) {
                    const std::size_t src =
                        (static_cast<std::size_t>(uz) * ny + y) * nx;
                    const std::size_t dst =
                        (static_cast<std::size_t>(uz) * kPts + uy) * nx;
                    for (int x = 0; x < nx; ++x) t2[dst + x] += t1[src + x] * ph;
                }
            }
        }
        std::vector<double> c3(static_cast<std::size_t>(kPts) * kPts * kPts, 0.0);
        for (int ux = 0; ux < kPts; ++ux) {
            const double x_pos = p[2] + (ux - kHalf) * kStep;
            for (int x = 0; x < nx; ++x) {
                const cplx ph = std::polar(1.0, kTwoPi * fxl[static_cast<std::size_t>(x)] * x_pos);
                for (int uzy = 0; uzy < kPts * kPts; ++uzy)
                    c3[static_cast<std::size_t>(uzy) * kPts + ux] +=
                        (t2[static_cast<std::size_t>(uzy) * nx + x] * ph).real();
            }
        }
        // Argmax on the fine grid plus a parabola per axis.
        int best = 0;
        for (int i = 1; i < kPts * kPts * kPts; ++i)
            if (c3[static_cast<std::size_t>(i)] > c3[static_cast<std::size_t>(best)])
                best = i;
        const int bz = best / (kPts * kPts), by = (best / kPts) % kPts, bx = best % kPts;
        std::array<double, 3> out{p[0] + (bz - kHalf) * kStep,
                                  p[1] + (by - kHalf) * kStep,
                                  p[2] + (bx - kHalf) * kStep};
        auto para = [&](int axis, int i0, int stride) {
            const int b = (axis == 0) ? bz : (axis == 1) ? by : bx;
            if (b <= 0 || b >= kPts - 1) return;
            const double cm = c3[static_cast<std::size_t>(i0 - stride)];
            const double c0 = c3[static_cast<std::size_t>(i0)];
            const double cp = c3[static_cast<std::size_t>(i0 + stride)];
            const double den = cm - 2.0 * c0 + cp;
            if (den < -1e-18)
                out[static_cast<std::size_t>(axis)] +=
                    kStep * std::clamp(0.5 * (cm - cp) / den, -0.5, 0.5);
        };
        para(0, best, kPts * kPts);
        para(1, best, kPts);
        para(2, best, 1);
        return out;
    };

    std::vector<std::array<double, 3>> refined;
    std::vector<double> weights;
    for (const auto& p : peaks) {
        refined.push_back(zoom_refine(p));
        weights.push_back(volume.at(p[0], p[1], p[2]));
    }

    // Analytic spectrum of the point mask at the refined positions.
    std::vector<cplx> fv = spectrum_of(volume.data);
    std::vector<cplx> fs(n, cplx(0.0, 0.0));
    {
        for (std::size_t j = 0; j < refined.size(); ++j) {
            const auto& rp = refined[j];
            const double w = weights[j];
            for (int z = 0; z < nz; ++z) {
                const double phz = fzl[static_cast<std::size_t>(z)] * rp[0];
                for (int y = 0; y < ny; ++y) {
                    const double phzy = phz + fyl[static_cast<std::size_t>(y)] * rp[1];
                    const std::size_t row = (static_cast<std::size_t>(z) * ny + y) * nx;
                    for (int x = 0; x < nx; ++x) {
                        const double ph =
                            -kTwoPi * (phzy + fxl[static_cast<std::size_t>(x)] * rp[2]);
                        fs[row + x] += std::polar(w, ph);
                    }
                }
            }
        }
    }

    double fs_max2 = 0.0;
    for (const auto& c : fs) fs_max2 = std::max(fs_max2, std::norm(c));
    const double delta = cfg.division_delta_rel * fs_max2;

    std::vector<cplx> tau(n);
    for (std::size_t i = 0; i < n; ++i)
        tau[i] = fv[i] * std::conj(fs[i]) / (std::norm(fs[i]) + delta);

    // Real-space reconstruction. Dividing by F(S) re-centres the source
    // shape at the origin; shift it back to the centre voxel for display
    // and comparisons.
    std::vector<cplx> vr = tau;
    fft3(vr.data(), nz, ny, nx, true);
    ifftshift3(vr, nz, ny, nx);
    res.reconstructed = Volume(nz, ny, nx, preprocessed.voxel_um);
    for (std::size_t i = 0; i < n; ++i)
        res.reconstructed.data[i] = static_cast<float>(vr[i].real());

    // Frequency-centred tau for plane extraction.
    res.tau.assign(n, cplx(0.0, 0.0));
    for (int z = 0; z < nz; ++z)
        for (int y = 0; y < ny; ++y)
            for (int x = 0; x < nx; ++x)
                res.tau[vidx(res.shape, fftshift_index(z, nz), fftshift_index(y, ny),
                             fftshift_index(x, nx))] = tau[vidx(res.shape, z, y, x)];
    res.peaks_found = static_cast<int>(peaks.size());
    res.peak_positions = refined;
    res.removed = true;
    return res;
}

EmbeddingContext::EmbeddingContext(const OpticsConfig& optics, LightSheetKind sheet,
                                   const PreprocessConfig& cfg)
    : optics_(optics), pre_cfg_(cfg) {
    optics_.validate();
    pre_cfg_.validate();
    if (optics_.shape[1] != kEmbeddingSize || optics_.shape[2] != kEmbeddingSize)
        throw std::invalid_argument("embedding requires a 64-voxel lateral grid");

    // Ideal denominator: a centred point emitter rendered through the
    // same pipeline as real samples, then preprocessed identically.
    GenConfig gen;
    gen.optics = optics_;
    gen.sheet = sheet;
    gen.apply_noise = false;
    Renderer renderer(gen);
    ZernikeCoeffs zero;
    PunctaField delta;
    delta.count = 1;
    delta.positions_um = {{optics_.shape[0] / 2 * optics_.voxel_um[0],
                           optics_.shape[1] / 2 * optics_.voxel_um[1],
                           optics_.shape[2] / 2 * optics_.voxel_um[2]}};
    delta.fwhm_um = {0.0};
    delta.photons = 1.0e6;
    Volume ideal_raw = renderer.render_field(delta, renderer.aberrated_psf_ext(zero));
    ideal_vol_ = preprocess(ideal_raw, pre_cfg_, optics_);

    // The denominator passes through the identical chain as samples,
    // interference removal included, so the amplitude ratio of an ideal
    // sample is exactly one.
    const Volume ideal_nw = preprocess(ideal_raw, pre_cfg_, optics_, false);
    const InterferenceResult ir = remove_interference(ideal_nw, ideal_vol_, pre_cfg_);
    const std::size_t n = ideal_vol_.size();
    ideal_mag_.assign(n, 0.0);
    for (std::size_t i = 0; i < n; ++i) {
        ideal_mag_[i] = std::abs(ir.tau[i]);
        ideal_mag_max_ = std::max(ideal_mag_max_, ideal_mag_[i]);
    }

    // Lateral OTF support: 2*k_na around DC in centred index units.
    support_.assign(static_cast<std::size_t>(kEmbeddingSize) * kEmbeddingSize, 0);
    const double r_support =
        2.0 * optics_.k_na() * optics_.shape[2] * optics_.voxel_um[2] / kTwoPi;
    for (int y = 0; y < kEmbeddingSize; ++y)
        for (int x = 0; x < kEmbeddingSize; ++x) {
            const double dy = y - kEmbeddingSize / 2, dx = x - kEmbeddingSize / 2;
            if (std::hypot(dy, dx) <= r_support)
                support_[static_cast<std::size_t>(y) * kEmbeddingSize + x] = 1;
        }
}

std::array<std::vector<double>, 3> EmbeddingContext::amplitude_planes(
    const InterferenceResult& ir) const {
    if (ir.shape != optics_.shape)
        throw std::invalid_argument("interference result shape mismatch");

    const int zc = optics_.shape[0] / 2;
    std::array<std::vector<double>, 3> planes;
    for (auto& p : planes)
        p.assign(static_cast<std::size_t>(kEmbeddingSize) * kEmbeddingSize, 0.0);

    auto ratio_plane = [&](int z_centred, std::vector<double>& out) {
        double plane_max = 0.0;
        for (int y = 0; y < kEmbeddingSize; ++y)
            for (int x = 0; x < kEmbeddingSize; ++x)
                plane_max = std::max(plane_max,
                                     ideal_mag_[vidx(optics_.shape, z_centred, y, x)]);
        const double guard = pre_cfg_.support_guard_rel * plane_max;
        for (int y = 0; y < kEmbeddingSize; ++y)
            for (int x = 0; x < kEmbeddingSize; ++x) {
                const std::size_t pi = static_cast<std::size_t>(y) * kEmbeddingSize + x;
                if (!support_[pi]) continue;
                const double id = ideal_mag_[vidx(optics_.shape, z_centred, y, x)];
                if (id <= guard) continue;
                const double num = std::abs(ir.tau[vidx(optics_.shape, z_centred, y, x)]);
                out[pi] += num / id;
            }
    };

    // alpha1: principal plane; alpha2: mean of kz = 0..4; alpha3: 5..9.
    ratio_plane(zc, planes[0]);
    for (int d = 0; d < 5; ++d) ratio_plane(zc + d, planes[1]);
    for (int d = 5; d < 10; ++d) ratio_plane(zc + d, planes[2]);
    for (auto& v : planes[1]) v /= 5.0;
    for (auto& v : planes[2]) v /= 5.0;
    return planes;
}

namespace {

// Quality-guided 2D unwrap restricted to the support disk; everything
// else stays zero. Seeded at the highest-quality pixel: the DC bin is
// emptied by the high-pass filter, so its phase is sign noise and would
// anchor the whole plane on a random 2*pi branch.
std::vector<double> unwrap_plane(const std::vector<double>& wrapped,
                                 const std::vector<double>& quality,
                                 const std::vector<std::uint8_t>& support, int d) {
    std::vector<double> out(wrapped.size(), 0.0);
    std::vector<std::uint8_t> done(wrapped.size(), 0);

    using Item = std::pair<double, int>;  // quality, -index (tie-break)
    std::priority_queue<Item> queue;
    int seed = -1;
    double best_q = -1.0;
    for (int i = 0; i < d * d; ++i)
        if (support[static_cast<std::size_t>(i)] &&
            quality[static_cast<std::size_t>(i)] > best_q) {
            best_q = quality[static_cast<std::size_t>(i)];
            seed = i;
        }
    if (seed < 0) return out;
    out[static_cast<std::size_t>(seed)] = wrapped[static_cast<std::size_t>(seed)];
    done[static_cast<std::size_t>(seed)] = 1;

    auto settle_neighbors = [&](int idx) {
        const int y = idx / d, x = idx % d;
        const int dys[4] = {-1, 1, 0, 0}, dxs[4] = {0, 0, -1, 1};
        for (int k = 0; k < 4; ++k) {
            const int yy = y + dys[k], xx = x + dxs[k];
            if (yy < 0 || yy >= d || xx < 0 || xx >= d) continue;
            const int ni = yy * d + xx;
            if (done[static_cast<std::size_t>(ni)] ||
                !support[static_cast<std::size_t>(ni)])
                continue;
            const double ref = out[static_cast<std::size_t>(idx)];
            const double w = wrapped[static_cast<std::size_t>(ni)];
            out[static_cast<std::size_t>(ni)] =
                w + kTwoPi * std::round((ref - w) / kTwoPi);
            done[static_cast<std::size_t>(ni)] = 1;
            queue.emplace(quality[static_cast<std::size_t>(ni)], -ni);
        }
    };
    settle_neighbors(seed);
    while (!queue.empty()) {
        const int idx = -queue.top().second;
        queue.pop();
        settle_neighbors(idx);
    }
    return out;
}

}  // namespace

std::array<std::vector<double>, 3> EmbeddingContext::phase_planes(
    const InterferenceResult& ir) const {
    const int nz = optics_.shape[0];
    if (ir.shape != optics_.shape)
        throw std::invalid_argument("interference result shape mismatch");
    const int zc = nz / 2;
    const std::size_t plane_n =
        static_cast<std::size_t>(kEmbeddingSize) * kEmbeddingSize;

    std::array<std::vector<double>, 3> planes;
    for (auto& p : planes) p.assign(plane_n, 0.0);

    auto unwrapped_plane = [&](int z_centred) {
        std::vector<double> wrapped(plane_n, 0.0), quality(plane_n, 0.0);
        for (int y = 0; y < kEmbeddingSize; ++y)
            for (int x = 0; x < kEmbeddingSize; ++x) {
                const std::size_t pi = static_cast<std::size_t>(y) * kEmbeddingSize + x;
                const cplx t = ir.tau[vidx(ir.shape, z_centred, y, x)];
                wrapped[pi] = std::arg(t);
                quality[pi] = std::abs(t);
            }
        return unwrap_plane(wrapped, quality, support_, kEmbeddingSize);
    };

    auto accumulate = [&](int z_centred, std::vector<double>& out) {
        const auto u = unwrapped_plane(z_centred);
        for (std::size_t i = 0; i < plane_n; ++i) out[i] += u[i];
    };

    accumulate(zc, planes[0]);
    for (int d = 0; d < 5; ++d) accumulate(zc + d, planes[1]);
    for (int d = 5; d < 10; ++d) accumulate(zc + d, planes[2]);
    for (auto& v : planes[1]) v /= 5.0;
    for (auto& v : planes[2]) v /= 5.0;
    return planes;
}

FourierEmbedding EmbeddingContext::embed(const Volume& raw) const {
    Volume cube = raw;
    if (raw.shape != optics_.shape) {
        if (raw.shape[1] != raw.shape[2])
            throw std::invalid_argument("embedding input must be laterally square");
        cube = resample_to_cube(raw, kEmbeddingSize);
        cube.voxel_um = optics_.voxel_um;
    }
    const Volume pre = preprocess(cube, pre_cfg_, optics_);
    const Volume pre_nw = preprocess(cube, pre_cfg_, optics_, false);
    const auto ir = remove_interference(pre_nw, pre, pre_cfg_);
    const auto amp = amplitude_planes(ir);
    const auto phase = phase_planes(ir);

    FourierEmbedding e;
    for (int p = 0; p < 3; ++p)
        for (std::size_t i = 0; i < amp[static_cast<std::size_t>(p)].size(); ++i) {
            e.planes[static_cast<std::size_t>(p)][i] =
                static_cast<float>(amp[static_cast<std::size_t>(p)][i]);
            e.planes[static_cast<std::size_t>(p + 3)][i] =
                static_cast<float>(phase[static_cast<std::size_t>(p)][i]);
        }
    return e;
}

FourierEmbedding rotate_embedding(const FourierEmbedding& e, double theta) {
    FourierEmbedding out;
    const int d = kEmbeddingSize;
    const double c = d / 2;  // DC pixel
    const double cs = std::cos(theta), sn = std::sin(theta);
    const double r_max = d / 2.0;
    for (int p = 0; p < kEmbeddingPlanes; ++p)
        for (int y = 0; y < d; ++y)
            for (int x = 0; x < d; ++x) {
                const double dy = y - c, dx = x - c;
                if (std::hypot(dy, dx) > r_max) continue;
                // Inverse rotation: sample the source at -theta.
                const double sx = c + cs * dx + sn * dy;
                const double sy = c - sn * dx + cs * dy;
                const int x0 = static_cast<int>(std::floor(sx));
                const int y0 = static_cast<int>(std::floor(sy));
                const double fx = sx - x0, fy = sy - y0;
                double acc = 0.0;
                for (int oy = 0; oy <= 1; ++oy)
                    for (int ox = 0; ox <= 1; ++ox) {
                        const int yy = y0 + oy, xx = x0 + ox;
                        if (yy < 0 || yy >= d || xx < 0 || xx >= d) continue;
                        const double w = (oy ? fy : 1.0 - fy) * (ox ? fx : 1.0 - fx);
                        acc += w * e.at(p, yy, xx);
                    }
                out.at(p, y, x) = static_cast<float>(acc);
            }
    return out;
}

Volume resample_to_cube(const Volume& v, int size) {
    const int nz = v.shape[0], ny = v.shape[1], nx = v.shape[2];
    if (nz == size && ny == size && nx == size) return v;
    const std::size_t n = v.size();
    std::vector<cplx> spec(n);
    for (std::size_t i = 0; i < n; ++i) spec[i] = cplx(v.data[i], 0.0);
    fft3(spec.data(), nz, ny, nx, false);

    // Centred crop or zero-pad per axis.
    std::vector<cplx> out_spec(static_cast<std::size_t>(size) * size * size,
                               cplx(0.0, 0.0));
    const std::array<int, 3> osh{size, size, size};
    const int cz = std::min(nz, size), cy = std::min(ny, size), cx = std::min(nx, size);
    for (int z = -cz / 2; z < (cz + 1) / 2; ++z)
        for (int y = -cy / 2; y < (cy + 1) / 2; ++y)
            for (int x = -cx / 2; x < (cx + 1) / 2; ++x) {
                const int zs = (z + nz) % nz, ys = (y + ny) % ny, xs = (x + nx) % nx;
                const int zd = (z + size) % size, yd = (y + size) % size,
                          xd = (x + size) % size;
                out_spec[vidx(osh, zd, yd, xd)] = spec[vidx(v.shape, zs, ys, xs)];
            }
    fft3(out_spec.data(), size, size, size, true);

    Volume out(size, size, size, v.voxel_um);
    out.meta = v.meta;
    const double scale = static_cast<double>(size) * size * size /
                         (static_cast<double>(nz) * ny * nx);
    for (std::size_t i = 0; i < out.data.size(); ++i)
        out.data[i] = static_cast<float>(out_spec[i].real() * scale);
    return out;
}

}  // namespace aosense
