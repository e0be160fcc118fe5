#include "aosense/synth.hpp"

#include <cmath>
#include <filesystem>
#include <stdexcept>

#include "aosense/fft.hpp"
#include "aosense/rng.hpp"
#include "aosense/threading.hpp"

namespace aosense {

namespace {

constexpr double kTwoPi = 6.28318530717958647692;

// Stream tags keep the per-seed draws for different purposes disjoint.
constexpr std::uint64_t kStreamKind = 0x4b494e44ULL;
constexpr std::uint64_t kStreamPlace = 0x504c4143ULL;
constexpr std::uint64_t kStreamCamera = 0x43414d52ULL;

}  // namespace

void CameraModel::validate() const {
    if (!(qe > 0.0) || qe > 1.0) throw std::invalid_argument("qe must be in (0, 1]");
    if (read_noise < 0.0) throw std::invalid_argument("read noise must be >= 0");
}

GenConfig GenConfig::training_defaults() { return GenConfig{}; }

GenConfig GenConfig::test_defaults() {
    GenConfig cfg;
    cfg.j_max = 150;
    cfg.photon_range = {1.0, 500000.0};
    cfg.amp_max_um = 1.0 * 0.510;
    return cfg;
}

PunctaField place_puncta(std::uint64_t seed, const GenConfig& cfg) {
    if (cfg.j_max < 1) throw std::invalid_argument("j_max must be >= 1");
    CounterRng rng(seed, kStreamPlace);
    PunctaField field;
    field.count = static_cast<int>(rng.uniform_int(1, cfg.j_max));
    field.photons = rng.uniform(cfg.photon_range[0], cfg.photon_range[1]);
    const auto& sh = cfg.optics.shape;
    const auto& vox = cfg.optics.voxel_um;
    for (int j = 0; j < field.count; ++j) {
        std::array<double, 3> p{};
        for (int a = 0; a < 3; ++a) p[a] = rng.uniform(0.0, sh[a] * vox[a]);
        field.positions_um.push_back(p);
        const int pick = static_cast<int>(rng.uniform_int(0, cfg.fwhm_set_um.size() - 1));
        field.fwhm_um.push_back(cfg.fwhm_set_um[pick]);
    }
    return field;
}

Renderer::Renderer(const GenConfig& cfg) : cfg_(cfg) {
    cfg_.optics.validate();
    cfg_.camera.validate();
    if (cfg_.z_extend < 1) throw std::invalid_argument("z_extend must be >= 1");
    pupil_ = make_pupil(cfg_.optics);
    const int nz_ext = cfg_.optics.shape[0] * cfg_.z_extend;
    sheet_ext_ = light_sheet_planes(cfg_.sheet, cfg_.optics, nz_ext);
}

namespace {

// 1D DFT of a 4-sigma-truncated Gaussian sampled at integer grid points
// minus a fractional offset. Sampling the kernel at the shifted points
// (instead of phase-shifting the composite image) keeps the rendered
// bead non-negative: a sub-voxel sinc shift of an under-resolved bead
// rings negative, a shifted sample of a Gaussian never does.
struct Kernel1D {
    std::vector<cplx> dft;  // length n, FFT frequency order
    double sum = 0.0;
};

Kernel1D gaussian_kernel_1d(int n, double voxel_um, double fwhm_um, double frac_voxels) {
    Kernel1D k;
    k.dft.assign(static_cast<std::size_t>(n), cplx(0.0, 0.0));
    const double sigma = fwhm_um / 2.3548200450309493;
    const int reach = static_cast<int>(std::ceil(4.0 * sigma / voxel_um)) + 1;
    std::vector<std::pair<int, double>> taps;
    for (int d = -reach; d <= reach; ++d) {
        const double r = (d - frac_voxels) * voxel_um;
        const double v = std::exp(-4.0 * std::log(2.0) * r * r / (fwhm_um * fwhm_um));
        taps.emplace_back(d, v);
        k.sum += v;
    }
    for (int f = 0; f < n; ++f) {
        const double ff = (f <= (n - 1) / 2) ? f : f - n;
        cplx acc(0.0, 0.0);
        for (const auto& [d, v] : taps) acc += v * std::polar(1.0, -kTwoPi * ff * d / n);
        k.dft[static_cast<std::size_t>(f)] = acc;
    }
    return k;
}

}  // namespace

PSF3D Renderer::aberrated_psf_ext(const ZernikeCoeffs& coeffs) const {
    const PupilField pupil = apply_aberration(pupil_, coeffs, cfg_.optics.lambda_det_um);
    PSF3D det = detection_psf_extended(pupil, cfg_.optics, cfg_.z_extend);
    return overall_psf(det, sheet_ext_);
}

Volume Renderer::render_impl(const PunctaField& puncta, const PSF3D& psf_ext,
                             bool crop) const {
    const int nz = cfg_.optics.shape[0];
    const int ny = cfg_.optics.shape[1];
    const int nx = cfg_.optics.shape[2];
    const int nz_ext = nz * cfg_.z_extend;
    if (psf_ext.shape != std::array<int, 3>{nz_ext, ny, nx})
        throw std::invalid_argument("psf_ext shape must be the extended render grid");
    if (puncta.count <= 0) throw std::invalid_argument("puncta field is empty");
    if (!(puncta.photons >= 1.0)) throw std::invalid_argument("photons must be >= 1");

    const auto& vox = cfg_.optics.voxel_um;
    for (const auto& p : puncta.positions_um)
        if (p[0] < 0 || p[0] >= nz * vox[0] || p[1] < 0 || p[1] >= ny * vox[1] ||
            p[2] < 0 || p[2] >= nx * vox[2])
            throw std::invalid_argument("punctum outside the field of view");

    const std::size_t n = static_cast<std::size_t>(nz_ext) * ny * nx;
    const double psf_total = psf_ext.sum();
    if (!(psf_total > 0.0)) throw std::invalid_argument("degenerate PSF");

    // PSF spectrum with the kernel centred at the origin.
    std::vector<cplx> psf_fft(n);
    for (std::size_t i = 0; i < n; ++i) psf_fft[i] = cplx(psf_ext.intensity[i], 0.0);
    ifftshift3(psf_fft, nz_ext, ny, nx);
    fft3(psf_fft.data(), nz_ext, ny, nx, false);

    std::vector<cplx> spec(n, cplx(0.0, 0.0));
    // The core volume occupies the central nz planes of the render grid.
    const double z_off = (nz_ext - nz) / 2.0;
    for (int j = 0; j < puncta.count; ++j) {
        const double fwhm = puncta.fwhm_um[j];
        const std::array<double, 3> v{puncta.positions_um[j][0] / vox[0] + z_off,
                                      puncta.positions_um[j][1] / vox[1],
                                      puncta.positions_um[j][2] / vox[2]};
        // Integer part moves via an exact circular phase ramp; the
        // fraction is folded into the sampled kernel below.
        std::array<double, 3> vi{}, vf{};
        for (int a = 0; a < 3; ++a) {
            vi[a] = std::floor(v[a] + 0.5);
            vf[a] = v[a] - vi[a];
        }

        std::array<Kernel1D, 3> kern;
        double ksum = 1.0;
        if (fwhm > 0.0) {
            kern[0] = gaussian_kernel_1d(nz_ext, vox[0], fwhm, vf[0]);
            kern[1] = gaussian_kernel_1d(ny, vox[1], fwhm, vf[1]);
            kern[2] = gaussian_kernel_1d(nx, vox[2], fwhm, vf[2]);
            ksum = kern[0].sum * kern[1].sum * kern[2].sum;
        }

        const double upsilon = puncta.photons / (psf_total * ksum);
        // Point emitters keep the fraction in the phase; PSF intensity is
        // band-limited on this grid, so the sinc shift is exact there.
        const std::array<double, 3> shift =
            (fwhm > 0.0) ? vi : std::array<double, 3>{v[0], v[1], v[2]};

        for (int z = 0; z < nz_ext; ++z) {
            const double fz = (z <= (nz_ext - 1) / 2) ? z : z - nz_ext;
            const double phz = fz * shift[0] / nz_ext;
            const cplx kz = (fwhm > 0.0) ? kern[0].dft[static_cast<std::size_t>(z)]
                                         : cplx(1.0, 0.0);
            for (int y = 0; y < ny; ++y) {
                const double fy = (y <= (ny - 1) / 2) ? y : y - ny;
                const double phzy = phz + fy * shift[1] / ny;
                const cplx kzy =
                    kz * ((fwhm > 0.0) ? kern[1].dft[static_cast<std::size_t>(y)]
                                       : cplx(1.0, 0.0));
                const std::size_t row = (static_cast<std::size_t>(z) * ny + y) * nx;
                for (int x = 0; x < nx; ++x) {
                    const double fx = (x <= (nx - 1) / 2) ? x : x - nx;
                    const double ph = -kTwoPi * (phzy + fx * shift[2] / nx);
                    cplx w = std::polar(upsilon, ph) * kzy;
                    if (fwhm > 0.0) w *= kern[2].dft[static_cast<std::size_t>(x)];
                    spec[row + x] += psf_fft[row + x] * w;
                }
            }
        }
    }
    fft3(spec.data(), nz_ext, ny, nx, true);

    if (!crop) {
        Volume out(nz_ext, ny, nx, cfg_.optics.voxel_um);
        for (std::size_t i = 0; i < n; ++i)
            out.data[i] = static_cast<float>(spec[i].real());
        return out;
    }
    Volume out(nz, ny, nx, cfg_.optics.voxel_um);
    const int z0 = (nz_ext - nz) / 2;
    const std::size_t plane = static_cast<std::size_t>(ny) * nx;
    for (int z = 0; z < nz; ++z)
        for (std::size_t i = 0; i < plane; ++i)
            out.data[static_cast<std::size_t>(z) * plane + i] = static_cast<float>(
                spec[static_cast<std::size_t>(z0 + z) * plane + i].real());
    return out;
}

Volume Renderer::render_field(const PunctaField& puncta, const PSF3D& psf_ext) const {
    return render_impl(puncta, psf_ext, true);
}

Volume Renderer::render_field_extended(const PunctaField& puncta,
                                       const PSF3D& psf_ext) const {
    return render_impl(puncta, psf_ext, false);
}

Volume apply_camera(const Volume& photons, const CameraModel& cam, std::uint64_t seed) {
    cam.validate();
    CounterRng rng(seed, kStreamCamera);
    // FFT round-trips leave tiny negative dust relative to the peak;
    // anything beyond that is a genuinely invalid input.
    const double neg_tol = 1e-9 + 1e-6 * std::fabs(photons.max_value());
    Volume out = photons;
    for (std::size_t i = 0; i < photons.data.size(); ++i) {
        double p = photons.data[i];
        if (p < 0.0) {
            if (p < -neg_tol) throw std::invalid_argument("negative photon count");
            p = 0.0;
        }
        double counts = static_cast<double>(rng.poisson(cam.qe * p));
        counts += cam.baseline;
        if (cam.read_noise > 0.0) counts += rng.normal(0.0, cam.read_noise);
        out.data[i] = static_cast<float>(counts < 0.0 ? 0.0 : counts);
    }
    return out;
}

SampleRecord generate_sample(std::uint64_t seed, const GenConfig& cfg,
                             const Renderer& renderer) {
    CounterRng kind_rng(seed, kStreamKind);
    const auto kind = static_cast<AberrationKind>(kind_rng.uniform_int(0, 3));

    SampleRecord rec;
    rec.seed = seed;
    rec.kind = kind;
    rec.truth = sample_aberration(kind, cfg.amp_max_um, seed);
    rec.puncta = place_puncta(seed, cfg);
    rec.photons = rec.puncta.photons;

    const PSF3D psf_ext = renderer.aberrated_psf_ext(rec.truth);
    Volume vol = renderer.render_field(rec.puncta, psf_ext);
    rec.volume = cfg.apply_noise ? apply_camera(vol, cfg.camera, seed) : std::move(vol);
    rec.volume.meta["seed"] = seed;
    rec.volume.meta["kind"] = to_string(kind);
    rec.volume.meta["photons"] = rec.photons;
    rec.volume.meta["zernike_um"] = rec.truth.amps;
    return rec;
}

SampleRecord generate_sample(std::uint64_t seed, const GenConfig& cfg) {
    Renderer renderer(cfg);
    return generate_sample(seed, cfg, renderer);
}

nlohmann::json generate_dataset(const GenConfig& cfg, int n, const std::string& out_dir,
                                std::uint64_t seed0, int threads) {
    namespace fs = std::filesystem;
    if (n < 1) throw std::invalid_argument("dataset size must be >= 1");
    fs::create_directories(fs::path(out_dir) / "samples");

    Renderer renderer(cfg);
    std::vector<nlohmann::json> entries(static_cast<std::size_t>(n));
    parallel_for(static_cast<std::size_t>(n), threads, [&](std::size_t i) {
        const std::uint64_t seed = seed0 + i;
        SampleRecord rec = generate_sample(seed, cfg, renderer);
        const std::string rel = "samples/" + std::to_string(seed) + ".vol";
        const std::string path = (fs::path(out_dir) / rel).string();
        write_volume(rec.volume, path);
        entries[i] = {
            {"file", rel},
            {"seed", seed},
            {"zernike_um", rec.truth.amps},
            {"photons", rec.photons},
            {"puncta", rec.puncta.count},
            {"kind", to_string(rec.kind)},
        };
    });

    nlohmann::json manifest = {
        {"format", "aosense-dataset-v1"},
        {"n", n},
        {"seed0", seed0},
        {"sheet", to_string(cfg.sheet)},
        {"amp_max_um", cfg.amp_max_um},
        {"photon_range", cfg.photon_range},
        {"j_max", cfg.j_max},
        {"noise", cfg.apply_noise},
        {"camera", {{"qe", cfg.camera.qe},
                    {"read_noise", cfg.camera.read_noise},
                    {"baseline", cfg.camera.baseline}}},
        {"records", entries},
    };
    atomic_write_file((fs::path(out_dir) / "manifest.json").string(),
                      manifest.dump(2) + "\n");
    return manifest;
}

}  // namespace aosense
