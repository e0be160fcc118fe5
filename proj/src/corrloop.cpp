#include "aosense/corrloop.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>
#include <sstream>
#include <stdexcept>

#include "aosense/rng.hpp"
#include "aosense/threading.hpp"

namespace aosense {

namespace {

double median_of(std::vector<double> v) {
    if (v.empty()) return 0.0;
    const std::size_t mid = v.size() / 2;
    std::nth_element(v.begin(), v.begin() + static_cast<std::ptrdiff_t>(mid), v.end());
    double hi = v[mid];
    if (v.size() % 2 == 1) return hi;
    std::nth_element(v.begin(), v.begin() + static_cast<std::ptrdiff_t>(mid) - 1,
                     v.end());
    return 0.5 * (hi + v[mid - 1]);
}

int reflect_index(int i, int n) {
    // Reflection without repeating the border sample, period 2n-2.
    if (n == 1) return 0;
    const int period = 2 * n - 2;
    i = ((i % period) + period) % period;
    return i < n ? i : period - i;
}

}  // namespace

LoopPredictor oracle_predictor() {
    return [](const FourierEmbedding&, const ZernikeCoeffs& residual) {
        return residual;
    };
}

LoopPredictor noisy_oracle_predictor(double q, std::uint64_t seed) {
    auto counter = std::make_shared<std::uint64_t>(0);
    return [q, seed, counter](const FourierEmbedding&,
                              const ZernikeCoeffs& residual) {
        CounterRng rng(seed, fold_stream(0x4e4f4953ULL, (*counter)++));
        ZernikeCoeffs noise;
        double norm = 0.0;
        for (int j : kDetectableModes) {
            noise[j] = rng.normal();
            norm += noise[j] * noise[j];
        }
        norm = std::sqrt(norm);
        const double target = q * residual.rms_um() * rng.uniform();
        ZernikeCoeffs out = residual;
        if (norm > 0.0)
            for (int j : kDetectableModes) out[j] += noise[j] / norm * target;
        return out;
    };
}

LoopPredictor model_loop_predictor(const Predictor& p) {
    return [p](const FourierEmbedding& e, const ZernikeCoeffs&) { return p(e); };
}

CorrectionState run_loop(const ZernikeCoeffs& true_ab, const LoopPredictor& predictor,
                         const EmbeddingContext& ctx, const Renderer& renderer,
                         const LoopConfig& cfg) {
    if (cfg.iterations < 1) throw std::invalid_argument("iterations must be >= 1");
    CorrectionState state;
    state.true_ab = true_ab;
    const double lambda = cfg.gen.optics.lambda_det_um;
    state.residual_lambda.push_back((true_ab + state.applied).rms_um() / lambda);

    PunctaField puncta = place_puncta(cfg.seed, cfg.gen);
    for (int it = 0; it < cfg.iterations; ++it) {
        const ZernikeCoeffs residual = state.true_ab + state.applied;
        try {
            const PSF3D psf = renderer.aberrated_psf_ext(residual);
            Volume vol = renderer.render_field(puncta, psf);
            if (cfg.gen.apply_noise)
                vol = apply_camera(vol, cfg.gen.camera,
                                   fold_stream(cfg.seed, static_cast<std::uint64_t>(it)));
            const FourierEmbedding e = ctx.embed(vol);
            const ZernikeCoeffs prediction = predictor(e, residual);
            state.applied = state.applied - prediction;
        } catch (const std::exception&) {
            state.aborted = true;
            return state;  // history retained
        }
        state.residual_lambda.push_back((state.true_ab + state.applied).rms_um() /
                                        lambda);
    }
    return state;
}

std::vector<EvalCell> evaluate_grid(const LoopPredictor& predictor,
                                    const EmbeddingContext& ctx,
                                    const Renderer& renderer, const LoopConfig& loop,
                                    const EvalGridConfig& grid, int threads) {
    const int n_amp = static_cast<int>(grid.amp_edges_lambda.size()) - 1;
    const int n_ph = static_cast<int>(grid.photon_edges.size()) - 1;
    if (n_amp < 1 || n_ph < 1)
        throw std::invalid_argument("evaluation grid needs at least one bin per axis");

    struct Task {
        int amp_bin, photon_bin, sample;
    };
    std::vector<Task> tasks;
    for (int a = 0; a < n_amp; ++a)
        for (int p = 0; p < n_ph; ++p)
            for (int s = 0; s < grid.samples_per_bin; ++s) tasks.push_back({a, p, s});

    const double lambda = loop.gen.optics.lambda_det_um;
    // residuals[task] = residual trace for that run
    std::vector<std::vector<double>> traces(tasks.size());
    parallel_for(tasks.size(), threads, [&](std::size_t ti) {
        const Task& t = tasks[ti];
        const std::uint64_t seed =
            fold_stream(grid.seed, static_cast<std::uint64_t>(t.amp_bin * 1000 +
                                                              t.photon_bin),
                        static_cast<std::uint64_t>(t.sample));
        // Draw an aberration inside the bin: uniform amplitude, dirichlet
        // spread over modes, scaled to the target.
        CounterRng rng(seed, 0x45564c47ULL);
        const double amp_lambda = rng.uniform(grid.amp_edges_lambda[t.amp_bin],
                                              grid.amp_edges_lambda[t.amp_bin + 1]);
        ZernikeCoeffs ab = sample_aberration(AberrationKind::Dirichlet, 1.0, seed);
        const double norm = ab.rms_um();
        ZernikeCoeffs truth;
        if (norm > 0.0)
            for (int j = 0; j < kNumModes; ++j)
                truth[j] = ab[j] / norm * amp_lambda * lambda;

        LoopConfig run_cfg = loop;
        run_cfg.seed = seed;
        run_cfg.iterations = grid.iterations;
        run_cfg.gen.photon_range = {grid.photon_edges[t.photon_bin],
                                    grid.photon_edges[t.photon_bin + 1]};
        auto state = run_loop(truth, predictor, ctx, renderer, run_cfg);
        traces[ti] = state.residual_lambda;
    });

    std::vector<EvalCell> cells;
    for (int a = 0; a < n_amp; ++a)
        for (int p = 0; p < n_ph; ++p)
            for (int it = 0; it <= grid.iterations; ++it) {
                EvalCell cell;
                cell.amp_bin = a;
                cell.photon_bin = p;
                cell.iteration = it;
                std::vector<double> vals;
                for (std::size_t ti = 0; ti < tasks.size(); ++ti) {
                    if (tasks[ti].amp_bin != a || tasks[ti].photon_bin != p) continue;
                    if (static_cast<std::size_t>(it) < traces[ti].size())
                        vals.push_back(traces[ti][static_cast<std::size_t>(it)]);
                }
                cell.n = static_cast<int>(vals.size());
                if (vals.empty()) {
                    cell.empty = true;
                } else {
                    int below = 0;
                    for (double v : vals)
                        if (v < grid.diffraction_limit_lambda) ++below;
                    cell.frac_below_limit =
                        static_cast<double>(below) / static_cast<double>(vals.size());
                    cell.median_residual_lambda = median_of(std::move(vals));
                }
                cells.push_back(cell);
            }
    return cells;
}

std::string eval_grid_csv(const std::vector<EvalCell>& cells,
                          const EvalGridConfig& grid) {
    std::ostringstream out;
    out << "amp_lo_lambda,amp_hi_lambda,photons_lo,photons_hi,iteration,n,"
           "median_residual_lambda,frac_below_0p075,empty\n";
    out.precision(9);
    for (const auto& c : cells) {
        out << grid.amp_edges_lambda[c.amp_bin] << ','
            << grid.amp_edges_lambda[c.amp_bin + 1] << ','
            << grid.photon_edges[c.photon_bin] << ','
            << grid.photon_edges[c.photon_bin + 1] << ',' << c.iteration << ',' << c.n
            << ',' << c.median_residual_lambda << ',' << c.frac_below_limit << ','
            << (c.empty ? 1 : 0) << '\n';
    }
    return out.str();
}

std::vector<TileRegion> tile_volume(const Volume& vol, int tile, int stride) {
    if (tile < 1 || stride < 1) throw std::invalid_argument("bad tile/stride");
    for (int a = 0; a < 3; ++a)
        if (tile > vol.shape[a])
            throw std::invalid_argument("tile larger than the volume");
    std::vector<TileRegion> tiles;
    for (int z0 = 0; z0 < vol.shape[0]; z0 += stride) {
        for (int y0 = 0; y0 < vol.shape[1]; y0 += stride) {
            for (int x0 = 0; x0 < vol.shape[2]; x0 += stride) {
                TileRegion region;
                region.origin = {z0, y0, x0};
                region.volume = Volume(tile, tile, tile, vol.voxel_um);
                for (int z = 0; z < tile; ++z)
                    for (int y = 0; y < tile; ++y)
                        for (int x = 0; x < tile; ++x)
                            region.volume.at(z, y, x) =
                                vol.at(reflect_index(z0 + z, vol.shape[0]),
                                       reflect_index(y0 + y, vol.shape[1]),
                                       reflect_index(x0 + x, vol.shape[2]));
                tiles.push_back(std::move(region));
            }
        }
    }
    return tiles;
}

Volume assemble_tiles(const std::vector<TileRegion>& tiles,
                      const std::array<int, 3>& shape,
                      const std::array<double, 3>& voxel) {
    Volume out(shape[0], shape[1], shape[2], voxel);
    for (const auto& t : tiles) {
        const int n = t.volume.shape[0];
        for (int z = 0; z < n; ++z)
            for (int y = 0; y < n; ++y)
                for (int x = 0; x < n; ++x) {
                    const int zz = t.origin[0] + z, yy = t.origin[1] + y,
                              xx = t.origin[2] + x;
                    if (zz >= shape[0] || yy >= shape[1] || xx >= shape[2]) continue;
                    out.at(zz, yy, xx) = t.volume.at(z, y, x);
                }
    }
    return out;
}

nlohmann::json tilemap_to_json(const TileMap& map) {
    nlohmann::json tiles = nlohmann::json::array();
    for (const auto& t : map.tiles) {
        nlohmann::json statuses = nlohmann::json::array();
        for (auto s : t.statuses) statuses.push_back(to_string(s));
        tiles.push_back({{"origin", t.origin},
                         {"zernike_um", t.coeffs.amps},
                         {"statuses", statuses},
                         {"flag", t.flag == TileFlag::Predicted ? "predicted"
                                                                : "ideal_fallback"}});
    }
    return {{"volume_shape", map.volume_shape},
            {"tile", map.tile},
            {"stride", map.stride},
            {"tiles", tiles}};
}

TileMap tilemap_from_json(const nlohmann::json& j) {
    TileMap map;
    const auto shape = j.at("volume_shape").get<std::vector<int>>();
    map.volume_shape = {shape.at(0), shape.at(1), shape.at(2)};
    map.tile = j.at("tile").get<int>();
    map.stride = j.at("stride").get<int>();
    for (const auto& t : j.at("tiles")) {
        TileEntry e;
        const auto origin = t.at("origin").get<std::vector<int>>();
        e.origin = {origin.at(0), origin.at(1), origin.at(2)};
        const auto amps = t.at("zernike_um").get<std::vector<double>>();
        for (int i = 0; i < kNumModes && i < static_cast<int>(amps.size()); ++i)
            e.coeffs[i] = amps[static_cast<std::size_t>(i)];
        for (const auto& s : t.at("statuses")) {
            const std::string v = s.get<std::string>();
            e.statuses.push_back(v == "confident" ? ModeStatus::Confident
                                 : v == "confident_zero" ? ModeStatus::ConfidentZero
                                                         : ModeStatus::NotConfident);
        }
        e.flag = t.at("flag").get<std::string>() == "predicted"
                     ? TileFlag::Predicted
                     : TileFlag::IdealFallback;
        map.tiles.push_back(e);
    }
    return map;
}

TileMap map_aberrations(const Volume& vol, const Predictor& predictor,
                        const EmbeddingContext& ctx, int tile, int stride,
                        int rotations, int threads,
                        const ConfidenceThresholds& thresholds) {
    auto regions = tile_volume(vol, tile, stride);
    TileMap map;
    map.volume_shape = vol.shape;
    map.tile = tile;
    map.stride = stride;
    map.tiles.resize(regions.size());

    parallel_for(regions.size(), threads, [&](std::size_t i) {
        TileEntry entry;
        entry.origin = regions[i].origin;
        const FourierEmbedding e = ctx.embed(regions[i].volume);
        if (rotations > 1) {
            auto report = classify(sweep(e, predictor, rotations), thresholds);
            entry.coeffs = report.final_coeffs;
            bool any_confident = false;
            for (const auto& mc : report.groups) {
                entry.statuses.push_back(mc.status);
                if (mc.status == ModeStatus::Confident) any_confident = true;
            }
            entry.flag = any_confident ? TileFlag::Predicted : TileFlag::IdealFallback;
        } else {
            entry.coeffs = predictor(e);
            entry.statuses.assign(twin_groups().size(), ModeStatus::Confident);
            entry.flag = TileFlag::Predicted;
        }
        if (entry.flag == TileFlag::IdealFallback) entry.coeffs = ZernikeCoeffs{};
        map.tiles[i] = std::move(entry);
    });
    return map;
}

Volume sv_deconvolve(const Volume& vol, const TileMap& map, const OpticsConfig& optics,
                     const SvDeconvConfig& cfg, int threads) {
    if (map.tiles.empty()) throw std::invalid_argument("empty tile map");
    const int tile = map.tile;
    const int ext = tile + 2 * cfg.overlap;

    // PSFs live on the extended tile grid so the Wiener pass sees the
    // same periodic domain as the tile content.
    OpticsConfig tile_optics = optics;
    tile_optics.shape = {ext, ext, ext};
    tile_optics.validate();
    const PupilField pupil = make_pupil(tile_optics);
    const LightSheetProfile sheet = light_sheet_planes(cfg.sheet, tile_optics, ext);
    const PSF3D ideal_psf = overall_psf(detection_psf(pupil, tile_optics), sheet);

    Volume out(vol.shape[0], vol.shape[1], vol.shape[2], vol.voxel_um);
    out.meta = vol.meta;

    std::vector<Volume> cores(map.tiles.size());
    parallel_for(map.tiles.size(), threads, [&](std::size_t i) {
        const TileEntry& entry = map.tiles[i];
        // Extended region, reflection padded at the volume borders.
        Volume region(ext, ext, ext, vol.voxel_um);
        for (int z = 0; z < ext; ++z)
            for (int y = 0; y < ext; ++y)
                for (int x = 0; x < ext; ++x)
                    region.at(z, y, x) =
                        vol.at(reflect_index(entry.origin[0] - cfg.overlap + z,
                                             vol.shape[0]),
                               reflect_index(entry.origin[1] - cfg.overlap + y,
                                             vol.shape[1]),
                               reflect_index(entry.origin[2] - cfg.overlap + x,
                                             vol.shape[2]));
        PSF3D psf = ideal_psf;
        if (entry.flag == TileFlag::Predicted && entry.coeffs.rms_um() > 0.0) {
            const PupilField ab =
                apply_aberration(pupil, entry.coeffs, tile_optics.lambda_det_um);
            psf = overall_psf(detection_psf(ab, tile_optics), sheet);
        }
        Volume deconv = wiener_deconvolve(region, psf, cfg.snr_param, ideal_psf);
        // Keep the core, drop the apron.
        Volume core(tile, tile, tile, vol.voxel_um);
        for (int z = 0; z < tile; ++z)
            for (int y = 0; y < tile; ++y)
                for (int x = 0; x < tile; ++x)
                    core.at(z, y, x) =
                        deconv.at(z + cfg.overlap, y + cfg.overlap, x + cfg.overlap);
        cores[i] = std::move(core);
    });

    for (std::size_t i = 0; i < map.tiles.size(); ++i) {
        const auto& origin = map.tiles[i].origin;
        for (int z = 0; z < tile; ++z)
            for (int y = 0; y < tile; ++y)
                for (int x = 0; x < tile; ++x) {
                    const int zz = origin[0] + z, yy = origin[1] + y, xx = origin[2] + x;
                    if (zz >= vol.shape[0] || yy >= vol.shape[1] || xx >= vol.shape[2])
                        continue;
                    out.at(zz, yy, xx) = cores[i].at(z, y, x);
                }
    }
    return out;
}

}  // namespace aosense
