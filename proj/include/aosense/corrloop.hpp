#pragma once

#include <array>
#include <functional>
#include <optional>
#include <string>
#include <vector>

#include "aosense/confidence.hpp"
#include "aosense/embedding.hpp"
#include "aosense/synth.hpp"
#include "aosense/zernike.hpp"

namespace aosense {

// Predictors inside the loop see the embedding of the simulated volume
// plus the hidden residual truth; honest predictors ignore the latter,
// oracle/test predictors use it.
using LoopPredictor =
    std::function<ZernikeCoeffs(const FourierEmbedding&, const ZernikeCoeffs& residual_truth)>;

LoopPredictor oracle_predictor();
// Oracle plus a random error of norm <= q * ||residual||.
LoopPredictor noisy_oracle_predictor(double q, std::uint64_t seed);
LoopPredictor model_loop_predictor(const Predictor& p);

struct CorrectionState {
    ZernikeCoeffs true_ab;
    ZernikeCoeffs applied;                 // cumulative corrector
    std::vector<double> residual_lambda;   // per iteration, starts with r0
    bool aborted = false;
};

struct LoopConfig {
    GenConfig gen;            // simulation settings per iteration
    std::uint64_t seed = 0;   // puncta/photons/noise seed base
    int iterations = 3;
};

// Closed-loop correction: simulate under (true + applied), embed,
// predict, subtract. Residuals recorded in lambda-RMS units.
CorrectionState run_loop(const ZernikeCoeffs& true_ab, const LoopPredictor& predictor,
                         const EmbeddingContext& ctx, const Renderer& renderer,
                         const LoopConfig& cfg);

struct EvalGridConfig {
    std::vector<double> amp_edges_lambda{0.0, 0.125, 0.25, 0.375, 0.5};
    std::vector<double> photon_edges{1e3, 5e3, 2.5e4, 1e5, 5e5};
    int samples_per_bin = 25;
    int iterations = 3;
    std::uint64_t seed = 0;
    double diffraction_limit_lambda = 0.075;
};

struct EvalCell {
    int amp_bin = 0, photon_bin = 0, iteration = 0;
    int n = 0;
    double median_residual_lambda = 0.0;
    double frac_below_limit = 0.0;
    bool empty = false;
};

// Median residual and diffraction-limited fraction per (amplitude,
// photons) bin and iteration. Deterministic per seed.
std::vector<EvalCell> evaluate_grid(const LoopPredictor& predictor,
                                    const EmbeddingContext& ctx,
                                    const Renderer& renderer, const LoopConfig& loop,
                                    const EvalGridConfig& grid, int threads = 1);

std::string eval_grid_csv(const std::vector<EvalCell>& cells,
                          const EvalGridConfig& grid);

// ---- tiling and spatially varying deconvolution -----------------------

struct TileRegion {
    std::array<int, 3> origin{0, 0, 0};  // voxels, may index padded space
    Volume volume;                        // tile content (reflection padded)
};

// Row-major tiles with configurable stride; edge tiles are padded by
// reflection where they overrun the volume.
std::vector<TileRegion> tile_volume(const Volume& vol, int tile, int stride);

// Exact inverse for stride == tile.
Volume assemble_tiles(const std::vector<TileRegion>& tiles,
                      const std::array<int, 3>& shape,
                      const std::array<double, 3>& voxel);

enum class TileFlag { Predicted, IdealFallback };

struct TileEntry {
    std::array<int, 3> origin{0, 0, 0};
    ZernikeCoeffs coeffs;
    std::vector<ModeStatus> statuses;  // per twin group
    TileFlag flag = TileFlag::Predicted;
};

struct TileMap {
    std::array<int, 3> volume_shape{0, 0, 0};
    int tile = 64;
    int stride = 64;
    std::vector<TileEntry> tiles;
};

nlohmann::json tilemap_to_json(const TileMap& map);
TileMap tilemap_from_json(const nlohmann::json& j);

// Per-tile embedding + prediction + confidence sweep; tiles with no
// confident twin group fall back to the ideal PSF.
TileMap map_aberrations(const Volume& vol, const Predictor& predictor,
                        const EmbeddingContext& ctx, int tile = 64, int stride = 64,
                        int rotations = 361, int threads = 1,
                        const ConfidenceThresholds& thresholds = {});

struct SvDeconvConfig {
    int overlap = 32;        // half the PSF width, per spec
    double snr_param = 100.0;
    LightSheetKind sheet = LightSheetKind::MBSq35;
};

// Tile-wise OTF-masked Wiener deconvolution with per-tile PSFs from the
// map; overlapping aprons are deconvolved and discarded so the stitched
// cores stay seam-free.
Volume sv_deconvolve(const Volume& vol, const TileMap& map, const OpticsConfig& optics,
                     const SvDeconvConfig& cfg, int threads = 1);

}  // namespace aosense
