#pragma once

#include <functional>
#include <string>
#include <vector>

#include "aosense/embedding.hpp"
#include "aosense/zernike.hpp"

namespace aosense {

using Predictor = std::function<ZernikeCoeffs(const FourierEmbedding&)>;

struct RotationSweep {
    std::vector<double> angles_deg;  // strictly increasing over [0, 360]
    std::vector<ZernikeCoeffs> preds;
};

struct ConfidenceThresholds {
    double fit_mse_max = 700.0;      // twin-angle residual MSE, degrees^2
    double zero_magnitude_um = 0.05; // below this a noisy mode is "zero"
    double invariant_std_um = 0.01;  // amplitude std tolerance for m = 0
};

enum class ModeStatus { Confident, ConfidentZero, NotConfident };

std::string to_string(ModeStatus s);

struct ModeConfidence {
    TwinGroup group;
    ModeStatus status = ModeStatus::Confident;
    double fit_mse = 0.0;    // deg^2 (m > 0); amplitude std in um for m = 0
    double slope = 0.0;      // twin angle vs applied rotation
    double magnitude = 0.0;  // median um RMS of the pair
    bool fitted = false;
};

struct ConfidenceReport {
    std::vector<ModeConfidence> groups;
    ZernikeCoeffs final_coeffs;  // aggregated, not_confident groups zeroed
    ZernikeCoeffs gated_zero;    // alternative: the 0-degree prediction, gated
};

// preds[i] = predictor(rotate_embedding(e, angles[i])). A predictor
// failure aborts with the failing angle index in the message.
RotationSweep sweep(const FourierEmbedding& e, const Predictor& predictor,
                    int n = 361);

// Least-squares line of the unwrapped twin angle against the applied
// rotation; magnitude is the median pair amplitude over the sweep.
ModeConfidence twin_fit(const RotationSweep& sweep, const TwinGroup& group);

// Full report: per twin-group statuses plus the aggregated coefficients
// (per-mode median of back-rotated predictions). Invariant to the sweep
// ordering.
ConfidenceReport classify(const RotationSweep& sweep,
                          const ConfidenceThresholds& thresholds = {});

nlohmann::json report_to_json(const ConfidenceReport& report);

}  // namespace aosense
