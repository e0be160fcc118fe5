#include "aosense/confidence.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>
#include <stdexcept>

namespace aosense {

namespace {

double median(std::vector<double> v) {
    if (v.empty()) return 0.0;
    const std::size_t mid = v.size() / 2;
    std::nth_element(v.begin(), v.begin() + static_cast<std::ptrdiff_t>(mid), v.end());
    double hi = v[mid];
    if (v.size() % 2 == 1) return hi;
    std::nth_element(v.begin(), v.begin() + static_cast<std::ptrdiff_t>(mid) - 1,
                     v.end());
    return 0.5 * (hi + v[mid - 1]);
}

RotationSweep sorted_by_angle(const RotationSweep& in) {
    std::vector<std::size_t> order(in.angles_deg.size());
    std::iota(order.begin(), order.end(), 0);
    std::sort(order.begin(), order.end(), [&](std::size_t a, std::size_t b) {
        return in.angles_deg[a] < in.angles_deg[b];
    });
    RotationSweep out;
    out.angles_deg.reserve(order.size());
    out.preds.reserve(order.size());
    for (std::size_t i : order) {
        out.angles_deg.push_back(in.angles_deg[i]);
        out.preds.push_back(in.preds[i]);
    }
    return out;
}

}  // namespace

std::string to_string(ModeStatus s) {
    switch (s) {
        case ModeStatus::Confident: return "confident";
        case ModeStatus::ConfidentZero: return "confident_zero";
        case ModeStatus::NotConfident: return "not_confident";
    }
    return "?";
}

RotationSweep sweep(const FourierEmbedding& e, const Predictor& predictor, int n) {
    if (n < 1) throw std::invalid_argument("sweep needs at least one angle");
    RotationSweep out;
    out.angles_deg.resize(static_cast<std::size_t>(n));
    out.preds.resize(static_cast<std::size_t>(n));
    for (int i = 0; i < n; ++i) {
        const double deg = (n == 1) ? 0.0 : 360.0 * i / (n - 1);
        out.angles_deg[static_cast<std::size_t>(i)] = deg;
        try {
            out.preds[static_cast<std::size_t>(i)] =
                predictor(rotate_embedding(e, deg * M_PI / 180.0));
        } catch (const std::exception& ex) {
            throw std::runtime_error("predictor failed at angle index " +
                                     std::to_string(i) + ": " + ex.what());
        }
    }
    return out;
}

ModeConfidence twin_fit(const RotationSweep& sweep_in, const TwinGroup& group) {
    ModeConfidence mc;
    mc.group = group;
    const RotationSweep s = sorted_by_angle(sweep_in);
    const std::size_t n = s.preds.size();
    if (n == 0) return mc;

    if (group.m == 0) {
        // Rotationally invariant mode: amplitude stability over the sweep.
        std::vector<double> amps(n);
        double mean = 0.0;
        for (std::size_t i = 0; i < n; ++i) {
            amps[i] = s.preds[i][group.j_cos];
            mean += amps[i];
        }
        mean /= static_cast<double>(n);
        double var = 0.0;
        for (double a : amps) var += (a - mean) * (a - mean);
        mc.fit_mse = std::sqrt(var / static_cast<double>(n));  // std, um
        std::vector<double> mags(n);
        for (std::size_t i = 0; i < n; ++i) mags[i] = std::fabs(amps[i]);
        mc.magnitude = median(std::move(mags));
        mc.fitted = true;
        return mc;
    }

    std::vector<double> mags(n);
    bool any_nonzero = false;
    for (std::size_t i = 0; i < n; ++i) {
        mags[i] = std::hypot(s.preds[i][group.j_sin], s.preds[i][group.j_cos]);
        if (mags[i] > 0.0) any_nonzero = true;
    }
    mc.magnitude = median(std::vector<double>(mags));
    if (!any_nonzero) return mc;  // magnitude 0, fit skipped

    // Twin angle in degrees, unwrapped over the sweep (period 360/m).
    const double period = 360.0 / group.m;
    std::vector<double> psi(n);
    for (std::size_t i = 0; i < n; ++i) {
        double a = std::atan2(s.preds[i][group.j_sin], s.preds[i][group.j_cos]) /
                   group.m * 180.0 / M_PI;
        if (i > 0) {
            const double k = std::round((psi[i - 1] - a) / period);
            a += k * period;
        }
        psi[i] = a;
    }

    // Reported slope comes from the free least-squares line; the
    // residual MSE is measured against the known unit-slope track
    // (free intercept). A constant predictor then scores slope ~ 0 and
    // a large MSE instead of trivially fitting its own flat line.
    double sx = 0, sy = 0, sxx = 0, sxy = 0;
    for (std::size_t i = 0; i < n; ++i) {
        sx += s.angles_deg[i];
        sy += psi[i];
        sxx += s.angles_deg[i] * s.angles_deg[i];
        sxy += s.angles_deg[i] * psi[i];
    }
    const double nn = static_cast<double>(n);
    const double denom = nn * sxx - sx * sx;
    mc.slope = denom != 0.0 ? (nn * sxy - sx * sy) / denom : 0.0;
    const double track_intercept = (sy - sx) / nn;  // best b for psi = angle + b
    double mse = 0.0;
    for (std::size_t i = 0; i < n; ++i) {
        const double r = psi[i] - (s.angles_deg[i] + track_intercept);
        mse += r * r;
    }
    mc.fit_mse = mse / nn;
    mc.fitted = true;
    return mc;
}

ConfidenceReport classify(const RotationSweep& sweep_in,
                          const ConfidenceThresholds& th) {
    const RotationSweep s = sorted_by_angle(sweep_in);
    ConfidenceReport report;

    for (const auto& group : twin_groups()) {
        ModeConfidence mc = twin_fit(s, group);
        if (group.m == 0) {
            // Stable amplitude -> confident when it carries real mass,
            // confident-zero when it sits under the magnitude gate;
            // unstable amplitude -> not confident unless tiny.
            const bool stable = !mc.fitted || mc.fit_mse <= th.invariant_std_um;
            if (mc.magnitude <= th.zero_magnitude_um)
                mc.status = ModeStatus::ConfidentZero;
            else
                mc.status = stable ? ModeStatus::Confident : ModeStatus::NotConfident;
        } else if (!mc.fitted) {
            mc.status = ModeStatus::ConfidentZero;  // exactly zero twins
        } else if (mc.fit_mse > th.fit_mse_max) {
            mc.status = mc.magnitude > th.zero_magnitude_um
                            ? ModeStatus::NotConfident
                            : ModeStatus::ConfidentZero;
        } else {
            mc.status = ModeStatus::Confident;
        }
        report.groups.push_back(mc);
    }

    // Aggregate: back-rotate every prediction by its applied angle, take
    // the per-mode median.
    const std::size_t n = s.preds.size();
    std::vector<ZernikeCoeffs> back(n);
    for (std::size_t i = 0; i < n; ++i)
        back[i] = rotate_coeffs(s.preds[i], -s.angles_deg[i] * M_PI / 180.0);
    for (int j = 0; j < kNumModes; ++j) {
        std::vector<double> vals(n);
        for (std::size_t i = 0; i < n; ++i) vals[i] = back[i][j];
        report.final_coeffs[j] = median(std::move(vals));
    }
    report.gated_zero = s.preds.empty() ? ZernikeCoeffs{} : s.preds.front();

    for (const auto& mc : report.groups) {
        if (mc.status != ModeStatus::NotConfident) continue;
        if (mc.group.j_sin >= 0) {
            report.final_coeffs[mc.group.j_sin] = 0.0;
            report.gated_zero[mc.group.j_sin] = 0.0;
        }
        report.final_coeffs[mc.group.j_cos] = 0.0;
        report.gated_zero[mc.group.j_cos] = 0.0;
    }
    return report;
}

nlohmann::json report_to_json(const ConfidenceReport& report) {
    nlohmann::json groups = nlohmann::json::array();
    for (const auto& mc : report.groups) {
        nlohmann::json modes = nlohmann::json::array();
        if (mc.group.j_sin >= 0) modes.push_back(mc.group.j_sin);
        modes.push_back(mc.group.j_cos);
        groups.push_back({{"name", mc.group.name},
                          {"m", mc.group.m},
                          {"modes", modes},
                          {"status", to_string(mc.status)},
                          {"fit_mse", mc.fit_mse},
                          {"slope", mc.slope},
                          {"magnitude", mc.magnitude}});
    }
    return {{"groups", groups},
            {"final", nlohmann::json(report.final_coeffs)},
            {"gated_zero", nlohmann::json(report.gated_zero)}};
}

}  // namespace aosense
