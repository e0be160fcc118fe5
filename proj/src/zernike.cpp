#include "aosense/zernike.hpp"

#include <algorithm>
#include <cmath>
#include <stdexcept>

#include "aosense/rng.hpp"

namespace aosense {

namespace {

bool valid_nm(int n, int m) {
    return n >= 0 && std::abs(m) <= n && (n - std::abs(m)) % 2 == 0;
}

double factorial(int k) {
    double f = 1.0;
    for (int i = 2; i <= k; ++i) f *= i;
    return f;
}

// Radial polynomial R_n^{|m|}(rho).
double radial(int n, int m_abs, double rho) {
    double r = 0.0;
    const int kmax = (n - m_abs) / 2;
    for (int k = 0; k <= kmax; ++k) {
        const double num = (k % 2 == 0 ? 1.0 : -1.0) * factorial(n - k);
        const double den = factorial(k) * factorial((n + m_abs) / 2 - k) *
                           factorial((n - m_abs) / 2 - k);
        r += num / den * std::pow(rho, n - 2 * k);
    }
    return r;
}

}  // namespace

ZernikeIndex ansi_to_nm(int j) {
    if (j < 0) throw std::invalid_argument("ansi index must be >= 0");
    // Row n holds the n+1 indices [n(n+2)/2 - n, ...]; walk rows instead
    // of solving the quadratic to stay exact for all j.
    int n = 0;
    int row_start = 0;
    while (row_start + n + 1 <= j) {
        row_start += n + 1;
        ++n;
    }
    const int m = -n + 2 * (j - row_start);
    return ZernikeIndex{j, n, m};
}

int nm_to_ansi(int n, int m) {
    if (!valid_nm(n, m)) throw std::invalid_argument("invalid (n, m) pair");
    return (n * (n + 2) + m) / 2;
}

double eval_mode(int n, int m, double rho, double theta) {
    if (!valid_nm(n, m)) throw std::invalid_argument("invalid (n, m) pair");
    const int m_abs = std::abs(m);
    // Orthonormal scaling: mean square over the unit disk is 1.
    const double norm =
        (m == 0) ? std::sqrt(static_cast<double>(n + 1))
                 : std::sqrt(2.0 * static_cast<double>(n + 1));
    const double r = radial(n, m_abs, rho);
    if (m > 0) return norm * r * std::cos(m_abs * theta);
    if (m < 0) return norm * r * std::sin(m_abs * theta);
    return norm * r;
}

double ZernikeCoeffs::rms_um() const {
    double s = 0.0;
    for (double a : amps) s += a * a;
    return std::sqrt(s);
}

bool ZernikeCoeffs::finite() const {
    for (double a : amps)
        if (!std::isfinite(a)) return false;
    return true;
}

ZernikeCoeffs ZernikeCoeffs::operator+(const ZernikeCoeffs& o) const {
    ZernikeCoeffs r;
    for (int i = 0; i < kNumModes; ++i) r.amps[i] = amps[i] + o.amps[i];
    return r;
}

ZernikeCoeffs ZernikeCoeffs::operator-(const ZernikeCoeffs& o) const {
    ZernikeCoeffs r;
    for (int i = 0; i < kNumModes; ++i) r.amps[i] = amps[i] - o.amps[i];
    return r;
}

ZernikeCoeffs ZernikeCoeffs::operator*(double s) const {
    ZernikeCoeffs r;
    for (int i = 0; i < kNumModes; ++i) r.amps[i] = amps[i] * s;
    return r;
}

void to_json(nlohmann::json& j, const ZernikeCoeffs& c) {
    j = nlohmann::json{{"zernike_um", c.amps}};
}

void from_json(const nlohmann::json& j, ZernikeCoeffs& c) {
    const auto v = j.at("zernike_um").get<std::vector<double>>();
    if (v.size() != kNumModes)
        throw std::invalid_argument("zernike_um must have 15 entries");
    std::copy(v.begin(), v.end(), c.amps.begin());
}

Wavefront compose_wavefront(const ZernikeCoeffs& coeffs, int grid_size) {
    if (grid_size < 32) throw std::invalid_argument("wavefront grid must be >= 32");
    Wavefront w;
    w.size = grid_size;
    w.phase.assign(static_cast<std::size_t>(grid_size) * grid_size, 0.0);
    w.mask.assign(w.phase.size(), 0);

    std::vector<ZernikeIndex> active;
    for (int j = 0; j < kNumModes; ++j)
        if (coeffs[j] != 0.0) active.push_back(ansi_to_nm(j));

    for (int iy = 0; iy < grid_size; ++iy) {
        const double y = (2.0 * iy + 1.0) / grid_size - 1.0;
        for (int ix = 0; ix < grid_size; ++ix) {
            const double x = (2.0 * ix + 1.0) / grid_size - 1.0;
            const double rho = std::hypot(x, y);
            if (rho > 1.0) continue;
            const std::size_t idx = static_cast<std::size_t>(iy) * grid_size + ix;
            w.mask[idx] = 1;
            if (active.empty()) continue;
            const double theta = std::atan2(y, x);
            double p = 0.0;
            for (const auto& zi : active)
                p += coeffs[zi.j] * eval_mode(zi.n, zi.m, rho, theta);
            w.phase[idx] = p;
        }
    }
    return w;
}

double wavefront_rms(const Wavefront& w) {
    double mean = 0.0;
    std::size_t count = 0;
    for (std::size_t i = 0; i < w.phase.size(); ++i) {
        if (!w.mask[i]) continue;
        mean += w.phase[i];
        ++count;
    }
    if (count == 0) throw std::invalid_argument("wavefront mask is empty");
    mean /= static_cast<double>(count);
    double var = 0.0;
    for (std::size_t i = 0; i < w.phase.size(); ++i) {
        if (!w.mask[i]) continue;
        const double d = w.phase[i] - mean;
        var += d * d;
    }
    return std::sqrt(var / static_cast<double>(count));
}

double wavefront_pv(const Wavefront& w) {
    bool any = false;
    double lo = 0.0, hi = 0.0;
    for (std::size_t i = 0; i < w.phase.size(); ++i) {
        if (!w.mask[i]) continue;
        if (!any) {
            lo = hi = w.phase[i];
            any = true;
        } else {
            lo = std::min(lo, w.phase[i]);
            hi = std::max(hi, w.phase[i]);
        }
    }
    if (!any) throw std::invalid_argument("wavefront mask is empty");
    return hi - lo;
}

AberrationKind aberration_kind_from_string(const std::string& s) {
    if (s == "single") return AberrationKind::Single;
    if (s == "bimodal") return AberrationKind::Bimodal;
    if (s == "powerlaw") return AberrationKind::Powerlaw;
    if (s == "dirichlet") return AberrationKind::Dirichlet;
    throw std::invalid_argument("unknown aberration kind: " + s);
}

std::string to_string(AberrationKind k) {
    switch (k) {
        case AberrationKind::Single: return "single";
        case AberrationKind::Bimodal: return "bimodal";
        case AberrationKind::Powerlaw: return "powerlaw";
        case AberrationKind::Dirichlet: return "dirichlet";
    }
    return "?";
}

ZernikeCoeffs sample_aberration(AberrationKind kind, double alpha_max_um,
                                std::uint64_t seed) {
    if (!(alpha_max_um >= 0.0))
        throw std::invalid_argument("alpha_max must be >= 0");
    constexpr std::uint64_t kStream = 0x41424552ULL;  // aberration draws
    CounterRng rng(seed, kStream);
    ZernikeCoeffs c;

    const int n_det = static_cast<int>(kDetectableModes.size());
    switch (kind) {
        case AberrationKind::Single: {
            const int pick = static_cast<int>(rng.uniform_int(0, n_det - 1));
            c[kDetectableModes[pick]] = rng.uniform(0.0, alpha_max_um);
            break;
        }
        case AberrationKind::Bimodal: {
            const double alpha_t = rng.uniform(0.0, alpha_max_um);
            const int first = static_cast<int>(rng.uniform_int(0, n_det - 1));
            int second = static_cast<int>(rng.uniform_int(0, n_det - 2));
            if (second >= first) ++second;
            const double eps = rng.uniform();
            c[kDetectableModes[first]] = eps * alpha_t;
            c[kDetectableModes[second]] = (1.0 - eps) * alpha_t;
            break;
        }
        case AberrationKind::Powerlaw: {
            const double alpha_t = rng.uniform(0.0, alpha_max_um);
            constexpr double gamma = 0.75;
            std::array<double, 11> eps{};
            double total = 0.0;
            for (int i = 0; i < n_det; ++i) {
                const double x = rng.uniform();
                eps[i] = gamma / std::pow(x + 1.0, gamma + 1.0);
                total += eps[i];
            }
            for (int i = 0; i < n_det; ++i)
                c[kDetectableModes[i]] = eps[i] / total * alpha_t;
            break;
        }
        case AberrationKind::Dirichlet: {
            const double alpha_t = rng.uniform(0.0, alpha_max_um);
            std::array<double, 11> eps{};
            double total = 0.0;
            for (int i = 0; i < n_det; ++i) {
                eps[i] = rng.uniform();
                total += eps[i];
            }
            if (total == 0.0) total = 1.0;
            for (int i = 0; i < n_det; ++i)
                c[kDetectableModes[i]] = eps[i] / total * alpha_t;
            break;
        }
    }
    return c;
}

ZernikeCoeffs rotate_coeffs(const ZernikeCoeffs& coeffs, double theta) {
    ZernikeCoeffs out = coeffs;
    for (const auto& g : twin_groups()) {
        if (g.m == 0) continue;
        const double a_sin = coeffs[g.j_sin];
        const double a_cos = coeffs[g.j_cos];
        const double ang = g.m * theta;
        const double cs = std::cos(ang), sn = std::sin(ang);
        out[g.j_cos] = a_cos * cs - a_sin * sn;
        out[g.j_sin] = a_cos * sn + a_sin * cs;
    }
    return out;
}

const std::vector<TwinGroup>& twin_groups() {
    static const std::vector<TwinGroup> groups = [] {
        std::vector<TwinGroup> g;
        g.push_back({1, 7, 8, "coma"});
        g.push_back({2, 3, 5, "astigmatism"});
        g.push_back({2, 11, 13, "secondary astigmatism"});
        g.push_back({3, 6, 9, "trefoil"});
        g.push_back({4, 10, 14, "quadrafoil"});
        g.push_back({0, -1, 12, "spherical"});
        return g;
    }();
    return groups;
}

}  // namespace aosense
