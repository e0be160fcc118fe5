#include "aosense/fft.hpp"

#include <fftw3.h>

#include <map>
#include <mutex>
#include <tuple>

namespace aosense {

namespace {

// FFTW plan creation is not thread-safe; executions on distinct buffers
// are. Plans are cached per shape/direction and reused with the
// new-array execute interface.
std::mutex g_plan_mutex;

using PlanKey = std::tuple<int, int, int, int>;  // nz, ny, nx, sign
std::map<PlanKey, fftw_plan>& plan_cache() {
    static std::map<PlanKey, fftw_plan> cache;
    return cache;
}

fftw_plan get_plan(int nz, int ny, int nx, int sign) {
    std::lock_guard<std::mutex> lock(g_plan_mutex);
    auto& cache = plan_cache();
    const PlanKey key{nz, ny, nx, sign};
    auto it = cache.find(key);
    if (it != cache.end()) return it->second;

    // Plan on a scratch buffer; FFTW_UNALIGNED lets the plan run on any
    // caller buffer (std::vector storage is not fftw_malloc-aligned).
    const std::size_t n = static_cast<std::size_t>(nz ? nz : 1) * ny * nx;
    fftw_complex* scratch = fftw_alloc_complex(n);
    fftw_plan plan;
    if (nz > 0) {
        plan = fftw_plan_dft_3d(nz, ny, nx, scratch, scratch, sign,
                                FFTW_ESTIMATE | FFTW_UNALIGNED);
    } else {
        plan = fftw_plan_dft_2d(ny, nx, scratch, scratch, sign,
                                FFTW_ESTIMATE | FFTW_UNALIGNED);
    }
    fftw_free(scratch);
    cache.emplace(key, plan);
    return plan;
}

}  // namespace

void fft2(cplx* data, int ny, int nx, bool inverse) {
    const int sign = inverse ? FFTW_BACKWARD : FFTW_FORWARD;
    fftw_plan plan = get_plan(0, ny, nx, sign);
    fftw_execute_dft(plan, reinterpret_cast<fftw_complex*>(data),
                     reinterpret_cast<fftw_complex*>(data));
    if (inverse) {
        const double scale = 1.0 / (static_cast<double>(ny) * nx);
        const std::size_t n = static_cast<std::size_t>(ny) * nx;
        for (std::size_t i = 0; i < n; ++i) data[i] *= scale;
    }
}

void fft3(cplx* data, int nz, int ny, int nx, bool inverse) {
    const int sign = inverse ? FFTW_BACKWARD : FFTW_FORWARD;
    fftw_plan plan = get_plan(nz, ny, nx, sign);
    fftw_execute_dft(plan, reinterpret_cast<fftw_complex*>(data),
                     reinterpret_cast<fftw_complex*>(data));
    if (inverse) {
        const double scale = 1.0 / (static_cast<double>(nz) * ny * nx);
        const std::size_t n = static_cast<std::size_t>(nz) * ny * nx;
        for (std::size_t i = 0; i < n; ++i) data[i] *= scale;
    }
}

std::vector<double> fft_freqs(int n, double spacing) {
    std::vector<double> f(n);
    for (int i = 0; i < n; ++i) {
        const int k = (i <= (n - 1) / 2) ? i : i - n;
        f[i] = static_cast<double>(k) / (n * spacing);
    }
    return f;
}

void ifftshift3(std::vector<cplx>& v, int nz, int ny, int nx) {
    std::vector<cplx> out(v.size());
    for (int z = 0; z < nz; ++z) {
        const int zs = (z + nz / 2) % nz;
        for (int y = 0; y < ny; ++y) {
            const int ys = (y + ny / 2) % ny;
            for (int x = 0; x < nx; ++x) {
                const int xs = (x + nx / 2) % nx;
                out[(static_cast<std::size_t>(z) * ny + y) * nx + x] =
                    v[(static_cast<std::size_t>(zs) * ny + ys) * nx + xs];
            }
        }
    }
    v.swap(out);
}

}  // namespace aosense
