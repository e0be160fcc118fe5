#pragma once

#include <complex>
#include <vector>

namespace aosense {

using cplx = std::complex<double>;

// Thin wrappers over FFTW (double precision, FFTW_ESTIMATE plans only,
// so results are reproducible across runs for a given platform).
// All transforms are unnormalized like FFTW; inverse variants divide
// by the element count. Safe to call from multiple threads: plan
// creation is serialized internally, execution is re-entrant.

// In-place 2D transform of an ny*nx row-major buffer.
void fft2(cplx* data, int ny, int nx, bool inverse);

// In-place 3D transform of an nz*ny*nx row-major buffer.
void fft3(cplx* data, int nz, int ny, int nx, bool inverse);

// FFT sample frequencies in cycles per unit (numpy fftfreq layout).
std::vector<double> fft_freqs(int n, double spacing);

// Index of frequency bin k after fftshift (DC moves to n/2).
inline int fftshift_index(int k, int n) { return (k + n / 2) % n; }

// Circularly shift a 3D complex volume so the centre voxel
// (nz/2, ny/2, nx/2) moves to the origin (exact for even sizes).
void ifftshift3(std::vector<cplx>& v, int nz, int ny, int nx);

}  // namespace aosense
