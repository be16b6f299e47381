#pragma once

#include <complex>
#include <cstddef>
#include <numbers>
#include <vector>

#include "ssanet/errors.hpp"

namespace ssanet::fft {

using cplx = std::complex<double>;

inline bool is_pow2(std::size_t n) { return n != 0 && (n & (n - 1)) == 0; }

namespace detail {

// In-place iterative radix-2 Cooley-Tukey. sign = -1 forward, +1 inverse
// (inverse does not divide by n; callers handle the 1/n factor).
inline void fft_pow2(std::vector<cplx>& a, int sign) {
    const std::size_t n = a.size();
    if (n <= 1) return;
    for (std::size_t i = 1, j = 0; i < n; ++i) {
        std::size_t bit = n >> 1;
        for (; j & bit; bit >>= 1) j ^= bit;
        j ^= bit;
        if (i < j) std::swap(a[i], a[j]);
    }
    for (std::size_t len = 2; len <= n; len <<= 1) {
        const double ang = sign * 2.0 * std::numbers::pi / static_cast<double>(len);
        const cplx wlen(std::cos(ang), std::sin(ang));
        for (std::size_t i = 0; i < n; i += len) {
            cplx w(1.0, 0.0);
            for (std::size_t k = 0; k < len / 2; ++k) {
                cplx u = a[i + k];
                cplx v = a[i + k + len / 2] * w;
                a[i + k] = u + v;
                a[i + k + len / 2] = u - v;
                w *= wlen;
            }
        }
    }
}

// Bluestein chirp-z transform: arbitrary-length DFT via a power-of-two
// cyclic convolution.
inline void fft_bluestein(std::vector<cplx>& a, int sign) {
    const std::size_t n = a.size();
    if (n <= 1) return;
    std::size_t m = 1;
    while (m < 2 * n + 1) m <<= 1;

    std::vector<cplx> chirp(n);
    for (std::size_t k = 0; k < n; ++k) {
        // angle = sign * pi * k^2 / n, computed mod 2n to keep k^2 small
        const std::size_t k2 = (static_cast<std::size_t>(k) * k) % (2 * n);
        const double ang = sign * std::numbers::pi * static_cast<double>(k2) / static_cast<double>(n);
        chirp[k] = cplx(std::cos(ang), std::sin(ang));
    }

    std::vector<cplx> u(m, cplx(0.0, 0.0)), v(m, cplx(0.0, 0.0));
    for (std::size_t k = 0; k < n; ++k) u[k] = a[k] * chirp[k];
    v[0] = std::conj(chirp[0]);
    for (std::size_t k = 1; k < n; ++k) v[k] = v[m - k] = std::conj(chirp[k]);

    fft_pow2(u, -1);
    fft_pow2(v, -1);
    for (std::size_t k = 0; k < m; ++k) u[k] *= v[k];
    fft_pow2(u, +1);
    const double inv_m = 1.0 / static_cast<double>(m);
    for (std::size_t k = 0; k < n; ++k) a[k] = u[k] * inv_m * chirp[k];
}

inline void transform(std::vector<cplx>& a, int sign) {
    if (is_pow2(a.size()))
        fft_pow2(a, sign);
    else
        fft_bluestein(a, sign);
}

}  // namespace detail

// Forward DFT: X[f] = sum_t x[t] e^{-2 pi i f t / n}.
inline void dft_inplace(std::vector<cplx>& a) { detail::transform(a, -1); }

// Inverse DFT including the 1/n factor.
inline void idft_inplace(std::vector<cplx>& a) {
    detail::transform(a, +1);
    const double inv_n = 1.0 / static_cast<double>(a.size());
    for (cplx& v : a) v *= inv_n;
}

inline std::vector<cplx> dft_real(const double* x, std::size_t n) {
    std::vector<cplx> a(n);
    for (std::size_t i = 0; i < n; ++i) a[i] = cplx(x[i], 0.0);
    dft_inplace(a);
    return a;
}

}  // namespace ssanet::fft
