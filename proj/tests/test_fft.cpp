#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <random>

#include "ssanet/fft.hpp"

using namespace ssanet;
using fft::cplx;

namespace {

// quadratic-time reference DFT
std::vector<cplx> naive_dft(const std::vector<cplx>& x) {
    const std::size_t n = x.size();
    std::vector<cplx> out(n);
    for (std::size_t f = 0; f < n; ++f) {
        cplx acc(0.0, 0.0);
        for (std::size_t t = 0; t < n; ++t) {
            const double ang = -2.0 * std::numbers::pi * static_cast<double>(f * t) /
                               static_cast<double>(n);
            acc += x[t] * cplx(std::cos(ang), std::sin(ang));
        }
        out[f] = acc;
    }
    return out;
}

}  // namespace

TEST_CASE("dft matches naive reference for mixed sizes") {
    std::mt19937 rng(5);
    std::uniform_real_distribution<double> d(-1.0, 1.0);
    for (std::size_t n : {1u, 2u, 3u, 5u, 8u, 15u, 16u, 101u, 128u}) {
        std::vector<cplx> x(n);
        for (auto& v : x) v = cplx(d(rng), d(rng));
        auto ref = naive_dft(x);
        auto got = x;
        fft::dft_inplace(got);
        for (std::size_t i = 0; i < n; ++i) {
            CHECK(std::abs(got[i] - ref[i]) < 1e-9 * std::max(1.0, std::abs(ref[i])));
        }
    }
}

TEST_CASE("idft inverts dft") {
    std::mt19937 rng(9);
    std::uniform_real_distribution<double> d(-1.0, 1.0);
    for (std::size_t n : {3u, 7u, 64u, 101u}) {
        std::vector<cplx> x(n);
        for (auto& v : x) v = cplx(d(rng), d(rng));
        auto y = x;
        fft::dft_inplace(y);
        fft::idft_inplace(y);
        for (std::size_t i = 0; i < n; ++i) CHECK(std::abs(y[i] - x[i]) < 1e-10);
    }
}
