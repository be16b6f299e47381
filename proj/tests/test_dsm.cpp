#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <random>

#include "ssanet/dsm.hpp"
#include "ssanet/gradcheck.hpp"

using namespace ssanet;

namespace {

// top-two per-shift gap, for tie rejection in gradient checks
double top_two_gap(const CirculantResponse& r) {
    if (r.per_shift.size() < 2) return 1.0;
    double best = -1e300, second = -1e300;
    for (double v : r.per_shift) {
        if (v > best) {
            second = best;
            best = v;
        } else if (v > second) {
            second = v;
        }
    }
    return best - second;
}

Proposal centered_proposal(double cx, double cy, double w, double h) {
    Proposal p;
    p.box = Box{cx - w / 2, cy - h / 2, cx + w / 2, cy + h / 2};
    return p;
}

}  // namespace

TEST_CASE("circulant_build definition") {
    auto C1 = circulant_build({5.0});
    CHECK(C1.shape() == Shape{1, 1});
    CHECK(C1[0] == 5.0);

    auto C = circulant_build({1.0, 2.0, 3.0});
    CHECK(C.vec() == std::vector<double>{1, 2, 3, 3, 1, 2, 2, 3, 1});
}

TEST_CASE("circulant rows are cyclic shifts; FFT diagonalization") {
    std::mt19937 rng(2);
    std::uniform_real_distribution<double> d(-1.0, 1.0);
    const std::size_t S = 7;
    std::vector<double> base(S);
    for (auto& v : base) v = d(rng);
    auto C = circulant_build(base);
    for (std::size_t r = 0; r < S; ++r)
        for (std::size_t c = 0; c < S; ++c) CHECK(C.at2(r, c) == base[(c + S - r) % S]);

    // eigenvalues of a circulant are the DFT of its first row; check
    // C v_f = lambda_f v_f for the Fourier basis vectors
    auto lambda = fft::dft_real(base.data(), S);
    for (std::size_t f = 0; f < S; ++f) {
        for (std::size_t r = 0; r < S; ++r) {
            fft::cplx acc(0, 0);
            for (std::size_t c = 0; c < S; ++c) {
                const double ang = -2.0 * std::numbers::pi * static_cast<double>(f * c) / S;
                acc += C.at2(r, c) * fft::cplx(std::cos(ang), std::sin(ang));
            }
            const double ang_r = -2.0 * std::numbers::pi * static_cast<double>(f * r) / S;
            fft::cplx expect = lambda[f] * fft::cplx(std::cos(ang_r), std::sin(ang_r));
            CHECK(std::abs(acc - expect) < 1e-9);
        }
    }
}

TEST_CASE("candidate generation rule") {
    Proposal p = centered_proposal(50, 50, 8, 8);
    std::vector<Proposal> batch = {p, centered_proposal(20, 20, 6, 6)};
    assign_vertices(batch);
    p = batch[0];

    CHECK_THROWS_AS(make_candidate_boxes(p, 2.0, 4, 1000, 1000), ConfigError);

    auto one = make_candidate_boxes(p, 2.0, 1, 1000, 1000);
    REQUIRE(one.size() == 1);
    CHECK(one[0].x1 == p.box.x1);

    auto five = make_candidate_boxes(p, 2.0, 5, 1000, 1000);
    REQUIRE(five.size() == 5);
    // sizes {2,4,8,16,32} before clipping
    const double expect[5] = {2, 4, 8, 16, 32};
    for (int i = 0; i < 5; ++i) {
        CHECK(five[i].width() == doctest::Approx(expect[i]));
        CHECK(five[i].height() == doctest::Approx(expect[i]));
    }
    CHECK(five[2].x1 == p.box.x1);  // exponent 0 is the original
    // expansion fixes psi, shrinking fixes eta
    CHECK(five[4].corner(3).x == doctest::Approx(p.psi.x));  // psi is BR here
    CHECK(five[0].corner(0).x == doctest::Approx(p.eta.x));
}

TEST_CASE("degenerate clipped candidate falls back to min box") {
    // a proposal hanging off the image edge: candidates clip to zero area
    Proposal p;
    p.box = Box{-10, -10, -2, -2};
    p.psi = {-10, -10};
    p.eta = {-2, -2};
    p.vertices_set = true;
    std::vector<bool> flags;
    auto boxes = make_candidate_boxes(p, 2.0, 5, 100, 100, &flags);
    bool any_flagged = false;
    for (std::size_t i = 0; i < boxes.size(); ++i) {
        CHECK(boxes[i].area() > 0.0);
        any_flagged = any_flagged || flags[i];
    }
    CHECK(any_flagged);
}

TEST_CASE("dsm direct degenerate cases") {
    std::mt19937 rng(4);
    Tensor base = Tensor::randn({6, 1}, rng);
    Tensor filt = Tensor::randn({6, 1}, rng);
    auto r = dsm_forward_direct(base, filt);
    double dot = 0.0;
    for (std::size_t k = 0; k < 6; ++k) dot += base[k] * filt[k];
    CHECK(r.y == doctest::Approx(dot));
    CHECK(r.selected_shift == 0);

    Tensor zbase({3, 5});
    Tensor f5 = Tensor::randn({3, 5}, rng);
    CHECK(dsm_forward_direct(zbase, f5).y == doctest::Approx(0.0));

    Tensor bad({2, 3});
    CHECK_THROWS_AS(dsm_forward_direct(bad, f5), DimensionError);
}

TEST_CASE("direct path equals exhaustive shift enumeration") {
    std::mt19937 rng(6);
    Tensor base = Tensor::randn({3, 5}, rng);
    Tensor filt = Tensor::randn({3, 5}, rng);
    auto r = dsm_forward_direct(base, filt);
    for (std::size_t s = 0; s < 5; ++s) {
        double score = 0.0;
        for (std::size_t k = 0; k < 3; ++k)
            for (std::size_t c = 0; c < 5; ++c) score += base.at2(k, (c + 5 - s) % 5) * filt.at2(k, c);
        CHECK(r.per_shift[s] == doctest::Approx(score));
    }
    CHECK(r.y == doctest::Approx(*std::max_element(r.per_shift.begin(), r.per_shift.end())));
}

TEST_CASE("fft path matches direct within 1e-8") {
    std::mt19937 rng(8);
    for (std::size_t S : {1u, 3u, 5u, 15u, 101u}) {
        for (int trial = 0; trial < 20; ++trial) {
            std::uniform_int_distribution<std::size_t> kd(1, 64);
            const std::size_t K = kd(rng);
            Tensor base = Tensor::randn({K, S}, rng);
            Tensor filt = Tensor::randn({K, S}, rng);
            auto rd = dsm_forward_direct(base, filt);
            auto rf = dsm_forward_fft(base, filt);
            for (std::size_t s = 0; s < S; ++s)
                CHECK(std::fabs(rd.per_shift[s] - rf.per_shift[s]) < 1e-8);
        }
    }
}

TEST_CASE("shift covariance and filter scaling") {
    std::mt19937 rng(12);
    const std::size_t K = 4, S = 7;
    Tensor base = Tensor::randn({K, S}, rng);
    Tensor filt = Tensor::randn({K, S}, rng);
    auto r0 = dsm_forward_direct(base, filt);

    const std::size_t t = 3;
    Tensor shifted({K, S});
    for (std::size_t k = 0; k < K; ++k)
        for (std::size_t c = 0; c < S; ++c) shifted.at2(k, (c + t) % S) = base.at2(k, c);
    auto rt = dsm_forward_direct(shifted, filt);
    CHECK(rt.y == doctest::Approx(r0.y));
    for (std::size_t s = 0; s < S; ++s)
        CHECK(rt.per_shift[s] == doctest::Approx(r0.per_shift[(s + t) % S]));

    Tensor scaled = filt;
    for (auto& v : scaled.vec()) v *= 2.5;
    auto rs = dsm_forward_direct(base, scaled);
    CHECK(rs.y == doctest::Approx(2.5 * r0.y));
    CHECK(rs.selected_shift == r0.selected_shift);
}

TEST_CASE("dsm backward trivial cases") {
    std::mt19937 rng(14);
    Tensor base = Tensor::randn({2, 3}, rng);
    Tensor filt = Tensor::randn({2, 3}, rng);
    auto r = dsm_forward_direct(base, filt);

    auto zero = dsm_backward(base, filt, r, 0.0);
    for (double v : zero.d_filter.vec()) CHECK(v == 0.0);
    for (double v : zero.d_base.vec()) CHECK(v == 0.0);

    Tensor b1 = Tensor::randn({1, 1}, rng);
    Tensor f1 = Tensor::randn({1, 1}, rng);
    auto r1 = dsm_forward_direct(b1, f1);
    auto g1 = dsm_backward(b1, f1, r1, 2.0);
    CHECK(g1.d_filter[0] == doctest::Approx(2.0 * b1[0]));
    CHECK(g1.d_base[0] == doctest::Approx(2.0 * f1[0]));

    CirculantResponse stale = r;
    stale.selected_shift = 99;
    CHECK_THROWS_AS(dsm_backward(base, filt, stale, 1.0), ContractError);
}

TEST_CASE("dsm backward matches finite differences away from ties") {
    std::mt19937 rng(16);
    int accepted = 0;
    while (accepted < 30) {
        Tensor base = Tensor::randn({3, 5}, rng);
        Tensor filt = Tensor::randn({3, 5}, rng);
        auto r = dsm_forward_direct(base, filt);
        if (top_two_gap(r) < 1e-3) continue;  // resample tie-adjacent instances
        ++accepted;
        auto g = dsm_backward(base, filt, r, 1.0);
        auto f = [](const std::vector<Tensor>& in) {
            return dsm_forward_direct(in[0], in[1]).y;
        };
        CHECK(finite_diff_max_rel_err(f, {base, filt}, {g.d_base, g.d_filter}) < 1e-4);
    }
}

TEST_CASE("dsm variants") {
    std::mt19937 rng(18);
    // S = 1: all modes identical
    Tensor b1 = Tensor::randn({4, 1}, rng);
    Tensor f1 = Tensor::randn({4, 1}, rng);
    const double y_full = dsm_forward(DsmMode::kFull, b1, f1).y;
    CHECK(dsm_forward(DsmMode::kFixed, b1, f1).y == doctest::Approx(y_full));
    CHECK(dsm_forward(DsmMode::kSingle, b1, f1).y == doctest::Approx(y_full));

    // search for a case where the best shift != 0: full > fixed
    bool found = false;
    for (unsigned seed = 0; seed < 100 && !found; ++seed) {
        std::mt19937 r2(seed);
        Tensor base = Tensor::randn({2, 5}, r2);
        Tensor filt = Tensor::randn({2, 5}, r2);
        auto full = dsm_forward(DsmMode::kFull, base, filt);
        auto fixed = dsm_forward(DsmMode::kFixed, base, filt);
        if (full.selected_shift != 0) {
            found = true;
            CHECK(full.y > fixed.y);
        }
    }
    CHECK(found);

    // filters concentrated on the original-scale slot: single's best score is
    // among the per-shift scores, and full == single
    Tensor base = Tensor::randn({3, 5}, rng);
    Tensor filt({3, 5});
    for (std::size_t k = 0; k < 3; ++k) filt.at2(k, 2) = 1.0 + static_cast<double>(k);
    auto full = dsm_forward(DsmMode::kFull, base, filt);
    auto single = dsm_forward(DsmMode::kSingle, base, filt);
    CHECK(full.y >= single.y - 1e-12);
    CHECK(full.y == doctest::Approx(single.y));
}

TEST_CASE("variant backwards match finite differences") {
    std::mt19937 rng(22);
    for (DsmMode mode : {DsmMode::kFixed, DsmMode::kSingle}) {
        int accepted = 0;
        while (accepted < 10) {
            Tensor base = Tensor::randn({2, 5}, rng);
            Tensor filt = Tensor::randn({2, 5}, rng);
            auto r = dsm_forward(mode, base, filt);
            if (mode == DsmMode::kSingle && top_two_gap(r) < 1e-3) continue;
            ++accepted;
            auto g = dsm_variant_backward(mode, base, filt, r, 1.0);
            auto f = [mode](const std::vector<Tensor>& in) {
                return dsm_forward(mode, in[0], in[1]).y;
            };
            CHECK(finite_diff_max_rel_err(f, {base, filt}, {g.d_base, g.d_filter}) < 1e-4);
        }
    }
}

TEST_CASE("make_candidates extracts shared-length features") {
    std::mt19937 rng(30);
    Tensor fmap = Tensor::randn({7, 7, 3}, rng);
    Proposal p = centered_proposal(24, 24, 16, 16);
    std::vector<Proposal> batch = {p, centered_proposal(40, 40, 10, 10)};
    assign_vertices(batch);
    auto cs = make_candidates(batch[0], 1.3, 5, fmap, 8.0, 3, 3, 56, 56);
    CHECK(cs.S == 5);
    CHECK(cs.base.shape() == Shape{3 * 3 * 3, 5});
    CHECK(cs.boxes.size() == 5);
    CHECK(cs.base.all_finite());
}
