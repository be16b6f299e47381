#pragma once

#include <algorithm>
#include <cmath>
#include <cstddef>

#include "ssanet/proposals.hpp"
#include "ssanet/tensor.hpp"

namespace ssanet {

// Bilinear sampling over H x W x C maps, RoI-align style (half-cell sample
// centers, edge clamped). crop_resize_backward scatters with the same
// weights, so the pair is an exact adjoint.

namespace detail {

struct BilinearTap {
    std::size_t y0, y1, x0, x1;
    double wy, wx;  // weight of the y1/x1 side
};

inline BilinearTap bilinear_tap(double sy, double sx, std::size_t H, std::size_t W) {
    sy = std::clamp(sy, 0.0, static_cast<double>(H) - 1.0);
    sx = std::clamp(sx, 0.0, static_cast<double>(W) - 1.0);
    BilinearTap t;
    t.y0 = static_cast<std::size_t>(std::floor(sy));
    t.x0 = static_cast<std::size_t>(std::floor(sx));
    t.y1 = std::min(t.y0 + 1, H - 1);
    t.x1 = std::min(t.x0 + 1, W - 1);
    t.wy = sy - static_cast<double>(t.y0);
    t.wx = sx - static_cast<double>(t.x0);
    return t;
}

}  // namespace detail

// Crop `box` (in map coordinates) out of `map` and resize to oh x ow.
inline Tensor crop_resize(const Tensor& map, const Box& box, std::size_t oh, std::size_t ow) {
    const std::size_t H = map.dim(0), W = map.dim(1), C = map.dim(2);
    Tensor out({oh, ow, C});
    const double bh = box.height(), bw = box.width();
    for (std::size_t oy = 0; oy < oh; ++oy)
        for (std::size_t ox = 0; ox < ow; ++ox) {
            const double sy = box.y1 + (static_cast<double>(oy) + 0.5) * bh / static_cast<double>(oh) - 0.5;
            const double sx = box.x1 + (static_cast<double>(ox) + 0.5) * bw / static_cast<double>(ow) - 0.5;
            const auto t = detail::bilinear_tap(sy, sx, H, W);
            for (std::size_t c = 0; c < C; ++c) {
                const double v00 = map.at3(t.y0, t.x0, c), v01 = map.at3(t.y0, t.x1, c);
                const double v10 = map.at3(t.y1, t.x0, c), v11 = map.at3(t.y1, t.x1, c);
                out.at3(oy, ox, c) = (1.0 - t.wy) * ((1.0 - t.wx) * v00 + t.wx * v01) +
                                     t.wy * ((1.0 - t.wx) * v10 + t.wx * v11);
            }
        }
    return out;
}

inline void crop_resize_backward(const Tensor& grad_out, const Box& box, Tensor& grad_map) {
    const std::size_t H = grad_map.dim(0), W = grad_map.dim(1), C = grad_map.dim(2);
    const std::size_t oh = grad_out.dim(0), ow = grad_out.dim(1);
    const double bh = box.height(), bw = box.width();
    for (std::size_t oy = 0; oy < oh; ++oy)
        for (std::size_t ox = 0; ox < ow; ++ox) {
            const double sy = box.y1 + (static_cast<double>(oy) + 0.5) * bh / static_cast<double>(oh) - 0.5;
            const double sx = box.x1 + (static_cast<double>(ox) + 0.5) * bw / static_cast<double>(ow) - 0.5;
            const auto t = detail::bilinear_tap(sy, sx, H, W);
            for (std::size_t c = 0; c < C; ++c) {
                const double g = grad_out.at3(oy, ox, c);
                grad_map.at3(t.y0, t.x0, c) += (1.0 - t.wy) * (1.0 - t.wx) * g;
                grad_map.at3(t.y0, t.x1, c) += (1.0 - t.wy) * t.wx * g;
                grad_map.at3(t.y1, t.x0, c) += t.wy * (1.0 - t.wx) * g;
                grad_map.at3(t.y1, t.x1, c) += t.wy * t.wx * g;
            }
        }
}

inline Tensor bilinear_resize(const Tensor& map, std::size_t oh, std::size_t ow) {
    return crop_resize(map, Box{0.0, 0.0, static_cast<double>(map.dim(1)),
                                static_cast<double>(map.dim(0))},
                       oh, ow);
}

// Counterclockwise quarter-turn rotations of an H x W x C map.
inline Tensor rot90(const Tensor& map, int quarter_turns) {
    const std::size_t H = map.dim(0), W = map.dim(1), C = map.dim(2);
    int k = ((quarter_turns % 4) + 4) % 4;
    if (k == 0) return map;
    Shape oshape = (k == 2) ? Shape{H, W, C} : Shape{W, H, C};
    Tensor out(oshape);
    for (std::size_t y = 0; y < H; ++y)
        for (std::size_t x = 0; x < W; ++x)
            for (std::size_t c = 0; c < C; ++c) {
                std::size_t ny, nx;
                if (k == 1) {  // (y,x) -> (W-1-x, y)
                    ny = W - 1 - x;
                    nx = y;
                } else if (k == 2) {
                    ny = H - 1 - y;
                    nx = W - 1 - x;
                } else {  // k == 3
                    ny = x;
                    nx = H - 1 - y;
                }
                out.at3(ny, nx, c) = map.at3(y, x, c);
            }
    return out;
}

}  // namespace ssanet
