#pragma once

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <functional>
#include <utility>
#include <vector>

#include "ssanet/errors.hpp"
#include "ssanet/tensor.hpp"

namespace ssanet {

// Handle into a Tape. A Var belongs to the tape that created it.
struct Var {
    std::size_t id = static_cast<std::size_t>(-1);
    bool valid() const { return id != static_cast<std::size_t>(-1); }
};

// Recording tape for reverse-mode differentiation. Single-threaded by
// contract; Tensors handed out are values and safe to share across threads.
class Tape {
public:
    using BackFn = std::function<void(Tape&)>;

    Var leaf(Tensor v) {
        Var out{nodes_.size()};
        nodes_.push_back(Node{std::move(v), Tensor{}, false, nullptr});
        return out;
    }

    // Record an op result. make_back receives the output Var and returns the
    // backward closure; the closure reads grad(out) and accumulates into the
    // grads of the op's inputs. Ops must raise on non-finite outputs, so the
    // value is checked here.
    template <class F>
    Var record(Tensor v, const char* opname, F&& make_back) {
        v.check_finite(opname);
        Var out{nodes_.size()};
        nodes_.push_back(Node{std::move(v), Tensor{}, false, nullptr});
        nodes_.back().back = make_back(out);
        return out;
    }

    const Tensor& value(Var v) const { return node(v).value; }

    // Lazily allocated, zero-initialized.
    Tensor& grad(Var v) {
        Node& n = node(v);
        if (!n.grad_alloc) {
            n.grad = Tensor(n.value.shape());
            n.grad_alloc = true;
        }
        return n.grad;
    }

    void accumulate(Var v, const Tensor& g) {
        Tensor& dst = grad(v);
        if (!dst.same_shape(g))
            throw DimensionError("gradient shape " + shape_str(g.shape()) +
                                 " does not match value shape " + shape_str(dst.shape()));
        for (std::size_t i = 0; i < dst.numel(); ++i) dst[i] += g[i];
    }

    // Reverse sweep from a scalar root. Visits each recorded op at most once,
    // in reverse recording order; ops whose output grad was never touched
    // cannot contribute and are skipped.
    void backward(Var root) {
        if (node(root).value.numel() != 1)
            throw ContractError("backward root must be scalar, got shape " +
                                shape_str(node(root).value.shape()));
        grad(root)[0] += 1.0;
        for (std::size_t i = root.id + 1; i-- > 0;) {
            if (nodes_[i].back && nodes_[i].grad_alloc) nodes_[i].back(*this);
        }
    }

    std::size_t size() const { return nodes_.size(); }

private:
    struct Node {
        Tensor value;
        Tensor grad;
        bool grad_alloc = false;
        BackFn back;
    };

    Node& node(Var v) {
        if (v.id >= nodes_.size()) throw IndexError("Var id out of range for this tape");
        return nodes_[v.id];
    }
    const Node& node(Var v) const {
        if (v.id >= nodes_.size()) throw IndexError("Var id out of range for this tape");
        return nodes_[v.id];
    }

    std::vector<Node> nodes_;
};

namespace ops {

inline Var add(Tape& t, Var a, Var b) {
    const Tensor& x = t.value(a);
    const Tensor& y = t.value(b);
    if (!x.same_shape(y))
        throw DimensionError("add: " + shape_str(x.shape()) + " vs " + shape_str(y.shape()));
    Tensor out(x.shape());
    for (std::size_t i = 0; i < out.numel(); ++i) out[i] = x[i] + y[i];
    return t.record(std::move(out), "add", [a, b](Var o) {
        return [a, b, o](Tape& tp) {
            tp.accumulate(a, tp.grad(o));
            tp.accumulate(b, tp.grad(o));
        };
    });
}

inline Var mul(Tape& t, Var a, Var b) {
    const Tensor& x = t.value(a);
    const Tensor& y = t.value(b);
    if (!x.same_shape(y))
        throw DimensionError("mul: " + shape_str(x.shape()) + " vs " + shape_str(y.shape()));
    Tensor out(x.shape());
    for (std::size_t i = 0; i < out.numel(); ++i) out[i] = x[i] * y[i];
    return t.record(std::move(out), "mul", [a, b](Var o) {
        return [a, b, o](Tape& tp) {
            const Tensor& g = tp.grad(o);
            const Tensor& x = tp.value(a);
            const Tensor& y = tp.value(b);
            Tensor da(x.shape()), db(y.shape());
            for (std::size_t i = 0; i < g.numel(); ++i) {
                da[i] = g[i] * y[i];
                db[i] = g[i] * x[i];
            }
            tp.accumulate(a, da);
            tp.accumulate(b, db);
        };
    });
}

// Scalar-tensor product (the one broadcast the engine allows).
inline Var scale(Tape& t, Var a, double c) {
    const Tensor& x = t.value(a);
    Tensor out(x.shape());
    for (std::size_t i = 0; i < out.numel(); ++i) out[i] = x[i] * c;
    return t.record(std::move(out), "scale", [a, c](Var o) {
        return [a, c, o](Tape& tp) {
            const Tensor& g = tp.grad(o);
            Tensor da(g.shape());
            for (std::size_t i = 0; i < g.numel(); ++i) da[i] = g[i] * c;
            tp.accumulate(a, da);
        };
    });
}

inline Var relu(Tape& t, Var a) {
    const Tensor& x = t.value(a);
    Tensor out(x.shape());
    for (std::size_t i = 0; i < out.numel(); ++i) out[i] = x[i] > 0.0 ? x[i] : 0.0;
    return t.record(std::move(out), "relu", [a](Var o) {
        return [a, o](Tape& tp) {
            const Tensor& g = tp.grad(o);
            const Tensor& x = tp.value(a);
            Tensor da(x.shape());
            for (std::size_t i = 0; i < g.numel(); ++i) da[i] = x[i] > 0.0 ? g[i] : 0.0;
            tp.accumulate(a, da);
        };
    });
}

inline Var exp(Tape& t, Var a) {
    const Tensor& x = t.value(a);
    Tensor out(x.shape());
    for (std::size_t i = 0; i < out.numel(); ++i) out[i] = std::exp(x[i]);
    return t.record(std::move(out), "exp", [a](Var o) {
        return [a, o](Tape& tp) {
            const Tensor& g = tp.grad(o);
            const Tensor& y = tp.value(o);
            Tensor da(g.shape());
            for (std::size_t i = 0; i < g.numel(); ++i) da[i] = g[i] * y[i];
            tp.accumulate(a, da);
        };
    });
}

inline Var log(Tape& t, Var a) {
    const Tensor& x = t.value(a);
    Tensor out(x.shape());
    for (std::size_t i = 0; i < out.numel(); ++i) out[i] = std::log(x[i]);
    return t.record(std::move(out), "log", [a](Var o) {
        return [a, o](Tape& tp) {
            const Tensor& g = tp.grad(o);
            const Tensor& x = tp.value(a);
            Tensor da(g.shape());
            for (std::size_t i = 0; i < g.numel(); ++i) da[i] = g[i] / x[i];
            tp.accumulate(a, da);
        };
    });
}

inline Var add_const(Tape& t, Var a, double c) {
    const Tensor& x = t.value(a);
    Tensor out(x.shape());
    for (std::size_t i = 0; i < out.numel(); ++i) out[i] = x[i] + c;
    return t.record(std::move(out), "add_const", [a](Var o) {
        return [a, o](Tape& tp) { tp.accumulate(a, tp.grad(o)); };
    });
}

// out = a + broadcast(s), s a scalar Var.
inline Var add_bscalar(Tape& t, Var a, Var s) {
    const Tensor& x = t.value(a);
    const Tensor& sv = t.value(s);
    if (sv.numel() != 1) throw DimensionError("add_bscalar: s must be scalar");
    Tensor out(x.shape());
    for (std::size_t i = 0; i < out.numel(); ++i) out[i] = x[i] + sv[0];
    return t.record(std::move(out), "add_bscalar", [a, s](Var o) {
        return [a, s, o](Tape& tp) {
            const Tensor& g = tp.grad(o);
            tp.accumulate(a, g);
            Tensor gs(tp.value(s).shape());
            for (std::size_t i = 0; i < g.numel(); ++i) gs[0] += g[i];
            tp.accumulate(s, gs);
        };
    });
}

inline Var transpose(Tape& t, Var a) {
    const Tensor& x = t.value(a);
    if (x.rank() != 2) throw DimensionError("transpose: expected rank-2 tensor");
    const std::size_t m = x.dim(0), n = x.dim(1);
    Tensor out({n, m});
    for (std::size_t i = 0; i < m; ++i)
        for (std::size_t j = 0; j < n; ++j) out.at2(j, i) = x.at2(i, j);
    return t.record(std::move(out), "transpose", [a, m, n](Var o) {
        return [a, m, n, o](Tape& tp) {
            const Tensor& g = tp.grad(o);
            Tensor da({m, n});
            for (std::size_t i = 0; i < m; ++i)
                for (std::size_t j = 0; j < n; ++j) da.at2(i, j) = g.at2(j, i);
            tp.accumulate(a, da);
        };
    });
}

inline Var matmul(Tape& t, Var a, Var b) {
    const Tensor& x = t.value(a);
    const Tensor& y = t.value(b);
    if (x.rank() != 2 || y.rank() != 2 || x.dim(1) != y.dim(0))
        throw DimensionError("matmul: " + shape_str(x.shape()) + " vs " + shape_str(y.shape()));
    const std::size_t m = x.dim(0), k = x.dim(1), n = y.dim(1);
    Tensor out({m, n});
    for (std::size_t i = 0; i < m; ++i)
        for (std::size_t p = 0; p < k; ++p) {
            const double xv = x.at2(i, p);
            for (std::size_t j = 0; j < n; ++j) out.at2(i, j) += xv * y.at2(p, j);
        }
    return t.record(std::move(out), "matmul", [a, b](Var o) {
        return [a, b, o](Tape& tp) {
            const Tensor& g = tp.grad(o);
            const Tensor& x = tp.value(a);
            const Tensor& y = tp.value(b);
            const std::size_t m = x.dim(0), k = x.dim(1), n = y.dim(1);
            Tensor da(x.shape()), db(y.shape());
            // dA = dY * B^T, dB = A^T * dY
            for (std::size_t i = 0; i < m; ++i)
                for (std::size_t j = 0; j < n; ++j) {
                    const double gv = g.at2(i, j);
                    for (std::size_t p = 0; p < k; ++p) {
                        da.at2(i, p) += gv * y.at2(p, j);
                        db.at2(p, j) += x.at2(i, p) * gv;
                    }
                }
            tp.accumulate(a, da);
            tp.accumulate(b, db);
        };
    });
}

// 2-D convolution in the cross-correlation convention over H x W x Cin maps
// with a kh x kw x Cin x Cout kernel.
inline Var conv2d(Tape& t, Var x_v, Var k_v, std::size_t stride, std::size_t pad) {
    const Tensor& x = t.value(x_v);
    const Tensor& k = t.value(k_v);
    if (x.rank() != 3 || k.rank() != 4 || x.dim(2) != k.dim(2))
        throw DimensionError("conv2d: input " + shape_str(x.shape()) + " kernel " +
                             shape_str(k.shape()));
    const std::size_t H = x.dim(0), W = x.dim(1), Cin = x.dim(2);
    const std::size_t kh = k.dim(0), kw = k.dim(1), Cout = k.dim(3);
    if (kh > H + 2 * pad || kw > W + 2 * pad)
        throw DimensionError("conv2d: kernel larger than padded input");
    const std::size_t Ho = (H + 2 * pad - kh) / stride + 1;
    const std::size_t Wo = (W + 2 * pad - kw) / stride + 1;
    if (Ho == 0 || Wo == 0) throw DimensionError("conv2d: zero-sized output");

    Tensor out({Ho, Wo, Cout});
    for (std::size_t oy = 0; oy < Ho; ++oy)
        for (std::size_t ox = 0; ox < Wo; ++ox)
            for (std::size_t ky = 0; ky < kh; ++ky) {
                const std::ptrdiff_t iy =
                    static_cast<std::ptrdiff_t>(oy * stride + ky) - static_cast<std::ptrdiff_t>(pad);
                if (iy < 0 || iy >= static_cast<std::ptrdiff_t>(H)) continue;
                for (std::size_t kx = 0; kx < kw; ++kx) {
                    const std::ptrdiff_t ix = static_cast<std::ptrdiff_t>(ox * stride + kx) -
                                              static_cast<std::ptrdiff_t>(pad);
                    if (ix < 0 || ix >= static_cast<std::ptrdiff_t>(W)) continue;
                    for (std::size_t ci = 0; ci < Cin; ++ci) {
                        const double xv = x.at3(static_cast<std::size_t>(iy),
                                                static_cast<std::size_t>(ix), ci);
                        const double* krow = k.data() + ((ky * kw + kx) * Cin + ci) * Cout;
                        double* orow = out.data() + (oy * Wo + ox) * Cout;
                        for (std::size_t co = 0; co < Cout; ++co) orow[co] += xv * krow[co];
                    }
                }
            }

    return t.record(std::move(out), "conv2d", [x_v, k_v, stride, pad](Var o) {
        return [x_v, k_v, stride, pad, o](Tape& tp) {
            const Tensor& g = tp.grad(o);
            const Tensor& x = tp.value(x_v);
            const Tensor& k = tp.value(k_v);
            const std::size_t H = x.dim(0), W = x.dim(1), Cin = x.dim(2);
            const std::size_t kh = k.dim(0), kw = k.dim(1), Cout = k.dim(3);
            const std::size_t Ho = g.dim(0), Wo = g.dim(1);
            Tensor dx(x.shape()), dk(k.shape());
            for (std::size_t oy = 0; oy < Ho; ++oy)
                for (std::size_t ox = 0; ox < Wo; ++ox)
                    for (std::size_t ky = 0; ky < kh; ++ky) {
                        const std::ptrdiff_t iy = static_cast<std::ptrdiff_t>(oy * stride + ky) -
                                                  static_cast<std::ptrdiff_t>(pad);
                        if (iy < 0 || iy >= static_cast<std::ptrdiff_t>(H)) continue;
                        for (std::size_t kx = 0; kx < kw; ++kx) {
                            const std::ptrdiff_t ix =
                                static_cast<std::ptrdiff_t>(ox * stride + kx) -
                                static_cast<std::ptrdiff_t>(pad);
                            if (ix < 0 || ix >= static_cast<std::ptrdiff_t>(W)) continue;
                            for (std::size_t ci = 0; ci < Cin; ++ci) {
                                const std::size_t xi =
                                    (static_cast<std::size_t>(iy) * W +
                                     static_cast<std::size_t>(ix)) *
                                        Cin +
                                    ci;
                                const double* krow = k.data() + ((ky * kw + kx) * Cin + ci) * Cout;
                                double* dkrow = dk.data() + ((ky * kw + kx) * Cin + ci) * Cout;
                                const double* grow = g.data() + (oy * Wo + ox) * Cout;
                                double acc = 0.0;
                                for (std::size_t co = 0; co < Cout; ++co) {
                                    acc += grow[co] * krow[co];
                                    dkrow[co] += grow[co] * x[xi];
                                }
                                dx[xi] += acc;
                            }
                        }
                    }
            tp.accumulate(x_v, dx);
            tp.accumulate(k_v, dk);
        };
    });
}

inline Var reshape(Tape& t, Var a, Shape new_shape) {
    const Tensor& x = t.value(a);
    if (shape_numel(new_shape) != x.numel())
        throw DimensionError("reshape: " + shape_str(x.shape()) + " -> " + shape_str(new_shape));
    Tensor out(new_shape, x.vec());
    return t.record(std::move(out), "reshape", [a](Var o) {
        return [a, o](Tape& tp) {
            const Tensor& g = tp.grad(o);
            Tensor da(tp.value(a).shape(), g.vec());
            tp.accumulate(a, da);
        };
    });
}

// N-d slice: per-dimension offset + extent.
inline Var slice(Tape& t, Var a, std::vector<std::size_t> offset, Shape extent) {
    const Tensor& x = t.value(a);
    if (offset.size() != x.rank() || extent.size() != x.rank())
        throw DimensionError("slice: rank mismatch");
    for (std::size_t d = 0; d < x.rank(); ++d)
        if (offset[d] + extent[d] > x.dim(d))
            throw DimensionError("slice: out of bounds in dim " + std::to_string(d));

    // flat strides of the source
    std::vector<std::size_t> stridev(x.rank(), 1);
    for (std::size_t d = x.rank() - 1; d-- > 0;) stridev[d] = stridev[d + 1] * x.dim(d + 1);

    const std::size_t n = shape_numel(extent);
    auto src_index = [&](std::size_t flat) {
        std::size_t idx = 0;
        for (std::size_t d = x.rank(); d-- > 0;) {
            const std::size_t coord = flat % extent[d];
            flat /= extent[d];
            idx += (offset[d] + coord) * stridev[d];
        }
        return idx;
    };

    Tensor out(extent);
    for (std::size_t i = 0; i < n; ++i) out[i] = x[src_index(i)];
    return t.record(std::move(out), "slice", [a, offset, extent, stridev](Var o) {
        return [a, offset, extent, stridev, o](Tape& tp) {
            const Tensor& g = tp.grad(o);
            const Tensor& x = tp.value(a);
            Tensor da(x.shape());
            const std::size_t rank = x.rank();
            for (std::size_t i = 0; i < g.numel(); ++i) {
                std::size_t flat = i, idx = 0;
                for (std::size_t d = rank; d-- > 0;) {
                    const std::size_t coord = flat % extent[d];
                    flat /= extent[d];
                    idx += (offset[d] + coord) * stridev[d];
                }
                da[idx] += g[i];
            }
            tp.accumulate(a, da);
        };
    });
}

inline Var sum(Tape& t, Var a) {
    const Tensor& x = t.value(a);
    double s = 0.0;
    for (std::size_t i = 0; i < x.numel(); ++i) s += x[i];
    return t.record(Tensor::scalar(s), "sum", [a](Var o) {
        return [a, o](Tape& tp) {
            const double g = tp.grad(o)[0];
            Tensor da(tp.value(a).shape(), g);
            tp.accumulate(a, da);
        };
    });
}

// Global max with argmax recording; ties pick the lowest flat index and the
// backward routes only there.
inline Var reduce_max(Tape& t, Var a) {
    const Tensor& x = t.value(a);
    if (x.numel() == 0) throw DimensionError("reduce_max: empty tensor");
    std::size_t arg = 0;
    for (std::size_t i = 1; i < x.numel(); ++i)
        if (x[i] > x[arg]) arg = i;
    return t.record(Tensor::scalar(x[arg]), "reduce_max", [a, arg](Var o) {
        return [a, arg, o](Tape& tp) {
            Tensor da(tp.value(a).shape());
            da[arg] = tp.grad(o)[0];
            tp.accumulate(a, da);
        };
    });
}

// L2-normalize along one axis; treats the tensor as [outer, n, inner].
inline Var l2_normalize(Tape& t, Var a, std::size_t axis, double eps = 1e-12) {
    const Tensor& x = t.value(a);
    if (axis >= x.rank()) throw DimensionError("l2_normalize: axis out of range");
    std::size_t outer = 1, inner = 1;
    const std::size_t n = x.dim(axis);
    for (std::size_t d = 0; d < axis; ++d) outer *= x.dim(d);
    for (std::size_t d = axis + 1; d < x.rank(); ++d) inner *= x.dim(d);

    Tensor out(x.shape());
    std::vector<double> norms(outer * inner);
    for (std::size_t u = 0; u < outer; ++u)
        for (std::size_t v = 0; v < inner; ++v) {
            double s = 0.0;
            for (std::size_t i = 0; i < n; ++i) {
                const double val = x[(u * n + i) * inner + v];
                s += val * val;
            }
            const double norm = std::sqrt(s) + eps;
            norms[u * inner + v] = norm;
            for (std::size_t i = 0; i < n; ++i)
                out[(u * n + i) * inner + v] = x[(u * n + i) * inner + v] / norm;
        }
    return t.record(std::move(out), "l2_normalize", [a, axis, n, outer, inner, norms](Var o) {
        return [a, n, outer, inner, norms, o](Tape& tp) {
            const Tensor& g = tp.grad(o);
            const Tensor& y = tp.value(o);
            Tensor da(tp.value(a).shape());
            // dx = (g - y * <g, y>) / ||x||
            for (std::size_t u = 0; u < outer; ++u)
                for (std::size_t v = 0; v < inner; ++v) {
                    double dot = 0.0;
                    for (std::size_t i = 0; i < n; ++i) {
                        const std::size_t idx = (u * n + i) * inner + v;
                        dot += g[idx] * y[idx];
                    }
                    const double norm = norms[u * inner + v];
                    for (std::size_t i = 0; i < n; ++i) {
                        const std::size_t idx = (u * n + i) * inner + v;
                        da[idx] = (g[idx] - y[idx] * dot) / norm;
                    }
                }
            tp.accumulate(a, da);
        };
    });
}

// Mean over the batch of -log softmax(logits)[label], max-shifted.
inline Var softmax_cross_entropy(Tape& t, Var logits_v, const std::vector<std::size_t>& labels) {
    const Tensor& x = t.value(logits_v);
    if (x.rank() != 2) throw DimensionError("softmax_cross_entropy: logits must be B x C");
    const std::size_t B = x.dim(0), C = x.dim(1);
    if (labels.size() != B) throw DimensionError("softmax_cross_entropy: label count mismatch");
    for (std::size_t b = 0; b < B; ++b)
        if (labels[b] >= C)
            throw IndexError("softmax_cross_entropy: label " + std::to_string(labels[b]) +
                             " out of range for " + std::to_string(C) + " classes");

    Tensor probs({B, C});
    double loss = 0.0;
    for (std::size_t b = 0; b < B; ++b) {
        double mx = x.at2(b, 0);
        for (std::size_t c = 1; c < C; ++c) mx = std::max(mx, x.at2(b, c));
        double z = 0.0;
        for (std::size_t c = 0; c < C; ++c) z += std::exp(x.at2(b, c) - mx);
        for (std::size_t c = 0; c < C; ++c) probs.at2(b, c) = std::exp(x.at2(b, c) - mx) / z;
        loss += -(x.at2(b, labels[b]) - mx - std::log(z));
    }
    loss /= static_cast<double>(B);
    return t.record(Tensor::scalar(loss), "softmax_cross_entropy",
                    [logits_v, labels, probs](Var o) {
                        return [logits_v, labels, probs, o](Tape& tp) {
                            const double g = tp.grad(o)[0];
                            const std::size_t B = probs.dim(0), C = probs.dim(1);
                            Tensor da({B, C});
                            for (std::size_t b = 0; b < B; ++b)
                                for (std::size_t c = 0; c < C; ++c) {
                                    double v = probs.at2(b, c);
                                    if (c == labels[b]) v -= 1.0;
                                    da.at2(b, c) = g * v / static_cast<double>(B);
                                }
                            tp.accumulate(logits_v, da);
                        };
                    });
}

}  // namespace ops

// Heavy-ball SGD step: v = momentum*v - lr*(g + wd*p); p += v.
inline void sgd_momentum_update(Tensor& param, Tensor& velocity, const Tensor& grad, double lr,
                                double momentum, double weight_decay) {
    if (!param.same_shape(grad) || !param.same_shape(velocity))
        throw DimensionError("sgd_momentum_update: shape mismatch");
    for (std::size_t i = 0; i < param.numel(); ++i) {
        velocity[i] = momentum * velocity[i] - lr * (grad[i] + weight_decay * param[i]);
        param[i] += velocity[i];
    }
    param.check_finite("sgd_momentum_update");
}

}  // namespace ssanet
