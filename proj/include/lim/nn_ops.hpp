// Neural kernels: 1x1/3x3 convolution, batch normalization, ReLU, 2^m
// nearest-neighbor up-sampling, 2^m max-pool down-sampling, and the
// composite block BN -> ReLU -> Conv. Each op has a pure forward kernel,
// an explicit backward kernel, and a tape wrapper.
#pragma once

#include <cmath>
#include <cstdint>
#include <memory>
#include <optional>
#include <vector>

#include "lim/graph.hpp"
#include "lim/init.hpp"
#include "lim/tensor.hpp"

namespace lim {

// ---------------------------------------------------------------------------
// Convolution
// ---------------------------------------------------------------------------

template <typename S>
struct ConvWeights {
    Tensor4<S> kernel;  // (out_channels, in_channels, k, k)
    Tensor4<S> bias;    // (1, out_channels, 1, 1)

    int out_channels() const { return kernel.n; }
    int in_channels() const { return kernel.c; }
    int k() const { return kernel.h; }
};

template <typename S>
ConvWeights<S> make_conv_weights(int out_c, int in_c, int k, std::uint64_t seed,
                                 InitScheme scheme = InitScheme::UniformFanIn) {
    detail::require(k == 1 || k == 3, "conv weights: k must be 1 or 3");
    ConvWeights<S> w;
    w.kernel = seeded_init<S>(out_c, in_c, k, k, seed, scheme);
    w.bias = Tensor4<S>::zeros(1, out_c, 1, 1);
    return w;
}

// 1x1 channel-identity weights, zero bias (handy in tests and ablations).
template <typename S>
ConvWeights<S> identity_conv1x1(int channels) {
    ConvWeights<S> w;
    w.kernel = Tensor4<S>::zeros(channels, channels, 1, 1);
    for (int i = 0; i < channels; ++i) w.kernel.at(i, i, 0, 0) = S(1);
    w.bias = Tensor4<S>::zeros(1, channels, 1, 1);
    return w;
}

namespace detail {

template <typename S>
void check_conv_args(const Tensor4<S>& x, const Tensor4<S>& kern, const Tensor4<S>& bias) {
    require(kern.h == kern.w && (kern.h == 1 || kern.h == 3),
            "conv2d: kernel must be 1x1 or 3x3, got " + kern.shape_str());
    if (x.c != kern.c) {
        throw std::invalid_argument("conv2d: input channels " + x.shape_str() +
                                    " do not match kernel " + kern.shape_str());
    }
    require(bias.n == 1 && bias.c == kern.n && bias.h == 1 && bias.w == 1,
            "conv2d: bias must be (1,out,1,1), got " + bias.shape_str());
}

}  // namespace detail

// Stride-1 cross-correlation with zero padding floor(k/2); spatial extents
// are preserved.
template <typename S>
Tensor4<S> conv2d_forward(const Tensor4<S>& x, const Tensor4<S>& kern, const Tensor4<S>& bias) {
    detail::check_conv_args(x, kern, bias);
    const int k = kern.h, p = k / 2, h = x.h, w = x.w;
    Tensor4<S> out(x.n, kern.n, h, w);
    for (int b = 0; b < x.n; ++b) {
        for (int oc = 0; oc < kern.n; ++oc) {
            S* oplane = out.plane(b, oc);
            const S bv = bias.at(0, oc, 0, 0);
            std::fill(oplane, oplane + h * w, bv);
            for (int ic = 0; ic < x.c; ++ic) {
                for (int ky = 0; ky < k; ++ky) {
                    const int dy = ky - p;
                    const int ylo = std::max(0, -dy), yhi = std::min(h, h - dy);
                    for (int kx = 0; kx < k; ++kx) {
                        const int dx = kx - p;
                        const int xlo = std::max(0, -dx), xhi = std::min(w, w - dx);
                        const S wv = kern.at(oc, ic, ky, kx);
                        if (wv == S(0)) continue;
                        for (int y = ylo; y < yhi; ++y) {
                            const S* xr = x.row(b, ic, y + dy) + dx;
                            S* orow = out.row(b, oc, y);
                            for (int xx = xlo; xx < xhi; ++xx) orow[xx] += wv * xr[xx];
                        }
                    }
                }
            }
        }
    }
    return out;
}

template <typename S>
Tensor4<S> conv2d(const Tensor4<S>& x, const ConvWeights<S>& w) {
    return conv2d_forward(x, w.kernel, w.bias);
}

// Gradients for input, kernel and bias; null outputs are skipped.
template <typename S>
void conv2d_backward(const Tensor4<S>& x, const Tensor4<S>& kern, const Tensor4<S>& up,
                     Tensor4<S>* dx, Tensor4<S>* dkern, Tensor4<S>* dbias) {
    const int k = kern.h, p = k / 2, h = x.h, w = x.w;
    if (dx) {
        *dx = Tensor4<S>::zeros(x.n, x.c, x.h, x.w);
        for (int b = 0; b < x.n; ++b) {
            for (int ic = 0; ic < x.c; ++ic) {
                for (int oc = 0; oc < kern.n; ++oc) {
                    for (int ky = 0; ky < k; ++ky) {
                        const int dy = ky - p;
                        const int ylo = std::max(0, -dy), yhi = std::min(h, h - dy);
                        for (int kx = 0; kx < k; ++kx) {
                            const int dxo = kx - p;
                            const int xlo = std::max(0, -dxo), xhi = std::min(w, w - dxo);
                            const S wv = kern.at(oc, ic, ky, kx);
                            if (wv == S(0)) continue;
                            for (int y = ylo; y < yhi; ++y) {
                                const S* ur = up.row(b, oc, y);
                                S* xr = dx->row(b, ic, y + dy) + dxo;
                                for (int xx = xlo; xx < xhi; ++xx) xr[xx] += wv * ur[xx];
                            }
                        }
                    }
                }
            }
        }
    }
    if (dkern) {
        *dkern = Tensor4<S>::zeros(kern.n, kern.c, kern.h, kern.w);
        for (int oc = 0; oc < kern.n; ++oc) {
            for (int ic = 0; ic < x.c; ++ic) {
                for (int ky = 0; ky < k; ++ky) {
                    const int dy = ky - p;
                    const int ylo = std::max(0, -dy), yhi = std::min(h, h - dy);
                    for (int kx = 0; kx < k; ++kx) {
                        const int dxo = kx - p;
                        const int xlo = std::max(0, -dxo), xhi = std::min(w, w - dxo);
                        S acc = S(0);
                        for (int b = 0; b < x.n; ++b) {
                            for (int y = ylo; y < yhi; ++y) {
                                const S* ur = up.row(b, oc, y);
                                const S* xr = x.row(b, ic, y + dy) + dxo;
                                for (int xx = xlo; xx < xhi; ++xx) acc += ur[xx] * xr[xx];
                            }
                        }
                        dkern->at(oc, ic, ky, kx) = acc;
                    }
                }
            }
        }
    }
    if (dbias) {
        *dbias = Tensor4<S>::zeros(1, kern.n, 1, 1);
        for (int b = 0; b < up.n; ++b) {
            for (int oc = 0; oc < up.c; ++oc) {
                const S* uplane = up.plane(b, oc);
                S acc = S(0);
                for (int i = 0; i < up.h * up.w; ++i) acc += uplane[i];
                dbias->at(0, oc, 0, 0) += acc;
            }
        }
    }
}

template <typename S>
int g_conv2d(Graph<S>& g, int x, int kern, int bias) {
    Tensor4<S> out = conv2d_forward(g.value(x), g.value(kern), g.value(bias));
    return detail::push_op(g, std::move(out), "conv2d", {x, kern, bias}, [&](int self) {
        return [self, x, kern, bias](Graph<S>& gr) {
            const auto& up = gr.grad(self);
            Tensor4<S> dx, dk, db;
            conv2d_backward(gr.value(x), gr.value(kern), up,
                            gr.needs_grad(x) ? &dx : nullptr,
                            gr.needs_grad(kern) ? &dk : nullptr,
                            gr.needs_grad(bias) ? &db : nullptr);
            if (gr.needs_grad(x)) gr.accumulate_grad(x, dx);
            if (gr.needs_grad(kern)) gr.accumulate_grad(kern, dk);
            if (gr.needs_grad(bias)) gr.accumulate_grad(bias, db);
        };
    });
}

// ---------------------------------------------------------------------------
// Batch normalization
// ---------------------------------------------------------------------------

enum class BnMode { Train, Eval };

template <typename S>
struct BatchNormState {
    int channels = 0;
    std::vector<S> gamma, beta;
    std::vector<S> running_mean, running_var;
    S momentum = S(0.1);
    S epsilon = S(1e-5);
    BnMode mode = BnMode::Train;
    bool stats_initialized = false;
};

template <typename S>
BatchNormState<S> make_batch_norm(int channels) {
    BatchNormState<S> s;
    s.channels = channels;
    s.gamma.assign(channels, S(1));
    s.beta.assign(channels, S(0));
    s.running_mean.assign(channels, S(0));
    s.running_var.assign(channels, S(1));
    return s;
}

template <typename S>
struct BatchNormCache {
    std::vector<S> invstd;  // per channel
    Tensor4<S> xhat;
};

// Train mode normalizes by per-channel batch statistics (biased variance over
// n*h*w) and updates running stats with momentum; eval mode uses the stored
// running stats. gamma/beta are passed explicitly so the tape wrapper can
// source them from leaves; the two-argument overload below reads them from
// the state.
template <typename S>
Tensor4<S> batch_norm_forward(const Tensor4<S>& x, BatchNormState<S>& s, const S* gamma,
                              const S* beta, BatchNormCache<S>* cache) {
    detail::require(x.c == s.channels, "batch_norm: channel count mismatch");
    const long m = static_cast<long>(x.n) * x.h * x.w;
    Tensor4<S> out(x.n, x.c, x.h, x.w);
    if (cache) {
        cache->invstd.assign(x.c, S(0));
        cache->xhat = Tensor4<S>(x.n, x.c, x.h, x.w);
    }
    if (s.mode == BnMode::Train) {
        detail::require(m >= 2, "batch_norm: train mode needs n*h*w >= 2 per channel");
        for (int ch = 0; ch < x.c; ++ch) {
            S mean = S(0);
            for (int b = 0; b < x.n; ++b) {
                const S* pl = x.plane(b, ch);
                for (long i = 0; i < static_cast<long>(x.h) * x.w; ++i) mean += pl[i];
            }
            mean /= static_cast<S>(m);
            S var = S(0);
            for (int b = 0; b < x.n; ++b) {
                const S* pl = x.plane(b, ch);
                for (long i = 0; i < static_cast<long>(x.h) * x.w; ++i) {
                    const S d = pl[i] - mean;
                    var += d * d;
                }
            }
            var /= static_cast<S>(m);
            const S invstd = S(1) / std::sqrt(var + s.epsilon);
            for (int b = 0; b < x.n; ++b) {
                const S* pl = x.plane(b, ch);
                S* op = out.plane(b, ch);
                S* xh = cache ? cache->xhat.plane(b, ch) : nullptr;
                for (long i = 0; i < static_cast<long>(x.h) * x.w; ++i) {
                    const S nv = (pl[i] - mean) * invstd;
                    if (xh) xh[i] = nv;
                    op[i] = gamma[ch] * nv + beta[ch];
                }
            }
            if (cache) cache->invstd[ch] = invstd;
            s.running_mean[ch] = (S(1) - s.momentum) * s.running_mean[ch] + s.momentum * mean;
            s.running_var[ch] = (S(1) - s.momentum) * s.running_var[ch] + s.momentum * var;
        }
        s.stats_initialized = true;
    } else {
        if (!s.stats_initialized) {
            throw std::logic_error("batch_norm: eval mode before running stats were initialized");
        }
        for (int ch = 0; ch < x.c; ++ch) {
            const S invstd = S(1) / std::sqrt(s.running_var[ch] + s.epsilon);
            const S mean = s.running_mean[ch];
            for (int b = 0; b < x.n; ++b) {
                const S* pl = x.plane(b, ch);
                S* op = out.plane(b, ch);
                S* xh = cache ? cache->xhat.plane(b, ch) : nullptr;
                for (long i = 0; i < static_cast<long>(x.h) * x.w; ++i) {
                    const S nv = (pl[i] - mean) * invstd;
                    if (xh) xh[i] = nv;
                    op[i] = gamma[ch] * nv + beta[ch];
                }
            }
            if (cache) cache->invstd[ch] = invstd;
        }
    }
    return out;
}

template <typename S>
Tensor4<S> batch_norm(const Tensor4<S>& x, BatchNormState<S>& s) {
    return batch_norm_forward<S>(x, s, s.gamma.data(), s.beta.data(), nullptr);
}

// Train-mode backward. With xhat cached:
//   dbeta  = sum(up), dgamma = sum(up * xhat)
//   dx     = gamma * invstd * (up - mean(up) - xhat * mean(up * xhat))
// Eval mode has no batch-statistic coupling, so dx = up * gamma * invstd.
template <typename S>
void batch_norm_backward(const BatchNormCache<S>& cache, const S* gamma, BnMode mode,
                         const Tensor4<S>& up, Tensor4<S>* dx, S* dgamma, S* dbeta) {
    const auto& xhat = cache.xhat;
    const long m = static_cast<long>(xhat.n) * xhat.h * xhat.w;
    if (dx) *dx = Tensor4<S>(xhat.n, xhat.c, xhat.h, xhat.w);
    for (int ch = 0; ch < xhat.c; ++ch) {
        S sum_up = S(0), sum_up_xhat = S(0);
        for (int b = 0; b < xhat.n; ++b) {
            const S* u = up.plane(b, ch);
            const S* xh = xhat.plane(b, ch);
            for (long i = 0; i < static_cast<long>(xhat.h) * xhat.w; ++i) {
                sum_up += u[i];
                sum_up_xhat += u[i] * xh[i];
            }
        }
        if (dgamma) dgamma[ch] += sum_up_xhat;
        if (dbeta) dbeta[ch] += sum_up;
        if (dx) {
            const S scale = gamma[ch] * cache.invstd[ch];
            if (mode == BnMode::Train) {
                const S mu = sum_up / static_cast<S>(m);
                const S mx = sum_up_xhat / static_cast<S>(m);
                for (int b = 0; b < xhat.n; ++b) {
                    const S* u = up.plane(b, ch);
                    const S* xh = xhat.plane(b, ch);
                    S* d = dx->plane(b, ch);
                    for (long i = 0; i < static_cast<long>(xhat.h) * xhat.w; ++i) {
                        d[i] = scale * (u[i] - mu - xh[i] * mx);
                    }
                }
            } else {
                for (int b = 0; b < xhat.n; ++b) {
                    const S* u = up.plane(b, ch);
                    S* d = dx->plane(b, ch);
                    for (long i = 0; i < static_cast<long>(xhat.h) * xhat.w; ++i) {
                        d[i] = scale * u[i];
                    }
                }
            }
        }
    }
}

// gamma/beta enter the tape as (1,c,1,1) leaves; `s` supplies running stats,
// mode and constants, and receives the running-stat update in train mode.
template <typename S>
int g_batch_norm(Graph<S>& g, int x, int gamma, int beta, BatchNormState<S>& s) {
    const auto& gv = g.value(gamma);
    const auto& bv = g.value(beta);
    detail::require(gv.c == s.channels && bv.c == s.channels &&
                        gv.size() == static_cast<std::size_t>(s.channels) &&
                        bv.size() == static_cast<std::size_t>(s.channels),
                    "g_batch_norm: gamma/beta must be (1,c,1,1)");
    auto cache = std::make_shared<BatchNormCache<S>>();
    const BnMode mode = s.mode;
    Tensor4<S> out = batch_norm_forward<S>(g.value(x), s, gv.data.data(), bv.data.data(),
                                           cache.get());
    return detail::push_op(g, std::move(out), "batch_norm", {x, gamma, beta}, [&](int self) {
        return [self, x, gamma, beta, mode, cache](Graph<S>& gr) {
            const auto& up = gr.grad(self);
            const auto& gvv = gr.value(gamma);
            Tensor4<S> dx;
            Tensor4<S> dgamma = Tensor4<S>::zeros(1, gvv.c, 1, 1);
            Tensor4<S> dbeta = Tensor4<S>::zeros(1, gvv.c, 1, 1);
            batch_norm_backward<S>(*cache, gvv.data.data(), mode, up,
                                   gr.needs_grad(x) ? &dx : nullptr, dgamma.data.data(),
                                   dbeta.data.data());
            if (gr.needs_grad(x)) gr.accumulate_grad(x, dx);
            gr.accumulate_grad(gamma, dgamma);
            gr.accumulate_grad(beta, dbeta);
        };
    });
}

// ---------------------------------------------------------------------------
// ReLU
// ---------------------------------------------------------------------------

template <typename S>
Tensor4<S> relu(const Tensor4<S>& x) {
    Tensor4<S> out(x.n, x.c, x.h, x.w);
    for (std::size_t i = 0; i < x.size(); ++i) out.data[i] = x.data[i] > S(0) ? x.data[i] : S(0);
    return out;
}

// Gradient at exactly 0 is defined as 0.
template <typename S>
Tensor4<S> relu_backward(const Tensor4<S>& x, const Tensor4<S>& up) {
    Tensor4<S> dx(x.n, x.c, x.h, x.w);
    for (std::size_t i = 0; i < x.size(); ++i) dx.data[i] = x.data[i] > S(0) ? up.data[i] : S(0);
    return dx;
}

template <typename S>
int g_relu(Graph<S>& g, int x) {
    Tensor4<S> out = relu(g.value(x));
    return detail::push_op(g, std::move(out), "relu", {x}, [&](int self) {
        return [self, x](Graph<S>& gr) {
            gr.accumulate_grad(x, relu_backward(gr.value(x), gr.grad(self)));
        };
    });
}

// ---------------------------------------------------------------------------
// 2^m resampling
// ---------------------------------------------------------------------------

// Each source pixel is replicated over its 2^m x 2^m block.
template <typename S>
Tensor4<S> upsample_nearest(const Tensor4<S>& x, int m) {
    detail::require(m >= 1, "upsample_nearest: m must be >= 1");
    const int f = 1 << m;
    Tensor4<S> out(x.n, x.c, x.h * f, x.w * f);
    for (int b = 0; b < x.n; ++b) {
        for (int ch = 0; ch < x.c; ++ch) {
            for (int y = 0; y < out.h; ++y) {
                const S* src = x.row(b, ch, y / f);
                S* dst = out.row(b, ch, y);
                for (int xx = 0; xx < out.w; ++xx) dst[xx] = src[xx / f];
            }
        }
    }
    return out;
}

// Sums the upstream gradient over each 2^m x 2^m block.
template <typename S>
Tensor4<S> upsample_nearest_backward(int src_h, int src_w, int m, const Tensor4<S>& up) {
    const int f = 1 << m;
    Tensor4<S> dx = Tensor4<S>::zeros(up.n, up.c, src_h, src_w);
    for (int b = 0; b < up.n; ++b) {
        for (int ch = 0; ch < up.c; ++ch) {
            for (int y = 0; y < up.h; ++y) {
                const S* u = up.row(b, ch, y);
                S* d = dx.row(b, ch, y / f);
                for (int xx = 0; xx < up.w; ++xx) d[xx / f] += u[xx];
            }
        }
    }
    return dx;
}

template <typename S>
int g_upsample_nearest(Graph<S>& g, int x, int m) {
    const auto& xv = g.value(x);
    const int sh = xv.h, sw = xv.w;
    Tensor4<S> out = upsample_nearest(xv, m);
    return detail::push_op(g, std::move(out), "upsample_nearest", {x}, [&](int self) {
        return [self, x, m, sh, sw](Graph<S>& gr) {
            gr.accumulate_grad(x, upsample_nearest_backward(sh, sw, m, gr.grad(self)));
        };
    });
}

// One 2x2 stride-2 max pool step; argmax stores the flat input index per
// output element, choosing the first (row-major) maximal element of each
// window so the backward route is deterministic.
template <typename S>
Tensor4<S> maxpool2_forward(const Tensor4<S>& x, std::vector<std::int64_t>* argmax) {
    detail::require(x.h % 2 == 0 && x.w % 2 == 0,
                    "downsample_max: spatial dims must be divisible by 2, got " + x.shape_str());
    Tensor4<S> out(x.n, x.c, x.h / 2, x.w / 2);
    if (argmax) argmax->assign(out.size(), 0);
    std::size_t oi = 0;
    for (int b = 0; b < x.n; ++b) {
        for (int ch = 0; ch < x.c; ++ch) {
            for (int y = 0; y < out.h; ++y) {
                const S* r0 = x.row(b, ch, 2 * y);
                const S* r1 = x.row(b, ch, 2 * y + 1);
                S* orow = out.row(b, ch, y);
                for (int xx = 0; xx < out.w; ++xx, ++oi) {
                    const int x0 = 2 * xx;
                    S best = r0[x0];
                    int which = 0;  // 0:(0,0) 1:(0,1) 2:(1,0) 3:(1,1)
                    if (r0[x0 + 1] > best) { best = r0[x0 + 1]; which = 1; }
                    if (r1[x0] > best) { best = r1[x0]; which = 2; }
                    if (r1[x0 + 1] > best) { best = r1[x0 + 1]; which = 3; }
                    orow[xx] = best;
                    if (argmax) {
                        const int sy = 2 * y + which / 2, sx = x0 + which % 2;
                        (*argmax)[oi] = static_cast<std::int64_t>(x.index(b, ch, sy, sx));
                    }
                }
            }
        }
    }
    return out;
}

template <typename S>
Tensor4<S> maxpool2_backward(int src_n, int src_c, int src_h, int src_w,
                             const std::vector<std::int64_t>& argmax, const Tensor4<S>& up) {
    Tensor4<S> dx = Tensor4<S>::zeros(src_n, src_c, src_h, src_w);
    for (std::size_t i = 0; i < up.size(); ++i) dx.data[argmax[i]] += up.data[i];
    return dx;
}

// m repeated 2x2 stride-2 max pool applications.
template <typename S>
Tensor4<S> downsample_max(const Tensor4<S>& x, int m) {
    detail::require(m >= 1, "downsample_max: m must be >= 1");
    Tensor4<S> cur = x;
    for (int step = 0; step < m; ++step) cur = maxpool2_forward(cur, nullptr);
    return cur;
}

template <typename S>
int g_downsample_max(Graph<S>& g, int x, int m) {
    detail::require(m >= 1, "downsample_max: m must be >= 1");
    int cur = x;
    for (int step = 0; step < m; ++step) {
        const auto& xv = g.value(cur);
        auto argmax = std::make_shared<std::vector<std::int64_t>>();
        Tensor4<S> out = maxpool2_forward(xv, argmax.get());
        const int sn = xv.n, sc = xv.c, sh = xv.h, sw = xv.w;
        const int parent = cur;
        cur = detail::push_op(g, std::move(out), "downsample_max", {parent}, [&](int self) {
            return [self, parent, sn, sc, sh, sw, argmax](Graph<S>& gr) {
                gr.accumulate_grad(parent,
                                   maxpool2_backward(sn, sc, sh, sw, *argmax, gr.grad(self)));
            };
        });
    }
    return cur;
}

// ---------------------------------------------------------------------------
// Composite block: BN -> ReLU -> 3x3 Conv
// ---------------------------------------------------------------------------

template <typename S>
Tensor4<S> conv_block(const Tensor4<S>& x, BatchNormState<S>& s, const ConvWeights<S>& w) {
    detail::require(w.k() == 3, "conv_block: conv must be 3x3");
    return conv2d(relu(batch_norm(x, s)), w);
}

template <typename S>
int g_conv_block(Graph<S>& g, int x, int gamma, int beta, BatchNormState<S>& s, int kern,
                 int bias) {
    detail::require(g.value(kern).h == 3, "conv_block: conv must be 3x3");
    return g_conv2d(g, g_relu(g, g_batch_norm(g, x, gamma, beta, s)), kern, bias);
}

}  // namespace lim
