#pragma once

// Differentiable layer operations. Each op validates shapes, computes the
// forward result, and, when a tape is supplied and some input wants
// gradients, records one backward closure. Closures guard on the output
// gradient being populated, so side branches that never reach the loss simply
// contribute nothing.

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <initializer_list>
#include <limits>
#include <memory>
#include <string>
#include <vector>

#include "flexchill/errors.hpp"
#include "flexchill/tensor.hpp"

namespace flexchill {

namespace detail {

inline void require(bool cond, const std::string& msg) {
    if (!cond) throw std::invalid_argument(msg);
}

inline bool wants_tape(const Tape* tape, std::initializer_list<const Tensor*> inputs) {
    if (!tape) return false;
    for (const Tensor* t : inputs)
        if (t->requires_grad()) return true;
    return false;
}

}  // namespace detail

// y = x W^T + b with x:[B,I], W:[O,I], b:[O].
inline Tensor dense(Tape* tape, const Tensor& x, const Tensor& W, const Tensor& b) {
    detail::require(x.rank() == 2, "dense: input must be [batch, in]");
    detail::require(W.rank() == 2, "dense: weight must be [out, in]");
    detail::require(b.rank() == 1, "dense: bias must be [out]");
    const std::size_t B = x.dim(0), I = x.dim(1), O = W.dim(0);
    detail::require(W.dim(1) == I, "dense: weight in-dim " + std::to_string(W.dim(1)) +
                                       " does not match input dim " + std::to_string(I));
    detail::require(b.dim(0) == O, "dense: bias dim does not match out-dim");

    Tensor y = Tensor::zeros({B, O});
    {
        const auto& xv = x.data();
        const auto& wv = W.data();
        const auto& bv = b.data();
        auto& yv = y.data();
        for (std::size_t r = 0; r < B; ++r) {
            const double* xr = &xv[r * I];
            double* yr = &yv[r * O];
            for (std::size_t o = 0; o < O; ++o) {
                const double* wr = &wv[o * I];
                double acc = bv[o];
                for (std::size_t i = 0; i < I; ++i) acc += xr[i] * wr[i];
                yr[o] = acc;
            }
        }
    }

    if (detail::wants_tape(tape, {&x, &W, &b})) {
        y.set_requires_grad(true);
        Tensor xc = x, Wc = W, bc = b, yc = y;
        tape->record([xc, Wc, bc, yc]() mutable {
            if (!yc.has_grad()) return;
            const auto& g = yc.grad();
            const std::size_t B = xc.dim(0), I = xc.dim(1), O = Wc.dim(0);
            if (xc.requires_grad()) {
                auto& dx = xc.grad_buffer();
                for (std::size_t r = 0; r < B; ++r)
                    for (std::size_t o = 0; o < O; ++o) {
                        const double go = g[r * O + o];
                        const double* wr = &Wc.data()[o * I];
                        double* dxr = &dx[r * I];
                        for (std::size_t i = 0; i < I; ++i) dxr[i] += go * wr[i];
                    }
            }
            if (Wc.requires_grad()) {
                auto& dW = Wc.grad_buffer();
                for (std::size_t r = 0; r < B; ++r)
                    for (std::size_t o = 0; o < O; ++o) {
                        const double go = g[r * O + o];
                        const double* xr = &xc.data()[r * I];
                        double* dwr = &dW[o * I];
                        for (std::size_t i = 0; i < I; ++i) dwr[i] += go * xr[i];
                    }
            }
            if (bc.requires_grad()) {
                auto& db = bc.grad_buffer();
                for (std::size_t r = 0; r < B; ++r)
                    for (std::size_t o = 0; o < O; ++o) db[o] += g[r * O + o];
            }
        });
    }
    return y;
}

inline Tensor relu(Tape* tape, const Tensor& x) {
    Tensor y(x.shape(), x.data());
    for (auto& v : y.data()) v = v > 0.0 ? v : 0.0;
    if (detail::wants_tape(tape, {&x})) {
        y.set_requires_grad(true);
        Tensor xc = x, yc = y;
        tape->record([xc, yc]() mutable {
            if (!yc.has_grad()) return;
            const auto& g = yc.grad();
            auto& dx = xc.grad_buffer();
            const auto& xv = xc.data();
            for (std::size_t i = 0; i < xv.size(); ++i)
                if (xv[i] > 0.0) dx[i] += g[i];
        });
    }
    return y;
}

// Valid 2-D convolution, x:[B,Cin,H,W], w:[Cout,Cin,kh,kw], b:[Cout].
inline Tensor conv2d(Tape* tape, const Tensor& x, const Tensor& w, const Tensor& b,
                     std::size_t stride) {
    detail::require(stride >= 1, "conv2d: stride must be >= 1");
    detail::require(x.rank() == 4, "conv2d: input must be [batch, channels, height, width]");
    detail::require(w.rank() == 4, "conv2d: weight must be [out, in, kh, kw]");
    detail::require(b.rank() == 1, "conv2d: bias must be [out]");
    const std::size_t B = x.dim(0), Ci = x.dim(1), H = x.dim(2), W = x.dim(3);
    const std::size_t Co = w.dim(0), kh = w.dim(2), kw = w.dim(3);
    detail::require(w.dim(1) == Ci, "conv2d: weight in-channels mismatch");
    detail::require(b.dim(0) == Co, "conv2d: bias dim mismatch");
    detail::require(H >= kh && W >= kw, "conv2d: kernel larger than input");
    const std::size_t Oh = (H - kh) / stride + 1;
    const std::size_t Ow = (W - kw) / stride + 1;

    Tensor y = Tensor::zeros({B, Co, Oh, Ow});
    {
        const auto& xv = x.data();
        const auto& wv = w.data();
        const auto& bv = b.data();
        auto& yv = y.data();
        for (std::size_t n = 0; n < B; ++n)
            for (std::size_t co = 0; co < Co; ++co)
                for (std::size_t oh = 0; oh < Oh; ++oh)
                    for (std::size_t ow = 0; ow < Ow; ++ow) {
                        double acc = bv[co];
                        for (std::size_t ci = 0; ci < Ci; ++ci)
                            for (std::size_t i = 0; i < kh; ++i) {
                                const double* xr =
                                    &xv[((n * Ci + ci) * H + oh * stride + i) * W + ow * stride];
                                const double* wr = &wv[((co * Ci + ci) * kh + i) * kw];
                                for (std::size_t j = 0; j < kw; ++j) acc += xr[j] * wr[j];
                            }
                        yv[((n * Co + co) * Oh + oh) * Ow + ow] = acc;
                    }
    }

    if (detail::wants_tape(tape, {&x, &w, &b})) {
        y.set_requires_grad(true);
        Tensor xc = x, wc = w, bc = b, yc = y;
        const std::size_t s = stride;
        tape->record([xc, wc, bc, yc, s]() mutable {
            if (!yc.has_grad()) return;
            const auto& g = yc.grad();
            const std::size_t B = xc.dim(0), Ci = xc.dim(1), H = xc.dim(2), W = xc.dim(3);
            const std::size_t Co = wc.dim(0), kh = wc.dim(2), kw = wc.dim(3);
            const std::size_t Oh = yc.dim(2), Ow = yc.dim(3);
            const bool nx = xc.requires_grad(), nw = wc.requires_grad(), nb = bc.requires_grad();
            if (nx) xc.grad_buffer();
            if (nw) wc.grad_buffer();
            if (nb) bc.grad_buffer();
            for (std::size_t n = 0; n < B; ++n)
                for (std::size_t co = 0; co < Co; ++co)
                    for (std::size_t oh = 0; oh < Oh; ++oh)
                        for (std::size_t ow = 0; ow < Ow; ++ow) {
                            const double go = g[((n * Co + co) * Oh + oh) * Ow + ow];
                            if (go == 0.0) continue;
                            if (nb) bc.grad_buffer()[co] += go;
                            for (std::size_t ci = 0; ci < Ci; ++ci)
                                for (std::size_t i = 0; i < kh; ++i)
                                    for (std::size_t j = 0; j < kw; ++j) {
                                        const std::size_t xi =
                                            ((n * Ci + ci) * H + oh * s + i) * W + ow * s + j;
                                        const std::size_t wi = ((co * Ci + ci) * kh + i) * kw + j;
                                        if (nx) xc.grad_buffer()[xi] += go * wc.data()[wi];
                                        if (nw) wc.grad_buffer()[wi] += go * xc.data()[xi];
                                    }
                        }
        });
    }
    return y;
}

// Non-overlapping max pooling (stride = k); trailing remainder is dropped.
inline Tensor maxpool2d(Tape* tape, const Tensor& x, std::size_t k) {
    detail::require(k >= 1, "maxpool2d: window must be >= 1");
    detail::require(x.rank() == 4, "maxpool2d: input must be [batch, channels, height, width]");
    const std::size_t B = x.dim(0), C = x.dim(1), H = x.dim(2), W = x.dim(3);
    detail::require(H >= k && W >= k, "maxpool2d: window larger than input");
    const std::size_t Oh = H / k, Ow = W / k;

    Tensor y = Tensor::zeros({B, C, Oh, Ow});
    auto argmax = std::make_shared<std::vector<std::size_t>>(y.numel());
    {
        const auto& xv = x.data();
        auto& yv = y.data();
        for (std::size_t n = 0; n < B; ++n)
            for (std::size_t c = 0; c < C; ++c)
                for (std::size_t oh = 0; oh < Oh; ++oh)
                    for (std::size_t ow = 0; ow < Ow; ++ow) {
                        double best = -std::numeric_limits<double>::infinity();
                        std::size_t best_i = 0;
                        for (std::size_t i = 0; i < k; ++i)
                            for (std::size_t j = 0; j < k; ++j) {
                                const std::size_t xi =
                                    ((n * C + c) * H + oh * k + i) * W + ow * k + j;
                                if (xv[xi] > best) {
                                    best = xv[xi];
                                    best_i = xi;
                                }
                            }
                        const std::size_t yi = ((n * C + c) * Oh + oh) * Ow + ow;
                        yv[yi] = best;
                        (*argmax)[yi] = best_i;
                    }
    }

    if (detail::wants_tape(tape, {&x})) {
        y.set_requires_grad(true);
        Tensor xc = x, yc = y;
        tape->record([xc, yc, argmax]() mutable {
            if (!yc.has_grad()) return;
            const auto& g = yc.grad();
            auto& dx = xc.grad_buffer();
            for (std::size_t i = 0; i < g.size(); ++i) dx[(*argmax)[i]] += g[i];
        });
    }
    return y;
}

// 1-D convolution with zero padding, x:[B,Cin,L], w:[Cout,Cin,k], b:[Cout].
inline Tensor conv1d(Tape* tape, const Tensor& x, const Tensor& w, const Tensor& b,
                     std::size_t stride, std::size_t padding) {
    detail::require(stride >= 1, "conv1d: stride must be >= 1");
    detail::require(x.rank() == 3, "conv1d: input must be [batch, channels, length]");
    detail::require(w.rank() == 3, "conv1d: weight must be [out, in, k]");
    detail::require(b.rank() == 1, "conv1d: bias must be [out]");
    const std::size_t B = x.dim(0), Ci = x.dim(1), L = x.dim(2);
    const std::size_t Co = w.dim(0), k = w.dim(2);
    detail::require(w.dim(1) == Ci, "conv1d: weight in-channels mismatch");
    detail::require(b.dim(0) == Co, "conv1d: bias dim mismatch");
    detail::require(L + 2 * padding >= k, "conv1d: kernel larger than padded input");
    const std::size_t Lo = (L + 2 * padding - k) / stride + 1;

    Tensor y = Tensor::zeros({B, Co, Lo});
    {
        const auto& xv = x.data();
        const auto& wv = w.data();
        const auto& bv = b.data();
        auto& yv = y.data();
        for (std::size_t n = 0; n < B; ++n)
            for (std::size_t co = 0; co < Co; ++co)
                for (std::size_t t = 0; t < Lo; ++t) {
                    double acc = bv[co];
                    const std::ptrdiff_t start =
                        static_cast<std::ptrdiff_t>(t * stride) - static_cast<std::ptrdiff_t>(padding);
                    for (std::size_t ci = 0; ci < Ci; ++ci)
                        for (std::size_t j = 0; j < k; ++j) {
                            const std::ptrdiff_t pos = start + static_cast<std::ptrdiff_t>(j);
                            if (pos < 0 || pos >= static_cast<std::ptrdiff_t>(L)) continue;
                            acc += xv[(n * Ci + ci) * L + static_cast<std::size_t>(pos)] *
                                   wv[(co * Ci + ci) * k + j];
                        }
                    yv[(n * Co + co) * Lo + t] = acc;
                }
    }

    if (detail::wants_tape(tape, {&x, &w, &b})) {
        y.set_requires_grad(true);
        Tensor xc = x, wc = w, bc = b, yc = y;
        const std::size_t s = stride, p = padding;
        tape->record([xc, wc, bc, yc, s, p]() mutable {
            if (!yc.has_grad()) return;
            const auto& g = yc.grad();
            const std::size_t B = xc.dim(0), Ci = xc.dim(1), L = xc.dim(2);
            const std::size_t Co = wc.dim(0), k = wc.dim(2), Lo = yc.dim(2);
            const bool nx = xc.requires_grad(), nw = wc.requires_grad(), nb = bc.requires_grad();
            if (nx) xc.grad_buffer();
            if (nw) wc.grad_buffer();
            if (nb) bc.grad_buffer();
            for (std::size_t n = 0; n < B; ++n)
                for (std::size_t co = 0; co < Co; ++co)
                    for (std::size_t t = 0; t < Lo; ++t) {
                        const double go = g[(n * Co + co) * Lo + t];
                        if (go == 0.0) continue;
                        if (nb) bc.grad_buffer()[co] += go;
                        const std::ptrdiff_t start =
                            static_cast<std::ptrdiff_t>(t * s) - static_cast<std::ptrdiff_t>(p);
                        for (std::size_t ci = 0; ci < Ci; ++ci)
                            for (std::size_t j = 0; j < k; ++j) {
                                const std::ptrdiff_t pos = start + static_cast<std::ptrdiff_t>(j);
                                if (pos < 0 || pos >= static_cast<std::ptrdiff_t>(L)) continue;
                                const std::size_t xi =
                                    (n * Ci + ci) * L + static_cast<std::size_t>(pos);
                                const std::size_t wi = (co * Ci + ci) * k + j;
                                if (nx) xc.grad_buffer()[xi] += go * wc.data()[wi];
                                if (nw) wc.grad_buffer()[wi] += go * xc.data()[xi];
                            }
                    }
        });
    }
    return y;
}

inline Tensor maxpool1d(Tape* tape, const Tensor& x, std::size_t k) {
    detail::require(k >= 1, "maxpool1d: window must be >= 1");
    detail::require(x.rank() == 3, "maxpool1d: input must be [batch, channels, length]");
    const std::size_t B = x.dim(0), C = x.dim(1), L = x.dim(2);
    detail::require(L >= k, "maxpool1d: window larger than input");
    const std::size_t Lo = L / k;

    Tensor y = Tensor::zeros({B, C, Lo});
    auto argmax = std::make_shared<std::vector<std::size_t>>(y.numel());
    {
        const auto& xv = x.data();
        auto& yv = y.data();
        for (std::size_t n = 0; n < B; ++n)
            for (std::size_t c = 0; c < C; ++c)
                for (std::size_t t = 0; t < Lo; ++t) {
                    double best = -std::numeric_limits<double>::infinity();
                    std::size_t best_i = 0;
                    for (std::size_t j = 0; j < k; ++j) {
                        const std::size_t xi = (n * C + c) * L + t * k + j;
                        if (xv[xi] > best) {
                            best = xv[xi];
                            best_i = xi;
                        }
                    }
                    const std::size_t yi = (n * C + c) * Lo + t;
                    yv[yi] = best;
                    (*argmax)[yi] = best_i;
                }
    }

    if (detail::wants_tape(tape, {&x})) {
        y.set_requires_grad(true);
        Tensor xc = x, yc = y;
        tape->record([xc, yc, argmax]() mutable {
            if (!yc.has_grad()) return;
            const auto& g = yc.grad();
            auto& dx = xc.grad_buffer();
            for (std::size_t i = 0; i < g.size(); ++i) dx[(*argmax)[i]] += g[i];
        });
    }
    return y;
}

// Collapses the length axis to a single mean per channel: [B,C,L] -> [B,C,1].
inline Tensor adaptive_avg_pool1d(Tape* tape, const Tensor& x) {
    detail::require(x.rank() == 3, "adaptive_avg_pool1d: input must be [batch, channels, length]");
    const std::size_t B = x.dim(0), C = x.dim(1), L = x.dim(2);
    Tensor y = Tensor::zeros({B, C, 1});
    {
        const auto& xv = x.data();
        auto& yv = y.data();
        for (std::size_t n = 0; n < B; ++n)
            for (std::size_t c = 0; c < C; ++c) {
                double acc = 0.0;
                const double* xr = &xv[(n * C + c) * L];
                for (std::size_t t = 0; t < L; ++t) acc += xr[t];
                yv[n * C + c] = acc / static_cast<double>(L);
            }
    }
    if (detail::wants_tape(tape, {&x})) {
        y.set_requires_grad(true);
        Tensor xc = x, yc = y;
        tape->record([xc, yc]() mutable {
            if (!yc.has_grad()) return;
            const auto& g = yc.grad();
            auto& dx = xc.grad_buffer();
            const std::size_t B = xc.dim(0), C = xc.dim(1), L = xc.dim(2);
            for (std::size_t n = 0; n < B; ++n)
                for (std::size_t c = 0; c < C; ++c) {
                    const double go = g[n * C + c] / static_cast<double>(L);
                    double* dxr = &dx[(n * C + c) * L];
                    for (std::size_t t = 0; t < L; ++t) dxr[t] += go;
                }
        });
    }
    return y;
}

// [B, d1, d2, ...] -> [B, d1*d2*...]; row-major layout makes this a copy.
inline Tensor flatten(Tape* tape, const Tensor& x) {
    detail::require(x.rank() >= 1, "flatten: input must have a batch axis");
    const std::size_t B = x.dim(0);
    const std::size_t P = x.numel() / B;
    Tensor y({B, P}, x.data());
    if (detail::wants_tape(tape, {&x})) {
        y.set_requires_grad(true);
        Tensor xc = x, yc = y;
        tape->record([xc, yc]() mutable {
            if (!yc.has_grad()) return;
            const auto& g = yc.grad();
            auto& dx = xc.grad_buffer();
            for (std::size_t i = 0; i < g.size(); ++i) dx[i] += g[i];
        });
    }
    return y;
}

// View each sample as `sample_shape` (total size preserved, data copied);
// gradients pass straight through.
inline Tensor reshape_batch(Tape* tape, const Tensor& x,
                            const std::vector<std::size_t>& sample_shape) {
    detail::require(x.rank() >= 1, "reshape: input must have a batch axis");
    const std::size_t B = x.dim(0);
    std::size_t per = 1;
    for (std::size_t d : sample_shape) per *= d;
    detail::require(per * B == x.numel(),
                    "reshape: target sample shape does not match input size");
    std::vector<std::size_t> shape{B};
    shape.insert(shape.end(), sample_shape.begin(), sample_shape.end());
    Tensor y(shape, x.data());
    if (detail::wants_tape(tape, {&x})) {
        y.set_requires_grad(true);
        Tensor xc = x, yc = y;
        tape->record([xc, yc]() mutable {
            if (!yc.has_grad()) return;
            const auto& g = yc.grad();
            auto& dx = xc.grad_buffer();
            for (std::size_t i = 0; i < g.size(); ++i) dx[i] += g[i];
        });
    }
    return y;
}

// Batch normalization over [B,C] or [B,C,L]; per-channel statistics.
// Training mode normalizes with batch statistics (biased variance) and folds
// them into the running buffers with the given momentum (unbiased variance,
// matching the usual deep-learning convention). Eval mode uses the running
// buffers and never mutates them.
inline Tensor batchnorm1d(Tape* tape, const Tensor& x, const Tensor& gamma, const Tensor& beta,
                          Tensor& running_mean, Tensor& running_var, bool training,
                          double momentum = 0.1, double eps = 1e-5) {
    detail::require(x.rank() == 2 || x.rank() == 3,
                    "batchnorm1d: input must be [batch, channels] or [batch, channels, length]");
    const std::size_t B = x.dim(0), C = x.dim(1);
    const std::size_t L = x.rank() == 3 ? x.dim(2) : 1;
    detail::require(gamma.rank() == 1 && gamma.dim(0) == C, "batchnorm1d: gamma must be [channels]");
    detail::require(beta.rank() == 1 && beta.dim(0) == C, "batchnorm1d: beta must be [channels]");
    detail::require(running_mean.rank() == 1 && running_mean.dim(0) == C,
                    "batchnorm1d: running mean must be [channels]");
    detail::require(running_var.rank() == 1 && running_var.dim(0) == C,
                    "batchnorm1d: running var must be [channels]");
    const std::size_t m = B * L;
    detail::require(!training || m > 1,
                    "batchnorm1d: training mode needs more than one value per channel");

    auto mean = std::make_shared<std::vector<double>>(C, 0.0);
    auto inv_std = std::make_shared<std::vector<double>>(C, 0.0);
    const auto& xv = x.data();
    auto idx = [&](std::size_t n, std::size_t c, std::size_t t) {
        return (n * C + c) * L + t;
    };

    if (training) {
        for (std::size_t c = 0; c < C; ++c) {
            double acc = 0.0;
            for (std::size_t n = 0; n < B; ++n)
                for (std::size_t t = 0; t < L; ++t) acc += xv[idx(n, c, t)];
            (*mean)[c] = acc / static_cast<double>(m);
        }
        for (std::size_t c = 0; c < C; ++c) {
            double acc = 0.0;
            for (std::size_t n = 0; n < B; ++n)
                for (std::size_t t = 0; t < L; ++t) {
                    const double d = xv[idx(n, c, t)] - (*mean)[c];
                    acc += d * d;
                }
            const double var = acc / static_cast<double>(m);
            (*inv_std)[c] = 1.0 / std::sqrt(var + eps);
            const double var_unbiased = acc / static_cast<double>(m - 1);
            running_mean.data()[c] =
                (1.0 - momentum) * running_mean.data()[c] + momentum * (*mean)[c];
            running_var.data()[c] =
                (1.0 - momentum) * running_var.data()[c] + momentum * var_unbiased;
        }
    } else {
        for (std::size_t c = 0; c < C; ++c) {
            (*mean)[c] = running_mean.data()[c];
            (*inv_std)[c] = 1.0 / std::sqrt(running_var.data()[c] + eps);
        }
    }

    Tensor y = Tensor::zeros(x.shape());
    {
        auto& yv = y.data();
        const auto& gv = gamma.data();
        const auto& bv = beta.data();
        for (std::size_t n = 0; n < B; ++n)
            for (std::size_t c = 0; c < C; ++c)
                for (std::size_t t = 0; t < L; ++t) {
                    const std::size_t i = idx(n, c, t);
                    yv[i] = gv[c] * (xv[i] - (*mean)[c]) * (*inv_std)[c] + bv[c];
                }
    }

    if (detail::wants_tape(tape, {&x, &gamma, &beta})) {
        y.set_requires_grad(true);
        Tensor xc = x, gc = gamma, bc = beta, yc = y;
        const bool train_path = training;
        tape->record([xc, gc, bc, yc, mean, inv_std, train_path]() mutable {
            if (!yc.has_grad()) return;
            const auto& g = yc.grad();
            const std::size_t B = xc.dim(0), C = xc.dim(1);
            const std::size_t L = xc.rank() == 3 ? xc.dim(2) : 1;
            const double m = static_cast<double>(B * L);
            const auto& xv = xc.data();
            auto idx = [&](std::size_t n, std::size_t c, std::size_t t) {
                return (n * C + c) * L + t;
            };
            for (std::size_t c = 0; c < C; ++c) {
                double sum_g = 0.0, sum_gx = 0.0;
                for (std::size_t n = 0; n < B; ++n)
                    for (std::size_t t = 0; t < L; ++t) {
                        const std::size_t i = idx(n, c, t);
                        const double xhat = (xv[i] - (*mean)[c]) * (*inv_std)[c];
                        sum_g += g[i];
                        sum_gx += g[i] * xhat;
                    }
                if (bc.requires_grad()) bc.grad_buffer()[c] += sum_g;
                if (gc.requires_grad()) gc.grad_buffer()[c] += sum_gx;
                if (xc.requires_grad()) {
                    auto& dx = xc.grad_buffer();
                    const double scale = gc.data()[c] * (*inv_std)[c];
                    for (std::size_t n = 0; n < B; ++n)
                        for (std::size_t t = 0; t < L; ++t) {
                            const std::size_t i = idx(n, c, t);
                            if (train_path) {
                                const double xhat = (xv[i] - (*mean)[c]) * (*inv_std)[c];
                                dx[i] += scale * (g[i] - sum_g / m - xhat * sum_gx / m);
                            } else {
                                dx[i] += scale * g[i];
                            }
                        }
                }
            }
        });
    }
    return y;
}

// Temperature-scaled softmax, computed row-wise with max subtraction. Pure
// function; takes [C] or [B,C] and returns the same shape. Rows sum to one
// and the row argmax matches the logit argmax for every T.
inline Tensor softmax_t(const Tensor& logits, double temperature) {
    if (!(temperature > 0.0))
        throw std::invalid_argument("softmax_t: temperature must be positive");
    detail::require(logits.rank() == 1 || logits.rank() == 2,
                    "softmax_t: logits must be [classes] or [batch, classes]");
    const std::size_t B = logits.rank() == 2 ? logits.dim(0) : 1;
    const std::size_t C = logits.rank() == 2 ? logits.dim(1) : logits.dim(0);
    Tensor p(logits.shape(), logits.data());
    auto& pv = p.data();
    for (std::size_t r = 0; r < B; ++r) {
        double* row = &pv[r * C];
        double mx = row[0];
        for (std::size_t j = 0; j < C; ++j) {
            if (!std::isfinite(row[j]))
                throw numeric_error("softmax_t: logits must be finite");
            mx = std::max(mx, row[j]);
        }
        double denom = 0.0;
        for (std::size_t j = 0; j < C; ++j) {
            row[j] = std::exp((row[j] - mx) / temperature);
            denom += row[j];
        }
        for (std::size_t j = 0; j < C; ++j) row[j] /= denom;
    }
    return p;
}

// Mean cross-entropy of temperature-scaled softmax over the batch, in
// log-sum-exp form. The recorded gradient to the logits is
// (1/T) * (softmax_t(z, T) - onehot(label)) / batch.
inline Tensor ce_loss_t(Tape* tape, const Tensor& logits, const std::vector<int>& labels,
                        double temperature) {
    if (!(temperature > 0.0))
        throw std::invalid_argument("ce_loss_t: temperature must be positive");
    detail::require(logits.rank() == 2, "ce_loss_t: logits must be [batch, classes]");
    const std::size_t B = logits.dim(0), C = logits.dim(1);
    detail::require(labels.size() == B, "ce_loss_t: labels length " +
                                            std::to_string(labels.size()) +
                                            " does not match batch " + std::to_string(B));

    auto probs = std::make_shared<std::vector<double>>(logits.numel());
    const auto& zv = logits.data();
    double total = 0.0;
    for (std::size_t r = 0; r < B; ++r) {
        const int label = labels[r];
        if (label < 0 || static_cast<std::size_t>(label) >= C)
            throw std::invalid_argument("ce_loss_t: label " + std::to_string(label) +
                                        " out of range for " + std::to_string(C) + " classes");
        const double* row = &zv[r * C];
        double mx = row[0];
        for (std::size_t j = 0; j < C; ++j) {
            if (!std::isfinite(row[j]))
                throw numeric_error("ce_loss_t: logits must be finite");
            mx = std::max(mx, row[j]);
        }
        double denom = 0.0;
        double* prow = &(*probs)[r * C];
        for (std::size_t j = 0; j < C; ++j) {
            prow[j] = std::exp((row[j] - mx) / temperature);
            denom += prow[j];
        }
        for (std::size_t j = 0; j < C; ++j) prow[j] /= denom;
        total += std::log(denom) + (mx - row[label]) / temperature;
    }
    Tensor loss = Tensor::scalar(total / static_cast<double>(B));

    if (detail::wants_tape(tape, {&logits})) {
        loss.set_requires_grad(true);
        Tensor zc = logits, lc = loss;
        auto labels_copy = std::make_shared<std::vector<int>>(labels);
        const double T = temperature;
        tape->record([zc, lc, probs, labels_copy, T]() mutable {
            if (!lc.has_grad()) return;
            const double go = lc.grad()[0];
            const std::size_t B = zc.dim(0), C = zc.dim(1);
            auto& dz = zc.grad_buffer();
            const double scale = go / (T * static_cast<double>(B));
            for (std::size_t r = 0; r < B; ++r) {
                const std::size_t y = static_cast<std::size_t>((*labels_copy)[r]);
                for (std::size_t j = 0; j < C; ++j) {
                    const double onehot = (j == y) ? 1.0 : 0.0;
                    dz[r * C + j] += scale * ((*probs)[r * C + j] - onehot);
                }
            }
        });
    }
    return loss;
}

}  // namespace flexchill
