#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <utility>
#include <vector>

#include "vitstem/kernels.hpp"
#include "vitstem/tensor.hpp"

namespace vitstem {

namespace opdetail {

template <class T>
bool taping(std::initializer_list<const TensorT<T>*> parents) {
    if (!GradMode::enabled()) {
        return false;
    }
    for (const TensorT<T>* p : parents) {
        if (p->defined() && p->requires_grad()) {
            return true;
        }
    }
    return false;
}

template <class T>
TensorT<T> finish(Shape shape, std::vector<T> value, bool tape,
                  std::vector<TensorT<T>> parents,
                  std::function<void(detail::Node<T>&)> backprop) {
    auto node = std::make_shared<detail::Node<T>>();
    node->shape = std::move(shape);
    node->value = std::move(value);
    node->requires_grad = tape;
    if (tape) {
        node->parents.reserve(parents.size());
        for (auto& p : parents) {
            node->parents.push_back(p.node());
        }
        node->backprop = std::move(backprop);
    }
    return TensorT<T>(std::move(node));
}

template <class T>
void add_into(detail::Node<T>& parent, const std::vector<T>& g) {
    if (!parent.requires_grad) {
        return;
    }
    auto& dst = parent.ensure_grad();
    for (std::size_t i = 0; i < g.size(); ++i) {
        dst[i] += g[i];
    }
}

// out[b] spatial patch gather for conv2d: col is (C*kh*kw, OH*OW).
template <class T>
void im2col(const T* x, std::int64_t C, std::int64_t H, std::int64_t W, std::int64_t kh,
            std::int64_t kw, std::int64_t sh, std::int64_t sw, std::int64_t ph, std::int64_t pw,
            std::int64_t OH, std::int64_t OW, T* col) {
    for (std::int64_t c = 0; c < C; ++c) {
        for (std::int64_t i = 0; i < kh; ++i) {
            for (std::int64_t j = 0; j < kw; ++j) {
                T* row = col + ((c * kh + i) * kw + j) * OH * OW;
                for (std::int64_t oy = 0; oy < OH; ++oy) {
                    const std::int64_t y = oy * sh - ph + i;
                    if (y < 0 || y >= H) {
                        std::fill(row + oy * OW, row + (oy + 1) * OW, T(0));
                        continue;
                    }
                    const T* xrow = x + (c * H + y) * W;
                    for (std::int64_t ox = 0; ox < OW; ++ox) {
                        const std::int64_t xcol = ox * sw - pw + j;
                        row[oy * OW + ox] = (xcol >= 0 && xcol < W) ? xrow[xcol] : T(0);
                    }
                }
            }
        }
    }
}

template <class T>
void col2im_add(const T* col, std::int64_t C, std::int64_t H, std::int64_t W, std::int64_t kh,
                std::int64_t kw, std::int64_t sh, std::int64_t sw, std::int64_t ph,
                std::int64_t pw, std::int64_t OH, std::int64_t OW, T* x) {
    for (std::int64_t c = 0; c < C; ++c) {
        for (std::int64_t i = 0; i < kh; ++i) {
            for (std::int64_t j = 0; j < kw; ++j) {
                const T* row = col + ((c * kh + i) * kw + j) * OH * OW;
                for (std::int64_t oy = 0; oy < OH; ++oy) {
                    const std::int64_t y = oy * sh - ph + i;
                    if (y < 0 || y >= H) {
                        continue;
                    }
                    T* xrow = x + (c * H + y) * W;
                    for (std::int64_t ox = 0; ox < OW; ++ox) {
                        const std::int64_t xcol = ox * sw - pw + j;
                        if (xcol >= 0 && xcol < W) {
                            xrow[xcol] += row[oy * OW + ox];
                        }
                    }
                }
            }
        }
    }
}

}  // namespace opdetail

// ---------------------------------------------------------------------------
// elementwise / arithmetic

template <class T>
TensorT<T> add(const TensorT<T>& a, const TensorT<T>& b) {
    if (a.shape() != b.shape()) {
        throw ShapeError("add: shape mismatch " + shape_str(a.shape()) + " vs " +
                         shape_str(b.shape()));
    }
    std::vector<T> out(a.data());
    const auto& bv = b.data();
    for (std::size_t i = 0; i < out.size(); ++i) {
        out[i] += bv[i];
    }
    const bool tape = opdetail::taping<T>({&a, &b});
    return opdetail::finish<T>(a.shape(), std::move(out), tape, {a, b},
                               [](detail::Node<T>& self) {
                                   opdetail::add_into(*self.parents[0], self.grad);
                                   opdetail::add_into(*self.parents[1], self.grad);
                               });
}

template <class T>
TensorT<T> scale(const TensorT<T>& a, T c) {
    std::vector<T> out(a.data());
    for (auto& v : out) {
        v *= c;
    }
    const bool tape = opdetail::taping<T>({&a});
    return opdetail::finish<T>(a.shape(), std::move(out), tape, {a},
                               [c](detail::Node<T>& self) {
                                   auto& p = *self.parents[0];
                                   if (!p.requires_grad) {
                                       return;
                                   }
                                   auto& dst = p.ensure_grad();
                                   for (std::size_t i = 0; i < self.grad.size(); ++i) {
                                       dst[i] += c * self.grad[i];
                                   }
                               });
}

template <class T>
TensorT<T> relu(const TensorT<T>& x) {
    std::vector<T> out(x.data());
    for (auto& v : out) {
        v = v > T(0) ? v : T(0);
    }
    const bool tape = opdetail::taping<T>({&x});
    return opdetail::finish<T>(x.shape(), std::move(out), tape, {x},
                               [](detail::Node<T>& self) {
                                   auto& p = *self.parents[0];
                                   if (!p.requires_grad) {
                                       return;
                                   }
                                   auto& dst = p.ensure_grad();
                                   const auto& xv = p.value;
                                   for (std::size_t i = 0; i < self.grad.size(); ++i) {
                                       if (xv[i] > T(0)) {
                                           dst[i] += self.grad[i];
                                       }
                                   }
                               });
}

// Exact (erf) GELU.
template <class T>
TensorT<T> gelu(const TensorT<T>& x) {
    static const T inv_sqrt2 = T(1) / std::sqrt(T(2));
    static const T inv_sqrt2pi = T(1) / std::sqrt(T(2) * T(M_PI));
    const auto& xv = x.data();
    std::vector<T> out(xv.size());
    for (std::size_t i = 0; i < xv.size(); ++i) {
        out[i] = T(0.5) * xv[i] * (T(1) + std::erf(xv[i] * inv_sqrt2));
    }
    const bool tape = opdetail::taping<T>({&x});
    return opdetail::finish<T>(x.shape(), std::move(out), tape, {x},
                               [](detail::Node<T>& self) {
                                   auto& p = *self.parents[0];
                                   if (!p.requires_grad) {
                                       return;
                                   }
                                   auto& dst = p.ensure_grad();
                                   const auto& xv = p.value;
                                   for (std::size_t i = 0; i < self.grad.size(); ++i) {
                                       const T v = xv[i];
                                       const T cdf = T(0.5) * (T(1) + std::erf(v * inv_sqrt2));
                                       const T pdf = std::exp(T(-0.5) * v * v) * inv_sqrt2pi;
                                       dst[i] += self.grad[i] * (cdf + v * pdf);
                                   }
                               });
}

// Scalar sum of w[i]*x[i] with constant weights; test scalarizer.
template <class T>
TensorT<T> weighted_sum(const TensorT<T>& x, std::vector<T> w) {
    if (static_cast<std::int64_t>(w.size()) != x.size()) {
        throw ShapeError("weighted_sum: weight count mismatch");
    }
    T s = 0;
    const auto& xv = x.data();
    for (std::size_t i = 0; i < w.size(); ++i) {
        s += w[i] * xv[i];
    }
    const bool tape = opdetail::taping<T>({&x});
    return opdetail::finish<T>(Shape{}, std::vector<T>{s}, tape, {x},
                               [w = std::move(w)](detail::Node<T>& self) {
                                   auto& p = *self.parents[0];
                                   if (!p.requires_grad) {
                                       return;
                                   }
                                   auto& dst = p.ensure_grad();
                                   const T g = self.grad[0];
                                   for (std::size_t i = 0; i < w.size(); ++i) {
                                       dst[i] += g * w[i];
                                   }
                               });
}

// ---------------------------------------------------------------------------
// matrix products

template <class T>
TensorT<T> matmul(const TensorT<T>& a, const TensorT<T>& b) {
    if (a.ndim() != 2 || b.ndim() != 2 || a.dim(1) != b.dim(0)) {
        throw ShapeError("matmul: incompatible shapes " + shape_str(a.shape()) + " x " +
                         shape_str(b.shape()));
    }
    const std::int64_t m = a.dim(0), k = a.dim(1), n = b.dim(1);
    std::vector<T> out(static_cast<std::size_t>(m * n), T(0));
    mm_nn(a.data().data(), b.data().data(), out.data(), m, k, n);
    const bool tape = opdetail::taping<T>({&a, &b});
    return opdetail::finish<T>(
        {m, n}, std::move(out), tape, {a, b}, [m, k, n](detail::Node<T>& self) {
            auto& pa = *self.parents[0];
            auto& pb = *self.parents[1];
            if (pa.requires_grad) {
                mm_nt(self.grad.data(), pb.value.data(), pa.ensure_grad().data(), m, n, k);
            }
            if (pb.requires_grad) {
                mm_tn(pa.value.data(), self.grad.data(), pb.ensure_grad().data(), m, k, n);
            }
        });
}

// Batched matmul over matching leading dim: a (N,m,k) x b (N,k,n), or
// b (N,n,k) when trans_b is set.
template <class T>
TensorT<T> bmm(const TensorT<T>& a, const TensorT<T>& b, bool trans_b = false) {
    if (a.ndim() != 3 || b.ndim() != 3 || a.dim(0) != b.dim(0)) {
        throw ShapeError("bmm: incompatible shapes " + shape_str(a.shape()) + " x " +
                         shape_str(b.shape()));
    }
    const std::int64_t N = a.dim(0), m = a.dim(1), k = a.dim(2);
    const std::int64_t n = trans_b ? b.dim(1) : b.dim(2);
    const std::int64_t bk = trans_b ? b.dim(2) : b.dim(1);
    if (bk != k) {
        throw ShapeError("bmm: inner extents differ, " + shape_str(a.shape()) + " x " +
                         shape_str(b.shape()));
    }
    std::vector<T> out(static_cast<std::size_t>(N * m * n), T(0));
    for (std::int64_t i = 0; i < N; ++i) {
        const T* ai = a.data().data() + i * m * k;
        const T* bi = b.data().data() + i * k * n;
        T* ci = out.data() + i * m * n;
        if (trans_b) {
            mm_nt(ai, bi, ci, m, k, n);
        } else {
            mm_nn(ai, bi, ci, m, k, n);
        }
    }
    const bool tape = opdetail::taping<T>({&a, &b});
    return opdetail::finish<T>(
        {N, m, n}, std::move(out), tape, {a, b},
        [N, m, k, n, trans_b](detail::Node<T>& self) {
            auto& pa = *self.parents[0];
            auto& pb = *self.parents[1];
            for (std::int64_t i = 0; i < N; ++i) {
                const T* gi = self.grad.data() + i * m * n;
                const T* ai = pa.value.data() + i * m * k;
                const T* bi = pb.value.data() + i * k * n;
                if (pa.requires_grad) {
                    T* dai = pa.ensure_grad().data() + i * m * k;
                    if (trans_b) {
                        mm_nn(gi, bi, dai, m, n, k);  // dA = g * B
                    } else {
                        mm_nt(gi, bi, dai, m, n, k);  // dA = g * B^T
                    }
                }
                if (pb.requires_grad) {
                    T* dbi = pb.ensure_grad().data() + i * k * n;
                    if (trans_b) {
                        mm_tn(gi, ai, dbi, m, n, k);  // dB = g^T * A
                    } else {
                        mm_tn(ai, gi, dbi, m, k, n);  // dB = A^T * g
                    }
                }
            }
        });
}

// x (..., in) with weight (in, out) and optional bias (out).
template <class T>
TensorT<T> linear(const TensorT<T>& x, const TensorT<T>& w, const TensorT<T>& bias) {
    if (x.ndim() < 1 || w.ndim() != 2 || x.dim(-1) != w.dim(0)) {
        throw ShapeError("linear: incompatible shapes " + shape_str(x.shape()) + " x " +
                         shape_str(w.shape()));
    }
    const std::int64_t in = w.dim(0), out_features = w.dim(1);
    const std::int64_t rows = x.size() / in;
    const bool has_bias = bias.defined();
    if (has_bias && (bias.ndim() != 1 || bias.dim(0) != out_features)) {
        throw ShapeError("linear: bias shape " + shape_str(bias.shape()) + " does not match " +
                         std::to_string(out_features) + " outputs");
    }
    std::vector<T> out(static_cast<std::size_t>(rows * out_features), T(0));
    mm_nn(x.data().data(), w.data().data(), out.data(), rows, in, out_features);
    if (has_bias) {
        const auto& bv = bias.data();
        for (std::int64_t r = 0; r < rows; ++r) {
            T* row = out.data() + r * out_features;
            for (std::int64_t j = 0; j < out_features; ++j) {
                row[j] += bv[j];
            }
        }
    }
    Shape oshape(x.shape());
    oshape.back() = out_features;
    std::vector<TensorT<T>> parents{x, w};
    if (has_bias) {
        parents.push_back(bias);
    }
    const bool tape = has_bias ? opdetail::taping<T>({&x, &w, &bias})
                               : opdetail::taping<T>({&x, &w});
    return opdetail::finish<T>(
        std::move(oshape), std::move(out), tape, std::move(parents),
        [rows, in, out_features, has_bias](detail::Node<T>& self) {
            auto& px = *self.parents[0];
            auto& pw = *self.parents[1];
            if (px.requires_grad) {
                mm_nt(self.grad.data(), pw.value.data(), px.ensure_grad().data(), rows,
                      out_features, in);
            }
            if (pw.requires_grad) {
                mm_tn(px.value.data(), self.grad.data(), pw.ensure_grad().data(), rows, in,
                      out_features);
            }
            if (has_bias && self.parents[2]->requires_grad) {
                auto& db = self.parents[2]->ensure_grad();
                for (std::int64_t r = 0; r < rows; ++r) {
                    const T* g = self.grad.data() + r * out_features;
                    for (std::int64_t j = 0; j < out_features; ++j) {
                        db[j] += g[j];
                    }
                }
            }
        });
}

template <class T>
TensorT<T> linear(const TensorT<T>& x, const TensorT<T>& w) {
    return linear(x, w, TensorT<T>());
}

// ---------------------------------------------------------------------------
// convolution

// Cross-correlation (no kernel flip): x (B,C,H,W), w (O,C,kh,kw), optional
// bias (O); stride/padding given per spatial axis.
template <class T>
TensorT<T> conv2d(const TensorT<T>& x, const TensorT<T>& w, const TensorT<T>& bias,
                  std::pair<std::int64_t, std::int64_t> stride,
                  std::pair<std::int64_t, std::int64_t> padding) {
    if (x.ndim() != 4 || w.ndim() != 4 || x.dim(1) != w.dim(1)) {
        throw ShapeError("conv2d: incompatible shapes " + shape_str(x.shape()) + " x " +
                         shape_str(w.shape()));
    }
    const std::int64_t B = x.dim(0), C = x.dim(1), H = x.dim(2), W = x.dim(3);
    const std::int64_t O = w.dim(0), kh = w.dim(2), kw = w.dim(3);
    const auto [sh, sw] = stride;
    const auto [ph, pw] = padding;
    if (sh < 1 || sw < 1 || ph < 0 || pw < 0) {
        throw ConfigError("conv2d: stride must be >= 1 and padding >= 0");
    }
    const std::int64_t OH = (H + 2 * ph - kh) / sh + 1;
    const std::int64_t OW = (W + 2 * pw - kw) / sw + 1;
    if (H + 2 * ph < kh || W + 2 * pw < kw || OH <= 0 || OW <= 0) {
        throw ConfigError("conv2d: non-positive output extent for input " + shape_str(x.shape()) +
                          ", kernel " + shape_str(w.shape()) + ", stride (" + std::to_string(sh) +
                          "," + std::to_string(sw) + "), padding (" + std::to_string(ph) + "," +
                          std::to_string(pw) + ")");
    }
    const bool has_bias = bias.defined();
    if (has_bias && (bias.ndim() != 1 || bias.dim(0) != O)) {
        throw ShapeError("conv2d: bias shape " + shape_str(bias.shape()) + " does not match " +
                         std::to_string(O) + " channels");
    }
    const std::int64_t K = C * kh * kw;
    const std::int64_t P = OH * OW;
    std::vector<T> out(static_cast<std::size_t>(B * O * P), T(0));
    {
        std::vector<T> col(static_cast<std::size_t>(K * P));
        for (std::int64_t b = 0; b < B; ++b) {
            opdetail::im2col(x.data().data() + b * C * H * W, C, H, W, kh, kw, sh, sw, ph, pw, OH,
                             OW, col.data());
            mm_nn(w.data().data(), col.data(), out.data() + b * O * P, O, K, P);
        }
    }
    if (has_bias) {
        const auto& bv = bias.data();
        for (std::int64_t b = 0; b < B; ++b) {
            for (std::int64_t o = 0; o < O; ++o) {
                T* plane = out.data() + (b * O + o) * P;
                const T bo = bv[o];
                for (std::int64_t p = 0; p < P; ++p) {
                    plane[p] += bo;
                }
            }
        }
    }
    std::vector<TensorT<T>> parents{x, w};
    if (has_bias) {
        parents.push_back(bias);
    }
    const bool tape = has_bias ? opdetail::taping<T>({&x, &w, &bias})
                               : opdetail::taping<T>({&x, &w});
    return opdetail::finish<T>(
        {B, O, OH, OW}, std::move(out), tape, std::move(parents),
        [B, C, H, W, O, kh, kw, sh, sw, ph, pw, OH, OW, K, P, has_bias](detail::Node<T>& self) {
            auto& px = *self.parents[0];
            auto& pw_ = *self.parents[1];
            std::vector<T> col(static_cast<std::size_t>(K * P));
            std::vector<T> dcol(static_cast<std::size_t>(K * P));
            for (std::int64_t b = 0; b < B; ++b) {
                const T* g = self.grad.data() + b * O * P;
                if (pw_.requires_grad) {
                    opdetail::im2col(px.value.data() + b * C * H * W, C, H, W, kh, kw, sh, sw, ph,
                                     pw, OH, OW, col.data());
                    mm_nt(g, col.data(), pw_.ensure_grad().data(), O, P, K);
                }
                if (px.requires_grad) {
                    std::fill(dcol.begin(), dcol.end(), T(0));
                    mm_tn(pw_.value.data(), g, dcol.data(), O, K, P);
                    opdetail::col2im_add(dcol.data(), C, H, W, kh, kw, sh, sw, ph, pw, OH, OW,
                                         px.ensure_grad().data() + b * C * H * W);
                }
            }
            if (has_bias && self.parents[2]->requires_grad) {
                auto& db = self.parents[2]->ensure_grad();
                for (std::int64_t b = 0; b < B; ++b) {
                    for (std::int64_t o = 0; o < O; ++o) {
                        const T* plane = self.grad.data() + (b * O + o) * P;
                        T s = 0;
                        for (std::int64_t p = 0; p < P; ++p) {
                            s += plane[p];
                        }
                        db[o] += s;
                    }
                }
            }
        });
}

// ---------------------------------------------------------------------------
// normalization

// Running statistics owned by the caller (one pair per layer).
template <class T>
struct RunningStats {
    std::vector<T> mean;
    std::vector<T> var;

    explicit RunningStats(std::int64_t channels = 0)
        : mean(static_cast<std::size_t>(channels), T(0)),
          var(static_cast<std::size_t>(channels), T(1)) {}
};

// x (B,C,H,W); gain/bias (C). Train mode normalizes by batch statistics and
// updates running stats in place (convention: new = (1-momentum)*old +
// momentum*batch, unbiased variance in the running update). Eval mode is a
// pure function of (x, running stats, gain, bias).
template <class T>
TensorT<T> batchnorm2d(const TensorT<T>& x, const TensorT<T>& gain, const TensorT<T>& bias,
                       RunningStats<T>& running, bool train, T momentum = T(0.1),
                       T eps = T(1e-5)) {
    if (x.ndim() != 4) {
        throw ShapeError("batchnorm2d: expected 4-d input, got " + shape_str(x.shape()));
    }
    const std::int64_t B = x.dim(0), C = x.dim(1), H = x.dim(2), W = x.dim(3);
    if (gain.size() != C || bias.size() != C ||
        static_cast<std::int64_t>(running.mean.size()) != C) {
        throw ShapeError("batchnorm2d: gain/bias/running extent does not match " +
                         std::to_string(C) + " channels");
    }
    const std::int64_t HW = H * W;
    const std::int64_t count = B * HW;
    const auto& xv = x.data();
    std::vector<T> xhat(xv.size());
    std::vector<T> inv_std(static_cast<std::size_t>(C));
    std::vector<T> mean(static_cast<std::size_t>(C));
    if (train) {
        for (std::int64_t c = 0; c < C; ++c) {
            double s = 0.0;
            for (std::int64_t b = 0; b < B; ++b) {
                const T* plane = xv.data() + (b * C + c) * HW;
                for (std::int64_t i = 0; i < HW; ++i) {
                    s += plane[i];
                }
            }
            const double mu = s / static_cast<double>(count);
            double v = 0.0;
            for (std::int64_t b = 0; b < B; ++b) {
                const T* plane = xv.data() + (b * C + c) * HW;
                for (std::int64_t i = 0; i < HW; ++i) {
                    const double d = plane[i] - mu;
                    v += d * d;
                }
            }
            const double var = v / static_cast<double>(count);
            mean[c] = static_cast<T>(mu);
            inv_std[c] = static_cast<T>(1.0 / std::sqrt(var + static_cast<double>(eps)));
            const double unbiased = count > 1 ? v / static_cast<double>(count - 1) : var;
            running.mean[c] = (T(1) - momentum) * running.mean[c] + momentum * static_cast<T>(mu);
            running.var[c] =
                (T(1) - momentum) * running.var[c] + momentum * static_cast<T>(unbiased);
        }
    } else {
        for (std::int64_t c = 0; c < C; ++c) {
            mean[c] = running.mean[c];
            inv_std[c] = T(1) / std::sqrt(running.var[c] + eps);
        }
    }
    const auto& gv = gain.data();
    const auto& bv = bias.data();
    std::vector<T> out(xv.size());
    for (std::int64_t b = 0; b < B; ++b) {
        for (std::int64_t c = 0; c < C; ++c) {
            const T* plane = xv.data() + (b * C + c) * HW;
            T* xh = xhat.data() + (b * C + c) * HW;
            T* o = out.data() + (b * C + c) * HW;
            const T mu = mean[c], is = inv_std[c], g = gv[c], bb = bv[c];
            for (std::int64_t i = 0; i < HW; ++i) {
                xh[i] = (plane[i] - mu) * is;
                o[i] = g * xh[i] + bb;
            }
        }
    }
    const bool tape = opdetail::taping<T>({&x, &gain, &bias});
    return opdetail::finish<T>(
        x.shape(), std::move(out), tape, {x, gain, bias},
        [B, C, HW, count, train, xhat = std::move(xhat),
         inv_std = std::move(inv_std)](detail::Node<T>& self) {
            auto& px = *self.parents[0];
            auto& pg = *self.parents[1];
            auto& pb = *self.parents[2];
            const auto& gv = pg.value;
            for (std::int64_t c = 0; c < C; ++c) {
                double sum_g = 0.0, sum_gx = 0.0;
                for (std::int64_t b = 0; b < B; ++b) {
                    const T* g = self.grad.data() + (b * C + c) * HW;
                    const T* xh = xhat.data() + (b * C + c) * HW;
                    for (std::int64_t i = 0; i < HW; ++i) {
                        sum_g += g[i];
                        sum_gx += g[i] * xh[i];
                    }
                }
                if (pg.requires_grad) {
                    pg.ensure_grad()[c] += static_cast<T>(sum_gx);
                }
                if (pb.requires_grad) {
                    pb.ensure_grad()[c] += static_cast<T>(sum_g);
                }
                if (px.requires_grad) {
                    auto& dx = px.ensure_grad();
                    const T k = gv[c] * inv_std[c];
                    if (train) {
                        const T mg = static_cast<T>(sum_g / count);
                        const T mgx = static_cast<T>(sum_gx / count);
                        for (std::int64_t b = 0; b < B; ++b) {
                            const T* g = self.grad.data() + (b * C + c) * HW;
                            const T* xh = xhat.data() + (b * C + c) * HW;
                            T* d = dx.data() + (b * C + c) * HW;
                            for (std::int64_t i = 0; i < HW; ++i) {
                                d[i] += k * (g[i] - mg - xh[i] * mgx);
                            }
                        }
                    } else {
                        for (std::int64_t b = 0; b < B; ++b) {
                            const T* g = self.grad.data() + (b * C + c) * HW;
                            T* d = dx.data() + (b * C + c) * HW;
                            for (std::int64_t i = 0; i < HW; ++i) {
                                d[i] += k * g[i];
                            }
                        }
                    }
                }
            }
        });
}

namespace opdetail {

// Shared layer-norm core over `rows` slices of length `len` with element
// stride `stride` (1 for last-dim, HW for channel norm on NCHW).
template <class T>
TensorT<T> layernorm_impl(const TensorT<T>& x, const TensorT<T>& gain, const TensorT<T>& bias,
                          T eps, std::int64_t rows, std::int64_t len, std::int64_t stride,
                          const std::function<std::int64_t(std::int64_t)>& row_base) {
    const auto& xv = x.data();
    const auto& gv = gain.data();
    const auto& bv = bias.data();
    std::vector<T> out(xv.size());
    std::vector<T> xhat(xv.size());
    std::vector<T> inv_std(static_cast<std::size_t>(rows));
    for (std::int64_t r = 0; r < rows; ++r) {
        const std::int64_t base = row_base(r);
        double s = 0.0;
        for (std::int64_t i = 0; i < len; ++i) {
            s += xv[base + i * stride];
        }
        const double mu = s / static_cast<double>(len);
        double v = 0.0;
        for (std::int64_t i = 0; i < len; ++i) {
            const double d = xv[base + i * stride] - mu;
            v += d * d;
        }
        const T is = static_cast<T>(1.0 / std::sqrt(v / static_cast<double>(len) +
                                                    static_cast<double>(eps)));
        inv_std[r] = is;
        for (std::int64_t i = 0; i < len; ++i) {
            const std::int64_t idx = base + i * stride;
            xhat[idx] = (xv[idx] - static_cast<T>(mu)) * is;
            out[idx] = gv[i] * xhat[idx] + bv[i];
        }
    }
    const bool tape = taping<T>({&x, &gain, &bias});
    return finish<T>(
        x.shape(), std::move(out), tape, {x, gain, bias},
        [rows, len, stride, row_base, xhat = std::move(xhat),
         inv_std = std::move(inv_std)](detail::Node<T>& self) {
            auto& px = *self.parents[0];
            auto& pg = *self.parents[1];
            auto& pb = *self.parents[2];
            const auto& gv = pg.value;
            for (std::int64_t r = 0; r < rows; ++r) {
                const std::int64_t base = row_base(r);
                double sum_gg = 0.0, sum_ggx = 0.0;
                for (std::int64_t i = 0; i < len; ++i) {
                    const std::int64_t idx = base + i * stride;
                    const T gg = self.grad[idx] * gv[i];
                    sum_gg += gg;
                    sum_ggx += gg * xhat[idx];
                }
                if (pg.requires_grad || pb.requires_grad) {
                    for (std::int64_t i = 0; i < len; ++i) {
                        const std::int64_t idx = base + i * stride;
                        if (pg.requires_grad) {
                            pg.ensure_grad()[i] += self.grad[idx] * xhat[idx];
                        }
                        if (pb.requires_grad) {
                            pb.ensure_grad()[i] += self.grad[idx];
                        }
                    }
                }
                if (px.requires_grad) {
                    auto& dx = px.ensure_grad();
                    const T mg = static_cast<T>(sum_gg / len);
                    const T mgx = static_cast<T>(sum_ggx / len);
                    for (std::int64_t i = 0; i < len; ++i) {
                        const std::int64_t idx = base + i * stride;
                        dx[idx] +=
                            inv_std[r] * (self.grad[idx] * gv[i] - mg - xhat[idx] * mgx);
                    }
                }
            }
        });
}

}  // namespace opdetail

// Normalize over the last dimension; gain/bias have that length.
template <class T>
TensorT<T> layernorm(const TensorT<T>& x, const TensorT<T>& gain, const TensorT<T>& bias,
                     T eps = T(1e-5)) {
    const std::int64_t len = x.dim(-1);
    if (gain.size() != len || bias.size() != len) {
        throw ShapeError("layernorm: gain/bias length does not match last extent " +
                         std::to_string(len));
    }
    const std::int64_t rows = x.size() / len;
    return opdetail::layernorm_impl<T>(x, gain, bias, eps, rows, len, 1,
                                       [len](std::int64_t r) { return r * len; });
}

// Normalize over the channel dimension of an NCHW map (stem LN variant).
template <class T>
TensorT<T> layernorm_channels(const TensorT<T>& x, const TensorT<T>& gain, const TensorT<T>& bias,
                              T eps = T(1e-5)) {
    if (x.ndim() != 4) {
        throw ShapeError("layernorm_channels: expected 4-d input, got " + shape_str(x.shape()));
    }
    const std::int64_t B = x.dim(0), C = x.dim(1), HW = x.dim(2) * x.dim(3);
    if (gain.size() != C || bias.size() != C) {
        throw ShapeError("layernorm_channels: gain/bias length does not match " +
                         std::to_string(C) + " channels");
    }
    return opdetail::layernorm_impl<T>(
        x, gain, bias, eps, B * HW, C, HW,
        [C, HW](std::int64_t r) { return (r / HW) * C * HW + (r % HW); });
}

// ---------------------------------------------------------------------------
// softmax / loss

template <class T>
TensorT<T> softmax(const TensorT<T>& x, int axis) {
    const int nd = static_cast<int>(x.ndim());
    if (axis < 0) {
        axis += nd;
    }
    if (axis < 0 || axis >= nd) {
        throw ShapeError("softmax: axis out of range for " + shape_str(x.shape()));
    }
    const std::int64_t len = x.shape()[static_cast<std::size_t>(axis)];
    std::int64_t outer = 1, inner = 1;
    for (int i = 0; i < axis; ++i) {
        outer *= x.shape()[static_cast<std::size_t>(i)];
    }
    for (int i = axis + 1; i < nd; ++i) {
        inner *= x.shape()[static_cast<std::size_t>(i)];
    }
    const auto& xv = x.data();
    std::vector<T> out(xv.size());
    for (std::int64_t o = 0; o < outer; ++o) {
        for (std::int64_t in = 0; in < inner; ++in) {
            const std::int64_t base = o * len * inner + in;
            T mx = xv[base];
            for (std::int64_t i = 1; i < len; ++i) {
                mx = std::max(mx, xv[base + i * inner]);
            }
            T z = 0;
            for (std::int64_t i = 0; i < len; ++i) {
                const T e = std::exp(xv[base + i * inner] - mx);
                out[base + i * inner] = e;
                z += e;
            }
            const T invz = T(1) / z;
            for (std::int64_t i = 0; i < len; ++i) {
                out[base + i * inner] *= invz;
            }
        }
    }
    const bool tape = opdetail::taping<T>({&x});
    return opdetail::finish<T>(
        x.shape(), std::move(out), tape, {x},
        [outer, len, inner](detail::Node<T>& self) {
            auto& px = *self.parents[0];
            if (!px.requires_grad) {
                return;
            }
            auto& dx = px.ensure_grad();
            const auto& p = self.value;
            for (std::int64_t o = 0; o < outer; ++o) {
                for (std::int64_t in = 0; in < inner; ++in) {
                    const std::int64_t base = o * len * inner + in;
                    T dot = 0;
                    for (std::int64_t i = 0; i < len; ++i) {
                        dot += self.grad[base + i * inner] * p[base + i * inner];
                    }
                    for (std::int64_t i = 0; i < len; ++i) {
                        const std::int64_t idx = base + i * inner;
                        dx[idx] += p[idx] * (self.grad[idx] - dot);
                    }
                }
            }
        });
}

// Mean over the batch of -sum(target * log softmax(logits)); targets are
// full distributions whose rows must sum to 1 within 1e-6.
template <class T>
TensorT<T> cross_entropy(const TensorT<T>& logits, const TensorT<T>& targets) {
    if (logits.ndim() != 2 || logits.shape() != targets.shape()) {
        throw ShapeError("cross_entropy: expected matching (B,K) tensors, got " +
                         shape_str(logits.shape()) + " vs " + shape_str(targets.shape()));
    }
    const std::int64_t B = logits.dim(0), K = logits.dim(1);
    const auto& zv = logits.data();
    const auto& tv = targets.data();
    for (std::int64_t b = 0; b < B; ++b) {
        double s = 0.0;
        for (std::int64_t k = 0; k < K; ++k) {
            s += tv[b * K + k];
        }
        if (std::abs(s - 1.0) > 1e-6) {
            throw InputError("cross_entropy: target row " + std::to_string(b) + " sums to " +
                             std::to_string(s) + ", expected 1");
        }
    }
    std::vector<T> probs(zv.size());
    std::vector<T> lse(static_cast<std::size_t>(B));
    double loss = 0.0;
    for (std::int64_t b = 0; b < B; ++b) {
        const T* z = zv.data() + b * K;
        T mx = z[0];
        for (std::int64_t k = 1; k < K; ++k) {
            mx = std::max(mx, z[k]);
        }
        double sum = 0.0;
        for (std::int64_t k = 0; k < K; ++k) {
            sum += std::exp(static_cast<double>(z[k] - mx));
        }
        const double l = mx + std::log(sum);
        lse[b] = static_cast<T>(l);
        for (std::int64_t k = 0; k < K; ++k) {
            probs[b * K + k] = static_cast<T>(std::exp(z[k] - l));
            loss += tv[b * K + k] * (l - z[k]);
        }
    }
    loss /= static_cast<double>(B);
    const bool tape = opdetail::taping<T>({&logits, &targets});
    return opdetail::finish<T>(
        Shape{}, std::vector<T>{static_cast<T>(loss)}, tape, {logits, targets},
        [B, K, probs = std::move(probs), lse = std::move(lse)](detail::Node<T>& self) {
            auto& pz = *self.parents[0];
            auto& pt = *self.parents[1];
            const T g = self.grad[0] / static_cast<T>(B);
            if (pz.requires_grad) {
                auto& dz = pz.ensure_grad();
                const auto& tv = pt.value;
                for (std::size_t i = 0; i < dz.size(); ++i) {
                    dz[i] += g * (probs[i] - tv[i]);
                }
            }
            if (pt.requires_grad) {
                auto& dt = pt.ensure_grad();
                const auto& zv = pz.value;
                for (std::int64_t b = 0; b < B; ++b) {
                    for (std::int64_t k = 0; k < K; ++k) {
                        dt[b * K + k] += g * (lse[b] - zv[b * K + k]);
                    }
                }
            }
        });
}

// ---------------------------------------------------------------------------
// layout ops (pure permutations / gathers)

template <class T>
TensorT<T> reshape(const TensorT<T>& x, Shape shape) {
    if (numel(shape) != x.size()) {
        throw ShapeError("reshape: cannot view " + shape_str(x.shape()) + " as " +
                         shape_str(shape));
    }
    std::vector<T> out(x.data());
    const bool tape = opdetail::taping<T>({&x});
    return opdetail::finish<T>(std::move(shape), std::move(out), tape, {x},
                               [](detail::Node<T>& self) {
                                   opdetail::add_into(*self.parents[0], self.grad);
                               });
}

// (B,C,H,W) -> (B, H*W, C) token layout.
template <class T>
TensorT<T> tokens_from_grid(const TensorT<T>& x) {
    if (x.ndim() != 4) {
        throw ShapeError("tokens_from_grid: expected 4-d input, got " + shape_str(x.shape()));
    }
    const std::int64_t B = x.dim(0), C = x.dim(1), HW = x.dim(2) * x.dim(3);
    const auto& xv = x.data();
    std::vector<T> out(xv.size());
    for (std::int64_t b = 0; b < B; ++b) {
        for (std::int64_t c = 0; c < C; ++c) {
            const T* src = xv.data() + (b * C + c) * HW;
            T* dst = out.data() + b * HW * C + c;
            for (std::int64_t t = 0; t < HW; ++t) {
                dst[t * C] = src[t];
            }
        }
    }
    const bool tape = opdetail::taping<T>({&x});
    return opdetail::finish<T>(
        {B, HW, C}, std::move(out), tape, {x}, [B, C, HW](detail::Node<T>& self) {
            auto& px = *self.parents[0];
            if (!px.requires_grad) {
                return;
            }
            auto& dx = px.ensure_grad();
            for (std::int64_t b = 0; b < B; ++b) {
                for (std::int64_t c = 0; c < C; ++c) {
                    T* dst = dx.data() + (b * C + c) * HW;
                    const T* src = self.grad.data() + b * HW * C + c;
                    for (std::int64_t t = 0; t < HW; ++t) {
                        dst[t] += src[t * C];
                    }
                }
            }
        });
}

// Prepends a learned token (1,1,d) to every sequence: (B,T,d) -> (B,T+1,d).
template <class T>
TensorT<T> prepend_token(const TensorT<T>& x, const TensorT<T>& token) {
    if (x.ndim() != 3 || token.ndim() != 3 || token.dim(0) != 1 || token.dim(1) != 1 ||
        token.dim(2) != x.dim(2)) {
        throw ShapeError("prepend_token: incompatible shapes " + shape_str(x.shape()) + " and " +
                         shape_str(token.shape()));
    }
    const std::int64_t B = x.dim(0), Tn = x.dim(1), d = x.dim(2);
    const auto& xv = x.data();
    const auto& tv = token.data();
    std::vector<T> out(static_cast<std::size_t>(B * (Tn + 1) * d));
    for (std::int64_t b = 0; b < B; ++b) {
        std::copy(tv.begin(), tv.end(), out.begin() + b * (Tn + 1) * d);
        std::copy(xv.begin() + b * Tn * d, xv.begin() + (b + 1) * Tn * d,
                  out.begin() + b * (Tn + 1) * d + d);
    }
    const bool tape = opdetail::taping<T>({&x, &token});
    return opdetail::finish<T>(
        {B, Tn + 1, d}, std::move(out), tape, {x, token}, [B, Tn, d](detail::Node<T>& self) {
            auto& px = *self.parents[0];
            auto& pt = *self.parents[1];
            if (pt.requires_grad) {
                auto& dt = pt.ensure_grad();
                for (std::int64_t b = 0; b < B; ++b) {
                    const T* g = self.grad.data() + b * (Tn + 1) * d;
                    for (std::int64_t i = 0; i < d; ++i) {
                        dt[i] += g[i];
                    }
                }
            }
            if (px.requires_grad) {
                auto& dx = px.ensure_grad();
                for (std::int64_t b = 0; b < B; ++b) {
                    const T* g = self.grad.data() + b * (Tn + 1) * d + d;
                    T* dst = dx.data() + b * Tn * d;
                    for (std::int64_t i = 0; i < Tn * d; ++i) {
                        dst[i] += g[i];
                    }
                }
            }
        });
}

// x (B,T,d) + p (1,T,d) broadcast over the batch.
template <class T>
TensorT<T> add_broadcast0(const TensorT<T>& x, const TensorT<T>& p) {
    if (x.ndim() != 3 || p.ndim() != 3 || p.dim(0) != 1 || p.dim(1) != x.dim(1) ||
        p.dim(2) != x.dim(2)) {
        throw ShapeError("add_broadcast0: incompatible shapes " + shape_str(x.shape()) + " and " +
                         shape_str(p.shape()));
    }
    const std::int64_t B = x.dim(0);
    const std::int64_t R = x.dim(1) * x.dim(2);
    const auto& xv = x.data();
    const auto& pv = p.data();
    std::vector<T> out(xv.size());
    for (std::int64_t b = 0; b < B; ++b) {
        const T* src = xv.data() + b * R;
        T* dst = out.data() + b * R;
        for (std::int64_t i = 0; i < R; ++i) {
            dst[i] = src[i] + pv[i];
        }
    }
    const bool tape = opdetail::taping<T>({&x, &p});
    return opdetail::finish<T>(
        x.shape(), std::move(out), tape, {x, p}, [B, R](detail::Node<T>& self) {
            auto& px = *self.parents[0];
            auto& pp = *self.parents[1];
            if (px.requires_grad) {
                opdetail::add_into(px, self.grad);
            }
            if (pp.requires_grad) {
                auto& dp = pp.ensure_grad();
                for (std::int64_t b = 0; b < B; ++b) {
                    const T* g = self.grad.data() + b * R;
                    for (std::int64_t i = 0; i < R; ++i) {
                        dp[i] += g[i];
                    }
                }
            }
        });
}

// Slice of the last dimension: (..., D) -> (..., len) starting at `start`.
template <class T>
TensorT<T> slice_last(const TensorT<T>& x, std::int64_t start, std::int64_t len) {
    const std::int64_t D = x.dim(-1);
    if (start < 0 || len <= 0 || start + len > D) {
        throw ShapeError("slice_last: range [" + std::to_string(start) + "," +
                         std::to_string(start + len) + ") out of extent " + std::to_string(D));
    }
    const std::int64_t rows = x.size() / D;
    const auto& xv = x.data();
    std::vector<T> out(static_cast<std::size_t>(rows * len));
    for (std::int64_t r = 0; r < rows; ++r) {
        std::copy(xv.begin() + r * D + start, xv.begin() + r * D + start + len,
                  out.begin() + r * len);
    }
    Shape oshape(x.shape());
    oshape.back() = len;
    const bool tape = opdetail::taping<T>({&x});
    return opdetail::finish<T>(std::move(oshape), std::move(out), tape, {x},
                               [rows, D, start, len](detail::Node<T>& self) {
                                   auto& px = *self.parents[0];
                                   if (!px.requires_grad) {
                                       return;
                                   }
                                   auto& dx = px.ensure_grad();
                                   for (std::int64_t r = 0; r < rows; ++r) {
                                       const T* g = self.grad.data() + r * len;
                                       T* dst = dx.data() + r * D + start;
                                       for (std::int64_t i = 0; i < len; ++i) {
                                           dst[i] += g[i];
                                       }
                                   }
                               });
}

// (B,T,d) -> (B*heads, T, d/heads); head dim must divide d.
template <class T>
TensorT<T> to_heads(const TensorT<T>& x, std::int64_t heads) {
    if (x.ndim() != 3 || heads <= 0 || x.dim(2) % heads != 0) {
        throw ShapeError("to_heads: cannot split " + shape_str(x.shape()) + " into " +
                         std::to_string(heads) + " heads");
    }
    const std::int64_t B = x.dim(0), Tn = x.dim(1), d = x.dim(2), hd = d / heads;
    const auto& xv = x.data();
    std::vector<T> out(xv.size());
    for (std::int64_t b = 0; b < B; ++b) {
        for (std::int64_t h = 0; h < heads; ++h) {
            for (std::int64_t t = 0; t < Tn; ++t) {
                const T* src = xv.data() + (b * Tn + t) * d + h * hd;
                T* dst = out.data() + ((b * heads + h) * Tn + t) * hd;
                std::copy(src, src + hd, dst);
            }
        }
    }
    const bool tape = opdetail::taping<T>({&x});
    return opdetail::finish<T>(
        {B * heads, Tn, hd}, std::move(out), tape, {x},
        [B, Tn, d, heads, hd](detail::Node<T>& self) {
            auto& px = *self.parents[0];
            if (!px.requires_grad) {
                return;
            }
            auto& dx = px.ensure_grad();
            for (std::int64_t b = 0; b < B; ++b) {
                for (std::int64_t h = 0; h < heads; ++h) {
                    for (std::int64_t t = 0; t < Tn; ++t) {
                        const T* g = self.grad.data() + ((b * heads + h) * Tn + t) * hd;
                        T* dst = dx.data() + (b * Tn + t) * d + h * hd;
                        for (std::int64_t i = 0; i < hd; ++i) {
                            dst[i] += g[i];
                        }
                    }
                }
            }
        });
}

// Inverse of to_heads: (B*heads, T, hd) -> (B, T, heads*hd).
template <class T>
TensorT<T> from_heads(const TensorT<T>& x, std::int64_t heads) {
    if (x.ndim() != 3 || heads <= 0 || x.dim(0) % heads != 0) {
        throw ShapeError("from_heads: cannot merge " + shape_str(x.shape()) + " from " +
                         std::to_string(heads) + " heads");
    }
    const std::int64_t B = x.dim(0) / heads, Tn = x.dim(1), hd = x.dim(2), d = heads * hd;
    const auto& xv = x.data();
    std::vector<T> out(xv.size());
    for (std::int64_t b = 0; b < B; ++b) {
        for (std::int64_t h = 0; h < heads; ++h) {
            for (std::int64_t t = 0; t < Tn; ++t) {
                const T* src = xv.data() + ((b * heads + h) * Tn + t) * hd;
                T* dst = out.data() + (b * Tn + t) * d + h * hd;
                std::copy(src, src + hd, dst);
            }
        }
    }
    const bool tape = opdetail::taping<T>({&x});
    return opdetail::finish<T>(
        {B, Tn, d}, std::move(out), tape, {x}, [B, Tn, d, heads, hd](detail::Node<T>& self) {
            auto& px = *self.parents[0];
            if (!px.requires_grad) {
                return;
            }
            auto& dx = px.ensure_grad();
            for (std::int64_t b = 0; b < B; ++b) {
                for (std::int64_t h = 0; h < heads; ++h) {
                    for (std::int64_t t = 0; t < Tn; ++t) {
                        const T* g = self.grad.data() + (b * Tn + t) * d + h * hd;
                        T* dst = dx.data() + ((b * heads + h) * Tn + t) * hd;
                        for (std::int64_t i = 0; i < hd; ++i) {
                            dst[i] += g[i];
                        }
                    }
                }
            }
        });
}

// (B,T,d) -> (B,d) picking one token position.
template <class T>
TensorT<T> select_token(const TensorT<T>& x, std::int64_t t) {
    if (x.ndim() != 3 || t < 0 || t >= x.dim(1)) {
        throw ShapeError("select_token: index " + std::to_string(t) + " out of range for " +
                         shape_str(x.shape()));
    }
    const std::int64_t B = x.dim(0), Tn = x.dim(1), d = x.dim(2);
    const auto& xv = x.data();
    std::vector<T> out(static_cast<std::size_t>(B * d));
    for (std::int64_t b = 0; b < B; ++b) {
        std::copy(xv.begin() + (b * Tn + t) * d, xv.begin() + (b * Tn + t) * d + d,
                  out.begin() + b * d);
    }
    const bool tape = opdetail::taping<T>({&x});
    return opdetail::finish<T>({B, d}, std::move(out), tape, {x},
                               [B, Tn, d, t](detail::Node<T>& self) {
                                   auto& px = *self.parents[0];
                                   if (!px.requires_grad) {
                                       return;
                                   }
                                   auto& dx = px.ensure_grad();
                                   for (std::int64_t b = 0; b < B; ++b) {
                                       const T* g = self.grad.data() + b * d;
                                       T* dst = dx.data() + (b * Tn + t) * d;
                                       for (std::int64_t i = 0; i < d; ++i) {
                                           dst[i] += g[i];
                                       }
                                   }
                               });
}

}  // namespace vitstem
