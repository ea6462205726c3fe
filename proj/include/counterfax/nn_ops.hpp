#pragma once

// Spatial network primitives: conv2d with its two adjoints, max pooling,
// nearest upsampling. The conv trio is closed under differentiation
// (each one's backward is built from the other two), which gives exact
// second derivatives for the discriminator gradient penalty.

#include <memory>

#include "counterfax/tensor.hpp"

namespace counterfax {

namespace convdetail {

struct ConvDims {
    int n, cin, h, w;
    int cout, kh, kw;
    int stride, pad;
    int oh, ow;
    int64_t ck, l;  // cin*kh*kw, oh*ow
};

template <typename T>
ConvDims conv_dims(const Tensor<T>& x, const Tensor<T>& w, int stride, int pad) {
    if (x.ndim() != 4 || w.ndim() != 4) throw ShapeError("conv2d: expected 4-D tensors");
    ConvDims d;
    d.n = x.dim(0);
    d.cin = x.dim(1);
    d.h = x.dim(2);
    d.w = x.dim(3);
    d.cout = w.dim(0);
    d.kh = w.dim(2);
    d.kw = w.dim(3);
    d.stride = stride;
    d.pad = pad;
    if (w.dim(1) != d.cin)
        throw ShapeError("conv2d: input channels " + std::to_string(d.cin) +
                         " do not match kernel channels " + std::to_string(w.dim(1)));
    d.oh = (d.h + 2 * pad - d.kh) / stride + 1;
    d.ow = (d.w + 2 * pad - d.kw) / stride + 1;
    if (d.oh <= 0 || d.ow <= 0) throw ShapeError("conv2d: kernel larger than padded input");
    d.ck = int64_t(d.cin) * d.kh * d.kw;
    d.l = int64_t(d.oh) * d.ow;
    return d;
}

// Patch-major (column-major) packing: the patch matrix is stored as a
// ColMajor (ck x chunk*l) Eigen view, so every patch is contiguous and GEMMs
// run on Eigen's fast all-ColMajor path. `col0` is the first column of this
// sample inside the shared chunk buffer.
template <typename T>
void im2col(const T* x, const ConvDims& d, T* col, int64_t col0) {
    for (int oy = 0; oy < d.oh; ++oy) {
        for (int ox = 0; ox < d.ow; ++ox) {
            T* patch = col + (col0 + int64_t(oy) * d.ow + ox) * d.ck;
            for (int c = 0; c < d.cin; ++c) {
                const T* xc = x + int64_t(c) * d.h * d.w;
                for (int ki = 0; ki < d.kh; ++ki) {
                    int iy = oy * d.stride - d.pad + ki;
                    T* dst = patch + (int64_t(c) * d.kh + ki) * d.kw;
                    if (iy < 0 || iy >= d.h) {
                        for (int kj = 0; kj < d.kw; ++kj) dst[kj] = T(0);
                        continue;
                    }
                    for (int kj = 0; kj < d.kw; ++kj) {
                        int ix = ox * d.stride - d.pad + kj;
                        dst[kj] = (ix >= 0 && ix < d.w) ? xc[int64_t(iy) * d.w + ix] : T(0);
                    }
                }
            }
        }
    }
}

template <typename T>
void col2im_add(const T* col, const ConvDims& d, T* x, int64_t col0) {
    for (int oy = 0; oy < d.oh; ++oy) {
        for (int ox = 0; ox < d.ow; ++ox) {
            const T* patch = col + (col0 + int64_t(oy) * d.ow + ox) * d.ck;
            for (int c = 0; c < d.cin; ++c) {
                T* xc = x + int64_t(c) * d.h * d.w;
                for (int ki = 0; ki < d.kh; ++ki) {
                    int iy = oy * d.stride - d.pad + ki;
                    if (iy < 0 || iy >= d.h) continue;
                    const T* src = patch + (int64_t(c) * d.kh + ki) * d.kw;
                    for (int kj = 0; kj < d.kw; ++kj) {
                        int ix = ox * d.stride - d.pad + kj;
                        if (ix >= 0 && ix < d.w) xc[int64_t(iy) * d.w + ix] += src[kj];
                    }
                }
            }
        }
    }
}

inline int conv_chunk(const ConvDims& d) {
    // Cap the im2col scratch at ~48 MB; fixed for given shapes so results
    // do not depend on batch partitioning.
    int64_t per_sample = d.ck * d.l;
    int64_t budget = int64_t(48) * 1024 * 1024 / int64_t(sizeof(float));
    int chunk = int(std::max<int64_t>(1, budget / std::max<int64_t>(1, per_sample)));
    return std::min(chunk, d.n);
}

// Reused scratch: conv runs thousands of times per training step and fresh
// multi-MB allocations would page-fault on every call.
template <typename T>
std::vector<T>& conv_scratch(int which, size_t n) {
    thread_local std::vector<T> bufs[3];
    auto& b = bufs[which];
    if (b.size() < n) b.resize(n);
    return b;
}

// ---------------------------------------------------------------------------
// Fast path for stride-1 "same" convolutions (odd k, pad = k/2), which is
// every generator conv. Images are repacked once into a zero-padded
// pixel-major layout (channel values of one pixel contiguous), and each of
// the k*k kernel taps becomes one channel-mixing GEMM against a shifted
// view of that buffer. Data moves ~2x instead of the k*k x of im2col.
// ---------------------------------------------------------------------------

inline bool conv_same_applicable(const ConvDims& d) {
    return d.stride == 1 && d.kh == d.kw && d.kh % 2 == 1 && d.pad == d.kh / 2 && d.oh == d.h &&
           d.ow == d.w;
}

/// Pack (n, c, h, w) row-major into a (c x n*hp*wp) ColMajor buffer with
/// p rows/columns of zero padding around each sample.
template <typename T>
void pack_pixel_major(const T* x, int n, int c, int h, int w, int p, T* xp) {
    int hp = h + 2 * p, wp = w + 2 * p;
    int64_t cols_per_sample = int64_t(hp) * wp;
#pragma omp parallel for schedule(static)
    for (int i = 0; i < n; ++i) {
        T* base = xp + int64_t(i) * cols_per_sample * c;
        std::fill_n(base, cols_per_sample * c, T(0));
        for (int ci = 0; ci < c; ++ci) {
            const T* src = x + (int64_t(i) * c + ci) * h * w;
            for (int y = 0; y < h; ++y) {
                T* dst = base + ((int64_t(y + p)) * wp + p) * c + ci;
                const T* row = src + int64_t(y) * w;
                for (int xx = 0; xx < w; ++xx) dst[int64_t(xx) * c] = row[xx];
            }
        }
    }
}

/// Scatter the interior of a (c x n*hp*wp) ColMajor pixel-major buffer back
/// to (n, c, h, w) row-major.
template <typename T>
void unpack_pixel_major(const T* yp, int n, int c, int h, int w, int p, T* out) {
    int hp = h + 2 * p, wp = w + 2 * p;
    int64_t cols_per_sample = int64_t(hp) * wp;
#pragma omp parallel for schedule(static)
    for (int i = 0; i < n; ++i) {
        const T* base = yp + int64_t(i) * cols_per_sample * c;
        for (int ci = 0; ci < c; ++ci) {
            T* dst = out + (int64_t(i) * c + ci) * h * w;
            for (int y = 0; y < h; ++y) {
                const T* srcrow = base + ((int64_t(y + p)) * wp + p) * c + ci;
                T* row = dst + int64_t(y) * w;
                for (int xx = 0; xx < w; ++xx) row[xx] = srcrow[int64_t(xx) * c];
            }
        }
    }
}

enum class SameConvKind { forward, backward_input, backward_weight };

/// Shared shift-GEMM core. For forward / backward_input, `a` is the
/// (n, ca, h, w) input and the result is (n, cb, h, w) written to `out`.
/// For backward_weight, `a` is the forward input, `b` the output gradient,
/// and `out` the (cout, cin, k, k) kernel gradient.
template <typename T>
void conv_same_core(SameConvKind kind, const T* a, int ca, const T* b, int cb, const T* w_kernel,
                    int n, int h, int wd, int k, T* out) {
    using CMat = Eigen::Matrix<T, Eigen::Dynamic, Eigen::Dynamic, Eigen::ColMajor>;
    int p = k / 2;
    int hp = h + 2 * p, wp = wd + 2 * p;
    int64_t npix = int64_t(n) * hp * wp;

    auto& xp = conv_scratch<T>(0, size_t(npix) * ca);
    pack_pixel_major(a, n, ca, h, wd, p, xp.data());
    Eigen::Map<const CMat> XP(xp.data(), ca, npix);

    if (kind == SameConvKind::backward_weight) {
        auto& gp = conv_scratch<T>(1, size_t(npix) * cb);
        pack_pixel_major(b, n, cb, h, wd, p, gp.data());
        Eigen::Map<const CMat> GP(gp.data(), cb, npix);
        // gW[o,c,ki,kj] = sum over pixels of gy[o] * x[c] shifted by the tap.
        CMat GWk(cb, ca);
        for (int ki = 0; ki < k; ++ki) {
            for (int kj = 0; kj < k; ++kj) {
                int64_t off = int64_t(ki - p) * wp + (kj - p);
                int64_t lo = std::max<int64_t>(0, -off);
                int64_t hi = npix - std::max<int64_t>(0, off);
                GWk.noalias() = GP.middleCols(lo, hi - lo) *
                                XP.middleCols(lo + off, hi - lo).transpose();
                for (int o = 0; o < cb; ++o)
                    for (int c = 0; c < ca; ++c)
                        out[((int64_t(o) * ca + c) * k + ki) * k + kj] = GWk(o, c);
            }
        }
        return;
    }

    auto& ypb = conv_scratch<T>(1, size_t(npix) * cb);
    Eigen::Map<CMat> YP(ypb.data(), cb, npix);
    CMat Wk(cb, ca);
    bool first = true;
    for (int ki = 0; ki < k; ++ki) {
        for (int kj = 0; kj < k; ++kj) {
            // forward reads input at (+dy,+dx); backward_input at (-dy,-dx)
            // with the kernel transposed.
            for (int o = 0; o < cb; ++o)
                for (int c = 0; c < ca; ++c)
                    Wk(o, c) = kind == SameConvKind::forward
                                   ? w_kernel[((int64_t(o) * ca + c) * k + ki) * k + kj]
                                   : w_kernel[((int64_t(c) * cb + o) * k + ki) * k + kj];
            int64_t off = int64_t(ki - p) * wp + (kj - p);
            if (kind == SameConvKind::backward_input) off = -off;
            int64_t lo = std::max<int64_t>(0, -off);
            int64_t hi = npix - std::max<int64_t>(0, off);
            if (first) {
                YP.setZero();
                first = false;
            }
            YP.middleCols(lo, hi - lo).noalias() += Wk * XP.middleCols(lo + off, hi - lo);
        }
    }
    unpack_pixel_major(ypb.data(), n, cb, h, wd, p, out);
}

}  // namespace convdetail

template <typename T>
Tensor<T> conv2d_bwd_input(const Tensor<T>& gy, const Tensor<T>& w, int stride, int pad, int in_h,
                           int in_w);
template <typename T>
Tensor<T> conv2d_bwd_weight(const Tensor<T>& x, const Tensor<T>& gy, int stride, int pad, int kh,
                            int kw);

/// x:(N,Cin,H,W) * w:(Cout,Cin,kh,kw) -> (N,Cout,oh,ow). Bias is applied
/// separately via add_bias_channel.
template <typename T>
Tensor<T> conv2d(const Tensor<T>& x, const Tensor<T>& w, int stride, int pad) {
    using namespace convdetail;
    ConvDims d = conv_dims(x, w, stride, pad);
    Shape osh = {d.n, d.cout, d.oh, d.ow};
    std::vector<T> out(size_t(shape_numel(osh)));

    if (conv_same_applicable(d)) {
        conv_same_core(SameConvKind::forward, x.data().data(), d.cin, (const T*)nullptr, d.cout,
                       w.data().data(), d.n, d.h, d.w, d.kh, out.data());
    } else {
        using CMat = Eigen::Matrix<T, Eigen::Dynamic, Eigen::Dynamic, Eigen::ColMajor>;
        const int chunk = conv_chunk(d);
        auto& colbuf = conv_scratch<T>(0, size_t(d.ck) * d.l * chunk);
        auto& ybuf = conv_scratch<T>(1, size_t(d.cout) * d.l * chunk);
        // Kernel repacked ColMajor (cout, ck); it is small.
        CMat Wcm(d.cout, d.ck);
        for (int o = 0; o < d.cout; ++o)
            for (int64_t k = 0; k < d.ck; ++k) Wcm(o, k) = w.data()[size_t(o) * d.ck + k];

        for (int n0 = 0; n0 < d.n; n0 += chunk) {
            int ns = std::min(chunk, d.n - n0);
            int64_t cols = int64_t(ns) * d.l;
#pragma omp parallel for schedule(static)
            for (int i = 0; i < ns; ++i)
                im2col(x.data().data() + int64_t(n0 + i) * d.cin * d.h * d.w, d, colbuf.data(),
                       int64_t(i) * d.l);
            Eigen::Map<const CMat> col(colbuf.data(), d.ck, cols);
            Eigen::Map<CMat> y(ybuf.data(), d.cout, cols);
            y.noalias() = Wcm * col;
#pragma omp parallel for schedule(static)
            for (int i = 0; i < ns; ++i)
                for (int o = 0; o < d.cout; ++o) {
                    const T* src = ybuf.data() + (int64_t(i) * d.l) * d.cout + o;
                    T* dst = out.data() + (int64_t(n0 + i) * d.cout + o) * d.l;
                    for (int64_t k = 0; k < d.l; ++k) dst[k] = src[k * d.cout];
                }
        }
    }

    return detail::make_op<T>("conv2d", osh, std::move(out), {x, w},
                              [x, w, stride, pad](const Tensor<T>& g) {
                                  Tensor<T> gx = conv2d_bwd_input(g, w, stride, pad, x.dim(2), x.dim(3));
                                  Tensor<T> gw = conv2d_bwd_weight(x, g, stride, pad, w.dim(2), w.dim(3));
                                  return std::vector<Tensor<T>>{gx, gw};
                              });
}

/// Adjoint of conv2d w.r.t. its input (a strided transposed convolution).
template <typename T>
Tensor<T> conv2d_bwd_input(const Tensor<T>& gy, const Tensor<T>& w, int stride, int pad, int in_h,
                           int in_w) {
    using namespace convdetail;
    if (gy.ndim() != 4 || w.ndim() != 4) throw ShapeError("conv2d_bwd_input: expected 4-D tensors");
    ConvDims d;
    d.n = gy.dim(0);
    d.cout = w.dim(0);
    d.cin = w.dim(1);
    d.kh = w.dim(2);
    d.kw = w.dim(3);
    d.h = in_h;
    d.w = in_w;
    d.stride = stride;
    d.pad = pad;
    d.oh = gy.dim(2);
    d.ow = gy.dim(3);
    if (gy.dim(1) != d.cout) throw ShapeError("conv2d_bwd_input: channel mismatch");
    d.ck = int64_t(d.cin) * d.kh * d.kw;
    d.l = int64_t(d.oh) * d.ow;

    Shape osh = {d.n, d.cin, d.h, d.w};
    std::vector<T> out(size_t(shape_numel(osh)), T(0));

    if (conv_same_applicable(d)) {
        conv_same_core(SameConvKind::backward_input, gy.data().data(), d.cout, (const T*)nullptr,
                       d.cin, w.data().data(), d.n, d.h, d.w, d.kh, out.data());
    } else {
        using CMat = Eigen::Matrix<T, Eigen::Dynamic, Eigen::Dynamic, Eigen::ColMajor>;
        const int chunk = conv_chunk(d);
        auto& colbuf = conv_scratch<T>(0, size_t(d.ck) * d.l * chunk);
        auto& gybuf = conv_scratch<T>(1, size_t(d.cout) * d.l * chunk);
        CMat Wcm(d.cout, d.ck);
        for (int o = 0; o < d.cout; ++o)
            for (int64_t k = 0; k < d.ck; ++k) Wcm(o, k) = w.data()[size_t(o) * d.ck + k];

        for (int n0 = 0; n0 < d.n; n0 += chunk) {
            int ns = std::min(chunk, d.n - n0);
            int64_t cols = int64_t(ns) * d.l;
#pragma omp parallel for schedule(static)
            for (int i = 0; i < ns; ++i)
                for (int o = 0; o < d.cout; ++o) {
                    const T* src = gy.data().data() + (int64_t(n0 + i) * d.cout + o) * d.l;
                    T* dst = gybuf.data() + (int64_t(i) * d.l) * d.cout + o;
                    for (int64_t k = 0; k < d.l; ++k) dst[k * d.cout] = src[k];
                }
            Eigen::Map<const CMat> gym(gybuf.data(), d.cout, cols);
            Eigen::Map<CMat> col(colbuf.data(), d.ck, cols);
            col.noalias() = Wcm.transpose() * gym;
#pragma omp parallel for schedule(static)
            for (int i = 0; i < ns; ++i)
                col2im_add(colbuf.data(), d, out.data() + int64_t(n0 + i) * d.cin * d.h * d.w,
                           int64_t(i) * d.l);
        }
    }

    int oh = d.oh, ow = d.ow;
    return detail::make_op<T>(
        "conv2d_bwd_input", osh, std::move(out), {gy, w},
        [gy, w, stride, pad, oh, ow](const Tensor<T>& u) {
            Tensor<T> g_gy = conv2d(u, w, stride, pad);
            if (g_gy.dim(2) != oh || g_gy.dim(3) != ow)
                throw ShapeError("conv2d_bwd_input vjp: inconsistent output size");
            Tensor<T> g_w = conv2d_bwd_weight(u, gy, stride, pad, w.dim(2), w.dim(3));
            return std::vector<Tensor<T>>{g_gy, g_w};
        });
}

/// Adjoint of conv2d w.r.t. the kernel.
template <typename T>
Tensor<T> conv2d_bwd_weight(const Tensor<T>& x, const Tensor<T>& gy, int stride, int pad, int kh,
                            int kw) {
    using namespace convdetail;
    if (x.ndim() != 4 || gy.ndim() != 4) throw ShapeError("conv2d_bwd_weight: expected 4-D tensors");
    ConvDims d;
    d.n = x.dim(0);
    d.cin = x.dim(1);
    d.h = x.dim(2);
    d.w = x.dim(3);
    d.cout = gy.dim(1);
    d.kh = kh;
    d.kw = kw;
    d.stride = stride;
    d.pad = pad;
    d.oh = gy.dim(2);
    d.ow = gy.dim(3);
    if (gy.dim(0) != d.n) throw ShapeError("conv2d_bwd_weight: batch mismatch");
    d.ck = int64_t(d.cin) * d.kh * d.kw;
    d.l = int64_t(d.oh) * d.ow;

    Shape osh = {d.cout, d.cin, kh, kw};
    std::vector<T> out(size_t(shape_numel(osh)), T(0));

    if (conv_same_applicable(d)) {
        conv_same_core(SameConvKind::backward_weight, x.data().data(), d.cin, gy.data().data(),
                       d.cout, (const T*)nullptr, d.n, d.h, d.w, d.kh, out.data());
    } else {
        using CMat = Eigen::Matrix<T, Eigen::Dynamic, Eigen::Dynamic, Eigen::ColMajor>;
        const int chunk = conv_chunk(d);
        auto& colbuf = conv_scratch<T>(0, size_t(d.ck) * d.l * chunk);
        auto& gybuf = conv_scratch<T>(1, size_t(d.cout) * d.l * chunk);
        CMat GW = CMat::Zero(d.cout, d.ck);

        for (int n0 = 0; n0 < d.n; n0 += chunk) {
            int ns = std::min(chunk, d.n - n0);
            int64_t cols = int64_t(ns) * d.l;
#pragma omp parallel for schedule(static)
            for (int i = 0; i < ns; ++i) {
                im2col(x.data().data() + int64_t(n0 + i) * d.cin * d.h * d.w, d, colbuf.data(),
                       int64_t(i) * d.l);
                for (int o = 0; o < d.cout; ++o) {
                    const T* src = gy.data().data() + (int64_t(n0 + i) * d.cout + o) * d.l;
                    T* dst = gybuf.data() + (int64_t(i) * d.l) * d.cout + o;
                    for (int64_t k = 0; k < d.l; ++k) dst[k * d.cout] = src[k];
                }
            }
            Eigen::Map<const CMat> gym(gybuf.data(), d.cout, cols);
            Eigen::Map<const CMat> col(colbuf.data(), d.ck, cols);
            GW.noalias() += gym * col.transpose();
        }
        for (int o = 0; o < d.cout; ++o)
            for (int64_t k = 0; k < d.ck; ++k) out[size_t(o) * d.ck + k] = GW(o, k);
    }

    return detail::make_op<T>("conv2d_bwd_weight", osh, std::move(out), {x, gy},
                              [x, gy, stride, pad](const Tensor<T>& u) {
                                  Tensor<T> g_x =
                                      conv2d_bwd_input(gy, u, stride, pad, x.dim(2), x.dim(3));
                                  Tensor<T> g_gy = conv2d(x, u, stride, pad);
                                  return std::vector<Tensor<T>>{g_x, g_gy};
                              });
}

// ---------------------------------------------------------------------------
// Pooling and upsampling
// ---------------------------------------------------------------------------

template <typename T>
Tensor<T> unpool_scatter(const Tensor<T>& g, std::shared_ptr<std::vector<int64_t>> idx, Shape xshape);

/// 2x2 max pooling, stride 2. H and W must be even.
template <typename T>
Tensor<T> maxpool2(const Tensor<T>& x) {
    if (x.ndim() != 4) throw ShapeError("maxpool2: expected (N,C,H,W)");
    int n = x.dim(0), c = x.dim(1), h = x.dim(2), w = x.dim(3);
    if (h % 2 || w % 2) throw ShapeError("maxpool2: spatial dims must be even");
    int oh = h / 2, ow = w / 2;
    Shape osh = {n, c, oh, ow};
    std::vector<T> out(size_t(shape_numel(osh)));
    auto idx = std::make_shared<std::vector<int64_t>>(out.size());
    const auto& xv = x.data();
    for (int nc = 0; nc < n * c; ++nc) {
        const T* xp = xv.data() + int64_t(nc) * h * w;
        T* op = out.data() + int64_t(nc) * oh * ow;
        int64_t* ip = idx->data() + int64_t(nc) * oh * ow;
        for (int oy = 0; oy < oh; ++oy) {
            for (int ox = 0; ox < ow; ++ox) {
                int64_t base = int64_t(2 * oy) * w + 2 * ox;
                int64_t best = base;
                T bv = xp[base];
                for (int dy = 0; dy < 2; ++dy)
                    for (int dx = 0; dx < 2; ++dx) {
                        int64_t k = base + int64_t(dy) * w + dx;
                        if (xp[k] > bv) {
                            bv = xp[k];
                            best = k;
                        }
                    }
                op[int64_t(oy) * ow + ox] = bv;
                ip[int64_t(oy) * ow + ox] = int64_t(nc) * h * w + best;
            }
        }
    }
    Shape xsh = x.shape();
    return detail::make_op<T>("maxpool2", osh, std::move(out), {x}, [idx, xsh](const Tensor<T>& g) {
        return std::vector<Tensor<T>>{unpool_scatter(g, idx, xsh)};
    });
}

template <typename T>
Tensor<T> unpool_scatter(const Tensor<T>& g, std::shared_ptr<std::vector<int64_t>> idx, Shape xshape) {
    std::vector<T> out(size_t(shape_numel(xshape)), T(0));
    const auto& gv = g.data();
    for (size_t k = 0; k < gv.size(); ++k) out[size_t((*idx)[k])] += gv[k];
    Shape gsh = g.shape();
    return detail::make_op<T>("unpool_scatter", std::move(xshape), std::move(out), {g},
                              [idx, gsh](const Tensor<T>& u) {
                                  std::vector<T> gg(size_t(shape_numel(gsh)));
                                  const auto& uv = u.data();
                                  for (size_t k = 0; k < gg.size(); ++k) gg[k] = uv[size_t((*idx)[k])];
                                  return std::vector<Tensor<T>>{Tensor<T>::from(gsh, std::move(gg))};
                              });
}

template <typename T>
Tensor<T> sumpool2(const Tensor<T>& x);

/// Nearest-neighbor 2x upsampling.
template <typename T>
Tensor<T> upsample_nearest2(const Tensor<T>& x) {
    if (x.ndim() != 4) throw ShapeError("upsample_nearest2: expected (N,C,H,W)");
    int n = x.dim(0), c = x.dim(1), h = x.dim(2), w = x.dim(3);
    Shape osh = {n, c, 2 * h, 2 * w};
    std::vector<T> out(size_t(shape_numel(osh)));
    const auto& xv = x.data();
    for (int nc = 0; nc < n * c; ++nc) {
        const T* xp = xv.data() + int64_t(nc) * h * w;
        T* op = out.data() + int64_t(nc) * 4 * h * w;
        for (int y = 0; y < h; ++y)
            for (int x2 = 0; x2 < w; ++x2) {
                T v = xp[int64_t(y) * w + x2];
                op[int64_t(2 * y) * 2 * w + 2 * x2] = v;
                op[int64_t(2 * y) * 2 * w + 2 * x2 + 1] = v;
                op[int64_t(2 * y + 1) * 2 * w + 2 * x2] = v;
                op[int64_t(2 * y + 1) * 2 * w + 2 * x2 + 1] = v;
            }
    }
    return detail::make_op<T>("upsample_nearest2", osh, std::move(out), {x},
                              [](const Tensor<T>& g) {
                                  return std::vector<Tensor<T>>{sumpool2(g)};
                              });
}

/// Sum over 2x2 blocks (adjoint of nearest upsampling).
template <typename T>
Tensor<T> sumpool2(const Tensor<T>& x) {
    if (x.ndim() != 4) throw ShapeError("sumpool2: expected (N,C,H,W)");
    int n = x.dim(0), c = x.dim(1), h = x.dim(2), w = x.dim(3);
    if (h % 2 || w % 2) throw ShapeError("sumpool2: spatial dims must be even");
    Shape osh = {n, c, h / 2, w / 2};
    std::vector<T> out(size_t(shape_numel(osh)));
    const auto& xv = x.data();
    for (int nc = 0; nc < n * c; ++nc) {
        const T* xp = xv.data() + int64_t(nc) * h * w;
        T* op = out.data() + int64_t(nc) * (h / 2) * (w / 2);
        for (int y = 0; y < h / 2; ++y)
            for (int x2 = 0; x2 < w / 2; ++x2)
                op[int64_t(y) * (w / 2) + x2] = xp[int64_t(2 * y) * w + 2 * x2] +
                                                xp[int64_t(2 * y) * w + 2 * x2 + 1] +
                                                xp[int64_t(2 * y + 1) * w + 2 * x2] +
                                                xp[int64_t(2 * y + 1) * w + 2 * x2 + 1];
    }
    return detail::make_op<T>("sumpool2", osh, std::move(out), {x}, [](const Tensor<T>& g) {
        return std::vector<Tensor<T>>{upsample_nearest2(g)};
    });
}

}  // namespace counterfax
