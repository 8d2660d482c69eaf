#pragma once

#include <cmath>
#include <map>
#include <vector>

#include "ptycho/field.hpp"

namespace ptycho {

namespace detail {

inline bool is_pow2(int n) { return n > 0 && (n & (n - 1)) == 0; }

// Roots e^{-2*pi*i*k/n}, k < n/2, cached per transform size.
inline const std::vector<cplx>& twiddles(int n) {
    thread_local std::map<int, std::vector<cplx>> cache;
    auto it = cache.find(n);
    if (it != cache.end()) return it->second;
    std::vector<cplx> w(n / 2);
    const double step = -2.0 * 3.141592653589793238462643383279502884 / n;
    for (int k = 0; k < n / 2; ++k) w[k] = cplx(std::cos(step * k), std::sin(step * k));
    return cache.emplace(n, std::move(w)).first->second;
}

// In-place iterative radix-2 transform, unscaled.
inline void fft_inplace(cplx* a, int n, bool inverse) {
    for (int i = 1, j = 0; i < n; ++i) {
        int bit = n >> 1;
        for (; j & bit; bit >>= 1) j ^= bit;
        j ^= bit;
        if (i < j) std::swap(a[i], a[j]);
    }
    const std::vector<cplx>& w = twiddles(n);
    for (int len = 2; len <= n; len <<= 1) {
        const int half = len >> 1;
        const int stride = n / len;
        for (int i = 0; i < n; i += len) {
            for (int k = 0; k < half; ++k) {
                cplx tw = w[size_t(k) * stride];
                if (inverse) tw = std::conj(tw);
                const cplx u = a[i + k];
                const cplx v = a[i + k + half] * tw;
                a[i + k] = u + v;
                a[i + k + half] = u - v;
            }
        }
    }
}

inline void fft2_impl(const ComplexField& in, ComplexField& out, bool inverse) {
    const int m = in.height;
    if (in.height != in.width)
        throw DimensionError("fft2 requires a square field, got " + std::to_string(in.height) + "x" +
                             std::to_string(in.width));
    if (!is_pow2(m))
        throw DimensionError("fft2 requires a power-of-two size, got " + std::to_string(m));
    out = in;
    for (int r = 0; r < m; ++r) fft_inplace(out.data.data() + size_t(r) * m, m, inverse);
    std::vector<cplx> col(m);
    for (int c = 0; c < m; ++c) {
        for (int r = 0; r < m; ++r) col[r] = out.at(r, c);
        fft_inplace(col.data(), m, inverse);
        for (int r = 0; r < m; ++r) out.at(r, c) = col[r];
    }
    // Orthonormal convention: 1/sqrt(m) per 1D pass, applied once as 1/m.
    const double scale = 1.0 / m;
    for (cplx& v : out.data) v *= scale;
}

}  // namespace detail

// Orthonormal 2D DFT; preserves total energy (Parseval holds exactly up to
// rounding). Square power-of-two inputs only.
inline ComplexField fft2(const ComplexField& f) {
    ComplexField out;
    detail::fft2_impl(f, out, false);
    return out;
}

// Exact inverse of fft2 under the same orthonormal convention.
inline ComplexField ifft2(const ComplexField& f) {
    ComplexField out;
    detail::fft2_impl(f, out, true);
    return out;
}

}  // namespace ptycho
