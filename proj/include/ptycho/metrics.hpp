#pragma once

#include <algorithm>
#include <cmath>
#include <fstream>
#include <string>
#include <vector>

#include "ptycho/field.hpp"

namespace ptycho {

struct SsimConfig {
    int window = 11;
    double window_sigma = 1.5;
    double k1 = 0.01;
    double k2 = 0.03;
    double dynamic_range = 1.0;
};

namespace detail {

inline std::vector<double> gaussian_taps(int n, double sigma) {
    std::vector<double> w(n);
    const double c = 0.5 * (n - 1);
    double total = 0.0;
    for (int i = 0; i < n; ++i) {
        w[i] = std::exp(-0.5 * (i - c) * (i - c) / (sigma * sigma));
        total += w[i];
    }
    for (double& v : w) v /= total;
    return w;
}

// Valid-mode separable correlation with a normalized 1D window.
inline RealField filter_valid(const RealField& img, const std::vector<double>& taps) {
    const int k = int(taps.size());
    const int oh = img.height - k + 1, ow = img.width - k + 1;
    RealField rows(img.height, ow);
    for (int r = 0; r < img.height; ++r)
        for (int c = 0; c < ow; ++c) {
            double s = 0.0;
            for (int t = 0; t < k; ++t) s += taps[t] * img.at(r, c + t);
            rows.at(r, c) = s;
        }
    RealField out(oh, ow);
    for (int r = 0; r < oh; ++r)
        for (int c = 0; c < ow; ++c) {
            double s = 0.0;
            for (int t = 0; t < k; ++t) s += taps[t] * rows.at(r + t, c);
            out.at(r, c) = s;
        }
    return out;
}

inline RealField multiply(const RealField& a, const RealField& b) {
    RealField out(a.height, a.width);
    for (size_t i = 0; i < a.data.size(); ++i) out.data[i] = a.data[i] * b.data[i];
    return out;
}

}  // namespace detail

// Mean local SSIM with a Gaussian window, computed over all fully-interior
// window positions.
inline double ssim(const RealField& a, const RealField& b, const SsimConfig& cfg = {}) {
    if (a.height != b.height || a.width != b.width)
        throw DimensionError("ssim: " + std::to_string(a.height) + "x" + std::to_string(a.width) + " vs " +
                             std::to_string(b.height) + "x" + std::to_string(b.width));
    if (a.height < cfg.window || a.width < cfg.window)
        throw DimensionError("ssim: image smaller than the " + std::to_string(cfg.window) + "-px window");
    const std::vector<double> taps = detail::gaussian_taps(cfg.window, cfg.window_sigma);
    const RealField mu_a = detail::filter_valid(a, taps);
    const RealField mu_b = detail::filter_valid(b, taps);
    const RealField e_aa = detail::filter_valid(detail::multiply(a, a), taps);
    const RealField e_bb = detail::filter_valid(detail::multiply(b, b), taps);
    const RealField e_ab = detail::filter_valid(detail::multiply(a, b), taps);
    const double c1 = (cfg.k1 * cfg.dynamic_range) * (cfg.k1 * cfg.dynamic_range);
    const double c2 = (cfg.k2 * cfg.dynamic_range) * (cfg.k2 * cfg.dynamic_range);
    double total = 0.0;
    for (size_t i = 0; i < mu_a.data.size(); ++i) {
        const double ma = mu_a.data[i], mb = mu_b.data[i];
        const double va = e_aa.data[i] - ma * ma;
        const double vb = e_bb.data[i] - mb * mb;
        const double cov = e_ab.data[i] - ma * mb;
        total += ((2.0 * ma * mb + c1) * (2.0 * cov + c2)) / ((ma * ma + mb * mb + c1) * (va + vb + c2));
    }
    return total / double(mu_a.data.size());
}

// Removes the global phase offset so offset-shifted reconstructions score as
// the truth would.
inline RealField align_phase(const RealField& recon, const RealField& truth) {
    if (recon.height != truth.height || recon.width != truth.width)
        throw DimensionError("align_phase: shape mismatch " + std::to_string(recon.height) + "x" +
                             std::to_string(recon.width) + " vs " + std::to_string(truth.height) + "x" +
                             std::to_string(truth.width));
    double mean_diff = 0.0;
    for (size_t i = 0; i < recon.data.size(); ++i) mean_diff += recon.data[i] - truth.data[i];
    mean_diff /= double(recon.data.size());
    RealField out(recon.height, recon.width);
    for (size_t i = 0; i < recon.data.size(); ++i) out.data[i] = recon.data[i] - mean_diff;
    return out;
}

// Phase image of a complex reconstruction. The field is first rotated so its
// mean phasor sits at angle zero, which keeps arg() away from the branch cut
// for objects whose intrinsic phase span is well under 2 pi; the constant
// that rotation removes is restored later by align_phase.
inline RealField extract_phase(const ComplexField& x) {
    cplx mean(0.0, 0.0);
    for (const cplx& v : x.data) mean += v;
    const double beta = std::atan2(mean.imag(), mean.real());
    const cplx rot(std::cos(-beta), std::sin(-beta));
    RealField out(x.height, x.width);
    for (size_t i = 0; i < x.data.size(); ++i) {
        const cplx v = x.data[i] * rot;
        out.data[i] = std::atan2(v.imag(), v.real());
    }
    return out;
}

// 8-bit binary PGM, maxval 255, bytes quantized round-half-up from [0,1].
inline void dump_image(const RealField& f, const std::string& path) {
    std::ofstream out(path, std::ios::binary);
    if (!out) throw IoError("cannot open '" + path + "' for writing");
    out << "P5\n" << f.width << " " << f.height << "\n255\n";
    std::vector<unsigned char> bytes(f.data.size());
    for (size_t i = 0; i < f.data.size(); ++i) {
        const double v = std::clamp(f.data[i], 0.0, 1.0);
        bytes[i] = static_cast<unsigned char>(std::floor(v * 255.0 + 0.5));
    }
    out.write(reinterpret_cast<const char*>(bytes.data()), std::streamsize(bytes.size()));
    if (!out) throw IoError("short write to '" + path + "'");
}

}  // namespace ptycho
