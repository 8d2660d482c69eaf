#pragma once

#include <cmath>
#include <complex>
#include <string>
#include <vector>

#include "ptycho/common.hpp"

namespace ptycho {

using cplx = std::complex<double>;

// Row-major 2D real array.
struct RealField {
    int height = 0;
    int width = 0;
    std::vector<double> data;

    RealField() = default;
    RealField(int h, int w, double fill = 0.0) : height(h), width(w), data(size_t(h) * w, fill) {
        if (h <= 0 || w <= 0)
            throw DimensionError("RealField size must be positive, got " + std::to_string(h) + "x" + std::to_string(w));
    }

    double& at(int r, int c) { return data[size_t(r) * width + c]; }
    double at(int r, int c) const { return data[size_t(r) * width + c]; }
    size_t size() const { return data.size(); }

    bool finite() const {
        for (double v : data)
            if (!std::isfinite(v)) return false;
        return true;
    }
};

// Row-major 2D complex array: objects, probes, exit waves, detector fields.
struct ComplexField {
    int height = 0;
    int width = 0;
    std::vector<cplx> data;

    ComplexField() = default;
    ComplexField(int h, int w, cplx fill = {0.0, 0.0}) : height(h), width(w), data(size_t(h) * w, fill) {
        if (h <= 0 || w <= 0)
            throw DimensionError("ComplexField size must be positive, got " + std::to_string(h) + "x" + std::to_string(w));
    }

    cplx& at(int r, int c) { return data[size_t(r) * width + c]; }
    cplx at(int r, int c) const { return data[size_t(r) * width + c]; }
    size_t size() const { return data.size(); }

    bool finite() const {
        for (const cplx& v : data)
            if (!std::isfinite(v.real()) || !std::isfinite(v.imag())) return false;
        return true;
    }

    double energy() const {
        double s = 0.0;
        for (const cplx& v : data) s += std::norm(v);
        return s;
    }
};

inline RealField amplitude(const ComplexField& f) {
    RealField out(f.height, f.width);
    for (size_t i = 0; i < f.data.size(); ++i) out.data[i] = std::abs(f.data[i]);
    return out;
}

inline RealField intensity(const ComplexField& f) {
    RealField out(f.height, f.width);
    for (size_t i = 0; i < f.data.size(); ++i) out.data[i] = std::norm(f.data[i]);
    return out;
}

inline double sum(const RealField& f) {
    double s = 0.0;
    for (double v : f.data) s += v;
    return s;
}

inline double max_value(const RealField& f) {
    double m = f.data.empty() ? 0.0 : f.data[0];
    for (double v : f.data) m = v > m ? v : m;
    return m;
}

}  // namespace ptycho
