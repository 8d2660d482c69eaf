#pragma once

#include <algorithm>
#include <cmath>
#include <filesystem>
#include <fstream>
#include <map>
#include <string>
#include <vector>

#include "ptycho/fft.hpp"
#include "ptycho/field.hpp"
#include "ptycho/ptyf.hpp"
#include "ptycho/rng.hpp"

namespace ptycho {

// Phase-only test object: unit amplitude, phase in [0, 1] radians.
struct Phantom {
    RealField phase;
    std::string label;
};

struct Probe {
    ComplexField field;
    int diameter_px = 0;
};

struct ScanPattern {
    struct Pos {
        int row, col;
    };
    std::vector<Pos> positions;
    int step_px = 0;
    int probe_size = 0;   // M
    int object_size = 0;  // N

    double overlap() const { return double(probe_size - step_px) / probe_size; }
};

struct NoiseModel {
    double sigma = 0.0;  // relative std at the peak-intensity pixel
    bool enabled = false;
};

struct DiffractionStack {
    std::vector<RealField> frames;
    ScanPattern pattern;
    NoiseModel noise;
};

inline ComplexField make_object(const Phantom& ph) {
    for (double v : ph.phase.data)
        if (v < 0.0 || v > 1.0 || !std::isfinite(v))
            throw DomainError("phantom phase must lie in [0,1], got " + std::to_string(v));
    ComplexField x(ph.phase.height, ph.phase.width);
    for (size_t i = 0; i < x.data.size(); ++i)
        x.data[i] = cplx(std::cos(ph.phase.data[i]), std::sin(ph.phase.data[i]));
    return x;
}

// Raised-cosine-edged disk (edge width 2 px) with quadratic defocus phase,
// normalized to unit total energy. Stand-in for a measured probe.
inline Probe make_probe(int m, int diameter_px, double defocus) {
    if (diameter_px > m)
        throw DimensionError("probe diameter " + std::to_string(diameter_px) + " exceeds window " +
                             std::to_string(m));
    if (diameter_px < 4) throw DimensionError("probe diameter must be at least 4 px");
    Probe p;
    p.diameter_px = diameter_px;
    p.field = ComplexField(m, m);
    const double center = 0.5 * (m - 1);
    const double radius = 0.5 * diameter_px;
    const double edge = 2.0;
    const double pi = 3.141592653589793238462643383279502884;
    double energy = 0.0;
    for (int r = 0; r < m; ++r) {
        for (int c = 0; c < m; ++c) {
            const double dr = r - center;
            const double dc = c - center;
            const double rad = std::sqrt(dr * dr + dc * dc);
            double amp = 0.0;
            if (rad <= radius - edge)
                amp = 1.0;
            else if (rad < radius)
                amp = 0.5 * (1.0 + std::cos(pi * (rad - (radius - edge)) / edge));
            const double phase = defocus * (rad / radius) * (rad / radius);
            p.field.at(r, c) = amp * cplx(std::cos(phase), std::sin(phase));
            energy += amp * amp;
        }
    }
    const double scale = 1.0 / std::sqrt(energy);
    for (cplx& v : p.field.data) v *= scale;
    return p;
}

// Raster grid of top-left probe anchors, row-major. Negative overlap
// (step > M) just leaves unilluminated gaps between windows.
inline ScanPattern make_raster(int object_size, int probe_size, int step_px) {
    if (step_px < 1) throw DomainError("step must be >= 1, got " + std::to_string(step_px));
    if (probe_size > object_size)
        throw DimensionError("probe " + std::to_string(probe_size) + " larger than object " +
                             std::to_string(object_size));
    ScanPattern pat;
    pat.step_px = step_px;
    pat.probe_size = probe_size;
    pat.object_size = object_size;
    for (int r = 0; r + probe_size <= object_size; r += step_px)
        for (int c = 0; c + probe_size <= object_size; c += step_px)
            pat.positions.push_back({r, c});
    if (pat.positions.empty()) throw DomainError("scan pattern has no valid position");
    return pat;
}

inline ComplexField crop(const ComplexField& x, int row, int col, int m) {
    if (row < 0 || col < 0 || row + m > x.height || col + m > x.width)
        throw DimensionError("crop window [" + std::to_string(row) + "," + std::to_string(col) + ")+" +
                             std::to_string(m) + " outside " + std::to_string(x.height) + "x" +
                             std::to_string(x.width));
    ComplexField out(m, m);
    for (int r = 0; r < m; ++r)
        for (int c = 0; c < m; ++c) out.at(r, c) = x.at(row + r, col + c);
    return out;
}

inline ComplexField exit_wave(const ComplexField& x, const Probe& p, int row, int col) {
    const int m = p.field.height;
    ComplexField psi = crop(x, row, col, m);
    for (size_t i = 0; i < psi.data.size(); ++i) psi.data[i] *= p.field.data[i];
    return psi;
}

inline RealField diffract(const ComplexField& psi) { return intensity(fft2(psi)); }

// Scaled-Poisson detector noise. kappa maps intensities to expected photon
// counts so that the relative std at a peak-valued pixel equals sigma.
inline RealField add_poisson_noise(const RealField& d, const NoiseModel& noise, double i_peak, Rng& rng) {
    if (!noise.enabled || noise.sigma == 0.0) return d;
    if (!(i_peak > 0.0)) throw DomainError("peak intensity must be positive, got " + std::to_string(i_peak));
    const double kappa = 1.0 / (noise.sigma * noise.sigma * i_peak);
    RealField out(d.height, d.width);
    for (size_t i = 0; i < d.data.size(); ++i) {
        if (d.data[i] < 0.0) throw DomainError("negative intensity " + std::to_string(d.data[i]));
        out.data[i] = double(rng.poisson(d.data[i] * kappa)) / kappa;
    }
    return out;
}

// Full forward model: noiseless frames first (their global maximum fixes the
// photon budget), then per-frame noise from seed-split child generators.
inline DiffractionStack simulate(const Phantom& ph, const Probe& p, const ScanPattern& pat,
                                 const NoiseModel& noise, const Rng& rng) {
    const ComplexField x = make_object(ph);
    const int n = int(pat.positions.size());
    DiffractionStack stack;
    stack.pattern = pat;
    stack.noise = noise;
    stack.frames.resize(n);
    parallel_for(n, [&](int i) {
        stack.frames[i] = diffract(exit_wave(x, p, pat.positions[i].row, pat.positions[i].col));
    });
    if (noise.enabled && noise.sigma > 0.0) {
        double i_peak = 0.0;
        for (const RealField& f : stack.frames) i_peak = std::max(i_peak, max_value(f));
        parallel_for(n, [&](int i) {
            Rng child = rng.child(std::uint64_t(i));
            stack.frames[i] = add_poisson_noise(stack.frames[i], noise, i_peak, child);
        });
    }
    return stack;
}

namespace detail {

inline void add_gaussian_bump(RealField& img, double cy, double cx, double sigma, double height) {
    const double inv = 1.0 / (2.0 * sigma * sigma);
    for (int r = 0; r < img.height; ++r) {
        const double dy = r - cy;
        for (int c = 0; c < img.width; ++c) {
            const double dx = c - cx;
            img.at(r, c) += height * std::exp(-(dy * dy + dx * dx) * inv);
        }
    }
}

// Even-odd crossing test; vertices ordered by angle so the polygon is simple.
inline bool point_in_polygon(double y, double x, const std::vector<std::pair<double, double>>& v) {
    bool inside = false;
    for (size_t i = 0, j = v.size() - 1; i < v.size(); j = i++) {
        const auto& [yi, xi] = v[i];
        const auto& [yj, xj] = v[j];
        if ((yi > y) != (yj > y) && x < (xj - xi) * (y - yi) / (yj - yi) + xi) inside = !inside;
    }
    return inside;
}

inline void paint_polygon(RealField& img, Rng& rng) {
    const int n = img.height;
    const double cy = rng.uniform(0.2 * n, 0.8 * n);
    const double cx = rng.uniform(0.2 * n, 0.8 * n);
    const int nv = 3 + int(rng.below(4));
    std::vector<double> angles(nv);
    for (double& a : angles) a = rng.uniform(0.0, 2.0 * 3.141592653589793238462643383279502884);
    std::sort(angles.begin(), angles.end());
    std::vector<std::pair<double, double>> verts(nv);
    for (int i = 0; i < nv; ++i) {
        const double rad = rng.uniform(n / 12.0, n / 5.0);
        verts[i] = {cy + rad * std::sin(angles[i]), cx + rad * std::cos(angles[i])};
    }
    const double value = rng.uniform(0.15, 0.75);
    for (int r = 0; r < img.height; ++r)
        for (int c = 0; c < img.width; ++c)
            if (point_in_polygon(double(r), double(c), verts)) img.at(r, c) = value;
}

}  // namespace detail

// Procedural in-domain family: 3-8 smooth Gaussian bumps (centers anywhere in
// the frame, widths N/16..N/5, heights 0.25..0.8) composed additively, then
// 1-3 constant-phase polygons (star polygons, 3-6 vertices, radii N/12..N/5,
// levels 0.15..0.75) painted over them, clamped to [0,1]. Fixed parameters
// keep the domain narrow enough for a small GAN to learn.
inline Phantom make_phantom(int n, Rng& rng, const std::string& label = "") {
    Phantom ph;
    ph.phase = RealField(n, n, 0.05);
    ph.label = label;
    const int bumps = 3 + int(rng.below(6));
    for (int b = 0; b < bumps; ++b) {
        const double cy = rng.uniform(0.0, double(n));
        const double cx = rng.uniform(0.0, double(n));
        const double sigma = rng.uniform(n / 16.0, n / 5.0);
        const double height = rng.uniform(0.25, 0.8);
        detail::add_gaussian_bump(ph.phase, cy, cx, sigma, height);
    }
    const int polys = 1 + int(rng.below(3));
    for (int q = 0; q < polys; ++q) detail::paint_polygon(ph.phase, rng);
    for (double& v : ph.phase.data) v = std::clamp(v, 0.0, 1.0);
    return ph;
}

inline std::vector<Phantom> make_phantom_dataset(int count, int n, Rng& rng) {
    if (count < 1) throw DomainError("dataset count must be >= 1");
    std::vector<Phantom> out;
    out.reserve(count);
    for (int i = 0; i < count; ++i) {
        Rng child = rng.child(std::uint64_t(i));
        out.push_back(make_phantom(n, child, "phantom-" + std::to_string(i)));
    }
    return out;
}

// ---- on-disk stack layout: meta.txt + frame_%05d.ptyf + probe.ptyf + phantom.ptyf ----

struct SimBundle {
    DiffractionStack stack;
    Probe probe;
    Phantom phantom;
    std::uint64_t seed = 0;
};

inline void save_stack(const std::string& dir, const SimBundle& bundle) {
    namespace fs = std::filesystem;
    fs::create_directories(dir);
    const ScanPattern& pat = bundle.stack.pattern;
    {
        std::ofstream meta(dir + "/meta.txt");
        if (!meta) throw IoError("cannot write " + dir + "/meta.txt");
        meta << "N=" << pat.object_size << "\n"
             << "M=" << pat.probe_size << "\n"
             << "step_px=" << pat.step_px << "\n"
             << "sigma=" << bundle.stack.noise.sigma << "\n"
             << "seed=" << bundle.seed << "\n"
             << "overlap=" << pat.overlap() << "\n"
             << "count=" << bundle.stack.frames.size() << "\n";
    }
    char name[48];
    for (size_t i = 0; i < bundle.stack.frames.size(); ++i) {
        std::snprintf(name, sizeof(name), "/frame_%05zu.ptyf", i);
        write_field(dir + name, bundle.stack.frames[i]);
    }
    write_field(dir + "/probe.ptyf", bundle.probe.field);
    write_field(dir + "/phantom.ptyf", bundle.phantom.phase);
}

inline SimBundle load_stack(const std::string& dir) {
    std::ifstream meta(dir + "/meta.txt");
    if (!meta) throw IoError("cannot read " + dir + "/meta.txt");
    std::map<std::string, std::string> kv;
    std::string line;
    while (std::getline(meta, line)) {
        const auto eq = line.find('=');
        if (eq != std::string::npos) kv[line.substr(0, eq)] = line.substr(eq + 1);
    }
    for (const char* key : {"N", "M", "step_px", "sigma", "seed", "count"})
        if (!kv.count(key)) throw FormatError("meta.txt missing key '" + std::string(key) + "'", 0);

    SimBundle bundle;
    const int n = std::stoi(kv["N"]);
    const int m = std::stoi(kv["M"]);
    bundle.seed = std::stoull(kv["seed"]);
    bundle.stack.pattern = make_raster(n, m, std::stoi(kv["step_px"]));
    bundle.stack.noise.sigma = std::stod(kv["sigma"]);
    bundle.stack.noise.enabled = bundle.stack.noise.sigma > 0.0;
    const size_t count = std::stoull(kv["count"]);
    if (count != bundle.stack.pattern.positions.size())
        throw FormatError("meta count " + kv["count"] + " does not match raster of " +
                              std::to_string(bundle.stack.pattern.positions.size()) + " positions",
                          0);
    char name[48];
    bundle.stack.frames.resize(count);
    for (size_t i = 0; i < count; ++i) {
        std::snprintf(name, sizeof(name), "/frame_%05zu.ptyf", i);
        bundle.stack.frames[i] = read_real_field(dir + name);
    }
    bundle.probe.field = read_complex_field(dir + "/probe.ptyf");
    bundle.probe.diameter_px = m;
    bundle.phantom.phase = read_real_field(dir + "/phantom.ptyf");
    bundle.phantom.label = dir;
    return bundle;
}

}  // namespace ptycho
