#pragma once

#include <algorithm>
#include <cmath>
#include <numeric>
#include <string>
#include <vector>

#include "ptycho/fft.hpp"
#include "ptycho/rng.hpp"
#include "ptycho/sim.hpp"

namespace ptycho {

struct EpieConfig {
    double alpha = 1.0;  // update step size, (0, 2]
    int iterations = 200;
    bool random_init = false;
    std::uint64_t seed = 0;  // init draw + per-epoch shuffle
    bool shuffle_positions = true;
};

// Eq.-3-style data misfit: sum_i || d_i - |F(P . crop(x,i))|^2 ||_1.
inline double l1_amplitude_loss(const DiffractionStack& stack, const Probe& probe, const ComplexField& x) {
    const int m = probe.field.height;
    double loss = 0.0;
    for (size_t i = 0; i < stack.frames.size(); ++i) {
        const auto& pos = stack.pattern.positions[i];
        ComplexField psi = exit_wave(x, probe, pos.row, pos.col);
        ComplexField big_psi = fft2(psi);
        const RealField& d = stack.frames[i];
        for (int k = 0; k < m * m; ++k) loss += std::abs(d.data[k] - std::norm(big_psi.data[k]));
    }
    return loss;
}

// Replaces the spectrum magnitudes with the measured ones, keeping phases;
// |Psi| is floored at 1e-12 so dark pixels cannot divide by zero.
inline void modulus_project(ComplexField& spectrum, const RealField& measured) {
    if (spectrum.height != measured.height || spectrum.width != measured.width)
        throw DimensionError("modulus_project: spectrum " + std::to_string(spectrum.height) + "x" +
                             std::to_string(spectrum.width) + " vs data " + std::to_string(measured.height) +
                             "x" + std::to_string(measured.width));
    for (size_t k = 0; k < spectrum.data.size(); ++k) {
        const double mag = std::max(std::abs(spectrum.data[k]), 1e-12);
        spectrum.data[k] *= std::sqrt(std::max(measured.data[k], 0.0)) / mag;
    }
}

// Object-only ePIE with the classic update rule: modulus projection in the
// detector plane, then crop(x) += alpha * conj(P)/max|P|^2 * (psi' - psi).
// The probe is known and never updated.
inline ComplexField epie_reconstruct(const DiffractionStack& stack, const Probe& probe, const EpieConfig& cfg) {
    if (stack.frames.empty()) throw DomainError("epie: empty diffraction stack");
    if (stack.frames.size() != stack.pattern.positions.size())
        throw DimensionError("epie: " + std::to_string(stack.frames.size()) + " frames vs " +
                             std::to_string(stack.pattern.positions.size()) + " positions");
    if (!(cfg.alpha > 0.0 && cfg.alpha <= 2.0))
        throw DomainError("epie alpha must be in (0,2], got " + std::to_string(cfg.alpha));
    if (cfg.iterations < 1) throw DomainError("epie iterations must be >= 1");

    const int n = stack.pattern.object_size;
    const int m = probe.field.height;

    ComplexField x(n, n, cplx(1.0, 0.0));
    Rng rng(cfg.seed);
    if (cfg.random_init) {
        for (cplx& v : x.data) {
            const double phase = rng.uniform(0.0, 2.0 * 3.141592653589793238462643383279502884);
            v = cplx(std::cos(phase), std::sin(phase));
        }
    }

    double p_max_sq = 0.0;
    for (const cplx& v : probe.field.data) p_max_sq = std::max(p_max_sq, std::norm(v));
    if (p_max_sq <= 0.0) throw DomainError("epie: probe has zero amplitude");

    std::vector<int> order(stack.frames.size());
    std::iota(order.begin(), order.end(), 0);

    ComplexField psi(m, m), corrected(m, m);
    for (int epoch = 0; epoch < cfg.iterations; ++epoch) {
        if (cfg.shuffle_positions) {
            Rng shuffle_rng = rng.child(std::uint64_t(epoch) + 1);
            for (size_t i = order.size(); i > 1; --i)
                std::swap(order[i - 1], order[shuffle_rng.below(i)]);
        }
        for (int idx : order) {
            const auto& pos = stack.pattern.positions[idx];
            for (int r = 0; r < m; ++r)
                for (int c = 0; c < m; ++c)
                    psi.at(r, c) = probe.field.at(r, c) * x.at(pos.row + r, pos.col + c);
            ComplexField big_psi = fft2(psi);
            modulus_project(big_psi, stack.frames[idx]);
            corrected = ifft2(big_psi);
            const double gain = cfg.alpha / p_max_sq;
            for (int r = 0; r < m; ++r)
                for (int c = 0; c < m; ++c) {
                    const cplx delta = corrected.at(r, c) - psi.at(r, c);
                    x.at(pos.row + r, pos.col + c) += gain * std::conj(probe.field.at(r, c)) * delta;
                }
        }
        if (!x.finite()) throw DivergedError("epie produced non-finite object at epoch " + std::to_string(epoch));
    }
    return x;
}

}  // namespace ptycho
