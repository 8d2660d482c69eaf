#pragma once

#include <algorithm>
#include <cmath>
#include <filesystem>
#include <fstream>
#include <string>
#include <vector>

#include "ptycho/epie.hpp"
#include "ptycho/fft.hpp"
#include "ptycho/gan.hpp"
#include "ptycho/optim.hpp"
#include "ptycho/sim.hpp"
#include "ptycho/tensor.hpp"

namespace ptycho {

enum class LossKind { l1_intensity, poisson_nll };
enum class Direction { shallow_first, deep_first };

struct ProgressiveSchedule {
    int steps_per_stage = 800;
    Direction direction = Direction::shallow_first;
    int total_steps = 5600;
};

struct ReconConfig {
    LossKind loss_kind = LossKind::poisson_nll;       // improvement objective
    LossKind init_loss_kind = LossKind::l1_intensity; // latent-search objective
    double lambda1 = 0.0;  // total-variation weight
    double lambda2 = 0.0;  // discriminator-loss weight
    double latent_lr = 0.1;
    int latent_steps = 1000;
    double weight_lr = 1e-4;
    ProgressiveSchedule progressive;
    std::uint64_t seed = 0;
    // Literal reading of the combined objective that wraps the per-pixel
    // Poisson summand in an absolute value; off by default because the plain
    // sum is what the MAP derivation yields.
    bool poisson_abs_debug = false;
};

struct TraceRow {
    int step;
    double data, tv, dl, total;
};

struct ReconResult {
    RealField phase;
    ComplexField object;  // exp(j * phase)
    std::vector<TraceRow> loss_trace;
    std::vector<int> stage_boundaries;
    std::vector<double> latent;
};

// ---- differentiable physics chain ----
//
// The data terms are a single taped op with a hand-derived backward: the loss
// is real and the free variable (the phase image) is real, so the complex
// chain through exp(j phi), the probe product and the orthonormal FFT reduces
// to  grad_phi = Im(conj(x) . sum_i scatter(conj(P) . ifft2(2 gI Psi_i))).
// Per-position partials are computed independently (optionally in parallel)
// and reduced in position order, so results are bitwise thread-independent.

namespace detail {

struct PositionData {
    ComplexField spectrum;  // Psi_i, kept for backward
    double loss = 0.0;
};

inline void check_phase_shape(const nn::Tensor& phase, int n) {
    if (int(phase.numel()) != n * n)
        throw DimensionError("phase tensor has " + std::to_string(phase.numel()) + " elements, stack expects " +
                             std::to_string(n) + "x" + std::to_string(n));
}

}  // namespace detail

// Shared implementation of the Eq.-3-style L1 intensity loss and the Poisson
// negative log-likelihood, differentiable with respect to the phase image.
// The stack and probe must outlive any backward pass through the tape.
inline nn::Tensor data_loss(nn::Tape& tape, const DiffractionStack& stack, const Probe& probe,
                            const nn::Tensor& phase, LossKind kind, bool poisson_abs_debug = false) {
    const int n = stack.pattern.object_size;
    const int m = stack.pattern.probe_size;
    detail::check_phase_shape(phase, n);
    if (probe.field.height != m || probe.field.width != m)
        throw DimensionError("probe is " + std::to_string(probe.field.height) + "x" +
                             std::to_string(probe.field.width) + ", stack expects " + std::to_string(m));
    if (stack.frames.size() != stack.pattern.positions.size())
        throw DimensionError("stack frame count does not match scan pattern");

    const int count = int(stack.frames.size());
    const double eps_log = 1e-12;

    // Object field from the current phase.
    auto object = std::make_shared<ComplexField>(n, n);
    {
        const std::vector<double>& ph = phase.val();
        for (int i = 0; i < n * n; ++i) object->data[i] = cplx(std::cos(ph[i]), std::sin(ph[i]));
    }

    auto per_pos = std::make_shared<std::vector<detail::PositionData>>(count);
    parallel_for(count, [&](int i) {
        const auto& pos = stack.pattern.positions[i];
        ComplexField psi(m, m);
        for (int r = 0; r < m; ++r)
            for (int c = 0; c < m; ++c)
                psi.at(r, c) = probe.field.at(r, c) * object->at(pos.row + r, pos.col + c);
        detail::PositionData& pd = (*per_pos)[i];
        pd.spectrum = fft2(psi);
        const RealField& d = stack.frames[i];
        double loss = 0.0;
        for (int k = 0; k < m * m; ++k) {
            const double inten = std::norm(pd.spectrum.data[k]);
            if (kind == LossKind::l1_intensity) {
                loss += std::abs(d.data[k] - inten);
            } else {
                const double s = std::sqrt(inten);
                const double term = inten - 2.0 * d.data[k] * std::log(s + eps_log);
                loss += poisson_abs_debug ? std::abs(term) : term;
            }
        }
        pd.loss = loss;
    });

    const bool rg = tape.recording && phase.requires_grad();
    nn::Tensor out = nn::Tensor::leaf({1}, rg);
    double total = 0.0;
    for (const auto& pd : *per_pos) total += pd.loss;
    out.val()[0] = total;

    if (rg) {
        auto pi = phase.ptr();
        auto oi = out.ptr();
        const DiffractionStack* stack_p = &stack;
        const Probe* probe_p = &probe;
        tape.record(oi, [pi, oi, object, per_pos, stack_p, probe_p, kind, poisson_abs_debug, n, m, count,
                         eps_log] {
            nn::ensure_grad(pi.get());
            const double gloss = oi->g[0];
            std::vector<ComplexField> grad_windows(count);
            parallel_for(count, [&](int i) {
                const detail::PositionData& pd = (*per_pos)[i];
                const RealField& d = stack_p->frames[i];
                ComplexField grad_spec(m, m);
                for (int k = 0; k < m * m; ++k) {
                    const double inten = std::norm(pd.spectrum.data[k]);
                    double g_i;
                    if (kind == LossKind::l1_intensity) {
                        const double r = d.data[k] - inten;
                        g_i = r > 0.0 ? -1.0 : (r < 0.0 ? 1.0 : 0.0);
                    } else {
                        const double s = std::max(std::sqrt(inten), 1e-150);
                        g_i = 1.0 - d.data[k] / (s * (s + eps_log));
                        if (poisson_abs_debug) {
                            const double term = inten - 2.0 * d.data[k] * std::log(s + eps_log);
                            g_i *= term > 0.0 ? 1.0 : (term < 0.0 ? -1.0 : 0.0);
                        }
                    }
                    grad_spec.data[k] = (gloss * 2.0 * g_i) * pd.spectrum.data[k];
                }
                ComplexField grad_psi = ifft2(grad_spec);
                ComplexField& gw = grad_windows[i];
                gw = ComplexField(m, m);
                for (int k = 0; k < m * m; ++k)
                    gw.data[k] = std::conj(probe_p->field.data[k]) * grad_psi.data[k];
            });
            // Fixed-order reduction: scatter windows by position index, then
            // map the complex object gradient onto the phase.
            ComplexField grad_obj(n, n);
            for (int i = 0; i < count; ++i) {
                const auto& pos = stack_p->pattern.positions[i];
                const ComplexField& gw = grad_windows[i];
                for (int r = 0; r < m; ++r)
                    for (int c = 0; c < m; ++c) grad_obj.at(pos.row + r, pos.col + c) += gw.at(r, c);
            }
            for (int k = 0; k < n * n; ++k) {
                const cplx z = std::conj(object->data[k]) * grad_obj.data[k];
                pi->g[k] += z.imag();
            }
        });
    }
    return out;
}

inline nn::Tensor data_loss_l1(nn::Tape& tape, const DiffractionStack& stack, const Probe& probe,
                               const nn::Tensor& phase) {
    return data_loss(tape, stack, probe, phase, LossKind::l1_intensity);
}

inline nn::Tensor data_loss_poisson(nn::Tape& tape, const DiffractionStack& stack, const Probe& probe,
                                    const nn::Tensor& phase, bool abs_debug = false) {
    return data_loss(tape, stack, probe, phase, LossKind::poisson_nll, abs_debug);
}

// Anisotropic total variation with forward differences, |u| smoothed as
// sqrt(u^2 + 1e-12) - 1e-6 so the op is differentiable everywhere and a
// constant image scores zero. The shift changes no gradients.
inline nn::Tensor tv(nn::Tape& tape, const nn::Tensor& phase) {
    const std::vector<int>& sh = phase.shape();
    int h, w;
    if (sh.size() == 2) {
        h = sh[0];
        w = sh[1];
    } else if (sh.size() == 3 && sh[0] == 1) {
        h = sh[1];
        w = sh[2];
    } else {
        throw DimensionError("tv expects a 2D phase image, got " + phase.shape_str());
    }
    const double eps = 1e-12;
    const double floor_shift = std::sqrt(eps);
    const std::vector<double>& v = phase.val();
    double total = 0.0;
    for (int r = 0; r + 1 < h; ++r)
        for (int c = 0; c < w; ++c) {
            const double u = v[size_t(r + 1) * w + c] - v[size_t(r) * w + c];
            total += std::sqrt(u * u + eps) - floor_shift;
        }
    for (int r = 0; r < h; ++r)
        for (int c = 0; c + 1 < w; ++c) {
            const double u = v[size_t(r) * w + c + 1] - v[size_t(r) * w + c];
            total += std::sqrt(u * u + eps) - floor_shift;
        }
    const bool rg = tape.recording && phase.requires_grad();
    nn::Tensor out = nn::Tensor::leaf({1}, rg);
    out.val()[0] = total;
    if (rg) {
        auto pi = phase.ptr();
        auto oi = out.ptr();
        tape.record(oi, [pi, oi, h, w, eps] {
            nn::ensure_grad(pi.get());
            const double gloss = oi->g[0];
            const std::vector<double>& v = pi->v;
            for (int r = 0; r + 1 < h; ++r)
                for (int c = 0; c < w; ++c) {
                    const double u = v[size_t(r + 1) * w + c] - v[size_t(r) * w + c];
                    const double s = gloss * u / std::sqrt(u * u + eps);
                    pi->g[size_t(r + 1) * w + c] += s;
                    pi->g[size_t(r) * w + c] -= s;
                }
            for (int r = 0; r < h; ++r)
                for (int c = 0; c + 1 < w; ++c) {
                    const double u = v[size_t(r) * w + c + 1] - v[size_t(r) * w + c];
                    const double s = gloss * u / std::sqrt(u * u + eps);
                    pi->g[size_t(r) * w + c + 1] += s;
                    pi->g[size_t(r) * w + c] -= s;
                }
        });
    }
    return out;
}

// Discriminator-loss regularizer log(1 - sigma(D(phase)) + 1e-12); pushes the
// phase toward the trained domain, differentiable through the discriminator.
inline nn::Tensor dl_reg(nn::Tape& tape, const DiscriminatorNet& d, const nn::Tensor& phase) {
    if (int(phase.numel()) != d.image_size * d.image_size)
        throw DimensionError("dl_reg: phase has " + std::to_string(phase.numel()) +
                             " elements, discriminator expects " +
                             std::to_string(d.image_size * d.image_size));
    nn::Tensor img = nn::reshape(tape, phase, {1, d.image_size, d.image_size});
    nn::Tensor score = nn::sigmoid(tape, d.forward(tape, img));
    nn::Tensor shift = nn::Tensor::leaf({1, 1});
    shift.val()[0] = 1.0 + 1e-12;
    nn::Tensor arg = nn::add(tape, nn::scale(tape, score, -1.0), shift);
    return nn::reshape(tape, nn::log(tape, arg), {1});
}

// ---- stage 1: latent search (deep generative prior) ----

namespace detail {

struct TrainabilityGuard {
    std::vector<nn::Tensor> params;
    std::vector<bool> saved;
    template <typename Net>
    explicit TrainabilityGuard(const Net& net) {
        params = net.parameters();
        for (const nn::Tensor& p : params) saved.push_back(p.requires_grad());
    }
    void set_all(bool b) {
        for (nn::Tensor& p : params) p.set_requires_grad(b);
    }
    ~TrainabilityGuard() {
        for (size_t i = 0; i < params.size(); ++i) params[i].set_requires_grad(saved[i]);
    }
};

}  // namespace detail

// Plain gradient descent on the latent vector with the generator weights
// frozen; no regularizers. Returns the best-loss latent seen. A non-finite
// loss restarts from a fresh draw, up to three times.
inline std::vector<double> optimize_latent(const GeneratorNet& g, const DiffractionStack& stack,
                                           const Probe& probe, const ReconConfig& cfg, Rng& rng) {
    detail::TrainabilityGuard guard(g);
    guard.set_all(false);

    std::vector<double> best_z;
    double best_loss = std::numeric_limits<double>::infinity();
    for (int attempt = 0; attempt <= 3; ++attempt) {
        nn::Tensor z = nn::Tensor::leaf({1, g.latent_dim}, true);
        for (double& v : z.val()) v = rng.gaussian();
        bool diverged = false;
        for (int step = 0; step < cfg.latent_steps; ++step) {
            nn::Tape tape;
            nn::Tensor phase = g.forward(tape, z);
            nn::Tensor loss = data_loss(tape, stack, probe, phase, cfg.init_loss_kind, cfg.poisson_abs_debug);
            const double value = loss.item();
            if (!std::isfinite(value)) {
                diverged = true;
                break;
            }
            if (value < best_loss) {
                best_loss = value;
                best_z = z.val();
            }
            z.zero_grad();
            tape.backward(loss);
            const std::vector<double>& grad = z.impl()->g;
            for (size_t k = 0; k < z.val().size(); ++k) z.val()[k] -= cfg.latent_lr * grad[k];
        }
        if (!diverged) {
            // Final candidate after the last update.
            nn::Tape tape;
            tape.recording = false;
            nn::Tensor phase = g.forward(tape, z);
            nn::Tensor loss = data_loss(tape, stack, probe, phase, cfg.init_loss_kind, cfg.poisson_abs_debug);
            if (std::isfinite(loss.item()) && loss.item() < best_loss) {
                best_loss = loss.item();
                best_z = z.val();
            }
            return best_z;
        }
    }
    throw DivergedError("optimize_latent hit non-finite losses in 4 attempts");
}

// ---- stage 2: progressive weight optimization (deep image prior) ----

namespace detail {

inline std::vector<int> stage_layers(int stage, int layer_count, Direction dir) {
    std::vector<int> out;
    // From the 5th stage on, everything trains.
    const int open = stage >= 5 ? layer_count : std::min(stage + 1, layer_count);
    for (int i = 0; i < open; ++i)
        out.push_back(dir == Direction::shallow_first ? i : layer_count - 1 - i);
    return out;
}

struct Snapshot {
    std::vector<double> z;
    std::vector<std::vector<double>> params;
    std::vector<double> phase;
    double total = std::numeric_limits<double>::infinity();
    int step = -1;
};

}  // namespace detail

// Minimizes data + lambda1*TV + lambda2*DL over (z, progressively unfrozen
// generator weights) with Adam. Stages advance every steps_per_stage steps;
// stage s opens layers 0..s in the configured direction, everything from
// stage 5 on. Returns the lowest-total-loss iterate (earliest step wins).
// A non-finite loss halves the learning rate and resumes from the best
// iterate, up to three times.
inline ReconResult progressive_optimize(GeneratorNet& g, const DiscriminatorNet& d,
                                        const std::vector<double>& z_init, const DiffractionStack& stack,
                                        const Probe& probe, const ReconConfig& cfg) {
    const int layer_count = g.layer_count();
    const int n = g.image_size;
    if (stack.pattern.object_size != n)
        throw DimensionError("generator outputs " + std::to_string(n) + ", stack object is " +
                             std::to_string(stack.pattern.object_size));
    if (cfg.lambda1 < 0.0 || cfg.lambda2 < 0.0) throw DomainError("regularizer weights must be nonnegative");

    detail::TrainabilityGuard d_guard(d);
    d_guard.set_all(false);
    detail::TrainabilityGuard g_guard(g);
    g_guard.set_all(false);

    nn::Tensor z = nn::Tensor::leaf({1, g.latent_dim}, true);
    z.val() = z_init;

    std::vector<nn::Tensor> all_params;
    all_params.push_back(z);
    for (const nn::Tensor& p : g.parameters()) all_params.push_back(p);
    nn::Optimizer opt(nn::OptKind::adam, cfg.weight_lr, all_params);

    ReconResult result;
    detail::Snapshot best;
    int halvings = 0;
    int stage = -1;

    auto open_stage = [&](int s) {
        for (int idx : detail::stage_layers(s, layer_count, cfg.progressive.direction)) {
            const bool was_frozen = !g.layers[idx].params[0].requires_grad();
            set_layer_trainable(g, idx, true);
            if (was_frozen)
                for (nn::Tensor& p : g.layers[idx].params) opt.reset_moments(p);
        }
    };

    for (int step = 0; step < cfg.progressive.total_steps; ++step) {
        const int want_stage = step / std::max(1, cfg.progressive.steps_per_stage);
        if (want_stage != stage) {
            stage = want_stage;
            open_stage(stage);
            if (step > 0) result.stage_boundaries.push_back(step);
        }

        nn::Tape tape;
        nn::Tensor phase = nn::reshape(tape, g.forward(tape, z), {n, n});
        nn::Tensor data = data_loss(tape, stack, probe, phase, cfg.loss_kind, cfg.poisson_abs_debug);
        double tv_value = 0.0, dl_value = 0.0;
        nn::Tensor total = data;
        if (cfg.lambda1 > 0.0) {
            nn::Tensor tv_term = tv(tape, phase);
            tv_value = tv_term.item();
            total = nn::add(tape, total, nn::scale(tape, tv_term, cfg.lambda1));
        }
        if (cfg.lambda2 > 0.0) {
            nn::Tensor dl_term = dl_reg(tape, d, phase);
            dl_value = dl_term.item();
            total = nn::add(tape, total, nn::scale(tape, dl_term, cfg.lambda2));
        }
        const double total_value = total.item();

        if (!std::isfinite(total_value)) {
            if (best.step < 0 || ++halvings > 3)
                throw DivergedError("progressive_optimize non-finite total at step " + std::to_string(step));
            z.val() = best.z;
            std::vector<nn::Tensor> g_params = g.parameters();
            for (size_t i = 0; i < g_params.size(); ++i) g_params[i].val() = best.params[i];
            opt.reset_all_moments();
            opt.set_lr(opt.lr() * 0.5);
            continue;
        }

        result.loss_trace.push_back({step, data.item(), tv_value, dl_value, total_value});
        if (total_value < best.total) {
            best.total = total_value;
            best.step = step;
            best.z = z.val();
            best.phase = phase.val();
            best.params.clear();
            for (const nn::Tensor& p : g.parameters()) best.params.push_back(p.val());
        }

        opt.zero_grad();
        tape.backward(total);
        opt.step();
    }

    if (best.step < 0) throw DivergedError("progressive_optimize recorded no finite iterate");
    result.phase = RealField(n, n);
    result.phase.data = best.phase;
    result.object = ComplexField(n, n);
    for (int k = 0; k < n * n; ++k)
        result.object.data[k] = cplx(std::cos(best.phase[k]), std::sin(best.phase[k]));
    result.latent = best.z;
    return result;
}

// ---- full driver ----

inline void save_recon_result(const std::string& dir, const ReconResult& result, const ReconConfig& cfg) {
    std::filesystem::create_directories(dir);
    write_field(dir + "/phase.ptyf", result.phase);
    write_field(dir + "/object.ptyf", result.object);
    {
        std::ofstream trace(dir + "/trace.csv");
        trace << "step,data,tv,dl,total\n";
        trace.precision(17);
        for (const TraceRow& row : result.loss_trace)
            trace << row.step << "," << row.data << "," << row.tv << "," << row.dl << "," << row.total << "\n";
    }
    std::ofstream conf(dir + "/config.txt");
    conf << "loss=" << (cfg.loss_kind == LossKind::poisson_nll ? "poisson" : "l1") << "\n"
         << "init_loss=" << (cfg.init_loss_kind == LossKind::poisson_nll ? "poisson" : "l1") << "\n"
         << "lambda1=" << cfg.lambda1 << "\n"
         << "lambda2=" << cfg.lambda2 << "\n"
         << "latent_lr=" << cfg.latent_lr << "\n"
         << "latent_steps=" << cfg.latent_steps << "\n"
         << "weight_lr=" << cfg.weight_lr << "\n"
         << "stage_len=" << cfg.progressive.steps_per_stage << "\n"
         << "total_steps=" << cfg.progressive.total_steps << "\n"
         << "direction=" << (cfg.progressive.direction == Direction::shallow_first ? "shallow" : "deep") << "\n"
         << "seed=" << cfg.seed << "\n";
}

// Latent search followed by progressive weight optimization, from a stored
// GAN checkpoint. The checkpoint's architecture hash and geometry are
// verified against the stack before any work happens.
inline ReconResult reconstruct(const DiffractionStack& stack, const Probe& probe,
                               const std::string& gan_ckpt_path, const ReconConfig& cfg,
                               const std::string& out_dir = "") {
    GanCheckpoint ckpt = load_gan(gan_ckpt_path);
    if (ckpt.g.image_size != stack.pattern.object_size)
        throw DimensionError("checkpoint generator size " + std::to_string(ckpt.g.image_size) +
                             " does not match object size " + std::to_string(stack.pattern.object_size));
    Rng rng(cfg.seed);
    std::vector<double> z0 = optimize_latent(ckpt.g, stack, probe, cfg, rng);
    ReconResult result = progressive_optimize(ckpt.g, ckpt.d, z0, stack, probe, cfg);
    if (!out_dir.empty()) save_recon_result(out_dir, result, cfg);
    return result;
}

}  // namespace ptycho
