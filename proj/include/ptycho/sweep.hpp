#pragma once

#include <atomic>
#include <chrono>
#include <cmath>
#include <filesystem>
#include <fstream>
#include <sstream>
#include <string>
#include <thread>
#include <vector>

#include "ptycho/epie.hpp"
#include "ptycho/metrics.hpp"
#include "ptycho/recon.hpp"
#include "ptycho/sim.hpp"

namespace ptycho {

// Experiment grid behind the overlap/noise tables: every (overlap, sigma,
// method, lambda pair, seed) combination becomes one simulate -> reconstruct
// -> align -> ssim cell.
struct SweepSpec {
    std::vector<double> overlaps = {0.75, 0.5, 0.25, 0.0, -0.5};
    std::vector<double> sigmas = {0.0, 0.2, 0.5, 2.0, 5.0};
    std::vector<std::string> methods = {"epie", "proposed"};  // + "proposed_reg"
    std::vector<std::uint64_t> seeds = {1};
    std::vector<double> lambda1 = {3e-3};  // proposed_reg grid
    std::vector<double> lambda2 = {1e-4};
    int object_size = 128;
    int probe_size = 32;
    int probe_diameter = 32;
    double probe_defocus = 25.0;
    // ePIE knobs
    double epie_alpha = 1.0;
    int epie_iters = 200;
    // proposed-method knobs (kept configurable so desk-scale sweeps finish)
    int latent_steps = 1000;
    int stage_len = 800;
    int total_steps = 5600;
    double latent_lr = 0.1;
    double weight_lr = 1e-4;
    int jobs = 1;
    std::uint64_t phantom_seed_base = 0x7E57000000ULL;  // held out from GAN training
};

namespace detail {

inline std::vector<std::string> split_csv(const std::string& s) {
    std::vector<std::string> out;
    std::stringstream ss(s);
    std::string item;
    while (std::getline(ss, item, ',')) {
        if (!item.empty()) out.push_back(item);
    }
    return out;
}

}  // namespace detail

// Flat key=value lines; lists are comma separated. Unknown keys are an error
// so typos fail loudly.
inline SweepSpec parse_sweep_spec(const std::string& path) {
    std::ifstream in(path);
    if (!in) throw IoError("cannot read sweep spec '" + path + "'");
    SweepSpec spec;
    std::string line;
    int line_no = 0;
    while (std::getline(in, line)) {
        ++line_no;
        if (line.empty() || line[0] == '#') continue;
        const auto eq = line.find('=');
        if (eq == std::string::npos)
            throw FormatError("sweep spec line " + std::to_string(line_no) + " is not key=value: " + line, 0);
        const std::string key = line.substr(0, eq);
        const std::string value = line.substr(eq + 1);
        const std::vector<std::string> items = detail::split_csv(value);
        auto as_doubles = [&items] {
            std::vector<double> out;
            for (const std::string& s : items) out.push_back(std::stod(s));
            return out;
        };
        if (key == "overlaps") spec.overlaps = as_doubles();
        else if (key == "sigmas") spec.sigmas = as_doubles();
        else if (key == "methods") spec.methods = items;
        else if (key == "seeds") {
            spec.seeds.clear();
            for (const std::string& s : items) spec.seeds.push_back(std::stoull(s));
        }
        else if (key == "lambda1") spec.lambda1 = as_doubles();
        else if (key == "lambda2") spec.lambda2 = as_doubles();
        else if (key == "n") spec.object_size = std::stoi(value);
        else if (key == "m") spec.probe_size = spec.probe_diameter = std::stoi(value);
        else if (key == "defocus") spec.probe_defocus = std::stod(value);
        else if (key == "epie_alpha") spec.epie_alpha = std::stod(value);
        else if (key == "epie_iters") spec.epie_iters = std::stoi(value);
        else if (key == "latent_steps") spec.latent_steps = std::stoi(value);
        else if (key == "latent_lr") spec.latent_lr = std::stod(value);
        else if (key == "weight_lr") spec.weight_lr = std::stod(value);
        else if (key == "stage_len") spec.stage_len = std::stoi(value);
        else if (key == "total_steps") spec.total_steps = std::stoi(value);
        else if (key == "jobs") spec.jobs = std::stoi(value);
        else throw FormatError("sweep spec line " + std::to_string(line_no) + ": unknown key '" + key + "'", 0);
    }
    if (spec.overlaps.empty() || spec.sigmas.empty() || spec.methods.empty() || spec.seeds.empty())
        throw DomainError("sweep spec lists must be nonempty");
    return spec;
}

struct SweepCell {
    double overlap, sigma;
    std::string method;
    double lambda1, lambda2;
    std::uint64_t seed;
};

struct SweepRow {
    SweepCell cell;
    double ssim = std::nan("");
    double wall_seconds = 0.0;
    std::string status = "ok";
};

inline std::vector<SweepCell> enumerate_cells(const SweepSpec& spec) {
    std::vector<SweepCell> cells;
    for (double overlap : spec.overlaps)
        for (double sigma : spec.sigmas)
            for (const std::string& method : spec.methods) {
                std::vector<std::pair<double, double>> lambdas = {{0.0, 0.0}};
                if (method == "proposed_reg") {
                    lambdas.clear();
                    for (double l1 : spec.lambda1)
                        for (double l2 : spec.lambda2) lambdas.emplace_back(l1, l2);
                } else if (method != "epie" && method != "proposed") {
                    throw DomainError("unknown sweep method '" + method + "'");
                }
                for (auto [l1, l2] : lambdas)
                    for (std::uint64_t seed : spec.seeds) cells.push_back({overlap, sigma, method, l1, l2, seed});
            }
    return cells;
}

// One simulate -> reconstruct -> align -> ssim cell. Throws on failure; the
// driver records the error and keeps going.
inline double run_cell(const SweepSpec& spec, const SweepCell& cell, const std::string& gan_ckpt,
                       const std::string& dump_dir = "") {
    const int step = int(std::lround(spec.probe_size * (1.0 - cell.overlap)));
    if (step < 1) throw DomainError("overlap " + std::to_string(cell.overlap) + " gives step < 1");
    Rng phantom_rng(spec.phantom_seed_base + cell.seed);
    const Phantom phantom = make_phantom(spec.object_size, phantom_rng);
    const Probe probe = make_probe(spec.probe_size, spec.probe_diameter, spec.probe_defocus);
    const ScanPattern pattern = make_raster(spec.object_size, spec.probe_size, step);
    NoiseModel noise{cell.sigma, cell.sigma > 0.0};
    const DiffractionStack stack = simulate(phantom, probe, pattern, noise, Rng(cell.seed));

    RealField recon_phase;
    if (cell.method == "epie") {
        EpieConfig cfg;
        cfg.alpha = spec.epie_alpha;
        cfg.iterations = spec.epie_iters;
        cfg.seed = cell.seed;
        recon_phase = extract_phase(epie_reconstruct(stack, probe, cfg));
    } else {
        ReconConfig cfg;
        cfg.lambda1 = cell.lambda1;
        cfg.lambda2 = cell.lambda2;
        cfg.latent_steps = spec.latent_steps;
        cfg.latent_lr = spec.latent_lr;
        cfg.weight_lr = spec.weight_lr;
        cfg.progressive.steps_per_stage = spec.stage_len;
        cfg.progressive.total_steps = spec.total_steps;
        cfg.seed = cell.seed;
        recon_phase = reconstruct(stack, probe, gan_ckpt, cfg).phase;
    }
    const RealField aligned = align_phase(recon_phase, phantom.phase);
    const double score = ssim(aligned, phantom.phase);
    if (!dump_dir.empty()) {
        std::ostringstream tag;
        tag << cell.method << "_ov" << cell.overlap << "_sg" << cell.sigma << "_l1" << cell.lambda1 << "_l2"
            << cell.lambda2 << "_s" << cell.seed;
        dump_image(aligned, dump_dir + "/" + tag.str() + "_recon.pgm");
        dump_image(phantom.phase, dump_dir + "/" + tag.str() + "_truth.pgm");
    }
    return score;
}

// Bounded worker pool over cells; rows are gathered and written in spec
// order, and a failed cell becomes a NaN row instead of aborting the sweep.
// All columns except wall_seconds are a pure function of (spec, checkpoint).
inline std::vector<SweepRow> run_sweep(const SweepSpec& spec, const std::string& gan_ckpt,
                                       const std::string& out_dir) {
    namespace fs = std::filesystem;
    if (!out_dir.empty()) fs::create_directories(out_dir);
    const std::vector<SweepCell> cells = enumerate_cells(spec);
    std::vector<SweepRow> rows(cells.size());

    std::atomic<size_t> next{0};
    auto worker = [&] {
        for (;;) {
            const size_t i = next.fetch_add(1);
            if (i >= cells.size()) return;
            SweepRow& row = rows[i];
            row.cell = cells[i];
            const auto t0 = std::chrono::steady_clock::now();
            try {
                row.ssim = run_cell(spec, cells[i], gan_ckpt, out_dir);
            } catch (const std::exception& e) {
                row.ssim = std::nan("");
                row.status = std::string("error: ") + e.what();
            }
            row.wall_seconds = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
        }
    };
    const int jobs = std::max(1, spec.jobs);
    if (jobs == 1) {
        worker();
    } else {
        std::vector<std::thread> pool;
        for (int t = 0; t < jobs; ++t) pool.emplace_back(worker);
        for (std::thread& t : pool) t.join();
    }

    if (!out_dir.empty()) {
        std::ofstream csv(out_dir + "/results.csv");
        csv << "# ssim window=11 sigma_w=1.5 k1=0.01 k2=0.03 L=1; phase aligned by global offset\n";
        csv << "overlap,sigma,method,lambda1,lambda2,seed,ssim,wall_seconds,status\n";
        csv.precision(17);
        for (const SweepRow& row : rows) {
            csv << row.cell.overlap << "," << row.cell.sigma << "," << row.cell.method << "," << row.cell.lambda1
                << "," << row.cell.lambda2 << "," << row.cell.seed << "," << row.ssim << "," << row.wall_seconds
                << "," << row.status << "\n";
        }
    }
    return rows;
}

}  // namespace ptycho
