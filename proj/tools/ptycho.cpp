// Command-line driver: simulate | epie | train-gan | reconstruct | evaluate | sweep

#include <CLI11.hpp>

#include <filesystem>
#include <fstream>
#include <iostream>

#include "ptycho/epie.hpp"
#include "ptycho/gan.hpp"
#include "ptycho/metrics.hpp"
#include "ptycho/recon.hpp"
#include "ptycho/sim.hpp"
#include "ptycho/sweep.hpp"

using namespace ptycho;

int main(int argc, char** argv) {
    CLI::App app{"Compressive ptychography: simulation, ePIE baseline, and generative-prior reconstruction"};
    app.require_subcommand(1);

    // ---- simulate ----
    auto* sim_cmd = app.add_subcommand("simulate", "Synthesize a noisy diffraction stack from a procedural phantom");
    int sim_n = 256, sim_probe_diam = 32, sim_step = 16;
    double sim_sigma = 0.0, sim_defocus = 25.0;
    std::uint64_t sim_seed = 7, sim_phantom_seed = 0;
    std::string sim_out;
    sim_cmd->add_option("--n", sim_n, "object size in pixels (power of two)");
    sim_cmd->add_option("--probe-diam", sim_probe_diam, "probe diameter in pixels");
    sim_cmd->add_option("--step", sim_step, "raster step in pixels");
    sim_cmd->add_option("--sigma", sim_sigma, "relative noise level at peak intensity (0 = noiseless)");
    sim_cmd->add_option("--seed", sim_seed, "noise seed");
    sim_cmd->add_option("--phantom-seed", sim_phantom_seed, "phantom seed (defaults to --seed)");
    sim_cmd->add_option("--defocus", sim_defocus, "probe defocus phase at the disk edge, radians");
    sim_cmd->add_option("--out", sim_out, "output directory")->required();

    // ---- epie ----
    auto* epie_cmd = app.add_subcommand("epie", "Baseline ePIE reconstruction of a stored stack");
    std::string epie_data, epie_out = "recon.ptyf";
    double epie_alpha = 1.0;
    int epie_iters = 200;
    std::uint64_t epie_seed = 3;
    epie_cmd->add_option("--data", epie_data, "stack directory from `simulate`")->required();
    epie_cmd->add_option("--alpha", epie_alpha, "update step size in (0,2]");
    epie_cmd->add_option("--iters", epie_iters, "number of epochs");
    epie_cmd->add_option("--seed", epie_seed, "shuffle/init seed");
    epie_cmd->add_option("--out", epie_out, "output object field (.ptyf)");

    // ---- train-gan ----
    auto* gan_cmd = app.add_subcommand("train-gan", "Pretrain the generator/discriminator pair on phantoms");
    int gan_dataset = 2000, gan_epochs = 30, gan_batch = 16, gan_n = 128;
    double gan_lr_g = 2e-4, gan_lr_d = 2e-4;
    std::uint64_t gan_seed = 11;
    std::string gan_out = "gan_ckpt.ptyfz";
    gan_cmd->add_option("--dataset-size", gan_dataset, "number of training phantoms");
    gan_cmd->add_option("--epochs", gan_epochs, "training epochs");
    gan_cmd->add_option("--batch", gan_batch, "batch size");
    gan_cmd->add_option("--n", gan_n, "image size (power of two)");
    gan_cmd->add_option("--lr-g", gan_lr_g, "generator Adam learning rate");
    gan_cmd->add_option("--lr-d", gan_lr_d, "discriminator Adam learning rate");
    gan_cmd->add_option("--seed", gan_seed, "training seed");
    gan_cmd->add_option("--out", gan_out, "checkpoint path");

    // ---- reconstruct ----
    auto* rec_cmd = app.add_subcommand("reconstruct", "Generative-prior reconstruction of a stored stack");
    std::string rec_data, rec_gan = "gan_ckpt.ptyfz", rec_out = "recon_out", rec_loss = "poisson",
                rec_direction = "shallow";
    double rec_l1 = 0.0, rec_l2 = 0.0, rec_latent_lr = 0.1, rec_weight_lr = 1e-4;
    int rec_latent_steps = 1000, rec_total = 5600, rec_stage = 800;
    std::uint64_t rec_seed = 5;
    rec_cmd->add_option("--data", rec_data, "stack directory from `simulate`")->required();
    rec_cmd->add_option("--gan", rec_gan, "GAN checkpoint");
    rec_cmd->add_option("--loss", rec_loss, "data term: poisson | l1");
    rec_cmd->add_option("--lambda1", rec_l1, "total-variation weight");
    rec_cmd->add_option("--lambda2", rec_l2, "discriminator-loss weight");
    rec_cmd->add_option("--latent-steps", rec_latent_steps, "latent search steps");
    rec_cmd->add_option("--latent-lr", rec_latent_lr, "latent SGD learning rate");
    rec_cmd->add_option("--weight-lr", rec_weight_lr, "progressive Adam learning rate");
    rec_cmd->add_option("--total-steps", rec_total, "progressive steps in total");
    rec_cmd->add_option("--stage-len", rec_stage, "steps per progressive stage");
    rec_cmd->add_option("--direction", rec_direction, "unfreeze order: shallow | deep");
    rec_cmd->add_option("--seed", rec_seed, "reconstruction seed");
    rec_cmd->add_option("--out", rec_out, "output directory");

    // ---- evaluate ----
    auto* eval_cmd = app.add_subcommand("evaluate", "Score a reconstructed phase against the truth");
    std::string eval_recon, eval_truth, eval_out = "score.txt";
    eval_cmd->add_option("--recon", eval_recon, "reconstructed phase (.ptyf, real or complex)")->required();
    eval_cmd->add_option("--truth", eval_truth, "ground-truth phase (.ptyf)")->required();
    eval_cmd->add_option("--out", eval_out, "score output file");

    // ---- sweep ----
    auto* sweep_cmd = app.add_subcommand("sweep", "Run an overlap/noise/method grid and emit a CSV");
    std::string sweep_spec_path, sweep_out = "results", sweep_gan = "gan_ckpt.ptyfz";
    sweep_cmd->add_option("--spec", sweep_spec_path, "sweep spec file (key=value lines)")->required();
    sweep_cmd->add_option("--gan", sweep_gan, "GAN checkpoint for proposed methods");
    sweep_cmd->add_option("--out", sweep_out, "output directory");

    CLI11_PARSE(app, argc, argv);

    try {
        if (*sim_cmd) {
            SimBundle bundle;
            Rng phantom_rng(sim_phantom_seed ? sim_phantom_seed : sim_seed);
            bundle.phantom = make_phantom(sim_n, phantom_rng);
            bundle.probe = make_probe(sim_probe_diam, sim_probe_diam, sim_defocus);
            bundle.seed = sim_seed;
            NoiseModel noise{sim_sigma, sim_sigma > 0.0};
            bundle.stack =
                simulate(bundle.phantom, bundle.probe, make_raster(sim_n, sim_probe_diam, sim_step), noise,
                         Rng(sim_seed));
            save_stack(sim_out, bundle);
            std::cout << "wrote " << bundle.stack.frames.size() << " frames (overlap "
                      << bundle.stack.pattern.overlap() << ") to " << sim_out << "\n";
        } else if (*epie_cmd) {
            SimBundle bundle = load_stack(epie_data);
            EpieConfig cfg;
            cfg.alpha = epie_alpha;
            cfg.iterations = epie_iters;
            cfg.seed = epie_seed;
            ComplexField recon = epie_reconstruct(bundle.stack, bundle.probe, cfg);
            write_field(epie_out, recon);
            const RealField aligned = align_phase(extract_phase(recon), bundle.phantom.phase);
            std::cout << "epie done; ssim vs stored phantom = " << ssim(aligned, bundle.phantom.phase) << "\n";
        } else if (*gan_cmd) {
            Rng rng(gan_seed);
            Rng dataset_rng = rng.child(1);
            std::vector<Phantom> dataset = make_phantom_dataset(gan_dataset, gan_n, dataset_rng);
            GanTrainConfig cfg;
            cfg.epochs = gan_epochs;
            cfg.batch_size = gan_batch;
            cfg.lr_g = gan_lr_g;
            cfg.lr_d = gan_lr_d;
            cfg.seed = gan_seed;
            TrainedGan gan = train_gan(dataset, gan_n, cfg);
            save_gan(gan_out, gan.g, gan.d);
            std::ofstream log(gan_out + ".log.csv");
            log << "step,d_loss,g_loss\n";
            for (size_t i = 0; i < gan.log.d_loss.size(); ++i)
                log << i << "," << gan.log.d_loss[i] << "," << gan.log.g_loss[i] << "\n";
            std::cout << "trained " << gan.log.d_loss.size() << " steps; checkpoint at " << gan_out << "\n";
        } else if (*rec_cmd) {
            SimBundle bundle = load_stack(rec_data);
            ReconConfig cfg;
            cfg.loss_kind = rec_loss == "l1" ? LossKind::l1_intensity : LossKind::poisson_nll;
            cfg.lambda1 = rec_l1;
            cfg.lambda2 = rec_l2;
            cfg.latent_steps = rec_latent_steps;
            cfg.latent_lr = rec_latent_lr;
            cfg.weight_lr = rec_weight_lr;
            cfg.progressive.total_steps = rec_total;
            cfg.progressive.steps_per_stage = rec_stage;
            cfg.progressive.direction =
                rec_direction == "deep" ? Direction::deep_first : Direction::shallow_first;
            cfg.seed = rec_seed;
            ReconResult result = reconstruct(bundle.stack, bundle.probe, rec_gan, cfg, rec_out);
            const RealField aligned = align_phase(result.phase, bundle.phantom.phase);
            std::cout << "reconstruction done; ssim vs stored phantom = " << ssim(aligned, bundle.phantom.phase)
                      << "; outputs in " << rec_out << "\n";
        } else if (*eval_cmd) {
            FieldVariant recon_field = read_field(eval_recon);
            RealField phase = std::holds_alternative<RealField>(recon_field)
                                  ? std::get<RealField>(recon_field)
                                  : extract_phase(std::get<ComplexField>(recon_field));
            RealField truth = read_real_field(eval_truth);
            const RealField aligned = align_phase(phase, truth);
            const double score = ssim(aligned, truth);
            std::ofstream out(eval_out);
            out << "# ssim window=11 sigma_w=1.5 k1=0.01 k2=0.03 L=1; global phase offset removed\n";
            out << "ssim=" << std::setprecision(17) << score << "\n";
            std::cout << "ssim=" << score << "\n";
        } else if (*sweep_cmd) {
            SweepSpec spec = parse_sweep_spec(sweep_spec_path);
            std::vector<SweepRow> rows = run_sweep(spec, sweep_gan, sweep_out);
            int failed = 0;
            for (const SweepRow& row : rows)
                if (row.status != "ok") ++failed;
            std::cout << rows.size() << " cells -> " << sweep_out << "/results.csv (" << failed
                      << " failed)\n";
        }
    } catch (const std::exception& e) {
        std::cerr << "error: " << e.what() << "\n";
        return 1;
    }
    return 0;
}
