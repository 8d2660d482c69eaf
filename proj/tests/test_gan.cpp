#include <catch2/catch_amalgamated.hpp>

#include <filesystem>
#include <fstream>

#include "ptycho/gan.hpp"
#include "ptycho/recon.hpp"
#include "ptycho/sim.hpp"

#include "oracle.hpp"

using namespace ptycho;

namespace {

std::vector<double> random_latent(int k, Rng& rng) {
    std::vector<double> z(k);
    for (double& v : z) v = rng.gaussian();
    return z;
}

double field_tv(const RealField& f) {
    nn::Tape tape;
    tape.recording = false;
    nn::Tensor t = nn::Tensor::leaf({f.height, f.width});
    t.val() = f.data;
    return tv(tape, t).item();
}

// Trained once, shared by the slow checks below.
const TrainedGan& trained() {
    static TrainedGan gan = [] {
        Rng rng(404);
        std::vector<Phantom> dataset = make_phantom_dataset(512, 64, rng);
        GanTrainConfig cfg;
        cfg.epochs = 10;
        cfg.batch_size = 16;
        cfg.seed = 12;
        cfg.lr_g = 1e-4;
        cfg.lr_d = 4e-4;  // D needs a head start to stay calibrated
        return train_gan(dataset, 64, cfg);
    }();
    return gan;
}

}  // namespace

TEST_CASE("generate is deterministic, in range, and nonconstant") {
    Rng rng(7);
    GeneratorNet g = GeneratorNet::create(32, 64, rng);
    Rng zr(9);
    const std::vector<double> z = random_latent(64, zr);
    RealField a = generate(g, z);
    RealField b = generate(g, z);
    CHECK(a.data == b.data);

    double lo = 1.0, hi = 0.0, mean = 0.0, sq = 0.0;
    for (double v : a.data) {
        lo = std::min(lo, v);
        hi = std::max(hi, v);
        mean += v;
        sq += v * v;
    }
    mean /= double(a.data.size());
    CHECK(lo > 0.0);
    CHECK(hi < 1.0);
    CHECK(std::sqrt(sq / double(a.data.size()) - mean * mean) > 1e-4);

    CHECK_THROWS_AS(generate(g, std::vector<double>(63, 0.0)), DimensionError);
}

TEST_CASE("generator output stays in the open interval for adversarial latents") {
    Rng rng(8);
    GeneratorNet g = GeneratorNet::create(32, 64, rng);
    std::vector<double> z(64, 1e6);
    RealField img = generate(g, z);
    for (double v : img.data) {
        CHECK(v > 0.0);
        CHECK(v < 1.0);
    }
}

TEST_CASE("train_gan with zero epochs returns seeded initialization unchanged") {
    Rng rng(31);
    std::vector<Phantom> dataset = make_phantom_dataset(8, 32, rng);
    GanTrainConfig cfg;
    cfg.epochs = 0;
    cfg.seed = 55;
    TrainedGan out = train_gan(dataset, 32, cfg);
    Rng ref_rng(55);
    GeneratorNet ref = GeneratorNet::create(32, 64, ref_rng);
    for (size_t i = 0; i < ref.layers.size(); ++i)
        for (size_t j = 0; j < ref.layers[i].params.size(); ++j)
            CHECK(out.g.layers[i].params[j].val() == ref.layers[i].params[j].val());
    CHECK(out.log.d_loss.empty());
}

TEST_CASE("seeded gan training is deterministic") {
    Rng rng(61);
    std::vector<Phantom> dataset = make_phantom_dataset(32, 32, rng);
    GanTrainConfig cfg;
    cfg.epochs = 1;
    cfg.batch_size = 8;
    cfg.seed = 77;
    TrainedGan a = train_gan(dataset, 32, cfg);
    TrainedGan b = train_gan(dataset, 32, cfg);
    for (size_t i = 0; i < a.g.layers.size(); ++i)
        for (size_t j = 0; j < a.g.layers[i].params.size(); ++j)
            CHECK(a.g.layers[i].params[j].val() == b.g.layers[i].params[j].val());
    CHECK(a.log.d_loss == b.log.d_loss);
}

TEST_CASE("trained discriminator separates real from generated") {
    const TrainedGan& gan = trained();
    Rng held_out(9090);
    double real_score = 0.0, fake_score = 0.0;
    const int trials = 32;
    for (int i = 0; i < trials; ++i) {
        Rng child = held_out.child(i);
        real_score += discriminator_score(gan.d, make_phantom(64, child).phase) / trials;
        fake_score += discriminator_score(gan.d, generate(gan.g, random_latent(64, child))) / trials;
    }
    CHECK(real_score > 0.5);
    CHECK(fake_score < 0.5);
    CHECK(real_score > fake_score);
}

TEST_CASE("generated samples match the dataset's total variation scale") {
    const TrainedGan& gan = trained();
    Rng rng(2222);
    double dataset_tv = 0.0, generated_tv = 0.0;
    const int trials = 100;
    for (int i = 0; i < trials; ++i) {
        Rng child = rng.child(i);
        dataset_tv += field_tv(make_phantom(64, child).phase) / trials;
        generated_tv += field_tv(generate(gan.g, random_latent(64, child))) / trials;
    }
    CHECK(generated_tv < 2.0 * dataset_tv);
    CHECK(generated_tv > 0.5 * dataset_tv);
}

TEST_CASE("discriminator scores lie in (0,1) and rank truth above noise") {
    const TrainedGan& gan = trained();
    Rng rng(3333);
    double real_acc = 0.0, noise_acc = 0.0;
    for (int i = 0; i < 32; ++i) {
        Rng child = rng.child(i);
        const double rs = discriminator_score(gan.d, make_phantom(64, child).phase);
        RealField noise(64, 64);
        for (double& v : noise.data) v = child.uniform();
        const double ns = discriminator_score(gan.d, noise);
        CHECK(rs > 0.0);
        CHECK(rs < 1.0);
        CHECK(ns > 0.0);
        CHECK(ns < 1.0);
        real_acc += rs;
        noise_acc += ns;
    }
    CHECK(real_acc > noise_acc);
}

TEST_CASE("discriminator gradient wrt the image matches finite differences") {
    Rng rng(91);
    DiscriminatorNet d = DiscriminatorNet::create(16, rng);
    nn::Tensor img = nn::Tensor::leaf({1, 16, 16}, true);
    for (double& v : img.val()) v = rng.uniform(0.05, 0.95);

    auto build = [&](nn::Tape& tape) {
        nn::Tensor score = discriminator_score(tape, d, img);
        nn::Tensor one = nn::Tensor::leaf({1, 1});
        one.val()[0] = 1.0 + 1e-12;
        return nn::reshape(tape, nn::log(tape, nn::add(tape, nn::scale(tape, score, -1.0), one)), {1});
    };
    nn::Tape tape;
    nn::Tensor loss = build(tape);
    img.zero_grad();
    tape.backward(loss);
    std::vector<double> analytic = img.impl()->g;
    auto eval = [&] {
        nn::Tape t2;
        t2.recording = false;
        return build(t2).item();
    };
    std::vector<size_t> coords;
    for (int i = 0; i < 12; ++i) coords.push_back(rng.below(img.numel()));
    CHECK(oracle::max_fd_rel_error(img.val(), eval, analytic, coords) < 1e-4);

    RealField wrong(8, 8);
    CHECK_THROWS_AS(discriminator_score(d, wrong), DimensionError);
}

TEST_CASE("checkpoint round trip reproduces generate bit-exactly") {
    const TrainedGan& gan = trained();
    const std::string path = (std::filesystem::temp_directory_path() / "gan_ckpt.ptyfz").string();
    save_gan(path, gan.g, gan.d);
    GanCheckpoint back = load_gan(path);
    Rng zr(5);
    const std::vector<double> z = random_latent(64, zr);
    CHECK(generate(back.g, z).data == generate(gan.g, z).data);
    RealField probe_img = generate(gan.g, z);
    CHECK(discriminator_score(back.d, probe_img) == discriminator_score(gan.d, probe_img));
}

TEST_CASE("checkpoint loading verifies the architecture hash") {
    const TrainedGan& gan = trained();
    const std::string path = (std::filesystem::temp_directory_path() / "gan_tamper.ptyfz").string();
    save_gan(path, gan.g, gan.d);
    {
        std::ofstream side(path + ".arch");
        side << "hash=123456\nimage_size=64\nlatent_dim=64\n";
    }
    CHECK_THROWS_AS(load_gan(path), Error);
}

TEST_CASE("freeze and unfreeze control gradients layer by layer") {
    Rng rng(71);
    GeneratorNet g = GeneratorNet::create(32, 64, rng);
    nn::Optimizer opt(nn::OptKind::adam, 1e-3, g.parameters());
    nn::Tensor z = latent_tensor(random_latent(64, rng), false);

    freeze(g, {0, 1, 2, 3, 4, 5});
    const std::vector<double> dense_w = g.layers[0].params[0].val();
    unfreeze(g, {1, 2, 3, 4, 5}, &opt);
    for (int step = 0; step < 3; ++step) {
        nn::Tape tape;
        nn::Tensor loss = nn::sum(tape, nn::square(tape, g.forward(tape, z)));
        opt.zero_grad();
        tape.backward(loss);
        opt.step();
    }
    CHECK(g.layers[0].params[0].val() == dense_w);         // still frozen
    CHECK_FALSE(g.layers[0].params[0].has_grad());         // no grad buffer ever touched
    CHECK(g.layers[1].params[0].val() != dense_w);

    CHECK_THROWS_AS(freeze(g, {17}), Error);
}
