#pragma once

#include <cmath>
#include <cstdint>
#include <fstream>
#include <map>
#include <string>
#include <vector>

#include "ptycho/field.hpp"
#include "ptycho/optim.hpp"
#include "ptycho/ptyf.hpp"
#include "ptycho/rng.hpp"
#include "ptycho/sim.hpp"
#include "ptycho/tensor.hpp"

namespace ptycho {

// One freezable unit: the progressive schedule indexes these.
struct Layer {
    std::string name;
    std::vector<nn::Tensor> params;
};

namespace detail {

inline nn::Tensor init_param(std::vector<int> shape, double std_dev, Rng& rng) {
    nn::Tensor t = nn::Tensor::leaf(std::move(shape), true);
    for (double& w : t.val()) w = std_dev * rng.gaussian();
    return t;
}

inline std::uint64_t fnv1a(const std::string& s) {
    std::uint64_t h = 0xCBF29CE484222325ULL;
    for (unsigned char c : s) {
        h ^= c;
        h *= 0x100000001B3ULL;
    }
    return h;
}

// Keeps the generator output strictly inside (0,1): a saturated sigmoid
// rounds to exactly 0.0 or 1.0 in double precision, which would break the
// open-interval contract for extreme latents. Identity with pass-through
// gradient wherever the clamp does not bind.
inline nn::Tensor open_unit_clamp(nn::Tape& tape, const nn::Tensor& x) {
    constexpr double lo = 1e-15, hi = 1.0 - 1e-15;
    const bool rg = tape.recording && x.requires_grad();
    nn::Tensor out = nn::Tensor::leaf(x.shape(), rg);
    for (size_t i = 0; i < x.numel(); ++i) out.val()[i] = std::clamp(x.val()[i], lo, hi);
    if (rg) {
        auto xi = x.ptr();
        auto oi = out.ptr();
        tape.record(oi, [xi, oi] {
            nn::ensure_grad(xi.get());
            for (size_t i = 0; i < oi->g.size(); ++i)
                if (xi->v[i] > 1e-15 && xi->v[i] < 1.0 - 1e-15) xi->g[i] += oi->g[i];
        });
    }
    return out;
}

}  // namespace detail

// Latent -> phase image in (0,1). Dense to a 32-channel base grid at N/16,
// four {upsample x2, conv3x3, leaky_relu} blocks with channels 32-32-16-16-8,
// then a 1-channel conv and sigmoid. Six freezable layers, dense shallowest.
class GeneratorNet {
  public:
    int image_size = 0;
    int latent_dim = 0;
    std::vector<Layer> layers;

    static constexpr int kBlockChannels[5] = {32, 32, 16, 16, 8};

    static GeneratorNet create(int image_size, int latent_dim, Rng& rng) {
        if (image_size < 32 || (image_size & (image_size - 1)))
            throw DimensionError("generator size must be a power of two >= 32, got " + std::to_string(image_size));
        GeneratorNet g;
        g.image_size = image_size;
        g.latent_dim = latent_dim;
        const int base = image_size / 16;
        const int dense_out = 32 * base * base;
        Layer dense{"dense", {detail::init_param({latent_dim, dense_out}, std::sqrt(2.0 / latent_dim), rng),
                              nn::Tensor::leaf({1, dense_out}, true)}};
        g.layers.push_back(std::move(dense));
        for (int b = 0; b < 4; ++b) {
            const int ic = kBlockChannels[b], oc = kBlockChannels[b + 1];
            Layer blk{"block" + std::to_string(b + 1),
                      {detail::init_param({oc, ic, 3, 3}, std::sqrt(2.0 / (9.0 * ic)), rng),
                       nn::Tensor::leaf({oc}, true)}};
            g.layers.push_back(std::move(blk));
        }
        Layer out{"out", {detail::init_param({1, 8, 3, 3}, std::sqrt(2.0 / (9.0 * 8.0)), rng),
                          nn::Tensor::leaf({1}, true)}};
        g.layers.push_back(std::move(out));
        return g;
    }

    int layer_count() const { return int(layers.size()); }

    // z is [1,latent_dim] (or flat latent_dim); output [1,N,N] in (0,1).
    nn::Tensor forward(nn::Tape& tape, const nn::Tensor& z) const {
        if (int(z.numel()) != latent_dim)
            throw DimensionError("latent must have " + std::to_string(latent_dim) + " elements, got " +
                                 std::to_string(z.numel()));
        const int base = image_size / 16;
        nn::Tensor h = z.shape().size() == 2 ? z : nn::reshape(tape, z, {1, latent_dim});
        h = nn::add(tape, nn::matmul(tape, h, layers[0].params[0]), layers[0].params[1]);
        h = nn::reshape(tape, h, {32, base, base});
        for (int b = 0; b < 4; ++b) {
            h = nn::upsample_nearest(tape, h);
            h = nn::conv2d(tape, h, layers[1 + b].params[0], layers[1 + b].params[1]);
            h = nn::leaky_relu(tape, h, 0.2);
        }
        h = nn::conv2d(tape, h, layers[5].params[0], layers[5].params[1]);
        return detail::open_unit_clamp(tape, nn::sigmoid(tape, h));
    }

    std::vector<nn::Tensor> parameters() const {
        std::vector<nn::Tensor> out;
        for (const Layer& l : layers)
            for (const nn::Tensor& p : l.params) out.push_back(p);
        return out;
    }

    std::string arch_string() const {
        std::string s = "generator n=" + std::to_string(image_size) + " k=" + std::to_string(latent_dim);
        for (const Layer& l : layers) {
            s += " " + l.name + "(";
            for (const nn::Tensor& p : l.params) s += p.impl() ? std::to_string(p.numel()) + "," : "?,";
            s += ")";
        }
        return s;
    }
};

// Image -> realness logit. Four {conv3x3, leaky_relu, avgpool x2} blocks with
// channels 1-8-16-32-32, then dense to a scalar.
class DiscriminatorNet {
  public:
    int image_size = 0;
    std::vector<Layer> layers;

    static constexpr int kBlockChannels[5] = {1, 8, 16, 32, 32};

    static DiscriminatorNet create(int image_size, Rng& rng) {
        if (image_size < 16 || (image_size & (image_size - 1)))
            throw DimensionError("discriminator size must be a power of two >= 16, got " +
                                 std::to_string(image_size));
        DiscriminatorNet d;
        d.image_size = image_size;
        for (int b = 0; b < 4; ++b) {
            const int ic = kBlockChannels[b], oc = kBlockChannels[b + 1];
            Layer blk{"block" + std::to_string(b + 1),
                      {detail::init_param({oc, ic, 3, 3}, std::sqrt(2.0 / (9.0 * ic)), rng),
                       nn::Tensor::leaf({oc}, true)}};
            d.layers.push_back(std::move(blk));
        }
        const int base = image_size / 16;
        const int dense_in = 32 * base * base;
        Layer dense{"dense", {detail::init_param({dense_in, 1}, std::sqrt(2.0 / dense_in), rng),
                              nn::Tensor::leaf({1, 1}, true)}};
        d.layers.push_back(std::move(dense));
        return d;
    }

    // image is [1,N,N]; returns the raw logit [1,1].
    nn::Tensor forward(nn::Tape& tape, const nn::Tensor& image) const {
        if (image.shape() != std::vector<int>{1, image_size, image_size})
            throw DimensionError("discriminator expects [1," + std::to_string(image_size) + "," +
                                 std::to_string(image_size) + "], got " + image.shape_str());
        nn::Tensor h = image;
        for (int b = 0; b < 4; ++b) {
            h = nn::conv2d(tape, h, layers[b].params[0], layers[b].params[1]);
            h = nn::leaky_relu(tape, h, 0.2);
            h = nn::avgpool(tape, h);
        }
        const int base = image_size / 16;
        h = nn::reshape(tape, h, {1, 32 * base * base});
        return nn::add(tape, nn::matmul(tape, h, layers[4].params[0]), layers[4].params[1]);
    }

    std::vector<nn::Tensor> parameters() const {
        std::vector<nn::Tensor> out;
        for (const Layer& l : layers)
            for (const nn::Tensor& p : l.params) out.push_back(p);
        return out;
    }

    std::string arch_string() const {
        std::string s = "discriminator n=" + std::to_string(image_size);
        for (const Layer& l : layers) {
            s += " " + l.name + "(";
            for (const nn::Tensor& p : l.params) s += std::to_string(p.numel()) + ",";
            s += ")";
        }
        return s;
    }
};

// Nets copy shallowly (layers hold shared tensor handles); clone() gives an
// independent parameter set.
template <typename Net>
Net clone_net(const Net& net) {
    Net out = net;
    for (Layer& l : out.layers)
        for (nn::Tensor& p : l.params) {
            nn::Tensor fresh = nn::Tensor::leaf(p.shape(), p.requires_grad());
            fresh.val() = p.val();
            p = fresh;
        }
    return out;
}

// ---- freezing (Alg.-1 machinery) ----

template <typename Net>
void set_layer_trainable(Net& net, int layer_index, bool trainable) {
    if (layer_index < 0 || layer_index >= int(net.layers.size()))
        throw Error("layer index " + std::to_string(layer_index) + " out of range 0.." +
                    std::to_string(net.layers.size() - 1));
    for (nn::Tensor& p : net.layers[layer_index].params) p.set_requires_grad(trainable);
}

template <typename Net>
void freeze(Net& net, const std::vector<int>& layer_indices) {
    for (int i : layer_indices) set_layer_trainable(net, i, false);
}

// Unfreezing restarts the affected Adam moments from zero.
template <typename Net>
void unfreeze(Net& net, const std::vector<int>& layer_indices, nn::Optimizer* opt = nullptr) {
    for (int i : layer_indices) {
        const bool was_frozen = !net.layers[i].params.empty() && !net.layers[i].params[0].requires_grad();
        set_layer_trainable(net, i, true);
        if (opt && was_frozen)
            for (nn::Tensor& p : net.layers[i].params) opt->reset_moments(p);
    }
}

// ---- inference helpers ----

inline nn::Tensor latent_tensor(const std::vector<double>& z, bool requires_grad = false) {
    nn::Tensor t = nn::Tensor::leaf({1, int(z.size())}, requires_grad);
    t.val() = z;
    return t;
}

inline RealField generate(const GeneratorNet& g, const std::vector<double>& z) {
    nn::Tape tape;
    tape.recording = false;
    nn::Tensor img = g.forward(tape, latent_tensor(z));
    RealField out(g.image_size, g.image_size);
    out.data = img.val();
    return out;
}

// sigma(D(image)) as a double; no gradients.
inline double discriminator_score(const DiscriminatorNet& d, const RealField& image) {
    if (image.height != d.image_size || image.width != d.image_size)
        throw DimensionError("score: image " + std::to_string(image.height) + "x" + std::to_string(image.width) +
                             " vs discriminator " + std::to_string(d.image_size));
    nn::Tape tape;
    tape.recording = false;
    nn::Tensor t = nn::Tensor::leaf({1, d.image_size, d.image_size});
    t.val() = image.data;
    const double logit = d.forward(tape, t).item();
    return 1.0 / (1.0 + std::exp(-logit));
}

// Differentiable sigma(D(image_tensor)) for use inside a larger graph.
inline nn::Tensor discriminator_score(nn::Tape& tape, const DiscriminatorNet& d, const nn::Tensor& image) {
    return nn::sigmoid(tape, d.forward(tape, image));
}

// ---- training ----

struct GanTrainConfig {
    int epochs = 30;
    int batch_size = 16;
    double lr_g = 2e-4;
    double lr_d = 2e-4;
    std::uint64_t seed = 0;
    int dataset_size = 0;  // 0 = use the whole dataset
};

struct GanTrainLog {
    std::vector<double> d_loss;  // per optimization step
    std::vector<double> g_loss;
};

struct TrainedGan {
    GeneratorNet g;
    DiscriminatorNet d;
    GanTrainLog log;
};

namespace detail {

// -log(sigmoid(logit) + eps), composed from taped ops.
inline nn::Tensor nll_real(nn::Tape& tape, const nn::Tensor& logit) {
    nn::Tensor s = nn::sigmoid(tape, logit);
    nn::Tensor eps = nn::Tensor::leaf({1, 1});
    eps.val()[0] = 1e-12;
    return nn::scale(tape, nn::log(tape, nn::add(tape, s, eps)), -1.0);
}

// -log(1 - sigmoid(logit) + eps).
inline nn::Tensor nll_fake(nn::Tape& tape, const nn::Tensor& logit) {
    nn::Tensor s = nn::sigmoid(tape, logit);
    nn::Tensor one = nn::Tensor::leaf({1, 1});
    one.val()[0] = 1.0 + 1e-12;
    return nn::scale(tape, nn::log(tape, nn::add(tape, nn::scale(tape, s, -1.0), one)), -1.0);
}

inline nn::Tensor image_tensor(const RealField& img) {
    nn::Tensor t = nn::Tensor::leaf({1, img.height, img.width});
    t.val() = img.data;
    return t;
}

template <typename Net>
void set_all_trainable(Net& net, bool trainable) {
    for (int i = 0; i < int(net.layers.size()); ++i) set_layer_trainable(net, i, trainable);
}

}  // namespace detail

// Non-saturating GAN training: discriminator minimizes
// -log s(D(real)) - log(1 - s(D(fake))), generator minimizes -log s(D(fake)).
// Per-sample graphs are built and backpropagated one at a time; gradients
// accumulate at the leaves in sample order.
inline TrainedGan train_gan(const std::vector<Phantom>& dataset, int image_size, const GanTrainConfig& cfg) {
    if (cfg.batch_size < 1 || cfg.epochs < 0) throw DomainError("gan config values must be positive");
    Rng rng(cfg.seed);
    TrainedGan out{GeneratorNet::create(image_size, 64, rng), DiscriminatorNet::create(image_size, rng), {}};

    const int n_data = cfg.dataset_size > 0 ? std::min<int>(cfg.dataset_size, int(dataset.size()))
                                            : int(dataset.size());
    if (n_data < 1) throw DomainError("gan training needs at least one image");
    for (int i = 0; i < n_data; ++i) {
        const RealField& ph = dataset[i].phase;
        if (ph.height != image_size || ph.width != image_size)
            throw DimensionError("training image " + std::to_string(i) + " is " + std::to_string(ph.height) +
                                 "x" + std::to_string(ph.width) + ", expected " + std::to_string(image_size));
    }
    if (cfg.epochs == 0) return out;

    nn::Optimizer opt_g(nn::OptKind::adam, cfg.lr_g, out.g.parameters());
    nn::Optimizer opt_d(nn::OptKind::adam, cfg.lr_d, out.d.parameters());

    std::vector<int> order(n_data);
    for (int i = 0; i < n_data; ++i) order[i] = i;
    const int batches = n_data / cfg.batch_size;
    const double inv_b = 1.0 / cfg.batch_size;
    std::uint64_t step = 0;

    for (int epoch = 0; epoch < cfg.epochs; ++epoch) {
        Rng shuffle_rng = rng.child(0x51ULL + std::uint64_t(epoch));
        for (size_t i = order.size(); i > 1; --i) std::swap(order[i - 1], order[shuffle_rng.below(i)]);
        for (int b = 0; b < std::max(1, batches); ++b) {
            // Discriminator update; generator runs forward-only here.
            opt_d.zero_grad();
            double d_loss = 0.0;
            for (int s = 0; s < cfg.batch_size; ++s) {
                const int idx = order[size_t(b * cfg.batch_size + s) % order.size()];
                nn::Tape tape;
                tape.recording = false;
                std::vector<double> z(out.g.latent_dim);
                for (double& v : z) v = rng.gaussian();
                nn::Tensor fake = out.g.forward(tape, latent_tensor(z));
                tape.recording = true;
                nn::Tensor loss = nn::scale(
                    tape,
                    nn::add(tape, detail::nll_real(tape, out.d.forward(tape, detail::image_tensor(dataset[idx].phase))),
                            detail::nll_fake(tape, out.d.forward(tape, fake))),
                    inv_b);
                tape.backward(loss);
                d_loss += loss.item();
            }
            if (!std::isfinite(d_loss))
                throw DivergedError("gan discriminator loss non-finite at step " + std::to_string(step));
            opt_d.step();

            // Generator update; discriminator weights act as constants.
            opt_g.zero_grad();
            detail::set_all_trainable(out.d, false);
            double g_loss = 0.0;
            for (int s = 0; s < cfg.batch_size; ++s) {
                nn::Tape tape;
                std::vector<double> z(out.g.latent_dim);
                for (double& v : z) v = rng.gaussian();
                nn::Tensor fake = out.g.forward(tape, latent_tensor(z));
                nn::Tensor loss = nn::scale(tape, detail::nll_real(tape, out.d.forward(tape, fake)), inv_b);
                tape.backward(loss);
                g_loss += loss.item();
            }
            detail::set_all_trainable(out.d, true);
            if (!std::isfinite(g_loss))
                throw DivergedError("gan generator loss non-finite at step " + std::to_string(step));
            opt_g.step();

            out.log.d_loss.push_back(d_loss);
            out.log.g_loss.push_back(g_loss);
            ++step;
        }
    }
    return out;
}

// ---- checkpoints: named-tensor container + text sidecar with arch hash ----

inline std::string gan_arch_string(const GeneratorNet& g, const DiscriminatorNet& d) {
    return g.arch_string() + " | " + d.arch_string();
}

inline void save_gan(const std::string& path, const GeneratorNet& g, const DiscriminatorNet& d) {
    NamedTensors tensors;
    auto push_net = [&tensors](const std::string& prefix, const auto& net) {
        for (const Layer& l : net.layers)
            for (size_t i = 0; i < l.params.size(); ++i) {
                const nn::Tensor& p = l.params[i];
                NdArray arr;
                for (int dim : p.shape()) arr.dims.push_back(std::uint64_t(dim));
                arr.data = p.val();
                tensors.emplace_back(prefix + "." + l.name + (i == 0 ? ".w" : ".b"), std::move(arr));
            }
    };
    push_net("g", g);
    push_net("d", d);
    write_named_tensors(path, tensors);

    std::ofstream side(path + ".arch");
    if (!side) throw IoError("cannot write " + path + ".arch");
    side << "hash=" << detail::fnv1a(gan_arch_string(g, d)) << "\n"
         << "image_size=" << g.image_size << "\n"
         << "latent_dim=" << g.latent_dim << "\n";
}

struct GanCheckpoint {
    GeneratorNet g;
    DiscriminatorNet d;
};

inline GanCheckpoint load_gan(const std::string& path) {
    std::ifstream side(path + ".arch");
    if (!side) throw IoError("cannot read " + path + ".arch");
    std::map<std::string, std::string> kv;
    std::string line;
    while (std::getline(side, line)) {
        const auto eq = line.find('=');
        if (eq != std::string::npos) kv[line.substr(0, eq)] = line.substr(eq + 1);
    }
    for (const char* key : {"hash", "image_size", "latent_dim"})
        if (!kv.count(key)) throw FormatError("arch sidecar missing key '" + std::string(key) + "'", 0);

    Rng rng(0);
    GanCheckpoint ckpt{GeneratorNet::create(std::stoi(kv["image_size"]), std::stoi(kv["latent_dim"]), rng),
                       DiscriminatorNet::create(std::stoi(kv["image_size"]), rng)};
    const std::uint64_t expect = detail::fnv1a(gan_arch_string(ckpt.g, ckpt.d));
    if (std::stoull(kv["hash"]) != expect)
        throw Error("architecture hash mismatch: checkpoint " + kv["hash"] + " vs built " +
                    std::to_string(expect));

    NamedTensors tensors = read_named_tensors(path);
    std::map<std::string, NdArray*> by_name;
    for (auto& [name, arr] : tensors) by_name[name] = &arr;
    auto pull_net = [&by_name](const std::string& prefix, auto& net) {
        for (Layer& l : net.layers)
            for (size_t i = 0; i < l.params.size(); ++i) {
                const std::string name = prefix + "." + l.name + (i == 0 ? ".w" : ".b");
                auto it = by_name.find(name);
                if (it == by_name.end()) throw Error("checkpoint missing tensor '" + name + "'");
                nn::Tensor& p = l.params[i];
                if (it->second->data.size() != p.numel())
                    throw DimensionError("checkpoint tensor '" + name + "' has " +
                                         std::to_string(it->second->data.size()) + " values, expected " +
                                         std::to_string(p.numel()));
                p.val() = it->second->data;
            }
    };
    pull_net("g", ckpt.g);
    pull_net("d", ckpt.d);
    return ckpt;
}

}  // namespace ptycho
