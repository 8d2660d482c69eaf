#include <catch2/catch_amalgamated.hpp>

#include <functional>

#include "ptycho/optim.hpp"
#include "ptycho/rng.hpp"
#include "ptycho/tensor.hpp"

#include "oracle.hpp"

using namespace ptycho;
using nn::Tape;
using nn::Tensor;

namespace {

Tensor random_tensor(std::vector<int> shape, Rng& rng, bool requires_grad = true, double lo = -1.0,
                     double hi = 1.0) {
    Tensor t = Tensor::leaf(std::move(shape), requires_grad);
    for (double& v : t.val()) v = rng.uniform(lo, hi);
    return t;
}

// Weighted scalar head so finite differences see every coordinate with a
// distinct sensitivity. The weights are fixed by the caller so that repeated
// rebuilds of the graph evaluate the same function.
Tensor head_weights(const std::vector<int>& shape, Rng& rng) {
    Tensor w = Tensor::leaf(shape, false);
    for (double& v : w.val()) v = rng.uniform(0.25, 1.75);
    return w;
}

Tensor weighted_head(Tape& tape, const Tensor& t, const Tensor& w) {
    return nn::sum(tape, nn::mul(tape, t, w));
}

std::vector<size_t> sample_coords(size_t numel, Rng& rng, size_t count = 12) {
    std::vector<size_t> coords;
    for (size_t i = 0; i < std::min(count, numel); ++i) coords.push_back(rng.below(numel));
    return coords;
}

// Checks d(eval)/d(input) against central differences at sampled coordinates.
void check_gradient(Tensor& input, const std::function<Tensor(Tape&)>& build, Rng& rng, double tol = 1e-4) {
    Tape tape;
    Tensor loss = build(tape);
    input.zero_grad();
    tape.backward(loss);
    std::vector<double> analytic = input.impl()->g;
    auto eval = [&] {
        Tape t2;
        t2.recording = false;
        return build(t2).item();
    };
    const double err =
        oracle::max_fd_rel_error(input.val(), eval, analytic, sample_coords(input.numel(), rng));
    CHECK(err < tol);
}

}  // namespace

TEST_CASE("op definitions match their closed forms") {
    Tape tape;
    Tensor x = Tensor::leaf({2});
    x.val() = {-1.0, 3.0};
    Tensor y = nn::leaky_relu(tape, x, 0.2);
    CHECK(y.val()[0] == Catch::Approx(-0.2));
    CHECK(y.val()[1] == Catch::Approx(3.0));

    Tensor s = nn::sigmoid(tape, x);
    CHECK(s.val()[0] == Catch::Approx(1.0 / (1.0 + std::exp(1.0))));

    Tensor sq = nn::square(tape, x);
    CHECK(sq.val()[0] == Catch::Approx(1.0));
    CHECK(sq.val()[1] == Catch::Approx(9.0));

    Tensor sc = nn::scale(tape, x, -2.5);
    CHECK(sc.val()[1] == Catch::Approx(-7.5));

    CHECK(nn::sum(tape, x).item() == Catch::Approx(2.0));
    CHECK(nn::mean(tape, x).item() == Catch::Approx(1.0));
}

TEST_CASE("conv2d with an identity kernel returns its input") {
    Rng rng(3);
    Tensor x = random_tensor({2, 6, 6}, rng);
    Tensor k = Tensor::leaf({2, 2, 3, 3}, true);
    // center tap of the matching channel = 1
    k.val()[0 * 2 * 9 + 0 * 9 + 4] = 1.0;
    k.val()[1 * 2 * 9 + 1 * 9 + 4] = 1.0;
    Tensor bias = Tensor::leaf({2}, true);
    Tape tape;
    Tensor y = nn::conv2d(tape, x, k, bias);
    for (size_t i = 0; i < x.numel(); ++i) CHECK(y.val()[i] == Catch::Approx(x.val()[i]).margin(1e-15));
}

TEST_CASE("matmul matches a brute-force dot product") {
    Rng rng(5);
    const int k = 23;
    Tensor a = random_tensor({1, k}, rng);
    Tensor b = random_tensor({k, 1}, rng);
    Tape tape;
    Tensor out = nn::matmul(tape, a, b);
    double dot = 0.0;
    for (int i = 0; i < k; ++i) dot += a.val()[i] * b.val()[i];
    CHECK(out.item() == Catch::Approx(dot).epsilon(1e-12));
}

TEST_CASE("backward of sum of squares gives 2w") {
    Rng rng(7);
    Tensor w = random_tensor({4, 4}, rng);
    Tape tape;
    Tensor loss = nn::sum(tape, nn::square(tape, w));
    tape.backward(loss);
    for (size_t i = 0; i < w.numel(); ++i) CHECK(w.impl()->g[i] == Catch::Approx(2.0 * w.val()[i]).epsilon(1e-12));
}

TEST_CASE("backward accumulates across calls") {
    Rng rng(9);
    Tensor w = random_tensor({3}, rng);
    Tape tape;
    Tensor loss = nn::sum(tape, nn::square(tape, w));
    tape.backward(loss);
    const std::vector<double> once = w.impl()->g;
    tape.backward(loss);
    for (size_t i = 0; i < once.size(); ++i) CHECK(w.impl()->g[i] == Catch::Approx(2.0 * once[i]).epsilon(1e-12));
}

TEST_CASE("backward rejects non-scalar losses") {
    Rng rng(1);
    Tensor w = random_tensor({3}, rng);
    Tape tape;
    Tensor y = nn::square(tape, w);
    CHECK_THROWS_AS(tape.backward(y), DimensionError);
}

TEST_CASE("shape mismatches report both shapes") {
    Tape tape;
    Tensor a = Tensor::leaf({2, 3});
    Tensor b = Tensor::leaf({3, 2});
    try {
        nn::add(tape, a, b);
        FAIL("expected DimensionError");
    } catch (const DimensionError& e) {
        const std::string msg = e.what();
        CHECK(msg.find("[2,3]") != std::string::npos);
        CHECK(msg.find("[3,2]") != std::string::npos);
    }
    CHECK_THROWS_AS(nn::matmul(tape, a, a), DimensionError);
}

TEST_CASE("log rejects non-positive input") {
    Tape tape;
    Tensor a = Tensor::leaf({1});
    a.val()[0] = 0.0;
    CHECK_THROWS_AS(nn::log(tape, a), DomainError);
}

TEST_CASE("finite differences validate every elementwise and reduction op") {
    Rng rng(17);
    Tensor w = head_weights({16, 16}, rng);
    SECTION("add") {
        Tensor a = random_tensor({16, 16}, rng);
        Tensor b = random_tensor({16, 16}, rng, false);
        check_gradient(a, [&](Tape& t) { return weighted_head(t, nn::add(t, a, b), w); }, rng);
    }
    SECTION("mul") {
        Tensor a = random_tensor({16, 16}, rng);
        Tensor b = random_tensor({16, 16}, rng, false);
        check_gradient(a, [&](Tape& t) { return weighted_head(t, nn::mul(t, a, b), w); }, rng);
    }
    SECTION("leaky_relu") {
        Tensor a = random_tensor({16, 16}, rng);
        check_gradient(a, [&](Tape& t) { return weighted_head(t, nn::leaky_relu(t, a, 0.2), w); }, rng);
    }
    SECTION("sigmoid") {
        Tensor a = random_tensor({16, 16}, rng);
        check_gradient(a, [&](Tape& t) { return weighted_head(t, nn::sigmoid(t, a), w); }, rng);
    }
    SECTION("abs") {
        Tensor a = random_tensor({16, 16}, rng);
        check_gradient(a, [&](Tape& t) { return weighted_head(t, nn::abs(t, a), w); }, rng);
    }
    SECTION("log") {
        Tensor a = random_tensor({16, 16}, rng, true, 0.2, 2.0);
        check_gradient(a, [&](Tape& t) { return weighted_head(t, nn::log(t, a), w); }, rng);
    }
    SECTION("square") {
        Tensor a = random_tensor({16, 16}, rng);
        check_gradient(a, [&](Tape& t) { return weighted_head(t, nn::square(t, a), w); }, rng);
    }
    SECTION("scale") {
        Tensor a = random_tensor({16, 16}, rng);
        check_gradient(a, [&](Tape& t) { return weighted_head(t, nn::scale(t, a, -1.7), w); }, rng);
    }
    SECTION("sum and mean") {
        Tensor a = random_tensor({16, 16}, rng);
        check_gradient(a, [&](Tape& t) { return nn::sum(t, nn::square(t, a)); }, rng);
        check_gradient(a, [&](Tape& t) { return nn::mean(t, nn::square(t, a)); }, rng);
    }
    SECTION("reshape") {
        Tensor a = random_tensor({16, 16}, rng);
        Tensor w3 = head_weights({1, 16, 16}, rng);
        check_gradient(a, [&](Tape& t) { return weighted_head(t, nn::reshape(t, a, {1, 16, 16}), w3); }, rng);
    }
}

TEST_CASE("finite differences validate conv2d, pooling, upsampling, matmul") {
    Rng rng(29);
    SECTION("conv2d wrt input, kernel and bias") {
        Tensor x = random_tensor({2, 16, 16}, rng);
        Tensor k = random_tensor({3, 2, 3, 3}, rng);
        Tensor b = random_tensor({3}, rng);
        Tensor w = head_weights({3, 16, 16}, rng);
        auto build = [&](Tape& t) { return weighted_head(t, nn::conv2d(t, x, k, b), w); };
        check_gradient(x, build, rng);
        check_gradient(k, build, rng);
        check_gradient(b, build, rng);
    }
    SECTION("upsample_nearest") {
        Tensor x = random_tensor({2, 8, 8}, rng);
        Tensor w = head_weights({2, 16, 16}, rng);
        check_gradient(x, [&](Tape& t) { return weighted_head(t, nn::upsample_nearest(t, x), w); }, rng);
    }
    SECTION("avgpool") {
        Tensor x = random_tensor({2, 16, 16}, rng);
        Tensor w = head_weights({2, 8, 8}, rng);
        check_gradient(x, [&](Tape& t) { return weighted_head(t, nn::avgpool(t, x), w); }, rng);
    }
    SECTION("matmul wrt both operands") {
        Tensor a = random_tensor({3, 7}, rng);
        Tensor b = random_tensor({7, 4}, rng);
        Tensor w = head_weights({3, 4}, rng);
        auto build = [&](Tape& t) { return weighted_head(t, nn::matmul(t, a, b), w); };
        check_gradient(a, build, rng);
        check_gradient(b, build, rng);
    }
    SECTION("composite graph") {
        Tensor x = random_tensor({2, 16, 16}, rng);
        Tensor k = random_tensor({2, 2, 3, 3}, rng);
        Tensor b = random_tensor({2}, rng);
        auto build = [&](Tape& t) {
            Tensor h = nn::leaky_relu(t, nn::conv2d(t, x, k, b), 0.2);
            h = nn::avgpool(t, h);
            h = nn::upsample_nearest(t, h);
            h = nn::sigmoid(t, h);
            return nn::mean(t, nn::square(t, h));
        };
        check_gradient(x, build, rng);
        check_gradient(k, build, rng);
    }
}

TEST_CASE("sgd step applies p -= lr*g") {
    Tensor p = Tensor::leaf({1}, true);
    p.val()[0] = 1.0;
    p.grad()[0] = 2.0;
    nn::Optimizer opt(nn::OptKind::sgd, 0.1, {p});
    opt.step();
    CHECK(p.val()[0] == Catch::Approx(0.8));
}

TEST_CASE("adam first step moves by lr toward -sign(g)") {
    Tensor p = Tensor::leaf({2}, true);
    p.val() = {1.0, -4.0};
    p.grad()[0] = 0.3;
    p.grad()[1] = -700.0;
    nn::Optimizer opt(nn::OptKind::adam, 0.1, {p});
    opt.step();
    CHECK(p.val()[0] == Catch::Approx(1.0 - 0.1).epsilon(1e-6));
    CHECK(p.val()[1] == Catch::Approx(-4.0 + 0.1).epsilon(1e-6));
}

TEST_CASE("adam minimizes a quadratic") {
    Tensor p = Tensor::leaf({1}, true);
    p.val()[0] = 5.0;
    nn::Optimizer opt(nn::OptKind::adam, 0.1, {p});
    for (int i = 0; i < 500; ++i) {
        Tape tape;
        Tensor loss = nn::sum(tape, nn::square(tape, p));
        opt.zero_grad();
        tape.backward(loss);
        opt.step();
        if (std::abs(p.val()[0]) < 0.1) break;
    }
    CHECK(std::abs(p.val()[0]) < 0.1);
}

TEST_CASE("frozen parameters receive no update and missing grads are an error") {
    Rng rng(41);
    Tensor p = random_tensor({4}, rng);
    Tensor q = random_tensor({4}, rng);
    nn::Optimizer opt(nn::OptKind::adam, 0.05, {p, q});

    q.set_requires_grad(false);
    const std::vector<double> q_before = q.val();
    Tape tape;
    Tensor loss = nn::sum(tape, nn::square(tape, p));
    opt.zero_grad();
    tape.backward(loss);
    opt.step();
    CHECK(q.val() == q_before);

    q.set_requires_grad(true);
    nn::Optimizer opt2(nn::OptKind::adam, 0.05, {q});
    CHECK_THROWS_AS(opt2.step(), Error);
}

TEST_CASE("all-frozen step is a bitwise no-op") {
    Rng rng(43);
    Tensor p = random_tensor({8}, rng);
    Tensor q = random_tensor({8}, rng);
    nn::Optimizer opt(nn::OptKind::adam, 0.05, {p, q});
    p.set_requires_grad(false);
    q.set_requires_grad(false);
    const std::vector<double> pv = p.val(), qv = q.val();
    opt.step();
    CHECK(p.val() == pv);
    CHECK(q.val() == qv);
}

TEST_CASE("training is deterministic for a fixed seed") {
    auto run = [] {
        Rng rng(99);
        Tensor w = random_tensor({4, 4}, rng);
        Tensor t = random_tensor({4, 4}, rng, false);
        nn::Optimizer opt(nn::OptKind::adam, 0.01, {w});
        for (int i = 0; i < 50; ++i) {
            Tape tape;
            Tensor diff = nn::add(tape, w, nn::scale(tape, t, -1.0));
            Tensor loss = nn::sum(tape, nn::square(tape, diff));
            opt.zero_grad();
            tape.backward(loss);
            opt.step();
        }
        return w.val();
    };
    CHECK(run() == run());
}

TEST_CASE("replaying the same forward yields identical losses") {
    Rng rng(101);
    Tensor x = random_tensor({2, 8, 8}, rng);
    Tensor k = random_tensor({2, 2, 3, 3}, rng);
    Tensor b = random_tensor({2}, rng);
    auto forward = [&] {
        Tape tape;
        return nn::sum(tape, nn::sigmoid(tape, nn::conv2d(tape, x, k, b))).item();
    };
    const double a = forward();
    CHECK(forward() == a);
}
