#include "doctest.h"
#include "gradcheck.hpp"

#include "unifusion/tensor.hpp"

#include <cmath>
#include <limits>

using namespace unifusion;
using gradcheck::max_rel_error;
using gradcheck::random_tensor;

namespace {
const double kInf = std::numeric_limits<double>::infinity();
}

TEST_CASE("matmul forward") {
    Tensor eye = Tensor::from({2, 2}, {1, 0, 0, 1});
    Tensor m = Tensor::from({2, 2}, {3.5, -1, 2, 7});
    Tensor r = matmul(nullptr, eye, m);
    for (int i = 0; i < 4; ++i) CHECK(r.at(i) == m.at(i));

    Tensor a = Tensor::from({2, 2}, {1, 2, 3, 4});
    Tensor b = Tensor::from({2, 1}, {5, 6});
    Tensor c = matmul(nullptr, a, b);
    CHECK(c.at(0) == 17);
    CHECK(c.at(1) == 39);

    CHECK_THROWS_AS(matmul(nullptr, a, Tensor::zeros({3, 2})), std::invalid_argument);
}

TEST_CASE("matmul gradient vs ones*B^T") {
    RngStream rng(7);
    Tensor a = random_tensor({3, 4}, rng);
    Tensor b = random_tensor({4, 2}, rng);
    Tape tape;
    Tensor la = leaf(tape, a);
    Tensor loss = sum_all(&tape, matmul(&tape, la, b));
    backward(tape, loss);
    const auto& g = tape.grad(la.node);
    // d sum(A*B) / dA = ones * B^T
    for (int i = 0; i < 3; ++i)
        for (int t = 0; t < 4; ++t) {
            double expect = 0.0;
            for (int j = 0; j < 2; ++j) expect += b.at(t * 2 + j);
            CHECK(std::fabs(g[i * 4 + t] - expect) < 1e-12);
        }
    // and against the finite-difference oracle
    double err = max_rel_error(
        [](Tape* tp, std::vector<Tensor>& in) { return sum_all(tp, matmul(tp, in[0], in[1])); },
        {a, b});
    CHECK(err < 1e-6);
}

TEST_CASE("softmax_masked forward values") {
    Tensor logits = Tensor::from({1, 4}, {0.3, 0.3, 0.3, 0.3});
    Tensor p = softmax_masked(nullptr, logits, nullptr);
    for (int i = 0; i < 4; ++i) CHECK(p.at(i) == doctest::Approx(0.25).epsilon(1e-12));

    Tensor two = Tensor::from({1, 2}, {0.0, 0.0});
    Tensor mask = Tensor::from({1, 2}, {0.0, -kInf});
    Tensor q = softmax_masked(nullptr, two, &mask);
    CHECK(q.at(0) == 1.0);
    CHECK(q.at(1) == 0.0);

    Tensor three = Tensor::from({1, 3}, {1, 2, 3});
    Tensor s = softmax_masked(nullptr, three, nullptr);
    CHECK(s.at(0) == doctest::Approx(0.09003057).epsilon(1e-6));
    CHECK(s.at(1) == doctest::Approx(0.24472847).epsilon(1e-6));
    CHECK(s.at(2) == doctest::Approx(0.66524096).epsilon(1e-6));

    Tensor all_masked = Tensor::from({1, 2}, {-kInf, -kInf});
    CHECK_THROWS_AS(softmax_masked(nullptr, two, &all_masked), std::domain_error);
}

TEST_CASE("softmax rows sum to one, masked entries exactly zero") {
    RngStream rng(11);
    for (int trial = 0; trial < 20; ++trial) {
        Tensor logits = random_tensor({4, 6}, rng, 3.0);
        Tensor mask = Tensor::zeros({4, 6});
        for (int i = 0; i < 4; ++i)
            for (int j = 0; j < 6; ++j)
                if (rng.uniform() < 0.3 && j != i) mask.at(i * 6 + j) = -kInf;
        Tensor p = softmax_masked(nullptr, logits, &mask);
        for (int i = 0; i < 4; ++i) {
            double s = 0.0;
            for (int j = 0; j < 6; ++j) {
                s += p.at(i * 6 + j);
                if (mask.at(i * 6 + j) == -kInf) CHECK(p.at(i * 6 + j) == 0.0);
            }
            CHECK(std::fabs(s - 1.0) < 1e-12);
        }
    }
}

TEST_CASE("layernorm forward values") {
    Tensor gain = Tensor::from({3}, {1, 1, 1});
    Tensor bias = Tensor::from({3}, {0, 0, 0});
    Tensor constant = Tensor::from({1, 3}, {5, 5, 5});
    Tensor z = layernorm(nullptr, constant, gain, bias);
    for (int i = 0; i < 3; ++i) CHECK(std::fabs(z.at(i)) < 1e-12);

    Tensor g2 = Tensor::from({2}, {1, 1});
    Tensor b2 = Tensor::from({2}, {0, 0});
    Tensor pm = Tensor::from({1, 2}, {1, -1});
    Tensor y = layernorm(nullptr, pm, g2, b2);
    const double expect = 1.0 / std::sqrt(1.0 + 1e-5);
    CHECK(y.at(0) == doctest::Approx(expect).epsilon(1e-12));
    CHECK(y.at(1) == doctest::Approx(-expect).epsilon(1e-12));
}

TEST_CASE("cross_entropy_logits values") {
    Tensor uniform = Tensor::zeros({1, 8});
    CHECK(cross_entropy_logits(nullptr, uniform, {3}).value() == doctest::Approx(std::log(8.0)).epsilon(1e-12));

    Tensor hot = Tensor::zeros({1, 5});
    hot.at(2) = 20.0;
    CHECK(cross_entropy_logits(nullptr, hot, {2}).value() < 1e-8);

    Tensor pair = Tensor::from({1, 2}, {1, 0});
    CHECK(cross_entropy_logits(nullptr, pair, {0}).value() == doctest::Approx(0.3132616875).epsilon(1e-9));

    CHECK_THROWS_AS(cross_entropy_logits(nullptr, pair, {2}), std::out_of_range);
}

TEST_CASE("backward basics") {
    Tape tape;
    Tensor p = Tensor::from({3}, {1, 2, 3});
    Tensor lp = leaf(tape, p);
    Tensor loss = sum_all(&tape, lp);
    backward(tape, loss);
    for (int i = 0; i < 3; ++i) CHECK(tape.grad(lp.node)[i] == 1.0);

    // backward again without reset accumulates
    backward(tape, loss);
    for (int i = 0; i < 3; ++i) CHECK(tape.grad(lp.node)[i] == 2.0);

    // disconnected leaf receives nothing
    Tensor q = leaf(tape, Tensor::from({2}, {5, 5}));
    for (int i = 0; i < 2; ++i) CHECK(tape.grad(q.node)[i] == 0.0);

    // non-scalar loss is a rank error
    Tensor vec = add(&tape, lp, lp);
    CHECK_THROWS_AS(backward(tape, vec), std::invalid_argument);
}

TEST_CASE("tape replay determinism") {
    auto run = [] {
        RngStream rng(42);
        Tensor a = random_tensor({4, 4}, rng);
        Tensor b = random_tensor({4, 4}, rng);
        Tape tape;
        Tensor la = leaf(tape, a);
        Tensor lb = leaf(tape, b);
        Tensor h = gelu(&tape, matmul(&tape, la, lb));
        Tensor loss = mean_all(&tape, h);
        backward(tape, loss);
        std::vector<double> out = {loss.value()};
        for (double g : tape.grad(la.node)) out.push_back(g);
        return out;
    };
    auto r1 = run();
    auto r2 = run();
    CHECK(r1 == r2); // bit-identical
}

TEST_CASE("gradient check every primitive in the catalog") {
    // 20 seeds, random f64 inputs of dimension <= 16, rel err < 1e-4
    for (int seed = 1; seed <= 20; ++seed) {
        RngStream rng(seed);
        Tensor a34 = random_tensor({3, 4}, rng);
        Tensor b34 = random_tensor({3, 4}, rng);
        Tensor b42 = random_tensor({4, 2}, rng);
        Tensor v4 = random_tensor({4}, rng);
        Tensor s1 = random_tensor({1}, rng);
        Tensor mask = Tensor::zeros({3, 4});
        mask.at(2) = -kInf;
        mask.at(7) = -kInf;

        auto chk = [&](const char* name, const gradcheck::LossFn& fn, std::vector<Tensor> ins) {
            const double e = max_rel_error(fn, std::move(ins));
            INFO(name << " seed " << seed << " err " << e);
            CHECK(e < 1e-4);
        };

        chk("add", [](Tape* tp, std::vector<Tensor>& in) { return mean_all(tp, add(tp, in[0], in[1])); }, {a34, b34});
        chk("sub", [](Tape* tp, std::vector<Tensor>& in) { return mean_all(tp, sub(tp, in[0], in[1])); }, {a34, b34});
        chk("mul", [](Tape* tp, std::vector<Tensor>& in) { return mean_all(tp, mul(tp, in[0], in[1])); }, {a34, b34});
        chk("scale", [](Tape* tp, std::vector<Tensor>& in) { return mean_all(tp, scale(tp, in[0], -1.7)); }, {a34});
        chk("mul_scalar", [](Tape* tp, std::vector<Tensor>& in) { return mean_all(tp, mul_scalar(tp, in[0], in[1])); }, {a34, s1});
        chk("add_rowvec", [](Tape* tp, std::vector<Tensor>& in) { return mean_all(tp, add_rowvec(tp, in[0], in[1])); }, {a34, v4});
        chk("matmul", [](Tape* tp, std::vector<Tensor>& in) { return mean_all(tp, matmul(tp, in[0], in[1])); }, {a34, b42});
        chk("transpose", [](Tape* tp, std::vector<Tensor>& in) { return mean_all(tp, mul(tp, transpose(tp, in[0]), in[1])); }, {a34, random_tensor({4, 3}, rng)});
        chk("reshape", [](Tape* tp, std::vector<Tensor>& in) { return mean_all(tp, mul(tp, reshape(tp, in[0], {2, 6}), in[1])); }, {a34, random_tensor({2, 6}, rng)});
        chk("gelu", [](Tape* tp, std::vector<Tensor>& in) { return mean_all(tp, gelu(tp, in[0])); }, {a34});
        chk("softmax", [&mask](Tape* tp, std::vector<Tensor>& in) {
            return mean_all(tp, mul(tp, softmax_masked(tp, in[0], &mask), in[1]));
        }, {a34, b34});
        chk("layernorm", [](Tape* tp, std::vector<Tensor>& in) {
            return mean_all(tp, mul(tp, layernorm(tp, in[0], in[1], in[2]), in[3]));
        }, {a34, random_tensor({4}, rng, 0.5), v4, b34});
        chk("embedding", [](Tape* tp, std::vector<Tensor>& in) {
            return mean_all(tp, embedding_lookup(tp, in[0], {0, 2, 2, 1}));
        }, {a34});
        chk("concat_rows", [](Tape* tp, std::vector<Tensor>& in) {
            return mean_all(tp, mul(tp, concat_rows(tp, {in[0], in[1]}), in[2]));
        }, {a34, b34, random_tensor({6, 4}, rng)});
        chk("slice_rows", [](Tape* tp, std::vector<Tensor>& in) { return mean_all(tp, slice_rows(tp, in[0], 1, 2)); }, {a34});
        chk("concat_cols", [](Tape* tp, std::vector<Tensor>& in) {
            return mean_all(tp, mul(tp, concat_cols(tp, {in[0], in[1]}), in[2]));
        }, {a34, b34, random_tensor({3, 8}, rng)});
        chk("slice_cols", [](Tape* tp, std::vector<Tensor>& in) { return mean_all(tp, slice_cols(tp, in[0], 1, 3)); }, {a34});
        chk("row_max", [](Tape* tp, std::vector<Tensor>& in) { return mean_all(tp, row_max(tp, in[0])); }, {a34});
        chk("mean", [](Tape* tp, std::vector<Tensor>& in) { return mean_all(tp, in[0]); }, {a34});
        chk("sum", [](Tape* tp, std::vector<Tensor>& in) { return sum_all(tp, in[0]); }, {a34});
        chk("mse", [](Tape* tp, std::vector<Tensor>& in) { return mse(tp, in[0], in[1]); }, {a34, b34});
        chk("cross_entropy", [](Tape* tp, std::vector<Tensor>& in) {
            return cross_entropy_logits(tp, in[0], {1, 3, 0});
        }, {a34});
        chk("exp", [](Tape* tp, std::vector<Tensor>& in) { return mean_all(tp, exp_elem(tp, in[0])); }, {a34});
        chk("clamp_max", [](Tape* tp, std::vector<Tensor>& in) { return mean_all(tp, clamp_max(tp, in[0], 0.5)); }, {a34});
        chk("l2_normalize", [](Tape* tp, std::vector<Tensor>& in) {
            return mean_all(tp, mul(tp, l2_normalize_rows(tp, in[0]), in[1]));
        }, {a34, b34});
    }
}

TEST_CASE("layernorm gradient fine tolerance") {
    RngStream rng(3);
    Tensor x = random_tensor({2, 5}, rng);
    Tensor g = random_tensor({5}, rng, 0.3);
    Tensor b = random_tensor({5}, rng, 0.3);
    Tensor w = random_tensor({2, 5}, rng);
    double err = max_rel_error(
        [](Tape* tp, std::vector<Tensor>& in) {
            return mean_all(tp, mul(tp, layernorm(tp, in[0], in[1], in[2]), in[3]));
        },
        {x, g, b, w});
    CHECK(err < 1e-6);
}

TEST_CASE("row_max ties break to the lowest index") {
    Tensor t = Tensor::from({1, 3}, {2.0, 2.0, 1.0});
    Tape tape;
    Tensor lt = leaf(tape, t);
    Tensor loss = sum_all(&tape, row_max(&tape, lt));
    backward(tape, loss);
    CHECK(tape.grad(lt.node)[0] == 1.0);
    CHECK(tape.grad(lt.node)[1] == 0.0);
}

TEST_CASE("l2_normalize_rows unit norms") {
    RngStream rng(5);
    Tensor x = random_tensor({4, 7}, rng, 3.0);
    Tensor y = l2_normalize_rows(nullptr, x);
    for (int i = 0; i < 4; ++i) {
        double s = 0.0;
        for (int j = 0; j < 7; ++j) s += y.at(i * 7 + j) * y.at(i * 7 + j);
        CHECK(std::fabs(std::sqrt(s) - 1.0) < 1e-12);
    }
}
