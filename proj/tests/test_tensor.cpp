#include "doctest.h"

#include <cmath>

#include "miniclip/rng.hpp"
#include "miniclip/tensor.hpp"

using namespace miniclip;

namespace {

using DTape = TapeT<double>;
using DTensor = TensorT<double>;
using F = std::function<DTensor(DTape&, DTensor)>;

std::vector<double> random_vec(size_t n, Rng& rng, double lo = -1.0, double hi = 1.0) {
    std::vector<double> v(n);
    for (auto& x : v) x = rng.uniform(lo, hi);
    return v;
}

double check_op(const F& f, const Shape& shape, uint64_t seed, double lo = -1.0, double hi = 1.0) {
    Rng rng(seed);
    return grad_check<double>(f, shape, random_vec(numel(shape), rng, lo, hi));
}

}  // namespace

TEST_SUITE_BEGIN("tensor");

TEST_CASE("matmul identity and hand arithmetic") {
    Tape tape;
    auto i2 = tape.leaf({2, 2}, {1, 0, 0, 1});
    auto prod = matmul(i2, i2);
    CHECK(prod.value()[0] == 1.0f);
    CHECK(prod.value()[1] == 0.0f);
    CHECK(prod.value()[3] == 1.0f);

    auto a = tape.leaf({2, 2}, {1, 2, 3, 4});
    auto b = tape.leaf({2, 1}, {1, 1});
    auto c = matmul(a, b);
    CHECK(c.shape() == Shape{2, 1});
    CHECK(c.value()[0] == 3.0f);
    CHECK(c.value()[1] == 7.0f);
}

TEST_CASE("matmul shape error names both shapes") {
    Tape tape;
    auto a = tape.leaf({2, 3}, std::vector<float>(6, 1.0f));
    auto b = tape.leaf({2, 2}, std::vector<float>(4, 1.0f));
    CHECK_THROWS_WITH_AS(matmul(a, b), doctest::Contains("[2x3]"), ShapeError);
    try {
        matmul(a, b);
    } catch (const ShapeError& e) {
        CHECK(std::string(e.what()).find("[2x2]") != std::string::npos);
    }
}

TEST_CASE("matmul gradient vs central differences") {
    Rng rng(7);
    auto bdata = random_vec(4 * 2, rng);
    F f = [bdata](DTape& t, DTensor x) {
        auto b = t.constant({4, 2}, bdata);
        return sum(matmul(x, b));
    };
    CHECK(check_op(f, {3, 4}, 11) <= 1e-6);
    // and with respect to the right operand
    auto adata = random_vec(3 * 4, rng);
    F g = [adata](DTape& t, DTensor x) {
        auto a = t.constant({3, 4}, adata);
        return sum(matmul(a, x));
    };
    CHECK(check_op(g, {4, 2}, 13) <= 1e-6);
}

TEST_CASE("elementwise basics") {
    Tape tape;
    auto x = tape.leaf({2}, {0.0f, 1.0f});
    auto y = exp(x);
    CHECK(y.value()[0] == doctest::Approx(1.0));
    CHECK(y.value()[1] == doctest::Approx(2.718281828).epsilon(1e-6));

    Rng rng(3);
    for (int i = 0; i < 10; ++i) {
        const float v = static_cast<float>(rng.uniform(-3.0, 3.0));
        Tape t2;
        auto a = t2.leaf({1}, {v});
        CHECK(log(exp(a)).value()[0] == doctest::Approx(v).epsilon(1e-5));
    }
}

TEST_CASE("elementwise domain errors") {
    Tape tape;
    auto x = tape.leaf({2}, {1.0f, -1.0f});
    CHECK_THROWS_AS(log(x), DomainError);
    auto num = tape.leaf({2}, {1.0f, 2.0f});
    auto den = tape.leaf({2}, {1.0f, 0.0f});
    CHECK_THROWS_AS(divide(num, den), DomainError);
}

TEST_CASE("elementwise shape mismatch") {
    Tape tape;
    auto a = tape.leaf({2}, {1.0f, 2.0f});
    auto b = tape.leaf({3}, {1.0f, 2.0f, 3.0f});
    CHECK_THROWS_AS(add(a, b), ShapeError);
}

TEST_CASE("mul gradient vs finite differences") {
    Rng rng(5);
    auto other = random_vec(6, rng);
    F f = [other](DTape& t, DTensor x) {
        auto b = t.constant({6}, other);
        return sum(mul(x, b));
    };
    CHECK(check_op(f, {6}, 17) <= 1e-6);
}

TEST_CASE("scalar broadcast") {
    Tape tape;
    auto x = tape.leaf({3}, {1.0f, 2.0f, 3.0f});
    auto s = tape.leaf({1}, {2.0f});
    auto y = mul(x, s);
    CHECK(y.value()[2] == 6.0f);
    auto z = sum(y);
    tape.backward(z);
    CHECK(s.grad()[0] == doctest::Approx(6.0));  // sum of x
    CHECK(x.grad()[0] == doctest::Approx(2.0));
}

TEST_CASE("softmax rows") {
    Tape tape;
    auto flat = softmax_rows(tape.leaf({1, 4}, {0, 0, 0, 0}));
    for (int j = 0; j < 4; ++j) CHECK(flat.value()[j] == doctest::Approx(0.25));

    auto shifted = softmax_rows(tape.leaf({1, 2}, {1000.0f, 0.0f}));
    CHECK(shifted.value()[0] == doctest::Approx(1.0));
    CHECK(shifted.value()[1] == doctest::Approx(0.0));

    Rng rng(23);
    Tape t2;
    std::vector<float> vals(5 * 7);
    for (auto& v : vals) v = static_cast<float>(rng.uniform(-4.0, 4.0));
    auto sm = softmax_rows(t2.leaf({5, 7}, vals));
    for (int i = 0; i < 5; ++i) {
        double s = 0;
        for (int j = 0; j < 7; ++j) s += sm.value()[i * 7 + j];
        CHECK(s == doctest::Approx(1.0).epsilon(1e-6));
    }
}

TEST_CASE("softmax rejects NaN") {
    Tape tape;
    auto x = tape.leaf({1, 2}, {std::nanf(""), 0.0f});
    CHECK_THROWS_AS(softmax_rows(x), NumericError);
}

TEST_CASE("l2 normalize rows") {
    Tape tape;
    auto y = l2_normalize_rows(tape.leaf({1, 2}, {3.0f, 4.0f}));
    CHECK(y.value()[0] == doctest::Approx(0.6));
    CHECK(y.value()[1] == doctest::Approx(0.8));

    auto unit = l2_normalize_rows(tape.leaf({1, 2}, {0.6f, 0.8f}));
    CHECK(unit.value()[0] == doctest::Approx(0.6).epsilon(1e-6));

    auto zero = tape.leaf({1, 3}, {0.0f, 0.0f, 0.0f});
    CHECK_THROWS_WITH_AS(l2_normalize_rows(zero), doctest::Contains("degenerate"), DomainError);
}

TEST_CASE("l2 normalize gradient") {
    Rng rng(31);
    auto w = random_vec(8, rng);
    F f = [w](DTape& t, DTensor x) {
        auto ww = t.constant({2, 4}, w);
        return sum(mul(l2_normalize_rows(x), ww));
    };
    CHECK(check_op(f, {2, 4}, 37, 0.3, 1.5) <= 1e-5);
}

TEST_CASE("cosine sim matrix") {
    Tape tape;
    auto a = tape.leaf({2, 2}, {1, 0, 0, 1});
    auto self = cosine_sim_matrix(a, a);
    CHECK(self.value()[0] == doctest::Approx(1.0));
    CHECK(self.value()[1] == doctest::Approx(0.0));
    CHECK(self.value()[3] == doctest::Approx(1.0));

    auto b = tape.leaf({1, 2}, {-1.0f, 0.0f});
    auto anti = cosine_sim_matrix(a, b);
    CHECK(anti.value()[0] == doctest::Approx(-1.0));

    // brute-force oracle on random unit rows
    Rng rng(41);
    Tape t2;
    std::vector<float> av(4 * 6), bv(3 * 6);
    for (auto& v : av) v = static_cast<float>(rng.uniform(-1.0, 1.0));
    for (auto& v : bv) v = static_cast<float>(rng.uniform(-1.0, 1.0));
    auto an = l2_normalize_rows(t2.leaf({4, 6}, av));
    auto bn = l2_normalize_rows(t2.leaf({3, 6}, bv));
    auto sims = cosine_sim_matrix(an, bn);
    for (int i = 0; i < 4; ++i)
        for (int j = 0; j < 3; ++j) {
            double dot = 0;
            for (int k = 0; k < 6; ++k) dot += double(an.value()[i * 6 + k]) * bn.value()[j * 6 + k];
            CHECK(sims.value()[i * 3 + j] == doctest::Approx(dot).epsilon(1e-6));
        }

    auto c = t2.leaf({2, 5}, std::vector<float>(10, 0.5f));
    CHECK_THROWS_AS(cosine_sim_matrix(an, c), ShapeError);
}

TEST_CASE("stop gradient") {
    Tape tape;
    std::vector<float> xs = {0.5f, -1.5f, 2.0f};
    auto x = tape.leaf({3}, xs);
    auto frozen = stop_gradient(x);
    for (int i = 0; i < 3; ++i) CHECK(frozen.value()[i] == xs[i]);

    SUBCASE("sum of frozen has zero grads") {
        auto loss = sum(frozen);
        tape.backward(loss);
        // x never received gradient: either empty or exactly zero
        if (!x.grad().empty())
            for (auto g : x.grad()) CHECK(g == 0.0f);
    }
    SUBCASE("product rule with one frozen factor") {
        auto loss = sum(mul(x, stop_gradient(x)));
        tape.backward(loss);
        REQUIRE(x.grad().size() == 3);
        for (int i = 0; i < 3; ++i) CHECK(x.grad()[i] == doctest::Approx(xs[i]));
    }
}

TEST_CASE("backward requires scalar root and runs once") {
    Tape tape;
    auto x = tape.leaf({2}, {1.0f, 2.0f});
    CHECK_THROWS_AS(tape.backward(x), ShapeError);

    auto loss = sum(x);
    tape.backward(loss);
    CHECK(x.grad()[0] == 1.0f);
    CHECK_THROWS_AS(tape.backward(loss), Error);
}

TEST_CASE("grad_check on a quadratic is near-exact") {
    F f = [](DTape&, DTensor x) { return sum(mul(x, x)); };
    CHECK(check_op(f, {5}, 51) <= 1e-8);
}

TEST_CASE("grad_check with frozen branch passes") {
    // Analytic gradient of sum(x * sg(exp(x))) treats exp(x) as constant, so
    // the finite-difference oracle runs on the same function with the frozen
    // branch pinned to its value at x0.
    Rng rng(53);
    const auto x0 = random_vec(4, rng);
    std::vector<double> pinned(4);
    for (int i = 0; i < 4; ++i) pinned[i] = std::exp(x0[i]);

    std::vector<double> analytic;
    {
        DTape tape;
        auto x = tape.leaf({4}, x0);
        auto loss = sum(mul(x, stop_gradient(exp(x))));
        tape.backward(loss);
        analytic.assign(x.grad().begin(), x.grad().end());
    }
    F fd = [pinned](DTape& t, DTensor x) { return sum(mul(x, t.constant({4}, pinned))); };
    const double h = 1e-5;
    for (int i = 0; i < 4; ++i) {
        auto eval = [&](double v) {
            auto xs = x0;
            xs[i] = v;
            DTape t;
            return fd(t, t.leaf({4}, xs, false)).item();
        };
        const double numeric = (eval(x0[i] + h) - eval(x0[i] - h)) / (2 * h);
        CHECK(std::abs(analytic[i] - numeric) <= 1e-6);
    }
}

TEST_CASE("every recorded op passes grad_check") {
    struct OpCase {
        const char* name;
        Shape shape;
        double lo, hi;
        F f;
    };
    Rng mk(99);
    const auto aux23 = random_vec(6, mk);
    const auto aux32 = random_vec(6, mk);
    const auto aux233 = random_vec(18, mk);
    const auto gain = random_vec(4, mk, 0.5, 1.5);
    const auto bias = random_vec(4, mk);
    const auto convw = random_vec(2 * 3 * 3 * 3, mk, -0.3, 0.3);
    const auto convb = random_vec(2, mk);
    const auto img = random_vec(1 * 3 * 5 * 5, mk);
    const auto aux34 = random_vec(12, mk);
    const auto aux24 = random_vec(8, mk, 0.3, 1.5);

    std::vector<OpCase> cases = {
        {"add", {2, 3}, -1, 1, [&](DTape& t, DTensor x) { return sum(add(x, t.constant({2, 3}, aux23))); }},
        {"sub", {2, 3}, -1, 1, [&](DTape& t, DTensor x) { return sum(sub(t.constant({2, 3}, aux23), x)); }},
        {"mul", {2, 3}, -1, 1, [&](DTape& t, DTensor x) { return sum(mul(x, t.constant({2, 3}, aux23))); }},
        {"div_num", {2, 3}, 0.5, 2, [&](DTape& t, DTensor x) { return sum(divide(x, t.constant({1}, {0.7}))); }},
        {"div_den", {2, 3}, 0.5, 2, [&](DTape& t, DTensor x) { return sum(divide(t.constant({2, 3}, aux23), x)); }},
        {"exp", {2, 3}, -1, 1, [&](DTape&, DTensor x) { return sum(exp(x)); }},
        {"log", {2, 3}, 0.5, 2, [&](DTape&, DTensor x) { return sum(mul(log(x), x)); }},
        {"neg", {2, 3}, -1, 1, [&](DTape&, DTensor x) { return sum(mul(neg(x), x)); }},
        {"relu", {2, 3}, 0.2, 1, [&](DTape&, DTensor x) { return sum(mul(relu(x), x)); }},
        {"scale", {2, 3}, -1, 1, [&](DTape&, DTensor x) { return sum(mul(scale(x, 1.7), x)); }},
        {"add_scalar", {2, 3}, -1, 1, [&](DTape&, DTensor x) { return sum(mul(add_scalar(x, 0.3), x)); }},
        {"matmul_a", {2, 3}, -1, 1, [&](DTape& t, DTensor x) { return sum(exp(matmul(x, t.constant({3, 2}, aux32)))); }},
        {"matmul_b", {3, 2}, -1, 1, [&](DTape& t, DTensor x) { return sum(exp(matmul(t.constant({2, 3}, aux23), x))); }},
        {"matmul_nt", {2, 3}, -1, 1,
         [&](DTape& t, DTensor x) { return sum(exp(matmul_nt(x, t.constant({2, 3}, aux23)))); }},
        {"batched_matmul", {2, 3, 3}, -1, 1,
         [&](DTape& t, DTensor x) { return sum(exp(batched_matmul(x, t.constant({2, 3, 3}, aux233)))); }},
        {"batched_matmul_nt", {2, 3, 3}, -1, 1,
         [&](DTape& t, DTensor x) { return sum(exp(batched_matmul(x, t.constant({2, 3, 3}, aux233), true))); }},
        {"batched_matmul_rhs", {2, 3, 3}, -1, 1,
         [&](DTape& t, DTensor x) { return sum(exp(batched_matmul(t.constant({2, 3, 3}, aux233), x))); }},
        {"transpose", {2, 3}, -1, 1, [&](DTape&, DTensor x) { return sum(mul(transpose(x), transpose(x))); }},
        {"reshape", {2, 3}, -1, 1, [&](DTape&, DTensor x) { return sum(exp(reshape(x, {3, 2}))); }},
        {"sum", {2, 3}, -1, 1, [&](DTape&, DTensor x) { return mul(sum(x), sum(x)); }},
        {"mean", {2, 3}, -1, 1, [&](DTape&, DTensor x) { return mul(mean(x), mean(x)); }},
        {"pick_per_row", {3, 4}, -1, 1,
         [&](DTape&, DTensor x) { return sum(exp(pick_per_row(x, {1, 0, 3}))); }},
        {"gather_rows", {3, 4}, -1, 1,
         [&](DTape&, DTensor x) { return sum(exp(gather_rows(x, {2, 0, 2}))); }},
        {"embedding", {3, 4}, -1, 1, [&](DTape&, DTensor x) { return sum(exp(embedding(x, {1, 1, 2}))); }},
        {"add_bias_x", {3, 4}, -1, 1,
         [&](DTape& t, DTensor x) { return sum(exp(add_bias(x, t.constant({4}, gain)))); }},
        {"add_bias_b", {4}, -1, 1,
         [&](DTape& t, DTensor x) { return sum(exp(add_bias(t.constant({3, 4}, aux34), x))); }},
        {"softmax_rows", {3, 4}, -2, 2, [&](DTape&, DTensor x) { return sum(mul(softmax_rows(x), x)); }},
        {"log_softmax_rows", {3, 4}, -2, 2,
         [&](DTape&, DTensor x) { return sum(mul(log_softmax_rows(x), x)); }},
        {"l2_normalize_rows", {3, 4}, 0.3, 1.5,
         [&](DTape&, DTensor x) { return sum(exp(l2_normalize_rows(x))); }},
        {"cosine_sim_matrix", {3, 4}, 0.3, 1.5,
         [&](DTape& t, DTensor x) {
             auto other = l2_normalize_rows(t.constant({2, 4}, aux24));
             return sum(exp(cosine_sim_matrix(l2_normalize_rows(x), other)));
         }},
        {"layer_norm_x", {3, 4}, -1, 1,
         [&](DTape& t, DTensor x) {
             return sum(exp(layer_norm_rows(x, t.constant({4}, gain), t.constant({4}, bias))));
         }},
        {"layer_norm_gain", {4}, 0.5, 1.5,
         [&](DTape& t, DTensor x) {
             return sum(exp(layer_norm_rows(t.constant({3, 4}, aux34), x, t.constant({4}, bias))));
         }},
        {"conv2d_x", {1, 3, 5, 5}, -1, 1,
         [&](DTape& t, DTensor x) {
             auto w = t.constant({2, 3, 3, 3}, convw);
             auto b = t.constant({2}, convb);
             return sum(exp(conv2d(x, w, b, 2, 1)));
         }},
        {"conv2d_w", {2, 3, 3, 3}, -0.4, 0.4,
         [&](DTape& t, DTensor x) {
             auto in = t.constant({1, 3, 5, 5}, img);
             auto b = t.constant({2}, convb);
             return sum(exp(conv2d(in, x, b, 2, 1)));
         }},
        {"conv2d_b", {2}, -1, 1,
         [&](DTape& t, DTensor x) {
             auto in = t.constant({1, 3, 5, 5}, img);
             auto w = t.constant({2, 3, 3, 3}, convw);
             return sum(exp(conv2d(in, w, x, 2, 1)));
         }},
        {"global_avg_pool", {2, 3, 3, 3}, -1, 1,
         [&](DTape&, DTensor x) { return sum(exp(global_avg_pool(x))); }},
        {"head_split", {4, 6}, -1, 1,
         [&](DTape&, DTensor x) { return sum(exp(head_split(x, 2, 2, 3))); }},
        {"head_merge", {6, 2, 2}, -1, 1,
         [&](DTape&, DTensor x) { return sum(exp(head_merge(x, 2, 2, 3))); }},
    };

    for (const auto& c : cases) {
        double worst = 0;
        for (uint64_t seed = 1; seed <= 3; ++seed)
            worst = std::max(worst, check_op(c.f, c.shape, seed * 977, c.lo, c.hi));
        CHECK_MESSAGE(worst <= 1e-4, std::string(c.name), " worst rel err ", worst);
    }
}

TEST_SUITE_END();
