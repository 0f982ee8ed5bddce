#include <catch2/catch_amalgamated.hpp>

#include <cmath>
#include <random>

#include "viplan/autodiff.hpp"

using namespace viplan;
using ad::Tape;
using ad::Value;

namespace {

Array random_array(Shape shape, std::mt19937_64& rng, double lo = -2.0, double hi = 2.0) {
    Array a(std::move(shape));
    std::uniform_real_distribution<double> d(lo, hi);
    for (auto& v : a.data) v = d(rng);
    return a;
}

}  // namespace

TEST_CASE("forward closed forms") {
    Tape t;
    SECTION("log_sum_exp of zeros is log n") {
        Value x = t.constant(Array(Shape{3}, 0.0));
        Value y = t.log_sum_exp(x, 0);
        REQUIRE(t.item(y) == Catch::Approx(std::log(3.0)).epsilon(1e-12));
    }
    SECTION("matmul with identity") {
        Array eye(Shape{3, 3});
        for (int i = 0; i < 3; ++i) eye.at({i, i}) = 1.0;
        std::mt19937_64 rng(1);
        Array a = random_array({3, 3}, rng);
        Value y = t.matmul(t.constant(eye), t.constant(a));
        for (int i = 0; i < 9; ++i) REQUIRE(t.val(y)[i] == a[i]);
    }
    SECTION("conv2d of one-hot stamps the kernel") {
        Array in(Shape{1, 5, 5});
        in.at({0, 2, 2}) = 1.0;
        Array k(Shape{1, 1, 3, 3});
        for (int i = 0; i < 9; ++i) k[i] = i + 1;
        Value y = t.conv2d(t.constant(in), t.constant(k), ad::Pad::Same);
        // cross-correlation: kernel appears mirrored around the hot pixel
        for (int dy = -1; dy <= 1; ++dy)
            for (int dx = -1; dx <= 1; ++dx) {
                double expect = k.at({0, 0, 1 - dy, 1 - dx});
                REQUIRE(t.val(y).at({0, 2 + dy, 2 + dx}) == Catch::Approx(expect));
            }
    }
    SECTION("softmax rows sum to one") {
        std::mt19937_64 rng(7);
        Array a = random_array({4, 9}, rng);
        Value y = t.softmax(t.constant(a), 1);
        for (int r = 0; r < 4; ++r) {
            double s = 0;
            for (int c = 0; c < 9; ++c) s += t.val(y).at({r, c});
            REQUIRE(s == Catch::Approx(1.0).margin(1e-12));
        }
    }
}

TEST_CASE("backward closed forms") {
    SECTION("sum of squares") {
        Tape t;
        Value x = t.leaf(Array(Shape{3}, {1, 2, 3}), true);
        Value loss = t.sum(t.square(x));
        t.backward(loss);
        Array g = t.grad(x);
        REQUIRE(g[0] == Catch::Approx(2.0));
        REQUIRE(g[1] == Catch::Approx(4.0));
        REQUIRE(g[2] == Catch::Approx(6.0));
    }
    SECTION("log_sum_exp of two zeros") {
        Tape t;
        Value x = t.leaf(Array(Shape{2}, 0.0), true);
        Value loss = t.log_sum_exp(x, 0);
        t.backward(loss);
        Array g = t.grad(x);
        REQUIRE(g[0] == Catch::Approx(0.5));
        REQUIRE(g[1] == Catch::Approx(0.5));
    }
    SECTION("grad off the loss path is exactly zero") {
        Tape t;
        Value x = t.leaf(Array(Shape{2}, {1, 2}), true);
        Value y = t.leaf(Array(Shape{2}, {3, 4}), true);
        Value unused = t.mul(y, y);
        (void)unused;
        Value loss = t.sum(x);
        t.backward(loss);
        Array gy = t.grad(y);
        REQUIRE(gy[0] == 0.0);
        REQUIRE(gy[1] == 0.0);
    }
    SECTION("non-scalar loss rejected") {
        Tape t;
        Value x = t.leaf(Array(Shape{2}, {1, 2}), true);
        REQUIRE_THROWS_WITH(t.backward(x), Catch::Matchers::ContainsSubstring("scalar"));
    }
}

TEST_CASE("error contracts") {
    Tape t;
    SECTION("shape mismatch names the op") {
        Value a = t.constant(Array(Shape{2, 3}, 1.0));
        Value b = t.constant(Array(Shape{4}, 1.0));
        REQUIRE_THROWS_WITH(t.add(a, b), Catch::Matchers::ContainsSubstring("add"));
    }
    SECTION("non-finite output reports node and op") {
        Value x = t.constant(Array(Shape{1}, {1000.0}));
        REQUIRE_THROWS_WITH(t.exp(x), Catch::Matchers::ContainsSubstring("exp"));
        REQUIRE_THROWS_WITH(t.exp(x), Catch::Matchers::ContainsSubstring("node"));
    }
    SECTION("broadcast beyond trailing-axis expansion requires reshape") {
        Value a = t.constant(Array(Shape{2, 3}, 1.0));
        Value b = t.constant(Array(Shape{3}, 1.0));
        REQUIRE_THROWS_WITH(t.add(a, b), Catch::Matchers::ContainsSubstring("reshape"));
    }
    SECTION("trailing-axis expansion works") {
        Value a = t.constant(Array(Shape{2, 3}, 1.0));
        Value b = t.constant(Array(Shape{2, 1}, {10.0, 20.0}));
        Value y = t.add(a, b);
        REQUIRE(t.val(y).at({0, 2}) == 11.0);
        REQUIRE(t.val(y).at({1, 0}) == 21.0);
    }
}

TEST_CASE("forward determinism is bit-identical") {
    auto run = [] {
        std::mt19937_64 rng(99);
        Array a = random_array({6, 6}, rng);
        Array b = random_array({6, 6}, rng);
        Tape t;
        Value x = t.constant(a);
        Value y = t.constant(b);
        Value z = t.matmul(t.softmax(t.mul(x, y), 1), t.tanh(y));
        return t.val(t.sum(z)).data[0];
    };
    double r1 = run(), r2 = run();
    REQUIRE(std::memcmp(&r1, &r2, sizeof(double)) == 0);
}

TEST_CASE("gradient check: every primitive against central differences") {
    std::mt19937_64 rng(42);
    auto check = [&](const char* name, std::vector<Array> leaves,
                     std::function<Value(Tape&, const std::vector<Value>&)> build, double tol = 1e-4) {
        INFO(name);
        auto rep = ad::gradient_check(std::move(leaves), build, tol);
        CAPTURE(rep.max_rel_err, rep.worst_leaf, rep.worst_index);
        REQUIRE(rep.pass);
    };

    Array x = random_array({3, 4}, rng);
    Array y = random_array({3, 4}, rng);
    // keep |values| >= 0.2 for div/log/abs-sensitive ops
    Array pos = random_array({3, 4}, rng, 0.3, 2.0);

    check("add", {x, y}, [](Tape& t, const std::vector<Value>& v) { return t.sum(t.add(v[0], v[1])); });
    check("sub", {x, y}, [](Tape& t, const std::vector<Value>& v) { return t.sum(t.mul(t.sub(v[0], v[1]), v[0])); });
    check("mul", {x, y}, [](Tape& t, const std::vector<Value>& v) { return t.sum(t.mul(v[0], v[1])); });
    check("div", {x, pos}, [](Tape& t, const std::vector<Value>& v) { return t.sum(t.div(v[0], v[1])); });
    check("broadcast add", {x, random_array({3, 1}, rng)},
          [](Tape& t, const std::vector<Value>& v) { return t.sum(t.square(t.add(v[0], v[1]))); });
    check("broadcast mul scalar", {x, random_array({1}, rng)},
          [](Tape& t, const std::vector<Value>& v) { return t.sum(t.mul(v[0], v[1])); });
    check("neg", {x}, [](Tape& t, const std::vector<Value>& v) { return t.sum(t.neg(v[0])); });
    check("exp", {x}, [](Tape& t, const std::vector<Value>& v) { return t.sum(t.exp(v[0])); });
    check("log", {pos}, [](Tape& t, const std::vector<Value>& v) { return t.sum(t.log(v[0])); });
    check("tanh", {x}, [](Tape& t, const std::vector<Value>& v) { return t.sum(t.tanh(v[0])); });
    check("sigmoid", {x}, [](Tape& t, const std::vector<Value>& v) { return t.sum(t.sigmoid(v[0])); });
    check("sin", {x}, [](Tape& t, const std::vector<Value>& v) { return t.sum(t.sin(v[0])); });
    check("cos", {x}, [](Tape& t, const std::vector<Value>& v) { return t.sum(t.cos(v[0])); });
    check("abs", {pos}, [](Tape& t, const std::vector<Value>& v) { return t.sum(t.abs(v[0])); });
    check("relu", {pos}, [](Tape& t, const std::vector<Value>& v) { return t.sum(t.relu(v[0])); });
    check("wrap_angle", {x}, [](Tape& t, const std::vector<Value>& v) { return t.sum(t.wrap_angle(v[0])); });
    check("pow_const", {pos}, [](Tape& t, const std::vector<Value>& v) { return t.sum(t.pow_const(v[0], 2.5)); });
    check("add/mul const", {x}, [](Tape& t, const std::vector<Value>& v) {
        return t.sum(t.mul_const(t.add_const(v[0], 1.5), -0.7));
    });
    check("max/min const", {pos}, [](Tape& t, const std::vector<Value>& v) {
        return t.sum(t.max_const(t.min_const(v[0], 1.7), 0.45));
    });
    check("mean", {x}, [](Tape& t, const std::vector<Value>& v) { return t.mean(t.square(v[0])); });
    check("sum_axis", {x}, [](Tape& t, const std::vector<Value>& v) { return t.sum(t.square(t.sum_axis(v[0], 1))); });
    check("mean_axis", {x}, [](Tape& t, const std::vector<Value>& v) { return t.sum(t.square(t.mean_axis(v[0], 0))); });
    // max_axis needs separated values; integers + noise keep args distinct
    Array sep(Shape{3, 4});
    for (int i = 0; i < 12; ++i) sep[i] = (i * 7 % 12) + 0.01 * i;
    check("max_axis", {sep}, [](Tape& t, const std::vector<Value>& v) { return t.sum(t.square(t.max_axis(v[0], 1))); });
    check("log_sum_exp", {x}, [](Tape& t, const std::vector<Value>& v) { return t.sum(t.log_sum_exp(v[0], 1)); });
    check("softmax", {x}, [](Tape& t, const std::vector<Value>& v) {
        return t.sum(t.square(t.softmax(v[0], 1)));
    });
    check("reshape+slice+concat", {x, y}, [](Tape& t, const std::vector<Value>& v) {
        Value a = t.reshape(v[0], Shape{2, 6});
        Value b = t.slice(a, {0, 1}, {2, 3});
        Value c = t.concat({b, t.slice(t.reshape(v[1], Shape{2, 6}), {0, 0}, {2, 3})}, 1);
        return t.sum(t.square(c));
    });
    check("transpose2d", {x}, [](Tape& t, const std::vector<Value>& v) {
        return t.sum(t.mul(t.transpose2d(v[0]), t.transpose2d(v[0])));
    });
    check("matmul", {random_array({3, 5}, rng), random_array({5, 2}, rng)},
          [](Tape& t, const std::vector<Value>& v) { return t.sum(t.square(t.matmul(v[0], v[1]))); });
    check("conv2d same", {random_array({2, 5, 5}, rng), random_array({3, 2, 3, 3}, rng)},
          [](Tape& t, const std::vector<Value>& v) { return t.sum(t.square(t.conv2d(v[0], v[1], ad::Pad::Same))); });
    check("conv2d valid", {random_array({2, 5, 5}, rng), random_array({3, 2, 3, 3}, rng)},
          [](Tape& t, const std::vector<Value>& v) { return t.sum(t.square(t.conv2d(v[0], v[1], ad::Pad::Valid))); });
    check("shift_gather", {random_array({4, 4}, rng)}, [](Tape& t, const std::vector<Value>& v) {
        return t.sum(t.square(t.shift_gather(v[0], -1, 1)));
    });
    check("shift_scatter", {random_array({4, 4}, rng)}, [](Tape& t, const std::vector<Value>& v) {
        return t.sum(t.square(t.shift_scatter(v[0], 1, -1)));
    });
    check("bilinear_read", {random_array({5, 5}, rng), Array::scalar(1.3), Array::scalar(2.6)},
          [](Tape& t, const std::vector<Value>& v) {
              return t.square(t.bilinear_read(v[0], v[1], v[2]));
          });
}

TEST_CASE("gradient check: primitives composed twice stay below 1e-6") {
    std::mt19937_64 rng(5);
    Array x = random_array({4, 4}, rng, 0.3, 1.8);
    auto rep = ad::gradient_check(
        {x},
        [](Tape& t, const std::vector<Value>& v) {
            Value a = t.tanh(t.mul(v[0], v[0]));
            Value b = t.sigmoid(t.add(a, v[0]));
            return t.mean(t.square(b));
        },
        1e-6);
    CAPTURE(rep.max_rel_err);
    REQUIRE(rep.pass);

    auto rep2 = ad::gradient_check(
        {x},
        [](Tape& t, const std::vector<Value>& v) {
            return t.log_sum_exp(t.reshape(t.log_sum_exp(t.exp(v[0]), 1), Shape{4}), 0);
        },
        1e-6);
    CAPTURE(rep2.max_rel_err);
    REQUIRE(rep2.pass);
}

TEST_CASE("chain rule composition matches finite differences of the whole") {
    std::mt19937_64 rng(11);
    Array x = random_array({6}, rng);
    // f(g(x)) with g = softmax, f = weighted log-sum-exp; checked end to end
    auto rep = ad::gradient_check(
        {x},
        [](Tape& t, const std::vector<Value>& v) {
            Value g = t.softmax(v[0], 0);
            Value f = t.log_sum_exp(t.mul_const(g, 3.0), 0);
            return t.add(f, t.mean(t.square(g)));
        },
        1e-5);
    CAPTURE(rep.max_rel_err);
    REQUIRE(rep.pass);
}

TEST_CASE("shift ops hold boundary cells in place") {
    Tape t;
    Array a(Shape{2, 2}, {1, 2, 3, 4});
    // gather up: row 0 reads row -1 -> itself; row 1 reads row 0
    Value up = t.shift_gather(t.constant(a), -1, 0);
    REQUIRE(t.val(up).at({0, 0}) == 1.0);
    REQUIRE(t.val(up).at({1, 0}) == 1.0);
    REQUIRE(t.val(up).at({1, 1}) == 2.0);
    // scatter right at the right edge keeps mass in place: total conserved
    Value sc = t.shift_scatter(t.constant(a), 0, 1);
    double total = 0;
    for (double v : t.val(sc).data) total += v;
    REQUIRE(total == Catch::Approx(10.0).margin(1e-12));
    REQUIRE(t.val(sc).at({0, 1}) == Catch::Approx(1.0 + 2.0));  // edge held + shifted
}
