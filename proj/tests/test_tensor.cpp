#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <cmath>

#include "sphir/rng.hpp"
#include "sphir/tensor.hpp"

using namespace sphir;

TEST_CASE("softmax of a constant row is uniform") {
    Tensor x = Tensor::from_data({1, 3}, {0.0, 0.0, 0.0});
    Tensor y = softmax_rows(x);
    for (int i = 0; i < 3; ++i)
        CHECK(y.at(i) == doctest::Approx(1.0 / 3.0).epsilon(1e-12));
}

TEST_CASE("l2 normalization of a 3-4-5 row") {
    Tensor x = Tensor::from_data({1, 2}, {3.0, 4.0});
    Tensor y = l2_normalize_rows(x);
    CHECK(y.at(0) == doctest::Approx(0.6).epsilon(1e-15));
    CHECK(y.at(1) == doctest::Approx(0.8).epsilon(1e-15));
}

TEST_CASE("l2 normalization of a zero row flags a diagnostic") {
    l2_zero_row_reset();
    Tensor x = Tensor::zeros({2, 4});
    Tensor y = l2_normalize_rows(x);
    for (int64_t i = 0; i < y.numel(); ++i)
        CHECK(y.at(i) == 0.0);
    CHECK(l2_zero_row_count() == 2);
    l2_zero_row_reset();
}

TEST_CASE("matmul against the identity") {
    Tensor eye = Tensor::from_data({3, 3}, {1, 0, 0, 0, 1, 0, 0, 0, 1});
    Tensor a = Tensor::seeded({3, 5}, InitScheme::Normal, 7, 1.0);
    Tensor b = matmul(eye, a);
    for (int64_t i = 0; i < a.numel(); ++i)
        CHECK(b.at(i) == a.at(i));
}

TEST_CASE("shape mismatch errors name the op and shapes") {
    Tensor a = Tensor::zeros({2, 3});
    Tensor b = Tensor::zeros({4, 5});
    CHECK_THROWS_WITH_AS(matmul(a, b), doctest::Contains("matmul"), TensorError);
    CHECK_THROWS_WITH_AS(add(Tensor::zeros({2, 3}), Tensor::zeros({3, 3})),
                         doctest::Contains("(2,3)"), TensorError);
}

TEST_CASE("softmax rows sum to one") {
    Rng rng(11);
    for (int t = 0; t < 100; ++t) {
        std::vector<double> v(12);
        for (auto& x : v)
            x = rng.uniform(-5, 5);
        Tensor y = softmax_rows(Tensor::from_data({3, 4}, v));
        for (int r = 0; r < 3; ++r) {
            double s = 0;
            for (int c = 0; c < 4; ++c)
                s += y.at(r * 4 + c);
            CHECK(std::fabs(s - 1.0) < 1e-12);
        }
    }
}

TEST_CASE("backward of sum of squares") {
    Tensor x = Tensor::from_data({2}, {1.0, 2.0}, true);
    Tensor loss = sum_all(mul(x, x));
    backward(loss);
    CHECK(x.grad()[0] == doctest::Approx(2.0).epsilon(1e-15));
    CHECK(x.grad()[1] == doctest::Approx(4.0).epsilon(1e-15));
}

TEST_CASE("backward of 2-class softmax cross-entropy at equal logits") {
    // loss = -log(softmax(logits)[0]) with logits [0,0]; gradient is [-0.5, 0.5]
    Tensor logits = Tensor::from_data({1, 2}, {0.0, 0.0}, true);
    Tensor probs = softmax_rows(logits);
    Tensor loss = neg(log_t(entry(probs, 0)));
    backward(loss);
    CHECK(logits.grad()[0] == doctest::Approx(-0.5).epsilon(1e-12));
    CHECK(logits.grad()[1] == doctest::Approx(0.5).epsilon(1e-12));
}

TEST_CASE("disconnected leaf keeps a zero gradient") {
    Tensor x = Tensor::from_data({2}, {1.0, 2.0}, true);
    Tensor other = Tensor::from_data({2}, {3.0, 4.0}, true);
    backward(sum_all(mul(x, x)));
    CHECK(other.grad()[0] == 0.0);
    CHECK(other.grad()[1] == 0.0);
}

TEST_CASE("backward on a sum of losses equals summed separate backwards") {
    auto run_joint = [](Tensor& x) {
        Tensor l = add(sum_all(mul(x, x)), mean_all(exp_t(x)));
        backward(l);
        return std::vector<double>(x.grad().begin(), x.grad().end());
    };
    auto run_split = [](Tensor& x) {
        backward(sum_all(mul(x, x)));
        backward(mean_all(exp_t(x)));
        return std::vector<double>(x.grad().begin(), x.grad().end());
    };
    Tensor x1 = Tensor::seeded({3, 3}, InitScheme::Normal, 5, 1.0).set_requires_grad(true);
    Tensor x2 = Tensor::from_data({3, 3},
                                  std::vector<double>(x1.data().begin(), x1.data().end()), true);
    auto g1 = run_joint(x1);
    auto g2 = run_split(x2);
    for (size_t i = 0; i < g1.size(); ++i)
        CHECK(g1[i] == doctest::Approx(g2[i]).epsilon(1e-12));
}

TEST_CASE("backward requires a scalar loss") {
    Tensor x = Tensor::from_data({2}, {1.0, 2.0}, true);
    Tensor y = mul(x, x);
    CHECK_THROWS_AS(backward(y), TensorError);
    clear_tape();
}

TEST_CASE("seeded init is reproducible and seed-sensitive") {
    Tensor a = Tensor::seeded({4, 4}, InitScheme::UniformFanIn, 42);
    Tensor b = Tensor::seeded({4, 4}, InitScheme::UniformFanIn, 42);
    Tensor c = Tensor::seeded({4, 4}, InitScheme::UniformFanIn, 43);
    bool all_equal = true, any_diff = false;
    for (int64_t i = 0; i < a.numel(); ++i) {
        all_equal = all_equal && a.at(i) == b.at(i);
        any_diff = any_diff || a.at(i) != c.at(i);
    }
    CHECK(all_equal);
    CHECK(any_diff);

    Tensor z = Tensor::seeded({2, 2}, InitScheme::Zeros, 0);
    for (int64_t i = 0; i < 4; ++i)
        CHECK(z.at(i) == 0.0);
}

TEST_CASE("broadcast over trailing axes") {
    Tensor img = Tensor::from_data({2, 2, 3}, {1, 2, 3, 4, 5, 6, 7, 8, 9, 10, 11, 12});
    Tensor bias = Tensor::from_data({3}, {10, 20, 30});
    Tensor out = add(img, bias);
    CHECK(out.at(0) == 11);
    CHECK(out.at(4) == 25);
    CHECK(out.at(11) == 42);

    Tensor x = Tensor::from_data({2, 2, 3}, std::vector<double>(12, 1.0), true);
    Tensor s = Tensor::from_data({3}, {1, 2, 3}, true);
    backward(sum_all(mul(x, s)));
    CHECK(s.grad()[0] == doctest::Approx(4.0));   // four positions per channel
    CHECK(x.grad()[5] == doctest::Approx(3.0));   // channel-2 scale
}

TEST_CASE("concat and slice round trip") {
    Tensor a = Tensor::from_data({2, 2}, {1, 2, 3, 4});
    Tensor b = Tensor::from_data({2, 3}, {5, 6, 7, 8, 9, 10});
    Tensor c = concat({a, b}, 1);
    CHECK(c.shape() == Shape{2, 5});
    CHECK(c.at(2) == 5);
    CHECK(c.at(9) == 10);
    Tensor back = slice(c, 1, 2, 3);
    for (int64_t i = 0; i < b.numel(); ++i)
        CHECK(back.at(i) == b.at(i));
}

TEST_CASE("permute matches manual index arithmetic") {
    Tensor x = Tensor::from_data({2, 3, 4}, [] {
        std::vector<double> v(24);
        for (int i = 0; i < 24; ++i)
            v[i] = i;
        return v;
    }());
    Tensor y = permute(x, {2, 0, 1});
    CHECK(y.shape() == Shape{4, 2, 3});
    for (int a = 0; a < 2; ++a)
        for (int b = 0; b < 3; ++b)
            for (int c = 0; c < 4; ++c)
                CHECK(y.at((c * 2 + a) * 3 + b) == x.at((a * 3 + b) * 4 + c));
}

TEST_CASE("subsample and upsample shapes") {
    Tensor x = Tensor::seeded({5, 7, 2}, InitScheme::Normal, 3, 1.0);
    Tensor s = subsample2(x);
    CHECK(s.shape() == Shape{3, 4, 2});
    CHECK(s.at(0) == x.at(0));
    Tensor u = upsample_nearest2(x);
    CHECK(u.shape() == Shape{10, 14, 2});
    CHECK(u.at((3 * 14 + 5) * 2 + 1) == x.at((1 * 7 + 2) * 2 + 1));
}

TEST_CASE("bilinear resize is exact at identical sizes") {
    Tensor x = Tensor::seeded({4, 4, 3}, InitScheme::Normal, 9, 1.0);
    Tensor y = bilinear_resize(x, 4, 4);
    for (int64_t i = 0; i < x.numel(); ++i)
        CHECK(y.at(i) == x.at(i));
}

TEST_CASE("conv2d identity kernel") {
    Tensor x = Tensor::seeded({5, 5, 2}, InitScheme::Normal, 21, 1.0);
    // 1x1 kernel mapping each channel to itself
    Tensor w = Tensor::from_data({1, 1, 2, 2}, {1, 0, 0, 1});
    Tensor y = conv2d(x, w);
    for (int64_t i = 0; i < x.numel(); ++i)
        CHECK(y.at(i) == doctest::Approx(x.at(i)).epsilon(1e-15));
    CHECK_THROWS_AS(conv2d(x, Tensor::zeros({2, 2, 2, 2})), TensorError);
}

TEST_CASE("layer norm output statistics") {
    Tensor x = Tensor::seeded({6, 16}, InitScheme::Normal, 13, 2.0);
    Tensor y = layer_norm(x);
    for (int r = 0; r < 6; ++r) {
        double mean = 0, var = 0;
        for (int c = 0; c < 16; ++c)
            mean += y.at(r * 16 + c);
        mean /= 16;
        for (int c = 0; c < 16; ++c) {
            double d = y.at(r * 16 + c) - mean;
            var += d * d;
        }
        var /= 16;
        CHECK(std::fabs(mean) < 1e-12);
        CHECK(std::fabs(var - 1.0) < 1e-6);
    }
}

TEST_CASE("detach blocks gradient flow") {
    Tensor x = Tensor::from_data({2}, {1.0, 2.0}, true);
    Tensor y = mul(x, x);
    Tensor loss = sum_all(mul(y.detach(), x));
    backward(loss);
    // d/dx of detach(x^2) * x is just x^2
    CHECK(x.grad()[0] == doctest::Approx(1.0));
    CHECK(x.grad()[1] == doctest::Approx(4.0));
}

TEST_CASE("attention with identical keys is a uniform average") {
    Tensor q = Tensor::seeded({3, 4}, InitScheme::Normal, 1, 1.0);
    Tensor k = Tensor::from_data({2, 4}, {1, 2, 3, 4, 1, 2, 3, 4});
    Tensor v = Tensor::from_data({2, 2}, {0.0, 1.0, 2.0, 3.0});
    Tensor out = attention(q, k, v);
    for (int r = 0; r < 3; ++r) {
        CHECK(out.at(r * 2 + 0) == doctest::Approx(1.0).epsilon(1e-12));
        CHECK(out.at(r * 2 + 1) == doctest::Approx(2.0).epsilon(1e-12));
    }
}
