#include "support.hpp"

#include "ikd/checksum.hpp"
#include "ikd/graph.hpp"
#include "ikd/random.hpp"
#include "ikd/tensor.hpp"

#include <gtest/gtest.h>

#include <cmath>

using namespace ikd;
using ikd::test::numeric_grad;
using ikd::test::random_tensor;
using ikd::test::relative_error;

namespace {

Tensor eval_unary(const std::function<ad::NodeId(ad::Graph&, ad::NodeId)>& op, const Tensor& x) {
    ad::Graph g;
    g.set_output(op(g, g.input("x")));
    return ad::eval(g, {{"x", x}});
}

}  // namespace

TEST(Tensor, RejectsNonPositiveDims) {
    EXPECT_THROW(Tensor({2, 0}), std::invalid_argument);
    EXPECT_THROW(Tensor({2}, {1.0, 2.0, 3.0}), std::invalid_argument);
}

TEST(Tensor, ReshapeKeepsData) {
    Tensor t({2, 3}, {1, 2, 3, 4, 5, 6});
    auto r = t.reshaped({3, 2});
    EXPECT_EQ(r.shape(), (Shape{3, 2}));
    EXPECT_TRUE(bitwise_equal(Tensor({6}, {1, 2, 3, 4, 5, 6}), r.reshaped({6})));
    EXPECT_THROW(t.reshaped({4}), std::invalid_argument);
}

TEST(Graph, IdentityGraph) {
    const Tensor x({3}, {1, 2, 3});
    ad::Graph g;
    g.set_output(g.input("x"));
    EXPECT_TRUE(bitwise_equal(ad::eval(g, {{"x", x}}), x));
}

TEST(Graph, SoftmaxOfZeros) {
    const auto y = eval_unary([](ad::Graph& g, ad::NodeId x) { return g.softmax(x); }, Tensor({2}, {0, 0}));
    EXPECT_DOUBLE_EQ(y[0], 0.5);
    EXPECT_DOUBLE_EQ(y[1], 0.5);
}

TEST(Graph, MatmulHandComputed) {
    ad::Graph g;
    g.set_output(g.matmul(g.input("a"), g.input("b")));
    const auto y = ad::eval(g, {{"a", Tensor({2, 2}, {1, 2, 3, 4})}, {"b", Tensor({2, 1}, {1, 1})}});
    EXPECT_EQ(y.shape(), (Shape{2, 1}));
    EXPECT_EQ(y[0], 3.0);
    EXPECT_EQ(y[1], 7.0);
}

TEST(Graph, MissingBindingIsAnError) {
    ad::Graph g;
    g.set_output(g.relu(g.input("x")));
    EXPECT_ANY_THROW(ad::eval(g, {}));
}

TEST(Graph, ShapeMismatchIsAnError) {
    ad::Graph g;
    g.set_output(g.matmul(g.input("a"), g.input("b")));
    EXPECT_ANY_THROW(ad::eval(g, {{"a", Tensor({2, 3})}, {"b", Tensor({2, 1})}}));
}

TEST(Backward, SumGivesOnes) {
    Rng rng(1);
    const auto x = random_tensor({2, 3, 4}, rng);
    ad::Graph g;
    g.set_output(g.sum(g.input("x")));
    const auto dx = ad::grad(g, {{"x", x}}, {"x"}).at("x");
    EXPECT_EQ(dx.shape(), x.shape());
    EXPECT_TRUE((dx.data() == 1.0).all());
}

TEST(Backward, ReluInactiveRegion) {
    ad::Graph g;
    g.set_output(g.sum(g.relu(g.input("x"))));
    const auto dx = ad::grad(g, {{"x", Tensor({2}, {-1.0, 2.0})}}, {"x"}).at("x");
    EXPECT_EQ(dx[0], 0.0);
    EXPECT_EQ(dx[1], 1.0);
}

TEST(Backward, NonScalarOutputRejected) {
    ad::Graph g;
    g.set_output(g.relu(g.input("x")));
    EXPECT_ANY_THROW(ad::grad(g, {{"x", Tensor({2}, {1, 2})}}, {"x"}));
}

TEST(Backward, ThreeLayerGraphMatchesFiniteDifferences) {
    Rng rng(42);
    ad::Graph g;
    auto x = g.input("x");
    auto h = g.relu(g.add(g.matmul(x, g.constant(random_tensor({5, 8}, rng))), g.constant(random_tensor({8}, rng))));
    h = g.relu(g.add(g.matmul(h, g.constant(random_tensor({8, 6}, rng))), g.constant(random_tensor({6}, rng))));
    auto logits = g.matmul(h, g.constant(random_tensor({6, 3}, rng)));
    g.set_output(g.mean(g.log(g.softmax(logits))));
    const ad::Bindings b{{"x", random_tensor({4, 5}, rng)}};
    const auto analytic = ad::grad(g, b, {"x"}).at("x");
    EXPECT_LT(relative_error(analytic, numeric_grad(g, b, "x")), 1e-6);
}

TEST(Backward, ConvPoolGraphMatchesFiniteDifferences) {
    Rng rng(3);
    ad::Graph g;
    auto x = g.input("x");
    auto y = g.conv2d(x, g.constant(random_tensor({3, 2, 3, 3}, rng)), {1, 1});
    y = g.depthwise_conv2d(g.relu(y), g.constant(random_tensor({3, 1, 3, 3}, rng)), {2, 1});
    y = g.avg_pool(y, 2);
    g.set_output(g.sum(g.mul(y, g.constant(random_tensor({2, 3, 1, 1}, rng)))));
    const ad::Bindings b{{"x", random_tensor({2, 2, 5, 5}, rng)}};
    EXPECT_LT(relative_error(ad::grad(g, b, {"x"}).at("x"), numeric_grad(g, b, "x")), 1e-6);
}

TEST(Backward, ConvWeightGradientMatchesFiniteDifferences) {
    Rng rng(5);
    ad::Graph g;
    auto y = g.conv2d(g.input("x"), g.input("w"), {2, 1});
    g.set_output(g.sum(g.mul(y, y)));
    const ad::Bindings b{{"x", random_tensor({1, 2, 6, 6}, rng)}, {"w", random_tensor({4, 2, 3, 3}, rng)}};
    EXPECT_LT(relative_error(ad::grad(g, b, {"w"}).at("w"), numeric_grad(g, b, "w")), 1e-6);
}

TEST(Backward, FlooredSoftmaxMatchesFiniteDifferences) {
    Rng rng(9);
    ad::Graph g;
    auto p = g.softmax(g.input("z"), 1e-3);
    g.set_output(g.sum(g.mul(g.log(p), g.constant(random_tensor({1, 5}, rng, 0.0, 1.0)))));
    Tensor z({1, 5}, {4.0, -5.0, 0.3, 1.2, -0.7});
    const ad::Bindings b{{"z", z}};
    EXPECT_LT(relative_error(ad::grad(g, b, {"z"}).at("z"), numeric_grad(g, b, "z")), 1e-6);
}

TEST(Resize, SameSizeIsIdentity) {
    Rng rng(2);
    const auto x = random_tensor({1, 5, 5}, rng);
    EXPECT_TRUE(bitwise_equal(ad::resize_bilinear(x, 5, 5), x));
}

TEST(Resize, ConstantField) {
    const auto y = ad::resize_bilinear(Tensor({1, 1, 1}, {0.7}), 2, 2);
    EXPECT_TRUE((y.data() == 0.7).all());
}

TEST(Resize, HalfPixelInterpolationTable) {
    // Source coordinate (d + 0.5) * 2/4 - 0.5, clamped at the borders.
    const auto y = ad::resize_bilinear(Tensor({1, 1, 2}, {0.0, 1.0}), 1, 4);
    EXPECT_DOUBLE_EQ(y[0], 0.0);
    EXPECT_DOUBLE_EQ(y[1], 0.25);
    EXPECT_DOUBLE_EQ(y[2], 0.75);
    EXPECT_DOUBLE_EQ(y[3], 1.0);
}

TEST(Resize, DownsampleAndBackwardMatchFiniteDifferences) {
    Rng rng(4);
    ad::Graph g;
    auto y = g.resize_bilinear(g.input("x"), 5, 3);
    g.set_output(g.sum(g.mul(y, g.constant(random_tensor({1, 2, 5, 3}, rng)))));
    const ad::Bindings b{{"x", random_tensor({1, 2, 4, 7}, rng)}};
    EXPECT_LT(relative_error(ad::grad(g, b, {"x"}).at("x"), numeric_grad(g, b, "x")), 1e-6);
}

TEST(ZeroPad, IdentityAndCenter) {
    Rng rng(6);
    const auto x = random_tensor({1, 3, 3}, rng);
    EXPECT_TRUE(bitwise_equal(ad::zero_pad(x, 0, 0, 3, 3), x));
    const auto y = ad::zero_pad(Tensor({1, 1, 1}, {5.0}), 1, 1, 3, 3);
    for (Index i = 0; i < 9; ++i) EXPECT_EQ(y[i], i == 4 ? 5.0 : 0.0);
}

TEST(ZeroPad, BackwardOfSumIsOnes) {
    Rng rng(7);
    ad::Graph g;
    g.set_output(g.sum(g.zero_pad(g.input("x"), 1, 2, 5, 6)));
    const ad::Bindings b{{"x", random_tensor({1, 2, 3, 3}, rng)}};
    const auto dx = ad::grad(g, b, {"x"}).at("x");
    EXPECT_LT(relative_error(dx, numeric_grad(g, b, "x")), 1e-9);
    EXPECT_TRUE((dx.data() == 1.0).all());
}

TEST(Rng, DerivedStreamsDiffer) {
    EXPECT_NE(derive_seed(1, {0}), derive_seed(1, {1}));
    EXPECT_NE(derive_seed(1, {0, 1}), derive_seed(1, {1, 0}));
    EXPECT_EQ(derive_seed(9, {3, 4}), derive_seed(9, {3, 4}));
    Rng a(5), b(5);
    for (int i = 0; i < 100; ++i) {
        const auto k = a.uniform_int(-3, 3);
        EXPECT_EQ(k, b.uniform_int(-3, 3));
        EXPECT_GE(k, -3);
        EXPECT_LE(k, 3);
    }
}

TEST(Checksum, FnvKnownVectors) {
    EXPECT_EQ(fnv1a(""), 0xcbf29ce484222325ULL);
    EXPECT_EQ(fnv1a("a"), 0xaf63dc4c8601ec8cULL);
    EXPECT_EQ(hex64(0xaf63dc4c8601ec8cULL), "af63dc4c8601ec8c");
    EXPECT_EQ(parse_hex64("af63dc4c8601ec8c"), 0xaf63dc4c8601ec8cULL);
    EXPECT_ANY_THROW(parse_hex64("xyz"));
}
