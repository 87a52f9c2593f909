#include "support.hpp"

#include "ikd/binary_io.hpp"
#include "ikd/checksum.hpp"
#include "ikd/dataset.hpp"
#include "ikd/model.hpp"

#include <gtest/gtest.h>

#include <set>

using namespace ikd;
using namespace ikd::models;

namespace {

const data::ImageGeometry kGlyph{1, 12, 12};

ArchSpec dense_spec() { return {"dense", {1, 1, 4}, 2, {LayerSpec::flatten(), LayerSpec::dense(2)}}; }

std::vector<data::LabeledSample> blobs(Index n, std::uint64_t seed) {
    Rng rng(seed);
    std::vector<data::LabeledSample> out;
    for (Index i = 0; i < n; ++i) {
        const Index label = i % 2;
        const double c = label == 0 ? -1.0 : 1.0;
        out.push_back({Tensor({1, 1, 2}, {c + 0.3 * rng.normal(), c + 0.3 * rng.normal()}), label});
    }
    return out;
}

}  // namespace

TEST(ArchSpec, ZooHasFiveDistinctValidArchitectures) {
    const auto zoo = toy_zoo({1, 28, 28}, 10);
    ASSERT_EQ(zoo.size(), 5u);
    std::set<std::string> ids;
    for (const auto& a : zoo) {
        ids.insert(a.id);
        EXPECT_NO_THROW(a.validate());
    }
    EXPECT_EQ(ids.size(), 5u);
    EXPECT_NO_THROW(find_arch(zoo, "cnn_s"));
    EXPECT_ANY_THROW(find_arch(zoo, "resnet"));
}

TEST(ArchSpec, RejectsBrokenChains) {
    EXPECT_ANY_THROW((ArchSpec{"a", kGlyph, 3, {LayerSpec::dense(3)}}.validate()));
    EXPECT_ANY_THROW((ArchSpec{"a", kGlyph, 3, {LayerSpec::flatten(), LayerSpec::dense(4)}}.validate()));
    EXPECT_ANY_THROW(
        (ArchSpec{"a", kGlyph, 3, {LayerSpec::conv(2, 13), LayerSpec::flatten(), LayerSpec::dense(3)}}.validate()));
    EXPECT_ANY_THROW((ArchSpec{"a", kGlyph, 3, {LayerSpec::conv(2, 3)}}.validate()));
}

TEST(BuildModel, DeterministicPerSeed) {
    const auto zoo = toy_zoo(kGlyph, 4);
    for (const auto& a : zoo) {
        EXPECT_EQ(build_model(a, 3).checksum(), build_model(a, 3).checksum());
        EXPECT_NE(build_model(a, 3).checksum(), build_model(a, 4).checksum());
    }
}

TEST(Forward, DenseOnlyShape) {
    const auto m = build_model(dense_spec(), 1);
    EXPECT_EQ(forward_logits(m, Tensor({1, 1, 1, 4})).shape(), (Shape{1, 2}));
}

TEST(Forward, ZeroFinalLayerGivesZeroLogits) {
    const auto m = test::linear_model(Eigen::MatrixXd::Zero(4, 3), Eigen::VectorXd::Zero(3), {1, 2, 2});
    Rng rng(2);
    const auto logits = forward_logits(m, test::random_tensor({3, 1, 2, 2}, rng));
    EXPECT_TRUE((logits.data() == 0.0).all());
}

TEST(Forward, IdenticalImagesGiveIdenticalRows) {
    const auto m = build_model(toy_zoo(kGlyph, 4)[3], 5);
    Rng rng(3);
    const auto img = test::random_tensor({1, 12, 12}, rng, 0, 1);
    const std::vector<Tensor> batch{img, img};
    const auto logits = forward_logits(m, stack(batch));
    for (Index k = 0; k < 4; ++k) EXPECT_EQ(logits[k], logits[4 + k]);
}

TEST(Forward, LinearModelMatchesHandMatmul) {
    Eigen::MatrixXd w(4, 2);
    w << 1, -1, 2, 0.5, -3, 1, 0.25, 2;
    Eigen::VectorXd b(2);
    b << 0.1, -0.2;
    const auto m = test::linear_model(w, b, {1, 2, 2});
    const Tensor x({1, 1, 2, 2}, {0.5, 1.0, -1.0, 2.0});
    const auto logits = forward_logits(m, x);
    EXPECT_DOUBLE_EQ(logits[0], 0.5 * 1 + 1.0 * 2 + -1.0 * -3 + 2.0 * 0.25 + 0.1);
    EXPECT_DOUBLE_EQ(logits[1], 0.5 * -1 + 1.0 * 0.5 + -1.0 * 1 + 2.0 * 2 - 0.2);
}

TEST(Train, SeparableBlobsReachHighAccuracy) {
    const ArchSpec arch{"blob", {1, 1, 2}, 2, {LayerSpec::flatten(), LayerSpec::dense(2)}};
    TrainParams p;
    p.epochs = 20;
    p.learning_rate = 0.1;
    const auto r = train(build_model(arch, 1), blobs(200, 1), blobs(200, 2), p);
    EXPECT_GE(r.model.training().test_accuracy, 0.99);
    EXPECT_EQ(r.history.size(), 20u);
}

TEST(Train, ZeroLearningRateLeavesWeights) {
    const auto m = build_model(dense_spec(), 1);
    TrainParams p;
    p.learning_rate = 0.0;
    p.epochs = 2;
    std::vector<data::LabeledSample> set{{Tensor({1, 1, 4}, {1, 2, 3, 4}), 1}, {Tensor({1, 1, 4}, {0, 1, 0, 1}), 0}};
    EXPECT_EQ(train(m, set, set, p).model.checksum(), m.checksum());
}

TEST(Train, SameSeedSameHistory) {
    const auto& world = test::small_world();
    const auto arch = toy_zoo(kGlyph, 4)[0];
    const auto train_set = world.train_set.samples();
    TrainParams p;
    p.epochs = 2;
    p.seed = 9;
    const auto a = train(build_model(arch, 2), train_set, world.test_samples, p);
    const auto b = train(build_model(arch, 2), train_set, world.test_samples, p);
    EXPECT_EQ(a.model.checksum(), b.model.checksum());
    ASSERT_EQ(a.history.size(), b.history.size());
    for (std::size_t i = 0; i < a.history.size(); ++i) {
        EXPECT_EQ(a.history[i].mean_loss, b.history[i].mean_loss);
        EXPECT_EQ(a.history[i].test_accuracy, b.history[i].test_accuracy);
    }
}

TEST(Train, SmallZooLearnsGlyphs) {
    for (const auto& [id, m] : test::small_world().models) {
        EXPECT_GE(m.training().test_accuracy, 0.9) << id;
    }
}

TEST(Weights, SaveLoadRoundTrip) {
    test::TempDir dir("weights");
    const auto arch = toy_zoo(kGlyph, 4)[2];
    const auto m = build_model(arch, 8);
    save_weights(m, dir.path() / "m.ikdw");
    EXPECT_EQ(load_weights(arch, dir.path() / "m.ikdw").checksum(), m.checksum());
}

TEST(Weights, TruncatedFileIsCorrupt) {
    const auto arch = toy_zoo(kGlyph, 4)[0];
    const auto bytes = encode_weights(build_model(arch, 1));
    EXPECT_THROW(decode_weights(arch, std::string_view(bytes).substr(0, bytes.size() - 9)), io::CorruptFile);
    auto flipped = bytes;
    flipped[bytes.size() / 2] ^= 0x40;
    EXPECT_ANY_THROW(decode_weights(arch, flipped));
}

TEST(Weights, WrongArchNamesTheTensor) {
    const auto zoo = toy_zoo(kGlyph, 4);
    const auto bytes = encode_weights(build_model(zoo[0], 1));
    auto other = zoo[0];
    other.layers[1] = LayerSpec::dense(32);
    try {
        decode_weights(other, bytes);
        FAIL() << "expected a shape mismatch";
    } catch (const std::exception& e) {
        const std::string what = e.what();
        EXPECT_TRUE(what.find("'layer1.weight'") != std::string::npos || what.find("'layer1.bias'") != std::string::npos)
            << what;
    }
}

TEST(Dataset, EncodeDecodeRoundTrip) {
    const auto ds = data::make_synthetic(test::small_spec(), 3, 5);
    const auto back = data::decode_dataset(data::encode_dataset(ds));
    ASSERT_EQ(back.size(), ds.size());
    for (Index i = 0; i < ds.size(); ++i) {
        EXPECT_EQ(back.label(i), ds.label(i));
        EXPECT_TRUE(std::equal(back.pixels(i).begin(), back.pixels(i).end(), ds.pixels(i).begin()));
    }
}

TEST(Dataset, CorruptionDetected) {
    const auto bytes = data::encode_dataset(data::make_synthetic(test::small_spec(), 2, 5));
    EXPECT_THROW(data::decode_dataset(bytes.substr(0, bytes.size() - 1)), io::CorruptFile);
    auto flipped = bytes;
    flipped[40] ^= 1;
    EXPECT_THROW(data::decode_dataset(flipped), io::CorruptFile);
    auto bad_label = bytes;
    bad_label[28] = 99;  // first label, low byte
    EXPECT_THROW(data::decode_dataset(bad_label), io::CorruptFile);
}

TEST(Dataset, SyntheticIsDeterministicAndBalanced) {
    const auto a = data::make_synthetic(test::small_spec(), 4, 1);
    const auto b = data::make_synthetic(test::small_spec(), 4, 1);
    EXPECT_EQ(data::encode_dataset(a), data::encode_dataset(b));
    EXPECT_NE(data::encode_dataset(a), data::encode_dataset(data::make_synthetic(test::small_spec(), 4, 2)));
    std::vector<int> counts(4, 0);
    for (Index i = 0; i < a.size(); ++i) ++counts[a.label(i)];
    for (int c : counts) EXPECT_EQ(c, 4);
}

TEST(Dataset, QuantizeRoundTrip) {
    Tensor t({1, 1, 3}, {0.0, 0.5, 1.0});
    const auto q = data::quantize(t);
    EXPECT_EQ(q[0], 0);
    EXPECT_EQ(q[1], 128);
    EXPECT_EQ(q[2], 255);
    EXPECT_EQ(data::quantize(data::dequantize(q, t.shape())), q);
}
