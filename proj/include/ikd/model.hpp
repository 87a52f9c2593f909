#pragma once

#include "ikd/dataset.hpp"
#include "ikd/graph.hpp"
#include "ikd/tensor.hpp"

#include <cstdint>
#include <filesystem>
#include <map>
#include <memory>
#include <span>
#include <string>
#include <vector>

namespace ikd::models {

enum class LayerKind { Conv2d, DepthwiseConv2d, AvgPool, Dense, Relu, Flatten };

/// One layer. `units` is the output channel count (conv) or width (dense);
/// `kernel` is the window for conv and pooling.
struct LayerSpec {
    LayerKind kind;
    Index units = 0;
    Index kernel = 0;
    Index stride = 1;
    Index padding = 0;

    static LayerSpec conv(Index out, Index kernel, Index stride = 1, Index padding = 0) {
        return {LayerKind::Conv2d, out, kernel, stride, padding};
    }
    static LayerSpec depthwise(Index kernel, Index stride = 1, Index padding = 0) {
        return {LayerKind::DepthwiseConv2d, 0, kernel, stride, padding};
    }
    static LayerSpec pool(Index kernel) { return {LayerKind::AvgPool, 0, kernel, kernel, 0}; }
    static LayerSpec dense(Index out) { return {LayerKind::Dense, out, 0, 1, 0}; }
    static LayerSpec relu() { return {LayerKind::Relu}; }
    static LayerSpec flatten() { return {LayerKind::Flatten}; }
};

struct ParamInfo {
    std::string name;
    Shape shape;
    Index fan_in = 0;  // 0 for biases
};

struct ArchSpec {
    std::string id;
    data::ImageGeometry input;
    Index classes = 10;
    std::vector<LayerSpec> layers;

    /// Throws if the layer chain is shape-incompatible or the final width
    /// differs from the class count.
    void validate() const;
    /// Trainable tensors in canonical order.
    std::vector<ParamInfo> parameters() const;
};

using WeightMap = std::map<std::string, std::shared_ptr<const Tensor>>;

struct TrainingInfo {
    std::string dataset_id;
    std::uint64_t seed = 0;
    double test_accuracy = 0.0;
    Index epochs = 0;
};

/// A classifier with frozen weights. The checksum is a 64-bit hash over
/// names, shapes, and raw weight bytes in canonical order.
class Classifier {
public:
    Classifier(ArchSpec arch, WeightMap weights, TrainingInfo training = {});

    const ArchSpec& arch() const { return arch_; }
    const WeightMap& weights() const { return weights_; }
    const Tensor& weight(const std::string& name) const;
    std::uint64_t checksum() const { return checksum_; }
    const TrainingInfo& training() const { return training_; }

    Classifier with_training(TrainingInfo info) const { return Classifier(arch_, weights_, std::move(info)); }

    /// Emits the forward pass for x [N,C,H,W] with weights as constants.
    ad::NodeId append_logits(ad::Graph& graph, ad::NodeId x) const;

private:
    ArchSpec arch_;
    WeightMap weights_;
    TrainingInfo training_;
    std::uint64_t checksum_ = 0;
};

std::uint64_t weight_checksum(const WeightMap& weights);

/// Emits the forward pass with weight nodes supplied by the caller.
template <typename WeightNode>
ad::NodeId append_forward(ad::Graph& graph, const ArchSpec& arch, ad::NodeId x, WeightNode&& weight);

/// He-initialized weights (normal, std sqrt(2/fan_in)); zero biases.
Classifier build_model(const ArchSpec& spec, std::uint64_t seed);

/// batch [N,C,H,W] -> logits [N,K].
Tensor forward_logits(const Classifier& model, const Tensor& batch);
/// Stacks [C,H,W] images into one batch.
Tensor stack(std::span<const Tensor> images);
Index argmax_row(const Tensor& logits, Index row);
/// Predicted class per sample, evaluated in chunks.
std::vector<Index> predict(const Classifier& model, std::span<const data::LabeledSample> samples,
                           Index batch = 64);
double accuracy(const Classifier& model, std::span<const data::LabeledSample> samples);

struct TrainParams {
    double learning_rate = 0.05;
    double momentum = 0.9;
    /// L2 penalty coefficient added to every tensor's gradient.
    double weight_decay = 0.0;
    Index epochs = 8;
    Index batch_size = 32;
    std::uint64_t seed = 0;
};

struct EpochRecord {
    Index epoch;
    double mean_loss;
    double test_accuracy;
};

struct TrainResult {
    Classifier model;
    std::vector<EpochRecord> history;
};

/// Minibatch SGD with momentum on mean cross-entropy. Shuffling is seeded,
/// so equal inputs give equal checksums. Throws if the loss turns non-finite.
TrainResult train(const Classifier& model, std::span<const data::LabeledSample> train_set,
                  std::span<const data::LabeledSample> test_set, const TrainParams& params,
                  const std::string& dataset_id = {});

/// Weight file:
///   "IKDW" | u32 version | string arch id | u32 tensor count
///   per tensor: string name | u32 rank | u64 dims... | f64 data...
///   u64 weight checksum
/// Strings are u32 length + bytes; all integers little-endian.
inline constexpr std::uint32_t kWeightFormatVersion = 1;

std::string encode_weights(const Classifier& model);
Classifier decode_weights(const ArchSpec& spec, std::string_view bytes, const std::string& what = "weights");
void save_weights(const Classifier& model, const std::filesystem::path& path);
Classifier load_weights(const ArchSpec& spec, const std::filesystem::path& path);

/// The five toy-zoo architectures (two MLPs, three CNN variants).
std::vector<ArchSpec> toy_zoo(data::ImageGeometry input, Index classes);
const ArchSpec& find_arch(const std::vector<ArchSpec>& zoo, const std::string& id);

// --- implementation ---------------------------------------------------------

template <typename WeightNode>
ad::NodeId append_forward(ad::Graph& graph, const ArchSpec& arch, ad::NodeId x, WeightNode&& weight) {
    ad::NodeId h = x;
    for (std::size_t i = 0; i < arch.layers.size(); ++i) {
        const auto& l = arch.layers[i];
        const std::string prefix = "layer" + std::to_string(i);
        switch (l.kind) {
        case LayerKind::Conv2d:
            h = graph.conv2d(h, weight(prefix + ".weight"), {l.stride, l.padding});
            h = graph.add(h, weight(prefix + ".bias"));
            break;
        case LayerKind::DepthwiseConv2d:
            h = graph.depthwise_conv2d(h, weight(prefix + ".weight"), {l.stride, l.padding});
            h = graph.add(h, weight(prefix + ".bias"));
            break;
        case LayerKind::AvgPool:
            h = graph.avg_pool(h, l.kernel);
            break;
        case LayerKind::Dense:
            h = graph.add(graph.matmul(h, weight(prefix + ".weight")), weight(prefix + ".bias"));
            break;
        case LayerKind::Relu:
            h = graph.relu(h);
            break;
        case LayerKind::Flatten:
            h = graph.flatten(h);
            break;
        }
    }
    return h;
}

}  // namespace ikd::models
