#include "ikd/model.hpp"

#include "ikd/binary_io.hpp"
#include "ikd/checksum.hpp"
#include "ikd/losses.hpp"
#include "ikd/random.hpp"

#include <cmath>
#include <cstring>
#include <numeric>
#include <stdexcept>

namespace ikd::models {

namespace {

std::string layer_name(std::size_t i) { return "layer" + std::to_string(i); }

[[noreturn]] void bad_chain(const ArchSpec& spec, std::size_t i, const std::string& what) {
    throw std::invalid_argument("arch '" + spec.id + "' " + layer_name(i) + ": " + what);
}

}  // namespace

void ArchSpec::validate() const {
    if (id.empty()) throw std::invalid_argument("arch id must be non-empty");
    if (classes < 2) throw std::invalid_argument("arch '" + id + "' needs at least two classes");
    bool spatial = true;
    Index c = input.channels, h = input.height, w = input.width, flat = 0;
    for (std::size_t i = 0; i < layers.size(); ++i) {
        const auto& l = layers[i];
        switch (l.kind) {
        case LayerKind::Conv2d:
        case LayerKind::DepthwiseConv2d: {
            if (!spatial) bad_chain(*this, i, "convolution after flatten");
            if (l.kernel < 1 || l.stride < 1 || l.padding < 0) bad_chain(*this, i, "bad kernel/stride/padding");
            if (l.kind == LayerKind::Conv2d && l.units < 1) bad_chain(*this, i, "conv needs >= 1 output channel");
            const Index sh = h + 2 * l.padding - l.kernel, sw = w + 2 * l.padding - l.kernel;
            if (sh < 0 || sw < 0) bad_chain(*this, i, "kernel larger than padded input");
            h = sh / l.stride + 1;
            w = sw / l.stride + 1;
            if (l.kind == LayerKind::Conv2d) c = l.units;
            break;
        }
        case LayerKind::AvgPool:
            if (!spatial) bad_chain(*this, i, "pooling after flatten");
            if (l.kernel < 1 || h < l.kernel || w < l.kernel) bad_chain(*this, i, "pool window does not fit");
            h /= l.kernel;
            w /= l.kernel;
            break;
        case LayerKind::Dense:
            if (spatial) bad_chain(*this, i, "dense layer needs a flatten before it");
            if (l.units < 1) bad_chain(*this, i, "dense needs >= 1 unit");
            flat = l.units;
            break;
        case LayerKind::Relu:
            break;
        case LayerKind::Flatten:
            if (!spatial) bad_chain(*this, i, "double flatten");
            spatial = false;
            flat = c * h * w;
            break;
        }
    }
    if (spatial) throw std::invalid_argument("arch '" + id + "' never flattens to logits");
    if (flat != classes) {
        throw std::invalid_argument("arch '" + id + "' final width " + std::to_string(flat) +
                                    " != class count " + std::to_string(classes));
    }
}

std::vector<ParamInfo> ArchSpec::parameters() const {
    validate();
    std::vector<ParamInfo> out;
    Index c = input.channels, h = input.height, w = input.width, flat = 0;
    for (std::size_t i = 0; i < layers.size(); ++i) {
        const auto& l = layers[i];
        const auto name = layer_name(i);
        switch (l.kind) {
        case LayerKind::Conv2d:
            out.push_back({name + ".weight", {l.units, c, l.kernel, l.kernel}, c * l.kernel * l.kernel});
            out.push_back({name + ".bias", {l.units}, 0});
            h = (h + 2 * l.padding - l.kernel) / l.stride + 1;
            w = (w + 2 * l.padding - l.kernel) / l.stride + 1;
            c = l.units;
            break;
        case LayerKind::DepthwiseConv2d:
            out.push_back({name + ".weight", {c, 1, l.kernel, l.kernel}, l.kernel * l.kernel});
            out.push_back({name + ".bias", {c}, 0});
            h = (h + 2 * l.padding - l.kernel) / l.stride + 1;
            w = (w + 2 * l.padding - l.kernel) / l.stride + 1;
            break;
        case LayerKind::AvgPool:
            h /= l.kernel;
            w /= l.kernel;
            break;
        case LayerKind::Dense:
            out.push_back({name + ".weight", {flat, l.units}, flat});
            out.push_back({name + ".bias", {l.units}, 0});
            flat = l.units;
            break;
        case LayerKind::Relu:
            break;
        case LayerKind::Flatten:
            flat = c * h * w;
            break;
        }
    }
    return out;
}

std::uint64_t weight_checksum(const WeightMap& weights) {
    Fnv1a h;
    for (const auto& [name, t] : weights) {
        h.update(name);
        const auto rank = static_cast<std::uint32_t>(t->rank());
        h.update(&rank, sizeof rank);
        for (Index d : t->shape()) {
            const auto d64 = static_cast<std::uint64_t>(d);
            h.update(&d64, sizeof d64);
        }
        h.update(t->raw(), sizeof(double) * static_cast<std::size_t>(t->size()));
    }
    return h.value();
}

Classifier::Classifier(ArchSpec arch, WeightMap weights, TrainingInfo training)
    : arch_(std::move(arch)), weights_(std::move(weights)), training_(std::move(training)) {
    const auto params = arch_.parameters();
    if (params.size() != weights_.size()) {
        throw std::invalid_argument("arch '" + arch_.id + "' expects " + std::to_string(params.size()) +
                                    " tensors, got " + std::to_string(weights_.size()));
    }
    for (const auto& p : params) {
        auto it = weights_.find(p.name);
        if (it == weights_.end() || !it->second) {
            throw std::invalid_argument("arch '" + arch_.id + "' is missing tensor '" + p.name + "'");
        }
        if (it->second->shape() != p.shape) {
            throw std::invalid_argument("tensor '" + p.name + "' has shape " + to_string(it->second->shape()) +
                                        " but arch '" + arch_.id + "' expects " + to_string(p.shape));
        }
    }
    checksum_ = weight_checksum(weights_);
}

const Tensor& Classifier::weight(const std::string& name) const {
    auto it = weights_.find(name);
    if (it == weights_.end()) throw std::out_of_range("no tensor '" + name + "' in '" + arch_.id + "'");
    return *it->second;
}

ad::NodeId Classifier::append_logits(ad::Graph& graph, ad::NodeId x) const {
    return append_forward(graph, arch_, x,
                          [&](const std::string& name) { return graph.constant(weights_.at(name)); });
}

Classifier build_model(const ArchSpec& spec, std::uint64_t seed) {
    WeightMap weights;
    const auto params = spec.parameters();
    for (std::size_t i = 0; i < params.size(); ++i) {
        const auto& p = params[i];
        Tensor t(p.shape);
        if (p.fan_in > 0) {
            Rng rng(derive_seed(seed, {static_cast<std::uint64_t>(i)}));
            const double std_dev = std::sqrt(2.0 / static_cast<double>(p.fan_in));
            for (Index k = 0; k < t.size(); ++k) t[k] = std_dev * rng.normal();
        }
        weights.emplace(p.name, std::make_shared<const Tensor>(std::move(t)));
    }
    return Classifier(spec, std::move(weights), TrainingInfo{{}, seed, 0.0, 0});
}

Tensor stack(std::span<const Tensor> images) {
    if (images.empty()) throw std::invalid_argument("stack: no images");
    Shape shape = images.front().shape();
    const Index per = images.front().size();
    shape.insert(shape.begin(), static_cast<Index>(images.size()));
    Tensor out(shape);
    for (std::size_t i = 0; i < images.size(); ++i) {
        if (images[i].shape() != images.front().shape()) {
            throw std::invalid_argument("stack: image " + std::to_string(i) + " has shape " +
                                        to_string(images[i].shape()));
        }
        out.data().segment(static_cast<Index>(i) * per, per) = images[i].data();
    }
    return out;
}

Tensor forward_logits(const Classifier& model, const Tensor& batch) {
    const auto& in = model.arch().input;
    if (batch.rank() != 4 || batch.dim(1) != in.channels || batch.dim(2) != in.height || batch.dim(3) != in.width) {
        throw std::invalid_argument("forward_logits: batch shape " + to_string(batch.shape()) + " does not match [N," +
                                    std::to_string(in.channels) + "," + std::to_string(in.height) + "," +
                                    std::to_string(in.width) + "] for '" + model.arch().id + "'");
    }
    ad::Graph g;
    g.set_output(model.append_logits(g, g.input("x")));
    return ad::eval(g, {{"x", batch}});
}

Index argmax_row(const Tensor& logits, Index row) {
    const Index k = logits.dim(logits.rank() - 1);
    Index best = 0;
    logits.data().segment(row * k, k).maxCoeff(&best);
    return best;
}

std::vector<Index> predict(const Classifier& model, std::span<const data::LabeledSample> samples, Index batch) {
    std::vector<Index> out;
    out.reserve(samples.size());
    std::vector<Tensor> chunk;
    for (std::size_t start = 0; start < samples.size(); start += static_cast<std::size_t>(batch)) {
        const std::size_t end = std::min(samples.size(), start + static_cast<std::size_t>(batch));
        chunk.clear();
        for (std::size_t i = start; i < end; ++i) chunk.push_back(samples[i].image);
        const Tensor logits = forward_logits(model, stack(chunk));
        for (std::size_t i = 0; i < chunk.size(); ++i) out.push_back(argmax_row(logits, static_cast<Index>(i)));
    }
    return out;
}

double accuracy(const Classifier& model, std::span<const data::LabeledSample> samples) {
    if (samples.empty()) throw std::invalid_argument("accuracy of an empty sample set");
    const auto pred = predict(model, samples);
    Index correct = 0;
    for (std::size_t i = 0; i < samples.size(); ++i) correct += pred[i] == samples[i].label ? 1 : 0;
    return static_cast<double>(correct) / static_cast<double>(samples.size());
}

TrainResult train(const Classifier& model, std::span<const data::LabeledSample> train_set,
                  std::span<const data::LabeledSample> test_set, const TrainParams& params,
                  const std::string& dataset_id) {
    if (train_set.empty()) throw std::invalid_argument("train: empty training set");
    if (params.batch_size < 1 || params.epochs < 0 || !(params.learning_rate >= 0.0) || !(params.momentum >= 0.0) ||
        !(params.weight_decay >= 0.0)) {
        throw std::invalid_argument("train: invalid hyperparameters");
    }
    const auto& arch = model.arch();
    for (const auto& s : train_set) {
        if (s.label < 0 || s.label >= arch.classes) {
            throw std::invalid_argument("train: label " + std::to_string(s.label) + " out of range");
        }
    }

    std::map<std::string, Tensor> weights, velocity;
    std::vector<std::string> names;
    for (const auto& [name, t] : model.weights()) {
        weights.emplace(name, *t);
        velocity.emplace(name, Tensor(t->shape()));
        names.push_back(name);
    }

    std::vector<Index> order(train_set.size());
    std::iota(order.begin(), order.end(), Index{0});
    std::vector<EpochRecord> history;
    std::vector<Tensor> images;
    std::vector<Index> labels;

    for (Index epoch = 0; epoch < params.epochs; ++epoch) {
        Rng rng(derive_seed(params.seed, {static_cast<std::uint64_t>(epoch)}));
        for (std::size_t i = order.size(); i > 1; --i) {
            const auto j = static_cast<std::size_t>(rng.uniform_int(0, static_cast<std::int64_t>(i) - 1));
            std::swap(order[i - 1], order[j]);
        }
        double loss_sum = 0.0;
        Index batches = 0;
        for (std::size_t start = 0; start < order.size(); start += static_cast<std::size_t>(params.batch_size)) {
            const std::size_t end = std::min(order.size(), start + static_cast<std::size_t>(params.batch_size));
            images.clear();
            labels.clear();
            for (std::size_t i = start; i < end; ++i) {
                const auto& s = train_set[static_cast<std::size_t>(order[i])];
                images.push_back(s.image);
                labels.push_back(s.label);
            }
            ad::Graph g;
            std::map<std::string, ad::NodeId> nodes;
            auto logits = append_forward(g, arch, g.input("x"), [&](const std::string& name) {
                auto [it, inserted] = nodes.try_emplace(name, 0);
                if (inserted) it->second = g.input(name);
                return it->second;
            });
            g.set_output(losses::append_hard_loss(g, logits, labels));

            ad::Bindings bindings{{"x", stack(images)}};
            for (const auto& [name, t] : weights) bindings.emplace(name, t);
            auto result = ad::value_and_grad(g, bindings, names);
            const double loss = result.value.item();
            if (!std::isfinite(loss)) {
                throw std::runtime_error("training '" + arch.id + "' diverged (non-finite loss) in epoch " +
                                         std::to_string(epoch));
            }
            loss_sum += loss;
            ++batches;
            for (const auto& name : names) {
                auto& v = velocity.at(name).data();
                auto& w = weights.at(name).data();
                v = params.momentum * v + result.grads.at(name).data() + params.weight_decay * w;
                w -= params.learning_rate * v;
            }
        }
        WeightMap snapshot;
        for (const auto& [name, t] : weights) snapshot.emplace(name, std::make_shared<const Tensor>(t));
        const double acc = test_set.empty() ? 0.0 : accuracy(Classifier(arch, snapshot), test_set);
        history.push_back({epoch, loss_sum / static_cast<double>(batches), acc});
    }

    WeightMap final_weights;
    for (auto& [name, t] : weights) final_weights.emplace(name, std::make_shared<const Tensor>(std::move(t)));
    TrainingInfo info{dataset_id, params.seed, history.empty() ? 0.0 : history.back().test_accuracy,
                      params.epochs};
    if (history.empty() && !test_set.empty()) info.test_accuracy = accuracy(model, test_set);
    return {Classifier(arch, std::move(final_weights), std::move(info)), std::move(history)};
}

std::string encode_weights(const Classifier& model) {
    io::ByteWriter w;
    w.put_bytes("IKDW", 4);
    w.put<std::uint32_t>(kWeightFormatVersion);
    w.put_string(model.arch().id);
    w.put<std::uint32_t>(static_cast<std::uint32_t>(model.weights().size()));
    for (const auto& [name, t] : model.weights()) {
        w.put_string(name);
        w.put<std::uint32_t>(static_cast<std::uint32_t>(t->rank()));
        for (Index d : t->shape()) w.put<std::uint64_t>(static_cast<std::uint64_t>(d));
        w.put_bytes(t->raw(), sizeof(double) * static_cast<std::size_t>(t->size()));
    }
    w.put<std::uint64_t>(model.checksum());
    return w.take();
}

Classifier decode_weights(const ArchSpec& spec, std::string_view bytes, const std::string& what) {
    io::ByteReader r(bytes, what);
    if (std::string_view(r.take(4), 4) != "IKDW") throw io::CorruptFile(what + ": bad magic");
    const auto version = r.get<std::uint32_t>();
    if (version != kWeightFormatVersion) {
        throw io::CorruptFile(what + ": unknown format version " + std::to_string(version));
    }
    const std::string arch_id = r.get_string();
    const auto count = r.get<std::uint32_t>();
    if (count > 4096) throw io::CorruptFile(what + ": implausible tensor count");

    std::map<std::string, Shape> expected;
    for (const auto& p : spec.parameters()) expected.emplace(p.name, p.shape);

    WeightMap weights;
    for (std::uint32_t i = 0; i < count; ++i) {
        std::string name = r.get_string();
        const auto rank = r.get<std::uint32_t>();
        if (rank > 8) throw io::CorruptFile(what + ": tensor '" + name + "' has implausible rank");
        Shape shape;
        for (std::uint32_t d = 0; d < rank; ++d) {
            const auto dim = r.get<std::uint64_t>();
            if (dim == 0 || dim > (1u << 28)) throw io::CorruptFile(what + ": tensor '" + name + "' bad dimension");
            shape.push_back(static_cast<Index>(dim));
        }
        auto it = expected.find(name);
        if (it == expected.end()) {
            throw std::invalid_argument(what + ": tensor '" + name + "' is not part of arch '" + spec.id + "'");
        }
        if (it->second != shape) {
            throw std::invalid_argument(what + ": tensor '" + name + "' has shape " + to_string(shape) +
                                        " but arch '" + spec.id + "' expects " + to_string(it->second));
        }
        Tensor t(shape);
        const auto nbytes = sizeof(double) * static_cast<std::size_t>(t.size());
        std::memcpy(t.raw(), r.take(nbytes), nbytes);
        weights.emplace(std::move(name), std::make_shared<const Tensor>(std::move(t)));
    }
    const auto stored = r.get<std::uint64_t>();
    if (r.remaining() != 0) throw io::CorruptFile(what + ": trailing bytes after footer");
    if (arch_id != spec.id) {
        throw std::invalid_argument(what + ": file holds arch '" + arch_id + "', expected '" + spec.id + "'");
    }
    Classifier model(spec, std::move(weights));
    if (model.checksum() != stored) {
        throw io::CorruptFile(what + ": weight checksum mismatch (stored " + hex64(stored) + ", computed " +
                              hex64(model.checksum()) + ")");
    }
    return model;
}

void save_weights(const Classifier& model, const std::filesystem::path& path) {
    io::write_file_atomic(path, encode_weights(model));
}

Classifier load_weights(const ArchSpec& spec, const std::filesystem::path& path) {
    return decode_weights(spec, io::read_file(path), path.string());
}

std::vector<ArchSpec> toy_zoo(data::ImageGeometry input, Index classes) {
    using L = LayerSpec;
    std::vector<ArchSpec> zoo{
        {"mlp_s", input, classes, {L::flatten(), L::dense(64), L::relu(), L::dense(classes)}},
        {"mlp_d", input, classes,
         {L::flatten(), L::dense(96), L::relu(), L::dense(48), L::relu(), L::dense(classes)}},
        {"cnn_s", input, classes,
         {L::conv(6, 5, 2, 2), L::relu(), L::conv(12, 3, 1, 1), L::relu(), L::pool(2), L::flatten(),
          L::dense(classes)}},
        {"cnn_dw", input, classes,
         {L::conv(8, 3, 1, 1), L::relu(), L::pool(2), L::depthwise(3, 1, 1), L::relu(), L::conv(16, 1), L::relu(),
          L::pool(2), L::flatten(), L::dense(32), L::relu(), L::dense(classes)}},
        {"cnn_w", input, classes,
         {L::conv(4, 7, 1, 3), L::relu(), L::pool(4), L::flatten(), L::dense(64), L::relu(), L::dense(classes)}},
    };
    for (const auto& a : zoo) a.validate();
    return zoo;
}

const ArchSpec& find_arch(const std::vector<ArchSpec>& zoo, const std::string& id) {
    for (const auto& a : zoo) {
        if (a.id == id) return a;
    }
    throw std::invalid_argument("unknown architecture '" + id + "'");
}

}  // namespace ikd::models
