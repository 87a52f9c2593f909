#pragma once

#include "ikd/attack.hpp"
#include "ikd/dataset.hpp"
#include "ikd/graph.hpp"
#include "ikd/model.hpp"
#include "ikd/random.hpp"
#include "ikd/transfer.hpp"

#include <Eigen/Dense>

#include <cmath>
#include <filesystem>
#include <functional>
#include <string>
#include <unistd.h>
#include <vector>

namespace ikd::test {

inline Tensor random_tensor(Shape shape, Rng& rng, double lo = -1.0, double hi = 1.0) {
    Tensor t(std::move(shape));
    for (Index i = 0; i < t.size(); ++i) t[i] = rng.uniform(lo, hi);
    return t;
}

inline double relative_error(double a, double b) {
    const double scale = std::max({std::abs(a), std::abs(b), 1e-8});
    return std::abs(a - b) / scale;
}

/// Worst relative error of analytic vs numeric, scaled by the largest entry.
inline double relative_error(const Tensor& analytic, const Tensor& numeric) {
    const double scale = std::max({analytic.data().abs().maxCoeff(), numeric.data().abs().maxCoeff(), 1e-8});
    return (analytic.data() - numeric.data()).abs().maxCoeff() / scale;
}

/// Central finite differences of a scalar graph output w.r.t. one input.
inline Tensor numeric_grad(const ad::Graph& g, ad::Bindings bindings, const std::string& wrt, double h = 1e-5) {
    Tensor base = bindings.at(wrt);
    Tensor out(base.shape());
    for (Index i = 0; i < base.size(); ++i) {
        Tensor plus = base, minus = base;
        plus[i] += h;
        minus[i] -= h;
        bindings[wrt] = plus;
        const double fp = ad::eval(g, bindings).item();
        bindings[wrt] = minus;
        const double fm = ad::eval(g, bindings).item();
        out[i] = (fp - fm) / (2 * h);
    }
    return out;
}

/// logits = x W + b on a flattened [C,H,W] input.
inline models::Classifier linear_model(const Eigen::MatrixXd& w, const Eigen::VectorXd& b, data::ImageGeometry input,
                                       const std::string& id = "linear") {
    models::ArchSpec arch{id, input, w.cols(), {models::LayerSpec::flatten(), models::LayerSpec::dense(w.cols())}};
    Tensor wt({w.rows(), w.cols()});
    for (Index r = 0; r < w.rows(); ++r) {
        for (Index c = 0; c < w.cols(); ++c) wt[r * w.cols() + c] = w(r, c);
    }
    Tensor bt({b.size()});
    for (Index i = 0; i < b.size(); ++i) bt[i] = b(i);
    models::WeightMap weights{{"layer1.weight", std::make_shared<const Tensor>(wt)},
                              {"layer1.bias", std::make_shared<const Tensor>(bt)}};
    return models::Classifier(arch, weights);
}

inline data::SyntheticSpec small_spec() {
    data::SyntheticSpec s;
    s.size = 12;
    s.classes = 4;
    s.max_shift = 1;
    return s;
}

/// A small zoo on 12x12 glyphs, trained once per process.
struct SmallWorld {
    data::Dataset train_set;
    data::Dataset test_set;
    std::vector<data::LabeledSample> test_samples;
    eval::ModelRegistry models;
};

inline const SmallWorld& small_world() {
    static const SmallWorld world = [] {
        const auto spec = small_spec();
        SmallWorld w{data::make_synthetic(spec, 60, 11), data::make_synthetic(spec, 15, 22), {}, {}};
        w.test_samples = w.test_set.samples();
        const auto train = w.train_set.samples();
        Index i = 0;
        for (const auto& arch : models::toy_zoo(w.train_set.geometry(), spec.classes)) {
            models::TrainParams p;
            p.epochs = 24;
            p.seed = 100 + static_cast<std::uint64_t>(i);
            auto r = models::train(models::build_model(arch, 7 + static_cast<std::uint64_t>(i)), train, w.test_samples, p);
            w.models.emplace(arch.id, r.model);
            ++i;
        }
        return w;
    }();
    return world;
}

/// A fresh empty directory under the system temp dir, removed on destruction.
class TempDir {
public:
    explicit TempDir(const std::string& tag) {
        static int counter = 0;
        path_ = std::filesystem::temp_directory_path() /
                ("ikd-test-" + tag + "-" + std::to_string(::getpid()) + "-" + std::to_string(counter++));
        std::filesystem::remove_all(path_);
        std::filesystem::create_directories(path_);
    }
    ~TempDir() {
        std::error_code ec;
        std::filesystem::remove_all(path_, ec);
    }
    TempDir(const TempDir&) = delete;
    TempDir& operator=(const TempDir&) = delete;
    const std::filesystem::path& path() const { return path_; }

private:
    std::filesystem::path path_;
};

}  // namespace ikd::test
