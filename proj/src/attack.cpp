#include "ikd/attack.hpp"

#include <algorithm>
#include <cctype>
#include <cmath>
#include <numbers>

namespace ikd::attack {

namespace {

std::string normalize_token(std::string_view text) {
    std::string out;
    for (char c : text) {
        if (c == '-' || c == '_' || c == ' ') continue;
        out.push_back(static_cast<char>(std::toupper(static_cast<unsigned char>(c))));
    }
    return out;
}

Shape batched(const Shape& chw) {
    Shape s = chw;
    s.insert(s.begin(), 1);
    return s;
}

LossFn graph_loss(const ad::Graph& graph, const Shape& image_shape) {
    return [&graph, image_shape](const Tensor& x) {
        auto r = ad::value_and_grad(graph, {{"x", x.reshaped(batched(image_shape))}}, {"x"});
        return LossEval{r.value.item(), r.grads.at("x").reshaped(image_shape)};
    };
}

}  // namespace

std::string_view to_string(Method method) {
    switch (method) {
    case Method::MIFGSM: return "MIFGSM";
    case Method::NIFGSM: return "NIFGSM";
    case Method::DIFGSM: return "DIFGSM";
    case Method::TIFGSM: return "TIFGSM";
    case Method::SINIFGSM: return "SINIFGSM";
    case Method::VMIFGSM: return "VMIFGSM";
    case Method::VNIFGSM: return "VNIFGSM";
    }
    return "?";
}

Method parse_method(std::string_view text) {
    const auto key = normalize_token(text);
    for (Method m : kAllMethods) {
        if (key == to_string(m)) return m;
    }
    throw std::invalid_argument("unknown attack method '" + std::string(text) + "'");
}

std::string_view to_string(StepPolicy policy) {
    return policy == StepPolicy::Fixed ? "fixed" : "epsilon_over_steps";
}

StepPolicy parse_step_policy(std::string_view text) {
    if (text == "fixed") return StepPolicy::Fixed;
    if (text == "epsilon_over_steps") return StepPolicy::EpsilonOverSteps;
    throw std::invalid_argument("unknown step policy '" + std::string(text) + "' (fixed | epsilon_over_steps)");
}

double AttackConfig::step_size() const {
    return step_policy == StepPolicy::Fixed ? alpha : epsilon / static_cast<double>(steps);
}

void AttackConfig::validate() const {
    loss.validate();
    auto require = [](bool ok, const char* what) {
        if (!ok) throw std::invalid_argument(std::string("attack config: ") + what);
    };
    require(epsilon > 0.0 && epsilon <= 1.0, "epsilon must be in (0, 1]");
    require(steps >= 1, "steps must be >= 1");
    require(alpha > 0.0 && std::isfinite(alpha), "alpha must be > 0");
    require(mu >= 0.0 && std::isfinite(mu), "mu must be >= 0");
    require(params.pixel_min < params.pixel_max, "pixel_min must be < pixel_max");
    require(params.di_prob >= 0.0 && params.di_prob <= 1.0, "di_prob must be in [0, 1]");
    require(params.di_max_ratio >= 1.0 && std::isfinite(params.di_max_ratio), "di_max_ratio must be >= 1");
    require(params.ti_kernel_len >= 1 && params.ti_kernel_len % 2 == 1, "ti_kernel_len must be odd and >= 1");
    require(params.ti_sigma > 0.0, "ti_sigma must be > 0");
    require(params.si_copies >= 1, "si_copies must be >= 1");
    require(params.vt_samples >= 1, "vt_samples must be >= 1");
    require(params.vt_beta > 0.0, "vt_beta must be > 0");
}

Tensor momentum_update(const Tensor& g, const Tensor& raw_grad, double mu) {
    if (g.shape() != raw_grad.shape()) {
        throw std::invalid_argument("momentum_update: shape " + ikd::to_string(g.shape()) + " vs " +
                                    ikd::to_string(raw_grad.shape()));
    }
    const double l1 = raw_grad.data().abs().sum();
    if (!(l1 > 0.0)) throw VanishedGradient("vanished gradient: L1 norm is " + std::to_string(l1));
    return Tensor(g.shape(), mu * g.data() + raw_grad.data() / l1);
}

Tensor project(const Tensor& x, const Tensor& x_orig, double epsilon, double pixel_min, double pixel_max) {
    if (x.shape() != x_orig.shape()) throw std::invalid_argument("project: shape mismatch");
    auto lo = (x_orig.data() - epsilon).max(pixel_min);
    auto hi = (x_orig.data() + epsilon).min(pixel_max);
    return Tensor(x.shape(), x.data().max(lo).min(hi));
}

Tensor step_and_project(const Tensor& x_adv, const Tensor& g, double alpha, const Tensor& x_orig, double epsilon,
                        double pixel_min, double pixel_max) {
    if (x_adv.shape() != g.shape()) throw std::invalid_argument("step_and_project: shape mismatch");
    Tensor candidate(x_adv.shape(), x_adv.data() + alpha * g.data().sign());
    return project(candidate, x_orig, epsilon, pixel_min, pixel_max);
}

DiversityDraw draw_diversity(Index size, double prob, double max_ratio, Rng& rng) {
    if (!(prob >= 0.0 && prob <= 1.0)) throw std::invalid_argument("input_diversity: prob must be in [0, 1]");
    if (!(max_ratio >= 1.0) || !std::isfinite(max_ratio)) {
        throw std::invalid_argument("input_diversity: max_ratio must be >= 1");
    }
    DiversityDraw d;
    const auto canvas = static_cast<Index>(std::floor(static_cast<double>(size) * max_ratio));
    if (rng.uniform() >= prob || canvas <= size) return d;
    d.apply = true;
    d.canvas = canvas;
    d.resized = rng.uniform_int(size, canvas);
    d.top = rng.uniform_int(0, canvas - d.resized);
    d.left = rng.uniform_int(0, canvas - d.resized);
    return d;
}

ad::NodeId append_diversity(ad::Graph& graph, ad::NodeId x, const DiversityDraw& draw, Index height, Index width) {
    if (!draw.apply) return x;
    auto h = graph.resize_bilinear(x, draw.resized, draw.resized);
    h = graph.zero_pad(h, draw.top, draw.left, draw.canvas, draw.canvas);
    return graph.resize_bilinear(h, height, width);
}

Tensor input_diversity(const Tensor& x, double prob, double max_ratio, Rng& rng) {
    if (x.rank() < 2) throw std::invalid_argument("input_diversity: needs an image");
    const Index h = x.dim(x.rank() - 2), w = x.dim(x.rank() - 1);
    if (h != w) throw std::invalid_argument("input_diversity: square images only");
    const auto draw = draw_diversity(h, prob, max_ratio, rng);
    if (!draw.apply) return x;
    ad::Graph g;
    g.set_output(append_diversity(g, g.input("x"), draw, h, w));
    return ad::eval(g, {{"x", x}});
}

Tensor gaussian_kernel(Index len, double sigma) {
    if (len < 1 || len % 2 == 0) throw std::invalid_argument("gaussian kernel length must be odd, got " +
                                                             std::to_string(len));
    if (!(sigma > 0.0)) throw std::invalid_argument("gaussian kernel sigma must be > 0");
    Eigen::ArrayXd pos = Eigen::ArrayXd::LinSpaced(len, -sigma, sigma);
    if (len == 1) pos.setZero();
    Eigen::ArrayXd pdf = (-0.5 * pos.square()).exp() / std::sqrt(2.0 * std::numbers::pi);
    Eigen::MatrixXd outer = pdf.matrix() * pdf.matrix().transpose();
    outer /= outer.sum();
    Tensor k({len, len});
    k.matrix(len, len) = outer;
    return k;
}

Tensor ti_smooth(const Tensor& grad, Index kernel_len, double sigma) {
    const Tensor kernel = gaussian_kernel(kernel_len, sigma);
    if (grad.rank() != 3 && grad.rank() != 4) throw std::invalid_argument("ti_smooth: expects [C,H,W] or [N,C,H,W]");
    const Index c = grad.dim(grad.rank() - 3);
    Tensor w({c, 1, kernel_len, kernel_len});
    for (Index i = 0; i < c; ++i) w.data().segment(i * kernel.size(), kernel.size()) = kernel.data();
    const Shape nchw = grad.rank() == 4 ? grad.shape() : batched(grad.shape());
    ad::Graph g;
    g.set_output(g.depthwise_conv2d(g.input("g"), g.constant(std::move(w)), {1, (kernel_len - 1) / 2}));
    return ad::eval(g, {{"g", grad.reshaped(nchw)}}).reshaped(grad.shape());
}

Tensor nesterov_point(const Tensor& x_adv, const Tensor& g, double alpha, double mu) {
    if (x_adv.shape() != g.shape()) throw std::invalid_argument("nesterov_point: shape mismatch");
    return Tensor(x_adv.shape(), x_adv.data() + alpha * mu * g.data());
}

LossEval scale_invariant_grad(const LossFn& loss, const Tensor& x_eval, Index copies) {
    if (copies < 1) throw std::invalid_argument("scale_invariant_grad: copies must be >= 1");
    LossEval out{0.0, Tensor(x_eval.shape())};
    for (Index i = 0; i < copies; ++i) {
        const double factor = std::ldexp(1.0, -static_cast<int>(i));
        auto r = loss(Tensor(x_eval.shape(), x_eval.data() * factor));
        if (i == 0) out.loss = r.loss;
        out.grad.data() += factor * r.grad.data();
    }
    out.grad.data() /= static_cast<double>(copies);
    return out;
}

VarianceTuned variance_tuned_grad(const LossFn& loss, const Tensor& x_eval, const Tensor& v_prev, Index samples,
                                  double beta, double epsilon, Rng& rng) {
    if (samples < 1) throw std::invalid_argument("variance_tuned_grad: samples must be >= 1");
    if (!(beta > 0.0)) throw std::invalid_argument("variance_tuned_grad: beta must be > 0");
    if (v_prev.shape() != x_eval.shape()) throw std::invalid_argument("variance_tuned_grad: shape mismatch");
    const auto center = loss(x_eval);
    const double radius = beta * epsilon;
    Tensor neighbour_sum(x_eval.shape());
    Tensor x_n(x_eval.shape());
    for (Index k = 0; k < samples; ++k) {
        for (Index i = 0; i < x_n.size(); ++i) x_n[i] = x_eval[i] + rng.uniform(-radius, radius);
        neighbour_sum.data() += loss(x_n).grad.data();
    }
    VarianceTuned out;
    out.loss = center.loss;
    out.grad_used = Tensor(x_eval.shape(), center.grad.data() + v_prev.data());
    out.v_next = Tensor(x_eval.shape(), neighbour_sum.data() / static_cast<double>(samples) - center.grad.data());
    return out;
}

ad::Graph loss_graph(const models::Classifier& surrogate, Index label, const Tensor& p_benign,
                     const losses::LossSpec& spec, const std::optional<DiversityDraw>& diversity) {
    const auto& in = surrogate.arch().input;
    ad::Graph g;
    auto x = g.input("x");
    if (diversity) x = append_diversity(g, x, *diversity, in.height, in.width);
    auto logits = surrogate.append_logits(g, x);
    g.set_output(losses::append_total_loss(g, logits, {label}, p_benign, spec));
    return g;
}

Tensor benign_probabilities(const models::Classifier& surrogate, const Tensor& image) {
    ad::Graph g;
    g.set_output(g.softmax(surrogate.append_logits(g, g.input("x")), losses::kProbabilityFloor));
    return ad::eval(g, {{"x", image.reshaped(batched(image.shape()))}});
}

AttackResult run_attack(const models::Classifier& surrogate, const data::LabeledSample& sample,
                        const AttackConfig& cfg, std::uint64_t stream, const StepObserver& observer) {
    cfg.validate();
    const auto& arch = surrogate.arch();
    const Tensor& x = sample.image;
    if (x.shape() != arch.input.chw()) {
        throw std::invalid_argument("run_attack: image shape " + ikd::to_string(x.shape()) + " does not match '" +
                                    arch.id + "'");
    }
    if (sample.label < 0 || sample.label >= arch.classes) throw std::invalid_argument("run_attack: bad label");
    const auto& mp = cfg.params;
    if (x.data().minCoeff() < mp.pixel_min || x.data().maxCoeff() > mp.pixel_max) {
        throw std::invalid_argument("run_attack: sample outside the pixel range");
    }

    const Tensor p_benign = cfg.loss.active() ? benign_probabilities(surrogate, x) : Tensor();
    const ad::Graph fixed_graph = loss_graph(surrogate, sample.label, p_benign, cfg.loss);
    const LossFn fixed_loss = graph_loss(fixed_graph, x.shape());

    ad::Graph predict_graph;
    predict_graph.set_output(surrogate.append_logits(predict_graph, predict_graph.input("x")));

    const double alpha = cfg.step_size();
    const bool nesterov = cfg.method == Method::NIFGSM || cfg.method == Method::SINIFGSM ||
                          cfg.method == Method::VNIFGSM;

    AttackResult result{x, {}, Tensor(x.shape())};
    Tensor& x_adv = result.x_adv;
    Tensor& g = result.momentum;
    Tensor v(x.shape());

    for (Index t = 0; t < cfg.steps; ++t) {
        Rng rng(derive_seed(cfg.seed, {stream, static_cast<std::uint64_t>(t)}));
        const Tensor x_eval = nesterov ? nesterov_point(x_adv, g, alpha, cfg.mu) : x_adv;

        LossEval eval;
        switch (cfg.method) {
        case Method::MIFGSM:
        case Method::NIFGSM:
            eval = fixed_loss(x_eval);
            break;
        case Method::DIFGSM: {
            const auto draw = draw_diversity(arch.input.height, mp.di_prob, mp.di_max_ratio, rng);
            const ad::Graph dg = loss_graph(surrogate, sample.label, p_benign, cfg.loss, draw);
            eval = graph_loss(dg, x.shape())(x_eval);
            break;
        }
        case Method::TIFGSM:
            eval = fixed_loss(x_eval);
            eval.grad = ti_smooth(eval.grad, mp.ti_kernel_len, mp.ti_sigma);
            break;
        case Method::SINIFGSM:
            eval = scale_invariant_grad(fixed_loss, x_eval, mp.si_copies);
            break;
        case Method::VMIFGSM:
        case Method::VNIFGSM: {
            auto vt = variance_tuned_grad(fixed_loss, x_eval, v, mp.vt_samples, mp.vt_beta, cfg.epsilon, rng);
            eval = {vt.loss, std::move(vt.grad_used)};
            v = std::move(vt.v_next);
            break;
        }
        }

        if (!eval.grad.all_finite() || !std::isfinite(eval.loss)) {
            throw std::runtime_error("step " + std::to_string(t) + ": non-finite gradient or loss");
        }
        const double l1 = eval.grad.data().abs().sum();
        try {
            g = momentum_update(g, eval.grad, cfg.mu);
        } catch (const VanishedGradient& e) {
            throw VanishedGradient("step " + std::to_string(t) + ": " + e.what());
        }
        x_adv = step_and_project(x_adv, g, alpha, x, cfg.epsilon, mp.pixel_min, mp.pixel_max);

        const double drift = (x_adv.data() - x.data()).abs().maxCoeff();
        if (drift > cfg.epsilon + 1e-12 || x_adv.data().minCoeff() < mp.pixel_min ||
            x_adv.data().maxCoeff() > mp.pixel_max) {
            throw std::logic_error("step " + std::to_string(t) + ": projection left the feasible set");
        }

        const Tensor logits = ad::eval(predict_graph, {{"x", x_adv.reshaped(batched(x.shape()))}});
        result.trace.push_back(
            {t, eval.loss, l1, models::argmax_row(logits, 0), Tensor(x.shape(), eval.grad.data() / l1)});
        if (observer) observer(t, x_adv);
    }
    return result;
}

}  // namespace ikd::attack
