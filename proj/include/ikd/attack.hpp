#pragma once

#include "ikd/dataset.hpp"
#include "ikd/losses.hpp"
#include "ikd/model.hpp"
#include "ikd/random.hpp"
#include "ikd/tensor.hpp"

#include <cstdint>
#include <functional>
#include <optional>
#include <stdexcept>
#include <string>
#include <string_view>
#include <vector>

namespace ikd::attack {

enum class Method { MIFGSM, NIFGSM, DIFGSM, TIFGSM, SINIFGSM, VMIFGSM, VNIFGSM };

inline constexpr Method kAllMethods[] = {Method::MIFGSM,   Method::NIFGSM,  Method::DIFGSM, Method::TIFGSM,
                                         Method::SINIFGSM, Method::VMIFGSM, Method::VNIFGSM};

std::string_view to_string(Method method);
/// Case-insensitive; accepts "MIFGSM" or "mi-fgsm".
Method parse_method(std::string_view text);

enum class StepPolicy { Fixed, EpsilonOverSteps };

std::string_view to_string(StepPolicy policy);
StepPolicy parse_step_policy(std::string_view text);

struct MethodParams {
    double di_prob = 0.5;
    double di_max_ratio = 1.1;
    Index ti_kernel_len = 7;
    double ti_sigma = 3.0;
    Index si_copies = 5;
    Index vt_samples = 5;
    double vt_beta = 1.5;
    double pixel_min = 0.0;
    double pixel_max = 1.0;
};

struct AttackConfig {
    Method method = Method::MIFGSM;
    losses::LossSpec loss;
    double epsilon = 16.0 / 255.0;
    Index steps = 10;
    double alpha = 2.0 / 255.0;
    StepPolicy step_policy = StepPolicy::Fixed;
    double mu = 1.0;
    std::uint64_t seed = 0;
    MethodParams params;

    /// alpha, or epsilon / steps under EpsilonOverSteps.
    double step_size() const;
    void validate() const;
};

/// Raised when the raw gradient has zero L1 norm.
class VanishedGradient : public std::runtime_error {
public:
    using std::runtime_error::runtime_error;
};

struct StepRecord {
    Index t = 0;
    /// Objective at the evaluation point of this step.
    double loss = 0.0;
    /// L1 norm of the gradient fed to the momentum update.
    double grad_l1 = 0.0;
    /// Surrogate prediction on x_adv after the step.
    Index predicted = 0;
    /// gradient / grad_l1, the increment added to the momentum.
    Tensor normalized_grad;
};

using AttackTrace = std::vector<StepRecord>;

struct AttackResult {
    Tensor x_adv;
    AttackTrace trace;
    /// Momentum accumulator after the last step.
    Tensor momentum;
};

using StepObserver = std::function<void(Index t, const Tensor& x_adv)>;

/// Runs one attack on a single [C,H,W] sample. `stream` keys the per-step
/// random streams (normally the sample index) so results do not depend on
/// batching or thread count.
AttackResult run_attack(const models::Classifier& surrogate, const data::LabeledSample& sample,
                        const AttackConfig& cfg, std::uint64_t stream = 0, const StepObserver& observer = {});

/// mu * g + grad / ||grad||_1. Throws VanishedGradient on a zero gradient.
Tensor momentum_update(const Tensor& g, const Tensor& raw_grad, double mu);

/// clip(x_adv + alpha * sign(g)) to [x - eps, x + eps] and the pixel bounds.
Tensor step_and_project(const Tensor& x_adv, const Tensor& g, double alpha, const Tensor& x_orig, double epsilon,
                        double pixel_min, double pixel_max);

/// Clamp only.
Tensor project(const Tensor& x, const Tensor& x_orig, double epsilon, double pixel_min, double pixel_max);

struct DiversityDraw {
    bool apply = false;
    Index resized = 0;
    Index canvas = 0;
    Index top = 0;
    Index left = 0;
};

DiversityDraw draw_diversity(Index size, double prob, double max_ratio, Rng& rng);
/// Emits the transform for x [N,C,H,W]; returns x when the draw is inactive.
ad::NodeId append_diversity(ad::Graph& graph, ad::NodeId x, const DiversityDraw& draw, Index height, Index width);
/// Random resize and pad, then resize back to the input size. Works on
/// [C,H,W] or [N,C,H,W] square images.
Tensor input_diversity(const Tensor& x, double prob, double max_ratio, Rng& rng);

/// Normalized Gaussian kernel on linspace(-sigma, sigma, len), outer product.
Tensor gaussian_kernel(Index len, double sigma);
/// Same-padded depthwise convolution of each channel with gaussian_kernel.
Tensor ti_smooth(const Tensor& grad, Index kernel_len, double sigma);

Tensor nesterov_point(const Tensor& x_adv, const Tensor& g, double alpha, double mu);

struct LossEval {
    double loss = 0.0;
    Tensor grad;
};

using LossFn = std::function<LossEval(const Tensor& x)>;

/// (1/m) sum_i grad L(x / 2^i) taken with respect to x. The loss is that of
/// the unscaled copy.
LossEval scale_invariant_grad(const LossFn& loss, const Tensor& x_eval, Index copies);

struct VarianceTuned {
    double loss = 0.0;
    Tensor grad_used;
    Tensor v_next;
};

VarianceTuned variance_tuned_grad(const LossFn& loss, const Tensor& x_eval, const Tensor& v_prev, Index samples,
                                  double beta, double epsilon, Rng& rng);

/// Graph computing the attack objective for a single image bound as "x"
/// ([1,C,H,W]). p_benign is ignored when the spec is inactive.
ad::Graph loss_graph(const models::Classifier& surrogate, Index label, const Tensor& p_benign,
                     const losses::LossSpec& spec, const std::optional<DiversityDraw>& diversity = std::nullopt);

/// Floored softmax of the surrogate on a single [C,H,W] image, shape [1,K].
Tensor benign_probabilities(const models::Classifier& surrogate, const Tensor& image);

}  // namespace ikd::attack
