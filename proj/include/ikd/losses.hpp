#pragma once

#include "ikd/graph.hpp"
#include "ikd/tensor.hpp"

#include <Eigen/Dense>

#include <cmath>
#include <stdexcept>
#include <string>
#include <string_view>
#include <vector>

/// Attack objectives: hard-label cross-entropy plus the inverse-distillation
/// soft term between the surrogate's benign and adversarial output
/// distributions.
///
/// Two routes are provided. The templated free functions evaluate the
/// losses and their closed-form gradients directly on Eigen vectors; the
/// append_* builders emit the same objectives into an autodiff graph. The
/// attack engine differentiates the graph route; tests hold it against the
/// closed forms.
namespace ikd::losses {

/// Probabilities are clamped below at this value and renormalized before any
/// soft loss sees them.
inline constexpr double kProbabilityFloor = 1e-12;

enum class SoftKind { None, KL, CE, MSE };

std::string_view to_string(SoftKind kind);
/// Accepts "none", "kl", "ce", "mse" in any case.
SoftKind parse_soft_kind(std::string_view text);

struct LossSpec {
    SoftKind kind = SoftKind::None;
    double gamma = 0.0;

    /// False when the soft term is absent or weighted by exactly zero; the
    /// total objective is then the hard loss, bit for bit.
    bool active() const { return kind != SoftKind::None && gamma != 0.0; }
    void validate() const;
};

/// A length-K distribution with every entry >= kProbabilityFloor.
class ProbabilityVector {
public:
    /// Clamps at the floor and renormalizes. Input must be finite,
    /// non-negative, and non-empty.
    static ProbabilityVector stabilized(const Eigen::Ref<const Eigen::VectorXd>& raw);

    const Eigen::VectorXd& values() const { return probs_; }
    Index size() const { return probs_.size(); }
    double operator[](Index i) const { return probs_(i); }

private:
    explicit ProbabilityVector(Eigen::VectorXd probs) : probs_(std::move(probs)) {}
    Eigen::VectorXd probs_;
};

namespace detail {
[[noreturn]] void length_mismatch(Index a, Index b);
[[noreturn]] void bad_label(Index label, Index classes);
}  // namespace detail

/// Max-subtracted softmax, floor-clamped and renormalized.
template <typename Derived>
ProbabilityVector softmax_probs(const Eigen::MatrixBase<Derived>& logits) {
    Eigen::VectorXd z = logits.template cast<double>();
    Eigen::VectorXd e = (z.array() - z.maxCoeff()).exp().matrix();
    return ProbabilityVector::stabilized(e / e.sum());
}

/// -log softmax(logits)[label], via log-sum-exp.
template <typename Derived>
typename Derived::Scalar hard_loss(const Eigen::MatrixBase<Derived>& logits, Index label) {
    using Scalar = typename Derived::Scalar;
    if (label < 0 || label >= logits.size()) detail::bad_label(label, logits.size());
    const Scalar top = logits.maxCoeff();
    const Scalar lse = top + std::log((logits.array() - top).exp().sum());
    return lse - logits(label);
}

/// KL = sum p log(p/q), CE = -sum p log q, MSE = mean (p-q)^2.
template <typename DerivedP, typename DerivedQ>
typename DerivedP::Scalar soft_loss(SoftKind kind, const Eigen::MatrixBase<DerivedP>& p,
                                    const Eigen::MatrixBase<DerivedQ>& q) {
    if (p.size() != q.size()) detail::length_mismatch(p.size(), q.size());
    switch (kind) {
    case SoftKind::KL:
        return (p.array() * (p.array() / q.array()).log()).sum();
    case SoftKind::CE:
        return -(p.array() * q.array().log()).sum();
    case SoftKind::MSE:
        return (p - q).squaredNorm() / static_cast<typename DerivedP::Scalar>(p.size());
    case SoftKind::None:
        break;
    }
    return 0;
}

/// Closed-form d soft_loss / d q:
///   KL, CE: -p_i / q_i
///   MSE:    (2/K) (q_i - p_i)
template <typename DerivedP, typename DerivedQ>
Eigen::Matrix<typename DerivedP::Scalar, Eigen::Dynamic, 1> soft_loss_grad(
    SoftKind kind, const Eigen::MatrixBase<DerivedP>& p, const Eigen::MatrixBase<DerivedQ>& q) {
    using Scalar = typename DerivedP::Scalar;
    using Vec = Eigen::Matrix<Scalar, Eigen::Dynamic, 1>;
    if (p.size() != q.size()) detail::length_mismatch(p.size(), q.size());
    switch (kind) {
    case SoftKind::KL:
    case SoftKind::CE:
        return Vec(-(p.array() / q.array()).matrix());
    case SoftKind::MSE:
        return Vec((Scalar(2) / static_cast<Scalar>(p.size())) * (q - p));
    case SoftKind::None:
        break;
    }
    return Vec::Zero(p.size());
}

inline double soft_loss(SoftKind kind, const ProbabilityVector& p, const ProbabilityVector& q) {
    return soft_loss(kind, p.values(), q.values());
}

inline Eigen::VectorXd soft_loss_grad(SoftKind kind, const ProbabilityVector& p,
                                      const ProbabilityVector& q) {
    return soft_loss_grad(kind, p.values(), q.values());
}

/// hard_loss + gamma * soft_loss(p_benign, softmax_probs(logits)). With an
/// inactive spec this returns hard_loss exactly.
template <typename Derived>
double total_loss(const Eigen::MatrixBase<Derived>& logits, Index label, const ProbabilityVector& p_benign,
                  const LossSpec& spec) {
    const double hard = hard_loss(logits, label);
    if (!spec.active()) return hard;
    if (p_benign.size() != logits.size()) detail::length_mismatch(p_benign.size(), logits.size());
    return hard + spec.gamma * soft_loss(spec.kind, p_benign, softmax_probs(logits));
}

/// Mean over the batch of -log softmax(logits)[i, labels[i]]. logits is [N,K].
ad::NodeId append_hard_loss(ad::Graph& graph, ad::NodeId logits, std::vector<Index> labels);

/// Soft loss between a constant benign distribution and the probability
/// node q (same shape, [K] or [N,K]); averaged over rows. No gradient flows
/// into p_benign.
ad::NodeId append_soft_loss(ad::Graph& graph, SoftKind kind, const Tensor& p_benign, ad::NodeId q);

/// hard + gamma * soft(p_benign, floored softmax(logits)). When the spec is
/// inactive no soft nodes are emitted at all.
ad::NodeId append_total_loss(ad::Graph& graph, ad::NodeId logits, std::vector<Index> labels,
                             const Tensor& p_benign, const LossSpec& spec);

}  // namespace ikd::losses
