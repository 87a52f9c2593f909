#include "ikd/losses.hpp"

#include <algorithm>
#include <cctype>

namespace ikd::losses {

namespace detail {

void length_mismatch(Index a, Index b) {
    throw std::invalid_argument("probability vectors differ in length: " + std::to_string(a) + " vs " +
                                std::to_string(b));
}

void bad_label(Index label, Index classes) {
    throw std::invalid_argument("label " + std::to_string(label) + " out of range for " +
                                std::to_string(classes) + " classes");
}

}  // namespace detail

std::string_view to_string(SoftKind kind) {
    switch (kind) {
    case SoftKind::None: return "NONE";
    case SoftKind::KL: return "KL";
    case SoftKind::CE: return "CE";
    case SoftKind::MSE: return "MSE";
    }
    return "?";
}

SoftKind parse_soft_kind(std::string_view text) {
    std::string up(text);
    std::transform(up.begin(), up.end(), up.begin(), [](unsigned char c) { return std::toupper(c); });
    if (up == "NONE") return SoftKind::None;
    if (up == "KL") return SoftKind::KL;
    if (up == "CE") return SoftKind::CE;
    if (up == "MSE") return SoftKind::MSE;
    throw std::invalid_argument("unknown soft loss kind '" + std::string(text) + "'");
}

void LossSpec::validate() const {
    if (!(gamma >= 0.0) || !std::isfinite(gamma)) {
        throw std::invalid_argument("distillation weight gamma must be finite and >= 0");
    }
}

ProbabilityVector ProbabilityVector::stabilized(const Eigen::Ref<const Eigen::VectorXd>& raw) {
    if (raw.size() == 0) throw std::invalid_argument("empty probability vector");
    if (!raw.allFinite() || (raw.array() < 0.0).any()) {
        throw std::invalid_argument("probability vector must be finite and non-negative");
    }
    Eigen::VectorXd p = raw.array().max(kProbabilityFloor).matrix();
    p /= p.sum();
    return ProbabilityVector(std::move(p));
}

ad::NodeId append_hard_loss(ad::Graph& graph, ad::NodeId logits, std::vector<Index> labels) {
    const double n = static_cast<double>(labels.size());
    auto picked = graph.gather(graph.log(graph.softmax(logits)), std::move(labels));
    return graph.scale(graph.sum(picked), -1.0 / n);
}

ad::NodeId append_soft_loss(ad::Graph& graph, SoftKind kind, const Tensor& p_benign, ad::NodeId q) {
    const Index k = p_benign.dim(p_benign.rank() - 1);
    const double rows = static_cast<double>(p_benign.size() / k);
    auto p = graph.constant(p_benign);
    switch (kind) {
    case SoftKind::KL: {
        auto log_p = graph.constant(Tensor(p_benign.shape(), p_benign.data().log()));
        auto terms = graph.mul(p, graph.sub(log_p, graph.log(q)));
        return graph.scale(graph.sum(terms), 1.0 / rows);
    }
    case SoftKind::CE:
        return graph.scale(graph.sum(graph.mul(p, graph.log(q))), -1.0 / rows);
    case SoftKind::MSE: {
        auto d = graph.sub(q, p);
        return graph.scale(graph.sum(graph.mul(d, d)), 1.0 / (rows * static_cast<double>(k)));
    }
    case SoftKind::None:
        break;
    }
    throw std::invalid_argument("append_soft_loss: no soft loss kind given");
}

ad::NodeId append_total_loss(ad::Graph& graph, ad::NodeId logits, std::vector<Index> labels,
                             const Tensor& p_benign, const LossSpec& spec) {
    auto hard = append_hard_loss(graph, logits, std::move(labels));
    if (!spec.active()) return hard;
    auto q = graph.softmax(logits, kProbabilityFloor);
    auto soft = append_soft_loss(graph, spec.kind, p_benign, q);
    return graph.add(hard, graph.scale(soft, spec.gamma));
}

}  // namespace ikd::losses
