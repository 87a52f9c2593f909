#pragma once

#include "support.hpp"

#include <Eigen/Dense>

#include <algorithm>
#include <cmath>
#include <vector>

namespace ikd::test {

/// Closed-form MI-FGSM with the hard + gamma * KL objective on a 2-class
/// linear surrogate z = W^T x + b.
///
/// With q = softmax(z), p = softmax(z_benign) and label y:
///   dL/dz = (q - e_y) + gamma * (q - p)
///   dL/dx = W dL/dz
struct LinearOracleStep {
    Eigen::VectorXd x_adv;
    double loss = 0.0;
    double grad_l1 = 0.0;
};

struct LinearOracle {
    Eigen::MatrixXd w;  // [d, 2]
    Eigen::VectorXd b;
    data::ImageGeometry geometry;

    static Eigen::VectorXd softmax(const Eigen::VectorXd& z) {
        const Eigen::VectorXd e = (z.array() - z.maxCoeff()).exp();
        return e / e.sum();
    }

    std::vector<LinearOracleStep> run(const Eigen::VectorXd& x, Index label, double gamma, double epsilon,
                                      double alpha, double mu, Index steps) const {
        const Eigen::VectorXd p = softmax(w.transpose() * x + b);
        Eigen::VectorXd onehot = Eigen::VectorXd::Zero(2);
        onehot(label) = 1.0;
        Eigen::VectorXd x_adv = x;
        Eigen::VectorXd g = Eigen::VectorXd::Zero(x.size());
        std::vector<LinearOracleStep> out;
        for (Index t = 0; t < steps; ++t) {
            const Eigen::VectorXd q = softmax(w.transpose() * x_adv + b);
            const double hard = -std::log(q(label));
            const double kl = (p.array() * (p.array() / q.array()).log()).sum();
            const Eigen::VectorXd dz = (q - onehot) + gamma * (q - p);
            const Eigen::VectorXd grad = w * dz;
            const double l1 = grad.lpNorm<1>();
            g = mu * g + grad / l1;
            for (Index i = 0; i < x.size(); ++i) {
                const double s = g(i) > 0 ? 1.0 : (g(i) < 0 ? -1.0 : 0.0);
                double v = x_adv(i) + alpha * s;
                v = std::clamp(v, x(i) - epsilon, x(i) + epsilon);
                x_adv(i) = std::clamp(v, 0.0, 1.0);
            }
            out.push_back({x_adv, hard + gamma * kl, l1});
        }
        return out;
    }

    models::Classifier model() const { return linear_model(w, b, geometry, "linear2"); }
};

/// Fixed 6-pixel instance: one pixel near the upper bound, alpha < epsilon < 2 alpha
/// so the second step hits the budget.
inline LinearOracle fixed_linear_oracle() {
    LinearOracle o;
    o.geometry = {1, 2, 3};
    o.w.resize(6, 2);
    o.w << 0.8, -0.3, -1.2, 0.4, 0.5, 0.9, 2.0, -1.0, -0.6, -0.1, 0.3, -0.7;
    o.b.resize(2);
    o.b << 0.2, -0.1;
    return o;
}

inline Eigen::VectorXd fixed_linear_input() {
    Eigen::VectorXd x(6);
    x << 0.30, 0.55, 0.998, 0.10, 0.0015, 0.72;
    return x;
}

inline Tensor to_image(const Eigen::VectorXd& x, const data::ImageGeometry& g) {
    Tensor t({g.channels, g.height, g.width});
    for (Index i = 0; i < x.size(); ++i) t[i] = x(i);
    return t;
}

}  // namespace ikd::test
