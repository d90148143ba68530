#pragma once

// Committee machine: K hidden perceptrons over n inputs, majority vote output.
// The soft surrogate used for SGD is
//     z = beta * sum_k tanh(beta F_k) / sqrt(K),   s = tanh(z),
// with per-example loss -log((1 + y s) / 2) = softplus(-2 y z).

#include <cmath>

#include <Eigen/Dense>

#include "mcover/errors.hpp"

namespace mcover::committee {

/// K x n real weights J(k, i).
struct CommitteeParams {
    Eigen::MatrixXd J;

    int hidden() const { return static_cast<int>(J.rows()); }
    int inputs() const { return static_cast<int>(J.cols()); }
    int synapses() const { return static_cast<int>(J.size()); }
};

inline int sign_pm(double v) { return v >= 0.0 ? 1 : -1; }

inline int committee_forward_hard(const CommitteeParams& p, const Eigen::Ref<const Eigen::VectorXd>& x) {
    if (x.size() != p.inputs()) throw InvalidInput("committee input dimension mismatch");
    const Eigen::VectorXd fields = p.J * x;
    int vote = 0;
    for (Eigen::Index k = 0; k < fields.size(); ++k) vote += sign_pm(fields(k));
    return sign_pm(vote);
}

/// Hard labels for every row of X.
inline Eigen::VectorXi committee_predict(const CommitteeParams& p, const Eigen::MatrixXd& X) {
    const Eigen::MatrixXd fields = X * p.J.transpose();
    Eigen::VectorXi out(X.rows());
    for (Eigen::Index r = 0; r < X.rows(); ++r) {
        int vote = 0;
        for (Eigen::Index k = 0; k < fields.cols(); ++k) vote += sign_pm(fields(r, k));
        out(r) = sign_pm(vote);
    }
    return out;
}

inline double hard_error(const CommitteeParams& p, const Eigen::MatrixXd& X, const Eigen::VectorXd& y) {
    const Eigen::VectorXi pred = committee_predict(p, X);
    Eigen::Index wrong = 0;
    for (Eigen::Index r = 0; r < X.rows(); ++r) wrong += (pred(r) != static_cast<int>(y(r)));
    return X.rows() ? static_cast<double>(wrong) / static_cast<double>(X.rows()) : 0.0;
}

inline double softplus(double v) { return v > 0.0 ? v + std::log1p(std::exp(-v)) : std::log1p(std::exp(v)); }
inline double sigmoid(double v) {
    if (v >= 0.0) return 1.0 / (1.0 + std::exp(-v));
    const double e = std::exp(v);
    return e / (1.0 + e);
}

/// s in (-1, 1)
inline double committee_forward_soft(const CommitteeParams& p, const Eigen::Ref<const Eigen::VectorXd>& x, double beta) {
    if (!(beta > 0.0)) throw InvalidParameter("sharpness beta must be > 0");
    const Eigen::VectorXd fields = p.J * x;
    const double z = beta * (beta * fields.array()).tanh().sum() / std::sqrt(double(p.hidden()));
    return std::tanh(z);
}

/// Mean surrogate loss over the rows of X; if `grad` is non-null it receives the
/// K x n gradient of that mean.
inline double soft_loss_and_grad(const Eigen::MatrixXd& J, const Eigen::MatrixXd& X, const Eigen::VectorXd& y, double beta,
                                 Eigen::MatrixXd* grad) {
    const Eigen::Index B = X.rows();
    const double inv_sqrt_k = 1.0 / std::sqrt(double(J.rows()));
    const Eigen::MatrixXd th = (beta * (X * J.transpose())).array().tanh();  // B x K
    const Eigen::VectorXd z = beta * inv_sqrt_k * th.rowwise().sum();
    double loss = 0.0;
    Eigen::VectorXd dz(B);
    for (Eigen::Index r = 0; r < B; ++r) {
        const double m = -2.0 * y(r) * z(r);
        loss += softplus(m);
        dz(r) = -2.0 * y(r) * sigmoid(m) / static_cast<double>(B);
    }
    if (grad) {
        // dL/dF_k = dz * beta^2 / sqrt(K) * (1 - tanh^2)
        const Eigen::MatrixXd dF = ((1.0 - th.array().square()).colwise() * (dz.array() * beta * beta * inv_sqrt_k)).matrix();
        grad->noalias() = dF.transpose() * X;
    }
    return loss / static_cast<double>(B);
}

}  // namespace mcover::committee
