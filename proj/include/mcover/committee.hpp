#pragma once

// M-cover committee machine: routed hidden fields over a destination bank of
// synapses q = (k, i), SGD on the channel-averaged surrogate, plus vanilla SGD
// and replicated SGD baselines.

#include <chrono>
#include <cmath>
#include <numeric>
#include <optional>
#include <string>
#include <vector>

#include <Eigen/Dense>

#include "mcover/committee_model.hpp"
#include "mcover/data.hpp"
#include "mcover/errors.hpp"
#include "mcover/rng.hpp"
#include "mcover/routing.hpp"

namespace mcover::committee {

/// Synapse q = (k, i) is stored at J.data()[k + K * i] (Eigen column-major).
inline int synapse_index(int K, int k, int i) { return k + K * i; }

struct CommitteeCoverEnsemble {
    std::vector<Eigen::MatrixXd> covers;

    int M() const { return static_cast<int>(covers.size()); }
    int hidden() const { return covers.empty() ? 0 : static_cast<int>(covers.front().rows()); }
    int inputs() const { return covers.empty() ? 0 : static_cast<int>(covers.front().cols()); }
};

/// Gather table over a DestinationBank: src(s, a)[q] is the cover that supplies
/// synapse q to copy a of channel s.
class CommitteeRouting {
public:
    CommitteeRouting(int K, int n, DestinationBank bank) : K_(K), n_(n), bank_(std::move(bank)) {
        if (bank_.sites() != K * n) throw InvalidInput("destination bank must span all K*n synapses");
        const int S = bank_.channels(), M = bank_.covers(), Nsyn = K * n;
        src_.resize(static_cast<std::size_t>(S) * M * Nsyn);
        for (int s = 0; s < S; ++s)
            for (int a = 0; a < M; ++a)
                for (int q = 0; q < Nsyn; ++q) src_[offset(s, a) + q] = bank_.source_cover(q, s, a);
    }

    int channels() const { return bank_.channels(); }
    int covers() const { return bank_.covers(); }
    int hidden() const { return K_; }
    int inputs() const { return n_; }
    const DestinationBank& bank() const { return bank_; }
    const int* sources(int s, int a) const { return src_.data() + offset(s, a); }

    /// Routed weight matrix seen by copy a of channel s.
    Eigen::MatrixXd routed_weights(const CommitteeCoverEnsemble& ens, int s, int a) const {
        Eigen::MatrixXd R(K_, n_);
        const int* src = sources(s, a);
        for (int q = 0; q < K_ * n_; ++q) R.data()[q] = ens.covers[static_cast<std::size_t>(src[q])].data()[q];
        return R;
    }

private:
    std::size_t offset(int s, int a) const {
        return (static_cast<std::size_t>(s) * bank_.covers() + a) * static_cast<std::size_t>(K_) * n_;
    }
    int K_, n_;
    DestinationBank bank_;
    std::vector<int> src_;
};

inline CommitteeRouting build_committee_routing(int K, int n, int S, const PermutationBank& bank, Rng& rng) {
    return CommitteeRouting(K, n, build_destination_bank(K * n, S, bank, rng));
}

/// fields[s][a] is the B x K matrix of F_{mu k -> p_s}^{(a)}.
inline std::vector<std::vector<Eigen::MatrixXd>> routed_hidden_fields(const CommitteeCoverEnsemble& ens,
                                                                      const CommitteeRouting& routing,
                                                                      const Eigen::MatrixXd& X) {
    if (ens.M() != routing.covers()) throw InvalidInput("ensemble and routing disagree on M");
    if (X.cols() != ens.inputs()) throw InvalidInput("batch input dimension mismatch");
    std::vector<std::vector<Eigen::MatrixXd>> out(static_cast<std::size_t>(routing.channels()));
    for (int s = 0; s < routing.channels(); ++s)
        for (int a = 0; a < ens.M(); ++a) out[static_cast<std::size_t>(s)].push_back(X * routing.routed_weights(ens, s, a).transpose());
    return out;
}

inline void check_finite(double loss) {
    if (!std::isfinite(loss)) throw DivergenceError("non-finite surrogate loss");
}

/// (1/S) sum_s sum_a mean_mu loss; grads (if given) receive d/dJ^{(g)} for every cover g.
/// With M = 1 every channel is the base machine, and the base loss is returned directly.
inline double lifted_loss_and_grad(const CommitteeCoverEnsemble& ens, const CommitteeRouting& routing, const Eigen::MatrixXd& X,
                                   const Eigen::VectorXd& y, double beta, std::vector<Eigen::MatrixXd>* grads) {
    const int M = ens.M(), S = routing.channels(), Nsyn = ens.hidden() * ens.inputs();
    if (M != routing.covers()) throw InvalidInput("ensemble and routing disagree on M");
    if (X.rows() == 0) throw InvalidInput("empty batch");
    if (M == 1) {
        if (grads) grads->assign(1, Eigen::MatrixXd(ens.hidden(), ens.inputs()));
        return soft_loss_and_grad(ens.covers[0], X, y, beta, grads ? &(*grads)[0] : nullptr);
    }
    if (grads) grads->assign(static_cast<std::size_t>(M), Eigen::MatrixXd::Zero(ens.hidden(), ens.inputs()));
    Eigen::MatrixXd g;
    double total = 0.0;
    const double inv_s = 1.0 / S;
    for (int s = 0; s < S; ++s)
        for (int a = 0; a < M; ++a) {
            const Eigen::MatrixXd R = routing.routed_weights(ens, s, a);
            total += soft_loss_and_grad(R, X, y, beta, grads ? &g : nullptr);
            if (grads) {
                const int* src = routing.sources(s, a);
                for (int q = 0; q < Nsyn; ++q) (*grads)[static_cast<std::size_t>(src[q])].data()[q] += inv_s * g.data()[q];
            }
        }
    return total * inv_s;
}

/// Plain SGD on one machine; returns the batch loss before the update.
inline double sgd_step(Eigen::MatrixXd& J, const Eigen::MatrixXd& X, const Eigen::VectorXd& y, double beta, double lr) {
    Eigen::MatrixXd g;
    const double loss = soft_loss_and_grad(J, X, y, beta, &g);
    check_finite(loss);
    if (!g.allFinite()) throw DivergenceError("non-finite gradient");
    J -= lr * g;
    return loss;
}

inline double mcover_sgd_step(CommitteeCoverEnsemble& ens, const CommitteeRouting& routing, const Eigen::MatrixXd& X,
                              const Eigen::VectorXd& y, double beta, double lr) {
    std::vector<Eigen::MatrixXd> grads;
    const double loss = lifted_loss_and_grad(ens, routing, X, y, beta, &grads);
    check_finite(loss);
    for (int a = 0; a < ens.M(); ++a) {
        if (!grads[static_cast<std::size_t>(a)].allFinite()) throw DivergenceError("non-finite gradient");
        ens.covers[static_cast<std::size_t>(a)] -= lr * grads[static_cast<std::size_t>(a)];
    }
    return loss;
}

inline Eigen::MatrixXd replica_mean(const std::vector<Eigen::MatrixXd>& reps) {
    Eigen::MatrixXd m = Eigen::MatrixXd::Zero(reps.front().rows(), reps.front().cols());
    for (const auto& r : reps) m += r;
    return m / static_cast<double>(reps.size());
}

/// Each replica: own surrogate step plus lr * coupling * (mean - w). Returns the mean batch loss.
inline double rsgd_step(std::vector<Eigen::MatrixXd>& replicas, const Eigen::MatrixXd& X, const Eigen::VectorXd& y, double beta,
                        double lr, double coupling) {
    if (replicas.size() < 2) throw InvalidParameter("replicated SGD needs M >= 2");
    const Eigen::MatrixXd mean = replica_mean(replicas);
    double total = 0.0;
    Eigen::MatrixXd g;
    for (auto& J : replicas) {
        const double loss = soft_loss_and_grad(J, X, y, beta, &g);
        check_finite(loss);
        if (!g.allFinite()) throw DivergenceError("non-finite gradient");
        J += lr * coupling * (mean - J) - lr * g;
        total += loss;
    }
    return total / static_cast<double>(replicas.size());
}

inline CommitteeParams collapse_committee(const std::vector<Eigen::MatrixXd>& covers, bool sign_readout = false) {
    CommitteeParams p{replica_mean(covers)};
    if (sign_readout) p.J = p.J.unaryExpr([](double v) { return v >= 0.0 ? 1.0 : -1.0; });
    return p;
}

enum class Method { sgd, rsgd, mcover };

inline std::string to_string(Method m) {
    switch (m) {
        case Method::sgd: return "sgd";
        case Method::rsgd: return "rsgd";
        case Method::mcover: return "mcover";
    }
    return "?";
}

inline Method parse_method(const std::string& s) {
    if (s == "sgd" || s == "vanilla") return Method::sgd;
    if (s == "rsgd") return Method::rsgd;
    if (s == "mcover") return Method::mcover;
    throw InvalidParameter("unknown committee method '" + s + "'");
}

struct SurrogateSchedule {
    double beta_0 = 1.0;
    double beta_growth = 1.01;  // per epoch
    double beta_max = 1e3;
    double lr_0 = 0.01;
    double lr_decay = 0.0;  // lr_t = lr_0 / (1 + lr_decay * epoch)
    int max_epochs = 500;
    double loss_stop = 1e-7;
    int batch_size = 100;

    void validate() const {
        if (!(beta_0 > 0.0)) throw InvalidParameter("beta_0 must be > 0");
        if (!(beta_growth >= 1.0)) throw InvalidParameter("beta_growth must be >= 1");
        if (!(lr_0 > 0.0)) throw InvalidParameter("lr_0 must be > 0");
        if (!(lr_decay >= 0.0)) throw InvalidParameter("lr_decay must be >= 0");
        if (max_epochs < 1) throw InvalidParameter("max_epochs must be >= 1");
        if (batch_size < 1) throw InvalidParameter("batch_size must be >= 1");
    }
    double beta(int epoch) const { return std::min(beta_max, beta_0 * std::pow(beta_growth, epoch)); }
    double lr(int epoch) const { return lr_0 / (1.0 + lr_decay * epoch); }
};

struct CommitteeConfig {
    Method method = Method::mcover;
    int K = 9;
    int M = 4;
    KernelFamily kernel = KernelFamily::uniform;
    double mu = 2.0;
    double sigma = std::numeric_limits<double>::infinity();
    int s_perm = 10;
    int dest_s = 10;
    SurrogateSchedule schedule;
    double coupling_0 = 0.05;
    double coupling_growth = 1.001;  // per step
    double coupling_max = 10.0;
    double init_noise = -1.0;  // < 0: independent covers; >= 0: shared init plus this noise std
    bool sign_readout = false;
    bool keep_trace = false;
};

struct CommitteeOutcome {
    double test_error = std::numeric_limits<double>::quiet_NaN();
    double train_error = std::numeric_limits<double>::quiet_NaN();
    double final_loss = std::numeric_limits<double>::quiet_NaN();
    int epochs = 0;
    int M = 1;
    bool diverged = false;
    std::string stop_reason;
    double wall_ms = 0.0;
    std::vector<double> loss_trace;
};

namespace detail {
inline Eigen::MatrixXd gaussian_matrix(int rows, int cols, double stddev, Rng& rng) {
    std::normal_distribution<double> nd(0.0, stddev);
    Eigen::MatrixXd m(rows, cols);
    for (Eigen::Index i = 0; i < m.size(); ++i) m.data()[i] = nd(rng);
    return m;
}

inline std::vector<Eigen::MatrixXd> init_covers(int M, int K, int n, double init_noise, Rng& rng) {
    const double scale = 1.0 / std::sqrt(double(n));
    std::vector<Eigen::MatrixXd> covers;
    if (init_noise < 0.0) {
        for (int a = 0; a < M; ++a) covers.push_back(gaussian_matrix(K, n, scale, rng));
    } else {
        const Eigen::MatrixXd base = gaussian_matrix(K, n, scale, rng);
        for (int a = 0; a < M; ++a) covers.push_back(base + gaussian_matrix(K, n, init_noise * scale, rng));
    }
    return covers;
}
}  // namespace detail

/// Sub-streams of rng: 0 setup (bank, destinations), 1 init, 2 batch order.
inline CommitteeOutcome train_and_evaluate(const CommitteeConfig& cfg, const data::BinaryTwoClassSet& train,
                                           const data::BinaryTwoClassSet& test, std::uint64_t seed) {
    cfg.schedule.validate();
    if (cfg.M < 1) throw InvalidParameter("M must be >= 1");
    if (cfg.method == Method::rsgd && cfg.M < 2) throw InvalidParameter("replicated SGD needs M >= 2");
    if (train.size() == 0) throw InvalidInput("empty training set");
    if (train.dim() != test.dim()) throw InvalidInput("train and test dimensions differ");
    const auto t0 = std::chrono::steady_clock::now();
    Rng setup_rng = make_rng(seed, 0), init_rng = make_rng(seed, 1), order_rng = make_rng(seed, 2);

    const int K = cfg.K, n = static_cast<int>(train.dim());
    const int M = cfg.method == Method::sgd ? 1 : cfg.M;
    CommitteeOutcome out;
    out.M = M;

    std::optional<CommitteeRouting> routing;
    CommitteeCoverEnsemble ens;
    ens.covers = detail::init_covers(M, K, n, cfg.method == Method::mcover ? cfg.init_noise : -1.0, init_rng);
    if (cfg.method == Method::mcover) {
        const MixKernel kernel = make_kernel(cfg.kernel, M, cfg.mu, cfg.sigma);
        const PermutationBank bank = sample_bank(kernel, cfg.s_perm, setup_rng(), SamplingMethod::automatic);
        routing.emplace(build_committee_routing(K, n, cfg.dest_s, bank, setup_rng));
    }

    const Eigen::Index P = train.size();
    const int B = static_cast<int>(std::min<Eigen::Index>(cfg.schedule.batch_size, P));
    std::vector<Eigen::Index> order(static_cast<std::size_t>(P));
    std::iota(order.begin(), order.end(), Eigen::Index{0});
    Eigen::MatrixXd Xb(B, n);
    Eigen::VectorXd yb(B);
    double coupling = cfg.coupling_0;
    out.stop_reason = "max_epochs";

    try {
        for (int epoch = 0; epoch < cfg.schedule.max_epochs; ++epoch) {
            const double beta = cfg.schedule.beta(epoch), lr = cfg.schedule.lr(epoch);
            std::shuffle(order.begin(), order.end(), order_rng);
            double epoch_loss = 0.0;
            int batches = 0;
            for (Eigen::Index start = 0; start + B <= P; start += B) {
                for (int r = 0; r < B; ++r) {
                    const Eigen::Index src = order[static_cast<std::size_t>(start + r)];
                    Xb.row(r) = train.inputs.row(src);
                    yb(r) = train.labels(src);
                }
                switch (cfg.method) {
                    case Method::sgd: epoch_loss += sgd_step(ens.covers[0], Xb, yb, beta, lr); break;
                    case Method::mcover: epoch_loss += mcover_sgd_step(ens, *routing, Xb, yb, beta, lr); break;
                    case Method::rsgd:
                        epoch_loss += rsgd_step(ens.covers, Xb, yb, beta, lr, coupling);
                        coupling = std::min(cfg.coupling_max, coupling * cfg.coupling_growth);
                        break;
                }
                ++batches;
            }
            epoch_loss /= batches;
            out.final_loss = epoch_loss;
            out.epochs = epoch + 1;
            if (cfg.keep_trace) out.loss_trace.push_back(epoch_loss);
            if (epoch_loss < cfg.schedule.loss_stop) {
                out.stop_reason = "loss";
                break;
            }
            if (hard_error(collapse_committee(ens.covers, cfg.sign_readout), train.inputs, train.labels) == 0.0) {
                out.stop_reason = "zero_train_error";
                break;
            }
        }
        const CommitteeParams collapsed = collapse_committee(ens.covers, cfg.sign_readout);
        out.train_error = hard_error(collapsed, train.inputs, train.labels);
        out.test_error = hard_error(collapsed, test.inputs, test.labels);
    } catch (const DivergenceError&) {
        out.diverged = true;
        out.stop_reason = "diverged";
    }
    out.wall_ms = std::chrono::duration<double, std::milli>(std::chrono::steady_clock::now() - t0).count();
    return out;
}

}  // namespace mcover::committee
