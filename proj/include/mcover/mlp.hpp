#pragma once

// Replicated MLP with block-message mixing across covers.
//
// Layer l, cover a, block g of the incoming coordinates:
//     C^{(a)}_{lrg} = sum_{i in g} W^{(a)}_{lri} h^{(a)}_{l-1,i}
//     a^{(b)}_{lr}  = sum_g sum_a Qhat_{lrg}(b, a) C^{(a)}_{lrg} + bias^{(b)}_{lr}
// ReLU on hidden layers, identity on the output. Loss is the batch-mean softmax
// cross-entropy of the per-cover logits, summed over covers (or averaged, on request).

#include <algorithm>
#include <chrono>
#include <cmath>
#include <cstdint>
#include <cstring>
#include <istream>
#include <limits>
#include <numeric>
#include <optional>
#include <ostream>
#include <string>
#include <vector>

#include <Eigen/Dense>

#include "mcover/errors.hpp"
#include "mcover/rng.hpp"
#include "mcover/routing.hpp"

namespace mcover::mlp {

template <typename Scalar>
using Mat = Eigen::Matrix<Scalar, Eigen::Dynamic, Eigen::Dynamic>;
template <typename Scalar>
using Vec = Eigen::Matrix<Scalar, Eigen::Dynamic, 1>;

struct BlockRange {
    int begin = 0;
    int size = 0;
};

struct MlpArchitecture {
    std::vector<int> dims;    // d_0 .. d_L
    std::vector<int> blocks;  // G_1 .. G_L

    int layers() const { return static_cast<int>(dims.size()) - 1; }
    int in(int l) const { return dims[static_cast<std::size_t>(l)]; }
    int out(int l) const { return dims[static_cast<std::size_t>(l) + 1]; }
    int groups(int l) const { return blocks[static_cast<std::size_t>(l)]; }

    /// Contiguous blocks with boundaries floor(g * d / G).
    BlockRange block(int l, int g) const {
        const long d = in(l), G = groups(l);
        const int b = static_cast<int>(g * d / G), e = static_cast<int>((g + 1) * d / G);
        return {b, e - b};
    }

    std::size_t parameters() const {
        std::size_t n = 0;
        for (int l = 0; l < layers(); ++l) n += std::size_t(in(l)) * out(l) + out(l);
        return n;
    }

    void validate() const {
        if (dims.size() < 2) throw InvalidParameter("architecture needs at least an input and an output width");
        for (int d : dims)
            if (d < 1) throw InvalidParameter("layer widths must be >= 1");
        if (blocks.size() != dims.size() - 1) throw InvalidParameter("need one block count per layer");
        for (int l = 0; l < layers(); ++l)
            if (groups(l) < 1 || groups(l) > in(l)) throw InvalidParameter("block count must be in [1, input width]");
    }
};

/// Default partition: 16 blocks on the input layer, 8 on later layers, clipped to the width.
inline MlpArchitecture make_architecture(std::vector<int> dims, int g_input = 16, int g_hidden = 8) {
    MlpArchitecture a;
    a.dims = std::move(dims);
    for (std::size_t l = 0; l + 1 < a.dims.size(); ++l) a.blocks.push_back(std::min(l == 0 ? g_input : g_hidden, a.dims[l]));
    a.validate();
    return a;
}

inline std::vector<int> parse_dims(const std::string& s) {
    std::vector<int> out;
    std::size_t pos = 0;
    while (pos <= s.size()) {
        const std::size_t comma = s.find(',', pos);
        const std::string tok = s.substr(pos, comma == std::string::npos ? std::string::npos : comma - pos);
        try {
            std::size_t used = 0;
            const int v = std::stoi(tok, &used);
            if (used != tok.size()) throw std::invalid_argument(tok);
            out.push_back(v);
        } catch (const std::exception&) {
            throw InvalidParameter("bad layer list '" + s + "'");
        }
        if (comma == std::string::npos) break;
        pos = comma + 1;
    }
    return out;
}

enum class MixerMode { empirical, exact };

inline std::string to_string(MixerMode m) { return m == MixerMode::exact ? "exact" : "empirical"; }
inline MixerMode parse_mixer_mode(const std::string& s) {
    if (s == "empirical") return MixerMode::empirical;
    if (s == "exact") return MixerMode::exact;
    throw InvalidParameter("unknown mixer mode '" + s + "'");
}

/// Per-layer M x M mixers indexed by (r, g); a shared layer stores a single one.
template <typename Scalar>
struct MixerSet {
    int M = 1;
    MixerMode mode = MixerMode::exact;
    std::vector<std::vector<Mat<Scalar>>> layers;
    std::vector<int> groups;
    std::vector<bool> shared;

    const Mat<Scalar>& at(int l, int r, int g) const {
        const auto& L = layers[static_cast<std::size_t>(l)];
        if (shared[static_cast<std::size_t>(l)]) return L.front();
        return L[static_cast<std::size_t>(r) * groups[static_cast<std::size_t>(l)] + g];
    }
};

template <typename Scalar = double>
MixerSet<Scalar> build_mixers(const MlpArchitecture& arch, const MixKernel& kernel, int s_perm, MixerMode mode, Rng& rng,
                              bool shared_per_layer = false) {
    arch.validate();
    MixerSet<Scalar> set;
    set.M = kernel.size();
    set.mode = mode;
    const Mat<Scalar> Q = kernel.Q.cast<Scalar>();
    std::optional<PermutationSampler> sampler;
    if (mode == MixerMode::empirical) {
        if (s_perm < 1) throw InvalidParameter("S_perm must be >= 1");
        sampler.emplace(kernel, SamplingMethod::automatic);
    }
    for (int l = 0; l < arch.layers(); ++l) {
        const bool one = mode == MixerMode::exact || shared_per_layer;
        const std::size_t count = one ? 1 : std::size_t(arch.out(l)) * arch.groups(l);
        std::vector<Mat<Scalar>> mixers;
        mixers.reserve(count);
        for (std::size_t c = 0; c < count; ++c) {
            if (mode == MixerMode::exact) {
                mixers.push_back(Q);
                continue;
            }
            Mat<Scalar> m = Mat<Scalar>::Zero(set.M, set.M);
            for (int s = 0; s < s_perm; ++s) {
                const Permutation rho = (*sampler)(rng);
                for (int b = 0; b < set.M; ++b) m(b, rho(b)) += Scalar(1);
            }
            mixers.push_back(m / Scalar(s_perm));
        }
        set.layers.push_back(std::move(mixers));
        set.groups.push_back(arch.groups(l));
        set.shared.push_back(one);
    }
    return set;
}

template <typename Scalar>
struct Network {
    std::vector<Mat<Scalar>> W;  // d_l x d_{l-1}
    std::vector<Vec<Scalar>> b;
};

template <typename Scalar = double>
struct MlpCoverEnsemble {
    MlpArchitecture arch;
    std::vector<Network<Scalar>> covers;
    MixerSet<Scalar> mixers;

    int M() const { return static_cast<int>(covers.size()); }
};

/// Shared uniform(-1/sqrt(fan_in), 1/sqrt(fan_in)) draw for weights and biases, plus
/// independent N(0, noise^2) per cover.
template <typename Scalar = double>
std::vector<Network<Scalar>> init_covers(const MlpArchitecture& arch, int M, double noise, Rng& rng) {
    Network<Scalar> base;
    for (int l = 0; l < arch.layers(); ++l) {
        const double bound = 1.0 / std::sqrt(double(arch.in(l)));
        std::uniform_real_distribution<double> u(-bound, bound);
        Mat<Scalar> W(arch.out(l), arch.in(l));
        for (Eigen::Index i = 0; i < W.size(); ++i) W.data()[i] = Scalar(u(rng));
        Vec<Scalar> b(arch.out(l));
        for (Eigen::Index i = 0; i < b.size(); ++i) b(i) = Scalar(u(rng));
        base.W.push_back(std::move(W));
        base.b.push_back(std::move(b));
    }
    std::vector<Network<Scalar>> covers(static_cast<std::size_t>(M), base);
    if (noise > 0.0) {
        std::normal_distribution<double> nd(0.0, noise);
        for (auto& c : covers)
            for (int l = 0; l < arch.layers(); ++l) {
                for (Eigen::Index i = 0; i < c.W[std::size_t(l)].size(); ++i) c.W[std::size_t(l)].data()[i] += Scalar(nd(rng));
                for (Eigen::Index i = 0; i < c.b[std::size_t(l)].size(); ++i) c.b[std::size_t(l)](i) += Scalar(nd(rng));
            }
    }
    return covers;
}

struct CostCounter {
    std::uint64_t block_madds = 0;  // M * B * d_in * d_out per layer
    std::uint64_t mix_madds = 0;    // M^2 * B * d_out * G per layer
};

template <typename Scalar>
struct ForwardTape {
    // [l][a]: input activations of layer l for cover a (B x d_{l-1})
    std::vector<std::vector<Mat<Scalar>>> H;
    // [l][a][g]: block contributions (B x d_l)
    std::vector<std::vector<std::vector<Mat<Scalar>>>> C;
    // [l][b]: mixed preactivations (B x d_l)
    std::vector<std::vector<Mat<Scalar>>> A;

    const std::vector<Mat<Scalar>>& logits() const { return A.back(); }
};

template <typename Scalar>
ForwardTape<Scalar> lifted_forward(const MlpCoverEnsemble<Scalar>& ens, const Mat<Scalar>& X, CostCounter* cost = nullptr) {
    const MlpArchitecture& arch = ens.arch;
    const int M = ens.M();
    if (X.cols() != arch.in(0)) throw InvalidInput("input width does not match the architecture");
    if (ens.mixers.M != M) throw InvalidInput("mixers and ensemble disagree on M");
    const Eigen::Index B = X.rows();
    ForwardTape<Scalar> tape;
    tape.H.resize(std::size_t(arch.layers()));
    tape.C.resize(std::size_t(arch.layers()));
    tape.A.resize(std::size_t(arch.layers()));
    for (int a = 0; a < M; ++a) tape.H[0].push_back(X);

    for (int l = 0; l < arch.layers(); ++l) {
        const int G = arch.groups(l), dout = arch.out(l);
        auto& C = tape.C[std::size_t(l)];
        C.assign(std::size_t(M), std::vector<Mat<Scalar>>(std::size_t(G)));
        for (int a = 0; a < M; ++a) {
            const Mat<Scalar>& H = tape.H[std::size_t(l)][std::size_t(a)];
            const Mat<Scalar>& W = ens.covers[std::size_t(a)].W[std::size_t(l)];
            for (int g = 0; g < G; ++g) {
                const BlockRange r = arch.block(l, g);
                C[std::size_t(a)][std::size_t(g)].noalias() = H.middleCols(r.begin, r.size) * W.middleCols(r.begin, r.size).transpose();
            }
        }
        if (cost) cost->block_madds += std::uint64_t(M) * B * arch.in(l) * dout;

        auto& A = tape.A[std::size_t(l)];
        A.resize(std::size_t(M));
        for (int b = 0; b < M; ++b) A[std::size_t(b)] = ens.covers[std::size_t(b)].b[std::size_t(l)].transpose().replicate(B, 1);
        for (int r = 0; r < dout; ++r)
            for (int g = 0; g < G; ++g) {
                const Mat<Scalar>& q = ens.mixers.at(l, r, g);
                for (int b = 0; b < M; ++b)
                    for (int a = 0; a < M; ++a) A[std::size_t(b)].col(r) += q(b, a) * C[std::size_t(a)][std::size_t(g)].col(r);
            }
        if (cost) cost->mix_madds += std::uint64_t(M) * M * B * dout * G;

        if (l + 1 < arch.layers()) {
            auto& Hn = tape.H[std::size_t(l) + 1];
            for (int b = 0; b < M; ++b) Hn.push_back(A[std::size_t(b)].cwiseMax(Scalar(0)));
        }
    }
    return tape;
}

/// Largest |a - sum_g sum_a Q C - bias| over the tape.
template <typename Scalar>
double tape_identity_residual(const MlpCoverEnsemble<Scalar>& ens, const ForwardTape<Scalar>& tape) {
    const int M = ens.M();
    double worst = 0.0;
    for (int l = 0; l < ens.arch.layers(); ++l)
        for (int b = 0; b < M; ++b) {
            const Mat<Scalar>& A = tape.A[std::size_t(l)][std::size_t(b)];
            for (Eigen::Index mu = 0; mu < A.rows(); ++mu)
                for (int r = 0; r < ens.arch.out(l); ++r) {
                    long double s = ens.covers[std::size_t(b)].b[std::size_t(l)](r);
                    for (int g = 0; g < ens.arch.groups(l); ++g)
                        for (int a = 0; a < M; ++a)
                            s += static_cast<long double>(ens.mixers.at(l, r, g)(b, a)) *
                                 tape.C[std::size_t(l)][std::size_t(a)][std::size_t(g)](mu, r);
                    worst = std::max(worst, double(std::abs(s - static_cast<long double>(A(mu, r)))));
                }
        }
    return worst;
}

/// Mean softmax cross-entropy of one logit matrix; dlogits (optional) gets its gradient times `scale`.
template <typename Scalar>
double cross_entropy(const Mat<Scalar>& logits, const std::vector<int>& labels, Mat<Scalar>* dlogits, double scale) {
    const Eigen::Index B = logits.rows();
    double loss = 0.0;
    if (dlogits) dlogits->resize(logits.rows(), logits.cols());
    for (Eigen::Index mu = 0; mu < B; ++mu) {
        const Scalar mx = logits.row(mu).maxCoeff();
        double z = 0.0;
        for (Eigen::Index c = 0; c < logits.cols(); ++c) z += std::exp(double(logits(mu, c) - mx));
        const int y = labels[std::size_t(mu)];
        loss += std::log(z) - double(logits(mu, y) - mx);
        if (dlogits) {
            for (Eigen::Index c = 0; c < logits.cols(); ++c)
                (*dlogits)(mu, c) = Scalar(scale * std::exp(double(logits(mu, c) - mx)) / z);
            (*dlogits)(mu, y) -= Scalar(scale);
        }
    }
    return loss / double(B);
}

enum class CoverReduction { sum, mean };

inline std::string to_string(CoverReduction r) { return r == CoverReduction::sum ? "sum" : "mean"; }
inline CoverReduction parse_cover_reduction(const std::string& s) {
    if (s == "sum") return CoverReduction::sum;
    if (s == "mean") return CoverReduction::mean;
    throw InvalidParameter("unknown cover reduction '" + s + "'");
}

template <typename Scalar>
double lifted_loss(const ForwardTape<Scalar>& tape, const std::vector<int>& labels, CoverReduction red = CoverReduction::sum) {
    double total = 0.0;
    for (const auto& z : tape.logits()) total += cross_entropy<Scalar>(z, labels, nullptr, 0.0);
    return red == CoverReduction::sum ? total : total / double(tape.logits().size());
}

template <typename Scalar>
struct Gradients {
    double loss = 0.0;
    std::vector<Network<Scalar>> covers;
};

template <typename Scalar>
Gradients<Scalar> lifted_backward(const MlpCoverEnsemble<Scalar>& ens, const ForwardTape<Scalar>& tape, const std::vector<int>& labels,
                                  CoverReduction red = CoverReduction::sum) {
    const MlpArchitecture& arch = ens.arch;
    const int M = ens.M(), L = arch.layers();
    const Eigen::Index B = tape.H[0][0].rows();
    if (labels.size() != std::size_t(B)) throw InvalidInput("label count does not match the batch");
    for (int y : labels)
        if (y < 0 || y >= arch.out(L - 1)) throw InvalidInput("label out of range");

    Gradients<Scalar> grads;
    grads.covers.resize(std::size_t(M));
    for (auto& c : grads.covers) {
        c.W.resize(std::size_t(L));
        c.b.resize(std::size_t(L));
    }
    std::vector<Mat<Scalar>> dA(static_cast<std::size_t>(M));
    const double cover_scale = red == CoverReduction::sum ? 1.0 : 1.0 / M;
    const double scale = cover_scale / double(B);
    for (int b = 0; b < M; ++b) grads.loss += cross_entropy<Scalar>(tape.logits()[std::size_t(b)], labels, &dA[std::size_t(b)], scale);
    grads.loss *= cover_scale;

    Mat<Scalar> dC(B, 1);
    for (int l = L - 1; l >= 0; --l) {
        const int G = arch.groups(l), dout = arch.out(l), din = arch.in(l);
        std::vector<Mat<Scalar>> dH(std::size_t(M), Mat<Scalar>::Zero(B, din));
        for (int a = 0; a < M; ++a) {
            grads.covers[std::size_t(a)].W[std::size_t(l)] = Mat<Scalar>::Zero(dout, din);
            grads.covers[std::size_t(a)].b[std::size_t(l)] = dA[std::size_t(a)].colwise().sum().transpose();
        }
        for (int g = 0; g < G; ++g) {
            const BlockRange rg = arch.block(l, g);
            for (int a = 0; a < M; ++a) {
                dC.setZero(B, dout);
                for (int r = 0; r < dout; ++r) {
                    const Mat<Scalar>& q = ens.mixers.at(l, r, g);
                    for (int b = 0; b < M; ++b) dC.col(r) += q(b, a) * dA[std::size_t(b)].col(r);
                }
                const Mat<Scalar>& H = tape.H[std::size_t(l)][std::size_t(a)];
                grads.covers[std::size_t(a)].W[std::size_t(l)].middleCols(rg.begin, rg.size).noalias() +=
                    dC.transpose() * H.middleCols(rg.begin, rg.size);
                if (l > 0)
                    dH[std::size_t(a)].middleCols(rg.begin, rg.size).noalias() +=
                        dC * ens.covers[std::size_t(a)].W[std::size_t(l)].middleCols(rg.begin, rg.size);
            }
        }
        if (l > 0) {
            for (int a = 0; a < M; ++a) {
                // ReLU mask from the mixed preactivation of the previous layer
                const Mat<Scalar>& Aprev = tape.A[std::size_t(l) - 1][std::size_t(a)];
                dA[std::size_t(a)] = (Aprev.array() > Scalar(0)).select(dH[std::size_t(a)], Scalar(0));
            }
        }
    }
    if (!std::isfinite(grads.loss)) throw DivergenceError("non-finite loss");
    for (const auto& c : grads.covers)
        for (int l = 0; l < L; ++l)
            if (!c.W[std::size_t(l)].allFinite() || !c.b[std::size_t(l)].allFinite()) throw DivergenceError("non-finite gradient");
    return grads;
}

template <typename Scalar>
struct Velocity {
    std::vector<Network<Scalar>> covers;
};

template <typename Scalar>
Velocity<Scalar> zero_velocity(const MlpCoverEnsemble<Scalar>& ens) {
    Velocity<Scalar> v;
    for (const auto& c : ens.covers) {
        Network<Scalar> z;
        for (std::size_t l = 0; l < c.W.size(); ++l) {
            z.W.push_back(Mat<Scalar>::Zero(c.W[l].rows(), c.W[l].cols()));
            z.b.push_back(Vec<Scalar>::Zero(c.b[l].size()));
        }
        v.covers.push_back(std::move(z));
    }
    return v;
}

/// v <- m v - lr g; Nesterov: p <- p + m v - lr g, otherwise p <- p + v.
template <typename Scalar>
void sgd_momentum_step(MlpCoverEnsemble<Scalar>& ens, const Gradients<Scalar>& grads, Velocity<Scalar>& vel, double lr,
                       double momentum, bool nesterov) {
    if (vel.covers.size() != ens.covers.size()) throw InvalidInput("velocity buffers do not match the ensemble");
    const Scalar m = Scalar(momentum), eta = Scalar(lr);
    auto update = [&](auto& p, auto& v, const auto& g) {
        v = m * v - eta * g;
        if (nesterov) p += m * v - eta * g;
        else p += v;
    };
    for (std::size_t a = 0; a < ens.covers.size(); ++a)
        for (std::size_t l = 0; l < ens.covers[a].W.size(); ++l) {
            update(ens.covers[a].W[l], vel.covers[a].W[l], grads.covers[a].W[l]);
            update(ens.covers[a].b[l], vel.covers[a].b[l], grads.covers[a].b[l]);
        }
}

template <typename Scalar>
Network<Scalar> collapse_mlp(const MlpCoverEnsemble<Scalar>& ens) {
    Network<Scalar> out = ens.covers.front();
    for (std::size_t a = 1; a < ens.covers.size(); ++a)
        for (std::size_t l = 0; l < out.W.size(); ++l) {
            out.W[l] += ens.covers[a].W[l];
            out.b[l] += ens.covers[a].b[l];
        }
    const Scalar inv = Scalar(1) / Scalar(ens.covers.size());
    for (std::size_t l = 0; l < out.W.size(); ++l) {
        out.W[l] *= inv;
        out.b[l] *= inv;
    }
    return out;
}

/// Plain single-network forward.
template <typename Scalar>
Mat<Scalar> network_forward(const Network<Scalar>& net, const Mat<Scalar>& X) {
    Mat<Scalar> h = X;
    for (std::size_t l = 0; l < net.W.size(); ++l) {
        Mat<Scalar> a = h * net.W[l].transpose();
        a.rowwise() += net.b[l].transpose();
        h = (l + 1 < net.W.size()) ? Mat<Scalar>(a.cwiseMax(Scalar(0))) : a;
    }
    return h;
}

template <typename Scalar, typename Derived>
double classification_error(const Network<Scalar>& net, const Eigen::MatrixBase<Derived>& X, const std::vector<int>& labels,
                            Eigen::Index eval_batch = 4096) {
    const Eigen::Index n = X.rows();
    if (n == 0) return 0.0;
    std::size_t wrong = 0;
    for (Eigen::Index start = 0; start < n; start += eval_batch) {
        const Eigen::Index len = std::min(eval_batch, n - start);
        const Mat<Scalar> logits = network_forward<Scalar>(net, X.middleRows(start, len).template cast<Scalar>());
        for (Eigen::Index r = 0; r < len; ++r) {
            Eigen::Index arg;
            logits.row(r).maxCoeff(&arg);
            wrong += arg != labels[std::size_t(start + r)];
        }
    }
    return double(wrong) / double(n);
}

// Checkpoint container (little-endian host order):
//   char[8] "MCOVMLP\0", u32 version = 1, u32 scalar bytes (4 or 8),
//   u32 M, u32 L, u32 dims[L+1], u32 blocks[L], u32 mixer mode (0 empirical, 1 exact),
//   per layer: u32 mixer count, then count * M * M scalars (row-major);
//   per cover, per layer: W (d_l x d_{l-1}, row-major) then b (d_l).
inline constexpr char kCheckpointMagic[8] = {'M', 'C', 'O', 'V', 'M', 'L', 'P', '\0'};
inline constexpr std::uint32_t kCheckpointVersion = 1;

namespace detail {
inline void put_u32(std::ostream& os, std::uint32_t v) { os.write(reinterpret_cast<const char*>(&v), 4); }
inline std::uint32_t get_u32(std::istream& is) {
    std::uint32_t v = 0;
    if (!is.read(reinterpret_cast<char*>(&v), 4)) throw ParseError("checkpoint truncated", 0);
    return v;
}
template <typename Scalar, typename M>
void put_block(std::ostream& os, const M& m) {
    for (Eigen::Index r = 0; r < m.rows(); ++r)
        for (Eigen::Index c = 0; c < m.cols(); ++c) {
            const Scalar v = m(r, c);
            os.write(reinterpret_cast<const char*>(&v), sizeof(Scalar));
        }
}
template <typename Scalar, typename M>
void get_block(std::istream& is, M& m) {
    for (Eigen::Index r = 0; r < m.rows(); ++r)
        for (Eigen::Index c = 0; c < m.cols(); ++c) {
            Scalar v;
            if (!is.read(reinterpret_cast<char*>(&v), sizeof(Scalar))) throw ParseError("checkpoint truncated", 0);
            m(r, c) = v;
        }
}
}  // namespace detail

template <typename Scalar>
void save_checkpoint(std::ostream& os, const MlpCoverEnsemble<Scalar>& ens) {
    os.write(kCheckpointMagic, 8);
    detail::put_u32(os, kCheckpointVersion);
    detail::put_u32(os, sizeof(Scalar));
    detail::put_u32(os, std::uint32_t(ens.M()));
    detail::put_u32(os, std::uint32_t(ens.arch.layers()));
    for (int d : ens.arch.dims) detail::put_u32(os, std::uint32_t(d));
    for (int g : ens.arch.blocks) detail::put_u32(os, std::uint32_t(g));
    detail::put_u32(os, ens.mixers.mode == MixerMode::exact ? 1u : 0u);
    for (int l = 0; l < ens.arch.layers(); ++l) {
        const auto& mixers = ens.mixers.layers[std::size_t(l)];
        detail::put_u32(os, std::uint32_t(mixers.size()));
        for (const auto& q : mixers) detail::put_block<Scalar>(os, q);
    }
    for (const auto& c : ens.covers)
        for (int l = 0; l < ens.arch.layers(); ++l) {
            detail::put_block<Scalar>(os, c.W[std::size_t(l)]);
            detail::put_block<Scalar>(os, c.b[std::size_t(l)]);
        }
    if (!os) throw InvalidInput("checkpoint write failed");
}

template <typename Scalar>
MlpCoverEnsemble<Scalar> load_checkpoint(std::istream& is) {
    char magic[8];
    if (!is.read(magic, 8) || std::memcmp(magic, kCheckpointMagic, 8) != 0) throw BadMagic("not an MLP checkpoint", 0);
    if (const auto v = detail::get_u32(is); v != kCheckpointVersion)
        throw ParseError("unsupported checkpoint version " + std::to_string(v), 8);
    if (const auto bytes = detail::get_u32(is); bytes != sizeof(Scalar))
        throw ParseError("checkpoint stores " + std::to_string(bytes * 8) + "-bit scalars", 12);
    MlpCoverEnsemble<Scalar> ens;
    const int M = int(detail::get_u32(is)), L = int(detail::get_u32(is));
    if (M < 1 || L < 1 || M > 4096 || L > 1024) throw ParseError("implausible checkpoint shape", 16);
    for (int l = 0; l <= L; ++l) ens.arch.dims.push_back(int(detail::get_u32(is)));
    for (int l = 0; l < L; ++l) ens.arch.blocks.push_back(int(detail::get_u32(is)));
    ens.arch.validate();
    ens.mixers.M = M;
    ens.mixers.mode = detail::get_u32(is) == 1 ? MixerMode::exact : MixerMode::empirical;
    for (int l = 0; l < L; ++l) {
        const std::uint32_t count = detail::get_u32(is);
        if (count != 1 && count != std::uint32_t(ens.arch.out(l)) * ens.arch.groups(l)) throw ParseError("bad mixer count", 0);
        std::vector<Mat<Scalar>> mixers(count, Mat<Scalar>(M, M));
        for (auto& q : mixers) detail::get_block<Scalar>(is, q);
        ens.mixers.layers.push_back(std::move(mixers));
        ens.mixers.groups.push_back(ens.arch.groups(l));
        ens.mixers.shared.push_back(count == 1);
    }
    for (int a = 0; a < M; ++a) {
        Network<Scalar> net;
        for (int l = 0; l < L; ++l) {
            Mat<Scalar> W(ens.arch.out(l), ens.arch.in(l));
            Vec<Scalar> b(ens.arch.out(l));
            detail::get_block<Scalar>(is, W);
            detail::get_block<Scalar>(is, b);
            net.W.push_back(std::move(W));
            net.b.push_back(std::move(b));
        }
        ens.covers.push_back(std::move(net));
    }
    return ens;
}

struct MlpConfig {
    std::vector<int> dims{784, 512, 512, 10};
    int g_input = 16;
    int g_hidden = 8;
    int M = 5;
    KernelFamily kernel = KernelFamily::gaussian_ring;
    double mu = 2.0;
    double sigma = 3.0;
    int s_perm = 10;
    MixerMode mode = MixerMode::empirical;
    bool shared_mixers = false;
    CoverReduction reduction = CoverReduction::sum;
    double lr = 0.05;
    double momentum = 0.9;
    bool nesterov = true;
    int batch = 256;
    int epochs = 40;
    double init_noise = 0.01;
    int eval_batch = 4096;
};

struct MlpOutcome {
    double test_error = std::numeric_limits<double>::quiet_NaN();
    double train_loss = std::numeric_limits<double>::quiet_NaN();
    int epochs = 0;
    int M = 1;
    bool diverged = false;
    double wall_ms = 0.0;
    std::vector<double> test_error_trace;  // after every epoch
};

/// Sub-streams of the seed: 0 mixers, 1 init, 2 batch order.
template <typename Scalar = float, typename DX, typename DT>
MlpOutcome train_mlp(const MlpConfig& cfg, const Eigen::MatrixBase<DX>& X_train, const std::vector<int>& y_train,
                     const Eigen::MatrixBase<DT>& X_test, const std::vector<int>& y_test, std::uint64_t seed,
                     MlpCoverEnsemble<Scalar>* final_ensemble = nullptr) {
    const auto t0 = std::chrono::steady_clock::now();
    if (cfg.M < 1) throw InvalidParameter("M must be >= 1");
    if (cfg.batch < 1 || cfg.epochs < 0) throw InvalidParameter("batch must be >= 1 and epochs >= 0");
    if (X_train.rows() != Eigen::Index(y_train.size()) || X_test.rows() != Eigen::Index(y_test.size()))
        throw InvalidInput("inputs and labels disagree in length");
    Rng mix_rng = make_rng(seed, 0), init_rng = make_rng(seed, 1), order_rng = make_rng(seed, 2);

    MlpCoverEnsemble<Scalar> ens;
    ens.arch = make_architecture(cfg.dims, cfg.g_input, cfg.g_hidden);
    if (X_train.cols() != ens.arch.in(0)) throw InvalidInput("input width does not match the architecture");
    const MixKernel kernel = make_kernel(cfg.kernel, cfg.M, cfg.mu, cfg.sigma);
    ens.mixers = build_mixers<Scalar>(ens.arch, kernel, cfg.s_perm, cfg.mode, mix_rng, cfg.shared_mixers);
    ens.covers = init_covers<Scalar>(ens.arch, cfg.M, cfg.M > 1 ? cfg.init_noise : 0.0, init_rng);
    Velocity<Scalar> vel = zero_velocity(ens);

    MlpOutcome out;
    out.M = cfg.M;
    const Eigen::Index n = X_train.rows();
    std::vector<Eigen::Index> order(static_cast<std::size_t>(n));
    std::iota(order.begin(), order.end(), Eigen::Index{0});
    Mat<Scalar> Xb;
    std::vector<int> yb;
    try {
        for (int epoch = 0; epoch < cfg.epochs; ++epoch) {
            std::shuffle(order.begin(), order.end(), order_rng);
            double loss_sum = 0.0;
            int batches = 0;
            for (Eigen::Index start = 0; start < n; start += cfg.batch) {
                const Eigen::Index len = std::min<Eigen::Index>(cfg.batch, n - start);
                Xb.resize(len, X_train.cols());
                yb.resize(std::size_t(len));
                for (Eigen::Index r = 0; r < len; ++r) {
                    const Eigen::Index src = order[std::size_t(start + r)];
                    Xb.row(r) = X_train.row(src).template cast<Scalar>();
                    yb[std::size_t(r)] = y_train[std::size_t(src)];
                }
                const ForwardTape<Scalar> tape = lifted_forward(ens, Xb);
                const Gradients<Scalar> g = lifted_backward(ens, tape, yb, cfg.reduction);
                sgd_momentum_step(ens, g, vel, cfg.lr, cfg.momentum, cfg.nesterov);
                loss_sum += g.loss;
                ++batches;
            }
            out.train_loss = loss_sum / std::max(batches, 1);
            out.epochs = epoch + 1;
            out.test_error = classification_error(collapse_mlp(ens), X_test, y_test, cfg.eval_batch);
            out.test_error_trace.push_back(out.test_error);
        }
        if (cfg.epochs == 0) out.test_error = classification_error(collapse_mlp(ens), X_test, y_test, cfg.eval_batch);
    } catch (const DivergenceError&) {
        out.diverged = true;
    }
    if (final_ensemble) *final_ensemble = std::move(ens);
    out.wall_ms = std::chrono::duration<double, std::milli>(std::chrono::steady_clock::now() - t0).count();
    return out;
}

}  // namespace mcover::mlp
