#include <gtest/gtest.h>

#include <sstream>

#include "mcover/mlp.hpp"
#include "oracles.hpp"

using namespace mcover;
using namespace mcover::mlp;

namespace {

using MatD = Mat<double>;

MatD random_matrix(int r, int c, Rng& rng) {
    std::normal_distribution<double> nd(0.0, 1.0);
    MatD m(r, c);
    for (Eigen::Index i = 0; i < m.size(); ++i) m.data()[i] = nd(rng);
    return m;
}

std::vector<int> random_labels(int B, int classes, Rng& rng) {
    std::uniform_int_distribution<int> u(0, classes - 1);
    std::vector<int> y(static_cast<std::size_t>(B));
    for (auto& v : y) v = u(rng);
    return y;
}

/// Random row-stochastic mixers for every (l, r, g).
MixerSet<double> random_mixers(const MlpArchitecture& arch, int M, Rng& rng) {
    MixerSet<double> set;
    set.M = M;
    set.mode = MixerMode::empirical;
    std::uniform_real_distribution<double> u(0.05, 1.0);
    for (int l = 0; l < arch.layers(); ++l) {
        std::vector<MatD> mixers;
        for (int c = 0; c < arch.out(l) * arch.groups(l); ++c) {
            MatD q(M, M);
            for (Eigen::Index i = 0; i < q.size(); ++i) q.data()[i] = u(rng);
            q = q.array().colwise() / q.rowwise().sum().array();
            mixers.push_back(q);
        }
        set.layers.push_back(mixers);
        set.groups.push_back(arch.groups(l));
        set.shared.push_back(false);
    }
    return set;
}

MlpCoverEnsemble<double> random_ensemble(const MlpArchitecture& arch, int M, Rng& rng, double noise = 0.3) {
    MlpCoverEnsemble<double> ens;
    ens.arch = arch;
    ens.covers = init_covers<double>(arch, M, noise, rng);
    ens.mixers = random_mixers(arch, M, rng);
    return ens;
}

MlpArchitecture arch_of(std::vector<int> dims, std::vector<int> blocks) {
    MlpArchitecture a{std::move(dims), std::move(blocks)};
    a.validate();
    return a;
}

/// Reference forward straight from the block-message formulas, one scalar at a time.
std::vector<MatD> reference_logits(const MlpCoverEnsemble<double>& ens, const MatD& X) {
    const int M = ens.M();
    std::vector<MatD> h(static_cast<std::size_t>(M), X);
    for (int l = 0; l < ens.arch.layers(); ++l) {
        std::vector<MatD> next(static_cast<std::size_t>(M), MatD::Zero(X.rows(), ens.arch.out(l)));
        for (int b = 0; b < M; ++b)
            for (Eigen::Index mu = 0; mu < X.rows(); ++mu)
                for (int r = 0; r < ens.arch.out(l); ++r) {
                    double a = ens.covers[std::size_t(b)].b[std::size_t(l)](r);
                    for (int g = 0; g < ens.arch.groups(l); ++g) {
                        const BlockRange rg = ens.arch.block(l, g);
                        for (int al = 0; al < M; ++al) {
                            double c = 0.0;
                            for (int i = rg.begin; i < rg.begin + rg.size; ++i)
                                c += ens.covers[std::size_t(al)].W[std::size_t(l)](r, i) * h[std::size_t(al)](mu, i);
                            a += ens.mixers.at(l, r, g)(b, al) * c;
                        }
                    }
                    next[std::size_t(b)](mu, r) = (l + 1 < ens.arch.layers()) ? std::max(a, 0.0) : a;
                }
        h = next;
    }
    return h;
}

double max_abs(const MatD& a) { return a.cwiseAbs().maxCoeff(); }

}  // namespace

TEST(Architecture, BlocksPartitionExactly) {
    const MlpArchitecture a = arch_of({10, 7, 3}, {3, 7});
    for (int l = 0; l < a.layers(); ++l) {
        int next = 0;
        for (int g = 0; g < a.groups(l); ++g) {
            const BlockRange r = a.block(l, g);
            EXPECT_EQ(r.begin, next);
            EXPECT_GE(r.size, 1);
            next += r.size;
        }
        EXPECT_EQ(next, a.in(l));
    }
    EXPECT_THROW(arch_of({4, 2}, {5}), InvalidParameter);
    EXPECT_EQ(make_architecture({784, 512, 512, 10}).parameters(), 669706u);
    EXPECT_EQ(make_architecture({784, 512, 512, 10}).blocks, (std::vector<int>{16, 8, 8}));
    EXPECT_EQ(parse_dims("784,128,10"), (std::vector<int>{784, 128, 10}));
    EXPECT_THROW(parse_dims("784,x"), InvalidParameter);
}

TEST(Mixers, ExactModeIsTheBalancedKernel) {
    Rng rng(1);
    const MlpArchitecture a = arch_of({6, 4, 2}, {2, 2});
    const MixKernel k = gaussian_ring_kernel(4, 1.0, 1.0);
    const auto set = build_mixers<double>(a, k, 10, MixerMode::exact, rng);
    for (int l = 0; l < 2; ++l)
        for (int r = 0; r < a.out(l); ++r)
            for (int g = 0; g < 2; ++g) EXPECT_EQ(set.at(l, r, g), k.Q);
}

TEST(Mixers, EmpiricalRowsSumToOneAndConverge) {
    Rng rng(2);
    const MlpArchitecture a = arch_of({4, 3, 2}, {2, 1});
    const MixKernel k = gaussian_ring_kernel(3, 1.0, 0.8);
    const auto small = build_mixers<double>(a, k, 10, MixerMode::empirical, rng);
    for (int r = 0; r < 3; ++r)
        for (int g = 0; g < 2; ++g) {
            const MatD& q = small.at(0, r, g);
            EXPECT_LT((q.rowwise().sum().array() - 1.0).abs().maxCoeff(), 1e-15);
            EXPECT_LT((q.colwise().sum().array() - 1.0).abs().maxCoeff(), 1e-15);
        }
    const auto big = build_mixers<double>(a, k, 100000, MixerMode::empirical, rng, true);
    EXPECT_LT(max_abs(big.at(0, 0, 0) - oracle::enumerated_marginals(k.Q)), 0.01);
}

TEST(Forward, SingleCoverIsStandardMlp) {
    Rng rng(3);
    const MlpArchitecture a = arch_of({5, 6, 4, 3}, {2, 3, 2});
    MlpCoverEnsemble<double> ens;
    ens.arch = a;
    ens.covers = init_covers<double>(a, 1, 0.0, rng);
    ens.mixers = build_mixers<double>(a, identity_kernel(1), 1, MixerMode::exact, rng);
    const MatD X = random_matrix(7, 5, rng);
    const auto tape = lifted_forward(ens, X);
    EXPECT_LT(max_abs(tape.logits()[0] - network_forward(ens.covers[0], X)), 1e-12);
}

TEST(Forward, IdenticalCoversGiveSingleNetworkLogits) {
    Rng rng(4);
    const MlpArchitecture a = arch_of({6, 5, 3}, {3, 2});
    MlpCoverEnsemble<double> ens = random_ensemble(a, 3, rng, 0.0);
    const MatD X = random_matrix(4, 6, rng);
    const MatD ref = network_forward(ens.covers[0], X);
    const auto tape = lifted_forward(ens, X);
    for (const auto& z : tape.logits()) EXPECT_LT(max_abs(z - ref), 1e-12);
}

TEST(Forward, MatchesDirectFormula) {
    Rng rng(5);
    for (int t = 0; t < 5; ++t) {
        const MlpArchitecture a = arch_of({3, 4, 2}, {2, 2});
        const MlpCoverEnsemble<double> ens = random_ensemble(a, 2, rng);
        const MatD X = random_matrix(3, 3, rng);
        const auto tape = lifted_forward(ens, X);
        const auto ref = reference_logits(ens, X);
        for (int b = 0; b < 2; ++b) EXPECT_LT(max_abs(tape.logits()[std::size_t(b)] - ref[std::size_t(b)]), 1e-12);
        EXPECT_LT(tape_identity_residual(ens, tape), 1e-10);
    }
}

TEST(Forward, DimensionMismatch) {
    Rng rng(6);
    const MlpCoverEnsemble<double> ens = random_ensemble(arch_of({3, 2}, {1}), 2, rng);
    EXPECT_THROW(lifted_forward(ens, MatD(MatD::Zero(2, 4))), InvalidInput);
}

TEST(Forward, CostCountersMatchScalingLaw) {
    Rng rng(7);
    const MlpArchitecture a = arch_of({12, 8, 6, 4}, {4, 2, 3});
    const int M = 3, B = 5;
    const MlpCoverEnsemble<double> ens = random_ensemble(a, M, rng);
    CostCounter cost;
    lifted_forward(ens, random_matrix(B, 12, rng), &cost);
    std::uint64_t block = 0, mix = 0;
    for (int l = 0; l < a.layers(); ++l) {
        block += std::uint64_t(M) * B * a.in(l) * a.out(l);
        mix += std::uint64_t(M) * M * B * a.out(l) * a.groups(l);
    }
    EXPECT_EQ(cost.block_madds, block);
    EXPECT_EQ(cost.mix_madds, mix);
}

TEST(Backward, SingleCoverIsStandardBackprop) {
    Rng rng(8);
    const MlpArchitecture a = arch_of({4, 5, 3}, {2, 1});
    MlpCoverEnsemble<double> ens;
    ens.arch = a;
    ens.covers = init_covers<double>(a, 1, 0.0, rng);
    ens.mixers = build_mixers<double>(a, identity_kernel(1), 1, MixerMode::exact, rng);
    const MatD X = random_matrix(6, 4, rng);
    const auto y = random_labels(6, 3, rng);
    const auto g = lifted_backward(ens, lifted_forward(ens, X), y);
    // hand backprop on the plain network
    const auto& W0 = ens.covers[0].W[0];
    const auto& W1 = ens.covers[0].W[1];
    MatD A0 = X * W0.transpose();
    A0.rowwise() += ens.covers[0].b[0].transpose();
    const MatD H1 = A0.cwiseMax(0.0);
    MatD Z = H1 * W1.transpose();
    Z.rowwise() += ens.covers[0].b[1].transpose();
    MatD dZ(6, 3);
    for (int mu = 0; mu < 6; ++mu) {
        const Eigen::RowVectorXd p = (Z.row(mu).array() - Z.row(mu).maxCoeff()).exp();
        dZ.row(mu) = p / p.sum();
        dZ(mu, y[std::size_t(mu)]) -= 1.0;
    }
    dZ /= 6.0;
    const MatD dW1 = dZ.transpose() * H1;
    const MatD dA0 = (A0.array() > 0).select(dZ * W1, 0.0);
    EXPECT_LT(max_abs(g.covers[0].W[1] - dW1), 1e-12);
    EXPECT_LT(max_abs(g.covers[0].W[0] - dA0.transpose() * X), 1e-12);
    EXPECT_LT((g.covers[0].b[0] - dA0.colwise().sum().transpose()).cwiseAbs().maxCoeff(), 1e-12);
}

TEST(Backward, SymmetricEnsembleGetsEqualGradients) {
    Rng rng(9);
    const MlpArchitecture a = arch_of({6, 5, 4, 3}, {3, 2, 2});
    MlpCoverEnsemble<double> ens;
    ens.arch = a;
    ens.covers = init_covers<double>(a, 4, 0.0, rng);
    ens.mixers = build_mixers<double>(a, gaussian_ring_kernel(4, 1.0, 1.0), 10, MixerMode::empirical, rng);
    const MatD X = random_matrix(5, 6, rng);
    const auto g = lifted_backward(ens, lifted_forward(ens, X), random_labels(5, 3, rng));
    for (int c = 1; c < 4; ++c)
        for (int l = 0; l < 3; ++l) {
            EXPECT_LT(max_abs(g.covers[std::size_t(c)].W[std::size_t(l)] - g.covers[0].W[std::size_t(l)]), 1e-14);
            EXPECT_LT((g.covers[std::size_t(c)].b[std::size_t(l)] - g.covers[0].b[std::size_t(l)]).cwiseAbs().maxCoeff(), 1e-14);
        }
}

TEST(Backward, MatchesFiniteDifferences) {
    Rng rng(10);
    const std::vector<std::vector<int>> shapes{{8, 4, 4, 3}, {5, 6, 3}, {6, 4, 2}};
    int instances = 0;
    for (int M : {1, 2, 3})
        for (int G : {1, 2, 4})
            for (bool exact : {false, true}) {
                const auto& dims = shapes[std::size_t(instances) % shapes.size()];
                std::vector<int> blocks;
                for (std::size_t l = 0; l + 1 < dims.size(); ++l) blocks.push_back(std::min(G, dims[l]));
                const MlpArchitecture a = arch_of(dims, blocks);
                MlpCoverEnsemble<double> ens = random_ensemble(a, M, rng);
                if (exact) ens.mixers = build_mixers<double>(a, gaussian_ring_kernel(M, 1.0, 1.0), 1, MixerMode::exact, rng);
                const MatD X = random_matrix(4, dims.front(), rng);
                const auto y = random_labels(4, dims.back(), rng);
                for (CoverReduction red : {CoverReduction::sum, CoverReduction::mean}) {
                    const auto g = lifted_backward(ens, lifted_forward(ens, X), y, red);
                    auto loss = [&] { return lifted_loss(lifted_forward(ens, X), y, red); };
                    for (int c = 0; c < M; ++c)
                        for (int l = 0; l < a.layers(); ++l) {
                            auto& net = ens.covers[std::size_t(c)];
                            const MatD fdW = oracle::central_difference(loss, net.W[std::size_t(l)], 1e-5);
                            const Vec<double> fdb = oracle::central_difference(loss, net.b[std::size_t(l)], 1e-5);
                            EXPECT_LT(oracle::relative_error(g.covers[std::size_t(c)].W[std::size_t(l)], fdW), 1e-4)
                                << "M=" << M << " G=" << G << " layer " << l;
                            EXPECT_LT(oracle::relative_error(g.covers[std::size_t(c)].b[std::size_t(l)], fdb), 1e-4);
                        }
                }
                ++instances;
            }
    EXPECT_GE(instances, 18);
}

TEST(Backward, ReductionScalesGradient) {
    Rng rng(11);
    const MlpCoverEnsemble<double> ens = random_ensemble(arch_of({4, 3, 2}, {2, 1}), 3, rng);
    const MatD X = random_matrix(5, 4, rng);
    const auto y = random_labels(5, 2, rng);
    const auto tape = lifted_forward(ens, X);
    const auto s = lifted_backward(ens, tape, y, CoverReduction::sum);
    const auto m = lifted_backward(ens, tape, y, CoverReduction::mean);
    EXPECT_NEAR(s.loss, 3.0 * m.loss, 1e-12);
    EXPECT_LT(max_abs(s.covers[1].W[0] - 3.0 * m.covers[1].W[0]), 1e-14);
}

TEST(Backward, BadLabels) {
    Rng rng(12);
    const MlpCoverEnsemble<double> ens = random_ensemble(arch_of({3, 2}, {1}), 1, rng);
    const auto tape = lifted_forward(ens, random_matrix(2, 3, rng));
    EXPECT_THROW(lifted_backward(ens, tape, {0, 5}), InvalidInput);
    EXPECT_THROW(lifted_backward(ens, tape, {0}), InvalidInput);
}

TEST(Optimizer, ZeroMomentumIsPlainSgd) {
    Rng rng(13);
    MlpCoverEnsemble<double> ens = random_ensemble(arch_of({3, 2}, {1}), 2, rng);
    const auto before = ens.covers;
    const MatD X = random_matrix(4, 3, rng);
    const auto g = lifted_backward(ens, lifted_forward(ens, X), random_labels(4, 2, rng));
    auto vel = zero_velocity(ens);
    sgd_momentum_step(ens, g, vel, 0.1, 0.0, false);
    for (int c = 0; c < 2; ++c)
        EXPECT_LT(max_abs(ens.covers[std::size_t(c)].W[0] - (before[std::size_t(c)].W[0] - 0.1 * g.covers[std::size_t(c)].W[0])), 1e-15);
}

TEST(Optimizer, VelocityDecaysWithoutGradient) {
    Rng rng(14);
    MlpCoverEnsemble<double> ens = random_ensemble(arch_of({3, 2}, {1}), 1, rng);
    auto vel = zero_velocity(ens);
    vel.covers[0].W[0].setConstant(1.0);
    Gradients<double> zero;
    zero.covers = zero_velocity(ens).covers;
    for (int k = 1; k <= 5; ++k) {
        sgd_momentum_step(ens, zero, vel, 0.05, 0.9, false);
        EXPECT_NEAR(vel.covers[0].W[0](0, 0), std::pow(0.9, k), 1e-15);
    }
}

TEST(Optimizer, NesterovTwoStepHandValues) {
    MlpCoverEnsemble<double> ens;
    ens.arch = arch_of({1, 1}, {1});
    Network<double> net;
    net.W.push_back(MatD::Zero(1, 1));
    net.b.push_back(Vec<double>::Zero(1));
    ens.covers.push_back(net);
    Gradients<double> g;
    Network<double> gn;
    gn.W.push_back(MatD::Constant(1, 1, 2.0));
    gn.b.push_back(Vec<double>::Constant(1, 2.0));
    g.covers.push_back(gn);
    auto vel = zero_velocity(ens);
    // v1 = -0.05 g, step1 = m v1 - lr g = -0.095 g; v2 = -0.095 g, step2 = -0.1355 g
    sgd_momentum_step(ens, g, vel, 0.05, 0.9, true);
    EXPECT_NEAR(ens.covers[0].W[0](0, 0), -0.095 * 2.0, 1e-15);
    sgd_momentum_step(ens, g, vel, 0.05, 0.9, true);
    EXPECT_NEAR(ens.covers[0].W[0](0, 0), -(0.095 + 0.1355) * 2.0, 1e-15);
    EXPECT_NEAR(vel.covers[0].W[0](0, 0), -0.095 * 2.0, 1e-15);
}

TEST(Collapse, MeanOfCovers) {
    Rng rng(15);
    MlpCoverEnsemble<double> ens = random_ensemble(arch_of({4, 3, 2}, {2, 1}), 3, rng);
    const Network<double> c = collapse_mlp(ens);
    for (int l = 0; l < 2; ++l) {
        MatD sum = MatD::Zero(ens.arch.out(l), ens.arch.in(l));
        for (const auto& n : ens.covers) sum += n.W[std::size_t(l)];
        EXPECT_LT(max_abs(c.W[std::size_t(l)] - sum / 3.0), 1e-15);
    }
    ens.covers.resize(2);
    ens.covers[1].W[0] = -ens.covers[0].W[0];
    EXPECT_EQ(max_abs(collapse_mlp(ens).W[0]), 0.0);
    ens.covers[1] = ens.covers[0];
    EXPECT_EQ(collapse_mlp(ens).W[1], ens.covers[0].W[1]);
}

TEST(Training, IdentityKernelEqualInitStaysIdentical) {
    Rng rng(16);
    const MlpArchitecture a = arch_of({8, 6, 5, 3}, {4, 2, 2});
    MlpCoverEnsemble<double> ens;
    ens.arch = a;
    ens.covers = init_covers<double>(a, 3, 0.0, rng);
    ens.mixers = build_mixers<double>(a, identity_kernel(3), 10, MixerMode::empirical, rng);
    auto vel = zero_velocity(ens);
    for (int step = 0; step < 100; ++step) {
        const MatD X = random_matrix(6, 8, rng);
        sgd_momentum_step(ens, lifted_backward(ens, lifted_forward(ens, X), random_labels(6, 3, rng)), vel, 0.05, 0.9, true);
    }
    double worst = 0.0;
    for (int c = 1; c < 3; ++c)
        for (int l = 0; l < 3; ++l) worst = std::max(worst, max_abs(ens.covers[std::size_t(c)].W[std::size_t(l)] - ens.covers[0].W[std::size_t(l)]));
    EXPECT_LT(worst, 1e-10);
}

TEST(Training, IdentityKernelTrainsIndependentNetworks) {
    Rng rng(17);
    const MlpArchitecture a = arch_of({5, 4, 3}, {5, 4});
    MlpCoverEnsemble<double> ens;
    ens.arch = a;
    ens.covers = init_covers<double>(a, 2, 0.5, rng);
    ens.mixers = build_mixers<double>(a, identity_kernel(2), 10, MixerMode::empirical, rng);
    std::vector<MlpCoverEnsemble<double>> singles(2);
    for (int c = 0; c < 2; ++c) {
        singles[std::size_t(c)].arch = a;
        singles[std::size_t(c)].covers = {ens.covers[std::size_t(c)]};
        singles[std::size_t(c)].mixers = build_mixers<double>(a, identity_kernel(1), 1, MixerMode::exact, rng);
    }
    auto vel = zero_velocity(ens);
    std::vector<Velocity<double>> sv{zero_velocity(singles[0]), zero_velocity(singles[1])};
    for (int step = 0; step < 20; ++step) {
        const MatD X = random_matrix(4, 5, rng);
        const auto y = random_labels(4, 3, rng);
        sgd_momentum_step(ens, lifted_backward(ens, lifted_forward(ens, X), y), vel, 0.05, 0.9, true);
        for (int c = 0; c < 2; ++c) {
            auto& s = singles[std::size_t(c)];
            sgd_momentum_step(s, lifted_backward(s, lifted_forward(s, X), y), sv[std::size_t(c)], 0.05, 0.9, true);
        }
    }
    for (int c = 0; c < 2; ++c) EXPECT_LT(max_abs(ens.covers[std::size_t(c)].W[0] - singles[std::size_t(c)].covers[0].W[0]), 1e-12);
}

TEST(Checkpoint, RoundTripBothPrecisions) {
    Rng rng(18);
    const MlpCoverEnsemble<double> ens = random_ensemble(arch_of({5, 4, 3}, {2, 2}), 2, rng);
    std::stringstream ss;
    save_checkpoint(ss, ens);
    const auto back = load_checkpoint<double>(ss);
    EXPECT_EQ(back.arch.dims, ens.arch.dims);
    EXPECT_EQ(back.arch.blocks, ens.arch.blocks);
    for (int c = 0; c < 2; ++c)
        for (int l = 0; l < 2; ++l) {
            EXPECT_EQ(back.covers[std::size_t(c)].W[std::size_t(l)], ens.covers[std::size_t(c)].W[std::size_t(l)]);
            EXPECT_EQ(back.covers[std::size_t(c)].b[std::size_t(l)], ens.covers[std::size_t(c)].b[std::size_t(l)]);
        }
    EXPECT_EQ(back.mixers.at(1, 2, 1), ens.mixers.at(1, 2, 1));
    std::stringstream again;
    save_checkpoint(again, ens);
    EXPECT_THROW(load_checkpoint<float>(again), ParseError);
    std::stringstream junk("not a checkpoint");
    EXPECT_THROW(load_checkpoint<double>(junk), BadMagic);
}

TEST(Training, DeterministicBySeed) {
    Rng rng(19);
    const MatD X = random_matrix(120, 6, rng), Xt = random_matrix(40, 6, rng);
    std::vector<int> y(120), yt(40);
    for (int i = 0; i < 120; ++i) y[std::size_t(i)] = X(i, 0) + X(i, 1) > 0 ? 1 : 0;
    for (int i = 0; i < 40; ++i) yt[std::size_t(i)] = Xt(i, 0) + Xt(i, 1) > 0 ? 1 : 0;
    MlpConfig cfg;
    cfg.dims = {6, 8, 2};
    cfg.M = 3;
    cfg.g_input = 2;
    cfg.g_hidden = 2;
    cfg.batch = 16;
    cfg.epochs = 15;
    const auto a = train_mlp<double>(cfg, X, y, Xt, yt, 4);
    const auto b = train_mlp<double>(cfg, X, y, Xt, yt, 4);
    EXPECT_EQ(a.test_error, b.test_error);
    EXPECT_EQ(a.train_loss, b.train_loss);
    EXPECT_EQ(a.test_error_trace.size(), 15u);
    EXPECT_LT(a.test_error, 0.2);
}
