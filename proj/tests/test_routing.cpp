#include <cmath>
#include <limits>
#include <map>
#include <sstream>

#include <gtest/gtest.h>

#include "mcover/routing.hpp"
#include "oracles.hpp"

using namespace mcover;

namespace {

constexpr double kInf = std::numeric_limits<double>::infinity();

Eigen::MatrixXd random_positive(int M, Rng& rng) {
    std::uniform_real_distribution<double> u(0.05, 2.0);
    Eigen::MatrixXd Q(M, M);
    for (int a = 0; a < M; ++a)
        for (int b = 0; b < M; ++b) Q(a, b) = u(rng);
    return Q;
}

int row_argmax(const Eigen::MatrixXd& Q, int a) {
    Eigen::Index j;
    Q.row(a).maxCoeff(&j);
    return static_cast<int>(j);
}

std::vector<double> frequencies_over(const std::vector<std::pair<std::vector<int>, double>>& support,
                                     const PermutationSampler& sampler, Rng& rng, int draws) {
    std::map<std::vector<int>, std::size_t> index;
    for (std::size_t i = 0; i < support.size(); ++i) index[support[i].first] = i;
    std::vector<double> counts(support.size(), 0.0);
    for (int t = 0; t < draws; ++t) counts[index.at(sampler(rng).image)] += 1.0;
    return counts;
}

}  // namespace

TEST(GaussianRing, InfiniteWidthIsUniform) {
    auto k = gaussian_ring_kernel(4, 0.0, kInf);
    EXPECT_EQ(k.family, KernelFamily::uniform);
    for (int a = 0; a < 4; ++a)
        for (int b = 0; b < 4; ++b) EXPECT_EQ(k(a, b), k(0, 0));
}

TEST(GaussianRing, VanishingWidthIsNearIdentity) {
    auto k = gaussian_ring_kernel(4, 0.0, 1e-3);
    for (int a = 0; a < 4; ++a) EXPECT_EQ(row_argmax(k.Q, a), a);
}

TEST(GaussianRing, ShiftMovesThePeak) {
    // Raw formula evaluated by hand: exp(-d^2/(2*0.25)), d = wrapped b - (a+1).
    auto raw = gaussian_ring_weights(4, 1.0, 0.5);
    EXPECT_NEAR(raw(0, 1), 1.0, 1e-15);
    EXPECT_NEAR(raw(0, 0), std::exp(-2.0), 1e-15);
    EXPECT_NEAR(raw(0, 3), std::exp(-8.0), 1e-15);  // d = 3 - 1 = 2 lies on the (-2, 2] boundary
    auto k = gaussian_ring_kernel(4, 1.0, 0.5);
    for (int a = 0; a < 4; ++a) EXPECT_EQ(row_argmax(k.Q, a), (a + 1) % 4);
}

TEST(GaussianRing, RingDistanceWraps) {
    EXPECT_DOUBLE_EQ(ring_distance(0, 3.5, 4), 0.5);
    EXPECT_DOUBLE_EQ(ring_distance(3, 0.0, 4), -1.0);
    EXPECT_DOUBLE_EQ(ring_distance(2, 0.0, 4), 2.0);
    EXPECT_DOUBLE_EQ(ring_distance(1, 2.0 + 0.25, 5), -1.25);
}

TEST(GaussianRing, RejectsBadParameters) {
    EXPECT_THROW(gaussian_ring_kernel(0, 0.0, 1.0), InvalidParameter);
    EXPECT_THROW(gaussian_ring_kernel(3, 0.0, 0.0), InvalidParameter);
    EXPECT_THROW(gaussian_ring_kernel(3, 0.0, -1.0), InvalidParameter);
}

TEST(GaussianRing, BalancedRowsAndColumns) {
    for (int M : {1, 2, 3, 5, 8})
        for (double mu : {0.0, 0.7, 2.0})
            for (double sigma : {0.3, 1.5, 3.0}) {
                auto k = gaussian_ring_kernel(M, mu, sigma);
                EXPECT_LE(doubly_stochastic_deviation(k.Q), 1e-8);
                EXPECT_TRUE((k.Q.array() >= 0.0).all());
            }
}

TEST(Sinkhorn, UniformIsFixedPoint) {
    MixKernel k = uniform_kernel(5);
    auto out = sinkhorn_balance(k);
    EXPECT_EQ(out.Q, k.Q);
}

TEST(Sinkhorn, PermutationMatrixIsFixedPoint) {
    Eigen::MatrixXd P = Eigen::MatrixXd::Zero(3, 3);
    P(0, 2) = P(1, 0) = P(2, 1) = 1.0;
    auto out = sinkhorn_balance(explicit_kernel(P, false));
    EXPECT_EQ(out.Q, P);
}

TEST(Sinkhorn, TwoByTwo) {
    Eigen::MatrixXd A(2, 2);
    A << 2, 1, 1, 2;
    auto out = sinkhorn_balance(explicit_kernel(A, false));
    for (int i = 0; i < 2; ++i) {
        EXPECT_NEAR(out.Q.row(i).sum(), 1.0, 1e-8);
        EXPECT_NEAR(out.Q.col(i).sum(), 1.0, 1e-8);
    }
    EXPECT_NEAR(out.Q(0, 0), 2.0 / 3.0, 1e-8);
}

TEST(Sinkhorn, ZeroRowIsInvalid) {
    Eigen::MatrixXd A = Eigen::MatrixXd::Ones(3, 3);
    A.row(1).setZero();
    EXPECT_THROW(sinkhorn_balance(explicit_kernel(A, false)), InvalidInput);
}

TEST(Sinkhorn, NonConvergenceCarriesDeviation) {
    Rng rng(3);
    auto k = explicit_kernel(random_positive(6, rng), false);
    try {
        sinkhorn_balance(k, 1, 1e-15);
        FAIL() << "expected ConvergenceError";
    } catch (const ConvergenceError& e) {
        EXPECT_GT(e.final_deviation(), 0.0);
    }
}

TEST(Sinkhorn, PropertyDoublyStochasticClosure) {
    Rng rng(11);
    for (int M = 2; M <= 10; ++M)
        for (int rep = 0; rep < 10; ++rep) {
            auto out = sinkhorn_balance(explicit_kernel(random_positive(M, rng), false));
            EXPECT_LE(doubly_stochastic_deviation(out.Q), 1e-8) << "M=" << M;
        }
}

TEST(Permanent, HandValues) {
    EXPECT_DOUBLE_EQ(permanent(Eigen::MatrixXd::Identity(3, 3)), 1.0);
    EXPECT_DOUBLE_EQ(permanent(Eigen::MatrixXd::Ones(3, 3)), 6.0);
    Eigen::MatrixXd A(2, 2);
    A << 1, 2, 3, 4;
    EXPECT_DOUBLE_EQ(permanent(A), 10.0);
}

TEST(Permanent, RejectsLargeM) { EXPECT_THROW(permanent(Eigen::MatrixXd::Ones(15, 15)), UnsupportedSize); }

TEST(Permanent, MatchesEnumeration) {
    Rng rng(5);
    for (int M = 1; M <= 8; ++M)
        for (int rep = 0; rep < 3; ++rep) {
            Eigen::MatrixXd Q = random_positive(M, rng);
            const double ref = oracle::enumerated_permanent(Q);
            EXPECT_NEAR(permanent(Q), ref, 1e-10 * ref) << "M=" << M;
        }
}

TEST(Permanent, AllOnesIsFactorial) {
    double fact = 1.0;
    for (int M = 1; M <= 12; ++M) {
        fact *= M;
        EXPECT_NEAR(permanent(Eigen::MatrixXd::Ones(M, M)), fact, 1e-9 * fact);
    }
}

TEST(SamplePermutation, IdentityKernelAlwaysIdentity) {
    Rng rng(1);
    PermutationSampler sampler(identity_kernel(4));
    int hits = 0;
    for (int t = 0; t < 10000; ++t) hits += sampler(rng).is_identity();
    EXPECT_GE(hits, 9990);
}

TEST(SamplePermutation, UniformThreeChiSquare) {
    Rng rng(2);
    auto k = uniform_kernel(3);
    PermutationSampler sampler(k);
    auto support = oracle::enumerate_weights(k.Q);
    auto counts = frequencies_over(support, sampler, rng, 100000);
    std::vector<double> probs(support.size(), 1.0 / 6.0);
    EXPECT_GT(oracle::chi_square_p(counts, probs), 0.01);
}

TEST(SamplePermutation, TwoByTwoFrequencies) {
    Rng rng(4);
    Eigen::MatrixXd A(2, 2);
    A << 2, 1, 1, 2;
    PermutationSampler sampler(explicit_kernel(A, false));
    int ident = 0;
    const int n = 100000;
    for (int t = 0; t < n; ++t) ident += sampler(rng).is_identity();
    EXPECT_NEAR(ident / double(n), 0.8, 0.01);
}

TEST(SamplePermutation, DegenerateKernel) {
    Eigen::MatrixXd A = Eigen::MatrixXd::Zero(3, 3);
    A(0, 0) = A(1, 0) = A(2, 0) = 1.0;
    EXPECT_THROW(PermutationSampler(explicit_kernel(A, false)), DegenerateKernel);
}

TEST(SamplePermutation, PropertyExactLawChiSquare) {
    Rng rng(7);
    for (int M : {2, 3, 4}) {
        auto k = explicit_kernel(random_positive(M, rng));
        PermutationSampler sampler(k, SamplingMethod::exact);
        auto support = oracle::enumerate_weights(k.Q);
        const double z = permanent(k.Q);
        std::vector<double> probs;
        for (auto& [p, w] : support) probs.push_back(w / z);
        auto counts = frequencies_over(support, sampler, rng, 100000);
        EXPECT_GT(oracle::chi_square_p(counts, probs), 0.01) << "M=" << M;
    }
}

TEST(SamplePermutation, McmcAgreesWithExactAtSix) {
    Rng rng(9);
    auto k = gaussian_ring_kernel(6, 1.0, 1.0);
    auto support = oracle::enumerate_weights(k.Q);
    PermutationSampler exact(k, SamplingMethod::exact);
    PermutationSampler chain(k, SamplingMethod::mcmc);
    const int n = 100000;
    auto ce = frequencies_over(support, exact, rng, n);
    auto cm = frequencies_over(support, chain, rng, n);
    double tv = 0.0;
    for (std::size_t i = 0; i < support.size(); ++i) tv += std::abs(ce[i] - cm[i]) / n;
    EXPECT_LT(0.5 * tv, 0.03);
}

TEST(SamplePermutation, LargeMUsesChainAndReturnsBijections) {
    Rng rng(10);
    PermutationSampler sampler(gaussian_ring_kernel(12, 2.0, 1.5));
    EXPECT_EQ(sampler.method(), SamplingMethod::mcmc);
    for (int t = 0; t < 20; ++t) EXPECT_TRUE(sampler(rng).is_bijection());
}

TEST(SampleBank, IdentityKernel) {
    auto bank = sample_bank(identity_kernel(4), 5, 1);
    ASSERT_EQ(bank.size(), 5);
    for (const auto& p : bank.perms()) EXPECT_TRUE(p.is_identity());
}

TEST(SampleBank, LengthAndBijection) {
    auto bank = sample_bank(gaussian_ring_kernel(5, 2.0, 1.5), 10, 42);
    ASSERT_EQ(bank.size(), 10);
    for (const auto& p : bank.perms()) EXPECT_TRUE(p.is_bijection());
    EXPECT_THROW(sample_bank(uniform_kernel(3), 0, 1), InvalidParameter);
}

TEST(SampleBank, UniformTwoCoversHalfSwaps) {
    auto bank = sample_bank(uniform_kernel(2), 10000, 77);
    int ident = 0;
    for (const auto& p : bank.perms()) ident += p.is_identity();
    EXPECT_NEAR(ident / 10000.0, 0.5, 0.05);
}

TEST(SampleBank, SameSeedSameBank) {
    auto k = gaussian_ring_kernel(4, 2.0, 3.0);
    EXPECT_EQ(sample_bank(k, 10, 5).perms(), sample_bank(k, 10, 5).perms());
}

TEST(EmpiricalMixer, IdentityBank) {
    auto mix = empirical_mixer(sample_bank(identity_kernel(3), 4, 1));
    EXPECT_EQ(mix.entries, Eigen::MatrixXd::Identity(3, 3));
}

TEST(EmpiricalMixer, IdentityAndSwap) {
    PermutationBank bank({Permutation{{0, 1}}, Permutation{{1, 0}}}, uniform_kernel(2), 0);
    auto mix = empirical_mixer(bank);
    EXPECT_EQ(mix.entries, Eigen::MatrixXd::Constant(2, 2, 0.5));
}

TEST(EmpiricalMixer, RowsSumToOneAndAreMultiplesOfInverseS) {
    auto bank = sample_bank(gaussian_ring_kernel(6, 2.0, 1.5), 7, 3);
    auto mix = empirical_mixer(bank);
    for (int b = 0; b < 6; ++b) {
        EXPECT_NEAR(mix.entries.row(b).sum(), 1.0, 1e-12);
        for (int a = 0; a < 6; ++a) {
            const double scaled = mix.entries(b, a) * 7.0;
            EXPECT_NEAR(scaled, std::round(scaled), 1e-12);
        }
    }
}

TEST(EmpiricalMixer, ConvergesToPermanentMarginals) {
    auto k = gaussian_ring_kernel(3, 1.0, 0.8);
    auto mix = empirical_mixer(sample_bank(k, 100000, 8));
    Eigen::MatrixXd marg = oracle::enumerated_marginals(k.Q);
    EXPECT_LT((mix.entries - marg).cwiseAbs().maxCoeff(), 0.01);
}

TEST(BankText, RoundTripIsOneBased) {
    auto bank = sample_bank(gaussian_ring_kernel(4, 2.0, 3.0), 6, 21);
    std::ostringstream os;
    write_bank(os, bank);
    std::istringstream is(os.str());
    auto perms = read_bank_permutations(is);
    EXPECT_EQ(perms, bank.perms());
    EXPECT_EQ(os.str().find('0'), std::string::npos);
}

TEST(BankText, RejectsNonPermutation) {
    std::istringstream is("1 2 3\n1 1 3\n");
    EXPECT_THROW(read_bank_permutations(is), InvalidInput);
}
