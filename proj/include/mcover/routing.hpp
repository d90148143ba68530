#pragma once

// Cover-routing primitives: structured mixing kernels, Sinkhorn balancing,
// permanents, sampling from the permanent-weighted permutation law
//     P_Q(rho) = prod_a Q[a, rho(a)] / perm(Q),
// quenched permutation banks and the empirical mixers derived from them.
//
// Cover indices are 0-based in memory; the bank text format is 1-based.

#include <algorithm>
#include <bit>
#include <cmath>
#include <cstdint>
#include <istream>
#include <iterator>
#include <limits>
#include <numeric>
#include <ostream>
#include <sstream>
#include <string>
#include <utility>
#include <vector>

#include <Eigen/Dense>

#include "mcover/errors.hpp"
#include "mcover/rng.hpp"

namespace mcover {

enum class KernelFamily { gaussian_ring, uniform, identity, explicit_matrix };

inline std::string to_string(KernelFamily f) {
    switch (f) {
        case KernelFamily::gaussian_ring: return "ring";
        case KernelFamily::uniform: return "uniform";
        case KernelFamily::identity: return "identity";
        case KernelFamily::explicit_matrix: return "explicit";
    }
    return "?";
}

inline KernelFamily parse_kernel_family(const std::string& s) {
    if (s == "ring" || s == "gaussian_ring") return KernelFamily::gaussian_ring;
    if (s == "uniform") return KernelFamily::uniform;
    if (s == "identity") return KernelFamily::identity;
    if (s == "explicit") return KernelFamily::explicit_matrix;
    throw InvalidParameter("unknown kernel family '" + s + "'");
}

/// Nonnegative M x M kernel weighting complete matchings between covers.
struct MixKernel {
    KernelFamily family = KernelFamily::explicit_matrix;
    double mu = 0.0;
    double sigma = std::numeric_limits<double>::infinity();
    Eigen::MatrixXd Q;

    int size() const { return static_cast<int>(Q.rows()); }
    double operator()(int a, int b) const { return Q(a, b); }
};

/// Maximum |row sum - 1| and |column sum - 1|.
inline double doubly_stochastic_deviation(const Eigen::MatrixXd& Q) {
    const double rows = (Q.rowwise().sum().array() - 1.0).abs().maxCoeff();
    const double cols = (Q.colwise().sum().array() - 1.0).abs().maxCoeff();
    return std::max(rows, cols);
}

/// Signed distance from cover `beta` to the real-valued ring position `target`,
/// wrapped into (-M/2, M/2].
inline double ring_distance(double beta, double target, int M) {
    double d = std::fmod(beta - target, static_cast<double>(M));
    const double half = 0.5 * M;
    if (d > half) d -= M;
    if (d <= -half) d += M;
    return d;
}

inline void check_positive_entries(const Eigen::MatrixXd& Q) {
    if (Q.rows() != Q.cols() || Q.rows() == 0) throw InvalidInput("kernel must be a nonempty square matrix");
    if (!Q.allFinite() || (Q.array() < 0.0).any()) throw InvalidInput("kernel entries must be finite and >= 0");
}

/// Sinkhorn-Knopp: alternately normalize rows and columns until every row and
/// column sum lies within `tol` of 1.
inline MixKernel sinkhorn_balance(const MixKernel& in, int max_iters = 10000, double tol = 1e-8) {
    if (!(tol > 0.0)) throw InvalidParameter("sinkhorn tolerance must be positive");
    check_positive_entries(in.Q);
    if ((in.Q.rowwise().sum().array() <= 0.0).any() || (in.Q.colwise().sum().array() <= 0.0).any())
        throw InvalidInput("kernel has a zero row or column");

    MixKernel out = in;
    Eigen::MatrixXd& Q = out.Q;
    double dev = doubly_stochastic_deviation(Q);
    for (int it = 0; it < max_iters && !(dev < tol); ++it) {
        Q.array().colwise() /= Q.rowwise().sum().array();
        Q.array().rowwise() /= Q.colwise().sum().array();
        dev = doubly_stochastic_deviation(Q);
    }
    if (!(dev < tol))
        throw ConvergenceError("sinkhorn did not converge, deviation " + std::to_string(dev), dev);
    return out;
}

/// Raw ring weights Q[a][b] = exp(-d(b, a + mu)^2 / (2 sigma^2)), not balanced.
inline Eigen::MatrixXd gaussian_ring_weights(int M, double mu, double sigma) {
    if (M <= 0) throw InvalidParameter("cover count M must be >= 1");
    if (!(sigma > 0.0)) throw InvalidParameter("ring width sigma must be > 0");
    Eigen::MatrixXd Q(M, M);
    if (std::isinf(sigma)) {
        Q.setConstant(1.0);
        return Q;
    }
    for (int a = 0; a < M; ++a) {
        for (int b = 0; b < M; ++b) {
            const double d = ring_distance(b, a + mu, M);
            Q(a, b) = std::exp(-d * d / (2.0 * sigma * sigma));
        }
    }
    return Q;
}

inline MixKernel uniform_kernel(int M) {
    if (M <= 0) throw InvalidParameter("cover count M must be >= 1");
    MixKernel k;
    k.family = KernelFamily::uniform;
    k.Q = Eigen::MatrixXd::Constant(M, M, 1.0 / M);
    return k;
}

inline MixKernel identity_kernel(int M) {
    if (M <= 0) throw InvalidParameter("cover count M must be >= 1");
    MixKernel k;
    k.family = KernelFamily::identity;
    k.sigma = 0.0;
    k.Q = Eigen::MatrixXd::Identity(M, M);
    return k;
}

/// Balanced Gaussian-ring kernel. sigma = +inf yields the uniform kernel.
inline MixKernel gaussian_ring_kernel(int M, double mu, double sigma) {
    if (M <= 0) throw InvalidParameter("cover count M must be >= 1");
    if (!(sigma > 0.0)) throw InvalidParameter("ring width sigma must be > 0");
    if (std::isinf(sigma)) {
        MixKernel k = uniform_kernel(M);
        k.mu = mu;
        return k;
    }
    MixKernel k;
    k.family = KernelFamily::gaussian_ring;
    k.mu = mu;
    k.sigma = sigma;
    k.Q = gaussian_ring_weights(M, mu, sigma);
    return sinkhorn_balance(k);
}

inline MixKernel explicit_kernel(Eigen::MatrixXd Q, bool balance = true) {
    check_positive_entries(Q);
    MixKernel k;
    k.family = KernelFamily::explicit_matrix;
    k.Q = std::move(Q);
    return balance ? sinkhorn_balance(k) : k;
}

inline MixKernel make_kernel(KernelFamily family, int M, double mu, double sigma) {
    switch (family) {
        case KernelFamily::gaussian_ring: return gaussian_ring_kernel(M, mu, sigma);
        case KernelFamily::uniform: return uniform_kernel(M);
        case KernelFamily::identity: return identity_kernel(M);
        case KernelFamily::explicit_matrix: break;
    }
    throw InvalidParameter("explicit kernels must be built from a matrix");
}

inline constexpr int kMaxPermanentSize = 14;

/// Ryser's formula with Gray-code subset enumeration, O(2^M M).
inline double permanent(const Eigen::MatrixXd& Q) {
    const int n = static_cast<int>(Q.rows());
    if (Q.cols() != n) throw InvalidInput("permanent needs a square matrix");
    if (n > kMaxPermanentSize)
        throw UnsupportedSize("exact permanent limited to M <= 14; use the MCMC sampler, which never needs Z_Q");
    if (n == 0) return 1.0;

    std::vector<long double> row_sums(n, 0.0L);
    long double total = 0.0L;
    const std::uint64_t subsets = std::uint64_t{1} << n;
    std::uint64_t gray = 0;
    for (std::uint64_t k = 1; k < subsets; ++k) {
        const int j = std::countr_zero(k);
        const std::uint64_t bit = std::uint64_t{1} << j;
        gray ^= bit;
        const long double sign_in = (gray & bit) ? 1.0L : -1.0L;
        long double prod = 1.0L;
        for (int i = 0; i < n; ++i) {
            row_sums[i] += sign_in * Q(i, j);
            prod *= row_sums[i];
        }
        const int popcount = std::popcount(gray);
        total += ((n - popcount) % 2 == 0) ? prod : -prod;
    }
    return static_cast<double>(total);
}

inline double permanent(const MixKernel& k) { return permanent(k.Q); }

/// Bijection on {0..M-1}; image[a] is the cover that supplies destination cover a.
struct Permutation {
    std::vector<int> image;

    int size() const { return static_cast<int>(image.size()); }
    int operator()(int a) const { return image[static_cast<std::size_t>(a)]; }
    bool operator==(const Permutation&) const = default;

    static Permutation identity(int M) {
        Permutation p;
        p.image.resize(static_cast<std::size_t>(M));
        std::iota(p.image.begin(), p.image.end(), 0);
        return p;
    }

    bool is_bijection() const {
        std::vector<char> seen(image.size(), 0);
        for (int v : image) {
            if (v < 0 || v >= size() || seen[static_cast<std::size_t>(v)]) return false;
            seen[static_cast<std::size_t>(v)] = 1;
        }
        return true;
    }

    bool is_identity() const {
        for (int a = 0; a < size(); ++a)
            if (image[static_cast<std::size_t>(a)] != a) return false;
        return true;
    }

    Permutation inverse() const {
        Permutation inv;
        inv.image.resize(image.size());
        for (int a = 0; a < size(); ++a) inv.image[static_cast<std::size_t>(image[static_cast<std::size_t>(a)])] = a;
        return inv;
    }
};

/// prod_a Q[a, rho(a)]
inline double matching_weight(const Eigen::MatrixXd& Q, const Permutation& rho) {
    double w = 1.0;
    for (int a = 0; a < rho.size(); ++a) w *= Q(a, rho(a));
    return w;
}

enum class SamplingMethod { automatic, exact, mcmc };

inline constexpr int kExactSamplingMaxM = 8;

/// Draws permutations from P_Q. Exact enumeration for M <= 8 (the table is built
/// once), a transposition Metropolis chain above that.
class PermutationSampler {
public:
    explicit PermutationSampler(const MixKernel& kernel, SamplingMethod method = SamplingMethod::automatic)
        : M_(kernel.size()), Q_(kernel.Q) {
        check_positive_entries(Q_);
        if (method == SamplingMethod::automatic)
            method = (M_ <= kExactSamplingMaxM) ? SamplingMethod::exact : SamplingMethod::mcmc;
        if (method == SamplingMethod::exact && M_ > kExactSamplingMaxM + 2)
            throw UnsupportedSize("exact enumeration sampling limited to M <= 10");
        method_ = method;
        if (method_ == SamplingMethod::exact)
            build_table();
        else
            build_chain();
    }

    SamplingMethod method() const { return method_; }
    int size() const { return M_; }

    Permutation operator()(Rng& rng) const {
        return method_ == SamplingMethod::exact ? sample_exact(rng) : sample_mcmc(rng);
    }

    /// Enumerated (permutation, normalized probability) pairs; exact mode only.
    std::vector<std::pair<Permutation, double>> distribution() const {
        std::vector<std::pair<Permutation, double>> out;
        const double total = cdf_.back();
        double prev = 0.0;
        for (std::size_t i = 0; i < cdf_.size(); ++i) {
            out.emplace_back(table_entry(i), (cdf_[i] - prev) / total);
            prev = cdf_[i];
        }
        return out;
    }

private:
    void build_table() {
        std::vector<int> perm(static_cast<std::size_t>(M_));
        std::iota(perm.begin(), perm.end(), 0);
        double acc = 0.0;
        do {
            double w = 1.0;
            for (int a = 0; a < M_; ++a) w *= Q_(a, perm[static_cast<std::size_t>(a)]);
            if (w > 0.0) {
                acc += w;
                table_.insert(table_.end(), perm.begin(), perm.end());
                cdf_.push_back(acc);
            }
        } while (std::next_permutation(perm.begin(), perm.end()));
        if (cdf_.empty() || !(acc > 0.0)) throw DegenerateKernel("all permutation weights are zero");
    }

    Permutation table_entry(std::size_t i) const {
        Permutation p;
        const auto first = table_.begin() + static_cast<std::ptrdiff_t>(i * static_cast<std::size_t>(M_));
        p.image.assign(first, first + M_);
        return p;
    }

    Permutation sample_exact(Rng& rng) const {
        const double u = uniform01(rng) * cdf_.back();
        auto it = std::upper_bound(cdf_.begin(), cdf_.end(), u);
        if (it == cdf_.end()) --it;
        return table_entry(static_cast<std::size_t>(it - cdf_.begin()));
    }

    void build_chain() {
        log_q_ = Q_.array().log();
        // Greedy matching: take entries in decreasing weight order.
        std::vector<std::pair<int, int>> cells;
        for (int a = 0; a < M_; ++a)
            for (int b = 0; b < M_; ++b) cells.emplace_back(a, b);
        std::stable_sort(cells.begin(), cells.end(), [&](auto x, auto y) {
            return Q_(x.first, x.second) > Q_(y.first, y.second);
        });
        start_.image.assign(static_cast<std::size_t>(M_), -1);
        std::vector<char> col_used(static_cast<std::size_t>(M_), 0);
        for (auto [a, b] : cells) {
            if (start_.image[static_cast<std::size_t>(a)] < 0 && !col_used[static_cast<std::size_t>(b)]) {
                start_.image[static_cast<std::size_t>(a)] = b;
                col_used[static_cast<std::size_t>(b)] = 1;
            }
        }
        burn_in_ = 50L * M_ * M_;
    }

    Permutation sample_mcmc(Rng& rng) const {
        Permutation rho = start_;
        if (M_ == 1) return rho;
        std::uniform_int_distribution<int> pick(0, M_ - 1);
        std::uniform_int_distribution<int> pick_other(0, M_ - 2);
        const double neg_inf = -std::numeric_limits<double>::infinity();
        for (long step = 0; step < burn_in_; ++step) {
            const int a = pick(rng);
            int b = pick_other(rng);
            if (b >= a) ++b;
            const int ra = rho.image[static_cast<std::size_t>(a)];
            const int rb = rho.image[static_cast<std::size_t>(b)];
            const double cur = log_q_(a, ra) + log_q_(b, rb);
            const double prop = log_q_(a, rb) + log_q_(b, ra);
            bool accept;
            if (cur == neg_inf)
                accept = true;
            else if (prop == neg_inf)
                accept = false;
            else
                accept = prop >= cur || uniform01(rng) < std::exp(prop - cur);
            if (accept) std::swap(rho.image[static_cast<std::size_t>(a)], rho.image[static_cast<std::size_t>(b)]);
        }
        if (!(matching_weight(Q_, rho) > 0.0)) throw DegenerateKernel("MCMC chain found no positive-weight matching");
        return rho;
    }

    int M_;
    Eigen::MatrixXd Q_;
    SamplingMethod method_ = SamplingMethod::exact;
    std::vector<int> table_;
    std::vector<double> cdf_;
    Eigen::MatrixXd log_q_;
    Permutation start_;
    long burn_in_ = 0;
};

inline Permutation sample_permutation(const MixKernel& Q, Rng& rng,
                                      SamplingMethod method = SamplingMethod::automatic) {
    return PermutationSampler(Q, method)(rng);
}

/// Quenched set of routing permutations, fixed for the lifetime of a run.
class PermutationBank {
public:
    PermutationBank(std::vector<Permutation> perms, MixKernel source, std::uint64_t seed)
        : perms_(std::move(perms)), source_(std::move(source)), seed_(seed) {
        if (perms_.empty()) throw InvalidParameter("permutation bank must be nonempty");
        for (const auto& p : perms_)
            if (p.size() != source_.size() || !p.is_bijection())
                throw InvalidInput("bank entry is not a bijection on the cover set");
    }

    int size() const { return static_cast<int>(perms_.size()); }
    int covers() const { return source_.size(); }
    const Permutation& operator[](int s) const { return perms_[static_cast<std::size_t>(s)]; }
    const std::vector<Permutation>& perms() const { return perms_; }
    const MixKernel& source_kernel() const { return source_; }
    std::uint64_t seed() const { return seed_; }

private:
    std::vector<Permutation> perms_;
    MixKernel source_;
    std::uint64_t seed_;
};

inline PermutationBank sample_bank(const MixKernel& Q, int s_perm, std::uint64_t seed,
                                   SamplingMethod method = SamplingMethod::automatic) {
    if (s_perm < 1) throw InvalidParameter("S_perm must be >= 1");
    PermutationSampler sampler(Q, method);
    Rng rng(seed);
    std::vector<Permutation> perms;
    perms.reserve(static_cast<std::size_t>(s_perm));
    for (int s = 0; s < s_perm; ++s) perms.push_back(sampler(rng));
    return PermutationBank(std::move(perms), Q, seed);
}

/// Row-stochastic M x M matrix; row = destination cover, column = source cover.
struct EmpiricalMixer {
    Eigen::MatrixXd entries;
};

/// Qhat[b][a] = fraction of bank permutations with rho(b) == a.
inline EmpiricalMixer empirical_mixer(const PermutationBank& bank) {
    const int M = bank.covers();
    EmpiricalMixer mix{Eigen::MatrixXd::Zero(M, M)};
    for (const auto& rho : bank.perms())
        for (int b = 0; b < M; ++b) mix.entries(b, rho(b)) += 1.0;
    mix.entries /= static_cast<double>(bank.size());
    return mix;
}

/// One permutation per line, space-separated 1-based images.
inline void write_bank(std::ostream& os, const PermutationBank& bank) {
    for (const auto& rho : bank.perms()) {
        for (int a = 0; a < rho.size(); ++a) os << (a ? " " : "") << rho(a) + 1;
        os << '\n';
    }
}

inline std::vector<Permutation> read_bank_permutations(std::istream& is) {
    std::vector<Permutation> out;
    std::string line;
    std::size_t lineno = 0;
    while (std::getline(is, line)) {
        ++lineno;
        if (line.find_first_not_of(" \t\r") == std::string::npos) continue;
        std::istringstream ls(line);
        Permutation p;
        int v;
        while (ls >> v) p.image.push_back(v - 1);
        if (!ls.eof()) throw InvalidInput("bank line " + std::to_string(lineno) + ": non-integer token");
        if (!p.is_bijection()) throw InvalidInput("bank line " + std::to_string(lineno) + ": not a permutation");
        if (!out.empty() && p.size() != out.front().size())
            throw InvalidInput("bank line " + std::to_string(lineno) + ": inconsistent cover count");
        out.push_back(std::move(p));
    }
    return out;
}

/// Destination sites p_s and, for every (source site q, channel s), the routing
/// permutation rho_{q -> p_s}. Self pairs q == p_s route through the identity.
class DestinationBank {
public:
    DestinationBank(int N, std::vector<int> dest_sites, std::vector<Permutation> table, std::vector<int> route)
        : N_(N), dest_(std::move(dest_sites)), table_(std::move(table)), route_(std::move(route)) {
        S_ = static_cast<int>(dest_.size());
        if (S_ < 1) throw InvalidParameter("destination bank needs at least one channel");
        if (table_.empty()) throw InvalidParameter("route table is empty");
        M_ = table_.front().size();
        if (route_.size() != static_cast<std::size_t>(N_) * S_) throw InvalidInput("route table has wrong shape");
        for (const auto& p : table_)
            if (p.size() != M_ || !p.is_bijection()) throw InvalidInput("route table entry is not a bijection");
        for (int r : route_)
            if (r < 0 || r >= static_cast<int>(table_.size())) throw InvalidInput("route index out of range");
        for (int s = 0; s < S_; ++s) {
            if (dest_[static_cast<std::size_t>(s)] < 0 || dest_[static_cast<std::size_t>(s)] >= N_)
                throw InvalidInput("destination site out of range");
            if (!permutation(dest_[static_cast<std::size_t>(s)], s).is_identity())
                throw InvalidInput("self route rho_{p->p} must be the identity");
        }
        inverse_.resize(static_cast<std::size_t>(N_) * S_ * M_);
        for (int q = 0; q < N_; ++q)
            for (int s = 0; s < S_; ++s) {
                const auto& rho = permutation(q, s);
                for (int a = 0; a < M_; ++a) inverse_[index(q, s, rho(a))] = a;
            }
    }

    int sites() const { return N_; }
    int channels() const { return S_; }
    int covers() const { return M_; }
    const std::vector<int>& dest_sites() const { return dest_; }
    const Permutation& permutation(int q, int s) const {
        return table_[static_cast<std::size_t>(route_[static_cast<std::size_t>(q) * S_ + s])];
    }
    /// Cover supplying source q to destination copy a in channel s.
    int source_cover(int q, int s, int a) const { return permutation(q, s)(a); }
    /// Destination copy a in channel s that reads w_q^{(g)}.
    int reader(int q, int s, int g) const { return inverse_[index(q, s, g)]; }

private:
    std::size_t index(int q, int s, int a) const {
        return (static_cast<std::size_t>(q) * S_ + s) * M_ + a;
    }

    int N_, S_ = 0, M_ = 0;
    std::vector<int> dest_;
    std::vector<Permutation> table_;
    std::vector<int> route_;
    std::vector<int> inverse_;
};

/// S sites drawn without replacement; every (q, s) gets a uniformly chosen bank
/// permutation, except q == p_s which gets the identity.
inline DestinationBank build_destination_bank(int N, int S, const PermutationBank& bank, Rng& rng) {
    if (S < 1 || S > N) throw InvalidParameter("destination bank size must be in [1, N]");
    std::vector<int> sites(static_cast<std::size_t>(N));
    std::iota(sites.begin(), sites.end(), 0);
    std::vector<int> dest;
    std::sample(sites.begin(), sites.end(), std::back_inserter(dest), S, rng);
    std::shuffle(dest.begin(), dest.end(), rng);

    std::vector<Permutation> table = bank.perms();
    const int identity_index = static_cast<int>(table.size());
    table.push_back(Permutation::identity(bank.covers()));

    std::uniform_int_distribution<int> pick(0, bank.size() - 1);
    std::vector<int> route(static_cast<std::size_t>(N) * S);
    for (int q = 0; q < N; ++q)
        for (int s = 0; s < S; ++s)
            route[static_cast<std::size_t>(q) * S + s] = (q == dest[static_cast<std::size_t>(s)]) ? identity_index : pick(rng);
    return DestinationBank(N, std::move(dest), std::move(table), std::move(route));
}

}  // namespace mcover
