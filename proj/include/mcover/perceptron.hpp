#pragma once

// Binary teacher-student perceptron trained by Glauber simulated annealing,
// either on one copy, on M replicas with a ferromagnetic coupling (RSA), or on
// the M-cover lift with a sampled destination bank.
//
// Margins are kept as raw integer sums h = sum_q G[mu][q] w_q; the real margin
// is h / sqrt(N). Keeping integers makes the incremental cache exact.

#include <algorithm>
#include <chrono>
#include <cmath>
#include <cstdint>
#include <numeric>
#include <span>
#include <vector>

#include "mcover/errors.hpp"
#include "mcover/rng.hpp"
#include "mcover/routing.hpp"

namespace mcover::perceptron {

using Spin = std::int8_t;

struct TeacherStudentInstance {
    int N = 0;
    int P = 0;
    double alpha = 0.0;
    std::vector<Spin> w_star;  // N
    std::vector<Spin> x;       // P x N raw patterns
    std::vector<Spin> y;       // P labels
    std::vector<Spin> G;       // P x N, G = y x
    std::vector<Spin> G_cols;  // N x P, column q of G stored contiguously

    Spin g(int mu, int q) const { return G[static_cast<std::size_t>(mu) * N + q]; }
    std::span<const Spin> row(int mu) const { return {G.data() + static_cast<std::size_t>(mu) * N, static_cast<std::size_t>(N)}; }
    std::span<const Spin> column(int q) const { return {G_cols.data() + static_cast<std::size_t>(q) * P, static_cast<std::size_t>(P)}; }
};

inline Spin random_spin(Rng& rng) { return (rng() >> 63) ? Spin{1} : Spin{-1}; }

inline int raw_margin(std::span<const Spin> g_row, std::span<const Spin> w) {
    int h = 0;
    for (std::size_t q = 0; q < w.size(); ++q) h += g_row[q] * w[q];
    return h;
}

/// Teacher, patterns and gauge. Patterns with a zero teacher margin are redrawn.
inline TeacherStudentInstance generate_instance(int N, double alpha, Rng& rng) {
    if (N < 1) throw InvalidParameter("N must be >= 1");
    if (!(alpha > 0.0)) throw InvalidParameter("alpha must be > 0");
    TeacherStudentInstance inst;
    inst.N = N;
    inst.alpha = alpha;
    inst.P = static_cast<int>(std::llround(alpha * N));
    if (inst.P < 1) throw InvalidParameter("alpha * N rounds to zero patterns");
    const auto n = static_cast<std::size_t>(N);
    const auto p = static_cast<std::size_t>(inst.P);

    inst.w_star.resize(n);
    for (auto& w : inst.w_star) w = random_spin(rng);
    inst.x.resize(p * n);
    inst.y.resize(p);
    inst.G.resize(p * n);
    for (std::size_t mu = 0; mu < p; ++mu) {
        std::span<Spin> xr(inst.x.data() + mu * n, n);
        int h = 0;
        do {
            for (auto& v : xr) v = random_spin(rng);
            h = raw_margin(xr, inst.w_star);
        } while (h == 0);
        const Spin label = h > 0 ? 1 : -1;
        inst.y[mu] = label;
        for (std::size_t q = 0; q < n; ++q) inst.G[mu * n + q] = static_cast<Spin>(label * xr[q]);
    }
    inst.G_cols.resize(p * n);
    for (std::size_t mu = 0; mu < p; ++mu)
        for (std::size_t q = 0; q < n; ++q) inst.G_cols[q * p + mu] = inst.G[mu * n + q];
    return inst;
}

/// M x N spins, cover-major.
struct BinaryCoverEnsemble {
    int M = 0;
    int N = 0;
    std::vector<Spin> w;

    Spin at(int a, int q) const { return w[static_cast<std::size_t>(a) * N + q]; }
    Spin& at(int a, int q) { return w[static_cast<std::size_t>(a) * N + q]; }
    std::span<const Spin> cover(int a) const { return {w.data() + static_cast<std::size_t>(a) * N, static_cast<std::size_t>(N)}; }
    bool operator==(const BinaryCoverEnsemble&) const = default;
};

inline BinaryCoverEnsemble random_ensemble(int M, int N, Rng& rng) {
    BinaryCoverEnsemble e{M, N, std::vector<Spin>(static_cast<std::size_t>(M) * N)};
    for (auto& s : e.w) s = random_spin(rng);
    return e;
}

/// Number of patterns with margin <= 0 (ties count as errors).
template <class T>
int pattern_errors(std::span<const T> margins) {
    int e = 0;
    for (T m : margins) e += (m <= T{0});
    return e;
}

inline std::vector<int> base_margins(const TeacherStudentInstance& inst, std::span<const Spin> w) {
    std::vector<int> h(static_cast<std::size_t>(inst.P));
    for (int mu = 0; mu < inst.P; ++mu) h[static_cast<std::size_t>(mu)] = raw_margin(inst.row(mu), w);
    return h;
}

inline int base_energy(const TeacherStudentInstance& inst, std::span<const Spin> w) {
    auto h = base_margins(inst, w);
    return pattern_errors<int>(h);
}

/// Linear temperature ramp from t_max down to t_min in steps of dt.
struct AnnealSchedule {
    double t_max = 0.4;
    double t_min = 1e-2;
    double dt = 1e-4;

    void validate() const {
        if (!(t_max > t_min && t_min > 0.0)) throw InvalidParameter("schedule needs t_max > t_min > 0");
        if (!(dt > 0.0)) throw InvalidParameter("schedule step dt must be > 0");
    }

    int sweeps() const {
        validate();
        return static_cast<int>(std::ceil((t_max - t_min) / dt - 1e-9));
    }

    /// Strictly decreasing; the last sweep runs at exactly t_min.
    double temperature(int k) const {
        const int n = sweeps();
        if (k >= n - 1) return t_min;
        return t_max - k * dt;
    }
};

inline double glauber_flip_probability(double delta_e, double T) {
    if (!(T > 0.0)) throw InvalidParameter("temperature must be > 0");
    return 1.0 / (1.0 + std::exp(delta_e / T));
}

/// Routed margins h[s][a][mu] = sum_q G[mu][q] w_q^{(rho_{q->p_s}(a))} with their
/// per-slice pattern-error counts, updated incrementally on single spin flips.
class RoutedMarginCache {
public:
    RoutedMarginCache(const TeacherStudentInstance& inst, const BinaryCoverEnsemble& ens, const DestinationBank& dest)
        : inst_(&inst), dest_(&dest), S_(dest.channels()), M_(ens.M), P_(inst.P) {
        if (ens.M != dest.covers() || ens.N != inst.N || dest.sites() != inst.N)
            throw InvalidInput("routed margin cache: shape mismatch");
        h_ = recompute(ens);
        errors_.resize(static_cast<std::size_t>(S_) * M_);
        for (int s = 0; s < S_; ++s)
            for (int a = 0; a < M_; ++a) errors_[slot(s, a)] = pattern_errors<std::int32_t>(slice(s, a));
        delta_.resize(static_cast<std::size_t>(S_));
    }

    int channels() const { return S_; }
    int covers() const { return M_; }
    int patterns() const { return P_; }

    std::span<const std::int32_t> slice(int s, int a) const {
        return {h_.data() + slot(s, a) * P_, static_cast<std::size_t>(P_)};
    }
    double margin(int s, int a, int mu) const { return slice(s, a)[static_cast<std::size_t>(mu)] / std::sqrt(double(inst_->N)); }
    int slice_errors(int s, int a) const { return errors_[slot(s, a)]; }

    /// (1/S) sum_s sum_a E_{s,a}
    double lifted_energy() const {
        const long total = std::accumulate(errors_.begin(), errors_.end(), 0L);
        return static_cast<double>(total) / S_;
    }

    /// Summed change of slice error counts if w_q^{(g)} (currently `w_old`) flips.
    int flip_error_delta(int q, int g, Spin w_old) {
        const auto col = inst_->column(q);
        const int step = -2 * w_old;
        int total = 0;
        for (int s = 0; s < S_; ++s) {
            const std::int32_t* h = h_.data() + slot(s, dest_->reader(q, s, g)) * P_;
            int d = 0;
            for (int mu = 0; mu < P_; ++mu) {
                const std::int32_t now = h[mu];
                const std::int32_t next = now + step * col[static_cast<std::size_t>(mu)];
                d += static_cast<int>(next <= 0) - static_cast<int>(now <= 0);
            }
            delta_[static_cast<std::size_t>(s)] = d;
            total += d;
        }
        return total;
    }

    /// Applies the flip whose delta was just computed by flip_error_delta.
    void apply_flip(int q, int g, Spin w_old) {
        const auto col = inst_->column(q);
        const int step = -2 * w_old;
        for (int s = 0; s < S_; ++s) {
            const std::size_t sl = slot(s, dest_->reader(q, s, g));
            std::int32_t* h = h_.data() + sl * P_;
            for (int mu = 0; mu < P_; ++mu) h[mu] += step * col[static_cast<std::size_t>(mu)];
            errors_[sl] += delta_[static_cast<std::size_t>(s)];
        }
    }

    /// From-scratch evaluation of every routed margin for `ens`.
    std::vector<std::int32_t> recompute(const BinaryCoverEnsemble& ens) const {
        std::vector<std::int32_t> h(static_cast<std::size_t>(S_) * M_ * P_, 0);
        std::vector<Spin> routed(static_cast<std::size_t>(inst_->N));
        for (int s = 0; s < S_; ++s)
            for (int a = 0; a < M_; ++a) {
                for (int q = 0; q < inst_->N; ++q) routed[static_cast<std::size_t>(q)] = ens.at(dest_->source_cover(q, s, a), q);
                for (int mu = 0; mu < P_; ++mu) h[slot(s, a) * P_ + mu] = raw_margin(inst_->row(mu), routed);
            }
        return h;
    }

    bool consistent_with(const BinaryCoverEnsemble& ens) const {
        if (recompute(ens) != h_) return false;
        for (int s = 0; s < S_; ++s)
            for (int a = 0; a < M_; ++a)
                if (errors_[slot(s, a)] != pattern_errors<std::int32_t>(slice(s, a))) return false;
        return true;
    }

private:
    std::size_t slot(int s, int a) const { return static_cast<std::size_t>(s) * M_ + a; }

    const TeacherStudentInstance* inst_;
    const DestinationBank* dest_;
    int S_, M_, P_;
    std::vector<std::int32_t> h_;
    std::vector<int> errors_;
    std::vector<int> delta_;
};

struct AnnealResult {
    BinaryCoverEnsemble ensemble;
    double final_energy = 0.0;
    int sweeps = 0;
    std::vector<double> energy_trace;  // energy after each sweep
};

namespace detail {

/// One Glauber sweep over all (cover, site) pairs in random order. `delta(a, q)`
/// returns the energy change of flipping w_q^{(a)}; `apply(a, q)` commits it.
template <class Delta, class Apply>
void glauber_sweep(BinaryCoverEnsemble& ens, double T, Rng& rng, std::vector<int>& order, Delta&& delta, Apply&& apply) {
    std::shuffle(order.begin(), order.end(), rng);
    for (int idx : order) {
        const int a = idx / ens.N;
        const int q = idx % ens.N;
        const double dE = delta(a, q);
        const double p = glauber_flip_probability(dE, T);
        if (uniform01(rng) < p) {
            apply(a, q);
            ens.at(a, q) = static_cast<Spin>(-ens.at(a, q));
        }
    }
}

}  // namespace detail

/// Single-copy simulated annealing on the pattern-error count.
inline AnnealResult vanilla_anneal(const TeacherStudentInstance& inst, BinaryCoverEnsemble w, const AnnealSchedule& schedule,
                                   Rng& rng, bool keep_trace = false) {
    if (w.M != 1 || w.N != inst.N) throw InvalidInput("vanilla annealing needs a single N-spin copy");
    auto h = base_margins(inst, w.cover(0));
    int energy = pattern_errors<int>(h);
    std::vector<int> order(static_cast<std::size_t>(inst.N));
    std::iota(order.begin(), order.end(), 0);
    const int sweeps = schedule.sweeps();
    AnnealResult res;
    int last_delta = 0;

    auto delta = [&](int, int q) {
        const auto col = inst.column(q);
        const int step = -2 * w.at(0, q);
        int d = 0;
        for (int mu = 0; mu < inst.P; ++mu) {
            const int now = h[static_cast<std::size_t>(mu)];
            d += static_cast<int>(now + step * col[static_cast<std::size_t>(mu)] <= 0) - static_cast<int>(now <= 0);
        }
        last_delta = d;
        return static_cast<double>(d);
    };
    auto apply = [&](int, int q) {
        const auto col = inst.column(q);
        const int step = -2 * w.at(0, q);
        for (int mu = 0; mu < inst.P; ++mu) h[static_cast<std::size_t>(mu)] += step * col[static_cast<std::size_t>(mu)];
        energy += last_delta;
    };
    for (int k = 0; k < sweeps; ++k) {
        detail::glauber_sweep(w, schedule.temperature(k), rng, order, delta, apply);
        if (keep_trace) res.energy_trace.push_back(energy);
    }
    res.ensemble = std::move(w);
    res.final_energy = energy;
    res.sweeps = sweeps;
    return res;
}

/// Glauber annealing of the lifted energy (1/S) sum_s sum_a E_{s,a}. The cache
/// must describe `ens` on entry and describes the returned ensemble on exit.
inline AnnealResult mcover_anneal(const TeacherStudentInstance& inst, BinaryCoverEnsemble ens, const DestinationBank& dest,
                                  RoutedMarginCache& cache, const AnnealSchedule& schedule, Rng& rng,
                                  bool keep_trace = false) {
    if (ens.N != inst.N || ens.M != dest.covers()) throw InvalidInput("mcover annealing: shape mismatch");
    std::vector<int> order(static_cast<std::size_t>(ens.M) * ens.N);
    std::iota(order.begin(), order.end(), 0);
    const double inv_s = 1.0 / cache.channels();
    const int sweeps = schedule.sweeps();
    AnnealResult res;

    auto delta = [&](int a, int q) { return cache.flip_error_delta(q, a, ens.at(a, q)) * inv_s; };
    auto apply = [&](int a, int q) { cache.apply_flip(q, a, ens.at(a, q)); };
    for (int k = 0; k < sweeps; ++k) {
        detail::glauber_sweep(ens, schedule.temperature(k), rng, order, delta, apply);
        if (keep_trace) res.energy_trace.push_back(cache.lifted_energy());
    }
    res.final_energy = cache.lifted_energy();
    res.ensemble = std::move(ens);
    res.sweeps = sweeps;
    return res;
}

/// -(gamma/N) sum_{a<b} sum_q w_q^{(a)} w_q^{(b)}
inline double rsa_coupling_energy(const BinaryCoverEnsemble& ens, double gamma) {
    double acc = 0.0;
    for (int q = 0; q < ens.N; ++q) {
        int col = 0;
        for (int a = 0; a < ens.M; ++a) col += ens.at(a, q);
        // sum_{a<b} w_a w_b = (col^2 - M) / 2
        acc += 0.5 * (col * col - ens.M);
    }
    return -gamma / ens.N * acc;
}

/// Replicated simulated annealing: every replica carries its own pattern-error
/// energy plus the pairwise ferromagnetic coupling. Each sweep visits the
/// replicas in order; replica a shuffles its sites and draws acceptances from
/// `rngs[a]`, so with gamma = 0 each replica reproduces an independent run.
inline AnnealResult rsa_anneal(const TeacherStudentInstance& inst, BinaryCoverEnsemble ens, double gamma,
                               const AnnealSchedule& schedule, std::span<Rng> rngs, bool keep_trace = false) {
    if (ens.M < 2) throw InvalidParameter("RSA needs M >= 2 replicas");
    if (ens.N != inst.N || rngs.size() != static_cast<std::size_t>(ens.M)) throw InvalidInput("rsa annealing: shape mismatch");
    const int M = ens.M;
    const int N = ens.N;
    std::vector<std::vector<int>> h(static_cast<std::size_t>(M));
    std::vector<int> energy(static_cast<std::size_t>(M));
    for (int a = 0; a < M; ++a) {
        h[static_cast<std::size_t>(a)] = base_margins(inst, ens.cover(a));
        energy[static_cast<std::size_t>(a)] = pattern_errors<int>(h[static_cast<std::size_t>(a)]);
    }
    std::vector<int> site_sum(static_cast<std::size_t>(N), 0);
    for (int q = 0; q < N; ++q)
        for (int a = 0; a < M; ++a) site_sum[static_cast<std::size_t>(q)] += ens.at(a, q);

    std::vector<std::vector<int>> orders(static_cast<std::size_t>(M), std::vector<int>(static_cast<std::size_t>(N)));
    for (auto& o : orders) std::iota(o.begin(), o.end(), 0);
    const int sweeps = schedule.sweeps();
    const double coupling = 2.0 * gamma / N;
    AnnealResult res;
    for (int k = 0; k < sweeps; ++k) {
        const double T = schedule.temperature(k);
        for (int a = 0; a < M; ++a) {
            Rng& rng = rngs[static_cast<std::size_t>(a)];
            auto& ha = h[static_cast<std::size_t>(a)];
            auto& order = orders[static_cast<std::size_t>(a)];
            std::shuffle(order.begin(), order.end(), rng);
            for (int q : order) {
                const Spin w_old = ens.at(a, q);
                const auto col = inst.column(q);
                const int step = -2 * w_old;
                int d = 0;
                for (int mu = 0; mu < inst.P; ++mu) {
                    const int now = ha[static_cast<std::size_t>(mu)];
                    d += static_cast<int>(now + step * col[static_cast<std::size_t>(mu)] <= 0) - static_cast<int>(now <= 0);
                }
                const double dE = d + coupling * w_old * (site_sum[static_cast<std::size_t>(q)] - w_old);
                if (uniform01(rng) < glauber_flip_probability(dE, T)) {
                    for (int mu = 0; mu < inst.P; ++mu) ha[static_cast<std::size_t>(mu)] += step * col[static_cast<std::size_t>(mu)];
                    energy[static_cast<std::size_t>(a)] += d;
                    site_sum[static_cast<std::size_t>(q)] += step;
                    ens.at(a, q) = static_cast<Spin>(-w_old);
                }
            }
        }
        if (keep_trace)
            res.energy_trace.push_back(std::accumulate(energy.begin(), energy.end(), 0.0) + rsa_coupling_energy(ens, gamma));
    }
    res.final_energy = std::accumulate(energy.begin(), energy.end(), 0.0) + rsa_coupling_energy(ens, gamma);
    res.ensemble = std::move(ens);
    res.sweeps = sweeps;
    return res;
}

struct Overlap {
    double R = 0.0;
    double eps_g = 0.5;
};

inline double generalization_error(double R) {
    return std::acos(std::clamp(R, -1.0, 1.0)) / M_PI;
}

/// Averages the covers and scores the result against the teacher.
inline Overlap collapse_and_score(const BinaryCoverEnsemble& ens, std::span<const Spin> w_star) {
    if (w_star.size() != static_cast<std::size_t>(ens.N)) throw InvalidInput("teacher length mismatch");
    double dot = 0.0, norm2 = 0.0;
    for (int q = 0; q < ens.N; ++q) {
        double mean = 0.0;
        for (int a = 0; a < ens.M; ++a) mean += ens.at(a, q);
        mean /= ens.M;
        dot += mean * w_star[static_cast<std::size_t>(q)];
        norm2 += mean * mean;
    }
    if (norm2 == 0.0) throw DegenerateCollapse("collapsed weight vector is zero");
    const double R = std::clamp(dot / (std::sqrt(norm2) * std::sqrt(double(ens.N))), -1.0, 1.0);
    return {R, generalization_error(R)};
}

enum class Method { vanilla, rsa, mcover };

inline std::string to_string(Method m) {
    switch (m) {
        case Method::vanilla: return "vanilla";
        case Method::rsa: return "rsa";
        case Method::mcover: return "mcover";
    }
    return "?";
}

inline Method parse_method(const std::string& s) {
    if (s == "vanilla") return Method::vanilla;
    if (s == "rsa") return Method::rsa;
    if (s == "mcover") return Method::mcover;
    throw InvalidParameter("unknown perceptron method '" + s + "'");
}

struct TrialConfig {
    int N = 1000;
    double alpha = 1.58;
    int M = 3;
    Method method = Method::mcover;
    KernelFamily kernel = KernelFamily::gaussian_ring;
    double mu = 2.0;
    double sigma = 1.5;
    int s_perm = 10;
    int dest_s = 10;
    double gamma = 1.0;
    AnnealSchedule schedule{};
};

struct TrialOutcome {
    Overlap overlap;
    double final_energy = 0.0;
    int sweeps = 0;
    int M = 1;
    bool degenerate = false;
    double wall_ms = 0.0;
};

/// One seeded trial. Instance, routing setup, initialization and dynamics draw
/// from separate sub-streams of `seed`, so methods sharing a seed see the same instance.
inline TrialOutcome run_trial(const TrialConfig& cfg, std::uint64_t seed) {
    const auto t0 = std::chrono::steady_clock::now();
    Rng inst_rng = make_rng(seed, 0);
    Rng setup_rng = make_rng(seed, 1);
    Rng init_rng = make_rng(seed, 2);
    Rng dyn_rng = make_rng(seed, 3);
    const auto inst = generate_instance(cfg.N, cfg.alpha, inst_rng);

    TrialOutcome out;
    AnnealResult res;
    switch (cfg.method) {
        case Method::vanilla: {
            out.M = 1;
            res = vanilla_anneal(inst, random_ensemble(1, cfg.N, init_rng), cfg.schedule, dyn_rng);
            break;
        }
        case Method::rsa: {
            out.M = cfg.M;
            std::vector<Rng> rngs;
            for (int a = 0; a < cfg.M; ++a) rngs.push_back(make_rng(seed, 100 + static_cast<std::uint64_t>(a)));
            res = rsa_anneal(inst, random_ensemble(cfg.M, cfg.N, init_rng), cfg.gamma, cfg.schedule, rngs);
            break;
        }
        case Method::mcover: {
            out.M = cfg.M;
            const auto kernel = make_kernel(cfg.kernel, cfg.M, cfg.mu, cfg.sigma);
            const auto bank = sample_bank(kernel, cfg.s_perm, setup_rng());
            const auto dest = build_destination_bank(cfg.N, cfg.dest_s, bank, setup_rng);
            auto ens = random_ensemble(cfg.M, cfg.N, init_rng);
            RoutedMarginCache cache(inst, ens, dest);
            res = mcover_anneal(inst, std::move(ens), dest, cache, cfg.schedule, dyn_rng);
            break;
        }
    }
    out.final_energy = res.final_energy;
    out.sweeps = res.sweeps;
    try {
        out.overlap = collapse_and_score(res.ensemble, inst.w_star);
    } catch (const DegenerateCollapse&) {
        out.overlap = {0.0, 0.5};
        out.degenerate = true;
    }
    out.wall_ms = std::chrono::duration<double, std::milli>(std::chrono::steady_clock::now() - t0).count();
    return out;
}

}  // namespace mcover::perceptron
